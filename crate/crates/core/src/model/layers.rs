//! Parameterized building blocks shared by the encoders and the query transformer.

use crate::autodiff::{Init, ParamId, ParamStore, Tape, Var};
use crate::error::Result;
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize, init: Init) -> Result<Self> {
        Ok(Self {
            weight: store.add(&format!("{name}.weight"), &[d_in, d_out], init)?,
            bias: store.add(&format!("{name}.bias"), &[d_out], Init::Const(0.0))?,
        })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let w = tape.param(store, self.weight);
        let b = tape.param(store, self.bias);
        let y = tape.matmul(x, w)?;
        tape.add(y, b)
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, d: usize, eps: f64) -> Result<Self> {
        Ok(Self {
            gain: store.add(&format!("{name}.gain"), &[d], Init::Const(1.0))?,
            bias: store.add(&format!("{name}.bias"), &[d], Init::Const(0.0))?,
            eps,
        })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let g = tape.param(store, self.gain);
        let b = tape.param(store, self.bias);
        tape.layer_norm(x, g, b, self.eps)
    }
}

#[derive(Debug, Clone)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

impl FeedForward {
    pub fn new(store: &mut ParamStore, name: &str, d: usize, hidden: usize, init: Init) -> Result<Self> {
        Ok(Self {
            up: Linear::new(store, &format!("{name}.up"), d, hidden, init)?,
            down: Linear::new(store, &format!("{name}.down"), hidden, d, init)?,
        })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let h = self.up.forward(tape, store, x)?;
        let h = tape.relu(h);
        self.down.forward(tape, store, h)
    }
}

/// Scaled dot-product attention with `heads` heads over `(n, d)` queries and `(m, d)` keys.
#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    pub heads: usize,
}

impl MultiHeadAttention {
    pub fn new(store: &mut ParamStore, name: &str, d: usize, heads: usize, init: Init) -> Result<Self> {
        Ok(Self {
            q: Linear::new(store, &format!("{name}.q"), d, d, init)?,
            k: Linear::new(store, &format!("{name}.k"), d, d, init)?,
            v: Linear::new(store, &format!("{name}.v"), d, d, init)?,
            out: Linear::new(store, &format!("{name}.out"), d, d, init)?,
            heads,
        })
    }

    /// Returns the `(n, d)` output and the `(heads, n, m)` attention weights.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, xq: Var, xkv: Var) -> Result<(Var, Var)> {
        let (n, d) = (tape.shape(xq)[0], tape.shape(xq)[1]);
        let m = tape.shape(xkv)[0];
        let (h, dk) = (self.heads, d / self.heads);
        let q = self.q.forward(tape, store, xq)?;
        let q = tape.reshape(q, &[n, h, dk])?;
        let q = tape.permute(q, &[1, 0, 2])?;
        let k = self.k.forward(tape, store, xkv)?;
        let k = tape.reshape(k, &[m, h, dk])?;
        let k = tape.permute(k, &[1, 2, 0])?;
        let v = self.v.forward(tape, store, xkv)?;
        let v = tape.reshape(v, &[m, h, dk])?;
        let v = tape.permute(v, &[1, 0, 2])?;
        let scores = tape.matmul(q, k)?;
        let scores = tape.scale(scores, 1.0 / (dk as f64).sqrt());
        let attn = tape.softmax(scores, 2)?;
        let ctx = tape.matmul(attn, v)?;
        let ctx = tape.permute(ctx, &[1, 0, 2])?;
        let ctx = tape.reshape(ctx, &[n, d])?;
        Ok((self.out.forward(tape, store, ctx)?, attn))
    }
}

/// Pre-norm encoder layer: `x + MSA(LN x)`, then `x + FFN(LN x)`.
#[derive(Debug, Clone)]
pub struct EncoderLayer {
    pub ln_attn: LayerNorm,
    pub attn: MultiHeadAttention,
    pub ln_ffn: LayerNorm,
    pub ffn: FeedForward,
}

impl EncoderLayer {
    pub fn new(store: &mut ParamStore, name: &str, d: usize, heads: usize, hidden: usize, eps: f64, init: Init) -> Result<Self> {
        Ok(Self {
            ln_attn: LayerNorm::new(store, &format!("{name}.ln_attn"), d, eps)?,
            attn: MultiHeadAttention::new(store, &format!("{name}.attn"), d, heads, init)?,
            ln_ffn: LayerNorm::new(store, &format!("{name}.ln_ffn"), d, eps)?,
            ffn: FeedForward::new(store, &format!("{name}.ffn"), d, hidden, init)?,
        })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<(Var, Var)> {
        let h = self.ln_attn.forward(tape, store, x)?;
        let (a, attn) = self.attn.forward(tape, store, h, h)?;
        let x = tape.add(x, a)?;
        let h = self.ln_ffn.forward(tape, store, x)?;
        let f = self.ffn.forward(tape, store, h)?;
        Ok((tape.add(x, f)?, attn))
    }
}

/// Pre-norm decoder layer: query self-attention, cross-attention to memory, FFN.
#[derive(Debug, Clone)]
pub struct DecoderLayer {
    pub ln_self: LayerNorm,
    pub self_attn: MultiHeadAttention,
    pub ln_cross: LayerNorm,
    pub cross_attn: MultiHeadAttention,
    pub ln_ffn: LayerNorm,
    pub ffn: FeedForward,
}

pub struct DecoderMaps {
    pub self_attn: Var,
    pub cross_attn: Var,
}

impl DecoderLayer {
    pub fn new(store: &mut ParamStore, name: &str, d: usize, heads: usize, hidden: usize, eps: f64, init: Init) -> Result<Self> {
        Ok(Self {
            ln_self: LayerNorm::new(store, &format!("{name}.ln_self"), d, eps)?,
            self_attn: MultiHeadAttention::new(store, &format!("{name}.self_attn"), d, heads, init)?,
            ln_cross: LayerNorm::new(store, &format!("{name}.ln_cross"), d, eps)?,
            cross_attn: MultiHeadAttention::new(store, &format!("{name}.cross_attn"), d, heads, init)?,
            ln_ffn: LayerNorm::new(store, &format!("{name}.ln_ffn"), d, eps)?,
            ffn: FeedForward::new(store, &format!("{name}.ffn"), d, hidden, init)?,
        })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, y: Var, memory: Var) -> Result<(Var, DecoderMaps)> {
        let h = self.ln_self.forward(tape, store, y)?;
        let (a, self_attn) = self.self_attn.forward(tape, store, h, h)?;
        let y = tape.add(y, a)?;
        let h = self.ln_cross.forward(tape, store, y)?;
        let (c, cross_attn) = self.cross_attn.forward(tape, store, h, memory)?;
        let y = tape.add(y, c)?;
        let h = self.ln_ffn.forward(tape, store, y)?;
        let f = self.ffn.forward(tape, store, h)?;
        Ok((tape.add(y, f)?, DecoderMaps { self_attn, cross_attn }))
    }
}

/// Mean over heads of a `(heads, n, m)` attention tensor.
pub fn head_mean(attn: &Tensor) -> Tensor {
    let s = attn.shape();
    let (h, n, m) = (s[0], s[1], s[2]);
    Tensor::from_fn(&[n, m], |i| (0..h).map(|k| attn.data()[k * n * m + i]).sum::<f64>() / h as f64)
}
