//! Small trainable stand-ins for the pretrained text and visual encoders,
//! plus the fixed position encodings and grid-to-sequence resampling.

use crate::autodiff::{ParamId, ParamStore, Tape, Var};
use crate::error::{Error, Result};
use crate::model::config::ModelConfig;
use crate::model::layers::{EncoderLayer, LayerNorm, Linear};
use crate::tensor::Tensor;

const POS_BASE: f64 = 10_000.0;

/// 1-D sinusoidal encoding, `(len, d)`: even channels sine, odd channels cosine.
pub fn sinusoid_1d(len: usize, d: usize) -> Tensor {
    Tensor::from_fn(&[len, d], |i| {
        let (pos, c) = ((i / d) as f64, i % d);
        let freq = POS_BASE.powf(-((c / 2 * 2) as f64) / d as f64);
        if c % 2 == 0 {
            (pos * freq).sin()
        } else {
            (pos * freq).cos()
        }
    })
}

/// 2-D sinusoidal encoding for a `g x g` grid in row-major patch order, `(g^2, d)`.
/// The first `d/2` channels encode the column (x), the rest the row (y).
pub fn sinusoid_2d(g: usize, d: usize) -> Tensor {
    let half = d / 2;
    let col = sinusoid_1d(g, half);
    let row = sinusoid_1d(g, half);
    Tensor::from_fn(&[g * g, d], |i| {
        let (p, c) = (i / d, i % d);
        let (y, x) = (p / g, p % g);
        if c < half {
            col.get(&[x, c])
        } else {
            row.get(&[y, c - half])
        }
    })
}

/// Fixed linear-interpolation matrix `(len, src)` mapping `src` positions onto `len`.
/// Rows sum to one; when `len == src` it is the identity.
pub fn resample_matrix(len: usize, src: usize) -> Tensor {
    let mut m = Tensor::zeros(&[len, src]);
    for l in 0..len {
        let u = ((l as f64 + 0.5) * src as f64 / len as f64 - 0.5).clamp(0.0, (src - 1) as f64);
        let lo = u.floor() as usize;
        let hi = (lo + 1).min(src - 1);
        let frac = u - lo as f64;
        m.data_mut()[l * src + lo] += 1.0 - frac;
        m.data_mut()[l * src + hi] += frac;
    }
    m
}

pub(crate) fn matmul_values(a: &Tensor, b: &Tensor) -> Tensor {
    let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
    let mut out = vec![0.0; m * n];
    crate::tensor::gemm(m, k, n, a.data(), false, b.data(), false, &mut out, false);
    Tensor::from_parts(vec![m, n], out)
}

#[derive(Debug, Clone)]
pub struct TextEncoder {
    pub embed: ParamId,
    pub block: EncoderLayer,
    pub ln_out: LayerNorm,
    pos: Tensor,
    vocab: usize,
}

impl TextEncoder {
    pub fn new(store: &mut ParamStore, cfg: &ModelConfig) -> Result<Self> {
        let d = cfg.d_model;
        Ok(Self {
            embed: store.add("text.embed", &[cfg.vocab, d], cfg.weight_init())?,
            block: EncoderLayer::new(store, "text.block", d, cfg.heads, cfg.ffn_dim, cfg.ln_eps, cfg.weight_init())?,
            ln_out: LayerNorm::new(store, "text.ln_out", d, cfg.ln_eps)?,
            pos: sinusoid_1d(cfg.seq_len, d),
            vocab: cfg.vocab,
        })
    }

    /// Token ids (length `L`, pad id 0) to `(L, d)` features.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, tokens: &[usize]) -> Result<(Var, Var)> {
        let len = self.pos.shape()[0];
        if tokens.len() != len {
            return Err(Error::Data(format!("expected {len} tokens, got {}", tokens.len())));
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t >= self.vocab) {
            return Err(Error::Data(format!("token id {bad} outside vocabulary of {}", self.vocab)));
        }
        let table = tape.param(store, self.embed);
        let x = tape.gather_rows(table, tokens)?;
        let pos = tape.constant(self.pos.clone());
        let x = tape.add(x, pos)?;
        let (x, attn) = self.block.forward(tape, store, x)?;
        Ok((self.ln_out.forward(tape, store, x)?, attn))
    }
}

#[derive(Debug, Clone)]
pub struct ImageEncoder {
    pub patch: Linear,
    resample: Tensor,
    pos: Tensor,
    grid: usize,
    channels: usize,
}

impl ImageEncoder {
    pub fn new(store: &mut ParamStore, cfg: &ModelConfig) -> Result<Self> {
        let resample = resample_matrix(cfg.seq_len, cfg.patches());
        let pos = matmul_values(&resample, &sinusoid_2d(cfg.grid, cfg.d_model));
        Ok(Self {
            patch: Linear::new(store, "image.patch", cfg.img_channels, cfg.d_model, cfg.weight_init())?,
            resample,
            pos,
            grid: cfg.grid,
            channels: cfg.img_channels,
        })
    }

    /// Position encoding resampled to the text length; independent of image content.
    pub fn position_encoding(&self) -> &Tensor {
        &self.pos
    }

    pub fn resample(&self) -> &Tensor {
        &self.resample
    }

    /// `(G, G, c)` grid to `(L, d)` features.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, grid: &Tensor) -> Result<Var> {
        let expect = [self.grid, self.grid, self.channels];
        if grid.shape() != expect {
            return Err(Error::Shape {
                op: "encode_image",
                lhs: grid.shape().to_vec(),
                rhs: expect.to_vec(),
            });
        }
        if !grid.is_finite() {
            return Err(Error::Data("non-finite image grid".into()));
        }
        let x = tape.constant(grid.reshape(&[self.grid * self.grid, self.channels])?);
        let feats = self.patch.forward(tape, store, x)?;
        let w = tape.constant(self.resample.clone());
        tape.matmul(w, feats)
    }
}
