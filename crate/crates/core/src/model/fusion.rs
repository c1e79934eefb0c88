//! Cross-modal exchange between the text and image sequences.

use crate::autodiff::{Init, ParamId, ParamStore, Tape, Var};
use crate::error::{Error, Result};

pub struct SelectiveOutput {
    /// Text self-similarity weights applied to image values.
    pub text_attn: Var,
    /// Image self-similarity weights applied to text values.
    pub img_attn: Var,
    pub text_weights: Var,
    pub img_weights: Var,
}

/// Single-head selective attention. Each modality scores itself and reads the
/// other one: `softmax(Ht Htᵀ/√d) Hi` and `softmax(Qi Qiᵀ/√d) Ht` with `Qi = Hi + Pos`.
pub fn selective_attention(tape: &mut Tape, h_text: Var, h_img: Var, pos_img: Var) -> Result<SelectiveOutput> {
    let (ts, is) = (tape.shape(h_text).to_vec(), tape.shape(h_img).to_vec());
    if ts.len() != 2 || ts != is || tape.shape(pos_img) != is.as_slice() {
        return Err(Error::Shape {
            op: "selective_attention",
            lhs: ts,
            rhs: is,
        });
    }
    let inv = 1.0 / (ts[1] as f64).sqrt();

    let kt = tape.transpose(h_text)?;
    let st = tape.matmul(h_text, kt)?;
    let st = tape.scale(st, inv);
    let text_weights = tape.softmax(st, 1)?;
    let text_attn = tape.matmul(text_weights, h_img)?;

    let qi = tape.add(h_img, pos_img)?;
    let ki = tape.transpose(qi)?;
    let si = tape.matmul(qi, ki)?;
    let si = tape.scale(si, inv);
    let img_weights = tape.softmax(si, 1)?;
    let img_attn = tape.matmul(img_weights, h_text)?;

    Ok(SelectiveOutput {
        text_attn,
        img_attn,
        text_weights,
        img_weights,
    })
}

/// Sigmoid gate mixing original and attended features, one instance per branch.
#[derive(Debug, Clone)]
pub struct GatedFusion {
    pub a: ParamId,
    pub b: ParamId,
}

impl GatedFusion {
    pub fn new(store: &mut ParamStore, name: &str, d: usize, init: Init) -> Result<Self> {
        Ok(Self {
            a: store.add(&format!("{name}.a"), &[d, d], init)?,
            b: store.add(&format!("{name}.b"), &[d, d], init)?,
        })
    }

    /// `λ = σ(H_attn A + H_orig B)`, output `H_orig + λ(H_attn − H_orig)`.
    /// Returns the fused features and the gate.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, orig: Var, attn: Var) -> Result<(Var, Var)> {
        let a = tape.param(store, self.a);
        let b = tape.param(store, self.b);
        let za = tape.matmul(attn, a)?;
        let zb = tape.matmul(orig, b)?;
        let z = tape.add(za, zb)?;
        let gate = tape.sigmoid(z);
        let diff = tape.sub(attn, orig)?;
        let mix = tape.mul(gate, diff)?;
        Ok((tape.add(orig, mix)?, gate))
    }
}
