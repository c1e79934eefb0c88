//! Prediction heads on top of the decoded queries.

use crate::autodiff::{Init, ParamStore, Tape, Var};
use crate::error::Result;
use crate::model::config::ModelConfig;
use crate::model::layers::Linear;

/// Start/end token scores `(H_q[q] + H_text[t]) W_pos + b_pos`, optionally through ReLU.
#[derive(Debug, Clone)]
pub struct EntityHead {
    pub pos: Linear,
    pub relu: bool,
}

pub struct EntityScores {
    /// `(Q, L)` post-activation scores for the span start.
    pub start: Var,
    pub end: Var,
}

impl EntityHead {
    pub fn new(store: &mut ParamStore, cfg: &ModelConfig) -> Result<Self> {
        let pos = Linear {
            weight: store.add("ent.pos.weight", &[cfg.d_model, 2], cfg.weight_init())?,
            bias: store.add("ent.pos.bias", &[2], Init::Const(cfg.ent_bias_init))?,
        };
        Ok(Self { pos, relu: cfg.ent_head_relu })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, hq: Var, h_text: Var) -> Result<EntityScores> {
        let q = tape.shape(hq)[0];
        let l = tape.shape(h_text)[0];
        let w = tape.param(store, self.pos.weight);
        let b = tape.param(store, self.pos.bias);
        // the broadcast sum over (Q, L, d) is linear in W, so project each side first
        let pq = tape.matmul(hq, w)?;
        let pt = tape.matmul(h_text, w)?;
        let mut out = [None, None];
        for (k, slot) in out.iter_mut().enumerate() {
            let cq = tape.narrow(pq, 1, k, 1)?;
            let ct = tape.narrow(pt, 1, k, 1)?;
            let ct = tape.reshape(ct, &[1, l])?;
            let bk = tape.narrow(b, 0, k, 1)?;
            let s = tape.add(cq, ct)?;
            let s = tape.add(s, bk)?;
            debug_assert_eq!(tape.shape(s), [q, l]);
            *slot = Some(if self.relu { tape.relu(s) } else { s });
        }
        let [start, end] = out.map(Option::unwrap);
        Ok(EntityScores { start, end })
    }
}

/// Relation logits over `R + 1` classes and normalized cxcywh boxes.
#[derive(Debug, Clone)]
pub struct RelationBoxHead {
    pub cross: Linear,
    pub rel: Linear,
    pub obj: Linear,
    pub rel_relu: bool,
    pub box_relu: bool,
}

pub struct RelationBoxes {
    pub rel_logits: Var,
    pub boxes: Var,
}

impl RelationBoxHead {
    pub fn new(store: &mut ParamStore, cfg: &ModelConfig) -> Result<Self> {
        let (d, init) = (cfg.d_model, cfg.weight_init());
        Ok(Self {
            cross: Linear::new(store, "rel.cross", 2 * d, d, init)?,
            rel: Linear::new(store, "rel.cls", d, cfg.relations + 1, init)?,
            obj: Linear::new(store, "box.obj", d, 4, init)?,
            rel_relu: cfg.rel_head_relu,
            box_relu: cfg.box_head_relu,
        })
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        hq: Var,
        h_text: Var,
        h_img: Var,
    ) -> Result<RelationBoxes> {
        let mt = tape.mean_axis(h_text, 0)?;
        let mi = tape.mean_axis(h_img, 0)?;
        let d = tape.shape(mt)[0];
        let mt = tape.reshape(mt, &[1, d])?;
        let mi = tape.reshape(mi, &[1, d])?;
        let cross = tape.concat(&[mt, mi], 1)?;
        let cross = self.cross.forward(tape, store, cross)?;
        let h_rel = tape.add(hq, cross)?;
        let logits = self.rel.forward(tape, store, h_rel)?;
        let rel_logits = if self.rel_relu { tape.relu(logits) } else { logits };

        let z = self.obj.forward(tape, store, hq)?;
        let z = if self.box_relu { tape.relu(z) } else { z };
        let boxes = tape.sigmoid(z);
        Ok(RelationBoxes { rel_logits, boxes })
    }
}
