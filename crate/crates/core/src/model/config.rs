use serde::{Deserialize, Serialize};

use crate::autodiff::Init;
use crate::error::{Error, Result};

/// Network dimensions and the few structural switches the model exposes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Text sequence length `L`.
    pub seq_len: usize,
    /// Image grid side `G`; the grid has `G^2` patches.
    pub grid: usize,
    pub d_model: usize,
    pub queries: usize,
    /// Relation types `R`, excluding the no-relation class.
    pub relations: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub heads: usize,
    pub vocab: usize,
    pub img_channels: usize,
    pub ffn_dim: usize,
    pub query_init_std: f64,
    /// Std of normally initialized weight matrices; `0` selects fan-in uniform.
    pub init_std: f64,
    /// Initial bias of the start/end scorer, ahead of its ReLU.
    pub ent_bias_init: f64,
    pub ln_eps: f64,
    /// ReLU on the start/end scores ahead of the softmax. Off by default:
    /// once every score of a row is clamped to zero the row stops learning.
    pub ent_head_relu: bool,
    /// ReLU on the relation scores ahead of the softmax. Off by default for the same reason.
    pub rel_head_relu: bool,
    /// Apply ReLU before the box sigmoid, as written in the original head.
    /// Off by default: `sigmoid(relu(x))` cannot produce coordinates below 0.5.
    pub box_head_relu: bool,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            seq_len: 16,
            grid: 4,
            d_model: 64,
            queries: 5,
            relations: 8,
            enc_layers: 2,
            dec_layers: 2,
            heads: 4,
            vocab: 64,
            img_channels: 12,
            ffn_dim: 128,
            query_init_std: 0.02,
            init_std: 0.0,
            ent_bias_init: 0.0,
            ln_eps: 1e-5,
            ent_head_relu: false,
            rel_head_relu: false,
            box_head_relu: false,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("seq_len", self.seq_len),
            ("grid", self.grid),
            ("d_model", self.d_model),
            ("queries", self.queries),
            ("relations", self.relations),
            ("heads", self.heads),
            ("vocab", self.vocab),
            ("img_channels", self.img_channels),
            ("ffn_dim", self.ffn_dim),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if !self.d_model.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by heads {}",
                self.d_model, self.heads
            )));
        }
        if !self.d_model.is_multiple_of(4) {
            return Err(Error::Config(format!(
                "d_model {} must be a multiple of 4 for the 2-D position encoding",
                self.d_model
            )));
        }
        if !(self.init_std >= 0.0 && self.init_std.is_finite()) {
            return Err(Error::Config("init_std must be finite and >= 0".into()));
        }
        if !(self.ln_eps > 0.0) {
            return Err(Error::Config("ln_eps must be > 0".into()));
        }
        Ok(())
    }

    pub fn weight_init(&self) -> Init {
        if self.init_std > 0.0 {
            Init::Normal(self.init_std)
        } else {
            Init::FanIn
        }
    }

    pub fn patches(&self) -> usize {
        self.grid * self.grid
    }
}
