//! Flat `key=value` run configuration covering model, data, loss and training.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::autodiff::AdamWConfig;
use crate::data::DatasetSpec;
use crate::error::{Error, Result};
use crate::eval::DEFAULT_IOU_THRESHOLD;
use crate::loss::{LossOptions, LossWeights};
use crate::model::ModelConfig;
use crate::train::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    // shared dimensions
    pub seq_len: usize,
    pub grid: usize,
    pub img_channels: usize,
    pub relations: usize,
    // model
    pub d_model: usize,
    pub queries: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub query_init_std: f64,
    pub init_std: f64,
    pub ent_bias_init: f64,
    pub ln_eps: f64,
    pub ent_head_relu: bool,
    pub rel_head_relu: bool,
    pub box_head_relu: bool,
    // data
    pub data_seed: u64,
    pub n_train: usize,
    pub n_test: usize,
    pub max_triples: usize,
    pub entity_words: usize,
    pub filler_words: usize,
    pub noise: f64,
    pub shared_entity: bool,
    // loss
    pub w_ent: f64,
    pub w_rel: f64,
    pub w_l1: f64,
    pub w_giou: f64,
    pub null_class_weight: f64,
    // training
    pub seed: u64,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub weight_decay: f64,
    pub truncate_gold: bool,
    pub checkpoint_every: usize,
    // evaluation
    pub iou_threshold: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        let m = ModelConfig::default();
        let d = DatasetSpec::default();
        let w = LossWeights::default();
        let t = TrainConfig::default();
        Self {
            seq_len: m.seq_len,
            grid: m.grid,
            img_channels: m.img_channels,
            relations: m.relations,
            d_model: m.d_model,
            queries: m.queries,
            enc_layers: m.enc_layers,
            dec_layers: m.dec_layers,
            heads: m.heads,
            ffn_dim: m.ffn_dim,
            query_init_std: m.query_init_std,
            init_std: m.init_std,
            ent_bias_init: m.ent_bias_init,
            ln_eps: m.ln_eps,
            ent_head_relu: m.ent_head_relu,
            rel_head_relu: m.rel_head_relu,
            box_head_relu: m.box_head_relu,
            data_seed: d.seed,
            n_train: d.n_train,
            n_test: d.n_test,
            max_triples: d.max_triples,
            entity_words: d.entity_words,
            filler_words: d.filler_words,
            noise: d.noise,
            shared_entity: d.shared_entity,
            w_ent: w.ent,
            w_rel: w.rel,
            w_l1: w.l1,
            w_giou: w.giou,
            null_class_weight: 1.0,
            seed: t.seed,
            steps: t.steps,
            batch_size: t.batch_size,
            lr: t.adam.lr,
            beta1: t.adam.beta1,
            beta2: t.adam.beta2,
            adam_eps: t.adam.eps,
            weight_decay: t.adam.weight_decay,
            truncate_gold: t.truncate_gold,
            checkpoint_every: 500,
            iou_threshold: DEFAULT_IOU_THRESHOLD,
        }
    }
}

impl RunConfig {
    /// Sets one field from its text form; the key must be a known field name.
    pub fn set(&mut self, key: &str, raw: &str) -> Result<()> {
        let mut doc = serde_json::to_value(&*self).map_err(|e| Error::Config(e.to_string()))?;
        let map = doc.as_object_mut().expect("struct serializes to an object");
        let slot = map
            .get_mut(key)
            .ok_or_else(|| Error::Config(format!("unknown key `{key}`")))?;
        let raw = raw.trim();
        *slot = match slot {
            Value::Bool(_) => Value::Bool(
                raw.parse()
                    .map_err(|_| Error::Config(format!("`{key}` expects true or false, got `{raw}`")))?,
            ),
            _ => serde_json::from_str::<Value>(raw)
                .ok()
                .filter(Value::is_number)
                .ok_or_else(|| Error::Config(format!("`{key}` expects a number, got `{raw}`")))?,
        };
        *self = serde_json::from_value(doc).map_err(|e| Error::Config(format!("`{key}`: {e}")))?;
        Ok(())
    }

    /// Applies `key=value` lines; blank lines and `#` comments are ignored.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (i, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
                line: i + 1,
                msg: format!("expected key=value, got `{line}`"),
            })?;
            self.set(k.trim(), v).map_err(|e| Error::Parse {
                line: i + 1,
                msg: e.to_string(),
            })?;
        }
        Ok(())
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut c = Self::default();
        c.apply_text(&text)?;
        Ok(c)
    }

    /// `key=value` lines in a stable order; parsing them back yields the same config.
    pub fn to_text(&self) -> String {
        let doc = serde_json::to_value(self).expect("config serializes");
        let mut out = String::new();
        for (k, v) in doc.as_object().expect("object") {
            out.push_str(&format!("{k}={v}\n"));
        }
        out
    }

    pub fn dataset_spec(&self) -> DatasetSpec {
        DatasetSpec {
            seed: self.data_seed,
            n_train: self.n_train,
            n_test: self.n_test,
            seq_len: self.seq_len,
            grid: self.grid,
            img_channels: self.img_channels,
            relations: self.relations,
            max_triples: self.max_triples,
            entity_words: self.entity_words,
            filler_words: self.filler_words,
            noise: self.noise,
            shared_entity: self.shared_entity,
        }
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            seq_len: self.seq_len,
            grid: self.grid,
            d_model: self.d_model,
            queries: self.queries,
            relations: self.relations,
            enc_layers: self.enc_layers,
            dec_layers: self.dec_layers,
            heads: self.heads,
            vocab: self.dataset_spec().vocab_bound(),
            img_channels: self.img_channels,
            ffn_dim: self.ffn_dim,
            query_init_std: self.query_init_std,
            init_std: self.init_std,
            ent_bias_init: self.ent_bias_init,
            ln_eps: self.ln_eps,
            ent_head_relu: self.ent_head_relu,
            rel_head_relu: self.rel_head_relu,
            box_head_relu: self.box_head_relu,
            seed: self.seed,
        }
    }

    pub fn loss_options(&self) -> LossOptions {
        LossOptions {
            weights: LossWeights {
                ent: self.w_ent,
                rel: self.w_rel,
                l1: self.w_l1,
                giou: self.w_giou,
            },
            null_class_weight: self.null_class_weight,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            steps: self.steps,
            batch_size: self.batch_size,
            seed: self.seed,
            adam: AdamWConfig {
                lr: self.lr,
                beta1: self.beta1,
                beta2: self.beta2,
                eps: self.adam_eps,
                weight_decay: self.weight_decay,
            },
            loss: self.loss_options(),
            truncate_gold: self.truncate_gold,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.dataset_spec().validate()?;
        self.model_config().validate()?;
        self.loss_options().weights.validate()?;
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be finite and >= 0, got {}", self.lr)));
        }
        if !(self.iou_threshold > 0.0 && self.iou_threshold < 1.0) {
            return Err(Error::Config(format!("iou_threshold must be in (0,1), got {}", self.iou_threshold)));
        }
        if !self.truncate_gold && self.max_triples > self.queries {
            return Err(Error::Capacity(format!(
                "max_triples {} exceeds queries {}; increase the query count or set truncate_gold=true",
                self.max_triples, self.queries
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip() {
        let mut c = RunConfig::default();
        c.set("lr", "0.001").unwrap();
        c.set("shared_entity", "false").unwrap();
        c.set("steps", "12").unwrap();
        let mut back = RunConfig::default();
        back.apply_text(&c.to_text()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn defaults() {
        let c = RunConfig::default();
        assert_eq!((c.batch_size, c.lr), (8, 3e-5));
        assert_eq!((c.w_ent, c.w_rel, c.w_l1, c.w_giou), (1.0, 2.0, 3.0, 3.5));
        assert_eq!((c.seq_len, c.grid, c.d_model, c.queries, c.relations), (16, 4, 64, 5, 8));
        c.validate().unwrap();
        assert!(c.model_config().vocab >= c.dataset_spec().vocab_size());
        for seed in 0..20 {
            let mut d = c.dataset_spec();
            d.seed = seed;
            assert!(d.vocab_size() <= c.model_config().vocab);
        }
    }

    #[test]
    fn bad_input() {
        let mut c = RunConfig::default();
        assert!(c.set("nope", "1").is_err());
        assert!(c.set("steps", "1.5").is_err());
        assert!(c.set("steps", "abc").is_err());
        assert!(c.set("box_head_relu", "1").is_err());
        match c.apply_text("steps=3\njunk\n") {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
        c.set("max_triples", "9").unwrap();
        assert!(matches!(c.validate(), Err(Error::Capacity(_))));
    }
}
