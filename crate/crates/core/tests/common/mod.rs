#![allow(dead_code)]

use qeot::data::{generate, DatasetSpec, Sample};
use qeot::geometry::BoxCxCyWh;
use qeot::model::{ModelConfig, ModelInput, Qeot};
use qeot::triple::Triple;
use qeot::Tensor;

/// Small dataset sized for quick tests: L=8, G=3, R=4, up to 3 triples.
pub fn tiny_spec() -> DatasetSpec {
    DatasetSpec {
        seed: 5,
        n_train: 24,
        n_test: 8,
        seq_len: 8,
        grid: 3,
        img_channels: 8,
        relations: 4,
        max_triples: 3,
        entity_words: 4,
        filler_words: 6,
        noise: 0.0,
        shared_entity: true,
    }
}

pub fn tiny_model(spec: &DatasetSpec, seed: u64) -> ModelConfig {
    ModelConfig {
        seq_len: spec.seq_len,
        grid: spec.grid,
        d_model: 16,
        queries: 3,
        relations: spec.relations,
        enc_layers: 1,
        dec_layers: 1,
        heads: 2,
        vocab: spec.vocab_size(),
        img_channels: spec.img_channels,
        ffn_dim: 24,
        seed,
        ..ModelConfig::default()
    }
}

pub fn tiny_samples() -> Vec<Sample> {
    generate(&tiny_spec()).unwrap().train
}

pub fn input(s: &Sample) -> ModelInput<'_> {
    ModelInput {
        tokens: &s.tokens,
        grid: &s.grid,
    }
}

pub fn bx(cx: f64, cy: f64, w: f64, h: f64) -> BoxCxCyWh {
    BoxCxCyWh::from_slice(&[cx, cy, w, h])
}

pub fn triple(start: usize, end: usize, rel: usize, b: BoxCxCyWh) -> Triple {
    Triple::new(start, end, rel, b)
}

/// A model whose output decodes to exactly `gold` on every input.
pub struct OracleOutput;

impl OracleOutput {
    pub fn build(gold: &[Triple], q: usize, l: usize, r: usize) -> qeot::model::ModelOutput {
        let mut start = Tensor::full(&[q, l], 1e-6);
        let mut end = Tensor::full(&[q, l], 1e-6);
        let mut rel = Tensor::zeros(&[q, r + 1]);
        let mut boxes = Tensor::full(&[q, 4], 0.5);
        for i in 0..q {
            match gold.get(i) {
                Some(t) => {
                    start.data_mut()[i * l + t.start] = 1.0 - 1e-6 * (l - 1) as f64;
                    end.data_mut()[i * l + t.end] = 1.0 - 1e-6 * (l - 1) as f64;
                    rel.data_mut()[i * (r + 1) + t.relation] = 50.0;
                    boxes.data_mut()[i * 4..i * 4 + 4].copy_from_slice(&t.bbox.to_array());
                }
                None => rel.data_mut()[i * (r + 1) + r] = 50.0,
            }
        }
        let norm = |t: &mut Tensor| {
            for row in t.data_mut().chunks_mut(l) {
                let s: f64 = row.iter().sum();
                row.iter_mut().for_each(|v| *v /= s);
            }
        };
        norm(&mut start);
        norm(&mut end);
        qeot::model::ModelOutput {
            start_dist: start,
            end_dist: end,
            rel_logits: rel,
            boxes,
        }
    }
}

pub fn default_model() -> Qeot {
    Qeot::new(ModelConfig::default()).unwrap()
}
