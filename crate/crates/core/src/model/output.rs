use crate::error::{Error, Result};
use crate::geometry::BoxCxCyWh;
use crate::tensor::Tensor;

/// Per-query predictions.
///
/// `start_dist`/`end_dist` are `(Q, L)` distributions over token positions,
/// `rel_logits` is `(Q, R + 1)` with index `R` the no-relation class, and
/// `boxes` is `(Q, 4)` in normalized cxcywh.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelOutput {
    pub start_dist: Tensor,
    pub end_dist: Tensor,
    pub rel_logits: Tensor,
    pub boxes: Tensor,
}

impl ModelOutput {
    pub fn num_queries(&self) -> usize {
        self.boxes.shape()[0]
    }

    pub fn seq_len(&self) -> usize {
        self.start_dist.shape()[1]
    }

    /// `R`, excluding the no-relation class.
    pub fn num_relations(&self) -> usize {
        self.rel_logits.shape()[1] - 1
    }

    pub fn null_class(&self) -> usize {
        self.num_relations()
    }

    pub fn rel_probs(&self, q: usize) -> Vec<f64> {
        let row = self.rel_logits.row(q);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
        let total: f64 = exps.iter().sum();
        exps.into_iter().map(|e| e / total).collect()
    }

    pub fn box_at(&self, q: usize) -> BoxCxCyWh {
        BoxCxCyWh::from_slice(self.boxes.row(q))
    }

    /// Check the shape and range contract.
    pub fn validate(&self) -> Result<()> {
        let q = self.num_queries();
        let l = self.start_dist.shape().get(1).copied().unwrap_or(0);
        let ok_shapes = self.start_dist.shape() == [q, l]
            && self.end_dist.shape() == [q, l]
            && self.rel_logits.rank() == 2
            && self.rel_logits.shape()[0] == q
            && self.rel_logits.shape()[1] >= 2
            && self.boxes.shape() == [q, 4];
        if !ok_shapes {
            return Err(Error::Contract(format!(
                "inconsistent output shapes: start {:?} end {:?} rel {:?} boxes {:?}",
                self.start_dist.shape(),
                self.end_dist.shape(),
                self.rel_logits.shape(),
                self.boxes.shape()
            )));
        }
        for dist in [&self.start_dist, &self.end_dist] {
            for i in 0..q {
                let s: f64 = dist.row(i).iter().sum();
                if (s - 1.0).abs() > 1e-9 || dist.row(i).iter().any(|&p| !(0.0..=1.0).contains(&p)) {
                    return Err(Error::Contract(format!("query {i} span distribution sums to {s}")));
                }
            }
        }
        if !self.rel_logits.is_finite() {
            return Err(Error::Contract("non-finite relation logits".into()));
        }
        if self.boxes.data().iter().any(|&v| !(v > 0.0 && v < 1.0)) {
            return Err(Error::Contract("box coordinates outside (0,1)".into()));
        }
        Ok(())
    }
}
