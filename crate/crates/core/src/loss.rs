//! Joint set-prediction objective over Hungarian-matched targets.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::geometry::{giou_loss, l1_box};
use crate::matcher::{hungarian, match_cost, Assignment};
use crate::model::{ForwardVars, ModelOutput};
use crate::tensor::Tensor;
use crate::triple::Triple;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub ent: f64,
    pub rel: f64,
    pub l1: f64,
    pub giou: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            ent: 1.0,
            rel: 2.0,
            l1: 3.0,
            giou: 3.5,
        }
    }
}

impl LossWeights {
    pub fn new(ent: f64, rel: f64, l1: f64, giou: f64) -> Result<Self> {
        let w = Self { ent, rel, l1, giou };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("ent", self.ent), ("rel", self.rel), ("l1", self.l1), ("giou", self.giou)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("loss weight {name} must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }

    pub fn combine(&self, ent: f64, rel: f64, l1: f64, giou: f64) -> f64 {
        self.ent * ent + self.rel * rel + self.l1 * l1 + self.giou * giou
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub ent: f64,
    pub rel: f64,
    pub l1: f64,
    pub giou: f64,
    pub assignment: Assignment,
}

/// Extra knobs beyond the four weights.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossOptions {
    pub weights: LossWeights,
    /// Multiplier on the relation cross-entropy of queries targeting the no-relation class.
    pub null_class_weight: f64,
}

impl Default for LossOptions {
    fn default() -> Self {
        Self {
            weights: LossWeights::default(),
            null_class_weight: 1.0,
        }
    }
}

impl From<LossWeights> for LossOptions {
    fn from(weights: LossWeights) -> Self {
        Self {
            weights,
            ..Self::default()
        }
    }
}

/// Matches queries to gold triples with the weights shared by the loss.
pub fn assign(output: &ModelOutput, gold: &[Triple], weights: &LossWeights) -> Result<Assignment> {
    let cost = match_cost(output, gold, weights.giou, weights.l1)?;
    Ok(hungarian(&cost))
}

/// Per-query relation targets: the matched gold relation, otherwise the no-relation class.
fn relation_targets(q: usize, null: usize, gold: &[Triple], assignment: &Assignment) -> Vec<usize> {
    let mut targets = vec![null; q];
    for (g, query) in assignment.pairs() {
        targets[query] = gold[g].relation;
    }
    targets
}

/// `(query, gold)` pairs in query order, so sums do not depend on gold ordering.
fn matched_by_query(assignment: &Assignment) -> Vec<(usize, usize)> {
    let mut m: Vec<(usize, usize)> = assignment.pairs().map(|(g, q)| (q, g)).collect();
    m.sort_unstable();
    m
}

fn class_weights(targets: &[usize], null: usize, null_weight: f64) -> Vec<f64> {
    targets.iter().map(|&t| if t == null { null_weight } else { 1.0 }).collect()
}

fn log_softmax_row(row: &[f64]) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    row.iter().map(|v| v - lse).collect()
}

fn check_finite(output: &ModelOutput) -> Result<()> {
    let all = [&output.start_dist, &output.end_dist, &output.rel_logits, &output.boxes];
    if all.iter().all(|t| t.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFiniteLoss("model output".into()))
    }
}

/// Loss evaluated on plain output tensors; no gradients.
pub fn joint_loss(output: &ModelOutput, gold: &[Triple], options: impl Into<LossOptions>) -> Result<LossBreakdown> {
    let opts = options.into();
    opts.weights.validate()?;
    check_finite(output)?;
    let assignment = assign(output, gold, &opts.weights)?;
    let q = output.num_queries();
    let null = output.null_class();
    let targets = relation_targets(q, null, gold, &assignment);
    let cw = class_weights(&targets, null, opts.null_class_weight);

    let mut rel = 0.0;
    for (i, &t) in targets.iter().enumerate() {
        rel += cw[i] * -log_softmax_row(output.rel_logits.row(i))[t];
    }
    let rel = rel / q as f64;

    let matched = matched_by_query(&assignment);
    let (mut ent, mut l1, mut gl) = (0.0, 0.0, 0.0);
    for &(query, g) in &matched {
        let t = &gold[g];
        ent += -output.start_dist.get(&[query, t.start]).ln() - output.end_dist.get(&[query, t.end]).ln();
        let b = output.box_at(query);
        l1 += l1_box(&b, &t.bbox);
        gl += giou_loss(&b, &t.bbox);
    }
    let k = matched.len().max(1) as f64;
    let (ent, l1, giou) = (ent / k, l1 / k, gl / k);
    let total = opts.weights.combine(ent, rel, l1, giou);
    if !total.is_finite() {
        return Err(Error::NonFiniteLoss("joint_loss".into()));
    }
    Ok(LossBreakdown {
        total,
        ent,
        rel,
        l1,
        giou,
        assignment,
    })
}

/// Records the loss on the tape of a forward pass; returns the scalar root and its breakdown.
pub fn joint_loss_on(
    tape: &mut Tape,
    vars: &ForwardVars,
    gold: &[Triple],
    options: impl Into<LossOptions>,
) -> Result<(Var, LossBreakdown)> {
    let opts = options.into();
    opts.weights.validate()?;
    let output = vars.output(tape);
    check_finite(&output)?;
    let assignment = assign(&output, gold, &opts.weights)?;
    let q = output.num_queries();
    let null = output.null_class();
    let targets = relation_targets(q, null, gold, &assignment);

    let logp = tape.log_softmax(vars.rel_logits, 1)?;
    let picked = tape.pick(logp, &targets)?;
    let picked = if opts.null_class_weight == 1.0 {
        picked
    } else {
        let w = tape.constant(Tensor::vector(class_weights(&targets, null, opts.null_class_weight)));
        tape.mul(picked, w)?
    };
    let rel_sum = tape.sum(picked);
    let rel = tape.scale(rel_sum, -1.0 / q as f64);

    let matched = matched_by_query(&assignment);
    let (ent, l1, giou) = if matched.is_empty() {
        let zero = || Tensor::scalar(0.0);
        (tape.constant(zero()), tape.constant(zero()), tape.constant(zero()))
    } else {
        let qs: Vec<usize> = matched.iter().map(|&(q, _)| q).collect();
        let golds: Vec<&Triple> = matched.iter().map(|&(_, g)| &gold[g]).collect();
        let k = qs.len() as f64;

        let ls = tape.gather_rows(vars.start_logp, &qs)?;
        let ls = tape.pick(ls, &golds.iter().map(|t| t.start).collect::<Vec<_>>())?;
        let le = tape.gather_rows(vars.end_logp, &qs)?;
        let le = tape.pick(le, &golds.iter().map(|t| t.end).collect::<Vec<_>>())?;
        let both = tape.add(ls, le)?;
        let ent_sum = tape.sum(both);
        let ent = tape.scale(ent_sum, -1.0 / k);

        let pb = tape.gather_rows(vars.boxes, &qs)?;
        let gb: Vec<f64> = golds.iter().flat_map(|t| t.bbox.to_array()).collect();
        let gb = tape.constant(Tensor::from_parts(vec![qs.len(), 4], gb));
        let diff = tape.sub(pb, gb)?;
        let diff = tape.abs(diff);
        let l1_sum = tape.sum(diff);
        let l1 = tape.scale(l1_sum, 1.0 / k);

        let gboxes: Vec<_> = golds.iter().map(|t| t.bbox).collect();
        let gl = tape.giou_loss(pb, &gboxes)?;
        let gl_sum = tape.sum(gl);
        let giou = tape.scale(gl_sum, 1.0 / k);
        (ent, l1, giou)
    };

    let w = &opts.weights;
    let terms = [(ent, w.ent), (rel, w.rel), (l1, w.l1), (giou, w.giou)];
    let mut total = tape.scale(terms[0].0, terms[0].1);
    for &(v, lambda) in &terms[1..] {
        let s = tape.scale(v, lambda);
        total = tape.add(total, s)?;
    }
    let item = |v: Var| tape.value(v).item();
    let (ent, rel, l1, giou) = (item(ent), item(rel), item(l1), item(giou));
    let breakdown = LossBreakdown {
        total: w.combine(ent, rel, l1, giou),
        ent,
        rel,
        l1,
        giou,
        assignment,
    };
    if !breakdown.total.is_finite() {
        return Err(Error::NonFiniteLoss("joint_loss".into()));
    }
    Ok((total, breakdown))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::BoxCxCyWh;

    fn one_hot_rows(rows: &[usize], cols: usize, hot: f64, cold: f64) -> Tensor {
        Tensor::from_fn(&[rows.len(), cols], |i| if i % cols == rows[i / cols] { hot } else { cold })
    }

    fn fixture(gold: &[Triple], q: usize, l: usize, r: usize) -> ModelOutput {
        let mut starts = vec![0; q];
        let mut ends = vec![0; q];
        let mut rels = vec![r; q];
        let mut boxes = vec![[0.5, 0.5, 0.2, 0.2]; q];
        for (i, t) in gold.iter().enumerate() {
            starts[i] = t.start;
            ends[i] = t.end;
            rels[i] = t.relation;
            boxes[i] = t.bbox.to_array();
        }
        ModelOutput {
            start_dist: one_hot_rows(&starts, l, 1.0, 0.0),
            end_dist: one_hot_rows(&ends, l, 1.0, 0.0),
            rel_logits: one_hot_rows(&rels, r + 1, 800.0, 0.0),
            boxes: Tensor::from_fn(&[q, 4], |i| boxes[i / 4][i % 4]),
        }
    }

    fn gold() -> Vec<Triple> {
        vec![
            Triple::new(1, 2, 0, BoxCxCyWh::from_slice(&[0.25, 0.25, 0.2, 0.3])),
            Triple::new(4, 4, 2, BoxCxCyWh::from_slice(&[0.7, 0.6, 0.3, 0.2])),
        ]
    }

    #[test]
    fn perfect_prediction_is_zero() {
        let g = gold();
        let b = joint_loss(&fixture(&g, 4, 6, 3), &g, LossWeights::default()).unwrap();
        assert!(b.total.abs() < 1e-12, "{b:?}");
        assert_eq!(b.l1, 0.0);
        assert!(b.giou.abs() < 1e-12);
    }

    #[test]
    fn empty_gold_only_relation_term() {
        let out = ModelOutput {
            start_dist: Tensor::full(&[3, 4], 0.25),
            end_dist: Tensor::full(&[3, 4], 0.25),
            rel_logits: Tensor::zeros(&[3, 5]),
            boxes: Tensor::full(&[3, 4], 0.5),
        };
        let w = LossWeights::default();
        let b = joint_loss(&out, &[], w).unwrap();
        assert_eq!((b.ent, b.l1, b.giou), (0.0, 0.0, 0.0));
        assert!((b.rel - 5f64.ln()).abs() < 1e-12);
        assert!((b.total - w.rel * 5f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn capacity_error_when_gold_exceeds_queries() {
        let g = gold();
        let out = fixture(&g[..1], 1, 6, 3);
        assert!(matches!(joint_loss(&out, &g, LossWeights::default()), Err(Error::Capacity(_))));
    }

    #[test]
    fn weights_must_be_nonnegative() {
        assert!(LossWeights::new(1.0, -1.0, 0.0, 0.0).is_err());
        assert!(LossWeights::new(1.0, f64::NAN, 0.0, 0.0).is_err());
    }

    #[test]
    fn null_class_weight_scales_unmatched_terms() {
        let out = ModelOutput {
            start_dist: Tensor::full(&[2, 3], 1.0 / 3.0),
            end_dist: Tensor::full(&[2, 3], 1.0 / 3.0),
            rel_logits: Tensor::zeros(&[2, 3]),
            boxes: Tensor::full(&[2, 4], 0.5),
        };
        let opts = LossOptions {
            weights: LossWeights::default(),
            null_class_weight: 0.5,
        };
        let b = joint_loss(&out, &[], opts).unwrap();
        assert!((b.rel - 0.5 * 3f64.ln()).abs() < 1e-12);
    }
}
