//! Decoding and scoring of predicted triples.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::data::Sample;
use crate::error::Result;
use crate::geometry::{iou, l1_box, BoxCxCyWh};
use crate::matcher::{hungarian, CostMatrix};
use crate::model::{ModelInput, ModelOutput, Qeot};
use crate::triple::{PairKey, Triple};

/// Counter floor used when turning counts into ratios.
pub const COUNT_FLOOR: f64 = 1e-9;
pub const DEFAULT_IOU_THRESHOLD: f64 = 0.5;

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Per query: argmax relation (dropping the no-relation class), argmax start
/// and end with `end` clamped to `>= start`, and the predicted box.
pub fn decode(output: &ModelOutput) -> Vec<Triple> {
    let null = output.null_class();
    (0..output.num_queries())
        .filter_map(|q| {
            let rel = argmax(output.rel_logits.row(q));
            if rel == null {
                return None;
            }
            let start = argmax(output.start_dist.row(q));
            let end = argmax(output.end_dist.row(q)).max(start);
            Some(Triple::new(start, end, rel, output.box_at(q)))
        })
        .collect()
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl Counts {
    pub fn new(tp: usize, fp: usize, fn_: usize) -> Self {
        Self { tp, fp, fn_ }
    }

    pub fn merge(self, o: Counts) -> Counts {
        Counts::new(self.tp + o.tp, self.fp + o.fp, self.fn_ + o.fn_)
    }

    /// Precision, recall and F1 with every counter starting at [`COUNT_FLOOR`].
    pub fn prf(&self) -> (f64, f64, f64) {
        let tp = self.tp as f64 + COUNT_FLOOR;
        let fp = self.fp as f64 + COUNT_FLOOR;
        let fn_ = self.fn_ as f64 + COUNT_FLOOR;
        let p = tp / (tp + fp);
        let r = tp / (tp + fn_);
        (p, r, 2.0 * p * r / (p + r))
    }
}

fn group_boxes(triples: &[Triple]) -> BTreeMap<PairKey, Vec<BoxCxCyWh>> {
    let mut m: BTreeMap<PairKey, Vec<BoxCxCyWh>> = BTreeMap::new();
    for t in triples {
        m.entry(t.key()).or_default().push(t.bbox);
    }
    for boxes in m.values_mut() {
        boxes.sort_by(|a, b| {
            a.to_array()
                .iter()
                .zip(b.to_array().iter())
                .map(|(x, y)| x.total_cmp(y))
                .find(|o| o.is_ne())
                .unwrap_or(std::cmp::Ordering::Equal)
        });
    }
    m
}

/// Triple-level counts: boxes are grouped by exact `(span, relation)` key and,
/// within a shared key, paired by minimum total L1 distance. A pair is a hit
/// when its IoU exceeds `theta`; a missed pair counts on both sides.
pub fn triple_fpr(pred: &[Triple], gold: &[Triple], theta: f64) -> Counts {
    let pm = group_boxes(pred);
    let gm = group_boxes(gold);
    let mut c = Counts::default();
    for (key, gb) in &gm {
        let Some(pb) = pm.get(key) else {
            c.fn_ += gb.len();
            continue;
        };
        let (rows, cols, transposed) = if gb.len() <= pb.len() { (gb, pb, false) } else { (pb, gb, true) };
        let data = rows.iter().flat_map(|r| cols.iter().map(move |col| l1_box(r, col))).collect();
        let cost = CostMatrix::new(rows.len(), cols.len(), data).expect("finite box costs");
        let assignment = hungarian(&cost);
        for (r, col) in assignment.pairs() {
            let (g, p) = if transposed { (&cols[col], &rows[r]) } else { (&rows[r], &cols[col]) };
            if iou(&g.to_xyxy(), &p.to_xyxy()) > theta {
                c.tp += 1;
            } else {
                c.fp += 1;
                c.fn_ += 1;
            }
        }
        let matched = rows.len();
        if pb.len() > matched {
            c.fp += pb.len() - matched;
        }
        if gb.len() > matched {
            c.fn_ += gb.len() - matched;
        }
    }
    for (key, pb) in &pm {
        if !gm.contains_key(key) {
            c.fp += pb.len();
        }
    }
    c
}

fn multiset<K: Ord + Copy>(items: impl Iterator<Item = K>) -> BTreeMap<K, usize> {
    let mut m = BTreeMap::new();
    for k in items {
        *m.entry(k).or_insert(0) += 1;
    }
    m
}

fn multiset_overlap<K: Ord + Copy>(pred: &BTreeMap<K, usize>, gold: &BTreeMap<K, usize>) -> usize {
    gold.iter().map(|(k, &n)| n.min(pred.get(k).copied().unwrap_or(0))).sum()
}

/// Exact `(span, relation)` multiset matching, boxes ignored.
pub fn pair_fpr(pred: &[Triple], gold: &[Triple]) -> Counts {
    let pm = multiset(pred.iter().map(Triple::key));
    let gm = multiset(gold.iter().map(Triple::key));
    let tp = multiset_overlap(&pm, &gm);
    Counts::new(tp, pred.len() - tp, gold.len() - tp)
}

/// Hits for relation ids and entity spans, each matched as a multiset against gold.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AccuracyCounts {
    pub rel_hits: usize,
    pub ent_hits: usize,
    pub gold: usize,
}

impl AccuracyCounts {
    pub fn merge(self, o: AccuracyCounts) -> Self {
        Self {
            rel_hits: self.rel_hits + o.rel_hits,
            ent_hits: self.ent_hits + o.ent_hits,
            gold: self.gold + o.gold,
        }
    }

    /// `(rel_acc, ent_acc)`; both are 1 when there is no gold.
    pub fn ratios(&self) -> (f64, f64) {
        if self.gold == 0 {
            return (1.0, 1.0);
        }
        let g = self.gold as f64;
        (self.rel_hits as f64 / g, self.ent_hits as f64 / g)
    }
}

pub fn accuracy_counts(pred: &[Triple], gold: &[Triple]) -> AccuracyCounts {
    let rel = multiset_overlap(
        &multiset(pred.iter().map(|t| t.relation)),
        &multiset(gold.iter().map(|t| t.relation)),
    );
    let ent = multiset_overlap(&multiset(pred.iter().map(Triple::span)), &multiset(gold.iter().map(Triple::span)));
    AccuracyCounts {
        rel_hits: rel,
        ent_hits: ent,
        gold: gold.len(),
    }
}

pub fn accuracies(pred: &[Triple], gold: &[Triple]) -> (f64, f64) {
    accuracy_counts(pred, gold).ratios()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub triple_p: f64,
    pub triple_r: f64,
    pub triple_f1: f64,
    pub pair_p: f64,
    pub pair_r: f64,
    pub pair_f1: f64,
    pub rel_acc: f64,
    pub ent_acc: f64,
}

/// Micro-averaged accumulator over samples.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Tally {
    pub triple: Counts,
    pub pair: Counts,
    pub acc: AccuracyCounts,
}

impl Tally {
    pub fn score(pred: &[Triple], gold: &[Triple], theta: f64) -> Self {
        Self {
            triple: triple_fpr(pred, gold, theta),
            pair: pair_fpr(pred, gold),
            acc: accuracy_counts(pred, gold),
        }
    }

    pub fn merge(self, o: Tally) -> Self {
        Self {
            triple: self.triple.merge(o.triple),
            pair: self.pair.merge(o.pair),
            acc: self.acc.merge(o.acc),
        }
    }

    pub fn report(&self) -> MetricsReport {
        let (triple_p, triple_r, triple_f1) = self.triple.prf();
        let (pair_p, pair_r, pair_f1) = self.pair.prf();
        let (rel_acc, ent_acc) = self.acc.ratios();
        MetricsReport {
            triple_p,
            triple_r,
            triple_f1,
            pair_p,
            pair_r,
            pair_f1,
            rel_acc,
            ent_acc,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct SampleEval {
    pub id: String,
    pub pred: Vec<Triple>,
    pub triple: Counts,
    pub pair: Counts,
}

/// Scores a list of already-decoded predictions against the samples' gold.
pub fn evaluate_predictions(samples: &[Sample], preds: &[Vec<Triple>], theta: f64) -> (MetricsReport, Vec<SampleEval>) {
    let mut total = Tally::default();
    let mut per = Vec::with_capacity(samples.len());
    for (s, pred) in samples.iter().zip(preds) {
        let t = Tally::score(pred, &s.gold, theta);
        total = total.merge(t);
        per.push(SampleEval {
            id: s.id.clone(),
            pred: pred.clone(),
            triple: t.triple,
            pair: t.pair,
        });
    }
    (total.report(), per)
}

pub fn evaluate_dataset(model: &Qeot, samples: &[Sample], theta: f64) -> Result<(MetricsReport, Vec<SampleEval>)> {
    let preds = samples
        .iter()
        .map(|s| {
            let out = model.predict(ModelInput {
                tokens: &s.tokens,
                grid: &s.grid,
            })?;
            Ok(decode(&out))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(evaluate_predictions(samples, &preds, theta))
}
