//! Minimum-cost bipartite assignment of gold triples to prediction queries.

use crate::error::{Error, Result};
use crate::geometry::{giou_loss, l1_box};
use crate::model::ModelOutput;
use crate::triple::Triple;

/// Largest column count accepted by [`brute_force_assignment`].
pub const BRUTE_FORCE_MAX_COLS: usize = 8;

/// Dense `rows x cols` cost matrix with `rows <= cols`.
#[derive(Debug, Clone, PartialEq)]
pub struct CostMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl CostMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape {
                op: "cost_matrix",
                lhs: vec![rows, cols],
                rhs: vec![data.len()],
            });
        }
        if rows > cols {
            return Err(Error::Capacity(format!(
                "{rows} gold triples but only {cols} queries; increase the query count"
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Contract(format!(
                "non-finite cost at ({}, {})",
                i / cols.max(1),
                i % cols.max(1)
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Contract("ragged cost matrix".into()));
        }
        Self::new(rows.len(), cols, rows.concat())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }
}

/// Injective map from gold row `i` to query column `pairs[i]`.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Assignment {
    pairs: Vec<usize>,
}

impl Assignment {
    pub fn new(pairs: Vec<usize>) -> Self {
        Self { pairs }
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn query_of(&self, gold: usize) -> usize {
        self.pairs[gold]
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.pairs
    }

    /// `(gold, query)` pairs in gold order.
    pub fn pairs(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.pairs.iter().copied().enumerate()
    }

    /// Gold index matched to each query, if any.
    pub fn gold_of_query(&self, num_queries: usize) -> Vec<Option<usize>> {
        let mut out = vec![None; num_queries];
        for (g, q) in self.pairs() {
            out[q] = Some(g);
        }
        out
    }

    /// Sum of assigned costs accumulated in gold order.
    pub fn total_cost(&self, cost: &CostMatrix) -> f64 {
        self.pairs().map(|(r, c)| cost.get(r, c)).sum()
    }
}

/// Matching cost between every gold triple (rows) and every query (columns).
///
/// Entry `(i, j)` is `-p_start(s_i) p_end(t_i) - p_rel(r_i) + w_giou (1 - giou) + w_l1 |b_i - b_j|_1`,
/// computed from output values only.
pub fn match_cost(output: &ModelOutput, gold: &[Triple], giou_weight: f64, l1_weight: f64) -> Result<CostMatrix> {
    let q = output.num_queries();
    if gold.len() > q {
        return Err(Error::Capacity(format!(
            "{} gold triples but only {q} queries; increase the query count",
            gold.len()
        )));
    }
    let rel_probs: Vec<Vec<f64>> = (0..q).map(|j| output.rel_probs(j)).collect();
    let mut data = Vec::with_capacity(gold.len() * q);
    for t in gold {
        if t.end >= output.seq_len() || t.relation >= output.num_relations() {
            return Err(Error::Data(format!("gold triple {t:?} does not fit the output shape")));
        }
        for (j, probs) in rel_probs.iter().enumerate() {
            let p_ent = output.start_dist.row(j)[t.start] * output.end_dist.row(j)[t.end];
            let p_rel = probs[t.relation];
            let pred = output.box_at(j);
            data.push(-p_ent - p_rel + giou_weight * giou_loss(&pred, &t.bbox) + l1_weight * l1_box(&pred, &t.bbox));
        }
    }
    CostMatrix::new(gold.len(), q, data)
}

/// Rectangular Hungarian algorithm (shortest augmenting paths with potentials).
/// Optimal, but ties are resolved arbitrarily.
fn hungarian_raw(cost: &CostMatrix, rows: &[usize], cols: &[usize]) -> Vec<usize> {
    let (n, m) = (rows.len(), cols.len());
    if n == 0 {
        return Vec::new();
    }
    let a = |i: usize, j: usize| cost.get(rows[i - 1], cols[j - 1]);
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut p = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let cur = a(i0, j) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut out = vec![0; n];
    for j in 1..=m {
        if p[j] > 0 {
            out[p[j] - 1] = cols[j - 1];
        }
    }
    out
}

/// Optimal assignment; among optimal injections the lexicographically smallest
/// query sequence (in gold order) is returned.
pub fn hungarian(cost: &CostMatrix) -> Assignment {
    let all_rows: Vec<usize> = (0..cost.rows).collect();
    let mut free: Vec<usize> = (0..cost.cols).collect();
    let mut pairs = Vec::with_capacity(cost.rows);
    let mut prefix = 0.0;
    for r in 0..cost.rows {
        let rest = &all_rows[r + 1..];
        let mut best: Option<(f64, usize)> = None;
        for (pos, &c) in free.iter().enumerate() {
            let cols: Vec<usize> = free.iter().copied().filter(|&x| x != c).collect();
            let tail = hungarian_raw(cost, rest, &cols);
            let total = rest
                .iter()
                .zip(&tail)
                .fold(prefix + cost.get(r, c), |acc, (&rr, &cc)| acc + cost.get(rr, cc));
            if best.is_none_or(|(b, _)| total < b) {
                best = Some((total, pos));
            }
        }
        let (_, pos) = best.expect("rows <= cols leaves a free column");
        let c = free.remove(pos);
        prefix += cost.get(r, c);
        pairs.push(c);
    }
    Assignment { pairs }
}

/// Exhaustive search over all injections, lexicographic order; test oracle.
pub fn brute_force_assignment(cost: &CostMatrix) -> Result<Assignment> {
    if cost.cols > BRUTE_FORCE_MAX_COLS {
        return Err(Error::Capacity(format!(
            "brute force limited to {BRUTE_FORCE_MAX_COLS} columns, got {}",
            cost.cols
        )));
    }
    fn go(cost: &CostMatrix, row: usize, acc: f64, used: &mut [bool], cur: &mut Vec<usize>, best: &mut Option<(f64, Vec<usize>)>) {
        if row == cost.rows {
            if best.as_ref().is_none_or(|(b, _)| acc < *b) {
                *best = Some((acc, cur.clone()));
            }
            return;
        }
        for c in 0..cost.cols {
            if used[c] {
                continue;
            }
            used[c] = true;
            cur.push(c);
            go(cost, row + 1, acc + cost.get(row, c), used, cur, best);
            cur.pop();
            used[c] = false;
        }
    }
    let mut best = None;
    go(cost, 0, 0.0, &mut vec![false; cost.cols], &mut Vec::new(), &mut best);
    Ok(Assignment {
        pairs: best.map(|(_, p)| p).unwrap_or_default(),
    })
}
