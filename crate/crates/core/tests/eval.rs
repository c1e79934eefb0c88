mod common;

use common::*;
use proptest::prelude::*;
use qeot::eval::{accuracies, decode, evaluate_predictions, pair_fpr, triple_fpr, Counts, Tally};
use qeot::geometry::iou;
use qeot::rng::SplitMix64;
use qeot::triple::Triple;

const THETA: f64 = 0.5;

fn prf(c: Counts) -> (f64, f64, f64) {
    c.prf()
}

#[test]
fn exact_prediction_scores_one() {
    let gold = vec![triple(0, 1, 2, bx(0.3, 0.3, 0.2, 0.2)), triple(0, 1, 2, bx(0.7, 0.7, 0.2, 0.4)), triple(4, 4, 1, bx(0.5, 0.5, 0.5, 0.5))];
    let (p, r, f) = prf(triple_fpr(&gold, &gold, THETA));
    assert!((p - 1.0).abs() < 1e-6 && (r - 1.0).abs() < 1e-6 && (f - 1.0).abs() < 1e-6);
    let (_, _, pf) = prf(pair_fpr(&gold, &gold));
    assert!((pf - 1.0).abs() < 1e-6);
}

#[test]
fn empty_prediction_has_no_recall() {
    let gold = vec![triple(0, 1, 2, bx(0.3, 0.3, 0.2, 0.2))];
    let c = triple_fpr(&[], &gold, THETA);
    assert_eq!((c.tp, c.fp, c.fn_), (0, 0, 1));
    let (_, r, f) = prf(c);
    assert!(r < 1e-8 && f < 1e-8);
}

#[test]
fn surplus_prediction_under_shared_key() {
    let b1 = bx(0.5, 0.5, 0.5, 0.5);
    let b1p = bx(0.625, 0.5, 0.5, 0.5);
    // shifted by a quarter of the width: inter 0.1875, union 0.3125
    assert!((iou(&b1.to_xyxy(), &b1p.to_xyxy()) - 0.6).abs() < 1e-12);
    let gold = vec![triple(2, 3, 1, b1)];
    let pred = vec![triple(2, 3, 1, bx(0.1, 0.1, 0.1, 0.1)), triple(2, 3, 1, b1p)];
    let c = triple_fpr(&pred, &gold, THETA);
    assert_eq!((c.tp, c.fp, c.fn_), (1, 1, 0));
    let (p, r, f) = prf(c);
    // the 1e-9 counter floors shift each ratio by about 1e-9
    assert!((p - 0.5).abs() < 1e-8);
    assert!((r - 1.0).abs() < 1e-8);
    assert!((f - 2.0 / 3.0).abs() < 1e-8);
}

#[test]
fn low_overlap_match_counts_against_both_sides() {
    let gold = vec![triple(0, 0, 0, bx(0.25, 0.25, 0.2, 0.2))];
    let pred = vec![triple(0, 0, 0, bx(0.75, 0.75, 0.2, 0.2))];
    let c = triple_fpr(&pred, &gold, THETA);
    assert_eq!((c.tp, c.fp, c.fn_), (0, 1, 1));
}

fn random_triples(rng: &mut SplitMix64, n: usize) -> Vec<Triple> {
    (0..n)
        .map(|_| {
            let s = rng.index(3);
            let cx = 0.2 + 0.6 * rng.next_f64();
            let cy = 0.2 + 0.6 * rng.next_f64();
            triple(s, s + rng.index(2), rng.index(3), bx(cx, cy, 0.1 + 0.3 * rng.next_f64(), 0.1 + 0.3 * rng.next_f64()))
        })
        .collect()
}

/// Gold plus noisy copies, so shared keys with several boxes are common.
fn paired_fixture(seed: u64) -> (Vec<Triple>, Vec<Triple>) {
    let mut rng = SplitMix64::new(seed);
    let gold = random_triples(&mut rng, 6);
    let mut pred: Vec<Triple> = gold
        .iter()
        .map(|t| {
            let mut b = t.bbox.to_array();
            b[0] = (b[0] + rng.uniform(-0.1, 0.1)).clamp(0.0, 1.0);
            Triple::new(t.start, t.end, t.relation, qeot::geometry::BoxCxCyWh::from_slice(&b))
        })
        .collect();
    pred.extend(random_triples(&mut rng, 3));
    (pred, gold)
}

#[test]
fn ordering_invariance_over_100_shuffles() {
    let (pred, gold) = paired_fixture(17);
    let base = triple_fpr(&pred, &gold, THETA);
    let mut rng = SplitMix64::new(3);
    for _ in 0..100 {
        let (mut p, mut g) = (pred.clone(), gold.clone());
        rng.shuffle(&mut p);
        rng.shuffle(&mut g);
        assert_eq!(triple_fpr(&p, &g, THETA), base);
    }
}

#[test]
fn pair_and_accuracy_fixtures() {
    let b = bx(0.5, 0.5, 0.2, 0.2);
    let g = vec![triple(1, 2, 0, b), triple(1, 2, 0, b)];
    let c = pair_fpr(&g[..1], &g);
    assert_eq!((c.tp, c.fp, c.fn_), (1, 0, 1));
    let disjoint = pair_fpr(&[triple(3, 3, 1, b)], &g);
    assert_eq!(disjoint.tp, 0);

    let gold = vec![triple(0, 0, 0, b), triple(1, 1, 0, b), triple(2, 2, 1, b)];
    let pred = vec![triple(5, 5, 0, b), triple(6, 6, 1, b), triple(7, 7, 1, b)];
    let (rel, ent) = accuracies(&pred, &gold);
    assert!((rel - 2.0 / 3.0).abs() < 1e-12);
    assert_eq!(ent, 0.0);
    assert_eq!(accuracies(&gold, &gold), (1.0, 1.0));
}

#[test]
fn dataset_level_limits() {
    let samples = tiny_samples();
    let oracle: Vec<Vec<Triple>> = samples.iter().map(|s| s.gold.clone()).collect();
    let (report, per) = evaluate_predictions(&samples, &oracle, THETA);
    for v in [report.triple_p, report.triple_r, report.triple_f1, report.pair_p, report.pair_r, report.pair_f1, report.rel_acc, report.ent_acc] {
        assert!((v - 1.0).abs() < 1e-6, "{report:?}");
    }
    assert_eq!(per.len(), samples.len());

    // a model that always predicts the null class decodes to nothing
    let null_out = OracleOutput::build(&[], 3, 8, 4);
    assert!(decode(&null_out).is_empty());
    let empty = vec![Vec::new(); samples.len()];
    let (report, _) = evaluate_predictions(&samples, &empty, THETA);
    assert!(report.triple_f1 < 1e-6 && report.pair_f1 < 1e-6 && report.triple_r < 1e-6);
}

#[test]
fn oracle_output_decodes_to_gold() {
    let gold = vec![triple(1, 2, 3, bx(0.3, 0.6, 0.2, 0.4)), triple(4, 4, 0, bx(0.7, 0.2, 0.4, 0.2))];
    let out = OracleOutput::build(&gold, 5, 6, 4);
    assert_eq!(decode(&out), gold);
}

#[test]
fn fixing_predictions_never_lowers_true_positives() {
    for seed in 0..50 {
        let mut rng = SplitMix64::new(seed);
        let gold = random_triples(&mut rng, 5);
        // corrupted spans sit past every gold span, so they never hit by accident
        let mut pred: Vec<Triple> = gold.iter().map(|t| Triple::new(t.start + 10, t.end + 10, t.relation, t.bbox)).collect();
        let mut last = Tally::score(&pred, &gold, THETA);
        for i in 0..pred.len() {
            pred[i] = gold[i];
            let now = Tally::score(&pred, &gold, THETA);
            assert!(now.triple.tp >= last.triple.tp && now.pair.tp >= last.pair.tp, "seed {seed}");
            last = now;
        }
        assert_eq!(last.triple.tp, gold.len());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn counts_conserve_box_totals(seed in any::<u64>(), np in 0usize..8, ng in 0usize..8) {
        let mut rng = SplitMix64::new(seed);
        let pred = random_triples(&mut rng, np);
        let gold = random_triples(&mut rng, ng);
        let c = triple_fpr(&pred, &gold, THETA);
        prop_assert_eq!(c.tp + c.fp, np);
        prop_assert_eq!(c.tp + c.fn_, ng);
        let p = pair_fpr(&pred, &gold);
        prop_assert_eq!(p.tp + p.fp, np);
        prop_assert_eq!(p.tp + p.fn_, ng);
        prop_assert!(c.tp <= p.tp);
    }

    #[test]
    fn relation_relabeling_is_symmetric(seed in any::<u64>()) {
        let (pred, gold) = paired_fixture(seed);
        let relabel = |ts: &[Triple]| ts.iter().map(|t| Triple::new(t.start, t.end, [2, 0, 1][t.relation], t.bbox)).collect::<Vec<_>>();
        prop_assert_eq!(triple_fpr(&pred, &gold, THETA), triple_fpr(&relabel(&pred), &relabel(&gold), THETA));
        prop_assert_eq!(pair_fpr(&pred, &gold), pair_fpr(&relabel(&pred), &relabel(&gold)));
    }

    #[test]
    fn ordering_invariance(seed in any::<u64>()) {
        let (pred, gold) = paired_fixture(seed);
        let mut rng = SplitMix64::new(seed ^ 1);
        let (mut p, mut g) = (pred.clone(), gold.clone());
        rng.shuffle(&mut p);
        rng.shuffle(&mut g);
        prop_assert_eq!(triple_fpr(&p, &g, THETA), triple_fpr(&pred, &gold, THETA));
    }
}
