use proptest::prelude::*;
use qeot::matcher::{brute_force_assignment, hungarian, CostMatrix};
use qeot::rng::SplitMix64;

/// Rows `C <= Q <= 6` of costs on a coarse lattice so ties actually occur.
fn cost_matrix() -> impl Strategy<Value = CostMatrix> {
    (1usize..=6).prop_flat_map(|q| {
        (1usize..=q).prop_flat_map(move |c| {
            proptest::collection::vec(0u8..20, c * q).prop_map(move |v| CostMatrix::new(c, q, v.into_iter().map(|x| x as f64 / 4.0).collect()).unwrap())
        })
    })
}

#[test]
fn hungarian_equals_exhaustive_minimum_on_1000_matrices() {
    let mut rng = SplitMix64::new(2024);
    for trial in 0..1000 {
        let q = 1 + rng.index(6);
        let c = 1 + rng.index(q);
        let data = (0..c * q).map(|_| rng.uniform(-5.0, 5.0)).collect();
        let cost = CostMatrix::new(c, q, data).unwrap();
        let h = hungarian(&cost);
        let b = brute_force_assignment(&cost).unwrap();
        assert_eq!(h.total_cost(&cost), b.total_cost(&cost), "trial {trial}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn agrees_with_brute_force_including_ties(cost in cost_matrix()) {
        let h = hungarian(&cost);
        let b = brute_force_assignment(&cost).unwrap();
        prop_assert_eq!(h.total_cost(&cost), b.total_cost(&cost));
        prop_assert_eq!(h.as_slice(), b.as_slice());
        let mut used = h.as_slice().to_vec();
        used.sort_unstable();
        used.dedup();
        prop_assert_eq!(used.len(), cost.rows());
    }

    #[test]
    fn constant_shift_keeps_assignment(cost in cost_matrix(), k in -3i32..3) {
        let shifted: Vec<Vec<f64>> = (0..cost.rows()).map(|r| cost.row(r).iter().map(|v| v + k as f64).collect()).collect();
        let shifted = CostMatrix::from_rows(&shifted).unwrap();
        let (a, b) = (hungarian(&cost), hungarian(&shifted));
        prop_assert_eq!(a.as_slice(), b.as_slice());
    }

    #[test]
    fn row_permutation_is_equivariant(seed in any::<u64>(), c in 1usize..5, extra in 0usize..3) {
        let q = c + extra;
        let mut rng = SplitMix64::new(seed);
        let rows: Vec<Vec<f64>> = (0..c).map(|_| (0..q).map(|_| rng.uniform(0.0, 1.0)).collect()).collect();
        let mut perm: Vec<usize> = (0..c).collect();
        rng.shuffle(&mut perm);
        let permuted: Vec<Vec<f64>> = perm.iter().map(|&i| rows[i].clone()).collect();
        let a = hungarian(&CostMatrix::from_rows(&rows).unwrap());
        let b = hungarian(&CostMatrix::from_rows(&permuted).unwrap());
        for (new, &old) in perm.iter().enumerate() {
            prop_assert_eq!(b.query_of(new), a.query_of(old));
        }
    }
}
