use crate::autodiff::params::{ParamId, ParamStore};
use crate::autodiff::tape::{Tape, Var};
use crate::error::Result;
use crate::rng::SplitMix64;

#[derive(Debug, Clone, Copy)]
pub struct GradCheckOptions {
    /// Central-difference step.
    pub step: f64,
    /// Fraction of scalar entries probed per parameter (at least one each).
    pub fraction: f64,
    /// Denominator floor for the relative error, absorbing finite-difference noise near zero.
    pub floor: f64,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-5,
            fraction: 1.0,
            floor: 1e-5,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// `name[flat_index]` of the worst entry.
    pub worst: String,
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
}

/// Compare analytic gradients against central finite differences for every
/// parameter in `store` (inputs under test are registered as parameters too).
pub fn grad_check<F>(store: &mut ParamStore, mut forward: F, opts: GradCheckOptions) -> Result<GradCheckReport>
where
    F: FnMut(&mut Tape, &ParamStore) -> Result<Var>,
{
    let mut tape = Tape::new();
    let root = forward(&mut tape, store)?;
    let grads = tape.backward(root)?;
    store.zero_grad();
    grads.accumulate(&tape, store, 1.0);
    drop(tape);

    let mut eval = |store: &ParamStore| -> Result<f64> {
        let mut t = Tape::new();
        let r = forward(&mut t, store)?;
        Ok(t.value(r).item())
    };

    let mut rng = SplitMix64::new(opts.seed);
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst: String::new(),
        analytic: 0.0,
        numeric: 0.0,
        checked: 0,
    };
    let ids: Vec<ParamId> = store.ids().collect();
    for id in ids {
        let n = store.value(id).numel();
        let forced = rng.index(n);
        for j in 0..n {
            let take = rng.next_f64() < opts.fraction;
            if !take && j != forced {
                continue;
            }
            let orig = store.value(id).data()[j];
            store.value_mut(id).data_mut()[j] = orig + opts.step;
            let up = eval(store)?;
            store.value_mut(id).data_mut()[j] = orig - opts.step;
            let down = eval(store)?;
            store.value_mut(id).data_mut()[j] = orig;

            let numeric = (up - down) / (2.0 * opts.step);
            let analytic = store.grad(id).data()[j];
            let denom = analytic.abs().max(numeric.abs()).max(opts.floor);
            let err = (analytic - numeric).abs() / denom;
            report.checked += 1;
            if err > report.max_rel_err || report.worst.is_empty() {
                report.max_rel_err = err;
                report.worst = format!("{}[{j}]", store.name(id));
                report.analytic = analytic;
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}
