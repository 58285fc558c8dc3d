//! Finite-difference verification of analytic gradients, in `f64`.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::tape::{Tape, Var};
use crate::tensor::{ParamId, ParamStore, TensorGrid};

/// Central-difference step.
pub const FD_STEP: f64 = 1e-4;

/// Denominator floor of the relative error, so entries whose true gradient is ~0 are
/// judged on absolute error.
pub const REL_FLOOR: f64 = 1e-3;

#[derive(Clone, Debug)]
pub struct GradReport {
    pub max_rel_error: f64,
    /// Parameter name and flat index of the worst entry.
    pub worst: (String, usize),
    pub checked: usize,
}

impl GradReport {
    /// `Err` names the offending parameter when the worst entry exceeds `tol`.
    pub fn check(&self, tol: f64) -> Result<&Self, String> {
        if self.max_rel_error <= tol {
            Ok(self)
        } else {
            Err(format!(
                "gradient mismatch: rel. error {:.3e} > {tol:.1e} at {}[{}] ({} entries checked)",
                self.max_rel_error, self.worst.0, self.worst.1, self.checked
            ))
        }
    }
}

/// Compares tape gradients with central differences for every parameter in `store`.
///
/// `build` records the computation and returns its output; the harness contracts the
/// output with fixed random weights to obtain a scalar. At most `max_per_tensor` entries of
/// each parameter are probed (chosen at random, deterministically from `seed`).
pub fn grad_check<F>(store: &ParamStore<f64>, build: F, max_per_tensor: usize, seed: u64) -> GradReport
where
    F: Fn(&mut Tape<f64>, &ParamStore<f64>) -> Var,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tape = Tape::new();
    let out = build(&mut tape, store);
    let shape = tape.value(out).shape().to_vec();
    let n: usize = shape.iter().product();
    let weights = Arc::new(TensorGrid::from_vec(
        &shape,
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(),
    ));
    let loss = tape.weighted_sum(out, weights.clone());
    let grads = tape.backward(loss);
    let mut analytic = store.clone();
    analytic.zero_grad();
    tape.accumulate_param_grads(&grads, &mut analytic);

    let eval = |s: &ParamStore<f64>| -> f64 {
        let mut t = Tape::new();
        let o = build(&mut t, s);
        let l = t.weighted_sum(o, weights.clone());
        t.value(l).data()[0]
    };

    let mut report = GradReport {
        max_rel_error: 0.0,
        worst: (String::new(), 0),
        checked: 0,
    };
    let mut probe = store.clone();
    for pi in 0..store.len() {
        let id = ParamId(pi);
        let len = store.value(id).len();
        let indices: Vec<usize> = if len <= max_per_tensor {
            (0..len).collect()
        } else {
            (0..max_per_tensor).map(|_| rng.random_range(0..len)).collect()
        };
        for idx in indices {
            let orig = store.value(id).data()[idx];
            probe.get_mut(id).value.data_mut()[idx] = orig + FD_STEP;
            let plus = eval(&probe);
            probe.get_mut(id).value.data_mut()[idx] = orig - FD_STEP;
            let minus = eval(&probe);
            probe.get_mut(id).value.data_mut()[idx] = orig;
            let numeric = (plus - minus) / (2.0 * FD_STEP);
            let a = analytic.get(id).grad.data()[idx];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(REL_FLOOR);
            report.checked += 1;
            if rel > report.max_rel_error || !rel.is_finite() {
                report.max_rel_error = if rel.is_finite() { rel } else { f64::INFINITY };
                report.worst = (store.get(id).name.clone(), idx);
            }
        }
    }
    report
}

/// Uniform random tensor in `[lo, hi)`.
pub fn random_tensor(rng: &mut impl Rng, shape: &[usize], lo: f64, hi: f64) -> TensorGrid<f64> {
    let n = shape.iter().product();
    TensorGrid::from_vec(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect())
}
