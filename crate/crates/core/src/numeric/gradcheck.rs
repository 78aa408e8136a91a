use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{backward, NumericError, ParamStore, Tape, Var};

/// Below this magnitude (both analytic and numeric) the absolute deviation
/// is reported instead of the relative one.
pub const ABS_FALLBACK: f64 = 1e-8;

/// Coordinate sampling for [`finite_diff_check`].
#[derive(Debug, Clone, Copy)]
pub struct GradCheck {
    pub h: f64,
    /// At most this many coordinates per parameter; `None` checks all.
    pub coords_per_param: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheck {
    fn default() -> Self {
        Self {
            h: 1e-5,
            coords_per_param: Some(12),
            seed: 0,
        }
    }
}

/// Relative deviation with an absolute fallback for tiny magnitudes.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs());
    if scale < ABS_FALLBACK {
        (analytic - numeric).abs()
    } else {
        (analytic - numeric).abs() / scale
    }
}

fn eval<F>(store: &ParamStore, f: &F) -> Result<f64, NumericError>
where
    F: for<'t> Fn(&mut Tape<'t>) -> Result<Var, NumericError>,
{
    let mut tape = Tape::new(store);
    let out = f(&mut tape)?;
    let v = tape.value(out).item()?;
    if v.is_finite() {
        Ok(v)
    } else {
        Err(NumericError::NonFinite(format!("objective evaluated to {v}")))
    }
}

/// Compares reverse-mode gradients of the scalar graph built by `f` against
/// central differences `(f(p+h) - f(p-h)) / 2h`. Returns the maximum
/// relative error over the checked coordinates.
pub fn finite_diff_check<F>(params: &ParamStore, check: GradCheck, f: F) -> Result<f64, NumericError>
where
    F: for<'t> Fn(&mut Tape<'t>) -> Result<Var, NumericError>,
{
    if check.h <= 0.0 || !check.h.is_finite() {
        return Err(NumericError::NonFinite(format!("step h = {}", check.h)));
    }
    let analytic = {
        let mut tape = Tape::new(params);
        let out = f(&mut tape)?;
        let v = tape.value(out).item()?;
        if !v.is_finite() {
            return Err(NumericError::NonFinite(format!("objective evaluated to {v}")));
        }
        let grads = backward(&tape, out)?;
        let mut acc = params.clone();
        acc.zero_grads();
        acc.accumulate(&grads);
        acc
    };

    let mut rng = ChaCha8Rng::seed_from_u64(check.seed);
    let mut probe = params.clone();
    let mut worst: f64 = 0.0;
    for (pid, p) in params.params().iter().enumerate() {
        let n = p.value.len();
        let coords: Vec<usize> = match check.coords_per_param {
            Some(k) if k < n => sample(&mut rng, n, k).into_vec(),
            _ => (0..n).collect(),
        };
        for c in coords {
            let original = p.value.data()[c];
            probe.params_mut()[pid].value.data_mut()[c] = original + check.h;
            let plus = eval(&probe, &f)?;
            probe.params_mut()[pid].value.data_mut()[c] = original - check.h;
            let minus = eval(&probe, &f)?;
            probe.params_mut()[pid].value.data_mut()[c] = original;
            let numeric = (plus - minus) / (2.0 * check.h);
            let a = analytic.params()[pid].grad.data()[c];
            worst = worst.max(relative_error(a, numeric));
        }
    }
    Ok(worst)
}
