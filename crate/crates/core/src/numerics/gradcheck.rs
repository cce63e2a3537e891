use super::Matrix;
use crate::error::{Result, WiseError};
use crate::scalar::Scalar;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-5;
/// Below this magnitude the absolute difference is reported instead of the
/// relative one.
pub const FD_ABS_FLOOR: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub num_probes: usize,
}

/// Compares `analytic_grad` against central differences of `loss_fn` at
/// `num_probes` coordinates of `param` sampled without replacement.
pub fn finite_diff_check<T, F>(
    mut loss_fn: F,
    param: &Matrix<T>,
    analytic_grad: &Matrix<T>,
    num_probes: usize,
    seed: u64,
) -> Result<GradCheckReport>
where
    T: Scalar,
    F: FnMut(&Matrix<T>) -> T,
{
    if num_probes == 0 {
        return Err(WiseError::Input("finite_diff_check needs at least one probe".into()));
    }
    param.check_same_shape(analytic_grad, "finite_diff_check")?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let amount = num_probes.min(param.len());
    let coords = rand::seq::index::sample(&mut rng, param.len(), amount);

    let mut probe = param.clone();
    let mut max_rel_error = 0.0f64;
    for idx in coords.iter() {
        let original = probe.data()[idx];
        probe.data_mut()[idx] = original + T::of(FD_STEP);
        let plus = loss_fn(&probe).as_f64();
        probe.data_mut()[idx] = original - T::of(FD_STEP);
        let minus = loss_fn(&probe).as_f64();
        probe.data_mut()[idx] = original;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(WiseError::Numeric(format!(
                "non-finite loss while probing coordinate {idx}"
            )));
        }
        let numeric = (plus - minus) / (2.0 * FD_STEP);
        let analytic = analytic_grad.data()[idx].as_f64();
        let diff = (numeric - analytic).abs();
        let scale = numeric.abs().max(analytic.abs());
        let err = if scale < FD_ABS_FLOOR { diff } else { diff / scale };
        max_rel_error = max_rel_error.max(err);
    }
    Ok(GradCheckReport {
        max_rel_error,
        num_probes: amount,
    })
}
