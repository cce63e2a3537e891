use super::Matrix;
use crate::error::{Result, WiseError};
use crate::scalar::Scalar;

pub type Token = u32;

pub const LAYER_NORM_EPS: f64 = 1e-5;

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_CUBIC: f64 = 0.044_715;

/// GeLU, tanh approximation.
#[inline]
pub fn gelu_scalar<T: Scalar>(x: T) -> T {
    let inner = T::of(SQRT_2_OVER_PI) * (x + T::of(GELU_CUBIC) * x * x * x);
    T::of(0.5) * x * (T::one() + inner.tanh())
}

#[inline]
pub fn gelu_derivative<T: Scalar>(x: T) -> T {
    let c = T::of(SQRT_2_OVER_PI);
    let k = T::of(GELU_CUBIC);
    let t = (c * (x + k * x * x * x)).tanh();
    let half = T::of(0.5);
    half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + T::of(3.0) * k * x * x)
}

pub fn gelu<T: Scalar>(x: &Matrix<T>) -> Matrix<T> {
    x.map(gelu_scalar)
}

/// Gradient of the loss w.r.t. the GeLU input, given the pre-activation `x`
/// and the upstream gradient.
pub fn gelu_backward<T: Scalar>(x: &Matrix<T>, upstream: &Matrix<T>) -> Result<Matrix<T>> {
    x.check_same_shape(upstream, "gelu_backward")?;
    Ok(x.zip_with(upstream, |x, g| gelu_derivative(x) * g))
}

/// Row-wise numerically stable softmax.
pub fn softmax_rows<T: Scalar>(x: &Matrix<T>) -> Matrix<T> {
    let mut out = x.clone();
    for r in 0..out.rows() {
        softmax_in_place(out.row_mut(r));
    }
    out
}

pub(crate) fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
    let mut total = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

/// Per-row statistics kept for the layer-norm backward pass.
#[derive(Clone, Debug)]
pub struct LayerNormCache<T: Scalar = f64> {
    pub normalized: Matrix<T>,
    pub inv_std: Vec<T>,
}

pub fn layer_norm<T: Scalar>(x: &Matrix<T>, gain: &Matrix<T>, bias: &Matrix<T>) -> Result<Matrix<T>> {
    layer_norm_forward(x, gain, bias).map(|(y, _)| y)
}

pub fn layer_norm_forward<T: Scalar>(
    x: &Matrix<T>,
    gain: &Matrix<T>,
    bias: &Matrix<T>,
) -> Result<(Matrix<T>, LayerNormCache<T>)> {
    let d = x.cols();
    if gain.shape() != (1, d) || bias.shape() != (1, d) {
        return Err(WiseError::Shape(format!(
            "layer_norm: gain {:?} / bias {:?} for width {d}",
            gain.shape(),
            bias.shape()
        )));
    }
    let n = T::of(d as f64);
    let eps = T::of(LAYER_NORM_EPS);
    let mut normalized = Matrix::zeros(x.rows(), d);
    let mut out = Matrix::zeros(x.rows(), d);
    let mut inv_std = Vec::with_capacity(x.rows());
    for r in 0..x.rows() {
        let row = x.row(r);
        let mean = row.iter().fold(T::zero(), |a, &v| a + v) / n;
        let var = row.iter().fold(T::zero(), |a, &v| a + (v - mean) * (v - mean)) / n;
        let rstd = T::one() / (var + eps).sqrt();
        inv_std.push(rstd);
        let nrow = normalized.row_mut(r);
        for (o, &v) in nrow.iter_mut().zip(row) {
            *o = (v - mean) * rstd;
        }
        let orow = out.row_mut(r);
        for c in 0..d {
            orow[c] = normalized.get(r, c) * gain.data()[c] + bias.data()[c];
        }
    }
    Ok((out, LayerNormCache { normalized, inv_std }))
}

/// Returns `(d_input, d_gain, d_bias)`.
pub fn layer_norm_backward<T: Scalar>(
    cache: &LayerNormCache<T>,
    gain: &Matrix<T>,
    upstream: &Matrix<T>,
) -> (Matrix<T>, Matrix<T>, Matrix<T>) {
    let (rows, d) = upstream.shape();
    let n = T::of(d as f64);
    let mut dx = Matrix::zeros(rows, d);
    let mut dgain = Matrix::zeros(1, d);
    let mut dbias = Matrix::zeros(1, d);
    let mut dxhat = vec![T::zero(); d];
    for r in 0..rows {
        let up = upstream.row(r);
        let xhat = cache.normalized.row(r);
        let mut mean_dxhat = T::zero();
        let mut mean_dxhat_xhat = T::zero();
        for c in 0..d {
            dgain.data_mut()[c] += up[c] * xhat[c];
            dbias.data_mut()[c] += up[c];
            dxhat[c] = up[c] * gain.data()[c];
            mean_dxhat += dxhat[c];
            mean_dxhat_xhat += dxhat[c] * xhat[c];
        }
        mean_dxhat /= n;
        mean_dxhat_xhat /= n;
        let rstd = cache.inv_std[r];
        let out = dx.row_mut(r);
        for c in 0..d {
            out[c] = rstd * (dxhat[c] - mean_dxhat - xhat[c] * mean_dxhat_xhat);
        }
    }
    (dx, dgain, dbias)
}

/// Mean negative log-likelihood of `targets[r]` under `softmax(logits[r])`.
pub fn cross_entropy<T: Scalar>(logits: &Matrix<T>, targets: &[Token]) -> Result<T> {
    let mask: Vec<Option<Token>> = targets.iter().copied().map(Some).collect();
    cross_entropy_masked(logits, &mask).map(|(loss, _)| loss)
}

/// Cross entropy over the rows whose target is `Some`, averaged over those
/// rows, together with the gradient w.r.t. the logits.
pub fn cross_entropy_masked<T: Scalar>(
    logits: &Matrix<T>,
    targets: &[Option<Token>],
) -> Result<(T, Matrix<T>)> {
    if targets.len() != logits.rows() {
        return Err(WiseError::Input(format!(
            "{} targets for {} logit rows",
            targets.len(),
            logits.rows()
        )));
    }
    let vocab = logits.cols();
    let scored = targets.iter().filter(|t| t.is_some()).count();
    if scored == 0 {
        return Err(WiseError::Input("no scored target positions".into()));
    }
    let inv = T::one() / T::of(scored as f64);
    let mut grad = Matrix::zeros(logits.rows(), vocab);
    let mut loss = T::zero();
    for (r, target) in targets.iter().enumerate() {
        let Some(t) = *target else { continue };
        let t = t as usize;
        if t >= vocab {
            return Err(WiseError::Input(format!(
                "target token {t} outside vocabulary of {vocab}"
            )));
        }
        let row = logits.row(r);
        let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
        let sum_exp = row.iter().fold(T::zero(), |a, &v| a + (v - max).exp());
        let log_z = max + sum_exp.ln();
        loss += log_z - row[t];
        let g = grad.row_mut(r);
        for (gc, &v) in g.iter_mut().zip(row) {
            *gc = (v - log_z).exp() * inv;
        }
        g[t] -= inv;
    }
    Ok((loss * inv, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn gelu_fixed_points() {
        assert_eq!(gelu_scalar(0.0f64), 0.0);
        assert!((gelu_scalar(20.0f64) - 20.0).abs() < 1e-6);
    }

    #[test]
    fn gelu_derivative_matches_central_difference() {
        let h = 1e-5;
        for &x in &[1.0f64, -0.7, 2.3, 0.0] {
            let fd = (gelu_scalar(x + h) - gelu_scalar(x - h)) / (2.0 * h);
            assert!((fd - gelu_derivative(x)).abs() < 1e-6, "x = {x}");
        }
        let x = Matrix::<f64>::from_rows(&[[1.0]]).unwrap();
        let up = Matrix::from_rows(&[[3.0]]).unwrap();
        let g = gelu_backward(&x, &up).unwrap();
        assert!((g.get(0, 0) - 3.0 * gelu_derivative(1.0)).abs() < 1e-15);
    }

    #[test]
    fn softmax_uniform_row() {
        let x = Matrix::<f64>::from_rows(&[[0.3, 0.3, 0.3, 0.3]]).unwrap();
        let s = softmax_rows(&x);
        for &v in s.data() {
            assert!((v - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn cross_entropy_saturated_and_out_of_range() {
        let mut logits = Matrix::filled(2, 4, -20.0);
        logits.set(0, 1, 20.0);
        logits.set(1, 3, 20.0);
        assert!(cross_entropy(&logits, &[1, 3]).unwrap() < 1e-6);
        assert!(matches!(
            cross_entropy(&logits, &[1, 4]),
            Err(WiseError::Input(_))
        ));
        assert!(cross_entropy(&logits, &[1]).is_err());
    }

    #[test]
    fn layer_norm_hand_case() {
        let x = Matrix::from_rows(&[[1.0, 2.0, 3.0]]).unwrap();
        let y = layer_norm(&x, &Matrix::filled(1, 3, 1.0), &Matrix::zeros(1, 3)).unwrap();
        // mean 2, population variance 2/3
        let expect = [-1.0 / (2.0f64 / 3.0 + LAYER_NORM_EPS).sqrt(), 0.0, 1.0 / (2.0f64 / 3.0 + LAYER_NORM_EPS).sqrt()];
        for (a, b) in y.data().iter().zip(expect) {
            assert!((a - b).abs() < 1e-12);
        }
        let mean: f64 = y.data().iter().sum::<f64>() / 3.0;
        let var: f64 = y.data().iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 3.0;
        assert!(mean.abs() < 1e-12);
        assert!((var - 1.0).abs() < 1e-4);
    }

    #[test]
    fn layer_norm_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Matrix::<f64>::random_normal(3, 5, 1.0, &mut rng);
        let gain = Matrix::<f64>::random_normal(1, 5, 1.0, &mut rng);
        let bias = Matrix::<f64>::random_normal(1, 5, 1.0, &mut rng);
        let w = Matrix::<f64>::random_normal(3, 5, 1.0, &mut rng);
        let loss = |x: &Matrix<f64>| {
            let y = layer_norm(x, &gain, &bias).unwrap();
            y.data().iter().zip(w.data()).map(|(a, b)| a * b).sum::<f64>()
        };
        let (_, cache) = layer_norm_forward(&x, &gain, &bias).unwrap();
        let (dx, _, _) = layer_norm_backward(&cache, &gain, &w);
        let report = crate::numerics::finite_diff_check(loss, &x, &dx, 15, 0).unwrap();
        assert!(report.max_rel_error < 1e-6, "{report:?}");
    }

    #[test]
    fn cross_entropy_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let logits = Matrix::<f64>::random_normal(3, 6, 1.0, &mut rng);
        let targets = [Some(2), None, Some(5)];
        let (_, grad) = cross_entropy_masked(&logits, &targets).unwrap();
        let loss = |l: &Matrix<f64>| cross_entropy_masked(l, &targets).unwrap().0;
        let report = crate::numerics::finite_diff_check(loss, &logits, &grad, 18, 1).unwrap();
        assert!(report.max_rel_error < 1e-6, "{report:?}");
        // unscored row carries no gradient
        assert!(grad.row(1).iter().all(|&g| g == 0.0));
    }
}
