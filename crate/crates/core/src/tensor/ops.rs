//! Forward kernels and their vector-Jacobian products.
//!
//! The forward functions are the public tensor-level API. The `*_backward`
//! helpers are shared with the autodiff engine.

use crate::error::{shape_err, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const LAYER_NORM_EPS: f64 = 1e-6;

const GELU_COEF: f64 = 0.044715;
// sqrt(2 / pi)
const GELU_SCALE: f64 = 0.797_884_560_802_865_4;

/// `y[.., j] = sum_i x[.., i] w[i, j] (+ b[j])`.
pub fn linear<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, b: Option<&Tensor<T>>) -> Result<Tensor<T>> {
    let (rows, din, dout) = linear_dims(x, w, b)?;
    let mut out = Vec::with_capacity(rows * dout);
    match b {
        Some(b) => {
            for _ in 0..rows {
                out.extend_from_slice(b.data());
            }
        }
        None => out.resize(rows * dout, T::zero()),
    }
    let beta = if b.is_some() { T::one() } else { T::zero() };
    T::gemm(rows, din, dout, x.data(), false, w.data(), false, beta, &mut out);
    let mut shape = x.shape().to_vec();
    *shape.last_mut().unwrap() = dout;
    Tensor::from_vec(&shape, out)?.check_finite("linear")
}

pub(crate) fn linear_dims<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, b: Option<&Tensor<T>>) -> Result<(usize, usize, usize)> {
    if w.rank() != 2 {
        return Err(shape_err("linear", format!("weight must be 2-D, got {:?}", w.shape())));
    }
    let (din, dout) = (w.shape()[0], w.shape()[1]);
    if x.rank() == 0 || x.last_dim() != din {
        return Err(shape_err("linear", format!("input {:?} does not end in {din}", x.shape())));
    }
    if let Some(b) = b {
        if b.shape() != [dout] {
            return Err(shape_err(
                "linear",
                format!("bias {:?} does not match out width {dout}", b.shape()),
            ));
        }
    }
    Ok((x.numel() / din, din, dout))
}

/// Gradients of [`linear`]: `(dx, dw, db)`.
pub fn linear_backward<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, dy: &Tensor<T>) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let (din, dout) = (w.shape()[0], w.shape()[1]);
    let rows = x.numel() / din;
    let mut dx = vec![T::zero(); rows * din];
    T::gemm(rows, dout, din, dy.data(), false, w.data(), true, T::zero(), &mut dx);
    let mut dw = vec![T::zero(); din * dout];
    T::gemm(din, rows, dout, x.data(), true, dy.data(), false, T::zero(), &mut dw);
    let mut db = vec![T::zero(); dout];
    for row in dy.data().chunks_exact(dout) {
        for (acc, &g) in db.iter_mut().zip(row) {
            *acc += g;
        }
    }
    (
        Tensor::from_vec(x.shape(), dx).unwrap(),
        Tensor::from_vec(w.shape(), dw).unwrap(),
        Tensor::from_vec(&[dout], db).unwrap(),
    )
}

/// Normalizes every trailing vector to zero mean and unit population variance.
pub fn layer_norm<T: Scalar>(x: &Tensor<T>, eps: T) -> Result<Tensor<T>> {
    let d = x.last_dim();
    if x.rank() == 0 || d == 0 {
        return Err(shape_err("layer_norm", "needs a non-empty trailing axis"));
    }
    let (y, _) = layer_norm_with_stats(x, eps);
    y.check_finite("layer_norm")
}

/// Normalized output plus the per-row reciprocal standard deviations.
pub(crate) fn layer_norm_with_stats<T: Scalar>(x: &Tensor<T>, eps: T) -> (Tensor<T>, Vec<T>) {
    let d = x.last_dim();
    let dn = T::from_usize(d).unwrap();
    let mut out = Vec::with_capacity(x.numel());
    let mut rstd = Vec::with_capacity(x.numel() / d);
    for row in x.data().chunks_exact(d) {
        let mean = row.iter().copied().sum::<T>() / dn;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
        let r = T::one() / (var + eps).sqrt();
        out.extend(row.iter().map(|&v| (v - mean) * r));
        rstd.push(r);
    }
    (Tensor::from_vec(x.shape(), out).unwrap(), rstd)
}

/// Vector-Jacobian product of [`layer_norm`] given its output `y` and `rstd`.
pub(crate) fn layer_norm_backward<T: Scalar>(y: &Tensor<T>, rstd: &[T], dy: &Tensor<T>) -> Tensor<T> {
    let d = y.last_dim();
    let dn = T::from_usize(d).unwrap();
    let mut dx = Vec::with_capacity(y.numel());
    for ((yr, gr), &r) in y.data().chunks_exact(d).zip(dy.data().chunks_exact(d)).zip(rstd) {
        let mean_g = gr.iter().copied().sum::<T>() / dn;
        let mean_gy = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum::<T>() / dn;
        dx.extend(yr.iter().zip(gr).map(|(&yv, &g)| r * (g - mean_g - yv * mean_gy)));
    }
    Tensor::from_vec(y.shape(), dx).unwrap()
}

/// Max-subtracted softmax over the trailing axis.
pub fn softmax<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let k = x.last_dim();
    if x.rank() == 0 || k == 0 {
        return Err(shape_err("softmax", "needs a non-empty trailing axis"));
    }
    let mut out = x.data().to_vec();
    for row in out.chunks_exact_mut(k) {
        softmax_in_place(row);
    }
    Tensor::from_vec(x.shape(), out)?.check_finite("softmax")
}

pub(crate) fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let m = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
    let mut total = T::zero();
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

/// Backward of a single softmax row: `dx = y * (dy - <dy, y>)`.
pub(crate) fn softmax_row_backward<T: Scalar>(y: &[T], dy: &[T], dx: &mut [T]) {
    let dot: T = y.iter().zip(dy).map(|(&a, &b)| a * b).sum();
    for ((o, &yv), &g) in dx.iter_mut().zip(y).zip(dy) {
        *o = yv * (g - dot);
    }
}

#[inline]
pub(crate) fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

#[inline]
pub(crate) fn silu_scalar<T: Scalar>(x: T) -> T {
    x * sigmoid(x)
}

#[inline]
pub(crate) fn silu_grad<T: Scalar>(x: T) -> T {
    let s = sigmoid(x);
    s * (T::one() + x * (T::one() - s))
}

#[inline]
pub(crate) fn gelu_scalar<T: Scalar>(x: T) -> T {
    let inner = T::lit(GELU_SCALE) * (x + T::lit(GELU_COEF) * x * x * x);
    T::lit(0.5) * x * (T::one() + inner.tanh())
}

#[inline]
pub(crate) fn gelu_grad<T: Scalar>(x: T) -> T {
    let inner = T::lit(GELU_SCALE) * (x + T::lit(GELU_COEF) * x * x * x);
    let t = inner.tanh();
    let dinner = T::lit(GELU_SCALE) * (T::one() + T::lit(3.0 * GELU_COEF) * x * x);
    T::lit(0.5) * (T::one() + t) + T::lit(0.5) * x * (T::one() - t * t) * dinner
}

/// `log(1 + e^x)` without overflow.
#[inline]
pub(crate) fn softplus_scalar<T: Scalar>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

pub fn silu<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    x.map(silu_scalar).check_finite("silu")
}

/// GELU, tanh approximation.
pub fn gelu<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    x.map(gelu_scalar).check_finite("gelu")
}

pub fn softplus<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    x.map(softplus_scalar).check_finite("softplus")
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, v).unwrap()
    }

    fn close(a: &Tensor<f64>, b: &[f64], tol: f64) {
        assert_eq!(a.numel(), b.len());
        for (x, y) in a.data().iter().zip(b) {
            assert!((x - y).abs() <= tol, "{a:?} vs {b:?}");
        }
    }

    #[test]
    fn linear_examples() {
        let x = t(&[2], &[1.0, 2.0]);
        close(&linear(&x, &Tensor::eye(2), None).unwrap(), &[1.0, 2.0], 0.0);
        let ones = t(&[2, 2], &[1.0, 1.0, 1.0, 1.0]);
        let zero_b = t(&[2], &[0.0, 0.0]);
        close(&linear(&x, &ones, Some(&zero_b)).unwrap(), &[3.0, 3.0], 0.0);
        let swap = t(&[2, 2], &[0.0, 1.0, 1.0, 0.0]);
        let b = t(&[2], &[1.0, 1.0]);
        close(&linear(&t(&[2], &[1.0, 0.0]), &swap, Some(&b)).unwrap(), &[1.0, 2.0], 0.0);
    }

    #[test]
    fn linear_rejects_width_mismatch() {
        let x = t(&[3], &[1.0, 2.0, 3.0]);
        assert!(linear(&x, &Tensor::eye(2), None).is_err());
        let bad_bias = t(&[3], &[0.0; 3]);
        assert!(linear(&t(&[2], &[1.0, 2.0]), &Tensor::eye(2), Some(&bad_bias)).is_err());
    }

    #[test]
    fn layer_norm_examples() {
        close(&layer_norm(&t(&[3], &[5.0, 5.0, 5.0]), 1e-6).unwrap(), &[0.0; 3], 0.0);
        close(
            &layer_norm(&t(&[3], &[1.0, 2.0, 3.0]), 0.0).unwrap(),
            &[-1.224745, 0.0, 1.224745],
            1e-6,
        );
        close(&layer_norm(&t(&[2], &[-1.0, 1.0]), 0.0).unwrap(), &[-1.0, 1.0], 1e-15);
    }

    #[test]
    fn softmax_examples() {
        let third = 1.0 / 3.0;
        close(&softmax(&t(&[3], &[0.0; 3])).unwrap(), &[third; 3], 1e-15);
        let x = t(&[3], &[1f64.ln(), 2f64.ln(), 3f64.ln()]);
        close(&softmax(&x).unwrap(), &[1.0 / 6.0, 2.0 / 6.0, 3.0 / 6.0], 1e-15);
        close(&softmax(&t(&[2], &[1000.0, 0.0])).unwrap(), &[1.0, 0.0], 1e-12);
    }

    #[test]
    fn activation_examples() {
        close(&silu(&t(&[1], &[0.0])).unwrap(), &[0.0], 0.0);
        close(&silu(&t(&[1], &[1000.0])).unwrap(), &[1000.0], 1e-9);
        close(&silu(&t(&[1], &[1.0])).unwrap(), &[0.731059], 1e-6);
        close(&gelu(&t(&[1], &[0.0])).unwrap(), &[0.0], 0.0);
        // tanh-form GELU at 1: 0.5 (1 + tanh(sqrt(2/pi) * 1.044715))
        close(&gelu(&t(&[1], &[1.0])).unwrap(), &[0.841192], 1e-6);
        close(&softplus(&t(&[2], &[0.0, 800.0])).unwrap(), &[2f64.ln(), 800.0], 1e-12);
    }

    #[test]
    fn activation_derivatives_match_central_differences() {
        let h = 1e-6f64;
        for &x in &[-3.0f64, -0.4, 0.0, 0.7, 2.5] {
            let fd = (silu_scalar(x + h) - silu_scalar(x - h)) / (2.0 * h);
            assert!((silu_grad(x) - fd).abs() < 1e-8);
            let fd = (gelu_scalar(x + h) - gelu_scalar(x - h)) / (2.0 * h);
            assert!((gelu_grad(x) - fd).abs() < 1e-8);
        }
    }

    fn vec_strategy(n: usize) -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(-5.0f64..5.0, n)
    }

    proptest! {
        #[test]
        fn linear_is_additive(x1 in vec_strategy(6), x2 in vec_strategy(6), w in vec_strategy(12), b in vec_strategy(4)) {
            let x1 = t(&[2, 3], &x1);
            let x2 = t(&[2, 3], &x2);
            let w = t(&[3, 4], &w);
            let b = t(&[4], &b);
            let lhs = linear(&x1.add(&x2).unwrap(), &w, Some(&b)).unwrap();
            let y1 = linear(&x1, &w, Some(&b)).unwrap();
            let y2 = linear(&x2, &w, Some(&b)).unwrap();
            let bias_rows = linear(&Tensor::zeros(&[2, 3]), &w, Some(&b)).unwrap();
            let rhs = y1.add(&y2).unwrap().sub(&bias_rows).unwrap();
            prop_assert!(lhs.max_abs_diff(&rhs).unwrap() < 1e-12);
        }

        #[test]
        fn layer_norm_standardizes(v in vec_strategy(16), shift in -100.0f64..100.0) {
            let m = v.iter().sum::<f64>() / 16.0;
            let var_in = v.iter().map(|a| (a - m) * (a - m)).sum::<f64>() / 16.0;
            // variance >> eps
            prop_assume!(var_in >= 1.0);
            let x = t(&[16], &v.iter().map(|a| a + shift).collect::<Vec<_>>());
            let y = layer_norm(&x, LAYER_NORM_EPS).unwrap();
            let mean = y.mean();
            let var = y.data().iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / 16.0;
            prop_assert!(mean.abs() < 1e-10);
            prop_assert!((var - 1.0).abs() < 1e-6);
        }

        #[test]
        fn softmax_is_shift_invariant(v in vec_strategy(5), c in -50.0f64..50.0) {
            let a = softmax(&t(&[5], &v)).unwrap();
            let b = softmax(&t(&[5], &v.iter().map(|x| x + c).collect::<Vec<_>>())).unwrap();
            prop_assert!(a.max_abs_diff(&b).unwrap() < 1e-12);
            prop_assert!((a.sum() - 1.0).abs() < 1e-12);
        }
    }
}
