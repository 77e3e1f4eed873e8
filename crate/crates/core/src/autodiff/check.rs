use crate::tensor::{Rng, Tensor};

const DENOM_FLOOR: f64 = 1e-8;

fn rel_err(ad: f64, fd: f64) -> f64 {
    (ad - fd).abs() / ad.abs().max(fd.abs()).max(DENOM_FLOOR)
}

/// Central-difference check of `grad` against `f` at `theta`.
///
/// Returns `max_i |g_ad - g_fd| / max(|g_ad|, |g_fd|, 1e-8)`.
pub fn finite_diff_check<F>(f: F, grad: &Tensor<f64>, theta: &Tensor<f64>, h: f64) -> f64
where
    F: FnMut(&Tensor<f64>) -> f64,
{
    let all: Vec<usize> = (0..theta.numel()).collect();
    finite_diff_check_coords(f, grad, theta, h, &all)
}

/// Like [`finite_diff_check`] but only perturbs the listed flat coordinates.
pub fn finite_diff_check_coords<F>(mut f: F, grad: &Tensor<f64>, theta: &Tensor<f64>, h: f64, coords: &[usize]) -> f64
where
    F: FnMut(&Tensor<f64>) -> f64,
{
    assert_eq!(grad.shape(), theta.shape(), "gradient and point shapes differ");
    let mut probe = theta.clone();
    let mut worst = 0.0f64;
    for &i in coords {
        let x0 = theta.data()[i];
        probe.data_mut()[i] = x0 + h;
        let up = f(&probe);
        probe.data_mut()[i] = x0 - h;
        let down = f(&probe);
        probe.data_mut()[i] = x0;
        let fd = (up - down) / (2.0 * h);
        worst = worst.max(rel_err(grad.data()[i], fd));
    }
    worst
}

/// [`finite_diff_check`] applied to `z -> f(theta + U z)` at `z = 0`, where
/// the `k` columns of `U` are random unit directions over all of `theta`.
/// The analytic side is the projected gradient `U^T grad`.
pub fn finite_diff_check_projected<F>(mut f: F, grad: &Tensor<f64>, theta: &Tensor<f64>, h: f64, k: usize, rng: &mut Rng) -> f64
where
    F: FnMut(&Tensor<f64>) -> f64,
{
    assert_eq!(grad.shape(), theta.shape(), "gradient and point shapes differ");
    let dirs: Vec<Tensor<f64>> = (0..k)
        .map(|_| {
            let u: Tensor<f64> = rng.normal(theta.shape());
            let norm = u.data().iter().map(|v| v * v).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
            u.scale(1.0 / norm)
        })
        .collect();
    let projected: Vec<f64> = dirs
        .iter()
        .map(|u| u.data().iter().zip(grad.data()).map(|(a, b)| a * b).sum())
        .collect();
    let z0 = Tensor::zeros(&[k]);
    let mut point = theta.clone();
    finite_diff_check(
        |z| {
            for (i, p) in point.data_mut().iter_mut().enumerate() {
                *p = theta.data()[i] + dirs.iter().zip(z.data()).map(|(u, &zj)| u.data()[i] * zj).sum::<f64>();
            }
            f(&point)
        },
        &Tensor::from_vec(&[k], projected).expect("one entry per direction"),
        &z0,
        h,
    )
}
