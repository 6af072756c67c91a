//! Central finite differences, used as an independent oracle for every
//! reverse-mode path.

use super::Tensor;

/// Central-difference gradient of `f` at `x`, one coordinate at a time.
pub fn finite_diff_grad<F>(mut f: F, x: &Tensor, h: f64) -> Tensor
where
    F: FnMut(&Tensor) -> f64,
{
    let mut probe = x.clone();
    let mut grad = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = f(&probe);
        probe.data_mut()[i] = orig - h;
        let down = f(&probe);
        probe.data_mut()[i] = orig;
        grad.push((up - down) / (2.0 * h));
    }
    Tensor::from_parts(x.shape().to_vec(), grad)
}

/// Central difference of `f` along coordinate `index` only.
pub fn finite_diff_coord<F>(mut f: F, x: &Tensor, index: usize, h: f64) -> f64
where
    F: FnMut(&Tensor) -> f64,
{
    let mut probe = x.clone();
    let orig = probe.data()[index];
    probe.data_mut()[index] = orig + h;
    let up = f(&probe);
    probe.data_mut()[index] = orig - h;
    let down = f(&probe);
    (up - down) / (2.0 * h)
}

/// Relative disagreement between two derivative values. Pairs whose absolute
/// difference is at most `abs_floor` count as agreeing.
pub fn relative_error(analytic: f64, numeric: f64, abs_floor: f64) -> f64 {
    let diff = (analytic - numeric).abs();
    if diff <= abs_floor {
        return 0.0;
    }
    diff / analytic.abs().max(numeric.abs())
}

/// Worst coordinate-wise [`relative_error`] over two gradients.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64], abs_floor: f64) -> f64 {
    assert_eq!(analytic.len(), numeric.len(), "gradient lengths differ");
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| relative_error(a, n, abs_floor))
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn squared_norm_gradient() {
        let x = Tensor::vector(vec![1.0, 2.0]).unwrap();
        let g = finite_diff_grad(|t| t.data().iter().map(|v| v * v).sum(), &x, 1e-5);
        assert!((g.data()[0] - 2.0).abs() < 1e-8);
        assert!((g.data()[1] - 4.0).abs() < 1e-8);
    }

    #[test]
    fn constant_function_has_zero_gradient() {
        let x = Tensor::vector(vec![3.0, -1.0, 0.0]).unwrap();
        let g = finite_diff_grad(|_| 7.5, &x, 1e-5);
        assert!(g.data().iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(1e-9, 2e-9, 1e-7), 0.0);
        assert!((relative_error(1.0, 1.1, 1e-7) - 0.1 / 1.1).abs() < 1e-12);
    }
}
