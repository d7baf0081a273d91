//! Central-difference gradient oracle, independent of [`crate::graph`].

use crate::error::Result;
use crate::tensor::Tensor;

/// Relative error used by every gradient check: `|a - fd| / max(|fd|, 1)`.
pub fn rel_error(analytic: f64, fd: f64) -> f64 {
    (analytic - fd).abs() / fd.abs().max(1.0)
}

/// `(f(x + step e_i) - f(x - step e_i)) / (2 step)` for every element.
pub fn finite_diff_grad<F>(f: F, x: &Tensor<f64>, step: f64) -> Result<Tensor<f64>>
where
    F: FnMut(&Tensor<f64>) -> Result<f64>,
{
    let coords: Vec<usize> = (0..x.numel()).collect();
    let g = finite_diff_at(f, x, step, &coords)?;
    Ok(Tensor::from_parts(x.shape().to_vec(), g))
}

/// Central differences at the listed flat coordinates only.
pub fn finite_diff_at<F>(mut f: F, x: &Tensor<f64>, step: f64, coords: &[usize]) -> Result<Vec<f64>>
where
    F: FnMut(&Tensor<f64>) -> Result<f64>,
{
    assert!(step > 0.0, "finite difference step must be positive");
    let mut probe = x.clone();
    let mut out = Vec::with_capacity(coords.len());
    for &i in coords {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + step;
        let plus = f(&probe)?;
        probe.data_mut()[i] = orig - step;
        let minus = f(&probe)?;
        probe.data_mut()[i] = orig;
        out.push((plus - minus) / (2.0 * step));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares() {
        let x = Tensor::from_vec(vec![1.0, 2.0]);
        let g = finite_diff_grad(|t| Ok(t.data().iter().map(|v| v * v).sum()), &x, 1e-5).unwrap();
        assert!((g.data()[0] - 2.0).abs() < 1e-8);
        assert!((g.data()[1] - 4.0).abs() < 1e-8);
    }

    #[test]
    fn constant_function() {
        let x = Tensor::from_vec(vec![0.3, -4.0, 7.0]);
        let g = finite_diff_grad(|_| Ok(3.5), &x, 1e-5).unwrap();
        assert!(g.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn relative_error_floor() {
        assert_eq!(rel_error(1e-3, 0.0), 1e-3);
        assert_eq!(rel_error(110.0, 100.0), 0.1);
    }
}
