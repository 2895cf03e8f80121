//! Central-difference gradient oracle.

use crate::error::{Error, Result};

use super::tensor::{Grad, Tensor};

/// `(f(x + h·eᵢ) − f(x − h·eᵢ)) / 2h` for every coordinate of `x`.
pub fn finite_diff_grad<F>(mut f: F, x: &Tensor, h: f64) -> Result<Grad>
where
    F: FnMut(&Tensor) -> Result<f64>,
{
    let mut probe = x.clone();
    let mut grad = Tensor::zeros(x.shape());
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let plus = f(&probe)?;
        probe.data_mut()[i] = orig - h;
        let minus = f(&probe)?;
        probe.data_mut()[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::NonFinite(format!("finite difference at coordinate {i}")));
        }
        grad.data_mut()[i] = (plus - minus) / (2.0 * h);
    }
    Ok(grad)
}

/// `‖a − b‖₂ / max(‖a‖₂, ‖b‖₂, floor)`.
pub fn relative_error(a: &Tensor, b: &Tensor, floor: f64) -> f64 {
    let diff: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt();
    diff / a.norm().max(b.norm()).max(floor)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares() {
        let x = Tensor::new(&[2], vec![1.0, 2.0]).unwrap();
        let g = finite_diff_grad(|t| Ok(t.dot(t)), &x, 1e-5).unwrap();
        assert!((g.data()[0] - 2.0).abs() < 1e-8);
        assert!((g.data()[1] - 4.0).abs() < 1e-8);
    }

    #[test]
    fn l1_distance_gives_signs() {
        let target = [0.5, -0.25, 2.0];
        let x = Tensor::new(&[3], vec![1.0, -1.0, 0.0]).unwrap();
        let g = finite_diff_grad(
            |t| Ok(t.data().iter().zip(&target).map(|(a, b)| (a - b).abs()).sum()),
            &x,
            1e-5,
        )
        .unwrap();
        assert_eq!(g.data().iter().map(|v| v.round()).collect::<Vec<_>>(), vec![1.0, -1.0, -1.0]);
    }

    #[test]
    fn non_finite_objective_is_an_error() {
        let x = Tensor::new(&[1], vec![0.0]).unwrap();
        let r = finite_diff_grad(|t| Ok(1.0 / t.data()[0].abs().min(0.0)), &x, 1e-5);
        assert!(matches!(r, Err(Error::NonFinite(_))));
    }
}
