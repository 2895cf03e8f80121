use crate::error::{Error, Result};

use super::image::Image;

/// Mean squared difference of `f` applied to corresponding chunks of
/// `stride` samples.
fn mse(a: &Image, b: &Image, stride: usize, f: impl Fn(&[f64]) -> f64) -> Result<f64> {
    if a.pixels().shape() != b.pixels().shape() {
        return Err(Error::shape("psnr", format!("{:?} vs {:?}", a.pixels().shape(), b.pixels().shape())));
    }
    let pairs = a.pixels().data().chunks(stride).zip(b.pixels().data().chunks(stride));
    let (sum, count) = pairs.fold((0.0, 0usize), |(s, n), (x, y)| {
        let d = f(x) - f(y);
        (s + d * d, n + 1)
    });
    Ok(sum / count as f64)
}

fn db(mse: f64) -> f64 {
    if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (1.0 / mse).log10()
    }
}

/// PSNR over all RGB samples with peak 1; identical images give `+∞`.
pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    Ok(db(mse(a, b, 1, |s| s[0])?))
}

/// PSNR on the BT.601 luma channel (`Y ∈ [16/255, 235/255]`).
pub fn psnr_y(a: &Image, b: &Image) -> Result<f64> {
    let luma = |p: &[f64]| (16.0 + 65.481 * p[0] + 128.553 * p[1] + 24.966 * p[2]) / 255.0;
    Ok(db(mse(a, b, 3, luma)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tensor;

    #[test]
    fn identical_and_uniform_offset() {
        let a = Image::new(Tensor::full(&[3, 4, 3], 0.5)).unwrap();
        let b = Image::new(Tensor::full(&[3, 4, 3], 0.6)).unwrap();
        assert_eq!(psnr(&a, &a).unwrap(), f64::INFINITY);
        assert_eq!(psnr_y(&a, &a).unwrap(), f64::INFINITY);
        assert!((psnr(&a, &b).unwrap() - 20.0).abs() < 1e-9);
        assert_eq!(psnr(&a, &b).unwrap(), psnr(&b, &a).unwrap());
    }

    #[test]
    fn shape_mismatch() {
        let a = Image::new(Tensor::zeros(&[2, 2, 3])).unwrap();
        let b = Image::new(Tensor::zeros(&[2, 3, 3])).unwrap();
        assert!(psnr(&a, &b).is_err());
    }
}
