use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numerics::Tensor;

use super::image::Image;
use super::resize::bicubic_resize;

/// An HR crop and its bicubic-downscaled LR counterpart.
#[derive(Debug, Clone)]
pub struct PatchPair {
    pub top: usize,
    pub left: usize,
    pub lr: Image,
    pub hr: Image,
}

/// Tiles `img` with `size × size` HR crops every `stride` pixels, in an
/// order shuffled by `seed`, and pairs each with its `÷scale` LR version.
pub fn extract_patches(img: &Image, size: usize, stride: usize, scale: usize, seed: u64) -> Result<Vec<PatchPair>> {
    if size == 0 || stride == 0 || scale == 0 {
        return Err(Error::Config("patch size, stride and scale must be ≥ 1".into()));
    }
    if size % scale != 0 {
        return Err(Error::Config(format!("patch size {size} is not a multiple of scale {scale}")));
    }
    if size > img.height() || size > img.width() {
        return Err(Error::Config(format!(
            "{size}×{size} patch does not fit a {}×{} image",
            img.height(),
            img.width()
        )));
    }
    let tops = (0..=img.height() - size).step_by(stride);
    let mut origins: Vec<(usize, usize)> =
        tops.flat_map(|t| (0..=img.width() - size).step_by(stride).map(move |l| (t, l))).collect();
    origins.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    origins
        .into_iter()
        .map(|(top, left)| {
            let hr = img.crop(top, left, size, size)?;
            let lr = bicubic_resize(&hr, 1, scale)?;
            Ok(PatchPair { top, left, lr, hr })
        })
        .collect()
}

/// Deterministic colour texture: a few random plane waves plus a soft
/// checkerboard, rescaled into `[0.05, 0.95]`.
pub fn synthetic_texture(height: usize, width: usize, seed: u64) -> Result<Image> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let waves: Vec<[f64; 5]> = (0..4)
        .map(|_| {
            let theta = rng.random_range(0.0..std::f64::consts::PI);
            let freq = rng.random_range(0.15..0.6);
            let phase = rng.random_range(0.0..std::f64::consts::TAU);
            let channel = rng.random_range(0.0..3.0f64).floor();
            [theta.cos() * freq, theta.sin() * freq, phase, channel, rng.random_range(0.5..1.0)]
        })
        .collect();
    let cell = rng.random_range(3.0..6.0);
    let mut raw = Tensor::from_fn(&[height, width, 3], |i| {
        let (y, x, c) = ((i / 3 / width) as f64, ((i / 3) % width) as f64, (i % 3) as f64);
        let mut v = 0.0;
        for w in &waves {
            let gain = if w[3] == c { 1.0 } else { 0.4 };
            v += gain * w[4] * (w[0] * x + w[1] * y + w[2]).sin();
        }
        let check = ((x / cell).floor() + (y / cell).floor()).rem_euclid(2.0);
        v + 0.8 * check
    });
    let (lo, hi) = raw.data().iter().fold((f64::MAX, f64::MIN), |(a, b), &v| (a.min(v), b.max(v)));
    let span = (hi - lo).max(1e-12);
    raw.data_mut().iter_mut().for_each(|v| *v = 0.05 + 0.9 * (*v - lo) / span);
    Image::new(raw)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn non_overlapping_tiling_count() {
        let img = synthetic_texture(20, 26, 0).unwrap();
        let p = extract_patches(&img, 6, 6, 2, 1).unwrap();
        assert_eq!(p.len(), (20 / 6) * (26 / 6));
        assert!(p.iter().all(|q| q.lr.height() == 3 && q.hr.width() == 6));
    }

    #[test]
    fn same_seed_same_crops() {
        let img = synthetic_texture(16, 16, 3).unwrap();
        let a: Vec<_> = extract_patches(&img, 4, 3, 2, 9).unwrap().iter().map(|p| (p.top, p.left)).collect();
        let b: Vec<_> = extract_patches(&img, 4, 3, 2, 9).unwrap().iter().map(|p| (p.top, p.left)).collect();
        let c: Vec<_> = extract_patches(&img, 4, 3, 2, 10).unwrap().iter().map(|p| (p.top, p.left)).collect();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn oversized_patch_is_an_error() {
        let img = synthetic_texture(8, 8, 0).unwrap();
        assert!(extract_patches(&img, 10, 1, 2, 0).is_err());
        assert!(extract_patches(&img, 5, 1, 2, 0).is_err());
    }

    #[test]
    fn texture_is_deterministic_and_in_range() {
        let a = synthetic_texture(12, 9, 5).unwrap();
        assert_eq!(a, synthetic_texture(12, 9, 5).unwrap());
        assert!(a.pixels().data().iter().all(|v| (0.0..=1.0).contains(v)));
    }
}
