//! Bicubic resampling with the `a = −0.5` cubic kernel and clamped edges.
//!
//! Pixel centres are aligned (`u = (x + ½)/s − ½`). When shrinking, the
//! kernel is stretched by `1/s` so it also low-passes, as in the usual SR
//! degradation pipeline. Weights of each output sample are normalized to
//! sum to one, so constants are reproduced exactly.

use crate::error::{Error, Result};
use crate::numerics::Tensor;

use super::image::Image;

pub const CUBIC_A: f64 = -0.5;

pub fn cubic(x: f64) -> f64 {
    let a = CUBIC_A;
    let t = x.abs();
    if t <= 1.0 {
        ((a + 2.0) * t - (a + 3.0)) * t * t + 1.0
    } else if t < 2.0 {
        ((a * t - 5.0 * a) * t + 8.0 * a) * t - 4.0 * a
    } else {
        0.0
    }
}

/// Source taps `(index, weight)` for each of `n_out` samples along one axis.
pub fn axis_taps(n_in: usize, n_out: usize, scale: f64) -> Vec<Vec<(usize, f64)>> {
    let stretch = scale.min(1.0);
    let support = 2.0 / stretch;
    (0..n_out)
        .map(|x| {
            let u = (x as f64 + 0.5) / scale - 0.5;
            let first = (u - support).floor() as i64;
            let last = (u + support).ceil() as i64;
            let mut taps: Vec<(usize, f64)> = Vec::new();
            for j in first..=last {
                let w = stretch * cubic(stretch * (u - j as f64));
                if w == 0.0 {
                    continue;
                }
                let idx = j.clamp(0, n_in as i64 - 1) as usize;
                match taps.iter_mut().find(|(i, _)| *i == idx) {
                    Some(t) => t.1 += w,
                    None => taps.push((idx, w)),
                }
            }
            let total: f64 = taps.iter().map(|t| t.1).sum();
            taps.iter_mut().for_each(|t| t.1 /= total);
            taps
        })
        .collect()
}

/// Resizes by `num/den`; each output side is `⌊side · num / den⌋`.
pub fn bicubic_resize(img: &Image, num: usize, den: usize) -> Result<Image> {
    if num == 0 || den == 0 {
        return Err(Error::Config(format!("invalid scale {num}/{den}")));
    }
    let (h, w) = (img.height(), img.width());
    let (oh, ow) = (h * num / den, w * num / den);
    if oh == 0 || ow == 0 {
        return Err(Error::Config(format!("{h}×{w} scaled by {num}/{den} is empty")));
    }
    if num == den {
        return Ok(img.clone());
    }
    let scale = num as f64 / den as f64;
    let src = img.pixels().data();

    let rows = axis_taps(h, oh, scale);
    let mut tmp = vec![0.0; oh * w * 3];
    for (y, taps) in rows.iter().enumerate() {
        let out = &mut tmp[y * w * 3..(y + 1) * w * 3];
        for &(sy, wt) in taps {
            let line = &src[sy * w * 3..(sy + 1) * w * 3];
            out.iter_mut().zip(line).for_each(|(o, &v)| *o += wt * v);
        }
    }

    let cols = axis_taps(w, ow, scale);
    let mut data = vec![0.0; oh * ow * 3];
    for y in 0..oh {
        for (x, taps) in cols.iter().enumerate() {
            for &(sx, wt) in taps {
                for c in 0..3 {
                    data[(y * ow + x) * 3 + c] += wt * tmp[(y * w + sx) * 3 + c];
                }
            }
        }
    }
    Image::new(Tensor::new(&[oh, ow, 3], data)?)
}
