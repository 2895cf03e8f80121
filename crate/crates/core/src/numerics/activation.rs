use crate::error::{Error, Result};

use super::par;
use super::tensor::Tensor;

/// Logit written into padded candidate slots before the softmax.
pub const MASKED_LOGIT: f64 = -1e30;

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_CUBIC: f64 = 0.044_715;
pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Tanh-form GELU.
pub fn gelu_scalar(x: f64) -> f64 {
    let u = SQRT_2_OVER_PI * (x + GELU_CUBIC * x * x * x);
    0.5 * x * (1.0 + u.tanh())
}

pub fn gelu_grad_scalar(x: f64) -> f64 {
    let u = SQRT_2_OVER_PI * (x + GELU_CUBIC * x * x * x);
    let t = u.tanh();
    let du = SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_CUBIC * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

pub fn gelu(x: &Tensor) -> Tensor {
    x.map(gelu_scalar)
}

pub fn gelu_backward(x: &Tensor, dy: &Tensor) -> Result<Tensor> {
    dy.expect_shape("gelu_backward", x.shape())?;
    let data = x
        .data()
        .iter()
        .zip(dy.data())
        .map(|(&v, &g)| gelu_grad_scalar(v) * g)
        .collect();
    Tensor::new(x.shape(), data)
}

fn row_length(lengths: Option<&[usize]>, row: usize, width: usize) -> usize {
    match lengths {
        Some(l) => l[row % l.len()],
        None => width,
    }
}

/// Numerically stable softmax over the last axis.
///
/// With `lengths`, row `r` only uses its first `lengths[r % lengths.len()]`
/// entries and the rest of the row is written as exactly zero. Repeating the
/// length vector this way lets a `heads × N × k` tensor share one per-token
/// length vector.
pub fn softmax_rows(x: &Tensor, lengths: Option<&[usize]>) -> Result<Tensor> {
    let width = *x.shape().last().ok_or_else(|| Error::shape("softmax_rows", "rank 0"))?;
    if width == 0 {
        return Err(Error::DegenerateRow { row: 0 });
    }
    let rows = x.len() / width;
    if let Some(l) = lengths {
        if l.is_empty() || rows % l.len() != 0 {
            return Err(Error::shape(
                "softmax_rows",
                format!("{} lengths for {rows} rows", l.len()),
            ));
        }
        if let Some(row) = l.iter().position(|&len| len == 0) {
            return Err(Error::DegenerateRow { row });
        }
        if l.iter().any(|&len| len > width) {
            return Err(Error::shape("softmax_rows", "length exceeds row width"));
        }
    }
    let mut out = vec![0.0; x.len()];
    let src = x.data();
    par::for_each_row(&mut out, width, |r, row| {
        let len = row_length(lengths, r, width);
        let input = &src[r * width..r * width + len];
        let max = input.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for (o, &v) in row[..len].iter_mut().zip(input) {
            *o = (v - max).exp();
            total += *o;
        }
        let inv = 1.0 / total;
        for o in &mut row[..len] {
            *o *= inv;
        }
    });
    Tensor::new(x.shape(), out)
}

/// Vector-Jacobian product of [`softmax_rows`] given its output `y`.
pub fn softmax_rows_backward(y: &Tensor, dy: &Tensor, lengths: Option<&[usize]>) -> Result<Tensor> {
    dy.expect_shape("softmax_rows_backward", y.shape())?;
    let width = *y.shape().last().unwrap_or(&1);
    let mut out = vec![0.0; y.len()];
    let (ys, dys) = (y.data(), dy.data());
    par::for_each_row(&mut out, width, |r, row| {
        let len = row_length(lengths, r, width);
        let yr = &ys[r * width..r * width + len];
        let dr = &dys[r * width..r * width + len];
        let inner: f64 = yr.iter().zip(dr).map(|(a, b)| a * b).sum();
        for ((o, &yv), &dv) in row[..len].iter_mut().zip(yr).zip(dr) {
            *o = yv * (dv - inner);
        }
    });
    Tensor::new(y.shape(), out)
}

/// Saved statistics of a layer norm forward pass.
#[derive(Debug, Clone)]
pub struct LayerNormCache {
    pub normalized: Tensor,
    pub rstd: Vec<f64>,
}

/// Per-row normalization over the last axis followed by `gamma`/`beta`.
pub fn layer_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor) -> Result<(Tensor, LayerNormCache)> {
    x.expect_rank("layer_norm", 2)?;
    let (n, c) = (x.dim(0), x.dim(1));
    gamma.expect_shape("layer_norm", &[c])?;
    beta.expect_shape("layer_norm", &[c])?;
    let mut normalized = Tensor::zeros(&[n, c]);
    let mut y = Tensor::zeros(&[n, c]);
    let mut rstd = vec![0.0; n];
    for i in 0..n {
        let row = x.row(i);
        let mean = row.iter().sum::<f64>() / c as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
        let r = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        rstd[i] = r;
        let xh = normalized.row_mut(i);
        for (o, v) in xh.iter_mut().zip(row) {
            *o = (v - mean) * r;
        }
        let xh = normalized.row(i).to_vec();
        for (j, o) in y.row_mut(i).iter_mut().enumerate() {
            *o = xh[j] * gamma.data()[j] + beta.data()[j];
        }
    }
    Ok((y, LayerNormCache { normalized, rstd }))
}

pub struct LayerNormGrads {
    pub dx: Tensor,
    pub dgamma: Tensor,
    pub dbeta: Tensor,
}

pub fn layer_norm_backward(cache: &LayerNormCache, gamma: &Tensor, dy: &Tensor) -> Result<LayerNormGrads> {
    let xh = &cache.normalized;
    dy.expect_shape("layer_norm_backward", xh.shape())?;
    let (n, c) = (xh.dim(0), xh.dim(1));
    let mut dx = Tensor::zeros(&[n, c]);
    let mut dgamma = vec![0.0; c];
    let mut dbeta = vec![0.0; c];
    for i in 0..n {
        let (xr, dr) = (xh.row(i), dy.row(i));
        let mut mean_d = 0.0;
        let mut mean_dx = 0.0;
        for j in 0..c {
            let g = dr[j] * gamma.data()[j];
            mean_d += g;
            mean_dx += g * xr[j];
            dgamma[j] += dr[j] * xr[j];
            dbeta[j] += dr[j];
        }
        mean_d /= c as f64;
        mean_dx /= c as f64;
        let r = cache.rstd[i];
        for (j, o) in dx.row_mut(i).iter_mut().enumerate() {
            let g = dr[j] * gamma.data()[j];
            *o = r * (g - mean_d - xr[j] * mean_dx);
        }
    }
    Ok(LayerNormGrads {
        dx,
        dgamma: Tensor::new(&[c], dgamma)?,
        dbeta: Tensor::new(&[c], dbeta)?,
    })
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    #[test]
    fn gelu_at_zero() {
        assert_eq!(gelu_scalar(0.0), 0.0);
        assert!((gelu_scalar(10.0) - 10.0).abs() < 1e-12);
    }

    #[test]
    fn uniform_row_is_uniform() {
        let x = Tensor::zeros(&[1, 3]);
        let y = softmax_rows(&x, Some(&[3])).unwrap();
        for v in y.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn large_logits_do_not_overflow() {
        let x = Tensor::new(&[1, 2], vec![1000.0, 0.0]).unwrap();
        let y = softmax_rows(&x, None).unwrap();
        assert!((y.data()[0] - 1.0).abs() < 1e-15);
        assert!(y.data()[1] >= 0.0 && y.data()[1] < 1e-300);
    }

    #[test]
    fn padded_row_matches_truncated_softmax() {
        let (a, b) = (0.3, -1.2);
        let x = Tensor::new(&[1, 3], vec![a, b, 123.0]).unwrap();
        let y = softmax_rows(&x, Some(&[2])).unwrap();
        let z = (a as f64).exp() + (b as f64).exp();
        assert!((y.data()[0] - a.exp() / z).abs() < 1e-15);
        assert!((y.data()[1] - b.exp() / z).abs() < 1e-15);
        assert_eq!(y.data()[2], 0.0);
    }

    #[test]
    fn zero_length_row_is_degenerate() {
        let x = Tensor::zeros(&[2, 3]);
        assert!(matches!(
            softmax_rows(&x, Some(&[3, 0])),
            Err(Error::DegenerateRow { row: 1 })
        ));
    }

    #[test]
    fn layer_norm_standardizes_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = Tensor::uniform(&[6, 10], -3.0, 5.0, &mut rng);
        let (_, cache) = layer_norm(&x, &Tensor::full(&[10], 1.0), &Tensor::zeros(&[10])).unwrap();
        for i in 0..6 {
            let row = cache.normalized.row(i);
            let mean = row.iter().sum::<f64>() / 10.0;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 10.0;
            assert!(mean.abs() < 1e-10);
            // eps shrinks the variance by var / (var + eps)
            let raw = x.row(i);
            let rm = raw.iter().sum::<f64>() / 10.0;
            let rv = raw.iter().map(|v| (v - rm).powi(2)).sum::<f64>() / 10.0;
            assert!((var - rv / (rv + LAYER_NORM_EPS)).abs() < 1e-10);
            assert!((var - 1.0).abs() < 1e-5);
        }
    }
}
