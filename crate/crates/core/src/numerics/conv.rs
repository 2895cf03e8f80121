//! 3×3 convolutions over `H×W×C` feature maps (zero padding, stride 1) and
//! the sub-pixel shuffle used by the upsampler.

use crate::error::{Error, Result};

use super::flops;
use super::par;
use super::tensor::Tensor;

fn hwc(x: &Tensor, op: &'static str) -> Result<(usize, usize, usize)> {
    x.expect_rank(op, 3)?;
    Ok((x.dim(0), x.dim(1), x.dim(2)))
}

/// Yields `(ky, kx, sy, sx)` for the in-bounds taps around `(y, x)`.
fn taps(y: usize, x: usize, h: usize, w: usize) -> impl Iterator<Item = (usize, usize, usize, usize)> {
    (0..3).flat_map(move |ky| {
        (0..3).filter_map(move |kx| {
            let sy = (y + ky).checked_sub(1)?;
            let sx = (x + kx).checked_sub(1)?;
            (sy < h && sx < w).then_some((ky, kx, sy, sx))
        })
    })
}

/// Dense 3×3 convolution. `w` is laid out `3×3×cin×cout`.
pub fn conv3x3(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (h, wd, cin) = hwc(x, "conv3x3")?;
    w.expect_rank("conv3x3", 4)?;
    let cout = w.dim(3);
    if w.shape()[..3] != [3, 3, cin] || b.shape() != [cout] {
        return Err(Error::shape(
            "conv3x3",
            format!("x {:?}, w {:?}, b {:?}", x.shape(), w.shape(), b.shape()),
        ));
    }
    flops::record(2 * (h * wd * 9 * cin * cout) as u64);
    let (xs, ws, bs) = (x.data(), w.data(), b.data());
    let mut out = vec![0.0; h * wd * cout];
    par::for_each_row(&mut out, wd * cout, |y, row| {
        for xx in 0..wd {
            let o = &mut row[xx * cout..(xx + 1) * cout];
            o.copy_from_slice(bs);
            for (ky, kx, sy, sx) in taps(y, xx, h, wd) {
                let src = &xs[(sy * wd + sx) * cin..(sy * wd + sx + 1) * cin];
                let wbase = (ky * 3 + kx) * cin * cout;
                for (ci, &v) in src.iter().enumerate() {
                    let wrow = &ws[wbase + ci * cout..wbase + (ci + 1) * cout];
                    for (ov, &wv) in o.iter_mut().zip(wrow) {
                        *ov += v * wv;
                    }
                }
            }
        }
    });
    Tensor::new(&[h, wd, cout], out)
}

pub struct ConvGrads {
    pub dx: Tensor,
    pub dw: Tensor,
    pub db: Tensor,
}

pub fn conv3x3_backward(x: &Tensor, w: &Tensor, dy: &Tensor) -> Result<ConvGrads> {
    let (h, wd, cin) = hwc(x, "conv3x3_backward")?;
    let cout = w.dim(3);
    dy.expect_shape("conv3x3_backward", &[h, wd, cout])?;
    flops::record(4 * (h * wd * 9 * cin * cout) as u64);
    let (xs, ws, ds) = (x.data(), w.data(), dy.data());

    // dx[sy, sx, ci] = Σ taps w[ky, kx, ci, :] · dy[y, x, :]
    let mut dx = vec![0.0; h * wd * cin];
    par::for_each_row(&mut dx, wd * cin, |sy, row| {
        for sx in 0..wd {
            let o = &mut row[sx * cin..(sx + 1) * cin];
            for ky in 0..3 {
                let Some(y) = (sy + 1).checked_sub(ky) else { continue };
                if y >= h {
                    continue;
                }
                for kx in 0..3 {
                    let Some(xx) = (sx + 1).checked_sub(kx) else { continue };
                    if xx >= wd {
                        continue;
                    }
                    let g = &ds[(y * wd + xx) * cout..(y * wd + xx + 1) * cout];
                    let wbase = (ky * 3 + kx) * cin * cout;
                    for (ci, ov) in o.iter_mut().enumerate() {
                        let wrow = &ws[wbase + ci * cout..wbase + (ci + 1) * cout];
                        *ov += wrow.iter().zip(g).map(|(a, b)| a * b).sum::<f64>();
                    }
                }
            }
        }
    });

    let mut dw = vec![0.0; 9 * cin * cout];
    let mut db = vec![0.0; cout];
    for y in 0..h {
        for xx in 0..wd {
            let g = &ds[(y * wd + xx) * cout..(y * wd + xx + 1) * cout];
            for (d, v) in db.iter_mut().zip(g) {
                *d += v;
            }
            for (ky, kx, sy, sx) in taps(y, xx, h, wd) {
                let src = &xs[(sy * wd + sx) * cin..(sy * wd + sx + 1) * cin];
                let wbase = (ky * 3 + kx) * cin * cout;
                for (ci, &v) in src.iter().enumerate() {
                    let drow = &mut dw[wbase + ci * cout..wbase + (ci + 1) * cout];
                    for (dv, &gv) in drow.iter_mut().zip(g) {
                        *dv += v * gv;
                    }
                }
            }
        }
    }
    Ok(ConvGrads {
        dx: Tensor::new(&[h, wd, cin], dx)?,
        dw: Tensor::new(&[3, 3, cin, cout], dw)?,
        db: Tensor::new(&[cout], db)?,
    })
}

/// Per-channel 3×3 convolution. `w` is laid out `3×3×c`.
pub fn depthwise_conv3x3(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (h, wd, c) = hwc(x, "depthwise_conv3x3")?;
    if w.shape() != [3, 3, c] || b.shape() != [c] {
        return Err(Error::shape(
            "depthwise_conv3x3",
            format!("x {:?}, w {:?}, b {:?}", x.shape(), w.shape(), b.shape()),
        ));
    }
    flops::record(2 * (h * wd * 9 * c) as u64);
    let (xs, ws, bs) = (x.data(), w.data(), b.data());
    let mut out = vec![0.0; h * wd * c];
    par::for_each_row(&mut out, wd * c, |y, row| {
        for xx in 0..wd {
            let o = &mut row[xx * c..(xx + 1) * c];
            o.copy_from_slice(bs);
            for (ky, kx, sy, sx) in taps(y, xx, h, wd) {
                let src = &xs[(sy * wd + sx) * c..(sy * wd + sx + 1) * c];
                let wrow = &ws[(ky * 3 + kx) * c..(ky * 3 + kx + 1) * c];
                for ((ov, &v), &wv) in o.iter_mut().zip(src).zip(wrow) {
                    *ov += v * wv;
                }
            }
        }
    });
    Tensor::new(&[h, wd, c], out)
}

pub fn depthwise_conv3x3_backward(x: &Tensor, w: &Tensor, dy: &Tensor) -> Result<ConvGrads> {
    let (h, wd, c) = hwc(x, "depthwise_conv3x3_backward")?;
    dy.expect_shape("depthwise_conv3x3_backward", &[h, wd, c])?;
    flops::record(4 * (h * wd * 9 * c) as u64);
    let (xs, ws, ds) = (x.data(), w.data(), dy.data());
    let mut dx = vec![0.0; h * wd * c];
    let mut dw = vec![0.0; 9 * c];
    let mut db = vec![0.0; c];
    for y in 0..h {
        for xx in 0..wd {
            let g = &ds[(y * wd + xx) * c..(y * wd + xx + 1) * c];
            for (d, v) in db.iter_mut().zip(g) {
                *d += v;
            }
            for (ky, kx, sy, sx) in taps(y, xx, h, wd) {
                let base = (sy * wd + sx) * c;
                let tap = (ky * 3 + kx) * c;
                for ch in 0..c {
                    dx[base + ch] += ws[tap + ch] * g[ch];
                    dw[tap + ch] += xs[base + ch] * g[ch];
                }
            }
        }
    }
    Ok(ConvGrads {
        dx: Tensor::new(&[h, wd, c], dx)?,
        dw: Tensor::new(&[3, 3, c], dw)?,
        db: Tensor::new(&[c], db)?,
    })
}

/// `H×W×(C·s²)` → `(sH)×(sW)×C`; input channel `c·s² + i·s + j` lands at
/// output pixel `(y·s + i, x·s + j)`, channel `c`.
pub fn pixel_shuffle(x: &Tensor, s: usize) -> Result<Tensor> {
    let (h, w, cs) = hwc(x, "pixel_shuffle")?;
    if s == 0 || cs % (s * s) != 0 {
        return Err(Error::shape("pixel_shuffle", format!("{cs} channels, scale {s}")));
    }
    let c = cs / (s * s);
    let (oh, ow) = (h * s, w * s);
    let mut out = vec![0.0; x.len()];
    for y in 0..h {
        for xx in 0..w {
            let src = &x.data()[(y * w + xx) * cs..(y * w + xx + 1) * cs];
            for ch in 0..c {
                for i in 0..s {
                    for j in 0..s {
                        let (oy, ox) = (y * s + i, xx * s + j);
                        out[(oy * ow + ox) * c + ch] = src[ch * s * s + i * s + j];
                    }
                }
            }
        }
    }
    Tensor::new(&[oh, ow, c], out)
}

/// Inverse of [`pixel_shuffle`]; also its exact adjoint.
pub fn pixel_unshuffle(x: &Tensor, s: usize) -> Result<Tensor> {
    let (oh, ow, c) = hwc(x, "pixel_unshuffle")?;
    if s == 0 || oh % s != 0 || ow % s != 0 {
        return Err(Error::shape("pixel_unshuffle", format!("{oh}x{ow}, scale {s}")));
    }
    let (h, w) = (oh / s, ow / s);
    let cs = c * s * s;
    let mut out = vec![0.0; x.len()];
    for y in 0..h {
        for xx in 0..w {
            let dst = &mut out[(y * w + xx) * cs..(y * w + xx + 1) * cs];
            for ch in 0..c {
                for i in 0..s {
                    for j in 0..s {
                        let (oy, ox) = (y * s + i, xx * s + j);
                        dst[ch * s * s + i * s + j] = x.data()[(oy * ow + ox) * c + ch];
                    }
                }
            }
        }
    }
    Tensor::new(&[h, w, cs], out)
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn naive_depthwise(x: &Tensor, w: &Tensor, b: &Tensor) -> Tensor {
        let (h, wd, c) = (x.dim(0), x.dim(1), x.dim(2));
        let mut out = Tensor::zeros(&[h, wd, c]);
        for y in 0..h as isize {
            for xx in 0..wd as isize {
                for ch in 0..c {
                    let mut acc = b.data()[ch];
                    for ky in 0..3isize {
                        for kx in 0..3isize {
                            let (sy, sx) = (y + ky - 1, xx + kx - 1);
                            if sy < 0 || sx < 0 || sy >= h as isize || sx >= wd as isize {
                                continue;
                            }
                            let v = x.data()[((sy as usize) * wd + sx as usize) * c + ch];
                            acc += v * w.data()[((ky * 3 + kx) as usize) * c + ch];
                        }
                    }
                    out.data_mut()[((y as usize) * wd + xx as usize) * c + ch] = acc;
                }
            }
        }
        out
    }

    #[test]
    fn zero_input_yields_bias() {
        let x = Tensor::zeros(&[4, 3, 2]);
        let w = Tensor::full(&[3, 3, 2], 0.7);
        let b = Tensor::new(&[2], vec![0.5, -1.5]).unwrap();
        let y = depthwise_conv3x3(&x, &w, &b).unwrap();
        for px in y.data().chunks(2) {
            assert_eq!(px, &[0.5, -1.5]);
        }
    }

    #[test]
    fn centre_tap_reproduces_delta() {
        let mut x = Tensor::zeros(&[5, 5, 1]);
        x.data_mut()[12] = 1.0;
        let mut w = Tensor::zeros(&[3, 3, 1]);
        w.data_mut()[4] = 1.0;
        let y = depthwise_conv3x3(&x, &w, &Tensor::zeros(&[1])).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn depthwise_matches_naive_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let x = Tensor::uniform(&[5, 5, 2], -1.0, 1.0, &mut rng);
        let w = Tensor::uniform(&[3, 3, 2], -1.0, 1.0, &mut rng);
        let b = Tensor::uniform(&[2], -1.0, 1.0, &mut rng);
        let got = depthwise_conv3x3(&x, &w, &b).unwrap();
        assert!(got.max_abs_diff(&naive_depthwise(&x, &w, &b)) < 1e-12);
    }

    #[test]
    fn dense_conv_with_diagonal_kernel_equals_depthwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = Tensor::uniform(&[4, 6, 3], -1.0, 1.0, &mut rng);
        let dw = Tensor::uniform(&[3, 3, 3], -1.0, 1.0, &mut rng);
        let b = Tensor::uniform(&[3], -1.0, 1.0, &mut rng);
        let mut full = Tensor::zeros(&[3, 3, 3, 3]);
        for tap in 0..9 {
            for c in 0..3 {
                full.data_mut()[tap * 9 + c * 3 + c] = dw.data()[tap * 3 + c];
            }
        }
        let a = conv3x3(&x, &full, &b).unwrap();
        let d = depthwise_conv3x3(&x, &dw, &b).unwrap();
        assert!(a.max_abs_diff(&d) < 1e-12);
    }

    #[test]
    fn pixel_shuffle_is_a_bijection() {
        let x = Tensor::from_fn(&[3, 2, 12], |i| i as f64);
        let y = pixel_shuffle(&x, 2).unwrap();
        assert_eq!(y.shape(), &[6, 4, 3]);
        assert_eq!(pixel_unshuffle(&y, 2).unwrap(), x);
        let mut sorted = y.data().to_vec();
        sorted.sort_by(f64::total_cmp);
        assert_eq!(sorted, x.data());
    }

    #[test]
    fn pixel_shuffle_layout() {
        // One pixel, one output channel, scale 2: channels map to a 2x2 block.
        let x = Tensor::new(&[1, 1, 4], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let y = pixel_shuffle(&x, 2).unwrap();
        assert_eq!(y.data(), &[1.0, 2.0, 3.0, 4.0]);
    }
}
