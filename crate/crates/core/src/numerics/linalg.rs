use crate::error::{Error, Result};

use super::flops;
use super::par;
use super::tensor::Tensor;

/// `a · b` for row-major `a: m×k`, `b: k×p`.
///
/// Each output element accumulates its `k` products in ascending order, so the
/// result is independent of the thread count.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    a.expect_rank("matmul", 2)?;
    b.expect_rank("matmul", 2)?;
    let (m, k) = (a.dim(0), a.dim(1));
    let (k2, p) = (b.dim(0), b.dim(1));
    if k != k2 {
        return Err(Error::shape("matmul", format!("{m}x{k} · {k2}x{p}")));
    }
    Tensor::new(&[m, p], matmul_raw(a.data(), b.data(), m, k, p))
}

pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, p: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * p];
    flops::record(2 * (m * k * p) as u64);
    par::for_each_row(&mut out, p, |i, row| {
        let a_row = &a[i * k..(i + 1) * k];
        for (kk, &av) in a_row.iter().enumerate() {
            let b_row = &b[kk * p..(kk + 1) * p];
            for (o, &bv) in row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    });
    out
}

/// `aᵀ · b` for `a: m×k`, `b: m×p`; accumulation runs over `m` in order.
pub(crate) fn matmul_at_b_raw(a: &[f64], b: &[f64], m: usize, k: usize, p: usize) -> Vec<f64> {
    let mut out = vec![0.0; k * p];
    flops::record(2 * (m * k * p) as u64);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let b_row = &b[i * p..(i + 1) * p];
        for (kk, &av) in a_row.iter().enumerate() {
            let o = &mut out[kk * p..(kk + 1) * p];
            for (ov, &bv) in o.iter_mut().zip(b_row) {
                *ov += av * bv;
            }
        }
    }
    out
}

/// `a · bᵀ` for `a: m×p`, `b: k×p`.
pub(crate) fn matmul_a_bt_raw(a: &[f64], b: &[f64], m: usize, p: usize, k: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * k];
    flops::record(2 * (m * k * p) as u64);
    par::for_each_row(&mut out, k, |i, row| {
        let a_row = &a[i * p..(i + 1) * p];
        for (j, o) in row.iter_mut().enumerate() {
            let b_row = &b[j * p..(j + 1) * p];
            *o = a_row.iter().zip(b_row).map(|(x, y)| x * y).sum();
        }
    });
    out
}

/// Affine map `x · w + b` over the rows of `x: n×cin`, `w: cin×cout`.
pub fn linear(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    x.expect_rank("linear", 2)?;
    w.expect_rank("linear", 2)?;
    let (n, cin) = (x.dim(0), x.dim(1));
    let cout = w.dim(1);
    if w.dim(0) != cin || b.shape() != [cout] {
        return Err(Error::shape(
            "linear",
            format!("x {:?}, w {:?}, b {:?}", x.shape(), w.shape(), b.shape()),
        ));
    }
    let mut y = matmul_raw(x.data(), w.data(), n, cin, cout);
    for row in y.chunks_mut(cout) {
        for (v, bv) in row.iter_mut().zip(b.data()) {
            *v += bv;
        }
    }
    Tensor::new(&[n, cout], y)
}

pub struct LinearGrads {
    pub dx: Tensor,
    pub dw: Tensor,
    pub db: Tensor,
}

pub fn linear_backward(x: &Tensor, w: &Tensor, dy: &Tensor) -> Result<LinearGrads> {
    let (n, cin) = (x.dim(0), x.dim(1));
    let cout = w.dim(1);
    dy.expect_shape("linear_backward", &[n, cout])?;
    let dx = matmul_a_bt_raw(dy.data(), w.data(), n, cout, cin);
    let dw = matmul_at_b_raw(x.data(), dy.data(), n, cin, cout);
    let mut db = vec![0.0; cout];
    for row in dy.data().chunks(cout) {
        for (d, v) in db.iter_mut().zip(row) {
            *d += v;
        }
    }
    Ok(LinearGrads {
        dx: Tensor::new(&[n, cin], dx)?,
        dw: Tensor::new(&[cin, cout], dw)?,
        db: Tensor::new(&[cout], db)?,
    })
}

/// Copies rows `index[i]` of `x` into row `i` of the result.
pub fn gather_rows(x: &Tensor, index: &[u32]) -> Result<Tensor> {
    x.expect_rank("gather_rows", 2)?;
    let (n, c) = (x.dim(0), x.dim(1));
    let mut out = Vec::with_capacity(index.len() * c);
    for (row, &j) in index.iter().enumerate() {
        let j = j as usize;
        if j >= n {
            return Err(Error::CorruptCandidate { row, index: j, tokens: n });
        }
        out.extend_from_slice(x.row(j));
    }
    Tensor::new(&[index.len(), c], out)
}

/// Adjoint of [`gather_rows`]: row `i` of `y` is added into row `index[i]`
/// of an `n`-row result. Accumulation visits `i` in ascending order.
pub fn scatter_add_rows(y: &Tensor, index: &[u32], n: usize) -> Result<Tensor> {
    y.expect_rank("scatter_add_rows", 2)?;
    let c = y.dim(1);
    if y.dim(0) != index.len() {
        return Err(Error::shape(
            "scatter_add_rows",
            format!("{} rows vs {} indices", y.dim(0), index.len()),
        ));
    }
    let mut out = Tensor::zeros(&[n, c]);
    for (row, &j) in index.iter().enumerate() {
        let j = j as usize;
        if j >= n {
            return Err(Error::CorruptCandidate { row, index: j, tokens: n });
        }
        let src = y.row(row);
        for (o, v) in out.row_mut(j).iter_mut().zip(src) {
            *o += v;
        }
    }
    Ok(out)
}
