//! Similarity-fused feed-forward network.
//!
//! Every token is paired with its most similar neighbour (as picked by the
//! preceding attention layer). Per head, the pair is concatenated and mapped
//! through a small MLP; a depthwise 3×3 convolution over the token grid mixes
//! the result spatially and the outcome is added back to the input:
//!
//! ```text
//! x_sim[i] = x[highest[i]]
//! z_h      = W_out,h · gelu(W_in,h · [x_h ; x_sim,h] + b_in,h) + b_out,h
//! y        = x + dwconv3x3(z)
//! ```

use rand::Rng;

use crate::candidates::GridGeom;
use crate::error::{Error, Result};
use crate::numerics::activation::{gelu_grad_scalar, gelu_scalar};
use crate::numerics::conv::{depthwise_conv3x3, depthwise_conv3x3_backward};
use crate::numerics::linalg::{matmul_a_bt_raw, matmul_at_b_raw, matmul_raw};
use crate::numerics::{gather_rows, scatter_add_rows, Tensor};
use crate::params::impl_parameters;

#[derive(Debug, Clone)]
pub struct SfFfnParams {
    /// `heads × 2·dh × r·dh`
    pub w_in: Tensor,
    /// `heads × r·dh`
    pub b_in: Tensor,
    /// `heads × r·dh × dh`
    pub w_out: Tensor,
    /// `heads × dh`
    pub b_out: Tensor,
    /// `3 × 3 × C`
    pub dw_w: Tensor,
    pub dw_b: Tensor,
}

impl_parameters!(SfFfnParams { w_in, b_in, w_out, b_out, dw_w, dw_b });

impl SfFfnParams {
    /// MLP weights ~ truncated normal(0.02); the depthwise kernel and all
    /// biases start at zero, so a fresh block is the identity map.
    pub fn init<R: Rng + ?Sized>(channels: usize, heads: usize, ratio: usize, rng: &mut R) -> Result<Self> {
        if heads == 0 || channels % heads != 0 || ratio == 0 {
            return Err(Error::Config(format!(
                "sf-ffn needs channels divisible by heads and ratio ≥ 1 (C={channels}, h={heads}, r={ratio})"
            )));
        }
        let dh = channels / heads;
        Ok(Self {
            w_in: Tensor::trunc_normal(&[heads, 2 * dh, ratio * dh], 0.02, rng),
            b_in: Tensor::zeros(&[heads, ratio * dh]),
            w_out: Tensor::trunc_normal(&[heads, ratio * dh, dh], 0.02, rng),
            b_out: Tensor::zeros(&[heads, dh]),
            dw_w: Tensor::zeros(&[3, 3, channels]),
            dw_b: Tensor::zeros(&[channels]),
        })
    }

    pub fn heads(&self) -> usize {
        self.w_in.dim(0)
    }

    pub fn head_dim(&self) -> usize {
        self.w_out.dim(2)
    }

    pub fn hidden(&self) -> usize {
        self.w_in.dim(2)
    }
}

#[derive(Debug, Clone)]
pub struct SfFfnCache {
    geom: GridGeom,
    highest: Vec<u32>,
    /// per head: `N × 2dh` concatenated inputs
    cat: Vec<Vec<f64>>,
    /// per head: `N × r·dh` pre-activation
    pre: Vec<Vec<f64>>,
    z: Tensor,
}

/// Residual-free part `dwconv3x3(z)` of the block.
pub fn sf_ffn_branch(x: &Tensor, highest: &[u32], params: &SfFfnParams, geom: GridGeom) -> Result<(Tensor, SfFfnCache)> {
    x.expect_rank("sf_ffn", 2)?;
    let (n, c) = (x.dim(0), x.dim(1));
    let (heads, dh, hid) = (params.heads(), params.head_dim(), params.hidden());
    if heads * dh != c || n != geom.tokens() || highest.len() != n {
        return Err(Error::shape(
            "sf_ffn",
            format!("x {:?}, {heads} heads of {dh}, {} neighbour indices", x.shape(), highest.len()),
        ));
    }
    let xs = gather_rows(x, highest)?;
    let mut z = Tensor::zeros(&[n, c]);
    let mut cats = Vec::with_capacity(heads);
    let mut pres = Vec::with_capacity(heads);
    for h in 0..heads {
        let mut cat = vec![0.0; n * 2 * dh];
        for i in 0..n {
            let dst = &mut cat[i * 2 * dh..(i + 1) * 2 * dh];
            dst[..dh].copy_from_slice(&x.row(i)[h * dh..(h + 1) * dh]);
            dst[dh..].copy_from_slice(&xs.row(i)[h * dh..(h + 1) * dh]);
        }
        let w_in = &params.w_in.data()[h * 2 * dh * hid..(h + 1) * 2 * dh * hid];
        let b_in = &params.b_in.data()[h * hid..(h + 1) * hid];
        let mut pre = matmul_raw(&cat, w_in, n, 2 * dh, hid);
        for row in pre.chunks_mut(hid) {
            row.iter_mut().zip(b_in).for_each(|(v, b)| *v += b);
        }
        let act: Vec<f64> = pre.iter().map(|&v| gelu_scalar(v)).collect();
        let w_out = &params.w_out.data()[h * hid * dh..(h + 1) * hid * dh];
        let b_out = &params.b_out.data()[h * dh..(h + 1) * dh];
        let out = matmul_raw(&act, w_out, n, hid, dh);
        for i in 0..n {
            let dst = &mut z.row_mut(i)[h * dh..(h + 1) * dh];
            for ((o, v), b) in dst.iter_mut().zip(&out[i * dh..(i + 1) * dh]).zip(b_out) {
                *o = v + b;
            }
        }
        cats.push(cat);
        pres.push(pre);
    }
    let grid = [geom.height, geom.width, c];
    let branch = depthwise_conv3x3(&z.clone().reshape(&grid)?, &params.dw_w, &params.dw_b)?.reshape(&[n, c])?;
    Ok((branch, SfFfnCache { geom, highest: highest.to_vec(), cat: cats, pre: pres, z }))
}

/// `y = x + dwconv3x3(z)`.
pub fn sf_ffn_forward(x: &Tensor, highest: &[u32], params: &SfFfnParams, geom: GridGeom) -> Result<(Tensor, SfFfnCache)> {
    let (mut branch, cache) = sf_ffn_branch(x, highest, params, geom)?;
    branch.add_assign(x)?;
    Ok((branch, cache))
}

/// Gradient of [`sf_ffn_branch`]. The neighbour gather is constant; its
/// adjoint scatters each token's `x_sim` gradient onto the neighbour it
/// copied from.
pub fn sf_ffn_branch_backward(dy: &Tensor, cache: &SfFfnCache, params: &SfFfnParams) -> Result<(Tensor, SfFfnParams)> {
    let (mut dx, dsim, grads) = branch_backward_split(dy, cache, params)?;
    dx.add_assign(&dsim)?;
    Ok((dx, grads))
}

/// Returns the input gradient split into the direct path and the scattered
/// `x_sim` path.
fn branch_backward_split(dy: &Tensor, cache: &SfFfnCache, params: &SfFfnParams) -> Result<(Tensor, Tensor, SfFfnParams)> {
    let (n, c) = (cache.z.dim(0), cache.z.dim(1));
    dy.expect_shape("sf_ffn_backward", &[n, c])?;
    let (heads, dh, hid) = (params.heads(), params.head_dim(), params.hidden());
    let grid = [cache.geom.height, cache.geom.width, c];
    let conv = depthwise_conv3x3_backward(&cache.z.clone().reshape(&grid)?, &params.dw_w, &dy.clone().reshape(&grid)?)?;
    let dz = conv.dx.reshape(&[n, c])?;

    let mut grads = SfFfnParams {
        w_in: Tensor::zeros(params.w_in.shape()),
        b_in: Tensor::zeros(params.b_in.shape()),
        w_out: Tensor::zeros(params.w_out.shape()),
        b_out: Tensor::zeros(params.b_out.shape()),
        dw_w: conv.dw,
        dw_b: conv.db,
    };
    let mut dx = Tensor::zeros(&[n, c]);
    let mut dxs = Tensor::zeros(&[n, c]);
    for h in 0..heads {
        let dzh: Vec<f64> = (0..n).flat_map(|i| dz.row(i)[h * dh..(h + 1) * dh].to_vec()).collect();
        let pre = &cache.pre[h];
        let act: Vec<f64> = pre.iter().map(|&v| gelu_scalar(v)).collect();
        let w_out = &params.w_out.data()[h * hid * dh..(h + 1) * hid * dh];
        let dw_out = matmul_at_b_raw(&act, &dzh, n, hid, dh);
        grads.w_out.data_mut()[h * hid * dh..(h + 1) * hid * dh].copy_from_slice(&dw_out);
        let db_out = &mut grads.b_out.data_mut()[h * dh..(h + 1) * dh];
        for row in dzh.chunks(dh) {
            db_out.iter_mut().zip(row).for_each(|(a, b)| *a += b);
        }
        let mut dpre = matmul_a_bt_raw(&dzh, w_out, n, dh, hid);
        dpre.iter_mut().zip(pre).for_each(|(g, &p)| *g *= gelu_grad_scalar(p));

        let w_in = &params.w_in.data()[h * 2 * dh * hid..(h + 1) * 2 * dh * hid];
        let dw_in = matmul_at_b_raw(&cache.cat[h], &dpre, n, 2 * dh, hid);
        grads.w_in.data_mut()[h * 2 * dh * hid..(h + 1) * 2 * dh * hid].copy_from_slice(&dw_in);
        let db_in = &mut grads.b_in.data_mut()[h * hid..(h + 1) * hid];
        for row in dpre.chunks(hid) {
            db_in.iter_mut().zip(row).for_each(|(a, b)| *a += b);
        }
        let dcat = matmul_a_bt_raw(&dpre, w_in, n, hid, 2 * dh);
        for i in 0..n {
            let src = &dcat[i * 2 * dh..(i + 1) * 2 * dh];
            dx.row_mut(i)[h * dh..(h + 1) * dh].copy_from_slice(&src[..dh]);
            dxs.row_mut(i)[h * dh..(h + 1) * dh].copy_from_slice(&src[dh..]);
        }
    }
    let dsim = scatter_add_rows(&dxs, &cache.highest, n)?;
    Ok((dx, dsim, grads))
}

/// Gradient of [`sf_ffn_forward`] (branch plus identity).
pub fn sf_ffn_backward(dy: &Tensor, cache: &SfFfnCache, params: &SfFfnParams) -> Result<(Tensor, SfFfnParams)> {
    let (mut dx, grads) = sf_ffn_branch_backward(dy, cache, params)?;
    dx.add_assign(dy)?;
    Ok((dx, grads))
}

/// FLOPs of one SF-FFN pass over `n` tokens.
pub fn sf_ffn_flops(n: usize, channels: usize, heads: usize, ratio: usize) -> u64 {
    let dh = channels / heads;
    let mlp = heads * (2 * dh * ratio * dh + ratio * dh * dh);
    (2 * n * (mlp + 9 * channels)) as u64
}

/// FLOPs of a token-wise `C → r·C → C` feed-forward network over `n` tokens.
pub fn plain_ffn_flops(n: usize, channels: usize, ratio: usize) -> u64 {
    (2 * n * 2 * ratio * channels * channels) as u64
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::numerics::{finite_diff_grad, relative_error};
    use crate::params::Parameters;

    fn randomized(params: &SfFfnParams, rng: &mut ChaCha8Rng) -> SfFfnParams {
        let mut p = params.clone();
        p.visit_mut("", &mut |_, t| *t = Tensor::uniform(t.shape(), -0.5, 0.5, rng));
        p
    }

    #[test]
    fn fresh_block_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let geom = GridGeom::new(4, 4).unwrap();
        let p = SfFfnParams::init(8, 2, 2, &mut rng).unwrap();
        let x = Tensor::uniform(&[16, 8], -1.0, 1.0, &mut rng);
        let highest: Vec<u32> = (0..16).rev().collect();
        let (y, _) = sf_ffn_forward(&x, &highest, &p, geom).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn constant_input_gives_constant_interior() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let geom = GridGeom::new(5, 5).unwrap();
        let p = randomized(&SfFfnParams::init(4, 2, 2, &mut rng).unwrap(), &mut rng);
        let x = Tensor::from_fn(&[25, 4], |i| [0.3, -0.2, 0.9, 0.1][i % 4]);
        let highest: Vec<u32> = (0..25).map(|i| (i * 7 % 25) as u32).collect();
        let (y, _) = sf_ffn_forward(&x, &highest, &p, geom).unwrap();
        let centre = y.row(12).to_vec();
        for r in 1..4 {
            for c in 1..4 {
                let row = y.row(r * 5 + c);
                for (a, b) in row.iter().zip(&centre) {
                    assert!((a - b).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn unselected_token_gets_no_similarity_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let geom = GridGeom::new(3, 3).unwrap();
        let p = randomized(&SfFfnParams::init(4, 2, 2, &mut rng).unwrap(), &mut rng);
        let x = Tensor::uniform(&[9, 4], -1.0, 1.0, &mut rng);
        // nobody points at token 4
        let highest: Vec<u32> = vec![1, 0, 1, 0, 0, 3, 3, 8, 7];
        let dy = Tensor::uniform(&[9, 4], -1.0, 1.0, &mut rng);
        let (_, cache) = sf_ffn_branch(&x, &highest, &p, geom).unwrap();
        let (_, dsim, _) = branch_backward_split(&dy, &cache, &p).unwrap();
        assert!(dsim.row(4).iter().all(|&v| v == 0.0));
        assert!(dsim.row(0).iter().any(|&v| v != 0.0));
    }

    #[test]
    fn identity_neighbours_match_self_pair_network() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let geom = GridGeom::new(3, 4).unwrap();
        let p = randomized(&SfFfnParams::init(4, 2, 2, &mut rng).unwrap(), &mut rng);
        let x = Tensor::uniform(&[12, 4], -1.0, 1.0, &mut rng);
        let ident: Vec<u32> = (0..12).collect();
        let dy = Tensor::uniform(&[12, 4], -1.0, 1.0, &mut rng);
        let (_, cache) = sf_ffn_forward(&x, &ident, &p, geom).unwrap();
        let (dx, _) = sf_ffn_backward(&dy, &cache, &p).unwrap();
        // with x_sim = x the block is a function of x alone; differentiate that
        let fd = finite_diff_grad(|t| Ok(sf_ffn_forward(t, &ident, &p, geom)?.0.dot(&dy)), &x, 1e-6).unwrap();
        assert!(relative_error(&dx, &fd, 1e-12) < 1e-7);
    }

    #[test]
    fn overhead_against_plain_ffn() {
        for (c, h) in [(16, 2), (54, 3), (240, 6)] {
            let ratio = sf_ffn_flops(100, c, h, 2) as f64 / plain_ffn_flops(100, c, 2) as f64;
            assert!(ratio < 1.2, "C={c} h={h}: {ratio}");
        }
    }
}
