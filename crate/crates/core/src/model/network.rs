//! The super-resolution network: shallow conv head, residual body of
//! attention blocks, conv after body with a long skip, and a conv +
//! pixel-shuffle upsampler.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::attention::{
    dense_attention_forward, iea_layer_backward, iea_layer_forward, AttnParams, IeaCache, LayerPlan, PosKind,
};
use crate::candidates::{dlsg_init, CandidateSet, GridGeom};
use crate::error::{Error, Result};
use crate::numerics::activation::{layer_norm, layer_norm_backward, LayerNormCache};
use crate::numerics::conv::{conv3x3, conv3x3_backward, pixel_shuffle, pixel_unshuffle};
use crate::numerics::{flops, Tensor};
use crate::params::{impl_parameters, Parameters};
use crate::sf_ffn::{sf_ffn_branch, sf_ffn_branch_backward, SfFfnCache, SfFfnParams};

use super::config::ModelConfig;

/// Per-channel offset removed from the input and restored at the output.
pub const RGB_MEAN: [f64; 3] = [0.4488, 0.4371, 0.4040];

#[derive(Debug, Clone)]
pub struct LayerParams {
    pub norm1_g: Tensor,
    pub norm1_b: Tensor,
    pub attn: AttnParams,
    pub norm2_g: Tensor,
    pub norm2_b: Tensor,
    pub ffn: SfFfnParams,
}

impl_parameters!(LayerParams { norm1_g, norm1_b, attn, norm2_g, norm2_b, ffn });

#[derive(Debug, Clone)]
pub struct BlockParams {
    pub layers: Vec<LayerParams>,
    pub conv_w: Tensor,
    pub conv_b: Tensor,
}

impl_parameters!(BlockParams { layers, conv_w, conv_b });

#[derive(Debug, Clone)]
pub struct IetParams {
    pub head_w: Tensor,
    pub head_b: Tensor,
    pub blocks: Vec<BlockParams>,
    pub body_w: Tensor,
    pub body_b: Tensor,
    pub tail_w: Tensor,
    pub tail_b: Tensor,
}

impl_parameters!(IetParams { head_w, head_b, blocks, body_w, body_b, tail_w, tail_b });

impl IetParams {
    /// Deterministic initialization from `seed`: truncated normal(0.02) for
    /// projections and conv kernels, ones for norm gains, zeros for biases
    /// and for the residual-branch kernels that make fresh blocks identities.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = cfg.channels;
        let conv = |cin: usize, cout: usize, rng: &mut ChaCha8Rng| Tensor::trunc_normal(&[3, 3, cin, cout], 0.02, rng);
        let head_w = conv(3, c, &mut rng);
        let mut blocks = Vec::with_capacity(cfg.blocks);
        for b in 0..cfg.blocks {
            let pos = if b == 0 { PosKind::Relative { window: cfg.window } } else { PosKind::Lepe };
            let layers = (0..cfg.layers_per_block)
                .map(|_| {
                    Ok(LayerParams {
                        norm1_g: Tensor::full(&[c], 1.0),
                        norm1_b: Tensor::zeros(&[c]),
                        attn: AttnParams::init(c, cfg.heads, pos, &mut rng)?,
                        norm2_g: Tensor::full(&[c], 1.0),
                        norm2_b: Tensor::zeros(&[c]),
                        ffn: SfFfnParams::init(c, cfg.heads, cfg.ffn_ratio, &mut rng)?,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            blocks.push(BlockParams { layers, conv_w: conv(c, c, &mut rng), conv_b: Tensor::zeros(&[c]) });
        }
        let body_w = conv(c, c, &mut rng);
        let tail_w = conv(c, 3 * cfg.scale * cfg.scale, &mut rng);
        Ok(Self {
            head_w,
            head_b: Tensor::zeros(&[c]),
            blocks,
            body_w,
            body_b: Tensor::zeros(&[c]),
            tail_w,
            tail_b: Tensor::zeros(&[3 * cfg.scale * cfg.scale]),
        })
    }
}

/// How a forward pass runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ForwardOptions {
    /// Record per-layer candidate sets.
    pub trace: bool,
    /// Replace every sparse attention layer by dense attention over all
    /// tokens (reference path; no pruning or expansion).
    pub dense: bool,
    /// Clamp the output to `[0, 1]` (evaluation only).
    pub clamp: bool,
}

/// Candidate flow through one layer.
#[derive(Debug, Clone)]
pub struct LayerTrace {
    pub block: usize,
    pub layer: usize,
    pub input: CandidateSet,
    pub kept: CandidateSet,
    pub next: CandidateSet,
    pub expanded: bool,
    /// Instrumented FLOPs of the attention layer.
    pub attn_flops: u64,
}

struct LayerCache {
    norm1: LayerNormCache,
    attn: IeaCache,
    norm2: LayerNormCache,
    ffn: SfFfnCache,
}

struct BlockCache {
    layers: Vec<LayerCache>,
    body_out: Tensor,
}

/// Saved activations of a training forward pass.
pub struct ModelCache {
    geom: GridGeom,
    input: Tensor,
    blocks: Vec<BlockCache>,
    body_in: Tensor,
    tail_in: Tensor,
}

pub struct ForwardOutput {
    /// `sH × sW × 3`
    pub image: Tensor,
    pub trace: Vec<LayerTrace>,
    pub flops: u64,
}

fn to_grid(x: Tensor, geom: GridGeom) -> Result<Tensor> {
    let c = x.dim(1);
    x.reshape(&[geom.height, geom.width, c])
}

fn to_tokens(x: Tensor) -> Result<Tensor> {
    let (h, w, c) = (x.dim(0), x.dim(1), x.dim(2));
    x.reshape(&[h * w, c])
}

fn check_input(cfg: &ModelConfig, lr: &Tensor, dilation: usize) -> Result<GridGeom> {
    lr.expect_rank("forward", 3)?;
    if lr.dim(2) != 3 {
        return Err(Error::shape("forward", format!("expected RGB input, got {:?}", lr.shape())));
    }
    if dilation == 0 {
        return Err(Error::Config("dilation must be ≥ 1".into()));
    }
    let geom = GridGeom::new(lr.dim(0), lr.dim(1))?;
    if cfg.window > geom.height.min(geom.width) {
        return Err(Error::Config(format!(
            "{}x{} input is smaller than the {} token window",
            geom.height, geom.width, cfg.window
        )));
    }
    Ok(geom)
}

fn run(
    cfg: &ModelConfig,
    params: &IetParams,
    lr: &Tensor,
    dilation: usize,
    opts: ForwardOptions,
    keep_cache: bool,
) -> Result<(ForwardOutput, Option<ModelCache>)> {
    let geom = check_input(cfg, lr, dilation)?;
    let (res, total) = flops::measure(|| -> Result<_> {
        let mut centred = lr.clone();
        for px in centred.data_mut().chunks_mut(3) {
            px.iter_mut().zip(RGB_MEAN).for_each(|(v, m)| *v -= m);
        }
        let shallow = to_tokens(conv3x3(&centred, &params.head_w, &params.head_b)?)?;
        let initial = dlsg_init(geom, cfg.window, dilation)?;
        let mut cands = initial.clone();
        let mut x = shallow.clone();
        let mut trace = Vec::new();
        let mut block_caches = Vec::new();
        for (b, block) in params.blocks.iter().enumerate() {
            if b > 0 && cfg.reset_candidates_per_block {
                cands = initial.clone();
            }
            let block_in = x.clone();
            let mut layer_caches = Vec::new();
            for (l, layer) in block.layers.iter().enumerate() {
                let plan = if opts.dense { LayerPlan::passthrough() } else { cfg.plan(b, l) };
                let (y, next, lc, t) = layer_forward(cfg, layer, &x, &cands, &plan, geom, opts.dense)?;
                if opts.trace {
                    trace.push(LayerTrace { block: b, layer: l, input: cands.clone(), ..t });
                }
                if keep_cache {
                    layer_caches.push(lc.ok_or_else(|| Error::Usage("dense path keeps no cache".into()))?);
                }
                x = y;
                cands = next;
            }
            let conv_in = to_grid(x.clone(), geom)?;
            let mut out = to_tokens(conv3x3(&conv_in, &block.conv_w, &block.conv_b)?)?;
            out.add_assign(&block_in)?;
            if keep_cache {
                block_caches.push(BlockCache { layers: layer_caches, body_out: x.clone() });
            }
            x = out;
        }
        let body_in = to_grid(x, geom)?;
        let mut tail_in = conv3x3(&body_in, &params.body_w, &params.body_b)?;
        tail_in.add_assign(&to_grid(shallow, geom)?)?;
        let tail = conv3x3(&tail_in, &params.tail_w, &params.tail_b)?;
        let mut image = pixel_shuffle(&tail, cfg.scale)?;
        for px in image.data_mut().chunks_mut(3) {
            px.iter_mut().zip(RGB_MEAN).for_each(|(v, m)| *v += m);
        }
        image.ensure_finite("model output")?;
        if opts.clamp {
            image.data_mut().iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
        }
        let cache = keep_cache.then(|| ModelCache { geom, input: centred, blocks: block_caches, body_in, tail_in });
        Ok((image, trace, cache))
    });
    let (image, trace, cache) = res?;
    Ok((ForwardOutput { image, trace, flops: total }, cache))
}

type LayerStep = (Tensor, CandidateSet, Option<LayerCache>, LayerTrace);

fn layer_forward(
    cfg: &ModelConfig,
    p: &LayerParams,
    x: &Tensor,
    cands: &CandidateSet,
    plan: &LayerPlan,
    geom: GridGeom,
    dense: bool,
) -> Result<LayerStep> {
    let (u, norm1) = layer_norm(x, &p.norm1_g, &p.norm1_b)?;
    if dense {
        let (res, attn_flops) = flops::measure(|| dense_attention_forward(&u, &p.attn, cfg.heads, geom));
        let (att, highest) = res?;
        let mut h = x.clone();
        h.add_assign(&att)?;
        let (v, _) = layer_norm(&h, &p.norm2_g, &p.norm2_b)?;
        let (branch, _) = sf_ffn_branch(&v, &highest, &p.ffn, geom)?;
        h.add_assign(&branch)?;
        let full = CandidateSet::full(geom.tokens());
        let t = LayerTrace {
            block: 0,
            layer: 0,
            input: full.clone(),
            kept: full.clone(),
            next: full.clone(),
            expanded: false,
            attn_flops,
        };
        return Ok((h, full, None, t));
    }
    let (res, attn_flops) = flops::measure(|| iea_layer_forward(&u, &p.attn, cfg.heads, cands, plan, geom));
    let (fwd, attn_cache) = res?;
    let mut h = x.clone();
    h.add_assign(&fwd.attn.out)?;
    let (v, norm2) = layer_norm(&h, &p.norm2_g, &p.norm2_b)?;
    let (branch, ffn_cache) = sf_ffn_branch(&v, &fwd.highest, &p.ffn, geom)?;
    h.add_assign(&branch)?;
    let t = LayerTrace {
        block: 0,
        layer: 0,
        input: cands.clone(),
        kept: fwd.kept,
        next: fwd.next.clone(),
        expanded: plan.expand.is_some(),
        attn_flops,
    };
    Ok((h, fwd.next, Some(LayerCache { norm1, attn: attn_cache, norm2, ffn: ffn_cache }), t))
}

/// Runs the network on an `H × W × 3` image using DLSG candidates at
/// `dilation`. Candidate sets are rebuilt from scratch on every call.
pub fn forward(cfg: &ModelConfig, params: &IetParams, lr: &Tensor, dilation: usize, opts: ForwardOptions) -> Result<ForwardOutput> {
    Ok(run(cfg, params, lr, dilation, opts, false)?.0)
}

/// Forward pass that keeps the activations needed by [`backward`].
pub fn forward_train(cfg: &ModelConfig, params: &IetParams, lr: &Tensor, dilation: usize) -> Result<(ForwardOutput, ModelCache)> {
    let (out, cache) = run(cfg, params, lr, dilation, ForwardOptions::default(), true)?;
    Ok((out, cache.expect("cache requested")))
}

/// Gradient of a scalar objective with respect to all parameters, given its
/// gradient `dout` with respect to the output image.
pub fn backward(cfg: &ModelConfig, params: &IetParams, cache: &ModelCache, dout: &Tensor) -> Result<IetParams> {
    let geom = cache.geom;
    let mut grads = params.zeroed();
    let dtail = pixel_unshuffle(dout, cfg.scale)?;
    let g = conv3x3_backward(&cache.tail_in, &params.tail_w, &dtail)?;
    grads.tail_w = g.dw;
    grads.tail_b = g.db;
    let dtail_in = g.dx;
    let g = conv3x3_backward(&cache.body_in, &params.body_w, &dtail_in)?;
    grads.body_w = g.dw;
    grads.body_b = g.db;
    let mut dshallow = to_tokens(dtail_in)?;
    let mut dx = to_tokens(g.dx)?;

    for (b, block) in params.blocks.iter().enumerate().rev() {
        let bc = &cache.blocks[b];
        let conv_in = to_grid(bc.body_out.clone(), geom)?;
        let g = conv3x3_backward(&conv_in, &block.conv_w, &to_grid(dx.clone(), geom)?)?;
        grads.blocks[b].conv_w = g.dw;
        grads.blocks[b].conv_b = g.db;
        let skip = dx;
        dx = to_tokens(g.dx)?;
        for (l, layer) in block.layers.iter().enumerate().rev() {
            let lc = &bc.layers[l];
            let lg = &mut grads.blocks[b].layers[l];
            let (dv, gffn) = sf_ffn_branch_backward(&dx, &lc.ffn, &layer.ffn)?;
            lg.ffn = gffn;
            let n2 = layer_norm_backward(&lc.norm2, &layer.norm2_g, &dv)?;
            lg.norm2_g = n2.dgamma;
            lg.norm2_b = n2.dbeta;
            dx.add_assign(&n2.dx)?;
            let (du, gattn) = iea_layer_backward(&dx, &lc.attn, &layer.attn)?;
            lg.attn = gattn;
            let n1 = layer_norm_backward(&lc.norm1, &layer.norm1_g, &du)?;
            lg.norm1_g = n1.dgamma;
            lg.norm1_b = n1.dbeta;
            dx.add_assign(&n1.dx)?;
        }
        dx.add_assign(&skip)?;
    }
    dshallow.add_assign(&dx)?;
    let g = conv3x3_backward(&cache.input, &params.head_w, &to_grid(dshallow, geom)?)?;
    grads.head_w = g.dw;
    grads.head_b = g.db;
    Ok(grads)
}

/// Mean absolute error and its (sub)gradient; `sign(0)` is taken as 0.
pub fn l1_loss(pred: &Tensor, target: &Tensor) -> Result<(f64, Tensor)> {
    if pred.shape() != target.shape() {
        return Err(Error::shape("l1_loss", format!("{:?} vs {:?}", pred.shape(), target.shape())));
    }
    let n = pred.len() as f64;
    let mut total = 0.0;
    let grad = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(p, t)| {
            let r = p - t;
            total += r.abs();
            if r > 0.0 {
                1.0 / n
            } else if r < 0.0 {
                -1.0 / n
            } else {
                0.0
            }
        })
        .collect();
    Ok((total / n, Tensor::new(pred.shape(), grad)?))
}

/// ℓ1 loss of the network on one `(lr, hr)` pair and the parameter gradients.
pub fn loss_and_grads(cfg: &ModelConfig, params: &IetParams, lr: &Tensor, hr: &Tensor, dilation: usize) -> Result<(f64, IetParams)> {
    let want = [lr.dim(0) * cfg.scale, lr.dim(1) * cfg.scale, 3];
    if hr.shape() != want {
        return Err(Error::shape("loss_and_grads", format!("target {:?}, expected {want:?}", hr.shape())));
    }
    let (out, cache) = forward_train(cfg, params, lr, dilation)?;
    let (loss, dout) = l1_loss(&out.image, hr)?;
    if !loss.is_finite() {
        return Err(Error::NonFinite("training loss".into()));
    }
    Ok((loss, backward(cfg, params, &cache, &dout)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_image_through_fresh_model_is_the_mean_image() {
        let cfg = ModelConfig::toy();
        let params = IetParams::init(&cfg, 3).unwrap();
        let mut lr = Tensor::zeros(&[6, 6, 3]);
        for px in lr.data_mut().chunks_mut(3) {
            px.copy_from_slice(&RGB_MEAN);
        }
        let out = forward(&cfg, &params, &lr, 2, ForwardOptions::default()).unwrap();
        assert_eq!(out.image.shape(), &[12, 12, 3]);
        for px in out.image.data().chunks(3) {
            assert_eq!(px, RGB_MEAN);
        }
    }

    #[test]
    fn l1_of_constant_offset() {
        let a = Tensor::full(&[2, 2, 3], 0.5);
        let b = Tensor::full(&[2, 2, 3], 0.25);
        let (loss, g) = l1_loss(&a, &b).unwrap();
        assert!((loss - 0.25).abs() < 1e-15);
        assert!(g.data().iter().all(|&v| (v - 1.0 / 12.0).abs() < 1e-15));
        let (loss, g) = l1_loss(&a, &a).unwrap();
        assert_eq!(loss, 0.0);
        assert!(g.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn window_larger_than_input_is_rejected() {
        let cfg = ModelConfig::toy();
        let params = IetParams::init(&cfg, 0).unwrap();
        let lr = Tensor::zeros(&[2, 8, 3]);
        assert!(matches!(forward(&cfg, &params, &lr, 2, ForwardOptions::default()), Err(Error::Config(_))));
    }
}
