//! Individualized exploratory attention.
//!
//! Each token attends only to the tokens listed in its row of a
//! [`CandidateSet`]. Similarities are computed by a row-gather sparse product
//! ([`smm_qk`]), normalized with a masked softmax, pruned to the strongest
//! entries, and used to aggregate values by a second row-gather product
//! ([`smm_av`]). The pruned scores then drive two-hop expansion of the
//! candidate set handed to the next layer.
//!
//! All heads share one candidate set; the selection scores used for pruning,
//! expansion and most-similar-neighbour lookup are the head average of the
//! attention rows.

use rand::Rng;

use crate::candidates::{expand, highest_neighbor, sparsify, CandidateSet, GridGeom, SparsifyBudget};
use crate::error::{Error, Result};
use crate::numerics::activation::{softmax_rows, softmax_rows_backward, MASKED_LOGIT};
use crate::numerics::conv::{depthwise_conv3x3, depthwise_conv3x3_backward};
use crate::numerics::linalg::{linear, linear_backward};
use crate::numerics::{flops, par, Tensor};
use crate::params::{join, Parameters};

/// Positional term of an attention layer.
#[derive(Debug, Clone)]
pub enum PosEncoding {
    /// Learnable per-head bias indexed by the clamped offset between query and
    /// candidate; `(2w−1)²` local slots plus one shared slot for anything
    /// farther than `w − 1` in either axis. Shape `heads × ((2w−1)² + 1)`.
    Relative { window: usize, table: Tensor },
    /// Depthwise 3×3 convolution of the values on the token grid, added to the
    /// aggregated output before the output projection.
    Lepe { weight: Tensor, bias: Tensor },
}

impl PosEncoding {
    pub fn relative_slots(window: usize) -> usize {
        let span = 2 * window - 1;
        span * span + 1
    }
}

#[derive(Debug, Clone)]
pub struct AttnParams {
    pub wq: Tensor,
    pub bq: Tensor,
    pub wk: Tensor,
    pub bk: Tensor,
    pub wv: Tensor,
    pub bv: Tensor,
    pub wo: Tensor,
    pub bo: Tensor,
    pub pos: PosEncoding,
}

impl Parameters for AttnParams {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        for (name, t) in [
            ("wq", &self.wq),
            ("bq", &self.bq),
            ("wk", &self.wk),
            ("bk", &self.bk),
            ("wv", &self.wv),
            ("bv", &self.bv),
            ("wo", &self.wo),
            ("bo", &self.bo),
        ] {
            f(join(prefix, name), t);
        }
        match &self.pos {
            PosEncoding::Relative { table, .. } => f(join(prefix, "rel_bias"), table),
            PosEncoding::Lepe { weight, bias } => {
                f(join(prefix, "lepe_w"), weight);
                f(join(prefix, "lepe_b"), bias);
            }
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        for (name, t) in [
            ("wq", &mut self.wq),
            ("bq", &mut self.bq),
            ("wk", &mut self.wk),
            ("bk", &mut self.bk),
            ("wv", &mut self.wv),
            ("bv", &mut self.bv),
            ("wo", &mut self.wo),
            ("bo", &mut self.bo),
        ] {
            f(join(prefix, name), t);
        }
        match &mut self.pos {
            PosEncoding::Relative { table, .. } => f(join(prefix, "rel_bias"), table),
            PosEncoding::Lepe { weight, bias } => {
                f(join(prefix, "lepe_w"), weight);
                f(join(prefix, "lepe_b"), bias);
            }
        }
    }
}

/// Which positional term a freshly initialized layer gets.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PosKind {
    Relative { window: usize },
    Lepe,
}

impl AttnParams {
    /// Projections ~ truncated normal(0.02); biases and positional weights zero.
    pub fn init<R: Rng + ?Sized>(channels: usize, heads: usize, pos: PosKind, rng: &mut R) -> Result<Self> {
        if heads == 0 || channels % heads != 0 {
            return Err(Error::Config(format!("{channels} channels not divisible into {heads} heads")));
        }
        let c = channels;
        let mut proj = || Tensor::trunc_normal(&[c, c], 0.02, rng);
        let (wq, wk, wv, wo) = (proj(), proj(), proj(), proj());
        let pos = match pos {
            PosKind::Relative { window } => PosEncoding::Relative {
                window,
                table: Tensor::zeros(&[heads, PosEncoding::relative_slots(window)]),
            },
            PosKind::Lepe => PosEncoding::Lepe { weight: Tensor::zeros(&[3, 3, c]), bias: Tensor::zeros(&[c]) },
        };
        Ok(Self {
            wq,
            bq: Tensor::zeros(&[c]),
            wk,
            bk: Tensor::zeros(&[c]),
            wv,
            bv: Tensor::zeros(&[c]),
            wo,
            bo: Tensor::zeros(&[c]),
            pos,
        })
    }

    pub fn channels(&self) -> usize {
        self.wq.dim(0)
    }
}

/// What a layer does with its candidates after attending.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LayerPlan {
    pub budget: SparsifyBudget,
    pub expand: Option<ExpandStep>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ExpandStep {
    pub k1: usize,
    pub k2: usize,
    pub k_out_max: usize,
}

impl LayerPlan {
    /// No pruning, no expansion.
    pub fn passthrough() -> Self {
        Self { budget: SparsifyBudget::keep_all(), expand: None }
    }
}

/// `N × C` → `heads × N × (C/heads)`.
pub fn split_heads(x: &Tensor, heads: usize) -> Result<Tensor> {
    x.expect_rank("split_heads", 2)?;
    let (n, c) = (x.dim(0), x.dim(1));
    if heads == 0 || c % heads != 0 {
        return Err(Error::shape("split_heads", format!("{c} channels, {heads} heads")));
    }
    let d = c / heads;
    let mut out = vec![0.0; n * c];
    for i in 0..n {
        let row = x.row(i);
        for h in 0..heads {
            out[(h * n + i) * d..(h * n + i + 1) * d].copy_from_slice(&row[h * d..(h + 1) * d]);
        }
    }
    Tensor::new(&[heads, n, d], out)
}

/// Inverse of [`split_heads`].
pub fn merge_heads(x: &Tensor) -> Result<Tensor> {
    x.expect_rank("merge_heads", 3)?;
    let (heads, n, d) = (x.dim(0), x.dim(1), x.dim(2));
    let c = heads * d;
    let mut out = vec![0.0; n * c];
    for h in 0..heads {
        for i in 0..n {
            out[i * c + h * d..i * c + (h + 1) * d].copy_from_slice(&x.data()[(h * n + i) * d..(h * n + i + 1) * d]);
        }
    }
    Tensor::new(&[n, c], out)
}

fn check_candidates(op: &'static str, cands: &CandidateSet, n: usize) -> Result<()> {
    if cands.tokens() == n {
        return Ok(());
    }
    for i in 0..cands.tokens().min(n) {
        if let Some(&j) = cands.row(i).iter().find(|&&j| j as usize >= n) {
            return Err(Error::CorruptCandidate { row: i, index: j as usize, tokens: n });
        }
    }
    Err(Error::shape(op, format!("candidate set for {} tokens, tensors hold {n}", cands.tokens())))
}

fn heads_shape(op: &'static str, t: &Tensor) -> Result<(usize, usize, usize)> {
    t.expect_rank(op, 3)?;
    Ok((t.dim(0), t.dim(1), t.dim(2)))
}

/// Scaled similarities against gathered keys:
/// `out[h, i, j] = ⟨q[h, i], k[h, I[i, j]]⟩ / √d` for valid slots and
/// [`MASKED_LOGIT`] for padding.
pub fn smm_qk(q: &Tensor, k: &Tensor, cands: &CandidateSet) -> Result<Tensor> {
    let (heads, n, d) = heads_shape("smm_qk", q)?;
    k.expect_shape("smm_qk", &[heads, n, d])?;
    check_candidates("smm_qk", cands, n)?;
    let width = cands.width();
    let scale = 1.0 / (d as f64).sqrt();
    flops::record(2 * (heads * cands.total() * d) as u64);
    let (qs, ks) = (q.data(), k.data());
    let mut out = vec![0.0; heads * n * width];
    par::for_each_row(&mut out, width, |r, row| {
        let (h, i) = (r / n, r % n);
        let qrow = &qs[(h * n + i) * d..(h * n + i + 1) * d];
        let idx = cands.row(i);
        for (o, &t) in row.iter_mut().zip(idx) {
            let base = (h * n + t as usize) * d;
            let krow = &ks[base..base + d];
            *o = qrow.iter().zip(krow).map(|(a, b)| a * b).sum::<f64>() * scale;
        }
        row[idx.len()..].fill(MASKED_LOGIT);
    });
    Tensor::new(&[heads, n, width], out)
}

/// Weighted sum of gathered values: `out[h, i] = Σ_j a[h, i, j] · v[h, I[i, j]]`.
pub fn smm_av(a: &Tensor, v: &Tensor, cands: &CandidateSet) -> Result<Tensor> {
    let (heads, n, d) = heads_shape("smm_av", v)?;
    a.expect_shape("smm_av", &[heads, n, cands.width()])?;
    check_candidates("smm_av", cands, n)?;
    let width = cands.width();
    flops::record(2 * (heads * cands.total() * d) as u64);
    let (as_, vs) = (a.data(), v.data());
    let mut out = vec![0.0; heads * n * d];
    par::for_each_row(&mut out, d, |r, row| {
        let (h, i) = (r / n, r % n);
        let weights = &as_[(h * n + i) * width..(h * n + i + 1) * width];
        for (&w, &t) in weights.iter().zip(cands.row(i)) {
            let base = (h * n + t as usize) * d;
            for (o, &vv) in row.iter_mut().zip(&vs[base..base + d]) {
                *o += w * vv;
            }
        }
    });
    Tensor::new(&[heads, n, d], out)
}

/// Gradients of [`smm_qk`] with respect to `q` and `k`.
pub fn smm_qk_backward(dlogits: &Tensor, q: &Tensor, k: &Tensor, cands: &CandidateSet) -> Result<(Tensor, Tensor)> {
    let (heads, n, d) = heads_shape("smm_qk_backward", q)?;
    dlogits.expect_shape("smm_qk_backward", &[heads, n, cands.width()])?;
    let width = cands.width();
    let scale = 1.0 / (d as f64).sqrt();
    flops::record(4 * (heads * cands.total() * d) as u64);
    let (qs, ks, gs) = (q.data(), k.data(), dlogits.data());
    let mut dq = vec![0.0; heads * n * d];
    par::for_each_row(&mut dq, d, |r, row| {
        let (h, i) = (r / n, r % n);
        let g = &gs[(h * n + i) * width..(h * n + i + 1) * width];
        for (&gv, &t) in g.iter().zip(cands.row(i)) {
            let base = (h * n + t as usize) * d;
            for (o, &kv) in row.iter_mut().zip(&ks[base..base + d]) {
                *o += gv * scale * kv;
            }
        }
    });
    // scatter into keys; rows visited in ascending order
    let mut dk = vec![0.0; heads * n * d];
    for h in 0..heads {
        for i in 0..n {
            let g = &gs[(h * n + i) * width..(h * n + i + 1) * width];
            let qrow = &qs[(h * n + i) * d..(h * n + i + 1) * d];
            for (&gv, &t) in g.iter().zip(cands.row(i)) {
                let base = (h * n + t as usize) * d;
                for (o, &qv) in dk[base..base + d].iter_mut().zip(qrow) {
                    *o += gv * scale * qv;
                }
            }
        }
    }
    Ok((Tensor::new(&[heads, n, d], dq)?, Tensor::new(&[heads, n, d], dk)?))
}

/// Gradients of [`smm_av`] with respect to the weights and `v`.
pub fn smm_av_backward(dout: &Tensor, a: &Tensor, v: &Tensor, cands: &CandidateSet) -> Result<(Tensor, Tensor)> {
    let (heads, n, d) = heads_shape("smm_av_backward", v)?;
    dout.expect_shape("smm_av_backward", &[heads, n, d])?;
    let width = cands.width();
    flops::record(4 * (heads * cands.total() * d) as u64);
    let (gs, as_, vs) = (dout.data(), a.data(), v.data());
    let mut da = vec![0.0; heads * n * width];
    par::for_each_row(&mut da, width, |r, row| {
        let (h, i) = (r / n, r % n);
        let g = &gs[(h * n + i) * d..(h * n + i + 1) * d];
        for (o, &t) in row.iter_mut().zip(cands.row(i)) {
            let base = (h * n + t as usize) * d;
            *o = g.iter().zip(&vs[base..base + d]).map(|(x, y)| x * y).sum();
        }
    });
    let mut dv = vec![0.0; heads * n * d];
    for h in 0..heads {
        for i in 0..n {
            let g = &gs[(h * n + i) * d..(h * n + i + 1) * d];
            let w = &as_[(h * n + i) * width..(h * n + i + 1) * width];
            for (&wv, &t) in w.iter().zip(cands.row(i)) {
                let base = (h * n + t as usize) * d;
                for (o, &gv) in dv[base..base + d].iter_mut().zip(g) {
                    *o += wv * gv;
                }
            }
        }
    }
    Ok((Tensor::new(&[heads, n, width], da)?, Tensor::new(&[heads, n, d], dv)?))
}

/// Slot of the relative-bias table used for the pair `(query, candidate)`.
pub fn relative_slot(geom: GridGeom, window: usize, query: usize, candidate: usize) -> usize {
    let (qr, qc) = geom.coords(query);
    let (cr, cc) = geom.coords(candidate);
    let dr = cr as isize - qr as isize;
    let dc = cc as isize - qc as isize;
    let reach = window as isize - 1;
    let span = 2 * window - 1;
    if dr.abs() <= reach && dc.abs() <= reach {
        (dr + reach) as usize * span + (dc + reach) as usize
    } else {
        span * span
    }
}

fn relative_slots_for(geom: GridGeom, window: usize, cands: &CandidateSet) -> Vec<u32> {
    let width = cands.width();
    let mut slots = vec![0u32; cands.tokens() * width];
    for i in 0..cands.tokens() {
        for (j, &t) in cands.row(i).iter().enumerate() {
            slots[i * width + j] = relative_slot(geom, window, i, t as usize) as u32;
        }
    }
    slots
}

/// Head average over the first axis of a `heads × N × k` tensor.
pub fn head_mean(a: &Tensor) -> Result<Tensor> {
    let (heads, n, k) = heads_shape("head_mean", a)?;
    let mut out = vec![0.0; n * k];
    for h in 0..heads {
        for (o, v) in out.iter_mut().zip(&a.data()[h * n * k..(h + 1) * n * k]) {
            *o += v;
        }
    }
    let inv = 1.0 / heads as f64;
    out.iter_mut().for_each(|v| *v *= inv);
    Tensor::new(&[n, k], out)
}

/// Attention maps produced by one layer.
#[derive(Debug, Clone)]
pub struct SparseAttnOutput {
    /// Layer output, `N × C`.
    pub out: Tensor,
    /// Masked softmax over the input candidates, `heads × N × k_in`.
    pub attn_rows: Tensor,
    /// Head average of `attn_rows`, `N × k_in`.
    pub selection_scores: Tensor,
}

/// Everything a layer hands onward.
#[derive(Debug, Clone)]
pub struct IeaForward {
    pub attn: SparseAttnOutput,
    /// Candidates that survived pruning (`I_s`).
    pub kept: CandidateSet,
    /// Head-averaged attention of the survivors, not renormalized (`A_s`).
    pub kept_scores: Tensor,
    /// Candidates for the next layer.
    pub next: CandidateSet,
    /// Most similar non-self survivor of every token.
    pub highest: Vec<u32>,
}

/// Saved activations for [`iea_layer_backward`].
#[derive(Debug, Clone)]
pub struct IeaCache {
    x: Tensor,
    heads: usize,
    geom: GridGeom,
    q: Tensor,
    k: Tensor,
    v: Tensor,
    input: CandidateSet,
    attn: Tensor,
    kept: CandidateSet,
    slots: Vec<Vec<u32>>,
    weights: Tensor,
    row_sums: Vec<f64>,
    rel_slots: Option<Vec<u32>>,
    pre_proj: Tensor,
}

/// One attention layer: project, attend over `input`, prune, renormalize,
/// aggregate, add the positional term, project out, and (optionally) expand
/// the surviving candidates for the next layer.
pub fn iea_layer_forward(
    x: &Tensor,
    params: &AttnParams,
    heads: usize,
    input: &CandidateSet,
    plan: &LayerPlan,
    geom: GridGeom,
) -> Result<(IeaForward, IeaCache)> {
    x.expect_rank("iea_layer_forward", 2)?;
    let (n, c) = (x.dim(0), x.dim(1));
    if n != geom.tokens() {
        return Err(Error::shape("iea_layer_forward", format!("{n} tokens on a {}x{} grid", geom.height, geom.width)));
    }
    check_candidates("iea_layer_forward", input, n)?;
    let q = split_heads(&linear(x, &params.wq, &params.bq)?, heads)?;
    let k = split_heads(&linear(x, &params.wk, &params.bk)?, heads)?;
    let v = split_heads(&linear(x, &params.wv, &params.bv)?, heads)?;
    let d = c / heads;

    let mut logits = smm_qk(&q, &k, input)?;
    let width = input.width();
    let rel_slots = match &params.pos {
        PosEncoding::Relative { window, table } => {
            let slots = relative_slots_for(geom, *window, input);
            let stride = table.dim(1);
            let lg = logits.data_mut();
            for h in 0..heads {
                let tab = &table.data()[h * stride..(h + 1) * stride];
                for i in 0..n {
                    for j in 0..input.len_of(i) {
                        lg[(h * n + i) * width + j] += tab[slots[i * width + j] as usize];
                    }
                }
            }
            Some(slots)
        }
        PosEncoding::Lepe { .. } => None,
    };
    let attn = softmax_rows(&logits, Some(input.lengths()))?;
    flops::record(4 * (heads * input.total()) as u64);
    let selection = head_mean(&attn)?;
    let sp = sparsify(&selection, input, plan.budget)?;
    let kept = sp.candidates;
    let kw = kept.width();

    let mut weights = Tensor::zeros(&[heads, n, kw]);
    let mut row_sums = vec![0.0; heads * n];
    {
        let (ad, wd) = (attn.data(), weights.data_mut());
        for h in 0..heads {
            for i in 0..n {
                let src = &ad[(h * n + i) * width..(h * n + i + 1) * width];
                let dst = &mut wd[(h * n + i) * kw..(h * n + i + 1) * kw];
                let mut s = 0.0;
                for (o, &slot) in dst.iter_mut().zip(&sp.slots[i]) {
                    *o = src[slot as usize];
                    s += *o;
                }
                let inv = 1.0 / s;
                dst.iter_mut().for_each(|v| *v *= inv);
                row_sums[h * n + i] = s;
            }
        }
    }
    let mut pre_proj = merge_heads(&smm_av(&weights, &v, &kept)?)?;
    if let PosEncoding::Lepe { weight, bias } = &params.pos {
        let grid_v = merge_heads(&v)?.reshape(&[geom.height, geom.width, c])?;
        let lepe = depthwise_conv3x3(&grid_v, weight, bias)?.reshape(&[n, c])?;
        pre_proj.add_assign(&lepe)?;
    }
    let out = linear(&pre_proj, &params.wo, &params.bo)?;
    out.ensure_finite("attention output")?;

    let next = match plan.expand {
        Some(step) => expand(&sp.scores, &kept, step.k1, step.k2, step.k_out_max)?,
        None => kept.clone(),
    };
    let highest = highest_neighbor(&sp.scores, &kept)?;
    debug_assert_eq!(d * heads, c);

    let fwd = IeaForward {
        attn: SparseAttnOutput { out, attn_rows: attn.clone(), selection_scores: selection },
        kept: kept.clone(),
        kept_scores: sp.scores,
        next,
        highest,
    };
    let cache = IeaCache {
        x: x.clone(),
        heads,
        geom,
        q,
        k,
        v,
        input: input.clone(),
        attn,
        kept,
        slots: sp.slots,
        weights,
        row_sums,
        rel_slots,
        pre_proj,
    };
    Ok((fwd, cache))
}

/// Exact gradients of [`iea_layer_forward`]'s output with respect to `x` and
/// the layer parameters. Candidate indices and the pruning selection are
/// treated as constants.
pub fn iea_layer_backward(dy: &Tensor, cache: &IeaCache, params: &AttnParams) -> Result<(Tensor, AttnParams)> {
    let (n, c) = (cache.x.dim(0), cache.x.dim(1));
    dy.expect_shape("iea_layer_backward", &[n, c])?;
    let heads = cache.heads;
    let mut grads = params.zeroed();

    let out_g = linear_backward(&cache.pre_proj, &params.wo, dy)?;
    grads.wo = out_g.dw;
    grads.bo = out_g.db;
    let dpre = out_g.dx;

    let mut dv_merged = Tensor::zeros(&[n, c]);
    if let PosEncoding::Lepe { weight, .. } = &params.pos {
        let grid = [cache.geom.height, cache.geom.width, c];
        let grid_v = merge_heads(&cache.v)?.reshape(&grid)?;
        let g = depthwise_conv3x3_backward(&grid_v, weight, &dpre.clone().reshape(&grid)?)?;
        dv_merged = g.dx.reshape(&[n, c])?;
        if let PosEncoding::Lepe { weight: gw, bias: gb } = &mut grads.pos {
            *gw = g.dw;
            *gb = g.db;
        }
    }

    let dout_heads = split_heads(&dpre, heads)?;
    let (dweights, dv_heads) = smm_av_backward(&dout_heads, &cache.weights, &cache.v, &cache.kept)?;
    dv_merged.add_assign(&merge_heads(&dv_heads)?)?;

    // renormalization then scatter back to the input slots
    let width = cache.input.width();
    let kw = cache.kept.width();
    let mut dattn = Tensor::zeros(&[heads, n, width]);
    {
        let (wd, gd, out) = (cache.weights.data(), dweights.data(), dattn.data_mut());
        for h in 0..heads {
            for i in 0..n {
                let w = &wd[(h * n + i) * kw..(h * n + i + 1) * kw];
                let g = &gd[(h * n + i) * kw..(h * n + i + 1) * kw];
                let len = cache.kept.len_of(i);
                let inner: f64 = w[..len].iter().zip(&g[..len]).map(|(a, b)| a * b).sum();
                let inv = 1.0 / cache.row_sums[h * n + i];
                let dst = &mut out[(h * n + i) * width..(h * n + i + 1) * width];
                for (t, &slot) in cache.slots[i].iter().enumerate() {
                    dst[slot as usize] = (g[t] - inner) * inv;
                }
            }
        }
    }
    let dlogits = softmax_rows_backward(&cache.attn, &dattn, Some(cache.input.lengths()))?;

    if let (Some(slots), PosEncoding::Relative { table, .. }) = (&cache.rel_slots, &mut grads.pos) {
        let stride = table.dim(1);
        let (gd, td) = (dlogits.data(), table.data_mut());
        for h in 0..heads {
            for i in 0..n {
                for j in 0..cache.input.len_of(i) {
                    td[h * stride + slots[i * width + j] as usize] += gd[(h * n + i) * width + j];
                }
            }
        }
    }

    let (dq, dk) = smm_qk_backward(&dlogits, &cache.q, &cache.k, &cache.input)?;
    let gq = linear_backward(&cache.x, &params.wq, &merge_heads(&dq)?)?;
    let gk = linear_backward(&cache.x, &params.wk, &merge_heads(&dk)?)?;
    let gv = linear_backward(&cache.x, &params.wv, &dv_merged)?;
    let mut dx = gq.dx;
    dx.add_assign(&gk.dx)?;
    dx.add_assign(&gv.dx)?;
    grads.wq = gq.dw;
    grads.bq = gq.db;
    grads.wk = gk.dw;
    grads.bk = gk.db;
    grads.wv = gv.dw;
    grads.bv = gv.db;
    Ok((dx, grads))
}

/// Dense multi-head attention with the same weights and positional terms;
/// every token attends to every token. Used as the reference path.
///
/// Also returns each token's most similar other token under the
/// head-averaged attention map (ties to the smaller token index).
pub fn dense_attention_forward(x: &Tensor, params: &AttnParams, heads: usize, geom: GridGeom) -> Result<(Tensor, Vec<u32>)> {
    let (n, c) = (x.dim(0), x.dim(1));
    let q = split_heads(&linear(x, &params.wq, &params.bq)?, heads)?;
    let k = split_heads(&linear(x, &params.wk, &params.bk)?, heads)?;
    let v = split_heads(&linear(x, &params.wv, &params.bv)?, heads)?;
    let d = c / heads;
    let scale = 1.0 / (d as f64).sqrt();
    let mut logits = Tensor::zeros(&[heads, n, n]);
    for h in 0..heads {
        for i in 0..n {
            for j in 0..n {
                let qi = &q.data()[(h * n + i) * d..(h * n + i + 1) * d];
                let kj = &k.data()[(h * n + j) * d..(h * n + j + 1) * d];
                let bias = match &params.pos {
                    PosEncoding::Relative { window, table } => table.data()[h * table.dim(1) + relative_slot(geom, *window, i, j)],
                    PosEncoding::Lepe { .. } => 0.0,
                };
                logits.data_mut()[(h * n + i) * n + j] = qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() * scale + bias;
            }
        }
    }
    let attn = softmax_rows(&logits, None)?;
    let mean = head_mean(&attn)?;
    let highest = (0..n)
        .map(|i| {
            let row = mean.row(i);
            (0..n)
                .filter(|&j| j != i)
                .fold(None, |best: Option<usize>, j| match best {
                    Some(b) if row[b] >= row[j] => Some(b),
                    _ => Some(j),
                })
                .unwrap_or(i) as u32
        })
        .collect();
    let mut pre = merge_heads(&smm_av(&attn, &v, &CandidateSet::full(n))?)?;
    if let PosEncoding::Lepe { weight, bias } = &params.pos {
        let grid_v = merge_heads(&v)?.reshape(&[geom.height, geom.width, c])?;
        pre.add_assign(&depthwise_conv3x3(&grid_v, weight, bias)?.reshape(&[n, c])?)?;
    }
    Ok((linear(&pre, &params.wo, &params.bo)?, highest))
}

/// Row-streamed dense attention `softmax(q kᵀ/√d + bias) v` for
/// `heads × N × d` inputs; memory stays O(N) per row.
pub fn dense_attention_core(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    bias: impl Fn(usize, usize, usize) -> f64 + Sync,
) -> Result<Tensor> {
    let (heads, n, d) = heads_shape("dense_attention_core", q)?;
    k.expect_shape("dense_attention_core", &[heads, n, d])?;
    v.expect_shape("dense_attention_core", &[heads, n, d])?;
    let scale = 1.0 / (d as f64).sqrt();
    flops::record((4 * heads * n * n * d + 4 * heads * n * n) as u64);
    let (qs, ks, vs) = (q.data(), k.data(), v.data());
    let mut out = vec![0.0; heads * n * d];
    par::for_each_row(&mut out, d, |r, row| {
        let (h, i) = (r / n, r % n);
        let qrow = &qs[(h * n + i) * d..(h * n + i + 1) * d];
        let mut scores: Vec<f64> = (0..n)
            .map(|j| {
                let krow = &ks[(h * n + j) * d..(h * n + j + 1) * d];
                qrow.iter().zip(krow).map(|(a, b)| a * b).sum::<f64>() * scale + bias(h, i, j)
            })
            .collect();
        let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for s in scores.iter_mut() {
            *s = (*s - max).exp();
            total += *s;
        }
        for (j, s) in scores.iter().enumerate() {
            let w = s / total;
            for (o, &vv) in row.iter_mut().zip(&vs[(h * n + j) * d..(h * n + j + 1) * d]) {
                *o += w * vv;
            }
        }
    });
    Tensor::new(&[heads, n, d], out)
}

/// Sparse counterpart of [`dense_attention_core`] over `cands`, without
/// pruning. Rows are streamed like the dense path: each query gathers its
/// candidates' keys, takes a softmax over them and aggregates their values,
/// so no `heads × N × k` buffer is materialized.
pub fn sparse_attention_core(q: &Tensor, k: &Tensor, v: &Tensor, cands: &CandidateSet) -> Result<Tensor> {
    let (heads, n, d) = heads_shape("sparse_attention_core", q)?;
    k.expect_shape("sparse_attention_core", &[heads, n, d])?;
    v.expect_shape("sparse_attention_core", &[heads, n, d])?;
    check_candidates("sparse_attention_core", cands, n)?;
    let scale = 1.0 / (d as f64).sqrt();
    flops::record((4 * heads * cands.total() * d + 4 * heads * cands.total()) as u64);
    let (qs, ks, vs) = (q.data(), k.data(), v.data());
    let mut out = vec![0.0; heads * n * d];
    par::for_each_row(&mut out, d, |r, row| {
        let (h, i) = (r / n, r % n);
        let qrow = &qs[(h * n + i) * d..(h * n + i + 1) * d];
        let idx = cands.row(i);
        let mut scores: Vec<f64> = idx
            .iter()
            .map(|&t| {
                let base = (h * n + t as usize) * d;
                qrow.iter().zip(&ks[base..base + d]).map(|(a, b)| a * b).sum::<f64>() * scale
            })
            .collect();
        let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for s in scores.iter_mut() {
            *s = (*s - max).exp();
            total += *s;
        }
        for (s, &t) in scores.iter().zip(idx) {
            let w = s / total;
            let base = (h * n + t as usize) * d;
            for (o, &vv) in row.iter_mut().zip(&vs[base..base + d]) {
                *o += w * vv;
            }
        }
    });
    Tensor::new(&[heads, n, d], out)
}
