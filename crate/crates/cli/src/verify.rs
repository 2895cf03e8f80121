//! Property suites run by `iet verify`. Each check compares the library
//! against a brute-force restatement written here.

use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use iet_core::attention::{iea_layer_backward, iea_layer_forward, AttnParams, ExpandStep, LayerPlan, PosEncoding, PosKind};
use iet_core::candidates::{dlsg_init, expand, sparsify, SparsifyBudget};
use iet_core::model::{forward, loss_and_grads, ForwardOptions, IetParams, ModelConfig};
use iet_core::numerics::activation::{layer_norm, layer_norm_backward};
use iet_core::numerics::conv::{conv3x3_backward, depthwise_conv3x3_backward};
use iet_core::numerics::{conv3x3, depthwise_conv3x3, finite_diff_grad, relative_error, Tensor};
use iet_core::params::Parameters;
use iet_core::pipeline::image::{decode_ppm, encode_ppm};
use iet_core::pipeline::{psnr, Image};
use iet_core::sf_ffn::{sf_ffn_backward, sf_ffn_forward, SfFfnParams};
use iet_core::{CandidateSet, GridGeom, Result};

pub const SUITES: [&str; 7] = ["dense-equivalence", "expansion", "sparsify", "dlsg", "gradients", "threading", "io"];

#[derive(Debug, Clone, Serialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct SuiteReport {
    pub suite: String,
    pub seed: u64,
    pub passed: bool,
    pub checks: Vec<Check>,
}

impl SuiteReport {
    pub fn first_failure(&self) -> Option<&Check> {
        self.checks.iter().find(|c| !c.passed)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Tolerances {
    pub dense: f64,
    pub layer_grad: f64,
    pub model_grad: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Self { dense: 1e-10, layer_grad: 1e-4, model_grad: 1e-3 }
    }
}

struct Recorder(Vec<Check>);

impl Recorder {
    fn check(&mut self, name: impl Into<String>, passed: bool, detail: impl Into<String>) {
        self.0.push(Check { name: name.into(), passed, detail: detail.into() });
    }
}

pub fn run_suite(name: &str, seed: u64, tol: Tolerances) -> Result<SuiteReport> {
    let mut rec = Recorder(Vec::new());
    match name {
        "dense-equivalence" => dense_equivalence(&mut rec, seed, tol)?,
        "expansion" => expansion(&mut rec, seed)?,
        "sparsify" => sparsify_suite(&mut rec, seed)?,
        "dlsg" => dlsg(&mut rec)?,
        "gradients" => gradients(&mut rec, seed, tol)?,
        "threading" => threading(&mut rec, seed)?,
        "io" => io(&mut rec, seed)?,
        other => {
            return Err(iet_core::Error::Usage(format!("unknown suite {other:?}; expected one of {}", SUITES.join(", "))))
        }
    }
    let passed = rec.0.iter().all(|c| c.passed);
    Ok(SuiteReport { suite: name.to_string(), seed, passed, checks: rec.0 })
}

fn jitter<P: Parameters>(p: &mut P, rng: &mut ChaCha8Rng, amp: f64) {
    p.visit_mut("", &mut |_, t| t.data_mut().iter_mut().for_each(|v| *v += rng.random_range(-amp..amp)));
}

fn random_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// Plain multi-head attention over all tokens, one scalar at a time.
pub fn naive_attention(x: &Tensor, p: &AttnParams, heads: usize, geom: GridGeom) -> Tensor {
    let (n, c) = (x.dim(0), x.dim(1));
    let d = c / heads;
    let proj = |w: &Tensor, b: &Tensor| -> Vec<Vec<f64>> {
        (0..n)
            .map(|i| (0..c).map(|o| b.data()[o] + (0..c).map(|j| x.data()[i * c + j] * w.data()[j * c + o]).sum::<f64>()).collect())
            .collect()
    };
    let (q, k, v) = (proj(&p.wq, &p.bq), proj(&p.wk, &p.bk), proj(&p.wv, &p.bv));
    let mut mixed = vec![vec![0.0; c]; n];
    for h in 0..heads {
        for i in 0..n {
            let (ri, ci) = (i / geom.width, i % geom.width);
            let logits: Vec<f64> = (0..n)
                .map(|j| {
                    let dot: f64 = (0..d).map(|e| q[i][h * d + e] * k[j][h * d + e]).sum();
                    let bias = match &p.pos {
                        PosEncoding::Relative { window, table } => {
                            let (dr, dc) = ((j / geom.width) as i64 - ri as i64, (j % geom.width) as i64 - ci as i64);
                            let w = *window as i64;
                            let span = (2 * w - 1) as usize;
                            let slot = if dr.abs() < w && dc.abs() < w {
                                (dr + w - 1) as usize * span + (dc + w - 1) as usize
                            } else {
                                span * span
                            };
                            table.data()[h * table.dim(1) + slot]
                        }
                        PosEncoding::Lepe { .. } => 0.0,
                    };
                    dot / (d as f64).sqrt() + bias
                })
                .collect();
            let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
            let z: f64 = e.iter().sum();
            for e_idx in 0..d {
                mixed[i][h * d + e_idx] = (0..n).map(|j| e[j] / z * v[j][h * d + e_idx]).sum();
            }
        }
    }
    if let PosEncoding::Lepe { weight, bias } = &p.pos {
        for i in 0..n {
            let (r, cc) = ((i / geom.width) as i64, (i % geom.width) as i64);
            for ch in 0..c {
                let mut s = bias.data()[ch];
                for ky in 0..3i64 {
                    for kx in 0..3i64 {
                        let (sr, sc) = (r + ky - 1, cc + kx - 1);
                        if sr >= 0 && sc >= 0 && sr < geom.height as i64 && sc < geom.width as i64 {
                            let j = sr as usize * geom.width + sc as usize;
                            s += weight.data()[((ky * 3 + kx) as usize) * c + ch] * v[j][ch];
                        }
                    }
                }
                mixed[i][ch] += s;
            }
        }
    }
    let data = (0..n)
        .flat_map(|i| {
            let m = &mixed[i];
            (0..c).map(move |o| p.bo.data()[o] + (0..c).map(|j| m[j] * p.wo.data()[j * c + o]).sum::<f64>())
        })
        .collect();
    Tensor::new(&[n, c], data).expect("shape")
}

fn dense_equivalence(rec: &mut Recorder, seed: u64, tol: Tolerances) -> Result<()> {
    let mut worst: f64 = 0.0;
    let mut ok = true;
    for s in 0..4 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(1000) + s);
        for side in [4usize, 6, 8] {
            for heads in [1usize, 2, 4] {
                let geom = GridGeom::new(side, side)?;
                let pos = if s % 2 == 0 { PosKind::Relative { window: 3 } } else { PosKind::Lepe };
                let mut p = AttnParams::init(8, heads, pos, &mut rng)?;
                jitter(&mut p, &mut rng, 0.3);
                let x = random_tensor(&[side * side, 8], &mut rng);
                let full = CandidateSet::full(side * side);
                let (fwd, _) = iea_layer_forward(&x, &p, heads, &full, &LayerPlan::passthrough(), geom)?;
                let err = fwd.attn.out.max_abs_diff(&naive_attention(&x, &p, heads, geom));
                worst = worst.max(err);
                ok &= err <= tol.dense;
            }
        }
    }
    rec.check("full candidates match dense multi-head attention", ok, format!("max abs diff {worst:.3e}"));
    Ok(())
}

/// Ranks by descending score, ties to the earlier slot, via a full sort.
fn sort_topk(scores: &[f64], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b)));
    order.truncate(k);
    order
}

fn random_instance(rng: &mut ChaCha8Rng, n: usize, max_len: usize) -> (CandidateSet, Tensor) {
    let rows: Vec<Vec<u32>> = (0..n)
        .map(|_| {
            let len = rng.random_range(1..=max_len.min(n));
            let mut pool: Vec<u32> = (0..n as u32).collect();
            (0..len).map(|_| pool.swap_remove(rng.random_range(0..pool.len()))).collect()
        })
        .collect();
    let cands = CandidateSet::from_rows(n, &rows, None).expect("valid rows");
    let levels = rng.random_range(2..6);
    let scores = Tensor::from_fn(&[n, cands.width()], |_| rng.random_range(0..levels) as f64 / levels as f64);
    (cands, scores)
}

fn expansion(rec: &mut Recorder, seed: u64) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xe1);
    let mut mismatches = Vec::new();
    for inst in 0..50 {
        let n = rng.random_range(2..=128);
        let (cands, scores) = random_instance(&mut rng, n, 24);
        let (k1, k2) = (rng.random_range(1..=8), rng.random_range(1..=8));
        let got = expand(&scores, &cands, k1, k2, n)?;
        for i in 0..n {
            let row = cands.row(i);
            let mut want: BTreeSet<u32> = row.iter().copied().collect();
            for a in sort_topk(&scores.row(i)[..row.len()], k1) {
                let u = row[a] as usize;
                let urow = cands.row(u);
                for b in sort_topk(&scores.row(u)[..urow.len()], k2) {
                    want.insert(urow[b]);
                }
            }
            let have: BTreeSet<u32> = got.row(i).iter().copied().collect();
            if have != want || have.len() != got.len_of(i) || &got.row(i)[..row.len()] != row {
                mismatches.push(format!("instance {inst} row {i}"));
            }
        }
    }
    rec.check(
        "expanded rows equal one-hop ∪ two-hop union",
        mismatches.is_empty(),
        mismatches.first().cloned().unwrap_or_else(|| "50 instances".into()),
    );
    Ok(())
}

fn sparsify_suite(rec: &mut Recorder, seed: u64) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5b);
    let (cands, scores) = random_instance(&mut rng, 100, 40);
    let k = rng.random_range(1..=20);
    let out = sparsify(&scores, &cands, SparsifyBudget::Fixed(k))?;
    let bad = (0..100).find(|&i| {
        let row = cands.row(i);
        let want: Vec<u32> = sort_topk(&scores.row(i)[..row.len()], k).into_iter().map(|p| row[p]).collect();
        out.candidates.row(i) != want.as_slice()
    });
    rec.check("top-k equals sort-based selection", bad.is_none(), format!("k={k}, first bad row {bad:?}"));
    Ok(())
}

fn dlsg(rec: &mut Recorder) -> Result<()> {
    let mut failures = Vec::new();
    for (h, w) in [(7, 7), (9, 12), (16, 16), (32, 32), (13, 8)] {
        let geom = GridGeom::new(h, w)?;
        for win in [3usize, 5, 7] {
            if win > h.min(w) {
                continue;
            }
            for d in 1..=4 {
                let set = dlsg_init(geom, win, d)?;
                set.validate()?;
                let anchors: BTreeSet<u32> = (0..h.div_ceil(d))
                    .flat_map(|a| (0..w.div_ceil(d)).map(move |b| ((a * d + d / 2).min(h - 1), (b * d + d / 2).min(w - 1))))
                    .map(|(r, c)| (r * w + c) as u32)
                    .collect();
                for i in 0..geom.tokens() {
                    let (r, c) = (i / w, i % w);
                    let r0 = r.saturating_sub(win / 2).min(h - win);
                    let c0 = c.saturating_sub(win / 2).min(w - win);
                    let local: BTreeSet<u32> =
                        (r0..r0 + win).flat_map(|rr| (c0..c0 + win).map(move |cc| (rr * w + cc) as u32)).collect();
                    let want: BTreeSet<u32> = local.union(&anchors).copied().collect();
                    let have: BTreeSet<u32> = set.row(i).iter().copied().collect();
                    if have != want || have.len() != set.len_of(i) {
                        failures.push(format!("{h}x{w} w={win} d={d} token {i}"));
                    }
                }
                if d == 1 && set.lengths().iter().any(|&l| l != geom.tokens()) {
                    failures.push(format!("{h}x{w} w={win} d=1 not full"));
                }
            }
        }
    }
    rec.check("rows are local window ∪ cell anchors, d=1 is full", failures.is_empty(), failures.join("; "));
    Ok(())
}

/// Compares every coordinate of `analytic` with central differences of
/// `loss` over `params`.
fn param_gradcheck<P: Parameters>(params: &P, analytic: &P, mut loss: impl FnMut(&P) -> Result<f64>) -> Result<f64> {
    let names: Vec<String> = params.named().into_iter().map(|(n, _)| n).collect();
    let grads: Vec<Tensor> = analytic.named().into_iter().map(|(_, t)| t.clone()).collect();
    let mut worst: f64 = 0.0;
    for (ti, _) in names.iter().enumerate() {
        let base: Tensor = params.named()[ti].1.clone();
        let fd = finite_diff_grad(
            |t| {
                let mut p = params.clone();
                let mut k = 0;
                p.visit_mut("", &mut |_, dst| {
                    if k == ti {
                        *dst = t.clone();
                    }
                    k += 1;
                });
                loss(&p)
            },
            &base,
            1e-5,
        )?;
        worst = worst.max(relative_error(&grads[ti], &fd, 1e-8));
    }
    Ok(worst)
}

fn gradients(rec: &mut Recorder, seed: u64, tol: Tolerances) -> Result<()> {
    let h = 1e-5;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9d);
    let geom = GridGeom::new(4, 5)?;
    let n = geom.tokens();

    let mut worst_attn: f64 = 0.0;
    for pos in [PosKind::Relative { window: 3 }, PosKind::Lepe] {
        let mut p = AttnParams::init(4, 2, pos, &mut rng)?;
        jitter(&mut p, &mut rng, 0.4);
        let x = random_tensor(&[n, 4], &mut rng);
        let r = random_tensor(&[n, 4], &mut rng);
        let cands = dlsg_init(geom, 3, 2)?;
        let plan = LayerPlan {
            budget: SparsifyBudget::Fraction { keep: 0.6, floor: 4 },
            expand: Some(ExpandStep { k1: 3, k2: 2, k_out_max: 16 }),
        };
        let f = |x: &Tensor, p: &AttnParams| -> Result<f64> {
            Ok(iea_layer_forward(x, p, 2, &cands, &plan, geom)?.0.attn.out.dot(&r))
        };
        let (_, cache) = iea_layer_forward(&x, &p, 2, &cands, &plan, geom)?;
        let (dx, gp) = iea_layer_backward(&r, &cache, &p)?;
        worst_attn = worst_attn.max(relative_error(&dx, &finite_diff_grad(|x| f(x, &p), &x, h)?, 1e-8));
        worst_attn = worst_attn.max(param_gradcheck(&p, &gp, |p| f(&x, p))?);
    }
    rec.check("attention layer", worst_attn < tol.layer_grad, format!("rel err {worst_attn:.2e}"));

    let mut p = SfFfnParams::init(4, 2, 2, &mut rng)?;
    jitter(&mut p, &mut rng, 0.4);
    let x = random_tensor(&[n, 4], &mut rng);
    let r = random_tensor(&[n, 4], &mut rng);
    let highest: Vec<u32> = (0..n as u32).map(|i| (i * 7 + 3) % n as u32).collect();
    let f = |x: &Tensor, p: &SfFfnParams| -> Result<f64> { Ok(sf_ffn_forward(x, &highest, p, geom)?.0.dot(&r)) };
    let (_, cache) = sf_ffn_forward(&x, &highest, &p, geom)?;
    let (dx, gp) = sf_ffn_backward(&r, &cache, &p)?;
    let worst = relative_error(&dx, &finite_diff_grad(|x| f(x, &p), &x, h)?, 1e-8).max(param_gradcheck(&p, &gp, |p| f(&x, p))?);
    rec.check("similarity-fused feed-forward", worst < tol.layer_grad, format!("rel err {worst:.2e}"));

    let x = random_tensor(&[4, 5, 3], &mut rng);
    let w = random_tensor(&[3, 3, 3, 2], &mut rng);
    let b = random_tensor(&[2], &mut rng);
    let r = random_tensor(&[4, 5, 2], &mut rng);
    let g = conv3x3_backward(&x, &w, &r)?;
    let worst = [
        relative_error(&g.dx, &finite_diff_grad(|x| Ok(conv3x3(x, &w, &b)?.dot(&r)), &x, h)?, 1e-8),
        relative_error(&g.dw, &finite_diff_grad(|w| Ok(conv3x3(&x, w, &b)?.dot(&r)), &w, h)?, 1e-8),
        relative_error(&g.db, &finite_diff_grad(|b| Ok(conv3x3(&x, &w, b)?.dot(&r)), &b, h)?, 1e-8),
    ]
    .into_iter()
    .fold(0.0, f64::max);
    rec.check("3x3 convolution", worst < tol.layer_grad, format!("rel err {worst:.2e}"));

    let w = random_tensor(&[3, 3, 3], &mut rng);
    let b = random_tensor(&[3], &mut rng);
    let r = random_tensor(&[4, 5, 3], &mut rng);
    let g = depthwise_conv3x3_backward(&x, &w, &r)?;
    let worst = relative_error(&g.dx, &finite_diff_grad(|x| Ok(depthwise_conv3x3(x, &w, &b)?.dot(&r)), &x, h)?, 1e-8)
        .max(relative_error(&g.dw, &finite_diff_grad(|w| Ok(depthwise_conv3x3(&x, w, &b)?.dot(&r)), &w, h)?, 1e-8));
    rec.check("depthwise convolution", worst < tol.layer_grad, format!("rel err {worst:.2e}"));

    let x = random_tensor(&[6, 5], &mut rng);
    let gamma = random_tensor(&[5], &mut rng);
    let beta = random_tensor(&[5], &mut rng);
    let r = random_tensor(&[6, 5], &mut rng);
    let (_, cache) = layer_norm(&x, &gamma, &beta)?;
    let g = layer_norm_backward(&cache, &gamma, &r)?;
    let worst = relative_error(&g.dx, &finite_diff_grad(|x| Ok(layer_norm(x, &gamma, &beta)?.0.dot(&r)), &x, h)?, 1e-8)
        .max(relative_error(&g.dgamma, &finite_diff_grad(|gm| Ok(layer_norm(&x, gm, &beta)?.0.dot(&r)), &gamma, h)?, 1e-8));
    rec.check("layer norm", worst < tol.layer_grad, format!("rel err {worst:.2e}"));

    let cfg = ModelConfig::toy();
    let mut params = IetParams::init(&cfg, seed)?;
    jitter(&mut params, &mut rng, 0.05);
    let lr = Tensor::from_fn(&[6, 6, 3], |_| rng.random_range(0.0..1.0));
    let hr = Tensor::from_fn(&[12, 12, 3], |_| rng.random_range(0.0..1.0));
    let (_, grads) = loss_and_grads(&cfg, &params, &lr, &hr, 2)?;
    let loss = |p: &IetParams| -> Result<f64> {
        let out = forward(&cfg, p, &lr, 2, ForwardOptions::default())?.image;
        Ok(out.data().iter().zip(hr.data()).map(|(a, b)| (a - b).abs()).sum::<f64>() / out.len() as f64)
    };
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    let analytic: Vec<Tensor> = grads.named().into_iter().map(|(_, t)| t.clone()).collect();
    for (ti, t) in analytic.iter().enumerate() {
        let idx = rng.random_range(0..t.len());
        let bump = |delta: f64| {
            let mut p = params.clone();
            let mut k = 0;
            p.visit_mut("", &mut |_, dst| {
                if k == ti {
                    dst.data_mut()[idx] += delta;
                }
                k += 1;
            });
            loss(&p)
        };
        let (lo, mid, hi) = (bump(-h)?, bump(0.0)?, bump(h)?);
        let (left, right) = ((mid - lo) / h, (hi - mid) / h);
        if (left - right).abs() > 1e-4 * left.abs().max(right.abs()).max(1e-6) {
            continue;
        }
        let fd = (hi - lo) / (2.0 * h);
        let an = t.data()[idx];
        worst = worst.max((an - fd).abs() / an.abs().max(fd.abs()).max(1e-6));
        checked += 1;
    }
    rec.check("toy model l1 loss", worst < tol.model_grad, format!("{checked} coordinates, rel err {worst:.2e}"));
    Ok(())
}

fn threading(rec: &mut Recorder, seed: u64) -> Result<()> {
    let mut cfg = ModelConfig::toy();
    cfg.blocks = 5;
    cfg.schedule.k1 = vec![4, 3, 3];
    cfg.schedule.k2 = vec![3, 2, 2];
    cfg.schedule.k_out_max = 40;
    let params = IetParams::init(&cfg, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let lr = Tensor::from_fn(&[10, 10, 3], |_| rng.random_range(0.0..1.0));
    let out = forward(&cfg, &params, &lr, 2, ForwardOptions { trace: true, ..Default::default() })?;
    let chained = out.trace.windows(2).all(|w| w[0].next.digest() == w[1].input.digest());
    rec.check("each layer's input is the previous layer's output set", chained, format!("{} layers", out.trace.len()));
    let placed = out.trace.iter().all(|t| {
        let want = t.layer + 1 == cfg.layers_per_block && t.block < cfg.schedule.k1.len();
        t.expanded == want && (t.expanded || t.next.digest() == t.kept.digest())
    });
    rec.check("expansion only at scheduled positions", placed, "");
    Ok(())
}

fn io(rec: &mut Recorder, seed: u64) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bytes: Vec<u8> = (0..7 * 9 * 3).map(|_| rng.random()).collect();
    let img = Image::from_u8(7, 9, &bytes)?;
    let back = decode_ppm(&encode_ppm(&img))?;
    rec.check("ppm round trip", back.to_u8() == bytes && back == img, "");
    rec.check("identical images give +inf", psnr(&img, &img)? == f64::INFINITY, "");
    let a = Image::new(Tensor::full(&[4, 4, 3], 0.3))?;
    let b = Image::new(Tensor::full(&[4, 4, 3], 0.4))?;
    let db = psnr(&a, &b)?;
    rec.check("uniform 0.1 offset is 20 dB", (db - 20.0).abs() <= 1e-9, format!("{db:.12}"));
    Ok(())
}
