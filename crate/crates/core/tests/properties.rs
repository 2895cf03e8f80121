use std::collections::BTreeSet;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use iet_core::attention::{iea_layer_forward, AttnParams, LayerPlan, PosKind};
use iet_core::candidates::{dlsg_init, expand, highest_neighbor, sparsify, SparsifyBudget};
use iet_core::model::{forward, ForwardOptions, IetParams, ModelConfig};
use iet_core::numerics::{gather_rows, pixel_shuffle, pixel_unshuffle, scatter_add_rows, softmax_rows, topk, Tensor};
use iet_core::pipeline::{bicubic_resize, extract_patches, psnr, synthetic_texture, Image};
use iet_core::sf_ffn::{sf_ffn_forward, SfFfnParams};
use iet_core::{CandidateSet, GridGeom};

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn randn(shape: &[usize], r: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| r.random_range(-1.0..1.0))
}

fn random_set(n: usize, max_len: usize, r: &mut ChaCha8Rng) -> CandidateSet {
    let rows: Vec<Vec<u32>> = (0..n)
        .map(|_| {
            let len = r.random_range(1..=max_len.min(n));
            let mut row: Vec<u32> = Vec::new();
            while row.len() < len {
                let t = r.random_range(0..n as u32);
                if !row.contains(&t) {
                    row.push(t);
                }
            }
            row
        })
        .collect();
    CandidateSet::from_rows(n, &rows, None).unwrap()
}

fn quantized_scores(set: &CandidateSet, levels: u32, r: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(&[set.tokens(), set.width()], |_| r.random_range(0..levels) as f64 / levels as f64)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn topk_matches_sorting(values in prop::collection::vec(0u8..12, 0..256), k in 0usize..300) {
        let v: Vec<f64> = values.iter().map(|&x| x as f64).collect();
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&a, &b| v[b].total_cmp(&v[a]).then(a.cmp(&b)));
        idx.truncate(k);
        prop_assert_eq!(topk(&v, k), idx);
    }

    #[test]
    fn masked_softmax_rows(seed in any::<u64>(), rows in 1usize..8, width in 1usize..12) {
        let mut r = rng(seed);
        let x = Tensor::from_fn(&[rows, width], |_| r.random_range(-30.0..30.0));
        let lens: Vec<usize> = (0..rows).map(|_| r.random_range(1..=width)).collect();
        let y = softmax_rows(&x, Some(&lens)).unwrap();
        for (i, &l) in lens.iter().enumerate() {
            let row = y.row(i);
            prop_assert!(row[l..].iter().all(|&v| v == 0.0));
            prop_assert!((row[..l].iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn sparsify_and_expand_keep_sets_valid(seed in any::<u64>(), n in 2usize..60, k1 in 1usize..6, k2 in 1usize..6, cap in 1usize..40) {
        let mut r = rng(seed);
        let set = random_set(n, 16, &mut r);
        let scores = quantized_scores(&set, 4, &mut r);
        let kept = sparsify(&scores, &set, SparsifyBudget::Fraction { keep: 0.5, floor: 3 }).unwrap();
        kept.candidates.validate().unwrap();
        for i in 0..n {
            let input: BTreeSet<u32> = set.row(i).iter().copied().collect();
            prop_assert!(kept.candidates.row(i).iter().all(|t| input.contains(t)));
        }
        let out = expand(&kept.scores, &kept.candidates, k1, k2, cap).unwrap();
        out.validate().unwrap();
        for i in 0..n {
            prop_assert!(out.row(i).starts_with(kept.candidates.row(i)));
            prop_assert!(out.len_of(i) <= cap.max(kept.candidates.len_of(i)));
        }
        let best = highest_neighbor(&kept.scores, &kept.candidates).unwrap();
        for (i, &b) in best.iter().enumerate() {
            prop_assert!(kept.candidates.row(i).contains(&b));
            prop_assert!(b as usize != i || kept.candidates.len_of(i) == 1);
        }
    }

    #[test]
    fn gather_and_scatter_are_adjoint(seed in any::<u64>(), n in 1usize..20, m in 1usize..30, c in 1usize..6) {
        let mut r = rng(seed);
        let x = randn(&[n, c], &mut r);
        let y = randn(&[m, c], &mut r);
        let index: Vec<u32> = (0..m).map(|_| r.random_range(0..n as u32)).collect();
        let lhs = gather_rows(&x, &index).unwrap().dot(&y);
        let rhs = x.dot(&scatter_add_rows(&y, &index, n).unwrap());
        prop_assert!((lhs - rhs).abs() <= 1e-12 * (1.0 + lhs.abs()));
    }

    #[test]
    fn pixel_shuffle_round_trip(seed in any::<u64>(), h in 1usize..6, w in 1usize..6, c in 1usize..4, s in 1usize..4) {
        let mut r = rng(seed);
        let x = randn(&[h, w, c * s * s], &mut r);
        let y = pixel_shuffle(&x, s).unwrap();
        prop_assert_eq!(y.shape(), &[s * h, s * w, c][..]);
        let back = pixel_unshuffle(&y, s).unwrap();
        prop_assert_eq!(back.data(), x.data());
    }

    #[test]
    fn psnr_symmetry_shift_and_noise(seed in any::<u64>(), shift in -0.2f64..0.2, a in 0.01f64..0.1, b in 0.1f64..0.3) {
        let mut r = rng(seed);
        let base = Tensor::from_fn(&[6, 5, 3], |_| r.random_range(0.3..0.7));
        let noise = Tensor::from_fn(&[6, 5, 3], |_| r.random_range(-1.0..1.0));
        let img = |t: Tensor| Image::new(t).unwrap();
        let x = img(base.clone());
        let y = img(base.add(&noise.scale(a)).unwrap());
        let z = img(base.add(&noise.scale(b)).unwrap());
        let p = psnr(&x, &y).unwrap();
        prop_assert_eq!(p, psnr(&y, &x).unwrap());
        let xs = img(x.pixels().map(|v| v + shift));
        let ys = img(y.pixels().map(|v| v + shift));
        prop_assert!((psnr(&xs, &ys).unwrap() - p).abs() <= 1e-9);
        prop_assert!(psnr(&x, &z).unwrap() < p);
    }

    #[test]
    fn bicubic_is_linear(seed in any::<u64>(), h in 4usize..12, w in 4usize..12, up in any::<bool>(), alpha in -2.0f64..2.0) {
        let mut r = rng(seed);
        let a = Tensor::from_fn(&[h, w, 3], |_| r.random_range(0.0..1.0));
        let b = Tensor::from_fn(&[h, w, 3], |_| r.random_range(0.0..1.0));
        let (num, den) = if up { (3, 1) } else { (1, 2) };
        let resize = |t: Tensor| bicubic_resize(&Image::new(t).unwrap(), num, den).unwrap().into_pixels();
        let mixed = resize(a.add(&b.scale(alpha)).unwrap());
        let split = resize(a).add(&resize(b).scale(alpha)).unwrap();
        prop_assert!(mixed.max_abs_diff(&split) <= 1e-10);
    }

    #[test]
    fn candidate_order_does_not_change_attention(seed in any::<u64>(), heads in 1usize..3) {
        let mut r = rng(seed);
        let geom = GridGeom::new(5, 6).unwrap();
        let n = geom.tokens();
        let mut p = AttnParams::init(8, heads * 2, PosKind::Lepe, &mut r).unwrap();
        p.wv = randn(&[8, 8], &mut r);
        let x = randn(&[n, 8], &mut r);
        let set = random_set(n, 12, &mut r);
        let shuffled: Vec<Vec<u32>> = set
            .rows()
            .map(|row| {
                let mut v = row.to_vec();
                v.reverse();
                v.rotate_left(r.random_range(0..row.len()));
                v
            })
            .collect();
        let shuffled = CandidateSet::from_rows(n, &shuffled, None).unwrap();
        let plan = LayerPlan::passthrough();
        let (a, _) = iea_layer_forward(&x, &p, heads * 2, &set, &plan, geom).unwrap();
        let (b, _) = iea_layer_forward(&x, &p, heads * 2, &shuffled, &plan, geom).unwrap();
        prop_assert!(a.attn.out.max_abs_diff(&b.attn.out) <= 1e-12);
    }
}

/// With an identity output projection and no positional term, each head's
/// output is Σ_j a_ij v_j over its candidates with a_ij ≥ 0 and Σ_j a_ij = 1.
#[test]
fn attention_output_is_a_convex_combination() {
    for seed in 0..10 {
        let mut r = rng(seed);
        let geom = GridGeom::new(6, 6).unwrap();
        let (n, c, heads) = (36, 8, 2);
        let mut p = AttnParams::init(c, heads, PosKind::Lepe, &mut r).unwrap();
        p.wq = randn(&[c, c], &mut r);
        p.wk = randn(&[c, c], &mut r);
        p.wv = randn(&[c, c], &mut r);
        p.wo = Tensor::identity(c);
        let x = randn(&[n, c], &mut r);
        let set = dlsg_init(geom, 3, 2).unwrap();
        let (f, _) = iea_layer_forward(&x, &p, heads, &set, &LayerPlan::passthrough(), geom).unwrap();
        let v = iet_core::numerics::linear(&x, &p.wv, &p.bv).unwrap();
        let dh = c / heads;
        let width = f.attn.attn_rows.dim(2);
        for h in 0..heads {
            for i in 0..n {
                let a = &f.attn.attn_rows.data()[(h * n + i) * width..(h * n + i + 1) * width];
                let row = set.row(i);
                assert!(a.iter().all(|&w| w >= 0.0));
                assert!((a[..row.len()].iter().sum::<f64>() - 1.0).abs() <= 1e-12);
                for e in 0..dh {
                    let want: f64 = row.iter().zip(a).map(|(&j, w)| w * v.data()[j as usize * c + h * dh + e]).sum();
                    let got = f.attn.out.data()[i * c + h * dh + e];
                    assert!((got - want).abs() <= 1e-10, "seed {seed} head {h} token {i}: {got} vs {want}");
                }
            }
        }
    }
}

#[test]
fn fresh_ffn_is_identity() {
    let mut r = rng(4);
    let geom = GridGeom::new(4, 4).unwrap();
    let p = SfFfnParams::init(6, 3, 2, &mut r).unwrap();
    let x = randn(&[16, 6], &mut r);
    let highest: Vec<u32> = (0..16).map(|i| (i * 7 % 16) as u32).collect();
    assert_eq!(sf_ffn_forward(&x, &highest, &p, geom).unwrap().0.data(), x.data());
}

fn layer_params(c: usize, h: usize, r: usize, pos: usize) -> usize {
    let dh = c / h;
    let norms = 4 * c;
    let attn = 4 * (c * c + c) + pos;
    let ffn = h * (2 * dh * r * dh + r * dh + r * dh * dh + dh) + 9 * c + c;
    norms + attn + ffn
}

fn closed_form_count(cfg: &ModelConfig) -> usize {
    let (c, h, r) = (cfg.channels, cfg.heads, cfg.ffn_ratio);
    let side = 2 * cfg.window - 1;
    let conv = |cin: usize, cout: usize| 9 * cin * cout + cout;
    let first = cfg.layers_per_block * layer_params(c, h, r, h * (side * side + 1));
    let rest = (cfg.blocks - 1) * cfg.layers_per_block * layer_params(c, h, r, 10 * c);
    conv(3, c) + first + rest + cfg.blocks * conv(c, c) + conv(c, c) + conv(c, 3 * cfg.scale * cfg.scale)
}

fn count(p: &IetParams) -> usize {
    use iet_core::params::Parameters;
    p.param_count()
}

#[test]
fn parameter_counts() {
    let toy = ModelConfig::toy();
    let n = count(&IetParams::init(&toy, 0).unwrap());
    assert_eq!(n, closed_form_count(&toy));
    // Worked by hand for C=16, h=2, r=2, w=3, s=2:
    // head 448, layers 2×2180 + 2×2288, block convs 2×2320, body 2320, tail 1740.
    assert_eq!(n, 448 + 2 * 2180 + 2 * 2288 + 2 * 2320 + 2320 + 1740);

    let light = ModelConfig::light(2);
    let n = count(&IetParams::init(&light, 0).unwrap());
    assert_eq!(n, closed_form_count(&light));
    let reported = 783_000.0;
    let rel = (n as f64 - reported).abs() / reported;
    assert!(rel <= 0.15, "light model has {n} parameters, {:.1}% off", 100.0 * rel);
}

fn toy_input(seed: u64, side: usize) -> Tensor {
    synthetic_texture(side, side, seed).unwrap().into_pixels()
}

#[test]
fn forward_is_deterministic_across_thread_counts() {
    let mut cfg = ModelConfig::toy();
    cfg.channels = 32;
    cfg.heads = 4;
    let params = IetParams::init(&cfg, 3).unwrap();
    let lr = toy_input(3, 32);
    let run = |threads: usize| {
        iet_core::numerics::par::set_threads(threads);
        forward(&cfg, &params, &lr, 2, ForwardOptions::default()).unwrap().image
    };
    let one = run(1);
    let four = run(4);
    let again = run(1);
    iet_core::numerics::par::set_threads(usize::MAX);
    assert_eq!(one.data(), four.data());
    assert_eq!(one.data(), again.data());
}

#[test]
fn full_candidates_without_pruning_match_dense_model() {
    let mut cfg = ModelConfig::toy();
    cfg.schedule.keep_fraction = 1.0;
    let mut params = IetParams::init(&cfg, 5).unwrap();
    let mut r = rng(5);
    use iet_core::params::Parameters;
    params.visit_mut("", &mut |_, t| t.data_mut().iter_mut().for_each(|v| *v += r.random_range(-0.05..0.05)));
    let lr = toy_input(5, 8);
    let sparse = forward(&cfg, &params, &lr, 1, ForwardOptions::default()).unwrap().image;
    let dense = forward(&cfg, &params, &lr, 1, ForwardOptions { dense: true, ..Default::default() }).unwrap().image;
    assert!(sparse.max_abs_diff(&dense) <= 1e-8, "max |Δ| = {:e}", sparse.max_abs_diff(&dense));
}

#[test]
fn expanding_full_rows_changes_nothing() {
    let set = CandidateSet::full(10);
    let scores = Tensor::from_fn(&[10, 10], |i| (i % 7) as f64);
    let out = expand(&scores, &set, 3, 3, 4).unwrap();
    for i in 0..10 {
        assert_eq!(out.row(i), set.row(i));
    }
}

/// Direct evaluation of the a = −0.5 kernel on an 8×8 ramp, written
/// independently of the separable implementation.
#[test]
fn bicubic_ramp_matches_direct_convolution() {
    fn kernel(x: f64) -> f64 {
        let a = -0.5;
        let x = x.abs();
        if x <= 1.0 {
            (a + 2.0) * x.powi(3) - (a + 3.0) * x.powi(2) + 1.0
        } else if x < 2.0 {
            a * x.powi(3) - 5.0 * a * x.powi(2) + 8.0 * a * x - 4.0 * a
        } else {
            0.0
        }
    }
    let src = Tensor::from_fn(&[8, 8, 3], |i| {
        let (y, x, ch) = (i / 24, (i / 3) % 8, i % 3);
        (0.03 * y as f64 + 0.07 * x as f64 + 0.1 * ch as f64) / 1.2
    });
    let out = bicubic_resize(&Image::new(src.clone()).unwrap(), 2, 1).unwrap().into_pixels();
    assert_eq!(out.shape(), &[16, 16, 3]);
    for oy in 0..16 {
        for ox in 0..16 {
            let (cy, cx) = ((oy as f64 + 0.5) / 2.0 - 0.5, (ox as f64 + 0.5) / 2.0 - 0.5);
            for ch in 0..3 {
                let (mut acc, mut norm) = (0.0, 0.0);
                for sy in (cy.floor() as i64 - 1)..=(cy.floor() as i64 + 2) {
                    for sx in (cx.floor() as i64 - 1)..=(cx.floor() as i64 + 2) {
                        let w = kernel(cy - sy as f64) * kernel(cx - sx as f64);
                        let (yy, xx) = (sy.clamp(0, 7) as usize, sx.clamp(0, 7) as usize);
                        acc += w * src.data()[(yy * 8 + xx) * 3 + ch];
                        norm += w;
                    }
                }
                let want = acc / norm;
                let got = out.data()[(oy * 16 + ox) * 3 + ch];
                assert!((got - want).abs() <= 1e-10, "({oy},{ox},{ch}): {got} vs {want}");
            }
        }
    }
}

#[test]
fn patches_are_deterministic_per_seed() {
    let img = synthetic_texture(40, 40, 2).unwrap();
    let a = extract_patches(&img, 16, 8, 2, 11).unwrap();
    let b = extract_patches(&img, 16, 8, 2, 11).unwrap();
    assert_eq!(a.len(), b.len());
    for (p, q) in a.iter().zip(&b) {
        assert_eq!((p.top, p.left), (q.top, q.left));
        assert_eq!(p.lr.pixels().data(), q.lr.pixels().data());
    }
}
