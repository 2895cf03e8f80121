use iet_core::model::{forward, loss_and_grads, ForwardOptions, IetParams, ModelConfig};
use iet_core::numerics::Tensor;
use iet_core::params::Parameters;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn jitter(params: &mut IetParams, rng: &mut ChaCha8Rng, amp: f64) {
    params.visit_mut("", &mut |_, t| {
        t.data_mut().iter_mut().for_each(|v| *v += rng.random_range(-amp..amp));
    });
}

fn random_image(h: usize, w: usize, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(&[h, w, 3], |_| rng.random_range(0.0..1.0))
}

fn loss_of(cfg: &ModelConfig, p: &IetParams, lr: &Tensor, hr: &Tensor, d: usize) -> f64 {
    let out = forward(cfg, p, lr, d, ForwardOptions::default()).unwrap().image;
    out.data().iter().zip(hr.data()).map(|(a, b)| (a - b).abs()).sum::<f64>() / out.len() as f64
}

#[test]
fn toy_model_loss_gradient_spot_checks() {
    let cfg = ModelConfig::toy();
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for seed in 0..3u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let mut params = IetParams::init(&cfg, seed).unwrap();
        jitter(&mut params, &mut rng, 0.05);
        let lr = random_image(6, 6, &mut rng);
        let hr = random_image(12, 12, &mut rng);
        let (_, grads) = loss_and_grads(&cfg, &params, &lr, &hr, 2).unwrap();
        let names: Vec<(String, usize)> = params.named().into_iter().map(|(n, t)| (n, t.len())).collect();
        let analytic: Vec<Vec<f64>> = grads.named().into_iter().map(|(_, t)| t.data().to_vec()).collect();
        for (ti, (name, len)) in names.iter().enumerate() {
            let bump = |idx: usize, delta: f64| {
                let mut p = params.clone();
                let mut k = 0;
                p.visit_mut("", &mut |_, t| {
                    if k == ti {
                        t.data_mut()[idx] += delta;
                    }
                    k += 1;
                });
                loss_of(&cfg, &p, &lr, &hr, 2)
            };
            // The ℓ1 loss and the top-k selections are piecewise smooth; a
            // coordinate whose one-sided slopes disagree sits on a kink and
            // has no derivative to compare against, so draw another.
            let mut checked = false;
            for _ in 0..8 {
                let idx = rng.random_range(0..*len);
                let (lo, mid, hi) = (bump(idx, -h), bump(idx, 0.0), bump(idx, h));
                let (left, right) = ((mid - lo) / h, (hi - mid) / h);
                if (left - right).abs() > 1e-4 * left.abs().max(right.abs()).max(1e-6) {
                    continue;
                }
                let fd = (hi - lo) / (2.0 * h);
                let an = analytic[ti][idx];
                let err = (an - fd).abs() / an.abs().max(fd.abs()).max(1e-6);
                worst = worst.max(err);
                assert!(err < 1e-3, "seed {seed} {name}[{idx}]: analytic {an:e} vs fd {fd:e} (rel {err:e})");
                checked = true;
                break;
            }
            assert!(checked, "seed {seed} {name}: no smooth coordinate found");
        }
    }
    eprintln!("worst relative error {worst:e}");
}
