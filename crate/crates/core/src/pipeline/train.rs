use std::time::Instant;

use serde::{Serialize, Serializer};

use crate::error::Result;
use crate::model::network::{forward, ForwardOptions};
use crate::model::optim::{Adam, TrainState};
use crate::model::ModelConfig;
use crate::numerics::flops;

use super::image::Image;
use super::metrics::psnr;
use super::resize::bicubic_resize;

fn decibels<S: Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
    if v.is_infinite() {
        s.serialize_str(if *v > 0.0 { "inf" } else { "-inf" })
    } else {
        s.serialize_f64(*v)
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ImageScore {
    pub name: String,
    #[serde(serialize_with = "decibels")]
    pub psnr: f64,
    #[serde(serialize_with = "decibels")]
    pub bicubic_psnr: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct EvalReport {
    pub images: Vec<ImageScore>,
    #[serde(serialize_with = "decibels")]
    pub mean_psnr: f64,
    pub runtime_s: f64,
    /// FLOPs of one evaluation forward pass.
    pub forward_flops: u64,
    pub steps: u64,
    pub losses: Vec<f64>,
    /// Mean loss of each consecutive block of `window` steps.
    pub window_means: Vec<f64>,
    pub window: usize,
    /// `(step, psnr)` samples taken during training.
    pub psnr_trajectory: Vec<(u64, f64)>,
}

fn fmt_db(v: f64) -> String {
    if v.is_infinite() {
        "+inf".into()
    } else {
        format!("{v:.4}")
    }
}

impl EvalReport {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for im in &self.images {
            s += &format!(
                "image {} psnr {} dB bicubic {} dB gain {} dB\n",
                im.name,
                fmt_db(im.psnr),
                fmt_db(im.bicubic_psnr),
                fmt_db(im.psnr - im.bicubic_psnr)
            );
        }
        s += &format!("mean_psnr {} dB\n", fmt_db(self.mean_psnr));
        s += &format!("steps {} runtime {:.2} s forward_flops {}\n", self.steps, self.runtime_s, self.forward_flops);
        if let (Some(first), Some(last)) = (self.losses.first(), self.losses.last()) {
            s += &format!("loss first {first:.6} last {last:.6}\n");
        }
        s += &format!("windowed_loss_monotone {}\n", self.windowed_loss_monotone());
        s
    }

    /// Whether every window mean is strictly below the previous one.
    pub fn windowed_loss_monotone(&self) -> bool {
        self.window_means.windows(2).all(|w| w[1] < w[0])
    }
}

#[derive(Debug, Clone)]
pub struct OverfitOptions {
    pub steps: u64,
    pub seed: u64,
    pub optimizer: Adam,
    /// Decay the learning rate along a half cosine down to this fraction.
    pub final_lr_fraction: f64,
    pub window: usize,
    /// Evaluate PSNR every this many steps (0 disables the trajectory).
    pub eval_every: u64,
    pub name: String,
}

impl Default for OverfitOptions {
    fn default() -> Self {
        Self {
            steps: 2000,
            seed: 0,
            optimizer: Adam { lr: 2e-3, ..Adam::default() },
            final_lr_fraction: 0.05,
            window: 10,
            eval_every: 0,
            name: "patch".into(),
        }
    }
}

/// SR output of `state` on `lr` at its inference dilation, clamped.
pub fn super_resolve(state: &TrainState, lr: &Image, dilation: usize) -> Result<Image> {
    let opts = ForwardOptions { clamp: true, ..ForwardOptions::default() };
    Image::new(forward(&state.config, &state.params, lr.pixels(), dilation, opts)?.image)
}

/// Trains a fresh model on the single pair (`hr ÷ scale`, `hr`) and
/// compares its reconstruction with plain bicubic upscaling.
pub fn overfit_run(cfg: &ModelConfig, hr: &Image, opts: &OverfitOptions) -> Result<(TrainState, EvalReport)> {
    let start = Instant::now();
    let s = cfg.scale;
    let lr = bicubic_resize(hr, 1, s)?;
    let hr = hr.crop(0, 0, lr.height() * s, lr.width() * s)?;
    let baseline = psnr(&bicubic_resize(&lr, s, 1)?, &hr)?;

    let mut state = TrainState::new(cfg.clone(), opts.seed, opts.optimizer)?;
    let base_lr = opts.optimizer.lr;
    let d = cfg.dilation_train;
    let mut losses = Vec::with_capacity(opts.steps as usize);
    let mut trajectory = Vec::new();
    for step in 0..opts.steps {
        let progress = step as f64 / opts.steps.max(1) as f64;
        let cos = 0.5 * (1.0 + (std::f64::consts::PI * progress).cos());
        state.optimizer.lr = base_lr * (opts.final_lr_fraction + (1.0 - opts.final_lr_fraction) * cos);
        losses.push(state.train_step(lr.pixels(), hr.pixels())?);
        if opts.eval_every > 0 && (step + 1) % opts.eval_every == 0 {
            trajectory.push((step + 1, psnr(&super_resolve(&state, &lr, d)?, &hr)?));
        }
    }
    state.optimizer.lr = base_lr;

    let (sr, forward_flops) = flops::measure(|| super_resolve(&state, &lr, cfg.dilation_train));
    let final_psnr = psnr(&sr?, &hr)?;
    let window = opts.window.max(1);
    let window_means = losses.chunks_exact(window).map(|w| w.iter().sum::<f64>() / window as f64).collect();
    let report = EvalReport {
        images: vec![ImageScore { name: opts.name.clone(), psnr: final_psnr, bicubic_psnr: baseline }],
        mean_psnr: final_psnr,
        runtime_s: start.elapsed().as_secs_f64(),
        forward_flops,
        steps: opts.steps,
        losses,
        window_means,
        window,
        psnr_trajectory: trajectory,
    };
    Ok((state, report))
}
