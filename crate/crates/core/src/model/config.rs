use serde::{Deserialize, Serialize};

use crate::attention::{ExpandStep, LayerPlan};
use crate::candidates::SparsifyBudget;
use crate::error::{Error, Result};

/// Per-block expansion fan-outs plus the pruning budget shared by all layers.
///
/// Block `b` expands in its last layer iff `b < k1.len()`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpansionSchedule {
    pub k1: Vec<usize>,
    pub k2: Vec<usize>,
    /// Fraction of each candidate row kept by pruning.
    pub keep_fraction: f64,
    /// Rows are never pruned below this many candidates.
    pub k_min: usize,
    /// Width cap for expanded rows.
    pub k_out_max: usize,
}

impl ExpansionSchedule {
    /// Fan-outs for the first four blocks of the reference architectures.
    pub fn reference() -> Self {
        Self {
            k1: vec![22, 20, 14, 12],
            k2: vec![12, 11, 9, 8],
            keep_fraction: 0.5,
            k_min: 16,
            k_out_max: 256,
        }
    }

    pub fn budget(&self) -> SparsifyBudget {
        SparsifyBudget::Fraction { keep: self.keep_fraction, floor: self.k_min }
    }

    pub fn validate(&self, blocks: usize) -> Result<()> {
        if self.k1.len() != self.k2.len() {
            return Err(Error::Config(format!(
                "k1 has {} entries but k2 has {}",
                self.k1.len(),
                self.k2.len()
            )));
        }
        if self.k1.len() > blocks {
            return Err(Error::Config(format!(
                "expansion schedule covers {} blocks, model has {blocks}",
                self.k1.len()
            )));
        }
        if self.k1.iter().chain(&self.k2).any(|&k| k == 0) {
            return Err(Error::Config("expansion fan-outs must be ≥ 1".into()));
        }
        if self.k_min == 0 || self.k_out_max < self.k_min {
            return Err(Error::Config(format!(
                "need 1 ≤ k_min ≤ k_out_max (k_min={}, k_out_max={})",
                self.k_min, self.k_out_max
            )));
        }
        self.budget().validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub blocks: usize,
    pub layers_per_block: usize,
    pub heads: usize,
    pub channels: usize,
    pub scale: usize,
    /// Side of the dense local window (odd).
    pub window: usize,
    pub dilation_train: usize,
    pub dilation_infer: usize,
    pub schedule: ExpansionSchedule,
    pub ffn_ratio: usize,
    /// Restart every block from fresh local/global candidates instead of
    /// threading the previous block's output candidates.
    #[serde(default)]
    pub reset_candidates_per_block: bool,
}

impl ModelConfig {
    /// 8 blocks × 4 layers, 6 heads, 240 channels.
    pub fn classical(scale: usize) -> Self {
        Self {
            blocks: 8,
            layers_per_block: 4,
            heads: 6,
            channels: 240,
            scale,
            window: 7,
            dilation_train: 2,
            dilation_infer: 3,
            schedule: ExpansionSchedule::reference(),
            ffn_ratio: 2,
            reset_candidates_per_block: false,
        }
    }

    /// 8 blocks × 3 layers, 3 heads, 54 channels.
    pub fn light(scale: usize) -> Self {
        Self { layers_per_block: 3, heads: 3, channels: 54, ..Self::classical(scale) }
    }

    /// Desk-scale model used by the overfit and verification suites.
    pub fn toy() -> Self {
        Self {
            blocks: 2,
            layers_per_block: 2,
            heads: 2,
            channels: 16,
            scale: 2,
            window: 3,
            dilation_train: 2,
            dilation_infer: 2,
            schedule: ExpansionSchedule {
                k1: vec![22, 20],
                k2: vec![12, 11],
                keep_fraction: 0.5,
                k_min: 16,
                k_out_max: 64,
            },
            ffn_ratio: 2,
            reset_candidates_per_block: false,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.channels / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.blocks == 0 || self.layers_per_block == 0 {
            return fail("need at least one block and one layer".into());
        }
        if self.heads == 0 || self.channels == 0 || self.channels % self.heads != 0 {
            return fail(format!("{} channels not divisible into {} heads", self.channels, self.heads));
        }
        if !(2..=4).contains(&self.scale) {
            return fail(format!("scale must be 2, 3 or 4, got {}", self.scale));
        }
        if self.window == 0 || self.window % 2 == 0 {
            return fail(format!("window must be odd, got {}", self.window));
        }
        if self.dilation_train == 0 || self.dilation_infer == 0 {
            return fail("dilation must be ≥ 1".into());
        }
        if self.ffn_ratio == 0 {
            return fail("ffn ratio must be ≥ 1".into());
        }
        self.schedule.validate(self.blocks)
    }

    /// Candidate handling of layer `layer` in block `block`.
    pub fn plan(&self, block: usize, layer: usize) -> LayerPlan {
        let last = layer + 1 == self.layers_per_block;
        let expand = (last && block < self.schedule.k1.len()).then(|| ExpandStep {
            k1: self.schedule.k1[block],
            k2: self.schedule.k2[block],
            k_out_max: self.schedule.k_out_max,
        });
        LayerPlan { budget: self.schedule.budget(), expand }
    }

    /// Applies one `key = value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
            v.trim().parse().map_err(|_| Error::Config(format!("{key}: cannot parse {v:?}")))
        }
        fn list(key: &str, v: &str) -> Result<Vec<usize>> {
            if v.trim().is_empty() {
                return Ok(Vec::new());
            }
            v.split(',').map(|s| num(key, s)).collect()
        }
        match key {
            "blocks" => self.blocks = num(key, value)?,
            "layers" | "layers_per_block" => self.layers_per_block = num(key, value)?,
            "heads" => self.heads = num(key, value)?,
            "channels" => self.channels = num(key, value)?,
            "scale" => self.scale = num(key, value)?,
            "window" => self.window = num(key, value)?,
            "dilation_train" => self.dilation_train = num(key, value)?,
            "dilation_infer" => self.dilation_infer = num(key, value)?,
            "k1" => self.schedule.k1 = list(key, value)?,
            "k2" => self.schedule.k2 = list(key, value)?,
            "keep_fraction" => self.schedule.keep_fraction = num(key, value)?,
            "k_min" => self.schedule.k_min = num(key, value)?,
            "k_out_max" => self.schedule.k_out_max = num(key, value)?,
            "ffn_ratio" => self.ffn_ratio = num(key, value)?,
            "reset_candidates_per_block" => self.reset_candidates_per_block = num(key, value)?,
            _ => return Err(Error::Config(format!("unknown model key {key:?}"))),
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_are_valid() {
        ModelConfig::toy().validate().unwrap();
        ModelConfig::light(2).validate().unwrap();
        ModelConfig::classical(4).validate().unwrap();
    }

    #[test]
    fn expansion_only_in_last_layer_of_scheduled_blocks() {
        let cfg = ModelConfig::classical(2);
        for b in 0..8 {
            for l in 0..4 {
                let plan = cfg.plan(b, l);
                assert_eq!(plan.expand.is_some(), l == 3 && b < 4, "block {b} layer {l}");
            }
        }
        assert_eq!(cfg.plan(2, 3).expand.unwrap().k1, 14);
        assert_eq!(cfg.plan(2, 3).expand.unwrap().k2, 9);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut cfg = ModelConfig::toy();
        cfg.heads = 3;
        assert!(cfg.validate().is_err());
        let mut cfg = ModelConfig::toy();
        cfg.schedule.k1 = vec![1, 2, 3];
        cfg.schedule.k2 = vec![1, 2, 3];
        assert!(cfg.validate().is_err());
        let mut cfg = ModelConfig::toy();
        cfg.window = 4;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn key_value_settings() {
        let mut cfg = ModelConfig::toy();
        cfg.set("k1", "4,3").unwrap();
        cfg.set("keep_fraction", "0.25").unwrap();
        assert_eq!(cfg.schedule.k1, vec![4, 3]);
        assert_eq!(cfg.schedule.keep_fraction, 0.25);
        assert!(cfg.set("bogus", "1").is_err());
        assert!(cfg.set("blocks", "x").is_err());
    }
}
