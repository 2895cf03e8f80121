//! Flat `key = value` run configuration.
//!
//! ```text
//! # comments and blank lines are ignored
//! preset = toy          # toy | light | classical (applied first)
//! scale = 2
//! k1 = 22,20
//! seed = 7
//! learning_rate = 0.002
//! ```
//!
//! Model keys are those accepted by `ModelConfig::set`; the run keys are
//! `seed`, `steps`, `learning_rate` and `dilation`.

use std::path::Path;

use iet_core::model::ModelConfig;
use iet_core::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub seed: u64,
    pub steps: u64,
    pub learning_rate: f64,
    /// Inference dilation override.
    pub dilation: Option<usize>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self { model: ModelConfig::toy(), seed: 0, steps: 2000, learning_rate: 2e-3, dilation: None }
    }
}

fn preset(name: &str, scale: usize) -> Result<ModelConfig> {
    match name {
        "toy" => Ok(ModelConfig { scale, ..ModelConfig::toy() }),
        "light" => Ok(ModelConfig::light(scale)),
        "classical" => Ok(ModelConfig::classical(scale)),
        _ => Err(Error::Config(format!("unknown preset {name:?}"))),
    }
}

/// Parses `text`; `line_offset` errors carry the byte offset of the line.
pub fn parse(text: &str) -> Result<RunConfig> {
    let mut entries = Vec::new();
    let mut offset = 0;
    for line in text.split_inclusive('\n') {
        let body = line.split('#').next().unwrap_or("").trim();
        if !body.is_empty() {
            let Some((k, v)) = body.split_once('=') else {
                return Err(Error::Parse { offset, msg: format!("expected key = value, got {body:?}") });
            };
            entries.push((offset, k.trim().to_string(), v.trim().to_string()));
        }
        offset += line.len();
    }
    let mut cfg = RunConfig::default();
    let scale = entries.iter().find(|e| e.1 == "scale").map(|e| e.2.clone());
    if let Some((_, _, name)) = entries.iter().find(|e| e.1 == "preset") {
        let s = scale.as_deref().unwrap_or("2").parse().map_err(|_| Error::Config("scale: not a number".into()))?;
        cfg.model = preset(name, s)?;
    }
    for (at, key, value) in entries {
        let wrap = |e: Error| Error::Parse { offset: at, msg: e.to_string() };
        let num = |what: &str| Error::Parse { offset: at, msg: format!("{what}: cannot parse {value:?}") };
        match key.as_str() {
            "preset" => {}
            "seed" => cfg.seed = value.parse().map_err(|_| num("seed"))?,
            "steps" => cfg.steps = value.parse().map_err(|_| num("steps"))?,
            "learning_rate" => cfg.learning_rate = value.parse().map_err(|_| num("learning_rate"))?,
            "dilation" => cfg.dilation = Some(value.parse().map_err(|_| num("dilation"))?),
            _ => cfg.model.set(&key, &value).map_err(wrap)?,
        }
    }
    cfg.model.validate()?;
    Ok(cfg)
}

pub fn load(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse(&text)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn preset_then_overrides() {
        let cfg = parse("preset = light\nscale = 4 # x4\n\nheads=6\nseed = 3\n").unwrap();
        assert_eq!(cfg.model.channels, 54);
        assert_eq!(cfg.model.heads, 6);
        assert_eq!(cfg.model.scale, 4);
        assert_eq!(cfg.seed, 3);
    }

    #[test]
    fn errors_point_at_the_line() {
        match parse("seed = 1\nwindow\n") {
            Err(Error::Parse { offset, .. }) => assert_eq!(offset, 9),
            other => panic!("{other:?}"),
        }
        match parse("seed = 1\nbogus = 2\n") {
            Err(Error::Parse { offset, .. }) => assert_eq!(offset, 9),
            other => panic!("{other:?}"),
        }
        assert!(parse("window = 4").is_err());
    }
}
