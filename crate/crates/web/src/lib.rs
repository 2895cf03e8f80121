//! WebAssembly bindings for the demo page in `www/`.
//!
//! Images cross the boundary as RGBA bytes of size
//! `(rows·cell + 1) × (cols·cell + 1)`; statistics as JSON strings.

use serde_json::json;
use wasm_bindgen::prelude::*;

use iet_core::candidates::dlsg_init;
use iet_core::model::{forward, ForwardOptions, IetParams, LayerTrace, ModelConfig};
use iet_core::pipeline::{synthetic_texture, Image};
use iet_core::viz::{render, QueryView};
use iet_core::GridGeom;

fn rgba(img: &Image) -> Vec<u8> {
    img.to_u8().chunks(3).flat_map(|p| [p[0], p[1], p[2], 255]).collect()
}

pub fn overlay(height: usize, width: usize, window: usize, dilation: usize, row: usize, col: usize, cell: usize) -> Result<Vec<u8>, String> {
    let geom = GridGeom::new(height, width).map_err(|e| e.to_string())?;
    let set = dlsg_init(geom, window, dilation).map_err(|e| e.to_string())?;
    if row >= height || col >= width {
        return Err(format!("token ({row},{col}) is outside the grid"));
    }
    let view = QueryView { query: (row, col), candidates: set.row(geom.token(row, col)), added: &[], cell };
    render(geom, &view).map(|img| rgba(&img)).map_err(|e| e.to_string())
}

pub fn stats(height: usize, width: usize, window: usize, dilation: usize) -> Result<String, String> {
    let geom = GridGeom::new(height, width).map_err(|e| e.to_string())?;
    let set = dlsg_init(geom, window, dilation).map_err(|e| e.to_string())?;
    let n = geom.tokens();
    let out = json!({
        "tokens": n,
        "mean_len": set.mean_len(),
        "max_len": set.width(),
        "density": set.mean_len() / n as f64,
        "dense_pairs": n * n,
        "sparse_pairs": set.total(),
        "histogram": set.length_histogram(),
    });
    Ok(out.to_string())
}

/// Draws a DLSG candidate row for the token at `(row, col)`.
#[wasm_bindgen]
pub fn dlsg_overlay(height: usize, width: usize, window: usize, dilation: usize, row: usize, col: usize, cell: usize) -> Result<Vec<u8>, JsError> {
    overlay(height, width, window, dilation, row, col, cell).map_err(|e| JsError::new(&e))
}

/// Row-length statistics of a DLSG initialization as JSON.
#[wasm_bindgen]
pub fn dlsg_stats(height: usize, width: usize, window: usize, dilation: usize) -> Result<String, JsError> {
    stats(height, width, window, dilation).map_err(|e| JsError::new(&e))
}

/// A traced forward pass of a randomly initialized toy model over a
/// synthetic texture, for stepping through candidate sets layer by layer.
#[wasm_bindgen]
pub struct Explorer {
    geom: GridGeom,
    trace: Vec<LayerTrace>,
}

impl Explorer {
    pub fn build(size: usize, dilation: usize, keep_fraction: f64, seed: u64) -> Result<Explorer, String> {
        let mut cfg = ModelConfig::toy();
        cfg.blocks = 4;
        cfg.schedule.k1 = vec![8, 6, 4];
        cfg.schedule.k2 = vec![6, 5, 4];
        cfg.schedule.keep_fraction = keep_fraction;
        cfg.schedule.k_min = 8;
        cfg.schedule.k_out_max = 128;
        cfg.validate().map_err(|e| e.to_string())?;
        let params = IetParams::init(&cfg, seed).map_err(|e| e.to_string())?;
        let lr = synthetic_texture(size, size, seed).map_err(|e| e.to_string())?;
        let opts = ForwardOptions { trace: true, ..Default::default() };
        let out = forward(&cfg, &params, lr.pixels(), dilation, opts).map_err(|e| e.to_string())?;
        Ok(Explorer { geom: GridGeom::new(size, size).map_err(|e| e.to_string())?, trace: out.trace })
    }

    pub fn draw(&self, layer: usize, row: usize, col: usize, cell: usize) -> Result<Vec<u8>, String> {
        let t = self.trace.get(layer).ok_or_else(|| format!("no layer {layer}"))?;
        if row >= self.geom.height || col >= self.geom.width {
            return Err(format!("token ({row},{col}) is outside the grid"));
        }
        let q = self.geom.token(row, col);
        let kept = t.kept.row(q);
        let added: Vec<u32> = t.next.row(q).iter().copied().filter(|x| !kept.contains(x)).collect();
        let view = QueryView { query: (row, col), candidates: kept, added: &added, cell };
        render(self.geom, &view).map(|img| rgba(&img)).map_err(|e| e.to_string())
    }

    pub fn summary(&self, row: usize, col: usize) -> String {
        let q = self.geom.token(row.min(self.geom.height - 1), col.min(self.geom.width - 1));
        let layers: Vec<_> = self
            .trace
            .iter()
            .map(|t| {
                json!({
                    "block": t.block,
                    "layer": t.layer,
                    "input": t.input.len_of(q),
                    "kept": t.kept.len_of(q),
                    "next": t.next.len_of(q),
                    "expanded": t.expanded,
                    "mean_next": t.next.mean_len(),
                })
            })
            .collect();
        json!(layers).to_string()
    }
}

#[wasm_bindgen]
impl Explorer {
    #[wasm_bindgen(constructor)]
    pub fn new(size: usize, dilation: usize, keep_fraction: f64, seed: u32) -> Result<Explorer, JsError> {
        Self::build(size, dilation, keep_fraction, seed as u64).map_err(|e| JsError::new(&e))
    }

    #[wasm_bindgen(getter)]
    pub fn layers(&self) -> usize {
        self.trace.len()
    }

    /// RGBA image of the query's kept candidates (blue) and the ones added
    /// for the next layer (green).
    pub fn render(&self, layer: usize, row: usize, col: usize, cell: usize) -> Result<Vec<u8>, JsError> {
        self.draw(layer, row, col, cell).map_err(|e| JsError::new(&e))
    }

    /// Per-layer candidate counts for the query, as JSON.
    pub fn stats(&self, row: usize, col: usize) -> String {
        self.summary(row, col)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overlay_has_rgba_size() {
        let px = overlay(8, 10, 3, 2, 4, 4, 5).unwrap();
        assert_eq!(px.len(), (8 * 5 + 1) * (10 * 5 + 1) * 4);
        assert!(overlay(8, 10, 3, 2, 8, 0, 5).is_err());
        assert!(overlay(8, 10, 4, 2, 0, 0, 5).is_err());
    }

    #[test]
    fn full_coverage_stats() {
        let v: serde_json::Value = serde_json::from_str(&stats(6, 6, 3, 1).unwrap()).unwrap();
        assert_eq!(v["density"], 1.0);
    }

    #[test]
    fn explorer_layers_and_expansion() {
        let ex = Explorer::build(12, 2, 0.5, 1).unwrap();
        assert_eq!(ex.trace.len(), 8);
        let s: serde_json::Value = serde_json::from_str(&ex.summary(5, 5)).unwrap();
        let expanded: Vec<bool> = s.as_array().unwrap().iter().map(|l| l["expanded"].as_bool().unwrap()).collect();
        assert_eq!(expanded, [false, true, false, true, false, true, false, false]);
        assert_eq!(ex.draw(3, 5, 5, 4).unwrap().len(), (12 * 4 + 1) * (12 * 4 + 1) * 4);
    }
}
