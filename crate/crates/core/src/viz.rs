//! Raster views of a query token's candidates on the token grid.

use crate::candidates::GridGeom;
use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::pipeline::Image;

pub const BACKGROUND: [f64; 3] = [0.12, 0.12, 0.14];
pub const GRID_LINE: [f64; 3] = [0.2, 0.2, 0.22];
pub const CANDIDATE: [f64; 3] = [0.2, 0.55, 1.0];
pub const ADDED: [f64; 3] = [0.25, 0.85, 0.35];
pub const QUERY: [f64; 3] = [0.95, 0.2, 0.2];
pub const WINDOW: [f64; 3] = [1.0, 0.85, 0.1];

/// Side of the reference window drawn around the query.
pub const REFERENCE_WINDOW: usize = 32;

/// What to draw for one query.
#[derive(Debug, Clone, Copy)]
pub struct QueryView<'a> {
    pub query: (usize, usize),
    /// Candidates drawn in blue.
    pub candidates: &'a [u32],
    /// Extra candidates drawn in green (e.g. added by expansion).
    pub added: &'a [u32],
    /// Pixels per token, including a one pixel grid line.
    pub cell: usize,
}

/// Token-grid origin `(top, left)` of the reference window: centred on the
/// query and shifted inward at the borders.
pub fn reference_window(geom: GridGeom, query: (usize, usize)) -> (usize, usize, usize, usize) {
    let span_h = REFERENCE_WINDOW.min(geom.height);
    let span_w = REFERENCE_WINDOW.min(geom.width);
    let top = query.0.saturating_sub(span_h / 2).min(geom.height - span_h);
    let left = query.1.saturating_sub(span_w / 2).min(geom.width - span_w);
    (top, left, span_h, span_w)
}

pub fn render(geom: GridGeom, view: &QueryView) -> Result<Image> {
    let (qr, qc) = view.query;
    if qr >= geom.height || qc >= geom.width {
        return Err(Error::Usage(format!("query ({qr},{qc}) outside {}x{} grid", geom.height, geom.width)));
    }
    let cell = view.cell.max(2);
    let n = geom.tokens();
    let mut colour = vec![BACKGROUND; n];
    for (list, c) in [(view.added, ADDED), (view.candidates, CANDIDATE)] {
        for &t in list {
            let t = t as usize;
            if t >= n {
                return Err(Error::CorruptCandidate { row: geom.token(qr, qc), index: t, tokens: n });
            }
            colour[t] = c;
        }
    }
    colour[geom.token(qr, qc)] = QUERY;

    let (h, w) = (geom.height * cell + 1, geom.width * cell + 1);
    let mut px = vec![GRID_LINE; h * w];
    for t in 0..n {
        let (r, c) = geom.coords(t);
        for y in r * cell + 1..(r + 1) * cell {
            for x in c * cell + 1..(c + 1) * cell {
                px[y * w + x] = colour[t];
            }
        }
    }
    let (top, left, sh, sw) = reference_window(geom, view.query);
    let (y0, y1, x0, x1) = (top * cell, (top + sh) * cell, left * cell, (left + sw) * cell);
    for x in x0..=x1 {
        px[y0 * w + x] = WINDOW;
        px[y1 * w + x] = WINDOW;
    }
    for y in y0..=y1 {
        px[y * w + x0] = WINDOW;
        px[y * w + x1] = WINDOW;
    }
    Image::new(Tensor::new(&[h, w, 3], px.concat())?)
}

/// Centre pixel of token `t` in an image made by [`render`].
pub fn token_centre(geom: GridGeom, cell: usize, t: usize) -> (usize, usize) {
    let (r, c) = geom.coords(t);
    let cell = cell.max(2);
    (r * cell + cell / 2 + cell % 2, c * cell + cell / 2 + cell % 2)
}
