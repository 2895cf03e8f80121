//! Per-token attention candidate sets.
//!
//! A [`CandidateSet`] is a ragged `N × k_max` index matrix: row `i` lists the
//! tokens that token `i` attends to. Rows start from a dense-local /
//! sparse-global pattern ([`dlsg_init`]), are pruned to their strongest
//! entries by [`sparsify`], and grow by promoting strong two-hop neighbours
//! in [`expand`].

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::numerics::{argmax, topk, Tensor};

/// Token grid; token `i` sits at row `i / width`, column `i % width`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridGeom {
    pub height: usize,
    pub width: usize,
}

impl GridGeom {
    pub fn new(height: usize, width: usize) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::Config(format!("empty grid {height}x{width}")));
        }
        Ok(Self { height, width })
    }

    pub fn tokens(&self) -> usize {
        self.height * self.width
    }

    pub fn coords(&self, token: usize) -> (usize, usize) {
        (token / self.width, token % self.width)
    }

    pub fn token(&self, row: usize, col: usize) -> usize {
        row * self.width + col
    }
}

/// Ragged candidate index matrix with sentinel padding.
///
/// Invariants: every row has `1 ≤ len ≤ width` distinct entries in
/// `[0, tokens)`; slots past the row length hold `tokens`.
#[derive(Clone, PartialEq, Eq)]
pub struct CandidateSet {
    tokens: usize,
    width: usize,
    indices: Vec<u32>,
    lengths: Vec<usize>,
}

impl std::fmt::Debug for CandidateSet {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("CandidateSet")
            .field("tokens", &self.tokens)
            .field("width", &self.width)
            .field("total", &self.total())
            .finish()
    }
}

impl CandidateSet {
    /// Builds a set from explicit rows. `width` defaults to the longest row.
    pub fn from_rows<R: AsRef<[u32]>>(tokens: usize, rows: &[R], width: Option<usize>) -> Result<Self> {
        if rows.len() != tokens {
            return Err(Error::shape(
                "CandidateSet::from_rows",
                format!("{} rows for {tokens} tokens", rows.len()),
            ));
        }
        let longest = rows.iter().map(|r| r.as_ref().len()).max().unwrap_or(0);
        let width = width.unwrap_or(longest);
        if width < longest {
            return Err(Error::shape(
                "CandidateSet::from_rows",
                format!("row of length {longest} exceeds width {width}"),
            ));
        }
        let sentinel = tokens as u32;
        let mut indices = vec![sentinel; tokens * width];
        let mut lengths = Vec::with_capacity(tokens);
        for (i, row) in rows.iter().enumerate() {
            let row = row.as_ref();
            indices[i * width..i * width + row.len()].copy_from_slice(row);
            lengths.push(row.len());
        }
        let set = Self { tokens, width, indices, lengths };
        set.validate()?;
        Ok(set)
    }

    /// Every token attends to every token, in index order.
    pub fn full(tokens: usize) -> Self {
        let row: Vec<u32> = (0..tokens as u32).collect();
        let rows = vec![row; tokens];
        Self::from_rows(tokens, &rows, None).expect("full set is valid")
    }

    pub fn tokens(&self) -> usize {
        self.tokens
    }

    /// Fixed row stride `k_max`.
    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pad_sentinel(&self) -> u32 {
        self.tokens as u32
    }

    pub fn lengths(&self) -> &[usize] {
        &self.lengths
    }

    pub fn len_of(&self, i: usize) -> usize {
        self.lengths[i]
    }

    /// Valid entries of row `i`.
    pub fn row(&self, i: usize) -> &[u32] {
        &self.indices[i * self.width..i * self.width + self.lengths[i]]
    }

    /// Row `i` including sentinel padding.
    pub fn padded_row(&self, i: usize) -> &[u32] {
        &self.indices[i * self.width..(i + 1) * self.width]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[u32]> + '_ {
        (0..self.tokens).map(|i| self.row(i))
    }

    /// Σ row lengths.
    pub fn total(&self) -> usize {
        self.lengths.iter().sum()
    }

    pub fn mean_len(&self) -> f64 {
        self.total() as f64 / self.tokens.max(1) as f64
    }

    pub fn validate(&self) -> Result<()> {
        let sentinel = self.pad_sentinel();
        let mut stamp = vec![usize::MAX; self.tokens];
        for i in 0..self.tokens {
            let len = self.lengths[i];
            if len == 0 {
                return Err(Error::Config(format!("candidate row {i} is empty")));
            }
            if len > self.width {
                return Err(Error::Config(format!("candidate row {i} overflows width")));
            }
            for &j in self.row(i) {
                let ju = j as usize;
                if ju >= self.tokens {
                    return Err(Error::CorruptCandidate { row: i, index: ju, tokens: self.tokens });
                }
                if stamp[ju] == i {
                    return Err(Error::Config(format!("candidate row {i} repeats token {j}")));
                }
                stamp[ju] = i;
            }
            if self.padded_row(i)[len..].iter().any(|&v| v != sentinel) {
                return Err(Error::Config(format!("candidate row {i} has unpadded tail")));
            }
        }
        Ok(())
    }

    /// Line-oriented dump: a magic line, `tokens N width K`, then one line
    /// per row holding its length followed by its indices.
    pub fn to_text(&self) -> String {
        let mut s = String::with_capacity(self.total() * 5 + 64);
        s.push_str("IEA-CANDIDATES 1\n");
        let _ = writeln!(s, "tokens {} width {}", self.tokens, self.width);
        for row in self.rows() {
            let _ = write!(s, "{}", row.len());
            for j in row {
                let _ = write!(s, " {j}");
            }
            s.push('\n');
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = LineCursor::new(text);
        let (off, magic) = lines.next_line()?;
        if magic.trim() != "IEA-CANDIDATES 1" {
            return Err(Error::Parse { offset: off, msg: "missing IEA-CANDIDATES 1 header".into() });
        }
        let (off, header) = lines.next_line()?;
        let fields: Vec<&str> = header.split_whitespace().collect();
        let (tokens, width) = match fields.as_slice() {
            ["tokens", n, "width", k] => (
                n.parse::<usize>().map_err(|e| Error::Parse { offset: off, msg: e.to_string() })?,
                k.parse::<usize>().map_err(|e| Error::Parse { offset: off, msg: e.to_string() })?,
            ),
            _ => return Err(Error::Parse { offset: off, msg: "expected `tokens N width K`".into() }),
        };
        let mut rows = Vec::with_capacity(tokens);
        for _ in 0..tokens {
            let (off, line) = lines.next_line()?;
            let mut nums = line.split_whitespace().map(|t| {
                t.parse::<u32>().map_err(|e| Error::Parse { offset: off, msg: format!("{t:?}: {e}") })
            });
            let len = nums
                .next()
                .ok_or_else(|| Error::Parse { offset: off, msg: "empty row".into() })??
                as usize;
            let row = nums.collect::<Result<Vec<u32>>>()?;
            if row.len() != len {
                return Err(Error::Parse {
                    offset: off,
                    msg: format!("row declares {len} entries, holds {}", row.len()),
                });
            }
            rows.push(row);
        }
        Self::from_rows(tokens, &rows, Some(width))
    }

    /// SHA-256 of the text dump, hex encoded.
    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(self.to_text().as_bytes()))
    }

    /// Histogram of row lengths as `(length, count)` pairs in ascending length.
    pub fn length_histogram(&self) -> Vec<(usize, usize)> {
        let mut counts = std::collections::BTreeMap::new();
        for &l in &self.lengths {
            *counts.entry(l).or_insert(0usize) += 1;
        }
        counts.into_iter().collect()
    }
}

struct LineCursor<'a> {
    text: &'a str,
    offset: usize,
}

impl<'a> LineCursor<'a> {
    fn new(text: &'a str) -> Self {
        Self { text, offset: 0 }
    }

    fn next_line(&mut self) -> Result<(usize, &'a str)> {
        if self.offset >= self.text.len() {
            return Err(Error::Parse { offset: self.offset, msg: "unexpected end of input".into() });
        }
        let rest = &self.text[self.offset..];
        let end = rest.find('\n').unwrap_or(rest.len());
        let start = self.offset;
        self.offset += end + 1;
        Ok((start, &rest[..end]))
    }
}

/// Dense-local / sparse-global initial candidates.
///
/// Row `i` holds the `window × window` block around token `i` (shifted inward
/// at the borders so it always has `window²` tokens, listed row-major),
/// followed by one sample per `dilation × dilation` cell of the grid — the
/// token at offset `(⌊d/2⌋, ⌊d/2⌋)` inside the cell, clamped to the grid —
/// skipping samples already inside the window.
pub fn dlsg_init(geom: GridGeom, window: usize, dilation: usize) -> Result<CandidateSet> {
    if window == 0 || window % 2 == 0 {
        return Err(Error::Config(format!("window must be odd and positive, got {window}")));
    }
    if dilation == 0 {
        return Err(Error::Config("dilation must be at least 1".into()));
    }
    if window > geom.height.min(geom.width) {
        return Err(Error::Config(format!(
            "window {window} exceeds grid {}x{}",
            geom.height, geom.width
        )));
    }
    let half = window / 2;
    let anchor = |cell: usize, extent: usize| (cell * dilation + dilation / 2).min(extent - 1);
    let anchor_rows: Vec<usize> = (0..geom.height.div_ceil(dilation)).map(|a| anchor(a, geom.height)).collect();
    let anchor_cols: Vec<usize> = (0..geom.width.div_ceil(dilation)).map(|b| anchor(b, geom.width)).collect();

    let rows: Vec<Vec<u32>> = (0..geom.tokens())
        .map(|i| {
            let (r, c) = geom.coords(i);
            let r0 = r.saturating_sub(half).min(geom.height - window);
            let c0 = c.saturating_sub(half).min(geom.width - window);
            let in_window = |rr: usize, cc: usize| (r0..r0 + window).contains(&rr) && (c0..c0 + window).contains(&cc);
            let mut row = Vec::with_capacity(window * window + anchor_rows.len() * anchor_cols.len());
            for rr in r0..r0 + window {
                for cc in c0..c0 + window {
                    row.push(geom.token(rr, cc) as u32);
                }
            }
            for &ar in &anchor_rows {
                for &ac in &anchor_cols {
                    if !in_window(ar, ac) {
                        row.push(geom.token(ar, ac) as u32);
                    }
                }
            }
            row
        })
        .collect();
    CandidateSet::from_rows(geom.tokens(), &rows, None)
}

/// How many candidates a row keeps after sparsification.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum SparsifyBudget {
    /// Keep `min(k, len)`.
    Fixed(usize),
    /// Keep `min(len, max(floor, ⌈keep·len⌉))`.
    Fraction { keep: f64, floor: usize },
}

impl SparsifyBudget {
    pub fn for_len(&self, len: usize) -> usize {
        let k = match *self {
            SparsifyBudget::Fixed(k) => k,
            SparsifyBudget::Fraction { keep, floor } => floor.max((keep * len as f64).ceil() as usize),
        };
        k.clamp(1, len.max(1))
    }

    /// A budget that never prunes.
    pub fn keep_all() -> Self {
        SparsifyBudget::Fraction { keep: 1.0, floor: 1 }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            SparsifyBudget::Fixed(0) => Err(Error::Config("sparsify budget must be ≥ 1".into())),
            SparsifyBudget::Fraction { keep, floor } if !(keep > 0.0 && keep <= 1.0) || floor == 0 => {
                Err(Error::Config(format!("keep fraction {keep} / floor {floor} out of range")))
            }
            _ => Ok(()),
        }
    }
}

/// Survivors of [`sparsify`].
#[derive(Debug, Clone)]
pub struct Sparsified {
    /// `I_s`: surviving token indices in top-k order.
    pub candidates: CandidateSet,
    /// `A_s`: the (not renormalized) scores of the survivors, zero padded.
    pub scores: Tensor,
    /// For each survivor, its slot in the input row.
    pub slots: Vec<Vec<u32>>,
}

fn expect_aligned(op: &'static str, scores: &Tensor, cands: &CandidateSet) -> Result<()> {
    scores.expect_shape(op, &[cands.tokens(), cands.width()])
}

/// Keeps each row's highest-scoring candidates.
pub fn sparsify(scores: &Tensor, cands: &CandidateSet, budget: SparsifyBudget) -> Result<Sparsified> {
    expect_aligned("sparsify", scores, cands)?;
    budget.validate()?;
    let n = cands.tokens();
    let mut rows = Vec::with_capacity(n);
    let mut slots = Vec::with_capacity(n);
    for i in 0..n {
        let len = cands.len_of(i);
        let keep = topk(&scores.row(i)[..len], budget.for_len(len));
        let row_idx = cands.row(i);
        rows.push(keep.iter().map(|&p| row_idx[p]).collect::<Vec<u32>>());
        slots.push(keep.iter().map(|&p| p as u32).collect::<Vec<u32>>());
    }
    let candidates = CandidateSet::from_rows(n, &rows, None)?;
    let width = candidates.width();
    let mut kept = Tensor::zeros(&[n, width]);
    for i in 0..n {
        let src = scores.row(i);
        for (o, &p) in kept.row_mut(i).iter_mut().zip(&slots[i]) {
            *o = src[p as usize];
        }
    }
    Ok(Sparsified { candidates, scores: kept, slots })
}

/// Two-hop expansion with first-occurrence deduplication.
///
/// Row `i` keeps its existing candidates in place, then appends, for each of
/// its `k1` best-scored candidates `u` in rank order, the `k2` best-scored
/// candidates of `u` that are not yet present. Appended entries beyond
/// `k_out_max` are dropped; the original prefix is never truncated.
pub fn expand(scores: &Tensor, cands: &CandidateSet, k1: usize, k2: usize, k_out_max: usize) -> Result<CandidateSet> {
    expect_aligned("expand", scores, cands)?;
    let n = cands.tokens();
    if k1 == 0 || k2 == 0 {
        return Ok(cands.clone());
    }
    let best = |u: usize, k: usize| -> Vec<u32> {
        let row = cands.row(u);
        topk(&scores.row(u)[..row.len()], k).into_iter().map(|p| row[p]).collect()
    };
    let second: Vec<Vec<u32>> = (0..n).map(|u| best(u, k2)).collect();

    let mut stamp = vec![usize::MAX; n];
    let mut rows = Vec::with_capacity(n);
    for i in 0..n {
        let base = cands.row(i);
        let cap = k_out_max.max(base.len());
        let mut row = base.to_vec();
        for &t in base {
            stamp[t as usize] = i;
        }
        'outer: for u in best(i, k1) {
            for &t in &second[u as usize] {
                if row.len() >= cap {
                    break 'outer;
                }
                if stamp[t as usize] != i {
                    stamp[t as usize] = i;
                    row.push(t);
                }
            }
        }
        rows.push(row);
    }
    let width = rows.iter().map(Vec::len).max().unwrap_or(1).max(k_out_max.min(n));
    CandidateSet::from_rows(n, &rows, Some(width))
}

/// Each token's most similar candidate other than itself (itself only when
/// it is its sole candidate). Ties go to the earlier slot.
pub fn highest_neighbor(scores: &Tensor, cands: &CandidateSet) -> Result<Vec<u32>> {
    expect_aligned("highest_neighbor", scores, cands)?;
    Ok((0..cands.tokens())
        .map(|i| {
            let row = cands.row(i);
            let masked: Vec<f64> = row
                .iter()
                .zip(scores.row(i))
                .map(|(&t, &s)| if t as usize == i { f64::NEG_INFINITY } else { s })
                .collect();
            match argmax(&masked) {
                Some(p) if row[p] as usize != i => row[p],
                _ => i as u32,
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use std::collections::BTreeSet;

    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn set(row: &[u32]) -> BTreeSet<u32> {
        row.iter().copied().collect()
    }

    #[test]
    fn dlsg_small_grid_by_hand() {
        let geom = GridGeom::new(4, 4).unwrap();
        let c = dlsg_init(geom, 3, 4).unwrap();
        // token 0: window rows 0..3 cols 0..3 already contains the single anchor (2,2)=10
        assert_eq!(c.row(0), &[0, 1, 2, 4, 5, 6, 8, 9, 10]);
        // token 15: window rows 1..4 cols 1..4 also contains 10
        assert_eq!(set(c.row(15)), set(&[5, 6, 7, 9, 10, 11, 13, 14, 15]));
        c.validate().unwrap();
    }

    #[test]
    fn dlsg_dilation_one_is_full() {
        let geom = GridGeom::new(5, 7).unwrap();
        let c = dlsg_init(geom, 3, 1).unwrap();
        assert!(c.lengths().iter().all(|&l| l == 35));
        let c = dlsg_init(GridGeom::new(5, 5).unwrap(), 5, 3).unwrap();
        assert!(c.lengths().iter().all(|&l| l == 25));
    }

    #[test]
    fn dlsg_rejects_bad_windows() {
        let geom = GridGeom::new(4, 6).unwrap();
        assert!(matches!(dlsg_init(geom, 2, 2), Err(Error::Config(_))));
        assert!(matches!(dlsg_init(geom, 5, 2), Err(Error::Config(_))));
        assert!(matches!(dlsg_init(geom, 3, 0), Err(Error::Config(_))));
    }

    #[test]
    fn sparsify_keeps_top_scores() {
        let cands = CandidateSet::from_rows(10, &vec![vec![7u32, 2, 9]; 10], None).unwrap();
        let scores = Tensor::from_fn(&[10, 3], |i| [0.5, 0.3, 0.2][i % 3]);
        let s = sparsify(&scores, &cands, SparsifyBudget::Fixed(2)).unwrap();
        assert_eq!(s.candidates.row(0), &[7, 2]);
        assert_eq!(s.scores.row(0), &[0.5, 0.3]);
    }

    #[test]
    fn sparsify_large_budget_only_reorders() {
        let cands = CandidateSet::from_rows(3, &[vec![0u32, 1, 2], vec![1, 2], vec![2]], None).unwrap();
        let scores = Tensor::new(&[3, 3], vec![0.1, 0.7, 0.2, 0.4, 0.6, 0.0, 1.0, 0.0, 0.0]).unwrap();
        let s = sparsify(&scores, &cands, SparsifyBudget::Fixed(10)).unwrap();
        assert_eq!(s.candidates.row(0), &[1, 2, 0]);
        assert_eq!(s.candidates.row(1), &[2, 1]);
        assert_eq!(s.candidates.row(2), &[2]);
    }

    #[test]
    fn expand_chain_reaches_two_hops() {
        // A=0, B=1, C=2
        let cands = CandidateSet::from_rows(3, &[vec![0u32, 1], vec![1, 2], vec![2]], None).unwrap();
        let scores = Tensor::new(&[3, 2], vec![0.4, 0.6, 0.5, 0.5, 1.0, 0.0]).unwrap();
        let out = expand(&scores, &cands, 1, 2, 8).unwrap();
        assert_eq!(out.row(0), &[0, 1, 2]);
        assert_eq!(out.row(1), &[1, 2]);
        assert_eq!(out.row(2), &[2]);
    }

    #[test]
    fn expand_disabled_or_saturated_is_identity() {
        let cands = CandidateSet::full(4);
        let scores = Tensor::full(&[4, 4], 0.25);
        assert_eq!(expand(&scores, &cands, 0, 3, 8).unwrap().row(2), cands.row(2));
        assert_eq!(expand(&scores, &cands, 2, 3, 8).unwrap().rows().collect::<Vec<_>>(),
                   cands.rows().collect::<Vec<_>>());
    }

    #[test]
    fn expand_cap_truncates_only_the_tail() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let n = 40;
        let rows: Vec<Vec<u32>> = (0..n)
            .map(|i| {
                let mut r = vec![i as u32];
                while r.len() < 6 {
                    let t = rng.random_range(0..n as u32);
                    if !r.contains(&t) {
                        r.push(t);
                    }
                }
                r
            })
            .collect();
        let cands = CandidateSet::from_rows(n, &rows, None).unwrap();
        let scores = Tensor::uniform(&[n, 6], 0.0, 1.0, &mut rng);
        let out = expand(&scores, &cands, 4, 4, 9).unwrap();
        for i in 0..n {
            assert_eq!(&out.row(i)[..6], cands.row(i));
            assert!(out.len_of(i) <= 9);
        }
    }

    #[test]
    fn highest_neighbor_rules() {
        let cands = CandidateSet::from_rows(
            10,
            &(0..10u32).map(|i| if i == 5 { vec![3, 8] } else { vec![i] }).collect::<Vec<_>>(),
            None,
        )
        .unwrap();
        let scores = Tensor::from_fn(&[10, 2], |i| if i == 10 { 0.2 } else if i == 11 { 0.7 } else { 1.0 });
        let h = highest_neighbor(&scores, &cands).unwrap();
        assert_eq!(h[5], 8);
        assert_eq!(h[0], 0);
    }

    #[test]
    fn text_dump_round_trip_and_errors() {
        let c = dlsg_init(GridGeom::new(6, 6).unwrap(), 3, 2).unwrap();
        let back = CandidateSet::from_text(&c.to_text()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.digest(), c.digest());

        let bad = "IEA-CANDIDATES 1\ntokens 2 width 2\n1 0\n2 1 x\n";
        match CandidateSet::from_text(bad) {
            Err(Error::Parse { offset, .. }) => assert_eq!(offset, bad.find("2 1 x").unwrap()),
            other => panic!("{other:?}"),
        }
        assert!(CandidateSet::from_text("IEA-CANDIDATES 1\ntokens 1 width 1\n1 3\n").is_err());
    }

    #[test]
    fn from_rows_rejects_duplicates_and_empty_rows() {
        assert!(CandidateSet::from_rows(2, &[vec![0u32, 0], vec![1]], None).is_err());
        assert!(CandidateSet::from_rows(2, &[vec![0u32], vec![]], None).is_err());
    }
}
