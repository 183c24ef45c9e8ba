//! Rotary position tables for 1D (flattened) and 2D (row/column) grids.
//!
//! Dimension pairs use the half-split layout: within a head of width `hd`,
//! dimension `i` is rotated together with dimension `i + hd/2`. In 2D mode
//! the `hd/2` pairs alternate between the row axis (even pairs) and the
//! column axis (odd pairs); each axis has an effective rotary width of
//! `hd/2`, so its frequencies match 1D RoPE at half the head width.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DEFAULT_ROPE_BASE: f64 = 10_000.0;

/// How dimension pairs are laid out inside a head.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PairLayout {
    /// `(i, i + hd/2)`.
    HalfSplit,
}

pub const PAIR_LAYOUT: PairLayout = PairLayout::HalfSplit;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RotaryMode {
    /// Flattened token index `row·grid_w + col`.
    Flat,
    /// Independent row and column phases.
    Axial,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RotaryTable {
    mode: RotaryMode,
    grid_h: usize,
    grid_w: usize,
    head_dim: usize,
    base: f64,
    /// `[grid_h·grid_w][head_dim/2]`
    cos: Vec<f64>,
    sin: Vec<f64>,
}

impl RotaryTable {
    pub fn build(
        mode: RotaryMode,
        grid_h: usize,
        grid_w: usize,
        head_dim: usize,
        base: f64,
    ) -> Result<Self> {
        let quantum = match mode {
            RotaryMode::Flat => 2,
            RotaryMode::Axial => 4,
        };
        if head_dim == 0 || !head_dim.is_multiple_of(quantum) {
            return Err(Error::Rotary(format!(
                "head_dim {head_dim} must be a positive multiple of {quantum} for {mode:?} rotary"
            )));
        }
        if grid_h == 0 || grid_w == 0 {
            return Err(Error::Rotary("empty position grid".into()));
        }
        if !(base.is_finite() && base > 1.0) {
            return Err(Error::Rotary(format!("rotary base {base} must exceed 1")));
        }
        let pairs = head_dim / 2;
        let mut cos = Vec::with_capacity(grid_h * grid_w * pairs);
        let mut sin = Vec::with_capacity(grid_h * grid_w * pairs);
        for r in 0..grid_h {
            for c in 0..grid_w {
                for i in 0..pairs {
                    let theta = pair_angle(mode, r, c, grid_w, i, head_dim, base);
                    cos.push(theta.cos());
                    sin.push(theta.sin());
                }
            }
        }
        Ok(Self {
            mode,
            grid_h,
            grid_w,
            head_dim,
            base,
            cos,
            sin,
        })
    }

    pub fn mode(&self) -> RotaryMode {
        self.mode
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.grid_h, self.grid_w)
    }

    pub fn head_dim(&self) -> usize {
        self.head_dim
    }

    pub fn base(&self) -> f64 {
        self.base
    }

    pub fn pairs(&self) -> usize {
        self.head_dim / 2
    }

    pub fn len(&self) -> usize {
        self.grid_h * self.grid_w
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `(cos, sin)` pairs for one grid position.
    pub fn entry(&self, row: usize, col: usize) -> Result<(&[f64], &[f64])> {
        let p = self.slot(row, col)?;
        let n = self.pairs();
        Ok((&self.cos[p * n..(p + 1) * n], &self.sin[p * n..(p + 1) * n]))
    }

    fn slot(&self, row: usize, col: usize) -> Result<usize> {
        if row >= self.grid_h || col >= self.grid_w {
            return Err(Error::Rotary(format!(
                "position ({row}, {col}) outside {}×{} table",
                self.grid_h, self.grid_w
            )));
        }
        Ok(row * self.grid_w + col)
    }
}

/// Rotation angle for dimension pair `i` at grid position `(r, c)`.
pub fn pair_angle(
    mode: RotaryMode,
    r: usize,
    c: usize,
    grid_w: usize,
    i: usize,
    head_dim: usize,
    base: f64,
) -> f64 {
    match mode {
        RotaryMode::Flat => {
            let p = (r * grid_w + c) as f64;
            p * base.powf(-2.0 * i as f64 / head_dim as f64)
        }
        RotaryMode::Axial => {
            let axis_dim = (head_dim / 2) as f64;
            let j = (i / 2) as f64;
            let pos = if i.is_multiple_of(2) { r } else { c } as f64;
            pos * base.powf(-2.0 * j / axis_dim)
        }
    }
}

/// Builds a table for the grid; `head_dim` must split into pairs per axis.
pub fn build_rotary_table(
    grid_h: usize,
    grid_w: usize,
    head_dim: usize,
    base: f64,
    mode: RotaryMode,
) -> Result<RotaryTable> {
    RotaryTable::build(mode, grid_h, grid_w, head_dim, base)
}

/// Rotates `x[tokens × heads × head_dim]` by each token's position.
pub fn apply_rope(x: &Tensor, table: &RotaryTable, positions: &[(usize, usize)]) -> Result<Tensor> {
    let s = x.shape();
    if s.len() != 3 || s[2] != table.head_dim {
        return Err(Error::shape("apply_rope", s, &[positions.len(), 0, table.head_dim]));
    }
    if s[0] != positions.len() {
        return Err(Error::shape("apply_rope", s, &[positions.len()]));
    }
    let mut out = x.clone();
    rotate_rows(out.data_mut(), table, positions, s[1], false)?;
    Ok(out)
}

/// In-place rotation of row-major `[B·T × heads·head_dim]` data where row
/// `r` sits at `positions[r % T]`. `inverse` rotates by the negated angle,
/// which is also the transpose used by backward.
pub(crate) fn rotate_rows(
    data: &mut [f64],
    table: &RotaryTable,
    positions: &[(usize, usize)],
    heads: usize,
    inverse: bool,
) -> Result<()> {
    let hd = table.head_dim;
    let width = heads * hd;
    let t = positions.len();
    if t == 0 || width == 0 || !data.len().is_multiple_of(width * t) {
        return Err(Error::Rotary(format!(
            "{} values do not tile {t} positions × {heads} heads × {hd}",
            data.len()
        )));
    }
    let slots = positions
        .iter()
        .map(|&(r, c)| table.slot(r, c))
        .collect::<Result<Vec<_>>>()?;
    let half = hd / 2;
    let sign = if inverse { -1.0 } else { 1.0 };
    for (row_idx, row) in data.chunks_mut(width).enumerate() {
        let p = slots[row_idx % t];
        let cos = &table.cos[p * half..(p + 1) * half];
        let sin = &table.sin[p * half..(p + 1) * half];
        for head in row.chunks_mut(hd) {
            let (lo, hi) = head.split_at_mut(half);
            for i in 0..half {
                let (a, b) = (lo[i], hi[i]);
                let s = sign * sin[i];
                lo[i] = a * cos[i] - b * s;
                hi[i] = a * s + b * cos[i];
            }
        }
    }
    Ok(())
}

/// Row-major grid positions `(r, c)` for an `h × w` grid.
pub fn grid_positions(h: usize, w: usize) -> Vec<(usize, usize)> {
    (0..h).flat_map(|r| (0..w).map(move |c| (r, c))).collect()
}
