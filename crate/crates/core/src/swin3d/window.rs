//! Window geometry: partition, cyclic shift, and the shifted-window mask.
//!
//! All maps are plain index tables so the same geometry drives both the
//! eager tensor helpers here and the gathers recorded on a tape.

use std::sync::Arc;

use crate::diffops::PAD;
use crate::error::{shape_err, Error, Result};
use crate::tensor::{Real, Tensor};

/// Additive logit bias for masked attention pairs.
pub const NEG_LARGE: f64 = 1e4;

/// A token grid: `values` is `[h·w·d, feat]`, tokens ordered z, y, x with x fastest.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenGrid<T> {
    pub grid: [usize; 3],
    pub values: Tensor<T>,
}

impl<T: Real> TokenGrid<T> {
    pub fn new(grid: [usize; 3], values: Tensor<T>) -> Result<Self> {
        let n = grid.iter().product::<usize>();
        if grid.contains(&0) || values.rank() != 2 || values.dims()[0] != n {
            return shape_err(format!("token grid {grid:?} with values {:?}", values.dims()));
        }
        Ok(Self { grid, values })
    }

    pub fn feat(&self) -> usize {
        self.values.dims()[1]
    }

    pub fn n_tokens(&self) -> usize {
        self.values.dims()[0]
    }
}

pub(crate) fn token_index(grid: [usize; 3], z: usize, y: usize, x: usize) -> usize {
    (z * grid[1] + y) * grid[2] + x
}

/// Widen a per-row index table to per-element indices over `f` features.
pub(crate) fn expand(rows: &[usize], f: usize) -> Arc<[usize]> {
    rows.iter().flat_map(|&r| (0..f).map(move |j| if r == PAD { PAD } else { r * f + j })).collect()
}

/// Copy rows of a `[n, f]` tensor by index, zero for [`PAD`].
pub(crate) fn gather_rows<T: Real>(values: &Tensor<T>, rows: &[usize], dims: &[usize]) -> Result<Tensor<T>> {
    let f = values.last_dim();
    let src = values.data();
    let mut out = Vec::with_capacity(rows.len() * f);
    for &r in rows {
        if r == PAD {
            out.extend(std::iter::repeat(T::zero()).take(f));
        } else {
            out.extend_from_slice(&src[r * f..(r + 1) * f]);
        }
    }
    Tensor::new(dims.to_vec(), out)
}

/// Grid extents and window size of a partition, for undoing it.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PadRecord {
    pub grid: [usize; 3],
    pub padded: [usize; 3],
    pub window: usize,
}

/// Partition of a (padded, optionally rolled) token grid into `M³` windows.
///
/// Slot `s = window·M³ + t` sits at post-shift padded position `q`; it holds
/// the token at pre-shift position `(q + shift) mod padded`, or nothing when
/// that position is padding. Windows are ordered z, y, x like tokens.
#[derive(Clone, Debug)]
pub struct WindowPlan {
    pub record: PadRecord,
    pub shift: [usize; 3],
    counts: [usize; 3],
    slots: Vec<usize>,
    inverse: Vec<usize>,
}

impl WindowPlan {
    pub fn new(grid: [usize; 3], window: usize, shift: [usize; 3]) -> Result<Self> {
        if window == 0 || grid.contains(&0) {
            return shape_err(format!("window {window} over grid {grid:?}"));
        }
        let counts = grid.map(|g| g.div_ceil(window));
        let padded = counts.map(|c| c * window);
        let t = window.pow(3);
        let n_win = counts.iter().product::<usize>();
        let mut slots = vec![PAD; n_win * t];
        let mut inverse = vec![PAD; grid.iter().product()];
        for (s, slot) in slots.iter_mut().enumerate() {
            let q = slot_position(s, counts, window);
            let r: [usize; 3] = std::array::from_fn(|a| (q[a] + shift[a]) % padded[a]);
            if (0..3).all(|a| r[a] < grid[a]) {
                let tok = token_index(grid, r[0], r[1], r[2]);
                *slot = tok;
                inverse[tok] = s;
            }
        }
        Ok(Self { record: PadRecord { grid, padded, window }, shift, counts, slots, inverse })
    }

    pub fn n_windows(&self) -> usize {
        self.counts.iter().product()
    }

    pub fn window_tokens(&self) -> usize {
        self.record.window.pow(3)
    }

    /// Token index per slot, [`PAD`] for padding.
    pub fn slots(&self) -> &[usize] {
        &self.slots
    }

    /// Slot per token.
    pub fn inverse(&self) -> &[usize] {
        &self.inverse
    }

    pub fn has_padding(&self) -> bool {
        self.record.grid != self.record.padded
    }

    /// Region id (0..27) of every slot's post-shift position.
    fn region_labels(&self) -> Vec<u8> {
        let PadRecord { padded, window, .. } = self.record;
        (0..self.slots.len())
            .map(|s| {
                let q = slot_position(s, self.counts, window);
                (0..3).fold(0u8, |acc, a| acc * 3 + axis_region(q[a], padded[a], window, self.shift[a]))
            })
            .collect()
    }

    /// Pairs from different pre-shift regions.
    pub fn shift_mask(&self) -> WindowMask {
        let labels = self.region_labels();
        WindowMask::from_fn(self.n_windows(), self.window_tokens(), |i, j| labels[i] != labels[j])
    }

    /// Mask applied inside the encoder: cross-region pairs plus any pair
    /// touching a padded slot. `None` when nothing is blocked.
    pub fn attention_mask(&self) -> Option<WindowMask> {
        let shifted = self.shift != [0; 3];
        if !shifted && !self.has_padding() {
            return None;
        }
        let labels = self.region_labels();
        let slots = &self.slots;
        Some(WindowMask::from_fn(self.n_windows(), self.window_tokens(), |i, j| {
            labels[i] != labels[j] || slots[i] == PAD || slots[j] == PAD
        }))
    }
}

fn slot_position(s: usize, counts: [usize; 3], m: usize) -> [usize; 3] {
    let t = m * m * m;
    let (w, i) = (s / t, s % t);
    let wc = [w / (counts[1] * counts[2]), (w / counts[2]) % counts[1], w % counts[2]];
    let tc = [i / (m * m), (i / m) % m, i % m];
    std::array::from_fn(|a| wc[a] * m + tc[a])
}

/// Interior / first boundary / wrapped slice along one axis.
fn axis_region(q: usize, padded: usize, m: usize, shift: usize) -> u8 {
    if shift == 0 || q < padded - m {
        0
    } else if q < padded - shift {
        1
    } else {
        2
    }
}

/// Per-window blocked token pairs, `[n_win, M³, M³]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct WindowMask {
    pub n_windows: usize,
    pub tokens: usize,
    blocked: Vec<bool>,
}

impl WindowMask {
    fn from_fn(n_windows: usize, tokens: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut blocked = Vec::with_capacity(n_windows * tokens * tokens);
        for w in 0..n_windows {
            for i in 0..tokens {
                for j in 0..tokens {
                    blocked.push(f(w * tokens + i, w * tokens + j));
                }
            }
        }
        Self { n_windows, tokens, blocked }
    }

    pub fn is_blocked(&self, window: usize, i: usize, j: usize) -> bool {
        self.blocked[(window * self.tokens + i) * self.tokens + j]
    }

    pub fn is_empty(&self) -> bool {
        !self.blocked.contains(&true)
    }

    /// Additive bias `[n_win, 1, M³, M³]` with entries 0 or −[`NEG_LARGE`],
    /// broadcast over heads.
    pub fn to_bias<T: Real>(&self) -> Tensor<T> {
        let neg = T::lit(-NEG_LARGE);
        let data = self.blocked.iter().map(|&b| if b { neg } else { T::zero() }).collect();
        Tensor::new(vec![self.n_windows, 1, self.tokens, self.tokens], data).expect("mask dims")
    }
}

/// Mask for the shifted partition of `grid` with the given per-axis offset.
pub fn build_shift_mask(grid: [usize; 3], window: usize, offset: [usize; 3]) -> Result<WindowMask> {
    if let Some(o) = offset.iter().find(|&&o| o >= window) {
        return shape_err(format!("shift {o} outside [0, {window})"));
    }
    Ok(WindowPlan::new(grid, window, offset)?.shift_mask())
}

/// Split a grid into `M³`-token windows, zero-padding each axis up to a
/// multiple of `M`. Returns `[n_win, M³, feat]`.
pub fn window_partition<T: Real>(t: &TokenGrid<T>, window: usize) -> Result<(Tensor<T>, PadRecord)> {
    let plan = WindowPlan::new(t.grid, window, [0; 3])?;
    let dims = [plan.n_windows(), plan.window_tokens(), t.feat()];
    Ok((gather_rows(&t.values, plan.slots(), &dims)?, plan.record))
}

/// Inverse of [`window_partition`]; padding is dropped.
pub fn window_reverse<T: Real>(windows: &Tensor<T>, record: &PadRecord) -> Result<TokenGrid<T>> {
    let PadRecord { grid, padded, window } = *record;
    let consistent = window > 0
        && (0..3).all(|a| grid[a] > 0 && padded[a] == grid[a].div_ceil(window) * window)
        && windows.rank() == 3
        && windows.dims()[0] * windows.dims()[1] == padded.iter().product::<usize>()
        && windows.dims()[1] == window.pow(3);
    if !consistent {
        return shape_err(format!("windows {:?} do not match {record:?}", windows.dims()));
    }
    let plan = WindowPlan::new(grid, window, [0; 3])?;
    let f = windows.dims()[2];
    let flat = windows.clone().reshape(&[windows.dims()[0] * windows.dims()[1], f])?;
    TokenGrid::new(grid, gather_rows(&flat, plan.inverse(), &[plan.inverse().len(), f])?)
}

/// Toroidal roll: the token at position `p` moves to `(p + offset) mod extent`.
pub fn cyclic_shift<T: Real>(t: &TokenGrid<T>, offset: [isize; 3]) -> TokenGrid<T> {
    let g = t.grid;
    let mut rows = vec![0; t.n_tokens()];
    for z in 0..g[0] {
        for y in 0..g[1] {
            for x in 0..g[2] {
                let src = [z, y, x];
                let dst: [usize; 3] =
                    std::array::from_fn(|a| (src[a] as isize + offset[a]).rem_euclid(g[a] as isize) as usize);
                rows[token_index(g, dst[0], dst[1], dst[2])] = token_index(g, z, y, x);
            }
        }
    }
    let values = gather_rows(&t.values, &rows, t.values.dims()).expect("same dims");
    TokenGrid { grid: g, values }
}

/// `[C, h, w, d]` ↔ `[h·w·d, C]` transposition tables.
pub(crate) fn to_tokens_index(c: usize, n: usize) -> Arc<[usize]> {
    (0..n * c).map(|i| (i % c) * n + i / c).collect()
}

pub(crate) fn to_dense_index(c: usize, n: usize) -> Arc<[usize]> {
    (0..n * c).map(|i| (i % n) * c + i / n).collect()
}

/// Dense `[C, h, w, d]` view of a token grid.
pub fn grid_to_dense<T: Real>(t: &TokenGrid<T>) -> Tensor<T> {
    let (n, c) = (t.n_tokens(), t.feat());
    let idx = to_dense_index(c, n);
    let data = idx.iter().map(|&i| t.values.data()[i]).collect();
    Tensor::new(vec![c, t.grid[0], t.grid[1], t.grid[2]], data).expect("dims")
}

pub(crate) fn dense_error(what: &str, dims: &[usize]) -> Error {
    Error::Shape(format!("{what}: expected [C, H, W, D], got {dims:?}"))
}
