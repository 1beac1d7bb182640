//! Segmentation metrics: Dice, 95th-percentile Hausdorff distance and
//! normalized surface distance, in physical units.

use std::io::Write;

use crate::error::{shape_err, Error, Result};

/// Boolean voxel mask over `[H, W, D]` (x = D fastest). `spacing` is
/// `(sx, sy, sz)` in mm, i.e. D, W, H axis order.
#[derive(Clone, Debug, PartialEq)]
pub struct BinaryMask {
    pub extents: [usize; 3],
    pub bits: Vec<bool>,
    pub spacing: [f64; 3],
}

impl BinaryMask {
    pub fn new(extents: [usize; 3], bits: Vec<bool>, spacing: [f64; 3]) -> Result<Self> {
        if bits.len() != extents.iter().product::<usize>() {
            return shape_err(format!("{} bits for extents {extents:?}", bits.len()));
        }
        if spacing.iter().any(|&s| !(s > 0.0)) {
            return shape_err(format!("spacing {spacing:?} must be positive"));
        }
        Ok(Self { extents, bits, spacing })
    }

    /// Voxels equal to `class` in a label map.
    pub fn from_labels(labels: &[usize], class: usize, extents: [usize; 3], spacing: [f64; 3]) -> Result<Self> {
        Self::new(extents, labels.iter().map(|&l| l == class).collect(), spacing)
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    /// Per grid axis (H, W, D) step in mm.
    pub fn axis_step(&self) -> [f64; 3] {
        [self.spacing[2], self.spacing[1], self.spacing[0]]
    }
}

fn same_extents(a: &BinaryMask, b: &BinaryMask) -> Result<()> {
    if a.extents != b.extents {
        return shape_err(format!("mask extents {:?} vs {:?}", a.extents, b.extents));
    }
    Ok(())
}

/// `2|Y∩Ŷ| / (|Y| + |Ŷ|)`; 1.0 when both are empty.
pub fn dice(y: &BinaryMask, yhat: &BinaryMask) -> Result<f64> {
    same_extents(y, yhat)?;
    let inter = y.bits.iter().zip(&yhat.bits).filter(|(&a, &b)| a && b).count();
    let total = y.count() + yhat.count();
    Ok(if total == 0 { 1.0 } else { 2.0 * inter as f64 / total as f64 })
}

/// Foreground voxels with at least one 6-neighbour that is background or
/// outside the volume, as grid indices `(z, y, x)`.
pub fn surface_indices(m: &BinaryMask) -> Result<Vec<[usize; 3]>> {
    let [h, w, d] = m.extents;
    let at = |z: usize, y: usize, x: usize| m.bits[(z * w + y) * d + x];
    let mut out = Vec::new();
    for z in 0..h {
        for y in 0..w {
            for x in 0..d {
                if !at(z, y, x) {
                    continue;
                }
                let edge = z == 0 || y == 0 || x == 0 || z + 1 == h || y + 1 == w || x + 1 == d;
                if edge
                    || !at(z - 1, y, x)
                    || !at(z + 1, y, x)
                    || !at(z, y - 1, x)
                    || !at(z, y + 1, x)
                    || !at(z, y, x - 1)
                    || !at(z, y, x + 1)
                {
                    out.push([z, y, x]);
                }
            }
        }
    }
    if out.is_empty() {
        return Err(Error::Degenerate("empty mask has no surface".into()));
    }
    Ok(out)
}

/// Surface voxels in physical coordinates `(z·sz, y·sy, x·sx)`.
pub fn surface_voxels(m: &BinaryMask) -> Result<Vec<[f64; 3]>> {
    let step = m.axis_step();
    Ok(surface_indices(m)?.into_iter().map(|p| std::array::from_fn(|a| p[a] as f64 * step[a])).collect())
}

/// Squared Euclidean distance transform (mm²) to the `true` voxels of
/// `seeds`, exact for anisotropic steps; separable lower-envelope passes.
pub fn squared_edt(seeds: &[bool], extents: [usize; 3], step: [f64; 3]) -> Vec<f64> {
    let mut f: Vec<f64> = seeds.iter().map(|&s| if s { 0.0 } else { f64::INFINITY }).collect();
    let [h, w, d] = extents;
    let strides = [w * d, d, 1];
    let longest = *extents.iter().max().unwrap_or(&1);
    let mut line = vec![0.0; longest];
    let mut out = vec![0.0; longest];
    let mut scratch = Envelope::new(longest);
    for axis in 0..3 {
        let n = extents[axis];
        let stride = strides[axis];
        let starts: Vec<usize> = (0..h * w * d).filter(|&i| (i / stride) % n == 0).collect();
        for s in starts {
            for k in 0..n {
                line[k] = f[s + k * stride];
            }
            scratch.transform(&line[..n], step[axis], &mut out[..n]);
            for k in 0..n {
                f[s + k * stride] = out[k];
            }
        }
    }
    f
}

struct Envelope {
    v: Vec<usize>,
    z: Vec<f64>,
}

impl Envelope {
    fn new(n: usize) -> Self {
        Self { v: vec![0; n], z: vec![0.0; n + 1] }
    }

    /// `out[p] = min_q (p·s − q·s)² + f[q]`.
    fn transform(&mut self, f: &[f64], s: f64, out: &mut [f64]) {
        let n = f.len();
        let pos = |q: usize| q as f64 * s;
        let mut k: isize = -1;
        for q in 0..n {
            if !f[q].is_finite() {
                continue;
            }
            loop {
                if k < 0 {
                    k = 0;
                    self.v[0] = q;
                    self.z[0] = f64::NEG_INFINITY;
                    self.z[1] = f64::INFINITY;
                    break;
                }
                let r = self.v[k as usize];
                let x = ((f[q] + pos(q) * pos(q)) - (f[r] + pos(r) * pos(r))) / (2.0 * (pos(q) - pos(r)));
                if x <= self.z[k as usize] {
                    k -= 1;
                    continue;
                }
                k += 1;
                self.v[k as usize] = q;
                self.z[k as usize] = x;
                self.z[k as usize + 1] = f64::INFINITY;
                break;
            }
        }
        if k < 0 {
            out.fill(f64::INFINITY);
            return;
        }
        let mut j = 0;
        for (p, o) in out.iter_mut().enumerate() {
            while self.z[j + 1] < pos(p) {
                j += 1;
            }
            let r = self.v[j];
            *o = (pos(p) - pos(r)).powi(2) + f[r];
        }
    }
}

/// Distance (mm) from every surface voxel of `from` to the nearest surface
/// voxel of `to`.
pub fn directed_surface_distances(from: &BinaryMask, to: &BinaryMask) -> Result<Vec<f64>> {
    same_extents(from, to)?;
    let src = surface_indices(from)?;
    let dst = surface_indices(to)?;
    let [_, w, d] = to.extents;
    let mut seeds = vec![false; to.bits.len()];
    for p in dst {
        seeds[(p[0] * w + p[1]) * d + p[2]] = true;
    }
    let edt = squared_edt(&seeds, to.extents, to.axis_step());
    Ok(src.iter().map(|p| edt[(p[0] * w + p[1]) * d + p[2]].sqrt()).collect())
}

/// Linear-interpolated percentile (`q` in [0, 100]) of unsorted values.
pub fn percentile(values: &[f64], q: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let rank = q / 100.0 * (v.len() - 1) as f64;
    let (lo, hi) = (rank.floor() as usize, rank.ceil() as usize);
    v[lo] + (v[hi] - v[lo]) * (rank - lo as f64)
}

/// 95th percentile of both directed surface-distance sets, concatenated.
pub fn hd95(y: &BinaryMask, yhat: &BinaryMask) -> Result<f64> {
    let mut all = directed_surface_distances(y, yhat)?;
    all.extend(directed_surface_distances(yhat, y)?);
    Ok(percentile(&all, 95.0))
}

/// Fraction of both surfaces lying within `tol` mm of the other surface.
pub fn nsd(y: &BinaryMask, yhat: &BinaryMask, tol: f64) -> Result<f64> {
    if !(tol >= 0.0) {
        return shape_err(format!("tolerance {tol} must be non-negative"));
    }
    let a = directed_surface_distances(y, yhat)?;
    let b = directed_surface_distances(yhat, y)?;
    let within = a.iter().chain(&b).filter(|&&dist| within_tol(dist, tol)).count();
    Ok(within as f64 / (a.len() + b.len()) as f64)
}

/// `dist ≤ tol`, forgiving the rounding of a square root.
fn within_tol(dist: f64, tol: f64) -> bool {
    dist <= tol * (1.0 + 1e-12) + 1e-12
}

/// Mean Dice over classes `1..n_classes` of two label maps.
pub fn mean_foreground_dice(pred: &[usize], gt: &[usize], n_classes: usize) -> Result<f64> {
    if pred.len() != gt.len() {
        return shape_err(format!("label maps of {} and {} voxels", pred.len(), gt.len()));
    }
    if n_classes < 2 {
        return Ok(1.0);
    }
    let mut sum = 0.0;
    for c in 1..n_classes {
        let (mut inter, mut total) = (0usize, 0usize);
        for (&p, &g) in pred.iter().zip(gt) {
            inter += usize::from(p == c && g == c);
            total += usize::from(p == c) + usize::from(g == c);
        }
        sum += if total == 0 { 1.0 } else { 2.0 * inter as f64 / total as f64 };
    }
    Ok(sum / (n_classes - 1) as f64)
}

/// One line of a metrics report.
#[derive(Clone, Debug, PartialEq)]
pub struct ReportRow {
    pub case: String,
    pub class: usize,
    pub metric: &'static str,
    pub value: f64,
}

/// Dice, HD95 and NSD for every foreground class. HD95 and NSD are NaN when
/// either mask is empty.
pub fn evaluate_case(
    case: &str,
    pred: &[usize],
    gt: &[usize],
    extents: [usize; 3],
    spacing: [f64; 3],
    n_classes: usize,
    tol: f64,
) -> Result<Vec<ReportRow>> {
    let mut rows = Vec::new();
    for class in 1..n_classes.max(2) {
        let p = BinaryMask::from_labels(pred, class, extents, spacing)?;
        let g = BinaryMask::from_labels(gt, class, extents, spacing)?;
        let empty = p.count() == 0 || g.count() == 0;
        let row = |metric, value| ReportRow { case: case.to_string(), class, metric, value };
        rows.push(row("dice", dice(&g, &p)?));
        rows.push(row("hd95", if empty { f64::NAN } else { hd95(&g, &p)? }));
        rows.push(row("nsd", if empty { f64::NAN } else { nsd(&g, &p, tol)? }));
    }
    Ok(rows)
}

/// Tab-separated `case, class, metric, value` lines, values at 6 decimals.
pub fn write_report(mut w: impl Write, rows: &[ReportRow]) -> Result<()> {
    for r in rows {
        writeln!(w, "{}\t{}\t{}\t{:.6}", r.case, r.class, r.metric, r.value)?;
    }
    Ok(())
}
