//! Self-supervised pre-training: two-view augmentation (rotation + cutout),
//! the three projection heads, and their losses.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::diffops::{Tape, Var};
use crate::error::{config_err, shape_err, Error, Result};
use crate::params::{Builder, Init, ParamId, ParamStore, ParamVars};
use crate::swin3d::{Encoder, EncoderConfig, Features};
use crate::tensor::{Real, Tensor};

/// Rotation classes: 0°, 90°, 180°, 270°.
pub const ROTATIONS: usize = 4;
/// Contrastive embedding width.
pub const EMBED_DIM: usize = 512;

/// Rotate a `[C, H, W, D]` volume by `k·90°` about the z (H) axis, in the
/// (y = W, x = D) plane. A voxel at `(x, y)` moves to `(y, n − 1 − x)`.
pub fn rotate_z90<T: Real>(v: &Tensor<T>, k: usize) -> Result<Tensor<T>> {
    let [c, h, w, d] = match v.dims() {
        &[c, h, w, d] => [c, h, w, d],
        dims => return shape_err(format!("rotate_z90: expected [C,H,W,D], got {dims:?}")),
    };
    if w != d {
        return shape_err(format!("rotate_z90: in-plane extents {w}x{d} are not square"));
    }
    let n = w;
    let k = k % ROTATIONS;
    if k == 0 {
        return Ok(v.clone());
    }
    let src = v.data();
    let mut out = vec![T::zero(); v.len()];
    for plane in 0..c * h {
        let base = plane * n * n;
        for y in 0..n {
            for x in 0..n {
                // Source coordinates of output (x, y) after k quarter turns.
                let (sx, sy) = match k {
                    1 => (n - 1 - y, x),
                    2 => (n - 1 - x, n - 1 - y),
                    _ => (y, n - 1 - x),
                };
                out[base + y * n + x] = src[base + sy * n + sx];
            }
        }
    }
    Tensor::new(v.dims().to_vec(), out)
}

/// What replaces cut-out voxels.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Fill {
    Constant(f64),
    /// Uniform in [0, 1).
    Noise,
}

/// Cuboid side range as fractions of the axis extent.
pub const CUBOID_SIDE: (f64, f64) = (0.10, 0.25);

/// Spatial cutout mask over `extents`: random axis-aligned cuboids until at
/// least `⌈s·V⌉` voxels are covered.
pub fn cutout_mask(extents: [usize; 3], s: f64, rng: &mut impl Rng) -> Result<Vec<bool>> {
    if !(s > 0.0 && s < 1.0) {
        return config_err("cutout_ratio", format!("{s} is outside (0, 1)"));
    }
    let total = extents.iter().product::<usize>();
    let target = (s * total as f64).ceil() as usize;
    let sides = extents.map(|e| {
        let lo = ((CUBOID_SIDE.0 * e as f64).ceil() as usize).clamp(1, e);
        let hi = ((CUBOID_SIDE.1 * e as f64).floor() as usize).clamp(lo, e);
        (lo, hi)
    });
    let [_, w, d] = extents;
    let mut mask = vec![false; total];
    let mut covered = 0;
    while covered < target {
        let size: [usize; 3] = std::array::from_fn(|a| rng.gen_range(sides[a].0..=sides[a].1));
        let at: [usize; 3] = std::array::from_fn(|a| rng.gen_range(0..=extents[a] - size[a]));
        for z in at[0]..at[0] + size[0] {
            for y in at[1]..at[1] + size[1] {
                let row = (z * w + y) * d;
                for m in &mut mask[row + at[2]..row + at[2] + size[2]] {
                    covered += usize::from(!*m);
                    *m = true;
                }
            }
        }
    }
    Ok(mask)
}

/// Apply a cutout to every channel of `[C, H, W, D]`. Returns the masked
/// volume and the spatial mask.
pub fn cutout<T: Real>(v: &Tensor<T>, s: f64, fill: Fill, rng: &mut impl Rng) -> Result<(Tensor<T>, Vec<bool>)> {
    let dims = v.dims();
    if dims.len() != 4 {
        return shape_err(format!("cutout: expected [C,H,W,D], got {dims:?}"));
    }
    let mask = cutout_mask([dims[1], dims[2], dims[3]], s, rng)?;
    let mut out = v.clone();
    for chunk in out.data_mut().chunks_mut(mask.len()) {
        for (o, &m) in chunk.iter_mut().zip(&mask) {
            if m {
                *o = match fill {
                    Fill::Constant(c) => T::lit(c),
                    Fill::Noise => T::lit(rng.gen::<f64>()),
                };
            }
        }
    }
    Ok((out, mask))
}

/// Augmentation settings for one view.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Augment {
    pub rotate: bool,
    /// Cutout coverage `s`; `None` disables cutout.
    pub cutout: Option<f64>,
    pub fill: Fill,
}

impl Default for Augment {
    fn default() -> Self {
        Self { rotate: true, cutout: Some(0.3), fill: Fill::Constant(0.0) }
    }
}

/// One augmented view with its targets.
#[derive(Clone, Debug)]
pub struct View<T> {
    pub x: Tensor<T>,
    pub rot: usize,
    pub mask: Vec<bool>,
    /// Rotated, pre-cutout volume (reconstruction target).
    pub orig: Tensor<T>,
}

#[derive(Clone, Debug)]
pub struct ViewPair<T> {
    pub first: View<T>,
    pub second: View<T>,
}

/// Rotate, record the target, then cut out.
pub fn make_view<T: Real>(x: &Tensor<T>, aug: &Augment, rng: &mut impl Rng) -> Result<View<T>> {
    let rot = if aug.rotate { rng.gen_range(0..ROTATIONS) } else { 0 };
    let orig = rotate_z90(x, rot)?;
    let spatial = orig.len() / orig.dims()[0];
    let (x, mask) = match aug.cutout {
        Some(s) => cutout(&orig, s, aug.fill, rng)?,
        None => (orig.clone(), vec![false; spatial]),
    };
    Ok(View { x, rot, mask, orig })
}

/// The rng stream for view `v` (0 or 1) of sample `i` under `seed`.
pub fn view_rng(seed: u64, i: usize, v: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((2 * i + v) as u64);
    rng
}

/// Two independent views per sample, each from its own rng stream.
pub fn make_views<T: Real>(batch: &[Tensor<T>], aug: &Augment, seed: u64) -> Result<Vec<ViewPair<T>>> {
    if batch.is_empty() {
        return shape_err("make_views: empty batch");
    }
    batch
        .iter()
        .enumerate()
        .map(|(i, x)| {
            Ok(ViewPair {
                first: make_view(x, aug, &mut view_rng(seed, i, 0))?,
                second: make_view(x, aug, &mut view_rng(seed, i, 1))?,
            })
        })
        .collect()
}

#[derive(Clone, Copy, Debug)]
pub struct HeadIds {
    pub rec: (ParamId, ParamId),
    pub rot1: (ParamId, ParamId),
    pub rot2: (ParamId, ParamId),
    pub con: (ParamId, ParamId),
}

/// Head outputs for one view.
#[derive(Clone, Copy, Debug)]
pub struct SslOutputs {
    /// `[S, H, W, D]`.
    pub recon: Var,
    /// `[1, 4]`.
    pub rot_logits: Var,
    /// `[1, 512]`.
    pub embed: Var,
}

/// Reconstruction (one transposed conv from the bottleneck to input
/// resolution), rotation MLP and contrastive linear head.
#[derive(Clone, Debug)]
pub struct SslHeads {
    pub ids: HeadIds,
    pub scale: usize,
}

impl SslHeads {
    pub fn new<T: Real, R: Rng>(cfg: &EncoderConfig, b: &mut Builder<T, R>) -> Result<Self> {
        let f = cfg.width(4);
        let scale = cfg.patch << 4;
        let proj = Init::TruncNormal(0.02);
        let ids = HeadIds {
            rec: (
                b.add("rec.w", &[f, cfg.in_channels, scale, scale, scale], proj)?,
                b.add("rec.b", &[cfg.in_channels], Init::Zeros)?,
            ),
            rot1: (b.add("rot.fc1.w", &[f, f], proj)?, b.add("rot.fc1.b", &[f], Init::Zeros)?),
            rot2: (b.add("rot.fc2.w", &[f, ROTATIONS], proj)?, b.add("rot.fc2.b", &[ROTATIONS], Init::Zeros)?),
            con: (b.add("con.w", &[f, EMBED_DIM], proj)?, b.add("con.b", &[EMBED_DIM], Init::Zeros)?),
        };
        Ok(Self { ids, scale })
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, pv: &ParamVars, features: &Features) -> Result<SslOutputs> {
        let f5 = features.bottleneck();
        let input = tape.dims(features.maps[0]).to_vec();
        let ids = &self.ids;
        let recon = tape.conv3d_transpose(f5, pv[ids.rec.0], Some(pv[ids.rec.1]), self.scale)?;
        let recon = crop_to(tape, recon, &input)?;
        let width = tape.dims(f5)[0];
        let pooled = tape.global_avg_pool(f5);
        let pooled = tape.reshape(pooled, &[1, width])?;
        let h = tape.linear(pooled, pv[ids.rot1.0], Some(pv[ids.rot1.1]))?;
        let h = tape.gelu(h);
        let rot_logits = tape.linear(h, pv[ids.rot2.0], Some(pv[ids.rot2.1]))?;
        let embed = tape.linear(pooled, pv[ids.con.0], Some(pv[ids.con.1]))?;
        Ok(SslOutputs { recon, rot_logits, embed })
    }
}

fn crop_to<T: Real>(tape: &mut Tape<T>, x: Var, to: &[usize]) -> Result<Var> {
    let d = tape.dims(x).to_vec();
    if d == to {
        return Ok(x);
    }
    if d.len() != 4 || to.len() != 4 || d[0] != to[0] || (1..4).any(|a| d[a] < to[a]) {
        return shape_err(format!("cannot crop {d:?} to {to:?}"));
    }
    let mut idx = Vec::with_capacity(to.iter().product());
    for c in 0..to[0] {
        for h in 0..to[1] {
            for w in 0..to[2] {
                idx.extend((0..to[3]).map(|z| ((c * d[1] + h) * d[2] + w) * d[3] + z));
            }
        }
    }
    tape.gather(x, Arc::from(idx), to)
}

/// Mean absolute reconstruction error.
pub fn inpaint_loss_on<T: Real>(tape: &mut Tape<T>, recon: Var, orig: Arc<Tensor<T>>) -> Result<Var> {
    tape.l1_loss(recon, orig)
}

/// Mean cross-entropy of `[B, 4]` rotation logits.
pub fn rotation_loss_on<T: Real>(tape: &mut Tape<T>, logits: Var, labels: &[usize]) -> Result<Var> {
    if let Some(&bad) = labels.iter().find(|&&l| l >= ROTATIONS) {
        return Err(Error::Shape(format!("rotation label {bad} outside 0..{ROTATIONS}")));
    }
    tape.cross_entropy(logits, 1, Arc::from(labels))
}

/// Contrastive loss over `[2N, F]` embeddings: row `i`'s positive is row
/// `partners[i]`, every other row `k ≠ i` is in the denominator. Similarity
/// is the dot product of L2-normalized rows divided by `t`; averaged over
/// all anchors.
pub fn contrastive_loss_on<T: Real>(tape: &mut Tape<T>, embeds: Var, partners: &[usize], t: f64) -> Result<Var> {
    let dims = tape.dims(embeds).to_vec();
    let n = dims[0];
    if dims.len() != 2 || n < 2 || partners.len() != n {
        return shape_err(format!("contrastive_loss: embeds {dims:?} with {} partners", partners.len()));
    }
    if !(t > 0.0) {
        return config_err("temperature", format!("{t} must be positive"));
    }
    for (i, &p) in partners.iter().enumerate() {
        if p >= n || p == i || partners[p] != i {
            return shape_err(format!("contrastive_loss: partner map is not a pairing at row {i}"));
        }
    }
    let z = tape.l2_normalize(embeds)?;
    let sim = tape.matmul(z, z, true)?;
    let sim = tape.scale(sim, T::lit(1.0 / t));
    // Drop the diagonal: row i keeps columns k ≠ i.
    let mut idx = Vec::with_capacity(n * (n - 1));
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        idx.extend((0..n).filter(|&k| k != i).map(|k| i * n + k));
        labels.push(if partners[i] < i { partners[i] } else { partners[i] - 1 });
    }
    let logits = tape.gather(sim, Arc::from(idx), &[n, n - 1])?;
    tape.cross_entropy(logits, 1, Arc::from(labels))
}

/// Partner map for views laid out as all first views then all second views.
pub fn split_partners(n: usize) -> Vec<usize> {
    (0..2 * n).map(|i| (i + n) % (2 * n)).collect()
}

fn eval_scalar<T: Real>(f: impl FnOnce(&mut Tape<T>) -> Result<Var>) -> Result<T> {
    let mut tape = Tape::new();
    let v = f(&mut tape)?;
    Ok(tape.scalar(v))
}

pub fn inpaint_loss<T: Real>(recon: &Tensor<T>, orig: &Tensor<T>) -> Result<T> {
    eval_scalar(|tp| {
        let r = tp.constant(recon.clone());
        inpaint_loss_on(tp, r, Arc::new(orig.clone()))
    })
}

pub fn rotation_loss<T: Real>(logits: &Tensor<T>, labels: &[usize]) -> Result<T> {
    eval_scalar(|tp| {
        let l = tp.constant(logits.clone());
        rotation_loss_on(tp, l, labels)
    })
}

pub fn contrastive_loss<T: Real>(embeds: &Tensor<T>, partners: &[usize], t: f64) -> Result<T> {
    eval_scalar(|tp| {
        let e = tp.constant(embeds.clone());
        contrastive_loss_on(tp, e, partners, t)
    })
}

/// Loss weights `(λ_inpaint, λ_contrastive, λ_rotation)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Lambdas(pub f64, pub f64, pub f64);

impl Default for Lambdas {
    fn default() -> Self {
        Self(1.0, 1.0, 1.0)
    }
}

impl Lambdas {
    pub fn validate(&self) -> Result<()> {
        if [self.0, self.1, self.2].iter().any(|&l| !(l >= 0.0) || !l.is_finite()) {
            return config_err("lambdas", "weights must be finite and non-negative");
        }
        Ok(())
    }
}

/// `λ1·Li + λ2·Lc + λ3·Lr`.
pub fn total_loss(li: f64, lc: f64, lr: f64, l: Lambdas) -> f64 {
    l.0 * li + l.1 * lc + l.2 * lr
}

/// Loss terms recorded for one pre-training step. Terms with zero weight
/// are not evaluated.
#[derive(Clone, Copy, Debug)]
pub struct SslLosses {
    pub inpaint: Option<Var>,
    pub contrastive: Option<Var>,
    pub rotation: Option<Var>,
    pub total: Var,
}

/// Encoder plus projection heads (`encoder.*`, `heads.*`).
#[derive(Clone, Debug)]
pub struct SslModel {
    pub encoder: Encoder,
    pub heads: SslHeads,
}

impl SslModel {
    pub fn new<T: Real, R: Rng>(cfg: EncoderConfig, store: &mut ParamStore<T>, rng: &mut R) -> Result<Self> {
        let encoder = Encoder::new(cfg, &mut Builder::new(store, rng, "encoder"))?;
        let heads = SslHeads::new(&encoder.cfg, &mut Builder::new(store, rng, "heads"))?;
        Ok(Self { encoder, heads })
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, pv: &ParamVars, x: Var) -> Result<SslOutputs> {
        let f = self.encoder.forward(tape, pv, x)?;
        self.heads.forward(tape, pv, &f)
    }

    /// Total loss over the `2N` views of a batch (all first views, then all
    /// second views).
    pub fn loss<T: Real>(
        &self,
        tape: &mut Tape<T>,
        pv: &ParamVars,
        pairs: &[ViewPair<T>],
        lambdas: Lambdas,
        temperature: f64,
    ) -> Result<SslLosses> {
        lambdas.validate()?;
        let views: Vec<&View<T>> = pairs.iter().map(|p| &p.first).chain(pairs.iter().map(|p| &p.second)).collect();
        let mut recon_terms = Vec::new();
        let mut rot = Vec::new();
        let mut emb = Vec::new();
        for v in &views {
            let x = tape.constant(v.x.clone());
            let out = self.forward(tape, pv, x)?;
            if lambdas.0 > 0.0 {
                recon_terms.push(inpaint_loss_on(tape, out.recon, Arc::new(v.orig.clone()))?);
            }
            rot.push(out.rot_logits);
            emb.push(out.embed);
        }
        let n = views.len();
        let mut total: Option<Var> = None;
        let mut acc = |tape: &mut Tape<T>, term: Var, w: f64| -> Result<()> {
            let t = tape.scale(term, T::lit(w));
            total = Some(match total {
                Some(s) => tape.add(s, t)?,
                None => t,
            });
            Ok(())
        };
        let inpaint = if lambdas.0 > 0.0 {
            let mut s = recon_terms[0];
            for &r in &recon_terms[1..] {
                s = tape.add(s, r)?;
            }
            let mean = tape.scale(s, T::lit(1.0 / n as f64));
            acc(tape, mean, lambdas.0)?;
            Some(mean)
        } else {
            None
        };
        let contrastive = if lambdas.1 > 0.0 {
            let e = tape.concat(&emb)?;
            let l = contrastive_loss_on(tape, e, &split_partners(pairs.len()), temperature)?;
            acc(tape, l, lambdas.1)?;
            Some(l)
        } else {
            None
        };
        let rotation = if lambdas.2 > 0.0 {
            let logits = tape.concat(&rot)?;
            let labels: Vec<usize> = views.iter().map(|v| v.rot).collect();
            let l = rotation_loss_on(tape, logits, &labels)?;
            acc(tape, l, lambdas.2)?;
            Some(l)
        } else {
            None
        };
        let total = match total {
            Some(t) => t,
            None => return config_err("lambdas", "at least one loss weight must be positive"),
        };
        Ok(SslLosses { inpaint, contrastive, rotation, total })
    }
}
