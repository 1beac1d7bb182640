//! Convolutional U-shaped decoder over the six encoder scales, and the
//! assembled segmentation model.

use std::sync::Arc;

use rand::Rng;

use crate::diffops::{softmax, Tape, Var};
use crate::error::{config_err, shape_err, Result};
use crate::params::{Builder, Init, ParamId, ParamStore, ParamVars};
use crate::swin3d::{Encoder, EncoderConfig};
use crate::tensor::{Real, Tensor};

pub const LEAKY_SLOPE: f64 = 0.01;

#[derive(Clone, Debug, PartialEq)]
pub struct DecoderConfig {
    pub n_classes: usize,
    /// Matches the encoder embedding width `C`.
    pub base_width: usize,
    pub eps: f64,
}

impl DecoderConfig {
    /// Channel width at scale `i` (0..=5): `[C, C, 2C, 4C, 8C, 16C]`.
    pub fn width(&self, level: usize) -> usize {
        match level {
            0 => self.base_width,
            l => self.base_width << (l - 1),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct ResBlockIds {
    pub conv1: ParamId,
    pub norm1: (ParamId, ParamId),
    pub conv2: ParamId,
    pub norm2: (ParamId, ParamId),
    /// 1×1×1 projection when the width changes.
    pub skip: Option<ParamId>,
}

#[derive(Clone, Copy, Debug)]
pub struct UpIds {
    pub deconv: (ParamId, ParamId),
    pub block: ResBlockIds,
}

#[derive(Clone, Debug)]
pub struct DecoderIds {
    /// Residual processing of `f0..f5`.
    pub lateral: Vec<ResBlockIds>,
    /// Upsampling levels, index `l - 1` produces scale `l - 1` from scale `l`.
    pub ups: Vec<UpIds>,
    pub head: (ParamId, ParamId),
}

fn he(fan_in: usize) -> Init {
    Init::TruncNormal((2.0 / fan_in as f64).sqrt())
}

fn add_res_block<T: Real, R: Rng>(b: &mut Builder<T, R>, cin: usize, cout: usize) -> Result<ResBlockIds> {
    Ok(ResBlockIds {
        conv1: b.add("conv1.w", &[cout, cin, 3, 3, 3], he(cin * 27))?,
        norm1: (b.add("norm1.gamma", &[cout], Init::Ones)?, b.add("norm1.beta", &[cout], Init::Zeros)?),
        conv2: b.add("conv2.w", &[cout, cout, 3, 3, 3], he(cout * 27))?,
        norm2: (b.add("norm2.gamma", &[cout], Init::Ones)?, b.add("norm2.beta", &[cout], Init::Zeros)?),
        skip: if cin == cout { None } else { Some(b.add("skip.w", &[cout, cin, 1, 1, 1], he(cin))?) },
    })
}

/// `act(norm(conv(act(norm(conv(x)))))) + skip(x)` with 3×3×3 convolutions,
/// instance norm and leaky ReLU.
pub fn residual_block<T: Real>(tape: &mut Tape<T>, pv: &ParamVars, x: Var, ids: &ResBlockIds, eps: T) -> Result<Var> {
    let slope = T::lit(LEAKY_SLOPE);
    let h = tape.conv3d(x, pv[ids.conv1], None, 1, 1)?;
    let h = tape.instance_norm(h, pv[ids.norm1.0], pv[ids.norm1.1], eps)?;
    let h = tape.leaky_relu(h, slope);
    let h = tape.conv3d(h, pv[ids.conv2], None, 1, 1)?;
    let h = tape.instance_norm(h, pv[ids.norm2.0], pv[ids.norm2.1], eps)?;
    let h = tape.leaky_relu(h, slope);
    let s = match ids.skip {
        Some(w) => tape.conv3d(x, pv[w], None, 1, 0)?,
        None => x,
    };
    tape.add(h, s)
}

/// Channel-major crop of `[C, H, W, D]` to the leading `to` extents.
fn crop<T: Real>(tape: &mut Tape<T>, x: Var, to: [usize; 3]) -> Result<Var> {
    let d = tape.dims(x).to_vec();
    if d[1..] == to {
        return Ok(x);
    }
    let mut idx = Vec::with_capacity(d[0] * to.iter().product::<usize>());
    for c in 0..d[0] {
        for h in 0..to[0] {
            for w in 0..to[1] {
                idx.extend((0..to[2]).map(|z| ((c * d[1] + h) * d[2] + w) * d[3] + z));
            }
        }
    }
    tape.gather(x, Arc::from(idx), &[d[0], to[0], to[1], to[2]])
}

/// Transposed conv (k = stride = 2), channel concat `[up, skip]`, then a
/// residual block. Skip extents must be `2e` (or `2e − 1` where the encoder
/// padded an odd grid, in which case the upsampled map is cropped).
pub fn upsample_concat<T: Real>(
    tape: &mut Tape<T>,
    pv: &ParamVars,
    x: Var,
    skip: Var,
    ids: &UpIds,
    eps: T,
) -> Result<Var> {
    let (xd, sd) = (tape.dims(x).to_vec(), tape.dims(skip).to_vec());
    if xd.len() != 4 || sd.len() != 4 || (1..4).any(|a| sd[a] != 2 * xd[a] && sd[a] + 1 != 2 * xd[a]) {
        return shape_err(format!("upsample_concat: skip {sd:?} is not twice {xd:?}"));
    }
    let up = tape.conv3d_transpose(x, pv[ids.deconv.0], Some(pv[ids.deconv.1]), 2)?;
    let up = crop(tape, up, [sd[1], sd[2], sd[3]])?;
    let cat = tape.concat(&[up, skip])?;
    residual_block(tape, pv, cat, &ids.block, eps)
}

/// Per-voxel class probabilities: softmax over the channel axis.
pub fn segmentation_probs<T: Real>(logits: &Tensor<T>) -> Result<Tensor<T>> {
    softmax(logits, 0)
}

#[derive(Clone, Debug)]
pub struct Decoder {
    pub cfg: DecoderConfig,
    pub ids: DecoderIds,
}

impl Decoder {
    /// `in_widths` are the channel widths of `f0..f5`.
    pub fn new<T: Real, R: Rng>(cfg: DecoderConfig, in_widths: [usize; 6], b: &mut Builder<T, R>) -> Result<Self> {
        if cfg.n_classes == 0 {
            return config_err("n_classes", "must be at least 1");
        }
        if !(cfg.eps > 0.0) {
            return config_err("eps", "must be positive");
        }
        let lateral = (0..6)
            .map(|l| add_res_block(&mut b.scope(&format!("lateral{l}")), in_widths[l], cfg.width(l)))
            .collect::<Result<Vec<_>>>()?;
        let mut ups = Vec::new();
        for l in 1..6 {
            let (cin, cout) = (cfg.width(l), cfg.width(l - 1));
            let mut ub = b.scope(&format!("up{l}"));
            let deconv =
                (ub.add("deconv.w", &[cin, cout, 2, 2, 2], he(cin))?, ub.add("deconv.b", &[cout], Init::Zeros)?);
            let block = add_res_block(&mut ub.scope("block"), 2 * cout, cout)?;
            ups.push(UpIds { deconv, block });
        }
        let c0 = cfg.width(0);
        let head =
            (b.add("head.w", &[cfg.n_classes, c0, 1, 1, 1], he(c0))?, b.add("head.b", &[cfg.n_classes], Init::Zeros)?);
        Ok(Self { cfg, ids: DecoderIds { lateral, ups, head } })
    }

    /// Logits `[n_classes, H, W, D]` from features `f0..f5`.
    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, pv: &ParamVars, features: &[Var]) -> Result<Var> {
        if features.len() != 6 {
            return shape_err(format!("decoder needs 6 feature maps, got {}", features.len()));
        }
        let eps = T::lit(self.cfg.eps);
        let lateral = features
            .iter()
            .zip(&self.ids.lateral)
            .map(|(&f, ids)| residual_block(tape, pv, f, ids, eps))
            .collect::<Result<Vec<_>>>()?;
        let mut x = lateral[5];
        for l in (1..6).rev() {
            x = upsample_concat(tape, pv, x, lateral[l - 1], &self.ids.ups[l - 1], eps)?;
        }
        tape.conv3d(x, pv[self.ids.head.0], Some(pv[self.ids.head.1]), 1, 0)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub n_classes: usize,
    pub norm_eps: f64,
}

impl ModelConfig {
    pub fn new(encoder: EncoderConfig, n_classes: usize) -> Self {
        Self { encoder, n_classes, norm_eps: 1e-5 }
    }

    pub fn decoder(&self) -> DecoderConfig {
        DecoderConfig { n_classes: self.n_classes, base_width: self.encoder.embed_dim, eps: self.norm_eps }
    }
}

/// Encoder + decoder. Parameters live under `encoder.` and `decoder.`.
#[derive(Clone, Debug)]
pub struct SwinUnetr {
    pub cfg: ModelConfig,
    pub encoder: Encoder,
    pub decoder: Decoder,
}

impl SwinUnetr {
    pub fn new<T: Real, R: Rng>(cfg: ModelConfig, store: &mut ParamStore<T>, rng: &mut R) -> Result<Self> {
        let encoder = Encoder::new(cfg.encoder.clone(), &mut Builder::new(store, rng, "encoder"))?;
        let widths = std::array::from_fn(|l| cfg.encoder.feature_width(l));
        let decoder = Decoder::new(cfg.decoder(), widths, &mut Builder::new(store, rng, "decoder"))?;
        Ok(Self { cfg, encoder, decoder })
    }

    /// Logits for one `[S, H, W, D]` input.
    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, pv: &ParamVars, x: Var) -> Result<Var> {
        let f = self.encoder.forward(tape, pv, x)?;
        self.decoder.forward(tape, pv, &f.maps)
    }

    /// Class probabilities without recording gradients.
    pub fn predict<T: Real>(&self, store: &ParamStore<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        let feats = self.encoder.features(store, x)?;
        let mut tape = Tape::new();
        let pv = store.bind(&mut tape);
        let vars: Vec<Var> = feats.into_iter().map(|f| tape.constant(f)).collect();
        let logits = self.decoder.forward(&mut tape, &pv, &vars)?;
        segmentation_probs(tape.value(logits))
    }
}
