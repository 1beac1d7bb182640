use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::datapipe::{sample_labeled, sample_subvolume, LabeledVolume, Volume};
use crate::decoder::SwinUnetr;
use crate::diffops::Tape;
use crate::error::{config_err, Error, Result};
use crate::metrics::mean_foreground_dice;
use crate::params::ParamStore;
use crate::ssl::{make_views, SslModel};
use crate::tensor::Tensor;

use super::checkpoint::Checkpoint;
use super::config::RunConfig;
use super::infer::{argmax_labels, infer_probs};
use super::optim::{adamw_step, lr_schedule, OptimState};

/// Independent rng streams of one run.
#[derive(Clone, Copy, Debug)]
#[repr(u64)]
pub enum Purpose {
    Init = 1,
    Shuffle = 2,
    Crop = 3,
    Views = 4,
}

/// Deterministic rng for `(seed, purpose, index)`.
pub fn stream_rng(seed: u64, purpose: Purpose, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((purpose as u64) << 56) ^ index);
    rng
}

/// Derived 64-bit seed for `(seed, purpose, index)`.
pub fn derive_seed(seed: u64, purpose: Purpose, index: u64) -> u64 {
    use rand::RngCore;
    stream_rng(seed, purpose, index).next_u64()
}

/// Item drawn at position `k` of the run: items are visited in a fresh
/// seeded permutation every epoch.
pub fn data_index(seed: u64, n: usize, k: usize) -> usize {
    let (epoch, pos) = (k / n, k % n);
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut stream_rng(seed, Purpose::Shuffle, epoch as u64));
    perm[pos]
}

#[derive(Clone, Debug, PartialEq)]
pub struct CurveRow {
    pub step: usize,
    pub lr: f64,
    pub values: Vec<f64>,
}

/// Training curve: one row per step; columns after `step` and `lr`.
#[derive(Clone, Debug, PartialEq)]
pub struct Curve {
    pub columns: Vec<&'static str>,
    pub rows: Vec<CurveRow>,
}

impl Curve {
    pub fn new(columns: &[&'static str]) -> Self {
        Self { columns: columns.to_vec(), rows: Vec::new() }
    }

    pub fn column(&self, name: &str) -> Option<Vec<f64>> {
        let i = self.columns.iter().position(|&c| c == name)?;
        Some(self.rows.iter().map(|r| r.values[i]).collect())
    }

    pub fn write(&self, mut w: impl Write) -> Result<()> {
        writeln!(w, "step\tlr\t{}", self.columns.join("\t"))?;
        for r in &self.rows {
            let vals: Vec<String> = r.values.iter().map(|v| format!("{v:.6}")).collect();
            writeln!(w, "{}\t{:e}\t{}", r.step, r.lr, vals.join("\t"))?;
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.write(std::fs::File::create(path)?)
    }
}

pub const PRETRAIN_COLUMNS: &[&str] = &["inpaint", "contrastive", "rotation", "total"];
pub const FINETUNE_COLUMNS: &[&str] = &["dice_loss", "ce", "total", "val_dice"];

/// Run control beyond the configuration.
#[derive(Default)]
pub struct TrainOptions<'a> {
    /// Continue from this checkpoint's parameters, optimizer and step.
    pub resume: Option<&'a Checkpoint>,
    /// Stop after this many completed steps instead of `cfg.steps`.
    pub stop_at: Option<usize>,
    /// Called after every step.
    pub on_step: Option<&'a mut dyn FnMut(&CurveRow)>,
}

pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub curve: Curve,
    /// First step whose validation Dice reached `cfg.target_dice`.
    pub reached_target: Option<usize>,
    pub last_val_dice: Option<f64>,
}

fn check_loss(v: f32, step: usize) -> Result<()> {
    if !v.is_finite() {
        return Err(Error::Numeric(format!("non-finite loss {v} at step {step}")));
    }
    Ok(())
}

struct Loop {
    start: usize,
    end: usize,
}

fn setup(cfg: &RunConfig, opts: &TrainOptions, store: &mut ParamStore<f32>) -> Result<(Loop, OptimState<f32>)> {
    cfg.validate()?;
    let mut optim = OptimState::new(store);
    let mut start = 0;
    if let Some(ck) = opts.resume {
        if let Some(o) = ck.restore(store)? {
            optim = o;
        }
        start = ck.step as usize;
    }
    let end = opts.stop_at.unwrap_or(cfg.steps).min(cfg.steps);
    Ok((Loop { start, end }, optim))
}

fn maybe_checkpoint(cfg: &RunConfig, step: usize, store: &ParamStore<f32>, optim: &OptimState<f32>) -> Result<()> {
    if let Some(path) = &cfg.checkpoint {
        if cfg.checkpoint_every > 0 && step % cfg.checkpoint_every == 0 {
            Checkpoint::from_store(cfg, step as u64, store, Some(optim)).save(path)?;
        }
    }
    Ok(())
}

fn finish(
    cfg: &RunConfig,
    step: usize,
    store: &ParamStore<f32>,
    optim: &OptimState<f32>,
    curve: Curve,
    reached_target: Option<usize>,
    last_val_dice: Option<f64>,
) -> Result<TrainOutcome> {
    let checkpoint = Checkpoint::from_store(cfg, step as u64, store, Some(optim));
    if let Some(path) = &cfg.checkpoint {
        checkpoint.save(path)?;
    }
    if let Some(path) = &cfg.curve {
        curve.save(path)?;
    }
    Ok(TrainOutcome { checkpoint, curve, reached_target, last_val_dice })
}

/// Self-supervised pre-training of the encoder and heads on unlabeled volumes.
pub fn pretrain(cfg: &RunConfig, data: &[Volume], mut opts: TrainOptions) -> Result<TrainOutcome> {
    if data.is_empty() {
        return config_err("data", "no training volumes");
    }
    let mut store = ParamStore::new();
    let model = SslModel::new(cfg.encoder.clone(), &mut store, &mut stream_rng(cfg.seed, Purpose::Init, 0))?;
    let (lp, mut optim) = setup(cfg, &opts, &mut store)?;
    let aug = cfg.augment();
    let mut curve = Curve::new(PRETRAIN_COLUMNS);
    for s in lp.start..lp.end {
        let lr = lr_schedule(s, cfg.warmup, cfg.steps, cfg.lr);
        let batch = (0..cfg.batch)
            .map(|j| {
                let k = s * cfg.batch + j;
                let v = &data[data_index(cfg.seed, data.len(), k)];
                Ok(sample_subvolume(v, cfg.roi, &mut stream_rng(cfg.seed, Purpose::Crop, k as u64))?.data)
            })
            .collect::<Result<Vec<Tensor<f32>>>>()?;
        let views = make_views(&batch, &aug, derive_seed(cfg.seed, Purpose::Views, s as u64))?;
        let mut tape = Tape::new();
        let pv = store.bind(&mut tape);
        let losses = model.loss(&mut tape, &pv, &views, cfg.lambdas, cfg.temperature)?;
        let total = tape.scalar(losses.total);
        check_loss(total, s + 1)?;
        let term = |v: Option<_>| v.map_or(f64::NAN, |v| tape.scalar(v) as f64);
        let values = vec![term(losses.inpaint), term(losses.contrastive), term(losses.rotation), total as f64];
        let grads = tape.backward(losses.total)?.param_grads(store.len());
        drop(tape);
        adamw_step(&mut store, &grads, &mut optim, &cfg.optim, lr)?;
        let row = CurveRow { step: s + 1, lr, values };
        if let Some(f) = opts.on_step.as_mut() {
            f(&row);
        }
        curve.rows.push(row);
        maybe_checkpoint(cfg, s + 1, &store, &optim)?;
    }
    finish(cfg, lp.end.max(lp.start), &store, &optim, curve, None, None)
}

fn check_labels(vols: &[LabeledVolume], n_classes: usize) -> Result<()> {
    for (i, v) in vols.iter().enumerate() {
        if let Some(&bad) = v.labels.iter().find(|&&l| l as usize >= n_classes) {
            return config_err("n_classes", format!("volume {i} has label {bad} but n_classes is {n_classes}"));
        }
    }
    Ok(())
}

/// Mean foreground Dice of sliding-window predictions over `vols`.
pub fn evaluate_dice(
    model: &SwinUnetr,
    store: &ParamStore<f32>,
    vols: &[LabeledVolume],
    roi: [usize; 3],
    overlap: f64,
) -> Result<f64> {
    let mut sum = 0.0;
    for v in vols {
        let probs = infer_probs(model, store, &v.image.data, roi, overlap)?;
        sum += mean_foreground_dice(&argmax_labels(&probs), &v.labels_usize(), model.cfg.n_classes)?;
    }
    Ok(sum / vols.len() as f64)
}

/// Supervised segmentation training with soft Dice + cross-entropy. When
/// `init` is given its encoder weights are loaded (heads and any decoder
/// weights are ignored).
pub fn finetune(
    cfg: &RunConfig,
    train: &[LabeledVolume],
    val: &[LabeledVolume],
    init: Option<&Checkpoint>,
    mut opts: TrainOptions,
) -> Result<TrainOutcome> {
    if train.is_empty() {
        return config_err("data", "no training volumes");
    }
    check_labels(train, cfg.n_classes)?;
    check_labels(val, cfg.n_classes)?;
    let mut store = ParamStore::new();
    let model = SwinUnetr::new(cfg.model(), &mut store, &mut stream_rng(cfg.seed, Purpose::Init, 0))?;
    if let Some(init) = init {
        cfg.check_encoder_compatible(&init.config)?;
        let encoder: Vec<_> = init.params.iter().filter(|(n, _)| n.starts_with("encoder.")).cloned().collect();
        store.load_matching(&encoder, "encoder.")?;
    }
    let (lp, mut optim) = setup(cfg, &opts, &mut store)?;
    let mut curve = Curve::new(FINETUNE_COLUMNS);
    let inv_batch = 1.0 / cfg.batch as f32;
    let mut reached = None;
    let mut last_val = None;
    let mut step_done = lp.start;
    for s in lp.start..lp.end {
        let lr = lr_schedule(s, cfg.warmup, cfg.steps, cfg.lr);
        let mut tape = Tape::new();
        let pv = store.bind(&mut tape);
        let mut dice_terms = Vec::new();
        let mut ce_terms = Vec::new();
        for j in 0..cfg.batch {
            let k = s * cfg.batch + j;
            let v = &train[data_index(cfg.seed, train.len(), k)];
            let crop = sample_labeled(v, cfg.roi, &mut stream_rng(cfg.seed, Purpose::Crop, k as u64))?;
            let labels: Arc<[usize]> = crop.labels.iter().map(|&l| l as usize).collect();
            let x = tape.constant(crop.image.data);
            let logits = model.forward(&mut tape, &pv, x)?;
            let probs = tape.softmax(logits, 0)?;
            dice_terms.push(tape.soft_dice(probs, labels.clone())?);
            ce_terms.push(tape.cross_entropy(logits, 0, labels)?);
        }
        let mut mean = |terms: &[crate::diffops::Var]| -> Result<_> {
            let mut acc = terms[0];
            for &t in &terms[1..] {
                acc = tape.add(acc, t)?;
            }
            Ok(tape.scale(acc, inv_batch))
        };
        let dice_loss = mean(&dice_terms)?;
        let ce = mean(&ce_terms)?;
        let total = tape.add(dice_loss, ce)?;
        let total_v = tape.scalar(total);
        check_loss(total_v, s + 1)?;
        let (dv, cv) = (tape.scalar(dice_loss) as f64, tape.scalar(ce) as f64);
        let grads = tape.backward(total)?.param_grads(store.len());
        drop(tape);
        adamw_step(&mut store, &grads, &mut optim, &cfg.optim, lr)?;
        step_done = s + 1;
        let validate = !val.is_empty() && cfg.val_every > 0 && (step_done % cfg.val_every == 0 || step_done == lp.end);
        let val_dice = if validate {
            let d = evaluate_dice(&model, &store, val, cfg.roi, cfg.overlap)?;
            last_val = Some(d);
            d
        } else {
            f64::NAN
        };
        let row = CurveRow { step: step_done, lr, values: vec![dv, cv, total_v as f64, val_dice] };
        if let Some(f) = opts.on_step.as_mut() {
            f(&row);
        }
        curve.rows.push(row);
        maybe_checkpoint(cfg, step_done, &store, &optim)?;
        if let (Some(target), true) = (cfg.target_dice, validate) {
            if val_dice >= target {
                reached = Some(step_done);
                break;
            }
        }
    }
    finish(cfg, step_done, &store, &optim, curve, reached, last_val)
}

/// Rebuild a segmentation model and its weights from a checkpoint.
pub fn load_model(ck: &Checkpoint) -> Result<(SwinUnetr, ParamStore<f32>)> {
    let mut store = ParamStore::new();
    let model = SwinUnetr::new(ck.config.model(), &mut store, &mut stream_rng(0, Purpose::Init, 0))?;
    ck.restore(&mut store)?;
    Ok((model, store))
}
