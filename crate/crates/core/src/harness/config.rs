use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::decoder::ModelConfig;
use crate::error::{config_err, Error, Result};
use crate::ssl::{Augment, Fill, Lambdas};
use crate::swin3d::EncoderConfig;

use super::optim::AdamW;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Pretrain,
    Finetune,
    Infer,
    Eval,
    Phantom,
}

impl FromStr for Mode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "pretrain" => Mode::Pretrain,
            "finetune" => Mode::Finetune,
            "infer" => Mode::Infer,
            "eval" => Mode::Eval,
            "phantom" => Mode::Phantom,
            _ => return config_err("mode", format!("unknown mode {s:?}")),
        })
    }
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Pretrain => "pretrain",
            Mode::Finetune => "finetune",
            Mode::Infer => "infer",
            Mode::Eval => "eval",
            Mode::Phantom => "phantom",
        }
    }
}

/// Every setting of a run. Loadable from `key = value` text; the same keys
/// are accepted as command-line flags.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub mode: Mode,
    pub seed: u64,
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub warmup: usize,
    pub optim: AdamW,
    pub encoder: EncoderConfig,
    pub n_classes: usize,
    pub roi: [usize; 3],
    pub lambdas: Lambdas,
    pub cutout_ratio: f64,
    pub cutout_fill: Fill,
    pub temperature: f64,
    pub ct_range: Option<(f32, f32)>,
    pub data: Vec<PathBuf>,
    pub labels: Vec<PathBuf>,
    pub val_data: Vec<PathBuf>,
    pub val_labels: Vec<PathBuf>,
    pub init: Option<PathBuf>,
    pub resume: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub checkpoint_every: usize,
    pub curve: Option<PathBuf>,
    pub val_every: usize,
    pub target_dice: Option<f64>,
    pub overlap: f64,
    pub nsd_tol: f64,
    pub output: Option<PathBuf>,
    pub report: Option<PathBuf>,
    pub phantom_count: usize,
    pub phantom_extent: [usize; 3],
    pub phantom_shapes: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Pretrain,
            seed: 0,
            steps: 1000,
            batch: 4,
            lr: 4e-4,
            warmup: 500,
            optim: AdamW::default(),
            encoder: EncoderConfig::default(),
            n_classes: 2,
            roi: [96; 3],
            lambdas: Lambdas::default(),
            cutout_ratio: 0.3,
            cutout_fill: Fill::Constant(0.0),
            temperature: 0.5,
            ct_range: None,
            data: Vec::new(),
            labels: Vec::new(),
            val_data: Vec::new(),
            val_labels: Vec::new(),
            init: None,
            resume: None,
            checkpoint: None,
            checkpoint_every: 0,
            curve: None,
            val_every: 0,
            target_dice: None,
            overlap: 0.5,
            nsd_tol: 1.0,
            output: None,
            report: None,
            phantom_count: 4,
            phantom_extent: [64; 3],
            phantom_shapes: 4,
        }
    }
}

fn parse<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.trim().parse().map_err(|_| Error::Config { field: key.to_string(), msg: format!("cannot parse {v:?}") })
}

fn parse_list<T: FromStr>(key: &str, v: &str) -> Result<Vec<T>> {
    v.split(',').filter(|s| !s.trim().is_empty()).map(|s| parse(key, s)).collect()
}

fn parse_array<const N: usize, T: FromStr + Copy>(key: &str, v: &str) -> Result<[T; N]> {
    let items: Vec<T> = parse_list(key, v)?;
    match items.len() {
        1 => Ok([items[0]; N]),
        n if n == N => Ok(std::array::from_fn(|i| items[i])),
        n => config_err(key, format!("expected 1 or {N} values, got {n}")),
    }
}

fn parse_opt_path(v: &str) -> Option<PathBuf> {
    let v = v.trim();
    (!v.is_empty() && v != "none").then(|| PathBuf::from(v))
}

fn parse_paths(v: &str) -> Vec<PathBuf> {
    v.split(',').map(str::trim).filter(|s| !s.is_empty()).map(PathBuf::from).collect()
}

fn join<T: ToString>(items: &[T]) -> String {
    items.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

fn join_paths(p: &[PathBuf]) -> String {
    p.iter().map(|p| p.display().to_string()).collect::<Vec<_>>().join(",")
}

fn opt_path(p: &Option<PathBuf>) -> String {
    p.as_ref().map_or("none".into(), |p| p.display().to_string())
}

impl RunConfig {
    /// Recognized keys, in serialization order.
    pub const KEYS: &'static [&'static str] = &[
        "mode",
        "seed",
        "steps",
        "batch",
        "lr",
        "warmup",
        "beta1",
        "beta2",
        "adam_eps",
        "weight_decay",
        "patch",
        "embed_dim",
        "depths",
        "heads",
        "window",
        "in_channels",
        "rel_pos_bias",
        "n_classes",
        "roi",
        "lambda_inpaint",
        "lambda_contrastive",
        "lambda_rotation",
        "cutout_ratio",
        "cutout_fill",
        "temperature",
        "ct_range",
        "data",
        "labels",
        "val_data",
        "val_labels",
        "init",
        "resume",
        "checkpoint",
        "checkpoint_every",
        "curve",
        "val_every",
        "target_dice",
        "overlap",
        "nsd_tol",
        "output",
        "report",
        "phantom_count",
        "phantom_extent",
        "phantom_shapes",
    ];

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let e = &mut self.encoder;
        match key {
            "mode" => self.mode = v.trim().parse()?,
            "seed" => self.seed = parse(key, v)?,
            "steps" => self.steps = parse(key, v)?,
            "batch" => self.batch = parse(key, v)?,
            "lr" => self.lr = parse(key, v)?,
            "warmup" => self.warmup = parse(key, v)?,
            "beta1" => self.optim.beta1 = parse(key, v)?,
            "beta2" => self.optim.beta2 = parse(key, v)?,
            "adam_eps" => self.optim.eps = parse(key, v)?,
            "weight_decay" => self.optim.weight_decay = parse(key, v)?,
            "patch" => e.patch = parse(key, v)?,
            "embed_dim" => e.embed_dim = parse(key, v)?,
            "depths" => e.depths = parse_array(key, v)?,
            "heads" => e.heads = parse_array(key, v)?,
            "window" => e.window = parse(key, v)?,
            "in_channels" => e.in_channels = parse(key, v)?,
            "rel_pos_bias" => e.rel_pos_bias = parse(key, v)?,
            "n_classes" => self.n_classes = parse(key, v)?,
            "roi" => self.roi = parse_array(key, v)?,
            "lambda_inpaint" => self.lambdas.0 = parse(key, v)?,
            "lambda_contrastive" => self.lambdas.1 = parse(key, v)?,
            "lambda_rotation" => self.lambdas.2 = parse(key, v)?,
            "cutout_ratio" => self.cutout_ratio = parse(key, v)?,
            "cutout_fill" => {
                self.cutout_fill = match v.trim() {
                    "noise" => Fill::Noise,
                    "zero" => Fill::Constant(0.0),
                    other => Fill::Constant(parse(key, other)?),
                }
            }
            "temperature" => self.temperature = parse(key, v)?,
            "ct_range" => {
                self.ct_range = match v.trim() {
                    "none" | "" => None,
                    s => {
                        let [lo, hi] = parse_array::<2, f32>(key, s)?;
                        Some((lo, hi))
                    }
                }
            }
            "data" => self.data = parse_paths(v),
            "labels" => self.labels = parse_paths(v),
            "val_data" => self.val_data = parse_paths(v),
            "val_labels" => self.val_labels = parse_paths(v),
            "init" => self.init = parse_opt_path(v),
            "resume" => self.resume = parse_opt_path(v),
            "checkpoint" => self.checkpoint = parse_opt_path(v),
            "checkpoint_every" => self.checkpoint_every = parse(key, v)?,
            "curve" => self.curve = parse_opt_path(v),
            "val_every" => self.val_every = parse(key, v)?,
            "target_dice" => {
                self.target_dice = match v.trim() {
                    "none" | "" => None,
                    s => Some(parse(key, s)?),
                }
            }
            "overlap" => self.overlap = parse(key, v)?,
            "nsd_tol" => self.nsd_tol = parse(key, v)?,
            "output" => self.output = parse_opt_path(v),
            "report" => self.report = parse_opt_path(v),
            "phantom_count" => self.phantom_count = parse(key, v)?,
            "phantom_extent" => self.phantom_extent = parse_array(key, v)?,
            "phantom_shapes" => self.phantom_shapes = parse(key, v)?,
            _ => return config_err(key, "unknown key"),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Result<String> {
        let e = &self.encoder;
        Ok(match key {
            "mode" => self.mode.as_str().into(),
            "seed" => self.seed.to_string(),
            "steps" => self.steps.to_string(),
            "batch" => self.batch.to_string(),
            "lr" => self.lr.to_string(),
            "warmup" => self.warmup.to_string(),
            "beta1" => self.optim.beta1.to_string(),
            "beta2" => self.optim.beta2.to_string(),
            "adam_eps" => self.optim.eps.to_string(),
            "weight_decay" => self.optim.weight_decay.to_string(),
            "patch" => e.patch.to_string(),
            "embed_dim" => e.embed_dim.to_string(),
            "depths" => join(&e.depths),
            "heads" => join(&e.heads),
            "window" => e.window.to_string(),
            "in_channels" => e.in_channels.to_string(),
            "rel_pos_bias" => e.rel_pos_bias.to_string(),
            "n_classes" => self.n_classes.to_string(),
            "roi" => join(&self.roi),
            "lambda_inpaint" => self.lambdas.0.to_string(),
            "lambda_contrastive" => self.lambdas.1.to_string(),
            "lambda_rotation" => self.lambdas.2.to_string(),
            "cutout_ratio" => self.cutout_ratio.to_string(),
            "cutout_fill" => match self.cutout_fill {
                Fill::Noise => "noise".into(),
                Fill::Constant(c) => c.to_string(),
            },
            "temperature" => self.temperature.to_string(),
            "ct_range" => self.ct_range.map_or("none".into(), |(lo, hi)| format!("{lo},{hi}")),
            "data" => join_paths(&self.data),
            "labels" => join_paths(&self.labels),
            "val_data" => join_paths(&self.val_data),
            "val_labels" => join_paths(&self.val_labels),
            "init" => opt_path(&self.init),
            "resume" => opt_path(&self.resume),
            "checkpoint" => opt_path(&self.checkpoint),
            "checkpoint_every" => self.checkpoint_every.to_string(),
            "curve" => opt_path(&self.curve),
            "val_every" => self.val_every.to_string(),
            "target_dice" => self.target_dice.map_or("none".into(), |d| d.to_string()),
            "overlap" => self.overlap.to_string(),
            "nsd_tol" => self.nsd_tol.to_string(),
            "output" => opt_path(&self.output),
            "report" => opt_path(&self.report),
            "phantom_count" => self.phantom_count.to_string(),
            "phantom_extent" => join(&self.phantom_extent),
            "phantom_shapes" => self.phantom_shapes.to_string(),
            _ => return config_err(key, "unknown key"),
        })
    }

    /// Apply `key = value` lines; blank lines and `#` comments are skipped.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return config_err("config", format!("line {}: expected key = value", n + 1));
            };
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut c = Self::default();
        c.apply_text(text)?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for k in Self::KEYS {
            let _ = writeln!(s, "{k} = {}", self.get(k).expect("known key"));
        }
        s
    }

    pub fn model(&self) -> ModelConfig {
        ModelConfig::new(self.encoder.clone(), self.n_classes)
    }

    pub fn augment(&self) -> Augment {
        Augment { rotate: true, cutout: (self.cutout_ratio > 0.0).then_some(self.cutout_ratio), fill: self.cutout_fill }
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.lambdas.validate()?;
        if self.batch == 0 {
            return config_err("batch", "must be at least 1");
        }
        if self.warmup > self.steps {
            return config_err("warmup", format!("{} exceeds steps {}", self.warmup, self.steps));
        }
        if !(self.lr >= 0.0) {
            return config_err("lr", "must be non-negative");
        }
        if self.n_classes == 0 {
            return config_err("n_classes", "must be at least 1");
        }
        if !(self.cutout_ratio >= 0.0 && self.cutout_ratio < 1.0) {
            return config_err("cutout_ratio", "must be in [0, 1)");
        }
        if !(self.temperature > 0.0) {
            return config_err("temperature", "must be positive");
        }
        if !(self.overlap >= 0.0 && self.overlap < 1.0) {
            return config_err("overlap", "must be in [0, 1)");
        }
        if self.roi.iter().any(|&r| r == 0 || r % self.encoder.patch != 0) {
            return config_err("roi", format!("{:?} must be positive multiples of patch", self.roi));
        }
        Ok(())
    }

    /// Every input path named by the config must exist.
    pub fn check_paths(&self) -> Result<()> {
        let inputs = self
            .data
            .iter()
            .chain(&self.labels)
            .chain(&self.val_data)
            .chain(&self.val_labels)
            .map(|p| ("data", p))
            .chain(self.init.iter().map(|p| ("init", p)))
            .chain(self.resume.iter().map(|p| ("resume", p)));
        for (field, p) in inputs {
            if !p.exists() {
                return config_err(field, format!("{} does not exist", p.display()));
            }
        }
        Ok(())
    }

    /// Compares the architecture fields that determine encoder parameter
    /// shapes; the first mismatch is reported by key.
    pub fn check_encoder_compatible(&self, other: &RunConfig) -> Result<()> {
        for key in ["patch", "embed_dim", "depths", "heads", "window", "in_channels", "rel_pos_bias"] {
            let (a, b) = (self.get(key)?, other.get(key)?);
            if a != b {
                return config_err(key, format!("checkpoint has {b}, run expects {a}"));
            }
        }
        Ok(())
    }
}
