use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Arg, ArgAction, ArgMatches, Command};
use swin_unetr::datapipe::{
    gen_phantom, preprocess_ct, read_labels, read_volume, write_labels, write_volume, LabeledVolume, Volume,
};
use swin_unetr::harness::{
    argmax_labels, finetune, infer_probs, load_checkpoint, load_model, pretrain, CurveRow, Mode, RunConfig,
    TrainOptions,
};
use swin_unetr::metrics::{evaluate_case, write_report};

const SUBCOMMANDS: [(&str, &str); 5] = [
    ("pretrain", "Self-supervised pre-training on unlabeled volumes"),
    ("finetune", "Supervised segmentation training, optionally from a pre-trained encoder"),
    ("infer", "Sliding-window segmentation of volumes with a trained model"),
    ("eval", "Dice, HD95 and NSD of a trained model against reference labels"),
    ("phantom", "Write synthetic labeled phantom volumes"),
];

fn flag(key: &str) -> String {
    key.replace('_', "-")
}

fn help(key: &str) -> &'static str {
    match key {
        "seed" => "Run seed",
        "steps" => "Total optimizer steps",
        "batch" => "Sub-volumes per step",
        "lr" => "Peak learning rate",
        "warmup" => "Linear warm-up steps",
        "beta1" | "beta2" | "adam_eps" => "AdamW moment hyperparameter",
        "weight_decay" => "Decoupled weight decay",
        "patch" => "Patch edge in voxels",
        "embed_dim" => "Embedding width C",
        "depths" => "Blocks per stage, comma-separated",
        "heads" => "Attention heads per stage, comma-separated",
        "window" => "Window size M",
        "in_channels" => "Input channels",
        "rel_pos_bias" => "Learned relative position bias (true/false)",
        "n_classes" => "Segmentation classes including background",
        "roi" => "Training and inference window extents",
        "lambda_inpaint" | "lambda_contrastive" | "lambda_rotation" => "Pre-training loss weight",
        "cutout_ratio" => "Fraction of each view erased",
        "cutout_fill" => "Cutout fill: zero, noise or a constant",
        "temperature" => "Contrastive temperature",
        "ct_range" => "Clip and rescale intensities lo,hi (or none)",
        "data" | "val_data" => "Comma-separated VOL1 images",
        "labels" | "val_labels" => "Comma-separated VOL1 label maps",
        "init" => "Checkpoint to start from (encoder for finetune, model for infer/eval)",
        "resume" => "Checkpoint to resume training from",
        "checkpoint" => "Checkpoint output path",
        "checkpoint_every" => "Save every N steps (0 = only at the end)",
        "curve" => "Training-curve output path",
        "val_every" => "Validate every N steps",
        "target_dice" => "Stop once validation Dice reaches this",
        "overlap" => "Sliding-window overlap in [0, 1)",
        "nsd_tol" => "NSD tolerance in mm",
        "output" => "Output directory",
        "report" => "Metrics report path (default stdout)",
        "phantom_count" => "Phantoms to write",
        "phantom_extent" => "Phantom extents",
        "phantom_shapes" => "Ellipsoids per phantom",
        _ => "",
    }
}

fn cli() -> Command {
    let mut root = Command::new("swin3d")
        .about("Swin UNETR training and evaluation on 3D volumes")
        .subcommand_required(true)
        .arg_required_else_help(true);
    for (name, about) in SUBCOMMANDS {
        let mut sub = Command::new(name)
            .about(about)
            .arg(Arg::new("config").long("config").value_name("FILE").help("key = value settings file"))
            .arg(
                Arg::new("print-config")
                    .long("print-config")
                    .action(ArgAction::SetTrue)
                    .help("Print the resolved settings and exit"),
            );
        for key in RunConfig::KEYS.iter().filter(|&&k| k != "mode") {
            sub = sub.arg(Arg::new(*key).long(flag(key)).value_name("VALUE").allow_hyphen_values(true).help(help(key)));
        }
        root = root.subcommand(sub);
    }
    root
}

/// Defaults, then the config file, then `SWIN3D_SEED`, then flags.
fn resolve(mode: &str, m: &ArgMatches) -> Result<RunConfig> {
    let mut cfg = match m.get_one::<String>("config") {
        Some(p) => RunConfig::load(Path::new(p)).with_context(|| format!("reading config {p}"))?,
        None => RunConfig::default(),
    };
    if let Ok(seed) = std::env::var("SWIN3D_SEED") {
        cfg.set("seed", &seed).context("SWIN3D_SEED")?;
    }
    for key in RunConfig::KEYS.iter().filter(|&&k| k != "mode") {
        if let Some(v) = m.get_one::<String>(key) {
            cfg.set(key, v).with_context(|| format!("--{}", flag(key)))?;
        }
    }
    cfg.mode = mode.parse()?;
    Ok(cfg)
}

fn load_images(cfg: &RunConfig, paths: &[PathBuf]) -> Result<Vec<Volume>> {
    paths
        .iter()
        .map(|p| {
            let v = read_volume(p).with_context(|| format!("reading {}", p.display()))?;
            Ok(match cfg.ct_range {
                Some((lo, hi)) => preprocess_ct(&v, lo, hi)?,
                None => v,
            })
        })
        .collect()
}

fn load_labeled(
    cfg: &RunConfig,
    images: &[PathBuf],
    labels: &[PathBuf],
    n_classes: usize,
) -> Result<Vec<LabeledVolume>> {
    if images.len() != labels.len() {
        bail!("{} volumes but {} label files", images.len(), labels.len());
    }
    let vols = load_images(cfg, images)?;
    vols.into_iter()
        .zip(labels)
        .map(|(v, lp)| {
            let (l, ext) = read_labels(lp).with_context(|| format!("reading {}", lp.display()))?;
            if ext != v.extents() {
                bail!("{}: label extents {ext:?} vs image {:?}", lp.display(), v.extents());
            }
            Ok(LabeledVolume::new(v, l, n_classes)?)
        })
        .collect()
}

fn require<'a>(p: &'a Option<PathBuf>, key: &str) -> Result<&'a PathBuf> {
    p.as_ref().with_context(|| format!("--{} is required", flag(key)))
}

fn log_row(row: &CurveRow, columns: &[&str]) {
    let vals: Vec<String> =
        columns.iter().zip(&row.values).filter(|(_, v)| !v.is_nan()).map(|(c, v)| format!("{c} {v:.4}")).collect();
    eprintln!("step {} lr {:.2e} {}", row.step, row.lr, vals.join(" "));
}

fn stem(p: &Path) -> String {
    p.file_stem().map_or("volume".into(), |s| s.to_string_lossy().into_owned())
}

fn run_phantom(cfg: &RunConfig) -> Result<()> {
    let dir = require(&cfg.output, "output")?;
    std::fs::create_dir_all(dir)?;
    for i in 0..cfg.phantom_count {
        let p = gen_phantom(cfg.seed.wrapping_add(i as u64), cfg.phantom_extent, cfg.phantom_shapes, cfg.n_classes)?;
        write_volume(&dir.join(format!("phantom_{i:03}.vol")), &p.image)?;
        write_labels(&dir.join(format!("phantom_{i:03}_labels.vol")), &p.labels, p.image.extents(), p.image.spacing)?;
    }
    println!("wrote {} phantoms to {}", cfg.phantom_count, dir.display());
    Ok(())
}

fn run_pretrain(cfg: &RunConfig) -> Result<()> {
    require(&cfg.checkpoint, "checkpoint")?;
    let data = load_images(cfg, &cfg.data)?;
    let resume = cfg.resume.as_deref().map(load_checkpoint).transpose()?;
    let cols = swin_unetr::harness::PRETRAIN_COLUMNS;
    let mut log = |r: &CurveRow| log_row(r, cols);
    let out =
        pretrain(cfg, &data, TrainOptions { resume: resume.as_ref(), on_step: Some(&mut log), ..Default::default() })?;
    println!("pre-trained {} steps", out.checkpoint.step);
    Ok(())
}

fn run_finetune(cfg: &RunConfig) -> Result<()> {
    require(&cfg.checkpoint, "checkpoint")?;
    let train = load_labeled(cfg, &cfg.data, &cfg.labels, cfg.n_classes)?;
    let val = load_labeled(cfg, &cfg.val_data, &cfg.val_labels, cfg.n_classes)?;
    let init = cfg.init.as_deref().map(load_checkpoint).transpose()?;
    let resume = cfg.resume.as_deref().map(load_checkpoint).transpose()?;
    let cols = swin_unetr::harness::FINETUNE_COLUMNS;
    let mut log = |r: &CurveRow| log_row(r, cols);
    let out = finetune(
        cfg,
        &train,
        &val,
        init.as_ref(),
        TrainOptions { resume: resume.as_ref(), on_step: Some(&mut log), ..Default::default() },
    )?;
    match out.last_val_dice {
        Some(d) => println!("fine-tuned {} steps, validation Dice {d:.4}", out.checkpoint.step),
        None => println!("fine-tuned {} steps", out.checkpoint.step),
    }
    Ok(())
}

fn run_infer(cfg: &RunConfig) -> Result<()> {
    let ck = load_checkpoint(require(&cfg.init, "init")?)?;
    let (model, store) = load_model(&ck)?;
    let dir = require(&cfg.output, "output")?;
    std::fs::create_dir_all(dir)?;
    for (path, v) in cfg.data.iter().zip(load_images(cfg, &cfg.data)?) {
        let probs = infer_probs(&model, &store, &v.data, cfg.roi, cfg.overlap)?;
        let labels: Vec<u16> = argmax_labels(&probs).into_iter().map(|l| l as u16).collect();
        let out = dir.join(format!("{}_pred.vol", stem(path)));
        write_labels(&out, &labels, v.extents(), v.spacing)?;
        println!("{}", out.display());
    }
    Ok(())
}

fn run_eval(cfg: &RunConfig) -> Result<()> {
    let ck = load_checkpoint(require(&cfg.init, "init")?)?;
    let (model, store) = load_model(&ck)?;
    let n_classes = model.cfg.n_classes;
    let mut rows = Vec::new();
    for (path, v) in cfg.data.iter().zip(load_labeled(cfg, &cfg.data, &cfg.labels, n_classes)?) {
        let probs = infer_probs(&model, &store, &v.image.data, cfg.roi, cfg.overlap)?;
        let spacing = v.image.spacing.map(f64::from);
        let pred = argmax_labels(&probs);
        rows.extend(evaluate_case(
            &stem(path),
            &pred,
            &v.labels_usize(),
            v.image.extents(),
            spacing,
            n_classes,
            cfg.nsd_tol,
        )?);
    }
    match &cfg.report {
        Some(p) => write_report(std::fs::File::create(p)?, &rows)?,
        None => write_report(std::io::stdout().lock(), &rows)?,
    }
    Ok(())
}

fn run(m: &ArgMatches) -> Result<()> {
    let (name, sub) = m.subcommand().expect("subcommand required");
    let cfg = resolve(name, sub)?;
    if sub.get_flag("print-config") {
        print!("{}", cfg.to_text());
        return Ok(());
    }
    cfg.validate()?;
    cfg.check_paths()?;
    match cfg.mode {
        Mode::Phantom => run_phantom(&cfg),
        Mode::Pretrain => run_pretrain(&cfg),
        Mode::Finetune => run_finetune(&cfg),
        Mode::Infer => run_infer(&cfg),
        Mode::Eval => run_eval(&cfg),
    }
}

fn main() -> ExitCode {
    match run(&cli().get_matches()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
