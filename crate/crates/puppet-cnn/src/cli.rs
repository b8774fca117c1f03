//! Command-line surface: train/eval/predict plus the size-study emitters.
//!
//! Exit codes: 0 success, 2 usage or contract errors, 3 file-format or I/O
//! errors, 4 numeric failures (non-finite loss).

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::analysis::{analyze_params, render_params_csv, render_sweep_csv, sweep_depth};
use crate::complexity::{adapt, complexity, ImageU8};
use crate::error::{Error, Result};
use crate::puppet::{Mode, PuppetTemplate};
use crate::train::checkpoint::load_checkpoint;
use crate::train::config::TrainConfig;
use crate::train::data::load_dataset;
use crate::train::{evaluate, run_training, split_train_val, val_k_list};

#[derive(Parser, Debug)]
#[command(
    name = "puppet-cnn",
    version,
    about = "Entropy-adaptive CNN whose kernels are generated per input by a small trainable network"
)]
pub struct Cli {
    #[command(subcommand)]
    pub cmd: Cmd,
}

#[derive(Subcommand, Debug)]
pub enum Cmd {
    /// Train on a dataset directory and write a checkpoint plus metrics CSV.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset directory.
    Eval(EvalArgs),
    /// Classify one image with a checkpoint.
    Predict(PredictArgs),
    /// Print the complexity record (entropies and adaptation knobs) of an image.
    Complexity(ComplexityArgs),
    /// Stored-parameter study over maximum channel widths.
    AnalyzeParams(AnalyzeParamsArgs),
    /// Stored/generated parameter and cost sweep over realized depths.
    SweepDepth(SweepDepthArgs),
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Config file of `key = value` lines.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override the config seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Override the checkpoint output path.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Override the metrics CSV path.
    #[arg(long)]
    pub log: Option<PathBuf>,
    /// Override the dataset directory.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Model wiring: puppet | residual | shared | fixed.
    #[arg(long)]
    pub mode: Option<String>,
    /// Override template channels, e.g. 8,16,32.
    #[arg(long)]
    pub channels: Option<String>,
    /// Pin the realized depth to the configured value instead of adapting it.
    #[arg(long)]
    pub no_depth_adapt: bool,
    /// Pin step size and state fill to 1 instead of entropy-derived values.
    #[arg(long)]
    pub no_param_adapt: bool,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Checkpoint produced by `train`.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Config file; supplies the split seed and fraction for --split val/train.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override the dataset directory.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Portion to evaluate: all, val, or train.
    #[arg(long, default_value = "all")]
    pub split: String,
    /// Override the config seed (split selection).
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Args, Debug)]
pub struct PredictArgs {
    /// Checkpoint produced by `train`.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Image file: binary PGM (P5) or PPM (P6).
    #[arg(long)]
    pub image: PathBuf,
}

#[derive(Args, Debug)]
pub struct ComplexityArgs {
    /// Image file: binary PGM (P5) or PPM (P6).
    #[arg(long)]
    pub image: PathBuf,
}

#[derive(Args, Debug)]
pub struct AnalyzeParamsArgs {
    /// Comma-separated maximum channel widths, e.g. 64,128,256.
    #[arg(long)]
    pub cmax: String,
    /// Write the CSV here instead of stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct SweepDepthArgs {
    /// Template channels, e.g. 8,16,32.
    #[arg(long, default_value = "8,16,32")]
    pub channels: String,
    /// Model wiring: puppet | residual | shared | fixed.
    #[arg(long, default_value = "puppet")]
    pub mode: String,
    /// Depths: comma list and/or inclusive ranges, e.g. 1..50 or 1,2,8.
    #[arg(long, default_value = "1..50")]
    pub depth_list: String,
    /// Square input side for the cost column.
    #[arg(long, default_value_t = 16)]
    pub image_size: usize,
    /// Write the CSV here instead of stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Comma-separated positive integers.
fn parse_int_list(text: &str, what: &str) -> Result<Vec<usize>> {
    let mut out = Vec::new();
    for part in text.split(',') {
        let part = part.trim();
        if part.is_empty() {
            continue;
        }
        out.push(
            part.parse::<usize>()
                .map_err(|_| Error::config(format!("invalid {what} entry '{part}'")))?,
        );
    }
    if out.is_empty() {
        return Err(Error::config(format!("empty {what} list")));
    }
    Ok(out)
}

/// Comma list whose entries may be single depths or inclusive `a..b` ranges.
fn parse_depth_list(text: &str) -> Result<Vec<usize>> {
    let mut out = Vec::new();
    for part in text.split(',') {
        let part = part.trim();
        if part.is_empty() {
            continue;
        }
        if let Some((lo, hi)) = part.split_once("..") {
            let lo: usize = lo
                .trim()
                .parse()
                .map_err(|_| Error::config(format!("invalid depth range '{part}'")))?;
            let hi: usize = hi
                .trim()
                .parse()
                .map_err(|_| Error::config(format!("invalid depth range '{part}'")))?;
            if lo > hi {
                return Err(Error::config(format!("empty depth range '{part}'")));
            }
            out.extend(lo..=hi);
        } else {
            out.push(
                part.parse::<usize>()
                    .map_err(|_| Error::config(format!("invalid depth entry '{part}'")))?,
            );
        }
    }
    if out.is_empty() {
        return Err(Error::config("empty depth list"));
    }
    out.sort_unstable();
    out.dedup();
    Ok(out)
}

fn parse_mode(text: &str) -> Result<Mode> {
    text.parse()
}

/// Load a grayscale or RGB 8-bit image from a PGM/PPM file; `channels`
/// requests a conversion (1 -> luma, 3 -> rgb) when given.
pub fn load_image(path: &Path, channels: Option<usize>) -> Result<ImageU8> {
    let dynimg = image::open(path)
        .map_err(|e| Error::format(path, 0, format!("cannot decode image: {e}")))?;
    let wanted = match channels {
        Some(c) => c,
        None => match &dynimg {
            image::DynamicImage::ImageLuma8(_) => 1,
            _ => 3,
        },
    };
    match wanted {
        1 => {
            let g = dynimg.to_luma8();
            ImageU8::new(g.height() as usize, g.width() as usize, 1, g.into_raw())
        }
        3 => {
            let rgb = dynimg.to_rgb8();
            ImageU8::new(rgb.height() as usize, rgb.width() as usize, 3, rgb.into_raw())
        }
        other => Err(Error::config(format!(
            "unsupported channel request {other} (expected 1 or 3)"
        ))),
    }
}

fn load_config(path: &Option<PathBuf>) -> Result<TrainConfig> {
    match path {
        Some(p) => TrainConfig::from_file(p),
        None => Ok(TrainConfig::default()),
    }
}

fn write_or_print(out: &Option<PathBuf>, text: &str) -> Result<()> {
    match out {
        Some(path) => std::fs::write(path, text).map_err(|e| Error::io(path, e)),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn cmd_train(args: &TrainArgs) -> Result<()> {
    let mut cfg = load_config(&args.config)?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &args.out {
        cfg.checkpoint_path = out.clone();
    }
    if let Some(log) = &args.log {
        cfg.log_path = log.clone();
    }
    if let Some(data) = &args.data {
        cfg.data_dir = data.clone();
    }
    if let Some(mode) = &args.mode {
        cfg.mode = parse_mode(mode)?;
    }
    if let Some(channels) = &args.channels {
        cfg.channels = parse_int_list(channels, "channel")?;
    }
    if args.no_depth_adapt {
        cfg.depth_adapt = false;
    }
    if args.no_param_adapt {
        cfg.param_adapt = false;
    }
    cfg.validate()?;
    let outcome = run_training(&cfg)?;
    let last = outcome.report.epochs.last();
    println!(
        "trained {} epochs on {:?} (mode {}, stored params {})",
        outcome.report.epochs.len(),
        cfg.data_dir,
        cfg.mode,
        outcome.final_model.stored_param_count()
    );
    if let Some(m) = last {
        println!(
            "final epoch: train_loss {:.6} val_top1 {:.6} val_top5 {:.6}",
            m.train_loss, m.val_top1, m.val_top5
        );
    }
    match outcome.report.best_epoch {
        Some(e) => println!("best epoch {} checkpoint -> {:?}", e, cfg.checkpoint_path),
        None => println!("checkpoint -> {:?}", cfg.checkpoint_path),
    }
    println!("metrics -> {:?}", cfg.log_path);
    Ok(())
}

fn cmd_eval(args: &EvalArgs) -> Result<()> {
    let mut cfg = load_config(&args.config)?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(data) = &args.data {
        cfg.data_dir = data.clone();
    }
    let model = load_checkpoint(&args.checkpoint)?;
    let full = load_dataset(&cfg.data_dir)?;
    let ds = match args.split.as_str() {
        "all" => full,
        "val" => split_train_val(&full, cfg.val_fraction, cfg.seed)?.1,
        "train" => split_train_val(&full, cfg.val_fraction, cfg.seed)?.0,
        other => {
            return Err(Error::config(format!(
                "unknown split '{other}' (expected all, val, or train)"
            )))
        }
    };
    let k_list = val_k_list(model.template.num_classes);
    let metrics = evaluate(&model, &ds, &k_list)?;
    println!("samples: {}", metrics.n);
    for (k, acc) in &metrics.top {
        println!("top{k}: {acc:.6}");
    }
    println!("mean_depth: {:.6}", metrics.mean_depth);
    println!("mean_multadds: {:.3}", metrics.mean_multadds);
    println!("mean_latency_s: {:.6}", metrics.mean_latency_s);
    Ok(())
}

fn cmd_predict(args: &PredictArgs) -> Result<()> {
    let model = load_checkpoint(&args.checkpoint)?;
    let img = load_image(&args.image, Some(model.template.in_channels))?;
    let pred = model.predict(&img)?;
    println!("class: {}", pred.class);
    let logits: Vec<String> = pred.logits.iter().map(|v| format!("{v:.6}")).collect();
    println!("logits: [{}]", logits.join(", "));
    if let Some(a) = pred.adaptation {
        println!(
            "H: {:.6} dl: {:.6} D: {} p0: {:.6}",
            a.score, a.depth_scale, a.depth, a.param_scale
        );
    }
    println!(
        "realized_depth: {} conv_layers: {} multadds: {}",
        pred.realized_depth, pred.stats.conv_layers, pred.stats.multadds
    );
    Ok(())
}

fn cmd_complexity(args: &ComplexityArgs) -> Result<()> {
    let img = load_image(&args.image, None)?;
    let score = complexity(&img);
    let a = adapt(score.combined)?;
    println!("E_pixel {:.6}", score.pixel);
    println!("E_freq {:.6}", score.frequency);
    println!("H {:.6}", score.combined);
    println!("dl {:.6}", a.depth_scale);
    println!("D {}", a.depth);
    println!("p0 {:.6}", a.param_scale);
    Ok(())
}

fn cmd_analyze_params(args: &AnalyzeParamsArgs) -> Result<()> {
    let c_list = parse_int_list(&args.cmax, "cmax")?;
    for &c in &c_list {
        if c < 1 {
            return Err(Error::config("cmax entries must be at least 1"));
        }
    }
    let report = analyze_params(&c_list)?;
    write_or_print(&args.out, &render_params_csv(&report))
}

fn cmd_sweep_depth(args: &SweepDepthArgs) -> Result<()> {
    let channels = parse_int_list(&args.channels, "channel")?;
    let mode = parse_mode(&args.mode)?;
    let depths = parse_depth_list(&args.depth_list)?;
    if args.image_size < 1 {
        return Err(Error::config("image_size must be at least 1"));
    }
    // classes/in-channels affect only the constant head term; use the
    // training defaults so numbers line up with desk-scale runs
    let template = PuppetTemplate::new(channels, 3, 4, 1, mode)?;
    let rows = sweep_depth(&template, &depths, args.image_size)?;
    write_or_print(&args.out, &render_sweep_csv(&rows))
}

/// Dispatch a parsed command line.
pub fn run(cli: &Cli) -> Result<()> {
    match &cli.cmd {
        Cmd::Train(args) => cmd_train(args),
        Cmd::Eval(args) => cmd_eval(args),
        Cmd::Predict(args) => cmd_predict(args),
        Cmd::Complexity(args) => cmd_complexity(args),
        Cmd::AnalyzeParams(args) => cmd_analyze_params(args),
        Cmd::SweepDepth(args) => cmd_sweep_depth(args),
    }
}
