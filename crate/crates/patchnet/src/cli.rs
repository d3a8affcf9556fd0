//! Subcommands of the `patchnet` binary.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use patchnet_core::analysis::{converged_probs, feature_mask, generate_synthetic, FeatureCounts, SyntheticSpec};
use patchnet_core::imaging::Preprocess;
use patchnet_core::metrics::dataset_report;
use patchnet_core::nn::{grad_check, kaiming_init};
use patchnet_core::optim::train;
use patchnet_core::patchcore::{extract_heatmap, heatmap_to_image};
use patchnet_core::{PatchDims, RngState, SubnetParams};

use crate::checkpoint::{load_checkpoint, save_checkpoint};
use crate::config::{parse_preprocess_key, preprocess_lines, RunConfig};
use crate::dataset::{write_split, Split};
use crate::error::{io_err, Error, Result};
use crate::image_io::{is_image_path, load_image, save_image};
use crate::report::{overlap_report_text, stop_reason_name, train_report_text};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

pub const GRADCHECK_TOLERANCE: f64 = 1e-4;
pub const BEST_CHECKPOINT: &str = "best.pnet";
pub const FINAL_CHECKPOINT: &str = "final.pnet";

/// Tag mixed into the seed for parameter initialization, so it never
/// collides with the per-epoch streams.
const INIT_STREAM: u64 = u64::MAX;

#[derive(Debug, Parser)]
#[command(name = "patchnet", version, about = "Patch-averaging binary image classifier")]
pub struct Cli {
    /// Worker threads for heatmap extraction and evaluation.
    #[arg(long, global = true, value_parser = clap::value_parser!(u32).range(1..))]
    pub threads: Option<u32>,
    /// Single worker thread and fixed reduction order.
    #[arg(long, global = true)]
    pub deterministic: bool,
    /// Print a progress line every epoch.
    #[arg(long, short, global = true)]
    pub verbose: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a subnet on a dataset directory.
    Train(TrainArgs),
    /// Render the stride-1 heatmap of one image.
    Heatmap(HeatmapArgs),
    /// Compare heatmaps with feature masks over a dataset split.
    Eval(EvalArgs),
    /// Write a synthetic square dataset.
    Synth(SynthArgs),
    /// Closed-form converged probabilities for feature counts.
    Converge(ConvergeArgs),
    /// Finite-difference check of the analytic gradients.
    Gradcheck(GradcheckArgs),
    /// Apply resize, gamma and color constancy to images.
    Preprocess(PreprocessArgs),
}

#[derive(Debug, Args, Default)]
pub struct PreprocessFlags {
    /// Resize to HxW before anything else.
    #[arg(long, value_name = "HxW")]
    pub resize: Option<String>,
    /// Gamma exponent.
    #[arg(long)]
    pub gamma: Option<String>,
    /// `decode` (in^(1/gamma), default) or `encode` (in^gamma).
    #[arg(long)]
    pub gamma_direction: Option<String>,
    /// Shades-of-gray Minkowski norm for three-channel images.
    #[arg(long)]
    pub color_constancy: Option<String>,
}

impl PreprocessFlags {
    fn pairs(&self) -> Vec<(&'static str, &str)> {
        let mut out = Vec::new();
        for (k, v) in [
            ("resize", &self.resize),
            ("gamma", &self.gamma),
            ("gamma_direction", &self.gamma_direction),
            ("color_constancy", &self.color_constancy),
        ] {
            if let Some(v) = v {
                out.push((k, v.as_str()));
            }
        }
        out
    }

    fn resolve(&self) -> Result<Preprocess> {
        let mut pre = Preprocess::default();
        for (k, v) in self.pairs() {
            parse_preprocess_key(&mut pre, k, v)?;
        }
        Ok(pre)
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// `key = value` configuration file; flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Dataset root holding `train/` and `val/`.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Run directory for checkpoints, report and resolved config.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub train_split: Option<String>,
    #[arg(long)]
    pub val_split: Option<String>,
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    pub patch_size: Option<u64>,
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    pub stride: Option<u64>,
    /// `clamp` (final patch shifted to the border) or `drop`.
    #[arg(long)]
    pub coverage: Option<String>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    pub batch_size: Option<u64>,
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    pub patience: Option<u64>,
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    pub max_epochs: Option<u64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Keep every image each epoch instead of undersampling the majority class.
    #[arg(long)]
    pub no_balance: bool,
    /// Keep training after the training accuracy reaches 100%.
    #[arg(long)]
    pub no_accuracy_stop: bool,
    #[command(flatten)]
    pub preprocess: PreprocessFlags,
}

#[derive(Debug, Args)]
pub struct HeatmapArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub image: PathBuf,
    /// Grayscale output, `round(255 * q)` per pixel.
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub preprocess: PreprocessFlags,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Dataset root.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value = "test")]
    pub split: String,
    #[arg(long)]
    pub report: PathBuf,
    #[arg(long, default_value_t = patchnet_core::metrics::DEFAULT_THRESHOLD)]
    pub threshold: f64,
    /// Also write every heatmap into this directory.
    #[arg(long)]
    pub heatmaps: Option<PathBuf>,
    #[command(flatten)]
    pub preprocess: PreprocessFlags,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 128, value_parser = clap::value_parser!(u64).range(1..))]
    pub size: u64,
    /// Side of the class-1 square; defaults to half the image size.
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    pub square: Option<u64>,
    #[arg(long, default_value_t = 0)]
    pub row: u64,
    #[arg(long, default_value_t = 0)]
    pub col: u64,
    #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u64).range(1..))]
    pub copies: u64,
    /// Splits to write; each gets the same images.
    #[arg(long, value_delimiter = ',', default_value = "train,val,test")]
    pub splits: Vec<String>,
}

#[derive(Debug, Args)]
pub struct ConvergeArgs {
    /// Patches carrying only the shared feature.
    #[arg(long)]
    pub a: u64,
    /// Patches carrying the class-1 feature.
    #[arg(long)]
    pub b: u64,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 200, value_parser = clap::value_parser!(u64).range(1..))]
    pub probes: u64,
    #[arg(long, default_value_t = 5, value_parser = clap::value_parser!(u64).range(1..))]
    pub patch_size: u64,
    #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u64).range(1..=3))]
    pub channels: u64,
}

#[derive(Debug, Args)]
pub struct PreprocessArgs {
    /// Image file or directory of images.
    #[arg(long)]
    pub input: PathBuf,
    /// Output file, or directory when the input is a directory.
    #[arg(long)]
    pub output: PathBuf,
    #[command(flatten)]
    pub preprocess: PreprocessFlags,
}

/// Parses `args` (program name first) and runs the command; returns the
/// process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match execute(cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Usage(_) => EXIT_USAGE,
                _ => EXIT_FAILURE,
            }
        }
    }
}

fn configure_threads(threads: Option<usize>, deterministic: bool) {
    let n = if deterministic { Some(1) } else { threads };
    if let Some(n) = n {
        // Fails only if a pool was already installed, e.g. by an earlier
        // in-process run; the existing pool is then kept.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
}

pub fn execute(cli: Cli) -> Result<()> {
    let threads = cli.threads.map(|n| n as usize);
    match cli.command {
        Command::Train(args) => cmd_train(args, threads, cli.deterministic, cli.verbose),
        Command::Heatmap(args) => {
            configure_threads(threads, cli.deterministic);
            cmd_heatmap(args)
        }
        Command::Eval(args) => {
            configure_threads(threads, cli.deterministic);
            cmd_eval(args)
        }
        Command::Synth(args) => cmd_synth(args),
        Command::Converge(args) => cmd_converge(args),
        Command::Gradcheck(args) => cmd_gradcheck(args),
        Command::Preprocess(args) => cmd_preprocess(args),
    }
}

/// Config file, then flags, then the global determinism/thread flags.
pub fn resolve_train_config(args: &TrainArgs, threads: Option<usize>, deterministic: bool) -> Result<RunConfig> {
    let mut cfg = match &args.config {
        Some(path) => RunConfig::from_file(path)?,
        None => RunConfig::default(),
    };
    let mut set = |k: &str, v: Option<String>| -> Result<()> {
        match v {
            Some(v) => cfg.set(k, &v),
            None => Ok(()),
        }
    };
    set("data", args.data.as_ref().map(|p| p.display().to_string()))?;
    set("out", args.out.as_ref().map(|p| p.display().to_string()))?;
    set("train_split", args.train_split.clone())?;
    set("val_split", args.val_split.clone())?;
    set("patch_size", args.patch_size.map(|v| v.to_string()))?;
    set("stride", args.stride.map(|v| v.to_string()))?;
    set("coverage", args.coverage.clone())?;
    set("lr", args.lr.map(|v| v.to_string()))?;
    set("batch_size", args.batch_size.map(|v| v.to_string()))?;
    set("patience", args.patience.map(|v| v.to_string()))?;
    set("max_epochs", args.max_epochs.map(|v| v.to_string()))?;
    set("seed", args.seed.map(|v| v.to_string()))?;
    set("balance_classes", args.no_balance.then(|| "false".into()))?;
    set(
        "stop_at_full_train_accuracy",
        args.no_accuracy_stop.then(|| "false".into()),
    )?;
    for (k, v) in args.preprocess.pairs() {
        set(k, Some(v.into()))?;
    }
    set("deterministic", deterministic.then(|| "true".into()))?;
    set("threads", threads.map(|n| n.to_string()))?;
    cfg.train.validate().map_err(|e| Error::Usage(e.to_string()))?;
    Ok(cfg)
}

fn cmd_train(args: TrainArgs, threads: Option<usize>, deterministic: bool, verbose: bool) -> Result<()> {
    let cfg = resolve_train_config(&args, threads, deterministic)?;
    configure_threads(cfg.threads, cfg.deterministic);
    let data = cfg
        .data
        .clone()
        .ok_or_else(|| Error::Usage("no dataset given (--data or `data` in the config)".into()))?;
    let train_split = Split::scan(&data, &cfg.train_split)?;
    let val_split = Split::scan(&data, &cfg.val_split)?;
    let train_set = train_split.load_samples(&cfg.preprocess)?;
    let val_set = val_split.load_samples(&cfg.preprocess)?;
    let channels = train_set[0].image.channels();
    if let Some(s) = train_set
        .iter()
        .chain(&val_set)
        .find(|s| s.image.channels() != channels)
    {
        return Err(Error::Dataset(format!(
            "mixed channel counts: {} vs {channels}",
            s.image.channels()
        )));
    }

    fs::create_dir_all(&cfg.out).map_err(io_err(&cfg.out))?;
    let config_path = cfg.out.join("config.txt");
    fs::write(&config_path, cfg.to_text()).map_err(io_err(&config_path))?;
    train_split.write_index(&cfg.out.join("index_train.tsv"))?;
    val_split.write_index(&cfg.out.join("index_val.tsv"))?;

    let p = &cfg.train.patch;
    let dims = PatchDims::new(p.height, p.width, channels)?;
    let init: SubnetParams<f32> = kaiming_init(&mut RngState::new(cfg.train.seed).derive(INIT_STREAM), dims);
    let [n0, n1] = train_split.class_counts();
    println!(
        "training on {} images ({n0} class 0, {n1} class 1), validating on {}",
        train_set.len(),
        val_set.len()
    );

    let best_path = cfg.out.join(BEST_CHECKPOINT);
    let mut save_error = None;
    let outcome = train(init, &train_set, &val_set, &cfg.train, &mut |r, params| {
        if r.improved && save_error.is_none() {
            save_error = save_checkpoint(params, &best_path).err();
        }
        if verbose || r.epoch % 100 == 0 {
            println!(
                "epoch={} train_loss={:.6} train_acc={:.4} val_loss={:.6} val_acc={:.4}{}",
                r.epoch,
                r.train_loss,
                r.train_accuracy,
                r.val_loss,
                r.val_accuracy,
                if r.improved { " *" } else { "" }
            );
        }
    })?;
    if let Some(e) = save_error {
        return Err(e);
    }
    save_checkpoint(&outcome.last, &cfg.out.join(FINAL_CHECKPOINT))?;
    let report_path = cfg.out.join("report.txt");
    fs::write(&report_path, train_report_text(&outcome.report, BEST_CHECKPOINT)).map_err(io_err(&report_path))?;
    let r = &outcome.report;
    println!(
        "stopped: {} after {} epochs ({} steps); best epoch {} val_loss={:.6}",
        stop_reason_name(r.stop_reason),
        r.epochs.len(),
        r.optimizer_steps,
        r.best_epoch,
        r.best_val_loss
    );
    Ok(())
}

fn cmd_heatmap(args: HeatmapArgs) -> Result<()> {
    let params = load_checkpoint(&args.model)?;
    let pre = args.preprocess.resolve()?;
    let image = pre.apply(&load_image(&args.image)?)?;
    let heatmap = extract_heatmap(&params, &image)?;
    save_image(&heatmap_to_image(&heatmap)?, &args.out)?;
    let values = heatmap.data();
    let mean = values.iter().map(|&v| v as f64).sum::<f64>() / values.len() as f64;
    println!(
        "heatmap {}x{} written to {} (mean {mean:.6})",
        heatmap.height(),
        heatmap.width(),
        args.out.display()
    );
    Ok(())
}

fn cmd_eval(args: EvalArgs) -> Result<()> {
    if !(0.0..=1.0).contains(&args.threshold) {
        return Err(Error::Usage(format!("threshold {} outside [0, 1]", args.threshold)));
    }
    let params = load_checkpoint(&args.model)?;
    let pre = args.preprocess.resolve()?;
    let split = Split::scan(&args.data, &args.split)?;
    let missing = split.missing_masks();
    if !missing.is_empty() {
        return Err(Error::MissingMasks(missing));
    }
    let items = split.load_masked(&pre)?;
    let report = dataset_report(&params, &items, args.threshold)?;
    if let Some(dir) = &args.heatmaps {
        for item in &items {
            let heatmap = extract_heatmap(&params, &item.image)?;
            let name = item.id.replace('/', "_");
            let name = Path::new(&name).with_extension("png");
            save_image(&heatmap_to_image(&heatmap)?, &dir.join(name))?;
        }
    }
    if let Some(dir) = args.report.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    let text = overlap_report_text(&report, &preprocess_lines(&pre));
    fs::write(&args.report, text).map_err(io_err(&args.report))?;
    let show = |v: Option<f64>| v.map_or("none".into(), |v| format!("{v:.6}"));
    println!(
        "images={} exact_match={:.6} recall={} auroc={} (threshold {})",
        report.images.len(),
        report.average_exact_match,
        show(report.average_recall),
        show(report.average_auroc),
        report.threshold
    );
    Ok(())
}

fn cmd_synth(args: SynthArgs) -> Result<()> {
    let size = args.size as usize;
    let spec = SyntheticSpec {
        square_height: args.square.map_or(size / 2, |s| s as usize),
        square_width: args.square.map_or(size / 2, |s| s as usize),
        anchor: (args.row as usize, args.col as usize),
        copies_per_class: args.copies as usize,
        ..SyntheticSpec::upper_left(size, size / 2)
    };
    spec.validate().map_err(|e| Error::Usage(e.to_string()))?;
    let samples = generate_synthetic(&spec)?;
    let blank = patchnet_core::Image::filled(size, size, 1, 0)?;
    let square = feature_mask(&spec)?;
    let masks: Vec<_> = samples
        .iter()
        .map(|s| if s.label == 1 { square.clone() } else { blank.clone() })
        .collect();
    for split in &args.splits {
        write_split(&args.out, split, &samples, Some(&masks))?;
    }
    println!(
        "wrote {} images per split to {} ({})",
        samples.len(),
        args.out.display(),
        args.splits.join(", ")
    );
    Ok(())
}

/// Six decimals with trailing zeros removed; an exact zero prints as `0`.
pub fn format_p0(p0: f64) -> String {
    let s = format!("{p0:.6}");
    let s = s.trim_end_matches('0').trim_end_matches('.');
    if s.is_empty() || s == "-" {
        "0".into()
    } else {
        s.into()
    }
}

fn cmd_converge(args: ConvergeArgs) -> Result<()> {
    let counts = FeatureCounts::new(args.a, args.b).map_err(|e| Error::Usage(e.to_string()))?;
    let p = converged_probs(counts).map_err(|e| match e {
        patchnet_core::Error::NoClassOneFeatures => Error::Usage(e.to_string()),
        other => other.into(),
    })?;
    println!("p0={} p1={:.1}", format_p0(p.p0), p.p1);
    Ok(())
}

fn cmd_gradcheck(args: GradcheckArgs) -> Result<()> {
    let size = args.patch_size as usize;
    let dims = PatchDims::new(size, size, args.channels as usize)?;
    let mut rng = RngState::new(args.seed);
    let params: SubnetParams<f64> = kaiming_init(&mut rng.derive(INIT_STREAM), dims);
    let report = grad_check(&params, &mut rng, args.probes as usize)?;
    let pass = report.max_relative_error < GRADCHECK_TOLERANCE;
    println!(
        "max_relative_error={:e} probes={} resampled={} tolerance={:e} {}",
        report.max_relative_error,
        report.probes,
        report.resampled,
        GRADCHECK_TOLERANCE,
        if pass { "PASS" } else { "FAIL" }
    );
    if pass {
        Ok(())
    } else {
        Err(Error::Failed(format!(
            "gradient check failed, worst probe {:?}",
            report.worst
        )))
    }
}

fn cmd_preprocess(args: PreprocessArgs) -> Result<()> {
    let pre = args.preprocess.resolve()?;
    if args.input.is_dir() {
        let mut n = 0;
        let mut files: Vec<PathBuf> = fs::read_dir(&args.input)
            .map_err(io_err(&args.input))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_file() && is_image_path(p))
            .collect();
        files.sort();
        for path in files {
            let out = args.output.join(path.file_name().expect("file"));
            save_image(&pre.apply(&load_image(&path)?)?, &out)?;
            n += 1;
        }
        println!("preprocessed {n} images into {}", args.output.display());
    } else {
        save_image(&pre.apply(&load_image(&args.input)?)?, &args.output)?;
        println!("wrote {}", args.output.display());
    }
    Ok(())
}
