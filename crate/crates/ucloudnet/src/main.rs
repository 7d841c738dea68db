use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use image::imageops::FilterType;
use image::GrayImage;
use ucloudnet_core::autograd::Primitive;
use ucloudnet_core::data::{self, Sample, SampleSource};
use ucloudnet_core::gradcheck;
use ucloudnet_core::metrics::{self, EvalReport};
use ucloudnet_core::train::{self, LossHistory, RunConfig, TrainState};
use ucloudnet_core::{DType, Element};

use ucloudnet::config::CliConfig;
use ucloudnet::dataset::{self, DiskDataset};
use ucloudnet::{io, report, Error, Result};

#[derive(Parser)]
#[command(name = "ucloudnet", version, about = "Sky/cloud segmentation with a residual U-Net")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write a checkpoint, loss history and resolved config.
    Train(TrainArgs),
    /// Evaluate a checkpoint: eval_report.txt and pr_curve.csv.
    Eval(EvalArgs),
    /// Segment one image into a 0/255 mask.
    Predict(PredictArgs),
    /// Check every differentiable primitive against finite differences.
    Gradcheck(GradcheckArgs),
    /// Write only the precision/recall curve of a checkpoint.
    PrCurve(EvalArgs),
}

#[derive(Args)]
struct RunFlags {
    /// key=value file; flags override its values
    #[arg(long)]
    config: Option<PathBuf>,
    /// dataset root holding images/ and GTmaps/
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// day, night or all
    #[arg(long)]
    subset: Option<String>,
    #[arg(long)]
    k: Option<usize>,
    /// enable the auxiliary deep-supervision losses
    #[arg(long, overrides_with = "no_aux")]
    aux: bool,
    #[arg(long)]
    no_aux: bool,
    /// decay the learning rate by 0.95 per epoch
    #[arg(long, overrides_with = "no_lr_decay")]
    lr_decay: bool,
    #[arg(long)]
    no_lr_decay: bool,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// seeds initialization and batch order
    #[arg(long)]
    seed: Option<u64>,
    /// seeds the train/test split and synthetic data
    #[arg(long)]
    data_seed: Option<u64>,
    /// network input size, HxW or a single number
    #[arg(long)]
    target_size: Option<String>,
    #[arg(long)]
    split_ratio: Option<f64>,
    /// train on every sample instead of the training split
    #[arg(long)]
    all_data: bool,
    /// generate N synthetic samples instead of reading a dataset
    #[arg(long, value_name = "N")]
    synthetic: Option<usize>,
    /// also save a checkpoint every N epochs
    #[arg(long, value_name = "N")]
    checkpoint_every: Option<usize>,
    /// train in 64-bit floating point
    #[arg(long)]
    f64: bool,
    /// output directory (default runs/<run name>)
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    run: RunFlags,
    /// continue from this checkpoint up to the configured epoch count
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// dataset root; defaults to the synthetic data recorded in the checkpoint
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// test, train or all
    #[arg(long, default_value = "test")]
    split: String,
    #[arg(long, default_value_t = metrics::DEFAULT_THRESHOLD)]
    threshold: f64,
    /// output directory (default: next to the checkpoint)
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    image: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, default_value_t = metrics::DEFAULT_THRESHOLD)]
    threshold: f64,
    /// output mask image
    #[arg(long)]
    out: PathBuf,
    /// also write the probability map as 8-bit grayscale
    #[arg(long, value_name = "PATH")]
    prob: Option<PathBuf>,
}

#[derive(Args)]
struct GradcheckArgs {
    /// random instances per check
    #[arg(long, default_value_t = 20)]
    seeds: u64,
    #[arg(long, hide = true)]
    fault: Option<String>,
}

fn usage(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

fn resolve(flags: &RunFlags, base: CliConfig) -> Result<CliConfig> {
    let mut c = base;
    if let Some(path) = &flags.config {
        c.apply_file(path)?;
    }
    let mut set = |key: &str, v: Option<String>| match v {
        Some(v) => c.set(key, &v),
        None => Ok(()),
    };
    set("subset", flags.subset.clone())?;
    set("k", flags.k.map(|v| v.to_string()))?;
    set("epochs", flags.epochs.map(|v| v.to_string()))?;
    set("batch_size", flags.batch_size.map(|v| v.to_string()))?;
    set("seed", flags.seed.map(|v| v.to_string()))?;
    set("data_seed", flags.data_seed.map(|v| v.to_string()))?;
    set("target_size", flags.target_size.clone())?;
    set("split_ratio", flags.split_ratio.map(|v| v.to_string()))?;
    set("synthetic", flags.synthetic.map(|v| v.to_string()))?;
    set("checkpoint_every", flags.checkpoint_every.map(|v| v.to_string()))?;
    if flags.aux {
        c.run.aux = true;
    }
    if flags.no_aux {
        c.run.aux = false;
    }
    if flags.lr_decay {
        c.run.lr_decay = true;
    }
    if flags.no_lr_decay {
        c.run.lr_decay = false;
    }
    if flags.all_data {
        c.run.holdout = false;
    }
    if flags.f64 {
        c.run.dtype = DType::F64;
    }
    if let Some(d) = &flags.dataset {
        c.dataset = Some(d.clone());
    }
    if let Some(o) = &flags.out {
        c.out = Some(o.clone());
    }
    c.run.validate()?;
    if c.run.synthetic == 0 && c.dataset.is_none() {
        return Err(usage("no data: pass --dataset <root> or --synthetic <N>"));
    }
    Ok(c)
}

enum Source<T> {
    Memory(Vec<Sample<T>>),
    Disk(DiskDataset),
}

impl<T: Element> Source<T> {
    fn open(cfg: &RunConfig, dataset: Option<&Path>) -> Result<Self> {
        let (h, w) = cfg.target_size;
        match dataset {
            Some(root) => Ok(Source::Disk(DiskDataset::open(root, cfg.subset, cfg.target_size)?)),
            None if cfg.synthetic > 0 => Ok(Source::Memory(data::synth_dataset(cfg.synthetic, h, w, cfg.data_seed)?)),
            None => Err(usage("no data: pass --dataset <root>")),
        }
    }

    fn as_dyn(&self) -> &dyn SampleSource<T> {
        match self {
            Source::Memory(v) => v,
            Source::Disk(d) => d,
        }
    }

    fn ids(&self) -> Vec<String> {
        match self {
            Source::Memory(v) => v.iter().map(|s| s.id.clone()).collect(),
            Source::Disk(d) => d.ids(),
        }
    }
}

fn write(path: &Path, text: &str) -> Result<()> {
    io::write_atomic(path, text.as_bytes())
}

/// Rows of an earlier history up to and including `iteration`, without header.
fn earlier_rows(path: &Path, iteration: u64) -> String {
    let Ok(text) = std::fs::read_to_string(path) else { return String::new() };
    text.lines()
        .skip(1)
        .filter(|l| l.split(',').next().and_then(|i| i.parse::<u64>().ok()).is_some_and(|i| i <= iteration))
        .map(|l| format!("{l}\n"))
        .collect()
}

fn cmd_train<T: Element>(cc: &CliConfig, resume: Option<&Path>) -> Result<()> {
    let cfg = &cc.run;
    let out = cc.out_dir();
    std::fs::create_dir_all(&out).map_err(|e| Error::Io { path: out.clone(), source: e })?;
    write(&out.join("config.txt"), &cc.to_text())?;
    let source = Source::<T>::open(cfg, cc.dataset.as_deref())?;
    let n = source.as_dyn().len();
    let train_ids = cfg.training_ids(n)?;
    write(&out.join("split.tsv"), &dataset::split_listing(&source.ids(), &train_ids))?;

    let ckpt = out.join(format!("{}.ckpt", cfg.run_name()));
    let history_path = out.join("loss_history.csv");
    let mut state = match resume {
        Some(path) => {
            let (s, saved) = io::load_checkpoint::<T>(path)?;
            if saved.k != cfg.k || saved.dtype != cfg.dtype {
                return Err(usage(format!(
                    "{} holds a k={} {} model; cannot resume it as k={} {}",
                    path.display(),
                    saved.k,
                    saved.dtype.name(),
                    cfg.k,
                    cfg.dtype.name()
                )));
            }
            s
        }
        None => TrainState::new(cfg)?,
    };
    let prefix = if resume.is_some() { earlier_rows(&history_path, state.iteration) } else { String::new() };
    let save_history = |h: &LossHistory| {
        let csv = h.to_csv();
        let (header, rows) = csv.split_once('\n').unwrap_or((&csv, ""));
        write(&history_path, &format!("{header}\n{prefix}{rows}"))
    };

    eprintln!(
        "training {} on {} samples ({} in training set), {} epochs from epoch {}",
        cfg.run_name(),
        n,
        train_ids.len(),
        cfg.epochs,
        state.epoch
    );
    let mut history = LossHistory::default();
    let every = cfg.checkpoint_every;
    let result = train::fit_until(&mut state, cfg, source.as_dyn(), &train_ids, cfg.epochs, &mut history, |st, h| {
        if let Some(r) = h.last() {
            eprintln!("epoch {:>4}  iter {:>7}  total {:.6}  lr {:.3e}", st.epoch, r.iter, r.total, r.lr);
        }
        if every > 0 && st.epoch % every == 0 {
            io::save_checkpoint(&ckpt, st, cfg).map_err(|e| ucloudnet_core::Error::Checkpoint(e.to_string()))?;
        }
        Ok(())
    });
    save_history(&history)?;
    if let Err(e) = result {
        if matches!(e, ucloudnet_core::Error::NonFinite(_)) && ckpt.exists() {
            eprintln!("last good checkpoint kept at {}", ckpt.display());
        }
        return Err(e.into());
    }
    io::save_checkpoint(&ckpt, &state, cfg)?;
    if let Some(r) = history.last() {
        println!("{} final total loss {:.6} after {} iterations", cfg.run_name(), r.total, r.iter);
    }
    println!("checkpoint {}", ckpt.display());
    Ok(())
}

fn pick_ids(cfg: &RunConfig, n: usize, split: &str) -> Result<Vec<usize>> {
    match split {
        "test" => Ok(cfg.test_ids(n)?),
        "train" => Ok(cfg.training_ids(n)?),
        "all" => Ok((0..n).collect()),
        other => Err(usage(format!("--split must be test, train or all, got {other:?}"))),
    }
}

fn run_eval<T: Element>(args: &EvalArgs) -> Result<(RunConfig, EvalReport)> {
    let (mut state, cfg) = io::load_checkpoint::<T>(&args.checkpoint)?;
    let source = Source::<T>::open(&cfg, args.dataset.as_deref())?;
    let ids = pick_ids(&cfg, source.as_dyn().len(), &args.split)?;
    let r = metrics::evaluate(&mut state.model, source.as_dyn(), &ids, cfg.batch_size, args.threshold)?;
    Ok((cfg, r))
}

fn eval_out_dir(args: &EvalArgs) -> PathBuf {
    args.out.clone().unwrap_or_else(|| args.checkpoint.parent().map(Path::to_path_buf).unwrap_or_default())
}

fn cmd_eval(args: &EvalArgs, curve_only: bool) -> Result<()> {
    if !args.checkpoint.is_file() {
        return Err(usage(format!("checkpoint {} does not exist", args.checkpoint.display())));
    }
    let (_, dtype) = io::peek_checkpoint(&args.checkpoint)?;
    let (cfg, r) = match dtype {
        DType::F32 => run_eval::<f32>(args)?,
        DType::F64 => run_eval::<f64>(args)?,
    };
    let out = eval_out_dir(args);
    write(&out.join("pr_curve.csv"), &report::pr_curve_csv(&r.curve))?;
    if curve_only {
        println!("auc_pr={:.6}", r.auc_pr);
        return Ok(());
    }
    let text = report::eval_report(&cfg.run_name(), &args.split, &r);
    write(&out.join("eval_report.txt"), &text)?;
    print!("{text}");
    Ok(())
}

fn to_gray(data: &[f64], h: usize, w: usize, map: impl Fn(f64) -> u8) -> GrayImage {
    GrayImage::from_fn(w as u32, h as u32, |x, y| image::Luma([map(data[y as usize * w + x as usize])]))
}

fn save_png(img: &GrayImage, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::Io { path: dir.to_path_buf(), source: e })?;
    }
    img.save_with_format(path, image::ImageFormat::Png)
        .map_err(|source| Error::Image { path: path.to_path_buf(), source })
}

fn run_predict<T: Element>(args: &PredictArgs) -> Result<()> {
    let (mut state, cfg) = io::load_checkpoint::<T>(&args.checkpoint)?;
    let (h, w) = cfg.target_size;
    let (x, (ow, oh)) = dataset::load_image::<T>(&args.image, cfg.target_size)?;
    let p: Vec<f64> = metrics::predict(&mut state.model, x)?.data().iter().map(|v| v.as_f64()).collect();
    let threshold = args.threshold;
    let mask = to_gray(&p, h, w, |v| if v >= threshold { 255 } else { 0 });
    save_png(&image::imageops::resize(&mask, ow, oh, FilterType::Nearest), &args.out)?;
    if let Some(path) = &args.prob {
        let prob = to_gray(&p, h, w, |v| (v.clamp(0.0, 1.0) * 255.0).round() as u8);
        save_png(&image::imageops::resize(&prob, ow, oh, FilterType::Nearest), path)?;
    }
    Ok(())
}

fn cmd_predict(args: &PredictArgs) -> Result<()> {
    if !args.checkpoint.is_file() {
        return Err(usage(format!("checkpoint {} does not exist", args.checkpoint.display())));
    }
    match io::peek_checkpoint(&args.checkpoint)?.1 {
        DType::F32 => run_predict::<f32>(args),
        DType::F64 => run_predict::<f64>(args),
    }
}

/// Returns whether every check passed.
fn cmd_gradcheck(args: &GradcheckArgs) -> Result<bool> {
    let fault = match &args.fault {
        Some(name) => Some(Primitive::parse(name).ok_or_else(|| usage(format!("unknown primitive {name:?}")))?),
        None => None,
    };
    let suite = gradcheck::run_suite(args.seeds.max(1), gradcheck::DEFAULT_EPS, fault)?;
    let mut failed = Vec::new();
    for entry in &suite {
        let verdict = if entry.passed() { "ok" } else { "FAIL" };
        println!(
            "{:<14} max_rel_error {:.3e}  probes {:>5}  {verdict}",
            entry.name, entry.report.max_rel_error, entry.report.probes
        );
        if !entry.passed() {
            failed.push(entry.name);
        }
    }
    if failed.is_empty() {
        println!("all {} checks below {:e}", suite.len(), gradcheck::TOLERANCE);
        Ok(true)
    } else {
        eprintln!("gradient check failed: {}", failed.join(", "));
        Ok(false)
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Train(args) => {
            let base = match &args.resume {
                Some(path) => CliConfig { run: io::peek_checkpoint(path)?.0, ..CliConfig::default() },
                None => CliConfig::default(),
            };
            let cc = resolve(&args.run, base)?;
            match cc.run.dtype {
                DType::F32 => cmd_train::<f32>(&cc, args.resume.as_deref())?,
                DType::F64 => cmd_train::<f64>(&cc, args.resume.as_deref())?,
            }
        }
        Command::Eval(args) => cmd_eval(&args, false)?,
        Command::PrCurve(args) => cmd_eval(&args, true)?,
        Command::Predict(args) => cmd_predict(&args)?,
        Command::Gradcheck(args) => {
            if !cmd_gradcheck(&args)? {
                return Ok(ExitCode::from(2));
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
