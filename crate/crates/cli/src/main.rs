use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use log::info;
use serde_json::json;

use mfcc::checkpoint::Checkpoint;
use mfcc::datagen::{self, GenConfig, Split};
use mfcc::density::{count_from_map, DensityMap, DEFAULT_SIGMA};
use mfcc::numerics::Tensor;
use mfcc::supervisor::{supervise, SupervisorParams};
use mfcc::training::{self, EvalReport, HistoryRecord, Sample, Stage, TrainConfig};

#[derive(Parser, Debug)]
#[command(name = "mfcc", version, about = "RGB-thermal crowd counting with dense-area alerts")]
struct Cli {
    /// Log progress to stderr (repeat for more detail).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic paired dataset with head annotations.
    GenData(GenDataArgs),
    /// Stage 1: train the fusion network and ALM heads.
    TrainFusion(TrainArgs),
    /// Stage 2: train the unified model from a stage-1 checkpoint.
    Train(TrainArgs),
    /// Report MAE/RMSE over a dataset split.
    Eval(EvalArgs),
    /// Fused image and density map for one image pair.
    Infer(InferArgs),
    /// Dense-area decision on a raw density map.
    Supervise(SuperviseArgs),
}

#[derive(Args, Debug)]
struct GenDataArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    count: usize,
    #[arg(long)]
    seed: u64,
    /// Image size as HxW; both must be multiples of 16.
    #[arg(long, value_parser = parse_pair, default_value = "64x64")]
    size: (usize, usize),
    /// Inclusive people range per scene, MIN-MAX.
    #[arg(long, value_parser = parse_range)]
    people: Option<(usize, usize)>,
    #[arg(long)]
    test_fraction: Option<f64>,
    #[arg(long)]
    dark_fraction: Option<f64>,
}

#[derive(Args, Debug)]
struct ConfigArgs {
    /// Flat key=value file of configuration overrides.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Single override, applied after --config.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Starting checkpoint; required for stage 2.
    #[arg(long)]
    init: Option<PathBuf>,
    /// Loss history as newline-delimited JSON (default: next to --out).
    #[arg(long)]
    history: Option<PathBuf>,
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, required_unless_present = "oracle", conflicts_with = "oracle")]
    ckpt: Option<PathBuf>,
    /// Feed the ground-truth maps as predictions.
    #[arg(long)]
    oracle: bool,
    #[arg(long)]
    report: PathBuf,
    #[arg(long, default_value = "test")]
    split: Split,
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Args, Debug)]
struct InferArgs {
    #[arg(long, num_args = 2, value_names = ["VISIBLE", "THERMAL"])]
    pair: Vec<PathBuf>,
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    out_density: PathBuf,
    #[arg(long)]
    out_fused: PathBuf,
}

#[derive(Args, Debug)]
struct SuperviseArgs {
    /// Raw density map, or a PNG whose `.dmap` sidecar sits beside it.
    #[arg(long)]
    density: PathBuf,
    #[arg(long)]
    pd: f64,
    /// Window size as WxH (default: a quarter of each side).
    #[arg(long = "box", value_parser = parse_pair)]
    box_size: Option<(usize, usize)>,
    #[arg(long)]
    stride: Option<usize>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    image_id: Option<String>,
}

fn parse_pair(s: &str) -> Result<(usize, usize), String> {
    let (a, b) = s
        .split_once(['x', 'X'])
        .ok_or_else(|| format!("expected AxB, got {s:?}"))?;
    let a = a.trim().parse().map_err(|_| format!("bad number in {s:?}"))?;
    let b = b.trim().parse().map_err(|_| format!("bad number in {s:?}"))?;
    Ok((a, b))
}

fn parse_range(s: &str) -> Result<(usize, usize), String> {
    let (a, b) = s.split_once('-').ok_or_else(|| format!("expected MIN-MAX, got {s:?}"))?;
    let a = a.trim().parse().map_err(|_| format!("bad number in {s:?}"))?;
    let b = b.trim().parse().map_err(|_| format!("bad number in {s:?}"))?;
    Ok((a, b))
}

/// A failure tagged with the exit code class it maps to.
enum Failure {
    Usage(anyhow::Error),
    Runtime(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Runtime(e)
    }
}

impl From<mfcc::Error> for Failure {
    fn from(e: mfcc::Error) -> Self {
        Failure::Runtime(e.into())
    }
}

fn usage(e: impl Into<anyhow::Error>) -> Failure {
    Failure::Usage(e.into())
}

/// The error chain on one line, skipping causes already quoted by their parent.
fn one_line(e: &anyhow::Error) -> String {
    let mut parts: Vec<String> = Vec::new();
    for cause in e.chain() {
        let text = cause.to_string();
        if !parts.last().is_some_and(|p| p.contains(&text)) {
            parts.push(text);
        }
    }
    parts.join(": ").split_whitespace().collect::<Vec<_>>().join(" ")
}

fn ensure_parent(path: &Path) -> anyhow::Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    Ok(())
}

impl ConfigArgs {
    fn apply(&self, config: &mut TrainConfig) -> Result<(), Failure> {
        if let Some(path) = &self.config {
            let text = fs::read_to_string(path)
                .with_context(|| format!("reading config {}", path.display()))
                .map_err(usage)?;
            config
                .apply_text(&text)
                .with_context(|| format!("in config {}", path.display()))
                .map_err(usage)?;
        }
        for item in &self.overrides {
            let (k, v) = item
                .split_once('=')
                .ok_or_else(|| usage(anyhow::anyhow!("--set expects KEY=VALUE, got {item:?}")))?;
            config.set(k.trim(), v.trim()).map_err(usage)?;
        }
        config.validate().map_err(usage)
    }
}

fn write_json(path: &Path, value: &serde_json::Value) -> anyhow::Result<()> {
    ensure_parent(path)?;
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

fn load_split(data: &Path, split: Split, config: &TrainConfig) -> Result<Vec<Sample>, Failure> {
    let index = datagen::load_dataset_with(data, split, &config.thresholds)?;
    if index.is_empty() {
        return Err(mfcc::Error::EmptyDataset.into());
    }
    Ok(training::load_samples(&index, config)?)
}

fn gen_data(args: &GenDataArgs) -> Result<(), Failure> {
    let mut cfg = GenConfig::new(args.count, args.seed);
    cfg.image_size = args.size;
    if let Some(p) = args.people {
        cfg.people = p;
    }
    if let Some(f) = args.test_fraction {
        if !(0.0..=1.0).contains(&f) {
            return Err(usage(anyhow::anyhow!("--test-fraction must be in [0, 1], got {f}")));
        }
        cfg.test_fraction = f;
    }
    if let Some(f) = args.dark_fraction {
        cfg.dark_fraction = f;
    }
    let (h, w) = cfg.image_size;
    if h == 0 || w == 0 || h % 16 != 0 || w % 16 != 0 {
        return Err(usage(anyhow::anyhow!("--size {h}x{w}: both sides must be positive multiples of 16")));
    }
    let (train, test) = datagen::generate_dataset(&args.out, &cfg)?;
    info!("wrote {train} train and {test} test scenes to {}", args.out.display());
    println!("{}", json!({ "train": train, "test": test, "out": args.out }));
    Ok(())
}

fn train_stage(args: &TrainArgs, stage: Stage) -> Result<(), Failure> {
    let init = args
        .init
        .as_deref()
        .map(Checkpoint::load)
        .transpose()?;
    let mut config = match (&init, stage) {
        (Some(ck), _) => training::model_from_checkpoint(ck)?.1,
        (None, Stage::Unified) => {
            return Err(usage(anyhow::anyhow!("train requires --init with a stage-1 checkpoint")));
        }
        (None, Stage::Fusion) => TrainConfig::default(),
    };
    args.config.apply(&mut config)?;
    let samples = load_split(&args.data, Split::Train, &config)?;

    let history_path = args
        .history
        .clone()
        .unwrap_or_else(|| args.out.with_extension("history.ndjson"));
    ensure_parent(&args.out)?;
    ensure_parent(&history_path)?;
    let mut history = std::io::BufWriter::new(
        fs::File::create(&history_path).with_context(|| format!("creating {}", history_path.display()))?,
    );
    let mut write_err = None;
    let outcome = training::train(&config, &samples, stage, init.as_ref(), |r: &HistoryRecord| {
        if write_err.is_none() {
            let line = serde_json::to_string(r).expect("history record serializes");
            if let Err(e) = writeln!(history, "{line}") {
                write_err = Some(e);
            }
        }
    })?;
    if let Some(e) = write_err {
        return Err(anyhow::Error::new(e).context(format!("writing {}", history_path.display())).into());
    }
    history.flush().with_context(|| format!("writing {}", history_path.display()))?;

    outcome.checkpoint(&config, stage).save(&args.out)?;
    let last = outcome.history.last().map(|r| r.loss_total);
    println!(
        "{}",
        json!({
            "stage": stage.number(),
            "checkpoint": args.out,
            "history": history_path,
            "steps": outcome.history.len(),
            "final_loss": last,
        })
    );
    Ok(())
}

fn eval(args: &EvalArgs) -> Result<(), Failure> {
    let (model, mut config) = match &args.ckpt {
        Some(path) => {
            let (m, c) = training::model_from_checkpoint(&Checkpoint::load(path)?)?;
            (Some(m), c)
        }
        None => (None, TrainConfig::default()),
    };
    args.config.apply(&mut config)?;
    let samples = load_split(&args.data, args.split, &config)?;

    let mut predictions = Vec::with_capacity(samples.len());
    let report: EvalReport = training::evaluate_with(&samples, |s| {
        let predicted = match &model {
            Some(m) => count_from_map(&m.infer(&s.visible, &s.thermal, config.sigma)?.density),
            None => s.density_target.sum(),
        };
        predictions.push(json!({ "id": s.id, "predicted": predicted, "ground_truth": s.count }));
        Ok(predicted)
    })?;

    let mut value = serde_json::to_value(&report).context("serializing report")?;
    let obj = value.as_object_mut().expect("report is an object");
    obj.insert("split".into(), json!(args.split.as_str()));
    obj.insert("source".into(), json!(if args.oracle { "oracle" } else { "checkpoint" }));
    obj.insert("predictions".into(), json!(predictions));
    obj.insert("config".into(), serde_json::to_value(&config).context("serializing config")?);
    write_json(&args.report, &value)?;
    println!("{}", json!({ "mae": report.mae, "rmse": report.rmse, "n": report.n }));
    Ok(())
}

fn normalized(map: &DensityMap) -> Tensor {
    let max = map.values.data().iter().cloned().fold(0.0, f64::max);
    let scale = if max > 0.0 { 1.0 / max } else { 0.0 };
    let data = map.values.data().iter().map(|v| (v * scale).max(0.0)).collect();
    Tensor::new(vec![1, map.height(), map.width()], data).expect("shape matches data")
}

fn infer(args: &InferArgs) -> Result<(), Failure> {
    let [visible, thermal] = [&args.pair[0], &args.pair[1]].map(|p| datagen::load_gray(p));
    let (visible, thermal) = (visible?, thermal?);
    let (model, config) = training::model_from_checkpoint(&Checkpoint::load(&args.ckpt)?)?;
    let out = model.infer(&visible, &thermal, config.sigma)?;
    let full = out.density.upsample_conserving(mfcc::counting::OUTPUT_STRIDE)?;

    ensure_parent(&args.out_fused)?;
    ensure_parent(&args.out_density)?;
    datagen::save_png(&out.fused, &args.out_fused)?;
    datagen::save_png(&normalized(&full), &args.out_density)?;
    let raw = args.out_density.with_extension("dmap");
    full.write_raw(&raw)?;
    let summary = json!({
        "count": count_from_map(&out.density),
        "density_png": args.out_density,
        "density_raw": raw,
        "fused_png": args.out_fused,
        "height": full.height(),
        "width": full.width(),
        "visible": args.pair[0],
        "thermal": args.pair[1],
        "checkpoint": args.ckpt,
        "config": config,
    });
    write_json(&args.out_density.with_extension("json"), &summary)?;
    println!("{}", serde_json::to_string(&summary).expect("summary serializes"));
    Ok(())
}

fn run_supervise(args: &SuperviseArgs) -> Result<(), Failure> {
    let raw = match args.density.extension().and_then(|e| e.to_str()) {
        Some("png") => args.density.with_extension("dmap"),
        _ => args.density.clone(),
    };
    let map = DensityMap::read_raw(&raw, DEFAULT_SIGMA)?;
    if !(args.pd.is_finite() && args.pd >= 0.0) {
        return Err(usage(anyhow::anyhow!("--pd must be a non-negative number, got {}", args.pd)));
    }
    if args.stride == Some(0) || args.box_size.is_some_and(|(w, h)| w == 0 || h == 0) {
        return Err(usage(anyhow::anyhow!("--box and --stride must be positive")));
    }
    let mut params = SupervisorParams::new(args.pd);
    params.box_size = args.box_size;
    params.stride = args.stride;
    params.image_id = args.image_id.clone().unwrap_or_else(|| {
        raw.file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default()
    });
    let alert = supervise(&map, &params)?;
    let line = serde_json::to_string(&alert).context("serializing alert")?;
    ensure_parent(&args.out)?;
    fs::write(&args.out, format!("{line}\n")).with_context(|| format!("writing {}", args.out.display()))?;
    println!("{line}");
    Ok(())
}

fn run(cli: &Cli) -> Result<(), Failure> {
    match &cli.command {
        Command::GenData(a) => gen_data(a),
        Command::TrainFusion(a) => train_stage(a, Stage::Fusion),
        Command::Train(a) => train_stage(a, Stage::Unified),
        Command::Eval(a) => eval(a),
        Command::Infer(a) => infer(a),
        Command::Supervise(a) => run_supervise(a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let text = e.to_string();
            let first = text.lines().next().unwrap_or("invalid arguments");
            eprintln!("error[usage]: {}", first.trim_start_matches("error: "));
            return ExitCode::from(1);
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();

    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(e)) => {
            eprintln!("error[usage]: {}", one_line(&e));
            ExitCode::from(1)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error[runtime]: {}", one_line(&e));
            ExitCode::from(2)
        }
    }
}
