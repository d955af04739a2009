//! `modvqa` command-line tool.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::{info, warn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use modvqa::eval::{evaluate_run, make_splits, weighted_average, MetricReport, DEFAULT_REPEATS};
use modvqa::media::{load_clip, read_png, write_png, DatasetManifest};
use modvqa::pyramid::{build_pyramid, compute_rho, RhoMode};
use modvqa::rectify::{ModelConfig, QualityQuad, VqaModel};
use modvqa::synth::{build_benchmark, BenchmarkConfig, BenchmarkKind};
use modvqa::train::{repeat_dir, run_protocol, PreparedDataset, RunRecord, TrainConfig, PRETRAINED_LR};
use modvqa::{Error, ErrorClass, Image};

#[derive(Parser, Debug)]
#[command(name = "modvqa", version, about = "Blind video quality assessment with spatial and temporal rectifiers")]
struct Cli {
    /// Threads for data preparation and per-clip work; results do not depend on it.
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Seed for every random choice the subcommand makes.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic benchmark.
    Synth(SynthArgs),
    /// Train one model per content-independent split and report test metrics.
    Train(TrainArgs),
    /// Re-evaluate trained runs on their test splits.
    Eval(EvalArgs),
    /// Score clips, writing `clip_id,q_b,q_s,q_t,q_st`.
    Predict(PredictArgs),
    /// Dump the Laplacian pyramid of one frame as PNGs.
    Pyramid(PyramidArgs),
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum KindArg {
    Spatial,
    Temporal,
    Mixed,
}

impl From<KindArg> for BenchmarkKind {
    fn from(k: KindArg) -> Self {
        match k {
            KindArg::Spatial => BenchmarkKind::Spatial,
            KindArg::Temporal => BenchmarkKind::Temporal,
            KindArg::Mixed => BenchmarkKind::Mixed,
        }
    }
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    /// JSON benchmark config; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Start from the standard size of this kind.
    #[arg(long)]
    kind: Option<KindArg>,
    #[arg(long)]
    scenes: Option<usize>,
    #[arg(long)]
    severities: Option<usize>,
    #[arg(long)]
    height: Option<usize>,
    #[arg(long)]
    width: Option<usize>,
    #[arg(long)]
    frames: Option<usize>,
    #[arg(long)]
    fps: Option<f64>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// JSON run config (`model`, `train`, `repeats`); flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long, conflicts_with = "pretrained_lr")]
    lr: Option<f64>,
    /// Use the learning rate tuned for large pretrained backbones.
    #[arg(long)]
    pretrained_lr: bool,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    p_s: Option<f64>,
    #[arg(long)]
    p_t: Option<f64>,
    /// Train the base predictor alone.
    #[arg(long)]
    base_only: bool,
    #[arg(long)]
    repeats: Option<usize>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    /// Training output directory; repeat once per dataset.
    #[arg(long, required = true)]
    run: Vec<PathBuf>,
    /// Manifest matching each `--run`, in the same order.
    #[arg(long, required = true)]
    manifest: Vec<PathBuf>,
    /// Where reports go; defaults to the first run directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct PredictArgs {
    /// A `repeat_XX` directory holding `run.json` and `best.mvqw`.
    #[arg(long, conflicts_with_all = ["config", "weights"])]
    run: Option<PathBuf>,
    /// JSON run config whose `model` section describes the network.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Weight file; without it a freshly initialized model is used.
    #[arg(long)]
    weights: Option<PathBuf>,
    /// Score every clip of this manifest.
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Clip directory to score; may be repeated.
    #[arg(long)]
    clip: Vec<PathBuf>,
    /// CSV destination; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum RhoArg {
    Linear,
    Geometric,
}

#[derive(Args, Debug)]
struct PyramidArgs {
    /// A PNG image.
    #[arg(long, conflicts_with = "clip")]
    image: Option<PathBuf>,
    /// A clip directory; see `--frame`.
    #[arg(long)]
    clip: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    frame: usize,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 4)]
    levels: usize,
    /// Fixed ratio between levels; otherwise derived from `--base-size`.
    #[arg(long)]
    rho: Option<f64>,
    #[arg(long, default_value_t = 224)]
    base_size: usize,
    #[arg(long, value_enum, default_value_t = RhoArg::Linear)]
    rho_mode: RhoArg,
}

/// File form of a training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct RunConfig {
    model: ModelConfig,
    train: TrainConfig,
    repeats: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            repeats: DEFAULT_REPEATS,
        }
    }
}

#[derive(Debug)]
struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn usage(message: impl Into<String>) -> Self {
        Self {
            code: 1,
            message: message.into(),
        }
    }

    fn data(message: impl Into<String>) -> Self {
        Self {
            code: 2,
            message: message.into(),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e.class() {
            ErrorClass::Usage => 1,
            ErrorClass::Data => 2,
            ErrorClass::Numeric => 3,
        };
        Self {
            code,
            message: e.to_string(),
        }
    }
}

type CliResult<T> = Result<T, Failure>;

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> CliResult<T> {
    let text = fs::read_to_string(path).map_err(|e| Failure::data(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Failure::usage(format!("{}: {e}", path.display())))
}

fn write_text(path: &Path, text: &str) -> CliResult<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Failure::data(format!("{}: {e}", parent.display())))?;
    }
    fs::write(path, text).map_err(|e| Failure::data(format!("{}: {e}", path.display())))
}

fn cmd_synth(args: SynthArgs, seed: Option<u64>) -> CliResult<()> {
    let mut cfg = match (&args.config, args.kind) {
        (Some(path), _) => read_json::<BenchmarkConfig>(path)?,
        (None, Some(kind)) => BenchmarkConfig::preset(kind.into()),
        (None, None) => BenchmarkConfig::default(),
    };
    if let Some(kind) = args.kind {
        cfg.kind = kind.into();
    }
    cfg.n_scenes = args.scenes.unwrap_or(cfg.n_scenes);
    cfg.severities = args.severities.unwrap_or(cfg.severities);
    cfg.height = args.height.unwrap_or(cfg.height);
    cfg.width = args.width.unwrap_or(cfg.width);
    cfg.frames = args.frames.unwrap_or(cfg.frames);
    cfg.fps = args.fps.unwrap_or(cfg.fps);
    cfg.seed = seed.unwrap_or(cfg.seed);
    let manifest = build_benchmark(&cfg, &args.out)?;
    println!("wrote {} clips to {}", manifest.len(), args.out.display());
    Ok(())
}

fn resolve_run_config(args: &TrainArgs, seed: Option<u64>) -> CliResult<RunConfig> {
    let mut cfg = match &args.config {
        Some(path) => read_json::<RunConfig>(path)?,
        None => RunConfig::default(),
    };
    let t = &mut cfg.train;
    t.epochs = args.epochs.unwrap_or(t.epochs);
    t.lr = args.lr.unwrap_or(t.lr);
    if args.pretrained_lr {
        t.lr = PRETRAINED_LR;
    }
    t.batch_size = args.batch_size.unwrap_or(t.batch_size);
    t.p_s = args.p_s.unwrap_or(t.p_s);
    t.p_t = args.p_t.unwrap_or(t.p_t);
    t.base_only |= args.base_only;
    t.seed = seed.unwrap_or(t.seed);
    cfg.repeats = args.repeats.unwrap_or(cfg.repeats);
    if cfg.repeats == 0 {
        return Err(Failure::usage("repeats must be positive"));
    }
    cfg.model.validate()?;
    cfg.train.validate()?;
    Ok(cfg)
}

fn cmd_train(args: TrainArgs, seed: Option<u64>) -> CliResult<()> {
    let cfg = resolve_run_config(&args, seed)?;
    let data = PreparedDataset::load(&args.manifest, &cfg.model)?;
    info!("prepared {} clips from {}", data.len(), args.manifest.display());
    let plans = make_splits(&data.scene_ids, cfg.train.seed, cfg.repeats)?;
    fs::create_dir_all(&args.out).map_err(|e| Failure::data(format!("{}: {e}", args.out.display())))?;
    let resolved = serde_json::to_string_pretty(&cfg).expect("config serializes");
    write_text(&args.out.join("config.json"), &resolved)?;
    let result = run_protocol(&data, &cfg.model, &cfg.train, &plans, Some(&args.out))?;
    result.report.write(&args.out)?;
    print!("{}", result.report.to_markdown());
    Ok(())
}

fn repeat_dirs(run: &Path) -> CliResult<Vec<PathBuf>> {
    let mut dirs = Vec::new();
    for r in 0.. {
        let d = repeat_dir(run, r);
        if !d.is_dir() {
            break;
        }
        dirs.push(d);
    }
    if dirs.is_empty() {
        return Err(Failure::data(format!("{}: no repeat_XX directories", run.display())));
    }
    Ok(dirs)
}

fn load_run(dir: &Path) -> CliResult<(RunRecord, VqaModel<f32>)> {
    let record: RunRecord = read_json(&dir.join("run.json"))?;
    let model = VqaModel::load(record.model.clone(), &dir.join("best.mvqw"))?;
    Ok((record, model))
}

fn evaluate_one(run: &Path, manifest: &Path) -> CliResult<MetricReport> {
    let mut records = Vec::new();
    let mut models = Vec::new();
    for dir in repeat_dirs(run)? {
        let (record, model) = load_run(&dir)?;
        records.push(record);
        models.push(model);
    }
    let config = records[0].model.clone();
    if records.iter().any(|r| r.model != config) {
        return Err(Failure::data(format!("{}: repeats disagree on the model config", run.display())));
    }
    let data = PreparedDataset::load(manifest, &config)?;
    if let Some(r) = records.iter().find(|r| r.manifest_sha256 != data.manifest_sha256) {
        warn!(
            "{} was trained on manifest {} but {} hashes to {}",
            run.display(),
            r.manifest_sha256,
            manifest.display(),
            data.manifest_sha256
        );
    }
    let plans: Vec<_> = records.into_iter().map(|r| r.plan).collect();
    Ok(evaluate_run(&models, &data, &plans)?)
}

fn cmd_eval(args: EvalArgs) -> CliResult<()> {
    if args.run.len() != args.manifest.len() {
        return Err(Failure::usage(format!(
            "{} --run values but {} --manifest values",
            args.run.len(),
            args.manifest.len()
        )));
    }
    let out = args.out.clone().unwrap_or_else(|| args.run[0].clone());
    let mut reports = Vec::new();
    for (run, manifest) in args.run.iter().zip(&args.manifest) {
        let report = evaluate_one(run, manifest)?;
        print!("{}", report.to_markdown());
        reports.push(report);
    }
    if let [report] = reports.as_slice() {
        report.write(&out)?;
        return Ok(());
    }
    for (i, r) in reports.iter().enumerate() {
        r.write(&out.join(format!("dataset_{i:02}")))?;
    }
    let avg = weighted_average(&reports)?;
    let mut csv = String::from("metric,q_b,q_s,q_t,q_st\n");
    for (name, row) in [("srcc", avg.srcc), ("plcc", avg.plcc)] {
        writeln!(csv, "{name},{},{},{},{}", row[0], row[1], row[2], row[3]).expect("string write");
    }
    write_text(&out.join("weighted.csv"), &csv)?;
    println!("weighted SRCC q_st {:.3}", avg.srcc[3]);
    Ok(())
}

fn cmd_predict(args: PredictArgs, seed: Option<u64>) -> CliResult<()> {
    let model = if let Some(run) = &args.run {
        load_run(run)?.1
    } else {
        let config = match &args.config {
            Some(path) => read_json::<RunConfig>(path)?.model,
            None => ModelConfig::default(),
        };
        match &args.weights {
            Some(w) => VqaModel::load(config, w)?,
            None => {
                warn!("no weights given, scoring with a freshly initialized model");
                let mut rng = ChaCha8Rng::seed_from_u64(seed.unwrap_or(0));
                VqaModel::new(config, &mut rng)?
            }
        }
    };
    let mut clips = args.clip.clone();
    if let Some(path) = &args.manifest {
        let manifest = DatasetManifest::read(path)?;
        clips.extend(manifest.rows.iter().map(|r| manifest.clip_dir(r)));
    }
    if clips.is_empty() {
        return Err(Failure::usage("nothing to score: pass --clip or --manifest"));
    }
    let mut csv = format!("clip_id,{}\n", QualityQuad::NAMES.join(","));
    for dir in &clips {
        let video = load_clip(dir)?;
        let q = model.predict(&video)?;
        writeln!(csv, "{},{},{},{},{}", video.clip_id, q.q_b, q.q_s, q.q_t, q.q_st).expect("string write");
    }
    match &args.out {
        Some(path) => write_text(path, &csv),
        None => {
            print!("{csv}");
            Ok(())
        }
    }
}

/// Maps a signed subband into the displayable range around mid-gray.
fn signed_to_display(z: &Image<f32>) -> Image<f32> {
    z.map(|v| (v + 0.5).clamp(0.0, 1.0))
}

fn cmd_pyramid(args: PyramidArgs) -> CliResult<()> {
    let frame = match (&args.image, &args.clip) {
        (Some(path), _) => read_png(path)?,
        (None, Some(dir)) => {
            let video = load_clip(dir)?;
            video
                .frames()
                .get(args.frame)
                .cloned()
                .ok_or_else(|| Failure::usage(format!("clip has {} frames, asked for {}", video.num_frames(), args.frame)))?
        }
        (None, None) => return Err(Failure::usage("pass --image or --clip")),
    };
    let rho = match args.rho {
        Some(r) => r,
        None => {
            let mode = match args.rho_mode {
                RhoArg::Linear => RhoMode::Linear,
                RhoArg::Geometric => RhoMode::Geometric,
            };
            compute_rho(frame.height(), frame.width(), args.base_size, args.base_size, args.levels, mode)?
        }
    };
    let pyramid = build_pyramid(&frame, rho, args.levels)?;
    fs::create_dir_all(&args.out).map_err(|e| Failure::data(format!("{}: {e}", args.out.display())))?;
    for (k, z) in pyramid.subbands.iter().enumerate() {
        write_png(&args.out.join(format!("subband_{k}.png")), &signed_to_display(z))?;
    }
    write_png(&args.out.join("residual.png"), &pyramid.residual)?;
    let recon = pyramid.reconstruct()?;
    println!(
        "rho {rho:.4}, levels {:?}, reconstruction max abs error {:.2e}",
        pyramid.level_sizes,
        recon.max_abs_diff(&frame)
    );
    Ok(())
}

fn run(cli: Cli) -> CliResult<()> {
    if let Some(n) = cli.workers {
        if n == 0 {
            return Err(Failure::usage("--workers must be positive"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Failure::usage(e.to_string()))?;
    }
    match cli.command {
        Command::Synth(a) => cmd_synth(a, cli.seed),
        Command::Train(a) => cmd_train(a, cli.seed),
        Command::Eval(a) => cmd_eval(a),
        Command::Predict(a) => cmd_predict(a, cli.seed),
        Command::Pyramid(a) => cmd_pyramid(a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
