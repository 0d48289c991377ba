use std::fs;
use std::io::{self, BufReader, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};

use firenet::dataio::synthetic::{blob_samples, write_blob_dataset};
use firenet::dataio::{encode_ppm, load_dataset, Sample};
use firenet::fusion::{
    merge_events, read_sensor_stream, AlertDispatcher, DirectoryStore, FusionConfig, FusionEngine, HttpTransport,
    Notifier, RetryPolicy, Snapshot, SnapshotStore, UnitEvent,
};
use firenet::inference::{
    bench_fps, run_stream, BenchMode, DirectorySource, Frame, InferenceError, PpmStreamSource, StreamOptions,
    DEFAULT_FRAME_INTERVAL_MS,
};
use firenet::network::{build_firenet, load_model, save_model, Network};
use firenet::training::{evaluate, export_curves, train_with, EpochControl, TrainConfig};

const MIN_SIDE: usize = 64;
const MAX_SIDE: usize = 128;
const SYNTHETIC_PER_CLASS: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Code {
    Config = 2,
    Data = 3,
    Model = 4,
    Runtime = 5,
}

struct Failure {
    code: Code,
    error: anyhow::Error,
}

type CmdResult = Result<(), Failure>;

trait OrExit<T> {
    fn or_exit(self, code: Code) -> Result<T, Failure>;
}

impl<T, E: Into<anyhow::Error>> OrExit<T> for Result<T, E> {
    fn or_exit(self, code: Code) -> Result<T, Failure> {
        self.map_err(|e| Failure { code, error: e.into() })
    }
}

fn fail<T>(code: Code, msg: impl Into<String>) -> Result<T, Failure> {
    Err(Failure {
        code,
        error: anyhow!(msg.into()),
    })
}

/// FireNet fire detector: training, evaluation, streaming inference and the
/// complete detection unit.
#[derive(Parser)]
#[command(name = "firenet", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a fresh network and write the model file.
    Train(TrainArgs),
    /// Report the six detection scores on a labeled directory.
    Eval(EvalArgs),
    /// Classify frames and print one detection per line.
    Infer(InferArgs),
    /// Measure classification throughput.
    Bench(BenchArgs),
    /// Run the detection unit: frames + smoke sensor -> alarms and alerts.
    Unit(UnitArgs),
    /// Write the synthetic blob dataset as PPM files.
    Synth(SynthArgs),
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset root holding fire/ and nofire/.
    #[arg(long, required_unless_present = "synthetic")]
    data: Option<PathBuf>,
    /// Train on the bundled synthetic blob set instead of --data.
    #[arg(long)]
    synthetic: bool,
    #[arg(long)]
    model: PathBuf,
    #[arg(long, default_value_t = MIN_SIDE)]
    input_side: usize,
    #[arg(long, default_value_t = 100)]
    epochs: usize,
    #[arg(long, default_value_t = 32)]
    batch: usize,
    #[arg(long, default_value_t = 1e-4)]
    lr: f32,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    augment: bool,
    #[arg(long)]
    curves_out: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
}

#[derive(Args)]
struct FrameInput {
    /// Directory of frames, classified in sorted file-name order.
    #[arg(long, conflicts_with = "stdin")]
    data: Option<PathBuf>,
    /// Read concatenated binary PPM frames from standard input.
    #[arg(long)]
    stdin: bool,
    /// Timestamp spacing of consecutive frames.
    #[arg(long, default_value_t = DEFAULT_FRAME_INTERVAL_MS)]
    frame_interval_ms: u64,
}

#[derive(Args)]
struct InferArgs {
    #[arg(long)]
    model: PathBuf,
    #[command(flatten)]
    input: FrameInput,
    #[arg(long, default_value_t = 0.5)]
    threshold: f32,
    #[arg(long, default_value_t = 1)]
    workers: usize,
}

#[derive(Args)]
struct BenchArgs {
    /// Model to benchmark; a freshly initialized network when omitted.
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long, default_value_t = MIN_SIDE)]
    input_side: usize,
    #[arg(long, default_value_t = 200)]
    frames: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Include PPM decode and resize of 320x240 frames.
    #[arg(long)]
    end_to_end: bool,
}

#[derive(Args)]
struct UnitArgs {
    #[arg(long)]
    model: PathBuf,
    #[command(flatten)]
    input: FrameInput,
    /// Smoke readings, one `timestamp_ms,adc_value` per line.
    #[arg(long)]
    sensor: Option<PathBuf>,
    #[arg(long, default_value_t = 0.5)]
    threshold: f32,
    #[arg(long, default_value_t = 400)]
    smoke_threshold: u16,
    #[arg(long, default_value_t = 3)]
    smoke_debounce: u32,
    #[arg(long, default_value_t = 3)]
    confirm_k: u32,
    #[arg(long, default_value_t = 60_000)]
    cooldown_ms: u64,
    /// Webhook receiving alert messages.
    #[arg(long, required_unless_present = "dry_run")]
    endpoint: Option<String>,
    /// Print alerts instead of sending them.
    #[arg(long)]
    dry_run: bool,
    /// Where fire snapshots are stored.
    #[arg(long)]
    snapshot_dir: Option<PathBuf>,
    #[arg(long, default_value_t = 3)]
    max_retries: u32,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = SYNTHETIC_PER_CLASS)]
    per_class: usize,
    #[arg(long, default_value_t = MIN_SIDE)]
    input_side: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn check_side(side: usize) -> CmdResult {
    if !(MIN_SIDE..=MAX_SIDE).contains(&side) {
        return fail(
            Code::Config,
            format!("--input-side must be in {MIN_SIDE}..={MAX_SIDE}, got {side}"),
        );
    }
    Ok(())
}

fn check_dir(path: &Path) -> CmdResult {
    if !path.is_dir() {
        return fail(
            Code::Data,
            format!("dataset directory {} does not exist", path.display()),
        );
    }
    Ok(())
}

fn load_net(path: &Path) -> Result<Network, Failure> {
    load_model(path)
        .with_context(|| format!("loading model {}", path.display()))
        .or_exit(Code::Model)
}

fn load_labeled(root: &Path, side: usize) -> Result<Vec<Sample>, Failure> {
    check_dir(root)?;
    let (samples, manifest) = load_dataset(root, side)
        .with_context(|| format!("loading dataset {}", root.display()))
        .or_exit(Code::Data)?;
    log::info!("{}", manifest.report());
    Ok(samples)
}

fn cmd_train(a: TrainArgs) -> CmdResult {
    check_side(a.input_side)?;
    let config = TrainConfig {
        epochs: a.epochs,
        batch_size: a.batch,
        learning_rate: a.lr,
        seed: a.seed,
        augment: a.augment,
        ..TrainConfig::default()
    };
    config.validate().or_exit(Code::Config)?;
    let dataset = match (&a.data, a.synthetic) {
        (_, true) => blob_samples(SYNTHETIC_PER_CLASS, a.input_side, a.seed),
        (Some(root), false) => load_labeled(root, a.input_side)?,
        (None, false) => return fail(Code::Config, "either --data or --synthetic is required"),
    };
    let mut net = build_firenet(a.input_side, a.seed).or_exit(Code::Config)?;
    let outcome = train_with(&mut net, &dataset, &config, |p| {
        log::info!(
            "epoch {} train_loss={:.4} val_loss={:.4} train_acc={:.4} val_acc={:.4}",
            p.epoch,
            p.train_loss,
            p.val_loss,
            p.train_accuracy,
            p.val_accuracy
        );
        EpochControl::Continue
    })
    .or_exit(Code::Runtime)?;
    save_model(&net, &a.model)
        .with_context(|| format!("writing model {}", a.model.display()))
        .or_exit(Code::Runtime)?;
    if let Some(path) = &a.curves_out {
        export_curves(&outcome.curves, path)
            .with_context(|| format!("writing curves {}", path.display()))
            .or_exit(Code::Runtime)?;
    }
    let last = outcome.curves.last().expect("at least one epoch");
    println!("epochs={}", outcome.curves.len());
    println!("train_accuracy={:.6}", last.train_accuracy);
    println!("val_accuracy={:.6}", last.val_accuracy);
    let val: Vec<Sample> = outcome.split.val.iter().map(|&i| dataset[i].clone()).collect();
    let (counts, report) = evaluate(&net, &val).or_exit(Code::Runtime)?;
    println!("# validation");
    print!("{}", report.to_kv_block(&counts));
    Ok(())
}

fn cmd_eval(a: EvalArgs) -> CmdResult {
    let net = load_net(&a.model)?;
    let samples = load_labeled(&a.data, net.input_side())?;
    let (counts, report) = evaluate(&net, &samples).or_exit(Code::Runtime)?;
    print!("{}", report.to_kv_block(&counts));
    Ok(())
}

type Frames = Box<dyn Iterator<Item = Result<Frame, InferenceError>> + Send>;

fn frame_source(input: &FrameInput) -> Result<Option<Frames>, Failure> {
    if input.stdin {
        let reader = BufReader::new(io::stdin());
        return Ok(Some(Box::new(PpmStreamSource::new(reader, input.frame_interval_ms))));
    }
    match &input.data {
        Some(dir) => {
            check_dir(dir)?;
            let src = DirectorySource::open(dir, input.frame_interval_ms).or_exit(Code::Data)?;
            Ok(Some(Box::new(src)))
        }
        None => Ok(None),
    }
}

fn cmd_infer(a: InferArgs) -> CmdResult {
    let net = load_net(&a.model)?;
    let Some(source) = frame_source(&a.input)? else {
        return fail(Code::Config, "either --data or --stdin is required");
    };
    let options = StreamOptions {
        threshold: a.threshold,
        workers: a.workers,
        smoothing: None,
    };
    let stdout = io::stdout();
    let mut out = stdout.lock();
    let summary = run_stream(&net, source, &options, |_, d| {
        let _ = writeln!(out, "{d}");
    })
    .or_exit(Code::Config)?;
    drop(out);
    log::info!("{} frames, {:.1} fps", summary.frames, summary.fps);
    if let Some(e) = summary.error {
        return fail(Code::Data, e);
    }
    Ok(())
}

fn cmd_bench(a: BenchArgs) -> CmdResult {
    let net = match &a.model {
        Some(path) => load_net(path)?,
        None => {
            check_side(a.input_side)?;
            build_firenet(a.input_side, a.seed).or_exit(Code::Config)?
        }
    };
    let mode = if a.end_to_end {
        BenchMode::EndToEnd
    } else {
        BenchMode::Synthetic
    };
    let report = bench_fps(&net, a.frames, mode, a.seed).or_exit(Code::Config)?;
    println!("{report}");
    Ok(())
}

fn cmd_unit(a: UnitArgs) -> CmdResult {
    let config = FusionConfig {
        smoke_threshold: a.smoke_threshold,
        smoke_debounce_n: a.smoke_debounce,
        fire_confirm_k: a.confirm_k,
        cooldown_ms: a.cooldown_ms,
    };
    let mut engine = FusionEngine::new(config).or_exit(Code::Config)?;
    let net = load_net(&a.model)?;

    let mut vision = Vec::new();
    if let Some(source) = frame_source(&a.input)? {
        let options = StreamOptions {
            threshold: a.threshold,
            ..StreamOptions::default()
        };
        let summary = run_stream(&net, source, &options, |frame, detection| {
            let snapshot = detection.is_fire.then(|| Snapshot::new(encode_ppm(&frame.image)));
            vision.push(UnitEvent::Vision { detection, snapshot });
        })
        .or_exit(Code::Config)?;
        if let Some(e) = summary.error {
            return fail(Code::Data, e);
        }
    }
    let smoke = match &a.sensor {
        Some(path) => {
            let file = fs::File::open(path)
                .with_context(|| format!("opening sensor log {}", path.display()))
                .or_exit(Code::Data)?;
            let parsed = read_sensor_stream(BufReader::new(file)).or_exit(Code::Data)?;
            for issue in &parsed.issues {
                log::warn!("sensor line {} skipped: {}", issue.line, issue.reason);
            }
            parsed.readings
        }
        None => Vec::new(),
    };
    if vision.is_empty() && smoke.is_empty() {
        return fail(Code::Config, "no input: give --data, --stdin or --sensor");
    }

    let notifier = match (&a.endpoint, a.dry_run) {
        (Some(url), false) => Some(Notifier::new(
            url.clone(),
            Box::new(HttpTransport::new(Duration::from_secs(10))),
            RetryPolicy {
                max_retries: a.max_retries,
                ..RetryPolicy::default()
            },
        )),
        _ => None,
    };
    let store: Option<Box<dyn SnapshotStore>> = match &a.snapshot_dir {
        Some(dir) => Some(Box::new(DirectoryStore::open(dir).or_exit(Code::Config)?)),
        None => None,
    };
    let dispatcher = AlertDispatcher::spawn(notifier, store);

    let stdout = io::stdout();
    let mut out = stdout.lock();
    for event in merge_events(vision, smoke) {
        let step = match engine.step(&event) {
            Ok(s) => s,
            Err(e) => {
                log::warn!("event dropped: {e}");
                continue;
            }
        };
        for c in &step.commands {
            let _ = writeln!(out, "{c}");
        }
        dispatcher.submit(step.alerts, step.snapshots);
    }
    for o in dispatcher.finish() {
        let _ = writeln!(out, "alert {}", o.alert.to_json());
        if let Some(Err(e)) = &o.snapshot {
            log::warn!("snapshot upload failed: {e}");
        }
        if let Some(d) = &o.delivery {
            if d.delivered {
                log::info!("delivered {} after {} attempt(s)", d.idempotency_key, d.attempts);
            } else {
                log::error!(
                    "alert {} not delivered after {} attempt(s): {}",
                    d.idempotency_key,
                    d.attempts,
                    d.error.as_deref().unwrap_or("unknown error")
                );
            }
        }
    }
    Ok(())
}

fn cmd_synth(a: SynthArgs) -> CmdResult {
    write_blob_dataset(&a.out, a.per_class, a.input_side, a.seed).or_exit(Code::Runtime)?;
    println!("wrote {} images per class to {}", a.per_class, a.out.display());
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Infer(a) => cmd_infer(a),
        Command::Bench(a) => cmd_bench(a),
        Command::Unit(a) => cmd_unit(a),
        Command::Synth(a) => cmd_synth(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.code as u8)
        }
    }
}
