//! The `stateformer` command: dataset generation, training, evaluation,
//! inference, gradient checks, benchmarks and parameter counts.
//!
//! Every subcommand draws its randomness from `--seed`, so identical flags
//! reproduce identical output files.

use std::ffi::OsString;
use std::io::ErrorKind;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use clap::{Args, Parser, Subcommand, ValueEnum};
use stateformer::bench::{bench_table, run_bench, BenchConfig};
use stateformer::features::StftConfig;
use stateformer::numerics::TensorError;
use stateformer::scenegen::{generate_dataset, DatasetSpec, SceneRanges, SplitCounts};
use stateformer::stateformer::{Stateformer, StateformerConfig};
use stateformer::training::{evaluate, infer_track, load_samples, track_text, train, TrainConfig, BEST_CHECKPOINT, HISTORY_FILE};
use stateformer::verify::{gradcheck_suite, Level};
use stateformer::wav::read_wav;
use stateformer::Error;

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_MISSING_FILE: i32 = 3;
pub const EXIT_MALFORMED: i32 = 4;
pub const EXIT_VERSION: i32 = 5;
pub const EXIT_NON_FINITE: i32 = 6;
pub const EXIT_GRADCHECK: i32 = 7;

/// Name of the model config written next to training outputs.
pub const CONFIG_FILE: &str = "model.cfg";

#[derive(Parser, Debug)]
#[command(name = "stateformer", version, about = "Two-microphone sound-source direction-of-arrival estimation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render a synthetic dataset with per-split manifests.
    Gen(GenArgs),
    /// Train a model on a generated dataset.
    Train(TrainArgs),
    /// Score a checkpoint on one manifest and print the report as JSON.
    Eval(EvalArgs),
    /// Write per-frame azimuth tracks for one two-channel WAV file.
    Infer(InferArgs),
    /// Run the finite-difference gradient suite.
    Gradcheck,
    /// Time the scan, a Mamba+ branch and attention over sequence lengths.
    Bench(BenchArgs),
    /// Print total and per-module parameter counts.
    Params(ModelArgs),
}

#[derive(Args, Debug)]
struct GenArgs {
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 205)]
    train: usize,
    #[arg(long, default_value_t = 20)]
    val: usize,
    #[arg(long, default_value_t = 10)]
    test: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Sources per clip.
    #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u8).range(1..=2))]
    sources: u8,
    /// Image-source reflection order.
    #[arg(long, default_value_t = 0, value_parser = clap::value_parser!(u8).range(0..=1))]
    reflections: u8,
    /// Clip length in seconds.
    #[arg(long, default_value_t = 4.0)]
    duration: f64,
    /// Rendering threads.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Preset {
    Full,
    Desk,
}

#[derive(Args, Debug)]
struct ModelArgs {
    /// Built-in model configuration.
    #[arg(long, value_enum, default_value_t = Preset::Full)]
    preset: Preset,
    /// Model config file (`key = value` lines); overrides --preset.
    #[arg(long)]
    config: Option<PathBuf>,
}

impl ModelArgs {
    fn resolve(&self) -> Result<StateformerConfig, Error> {
        match &self.config {
            Some(path) => StateformerConfig::load(path),
            None => Ok(match self.preset {
                Preset::Full => StateformerConfig::full(),
                Preset::Desk => StateformerConfig::desk(),
            }),
        }
    }
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Dataset directory holding train.jsonl and val.jsonl.
    #[arg(long)]
    data: PathBuf,
    /// Output directory for the checkpoint, history and config.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 80)]
    epochs: usize,
    #[arg(long, default_value_t = 8)]
    batch: usize,
    /// Initial learning rate.
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// Manifest (`.jsonl`) to score.
    #[arg(long)]
    data: PathBuf,
    /// Also write the report to this file.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct InferArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    wav: PathBuf,
    /// Output track file.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct BenchArgs {
    /// Smallest length as a power of two.
    #[arg(long, default_value_t = 6)]
    min_exp: u32,
    /// Largest length as a power of two.
    #[arg(long, default_value_t = 13)]
    max_exp: u32,
    #[arg(long, default_value_t = 32)]
    d_model: usize,
    #[arg(long, default_value_t = 2)]
    heads: usize,
    /// Minimum time spent per cell, in milliseconds.
    #[arg(long, default_value_t = 200)]
    budget_ms: u64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

/// Exit code for a library error.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Io { source, .. } if source.kind() == ErrorKind::NotFound => EXIT_MISSING_FILE,
        Error::Io { .. } => EXIT_FAILURE,
        Error::Format { .. } => EXIT_MALFORMED,
        Error::Version { .. } => EXIT_VERSION,
        Error::NonFinite(_) | Error::Tensor(TensorError::NonFinite(_)) => EXIT_NON_FINITE,
        Error::Invalid { .. } | Error::Tensor(_) => EXIT_FAILURE,
    }
}

fn write_file(path: &Path, text: &str) -> Result<(), Error> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|source| Error::Io { path: dir.to_path_buf(), source })?;
    }
    std::fs::write(path, text).map_err(|source| Error::Io { path: path.to_path_buf(), source })
}

/// Echoes the resolved settings to stderr, one `# `-prefixed line each.
fn announce(seed: &str, settings: &str) {
    eprintln!("# seed {seed}");
    for line in settings.lines() {
        eprintln!("# {line}");
    }
}

fn gen(a: &GenArgs) -> Result<i32, Error> {
    let spec = DatasetSpec {
        out_dir: a.out.clone(),
        counts: SplitCounts { train: a.train, val: a.val, test: a.test },
        seed: a.seed,
        ranges: SceneRanges { n_sources: a.sources as usize, reflection_order: a.reflections, duration: a.duration, ..SceneRanges::default() },
        stft: StftConfig::default(),
        jobs: a.jobs,
    };
    announce(&a.seed.to_string(), &format!("{spec:#?}"));
    for path in generate_dataset(&spec)? {
        println!("{}", path.display());
    }
    Ok(EXIT_OK)
}

fn train_cmd(a: &TrainArgs) -> Result<i32, Error> {
    let cfg = a.model.resolve()?;
    let stft = StftConfig::default();
    let train_set = load_samples(a.data.join("train.jsonl"), &stft)?;
    let val_set = load_samples(a.data.join("val.jsonl"), &stft)?;
    let tc = TrainConfig { lr0: a.lr, epochs: a.epochs, batch: a.batch, seed: a.seed, ..TrainConfig::default() };
    let mut model = Stateformer::new(cfg, a.seed)?;
    announce(&a.seed.to_string(), &format!("{}{tc:#?}", model.cfg.to_text()));
    write_file(&a.out.join(CONFIG_FILE), &model.cfg.to_text())?;
    let start = Instant::now();
    let summary = train(&mut model, &train_set, &val_set, &tc, &a.out, &mut |r| {
        eprintln!(
            "epoch {:>3}  train {:.5}  val {:.5}  lr {:.2e}  val_mae {:.2}  [{:.0?}]",
            r.epoch,
            r.train_loss,
            r.val_loss,
            r.lr,
            r.val_mae,
            start.elapsed()
        );
    })?;
    eprintln!("best epoch {} (val loss {:.5})", summary.best_epoch, summary.best_val_loss);
    println!("{}", a.out.join(BEST_CHECKPOINT).display());
    println!("{}", a.out.join(HISTORY_FILE).display());
    Ok(EXIT_OK)
}

fn eval_cmd(a: &EvalArgs) -> Result<i32, Error> {
    let model = Stateformer::load(&a.ckpt)?;
    announce("none (evaluation is deterministic)", &model.cfg.to_text());
    let samples = load_samples(&a.data, &StftConfig::default())?;
    let report = evaluate(&model, &samples)?;
    let json = report.to_json();
    if let Some(out) = &a.out {
        write_file(out, &format!("{json}\n"))?;
    }
    println!("{json}");
    Ok(EXIT_OK)
}

fn infer_cmd(a: &InferArgs) -> Result<i32, Error> {
    let model = Stateformer::load(&a.ckpt)?;
    announce("none (inference is deterministic)", &model.cfg.to_text());
    let wave = read_wav(&a.wav)?;
    let rows = infer_track(&model, &wave, &StftConfig::default())?;
    write_file(&a.out, &track_text(&rows))?;
    Ok(EXIT_OK)
}

fn gradcheck_cmd() -> Result<i32, Error> {
    announce("fixed per check", "built-in gradient check suite");
    let start = Instant::now();
    let results = gradcheck_suite()?;
    let mut failed = 0;
    println!("{:<24} {:<6} {:>8} {:>6} {:>12} {:>10}  status", "check", "level", "coords", "zeros", "max_rel_err", "tolerance");
    for r in &results {
        let level = match r.level {
            Level::Op => "op",
            Level::Block => "block",
        };
        let status = if r.passed() { "ok" } else { "FAIL" };
        failed += usize::from(!r.passed());
        println!(
            "{:<24} {:<6} {:>8} {:>6} {:>12.3e} {:>10.0e}  {status}",
            r.name, level, r.coords, r.zero_coords, r.max_rel_err, r.tolerance
        );
    }
    println!("{} checks, {failed} failed, {:.1?}", results.len(), start.elapsed());
    Ok(if failed == 0 { EXIT_OK } else { EXIT_GRADCHECK })
}

fn bench_cmd(a: &BenchArgs) -> Result<i32, Error> {
    if a.min_exp > a.max_exp || a.max_exp > 20 {
        return Err(Error::Invalid { what: "bench range".into(), reason: "need min-exp <= max-exp <= 20".into() });
    }
    let cfg = BenchConfig {
        lengths: (a.min_exp..=a.max_exp).map(|p| 1usize << p).collect(),
        d_model: a.d_model,
        heads: a.heads,
        budget: Duration::from_millis(a.budget_ms),
        seed: a.seed,
    };
    announce(&a.seed.to_string(), &format!("{cfg:#?}"));
    print!("{}", bench_table(&run_bench(&cfg)?));
    Ok(EXIT_OK)
}

fn params_cmd(a: &ModelArgs) -> Result<i32, Error> {
    let cfg = a.resolve()?;
    let model = Stateformer::new(cfg, 0)?;
    announce("0", &model.cfg.to_text());
    for (name, n) in model.module_counts() {
        println!("{name:<10} {n:>10}");
    }
    println!("{:<10} {:>10}", "total", model.params.count());
    Ok(EXIT_OK)
}

/// Parses `argv` (including the program name), runs the subcommand and
/// returns the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    let result = match &cli.command {
        Command::Gen(a) => gen(a),
        Command::Train(a) => train_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::Infer(a) => infer_cmd(a),
        Command::Gradcheck => gradcheck_cmd(),
        Command::Bench(a) => bench_cmd(a),
        Command::Params(a) => params_cmd(a),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
