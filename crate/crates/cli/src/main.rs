//! `rrd`: train teachers, distill students, evaluate, export embeddings and
//! run ablation sweeps from a single JSON config.
//!
//! Exit codes: 0 on success, 2 for usage, config and file errors, 3 for
//! numerical failures. On success one JSON summary line goes to stdout.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};

use rrd_core::data::Split;
use rrd_core::eval::{self, ProbeConfig};
use rrd_core::fsutil::write_atomic;
use rrd_core::gradcheck_suite::{check_losses, GradcheckSizes};
use rrd_core::memory_bank::{UpdateStrategy, DEFAULT_MOMENTUM};
use rrd_core::train::{self, Checkpoint, Config, Seeds, TrainOutcome};
use rrd_core::{Dataset, Error, Model};

#[derive(Parser)]
#[command(name = "rrd", version, about = "Relational representation distillation experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Pretrain the teacher; writes the checkpoint and `<out>.metrics.csv`.
    TrainTeacher {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Replace all three config seeds with this value.
        #[arg(long)]
        seed_override: Option<u64>,
    },
    /// Distill a student from a teacher checkpoint; writes the student
    /// checkpoint and `<out>.metrics.csv`.
    Distill {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        teacher: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed_override: Option<u64>,
    },
    /// Evaluate a checkpoint: top-1 accuracy, the logit-correlation gap to a
    /// teacher when one is given, and the linear probe when configured.
    Eval {
        checkpoint: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        teacher: Option<PathBuf>,
        /// JSON report; the correlation difference matrix goes to
        /// `<out>.corr.csv`.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed_override: Option<u64>,
    },
    /// Finite-difference check of every loss through a small student.
    Gradcheck {
        /// First seed; seeds `seed..seed+count` are checked.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 20)]
        count: u64,
        /// `batch,input,hidden,classes,proj,bank`
        #[arg(long, default_value = "4,3,16,4,8,16")]
        sizes: String,
        #[arg(long, default_value_t = 1e-5)]
        tolerance: f64,
    },
    /// Write projection-head embeddings of every sample as CSV.
    ExportEmbeddings {
        checkpoint: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Distill once per value of one hyperparameter; writes
    /// `<out>/<axis>_<value>.csv` per point.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        /// Teacher checkpoint; trained from the config when omitted.
        #[arg(long)]
        teacher: Option<PathBuf>,
        #[arg(long, value_enum)]
        axis: Axis,
        /// Comma-separated values. Strategies are `fifo`, `momentum` or
        /// `momentum:<alpha>`.
        #[arg(long)]
        values: String,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed_override: Option<u64>,
    },
    /// Print a built-in config preset.
    Preset {
        #[arg(value_enum)]
        name: Preset,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Axis {
    #[value(name = "tau_t")]
    TauT,
    #[value(name = "tau_s")]
    TauS,
    #[value(name = "K", alias = "k")]
    K,
    #[value(name = "beta")]
    Beta,
    #[value(name = "strategy")]
    Strategy,
}

impl Axis {
    fn name(self) -> &'static str {
        match self {
            Axis::TauT => "tau_t",
            Axis::TauS => "tau_s",
            Axis::K => "K",
            Axis::Beta => "beta",
            Axis::Strategy => "strategy",
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    Desk,
    PaperFaithful,
}

enum Failure {
    Usage(String),
    Core(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}

type CmdResult = Result<Value, Failure>;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("RRD_LOG_LEVEL", "error")).init();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Core(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_numerical() { 3 } else { 2 })
        }
    }
}

fn run(command: Command) -> CmdResult {
    match command {
        Command::TrainTeacher {
            config,
            out,
            seed_override,
        } => train_teacher(&config, &out, seed_override),
        Command::Distill {
            config,
            teacher,
            out,
            seed_override,
        } => distill(&config, &teacher, &out, seed_override),
        Command::Eval {
            checkpoint,
            config,
            teacher,
            out,
            seed_override,
        } => evaluate(&checkpoint, &config, teacher.as_deref(), &out, seed_override),
        Command::Gradcheck {
            seed,
            count,
            sizes,
            tolerance,
        } => gradcheck(seed, count, &sizes, tolerance),
        Command::ExportEmbeddings { checkpoint, config, out } => export_embeddings(&checkpoint, &config, &out),
        Command::Sweep {
            config,
            teacher,
            axis,
            values,
            out,
            seed_override,
        } => sweep(&config, teacher.as_deref(), axis, &values, &out, seed_override),
        Command::Preset { name, out } => preset(name, out.as_deref()),
    }
}

fn load_config(path: &Path, seed_override: Option<u64>) -> Result<Config, Failure> {
    let mut config = Config::load(path)?;
    if let Some(seed) = seed_override {
        config.seeds = Seeds::all(seed);
    }
    Ok(config)
}

/// `dir/stem.ckpt` → `dir/stem.<suffix>`
fn sibling(path: &Path, suffix: &str) -> PathBuf {
    path.with_extension(suffix)
}

fn path_str(p: &Path) -> String {
    p.display().to_string()
}

fn final_test_top1(log: &train::MetricsLog) -> Option<f64> {
    log.last("test").map(|r| r.top1)
}

fn save_outcome(outcome: &TrainOutcome, out: &Path) -> Result<PathBuf, Failure> {
    let metrics = sibling(out, "metrics.csv");
    train::save_checkpoint(&outcome.checkpoint, out)?;
    outcome.log.write(&metrics)?;
    Ok(metrics)
}

fn train_teacher(config: &Path, out: &Path, seed_override: Option<u64>) -> CmdResult {
    let config = load_config(config, seed_override)?;
    let data = config.data.build()?;
    let outcome = train::train_teacher(&config, &data)?;
    let metrics = save_outcome(&outcome, out)?;
    Ok(json!({
        "command": "train-teacher",
        "checkpoint": path_str(out),
        "metrics": path_str(&metrics),
        "epochs": outcome.checkpoint.epoch,
        "test_top1": final_test_top1(&outcome.log),
    }))
}

fn distill(config: &Path, teacher: &Path, out: &Path, seed_override: Option<u64>) -> CmdResult {
    let config = load_config(config, seed_override)?;
    let teacher = train::load_checkpoint(teacher)?;
    let data = config.data.build()?;
    let outcome = train::distill(&config, &teacher, &data)?;
    let metrics = save_outcome(&outcome, out)?;
    Ok(json!({
        "command": "distill",
        "checkpoint": path_str(out),
        "metrics": path_str(&metrics),
        "epochs": outcome.checkpoint.epoch,
        "test_top1": final_test_top1(&outcome.log),
    }))
}

/// The model stored in `ckpt`, which must be the config's student or teacher.
fn model_from(ckpt: &Checkpoint, config: &Config) -> Result<Model, Failure> {
    let spec = if ckpt.spec == config.model_student {
        &config.model_student
    } else {
        &config.model_teacher
    };
    Ok(ckpt.model(spec)?)
}

fn evaluate(
    checkpoint: &Path,
    config: &Path,
    teacher: Option<&Path>,
    out: &Path,
    seed_override: Option<u64>,
) -> CmdResult {
    let config = load_config(config, seed_override)?;
    let model = model_from(&train::load_checkpoint(checkpoint)?, &config)?;
    let data = config.data.build()?;
    let logits = |m: &Model, split: Split| -> Result<_, Failure> {
        let (x, y) = data.split(split);
        Ok((m.forward(&x)?.logits, y))
    };
    let (train_logits, train_y) = logits(&model, Split::Train)?;
    let (test_logits, test_y) = logits(&model, Split::Test)?;
    let mut report = json!({
        "checkpoint": path_str(checkpoint),
        "top1_train": eval::top1_accuracy(&train_logits, &train_y)?,
        "top1_test": eval::top1_accuracy(&test_logits, &test_y)?,
    });
    if let Some(teacher) = teacher {
        let teacher = train::load_checkpoint(teacher)?.model(&config.model_teacher)?;
        let (teacher_logits, _) = logits(&teacher, Split::Test)?;
        let diff = eval::logit_correlation_difference(&teacher_logits, &test_logits)?;
        let csv = sibling(out, "corr.csv");
        diff.write_csv(&csv)?;
        report["correlation_difference"] = json!({
            "mean_abs": diff.mean_abs,
            "max_abs": diff.max_abs,
            "matrix": path_str(&csv),
        });
    }
    if let Some(probe) = &config.eval.probe {
        let transfer: Dataset = probe.data.build()?;
        let cfg = ProbeConfig {
            steps: probe.steps,
            learning_rate: probe.learning_rate,
            seed: config.seeds.init,
        };
        report["probe_top1"] = json!(eval::linear_probe_transfer(&model.freeze(), &transfer, &cfg)?);
    }
    let text = serde_json::to_string_pretty(&report).expect("report serializes") + "\n";
    write_atomic(out, text.as_bytes())?;
    Ok(json!({ "command": "eval", "report": path_str(out), "results": report }))
}

fn gradcheck(seed: u64, count: u64, sizes: &str, tolerance: f64) -> CmdResult {
    let sizes = GradcheckSizes::parse(sizes)?;
    if count == 0 {
        return Err(Failure::Usage("--count must be >= 1".into()));
    }
    let mut worst = serde_json::Map::new();
    let mut overall = 0.0f64;
    for s in seed..seed + count {
        for check in check_losses(s, sizes)? {
            overall = overall.max(check.max_relative_error);
            let entry = worst.entry(check.loss).or_insert(json!({ "max_relative_error": 0.0, "seed": s }));
            if check.max_relative_error > entry["max_relative_error"].as_f64().unwrap_or(0.0) {
                *entry = json!({ "max_relative_error": check.max_relative_error, "seed": s });
            }
        }
    }
    let summary = json!({
        "command": "gradcheck",
        "seeds": [seed, seed + count - 1],
        "sizes": sizes,
        "max_relative_error": overall,
        "tolerance": tolerance,
        "passed": overall < tolerance,
        "losses": worst,
    });
    if overall < tolerance {
        Ok(summary)
    } else {
        println!("{summary}");
        Err(Failure::Core(Error::NonFinite(format!(
            "gradient check failed: max relative error {overall:e} >= {tolerance:e}"
        ))))
    }
}

fn export_embeddings(checkpoint: &Path, config: &Path, out: &Path) -> CmdResult {
    let config = load_config(config, None)?;
    let model = model_from(&train::load_checkpoint(checkpoint)?, &config)?;
    let data = config.data.build()?;
    eval::export_embeddings(&model, &data, out)?;
    Ok(json!({
        "command": "export-embeddings",
        "out": path_str(out),
        "rows": data.len(),
        "dim": model.spec().proj_dim,
    }))
}

fn parse_strategy(v: &str) -> Result<UpdateStrategy, Failure> {
    let strategy = match v.split_once(':') {
        None if v == "fifo" => UpdateStrategy::Fifo,
        None if v == "momentum" => UpdateStrategy::Momentum {
            alpha: DEFAULT_MOMENTUM,
        },
        Some(("momentum", a)) => UpdateStrategy::Momentum {
            alpha: a.parse().map_err(|_| Failure::Usage(format!("bad momentum coefficient `{a}`")))?,
        },
        _ => return Err(Failure::Usage(format!("unknown strategy `{v}`"))),
    };
    Ok(strategy)
}

fn apply_axis(config: &mut Config, axis: Axis, value: &str) -> Result<(), Failure> {
    let num = || -> Result<f64, Failure> {
        value
            .parse::<f64>()
            .map_err(|_| Failure::Usage(format!("{} value `{value}` is not a number", axis.name())))
    };
    match axis {
        Axis::TauT => config.loss.tau_t = num()?,
        Axis::TauS => config.loss.tau_s = num()?,
        Axis::Beta => config.loss.beta_rrd = num()?,
        Axis::K => {
            config.bank.capacity = value
                .parse()
                .map_err(|_| Failure::Usage(format!("K value `{value}` is not a positive integer")))?
        }
        Axis::Strategy => config.bank.strategy = parse_strategy(value)?,
    }
    config.validate().map_err(Failure::Core)
}

fn sweep(
    config: &Path,
    teacher: Option<&Path>,
    axis: Axis,
    values: &str,
    out: &Path,
    seed_override: Option<u64>,
) -> CmdResult {
    let base = load_config(config, seed_override)?;
    let values: Vec<&str> = values.split(',').map(str::trim).filter(|v| !v.is_empty()).collect();
    if values.is_empty() {
        return Err(Failure::Usage("--values is empty".into()));
    }
    let mut points = Vec::with_capacity(values.len());
    for v in &values {
        let mut c = base.clone();
        apply_axis(&mut c, axis, v)?;
        points.push((v.to_string(), c));
    }
    let data = base.data.build()?;
    let teacher = match teacher {
        Some(p) => train::load_checkpoint(p)?,
        None => {
            log::info!("no teacher given, training one from the config");
            train::train_teacher(&base, &data)?.checkpoint
        }
    };
    std::fs::create_dir_all(out).map_err(|e| Failure::Usage(format!("{}: {e}", out.display())))?;
    let mut results = Vec::with_capacity(points.len());
    for (value, c) in &points {
        log::info!("sweep {}={value}", axis.name());
        let outcome = train::distill(c, &teacher, &data)?;
        let path = out.join(format!("{}_{value}.csv", axis.name()));
        outcome.log.write(&path)?;
        results.push(json!({
            "value": value,
            "metrics": path_str(&path),
            "test_top1": final_test_top1(&outcome.log),
        }));
    }
    Ok(json!({ "command": "sweep", "axis": axis.name(), "points": results }))
}

fn preset(name: Preset, out: Option<&Path>) -> CmdResult {
    let config = match name {
        Preset::Desk => Config::desk(),
        Preset::PaperFaithful => Config::paper_faithful(),
    };
    match out {
        Some(p) => {
            write_atomic(p, (config.to_json() + "\n").as_bytes())?;
            Ok(json!({ "command": "preset", "out": path_str(p) }))
        }
        // The config itself is the summary line, so stdout stays loadable.
        None => Ok(serde_json::to_value(&config).expect("config serializes")),
    }
}
