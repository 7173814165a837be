//! Command-line surface: one subcommand per pipeline stage.
//!
//! Every stage that consumes a config writes its fully-resolved
//! `config.toml` (seed included) into the run directory, so pointing
//! `--config` at that file reproduces the run.

pub mod config;
pub mod report;

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};

pub use config::{apply_env, DataSection, ModelSection, QuantSection, RunConfig, ENV_PREFIX};
pub use report::{loss_curves_csv, roc_files, write_report, ReportFiles};

use crate::data::{class_stats, scan_dataset, synth_dataset, Dataset, Split};
use crate::error::{Error, Result};
use crate::ijepa::pretrain;
use crate::model::{build, count_params, ArchSpec, Checkpoint, Model, Stored};
use crate::quant::{benchmark, payload_size, quantize, QuantizedModel};
use crate::rng;
use crate::train::{build_kd_modules, evaluate, train_distill, train_supervised, write_history, MetricsReport};

#[derive(Debug, Parser)]
#[command(name = "xakd", version, about = "ViT → CNN cross-architecture distillation pipeline")]
pub struct Cli {
    /// TOML config with sections data, teacher, student, ijepa, distill, train, quant.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Run directory for machine artifacts (default `runs/<command>`).
    #[arg(long, global = true)]
    pub out_dir: Option<PathBuf>,
    /// Structured JSON on stdout instead of the human summary.
    #[arg(long, global = true)]
    pub json: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Role {
    Teacher,
    Student,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Writes the synthetic dataset to `data.root`.
    SynthData,
    /// Self-supervised I-JEPA pretraining of the teacher.
    Pretrain,
    /// Supervised training (teacher by default; `--model student` for the plain baseline).
    Finetune {
        #[arg(long, value_enum, default_value = "teacher")]
        model: Role,
    },
    /// Trains the student against the teacher at `teacher.checkpoint`.
    Distill,
    /// Metrics of a float or int8 checkpoint on one split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "test")]
        split: Split,
    },
    /// Post-training int8 quantization of a checkpoint.
    Quantize {
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Accuracy and throughput of fp32 vs int8 on the test split.
    Bench {
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Symbolic parameter count of a preset architecture.
    CountParams {
        #[arg(long)]
        arch: String,
        #[arg(long, default_value_t = 4)]
        classes: usize,
        /// Second architecture; adds the compression ratio against it.
        #[arg(long)]
        versus: Option<String>,
    },
    /// Tables, loss curves and ROC files from a history CSV and metrics JSON.
    Report {
        #[arg(long)]
        history: PathBuf,
        #[arg(long)]
        metrics: PathBuf,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::SynthData => "synth-data",
            Command::Pretrain => "pretrain",
            Command::Finetune { .. } => "finetune",
            Command::Distill => "distill",
            Command::Eval { .. } => "eval",
            Command::Quantize { .. } => "quantize",
            Command::Bench { .. } => "bench",
            Command::CountParams { .. } => "count-params",
            Command::Report { .. } => "report",
        }
    }
}

/// Process exit code for an error: 2 bad config, 3 missing checkpoint, 1 otherwise.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config { .. } => 2,
        Error::MissingCheckpoint(_) => 3,
        _ => 1,
    }
}

fn error_kind(e: &Error) -> &'static str {
    match e {
        Error::Config { .. } => "config",
        Error::MissingCheckpoint(_) => "missing-checkpoint",
        Error::Checkpoint(_) => "checkpoint",
        Error::Dataset(_) => "dataset",
        Error::Malformed { .. } => "malformed",
        Error::Io(_) => "io",
        Error::Shape { .. } | Error::InvalidArgument(_) | Error::UnsupportedArch(_) => "invalid",
        _ => "internal",
    }
}

/// The single stderr line printed for a failed run.
pub fn error_line(e: &Error) -> String {
    let msg = e.to_string().replace(['\n', '\r'], " ");
    match e {
        Error::Config { key, .. } => format!("error[config] key={key}: {msg}"),
        _ => format!("error[{}]: {msg}", error_kind(e)),
    }
}

/// What a stage reports back: a human summary and a JSON object.
#[derive(Clone, Debug)]
pub struct Outcome {
    pub text: String,
    pub json: Value,
}

impl Outcome {
    fn new(text: impl Into<String>, json: Value) -> Self {
        Self { text: text.into(), json }
    }
}

/// Parses `args` (including the program name) and runs the command with
/// `env` as the override source. Returns the exit code; output goes to
/// stdout/stderr.
pub fn main_with(args: impl IntoIterator<Item = OsString>, env: Vec<(String, String)>) -> i32 {
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return 0;
            }
            let first = e.to_string().lines().next().unwrap_or("bad arguments").to_string();
            eprintln!("error[usage]: {}", first.trim_start_matches("error: "));
            return 2;
        }
    };
    let as_json = cli.json;
    match run(cli, env) {
        Ok(out) => {
            if as_json {
                println!("{}", out.json);
            } else {
                println!("{}", out.text.trim_end());
            }
            0
        }
        Err(e) => {
            eprintln!("{}", error_line(&e));
            exit_code(&e)
        }
    }
}

/// Entry point used by the binary.
pub fn main() -> i32 {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    main_with(std::env::args_os(), std::env::vars().collect())
}

/// Runs a parsed command.
pub fn run(cli: Cli, env: Vec<(String, String)>) -> Result<Outcome> {
    let out_dir = cli
        .out_dir
        .clone()
        .unwrap_or_else(|| Path::new("runs").join(cli.command.name()));
    match &cli.command {
        Command::CountParams { arch, classes, versus } => return count_params_cmd(arch, *classes, versus.as_deref()),
        Command::Report { history, metrics } => return report_cmd(history, metrics, &out_dir),
        _ => {}
    }
    let cfg = RunConfig::load(cli.config.as_deref(), env, cli.seed)?;
    std::fs::create_dir_all(&out_dir)?;
    std::fs::write(out_dir.join("config.toml"), cfg.to_toml())?;
    match cli.command {
        Command::SynthData => synth_cmd(&cfg, &out_dir),
        Command::Pretrain => pretrain_cmd(&cfg, &out_dir),
        Command::Finetune { model } => finetune_cmd(&cfg, model, &out_dir),
        Command::Distill => distill_cmd(&cfg, &out_dir),
        Command::Eval { checkpoint, split } => eval_cmd(&cfg, &checkpoint, split, &out_dir),
        Command::Quantize { checkpoint } => quantize_cmd(&checkpoint, &out_dir),
        Command::Bench { checkpoint } => bench_cmd(&cfg, &checkpoint, &out_dir),
        Command::CountParams { .. } | Command::Report { .. } => unreachable!("handled above"),
    }
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

fn load_split(cfg: &RunConfig, split: Split) -> Result<Dataset> {
    Dataset::from_index(&scan_dataset(&cfg.data.root, split)?)
}

fn require_checkpoint(path: &Path) -> Result<Checkpoint> {
    if !path.exists() {
        return Err(Error::MissingCheckpoint(path.to_path_buf()));
    }
    Checkpoint::load(path)
}

/// Loads a float model, or the dequantized form of an int8 checkpoint.
fn load_model(path: &Path) -> Result<Model> {
    let ck = require_checkpoint(path)?;
    if ck.tensors.values().any(|t| matches!(t, Stored::I8 { .. })) {
        Ok(QuantizedModel::from_checkpoint(&ck)?.dequantize())
    } else {
        Model::from_checkpoint(&ck)
    }
}

fn section_model(section: &ModelSection, role: &str, seed: u64) -> Result<Model> {
    let spec = section.resolve()?;
    match &section.checkpoint {
        Some(path) => {
            let model = Model::from_checkpoint(&require_checkpoint(path)?)?;
            if model.spec != spec {
                return Err(Error::Config {
                    key: format!("{role}.checkpoint"),
                    msg: format!("checkpoint architecture differs from the configured {role} spec"),
                });
            }
            Ok(model)
        }
        None => build(&spec, &mut rng::stream(seed, &format!("init/{role}"))),
    }
}

fn metrics_summary(m: &MetricsReport) -> String {
    format!("{}\n{}", m.confusion_table(), m.class_table())
}

fn count_params_cmd(arch: &str, classes: usize, versus: Option<&str>) -> Result<Outcome> {
    let spec = ArchSpec::preset(arch, classes)?;
    let n = count_params(&spec)?;
    let Some(other) = versus else {
        return Ok(Outcome::new(n.to_string(), json!({ "arch": arch, "classes": classes, "params": n })));
    };
    let m = count_params(&ArchSpec::preset(other, classes)?)?;
    let compression = 1.0 - m as f64 / n as f64;
    Ok(Outcome::new(
        format!("{arch}: {n}\n{other}: {m}\ncompression: {:.2}%", 100.0 * compression),
        json!({ "arch": arch, "classes": classes, "params": n, "versus": other, "versus_params": m, "compression": compression }),
    ))
}

fn report_cmd(history: &Path, metrics: &Path, out_dir: &Path) -> Result<Outcome> {
    let rows = report::read_history(history)?;
    let m = report::read_metrics(metrics)?;
    let files = write_report(&rows, &m, out_dir)?;
    let names: Vec<String> = files.written.iter().map(|p| p.display().to_string()).collect();
    let mut text = metrics_summary(&m);
    if files.roc_skipped {
        text.push_str("warning: no ROC curves in metrics; ROC files omitted\n");
    }
    Ok(Outcome::new(text, json!({ "files": names, "roc_skipped": files.roc_skipped })))
}

fn synth_cmd(cfg: &RunConfig, out_dir: &Path) -> Result<Outcome> {
    let indexes = synth_dataset(&cfg.data.root, &cfg.data.synth(), cfg.seed)?;
    let mut text = format!("synthetic dataset written to {}\n", cfg.data.root.display());
    let mut stats = Vec::new();
    for idx in &indexes {
        let s = class_stats(idx)?;
        write_json(&out_dir.join(format!("stats_{}.json", idx.split)), &s)?;
        text.push_str(&format!("{}: {} images {:?}\n", idx.split, idx.len(), s.counts));
        stats.push(s);
    }
    Ok(Outcome::new(text, json!({ "root": cfg.data.root, "stats": stats })))
}

fn pretrain_cmd(cfg: &RunConfig, out_dir: &Path) -> Result<Outcome> {
    let mut model = section_model(&cfg.teacher, "teacher", cfg.seed)?;
    let train = load_split(cfg, Split::Train)?;
    let out = pretrain(&mut model, &train, &cfg.ijepa())?;
    let mut ck = model.to_checkpoint();
    ck.insert_map(Some("ema"), &out.ema.target);
    ck.insert_map(Some("pred"), &out.predictor.params);
    let path = out_dir.join("pretrain.ckpt");
    ck.save(&path)?;
    write_history(&out_dir.join("history.csv"), &out.history)?;
    write_json(&out_dir.join("ssl_losses.json"), &out.epoch_losses)?;
    let first = out.epoch_losses.first().copied().unwrap_or(f64::NAN);
    let last = out.epoch_losses.last().copied().unwrap_or(f64::NAN);
    Ok(Outcome::new(
        format!("ssl loss {first:.4} -> {last:.4}\ncheckpoint {}", path.display()),
        json!({ "checkpoint": path, "epoch_losses": out.epoch_losses }),
    ))
}

fn finetune_cmd(cfg: &RunConfig, role: Role, out_dir: &Path) -> Result<Outcome> {
    let (section, name) = match role {
        Role::Teacher => (&cfg.teacher, "teacher"),
        Role::Student => (&cfg.student, "student"),
    };
    let mut model = section_model(section, name, cfg.seed)?;
    let train = load_split(cfg, Split::Train)?;
    let val = load_split(cfg, Split::Val)?;
    let test = load_split(cfg, Split::Test)?;
    let t = train_supervised(&mut model, &train, &val, &cfg.train(), &cfg.data.train_policy())?;
    let path = out_dir.join(format!("{name}.ckpt"));
    t.best.to_checkpoint().save(&path)?;
    write_history(&out_dir.join("history.csv"), &t.history)?;
    let metrics = evaluate(&t.best, &test, cfg.train.batch_size)?;
    write_json(&out_dir.join("metrics.json"), &metrics)?;
    write_json(&out_dir.join("epochs.json"), &t.epochs)?;
    Ok(Outcome::new(
        format!(
            "best val acc {:.4} (epoch {})\ntest acc {:.4}\ncheckpoint {}\n{}",
            t.best_val_accuracy,
            t.best_epoch,
            metrics.accuracy,
            path.display(),
            metrics_summary(&metrics)
        ),
        json!({ "checkpoint": path, "best_epoch": t.best_epoch, "best_val_accuracy": t.best_val_accuracy, "test": metrics }),
    ))
}

fn distill_cmd(cfg: &RunConfig, out_dir: &Path) -> Result<Outcome> {
    let Some(tpath) = &cfg.teacher.checkpoint else {
        return Err(Error::Config {
            key: "teacher.checkpoint".into(),
            msg: "distill needs a trained teacher checkpoint".into(),
        });
    };
    let teacher = Model::from_checkpoint(&require_checkpoint(tpath)?)?;
    let mut student = section_model(&cfg.student, "student", cfg.seed)?;
    let train = load_split(cfg, Split::Train)?;
    let val = load_split(cfg, Split::Val)?;
    let test = load_split(cfg, Split::Test)?;
    let mut kd = build_kd_modules(&teacher, &student, &cfg.distill, cfg.seed)?;
    let t = train_distill(
        &teacher,
        &mut student,
        &mut kd,
        &train,
        &val,
        &cfg.train(),
        &cfg.distill,
        &cfg.data.train_policy(),
    )?;
    let best_kd = t.kd.as_ref().unwrap_or(&kd);
    let mut ck = t.best.to_checkpoint();
    ck.insert_map(Some("pca"), &best_kd.pca.params);
    ck.insert_map(Some("gl"), &best_kd.gl.params);
    ck.insert_map(Some("disc"), &best_kd.disc.params);
    let path = out_dir.join("student.ckpt");
    ck.save(&path)?;
    write_history(&out_dir.join("history.csv"), &t.history)?;
    let metrics = evaluate(&t.best, &test, cfg.train.batch_size)?;
    write_json(&out_dir.join("metrics.json"), &metrics)?;
    write_json(&out_dir.join("epochs.json"), &t.epochs)?;
    Ok(Outcome::new(
        format!(
            "best val acc {:.4} (epoch {})\ntest acc {:.4}\ncheckpoint {}\n{}",
            t.best_val_accuracy,
            t.best_epoch,
            metrics.accuracy,
            path.display(),
            metrics_summary(&metrics)
        ),
        json!({ "checkpoint": path, "best_epoch": t.best_epoch, "best_val_accuracy": t.best_val_accuracy, "test": metrics }),
    ))
}

fn eval_cmd(cfg: &RunConfig, checkpoint: &Path, split: Split, out_dir: &Path) -> Result<Outcome> {
    let model = load_model(checkpoint)?;
    let data = load_split(cfg, split)?;
    let metrics = evaluate(&model, &data, cfg.train.batch_size)?;
    write_json(&out_dir.join("metrics.json"), &metrics)?;
    Ok(Outcome::new(
        format!("{split} accuracy {:.4}\n{}", metrics.accuracy, metrics_summary(&metrics)),
        json!({ "split": split.as_str(), "metrics": metrics }),
    ))
}

fn quantize_cmd(checkpoint: &Path, out_dir: &Path) -> Result<Outcome> {
    let model = Model::from_checkpoint(&require_checkpoint(checkpoint)?)?;
    let q = quantize(&model);
    let path = out_dir.join("quantized.ckpt");
    q.save(&path)?;
    let fp32 = payload_size(&model);
    let int8 = q.payload_size();
    let worst = q
        .q_weights
        .iter()
        .map(|(name, qt)| {
            let diff = model.params[name].max_abs_diff(&qt.dequantize());
            diff / f64::from(qt.scale)
        })
        .fold(0.0f64, f64::max);
    let summary = json!({
        "checkpoint": path,
        "fp32_payload_bytes": fp32,
        "int8_payload_bytes": int8,
        "ratio": int8 as f64 / fp32 as f64,
        "max_error_in_scales": worst,
    });
    write_json(&out_dir.join("quant.json"), &summary)?;
    Ok(Outcome::new(
        format!(
            "fp32 payload {fp32} B\nint8 payload {int8} B (ratio {:.4})\nworst round-trip error {worst:.3} scale\ncheckpoint {}",
            int8 as f64 / fp32 as f64,
            path.display()
        ),
        summary,
    ))
}

fn bench_cmd(cfg: &RunConfig, checkpoint: &Path, out_dir: &Path) -> Result<Outcome> {
    let model = Model::from_checkpoint(&require_checkpoint(checkpoint)?)?;
    let q = quantize(&model);
    let test = load_split(cfg, Split::Test)?;
    let r = benchmark(&model, &q, &test, cfg.quant.batch_size, cfg.quant.n_warmup, cfg.quant.n_timed)?;
    write_json(&out_dir.join("bench.json"), &r)?;
    Ok(Outcome::new(
        format!(
            "accuracy fp32 {:.4} int8 {:.4}\npayload fp32 {} B int8 {} B\nthroughput fp32 {:.1} img/s int8 {:.1} img/s",
            r.fp32_accuracy, r.int8_accuracy, r.fp32_payload_bytes, r.int8_payload_bytes, r.throughput_fp32, r.throughput_int8
        ),
        serde_json::to_value(&r)?,
    ))
}
