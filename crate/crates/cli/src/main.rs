//! `combo-lab`: dataset generation, scenario runs, evaluation, sweeps and reports.
//!
//! Every subcommand prints one JSON object on stdout when it succeeds. On
//! failure it prints `{"status":"error","kind":...,"message":...}` on stderr and
//! exits with status 1.

mod config;
mod plots;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use combo_lab::checkpoint::load_checkpoint;
use combo_lab::datagen::{read_dataset, write_dataset, Dataset};
use combo_lab::metrics::metrics_csv;
use combo_lab::protocol::{checkpoint_path, evaluate, run_scenario, scenario_datasets, MethodFlags, ScenarioReport, ScenarioRun};
use combo_lab::LabError;
use serde_json::json;

use config::RunConfig;

pub const THREADS_ENV: &str = "COMBO_LAB_THREADS";
const CONFIG_FILE: &str = "config.toml";
const REPORT_FILE: &str = "report.json";
const METRICS_FILE: &str = "metrics.csv";
const SWEEP_PARAMETERS: [&str; 3] = ["lambda_kl", "lambda_ikd", "adapter_rank"];

#[derive(Parser)]
#[command(name = "combo-lab", version, about = "Continual panoptic segmentation lab on synthetic scenes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write the scenario's training and validation images under `<out>/data`.
    Generate(Common),
    /// Train and evaluate every step; writes report, CSV, plots and checkpoints.
    Run {
        #[command(flatten)]
        common: Common,
        /// Continue from the latest checkpoint in `<out>/checkpoints`.
        #[arg(long)]
        resume: bool,
    },
    /// Re-evaluate a checkpoint of an existing run directory.
    Evaluate {
        #[command(flatten)]
        common: Common,
        /// Step to evaluate (default: latest checkpoint).
        #[arg(long)]
        step: Option<usize>,
    },
    /// One run per value of a hyperparameter, plus a combined table.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// One of lambda_kl, lambda_ikd, adapter_rank.
        #[arg(long)]
        param: String,
        /// Comma-separated values.
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<String>,
    },
    /// Validate a run's report and regenerate its CSV and plots.
    Report(Common),
}

#[derive(Args, Clone, Default)]
struct Common {
    /// Run configuration (TOML). Defaults to `<out>/config.toml` when only `--out` is given.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the scenario and training seeds.
    #[arg(long)]
    seed: Option<u64>,
    /// Output (run) directory; overrides `output_dir`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Fully serial, bit-reproducible execution.
    #[arg(long)]
    strict_deterministic: bool,
    /// Method components, e.g. `pseudo,hdhl,ikd,qcr`, `all` or `none`.
    #[arg(long)]
    flags: Option<String>,
}

impl Common {
    fn resolve(&self) -> Result<RunConfig> {
        let path = match (&self.config, &self.out) {
            (Some(p), _) => p.clone(),
            (None, Some(out)) => out.join(CONFIG_FILE),
            (None, None) => bail!("either --config or --out is required"),
        };
        let mut cfg = RunConfig::load(&path)?;
        if let Some(seed) = self.seed {
            cfg.set_seed(seed);
        }
        if let Some(out) = &self.out {
            cfg.output_dir = out.clone();
        }
        if self.strict_deterministic {
            cfg.train.strict_deterministic = true;
        }
        if let Some(list) = &self.flags {
            cfg.train.flags = MethodFlags::parse(list)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn data_dirs(out: &Path) -> (PathBuf, PathBuf) {
    (out.join("data").join("train"), out.join("data").join("val"))
}

fn generate(cfg: &RunConfig) -> Result<(Dataset, Dataset)> {
    let (train, val) = scenario_datasets(&cfg.scene(), &cfg.scenario, cfg.val_images)?;
    let (train_dir, val_dir) = data_dirs(&cfg.output_dir);
    write_dataset(&train, &train_dir)?;
    write_dataset(&val, &val_dir)?;
    Ok((train, val))
}

/// Reads the run's datasets, generating them first if absent.
fn datasets(cfg: &RunConfig) -> Result<(Dataset, Dataset)> {
    let (train_dir, val_dir) = data_dirs(&cfg.output_dir);
    if !train_dir.join("manifest.json").exists() || !val_dir.join("manifest.json").exists() {
        return generate(cfg);
    }
    let (train, val) = (read_dataset(&train_dir)?, read_dataset(&val_dir)?);
    for d in [&train, &val] {
        if (d.height, d.width) != (cfg.model.height, cfg.model.width) {
            bail!("dataset in {} does not match the configured image size", cfg.output_dir.display());
        }
    }
    Ok((train, val))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn write_outputs(report: &ScenarioReport, out: &Path) -> Result<serde_json::Value> {
    report.validate()?;
    let mut json = serde_json::to_string_pretty(report)?;
    json.push('\n');
    write_text(&out.join(REPORT_FILE), &json)?;
    let rows: Vec<_> = report.steps.iter().map(|s| (s.step, &s.metrics)).collect();
    write_text(&out.join(METRICS_FILE), &metrics_csv(&rows))?;
    let plots = plots::write_all(report, &out.join("plots"))?;
    Ok(json!({ "report": out.join(REPORT_FILE), "metrics": out.join(METRICS_FILE), "plots": plots }))
}

fn run(cfg: &RunConfig, resume: bool) -> Result<ScenarioReport> {
    let out = &cfg.output_dir;
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    write_text(&out.join(CONFIG_FILE), &cfg.to_toml()?)?;
    let (train, val) = datasets(cfg)?;
    let ckpt = out.join("checkpoints");
    let report = run_scenario(&ScenarioRun {
        scenario: &cfg.scenario,
        model: &cfg.model,
        train: &cfg.train,
        train_data: &train.samples,
        val_data: &val.samples,
        checkpoint_dir: Some(&ckpt),
        resume,
        stop_after: None,
    })?;
    Ok(report)
}

fn final_summary(report: &ScenarioReport) -> serde_json::Value {
    match report.final_step() {
        Some(s) => json!({
            "step": s.step,
            "pq": { "base": s.summary.base.pq, "incremental": s.summary.incremental.pq, "all": s.summary.all.pq },
            "miou": { "base": s.summary.base.miou, "incremental": s.summary.incremental.miou, "all": s.summary.all.miou },
        }),
        None => serde_json::Value::Null,
    }
}

fn cmd_generate(common: &Common) -> Result<serde_json::Value> {
    let cfg = common.resolve()?;
    let (train, val) = generate(&cfg)?;
    let (train_dir, val_dir) = data_dirs(&cfg.output_dir);
    let hist = |d: &Dataset| {
        d.class_counts()
            .into_iter()
            .map(|(c, n)| (c.0.to_string(), n))
            .collect::<std::collections::BTreeMap<_, _>>()
    };
    Ok(json!({
        "train": { "dir": train_dir, "images": train.samples.len(), "class_counts": hist(&train) },
        "val": { "dir": val_dir, "images": val.samples.len(), "class_counts": hist(&val) },
    }))
}

fn cmd_run(common: &Common, resume: bool) -> Result<serde_json::Value> {
    let cfg = common.resolve()?;
    let report = run(&cfg, resume)?;
    let mut outputs = write_outputs(&report, &cfg.output_dir)?;
    outputs["label"] = json!(report.label);
    outputs["final"] = final_summary(&report);
    Ok(outputs)
}

fn cmd_evaluate(common: &Common, step: Option<usize>) -> Result<serde_json::Value> {
    let cfg = common.resolve()?;
    let dir = cfg.output_dir.join("checkpoints");
    let t = match step {
        Some(t) => t,
        None => (1..=cfg.scenario.steps)
            .rev()
            .find(|&t| checkpoint_path(&dir, t).exists())
            .ok_or_else(|| anyhow!("no checkpoints in {}", dir.display()))?,
    };
    let ck = load_checkpoint(&checkpoint_path(&dir, t))?;
    let (_, val) = datasets(&cfg)?;
    let report = evaluate(&ck.model, &val.samples, &cfg.train)?;
    let path = cfg.output_dir.join(format!("eval_step_{t}.json"));
    write_text(&path, &serde_json::to_string_pretty(&report)?)?;
    Ok(json!({
        "step": t,
        "output": path,
        "pq": { "base": report.group("base").pq, "incremental": report.group("incremental").pq, "all": report.group("all").pq },
        "miou": { "base": report.group("base").miou, "incremental": report.group("incremental").miou, "all": report.group("all").miou },
    }))
}

fn apply_sweep_value(cfg: &mut RunConfig, param: &str, value: &str) -> Result<()> {
    let real = || -> Result<f64> {
        value
            .trim()
            .parse::<f64>()
            .map_err(|_| anyhow!("{param} value {value:?} is not a number"))
    };
    match param {
        "lambda_kl" => cfg.train.weights.lambda_kl = real()?,
        "lambda_ikd" => cfg.train.weights.lambda_ikd = real()?,
        "adapter_rank" => {
            cfg.model.adapter_rank = value
                .trim()
                .parse()
                .map_err(|_| anyhow!("adapter_rank value {value:?} is not a positive integer"))?
        }
        other => bail!(
            "unknown sweep parameter {other:?}; valid parameters: {}",
            SWEEP_PARAMETERS.join(", ")
        ),
    }
    cfg.validate()
}

fn cmd_sweep(common: &Common, param: &str, values: &[String]) -> Result<serde_json::Value> {
    if !SWEEP_PARAMETERS.contains(&param) {
        bail!(
            "unknown sweep parameter {param:?}; valid parameters: {}",
            SWEEP_PARAMETERS.join(", ")
        );
    }
    let base = common.resolve()?;
    let mut csv = String::from("parameter,value,adapter_parameters_per_class,pq_base,pq_incremental,pq_all,miou_base,miou_all\n");
    let mut rows = Vec::new();
    let fmt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
    for value in values {
        let mut cfg = base.clone();
        apply_sweep_value(&mut cfg, param, value)?;
        cfg.output_dir = base.output_dir.join("sweep").join(format!("{param}-{}", value.trim()));
        let report = run(&cfg, false)?;
        write_outputs(&report, &cfg.output_dir)?;
        let s = report.final_step().ok_or_else(|| anyhow!("empty report"))?;
        csv.push_str(&format!(
            "{param},{},{},{},{},{},{},{}\n",
            value.trim(),
            report.adapter_parameters_per_class,
            fmt(s.summary.base.pq),
            fmt(s.summary.incremental.pq),
            fmt(s.summary.all.pq),
            fmt(s.summary.base.miou),
            fmt(s.summary.all.miou),
        ));
        rows.push(json!({
            "value": value.trim(),
            "run_dir": cfg.output_dir,
            "adapter_parameters_per_class": report.adapter_parameters_per_class,
            "final": final_summary(&report),
        }));
    }
    std::fs::create_dir_all(&base.output_dir)?;
    write_text(&base.output_dir.join("sweep.csv"), &csv)?;
    let table = json!({ "parameter": param, "rows": rows });
    write_text(&base.output_dir.join("sweep.json"), &serde_json::to_string_pretty(&table)?)?;
    Ok(table)
}

fn cmd_report(common: &Common) -> Result<serde_json::Value> {
    let out = match (&common.out, &common.config) {
        (Some(out), _) => out.clone(),
        (None, Some(_)) => common.resolve()?.output_dir,
        (None, None) => bail!("either --config or --out is required"),
    };
    let path = out.join(REPORT_FILE);
    let text = std::fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
    let report: ScenarioReport = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    let mut outputs = write_outputs(&report, &out)?;
    outputs["label"] = json!(report.label);
    outputs["steps"] = json!(report
        .steps
        .iter()
        .map(|s| json!({ "step": s.step, "pq_all": s.summary.all.pq, "miou_all": s.summary.all.miou }))
        .collect::<Vec<_>>());
    Ok(outputs)
}

fn configure_threads() -> Result<()> {
    if let Ok(raw) = std::env::var(THREADS_ENV) {
        let n: usize = raw
            .trim()
            .parse()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| anyhow!("{THREADS_ENV} must be a positive integer, got {raw:?}"))?;
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}

fn error_kind(err: &anyhow::Error) -> &'static str {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<LabError>() {
            return match e {
                LabError::Io { .. } => "io",
                LabError::Malformed { .. } => "malformed",
                LabError::InvalidArgument(_) => "invalid_argument",
                _ => "computation",
            };
        }
        if cause.downcast_ref::<toml::de::Error>().is_some() {
            return "config";
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return "io";
        }
    }
    "invalid_argument"
}

fn dispatch(cli: &Cli) -> Result<serde_json::Value> {
    configure_threads()?;
    match &cli.command {
        Command::Generate(c) => cmd_generate(c),
        Command::Run { common, resume } => cmd_run(common, *resume),
        Command::Evaluate { common, step } => cmd_evaluate(common, *step),
        Command::Sweep { common, param, values } => cmd_sweep(common, param, values),
        Command::Report(c) => cmd_report(c),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(&cli) {
        Ok(mut value) => {
            value["status"] = json!("ok");
            println!("{value}");
            ExitCode::SUCCESS
        }
        Err(err) => {
            let msg = json!({
                "status": "error",
                "kind": error_kind(&err),
                "message": format!("{err:#}"),
            });
            eprintln!("{msg}");
            ExitCode::FAILURE
        }
    }
}
