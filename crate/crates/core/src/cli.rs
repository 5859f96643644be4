//! Command-line front-end.
//!
//! Configuration precedence, lowest to highest: built-in defaults, the
//! `--config` TOML file, `--set section.key=value` overrides, dedicated flags
//! such as `--seed`. Unknown keys anywhere are errors.

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::evalviz;
use crate::plot;
use crate::synthdata::{self, DatasetSpec, SynthSample};
use crate::trainer::{self, EpochRecord, TrainConfig, PRESETS};

/// Environment variable naming the default output root.
pub const OUT_ROOT_ENV: &str = "PLDA_OUT_ROOT";

#[derive(Parser, Debug)]
#[command(name = "plda", version, about = "Pixel-level domain adaptation for CAM training on synthetic data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset directory.
    GenData(Common),
    /// Train a model and write checkpoint, metrics and manifest.
    Train(TrainArgs),
    /// Evaluate a checkpoint's CAMs with the background threshold sweep.
    EvalCam(EvalArgs),
    /// Render figures for a finished run.
    Plot(PlotArgs),
    /// Train the loss-switch matrix over several seeds.
    Ablate(AblateArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Device {
    Cpu,
    Accelerator,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// TOML file with optional `[train]` and `[data]` tables.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "cpu")]
    device: Device,
    /// Override any config key, e.g. `--set train.epochs=5`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
    /// Existing dataset directory; generated from `[data]` when absent.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Start from a named loss-switch preset instead of the defaults.
    #[arg(long)]
    preset: Option<String>,
    /// Validate and write the manifest without training.
    #[arg(long)]
    dry_run: bool,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct PlotArgs {
    #[command(flatten)]
    common: Common,
    /// Run directory produced by `train`.
    #[arg(long)]
    run: PathBuf,
    /// Baseline run directory to overlay in comparison figures.
    #[arg(long)]
    baseline: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct AblateArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    data: Option<PathBuf>,
    /// Comma-separated preset names.
    #[arg(long, value_delimiter = ',', default_values_t = ["baseline", "uda", "cps_s", "cps_t", "uda_cps_s", "full"].map(String::from))]
    presets: Vec<String>,
    /// Comma-separated seeds.
    #[arg(long, value_delimiter = ',', default_values_t = [0u64, 1, 2])]
    seeds: Vec<u64>,
}

/// Everything a run is configured by.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub data: DatasetSpec,
}

impl RunConfig {
    /// Defaults (optionally a preset), then `file`, then `overrides`.
    pub fn resolve(preset: Option<&str>, file: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let base = RunConfig {
            train: match preset {
                Some(p) => TrainConfig::preset(p)?,
                None => TrainConfig::default(),
            },
            data: DatasetSpec::default(),
        };
        let mut table = toml::Table::try_from(&base).map_err(|e| Error::Toml(e.to_string()))?;
        if let Some(path) = file {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            let user: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::Toml(e.to_string()))?;
            merge(&mut table, user);
        }
        for o in overrides {
            let (key, value) = o
                .split_once('=')
                .ok_or_else(|| Error::config("set", format!("expected KEY=VALUE, got {o:?}")))?;
            let (section, field) = key
                .trim()
                .split_once('.')
                .ok_or_else(|| Error::config("set", format!("key {key:?} must be section.field")))?;
            let parsed: toml::Value = format!("v = {value}")
                .parse::<toml::Table>()
                .ok()
                .and_then(|mut t| t.remove("v"))
                .unwrap_or_else(|| toml::Value::String(value.to_string()));
            let mut patch = toml::Table::new();
            let mut inner = toml::Table::new();
            inner.insert(field.to_string(), parsed);
            patch.insert(section.to_string(), toml::Value::Table(inner));
            merge(&mut table, patch);
        }
        let cfg: RunConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Toml(e.to_string()))?;
        cfg.data.validate()?;
        cfg.train.validate()?;
        Ok(cfg)
    }
}

fn merge(dst: &mut toml::Table, src: toml::Table) {
    for (k, v) in src {
        match (dst.get_mut(&k), v) {
            (Some(toml::Value::Table(d)), toml::Value::Table(s)) => merge(d, s),
            (_, v) => {
                dst.insert(k, v);
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Artifacts {
    pub dataset: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub metrics: Option<PathBuf>,
    pub eval: Option<PathBuf>,
    pub figures: Vec<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub config: RunConfig,
    pub seed: u64,
    pub device_requested: Device,
    pub device_used: Device,
    pub artifacts: Artifacts,
}

impl RunManifest {
    pub fn save(&self, dir: &Path) -> Result<PathBuf> {
        let path = dir.join("manifest.json");
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("manifest.json");
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

fn resolve_device(d: Device) -> Device {
    if d == Device::Accelerator {
        log::warn!("no accelerator backend is built in; running on cpu");
    }
    Device::Cpu
}

fn out_dir(explicit: &Option<PathBuf>, default_name: &str) -> Result<PathBuf> {
    let dir = match explicit {
        Some(p) => p.clone(),
        None => std::env::var_os(OUT_ROOT_ENV)
            .map(PathBuf::from)
            .unwrap_or_else(|| PathBuf::from("runs"))
            .join(default_name),
    };
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    Ok(dir)
}

fn load_or_generate(data: &Option<PathBuf>, spec: &DatasetSpec) -> Result<(Vec<SynthSample>, Vec<SynthSample>)> {
    match data {
        Some(dir) => {
            let (_, tr, va) = synthdata::load_dataset(dir)?;
            Ok((tr, va))
        }
        None => synthdata::generate_dataset(spec),
    }
}

pub fn read_metrics(path: &Path) -> Result<Vec<EpochRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}

fn cmd_gen_data(a: Common) -> Result<()> {
    let mut cfg = RunConfig::resolve(None, a.config.as_deref(), &a.overrides)?;
    if let Some(s) = a.seed {
        cfg.data.seed = s;
    }
    resolve_device(a.device);
    let dir = out_dir(&a.out, &format!("data-{}", cfg.data.seed))?;
    let (tr, va) = synthdata::generate_dataset(&cfg.data)?;
    synthdata::save_dataset(&dir, &cfg.data, &tr, &va)?;
    let stats = synthdata::dataset_stats(&tr)?;
    println!("wrote {} train / {} val samples to {}", tr.len(), va.len(), dir.display());
    println!("{}", serde_json::to_string(&stats)?);
    Ok(())
}

/// Trains one configuration into `dir`, writing the manifest first.
pub fn run_training(cfg: &RunConfig, data: &Option<PathBuf>, dir: &Path, device: Device, dry_run: bool) -> Result<RunManifest> {
    let mut manifest = RunManifest {
        tool: env!("CARGO_PKG_NAME").into(),
        version: env!("CARGO_PKG_VERSION").into(),
        command: "train".into(),
        config: cfg.clone(),
        seed: cfg.train.seed,
        device_requested: device,
        device_used: resolve_device(device),
        artifacts: Artifacts {
            dataset: data.clone(),
            checkpoint: Some(dir.join("checkpoint.json")),
            metrics: Some(dir.join("metrics.jsonl")),
            eval: Some(dir.join("eval.json")),
            figures: Vec::new(),
        },
    };
    if dry_run {
        manifest.artifacts.checkpoint = None;
        manifest.artifacts.metrics = None;
        manifest.artifacts.eval = None;
    }
    manifest.save(dir)?;
    if dry_run {
        return Ok(manifest);
    }
    let (tr, va) = load_or_generate(data, &cfg.data)?;
    let metrics_path = dir.join("metrics.jsonl");
    let mut file = std::fs::File::create(&metrics_path).map_err(|e| Error::io(&metrics_path, e))?;
    let mut write_err = None;
    let outcome = trainer::train_with(&tr, &va, &cfg.train, |rec| {
        let line = serde_json::to_string(rec).expect("record serializes");
        if let Err(e) = writeln!(file, "{line}") {
            write_err.get_or_insert(e);
        }
    })?;
    if let Some(e) = write_err {
        return Err(Error::io(&metrics_path, e));
    }
    Checkpoint::from_model(&outcome.model, &cfg.train).save(&dir.join("checkpoint.json"))?;
    let eval = match outcome.final_eval {
        Some(e) => e,
        None => trainer::evaluate(&outcome.model, &va, &evalviz::default_grid())?,
    };
    let eval_path = dir.join("eval.json");
    std::fs::write(&eval_path, serde_json::to_string_pretty(&eval)?).map_err(|e| Error::io(&eval_path, e))?;
    Ok(manifest)
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let mut cfg = RunConfig::resolve(a.preset.as_deref(), a.common.config.as_deref(), &a.common.overrides)?;
    if let Some(s) = a.common.seed {
        cfg.train.seed = s;
    }
    let dir = out_dir(&a.common.out, &format!("train-{}", cfg.train.seed))?;
    run_training(&cfg, &a.data, &dir, a.common.device, a.dry_run)?;
    if a.dry_run {
        println!("config valid; manifest written to {}", dir.display());
    } else {
        let eval: evalviz::SweepResult = serde_json::from_str(
            &std::fs::read_to_string(dir.join("eval.json")).map_err(|e| Error::io(dir.join("eval.json"), e))?,
        )?;
        println!("val CAM mIoU {:.4} at threshold {:.2}; run in {}", eval.best.mean, eval.best_threshold, dir.display());
    }
    Ok(())
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    resolve_device(a.common.device);
    let ck = Checkpoint::load(&a.checkpoint)?;
    let model = ck.to_model()?;
    let spec = match a.common.config.as_deref() {
        Some(_) => RunConfig::resolve(None, a.common.config.as_deref(), &a.common.overrides)?.data,
        None => DatasetSpec::default(),
    };
    let (_, va) = load_or_generate(&a.data, &spec)?;
    let report = trainer::evaluate(&model, &va, &evalviz::default_grid())?;
    let dir = out_dir(&a.common.out, "eval")?;
    let path = dir.join("eval.json");
    std::fs::write(&path, serde_json::to_string_pretty(&report)?).map_err(|e| Error::io(&path, e))?;
    let rows: Vec<Vec<f64>> = report.curve.iter().map(|&(t, m)| vec![t, m]).collect();
    plot::write_csv(&dir.join("sweep.csv"), &["threshold", "miou"], &rows)?;
    println!("{:.6} {:.2}", report.best.mean, report.best_threshold);
    Ok(())
}

fn cmd_plot(a: PlotArgs) -> Result<()> {
    resolve_device(a.common.device);
    let dir = out_dir(&a.common.out, "figures")?;
    let figures = crate::figures::render_run(&a.run, a.baseline.as_deref(), &dir)?;
    for f in figures {
        println!("{}", f.display());
    }
    Ok(())
}

fn cmd_ablate(a: AblateArgs) -> Result<()> {
    for p in &a.presets {
        if !PRESETS.contains(&p.as_str()) {
            return Err(Error::config("presets", format!("unknown preset {p:?}")));
        }
    }
    let root = out_dir(&a.common.out, "ablate")?;
    let mut rows = Vec::new();
    let mut summary = Vec::new();
    for preset in &a.presets {
        let mut scores = Vec::new();
        for &seed in &a.seeds {
            let mut cfg = RunConfig::resolve(Some(preset), a.common.config.as_deref(), &a.common.overrides)?;
            cfg.train.seed = seed;
            let dir = root.join(format!("{preset}-s{seed}"));
            std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            run_training(&cfg, &a.data, &dir, a.common.device, false)?;
            let eval: evalviz::SweepResult = serde_json::from_str(
                &std::fs::read_to_string(dir.join("eval.json")).map_err(|e| Error::io(dir.join("eval.json"), e))?,
            )?;
            println!("{preset} seed {seed}: {:.4}", eval.best.mean);
            rows.push(vec![PRESETS.iter().position(|p| p == preset).unwrap_or(0) as f64, seed as f64, eval.best.mean]);
            scores.push(eval.best.mean);
        }
        let mean = scores.iter().sum::<f64>() / scores.len().max(1) as f64;
        println!("{preset} mean: {mean:.4}");
        summary.push(serde_json::json!({"preset": preset, "scores": scores, "mean": mean}));
    }
    plot::write_csv(&root.join("ablation.csv"), &["preset_index", "seed", "miou"], &rows)?;
    let path = root.join("ablation.json");
    std::fs::write(&path, serde_json::to_string_pretty(&summary)?).map_err(|e| Error::io(&path, e))?;
    Ok(())
}

/// Parses `argv` (program name first), runs the subcommand and returns the
/// process exit status.
pub fn dispatch<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let result = match cli.command {
        Command::GenData(a) => cmd_gen_data(a),
        Command::Train(a) => cmd_train(a),
        Command::EvalCam(a) => cmd_eval(a),
        Command::Plot(a) => cmd_plot(a),
        Command::Ablate(a) => cmd_ablate(a),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn precedence_defaults_file_set() {
        let dir = tempfile::tempdir().unwrap();
        let f = dir.path().join("c.toml");
        std::fs::write(&f, "[train]\nepochs = 8\nalpha = 0.5\n[data]\nnum_train = 10\n").unwrap();
        let c = RunConfig::resolve(None, Some(&f), &["train.alpha=0.7".into()]).unwrap();
        assert_eq!(c.train.epochs, 8);
        assert_eq!(c.train.alpha, 0.7);
        assert_eq!(c.train.beta_prime, 0.6);
        assert_eq!(c.data.num_train, 10);
        let c = RunConfig::resolve(Some("baseline"), None, &["train.assign=simple".into()]).unwrap();
        assert!(!c.train.use_uda);
        assert_eq!(c.train.assign, trainer::AssignMode::Simple);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(RunConfig::resolve(None, None, &["train.alpah=0.5".into()]).is_err());
        assert!(RunConfig::resolve(None, None, &["nosection=1".into()]).is_err());
        let dir = tempfile::tempdir().unwrap();
        let f = dir.path().join("c.toml");
        std::fs::write(&f, "[model]\nx = 1\n").unwrap();
        assert!(RunConfig::resolve(None, Some(&f), &[]).is_err());
    }
}
