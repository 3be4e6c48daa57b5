//! The `latt` command line: equiv, gradcheck, bench, flops, train, presets.
//!
//! Every run is described by a [`RunConfig`], a flat dotted key-value
//! document built from `--config FILE`, then positional `KEY=VALUE`
//! overrides, then the global flags (`--seed`, `--dtype`, `--out`), each
//! later source winning. Reports are pure functions of the config.

pub mod equiv;

use std::fmt::{self, Write as _};
use std::path::PathBuf;
use std::str::FromStr;

use clap::{Parser, Subcommand};

use crate::bench::{bench_variant, BenchShape};
use crate::config::KvDoc;
use crate::elsa::Variant;
use crate::error::{Error, Result};
use crate::grad::suite::{default_suite, run_suite};
use crate::grad::{FdConfig, GradReport};
use crate::model::{
    count_params_flops, evaluate, train, Architecture, Model, ModelConfig, SyntheticDataset, TrainConfig,
};
use crate::paradigm::{Application, Preset};
use crate::tensor::{DType, Scalar};
use equiv::EquivCase;

#[derive(Debug, Parser)]
#[command(
    name = "latt",
    version,
    about = "Local attention kernels: checks, benchmarks, counts and a training demo"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: CliCommand,

    /// Root seed for every random stream.
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// Element type (`f32` or `f64`).
    #[arg(long, global = true)]
    pub dtype: Option<DType>,

    /// Directory for report files.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,

    /// Key-value config file; overridden by KEY=VALUE arguments and flags.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum CliCommand {
    /// Cross-variant equivalence and paradigm degeneracy checks.
    Equiv(Settings),
    /// Finite-difference gradient checks of every op.
    Gradcheck(Settings),
    /// Time the Hadamard attention variants.
    Bench(Settings),
    /// Parameter and multiply-accumulate counts.
    Flops(Settings),
    /// Train a tiny model on the synthetic dataset.
    Train(Settings),
    /// List the named paradigm presets.
    Presets(Settings),
}

#[derive(Debug, Clone, Default, clap::Args)]
pub struct Settings {
    /// Config overrides such as `train.steps=100`.
    #[arg(value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

impl CliCommand {
    fn split(&self) -> (Command, &Settings) {
        match self {
            CliCommand::Equiv(s) => (Command::Equiv, s),
            CliCommand::Gradcheck(s) => (Command::Gradcheck, s),
            CliCommand::Bench(s) => (Command::Bench, s),
            CliCommand::Flops(s) => (Command::Flops, s),
            CliCommand::Train(s) => (Command::Train, s),
            CliCommand::Presets(s) => (Command::Presets, s),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Equiv,
    Gradcheck,
    Bench,
    Flops,
    Train,
    Presets,
}

impl Command {
    pub const ALL: [Command; 6] = [
        Command::Equiv,
        Command::Gradcheck,
        Command::Bench,
        Command::Flops,
        Command::Train,
        Command::Presets,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Command::Equiv => "equiv",
            Command::Gradcheck => "gradcheck",
            Command::Bench => "bench",
            Command::Flops => "flops",
            Command::Train => "train",
            Command::Presets => "presets",
        }
    }

    fn default_dtype(self) -> DType {
        match self {
            Command::Bench | Command::Train => DType::F32,
            _ => DType::F64,
        }
    }

    /// Keys the command reads besides `command`, `seed`, `dtype` and `out`.
    fn keys(self) -> &'static [&'static str] {
        match self {
            Command::Equiv => &["shapes", "tolerance", "degeneracy.instances", "degeneracy.tolerance"],
            Command::Gradcheck => &["tolerance", "fd.step", "fd.floor", "fd.scale_floor"],
            Command::Bench => &["shapes", "variants", "repeats"],
            Command::Flops => &["arch", "resolution", "model."],
            Command::Train => &["model.", "train.", "data.seed", "data.n", "data.noise", "eval.batch"],
            Command::Presets => &[],
        }
    }
}

impl fmt::Display for Command {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Command {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Command::ALL
            .iter()
            .copied()
            .find(|c| c.name() == s)
            .ok_or_else(|| Error::Unknown {
                kind: "command",
                name: s.into(),
            })
    }
}

/// Everything that determines a run's output.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub command: Command,
    pub seed: u64,
    pub dtype: DType,
    pub out: Option<PathBuf>,
    /// Command-specific keys.
    pub settings: KvDoc,
}

const GLOBAL_KEYS: [&str; 4] = ["command", "seed", "dtype", "out"];

impl RunConfig {
    pub fn new(command: Command) -> Self {
        RunConfig {
            command,
            seed: 0,
            dtype: command.default_dtype(),
            out: None,
            settings: KvDoc::default(),
        }
    }

    pub fn from_cli(cli: &Cli) -> Result<Self> {
        let (command, settings) = cli.command.split();
        let mut doc = match &cli.config {
            Some(path) => KvDoc::load(path)?,
            None => KvDoc::default(),
        };
        doc.apply_overrides(settings.overrides.iter().map(String::as_str))?;
        doc.set("command", command);
        if let Some(seed) = cli.seed {
            doc.set("seed", seed);
        }
        if let Some(dtype) = cli.dtype {
            doc.set("dtype", dtype.name());
        }
        if let Some(out) = &cli.out {
            doc.set("out", out.display());
        }
        Self::from_doc(&doc)
    }

    pub fn from_doc(doc: &KvDoc) -> Result<Self> {
        let command: Command = doc.require("command")?;
        let mut known: Vec<&str> = GLOBAL_KEYS.to_vec();
        known.extend_from_slice(command.keys());
        doc.reject_unknown(&known)?;
        let mut settings = KvDoc::default();
        for key in doc.keys().filter(|k| !GLOBAL_KEYS.contains(k)) {
            settings.set(key, doc.require_str(key)?);
        }
        Ok(RunConfig {
            command,
            seed: doc.get_or("seed", 0)?,
            dtype: doc.get_or("dtype", command.default_dtype())?,
            out: doc.get_str("out").map(PathBuf::from),
            settings,
        })
    }

    pub fn to_doc(&self) -> KvDoc {
        let mut doc = self.settings.clone();
        doc.set("command", self.command);
        doc.set("seed", self.seed);
        doc.set("dtype", self.dtype.name());
        if let Some(out) = &self.out {
            doc.set("out", out.display());
        }
        doc
    }

    fn get_or<T: FromStr>(&self, key: &str, default: T) -> Result<T> {
        self.settings.get_or(key, default)
    }
}

/// The result of a run: named report files plus a human summary.
#[derive(Debug, Clone, PartialEq)]
pub struct Outcome {
    /// `(file name, content)`; CSV with LF line endings.
    pub files: Vec<(String, String)>,
    pub summary: String,
    /// `true` iff every check of the command passed.
    pub passed: bool,
}

pub fn execute(cfg: &RunConfig) -> Result<Outcome> {
    match cfg.command {
        Command::Equiv => cmd_equiv(cfg),
        Command::Gradcheck => cmd_gradcheck(cfg),
        Command::Bench => cmd_bench(cfg),
        Command::Flops => cmd_flops(cfg),
        Command::Train => match cfg.dtype {
            DType::F32 => cmd_train::<f32>(cfg),
            DType::F64 => cmd_train::<f64>(cfg),
        },
        Command::Presets => cmd_presets(),
    }
}

/// Run, write reports under `out` (when set) and print them.
pub fn run(cli: &Cli) -> Result<bool> {
    let cfg = RunConfig::from_cli(cli)?;
    let outcome = execute(&cfg)?;
    if let Some(dir) = &cfg.out {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join(format!("{}.kv", cfg.command)), cfg.to_doc().to_string())?;
        for (name, content) in &outcome.files {
            std::fs::write(dir.join(name), content)?;
        }
    }
    for (_, content) in &outcome.files {
        print!("{content}");
    }
    eprint!("{}", outcome.summary);
    Ok(outcome.passed)
}

fn parse_shapes(cfg: &RunConfig, default: Vec<EquivCase>) -> Result<Vec<EquivCase>> {
    let Some(list) = cfg.settings.get_str("shapes") else {
        return Ok(default);
    };
    let shapes: Vec<EquivCase> = list
        .split(';')
        .filter(|s| !s.trim().is_empty())
        .map(|s| EquivCase::parse(s).ok_or_else(|| cfg.settings.bad_value("shapes", s)))
        .collect::<Result<_>>()?;
    if shapes.is_empty() {
        return Err(cfg.settings.bad_value("shapes", list));
    }
    Ok(shapes)
}

fn cmd_equiv(cfg: &RunConfig) -> Result<Outcome> {
    let cases = parse_shapes(cfg, equiv::default_cases())?;
    let (tol, degen_tol): (f64, f64) = match cfg.dtype {
        DType::F32 => (1e-5, 1e-6),
        DType::F64 => (1e-10, 1e-10),
    };
    let tol: f64 = cfg.get_or("tolerance", tol)?;
    // a stricter variant tolerance also tightens the degeneracy default
    let degen_tol: f64 = cfg.get_or("degeneracy.tolerance", degen_tol.min(tol))?;
    let instances: usize = cfg.get_or("degeneracy.instances", 10)?;
    let mut rows = match cfg.dtype {
        DType::F32 => equiv::variant_rows::<f32>(&cases, cfg.seed, tol)?,
        DType::F64 => equiv::variant_rows::<f64>(&cases, cfg.seed, tol)?,
    };
    rows.extend(match cfg.dtype {
        DType::F32 => equiv::degeneracy_rows::<f32>(cfg.seed, instances, degen_tol)?,
        DType::F64 => equiv::degeneracy_rows::<f64>(cfg.seed, instances, degen_tol)?,
    });
    let failed = rows.iter().filter(|r| r.status == equiv::Status::Fail).count();
    let summary = format!("equiv: {} rows, {failed} failed\n", rows.len());
    Ok(Outcome {
        files: vec![("equiv.csv".into(), equiv::to_csv(&rows))],
        summary,
        passed: equiv::all_pass(&rows),
    })
}

fn cmd_gradcheck(cfg: &RunConfig) -> Result<Outcome> {
    let (mut fd, tol, mixed) = match cfg.dtype {
        DType::F64 => (FdConfig::default(), 1e-6, false),
        DType::F32 => (FdConfig::mixed(), 1e-4, true),
    };
    fd.step = cfg.get_or("fd.step", fd.step)?;
    fd.floor = cfg.get_or("fd.floor", fd.floor)?;
    fd.scale_floor = cfg.get_or("fd.scale_floor", fd.scale_floor)?;
    let tol: f64 = cfg.get_or("tolerance", tol)?;
    let report: GradReport = run_suite(&default_suite(cfg.seed), fd, mixed)?;
    let passed = report.passes(tol);
    let summary = format!(
        "gradcheck: {} parameters, max rel err {:.3e} (tolerance {tol:.1e}), {} elements skipped near zero\n",
        report.rows.len(),
        report.max_rel_err(),
        report.skipped()
    );
    Ok(Outcome {
        files: vec![("gradcheck.csv".into(), report.to_csv())],
        summary,
        passed,
    })
}

fn cmd_bench(cfg: &RunConfig) -> Result<Outcome> {
    let default = [3, 5, 7]
        .iter()
        .map(|&kernel| EquivCase {
            dims: [1, 32, 28, 28],
            kernel,
            heads: 4,
        })
        .collect();
    let shapes = parse_shapes(cfg, default)?;
    let variants: Vec<Variant> = match cfg.settings.get_str("variants") {
        None => Variant::ALL.to_vec(),
        Some(list) => list.split(',').map(|v| v.trim().parse()).collect::<Result<_>>()?,
    };
    let repeats: usize = cfg.get_or("repeats", 5)?;
    let mut csv = String::from(crate::bench::CSV_HEADER);
    csv.push('\n');
    for case in &shapes {
        let shape = BenchShape {
            dims: case.dims,
            kernel: case.kernel,
            heads: case.heads,
        };
        for &v in &variants {
            let row = match cfg.dtype {
                DType::F32 => bench_variant::<f32>(v, &shape, repeats, cfg.seed)?,
                DType::F64 => bench_variant::<f64>(v, &shape, repeats, cfg.seed)?,
            };
            csv.push_str(&row.csv());
            csv.push('\n');
        }
    }
    Ok(Outcome {
        files: vec![("bench.csv".into(), csv)],
        summary: format!("bench: {} shapes x {} variants\n", shapes.len(), variants.len()),
        passed: true,
    })
}

fn cmd_flops(cfg: &RunConfig) -> Result<Outcome> {
    let resolution: usize = cfg.get_or("resolution", 224)?;
    let custom = cfg.settings.keys().any(|k| k.starts_with("model."));
    let mut models: Vec<(String, ModelConfig)> = Vec::new();
    if custom {
        models.push(("model".into(), ModelConfig::read_kv(&cfg.settings, "model.")?));
    }
    match cfg.settings.get_str("arch") {
        Some(list) => {
            for a in list.split(',') {
                let arch: Architecture = a.trim().parse()?;
                models.push((arch.name().into(), arch.config()));
            }
        }
        None if !custom => models.extend(Architecture::ALL.iter().map(|a| (a.name().to_string(), a.config()))),
        None => {}
    }
    let mut csv = String::from("model,resolution,params,flops\n");
    let mut summary = String::new();
    for (name, mc) in &models {
        let c = count_params_flops(mc, resolution)?;
        let _ = writeln!(csv, "{name},{resolution},{},{}", c.params, c.flops);
        let _ = writeln!(
            summary,
            "{name}: {:.2}M params, {:.2}G FLOPs (multiply-accumulates) at {resolution}x{resolution}",
            c.params as f64 / 1e6,
            c.flops as f64 / 1e9
        );
    }
    Ok(Outcome {
        files: vec![("flops.csv".into(), csv)],
        summary,
        passed: true,
    })
}

fn cmd_train<T: Scalar>(cfg: &RunConfig) -> Result<Outcome> {
    let model_cfg = ModelConfig::read_kv(&cfg.settings, "model.")?;
    let train_cfg = TrainConfig::read_kv(&cfg.settings, "train.", cfg.seed)?;
    let data = SyntheticDataset::new(
        cfg.get_or("data.seed", 7)?,
        cfg.get_or("data.n", 2048)?,
        cfg.get_or("data.noise", SyntheticDataset::DEFAULT_NOISE)?,
    )?;
    let mut model = Model::<T>::build(model_cfg, cfg.seed)?;
    let log = train(&mut model, &data, &train_cfg)?;
    let acc = match log.diverged {
        Some(_) => f64::NAN,
        None => evaluate(&model, &data, cfg.get_or("eval.batch", 256)?)?,
    };
    let final_loss = log.rows.last().map_or(f64::NAN, |r| r.loss);
    let mixer = model.config.stages[0].mixer;
    let mut summary_csv = String::from("mixer,params,steps_run,final_loss,train_acc,diverged_at\n");
    let diverged = log.diverged.map_or(String::new(), |(s, _)| s.to_string());
    let _ = writeln!(
        summary_csv,
        "{mixer},{},{},{final_loss:.6},{acc:.4},{diverged}",
        model.param_count(),
        log.rows.len()
    );
    let summary = match log.diverged {
        Some((step, v)) => format!("train: {mixer} diverged at step {step} (loss {v})\n"),
        None => format!("train: {mixer}, {} steps, train accuracy {acc:.4}\n", log.rows.len()),
    };
    Ok(Outcome {
        files: vec![
            ("train.csv".into(), log.to_csv()),
            ("train_summary.csv".into(), summary_csv),
        ],
        summary,
        passed: true,
    })
}

fn cmd_presets() -> Result<Outcome> {
    let mut csv = String::from("preset,q_k,q_rk,rq_k,rb,norm,application\n");
    for p in Preset::ALL {
        let (a, b, c, d) = p.terms();
        let app = match p.config(4, 2, 3)?.application {
            Application::Window(_) => "window",
            Application::Neighboring(_) => "neighboring",
        };
        let _ = writeln!(
            csv,
            "{p},{},{},{},{},{},{app}",
            a as u8,
            b as u8,
            c as u8,
            d as u8,
            p.norm().name()
        );
    }
    Ok(Outcome {
        files: vec![("presets.csv".into(), csv)],
        summary: format!("presets: {}\n", Preset::ALL.len()),
        passed: true,
    })
}
