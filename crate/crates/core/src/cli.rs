//! Command-line driver: one TOML config, dotted `--set` overrides, reports
//! written atomically under `--out`.

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use log::info;
use serde::{Deserialize, Serialize};

use crate::adapt::{
    ablation_combos, ablation_grid, adapt_dataset, energy_table, render_ablation, AdaptConfig, AdaptMode,
};
use crate::checkpoint::{self, write_atomic};
use crate::data::{corrupt, gen_synthetic, load_idx, to_idx, CorruptionSpec, Dataset, Split};
use crate::energy::render_table;
use crate::error::Error;
use crate::lif::TmConfig;
use crate::network::{Network, NetworkSpec};
use crate::reparam::deploy;
use crate::trainer::{train, Schedule, TrainConfig};

#[derive(Parser, Debug)]
#[command(name = "tmsnn", version, about = "Spiking network pre-training, deployment and online adaptation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// TOML run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Override a config key, e.g. `--set train.epochs=5`. Repeatable.
    #[arg(long = "set", value_name = "K=V", global = true)]
    pub overrides: Vec<String>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Report directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
}

#[derive(Subcommand, Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    /// Train an MPBN model on synthetic data.
    Pretrain,
    /// Fold MPBN into thresholds.
    Deploy,
    /// Stream the test set through a model with online adaptation.
    Adapt,
    /// Run the five TM flag combinations.
    Ablate,
    /// Per-sample energy of several modes.
    EnergyTable,
    /// Write IDX fixture files and a cached synthetic dataset.
    Fixture,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub num_classes: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub size: usize,
    pub seed: u64,
    /// Optional IDX pair replacing the synthetic test set.
    pub idx_images: Option<PathBuf>,
    pub idx_labels: Option<PathBuf>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            num_classes: 3,
            train_per_class: 500,
            test_per_class: 200,
            size: 16,
            seed: 1,
            idx_images: None,
            idx_labels: None,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsConfig {
    pub checkpoint_in: Option<PathBuf>,
    pub checkpoint_out: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblateConfig {
    /// Value used for "ρ₀ < 1".
    pub rho_lt1: f64,
}

impl Default for AblateConfig {
    fn default() -> Self {
        Self { rho_lt1: 0.9 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnergyConfig {
    pub modes: Vec<AdaptMode>,
}

impl Default for EnergyConfig {
    fn default() -> Self {
        Self {
            modes: vec![AdaptMode::Source, AdaptMode::TmNorm, AdaptMode::DirectCalibration],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub time_steps: usize,
    pub data: DataConfig,
    pub corruption: Option<CorruptionSpec>,
    pub train: TrainConfig,
    pub adapt: AdaptConfig,
    pub paths: PathsConfig,
    pub ablate: AblateConfig,
    pub energy: EnergyConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            time_steps: 4,
            data: DataConfig::default(),
            corruption: None,
            train: TrainConfig::default(),
            adapt: AdaptConfig::new(AdaptMode::TmNorm),
            paths: PathsConfig::default(),
            ablate: AblateConfig::default(),
            energy: EnergyConfig::default(),
        }
    }
}

/// Failure classes mapped to exit codes.
#[derive(Debug)]
pub enum CliError {
    /// Bad config, missing field or file: exit 1.
    Validation(String),
    /// Anything that went wrong while running: exit 2.
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Validation(m) => write!(f, "invalid configuration: {m}"),
            CliError::Runtime(m) => write!(f, "error: {m}"),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::InvalidConfig(_) | Error::InvalidSeverity(_) | Error::Mode(_) => {
                CliError::Validation(e.to_string())
            }
            other => CliError::Runtime(other.to_string()),
        }
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

fn set_dotted(root: &mut toml::Table, key: &str, raw: &str) -> CliResult<()> {
    let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(CliError::Validation(format!("bad override key `{key}`")));
    }
    let mut table = root;
    for part in &parts[..parts.len() - 1] {
        let entry = table
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| CliError::Validation(format!("override `{key}`: `{part}` is not a table")))?;
    }
    table.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

/// Reads the config file (if any), applies overrides and deserializes strictly.
pub fn load_config(path: Option<&Path>, overrides: &[String], seed: Option<u64>) -> CliResult<RunConfig> {
    let mut table = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| CliError::Validation(format!("{}: {e}", p.display())))?;
            toml::from_str::<toml::Table>(&text)
                .map_err(|e| CliError::Validation(format!("{}: {e}", p.display())))?
        }
        None => toml::Table::new(),
    };
    for o in overrides {
        let (k, v) = o
            .split_once('=')
            .ok_or_else(|| CliError::Validation(format!("override `{o}` is not K=V")))?;
        set_dotted(&mut table, k.trim(), v.trim())?;
    }
    let origin = path.map_or("<defaults>".to_string(), |p| p.display().to_string());
    let mut cfg: RunConfig = toml::Value::Table(table)
        .try_into()
        .map_err(|e: toml::de::Error| CliError::Validation(format!("{origin}: {e}")))?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn require<'a>(field: &str, value: &'a Option<PathBuf>) -> CliResult<&'a Path> {
    let p = value
        .as_deref()
        .ok_or_else(|| CliError::Validation(format!("missing required field `{field}`")))?;
    Ok(p)
}

fn require_existing<'a>(field: &str, value: &'a Option<PathBuf>) -> CliResult<&'a Path> {
    let p = require(field, value)?;
    if !p.exists() {
        return Err(CliError::Validation(format!("`{field}`: {} does not exist", p.display())));
    }
    Ok(p)
}

fn spec_for(cfg: &RunConfig) -> NetworkSpec {
    let mut spec = NetworkSpec::reference(cfg.data.num_classes, cfg.data.size);
    spec.time_steps = cfg.time_steps;
    spec
}

fn test_set(cfg: &RunConfig) -> CliResult<Dataset> {
    let clean = match (&cfg.data.idx_images, &cfg.data.idx_labels) {
        (Some(i), Some(l)) => load_idx(i, l)?,
        (None, None) => gen_synthetic(
            cfg.data.num_classes,
            cfg.data.test_per_class,
            (cfg.data.size, cfg.data.size),
            cfg.data.seed.wrapping_add(1),
        )?
        .with_split(Split::Test),
        _ => {
            return Err(CliError::Validation(
                "data.idx_images and data.idx_labels must be given together".into(),
            ))
        }
    };
    Ok(match &cfg.corruption {
        Some(spec) => corrupt(&clean, spec)?,
        None => clean,
    })
}

struct Reporter {
    dir: PathBuf,
}

impl Reporter {
    fn write(&self, name: &str, contents: &str) -> CliResult<()> {
        let path = self.dir.join(name);
        write_atomic(&path, contents.as_bytes())?;
        info!("wrote {}", path.display());
        Ok(())
    }

    fn echo(&self, command: Command, cfg: &RunConfig) -> CliResult<()> {
        let doc = serde_json::json!({
            "toolkit_version": env!("CARGO_PKG_VERSION"),
            "command": format!("{command:?}"),
            "config": cfg,
        });
        self.write("run.json", &serde_json::to_string_pretty(&doc).map_err(Error::from)?)
    }
}

fn load_model(cfg: &RunConfig) -> CliResult<Network> {
    let p = require_existing("paths.checkpoint_in", &cfg.paths.checkpoint_in)?;
    Ok(checkpoint::load(p)?)
}

fn deployed_copy(net: &Network) -> CliResult<Network> {
    if net.is_deployed() {
        Ok(net.clone())
    } else {
        Ok(deploy(net, TmConfig::default())?)
    }
}

/// Executes one command.
pub fn execute(command: Command, cfg: &RunConfig, out: &Path) -> CliResult<()> {
    let rep = Reporter { dir: out.to_path_buf() };
    match command {
        Command::Pretrain => {
            let ck = require("paths.checkpoint_out", &cfg.paths.checkpoint_out)?.to_path_buf();
            let d = &cfg.data;
            let train_set = gen_synthetic(d.num_classes, d.train_per_class, (d.size, d.size), d.seed)?;
            let val = gen_synthetic(d.num_classes, d.test_per_class, (d.size, d.size), d.seed.wrapping_add(1))?
                .with_split(Split::Val);
            let mut net = Network::new(spec_for(cfg), cfg.seed)?;
            let mut tc = cfg.train.clone();
            tc.seed = cfg.seed;
            if let Schedule::Cosine { total_steps: 0 } = tc.optimizer.schedule {
                let steps = train_set.len().div_ceil(tc.batch_size.max(1)) * tc.epochs;
                tc.optimizer.schedule = Schedule::Cosine {
                    total_steps: steps as u64,
                };
            }
            rep.echo(command, cfg)?;
            let report = train(&mut net, &train_set, &val, &tc, Some(&ck))?;
            if report.best_checkpoint.is_none() {
                checkpoint::save(&net, &ck)?;
            }
            rep.write("train_report.csv", &report.to_csv())?;
        }
        Command::Deploy => {
            let net = load_model(cfg)?;
            let ck = require("paths.checkpoint_out", &cfg.paths.checkpoint_out)?;
            let tm = TmConfig {
                e: cfg.adapt.mode == AdaptMode::TmEnt,
                ..cfg.adapt.tm
            };
            let deployed = deploy(&net, tm)?;
            rep.echo(command, cfg)?;
            checkpoint::save(&deployed, ck)?;
        }
        Command::Adapt => {
            let mut net = load_model(cfg)?;
            let ds = test_set(cfg)?;
            let mut acfg = cfg.adapt;
            acfg.seed = cfg.seed;
            acfg.tm.e = acfg.mode == AdaptMode::TmEnt;
            if matches!(acfg.mode, AdaptMode::TmNorm | AdaptMode::TmEnt) && !net.is_deployed() {
                net = deployed_copy(&net)?;
            }
            rep.echo(command, cfg)?;
            let report = adapt_dataset(&mut net, &ds, &acfg)?;
            rep.write("adapt_series.csv", &report.to_csv())?;
            rep.write("adapt_summary.json", &report.summary_json()?)?;
        }
        Command::Ablate => {
            let net = load_model(cfg)?;
            let ds = test_set(cfg)?;
            let deployed = deployed_copy(&net)?;
            let combos = ablation_combos(cfg.ablate.rho_lt1, cfg.adapt.tm.omega);
            rep.echo(command, cfg)?;
            let rows = ablation_grid(&deployed, &ds, &combos, cfg.adapt.batch_size, cfg.seed)?;
            rep.write("ablation.tsv", &render_ablation(&rows))?;
        }
        Command::EnergyTable => {
            if cfg.energy.modes.is_empty() {
                return Err(CliError::Validation("`energy.modes` is empty".into()));
            }
            let net = load_model(cfg)?;
            if net.is_deployed() {
                return Err(CliError::Validation(
                    "energy-table needs the MPBN checkpoint (before deploy)".into(),
                ));
            }
            let ds = test_set(cfg)?;
            let deployed = deployed_copy(&net)?;
            rep.echo(command, cfg)?;
            let rows = energy_table(&net, &deployed, &ds, &cfg.energy.modes, cfg.adapt.batch_size)?;
            rep.write("energy_table.tsv", &render_table(&rows))?;
        }
        Command::Fixture => {
            let d = &cfg.data;
            let ds = gen_synthetic(d.num_classes, d.test_per_class, (d.size, d.size), d.seed)?;
            rep.echo(command, cfg)?;
            rep.write("synthetic.json", &ds.to_json()?)?;
            let (img, lab) = to_idx(&idx_fixture())?;
            write_atomic(&out.join("fixture-images.idx"), &img)?;
            write_atomic(&out.join("fixture-labels.idx"), &lab)?;
        }
    }
    Ok(())
}

/// Two 3×3 single-channel images: a bright centre and a bright border.
pub fn idx_fixture() -> Dataset {
    let centre = [0., 0., 0., 0., 1., 0., 0., 0., 0.];
    let border = [1., 1., 1., 1., 0., 1., 1., 1., 1.];
    Dataset {
        image_shape: [1, 3, 3],
        pixels: centre.iter().chain(&border).copied().collect(),
        labels: vec![0, 1],
        num_classes: 2,
        split: Split::Test,
    }
}

/// Parses `args` (program name first) and runs; returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let result = load_config(cli.config.as_deref(), &cli.overrides, cli.seed).and_then(|cfg| {
        let out = cli.out.clone().unwrap_or_else(|| PathBuf::from("out"));
        execute(cli.command, &cfg, &out)
    });
    match result {
        Ok(()) => 0,
        Err(e) => {
            match &cli.config {
                Some(p) => eprintln!("{} ({})", e, p.display()),
                None => eprintln!("{e}"),
            }
            e.exit_code()
        }
    }
}
