//! Command-line driver: convergence checks, synthetic data, training, inference and evaluation.
//!
//! Every command reads a [`RunConfig`] from an optional `key = value` file plus
//! `--key value` overrides and writes its results as files.

mod config;

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand};
use thiserror::Error;

use pottsmg::dataio::{self, DataError};
use pottsmg::net::{ControlParams, NetError};
use pottsmg::split::{self, SplitError};
use pottsmg::tape::{fd_check, TapeError};
use pottsmg::train::{self, TrainError};

pub use config::{keys_help, parse_config, CheckSettings, DataSettings, KeySpec, RunConfig, KEYS};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("config error: {}{key}: {msg}", line.map(|l| format!("line {l}: ")).unwrap_or_default())]
    Config { key: String, line: Option<usize>, msg: String },
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("numeric failure: {0}")]
    Numeric(String),
}

impl CliError {
    /// 1 usage or config, 2 data, 3 numeric failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) | CliError::Config { .. } => 1,
            CliError::Data(_) => 2,
            CliError::Numeric(_) => 3,
        }
    }
}

fn config_error(key: &str, msg: String) -> CliError {
    CliError::Config { key: key.into(), line: None, msg }
}

impl From<NetError> for CliError {
    fn from(e: NetError) -> Self {
        match e {
            NetError::Config(m) => config_error("net.*", m),
            NetError::Input(_) | NetError::Shape { .. } => CliError::Data(DataError::Shape(e.to_string())),
            NetError::Tape(t) => t.into(),
        }
    }
}

impl From<TapeError> for CliError {
    fn from(e: TapeError) -> Self {
        CliError::Numeric(e.to_string())
    }
}

impl From<SplitError> for CliError {
    fn from(e: SplitError) -> Self {
        CliError::Numeric(e.to_string())
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Config(m) => config_error("train.*", m),
            TrainError::Shape(m) => CliError::Data(DataError::Shape(m)),
            TrainError::Net(n) => n.into(),
            TrainError::Tape(t) => t.into(),
            d @ TrainError::Diverged { .. } => CliError::Numeric(d.to_string()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Convergence,
    GenData,
    Train,
    Infer,
    Eval,
    GradCheck,
}

#[derive(Parser, Debug)]
#[command(name = "pottsmg", version, about = "Multigrid operator-splitting segmentation networks")]
struct Cli {
    #[command(subcommand)]
    command: CliCommand,
}

#[derive(Subcommand, Debug)]
enum CliCommand {
    /// Observed convergence orders of the splitting schemes, as CSV.
    Convergence(Common),
    /// Write a synthetic dataset to data.dir.
    GenData(Common),
    /// Train on data.dir; write the checkpoint and the per-epoch metric CSV.
    Train(Common),
    /// Probability map and binary mask for each input image.
    Infer(Common),
    /// Accuracy and dice on data.test_dir over a noise-SD sweep, as CSV.
    Eval(Common),
    /// Finite-difference check of the training gradient.
    GradCheck(Common),
}

impl CliCommand {
    fn split(self) -> (Command, Common) {
        match self {
            CliCommand::Convergence(c) => (Command::Convergence, c),
            CliCommand::GenData(c) => (Command::GenData, c),
            CliCommand::Train(c) => (Command::Train, c),
            CliCommand::Infer(c) => (Command::Infer, c),
            CliCommand::Eval(c) => (Command::Eval, c),
            CliCommand::GradCheck(c) => (Command::GradCheck, c),
        }
    }
}

#[derive(Args, Debug)]
struct Common {
    /// `key = value` config file.
    #[arg(short, long, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Config overrides: `--key value` or `--key=value`.
    #[arg(trailing_var_arg = true, allow_hyphen_values = true, value_name = "--KEY VALUE")]
    overrides: Vec<String>,
}

type Overrides = Vec<(String, String)>;

/// Pairs `--key value` / `--key=value` arguments. A `-c`/`--config` among them names the config file.
fn parse_overrides(args: &[String]) -> Result<(Option<PathBuf>, Overrides), CliError> {
    let mut file = None;
    let mut out = Vec::new();
    let mut it = args.iter();
    while let Some(a) = it.next() {
        let key = match a.as_str() {
            "-c" => "config",
            _ => a.strip_prefix("--").ok_or_else(|| CliError::Usage(format!("expected `--key value`, found `{a}`")))?,
        };
        let (key, value) = match key.split_once('=') {
            Some((k, v)) => (k.to_string(), v.to_string()),
            None => {
                let v = it.next().ok_or_else(|| CliError::Usage(format!("`{a}` needs a value")))?;
                (key.to_string(), v.clone())
            }
        };
        if key == "config" {
            file = Some(PathBuf::from(value));
        } else {
            out.push((key, value));
        }
    }
    Ok((file, out))
}

/// Reads the optional config file and applies overrides.
pub fn load_config(file: Option<&Path>, overrides: &[(String, String)]) -> Result<RunConfig, CliError> {
    let text = match file {
        Some(p) => fs::read_to_string(p).map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", p.display())))?,
        None => String::new(),
    };
    parse_config(&text, overrides)
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|source| DataError::Io { path: dir.display().to_string(), source }.into())
}

fn write_file(path: &Path, text: &str) -> Result<(), CliError> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    fs::write(path, text).map_err(|source| DataError::Io { path: path.display().to_string(), source }.into())
}

/// Runs one command. Returns a short human-readable summary.
pub fn dispatch(command: Command, cfg: &RunConfig) -> Result<String, CliError> {
    match command {
        Command::Convergence => convergence(cfg),
        Command::GenData => gen_data(cfg),
        Command::Train => train_cmd(cfg),
        Command::Infer => infer(cfg),
        Command::Eval => eval(cfg),
        Command::GradCheck => grad_check(cfg),
    }
}

fn convergence(cfg: &RunConfig) -> Result<String, CliError> {
    let rows = split::convergence_table(&cfg.convergence_seeds, &cfg.convergence_dts)?;
    let path = cfg.data.out.join("convergence.csv");
    write_file(&path, &split::convergence_csv(&rows))?;
    let min = rows.iter().map(|r| r.order).fold(f64::INFINITY, f64::min);
    Ok(format!("wrote {} ({} rows, smallest observed order {min:.3})", path.display(), rows.len()))
}

fn gen_data(cfg: &RunConfig) -> Result<String, CliError> {
    let d = &cfg.data;
    let samples = dataio::gen_dataset(d.count, d.size, d.shapes, d.seed)?;
    dataio::save_dataset(&samples, &d.dir)?;
    Ok(format!("wrote {} samples of {}x{} to {}", samples.len(), d.size, d.size, d.dir.display()))
}

fn train_cmd(cfg: &RunConfig) -> Result<String, CliError> {
    let data = dataio::load_dataset(&cfg.data.dir)?;
    if data.is_empty() {
        return Err(DataError::Shape(format!("no samples in {}", cfg.data.dir.display())).into());
    }
    let theta = ControlParams::init(&cfg.net, cfg.train.seed)?;
    let out = train::train(&cfg.net, theta, &data, &cfg.train)?;
    if let Some(parent) = cfg.data.checkpoint.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    dataio::save_checkpoint(&out.theta, &cfg.net, &cfg.data.checkpoint, cfg.data.precision)?;
    let log_path = cfg.data.out.join("metrics.csv");
    write_file(&log_path, &train::log_csv(&out.log))?;
    let last = out.log.last().expect("at least one epoch");
    Ok(format!(
        "trained on {} samples; final loss {:.4}, dice {:.4}; wrote {} and {}",
        data.len(),
        last.loss,
        last.dice,
        cfg.data.checkpoint.display(),
        log_path.display()
    ))
}

fn is_image(p: &Path) -> bool {
    p.extension().is_some_and(|x| x == "ppm" || x == "pgm")
}

fn infer(cfg: &RunConfig) -> Result<String, CliError> {
    let (theta, net) = dataio::load_checkpoint(&cfg.data.checkpoint)?;
    let input = &cfg.data.input;
    let mut files = Vec::new();
    if input.is_dir() {
        let entries = fs::read_dir(input).map_err(|source| DataError::Io { path: input.display().to_string(), source })?;
        for e in entries {
            let p = e.map_err(|source| DataError::Io { path: input.display().to_string(), source })?.path();
            if is_image(&p) {
                files.push(p);
            }
        }
        files.sort();
    } else {
        files.push(input.clone());
    }
    create_dir(&cfg.data.out)?;
    for f in &files {
        let image = dataio::read_image(f)?;
        let prob = train::predict(&net, &theta, std::slice::from_ref(&image))?.remove(0);
        let mask = prob.map(|p| if p > 0.5 { 1.0 } else { 0.0 });
        let stem = f.file_stem().and_then(|s| s.to_str()).unwrap_or("image");
        dataio::write_gray(&prob, &cfg.data.out.join(format!("{stem}_prob.pgm")))?;
        dataio::write_gray(&mask, &cfg.data.out.join(format!("{stem}_mask.pgm")))?;
    }
    Ok(format!("wrote probability maps and masks for {} images to {}", files.len(), cfg.data.out.display()))
}

fn eval(cfg: &RunConfig) -> Result<String, CliError> {
    let (theta, net) = dataio::load_checkpoint(&cfg.data.checkpoint)?;
    let data = dataio::load_dataset(&cfg.data.test_dir)?;
    if data.is_empty() {
        return Err(DataError::Shape(format!("no samples in {}", cfg.data.test_dir.display())).into());
    }
    let mut csv = String::from("sd,accuracy,dice\n");
    for &sd in &cfg.eval_sds {
        let m = train::evaluate(&net, &theta, &data, sd, cfg.train.setting, cfg.eval_seed)?;
        csv.push_str(&format!("{sd},{:.6},{:.6}\n", m.accuracy, m.dice));
    }
    let path = cfg.data.out.join("eval.csv");
    write_file(&path, &csv)?;
    Ok(format!("evaluated {} samples at {} noise levels; wrote {}", data.len(), cfg.eval_sds.len(), path.display()))
}

/// Largest relative finite-difference error of the training gradient on a generated batch.
pub fn grad_check_error(cfg: &RunConfig) -> Result<f64, CliError> {
    let d = &cfg.data;
    let samples = dataio::gen_dataset(cfg.check.batch, d.size, d.shapes, d.seed)?;
    let theta = ControlParams::init(&cfg.net, cfg.train.seed)?;
    let (_, grad) = train::batch_loss(&cfg.net, &theta, &samples)?;
    let loss = |values: &[f64]| {
        let mut probe = theta.clone();
        probe.values.copy_from_slice(values);
        train::batch_loss(&cfg.net, &probe, &samples).map(|(l, _)| l).unwrap_or(f64::NAN)
    };
    let err = fd_check(loss, &grad, &theta.values, cfg.check.step, cfg.check.samples, cfg.train.seed)?;
    if err.is_nan() {
        return Err(CliError::Numeric("loss evaluation failed during the finite-difference sweep".into()));
    }
    Ok(err)
}

fn grad_check(cfg: &RunConfig) -> Result<String, CliError> {
    let err = grad_check_error(cfg)?;
    if err > cfg.check.tolerance {
        return Err(CliError::Numeric(format!("max relative error {err:.3e} exceeds {:.1e}", cfg.check.tolerance)));
    }
    Ok(format!("max relative error {err:.3e}"))
}

fn cli_command() -> clap::Command {
    let keys = keys_help();
    Cli::command().after_help(keys.clone()).mut_subcommands(|s| s.after_help(keys.clone()))
}

/// Parses `args` (including the program name), runs the command and returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let parsed = cli_command().try_get_matches_from(args).and_then(|m| Cli::from_arg_matches(&m));
    let cli = match parsed {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    let (command, common) = cli.command.split();
    let result = parse_overrides(&common.overrides)
        .and_then(|(file, o)| load_config(file.or(common.config).as_deref(), &o))
        .and_then(|cfg| dispatch(command, &cfg));
    match result {
        Ok(summary) => {
            println!("{summary}");
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

#[cfg(doctest)]
#[doc = include_str!("../../../book/src/cli.md")]
mod book_cli {}
