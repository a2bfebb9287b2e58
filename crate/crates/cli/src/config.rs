//! Flat `key = value` run configuration.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::PathBuf;

use pottsmg::dataio::{Precision, ShapeKind};
use pottsmg::mesh::Pool;
use pottsmg::net::{C1Mode, NetConfig, Variant};
use pottsmg::train::{NoiseSetting, Optimizer, TrainConfig};

use crate::CliError;

/// A recognised key with its default value and a one-line description.
pub struct KeySpec {
    pub key: &'static str,
    pub default: &'static str,
    pub help: &'static str,
}

const fn key(key: &'static str, default: &'static str, help: &'static str) -> KeySpec {
    KeySpec { key, default, help }
}

/// Every accepted key. Network defaults describe the full-size configuration.
pub const KEYS: &[KeySpec] = &[
    key("net.J", "5", "number of grid levels (full-size default)"),
    key("net.L", "3,3,3,5,5", "substeps per level, one entry per level (full-size default)"),
    key("net.c", "32,32,64,128,256", "channels per level, one entry per level (full-size default)"),
    key("net.N", "4", "number of V-cycle time steps (full-size default)"),
    key("net.dt", "0.5", "time step (full-size default)"),
    key("net.epsilon", "2", "activation smoothing epsilon (full-size default)"),
    key("net.eta", "80", "closing-step perimeter weight (full-size default)"),
    key("net.sigma", "0.5", "closing-step Gaussian width (full-size default)"),
    key("net.gaussian_radius", "2", "closing-step Gaussian kernel radius"),
    key("net.variant", "pottsmg", "pottsmg, unetskip or segnet"),
    key("net.act_iters", "2", "fixed-point iterations per activation"),
    key("net.batchnorm", "true", "batch normalization before non-final activations"),
    key("net.pool", "max", "left-branch pooling: max or average"),
    key("net.c1", "one", "activation C1: one or kappa"),
    key("net.tie_weights", "false", "share kernels across time steps"),
    key("net.bn_momentum", "0.1", "running-statistics momentum"),
    key("train.schedule", "0,0.3,0.5", "noise SD of each training stage"),
    key("train.epochs", "50", "epochs per stage"),
    key("train.lr", "0.001", "learning rate"),
    key("train.batch", "16", "mini-batch size"),
    key("train.optimizer", "adam", "adam or sgd"),
    key("train.setting", "1", "noise model: 1 per-pixel uniform SD, 2 constant SD"),
    key("train.seed", "0", "seed for initialization, shuffling and noise"),
    key("data.dir", "data", "dataset directory (images/, masks/); gen-data writes it, train reads it"),
    key("data.test_dir", "", "dataset read by eval; empty means data.dir"),
    key("data.input", "", "infer input: an image file or a directory of them; empty means data.dir/images"),
    key("data.out", "out", "directory for CSVs and inferred maps"),
    key("data.checkpoint", "out/model.pmg", "checkpoint written by train, read by infer and eval"),
    key("data.precision", "64", "checkpoint float width: 32 or 64"),
    key("data.size", "32", "side length of generated images"),
    key("data.count", "200", "number of generated samples"),
    key("data.shapes", "mixed", "generated shapes: disk, rectangle or mixed"),
    key("data.seed", "0", "generator seed"),
    key("eval.sds", "0,0.1,0.2,0.3,0.4,0.5,0.6,0.8,1", "noise SDs of the eval sweep"),
    key("eval.seed", "0", "seed for eval noise"),
    key("convergence.seeds", "0,1,2,3,4", "random instance seeds"),
    key("convergence.dts", "0.1,0.05,0.025,0.0125", "time steps, decreasing"),
    key("check.samples", "60", "parameters probed by grad-check"),
    key("check.step", "1e-5", "finite-difference step"),
    key("check.batch", "2", "generated samples in the grad-check batch"),
    key("check.tolerance", "1e-5", "largest accepted relative error"),
];

/// Text block listing every key and its default.
pub fn keys_help() -> String {
    let width = KEYS.iter().map(|k| k.key.len() + k.default.len() + 3).max().unwrap_or(0);
    let mut s = String::from("Config keys (`key = value` in --config, or `--key value` after the command):\n");
    for k in KEYS {
        let lhs = format!("{} = {}", k.key, k.default);
        let _ = writeln!(s, "  {lhs:width$}  {}", k.help);
    }
    s
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Origin {
    Default,
    Line(usize),
    Flag,
}

/// Data, evaluation and diagnostic settings outside the network and trainer.
#[derive(Debug, Clone, PartialEq)]
pub struct DataSettings {
    pub dir: PathBuf,
    pub test_dir: PathBuf,
    pub input: PathBuf,
    pub out: PathBuf,
    pub checkpoint: PathBuf,
    pub precision: Precision,
    pub size: usize,
    pub count: usize,
    pub shapes: ShapeKind,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckSettings {
    pub samples: usize,
    pub step: f64,
    pub batch: usize,
    pub tolerance: f64,
}

/// Typed, validated configuration for one command.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub net: NetConfig,
    pub train: TrainConfig,
    pub data: DataSettings,
    pub eval_sds: Vec<f64>,
    pub eval_seed: u64,
    pub convergence_seeds: Vec<u64>,
    pub convergence_dts: Vec<f64>,
    pub check: CheckSettings,
}

impl Default for RunConfig {
    fn default() -> Self {
        parse_config("", &[]).expect("defaults are valid")
    }
}

struct Values {
    map: BTreeMap<&'static str, (String, Origin)>,
}

impl Values {
    fn set(&mut self, key: &str, value: &str, origin: Origin) -> Result<(), CliError> {
        let spec = KEYS.iter().find(|k| k.key == key).ok_or_else(|| CliError::Config {
            key: key.to_string(),
            line: match origin {
                Origin::Line(n) => Some(n),
                _ => None,
            },
            msg: "unknown key".into(),
        })?;
        self.map.insert(spec.key, (value.trim().to_string(), origin));
        Ok(())
    }

    fn fail(&self, key: &'static str, msg: impl Into<String>) -> CliError {
        let line = match self.map[key].1 {
            Origin::Line(n) => Some(n),
            Origin::Default | Origin::Flag => None,
        };
        CliError::Config { key: key.to_string(), line, msg: msg.into() }
    }

    fn raw(&self, key: &'static str) -> &str {
        &self.map[key].0
    }

    fn is_set(&self, key: &'static str) -> bool {
        self.map[key].1 != Origin::Default
    }

    fn get<T: std::str::FromStr>(&self, key: &'static str) -> Result<T, CliError> {
        self.raw(key).parse().map_err(|_| self.fail(key, format!("cannot parse `{}`", self.raw(key))))
    }

    fn real(&self, key: &'static str) -> Result<f64, CliError> {
        let v: f64 = self.get(key)?;
        if !v.is_finite() {
            return Err(self.fail(key, "must be finite"));
        }
        Ok(v)
    }

    fn positive(&self, key: &'static str) -> Result<usize, CliError> {
        let v: usize = self.get(key)?;
        if v == 0 {
            return Err(self.fail(key, "must be at least 1"));
        }
        Ok(v)
    }

    fn flag(&self, key: &'static str) -> Result<bool, CliError> {
        match self.raw(key).to_ascii_lowercase().as_str() {
            "true" | "yes" | "on" | "1" => Ok(true),
            "false" | "no" | "off" | "0" => Ok(false),
            other => Err(self.fail(key, format!("expected true or false, got `{other}`"))),
        }
    }

    fn list<T: std::str::FromStr>(&self, key: &'static str) -> Result<Vec<T>, CliError> {
        let raw = self.raw(key);
        if raw.is_empty() {
            return Err(self.fail(key, "list is empty"));
        }
        raw.split(',')
            .map(|p| p.trim().parse().map_err(|_| self.fail(key, format!("cannot parse list entry `{}`", p.trim()))))
            .collect()
    }

    fn path(&self, key: &'static str, fallback: impl FnOnce() -> PathBuf) -> PathBuf {
        match self.raw(key) {
            "" => fallback(),
            p => PathBuf::from(p),
        }
    }

    fn choice<T>(&self, key: &'static str, parse: impl Fn(&str) -> Option<T>) -> Result<T, CliError> {
        parse(self.raw(key)).ok_or_else(|| self.fail(key, format!("unrecognised value `{}`", self.raw(key))))
    }
}

/// Splits `key = value` text into pairs with 1-based line numbers. `#` starts a comment.
fn parse_lines(text: &str) -> Result<Vec<(usize, String, String)>, CliError> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        let content = line.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let (k, v) = content.split_once('=').ok_or_else(|| CliError::Config {
            key: content.to_string(),
            line: Some(line_no),
            msg: "expected `key = value`".into(),
        })?;
        out.push((line_no, k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

/// Builds a config from file text (may be empty) and `(key, value)` overrides applied on top.
pub fn parse_config(text: &str, overrides: &[(String, String)]) -> Result<RunConfig, CliError> {
    let mut v = Values { map: KEYS.iter().map(|k| (k.key, (k.default.to_string(), Origin::Default))).collect() };
    for (line, key, value) in parse_lines(text)? {
        v.set(&key, &value, Origin::Line(line))?;
    }
    for (key, value) in overrides {
        v.set(key, value, Origin::Flag)?;
    }
    build(&v)
}

fn build(v: &Values) -> Result<RunConfig, CliError> {
    let levels = v.positive("net.J")?;
    let substeps: Vec<usize> = v.list("net.L")?;
    let widths: Vec<usize> = v.list("net.c")?;
    for (key, len) in [("net.L", substeps.len()), ("net.c", widths.len())] {
        if len != levels {
            let hint = if v.is_set(key) { "" } else { " (set it alongside net.J)" };
            return Err(v.fail(key, format!("has {len} entries but net.J = {levels}{hint}")));
        }
    }
    let net = NetConfig {
        levels,
        substeps,
        widths,
        steps: v.get("net.N")?,
        dt: v.real("net.dt")?,
        epsilon: v.real("net.epsilon")?,
        eta: v.real("net.eta")?,
        sigma: v.real("net.sigma")?,
        gaussian_radius: v.get("net.gaussian_radius")?,
        variant: v.choice("net.variant", Variant::parse)?,
        act_iters: v.get("net.act_iters")?,
        batchnorm: v.flag("net.batchnorm")?,
        bn_momentum: v.real("net.bn_momentum")?,
        pool: v.choice("net.pool", |s| match s {
            "max" => Some(Pool::Max),
            "average" | "avg" => Some(Pool::Average),
            _ => None,
        })?,
        c1_mode: v.choice("net.c1", |s| match s {
            "one" | "1" => Some(C1Mode::One),
            "kappa" => Some(C1Mode::Kappa),
            _ => None,
        })?,
        tie_weights: v.flag("net.tie_weights")?,
        ..NetConfig::default()
    };
    net.validate().map_err(|e| CliError::Config { key: "net.*".into(), line: None, msg: e.to_string() })?;

    let train = TrainConfig {
        schedule: v.list("train.schedule")?,
        epochs: v.positive("train.epochs")?,
        batch: v.positive("train.batch")?,
        lr: v.real("train.lr")?,
        optimizer: v.choice("train.optimizer", |s| match s {
            "adam" => Some(Optimizer::default()),
            "sgd" => Some(Optimizer::Sgd),
            _ => None,
        })?,
        setting: v.choice("train.setting", NoiseSetting::parse)?,
        seed: v.get("train.seed")?,
    };
    train.validate().map_err(|e| CliError::Config { key: "train.*".into(), line: None, msg: e.to_string() })?;

    let dir = v.path("data.dir", || PathBuf::from("data"));
    let data = DataSettings {
        test_dir: v.path("data.test_dir", || dir.clone()),
        input: v.path("data.input", || dir.join("images")),
        out: v.path("data.out", || PathBuf::from("out")),
        checkpoint: v.path("data.checkpoint", || PathBuf::from("out/model.pmg")),
        precision: v.choice("data.precision", |s| match s {
            "32" => Some(Precision::F32),
            "64" => Some(Precision::F64),
            _ => None,
        })?,
        size: v.positive("data.size")?,
        count: v.positive("data.count")?,
        shapes: v.choice("data.shapes", ShapeKind::parse)?,
        seed: v.get("data.seed")?,
        dir,
    };

    let eval_sds: Vec<f64> = v.list("eval.sds")?;
    if eval_sds.iter().any(|s| !(s.is_finite() && *s >= 0.0)) {
        return Err(v.fail("eval.sds", "noise levels must be finite and non-negative"));
    }
    let convergence_dts: Vec<f64> = v.list("convergence.dts")?;
    if convergence_dts.len() < 2 || convergence_dts.iter().any(|d| !(d.is_finite() && *d > 0.0)) {
        return Err(v.fail("convergence.dts", "need at least two positive time steps"));
    }
    let check = CheckSettings {
        samples: v.positive("check.samples")?,
        step: v.real("check.step")?,
        batch: v.positive("check.batch")?,
        tolerance: v.real("check.tolerance")?,
    };
    Ok(RunConfig {
        net,
        train,
        data,
        eval_sds,
        eval_seed: v.get("eval.seed")?,
        convergence_seeds: v.list("convergence.seeds")?,
        convergence_dts,
        check,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn err_of(text: &str) -> (String, Option<usize>) {
        match parse_config(text, &[]) {
            Err(CliError::Config { key, line, .. }) => (key, line),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn empty_file_gives_the_full_defaults() {
        let cfg = parse_config("", &[]).unwrap();
        assert_eq!(cfg.net.levels, 5);
        assert_eq!(cfg.net.substeps, vec![3, 3, 3, 5, 5]);
        assert_eq!(cfg.net.widths, vec![32, 32, 64, 128, 256]);
        assert_eq!(cfg.net.steps, 4);
        assert_eq!((cfg.net.dt, cfg.net.epsilon, cfg.net.eta, cfg.net.sigma), (0.5, 2.0, 80.0, 0.5));
        assert_eq!(cfg.net, NetConfig::default());
        assert_eq!(cfg.train, TrainConfig::default());
        assert_eq!(cfg.data.test_dir, PathBuf::from("data"));
        assert_eq!(cfg.data.input, PathBuf::from("data/images"));
    }

    #[test]
    fn values_comments_and_overrides() {
        let text = "# a run\nnet.dt = 0.25   # smaller step\n\n  train.epochs=3\n";
        let cfg = parse_config(text, &[]).unwrap();
        assert_eq!(cfg.net.dt, 0.25);
        assert_eq!(cfg.train.epochs, 3);
        let cfg = parse_config(text, &[("net.dt".into(), "0.5".into())]).unwrap();
        assert_eq!(cfg.net.dt, 0.5);
        assert_eq!(cfg.train.epochs, 3);
    }

    #[test]
    fn errors_name_the_key_and_line() {
        assert_eq!(err_of("net.dt = 0.5\nnet.bogus = 1\n"), ("net.bogus".into(), Some(2)));
        assert_eq!(err_of("\n\ntrain.lr = fast\n"), ("train.lr".into(), Some(3)));
        assert_eq!(err_of("net.J = 0"), ("net.J".into(), Some(1)));
        assert_eq!(err_of("just words"), ("just words".into(), Some(1)));
        assert_eq!(err_of("net.J = 3\nnet.c = 8,8,16"), ("net.L".into(), None));
        assert_eq!(err_of("net.batchnorm = maybe"), ("net.batchnorm".into(), Some(1)));
        let e = parse_config("", &[("net.zzz".into(), "1".into())]).unwrap_err();
        assert!(matches!(e, CliError::Config { line: None, .. }));
        assert_eq!(e.exit_code(), 1);
    }

    #[test]
    fn whole_config_validation_runs() {
        assert_eq!(err_of("net.dt = -1").0, "net.*");
        assert_eq!(err_of("train.schedule = 0.5, 0.1").0, "train.*");
    }

    #[test]
    fn small_network_config() {
        let cfg = parse_config("net.J = 3\nnet.L = 2,2,2\nnet.c = 8, 8, 16\nnet.N = 2\nnet.variant = segnet", &[]).unwrap();
        assert_eq!(cfg.net.widths, vec![8, 8, 16]);
        assert_eq!(cfg.net.variant, Variant::SegNet);
    }

    #[test]
    fn help_lists_every_key_with_its_default() {
        let help = keys_help();
        for k in KEYS {
            assert!(help.contains(&format!("{} = {}", k.key, k.default)), "{}", k.key);
        }
    }
}
