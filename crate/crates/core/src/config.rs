//! Flat `key = value` run configuration. `#` starts a comment; relative
//! paths are resolved against the config file's directory.
//!
//! | key | default |
//! |-----|---------|
//! | `arch` | required, e.g. `GSel-4-2, GFC, ReLU, BNorm, Concat, FC-2` |
//! | `train_data` | required CSV path |
//! | `test_data`, `val_data` | optional CSV paths |
//! | `label_column` | `last` (or a 0-based index or header name) |
//! | `has_header` | `true` |
//! | `val_fraction` | `0.1` (held out of the training file when no `val_data`) |
//! | `normalize` | `true` |
//! | `output_dir` | `$GMLP_OUTPUT_DIR`, else `runs` |
//! | `lambda`, `alpha`, `lr`, `plateau_patience`, `plateau_factor` | `1`, `1e-4`, `1e-3`, `10`, `5` |
//! | `tau_start`, `tau_end`, `epochs`, `batch_size`, `seed` | `1`, `0.01`, `100`, `64`, `0` |
//! | `anneal_entropy`, `anneal_temperature` | `true` |
//! | `pool_kind`, `branching` | `max`, `2` |
//! | `bn_momentum`, `bn_epsilon` | `0.1`, `1e-5` |
//! | `log_wall_time` | `false` |

use std::fs;
use std::path::{Path, PathBuf};

use crate::data::LabelColumn;
use crate::error::{GmlpError, Result};
use crate::layers::{BatchNormState, PoolKind};
use crate::model::ArchSpec;
use crate::optim::TrainConfig;

pub const OUTPUT_DIR_ENV: &str = "GMLP_OUTPUT_DIR";

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub arch: String,
    pub train_data: Option<PathBuf>,
    pub test_data: Option<PathBuf>,
    pub val_data: Option<PathBuf>,
    pub label_column: LabelColumn,
    pub has_header: bool,
    pub val_fraction: f64,
    pub normalize: bool,
    pub output_dir: PathBuf,
    pub train: TrainConfig,
    pub pool_kind: PoolKind,
    pub branching: Option<usize>,
    pub bn_momentum: f64,
    pub bn_epsilon: f64,
    /// Record elapsed seconds in the metrics file. Off by default so that
    /// repeated runs produce identical files.
    pub log_wall_time: bool,
    base_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            arch: String::new(),
            train_data: None,
            test_data: None,
            val_data: None,
            label_column: LabelColumn::Last,
            has_header: true,
            val_fraction: 0.1,
            normalize: true,
            output_dir: std::env::var_os(OUTPUT_DIR_ENV).map_or_else(|| PathBuf::from("runs"), PathBuf::from),
            train: TrainConfig::default(),
            pool_kind: PoolKind::Max,
            branching: None,
            bn_momentum: BatchNormState::DEFAULT_MOMENTUM,
            bn_epsilon: BatchNormState::DEFAULT_EPSILON,
            log_wall_time: false,
            base_dir: PathBuf::from("."),
        }
    }
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v.to_ascii_lowercase().as_str() {
        "true" | "yes" | "1" | "on" => Ok(true),
        "false" | "no" | "0" | "off" => Ok(false),
        _ => Err(GmlpError::Config(format!("{key}: expected true or false, got `{v}`"))),
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| GmlpError::Config(format!("{key}: cannot parse `{v}`")))
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| GmlpError::io(path, e))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::parse(&text, &base)
    }

    pub fn parse(text: &str, base_dir: &Path) -> Result<Self> {
        let mut cfg = Self {
            base_dir: base_dir.to_path_buf(),
            ..Self::default()
        };
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| GmlpError::Config(format!("line {}: expected key = value", i + 1)))?;
            cfg.set(key.trim(), value.trim())
                .map_err(|e| GmlpError::Config(format!("line {}: {e}", i + 1)))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn path(&self, v: &str) -> PathBuf {
        let p = PathBuf::from(v);
        if p.is_absolute() {
            p
        } else {
            self.base_dir.join(p)
        }
    }

    /// Applies one setting; also used for command-line overrides.
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let t = &mut self.train;
        match key {
            "arch" => self.arch = v.to_string(),
            "train_data" => self.train_data = Some(self.path(v)),
            "test_data" => self.test_data = Some(self.path(v)),
            "val_data" => self.val_data = Some(self.path(v)),
            "label_column" => self.label_column = v.parse()?,
            "has_header" => self.has_header = parse_bool(key, v)?,
            "val_fraction" => self.val_fraction = parse_num(key, v)?,
            "normalize" => self.normalize = parse_bool(key, v)?,
            "output_dir" => self.output_dir = self.path(v),
            "lambda" => t.lambda = parse_num(key, v)?,
            "alpha" => t.alpha = parse_num(key, v)?,
            "lr" => t.lr0 = parse_num(key, v)?,
            "plateau_patience" => t.plateau_patience = parse_num(key, v)?,
            "plateau_factor" => t.plateau_factor = parse_num(key, v)?,
            "tau_start" => t.tau_start = parse_num(key, v)?,
            "tau_end" => t.tau_end = parse_num(key, v)?,
            "epochs" => t.epochs = parse_num(key, v)?,
            "batch_size" => t.batch_size = parse_num(key, v)?,
            "seed" => t.seed = parse_num(key, v)?,
            "anneal_entropy" => t.anneal_entropy = parse_bool(key, v)?,
            "anneal_temperature" => t.anneal_temperature = parse_bool(key, v)?,
            "pool_kind" => self.pool_kind = v.parse()?,
            "branching" => self.branching = Some(parse_num(key, v)?),
            "bn_momentum" => self.bn_momentum = parse_num(key, v)?,
            "bn_epsilon" => self.bn_epsilon = parse_num(key, v)?,
            "log_wall_time" => self.log_wall_time = parse_bool(key, v)?,
            _ => return Err(GmlpError::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.arch.trim().is_empty() {
            return Err(GmlpError::Config("missing required key `arch`".into()));
        }
        if self.train_data.is_none() {
            return Err(GmlpError::Config("missing required key `train_data`".into()));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(GmlpError::Config(format!("val_fraction must be in [0, 1), got {}", self.val_fraction)));
        }
        self.train.validate()?;
        self.arch_spec(1)?;
        Ok(())
    }

    /// The architecture for `d` input features, with pool kind, branching
    /// and seed applied.
    pub fn arch_spec(&self, d: usize) -> Result<ArchSpec> {
        let mut spec = ArchSpec::parse(&self.arch, d)?
            .with_pool_kind(self.pool_kind)
            .with_seed(self.train.seed);
        if let Some(b) = self.branching {
            spec = spec.with_branching(b)?;
        }
        Ok(spec)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const BASIC: &str = "
        # synthetic run
        arch = GSel-4-2, GFC, ReLU, BNorm, Concat, FC-2
        train_data = data/train.csv
        test_data = /abs/test.csv
        epochs = 5   # short
        lr = 0.01
        anneal_entropy = false
        pool_kind = mean
    ";

    #[test]
    fn parses_keys_and_resolves_paths() {
        let cfg = RunConfig::parse(BASIC, Path::new("/cfg")).unwrap();
        assert_eq!(cfg.train_data.as_deref(), Some(Path::new("/cfg/data/train.csv")));
        assert_eq!(cfg.test_data.as_deref(), Some(Path::new("/abs/test.csv")));
        assert_eq!(cfg.train.epochs, 5);
        assert_eq!(cfg.train.lr0, 0.01);
        assert!(!cfg.train.anneal_entropy);
        assert_eq!(cfg.pool_kind, PoolKind::Mean);
        assert_eq!(cfg.arch_spec(6).unwrap().k, 4);
    }

    #[test]
    fn rejects_unknown_keys_and_bad_values() {
        let err = RunConfig::parse(&format!("{BASIC}\nlearning_rate = 1"), Path::new(".")).unwrap_err();
        assert!(err.to_string().contains("learning_rate"));
        assert!(RunConfig::parse(&format!("{BASIC}\nepochs = many"), Path::new(".")).is_err());
        assert!(RunConfig::parse(&format!("{BASIC}\nbatch_size = 1"), Path::new(".")).is_err());
        assert!(RunConfig::parse("train_data = x.csv", Path::new(".")).is_err());
        assert!(RunConfig::parse("arch = GSel-4-2, Nope, FC-2\ntrain_data = x", Path::new(".")).is_err());
    }

    #[test]
    fn missing_equals_sign_names_the_line() {
        let err = RunConfig::parse("arch\n", Path::new(".")).unwrap_err();
        assert!(err.to_string().contains("line 1"));
    }
}
