//! Run configuration: a small INI dialect with typed keys.
//!
//! ```text
//! # comment
//! [train]
//! lr = 5e-5
//! epochs = 500
//! ```
//!
//! Sections and keys are fixed; anything unknown, duplicated or out of
//! range is rejected with the offending line number.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::Serialize;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::dataio::SynthSpec;
use crate::flow::FlowParams;
use crate::ststnet::{Optimizer, TrainConfig};

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("line {line}: {message}")]
    Syntax { line: usize, message: String },
    #[error("[{section}] {key}: {message}")]
    Value {
        section: String,
        key: String,
        message: String,
    },
    #[error("{0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Default, Serialize)]
pub struct DataConfig {
    pub annotations: Option<PathBuf>,
    pub frames: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalConfig {
    /// Base seed for per-fold training; falls back to `[train] seed`.
    pub seed: Option<u64>,
    /// 0 = available parallelism.
    pub workers: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunConfig {
    pub data: DataConfig,
    pub synth: SynthSpec,
    pub flow: FlowParams,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub out: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            data: DataConfig::default(),
            synth: SynthSpec::default(),
            flow: FlowParams::default(),
            train: TrainConfig::default(),
            eval: EvalConfig {
                seed: None,
                workers: 0,
            },
            out: PathBuf::from("out"),
        }
    }
}

/// Raw `(line, section, key, value)` entries in file order.
pub fn parse_ini(text: &str) -> Result<Vec<(usize, String, String, String)>, ConfigError> {
    let mut out: Vec<(usize, String, String, String)> = Vec::new();
    let mut section: Option<String> = None;
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let s = raw.trim();
        if s.is_empty() || s.starts_with('#') || s.starts_with(';') {
            continue;
        }
        let syntax = |message: String| ConfigError::Syntax { line, message };
        if let Some(rest) = s.strip_prefix('[') {
            let name = rest
                .strip_suffix(']')
                .ok_or_else(|| syntax("unterminated section header".into()))?
                .trim();
            if name.is_empty() || !name.chars().all(|c| c.is_ascii_alphanumeric() || c == '_') {
                return Err(syntax(format!("bad section name `{name}`")));
            }
            section = Some(name.to_ascii_lowercase());
            continue;
        }
        let (k, v) = s
            .split_once('=')
            .ok_or_else(|| syntax("expected `key = value`".into()))?;
        let key = k.trim().to_ascii_lowercase();
        if key.is_empty() {
            return Err(syntax("empty key".into()));
        }
        let sec = section
            .clone()
            .ok_or_else(|| syntax(format!("key `{key}` outside any section")))?;
        if out.iter().any(|(_, s2, k2, _)| *s2 == sec && *k2 == key) {
            return Err(syntax(format!("duplicate key `{key}` in [{sec}]")));
        }
        out.push((line, sec, key, v.trim().to_string()));
    }
    Ok(out)
}

fn parse_value<T: FromStr>(section: &str, key: &str, value: &str) -> Result<T, ConfigError>
where
    T::Err: std::fmt::Display,
{
    value.parse::<T>().map_err(|e| ConfigError::Value {
        section: section.into(),
        key: key.into(),
        message: format!("`{value}`: {e}"),
    })
}

impl RunConfig {
    /// Parses config text. Relative paths are resolved against `base_dir`.
    pub fn parse(text: &str, base_dir: &Path) -> Result<Self, ConfigError> {
        let mut cfg = RunConfig::default();
        for (line, sec, key, value) in parse_ini(text)? {
            let (s, k, v) = (sec.as_str(), key.as_str(), value.as_str());
            let path = || base_dir.join(v);
            match (s, k) {
                ("data", "annotations") => cfg.data.annotations = Some(path()),
                ("data", "frames") => cfg.data.frames = Some(path()),
                ("synth", "seed") => cfg.synth.seed = parse_value(s, k, v)?,
                ("synth", "subjects") => cfg.synth.subjects = parse_value(s, k, v)?,
                ("synth", "clips_per_subject") => {
                    cfg.synth.clips_per_subject = parse_value(s, k, v)?
                }
                ("synth", "frames") => cfg.synth.frames = parse_value(s, k, v)?,
                ("synth", "height") => cfg.synth.height = parse_value(s, k, v)?,
                ("synth", "width") => cfg.synth.width = parse_value(s, k, v)?,
                ("flow", "lambda") => cfg.flow.lambda = parse_value(s, k, v)?,
                ("flow", "theta") => cfg.flow.theta = parse_value(s, k, v)?,
                ("flow", "tau") => cfg.flow.tau = parse_value(s, k, v)?,
                ("flow", "warps") => cfg.flow.warps = parse_value(s, k, v)?,
                ("flow", "iterations") => cfg.flow.iterations = parse_value(s, k, v)?,
                ("flow", "levels") => cfg.flow.levels = parse_value(s, k, v)?,
                ("flow", "scale") => cfg.flow.scale = parse_value(s, k, v)?,
                ("flow", "epsilon") => cfg.flow.epsilon = parse_value(s, k, v)?,
                ("train", "lr") => cfg.train.learning_rate = parse_value(s, k, v)?,
                ("train", "epochs") => cfg.train.max_epochs = parse_value(s, k, v)?,
                ("train", "batch") => cfg.train.batch_size = parse_value(s, k, v)?,
                ("train", "seed") => cfg.train.seed = parse_value(s, k, v)?,
                ("train", "optimizer") => cfg.train.optimizer = parse_value::<Optimizer>(s, k, v)?,
                ("eval", "seed") => cfg.eval.seed = Some(parse_value(s, k, v)?),
                ("eval", "workers") => cfg.eval.workers = parse_value(s, k, v)?,
                ("out", "dir") => cfg.out = path(),
                ("data" | "synth" | "flow" | "train" | "eval" | "out", _) => {
                    return Err(ConfigError::Syntax {
                        line,
                        message: format!("unknown key `{k}` in [{s}]"),
                    })
                }
                _ => {
                    return Err(ConfigError::Syntax {
                        line,
                        message: format!("unknown section [{s}]"),
                    })
                }
            }
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.synth
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.flow
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if !(self.train.learning_rate > 0.0 && self.train.learning_rate.is_finite()) {
            return Err(ConfigError::Invalid("[train] lr must be positive".into()));
        }
        self.train
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if self.data.annotations.is_some() != self.data.frames.is_some() {
            return Err(ConfigError::Invalid(
                "[data] annotations and frames must be given together".into(),
            ));
        }
        Ok(())
    }

    pub fn base_seed(&self) -> u64 {
        self.eval.seed.unwrap_or(self.train.seed)
    }

    /// Sets every seed in the run to `seed`.
    pub fn set_seed(&mut self, seed: u64) {
        self.synth.seed = seed;
        self.train.seed = seed;
        self.eval.seed = Some(seed);
    }

    /// SHA-256 over everything that can change results. Worker count and
    /// output location are left out.
    pub fn hash(&self) -> String {
        #[derive(Serialize)]
        struct Hashed<'a> {
            data: &'a DataConfig,
            synth: &'a SynthSpec,
            flow: &'a FlowParams,
            train: &'a TrainConfig,
            base_seed: u64,
        }
        let h = Hashed {
            data: &self.data,
            synth: &self.synth,
            flow: &self.flow,
            train: &self.train,
            base_seed: self.base_seed(),
        };
        let json = serde_json::to_vec(&h).expect("config serializes");
        hex::encode(Sha256::digest(&json))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str) -> Result<RunConfig, ConfigError> {
        RunConfig::parse(text, Path::new("/base"))
    }

    #[test]
    fn full_file() {
        let cfg = parse(
            "# run\n[data]\nannotations = ann.csv\nframes = /abs/frames\n\n[synth]\nsubjects = 4\nclips_per_subject=3\n\
             [flow]\nlambda = 0.2\n[train]\nlr = 1e-3\nepochs = 20\nbatch = 8\nseed = 5\noptimizer = sgd\n\
             [eval]\nworkers = 2\n[out]\ndir = results\n",
        )
        .unwrap();
        assert_eq!(
            cfg.data.annotations.as_deref(),
            Some(Path::new("/base/ann.csv"))
        );
        assert_eq!(cfg.data.frames.as_deref(), Some(Path::new("/abs/frames")));
        assert_eq!(cfg.synth.subjects, 4);
        assert_eq!(cfg.synth.clips_per_subject, 3);
        assert_eq!(cfg.flow.lambda, 0.2);
        assert_eq!(cfg.train.optimizer, Optimizer::Sgd);
        assert_eq!(cfg.base_seed(), 5);
        assert_eq!(cfg.out, PathBuf::from("/base/results"));
        cfg.validate().unwrap();
    }

    #[test]
    fn empty_file_is_defaults() {
        let cfg = parse("").unwrap();
        assert_eq!(cfg.train, TrainConfig::default());
        assert_eq!(cfg.flow, FlowParams::default());
        cfg.validate().unwrap();
    }

    #[test]
    fn rejections() {
        assert!(matches!(
            parse("[train]\nlearning = 1"),
            Err(ConfigError::Syntax { line: 2, .. })
        ));
        assert!(matches!(
            parse("[extra]\na = 1"),
            Err(ConfigError::Syntax { .. })
        ));
        assert!(matches!(
            parse("lr = 1"),
            Err(ConfigError::Syntax { line: 1, .. })
        ));
        assert!(matches!(
            parse("[train]\nlr = 1\nlr = 2"),
            Err(ConfigError::Syntax { line: 3, .. })
        ));
        assert!(matches!(
            parse("[train]\nepochs = -3"),
            Err(ConfigError::Value { .. })
        ));
        assert!(matches!(parse("[train\n"), Err(ConfigError::Syntax { .. })));
        assert!(matches!(
            parse("[train]\nnovalue\n"),
            Err(ConfigError::Syntax { .. })
        ));
        assert!(parse("[synth]\nsubjects = 0").unwrap().validate().is_err());
        assert!(parse("[train]\nlr = 0").unwrap().validate().is_err());
        assert!(parse("[flow]\ntau = 0.5").unwrap().validate().is_err());
        assert!(parse("[data]\nframes = f").unwrap().validate().is_err());
    }

    #[test]
    fn hash_ignores_workers_and_out() {
        let a = parse("[eval]\nworkers = 1\n[out]\ndir = a").unwrap();
        let b = parse("[eval]\nworkers = 8\n[out]\ndir = b").unwrap();
        let c = parse("[train]\nepochs = 3").unwrap();
        assert_eq!(a.hash(), b.hash());
        assert_ne!(a.hash(), c.hash());
        assert_eq!(a.hash().len(), 64);
    }
}
