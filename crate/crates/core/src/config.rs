//! Flat key=value run configuration with strict key checking, environment
//! seed override, and a canonical fingerprint used to tie checkpoints and
//! reports back to the exact configuration that produced them.

use crate::cmd::CmdConfig;
use crate::data::SynthSpec;
use crate::error::{Error, Result};
use crate::pipeline::{LossWeights, TrainConfig};
use sha2::{Digest, Sha256};
use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::PathBuf;

/// Environment variable that overrides the configured seed.
pub const SEED_ENV: &str = "IFMMIN_SEED";

/// The full run configuration: dataset synthesis, training, and paths.
#[derive(Clone, Debug)]
pub struct RunConfig {
    pub synth: SynthSpec,
    pub train: TrainConfig,
    pub dataset: PathBuf,
    pub checkpoints_dir: PathBuf,
    pub reports_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        let seed = 1;
        RunConfig {
            synth: SynthSpec {
                n_utterances: 2000,
                latent_dim: 16,
                class_priors: [0.25; 4],
                t_a: 20,
                t_v: 20,
                t_t: 20,
                dim_a: 130,
                dim_v: 342,
                dim_t: 1024,
                noise_scale: 1.0,
                seed,
            },
            train: TrainConfig {
                batch_size: 128,
                dropout: 0.5,
                initial_lr: 2e-4,
                epochs_per_fold: 40,
                folds: 10,
                fold_index: 0,
                cmd: CmdConfig::default(),
                m: 5,
                seed,
                weights: LossWeights::default(),
                no_inv_loss: false,
                no_cascaded_input: false,
                no_ifim: false,
                freeze_student_encoders: false,
                share_invariance_encoder: true,
                hidden: 128,
                dim_a: 130,
                dim_v: 342,
                dim_t: 1024,
            },
            dataset: PathBuf::from("data/dataset.jsonl"),
            checkpoints_dir: PathBuf::from("checkpoints"),
            reports_dir: PathBuf::from("reports"),
        }
    }
}

fn parse_usize(key: &str, v: &str) -> Result<usize> {
    v.parse()
        .map_err(|_| Error::Config(format!("{key}: expected unsigned integer, got '{v}'")))
}

fn parse_u64(key: &str, v: &str) -> Result<u64> {
    v.parse()
        .map_err(|_| Error::Config(format!("{key}: expected unsigned integer, got '{v}'")))
}

fn parse_f64(key: &str, v: &str) -> Result<f64> {
    v.parse()
        .map_err(|_| Error::Config(format!("{key}: expected number, got '{v}'")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" => Ok(true),
        "false" | "0" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected true/false, got '{v}'"))),
    }
}

impl RunConfig {
    /// Parse `key = value` lines. `#` starts a comment; blank lines are
    /// skipped; unknown keys are errors. Missing keys keep their defaults.
    pub fn parse(text: &str) -> Result<RunConfig> {
        Self::parse_with_override(text, std::env::var(SEED_ENV).ok().as_deref())
    }

    /// `parse` with the seed override passed explicitly (testable without
    /// touching process environment).
    pub fn parse_with_override(text: &str, env_seed: Option<&str>) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        let mut seen = HashSet::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::Config(format!(
                    "line {}: expected key=value, got '{}'",
                    lineno + 1,
                    line
                )));
            };
            let key = key.trim();
            let value = value.trim();
            if !seen.insert(key.to_string()) {
                return Err(Error::Config(format!("duplicate key '{key}'")));
            }
            cfg.apply(key, value)?;
        }
        cfg.finish(env_seed)
    }

    fn apply(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "n_utterances" => self.synth.n_utterances = parse_usize(key, v)?,
            "latent_dim" => self.synth.latent_dim = parse_usize(key, v)?,
            "class_priors" => {
                let parts: Vec<&str> = v.split(',').map(str::trim).collect();
                if parts.len() != 4 {
                    return Err(Error::Config(format!(
                        "class_priors: expected 4 comma-separated values, got {}",
                        parts.len()
                    )));
                }
                for (i, p) in parts.iter().enumerate() {
                    self.synth.class_priors[i] = parse_f64(key, p)?;
                }
            }
            "t_a" => self.synth.t_a = parse_usize(key, v)?,
            "t_v" => self.synth.t_v = parse_usize(key, v)?,
            "t_t" => self.synth.t_t = parse_usize(key, v)?,
            "dim_a" => {
                self.synth.dim_a = parse_usize(key, v)?;
                self.train.dim_a = self.synth.dim_a;
            }
            "dim_v" => {
                self.synth.dim_v = parse_usize(key, v)?;
                self.train.dim_v = self.synth.dim_v;
            }
            "dim_t" => {
                self.synth.dim_t = parse_usize(key, v)?;
                self.train.dim_t = self.synth.dim_t;
            }
            "noise_scale" => self.synth.noise_scale = parse_f64(key, v)?,
            "seed" => {
                let s = parse_u64(key, v)?;
                self.synth.seed = s;
                self.train.seed = s;
            }
            "batch_size" => self.train.batch_size = parse_usize(key, v)?,
            "dropout" => self.train.dropout = parse_f64(key, v)?,
            "lr" => self.train.initial_lr = parse_f64(key, v)?,
            "epochs_per_fold" => self.train.epochs_per_fold = parse_usize(key, v)?,
            "folds" => self.train.folds = parse_usize(key, v)?,
            "fold_index" => self.train.fold_index = parse_usize(key, v)?,
            "cmd_k" => self.train.cmd.k = parse_usize(key, v)?,
            "cmd_sigmoid_squash" => self.train.cmd.sigmoid_squash = parse_bool(key, v)?,
            "m" => self.train.m = parse_usize(key, v)?,
            "lambda1" => self.train.weights.lambda1 = parse_f64(key, v)?,
            "lambda2" => self.train.weights.lambda2 = parse_f64(key, v)?,
            "lambda_cmd" => self.train.weights.lambda_cmd = parse_f64(key, v)?,
            "share_invariance_encoder" => {
                self.train.share_invariance_encoder = parse_bool(key, v)?
            }
            "hidden" => self.train.hidden = parse_usize(key, v)?,
            "dataset" => self.dataset = PathBuf::from(v),
            "checkpoints_dir" => self.checkpoints_dir = PathBuf::from(v),
            "reports_dir" => self.reports_dir = PathBuf::from(v),
            _ => return Err(Error::Config(format!("unknown key '{key}'"))),
        }
        Ok(())
    }

    /// Apply the environment seed override and validate.
    fn finish(mut self, env_seed: Option<&str>) -> Result<RunConfig> {
        if let Some(v) = env_seed {
            let s = v
                .parse()
                .map_err(|_| Error::Config(format!("{SEED_ENV}: expected integer, got '{v}'")))?;
            self.synth.seed = s;
            self.train.seed = s;
        }
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        self.synth.validate()?;
        let t = &self.train;
        if t.hidden == 0 || t.m == 0 || t.batch_size == 0 {
            return Err(Error::Config(
                "hidden, m, and batch_size must be positive".into(),
            ));
        }
        if t.epochs_per_fold == 0 {
            return Err(Error::Config("epochs_per_fold must be positive".into()));
        }
        if t.folds < 2 {
            return Err(Error::Config("folds must be at least 2".into()));
        }
        if t.fold_index >= t.folds {
            return Err(Error::Config(format!(
                "fold_index {} out of range for {} folds",
                t.fold_index, t.folds
            )));
        }
        if !(0.0..1.0).contains(&t.dropout) {
            return Err(Error::Config(format!("dropout {} not in [0, 1)", t.dropout)));
        }
        if t.cmd.k < 2 {
            return Err(Error::Config("cmd_k must be at least 2".into()));
        }
        Ok(())
    }

    /// Canonical textual form: every key in a fixed order, one per line.
    /// Parsing the output reproduces the config exactly.
    pub fn canonical(&self) -> String {
        let mut s = String::new();
        let w = |s: &mut String, k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        w(&mut s, "n_utterances", self.synth.n_utterances.to_string());
        w(&mut s, "latent_dim", self.synth.latent_dim.to_string());
        w(
            &mut s,
            "class_priors",
            self.synth
                .class_priors
                .iter()
                .map(|p| format!("{p:?}"))
                .collect::<Vec<_>>()
                .join(","),
        );
        w(&mut s, "t_a", self.synth.t_a.to_string());
        w(&mut s, "t_v", self.synth.t_v.to_string());
        w(&mut s, "t_t", self.synth.t_t.to_string());
        w(&mut s, "dim_a", self.synth.dim_a.to_string());
        w(&mut s, "dim_v", self.synth.dim_v.to_string());
        w(&mut s, "dim_t", self.synth.dim_t.to_string());
        w(&mut s, "noise_scale", format!("{:?}", self.synth.noise_scale));
        w(&mut s, "seed", self.synth.seed.to_string());
        w(&mut s, "batch_size", self.train.batch_size.to_string());
        w(&mut s, "dropout", format!("{:?}", self.train.dropout));
        w(&mut s, "lr", format!("{:?}", self.train.initial_lr));
        w(
            &mut s,
            "epochs_per_fold",
            self.train.epochs_per_fold.to_string(),
        );
        w(&mut s, "folds", self.train.folds.to_string());
        w(&mut s, "fold_index", self.train.fold_index.to_string());
        w(&mut s, "cmd_k", self.train.cmd.k.to_string());
        w(
            &mut s,
            "cmd_sigmoid_squash",
            self.train.cmd.sigmoid_squash.to_string(),
        );
        w(&mut s, "m", self.train.m.to_string());
        w(&mut s, "lambda1", format!("{:?}", self.train.weights.lambda1));
        w(&mut s, "lambda2", format!("{:?}", self.train.weights.lambda2));
        w(
            &mut s,
            "lambda_cmd",
            format!("{:?}", self.train.weights.lambda_cmd),
        );
        w(
            &mut s,
            "share_invariance_encoder",
            self.train.share_invariance_encoder.to_string(),
        );
        w(&mut s, "hidden", self.train.hidden.to_string());
        w(&mut s, "dataset", self.dataset.display().to_string());
        w(
            &mut s,
            "checkpoints_dir",
            self.checkpoints_dir.display().to_string(),
        );
        w(&mut s, "reports_dir", self.reports_dir.display().to_string());
        s
    }

    /// Hex SHA-256 of the canonical form.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.canonical().as_bytes());
        let digest = h.finalize();
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}
