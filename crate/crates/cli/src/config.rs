//! Run configuration: flat `key = value` files, flags and `DFT_SEED`.
//!
//! Precedence, lowest first: built-in defaults, config file, `DFT_SEED`
//! (only when `--seed` is absent), flags.

use std::fs;
use std::path::{Path, PathBuf};

use ditune_core::finetune::{EmbeddingInit, TrainMode};

use crate::dataset::DataKind;
use crate::error::{io_err, CliError, Result};

/// Forward-process family named on the command line.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScheduleName {
    Linear,
    Cos,
    Scos,
}

impl ScheduleName {
    pub fn parse(s: &str) -> std::result::Result<Self, String> {
        match s {
            "linear" => Ok(ScheduleName::Linear),
            "cos" => Ok(ScheduleName::Cos),
            "scos" => Ok(ScheduleName::Scos),
            other => Err(format!("unknown schedule {other:?} (expected linear|cos|scos)")),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ScheduleName::Linear => "linear",
            ScheduleName::Cos => "cos",
            ScheduleName::Scos => "scos",
        }
    }
}

/// Union of every subcommand's settings. `None` means "use the subcommand's
/// own default".
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub out: Option<PathBuf>,
    pub data: Option<PathBuf>,
    pub source: Option<PathBuf>,
    pub real: Option<PathBuf>,
    pub ckpt: Option<PathBuf>,
    pub ppm_dir: Option<PathBuf>,
    pub kind: DataKind,
    pub count: usize,
    pub mode: Option<TrainMode>,
    pub steps: Option<usize>,
    pub lr: f64,
    pub batch: usize,
    pub weight_decay: f64,
    pub tau: usize,
    pub lambda: f64,
    pub schedule: Option<ScheduleName>,
    /// Absent with `scos` during fine-tuning means the progressive 6 → 2 anneal.
    pub scos_power: Option<f64>,
    pub init: EmbeddingInit,
    pub rank: usize,
    pub dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub patch: usize,
    pub timesteps: usize,
    pub n: usize,
    pub k: usize,
    pub condition: usize,
    pub threshold: f64,
    pub t_probe: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out: None,
            data: None,
            source: None,
            real: None,
            ckpt: None,
            ppm_dir: None,
            kind: DataKind::Target,
            count: 500,
            mode: None,
            steps: None,
            lr: 1e-4,
            batch: 32,
            weight_decay: 0.0,
            tau: 500,
            lambda: 1.0,
            schedule: None,
            scos_power: None,
            init: EmbeddingInit::Ssei,
            rank: 4,
            dim: 128,
            depth: 4,
            heads: 4,
            mlp_ratio: 4,
            patch: 4,
            timesteps: 1000,
            n: 16,
            k: 3,
            condition: 0,
            threshold: 0.1,
            t_probe: 200,
        }
    }
}

/// Every recognised key, in display order.
pub const KEYS: &[&str] = &[
    "seed",
    "out",
    "data",
    "source",
    "real",
    "ckpt",
    "ppm_dir",
    "kind",
    "count",
    "mode",
    "steps",
    "lr",
    "batch",
    "weight_decay",
    "tau",
    "lambda",
    "schedule",
    "scos_power",
    "init",
    "rank",
    "dim",
    "depth",
    "heads",
    "mlp_ratio",
    "patch",
    "timesteps",
    "n",
    "k",
    "condition",
    "threshold",
    "t_probe",
];

fn num<T: std::str::FromStr>(v: &str, what: &str) -> std::result::Result<T, String> {
    v.parse().map_err(|_| format!("{what}: cannot parse {v:?}"))
}

fn finite(v: &str, what: &str) -> std::result::Result<f64, String> {
    let x: f64 = num(v, what)?;
    if x.is_finite() {
        Ok(x)
    } else {
        Err(format!("{what}: {v:?} is not finite"))
    }
}

fn opt_path(p: &Option<PathBuf>) -> String {
    p.as_ref().map(|p| p.display().to_string()).unwrap_or_default()
}

impl RunConfig {
    /// Sets one key from its text form; the error names the key and value.
    pub fn set(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
        let v = value.trim();
        match key {
            "seed" => self.seed = num(v, key)?,
            "out" => self.out = Some(v.into()),
            "data" => self.data = Some(v.into()),
            "source" => self.source = Some(v.into()),
            "real" => self.real = Some(v.into()),
            "ckpt" => self.ckpt = Some(v.into()),
            "ppm_dir" => self.ppm_dir = Some(v.into()),
            "kind" => self.kind = DataKind::parse(v)?,
            "count" => self.count = num(v, key)?,
            "mode" => self.mode = Some(TrainMode::parse(v).map_err(|e| e.to_string())?),
            "steps" => self.steps = Some(num(v, key)?),
            "lr" => self.lr = finite(v, key)?,
            "batch" => self.batch = num(v, key)?,
            "weight_decay" => self.weight_decay = finite(v, key)?,
            "tau" => self.tau = num(v, key)?,
            "lambda" => self.lambda = finite(v, key)?,
            "schedule" => self.schedule = Some(ScheduleName::parse(v)?),
            "scos_power" => self.scos_power = Some(finite(v, key)?),
            "init" => self.init = EmbeddingInit::parse(v).map_err(|e| e.to_string())?,
            "rank" => self.rank = num(v, key)?,
            "dim" => self.dim = num(v, key)?,
            "depth" => self.depth = num(v, key)?,
            "heads" => self.heads = num(v, key)?,
            "mlp_ratio" => self.mlp_ratio = num(v, key)?,
            "patch" => self.patch = num(v, key)?,
            "timesteps" => self.timesteps = num(v, key)?,
            "n" => self.n = num(v, key)?,
            "k" => self.k = num(v, key)?,
            "condition" => self.condition = num(v, key)?,
            "threshold" => self.threshold = finite(v, key)?,
            "t_probe" => self.t_probe = num(v, key)?,
            other => return Err(format!("unknown key {other:?}")),
        }
        Ok(())
    }

    /// Text form of a key's current value (empty when unset).
    pub fn get(&self, key: &str) -> Option<String> {
        Some(match key {
            "seed" => self.seed.to_string(),
            "out" => opt_path(&self.out),
            "data" => opt_path(&self.data),
            "source" => opt_path(&self.source),
            "real" => opt_path(&self.real),
            "ckpt" => opt_path(&self.ckpt),
            "ppm_dir" => opt_path(&self.ppm_dir),
            "kind" => self.kind.name().into(),
            "count" => self.count.to_string(),
            "mode" => self.mode.map(|m| m.name().to_string()).unwrap_or_default(),
            "steps" => self.steps.map(|s| s.to_string()).unwrap_or_default(),
            "lr" => self.lr.to_string(),
            "batch" => self.batch.to_string(),
            "weight_decay" => self.weight_decay.to_string(),
            "tau" => self.tau.to_string(),
            "lambda" => self.lambda.to_string(),
            "schedule" => self.schedule.map(|s| s.name().to_string()).unwrap_or_default(),
            "scos_power" => self.scos_power.map(|p| p.to_string()).unwrap_or_default(),
            "init" => self.init.name().into(),
            "rank" => self.rank.to_string(),
            "dim" => self.dim.to_string(),
            "depth" => self.depth.to_string(),
            "heads" => self.heads.to_string(),
            "mlp_ratio" => self.mlp_ratio.to_string(),
            "patch" => self.patch.to_string(),
            "timesteps" => self.timesteps.to_string(),
            "n" => self.n.to_string(),
            "k" => self.k.to_string(),
            "condition" => self.condition.to_string(),
            "threshold" => self.threshold.to_string(),
            "t_probe" => self.t_probe.to_string(),
            _ => return None,
        })
    }

    /// Applies `key = value` lines; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> std::result::Result<(), String> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| format!("line {}: expected `key = value`, got {raw:?}", i + 1))?;
            self.set(k.trim(), v).map_err(|e| format!("line {}: {e}", i + 1))?;
        }
        Ok(())
    }
}

/// Defaults overlaid with the file at `path`.
pub fn load_config(path: &Path) -> Result<RunConfig> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let mut cfg = RunConfig::default();
    cfg.apply_text(&text)
        .map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
    Ok(cfg)
}
