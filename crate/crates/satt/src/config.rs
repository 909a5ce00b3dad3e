//! Flat `key = value` configuration files.
//!
//! Blank lines and `#` comments are ignored. Unknown keys are errors so a
//! typo never silently falls back to a default.

use std::fmt::Display;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use satt_core::kernels::{KernelApply, KernelMode, KernelSpec};
use satt_core::model::{ModelConfig, Pooling, Task};
use satt_core::optim::OptimizerKind;
use satt_core::synth::SynthConfig;
use satt_core::train::TrainConfig;

use crate::error::CliError;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Entry {
    pub key: String,
    pub value: String,
    pub line: usize,
}

pub fn parse_kv(text: &str) -> Result<Vec<Entry>, CliError> {
    let mut out: Vec<Entry> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(CliError::Config(format!("line {}: expected `key = value`", i + 1)));
        };
        let key = k.trim().to_string();
        if key.is_empty() {
            return Err(CliError::Config(format!("line {}: empty key", i + 1)));
        }
        if let Some(prev) = out.iter().find(|e| e.key == key) {
            return Err(CliError::Config(format!(
                "line {}: `{key}` already set on line {}",
                i + 1,
                prev.line
            )));
        }
        out.push(Entry {
            key,
            value: v.trim().to_string(),
            line: i + 1,
        });
    }
    Ok(out)
}

fn parse<T: FromStr>(e: &Entry) -> Result<T, CliError>
where
    T::Err: Display,
{
    e.value
        .parse()
        .map_err(|err| CliError::Config(format!("line {}: invalid value for `{}`: {err}", e.line, e.key)))
}

fn parse_bool(e: &Entry) -> Result<bool, CliError> {
    match e.value.as_str() {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(CliError::Config(format!(
            "line {}: `{}` expects true or false",
            e.line, e.key
        ))),
    }
}

fn parse_list<T: FromStr>(e: &Entry) -> Result<Vec<T>, CliError>
where
    T::Err: Display,
{
    e.value
        .split(',')
        .map(|s| {
            s.trim()
                .parse()
                .map_err(|err| CliError::Config(format!("line {}: invalid item in `{}`: {err}", e.line, e.key)))
        })
        .collect()
}

fn unknown(e: &Entry) -> CliError {
    CliError::Config(format!("line {}: unknown key `{}`", e.line, e.key))
}

pub fn parse_task(s: &str) -> Result<Task, String> {
    match s {
        "classify" => Ok(Task::Classify),
        "masked" => Ok(Task::Masked),
        _ => Err(format!("unknown task `{s}` (expected classify or masked)")),
    }
}

pub fn parse_pooling(s: &str) -> Result<Pooling, String> {
    match s {
        "mean" => Ok(Pooling::Mean),
        "max" => Ok(Pooling::Max),
        _ => Err(format!("unknown pooling `{s}` (expected mean or max)")),
    }
}

pub fn parse_optimizer(s: &str) -> Result<OptimizerKind, String> {
    match s {
        "adam" => Ok(OptimizerKind::Adam),
        "sgd" => Ok(OptimizerKind::Sgd),
        _ => Err(format!("unknown optimizer `{s}` (expected adam or sgd)")),
    }
}

fn with<T>(e: &Entry, f: fn(&str) -> Result<T, String>) -> Result<T, CliError> {
    f(&e.value).map_err(|m| CliError::Config(format!("line {}: {m}", e.line)))
}

/// Everything a training, evaluation, sweep or benchmark run needs besides
/// the data. `model.channels` is filled in from the data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub split_seed: u64,
    pub fraction: f64,
    pub fractions: Vec<f64>,
    pub bench_iters: usize,
    pub bench_warmup: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::classifier(0, 48),
            train: TrainConfig::default(),
            split_seed: 0,
            fraction: 1.0,
            fractions: vec![0.01, 0.1, 0.5, 1.0],
            bench_iters: 100,
            bench_warmup: 5,
        }
    }
}

impl RunConfig {
    pub fn from_text(text: &str) -> Result<Self, CliError> {
        let entries = parse_kv(text)?;
        let task = entries.iter().find(|e| e.key == "task").map(|e| with(e, parse_task)).transpose()?;
        let mut cfg = Self::default();
        if task == Some(Task::Masked) {
            cfg.model = ModelConfig::probe(0, 48);
            cfg.train = TrainConfig::probe();
        }
        for e in &entries {
            cfg.set(e)?;
        }
        Ok(cfg)
    }

    pub fn set(&mut self, e: &Entry) -> Result<(), CliError> {
        let m = &mut self.model;
        let t = &mut self.train;
        match e.key.as_str() {
            "task" => m.task = with(e, parse_task)?,
            "window" => m.window = parse(e)?,
            "layers" => m.layers = parse(e)?,
            "heads" => m.heads = parse(e)?,
            "dk" => m.d_k = parse(e)?,
            "d_ff" => m.d_ff = parse(e)?,
            "kernel" => m.kernel.mode = parse::<KernelMode>(e)?,
            "kernel_apply" => m.kernel.apply = parse::<KernelApply>(e)?,
            "adaptive" => m.kernel.adaptive = parse_bool(e)?,
            "positional_encoding" => m.positional_encoding = parse_bool(e)?,
            "causal" => m.causal = parse_bool(e)?,
            "pooling" => m.pooling = with(e, parse_pooling)?,
            "init_period" => m.init_period = parse(e)?,
            "epochs" => t.epochs = parse(e)?,
            "patience" => t.patience = parse(e)?,
            "batch_size" => t.batch_size = parse(e)?,
            "lr" => t.lr = parse(e)?,
            "kernel_lr_scale" => t.kernel_lr_scale = parse(e)?,
            "optimizer" => t.optimizer = with(e, parse_optimizer)?,
            "seeds" => t.seeds = parse_list(e)?,
            "seed" => self.split_seed = parse(e)?,
            "fraction" => self.fraction = parse(e)?,
            "fractions" => self.fractions = parse_list(e)?,
            "bench_iters" => self.bench_iters = parse(e)?,
            "bench_warmup" => self.bench_warmup = parse(e)?,
            _ => return Err(unknown(e)),
        }
        Ok(())
    }

    /// Checks everything that does not depend on the data.
    pub fn validate(&self) -> Result<(), CliError> {
        self.train.validate()?;
        if !(self.fraction > 0.0 && self.fraction <= 1.0) {
            return Err(CliError::Config(format!("fraction must lie in (0, 1], got {}", self.fraction)));
        }
        satt_core::train::check_fractions(&self.fractions)?;
        let mut m = self.model.clone();
        m.channels = m.channels.max(1);
        m.validate()?;
        Ok(())
    }

    pub fn kernel(&self) -> KernelSpec {
        self.model.kernel
    }
}

pub fn synth_from_text(text: &str) -> Result<SynthConfig, CliError> {
    let mut c = SynthConfig::default();
    for e in &parse_kv(text)? {
        match e.key.as_str() {
            "n_samples" => c.n_samples = parse(e)?,
            "window" => c.window = parse(e)?,
            "channels" => c.channels = parse(e)?,
            "seed" => c.seed = parse(e)?,
            "ar_coeff" => c.ar_coeff = parse(e)?,
            "amplitude" => c.amplitude = parse(e)?,
            "period" => c.period = parse(e)?,
            "noise" => c.noise = parse(e)?,
            "event_k" => c.event_k = parse(e)?,
            "event_channel" => c.event_channel = parse(e)?,
            "positive_rate" => c.positive_rate = parse(e)?,
            "threshold" => {
                c.threshold = match e.value.as_str() {
                    "" | "auto" => None,
                    "-inf" => Some(f64::NEG_INFINITY),
                    _ => Some(parse(e)?),
                }
            }
            "missing_rate" => c.missing_rate = parse(e)?,
            "label_smear" => c.label_smear = parse(e)?,
            _ => return Err(unknown(e)),
        }
    }
    Ok(c)
}
