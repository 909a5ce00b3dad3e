//! Checkpoints, run manifests, reports and attention dumps.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use satt_core::data::NormStats;
use satt_core::kernels::{exp_lags, periodic_lags, KernelMode};
use satt_core::model::{ModelConfig, SatModel};
use satt_core::params::ParamStore;
use satt_core::Matrix;

use crate::config::RunConfig;

pub const CHECKPOINT_VERSION: u32 = 1;
pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> anyhow::Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").with_context(|| format!("cannot write {}", path.display()))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> anyhow::Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("cannot parse {}", path.display()))
}

/// Weights, configuration and normalization of one trained model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub model: ModelConfig,
    pub params: ParamStore,
    pub stats: NormStats,
    pub split_seed: u64,
    pub seed: u64,
}

impl Checkpoint {
    pub fn new(model: &SatModel, stats: &NormStats, split_seed: u64, seed: u64) -> Self {
        Self {
            version: CHECKPOINT_VERSION,
            model: model.config().clone(),
            params: model.params().clone(),
            stats: stats.clone(),
            split_seed,
            seed,
        }
    }

    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let c: Self = read_json(path)?;
        if c.version != CHECKPOINT_VERSION {
            bail!("{}: unsupported checkpoint version {}", path.display(), c.version);
        }
        Ok(c)
    }

    pub fn save(&self, path: &Path) -> anyhow::Result<()> {
        write_json(path, self)
    }

    pub fn to_model(&self) -> satt_core::Result<SatModel> {
        SatModel::from_parts(self.model.clone(), self.params.clone())
    }
}

/// Everything needed to rerun a command exactly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub command: String,
    pub data: PathBuf,
    pub out: PathBuf,
    pub config: RunConfig,
    pub artifacts: Vec<PathBuf>,
}

/// One finished cell of a fraction sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub fraction: f64,
    pub seed: u64,
    pub auprc: Option<f64>,
    pub auroc: Option<f64>,
    pub mse: Option<f64>,
    /// Masked-row band mass (`w = 2`, first layer) for probe sweeps.
    pub band_mass: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepManifest {
    pub run: RunManifest,
    pub completed: Vec<SweepCell>,
    pub skipped: Vec<String>,
}

/// Metrics written by `eval`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub split: String,
    pub windows: usize,
    pub positives: usize,
    pub auprc: Option<f64>,
    pub auroc: Option<f64>,
    pub mse: Option<f64>,
}

/// Grayscale image, brightest = largest value in the matrix.
pub fn write_pgm(path: &Path, m: &Matrix) -> anyhow::Result<()> {
    let max = m.as_slice().iter().cloned().fold(0.0f64, f64::max);
    let mut out = format!("P2\n{} {}\n255\n", m.cols(), m.rows()).into_bytes();
    for i in 0..m.rows() {
        let line: Vec<String> = m
            .row(i)
            .iter()
            .map(|&v| {
                let g = if max > 0.0 { (v / max * 255.0).round() } else { 0.0 };
                (g.clamp(0.0, 255.0) as u8).to_string()
            })
            .collect();
        out.extend(line.join(" ").into_bytes());
        out.push(b'\n');
    }
    fs::write(path, out).with_context(|| format!("cannot write {}", path.display()))
}

pub fn write_matrix_csv(path: &Path, m: &Matrix) -> anyhow::Result<()> {
    let mut w = csv::Writer::from_path(path).with_context(|| format!("cannot create {}", path.display()))?;
    for i in 0..m.rows() {
        w.write_record(m.row(i).iter().map(|v| v.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_matrix_csv(path: &Path) -> anyhow::Result<Matrix> {
    let mut r = csv::ReaderBuilder::new()
        .has_headers(false)
        .from_path(path)
        .with_context(|| format!("cannot open {}", path.display()))?;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        rows.push(rec.iter().map(str::parse).collect::<Result<_, _>>()?);
    }
    let cols = rows.first().map_or(0, Vec::len);
    Ok(Matrix::from_vec(rows.len(), cols, rows.concat())?)
}

/// Combined kernel value at each lag `h = 0..T−1`.
pub fn kernel_profile(mode: KernelMode, p: &satt_core::kernels::KernelParams, t: usize) -> satt_core::Result<Vec<f64>> {
    let ones = vec![1.0; t];
    let e = if mode.uses_exp() { exp_lags(t, p.exp_alpha, p.exp_beta)? } else { ones.clone() };
    let q = if mode.uses_periodic() {
        periodic_lags(t, p.per_alpha, p.per_beta)?
    } else {
        ones
    };
    Ok(e.iter().zip(&q).map(|(a, b)| a * b).collect())
}

/// Attention CSV + PGM and a kernel CSV per (layer, head) for one window.
pub fn dump_model(model: &SatModel, window: &satt_core::data::Window, out: &Path) -> anyhow::Result<Vec<PathBuf>> {
    fs::create_dir_all(out).with_context(|| format!("cannot create {}", out.display()))?;
    let snaps = model.attention_snapshot(window)?;
    let params = model.kernel_params(Some(window))?;
    let cfg = model.config();
    let mut files = Vec::new();
    for (l, layer) in snaps.iter().enumerate() {
        for (h, a) in layer.iter().enumerate() {
            let csv = out.join(format!("attention_l{l}_h{h}.csv"));
            write_matrix_csv(&csv, a)?;
            let pgm = out.join(format!("attention_l{l}_h{h}.pgm"));
            write_pgm(&pgm, a)?;
            let kpath = out.join(format!("kernel_l{l}_h{h}.csv"));
            let profile = kernel_profile(cfg.kernel.mode, &params[l][h], cfg.window)?;
            let mut w = csv::Writer::from_path(&kpath)?;
            let mut header = vec!["head".to_string()];
            header.extend((0..cfg.window).map(|k| format!("h{k}")));
            w.write_record(&header)?;
            let mut row = vec![h.to_string()];
            row.extend(profile.iter().map(|v| v.to_string()));
            w.write_record(&row)?;
            w.flush()?;
            files.extend([csv, pgm, kpath]);
        }
    }
    Ok(files)
}
