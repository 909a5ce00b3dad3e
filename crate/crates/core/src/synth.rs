//! Seeded synthetic multichannel series with a short-range event rule.
//!
//! Each channel is an AR(1) process started from its stationary law plus a
//! sinusoid with a random phase. A sample is labelled positive iff the mean
//! of the last `event_k` steps of `event_channel` exceeds the threshold.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::{Series, SeriesDataset, SENTINEL};
use crate::error::{config, Result};
use crate::matrix::Matrix;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n_samples: usize,
    /// Steps per sample.
    pub window: usize,
    pub channels: usize,
    pub seed: u64,
    pub ar_coeff: f64,
    pub amplitude: f64,
    pub period: f64,
    /// Innovation standard deviation.
    pub noise: f64,
    pub event_k: usize,
    pub event_channel: usize,
    /// Target fraction of positive samples, used when `threshold` is unset.
    pub positive_rate: f64,
    /// Explicit event threshold; `-inf` labels everything positive.
    pub threshold: Option<f64>,
    /// Probability that a cell is unobserved.
    pub missing_rate: f64,
    /// Extra steps after the prediction point in which an event still
    /// labels the sample positive. 0 disables smearing.
    pub label_smear: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_samples: 1000,
            window: 48,
            channels: 3,
            seed: 0,
            ar_coeff: 0.7,
            amplitude: 1.0,
            period: 12.0,
            noise: 1.0,
            event_k: 3,
            event_channel: 0,
            positive_rate: 0.2,
            threshold: None,
            missing_rate: 0.1,
            label_smear: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_samples == 0 {
            return Err(config("n_samples must be at least 1"));
        }
        if self.window == 0 {
            return Err(config("window must be at least 1"));
        }
        if self.channels == 0 {
            return Err(config("channels must be at least 1"));
        }
        if !(self.ar_coeff.abs() < 1.0) {
            return Err(config("ar_coeff must lie in (-1, 1)"));
        }
        if !(self.noise > 0.0 && self.noise.is_finite()) {
            return Err(config("noise must be positive"));
        }
        if !self.amplitude.is_finite() {
            return Err(config("amplitude must be finite"));
        }
        if !(self.period > 0.0 && self.period.is_finite()) {
            return Err(config("period must be positive"));
        }
        if self.event_k == 0 || self.event_k > self.window {
            return Err(config("event_k must lie in [1, window]"));
        }
        if self.event_channel >= self.channels {
            return Err(config("event_channel must name an existing channel"));
        }
        if self.threshold.is_none() && !(self.positive_rate > 0.0 && self.positive_rate < 1.0) {
            return Err(config(format!(
                "positive_rate must lie in (0, 1), got {}",
                self.positive_rate
            )));
        }
        if matches!(self.threshold, Some(t) if t.is_nan()) {
            return Err(config("threshold must not be NaN"));
        }
        if !(0.0..1.0).contains(&self.missing_rate) {
            return Err(config("missing_rate must lie in [0, 1)"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Synthetic {
    pub dataset: SeriesDataset,
    /// Threshold actually used by the event rule.
    pub threshold: f64,
    /// Underlying values before missingness (unobserved cells of the
    /// dataset hold the sentinel instead), one `(window + smear) × C`
    /// matrix per sample.
    pub complete: Vec<Matrix>,
}

/// Mean of the `k` steps ending at `end` in column `c`.
pub fn trailing_mean(x: &Matrix, c: usize, end: usize, k: usize) -> f64 {
    (end + 1 - k..=end).map(|i| x[(i, c)]).sum::<f64>() / k as f64
}

fn event_statistic(cfg: &SynthConfig, x: &Matrix) -> f64 {
    (0..=cfg.label_smear)
        .map(|s| trailing_mean(x, cfg.event_channel, cfg.window - 1 + s, cfg.event_k))
        .fold(f64::NEG_INFINITY, f64::max)
}

pub fn synth_generate(cfg: &SynthConfig) -> Result<Synthetic> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let len = cfg.window + cfg.label_smear;
    let stationary_sd = cfg.noise / libm::sqrt(1.0 - cfg.ar_coeff * cfg.ar_coeff);
    let tau = 2.0 * core::f64::consts::PI;
    let mut complete = Vec::with_capacity(cfg.n_samples);
    for _ in 0..cfg.n_samples {
        let mut x = Matrix::zeros(len, cfg.channels);
        for c in 0..cfg.channels {
            let phase: f64 = rng.random::<f64>() * cfg.period;
            let z: f64 = StandardNormal.sample(&mut rng);
            let mut ar = stationary_sd * z;
            for t in 0..len {
                if t > 0 {
                    let e: f64 = StandardNormal.sample(&mut rng);
                    ar = cfg.ar_coeff * ar + cfg.noise * e;
                }
                x[(t, c)] = ar + cfg.amplitude * libm::sin(tau * (t as f64 + phase) / cfg.period);
            }
        }
        complete.push(x);
    }
    let stats: Vec<f64> = complete.iter().map(|x| event_statistic(cfg, x)).collect();
    let threshold = match cfg.threshold {
        Some(t) => t,
        None => calibrate(&stats, cfg.positive_rate)?,
    };
    let channels: Vec<String> = (0..cfg.channels).map(|c| format!("ch{c}")).collect();
    let width = digits(cfg.n_samples);
    let mut series = Vec::with_capacity(cfg.n_samples);
    for (i, (x, s)) in complete.iter().zip(&stats).enumerate() {
        let mask = Matrix::from_fn(cfg.window, cfg.channels, |_, _| {
            if rng.random::<f64>() < cfg.missing_rate {
                0.0
            } else {
                1.0
            }
        });
        let values = Matrix::from_fn(cfg.window, cfg.channels, |t, c| {
            if mask[(t, c)] != 0.0 {
                x[(t, c)]
            } else {
                SENTINEL
            }
        });
        let mut labels = vec![None; cfg.window];
        labels[cfg.window - 1] = Some(u8::from(*s > threshold));
        series.push(Series {
            id: format!("s{i:0width$}"),
            timestamps: (0..cfg.window).map(|t| t as f64).collect(),
            values,
            mask,
            labels,
        });
    }
    Ok(Synthetic {
        dataset: SeriesDataset { channels, series },
        threshold,
        complete,
    })
}

fn digits(n: usize) -> usize {
    let mut d = 1;
    let mut m = n.saturating_sub(1);
    while m >= 10 {
        m /= 10;
        d += 1;
    }
    d
}

/// Midpoint between the order statistics straddling the target count.
fn calibrate(stats: &[f64], rate: f64) -> Result<f64> {
    let n = stats.len();
    let positives = libm::round(rate * n as f64) as usize;
    if positives == 0 || positives == n {
        return Err(config(format!(
            "positive_rate {rate} is unreachable with n_samples = {n}"
        )));
    }
    let mut sorted = stats.to_vec();
    sorted.sort_by(f64::total_cmp);
    let cut = n - positives;
    Ok(0.5 * (sorted[cut - 1] + sorted[cut]))
}
