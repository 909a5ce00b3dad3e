//! Series, windows, splits, normalization and balanced batching.

use alloc::collections::BTreeSet;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{config, contract, Result};
use crate::matrix::Matrix;

/// Value stored in unobserved cells after normalization (the channel mean).
pub const SENTINEL: f64 = 0.0;

/// One fixed-length model input ending at a prediction point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Window {
    /// `T × C`.
    pub values: Matrix,
    /// `T × C`, 1 = observed.
    pub mask: Matrix,
    pub timestamps: Vec<f64>,
    pub label: u8,
    pub series_id: String,
}

impl Window {
    pub fn len(&self) -> usize {
        self.values.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.values.rows() == 0
    }

    /// Positions with at least one observed channel.
    pub fn observed_steps(&self) -> Vec<usize> {
        (0..self.mask.rows())
            .filter(|&i| self.mask.row(i).iter().any(|&m| m != 0.0))
            .collect()
    }
}

/// One raw multichannel series. `labels[i]` is `Some` at prediction points.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Series {
    pub id: String,
    pub timestamps: Vec<f64>,
    /// `len × C`.
    pub values: Matrix,
    pub mask: Matrix,
    pub labels: Vec<Option<u8>>,
}

impl Series {
    pub fn len(&self) -> usize {
        self.timestamps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.timestamps.is_empty()
    }

    fn validate(&self, channels: usize) -> Result<()> {
        let n = self.len();
        if self.values.shape() != (n, channels) || self.mask.shape() != (n, channels) || self.labels.len() != n {
            return Err(contract(format!("series `{}` has inconsistent lengths", self.id)));
        }
        if self.labels.iter().flatten().any(|&l| l > 1) {
            return Err(contract(format!("series `{}` has a non-binary label", self.id)));
        }
        if self.timestamps.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(contract(format!("series `{}` timestamps are not strictly increasing", self.id)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeriesDataset {
    pub channels: Vec<String>,
    pub series: Vec<Series>,
}

impl SeriesDataset {
    pub fn num_channels(&self) -> usize {
        self.channels.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels.is_empty() {
            return Err(contract("dataset has no channels"));
        }
        let mut seen = BTreeSet::new();
        for s in &self.series {
            if !seen.insert(s.id.as_str()) {
                return Err(contract(format!("duplicate series id `{}`", s.id)));
            }
            s.validate(self.channels.len())?;
        }
        Ok(())
    }

    /// All prediction-point windows, series by series.
    pub fn windows(&self, t: usize) -> Result<Vec<Window>> {
        let mut out = Vec::new();
        for s in &self.series {
            out.extend(make_windows(s, t)?);
        }
        Ok(out)
    }
}

/// One window of exactly `t` steps per prediction point, left-padded with
/// unobserved steps when the history is shorter than `t`.
pub fn make_windows(series: &Series, t: usize) -> Result<Vec<Window>> {
    if series.is_empty() {
        return Err(contract(format!("series `{}` is empty", series.id)));
    }
    if t == 0 {
        return Err(config("window must be at least 1"));
    }
    let c = series.values.cols();
    let mut out = Vec::new();
    for (end, label) in series.labels.iter().enumerate() {
        let Some(label) = *label else { continue };
        let start = (end + 1).saturating_sub(t);
        let pad = t - (end + 1 - start);
        let mut values = Matrix::filled(t, c, SENTINEL);
        let mut mask = Matrix::zeros(t, c);
        let mut timestamps = vec![series.timestamps[start]; t];
        for (k, src) in (start..=end).enumerate() {
            values.row_mut(pad + k).copy_from_slice(series.values.row(src));
            mask.row_mut(pad + k).copy_from_slice(series.mask.row(src));
            timestamps[pad + k] = series.timestamps[src];
        }
        out.push(Window {
            values,
            mask,
            timestamps,
            label,
            series_id: series.id.clone(),
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

/// Series-level split: 20% test, then 20% of the remainder validation.
pub fn split_series(ids: &[String], seed: u64) -> Vec<Split> {
    let mut order: Vec<usize> = (0..ids.len()).collect();
    // order does not depend on input ordering
    order.sort_by(|&a, &b| ids[a].cmp(&ids[b]));
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n = ids.len();
    let n_test = libm::round(0.2 * n as f64) as usize;
    let n_val = libm::round(0.2 * (n - n_test) as f64) as usize;
    let mut out = vec![Split::Train; n];
    for (rank, &i) in order.iter().enumerate() {
        if rank < n_test {
            out[i] = Split::Test;
        } else if rank < n_test + n_val {
            out[i] = Split::Val;
        }
    }
    out
}

/// Prefix of one seeded shuffle: subsets for growing fractions are nested.
pub fn fraction_subset(n: usize, fraction: f64, seed: u64) -> Result<Vec<usize>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(config(format!("fraction must lie in (0, 1], got {fraction}")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_f4ac));
    let keep = (libm::ceil(fraction * n as f64 - 1e-9) as usize).clamp(n.min(1), n);
    order.truncate(keep);
    order.sort_unstable();
    Ok(order)
}

/// Per-channel statistics fitted on observed training cells.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl NormStats {
    /// Population mean and standard deviation per channel. A zero standard
    /// deviation is replaced by 1 and reported in the returned warnings.
    pub fn fit(windows: &[Window]) -> Result<(Self, Vec<String>)> {
        let c = windows.first().map(|w| w.values.cols()).unwrap_or(0);
        if c == 0 {
            return Err(contract("cannot fit normalization on an empty training set"));
        }
        let mut n = vec![0usize; c];
        let mut sum = vec![0.0; c];
        for w in windows {
            for (vr, mr) in w.values.as_slice().chunks(c).zip(w.mask.as_slice().chunks(c)) {
                for j in 0..c {
                    if mr[j] != 0.0 {
                        n[j] += 1;
                        sum[j] += vr[j];
                    }
                }
            }
        }
        if let Some(j) = n.iter().position(|&k| k == 0) {
            return Err(contract(format!("channel {j} has no observed training value")));
        }
        let mean: Vec<f64> = (0..c).map(|j| sum[j] / n[j] as f64).collect();
        let mut ss = vec![0.0; c];
        for w in windows {
            for (vr, mr) in w.values.as_slice().chunks(c).zip(w.mask.as_slice().chunks(c)) {
                for j in 0..c {
                    if mr[j] != 0.0 {
                        ss[j] += (vr[j] - mean[j]) * (vr[j] - mean[j]);
                    }
                }
            }
        }
        let mut warnings = Vec::new();
        let std = (0..c)
            .map(|j| {
                let s = libm::sqrt(ss[j] / n[j] as f64);
                if s > 0.0 {
                    s
                } else {
                    warnings.push(format!("channel {j} is constant; std clamped to 1"));
                    1.0
                }
            })
            .collect();
        Ok((Self { mean, std }, warnings))
    }

    /// z-scores observed cells and writes the sentinel into unobserved ones.
    pub fn apply(&self, windows: &mut [Window]) {
        let c = self.mean.len();
        for w in windows {
            let mask = w.mask.as_slice();
            for (k, v) in w.values.as_mut_slice().iter_mut().enumerate() {
                let j = k % c;
                *v = if mask[k] != 0.0 {
                    (*v - self.mean[j]) / self.std[j]
                } else {
                    SENTINEL
                };
            }
        }
    }
}

/// Fits on `train` and normalizes `train` and every other set in place.
pub fn znormalize(train: &mut [Window], others: &mut [&mut [Window]]) -> Result<(NormStats, Vec<String>)> {
    let (stats, warnings) = NormStats::fit(train)?;
    stats.apply(train);
    for o in others.iter_mut() {
        stats.apply(o);
    }
    Ok((stats, warnings))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrepareConfig {
    pub window: usize,
    pub split_seed: u64,
    /// Fraction of training windows kept.
    pub fraction: f64,
}

/// Windowed, split and normalized data ready for training.
#[derive(Debug, Clone, PartialEq)]
pub struct Prepared {
    pub train: Vec<Window>,
    pub val: Vec<Window>,
    pub test: Vec<Window>,
    pub stats: NormStats,
    pub warnings: Vec<String>,
}

impl Prepared {
    pub fn positives(windows: &[Window]) -> usize {
        windows.iter().filter(|w| w.label == 1).count()
    }
}

/// Raw (unnormalized) windows of each split.
pub fn split_windows(ds: &SeriesDataset, window: usize, split_seed: u64) -> Result<[Vec<Window>; 3]> {
    ds.validate()?;
    let ids: Vec<String> = ds.series.iter().map(|s| s.id.clone()).collect();
    let splits = split_series(&ids, split_seed);
    let (mut train, mut val, mut test) = (Vec::new(), Vec::new(), Vec::new());
    for (s, split) in ds.series.iter().zip(&splits) {
        let w = make_windows(s, window)?;
        match split {
            Split::Train => train.extend(w),
            Split::Val => val.extend(w),
            Split::Test => test.extend(w),
        }
    }
    Ok([train, val, test])
}

/// Splits by series, keeps the training fraction, fits normalization on the
/// kept training windows and applies it everywhere. Validation and test
/// sets do not shrink with the fraction.
pub fn prepare(ds: &SeriesDataset, cfg: &PrepareConfig) -> Result<Prepared> {
    let [train, mut val, mut test] = split_windows(ds, cfg.window, cfg.split_seed)?;
    if train.is_empty() {
        return Err(contract("no training windows"));
    }
    let keep = fraction_subset(train.len(), cfg.fraction, cfg.split_seed)?;
    let mut train: Vec<Window> = keep.into_iter().map(|i| train[i].clone()).collect();
    let (stats, warnings) = znormalize(&mut train, &mut [&mut val, &mut test])?;
    Ok(Prepared {
        train,
        val,
        test,
        stats,
        warnings,
    })
}

/// Endless stream of class-balanced batches of window indices: `⌈b/2⌉`
/// positives and `⌊b/2⌋` negatives. The majority class cycles through
/// reshuffled passes; the minority class is drawn with replacement.
#[derive(Debug, Clone)]
pub struct BalancedBatches {
    positives: Vec<usize>,
    negatives: Vec<usize>,
    batch_size: usize,
    rng: ChaCha8Rng,
    queue: Vec<usize>,
    cursor: usize,
}

impl BalancedBatches {
    pub fn new(labels: &[u8], batch_size: usize, seed: u64) -> Result<Self> {
        if batch_size < 2 {
            return Err(config("batch_size must be at least 2 for balanced batches"));
        }
        let positives: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == 1).collect();
        let negatives: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == 0).collect();
        if positives.is_empty() {
            return Err(contract("balanced batching needs at least one positive example"));
        }
        if negatives.is_empty() {
            return Err(contract("balanced batching needs at least one negative example"));
        }
        Ok(Self {
            positives,
            negatives,
            batch_size,
            rng: ChaCha8Rng::seed_from_u64(seed),
            queue: Vec::new(),
            cursor: 0,
        })
    }

    fn quotas(&self) -> (usize, usize) {
        (self.batch_size.div_ceil(2), self.batch_size / 2)
    }

    fn majority_is_negative(&self) -> bool {
        let (qp, qn) = self.quotas();
        // compare passes needed to cover each class
        self.negatives.len() * qp >= self.positives.len() * qn
    }

    /// Batches needed to visit every majority example once.
    pub fn batches_per_epoch(&self) -> usize {
        let (qp, qn) = self.quotas();
        if self.majority_is_negative() {
            self.negatives.len().div_ceil(qn)
        } else {
            self.positives.len().div_ceil(qp)
        }
    }

    pub fn next_batch(&mut self) -> Vec<usize> {
        let (qp, qn) = self.quotas();
        let neg_major = self.majority_is_negative();
        let (major_q, minor_q) = if neg_major { (qn, qp) } else { (qp, qn) };
        let mut major = Vec::with_capacity(major_q);
        for _ in 0..major_q {
            if self.cursor == self.queue.len() {
                self.queue = if neg_major {
                    self.negatives.clone()
                } else {
                    self.positives.clone()
                };
                self.queue.shuffle(&mut self.rng);
                self.cursor = 0;
            }
            major.push(self.queue[self.cursor]);
            self.cursor += 1;
        }
        let minor_pool = if neg_major { &self.positives } else { &self.negatives };
        let minor: Vec<usize> = (0..minor_q)
            .map(|_| minor_pool[self.rng.random_range(0..minor_pool.len())])
            .collect();
        let (mut batch, rest) = if neg_major { (minor, major) } else { (major, minor) };
        batch.extend(rest);
        batch
    }
}
