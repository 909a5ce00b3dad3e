//! Training loop with validation early stopping, evaluation and timing.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{prepare, BalancedBatches, PrepareConfig, Prepared, SeriesDataset, Window};
use crate::error::{config, contract, Error, Result};
use crate::matrix::Matrix;
use crate::metrics::{auprc, auroc, diag_band_mass, head_diversity, mean_std};
use crate::model::{ModelConfig, SatModel, Target, Task};
use crate::optim::{OptimizerKind, OptimizerState};
use crate::params::Gradients;

/// Execution backend for data-parallel work over windows.
pub trait Runtime: Sync {
    /// `[f(0), …, f(n−1)]`, in index order.
    fn map<T: Send>(&self, n: usize, f: &(dyn Fn(usize) -> T + Sync)) -> Vec<T>;

    /// Monotonic wall clock in milliseconds, if one is available.
    fn now_ms(&self) -> Option<f64> {
        None
    }
}

/// Single-threaded runtime without a clock.
#[derive(Debug, Clone, Copy, Default)]
pub struct Sequential;

impl Runtime for Sequential {
    fn map<T: Send>(&self, n: usize, f: &(dyn Fn(usize) -> T + Sync)) -> Vec<T> {
        (0..n).map(f).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub patience: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Learning-rate multiplier for kernel parameters.
    pub kernel_lr_scale: f64,
    pub optimizer: OptimizerKind,
    pub seeds: Vec<u64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            patience: 30,
            batch_size: 32,
            lr: 1e-3,
            kernel_lr_scale: 10.0,
            optimizer: OptimizerKind::Adam,
            seeds: alloc::vec![0, 1, 2],
        }
    }
}

impl TrainConfig {
    pub fn probe() -> Self {
        Self {
            patience: 5,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(config("epochs must be at least 1"));
        }
        if self.patience == 0 {
            return Err(config("patience must be at least 1"));
        }
        if self.batch_size < 2 {
            return Err(config("batch_size must be at least 2"));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(config("lr must be a non-negative number"));
        }
        if !(self.kernel_lr_scale >= 0.0 && self.kernel_lr_scale.is_finite()) {
            return Err(config("kernel_lr_scale must be a non-negative number"));
        }
        if self.seeds.is_empty() {
            return Err(config("seeds must not be empty"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    /// Validation AUPRC, or negative masked-value MSE for the probe.
    pub val_score: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct TestMetrics {
    pub auprc: Option<f64>,
    pub auroc: Option<f64>,
    pub mse: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedReport {
    pub seed: u64,
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val: f64,
    pub test: TestMetrics,
    pub iterations: usize,
    pub ms_per_iter: Option<f64>,
}

/// Mean with sample standard deviation and standard error (≥ 2 seeds).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub std: Option<f64>,
    pub se: Option<f64>,
}

impl Summary {
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let (mean, std) = mean_std(values);
        Some(Self {
            mean,
            std,
            se: std.map(|s| s / libm::sqrt(values.len() as f64)),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub task: Task,
    pub seeds: Vec<SeedReport>,
    pub auprc: Option<Summary>,
    pub auroc: Option<Summary>,
    pub mse: Option<Summary>,
    pub ms_per_iter: Option<f64>,
    pub warnings: Vec<String>,
}

impl RunReport {
    fn from_seeds(task: Task, seeds: Vec<SeedReport>, warnings: Vec<String>) -> Self {
        let pick = |f: fn(&TestMetrics) -> Option<f64>| -> Option<Summary> {
            let v: Option<Vec<f64>> = seeds.iter().map(|s| f(&s.test)).collect();
            v.and_then(|v| Summary::of(&v))
        };
        let times: Option<Vec<f64>> = seeds.iter().map(|s| s.ms_per_iter).collect();
        Self {
            task,
            auprc: pick(|t| t.auprc),
            auroc: pick(|t| t.auroc),
            mse: pick(|t| t.mse),
            ms_per_iter: times.and_then(|t| Summary::of(&t)).map(|s| s.mean),
            seeds,
            warnings,
        }
    }
}

fn stream_seed(seed: u64, stream: u64) -> u64 {
    seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ stream
}

/// Random observed position of a window, `None` if nothing is observed.
fn random_position(w: &Window, rng: &mut ChaCha8Rng) -> Option<usize> {
    let obs = w.observed_steps();
    (!obs.is_empty()).then(|| obs[rng.random_range(0..obs.len())])
}

/// Fixed evaluation positions for the masked-value probe.
pub fn eval_positions(windows: &[Window]) -> Vec<Option<usize>> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x0e7a1);
    windows.iter().map(|w| random_position(w, &mut rng)).collect()
}

/// Forward, backward and one optimizer step on a batch. Returns the mean loss.
pub fn train_step<R: Runtime>(
    model: &mut SatModel,
    opt: &mut OptimizerState,
    batch: &[(&Window, Target)],
    rt: &R,
    (epoch, index): (usize, usize),
) -> Result<f64> {
    if batch.is_empty() {
        return Err(contract("empty batch"));
    }
    let results = {
        let m = &*model;
        rt.map(batch.len(), &|i| m.loss_and_grads(batch[i].0, batch[i].1))
    };
    let mut total = Gradients::zeros_like(model.params());
    let mut loss = 0.0;
    for r in results {
        let (l, g) = r?;
        loss += l;
        total.accumulate(&g);
    }
    let n = batch.len() as f64;
    loss /= n;
    if !loss.is_finite() {
        return Err(Error::NonFiniteLoss { epoch, batch: index });
    }
    total.scale(1.0 / n);
    opt.step(model.params_mut(), &total)?;
    Ok(loss)
}

/// Event probabilities for every window.
pub fn predict<R: Runtime>(model: &SatModel, windows: &[Window], rt: &R) -> Result<Vec<f64>> {
    rt.map(windows.len(), &|i| model.classify(&windows[i])).into_iter().collect()
}

/// Mean masked-value loss at fixed positions.
pub fn masked_mse<R: Runtime>(model: &SatModel, windows: &[Window], rt: &R) -> Result<f64> {
    let pos = eval_positions(windows);
    let losses: Vec<Option<f64>> = rt
        .map(windows.len(), &|i| pos[i].map(|p| model.masked_predict(&windows[i], p).map(|m| m.loss)))
        .into_iter()
        .map(Option::transpose)
        .collect::<Result<_>>()?;
    let kept: Vec<f64> = losses.into_iter().flatten().collect();
    if kept.is_empty() {
        return Err(contract("no window with an observed value to evaluate"));
    }
    Ok(kept.iter().sum::<f64>() / kept.len() as f64)
}

pub fn evaluate<R: Runtime>(model: &SatModel, windows: &[Window], rt: &R) -> Result<TestMetrics> {
    match model.config().task {
        Task::Classify => {
            let scores = predict(model, windows, rt)?;
            let labels: Vec<u8> = windows.iter().map(|w| w.label).collect();
            Ok(TestMetrics {
                auprc: Some(auprc(&scores, &labels)?),
                auroc: Some(auroc(&scores, &labels)?),
                mse: None,
            })
        }
        Task::Masked => Ok(TestMetrics {
            mse: Some(masked_mse(model, windows, rt)?),
            ..TestMetrics::default()
        }),
    }
}

fn val_score<R: Runtime>(model: &SatModel, windows: &[Window], rt: &R) -> Result<f64> {
    let m = evaluate(model, windows, rt)?;
    Ok(match model.config().task {
        Task::Classify => m.auprc.expect("classification metrics"),
        Task::Masked => -m.mse.expect("masked metrics"),
    })
}

/// Trains one model from `seed`, restoring the weights of the best
/// validation epoch before testing.
pub fn train_seed<R: Runtime>(
    model_cfg: &ModelConfig,
    data: &Prepared,
    cfg: &TrainConfig,
    seed: u64,
    rt: &R,
) -> Result<(SeedReport, SatModel)> {
    cfg.validate()?;
    let mut model = SatModel::new(model_cfg.clone(), seed)?;
    let mut opt = OptimizerState::new(cfg.optimizer, model.params(), cfg.lr);
    opt.kernel_lr_scale = cfg.kernel_lr_scale;
    let task = model_cfg.task;
    let mut sampler = match task {
        Task::Classify => {
            let labels: Vec<u8> = data.train.iter().map(|w| w.label).collect();
            Some(BalancedBatches::new(&labels, cfg.batch_size, stream_seed(seed, 1))?)
        }
        Task::Masked => None,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(seed, 2));
    let trainable: Vec<usize> = (0..data.train.len())
        .filter(|&i| !data.train[i].observed_steps().is_empty())
        .collect();
    if trainable.is_empty() {
        return Err(contract("no training window has an observed value"));
    }

    let mut epochs = Vec::new();
    let mut best: Option<(f64, usize, crate::params::ParamStore)> = None;
    let mut bad = 0;
    let mut iterations = 0usize;
    let mut elapsed = 0.0;
    let mut timed = true;
    for epoch in 1..=cfg.epochs {
        let batches: Vec<Vec<(usize, Target)>> = match &mut sampler {
            Some(s) => (0..s.batches_per_epoch())
                .map(|_| {
                    s.next_batch()
                        .into_iter()
                        .map(|i| (i, Target::Label(f64::from(data.train[i].label))))
                        .collect()
                })
                .collect(),
            None => {
                let mut order = trainable.clone();
                order.shuffle(&mut rng);
                order
                    .chunks(cfg.batch_size)
                    .map(|c| {
                        c.iter()
                            .map(|&i| {
                                let p = random_position(&data.train[i], &mut rng).expect("observed window");
                                (i, Target::Masked(p))
                            })
                            .collect()
                    })
                    .collect()
            }
        };
        let mut loss_sum = 0.0;
        for (b, batch) in batches.iter().enumerate() {
            let refs: Vec<(&Window, Target)> = batch.iter().map(|&(i, t)| (&data.train[i], t)).collect();
            let start = rt.now_ms();
            loss_sum += train_step(&mut model, &mut opt, &refs, rt, (epoch, b + 1))?;
            match (start, rt.now_ms()) {
                (Some(a), Some(z)) => elapsed += z - a,
                _ => timed = false,
            }
            iterations += 1;
        }
        let score = val_score(&model, &data.val, rt)?;
        epochs.push(EpochRecord {
            epoch,
            train_loss: loss_sum / batches.len() as f64,
            val_score: score,
        });
        if best.as_ref().is_none_or(|(b, _, _)| score > *b) {
            best = Some((score, epoch, model.params().clone()));
            bad = 0;
        } else {
            bad += 1;
            if bad >= cfg.patience {
                break;
            }
        }
    }
    let (best_val, best_epoch, store) = best.expect("at least one epoch ran");
    *model.params_mut() = store;
    let test = evaluate(&model, &data.test, rt)?;
    let report = SeedReport {
        seed,
        epochs,
        best_epoch,
        best_val,
        test,
        iterations,
        ms_per_iter: (timed && iterations > 0).then(|| elapsed / iterations as f64),
    };
    Ok((report, model))
}

/// Trains one model per configured seed.
pub fn train<R: Runtime>(
    model_cfg: &ModelConfig,
    data: &Prepared,
    cfg: &TrainConfig,
    rt: &R,
) -> Result<(RunReport, Vec<SatModel>)> {
    cfg.validate()?;
    let mut reports = Vec::new();
    let mut models = Vec::new();
    for &seed in &cfg.seeds {
        let (r, m) = train_seed(model_cfg, data, cfg, seed, rt)?;
        reports.push(r);
        models.push(m);
    }
    Ok((RunReport::from_seeds(model_cfg.task, reports, data.warnings.clone()), models))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepEntry {
    pub fraction: f64,
    /// `None` when the fraction was skipped.
    pub report: Option<RunReport>,
    pub warning: Option<String>,
}

/// Trains on nested training subsets of growing size.
pub fn fraction_sweep<R: Runtime>(
    ds: &SeriesDataset,
    prep: &PrepareConfig,
    fractions: &[f64],
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    rt: &R,
) -> Result<Vec<SweepEntry>> {
    check_fractions(fractions)?;
    let mut out = Vec::new();
    for &fraction in fractions {
        let data = prepare(ds, &PrepareConfig { fraction, ..*prep })?;
        if let Some(w) = fraction_warning(model_cfg.task, &data, fraction) {
            out.push(SweepEntry {
                fraction,
                report: None,
                warning: Some(w),
            });
            continue;
        }
        let (report, _) = train(model_cfg, &data, cfg, rt)?;
        out.push(SweepEntry {
            fraction,
            report: Some(report),
            warning: None,
        });
    }
    Ok(out)
}

pub fn check_fractions(fractions: &[f64]) -> Result<()> {
    if fractions.is_empty() {
        return Err(config("fractions must not be empty"));
    }
    if fractions.iter().any(|f| !(*f > 0.0 && *f <= 1.0)) {
        return Err(config("fractions must lie in (0, 1]"));
    }
    if fractions.windows(2).any(|w| !(w[0] < w[1])) {
        return Err(config("fractions must be sorted ascending"));
    }
    Ok(())
}

/// Reason to skip a fraction whose training subset cannot be trained on.
pub fn fraction_warning(task: Task, data: &Prepared, fraction: f64) -> Option<String> {
    if task != Task::Classify {
        return None;
    }
    let pos = Prepared::positives(&data.train);
    if pos == 0 {
        Some(format!("fraction {fraction}: training subset has no positive window; skipped"))
    } else if pos == data.train.len() {
        Some(format!("fraction {fraction}: training subset has no negative window; skipped"))
    } else {
        None
    }
}

/// Mean diagonal-band mass of the masked-row attention of `layer`, over
/// windows and heads.
pub fn masked_band_mass<R: Runtime>(model: &SatModel, windows: &[Window], layer: usize, w: usize, rt: &R) -> Result<f64> {
    if windows.is_empty() {
        return Err(contract("no windows"));
    }
    let per: Vec<Result<f64>> = rt.map(windows.len(), &|i| {
        let heads = model.masked_attention(&windows[i], layer)?;
        let mut s = 0.0;
        for a in &heads {
            s += diag_band_mass(a, w)?;
        }
        Ok(s / heads.len() as f64)
    });
    let v: Vec<f64> = per.into_iter().collect::<Result<_>>()?;
    Ok(v.iter().sum::<f64>() / v.len() as f64)
}

/// Head diversity averaged over windows and layers.
pub fn model_head_diversity<R: Runtime>(model: &SatModel, windows: &[Window], rt: &R) -> Result<f64> {
    let snaps: Vec<Result<Vec<Vec<Matrix>>>> = rt.map(windows.len(), &|i| model.attention_snapshot(&windows[i]));
    let mut all = Vec::new();
    for s in snaps {
        all.extend(s?);
    }
    head_diversity(&all)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub mean_ms: f64,
    pub std_ms: f64,
    pub iterations: usize,
}

impl Timing {
    pub fn cv(&self) -> f64 {
        self.std_ms / self.mean_ms
    }
}

/// Mean wall-clock time of full training iterations (forward, backward and
/// optimizer step) on consecutive batches of `windows`.
pub fn time_per_iteration<R: Runtime>(
    model: &SatModel,
    windows: &[Window],
    batch_size: usize,
    iterations: usize,
    warmup: usize,
    rt: &R,
) -> Result<Timing> {
    if iterations < 10 || warmup < 3 {
        return Err(config("timing needs at least 10 iterations after 3 warmup iterations"));
    }
    if windows.is_empty() || batch_size == 0 {
        return Err(contract("timing needs windows and a positive batch size"));
    }
    if rt.now_ms().is_none() {
        return Err(contract("runtime has no clock"));
    }
    let mut model = model.clone();
    let mut opt = OptimizerState::adam(model.params(), 1e-4);
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let mut times = Vec::with_capacity(iterations);
    let mut cursor = 0;
    for it in 0..warmup + iterations {
        let mut batch = Vec::with_capacity(batch_size);
        while batch.len() < batch_size {
            let w = &windows[cursor % windows.len()];
            cursor += 1;
            let target = match model.config().task {
                Task::Classify => Target::Label(f64::from(w.label)),
                Task::Masked => match random_position(w, &mut rng) {
                    Some(p) => Target::Masked(p),
                    None => continue,
                },
            };
            batch.push((w, target));
        }
        let a = rt.now_ms().expect("clock checked");
        train_step(&mut model, &mut opt, &batch, rt, (0, it))?;
        let z = rt.now_ms().expect("clock checked");
        if it >= warmup {
            times.push(z - a);
        }
    }
    let (mean_ms, std) = mean_std(&times);
    Ok(Timing {
        mean_ms,
        std_ms: std.unwrap_or(0.0),
        iterations,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::{KernelMode, KernelSpec};
    use crate::synth::{synth_generate, SynthConfig};

    fn tiny_data(seed: u64) -> (SeriesDataset, PrepareConfig) {
        let s = synth_generate(&SynthConfig {
            n_samples: 80,
            window: 8,
            channels: 2,
            seed,
            positive_rate: 0.3,
            ..SynthConfig::default()
        })
        .unwrap();
        (
            s.dataset,
            PrepareConfig {
                window: 8,
                split_seed: seed,
                fraction: 1.0,
            },
        )
    }

    fn tiny_model() -> ModelConfig {
        ModelConfig {
            layers: 1,
            heads: 2,
            d_k: 4,
            d_ff: 8,
            kernel: KernelSpec::new(KernelMode::Both),
            ..ModelConfig::classifier(2, 8)
        }
    }

    fn tiny_train() -> TrainConfig {
        TrainConfig {
            epochs: 3,
            patience: 5,
            batch_size: 8,
            lr: 1e-2,
            seeds: alloc::vec![4],
            ..TrainConfig::default()
        }
    }

    #[test]
    fn constant_loss_with_patience_one_stops_after_two_epochs() {
        let (ds, prep) = tiny_data(1);
        let data = prepare(&ds, &prep).unwrap();
        let cfg = TrainConfig {
            lr: 0.0,
            kernel_lr_scale: 0.0,
            patience: 1,
            epochs: 10,
            ..tiny_train()
        };
        let (r, _) = train_seed(&tiny_model(), &data, &cfg, 3, &Sequential).unwrap();
        assert_eq!(r.epochs.len(), 2);
        assert_eq!(r.epochs[0].val_score, r.epochs[1].val_score);
        assert_eq!(r.best_epoch, 1);
    }

    #[test]
    fn training_is_deterministic() {
        let (ds, prep) = tiny_data(2);
        let data = prepare(&ds, &prep).unwrap();
        let (a, ma) = train(&tiny_model(), &data, &tiny_train(), &Sequential).unwrap();
        let (b, mb) = train(&tiny_model(), &data, &tiny_train(), &Sequential).unwrap();
        assert_eq!(a, b);
        assert_eq!(ma, mb);
        assert!(a.auprc.unwrap().std.is_none());
    }

    #[test]
    fn best_weights_are_restored() {
        let (ds, prep) = tiny_data(3);
        let data = prepare(&ds, &prep).unwrap();
        let cfg = TrainConfig {
            epochs: 6,
            ..tiny_train()
        };
        let (r, m) = train_seed(&tiny_model(), &data, &cfg, 5, &Sequential).unwrap();
        let best = r.epochs.iter().map(|e| e.val_score).fold(f64::NEG_INFINITY, f64::max);
        assert_eq!(r.best_val, best);
        assert_eq!(val_score(&m, &data.val, &Sequential).unwrap(), best);
        let m2 = evaluate(&m, &data.test, &Sequential).unwrap();
        assert_eq!(m2, r.test);
    }

    #[test]
    fn divergent_training_reports_epoch_and_batch() {
        let (ds, prep) = tiny_data(4);
        let data = prepare(&ds, &prep).unwrap();
        let cfg = TrainConfig {
            lr: 1e300,
            optimizer: OptimizerKind::Sgd,
            ..tiny_train()
        };
        let err = train_seed(&tiny_model(), &data, &cfg, 0, &Sequential).unwrap_err();
        assert!(
            matches!(err, Error::NonFiniteLoss { .. } | Error::NonFiniteGradient(_)),
            "{err}"
        );
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig { patience: 0, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig { seeds: alloc::vec![], ..TrainConfig::default() }.validate().is_err());
        assert!(check_fractions(&[0.1, 0.05]).is_err());
        assert!(check_fractions(&[0.0, 0.5]).is_err());
        assert!(check_fractions(&[0.01, 0.1, 0.5, 1.0]).is_ok());
    }

    #[test]
    fn full_fraction_sweep_equals_plain_training() {
        let (ds, prep) = tiny_data(5);
        let sweep = fraction_sweep(&ds, &prep, &[1.0], &tiny_model(), &tiny_train(), &Sequential).unwrap();
        let data = prepare(&ds, &prep).unwrap();
        let (plain, _) = train(&tiny_model(), &data, &tiny_train(), &Sequential).unwrap();
        assert_eq!(sweep[0].report.as_ref().unwrap(), &plain);
    }

    #[test]
    fn fraction_without_positives_is_skipped() {
        let (ds, prep) = tiny_data(6);
        let sweep = fraction_sweep(&ds, &prep, &[0.01], &tiny_model(), &tiny_train(), &Sequential).unwrap();
        assert!(sweep[0].report.is_none());
        assert!(sweep[0].warning.as_ref().unwrap().contains("skipped"));
    }

    #[test]
    fn summaries_report_std_and_se() {
        let s = Summary::of(&[1.0, 2.0, 3.0]).unwrap();
        assert_eq!(s.std, Some(1.0));
        assert!((s.se.unwrap() - 1.0 / libm::sqrt(3.0)).abs() < 1e-15);
    }
}
