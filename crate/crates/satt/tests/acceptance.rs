//! Acceptance suite. Each test prints one `PASS`/`FAIL` line for its
//! criterion. Criteria 7 and 9 are soft: a miss prints `FAIL (soft)` with
//! the measured numbers and does not abort the run.
//!
//! Tests hold a shared lock so the timing criterion never competes with a
//! training run for the CPU.

use std::io::Write;
use std::path::Path;
use std::sync::{Mutex, MutexGuard};
use std::time::Instant;

use proptest::prelude::*;
use proptest::test_runner::{Config as PtConfig, TestCaseError, TestRunner};

use satt::cli::bench_rows;
use satt::config::RunConfig;
use satt::runtime::Threaded;
use satt_core::attention::{elementwise_attention, vectorized_qk_attention, AttentionHeadParams};
use satt_core::data::{prepare, PrepareConfig, Window};
use satt_core::gradcheck::check_all;
use satt_core::kernels::{exp_kernel_matrix, periodic_kernel_matrix, KernelApply, KernelMode, KernelParams, KernelSpec};
use satt_core::metrics::{auprc, auroc};
use satt_core::model::{multi_head_attention, EncoderBlockParams, ModelConfig, SatModel, Target};
use satt_core::synth::{synth_generate, SynthConfig};
use satt_core::train::{masked_band_mass, model_head_diversity, train, TrainConfig};
use satt_core::Matrix;

static LOCK: Mutex<()> = Mutex::new(());

fn lock() -> MutexGuard<'static, ()> {
    LOCK.lock().unwrap_or_else(|e| e.into_inner())
}

/// Written straight to the process stdout so the line survives test capture.
fn report(id: u32, name: &str, pass: bool, soft: bool, detail: &str) {
    let verdict = match (pass, soft) {
        (true, _) => "PASS",
        (false, false) => "FAIL",
        (false, true) => "FAIL (soft)",
    };
    let line = format!("[criterion {id:>2}] {verdict}: {name}: {detail}\n");
    let mut out = std::io::stdout().lock();
    let _ = out.write_all(line.as_bytes());
    let _ = out.flush();
}

struct SplitMix(u64);

impl SplitMix {
    fn next(&mut self) -> u64 {
        self.0 = self.0.wrapping_add(0x9e37_79b9_7f4a_7c15);
        let mut z = self.0;
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^ (z >> 31)
    }

    fn uniform(&mut self) -> f64 {
        (self.next() >> 11) as f64 / (1u64 << 53) as f64
    }

    fn sym(&mut self, scale: f64) -> f64 {
        (2.0 * self.uniform() - 1.0) * scale
    }

    fn matrix(&mut self, r: usize, c: usize, scale: f64) -> Matrix {
        Matrix::from_fn(r, c, |_, _| self.sym(scale))
    }
}

// -- 1 ----------------------------------------------------------------------

fn scalar_exp(h: f64, a: f64, b: f64) -> f64 {
    (-(a * h).powf(b)).exp()
}

fn scalar_periodic(h: f64, a: f64, b: f64) -> f64 {
    let s = (std::f64::consts::PI * h / b).sin();
    (-2.0 * a * a * s * s).exp()
}

fn kernel_invariants(t: usize, m: &Matrix) -> Result<(), TestCaseError> {
    for i in 0..t {
        prop_assert_eq!(m[(i, i)], 1.0);
        for j in 0..t {
            prop_assert_eq!(m[(i, j)], m[(j, i)]);
            prop_assert!(m[(i, j)] > 0.0 && m[(i, j)] <= 1.0, "entry {} out of (0, 1]", m[(i, j)]);
        }
    }
    Ok(())
}

#[test]
fn criterion_01_kernel_correctness() {
    let _g = lock();
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    let alphas = [1e-3, 0.01, 0.1, 0.3, 0.5, 1.0, 2.0];
    let betas = [0.25, 0.5, 1.0, 1.5, 2.0, 3.0];
    let periods = [1.5, 2.0, 3.7, 7.0, 12.0, 24.0];
    let t = 24;
    for &a in &alphas {
        for &b in &betas {
            let m = exp_kernel_matrix(t, a, b).unwrap();
            for i in 0..t {
                for j in 0..t {
                    let h = i.abs_diff(j) as f64;
                    worst = worst.max((m[(i, j)] - scalar_exp(h, a, b)).abs());
                }
            }
        }
        for &p in &periods {
            let m = periodic_kernel_matrix(t, a, p).unwrap();
            for i in 0..t {
                for j in 0..t {
                    let h = i.abs_diff(j) as f64;
                    worst = worst.max((m[(i, j)] - scalar_periodic(h, a, p)).abs());
                }
            }
        }
    }
    let grid_ok = worst <= 1e-12;

    let mut runner = TestRunner::new(PtConfig::with_cases(1000));
    let exp_cases = runner.run(&(1usize..=32, 1e-3f64..1.0, 0.2f64..2.5), |(t, a, b)| {
        // keep the largest lag clear of exp underflow
        prop_assume!((a * (t - 1) as f64).powf(b) < 600.0);
        let m = exp_kernel_matrix(t, a, b).unwrap();
        kernel_invariants(t, &m)?;
        for i in 1..t {
            prop_assert!(m[(0, i)] <= m[(0, i - 1)], "exponential kernel must not grow with lag");
        }
        Ok(())
    });
    let mut runner = TestRunner::new(PtConfig::with_cases(1000));
    let per_cases = runner.run(&(1usize..=32, 0.0f64..3.0, 2usize..12), |(t, a, p)| {
        let m = periodic_kernel_matrix(t, a, p as f64).unwrap();
        kernel_invariants(t, &m)?;
        for i in 0..t {
            for j in 0..t.saturating_sub(p) {
                prop_assert!((m[(i, j)] - m[(i, j + p)]).abs() < 1e-12, "not periodic at ({}, {})", i, j);
            }
        }
        Ok(())
    });
    let secs = start.elapsed().as_secs_f64();
    let pass = grid_ok && exp_cases.is_ok() && per_cases.is_ok() && secs < 5.0;
    report(
        1,
        "kernel correctness",
        pass,
        false,
        &format!(
            "max grid error {worst:.2e} (tol 1e-12), exp properties {}, periodic properties {}, {secs:.2}s",
            if exp_cases.is_ok() { "ok" } else { "failed" },
            if per_cases.is_ok() { "ok" } else { "failed" }
        ),
    );
    exp_cases.unwrap();
    per_cases.unwrap();
    assert!(grid_ok, "scalar mismatch {worst}");
    assert!(secs < 5.0, "took {secs}s");
}

// -- 2 ----------------------------------------------------------------------

/// Row-major `a (m×k) · b (k×n)`.
fn ref_matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        for p in 0..k {
            for j in 0..n {
                c[i * n + j] += a[i * k + p] * b[p * n + j];
            }
        }
    }
    c
}

/// Plain scaled dot-product multi-head attention with output projection.
fn reference_attention(h: &Matrix, block: &EncoderBlockParams) -> (Vec<f64>, Vec<Vec<f64>>) {
    let t = h.rows();
    let d = h.cols();
    let dk = block.heads[0].d_k();
    let nh = block.heads.len();
    let mut cat = vec![0.0; t * nh * dk];
    let mut atts = Vec::new();
    for (hi, head) in block.heads.iter().enumerate() {
        let q = ref_matmul(h.as_slice(), head.w_query.as_slice(), t, d, dk);
        let k = ref_matmul(h.as_slice(), head.w_key.as_slice(), t, d, dk);
        let v = ref_matmul(h.as_slice(), head.w_value.as_slice(), t, d, dk);
        let inv = 1.0 / (dk as f64).sqrt();
        let mut a = vec![0.0; t * t];
        for i in 0..t {
            for j in 0..t {
                let mut acc = 0.0;
                for p in 0..dk {
                    acc += q[i * dk + p] * k[j * dk + p];
                }
                a[i * t + j] = acc * inv;
            }
            let row = &mut a[i * t..(i + 1) * t];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for x in row.iter_mut() {
                *x = libm::exp(*x - max);
                sum += *x;
            }
            for x in row.iter_mut() {
                *x /= sum;
            }
        }
        let o = ref_matmul(&a, &v, t, t, dk);
        for i in 0..t {
            cat[i * nh * dk + hi * dk..i * nh * dk + (hi + 1) * dk].copy_from_slice(&o[i * dk..(i + 1) * dk]);
        }
        atts.push(a);
    }
    let mut out = ref_matmul(&cat, block.w_out.as_slice(), t, nh * dk, d);
    for i in 0..t {
        for j in 0..d {
            out[i * d + j] += block.b_out.as_slice()[j];
        }
    }
    (out, atts)
}

fn random_block(rng: &mut SplitMix, d: usize, dk: usize, heads: usize, kernel: KernelParams) -> EncoderBlockParams {
    EncoderBlockParams {
        heads: (0..heads)
            .map(|_| AttentionHeadParams {
                w_query: rng.matrix(d, dk, 0.8),
                w_key: rng.matrix(d, dk, 0.8),
                w_value: rng.matrix(d, dk, 0.8),
                kernel,
            })
            .collect(),
        w_out: rng.matrix(heads * dk, d, 0.5),
        b_out: rng.matrix(1, d, 0.5),
        ln1_gain: Matrix::from_fn(1, d, |_, _| 1.0),
        ln1_bias: Matrix::zeros(1, d),
        ln2_gain: Matrix::from_fn(1, d, |_, _| 1.0),
        ln2_bias: Matrix::zeros(1, d),
        ff_w1: rng.matrix(d, 4, 0.5),
        ff_b1: Matrix::zeros(1, 4),
        ff_w2: rng.matrix(4, d, 0.5),
        ff_b2: Matrix::zeros(1, d),
    }
}

#[test]
fn criterion_02_vanilla_reduction() {
    let _g = lock();
    let start = Instant::now();
    let vanishing = KernelParams {
        exp_alpha: 1e-300,
        exp_beta: 1.0,
        per_alpha: 1e-300,
        per_beta: 12.0,
    };
    let mut runner = TestRunner::new(PtConfig::with_cases(100));
    let result = runner.run(&(1usize..=32, 1usize..=32, 1usize..=2, any::<u64>()), |(t, dk, heads, seed)| {
        let mut rng = SplitMix(seed);
        let d = heads * dk;
        let kernel = KernelParams::near_flat(t, 12.0);
        let block = random_block(&mut rng, d, dk, heads, kernel);
        let h = rng.matrix(t, d, 1.5);
        let (expected, atts) = reference_attention(&h, &block);
        let none = multi_head_attention(&h, &block, &KernelSpec::VANILLA).unwrap();
        prop_assert!(
            none.as_slice().iter().zip(&expected).all(|(a, b)| a.to_bits() == b.to_bits()),
            "mode none differs from the reference"
        );
        let head0 = satt_core::attention::attention_scores(&h, &block.heads[0], &KernelSpec::VANILLA).unwrap();
        prop_assert!(head0.attention.as_slice().iter().zip(&atts[0]).all(|(a, b)| a.to_bits() == b.to_bits()));

        // α → 0: both kernels evaluate to exactly one
        let mut flat = block.clone();
        for hp in &mut flat.heads {
            hp.kernel = vanishing;
        }
        let both = multi_head_attention(&h, &flat, &KernelSpec::new(KernelMode::Both)).unwrap();
        prop_assert!(
            both.as_slice().iter().zip(&expected).all(|(a, b)| a.to_bits() == b.to_bits()),
            "vanishing kernels differ from the reference"
        );
        Ok(())
    });
    let secs = start.elapsed().as_secs_f64();
    let pass = result.is_ok() && secs < 10.0;
    report(
        2,
        "vanilla reduction",
        pass,
        false,
        &format!(
            "100 random configs (T, d_k <= 32), bitwise {}, {secs:.2}s",
            if result.is_ok() { "equal" } else { "mismatch" }
        ),
    );
    result.unwrap();
    assert!(secs < 10.0);
}

// -- 3 ----------------------------------------------------------------------

#[test]
fn criterion_03_formulation_equivalence() {
    let _g = lock();
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    let mut rng = SplitMix(33);
    let mut cases = 0;
    for &t in &[2usize, 4, 8, 16] {
        for _ in 0..50 {
            let q = rng.matrix(t, t, 2.0);
            let k = rng.matrix(t, t, 2.0);
            let p = KernelParams {
                exp_alpha: 0.01 + rng.uniform(),
                exp_beta: 0.3 + 1.7 * rng.uniform(),
                per_alpha: 2.0 * rng.uniform(),
                per_beta: 1.0 + 20.0 * rng.uniform(),
            };
            for mode in [KernelMode::Exp, KernelMode::Periodic, KernelMode::Both] {
                let a = elementwise_attention(&q, &k, &p, mode).unwrap();
                let b = vectorized_qk_attention(&q, &k, &p, mode).unwrap();
                worst = worst.max(a.max_abs_diff(&b));
                cases += 1;
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    let pass = worst <= 1e-12 && secs < 10.0;
    report(
        3,
        "element-wise vs vectorized",
        pass,
        false,
        &format!("{cases} cases, max |diff| {worst:.2e} (tol 1e-12), {secs:.2}s"),
    );
    assert!(pass);
}

// -- 4 ----------------------------------------------------------------------

fn gradcheck_model(mut cfg: ModelConfig, seed: u64, h: f64) -> (usize, f64, String) {
    let mut rng = SplitMix(seed);
    cfg.layers = 2;
    cfg.heads = 2;
    let mut m = SatModel::new(cfg, seed).unwrap();
    for p in m.params_mut().iter_mut() {
        if p.name.contains("kernel") {
            let noise = rng.matrix(p.value.rows(), p.value.cols(), 0.05);
            p.value = p.value.add(&noise).unwrap();
            if p.name.ends_with("raw") || p.name.ends_with("adaptive_b") {
                p.value[(0, 0)] = -0.5 + rng.uniform();
                p.value[(0, 3)] = 0.5 + rng.uniform();
            }
        }
    }
    let (t, c) = (m.config().window, m.config().channels);
    let mut w = Window {
        values: rng.matrix(t, c, 1.5),
        mask: Matrix::from_fn(t, c, |i, j| if (i + 2 * j) % 5 == 3 { 0.0 } else { 1.0 }),
        timestamps: (0..t).map(|i| 0.5 * i as f64 + 0.1 * rng.uniform()).collect(),
        label: 1,
        series_id: "g".into(),
    };
    let target = match m.config().task {
        satt_core::model::Task::Classify => Target::Label(1.0),
        satt_core::model::Task::Masked => {
            w.mask.row_mut(2).fill(1.0);
            Target::Masked(2)
        }
    };
    let (_, grads) = m.loss_and_grads(&w, target).unwrap();
    let checks = check_all(m.params(), &grads, h, |s| {
        let (f, l) = m.loss_with(s, &w, target).unwrap();
        f.graph.value(l)[(0, 0)]
    });
    let worst = checks
        .iter()
        .max_by(|a, b| a.max_relative_error.total_cmp(&b.max_relative_error))
        .unwrap();
    (checks.len(), worst.max_relative_error, worst.name.clone())
}

#[test]
fn criterion_04_gradient_fidelity() {
    let _g = lock();
    let start = Instant::now();
    let base = |mode, apply, adaptive, dk| {
        let mut c = ModelConfig::classifier(2, 6);
        c.d_k = dk;
        c.d_ff = 5;
        c.kernel = KernelSpec { mode, apply, adaptive };
        c
    };
    let mut masked = ModelConfig::probe(2, 6);
    masked.d_k = 3;
    masked.d_ff = 5;
    masked.kernel = KernelSpec {
        mode: KernelMode::Both,
        apply: KernelApply::Score,
        adaptive: true,
    };
    let configs = [
        ("both/score", base(KernelMode::Both, KernelApply::Score, false, 3)),
        ("both/score/adaptive", base(KernelMode::Both, KernelApply::Score, true, 3)),
        ("both/qk/adaptive", base(KernelMode::Both, KernelApply::Qk, true, 6)),
    ];
    let mut lines = Vec::new();
    let mut pass = true;
    let mut total = 0;
    for (i, (name, cfg)) in configs.into_iter().enumerate() {
        let (n, err, at) = gradcheck_model(cfg, 40 + i as u64, 1e-6);
        total += n;
        pass &= err < 1e-5;
        lines.push(format!("{name}: worst {err:.1e} at {at}"));
    }
    // The masked head adds the mask token. Its squared-error loss is large
    // enough at a random point that h = 1e-6 differences sit near round-off,
    // so it is reported at both steps and held to the tolerance at h = 1e-5.
    let (n, fine, at_fine) = gradcheck_model(masked.clone(), 43, 1e-6);
    let (_, coarse, at_coarse) = gradcheck_model(masked, 43, 1e-5);
    total += n;
    let masked_ok = coarse < 1e-5;
    lines.push(format!(
        "masked both/adaptive (extra): worst {fine:.1e} at {at_fine} with h=1e-6, {coarse:.1e} at {at_coarse} with h=1e-5"
    ));
    let secs = start.elapsed().as_secs_f64();
    pass &= secs < 60.0;
    report(
        4,
        "gradient fidelity",
        pass,
        false,
        &format!("{total} parameter tensors; {}; {secs:.1}s", lines.join("; ")),
    );
    assert!(pass, "{lines:?}");
    assert!(masked_ok, "{lines:?}");
}

// -- 5 ----------------------------------------------------------------------

fn brute_auprc(s: &[f64], y: &[u8]) -> f64 {
    let pos = y.iter().filter(|&&l| l == 1).count();
    let mut thresholds: Vec<f64> = s.to_vec();
    thresholds.sort_by(|a, b| b.total_cmp(a));
    thresholds.dedup();
    let mut area = 0.0;
    let mut tp_prev = 0;
    for &tau in &thresholds {
        let tp = (0..s.len()).filter(|&i| s[i] >= tau && y[i] == 1).count();
        let fp = (0..s.len()).filter(|&i| s[i] >= tau && y[i] == 0).count();
        if tp > tp_prev {
            area += (tp - tp_prev) as f64 / pos as f64 * (tp as f64 / (tp + fp) as f64);
        }
        tp_prev = tp;
    }
    area
}

fn brute_auroc(s: &[f64], y: &[u8]) -> f64 {
    let pos: Vec<f64> = (0..s.len()).filter(|&i| y[i] == 1).map(|i| s[i]).collect();
    let neg: Vec<f64> = (0..s.len()).filter(|&i| y[i] == 0).map(|i| s[i]).collect();
    let mut twice = 0u64;
    for &p in &pos {
        for &n in &neg {
            twice += if p > n {
                2
            } else if p == n {
                1
            } else {
                0
            };
        }
    }
    twice as f64 / (2 * pos.len() * neg.len()) as f64
}

#[test]
fn criterion_05_metric_oracles() {
    let _g = lock();
    let mut rng = SplitMix(5);
    let mut checked = 0usize;
    let mut mismatches = 0usize;
    for n in 2..=12usize {
        for pattern in 1u32..(1 << n) - 1 {
            let y: Vec<u8> = (0..n).map(|i| ((pattern >> i) & 1) as u8).collect();
            // coarse scores exercise ties, fine scores the tie-free path
            for coarse in [true, false] {
                let s: Vec<f64> = (0..n)
                    .map(|_| if coarse { (rng.next() % 4) as f64 } else { rng.uniform() })
                    .collect();
                checked += 1;
                let pr = auprc(&s, &y).unwrap();
                let roc = auroc(&s, &y).unwrap();
                if pr.to_bits() != brute_auprc(&s, &y).to_bits() || roc.to_bits() != brute_auroc(&s, &y).to_bits() {
                    mismatches += 1;
                }
            }
        }
    }
    let n = 100_000;
    let y: Vec<u8> = (0..n).map(|i| u8::from(i % 10 == 0)).collect();
    let s: Vec<f64> = (0..n).map(|_| rng.uniform()).collect();
    let base = auprc(&s, &y).unwrap();
    let base_ok = (base - 0.10).abs() <= 0.01;
    let pass = mismatches == 0 && base_ok;
    report(
        5,
        "metric oracles",
        pass,
        false,
        &format!("{checked} exhaustive cases, {mismatches} mismatches; random-score AUPRC {base:.4} at prevalence 0.10"),
    );
    assert!(pass);
}

// -- 6 ----------------------------------------------------------------------

#[test]
fn criterion_06_probe_attention_trend() {
    let _g = lock();
    let start = Instant::now();
    let rt = Threaded::from_env();
    let (t, fractions) = (24, [0.01, 0.1, 0.5, 1.0]);
    let mut increasing = 0;
    let mut lines = Vec::new();
    for seed in 0..3u64 {
        let ds = synth_generate(&SynthConfig {
            n_samples: 2000,
            window: t,
            channels: 1,
            seed: 100 + seed,
            ar_coeff: 0.9,
            amplitude: 0.0,
            missing_rate: 0.0,
            positive_rate: 0.5,
            ..Default::default()
        })
        .unwrap()
        .dataset;
        let mut masses = Vec::new();
        for f in fractions {
            let data = prepare(
                &ds,
                &PrepareConfig {
                    window: t,
                    split_seed: seed,
                    fraction: f,
                },
            )
            .unwrap();
            let tc = TrainConfig {
                epochs: 40,
                lr: 3e-3,
                batch_size: 16,
                seeds: vec![seed],
                ..TrainConfig::probe()
            };
            let (_, m) = satt_core::train::train_seed(&ModelConfig::probe(1, t), &data, &tc, seed, &rt).unwrap();
            let probe = &data.test[..32.min(data.test.len())];
            masses.push(masked_band_mass(&m, probe, 0, 2, &rt).unwrap());
        }
        if masses.windows(2).all(|p| p[1] > p[0]) {
            increasing += 1;
        }
        lines.push(format!(
            "seed {seed}: {}",
            masses.iter().map(|m| format!("{m:.3}")).collect::<Vec<_>>().join(" < ")
        ));
    }
    let secs = start.elapsed().as_secs_f64();
    let pass = increasing >= 2 && secs < 900.0;
    report(
        6,
        "probe band mass grows with data",
        pass,
        false,
        &format!(
            "{increasing}/3 seeds strictly increasing over 1/10/50/100%; {}; {secs:.0}s",
            lines.join("; ")
        ),
    );
    assert!(pass, "{lines:?}");
}

// -- 7 and 9 ----------------------------------------------------------------

struct PriorRun {
    auprc: [[f64; 2]; 2],
    diversity: [f64; 2],
    secs: f64,
}

/// `auprc[fraction][mode]` with fraction 10%, 100% and mode vanilla, both;
/// head diversity of the 100% models.
fn temporal_prior_run() -> PriorRun {
    let start = Instant::now();
    let rt = Threaded::from_env();
    let t = 32;
    let ds = synth_generate(&SynthConfig {
        n_samples: 4000,
        window: t,
        seed: 7,
        ..Default::default()
    })
    .unwrap()
    .dataset;
    let mut out = PriorRun {
        auprc: [[0.0; 2]; 2],
        diversity: [0.0; 2],
        secs: 0.0,
    };
    for (fi, f) in [0.1, 1.0].into_iter().enumerate() {
        let data = prepare(
            &ds,
            &PrepareConfig {
                window: t,
                split_seed: 0,
                fraction: f,
            },
        )
        .unwrap();
        for (mi, mode) in [KernelMode::None, KernelMode::Both].into_iter().enumerate() {
            let mut mc = ModelConfig::classifier(ds.num_channels(), t);
            mc.layers = 2;
            mc.kernel = KernelSpec::new(mode);
            let tc = TrainConfig {
                epochs: 30,
                patience: 10,
                ..TrainConfig::default()
            };
            let (r, models) = train(&mc, &data, &tc, &rt).unwrap();
            out.auprc[fi][mi] = r.auprc.unwrap().mean;
            if fi == 1 {
                let probe = &data.test[..32];
                out.diversity[mi] = models
                    .iter()
                    .map(|m| model_head_diversity(m, probe, &rt).unwrap())
                    .sum::<f64>()
                    / models.len() as f64;
            }
        }
    }
    out.secs = start.elapsed().as_secs_f64();
    out
}

#[test]
fn criterion_07_09_temporal_prior_and_head_diversity() {
    let _g = lock();
    let r = temporal_prior_run();
    let gap10 = r.auprc[0][1] - r.auprc[0][0];
    let gap100 = r.auprc[1][1] - r.auprc[1][0];
    let pass7 = gap10 >= 0.02 && gap100 >= 0.0 && r.secs < 1800.0;
    report(
        7,
        "temporal prior benefit",
        pass7,
        true,
        &format!(
            "10%: SAT {:.4} vs vanilla {:.4} (gap {:+.4}, need >= +0.02); 100%: SAT {:.4} vs vanilla {:.4} (gap {:+.4}); {:.0}s",
            r.auprc[0][1], r.auprc[0][0], gap10, r.auprc[1][1], r.auprc[1][0], gap100, r.secs
        ),
    );
    let pass9 = r.diversity[1] > r.diversity[0];
    report(
        9,
        "head diversity",
        pass9,
        true,
        &format!("SAT {:.4} vs vanilla {:.4} (100% models, 3-seed mean)", r.diversity[1], r.diversity[0]),
    );
    assert!(r.secs < 1800.0, "took {}s", r.secs);
}

// -- 8 ----------------------------------------------------------------------

#[test]
fn criterion_08_efficiency() {
    let _g = lock();
    let mut cfg = RunConfig {
        bench_iters: 100,
        bench_warmup: 5,
        ..RunConfig::default()
    };
    let ds = synth_generate(&SynthConfig {
        n_samples: 200,
        window: cfg.model.window,
        ..Default::default()
    })
    .unwrap()
    .dataset;
    cfg.model.channels = ds.num_channels();
    let data = prepare(
        &ds,
        &PrepareConfig {
            window: cfg.model.window,
            split_seed: 0,
            fraction: 1.0,
        },
    )
    .unwrap();
    let rows = bench_rows(&cfg, &data.train).unwrap();
    let sat = rows.iter().find(|r| r.name == "sat-score").unwrap();
    let pass = sat.ratio <= 1.5 && sat.timing.iterations >= 100;
    report(
        8,
        "efficiency",
        pass,
        false,
        &format!(
            "vanilla {:.2} ms/iter, sat-score {:.2} ms/iter, ratio {:.3} (limit 1.5), {} iterations",
            rows[0].timing.mean_ms, sat.timing.mean_ms, sat.ratio, sat.timing.iterations
        ),
    );
    assert!(pass);
}

// -- 10 ---------------------------------------------------------------------

fn seed_metrics(path: &Path) -> Vec<(u64, u64)> {
    let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap();
    v["seeds"]
        .as_array()
        .unwrap()
        .iter()
        .map(|s| {
            (
                s["test"]["auprc"].as_f64().unwrap().to_bits(),
                s["test"]["auroc"].as_f64().unwrap().to_bits(),
            )
        })
        .collect()
}

#[test]
fn criterion_10_manifest_rerun() {
    let _g = lock();
    let dir = tempfile::tempdir().unwrap();
    let p = |s: &str| dir.path().join(s).to_str().unwrap().to_string();
    std::fs::write(p("synth.cfg"), "n_samples = 300\nwindow = 16\nseed = 3\n").unwrap();
    std::fs::write(
        p("run.cfg"),
        "window = 16\nlayers = 1\nepochs = 3\nkernel = both\nadaptive = true\n",
    )
    .unwrap();
    assert_eq!(satt::cli::run(["satt", "synth", "--config", &p("synth.cfg"), "--out", &p("data.csv")]), 0);
    assert_eq!(
        satt::cli::run(["satt", "train", "--data", &p("data.csv"), "--config", &p("run.cfg"), "--out", &p("a")]),
        0
    );
    let manifest = dir.path().join("a").join("manifest.json");
    assert_eq!(
        satt::cli::run(["satt", "train", "--manifest", manifest.to_str().unwrap(), "--out", &p("b")]),
        0
    );
    let a = seed_metrics(&dir.path().join("a/report.json"));
    let b = seed_metrics(&dir.path().join("b/report.json"));
    let pass = a == b && a.len() == 3;
    report(
        10,
        "reproducibility",
        pass,
        false,
        &format!("{} seeds, rerun metrics {}", a.len(), if a == b { "identical to the last bit" } else { "differ" }),
    );
    assert!(pass);
}
