use satt_core::data::{fraction_subset, prepare, PrepareConfig, Series, SeriesDataset};
use satt_core::kernels::{KernelMode, KernelSpec};
use satt_core::model::ModelConfig;
use satt_core::train::{train, train_seed, Sequential, TrainConfig};
use satt_core::Matrix;

fn dataset(n: usize, t: usize, value: impl Fn(usize, usize) -> f64, label: impl Fn(usize) -> u8) -> SeriesDataset {
    SeriesDataset {
        channels: vec!["x".into()],
        series: (0..n)
            .map(|i| {
                let mut labels = vec![None; t];
                labels[t - 1] = Some(label(i));
                Series {
                    id: format!("s{i:04}"),
                    timestamps: (0..t).map(|k| k as f64).collect(),
                    values: Matrix::from_fn(t, 1, |k, _| value(i, k)),
                    mask: Matrix::from_fn(t, 1, |_, _| 1.0),
                    labels,
                }
            })
            .collect(),
    }
}

#[test]
fn separable_task_is_learned() {
    let t = 8;
    // level of the last three steps decides the label
    let ds = dataset(
        300,
        t,
        |i, k| {
            let wobble = ((i * 31 + k * 7) % 11) as f64 / 11.0 - 0.5;
            let level = if k + 3 >= t { if i % 3 == 0 { 1.5 } else { -1.5 } } else { 0.0 };
            level + 0.3 * wobble
        },
        |i| u8::from(i % 3 == 0),
    );
    let data = prepare(
        &ds,
        &PrepareConfig {
            window: t,
            split_seed: 1,
            fraction: 1.0,
        },
    )
    .unwrap();
    let mut mc = ModelConfig::classifier(1, t);
    mc.layers = 1;
    mc.kernel = KernelSpec::new(KernelMode::Both);
    let cfg = TrainConfig {
        epochs: 15,
        patience: 15,
        lr: 3e-3,
        ..TrainConfig::default()
    };
    let (report, _) = train(&mc, &data, &cfg, &Sequential).unwrap();
    assert_eq!(report.seeds.len(), 3);
    for s in &report.seeds {
        let auroc = s.test.auroc.unwrap();
        assert!(auroc > 0.9, "seed {}: test AUROC {auroc}", s.seed);
    }
}

#[test]
fn masked_model_fits_constant_data() {
    let t = 6;
    let ds = dataset(60, t, |_, _| 7.0, |i| u8::from(i % 2 == 0));
    let data = prepare(
        &ds,
        &PrepareConfig {
            window: t,
            split_seed: 0,
            fraction: 1.0,
        },
    )
    .unwrap();
    // constant channel: std clamped to 1 with a warning
    assert_eq!(data.warnings.len(), 1);
    let cfg = TrainConfig {
        epochs: 60,
        patience: 60,
        lr: 1e-2,
        ..TrainConfig::probe()
    };
    let (report, _) = train_seed(&ModelConfig::probe(1, t), &data, &cfg, 0, &Sequential).unwrap();
    let mse = report.test.mse.unwrap();
    assert!(mse < 1e-3, "test MSE {mse}");
}

#[test]
fn fraction_subsets_are_nested() {
    let small = fraction_subset(500, 0.1, 9).unwrap();
    let large = fraction_subset(500, 0.5, 9).unwrap();
    assert_eq!(small.len(), 50);
    assert!(small.iter().all(|i| large.contains(i)));
    assert_eq!(fraction_subset(500, 1.0, 9).unwrap().len(), 500);
}
