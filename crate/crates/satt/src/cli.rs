use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::Context;
use clap::{Args, Parser, Subcommand, ValueEnum};

use satt_core::data::{prepare, split_windows, PrepareConfig, Prepared, SeriesDataset, Window};
use satt_core::kernels::{KernelApply, KernelMode, KernelSpec};
use satt_core::model::{SatModel, Task};
use satt_core::synth::synth_generate;
use satt_core::train::{
    evaluate, fraction_warning, masked_band_mass, time_per_iteration, train, train_seed, RunReport, Timing,
};

use crate::artifacts::{
    dump_model, read_json, write_json, Checkpoint, EvalMetrics, RunManifest, SweepCell, SweepManifest, TOOL_VERSION,
};
use crate::config::{parse_kv, synth_from_text, RunConfig};
use crate::csvio::{export_csv, load_csv};
use crate::error::CliError;
use crate::runtime::Threaded;

/// Windows used for the masked-row band statistic in sweeps.
const PROBE_WINDOWS: usize = 32;

#[derive(Debug, Parser)]
#[command(name = "satt", version, about = "Temporal-kernel self-attention experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Default, Args)]
pub struct RunFlags {
    /// Flat `key = value` configuration file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Split seed; also seeds the three training runs unless `seeds` is configured.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub kernel: Option<KernelMode>,
    #[arg(long = "kernel-apply")]
    pub kernel_apply: Option<KernelApply>,
    #[arg(long)]
    pub adaptive: bool,
    #[arg(long)]
    pub fraction: Option<f64>,
    #[arg(long)]
    pub layers: Option<usize>,
    #[arg(long)]
    pub heads: Option<usize>,
    #[arg(long)]
    pub dk: Option<usize>,
    #[arg(long)]
    pub window: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Train,
    Val,
    Test,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset CSV.
    Synth {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train one model per seed; writes checkpoints, a report and a manifest.
    Train {
        #[arg(long, required_unless_present = "manifest")]
        data: Option<PathBuf>,
        #[arg(long, required_unless_present = "manifest")]
        out: Option<PathBuf>,
        /// Rerun exactly from a previous run's manifest.
        #[arg(long, conflicts_with_all = ["config", "seed", "kernel", "kernel_apply", "adaptive", "fraction", "layers", "heads", "dk", "window"])]
        manifest: Option<PathBuf>,
        #[command(flatten)]
        flags: RunFlags,
    },
    /// Evaluate a checkpoint on one split of a dataset.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
        /// Metrics JSON path (printed to stdout when absent).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write attention and kernel files for one test window.
    Dump {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        index: usize,
    },
    /// Train over nested data fractions; resumable.
    Sweep {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Comma-separated, ascending.
        #[arg(long)]
        fractions: Option<String>,
        #[command(flatten)]
        flags: RunFlags,
    },
    /// Time training iterations of vanilla and kernel attention.
    Bench {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        flags: RunFlags,
    },
}

/// Parses arguments, runs the command and returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e:#}");
            e.exit_code()
        }
    }
}

pub fn execute(cmd: Command) -> Result<(), CliError> {
    match cmd {
        Command::Synth { config, out, seed } => cmd_synth(config.as_deref(), &out, seed),
        Command::Train {
            data,
            out,
            manifest,
            flags,
        } => match manifest {
            Some(m) => cmd_train_manifest(&m, out.as_deref()),
            None => {
                let cfg = resolve(&flags)?;
                cmd_train(&cfg, data.as_deref().expect("required"), out.as_deref().expect("required"))
            }
        },
        Command::Eval {
            checkpoint,
            data,
            split,
            out,
        } => cmd_eval(&checkpoint, &data, split, out.as_deref()),
        Command::Dump {
            checkpoint,
            data,
            out,
            index,
        } => cmd_dump(&checkpoint, &data, &out, index),
        Command::Sweep {
            data,
            out,
            fractions,
            flags,
        } => {
            let mut cfg = resolve(&flags)?;
            if let Some(f) = fractions {
                cfg.fractions = f
                    .split(',')
                    .map(|x| x.trim().parse::<f64>())
                    .collect::<Result<_, _>>()
                    .map_err(|e| CliError::Usage(format!("--fractions: {e}")))?;
            }
            cfg.validate()?;
            cmd_sweep(&cfg, &data, &out)
        }
        Command::Bench { data, out, flags } => {
            let cfg = resolve(&flags)?;
            cmd_bench(&cfg, data.as_deref(), out.as_deref())
        }
    }
}

fn read_text(path: &Path) -> Result<String, CliError> {
    fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

/// Configuration file, then command-line overrides.
pub fn resolve(flags: &RunFlags) -> Result<RunConfig, CliError> {
    let (mut cfg, seeds_set) = match &flags.config {
        Some(p) => {
            let text = read_text(p)?;
            let seeds_set = parse_kv(&text)?.iter().any(|e| e.key == "seeds");
            (RunConfig::from_text(&text)?, seeds_set)
        }
        None => (RunConfig::default(), false),
    };
    if let Some(s) = flags.seed {
        cfg.split_seed = s;
        if !seeds_set {
            cfg.train.seeds = vec![s, s.wrapping_add(1), s.wrapping_add(2)];
        }
    }
    if let Some(k) = flags.kernel {
        cfg.model.kernel.mode = k;
    }
    if let Some(a) = flags.kernel_apply {
        cfg.model.kernel.apply = a;
    }
    if flags.adaptive {
        cfg.model.kernel.adaptive = true;
    }
    if let Some(f) = flags.fraction {
        cfg.fraction = f;
    }
    if let Some(v) = flags.layers {
        cfg.model.layers = v;
    }
    if let Some(v) = flags.heads {
        cfg.model.heads = v;
    }
    if let Some(v) = flags.dk {
        cfg.model.d_k = v;
    }
    if let Some(v) = flags.window {
        cfg.model.window = v;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn load_data(path: &Path) -> Result<SeriesDataset, CliError> {
    Ok(load_csv(path)?)
}

fn create_dir(path: &Path) -> Result<(), CliError> {
    fs::create_dir_all(path).map_err(|e| CliError::io(path, e))
}

fn prep_config(cfg: &RunConfig, fraction: f64) -> PrepareConfig {
    PrepareConfig {
        window: cfg.model.window,
        split_seed: cfg.split_seed,
        fraction,
    }
}

fn bind_channels(cfg: &mut RunConfig, ds: &SeriesDataset) -> Result<(), CliError> {
    cfg.model.channels = ds.num_channels();
    cfg.model.validate()?;
    Ok(())
}

fn cmd_synth(config: Option<&Path>, out: &Path, seed: Option<u64>) -> Result<(), CliError> {
    let mut cfg = match config {
        Some(p) => synth_from_text(&read_text(p)?)?,
        None => Default::default(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let s = synth_generate(&cfg)?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    export_csv(&s.dataset, out)?;
    let pos = s.dataset.series.iter().filter(|x| x.labels.last() == Some(&Some(1))).count();
    println!(
        "wrote {} ({} samples × {} steps, {} positive, threshold {})",
        out.display(),
        cfg.n_samples,
        cfg.window,
        pos,
        s.threshold
    );
    Ok(())
}

fn check_trainable(task: Task, data: &Prepared, fraction: f64) -> Result<(), CliError> {
    match fraction_warning(task, data, fraction) {
        Some(w) => Err(CliError::Runtime(anyhow::anyhow!(w.replace("; skipped", "")))),
        None => Ok(()),
    }
}

pub fn cmd_train(cfg: &RunConfig, data: &Path, out: &Path) -> Result<(), CliError> {
    let ds = load_data(data)?;
    let mut cfg = cfg.clone();
    bind_channels(&mut cfg, &ds)?;
    create_dir(out)?;
    let mut artifacts: Vec<PathBuf> = cfg
        .train
        .seeds
        .iter()
        .map(|s| out.join(format!("checkpoint_seed{s}.json")))
        .collect();
    artifacts.extend([out.join("checkpoint.json"), out.join("report.json")]);
    let manifest = RunManifest {
        tool_version: TOOL_VERSION.into(),
        command: "train".into(),
        data: data.to_path_buf(),
        out: out.to_path_buf(),
        config: cfg.clone(),
        artifacts: artifacts.clone(),
    };
    write_json(&out.join("manifest.json"), &manifest)?;

    let rt = Threaded::from_env();
    let prepared = prepare(&ds, &prep_config(&cfg, cfg.fraction))?;
    for w in &prepared.warnings {
        eprintln!("warning: {w}");
    }
    check_trainable(cfg.model.task, &prepared, cfg.fraction)?;
    let (report, models) = train(&cfg.model, &prepared, &cfg.train, &rt)?;
    for (m, s) in models.iter().zip(&cfg.train.seeds) {
        Checkpoint::new(m, &prepared.stats, cfg.split_seed, *s).save(&out.join(format!("checkpoint_seed{s}.json")))?;
    }
    Checkpoint::new(&models[0], &prepared.stats, cfg.split_seed, cfg.train.seeds[0]).save(&out.join("checkpoint.json"))?;
    write_json(&out.join("report.json"), &report)?;
    print_report(&report);
    Ok(())
}

fn cmd_train_manifest(path: &Path, out: Option<&Path>) -> Result<(), CliError> {
    let m: RunManifest = read_json(path).map_err(|e| CliError::Config(format!("{e:#}")))?;
    if m.command != "train" {
        return Err(CliError::Config(format!("{}: not a train manifest", path.display())));
    }
    m.config.validate()?;
    cmd_train(&m.config, &m.data, out.unwrap_or(&m.out))
}

fn fmt_summary(s: Option<satt_core::train::Summary>) -> String {
    match s {
        Some(s) => match (s.std, s.se) {
            (Some(sd), Some(se)) => format!("{:.4} ± {:.4} (se {:.4})", s.mean, sd, se),
            _ => format!("{:.4}", s.mean),
        },
        None => "-".into(),
    }
}

fn print_report(r: &RunReport) {
    for s in &r.seeds {
        println!(
            "seed {}: {} epochs, best epoch {}, test auprc {} auroc {} mse {}",
            s.seed,
            s.epochs.len(),
            s.best_epoch,
            opt(s.test.auprc),
            opt(s.test.auroc),
            opt(s.test.mse)
        );
    }
    match r.task {
        Task::Classify => println!("AUPRC {}  AUROC {}", fmt_summary(r.auprc), fmt_summary(r.auroc)),
        Task::Masked => println!("masked MSE {}", fmt_summary(r.mse)),
    }
    if let Some(ms) = r.ms_per_iter {
        println!("{ms:.3} ms/iteration");
    }
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".into(), |x| x.to_string())
}

/// Windows of one split normalized with the checkpoint statistics.
fn checkpoint_windows(ck: &Checkpoint, ds: &SeriesDataset, split: SplitArg) -> Result<Vec<Window>, CliError> {
    if ds.num_channels() != ck.model.channels {
        return Err(CliError::Config(format!(
            "data has {} channels but the checkpoint expects {}",
            ds.num_channels(),
            ck.model.channels
        )));
    }
    let [train, val, test] = split_windows(ds, ck.model.window, ck.split_seed)?;
    let mut w = match split {
        SplitArg::Train => train,
        SplitArg::Val => val,
        SplitArg::Test => test,
    };
    ck.stats.apply(&mut w);
    Ok(w)
}

fn load_checkpoint(path: &Path) -> Result<(Checkpoint, SatModel), CliError> {
    let ck = Checkpoint::load(path)?;
    let model = ck.to_model().map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    Ok((ck, model))
}

fn cmd_eval(checkpoint: &Path, data: &Path, split: SplitArg, out: Option<&Path>) -> Result<(), CliError> {
    let (ck, model) = load_checkpoint(checkpoint)?;
    let ds = load_data(data)?;
    let windows = checkpoint_windows(&ck, &ds, split)?;
    let m = evaluate(&model, &windows, &Threaded::from_env())?;
    let metrics = EvalMetrics {
        split: format!("{split:?}").to_lowercase(),
        windows: windows.len(),
        positives: windows.iter().filter(|w| w.label == 1).count(),
        auprc: m.auprc,
        auroc: m.auroc,
        mse: m.mse,
    };
    match out {
        Some(p) => {
            write_json(p, &metrics)?;
            println!("wrote {}", p.display());
        }
        None => println!("{}", serde_json::to_string_pretty(&metrics).context("serializing metrics")?),
    }
    Ok(())
}

fn cmd_dump(checkpoint: &Path, data: &Path, out: &Path, index: usize) -> Result<(), CliError> {
    let (ck, model) = load_checkpoint(checkpoint)?;
    let ds = load_data(data)?;
    let windows = checkpoint_windows(&ck, &ds, SplitArg::Test)?;
    let w = windows.get(index).ok_or_else(|| {
        CliError::Usage(format!("--index {index} out of range ({} test windows)", windows.len()))
    })?;
    let files = dump_model(&model, w, out)?;
    println!("wrote {} files to {}", files.len(), out.display());
    Ok(())
}

fn write_atomic_json<T: serde::Serialize>(path: &Path, v: &T) -> Result<(), CliError> {
    let tmp = path.with_extension("json.tmp");
    write_json(&tmp, v)?;
    fs::rename(&tmp, path).map_err(|e| CliError::io(path, e))
}

pub fn cmd_sweep(cfg: &RunConfig, data: &Path, out: &Path) -> Result<(), CliError> {
    let ds = load_data(data)?;
    let mut cfg = cfg.clone();
    bind_channels(&mut cfg, &ds)?;
    create_dir(out)?;
    let mpath = out.join("sweep_manifest.json");
    let csv_path = out.join("sweep.csv");
    let run = RunManifest {
        tool_version: TOOL_VERSION.into(),
        command: "sweep".into(),
        data: data.to_path_buf(),
        out: out.to_path_buf(),
        config: cfg.clone(),
        artifacts: vec![csv_path.clone(), mpath.clone()],
    };
    let mut state = if mpath.exists() {
        let prev: SweepManifest = read_json(&mpath)?;
        if prev.run.config != run.config || prev.run.data != run.data {
            return Err(CliError::Config(format!(
                "{} belongs to a different sweep; use a fresh --out",
                mpath.display()
            )));
        }
        println!("resuming: {} cells already done", prev.completed.len());
        prev
    } else {
        SweepManifest {
            run,
            completed: Vec::new(),
            skipped: Vec::new(),
        }
    };
    write_atomic_json(&mpath, &state)?;
    let rt = Threaded::from_env();
    for &fraction in &cfg.fractions {
        let todo: Vec<u64> = cfg
            .train
            .seeds
            .iter()
            .copied()
            .filter(|s| !state.completed.iter().any(|c| c.fraction == fraction && c.seed == *s))
            .collect();
        if todo.is_empty() {
            continue;
        }
        let prepared = prepare(&ds, &prep_config(&cfg, fraction))?;
        if let Some(w) = fraction_warning(cfg.model.task, &prepared, fraction) {
            eprintln!("warning: {w}");
            if !state.skipped.contains(&w) {
                state.skipped.push(w);
            }
            for seed in todo {
                state.completed.push(SweepCell {
                    fraction,
                    seed,
                    auprc: None,
                    auroc: None,
                    mse: None,
                    band_mass: None,
                });
            }
            write_atomic_json(&mpath, &state)?;
            continue;
        }
        for seed in todo {
            let (r, model) = train_seed(&cfg.model, &prepared, &cfg.train, seed, &rt)?;
            let band_mass = match cfg.model.task {
                Task::Masked => {
                    let n = prepared.test.len().min(PROBE_WINDOWS);
                    Some(masked_band_mass(&model, &prepared.test[..n], 0, 2, &rt)?)
                }
                Task::Classify => None,
            };
            let cell = SweepCell {
                fraction,
                seed,
                auprc: r.test.auprc,
                auroc: r.test.auroc,
                mse: r.test.mse,
                band_mass,
            };
            println!(
                "fraction {fraction} seed {seed}: auprc {} auroc {} mse {}",
                opt(cell.auprc),
                opt(cell.auroc),
                opt(cell.mse)
            );
            state.completed.push(cell);
            write_atomic_json(&mpath, &state)?;
        }
    }
    write_sweep_csv(&csv_path, &cfg, &state.completed)?;
    println!("wrote {}", csv_path.display());
    Ok(())
}

fn write_sweep_csv(path: &Path, cfg: &RunConfig, cells: &[SweepCell]) -> Result<(), CliError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| CliError::io(path, e))?;
    let io = |e: csv::Error| CliError::io(path, e);
    w.write_record(["fraction", "seed", "auprc", "auroc", "mse", "band_mass"]).map_err(io)?;
    for &f in &cfg.fractions {
        for &s in &cfg.train.seeds {
            if let Some(c) = cells.iter().find(|c| c.fraction == f && c.seed == s) {
                w.write_record([
                    f.to_string(),
                    s.to_string(),
                    c.auprc.map(|v| v.to_string()).unwrap_or_default(),
                    c.auroc.map(|v| v.to_string()).unwrap_or_default(),
                    c.mse.map(|v| v.to_string()).unwrap_or_default(),
                    c.band_mass.map(|v| v.to_string()).unwrap_or_default(),
                ])
                .map_err(io)?;
            }
        }
    }
    w.flush().map_err(|e| CliError::io(path, e))
}

/// One row of the benchmark table.
#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct BenchRow {
    pub name: String,
    pub timing: Timing,
    pub ratio: f64,
}

pub fn bench_rows(cfg: &RunConfig, windows: &[Window]) -> Result<Vec<BenchRow>, CliError> {
    let rt = Threaded::from_env();
    let mut variants = vec![("vanilla", KernelSpec::VANILLA)];
    let sat = |apply| KernelSpec {
        mode: KernelMode::Both,
        apply,
        adaptive: cfg.model.kernel.adaptive,
    };
    variants.push(("sat-score", sat(KernelApply::Score)));
    if cfg.model.d_k == cfg.model.window {
        variants.push(("sat-qk", sat(KernelApply::Qk)));
    }
    let mut rows: Vec<BenchRow> = Vec::new();
    for (name, spec) in variants {
        let mut m = cfg.model.clone();
        m.kernel = spec;
        let model = SatModel::new(m, cfg.train.seeds[0])?;
        let timing = time_per_iteration(&model, windows, cfg.train.batch_size, cfg.bench_iters, cfg.bench_warmup, &rt)?;
        let ratio = rows.first().map_or(1.0, |v| timing.mean_ms / v.timing.mean_ms);
        rows.push(BenchRow {
            name: name.into(),
            timing,
            ratio,
        });
    }
    Ok(rows)
}

fn cmd_bench(cfg: &RunConfig, data: Option<&Path>, out: Option<&Path>) -> Result<(), CliError> {
    let mut cfg = cfg.clone();
    let ds = match data {
        Some(p) => load_data(p)?,
        None => {
            synth_generate(&satt_core::synth::SynthConfig {
                n_samples: 200,
                window: cfg.model.window,
                seed: cfg.split_seed,
                ..Default::default()
            })?
            .dataset
        }
    };
    bind_channels(&mut cfg, &ds)?;
    let prepared = prepare(&ds, &prep_config(&cfg, 1.0))?;
    let rows = bench_rows(&cfg, &prepared.train)?;
    println!("{:<10} {:>10} {:>10} {:>8}", "variant", "ms/iter", "std", "ratio");
    for r in &rows {
        println!(
            "{:<10} {:>10.3} {:>10.3} {:>8.3}",
            r.name, r.timing.mean_ms, r.timing.std_ms, r.ratio
        );
    }
    if let Some(dir) = out {
        create_dir(dir)?;
        let path = dir.join("bench.csv");
        let mut w = csv::Writer::from_path(&path).map_err(|e| CliError::io(&path, e))?;
        let io = |e: csv::Error| CliError::io(&path, e);
        w.write_record(["variant", "ms_per_iter", "std_ms", "iterations", "ratio"]).map_err(io)?;
        for r in &rows {
            w.write_record([
                r.name.clone(),
                r.timing.mean_ms.to_string(),
                r.timing.std_ms.to_string(),
                r.timing.iterations.to_string(),
                r.ratio.to_string(),
            ])
            .map_err(io)?;
        }
        w.flush().map_err(|e| CliError::io(&path, e))?;
    }
    Ok(())
}
