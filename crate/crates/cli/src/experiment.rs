//! Training runs over several seeds, and sweeps over one hyperparameter.
//!
//! Layout of a run directory:
//!
//! ```text
//! <out>/config.txt            resolved configuration, written before training
//! <out>/metrics.csv, .txt     validation and test metrics per seed plus the mean
//! <out>/seed-<s>/config.txt   single-seed configuration
//! <out>/seed-<s>/history.tsv  per-epoch losses and validation NDCG@10
//! <out>/seed-<s>/best.ckpt    parameters from the best validation epoch
//! <out>/seed-<s>/run.txt      written last; marks the seed as finished
//! ```

use std::fmt;
use std::fs::{self, File};
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Mutex;

use anyhow::{bail, Context, Result};
use log::info;
use nlq4rec::checkpoint::{load_checkpoint, save_checkpoint};
use nlq4rec::data::PreparedDataset;
use nlq4rec::eval::{evaluate, metrics_csv, metrics_table, MetricsReport, DEFAULT_KS};
use nlq4rec::kv::KeyValues;
use nlq4rec::train::{test_metrics, train, TrainEvent, TrainingData, HISTORY_HEADER};
use nlq4rec::{Model, ModelConfig, Scalar};
use rayon::prelude::*;

use crate::run_config::{Precision, RunConfig, CONFIG_FILE};

pub const HISTORY_FILE: &str = "history.tsv";
pub const CHECKPOINT_FILE: &str = "best.ckpt";
pub const RUN_FILE: &str = "run.txt";
pub const METRICS_CSV: &str = "metrics.csv";
pub const METRICS_TABLE: &str = "metrics.txt";
pub const SWEEP_CSV: &str = "sweep.csv";

#[derive(Clone, Debug)]
pub struct SeedOutcome {
    pub seed: u64,
    pub dir: PathBuf,
    pub best_epoch: usize,
    pub epochs_run: usize,
    pub stopped_early: bool,
    pub validation: MetricsReport,
    pub test: MetricsReport,
    /// Loaded from a finished run directory instead of trained.
    pub reused: bool,
}

#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub seeds: Vec<SeedOutcome>,
    pub mean_validation: MetricsReport,
    pub mean_test: MetricsReport,
}

impl RunOutcome {
    pub fn rows(&self) -> Vec<(String, &MetricsReport)> {
        let mut rows = Vec::new();
        for s in &self.seeds {
            rows.push((s.seed.to_string(), &s.validation));
            rows.push((s.seed.to_string(), &s.test));
        }
        rows.push(("mean".to_string(), &self.mean_validation));
        rows.push(("mean".to_string(), &self.mean_test));
        rows
    }
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

pub fn write_config(cfg: &RunConfig) -> Result<()> {
    fs::create_dir_all(&cfg.out).with_context(|| format!("creating {}", cfg.out.display()))?;
    write(&cfg.out.join(CONFIG_FILE), &cfg.to_kv().to_text())
}

/// Trains every seed of `cfg` in turn and writes the run directory. With
/// `reuse`, a seed whose directory holds a finished run with the same
/// configuration and dataset is evaluated from its checkpoint instead of
/// retrained.
pub fn run(cfg: &RunConfig, data: &PreparedDataset, reuse: bool) -> Result<RunOutcome> {
    write_config(cfg)?;
    let mut seeds = Vec::with_capacity(cfg.seeds.len());
    for &seed in &cfg.seeds {
        let outcome =
            run_seed(cfg, seed, data, reuse).with_context(|| format!("seed {seed} in {}", cfg.out.display()))?;
        info!(
            "seed {seed}: best epoch {} of {}, test NDCG@10 {:.4} HR@10 {:.4}",
            outcome.best_epoch,
            outcome.epochs_run,
            outcome.test.ndcg(10),
            outcome.test.hr(10)
        );
        seeds.push(outcome);
    }
    let outcome = summarize(seeds)?;
    let rows = outcome.rows();
    write(&cfg.out.join(METRICS_CSV), &metrics_csv(&rows))?;
    write(&cfg.out.join(METRICS_TABLE), &metrics_table(&rows))?;
    Ok(outcome)
}

/// The outcome of `cfg` if every seed already finished, without training.
pub fn load_finished(cfg: &RunConfig, data: &PreparedDataset) -> Result<Option<RunOutcome>> {
    let mut seeds = Vec::with_capacity(cfg.seeds.len());
    for &seed in &cfg.seeds {
        let dir = cfg.out.join(format!("seed-{seed}"));
        let config_text = cfg.for_seed(seed, dir.clone()).to_kv().to_text();
        let found = match cfg.precision {
            Precision::F32 => try_reuse::<f32>(cfg, seed, &dir, &config_text, data)?,
            Precision::F64 => try_reuse::<f64>(cfg, seed, &dir, &config_text, data)?,
        };
        match found {
            Some(o) => seeds.push(o),
            None => return Ok(None),
        }
    }
    summarize(seeds).map(Some)
}

fn summarize(seeds: Vec<SeedOutcome>) -> Result<RunOutcome> {
    let mean_validation = MetricsReport::mean(&seeds.iter().map(|s| s.validation.clone()).collect::<Vec<_>>())?;
    let mean_test = MetricsReport::mean(&seeds.iter().map(|s| s.test.clone()).collect::<Vec<_>>())?;
    Ok(RunOutcome {
        seeds,
        mean_validation,
        mean_test,
    })
}

fn run_seed(cfg: &RunConfig, seed: u64, data: &PreparedDataset, reuse: bool) -> Result<SeedOutcome> {
    let dir = cfg.out.join(format!("seed-{seed}"));
    let config_text = cfg.for_seed(seed, dir.clone()).to_kv().to_text();
    if reuse {
        let reused = match cfg.precision {
            Precision::F32 => try_reuse::<f32>(cfg, seed, &dir, &config_text, data)?,
            Precision::F64 => try_reuse::<f64>(cfg, seed, &dir, &config_text, data)?,
        };
        if let Some(o) = reused {
            info!("seed {seed}: reusing finished run in {}", dir.display());
            return Ok(o);
        }
    }
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    let marker = dir.join(RUN_FILE);
    if marker.exists() {
        fs::remove_file(&marker).with_context(|| format!("removing {}", marker.display()))?;
    }
    write(&dir.join(CONFIG_FILE), &config_text)?;
    match cfg.precision {
        Precision::F32 => train_seed::<f32>(cfg.model_for(seed), &dir, data),
        Precision::F64 => train_seed::<f64>(cfg.model_for(seed), &dir, data),
    }
}

fn train_seed<T: Scalar>(model_cfg: ModelConfig, dir: &Path, data: &PreparedDataset) -> Result<SeedOutcome> {
    let seed = model_cfg.seed;
    let mut td = TrainingData::new(data, &model_cfg)?;
    let history_path = dir.join(HISTORY_FILE);
    let mut history = File::create(&history_path).with_context(|| format!("creating {}", history_path.display()))?;
    writeln!(history, "{HISTORY_HEADER}")?;
    let ckpt = dir.join(CHECKPOINT_FILE);
    let result = train::<T>(
        &model_cfg,
        data.split.num_users(),
        data.split.num_items(),
        &mut td,
        |event| {
            match event {
                TrainEvent::Epoch(r) => {
                    writeln!(history, "{}", r.tsv_row()).map_err(|e| nlq4rec::Error::Io {
                        path: history_path.clone(),
                        source: e,
                    })?;
                }
                TrainEvent::NewBest { model, .. } => save_checkpoint(&ckpt, model, &data.manifest_hash)?,
            }
            Ok(())
        },
    )?;
    let validation = evaluate(&result.best, &td.validation, &DEFAULT_KS)?;
    let test = test_metrics(&result.best, data)?;
    let outcome = SeedOutcome {
        seed,
        dir: dir.to_path_buf(),
        best_epoch: result.best_epoch,
        epochs_run: result.history.len(),
        stopped_early: result.stopped_early,
        validation,
        test,
        reused: false,
    };
    let rows = [
        (seed.to_string(), &outcome.validation),
        (seed.to_string(), &outcome.test),
    ];
    write(&dir.join(METRICS_CSV), &metrics_csv(&rows))?;
    let mut marker = KeyValues::new();
    marker.set("best_epoch", outcome.best_epoch);
    marker.set("epochs_run", outcome.epochs_run);
    marker.set("stopped_early", outcome.stopped_early);
    marker.set("best_val_ndcg@10", format!("{:.6}", result.best_val_ndcg));
    marker.set("manifest_hash", &data.manifest_hash);
    write(&dir.join(RUN_FILE), &marker.to_text())?;
    Ok(outcome)
}

/// Checkpoints hold f32 values, so an f64 run re-evaluated here can differ
/// from its original metrics in the last digits.
fn try_reuse<T: Scalar>(
    cfg: &RunConfig,
    seed: u64,
    dir: &Path,
    config_text: &str,
    data: &PreparedDataset,
) -> Result<Option<SeedOutcome>> {
    let (Ok(stored), Ok(marker)) = (
        fs::read_to_string(dir.join(CONFIG_FILE)),
        fs::read_to_string(dir.join(RUN_FILE)),
    ) else {
        return Ok(None);
    };
    let marker = KeyValues::parse(&marker, RUN_FILE)?;
    if stored != config_text || marker.get("manifest_hash") != Some(data.manifest_hash.as_str()) {
        return Ok(None);
    }
    let (model, _) = load_checkpoint::<T>(&dir.join(CHECKPOINT_FILE), Some(&data.manifest_hash))?;
    if model.config() != &cfg.model_for(seed) {
        return Ok(None);
    }
    let td = TrainingData::new(data, model.config())?;
    let needed = |key: &str| -> Result<String> { Ok(marker.require(key)?.to_string()) };
    Ok(Some(SeedOutcome {
        seed,
        dir: dir.to_path_buf(),
        best_epoch: needed("best_epoch")?.parse()?,
        epochs_run: needed("epochs_run")?.parse()?,
        stopped_early: needed("stopped_early")?.parse()?,
        validation: evaluate(&model, &td.validation, &DEFAULT_KS)?,
        test: test_metrics(&model, data)?,
        reused: true,
    }))
}

/// Loads a checkpoint and evaluates it on the dataset's validation and test targets.
pub fn evaluate_checkpoint<T: Scalar>(path: &Path, data: &PreparedDataset) -> Result<Vec<MetricsReport>> {
    let (model, _): (Model<T>, _) = load_checkpoint(path, Some(&data.manifest_hash))?;
    let td = TrainingData::new(data, model.config())?;
    Ok(vec![
        evaluate(&model, &td.validation, &DEFAULT_KS)?,
        test_metrics(&model, data)?,
    ])
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SweepParam {
    /// Embedding dimension `d`.
    D,
    /// Attention layers.
    L,
    /// Maximum history length `n_max`.
    N,
    LambdaP,
}

impl SweepParam {
    pub fn key(self) -> &'static str {
        match self {
            SweepParam::D => "d",
            SweepParam::L => "layers",
            SweepParam::N => "n_max",
            SweepParam::LambdaP => "lambda_p",
        }
    }
}

impl fmt::Display for SweepParam {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SweepParam::D => "d",
            SweepParam::L => "l",
            SweepParam::N => "n",
            SweepParam::LambdaP => "lambda_p",
        })
    }
}

impl FromStr for SweepParam {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "d" => Ok(SweepParam::D),
            "l" | "layers" => Ok(SweepParam::L),
            "n" | "n_max" => Ok(SweepParam::N),
            "lambda_p" => Ok(SweepParam::LambdaP),
            other => Err(format!("cannot sweep `{other}` (expected d, l, n or lambda_p)")),
        }
    }
}

pub const SWEEP_CSV_HEADER: &str = "param,value,seed,split,K,ndcg,hr,n_instances";

#[derive(Debug)]
pub struct SweepOutcome {
    /// One entry per value, in the order given; `Err` holds the failure message.
    pub runs: Vec<(String, Result<RunOutcome, String>)>,
}

impl SweepOutcome {
    pub fn failures(&self) -> Vec<&str> {
        self.runs
            .iter()
            .filter(|(_, r)| r.is_err())
            .map(|(v, _)| v.as_str())
            .collect()
    }
}

/// The configuration for one swept value, writing under `<base.out>/<param>-<value>`.
pub fn sweep_point(base: &RunConfig, param: SweepParam, value: &str) -> Result<RunConfig> {
    let mut kv = base.model.to_kv();
    kv.set(param.key(), value);
    let model = ModelConfig::from_kv(&kv).with_context(|| format!("{param} = {value}"))?;
    Ok(RunConfig {
        model,
        out: base.out.join(format!("{param}-{value}")),
        ..base.clone()
    })
}

fn sweep_csv(param: SweepParam, runs: &[(String, Option<RunOutcome>)]) -> String {
    let mut s = format!("{SWEEP_CSV_HEADER}\n");
    for (value, outcome) in runs {
        let Some(o) = outcome else { continue };
        for line in metrics_csv(&o.rows()).lines().skip(1) {
            s.push_str(&format!("{param},{value},{line}\n"));
        }
    }
    s
}

/// One run per value. A failing value does not stop the others, and the
/// consolidated CSV is rewritten after each run so finished results survive.
pub fn sweep(
    base: &RunConfig,
    param: SweepParam,
    values: &[String],
    data: &PreparedDataset,
    parallel: bool,
    reuse: bool,
) -> Result<SweepOutcome> {
    if values.is_empty() {
        bail!("no values to sweep");
    }
    let points = values
        .iter()
        .map(|v| sweep_point(base, param, v))
        .collect::<Result<Vec<_>>>()?;
    write_config(base)?;
    let done: Mutex<Vec<(String, Option<RunOutcome>)>> = Mutex::new(values.iter().map(|v| (v.clone(), None)).collect());
    let csv_path = base.out.join(SWEEP_CSV);
    let one = |i: usize| -> Result<RunOutcome, String> {
        let result = run(&points[i], data, reuse).map_err(|e| format!("{e:#}"));
        let mut done = done.lock().unwrap();
        if let Ok(o) = &result {
            done[i].1 = Some(o.clone());
        }
        write(&csv_path, &sweep_csv(param, &done)).map_err(|e| format!("{e:#}"))?;
        result
    };
    let results: Vec<Result<RunOutcome, String>> = if parallel {
        (0..points.len()).into_par_iter().map(one).collect()
    } else {
        (0..points.len()).map(one).collect()
    };
    Ok(SweepOutcome {
        runs: values.iter().cloned().zip(results).collect(),
    })
}
