use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use nlq4rec::data::{load_prepared, prepare, DatasetFormat, PrepareOptions, DEFAULT_THRESHOLD};
use nlq4rec::eval::{metrics_csv, metrics_table};
use nlq4rec::gradcheck::{check_loss, probe_batch, probe_model};
use nlq4rec::kv::KeyValues;
use nlq4rec::{ModelConfig, Variant};
use nlq4rec_cli::experiment::{self, evaluate_checkpoint, SweepParam, METRICS_CSV, METRICS_TABLE, SWEEP_CSV};
use nlq4rec_cli::run_config::{output_root, Precision, RunConfig};

/// Gradient checks pass below this relative error.
const GRADCHECK_TOLERANCE: f64 = 1e-4;

#[derive(Parser)]
#[command(name = "nlq4rec", version, about = "Neural logic query recommendation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Parse, binarize and split a raw dataset into a prepared directory.
    Prepare {
        /// Raw format: ml100k or amazon5core.
        #[arg(long)]
        dataset: DatasetFormat,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Ratings at or above this are positive.
        #[arg(long, default_value_t = DEFAULT_THRESHOLD)]
        threshold: f64,
        /// Seed for evaluation negatives.
        #[arg(long, default_value_t = 2024)]
        seed: u64,
    },
    /// Train one model per seed and report validation and test metrics.
    Train {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        variant: Option<Variant>,
    },
    /// Evaluate a checkpoint on a prepared dataset.
    Evaluate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Directory for the metrics files (default: the checkpoint's directory).
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value = "f32")]
        precision: Precision,
    },
    /// Train an ablated variant: q (no logic query), e (no encoder) or p (no predicates).
    Ablate {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        variant: Variant,
    },
    /// One training run per value of a hyperparameter, for every seed.
    Sweep {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        variant: Option<Variant>,
        /// d, l, n or lambda_p.
        #[arg(long)]
        param: SweepParam,
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<String>,
        /// Run the values concurrently.
        #[arg(long)]
        parallel: bool,
    },
    /// Compare loss gradients with central finite differences for every variant.
    Gradcheck {
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, default_value_t = 1e-4)]
        epsilon: f64,
    },
}

#[derive(Args)]
struct RunArgs {
    /// Prepared dataset directory.
    #[arg(long)]
    data: Option<PathBuf>,
    /// `key = value` configuration file; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Run directory (default: under $NLQ4REC_OUTPUT_ROOT or ./runs).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Comma-separated seeds.
    #[arg(long = "seed", alias = "seeds", value_delimiter = ',')]
    seeds: Vec<u64>,
    #[arg(long)]
    precision: Option<Precision>,
    #[arg(long)]
    d: Option<usize>,
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    heads: Option<usize>,
    #[arg(long)]
    n_max: Option<usize>,
    #[arg(long)]
    phi: Option<f64>,
    #[arg(long)]
    lambda_p: Option<f64>,
    #[arg(long)]
    lambda_len: Option<f64>,
    #[arg(long)]
    lambda_theta: Option<f64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    patience: Option<usize>,
    /// Skip seeds whose run directory already holds a finished run with the same configuration.
    #[arg(long)]
    reuse: bool,
}

impl RunArgs {
    fn flags(&self, variant: Option<Variant>) -> KeyValues {
        let mut kv = KeyValues::new();
        macro_rules! put {
            ($($field:ident),*) => {
                $(if let Some(v) = &self.$field {
                    kv.set(stringify!($field), v);
                })*
            };
        }
        put!(
            precision,
            d,
            layers,
            heads,
            n_max,
            phi,
            lambda_p,
            lambda_len,
            lambda_theta,
            lr,
            batch_size,
            epochs,
            patience
        );
        if let Some(v) = variant {
            kv.set("variant", v);
        }
        if let Some(p) = &self.data {
            kv.set("data", p.display());
        }
        if let Some(p) = &self.out {
            kv.set("out", p.display());
        }
        if !self.seeds.is_empty() {
            kv.set(
                "seeds",
                self.seeds.iter().map(u64::to_string).collect::<Vec<_>>().join(","),
            );
        }
        kv
    }

    fn resolve(&self, variant: Option<Variant>, prefix: &str) -> Result<RunConfig> {
        RunConfig::resolve(self.config.as_deref(), &self.flags(variant), |m| {
            output_root().join(format!("{prefix}{}", RunConfig::model_tag(m)))
        })
    }
}

fn load_data(path: &Path) -> Result<nlq4rec::data::PreparedDataset> {
    load_prepared(path).with_context(|| format!("loading prepared dataset {}", path.display()))
}

fn train_command(cfg: RunConfig, reuse: bool) -> Result<()> {
    let data = load_data(&cfg.data)?;
    let outcome = experiment::run(&cfg, &data, reuse)?;
    print!("{}", metrics_table(&outcome.rows()));
    println!("run directory: {}", cfg.out.display());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Prepare {
            dataset,
            input,
            out,
            threshold,
            seed,
        } => {
            let prepared = prepare(
                &input,
                &out,
                &PrepareOptions {
                    format: dataset,
                    threshold,
                    seed,
                },
            )?;
            print!("{}", prepared.manifest.to_text());
            println!("prepared dataset written to {}", out.display());
        }
        Command::Train { run, variant } => train_command(run.resolve(variant, "")?, run.reuse)?,
        Command::Ablate { run, variant } => {
            if variant == Variant::Full {
                bail!("ablate needs --variant q, e or p");
            }
            train_command(run.resolve(Some(variant), "")?, run.reuse)?
        }
        Command::Evaluate {
            data,
            checkpoint,
            out,
            precision,
        } => {
            let data = load_data(&data)?;
            let reports = match precision {
                Precision::F32 => evaluate_checkpoint::<f32>(&checkpoint, &data)?,
                Precision::F64 => evaluate_checkpoint::<f64>(&checkpoint, &data)?,
            };
            let rows: Vec<_> = reports.iter().map(|r| ("ckpt".to_string(), r)).collect();
            let out = out.unwrap_or_else(|| checkpoint.parent().map(Path::to_path_buf).unwrap_or_default());
            fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
            fs::write(out.join(format!("eval-{METRICS_CSV}")), metrics_csv(&rows))?;
            fs::write(out.join(format!("eval-{METRICS_TABLE}")), metrics_table(&rows))?;
            print!("{}", metrics_table(&rows));
        }
        Command::Sweep {
            run,
            variant,
            param,
            values,
            parallel,
        } => {
            let cfg = run.resolve(variant, &format!("sweep-{param}-"))?;
            let data = load_data(&cfg.data)?;
            let outcome = experiment::sweep(&cfg, param, &values, &data, parallel, run.reuse)?;
            for (value, result) in &outcome.runs {
                match result {
                    Ok(o) => println!(
                        "{param} = {value}: test NDCG@10 {:.4} HR@10 {:.4}",
                        o.mean_test.ndcg(10),
                        o.mean_test.hr(10)
                    ),
                    Err(e) => eprintln!("{param} = {value}: failed: {e}"),
                }
            }
            println!("consolidated results: {}", cfg.out.join(SWEEP_CSV).display());
            let failed = outcome.failures();
            if !failed.is_empty() {
                bail!(
                    "{} of {} sweep runs failed ({param} = {})",
                    failed.len(),
                    values.len(),
                    failed.join(", ")
                );
            }
        }
        Command::Gradcheck { seed, epsilon } => {
            let mut worst = 0.0f64;
            println!(
                "{:<8} {:>8} {:>12}  {:<16} {:>11} {:>11}",
                "variant", "checked", "max rel err", "worst element", "analytic", "numeric"
            );
            for variant in [
                Variant::Full,
                Variant::NoQuery,
                Variant::NoEncoder,
                Variant::NoPredicate,
            ] {
                let config = ModelConfig {
                    d: 8,
                    heads: 2,
                    n_max: 3,
                    variant,
                    seed,
                    ..Default::default()
                };
                let report = check_loss(&probe_model(config, seed)?, &probe_batch(), epsilon)?;
                let (name, index) = report.worst.clone().unwrap_or_default();
                let (analytic, numeric) = report.worst_values;
                println!(
                    "{:<8} {:>8} {:>12.3e}  {:<16} {analytic:>11.3e} {numeric:>11.3e}",
                    variant.to_string(),
                    report.checked,
                    report.max_rel_error,
                    format!("{name}[{index}]")
                );
                worst = worst.max(report.max_rel_error);
            }
            if worst.is_nan() || worst >= GRADCHECK_TOLERANCE {
                bail!("max relative error {worst:.3e} is not below {GRADCHECK_TOLERANCE:e}");
            }
            println!("max relative error {worst:.3e} < {GRADCHECK_TOLERANCE:e}");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(2)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
