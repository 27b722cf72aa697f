//! Resolved run configuration: defaults, then a config file, then flags.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::{bail, Context, Result};
use nlq4rec::kv::KeyValues;
use nlq4rec::ModelConfig;

/// Overrides the directory that default run directories are created under.
pub const OUTPUT_ROOT_ENV: &str = "NLQ4REC_OUTPUT_ROOT";
pub const DEFAULT_OUTPUT_ROOT: &str = "runs";
pub const CONFIG_FILE: &str = "config.txt";

pub fn output_root() -> PathBuf {
    std::env::var_os(OUTPUT_ROOT_ENV)
        .filter(|v| !v.is_empty())
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUTPUT_ROOT))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Precision {
    #[default]
    F32,
    F64,
}

impl fmt::Display for Precision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Precision::F32 => "f32",
            Precision::F64 => "f64",
        })
    }
}

impl FromStr for Precision {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "f32" => Ok(Precision::F32),
            "f64" => Ok(Precision::F64),
            other => Err(format!("unknown precision `{other}` (expected f32 or f64)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub data: PathBuf,
    pub out: PathBuf,
    pub seeds: Vec<u64>,
    pub precision: Precision,
    /// `model.seed` is ignored here; each run takes its seed from `seeds`.
    pub model: ModelConfig,
}

const RUN_KEYS: [&str; 4] = ["data", "out", "seeds", "precision"];

pub fn parse_seeds(text: &str) -> Result<Vec<u64>> {
    let seeds = text
        .split(',')
        .map(|s| {
            s.trim()
                .parse::<u64>()
                .with_context(|| format!("bad seed `{s}` in `{text}`"))
        })
        .collect::<Result<Vec<_>>>()?;
    if seeds.is_empty() {
        bail!("at least one seed is required");
    }
    Ok(seeds)
}

fn join<T: ToString>(xs: &[T]) -> String {
    xs.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    pub fn defaults() -> KeyValues {
        let mut kv = KeyValues::new();
        kv.set("seeds", "1,2,3");
        kv.set("precision", Precision::F32);
        for (k, v) in ModelConfig::default().to_kv().iter().filter(|(k, _)| *k != "seed") {
            kv.set(k, v);
        }
        kv
    }

    /// Merges defaults < `file` < `flags`. `default_out` is used when neither
    /// source names an output directory; it may depend on the merged model
    /// settings.
    pub fn resolve(
        file: Option<&Path>,
        flags: &KeyValues,
        default_out: impl FnOnce(&ModelConfig) -> PathBuf,
    ) -> Result<RunConfig> {
        let mut kv = Self::defaults();
        if let Some(path) = file {
            let text = fs::read_to_string(path).with_context(|| format!("reading config file {}", path.display()))?;
            let from_file = KeyValues::parse(&text, &path.display().to_string())?;
            check_keys(&from_file, &path.display().to_string())?;
            kv.merge(&from_file);
        }
        check_keys(flags, "command line")?;
        kv.merge(flags);
        Self::from_kv(&kv, default_out)
    }

    fn from_kv(kv: &KeyValues, default_out: impl FnOnce(&ModelConfig) -> PathBuf) -> Result<RunConfig> {
        let model = ModelConfig::from_kv(kv)?;
        let data = PathBuf::from(
            kv.get("data")
                .filter(|s| !s.is_empty())
                .context("no dataset given (set --data or `data` in the config file)")?,
        );
        let seeds = parse_seeds(kv.require("seeds")?)?;
        let precision = kv.require("precision")?.parse().map_err(anyhow::Error::msg)?;
        let out = match kv.get("out").filter(|s| !s.is_empty()) {
            Some(o) => PathBuf::from(o),
            None => default_out(&model),
        };
        Ok(RunConfig {
            data,
            out,
            seeds,
            precision,
            model,
        })
    }

    pub fn to_kv(&self) -> KeyValues {
        let mut kv = KeyValues::new();
        kv.set("data", self.data.display());
        kv.set("out", self.out.display());
        kv.set("seeds", join(&self.seeds));
        kv.set("precision", self.precision);
        for (k, v) in self.model.to_kv().iter().filter(|(k, _)| *k != "seed") {
            kv.set(k, v);
        }
        kv
    }

    /// The model configuration for one seed.
    pub fn model_for(&self, seed: u64) -> ModelConfig {
        ModelConfig {
            seed,
            ..self.model.clone()
        }
    }

    /// A single-seed copy writing into `out`.
    pub fn for_seed(&self, seed: u64, out: PathBuf) -> RunConfig {
        RunConfig {
            seeds: vec![seed],
            out,
            ..self.clone()
        }
    }

    /// A short directory name for the model settings, e.g. `full-d96-l2-n10-lp1e-5`.
    pub fn model_tag(model: &ModelConfig) -> String {
        format!(
            "{}-d{}-l{}-n{}-lp{:e}",
            model.variant, model.d, model.layers, model.n_max, model.lambda_p
        )
    }
}

fn check_keys(kv: &KeyValues, origin: &str) -> Result<()> {
    for (k, _) in kv.iter() {
        if !RUN_KEYS.contains(&k) && (!ModelConfig::KEYS.contains(&k) || k == "seed") {
            bail!("{origin}: unknown configuration key `{k}`");
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn precedence_and_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("c.txt");
        fs::write(&file, "data = from-file\nd = 32\nlr = 0.01\n").unwrap();
        let mut flags = KeyValues::new();
        flags.set("d", 16);
        flags.set("seeds", "7");
        let cfg = RunConfig::resolve(Some(&file), &flags, |_| PathBuf::from("x")).unwrap();
        assert_eq!(cfg.model.d, 16);
        assert_eq!(cfg.model.lr, 0.01);
        assert_eq!(cfg.model.layers, 2);
        assert_eq!(cfg.seeds, vec![7]);
        assert_eq!(cfg.data, PathBuf::from("from-file"));
        assert_eq!(cfg.out, PathBuf::from("x"));

        let echoed = dir.path().join("echo.txt");
        fs::write(&echoed, cfg.to_kv().to_text()).unwrap();
        let again = RunConfig::resolve(Some(&echoed), &KeyValues::new(), |_| unreachable!()).unwrap();
        assert_eq!(again, cfg);
    }

    #[test]
    fn rejects_unknown_keys_and_missing_data() {
        let mut flags = KeyValues::new();
        flags.set("dd", 3);
        assert!(RunConfig::resolve(None, &flags, |_| PathBuf::new()).is_err());
        assert!(RunConfig::resolve(None, &KeyValues::new(), |_| PathBuf::new()).is_err());
    }

    #[test]
    fn tag() {
        assert_eq!(RunConfig::model_tag(&ModelConfig::default()), "full-d96-l2-n10-lp1e-5");
    }
}
