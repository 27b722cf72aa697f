use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::kv::KeyValues;

/// Which parts of the network are active.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub enum Variant {
    #[default]
    Full,
    /// No logic query: candidates are scored by whether `query ∨ POS(u, v)` is true.
    NoQuery,
    /// No implicit logic encoder: literal encodings are OR-folded directly.
    NoEncoder,
    /// No predicate networks: literals are item embeddings, negated by a NOT network.
    NoPredicate,
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::Full => "full",
            Variant::NoQuery => "q",
            Variant::NoEncoder => "e",
            Variant::NoPredicate => "p",
        })
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim_start_matches('-') {
            "full" => Ok(Variant::Full),
            "q" => Ok(Variant::NoQuery),
            "e" => Ok(Variant::NoEncoder),
            "p" => Ok(Variant::NoPredicate),
            other => Err(Error::Config(format!(
                "unknown variant `{other}` (expected full, q, e or p)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub d: usize,
    pub layers: usize,
    pub heads: usize,
    pub n_max: usize,
    pub phi: f64,
    pub lambda_p: f64,
    pub lambda_len: f64,
    pub lambda_theta: f64,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub patience: usize,
    pub seed: u64,
    pub variant: Variant,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d: 96,
            layers: 2,
            heads: 4,
            n_max: 10,
            phi: 10.0,
            lambda_p: 1e-5,
            lambda_len: 1e-4,
            lambda_theta: 1e-4,
            lr: 1e-4,
            batch_size: 128,
            epochs: 500,
            patience: 20,
            seed: 1,
            variant: Variant::Full,
        }
    }
}

impl ModelConfig {
    pub fn d_k(&self) -> usize {
        self.d / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.d == 0 || self.heads == 0 || !self.d.is_multiple_of(self.heads) {
            return bad(format!(
                "d = {} must be a positive multiple of heads = {}",
                self.d, self.heads
            ));
        }
        if self.n_max == 0 {
            return bad("n_max must be at least 1".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        for (name, v) in [
            ("phi", self.phi),
            ("lambda_p", self.lambda_p),
            ("lambda_len", self.lambda_len),
            ("lambda_theta", self.lambda_theta),
            ("lr", self.lr),
        ] {
            if !v.is_finite() || v < 0.0 {
                return bad(format!("{name} = {v} must be finite and non-negative"));
            }
        }
        Ok(())
    }

    pub const KEYS: [&'static str; 14] = [
        "d",
        "layers",
        "heads",
        "n_max",
        "phi",
        "lambda_p",
        "lambda_len",
        "lambda_theta",
        "lr",
        "batch_size",
        "epochs",
        "patience",
        "seed",
        "variant",
    ];

    pub fn to_kv(&self) -> KeyValues {
        let mut kv = KeyValues::new();
        kv.set("d", self.d);
        kv.set("layers", self.layers);
        kv.set("heads", self.heads);
        kv.set("n_max", self.n_max);
        kv.set("phi", self.phi);
        kv.set("lambda_p", self.lambda_p);
        kv.set("lambda_len", self.lambda_len);
        kv.set("lambda_theta", self.lambda_theta);
        kv.set("lr", self.lr);
        kv.set("batch_size", self.batch_size);
        kv.set("epochs", self.epochs);
        kv.set("patience", self.patience);
        kv.set("seed", self.seed);
        kv.set("variant", self.variant);
        kv
    }

    /// Overrides fields present in `kv`; other keys are ignored.
    pub fn apply(&mut self, kv: &KeyValues) -> Result<()> {
        macro_rules! take {
            ($($field:ident),*) => {
                $(if let Some(v) = kv.parse_value(stringify!($field))? {
                    self.$field = v;
                })*
            };
        }
        take!(
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
            patience,
            seed
        );
        if let Some(v) = kv.get("variant") {
            self.variant = v.parse()?;
        }
        self.validate()
    }

    pub fn from_kv(kv: &KeyValues) -> Result<Self> {
        let mut c = ModelConfig::default();
        c.apply(kv)?;
        Ok(c)
    }
}
