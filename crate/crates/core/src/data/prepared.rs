//! On-disk prepared dataset.
//!
//! ```text
//! <dir>/interactions.tsv   dense_user \t dense_item \t polarity(0|1) \t timestamp
//! <dir>/split.tsv          dense_user \t position \t train|validation|test
//! <dir>/users.map          dense \t raw id
//! <dir>/items.map          dense \t raw id
//! <dir>/manifest.txt       key = value
//! ```
//!
//! Rows are grouped by user in dense-id order and chronological within a user,
//! so `split.tsv` lines up with `interactions.tsv` row for row.

use std::fmt::Write as _;
use std::fs;
use std::io::BufReader;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::data::parse::{parse_dataset, DatasetFormat};
use crate::data::sequence::{binarize_and_sequence, Event, IdMap, UserSequence};
use crate::data::split::{leave_one_out_split, SplitDataset, SplitKind};
use crate::error::{Error, Result};
use crate::kv::KeyValues;
use crate::logic::Polarity;

pub const PREPARED_FORMAT_VERSION: u32 = 1;
pub const DEFAULT_THRESHOLD: f64 = 4.0;

const INTERACTIONS: &str = "interactions.tsv";
const SPLIT: &str = "split.tsv";
const USERS: &str = "users.map";
const ITEMS: &str = "items.map";
const MANIFEST: &str = "manifest.txt";

#[derive(Clone, Debug)]
pub struct PreparedDataset {
    pub split: SplitDataset,
    pub manifest: KeyValues,
    /// SHA-256 of the manifest file; ties checkpoints to the data they were trained on.
    pub manifest_hash: String,
}

impl PreparedDataset {
    /// Seed for evaluation candidate sampling, fixed per prepared dataset.
    pub fn data_seed(&self) -> Result<u64> {
        Ok(self.manifest.parse_value("seed")?.unwrap_or(0))
    }
}

#[derive(Clone, Debug)]
pub struct PrepareOptions {
    pub format: DatasetFormat,
    pub threshold: f64,
    pub seed: u64,
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Parse, binarize, split and write a prepared dataset directory.
pub fn prepare(input: &Path, out_dir: &Path, opts: &PrepareOptions) -> Result<PreparedDataset> {
    let bytes = fs::read(input).map_err(|e| Error::io(input, e))?;
    let name = input
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    let parsed = parse_dataset(opts.format, BufReader::new(bytes.as_slice()), &name)?;
    let sequenced = binarize_and_sequence(&parsed.interactions, opts.threshold)?;
    let repeats = sequenced.exact_repeats;
    let split = leave_one_out_split(sequenced)?;

    let mut m = KeyValues::new();
    m.set("format_version", PREPARED_FORMAT_VERSION);
    m.set("source_format", opts.format);
    m.set("source_file", &name);
    m.set("source_sha256", sha256_hex(&bytes));
    m.set("threshold", opts.threshold);
    m.set("seed", opts.seed);
    m.set("users", split.num_users());
    m.set("items", split.num_items());
    m.set("interactions", split.num_interactions());
    m.set("density", format!("{:.6}", split.density()));
    m.set(
        "positives",
        split
            .sequences
            .iter()
            .flat_map(|s| &s.events)
            .filter(|e| e.polarity.is_positive())
            .count(),
    );
    m.set("malformed_lines", parsed.skipped());
    m.set("dedup_policy", "none; repeated interactions are kept");
    m.set("exact_repeats", repeats);
    m.set("train_events", split.count(SplitKind::Train));
    m.set("validation_events", split.count(SplitKind::Validation));
    m.set("test_events", split.count(SplitKind::Test));
    write_prepared(&split, &m, out_dir)?;
    load_prepared(out_dir)
}

pub fn write_prepared(split: &SplitDataset, manifest: &KeyValues, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut inter = String::new();
    let mut spl = String::new();
    for (u, seq) in split.sequences.iter().enumerate() {
        for (i, (e, k)) in seq.events.iter().zip(split.assignment(u)).enumerate() {
            let _ = writeln!(
                inter,
                "{u}\t{}\t{}\t{}",
                e.item,
                e.polarity.is_positive() as u8,
                e.timestamp
            );
            let _ = writeln!(spl, "{u}\t{i}\t{k}");
        }
    }
    let map_text = |m: &IdMap| {
        let mut s = String::new();
        for (i, raw) in m.iter() {
            let _ = writeln!(s, "{i}\t{raw}");
        }
        s
    };
    let write = |name: &str, text: &str| -> Result<()> {
        let p = dir.join(name);
        fs::write(&p, text).map_err(|e| Error::io(p, e))
    };
    write(INTERACTIONS, &inter)?;
    write(SPLIT, &spl)?;
    write(USERS, &map_text(&split.users))?;
    write(ITEMS, &map_text(&split.items))?;
    write(MANIFEST, &manifest.to_text())
}

fn read(dir: &Path, name: &str) -> Result<(PathBuf, String)> {
    let p = dir.join(name);
    let text = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
    Ok((p, text))
}

fn parse_err(path: &Path, line: usize, detail: impl Into<String>) -> Error {
    Error::Parse {
        location: format!("{}:{}", path.display(), line + 1),
        detail: detail.into(),
    }
}

fn fields<'a>(path: &Path, i: usize, line: &'a str, n: usize) -> Result<Vec<&'a str>> {
    let f: Vec<&str> = line.split('\t').collect();
    if f.len() != n {
        return Err(parse_err(path, i, format!("expected {n} fields, got {}", f.len())));
    }
    Ok(f)
}

fn num<T: std::str::FromStr>(path: &Path, i: usize, s: &str) -> Result<T> {
    s.parse().map_err(|_| parse_err(path, i, format!("bad number `{s}`")))
}

fn read_map(dir: &Path, name: &str) -> Result<IdMap> {
    let (p, text) = read(dir, name)?;
    let mut raw = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let (idx, id) = line
            .split_once('\t')
            .ok_or_else(|| parse_err(&p, i, "expected `dense \\t raw`"))?;
        if num::<usize>(&p, i, idx)? != raw.len() {
            return Err(parse_err(&p, i, "dense ids must be consecutive from 0"));
        }
        raw.push(id.to_string());
    }
    IdMap::from_raw(raw)
}

pub fn load_prepared(dir: &Path) -> Result<PreparedDataset> {
    let (_, manifest_text) = read(dir, MANIFEST)?;
    let manifest = KeyValues::parse(&manifest_text, MANIFEST)?;
    let version: u32 = manifest.parse_value("format_version")?.unwrap_or(0);
    if version != PREPARED_FORMAT_VERSION {
        return Err(Error::Config(format!(
            "prepared dataset format version {version}, this build reads {PREPARED_FORMAT_VERSION}"
        )));
    }
    let users = read_map(dir, USERS)?;
    let items = read_map(dir, ITEMS)?;

    let mut sequences: Vec<UserSequence> = (0..users.len())
        .map(|u| UserSequence {
            user: u,
            events: Vec::new(),
        })
        .collect();
    let (p, text) = read(dir, INTERACTIONS)?;
    let mut order = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let f = fields(&p, i, line, 4)?;
        let u: usize = num(&p, i, f[0])?;
        let polarity = match f[2] {
            "1" => Polarity::Pos,
            "0" => Polarity::Neg,
            other => return Err(parse_err(&p, i, format!("polarity must be 0 or 1, got `{other}`"))),
        };
        let seq = sequences
            .get_mut(u)
            .ok_or_else(|| parse_err(&p, i, format!("user {u} not in users.map")))?;
        seq.events.push(Event {
            item: num(&p, i, f[1])?,
            polarity,
            timestamp: num(&p, i, f[3])?,
        });
        order.push(u);
    }
    if order.windows(2).any(|w| w[0] > w[1]) {
        return Err(parse_err(&p, 0, "rows must be grouped by ascending user id"));
    }

    let (p, text) = read(dir, SPLIT)?;
    let mut assignment: Vec<Vec<SplitKind>> = sequences.iter().map(|s| Vec::with_capacity(s.events.len())).collect();
    for (i, line) in text.lines().enumerate() {
        let f = fields(&p, i, line, 3)?;
        let u: usize = num(&p, i, f[0])?;
        let pos: usize = num(&p, i, f[1])?;
        let asg = assignment
            .get_mut(u)
            .ok_or_else(|| parse_err(&p, i, format!("user {u} not in users.map")))?;
        if asg.len() != pos {
            return Err(parse_err(&p, i, "split rows must follow interaction order"));
        }
        asg.push(f[2].parse()?);
    }

    let split = SplitDataset::from_assignment(users, items, sequences, assignment)?;
    Ok(PreparedDataset {
        split,
        manifest,
        manifest_hash: sha256_hex(manifest_text.as_bytes()),
    })
}
