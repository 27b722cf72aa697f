//! Versioned binary checkpoints.
//!
//! ```text
//! magic "NLQ4RCKP" | version u32
//! config:        u32 length + UTF-8 `key = value` text
//! manifest hash: u32 length + UTF-8 hex
//! array count:   u32
//! per array:     u32 name length + name | u8 trainable | u32 ndim | u64 dims...
//!                | u64 payload bytes | f32 little-endian payload
//! ```
//! All integers are little-endian. Parameters are stored as f32 whatever the
//! in-memory scalar type.

use std::fs;
use std::path::Path;

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::kv::KeyValues;
use crate::model::Model;
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"NLQ4RCKP";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug)]
pub struct CheckpointMeta {
    pub version: u32,
    pub config: ModelConfig,
    pub num_users: usize,
    pub num_items: usize,
    pub manifest_hash: String,
}

fn put_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn put_str(buf: &mut Vec<u8>, s: &str) {
    put_u32(buf, s.len() as u32);
    buf.extend_from_slice(s.as_bytes());
}

pub fn encode<T: Scalar>(model: &Model<T>, manifest_hash: &str) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    put_u32(&mut buf, FORMAT_VERSION);
    let mut cfg = model.config().to_kv();
    cfg.set("num_users", model.num_users());
    cfg.set("num_items", model.num_items());
    put_str(&mut buf, &cfg.to_text());
    put_str(&mut buf, manifest_hash);
    put_u32(&mut buf, model.params().len() as u32);
    for (_, p) in model.params().iter() {
        put_str(&mut buf, &p.name);
        buf.push(p.trainable as u8);
        put_u32(&mut buf, p.value.ndim() as u32);
        for &d in p.value.shape() {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        buf.extend_from_slice(&((p.value.len() * 4) as u64).to_le_bytes());
        for &x in p.value.data() {
            buf.extend_from_slice(&x.as_f32().to_le_bytes());
        }
    }
    buf
}

struct Reader<'a> {
    buf: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let left = self.buf.len() - self.at;
        if left < n {
            return Err(Error::Checkpoint(format!(
                "truncated {what}: expected {n} bytes, found {left}"
            )));
        }
        let s = &self.buf[self.at..self.at + n];
        self.at += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn string(&mut self, what: &str) -> Result<String> {
        let n = self.u32(what)? as usize;
        String::from_utf8(self.take(n, what)?.to_vec())
            .map_err(|_| Error::Checkpoint(format!("{what} is not valid UTF-8")))
    }
}

pub fn decode<T: Scalar>(bytes: &[u8]) -> Result<(Model<T>, CheckpointMeta)> {
    let mut r = Reader { buf: bytes, at: 0 };
    if r.take(MAGIC.len(), "header")? != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint file (bad magic bytes)".into()));
    }
    let version = r.u32("format version")?;
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "checkpoint format version {version}, this build reads version {FORMAT_VERSION}"
        )));
    }
    let cfg_text = r.string("config block")?;
    let cfg = KeyValues::parse(&cfg_text, "checkpoint config")?;
    let config = ModelConfig::from_kv(&cfg)?;
    let num_users: usize = cfg
        .parse_value("num_users")?
        .ok_or_else(|| Error::Checkpoint("config block lacks num_users".into()))?;
    let num_items: usize = cfg
        .parse_value("num_items")?
        .ok_or_else(|| Error::Checkpoint("config block lacks num_items".into()))?;
    let manifest_hash = r.string("manifest hash")?;

    let count = r.u32("array count")?;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let name = r.string("array name")?;
        let trainable = r.take(1, "array flags")?[0] != 0;
        let ndim = r.u32("array rank")? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.u64("array shape")? as usize);
        }
        let elems: usize = shape.iter().product();
        let declared = r.u64("payload length")? as usize;
        if declared != elems * 4 {
            return Err(Error::Checkpoint(format!(
                "array `{name}`: shape {shape:?} needs {} payload bytes, header says {declared}",
                elems * 4
            )));
        }
        let payload = r.take(declared, &format!("payload of array `{name}`"))?;
        let data = payload
            .chunks_exact(4)
            .map(|c| T::from_f64_lossy(f32::from_le_bytes(c.try_into().unwrap()) as f64))
            .collect();
        store.add(name, Tensor::new(shape, data)?, trainable)?;
    }
    if r.at != bytes.len() {
        return Err(Error::Checkpoint(format!(
            "{} trailing bytes after the last array",
            bytes.len() - r.at
        )));
    }
    let model = Model::from_params(config.clone(), num_users, num_items, store)?;
    Ok((
        model,
        CheckpointMeta {
            version,
            config,
            num_users,
            num_items,
            manifest_hash,
        },
    ))
}

pub fn save_checkpoint<T: Scalar>(path: &Path, model: &Model<T>, manifest_hash: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    // write-then-rename so a crash never leaves a half-written best checkpoint
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, encode(model, manifest_hash)).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Loads a checkpoint; with `expected_manifest` set, refuses one trained on a
/// different prepared dataset.
pub fn load_checkpoint<T: Scalar>(path: &Path, expected_manifest: Option<&str>) -> Result<(Model<T>, CheckpointMeta)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (model, meta) = decode(&bytes)?;
    if let Some(expected) = expected_manifest {
        if meta.manifest_hash != expected {
            return Err(Error::Checkpoint(format!(
                "checkpoint was trained on dataset manifest {}, but the dataset's manifest is {expected}",
                meta.manifest_hash
            )));
        }
    }
    Ok((model, meta))
}
