//! Binary checkpoints of named parameter tensors.
//!
//! Layout (little-endian): magic `b"FDCK"`, `u32` version, then
//! length-prefixed UTF-8 strings for the kind, the config TOML and its
//! fingerprint, a `u64` step count, feature statistics, the parameter
//! tensors (name, rows, cols, `f64` data) and an optional Adam state.

use std::fs;
use std::path::Path;

use crate::autodiff::ParamStore;
use crate::config::RunConfig;
use crate::dataset::FeatureStats;
use crate::error::{Error, Result};
use crate::optim::Adam;
use crate::tensor::Mat;

pub const MAGIC: &[u8; 4] = b"FDCK";
pub const VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CheckpointKind {
    Model,
    Evaluator,
}

impl CheckpointKind {
    fn tag(self) -> &'static str {
        match self {
            CheckpointKind::Model => "model",
            CheckpointKind::Evaluator => "evaluator",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub kind: CheckpointKind,
    pub config: RunConfig,
    pub fingerprint: String,
    pub step: u64,
    pub stats: FeatureStats,
    pub params: Vec<(String, Mat)>,
    pub optimizer: Option<Adam>,
}

impl Checkpoint {
    pub fn new(
        kind: CheckpointKind,
        config: &RunConfig,
        step: u64,
        stats: &FeatureStats,
        store: &ParamStore,
        optimizer: Option<&Adam>,
    ) -> Self {
        Self {
            kind,
            config: config.clone(),
            fingerprint: config.fingerprint(),
            step,
            stats: stats.clone(),
            params: store.iter().map(|(n, m)| (n.to_string(), m.clone())).collect(),
            optimizer: optimizer.cloned(),
        }
    }

    /// Copies parameters into `store`, which must hold exactly the same
    /// names and shapes.
    pub fn restore_into(&self, store: &mut ParamStore) -> Result<()> {
        if store.len() != self.params.len() {
            return Err(Error::contract(format!(
                "checkpoint has {} tensors, model expects {}",
                self.params.len(),
                store.len()
            )));
        }
        for (name, value) in &self.params {
            let id = store.id(name).ok_or_else(|| Error::contract(format!("unknown tensor '{name}'")))?;
            if store.get(id).shape() != value.shape() {
                return Err(Error::contract(format!(
                    "tensor '{name}' has shape {:?}, model expects {:?}",
                    value.shape(),
                    store.get(id).shape()
                )));
            }
            *store.get_mut(id) = value.clone();
        }
        Ok(())
    }

    /// Fails unless the stored fingerprint matches `expected` (or `force`).
    pub fn check_fingerprint(&self, expected: &str, force: bool) -> Result<()> {
        if self.fingerprint != expected && !force {
            return Err(Error::contract(format!(
                "checkpoint fingerprint {} does not match config fingerprint {expected} (use --force to override)",
                self.fingerprint
            )));
        }
        Ok(())
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        put_str(&mut out, self.kind.tag());
        put_str(&mut out, &self.config.to_toml());
        put_str(&mut out, &self.fingerprint);
        out.extend_from_slice(&self.step.to_le_bytes());
        put_f64s(&mut out, &self.stats.mean);
        put_f64s(&mut out, &self.stats.std);
        put_tensors(&mut out, self.params.iter().map(|(n, m)| (n.as_str(), m)));
        match &self.optimizer {
            None => out.push(0),
            Some(adam) => {
                out.push(1);
                for v in [adam.beta1, adam.beta2, adam.eps] {
                    out.extend_from_slice(&v.to_le_bytes());
                }
                out.extend_from_slice(&adam.step.to_le_bytes());
                put_tensors(&mut out, adam.m.iter().map(|m| ("m", m)));
                put_tensors(&mut out, adam.v.iter().map(|m| ("v", m)));
            }
        }
        out
    }

    pub fn decode(buf: &[u8]) -> Result<Self> {
        let mut r = Reader { buf, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::format(0, "not a checkpoint (bad magic)"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::format(4, format!("unsupported checkpoint version {version}")));
        }
        let kind_at = r.pos as u64;
        let kind = match r.string()?.as_str() {
            "model" => CheckpointKind::Model,
            "evaluator" => CheckpointKind::Evaluator,
            other => return Err(Error::format(kind_at, format!("unknown checkpoint kind '{other}'"))),
        };
        let config_at = r.pos as u64;
        let config = RunConfig::from_toml(&r.string()?)
            .map_err(|e| Error::format(config_at, format!("embedded config invalid: {e}")))?;
        let fingerprint = r.string()?;
        let step = r.u64()?;
        let mean = r.f64s()?;
        let std = r.f64s()?;
        if mean.len() != std.len() {
            return Err(Error::format(r.pos as u64, "feature statistics lengths differ"));
        }
        let params = r.tensors()?;
        let optimizer = match r.take(1)?[0] {
            0 => None,
            1 => {
                let beta1 = r.f64()?;
                let beta2 = r.f64()?;
                let eps = r.f64()?;
                let step = r.u64()?;
                let m = r.tensors()?.into_iter().map(|(_, m)| m).collect();
                let v = r.tensors()?.into_iter().map(|(_, m)| m).collect();
                Some(Adam { beta1, beta2, eps, step, m, v })
            }
            other => return Err(Error::format(r.pos as u64 - 1, format!("bad optimizer flag {other}"))),
        };
        if r.pos != buf.len() {
            return Err(Error::format(r.pos as u64, "trailing bytes after checkpoint"));
        }
        Ok(Self { kind, config, fingerprint, step, stats: FeatureStats { mean, std }, params, optimizer })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            if !dir.as_os_str().is_empty() {
                fs::create_dir_all(dir)?;
            }
        }
        // Write then rename so a crash never leaves a truncated checkpoint.
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, self.encode())?;
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::decode(&fs::read(path)?)
    }
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

fn put_f64s(out: &mut Vec<u8>, v: &[f64]) {
    out.extend_from_slice(&(v.len() as u32).to_le_bytes());
    for x in v {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

fn put_tensors<'a>(out: &mut Vec<u8>, items: impl ExactSizeIterator<Item = (&'a str, &'a Mat)>) {
    out.extend_from_slice(&(items.len() as u32).to_le_bytes());
    for (name, m) in items {
        put_str(out, name);
        out.extend_from_slice(&(m.rows() as u32).to_le_bytes());
        out.extend_from_slice(&(m.cols() as u32).to_le_bytes());
        for x in m.data() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::format(self.pos as u64, format!("truncated: needed {n} more bytes")));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self) -> Result<String> {
        let at = self.pos as u64;
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::format(at, "string is not UTF-8"))
    }

    fn f64s(&mut self) -> Result<Vec<f64>> {
        let n = self.u32()? as usize;
        (0..n).map(|_| self.f64()).collect()
    }

    fn tensors(&mut self) -> Result<Vec<(String, Mat)>> {
        let n = self.u32()? as usize;
        let mut out = Vec::with_capacity(n.min(1 << 16));
        for _ in 0..n {
            let name = self.string()?;
            let rows = self.u32()? as usize;
            let cols = self.u32()? as usize;
            let at = self.pos as u64;
            let len = rows.checked_mul(cols).ok_or_else(|| Error::format(at, "tensor size overflows"))?;
            if len.checked_mul(8).map_or(true, |b| b > self.buf.len() - self.pos) {
                return Err(Error::format(at, format!("tensor '{name}' runs past end of file")));
            }
            let data = (0..len).map(|_| self.f64()).collect::<Result<Vec<_>>>()?;
            out.push((name, Mat::from_vec(rows, cols, data)));
        }
        Ok(out)
    }
}
