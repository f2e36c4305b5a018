//! On-disk dataset: a binary motion payload plus a UTF-8 prompt sidecar.
//!
//! A dataset directory holds two files:
//!
//! * `motion.fdm`: header `b"FDMO"`, then little-endian `u32` version,
//!   joint count, frame count, `f32` fps, `u32` person count and sample count.
//!   Each sample follows as a `u32` id length, the UTF-8 id, and
//!   `persons × S × D` little-endian `f32` values in frame-major order.
//! * `prompts.tsv`: one line per sample,
//!   `id TAB overall TAB person1 TAB person2 TAB source`, with backslash,
//!   tab, CR and LF escaped.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::motion::{feature_dim, DualMotion, MotionSequence};
use crate::tensor::Mat;
use crate::text::{PromptRecord, PromptSource};

pub const MAGIC: &[u8; 4] = b"FDMO";
pub const VERSION: u32 = 1;
pub const MOTION_FILE: &str = "motion.fdm";
pub const PROMPT_FILE: &str = "prompts.tsv";

const HEADER_LEN: usize = 4 + 4 * 6;

/// One stored sample.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub motion: DualMotion,
    pub prompts: PromptRecord,
}

/// Serializes the motion payload of `samples`.
pub fn encode_motion(samples: &[Sample]) -> Result<Vec<u8>> {
    let first = samples.first().ok_or_else(|| Error::invalid("cannot encode an empty dataset"))?;
    let (nj, s, fps) = (first.motion.joint_count(), first.motion.frame_count(), first.motion.fps());
    let d = feature_dim(nj)?;
    let mut out = Vec::with_capacity(HEADER_LEN + samples.len() * (16 + 2 * s * d * 4));
    out.extend_from_slice(MAGIC);
    for v in [VERSION, nj as u32, s as u32] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.extend_from_slice(&fps.to_le_bytes());
    out.extend_from_slice(&2u32.to_le_bytes());
    out.extend_from_slice(&(samples.len() as u32).to_le_bytes());
    for sample in samples {
        let m = &sample.motion;
        if m.joint_count() != nj || m.frame_count() != s || m.fps().to_bits() != fps.to_bits() {
            return Err(Error::invalid(format!("sample '{}' does not match dataset dimensions", m.id)));
        }
        out.extend_from_slice(&(m.id.len() as u32).to_le_bytes());
        out.extend_from_slice(m.id.as_bytes());
        for p in m.persons() {
            for v in p.raw() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::format(self.pos as u64, format!("truncated while reading {what}")));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn f32(&mut self, what: &str) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }
}

/// Parses a motion payload into `(id, motion)` pairs.
pub fn decode_motion(buf: &[u8]) -> Result<Vec<DualMotion>> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::format(0, "bad magic bytes"));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::format(4, format!("unsupported version {version}")));
    }
    let nj = r.u32("joint count")? as usize;
    if nj == 0 {
        return Err(Error::format(8, "joint count must be positive"));
    }
    let s = r.u32("frame count")? as usize;
    if s == 0 {
        return Err(Error::format(12, "frame count must be positive"));
    }
    let fps = r.f32("fps")?;
    if !(fps.is_finite() && fps > 0.0) {
        return Err(Error::format(16, format!("invalid fps {fps}")));
    }
    let persons = r.u32("person count")?;
    if persons != 2 {
        return Err(Error::format(20, format!("expected 2 persons, found {persons}")));
    }
    let count = r.u32("sample count")? as usize;
    let d = feature_dim(nj).map_err(|_| Error::format(8, "invalid joint count"))?;
    let values = s
        .checked_mul(d)
        .ok_or_else(|| Error::format(12, "frame count overflows payload size"))?;
    let mut out = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let at = r.pos as u64;
        let id_len = r.u32("id length")? as usize;
        let id = std::str::from_utf8(r.take(id_len, "sample id")?)
            .map_err(|_| Error::format(at + 4, "sample id is not UTF-8"))?
            .to_string();
        let mut people = Vec::with_capacity(2);
        for _ in 0..2 {
            let raw = r.take(values * 4, "motion payload")?;
            let frames: Vec<f32> = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            people.push(
                MotionSequence::new(nj, fps, frames).map_err(|e| Error::format(at, e.to_string()))?,
            );
        }
        let p2 = people.pop().expect("two persons");
        let p1 = people.pop().expect("two persons");
        out.push(DualMotion::new(id, p1, p2).map_err(|e| Error::format(at, e.to_string()))?);
    }
    if r.pos != buf.len() {
        return Err(Error::format(r.pos as u64, "trailing bytes after last sample"));
    }
    Ok(out)
}

fn escape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for ch in s.chars() {
        match ch {
            '\\' => out.push_str("\\\\"),
            '\t' => out.push_str("\\t"),
            '\n' => out.push_str("\\n"),
            '\r' => out.push_str("\\r"),
            c => out.push(c),
        }
    }
    out
}

fn unescape(s: &str, offset: u64) -> Result<String> {
    let mut out = String::with_capacity(s.len());
    let mut it = s.chars();
    while let Some(ch) = it.next() {
        if ch != '\\' {
            out.push(ch);
            continue;
        }
        match it.next() {
            Some('\\') => out.push('\\'),
            Some('t') => out.push('\t'),
            Some('n') => out.push('\n'),
            Some('r') => out.push('\r'),
            other => {
                return Err(Error::format(offset, format!("bad escape sequence \\{other:?}")));
            }
        }
    }
    Ok(out)
}

pub fn encode_prompts(samples: &[Sample]) -> String {
    let mut out = String::new();
    for s in samples {
        let p = &s.prompts;
        let fields = [
            escape(&s.motion.id),
            escape(&p.overall),
            escape(&p.person1),
            escape(&p.person2),
            p.source.as_str().to_string(),
        ];
        out.push_str(&fields.join("\t"));
        out.push('\n');
    }
    out
}

/// Parses the prompt sidecar into `(id, record)` pairs.
pub fn decode_prompts(text: &str) -> Result<Vec<(String, PromptRecord)>> {
    let mut out = Vec::new();
    let mut offset = 0u64;
    for line in text.split_inclusive('\n') {
        let body = line.strip_suffix('\n').ok_or_else(|| {
            Error::format(offset, "prompt sidecar line is not LF-terminated")
        })?;
        let fields: Vec<&str> = body.split('\t').collect();
        if fields.len() != 5 {
            return Err(Error::format(offset, format!("expected 5 fields, found {}", fields.len())));
        }
        let source: PromptSource = fields[4].parse().map_err(|_| {
            Error::format(offset, format!("unknown prompt source '{}'", fields[4]))
        })?;
        out.push((
            unescape(fields[0], offset)?,
            PromptRecord {
                overall: unescape(fields[1], offset)?,
                person1: unescape(fields[2], offset)?,
                person2: unescape(fields[3], offset)?,
                source,
            },
        ));
        offset += line.len() as u64;
    }
    Ok(out)
}

/// Per-channel mean and standard deviation of motion features.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

/// Standard deviations below this are replaced by it.
pub const STD_FLOOR: f64 = 1e-3;

impl FeatureStats {
    /// Statistics over every frame of both persons of every sample.
    pub fn from_samples(samples: &[Sample]) -> Result<Self> {
        let first = samples.first().ok_or_else(|| Error::invalid("cannot compute statistics of an empty dataset"))?;
        let d = first.motion.feature_dim();
        let mut sum = vec![0.0; d];
        let mut sq = vec![0.0; d];
        let mut n = 0usize;
        for s in samples {
            if s.motion.feature_dim() != d {
                return Err(Error::invalid("samples differ in feature width"));
            }
            for person in s.motion.persons() {
                for f in 0..person.frame_count() {
                    for (c, &v) in person.frame(f).iter().enumerate() {
                        sum[c] += v as f64;
                        sq[c] += (v as f64) * (v as f64);
                    }
                    n += 1;
                }
            }
        }
        let mean: Vec<f64> = sum.iter().map(|s| s / n as f64).collect();
        let std = sq
            .iter()
            .zip(&mean)
            .map(|(q, m)| (q / n as f64 - m * m).max(0.0).sqrt().max(STD_FLOOR))
            .collect();
        Ok(Self { mean, std })
    }

    pub fn identity(width: usize) -> Self {
        Self { mean: vec![0.0; width], std: vec![1.0; width] }
    }

    pub fn width(&self) -> usize {
        self.mean.len()
    }

    pub fn normalize(&self, m: &Mat) -> Mat {
        self.apply(m, |v, mu, sd| (v - mu) / sd)
    }

    pub fn denormalize(&self, m: &Mat) -> Mat {
        self.apply(m, |v, mu, sd| v * sd + mu)
    }

    fn apply(&self, m: &Mat, f: impl Fn(f64, f64, f64) -> f64) -> Mat {
        assert_eq!(m.cols(), self.width(), "feature width mismatch");
        let mut out = m.clone();
        for r in 0..m.rows() {
            for ((o, mu), sd) in out.row_mut(r).iter_mut().zip(&self.mean).zip(&self.std) {
                *o = f(*o, *mu, *sd);
            }
        }
        out
    }
}

/// Writes `samples` into directory `dir`, creating it if needed.
pub fn save_dataset(dir: &Path, samples: &[Sample]) -> Result<()> {
    fs::create_dir_all(dir)?;
    let payload = encode_motion(samples)?;
    let mut w = BufWriter::new(fs::File::create(dir.join(MOTION_FILE))?);
    w.write_all(&payload)?;
    w.flush()?;
    fs::write(dir.join(PROMPT_FILE), encode_prompts(samples))?;
    Ok(())
}

pub fn load_dataset(dir: &Path) -> Result<Vec<Sample>> {
    let motions = decode_motion(&fs::read(dir.join(MOTION_FILE))?)?;
    let raw = fs::read(dir.join(PROMPT_FILE))?;
    let text = String::from_utf8(raw)
        .map_err(|e| Error::format(e.utf8_error().valid_up_to() as u64, "prompt sidecar is not UTF-8"))?;
    let prompts = decode_prompts(&text)?;
    if prompts.len() != motions.len() {
        return Err(Error::format(
            0,
            format!("{} prompt records for {} motions", prompts.len(), motions.len()),
        ));
    }
    motions
        .into_iter()
        .zip(prompts)
        .map(|(motion, (id, prompts))| {
            if id != motion.id {
                return Err(Error::format(0, format!("prompt id '{id}' != motion id '{}'", motion.id)));
            }
            Ok(Sample { motion, prompts })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{synth_generate, Scenario, SynthConfig};
    use crate::text::decompose_prompt;

    fn samples(n: usize) -> Vec<Sample> {
        (0..n)
            .map(|i| {
                let sc = Scenario::ALL[i % 4];
                let (motion, overall) =
                    synth_generate(sc, &SynthConfig::default(), i as u64).unwrap();
                Sample { motion, prompts: decompose_prompt(&overall, None) }
            })
            .collect()
    }

    #[test]
    fn round_trip_three_samples() {
        let dir = tempfile::tempdir().unwrap();
        let data = samples(3);
        save_dataset(dir.path(), &data).unwrap();
        let back = load_dataset(dir.path()).unwrap();
        assert_eq!(back, data);
        let sidecar = fs::read(dir.path().join(PROMPT_FILE)).unwrap();
        assert_eq!(sidecar, encode_prompts(&back).into_bytes());
    }

    #[test]
    fn truncated_payload_is_format_error() {
        let buf = encode_motion(&samples(1)).unwrap();
        for cut in [2, HEADER_LEN - 1, buf.len() - 3] {
            let err = decode_motion(&buf[..cut]).unwrap_err();
            assert!(matches!(err, Error::Format { .. }), "cut {cut}: {err}");
        }
    }

    #[test]
    fn zero_joint_header_is_format_error() {
        let mut buf = encode_motion(&samples(1)).unwrap();
        buf[8..12].copy_from_slice(&0u32.to_le_bytes());
        match decode_motion(&buf) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, 8),
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn dimension_mismatch_is_format_error() {
        let mut buf = encode_motion(&samples(1)).unwrap();
        buf[8..12].copy_from_slice(&6u32.to_le_bytes());
        assert!(matches!(decode_motion(&buf), Err(Error::Format { .. })));
    }

    #[test]
    fn prompt_escapes_round_trip() {
        let mut data = samples(1);
        data[0].prompts.overall = "tab\there\nnew \\ line".into();
        let back = decode_prompts(&encode_prompts(&data)).unwrap();
        assert_eq!(back[0].1, data[0].prompts);
    }

    #[test]
    fn feature_stats_round_trip() {
        let data = samples(4);
        let stats = FeatureStats::from_samples(&data).unwrap();
        let m = data[0].motion.person1.to_mat();
        let back = stats.denormalize(&stats.normalize(&m));
        assert!(back.max_abs_diff(&m) < 1e-9);
        // Brute-force mean of channel 0.
        let mut total = 0.0;
        let mut n = 0.0;
        for s in &data {
            for p in s.motion.persons() {
                for f in 0..p.frame_count() {
                    total += p.frame(f)[0] as f64;
                    n += 1.0;
                }
            }
        }
        assert!((stats.mean[0] - total / n).abs() < 1e-9);
        assert!(stats.std.iter().all(|&s| s >= STD_FLOOR));
    }
}
