//! Dataset persistence: a manifest plus one binary blob per scenario.
//!
//! Blob layout (all integers and floats little-endian):
//!
//! ```text
//! magic    8 bytes  "MASRAREC"
//! version  u32      1
//! flags    u32      bit 0: priors present
//! t l c_v c_q d     u32 each
//! gt_s gt_e         u32 each, 1-based inclusive clip indices
//! video             t*c_v f32, row-major
//! query             l*c_q f32, row-major
//! saliency          t f32
//! -- if priors --
//! m                 u32
//! spans             m * (u32, u32)
//! descriptions      m*d f32, row-major
//! captions          t*d f32, row-major
//! relation          t*t f32, row-major
//! ```

use super::{generate_scenario, EventPrior, Scenario, ScenarioConfig, ScenarioPriors};
use crate::error::{Error, Result};
use crate::nn::Tensor2D;
use ndarray::Array2;
use serde::{Deserialize, Serialize};
use std::fs;
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};

const MAGIC: &[u8; 8] = b"MASRAREC";
const BLOB_VERSION: u32 = 1;
const FLAG_PRIORS: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RecordMeta {
    pub id: u64,
    pub file: String,
    pub split: Split,
    pub t: usize,
    pub l: usize,
    pub c_v: usize,
    pub c_q: usize,
    pub d: usize,
    pub m: usize,
    pub has_priors: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub config: ScenarioConfig,
    pub n: usize,
    pub base_seed: u64,
    pub val_frac: f64,
    pub records: Vec<RecordMeta>,
}

/// Handle to an on-disk dataset; records are loaded lazily.
#[derive(Debug, Clone)]
pub struct Dataset {
    dir: PathBuf,
    pub manifest: Manifest,
}

impl Dataset {
    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn len(&self) -> usize {
        self.manifest.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.manifest.records.is_empty()
    }

    pub fn indices(&self, split: Option<Split>) -> Vec<usize> {
        self.manifest
            .records
            .iter()
            .enumerate()
            .filter(|(_, r)| split.map_or(true, |s| r.split == s))
            .map(|(i, _)| i)
            .collect()
    }

    pub fn load_record(&self, idx: usize) -> Result<Scenario> {
        let meta = self
            .manifest
            .records
            .get(idx)
            .ok_or_else(|| Error::InvalidArg {
                op: "Dataset::load_record",
                reason: format!("index {idx} out of {}", self.len()),
            })?;
        read_record(&self.dir.join(&meta.file), meta)
    }

    /// Streaming iteration over one split (or everything).
    pub fn iter(&self, split: Option<Split>) -> impl Iterator<Item = Result<Scenario>> + '_ {
        self.indices(split)
            .into_iter()
            .map(move |i| self.load_record(i))
    }

    pub fn load_split(&self, split: Split) -> Result<Vec<Scenario>> {
        self.iter(Some(split)).collect()
    }
}

/// Evenly spread validation assignment: record `i` is `val` when the
/// Bresenham accumulator `floor((i+1)*n_val/n)` advances. Exact counts for
/// any `n` and deterministic given the manifest ordering.
fn assign_split(i: usize, n: usize, n_val: usize) -> Split {
    if ((i + 1) * n_val) / n > (i * n_val) / n {
        Split::Val
    } else {
        Split::Train
    }
}

pub fn generate_dataset(
    config: &ScenarioConfig,
    n: usize,
    base_seed: u64,
    val_frac: f64,
    dir: &Path,
) -> Result<Dataset> {
    if n == 0 {
        return Err(Error::InvalidArg {
            op: "generate_dataset",
            reason: "n must be >= 1".into(),
        });
    }
    if !(0.0..1.0).contains(&val_frac) {
        return Err(Error::InvalidArg {
            op: "generate_dataset",
            reason: format!("val_frac must be in [0, 1), got {val_frac}"),
        });
    }
    config.validate()?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let n_val = (n as f64 * val_frac).floor() as usize;
    let mut records = Vec::with_capacity(n);
    for i in 0..n {
        let mut cfg = config.clone();
        cfg.seed = base_seed + i as u64;
        let scenario = generate_scenario(&cfg)?;
        let file = format!("rec_{i:05}.bin");
        write_record(&dir.join(&file), &scenario)?;
        records.push(RecordMeta {
            id: scenario.id,
            file,
            split: assign_split(i, n, n_val),
            t: cfg.t,
            l: cfg.l,
            c_v: cfg.c_v,
            c_q: cfg.c_q,
            d: cfg.d,
            m: scenario.priors.as_ref().map_or(0, |p| p.events.len()),
            has_priors: true,
        });
    }
    let manifest = Manifest {
        version: 1,
        config: config.clone(),
        n,
        base_seed,
        val_frac,
        records,
    };
    write_manifest(dir, &manifest)?;
    Ok(Dataset {
        dir: dir.to_path_buf(),
        manifest,
    })
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let path = dir.join("manifest.json");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| Error::CorruptRecord {
        record: "manifest.json".into(),
        reason: e.to_string(),
    })?;
    if manifest.version != 1 {
        return Err(Error::CorruptRecord {
            record: "manifest.json".into(),
            reason: format!("unsupported manifest version {}", manifest.version),
        });
    }
    Ok(Dataset {
        dir: dir.to_path_buf(),
        manifest,
    })
}

/// Copy a dataset to `dst` with every prior section removed; used to verify
/// that evaluation never reads training-only supervision.
pub fn write_stripped_copy(src: &Dataset, dst: &Path) -> Result<Dataset> {
    fs::create_dir_all(dst).map_err(|e| Error::io(dst, e))?;
    let mut manifest = src.manifest.clone();
    for (i, meta) in manifest.records.iter_mut().enumerate() {
        let mut scenario = src.load_record(i)?;
        scenario.priors = None;
        write_record(&dst.join(&meta.file), &scenario)?;
        meta.has_priors = false;
        meta.m = 0;
    }
    write_manifest(dst, &manifest)?;
    Ok(Dataset {
        dir: dst.to_path_buf(),
        manifest,
    })
}

fn write_manifest(dir: &Path, manifest: &Manifest) -> Result<()> {
    let path = dir.join("manifest.json");
    let text = serde_json::to_string_pretty(manifest).expect("manifest serializes");
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

// ---- blob codec -------------------------------------------------------------

struct BlobWriter<W: Write> {
    w: W,
}

impl<W: Write> BlobWriter<W> {
    fn u32(&mut self, v: u32) -> std::io::Result<()> {
        self.w.write_all(&v.to_le_bytes())
    }

    fn f32s(&mut self, vals: impl Iterator<Item = f64>) -> std::io::Result<()> {
        for v in vals {
            self.w.write_all(&(v as f32).to_le_bytes())?;
        }
        Ok(())
    }
}

pub fn write_record(path: &Path, s: &Scenario) -> Result<()> {
    let io_err = |e: std::io::Error| Error::io(path, e);
    let f = fs::File::create(path).map_err(io_err)?;
    let mut w = BlobWriter {
        w: BufWriter::new(f),
    };
    let (t, c_v) = (s.video.rows(), s.video.cols());
    let (l, c_q) = (s.query.rows(), s.query.cols());
    let d = s
        .priors
        .as_ref()
        .map(|p| p.clip_captions.cols())
        .unwrap_or(0);
    w.w.write_all(MAGIC).map_err(io_err)?;
    w.u32(BLOB_VERSION).map_err(io_err)?;
    let flags = if s.priors.is_some() { FLAG_PRIORS } else { 0 };
    w.u32(flags).map_err(io_err)?;
    for v in [t, l, c_v, c_q, d] {
        w.u32(v as u32).map_err(io_err)?;
    }
    w.u32(s.gt_span.0 as u32).map_err(io_err)?;
    w.u32(s.gt_span.1 as u32).map_err(io_err)?;
    w.f32s(s.video.array().iter().copied()).map_err(io_err)?;
    w.f32s(s.query.array().iter().copied()).map_err(io_err)?;
    w.f32s(s.saliency_gt.iter().copied()).map_err(io_err)?;
    if let Some(p) = &s.priors {
        w.u32(p.events.len() as u32).map_err(io_err)?;
        for ev in &p.events {
            w.u32(ev.span.0 as u32).map_err(io_err)?;
            w.u32(ev.span.1 as u32).map_err(io_err)?;
        }
        w.f32s(p.events.iter().flat_map(|e| e.description.iter().copied()))
            .map_err(io_err)?;
        w.f32s(p.clip_captions.array().iter().copied())
            .map_err(io_err)?;
        w.f32s(p.relation.array().iter().copied()).map_err(io_err)?;
    }
    w.w.flush().map_err(io_err)
}

struct BlobReader {
    buf: Vec<u8>,
    pos: usize,
    record: String,
}

impl BlobReader {
    fn corrupt(&self, reason: impl Into<String>) -> Error {
        Error::CorruptRecord {
            record: self.record.clone(),
            reason: reason.into(),
        }
    }

    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.pos + n > self.buf.len() {
            return Err(self.corrupt(format!(
                "truncated: wanted {n} bytes at offset {}, file has {}",
                self.pos,
                self.buf.len()
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f64>> {
        let b = self.take(4 * n)?;
        Ok(b.chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect())
    }

    fn matrix(&mut self, rows: usize, cols: usize) -> Result<Tensor2D> {
        let vals = self.f32s(rows * cols)?;
        let arr = Array2::from_shape_vec((rows, cols), vals)
            .map_err(|e| self.corrupt(e.to_string()))?;
        Tensor2D::new(arr).map_err(|e| self.corrupt(e.to_string()))
    }
}

pub fn read_record(path: &Path, meta: &RecordMeta) -> Result<Scenario> {
    let mut buf = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut buf))
        .map_err(|e| Error::io(path, e))?;
    let mut r = BlobReader {
        buf,
        pos: 0,
        record: meta.file.clone(),
    };
    if r.take(8)? != MAGIC {
        return Err(r.corrupt("bad magic"));
    }
    let version = r.u32()?;
    if version != BLOB_VERSION {
        return Err(r.corrupt(format!("unsupported blob version {version}")));
    }
    let flags = r.u32()?;
    let t = r.u32()? as usize;
    let l = r.u32()? as usize;
    let c_v = r.u32()? as usize;
    let c_q = r.u32()? as usize;
    let d = r.u32()? as usize;
    let has_priors = flags & FLAG_PRIORS != 0;
    // Manifest and blob must agree before any payload is trusted.
    if t != meta.t || l != meta.l || c_v != meta.c_v || c_q != meta.c_q {
        return Err(Error::ShapeMismatch {
            op: "read_record",
            expected: format!(
                "manifest t={} l={} c_v={} c_q={} for {}",
                meta.t, meta.l, meta.c_v, meta.c_q, meta.file
            ),
            got: format!("blob t={t} l={l} c_v={c_v} c_q={c_q}"),
        });
    }
    if has_priors != meta.has_priors || (has_priors && d != meta.d) {
        return Err(Error::ShapeMismatch {
            op: "read_record",
            expected: format!(
                "manifest has_priors={} d={} for {}",
                meta.has_priors, meta.d, meta.file
            ),
            got: format!("blob has_priors={has_priors} d={d}"),
        });
    }
    let gt_s = r.u32()? as usize;
    let gt_e = r.u32()? as usize;
    if !(1 <= gt_s && gt_s < gt_e && gt_e <= t) {
        return Err(r.corrupt(format!("invalid gt span ({gt_s}, {gt_e}) for t={t}")));
    }
    let video = r.matrix(t, c_v)?;
    let query = r.matrix(l, c_q)?;
    let saliency_gt = r.f32s(t)?;
    let priors = if has_priors {
        let m = r.u32()? as usize;
        if m != meta.m {
            return Err(Error::ShapeMismatch {
                op: "read_record",
                expected: format!("manifest m={} for {}", meta.m, meta.file),
                got: format!("blob m={m}"),
            });
        }
        let mut spans = Vec::with_capacity(m);
        for _ in 0..m {
            let s = r.u32()? as usize;
            let e = r.u32()? as usize;
            if !(1 <= s && s <= e && e <= t) {
                return Err(r.corrupt(format!("invalid event span ({s}, {e}) for t={t}")));
            }
            spans.push((s, e));
        }
        let descriptions = r.matrix(m.max(1), d)?;
        let events = spans
            .into_iter()
            .enumerate()
            .map(|(i, span)| EventPrior {
                description: descriptions.row(i),
                span,
            })
            .collect();
        let clip_captions = r.matrix(t, d)?;
        let relation = r.matrix(t, t)?;
        Some(ScenarioPriors {
            events,
            clip_captions,
            relation,
        })
    } else {
        None
    };
    if r.pos != r.buf.len() {
        return Err(r.corrupt(format!(
            "{} trailing bytes after payload",
            r.buf.len() - r.pos
        )));
    }
    Ok(Scenario {
        id: meta.id,
        video,
        query,
        gt_span: (gt_s, gt_e),
        saliency_gt,
        priors,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tmpdir(name: &str) -> PathBuf {
        let dir = std::env::temp_dir().join(format!("masra_io_{}_{}", name, std::process::id()));
        let _ = fs::remove_dir_all(&dir);
        dir
    }

    fn small_cfg() -> ScenarioConfig {
        ScenarioConfig {
            t: 16,
            l: 4,
            c_v: 12,
            c_q: 12,
            d: 8,
            m_range: (2, 4),
            noise_sigma: 0.1,
            seed: 0,
        }
    }

    #[test]
    fn round_trip_is_exact_at_f32() {
        let dir = tmpdir("roundtrip");
        let ds = generate_dataset(&small_cfg(), 5, 100, 0.2, &dir).unwrap();
        for i in 0..5 {
            let mut cfg = small_cfg();
            cfg.seed = 100 + i as u64;
            let original = generate_scenario(&cfg).unwrap();
            let loaded = ds.load_record(i).unwrap();
            // Every loaded value equals the f32 rounding of the original.
            for (a, b) in original
                .video
                .array()
                .iter()
                .zip(loaded.video.array().iter())
            {
                assert_eq!(*a as f32 as f64, *b);
            }
            assert_eq!(original.gt_span, loaded.gt_span);
            let (po, pl) = (
                original.priors.as_ref().unwrap(),
                loaded.priors.as_ref().unwrap(),
            );
            assert_eq!(po.events.len(), pl.events.len());
            for (eo, el) in po.events.iter().zip(pl.events.iter()) {
                assert_eq!(eo.span, el.span);
                for (a, b) in eo.description.iter().zip(el.description.iter()) {
                    assert_eq!(*a as f32 as f64, *b);
                }
            }
        }
        fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let dir = tmpdir("stable");
        let ds = generate_dataset(&small_cfg(), 3, 7, 0.0, &dir).unwrap();
        let first = fs::read(dir.join("rec_00001.bin")).unwrap();
        let s = ds.load_record(1).unwrap();
        let path2 = dir.join("rewrite.bin");
        write_record(&path2, &s).unwrap();
        let second = fs::read(&path2).unwrap();
        assert_eq!(first, second);
        fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn regeneration_is_byte_identical() {
        let d1 = tmpdir("regen1");
        let d2 = tmpdir("regen2");
        generate_dataset(&small_cfg(), 10, 55, 0.2, &d1).unwrap();
        generate_dataset(&small_cfg(), 10, 55, 0.2, &d2).unwrap();
        let m1 = fs::read(d1.join("manifest.json")).unwrap();
        let m2 = fs::read(d2.join("manifest.json")).unwrap();
        assert_eq!(m1, m2);
        for i in 0..10 {
            let f = format!("rec_{i:05}.bin");
            assert_eq!(
                fs::read(d1.join(&f)).unwrap(),
                fs::read(d2.join(&f)).unwrap(),
                "{f}"
            );
        }
        fs::remove_dir_all(&d1).unwrap();
        fs::remove_dir_all(&d2).unwrap();
    }

    #[test]
    fn split_counts_are_exact() {
        let dir = tmpdir("split");
        let ds = generate_dataset(&small_cfg(), 100, 0, 0.2, &dir).unwrap();
        assert_eq!(ds.indices(Some(Split::Train)).len(), 80);
        assert_eq!(ds.indices(Some(Split::Val)).len(), 20);
        fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn singleton_dataset_matches_direct_generation() {
        let dir = tmpdir("singleton");
        let ds = generate_dataset(&small_cfg(), 1, 42, 0.0, &dir).unwrap();
        let mut cfg = small_cfg();
        cfg.seed = 42;
        let direct = generate_scenario(&cfg).unwrap();
        let loaded = ds.load_record(0).unwrap();
        assert_eq!(loaded.id, direct.id);
        assert_eq!(loaded.gt_span, direct.gt_span);
        assert_eq!(
            loaded.priors.as_ref().unwrap().events.len(),
            direct.priors.as_ref().unwrap().events.len()
        );
        fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn truncated_blob_names_the_record() {
        let dir = tmpdir("trunc");
        let ds = generate_dataset(&small_cfg(), 2, 1, 0.0, &dir).unwrap();
        let path = dir.join("rec_00000.bin");
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
        let err = ds.load_record(0).unwrap_err().to_string();
        assert!(err.contains("rec_00000.bin"), "{err}");
        assert!(err.contains("truncated"), "{err}");
        fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn manifest_blob_shape_disagreement_errors() {
        let dir = tmpdir("shapes");
        let ds = generate_dataset(&small_cfg(), 1, 3, 0.0, &dir).unwrap();
        let mut manifest = ds.manifest.clone();
        manifest.records[0].t = 32; // blob actually holds t = 16
        write_manifest(&dir, &manifest).unwrap();
        let reloaded = load_dataset(&dir).unwrap();
        let err = reloaded.load_record(0).unwrap_err().to_string();
        assert!(err.contains("t=32") && err.contains("t=16"), "{err}");
        fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn hundred_record_round_trip_exact() {
        let dir = tmpdir("hundred");
        let mut cfg = small_cfg();
        cfg.t = 8;
        cfg.m_range = (2, 3);
        let ds = generate_dataset(&cfg, 100, 500, 0.2, &dir).unwrap();
        let mut max_dev = 0.0f64;
        for i in 0..100 {
            let loaded = ds.load_record(i).unwrap();
            let mut c = cfg.clone();
            c.seed = 500 + i as u64;
            let original = generate_scenario(&c).unwrap();
            for (a, b) in original
                .video
                .array()
                .iter()
                .chain(original.query.array().iter())
                .zip(loaded.video.array().iter().chain(loaded.query.array().iter()))
            {
                max_dev = max_dev.max((*a as f32 as f64 - *b).abs());
            }
        }
        assert_eq!(max_dev, 0.0);
        fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn stripped_copy_drops_priors_only() {
        let dir = tmpdir("strip_src");
        let dst = tmpdir("strip_dst");
        let ds = generate_dataset(&small_cfg(), 4, 9, 0.25, &dir).unwrap();
        let stripped = write_stripped_copy(&ds, &dst).unwrap();
        for i in 0..4 {
            let a = ds.load_record(i).unwrap();
            let b = stripped.load_record(i).unwrap();
            assert!(b.priors.is_none());
            assert_eq!(a.video, b.video);
            assert_eq!(a.query, b.query);
            assert_eq!(a.gt_span, b.gt_span);
            assert_eq!(a.saliency_gt, b.saliency_gt);
        }
        fs::remove_dir_all(&dir).unwrap();
        fs::remove_dir_all(&dst).unwrap();
    }
}
