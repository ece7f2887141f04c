//! Frozen-embedding datasets: the `FSFEAT01` binary format, the optional
//! manifest sidecar, and a synthetic Gaussian-cluster generator.
//!
//! # Binary layout
//!
//! All integers and floats are little-endian.
//!
//! ```text
//! offset  size      field
//! 0       8         magic  b"FSFEAT01"
//! 8       4         dim            u32
//! 12      4         num_classes    u32
//! 16      8         record_count   u64
//! 24      ...       record_count × { class_id u32, dim × f32 }
//! ```
//!
//! Nothing may follow the last record.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub const MAGIC: [u8; 8] = *b"FSFEAT01";
pub const HEADER_LEN: usize = 24;

/// One embedding and its class.
#[derive(Debug, Clone)]
pub struct FeatureRecord {
    pub class_id: u32,
    pub vector: Vec<f32>,
}

/// Split tag carried by the manifest.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Base,
    Novel,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassInfo {
    pub name: String,
    pub split: Split,
}

/// Sidecar mapping class id to name and split.
///
/// Serialized as `{"classes": {"0": {"name": "...", "split": "novel"}, ...}}`.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub classes: BTreeMap<u32, ClassInfo>,
}

impl Manifest {
    pub fn sidecar_path(store_path: &Path) -> PathBuf {
        let mut name = store_path.as_os_str().to_owned();
        name.push(".manifest.json");
        PathBuf::from(name)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Manifest(e.to_string()))
    }
}

/// An immutable collection of embeddings.
///
/// Vectors are kept in one row-major `f32` slab; `class_ids[i]` labels row `i`.
#[derive(Debug, Clone)]
pub struct FeatureStore {
    dim: usize,
    num_classes: usize,
    class_ids: Vec<u32>,
    data: Vec<f32>,
    manifest: Option<Manifest>,
}

impl PartialEq for FeatureStore {
    /// Bitwise equality on vectors.
    fn eq(&self, other: &Self) -> bool {
        self.dim == other.dim
            && self.num_classes == other.num_classes
            && self.class_ids == other.class_ids
            && self.manifest == other.manifest
            && self.data.len() == other.data.len()
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

impl FeatureStore {
    /// Builds a store, validating every record.
    pub fn new(dim: usize, num_classes: usize, records: Vec<FeatureRecord>) -> Result<Self> {
        let mut class_ids = Vec::with_capacity(records.len());
        let mut data = Vec::with_capacity(records.len() * dim);
        for (i, r) in records.into_iter().enumerate() {
            if r.vector.len() != dim {
                return Err(Error::Data {
                    record: i as u64,
                    reason: format!("vector has {} components, expected {dim}", r.vector.len()),
                });
            }
            class_ids.push(r.class_id);
            data.extend_from_slice(&r.vector);
        }
        Self::from_parts(dim, num_classes, class_ids, data)
    }

    pub fn from_parts(
        dim: usize,
        num_classes: usize,
        class_ids: Vec<u32>,
        data: Vec<f32>,
    ) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Format("dim must be positive".into()));
        }
        if num_classes == 0 {
            return Err(Error::Format("num_classes must be positive".into()));
        }
        if dim > u32::MAX as usize || num_classes > u32::MAX as usize {
            return Err(Error::Format("header field exceeds u32".into()));
        }
        if data.len() != class_ids.len() * dim {
            return Err(Error::contract(format!(
                "{} floats for {} records of dim {dim}",
                data.len(),
                class_ids.len()
            )));
        }
        for (i, &c) in class_ids.iter().enumerate() {
            check_class(i as u64, c, num_classes)?;
        }
        for (i, row) in data.chunks_exact(dim).enumerate() {
            check_finite(i as u64, row)?;
        }
        Ok(Self {
            dim,
            num_classes,
            class_ids,
            data,
            manifest: None,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn len(&self) -> usize {
        self.class_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.class_ids.is_empty()
    }

    pub fn class_id(&self, index: usize) -> u32 {
        self.class_ids[index]
    }

    pub fn class_ids(&self) -> &[u32] {
        &self.class_ids
    }

    pub fn vector(&self, index: usize) -> &[f32] {
        &self.data[index * self.dim..(index + 1) * self.dim]
    }

    pub fn records(&self) -> impl Iterator<Item = (u32, &[f32])> + '_ {
        self.class_ids
            .iter()
            .copied()
            .zip(self.data.chunks_exact(self.dim))
    }

    pub fn manifest(&self) -> Option<&Manifest> {
        self.manifest.as_ref()
    }

    /// Attaches a manifest; every class present in the records must be named.
    pub fn set_manifest(&mut self, manifest: Manifest) -> Result<()> {
        let counts = self.class_counts();
        for (class, &n) in counts.iter().enumerate() {
            if n > 0 && !manifest.classes.contains_key(&(class as u32)) {
                return Err(Error::Manifest(format!("class {class} missing from manifest")));
            }
        }
        self.manifest = Some(manifest);
        Ok(())
    }

    /// Record indices grouped by class, in store order.
    pub fn indices_by_class(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.num_classes];
        for (i, &c) in self.class_ids.iter().enumerate() {
            out[c as usize].push(i);
        }
        out
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut out = vec![0; self.num_classes];
        for &c in &self.class_ids {
            out[c as usize] += 1;
        }
        out
    }

    /// Size in bytes of the binary encoding.
    pub fn encoded_len(&self) -> usize {
        HEADER_LEN + self.len() * (4 + 4 * self.dim)
    }
}

fn check_class(record: u64, class: u32, num_classes: usize) -> Result<()> {
    if class as usize >= num_classes {
        return Err(Error::Data {
            record,
            reason: format!("class_id {class} >= num_classes {num_classes}"),
        });
    }
    Ok(())
}

fn check_finite(record: u64, row: &[f32]) -> Result<()> {
    if let Some(j) = row.iter().position(|v| !v.is_finite()) {
        return Err(Error::Data {
            record,
            reason: format!("non-finite value at component {j}"),
        });
    }
    Ok(())
}

struct CountingWriter<W> {
    inner: W,
    offset: u64,
}

impl<W: Write> CountingWriter<W> {
    fn put(&mut self, bytes: &[u8]) -> Result<()> {
        self.inner
            .write_all(bytes)
            .map_err(|e| Error::io(self.offset, e))?;
        self.offset += bytes.len() as u64;
        Ok(())
    }
}

/// Encodes `store` in the `FSFEAT01` format.
pub fn write_store<W: Write>(store: &FeatureStore, sink: W) -> Result<()> {
    let mut w = CountingWriter {
        inner: sink,
        offset: 0,
    };
    w.put(&MAGIC)?;
    w.put(&(store.dim as u32).to_le_bytes())?;
    w.put(&(store.num_classes as u32).to_le_bytes())?;
    w.put(&(store.len() as u64).to_le_bytes())?;
    let mut buf = Vec::with_capacity(4 + 4 * store.dim);
    for (class, row) in store.records() {
        buf.clear();
        buf.extend_from_slice(&class.to_le_bytes());
        for v in row {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.put(&buf)?;
    }
    let offset = w.offset;
    w.inner.flush().map_err(|e| Error::io(offset, e))
}

pub fn encode_store(store: &FeatureStore) -> Vec<u8> {
    let mut out = Vec::with_capacity(store.encoded_len());
    write_store(store, &mut out).expect("writing to a Vec cannot fail");
    out
}

struct CountingReader<R> {
    inner: R,
    offset: u64,
}

impl<R: Read> CountingReader<R> {
    /// Fills `buf` completely; returns the number of bytes read before EOF.
    fn fill(&mut self, buf: &mut [u8]) -> Result<usize> {
        let mut done = 0;
        while done < buf.len() {
            match self.inner.read(&mut buf[done..]) {
                Ok(0) => break,
                Ok(n) => done += n,
                Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
                Err(e) => return Err(Error::io(self.offset + done as u64, e)),
            }
        }
        self.offset += done as u64;
        Ok(done)
    }

    /// Reads up to `len` bytes into `buf`, growing it only as data arrives.
    fn fill_vec(&mut self, buf: &mut Vec<u8>, len: usize) -> Result<usize> {
        buf.clear();
        let mut chunk = [0u8; 8192];
        while buf.len() < len {
            let want = (len - buf.len()).min(chunk.len());
            let n = self.fill(&mut chunk[..want])?;
            buf.extend_from_slice(&chunk[..n]);
            if n < want {
                break;
            }
        }
        Ok(buf.len())
    }
}

/// Decodes a store from `source`. The manifest is not read; see [`load_store`].
pub fn read_store<R: Read>(source: R) -> Result<FeatureStore> {
    let mut r = CountingReader {
        inner: source,
        offset: 0,
    };
    let mut header = [0u8; HEADER_LEN];
    let got = r.fill(&mut header)?;
    if got < MAGIC.len() || header[..8] != MAGIC {
        return Err(Error::Format(format!(
            "bad magic {:?}, expected \"FSFEAT01\"",
            String::from_utf8_lossy(&header[..got.min(8)])
        )));
    }
    if got < HEADER_LEN {
        return Err(Error::Truncated(format!(
            "header is {got} bytes, expected {HEADER_LEN}"
        )));
    }
    let dim = u32::from_le_bytes(header[8..12].try_into().unwrap()) as usize;
    let num_classes = u32::from_le_bytes(header[12..16].try_into().unwrap()) as usize;
    let count = u64::from_le_bytes(header[16..24].try_into().unwrap());
    if dim == 0 {
        return Err(Error::Format("dim must be positive".into()));
    }
    if num_classes == 0 {
        return Err(Error::Format("num_classes must be positive".into()));
    }

    let record_len = 4 + 4 * dim;
    // Reservations are capped so a corrupt header cannot exhaust memory.
    let mut class_ids = Vec::with_capacity((count as usize).min(1 << 16));
    let mut data = Vec::with_capacity((count as usize).saturating_mul(dim).min(1 << 20));
    let mut buf = Vec::new();
    for i in 0..count {
        let got = r.fill_vec(&mut buf, record_len)?;
        if got < record_len {
            return Err(Error::Truncated(format!(
                "header declares {count} records, found {i} complete records"
            )));
        }
        let class = u32::from_le_bytes(buf[..4].try_into().unwrap());
        check_class(i, class, num_classes)?;
        let start = data.len();
        data.extend(
            buf[4..]
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().unwrap())),
        );
        check_finite(i, &data[start..])?;
        class_ids.push(class);
    }
    let mut probe = [0u8; 1];
    if r.fill(&mut probe)? != 0 {
        return Err(Error::Format(format!(
            "trailing bytes after record {count}"
        )));
    }
    FeatureStore::from_parts(dim, num_classes, class_ids, data)
}

/// Reads a store file and, when present, its `.manifest.json` sidecar.
pub fn load_store(path: &Path) -> Result<FeatureStore> {
    let file = File::open(path).map_err(|e| Error::io(0, e))?;
    let mut store = read_store(BufReader::new(file))?;
    let sidecar = Manifest::sidecar_path(path);
    if sidecar.exists() {
        let text = std::fs::read_to_string(&sidecar).map_err(|e| Error::io(0, e))?;
        store.set_manifest(Manifest::from_json(&text)?)?;
    }
    Ok(store)
}

/// Writes a store file, plus the sidecar when the store carries a manifest.
pub fn save_store(store: &FeatureStore, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(0, e))?;
    write_store(store, BufWriter::new(file))?;
    if let Some(m) = store.manifest() {
        std::fs::write(Manifest::sidecar_path(path), m.to_json()).map_err(|e| Error::io(0, e))?;
    }
    Ok(())
}

/// Parameters of the synthetic Gaussian-cluster generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub num_classes: usize,
    pub dim: usize,
    pub samples_per_class: usize,
    /// Norm of every class mean.
    pub separation: f64,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes == 0 || self.dim == 0 || self.samples_per_class == 0 {
            return Err(Error::Config(
                "num_classes, dim and samples_per_class must be positive".into(),
            ));
        }
        if !(self.separation > 0.0 && self.separation.is_finite()) {
            return Err(Error::Config(format!(
                "separation must be positive, got {}",
                self.separation
            )));
        }
        if !(self.noise_sigma > 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::Config(format!(
                "noise_sigma must be positive, got {}",
                self.noise_sigma
            )));
        }
        if self.dim < self.num_classes {
            return Err(Error::Config(format!(
                "dim {} < num_classes {}: orthogonal class means need dim >= num_classes",
                self.dim, self.num_classes
            )));
        }
        Ok(())
    }

    /// Mean of class `k`: `separation · e_k`.
    pub fn class_mean(&self, class: usize) -> Vec<f64> {
        let mut m = vec![0.0; self.dim];
        m[class] = self.separation;
        m
    }
}

/// Samples `samples_per_class` points around each of `num_classes` mutually
/// orthogonal means, class-major. Deterministic in `cfg.seed`.
pub fn generate_synthetic(cfg: &SyntheticConfig) -> Result<FeatureStore> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let noise = Normal::new(0.0, cfg.noise_sigma).map_err(|e| Error::Config(e.to_string()))?;
    let total = cfg.num_classes * cfg.samples_per_class;
    let mut class_ids = Vec::with_capacity(total);
    let mut data = Vec::with_capacity(total * cfg.dim);
    for class in 0..cfg.num_classes {
        let mean = cfg.class_mean(class);
        for _ in 0..cfg.samples_per_class {
            class_ids.push(class as u32);
            data.extend(mean.iter().map(|m| (m + noise.sample(&mut rng)) as f32));
        }
    }
    FeatureStore::from_parts(cfg.dim, cfg.num_classes, class_ids, data)
}

/// A manifest naming classes `class_000`, `class_001`, ... with one split tag.
pub fn default_manifest(num_classes: usize, split: Split) -> Manifest {
    Manifest {
        classes: (0..num_classes as u32)
            .map(|c| {
                (
                    c,
                    ClassInfo {
                        name: format!("class_{c:03}"),
                        split,
                    },
                )
            })
            .collect(),
    }
}
