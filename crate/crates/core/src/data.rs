//! Dataset ingestion, member/external splitting and mixed-batch composition.
//!
//! Images are kept as `u8` in `H×W×C` order and scaled to `[0, 1]` when a
//! batch is materialized.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::nets::InputShape;
use crate::seeds::keyed;
use crate::tensor::{Maps, Real};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetName {
    Mnist,
    Cifar10,
}

impl DatasetName {
    pub fn as_str(&self) -> &'static str {
        match self {
            DatasetName::Mnist => "mnist",
            DatasetName::Cifar10 => "cifar10",
        }
    }

    pub fn input_shape(&self) -> InputShape {
        match self {
            DatasetName::Mnist => InputShape::new(28, 28, 1),
            DatasetName::Cifar10 => InputShape::new(32, 32, 3),
        }
    }

    /// Conventional subdirectory under a shared data root.
    pub fn subdir(&self) -> &'static str {
        match self {
            DatasetName::Mnist => "mnist",
            DatasetName::Cifar10 => "cifar-10-batches-bin",
        }
    }
}

impl std::str::FromStr for DatasetName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace(['-', '_'], "").as_str() {
            "mnist" => Ok(DatasetName::Mnist),
            "cifar10" => Ok(DatasetName::Cifar10),
            _ => Err(Error::config("dataset.name", format!("unknown dataset `{s}` (expected mnist or cifar10)"))),
        }
    }
}

impl std::fmt::Display for DatasetName {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// A contiguous store of equally shaped `u8` images with class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct ImagePool {
    pub shape: InputShape,
    pixels: Vec<u8>,
    labels: Vec<u8>,
}

impl ImagePool {
    pub fn new(shape: InputShape, pixels: Vec<u8>, labels: Vec<u8>) -> Result<Self> {
        if pixels.len() != shape.numel() * labels.len() {
            return Err(Error::Dimension(format!("{} pixel bytes for {} images of {shape:?}", pixels.len(), labels.len())));
        }
        Ok(Self { shape, pixels, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn label(&self, id: usize) -> usize {
        self.labels[id] as usize
    }

    pub fn raw_image(&self, id: usize) -> &[u8] {
        let n = self.shape.numel();
        &self.pixels[id * n..(id + 1) * n]
    }

    /// Image `id` scaled to `[0, 1]`, `H×W×C` order.
    pub fn image(&self, id: usize) -> Vec<f32> {
        self.raw_image(id).iter().map(|&b| b as f32 / 255.0).collect()
    }

    /// Materializes images as a network input batch.
    pub fn to_maps<T: Real>(&self, ids: &[usize]) -> Maps<T> {
        let s = self.shape;
        let mut maps = Maps::zeros(s.map_shape(), ids.len());
        let denom = T::lit(255.0);
        for (n, &id) in ids.iter().enumerate() {
            let raw = self.raw_image(id);
            for c in 0..s.channels {
                let plane = maps.plane_mut(c, n);
                for (p, v) in plane.iter_mut().enumerate() {
                    *v = T::lit(raw[p * s.channels + c] as f64) / denom;
                }
            }
        }
        maps
    }
}

/// A loaded dataset: training pool plus official test split.
#[derive(Debug, Clone)]
pub struct DatasetHandle {
    pub name: DatasetName,
    pub num_classes: usize,
    pub train: Arc<ImagePool>,
    pub test: Arc<ImagePool>,
    /// SHA-256 of every file read, keyed by file name.
    pub checksums: BTreeMap<String, String>,
}

impl DatasetHandle {
    pub fn from_pools(name: DatasetName, num_classes: usize, train: ImagePool, test: ImagePool) -> Self {
        Self { name, num_classes, train: Arc::new(train), test: Arc::new(test), checksums: BTreeMap::new() }
    }
}

fn ingest_err(file: &Path, reason: impl Into<String>) -> Error {
    Error::Ingestion { file: file.to_path_buf(), reason: reason.into() }
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| ingest_err(path, e.to_string()))
}

fn be_u32(bytes: &[u8], at: usize) -> u32 {
    u32::from_be_bytes(bytes[at..at + 4].try_into().expect("4 bytes"))
}

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Parses an IDX3 image file, returning `(count, rows, cols, pixels)`.
pub fn parse_idx_images(path: &Path, bytes: &[u8]) -> Result<(usize, usize, usize, Vec<u8>)> {
    if bytes.len() < 16 {
        return Err(ingest_err(path, "file shorter than IDX3 header"));
    }
    let magic = be_u32(bytes, 0);
    if magic != IDX_IMAGES_MAGIC {
        return Err(ingest_err(path, format!("bad magic {magic:#010x}, expected {IDX_IMAGES_MAGIC:#010x}")));
    }
    let (n, rows, cols) = (be_u32(bytes, 4) as usize, be_u32(bytes, 8) as usize, be_u32(bytes, 12) as usize);
    if bytes.len() != 16 + n * rows * cols {
        return Err(ingest_err(path, format!("expected {} bytes for {n}×{rows}×{cols}, found {}", 16 + n * rows * cols, bytes.len())));
    }
    Ok((n, rows, cols, bytes[16..].to_vec()))
}

pub fn parse_idx_labels(path: &Path, bytes: &[u8]) -> Result<Vec<u8>> {
    if bytes.len() < 8 {
        return Err(ingest_err(path, "file shorter than IDX1 header"));
    }
    let magic = be_u32(bytes, 0);
    if magic != IDX_LABELS_MAGIC {
        return Err(ingest_err(path, format!("bad magic {magic:#010x}, expected {IDX_LABELS_MAGIC:#010x}")));
    }
    let n = be_u32(bytes, 4) as usize;
    if bytes.len() != 8 + n {
        return Err(ingest_err(path, format!("expected {} bytes for {n} labels, found {}", 8 + n, bytes.len())));
    }
    Ok(bytes[8..].to_vec())
}

pub const CIFAR_RECORD_BYTES: usize = 1 + 3072;

/// Parses CIFAR-10 binary records (label byte + 1024 R + 1024 G + 1024 B)
/// into `H×W×C` pixels and labels.
pub fn parse_cifar_batch(path: &Path, bytes: &[u8]) -> Result<(Vec<u8>, Vec<u8>)> {
    if bytes.is_empty() || bytes.len() % CIFAR_RECORD_BYTES != 0 {
        return Err(ingest_err(path, format!("size {} is not a multiple of {CIFAR_RECORD_BYTES}", bytes.len())));
    }
    let n = bytes.len() / CIFAR_RECORD_BYTES;
    let mut pixels = Vec::with_capacity(n * 3072);
    let mut labels = Vec::with_capacity(n);
    for rec in bytes.chunks_exact(CIFAR_RECORD_BYTES) {
        if rec[0] >= 10 {
            return Err(ingest_err(path, format!("label {} out of range", rec[0])));
        }
        labels.push(rec[0]);
        let chw = &rec[1..];
        for p in 0..1024 {
            pixels.extend_from_slice(&[chw[p], chw[1024 + p], chw[2048 + p]]);
        }
    }
    Ok((pixels, labels))
}

/// Reads a `SHA256SUMS` file (`<hex>  <name>` per line) if present.
fn read_sums(dir: &Path) -> Result<Option<BTreeMap<String, String>>> {
    let path = dir.join("SHA256SUMS");
    if !path.exists() {
        return Ok(None);
    }
    let text = fs::read_to_string(&path).map_err(|e| ingest_err(&path, e.to_string()))?;
    let mut sums = BTreeMap::new();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let mut it = line.split_whitespace();
        match (it.next(), it.next()) {
            (Some(h), Some(name)) => {
                sums.insert(name.trim_start_matches('*').to_string(), h.to_ascii_lowercase());
            }
            _ => return Err(ingest_err(&path, format!("malformed line `{line}`"))),
        }
    }
    Ok(Some(sums))
}

struct FileReader {
    dir: PathBuf,
    sums: Option<BTreeMap<String, String>>,
    checksums: BTreeMap<String, String>,
}

impl FileReader {
    fn new(dir: PathBuf) -> Result<Self> {
        let sums = read_sums(&dir)?;
        Ok(Self { dir, sums, checksums: BTreeMap::new() })
    }

    fn read(&mut self, name: &str) -> Result<(PathBuf, Vec<u8>)> {
        let path = self.dir.join(name);
        if !path.is_file() {
            return Err(ingest_err(&path, "file not found"));
        }
        let bytes = read_file(&path)?;
        let digest = hex::encode(Sha256::digest(&bytes));
        if let Some(expected) = self.sums.as_ref().and_then(|s| s.get(name)) {
            if *expected != digest {
                return Err(Error::Integrity { file: path });
            }
        }
        self.checksums.insert(name.to_string(), digest);
        Ok((path, bytes))
    }
}

/// Locates the directory that actually holds the dataset files: `root`
/// itself or its conventional subdirectory.
pub fn resolve_dataset_dir(name: DatasetName, root: &Path) -> PathBuf {
    let probe = match name {
        DatasetName::Mnist => "train-images-idx3-ubyte",
        DatasetName::Cifar10 => "data_batch_1.bin",
    };
    if root.join(probe).is_file() {
        return root.to_path_buf();
    }
    let sub = root.join(name.subdir());
    if sub.join(probe).is_file() {
        return sub;
    }
    root.to_path_buf()
}

pub fn load_dataset(name: DatasetName, root: &Path) -> Result<DatasetHandle> {
    let dir = resolve_dataset_dir(name, root);
    let mut files = FileReader::new(dir)?;
    let (train, test) = match name {
        DatasetName::Mnist => {
            let mut load = |images: &str, labels: &str| -> Result<ImagePool> {
                let (ip, ib) = files.read(images)?;
                let (n, rows, cols, pixels) = parse_idx_images(&ip, &ib)?;
                let (lp, lb) = files.read(labels)?;
                let labels = parse_idx_labels(&lp, &lb)?;
                if labels.len() != n {
                    return Err(ingest_err(&lp, format!("{} labels for {n} images", labels.len())));
                }
                if let Some(bad) = labels.iter().find(|&&l| l >= 10) {
                    return Err(ingest_err(&lp, format!("label {bad} out of range")));
                }
                ImagePool::new(InputShape::new(rows, cols, 1), pixels, labels)
            };
            let train = load("train-images-idx3-ubyte", "train-labels-idx1-ubyte")?;
            let test = load("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte")?;
            (train, test)
        }
        DatasetName::Cifar10 => {
            let mut pixels = Vec::new();
            let mut labels = Vec::new();
            for b in 1..=5 {
                let (p, bytes) = files.read(&format!("data_batch_{b}.bin"))?;
                let (px, lb) = parse_cifar_batch(&p, &bytes)?;
                pixels.extend(px);
                labels.extend(lb);
            }
            let train = ImagePool::new(InputShape::new(32, 32, 3), pixels, labels)?;
            let (p, bytes) = files.read("test_batch.bin")?;
            let (px, lb) = parse_cifar_batch(&p, &bytes)?;
            (train, ImagePool::new(InputShape::new(32, 32, 3), px, lb)?)
        }
    };
    Ok(DatasetHandle { name, num_classes: 10, train: Arc::new(train), test: Arc::new(test), checksums: files.checksums })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Member,
    External,
}

impl Role {
    pub fn as_str(&self) -> &'static str {
        match self {
            Role::Member => "member",
            Role::External => "external",
        }
    }

    pub fn membership_label(&self) -> u8 {
        match self {
            Role::Member => 1,
            Role::External => 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MintSplit {
    Fit,
    Eval,
}

impl MintSplit {
    pub fn as_str(&self) -> &'static str {
        match self {
            MintSplit::Fit => "fit",
            MintSplit::Eval => "eval",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SampleRecord {
    pub id: usize,
    pub class_label: usize,
    pub role: Role,
    pub mint_split: MintSplit,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitPlan {
    pub seed: u64,
    pub member_fraction: f64,
    pub mint_eval_fraction: f64,
}

impl SplitPlan {
    pub fn new(seed: u64) -> Self {
        Self { seed, member_fraction: 0.5, mint_eval_fraction: 0.1 }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.member_fraction > 0.0 && self.member_fraction < 1.0) {
            return Err(Error::config("split.member_fraction", "must lie in (0, 1)"));
        }
        if !(self.mint_eval_fraction >= 0.0 && self.mint_eval_fraction < 0.5) {
            return Err(Error::config("split.mint_eval_fraction", "must lie in [0, 0.5)"));
        }
        Ok(())
    }
}

/// Records drawn from one image pool.
#[derive(Debug, Clone)]
pub struct RecordSet {
    pub pool: Arc<ImagePool>,
    pub records: Vec<SampleRecord>,
}

impl RecordSet {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn ids(&self) -> Vec<usize> {
        self.records.iter().map(|r| r.id).collect()
    }

    pub fn filter(&self, pred: impl Fn(&SampleRecord) -> bool) -> RecordSet {
        RecordSet { pool: Arc::clone(&self.pool), records: self.records.iter().filter(|r| pred(r)).copied().collect() }
    }

    pub fn with_split(&self, split: MintSplit) -> RecordSet {
        self.filter(|r| r.mint_split == split)
    }

    pub fn class_counts(&self, num_classes: usize) -> Vec<usize> {
        let mut counts = vec![0; num_classes];
        for r in &self.records {
            if r.class_label < num_classes {
                counts[r.class_label] += 1;
            }
        }
        counts
    }

    pub fn concat(&self, other: &RecordSet) -> RecordSet {
        let mut records = self.records.clone();
        records.extend_from_slice(&other.records);
        RecordSet { pool: Arc::clone(&self.pool), records }
    }
}

/// Official test images, never part of D or E.
#[derive(Debug, Clone)]
pub struct TestSet {
    pub pool: Arc<ImagePool>,
    pub ids: Vec<usize>,
}

impl TestSet {
    pub fn full(pool: Arc<ImagePool>) -> Self {
        let ids = (0..pool.len()).collect();
        Self { pool, ids }
    }

    pub fn labels(&self) -> Vec<usize> {
        self.ids.iter().map(|&i| self.pool.label(i)).collect()
    }
}

#[derive(Debug, Clone)]
pub struct Split {
    pub members: RecordSet,
    pub externals: RecordSet,
    pub test: TestSet,
}

/// Orders ids by a seeded hash, independent of input order.
fn rank_by_seed(ids: &mut [usize], seed: u64) {
    ids.sort_by_key(|&id| (keyed(seed, id as u64), id));
}

/// Flags the lowest-ranked `round(fraction·n)` records as `Eval`.
fn assign_mint_split(records: &mut [SampleRecord], fraction: f64, seed: u64) {
    let mut ids: Vec<usize> = records.iter().map(|r| r.id).collect();
    rank_by_seed(&mut ids, seed);
    let n_eval = (fraction * records.len() as f64).round() as usize;
    let eval: std::collections::HashSet<usize> = ids[..n_eval].iter().copied().collect();
    for r in records.iter_mut() {
        r.mint_split = if eval.contains(&r.id) { MintSplit::Eval } else { MintSplit::Fit };
    }
}

/// Splits the training pool into members `D` and externals `E`.
pub fn make_split(handle: &DatasetHandle, plan: &SplitPlan) -> Result<Split> {
    plan.validate()?;
    let pool = &handle.train;
    let mut ids: Vec<usize> = (0..pool.len()).collect();
    rank_by_seed(&mut ids, keyed(plan.seed, 0x5157));
    let n_members = (plan.member_fraction * pool.len() as f64).round() as usize;
    let build = |ids: &[usize], role: Role, salt: u64| {
        let mut ids = ids.to_vec();
        ids.sort_unstable();
        let mut records: Vec<SampleRecord> =
            ids.iter().map(|&id| SampleRecord { id, class_label: pool.label(id), role, mint_split: MintSplit::Fit }).collect();
        assign_mint_split(&mut records, plan.mint_eval_fraction, keyed(plan.seed, salt));
        RecordSet { pool: Arc::clone(pool), records }
    };
    let members = build(&ids[..n_members], Role::Member, 0xd);
    let externals = build(&ids[n_members..], Role::External, 0xe);
    Ok(Split { members, externals, test: TestSet::full(Arc::clone(&handle.test)) })
}

/// A uniform random subset with its class histogram.
#[derive(Debug, Clone)]
pub struct Subsample {
    pub records: RecordSet,
    pub class_counts: Vec<usize>,
}

pub fn subsample(set: &RecordSet, n: usize, seed: u64, num_classes: usize) -> Result<Subsample> {
    if n > set.len() {
        return Err(Error::Size { requested: n, available: set.len() });
    }
    let mut ids = set.ids();
    rank_by_seed(&mut ids, keyed(seed, 0x5b5));
    let keep: std::collections::HashSet<usize> = ids[..n].iter().copied().collect();
    let records = set.filter(|r| keep.contains(&r.id));
    let class_counts = records.class_counts(num_classes);
    Ok(Subsample { records, class_counts })
}

/// Re-flags `Eval` records so exactly `round(fraction·n)` of the set is held out.
pub fn reassign_mint_split(set: &RecordSet, fraction: f64, seed: u64) -> RecordSet {
    let mut records = set.records.clone();
    assign_mint_split(&mut records, fraction, seed);
    RecordSet { pool: Arc::clone(&set.pool), records }
}

/// A balanced batch: `members ‖ externals`.
#[derive(Debug, Clone)]
pub struct MixedBatch {
    pub member_ids: Vec<usize>,
    pub external_ids: Vec<usize>,
    pub member_images: Maps<f32>,
    pub member_class_labels: Vec<usize>,
    pub external_images: Maps<f32>,
    /// Aligned to the concatenation `[members ‖ externals]`.
    pub membership_labels: Vec<u8>,
}

/// Per-epoch stream of balanced batches over the `Fit` records of `D` and `E`.
#[derive(Debug)]
pub struct BatchStream {
    members: RecordSet,
    externals: RecordSet,
    half: usize,
    cursor: usize,
    batches: usize,
}

pub fn batches_per_epoch(n_members: usize, n_externals: usize, batch_size: usize) -> usize {
    n_members.min(n_externals) / (batch_size / 2)
}

pub fn compose_batches(d_fit: &RecordSet, e_fit: &RecordSet, batch_size: usize, seed: u64, epoch: u64) -> Result<BatchStream> {
    if batch_size == 0 || batch_size % 2 != 0 {
        return Err(Error::config("batch_size", format!("must be a positive even number, got {batch_size}")));
    }
    let mut members = d_fit.with_split(MintSplit::Fit);
    let mut externals = e_fit.with_split(MintSplit::Fit);
    if members.is_empty() || externals.is_empty() {
        return Err(Error::Contract("batch composition needs nonempty member and external FIT sets".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(keyed(seed, epoch.wrapping_mul(2)));
    members.records.shuffle(&mut rng);
    let mut rng = ChaCha8Rng::seed_from_u64(keyed(seed, epoch.wrapping_mul(2) + 1));
    externals.records.shuffle(&mut rng);
    let half = batch_size / 2;
    let batches = batches_per_epoch(members.len(), externals.len(), batch_size);
    Ok(BatchStream { members, externals, half, cursor: 0, batches })
}

impl BatchStream {
    pub fn num_batches(&self) -> usize {
        self.batches
    }
}

impl Iterator for BatchStream {
    type Item = MixedBatch;

    fn next(&mut self) -> Option<MixedBatch> {
        if self.cursor >= self.batches {
            return None;
        }
        let range = self.cursor * self.half..(self.cursor + 1) * self.half;
        self.cursor += 1;
        let m = &self.members.records[range.clone()];
        let e = &self.externals.records[range];
        let member_ids: Vec<usize> = m.iter().map(|r| r.id).collect();
        let external_ids: Vec<usize> = e.iter().map(|r| r.id).collect();
        let mut membership_labels = vec![1u8; m.len()];
        membership_labels.extend(std::iter::repeat_n(0u8, e.len()));
        Some(MixedBatch {
            member_images: self.members.pool.to_maps(&member_ids),
            external_images: self.externals.pool.to_maps(&external_ids),
            member_class_labels: m.iter().map(|r| r.class_label).collect(),
            member_ids,
            external_ids,
            membership_labels,
        })
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        let left = self.batches - self.cursor;
        (left, Some(left))
    }
}

/// Writes `id,role,mint_split` for every member and external record.
pub fn write_split_manifest(path: &Path, split: &Split) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let mut all: Vec<&SampleRecord> = split.members.records.iter().chain(&split.externals.records).collect();
    all.sort_by_key(|r| r.id);
    let mut f = std::io::BufWriter::new(fs::File::create(path)?);
    writeln!(f, "id,role,mint_split")?;
    for r in all {
        writeln!(f, "{},{},{}", r.id, r.role.as_str(), r.mint_split.as_str())?;
    }
    f.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn toy_handle(n_train: usize, n_test: usize) -> DatasetHandle {
        let shape = InputShape::new(4, 4, 1);
        let mk = |n: usize, off: usize| {
            let pixels = (0..n * 16).map(|i| ((i * 31 + off) % 256) as u8).collect();
            let labels = (0..n).map(|i| ((i + off) % 10) as u8).collect();
            ImagePool::new(shape, pixels, labels).unwrap()
        };
        DatasetHandle::from_pools(DatasetName::Mnist, 10, mk(n_train, 0), mk(n_test, 3))
    }

    #[test]
    fn split_is_disjoint_exhaustive_and_deterministic() {
        let h = toy_handle(1001, 10);
        let plan = SplitPlan::new(42);
        let s = make_split(&h, &plan).unwrap();
        assert_eq!(s.members.len(), 501);
        assert_eq!(s.members.len() + s.externals.len(), 1001);
        let d: std::collections::HashSet<_> = s.members.ids().into_iter().collect();
        assert!(s.externals.ids().iter().all(|id| !d.contains(id)));
        let again = make_split(&h, &plan).unwrap();
        assert_eq!(again.members.records, s.members.records);
        let n_eval = s.members.with_split(MintSplit::Eval).len();
        assert_eq!(n_eval, 50);
    }

    #[test]
    fn subsample_edge_cases() {
        let h = toy_handle(200, 1);
        let s = make_split(&h, &SplitPlan::new(1)).unwrap();
        let all = subsample(&s.members, s.members.len(), 7, 10).unwrap();
        assert_eq!(all.records.records, s.members.records);
        assert!(subsample(&s.members, 0, 7, 10).unwrap().records.is_empty());
        assert!(matches!(subsample(&s.members, 101, 7, 10), Err(Error::Size { .. })));
        let a = subsample(&s.members, 30, 7, 10).unwrap();
        let b = subsample(&s.members, 30, 7, 10).unwrap();
        assert_eq!(a.records.records, b.records.records);
        assert_eq!(a.class_counts.iter().sum::<usize>(), 30);
    }

    #[test]
    fn odd_batch_size_is_config_error() {
        let h = toy_handle(100, 1);
        let s = make_split(&h, &SplitPlan::new(1)).unwrap();
        let err = compose_batches(&s.members, &s.externals, 7, 0, 0).unwrap_err();
        assert!(matches!(err, Error::Config { ref field, .. } if field == "batch_size"));
    }

    #[test]
    fn cifar_record_is_reordered_to_hwc() {
        let mut rec = vec![3u8];
        rec.extend((0..3072).map(|i| (i / 1024) as u8 * 10 + (i % 2) as u8));
        let (px, lb) = parse_cifar_batch(Path::new("x.bin"), &rec).unwrap();
        assert_eq!(lb, vec![3]);
        assert_eq!(&px[..6], &[0, 10, 20, 1, 11, 21]);
    }

    #[test]
    fn idx_bad_magic_is_rejected() {
        let mut bytes = vec![0, 0, 8, 1, 0, 0, 0, 1, 0, 0, 0, 1, 0, 0, 0, 1, 7];
        assert!(parse_idx_images(Path::new("f"), &bytes).is_err());
        bytes[3] = 3;
        let (n, r, c, px) = parse_idx_images(Path::new("f"), &bytes).unwrap();
        assert_eq!((n, r, c, px), (1, 1, 1, vec![7]));
    }

    #[test]
    fn images_scale_into_unit_interval() {
        let h = toy_handle(5, 1);
        for id in 0..5 {
            assert!(h.train.image(id).iter().all(|v| (0.0..=1.0).contains(v)));
        }
        let maps = h.train.to_maps::<f32>(&[2]);
        assert_eq!(maps.sample_chw(0), h.train.image(2));
    }
}
