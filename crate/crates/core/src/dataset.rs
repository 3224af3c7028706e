//! Dataset manifests, balanced sampling, holdout and stratified k-fold
//! planning, and the binary frozen-feature file.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::io::Read;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Suffix appended to the id of a horizontally flipped copy.
pub const FLIP_SUFFIX: &str = "#flip";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Subtype {
    Covid,
    Viral,
    Bacterial,
    Other,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
    Unassigned,
}

/// Where a record's data lives: an image path or a row in a feature file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Source {
    FeatureRow(u64),
    Path(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleRecord {
    pub id: String,
    pub source: Source,
    pub label: u8,
    pub subtype: Subtype,
    pub split: Split,
}

impl SampleRecord {
    pub fn is_positive(&self) -> bool {
        self.label == 1
    }

    fn validate(&self) -> Result<()> {
        if self.label > 1 {
            return Err(Error::Validation(format!("record {:?}: label {} not in {{0,1}}", self.id, self.label)));
        }
        if (self.subtype == Subtype::Covid) != (self.label == 1) {
            return Err(Error::Validation(format!(
                "record {:?}: subtype {:?} inconsistent with label {}",
                self.id, self.subtype, self.label
            )));
        }
        Ok(())
    }
}

/// Ordered dataset inventory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub seed: u64,
    pub records: Vec<SampleRecord>,
}

impl Manifest {
    /// Build and validate.
    pub fn new(seed: u64, records: Vec<SampleRecord>) -> Result<Self> {
        let m = Self { seed, records };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::with_capacity(self.records.len());
        for r in &self.records {
            r.validate()?;
            if !seen.insert(r.id.as_str()) {
                return Err(Error::Validation(format!("duplicate id {:?}", r.id)));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn ids(&self) -> Vec<&str> {
        self.records.iter().map(|r| r.id.as_str()).collect()
    }

    pub fn get(&self, id: &str) -> Option<&SampleRecord> {
        self.records.iter().find(|r| r.id == id)
    }

    /// Records with the given split tag, as a new manifest.
    pub fn with_split(&self, split: Split) -> Manifest {
        Manifest { seed: self.seed, records: self.records.iter().filter(|r| r.split == split).cloned().collect() }
    }

    /// Records whose id is in `ids`, in manifest order.
    pub fn subset<'a>(&self, ids: impl IntoIterator<Item = &'a str>) -> Manifest {
        let wanted: HashSet<&str> = ids.into_iter().collect();
        Manifest {
            seed: self.seed,
            records: self.records.iter().filter(|r| wanted.contains(r.id.as_str())).cloned().collect(),
        }
    }

    pub fn class_counts(&self) -> (usize, usize) {
        let pos = self.records.iter().filter(|r| r.is_positive()).count();
        (pos, self.records.len() - pos)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let m: Manifest = serde_json::from_str(text)
            .map_err(|e| Error::Format(format!("manifest line {} column {}: {e}", e.line(), e.column())))?;
        m.validate()?;
        Ok(m)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::write_atomic(path, self.to_json().as_bytes())
    }
}

/// Read a manifest JSON file.
pub fn load_manifest(path: &Path) -> Result<Manifest> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Manifest::from_json(&text)
}

fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn shuffled_indices(indices: &[usize], rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut out = indices.to_vec();
    out.shuffle(rng);
    out
}

/// Negative subtype counts for `n_per_class`: round each fraction, then put
/// the remainder on the largest fraction (first listed on ties).
pub fn composition_counts(n_per_class: usize, composition: &[(Subtype, f64)]) -> Result<Vec<(Subtype, usize)>> {
    if composition.is_empty() {
        return Err(Error::Argument("composition is empty".into()));
    }
    if composition.iter().any(|(s, _)| *s == Subtype::Covid) {
        return Err(Error::Argument("composition must list negative subtypes only".into()));
    }
    let total: f64 = composition.iter().map(|(_, f)| f).sum();
    if composition.iter().any(|(_, f)| !(0.0..=1.0).contains(f)) || (total - 1.0).abs() > 1e-9 {
        return Err(Error::Argument(format!("composition fractions must sum to 1, got {total}")));
    }
    let mut counts: Vec<(Subtype, i64)> =
        composition.iter().map(|&(s, f)| (s, (f * n_per_class as f64).round() as i64)).collect();
    let assigned: i64 = counts.iter().map(|(_, c)| c).sum();
    let remainder = n_per_class as i64 - assigned;
    let largest =
        composition.iter().enumerate().fold(0, |best, (i, (_, f))| if *f > composition[best].1 { i } else { best });
    counts[largest].1 += remainder;
    if counts[largest].1 < 0 {
        return Err(Error::Argument("composition rounding produced a negative count".into()));
    }
    Ok(counts.into_iter().map(|(s, c)| (s, c as usize)).collect())
}

/// Sample `n_per_class` positives plus `n_per_class` negatives split across
/// negative subtypes by `composition`. Output keeps manifest order.
pub fn balanced_subset(
    m: &Manifest,
    n_per_class: usize,
    composition: &[(Subtype, f64)],
    seed: u64,
) -> Result<Manifest> {
    let mut plan = vec![(Subtype::Covid, n_per_class)];
    plan.extend(composition_counts(n_per_class, composition)?);

    let mut chosen = HashSet::new();
    for (stream, (subtype, want)) in plan.iter().enumerate() {
        let pool: Vec<usize> = (0..m.records.len()).filter(|&i| m.records[i].subtype == *subtype).collect();
        if pool.len() < *want {
            return Err(Error::Capacity(format!(
                "subtype {subtype:?}: need {want}, have {} (short by {})",
                pool.len(),
                want - pool.len()
            )));
        }
        let mut rng = rng_for(seed, stream as u64);
        chosen.extend(shuffled_indices(&pool, &mut rng).into_iter().take(*want));
    }
    Ok(Manifest {
        seed,
        records: (0..m.records.len()).filter(|i| chosen.contains(i)).map(|i| m.records[i].clone()).collect(),
    })
}

/// Hold out `n_val_per_class` records per class. Returned records carry
/// split tags `Train` / `Val`.
pub fn holdout_split(m: &Manifest, n_val_per_class: usize, seed: u64) -> Result<(Manifest, Manifest)> {
    let mut val = HashSet::new();
    for label in [1u8, 0u8] {
        let pool: Vec<usize> = (0..m.records.len()).filter(|&i| m.records[i].label == label).collect();
        if n_val_per_class > 0 && pool.len() <= n_val_per_class {
            return Err(Error::Capacity(format!(
                "class {label}: {} records cannot supply {n_val_per_class} validation records and leave any for training",
                pool.len()
            )));
        }
        let mut rng = rng_for(seed, label as u64);
        val.extend(shuffled_indices(&pool, &mut rng).into_iter().take(n_val_per_class));
    }
    let mut train = Vec::new();
    let mut held = Vec::new();
    for (i, r) in m.records.iter().enumerate() {
        let mut r = r.clone();
        if val.contains(&i) {
            r.split = Split::Val;
            held.push(r);
        } else {
            if n_val_per_class > 0 {
                r.split = Split::Train;
            }
            train.push(r);
        }
    }
    Ok((Manifest { seed, records: train }, Manifest { seed, records: held }))
}

/// One fold: ids used for training and ids held out for testing.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fold {
    pub train: Vec<String>,
    pub test: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub k: usize,
    pub seed: u64,
    pub folds: Vec<Fold>,
}

/// Stratified k-fold: each class is shuffled with `seed` and dealt round
/// robin across folds, so per-class test counts differ by at most one.
pub fn stratified_kfold(m: &Manifest, k: usize, seed: u64) -> Result<SplitPlan> {
    if k < 2 {
        return Err(Error::Argument(format!("k must be at least 2, got {k}")));
    }
    let mut fold_of = vec![0usize; m.records.len()];
    for label in [1u8, 0u8] {
        let pool: Vec<usize> = (0..m.records.len()).filter(|&i| m.records[i].label == label).collect();
        if pool.len() < k {
            return Err(Error::Capacity(format!(
                "class {label}: {} records for {k} folds (short by {})",
                pool.len(),
                k - pool.len()
            )));
        }
        let mut rng = rng_for(seed, label as u64);
        for (pos, idx) in shuffled_indices(&pool, &mut rng).into_iter().enumerate() {
            fold_of[idx] = pos % k;
        }
    }
    let folds = (0..k)
        .map(|f| {
            let (test, train): (Vec<_>, Vec<_>) = m.records.iter().zip(&fold_of).partition(|(_, &fo)| fo == f);
            Fold {
                train: train.into_iter().map(|(r, _)| r.id.clone()).collect(),
                test: test.into_iter().map(|(r, _)| r.id.clone()).collect(),
            }
        })
        .collect();
    Ok(SplitPlan { k, seed, folds })
}

impl SplitPlan {
    /// Check the partition and balance invariants against `m`.
    pub fn validate(&self, m: &Manifest) -> Result<()> {
        if self.folds.len() != self.k {
            return Err(Error::Validation(format!("{} folds for k = {}", self.folds.len(), self.k)));
        }
        let labels: HashMap<&str, u8> = m.records.iter().map(|r| (r.id.as_str(), r.label)).collect();
        let mut covered = HashSet::new();
        let mut per_class: [Vec<usize>; 2] = [Vec::new(), Vec::new()];
        for (f, fold) in self.folds.iter().enumerate() {
            let test: HashSet<&str> = fold.test.iter().map(String::as_str).collect();
            if fold.train.iter().any(|id| test.contains(id.as_str())) {
                return Err(Error::Validation(format!("fold {f}: train and test overlap")));
            }
            let mut counts = [0usize; 2];
            for id in &fold.test {
                let label = *labels
                    .get(id.as_str())
                    .ok_or_else(|| Error::Validation(format!("fold {f}: unknown id {id:?}")))?;
                counts[label as usize] += 1;
                if !covered.insert(id.as_str()) {
                    return Err(Error::Validation(format!("id {id:?} tested in more than one fold")));
                }
            }
            per_class[0].push(counts[0]);
            per_class[1].push(counts[1]);
        }
        if covered.len() != labels.len() {
            return Err(Error::Validation(format!("test folds cover {} of {} ids", covered.len(), labels.len())));
        }
        for counts in &per_class {
            let (lo, hi) = (counts.iter().min(), counts.iter().max());
            if let (Some(lo), Some(hi)) = (lo, hi) {
                if hi - lo > 1 {
                    return Err(Error::Validation(format!("per-class fold sizes range {lo}..{hi}")));
                }
            }
        }
        Ok(())
    }
}

/// Memory layout of feature rows.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FeatureLayout {
    /// One pooled vector per sample.
    Flat,
    /// A `c × h × w` map per sample; `dim = c·h·w`.
    Spatial { channels: u32, height: u32, width: u32 },
}

/// Frozen-backbone outputs for a set of samples, row-major `n × dim`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSet {
    pub ids: Vec<String>,
    pub dim: usize,
    pub layout: FeatureLayout,
    pub data: Vec<f32>,
    pub producer: String,
}

const FVEC_MAGIC: &[u8; 4] = b"FVEC";
const FVEC_VERSION: u32 = 1;

impl FeatureSet {
    pub fn flat(ids: Vec<String>, dim: usize, data: Vec<f32>, producer: impl Into<String>) -> Result<Self> {
        let fs = Self { ids, dim, layout: FeatureLayout::Flat, data, producer: producer.into() };
        fs.validate()?;
        Ok(fs)
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    /// Row index by id.
    pub fn index(&self) -> HashMap<&str, usize> {
        self.ids.iter().enumerate().map(|(i, id)| (id.as_str(), i)).collect()
    }

    /// Shape of one sample as a tensor.
    pub fn sample_shape(&self) -> Vec<usize> {
        match self.layout {
            FeatureLayout::Flat => vec![self.dim],
            FeatureLayout::Spatial { channels, height, width } => {
                vec![channels as usize, height as usize, width as usize]
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.data.len() != self.ids.len() * self.dim {
            return Err(Error::Validation(format!(
                "feature data has {} values for {} rows × {} dims",
                self.data.len(),
                self.ids.len(),
                self.dim
            )));
        }
        if let FeatureLayout::Spatial { channels, height, width } = self.layout {
            if (channels as usize) * (height as usize) * (width as usize) != self.dim {
                return Err(Error::Validation("spatial layout does not match dim".into()));
            }
        }
        if let Some(pos) = self.data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Validation(format!(
                "non-finite feature value in row {} ({:?})",
                pos / self.dim.max(1),
                self.ids[pos / self.dim.max(1)]
            )));
        }
        let mut seen = HashSet::new();
        for id in &self.ids {
            if id.as_bytes().contains(&0) {
                return Err(Error::Validation(format!("id {id:?} contains a NUL byte")));
            }
            if !seen.insert(id) {
                return Err(Error::Validation(format!("duplicate feature id {id:?}")));
            }
        }
        Ok(())
    }

    /// Every id must resolve in `m`, either directly or as a flipped copy of a
    /// manifest record.
    pub fn check_against(&self, m: &Manifest) -> Result<()> {
        let ids: HashSet<&str> = m.records.iter().map(|r| r.id.as_str()).collect();
        for id in &self.ids {
            let base = id.strip_suffix(FLIP_SUFFIX).unwrap_or(id);
            if !ids.contains(base) {
                return Err(Error::Validation(format!("feature id {id:?} not in manifest")));
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.validate()?;
        let n = u32::try_from(self.ids.len()).map_err(|_| Error::Argument("too many rows".into()))?;
        let dim = u32::try_from(self.dim).map_err(|_| Error::Argument("dim too large".into()))?;
        let mut out = Vec::with_capacity(20 + self.data.len() * 4);
        out.extend_from_slice(FVEC_MAGIC);
        out.extend_from_slice(&FVEC_VERSION.to_le_bytes());
        out.extend_from_slice(&n.to_le_bytes());
        out.extend_from_slice(&dim.to_le_bytes());
        match self.layout {
            FeatureLayout::Flat => out.extend_from_slice(&[0, 0, 0, 0]),
            FeatureLayout::Spatial { channels, height, width } => {
                out.extend_from_slice(&[1, 0, 0, 0]);
                for v in [channels, height, width] {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        for id in &self.ids {
            out.extend_from_slice(id.as_bytes());
            out.push(0);
        }
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8], producer: impl Into<String>) -> Result<Self> {
        let mut r = ByteReader { bytes, pos: 0 };
        if r.take(4)? != FVEC_MAGIC {
            return Err(Error::Format("bad magic, expected FVEC".into()));
        }
        let version = r.u32()?;
        if version != FVEC_VERSION {
            return Err(Error::Format(format!("unsupported FVEC version {version}")));
        }
        let n = r.u32()? as usize;
        let dim = r.u32()? as usize;
        let flags = r.take(4)?;
        let layout = match flags[0] {
            0 => FeatureLayout::Flat,
            1 => FeatureLayout::Spatial { channels: r.u32()?, height: r.u32()?, width: r.u32()? },
            other => return Err(Error::Format(format!("unknown layout flag {other}"))),
        };
        let mut ids = Vec::with_capacity(n);
        for i in 0..n {
            let rest = &r.bytes[r.pos..];
            let end = rest
                .iter()
                .position(|&b| b == 0)
                .ok_or_else(|| Error::Format(format!("truncated id table at row {i} of {n}")))?;
            let id = std::str::from_utf8(&rest[..end])
                .map_err(|_| Error::Format(format!("id {i} is not UTF-8")))?
                .to_owned();
            r.pos += end + 1;
            ids.push(id);
        }
        let want = n
            .checked_mul(dim)
            .and_then(|v| v.checked_mul(4))
            .ok_or_else(|| Error::Format("header sizes overflow".into()))?;
        let payload = &r.bytes[r.pos..];
        if payload.len() < want {
            return Err(Error::Format(format!(
                "truncated payload: header declares {n} rows × {dim} dims ({want} bytes), found {}",
                payload.len()
            )));
        }
        if payload.len() > want {
            return Err(Error::Format(format!(
                "row-count mismatch: {} trailing bytes after {n} rows",
                payload.len() - want
            )));
        }
        let data = payload.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
        let fs = FeatureSet { ids, dim, layout, data, producer: producer.into() };
        fs.validate()?;
        Ok(fs)
    }
}

struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Format(format!("truncated header at byte {}", self.pos)));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

pub fn write_feature_file(fs: &FeatureSet, path: &Path) -> Result<()> {
    let bytes = fs.to_bytes()?;
    crate::write_atomic(path, &bytes)
}

/// Read a feature file; the producer string is taken from the file name.
pub fn read_feature_file(path: &Path) -> Result<FeatureSet> {
    let mut bytes = Vec::new();
    std::fs::File::open(path).and_then(|mut f| f.read_to_end(&mut bytes)).map_err(|e| Error::io(path, e))?;
    let producer = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    FeatureSet::from_bytes(&bytes, producer)
}

/// Count records per (label, fold) for reporting.
pub fn fold_class_counts(plan: &SplitPlan, m: &Manifest) -> Vec<[usize; 2]> {
    let labels: BTreeMap<&str, u8> = m.records.iter().map(|r| (r.id.as_str(), r.label)).collect();
    plan.folds
        .iter()
        .map(|f| {
            let mut c = [0; 2];
            for id in &f.test {
                if let Some(&l) = labels.get(id.as_str()) {
                    c[l as usize] += 1;
                }
            }
            c
        })
        .collect()
}
