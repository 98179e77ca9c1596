//! Embedding storage, codecs, and class-logit (cl-embedding) operations.
//!
//! Vectors are kept raw as `f32`, exactly as they are stored on disk; every
//! computation on them accumulates in `f64`. Length normalization happens at
//! scoring time, so the logit fusion here works on unnormalized activations.
//!
//! Binary layout, little-endian throughout:
//!
//! ```text
//! "EMB1" | dim: u32 | count: u64 | count × (id_len: u16 | id: UTF-8 | dim × f32)
//! ```
//!
//! Text layout: one `id<TAB>v1,v2,...,vD` record per line.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use thiserror::Error;

use crate::numfmt::g17;

pub const MAGIC: &[u8; 4] = b"EMB1";

#[derive(Debug, Error)]
pub enum EmbeddingError {
    #[error("zero-length vector")]
    ZeroVector,
    #[error("dimension mismatch: expected {expected}, got {got}{}", .line.map(|l| format!(" at line {l}")).unwrap_or_default())]
    DimMismatch {
        expected: usize,
        got: usize,
        line: Option<usize>,
    },
    #[error("non-finite component in `{0}`")]
    NonFinite(String),
    #[error("empty embedding id")]
    EmptyId,
    #[error("duplicate embedding id `{0}`")]
    DuplicateId(String),
    #[error("embedding dimension must be positive")]
    ZeroDim,
    #[error("bad magic; not an EMB1 file")]
    BadMagic,
    #[error("file truncated")]
    TruncatedFile,
    #[error("{0} unexpected trailing bytes")]
    TrailingBytes(usize),
    #[error("line {0}: malformed record")]
    MalformedLine(usize),
    #[error("id of {0} bytes does not fit a u16 length")]
    IdTooLong(usize),
    #[error("class labels differ between logit sets")]
    ClassMismatch,
    #[error("logit sets do not contain the same ids")]
    IdMismatch,
    #[error("bad fusion weights: {0}")]
    BadWeights(&'static str),
    #[error("bad class index selection")]
    BadIndex,
    #[error("empty pool")]
    EmptyPool,
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingRecord {
    pub id: String,
    pub vector: Vec<f32>,
}

impl EmbeddingRecord {
    pub fn new(id: impl Into<String>, vector: Vec<f32>) -> Self {
        EmbeddingRecord { id: id.into(), vector }
    }

    pub fn dim(&self) -> usize {
        self.vector.len()
    }
}

/// Records keyed by id, all of one dimension. Iteration is in id order.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSet {
    records: BTreeMap<String, EmbeddingRecord>,
    dim: usize,
}

impl EmbeddingSet {
    pub fn empty(dim: usize) -> Result<Self, EmbeddingError> {
        if dim == 0 {
            return Err(EmbeddingError::ZeroDim);
        }
        Ok(EmbeddingSet {
            records: BTreeMap::new(),
            dim,
        })
    }

    /// Builds a set from records; the first record fixes the dimension.
    pub fn from_records(records: impl IntoIterator<Item = EmbeddingRecord>) -> Result<Self, EmbeddingError> {
        let mut iter = records.into_iter().peekable();
        let dim = iter.peek().map(|r| r.dim()).ok_or(EmbeddingError::ZeroDim)?;
        let mut set = EmbeddingSet::empty(dim)?;
        for r in iter {
            set.insert(r)?;
        }
        Ok(set)
    }

    pub fn insert(&mut self, record: EmbeddingRecord) -> Result<(), EmbeddingError> {
        if record.id.is_empty() {
            return Err(EmbeddingError::EmptyId);
        }
        if record.dim() != self.dim {
            return Err(EmbeddingError::DimMismatch {
                expected: self.dim,
                got: record.dim(),
                line: None,
            });
        }
        if record.vector.iter().any(|v| !v.is_finite()) {
            return Err(EmbeddingError::NonFinite(record.id));
        }
        if self.records.contains_key(&record.id) {
            return Err(EmbeddingError::DuplicateId(record.id));
        }
        self.records.insert(record.id.clone(), record);
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&[f32]> {
        self.records.get(id).map(|r| r.vector.as_slice())
    }

    pub fn contains(&self, id: &str) -> bool {
        self.records.contains_key(id)
    }

    /// Records in ascending id order.
    pub fn records(&self) -> impl ExactSizeIterator<Item = &EmbeddingRecord> {
        self.records.values()
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.records.keys().map(String::as_str)
    }
}

/// Scales `v` to unit Euclidean length.
pub fn l2_normalize(v: &[f64]) -> Result<Vec<f64>, EmbeddingError> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm == 0.0 || !norm.is_finite() {
        return Err(EmbeddingError::ZeroVector);
    }
    Ok(v.iter().map(|x| x / norm).collect())
}

/// Class-posterior logit embeddings: one coordinate per training class.
#[derive(Debug, Clone, PartialEq)]
pub struct ClLogitSet {
    pub set: EmbeddingSet,
    pub class_labels: Option<Vec<String>>,
}

impl ClLogitSet {
    pub fn new(set: EmbeddingSet, class_labels: Option<Vec<String>>) -> Result<Self, EmbeddingError> {
        if let Some(labels) = &class_labels {
            if labels.len() != set.dim() {
                return Err(EmbeddingError::DimMismatch {
                    expected: set.dim(),
                    got: labels.len(),
                    line: None,
                });
            }
        }
        Ok(ClLogitSet { set, class_labels })
    }

    pub fn num_classes(&self) -> usize {
        self.set.dim()
    }
}

/// Weighted cl-embedding fusion: per id, `Σ wᵢ·vᵢ / Σ wᵢ`.
///
/// Every set must share the class inventory and the id set. Weights are
/// relative; scaling them all by a positive constant changes nothing.
pub fn fuse_cl(sets: &[&ClLogitSet], weights: &[f64]) -> Result<ClLogitSet, EmbeddingError> {
    if sets.len() < 2 {
        return Err(EmbeddingError::BadWeights("need at least two logit sets"));
    }
    if weights.len() != sets.len() {
        return Err(EmbeddingError::BadWeights("one weight per set required"));
    }
    if weights.iter().any(|w| !w.is_finite()) {
        return Err(EmbeddingError::BadWeights("weights must be finite"));
    }
    let total: f64 = weights.iter().sum();
    if total <= 0.0 {
        return Err(EmbeddingError::BadWeights("weights must sum to a positive value"));
    }
    let first = sets[0];
    for s in &sets[1..] {
        if s.set.dim() != first.set.dim() || s.class_labels != first.class_labels {
            return Err(EmbeddingError::ClassMismatch);
        }
        if s.set.len() != first.set.len() || !s.set.ids().eq(first.set.ids()) {
            return Err(EmbeddingError::IdMismatch);
        }
    }
    let dim = first.set.dim();
    let fused: Vec<EmbeddingRecord> = first
        .set
        .records()
        .collect::<Vec<_>>()
        .par_iter()
        .map(|r| {
            let mut acc = vec![0.0f64; dim];
            for (s, &w) in sets.iter().zip(weights) {
                let v = s.set.get(&r.id).expect("id sets checked equal");
                for (a, &x) in acc.iter_mut().zip(v) {
                    *a += w * f64::from(x);
                }
            }
            EmbeddingRecord::new(r.id.clone(), acc.into_iter().map(|a| (a / total) as f32).collect())
        })
        .collect();
    let mut set = EmbeddingSet::empty(dim)?;
    for r in fused {
        set.insert(r)?;
    }
    ClLogitSet::new(set, first.class_labels.clone())
}

/// Projects every vector onto the kept class coordinates.
///
/// `keep` must be non-empty, strictly increasing and within range.
pub fn filter_classes(set: &ClLogitSet, keep: &[usize]) -> Result<ClLogitSet, EmbeddingError> {
    let dim = set.set.dim();
    if keep.is_empty() || keep.windows(2).any(|w| w[0] >= w[1]) || keep.iter().any(|&k| k >= dim) {
        return Err(EmbeddingError::BadIndex);
    }
    let mut out = EmbeddingSet::empty(keep.len())?;
    for r in set.set.records() {
        out.insert(EmbeddingRecord::new(r.id.clone(), keep.iter().map(|&k| r.vector[k]).collect()))?;
    }
    let labels = set
        .class_labels
        .as_ref()
        .map(|l| keep.iter().map(|&k| l[k].clone()).collect());
    ClLogitSet::new(out, labels)
}

/// Per-class population variance of the logits over `pool`.
pub fn class_variances(pool: &ClLogitSet) -> Result<Vec<f64>, EmbeddingError> {
    if pool.set.is_empty() {
        return Err(EmbeddingError::EmptyPool);
    }
    let dim = pool.set.dim();
    // Welford, one pass over the pool.
    let mut mean = vec![0.0f64; dim];
    let mut m2 = vec![0.0f64; dim];
    for (n, r) in pool.set.records().enumerate() {
        let n = (n + 1) as f64;
        for ((m, s), &x) in mean.iter_mut().zip(m2.iter_mut()).zip(&r.vector) {
            let x = f64::from(x);
            let delta = x - *m;
            *m += delta / n;
            *s += delta * (x - *m);
        }
    }
    let count = pool.set.len() as f64;
    Ok(m2.into_iter().map(|s| s / count).collect())
}

/// Class indices ordered from most to least informative.
///
/// Informativeness is the logit's population variance across the pool;
/// a near-constant logit cannot separate speakers. Ties keep ascending
/// index order.
pub fn rank_class_informativeness(pool: &ClLogitSet) -> Result<Vec<usize>, EmbeddingError> {
    let var = class_variances(pool)?;
    let mut order: Vec<usize> = (0..var.len()).collect();
    order.sort_by(|&a, &b| var[b].total_cmp(&var[a]).then(a.cmp(&b)));
    Ok(order)
}

/// The `k` most informative classes, returned in ascending index order so
/// the result feeds straight into [`filter_classes`].
pub fn top_informative_classes(pool: &ClLogitSet, k: usize) -> Result<Vec<usize>, EmbeddingError> {
    let mut keep: Vec<usize> = rank_class_informativeness(pool)?.into_iter().take(k).collect();
    keep.sort_unstable();
    Ok(keep)
}

pub fn encode_binary(set: &EmbeddingSet) -> Result<Vec<u8>, EmbeddingError> {
    let mut out = Vec::with_capacity(16 + set.len() * (2 + 16 + 4 * set.dim()));
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(set.dim() as u32).to_le_bytes());
    out.extend_from_slice(&(set.len() as u64).to_le_bytes());
    for r in set.records() {
        let id = r.id.as_bytes();
        let len = u16::try_from(id.len()).map_err(|_| EmbeddingError::IdTooLong(id.len()))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(id);
        for v in &r.vector {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], EmbeddingError> {
        if self.buf.len() < n {
            return Err(EmbeddingError::TruncatedFile);
        }
        let (head, tail) = self.buf.split_at(n);
        self.buf = tail;
        Ok(head)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N], EmbeddingError> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }
}

pub fn decode_binary(bytes: &[u8]) -> Result<EmbeddingSet, EmbeddingError> {
    if bytes.len() < MAGIC.len() || &bytes[..4] != MAGIC {
        return Err(EmbeddingError::BadMagic);
    }
    let mut rd = Reader { buf: &bytes[4..] };
    let dim = u32::from_le_bytes(rd.array()?) as usize;
    let count = u64::from_le_bytes(rd.array()?);
    let mut set = EmbeddingSet::empty(dim)?;
    for _ in 0..count {
        let len = u16::from_le_bytes(rd.array()?) as usize;
        let id = std::str::from_utf8(rd.take(len)?)
            .map_err(|_| EmbeddingError::BadMagic)?
            .to_string();
        let raw = rd.take(4 * dim)?;
        let vector = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("chunk of 4")))
            .collect();
        set.insert(EmbeddingRecord::new(id, vector))?;
    }
    if !rd.buf.is_empty() {
        return Err(EmbeddingError::TrailingBytes(rd.buf.len()));
    }
    Ok(set)
}

/// Text codec; components printed with 17 significant digits.
pub fn encode_text(set: &EmbeddingSet) -> String {
    let mut out = String::new();
    for r in set.records() {
        out.push_str(&r.id);
        out.push('\t');
        for (i, v) in r.vector.iter().enumerate() {
            if i > 0 {
                out.push(',');
            }
            out.push_str(&g17(f64::from(*v)));
        }
        out.push('\n');
    }
    out
}

pub fn decode_text(text: &str) -> Result<EmbeddingSet, EmbeddingError> {
    let mut set: Option<EmbeddingSet> = None;
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        let (id, values) = line.split_once('\t').ok_or(EmbeddingError::MalformedLine(line_no))?;
        let vector = values
            .split(',')
            .map(|v| v.trim().parse::<f64>().map(|x| x as f32))
            .collect::<Result<Vec<f32>, _>>()
            .map_err(|_| EmbeddingError::MalformedLine(line_no))?;
        let set = match &mut set {
            Some(s) => s,
            None => set.insert(EmbeddingSet::empty(vector.len())?),
        };
        if vector.len() != set.dim() {
            return Err(EmbeddingError::DimMismatch {
                expected: set.dim(),
                got: vector.len(),
                line: Some(line_no),
            });
        }
        set.insert(EmbeddingRecord::new(id, vector))?;
    }
    set.ok_or(EmbeddingError::ZeroDim)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Codec {
    Text,
    Binary,
}

impl Codec {
    /// `.emb` and `.bin` files are binary, everything else is text.
    pub fn for_path(path: &Path) -> Codec {
        match path.extension().and_then(|e| e.to_str()) {
            Some("emb") | Some("bin") => Codec::Binary,
            _ => Codec::Text,
        }
    }
}

pub fn read_embeddings(path: &Path, codec: Codec) -> Result<EmbeddingSet, EmbeddingError> {
    match codec {
        Codec::Binary => decode_binary(&fs::read(path)?),
        Codec::Text => decode_text(&fs::read_to_string(path)?),
    }
}

pub fn write_embeddings(path: &Path, set: &EmbeddingSet, codec: Codec) -> Result<(), EmbeddingError> {
    match codec {
        Codec::Binary => fs::write(path, encode_binary(set)?)?,
        Codec::Text => fs::write(path, encode_text(set))?,
    }
    Ok(())
}

/// Class labels file: one label per line.
pub fn parse_class_labels(text: &str) -> Vec<String> {
    text.lines().map(str::to_string).collect()
}
