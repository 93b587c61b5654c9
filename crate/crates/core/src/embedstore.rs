//! Per-model embedding tables, enrollment aggregation and cosine SV scoring.
//!
//! Binary table layout (little-endian):
//!
//! ```text
//! magic    b"SVEB"
//! version  u16 = 1
//! dim      u32
//! count    u64
//! count x { id_len u16, id bytes (UTF-8), dim x f32 }
//! ```
//!
//! Values are widened to `f64` on load and narrowed back to `f32` on write.

use std::collections::HashMap;
use std::fs;
use std::io::{self, Read, Write};
use std::path::Path;
use std::sync::OnceLock;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use indexmap::IndexMap;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::protocol::{EnrollmentMap, ProtocolSet};

pub const EMBEDDING_MAGIC: &[u8; 4] = b"SVEB";
pub const EMBEDDING_VERSION: u16 = 1;

#[derive(Debug, Error)]
pub enum EmbedError {
    #[error("bad magic: not an embedding file")]
    BadMagic,
    #[error("unsupported embedding file version {0}")]
    UnsupportedVersion(u16),
    #[error("record {0} has the wrong dimension")]
    DimMismatch(usize),
    #[error("duplicate utterance '{0}'")]
    DuplicateUtterance(String),
    #[error("utterance '{0}' has an all-zero embedding")]
    ZeroVector(String),
    #[error("utterance '{0}' has a non-finite embedding value")]
    NonFinite(String),
    #[error("file is truncated")]
    TruncatedFile,
    #[error("record {0} has an invalid utterance id")]
    InvalidId(usize),
    #[error("embedding dimension must be positive")]
    ZeroDim,
    #[error("vector lengths differ ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("zero-norm vector")]
    ZeroNorm,
    #[error("utterance '{utt}' missing from table '{model}'")]
    MissingUtterance { utt: String, model: String },
    #[error("speaker '{0}' has no enrollment utterances")]
    NotEnrolled(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Utterance id to fixed-length vector, for one upstream model.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    model_id: String,
    dim: usize,
    entries: IndexMap<String, Vec<f64>>,
}

impl EmbeddingTable {
    pub fn new(model_id: impl Into<String>, dim: usize) -> Result<Self, EmbedError> {
        if dim == 0 {
            return Err(EmbedError::ZeroDim);
        }
        Ok(Self { model_id: model_id.into(), dim, entries: IndexMap::new() })
    }

    pub fn insert(&mut self, utt_id: &str, vector: Vec<f64>) -> Result<(), EmbedError> {
        let index = self.entries.len();
        if utt_id.is_empty() || utt_id.chars().any(char::is_whitespace) {
            return Err(EmbedError::InvalidId(index));
        }
        if vector.len() != self.dim {
            return Err(EmbedError::DimMismatch(index));
        }
        if vector.iter().any(|v| !v.is_finite()) {
            return Err(EmbedError::NonFinite(utt_id.to_string()));
        }
        if vector.iter().all(|&v| v == 0.0) {
            return Err(EmbedError::ZeroVector(utt_id.to_string()));
        }
        if self.entries.contains_key(utt_id) {
            return Err(EmbedError::DuplicateUtterance(utt_id.to_string()));
        }
        self.entries.insert(utt_id.to_string(), vector);
        Ok(())
    }

    pub fn model_id(&self) -> &str {
        &self.model_id
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, utt_id: &str) -> Option<&[f64]> {
        self.entries.get(utt_id).map(Vec::as_slice)
    }

    pub fn require(&self, utt_id: &str) -> Result<&[f64], EmbedError> {
        self.get(utt_id).ok_or_else(|| EmbedError::MissingUtterance {
            utt: utt_id.to_string(),
            model: self.model_id.clone(),
        })
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &[f64])> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v.as_slice()))
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> io::Result<()> {
        w.write_all(EMBEDDING_MAGIC)?;
        w.write_u16::<LittleEndian>(EMBEDDING_VERSION)?;
        w.write_u32::<LittleEndian>(self.dim as u32)?;
        w.write_u64::<LittleEndian>(self.entries.len() as u64)?;
        for (id, v) in &self.entries {
            w.write_u16::<LittleEndian>(id.len() as u16)?;
            w.write_all(id.as_bytes())?;
            for &x in v {
                w.write_f32::<LittleEndian>(x as f32)?;
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.write_to(&mut buf).expect("writing to a Vec cannot fail");
        buf
    }

    pub fn save(&self, path: &Path) -> io::Result<()> {
        fs::write(path, self.to_bytes())
    }

    pub fn from_bytes(model_id: &str, bytes: &[u8]) -> Result<Self, EmbedError> {
        let mut r = bytes;
        let mut magic = [0u8; 4];
        read_exact(&mut r, &mut magic)?;
        if &magic != EMBEDDING_MAGIC {
            return Err(EmbedError::BadMagic);
        }
        let version = r.read_u16::<LittleEndian>().map_err(truncated)?;
        if version != EMBEDDING_VERSION {
            return Err(EmbedError::UnsupportedVersion(version));
        }
        let dim = r.read_u32::<LittleEndian>().map_err(truncated)? as usize;
        let count = r.read_u64::<LittleEndian>().map_err(truncated)?;
        let mut table = Self::new(model_id, dim)?;
        for index in 0..count as usize {
            let id_len = r.read_u16::<LittleEndian>().map_err(truncated)? as usize;
            let mut id = vec![0u8; id_len];
            read_exact(&mut r, &mut id)?;
            let id = String::from_utf8(id).map_err(|_| EmbedError::InvalidId(index))?;
            let mut v = Vec::with_capacity(dim);
            for _ in 0..dim {
                v.push(r.read_f32::<LittleEndian>().map_err(truncated)? as f64);
            }
            table.insert(&id, v)?;
        }
        Ok(table)
    }

    /// Parses the text fallback format: `<utt_id> v1 v2 ... vD` per line.
    /// The dimension is taken from the first record.
    pub fn from_text(model_id: &str, text: &str) -> Result<Self, EmbedError> {
        let mut table: Option<Self> = None;
        for (index, line) in text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty() && !l.starts_with('#'))
            .enumerate()
        {
            let mut fields = line.split_whitespace();
            let id = fields.next().unwrap_or_default();
            let values = fields
                .map(|f| f.parse::<f64>().map_err(|_| EmbedError::DimMismatch(index)))
                .collect::<Result<Vec<_>, _>>()?;
            let t = match &mut table {
                Some(t) => t,
                None => table.insert(Self::new(model_id, values.len()).map_err(|_| EmbedError::DimMismatch(index))?),
            };
            t.insert(id, values)?;
        }
        table.ok_or(EmbedError::TruncatedFile)
    }
}

impl EmbedError {
    // Cached aggregation failures are handed out once per lookup.
    fn duplicate(&self) -> Self {
        match self {
            Self::MissingUtterance { utt, model } => {
                Self::MissingUtterance { utt: utt.clone(), model: model.clone() }
            }
            Self::NotEnrolled(s) => Self::NotEnrolled(s.clone()),
            Self::ZeroNorm => Self::ZeroNorm,
            other => Self::Io(io::Error::other(other.to_string())),
        }
    }
}

fn truncated(_: io::Error) -> EmbedError {
    EmbedError::TruncatedFile
}

fn read_exact(r: &mut &[u8], buf: &mut [u8]) -> Result<(), EmbedError> {
    r.read_exact(buf).map_err(truncated)
}

/// Model id derived from a file path: the file stem.
pub fn model_id_from_path(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.display().to_string())
}

/// Loads a binary embedding table.
pub fn load_embeddings(path: &Path) -> Result<EmbeddingTable, EmbedError> {
    let bytes = fs::read(path)?;
    EmbeddingTable::from_bytes(&model_id_from_path(path), &bytes)
}

/// Loads either format, dispatching on the magic bytes.
pub fn load_embeddings_any(path: &Path) -> Result<EmbeddingTable, EmbedError> {
    let bytes = fs::read(path)?;
    let id = model_id_from_path(path);
    if bytes.starts_with(EMBEDDING_MAGIC) {
        EmbeddingTable::from_bytes(&id, &bytes)
    } else {
        let text = String::from_utf8(bytes).map_err(|_| EmbedError::BadMagic)?;
        EmbeddingTable::from_text(&id, &text)
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn l2_norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Cosine similarity, clamped to `[-1, 1]`.
pub fn cosine_score(a: &[f64], b: &[f64]) -> Result<f64, EmbedError> {
    if a.len() != b.len() {
        return Err(EmbedError::LengthMismatch(a.len(), b.len()));
    }
    let na = l2_norm(a);
    let nb = l2_norm(b);
    if na == 0.0 || nb == 0.0 {
        return Err(EmbedError::ZeroNorm);
    }
    Ok((dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

fn normalized(v: &[f64]) -> Result<Vec<f64>, EmbedError> {
    let n = l2_norm(v);
    if n == 0.0 {
        return Err(EmbedError::ZeroNorm);
    }
    Ok(v.iter().map(|x| x / n).collect())
}

fn mean_of(vectors: &[Vec<f64>]) -> Vec<f64> {
    let dim = vectors[0].len();
    let k = vectors.len() as f64;
    (0..dim).map(|d| vectors.iter().map(|v| v[d]).sum::<f64>() / k).collect()
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum EnrollmentStrategy {
    /// Normalize each enrollment vector, average, renormalize.
    #[default]
    MeanOfNormalized,
    /// Plain average of the raw vectors.
    MeanRaw,
    /// Keep the vectors; a trial's score is the mean of per-utterance cosines.
    ScoreMean,
}

impl std::str::FromStr for EnrollmentStrategy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().replace(['-', '_'], "").as_str() {
            "meanofnormalized" | "meannorm" => Ok(Self::MeanOfNormalized),
            "meanraw" => Ok(Self::MeanRaw),
            "scoremean" => Ok(Self::ScoreMean),
            other => Err(format!("unknown enrollment strategy '{other}'")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnrollmentAggregate {
    pub speaker_id: String,
    pub strategy: EnrollmentStrategy,
    /// The aggregated vector. Empty under [`EnrollmentStrategy::ScoreMean`].
    pub vector: Vec<f64>,
    /// Raw enrollment vectors, kept only under [`EnrollmentStrategy::ScoreMean`].
    pub members: Vec<Vec<f64>>,
}

impl EnrollmentAggregate {
    pub fn score(&self, test: &[f64]) -> Result<f64, EmbedError> {
        match self.strategy {
            EnrollmentStrategy::ScoreMean => {
                let mut sum = 0.0;
                for m in &self.members {
                    sum += cosine_score(m, test)?;
                }
                Ok(sum / self.members.len() as f64)
            }
            _ => cosine_score(&self.vector, test),
        }
    }
}

pub fn aggregate_enrollment(
    speaker_id: &str,
    enrollment: &EnrollmentMap,
    table: &EmbeddingTable,
    strategy: EnrollmentStrategy,
) -> Result<EnrollmentAggregate, EmbedError> {
    let utts = enrollment
        .get(speaker_id)
        .filter(|u| !u.is_empty())
        .ok_or_else(|| EmbedError::NotEnrolled(speaker_id.to_string()))?;
    let raw = utts
        .iter()
        .map(|u| table.require(u).map(<[f64]>::to_vec))
        .collect::<Result<Vec<_>, _>>()?;
    let (vector, members) = match strategy {
        EnrollmentStrategy::MeanOfNormalized => {
            let unit = raw.iter().map(|v| normalized(v)).collect::<Result<Vec<_>, _>>()?;
            (normalized(&mean_of(&unit))?, Vec::new())
        }
        EnrollmentStrategy::MeanRaw => (mean_of(&raw), Vec::new()),
        EnrollmentStrategy::ScoreMean => (Vec::new(), raw),
    };
    Ok(EnrollmentAggregate { speaker_id: speaker_id.to_string(), strategy, vector, members })
}

/// One row per trial, one column per ASV model.
pub type SvScoreMatrix = Vec<Vec<f64>>;

/// Scores trials against a fixed set of tables, caching one enrollment
/// aggregate per (speaker, model). Cache cells are filled at most once, so
/// concurrent scoring sees the same aggregate a serial pass would.
pub struct SvScorer<'a> {
    enrollment: &'a EnrollmentMap,
    tables: &'a [EmbeddingTable],
    strategy: EnrollmentStrategy,
    cache: Vec<HashMap<String, OnceLock<Result<EnrollmentAggregate, EmbedError>>>>,
}

impl<'a> SvScorer<'a> {
    pub fn new(
        enrollment: &'a EnrollmentMap,
        tables: &'a [EmbeddingTable],
        strategy: EnrollmentStrategy,
    ) -> Self {
        let cache = tables
            .iter()
            .map(|_| enrollment.iter().map(|(s, _)| (s.to_string(), OnceLock::new())).collect())
            .collect();
        Self { enrollment, tables, strategy, cache }
    }

    fn aggregate(&self, model: usize, speaker_id: &str) -> Result<&EnrollmentAggregate, EmbedError> {
        let cell = self.cache[model]
            .get(speaker_id)
            .ok_or_else(|| EmbedError::NotEnrolled(speaker_id.to_string()))?;
        cell.get_or_init(|| {
            aggregate_enrollment(speaker_id, self.enrollment, &self.tables[model], self.strategy)
        })
        .as_ref()
        .map_err(EmbedError::duplicate)
    }

    /// Scores of one (speaker, test utterance) pair, one per model.
    pub fn score(&self, speaker_id: &str, test_utt_id: &str) -> Result<Vec<f64>, EmbedError> {
        (0..self.tables.len())
            .map(|i| {
                let agg = self.aggregate(i, speaker_id)?;
                agg.score(self.tables[i].require(test_utt_id)?)
            })
            .collect()
    }
}

/// Cosine SV scores for every trial of `protocol` under each table.
/// Trials are scored in parallel on the current rayon pool.
pub fn compute_sv_scores(
    protocol: &ProtocolSet,
    tables: &[EmbeddingTable],
    strategy: EnrollmentStrategy,
) -> Result<SvScoreMatrix, EmbedError> {
    let scorer = SvScorer::new(&protocol.enrollment, tables, strategy);
    protocol
        .trials
        .par_iter()
        .map(|t| scorer.score(&t.speaker_id, &t.test_utt_id))
        .collect()
}

/// Concatenation of one utterance's embeddings across `tables`, in order.
pub fn concat_embeddings(utt_id: &str, tables: &[EmbeddingTable]) -> Result<Vec<f64>, EmbedError> {
    let mut out = Vec::with_capacity(tables.iter().map(EmbeddingTable::dim).sum());
    for t in tables {
        out.extend_from_slice(t.require(utt_id)?);
    }
    Ok(out)
}
