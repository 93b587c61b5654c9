//! Deterministic synthetic SASV corpora.
//!
//! Every speaker gets a random unit direction per ASV model. A bona fide
//! utterance is `strength * direction + noise`; a spoofed utterance aimed at
//! that speaker has the same ASV-side distribution. CM embeddings carry no
//! speaker information: their first half ("marker" coordinates) holds a fixed
//! per-model bona fide direction for genuine speech and zeros for spoofs,
//! while the second half holds a spoof artifact direction for spoofs only.
//! Noise is isotropic with per-coordinate standard deviation
//! `noise_std / sqrt(dim)`, so `noise_std` is the expected noise norm.
//!
//! All random draws are keyed by a hash of `(seed, entity id)`, so the
//! output does not depend on generation order or thread count. Values are
//! rounded to `f32` at generation so an in-memory corpus equals one that has
//! been written and read back.

use std::fs;
use std::path::{Path, PathBuf};

use indexmap::IndexMap;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::embedstore::{dot, EmbeddingTable};
use crate::error::{Error, Result};
use crate::protocol::{
    serialize_enrollment, serialize_trials, validate_protocol, EnrollmentMap, ProtocolSet, Trial, TrialLabel,
};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelSignal {
    pub dim: usize,
    /// Speaker signal for ASV models, artifact signal for CM models.
    pub strength: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticCorpusSpec {
    /// Speakers per partition; train and dev speakers are disjoint.
    pub num_speakers: usize,
    /// Bona fide utterances per speaker, enrollment included.
    pub utts_per_speaker: usize,
    pub spoofs_per_speaker: usize,
    pub enroll_per_speaker: usize,
    pub asv_models: Vec<ModelSignal>,
    pub cm_models: Vec<ModelSignal>,
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for SyntheticCorpusSpec {
    fn default() -> Self {
        let m = ModelSignal { dim: 16, strength: 3.0 };
        Self {
            num_speakers: 5,
            utts_per_speaker: 20,
            spoofs_per_speaker: 10,
            enroll_per_speaker: 2,
            asv_models: vec![m; 2],
            cm_models: vec![m; 2],
            noise_std: 1.0,
            seed: 0,
        }
    }
}

impl SyntheticCorpusSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::SpecInvalid(msg.to_string()));
        if self.num_speakers < 2 {
            return bad("num_speakers must be at least 2 (nontarget trials need a second speaker)");
        }
        if self.enroll_per_speaker == 0 {
            return bad("enroll_per_speaker must be positive");
        }
        if self.utts_per_speaker <= self.enroll_per_speaker {
            return bad("utts_per_speaker must exceed enroll_per_speaker");
        }
        if self.spoofs_per_speaker == 0 {
            return bad("spoofs_per_speaker must be positive");
        }
        if self.asv_models.is_empty() || self.cm_models.is_empty() {
            return bad("at least one ASV and one CM model are required");
        }
        if !(self.noise_std.is_finite() && self.noise_std >= 0.0) {
            return bad("noise_std must be finite and non-negative");
        }
        for m in self.asv_models.iter().chain(&self.cm_models) {
            if m.dim < 2 {
                return Err(Error::SpecInvalid(format!("dim must be at least 2, got {}", m.dim)));
            }
            if !(m.strength.is_finite() && m.strength >= 0.0) {
                return bad("signal strengths must be finite and non-negative");
            }
            if m.strength == 0.0 && self.noise_std == 0.0 {
                return bad("zero signal with zero noise produces all-zero embeddings");
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticCorpus {
    pub spec: SyntheticCorpusSpec,
    pub train: ProtocolSet,
    pub dev: ProtocolSet,
    pub asv_tables: Vec<EmbeddingTable>,
    pub cm_tables: Vec<EmbeddingTable>,
    /// Linear probe per CM model: the bona fide marker direction, zero on
    /// the artifact coordinates.
    pub cm_probes: Vec<Vec<f64>>,
}

impl SyntheticCorpus {
    /// Scalar CM score of every utterance under CM model `model`.
    pub fn cm_scores(&self, model: usize) -> IndexMap<String, f64> {
        let probe = &self.cm_probes[model];
        self.cm_tables[model].iter().map(|(u, v)| (u.to_string(), dot(v, probe))).collect()
    }

    /// Writes protocols, embedding tables and CM model 0 scores into `dir`,
    /// returning the paths written.
    pub fn write_to_dir(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        fs::create_dir_all(dir)?;
        let mut written = Vec::new();
        let mut put = |name: &str, bytes: Vec<u8>| -> Result<()> {
            let p = dir.join(name);
            fs::write(&p, bytes)?;
            written.push(p);
            Ok(())
        };
        for set in [&self.train, &self.dev] {
            put(&format!("{}_trials.txt", set.partition_name), serialize_trials(&set.trials).into_bytes())?;
            put(&format!("{}_enroll.txt", set.partition_name), serialize_enrollment(&set.enrollment).into_bytes())?;
        }
        for t in self.asv_tables.iter().chain(&self.cm_tables) {
            put(&format!("{}.sveb", t.model_id()), t.to_bytes())?;
        }
        put("cm_scores.txt", format_utterance_scores(&self.cm_scores(0)).into_bytes())?;
        Ok(written)
    }
}

/// `<utt_id> <score>` lines.
pub fn format_utterance_scores(scores: &IndexMap<String, f64>) -> String {
    scores.iter().map(|(u, s)| format!("{u} {s}\n")).collect()
}

/// Seed for one named entity, stable across platforms and releases.
pub fn derive_seed(seed: u64, parts: &[&str]) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p.as_bytes());
    }
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}

fn entity_rng(seed: u64, parts: &[&str]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, parts))
}

fn gaussian(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

fn unit(mut v: Vec<f64>) -> Vec<f64> {
    let n = dot(&v, &v).sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
    v
}

/// Unit vector occupying `dim` coordinates starting at `offset` of a
/// `total`-wide vector.
fn embedded_unit(rng: &mut ChaCha8Rng, total: usize, offset: usize, dim: usize) -> Vec<f64> {
    let mut v = vec![0.0; total];
    let mut g = gaussian(rng, dim);
    if g.iter().all(|&x| x == 0.0) {
        g[0] = 1.0;
    }
    v[offset..offset + dim].copy_from_slice(&unit(g));
    v
}

#[derive(Debug, Clone)]
struct Utterance {
    id: String,
    speaker: String,
    spoof: bool,
}

struct Partition {
    set: ProtocolSet,
    utts: Vec<Utterance>,
}

fn build_partition(spec: &SyntheticCorpusSpec, name: &str, prefix: &str) -> Result<Partition> {
    let speakers: Vec<String> = (0..spec.num_speakers).map(|k| format!("{prefix}_s{k:03}")).collect();
    let mut utts = Vec::new();
    let mut enrollment = EnrollmentMap::new();
    let mut test_bona: Vec<Vec<String>> = Vec::new();
    let mut spoofs: Vec<Vec<String>> = Vec::new();
    for spk in &speakers {
        let mut tests = Vec::new();
        for j in 0..spec.utts_per_speaker {
            let id = format!("{spk}_b{j:03}");
            if j < spec.enroll_per_speaker {
                enrollment.insert(spk, &id)?;
            } else {
                tests.push(id.clone());
            }
            utts.push(Utterance { id, speaker: spk.clone(), spoof: false });
        }
        let mut sp = Vec::new();
        for j in 0..spec.spoofs_per_speaker {
            let id = format!("{spk}_x{j:03}");
            sp.push(id.clone());
            utts.push(Utterance { id, speaker: spk.clone(), spoof: true });
        }
        test_bona.push(tests);
        spoofs.push(sp);
    }

    let mut trials = Vec::new();
    for (k, spk) in speakers.iter().enumerate() {
        for u in &test_bona[k] {
            trials.push(Trial::new(spk.as_str(), u.as_str(), TrialLabel::Target)?);
        }
        for (other, tests) in test_bona.iter().enumerate() {
            if other != k {
                for u in tests {
                    trials.push(Trial::new(spk.as_str(), u.as_str(), TrialLabel::NonTarget)?);
                }
            }
        }
        for u in &spoofs[k] {
            trials.push(Trial::new(spk.as_str(), u.as_str(), TrialLabel::Spoof)?);
        }
    }
    Ok(Partition { set: validate_protocol(name, trials, enrollment)?, utts })
}

fn quantize(v: Vec<f64>) -> Vec<f64> {
    v.into_iter().map(|x| x as f32 as f64).collect()
}

fn noisy(base: &[f64], noise_std: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let sd = noise_std / (base.len() as f64).sqrt();
    let g = gaussian(rng, base.len());
    quantize(base.iter().zip(g).map(|(b, n)| b + sd * n).collect())
}

fn asv_table(spec: &SyntheticCorpusSpec, index: usize, utts: &[Utterance]) -> Result<EmbeddingTable> {
    let signal = spec.asv_models[index];
    let tag = format!("asv{index}");
    let rows: Vec<(String, Vec<f64>)> = utts
        .par_iter()
        .map(|u| {
            let mut spk_rng = entity_rng(spec.seed, &[&tag, "speaker", &u.speaker]);
            let dir = embedded_unit(&mut spk_rng, signal.dim, 0, signal.dim);
            let base: Vec<f64> = dir.iter().map(|d| signal.strength * d).collect();
            let mut rng = entity_rng(spec.seed, &[&tag, "utt", &u.id]);
            (u.id.clone(), noisy(&base, spec.noise_std, &mut rng))
        })
        .collect();
    fill_table(&tag, signal.dim, rows)
}

fn cm_probe(spec: &SyntheticCorpusSpec, index: usize) -> (Vec<f64>, Vec<f64>) {
    let dim = spec.cm_models[index].dim;
    let tag = format!("cm{index}");
    let marker_dim = dim / 2;
    let marker = embedded_unit(&mut entity_rng(spec.seed, &[&tag, "marker"]), dim, 0, marker_dim);
    let artifact = embedded_unit(&mut entity_rng(spec.seed, &[&tag, "artifact"]), dim, marker_dim, dim - marker_dim);
    (marker, artifact)
}

fn cm_table(spec: &SyntheticCorpusSpec, index: usize, utts: &[Utterance]) -> Result<EmbeddingTable> {
    let signal = spec.cm_models[index];
    let tag = format!("cm{index}");
    let (marker, artifact) = cm_probe(spec, index);
    let rows: Vec<(String, Vec<f64>)> = utts
        .par_iter()
        .map(|u| {
            let dir = if u.spoof { &artifact } else { &marker };
            let base: Vec<f64> = dir.iter().map(|d| signal.strength * d).collect();
            let mut rng = entity_rng(spec.seed, &[&tag, "utt", &u.id]);
            (u.id.clone(), noisy(&base, spec.noise_std, &mut rng))
        })
        .collect();
    fill_table(&tag, signal.dim, rows)
}

fn fill_table(model_id: &str, dim: usize, rows: Vec<(String, Vec<f64>)>) -> Result<EmbeddingTable> {
    let mut t = EmbeddingTable::new(model_id, dim)?;
    for (id, v) in rows {
        t.insert(&id, v)?;
    }
    Ok(t)
}

pub fn generate(spec: &SyntheticCorpusSpec) -> Result<SyntheticCorpus> {
    spec.validate()?;
    let train = build_partition(spec, "train", "tr")?;
    let dev = build_partition(spec, "dev", "dv")?;
    let all: Vec<Utterance> = train.utts.iter().chain(&dev.utts).cloned().collect();
    let asv_tables = (0..spec.asv_models.len()).map(|i| asv_table(spec, i, &all)).collect::<Result<Vec<_>>>()?;
    let cm_tables = (0..spec.cm_models.len()).map(|i| cm_table(spec, i, &all)).collect::<Result<Vec<_>>>()?;
    let cm_probes = (0..spec.cm_models.len()).map(|i| cm_probe(spec, i).0).collect();
    Ok(SyntheticCorpus { spec: spec.clone(), train: train.set, dev: dev.set, asv_tables, cm_tables, cm_probes })
}
