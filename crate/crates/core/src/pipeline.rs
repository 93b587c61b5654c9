//! Glue from protocols and embedding tables to model inputs and scores.

use crate::embedstore::{compute_sv_scores, concat_embeddings, EmbeddingTable, EnrollmentStrategy};
use crate::error::{Error, Result};
use crate::fusionnet::{FusionDims, FusionInput};
use crate::metrics::ScoredTrial;
use crate::protocol::ProtocolSet;

/// One [`FusionInput`] per trial: the test utterance's CM embeddings
/// concatenated in table order, plus one cosine score per ASV table.
pub fn fusion_inputs(
    protocol: &ProtocolSet,
    asv_tables: &[EmbeddingTable],
    cm_tables: &[EmbeddingTable],
    strategy: EnrollmentStrategy,
) -> Result<Vec<FusionInput>> {
    if cm_tables.is_empty() {
        return Err(Error::Invalid("at least one CM embedding table is required".into()));
    }
    let sv = compute_sv_scores(protocol, asv_tables, strategy)?;
    protocol
        .trials
        .iter()
        .zip(sv)
        .map(|(t, sv_scores)| {
            Ok(FusionInput {
                cm_concat: concat_embeddings(&t.test_utt_id, cm_tables)?,
                sv_scores,
                label: t.label,
            })
        })
        .collect()
}

/// Network dimensions implied by a set of ASV and CM tables.
pub fn fusion_dims(asv_tables: &[EmbeddingTable], cm_tables: &[EmbeddingTable], hidden: &[usize]) -> FusionDims {
    FusionDims::new(cm_tables.iter().map(EmbeddingTable::dim).sum(), asv_tables.len()).with_hidden(hidden)
}

/// ASV-only system: the mean of the per-model cosine scores.
pub fn asv_only_scores(
    protocol: &ProtocolSet,
    asv_tables: &[EmbeddingTable],
    strategy: EnrollmentStrategy,
) -> Result<Vec<ScoredTrial>> {
    if asv_tables.is_empty() {
        return Err(Error::Invalid("at least one ASV embedding table is required".into()));
    }
    let sv = compute_sv_scores(protocol, asv_tables, strategy)?;
    Ok(protocol
        .trials
        .iter()
        .zip(sv)
        .map(|(t, row)| ScoredTrial { label: t.label, score: row.iter().sum::<f64>() / row.len() as f64 })
        .collect())
}

/// Per-trial scores looked up from a per-utterance score function.
pub fn utterance_scores(
    protocol: &ProtocolSet,
    score: impl Fn(&str) -> Option<f64>,
) -> Result<Vec<ScoredTrial>> {
    protocol
        .trials
        .iter()
        .map(|t| {
            score(&t.test_utt_id)
                .map(|s| ScoredTrial { label: t.label, score: s })
                .ok_or_else(|| Error::Invalid(format!("no score for utterance '{}'", t.test_utt_id)))
        })
        .collect()
}
