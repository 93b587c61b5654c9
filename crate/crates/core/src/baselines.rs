//! Reference systems: score-sum fusion (Baseline1) and a single-head network
//! over concatenated enrollment, test and CM embeddings (Baseline2).

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::embedstore::{aggregate_enrollment, EmbeddingTable, EnrollmentStrategy};
use crate::error::{Error, Result};
use crate::fusionnet::{
    softmax_cross_entropy, train_model, FusionError, LossBreakdown, Mlp, Model, Parameters, TrainConfig,
    TrainOutcome, DEFAULT_LEAKY_SLOPE,
};
use crate::metrics::{compute_report, Eer, ScoredTrial};
use crate::protocol::{ProtocolSet, TrialLabel};

pub fn baseline1_score(sv_score: f64, cm_score: f64) -> f64 {
    sv_score + cm_score
}

/// Baseline1 over aligned per-trial score lists, with the CM scores
/// multiplied by `cm_scale`.
pub fn baseline1_scores(sv: &[f64], cm: &[f64], labels: &[TrialLabel], cm_scale: f64) -> Result<Vec<ScoredTrial>> {
    if sv.len() != cm.len() || sv.len() != labels.len() {
        return Err(Error::Invalid(format!(
            "score lists are not aligned: {} SV, {} CM, {} labels",
            sv.len(),
            cm.len(),
            labels.len()
        )));
    }
    Ok(sv
        .iter()
        .zip(cm)
        .zip(labels)
        .map(|((&s, &c), &label)| ScoredTrial { label, score: baseline1_score(s, cm_scale * c) })
        .collect())
}

/// SASV-EER of Baseline1 with the CM scores as given and with them
/// multiplied by `scale`.
pub fn scale_domination_demo(sv: &[f64], cm: &[f64], labels: &[TrialLabel], scale: f64) -> Result<(Eer, Eer)> {
    let before = compute_report(&baseline1_scores(sv, cm, labels, 1.0)?)?;
    let after = compute_report(&baseline1_scores(sv, cm, labels, scale)?)?;
    Ok((before.sasv, after.sasv))
}

/// `enroll ⊕ test ⊕ cm` for one trial.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Baseline2Input {
    pub features: Vec<f64>,
    pub label: TrialLabel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Baseline2Params {
    pub asv_dim: usize,
    pub cm_dim: usize,
    pub net: Mlp,
}

impl Baseline2Params {
    pub fn init(asv_dim: usize, cm_dim: usize, hidden: &[usize], seed: u64) -> Result<Self> {
        if asv_dim == 0 || hidden.contains(&0) {
            return Err(Error::Invalid("baseline2 widths must be positive".into()));
        }
        let mut widths = vec![2 * asv_dim + cm_dim];
        widths.extend(hidden);
        widths.push(2);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(Self { asv_dim, cm_dim, net: Mlp::uniform(&widths, DEFAULT_LEAKY_SLOPE, &mut rng) })
    }

    pub fn input_dim(&self) -> usize {
        2 * self.asv_dim + self.cm_dim
    }

    pub fn logits(&self, features: &[f64]) -> Result<[f64; 2], FusionError> {
        let (out, _) = self.net.forward(features)?;
        Ok([out[0], out[1]])
    }

    pub fn hidden(&self) -> Vec<usize> {
        self.net.layers[..self.net.layers.len() - 1].iter().map(|l| l.out_dim).collect()
    }
}

impl Parameters for Baseline2Params {
    fn tensors(&self) -> Vec<&[f64]> {
        self.net.tensors()
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        self.net.tensors_mut()
    }
}

impl Model for Baseline2Params {
    type Input = Baseline2Input;

    fn item_loss(&self, input: &Baseline2Input, class_weights: [f64; 2], grad: &mut Self) -> Result<LossBreakdown, FusionError> {
        let (out, cache) = self.net.forward(&input.features)?;
        let label = input.label.is_positive() as usize;
        let w = class_weights[label];
        let (loss, d) = softmax_cross_entropy([out[0], out[1]], label);
        self.net.backward(&cache, &[w * d[0], w * d[1]], &mut grad.net);
        Ok(LossBreakdown { cm: 0.0, pr: w * loss, total: w * loss })
    }

    fn score(&self, input: &Baseline2Input) -> Result<f64, FusionError> {
        let y = self.logits(&input.features)?;
        Ok(y[1] - y[0])
    }

    fn label(input: &Baseline2Input) -> TrialLabel {
        input.label
    }
}

/// Builds Baseline2 inputs from one ASV table and an optional CM table
/// (absent means a CM width of zero).
pub fn baseline2_inputs(
    protocol: &ProtocolSet,
    asv: &EmbeddingTable,
    cm: Option<&EmbeddingTable>,
    strategy: EnrollmentStrategy,
) -> Result<Vec<Baseline2Input>> {
    if strategy == EnrollmentStrategy::ScoreMean {
        return Err(Error::Invalid("baseline2 needs an aggregated enrollment vector; ScoreMean has none".into()));
    }
    let mut cache = std::collections::HashMap::new();
    protocol
        .trials
        .iter()
        .map(|t| {
            if !cache.contains_key(&t.speaker_id) {
                let agg = aggregate_enrollment(&t.speaker_id, &protocol.enrollment, asv, strategy)?;
                cache.insert(t.speaker_id.clone(), agg.vector);
            }
            let mut features = cache[&t.speaker_id].clone();
            features.extend_from_slice(asv.require(&t.test_utt_id)?);
            if let Some(cm) = cm {
                features.extend_from_slice(cm.require(&t.test_utt_id)?);
            }
            Ok(Baseline2Input { features, label: t.label })
        })
        .collect()
}

pub struct Baseline2Run {
    pub outcome: TrainOutcome<Baseline2Params>,
    /// Dev scores of the selected model, in protocol order.
    pub dev_scores: Vec<ScoredTrial>,
}

/// Trains Baseline2 on `train` with dev-set selection, mirroring the fusion
/// network's hidden widths and training schedule.
#[allow(clippy::too_many_arguments)]
pub fn baseline2_model(
    asv: &EmbeddingTable,
    cm: Option<&EmbeddingTable>,
    train: &ProtocolSet,
    dev: &ProtocolSet,
    strategy: EnrollmentStrategy,
    hidden: &[usize],
    config: &TrainConfig,
) -> Result<Baseline2Run> {
    let train_inputs = baseline2_inputs(train, asv, cm, strategy)?;
    let dev_inputs = baseline2_inputs(dev, asv, cm, strategy)?;
    let init = Baseline2Params::init(asv.dim(), cm.map_or(0, EmbeddingTable::dim), hidden, config.seed)?;
    let outcome = train_model(init, &train_inputs, &dev_inputs, config)?;
    let dev_scores = crate::fusionnet::train::score_items(&outcome.best, &dev_inputs)?;
    Ok(Baseline2Run { outcome, dev_scores })
}
