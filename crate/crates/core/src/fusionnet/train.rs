use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{adam_step, batch_loss, init_params, AdamConfig, AdamState, FusionDims, FusionError, FusionInput, FusionParams, LossBreakdown, Model};
use crate::metrics::{compute_report, MetricReport, ScoredTrial};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum SelectionMetric {
    #[default]
    SasvEer,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
    pub selection_metric: SelectionMetric,
    /// Loss weight for label 0 (not a bona fide target) and label 1.
    pub class_weights: [f64; 2],
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            batch_size: 32,
            epochs: 200,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
            selection_metric: SelectionMetric::SasvEer,
            class_weights: [1.0, 1.0],
        }
    }
}

impl TrainConfig {
    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            eps: self.adam_eps,
        }
    }

    pub fn validate(&self) -> Result<(), FusionError> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(FusionError::InvalidConfig("learning rate must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(FusionError::InvalidConfig("batch size must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return Err(FusionError::InvalidConfig("adam betas must lie in [0, 1)".into()));
        }
        if self.class_weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(FusionError::InvalidConfig("class weights must be finite and non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: LossBreakdown,
    pub dev: MetricReport,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
}

impl TrainHistory {
    pub fn len(&self) -> usize {
        self.epochs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.epochs.is_empty()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,loss_cm,loss_pr,loss,dev_sv_eer,dev_spf_eer,dev_sasv_eer\n");
        for r in &self.epochs {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{}",
                r.epoch, r.loss.cm, r.loss.pr, r.loss.total, r.dev.sv.rate, r.dev.spf.rate, r.dev.sasv.rate
            );
        }
        out
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<M> {
    /// Snapshot with the lowest dev SASV-EER (earliest on ties), or the
    /// initial parameters when no epoch ran.
    pub best: M,
    pub best_epoch: Option<usize>,
    pub history: TrainHistory,
    /// Parameters and optimizer state after the last epoch.
    pub last: M,
    pub adam: AdamState,
}

/// Scores every item in parallel and computes the three EERs.
pub fn evaluate_model<M: Model>(model: &M, items: &[M::Input]) -> Result<MetricReport, FusionError> {
    let scored = score_items(model, items)?;
    Ok(compute_report(&scored)?)
}

pub fn score_items<M: Model>(model: &M, items: &[M::Input]) -> Result<Vec<ScoredTrial>, FusionError> {
    items
        .par_iter()
        .map(|it| Ok(ScoredTrial { label: M::label(it), score: model.score(it)? }))
        .collect()
}

/// Epoch order is a ChaCha8 permutation seeded by `seed` on stream
/// `epoch + 1`; stream 0 is left to parameter initialization.
pub fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64 + 1);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
}

/// Mini-batch Adam training with dev-set model selection on SASV-EER.
pub fn train_model<M: Model>(
    initial: M,
    train_set: &[M::Input],
    dev_set: &[M::Input],
    config: &TrainConfig,
) -> Result<TrainOutcome<M>, FusionError> {
    config.validate()?;
    let adam_cfg = config.adam();
    let mut params = initial;
    let mut adam = AdamState::new(&params);
    let mut best = params.clone();
    let mut best_eer = f64::INFINITY;
    let mut best_epoch = None;
    let mut history = TrainHistory::default();
    if config.epochs > 0 && train_set.is_empty() {
        return Err(FusionError::EmptyBatch);
    }

    for epoch in 0..config.epochs {
        let order = epoch_order(train_set.len(), config.seed, epoch);
        let mut sum = LossBreakdown::default();
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<&M::Input> = chunk.iter().map(|&i| &train_set[i]).collect();
            let (loss, grad) = batch_loss(&params, &batch, config.class_weights)?;
            let n = batch.len() as f64;
            sum = LossBreakdown { cm: sum.cm + loss.cm * n, pr: sum.pr + loss.pr * n, total: sum.total + loss.total * n };
            let t = adam.step + 1;
            adam_step(&mut params, &grad, &mut adam, &adam_cfg, t)?;
        }
        let n = train_set.len() as f64;
        let loss = LossBreakdown { cm: sum.cm / n, pr: sum.pr / n, total: sum.total / n };

        let dev = evaluate_model(&params, dev_set)?;
        if dev.sasv.rate < best_eer {
            best_eer = dev.sasv.rate;
            best = params.clone();
            best_epoch = Some(epoch);
        }
        history.epochs.push(EpochRecord { epoch, loss, dev });
    }

    Ok(TrainOutcome { best, best_epoch, history, last: params, adam })
}

/// Initializes a fusion network from `config.seed` and trains it.
pub fn train(
    dims: &FusionDims,
    train_set: &[FusionInput],
    dev_set: &[FusionInput],
    config: &TrainConfig,
) -> Result<TrainOutcome<FusionParams>, FusionError> {
    let initial = init_params(dims, config.seed)?;
    train_model(initial, train_set, dev_set, config)
}
