//! The multi-model fusion network.
//!
//! A countermeasure head `f` maps the concatenated CM embeddings of the test
//! utterance to a two-logit score `s_cm`. A linear prediction head `g` maps
//! `s_cm ⊕ [sv_1 .. sv_m]` to the final two-logit prediction `y_hat`. Both
//! heads carry a softmax cross-entropy loss against the same binary label
//! (1 for a bona fide target trial) and the training objective is their sum.

pub mod adam;
pub mod dense;
pub mod loss;
pub mod train;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::metrics::MetricsError;
use crate::protocol::TrialLabel;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use dense::{Activation, DenseLayer, Mlp};
pub use loss::softmax_cross_entropy;
pub use train::{train, train_model, EpochRecord, TrainConfig, TrainHistory, TrainOutcome};

pub const DEFAULT_HIDDEN: [usize; 3] = [256, 128, 64];
pub const DEFAULT_LEAKY_SLOPE: f64 = 0.01;

#[derive(Debug, Error)]
pub enum FusionError {
    #[error("shape mismatch: expected {expected}, found {found}")]
    ShapeMismatch { expected: usize, found: usize },
    #[error("empty batch")]
    EmptyBatch,
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

/// A set of parameter tensors that can be updated by an optimizer and
/// reduced across batch items.
pub trait Parameters: Clone + Send + Sync {
    fn tensors(&self) -> Vec<&[f64]>;
    fn tensors_mut(&mut self) -> Vec<&mut [f64]>;

    fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for t in z.tensors_mut() {
            t.fill(0.0);
        }
        z
    }

    fn add_assign(&mut self, other: &Self) {
        for (a, b) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    fn div_assign(&mut self, n: f64) {
        for t in self.tensors_mut() {
            for x in t.iter_mut() {
                *x /= n;
            }
        }
    }

    fn num_values(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    fn flatten(&self) -> Vec<f64> {
        self.tensors().concat()
    }
}

impl Parameters for DenseLayer {
    fn tensors(&self) -> Vec<&[f64]> {
        vec![&self.weights, &self.bias]
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        vec![&mut self.weights, &mut self.bias]
    }
}

impl Parameters for Mlp {
    fn tensors(&self) -> Vec<&[f64]> {
        self.layers.iter().flat_map(|l| l.tensors()).collect()
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        self.layers.iter_mut().flat_map(|l| l.tensors_mut()).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusionDims {
    /// Total width of the concatenated CM embeddings.
    pub cm_input_dim: usize,
    /// Number of ASV models, i.e. SV scores per trial.
    pub num_sv: usize,
    pub hidden: Vec<usize>,
    pub leaky_slope: f64,
}

impl FusionDims {
    pub fn new(cm_input_dim: usize, num_sv: usize) -> Self {
        Self { cm_input_dim, num_sv, hidden: DEFAULT_HIDDEN.to_vec(), leaky_slope: DEFAULT_LEAKY_SLOPE }
    }

    pub fn with_hidden(mut self, hidden: &[usize]) -> Self {
        self.hidden = hidden.to_vec();
        self
    }

    fn validate(&self) -> Result<(), FusionError> {
        if self.cm_input_dim == 0 {
            return Err(FusionError::InvalidConfig("CM input width must be positive".into()));
        }
        if self.hidden.contains(&0) {
            return Err(FusionError::InvalidConfig("hidden widths must be positive".into()));
        }
        Ok(())
    }

    fn cm_widths(&self) -> Vec<usize> {
        let mut w = vec![self.cm_input_dim];
        w.extend(&self.hidden);
        w.push(2);
        w
    }
}

/// Weights of the CM head `f` and the prediction head `g`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusionParams {
    pub cm_layers: Mlp,
    pub pred_layer: DenseLayer,
}

impl Parameters for FusionParams {
    fn tensors(&self) -> Vec<&[f64]> {
        let mut t = self.cm_layers.tensors();
        t.extend(self.pred_layer.tensors());
        t
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut t = self.cm_layers.tensors_mut();
        t.extend(self.pred_layer.tensors_mut());
        t
    }
}

impl FusionParams {
    pub fn zeros(dims: &FusionDims) -> Result<Self, FusionError> {
        dims.validate()?;
        Ok(Self {
            cm_layers: Mlp::zeros(&dims.cm_widths(), dims.leaky_slope),
            pred_layer: DenseLayer::zeros(2 + dims.num_sv, 2, Activation::Identity),
        })
    }

    pub fn dims(&self) -> FusionDims {
        let layers = &self.cm_layers.layers;
        let leaky_slope = layers
            .iter()
            .find_map(|l| match l.activation {
                Activation::LeakyRelu(s) => Some(s),
                Activation::Identity => None,
            })
            .unwrap_or(DEFAULT_LEAKY_SLOPE);
        FusionDims {
            cm_input_dim: self.cm_layers.in_dim(),
            num_sv: self.pred_layer.in_dim - 2,
            hidden: layers[..layers.len() - 1].iter().map(|l| l.out_dim).collect(),
            leaky_slope,
        }
    }

    pub fn num_sv(&self) -> usize {
        self.pred_layer.in_dim - 2
    }

    pub fn is_consistent(&self) -> bool {
        let layers = &self.cm_layers.layers;
        !layers.is_empty()
            && layers.windows(2).all(|w| w[0].out_dim == w[1].in_dim)
            && self.cm_layers.out_dim() == 2
            && self.pred_layer.in_dim >= 2
            && self.pred_layer.out_dim == 2
            && layers.iter().chain([&self.pred_layer]).all(|l| {
                l.weights.len() == l.in_dim * l.out_dim && l.bias.len() == l.out_dim && l.is_finite()
            })
    }
}

/// Weights uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`, biases zero, drawn
/// layer by layer (CM head first) from ChaCha8 seeded with `seed`.
pub fn init_params(dims: &FusionDims, seed: u64) -> Result<FusionParams, FusionError> {
    dims.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cm_layers = Mlp::uniform(&dims.cm_widths(), dims.leaky_slope, &mut rng);
    let pred_layer = DenseLayer::uniform(2 + dims.num_sv, 2, Activation::Identity, &mut rng);
    Ok(FusionParams { cm_layers, pred_layer })
}

/// One trial as seen by the fusion model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusionInput {
    pub cm_concat: Vec<f64>,
    pub sv_scores: Vec<f64>,
    pub label: TrialLabel,
}

pub struct FusionForward {
    pub s_cm: [f64; 2],
    pub y_hat: [f64; 2],
    cm_cache: dense::MlpCache,
    pred_input: Vec<f64>,
    pred_pre: Vec<f64>,
}

pub fn forward(params: &FusionParams, cm_concat: &[f64], sv_scores: &[f64]) -> Result<FusionForward, FusionError> {
    if sv_scores.len() != params.num_sv() {
        return Err(FusionError::ShapeMismatch { expected: params.num_sv(), found: sv_scores.len() });
    }
    let (s_cm, cm_cache) = params.cm_layers.forward(cm_concat)?;
    let mut pred_input = s_cm.clone();
    pred_input.extend_from_slice(sv_scores);
    let (pred_pre, y_hat) = params.pred_layer.forward(&pred_input)?;
    Ok(FusionForward {
        s_cm: [s_cm[0], s_cm[1]],
        y_hat: [y_hat[0], y_hat[1]],
        cm_cache,
        pred_input,
        pred_pre,
    })
}

/// Logit margin `y_hat[1] - y_hat[0]`; higher means more target-like.
pub fn predict_score(params: &FusionParams, cm_concat: &[f64], sv_scores: &[f64]) -> Result<f64, FusionError> {
    let out = forward(params, cm_concat, sv_scores)?;
    Ok(out.y_hat[1] - out.y_hat[0])
}

/// Mean per-item loss components.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub cm: f64,
    pub pr: f64,
    pub total: f64,
}

impl LossBreakdown {
    fn add(self, o: Self) -> Self {
        Self { cm: self.cm + o.cm, pr: self.pr + o.pr, total: self.total + o.total }
    }

    fn div(self, n: f64) -> Self {
        Self { cm: self.cm / n, pr: self.pr / n, total: self.total / n }
    }
}

/// A trainable scorer over some per-trial input type.
pub trait Model: Parameters {
    type Input: Sync;

    /// Loss of one item, with its parameter gradient accumulated into `grad`.
    fn item_loss(&self, input: &Self::Input, class_weights: [f64; 2], grad: &mut Self) -> Result<LossBreakdown, FusionError>;

    fn score(&self, input: &Self::Input) -> Result<f64, FusionError>;

    fn label(input: &Self::Input) -> TrialLabel;
}

impl Model for FusionParams {
    type Input = FusionInput;

    fn item_loss(&self, input: &FusionInput, class_weights: [f64; 2], grad: &mut Self) -> Result<LossBreakdown, FusionError> {
        let fwd = forward(self, &input.cm_concat, &input.sv_scores)?;
        let label = input.label.is_positive() as usize;
        let w = class_weights[label];
        let (l_cm, d_cm) = softmax_cross_entropy(fwd.s_cm, label);
        let (l_pr, d_pr) = softmax_cross_entropy(fwd.y_hat, label);

        let d_pred = [w * d_pr[0], w * d_pr[1]];
        let d_pred_in = self.pred_layer.backward(&fwd.pred_input, &fwd.pred_pre, &d_pred, &mut grad.pred_layer);
        // s_cm feeds both its own loss and the prediction head
        let d_scm = [w * d_cm[0] + d_pred_in[0], w * d_cm[1] + d_pred_in[1]];
        self.cm_layers.backward(&fwd.cm_cache, &d_scm, &mut grad.cm_layers);

        Ok(LossBreakdown { cm: w * l_cm, pr: w * l_pr, total: w * (l_cm + l_pr) })
    }

    fn score(&self, input: &FusionInput) -> Result<f64, FusionError> {
        predict_score(self, &input.cm_concat, &input.sv_scores)
    }

    fn label(input: &FusionInput) -> TrialLabel {
        input.label
    }
}

const PARALLEL_CUTOFF: usize = 8;

fn reduce_range<M: Model>(
    model: &M,
    items: &[&M::Input],
    class_weights: [f64; 2],
) -> Result<(LossBreakdown, M), FusionError> {
    if items.len() == 1 {
        let mut grad = model.zeros_like();
        let loss = model.item_loss(items[0], class_weights, &mut grad)?;
        return Ok((loss, grad));
    }
    let (left, right) = items.split_at(items.len() / 2);
    let (l, r) = if items.len() >= PARALLEL_CUTOFF {
        rayon::join(
            || reduce_range(model, left, class_weights),
            || reduce_range(model, right, class_weights),
        )
    } else {
        (reduce_range(model, left, class_weights), reduce_range(model, right, class_weights))
    };
    let (ll, mut lg) = l?;
    let (rl, rg) = r?;
    lg.add_assign(&rg);
    Ok((ll.add(rl), lg))
}

/// Mean loss and mean gradient over `items`.
///
/// Per-item terms are combined by a fixed midpoint-split pairwise tree, so
/// the result does not depend on how many threads evaluate it, and a batch
/// concatenated with itself reduces to exactly the same mean.
pub fn batch_loss<M: Model>(
    model: &M,
    items: &[&M::Input],
    class_weights: [f64; 2],
) -> Result<(LossBreakdown, M), FusionError> {
    if items.is_empty() {
        return Err(FusionError::EmptyBatch);
    }
    let (sum, mut grad) = reduce_range(model, items, class_weights)?;
    let n = items.len() as f64;
    grad.div_assign(n);
    Ok((sum.div(n), grad))
}

/// Mean of `L_cm + L_pr` over the batch with its exact gradient.
pub fn total_loss(params: &FusionParams, batch: &[FusionInput]) -> Result<(LossBreakdown, FusionParams), FusionError> {
    let items: Vec<&FusionInput> = batch.iter().collect();
    batch_loss(params, &items, [1.0, 1.0])
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use std::f64::consts::LN_2;

    fn input(cm: Vec<f64>, sv: Vec<f64>, label: TrialLabel) -> FusionInput {
        FusionInput { cm_concat: cm, sv_scores: sv, label }
    }

    #[test]
    fn zero_network_forward() {
        let p = FusionParams::zeros(&FusionDims::new(4, 3)).unwrap();
        let out = forward(&p, &[1.0, -2.0, 3.0, 0.5], &[0.2, 0.9, -0.3]).unwrap();
        assert_eq!(out.s_cm, [0.0, 0.0]);
        assert_eq!(out.y_hat, [0.0, 0.0]);
        assert_eq!(predict_score(&p, &[1.0, -2.0, 3.0, 0.5], &[0.2, 0.9, -0.3]).unwrap(), 0.0);
    }

    #[test]
    fn shapes() {
        let p = init_params(&FusionDims::new(4, 3), 1).unwrap();
        assert_eq!(p.pred_layer.in_dim, 5);
        let out = forward(&p, &[0.1; 4], &[0.0; 3]).unwrap();
        assert_eq!(out.y_hat.len(), 2);
        assert!(p.is_consistent());
        assert_eq!(p.dims(), FusionDims::new(4, 3));
        assert!(matches!(forward(&p, &[0.1; 3], &[0.0; 3]), Err(FusionError::ShapeMismatch { .. })));
        assert!(matches!(forward(&p, &[0.1; 4], &[0.0; 2]), Err(FusionError::ShapeMismatch { .. })));
    }

    #[test]
    fn hand_set_toy_net() {
        // dims 2 -> 2 -> 2 -> 2 -> 2, leaky slope 0.5, m = 1
        let dims = FusionDims { cm_input_dim: 2, num_sv: 1, hidden: vec![2, 2, 2], leaky_slope: 0.5 };
        let mut p = FusionParams::zeros(&dims).unwrap();
        p.cm_layers.layers[0].weights = vec![1.0, 0.0, 0.0, -1.0];
        p.cm_layers.layers[0].bias = vec![0.5, 0.0];
        p.cm_layers.layers[1].weights = vec![1.0, 1.0, 1.0, -1.0];
        p.cm_layers.layers[2].weights = vec![2.0, 0.0, 0.0, 2.0];
        p.cm_layers.layers[2].bias = vec![0.0, -1.0];
        p.cm_layers.layers[3].weights = vec![1.0, -1.0, 0.5, 0.5];
        p.pred_layer.weights = vec![1.0, 0.0, 2.0, 0.0, 1.0, -1.0];
        p.pred_layer.bias = vec![0.25, 0.0];

        // x = (1, 2)
        // L0: pre (1.5, -2) -> (1.5, -1)
        // L1: pre (0.5, 2.5) -> (0.5, 2.5)
        // L2: pre (1, 4) -> (1, 4)
        // L3: (1 - 4, 0.5 + 2) = (-3, 2.5)
        // g: [(-3, 2.5, 0.8)] -> (-3 + 1.6 + 0.25, 2.5 - 0.8) = (-1.15, 1.7)
        let out = forward(&p, &[1.0, 2.0], &[0.8]).unwrap();
        assert!((out.s_cm[0] + 3.0).abs() < 1e-12 && (out.s_cm[1] - 2.5).abs() < 1e-12);
        assert!((out.y_hat[0] + 1.15).abs() < 1e-12 && (out.y_hat[1] - 1.7).abs() < 1e-12);
    }

    #[test]
    fn zero_network_loss_is_two_ln2() {
        let p = FusionParams::zeros(&FusionDims::new(3, 2)).unwrap();
        for label in TrialLabel::ALL {
            let (l, _) = total_loss(&p, &[input(vec![1.0, 2.0, 3.0], vec![0.5, -0.5], label)]).unwrap();
            assert!((l.total - 2.0 * LN_2).abs() < 1e-12);
            assert!((l.cm - LN_2).abs() < 1e-12 && (l.pr - LN_2).abs() < 1e-12);
        }
    }

    #[test]
    fn empty_batch() {
        let p = FusionParams::zeros(&FusionDims::new(3, 2)).unwrap();
        assert!(matches!(total_loss(&p, &[]), Err(FusionError::EmptyBatch)));
    }

    fn random_batch(rng: &mut ChaCha8Rng, n: usize, cm: usize, m: usize) -> Vec<FusionInput> {
        (0..n)
            .map(|i| input(
                (0..cm).map(|_| rng.gen_range(-2.0..2.0)).collect(),
                (0..m).map(|_| rng.gen_range(-1.0..1.0)).collect(),
                TrialLabel::ALL[i % 3],
            ))
            .collect()
    }

    #[test]
    fn duplicated_batch_has_identical_loss_and_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let dims = FusionDims::new(5, 2).with_hidden(&[6, 5, 4]);
        let p = init_params(&dims, 9).unwrap();
        for n in [1, 3, 7, 32] {
            let batch = random_batch(&mut rng, n, 5, 2);
            let doubled: Vec<FusionInput> = batch.iter().chain(&batch).cloned().collect();
            let (l1, g1) = total_loss(&p, &batch).unwrap();
            let (l2, g2) = total_loss(&p, &doubled).unwrap();
            assert_eq!(l1.total.to_bits(), l2.total.to_bits());
            assert_eq!(g1.flatten().iter().map(|x| x.to_bits()).collect::<Vec<_>>(),
                       g2.flatten().iter().map(|x| x.to_bits()).collect::<Vec<_>>());
        }
    }

    #[test]
    fn loss_is_sum_of_head_losses() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let dims = FusionDims::new(4, 3).with_hidden(&[5, 4, 3]);
        let p = init_params(&dims, 2).unwrap();
        let batch = random_batch(&mut rng, 10, 4, 3);
        let (l, _) = total_loss(&p, &batch).unwrap();
        let mut sum = 0.0;
        for item in &batch {
            let out = forward(&p, &item.cm_concat, &item.sv_scores).unwrap();
            let y = item.label.is_positive() as usize;
            sum += softmax_cross_entropy(out.s_cm, y).0 + softmax_cross_entropy(out.y_hat, y).0;
        }
        assert!((l.total - sum / 10.0).abs() < 1e-12);
        assert!(l.cm >= 0.0 && l.pr >= 0.0);
    }

    #[test]
    fn init_bounds_and_determinism() {
        let dims = FusionDims::new(100, 2);
        let a = init_params(&dims, 5).unwrap();
        let b = init_params(&dims, 5).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, init_params(&dims, 6).unwrap());
        assert!(a.cm_layers.layers[0].weights.iter().all(|w| w.abs() <= 0.1));
        assert!(a.cm_layers.layers[0].bias.iter().all(|&b| b == 0.0));
    }

    #[test]
    fn init_weight_mean_within_three_sigma() {
        // U(-a, a) has variance a^2 / 3; the sample mean of n draws has sd a / sqrt(3n)
        let dims = FusionDims::new(400, 1).with_hidden(&[250]);
        let p = init_params(&dims, 17).unwrap();
        let w = &p.cm_layers.layers[0].weights;
        assert_eq!(w.len(), 100_000);
        let a = 1.0 / 20.0;
        let mean = w.iter().sum::<f64>() / w.len() as f64;
        let sd = a / (3.0 * w.len() as f64).sqrt();
        assert!(mean.abs() < 3.0 * sd, "mean {mean} sd {sd}");
        let var = w.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / w.len() as f64;
        assert!((var - a * a / 3.0).abs() < 0.02 * a * a);
    }

    #[test]
    fn logit_margin() {
        let dims = FusionDims { cm_input_dim: 1, num_sv: 0, hidden: vec![1], leaky_slope: 0.01 };
        let mut p = FusionParams::zeros(&dims).unwrap();
        p.pred_layer.bias = vec![3.0, 5.0];
        assert_eq!(predict_score(&p, &[1.0], &[]).unwrap(), 2.0);
    }

    #[test]
    fn margin_ranks_like_probability() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let dims = FusionDims::new(3, 2).with_hidden(&[4, 3]);
        let p = init_params(&dims, 3).unwrap();
        let batch = random_batch(&mut rng, 100, 3, 2);
        let scored: Vec<(f64, f64)> = batch
            .iter()
            .map(|b| {
                let out = forward(&p, &b.cm_concat, &b.sv_scores).unwrap();
                (out.y_hat[1] - out.y_hat[0], loss::positive_probability(out.y_hat))
            })
            .collect();
        for i in 0..scored.len() {
            for j in 0..scored.len() {
                let (mi, pi) = scored[i];
                let (mj, pj) = scored[j];
                if mi < mj {
                    assert!(pi <= pj);
                }
                if pi < pj {
                    assert!(mi < mj);
                }
            }
        }
    }

    #[test]
    fn adam_descends_on_fixed_batch() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let dims = FusionDims::new(6, 2).with_hidden(&[16, 8, 4]);
        let mut p = init_params(&dims, 1).unwrap();
        let batch = random_batch(&mut rng, 32, 6, 2);
        let (l0, _) = total_loss(&p, &batch).unwrap();
        let mut state = AdamState::new(&p);
        let cfg = AdamConfig::default();
        for t in 1..=200 {
            let (_, g) = total_loss(&p, &batch).unwrap();
            adam_step(&mut p, &g, &mut state, &cfg, t).unwrap();
        }
        let (l1, _) = total_loss(&p, &batch).unwrap();
        assert!(l1.total < l0.total, "{} !< {}", l1.total, l0.total);
    }
}
