/// Two-class softmax cross-entropy `-ln softmax(logits)[label]` and its
/// gradient `softmax(logits) - onehot(label)`.
///
/// The loss is evaluated as `(max - logits[label]) + ln(1 + sum_{j != argmax} exp(logits[j] - max))`
/// so that confident predictions keep full relative precision.
pub fn softmax_cross_entropy(logits: [f64; 2], label: usize) -> (f64, [f64; 2]) {
    debug_assert!(label < 2);
    let top = if logits[1] > logits[0] { 1 } else { 0 };
    let max = logits[top];
    let rest = (logits[1 - top] - max).exp();
    let loss = (max - logits[label]) + rest.ln_1p();

    let denom = 1.0 + rest;
    let mut probs = [0.0; 2];
    probs[top] = 1.0 / denom;
    probs[1 - top] = rest / denom;
    let mut grad = probs;
    grad[label] -= 1.0;
    (loss, grad)
}

/// `softmax(logits)[1]`.
pub fn positive_probability(logits: [f64; 2]) -> f64 {
    1.0 / (1.0 + (logits[0] - logits[1]).exp())
}
