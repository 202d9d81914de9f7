use crate::nn::layers::sigmoid;

pub const PROB_CLAMP: f64 = 1e-7;

/// Binary cross-entropy on `σ(logit)` against `target ∈ {0, 1}`, scaled by
/// `weight`. Returns `(loss, dloss/dlogit)`.
///
/// The probability is clamped to `[1e-7, 1 - 1e-7]` inside the log only;
/// the gradient is the unclamped `weight·(σ - y)`, which is exact wherever
/// the clamp is inactive.
pub fn bce_with_logit(logit: f64, target: f64, weight: f64) -> (f64, f64) {
    let p = sigmoid(logit);
    let pc = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
    let loss = -(target * pc.ln() + (1.0 - target) * (1.0 - pc).ln());
    (weight * loss, weight * (p - target))
}

/// Mean squared error; returns `(loss, dloss/dpred)`.
pub fn mse(pred: &[f64], target: &[f64]) -> (f64, Vec<f64>) {
    let n = pred.len().max(1) as f64;
    let loss = pred
        .iter()
        .zip(target)
        .map(|(p, t)| (p - t) * (p - t))
        .sum::<f64>()
        / n;
    let grad = pred.iter().zip(target).map(|(p, t)| 2.0 * (p - t) / n).collect();
    (loss, grad)
}
