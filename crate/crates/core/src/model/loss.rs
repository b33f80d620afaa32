//! Focal loss and its gradient with respect to the logits.

/// Lower clamp applied to the true-class probability.
pub const PROB_FLOOR: f64 = 1e-12;

/// `-(1 - p_y)^gamma * ln(p_y)` with `p_y` clamped to `[1e-12, 1]`.
pub fn focal_loss(probs: &[f64], label: usize, gamma: f64) -> f64 {
    let p = probs[label].clamp(PROB_FLOOR, 1.0);
    let loss = -(1.0 - p).powf(gamma) * p.ln();
    // -0.0 for p == 1
    loss + 0.0
}

/// Derivative of [`focal_loss`] with respect to each softmax logit.
///
/// With `p = p_y`, `dL/dz_j = c * (1[j = y] - p_j)` where
/// `c = gamma * p * (1 - p)^(gamma - 1) * ln p - (1 - p)^gamma`.
pub fn focal_logit_grad(probs: &[f64], label: usize, gamma: f64) -> Vec<f64> {
    let p = probs[label].clamp(PROB_FLOOR, 1.0);
    let q = 1.0 - p;
    let coef = if q == 0.0 {
        if gamma > 0.0 {
            0.0
        } else {
            -1.0
        }
    } else {
        gamma * p * q.powf(gamma - 1.0) * p.ln() - q.powf(gamma)
    };
    probs
        .iter()
        .enumerate()
        .map(|(j, &pj)| coef * (if j == label { 1.0 } else { 0.0 } - pj))
        .collect()
}
