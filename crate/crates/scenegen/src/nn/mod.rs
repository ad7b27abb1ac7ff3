//! Minimal numerical core: dense tensors, a reverse-mode tape, the layer
//! builders the model needs, binary cross-entropy, Adam, and verification
//! oracles.

pub mod layers;
pub mod optim;
pub mod tape;
pub mod tensor;

pub use layers::{
    gat_attention, gat_forward, gcn_forward, gru_cell, init_gat, init_gcn, init_gru, init_mlp,
    mlp_forward, LEAKY_SLOPE,
};
pub use optim::{
    clip_gradients, finite_difference_gradient, gradient_relative_error, xavier_init,
    xavier_with_rng, AdamConfig, AdamState, ParamStore,
};
pub use tape::{Tape, Var};
pub use tensor::{NnError, Tensor};

/// Clamp bound keeping log terms finite.
pub const BCE_EPS: f64 = 1e-12;

/// Per-sample binary cross-entropy with the prediction clamped away from
/// the log singularities.
pub fn bce(y: f64, yhat: f64) -> f64 {
    let p = yhat.clamp(BCE_EPS, 1.0 - BCE_EPS);
    -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
}

/// Arithmetic mean of per-sample losses; defined as 0 on an empty batch.
pub fn mean_bce(pairs: &[(f64, f64)]) -> f64 {
    if pairs.is_empty() {
        return 0.0;
    }
    pairs.iter().map(|(y, yhat)| bce(*y, *yhat)).sum::<f64>() / pairs.len() as f64
}

/// Mean binary cross-entropy computed from logits: per sample
/// softplus(z) - y * z, the overflow-safe form of Eq-style BCE on
/// sigmoid(z). Gradients never saturate, unlike the clamped-probability
/// composition.
pub fn bce_with_logits_loss(tape: &mut Tape, logits: Var, labels: &[f64]) -> Result<Var, NnError> {
    let n = labels.len();
    if tape.value(logits).rows() != n || tape.value(logits).cols() != 1 {
        return Err(NnError::ShapeMismatch {
            context: "bce_with_logits_loss",
            expected: vec![n, 1],
            got: tape.value(logits).shape().to_vec(),
        });
    }
    let y = tape.leaf(Tensor::matrix(n, 1, labels.to_vec())?);
    let sp = tape.softplus(logits);
    let yz = tape.mul(y, logits)?;
    let neg_yz = tape.affine(yz, -1.0, 0.0);
    let per_sample = tape.add(sp, neg_yz)?;
    Ok(tape.mean_all(per_sample))
}

/// Tape composition of `mean_bce` over a [n, 1] probability column.
/// Matches the plain function bit-for-bit on identical inputs.
pub fn bce_loss(tape: &mut Tape, probs: Var, labels: &[f64]) -> Result<Var, NnError> {
    let n = labels.len();
    if tape.value(probs).rows() != n || tape.value(probs).cols() != 1 {
        return Err(NnError::ShapeMismatch {
            context: "bce_loss",
            expected: vec![n, 1],
            got: tape.value(probs).shape().to_vec(),
        });
    }
    let y = tape.leaf(Tensor::matrix(n, 1, labels.to_vec())?);
    let one_minus_y = tape.leaf(Tensor::matrix(
        n,
        1,
        labels.iter().map(|v| 1.0 - v).collect(),
    )?);
    let p = tape.clamp(probs, BCE_EPS, 1.0 - BCE_EPS);
    let ln_p = tape.ln(p);
    let one_minus_p = tape.affine(p, -1.0, 1.0);
    let ln_q = tape.ln(one_minus_p);
    let pos = tape.mul(y, ln_p)?;
    let neg = tape.mul(one_minus_y, ln_q)?;
    let sum = tape.add(pos, neg)?;
    let nll = tape.affine(sum, -1.0, 0.0);
    Ok(tape.mean_all(nll))
}
