//! Mean-query attention: collapses a set of vectors into one.
//!
//! `query = Wq · mean(x)`, `score_t = query · (Wk x_t) / √d`,
//! `q = softmax(score)`, `out = Wv · Σ_t q_t x_t`.
//!
//! Used both for global pooling of local features and for aggregating local
//! alignment vectors.

use crate::error::{Error, Result};
use crate::numkit::{axpy, dot};
use crate::params::AttnParams;

/// Intermediates kept for the backward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct AttnForward {
    pub mean: Vec<f64>,
    pub query: Vec<f64>,
    pub keys: Vec<Vec<f64>>,
    pub weights: Vec<f64>,
    /// `Σ_t q_t x_t`, before the value map.
    pub mixed: Vec<f64>,
    pub output: Vec<f64>,
}

pub fn attend_mean_query(p: &AttnParams, rows: &[&[f64]]) -> Result<AttnForward> {
    let n = rows.len();
    if n == 0 {
        return Err(Error::EmptyInput);
    }
    let d = p.dim();
    let mut mean = vec![0.0; d];
    for r in rows {
        if r.len() != d {
            return Err(Error::DimMismatch {
                expected: d,
                found: r.len(),
            });
        }
        axpy(1.0, r, &mut mean);
    }
    for m in &mut mean {
        *m /= n as f64;
    }
    let query = p.wq.apply(&mean);
    let keys: Vec<Vec<f64>> = rows.iter().map(|r| p.wk.apply(r)).collect();
    let scale = 1.0 / (d as f64).sqrt();
    let scores: Vec<f64> = keys.iter().map(|k| dot(&query, k) * scale).collect();
    let weights = crate::numkit::softmax_scaled(&scores, 1.0)?;
    let mut mixed = vec![0.0; d];
    for (w, r) in weights.iter().zip(rows) {
        axpy(*w, r, &mut mixed);
    }
    let output = p.wv.apply(&mixed);
    Ok(AttnForward {
        mean,
        query,
        keys,
        weights,
        mixed,
        output,
    })
}

/// Accumulates `∂L/∂{Wq,Wk,Wv}` into `grads` given `d_out = ∂L/∂output`.
/// Inputs `rows` are treated as constants.
pub fn attend_backward(p: &AttnParams, rows: &[&[f64]], fwd: &AttnForward, d_out: &[f64], grads: &mut AttnParams) {
    let d = p.dim();
    let scale = 1.0 / (d as f64).sqrt();
    grads.wv.add_outer(1.0, d_out, &fwd.mixed);
    let d_mixed = p.wv.apply_transposed(d_out);
    let d_w: Vec<f64> = rows.iter().map(|r| dot(&d_mixed, r)).collect();
    let mut avg = 0.0;
    for (w, g) in fwd.weights.iter().zip(&d_w) {
        avg += w * g;
    }
    let mut d_query = vec![0.0; d];
    for t in 0..rows.len() {
        let d_score = fwd.weights[t] * (d_w[t] - avg) * scale;
        if d_score == 0.0 {
            continue;
        }
        axpy(d_score, &fwd.keys[t], &mut d_query);
        // d key_t = d_score · query ; key_t = Wk x_t
        grads.wk.add_outer(d_score, &fwd.query, rows[t]);
    }
    grads.wq.add_outer(1.0, &d_query, &fwd.mean);
}
