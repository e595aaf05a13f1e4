//! Analytic gradients of the total loss with respect to the head weights,
//! and a central-difference checker.
//!
//! Reverse accumulation runs module by module over the cached
//! [`BatchForward`]: InfoNCE → scores → aggregation attention → value/key/query
//! maps, and InfoNCE → global alignment → pooling attention. The local
//! alignments themselves have no trainable inputs, so the internal loss
//! contributes no gradient.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::aggregate::{aggregate_backward, ExtLoss};
use crate::align::PreparedStudy;
use crate::attention::attend_backward;
use crate::error::{Error, Result};
use crate::loss::{batch_forward, external_loss, info_nce_sym_grad, BatchForward, LossComponents};
use crate::params::{GradientSet, HeadParams, HeadWeights};

/// `∂ sum(normalize(v ∘ t)) / ∂v = t ∘ (1 − s·a) / ‖v ∘ t‖`
fn global_score_grad(other: &[f64], a: &[f64], score: f64, norm: f64, scale: f64, out: &mut [f64]) {
    for i in 0..out.len() {
        out[i] += scale * other[i] * (1.0 - score * a[i]) / norm;
    }
}

fn active_rows(m: &crate::numkit::FeatureMatrix, mask: &[bool]) -> Vec<Vec<f64>> {
    (0..m.rows()).filter(|&i| mask[i]).map(|i| m.row(i).to_vec()).collect()
}

/// Backward pass over an existing forward.
pub fn backward_from(batch: &[PreparedStudy], params: &HeadParams, fwd: &BatchForward) -> Result<GradientSet> {
    let n = fwd.n;
    let tau = params.tau;
    let d = params.dim();
    let w = &params.weights;
    let (_, d_global) = info_nce_sym_grad(&fwd.global_scores, tau)?;
    let (_, d_words, d_regions) = external_loss(&fwd.word_scores, &fwd.region_scores, fwd.ext, tau)?;

    // Pooled-feature gradients, reduced in fixed order.
    let mut d_vbar = vec![vec![0.0; d]; n];
    let mut d_tbar = vec![vec![0.0; d]; n];
    for k in 0..n {
        for j in 0..n {
            let g = d_global.get(k, j);
            if g == 0.0 {
                continue;
            }
            let ga = &fwd.global[k * n + j];
            let v = &fwd.pooled[k].image.output;
            let t = &fwd.pooled[j].text.output;
            global_score_grad(t, &ga.vector, ga.score, ga.norm, g, &mut d_vbar[k]);
            global_score_grad(v, &ga.vector, ga.score, ga.norm, g, &mut d_tbar[j]);
        }
    }

    // One partial gradient per image row k, summed in k order afterwards.
    let partials: Vec<GradientSet> = (0..n)
        .into_par_iter()
        .map(|k| {
            let mut g = HeadWeights::zeros(d);
            let s = &batch[k];
            let regions = active_rows(&s.regions, &s.region_mask);
            let region_refs: Vec<&[f64]> = regions.iter().map(Vec::as_slice).collect();
            attend_backward(&w.pool.image, &region_refs, &fwd.pooled[k].image, &d_vbar[k], &mut g.pool.image);
            let tokens = active_rows(&s.tokens, &s.token_mask);
            let token_refs: Vec<&[f64]> = tokens.iter().map(Vec::as_slice).collect();
            attend_backward(&w.pool.text, &token_refs, &fwd.pooled[k].text, &d_tbar[k], &mut g.pool.text);
            for j in 0..n {
                let idx = k * n + j;
                let pair = &fwd.pairs[idx];
                let score = &fwd.scores[idx];
                aggregate_backward(
                    &pair.word_alignments.rows(),
                    &w.agg_words,
                    &score.words,
                    d_words.get(k, j),
                    &mut g.agg_words,
                );
                aggregate_backward(
                    &pair.region_alignments.rows(),
                    &w.agg_regions,
                    &score.regions,
                    d_regions.get(k, j),
                    &mut g.agg_regions,
                );
            }
            g
        })
        .collect();
    let mut grads = HeadWeights::zeros(d);
    for p in &partials {
        grads.add_assign(p);
    }
    if let Some(block) = grads.first_non_finite() {
        return Err(Error::NonFiniteGradient { block: block.into() });
    }
    Ok(grads)
}

/// Loss components and exact gradients for one batch.
pub fn backward(batch: &[PreparedStudy], params: &HeadParams, ext: ExtLoss) -> Result<(LossComponents, GradientSet)> {
    let fwd = batch_forward(batch, params, ext)?;
    let grads = backward_from(batch, params, &fwd)?;
    Ok((fwd.components, grads))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FdOptions {
    pub step: f64,
    /// Coordinates checked per block (all of them if the block is smaller).
    pub samples_per_block: usize,
    pub seed: u64,
    /// Test hook: added to every analytic gradient entry before comparison.
    #[serde(skip)]
    pub corrupt: Option<f64>,
}

impl Default for FdOptions {
    fn default() -> Self {
        Self {
            step: 1e-5,
            samples_per_block: 200,
            seed: 0,
            corrupt: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockError {
    pub block: String,
    pub checked: usize,
    pub max_rel_error: f64,
    /// Flat index within the block of the worst coordinate.
    pub worst: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FdReport {
    pub step: f64,
    pub blocks: Vec<BlockError>,
    pub max_rel_error: f64,
}

impl FdReport {
    pub fn table(&self) -> String {
        let mut out = format!("{:<24} {:>8} {:>14}\n", "block", "checked", "max_rel_err");
        for b in &self.blocks {
            out.push_str(&format!("{:<24} {:>8} {:>14.3e}\n", b.block, b.checked, b.max_rel_error));
        }
        out.push_str(&format!("{:<24} {:>8} {:>14.3e}\n", "max", "", self.max_rel_error));
        out
    }
}

/// `|g − ĝ| / max(1, |g|, |ĝ|)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / 1f64.max(analytic.abs()).max(numeric.abs())
}

/// Compares [`backward`] with central differences of the total loss.
pub fn fd_check(batch: &[PreparedStudy], params: &HeadParams, ext: ExtLoss, opts: FdOptions) -> Result<FdReport> {
    if !(opts.step > 0.0) {
        return Err(Error::Config(format!("finite-difference step must be positive, got {}", opts.step)));
    }
    let (_, grads) = backward(batch, params, ext)?;
    let analytic = grads.to_flat();
    let base = params.weights.to_flat();
    let d = params.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let loss_at = |flat: &[f64]| -> Result<f64> {
        let mut p = params.clone();
        p.weights = HeadWeights::from_flat(d, flat)?;
        Ok(batch_forward(batch, &p, ext)?.components.total)
    };
    let mut blocks = Vec::new();
    for spec in params.weights.layout() {
        let coords: Vec<usize> = if spec.len <= opts.samples_per_block {
            (0..spec.len).collect()
        } else {
            let mut c = sample(&mut rng, spec.len, opts.samples_per_block).into_vec();
            c.sort_unstable();
            c
        };
        let errors = coords
            .par_iter()
            .map(|&c| {
                let i = spec.offset + c;
                let mut plus = base.clone();
                plus[i] += opts.step;
                let mut minus = base.clone();
                minus[i] -= opts.step;
                let numeric = (loss_at(&plus)? - loss_at(&minus)?) / (2.0 * opts.step);
                let a = analytic[i] + opts.corrupt.unwrap_or(0.0);
                Ok(relative_error(a, numeric))
            })
            .collect::<Result<Vec<f64>>>()?;
        let (worst, max_rel_error) = errors
            .iter()
            .enumerate()
            .fold((0, 0.0f64), |(wi, wv), (i, &e)| if e > wv { (i, e) } else { (wi, wv) });
        blocks.push(BlockError {
            block: spec.name.to_string(),
            checked: coords.len(),
            max_rel_error,
            worst: coords.get(worst).copied().unwrap_or(0),
        });
    }
    let max_rel_error = blocks.iter().map(|b| b.max_rel_error).fold(0.0, f64::max);
    Ok(FdReport {
        step: opts.step,
        blocks,
        max_rel_error,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(1e-9, 0.0), 1e-9);
        assert_eq!(relative_error(10.0, 11.0), 1.0 / 11.0);
    }
}
