//! Contrastive objectives: global, local external and local internal.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::aggregate::{pair_score, ExtLoss, PairScore};
use crate::align::{forward_local, global_align, local_align, pool_study, scalarize, GlobalAlignment, PairForward, PooledStudy, PreparedStudy};
use crate::error::{Error, Result};
use crate::numkit::{log_sum_exp, FeatureMatrix};
use crate::params::HeadParams;

/// Dense score matrix; entry `(k, j)` scores image `k` against report `j`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl ScoreMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape(format!("{} scores for {rows}x{cols}", data.len())));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("score matrix".into()));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::shape("ragged score rows"));
        }
        Self::new(rows.len(), cols, rows.concat())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    #[inline]
    pub fn get(&self, k: usize, j: usize) -> f64 {
        self.data[k * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, k: usize, j: usize, v: f64) {
        self.data[k * self.cols + j] = v;
    }

    pub fn row(&self, k: usize) -> &[f64] {
        &self.data[k * self.cols..(k + 1) * self.cols]
    }

    pub fn transpose(&self) -> ScoreMatrix {
        let mut t = ScoreMatrix::zeros(self.cols, self.rows);
        for k in 0..self.rows {
            for j in 0..self.cols {
                t.set(j, k, self.get(k, j));
            }
        }
        t
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    fn add(&self, other: &ScoreMatrix) -> ScoreMatrix {
        ScoreMatrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect(),
        }
    }
}

fn check_tau(tau: f64) -> Result<()> {
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::Config(format!("tau must be positive, got {tau}")));
    }
    Ok(())
}

/// Symmetric InfoNCE averaged over the batch, with its gradient.
///
/// `L = (1/N) Σ_k [ -S_kk/τ + lse_j(S_kj/τ) ] + [ -S_kk/τ + lse_j(S_jk/τ) ]`
pub fn info_nce_sym_grad(s: &ScoreMatrix, tau: f64) -> Result<(f64, ScoreMatrix)> {
    check_tau(tau)?;
    if !s.is_square() {
        return Err(Error::shape(format!("score matrix {}x{} is not square", s.rows, s.cols)));
    }
    let n = s.rows;
    if n == 0 {
        return Err(Error::EmptyInput);
    }
    let scale = 1.0 / (n as f64 * tau);
    let mut grad = ScoreMatrix::zeros(n, n);
    let mut row_total = 0.0;
    for k in 0..n {
        let logits: Vec<f64> = s.row(k).iter().map(|v| v / tau).collect();
        let lse = log_sum_exp(&logits);
        row_total += lse - logits[k];
        for j in 0..n {
            let p = (logits[j] - lse).exp();
            grad.data[k * n + j] += scale * p;
        }
        grad.data[k * n + k] -= scale;
    }
    let mut col_total = 0.0;
    for k in 0..n {
        let logits: Vec<f64> = (0..n).map(|j| s.get(j, k) / tau).collect();
        let lse = log_sum_exp(&logits);
        col_total += lse - logits[k];
        for j in 0..n {
            let p = (logits[j] - lse).exp();
            grad.data[j * n + k] += scale * p;
        }
        grad.data[k * n + k] -= scale;
    }
    Ok(((row_total + col_total) / n as f64, grad))
}

pub fn info_nce_sym(s: &ScoreMatrix, tau: f64) -> Result<f64> {
    info_nce_sym_grad(s, tau).map(|(l, _)| l)
}

/// Local internal loss of one study and its bookkeeping.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct InternalLoss {
    pub words: f64,
    pub regions: f64,
    pub attempted: usize,
    pub degenerate: usize,
}

impl InternalLoss {
    pub fn total(&self) -> f64 {
        self.words + self.regions
    }
}

/// `Σ_j [ -G_jj/τ + lse_i(G_ji/τ) ] + [ -G_jj/τ + lse_i(G_ij/τ) ]` where
/// `G_ji = scalarize(A(own_j, attended_i))` over the active indices.
fn internal_side(own: &FeatureMatrix, attended: &FeatureMatrix, active: &[bool], tau: f64) -> (f64, usize, usize) {
    let idx: Vec<usize> = (0..active.len()).filter(|&k| active[k]).collect();
    let n = idx.len();
    let mut g: Vec<Option<f64>> = Vec::with_capacity(n * n);
    let mut degenerate = 0;
    for &j in &idx {
        for &i in &idx {
            match local_align(own.row(j), attended.row(i)) {
                Ok(a) => g.push(Some(scalarize(&a) / tau)),
                Err(_) => {
                    degenerate += 1;
                    g.push(None)
                }
            }
        }
    }
    let mut total = 0.0;
    for j in 0..n {
        let Some(diag) = g[j * n + j] else { continue };
        let row: Vec<f64> = (0..n).filter_map(|i| g[j * n + i]).collect();
        let col: Vec<f64> = (0..n).filter_map(|i| g[i * n + j]).collect();
        total += (log_sum_exp(&row) - diag) + (log_sum_exp(&col) - diag);
    }
    (total, n * n, degenerate)
}

/// Word-side terms over `(t_j, u_i)` plus region-side terms over `(v_i, m_j)`
/// for a matched pair.
pub fn local_internal_loss(study: &PreparedStudy, pair: &PairForward, tau: f64) -> Result<InternalLoss> {
    check_tau(tau)?;
    let sim = &pair.similarity;
    let (words, aw, dw) = internal_side(&study.tokens, &pair.text_attention.features, &sim.token_active, tau);
    let (regions, ar, dr) = internal_side(&study.regions, &pair.region_attention.features, &sim.region_active, tau);
    Ok(InternalLoss {
        words,
        regions,
        attempted: aw + ar,
        degenerate: dw + dr,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossComponents {
    pub global: f64,
    pub external: f64,
    pub internal: f64,
    pub total: f64,
}

/// Everything the backward pass needs from a batch forward.
#[derive(Debug, Clone)]
pub struct BatchForward {
    pub n: usize,
    pub ext: ExtLoss,
    pub pooled: Vec<PooledStudy>,
    /// `n × n`, index `k * n + j`.
    pub global: Vec<GlobalAlignment>,
    pub pairs: Vec<PairForward>,
    pub scores: Vec<PairScore>,
    pub global_scores: ScoreMatrix,
    pub word_scores: ScoreMatrix,
    pub region_scores: ScoreMatrix,
    pub internal: Vec<InternalLoss>,
    pub components: LossComponents,
    pub attempted: usize,
    pub degenerate: usize,
}

impl BatchForward {
    pub fn agg_scores(&self) -> ScoreMatrix {
        self.word_scores.add(&self.region_scores)
    }

    pub fn degenerate_fraction(&self) -> f64 {
        if self.attempted == 0 {
            0.0
        } else {
            self.degenerate as f64 / self.attempted as f64
        }
    }

    pub fn pair(&self, k: usize, j: usize) -> &PairForward {
        &self.pairs[k * self.n + j]
    }
}

pub(crate) fn external_loss(words: &ScoreMatrix, regions: &ScoreMatrix, ext: ExtLoss, tau: f64) -> Result<(f64, ScoreMatrix, ScoreMatrix)> {
    match ext {
        ExtLoss::Summed => {
            let (l, g) = info_nce_sym_grad(&words.add(regions), tau)?;
            Ok((l, g.clone(), g))
        }
        ExtLoss::PerDirection => {
            let (lw, gw) = info_nce_sym_grad(words, tau)?;
            let (lr, gr) = info_nce_sym_grad(regions, tau)?;
            Ok((lw + lr, gw, gr))
        }
    }
}

/// Runs every pair of the batch and evaluates `L = L_g + L_ext + L_int`.
///
/// `L_g` and `L_ext` average over the batch; `L_int` is the mean over studies
/// of each study's summed local terms.
pub fn batch_forward(batch: &[PreparedStudy], params: &HeadParams, ext: ExtLoss) -> Result<BatchForward> {
    params.validate()?;
    let n = batch.len();
    if n == 0 {
        return Err(Error::EmptyInput);
    }
    let d = params.dim();
    for s in batch {
        if s.dim() != d {
            return Err(Error::DimMismatch { expected: d, found: s.dim() });
        }
    }
    let tau = params.tau;
    let pooled = batch
        .par_iter()
        .map(|s| pool_study(s, params))
        .collect::<Result<Vec<_>>>()?;
    let w = &params.weights;
    let per_pair = (0..n * n)
        .into_par_iter()
        .map(|idx| {
            let (k, j) = (idx / n, idx % n);
            let global = global_align(&pooled[k].image.output, &pooled[j].text.output)?;
            let pair = forward_local(&batch[k], &batch[j], params.lambda)?;
            let score = pair_score(&pair, &w.agg_words, &w.agg_regions)?;
            Ok((global, pair, score))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut global = Vec::with_capacity(n * n);
    let mut pairs = Vec::with_capacity(n * n);
    let mut scores = Vec::with_capacity(n * n);
    for (g, p, s) in per_pair {
        global.push(g);
        pairs.push(p);
        scores.push(s);
    }
    let global_scores = ScoreMatrix::new(n, n, global.iter().map(|g| g.score).collect())?;
    let word_scores = ScoreMatrix::new(n, n, scores.iter().map(|s| s.words.score).collect())?;
    let region_scores = ScoreMatrix::new(n, n, scores.iter().map(|s| s.regions.score).collect())?;

    let internal = (0..n)
        .into_par_iter()
        .map(|k| local_internal_loss(&batch[k], &pairs[k * n + k], tau))
        .collect::<Result<Vec<_>>>()?;

    let l_g = info_nce_sym(&global_scores, tau)?;
    let (l_ext, _, _) = external_loss(&word_scores, &region_scores, ext, tau)?;
    let l_int = internal.iter().map(InternalLoss::total).sum::<f64>() / n as f64;
    let attempted = pairs.iter().map(PairForward::attempted).sum();
    let degenerate = pairs.iter().map(PairForward::degenerate).sum();
    Ok(BatchForward {
        n,
        ext,
        pooled,
        global,
        pairs,
        scores,
        global_scores,
        word_scores,
        region_scores,
        internal,
        components: LossComponents {
            global: l_g,
            external: l_ext,
            internal: l_int,
            total: l_g + l_ext + l_int,
        },
        attempted,
        degenerate,
    })
}

pub fn total_loss(batch: &[PreparedStudy], params: &HeadParams, ext: ExtLoss) -> Result<LossComponents> {
    batch_forward(batch, params, ext).map(|f| f.components)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_pair_is_zero() {
        let s = ScoreMatrix::new(1, 1, vec![3.7]).unwrap();
        assert_eq!(info_nce_sym(&s, 0.1).unwrap(), 0.0);
    }

    #[test]
    fn scaled_identity_closed_form() {
        let s = ScoreMatrix::from_rows(&[vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0]]).unwrap();
        let e10 = 10f64.exp();
        let per_row = -(e10 / (e10 + 2.0)).ln();
        let l = info_nce_sym(&s, 0.1).unwrap();
        assert!((l - 2.0 * per_row).abs() < 1e-15);
        assert!((l - 1.816e-4).abs() < 1e-6);
    }

    #[test]
    fn uniform_is_two_log_n() {
        let s = ScoreMatrix::new(5, 5, vec![0.42; 25]).unwrap();
        assert!((info_nce_sym(&s, 0.1).unwrap() - 2.0 * 5f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn rejects_bad_tau_and_shape() {
        let s = ScoreMatrix::new(2, 2, vec![0.0; 4]).unwrap();
        assert!(info_nce_sym(&s, 0.0).is_err());
        let r = ScoreMatrix::new(1, 2, vec![0.0; 2]).unwrap();
        assert!(info_nce_sym(&r, 0.1).is_err());
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let rows = vec![vec![0.3, -0.2, 0.9], vec![0.1, 0.5, -0.4], vec![-0.7, 0.2, 0.05]];
        let s = ScoreMatrix::from_rows(&rows).unwrap();
        let (_, g) = info_nce_sym_grad(&s, 0.1).unwrap();
        let h = 1e-6;
        for k in 0..3 {
            for j in 0..3 {
                let mut p = s.clone();
                p.set(k, j, s.get(k, j) + h);
                let mut m = s.clone();
                m.set(k, j, s.get(k, j) - h);
                let fd = (info_nce_sym(&p, 0.1).unwrap() - info_nce_sym(&m, 0.1).unwrap()) / (2.0 * h);
                assert!((fd - g.get(k, j)).abs() < 1e-7);
            }
        }
    }

    proptest::proptest! {
        #[test]
        fn nonnegative_and_finite(vals in proptest::collection::vec(-3.0f64..3.0, 16), tau in 0.01f64..10.0) {
            let s = ScoreMatrix::new(4, 4, vals).unwrap();
            let l = info_nce_sym(&s, tau).unwrap();
            proptest::prop_assert!(l.is_finite() && l >= -1e-12);
        }

        #[test]
        fn row_term_shift_invariant(vals in proptest::collection::vec(-1.0f64..1.0, 9), c in -5.0f64..5.0) {
            // The row-direction term alone is invariant to shifting a row.
            let s = ScoreMatrix::new(3, 3, vals).unwrap();
            let row_term = |s: &ScoreMatrix| -> f64 {
                (0..3).map(|k| {
                    let l: Vec<f64> = s.row(k).iter().map(|v| v / 0.1).collect();
                    log_sum_exp(&l) - l[k]
                }).sum()
            };
            let mut shifted = s.clone();
            for j in 0..3 { shifted.set(1, j, s.get(1, j) + c); }
            proptest::prop_assert!((row_term(&s) - row_term(&shifted)).abs() < 1e-9);
        }
    }
}
