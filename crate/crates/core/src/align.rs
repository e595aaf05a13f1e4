//! Cross-modal alignment forward pass.
//!
//! For a region set `V` and token set `T`:
//!
//! * `C[i][j] = cos(v_i, t_j)`
//! * per token `j`: `w_j = softmax_i(λ C[·][j])`, `u_j = Σ_i w_j[i] v_i`,
//!   `a_j = (u_j ∘ t_j) / ‖u_j ∘ t_j‖`
//! * per region `i`: `w_i = softmax_j(λ C[i][·])`, `m_i = Σ_j w_i[j] t_j`,
//!   `a_i = (m_i ∘ v_i) / ‖m_i ∘ v_i‖`
//! * global: `A_g = (v̄ ∘ t̄) / ‖v̄ ∘ t̄‖` over attention-pooled features.
//!
//! Masked regions and tokens are skipped in every loop, so a fully masked
//! lateral block contributes nothing and leaves all sums bit-identical to a
//! frontal-only run.

use serde::{Deserialize, Serialize};

use crate::attention::{attend_mean_query, AttnForward};
use crate::dataio::Study;
use crate::error::{Error, Result};
use crate::numkit::{axpy, cosine, hadamard, norm, softmax_masked, sum, FeatureMatrix, EPS};
use crate::params::{AttnParams, HeadParams};
use crate::posenc::{add_pe, GridShape};

/// Which image views enter the region set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ViewMode {
    /// Frontal rows followed by lateral rows; an absent lateral is zero-filled and masked.
    Both,
    FrontalOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PrepareOptions {
    pub views: ViewMode,
    pub positional: bool,
}

impl Default for PrepareOptions {
    fn default() -> Self {
        Self {
            views: ViewMode::Both,
            positional: true,
        }
    }
}

/// A study with its region set assembled and masks resolved.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedStudy {
    pub id: String,
    pub regions: FeatureMatrix,
    pub region_mask: Vec<bool>,
    /// Frontal grid; its cells are the leading rows of `regions`.
    pub grid: GridShape,
    pub tokens: FeatureMatrix,
    pub token_mask: Vec<bool>,
    pub label: Option<i32>,
}

impl PreparedStudy {
    pub fn dim(&self) -> usize {
        self.regions.dim()
    }

    pub fn frontal_rows(&self) -> usize {
        self.grid.cells()
    }

    pub fn active_regions(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.regions.rows()).filter(|&i| self.region_mask[i])
    }

    pub fn active_tokens(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.tokens.rows()).filter(|&j| self.token_mask[j])
    }
}

/// Builds the region set. All-zero rows are masked and stay zero after the
/// positional encoding is added, so "absent lateral" and "all-zero lateral"
/// prepare identically.
pub fn prepare(study: &Study, opts: PrepareOptions) -> Result<PreparedStudy> {
    let encode = |m: &FeatureMatrix| -> Result<FeatureMatrix> {
        if opts.positional {
            add_pe(m, study.grid, true)
        } else {
            Ok(m.clone())
        }
    };
    let frontal = encode(&study.frontal)?;
    let regions = match opts.views {
        ViewMode::FrontalOnly => frontal,
        ViewMode::Both => {
            let lateral = match &study.lateral {
                Some(l) => encode(l)?,
                None => FeatureMatrix::zeros(study.grid.cells(), study.dim()),
            };
            frontal.stack(&lateral)?
        }
    };
    let region_mask = (0..regions.rows()).map(|i| !regions.is_zero_row(i)).collect();
    let token_mask = (0..study.tokens.rows())
        .map(|j| study.token_mask[j] && !study.tokens.is_zero_row(j))
        .collect();
    Ok(PreparedStudy {
        id: study.id.clone(),
        regions,
        region_mask,
        grid: study.grid,
        tokens: study.tokens.clone(),
        token_mask,
        label: study.label,
    })
}

pub fn prepare_all(studies: &[Study], opts: PrepareOptions) -> Result<Vec<PreparedStudy>> {
    studies.iter().map(|s| prepare(s, opts)).collect()
}

/// Region × token cosine matrix with resolved masks.
#[derive(Debug, Clone, PartialEq)]
pub struct Similarity {
    pub n_regions: usize,
    pub n_tokens: usize,
    /// Row-major `n_regions × n_tokens`; zero where either side is masked.
    pub values: Vec<f64>,
    pub region_active: Vec<bool>,
    pub token_active: Vec<bool>,
}

impl Similarity {
    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.n_tokens + j]
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.n_regions).map(|i| self.get(i, j)).collect()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.n_tokens..(i + 1) * self.n_tokens]
    }
}

pub fn similarity(v: &FeatureMatrix, t: &FeatureMatrix, region_mask: &[bool], token_mask: &[bool]) -> Result<Similarity> {
    if v.dim() != t.dim() {
        return Err(Error::DimMismatch {
            expected: v.dim(),
            found: t.dim(),
        });
    }
    if region_mask.len() != v.rows() || token_mask.len() != t.rows() {
        return Err(Error::shape("mask length differs from row count"));
    }
    let (nr, nw) = (v.rows(), t.rows());
    let region_active: Vec<bool> = (0..nr).map(|i| region_mask[i] && norm(v.row(i)) > EPS).collect();
    let token_active: Vec<bool> = (0..nw).map(|j| token_mask[j] && norm(t.row(j)) > EPS).collect();
    let mut values = vec![0.0; nr * nw];
    for i in 0..nr {
        if !region_active[i] {
            continue;
        }
        for j in 0..nw {
            if token_active[j] {
                values[i * nw + j] = cosine(v.row(i), t.row(j)).value;
            }
        }
    }
    Ok(Similarity {
        n_regions: nr,
        n_tokens: nw,
        values,
        region_active,
        token_active,
    })
}

/// Attention weights of one modality over the other and the attended features.
#[derive(Debug, Clone, PartialEq)]
pub struct Attended {
    /// One row per query; zero rows for inactive queries.
    pub weights: FeatureMatrix,
    pub features: FeatureMatrix,
}

/// Per token: softmax over active regions of `λ·C[·][j]` and `u_j = Σ_i w_j[i] v_i`.
pub fn attend_text_to_regions(v: &FeatureMatrix, sim: &Similarity, lambda: f64) -> Result<Attended> {
    if !sim.region_active.iter().any(|&a| a) {
        return Err(Error::NoVisibleRegions);
    }
    let mut weights = FeatureMatrix::zeros(sim.n_tokens, sim.n_regions);
    let mut features = FeatureMatrix::zeros(sim.n_tokens, v.dim());
    for j in 0..sim.n_tokens {
        if !sim.token_active[j] {
            continue;
        }
        let w = softmax_masked(&sim.column(j), lambda, &sim.region_active).ok_or(Error::NoVisibleRegions)?;
        let u = features.row_mut(j);
        for (i, &wi) in w.iter().enumerate() {
            if sim.region_active[i] {
                axpy(wi, v.row(i), u);
            }
        }
        weights.row_mut(j).copy_from_slice(&w);
    }
    Ok(Attended { weights, features })
}

/// Per region: softmax over active tokens of `λ·C[i][·]` and `m_i = Σ_j w_i[j] t_j`.
pub fn attend_regions_to_text(t: &FeatureMatrix, sim: &Similarity, lambda: f64) -> Result<Attended> {
    if !sim.token_active.iter().any(|&a| a) {
        return Err(Error::NoVisibleTokens);
    }
    let mut weights = FeatureMatrix::zeros(sim.n_regions, sim.n_tokens);
    let mut features = FeatureMatrix::zeros(sim.n_regions, t.dim());
    for i in 0..sim.n_regions {
        if !sim.region_active[i] {
            continue;
        }
        let w = softmax_masked(sim.row(i), lambda, &sim.token_active).ok_or(Error::NoVisibleTokens)?;
        let m = features.row_mut(i);
        for (j, &wj) in w.iter().enumerate() {
            if sim.token_active[j] {
                axpy(wj, t.row(j), m);
            }
        }
        weights.row_mut(i).copy_from_slice(&w);
    }
    Ok(Attended { weights, features })
}

/// `(a ∘ b) / ‖a ∘ b‖₂`.
pub fn local_align(a: &[f64], b: &[f64]) -> Result<Vec<f64>> {
    let p = hadamard(a, b);
    let n = norm(&p);
    if !(n > EPS) {
        return Err(Error::DegenerateVector);
    }
    Ok(p.into_iter().map(|x| x / n).collect())
}

/// Scalar used wherever an alignment vector enters a softmax: the sum of its entries.
#[inline]
pub fn scalarize(a: &[f64]) -> f64 {
    sum(a)
}

/// Local alignment vectors of one direction. Degenerate products are dropped.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct AlignmentSet {
    pub vectors: Vec<Vec<f64>>,
    /// Token (or region) index each vector came from.
    pub sources: Vec<usize>,
    pub attempted: usize,
    pub degenerate: usize,
}

impl AlignmentSet {
    pub fn rows(&self) -> Vec<&[f64]> {
        self.vectors.iter().map(Vec::as_slice).collect()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }
}

fn align_rows(attended: &FeatureMatrix, own: &FeatureMatrix, active: &[bool]) -> AlignmentSet {
    let mut set = AlignmentSet::default();
    for (k, &is_active) in active.iter().enumerate() {
        if !is_active {
            continue;
        }
        set.attempted += 1;
        match local_align(attended.row(k), own.row(k)) {
            Ok(a) => {
                set.vectors.push(a);
                set.sources.push(k);
            }
            Err(_) => set.degenerate += 1,
        }
    }
    set
}

/// Attention-pooled summary of the active rows of `features`.
pub fn pool_global(features: &FeatureMatrix, p: &AttnParams, mask: &[bool]) -> Result<AttnForward> {
    let rows: Vec<&[f64]> = (0..features.rows()).filter(|&i| mask[i]).map(|i| features.row(i)).collect();
    if rows.is_empty() {
        return Err(Error::EmptyInput);
    }
    attend_mean_query(p, &rows)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GlobalAlignment {
    pub vector: Vec<f64>,
    /// Sum of `vector` entries.
    pub score: f64,
    /// `‖v̄ ∘ t̄‖₂`, kept for the backward pass.
    pub norm: f64,
}

pub fn global_align(v_bar: &[f64], t_bar: &[f64]) -> Result<GlobalAlignment> {
    let p = hadamard(v_bar, t_bar);
    let n = norm(&p);
    if !(n > EPS) {
        return Err(Error::DegenerateVector);
    }
    let vector: Vec<f64> = p.into_iter().map(|x| x / n).collect();
    let score = scalarize(&vector);
    Ok(GlobalAlignment { vector, score, norm: n })
}

/// Cached forward pass of one (image, report) pair.
#[derive(Debug, Clone, PartialEq)]
pub struct PairForward {
    pub similarity: Similarity,
    /// `W_text` and `U`.
    pub text_attention: Attended,
    /// `W_region` and `M`.
    pub region_attention: Attended,
    /// `{a_j}` over active tokens.
    pub word_alignments: AlignmentSet,
    /// `{a_i}` over active regions.
    pub region_alignments: AlignmentSet,
}

impl PairForward {
    pub fn degenerate(&self) -> usize {
        self.word_alignments.degenerate + self.region_alignments.degenerate
    }

    pub fn attempted(&self) -> usize {
        self.word_alignments.attempted + self.region_alignments.attempted
    }
}

/// Parameter-free local part of the pair forward pass.
pub fn forward_local(image: &PreparedStudy, report: &PreparedStudy, lambda: f64) -> Result<PairForward> {
    let sim = similarity(&image.regions, &report.tokens, &image.region_mask, &report.token_mask)?;
    let text_attention = attend_text_to_regions(&image.regions, &sim, lambda)?;
    let region_attention = attend_regions_to_text(&report.tokens, &sim, lambda)?;
    let word_alignments = align_rows(&text_attention.features, &report.tokens, &sim.token_active);
    let region_alignments = align_rows(&region_attention.features, &image.regions, &sim.region_active);
    Ok(PairForward {
        similarity: sim,
        text_attention,
        region_attention,
        word_alignments,
        region_alignments,
    })
}

/// Pooled global features of a study.
#[derive(Debug, Clone, PartialEq)]
pub struct PooledStudy {
    pub image: AttnForward,
    pub text: AttnForward,
}

pub fn pool_study(study: &PreparedStudy, params: &HeadParams) -> Result<PooledStudy> {
    let image = pool_global(&study.regions, &params.weights.pool.image, &study.region_mask)
        .map_err(|_| Error::NoVisibleRegions)?;
    let text = pool_global(&study.tokens, &params.weights.pool.text, &study.token_mask)
        .map_err(|_| Error::NoVisibleTokens)?;
    Ok(PooledStudy { image, text })
}
