//! Learnable head parameters and their flat block layout.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Square `dim × dim` linear map, row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearMap {
    dim: usize,
    data: Vec<f64>,
}

impl LinearMap {
    pub fn zeros(dim: usize) -> Self {
        Self {
            dim,
            data: vec![0.0; dim * dim],
        }
    }

    pub fn identity(dim: usize) -> Self {
        let mut m = Self::zeros(dim);
        for i in 0..dim {
            m.data[i * dim + i] = 1.0;
        }
        m
    }

    pub fn from_vec(dim: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != dim * dim {
            return Err(Error::shape(format!("{} values for a {dim}x{dim} map", data.len())));
        }
        Ok(Self { dim, data })
    }

    pub fn random_uniform<R: Rng>(dim: usize, bound: f64, rng: &mut R) -> Self {
        let data = (0..dim * dim).map(|_| rng.random_range(-bound..bound)).collect();
        Self { dim, data }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// `W x`
    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.dim);
        self.data
            .chunks_exact(self.dim)
            .map(|row| crate::numkit::dot(row, x))
            .collect()
    }

    /// `Wᵀ x`
    pub fn apply_transposed(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        for (i, row) in self.data.chunks_exact(self.dim).enumerate() {
            crate::numkit::axpy(x[i], row, &mut out);
        }
        out
    }

    /// `W += scale · a bᵀ`
    pub fn add_outer(&mut self, scale: f64, a: &[f64], b: &[f64]) {
        for (i, row) in self.data.chunks_exact_mut(self.dim).enumerate() {
            crate::numkit::axpy(scale * a[i], b, row);
        }
    }
}

/// Query/key/value maps of a mean-query attention block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttnParams {
    pub wq: LinearMap,
    pub wk: LinearMap,
    pub wv: LinearMap,
}

impl AttnParams {
    pub fn zeros(dim: usize) -> Self {
        Self {
            wq: LinearMap::zeros(dim),
            wk: LinearMap::zeros(dim),
            wv: LinearMap::zeros(dim),
        }
    }

    pub fn init<R: Rng>(dim: usize, rng: &mut R) -> Self {
        let b = 1.0 / (dim as f64).sqrt();
        Self {
            wq: LinearMap::random_uniform(dim, b, rng),
            wk: LinearMap::random_uniform(dim, b, rng),
            wv: LinearMap::random_uniform(dim, b, rng),
        }
    }

    pub fn dim(&self) -> usize {
        self.wq.dim()
    }
}

/// Aggregation attention plus the affine scorer applied to its output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggParams {
    pub attn: AttnParams,
    pub fc_weight: Vec<f64>,
    pub fc_bias: f64,
}

impl AggParams {
    pub fn zeros(dim: usize) -> Self {
        Self {
            attn: AttnParams::zeros(dim),
            fc_weight: vec![0.0; dim],
            fc_bias: 0.0,
        }
    }

    pub fn init<R: Rng>(dim: usize, rng: &mut R) -> Self {
        let b = 1.0 / (dim as f64).sqrt();
        let attn = AttnParams::init(dim, rng);
        let fc_weight = (0..dim).map(|_| rng.random_range(-b..b)).collect();
        Self {
            attn,
            fc_weight,
            fc_bias: 0.0,
        }
    }
}

/// Global pooling attention for each modality.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoolParams {
    pub image: AttnParams,
    pub text: AttnParams,
}

/// Everything that training updates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadWeights {
    pub pool: PoolParams,
    pub agg_words: AggParams,
    pub agg_regions: AggParams,
}

/// Gradients share the trainable layout.
pub type GradientSet = HeadWeights;

/// Name, offset and length of one parameter block in the flat layout.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BlockSpec {
    pub name: &'static str,
    pub offset: usize,
    pub len: usize,
}

pub const BLOCK_NAMES: [&str; 16] = [
    "image_pool.wq",
    "image_pool.wk",
    "image_pool.wv",
    "text_pool.wq",
    "text_pool.wk",
    "text_pool.wv",
    "agg_words.wq",
    "agg_words.wk",
    "agg_words.wv",
    "agg_words.fc_weight",
    "agg_words.fc_bias",
    "agg_regions.wq",
    "agg_regions.wk",
    "agg_regions.wv",
    "agg_regions.fc_weight",
    "agg_regions.fc_bias",
];

impl HeadWeights {
    pub fn zeros(dim: usize) -> Self {
        Self {
            pool: PoolParams {
                image: AttnParams::zeros(dim),
                text: AttnParams::zeros(dim),
            },
            agg_words: AggParams::zeros(dim),
            agg_regions: AggParams::zeros(dim),
        }
    }

    /// Linear maps and FC weights from uniform(±1/√d); FC biases start at 0.
    pub fn init<R: Rng>(dim: usize, rng: &mut R) -> Self {
        let image = AttnParams::init(dim, rng);
        let text = AttnParams::init(dim, rng);
        let agg_words = AggParams::init(dim, rng);
        let agg_regions = AggParams::init(dim, rng);
        Self {
            pool: PoolParams { image, text },
            agg_words,
            agg_regions,
        }
    }

    pub fn dim(&self) -> usize {
        self.pool.image.dim()
    }

    fn slices(&self) -> [&[f64]; 16] {
        let aw = &self.agg_words;
        let ar = &self.agg_regions;
        [
            self.pool.image.wq.as_slice(),
            self.pool.image.wk.as_slice(),
            self.pool.image.wv.as_slice(),
            self.pool.text.wq.as_slice(),
            self.pool.text.wk.as_slice(),
            self.pool.text.wv.as_slice(),
            aw.attn.wq.as_slice(),
            aw.attn.wk.as_slice(),
            aw.attn.wv.as_slice(),
            &aw.fc_weight,
            std::slice::from_ref(&aw.fc_bias),
            ar.attn.wq.as_slice(),
            ar.attn.wk.as_slice(),
            ar.attn.wv.as_slice(),
            &ar.fc_weight,
            std::slice::from_ref(&ar.fc_bias),
        ]
    }

    fn slices_mut(&mut self) -> [&mut [f64]; 16] {
        let aw = &mut self.agg_words;
        let ar = &mut self.agg_regions;
        [
            self.pool.image.wq.as_mut_slice(),
            self.pool.image.wk.as_mut_slice(),
            self.pool.image.wv.as_mut_slice(),
            self.pool.text.wq.as_mut_slice(),
            self.pool.text.wk.as_mut_slice(),
            self.pool.text.wv.as_mut_slice(),
            aw.attn.wq.as_mut_slice(),
            aw.attn.wk.as_mut_slice(),
            aw.attn.wv.as_mut_slice(),
            &mut aw.fc_weight,
            std::slice::from_mut(&mut aw.fc_bias),
            ar.attn.wq.as_mut_slice(),
            ar.attn.wk.as_mut_slice(),
            ar.attn.wv.as_mut_slice(),
            &mut ar.fc_weight,
            std::slice::from_mut(&mut ar.fc_bias),
        ]
    }

    pub fn layout(&self) -> Vec<BlockSpec> {
        let mut offset = 0;
        self.slices()
            .iter()
            .zip(BLOCK_NAMES)
            .map(|(s, name)| {
                let spec = BlockSpec {
                    name,
                    offset,
                    len: s.len(),
                };
                offset += s.len();
                spec
            })
            .collect()
    }

    pub fn len(&self) -> usize {
        self.slices().iter().map(|s| s.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.len());
        for s in self.slices() {
            out.extend_from_slice(s);
        }
        out
    }

    pub fn load_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.len() {
            return Err(Error::shape(format!("{} values for {} parameters", flat.len(), self.len())));
        }
        let mut pos = 0;
        for s in self.slices_mut() {
            let n = s.len();
            s.copy_from_slice(&flat[pos..pos + n]);
            pos += n;
        }
        Ok(())
    }

    pub fn from_flat(dim: usize, flat: &[f64]) -> Result<Self> {
        let mut w = Self::zeros(dim);
        w.load_flat(flat)?;
        Ok(w)
    }

    pub fn add_assign(&mut self, other: &HeadWeights) {
        for (a, b) in self.slices_mut().into_iter().zip(other.slices()) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    /// First block holding a non-finite value.
    pub fn first_non_finite(&self) -> Option<&'static str> {
        self.slices()
            .iter()
            .zip(BLOCK_NAMES)
            .find(|(s, _)| s.iter().any(|v| !v.is_finite()))
            .map(|(_, n)| n)
    }
}

/// Trainable weights plus the fixed attention sharpness `lambda` and the
/// contrastive temperature `tau`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadParams {
    pub weights: HeadWeights,
    pub lambda: f64,
    pub tau: f64,
}

pub const DEFAULT_LAMBDA: f64 = 10.0;
pub const DEFAULT_TAU: f64 = 0.1;

impl HeadParams {
    pub fn init<R: Rng>(dim: usize, lambda: f64, tau: f64, rng: &mut R) -> Self {
        Self {
            weights: HeadWeights::init(dim, rng),
            lambda,
            tau,
        }
    }

    pub fn dim(&self) -> usize {
        self.weights.dim()
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!("lambda must be positive, got {}", self.lambda)));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::Config(format!("tau must be positive, got {}", self.tau)));
        }
        if let Some(b) = self.weights.first_non_finite() {
            return Err(Error::NonFinite(b.into()));
        }
        Ok(())
    }
}
