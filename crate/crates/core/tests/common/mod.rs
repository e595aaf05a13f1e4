#![allow(dead_code)]

pub mod naive;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use xmodal_core::align::{prepare_all, PrepareOptions, PreparedStudy};
use xmodal_core::{Corpus, FeatureMatrix, GridShape, HeadParams, Split, Study};

pub fn gaussian_matrix(rows: usize, dim: usize, scale: f64, rng: &mut ChaCha8Rng) -> FeatureMatrix {
    let data = (0..rows * dim)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            scale * z
        })
        .collect();
    FeatureMatrix::new(rows, dim, data).unwrap()
}

/// Random study; `lateral` controls the view, trailing tokens beyond
/// `active_tokens` are masked padding.
pub fn random_study(
    id: usize,
    grid: GridShape,
    tokens: usize,
    active_tokens: usize,
    dim: usize,
    lateral: bool,
    rng: &mut ChaCha8Rng,
) -> Study {
    Study {
        id: format!("s{id}"),
        frontal: gaussian_matrix(grid.cells(), dim, 1.0, rng),
        lateral: lateral.then(|| gaussian_matrix(grid.cells(), dim, 1.0, rng)),
        tokens: gaussian_matrix(tokens, dim, 1.0, rng),
        token_mask: (0..tokens).map(|j| j < active_tokens).collect(),
        grid,
        label: Some(id as i32 % 3),
        grounding: Vec::new(),
    }
}

pub fn corpus(studies: Vec<Study>) -> Corpus {
    let dim = studies[0].dim();
    let grid = studies[0].grid;
    Corpus {
        studies,
        dim,
        grid,
        split: Split::Train,
    }
}

/// `n` studies, grid 2×3 plus lateral, 4 tokens, d = 8.
pub fn gradcheck_batch(seed: u64, n: usize) -> (Vec<PreparedStudy>, HeadParams) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let grid = GridShape::new(2, 3);
    let studies: Vec<Study> = (0..n).map(|i| random_study(i, grid, 4, 4, 8, true, &mut rng)).collect();
    let params = HeadParams::init(8, 10.0, 0.1, &mut rng);
    (prepare_all(&studies, PrepareOptions::default()).unwrap(), params)
}

/// Small random instance with random lateral presence and padding.
pub fn small_instance(seed: u64) -> (Vec<Study>, HeadParams) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dim = 4 * rng.random_range(1..=2);
    let grid = GridShape::new(rng.random_range(1..=2), rng.random_range(1..=3));
    let n = rng.random_range(2..=4);
    let tokens = rng.random_range(1..=4);
    let studies = (0..n)
        .map(|i| {
            let active = rng.random_range(1..=tokens);
            let lateral = rng.random_bool(0.5);
            random_study(i, grid, tokens, active, dim, lateral, &mut rng)
        })
        .collect();
    let lambda = rng.random_range(1.0..20.0);
    let mut params = HeadParams::init(dim, lambda, 0.1, &mut rng);
    params.weights.agg_words.fc_bias = rng.random_range(-1.0..1.0);
    params.weights.agg_regions.fc_bias = rng.random_range(-1.0..1.0);
    (studies, params)
}

pub fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * 1f64.max(a.abs()).max(b.abs())
}

pub fn visible_regions(s: &PreparedStudy) -> Vec<Vec<f64>> {
    s.active_regions().map(|i| s.regions.row(i).to_vec()).collect()
}

pub fn visible_tokens(s: &PreparedStudy) -> Vec<Vec<f64>> {
    s.active_tokens().map(|j| s.tokens.row(j).to_vec()).collect()
}

/// Largest relative deviation between the batched forward and the naive
/// reference on one random instance.
pub fn oracle_deviation(seed: u64) -> f64 {
    use xmodal_core::{batch_forward, ExtLoss};
    let (studies, params) = small_instance(seed);
    let batch = prepare_all(&studies, PrepareOptions::default()).unwrap();
    let fwd = batch_forward(&batch, &params, ExtLoss::Summed).unwrap();
    let n = batch.len();
    let mut worst = 0.0f64;
    let mut dev = |a: f64, b: f64| {
        worst = worst.max((a - b).abs() / 1f64.max(a.abs()).max(b.abs()));
    };
    let mut sg = vec![vec![0.0; n]; n];
    let mut sa = vec![vec![0.0; n]; n];
    for k in 0..n {
        for j in 0..n {
            let r = naive::pair_scores(&visible_regions(&batch[k]), &visible_tokens(&batch[j]), &params);
            dev(fwd.global_scores.get(k, j), r.global);
            dev(fwd.word_scores.get(k, j), r.words);
            dev(fwd.region_scores.get(k, j), r.regions);
            sg[k][j] = r.global;
            sa[k][j] = r.words + r.regions;
        }
    }
    dev(fwd.components.global, naive::info_nce(&sg, params.tau));
    dev(fwd.components.external, naive::info_nce(&sa, params.tau));
    worst
}
