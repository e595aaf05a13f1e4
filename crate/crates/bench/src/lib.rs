//! Fixtures shared by the benchmarks.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use xmodal_core::align::{prepare_all, PrepareOptions, PreparedStudy};
use xmodal_core::synth::SynthConfig;
use xmodal_core::{generate, Corpus, GridShape, HeadParams};

/// Planted corpus at the acceptance scale: d = 32, 4×4 grid, 8 tokens.
pub fn corpus(num_studies: usize, seed: u64) -> Corpus {
    generate(&SynthConfig {
        num_studies,
        dim: 32,
        grid: GridShape::new(4, 4),
        tokens: 8,
        seed,
        ..Default::default()
    })
    .expect("valid synth config")
}

pub fn prepared(num_studies: usize, seed: u64) -> Vec<PreparedStudy> {
    prepare_all(&corpus(num_studies, seed).studies, PrepareOptions::default()).expect("prepare")
}

pub fn params(dim: usize, seed: u64) -> HeadParams {
    HeadParams::init(dim, 10.0, 0.1, &mut ChaCha8Rng::seed_from_u64(seed))
}
