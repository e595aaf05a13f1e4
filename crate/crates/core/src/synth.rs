//! Synthetic corpora with planted word ↔ region correspondences.
//!
//! A "world" of orthonormal latent directions is drawn once per
//! `world_seed`: one direction per concept plus a few background directions.
//! Both modalities use the same direction for a concept, so at zero noise a
//! concept token has cosine 1 with its planted regions and 0 with everything
//! else. Region `(x, y)` of every view carries background direction
//! `(y·width + x) mod n_background` unless a concept box covers it.
//!
//! Features are `feature_scale · (direction + noise_sigma · N(0, I))`, rounded
//! to `f32` so they survive the container round trip unchanged.

use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dataio::{Corpus, Grounding, Split, Study, DEFAULT_TOKEN_CAP};
use crate::error::{Error, Result};
use crate::numkit::{dot, FeatureMatrix};
use crate::posenc::{GridBox, GridShape};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub num_studies: usize,
    pub dim: usize,
    pub grid: GridShape,
    /// Token rows per study (`N_w`).
    pub tokens: usize,
    pub vocab_size: usize,
    pub concepts_per_study: usize,
    pub noise_sigma: f64,
    /// Share of studies that get a lateral view.
    pub lateral_fraction: f64,
    /// Share of the vocabulary that only ever appears in lateral views.
    pub lateral_only_fraction: f64,
    pub background_directions: usize,
    pub feature_scale: f64,
    /// Largest side of a planted box.
    pub max_box_side: usize,
    /// Up to this many trailing token rows are padding (masked).
    pub max_padding: usize,
    /// Labels are `first concept mod num_classes`; 0 disables labels.
    pub num_classes: usize,
    pub split: Split,
    pub seed: u64,
    /// Seed of the latent directions; defaults to `seed`. Share it between
    /// splits so train and val describe the same world.
    pub world_seed: Option<u64>,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            num_studies: 100,
            dim: 32,
            grid: GridShape::new(4, 4),
            tokens: 8,
            vocab_size: 28,
            concepts_per_study: 6,
            noise_sigma: 0.05,
            lateral_fraction: 0.5,
            lateral_only_fraction: 0.0,
            background_directions: 4,
            feature_scale: 8.0,
            max_box_side: 2,
            max_padding: 1,
            num_classes: 5,
            split: Split::Train,
            seed: 0,
            world_seed: None,
        }
    }
}

impl SynthConfig {
    pub fn lateral_only_concepts(&self) -> usize {
        (self.vocab_size as f64 * self.lateral_only_fraction).round() as usize
    }

    pub fn frontal_concepts(&self) -> usize {
        self.vocab_size - self.lateral_only_concepts()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, msg: String| Err(Error::Config(format!("{field}: {msg}")));
        if self.num_studies == 0 {
            return bad("num_studies", "must be at least 1".into());
        }
        if self.dim == 0 || !self.dim.is_multiple_of(4) {
            return bad("dim", format!("must be a positive multiple of 4, got {}", self.dim));
        }
        if self.grid.cells() == 0 {
            return bad("grid", "must have at least one cell".into());
        }
        if self.tokens == 0 || self.tokens > DEFAULT_TOKEN_CAP {
            return bad("tokens", format!("must be in 1..={DEFAULT_TOKEN_CAP}, got {}", self.tokens));
        }
        if self.concepts_per_study > self.vocab_size {
            return bad("concepts_per_study", format!("{} exceeds vocab_size {}", self.concepts_per_study, self.vocab_size));
        }
        if self.concepts_per_study > self.tokens {
            return bad("concepts_per_study", format!("{} exceeds tokens {}", self.concepts_per_study, self.tokens));
        }
        if self.background_directions == 0 {
            return bad("background_directions", "must be at least 1".into());
        }
        if self.vocab_size + self.background_directions > self.dim {
            return bad(
                "vocab_size",
                format!("{} concepts + {} background directions exceed dim {}", self.vocab_size, self.background_directions, self.dim),
            );
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return bad("noise_sigma", format!("must be non-negative, got {}", self.noise_sigma));
        }
        if !(0.0..=1.0).contains(&self.lateral_fraction) {
            return bad("lateral_fraction", format!("must be in [0, 1], got {}", self.lateral_fraction));
        }
        if !(0.0..=1.0).contains(&self.lateral_only_fraction) {
            return bad("lateral_only_fraction", format!("must be in [0, 1], got {}", self.lateral_only_fraction));
        }
        if self.lateral_only_concepts() > 0 && self.lateral_fraction == 0.0 {
            return bad("lateral_only_fraction", "lateral-only concepts need lateral_fraction > 0".into());
        }
        if self.concepts_per_study > self.frontal_concepts() {
            return bad(
                "concepts_per_study",
                format!("{} exceeds the {} concepts usable without a lateral view", self.concepts_per_study, self.frontal_concepts()),
            );
        }
        if !(self.feature_scale > 0.0 && self.feature_scale.is_finite()) {
            return bad("feature_scale", format!("must be positive, got {}", self.feature_scale));
        }
        if self.max_box_side == 0 {
            return bad("max_box_side", "must be at least 1".into());
        }
        Ok(())
    }
}

/// Whether study `index` gets a lateral view: exactly `floor(n · fraction)`
/// of the first `n` studies do.
pub fn has_lateral(index: usize, fraction: f64) -> bool {
    ((index + 1) as f64 * fraction).floor() > (index as f64 * fraction).floor()
}

/// Orthonormal latent directions.
#[derive(Debug, Clone)]
pub struct World {
    pub concepts: Vec<Vec<f64>>,
    pub background: Vec<Vec<f64>>,
}

fn gram_schmidt(mut vs: Vec<Vec<f64>>) -> Vec<Vec<f64>> {
    for i in 0..vs.len() {
        for j in 0..i {
            let (head, tail) = vs.split_at_mut(i);
            let proj = dot(&tail[0], &head[j]);
            for (x, y) in tail[0].iter_mut().zip(&head[j]) {
                *x -= proj * y;
            }
        }
        let n = dot(&vs[i], &vs[i]).sqrt();
        for x in &mut vs[i] {
            *x /= n;
        }
    }
    vs
}

impl World {
    pub fn new(cfg: &SynthConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.world_seed.unwrap_or(cfg.seed) ^ 0x5eed_0f1a_7e47);
        let total = cfg.vocab_size + cfg.background_directions;
        let raw: Vec<Vec<f64>> = (0..total)
            .map(|_| (0..cfg.dim).map(|_| StandardNormal.sample(&mut rng)).collect())
            .collect();
        let mut all = gram_schmidt(raw);
        let background = all.split_off(cfg.vocab_size);
        Self { concepts: all, background }
    }
}

fn place_boxes<R: Rng>(count: usize, grid: GridShape, max_side: usize, rng: &mut R) -> Result<Vec<GridBox>> {
    // Whole-layout restarts: greedy placement can paint itself into a corner.
    for _ in 0..100 {
        let mut boxes: Vec<GridBox> = Vec::with_capacity(count);
        for _ in 0..count {
            let placed = (0..50).find_map(|_| {
                let h = rng.random_range(1..=max_side.min(grid.height));
                let w = rng.random_range(1..=max_side.min(grid.width));
                let y0 = rng.random_range(0..=grid.height - h);
                let x0 = rng.random_range(0..=grid.width - w);
                let b = GridBox::new(x0, y0, x0 + w, y0 + h);
                boxes.iter().all(|o| !o.overlaps(&b)).then_some(b)
            });
            match placed {
                Some(b) => boxes.push(b),
                None => break,
            }
        }
        if boxes.len() == count {
            return Ok(boxes);
        }
    }
    Err(Error::GridTooSmall(format!(
        "cannot fit {count} disjoint boxes in a {}x{} grid",
        grid.height, grid.width
    )))
}

struct Featurizer<'a> {
    cfg: &'a SynthConfig,
}

impl Featurizer<'_> {
    fn row<R: Rng>(&self, direction: &[f64], rng: &mut R) -> Vec<f64> {
        direction
            .iter()
            .map(|&x| {
                let noise: f64 = if self.cfg.noise_sigma > 0.0 {
                    let z: f64 = StandardNormal.sample(rng);
                    self.cfg.noise_sigma * z
                } else {
                    0.0
                };
                (self.cfg.feature_scale * (x + noise)) as f32 as f64
            })
            .collect()
    }
}

fn view<R: Rng>(world: &World, cfg: &SynthConfig, concepts: &[usize], rng: &mut R) -> Result<(FeatureMatrix, Vec<GridBox>)> {
    let grid = cfg.grid;
    let boxes = place_boxes(concepts.len(), grid, cfg.max_box_side, rng)?;
    let f = Featurizer { cfg };
    let mut rows = Vec::with_capacity(grid.cells());
    for idx in 0..grid.cells() {
        let (x, y) = grid.position(idx);
        let dir = boxes
            .iter()
            .position(|b| b.contains(x, y))
            .map(|c| &world.concepts[concepts[c]])
            .unwrap_or(&world.background[idx % world.background.len()]);
        rows.push(f.row(dir, rng));
    }
    Ok((FeatureMatrix::from_rows(&rows)?, boxes))
}

fn study<R: Rng>(world: &World, cfg: &SynthConfig, index: usize, rng: &mut R) -> Result<Study> {
    let lateral = has_lateral(index, cfg.lateral_fraction);
    let pool = if lateral { cfg.vocab_size } else { cfg.frontal_concepts() };
    let mut concepts: Vec<usize> = sample(rng, pool, cfg.concepts_per_study).into_vec();
    let frontal_concepts: Vec<usize> = concepts.iter().copied().filter(|&c| c < cfg.frontal_concepts()).collect();
    let lateral_concepts: Vec<usize> = concepts.iter().copied().filter(|&c| c >= cfg.frontal_concepts()).collect();

    let (frontal, frontal_boxes) = view(world, cfg, &frontal_concepts, rng)?;
    let lateral_view = if lateral {
        Some(view(world, cfg, &lateral_concepts, rng)?.0)
    } else {
        None
    };

    let padding = rng.random_range(0..=cfg.max_padding.min(cfg.tokens - cfg.concepts_per_study));
    let active = cfg.tokens - padding;
    let mut slots: Vec<usize> = (0..active).collect();
    slots.shuffle(rng);
    let f = Featurizer { cfg };
    let mut token_rows = vec![vec![0.0; cfg.dim]; cfg.tokens];
    let mut concept_slot = vec![0; cfg.concepts_per_study];
    for (c, &slot) in concepts.iter().zip(&slots) {
        token_rows[slot] = f.row(&world.concepts[*c], rng);
    }
    for (k, &slot) in slots.iter().enumerate().take(cfg.concepts_per_study) {
        concept_slot[k] = slot;
    }
    for &slot in &slots[cfg.concepts_per_study..] {
        let b = rng.random_range(0..world.background.len());
        token_rows[slot] = f.row(&world.background[b], rng);
    }
    let token_mask: Vec<bool> = (0..cfg.tokens).map(|j| j < active).collect();

    let grounding = frontal_concepts
        .iter()
        .zip(&frontal_boxes)
        .map(|(c, b)| {
            let k = concepts.iter().position(|x| x == c).unwrap();
            Grounding {
                bbox: *b,
                tokens: vec![concept_slot[k]],
            }
        })
        .collect();
    let label = (cfg.num_classes > 0).then(|| (concepts[0] % cfg.num_classes) as i32);
    concepts.clear();
    let split = match cfg.split {
        Split::Train => "train",
        Split::Val => "val",
        Split::Test => "test",
    };
    Ok(Study {
        id: format!("{split}-{index:05}"),
        frontal,
        lateral: lateral_view,
        tokens: FeatureMatrix::from_rows(&token_rows)?,
        token_mask,
        grid: cfg.grid,
        label,
        grounding,
    })
}

pub fn generate(cfg: &SynthConfig) -> Result<Corpus> {
    cfg.validate()?;
    let world = World::new(cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let studies = (0..cfg.num_studies)
        .map(|i| study(&world, cfg, i, &mut rng))
        .collect::<Result<Vec<_>>>()?;
    let corpus = Corpus {
        studies,
        dim: cfg.dim,
        grid: cfg.grid,
        split: cfg.split,
    };
    corpus.validate()?;
    Ok(corpus)
}
