//! Aggregation of a local alignment set into one vector and a scalar score.

use serde::{Deserialize, Serialize};

use crate::align::{AlignmentSet, PairForward};
use crate::attention::{attend_backward, attend_mean_query, AttnForward};
use crate::error::{Error, Result};
use crate::numkit::dot;
use crate::params::AggParams;

#[derive(Debug, Clone, PartialEq)]
pub struct Aggregated {
    pub attn: AttnForward,
    pub score: f64,
}

impl Aggregated {
    /// `a_f`
    pub fn vector(&self) -> &[f64] {
        &self.attn.output
    }

    /// `q`
    pub fn weights(&self) -> &[f64] {
        &self.attn.weights
    }
}

pub fn aggregate(set: &[&[f64]], p: &AggParams) -> Result<Aggregated> {
    if set.is_empty() {
        return Err(Error::EmptyAlignmentSet);
    }
    let attn = attend_mean_query(&p.attn, set)?;
    let score = dot(&p.fc_weight, &attn.output) + p.fc_bias;
    Ok(Aggregated { attn, score })
}

/// Accumulates the gradient of `d_score · score` into `grads`.
pub fn aggregate_backward(set: &[&[f64]], p: &AggParams, fwd: &Aggregated, d_score: f64, grads: &mut AggParams) {
    if d_score == 0.0 {
        return;
    }
    for (g, a) in grads.fc_weight.iter_mut().zip(&fwd.attn.output) {
        *g += d_score * a;
    }
    grads.fc_bias += d_score;
    let d_out: Vec<f64> = p.fc_weight.iter().map(|w| d_score * w).collect();
    attend_backward(&p.attn, set, &fwd.attn, &d_out, &mut grads.attn);
}

/// Both directional aggregates of one pair.
#[derive(Debug, Clone, PartialEq)]
pub struct PairScore {
    pub words: Aggregated,
    pub regions: Aggregated,
}

impl PairScore {
    /// `A_agg`: word-side score plus region-side score.
    pub fn total(&self) -> f64 {
        self.words.score + self.regions.score
    }
}

fn aggregate_set(set: &AlignmentSet, p: &AggParams) -> Result<Aggregated> {
    aggregate(&set.rows(), p)
}

pub fn pair_score(pair: &PairForward, p_words: &AggParams, p_regions: &AggParams) -> Result<PairScore> {
    Ok(PairScore {
        words: aggregate_set(&pair.word_alignments, p_words)?,
        regions: aggregate_set(&pair.region_alignments, p_regions)?,
    })
}

/// How the local external loss consumes the two directional scores.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExtLoss {
    /// One contrastive term over the summed score.
    #[default]
    Summed,
    /// One contrastive term per direction, added.
    PerDirection,
}
