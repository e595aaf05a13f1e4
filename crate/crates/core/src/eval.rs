//! Retrieval metrics, class precision and phrase-grounding CNR.
//!
//! Ranking ties always go to the lower index, so every metric is a pure
//! function of the score matrix.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::aggregate::pair_score;
use crate::align::{
    attend_text_to_regions, forward_local, global_align, pool_study, prepare, similarity, PrepareOptions, PreparedStudy,
};
use crate::dataio::Corpus;
use crate::error::{Error, Result};
use crate::loss::ScoreMatrix;
use crate::params::HeadParams;
use crate::posenc::{GridBox, GridShape};

/// Which pair score ranks retrieval candidates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RankScore {
    /// `A_agg`, the aggregated local score.
    #[default]
    Agg,
    /// `s_g`, the global alignment score.
    Global,
    Sum,
}

impl FromStr for RankScore {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "agg" => Ok(Self::Agg),
            "global" => Ok(Self::Global),
            "sum" => Ok(Self::Sum),
            other => Err(Error::Config(format!("rank_score: expected agg, global or sum, got {other:?}"))),
        }
    }
}

/// Image-by-report score matrix: entry `(k, j)` scores image `k` against report `j`.
pub fn score_matrix(studies: &[PreparedStudy], params: &HeadParams, rank: RankScore) -> Result<ScoreMatrix> {
    params.validate()?;
    let n = studies.len();
    if n == 0 {
        return Err(Error::EmptyInput);
    }
    let d = params.dim();
    if let Some(s) = studies.iter().find(|s| s.dim() != d) {
        return Err(Error::DimMismatch { expected: d, found: s.dim() });
    }
    let pooled = studies
        .par_iter()
        .map(|s| pool_study(s, params))
        .collect::<Result<Vec<_>>>()?;
    let w = &params.weights;
    let data = (0..n * n)
        .into_par_iter()
        .map(|idx| {
            let (k, j) = (idx / n, idx % n);
            let global = || global_align(&pooled[k].image.output, &pooled[j].text.output).map(|g| g.score);
            let agg = || -> Result<f64> {
                let pair = forward_local(&studies[k], &studies[j], params.lambda)?;
                Ok(pair_score(&pair, &w.agg_words, &w.agg_regions)?.total())
            };
            match rank {
                RankScore::Agg => agg(),
                RankScore::Global => global(),
                RankScore::Sum => Ok(agg()? + global()?),
            }
        })
        .collect::<Result<Vec<_>>>()?;
    ScoreMatrix::new(n, n, data)
}

/// 1-based rank of column `target` in `row`, descending, lower index first on ties.
pub fn rank_of(row: &[f64], target: usize) -> usize {
    let s = row[target];
    1 + row
        .iter()
        .enumerate()
        .filter(|&(j, &x)| x > s || (x == s && j < target))
        .count()
}

/// Percentage of rows whose diagonal entry ranks within the top `k`.
pub fn recall_at_k(s: &ScoreMatrix, k: usize) -> Result<f64> {
    if !s.is_square() {
        return Err(Error::shape(format!("recall needs a square matrix, got {}x{}", s.rows(), s.cols())));
    }
    let n = s.rows();
    if k == 0 || k > n {
        return Err(Error::KOutOfRange { k, n });
    }
    let hits = (0..n).filter(|&r| rank_of(s.row(r), r) <= k).count();
    Ok(100.0 * hits as f64 / n as f64)
}

/// Column-direction recall: queries are columns.
pub fn recall_at_k_columns(s: &ScoreMatrix, k: usize) -> Result<f64> {
    recall_at_k(&s.transpose(), k)
}

/// Item indices of `row` ordered best first, lower index first on ties.
pub fn ranking(row: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..row.len()).collect();
    idx.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
    idx
}

fn labels(l: &[Option<i32>]) -> Result<Vec<i32>> {
    l.iter().map(|x| x.ok_or(Error::MissingLabels)).collect()
}

/// Mean share (percent) of same-class items among each query's top `k`.
/// Rows of `s` are queries, columns are items.
pub fn precision_at_k(s: &ScoreMatrix, query_labels: &[Option<i32>], item_labels: &[Option<i32>], k: usize) -> Result<f64> {
    if query_labels.len() != s.rows() || item_labels.len() != s.cols() {
        return Err(Error::shape(format!(
            "{} query and {} item labels for a {}x{} matrix",
            query_labels.len(),
            item_labels.len(),
            s.rows(),
            s.cols()
        )));
    }
    let q = labels(query_labels)?;
    let items = labels(item_labels)?;
    if s.rows() == 0 {
        return Err(Error::EmptyInput);
    }
    if k == 0 || k > s.cols() {
        return Err(Error::KOutOfRange { k, n: s.cols() });
    }
    let total: f64 = (0..s.rows())
        .map(|r| {
            let same = ranking(s.row(r))[..k].iter().filter(|&&j| items[j] == q[r]).count();
            same as f64 / k as f64
        })
        .sum();
    Ok(100.0 * total / s.rows() as f64)
}

/// A value per cell of a grid, row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridMap {
    pub grid: GridShape,
    pub values: Vec<f64>,
}

impl GridMap {
    pub fn new(grid: GridShape, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.cells() {
            return Err(Error::shape(format!("{} values for {} cells", values.len(), grid.cells())));
        }
        Ok(Self { grid, values })
    }

    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.values[self.grid.index(x, y)]
    }

    pub fn sum(&self) -> f64 {
        self.values.iter().sum()
    }

    /// One grid row per line.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for row in self.values.chunks(self.grid.width) {
            let line: Vec<String> = row.iter().map(|v| v.to_string()).collect();
            let _ = writeln!(out, "{}", line.join(","));
        }
        out
    }

    /// Binary 8-bit PGM, min-max scaled; a constant map is all zeros.
    pub fn to_pgm(&self) -> Vec<u8> {
        let lo = self.values.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let span = hi - lo;
        let mut out = format!("P5\n{} {}\n255\n", self.grid.width, self.grid.height).into_bytes();
        out.extend(self.values.iter().map(|&v| {
            if span > 0.0 {
                ((v - lo) / span * 255.0).round() as u8
            } else {
                0
            }
        }));
        out
    }
}

/// Source of the phrase map.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MapKind {
    /// Word-to-region attention weights.
    #[default]
    Attention,
    /// Raw cosine similarity, shifted to be non-negative.
    Cosine,
}

/// Map over the frontal grid for a phrase, summing to 1. Lateral regions
/// take part in the softmax but are left out of the map.
pub fn phrase_attention(study: &PreparedStudy, phrase: &[usize], params: &HeadParams, kind: MapKind) -> Result<GridMap> {
    if phrase.is_empty() {
        return Err(Error::EmptyPhrase);
    }
    for &j in phrase {
        if j >= study.tokens.rows() || !study.token_mask[j] {
            return Err(Error::shape(format!("phrase token {j} is out of range or masked")));
        }
    }
    let grid = study.grid;
    let frontal = grid.cells();
    if frontal > study.regions.rows() {
        return Err(Error::shape(format!("{frontal} grid cells but {} regions", study.regions.rows())));
    }
    let sim = similarity(&study.regions, &study.tokens, &study.region_mask, &study.token_mask)?;
    let mut values = vec![0.0; frontal];
    match kind {
        MapKind::Attention => {
            let att = attend_text_to_regions(&study.regions, &sim, params.lambda)?;
            for &j in phrase {
                for (i, v) in values.iter_mut().enumerate() {
                    *v += att.weights.row(j)[i];
                }
            }
        }
        MapKind::Cosine => {
            for &j in phrase {
                for (i, v) in values.iter_mut().enumerate() {
                    *v += sim.get(i, j);
                }
            }
            let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
            for v in &mut values {
                *v -= lo;
            }
        }
    }
    let total: f64 = values.iter().sum();
    if total > 0.0 {
        for v in &mut values {
            *v /= total;
        }
    } else if kind == MapKind::Cosine {
        values.fill(1.0 / frontal as f64);
    } else {
        return Err(Error::NoVisibleRegions);
    }
    GridMap::new(grid, values)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Cnr {
    pub value: f64,
    /// The combined variance was below the floor and ε was added.
    pub flagged: bool,
}

pub const CNR_EPS: f64 = 1e-18;

fn mean_var(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let mu = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n;
    (mu, var)
}

/// `|μ_in − μ_out| / √(σ²_in + σ²_out)` with population variances.
pub fn cnr(map: &GridMap, bbox: &GridBox) -> Result<Cnr> {
    if !bbox.within(map.grid) {
        return Err(Error::shape("box outside the grid"));
    }
    if bbox.is_empty() {
        return Err(Error::shape("empty box"));
    }
    let mut inside = Vec::new();
    let mut outside = Vec::new();
    for (i, &v) in map.values.iter().enumerate() {
        let (x, y) = map.grid.position(i);
        if bbox.contains(x, y) {
            inside.push(v);
        } else {
            outside.push(v);
        }
    }
    if outside.is_empty() {
        return Err(Error::EmptyExterior);
    }
    let (mi, vi) = mean_var(&inside);
    let (mo, vo) = mean_var(&outside);
    let mut denom = vi + vo;
    let flagged = denom < CNR_EPS;
    if flagged {
        denom += CNR_EPS;
    }
    Ok(Cnr {
        value: (mi - mo).abs() / denom.sqrt(),
        flagged,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RecallEntry {
    pub k: usize,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Retrieval {
    pub image_to_text: Vec<RecallEntry>,
    pub text_to_image: Vec<RecallEntry>,
    pub r_sum: f64,
}

impl Retrieval {
    pub fn image_to_text_at(&self, k: usize) -> Option<f64> {
        self.image_to_text.iter().find(|e| e.k == k).map(|e| e.value)
    }

    pub fn text_to_image_at(&self, k: usize) -> Option<f64> {
        self.text_to_image.iter().find(|e| e.k == k).map(|e| e.value)
    }
}

/// Recall in both directions; ranks above the candidate count are clamped.
pub fn retrieval_from_scores(s: &ScoreMatrix, ks: &[usize]) -> Result<Retrieval> {
    let n = s.rows();
    let mut i2t = Vec::with_capacity(ks.len());
    let mut t2i = Vec::with_capacity(ks.len());
    let st = s.transpose();
    for &k in ks {
        let kk = k.min(n);
        i2t.push(RecallEntry { k, value: recall_at_k(s, kk)? });
        t2i.push(RecallEntry { k, value: recall_at_k(&st, kk)? });
    }
    let r_sum = i2t.iter().chain(&t2i).map(|e| e.value).sum();
    Ok(Retrieval {
        image_to_text: i2t,
        text_to_image: t2i,
        r_sum,
    })
}

pub fn retrieval(studies: &[PreparedStudy], params: &HeadParams, rank: RankScore, ks: &[usize]) -> Result<Retrieval> {
    retrieval_from_scores(&score_matrix(studies, params, rank)?, ks)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyGrounding {
    pub id: String,
    pub label: Option<i32>,
    /// One CNR per grounding record.
    pub cnr: Vec<f64>,
    pub flagged: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundingSummary {
    pub boxes: usize,
    pub mean: f64,
    /// Keyed by study label; unlabeled studies are left out.
    pub per_class: BTreeMap<i32, f64>,
    pub flagged: usize,
}

/// CNR of every grounding record, with the phrase map for each.
pub fn grounding(
    corpus: &Corpus,
    params: &HeadParams,
    opts: PrepareOptions,
    kind: MapKind,
) -> Result<Vec<(StudyGrounding, Vec<GridMap>)>> {
    corpus
        .studies
        .par_iter()
        .filter(|s| !s.grounding.is_empty())
        .map(|s| {
            let p = prepare(s, opts)?;
            let mut out = StudyGrounding {
                id: s.id.clone(),
                label: s.label,
                cnr: Vec::with_capacity(s.grounding.len()),
                flagged: 0,
            };
            let mut maps = Vec::with_capacity(s.grounding.len());
            for g in &s.grounding {
                let map = phrase_attention(&p, &g.tokens, params, kind)?;
                let c = cnr(&map, &g.bbox)?;
                out.cnr.push(c.value);
                out.flagged += usize::from(c.flagged);
                maps.push(map);
            }
            Ok((out, maps))
        })
        .collect()
}

pub fn summarize_grounding(studies: &[StudyGrounding]) -> Option<GroundingSummary> {
    let boxes: usize = studies.iter().map(|s| s.cnr.len()).sum();
    if boxes == 0 {
        return None;
    }
    let total: f64 = studies.iter().flat_map(|s| &s.cnr).sum();
    let mut per_class: BTreeMap<i32, (f64, usize)> = BTreeMap::new();
    for s in studies {
        if let Some(l) = s.label {
            let e = per_class.entry(l).or_default();
            e.0 += s.cnr.iter().sum::<f64>();
            e.1 += s.cnr.len();
        }
    }
    Some(GroundingSummary {
        boxes,
        mean: total / boxes as f64,
        per_class: per_class.into_iter().map(|(k, (s, n))| (k, s / n as f64)).collect(),
        flagged: studies.iter().map(|s| s.flagged).sum(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalOptions {
    pub rank_score: RankScore,
    pub ks: Vec<usize>,
    /// Precision ranks; those above the corpus size are skipped.
    pub precision_ks: Vec<usize>,
    pub prepare: PrepareOptions,
    pub map_kind: MapKind,
    pub grounding: bool,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            rank_score: RankScore::Agg,
            ks: vec![1, 5, 10],
            precision_ks: vec![5, 10, 100],
            prepare: PrepareOptions::default(),
            map_kind: MapKind::Attention,
            grounding: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportConfig {
    pub rank_score: RankScore,
    pub ks: Vec<usize>,
    pub precision_ks: Vec<usize>,
    pub lambda: f64,
    pub tau: f64,
    pub prepare: PrepareOptions,
    pub map_kind: MapKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrecisionEntry {
    pub k: usize,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub config: ReportConfig,
    pub studies: usize,
    pub retrieval: Retrieval,
    /// Report queries against images, by class label.
    pub precision: Option<Vec<PrecisionEntry>>,
    pub grounding: Option<GroundingSummary>,
}

impl MetricsReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

pub fn evaluate(corpus: &Corpus, params: &HeadParams, opts: &EvalOptions) -> Result<MetricsReport> {
    if corpus.studies.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    if corpus.dim != params.dim() {
        return Err(Error::DimMismatch {
            expected: params.dim(),
            found: corpus.dim,
        });
    }
    let prepared = crate::align::prepare_all(&corpus.studies, opts.prepare)?;
    let s = score_matrix(&prepared, params, opts.rank_score)?;
    let retrieval = retrieval_from_scores(&s, &opts.ks)?;
    let labels: Vec<Option<i32>> = corpus.studies.iter().map(|s| s.label).collect();
    let precision = if labels.iter().all(Option::is_some) && !opts.precision_ks.is_empty() {
        let st = s.transpose();
        let entries = opts
            .precision_ks
            .iter()
            .filter(|&&k| k >= 1 && k <= st.cols())
            .map(|&k| Ok(PrecisionEntry { k, value: precision_at_k(&st, &labels, &labels, k)? }))
            .collect::<Result<Vec<_>>>()?;
        Some(entries)
    } else {
        None
    };
    let grounding = if opts.grounding {
        let per_study: Vec<StudyGrounding> = grounding(corpus, params, opts.prepare, opts.map_kind)?
            .into_iter()
            .map(|(g, _)| g)
            .collect();
        summarize_grounding(&per_study)
    } else {
        None
    };
    Ok(MetricsReport {
        config: ReportConfig {
            rank_score: opts.rank_score,
            ks: opts.ks.clone(),
            precision_ks: opts.precision_ks.clone(),
            lambda: params.lambda,
            tau: params.tau,
            prepare: opts.prepare,
            map_kind: opts.map_kind,
        },
        studies: corpus.studies.len(),
        retrieval,
        precision,
        grounding,
    })
}
