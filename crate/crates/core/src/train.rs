//! Mini-batch Adam training with R_sum early stopping and checkpoints.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::aggregate::ExtLoss;
use crate::align::{prepare_all, PrepareOptions, PreparedStudy, ViewMode};
use crate::dataio::Corpus;
use crate::error::{Error, Result};
use crate::eval::{retrieval, RankScore, Retrieval};
use crate::grad::backward_from;
use crate::loss::{batch_forward, LossComponents};
use crate::params::{HeadParams, HeadWeights, DEFAULT_LAMBDA, DEFAULT_TAU};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub tau: f64,
    pub lambda: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub eval_ks: Vec<usize>,
    pub seed: u64,
    pub rank_score: RankScore,
    pub ext_loss: ExtLoss,
    pub views: ViewMode,
    pub positional: bool,
    /// Abort when a batch has a larger share of degenerate local alignments.
    pub max_degenerate_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 5e-5,
            weight_decay: 1e-6,
            batch_size: 48,
            tau: DEFAULT_TAU,
            lambda: DEFAULT_LAMBDA,
            max_epochs: 50,
            patience: 5,
            eval_ks: vec![1, 5, 10],
            seed: 0,
            rank_score: RankScore::Agg,
            ext_loss: ExtLoss::Summed,
            views: ViewMode::Both,
            positional: true,
            max_degenerate_fraction: 0.01,
        }
    }
}

impl TrainConfig {
    pub fn prepare_options(&self) -> PrepareOptions {
        PrepareOptions {
            views: self.views,
            positional: self.positional,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, msg: String| Err(Error::Config(format!("{field}: {msg}")));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr", format!("must be positive, got {}", self.lr));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad("weight_decay", format!("must be non-negative, got {}", self.weight_decay));
        }
        if self.batch_size == 0 {
            return bad("batch_size", "must be at least 1".into());
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return bad("tau", format!("must be positive, got {}", self.tau));
        }
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return bad("lambda", format!("must be positive, got {}", self.lambda));
        }
        if self.max_epochs == 0 {
            return bad("max_epochs", "must be at least 1".into());
        }
        if self.eval_ks.is_empty() || self.eval_ks.contains(&0) {
            return bad("eval_ks", "must be a nonempty list of positive ranks".into());
        }
        if !(0.0..=1.0).contains(&self.max_degenerate_fraction) {
            return bad("max_degenerate_fraction", format!("must be in [0, 1], got {}", self.max_degenerate_fraction));
        }
        Ok(())
    }
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }
}

/// One Adam update with decoupled weight decay (`p ← p − lr·wd·p` first).
/// On a non-finite result nothing is modified.
pub fn adam_step(params: &mut [f64], grads: &[f64], state: &mut AdamState, lr: f64, weight_decay: f64) -> Result<()> {
    if grads.len() != params.len() || state.m.len() != params.len() || state.v.len() != params.len() {
        return Err(Error::shape(format!(
            "adam: {} params, {} grads, state of {}",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    let t = state.t + 1;
    let c1 = 1.0 - ADAM_BETA1.powi(t as i32);
    let c2 = 1.0 - ADAM_BETA2.powi(t as i32);
    let mut p = params.to_vec();
    let mut m = state.m.clone();
    let mut v = state.v.clone();
    for i in 0..p.len() {
        let g = grads[i];
        m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * g;
        v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * g * g;
        p[i] -= lr * weight_decay * p[i];
        p[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + ADAM_EPS);
        if !p[i].is_finite() {
            return Err(Error::NonFinite(format!("adam update of parameter {i}")));
        }
    }
    params.copy_from_slice(&p);
    state.m = m;
    state.v = v;
    state.t = t;
    Ok(())
}

/// Position of the shuffling generator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"LMTC";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub weights: HeadWeights,
    pub lambda: f64,
    pub tau: f64,
    pub epoch: usize,
    pub r_sum: f64,
    pub rng: RngState,
}

impl Checkpoint {
    pub fn params(&self) -> HeadParams {
        HeadParams {
            weights: self.weights.clone(),
            lambda: self.lambda,
            tau: self.tau,
        }
    }

    pub fn dim(&self) -> usize {
        self.weights.dim()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let flat = self.weights.to_flat();
        let mut out = Vec::with_capacity(96 + 8 * flat.len());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.dim() as u32).to_le_bytes());
        out.extend_from_slice(&self.lambda.to_le_bytes());
        out.extend_from_slice(&self.tau.to_le_bytes());
        out.extend_from_slice(&(self.epoch as u32).to_le_bytes());
        out.extend_from_slice(&self.r_sum.to_le_bytes());
        out.extend_from_slice(&self.rng.seed);
        out.extend_from_slice(&self.rng.stream.to_le_bytes());
        out.extend_from_slice(&self.rng.word_pos.to_le_bytes());
        out.extend_from_slice(&(flat.len() as u64).to_le_bytes());
        for x in &flat {
            out.extend_from_slice(&x.to_le_bytes());
        }
        let digest = sha256_digest(&out);
        out.extend_from_slice(&digest);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Cursor { bytes, pos: 0 };
        if r.take(4)? != CHECKPOINT_MAGIC {
            return Err(Error::BadMagic);
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::VersionMismatch {
                found: version,
                expected: CHECKPOINT_VERSION,
            });
        }
        let dim = r.u32()? as usize;
        let lambda = r.f64()?;
        let tau = r.f64()?;
        let epoch = r.u32()? as usize;
        let r_sum = r.f64()?;
        let seed: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
        let stream = u64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes"));
        let word_pos = u128::from_le_bytes(r.take(16)?.try_into().expect("16 bytes"));
        let n = u64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes")) as usize;
        let expected = HeadWeights::zeros(dim).len();
        if n != expected {
            return Err(Error::Malformed(format!("{n} parameters for dim {dim}, expected {expected}")));
        }
        if bytes.len() - r.pos < n.saturating_mul(8).saturating_add(32) {
            return Err(Error::Truncated);
        }
        let flat = (0..n).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
        let body = r.pos;
        let stored = r.take(32)?;
        if r.pos != bytes.len() {
            return Err(Error::Malformed(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        let found = sha256_digest(&bytes[..body]);
        if stored != found {
            return Err(Error::ChecksumMismatch {
                expected: hex(stored),
                found: hex(&found),
            });
        }
        Ok(Self {
            weights: HeadWeights::from_flat(dim, &flat)?,
            lambda,
            tau,
            epoch,
            r_sum,
            rng: RngState { seed, stream, word_pos },
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

fn sha256_digest(bytes: &[u8]) -> Vec<u8> {
    use sha2::{Digest, Sha256};
    Sha256::digest(bytes).to_vec()
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().fold(String::new(), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).ok_or(Error::Truncated)?;
        let s = self.bytes.get(self.pos..end).ok_or(Error::Truncated)?;
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean loss components over the epoch's batches.
    pub loss: LossComponents,
    pub retrieval: Retrieval,
}

pub const HISTORY_HEADER: &str = "epoch,L_g,L_ext,L_int,R_sum";

pub fn history_csv(history: &[EpochRecord]) -> String {
    let mut out = format!("{HISTORY_HEADER}\n");
    for r in history {
        let _ = writeln!(
            out,
            "{},{},{},{},{}",
            r.epoch, r.loss.global, r.loss.external, r.loss.internal, r.retrieval.r_sum
        );
    }
    out
}

#[derive(Debug, Clone)]
pub struct FitOutcome {
    /// Highest-R_sum checkpoint; earlier epoch wins ties.
    pub best: Checkpoint,
    pub history: Vec<EpochRecord>,
}

/// Splits a shuffled order into batches, dropping a trailing batch of one.
pub fn batches(order: &[usize], batch_size: usize) -> Vec<&[usize]> {
    let mut out: Vec<&[usize]> = order.chunks(batch_size).collect();
    if out.len() > 1 && out.last().is_some_and(|b| b.len() == 1) {
        out.pop();
    }
    out
}

fn check_compatible(train: &Corpus, val: &Corpus) -> Result<()> {
    if train.studies.is_empty() || val.studies.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    if train.dim != val.dim {
        return Err(Error::DimMismatch {
            expected: train.dim,
            found: val.dim,
        });
    }
    if train.grid != val.grid {
        return Err(Error::shape(format!(
            "train grid {}x{} but val grid {}x{}",
            train.grid.height, train.grid.width, val.grid.height, val.grid.width
        )));
    }
    Ok(())
}

/// Initial head for a config: seeded uniform fan-in init.
pub fn init_params(dim: usize, cfg: &TrainConfig) -> (HeadParams, ChaCha8Rng) {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let params = HeadParams::init(dim, cfg.lambda, cfg.tau, &mut rng);
    (params, rng)
}

/// Trains from the config's seeded initialization.
pub fn fit(train: &Corpus, val: &Corpus, cfg: &TrainConfig) -> Result<FitOutcome> {
    cfg.validate()?;
    check_compatible(train, val)?;
    let opts = cfg.prepare_options();
    let train_set = prepare_all(&train.studies, opts)?;
    let val_set = prepare_all(&val.studies, opts)?;
    let (params, rng) = init_params(train.dim, cfg);
    fit_prepared(&train_set, &val_set, params, rng, cfg)
}

pub fn fit_prepared(
    train: &[PreparedStudy],
    val: &[PreparedStudy],
    mut params: HeadParams,
    mut rng: ChaCha8Rng,
    cfg: &TrainConfig,
) -> Result<FitOutcome> {
    let mut flat = params.weights.to_flat();
    let mut adam = AdamState::new(flat.len());
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut history = Vec::new();
    let mut best: Option<Checkpoint> = None;
    let mut stale = 0;
    let diverged = |epoch: usize, best: &Option<Checkpoint>| Error::Diverged {
        epoch,
        last_good: best.clone().map(Box::new),
    };

    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut rng);
        let mut sum = [0.0; 3];
        let mut count = 0usize;
        for idx in batches(&order, cfg.batch_size) {
            let batch: Vec<PreparedStudy> = idx.iter().map(|&i| train[i].clone()).collect();
            let fwd = match batch_forward(&batch, &params, cfg.ext_loss) {
                Ok(f) => f,
                // Overflowed weights surface as non-finite or zero-norm intermediates.
                Err(Error::NonFinite(_) | Error::DegenerateVector) => return Err(diverged(epoch, &best)),
                Err(e) => return Err(e),
            };
            let frac = fwd.degenerate_fraction();
            if frac > cfg.max_degenerate_fraction {
                return Err(Error::TooManyDegenerate {
                    fraction: frac,
                    limit: cfg.max_degenerate_fraction,
                });
            }
            if !fwd.components.total.is_finite() {
                return Err(diverged(epoch, &best));
            }
            let grads = match backward_from(&batch, &params, &fwd) {
                Ok(g) => g,
                Err(Error::NonFiniteGradient { .. }) => return Err(diverged(epoch, &best)),
                Err(e) => return Err(e),
            };
            if adam_step(&mut flat, &grads.to_flat(), &mut adam, cfg.lr, cfg.weight_decay).is_err() {
                return Err(diverged(epoch, &best));
            }
            params.weights.load_flat(&flat)?;
            let c = fwd.components;
            sum[0] += c.global;
            sum[1] += c.external;
            sum[2] += c.internal;
            count += 1;
        }
        let mean = |x: f64| if count == 0 { 0.0 } else { x / count as f64 };
        let loss = LossComponents {
            global: mean(sum[0]),
            external: mean(sum[1]),
            internal: mean(sum[2]),
            total: mean(sum[0] + sum[1] + sum[2]),
        };
        let retrieval = retrieval(val, &params, cfg.rank_score, &cfg.eval_ks)?;
        log::info!(
            "epoch {epoch}: L_g={:.4} L_ext={:.4} L_int={:.4} R_sum={:.2}",
            loss.global,
            loss.external,
            loss.internal,
            retrieval.r_sum
        );
        let r_sum = retrieval.r_sum;
        history.push(EpochRecord { epoch, loss, retrieval });
        if best.as_ref().is_none_or(|b| r_sum > b.r_sum) {
            best = Some(Checkpoint {
                weights: params.weights.clone(),
                lambda: params.lambda,
                tau: params.tau,
                epoch,
                r_sum,
                rng: RngState::capture(&rng),
            });
            stale = 0;
        } else {
            stale += 1;
        }
        if stale >= cfg.patience {
            break;
        }
    }
    Ok(FitOutcome {
        best: best.expect("max_epochs >= 1"),
        history,
    })
}
