//! Cross-modal alignment head for paired image regions and report tokens.
//!
//! Frozen region and token features go in; a small trainable head produces
//! global and aggregated local pair scores, trained contrastively. The crate
//! also covers a binary corpus container, a synthetic corpus generator with
//! planted correspondences, analytic gradients with a finite-difference
//! checker, and retrieval and grounding metrics.

// `!(x > 0.0)` checks reject NaN on purpose; index loops follow the math.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod aggregate;
pub mod align;
pub mod attention;
pub mod dataio;
pub mod error;
pub mod eval;
pub mod grad;
pub mod loss;
pub mod numkit;
pub mod params;
pub mod posenc;
pub mod synth;
pub mod train;

pub use aggregate::{aggregate, pair_score, Aggregated, ExtLoss, PairScore};
pub use align::{prepare, prepare_all, PrepareOptions, PreparedStudy, ViewMode};
pub use dataio::{read_corpus, read_manifest, write_corpus, Corpus, Grounding, Manifest, Split, Study};
pub use error::{Error, Result};
pub use eval::{evaluate, EvalOptions, GridMap, MapKind, MetricsReport, RankScore, Retrieval};
pub use grad::{backward, fd_check, FdOptions, FdReport};
pub use loss::{batch_forward, total_loss, LossComponents, ScoreMatrix};
pub use numkit::FeatureMatrix;
pub use params::{GradientSet, HeadParams, HeadWeights};
pub use posenc::{GridBox, GridShape};
pub use synth::{generate, SynthConfig};
pub use train::{fit, Checkpoint, EpochRecord, FitOutcome, TrainConfig};
