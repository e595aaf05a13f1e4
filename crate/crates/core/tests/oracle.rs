mod common;

use common::{gradcheck_batch, oracle_deviation, small_instance};
use xmodal_core::align::{prepare_all, PrepareOptions};
use xmodal_core::eval::{score_matrix, RankScore};
use xmodal_core::{batch_forward, fd_check, ExtLoss, FdOptions};

#[test]
fn batched_forward_matches_loop_reference() {
    for seed in 0..100 {
        let dev = oracle_deviation(seed);
        assert!(dev < 1e-12, "seed {seed}: deviation {dev:e}");
    }
}

#[test]
fn eval_scores_match_training_forward() {
    for seed in 0..10 {
        let (studies, params) = small_instance(seed);
        let batch = prepare_all(&studies, PrepareOptions::default()).unwrap();
        let fwd = batch_forward(&batch, &params, ExtLoss::Summed).unwrap();
        let agg = score_matrix(&batch, &params, RankScore::Agg).unwrap();
        assert_eq!(agg.as_slice(), fwd.agg_scores().as_slice());
        let global = score_matrix(&batch, &params, RankScore::Global).unwrap();
        assert_eq!(global.as_slice(), fwd.global_scores.as_slice());
    }
}

#[test]
fn gradients_match_finite_differences_per_direction() {
    let (batch, params) = gradcheck_batch(42, 3);
    let report = fd_check(&batch, &params, ExtLoss::PerDirection, FdOptions::default()).unwrap();
    assert!(report.max_rel_error < 1e-6, "{}", report.table());
}

#[test]
fn gradcheck_flags_a_wrong_gradient() {
    let (batch, params) = gradcheck_batch(1, 3);
    let opts = FdOptions {
        corrupt: Some(1e-3),
        samples_per_block: 4,
        ..Default::default()
    };
    let report = fd_check(&batch, &params, ExtLoss::Summed, opts).unwrap();
    assert!(report.max_rel_error > 1e-4);
}

#[test]
fn gradients_match_with_masked_rows() {
    for seed in 0..5 {
        let (studies, params) = small_instance(seed);
        let batch = prepare_all(&studies, PrepareOptions::default()).unwrap();
        let report = fd_check(&batch, &params, ExtLoss::Summed, FdOptions::default()).unwrap();
        assert!(report.max_rel_error < 1e-6, "seed {seed}\n{}", report.table());
    }
}
