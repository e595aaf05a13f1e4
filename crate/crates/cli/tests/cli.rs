use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use xmodal_core::dataio::{read_manifest, sha256_hex};
use xmodal_core::params::LinearMap;
use xmodal_core::train::RngState;
use xmodal_core::{write_corpus, Checkpoint, Corpus, FeatureMatrix, GridShape, HeadWeights, Split, Study};

fn xmodal(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_xmodal"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("run xmodal")
}

fn ok(out: &Output) {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout: {}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p
}

/// Small train/val pair sharing one latent world.
fn corpora(dir: &Path, sigma: f64) {
    write(
        dir,
        "train.json",
        &format!(r#"{{"num_studies": 32, "seed": 1, "world_seed": 9, "noise_sigma": {sigma}}}"#),
    );
    write(
        dir,
        "val.json",
        &format!(r#"{{"num_studies": 12, "seed": 2, "world_seed": 9, "noise_sigma": {sigma}, "split": "val"}}"#),
    );
    ok(&xmodal(&["gen", "--config", "train.json", "--out", "train.lmtr"], dir));
    ok(&xmodal(&["gen", "--config", "val.json", "--out", "val.lmtr"], dir));
}

fn train_args<'a>(out: &'a str, extra: &[&'a str]) -> Vec<&'a str> {
    let mut v = vec![
        "train", "--train", "train.lmtr", "--val", "val.lmtr", "--out", out, "--batch-size", "8", "--max-epochs", "3",
    ];
    v.extend_from_slice(extra);
    v
}

#[test]
fn gen_writes_verified_corpus() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    write(d, "s.json", r#"{"num_studies": 10, "seed": 4}"#);
    let out = xmodal(&["gen", "--config", "s.json", "--out", "a.lmtr"], d);
    ok(&out);
    assert!(String::from_utf8_lossy(&out.stdout).contains("10 studies"));
    let manifest = read_manifest(&d.join("a.lmtr")).unwrap();
    let bytes = fs::read(d.join("a.lmtr")).unwrap();
    assert_eq!(manifest.checksum, format!("sha256:{}", sha256_hex(&bytes)));
    assert_eq!(manifest.counts.studies, 10);

    ok(&xmodal(&["gen", "--config", "s.json", "--out", "b.lmtr"], d));
    assert_eq!(read_manifest(&d.join("b.lmtr")).unwrap().checksum, manifest.checksum);
    ok(&xmodal(&["gen", "--config", "s.json", "--out", "c.lmtr", "--seed", "5"], d));
    assert_ne!(read_manifest(&d.join("c.lmtr")).unwrap().checksum, manifest.checksum);
}

#[test]
fn invalid_config_exits_2_naming_field() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    write(d, "bad.json", r#"{"num_studies": 4, "lateral_fraction": "half"}"#);
    let out = xmodal(&["gen", "--config", "bad.json", "--out", "x.lmtr"], d);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("lateral_fraction"));

    write(d, "range.json", r#"{"noise_sigma": -1.0}"#);
    let out = xmodal(&["gen", "--config", "range.json", "--out", "x.lmtr"], d);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("noise_sigma"));
    assert!(!d.join("x.lmtr").exists());
}

#[test]
fn train_is_reproducible_and_respects_patience() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    corpora(d, 0.05);
    ok(&xmodal(&train_args("run0", &["--patience", "0"]), d));
    let history = fs::read_to_string(d.join("run0/history.csv")).unwrap();
    assert_eq!(history.lines().count(), 2, "{history}");
    assert!(history.starts_with("epoch,L_g,L_ext,L_int,R_sum\n"));

    ok(&xmodal(&train_args("run1", &["--seed", "3", "--threads", "1"]), d));
    ok(&xmodal(&train_args("run2", &["--seed", "3", "--threads", "3"]), d));
    for f in ["history.csv", "metrics.json", "checkpoint.lmtc"] {
        assert_eq!(fs::read(d.join("run1").join(f)).unwrap(), fs::read(d.join("run2").join(f)).unwrap(), "{f}");
    }
    let metrics: Value = serde_json::from_slice(&fs::read(d.join("run1/metrics.json")).unwrap()).unwrap();
    assert_eq!(metrics["train_config"]["seed"], 3);
    assert_eq!(metrics["train_config"]["batch_size"], 8);
    assert!(metrics["report"]["retrieval"]["r_sum"].as_f64().is_some());
}

#[test]
fn divergence_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    corpora(d, 0.05);
    let out = xmodal(&train_args("run", &["--lr", "1e300"]), d);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
}

/// Every study's regions and tokens repeat one study-specific random vector.
fn toy_corpus(n: usize, dim: usize) -> Corpus {
    use rand::SeedableRng;
    use rand_distr::{Distribution, StandardNormal};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(17);
    let grid = GridShape::new(2, 2);
    let studies = (0..n)
        .map(|i| {
            let f: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
            let rows = |k: usize| FeatureMatrix::from_rows(&vec![f.clone(); k]).unwrap();
            Study {
                id: format!("toy{i}"),
                frontal: rows(grid.cells()),
                lateral: None,
                tokens: rows(3),
                token_mask: vec![true; 3],
                grid,
                label: Some(i as i32),
                grounding: Vec::new(),
            }
        })
        .collect();
    Corpus {
        studies,
        dim,
        grid,
        split: Split::Test,
    }
}

/// Zero queries and keys, identity values, all-ones scorer: the pair score is
/// the summed entries of the mean alignment vector in each direction.
fn sum_checkpoint(dim: usize) -> Checkpoint {
    let mut w = HeadWeights::zeros(dim);
    for p in [&mut w.pool.image, &mut w.pool.text, &mut w.agg_words.attn, &mut w.agg_regions.attn] {
        p.wv = LinearMap::identity(dim);
    }
    w.agg_words.fc_weight = vec![1.0; dim];
    w.agg_regions.fc_weight = vec![1.0; dim];
    Checkpoint {
        weights: w,
        lambda: 10.0,
        tau: 0.1,
        epoch: 0,
        r_sum: 0.0,
        rng: RngState::capture(&<rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0)),
    }
}

#[test]
fn eval_identity_toy_recalls_everything() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    write_corpus(&toy_corpus(8, 32), &d.join("toy.lmtr")).unwrap();
    sum_checkpoint(32).save(&d.join("toy.lmtc")).unwrap();
    let out = xmodal(
        &["eval", "--checkpoint", "toy.lmtc", "--corpus", "toy.lmtr", "--no-positional", "--out", "r.json"],
        d,
    );
    ok(&out);
    let report: Value = serde_json::from_slice(&fs::read(d.join("r.json")).unwrap()).unwrap();
    assert_eq!(report["retrieval"]["image_to_text"][0]["k"], 1);
    assert_eq!(report["retrieval"]["image_to_text"][0]["value"], 100.0);
    assert_eq!(report["retrieval"]["text_to_image"][0]["value"], 100.0);
    assert_eq!(report["config"]["rank_score"], "agg");
    assert_eq!(report["config"]["lambda"], 10.0);

    let stdout = xmodal(&["eval", "--checkpoint", "toy.lmtc", "--corpus", "toy.lmtr", "--no-positional"], d);
    ok(&stdout);
    let printed: Value = serde_json::from_slice(&stdout.stdout).unwrap();
    assert_eq!(printed, report);
}

#[test]
fn dimension_mismatch_exits_4() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    write_corpus(&toy_corpus(3, 16), &d.join("toy.lmtr")).unwrap();
    sum_checkpoint(32).save(&d.join("toy.lmtc")).unwrap();
    let out = xmodal(&["eval", "--checkpoint", "toy.lmtc", "--corpus", "toy.lmtr"], d);
    assert_eq!(out.status.code(), Some(4));
    let out = xmodal(&["ground", "--checkpoint", "toy.lmtc", "--corpus", "toy.lmtr", "--out", "m"], d);
    assert_eq!(out.status.code(), Some(4));
}

#[test]
fn gradcheck_default_is_tight() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let out = xmodal(&["gradcheck", "--out", "g.json"], d);
    ok(&out);
    let table = String::from_utf8_lossy(&out.stdout);
    assert!(table.contains("agg_regions.fc_bias"));
    let report: Value = serde_json::from_slice(&fs::read(d.join("g.json")).unwrap()).unwrap();
    let blocks = report["report"]["blocks"].as_array().unwrap();
    assert_eq!(blocks.len(), 16);
    for b in blocks {
        assert!(b["max_rel_error"].as_f64().unwrap() < 1e-6, "{b}");
    }
}

#[test]
fn ground_after_training_concentrates_on_boxes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    corpora(d, 0.0);
    ok(&xmodal(&train_args("run", &[]), d));
    let out = xmodal(&["ground", "--checkpoint", "run/checkpoint.lmtc", "--corpus", "val.lmtr", "--out", "maps"], d);
    ok(&out);
    let report: Value = serde_json::from_slice(&fs::read(d.join("maps/grounding.json")).unwrap()).unwrap();
    let studies = report["studies"].as_array().unwrap();
    assert_eq!(studies.len(), 12);
    for s in studies {
        for c in s["cnr"].as_array().unwrap() {
            assert!(c.as_f64().unwrap() > 1.0, "{s}");
        }
    }
    let id = studies[0]["id"].as_str().unwrap();
    let pgm = fs::read(d.join(format!("maps/{id}_0.pgm"))).unwrap();
    assert!(pgm.starts_with(b"P5\n4 4\n255\n"));
    assert_eq!(pgm.len(), b"P5\n4 4\n255\n".len() + 16);
    let csv = fs::read_to_string(d.join(format!("maps/{id}_0.csv"))).unwrap();
    assert_eq!(csv.lines().count(), 4);
}
