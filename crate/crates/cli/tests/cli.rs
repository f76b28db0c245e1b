use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use emotag_core::evaluate::io::PredictionTable;
use emotag_core::ingest::{load_manifest, Split};
use ndarray::Array2;
use rand::{Rng, SeedableRng};

const CFG: &str = "paths.manifest=corpus/manifest.tsv\n\
                   paths.vocab=corpus/vocab.txt\n\
                   paths.cache_dir=cache\n\
                   paths.runs_dir=runs\n";

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_emotag"))
        .current_dir(dir)
        .args(["--config", "t.cfg"])
        .args(args)
        .output()
        .unwrap()
}

fn ok(dir: &Path, args: &[&str]) {
    let out = run(dir, args);
    assert!(
        out.status.success(),
        "{args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

fn corpus() -> tempfile::TempDir {
    let tmp = tempfile::tempdir().unwrap();
    fs::write(tmp.path().join("t.cfg"), CFG).unwrap();
    ok(
        tmp.path(),
        &[
            "synth",
            "--out",
            "corpus",
            "--labeled",
            "10",
            "--unlabeled",
            "2",
            "--seconds",
            "3",
        ],
    );
    tmp
}

fn planted(dir: &Path, run: &str, seed: u64) -> Vec<PredictionTable> {
    let m = load_manifest(&dir.join("corpus/manifest.tsv"), &dir.join("corpus/vocab.txt")).unwrap();
    let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    fs::create_dir_all(dir.join("runs").join(run)).unwrap();
    [Split::Valid, Split::Test]
        .into_iter()
        .map(|s| {
            let ids: Vec<String> = m.split_records(s).unwrap().iter().map(|r| r.track_id.clone()).collect();
            let logits = Array2::from_shape_simple_fn((ids.len(), m.num_tags()), || r.gen_range(-4.0..4.0));
            let t = PredictionTable::new(ids, m.vocabulary.tags().to_vec(), logits).unwrap();
            t.save(&dir.join(format!("runs/{run}/predictions-{s}.tsv"))).unwrap();
            t
        })
        .collect()
}

#[test]
fn fixed_alpha_ensemble_is_weighted_sum() {
    let tmp = corpus();
    let dir = tmp.path();
    let a = planted(dir, "a", 1);
    let b = planted(dir, "b", 2);
    ok(
        dir,
        &[
            "ensemble",
            "--short-run",
            "a",
            "--long-run",
            "b",
            "--alpha",
            "0.7",
            "--split",
            "test",
        ],
    );
    let got = PredictionTable::load(&dir.join("runs/ensemble/predictions-test.tsv")).unwrap();
    assert_eq!(got.track_ids, a[1].track_ids);
    let want = 0.7 * &a[1].logits + (1.0 - 0.7) * &b[1].logits;
    assert_eq!(got.logits, want);
    assert!(dir.join("runs/ensemble/predictions-valid.tsv").exists());

    ok(
        dir,
        &[
            "evaluate",
            "--predictions",
            "runs/ensemble/predictions-test.tsv",
            "--split",
            "test",
        ],
    );
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.join("runs/ensemble/report-test.json")).unwrap()).unwrap();
    assert!(report["roc_auc"].is_number());
    assert!(dir.join("runs/ensemble/report-test.csv").exists());
}

#[test]
fn sweep_writes_curve() {
    let tmp = corpus();
    let dir = tmp.path();
    planted(dir, "a", 3);
    planted(dir, "b", 4);
    ok(
        dir,
        &[
            "--run-id",
            "swept",
            "ensemble",
            "--short-run",
            "a",
            "--long-run",
            "b",
            "--sweep",
        ],
    );
    let curve = fs::read_to_string(dir.join("runs/swept/alpha_curve.csv")).unwrap();
    assert_eq!(curve.lines().count(), 22);
    let spec: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.join("runs/swept/ensemble.json")).unwrap()).unwrap();
    let alpha = spec["alpha"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&alpha));
}

#[test]
fn warm_extract_leaves_cache_untouched() {
    let tmp = corpus();
    let dir = tmp.path();
    ok(dir, &["extract"]);
    let stamps = || {
        let mut v: Vec<_> = fs::read_dir(dir.join("cache"))
            .unwrap()
            .map(|e| {
                let e = e.unwrap();
                (e.file_name(), e.metadata().unwrap().modified().unwrap())
            })
            .collect();
        v.sort();
        v
    };
    let before = stamps();
    assert_eq!(before.len(), 24);
    let out = run(dir, &["extract"]);
    assert!(out.status.success());
    assert_eq!(stamps(), before);
}

#[test]
fn missing_artifacts_name_their_producer() {
    let tmp = corpus();
    let dir = tmp.path();
    let out = run(dir, &["evaluate", "--predictions", "runs/x/predictions-test.tsv"]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("error[missing_artifact]"), "{err}");
    assert!(err.contains("emotag predict"), "{err}");

    let out = run(dir, &["pseudolabel", "--teacher-run", "ghost"]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("emotag train --run-id ghost"), "{err}");
}

#[test]
fn bad_input_exits_nonzero_with_kind() {
    let tmp = corpus();
    let dir = tmp.path();
    let out = run(dir, &["--set", "train.mode=sideways", "train"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error[config]"));

    fs::write(dir.join("corpus/vocab.txt"), "calm\ncalm\n").unwrap();
    let out = run(dir, &["extract"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("error[vocabulary]"));
}
