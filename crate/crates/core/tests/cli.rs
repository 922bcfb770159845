use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn lrsv(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lrsv"))
        .arg("--out-dir")
        .arg(out)
        .args(args)
        .output()
        .expect("spawn lrsv")
}

fn benchmark() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("configs/benchmark.json")
}

fn ok(o: &Output) -> String {
    assert!(
        o.status.success(),
        "exit {:?}\nstdout:\n{}\nstderr:\n{}",
        o.status,
        String::from_utf8_lossy(&o.stdout),
        String::from_utf8_lossy(&o.stderr)
    );
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn staged_workflow_matches_in_memory_evaluation() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path();
    let cfg = benchmark();
    let cfg = cfg.to_str().unwrap();
    let common = ["--config", cfg, "--n-runs", "2", "--back-end", "lr_cosine"];
    let with = |cmd: &'static str| -> Vec<&str> {
        let mut v = vec![cmd];
        v.extend_from_slice(&common);
        v
    };

    assert!(ok(&lrsv(out, &with("synth"))).contains("320 utterances of 40 speakers"));
    assert!(out.join("corpus/index.txt").is_file());
    ok(&lrsv(out, &with("train-frontend")));
    assert!(out.join("models/gmm_ivector/frontend.json").is_file());
    ok(&lrsv(out, &with("train-backend")));
    ok(&lrsv(out, &with("trials")));
    ok(&lrsv(out, &with("score")));

    let scores = out.join("scores/gmm_ivector/lr_cosine/30_-15_/run000.scores");
    let trials = out.join("trials/30_-15_/run000.trials");
    assert!(scores.is_file(), "missing {}", scores.display());
    let text = ok(&lrsv(
        &out.join("eval"),
        &[
            "evaluate",
            "--scores",
            scores.to_str().unwrap(),
            "--trials",
            trials.to_str().unwrap(),
        ],
    ));
    let metrics: serde_json::Value = serde_json::from_str(&text).unwrap();
    let staged_eer = metrics["eer"].as_f64().unwrap();
    assert!(out.join("eval/det.csv").is_file());

    ok(&lrsv(out, &with("evaluate")));
    let report: serde_json::Value = serde_json::from_slice(&std::fs::read(out.join("report.json")).unwrap()).unwrap();
    let run0 = &report["systems"][0]["conditions"][0]["runs"][0];
    // score files keep six decimals, so the staged EER may differ slightly
    assert!(
        (run0["eer"].as_f64().unwrap() - staged_eer).abs() <= 0.01,
        "{run0} vs {staged_eer}"
    );
}

#[test]
fn config_errors_name_the_field() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("bad.json");
    std::fs::write(&cfg, r#"{"corpus": {"index": "x.txt"}, "back_end": "plda_cosine"}"#).unwrap();
    let o = lrsv(tmp.path(), &["compare", "--config", cfg.to_str().unwrap()]);
    assert!(!o.status.success());
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("back_end"), "{err}");
}

#[test]
fn unknown_back_end_flag_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let o = lrsv(
        tmp.path(),
        &[
            "compare",
            "--config",
            benchmark().to_str().unwrap(),
            "--back-end",
            "svm",
        ],
    );
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("svm"));
}

#[test]
fn score_without_models_explains_the_missing_stage() {
    let tmp = tempfile::tempdir().unwrap();
    let o = lrsv(tmp.path(), &["score", "--config", benchmark().to_str().unwrap()]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("train-frontend"));
}
