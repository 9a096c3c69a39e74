use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn fsbed(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fsbed"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn synth_easy(dir: &Path, n_test: usize) {
    let out = fsbed(&[
        "synth",
        "--profile",
        "easy",
        "--seed",
        "3",
        "--n-test",
        &n_test.to_string(),
        "--out-dir",
        dir.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
}

#[test]
fn config_prints_every_preset() {
    for preset in ["none", "ns", "nss", "al", "nss_al"] {
        let out = fsbed(&["config", "--preset", preset]);
        assert!(out.status.success(), "{preset}: {}", stderr(&out));
        let v: Value = serde_json::from_str(&stdout(&out)).unwrap();
        assert_eq!(v["name"], preset);
    }
    let out = fsbed(&["config", "--preset", "bogus"]);
    assert!(!out.status.success());
    assert!(stderr(&out).contains("bogus"));
}

#[test]
fn missing_input_reports_a_single_line() {
    let dir = tempfile::tempdir().unwrap();
    let out = fsbed(&[
        "detect",
        "--wav",
        "/nonexistent/a.wav",
        "--csv",
        "/nonexistent/a.csv",
        "--out-dir",
        dir.path().to_str().unwrap(),
    ]);
    assert!(!out.status.success());
    let err = stderr(&out);
    assert!(err.starts_with("error: "), "{err}");
    assert_eq!(err.trim_end().lines().count(), 1, "{err}");
}

#[test]
fn unknown_profile_lists_builtins() {
    let dir = tempfile::tempdir().unwrap();
    let out = fsbed(&[
        "synth",
        "--profile",
        "nope",
        "--out-dir",
        dir.path().to_str().unwrap(),
    ]);
    assert!(!out.status.success());
    assert!(stderr(&out).contains("easy"));
}

#[test]
fn synth_detect_and_eval_agree() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("corpus");
    synth_easy(&corpus, 1);
    let manifest: Value =
        serde_json::from_str(&std::fs::read_to_string(corpus.join("manifest.json")).unwrap())
            .unwrap();
    assert_eq!(manifest["recordings"].as_array().unwrap().len(), 2);

    let wav = corpus.join("easy_test_000.wav");
    let csv = corpus.join("easy_test_000.csv");
    let out_dir = dir.path().join("detect");
    let out = fsbed(&[
        "detect",
        "--wav",
        wav.to_str().unwrap(),
        "--csv",
        csv.to_str().unwrap(),
        "--config",
        "nss",
        "--out-dir",
        out_dir.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    assert!(stdout(&out).contains("events predicted"));
    for f in ["predictions.csv", "report.json", "timing.json"] {
        assert!(out_dir.join(f).exists(), "{f}");
    }
    assert!(!out_dir.join("steps.jsonl").exists());

    let report: Value =
        serde_json::from_str(&std::fs::read_to_string(out_dir.join("report.json")).unwrap())
            .unwrap();
    let out = fsbed(&[
        "eval",
        "--pred",
        out_dir.join("predictions.csv").to_str().unwrap(),
        "--ref",
        csv.to_str().unwrap(),
        "--skip-shots",
        "5",
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    let scored: Value = serde_json::from_str(&stdout(&out)).unwrap();
    for k in ["tp", "fp", "fn"] {
        assert_eq!(scored[k], report["eval"]["overall"][k], "{k}");
    }
}

#[test]
fn eval_scores_perfect_predictions() {
    let dir = tempfile::tempdir().unwrap();
    let refs = dir.path().join("ref.csv");
    let preds = dir.path().join("pred.csv");
    std::fs::write(
        &refs,
        "onset_s,offset_s,label\n1.0,2.0,POS\n3.0,3.5,UNK\n4.0,5.0,POS\n",
    )
    .unwrap();
    std::fs::write(&preds, "onset_s,offset_s,score\n1.0,2.0,0.9\n4.1,5.0,0.8\n").unwrap();
    let out = fsbed(&[
        "eval",
        "--pred",
        preds.to_str().unwrap(),
        "--ref",
        refs.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    let v: Value = serde_json::from_str(&stdout(&out)).unwrap();
    assert_eq!(v["tp"], 2);
    assert_eq!(v["f_measure"], 1.0);
}

#[test]
fn bench_compares_configs_and_rejects_duplicates() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("corpus");
    synth_easy(&corpus, 1);
    let manifest = corpus.join("manifest.json");
    let out_dir = dir.path().join("bench");
    let out = fsbed(&[
        "bench",
        "--manifest",
        manifest.to_str().unwrap(),
        "--config",
        "none",
        "--config",
        "nss",
        "--out-dir",
        out_dir.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    let table = std::fs::read_to_string(out_dir.join("comparison.csv")).unwrap();
    assert!(table.lines().any(|l| l.starts_with("none,overall")));
    assert!(table.lines().any(|l| l.starts_with("nss,overall")));

    let out = fsbed(&[
        "bench",
        "--manifest",
        manifest.to_str().unwrap(),
        "--config",
        "nss",
        "--config",
        "nss",
        "--out-dir",
        out_dir.to_str().unwrap(),
    ]);
    assert!(!out.status.success());
    assert!(stderr(&out).contains("distinct"));
}
