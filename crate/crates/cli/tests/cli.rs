use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use lipgraph::io::load_manifest;
use lipgraph::synth::Split;
use serde_json::Value;

const SMALL: [&str; 9] = [
    "data.classes=3",
    "data.speakers=3",
    "data.clips_per=3",
    "data.val_per=1",
    "data.frames=8",
    "model.backend.classes=3",
    "augment.mask.max_len=2",
    "train.epochs=1",
    "train.batch_size=4",
];

fn lipgraph(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lipgraph")).args(args).output().expect("binary runs")
}

fn with_small<'a>(mut args: Vec<&'a str>) -> Vec<&'a str> {
    for s in SMALL {
        args.extend(["--set", s]);
    }
    args
}

fn ok(out: &Output) -> String {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// Every file under `dir` with its bytes.
fn snapshot_dir(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut files = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let path = e.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                files.insert(path.clone(), fs::read(&path).unwrap());
            }
        }
    }
    files
}

fn small_data(root: &Path, seed: &str) -> PathBuf {
    let dir = root.join(format!("data{seed}"));
    ok(&lipgraph(&with_small(vec!["gen-data", "--out", p(&dir), "--seed", seed])));
    dir
}

fn train_into(root: &Path, data: &Path, name: &str) -> PathBuf {
    let out = root.join(name);
    ok(&lipgraph(&with_small(vec!["train", "--data", p(data), "--out", p(&out)])));
    out
}

#[test]
fn gen_data_defaults_and_disjoint_splits() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("data");
    let stdout = ok(&lipgraph(&["gen-data", "--out", p(&dir), "--set", "data.frames=6", "--set", "augment.mask.max_len=3"]));
    assert!(stdout.contains("wrote"));
    let m = load_manifest(&dir).unwrap();
    assert_eq!((m.config.classes, m.config.speakers), (10, 12));
    assert_eq!(m.classes.len(), 10);
    let speakers = |split: Split| -> std::collections::BTreeSet<String> {
        m.clips.iter().filter(|c| c.split == split).map(|c| c.speaker_id.clone()).collect()
    };
    let test = speakers(Split::Test);
    assert!(test.is_disjoint(&speakers(Split::Train)));
    assert!(test.is_disjoint(&speakers(Split::Val)));
    assert_eq!(test.len(), 4);
    assert!(dir.join("config.json").is_file());
}

#[test]
fn gen_data_is_reproducible_per_seed() {
    let tmp = tempfile::tempdir().unwrap();
    let a = small_data(tmp.path(), "7");
    let b = tmp.path().join("again");
    ok(&lipgraph(&with_small(vec!["gen-data", "--out", p(&b), "--seed", "7"])));
    assert_eq!(fs::read(a.join("manifest.json")).unwrap(), fs::read(b.join("manifest.json")).unwrap());
    assert_eq!(fs::read(a.join("landmarks.jsonl")).unwrap(), fs::read(b.join("landmarks.jsonl")).unwrap());
    let c = small_data(tmp.path(), "8");
    assert_ne!(fs::read(a.join("manifest.json")).unwrap(), fs::read(c.join("manifest.json")).unwrap());
}

#[test]
fn too_few_speakers_is_a_config_error() {
    let tmp = tempfile::tempdir().unwrap();
    let out = lipgraph(&["gen-data", "--out", p(&tmp.path().join("d")), "--set", "data.speakers=2"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("error"));
}

#[test]
fn refuses_non_empty_output_without_force() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = small_data(tmp.path(), "1");
    let again = lipgraph(&with_small(vec!["gen-data", "--out", p(&dir), "--seed", "1"]));
    assert_eq!(again.status.code(), Some(2));
    ok(&lipgraph(&with_small(vec!["gen-data", "--out", p(&dir), "--seed", "1", "--force"])));
}

#[test]
fn build_graphs_reports_valid_matrices() {
    let tmp = tempfile::tempdir().unwrap();
    let data = small_data(tmp.path(), "2");
    let out = tmp.path().join("graphs");
    let stdout = ok(&lipgraph(&with_small(vec![
        "build-graphs",
        "--landmarks",
        p(&data.join("landmarks.jsonl")),
        "--out",
        p(&out),
    ])));
    assert_eq!(stdout.lines().count(), 3);
    let summary: Value = serde_json::from_str(&fs::read_to_string(out.join("summary.json")).unwrap()).unwrap();
    let lcg_degrees: Vec<u64> = summary["lcg"]["degrees"].as_array().unwrap().iter().map(|v| v.as_u64().unwrap()).collect();
    assert_eq!(lcg_degrees.len(), 20);
    assert!(lcg_degrees.iter().all(|d| (3..=5).contains(d)));
    for g in ["lcg", "dag", "sag"] {
        for s in summary[g]["row_sums"].as_array().unwrap() {
            assert!((s.as_f64().unwrap() - 1.0).abs() < 1e-9, "{g}");
        }
    }
    assert!(summary["sag_similarity_max_asymmetry"].as_f64().unwrap() < 1e-12);
    // row normalisation rescales rows, so only the support stays symmetric
    let sag: Vec<Vec<f64>> = fs::read_to_string(out.join("SAG.txt"))
        .or_else(|_| fs::read_to_string(out.join("sag.txt")))
        .unwrap()
        .lines()
        .map(|l| l.split_whitespace().map(|v| v.parse().unwrap()).collect())
        .collect();
    assert_eq!(sag.len(), 20);
    for i in 0..20 {
        for j in 0..20 {
            assert_eq!(sag[i][j] > 0.0, sag[j][i] > 0.0);
        }
    }
    assert!(out.join("config.json").is_file());
}

#[test]
fn malformed_landmark_record_reports_its_line() {
    let tmp = tempfile::tempdir().unwrap();
    let data = small_data(tmp.path(), "3");
    let text = fs::read_to_string(data.join("landmarks.jsonl")).unwrap();
    let first = text.lines().next().unwrap();
    let bad = tmp.path().join("bad.jsonl");
    fs::write(&bad, format!("{first}\n{{\"clip_id\": 5}}\n")).unwrap();
    let out = lipgraph(&["build-graphs", "--landmarks", p(&bad), "--out", p(&tmp.path().join("g"))]);
    assert_eq!(out.status.code(), Some(3));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("line 2"), "{err}");
}

#[test]
fn missing_input_file_is_an_io_error() {
    let tmp = tempfile::tempdir().unwrap();
    let out = lipgraph(&["build-graphs", "--landmarks", p(&tmp.path().join("nope.jsonl")), "--out", p(&tmp.path().join("g"))]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("nope.jsonl"));
}

#[test]
fn train_eval_robust_pipeline() {
    let tmp = tempfile::tempdir().unwrap();
    let data = small_data(tmp.path(), "4");
    let before = snapshot_dir(&data);
    let run = train_into(tmp.path(), &data, "run");
    for f in ["checkpoint.bin", "history.json", "params.json", "config.json"] {
        assert!(run.join(f).is_file(), "{f}");
    }
    let ck = run.join("checkpoint.bin");

    let eval_dir = tmp.path().join("eval");
    ok(&lipgraph(&["eval", "--data", p(&data), "--checkpoint", p(&ck), "--out", p(&eval_dir), "--perturb", "none"]));
    let report: Value = serde_json::from_str(&fs::read_to_string(eval_dir.join("report.json")).unwrap()).unwrap();
    let records = fs::read_to_string(eval_dir.join("records.jsonl")).unwrap();
    let total: u64 = report["per_speaker"].as_object().unwrap().values().map(|s| s["n"].as_u64().unwrap()).sum();
    assert_eq!(total as usize, records.lines().count());

    let robust_dir = tmp.path().join("robust");
    let stdout = ok(&lipgraph(&["robust", "--data", p(&data), "--checkpoint", p(&ck), "--out", p(&robust_dir)]));
    assert_eq!(stdout.lines().count(), 4);
    let robust: Value = serde_json::from_str(&fs::read_to_string(robust_dir.join("robust.json")).unwrap()).unwrap();
    let rows = robust["rows"].as_array().unwrap();
    assert_eq!(rows.len(), 4);
    assert!(rows.iter().all(|r| r["acc_drop"].as_f64().unwrap().is_finite()));
    assert_eq!(rows[0]["acc"], report["acc"]);
    assert_eq!(rows[0]["macc"], report["macc"]);

    for kind in ["visual", "landmark", "both"] {
        let d = tmp.path().join(format!("eval_{kind}"));
        ok(&lipgraph(&["eval", "--data", p(&data), "--checkpoint", p(&ck), "--out", p(&d), "--perturb", kind]));
    }
    for d in [&eval_dir, &robust_dir] {
        assert!(d.join("config.json").is_file());
    }
    assert_eq!(snapshot_dir(&data), before, "dataset directory was modified");
}

#[test]
fn repeated_runs_are_byte_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let data = small_data(tmp.path(), "5");
    let a = train_into(tmp.path(), &data, "a");
    let b = train_into(tmp.path(), &data, "b");
    for f in ["checkpoint.bin", "history.json", "params.json", "config.json"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
    let mut reports = Vec::new();
    for run in [&a, &b] {
        let out = run.join("robust");
        ok(&lipgraph(&["robust", "--data", p(&data), "--checkpoint", p(&run.join("checkpoint.bin")), "--out", p(&out)]));
        reports.push(fs::read(out.join("robust.json")).unwrap());
    }
    assert_eq!(reports[0], reports[1]);
}

#[test]
fn checkpoint_for_another_architecture_fails_to_load() {
    let tmp = tempfile::tempdir().unwrap();
    let data = small_data(tmp.path(), "6");
    let run = train_into(tmp.path(), &data, "run");
    let (ck, out_dir) = (run.join("checkpoint.bin"), tmp.path().join("e"));
    let mut args = with_small(vec![
        "eval",
        "--data",
        p(&data),
        "--out",
        p(&out_dir),
        "--set",
        "model.use_sag=false",
        "--set",
        "model.fusion=sum2",
    ]);
    args.extend(["--checkpoint", p(&ck)]);
    let out = lipgraph(&args);
    assert_eq!(out.status.code(), Some(3));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("unexpected") && err.contains("branch.sag"), "{err}");
}

#[test]
fn eval_without_dataset_is_a_data_error() {
    let tmp = tempfile::tempdir().unwrap();
    let data = small_data(tmp.path(), "9");
    let run = train_into(tmp.path(), &data, "run");
    let out = lipgraph(&[
        "eval",
        "--data",
        p(&tmp.path().join("empty")),
        "--checkpoint",
        p(&run.join("checkpoint.bin")),
        "--out",
        p(&tmp.path().join("e")),
    ]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn gradcheck_passes() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("g");
    let stdout = ok(&lipgraph(&["gradcheck", "--seeds", "1", "--out", p(&out)]));
    assert!(stdout.contains("worst relative error"));
    let report: Value = serde_json::from_str(&fs::read_to_string(out.join("gradcheck.json")).unwrap()).unwrap();
    assert!(!report["results"].as_array().unwrap().is_empty());
    assert!(out.join("config.json").is_file());
}

#[test]
fn error_classes_have_distinct_exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let config = lipgraph(&["gen-data", "--out", p(&tmp.path().join("a")), "--set", "data.speakers=2"]);
    let bad = tmp.path().join("bad.jsonl");
    fs::write(&bad, "not json\n").unwrap();
    let data = lipgraph(&["build-graphs", "--landmarks", p(&bad), "--out", p(&tmp.path().join("b"))]);
    let codes = [config.status.code().unwrap(), data.status.code().unwrap()];
    assert_eq!(codes, [2, 3]);
    assert!(codes.iter().all(|&c| c != 0));
}
