use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn vqa(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vqa")).args(args).output().expect("run vqa")
}

fn ok(args: &[&str]) -> String {
    let out = vqa(args);
    assert!(
        out.status.success(),
        "vqa {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn json(args: &[&str]) -> serde_json::Value {
    serde_json::from_str(&ok(args)).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// Toy data with `clips` clips and a one-epoch training run.
fn trained(dir: &Path, clips: usize) -> (String, String) {
    let toy = dir.join("toy");
    let run = dir.join("run");
    ok(&["make-toy-data", "--out-dir", p(&toy), "--clips", &clips.to_string(), "--seed", "1"]);
    ok(&[
        "train",
        "--config",
        p(&toy.join("toy.conf")),
        "--set",
        "train.epochs=1",
        "--seed",
        "5",
        "--out-dir",
        p(&run),
    ]);
    (
        p(&run.join("checkpoint.bin")).to_string(),
        p(&toy.join("manifest.csv")).to_string(),
    )
}

#[test]
fn sample_uniform_on_sixteen_frames() {
    let dir = tempfile::tempdir().unwrap();
    let toy = dir.path().join("toy");
    ok(&["make-toy-data", "--out-dir", p(&toy), "--clips", "2"]);
    let clip = toy.join("clip_000");
    let v = json(&["sample", "--input", p(&clip), "--strategy", "UNISampl", "--frames", "8"]);
    assert_eq!(v["indices"], serde_json::json!([1, 3, 5, 7, 9, 11, 13, 15]));
    assert_eq!(v["strategy"], "UNISampl");
    assert_eq!(v["repeated"], false);
    assert!(v.get("profile").is_none());

    let with_profile = json(&["sample", "--input", p(&clip), "--strategy", "SegMSEMean", "--frames", "4", "--profile"]);
    assert_eq!(with_profile["profile"].as_array().unwrap().len(), 16);
}

#[test]
fn sample_is_deterministic_for_a_seed() {
    let dir = tempfile::tempdir().unwrap();
    let toy = dir.path().join("toy");
    ok(&["make-toy-data", "--out-dir", p(&toy), "--clips", "1"]);
    let clip = toy.join("clip_000");
    for strategy in ["Mixed", "RandSampl", "UNIRandStart"] {
        let a = ok(&["sample", "--input", p(&clip), "--strategy", strategy, "--frames", "5", "--seed", "11"]);
        let b = ok(&["sample", "--input", p(&clip), "--strategy", strategy, "--frames", "5", "--seed", "11"]);
        assert_eq!(a, b, "{strategy}");
    }
}

#[test]
fn train_score_export_and_eval() {
    let dir = tempfile::tempdir().unwrap();
    let (ckpt, manifest) = trained(dir.path(), 3);
    let run = dir.path().join("run");
    for f in ["checkpoint.bin", "best.bin", "train_log.jsonl", "config.txt"] {
        assert!(run.join(f).exists(), "{f}");
    }
    let log = fs::read_to_string(run.join("train_log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 1);

    let scores = dir.path().join("scores.csv");
    ok(&["score", "--checkpoint", &ckpt, "--manifest", &manifest, "--out", p(&scores)]);
    let text = fs::read_to_string(&scores).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(
        lines[0],
        "video_id,q_pred,s_excellent,s_good,s_fair,s_poor,s_bad"
    );
    assert_eq!(lines.len(), 4);
    for row in &lines[1..] {
        let cells: Vec<&str> = row.split(',').collect();
        assert_eq!(cells.len(), 7);
        assert!(cells[1..].iter().all(|c| c.parse::<f64>().unwrap().is_finite()));
    }
    let again = ok(&["score", "--checkpoint", &ckpt, "--manifest", &manifest]);
    assert_eq!(again, text);

    let emb = dir.path().join("emb");
    let summary = json(&["export-embeddings", "--checkpoint", &ckpt, "--manifest", &manifest, "--out-dir", p(&emb)]);
    assert_eq!(summary["prompts"], 5);
    assert_eq!(summary["videos"], 3);
    let prompts = fs::read_to_string(emb.join("prompts.csv")).unwrap();
    let rows: Vec<&str> = prompts.lines().collect();
    assert_eq!(rows.len(), 6);
    assert!(rows[1..].iter().all(|r| r.split(',').count() == 1 + 32));

    let metrics = json(&["eval", "--predictions", p(&scores), "--labels", &manifest]);
    assert_eq!(metrics["n"], 3);
    for k in ["srocc", "plcc", "krocc", "rmse"] {
        assert!(metrics[k].as_f64().unwrap().is_finite(), "{k}");
    }
}

#[test]
fn training_is_deterministic_given_a_seed() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    trained(a.path(), 4);
    trained(b.path(), 4);
    let log = |d: &Path| fs::read_to_string(d.join("run/train_log.jsonl")).unwrap();
    assert_eq!(log(a.path()), log(b.path()));
    let bytes = |d: &Path| fs::read(d.join("run/checkpoint.bin")).unwrap();
    assert_eq!(bytes(a.path()), bytes(b.path()));
}

#[test]
fn eval_protocol_from_config() {
    let dir = tempfile::tempdir().unwrap();
    let toy = dir.path().join("toy");
    ok(&["make-toy-data", "--out-dir", p(&toy), "--clips", "10"]);
    let conf = toy.join("toy.conf");
    let args = [
        "eval",
        "--config",
        p(&conf),
        "--set",
        "train.epochs=1",
        "--set",
        "eval.num_splits=2",
        "--seed",
        "0",
    ];
    let report = json(&args);
    assert_eq!(report["splits"].as_array().unwrap().len(), 2);
    assert!(report["mean"]["srocc"].as_f64().unwrap().is_finite());
    let mut with_table = args.to_vec();
    with_table.push("--table");
    assert!(ok(&with_table).contains("SROCC"));
}

fn error_of(args: &[&str]) -> (i32, serde_json::Value) {
    let out = vqa(args);
    assert!(!out.status.success());
    let err: serde_json::Value = serde_json::from_slice(&out.stderr).expect("JSON error on stderr");
    assert!(err["message"].as_str().is_some_and(|m| !m.is_empty()));
    (out.status.code().unwrap(), err)
}

#[test]
fn errors_are_categorised() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing");

    let (code, err) = error_of(&["sample", "--input", p(&missing)]);
    assert_eq!((code, err["error"].as_str().unwrap()), (3, "ingestion"));

    let toy = dir.path().join("toy");
    ok(&["make-toy-data", "--out-dir", p(&toy), "--clips", "2"]);
    let conf = toy.join("toy.conf");
    let (code, err) = error_of(&["train", "--config", p(&conf), "--set", "train.epoch=3", "--out-dir", p(dir.path())]);
    assert_eq!((code, err["error"].as_str().unwrap()), (2, "config"));

    let clip = toy.join("clip_000");
    let (code, err) = error_of(&["sample", "--input", p(&clip), "--strategy", "Sideways"]);
    assert_eq!((code, err["error"].as_str().unwrap()), (2, "config"));

    let bogus = dir.path().join("bogus.bin");
    fs::write(&bogus, b"not a checkpoint").unwrap();
    let manifest = toy.join("manifest.csv");
    let (code, err) = error_of(&["score", "--checkpoint", p(&bogus), "--manifest", p(&manifest)]);
    assert_eq!((code, err["error"].as_str().unwrap()), (5, "checkpoint"));

    let (code, err) = error_of(&["no-such-command"]);
    assert_eq!((code, err["error"].as_str().unwrap()), (2, "usage"));
}
