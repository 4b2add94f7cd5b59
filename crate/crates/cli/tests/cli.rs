//! The `vcaug` binary: exit codes, run records and a tiny end-to-end run.

use std::path::Path;
use std::process::{Command, Output};

use vcaug::manifest::Manifest;

fn vcaug(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vcaug"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn corpus(dir: &Path, n: usize) -> std::path::PathBuf {
    let m = vcaug::synth::write_corpus(dir, n, 2, 2..=3, 16_000, 5).unwrap();
    let p = dir.join("manifest.jsonl");
    m.write(&p).unwrap();
    p
}

#[test]
fn manifest_validate_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let good = corpus(dir.path(), 3);
    let o = vcaug(&["manifest", "validate", path(&good), "--audio"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));

    let text = std::fs::read_to_string(&good).unwrap();
    let first = text.lines().next().unwrap();
    let bad = dir.path().join("bad.jsonl");
    std::fs::write(&bad, format!("{text}{first}\n")).unwrap();
    let o = vcaug(&["manifest", "validate", path(&bad)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("duplicate"), "{}", stderr(&o));

    let o = vcaug(&["manifest", "validate", path(&dir.path().join("missing.jsonl"))]);
    assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));
}

#[test]
fn train_without_codebook_points_to_fit_quantizer() {
    let dir = tempfile::tempdir().unwrap();
    let m = corpus(dir.path(), 2);
    let ckpt = dir.path().join("ckpt");
    let o = vcaug(&["train", "--train", path(&m), "--val", path(&m), "--ckpt", path(&ckpt)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("fit-quantizer"), "{}", stderr(&o));
}

#[test]
fn config_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let m = corpus(dir.path(), 1);
    for args in [
        vec!["--training.max_lrr", "1", "manifest", "validate", path(&m)],
        vec!["--preset", "huge", "manifest", "validate", path(&m)],
        vec!["manifest", "validate", path(&m), "--signal.n_mels", "0"],
        vec!["no-such-command"],
    ] {
        let o = vcaug(&args);
        assert_eq!(o.status.code(), Some(2), "{args:?}: {}", stderr(&o));
    }
}

#[test]
fn augment_doubles_the_manifest_and_records_the_run() {
    let dir = tempfile::tempdir().unwrap();
    let m = corpus(dir.path(), 10);
    let out = dir.path().join("aug");
    let o = vcaug(&[
        "augment",
        "--manifest",
        path(&m),
        "--method",
        "specaug",
        "--ratio",
        "100",
        "--out-dir",
        path(&out),
        "--vocoder.griffin_lim_iterations",
        "4",
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let text = std::fs::read_to_string(out.join("manifest.jsonl")).unwrap();
    assert_eq!(text.lines().count(), 20);
    Manifest::read(&out.join("manifest.jsonl")).unwrap();

    let snapshot: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("config.json")).unwrap()).unwrap();
    assert_eq!(snapshot["vocoder"]["griffin_lim_iterations"], 4);
    assert!(std::fs::read_to_string(out.join("VERSION")).unwrap().starts_with("vcaug "));

    // Conversion without a checkpoint is a configuration problem.
    let o = vcaug(&["augment", "--manifest", path(&m), "--method", "vc", "--out-dir", path(&out)]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
}

#[test]
fn tiny_pipeline_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let m = corpus(dir.path(), 4);
    let ckpt = dir.path().join("ckpt");
    let tiny = ["--preset", "tiny", "--bottleneck.k", "8", "--vocoder.griffin_lim_iterations", "4"];
    let with = |args: &[&str]| {
        let mut all: Vec<&str> = args.to_vec();
        all.extend_from_slice(&tiny);
        let o = vcaug(&all);
        assert_eq!(o.status.code(), Some(0), "{args:?}: {}", stderr(&o));
        String::from_utf8(o.stdout).unwrap()
    };

    with(&["fit-quantizer", "--manifest", path(&m), "--ckpt", path(&ckpt)]);
    assert!(ckpt.join("codebook.json").is_file() && ckpt.join("stats.json").is_file());

    let report = with(&["train", "--train", path(&m), "--val", path(&m), "--ckpt", path(&ckpt), "--max-steps", "1"]);
    let report: serde_json::Value = serde_json::from_str(&report).unwrap();
    assert_eq!(report["step"], 1);
    assert!(ckpt.join("model.safetensors").is_file() && ckpt.join("VERSION").is_file());

    let manifest = Manifest::read(&m).unwrap();
    let wav = |i: usize| manifest.audio_path(&manifest.records[i]);
    let (src, reference) = (wav(0), wav(1));
    let out = dir.path().join("out").join("converted.wav");
    // The checkpoint's own config snapshot supplies the architecture.
    let o = vcaug(&[
        "convert",
        "--ckpt",
        path(&ckpt),
        "--source",
        path(&src),
        "--reference",
        path(&reference),
        "--out",
        path(&out),
        "--crossfade-ms",
        "10",
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let summary: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(summary["per_chunk_frames"].as_array().unwrap().len(), 1);
    assert!(out.is_file() && out.with_file_name("config.json").is_file());

    let o = vcaug(&["style", "inspect", "--ckpt", path(&ckpt), "--reference", path(&reference)]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let style: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(style["style"].as_array().unwrap().len(), 512);
    let weights = style["sublayer_weights"].as_array().unwrap();
    assert_eq!(weights.len(), 3);
    for w in weights {
        let sum: f64 = w.as_array().unwrap().iter().map(|x| x.as_f64().unwrap()).sum();
        assert_eq!(w.as_array().unwrap().len(), 5);
        assert!((sum - 1.0).abs() < 1e-5);
    }

    let eval = dir.path().join("eval");
    let table = with(&["eval-resynth", "--manifest", path(&m), "--identity", "--out-dir", path(&eval)]);
    assert!(table.contains("drop"));
    let r: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(eval.join("resynthesis.json")).unwrap()).unwrap();
    assert_eq!(r["wer_drop"], 0.0);

    let o = vcaug(&["convert", "--ckpt", path(&dir.path().join("nowhere")), "--source", path(&src), "--reference",
        path(&reference), "--out", path(&out)]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
}
