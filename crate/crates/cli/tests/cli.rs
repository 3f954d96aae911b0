use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn splitvoice(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_splitvoice")).args(args).output().unwrap()
}

fn ok_json(args: &[&str]) -> Value {
    let out = splitvoice(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    serde_json::from_slice(&out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Every file under `dir` as (path relative to `dir`, contents), sorted.
fn dir_files(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    fn walk(root: &Path, dir: &Path, files: &mut Vec<(PathBuf, Vec<u8>)>) {
        for entry in fs::read_dir(dir).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                walk(root, &p, files);
            } else {
                files.push((p.strip_prefix(root).unwrap().to_path_buf(), fs::read(&p).unwrap()));
            }
        }
    }
    let mut files = Vec::new();
    walk(dir, dir, &mut files);
    files.sort();
    files
}

struct Fixture {
    _tmp: tempfile::TempDir,
    root: PathBuf,
}

impl Fixture {
    fn new() -> Self {
        let tmp = tempfile::tempdir().unwrap();
        let root = tmp.path().to_path_buf();
        fs::write(
            root.join("corpus.json"),
            r#"{"speakers": 2, "symbols": 4, "utterances": 16, "min_symbols": 2, "max_symbols": 4}"#,
        )
        .unwrap();
        fs::write(root.join("vq.json"), r#"{"kind": "vq-vae", "steps": 10, "codes": 8}"#).unwrap();
        fs::write(
            root.join("para.json"),
            r#"{"kind": "paralinguistic", "steps": 5, "head_steps": 20}"#,
        )
        .unwrap();
        Self { _tmp: tmp, root }
    }

    fn p(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    fn corpus(&self, name: &str) -> PathBuf {
        let out = self.p(name);
        ok_json(&["gen-corpus", "--config", s(&self.p("corpus.json")), "--seed", "4", "--out", s(&out)]);
        out
    }

    fn train(&self, config: &str, corpus: &Path, name: &str) -> Value {
        ok_json(&["train", "--config", s(&self.p(config)), "--corpus", s(corpus), "--out", s(&self.p(name))])
    }
}

#[test]
fn full_workflow() {
    let fx = Fixture::new();
    let corpus = fx.corpus("corpus");
    let manifest = corpus.join("manifest.jsonl");
    let train = fx.train("vq.json", &corpus, "vq");
    assert_eq!(train["train"]["steps"], 10);

    let units = fx.p("units");
    let export = ok_json(&["export-units", "--ckpt", s(&fx.p("vq")), "--corpus", s(&corpus), "--out", s(&units)]);
    assert_eq!(export["utterances"], 16);

    for mode in ["within", "across"] {
        let abx = ok_json(&["eval-abx", "--units", s(&units), "--manifest", s(&manifest), "--mode", mode]);
        assert_eq!(abx["mode"], mode);
        let v = abx["value"].as_f64().unwrap();
        assert!((0.0..=100.0).contains(&v));
    }
    let ssimi = ok_json(&["eval-ssimi", "--units", s(&units), "--manifest", s(&manifest)]);
    assert!(ssimi["value"].is_number());

    fs::write(fx.p("ref.txt"), "a b c\nd e\n").unwrap();
    fs::write(fx.p("hyp.txt"), "a x c\nd e f\n").unwrap();
    let wer = ok_json(&["eval-wer", "--ref", s(&fx.p("ref.txt")), "--hyp", s(&fx.p("hyp.txt"))]);
    assert!((wer["value"].as_f64().unwrap() - 40.0).abs() < 1e-9, "{wer}");

    let size = ok_json(&[
        "quantize-model",
        "--ckpt",
        s(&fx.p("vq")),
        "--calib",
        s(&manifest),
        "--out",
        s(&fx.p("vq8")),
    ]);
    assert_eq!(size["payload_ratio"], 0.25);

    for repr in ["units", "features"] {
        let leak = ok_json(&[
            "probe-privacy",
            "--repr",
            repr,
            "--attr",
            "speaker",
            "--ckpt",
            s(&fx.p("vq8")),
            "--corpus",
            s(&corpus),
        ]);
        assert!(leak["accuracy"].is_number());
    }
    fx.train("para.json", &corpus, "para");
    let leak = ok_json(&[
        "probe-privacy",
        "--repr",
        "paraling",
        "--attr",
        "content",
        "--ckpt",
        s(&fx.p("para")),
        "--corpus",
        s(&corpus),
    ]);
    assert_eq!(leak["attribute"], "content");

    let report_path = fx.p("report.json");
    let run = ok_json(&[
        "run",
        "--corpus",
        s(&corpus),
        "--linguistic",
        s(&fx.p("vq8")),
        "--paralinguistic",
        s(&fx.p("para")),
        "--precision",
        "int8",
        "--out",
        s(&fx.p("run")),
        "--report",
        s(&report_path),
    ]);
    assert_eq!(run["boundary"]["cloud_read_signal"], false);
    assert_eq!(run["precision"], "int8");
    let saved: Value = serde_json::from_str(&fs::read_to_string(report_path).unwrap()).unwrap();
    assert_eq!(saved, run);
}

#[test]
fn artifacts_are_bit_identical_across_runs() {
    let fx = Fixture::new();
    let a = fx.corpus("a");
    let b = fx.corpus("b");
    assert_eq!(dir_files(&a), dir_files(&b));

    let ra = fx.train("vq.json", &a, "ta");
    let rb = fx.train("vq.json", &a, "tb");
    assert_eq!(ra, rb);
    assert_eq!(dir_files(&fx.p("ta")), dir_files(&fx.p("tb")));

    for (ckpt, out) in [("ta", "ua"), ("tb", "ub")] {
        ok_json(&["export-units", "--ckpt", s(&fx.p(ckpt)), "--corpus", s(&a), "--out", s(&fx.p(out))]);
    }
    assert_eq!(dir_files(&fx.p("ua")), dir_files(&fx.p("ub")));
}

#[test]
fn missing_artifact_exits_nonzero_with_structured_error() {
    let fx = Fixture::new();
    let corpus = fx.corpus("corpus");
    let out = splitvoice(&[
        "run",
        "--corpus",
        s(&corpus),
        "--linguistic",
        s(&fx.p("nowhere")),
        "--out",
        s(&fx.p("run")),
    ]);
    assert!(!out.status.success());
    let err: Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(err["error"]["kind"], "missing-artifact");
    assert_eq!(err["error"]["stage"], "encode");
}

#[test]
fn bench_rejects_too_few_repeats() {
    let out = splitvoice(&["bench", "--repeats", "2", "--out", "/nonexistent"]);
    assert!(!out.status.success());
    let err: Value = serde_json::from_slice(&out.stderr).unwrap();
    assert!(err["error"]["message"].as_str().unwrap().contains("3 repeats"));
}
