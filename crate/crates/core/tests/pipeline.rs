use std::fs;
use std::path::Path;

use splitvoice_core::corpus::{generate_corpus, CorpusConfig};
use splitvoice_core::pipeline::*;
use splitvoice_core::quantizers::UNIT_INDEX_FILE;
use splitvoice_core::training::{train, ModelKind, TrainConfig};
use splitvoice_core::Error;

fn setup(root: &Path) -> PipelineConfig {
    let corpus_cfg = CorpusConfig {
        speakers: 2,
        symbols: 4,
        utterances: 16,
        min_symbols: 2,
        max_symbols: 4,
        seed: 3,
        ..CorpusConfig::default()
    };
    let corpus = generate_corpus(&corpus_cfg, root.join("corpus")).unwrap();
    let mut ling = TrainConfig::new(ModelKind::VqVae);
    ling.steps = 10;
    ling.codes = 8;
    train(&ling, &corpus).unwrap().save(root.join("ling")).unwrap();
    let mut para = TrainConfig::new(ModelKind::Paralinguistic);
    para.steps = 5;
    para.head_steps = 20;
    train(&para, &corpus).unwrap().save(root.join("para")).unwrap();
    PipelineConfig {
        corpus: root.join("corpus"),
        linguistic: root.join("ling"),
        paralinguistic: Some(root.join("para")),
        out: root.join("run"),
        features_baseline: true,
        ..PipelineConfig::default()
    }
}

#[test]
fn end_to_end_respects_the_boundary() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = setup(dir.path());
    let report = run_pipeline(&cfg).unwrap();
    assert!(report.succeeded(), "{:?}", report.stages);
    assert_eq!(report.stage(Stage::Decode).unwrap().status, StageStatus::NotImplemented);

    assert!(!report.boundary.cloud_read_signal);
    let cloud: Vec<_> = report
        .boundary
        .reads
        .iter()
        .filter(|r| matches!(r.stage, Stage::Classify | Stage::Evaluate))
        .collect();
    assert!(!cloud.is_empty());
    assert!(cloud
        .iter()
        .all(|r| !matches!(r.kind, FileKind::Waveform | FileKind::Checkpoint)));
    assert!(report.boundary.reads.iter().any(|r| r.kind == FileKind::Waveform && r.stage == Stage::Encode));

    let payload = report.payload.as_ref().unwrap();
    assert_eq!(payload.unit_payload_bytes, 2 * payload.frames);
    assert_eq!(payload.feature_equivalent_bytes, 320 * payload.frames);
    assert!(payload.reduction >= 100.0);
    assert!(cfg.units_dir().join(UNIT_INDEX_FILE).exists());

    assert_eq!(report.metrics.leakage.len(), 4);
    assert_eq!(report.metrics.local_leakage.len(), 1);
    assert_eq!(report.metrics.abx.len(), 2);
    assert!(report.metrics.ssimi.is_some());
    assert!(report.encoder.unwrap().audio_seconds > 0.0);

    let text = fs::read_to_string(cfg.out.join(REPORT_FILE)).unwrap();
    let back: PipelineReport = serde_json::from_str(&text).unwrap();
    assert_eq!(back, report);

    let again = run_pipeline(&cfg).unwrap();
    assert_eq!(again.without_timing(), report.without_timing());

    let int8 = run_pipeline(&PipelineConfig {
        precision: Precision::Int8,
        out: dir.path().join("run8"),
        ..cfg.clone()
    })
    .unwrap();
    assert!(int8.succeeded());
    assert_eq!(int8.payload.unwrap().frames, payload.frames);
}

#[test]
fn missing_checkpoint_names_the_stage() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = setup(dir.path());
    let broken = PipelineConfig {
        linguistic: dir.path().join("absent"),
        ..cfg
    };
    match run_pipeline(&broken) {
        Err(Error::MissingArtifact { stage, path }) => {
            assert_eq!(stage, "encode");
            assert!(path.ends_with("absent"));
        }
        other => panic!("{other:?}"),
    }
}

#[test]
fn failing_stage_leaves_a_partial_report() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = setup(dir.path());
    run_pipeline(&PipelineConfig {
        stages: vec![Stage::Encode, Stage::Quantize],
        ..cfg.clone()
    })
    .unwrap();
    let index: serde_json::Value = serde_json::from_str(&fs::read_to_string(cfg.units_dir().join(UNIT_INDEX_FILE)).unwrap()).unwrap();
    let first = index["files"][0]["file"].as_str().unwrap();
    fs::write(cfg.units_dir().join(first), b"not a tensor").unwrap();

    let cloud = PipelineConfig {
        stages: vec![Stage::Classify, Stage::Evaluate],
        ..cfg.clone()
    };
    let report = run_pipeline(&cloud).unwrap();
    assert!(!report.succeeded());
    let classify = report.stage(Stage::Classify).unwrap();
    assert_eq!(classify.status, StageStatus::Failed);
    assert!(classify.error.is_some());
    assert_eq!(report.stage(Stage::Evaluate).unwrap().status, StageStatus::Skipped);
    assert!(cloud.out.join(REPORT_FILE).exists());
}

#[test]
fn cloud_only_run_without_units_is_a_missing_artifact() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = setup(dir.path());
    let cloud = PipelineConfig {
        stages: vec![Stage::Classify],
        out: dir.path().join("empty"),
        ..cfg
    };
    match run_pipeline(&cloud) {
        Err(Error::MissingArtifact { stage, .. }) => assert_eq!(stage, "classify"),
        other => panic!("{other:?}"),
    }
}

#[test]
fn bench_tabulates_both_precisions() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = PipelineConfig {
        stages: vec![Stage::Encode, Stage::Quantize],
        paralinguistic: None,
        features_baseline: false,
        ..setup(dir.path())
    };
    let report = bench(&cfg, 3).unwrap();
    assert_eq!(report.stages.len(), 2);
    for s in &report.stages {
        assert_eq!(s.fp32_ms.len(), 3);
        assert_eq!(s.int8_ms.len(), 3);
        assert!(s.fp32_min_ms <= s.fp32_median_ms);
        assert!(s.int8_over_fp32 > 0.0);
    }
    assert!(report.fp32_encoder_ms_per_audio_second > 0.0);
}
