use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use basn::models::UNetSpec;
use basn::pipeline::checkpoint::Checkpoint;
use basn::pipeline::data::load_corpus;
use basn::pipeline::stego::{manifest_path, StegoManifest};
use basn::pipeline::{
    cmd_embed, cmd_evaluate, cmd_extract, cmd_train, CodecOverrides, EmbedRequest, EvaluateRequest, ExtractRequest,
    ModelSet, RunConfig, Stage,
};
use basn::BasnError;
use tempfile::TempDir;

fn tiny(dir: &Path) -> RunConfig {
    let mut cfg = RunConfig::toy(dir);
    cfg.dataset.image_size = 32;
    cfg.dataset.train_images = 8;
    cfg.dataset.holdout_images = 4;
    cfg.network.unet = UNetSpec {
        in_channels: 3,
        base_channels: 4,
        depth: 2,
    };
    cfg.classifier.epochs = 2;
    cfg.itc.epochs = 2;
    cfg.mfd_phase1.epochs = 2;
    cfg.mfd_phase2.epochs = 2;
    cfg.finetune.phase1_epochs = 1;
    cfg.finetune.phase2_epochs = 1;
    cfg.evaluate.detector_images = 4;
    cfg.evaluate.null_images = 4;
    cfg
}

/// One fully trained tiny run shared by the tests in this file.
fn trained() -> &'static (TempDir, RunConfig) {
    static RUN: OnceLock<(TempDir, RunConfig)> = OnceLock::new();
    RUN.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny(&dir.path().join("run"));
        cmd_train(&cfg, &Stage::ALL).unwrap();
        (dir, cfg)
    })
}

fn lsm0() -> CodecOverrides {
    CodecOverrides {
        lsm_k: Some(0),
        ..Default::default()
    }
}

/// Embeds a short payload into the first held-out cover under `dir`.
fn embed_sample(cfg: &RunConfig, dir: &Path) -> (PathBuf, PathBuf) {
    std::fs::create_dir_all(dir).unwrap();
    let cover = dir.join("cover.png");
    load_corpus(cfg).unwrap().holdout[0].save_png(&cover).unwrap();
    let payload = dir.join("payload.bin");
    std::fs::write(&payload, b"tiny msg").unwrap();
    let output = dir.join("stego.png");
    cmd_embed(
        cfg,
        &EmbedRequest {
            cover,
            payload: payload.clone(),
            output: output.clone(),
            overrides: lsm0(),
            models: ModelSet::Auto,
        },
    )
    .unwrap();
    (output, payload)
}

#[test]
fn itc_only_writes_one_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path());
    let report = cmd_train(&cfg, &Stage::parse_selection("itc-only").unwrap()).unwrap();
    assert_eq!(report.outcomes.len(), 1);
    let files: Vec<_> = std::fs::read_dir(cfg.checkpoint_dir()).unwrap().collect();
    assert_eq!(files.len(), 1);
    assert!(Stage::Itc.checkpoint_path(&cfg).exists());
}

#[test]
fn missing_prerequisite_names_the_stage() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path());
    let err = cmd_train(&cfg, &[Stage::MfdPhase2]).unwrap_err();
    match err {
        BasnError::Precondition(msg) => assert!(msg.contains("mfd-phase1"), "{msg}"),
        other => panic!("expected a precondition error, got {other}"),
    }
    assert!(!Stage::MfdPhase2.checkpoint_path(&cfg).exists());
}

#[test]
fn every_stage_leaves_a_checkpoint_and_log() {
    let (_, cfg) = trained();
    for s in Stage::ALL {
        assert!(Checkpoint::load(&s.checkpoint_path(cfg)).is_ok(), "{s}");
        assert!(s.log_path(cfg).exists(), "{s}");
    }
}

#[test]
fn tampered_checkpoint_is_rejected() {
    let (dir, cfg) = trained();
    let copy = dir.path().join("tampered.json");
    let text = std::fs::read_to_string(Stage::Itc.checkpoint_path(cfg)).unwrap();
    let mut json: serde_json::Value = serde_json::from_str(&text).unwrap();
    json["body"]["stage"] = "itc-edited".into();
    std::fs::write(&copy, json.to_string()).unwrap();
    let err = Checkpoint::load(&copy).unwrap_err().to_string();
    assert!(err.contains("digest mismatch"), "{err}");
}

#[test]
fn oracle_plan_extraction_is_exact() {
    let (dir, cfg) = trained();
    let (stego, payload) = embed_sample(cfg, &dir.path().join("oracle"));
    let manifest = StegoManifest::load(&manifest_path(&stego)).unwrap();
    assert!(manifest.payload_bpp > 0.0);
    let r = cmd_extract(
        cfg,
        &ExtractRequest {
            stego,
            output: None,
            reference: Some(payload.clone()),
            overrides: CodecOverrides::default(),
            oracle_plan: true,
            models: ModelSet::Auto,
        },
    )
    .unwrap();
    assert_eq!(r.bser, Some(0.0));
    assert_eq!(r.payload.unwrap(), std::fs::read(payload).unwrap());
    assert!(r.warnings.is_empty());
}

#[test]
fn oracle_plan_without_capacity_map_is_a_precondition_error() {
    let (dir, cfg) = trained();
    let (stego, _) = embed_sample(cfg, &dir.path().join("no-map"));
    let m = StegoManifest::load(&manifest_path(&stego)).unwrap();
    std::fs::remove_file(stego.with_file_name(&m.capacity_map)).unwrap();
    let err = cmd_extract(
        cfg,
        &ExtractRequest {
            stego,
            oracle_plan: true,
            ..Default::default()
        },
    )
    .unwrap_err();
    assert!(matches!(err, BasnError::Precondition(_)), "{err}");
}

#[test]
fn checkpoint_mismatch_warns_and_still_extracts() {
    let (dir, cfg) = trained();
    let (stego, payload) = embed_sample(cfg, &dir.path().join("mismatch"));
    let mpath = manifest_path(&stego);
    let mut m = StegoManifest::load(&mpath).unwrap();
    m.itc_checkpoint = "0".repeat(64);
    m.save(&mpath).unwrap();
    let r = cmd_extract(
        cfg,
        &ExtractRequest {
            stego,
            reference: Some(payload),
            ..Default::default()
        },
    )
    .unwrap();
    assert_eq!(r.warnings.len(), 1);
    assert!(r.warnings[0].contains("differs"));
    assert!(r.bser.is_some());
}

#[test]
fn evaluate_writes_reports() {
    let (_, cfg) = trained();
    let r = cmd_evaluate(cfg, &EvaluateRequest::default()).unwrap();
    assert_eq!(r.strategies.len(), 2 * cfg.evaluate.strategies.len());
    for f in ["strategies.tsv", "detectors.tsv", "roc.tsv", "roc.png"] {
        assert!(r.report_dir.join(f).exists(), "{f}");
    }
}

#[test]
fn single_image_corpus_is_rejected() {
    let (dir, cfg) = trained();
    let covers = dir.path().join("one-cover");
    std::fs::create_dir_all(&covers).unwrap();
    load_corpus(cfg).unwrap().holdout[0].save_png(&covers.join("a.png")).unwrap();
    let err = cmd_evaluate(
        cfg,
        &EvaluateRequest {
            covers: Some(covers),
            ..Default::default()
        },
    )
    .unwrap_err();
    assert!(matches!(err, BasnError::InvalidArgument(_)), "{err}");
}
