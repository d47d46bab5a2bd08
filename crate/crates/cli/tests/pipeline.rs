use std::fs;
use std::path::Path;
use std::process::Command;

use gnss_fsl::fsl::LossKind;
use gnss_fsl_cli::manifest::{manifest_file, RunManifest};
use gnss_fsl_cli::stages::{self, StageContext};
use gnss_fsl_cli::{CliError, MapSource, PipelineConfig};

const TINY_COUNTS: [usize; 11] = [8; 11];

fn tiny_config() -> PipelineConfig {
    PipelineConfig {
        loss: LossKind::Quadruplet,
        alpha1: 2.0,
        alpha2: 5.0,
        epochs: 2,
        episodes_per_epoch: 2,
        batch_size: 8,
        tuples_per_step: 4,
        audit_size: 8,
        channels: vec![4, 8],
        embed_dim: 8,
        k_shot: 2,
        similarity_map: MapSource::Computed,
        ensemble_size: 2,
        ensemble_epochs: 1,
        post_train_epochs: 1,
        tsne_perplexity: 5.0,
        tsne_iterations: 100,
        ..PipelineConfig::default()
    }
}

fn tiny_corpus(dir: &Path) {
    stages::gen_data(dir, "desk", 42, Some(TINY_COUNTS.to_vec())).unwrap();
}

fn context(root: &Path) -> StageContext {
    StageContext { corpus: root.join("corpus"), run: root.join("run"), allow_config_change: false }
}

fn read(dir: &Path, file: &str) -> Vec<u8> {
    fs::read(dir.join(file)).unwrap()
}

#[test]
fn full_chain_emits_linked_reports() {
    let root = tempfile::tempdir().unwrap();
    let ctx = context(root.path());
    tiny_corpus(&ctx.corpus);
    let cfg = tiny_config();
    let manifests = stages::run_chain(&ctx, &cfg, true).unwrap();
    let names: Vec<&str> = manifests.iter().map(|m| m.stage.as_str()).collect();
    assert_eq!(names, ["ensemble", "mine", "train", "adapt", "eval", "embed"]);
    for f in [
        stages::SIMILARITY_FILE,
        stages::UNCERTAINTY_FILE,
        stages::MODEL_FILE,
        stages::TRAIN_LOG_FILE,
        stages::ADAPTED_FILE,
        stages::PROTOTYPES_FILE,
        stages::METRICS_FILE,
        stages::CONFUSION_FILE,
        stages::TSNE_FILE,
    ] {
        assert!(ctx.run.join(f).exists(), "{f}");
    }
    let header = String::from_utf8(read(&ctx.run, stages::UNCERTAINTY_FILE)).unwrap();
    assert!(header.starts_with("sample_id,true_label,predicted_label,aleatoric_trace,epistemic_trace\n"));

    // Each stage links to the sealed hash of its predecessor.
    for pair in manifests.windows(2).skip(1) {
        let up = pair[1].upstream.iter().find(|u| u.stage == pair[0].stage);
        if pair[1].stage != "embed" {
            assert_eq!(up.unwrap().hash, pair[0].hash, "{} -> {}", pair[0].stage, pair[1].stage);
        }
    }
    let eval = RunManifest::load(&ctx.run.join(manifest_file("eval")), "test").unwrap();
    assert_eq!(eval.config_hash.as_deref(), Some(cfg.hash().as_str()));
    assert_eq!(eval.master_seed, 42);
}

#[test]
fn eval_is_idempotent_and_handles_untrained_networks() {
    let root = tempfile::tempdir().unwrap();
    let ctx = context(root.path());
    tiny_corpus(&ctx.corpus);
    let cfg = PipelineConfig { epochs: 0, similarity_map: MapSource::PaperFixture, post_train_epochs: 0, ..tiny_config() };
    stages::run_chain(&ctx, &cfg, false).unwrap();
    let first = read(&ctx.run, stages::METRICS_FILE);
    stages::eval_stage(&ctx, &cfg).unwrap();
    assert_eq!(first, read(&ctx.run, stages::METRICS_FILE));
    let text = String::from_utf8(first).unwrap();
    assert!(text.starts_with("metric,value\naccuracy,"));
    assert!(text.contains("adaptation_accuracy,"));
}

#[test]
fn upstream_failures_are_named() {
    let root = tempfile::tempdir().unwrap();
    let ctx = context(root.path());
    let cfg = PipelineConfig { similarity_map: MapSource::PaperFixture, ..tiny_config() };
    match stages::train_stage(&ctx, &cfg) {
        Err(CliError::MissingArtifact { stage, path }) => {
            assert_eq!(stage, "train");
            assert!(path.ends_with("run-gen-data.json"));
        }
        other => panic!("{other:?}"),
    }
    tiny_corpus(&ctx.corpus);
    match stages::adapt_stage(&ctx, &cfg) {
        Err(CliError::MissingArtifact { path, .. }) => assert!(path.ends_with("run-train.json")),
        other => panic!("{other:?}"),
    }
    stages::train_stage(&ctx, &cfg).unwrap();
    fs::remove_file(ctx.run.join(stages::MODEL_FILE)).unwrap();
    match stages::adapt_stage(&ctx, &cfg) {
        Err(CliError::MissingArtifact { path, .. }) => assert!(path.ends_with(stages::MODEL_FILE)),
        other => panic!("{other:?}"),
    }
}

#[test]
fn config_changes_need_the_override() {
    let root = tempfile::tempdir().unwrap();
    let mut ctx = context(root.path());
    tiny_corpus(&ctx.corpus);
    let cfg = PipelineConfig { similarity_map: MapSource::PaperFixture, post_train_epochs: 0, ..tiny_config() };
    stages::train_stage(&ctx, &cfg).unwrap();
    let changed = PipelineConfig { k_shot: 3, ..cfg.clone() };
    assert!(matches!(stages::adapt_stage(&ctx, &changed), Err(CliError::ConfigMismatch { .. })));
    ctx.allow_config_change = true;
    stages::adapt_stage(&ctx, &changed).unwrap();
}

#[test]
fn corpus_generation_is_deterministic_and_tamper_evident() {
    let root = tempfile::tempdir().unwrap();
    let (a, b) = (root.path().join("a"), root.path().join("b"));
    tiny_corpus(&a);
    tiny_corpus(&b);
    let mut files: Vec<_> = fs::read_dir(&a).unwrap().map(|e| e.unwrap().file_name()).collect();
    files.sort();
    assert_eq!(files.len(), 88 + 3);
    // Manifests differ only in wall-clock timings.
    let gen = manifest_file("gen-data");
    for f in files.iter().filter(|f| **f != *gen) {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f:?}");
    }
    let (ma, mb) = (RunManifest::load(&a.join(&gen), "t").unwrap(), RunManifest::load(&b.join(&gen), "t").unwrap());
    assert_eq!((ma.corpus_hash, ma.outputs), (mb.corpus_hash, mb.outputs));
    let ctx = StageContext { corpus: a.clone(), run: root.path().join("run"), allow_config_change: false };
    fs::write(a.join("000005.gimg"), b"GNSSIMG1tampered").unwrap();
    let cfg = PipelineConfig { similarity_map: MapSource::PaperFixture, ..tiny_config() };
    assert!(matches!(stages::train_stage(&ctx, &cfg), Err(CliError::Tampered { .. })));
}

#[test]
fn desk_profile_floors_rare_classes() {
    let root = tempfile::tempdir().unwrap();
    assert!(matches!(stages::gen_data(root.path(), "desk", 1, Some(vec![7; 11])), Err(CliError::Config(_))));
    assert!(matches!(stages::gen_data(root.path(), "desk", 1, Some(vec![8; 10])), Err(CliError::Config(_))));
    let p = gnss_fsl::corpus::CorpusProfile::desk();
    assert_eq!(p.counts[6], 8);
    assert_eq!(p.total(), 2000);
}

#[test]
fn binary_reports_errors_as_json() {
    let root = tempfile::tempdir().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_gnss-fsl"))
        .args(["train", "--corpus"])
        .arg(root.path().join("missing"))
        .arg("--run")
        .arg(root.path().join("run"))
        .output()
        .unwrap();
    assert!(!out.status.success());
    let err: serde_json::Value = serde_json::from_slice(out.stderr.trim_ascii()).unwrap();
    assert_eq!(err["error"], "missing_artifact");
    assert!(err["message"].as_str().unwrap().contains("run-gen-data.json"));

    let cfg_path = root.path().join("bad.json");
    fs::write(&cfg_path, r#"{"loss": "hinge"}"#).unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_gnss-fsl"))
        .args(["eval", "--corpus", ".", "--run", "."])
        .arg("--config")
        .arg(&cfg_path)
        .output()
        .unwrap();
    assert!(!out.status.success());
    let err: serde_json::Value = serde_json::from_slice(out.stderr.trim_ascii()).unwrap();
    assert_eq!(err["error"], "invalid_config");
}

#[test]
fn binary_generates_a_corpus() {
    let root = tempfile::tempdir().unwrap();
    let dir = root.path().join("c");
    let status = Command::new(env!("CARGO_BIN_EXE_gnss-fsl"))
        .args(["gen-data", "--profile", "desk", "--seed", "3", "--counts", "8,8,8,8,8,8,8,8,8,8,8", "--out"])
        .arg(&dir)
        .env("RUST_LOG", "error")
        .status()
        .unwrap();
    assert!(status.success());
    let records: Vec<serde_json::Value> = serde_json::from_slice(&fs::read(dir.join("manifest.json")).unwrap()).unwrap();
    let images = fs::read_dir(&dir).unwrap().filter(|e| e.as_ref().unwrap().path().extension().is_some_and(|x| x == "gimg")).count();
    assert_eq!(records.len(), images);
}
