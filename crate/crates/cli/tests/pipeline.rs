use std::fs;
use std::path::Path;
use std::process::Command;

use tokenhance::enhance::ModelKind;
use tokenhance_cli::config::ExperimentConfig;
use tokenhance_cli::manifest::{StageError, MANIFEST_FILE};
use tokenhance_cli::pipeline::{Pipeline, Stage, ALL_MODELS};
use tokenhance_cli::report::{DEPTH_FILE, GROUPS_FILE, REPORT_FILE};

const TINY: &str = r#"
[corpus]
n_train = 24
n_dev = 4
n_test = 8

[tokenizer]
k = 12
max_train_frames = 3000

[bpe]
target_vocab = 20

[t2t.train]
epochs = 1
[v2t_mlp.train]
epochs = 1
[v2t_tcn.train]
epochs = 1
[w2t.train]
epochs = 1
[asr_backend.train]
epochs = 1

[depth_sweep]
depths = [1, 2]
"#;

fn tiny_config(dir: &Path) -> ExperimentConfig {
    ExperimentConfig {
        out_dir: dir.to_path_buf(),
        ..ExperimentConfig::from_toml_str(TINY).unwrap()
    }
}

fn all_stages() -> Vec<Stage> {
    let mut stages = vec![Stage::Synth, Stage::Tokenize, Stage::Bpe];
    stages.extend(ALL_MODELS.map(Stage::Train));
    stages.extend([Stage::Eval, Stage::Report]);
    stages
}

fn completed_run() -> (tempfile::TempDir, Pipeline) {
    let dir = tempfile::tempdir().unwrap();
    let mut pipeline = Pipeline::new(tiny_config(dir.path())).unwrap();
    pipeline.run_all().unwrap();
    (dir, pipeline)
}

fn stage_error(err: &anyhow::Error) -> &StageError {
    err.downcast_ref::<StageError>()
        .unwrap_or_else(|| panic!("expected a stage error, got {err:#}"))
}

#[test]
fn rerun_is_a_no_op() {
    let (dir, _) = completed_run();
    let manifest_before = fs::read(dir.path().join(MANIFEST_FILE)).unwrap();
    let report_before = fs::read(dir.path().join(REPORT_FILE)).unwrap();
    let mut again = Pipeline::new(tiny_config(dir.path())).unwrap();
    for stage in all_stages() {
        assert!(!again.run(stage).unwrap(), "{} reran", stage.name());
    }
    assert_eq!(
        fs::read(dir.path().join(MANIFEST_FILE)).unwrap(),
        manifest_before
    );
    assert_eq!(
        fs::read(dir.path().join(REPORT_FILE)).unwrap(),
        report_before
    );
    for file in [REPORT_FILE, GROUPS_FILE, DEPTH_FILE] {
        assert!(dir.path().join(file).is_file(), "{file}");
    }
}

#[test]
fn modified_token_file_makes_eval_stale() {
    let (dir, _) = completed_run();
    let tokens = dir.path().join("tokens/test.noisy.dup.txt");
    let mut text = fs::read_to_string(&tokens).unwrap();
    text = text.replacen('\t', "\t0 ", 1);
    fs::write(&tokens, text).unwrap();

    let mut pipeline = Pipeline::new(tiny_config(dir.path())).unwrap();
    let err = pipeline.run(Stage::Eval).unwrap_err();
    match stage_error(&err) {
        StageError::Stale {
            stage,
            command,
            path,
        } => {
            assert_eq!(stage, "tokenize");
            assert_eq!(command, "tokenize");
            assert_eq!(path, "tokens/test.noisy.dup.txt");
        }
        other => panic!("expected a stale artifact, got {other}"),
    }
    assert!(err.to_string().contains("tokenhance tokenize"));
}

#[test]
fn missing_upstream_stage_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let mut pipeline = Pipeline::new(tiny_config(dir.path())).unwrap();
    let err = pipeline.run(Stage::Train(ModelKind::T2t)).unwrap_err();
    assert!(matches!(stage_error(&err), StageError::Missing { stage, .. } if stage == "synth"));
}

#[test]
fn config_change_marks_downstream_outdated() {
    let (dir, _) = completed_run();
    let mut cfg = tiny_config(dir.path());
    cfg.bpe.target_vocab = 22;
    let mut pipeline = Pipeline::new(cfg).unwrap();
    let err = pipeline.verify(Stage::Eval).unwrap_err();
    assert!(matches!(stage_error(&err), StageError::Outdated { stage, .. } if stage == "bpe"));
    // Rerunning BPE leaves the enhancers current but the backend outdated.
    assert!(pipeline.run(Stage::Bpe).unwrap());
    pipeline.verify(Stage::Train(ModelKind::W2t)).unwrap();
    let err = pipeline
        .verify(Stage::Train(ModelKind::AsrBackend))
        .unwrap_err();
    assert!(
        matches!(stage_error(&err), StageError::Outdated { stage, .. } if stage == "train:asr-backend")
    );
}

#[test]
fn checkpoints_and_logs_are_written() {
    let (dir, _) = completed_run();
    for kind in ALL_MODELS {
        let slug = kind.slug();
        for suffix in ["ckpt.json", "log.jsonl", "meta.json"] {
            assert!(
                dir.path().join(format!("models/{slug}.{suffix}")).is_file(),
                "{slug}.{suffix}"
            );
        }
    }
}

#[test]
fn binary_runs_stages_and_rejects_unknown_models() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("tiny.toml");
    fs::write(&config, TINY).unwrap();
    let out = dir.path().join("run");
    let bin = env!("CARGO_BIN_EXE_tokenhance");
    let status = Command::new(bin)
        .args([
            "--config",
            config.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
            "--jobs",
            "1",
            "synth",
        ])
        .status()
        .unwrap();
    assert!(status.success());
    assert!(out.join("corpus/train.jsonl").is_file());

    let output = Command::new(bin)
        .args([
            "--config",
            config.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
            "train",
            "t3t",
        ])
        .output()
        .unwrap();
    assert!(!output.status.success());

    let output = Command::new(bin)
        .args([
            "--config",
            config.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
            "eval",
        ])
        .output()
        .unwrap();
    assert!(!output.status.success());
    assert!(String::from_utf8_lossy(&output.stderr).contains("run `tokenhance tokenize` first"));
}

#[test]
fn shipped_configs_parse() {
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let default = ExperimentConfig::load(&root.join("default.toml")).unwrap();
    assert_eq!(
        ExperimentConfig {
            out_dir: ExperimentConfig::default().out_dir,
            ..default
        },
        ExperimentConfig::default()
    );
    ExperimentConfig::load(&root.join("smoke.toml")).unwrap();
}
