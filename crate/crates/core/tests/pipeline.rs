use std::process::Command;

use neurodecode::config::ExperimentConfig;
use neurodecode::pipeline::{run_all, run_stage, RunDir, Stage, StageStatus};
use neurodecode::Error;

fn small_config() -> ExperimentConfig {
    ExperimentConfig::default()
        .with_overrides(&[
            "data.n_train=24",
            "data.n_test=6",
            "data.n_scenarios=6",
            "data.scenario_repeats=1",
            "pretrain.steps=3",
            "contrastive.steps=3",
            "contrastive.batch_size=8",
            "prior.steps=3",
            "prior.batch_size=8",
            "prior.sample_steps=4",
            "prior.n_candidates=1",
            "decoder.steps=3",
            "metrics.n_trials=20",
            "metrics.n_perm=20",
            "analysis.k_max=6",
            "analysis.max_iter=20",
        ])
        .unwrap()
}

#[test]
fn rerun_is_cached_and_edits_invalidate_downstream_only() {
    let dir = tempfile::tempdir().unwrap();
    let run = RunDir::new(dir.path().to_path_buf());
    let cfg = small_config();

    let first = run_all(&run, &cfg).unwrap();
    assert!(first.iter().all(|o| o.status == StageStatus::Ran));
    assert!(run.path("report/table.csv").exists());
    let entries = run.manifest().unwrap().entries.len();

    let second = run_all(&run, &cfg).unwrap();
    for o in &second {
        let expect = if o.stage == Stage::Report { StageStatus::Ran } else { StageStatus::Cached };
        assert_eq!(o.status, expect, "{}", o.stage.name());
    }
    // The manifest only grows.
    assert_eq!(run.manifest().unwrap().entries.len(), entries + 1);

    let edited = cfg.with_overrides(&["contrastive.steps=4"]).unwrap();
    assert_eq!(run_stage(&run, Stage::Pretrain, &edited).unwrap().status, StageStatus::Cached);
    assert_eq!(run_stage(&run, Stage::Contrastive, &edited).unwrap().status, StageStatus::Ran);
    // Saliency depends on the contrastive stage and is now stale.
    assert!(matches!(run.require(&run.manifest().unwrap(), Stage::Saliency, &edited.resolved().unwrap()), Err(Error::MissingArtifact { .. })));
}

#[test]
fn stage_without_upstream_reports_missing_artifact() {
    let dir = tempfile::tempdir().unwrap();
    let run = RunDir::new(dir.path().to_path_buf());
    let err = run_stage(&run, Stage::Evaluate, &small_config()).unwrap_err();
    assert!(matches!(err, Error::MissingArtifact { .. }), "{err}");
    assert_eq!(err.exit_code(), 3);
}

#[test]
fn concurrent_run_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    let run = RunDir::new(dir.path().to_path_buf());
    let held = run.lock().unwrap();
    assert!(matches!(run_stage(&run, Stage::Synth, &small_config()), Err(Error::Locked(_))));
    drop(held);
    assert!(run_stage(&run, Stage::Synth, &small_config()).is_ok());
}

#[test]
fn cli_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let bin = env!("CARGO_BIN_EXE_neurodecode");
    let status = Command::new(bin).arg("--run-dir").arg(dir.path()).arg("evaluate").status().unwrap();
    assert_eq!(status.code(), Some(3));

    let out = Command::new(bin).arg("--run-dir").arg(dir.path()).args(["--set", "data.n_train=24", "synth"]).output().unwrap();
    assert!(out.status.success());
    let stdout = String::from_utf8_lossy(&out.stdout);
    let fields: Vec<&str> = stdout.split_whitespace().collect();
    assert_eq!(fields[..2], ["synth", "ran"], "{stdout}");

    let status = Command::new(bin).arg("--run-dir").arg(dir.path()).args(["--set", "no.such=1", "synth"]).status().unwrap();
    assert!(!status.success());
}
