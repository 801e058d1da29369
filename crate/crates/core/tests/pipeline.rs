//! End-to-end pipeline behaviour on a small planted-rule workspace.

use std::path::{Path, PathBuf};

use nllf_core::pipeline::synthetic::{self, SyntheticSpec};
use nllf_core::pipeline::{Pipeline, PipelineConfig, Stage, Status};
use nllf_core::Error;

fn workspace(dir: &Path) -> PathBuf {
    synthetic::write_workspace(&dir.join("ws"), &SyntheticSpec { n: 400, ..SyntheticSpec::default() }).unwrap()
}

fn pipeline(config: &Path, run: &Path) -> Pipeline {
    Pipeline::new(PipelineConfig::load(config).unwrap(), run).unwrap()
}

fn files_under(dir: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    if let Ok(rd) = std::fs::read_dir(dir) {
        for e in rd.flatten() {
            if e.path().is_dir() {
                out.extend(files_under(&e.path()));
            } else {
                out.push(e.path());
            }
        }
    }
    out
}

#[test]
fn full_run_then_rerun_is_up_to_date() {
    let dir = tempfile::tempdir().unwrap();
    let config = workspace(dir.path());
    let run = dir.path().join("run");
    let first = pipeline(&config, &run).run_all().unwrap();
    assert!(first.iter().all(|o| o.status == Status::Ran));
    assert!(first.iter().any(|o| o.llm_calls > 0));
    for f in ["selection.json", "tree.json", "reports/evaluation.json", "reports/explanations.md"] {
        assert!(run.join(f).exists(), "{f} missing");
    }

    let second = pipeline(&config, &run).run_all().unwrap();
    assert!(second.iter().all(|o| o.status == Status::UpToDate), "{second:?}");

    let p = pipeline(&config, &run);
    let weak = p.manifest().latest("weak-label").expect("weak-label entry");
    assert_eq!(weak.notes["p_l"], serde_json::json!(0.10));
    assert!(weak.seeds.contains_key("p_l_sample"));
}

#[test]
fn dry_run_writes_nothing_and_calls_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let config = workspace(dir.path());
    let run = dir.path().join("run");
    let mut p = pipeline(&config, &run);
    p.dry_run = true;
    let out = p.run_all().unwrap();
    assert!(out.iter().all(|o| o.status == Status::Planned && o.llm_calls == 0));
    assert!(out.iter().any(|o| o.estimated_llm_calls.unwrap_or(0) > 0));
    assert!(files_under(&run).is_empty(), "{:?}", files_under(&run));
}

#[test]
fn edited_output_is_reported_stale() {
    let dir = tempfile::tempdir().unwrap();
    let config = workspace(dir.path());
    let run = dir.path().join("run");
    pipeline(&config, &run).run_all().unwrap();

    let sel = run.join("selection.json");
    let mut text = std::fs::read_to_string(&sel).unwrap();
    text.push('\n');
    std::fs::write(&sel, text).unwrap();
    let err = pipeline(&config, &run).run_stage(Stage::TrainTree).unwrap_err();
    assert!(matches!(err, Error::Stale { .. }), "{err}");
    assert_eq!(err.exit_code(), 4);

    // Regenerating the edited artifact clears it.
    let mut p = pipeline(&config, &run);
    p.force = true;
    p.run_stage(Stage::SelectFeatures).unwrap();
    pipeline(&config, &run).run_stage(Stage::TrainTree).unwrap();
}

#[test]
fn missing_upstream_stages_are_listed() {
    let dir = tempfile::tempdir().unwrap();
    let config = workspace(dir.path());
    let err = pipeline(&config, &dir.path().join("run")).run_stage(Stage::TrainTree).unwrap_err();
    match &err {
        Error::MissingStages(stages) => {
            assert_eq!(stages.first().map(String::as_str), Some("ingest"));
            assert!(stages.iter().any(|s| s == "select-features"));
        }
        other => panic!("unexpected {other}"),
    }
    assert_eq!(err.exit_code(), 4);
}
