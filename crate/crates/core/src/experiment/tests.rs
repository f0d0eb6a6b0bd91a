use super::*;
use crate::evaluator::{evaluate, MeasurementRecord, QuadraticEvaluator};
use crate::search::{SolutionSpec, SpecOrigin};

fn scaffold(run_id: &str) -> (tempfile::TempDir, Workspace) {
    let dir = tempfile::tempdir().unwrap();
    let ws = Workspace::init(
        &dir.path().join("ws"),
        &InitSource::Scaffold { goal: "toy".into(), entrypoint: None },
        run_id,
    )
    .unwrap();
    (dir, ws)
}

fn spec(parent: &str) -> SolutionSpec {
    SolutionSpec {
        spec_id: "spec-0".into(),
        summary: "write x".into(),
        instructions: String::new(),
        parent_branch: parent.into(),
        origin: SpecOrigin::Linear,
    }
}

/// Write params.txt, evaluate with the quadratic toy, commit, and close.
fn run_experiment(ws: &Workspace, parent: &str, branch: &str, x: i64) -> (CommitInfo, PublishResult) {
    let mut session = ws.open_session(parent, branch).unwrap();
    fs::write(session.worktree().join("params.txt"), x.to_string()).unwrap();
    let ev = QuadraticEvaluator::new(7);
    let cfg = EvaluatorConfig::default();
    let outcome = evaluate(&ev, session.worktree(), &session.artifact_dir(), &cfg).unwrap();
    let bundle = ArtifactBundle {
        spec: spec(parent),
        parent_branch: parent.into(),
        evaluator: "quadratic".into(),
        evaluator_config: cfg,
        beta: 0.25,
        rollout_records: outcome.rollout_records.clone(),
        aggregated: outcome.record.clone(),
        utility_estimate: outcome.utility_estimate,
        debug_tries: 0,
        logs: [("implement".to_string(), "wrote params\n".to_string())].into(),
    };
    let info = ws.commit_run(&mut session, &bundle).unwrap();
    let published = ws.close_session(&mut session).unwrap();
    (info, published)
}

#[test]
fn init_creates_root_branch() {
    let (_d, ws) = scaffold("r1");
    assert_eq!(ws.root_branch(), "kapso/r1/root");
    assert!(ws.branch_exists("kapso/r1/root"));
    assert_eq!(ws.branches().unwrap(), vec!["kapso/r1/root".to_string()]);
    assert_eq!(ws.read_file("kapso/r1/root", KEEP_FILE).unwrap(), b"");
}

#[test]
fn init_refuses_non_empty_target_and_bad_run_id() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("junk"), "x").unwrap();
    let src = InitSource::Scaffold { goal: "g".into(), entrypoint: None };
    assert!(matches!(Workspace::init(dir.path(), &src, "r"), Err(ExperimentError::TargetNotEmpty(_))));
    let empty = tempfile::tempdir().unwrap();
    assert!(matches!(Workspace::init(empty.path(), &src, "a b"), Err(ExperimentError::InvalidRunId(_))));
}

#[test]
fn snapshot_init_skips_git_metadata() {
    let src = tempfile::tempdir().unwrap();
    fs::write(src.path().join("main.py"), "print(1)\n").unwrap();
    fs::create_dir_all(src.path().join(".git")).unwrap();
    fs::write(src.path().join(".git/HEAD"), "junk").unwrap();
    let dir = tempfile::tempdir().unwrap();
    let ws = Workspace::init(&dir.path().join("w"), &InitSource::Snapshot { path: src.path().into() }, "s").unwrap();
    assert_eq!(ws.read_file("kapso/s/root", "main.py").unwrap(), b"print(1)\n");
}

#[test]
fn scaffold_writes_entrypoint_stub() {
    let dir = tempfile::tempdir().unwrap();
    let src = InitSource::Scaffold { goal: "g".into(), entrypoint: Some("run.sh".into()) };
    let ws = Workspace::init(&dir.path().join("w"), &src, "e").unwrap();
    assert_eq!(ws.read_file("kapso/e/root", "run.sh").unwrap(), b"");
}

#[test]
fn session_round_trip_publishes_branch() {
    let (_d, ws) = scaffold("r1");
    let root = ws.root_branch();
    let branch = ws.allocate_branch();
    assert_eq!(branch, "kapso/r1/exp-1");
    let (info, published) = run_experiment(&ws, &root, &branch, 7);
    assert!(published.published);
    assert!(ws.branch_exists(&branch));
    assert_eq!(ws.head(&branch).unwrap(), info.commit);
    assert!(ws.is_ancestor(&root, &branch));

    let manifest = ws.read_manifest(&branch).unwrap();
    assert_eq!(manifest, info.manifest);
    assert_eq!(manifest.utility_estimate, Some(0.0));
    assert_eq!(manifest.diff_summary.changed_paths, vec!["params.txt".to_string()]);
    assert_eq!(manifest.record_files, vec![".kapso/records/rollout-0.json".to_string()]);
    assert_eq!(manifest.log_files, vec![".kapso/logs/implement.log".to_string()]);
    assert!(manifest.artifact_files.iter().any(|a| a.ends_with("result.json")));
    assert!(!ws.root().join("sessions").join("kapso-r1-exp-1").exists());
}

#[test]
fn child_session_drops_inherited_bundle() {
    let (_d, ws) = scaffold("r1");
    let first = ws.allocate_branch();
    run_experiment(&ws, &ws.root_branch(), &first, 3);
    let session = ws.open_session(&first, "kapso/r1/exp-9").unwrap();
    assert_eq!(session.parent_head(), ws.head(&first).unwrap());
    assert!(!session.worktree().join(MANIFEST_PATH).exists());
    assert!(!session.worktree().join(RECORDS_DIR).exists());
    assert_eq!(fs::read_to_string(session.worktree().join("params.txt")).unwrap(), "3");
}

#[test]
fn session_state_machine() {
    let (_d, ws) = scaffold("r1");
    let root = ws.root_branch();
    let mut s = ws.open_session(&root, "kapso/r1/exp-1").unwrap();
    assert_eq!(s.state(), SessionState::Open);
    assert!(matches!(ws.close_session(&mut s), Err(ExperimentError::InvalidState { .. })));
    assert!(matches!(ws.open_session(&root, "kapso/r1/exp-1"), Err(ExperimentError::BranchExists(_))));
    ws.abandon_session(&mut s).unwrap();
    assert_eq!(s.state(), SessionState::Closed);
    assert!(!ws.branch_exists("kapso/r1/exp-1"));
    assert!(matches!(ws.open_session("nope", "kapso/r1/exp-2"), Err(ExperimentError::UnknownBranch(_))));
    assert!(matches!(ws.open_session(&root, "bad..name"), Err(ExperimentError::InvalidBranchName(_))));
}

#[test]
fn close_is_idempotent() {
    let (_d, ws) = scaffold("r1");
    let root = ws.root_branch();
    let mut s = ws.open_session(&root, "kapso/r1/exp-1").unwrap();
    fs::write(s.worktree().join("params.txt"), "1").unwrap();
    let bundle = ArtifactBundle {
        spec: spec(&root),
        parent_branch: root.clone(),
        evaluator: "quadratic".into(),
        evaluator_config: EvaluatorConfig::default(),
        beta: 0.0,
        rollout_records: vec![MeasurementRecord::error("boom")],
        aggregated: MeasurementRecord::error("boom"),
        utility_estimate: Some(f64::NEG_INFINITY),
        debug_tries: 1,
        logs: Default::default(),
    };
    ws.commit_run(&mut s, &bundle).unwrap();
    let a = ws.close_session(&mut s).unwrap();
    let b = ws.close_session(&mut s).unwrap();
    assert_eq!(a, b);
    let m = ws.read_manifest("kapso/r1/exp-1").unwrap();
    assert_eq!(m.utility_estimate, Some(f64::NEG_INFINITY));
    assert_eq!(m.status, crate::evaluator::Status::Error);
}

#[test]
fn invalid_bundle_is_rejected() {
    let (_d, ws) = scaffold("r1");
    let root = ws.root_branch();
    let mut s = ws.open_session(&root, "kapso/r1/exp-1").unwrap();
    let bundle = ArtifactBundle {
        spec: spec(&root),
        parent_branch: root.clone(),
        evaluator: "quadratic".into(),
        evaluator_config: EvaluatorConfig::default().with_rollouts(2),
        beta: 0.0,
        rollout_records: vec![MeasurementRecord::error("x")],
        aggregated: MeasurementRecord::error("x"),
        utility_estimate: None,
        debug_tries: 0,
        logs: Default::default(),
    };
    assert!(matches!(ws.commit_run(&mut s, &bundle), Err(ExperimentError::InvalidBundle(_))));
    assert_eq!(s.state(), SessionState::Open);
}

#[test]
fn reopen_continues_branch_numbering() {
    let (_d, ws) = scaffold("r1");
    let b1 = ws.allocate_branch();
    run_experiment(&ws, &ws.root_branch(), &b1, 5);
    let again = Workspace::open(ws.root(), "r1").unwrap();
    assert_eq!(again.allocate_branch(), "kapso/r1/exp-2");
    assert!(matches!(Workspace::open(ws.root(), "other"), Err(ExperimentError::UnknownBranch(_))));
}

#[test]
fn repo_state_and_reproduce() {
    let (_d, ws) = scaffold("r1");
    let b = ws.allocate_branch();
    run_experiment(&ws, &ws.root_branch(), &b, 5);
    let co = ws.repo_state(&b).unwrap();
    assert_eq!(fs::read_to_string(co.path().join("params.txt")).unwrap(), "5");
    assert_eq!(co.commit, ws.head(&b).unwrap());
    let again = ws.reproduce(&b, &QuadraticEvaluator::new(7), None).unwrap();
    assert_eq!(again.utility_estimate, Some(-4.0));
    assert!(matches!(ws.read_manifest(&ws.root_branch()), Err(ExperimentError::NotExperimentBranch(_))));
}

#[test]
fn concurrent_sessions_publish_distinct_branches() {
    let (_d, ws) = scaffold("c");
    let root = ws.root_branch();
    let branches: Vec<String> = (0..4).map(|_| ws.allocate_branch()).collect();
    std::thread::scope(|scope| {
        for (i, b) in branches.iter().enumerate() {
            let ws = &ws;
            let root = &root;
            scope.spawn(move || {
                let (_, p) = run_experiment(ws, root, b, i as i64);
                assert!(p.published);
            });
        }
    });
    for (i, b) in branches.iter().enumerate() {
        assert_eq!(ws.read_file(b, "params.txt").unwrap(), i.to_string().as_bytes());
    }
}
