use super::*;
use crate::agent::ScriptedPayload;
use crate::evaluator::EvaluatorConfig;
use crate::search::DebugBudget;

fn toy_config(state: &Path, xs: &[i64], iterations: u64) -> RunConfig {
    let payloads: Vec<ScriptedPayload> =
        xs.iter().map(|x| ScriptedPayload::implement([("params.txt", x.to_string())])).collect();
    RunConfig {
        goal: "maximize the toy score".into(),
        run_id: Some("t1".into()),
        budget: BudgetSpec::iterations(iterations),
        evaluator: EvaluatorSection {
            name: "quadratic".into(),
            config: EvaluatorConfig::default().with_option("goal_threshold", 0),
        },
        strategy: StrategySection {
            name: "linear".into(),
            debug_budget: DebugBudget::default(),
            tree: Default::default(),
            proposer: PluginRef {
                name: "payload_sequence".into(),
                params: serde_json::json!({ "payloads": payloads }),
            },
        },
        agent: PluginRef::named("scripted"),
        knowledge: KnowledgeSection::default(),
        controller: Default::default(),
        context_budget: crate::agent::DEFAULT_CONTEXT_BUDGET,
        state_dir: state.to_path_buf(),
    }
}

#[test]
fn account_rejects_bad_cost() {
    let c = Consumed::default();
    assert!(account(&c, AccountEvent { wall_time_ms: 1, cost: -1.0 }).is_err());
    assert!(account(&c, AccountEvent { wall_time_ms: 1, cost: f64::NAN }).is_err());
    let next = account(&c, AccountEvent { wall_time_ms: 5, cost: 0.5 }).unwrap();
    assert_eq!(next, Consumed { iterations: 1, wall_time_ms: 5, cost: 0.5 });
}

#[test]
fn unknown_plugins_fail_before_any_work() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = toy_config(dir.path(), &[1], 1);
    cfg.strategy.name = "beam".into();
    let err = solve(&cfg, &Registry::default()).unwrap_err();
    assert!(err.to_string().contains("linear"), "{err}");
    assert!(!run_dir(dir.path(), "t1").exists());
}

#[test]
fn toy_run_stops_at_goal_and_persists_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = toy_config(dir.path(), &[3, 5, 7, 9], 10);
    let out = solve(&cfg, &Registry::default()).unwrap();
    assert_eq!(out.history.len(), 3);
    let best = out.best().unwrap();
    assert_eq!(best.utility_estimate, Some(0.0));
    assert_eq!(out.manifest.exit_code(), 0);
    assert_eq!(out.manifest.stop_reason, Some(StopReason::ControllerComplete));
    assert_eq!(out.manifest.init.decision, "scaffold");

    let (loaded, ws) = open_run(dir.path(), "t1").unwrap();
    assert_eq!(loaded, out.manifest);
    assert_eq!(loaded.iterations.len(), 3);
    assert!(ws.branch_exists(&best.branch));
    assert_eq!(ws.read_file(&best.branch, "params.txt").unwrap(), b"7");
}

#[test]
fn budget_exhaustion_without_feasible_result_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = toy_config(dir.path(), &[], 2);
    cfg.strategy.proposer.params = serde_json::json!({
        "payloads": [ScriptedPayload::implement([("params.txt", "seven")])]
    });
    cfg.strategy.debug_budget = DebugBudget::new(1).unwrap();
    let out = solve(&cfg, &Registry::default()).unwrap();
    assert_eq!(out.history.len(), 2);
    assert_eq!(out.manifest.stop_reason, Some(StopReason::BudgetExhausted));
    assert_eq!(out.manifest.exit_code(), 2);
    assert_eq!(out.manifest.totals.iterations, 2);
}

#[test]
fn duplicate_run_id_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = toy_config(dir.path(), &[7], 1);
    solve(&cfg, &Registry::default()).unwrap();
    assert!(matches!(solve(&cfg, &Registry::default()), Err(OrchestratorError::Usage(_))));
}

#[test]
fn manifest_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = toy_config(dir.path(), &[7], 1);
    let mut m = solve(&cfg, &Registry::default()).unwrap().manifest;
    m.status = RunStatus::Aborted;
    assert_eq!(m.exit_code(), 1);
    m.status = RunStatus::Finished;
    m.best_feasible = false;
    assert_eq!(m.exit_code(), 2);
}
