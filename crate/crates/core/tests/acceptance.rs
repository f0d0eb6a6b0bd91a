//! Acceptance suite: one line per criterion, non-zero exit if any fails.
//!
//! Run with `cargo test -p kapso-core --test acceptance`.

use std::collections::BTreeMap;
use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::{Duration, Instant};

use chrono::Utc;
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Map, Value};
use sha2::{Digest, Sha256};

use kapso_core::agent::{ContextDocument, ScriptedAgent, ScriptedPayload, DEFAULT_CONTEXT_BUDGET};
use kapso_core::canonical::to_canonical_pretty;
use kapso_core::deploy::{adapt_repository, AdaptOptions, AdapterRegistry};
use kapso_core::evaluator::{
    evaluate, prefer, AggregatedOutcome, BudgetSpec, Evaluator, EvaluatorConfig, MeasurementRecord,
    NoisyQuadraticEvaluator, Preference, PreferenceToyEvaluator, QuadraticEvaluator, SeedPolicy, SelectionRule,
    Status,
};
use kapso_core::experiment::{ExperimentRecord, InitSource, Workspace};
use kapso_core::knowledge::{
    export_package, import_package, select_init, EdgeType, FailureKind, FailureSignal, InitDecision, KnowledgePage,
    KnowledgeStore, PageType, RepoEntry, RetrievalConfig,
};
use kapso_core::memory::{Controller, ControllerAction, ControllerConfig, EpisodicStore, StepInput, TemplateExtractor};
use kapso_core::orchestrator::{
    best_artifact, solve, EvaluatorSection, KnowledgeSection, PluginRef, Registry, RunConfig, StrategySection,
};
use kapso_core::search::{
    implement_and_debug, DebugBudget, ExperimentDeps, FnProposer, IterationInput, NodeStatus, ProposedSpec, Pruner,
    SearchStrategy, SearchTree, Selector, SolutionSpec, SpecOrigin, TreeConfig, TreeStrategy,
};

type Outcome = Result<(), String>;
type Criterion = (&'static str, fn() -> Outcome);

macro_rules! ensure {
    ($cond:expr, $($arg:tt)+) => {
        if !$cond {
            return Err(format!($($arg)+));
        }
    };
}

fn main() {
    let criteria: Vec<Criterion> = vec![
        ("1 end-to-end toy optimization", c01_toy_end_to_end),
        ("2 feasibility ordering", c02_feasibility_ordering),
        ("3 selection oracle equivalence", c03_selection_oracle),
        ("4 monte carlo convergence", c04_monte_carlo),
        ("5 branch isolation and provenance", c05_branch_isolation),
        ("6 debug-loop contract", c06_debug_loop),
        ("7 controller transitions", c07_controller),
        ("8 seeding step function", c08_seeding),
        ("9 tree-search reproducibility", c09_tree_reproducibility),
        ("10 knowledge packet properties", c10_packet_properties),
        ("11 deploy contract", c11_deploy),
        ("12 knowledge package round-trip", c12_package_round_trip),
    ];
    let filter: Option<String> = std::env::args().skip(1).find(|a| !a.starts_with('-'));
    let mut failed = 0;
    let mut ran = 0;
    for (name, f) in criteria {
        if filter.as_deref().is_some_and(|pat| !name.contains(pat)) {
            continue;
        }
        ran += 1;
        let start = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|panic| {
            let msg = panic
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| panic.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into());
            Err(format!("panic: {msg}"))
        });
        let secs = start.elapsed().as_secs_f64();
        match result {
            Ok(()) => println!("criterion {name}: PASS ({secs:.2}s)"),
            Err(why) => {
                failed += 1;
                println!("criterion {name}: FAIL ({secs:.2}s): {why}");
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", ran - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}

fn payload(x: impl ToString) -> ScriptedPayload {
    ScriptedPayload::implement([("params.txt", x.to_string())])
}

fn scaffold(dir: &Path, run_id: &str) -> Workspace {
    Workspace::init(&dir.join("ws"), &InitSource::Scaffold { goal: "toy".into(), entrypoint: None }, run_id).unwrap()
}

fn quadratic_oracle(x: i64) -> f64 {
    let d = (x - 7) as f64;
    -(d * d)
}

fn c01_toy_end_to_end() -> Outcome {
    let start = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let payloads: Vec<ScriptedPayload> = [0, 4, 7].iter().map(payload).collect();
    let config = RunConfig {
        goal: "maximize -(x - 7)^2".into(),
        run_id: Some("accept".into()),
        budget: BudgetSpec::iterations(5),
        evaluator: EvaluatorSection {
            name: "quadratic".into(),
            config: EvaluatorConfig::default().with_option("goal_threshold", 0),
        },
        strategy: StrategySection {
            name: "linear".into(),
            debug_budget: DebugBudget::default(),
            tree: Default::default(),
            proposer: PluginRef { name: "payload_sequence".into(), params: json!({ "payloads": payloads }) },
        },
        agent: PluginRef::named("scripted"),
        knowledge: KnowledgeSection::default(),
        controller: Default::default(),
        context_budget: DEFAULT_CONTEXT_BUDGET,
        state_dir: dir.path().to_path_buf(),
    };
    let out = solve(&config, &Registry::default()).map_err(|e| e.to_string())?;
    let elapsed = start.elapsed();

    ensure!(out.history.len() == 3, "expected 3 experiments, got {}", out.history.len());
    ensure!(out.manifest.iterations.len() == 3, "ran {} iterations", out.manifest.iterations.len());
    for (e, x) in out.history.iter().zip([0, 4, 7]) {
        ensure!(
            e.utility_estimate == Some(quadratic_oracle(x)),
            "x={x}: utility {:?} != {}",
            e.utility_estimate,
            quadratic_oracle(x)
        );
    }
    let best = out.best().ok_or("no best experiment")?;
    ensure!(best.utility_estimate == Some(0.0), "best utility {:?}", best.utility_estimate);
    ensure!(best.branch == out.history[2].branch, "best is {}", best.branch);
    let (_, ws) = kapso_core::orchestrator::open_run(dir.path(), "accept").map_err(|e| e.to_string())?;
    ensure!(ws.read_file(&best.branch, "params.txt").unwrap() == b"7", "best branch does not write x=7");
    ensure!(out.manifest.exit_code() == 0, "exit code {}", out.manifest.exit_code());
    ensure!(elapsed < Duration::from_secs(30), "took {elapsed:?}");
    Ok(())
}

fn random_record(rng: &mut ChaCha8Rng) -> MeasurementRecord {
    let value = match rng.random_range(0..6) {
        0 => f64::MAX,
        1 => -1e300,
        2 => 0.0,
        _ => rng.random_range(-1e6..1e6),
    };
    let mut metrics = BTreeMap::new();
    metrics.insert("score".to_string(), value);
    metrics.insert("distance".to_string(), value.abs());
    let mut record = MeasurementRecord::success(metrics);
    record.status = *[Status::Success, Status::Error, Status::ContractViolation].choose(rng).unwrap();
    record
}

fn random_outcome(rng: &mut ChaCha8Rng, rule: &SelectionRule) -> AggregatedOutcome {
    let k = rng.random_range(1..=3);
    let rollouts: Vec<MeasurementRecord> = (0..k).map(|_| random_record(rng)).collect();
    let record = kapso_core::evaluator::aggregate_records(&rollouts).unwrap();
    let utility_estimate = if rule.is_scalar() {
        let us: Vec<f64> = rollouts.iter().map(|r| kapso_core::evaluator::utility(r, rule).unwrap()).collect();
        Some(kapso_core::evaluator::aggregate_utilities(&us).unwrap())
    } else {
        None
    };
    AggregatedOutcome { record, utility_estimate, rollout_count: k, rollout_records: rollouts }
}

fn experiment(branch: String, aggregated: AggregatedOutcome) -> ExperimentRecord {
    let now = Utc::now();
    ExperimentRecord {
        branch: branch.clone(),
        parent_branch: "kapso/a/root".into(),
        spec: SolutionSpec {
            spec_id: format!("spec-{branch}"),
            summary: String::new(),
            instructions: String::new(),
            parent_branch: "kapso/a/root".into(),
            origin: SpecOrigin::Linear,
        },
        beta: 0.0,
        rollouts: aggregated.rollout_count,
        utility_estimate: aggregated.utility_estimate,
        aggregated,
        debug_tries: 0,
        cost: 0.0,
        commit: None,
        published: true,
        started_at: now,
        finished_at: now,
    }
}

fn c02_feasibility_ordering() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let scalar_ev = QuadraticEvaluator::new(7);
    let pref_ev = PreferenceToyEvaluator::new(7);
    let adversarial = |_: &MeasurementRecord, b: &MeasurementRecord| {
        if b.is_feasible() { Preference::ABetter } else { Preference::BBetter }
    };
    let modes: [(&str, &dyn Evaluator); 2] = [("scalar", &scalar_ev), ("preference", &pref_ev)];
    let mut checked = 0;
    for (mode, ev) in modes {
        let rule = ev.selection_rule();
        let mut pairs = 0;
        while pairs < 10_000 {
            let a = random_outcome(&mut rng, &rule);
            let b = random_outcome(&mut rng, &rule);
            if a.is_feasible() == b.is_feasible() {
                continue;
            }
            pairs += 1;
            let (f, i) = if a.is_feasible() { (&a, &b) } else { (&b, &a) };
            ensure!(ev.prefer(f, i) == Preference::ABetter, "{mode}: feasible lost to infeasible");
            ensure!(ev.prefer(i, f) == Preference::BBetter, "{mode}: infeasible ranked above feasible");
            ensure!(prefer(i, f, &rule, &adversarial) == Preference::BBetter, "{mode}: adversarial comparator won");
            let history = vec![experiment("i".into(), i.clone()), experiment("f".into(), f.clone())];
            let best = best_artifact(&history, ev).unwrap();
            ensure!(best.branch == "f", "{mode}: best_artifact chose the infeasible record");
        }
        checked += pairs;
    }
    ensure!(checked >= 20_000, "only {checked} pairs");
    Ok(())
}

fn brute_force_best(history: &[ExperimentRecord]) -> Option<usize> {
    if history.is_empty() {
        return None;
    }
    let key = |e: &ExperimentRecord| -> Option<f64> {
        if e.aggregated.record.status == Status::Success {
            e.aggregated.utility_estimate
        } else {
            None
        }
    };
    let mut best = 0;
    for i in 0..history.len() {
        if let Some(u) = key(&history[i]) {
            match key(&history[best]) {
                Some(b) if u <= b => {}
                _ => best = i,
            }
        }
    }
    Some(best)
}

fn c03_selection_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let ev = QuadraticEvaluator::new(7);
    for case in 0..1000 {
        let len = rng.random_range(1..=50);
        let history: Vec<ExperimentRecord> = (0..len)
            .map(|i| {
                let x: i64 = rng.random_range(0..15);
                let record = if rng.random_bool(0.3) {
                    MeasurementRecord::error("boom")
                } else {
                    MeasurementRecord::success(BTreeMap::new()).with_metric("score", quadratic_oracle(x))
                };
                let u = kapso_core::evaluator::utility(&record, &ev.selection_rule()).unwrap();
                let agg = AggregatedOutcome {
                    record: record.clone(),
                    utility_estimate: Some(u),
                    rollout_count: 1,
                    rollout_records: vec![record],
                };
                experiment(format!("exp-{i}"), agg)
            })
            .collect();
        let got = best_artifact(&history, &ev).map(|e| e.branch.clone());
        let want = brute_force_best(&history).map(|i| history[i].branch.clone());
        ensure!(got == want, "case {case}: best_artifact {got:?} != brute force {want:?}");
    }
    Ok(())
}

fn c04_monte_carlo() -> Outcome {
    let start = Instant::now();
    let ev = NoisyQuadraticEvaluator::new(7, 1.0);
    let x = 5;
    let j_star = quadratic_oracle(x);
    let dir = tempfile::tempdir().unwrap();
    let worktree = dir.path().join("wt");
    fs::create_dir_all(&worktree).unwrap();
    fs::write(worktree.join("params.txt"), x.to_string()).unwrap();
    let threads = std::thread::available_parallelism().map_or(4, |n| n.get()).min(16) as u64;
    let estimates: Vec<Result<f64, String>> = std::thread::scope(|scope| {
        let handles: Vec<_> = (0..threads)
            .map(|t| {
                let (ev, worktree, root) = (&ev, &worktree, dir.path());
                scope.spawn(move || {
                    (0..100u64)
                        .filter(|seed| seed % threads == t)
                        .map(|seed| {
                            let config = EvaluatorConfig {
                                rollouts: 1000,
                                seed_policy: SeedPolicy::SequentialFromBase,
                                base_seed: seed * 1_000_003,
                                ..Default::default()
                            };
                            let artifacts = root.join(format!("artifacts-{seed}"));
                            let out = evaluate(ev, worktree, &artifacts, &config).map_err(|e| e.to_string())?;
                            out.utility_estimate.ok_or_else(|| "no utility estimate".to_string())
                        })
                        .collect::<Vec<_>>()
                })
            })
            .collect();
        handles.into_iter().flat_map(|h| h.join().unwrap()).collect()
    });
    ensure!(estimates.len() == 100, "{} seeds evaluated", estimates.len());
    let mut within = 0;
    for u in estimates {
        if (u? - j_star).abs() <= 0.1 {
            within += 1;
        }
    }
    let elapsed = start.elapsed();
    ensure!(within >= 95, "only {within}/100 seeds within 0.1 of {j_star}");
    ensure!(elapsed < Duration::from_secs(60), "took {elapsed:?}");
    Ok(())
}

fn c05_branch_isolation() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let ws = scaffold(dir.path(), "iso");
    let ev = QuadraticEvaluator::new(7);
    let cfg = EvaluatorConfig::default().with_rollouts(2);
    let deps = ExperimentDeps {
        workspace: &ws,
        evaluator: &ev,
        evaluator_name: "quadratic",
        evaluator_config: &cfg,
        agent: &ScriptedAgent,
        debug_budget: DebugBudget::default(),
    };
    let root = ws.root_branch();
    let branches: Vec<String> = (0..8).map(|_| ws.allocate_branch()).collect();
    let records: Vec<ExperimentRecord> = std::thread::scope(|scope| {
        let handles: Vec<_> = branches
            .iter()
            .enumerate()
            .map(|(i, branch)| {
                let deps = &deps;
                let root = &root;
                scope.spawn(move || {
                    let spec = SolutionSpec {
                        spec_id: format!("spec-{i}"),
                        summary: format!("x={i}"),
                        instructions: payload(i).to_instructions(),
                        parent_branch: root.clone(),
                        origin: SpecOrigin::Linear,
                    };
                    implement_and_debug(&spec, &ContextDocument::default(), branch, i as f64 / 8.0, deps).unwrap()
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().unwrap()).collect()
    });
    let distinct: std::collections::BTreeSet<&String> = records.iter().map(|r| &r.branch).collect();
    ensure!(distinct.len() == 8, "{} distinct branches", distinct.len());
    for (i, rec) in records.iter().enumerate() {
        ensure!(rec.published && ws.branch_exists(&rec.branch), "{} not published", rec.branch);
        let content = ws.read_file(&rec.branch, "params.txt").unwrap();
        ensure!(content == i.to_string().as_bytes(), "{} holds another session's params", rec.branch);
        let again = ws.reproduce(&rec.branch, &ev, None).map_err(|e| e.to_string())?;
        ensure!(again.record.metrics == rec.aggregated.record.metrics, "{}: reproduced metrics differ", rec.branch);
        ensure!(again.utility_estimate == rec.utility_estimate, "{}: reproduced utility differs", rec.branch);
        let m = ws.read_manifest(&rec.branch).map_err(|e| e.to_string())?;
        ensure!(m.spec_id == rec.spec.spec_id, "{}: spec_id mismatch", rec.branch);
        ensure!(m.rollouts == rec.rollouts && m.rollouts == 2, "{}: K mismatch", rec.branch);
        ensure!(m.beta == rec.beta, "{}: beta mismatch", rec.branch);
    }
    Ok(())
}

fn c06_debug_loop() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let ws = scaffold(dir.path(), "dbg");
    let ev = QuadraticEvaluator::new(7);
    let cfg = EvaluatorConfig::default();
    let deps = ExperimentDeps {
        workspace: &ws,
        evaluator: &ev,
        evaluator_name: "quadratic",
        evaluator_config: &cfg,
        agent: &ScriptedAgent,
        debug_budget: DebugBudget::new(3).unwrap(),
    };
    let spec = |p: ScriptedPayload| SolutionSpec {
        spec_id: "spec-0".into(),
        summary: "s".into(),
        instructions: p.to_instructions(),
        parent_branch: ws.root_branch(),
        origin: SpecOrigin::Linear,
    };
    let ctx = ContextDocument::default();

    let fixed = payload("broken").with_debug([("params.txt", "7")]);
    let rec = implement_and_debug(&spec(fixed), &ctx, "kapso/dbg/exp-1", 0.0, &deps).map_err(|e| e.to_string())?;
    ensure!(rec.is_feasible(), "fixed agent did not reach feasibility");
    ensure!(rec.debug_tries == 1, "fixed agent used {} debug tries", rec.debug_tries);

    let never = payload("broken").with_debug([("params.txt", "still broken")]);
    let rec = implement_and_debug(&spec(never), &ctx, "kapso/dbg/exp-2", 0.0, &deps).map_err(|e| e.to_string())?;
    ensure!(rec.debug_tries == 3, "never-fixed agent used {} debug tries", rec.debug_tries);
    ensure!(!rec.is_feasible(), "never-fixed record is feasible");
    ensure!(ws.branch_exists("kapso/dbg/exp-2"), "failed branch not committed");
    let m = ws.read_manifest("kapso/dbg/exp-2").map_err(|e| e.to_string())?;
    ensure!(m.debug_tries == 3 && m.status != Status::Success, "manifest disagrees: {m:?}");
    Ok(())
}

fn repo(id: &str, summary: &str) -> RepoEntry {
    RepoEntry {
        repo_id: id.into(),
        location: format!("/repos/{id}"),
        commit_id: "c0ffee".into(),
        tags: vec![],
        summary: summary.into(),
        embedding: None,
    }
}

fn c07_controller() -> Outcome {
    let goal = "optimize the quadratic toy problem";
    let mut ks = KnowledgeStore::default();
    ks.add_repo(repo("primary", goal)).unwrap();
    ks.add_repo(repo("backup", "optimize the quadratic toy")).unwrap();
    ks.index_pages(vec![
        KnowledgePage::new("h1", PageType::Heuristic, "params", "write params.txt with one integer"),
        KnowledgePage::new("i1", PageType::Implementation, "writer", "python script that writes params.txt"),
    ])
    .unwrap();
    let seed = ks.select_seed(goal, &[]).0.seed_ref().ok_or("no initial seed")?;
    ensure!(seed.entry.repo_id == "primary", "initial seed is {}", seed.entry.repo_id);
    let mut packet = ks.retrieve_knowledge(goal, Some(&seed), None);

    let mut episodic = EpisodicStore::in_memory();
    let mut controller = Controller::new(ControllerConfig { f_max: 3, ..Default::default() });
    let mut step = |e: &ExperimentRecord, packet: &kapso_core::knowledge::KnowledgePacket, episodic: &mut EpisodicStore| {
        controller.step(
            &StepInput {
                goal,
                run_id: "ctl",
                experiments: std::slice::from_ref(e),
                focus: e,
                packet,
                beta: 0.1,
                should_stop: false,
                goal_met: false,
            },
            &ks,
            episodic,
            &TemplateExtractor,
        )
    };
    let mut actions = Vec::new();
    for i in 1..=3 {
        let record = MeasurementRecord::contract_violation(format!("missing params.txt (attempt {i})"));
        let e = experiment(format!("kapso/ctl/exp-{i}"), one_rollout(record));
        let before = episodic.len();
        let out = step(&e, &packet, &mut episodic).map_err(|e| e.to_string())?;
        ensure!(episodic.len() == before + 1, "failing experiment {i} added {} lessons", episodic.len() - before);
        actions.push(out.action);
        packet = out.packet;
    }
    ensure!(
        actions == [ControllerAction::Retry, ControllerAction::Retry, ControllerAction::Pivot],
        "actions {actions:?}"
    );
    ensure!(
        packet.seed_repo.as_ref().is_none_or(|s| s.entry.repo_id != "primary"),
        "pivot packet still seeds from the prior repo"
    );

    let quiet = experiment(
        "kapso/ctl/exp-4".into(),
        one_rollout(MeasurementRecord::success(BTreeMap::new()).with_metric("score", -1.0)),
    );
    let before = episodic.len();
    let out = step(&quiet, &packet, &mut episodic).map_err(|e| e.to_string())?;
    ensure!(episodic.len() == before, "feedback-free success added a lesson");
    ensure!(out.new_lessons.is_empty(), "feedback-free success reported new lessons");
    Ok(())
}

fn one_rollout(record: MeasurementRecord) -> AggregatedOutcome {
    let utility = if record.is_feasible() { record.metric("score") } else { Some(f64::NEG_INFINITY) };
    AggregatedOutcome { record: record.clone(), utility_estimate: utility, rollout_count: 1, rollout_records: vec![record] }
}

fn c08_seeding() -> Outcome {
    let candidate = repo("cand", "anything");
    let expected = [(0.69, false), (0.70, true), (0.71, true)];
    for (rho, seed) in expected {
        let d = select_init(Some(&candidate), rho, 0.70);
        ensure!(d.is_seed() == seed, "rho={rho}: got {d:?}");
        if let InitDecision::Seed { confidence, .. } = d {
            ensure!(confidence == rho, "rho={rho}: confidence {confidence}");
        }
    }
    ensure!(select_init(None, 0.99, 0.70) == InitDecision::Scaffold, "no candidate must scaffold");
    Ok(())
}

struct NoPruning;

impl Pruner for NoPruning {
    fn prune(&self, _: &SearchTree, _: &ContextDocument, _: &dyn Evaluator) -> Vec<String> {
        Vec::new()
    }
}

/// Proposed leaves in node-id order.
struct FirstProposed;

impl Selector for FirstProposed {
    fn select(&self, tree: &SearchTree, _: &ContextDocument, k: usize) -> Vec<String> {
        tree.nodes()
            .iter()
            .filter(|n| n.status == NodeStatus::Proposed && n.is_leaf())
            .take(k)
            .map(|n| n.node_id.clone())
            .collect()
    }
}

type TreeRun = Vec<(String, String, SolutionSpec, Option<f64>)>;

fn tree_run(dir: &Path) -> Result<(TreeRun, Vec<usize>), String> {
    let ws = scaffold(dir, "tree");
    let ev = QuadraticEvaluator::new(7);
    let cfg = EvaluatorConfig::default();
    let deps = ExperimentDeps {
        workspace: &ws,
        evaluator: &ev,
        evaluator_name: "quadratic",
        evaluator_config: &cfg,
        agent: &ScriptedAgent,
        debug_budget: DebugBudget::new(1).unwrap(),
    };
    let proposer = FnProposer::new("stub", |r| {
        let x = (r.ordinal * 3 % 11) as i64;
        Ok(ProposedSpec { summary: format!("x={x}"), instructions: payload(x).to_instructions() })
    });
    let config = TreeConfig { fanout: 2, k: 2, margin: 10.0, parallelism: 2 };
    let mut strategy = TreeStrategy::new(config, Box::new(proposer))
        .with_pruner(Box::new(NoPruning))
        .with_selector(Box::new(FirstProposed));
    let ctx = ContextDocument::default();
    let mut history: Vec<ExperimentRecord> = Vec::new();
    let mut per_iteration = Vec::new();
    for iteration in 1..=3 {
        let input = IterationInput { context: &ctx, history: &history, beta: iteration as f64 / 3.0, iteration };
        let batch = strategy.run(&input, &deps).map_err(|e| e.to_string())?;
        per_iteration.push(batch.len());
        history.extend(batch);
    }
    let mut rows: TreeRun =
        history.into_iter().map(|e| (e.branch, e.parent_branch, e.spec, e.utility_estimate)).collect();
    rows.sort_by(|a, b| a.0.cmp(&b.0));
    Ok((rows, per_iteration))
}

fn c09_tree_reproducibility() -> Outcome {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let (run_a, counts_a) = tree_run(a.path())?;
    let (run_b, counts_b) = tree_run(b.path())?;
    ensure!(counts_a == [2, 2, 2], "experiments per iteration {counts_a:?}");
    ensure!(counts_a == counts_b, "iteration counts differ");
    ensure!(run_a.len() == 6, "{} experiments", run_a.len());
    ensure!(run_a == run_b, "runs differ:\n{run_a:?}\n{run_b:?}");
    Ok(())
}

const WORDS: &[&str] = &[
    "gradient", "boosting", "tokenizer", "cache", "params", "learning", "rate", "schedule", "docker", "cuda",
    "feature", "validation", "split", "ensemble", "metric", "loss", "batch", "memory", "error", "timeout",
];

fn sentence(rng: &mut ChaCha8Rng, n: usize) -> String {
    (0..n).map(|_| *WORDS.choose(rng).unwrap()).collect::<Vec<_>>().join(" ")
}

fn random_store(rng: &mut ChaCha8Rng, config: RetrievalConfig) -> KnowledgeStore {
    let mut ks = KnowledgeStore::new(config);
    let repos = rng.random_range(0..4);
    for r in 0..repos {
        let mut entry = repo(&format!("r{r}"), &sentence(rng, 4));
        entry.tags = (0..rng.random_range(0..3)).map(|_| WORDS.choose(rng).unwrap().to_string()).collect();
        ks.add_repo(entry).unwrap();
    }
    let n = rng.random_range(0..30);
    let mut pages: Vec<KnowledgePage> = Vec::new();
    for i in 0..n {
        let page_type = *PageType::ALL.choose(rng).unwrap();
        let mut page = KnowledgePage::new(format!("p{i}"), page_type, sentence(rng, 2), sentence(rng, 8));
        if repos > 0 && rng.random_bool(0.5) {
            page = page.with_source(format!("r{}", rng.random_range(0..repos)));
        }
        if rng.random_bool(0.3) {
            page.code_snippets.push(format!("x = {}", rng.random_range(0..100)));
        }
        for _ in 0..rng.random_range(0..3) {
            let edge = *[EdgeType::ImplementedBy, EdgeType::UsesHeuristic, EdgeType::RequiresEnv, EdgeType::CrossRef, EdgeType::RelatedRepo]
                .choose(rng)
                .unwrap();
            let target = if edge.targets_repo() {
                (repos > 0).then(|| format!("r{}", rng.random_range(0..repos)))
            } else {
                let fits: Vec<&KnowledgePage> =
                    pages.iter().filter(|p| edge.required_target().is_none_or(|t| p.page_type == t)).collect();
                fits.choose(rng).map(|p| p.id.clone())
            };
            if let Some(t) = target {
                if !page.edges.iter().any(|e| e.edge_type == edge && e.target_id == t) {
                    page = page.with_edge(edge, t);
                }
            }
        }
        pages.push(page);
    }
    ks.index_pages(pages).unwrap();
    ks
}

fn c10_packet_properties() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut recoveries = 0;
    for case in 0..500 {
        let config = RetrievalConfig {
            max_pages: rng.random_range(1..=15),
            max_per_type: rng.random_range(1..=5),
            max_recovery_pages: rng.random_range(0..=5),
            tau: rng.random_range(0.0..1.0),
            ..Default::default()
        };
        let ks = random_store(&mut rng, config.clone());
        let goal = if rng.random_bool(0.05) { String::new() } else { sentence(&mut rng, 5) };
        let seed = ks.select_seed(&goal, &[]).0.seed_ref();
        let signal = if rng.random_bool(0.5) {
            let kind = *[FailureKind::Error, FailureKind::ContractViolation, FailureKind::Qualitative].choose(&mut rng).unwrap();
            Some(FailureSignal::new(kind, &sentence(&mut rng, 6), "kapso/r/exp-1").unwrap())
        } else {
            None
        };
        let packet = ks.retrieve_knowledge(&goal, seed.as_ref(), signal.as_ref());
        ensure!(packet.page_count() <= config.max_pages, "case {case}: {} pages > {}", packet.page_count(), config.max_pages);
        for (t, pages) in &packet.pages_by_type {
            ensure!(pages.len() <= config.max_per_type, "case {case}: {} {t:?} pages", pages.len());
            ensure!(pages.iter().all(|p| p.page_type == *t), "case {case}: page filed under the wrong type");
        }
        for id in packet.page_ids() {
            ensure!(packet.source_pages.contains(&id), "case {case}: {id} missing from source_pages");
            ensure!(ks.page(&id).is_some(), "case {case}: {id} is not in the store");
        }
        ensure!(!packet.query_used.trim().is_empty(), "case {case}: empty query_used");
        match (&signal, &packet.recovery) {
            (Some(s), Some(r)) => {
                recoveries += 1;
                ensure!(r.failure_kind == s.kind, "case {case}: recovery kind mismatch");
                ensure!(r.attached.len() <= config.max_recovery_pages, "case {case}: too many attachments");
                for id in &r.attached {
                    ensure!(packet.source_pages.contains(id), "case {case}: attached {id} not in source_pages");
                }
            }
            (Some(_), None) => return Err(format!("case {case}: recovery packet lacks recovery metadata")),
            (None, Some(_)) => return Err(format!("case {case}: plain packet carries recovery metadata")),
            (None, None) => {}
        }
    }
    ensure!(recoveries > 100, "only {recoveries} recovery cases exercised");
    Ok(())
}

fn tree_checksum(root: &Path) -> String {
    let mut hasher = Sha256::new();
    let mut entries: Vec<_> = walkdir::WalkDir::new(root).sort_by_file_name().into_iter().map(Result::unwrap).collect();
    entries.sort_by(|a, b| a.path().cmp(b.path()));
    for e in entries {
        let rel = e.path().strip_prefix(root).unwrap().to_string_lossy().into_owned();
        hasher.update(rel.as_bytes());
        if e.file_type().is_file() {
            hasher.update(fs::read(e.path()).unwrap());
        }
    }
    hex::encode(hasher.finalize())
}

fn c11_deploy() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let registry = AdapterRegistry::default();
    let inputs: Map<String, Value> = json!({"x": 2}).as_object().cloned().unwrap();

    let sol = dir.path().join("solution");
    fs::create_dir_all(&sol).unwrap();
    fs::write(sol.join("main.py"), "def predict(inputs):\n    return inputs[\"x\"] * 2\n").unwrap();
    fs::write(sol.join("README.md"), "fixture\n").unwrap();
    let before = tree_checksum(&sol);
    let desc = adapt_repository(&sol, "LOCAL", &AdaptOptions::default(), &registry).map_err(|e| e.to_string())?;
    ensure!(
        desc.adapted_path.file_name().is_some_and(|n| n.to_string_lossy().ends_with("_adapted_LOCAL")),
        "adapted path {}",
        desc.adapted_path.display()
    );
    let handle = registry.handle(desc).map_err(|e| e.to_string())?;
    let reply = handle.run(&inputs);
    handle.stop();
    ensure!(reply == json!({"status": "success", "output": 4}), "reply {reply}");
    ensure!(tree_checksum(&sol) == before, "source tree changed");

    let crash = dir.path().join("crash");
    fs::create_dir_all(&crash).unwrap();
    fs::write(crash.join("main.py"), "def predict(inputs):\n    raise RuntimeError('kaboom')\n").unwrap();
    let desc = adapt_repository(&crash, "LOCAL", &AdaptOptions::default(), &registry).map_err(|e| e.to_string())?;
    let handle = registry.handle(desc).map_err(|e| e.to_string())?;
    let reply = handle.run(&inputs);
    let obj = reply.as_object().ok_or("crash reply is not an object")?;
    ensure!(obj.len() == 2 && obj["status"] == "error", "crash reply {reply}");
    ensure!(obj["error"].as_str().is_some_and(|s| !s.is_empty()), "crash reply lacks an error string: {reply}");
    Ok(())
}

fn c12_package_round_trip() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for case in 0..50 {
        let ks = random_store(&mut rng, RetrievalConfig::default());
        let dir = tempfile::tempdir().unwrap();
        let pkg = dir.path().join("pkg");
        export_package(&ks, &pkg).map_err(|e| e.to_string())?;
        let back = import_package(&pkg, RetrievalConfig::default()).map_err(|e| e.to_string())?;
        ensure!(back.page_count() == ks.page_count(), "case {case}: page count");
        ensure!(back.edge_count() == ks.edge_count(), "case {case}: edge count");
        ensure!(back.repo_count() == ks.repo_count(), "case {case}: repo count");
        for page in ks.pages() {
            let other = back.page(&page.id).ok_or_else(|| format!("case {case}: {} lost", page.id))?;
            ensure!(
                to_canonical_pretty(page).unwrap() == to_canonical_pretty(other).unwrap(),
                "case {case}: {} serializes differently",
                page.id
            );
        }
        for r in ks.repos() {
            let other = back.repo(&r.repo_id).ok_or_else(|| format!("case {case}: repo {} lost", r.repo_id))?;
            ensure!(to_canonical_pretty(r).unwrap() == to_canonical_pretty(other).unwrap(), "case {case}: repo differs");
        }
    }
    Ok(())
}
