//! `kapso` command line: evolve, inspect, deploy, and knowledge management.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Parser, Subcommand};
use serde_json::{Map, Value};

use kapso_core::deploy::{adapt_repository, AdaptOptions, AdapterRegistry};
use kapso_core::knowledge::{export_package, import_package, IngestOptions, KnowledgeStore, RetrievalConfig};
use kapso_core::orchestrator::{manifest_path, open_run, run_dir, solve, Registry, RunConfig};

#[derive(Parser)]
#[command(name = "kapso", version, about = "Evaluator-grounded program optimization")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the optimization loop described by a config file.
    Evolve {
        config: PathBuf,
        /// Override the config's run id.
        #[arg(long)]
        run_id: Option<String>,
        /// Override the config's state directory.
        #[arg(long)]
        state_dir: Option<PathBuf>,
    },
    /// Show a run's iterations, or one branch's experiment bundle.
    Inspect {
        run_id: String,
        branch: Option<String>,
        #[arg(long, default_value = "kapso-state")]
        state_dir: PathBuf,
    },
    /// Adapt a run's best branch for deployment and print the descriptor.
    Deploy {
        run_id: String,
        #[arg(long, default_value = "LOCAL")]
        strategy: String,
        #[arg(long, default_value = "kapso-state")]
        state_dir: PathBuf,
        /// Deploy this branch instead of the best one.
        #[arg(long)]
        branch: Option<String>,
        /// Callable reference for LOCAL, as module:function.
        #[arg(long)]
        callable: Option<String>,
        /// Invoke the deployed solution once with this JSON object.
        #[arg(long)]
        input: Option<String>,
    },
    /// Manage a knowledge store kept as a package directory.
    Knowledge {
        #[command(subcommand)]
        action: KnowledgeAction,
    },
}

#[derive(Subcommand)]
enum KnowledgeAction {
    /// Mine a repository into the store.
    Ingest {
        path: PathBuf,
        #[arg(long)]
        store: PathBuf,
        #[arg(long)]
        repo_id: Option<String>,
        #[arg(long, value_delimiter = ',')]
        tags: Vec<String>,
    },
    /// Write the store to a new package directory.
    Export {
        path: PathBuf,
        #[arg(long)]
        store: PathBuf,
    },
    /// Merge a package into the store.
    Import {
        path: PathBuf,
        #[arg(long)]
        store: PathBuf,
    },
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn run(cli: Cli) -> Result<u8> {
    match cli.command {
        Command::Evolve { config, run_id, state_dir } => evolve(&config, run_id, state_dir),
        Command::Inspect { run_id, branch, state_dir } => inspect(&state_dir, &run_id, branch.as_deref()).map(|_| 0),
        Command::Deploy { run_id, strategy, state_dir, branch, callable, input } => {
            deploy(&state_dir, &run_id, &strategy, branch, callable, input.as_deref()).map(|_| 0)
        }
        Command::Knowledge { action } => knowledge(action).map(|_| 0),
    }
}

fn evolve(config_path: &Path, run_id: Option<String>, state_dir: Option<PathBuf>) -> Result<u8> {
    let mut config = RunConfig::load(config_path)?;
    if run_id.is_some() {
        config.run_id = run_id;
    }
    if let Some(dir) = state_dir {
        config.state_dir = dir;
    }
    let outcome = solve(&config, &Registry::default())?;
    let m = &outcome.manifest;
    println!("run: {}", m.run_id);
    println!("manifest: {}", manifest_path(&config.state_dir, &m.run_id).display());
    println!("experiments: {}", outcome.history.len());
    match outcome.best() {
        Some(best) => println!(
            "best: {} ({}, utility {})",
            best.branch,
            best.aggregated.record.status.as_str(),
            fmt_utility(best.utility_estimate)
        ),
        None => println!("best: none"),
    }
    if let Some(reason) = m.stop_reason {
        println!("stop: {}", serde_json::to_value(reason)?.as_str().unwrap_or("?"));
    }
    Ok(m.exit_code() as u8)
}

fn fmt_utility(u: Option<f64>) -> String {
    match u {
        Some(v) => v.to_string(),
        None => "n/a".into(),
    }
}

fn inspect(state_dir: &Path, run_id: &str, branch: Option<&str>) -> Result<()> {
    let (manifest, ws) = open_run(state_dir, run_id)?;
    if let Some(branch) = branch {
        let bundle = ws.read_manifest(branch)?;
        println!("{}", serde_json::to_string_pretty(&bundle)?);
        return Ok(());
    }
    println!("run {} ({:?}), goal: {}", manifest.run_id, manifest.status, manifest.goal);
    println!("init: {} rho={:.3} tau={}", manifest.init.decision, manifest.init.rho, manifest.init.tau);
    for it in &manifest.iterations {
        let action = it.action.map(|a| a.as_str()).unwrap_or("-");
        println!("iteration {} beta={:.3} action={action}", it.iteration, it.beta);
        for e in &it.experiments {
            println!(
                "  {} <- {} {} utility={} debug_tries={}",
                e.branch,
                e.parent_branch,
                e.status.as_str(),
                fmt_utility(e.utility),
                e.debug_tries
            );
        }
        if let Some(err) = &it.error {
            println!("  error: {err}");
        }
    }
    println!("best: {}", manifest.best_branch.as_deref().unwrap_or("none"));
    Ok(())
}

fn deploy(
    state_dir: &Path,
    run_id: &str,
    strategy: &str,
    branch: Option<String>,
    callable: Option<String>,
    input: Option<&str>,
) -> Result<()> {
    let registry = AdapterRegistry::default();
    registry.get(strategy)?;
    let (manifest, ws) = open_run(state_dir, run_id)?;
    let branch = branch
        .or(manifest.best_branch.clone())
        .ok_or_else(|| anyhow!("run {run_id} has no experiments to deploy"))?;
    let name = branch.rsplit('/').next().unwrap_or("solution");
    let solution = run_dir(state_dir, run_id).join("deploy").join(name);
    if !solution.exists() {
        ws.checkout_into(&branch, &solution)?;
    }
    let options = AdaptOptions { callable, endpoint: None };
    let descriptor = adapt_repository(&solution, strategy, &options, &registry)?;
    println!("branch: {branch}");
    println!("adapted: {}", descriptor.adapted_path.display());
    println!("{}", serde_json::to_string_pretty(&descriptor)?);
    if let Some(text) = input {
        let inputs: Map<String, Value> = serde_json::from_str(text).context("--input must be a JSON object")?;
        let handle = registry.handle(descriptor)?;
        println!("{}", handle.run(&inputs));
        handle.stop();
    }
    Ok(())
}

fn load_store(dir: &Path) -> Result<KnowledgeStore> {
    if dir.join("package.json").exists() {
        Ok(import_package(dir, RetrievalConfig::default())?)
    } else {
        Ok(KnowledgeStore::new(RetrievalConfig::default()))
    }
}

/// Replace the package at `dir` with `store`, via a sibling temp directory.
fn save_store(store: &KnowledgeStore, dir: &Path) -> Result<()> {
    let parent = dir.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    std::fs::create_dir_all(parent)?;
    let tmp = parent.join(format!(
        ".{}.tmp",
        dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_else(|| "store".into())
    ));
    if tmp.exists() {
        std::fs::remove_dir_all(&tmp)?;
    }
    export_package(store, &tmp)?;
    if dir.exists() {
        std::fs::remove_dir_all(dir)?;
    }
    std::fs::rename(&tmp, dir)?;
    Ok(())
}

fn merge(into: &mut KnowledgeStore, from: &KnowledgeStore) -> Result<()> {
    for repo in from.repos() {
        into.add_repo(repo.clone())?;
    }
    into.index_pages(from.pages().cloned().collect())?;
    Ok(())
}

fn knowledge(action: KnowledgeAction) -> Result<()> {
    match action {
        KnowledgeAction::Ingest { path, store, repo_id, tags } => {
            let mut ks = load_store(&store)?;
            let options = IngestOptions { repo_id, tags, ..Default::default() };
            let entry = ks.ingest(&path, &options)?;
            save_store(&ks, &store)?;
            println!("ingested {} at {}", entry.repo_id, entry.commit_id);
            println!("pages: {}", ks.page_count());
        }
        KnowledgeAction::Export { path, store } => {
            if !store.join("package.json").exists() {
                bail!("no knowledge store at {}", store.display());
            }
            let ks = load_store(&store)?;
            export_package(&ks, &path)?;
            println!("exported {} pages to {}", ks.page_count(), path.display());
            println!("pages: {}", ks.page_count());
        }
        KnowledgeAction::Import { path, store } => {
            let incoming = import_package(&path, RetrievalConfig::default())?;
            let mut ks = load_store(&store)?;
            merge(&mut ks, &incoming)?;
            save_store(&ks, &store)?;
            println!("imported {} pages from {}", incoming.page_count(), path.display());
            println!("pages: {}", ks.page_count());
        }
    }
    Ok(())
}
