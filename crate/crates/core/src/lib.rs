//! Evaluator-grounded program optimization.
//!
//! A run takes a natural-language goal, a budget, and an evaluator contract,
//! then repeatedly proposes solution specifications, has a coding agent edit
//! an isolated git branch, measures the result, and learns from the trace.
//! The best artifact under the evaluator's selection rule is returned.
//!
//! Subsystems:
//!
//! - [`evaluator`]: measurement records, selection, aggregation, budgets, toy evaluators
//! - [`experiment`]: git workspaces, experiment sessions, committed bundles
//! - [`knowledge`]: repository corpus, typed pages, retrieval packets, packages
//! - [`memory`]: episodic lessons and the retry/pivot/complete controller
//! - [`search`]: implement-and-debug loop, linear and tree strategies
//! - [`agent`]: the coding-agent boundary and context rendering
//! - [`orchestrator`]: the outer solve loop and run manifest
//! - [`deploy`]: repository adaptation and the uniform software handle

#![forbid(unsafe_code)]

pub mod agent;
pub mod canonical;
pub mod deploy;
pub mod embedding;
pub mod evaluator;
pub mod experiment;
pub mod knowledge;
pub mod memory;
pub mod orchestrator;
pub mod search;
