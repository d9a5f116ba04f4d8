//! Command-line harness: configuration loading, seed fan-out, trace and
//! summary emission, the fixture invariant suite, and a standalone
//! Gaussian-projection demo.
//!
//! Verbs:
//!
//! * `run` — the corrected trust-region loop ([`run_trirl`]) on a gridworld
//!   described by a JSON config; one CSV trace and one final-tables dump
//!   per seed, plus a summary JSON with mean ± std of the final reverse KL
//!   across seeds.
//! * `baseline` — plain full-step descent ([`run_mce_irl`]), same outputs.
//!   The shipped step size suits the corrected loop; pass
//!   `--set epsilon=0.01` for a stable textbook baseline.
//! * `ablate` — the three deliberately degraded variants
//!   ([`AblationKind`]), one trace per variant per seed.
//! * `transfer` — train, then re-solve the frozen reward from scratch on
//!   the training layout and on its top-to-bottom mirror image, reporting
//!   whether the greedy policy still reaches the mirrored goal.
//! * `check` — invariant suite on a built-in two-state fixture; prints a
//!   machine-readable report and exits 3 when any bound fails.
//! * `project-demo` — the Gaussian trust-region projection on random
//!   instances plus a closed-form one-dimensional worked case.
//!
//! Config files are JSON with two sections:
//!
//! ```json
//! {
//!   "environment": { "width": 5, "height": 5, "goal_cells": [[4, 4]],
//!                    "slip_prob": 0.1, "gamma": 0.99 },
//!   "experiment":  { "epsilon": 0.6, "beta": 30.0 }
//! }
//! ```
//!
//! Both sections reject unknown keys so typos surface as parse errors
//! naming the offending key. `--set key=value` overrides win over file
//! values; bare keys target the experiment section and `environment.`
//! prefixed keys the environment section. Traces are reproducible: the
//! same config and seed yield the same CSV bytes in every column except
//! `wall_ms`, which records actual elapsed time.

use crate::driver::{
    greedy_agreement, greedy_path_reaches, run_ablation, run_mce_irl, run_transfer, run_trirl,
    AblationKind, ExperimentConfig, IterationRecord, RunResult, TransferOutcome,
    Variant,
};
use crate::error::{Result, TrirlError};
use crate::mdp::{
    build_gridworld, compute_occupancy, goal_reward_table, reachable_states, GridworldSpec,
    Occupancy, TabularMdp, TabularPolicy,
};
use crate::reward::{dual_gradient_with_tol, dual_objective_with_tol, RewardTable};
use crate::solver::soft_value_iteration;
use crate::trpl::{project, GaussianParams};
use clap::{Args, Parser, Subcommand, ValueEnum};
use ndarray::{array, Array1, Array2};
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use std::fs;
use std::path::{Path, PathBuf};

/// Column order every emitted trace uses.
pub const CSV_HEADER: &str =
    "iter,dual,reverse_kl,eta,eps_tr,expected_kl,align_lhs,align_rhs,thm1_residual,wall_ms";

/// Bellman tolerance for synthetic experts and finite-difference probes.
const EXPERT_VI_TOL: f64 = 1e-12;

#[derive(Debug, Parser)]
#[command(
    name = "trirl",
    version,
    about = "Trust-region inverse reinforcement learning on tabular gridworlds"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Corrected trust-region IRL runs, one trace per seed.
    Run(RunArgs),
    /// Plain full-step descent baseline (pair with --set epsilon=0.01).
    Baseline(RunArgs),
    /// Degraded variants: uncorrected buffer, no-buffer local, gail-like.
    Ablate(RunArgs),
    /// Frozen-reward retraining on the layout and its vertical mirror.
    Transfer(RunArgs),
    /// Invariant suite on the built-in two-state fixture.
    Check(CheckArgs),
    /// Gaussian trust-region projection on random instances.
    ProjectDemo(ProjectDemoArgs),
}

#[derive(Debug, Args)]
pub struct RunArgs {
    /// JSON experiment configuration.
    #[arg(long)]
    pub config: PathBuf,
    /// Output directory, created if missing.
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
    /// Seeds: `7`, `0..19`, or comma-joined mixtures; ranges inclusive.
    /// Defaults to the config's seed.
    #[arg(long)]
    pub seeds: Option<String>,
    /// Config overrides applied after the file is read.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// Policy-step variant override.
    #[arg(long, value_enum)]
    pub variant: Option<CliVariant>,
    /// Density-ratio mode override.
    #[arg(long, value_enum)]
    pub mode: Option<CliMode>,
}

#[derive(Debug, Args)]
pub struct CheckArgs {
    /// Optional directory for the JSON report (always printed to stdout).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ProjectDemoArgs {
    /// Gaussian dimensions to sweep, comma-separated.
    #[arg(long, default_value = "1,2,5,10")]
    pub dims: String,
    /// Seeds for random instances; same syntax as the run verbs.
    #[arg(long, default_value = "0..999")]
    pub seeds: String,
    /// Mean-component KL bound.
    #[arg(long, default_value_t = 0.5)]
    pub zeta_mu: f64,
    /// Covariance-component KL bound.
    #[arg(long, default_value_t = 0.1)]
    pub zeta_sigma: f64,
    /// Optional directory for the JSON report.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum CliVariant {
    MaxEta,
    TrLoss,
    RetroEta,
}

impl From<CliVariant> for Variant {
    fn from(v: CliVariant) -> Self {
        match v {
            CliVariant::MaxEta => Variant::MaxEta,
            CliVariant::TrLoss => Variant::TrLoss,
            CliVariant::RetroEta => Variant::RetrospectiveEta,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum CliMode {
    Exact,
    Sampled,
}

impl From<CliMode> for crate::driver::RunMode {
    fn from(m: CliMode) -> Self {
        match m {
            CliMode::Exact => crate::driver::RunMode::Exact,
            CliMode::Sampled => crate::driver::RunMode::Sampled,
        }
    }
}

/// The `environment` section of a config file: a gridworld layout plus the
/// discount and the goal-reward magnitude the synthetic expert is trained
/// on (soft-optimal policy for that goal reward, solved tight).
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnvironmentConfig {
    pub width: usize,
    pub height: usize,
    #[serde(default)]
    pub walls: Vec<(usize, usize)>,
    pub goal_cells: Vec<(usize, usize)>,
    #[serde(default)]
    pub start_cells: Option<Vec<(usize, usize)>>,
    pub slip_prob: f64,
    #[serde(default = "default_step_actions")]
    pub step_actions: usize,
    #[serde(default = "default_true")]
    pub terminal_self_loop: bool,
    pub gamma: f64,
    #[serde(default = "default_goal_reward")]
    pub expert_goal_reward: f64,
}

fn default_step_actions() -> usize {
    4
}

fn default_true() -> bool {
    true
}

fn default_goal_reward() -> f64 {
    5.0
}

impl EnvironmentConfig {
    pub fn grid_spec(&self) -> GridworldSpec {
        GridworldSpec {
            width: self.width,
            height: self.height,
            walls: self.walls.clone(),
            goal_cells: self.goal_cells.clone(),
            start_cells: self.start_cells.clone(),
            slip_prob: self.slip_prob,
            step_actions: self.step_actions,
            terminal_self_loop: self.terminal_self_loop,
        }
    }

    pub fn build(&self) -> Result<BuiltEnvironment> {
        build_environment(&self.grid_spec(), self.gamma, self.expert_goal_reward)
    }
}

/// Materialized environment: dynamics, the synthetic expert policy, and
/// the expert's exact occupancy.
pub struct BuiltEnvironment {
    pub mdp: TabularMdp,
    pub expert: TabularPolicy,
    pub rho_e: Occupancy,
}

pub fn build_environment(
    spec: &GridworldSpec,
    gamma: f64,
    expert_goal_reward: f64,
) -> Result<BuiltEnvironment> {
    if !expert_goal_reward.is_finite() {
        return Err(TrirlError::Config(format!(
            "expert_goal_reward must be finite, got {expert_goal_reward}"
        )));
    }
    let mdp = build_gridworld(spec, gamma)?;
    let goal = goal_reward_table(spec, expert_goal_reward);
    let expert = soft_value_iteration(&mdp, &goal, EXPERT_VI_TOL)?.policy;
    let rho_e = compute_occupancy(&mdp, &expert)?;
    Ok(BuiltEnvironment {
        mdp,
        expert,
        rho_e,
    })
}

/// Top-level config file shape.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentFile {
    pub environment: EnvironmentConfig,
    #[serde(default)]
    pub experiment: ExperimentConfig,
}

/// Read a config file and fold in `key=value` overrides. Values parse as
/// JSON scalars, falling back to bare strings so enum names need no extra
/// quoting on the shell.
pub fn load_config(path: &Path, overrides: &[String]) -> Result<ExperimentFile> {
    let text = fs::read_to_string(path).map_err(|e| {
        TrirlError::Config(format!("cannot read config `{}`: {e}", path.display()))
    })?;
    let mut value: Value = serde_json::from_str(&text)?;
    apply_overrides(&mut value, overrides)?;
    Ok(serde_json::from_value(value)?)
}

fn apply_overrides(value: &mut Value, overrides: &[String]) -> Result<()> {
    for item in overrides {
        let (key, raw) = item.split_once('=').ok_or_else(|| {
            TrirlError::Config(format!("override `{item}` is not of the form key=value"))
        })?;
        let parsed: Value =
            serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
        let (section, field) = match key.strip_prefix("environment.") {
            Some(f) => ("environment", f),
            None => ("experiment", key.strip_prefix("experiment.").unwrap_or(key)),
        };
        if field.is_empty() {
            return Err(TrirlError::Config(format!("override `{item}` names no field")));
        }
        let root = value.as_object_mut().ok_or_else(|| {
            TrirlError::Config("config root must be a JSON object".to_string())
        })?;
        let entry = root
            .entry(section.to_string())
            .or_insert_with(|| Value::Object(Default::default()));
        let obj = entry.as_object_mut().ok_or_else(|| {
            TrirlError::Config(format!("config section `{section}` must be a JSON object"))
        })?;
        obj.insert(field.to_string(), parsed);
    }
    Ok(())
}

fn load_run_config(args: &RunArgs) -> Result<ExperimentFile> {
    let mut file = load_config(&args.config, &args.set)?;
    if let Some(v) = args.variant {
        file.experiment.variant = v.into();
    }
    if let Some(m) = args.mode {
        file.experiment.mode = m.into();
    }
    file.experiment.validate()?;
    Ok(file)
}

/// Parse `7`, `0..19`, or comma-joined mixtures; ranges are inclusive.
pub fn parse_seeds(text: &str) -> Result<Vec<u64>> {
    let mut seeds = Vec::new();
    for token in text.split(',') {
        let token = token.trim();
        let bad = |what: &str| TrirlError::Config(format!("seed {what} in `{text}`"));
        if let Some((lo, hi)) = token.split_once("..") {
            let lo: u64 = lo.trim().parse().map_err(|_| bad("range start not an integer"))?;
            let hi: u64 = hi.trim().parse().map_err(|_| bad("range end not an integer"))?;
            if hi < lo {
                return Err(bad("range runs backwards"));
            }
            seeds.extend(lo..=hi);
        } else {
            seeds.push(token.parse().map_err(|_| bad("token not an integer"))?);
        }
    }
    if seeds.is_empty() {
        return Err(TrirlError::Config("no seeds given".to_string()));
    }
    Ok(seeds)
}

fn resolve_seeds(arg: Option<&str>, config_seed: u64) -> Result<Vec<u64>> {
    match arg {
        Some(text) => parse_seeds(text),
        None => Ok(vec![config_seed]),
    }
}

/// Render records under [`CSV_HEADER`]. Floats use the shortest
/// round-trippable decimal form, so equal values are equal bytes.
pub fn records_to_csv(records: &[IterationRecord]) -> String {
    let mut out = String::with_capacity(64 * (records.len() + 1));
    out.push_str(CSV_HEADER);
    out.push('\n');
    for r in records {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{}\n",
            r.iter,
            r.dual_value,
            r.reverse_kl,
            r.eta,
            r.epsilon_tr,
            r.expected_kl,
            r.alignment_lhs,
            r.alignment_rhs,
            r.theorem1_residual,
            r.wall_ms
        ));
    }
    out
}

/// Schema check applied to every trace before it is written: exact header,
/// ten columns, strictly increasing iteration index, finite values.
pub fn validate_csv(text: &str) -> Result<()> {
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h == CSV_HEADER => {}
        other => {
            return Err(TrirlError::InvalidArgument(format!(
                "csv header mismatch: got {other:?}"
            )))
        }
    }
    let mut prev_iter: Option<u64> = None;
    let mut rows = 0usize;
    for (idx, line) in lines.enumerate() {
        let row = idx + 2;
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 10 {
            return Err(TrirlError::InvalidArgument(format!(
                "csv row {row} has {} fields, want 10",
                fields.len()
            )));
        }
        let iter: u64 = fields[0].parse().map_err(|_| {
            TrirlError::InvalidArgument(format!("csv row {row} iter `{}` not an integer", fields[0]))
        })?;
        if let Some(prev) = prev_iter {
            if iter <= prev {
                return Err(TrirlError::InvalidArgument(format!(
                    "csv row {row} iter index {iter} does not increase past {prev}"
                )));
            }
        }
        prev_iter = Some(iter);
        for field in &fields[1..] {
            let v: f64 = field.parse().map_err(|_| {
                TrirlError::InvalidArgument(format!("csv row {row} value `{field}` not a number"))
            })?;
            if !v.is_finite() {
                return Err(TrirlError::InvalidArgument(format!(
                    "csv row {row} holds non-finite value {v}"
                )));
            }
        }
        rows += 1;
    }
    if rows == 0 {
        return Err(TrirlError::InvalidArgument("csv has no data rows".to_string()));
    }
    Ok(())
}

fn write_trace(path: &Path, records: &[IterationRecord]) -> Result<()> {
    let text = records_to_csv(records);
    validate_csv(&text)?;
    fs::write(path, text)?;
    Ok(())
}

fn write_json(path: &Path, value: &Value) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = if xs.len() > 1 {
        xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (mean, var.sqrt())
}

fn stats_block(xs: &[f64]) -> Value {
    let (mean, std) = mean_std(xs);
    json!({ "mean": mean, "std": std, "per_seed": xs })
}

fn final_reverse_kls(results: &[&RunResult]) -> Vec<f64> {
    results
        .iter()
        .map(|r| r.records.last().map_or(f64::NAN, |x| x.reverse_kl))
        .collect()
}

fn trace_stats(results: &[&RunResult]) -> Value {
    let finals = final_reverse_kls(results);
    let duals: Vec<f64> = results
        .iter()
        .map(|r| r.records.last().map_or(f64::NAN, |x| x.dual_value))
        .collect();
    json!({
        "final_reverse_kl": stats_block(&finals),
        "final_dual": stats_block(&duals),
        "iterations": results.iter().map(|r| r.records.len()).collect::<Vec<_>>(),
        "converged": results.iter().map(|r| r.converged).collect::<Vec<_>>(),
        "dual_violations": results.iter().map(|r| r.dual_violations).collect::<Vec<_>>(),
        "total_inner_sweeps": results.iter().map(|r| r.total_inner_sweeps).collect::<Vec<_>>(),
        "reward_validity": results.iter().map(|r| r.reward_validity).collect::<Vec<_>>(),
    })
}

fn final_tables_json(result: &RunResult) -> Value {
    let reward: Vec<Vec<f64>> = result
        .final_reward
        .table
        .outer_iter()
        .map(|row| row.to_vec())
        .collect();
    let policy: Vec<Vec<f64>> = result
        .final_policy
        .probs
        .outer_iter()
        .map(|row| row.to_vec())
        .collect();
    json!({
        "n_states": result.final_policy.n_states(),
        "n_actions": result.final_policy.n_actions(),
        "reward": reward,
        "policy": policy,
        "greedy_actions": result.final_policy.greedy_actions(),
        "converged": result.converged,
        "reward_validity": result.reward_validity,
    })
}

/// Honor the `TRIRL_THREADS` env var for the seed fan-out pool.
fn configure_threads() -> Result<()> {
    match std::env::var("TRIRL_THREADS") {
        Ok(text) => {
            let n: usize = text.trim().parse().map_err(|_| {
                TrirlError::Config(format!(
                    "TRIRL_THREADS must be a positive integer, got `{text}`"
                ))
            })?;
            if n == 0 {
                return Err(TrirlError::Config(
                    "TRIRL_THREADS must be at least 1".to_string(),
                ));
            }
            // build_global errors if a pool already exists; keep that one.
            let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
            Ok(())
        }
        Err(_) => Ok(()),
    }
}

/// Dispatch a parsed command line; the binary maps errors to exit codes.
pub fn run(cli: Cli) -> Result<()> {
    configure_threads()?;
    match cli.command {
        Command::Run(args) => cmd_single(&args, SingleRun::Corrected),
        Command::Baseline(args) => cmd_single(&args, SingleRun::Baseline),
        Command::Ablate(args) => cmd_ablate(&args),
        Command::Transfer(args) => cmd_transfer(&args),
        Command::Check(args) => cmd_check(&args),
        Command::ProjectDemo(args) => cmd_project_demo(&args),
    }
}

#[derive(Clone, Copy)]
enum SingleRun {
    Corrected,
    Baseline,
}

impl SingleRun {
    fn prefix(self) -> &'static str {
        match self {
            SingleRun::Corrected => "run",
            SingleRun::Baseline => "baseline",
        }
    }
}

fn cmd_single(args: &RunArgs, which: SingleRun) -> Result<()> {
    let file = load_run_config(args)?;
    let env = file.environment.build()?;
    let seeds = resolve_seeds(args.seeds.as_deref(), file.experiment.seed)?;
    fs::create_dir_all(&args.out)?;
    let prefix = which.prefix();
    let results: Vec<RunResult> = seeds
        .par_iter()
        .map(|&seed| {
            let cfg = ExperimentConfig {
                seed,
                ..file.experiment.clone()
            };
            let result = match which {
                SingleRun::Corrected => run_trirl(&env.mdp, &env.rho_e, &cfg)?,
                SingleRun::Baseline => run_mce_irl(&env.mdp, &env.rho_e, &cfg)?,
            };
            write_trace(
                &args.out.join(format!("{prefix}_seed{seed}.csv")),
                &result.records,
            )?;
            write_json(
                &args.out.join(format!("{prefix}_final_seed{seed}.json")),
                &final_tables_json(&result),
            )?;
            Ok(result)
        })
        .collect::<Result<_>>()?;
    let mask = reachable_states(&env.mdp);
    let agreements: Vec<f64> = results
        .iter()
        .map(|r| greedy_agreement(&r.final_policy, &env.expert, &mask))
        .collect::<Result<_>>()?;
    let refs: Vec<&RunResult> = results.iter().collect();
    let mut summary = trace_stats(&refs);
    summary["command"] = json!(prefix);
    summary["config"] = json!(args.config.display().to_string());
    summary["seeds"] = json!(seeds);
    summary["expert_greedy_agreement"] = json!(agreements);
    let summary_path = args.out.join(format!("{prefix}_summary.json"));
    write_json(&summary_path, &summary)?;
    for (seed, r) in seeds.iter().zip(&results) {
        let last = r.records.last().expect("runs emit at least one record");
        println!(
            "seed {seed}: {} iterations, converged={}, final reverse KL {:.3e}, dual violations {}",
            r.records.len(),
            r.converged,
            last.reverse_kl,
            r.dual_violations
        );
    }
    let (mean, std) = mean_std(&final_reverse_kls(&refs));
    println!(
        "final reverse KL over {} seed(s): mean {mean:.6e}, std {std:.6e}",
        seeds.len()
    );
    println!("summary written to {}", summary_path.display());
    Ok(())
}

const ABLATIONS: [(AblationKind, &str); 3] = [
    (AblationKind::UncorrectedBuffer, "uncorrected_buffer"),
    (AblationKind::NoBufferLocal, "no_buffer_local"),
    (AblationKind::GailLike, "gail_like"),
];

fn cmd_ablate(args: &RunArgs) -> Result<()> {
    let file = load_run_config(args)?;
    let env = file.environment.build()?;
    let seeds = resolve_seeds(args.seeds.as_deref(), file.experiment.seed)?;
    fs::create_dir_all(&args.out)?;
    let mut jobs = Vec::new();
    for &seed in &seeds {
        for k in 0..ABLATIONS.len() {
            jobs.push((seed, k));
        }
    }
    let results: Vec<RunResult> = jobs
        .par_iter()
        .map(|&(seed, k)| {
            let (kind, name) = ABLATIONS[k];
            let cfg = ExperimentConfig {
                seed,
                ..file.experiment.clone()
            };
            let result = run_ablation(&env.mdp, &env.rho_e, &cfg, kind)?;
            write_trace(
                &args.out.join(format!("ablate_{name}_seed{seed}.csv")),
                &result.records,
            )?;
            Ok(result)
        })
        .collect::<Result<_>>()?;
    let mut kinds = serde_json::Map::new();
    for (k, (_, name)) in ABLATIONS.iter().enumerate() {
        let subset: Vec<&RunResult> = jobs
            .iter()
            .zip(&results)
            .filter(|((_, kk), _)| *kk == k)
            .map(|(_, r)| r)
            .collect();
        kinds.insert(name.to_string(), trace_stats(&subset));
        let finals = final_reverse_kls(&subset);
        let (mean, std) = mean_std(&finals);
        let violations: u64 = subset.iter().map(|r| r.dual_violations).sum();
        println!(
            "{name}: final reverse KL mean {mean:.6e}, std {std:.6e}, dual violations {violations}"
        );
    }
    let summary = json!({
        "command": "ablate",
        "config": args.config.display().to_string(),
        "seeds": seeds,
        "kinds": kinds,
    });
    let summary_path = args.out.join("ablate_summary.json");
    write_json(&summary_path, &summary)?;
    println!("summary written to {}", summary_path.display());
    Ok(())
}

fn cmd_transfer(args: &RunArgs) -> Result<()> {
    let file = load_run_config(args)?;
    let train_env = file.environment.build()?;
    let flipped_spec = file.environment.grid_spec().flipped_vertical();
    let cross_env = build_environment(
        &flipped_spec,
        file.environment.gamma,
        file.environment.expert_goal_reward,
    )?;
    let seeds = resolve_seeds(args.seeds.as_deref(), file.experiment.seed)?;
    fs::create_dir_all(&args.out)?;
    let outcomes: Vec<TransferOutcome> = seeds
        .par_iter()
        .map(|&seed| {
            let cfg = ExperimentConfig {
                seed,
                ..file.experiment.clone()
            };
            let outcome = run_transfer(
                &train_env.mdp,
                &cross_env.mdp,
                &train_env.rho_e,
                Some(&cross_env.rho_e),
                &cfg,
            )?;
            write_trace(
                &args.out.join(format!("transfer_train_seed{seed}.csv")),
                &outcome.train.records,
            )?;
            write_trace(
                &args.out.join(format!("transfer_retrain_seed{seed}.csv")),
                &outcome.retrain.records,
            )?;
            write_trace(
                &args.out.join(format!("transfer_cross_seed{seed}.csv")),
                &outcome.transfer.records,
            )?;
            write_json(
                &args.out.join(format!("transfer_final_seed{seed}.json")),
                &final_tables_json(&outcome.train),
            )?;
            Ok(outcome)
        })
        .collect::<Result<_>>()?;
    let goal_idx: Vec<usize> = flipped_spec
        .goal_cells
        .iter()
        .map(|&(r, c)| flipped_spec.state_index(r, c))
        .collect();
    let starts: Vec<usize> = cross_env
        .mdp
        .initial_dist
        .iter()
        .enumerate()
        .filter(|(_, &p)| p > 0.0)
        .map(|(s, _)| s)
        .collect();
    let max_steps = 2 * cross_env.mdp.n_states;
    let mask = reachable_states(&cross_env.mdp);
    let mut retrain_sup = Vec::new();
    let mut reached = Vec::new();
    let mut cross_agreement = Vec::new();
    for outcome in &outcomes {
        retrain_sup.push(
            outcome
                .train
                .final_policy
                .sup_distance(&outcome.retrain.final_policy),
        );
        let mut all_starts = true;
        for &s in &starts {
            all_starts &= greedy_path_reaches(
                &cross_env.mdp,
                &outcome.transfer.final_policy,
                s,
                &goal_idx,
                max_steps,
            )?;
        }
        reached.push(all_starts);
        cross_agreement.push(greedy_agreement(
            &outcome.transfer.final_policy,
            &cross_env.expert,
            &mask,
        )?);
    }
    let train_refs: Vec<&RunResult> = outcomes.iter().map(|o| &o.train).collect();
    let retrain_refs: Vec<&RunResult> = outcomes.iter().map(|o| &o.retrain).collect();
    let cross_refs: Vec<&RunResult> = outcomes.iter().map(|o| &o.transfer).collect();
    let n_reached = reached.iter().filter(|&&b| b).count();
    let summary = json!({
        "command": "transfer",
        "config": args.config.display().to_string(),
        "seeds": seeds,
        "train": trace_stats(&train_refs),
        "retrain": trace_stats(&retrain_refs),
        "transfer": trace_stats(&cross_refs),
        "retrain_policy_sup": retrain_sup,
        "goal_reached": reached,
        "all_goals_reached": n_reached == outcomes.len(),
        "cross_greedy_agreement": cross_agreement,
    });
    let summary_path = args.out.join("transfer_summary.json");
    write_json(&summary_path, &summary)?;
    for ((seed, sup), ok) in seeds.iter().zip(&retrain_sup).zip(&reached) {
        println!("seed {seed}: retrain policy sup {sup:.3e}, mirrored goal reached {ok}");
    }
    println!(
        "mirrored goal reached in {n_reached}/{} seed(s)",
        outcomes.len()
    );
    println!("summary written to {}", summary_path.display());
    Ok(())
}

/// One row of the `check` report.
#[derive(Debug, Clone, Serialize)]
pub struct InvariantCheck {
    pub name: String,
    pub observed: f64,
    pub bound: f64,
    pub pass: bool,
}

impl InvariantCheck {
    fn new(name: &str, observed: f64, bound: f64) -> Self {
        Self {
            name: name.to_string(),
            observed,
            bound,
            pass: observed <= bound,
        }
    }
}

fn two_state_fixture() -> Result<(TabularMdp, Occupancy)> {
    let mdp = TabularMdp::new(
        array![[[0.9, 0.1], [0.2, 0.8]], [[0.7, 0.3], [0.05, 0.95]]],
        array![1.0, 0.0],
        0.9,
    )?;
    let expert = soft_value_iteration(&mdp, &array![[1.0, -0.5], [-0.5, 1.0]], EXPERT_VI_TOL)?.policy;
    let rho_e = compute_occupancy(&mdp, &expert)?;
    Ok((mdp, rho_e))
}

/// A configuration under which the corrected loop provably settles on the
/// fixture: a constant moderate penalty and enough iterations for the
/// reward recursion (geometric at rate `1 - eps_tr`) to flush the start
/// point out of the final table.
fn check_config() -> ExperimentConfig {
    ExperimentConfig {
        epsilon: 0.5,
        beta: 2.0,
        eta_init: 10.0,
        eta_decay: 1.0,
        eta_floor: 10.0,
        max_iters: 300,
        rkl_tol: 1e-12,
        ..ExperimentConfig::default()
    }
}

fn dual_gradient_fd_error(mdp: &TabularMdp, rho_e: &Occupancy, beta: f64) -> Result<f64> {
    let probe = array![[1.0, -0.5], [-0.5, 1.0]];
    let h = 1e-5;
    let grad = dual_gradient_with_tol(
        mdp,
        &RewardTable::new(probe.clone())?,
        rho_e,
        beta,
        EXPERT_VI_TOL,
    )?;
    let mut max_err = 0.0f64;
    let mut max_grad = 0.0f64;
    for s in 0..mdp.n_states {
        for a in 0..mdp.n_actions {
            let mut plus = probe.clone();
            plus[[s, a]] += h;
            let mut minus = probe.clone();
            minus[[s, a]] -= h;
            let gp =
                dual_objective_with_tol(mdp, &RewardTable::new(plus)?, rho_e, beta, EXPERT_VI_TOL)?;
            let gm = dual_objective_with_tol(
                mdp,
                &RewardTable::new(minus)?,
                rho_e,
                beta,
                EXPERT_VI_TOL,
            )?;
            let fd = (gp - gm) / (2.0 * h);
            max_err = max_err.max((fd - grad[[s, a]]).abs());
            max_grad = max_grad.max(grad[[s, a]].abs());
        }
    }
    Ok(max_err / max_grad)
}

/// The invariant suite behind the `check` verb. A monotonicity violation
/// inside the corrected run surfaces as an error before any report is
/// produced; everything else lands in the returned rows.
pub fn run_check() -> Result<Vec<InvariantCheck>> {
    let (mdp, rho_e) = two_state_fixture()?;
    let cfg = check_config();
    let result = run_trirl(&mdp, &rho_e, &cfg)?;
    let mce = run_mce_irl(
        &mdp,
        &rho_e,
        &ExperimentConfig {
            epsilon: 0.01,
            max_iters: 500,
            ..cfg.clone()
        },
    )?;

    let mut worst_drop = 0.0f64;
    for w in result.records.windows(2) {
        worst_drop = worst_drop.max(w[0].dual_value - w[1].dual_value);
    }
    let thm1 = result
        .records
        .iter()
        .map(|r| r.theorem1_residual)
        .fold(0.0f64, f64::max);
    let align = result
        .records
        .iter()
        .map(|r| (r.alignment_lhs - r.alignment_rhs).abs())
        .fold(0.0f64, f64::max);
    let fd = dual_gradient_fd_error(&mdp, &rho_e, cfg.beta)?;
    let occ_trirl = compute_occupancy(&mdp, &result.final_policy)?;
    let occ_mce = compute_occupancy(&mdp, &mce.final_policy)?;

    Ok(vec![
        InvariantCheck::new("monotone_dual", worst_drop, 1e-9),
        InvariantCheck::new("theorem1_residual", thm1, 1e-6),
        InvariantCheck::new("alignment_identity", align, 1e-8),
        InvariantCheck::new("dual_gradient_fd", fd, 1e-4),
        InvariantCheck::new("saddle_agreement", occ_trirl.l1_to(&occ_mce), 1e-3),
        InvariantCheck::new("reward_validity", result.reward_validity, 1e-3),
    ])
}

fn cmd_check(args: &CheckArgs) -> Result<()> {
    let checks = run_check()?;
    let all_pass = checks.iter().all(|c| c.pass);
    let report = json!({
        "fixture": "two_state",
        "invariants": checks,
        "all_pass": all_pass,
    });
    println!("{}", serde_json::to_string_pretty(&report)?);
    if let Some(dir) = &args.out {
        fs::create_dir_all(dir)?;
        write_json(&dir.join("check_report.json"), &report)?;
    }
    if let Some(fail) = checks.iter().find(|c| !c.pass) {
        return Err(TrirlError::InvariantFailure {
            name: fail.name.clone(),
            observed: fail.observed,
            bound: fail.bound,
        });
    }
    Ok(())
}

fn parse_dims(text: &str) -> Result<Vec<usize>> {
    let mut dims = Vec::new();
    for token in text.split(',') {
        let d: usize = token.trim().parse().map_err(|_| {
            TrirlError::Config(format!("dimension `{token}` is not a positive integer"))
        })?;
        if d == 0 {
            return Err(TrirlError::Config("dimensions must be at least 1".to_string()));
        }
        dims.push(d);
    }
    Ok(dims)
}

fn random_spd(rng: &mut ChaCha8Rng, d: usize) -> Array2<f64> {
    let a = Array2::from_shape_fn((d, d), |_| rng.random::<f64>() * 2.0 - 1.0);
    let mut m = a.dot(&a.t());
    for i in 0..d {
        m[[i, i]] += 0.1;
    }
    m
}

/// The closed-form 1-d projection anchor: a unit Gaussian at the origin,
/// a predicted mean of 2, and a mean bound of 1/2 force multiplier 1 and a
/// projected mean of exactly 1.
pub fn demo_worked_case() -> Result<(f64, f64)> {
    let old = GaussianParams::new(array![0.0], array![[1.0]])?;
    let pred = GaussianParams::new(array![2.0], array![[1.0]])?;
    let res = project(&pred, &old, 0.5, 0.1)?;
    Ok((res.eta_mu, res.projected.mean[0]))
}

fn cmd_project_demo(args: &ProjectDemoArgs) -> Result<()> {
    let dims = parse_dims(&args.dims)?;
    let seeds = parse_seeds(&args.seeds)?;
    if !(args.zeta_mu > 0.0) || !(args.zeta_sigma > 0.0) {
        return Err(TrirlError::Config(
            "projection bounds must be positive".to_string(),
        ));
    }

    let (eta_mu, mean) = demo_worked_case()?;
    println!("worked 1-d case (mean 2 into a 0.5 bound around 0): eta_mu = {eta_mu}, projected mean = {mean}");
    let worked_ok = (eta_mu - 1.0).abs() <= 1e-12 && (mean - 1.0).abs() <= 1e-12;
    if !worked_ok {
        return Err(TrirlError::InvariantFailure {
            name: "projection_worked_case".to_string(),
            observed: (eta_mu - 1.0).abs().max((mean - 1.0).abs()),
            bound: 1e-12,
        });
    }
    let in_region = project(
        &GaussianParams::new(array![0.5], array![[1.0]])?,
        &GaussianParams::new(array![0.0], array![[1.0]])?,
        0.5,
        0.1,
    )?;
    println!(
        "in-region 1-d case: eta_mu = {}, eta_sigma = {} (pass-through)",
        in_region.eta_mu, in_region.eta_sigma
    );

    let mut dim_rows = Vec::new();
    let mut total_violations = 0u64;
    for &d in &dims {
        let mut violations = 0u64;
        let mut max_mean_excess = f64::NEG_INFINITY;
        let mut max_cov_excess = f64::NEG_INFINITY;
        let mut max_eta_mu = 0.0f64;
        let mut max_eta_sigma = 0.0f64;
        let mut active_mean = 0u64;
        let mut active_cov = 0u64;
        for &seed in &seeds {
            let mut rng = ChaCha8Rng::seed_from_u64(
                seed.wrapping_add((d as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)),
            );
            let old = GaussianParams::new(
                Array1::from_shape_fn(d, |_| rng.random::<f64>() * 2.0 - 1.0),
                random_spd(&mut rng, d),
            )?;
            let pred = GaussianParams::new(
                Array1::from_shape_fn(d, |_| rng.random::<f64>() * 4.0 - 2.0),
                random_spd(&mut rng, d),
            )?;
            let res = project(&pred, &old, args.zeta_mu, args.zeta_sigma)?;
            let mean_excess = res.d_mean_after - args.zeta_mu;
            let cov_excess = res.d_cov_after - args.zeta_sigma;
            if mean_excess > 1e-8 || cov_excess > 1e-8 {
                violations += 1;
            }
            max_mean_excess = max_mean_excess.max(mean_excess);
            max_cov_excess = max_cov_excess.max(cov_excess);
            max_eta_mu = max_eta_mu.max(res.eta_mu);
            max_eta_sigma = max_eta_sigma.max(res.eta_sigma);
            active_mean += u64::from(res.eta_mu > 0.0);
            active_cov += u64::from(res.eta_sigma > 0.0);
        }
        println!(
            "d={d}: {} instances, {violations} bound violations, max mean-KL excess {max_mean_excess:.3e}, max cov-KL excess {max_cov_excess:.3e}, max eta_mu {max_eta_mu:.3e}, max eta_sigma {max_eta_sigma:.3e}, active mean/cov {active_mean}/{active_cov}",
            seeds.len()
        );
        total_violations += violations;
        dim_rows.push(json!({
            "d": d,
            "instances": seeds.len(),
            "violations": violations,
            "max_mean_excess": max_mean_excess,
            "max_cov_excess": max_cov_excess,
            "max_eta_mu": max_eta_mu,
            "max_eta_sigma": max_eta_sigma,
            "active_mean": active_mean,
            "active_cov": active_cov,
        }));
    }
    println!("total bound violations: {total_violations}");

    if let Some(dir) = &args.out {
        fs::create_dir_all(dir)?;
        let report = json!({
            "worked_case": { "eta_mu": eta_mu, "projected_mean": mean },
            "zeta_mu": args.zeta_mu,
            "zeta_sigma": args.zeta_sigma,
            "dims": dim_rows,
            "total_violations": total_violations,
        });
        write_json(&dir.join("projection_report.json"), &report)?;
    }
    if total_violations > 0 {
        return Err(TrirlError::InvariantFailure {
            name: "projection_bounds".to_string(),
            observed: total_violations as f64,
            bound: 0.0,
        });
    }
    Ok(())
}
