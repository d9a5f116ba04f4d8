//! Outer dual-descent loop: alternating trust-region policy steps with
//! step-size-corrected reward updates on the entropy-regularized
//! occupancy-matching Lagrangian.
//!
//! One iteration, starting from a reward `r_i` whose soft-optimal policy is
//! `pi_i`:
//!
//! ```text
//! D_i      = log(rho_E / rho_{pi_i})                    density ratio
//! r~       = (1 - eps) r_i + eps beta D_i               target reward
//! pi_{i+1} = TR-constrained soft-optimal policy of r~   multiplier eta_i
//! r_{i+1}  = (1 - eps_tr) r_i + eps_tr beta D_i         eps_tr = eps / (1 + eta_i)
//! ```
//!
//! Shrinking the reward step to the step size the policy actually realized
//! keeps the pair on the soft-optimality correspondence: `pi_{i+1}` is
//! exactly the unconstrained soft-optimal policy of `r_{i+1}`, which every
//! iteration re-checks through `theorem1_residual`. The recorded
//! `dual_value` is the negated dual objective, so monotone descent reads as
//! a non-decreasing column; exact-mode runs treat any decrease beyond
//! [`MONOTONE_SLACK`] as an error rather than a warning.
//!
//! The `variant` knob selects how the multiplier is produced. `max_eta`
//! solves the expected-KL constraint exactly each iteration; it is the
//! textbook form but turns the bound off once steps shrink below `zeta`,
//! which at aggressive `epsilon * beta` re-exposes the oscillation the
//! trust region exists to suppress. `tr_loss` runs a scheduled penalty
//! weight instead (the form that stays damped near the saddle) and is the
//! default. `retrospective_eta` re-projects buffered policy snapshots in
//! hindsight and re-folds the reward with the recomputed multipliers; the
//! re-fold revises the reward history that earlier dual values were
//! computed against, so that variant reports dual decreases through
//! `dual_violations` instead of failing on them.

use crate::density::{
    buffer_corrected_reward, buffer_intermediate_reward, buffer_push, buffer_set_newest_eta,
    recompute_etas_retrospective, sample_trajectories, train_logistic_discriminator,
    visited_states, DiscBuffer, RatioProvider,
};
use crate::error::{Result, TrirlError};
use crate::mdp::{
    compute_occupancy, expected_policy_kl, policy_from_occupancy, Occupancy, TabularMdp,
    TabularPolicy,
};
use crate::reward::{
    alignment_check, dual_value_from_solution, floor_hits, log_density_ratio_exact, reward_update,
    rho_hat, reverse_kl, RewardTable,
};
use crate::solver::{
    lemma1_transform, soft_backup_sweeps, soft_value_iteration, soft_value_iteration_from,
    SoftSolution, TrustRegionSolver,
};
use ndarray::Array1;
use serde::{Deserialize, Serialize};
use std::time::Instant;

/// Largest dual decrease between consecutive records that still counts as
/// round-off rather than a violation.
pub const MONOTONE_SLACK: f64 = 1e-9;

/// Bellman sweeps the saturating-discriminator baseline spends per
/// iteration instead of solving its critic to convergence.
pub const GAIL_LOCAL_SWEEPS: u64 = 10;

/// Whether density ratios come from exact occupancies or from rollouts and
/// a fitted discriminator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunMode {
    Exact,
    Sampled,
}

/// How the trust-region multiplier is produced each iteration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Solve the expected-KL constraint exactly (multiplier from the bound).
    MaxEta,
    /// Scheduled penalty weight `eta_i = max(eta_init * eta_decay^i, eta_floor)`.
    TrLoss,
    /// Scheduled steps, then buffered multipliers recomputed in hindsight.
    RetrospectiveEta,
}

/// Deliberately broken sibling runs used as baselines.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationKind {
    /// Trust-region policy steps, but reward folds at the uncorrected step.
    UncorrectedBuffer,
    /// No history: each iteration optimizes `beta * logits` directly.
    NoBufferLocal,
    /// Saturating reward `log sigmoid(logits)` with a deliberately stale
    /// critic ([`GAIL_LOCAL_SWEEPS`] Bellman sweeps, never to convergence).
    GailLike,
}

/// Everything one run needs besides the MDP and the expert occupancy.
///
/// All fields have defaults, so a JSON config only has to name what it
/// overrides. Unknown keys are rejected.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Uncorrected reward step size.
    pub epsilon: f64,
    /// Inverse temperature scaling log-ratios into rewards.
    pub beta: f64,
    /// Expected-KL trust-region radius.
    pub zeta: f64,
    /// Ratio-estimate history window.
    pub buffer_k: usize,
    pub mode: RunMode,
    pub variant: Variant,
    /// Penalty-schedule parameters (`tr_loss` / `retrospective_eta` only).
    pub eta_init: f64,
    pub eta_decay: f64,
    pub eta_floor: f64,
    pub max_iters: usize,
    /// Stop once the reverse KL of the iterate's occupancy falls below this.
    pub rkl_tol: f64,
    /// Bellman sup-norm tolerance for converged solves.
    pub vi_tol: f64,
    /// The `max_eta` bound is located to `kl_tol_frac * zeta` precision.
    pub kl_tol_frac: f64,
    /// Density floor for exact log-ratios.
    pub floor: f64,
    /// Scale of the noise injected when the window folds into its base.
    pub fit_noise: f64,
    pub seed: u64,
    /// Sampled mode: rollout count per batch.
    pub episodes: usize,
    /// Sampled mode: hard cap on episode length.
    pub horizon: usize,
    /// Sampled mode: discriminator gradient steps per iteration.
    pub disc_steps: usize,
    /// Sampled mode: discriminator learning rate.
    pub disc_lr: f64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            epsilon: 0.6,
            beta: 30.0,
            zeta: 0.1,
            buffer_k: 100,
            mode: RunMode::Exact,
            variant: Variant::TrLoss,
            eta_init: 80.0,
            eta_decay: 1.0,
            eta_floor: 60.0,
            max_iters: 500,
            rkl_tol: 1e-6,
            vi_tol: 1e-10,
            kl_tol_frac: 0.01,
            floor: 1e-12,
            fit_noise: 0.0,
            seed: 0,
            episodes: 2000,
            horizon: 300,
            disc_steps: 4000,
            disc_lr: 2.0,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(TrirlError::Config(msg));
        if !(self.epsilon > 0.0 && self.epsilon <= 1.0) {
            return bad(format!("epsilon must lie in (0, 1], got {}", self.epsilon));
        }
        if !(self.beta > 0.0) || !self.beta.is_finite() {
            return bad(format!("beta must be positive and finite, got {}", self.beta));
        }
        if !(self.zeta > 0.0) || !self.zeta.is_finite() {
            return bad(format!("zeta must be positive and finite, got {}", self.zeta));
        }
        if self.buffer_k == 0 {
            return bad("buffer_k must be positive".into());
        }
        if !(self.eta_init >= 0.0) || !self.eta_init.is_finite() {
            return bad(format!(
                "eta_init must be finite and non-negative, got {}",
                self.eta_init
            ));
        }
        if !(self.eta_decay > 0.0 && self.eta_decay <= 1.0) {
            return bad(format!(
                "eta_decay must lie in (0, 1], got {}",
                self.eta_decay
            ));
        }
        if !(self.eta_floor >= 0.0) || !self.eta_floor.is_finite() {
            return bad(format!(
                "eta_floor must be finite and non-negative, got {}",
                self.eta_floor
            ));
        }
        if self.max_iters == 0 {
            return bad("max_iters must be positive".into());
        }
        if !(self.rkl_tol > 0.0) || !self.rkl_tol.is_finite() {
            return bad(format!(
                "rkl_tol must be positive and finite, got {}",
                self.rkl_tol
            ));
        }
        if !(self.vi_tol > 0.0) || !self.vi_tol.is_finite() {
            return bad(format!(
                "vi_tol must be positive and finite, got {}",
                self.vi_tol
            ));
        }
        if !(self.kl_tol_frac > 0.0 && self.kl_tol_frac <= 1.0) {
            return bad(format!(
                "kl_tol_frac must lie in (0, 1], got {}",
                self.kl_tol_frac
            ));
        }
        if !(self.floor > 0.0) || !self.floor.is_finite() {
            return bad(format!(
                "floor must be positive and finite, got {}",
                self.floor
            ));
        }
        if !(self.fit_noise >= 0.0) || !self.fit_noise.is_finite() {
            return bad(format!(
                "fit_noise must be finite and non-negative, got {}",
                self.fit_noise
            ));
        }
        if self.episodes == 0 || self.horizon == 0 {
            return bad("episodes and horizon must be positive".into());
        }
        if self.disc_steps == 0 {
            return bad("disc_steps must be positive".into());
        }
        if !(self.disc_lr > 0.0) || !self.disc_lr.is_finite() {
            return bad(format!(
                "disc_lr must be positive and finite, got {}",
                self.disc_lr
            ));
        }
        Ok(())
    }

    fn scheduled_eta(&self, iter: usize) -> f64 {
        (self.eta_init * self.eta_decay.powi(iter as i32)).max(self.eta_floor)
    }
}

/// Per-iteration diagnostics, one row per outer iteration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iter: u64,
    /// Negated dual objective after this iteration's reward update:
    /// non-decreasing on a monotone run.
    pub dual_value: f64,
    /// Reverse KL of the new iterate's exact occupancy against the expert.
    pub reverse_kl: f64,
    pub eta: f64,
    pub epsilon_tr: f64,
    /// Occupancy-weighted KL of the new policy against the previous one.
    pub expected_kl: f64,
    /// `<(r - beta D)/beta, grad>` — matches `alignment_rhs` exactly when
    /// the ratio estimate is exact.
    pub alignment_lhs: f64,
    /// Symmetric KL between the iterate occupancy and the tilted expert.
    pub alignment_rhs: f64,
    /// Sup-distance between the stepped policy and the soft-optimal policy
    /// of the corrected reward.
    pub theorem1_residual: f64,
    pub wall_ms: f64,
}

/// Everything a finished run reports.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunResult {
    pub records: Vec<IterationRecord>,
    pub final_reward: RewardTable,
    pub final_policy: TabularPolicy,
    /// Whether `reverse_kl` fell below `rkl_tol` before `max_iters`.
    pub converged: bool,
    /// Dual decreases beyond [`MONOTONE_SLACK`] (only countable on runs
    /// that do not flag them as errors).
    pub dual_violations: u64,
    /// Bellman sweeps across every inner solve of the run.
    pub total_inner_sweeps: u64,
    /// Occupancy cells clamped to the density floor across all exact
    /// ratio evaluations.
    pub floor_clamps: u64,
    /// Sup-deviation from its mean of `beta * log(rho_E / rho_pi) - r`
    /// over jointly supported cells at the final iterate; near zero once
    /// the reward sits on the fixed point.
    pub reward_validity: f64,
}

/// Train / retrain / transfer triple from the frozen-reward protocol.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TransferOutcome {
    pub train: RunResult,
    pub retrain: RunResult,
    pub transfer: RunResult,
}

#[derive(Clone, Copy)]
enum StepRule {
    TrustRegion,
    Scheduled,
    FullConverged,
    Truncated(u64),
}

#[derive(Clone, Copy)]
enum RewardRule {
    Buffer { set_eta: bool },
    Direct(DirectKind),
    Plain,
}

#[derive(Clone, Copy)]
enum DirectKind {
    ScaledLogits,
    LogSigmoid,
}

#[derive(Clone, Copy)]
struct LoopPlan {
    step: StepRule,
    reward: RewardRule,
    flag_monotone: bool,
    retrospective: bool,
}

/// The corrected-update loop under the configured variant.
pub fn run_trirl(mdp: &TabularMdp, rho_e: &Occupancy, cfg: &ExperimentConfig) -> Result<RunResult> {
    let retrospective = cfg.variant == Variant::RetrospectiveEta;
    let plan = LoopPlan {
        step: match cfg.variant {
            Variant::MaxEta => StepRule::TrustRegion,
            Variant::TrLoss | Variant::RetrospectiveEta => StepRule::Scheduled,
        },
        reward: RewardRule::Buffer { set_eta: true },
        // Hindsight re-folding revises the reward history earlier dual
        // values were computed against, so its decreases are reported,
        // not fatal.
        flag_monotone: cfg.mode == RunMode::Exact && !retrospective,
        retrospective,
    };
    run_loop(mdp, rho_e, cfg, plan)
}

/// Plain dual descent: full converged soft solve every iteration, full
/// `epsilon` reward step, no correction. The reference the corrected loop
/// must agree with at the saddle while spending far fewer sweeps.
pub fn run_mce_irl(
    mdp: &TabularMdp,
    rho_e: &Occupancy,
    cfg: &ExperimentConfig,
) -> Result<RunResult> {
    let plan = LoopPlan {
        step: StepRule::FullConverged,
        reward: RewardRule::Plain,
        flag_monotone: cfg.mode == RunMode::Exact,
        retrospective: false,
    };
    run_loop(mdp, rho_e, cfg, plan)
}

/// [`run_trirl`] pinned to the scheduled-penalty variant regardless of what
/// the config says.
pub fn run_tr_loss_variant(
    mdp: &TabularMdp,
    rho_e: &Occupancy,
    cfg: &ExperimentConfig,
) -> Result<RunResult> {
    let cfg = ExperimentConfig {
        variant: Variant::TrLoss,
        ..cfg.clone()
    };
    run_trirl(mdp, rho_e, &cfg)
}

/// One of the deliberately broken baselines. Dual decreases are counted,
/// never flagged: exhibiting them is the point.
pub fn run_ablation(
    mdp: &TabularMdp,
    rho_e: &Occupancy,
    cfg: &ExperimentConfig,
    which: AblationKind,
) -> Result<RunResult> {
    let plan = match which {
        AblationKind::UncorrectedBuffer => LoopPlan {
            step: StepRule::TrustRegion,
            reward: RewardRule::Buffer { set_eta: false },
            flag_monotone: false,
            retrospective: false,
        },
        AblationKind::NoBufferLocal => LoopPlan {
            step: StepRule::TrustRegion,
            reward: RewardRule::Direct(DirectKind::ScaledLogits),
            flag_monotone: false,
            retrospective: false,
        },
        AblationKind::GailLike => LoopPlan {
            step: StepRule::Truncated(GAIL_LOCAL_SWEEPS),
            reward: RewardRule::Direct(DirectKind::LogSigmoid),
            flag_monotone: false,
            retrospective: false,
        },
    };
    run_loop(mdp, rho_e, cfg, plan)
}

/// Frozen-reward protocol: train on `mdp_train`, then re-solve the frozen
/// final reward from scratch on the training MDP (retrain) and on
/// `mdp_transfer` (transfer). The transfer reverse KL is measured against
/// `rho_e_transfer` when given, otherwise against the training expert.
pub fn run_transfer(
    mdp_train: &TabularMdp,
    mdp_transfer: &TabularMdp,
    rho_e: &Occupancy,
    rho_e_transfer: Option<&Occupancy>,
    cfg: &ExperimentConfig,
) -> Result<TransferOutcome> {
    let train = run_trirl(mdp_train, rho_e, cfg)?;
    let retrain = evaluate_frozen(mdp_train, &train.final_reward, rho_e, cfg)?;
    let transfer = evaluate_frozen(
        mdp_transfer,
        &train.final_reward,
        rho_e_transfer.unwrap_or(rho_e),
        cfg,
    )?;
    Ok(TransferOutcome {
        train,
        retrain,
        transfer,
    })
}

/// Fraction of masked states whose greedy actions agree.
pub fn greedy_agreement(a: &TabularPolicy, b: &TabularPolicy, mask: &[bool]) -> Result<f64> {
    if a.probs.dim() != b.probs.dim() || mask.len() != a.n_states() {
        return Err(TrirlError::ShapeMismatch(format!(
            "policies {:?} / {:?} with mask of {}",
            a.probs.dim(),
            b.probs.dim(),
            mask.len()
        )));
    }
    let ga = a.greedy_actions();
    let gb = b.greedy_actions();
    let mut total = 0usize;
    let mut agree = 0usize;
    for s in 0..mask.len() {
        if mask[s] {
            total += 1;
            if ga[s] == gb[s] {
                agree += 1;
            }
        }
    }
    if total == 0 {
        return Ok(1.0);
    }
    Ok(agree as f64 / total as f64)
}

/// Walk the greedy policy through most-likely successors from `start`;
/// true when a goal state is reached within `max_steps` moves. Ties break
/// toward the lowest index on both the action and the successor.
pub fn greedy_path_reaches(
    mdp: &TabularMdp,
    policy: &TabularPolicy,
    start: usize,
    goals: &[usize],
    max_steps: usize,
) -> Result<bool> {
    if policy.n_states() != mdp.n_states || policy.n_actions() != mdp.n_actions {
        return Err(TrirlError::ShapeMismatch(format!(
            "policy is {}x{}, MDP wants {}x{}",
            policy.n_states(),
            policy.n_actions(),
            mdp.n_states,
            mdp.n_actions
        )));
    }
    if start >= mdp.n_states || goals.iter().any(|g| *g >= mdp.n_states) {
        return Err(TrirlError::InvalidArgument(
            "start or goal index outside the MDP".into(),
        ));
    }
    let greedy = policy.greedy_actions();
    let mut s = start;
    for _ in 0..=max_steps {
        if goals.contains(&s) {
            return Ok(true);
        }
        let row = mdp.transition.index_axis(ndarray::Axis(0), s);
        let row = row.row(greedy[s]);
        let mut best = 0usize;
        let mut best_p = f64::NEG_INFINITY;
        for (s2, p) in row.iter().enumerate() {
            if *p > best_p {
                best_p = *p;
                best = s2;
            }
        }
        s = best;
    }
    Ok(false)
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn mix_seed(seed: u64, salt: u64) -> u64 {
    splitmix64(seed ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

fn check_shapes(mdp: &TabularMdp, rho_e: &Occupancy) -> Result<()> {
    if rho_e.rho.dim() != (mdp.n_states, mdp.n_actions) {
        return Err(TrirlError::ShapeMismatch(format!(
            "expert occupancy is {:?}, MDP wants ({}, {})",
            rho_e.rho.dim(),
            mdp.n_states,
            mdp.n_actions
        )));
    }
    Ok(())
}

/// Sup-deviation from its mean of `beta * log(rho_E / rho_pi) - r` over the
/// cells both occupancies actually support.
fn reward_validity(
    mdp: &TabularMdp,
    policy: &TabularPolicy,
    reward: &RewardTable,
    rho_e: &Occupancy,
    beta: f64,
    floor: f64,
) -> Result<f64> {
    let occ = compute_occupancy(mdp, policy)?;
    let ratio = log_density_ratio_exact(rho_e, &occ, floor)?;
    let mut vals = Vec::new();
    for (idx, d) in ratio.indexed_iter() {
        if rho_e.rho[idx] > floor && occ.rho[idx] > floor {
            vals.push(beta * d - reward.table[idx]);
        }
    }
    if vals.is_empty() {
        return Ok(0.0);
    }
    let mean = vals.iter().sum::<f64>() / vals.len() as f64;
    Ok(vals.iter().map(|v| (v - mean).abs()).fold(0.0, f64::max))
}

fn run_loop(
    mdp: &TabularMdp,
    rho_e: &Occupancy,
    cfg: &ExperimentConfig,
    plan: LoopPlan,
) -> Result<RunResult> {
    cfg.validate()?;
    check_shapes(mdp, rho_e)?;
    let (n_s, n_a) = (mdp.n_states, mdp.n_actions);
    let kl_tol = cfg.kl_tol_frac * cfg.zeta;

    let mut policy = TabularPolicy::uniform(n_s, n_a);
    let mut reward = RewardTable::zeros(n_s, n_a);
    let mut occ = compute_occupancy(mdp, &policy)?;
    let mut buf = match plan.reward {
        RewardRule::Buffer { .. } => Some(DiscBuffer::new(
            cfg.buffer_k,
            reward.clone(),
            cfg.epsilon,
            cfg.beta,
            cfg.zeta,
            mix_seed(cfg.seed, 1),
        )?),
        _ => None,
    };
    let mut tr = TrustRegionSolver::new(cfg.vi_tol);
    let mut warm_step: Option<Array1<f64>> = None;
    // Soft value of the zero reward, in closed form: the exact warm start
    // for iteration 0's corrected solve.
    let mut prev_corr_v = Array1::from_elem(n_s, (n_a as f64).ln() / (1.0 - mdp.gamma));

    let expert_trajs = match cfg.mode {
        RunMode::Sampled => {
            let expert_policy = policy_from_occupancy(rho_e);
            Some(sample_trajectories(
                mdp,
                &expert_policy,
                cfg.episodes,
                cfg.horizon,
                mix_seed(cfg.seed, 0),
            )?)
        }
        RunMode::Exact => None,
    };

    let mut records: Vec<IterationRecord> = Vec::new();
    let mut dual_violations = 0u64;
    let mut total_inner_sweeps = 0u64;
    let mut floor_clamps = 0u64;
    let mut converged = false;

    for iter in 0..cfg.max_iters {
        let t0 = Instant::now();

        // Density-ratio estimate at the current iterate.
        let (provider, batch) = match cfg.mode {
            RunMode::Exact => {
                floor_clamps +=
                    (floor_hits(rho_e, cfg.floor) + floor_hits(&occ, cfg.floor)) as u64;
                let logits = log_density_ratio_exact(rho_e, &occ, cfg.floor)?;
                (RatioProvider::exact(logits)?, None)
            }
            RunMode::Sampled => {
                let agent = sample_trajectories(
                    mdp,
                    &policy,
                    cfg.episodes,
                    cfg.horizon,
                    mix_seed(mix_seed(cfg.seed, 2), iter as u64),
                )?;
                let provider = train_logistic_discriminator(
                    expert_trajs.as_ref().expect("sampled mode has expert rollouts"),
                    &agent,
                    n_s,
                    n_a,
                    cfg.disc_steps,
                    cfg.disc_lr,
                )?;
                let batch = visited_states(&agent);
                (provider, Some(batch))
            }
        };

        // Alignment diagnostics at the pre-update pair (r_i, pi_i).
        let tilted = rho_hat(&reward, rho_e, cfg.beta)?;
        let grad = &occ.rho - &tilted.rho;
        let delta = &reward.table - &provider.logits.mapv(|d| cfg.beta * d);
        let (alignment_lhs, alignment_rhs) =
            alignment_check(&delta, &grad, &occ, &tilted, cfg.beta)?;

        // Target reward for the policy step.
        let r_tilde = match plan.reward {
            RewardRule::Buffer { .. } => {
                let pushed = buffer_push(
                    buf.take().expect("buffer plans carry a buffer"),
                    provider.clone(),
                    0.0,
                    policy.clone(),
                    cfg.fit_noise,
                )?;
                let target = buffer_intermediate_reward(&pushed)?;
                buf = Some(pushed);
                target
            }
            RewardRule::Direct(DirectKind::ScaledLogits) => {
                RewardTable::new(provider.logits.mapv(|d| cfg.beta * d))?
            }
            RewardRule::Direct(DirectKind::LogSigmoid) => {
                RewardTable::new(provider.logits.mapv(log_sigmoid))?
            }
            RewardRule::Plain => reward_update(&reward, &provider.logits, cfg.epsilon, cfg.beta)?,
        };

        // Policy step.
        let (new_policy, eta, expected_kl, mce_sol) = match plan.step {
            StepRule::TrustRegion => {
                let res = tr.solve(mdp, &r_tilde.table, &policy, cfg.zeta, kl_tol)?;
                total_inner_sweeps += res.inner_sweeps;
                (res.policy, res.eta, res.expected_kl, None)
            }
            StepRule::Scheduled => {
                let eta_i = cfg.scheduled_eta(iter);
                let r_eta = lemma1_transform(&r_tilde.table, &policy, eta_i)?;
                let sol = soft_value_iteration_from(mdp, &r_eta, cfg.vi_tol, warm_step.as_ref())?;
                total_inner_sweeps += sol.iterations;
                let kl = expected_policy_kl(mdp, &sol.policy, &policy)?;
                warm_step = Some(sol.v.clone());
                (sol.policy, eta_i, kl, None)
            }
            StepRule::FullConverged => {
                let sol = soft_value_iteration(mdp, &r_tilde.table, cfg.vi_tol)?;
                total_inner_sweeps += sol.iterations;
                let kl = expected_policy_kl(mdp, &sol.policy, &policy)?;
                (sol.policy.clone(), 0.0, kl, Some(sol))
            }
            StepRule::Truncated(n) => {
                let sol = soft_backup_sweeps(mdp, &r_tilde.table, warm_step.as_ref(), n)?;
                total_inner_sweeps += sol.iterations;
                let kl = expected_policy_kl(mdp, &sol.policy, &policy)?;
                warm_step = Some(sol.v.clone());
                (sol.policy, 0.0, kl, None)
            }
        };

        // Step-size-corrected reward.
        let (r_next, epsilon_tr) = match plan.reward {
            RewardRule::Buffer { set_eta } => {
                let mut pending = buf.take().expect("buffer plans carry a buffer");
                if set_eta {
                    pending = buffer_set_newest_eta(pending, eta)?;
                }
                if plan.retrospective {
                    let all_states: Vec<usize>;
                    let states: &[usize] = match &batch {
                        Some(visited) => visited,
                        None => {
                            all_states = (0..n_s).collect();
                            &all_states
                        }
                    };
                    pending = recompute_etas_retrospective(pending, mdp, states)?;
                }
                let corrected = buffer_corrected_reward(&pending)?;
                buf = Some(pending);
                let step = if set_eta {
                    cfg.epsilon / (1.0 + eta)
                } else {
                    cfg.epsilon
                };
                (corrected, step)
            }
            RewardRule::Direct(_) | RewardRule::Plain => (r_tilde, cfg.epsilon),
        };

        // Converged solve of the corrected reward: dual value plus the
        // policy/reward correspondence residual. The warm start shifts the
        // step solve's values by the potential the correction re-shapes in.
        let (sol_corr, theorem1_residual): (SoftSolution, f64) = match mce_sol {
            Some(sol) => (sol, 0.0),
            None => {
                let shaped = match (plan.step, warm_step.as_ref()) {
                    (StepRule::Scheduled, Some(vs)) => vs + &(&prev_corr_v * (eta / (1.0 + eta))),
                    _ => prev_corr_v.clone(),
                };
                let sol = soft_value_iteration_from(mdp, &r_next.table, cfg.vi_tol, Some(&shaped))?;
                total_inner_sweeps += sol.iterations;
                let residual = new_policy.sup_distance(&sol.policy);
                (sol, residual)
            }
        };
        let dual_value = -dual_value_from_solution(mdp, &sol_corr, &r_next, rho_e, cfg.beta)?;

        let occ_new = compute_occupancy(mdp, &new_policy)?;
        let rkl = reverse_kl(&occ_new, rho_e, cfg.floor);

        records.push(IterationRecord {
            iter: iter as u64,
            dual_value,
            reverse_kl: rkl,
            eta,
            epsilon_tr,
            expected_kl,
            alignment_lhs,
            alignment_rhs,
            theorem1_residual,
            wall_ms: t0.elapsed().as_secs_f64() * 1e3,
        });
        if records.len() >= 2 {
            let drop = records[records.len() - 2].dual_value - dual_value;
            if drop > MONOTONE_SLACK {
                dual_violations += 1;
                if plan.flag_monotone {
                    return Err(TrirlError::MonotonicityViolation { iter, delta: drop });
                }
            }
        }

        policy = new_policy;
        reward = r_next;
        occ = occ_new;
        prev_corr_v = sol_corr.v;
        if rkl < cfg.rkl_tol {
            converged = true;
            break;
        }
    }

    let validity = reward_validity(mdp, &policy, &reward, rho_e, cfg.beta, cfg.floor)?;
    Ok(RunResult {
        records,
        final_reward: reward,
        final_policy: policy,
        converged,
        dual_violations,
        total_inner_sweeps,
        floor_clamps,
        reward_validity: validity,
    })
}

/// Re-solve a frozen reward from scratch on `mdp` and report it as a
/// single-record run.
fn evaluate_frozen(
    mdp: &TabularMdp,
    reward: &RewardTable,
    rho_e: &Occupancy,
    cfg: &ExperimentConfig,
) -> Result<RunResult> {
    cfg.validate()?;
    check_shapes(mdp, rho_e)?;
    if reward.table.dim() != (mdp.n_states, mdp.n_actions) {
        return Err(TrirlError::ShapeMismatch(format!(
            "frozen reward is {:?}, MDP wants ({}, {})",
            reward.table.dim(),
            mdp.n_states,
            mdp.n_actions
        )));
    }
    let t0 = Instant::now();
    let sol = soft_value_iteration(mdp, &reward.table, cfg.vi_tol)?;
    let occ = compute_occupancy(mdp, &sol.policy)?;
    let rkl = reverse_kl(&occ, rho_e, cfg.floor);
    let tilted = rho_hat(reward, rho_e, cfg.beta)?;
    let grad = &occ.rho - &tilted.rho;
    let ratio = log_density_ratio_exact(rho_e, &occ, cfg.floor)?;
    let delta = &reward.table - &ratio.mapv(|d| cfg.beta * d);
    let (alignment_lhs, alignment_rhs) = alignment_check(&delta, &grad, &occ, &tilted, cfg.beta)?;
    let dual_value = -dual_value_from_solution(mdp, &sol, reward, rho_e, cfg.beta)?;
    let validity = reward_validity(mdp, &sol.policy, reward, rho_e, cfg.beta, cfg.floor)?;
    let record = IterationRecord {
        iter: 0,
        dual_value,
        reverse_kl: rkl,
        eta: 0.0,
        epsilon_tr: 0.0,
        expected_kl: 0.0,
        alignment_lhs,
        alignment_rhs,
        theorem1_residual: 0.0,
        wall_ms: t0.elapsed().as_secs_f64() * 1e3,
    };
    Ok(RunResult {
        records: vec![record],
        final_reward: reward.clone(),
        final_policy: sol.policy,
        converged: true,
        dual_violations: 0,
        total_inner_sweeps: sol.iterations,
        floor_clamps: 0,
        reward_validity: validity,
    })
}
