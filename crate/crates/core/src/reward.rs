//! Function-space reward updates and the entropy-regularized dual.
//!
//! The reward step mixes the current table toward a scaled log-density-ratio
//! target,
//!
//! ```text
//! r' = (1 - eps) r + eps * beta * D,        D ~ log(rho_E / rho_pi),
//! ```
//!
//! and the trust-region-corrected step uses `eps_tr = eps / (1 + eta)` in
//! place of `eps`. Progress is measured on the dual
//!
//! ```text
//! G(r) = (1 - gamma) E_{mu0}[V_soft(r)] + beta * lse_{s,a}(log rho_E - r/beta),
//! ```
//!
//! whose gradient in the tabular (one-hot feature) case is the difference of
//! two distributions over state-action pairs,
//!
//! ```text
//! grad G = rho_{pi_r} - rho_hat,    rho_hat ∝ exp(log rho_E - r/beta).
//! ```
//!
//! Both terms have unit mass, so the gradient sums to zero and the update
//! direction `delta = r - beta D` satisfies the alignment identity
//! `<delta/beta, grad G> = KL(rho_pi || rho_hat) + KL(rho_hat || rho_pi)`
//! exactly: `delta/beta = log rho_pi - log rho_hat - log Z`, and the `log Z`
//! offset is annihilated because the gradient sums to zero. G is convex in
//! `r` (the value term is a softmax of affine functions; the second term is
//! a log-sum-exp of affine functions), so stepping against `delta` descends
//! G toward the saddle, its minimum.

use crate::error::{Result, TrirlError};
use crate::mdp::{compute_occupancy, Occupancy, TabularMdp};
use crate::numerics::logsumexp;
use crate::solver::{soft_value_iteration, SoftSolution, DEFAULT_VI_TOL};
use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

/// A state-action reward table; all entries finite.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardTable {
    pub table: Array2<f64>,
}

impl RewardTable {
    pub fn new(table: Array2<f64>) -> Result<Self> {
        if table.iter().any(|v| !v.is_finite()) {
            return Err(TrirlError::InvalidArgument(
                "reward table holds non-finite entries".into(),
            ));
        }
        Ok(Self { table })
    }

    pub fn zeros(n_states: usize, n_actions: usize) -> Self {
        Self {
            table: Array2::zeros((n_states, n_actions)),
        }
    }
}

/// One reward update: the direction `delta = r - beta * D`, the nominal step
/// `epsilon`, and the realized trust-region-corrected step `epsilon_tr`.
#[derive(Debug, Clone)]
pub struct UpdateStep {
    pub epsilon: f64,
    pub epsilon_tr: f64,
    pub beta: f64,
    pub delta: Array2<f64>,
}

impl UpdateStep {
    pub fn new(epsilon: f64, epsilon_tr: f64, beta: f64, delta: Array2<f64>) -> Result<Self> {
        if !(epsilon > 0.0 && epsilon <= 1.0) {
            return Err(TrirlError::InvalidArgument(format!(
                "epsilon must lie in (0, 1], got {epsilon}"
            )));
        }
        if !(epsilon_tr > 0.0 && epsilon_tr <= epsilon) {
            return Err(TrirlError::InvalidArgument(format!(
                "epsilon_tr must lie in (0, epsilon], got {epsilon_tr}"
            )));
        }
        if !(beta > 0.0) || !beta.is_finite() {
            return Err(TrirlError::InvalidArgument(format!(
                "beta must be positive and finite, got {beta}"
            )));
        }
        if delta.iter().any(|v| !v.is_finite()) {
            return Err(TrirlError::InvalidArgument(
                "update direction holds non-finite entries".into(),
            ));
        }
        Ok(Self {
            epsilon,
            epsilon_tr,
            beta,
            delta,
        })
    }
}

/// Elementwise `log(max(rho_e, floor) / max(rho_pi, floor))`.
pub fn log_density_ratio_exact(
    rho_e: &Occupancy,
    rho_pi: &Occupancy,
    floor: f64,
) -> Result<Array2<f64>> {
    if !(floor > 0.0) {
        return Err(TrirlError::InvalidArgument(format!(
            "density floor must be positive, got {floor}"
        )));
    }
    if rho_e.rho.dim() != rho_pi.rho.dim() {
        return Err(TrirlError::ShapeMismatch(format!(
            "expert occupancy {:?} vs policy occupancy {:?}",
            rho_e.rho.dim(),
            rho_pi.rho.dim()
        )));
    }
    let mut out = Array2::zeros(rho_e.rho.dim());
    for (idx, v) in out.indexed_iter_mut() {
        *v = (rho_e.rho[idx].max(floor) / rho_pi.rho[idx].max(floor)).ln();
    }
    Ok(out)
}

/// Number of cells an occupancy table has below the density floor.
pub fn floor_hits(occ: &Occupancy, floor: f64) -> usize {
    occ.rho.iter().filter(|v| **v < floor).count()
}

/// `(1 - epsilon) * r + epsilon * beta * logratio` elementwise.
pub fn reward_update(
    r: &RewardTable,
    logratio: &Array2<f64>,
    epsilon: f64,
    beta: f64,
) -> Result<RewardTable> {
    if !(epsilon > 0.0 && epsilon <= 1.0) {
        return Err(TrirlError::InvalidArgument(format!(
            "epsilon must lie in (0, 1], got {epsilon}"
        )));
    }
    if !(beta > 0.0) || !beta.is_finite() {
        return Err(TrirlError::InvalidArgument(format!(
            "beta must be positive and finite, got {beta}"
        )));
    }
    if r.table.dim() != logratio.dim() {
        return Err(TrirlError::ShapeMismatch(format!(
            "reward {:?} vs log-ratio {:?}",
            r.table.dim(),
            logratio.dim()
        )));
    }
    let mut table = Array2::zeros(r.table.dim());
    for (idx, v) in table.indexed_iter_mut() {
        *v = (1.0 - epsilon) * r.table[idx] + epsilon * beta * logratio[idx];
    }
    RewardTable::new(table)
}

/// Trust-region-corrected reward step: applies [`reward_update`] at the
/// realized step size `eps_tr = epsilon / (1 + eta)` and returns it alongside.
pub fn correct_reward(
    r_prev: &RewardTable,
    logratio: &Array2<f64>,
    epsilon: f64,
    eta: f64,
    beta: f64,
) -> Result<(RewardTable, f64)> {
    if !(eta >= 0.0) || !eta.is_finite() {
        return Err(TrirlError::InvalidArgument(format!(
            "multiplier must be finite and non-negative, got {eta}"
        )));
    }
    let epsilon_tr = epsilon / (1.0 + eta);
    let updated = reward_update(r_prev, logratio, epsilon_tr, beta)?;
    Ok((updated, epsilon_tr))
}

/// The tilted expert distribution `rho_hat ∝ exp(log rho_E - r / beta)`,
/// normalized over all state-action pairs. Cells where the expert has
/// exactly zero mass stay exactly zero.
pub fn rho_hat(r: &RewardTable, rho_e: &Occupancy, beta: f64) -> Result<Occupancy> {
    if !(beta > 0.0) || !beta.is_finite() {
        return Err(TrirlError::InvalidArgument(format!(
            "beta must be positive and finite, got {beta}"
        )));
    }
    if r.table.dim() != rho_e.rho.dim() {
        return Err(TrirlError::ShapeMismatch(format!(
            "reward {:?} vs expert occupancy {:?}",
            r.table.dim(),
            rho_e.rho.dim()
        )));
    }
    let logits: Array1<f64> = rho_e
        .rho
        .iter()
        .zip(r.table.iter())
        .map(|(rho, rv)| rho.ln() - rv / beta)
        .collect();
    let z = logsumexp(logits.view());
    let mut rho = Array2::zeros(r.table.dim());
    let mut total = 0.0;
    for (flat, (_, v)) in rho.indexed_iter_mut().enumerate() {
        *v = (logits[flat] - z).exp();
        total += *v;
    }
    rho.mapv_inplace(|v| v / total);
    Occupancy::new(rho)
}

/// Dual value at the solver's default Bellman tolerance.
pub fn dual_objective(
    mdp: &TabularMdp,
    r: &RewardTable,
    rho_e: &Occupancy,
    beta: f64,
) -> Result<f64> {
    dual_objective_with_tol(mdp, r, rho_e, beta, DEFAULT_VI_TOL)
}

/// Dual value with an explicit Bellman tolerance (tight tolerances matter
/// when differencing the dual numerically).
pub fn dual_objective_with_tol(
    mdp: &TabularMdp,
    r: &RewardTable,
    rho_e: &Occupancy,
    beta: f64,
    tol: f64,
) -> Result<f64> {
    let sol = soft_value_iteration(mdp, &r.table, tol)?;
    dual_value_from_solution(mdp, &sol, r, rho_e, beta)
}

/// Dual value from an already-computed soft solution for the same reward.
pub fn dual_value_from_solution(
    mdp: &TabularMdp,
    sol: &SoftSolution,
    r: &RewardTable,
    rho_e: &Occupancy,
    beta: f64,
) -> Result<f64> {
    if !(beta > 0.0) || !beta.is_finite() {
        return Err(TrirlError::InvalidArgument(format!(
            "beta must be positive and finite, got {beta}"
        )));
    }
    let mut ev = 0.0;
    for s in 0..mdp.n_states {
        ev += mdp.initial_dist[s] * sol.v[s];
    }
    let logits: Array1<f64> = rho_e
        .rho
        .iter()
        .zip(r.table.iter())
        .map(|(rho, rv)| rho.ln() - rv / beta)
        .collect();
    Ok((1.0 - mdp.gamma) * ev + beta * logsumexp(logits.view()))
}

/// Gradient of the dual at the solver's default Bellman tolerance.
pub fn dual_gradient(
    mdp: &TabularMdp,
    r: &RewardTable,
    rho_e: &Occupancy,
    beta: f64,
) -> Result<Array2<f64>> {
    dual_gradient_with_tol(mdp, r, rho_e, beta, DEFAULT_VI_TOL)
}

/// Gradient of the dual: `rho_{pi_r} - rho_hat`, the occupancy of the
/// soft-optimal policy for `r` minus the tilted expert distribution.
pub fn dual_gradient_with_tol(
    mdp: &TabularMdp,
    r: &RewardTable,
    rho_e: &Occupancy,
    beta: f64,
    tol: f64,
) -> Result<Array2<f64>> {
    let sol = soft_value_iteration(mdp, &r.table, tol)?;
    let occ = compute_occupancy(mdp, &sol.policy)?;
    let tilted = rho_hat(r, rho_e, beta)?;
    Ok(&occ.rho - &tilted.rho)
}

/// KL divergence between two mass-1 tables with the conventions
/// `0 log(0/q) = 0` and `p log(p/0) = +inf` for `p > 0`.
fn kl_tables(p: &Array2<f64>, q: &Array2<f64>) -> f64 {
    let mut kl = 0.0;
    for (pv, qv) in p.iter().zip(q.iter()) {
        if *pv == 0.0 {
            continue;
        }
        if *qv == 0.0 {
            return f64::INFINITY;
        }
        kl += pv * (pv / qv).ln();
    }
    kl
}

/// Both sides of the alignment identity: the inner product
/// `<delta/beta, grad>` and the symmetric KL `KL(rho_pi||rho_hat) +
/// KL(rho_hat||rho_pi)`. The two agree exactly when `delta = r - beta * D`
/// is built from the same occupancies.
pub fn alignment_check(
    delta: &Array2<f64>,
    grad: &Array2<f64>,
    rho_pi: &Occupancy,
    rho_hat: &Occupancy,
    beta: f64,
) -> Result<(f64, f64)> {
    if !(beta > 0.0) || !beta.is_finite() {
        return Err(TrirlError::InvalidArgument(format!(
            "beta must be positive and finite, got {beta}"
        )));
    }
    if delta.dim() != grad.dim() || rho_pi.rho.dim() != delta.dim() {
        return Err(TrirlError::ShapeMismatch(
            "alignment inputs must share one shape".into(),
        ));
    }
    let mut lhs = 0.0;
    for (dv, gv) in delta.iter().zip(grad.iter()) {
        lhs += dv / beta * gv;
    }
    let rhs = kl_tables(&rho_pi.rho, &rho_hat.rho) + kl_tables(&rho_hat.rho, &rho_pi.rho);
    Ok((lhs, rhs))
}

/// `sum rho_pi log(rho_pi / rho_e)` with both tables clamped to the floor.
pub fn reverse_kl(rho_pi: &Occupancy, rho_e: &Occupancy, floor: f64) -> f64 {
    let mut kl = 0.0;
    for (pv, ev) in rho_pi.rho.iter().zip(rho_e.rho.iter()) {
        let p = pv.max(floor);
        kl += p * (p / ev.max(floor)).ln();
    }
    kl
}
