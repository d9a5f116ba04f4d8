//! Tabular MDPs, policies, and discounted occupancy measures.
//!
//! State-action visitation is kept `(1 - gamma)`-normalized throughout: a
//! policy's occupancy sums to one, so occupancies compare directly against
//! probability tables. The state marginal `d` is pinned by the flow identity
//!
//! ```text
//! d = (1 - gamma) * mu0 + gamma * P_pi^T d
//! ```
//!
//! and splits over actions as `rho(s, a) = pi(a|s) * d(s)`.

mod gridworld;

pub use gridworld::{build_gridworld, goal_reward_table, GridworldSpec};

use crate::error::{Result, TrirlError};
use ndarray::{Array1, Array2, Array3, Axis};
use serde::{Deserialize, Serialize};

/// Tolerance for probability rows and vectors summing to one.
pub const DIST_SUM_TOL: f64 = 1e-12;
/// Tolerance on the total mass of an occupancy table.
pub const OCC_SUM_TOL: f64 = 1e-10;
/// Residual target for the power-iteration fallback in [`compute_occupancy`].
const FLOW_RESIDUAL_TOL: f64 = 1e-12;
/// Past this many state-action pairs the occupancy solve switches from a
/// dense LU factorization to power iteration on the flow map.
const DENSE_SOLVE_LIMIT: usize = 10_000;

/// A finite MDP with dense transition kernel `transition[s][a][s']`.
#[derive(Debug, Clone)]
pub struct TabularMdp {
    pub n_states: usize,
    pub n_actions: usize,
    /// `transition[[s, a, s']]` = probability of landing in `s'` after
    /// taking `a` in `s`. Every `[s, a, :]` row is a distribution.
    pub transition: Array3<f64>,
    /// Start-state distribution `mu0`.
    pub initial_dist: Array1<f64>,
    /// Discount factor, `0 <= gamma < 1`.
    pub gamma: f64,
}

impl TabularMdp {
    pub fn new(transition: Array3<f64>, initial_dist: Array1<f64>, gamma: f64) -> Result<Self> {
        let (n_states, n_actions, n_to) = transition.dim();
        if n_states == 0 || n_actions == 0 {
            return Err(TrirlError::InvalidArgument(
                "MDP needs at least one state and one action".into(),
            ));
        }
        if n_to != n_states {
            return Err(TrirlError::ShapeMismatch(format!(
                "transition kernel maps {n_states} states onto {n_to}"
            )));
        }
        if !(0.0..1.0).contains(&gamma) {
            return Err(TrirlError::InvalidArgument(format!(
                "gamma must lie in [0, 1), got {gamma}"
            )));
        }
        for s in 0..n_states {
            for a in 0..n_actions {
                let row = transition.slice(ndarray::s![s, a, ..]);
                check_distribution(row.iter().copied(), DIST_SUM_TOL, || {
                    format!("transition row (s={s}, a={a})")
                })?;
            }
        }
        if initial_dist.len() != n_states {
            return Err(TrirlError::ShapeMismatch(format!(
                "initial distribution has {} entries for {n_states} states",
                initial_dist.len()
            )));
        }
        check_distribution(initial_dist.iter().copied(), DIST_SUM_TOL, || {
            "initial distribution".into()
        })?;
        Ok(Self {
            n_states,
            n_actions,
            transition,
            initial_dist,
            gamma,
        })
    }

    /// State-to-state kernel `P_pi(s, s') = sum_a pi(a|s) P(s'|s, a)`.
    pub fn policy_kernel(&self, policy: &TabularPolicy) -> Array2<f64> {
        let mut p = Array2::zeros((self.n_states, self.n_states));
        for s in 0..self.n_states {
            for a in 0..self.n_actions {
                let w = policy.probs[[s, a]];
                if w == 0.0 {
                    continue;
                }
                for s2 in 0..self.n_states {
                    p[[s, s2]] += w * self.transition[[s, a, s2]];
                }
            }
        }
        p
    }
}

/// A stochastic policy, one distribution over actions per state.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TabularPolicy {
    /// `probs[[s, a]] = pi(a|s)`; rows sum to one.
    pub probs: Array2<f64>,
}

impl TabularPolicy {
    pub fn new(probs: Array2<f64>) -> Result<Self> {
        let (n_states, _) = probs.dim();
        for s in 0..n_states {
            check_distribution(probs.row(s).iter().copied(), DIST_SUM_TOL, || {
                format!("policy row s={s}")
            })?;
        }
        Ok(Self { probs })
    }

    pub fn uniform(n_states: usize, n_actions: usize) -> Self {
        Self {
            probs: Array2::from_elem((n_states, n_actions), 1.0 / n_actions as f64),
        }
    }

    pub fn n_states(&self) -> usize {
        self.probs.nrows()
    }

    pub fn n_actions(&self) -> usize {
        self.probs.ncols()
    }

    /// Deterministic argmax action per state, ties broken toward the lowest
    /// action index.
    pub fn greedy_actions(&self) -> Vec<usize> {
        self.probs
            .rows()
            .into_iter()
            .map(|row| {
                let mut best = 0;
                let mut best_p = row[0];
                for (a, &p) in row.iter().enumerate().skip(1) {
                    if p > best_p {
                        best = a;
                        best_p = p;
                    }
                }
                best
            })
            .collect()
    }

    /// Largest absolute entry-wise difference to another policy.
    pub fn sup_distance(&self, other: &TabularPolicy) -> f64 {
        self.probs
            .iter()
            .zip(other.probs.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// A `(1 - gamma)`-normalized discounted state-action visitation measure.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Occupancy {
    /// `rho[[s, a]]`, non-negative, sums to one over the whole table.
    pub rho: Array2<f64>,
    /// Row sums of `rho`: the discounted state marginal.
    pub state_marginal: Array1<f64>,
}

impl Occupancy {
    pub fn new(rho: Array2<f64>) -> Result<Self> {
        if let Some(bad) = rho.iter().find(|v| **v < 0.0 || !v.is_finite()) {
            return Err(TrirlError::InvalidDistribution(format!(
                "occupancy entry {bad} is negative or non-finite"
            )));
        }
        let total: f64 = rho.sum();
        if (total - 1.0).abs() > OCC_SUM_TOL {
            return Err(TrirlError::InvalidDistribution(format!(
                "occupancy mass {total} is not 1 within {OCC_SUM_TOL:e}"
            )));
        }
        let state_marginal = rho.sum_axis(Axis(1));
        Ok(Self {
            rho,
            state_marginal,
        })
    }

    /// L1 distance between two occupancy tables.
    pub fn l1_to(&self, other: &Occupancy) -> f64 {
        self.rho
            .iter()
            .zip(other.rho.iter())
            .map(|(a, b)| (a - b).abs())
            .sum()
    }
}

/// Discounted occupancy of `policy` on `mdp`.
///
/// Solves `(I - gamma P_pi^T) d = (1 - gamma) mu0` with a dense LU
/// factorization, falling back to power iteration on the flow map (residual
/// `<= 1e-12`) when the table exceeds 10^4 state-action pairs. Sub-roundoff
/// negative entries from the factorization are clamped to zero.
pub fn compute_occupancy(mdp: &TabularMdp, policy: &TabularPolicy) -> Result<Occupancy> {
    check_policy_shape(mdp, policy)?;
    let p_pi = mdp.policy_kernel(policy);
    let n = mdp.n_states;
    let mut d = if n * mdp.n_actions <= DENSE_SOLVE_LIMIT {
        let mut a = nalgebra::DMatrix::<f64>::identity(n, n);
        for i in 0..n {
            for j in 0..n {
                a[(i, j)] -= mdp.gamma * p_pi[[j, i]];
            }
        }
        let b = nalgebra::DVector::from_iterator(
            n,
            mdp.initial_dist.iter().map(|&m| (1.0 - mdp.gamma) * m),
        );
        let sol = a.lu().solve(&b).ok_or_else(|| {
            TrirlError::InvalidDistribution("occupancy flow system is singular".into())
        })?;
        Array1::from_iter(sol.iter().copied())
    } else {
        power_iterate_flow(mdp, &p_pi)
    };
    for v in d.iter_mut() {
        if *v < 0.0 {
            if *v < -1e-9 {
                return Err(TrirlError::InvalidDistribution(format!(
                    "occupancy solve produced negative state mass {v}"
                )));
            }
            *v = 0.0;
        }
    }
    let mut rho = Array2::zeros((mdp.n_states, mdp.n_actions));
    for s in 0..mdp.n_states {
        for a in 0..mdp.n_actions {
            rho[[s, a]] = d[s] * policy.probs[[s, a]];
        }
    }
    Occupancy::new(rho)
}

fn power_iterate_flow(mdp: &TabularMdp, p_pi: &Array2<f64>) -> Array1<f64> {
    let n = mdp.n_states;
    let base: Array1<f64> = mdp.initial_dist.mapv(|m| (1.0 - mdp.gamma) * m);
    let mut d = base.clone();
    loop {
        let mut next = base.clone();
        for s in 0..n {
            let ds = d[s];
            if ds == 0.0 {
                continue;
            }
            for s2 in 0..n {
                next[s2] += mdp.gamma * ds * p_pi[[s, s2]];
            }
        }
        let residual = next
            .iter()
            .zip(d.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        d = next;
        if residual <= FLOW_RESIDUAL_TOL {
            return d;
        }
    }
}

/// Recover the policy an occupancy table factors through (`pi(a|s) =
/// rho(s,a) / rho(s)`). States with zero marginal get uniform rows.
pub fn policy_from_occupancy(occ: &Occupancy) -> TabularPolicy {
    let (n_states, n_actions) = occ.rho.dim();
    let mut probs = Array2::zeros((n_states, n_actions));
    for s in 0..n_states {
        let m = occ.state_marginal[s];
        if m <= 0.0 {
            for a in 0..n_actions {
                probs[[s, a]] = 1.0 / n_actions as f64;
            }
        } else {
            for a in 0..n_actions {
                probs[[s, a]] = occ.rho[[s, a]] / m;
            }
        }
    }
    TabularPolicy { probs }
}

/// Occupancy-weighted KL divergence between two policies,
/// `sum_s rho_new(s) KL(pi_new(.|s) || pi_old(.|s))`, with the state weights
/// taken from `pi_new`'s own occupancy.
///
/// Returns `f64::INFINITY` when `pi_new` puts mass where `pi_old` has none.
pub fn expected_policy_kl(
    mdp: &TabularMdp,
    pi_new: &TabularPolicy,
    pi_old: &TabularPolicy,
) -> Result<f64> {
    check_policy_shape(mdp, pi_new)?;
    check_policy_shape(mdp, pi_old)?;
    let occ = compute_occupancy(mdp, pi_new)?;
    let mut total = 0.0;
    for s in 0..mdp.n_states {
        let w = occ.state_marginal[s];
        if w == 0.0 {
            continue;
        }
        for a in 0..mdp.n_actions {
            let p = pi_new.probs[[s, a]];
            if p == 0.0 {
                continue;
            }
            let q = pi_old.probs[[s, a]];
            if q == 0.0 {
                return Ok(f64::INFINITY);
            }
            total += w * p * (p / q).ln();
        }
    }
    Ok(total)
}

/// States reachable from the support of `mu0` along transitions of positive
/// probability under any action.
pub fn reachable_states(mdp: &TabularMdp) -> Vec<bool> {
    let mut seen = vec![false; mdp.n_states];
    let mut queue: Vec<usize> = (0..mdp.n_states)
        .filter(|&s| mdp.initial_dist[s] > 0.0)
        .collect();
    for &s in &queue {
        seen[s] = true;
    }
    while let Some(s) = queue.pop() {
        for a in 0..mdp.n_actions {
            for s2 in 0..mdp.n_states {
                if !seen[s2] && mdp.transition[[s, a, s2]] > 0.0 {
                    seen[s2] = true;
                    queue.push(s2);
                }
            }
        }
    }
    seen
}

fn check_policy_shape(mdp: &TabularMdp, policy: &TabularPolicy) -> Result<()> {
    if policy.probs.dim() != (mdp.n_states, mdp.n_actions) {
        return Err(TrirlError::ShapeMismatch(format!(
            "policy is {:?}, MDP wants ({}, {})",
            policy.probs.dim(),
            mdp.n_states,
            mdp.n_actions
        )));
    }
    Ok(())
}

fn check_distribution(
    values: impl Iterator<Item = f64>,
    tol: f64,
    what: impl Fn() -> String,
) -> Result<()> {
    let mut sum = 0.0;
    for v in values {
        if !(v >= 0.0) || !v.is_finite() {
            return Err(TrirlError::InvalidDistribution(format!(
                "{} holds negative or non-finite entry {v}",
                what()
            )));
        }
        sum += v;
    }
    if (sum - 1.0).abs() > tol {
        return Err(TrirlError::InvalidDistribution(format!(
            "{} sums to {sum}, expected 1 within {tol:e}",
            what()
        )));
    }
    Ok(())
}
