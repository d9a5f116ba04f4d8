//! Soft value iteration and the trust-region policy solver.
//!
//! The soft Bellman operator
//!
//! ```text
//! Q(s,a) = r(s,a) + gamma * E_{s'}[ V(s') ],    V(s) = log sum_a exp Q(s,a)
//! ```
//!
//! is a gamma-contraction in sup norm; its fixed point yields the
//! entropy-regularized optimal policy `pi(a|s) = exp(Q(s,a) - V(s))`.
//!
//! The trust-region solve looks for the smallest multiplier `eta >= 0` such
//! that the soft-optimal policy of the transformed reward
//!
//! ```text
//! r_eta = r / (1 + eta) + eta / (1 + eta) * log pi_prev
//! ```
//!
//! keeps its occupancy-weighted KL against `pi_prev` inside the bound
//! `zeta`. That policy maximizes `E[r] + H(pi) - eta * KL(pi, pi_prev)`
//! globally, so the multiplier search is a scalar bracketing-plus-bisection
//! problem: the KL is non-increasing in `eta`, reaches `kl(0)` at the
//! unconstrained optimum, and shrinks to zero as `eta -> inf` (the
//! soft-optimal policy of `log pi_prev` is `pi_prev` itself, with `V == 0`).

use crate::error::{Result, TrirlError};
use crate::mdp::{compute_occupancy, expected_policy_kl, TabularMdp, TabularPolicy};
use crate::numerics::logsumexp;
use ndarray::{Array1, Array2};

/// Hard cap on Bellman sweeps before reporting non-convergence.
pub const MAX_SWEEPS: u64 = 1_000_000;
/// Default sup-norm tolerance on the Bellman residual.
pub const DEFAULT_VI_TOL: f64 = 1e-10;
/// Multiplier values beyond this cap abort the bracket search.
pub const ETA_CAP: f64 = 1e12;

/// Fixed point of the soft Bellman operator together with its policy.
#[derive(Debug, Clone)]
pub struct SoftSolution {
    pub q: Array2<f64>,
    pub v: Array1<f64>,
    pub policy: TabularPolicy,
    /// Bellman sweeps performed.
    pub iterations: u64,
    /// Last sup-norm change in `v`; at most the requested tolerance.
    pub residual: f64,
}

/// Outcome of the trust-region policy solve.
#[derive(Debug, Clone)]
pub struct TrSolveResult {
    pub policy: TabularPolicy,
    /// Multiplier achieving the KL bound; 0 when the bound was slack.
    pub eta: f64,
    /// Occupancy-weighted KL of the returned policy against `pi_prev`.
    pub expected_kl: f64,
    /// Whether the constraint was binding (`eta > 0`).
    pub active: bool,
    /// Bellman sweeps spent across every candidate evaluation.
    pub inner_sweeps: u64,
}

/// Solve the soft Bellman fixed point to sup-norm tolerance `tol`.
pub fn soft_value_iteration(
    mdp: &TabularMdp,
    reward: &Array2<f64>,
    tol: f64,
) -> Result<SoftSolution> {
    soft_value_iteration_from(mdp, reward, tol, None)
}

/// Same as [`soft_value_iteration`] but warm-started from a previous value
/// function. The warm start only changes how many sweeps are needed; the
/// returned solution still satisfies the residual tolerance on its own.
pub fn soft_value_iteration_from(
    mdp: &TabularMdp,
    reward: &Array2<f64>,
    tol: f64,
    v_init: Option<&Array1<f64>>,
) -> Result<SoftSolution> {
    if !(tol > 0.0) {
        return Err(TrirlError::InvalidArgument(format!(
            "tolerance must be positive, got {tol}"
        )));
    }
    bellman_iterate(mdp, reward, v_init, StopRule::Residual(tol))
}

/// Run exactly `sweeps` soft Bellman backups from `v_init` (zeros when
/// absent) with no convergence test. The deliberately stale critic some
/// baselines use; the returned residual is just the last sup-norm change.
pub fn soft_backup_sweeps(
    mdp: &TabularMdp,
    reward: &Array2<f64>,
    v_init: Option<&Array1<f64>>,
    sweeps: u64,
) -> Result<SoftSolution> {
    if sweeps == 0 || sweeps > MAX_SWEEPS {
        return Err(TrirlError::InvalidArgument(format!(
            "sweep count must lie in 1..={MAX_SWEEPS}, got {sweeps}"
        )));
    }
    bellman_iterate(mdp, reward, v_init, StopRule::Sweeps(sweeps))
}

enum StopRule {
    Residual(f64),
    Sweeps(u64),
}

fn bellman_iterate(
    mdp: &TabularMdp,
    reward: &Array2<f64>,
    v_init: Option<&Array1<f64>>,
    stop: StopRule,
) -> Result<SoftSolution> {
    let (s_n, a_n) = (mdp.n_states, mdp.n_actions);
    if reward.dim() != (s_n, a_n) {
        return Err(TrirlError::ShapeMismatch(format!(
            "reward is {:?}, MDP wants ({s_n}, {a_n})",
            reward.dim()
        )));
    }
    if reward.iter().any(|v| !v.is_finite()) {
        return Err(TrirlError::InvalidArgument(
            "reward table holds non-finite entries".into(),
        ));
    }
    let flat = mdp
        .transition
        .view()
        .into_shape_with_order((s_n * a_n, s_n))
        .expect("dense kernel reshapes to (S*A, S)");
    let mut v: Array1<f64> = match v_init {
        Some(v0) if v0.len() == s_n => v0.clone(),
        _ => Array1::zeros(s_n),
    };
    let mut q = Array2::<f64>::zeros((s_n, a_n));
    let mut iterations = 0u64;
    let mut residual: f64;
    loop {
        let pv = flat.dot(&v);
        for s in 0..s_n {
            for a in 0..a_n {
                q[[s, a]] = reward[[s, a]] + mdp.gamma * pv[s * a_n + a];
            }
        }
        residual = 0.0;
        for s in 0..s_n {
            let vs = logsumexp(q.row(s));
            residual = residual.max((vs - v[s]).abs());
            v[s] = vs;
        }
        iterations += 1;
        match stop {
            StopRule::Residual(tol) => {
                if residual <= tol {
                    break;
                }
                if iterations >= MAX_SWEEPS {
                    return Err(TrirlError::NonConvergence {
                        iterations,
                        residual,
                    });
                }
            }
            StopRule::Sweeps(n) => {
                if iterations >= n {
                    break;
                }
            }
        }
    }
    let mut probs = Array2::<f64>::zeros((s_n, a_n));
    for s in 0..s_n {
        let mut row_sum = 0.0;
        for a in 0..a_n {
            let p = (q[[s, a]] - v[s]).exp();
            probs[[s, a]] = p;
            row_sum += p;
        }
        for a in 0..a_n {
            probs[[s, a]] /= row_sum;
        }
    }
    Ok(SoftSolution {
        q,
        v,
        policy: TabularPolicy { probs },
        iterations,
        residual,
    })
}

/// Blend a reward with the log-probabilities of the previous policy:
/// `r_eta = r / (1 + eta) + eta / (1 + eta) * log pi_prev`.
///
/// The soft-optimal policy of `r_eta` is the trust-region-constrained
/// soft-optimal policy of `r` at multiplier `eta`.
pub fn lemma1_transform(
    reward: &Array2<f64>,
    pi_prev: &TabularPolicy,
    eta: f64,
) -> Result<Array2<f64>> {
    if !(eta >= 0.0) || !eta.is_finite() {
        return Err(TrirlError::InvalidArgument(format!(
            "multiplier must be finite and non-negative, got {eta}"
        )));
    }
    if reward.dim() != pi_prev.probs.dim() {
        return Err(TrirlError::ShapeMismatch(format!(
            "reward {:?} vs policy {:?}",
            reward.dim(),
            pi_prev.probs.dim()
        )));
    }
    if pi_prev.probs.iter().any(|p| *p <= 0.0) {
        return Err(TrirlError::InvalidArgument(
            "previous policy must be strictly positive".into(),
        ));
    }
    let w = 1.0 / (1.0 + eta);
    let mut out = Array2::zeros(reward.dim());
    for (idx, v) in reward.indexed_iter() {
        out[idx] = w * v + (1.0 - w) * pi_prev.probs[idx].ln();
    }
    Ok(out)
}

/// Occupancy-weighted entropy `sum_s rho_pi(s) sum_a -pi(a|s) log pi(a|s)`.
pub fn entropy_of(mdp: &TabularMdp, policy: &TabularPolicy) -> Result<f64> {
    let occ = compute_occupancy(mdp, policy)?;
    let mut h = 0.0;
    for s in 0..mdp.n_states {
        let w = occ.state_marginal[s];
        if w == 0.0 {
            continue;
        }
        for a in 0..mdp.n_actions {
            let p = policy.probs[[s, a]];
            if p > 0.0 {
                h -= w * p * p.ln();
            }
        }
    }
    Ok(h)
}

/// Trust-region policy solve with fresh (cold) solver state.
///
/// Returns the smallest multiplier `eta >= 0` whose transformed-reward
/// soft-optimal policy satisfies the expected-KL bound: `eta = 0` when the
/// unconstrained policy already does, otherwise the `eta` at which the KL
/// meets `zeta` within `kl_tol`.
pub fn solve_trust_region(
    mdp: &TabularMdp,
    reward: &Array2<f64>,
    pi_prev: &TabularPolicy,
    zeta: f64,
    kl_tol: f64,
) -> Result<TrSolveResult> {
    TrustRegionSolver::new(DEFAULT_VI_TOL).solve(mdp, reward, pi_prev, zeta, kl_tol)
}

/// Reusable trust-region solver that keeps warm-start state between calls.
///
/// Candidate multipliers are evaluated at a loosened Bellman tolerance (the
/// KL only has to be located to `kl_tol` precision); the accepted multiplier
/// is re-polished at the full tolerance before returning. Warm starts carry
/// the last value functions across calls on a driver's solve sequence, which
/// keeps each candidate evaluation to a handful of sweeps once the outer
/// iteration settles.
#[derive(Debug, Default)]
pub struct TrustRegionSolver {
    vi_tol: f64,
    warm_unconstrained: Option<Array1<f64>>,
    warm_candidate: Option<Array1<f64>>,
    last_eta: Option<f64>,
}

impl TrustRegionSolver {
    pub fn new(vi_tol: f64) -> Self {
        Self {
            vi_tol,
            warm_unconstrained: None,
            warm_candidate: None,
            last_eta: None,
        }
    }

    pub fn solve(
        &mut self,
        mdp: &TabularMdp,
        reward: &Array2<f64>,
        pi_prev: &TabularPolicy,
        zeta: f64,
        kl_tol: f64,
    ) -> Result<TrSolveResult> {
        if !(zeta > 0.0) || !zeta.is_finite() {
            return Err(TrirlError::InvalidArgument(format!(
                "KL bound must be positive and finite, got {zeta}"
            )));
        }
        if !(kl_tol > 0.0) {
            return Err(TrirlError::InvalidArgument(format!(
                "kl_tol must be positive, got {kl_tol}"
            )));
        }
        if pi_prev.probs.iter().any(|p| *p <= 0.0) {
            return Err(TrirlError::InvalidArgument(
                "previous policy must be strictly positive".into(),
            ));
        }
        let loose = self.vi_tol.max(1e-7);
        let mut sweeps = 0u64;

        // Unconstrained fast path.
        let sol0 = soft_value_iteration_from(mdp, reward, loose, self.warm_unconstrained.as_ref())?;
        sweeps += sol0.iterations;
        self.warm_unconstrained = Some(sol0.v.clone());
        let kl0 = expected_policy_kl(mdp, &sol0.policy, pi_prev)?;
        if kl0 <= zeta {
            let sol = soft_value_iteration_from(mdp, reward, self.vi_tol, Some(&sol0.v))?;
            sweeps += sol.iterations;
            self.warm_unconstrained = Some(sol.v.clone());
            let kl = expected_policy_kl(mdp, &sol.policy, pi_prev)?;
            self.last_eta = Some(0.0);
            return Ok(TrSolveResult {
                policy: sol.policy,
                eta: 0.0,
                expected_kl: kl,
                active: false,
                inner_sweeps: sweeps,
            });
        }

        let mut eval = |eta: f64, tol: f64, warm: &mut Option<Array1<f64>>| -> Result<(SoftSolution, f64)> {
            let r_eta = lemma1_transform(reward, pi_prev, eta)?;
            let sol = soft_value_iteration_from(mdp, &r_eta, tol, warm.as_ref())?;
            sweeps += sol.iterations;
            *warm = Some(sol.v.clone());
            let kl = expected_policy_kl(mdp, &sol.policy, pi_prev)?;
            Ok((sol, kl))
        };

        // Bracket the bound crossing, starting from the last accepted
        // multiplier (the crossing moves slowly between outer iterations).
        let mut warm = self.warm_candidate.take();
        let start = self.last_eta.filter(|e| *e > 0.0).unwrap_or(1.0);
        let mut lo = 0.0f64;
        let mut hi = None;
        let mut e = start.clamp(1e-6, ETA_CAP / 2.0);
        let (_, kl_e) = eval(e, loose, &mut warm)?;
        if kl_e > zeta {
            lo = e;
            while hi.is_none() {
                e *= 2.0;
                if e > ETA_CAP {
                    return Err(TrirlError::BracketFailure(format!(
                        "KL still above the bound at eta cap {ETA_CAP:e} (zeta = {zeta:e})"
                    )));
                }
                let (_, kl) = eval(e, loose, &mut warm)?;
                if kl > zeta {
                    lo = e;
                } else {
                    hi = Some(e);
                }
            }
        } else {
            let mut h = e;
            loop {
                e /= 2.0;
                if e < 1e-9 {
                    break; // kl(0) > zeta, so the crossing sits in (0, h).
                }
                let (_, kl) = eval(e, loose, &mut warm)?;
                if kl > zeta {
                    lo = e;
                    break;
                }
                h = e;
            }
            hi = Some(h);
        }
        let mut hi = hi.expect("bracket established");

        // Bisect to the bound, then polish at full tolerance. The polish can
        // nudge the KL, so fall back to full-tolerance bisection steps if it
        // drifts outside kl_tol.
        let mut accepted: Option<(SoftSolution, f64, f64)> = None;
        for round in 0..2 {
            let tol = if round == 0 { loose } else { self.vi_tol };
            for _ in 0..200 {
                let mid = if lo > 0.0 && hi / lo > 16.0 {
                    (lo * hi).sqrt()
                } else {
                    0.5 * (lo + hi)
                };
                let (sol, kl) = eval(mid, tol, &mut warm)?;
                if (kl - zeta).abs() <= 0.5 * kl_tol {
                    accepted = Some((sol, mid, kl));
                    break;
                }
                if kl > zeta {
                    lo = mid;
                } else {
                    hi = mid;
                }
                if (hi - lo) <= f64::EPSILON * hi {
                    accepted = Some((sol, mid, kl));
                    break;
                }
            }
            let (_, eta, _) = accepted.as_ref().ok_or_else(|| TrirlError::NonConvergence {
                iterations: 200,
                residual: f64::NAN,
            })?;
            let eta = *eta;
            let (sol, kl) = eval(eta, self.vi_tol, &mut warm)?;
            if (kl - zeta).abs() <= kl_tol {
                self.warm_candidate = warm;
                self.last_eta = Some(eta);
                return Ok(TrSolveResult {
                    policy: sol.policy,
                    eta,
                    expected_kl: kl,
                    active: true,
                    inner_sweeps: sweeps,
                });
            }
            // Re-center the bracket around the polished evaluation.
            if kl > zeta {
                lo = eta;
            } else {
                hi = eta;
            }
            accepted = None;
        }
        Err(TrirlError::NonConvergence {
            iterations: 400,
            residual: f64::NAN,
        })
    }
}
