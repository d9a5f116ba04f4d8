//! Log-density-ratio providers and the bounded discriminator history.
//!
//! The reward produced by the outer loop is a long product of convex
//! mixtures,
//!
//! ```text
//! r^{(i+1)} = fold of  r <- (1 - eps_j) r + eps_j * beta * D_j
//! ```
//!
//! so old terms decay geometrically: a perturbation of the reward fitted
//! `k` steps ago survives into the present with coefficient
//! `prod_j (1 - eps_j)`. The buffer keeps only the `k` most recent ratio
//! estimates plus a fitted base reward; evicted entries are folded into the
//! base (optionally with injected noise standing in for parametric fitting
//! error). With zero noise the truncation is exact: the buffered fold
//! performs the same operation sequence as unlimited history.
//!
//! Ratio estimates come in two modes: exact tables built from occupancies,
//! and logits of a linear logistic discriminator over one-hot state-action
//! features. The one-hot parameterization decouples the cells, so gradient
//! descent on the balanced binary cross-entropy converges per cell to
//! `log(p_E(s,a) / p_A(s,a))` — the log density ratio.

use crate::error::{Result, TrirlError};
use crate::mdp::{Occupancy, TabularMdp, TabularPolicy};
use crate::numerics::{logsumexp, sample_categorical};
use crate::reward::RewardTable;
use ndarray::{Array1, Array2};
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::VecDeque;

/// Where a ratio estimate came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ProviderMode {
    Exact,
    Sampled,
}

/// A log-density-ratio estimate `D(s,a) ~ log(rho_E / rho_pi)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatioProvider {
    pub mode: ProviderMode,
    pub logits: Array2<f64>,
}

impl RatioProvider {
    pub fn exact(logits: Array2<f64>) -> Result<Self> {
        Self::with_mode(ProviderMode::Exact, logits)
    }

    pub fn sampled(logits: Array2<f64>) -> Result<Self> {
        Self::with_mode(ProviderMode::Sampled, logits)
    }

    fn with_mode(mode: ProviderMode, logits: Array2<f64>) -> Result<Self> {
        if logits.iter().any(|v| !v.is_finite()) {
            return Err(TrirlError::InvalidArgument(
                "ratio logits must be finite".into(),
            ));
        }
        Ok(Self { mode, logits })
    }
}

/// A rollout: consecutive `(s, a, s')` transitions.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Trajectory {
    pub steps: Vec<(usize, usize, usize)>,
}

/// Sample `n` trajectories under `policy`. Discounting is realized by
/// episode length: after each recorded step the episode survives with
/// probability `gamma`, so the pooled `(s,a)` frequencies are unbiased for
/// the normalized occupancy (up to the `horizon` cap).
pub fn sample_trajectories(
    mdp: &TabularMdp,
    policy: &TabularPolicy,
    n: usize,
    horizon: usize,
    seed: u64,
) -> Result<Vec<Trajectory>> {
    if n == 0 || horizon == 0 {
        return Err(TrirlError::InvalidArgument(
            "need at least one trajectory and a positive horizon".into(),
        ));
    }
    if policy.n_states() != mdp.n_states || policy.n_actions() != mdp.n_actions {
        return Err(TrirlError::ShapeMismatch(format!(
            "policy is {}x{}, MDP wants {}x{}",
            policy.n_states(),
            policy.n_actions(),
            mdp.n_states,
            mdp.n_actions
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let mut s = sample_categorical(&mut rng, mdp.initial_dist.view());
        let mut steps = Vec::new();
        for _ in 0..horizon {
            let a = sample_categorical(&mut rng, policy.probs.row(s));
            let s_next = sample_categorical(
                &mut rng,
                mdp.transition.index_axis(ndarray::Axis(0), s).row(a),
            );
            steps.push((s, a, s_next));
            if rng.random::<f64>() >= mdp.gamma {
                break;
            }
            s = s_next;
        }
        out.push(Trajectory { steps });
    }
    Ok(out)
}

/// Pooled `(s,a)` frequencies of a trajectory set, as an occupancy estimate.
pub fn empirical_occupancy(
    trajectories: &[Trajectory],
    n_states: usize,
    n_actions: usize,
) -> Result<Occupancy> {
    let mut counts = Array2::<f64>::zeros((n_states, n_actions));
    let mut total = 0.0;
    for traj in trajectories {
        for (s, a, _) in &traj.steps {
            if *s >= n_states || *a >= n_actions {
                return Err(TrirlError::InvalidArgument(format!(
                    "trajectory step ({s},{a}) outside a {n_states}x{n_actions} MDP"
                )));
            }
            counts[[*s, *a]] += 1.0;
            total += 1.0;
        }
    }
    if total == 0.0 {
        return Err(TrirlError::InvalidArgument(
            "trajectory set holds no steps".into(),
        ));
    }
    Occupancy::new(counts / total)
}

/// The states a trajectory batch touches (sources and successors), deduped.
pub fn visited_states(trajectories: &[Trajectory]) -> Vec<usize> {
    let mut seen: Vec<usize> = trajectories
        .iter()
        .flat_map(|t| t.steps.iter().flat_map(|(s, _, s2)| [*s, *s2]))
        .collect();
    seen.sort_unstable();
    seen.dedup();
    seen
}

/// Train a linear logistic discriminator over one-hot `(s,a)` features by
/// gradient descent on the balanced binary cross-entropy. Its logits
/// estimate `log(rho_E / rho_pi)`.
pub fn train_logistic_discriminator(
    expert: &[Trajectory],
    agent: &[Trajectory],
    n_states: usize,
    n_actions: usize,
    steps: usize,
    lr: f64,
) -> Result<RatioProvider> {
    if expert.is_empty() || agent.is_empty() {
        return Err(TrirlError::InvalidArgument(
            "both sample sets must be non-empty".into(),
        ));
    }
    let p_e = empirical_occupancy(expert, n_states, n_actions)?.rho;
    let p_a = empirical_occupancy(agent, n_states, n_actions)?.rho;
    let mut w = Array2::<f64>::zeros((n_states, n_actions));
    for _ in 0..steps {
        let mut loss = 0.0;
        for (idx, wv) in w.indexed_iter_mut() {
            let sig = 1.0 / (1.0 + (-*wv).exp());
            let (pe, pa) = (p_e[idx], p_a[idx]);
            loss -= 0.5 * (pe * sig.max(1e-300).ln() + pa * (1.0 - sig).max(1e-300).ln());
            *wv += lr * 0.5 * (pe * (1.0 - sig) - pa * sig);
        }
        if !loss.is_finite() {
            return Err(TrirlError::NonConvergence {
                iterations: steps as u64,
                residual: loss,
            });
        }
    }
    RatioProvider::sampled(w)
}

/// One buffered ratio estimate with its step-size multiplier and the policy
/// that produced the agent samples (the trust-region center at that time).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BufferEntry {
    pub provider: RatioProvider,
    pub eta: f64,
    pub policy_snapshot: TabularPolicy,
}

/// Bounded discriminator history: a fitted base reward plus the `capacity`
/// most recent ratio estimates, ordered oldest to newest.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DiscBuffer {
    pub capacity: usize,
    pub base_reward: RewardTable,
    pub entries: VecDeque<BufferEntry>,
    pub epsilon: f64,
    pub beta: f64,
    /// Trust-region bound used by the retrospective multiplier pass.
    pub zeta: f64,
    /// Seed stream for the fitted-reward noise injected on eviction.
    pub noise_seed: u64,
    pub push_count: u64,
}

impl DiscBuffer {
    pub fn new(
        capacity: usize,
        base_reward: RewardTable,
        epsilon: f64,
        beta: f64,
        zeta: f64,
        noise_seed: u64,
    ) -> Result<Self> {
        if capacity == 0 {
            return Err(TrirlError::InvalidArgument(
                "buffer capacity must be positive".into(),
            ));
        }
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
        if !(zeta > 0.0) || !zeta.is_finite() {
            return Err(TrirlError::InvalidArgument(format!(
                "KL bound must be positive and finite, got {zeta}"
            )));
        }
        Ok(Self {
            capacity,
            base_reward,
            entries: VecDeque::new(),
            epsilon,
            beta,
            zeta,
            noise_seed,
            push_count: 0,
        })
    }
}

fn fold_once(table: &Array2<f64>, entry: &BufferEntry, epsilon: f64, beta: f64) -> Array2<f64> {
    let step = epsilon / (1.0 + entry.eta);
    let mut out = Array2::zeros(table.dim());
    for (idx, v) in out.indexed_iter_mut() {
        *v = (1.0 - step) * table[idx] + step * beta * entry.provider.logits[idx];
    }
    out
}

/// Append a ratio estimate. When the ring is full the oldest entry is folded
/// into the base reward first, followed by zero-mean uniform noise of scale
/// `fit_noise` standing in for the error of re-fitting the base parametrically.
pub fn buffer_push(
    mut buf: DiscBuffer,
    provider: RatioProvider,
    eta: f64,
    policy: TabularPolicy,
    fit_noise: f64,
) -> Result<DiscBuffer> {
    if !(eta >= 0.0) || !eta.is_finite() {
        return Err(TrirlError::InvalidArgument(format!(
            "multiplier must be finite and non-negative, got {eta}"
        )));
    }
    if !(fit_noise >= 0.0) || !fit_noise.is_finite() {
        return Err(TrirlError::InvalidArgument(format!(
            "fit noise must be finite and non-negative, got {fit_noise}"
        )));
    }
    if buf.entries.len() == buf.capacity {
        let evicted = buf.entries.pop_front().expect("ring is full");
        let mut folded = fold_once(&buf.base_reward.table, &evicted, buf.epsilon, buf.beta);
        if fit_noise > 0.0 {
            let mut rng = ChaCha8Rng::seed_from_u64(buf.noise_seed.wrapping_add(buf.push_count));
            for v in folded.iter_mut() {
                *v += rng.random_range(-fit_noise..=fit_noise);
            }
        }
        buf.base_reward = RewardTable::new(folded)?;
    }
    buf.entries.push_back(BufferEntry {
        provider,
        eta,
        policy_snapshot: policy,
    });
    buf.push_count += 1;
    Ok(buf)
}

/// Fold the base reward through every entry, oldest to newest, each at its
/// corrected step `epsilon / (1 + eta)`.
pub fn buffer_corrected_reward(buf: &DiscBuffer) -> Result<RewardTable> {
    let mut table = buf.base_reward.table.clone();
    for entry in &buf.entries {
        table = fold_once(&table, entry, buf.epsilon, buf.beta);
    }
    RewardTable::new(table)
}

/// Corrected fold over all entries except the newest, then one uncorrected
/// `epsilon` step with the newest logits: the pre-correction target reward.
pub fn buffer_intermediate_reward(buf: &DiscBuffer) -> Result<RewardTable> {
    let newest = buf.entries.back().ok_or(TrirlError::EmptyBuffer)?;
    let mut table = buf.base_reward.table.clone();
    for entry in buf.entries.iter().take(buf.entries.len() - 1) {
        table = fold_once(&table, entry, buf.epsilon, buf.beta);
    }
    let mut out = Array2::zeros(table.dim());
    for (idx, v) in out.indexed_iter_mut() {
        *v = (1.0 - buf.epsilon) * table[idx]
            + buf.epsilon * buf.beta * newest.provider.logits[idx];
    }
    RewardTable::new(out)
}

/// Replace the newest entry's multiplier (set once its trust-region solve
/// has produced one).
pub fn buffer_set_newest_eta(mut buf: DiscBuffer, eta: f64) -> Result<DiscBuffer> {
    if !(eta >= 0.0) || !eta.is_finite() {
        return Err(TrirlError::InvalidArgument(format!(
            "multiplier must be finite and non-negative, got {eta}"
        )));
    }
    let newest = buf.entries.back_mut().ok_or(TrirlError::EmptyBuffer)?;
    newest.eta = eta;
    Ok(buf)
}

/// Smallest multiplier projecting `new_row` into the per-state KL ball of
/// radius `zeta` around `old_row` along the geometric interpolation
/// `pi_eta ∝ new^{1/(1+eta)} old^{eta/(1+eta)}`.
fn state_projection_eta(new_row: &[f64], old_row: &[f64], zeta: f64) -> f64 {
    let kl_at = |eta: f64| -> f64 {
        let w = 1.0 / (1.0 + eta);
        let logp: Array1<f64> = new_row
            .iter()
            .zip(old_row.iter())
            .map(|(n, o)| w * n.ln() + (1.0 - w) * o.ln())
            .collect();
        let z = logsumexp(logp.view());
        let mut kl = 0.0;
        for (lp, o) in logp.iter().zip(old_row.iter()) {
            let p = (lp - z).exp();
            if p > 0.0 {
                kl += p * (lp - z - o.ln());
            }
        }
        kl
    };
    if kl_at(0.0) <= zeta {
        return 0.0;
    }
    let mut lo = 0.0f64;
    let mut hi = 1.0f64;
    while kl_at(hi) > zeta {
        hi *= 2.0;
        if hi > 1e12 {
            return 1e12;
        }
    }
    let tol = (1e-9 * zeta).max(1e-14);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        let kl = kl_at(mid);
        if (kl - zeta).abs() <= tol {
            return mid;
        }
        if kl > zeta {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo <= f64::EPSILON * hi {
            break;
        }
    }
    hi
}

/// Recompute every buffered multiplier in hindsight: entry `j` receives the
/// maximum, over the given batch states, of the per-state multiplier that
/// projects its successor's snapshot into the KL ball of its own snapshot.
/// The newest entry has no successor yet and keeps its multiplier.
pub fn recompute_etas_retrospective(
    mut buf: DiscBuffer,
    mdp: &TabularMdp,
    batch_states: &[usize],
) -> Result<DiscBuffer> {
    let mut states: Vec<usize> = batch_states.to_vec();
    states.sort_unstable();
    states.dedup();
    if states.iter().any(|s| *s >= mdp.n_states) {
        return Err(TrirlError::InvalidArgument(
            "batch state index outside the MDP".into(),
        ));
    }
    for j in 0..buf.entries.len().saturating_sub(1) {
        let successor = buf.entries[j + 1].policy_snapshot.clone();
        let entry = &mut buf.entries[j];
        let mut eta = 0.0f64;
        for &s in &states {
            let new_row = successor.probs.row(s).to_vec();
            let old_row = entry.policy_snapshot.probs.row(s).to_vec();
            eta = eta.max(state_projection_eta(&new_row, &old_row, buf.zeta));
        }
        entry.eta = eta;
    }
    Ok(buf)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mdp::{compute_occupancy, test_support};
    use crate::reward::{log_density_ratio_exact, reward_update};
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    fn bandit_mdp(gamma: f64) -> TabularMdp {
        TabularMdp::new(array![[[1.0], [1.0]]], array![1.0], gamma).unwrap()
    }

    #[test]
    fn deterministic_rollouts_are_identical() {
        // gamma = 0: every episode is a single recorded step.
        let mdp = TabularMdp::new(
            array![[[0.0, 1.0], [1.0, 0.0]], [[1.0, 0.0], [0.0, 1.0]]],
            array![1.0, 0.0],
            0.0,
        )
        .unwrap();
        let policy = TabularPolicy::new(array![[1.0, 0.0], [0.0, 1.0]]).unwrap();
        let trajs = sample_trajectories(&mdp, &policy, 32, 50, 7).unwrap();
        for t in &trajs {
            assert_eq!(t.steps, vec![(0, 0, 1)]);
        }
    }

    #[test]
    fn rollout_frequencies_match_exact_occupancy() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let mdp = test_support::random_mdp(&mut rng, 3, 2, 0.9);
        let policy = test_support::random_policy(&mut rng, 3, 2);
        let exact = compute_occupancy(&mdp, &policy).unwrap();
        // ~2e6 steps at mean episode length 10.
        let trajs = sample_trajectories(&mdp, &policy, 200_000, 1_000, 11).unwrap();
        let emp = empirical_occupancy(&trajs, 3, 2).unwrap();
        assert!(emp.l1_to(&exact) <= 1e-2, "L1 gap {}", emp.l1_to(&exact));
    }

    #[test]
    fn rollouts_are_seed_deterministic() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let mdp = test_support::random_mdp(&mut rng, 3, 2, 0.8);
        let policy = test_support::random_policy(&mut rng, 3, 2);
        let a = sample_trajectories(&mdp, &policy, 100, 100, 99).unwrap();
        let b = sample_trajectories(&mdp, &policy, 100, 100, 99).unwrap();
        assert_eq!(a, b);
        let c = sample_trajectories(&mdp, &policy, 100, 100, 100).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn discriminator_logits_vanish_for_identical_policies() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(13);
        let mdp = test_support::random_mdp(&mut rng, 2, 2, 0.9);
        let policy = test_support::random_policy(&mut rng, 2, 2);
        let expert = sample_trajectories(&mdp, &policy, 10_000, 1_000, 1).unwrap();
        let agent = sample_trajectories(&mdp, &policy, 10_000, 1_000, 2).unwrap();
        let disc = train_logistic_discriminator(&expert, &agent, 2, 2, 4_000, 2.0).unwrap();
        for v in disc.logits.iter() {
            assert!(v.abs() <= 0.1, "logit {v} for identical policies");
        }
    }

    #[test]
    fn discriminator_signs_separate_disjoint_supports() {
        let expert = vec![Trajectory {
            steps: vec![(0, 0, 0); 50],
        }];
        let agent = vec![Trajectory {
            steps: vec![(1, 0, 1); 50],
        }];
        let disc = train_logistic_discriminator(&expert, &agent, 2, 1, 2_000, 2.0).unwrap();
        assert!(disc.logits[[0, 0]] > 2.0);
        assert!(disc.logits[[1, 0]] < -2.0);
    }

    #[test]
    fn discriminator_recovers_exact_log_ratio() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(21);
        let mdp = test_support::random_mdp(&mut rng, 2, 2, 0.9);
        let expert_pi = TabularPolicy::new(array![[0.7, 0.3], [0.35, 0.65]]).unwrap();
        let agent_pi = TabularPolicy::new(array![[0.45, 0.55], [0.6, 0.4]]).unwrap();
        let expert = sample_trajectories(&mdp, &expert_pi, 20_000, 1_000, 31).unwrap();
        let agent = sample_trajectories(&mdp, &agent_pi, 20_000, 1_000, 32).unwrap();
        let disc = train_logistic_discriminator(&expert, &agent, 2, 2, 6_000, 2.0).unwrap();
        let exact = log_density_ratio_exact(
            &compute_occupancy(&mdp, &expert_pi).unwrap(),
            &compute_occupancy(&mdp, &agent_pi).unwrap(),
            1e-12,
        )
        .unwrap();
        for (got, want) in disc.logits.iter().zip(exact.iter()) {
            assert!(
                (got - want).abs() <= 0.05,
                "sampled logit {got} vs exact {want}"
            );
        }
    }

    fn test_buffer(capacity: usize, epsilon: f64) -> DiscBuffer {
        DiscBuffer::new(
            capacity,
            RewardTable::new(array![[1.0, -2.0]]).unwrap(),
            epsilon,
            2.0,
            0.1,
            17,
        )
        .unwrap()
    }

    fn entry_provider(v0: f64, v1: f64) -> RatioProvider {
        RatioProvider::exact(array![[v0, v1]]).unwrap()
    }

    fn uniform_policy() -> TabularPolicy {
        TabularPolicy::uniform(1, 2)
    }

    #[test]
    fn empty_buffer_returns_base_and_rejects_intermediate() {
        let buf = test_buffer(3, 0.6);
        assert_eq!(
            buffer_corrected_reward(&buf).unwrap(),
            buf.base_reward.clone()
        );
        assert!(matches!(
            buffer_intermediate_reward(&buf),
            Err(TrirlError::EmptyBuffer)
        ));
    }

    #[test]
    fn single_entry_matches_reward_update() {
        let buf = test_buffer(3, 0.6);
        let d = entry_provider(0.5, -0.25);
        let buf = buffer_push(buf, d.clone(), 0.0, uniform_policy(), 0.0).unwrap();
        let want = reward_update(&buf.base_reward, &d.logits, 0.6, 2.0).unwrap();
        assert_eq!(buffer_corrected_reward(&buf).unwrap(), want);
        assert_eq!(buffer_intermediate_reward(&buf).unwrap(), want);
    }

    #[test]
    fn two_entry_fold_matches_hand_arithmetic() {
        // base (1, -2), eps 0.6, beta 2; entry A: D=(0.5,-0.25), eta=1
        // (step 0.3); entry B: D=(1, 0), eta=0.5 (step 0.4).
        let buf = test_buffer(3, 0.6);
        let buf = buffer_push(buf, entry_provider(0.5, -0.25), 1.0, uniform_policy(), 0.0).unwrap();
        let buf = buffer_push(buf, entry_provider(1.0, 0.0), 0.5, uniform_policy(), 0.0).unwrap();
        let corrected = buffer_corrected_reward(&buf).unwrap();
        // After A: 0.7*(1,-2) + 0.3*2*(0.5,-0.25) = (1.0, -1.55).
        // After B: 0.6*(1.0,-1.55) + 0.4*2*(1,0) = (1.4, -0.93).
        assert_abs_diff_eq!(corrected.table[[0, 0]], 1.4, epsilon = 1e-12);
        assert_abs_diff_eq!(corrected.table[[0, 1]], -0.93, epsilon = 1e-12);
        // Intermediate ignores B's eta: 0.4*(1.0,-1.55) + 0.6*2*(1,0).
        let inter = buffer_intermediate_reward(&buf).unwrap();
        assert_abs_diff_eq!(inter.table[[0, 0]], 1.6, epsilon = 1e-12);
        assert_abs_diff_eq!(inter.table[[0, 1]], -0.62, epsilon = 1e-12);
    }

    #[test]
    fn corrected_and_intermediate_differ_only_in_newest_step() {
        let buf = test_buffer(4, 0.6);
        let buf = buffer_push(buf, entry_provider(0.3, 0.9), 2.0, uniform_policy(), 0.0).unwrap();
        let buf = buffer_push(buf, entry_provider(-0.4, 0.2), 0.0, uniform_policy(), 0.0).unwrap();
        let inter = buffer_intermediate_reward(&buf).unwrap();
        let buf = buffer_set_newest_eta(buf, 3.0).unwrap();
        let corrected = buffer_corrected_reward(&buf).unwrap();
        // corrected - intermediate = (eps_tr - eps) * (beta*D_new - C) with
        // C the fold over all but the newest entry.
        let mut base = buf.base_reward.table.clone();
        base = fold_once(&base, &buf.entries[0], buf.epsilon, buf.beta);
        let eps = 0.6_f64;
        let eps_tr = 0.6 / (1.0 + 3.0);
        for (idx, c) in corrected.table.indexed_iter() {
            let want = inter.table[idx]
                + (eps_tr - eps) * (buf.beta * buf.entries[1].provider.logits[idx] - base[idx]);
            assert_abs_diff_eq!(*c, want, epsilon = 1e-12);
        }
    }

    #[test]
    fn eviction_folds_oldest_into_base() {
        let buf = test_buffer(1, 0.5);
        let first = entry_provider(2.0, 2.0);
        let buf = buffer_push(buf, first.clone(), 1.0, uniform_policy(), 0.0).unwrap();
        let buf = buffer_push(buf, entry_provider(0.0, 0.0), 0.0, uniform_policy(), 0.0).unwrap();
        // Base after eviction: step 0.25 fold of (1,-2) toward 2*2:
        // 0.75*(1,-2) + 0.25*2*(2,2) = (1.75, -0.5).
        assert_abs_diff_eq!(buf.base_reward.table[[0, 0]], 1.75, epsilon = 1e-12);
        assert_abs_diff_eq!(buf.base_reward.table[[0, 1]], -0.5, epsilon = 1e-12);
    }

    #[test]
    fn all_zero_logits_scale_base_geometrically() {
        let mut buf = test_buffer(8, 0.6);
        for _ in 0..5 {
            buf = buffer_push(buf, entry_provider(0.0, 0.0), 0.0, uniform_policy(), 0.0).unwrap();
        }
        let corrected = buffer_corrected_reward(&buf).unwrap();
        let scale = (1.0 - 0.6f64).powi(5);
        assert_abs_diff_eq!(corrected.table[[0, 0]], scale * 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(corrected.table[[0, 1]], scale * -2.0, epsilon = 1e-12);
    }

    #[test]
    fn truncated_buffer_equals_unlimited_history_exactly() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(51);
        let mut small = test_buffer(3, 0.6);
        let mut big = test_buffer(1_000, 0.6);
        for i in 0..9 {
            let logits = array![[test_support::random_simplex(&mut rng, 2)[0] * 2.0 - 1.0, 0.1 * i as f64]];
            let provider = RatioProvider::exact(logits).unwrap();
            let eta = 0.5 * i as f64;
            small = buffer_push(small, provider.clone(), eta, uniform_policy(), 0.0).unwrap();
            big = buffer_push(big, provider, eta, uniform_policy(), 0.0).unwrap();
        }
        let a = buffer_corrected_reward(&small).unwrap();
        let b = buffer_corrected_reward(&big).unwrap();
        for (x, y) in a.table.iter().zip(b.table.iter()) {
            assert!((x - y).abs() <= 1e-12);
            assert_eq!(x.to_bits(), y.to_bits()); // same fold order, bit-exact
        }
    }

    #[test]
    fn fit_noise_decays_geometrically_through_the_ring() {
        // One eviction with noise 0.1, then a full ring of k = 10 entries:
        // the corrected reward moves by at most 0.1 * (1 - eps_min)^10.
        let mk = || {
            DiscBuffer::new(
                10,
                RewardTable::new(array![[1.0, -2.0]]).unwrap(),
                0.6,
                2.0,
                0.1,
                23,
            )
            .unwrap()
        };
        let mut noisy = mk();
        let mut clean = mk();
        for i in 0..11 {
            let provider = entry_provider(0.2 * i as f64, -0.1 * i as f64);
            let noise = if i == 10 { 0.1 } else { 0.0 };
            noisy = buffer_push(noisy, provider.clone(), 0.0, uniform_policy(), noise).unwrap();
            clean = buffer_push(clean, provider, 0.0, uniform_policy(), 0.0).unwrap();
        }
        let a = buffer_corrected_reward(&noisy).unwrap();
        let b = buffer_corrected_reward(&clean).unwrap();
        let bound = 0.1 * (1.0 - 0.6f64).powi(10);
        for (x, y) in a.table.iter().zip(b.table.iter()) {
            let diff = (x - y).abs();
            assert!(diff <= bound + 1e-15, "noise leak {diff} above {bound}");
            assert!(diff > 0.0, "noise was injected, diff cannot vanish");
        }
    }

    #[test]
    fn base_perturbation_attenuates_by_the_step_product() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(61);
        let mut buf = test_buffer(6, 0.6);
        let etas = [0.0, 1.0, 0.25, 3.0];
        for &eta in &etas {
            let logits = array![[
                test_support::random_simplex(&mut rng, 2)[0],
                -test_support::random_simplex(&mut rng, 2)[0]
            ]];
            buf = buffer_push(
                buf,
                RatioProvider::exact(logits).unwrap(),
                eta,
                uniform_policy(),
                0.0,
            )
            .unwrap();
        }
        let mut shifted = buf.clone();
        let delta = 0.37;
        shifted.base_reward = RewardTable::new(&buf.base_reward.table + delta).unwrap();
        let a = buffer_corrected_reward(&buf).unwrap();
        let b = buffer_corrected_reward(&shifted).unwrap();
        let product: f64 = etas.iter().map(|eta| 1.0 - 0.6 / (1.0 + eta)).product();
        for (x, y) in a.table.iter().zip(b.table.iter()) {
            assert_abs_diff_eq!((y - x).abs(), delta * product, epsilon = 1e-12);
        }
    }

    #[test]
    fn retrospective_etas_are_zero_for_identical_snapshots() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(71);
        let mdp = test_support::random_mdp(&mut rng, 2, 2, 0.9);
        let snapshot = test_support::random_policy(&mut rng, 2, 2);
        let mut buf = DiscBuffer::new(
            5,
            RewardTable::zeros(2, 2),
            0.6,
            2.0,
            0.05,
            3,
        )
        .unwrap();
        for _ in 0..4 {
            buf = buffer_push(
                buf,
                RatioProvider::exact(Array2::zeros((2, 2))).unwrap(),
                7.0,
                snapshot.clone(),
                0.0,
            )
            .unwrap();
        }
        let buf = recompute_etas_retrospective(buf, &mdp, &[0, 1]).unwrap();
        for entry in buf.entries.iter().take(3) {
            assert_eq!(entry.eta, 0.0);
        }
        // Newest keeps its placeholder; it has no successor yet.
        assert_eq!(buf.entries[3].eta, 7.0);
    }

    #[test]
    fn retrospective_eta_hits_the_per_state_bound() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(73);
        let mdp = test_support::random_mdp(&mut rng, 1, 2, 0.9);
        let old = TabularPolicy::new(array![[0.5, 0.5]]).unwrap();
        let new = TabularPolicy::new(array![[0.9, 0.1]]).unwrap();
        let zeta = 0.02;
        let mut buf = DiscBuffer::new(
            4,
            RewardTable::zeros(1, 2),
            0.6,
            2.0,
            zeta,
            3,
        )
        .unwrap();
        buf = buffer_push(
            buf,
            RatioProvider::exact(Array2::zeros((1, 2))).unwrap(),
            0.0,
            old.clone(),
            0.0,
        )
        .unwrap();
        buf = buffer_push(
            buf,
            RatioProvider::exact(Array2::zeros((1, 2))).unwrap(),
            0.0,
            new.clone(),
            0.0,
        )
        .unwrap();
        let buf = recompute_etas_retrospective(buf, &mdp, &[0]).unwrap();
        let eta = buf.entries[0].eta;
        assert!(eta > 0.0);
        // The projected policy at that eta sits on the KL boundary.
        let w = 1.0 / (1.0 + eta);
        let unnorm = [
            0.9f64.powf(w) * 0.5f64.powf(1.0 - w),
            0.1f64.powf(w) * 0.5f64.powf(1.0 - w),
        ];
        let z: f64 = unnorm.iter().sum();
        let kl: f64 = unnorm
            .iter()
            .map(|u| {
                let p = u / z;
                p * (p / 0.5).ln()
            })
            .sum();
        assert!((kl - zeta).abs() <= 1e-8, "projected KL {kl} vs bound {zeta}");
    }

    #[test]
    fn retrospective_pass_is_idempotent_and_monotone_in_the_batch() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(79);
        let mdp = test_support::random_mdp(&mut rng, 3, 2, 0.9);
        let mut buf = DiscBuffer::new(
            5,
            RewardTable::zeros(3, 2),
            0.6,
            2.0,
            0.01,
            3,
        )
        .unwrap();
        for _ in 0..3 {
            buf = buffer_push(
                buf,
                RatioProvider::exact(Array2::zeros((3, 2))).unwrap(),
                0.0,
                test_support::random_policy(&mut rng, 3, 2),
                0.0,
            )
            .unwrap();
        }
        let full = recompute_etas_retrospective(buf.clone(), &mdp, &[0, 1, 2]).unwrap();
        let again = recompute_etas_retrospective(full.clone(), &mdp, &[0, 1, 2]).unwrap();
        for (a, b) in full.entries.iter().zip(again.entries.iter()) {
            assert_eq!(a.eta, b.eta);
        }
        let partial = recompute_etas_retrospective(buf, &mdp, &[1]).unwrap();
        for (p, f) in partial.entries.iter().zip(full.entries.iter()).take(2) {
            assert!(p.eta <= f.eta + 1e-12, "subset eta {} > full {}", p.eta, f.eta);
        }
    }

    #[test]
    fn buffers_round_trip_through_json() {
        let buf = test_buffer(2, 0.6);
        let buf = buffer_push(buf, entry_provider(0.4, -0.1), 1.5, uniform_policy(), 0.0).unwrap();
        let text = serde_json::to_string(&buf).unwrap();
        let back: DiscBuffer = serde_json::from_str(&text).unwrap();
        assert_eq!(back.entries.len(), 1);
        assert_eq!(back.entries[0].eta, 1.5);
        assert_eq!(
            buffer_corrected_reward(&back).unwrap(),
            buffer_corrected_reward(&buf).unwrap()
        );
    }

    #[test]
    fn bandit_occupancy_sanity_for_sampling_helpers() {
        // gamma = 0.5 bandit: occupancy equals the policy row.
        let mdp = bandit_mdp(0.5);
        let policy = TabularPolicy::new(array![[0.3, 0.7]]).unwrap();
        let trajs = sample_trajectories(&mdp, &policy, 50_000, 100, 5).unwrap();
        let emp = empirical_occupancy(&trajs, 1, 2).unwrap();
        assert_abs_diff_eq!(emp.rho[[0, 0]], 0.3, epsilon = 0.01);
        assert_eq!(visited_states(&trajs), vec![0]);
    }
}
