//! Exact, desk-scale trust-region inverse reinforcement learning on tabular
//! MDPs.
//!
//! The library recovers a reward from expert occupancies by monotone descent
//! on the entropy-regularized dual of the occupancy-matching problem. Each
//! iteration estimates the log density ratio between expert and agent
//! visitation, takes a damped function-space reward step, re-solves the
//! policy inside a KL trust region around the previous policy, and shrinks
//! the reward step by the trust-region multiplier (`eps_tr = eps / (1 + eta)`)
//! so the new policy remains exactly soft-optimal for the reward it tracks.
//!
//! - [`mdp`]: tabular MDPs, policies, discounted occupancy measures,
//!   gridworld construction
//! - [`solver`]: soft value iteration and the trust-region policy solver
//! - [`reward`]: reward tables, damped updates, the dual objective, its
//!   gradient, and alignment diagnostics
//! - [`density`]: exact and discriminator-based log density ratios, rollout
//!   sampling, and the bounded correction buffer
//! - [`trpl`]: decomposed Gaussian KL projections, the continuous-action
//!   analog of the tabular trust-region step
//! - [`driver`]: end-to-end experiment loops, baselines, ablations, and the
//!   reward-transfer protocol
//! - [`cli`]: the command-line harness behind the `trirl` binary

pub mod cli;
pub mod density;
pub mod driver;
pub mod error;
pub mod mdp;
mod numerics;
pub mod reward;
pub mod solver;
pub mod trpl;

pub use error::{Result, TrirlError};
