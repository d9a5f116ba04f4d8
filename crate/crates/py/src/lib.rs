//! Python bindings for the tabular trust-region IRL library.
//!
//! The surface mirrors the Rust API over plain Python data: MDPs come in
//! as nested lists (or as gridworld spec JSON), tables go back out as
//! nested lists, and the full corrected loop returns a dict holding the
//! per-iteration trace and final tables. Build the `trirl_py` cdylib and
//! import it directly; `python/smoke_test.py` in the repository root shows
//! the round trip.

use ndarray::{Array1, Array2, Array3};
use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use pyo3::types::{PyDict, PyList};
use trirl::driver::{self, ExperimentConfig};
use trirl::error::TrirlError;
use trirl::mdp::{self, GridworldSpec, TabularMdp, TabularPolicy};
use trirl::solver;
use trirl::trpl::{self, GaussianParams};

fn err(e: TrirlError) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn to_array1(v: Vec<f64>) -> Array1<f64> {
    Array1::from_vec(v)
}

fn to_array2(v: Vec<Vec<f64>>) -> PyResult<Array2<f64>> {
    let rows = v.len();
    let cols = v.first().map_or(0, |r| r.len());
    if v.iter().any(|r| r.len() != cols) {
        return Err(PyValueError::new_err("ragged nested list"));
    }
    let flat: Vec<f64> = v.into_iter().flatten().collect();
    Array2::from_shape_vec((rows, cols), flat)
        .map_err(|e| PyValueError::new_err(e.to_string()))
}

fn to_array3(v: Vec<Vec<Vec<f64>>>) -> PyResult<Array3<f64>> {
    let d0 = v.len();
    let d1 = v.first().map_or(0, |x| x.len());
    let d2 = v.first().and_then(|x| x.first()).map_or(0, |x| x.len());
    if v.iter().any(|x| x.len() != d1 || x.iter().any(|y| y.len() != d2)) {
        return Err(PyValueError::new_err("ragged nested list"));
    }
    let flat: Vec<f64> = v.into_iter().flatten().flatten().collect();
    Array3::from_shape_vec((d0, d1, d2), flat)
        .map_err(|e| PyValueError::new_err(e.to_string()))
}

fn from_array2(a: &Array2<f64>) -> Vec<Vec<f64>> {
    a.outer_iter().map(|row| row.to_vec()).collect()
}

fn policy_from_lists(v: Vec<Vec<f64>>) -> PyResult<TabularPolicy> {
    TabularPolicy::new(to_array2(v)?).map_err(err)
}

fn occupancy_from_lists(v: Vec<Vec<f64>>) -> PyResult<mdp::Occupancy> {
    mdp::Occupancy::new(to_array2(v)?).map_err(err)
}

fn parse_grid_spec(spec_json: &str) -> PyResult<GridworldSpec> {
    serde_json::from_str(spec_json).map_err(|e| PyValueError::new_err(e.to_string()))
}

/// Tabular MDP: transition tensor `[state][action][next]`, an initial
/// distribution, and a discount.
#[pyclass]
struct Mdp {
    inner: TabularMdp,
}

#[pymethods]
impl Mdp {
    #[new]
    fn new(transition: Vec<Vec<Vec<f64>>>, initial_dist: Vec<f64>, gamma: f64) -> PyResult<Self> {
        let inner =
            TabularMdp::new(to_array3(transition)?, to_array1(initial_dist), gamma).map_err(err)?;
        Ok(Self { inner })
    }

    /// Build from gridworld layout JSON (same schema as the CLI's
    /// `environment` section minus `gamma`/`expert_goal_reward`).
    #[staticmethod]
    fn from_gridworld(spec_json: &str, gamma: f64) -> PyResult<Self> {
        let spec = parse_grid_spec(spec_json)?;
        let inner = mdp::build_gridworld(&spec, gamma).map_err(err)?;
        Ok(Self { inner })
    }

    #[getter]
    fn n_states(&self) -> usize {
        self.inner.n_states
    }

    #[getter]
    fn n_actions(&self) -> usize {
        self.inner.n_actions
    }

    #[getter]
    fn gamma(&self) -> f64 {
        self.inner.gamma
    }
}

/// Goal indicator reward for a gridworld layout, scaled by `magnitude`.
#[pyfunction]
fn goal_reward_table(spec_json: &str, magnitude: f64) -> PyResult<Vec<Vec<f64>>> {
    let spec = parse_grid_spec(spec_json)?;
    Ok(from_array2(&mdp::goal_reward_table(&spec, magnitude)))
}

/// Entropy-regularized value iteration. Returns
/// `(policy, v, iterations, residual)`.
#[pyfunction]
fn soft_value_iteration(
    mdp: PyRef<'_, Mdp>,
    reward: Vec<Vec<f64>>,
    tol: f64,
) -> PyResult<(Vec<Vec<f64>>, Vec<f64>, u64, f64)> {
    let sol = solver::soft_value_iteration(&mdp.inner, &to_array2(reward)?, tol).map_err(err)?;
    Ok((
        from_array2(&sol.policy.probs),
        sol.v.to_vec(),
        sol.iterations,
        sol.residual,
    ))
}

/// Normalized discounted state-action visitation of a policy.
#[pyfunction]
fn compute_occupancy(mdp: PyRef<'_, Mdp>, policy: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
    let occ = mdp::compute_occupancy(&mdp.inner, &policy_from_lists(policy)?).map_err(err)?;
    Ok(from_array2(&occ.rho))
}

/// `KL(rho_pi || rho_e)` with entries clamped up to `floor`.
#[pyfunction]
fn reverse_kl(rho_pi: Vec<Vec<f64>>, rho_e: Vec<Vec<f64>>, floor: f64) -> PyResult<f64> {
    Ok(trirl::reward::reverse_kl(
        &occupancy_from_lists(rho_pi)?,
        &occupancy_from_lists(rho_e)?,
        floor,
    ))
}

/// One expected-KL-constrained policy step. Returns
/// `(policy, eta, expected_kl, active)`.
#[pyfunction]
fn trust_region_step(
    mdp: PyRef<'_, Mdp>,
    reward: Vec<Vec<f64>>,
    prev_policy: Vec<Vec<f64>>,
    zeta: f64,
    kl_tol: f64,
) -> PyResult<(Vec<Vec<f64>>, f64, f64, bool)> {
    let res = solver::solve_trust_region(
        &mdp.inner,
        &to_array2(reward)?,
        &policy_from_lists(prev_policy)?,
        zeta,
        kl_tol,
    )
    .map_err(err)?;
    Ok((
        from_array2(&res.policy.probs),
        res.eta,
        res.expected_kl,
        res.active,
    ))
}

/// The corrected trust-region IRL loop. `config_json` holds experiment
/// settings (same schema as the CLI's `experiment` section; `{}` uses
/// defaults). Returns a dict with the per-iteration records, final
/// tables, and run counters.
#[pyfunction]
fn run_trirl(
    py: Python<'_>,
    mdp: PyRef<'_, Mdp>,
    rho_e: Vec<Vec<f64>>,
    config_json: &str,
) -> PyResult<Py<PyDict>> {
    let cfg: ExperimentConfig =
        serde_json::from_str(config_json).map_err(|e| PyValueError::new_err(e.to_string()))?;
    cfg.validate().map_err(err)?;
    let result =
        driver::run_trirl(&mdp.inner, &occupancy_from_lists(rho_e)?, &cfg).map_err(err)?;

    let records = PyList::empty(py);
    for r in &result.records {
        let rd = PyDict::new(py);
        rd.set_item("iter", r.iter)?;
        rd.set_item("dual", r.dual_value)?;
        rd.set_item("reverse_kl", r.reverse_kl)?;
        rd.set_item("eta", r.eta)?;
        rd.set_item("eps_tr", r.epsilon_tr)?;
        rd.set_item("expected_kl", r.expected_kl)?;
        rd.set_item("align_lhs", r.alignment_lhs)?;
        rd.set_item("align_rhs", r.alignment_rhs)?;
        rd.set_item("thm1_residual", r.theorem1_residual)?;
        rd.set_item("wall_ms", r.wall_ms)?;
        records.append(rd)?;
    }
    let out = PyDict::new(py);
    out.set_item("records", records)?;
    out.set_item("final_reward", from_array2(&result.final_reward.table))?;
    out.set_item("final_policy", from_array2(&result.final_policy.probs))?;
    out.set_item("converged", result.converged)?;
    out.set_item("dual_violations", result.dual_violations)?;
    out.set_item("total_inner_sweeps", result.total_inner_sweeps)?;
    out.set_item("reward_validity", result.reward_validity)?;
    Ok(out.unbind())
}

/// Project a predicted Gaussian into separate mean/covariance KL bounds
/// around an old one. Returns
/// `(mean, cov, eta_mu, eta_sigma, d_mean, d_cov)`.
#[pyfunction]
fn project_gaussian(
    mean_pred: Vec<f64>,
    cov_pred: Vec<Vec<f64>>,
    mean_old: Vec<f64>,
    cov_old: Vec<Vec<f64>>,
    zeta_mu: f64,
    zeta_sigma: f64,
) -> PyResult<(Vec<f64>, Vec<Vec<f64>>, f64, f64, f64, f64)> {
    let pred = GaussianParams::new(to_array1(mean_pred), to_array2(cov_pred)?).map_err(err)?;
    let old = GaussianParams::new(to_array1(mean_old), to_array2(cov_old)?).map_err(err)?;
    let res = trpl::project(&pred, &old, zeta_mu, zeta_sigma).map_err(err)?;
    Ok((
        res.projected.mean.to_vec(),
        from_array2(&res.projected.cov),
        res.eta_mu,
        res.eta_sigma,
        res.d_mean_after,
        res.d_cov_after,
    ))
}

#[pymodule]
fn trirl_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Mdp>()?;
    m.add_function(wrap_pyfunction!(goal_reward_table, m)?)?;
    m.add_function(wrap_pyfunction!(soft_value_iteration, m)?)?;
    m.add_function(wrap_pyfunction!(compute_occupancy, m)?)?;
    m.add_function(wrap_pyfunction!(reverse_kl, m)?)?;
    m.add_function(wrap_pyfunction!(trust_region_step, m)?)?;
    m.add_function(wrap_pyfunction!(run_trirl, m)?)?;
    m.add_function(wrap_pyfunction!(project_gaussian, m)?)?;
    Ok(())
}
