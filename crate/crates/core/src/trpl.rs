//! Gaussian trust-region projection: KL decomposition, closed-form mean
//! projection, and precision-interpolation covariance projection.
//!
//! The reverse KL between `N(mu_new, S_new)` and `N(mu_old, S_old)` splits
//! into a mean part and a covariance part,
//!
//! ```text
//! d_mean = 1/2 (mu_new - mu_old)^T S_old^-1 (mu_new - mu_old)
//! d_cov  = 1/2 (log det(S_old)/det(S_new) + tr(S_old^-1 S_new) - d),
//! ```
//!
//! each constrained by its own bound. The mean projection is closed-form:
//! with multiplier `eta = sqrt(d_mean / zeta) - 1`, the interpolated mean
//! `(mu_pred + eta * mu_old) / (1 + eta)` scales the offset by `1/(1+eta)`
//! and hence lands exactly on `d_mean = zeta`. The covariance projection
//! interpolates precisions, `L(eta) = (eta * L_old + L_pred) / (eta + 1)`;
//! along that segment `d_cov` is convex with its minimum (zero) at the
//! `L_old` endpoint, so it decreases monotonically in `eta` and a
//! bracket-and-bisect scalar solve finds the bound crossing.

use crate::error::{Result, TrirlError};
use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

/// A Gaussian's mean and (symmetric positive-definite) covariance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianParams {
    pub mean: Array1<f64>,
    pub cov: Array2<f64>,
}

impl GaussianParams {
    pub fn new(mean: Array1<f64>, cov: Array2<f64>) -> Result<Self> {
        let d = mean.len();
        if cov.dim() != (d, d) {
            return Err(TrirlError::ShapeMismatch(format!(
                "mean has dimension {d} but covariance is {:?}",
                cov.dim()
            )));
        }
        if mean.iter().chain(cov.iter()).any(|v| !v.is_finite()) {
            return Err(TrirlError::InvalidArgument(
                "Gaussian parameters must be finite".into(),
            ));
        }
        let scale = cov.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        for i in 0..d {
            for j in (i + 1)..d {
                if (cov[[i, j]] - cov[[j, i]]).abs() > 1e-12 * (1.0 + scale) {
                    return Err(TrirlError::NotSpd(format!(
                        "covariance asymmetric at ({i},{j})"
                    )));
                }
            }
        }
        cholesky(&cov)?;
        Ok(Self { mean, cov })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// Outcome of projecting a predicted Gaussian into the trust region of an
/// old one. Multipliers are zero when the respective constraint was slack.
#[derive(Debug, Clone)]
pub struct ProjectionResult {
    pub projected: GaussianParams,
    pub eta_mu: f64,
    pub eta_sigma: f64,
    pub d_mean_after: f64,
    pub d_cov_after: f64,
}

fn to_na(m: &Array2<f64>) -> nalgebra::DMatrix<f64> {
    nalgebra::DMatrix::from_row_iterator(m.nrows(), m.ncols(), m.iter().cloned())
}

fn from_na(m: &nalgebra::DMatrix<f64>) -> Array2<f64> {
    Array2::from_shape_fn((m.nrows(), m.ncols()), |(i, j)| m[(i, j)])
}

fn cholesky(m: &Array2<f64>) -> Result<nalgebra::Cholesky<f64, nalgebra::Dyn>> {
    to_na(m)
        .cholesky()
        .ok_or_else(|| TrirlError::NotSpd("matrix is not positive definite".into()))
}

fn log_det(chol: &nalgebra::Cholesky<f64, nalgebra::Dyn>) -> f64 {
    let l = chol.l_dirty();
    (0..l.nrows()).map(|i| l[(i, i)].ln()).sum::<f64>() * 2.0
}

fn inverse(m: &Array2<f64>) -> Result<Array2<f64>> {
    let chol = cholesky(m)?;
    Ok(from_na(&chol.inverse()))
}

fn mean_component(diff: &Array1<f64>, sigma_old: &Array2<f64>) -> Result<f64> {
    let chol = cholesky(sigma_old)?;
    let b = nalgebra::DVector::from_iterator(diff.len(), diff.iter().cloned());
    let x = chol.solve(&b);
    Ok(0.5 * b.dot(&x))
}

fn cov_component(sigma_new: &Array2<f64>, sigma_old: &Array2<f64>) -> Result<f64> {
    let d = sigma_old.nrows();
    let chol_old = cholesky(sigma_old)?;
    let chol_new = cholesky(sigma_new)?;
    let ratio = log_det(&chol_old) - log_det(&chol_new);
    let x = chol_old.solve(&to_na(sigma_new));
    let trace: f64 = (0..d).map(|i| x[(i, i)]).sum();
    Ok(0.5 * (ratio + trace - d as f64))
}

/// Mean and covariance components of the reverse KL
/// `KL(p_new || p_old)`, evaluating the mean part at the old covariance.
pub fn kl_decompose(p_new: &GaussianParams, p_old: &GaussianParams) -> Result<(f64, f64)> {
    if p_new.dim() != p_old.dim() {
        return Err(TrirlError::ShapeMismatch(format!(
            "dimension {} vs {}",
            p_new.dim(),
            p_old.dim()
        )));
    }
    let diff = &p_new.mean - &p_old.mean;
    let d_mean = mean_component(&diff, &p_old.cov)?;
    let d_cov = cov_component(&p_new.cov, &p_old.cov)?;
    Ok((d_mean, d_cov))
}

/// Project a predicted mean into the `d_mean <= zeta_mu` ball around
/// `mu_old`. Inside the ball the input passes through with multiplier 0;
/// otherwise the closed-form multiplier lands exactly on the bound.
pub fn project_mean(
    mu_pred: &Array1<f64>,
    mu_old: &Array1<f64>,
    sigma_old: &Array2<f64>,
    zeta_mu: f64,
) -> Result<(Array1<f64>, f64)> {
    if !(zeta_mu > 0.0) || !zeta_mu.is_finite() {
        return Err(TrirlError::InvalidArgument(format!(
            "mean bound must be positive and finite, got {zeta_mu}"
        )));
    }
    if mu_pred.len() != mu_old.len() {
        return Err(TrirlError::ShapeMismatch(format!(
            "mean dimension {} vs {}",
            mu_pred.len(),
            mu_old.len()
        )));
    }
    let diff = mu_pred - mu_old;
    let d_mean = mean_component(&diff, sigma_old)?;
    if d_mean <= zeta_mu {
        return Ok((mu_pred.clone(), 0.0));
    }
    let eta = (d_mean / zeta_mu).sqrt() - 1.0;
    let projected = (mu_pred + &(mu_old * eta)) / (1.0 + eta);
    Ok((projected, eta))
}

/// The covariance at multiplier `eta` along the precision interpolation
/// `(eta * Lambda_old + Lambda_pred) / (eta + 1)`.
pub fn interpolate_precision(
    sigma_pred: &Array2<f64>,
    sigma_old: &Array2<f64>,
    eta: f64,
) -> Result<Array2<f64>> {
    let lambda_old = inverse(sigma_old)?;
    let lambda_pred = inverse(sigma_pred)?;
    let blended = (&(&lambda_old * eta) + &lambda_pred) / (eta + 1.0);
    inverse(&blended)
}

const COV_ETA_CAP: f64 = 1e12;

/// Project a predicted covariance into the `d_cov <= zeta_sigma` region
/// around `sigma_old` along the precision interpolation, bisecting the
/// multiplier until the active constraint is tight.
pub fn project_cov(
    sigma_pred: &Array2<f64>,
    sigma_old: &Array2<f64>,
    zeta_sigma: f64,
) -> Result<(Array2<f64>, f64)> {
    if !(zeta_sigma > 0.0) || !zeta_sigma.is_finite() {
        return Err(TrirlError::InvalidArgument(format!(
            "covariance bound must be positive and finite, got {zeta_sigma}"
        )));
    }
    let d0 = cov_component(sigma_pred, sigma_old)?;
    if d0 <= zeta_sigma {
        return Ok((sigma_pred.clone(), 0.0));
    }
    let lambda_old = inverse(sigma_old)?;
    let lambda_pred = inverse(sigma_pred)?;
    let at = |eta: f64| -> Result<(Array2<f64>, f64)> {
        let blended = (&(&lambda_old * eta) + &lambda_pred) / (eta + 1.0);
        let sigma = inverse(&blended)?;
        let d = cov_component(&sigma, sigma_old)?;
        Ok((sigma, d))
    };
    let mut lo = 0.0f64;
    let mut hi = 1.0f64;
    loop {
        let (_, dv) = at(hi)?;
        if dv <= zeta_sigma {
            break;
        }
        lo = hi;
        hi *= 2.0;
        if hi > COV_ETA_CAP {
            return Err(TrirlError::BracketFailure(format!(
                "covariance constraint still above the bound at eta cap {COV_ETA_CAP:e}"
            )));
        }
    }
    let mut best = at(hi)?;
    let mut best_eta = hi;
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        let (sigma, dv) = at(mid)?;
        if (dv - zeta_sigma).abs() <= 1e-12 {
            return Ok((sigma, mid));
        }
        if dv > zeta_sigma {
            lo = mid;
        } else {
            hi = mid;
            best = (sigma, dv);
            best_eta = mid;
        }
        if hi - lo <= f64::EPSILON * hi.max(1.0) {
            break;
        }
    }
    Ok((best.0, best_eta))
}

/// Project both components and report multipliers and realized KL parts.
pub fn project(
    pred: &GaussianParams,
    old: &GaussianParams,
    zeta_mu: f64,
    zeta_sigma: f64,
) -> Result<ProjectionResult> {
    if pred.dim() != old.dim() {
        return Err(TrirlError::ShapeMismatch(format!(
            "dimension {} vs {}",
            pred.dim(),
            old.dim()
        )));
    }
    let (mean, eta_mu) = project_mean(&pred.mean, &old.mean, &old.cov, zeta_mu)?;
    let (cov, eta_sigma) = project_cov(&pred.cov, &old.cov, zeta_sigma)?;
    let projected = GaussianParams::new(mean, cov)?;
    let (d_mean_after, d_cov_after) = kl_decompose(&projected, old)?;
    Ok(ProjectionResult {
        projected,
        eta_mu,
        eta_sigma,
        d_mean_after,
        d_cov_after,
    })
}

/// Batch step-size aggregation: the most conservative multiplier wins.
pub fn aggregate_eta(etas_mu: &[f64], eta_sigma: f64) -> Result<f64> {
    if etas_mu.is_empty() {
        return Err(TrirlError::InvalidArgument(
            "need at least one per-state multiplier".into(),
        ));
    }
    Ok(etas_mu.iter().fold(eta_sigma, |m, e| m.max(*e)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mdp::{TabularMdp, TabularPolicy};
    use crate::solver::solve_trust_region;
    use approx::assert_abs_diff_eq;
    use ndarray::{array, Array3};
    use rand::{RngExt, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn scalar_gauss(mean: f64, var: f64) -> GaussianParams {
        GaussianParams::new(array![mean], array![[var]]).unwrap()
    }

    #[test]
    fn kl_decomposition_worked_values() {
        let old = scalar_gauss(0.0, 1.0);
        let same = kl_decompose(&old, &old).unwrap();
        assert_eq!(same, (0.0, 0.0));

        let shifted = scalar_gauss(2.0, 1.0);
        let (d_mean, d_cov) = kl_decompose(&shifted, &old).unwrap();
        assert_abs_diff_eq!(d_mean, 2.0, epsilon = 1e-14);
        assert_abs_diff_eq!(d_cov, 0.0, epsilon = 1e-14);

        let widened = scalar_gauss(0.0, 2.0);
        let (d_mean, d_cov) = kl_decompose(&widened, &old).unwrap();
        assert_eq!(d_mean, 0.0);
        assert_abs_diff_eq!(d_cov, 0.5 * (1.0 - (2.0f64).ln()), epsilon = 1e-14);
    }

    #[test]
    fn rejects_non_spd_inputs() {
        assert!(GaussianParams::new(array![0.0], array![[-1.0]]).is_err());
        assert!(GaussianParams::new(array![0.0, 0.0], array![[1.0, 0.5], [0.2, 1.0]]).is_err());
        assert!(
            GaussianParams::new(array![0.0, 0.0], array![[1.0, 2.0], [2.0, 1.0]]).is_err(),
            "indefinite matrix accepted"
        );
    }

    #[test]
    fn mean_projection_worked_case_and_identity() {
        let sigma = array![[1.0]];
        let (same, eta) = project_mean(&array![0.5], &array![0.0], &sigma, 0.5).unwrap();
        assert_eq!(same, array![0.5]);
        assert_eq!(eta, 0.0);

        let (proj, eta) = project_mean(&array![2.0], &array![0.0], &sigma, 0.5).unwrap();
        assert_abs_diff_eq!(eta, 1.0, epsilon = 1e-14);
        assert_abs_diff_eq!(proj[0], 1.0, epsilon = 1e-14);
        let after = mean_component(&proj, &sigma).unwrap();
        assert_abs_diff_eq!(after, 0.5, epsilon = 1e-10);

        let (twice, eta2) = project_mean(&proj, &array![0.0], &sigma, 0.5).unwrap();
        assert_eq!(eta2, 0.0);
        assert_eq!(twice, proj);
    }

    #[test]
    fn cov_projection_lands_between_and_tightens() {
        let old = array![[1.0]];
        let (same, eta) = project_cov(&old, &old, 0.01).unwrap();
        assert_eq!(same, old);
        assert_eq!(eta, 0.0);

        let pred = array![[4.0]];
        let (proj, eta) = project_cov(&pred, &old, 0.01).unwrap();
        assert!(eta > 0.0);
        assert!(proj[[0, 0]] > 1.0 && proj[[0, 0]] < 4.0);
        let d = cov_component(&proj, &old).unwrap();
        assert_abs_diff_eq!(d, 0.01, epsilon = 1e-10);
    }

    #[test]
    fn huge_multiplier_recovers_old_covariance() {
        let old = array![[1.0, 0.3], [0.3, 2.0]];
        let pred = array![[5.0, -0.5], [-0.5, 0.4]];
        let sigma = interpolate_precision(&pred, &old, 1e12).unwrap();
        for (a, b) in sigma.iter().zip(old.iter()) {
            assert!((a - b).abs() <= 1e-6);
        }
    }

    fn random_spd(rng: &mut ChaCha8Rng, d: usize) -> Array2<f64> {
        let a = Array2::from_shape_fn((d, d), |_| rng.random::<f64>() * 2.0 - 1.0);
        let mut m = a.dot(&a.t());
        for i in 0..d {
            m[[i, i]] += 0.1;
        }
        m
    }

    #[test]
    fn projection_sweep_bounds_idempotence_tightness() {
        let mut rng = ChaCha8Rng::seed_from_u64(101);
        for &d in &[1usize, 2, 5, 10] {
            for _ in 0..1000 {
                let old = GaussianParams::new(
                    Array1::from_shape_fn(d, |_| rng.random::<f64>() * 2.0 - 1.0),
                    random_spd(&mut rng, d),
                )
                .unwrap();
                let pred = GaussianParams::new(
                    Array1::from_shape_fn(d, |_| rng.random::<f64>() * 4.0 - 2.0),
                    random_spd(&mut rng, d),
                )
                .unwrap();
                let zeta_mu = 10f64.powf(rng.random::<f64>() * 4.0 - 4.0);
                let zeta_sigma = 10f64.powf(rng.random::<f64>() * 4.0 - 4.0);
                let res = project(&pred, &old, zeta_mu, zeta_sigma).unwrap();

                assert!(res.d_mean_after <= zeta_mu + 1e-8, "mean bound violated");
                assert!(res.d_cov_after <= zeta_sigma + 1e-8, "cov bound violated");
                if res.eta_mu > 0.0 {
                    assert!((res.d_mean_after - zeta_mu).abs() <= 1e-8, "mean not tight");
                }
                if res.eta_sigma > 0.0 {
                    assert!((res.d_cov_after - zeta_sigma).abs() <= 1e-8, "cov not tight");
                }

                let again = project(&res.projected, &old, zeta_mu, zeta_sigma).unwrap();
                for (a, b) in again
                    .projected
                    .mean
                    .iter()
                    .chain(again.projected.cov.iter())
                    .zip(res.projected.mean.iter().chain(res.projected.cov.iter()))
                {
                    assert!((a - b).abs() <= 1e-9, "projection not idempotent");
                }
            }
        }
    }

    #[test]
    fn in_region_inputs_pass_through_bit_identically() {
        let old = scalar_gauss(0.0, 1.0);
        let pred = scalar_gauss(0.01, 1.001);
        let res = project(&pred, &old, 0.01, 0.01).unwrap();
        assert_eq!(res.eta_mu, 0.0);
        assert_eq!(res.eta_sigma, 0.0);
        assert_eq!(res.projected.mean[0].to_bits(), pred.mean[0].to_bits());
        assert_eq!(
            res.projected.cov[[0, 0]].to_bits(),
            pred.cov[[0, 0]].to_bits()
        );
    }

    #[test]
    fn eta_aggregation_takes_the_max() {
        assert_eq!(aggregate_eta(&[0.0, 0.0], 0.0).unwrap(), 0.0);
        assert_eq!(aggregate_eta(&[0.2, 1.5], 0.7).unwrap(), 1.5);
        assert_eq!(aggregate_eta(&[2.5], 0.7).unwrap(), 2.5);
        assert!(aggregate_eta(&[], 0.7).is_err());
    }

    #[test]
    fn projection_eta_matches_tabular_trust_region_solve() {
        // One state, actions = a fine grid over [-6, 6], gamma = 0. The
        // reward -(a - mu_pred)^2 / 2 makes the unconstrained soft-optimal
        // policy a discretized N(mu_pred, 1); the previous policy is a
        // discretized N(0, 1). Equal variances keep the covariance
        // constraint inactive, and the tabular in-expectation KL solve and
        // the closed-form Gaussian mean projection must find the same
        // multiplier up to discretization error.
        let n = 201;
        let mu_pred = 1.2;
        let zeta = 0.02;
        let grid: Vec<f64> = (0..n).map(|i| -6.0 + 12.0 * i as f64 / (n - 1) as f64).collect();

        let transition = Array3::from_elem((1, n, 1), 1.0);
        let mdp = TabularMdp::new(transition, array![1.0], 0.0).unwrap();
        let reward =
            Array2::from_shape_fn((1, n), |(_, i)| -(grid[i] - mu_pred).powi(2) / 2.0);
        let mut prev = Array2::zeros((1, n));
        let mut z = 0.0;
        for i in 0..n {
            let p = (-grid[i].powi(2) / 2.0).exp();
            prev[[0, i]] = p;
            z += p;
        }
        prev.mapv_inplace(|v| v / z);
        let prev = TabularPolicy::new(prev).unwrap();

        let res = solve_trust_region(&mdp, &reward, &prev, zeta, zeta * 1e-4).unwrap();
        assert!(res.active);

        let (_, eta_proj) =
            project_mean(&array![mu_pred], &array![0.0], &array![[1.0]], zeta).unwrap();
        assert_abs_diff_eq!(eta_proj, 5.0, epsilon = 1e-12);
        let gap = (res.eta - eta_proj).abs() / eta_proj;
        assert!(
            gap <= 0.05,
            "tabular eta {} vs projection eta {eta_proj} (gap {gap})",
            res.eta
        );
    }
}
