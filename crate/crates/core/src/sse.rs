//! Weighted least squares state estimation and the conventional
//! largest-normalized-residual bad data detector.

use crate::acpf::{
    branch_blocks, measurement_function_with, measurement_jacobian, GridState, Measurements,
    NoiseModel,
};
use crate::case::GridCase;
use crate::graph::build_admittance;
use nalgebra::{DMatrix, DVector};
use thiserror::Error;

/// Output of one estimation run.
#[derive(Debug, Clone)]
pub struct EstimationResult {
    pub x_hat: GridState,
    /// z - h(x_hat), stacked measurement order.
    pub residuals: Vec<f64>,
    /// Weighted objective (z-h)' R^-1 (z-h).
    pub objective: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// Bad data detector verdict.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BddVerdict {
    pub flagged: bool,
    /// Index of the largest normalized residual in stacked order.
    pub worst_index: usize,
    pub worst_value: f64,
}

#[derive(Debug, Error)]
pub enum SseError {
    #[error("state estimation did not converge after {0} iterations")]
    NonConvergence(usize),
    #[error("gain matrix is rank deficient")]
    RankDeficient,
    #[error("residual covariance is degenerate")]
    DegenerateCovariance,
}

const MAX_ITER: usize = 50;
const STEP_TOL: f64 = 1e-8;

/// Gauss-Newton minimization of the weighted squared residual. The slack
/// angle stays fixed; all magnitudes and the remaining angles are free.
/// A step-halving line search keeps the objective non-increasing.
pub fn wlse_estimate(
    z: &Measurements,
    case: &GridCase,
    start: Option<&GridState>,
) -> Result<EstimationResult, SseError> {
    let n = case.n();
    let slack = case.slack();
    let y = build_admittance(case).expect("validated case");
    let blocks = branch_blocks(case);
    let z_vec = DVector::from_vec(z.stack());
    let weights: Vec<f64> = z.sigma.iter().map(|s| 1.0 / (s * s)).collect();
    // Noise model only shapes the sigmas h() would fill in; the residuals
    // use the caller's z and sigma directly.
    let noise = NoiseModel::default();

    let mut state = match start {
        Some(s) => s.clone(),
        None => GridState::flat(case),
    };
    state.va[slack] = case.buses[slack].va_init.to_radians();

    let va_cols: Vec<usize> = (0..n).filter(|&i| i != slack).collect();
    let eval = |s: &GridState| -> (DVector<f64>, f64) {
        let h = DVector::from_vec(measurement_function_with(s, case, noise).stack());
        let r = &z_vec - &h;
        let obj = r
            .iter()
            .zip(&weights)
            .map(|(ri, wi)| wi * ri * ri)
            .sum::<f64>();
        (r, obj)
    };

    let (mut residual, mut objective) = eval(&state);
    let mut converged = false;
    let mut iterations = 0;
    for iter in 1..=MAX_ITER {
        iterations = iter;
        let h_mat = measurement_jacobian(&state, case, &y, &blocks);
        // Normal equations: (H' W H) dx = H' W r
        let mut htw = h_mat.transpose();
        for (c, &w) in weights.iter().enumerate() {
            htw.column_mut(c).scale_mut(w);
        }
        let gain = &htw * &h_mat;
        let rhs = &htw * &residual;
        let Some(delta) = gain.lu().solve(&rhs) else {
            return Err(SseError::RankDeficient);
        };
        if delta.amax() < STEP_TOL {
            converged = true;
            break;
        }

        // Step halving if the full step would increase the objective. The
        // Gauss-Newton direction is a descent direction, so only floating
        // point noise can reject arbitrarily small steps; the acceptance
        // uses relative precision to absorb that.
        let mut alpha = 1.0;
        let mut accepted = false;
        for _ in 0..20 {
            let mut trial = state.clone();
            for (c, &i) in va_cols.iter().enumerate() {
                trial.va[i] += alpha * delta[c];
            }
            for i in 0..n {
                trial.vm[i] += alpha * delta[n - 1 + i];
            }
            let (r_trial, obj_trial) = eval(&trial);
            if obj_trial <= objective * (1.0 + 1e-12) {
                state = trial;
                residual = r_trial;
                objective = obj_trial;
                accepted = true;
                break;
            }
            alpha *= 0.5;
        }
        if !accepted {
            return Err(SseError::NonConvergence(iter));
        }
        if alpha * delta.amax() < STEP_TOL {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(SseError::NonConvergence(iterations));
    }
    Ok(EstimationResult {
        x_hat: state,
        residuals: residual.iter().cloned().collect(),
        objective,
        iterations,
        converged,
    })
}

/// Largest normalized residual test. Residual covariance is
/// `Omega = R - H (H' R^-1 H)^-1 H'`; the verdict flags when
/// `max_i |r_i| / sqrt(Omega_ii)` exceeds the threshold (3.0 by
/// convention). Measurements with non-positive Omega_ii (critical
/// measurements) cannot be tested and are skipped.
pub fn lnrt_bdd(
    res: &EstimationResult,
    z: &Measurements,
    case: &GridCase,
    threshold: f64,
) -> Result<BddVerdict, SseError> {
    let y = build_admittance(case).expect("validated case");
    let blocks = branch_blocks(case);
    let h_mat = measurement_jacobian(&res.x_hat, case, &y, &blocks);
    let m = h_mat.nrows();
    let weights: Vec<f64> = z.sigma.iter().map(|s| 1.0 / (s * s)).collect();

    let mut htw = h_mat.transpose();
    for (c, &w) in weights.iter().enumerate() {
        htw.column_mut(c).scale_mut(w);
    }
    let gain = &htw * &h_mat;
    // Omega_ii = R_ii - h_i' G^-1 h_i with h_i the i-th row of H.
    let Some(gain_inv) = gain.lu().try_inverse() else {
        return Err(SseError::RankDeficient);
    };
    let mut worst = BddVerdict {
        flagged: false,
        worst_index: 0,
        worst_value: 0.0,
    };
    let mut any_testable = false;
    for i in 0..m {
        let hi = h_mat.row(i).transpose();
        let omega_ii = z.sigma[i] * z.sigma[i] - (hi.transpose() * &gain_inv * &hi)[(0, 0)];
        if omega_ii <= 1e-14 {
            continue;
        }
        any_testable = true;
        let rn = res.residuals[i].abs() / omega_ii.sqrt();
        if rn > worst.worst_value {
            worst.worst_value = rn;
            worst.worst_index = i;
        }
    }
    if !any_testable {
        return Err(SseError::DegenerateCovariance);
    }
    worst.flagged = worst.worst_value > threshold;
    Ok(worst)
}
