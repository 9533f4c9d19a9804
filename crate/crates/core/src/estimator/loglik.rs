//! Gaussian pseudo log-likelihood `-1/2 [(y - mu)' Sigma^{-1} (y - mu) + log det Sigma]`.
//!
//! Two exact evaluators: a dense Cholesky factorization, and an `O(T J^2)`
//! factorization that uses the exponential-sum form of the off-diagonal
//! covariance, `Sigma_{t s} = sum_j u_{t j} v_{s j} phi_j^{t - s}` for `t > s`.

#[allow(unused_imports)]
use num_traits::Float;
use alloc::vec;
use alloc::vec::Vec;

use nalgebra::DMatrix;

use super::EstimatorError;
use crate::inner::CameraModel;
use crate::moments::{mean_trace_unchecked, moment_set, SecondOrderParams};

/// Relative jitter levels tried after a failed factorization.
const JITTER: [f64; 2] = [1e-10, 1e-8];

/// Dense evaluation from the assembled mean and covariance.
pub fn loglik_dense(mu: &[f64], sigma: &DMatrix<f64>, y: &[f64]) -> Result<f64, EstimatorError> {
    let t_len = y.len();
    let resid = nalgebra::DVector::from_iterator(t_len, y.iter().zip(mu).map(|(a, b)| a - b));
    let trace = sigma.trace();
    let mut attempt = sigma.clone();
    for level in 0..=JITTER.len() {
        if level > 0 {
            let eps = JITTER[level - 1] * trace / t_len as f64;
            attempt = sigma.clone();
            for i in 0..t_len {
                attempt[(i, i)] += eps;
            }
        }
        if let Some(chol) = attempt.clone().cholesky() {
            let l = chol.l_dirty();
            let log_det: f64 = (0..t_len).map(|i| 2.0 * l[(i, i)].ln()).sum();
            let z = chol.l().solve_lower_triangular(&resid).expect("non-singular factor");
            let quad = z.norm_squared();
            return Ok(-0.5 * (quad + log_det));
        }
    }
    Err(EstimatorError::SigmaNotPD)
}

/// Pseudo log-likelihood of `y` under `gamma`, dense factorization.
pub fn pseudo_loglik(gamma: &SecondOrderParams, camera: &CameraModel, y: &[f64]) -> Result<f64, EstimatorError> {
    let report = crate::moments::check_constraints(gamma);
    if report.max_abs() > 1e-6 {
        return Err(EstimatorError::ConstraintViolation(alloc::format!("{report:?}")));
    }
    let ms = moment_set(gamma, camera, y.len())?;
    loglik_dense(&ms.mu, &ms.sigma, y)
}

/// Structured representation of `Sigma(gamma)` and `mu(gamma)`.
pub struct StructuredSigma {
    pub mu: Vec<f64>,
    pub diag: Vec<f64>,
    /// decay factor per term
    pub phi: Vec<f64>,
    /// `u_{t j}`, row-major with one row per frame
    pub u: Vec<f64>,
    /// `v_{s j}`, same layout
    pub v: Vec<f64>,
    /// smallest background variance over the frames
    pub background_min: f64,
}

impl StructuredSigma {
    /// Assumes `gamma` satisfies the constraints.
    pub fn new(gamma: &SecondOrderParams, camera: &CameraModel, t_len: usize) -> Self {
        let mu = mean_trace_unchecked(gamma, t_len);
        let m = gamma.m;
        let th = gamma.theta;
        let q00 = gamma.q00;
        let c_lag = th.theta2 - q00 * (1.0 - th.theta2) / (1.0 - q00);
        let c_next = (1.0 - th.theta2) / (1.0 - q00);

        // c_lag mu0_k + c_next mu0_{k+1} = sum_x g_x lambda_x^k
        let mut terms: Vec<(f64, f64)> = Vec::new();
        for (&l, &a) in gamma.lambda.iter().zip(&gamma.alpha0) {
            if a == 0.0 {
                continue;
            }
            let g = m * th.theta1 * a * (c_lag + c_next * l) / l;
            if let Some(t) = terms.iter_mut().find(|t| (t.0 - l).abs() < 1e-12) {
                t.1 += g;
            } else {
                terms.push((l, g));
            }
        }
        let j = terms.len() + 1;
        let mut phi: Vec<f64> = terms.iter().map(|t| t.0).collect();
        phi.push(1.0);
        let mut u = vec![0.0; j * t_len];
        let mut v = vec![0.0; j * t_len];
        let mut diag = vec![0.0; t_len];
        for t in 0..t_len {
            let (ut, vt) = (&mut u[t * j..(t + 1) * j], &mut v[t * j..(t + 1) * j]);
            for (k, term) in terms.iter().enumerate() {
                ut[k] = 1.0;
                vt[k] = term.1 * mu[t] / m;
            }
            ut[j - 1] = mu[t];
            vt[j - 1] = -mu[t] / m;
            diag[t] = (m * th.theta1 * (th.theta3 + 1.0) + m * camera.f2 - mu[t]) * mu[t] / m
                + camera.normalized_background_var(t);
        }
        let background_min =
            (0..t_len).map(|t| camera.normalized_background_var(t)).fold(f64::INFINITY, f64::min);
        StructuredSigma { mu, diag, phi, u, v, background_min }
    }

    /// Dense `Sigma`, for checks.
    pub fn to_dense(&self) -> DMatrix<f64> {
        let t_len = self.diag.len();
        let j = self.phi.len();
        let mut s = DMatrix::<f64>::zeros(t_len, t_len);
        for t in 0..t_len {
            s[(t, t)] = self.diag[t];
            for r in 0..t {
                let val: f64 = (0..j)
                    .map(|k| self.u[t * j + k] * self.v[r * j + k] * self.phi[k].powi((t - r) as i32))
                    .sum();
                s[(t, r)] = val;
                s[(r, t)] = val;
            }
        }
        s
    }

    /// `(quadratic form, log det)` through an `L D L'` factorization, or `None`
    /// if a pivot does not exceed `floor`.
    fn factor_solve(&self, y: &[f64], jitter: f64, floor: f64) -> Option<(f64, f64)> {
        let t_len = self.diag.len();
        let j = self.phi.len();
        let mut s = vec![0.0; j * j];
        let mut w = vec![0.0; j];
        let mut f = vec![0.0; j];
        let mut su = vec![0.0; j];
        let mut d_prev = 0.0;
        let mut z_prev = 0.0;
        let mut quad = 0.0;
        let mut log_det = 0.0;
        // pivots are multiplied in blocks of 16 before taking the log
        let mut det_block = 1.0;
        for t in 0..t_len {
            if t > 0 {
                for a in 0..j {
                    for b in a..j {
                        let val = self.phi[a] * self.phi[b] * (s[a * j + b] + d_prev * w[a] * w[b]);
                        s[a * j + b] = val;
                        s[b * j + a] = val;
                    }
                    f[a] = self.phi[a] * (f[a] + w[a] * z_prev);
                }
            }
            let ut = &self.u[t * j..(t + 1) * j];
            let vt = &self.v[t * j..(t + 1) * j];
            let mut ustu = 0.0;
            let mut uf = 0.0;
            for a in 0..j {
                let row = &s[a * j..(a + 1) * j];
                su[a] = row.iter().zip(ut).map(|(x, y)| x * y).sum();
                ustu += ut[a] * su[a];
                uf += ut[a] * f[a];
            }
            let d = self.diag[t] + jitter - ustu;
            if !(d > floor) || !d.is_finite() {
                return None;
            }
            for a in 0..j {
                w[a] = (vt[a] - su[a]) / d;
            }
            let z = y[t] - self.mu[t] - uf;
            quad += z * z / d;
            det_block *= d;
            if t % 16 == 15 {
                log_det += det_block.ln();
                det_block = 1.0;
            }
            d_prev = d;
            z_prev = z;
        }
        log_det += det_block.ln();
        Some((quad, log_det))
    }

    /// Without jitter, and only for covariances a signal plus background can
    /// have. Such a covariance minus the smallest background variance is still
    /// positive semidefinite, which the first factorization tests.
    pub fn loglik_strict(&self, y: &[f64]) -> Result<f64, EstimatorError> {
        let shift = self.background_min * (1.0 - 1e-9);
        if shift > 0.0 && self.factor_solve(y, -shift, 0.0).is_none() {
            return Err(EstimatorError::SigmaNotPD);
        }
        self.factor_solve(y, 0.0, 0.0)
            .map(|(quad, log_det)| -0.5 * (quad + log_det))
            .ok_or(EstimatorError::SigmaNotPD)
    }

    /// With the jitter escalation of the dense evaluator.
    pub fn loglik(&self, y: &[f64]) -> Result<f64, EstimatorError> {
        let t_len = self.diag.len();
        let trace: f64 = self.diag.iter().sum();
        for level in 0..=JITTER.len() {
            let jitter = if level == 0 { 0.0 } else { JITTER[level - 1] * trace / t_len as f64 };
            if let Some((quad, log_det)) = self.factor_solve(y, jitter, 0.0) {
                return Ok(-0.5 * (quad + log_det));
            }
        }
        Err(EstimatorError::SigmaNotPD)
    }
}

/// Pseudo log-likelihood through the structured factorization.
pub fn pseudo_loglik_fast(gamma: &SecondOrderParams, camera: &CameraModel, y: &[f64]) -> Result<f64, EstimatorError> {
    StructuredSigma::new(gamma, camera, y.len()).loglik(y)
}
