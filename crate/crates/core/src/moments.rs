//! Closed-form mean and covariance of the observed multi-molecule trace, the
//! α-coefficient constraints, and matrix-power reference implementations.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::inner::{CameraModel, ThetaParams};
use crate::markov::{build_matrices, MarkovError, OuterModelSpec, SpectralDecomposition};

/// Largest bright-stay probability accepted by the covariance formulas.
pub const MAX_Q00: f64 = 1.0 - 1e-6;
/// Constraint tolerance for parameters entering the moment formulas.
pub const INPUT_TOL: f64 = 1e-6;
const MERGE_TOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub enum MomentsError {
    ComplexSpectrum,
    ConstraintViolation(String),
    InvalidInput(String),
    Markov(MarkovError),
}

impl fmt::Display for MomentsError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MomentsError::ComplexSpectrum => write!(f, "spectrum of M is not real"),
            MomentsError::ConstraintViolation(msg) => write!(f, "constraint violated: {msg}"),
            MomentsError::InvalidInput(msg) => write!(f, "invalid input: {msg}"),
            MomentsError::Markov(e) => write!(f, "{e}"),
        }
    }
}

impl From<MarkovError> for MomentsError {
    fn from(e: MarkovError) -> Self {
        MomentsError::Markov(e)
    }
}

/// Moment-level parameter vector γ.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SecondOrderParams {
    pub m: f64,
    pub nu0: f64,
    pub q00: f64,
    pub lambda: Vec<f64>,
    pub alpha0: Vec<f64>,
    pub alpha1: Vec<f64>,
    pub theta: ThetaParams,
}

impl SecondOrderParams {
    pub fn r(&self) -> usize {
        self.lambda.len().saturating_sub(1)
    }

    /// Coefficients of the mean, `nu0 alpha0 + (1 - nu0) alpha1`.
    pub fn alpha(&self) -> Vec<f64> {
        self.alpha0
            .iter()
            .zip(&self.alpha1)
            .map(|(a0, a1)| self.nu0 * a0 + (1.0 - self.nu0) * a1)
            .collect()
    }

    pub fn validate(&self) -> Result<(), MomentsError> {
        let n = self.lambda.len();
        if n < 2 || self.alpha0.len() != n || self.alpha1.len() != n {
            return Err(MomentsError::InvalidInput(format!(
                "lambda, alpha0, alpha1 must share a length >= 2 (got {}, {}, {})",
                n,
                self.alpha0.len(),
                self.alpha1.len()
            )));
        }
        if !(self.m > 0.0 && self.m.is_finite()) {
            return Err(MomentsError::InvalidInput(format!("m = {} must be positive", self.m)));
        }
        if !(0.0..=1.0).contains(&self.nu0) {
            return Err(MomentsError::InvalidInput(format!("nu0 = {} outside [0, 1]", self.nu0)));
        }
        if !(self.q00 > 0.0 && self.q00 < 1.0) {
            return Err(MomentsError::ConstraintViolation(format!("q00 = {} outside (0, 1)", self.q00)));
        }
        if self.q00 > MAX_Q00 {
            return Err(MomentsError::ConstraintViolation(format!(
                "q00 = {} closer to 1 than {:e}",
                self.q00,
                1.0 - MAX_Q00
            )));
        }
        if (self.lambda[n - 1] - 1.0).abs() > 1e-12 {
            return Err(MomentsError::ConstraintViolation("last eigenvalue must be 1".into()));
        }
        if let Some(l) = self.lambda.iter().find(|&&l| !(l > 0.0 && l <= 1.0 + 1e-12)) {
            return Err(MomentsError::ConstraintViolation(format!("eigenvalue {l} outside (0, 1]")));
        }
        let th = &self.theta;
        if !(th.theta1 > 0.0 && th.theta1.is_finite()) {
            return Err(MomentsError::InvalidInput("theta1 must be positive".into()));
        }
        if !(th.theta2 > 0.0 && th.theta2 < 1.0) {
            return Err(MomentsError::InvalidInput("theta2 must lie in (0, 1)".into()));
        }
        if !(th.theta3 >= -1.0 && th.theta3.is_finite()) {
            return Err(MomentsError::InvalidInput("theta3 must be at least -1".into()));
        }
        let report = check_constraints(self);
        if report.max_abs() > INPUT_TOL {
            return Err(MomentsError::ConstraintViolation(format!("{report:?}")));
        }
        Ok(())
    }
}

/// Residuals of the α-constraints.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConstraintReport {
    /// `sum alpha0 - 1`
    pub sum_alpha0: f64,
    /// `sum alpha0 / lambda - 1 / q00`
    pub inv_alpha0: f64,
    /// `sum alpha1 / lambda`
    pub inv_alpha1: f64,
    /// distance of `q00 sum alpha1` from `[0, 1]`
    pub range_alpha1: f64,
    /// `|alpha0_r| + |alpha1_r|`
    pub bleached: f64,
    pub passed: bool,
}

impl ConstraintReport {
    pub fn max_abs(&self) -> f64 {
        [self.sum_alpha0, self.inv_alpha0, self.inv_alpha1, self.range_alpha1, self.bleached]
            .iter()
            .fold(0.0f64, |acc, v| acc.max(v.abs()))
    }
}

pub fn check_constraints(gamma: &SecondOrderParams) -> ConstraintReport {
    let n = gamma.lambda.len().min(gamma.alpha0.len()).min(gamma.alpha1.len());
    let lam = &gamma.lambda[..n];
    let a0 = &gamma.alpha0[..n];
    let a1 = &gamma.alpha1[..n];
    let sum_alpha0 = a0.iter().sum::<f64>() - 1.0;
    let inv_alpha0 = a0.iter().zip(lam).map(|(a, l)| a / l).sum::<f64>() - 1.0 / gamma.q00;
    let inv_alpha1 = a1.iter().zip(lam).map(|(a, l)| a / l).sum::<f64>();
    let s1 = gamma.q00 * a1.iter().sum::<f64>();
    let range_alpha1 = if s1 < 0.0 { -s1 } else if s1 > 1.0 { s1 - 1.0 } else { 0.0 };
    let bleached = if n > 0 { a0[n - 1].abs() + a1[n - 1].abs() } else { 0.0 };
    let mut report =
        ConstraintReport { sum_alpha0, inv_alpha0, inv_alpha1, range_alpha1, bleached, passed: false };
    report.passed = report.max_abs() < 1e-8 && n == gamma.lambda.len();
    report
}

#[derive(Debug, Clone, PartialEq)]
pub struct Alphas {
    pub alpha: Vec<f64>,
    pub alpha0: Vec<f64>,
    pub alpha1: Vec<f64>,
}

fn alpha_for(decomp: &SpectralDecomposition, q00: f64, nu: &[f64]) -> Vec<f64> {
    let n = decomp.lambda.len();
    (0..n)
        .map(|x| {
            let s: f64 = (0..n).map(|z| decomp.v_inv[(x, z)].re * nu[z]).sum();
            decomp.v[(0, x)].re * decomp.lambda[x].re / q00 * s
        })
        .collect()
}

pub fn alpha_from_model(spec: &OuterModelSpec, decomp: &SpectralDecomposition) -> Result<Alphas, MomentsError> {
    if !decomp.is_real {
        return Err(MomentsError::ComplexSpectrum);
    }
    let n = spec.n_states();
    if decomp.lambda.len() != n {
        return Err(MomentsError::InvalidInput("decomposition dimension differs from model".into()));
    }
    let q00 = spec.q00();
    if !(q00 > 0.0 && q00 < 1.0) {
        return Err(MomentsError::ConstraintViolation(format!("q00 = {q00} outside (0, 1)")));
    }
    let alpha = alpha_for(decomp, q00, &spec.nu);
    let mut e0 = vec![0.0; n];
    e0[0] = 1.0;
    let alpha0 = alpha_for(decomp, q00, &e0);
    let nu0 = spec.nu[0];
    let alpha1 = if nu0 < 1.0 {
        let mut rest: Vec<f64> = spec.nu.iter().map(|v| v / (1.0 - nu0)).collect();
        rest[0] = 0.0;
        alpha_for(decomp, q00, &rest)
    } else {
        vec![0.0; n]
    };
    Ok(Alphas { alpha, alpha0, alpha1 })
}

/// γ of an explicit outer model with the given θ and molecule count.
pub fn second_order_from_model(
    spec: &OuterModelSpec,
    theta: ThetaParams,
    m: f64,
) -> Result<SecondOrderParams, MomentsError> {
    let mats = build_matrices(spec)?;
    let decomp = crate::markov::spectral_decompose(&mats.full)?;
    let alphas = alpha_from_model(spec, &decomp)?;
    Ok(SecondOrderParams {
        m,
        nu0: spec.nu[0],
        q00: spec.q00(),
        lambda: decomp.lambda.iter().map(|l| l.re).collect(),
        alpha0: alphas.alpha0,
        alpha1: alphas.alpha1,
        theta,
    })
}

/// Merges eigenvalues closer than `MERGE_TOL` by summing their coefficients.
fn merged_terms(lambda: &[f64], coeffs: &[f64]) -> Vec<(f64, f64)> {
    let mut terms: Vec<(f64, f64)> = Vec::with_capacity(lambda.len());
    for (&l, &c) in lambda.iter().zip(coeffs) {
        if let Some(t) = terms.iter_mut().find(|t| (t.0 - l).abs() < MERGE_TOL) {
            t.1 += c;
        } else {
            terms.push((l, c));
        }
    }
    terms
}

/// `scale * sum_x c_x lambda_x^(t-1)` for `t = 1..=len`.
fn exp_sum(lambda: &[f64], coeffs: &[f64], scale: f64, len: usize) -> Vec<f64> {
    let terms = merged_terms(lambda, coeffs);
    let mut powers: Vec<f64> = vec![1.0; terms.len()];
    let mut out = Vec::with_capacity(len);
    for _ in 0..len {
        let s: f64 = terms.iter().zip(&powers).map(|(t, p)| t.1 * p).sum();
        out.push(scale * s);
        for (p, t) in powers.iter_mut().zip(&terms) {
            *p *= t.0;
        }
    }
    out
}

fn clamp_tiny_negative(mu: &mut [f64]) {
    let peak = mu.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    let threshold = 1e-12 * peak;
    for v in mu.iter_mut() {
        if *v < 0.0 && -*v <= threshold {
            *v = 0.0;
        }
    }
}

/// Expected trace `mu_t`, `t = 1..=T`.
pub fn mean_trace(gamma: &SecondOrderParams, t_len: usize) -> Result<Vec<f64>, MomentsError> {
    gamma.validate()?;
    Ok(mean_trace_unchecked(gamma, t_len))
}

pub(crate) fn mean_trace_unchecked(gamma: &SecondOrderParams, t_len: usize) -> Vec<f64> {
    let scale = gamma.m * gamma.theta.theta1;
    let mut mu = exp_sum(&gamma.lambda, &gamma.alpha(), scale, t_len);
    clamp_tiny_negative(&mut mu);
    mu
}

/// Expected trace for an initially bright population, `t = 1..=len`.
pub fn bright_start_mean(gamma: &SecondOrderParams, len: usize) -> Vec<f64> {
    exp_sum(&gamma.lambda, &gamma.alpha0, gamma.m * gamma.theta.theta1, len)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MomentSet {
    pub mu: Vec<f64>,
    /// Bright-start mean through lag `T + 1` (index 0 is `t = 1`).
    pub mu0: Vec<f64>,
    pub sigma: DMatrix<f64>,
}

pub fn covariance(gamma: &SecondOrderParams, camera: &CameraModel, t_len: usize) -> Result<DMatrix<f64>, MomentsError> {
    Ok(moment_set(gamma, camera, t_len)?.sigma)
}

pub fn moment_set(gamma: &SecondOrderParams, camera: &CameraModel, t_len: usize) -> Result<MomentSet, MomentsError> {
    gamma.validate()?;
    camera.validate().map_err(|e| MomentsError::InvalidInput(format!("{e}")))?;
    if t_len == 0 {
        return Err(MomentsError::InvalidInput("T must be at least 1".into()));
    }
    Ok(moment_set_unchecked(gamma, camera, t_len))
}

/// Moment assembly without validation, for callers that guarantee the constraints.
pub fn moment_set_unchecked(gamma: &SecondOrderParams, camera: &CameraModel, t_len: usize) -> MomentSet {
    let mu = mean_trace_unchecked(gamma, t_len);
    let mu0 = bright_start_mean(gamma, t_len + 1);
    let m = gamma.m;
    let ThetaParams { theta1, theta2, theta3 } = gamma.theta;
    let q00 = gamma.q00;
    let c_lag = theta2 - q00 * (1.0 - theta2) / (1.0 - q00);
    let c_next = (1.0 - theta2) / (1.0 - q00);
    let mut sigma = DMatrix::<f64>::zeros(t_len, t_len);
    for t in 0..t_len {
        let diag = (m * theta1 * (theta3 + 1.0) + m * camera.f2 - mu[t]) * mu[t] / m
            + camera.normalized_background_var(t);
        sigma[(t, t)] = diag;
        for s in 0..t {
            let lag = t - s;
            // mu0 index lag - 1 holds the value at time `lag`
            let v = (c_lag * mu0[lag - 1] + c_next * mu0[lag] - mu[t]) * mu[s] / m;
            sigma[(t, s)] = v;
            sigma[(s, t)] = v;
        }
    }
    MomentSet { mu, mu0, sigma }
}

/// Mean through repeated multiplication by `M`, no eigendecomposition.
pub fn matrix_power_mean(spec: &OuterModelSpec, theta1: f64, m: f64, t_len: usize) -> Result<Vec<f64>, MomentsError> {
    let mats = build_matrices(spec)?;
    let q00 = spec.q00();
    if !(q00 > 0.0) {
        return Err(MomentsError::ConstraintViolation("q00 must be positive".into()));
    }
    let mut state = DVector::from_column_slice(&spec.nu);
    let mut out = Vec::with_capacity(t_len);
    for _ in 0..t_len {
        state = &mats.full * state;
        out.push(m * theta1 / q00 * state[0]);
    }
    Ok(out)
}

/// Covariance through matrix powers: `E[Y_t Y_t'] = beta_{t-t'} mu_t'` with
/// `beta_k = (M^k w)_0 / q00` and `w` the expected emission split by destination.
pub fn matrix_moment_covariance(
    spec: &OuterModelSpec,
    theta: &ThetaParams,
    m: f64,
    camera: &CameraModel,
    t_len: usize,
) -> Result<DMatrix<f64>, MomentsError> {
    let mats = build_matrices(spec)?;
    let q00 = spec.q00();
    if !(q00 > 0.0 && q00 <= MAX_Q00) {
        return Err(MomentsError::ConstraintViolation(format!("q00 = {q00} outside (0, 1 - 1e-6]")));
    }
    let n = spec.n_states();
    let ThetaParams { theta1, theta2, theta3 } = *theta;
    let single = matrix_power_mean(spec, theta1, 1.0, t_len)?;

    let mut w = DVector::<f64>::zeros(n);
    w[0] = theta1 * theta2;
    for x in 1..n {
        w[x] = theta1 * (1.0 - theta2) / (1.0 - q00) * spec.q[x][0];
    }
    let mut beta = Vec::with_capacity(t_len);
    let mut state = w;
    for _ in 0..t_len {
        state = &mats.full * state;
        beta.push(state[0] / q00);
    }

    let mut sigma = DMatrix::<f64>::zeros(t_len, t_len);
    for t in 0..t_len {
        let mu = single[t];
        let single_var = (theta1 * (theta3 + 1.0) + 1.0) * mu - mu * mu;
        sigma[(t, t)] =
            m * single_var + (camera.f2 - 1.0) * m * mu + camera.normalized_background_var(t);
        for s in 0..t {
            let v = m * (beta[t - s - 1] * single[s] - single[t] * single[s]);
            sigma[(t, s)] = v;
            sigma[(s, t)] = v;
        }
    }
    Ok(sigma)
}
