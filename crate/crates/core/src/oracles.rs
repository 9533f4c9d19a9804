//! Brute-force references: the exact path-sum likelihood, exact moments by
//! enumerating hidden paths, and empirical moments with jackknife errors.

#[allow(unused_imports)]
use num_traits::Float;
use alloc::boxed::Box;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use nalgebra::{DMatrix, DVector};

use crate::inner::{CameraModel, InnerAlexaParams, ThetaParams};
use crate::markov::{build_matrices, MarkovError, OuterModelSpec, TransitionMatrices};
use crate::moments::MomentSet;

#[derive(Debug, Clone, PartialEq)]
pub enum OracleError {
    BudgetExceeded { required: u64, max_paths: u64 },
    InsufficientData(usize),
    LengthMismatch,
    Markov(MarkovError),
}

impl fmt::Display for OracleError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            OracleError::BudgetExceeded { required, max_paths } => {
                write!(f, "{required} hidden paths exceed the budget of {max_paths}")
            }
            OracleError::InsufficientData(n) => write!(f, "need at least 2 traces, got {n}"),
            OracleError::LengthMismatch => write!(f, "traces differ in length"),
            OracleError::Markov(e) => write!(f, "{e}"),
        }
    }
}

impl From<MarkovError> for OracleError {
    fn from(e: MarkovError) -> Self {
        OracleError::Markov(e)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EnumerationBudget {
    pub max_paths: u64,
}

impl Default for EnumerationBudget {
    fn default() -> Self {
        EnumerationBudget { max_paths: 10_000_000 }
    }
}

impl EnumerationBudget {
    /// Number of hidden paths `X_0..X_T`, saturating.
    pub fn paths_needed(n_states: usize, t_len: usize) -> u64 {
        let mut total: u64 = 1;
        for _ in 0..=t_len {
            total = total.saturating_mul(n_states as u64);
        }
        total
    }

    pub fn admit(&self, n_states: usize, t_len: usize) -> Result<u64, OracleError> {
        let required = Self::paths_needed(n_states, t_len);
        if required > self.max_paths {
            return Err(OracleError::BudgetExceeded { required, max_paths: self.max_paths });
        }
        Ok(required)
    }
}

/// Photon count laws during a frame that starts bright: `stay` when the
/// molecule is still bright at the end, `exit` when it left. All other
/// transitions emit nothing.
pub trait PhotonLaw {
    fn pmf_stay(&self, y: u64) -> f64;
    fn pmf_exit(&self, y: u64) -> f64;
    /// `P(Y <= k)` under each law.
    fn cdf_stay(&self, k: u64) -> f64 {
        (0..=k).map(|y| self.pmf_stay(y)).sum()
    }
    fn cdf_exit(&self, k: u64) -> f64 {
        (0..=k).map(|y| self.pmf_exit(y)).sum()
    }
}

/// Exactly `stay` or `exit` photons.
#[derive(Debug, Clone, Copy)]
pub struct DeterministicLaw {
    pub stay: u64,
    pub exit: u64,
}

impl PhotonLaw for DeterministicLaw {
    fn pmf_stay(&self, y: u64) -> f64 {
        if y == self.stay { 1.0 } else { 0.0 }
    }
    fn pmf_exit(&self, y: u64) -> f64 {
        if y == self.exit { 1.0 } else { 0.0 }
    }
}

/// Geometric counts on `{0, 1, ...}`: `P(Y = y) = (1 - rho) rho^y`.
#[derive(Debug, Clone, Copy)]
pub struct GeometricLaw {
    pub rho_stay: f64,
    pub rho_exit: f64,
}

impl GeometricLaw {
    /// Bound on `P(Y > k)` for either law.
    pub fn tail(&self, k: u64) -> f64 {
        self.rho_stay.max(self.rho_exit).powi(k as i32 + 1)
    }
}

impl PhotonLaw for GeometricLaw {
    fn pmf_stay(&self, y: u64) -> f64 {
        (1.0 - self.rho_stay) * self.rho_stay.powi(y as i32)
    }
    fn pmf_exit(&self, y: u64) -> f64 {
        (1.0 - self.rho_exit) * self.rho_exit.powi(y as i32)
    }
}

fn poisson_pmf(rate: f64, y: u64) -> f64 {
    if rate == 0.0 {
        return if y == 0 { 1.0 } else { 0.0 };
    }
    (y as f64 * rate.ln() - rate - ln_factorial(y)).exp()
}

fn ln_factorial(n: u64) -> f64 {
    (1..=n).map(|k| (k as f64).ln()).sum()
}

#[derive(Debug, Clone, Copy)]
pub struct PoissonLaw {
    pub stay: f64,
    pub exit: f64,
}

impl PhotonLaw for PoissonLaw {
    fn pmf_stay(&self, y: u64) -> f64 {
        poisson_pmf(self.stay, y)
    }
    fn pmf_exit(&self, y: u64) -> f64 {
        poisson_pmf(self.exit, y)
    }
}

/// The burst model's conditional photon laws, by summing over burst counts.
#[derive(Debug, Clone)]
pub struct AlexaLaw {
    params: InnerAlexaParams,
    /// `P(B = b | stay)` and `P(B = b | exit)` for `b < len`
    burst_stay: Vec<f64>,
    burst_exit: Vec<f64>,
}

impl AlexaLaw {
    pub fn new(params: InnerAlexaParams) -> Self {
        let q00 = crate::inner::q00_from_inner(&params);
        let reduced = params.q * params.rate;
        let b_max = (params.rate + 12.0 * params.rate.sqrt() + 20.0) as u64;
        let mut burst_stay = Vec::new();
        let mut burst_exit = Vec::new();
        // P(Z > b) accumulated from the Poisson pmf
        let mut z_cdf = 0.0;
        for b in 0..=b_max {
            burst_stay.push(poisson_pmf(reduced, b));
            z_cdf += poisson_pmf(params.rate, b);
            let g = (1.0 - params.q) * params.q.powi(b as i32);
            burst_exit.push(g * (1.0 - z_cdf).max(0.0) / (1.0 - q00));
        }
        AlexaLaw { params, burst_stay, burst_exit }
    }

    fn mix(&self, weights: &[f64], y: u64) -> f64 {
        let p = self.params.p;
        let mut total = if y == 0 { weights[0] } else { 0.0 };
        for (b, w) in weights.iter().enumerate().skip(1) {
            if *w == 0.0 {
                continue;
            }
            // NegBin(b, 1 - p) at y
            let b = b as u64;
            let ln = ln_gamma_int(y + b) - ln_factorial(y) - ln_gamma_int(b)
                + b as f64 * (1.0 - p).ln()
                + y as f64 * p.ln();
            total += w * ln.exp();
        }
        total
    }
}

/// `ln Γ(n) = ln (n-1)!`
fn ln_gamma_int(n: u64) -> f64 {
    ln_factorial(n.saturating_sub(1))
}

impl PhotonLaw for AlexaLaw {
    fn pmf_stay(&self, y: u64) -> f64 {
        self.mix(&self.burst_stay, y)
    }
    fn pmf_exit(&self, y: u64) -> f64 {
        self.mix(&self.burst_exit, y)
    }
}

/// Iterates all index tuples in `{0..n}^len` in lexicographic order.
struct Odometer {
    digits: Vec<usize>,
    base: usize,
    done: bool,
}

impl Odometer {
    fn new(base: usize, len: usize) -> Self {
        Odometer { digits: vec![0; len], base, done: base == 0 }
    }

    fn advance(&mut self) {
        for d in self.digits.iter_mut().rev() {
            *d += 1;
            if *d < self.base {
                return;
            }
            *d = 0;
        }
        self.done = true;
    }
}

/// Emission weight `sum_x' p_{x x'}(y) Ms_{x x'} Ml_{x' z}` of one frame.
fn frame_weight(mats: &TransitionMatrices, law: &dyn PhotonLaw, x: usize, z: usize, y: u64) -> f64 {
    let n = mats.full.nrows();
    let mut w = 0.0;
    for xp in 0..n {
        let trans = mats.short[(x, xp)] * mats.long[(xp, z)];
        if trans == 0.0 {
            continue;
        }
        let p = if xp != 0 {
            if y == 0 { 1.0 } else { 0.0 }
        } else if x == 0 {
            law.pmf_stay(y)
        } else {
            law.pmf_exit(y)
        };
        w += p * trans;
    }
    w
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Likelihood {
    pub value: f64,
    pub log_value: f64,
}

/// Likelihood of an integer photon trace by summing over every hidden path.
pub fn exact_likelihood(
    spec: &OuterModelSpec,
    law: &dyn PhotonLaw,
    y: &[u64],
    budget: EnumerationBudget,
) -> Result<Likelihood, OracleError> {
    let mats = build_matrices(spec)?;
    let n = spec.n_states();
    let t_len = y.len();
    budget.admit(n, t_len)?;

    // per frame and (to, from) pair, the log emission weight
    let mut log_w = vec![vec![vec![f64::NEG_INFINITY; n]; n]; t_len];
    for (t, &yt) in y.iter().enumerate() {
        for x in 0..n {
            for z in 0..n {
                let w = frame_weight(&mats, law, x, z, yt);
                if w > 0.0 {
                    log_w[t][x][z] = w.ln();
                }
            }
        }
    }

    let mut acc = LogSum::default();
    let mut path = Odometer::new(n, t_len + 1);
    while !path.done {
        let x0 = path.digits[0];
        let mut lp = if spec.nu[x0] > 0.0 { spec.nu[x0].ln() } else { f64::NEG_INFINITY };
        for t in 0..t_len {
            if lp == f64::NEG_INFINITY {
                break;
            }
            lp += log_w[t][path.digits[t + 1]][path.digits[t]];
        }
        acc.add(lp);
        path.advance();
    }
    let log_value = acc.value();
    Ok(Likelihood { value: log_value.exp(), log_value })
}

/// Streaming log-sum-exp.
#[derive(Debug, Clone, Copy)]
struct LogSum {
    max: f64,
    scaled: f64,
}

impl Default for LogSum {
    fn default() -> Self {
        LogSum { max: f64::NEG_INFINITY, scaled: 0.0 }
    }
}

impl LogSum {
    fn add(&mut self, v: f64) {
        if v == f64::NEG_INFINITY {
            return;
        }
        if v > self.max {
            self.scaled = self.scaled * (self.max - v).exp() + 1.0;
            self.max = v;
        } else {
            self.scaled += (v - self.max).exp();
        }
    }

    fn value(&self) -> f64 {
        if self.max == f64::NEG_INFINITY {
            f64::NEG_INFINITY
        } else {
            self.max + self.scaled.ln()
        }
    }
}

/// `P(Y_t <= k for all t)` through products of truncated emission matrices.
pub fn truncated_mass(spec: &OuterModelSpec, law: &dyn PhotonLaw, t_len: usize, k: u64) -> Result<f64, OracleError> {
    let mats = build_matrices(spec)?;
    let n = spec.n_states();
    let stay = law.cdf_stay(k);
    let exit = law.cdf_exit(k);
    let mut trunc = DMatrix::<f64>::zeros(n, n);
    for x in 0..n {
        for xp in 0..n {
            let p = if xp != 0 { 1.0 } else if x == 0 { stay } else { exit };
            trunc[(x, xp)] = p * mats.short[(x, xp)];
        }
    }
    let h = trunc * &mats.long;
    let mut state = DVector::from_column_slice(&spec.nu);
    for _ in 0..t_len {
        state = &h * state;
    }
    Ok(state.sum())
}

/// Exact mean and covariance by total expectation over all hidden paths.
///
/// Given the path, frames are independent; a frame entered from `z` and ending
/// in `x` has mean and second moment averaged over the intermediate state.
pub fn enumerate_marginals(
    spec: &OuterModelSpec,
    theta: &ThetaParams,
    m: f64,
    camera: &CameraModel,
    t_len: usize,
    budget: EnumerationBudget,
) -> Result<MomentSet, OracleError> {
    let mats = build_matrices(spec)?;
    let n = spec.n_states();
    budget.admit(n, t_len)?;
    let q00 = spec.q00();
    let ThetaParams { theta1, theta2, theta3 } = *theta;
    let stay_mean = theta1 * theta2 / q00;
    let exit_mean = theta1 * (1.0 - theta2) / (1.0 - q00);
    // only the q00-weighted combination of second moments enters the moments
    let second = theta1 * theta1 * (theta3 + 1.0) + theta1;

    let mut cond_mean = vec![vec![0.0; n]; n];
    let mut cond_second = vec![vec![0.0; n]; n];
    for x in 0..n {
        for z in 0..n {
            let total = mats.full[(x, z)];
            if total == 0.0 {
                continue;
            }
            let emit = mats.short[(x, 0)] * mats.long[(0, z)];
            let mean = if x == 0 { stay_mean } else { exit_mean };
            cond_mean[x][z] = mean * emit / total;
            cond_second[x][z] = second * emit / total;
        }
    }

    let mut mu = vec![0.0; t_len];
    let mut cross = DMatrix::<f64>::zeros(t_len, t_len);
    let mut frame_mean = vec![0.0; t_len];
    let mut path = Odometer::new(n, t_len + 1);
    while !path.done {
        let d = &path.digits;
        let mut prob = spec.nu[d[0]];
        for t in 0..t_len {
            if prob == 0.0 {
                break;
            }
            prob *= mats.full[(d[t + 1], d[t])];
        }
        if prob > 0.0 {
            for t in 0..t_len {
                frame_mean[t] = cond_mean[d[t + 1]][d[t]];
                mu[t] += prob * frame_mean[t];
            }
            for t in 0..t_len {
                cross[(t, t)] += prob * cond_second[d[t + 1]][d[t]];
                for s in 0..t {
                    cross[(t, s)] += prob * frame_mean[t] * frame_mean[s];
                }
            }
        }
        path.advance();
    }

    let mut sigma = DMatrix::<f64>::zeros(t_len, t_len);
    for t in 0..t_len {
        sigma[(t, t)] = m * (cross[(t, t)] - mu[t] * mu[t])
            + (camera.f2 - 1.0) * m * mu[t]
            + camera.normalized_background_var(t);
        for s in 0..t {
            let v = m * (cross[(t, s)] - mu[t] * mu[s]);
            sigma[(t, s)] = v;
            sigma[(s, t)] = v;
        }
    }
    let mu_total: Vec<f64> = mu.iter().map(|v| m * v).collect();

    // bright-start mean for completeness, from matrix powers
    let mut state = DVector::<f64>::zeros(n);
    state[0] = 1.0;
    let mut mu0 = Vec::with_capacity(t_len + 1);
    for _ in 0..=t_len {
        state = &mats.full * state;
        mu0.push(m * theta1 / q00 * state[0]);
    }
    Ok(MomentSet { mu: mu_total, mu0, sigma })
}

/// Sample moments of a set of equal-length traces with standard errors.
#[derive(Debug, Clone, PartialEq)]
pub struct EmpiricalMoments {
    pub n: usize,
    pub mu_hat: Vec<f64>,
    pub mu_se: Vec<f64>,
    pub sigma_hat: DMatrix<f64>,
    /// Jackknife standard errors of the covariance entries.
    pub sigma_se: DMatrix<f64>,
}

pub fn monte_carlo_moments<T: AsRef<[f64]>>(traces: &[T]) -> Result<EmpiricalMoments, OracleError> {
    let n = traces.len();
    if n < 2 {
        return Err(OracleError::InsufficientData(n));
    }
    let t_len = traces[0].as_ref().len();
    if traces.iter().any(|tr| tr.as_ref().len() != t_len) {
        return Err(OracleError::LengthMismatch);
    }
    let nf = n as f64;
    let mut mu_hat = vec![0.0; t_len];
    for tr in traces {
        for (m, v) in mu_hat.iter_mut().zip(tr.as_ref()) {
            *m += v;
        }
    }
    mu_hat.iter_mut().for_each(|m| *m /= nf);

    let mut s = DMatrix::<f64>::zeros(t_len, t_len);
    let mut s2 = DMatrix::<f64>::zeros(t_len, t_len);
    let mut dev: Box<[f64]> = vec![0.0; t_len].into_boxed_slice();
    for tr in traces {
        for (d, (v, m)) in dev.iter_mut().zip(tr.as_ref().iter().zip(&mu_hat)) {
            *d = v - m;
        }
        for j in 0..t_len {
            let dj = dev[j];
            for i in j..t_len {
                let p = dev[i] * dj;
                s[(i, j)] += p;
                s2[(i, j)] += p * p;
            }
        }
    }

    let mut sigma_hat = DMatrix::<f64>::zeros(t_len, t_len);
    let mut sigma_se = DMatrix::<f64>::zeros(t_len, t_len);
    // leave-one-out: C_{-i} = (S - n/(n-1) p_i) / (n - 2)
    let k = nf / (nf - 1.0);
    for j in 0..t_len {
        for i in j..t_len {
            let c = s[(i, j)] / (nf - 1.0);
            let se = if n > 2 {
                let pbar = s[(i, j)] / nf;
                let spread = (s2[(i, j)] - nf * pbar * pbar).max(0.0);
                ((nf - 1.0) / nf * k * k / ((nf - 2.0) * (nf - 2.0)) * spread).sqrt()
            } else {
                f64::INFINITY
            };
            sigma_hat[(i, j)] = c;
            sigma_hat[(j, i)] = c;
            sigma_se[(i, j)] = se;
            sigma_se[(j, i)] = se;
        }
    }
    let mu_se = (0..t_len).map(|t| (sigma_hat[(t, t)] / nf).sqrt()).collect();
    Ok(EmpiricalMoments { n, mu_hat, mu_se, sigma_hat, sigma_se })
}
