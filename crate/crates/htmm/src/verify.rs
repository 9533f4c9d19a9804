//! Oracle equivalence suite behind `htmm verify`.

use std::fmt;

use htmm_core::inner::{gen_fn_y, q00_from_theta2, theta2_from_q00, thin_inner, CameraModel, InnerAlexaParams};
use htmm_core::markov::{check_gap_condition, check_real_spectrum_r3, spectral_decompose};
use htmm_core::moments::{
    matrix_moment_covariance, matrix_power_mean, moment_set, second_order_from_model, MomentSet, MomentsError,
    SecondOrderParams,
};
use htmm_core::nalgebra::DMatrix;
use htmm_core::oracles::{
    enumerate_marginals, exact_likelihood, truncated_mass, EnumerationBudget, GeometricLaw, OracleError,
};
use htmm_core::simulator::stream_rng;
use rand::Rng;

use crate::models::{random_spec, random_theta};

/// Closed-form moments under test.
pub type MomentsFn = fn(&SecondOrderParams, &CameraModel, usize) -> Result<MomentSet, MomentsError>;

#[derive(Debug, Clone, PartialEq)]
pub enum Status {
    Pass,
    Fail(String),
    Skip(String),
}

impl fmt::Display for Status {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Status::Pass => f.write_str("PASS"),
            Status::Fail(_) => f.write_str("FAIL"),
            Status::Skip(_) => f.write_str("SKIP"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckOutcome {
    pub name: &'static str,
    pub status: Status,
    /// Largest deviation seen, or the reason for a skip or failure.
    pub detail: String,
}

pub struct VerifySuite {
    pub budget: EnumerationBudget,
    pub moments: MomentsFn,
    pub seed: u64,
}

impl Default for VerifySuite {
    fn default() -> Self {
        VerifySuite { budget: EnumerationBudget::default(), moments: moment_set, seed: 0 }
    }
}

pub const CHECKS: [&str; 8] = [
    "spectral_vs_matrix_power",
    "enumeration_r1_t6",
    "enumeration_r3_t8",
    "likelihood_normalization",
    "lambert_roundtrip",
    "thinning_identity",
    "complex_counterexample",
    "gap_example",
];

enum Verdict {
    Within { err: f64, tol: f64 },
    Holds(bool, String),
    Skip(String),
    Error(String),
}

fn max_abs(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn max_abs_mat(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).amax()
}

fn test_camera() -> CameraModel {
    CameraModel { a: 2.0, f2: 1.5, o: 10.0, sigma: vec![1.5], p_d: 1.0 }
}

impl VerifySuite {
    pub fn run(&self) -> Vec<CheckOutcome> {
        CHECKS.iter().map(|&name| self.run_check(name)).collect()
    }

    pub fn run_check(&self, name: &'static str) -> CheckOutcome {
        let verdict = match name {
            "spectral_vs_matrix_power" => self.spectral_vs_matrix_power(),
            "enumeration_r1_t6" => self.enumeration(1, 6, 40),
            "enumeration_r3_t8" => self.enumeration(3, 8, 3),
            "likelihood_normalization" => self.likelihood_normalization(),
            "lambert_roundtrip" => lambert_roundtrip(),
            "thinning_identity" => thinning_identity(),
            "complex_counterexample" => complex_counterexample(),
            "gap_example" => gap_example(),
            _ => Verdict::Error(format!("unknown check `{name}`")),
        };
        let (status, detail) = match verdict {
            Verdict::Within { err, tol } if err <= tol => (Status::Pass, format!("max deviation {err:.3e}")),
            Verdict::Within { err, tol } => {
                let msg = format!("max deviation {err:.3e} exceeds {tol:.0e}");
                (Status::Fail(msg.clone()), msg)
            }
            Verdict::Holds(true, msg) => (Status::Pass, msg),
            Verdict::Holds(false, msg) => (Status::Fail(msg.clone()), msg),
            Verdict::Skip(msg) => (Status::Skip(msg.clone()), msg),
            Verdict::Error(msg) => (Status::Fail(msg.clone()), msg),
        };
        CheckOutcome { name, status, detail }
    }

    /// Closed forms against repeated multiplication by the transition matrix.
    fn spectral_vs_matrix_power(&self) -> Verdict {
        let mut rng = stream_rng(self.seed, 0, 1);
        let cam = test_camera();
        let t_len = 50;
        let mut err: f64 = 0.0;
        for i in 0..100 {
            let r = 1 + i % 3;
            let nu0 = if i % 2 == 0 { None } else { Some(1.0) };
            let spec = random_spec(r, &mut rng, nu0);
            let theta = random_theta(&mut rng, spec.q00());
            let m = f64::from(rng.random_range(1u32..=3));
            let result = (|| -> Result<f64, MomentsError> {
                let gamma = second_order_from_model(&spec, theta, m)?;
                let set = (self.moments)(&gamma, &cam, t_len)?;
                let mu = matrix_power_mean(&spec, theta.theta1, m, t_len)?;
                let sigma = matrix_moment_covariance(&spec, &theta, m, &cam, t_len)?;
                Ok(max_abs(&set.mu, &mu).max(max_abs_mat(&set.sigma, &sigma)))
            })();
            match result {
                Ok(e) => err = err.max(e),
                Err(e) => return Verdict::Error(format!("model {i}: {e}")),
            }
        }
        Verdict::Within { err, tol: 1e-9 }
    }

    /// Closed forms against total expectation over every hidden path.
    fn enumeration(&self, r: usize, t_len: usize, models: usize) -> Verdict {
        if let Err(e) = self.budget.admit(r + 1, t_len) {
            return Verdict::Skip(e.to_string());
        }
        let mut rng = stream_rng(self.seed, r as u64, 2);
        let cam = test_camera();
        let mut err: f64 = 0.0;
        for i in 0..models {
            let spec = random_spec(r, &mut rng, None);
            let theta = random_theta(&mut rng, spec.q00());
            let m = f64::from(rng.random_range(1u32..=3));
            let exact = match enumerate_marginals(&spec, &theta, m, &cam, t_len, self.budget) {
                Ok(e) => e,
                Err(e) => return Verdict::Error(format!("model {i}: {e}")),
            };
            let closed = match second_order_from_model(&spec, theta, m).and_then(|g| (self.moments)(&g, &cam, t_len)) {
                Ok(c) => c,
                Err(e) => return Verdict::Error(format!("model {i}: {e}")),
            };
            err = err.max(max_abs(&exact.mu, &closed.mu)).max(max_abs_mat(&exact.sigma, &closed.sigma));
        }
        Verdict::Within { err, tol: 1e-9 }
    }

    /// Path-sum likelihood over all traces with counts `<= k` against the
    /// truncated mass, whose deficit is bounded by the geometric tails.
    fn likelihood_normalization(&self) -> Verdict {
        let cases: [(usize, u64); 3] = [(4, 7), (6, 3), (8, 2)];
        let cost: u64 = cases
            .iter()
            .map(|&(t, k)| EnumerationBudget::paths_needed(2, t).saturating_mul((k + 1).pow(t as u32)))
            .max()
            .unwrap_or(0);
        if cost > self.budget.max_paths {
            return Verdict::Skip(format!("needs {cost} path evaluations, budget {}", self.budget.max_paths));
        }
        let mut rng = stream_rng(self.seed, 0, 3);
        let unlimited = EnumerationBudget { max_paths: u64::MAX };
        let mut err: f64 = 0.0;
        for &(t_len, k) in &cases {
            let spec = random_spec(1, &mut rng, None);
            let law = GeometricLaw { rho_stay: rng.random_range(0.05..0.4), rho_exit: rng.random_range(0.05..0.4) };
            let total = match sum_over_traces(&spec, &law, t_len, k, unlimited) {
                Ok(v) => v,
                Err(e) => return Verdict::Error(e.to_string()),
            };
            let mass = match truncated_mass(&spec, &law, t_len, k) {
                Ok(v) => v,
                Err(e) => return Verdict::Error(e.to_string()),
            };
            let bound = t_len as f64 * law.tail(k);
            if 1.0 - total > bound + 1e-12 {
                return Verdict::Holds(false, format!("deficit {} above tail bound {bound}", 1.0 - total));
            }
            err = err.max((total - mass).abs());
        }
        Verdict::Within { err, tol: 1e-6 }
    }
}

fn sum_over_traces(
    spec: &htmm_core::markov::OuterModelSpec,
    law: &GeometricLaw,
    t_len: usize,
    k: u64,
    budget: EnumerationBudget,
) -> Result<f64, OracleError> {
    let mut y = vec![0u64; t_len];
    let mut total = 0.0;
    loop {
        total += exact_likelihood(spec, law, &y, budget)?.value;
        let mut i = 0;
        while i < t_len && y[i] == k {
            y[i] = 0;
            i += 1;
        }
        if i == t_len {
            return Ok(total);
        }
        y[i] += 1;
    }
}

fn lambert_roundtrip() -> Verdict {
    let mut err: f64 = 0.0;
    for i in 0..=980 {
        let q00 = 0.01 + i as f64 * 0.001;
        match q00_from_theta2(theta2_from_q00(q00)) {
            Ok(back) => err = err.max((back - q00).abs()),
            Err(e) => return Verdict::Error(format!("q00 = {q00}: {e}")),
        }
    }
    Verdict::Within { err, tol: 1e-10 }
}

/// Thinned-model generating function against the original one evaluated at
/// the thinned argument.
fn thinning_identity() -> Verdict {
    let mut err: f64 = 0.0;
    for &(p, q, rate, pd) in &[(0.9, 0.995, 200.0, 0.5), (0.5, 0.9, 10.0, 0.1), (0.95, 0.99, 22.3, 0.8)] {
        let params = InnerAlexaParams { p, q, rate };
        let thinned = InnerAlexaParams { p: thin_inner(p, pd), q, rate };
        for i in 0..=40 {
            let xi = -0.005 * i as f64;
            let pair = gen_fn_y(xi, &thinned).and_then(|a| Ok((a, gen_fn_y((1.0 + pd * xi.exp_m1()).ln(), &params)?)));
            match pair {
                Ok((a, b)) => err = err.max((a - b).abs() / a.max(1.0)),
                Err(e) => return Verdict::Error(e.to_string()),
            }
        }
    }
    Verdict::Within { err, tol: 1e-12 }
}

pub fn counterexample_matrix() -> DMatrix<f64> {
    DMatrix::from_row_slice(
        4,
        4,
        &[0.8, 0.0, 0.1, 0.0, 0.1, 0.8, 0.0, 0.0, 0.1, 0.1, 0.8, 0.0, 0.0, 0.1, 0.1, 1.0],
    )
}

fn complex_counterexample() -> Verdict {
    let m = counterexample_matrix();
    let (verdict, decomp) = match (check_real_spectrum_r3(&m), spectral_decompose(&m)) {
        (Ok(v), Ok(d)) => (v, d),
        (Err(e), _) | (_, Err(e)) => return Verdict::Error(e.to_string()),
    };
    let ok = (verdict.condition_value + 0.013).abs() < 1e-3 && !verdict.real && !decomp.is_real;
    Verdict::Holds(ok, format!("condition value {:.5}, real spectrum {}", verdict.condition_value, decomp.is_real))
}

fn gap_example() -> Verdict {
    match check_gap_condition([0.975, 0.95, 0.8], 1.0) {
        Ok(g) => {
            let ok = (g.mu1 - 0.5).abs() < 1e-12 && (g.mu2 - 0.25).abs() < 1e-12 && g.satisfied;
            Verdict::Holds(ok, format!("mu1 {:.6}, mu2 {:.6}, satisfied {}", g.mu1, g.mu2, g.satisfied))
        }
        Err(e) => Verdict::Error(e.to_string()),
    }
}

pub fn all_passed(results: &[CheckOutcome]) -> bool {
    results.iter().all(|c| !matches!(c.status, Status::Fail(_)))
}
