//! Profile pseudo-maximum-likelihood estimation of γ from one normalized
//! trace, and the amplification-slope camera calibration.

pub mod init;
pub mod loglik;
pub mod nelder_mead;
pub mod param;

#[allow(unused_imports)]
use num_traits::Float;
use alloc::boxed::Box;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::inner::CameraModel;
use crate::moments::{check_constraints, ConstraintReport, MomentsError, SecondOrderParams};

pub use init::{init_params, InitialGuess};
pub use loglik::{pseudo_loglik, pseudo_loglik_fast, StructuredSigma};
pub use param::{Layout, Nu0Mode, Theta2Mode};

use nelder_mead::{minimize, minimize_with_restarts, SimplexOptions};

/// Longest trace handled; longer input is truncated with a warning.
pub const MAX_T: usize = 4000;

/// Upper bound on neighbour-seeded passes over the profile.
const PROFILE_PASSES: usize = 2;

#[derive(Debug, Clone, PartialEq)]
pub enum EstimatorError {
    DegenerateTrace(String),
    SigmaNotPD,
    ConstraintViolation(String),
    InvalidOptions(String),
    IllConditioned(String),
    Moments(MomentsError),
    /// The optimizer stopped on its evaluation budget; the best point found is attached.
    NoConvergence(Box<FitResult>),
}

impl fmt::Display for EstimatorError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EstimatorError::DegenerateTrace(msg) => write!(f, "degenerate trace: {msg}"),
            EstimatorError::SigmaNotPD => write!(f, "covariance is not positive definite"),
            EstimatorError::ConstraintViolation(msg) => write!(f, "constraint violated: {msg}"),
            EstimatorError::InvalidOptions(msg) => write!(f, "invalid options: {msg}"),
            EstimatorError::IllConditioned(msg) => write!(f, "ill-conditioned calibration: {msg}"),
            EstimatorError::Moments(e) => write!(f, "{e}"),
            EstimatorError::NoConvergence(res) => {
                write!(f, "optimizer did not converge (best m = {}, loglik = {})", res.m_hat, res.loglik)
            }
        }
    }
}

impl From<MomentsError> for EstimatorError {
    fn from(e: MomentsError) -> Self {
        match e {
            MomentsError::ConstraintViolation(msg) => EstimatorError::ConstraintViolation(msg),
            other => EstimatorError::Moments(other),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitOptions {
    pub r: usize,
    pub m_grid: Vec<usize>,
    pub nu0_mode: Nu0Mode,
    pub theta2_mode: Theta2Mode,
    /// simplex restarts in the final joint search
    pub restarts: usize,
    /// objective tolerance
    pub tol: f64,
    /// evaluation budget of the final joint search per grid point
    pub max_iters: usize,
    /// block-coordinate sweeps before the joint search
    pub sweeps: usize,
    pub seed: u64,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            r: 3,
            m_grid: (1..=20).collect(),
            nu0_mode: Nu0Mode::Free,
            theta2_mode: Theta2Mode::Alexa,
            restarts: 1,
            tol: 1e-4,
            max_iters: 4000,
            sweeps: 3,
            seed: 0,
        }
    }
}

impl FitOptions {
    pub fn validate(&self) -> Result<(), EstimatorError> {
        if self.r == 0 {
            return Err(EstimatorError::InvalidOptions("r must be at least 1".into()));
        }
        if self.m_grid.is_empty() || self.m_grid.contains(&0) {
            return Err(EstimatorError::InvalidOptions("m_grid must be non-empty and positive".into()));
        }
        if !(self.tol > 0.0) {
            return Err(EstimatorError::InvalidOptions("tol must be positive".into()));
        }
        if let Nu0Mode::Fixed(v) = self.nu0_mode {
            if !(0.0..=1.0).contains(&v) {
                return Err(EstimatorError::InvalidOptions(format!("fixed nu0 = {v} outside [0, 1]")));
            }
        }
        if self.max_iters == 0 {
            return Err(EstimatorError::InvalidOptions("max_iters must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProfilePoint {
    pub m: usize,
    #[serde(with = "float_or_tag")]
    pub loglik: f64,
    pub converged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitDiagnostics {
    pub converged: bool,
    /// objective evaluations over the whole profile
    pub iterations: usize,
    pub constraint_residuals: ConstraintReport,
    /// condition number of `Sigma(gamma_hat)`
    #[serde(with = "float_or_tag")]
    pub sigma_condition: f64,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub gamma_hat: SecondOrderParams,
    pub m_hat: usize,
    #[serde(with = "float_or_tag")]
    pub loglik: f64,
    pub profile: Vec<ProfilePoint>,
    pub diagnostics: FitDiagnostics,
}

/// Non-finite values as the strings `"inf"`, `"-inf"` and `"nan"`, which
/// formats such as JSON cannot hold as numbers.
mod float_or_tag {
    use serde::{de, Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else if v.is_nan() {
            s.serialize_str("nan")
        } else if *v > 0.0 {
            s.serialize_str("inf")
        } else {
            s.serialize_str("-inf")
        }
    }

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Number(f64),
        Tag(alloc::string::String),
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Number(v) => Ok(v),
            Repr::Tag(tag) => match tag.as_str() {
                "inf" => Ok(f64::INFINITY),
                "-inf" => Ok(f64::NEG_INFINITY),
                "nan" => Ok(f64::NAN),
                other => Err(de::Error::invalid_value(de::Unexpected::Str(other), &"a number, inf, -inf or nan")),
            },
        }
    }
}

struct PointFit {
    x: Vec<f64>,
    loglik: f64,
    converged: bool,
    evals: usize,
}

fn objective<'a>(layout: &'a Layout, camera: &'a CameraModel, y: &'a [f64], m: f64) -> impl Fn(&[f64]) -> f64 + 'a {
    move |x: &[f64]| match layout.decode(x, m) {
        None => f64::INFINITY,
        // jitter would reward near-singular covariances, so it is not used here
        Some(g) => match StructuredSigma::new(&g, camera, y.len()).loglik_strict(y) {
            Ok(v) if v.is_finite() => -v,
            _ => f64::INFINITY,
        },
    }
}

fn optimize_point(
    layout: &Layout,
    camera: &CameraModel,
    y: &[f64],
    m: f64,
    start: Vec<f64>,
    options: &FitOptions,
    rng: &mut ChaCha8Rng,
) -> PointFit {
    let f = objective(layout, camera, y, m);
    let mut x = start;
    let mut fx = f(&x);
    let mut evals = 1;
    let blocks = layout.blocks();
    let block_opts = SimplexOptions { max_evals: 0, ftol: options.tol, xtol: 1e-3 };

    for _ in 0..options.sweeps {
        let before = fx;
        for block in &blocks {
            let sub0: Vec<f64> = block.iter().map(|&i| x[i]).collect();
            let step: Vec<f64> = block.iter().map(|_| 0.3).collect();
            let mut full = x.clone();
            let res = minimize(
                |sub: &[f64]| {
                    for (k, &i) in block.iter().enumerate() {
                        full[i] = sub[k];
                    }
                    f(&full)
                },
                &sub0,
                &step,
                SimplexOptions { max_evals: 150 * block.len() + 100, ..block_opts },
            );
            evals += res.evals;
            if res.f < fx {
                for (k, &i) in block.iter().enumerate() {
                    x[i] = res.x[k];
                }
                fx = res.f;
            }
        }
        if !(before - fx > options.tol) {
            break;
        }
    }

    let step: Vec<f64> = (0..x.len()).map(|_| 0.2).collect();
    let res = minimize_with_restarts(
        &f,
        &x,
        &step,
        SimplexOptions { max_evals: options.max_iters, ftol: options.tol, xtol: 1e-3 },
        options.restarts,
        rng,
    );
    evals += res.evals;
    let (x, fx, converged) = if res.f <= fx { (res.x, res.f, res.converged) } else { (x, fx, res.converged) };
    PointFit { x, loglik: -fx, converged, evals }
}

/// Local maximization at fixed `start.m`, starting from `start`.
/// Returns the optimized parameters, their pseudo log-likelihood and whether
/// the search converged.
pub fn refine(
    y: &[f64],
    camera: &CameraModel,
    options: &FitOptions,
    start: &SecondOrderParams,
) -> Result<(SecondOrderParams, f64, bool), EstimatorError> {
    options.validate()?;
    let layout = Layout::new(start.r(), options.nu0_mode, options.theta2_mode);
    let mut rng = ChaCha8Rng::seed_from_u64(options.seed);
    let point = optimize_point(&layout, camera, y, start.m, layout.encode(start), options, &mut rng);
    let gamma = layout
        .decode(&point.x, start.m)
        .ok_or_else(|| EstimatorError::ConstraintViolation("start is outside the feasible region".into()))?;
    Ok((gamma, point.loglik, point.converged))
}

/// Profile pseudo-ML over the integer grid of molecule counts.
pub fn fit(y: &[f64], camera: &CameraModel, options: &FitOptions) -> Result<FitResult, EstimatorError> {
    options.validate()?;
    camera.validate().map_err(|e| EstimatorError::InvalidOptions(format!("camera: {e}")))?;
    let mut warnings = Vec::new();
    let y = if y.len() > MAX_T {
        warnings.push(format!("trace truncated from {} to {MAX_T} frames", y.len()));
        &y[..MAX_T]
    } else {
        y
    };
    let layout = Layout::new(options.r, options.nu0_mode, options.theta2_mode);
    let guess = init_params(y, options.r, camera, &options.m_grid, options.theta2_mode)?;
    let mut base = guess.gamma.clone();
    if let Nu0Mode::Fixed(v) = options.nu0_mode {
        base.nu0 = v;
    }
    let theta1_index = layout.theta().start;
    let mut rng = ChaCha8Rng::seed_from_u64(options.seed);

    let mut grid = options.m_grid.clone();
    grid.sort_unstable();
    grid.dedup();

    // neighbour optimum moved to another count: theta1 rescaled so the mean is
    // kept, and optionally theta3 too so the bright-frame shot noise is kept
    let transplant = |x: &[f64], from: usize, to: usize| {
        let mut out = x.to_vec();
        out[theta1_index] += (from as f64 / to as f64).ln();
        let mut starts = vec![out];
        if let Some(mut g) = layout.decode(x, from as f64) {
            let ratio = to as f64 / from as f64;
            g.m = to as f64;
            g.theta.theta1 /= ratio;
            g.theta.theta3 = (g.theta.theta3 + 1.0) * ratio - 1.0;
            starts.push(layout.encode(&g));
        }
        starts
    };
    let best_of = |f: &dyn Fn(&[f64]) -> f64, candidates: Vec<Vec<f64>>| {
        let scored: Vec<(f64, Vec<f64>)> = candidates.into_iter().map(|c| (f(&c), c)).collect();
        let n = scored.len();
        let start = scored
            .into_iter()
            .min_by(|a, b| a.0.partial_cmp(&b.0).unwrap_or(core::cmp::Ordering::Equal))
            .map(|s| s.1)
            .expect("at least one candidate");
        (start, n)
    };

    // ascending pass from the initial guess or the previous optimum
    let mut fits: Vec<(usize, PointFit)> = Vec::with_capacity(grid.len());
    let mut total_evals = 0;
    for &m in &grid {
        let mf = m as f64;
        let f = objective(&layout, camera, y, mf);
        let mut candidates: Vec<Vec<f64>> = Vec::new();
        // larger theta3 inflates the bright-frame variance, a fallback when the
        // initial covariance is not positive definite
        for theta3 in [base.theta.theta3, 1.0, 4.0] {
            let mut fresh = base.clone();
            fresh.m = mf;
            fresh.theta.theta1 = guess.amplitude / mf;
            fresh.theta.theta3 = theta3;
            candidates.push(layout.encode(&fresh));
        }
        if let Some((m_prev, prev)) = fits.last() {
            candidates.extend(transplant(&prev.x, *m_prev, m));
        }
        let (start, n) = best_of(&f, candidates);
        total_evals += n;
        let point = optimize_point(&layout, camera, y, mf, start, options, &mut rng);
        total_evals += point.evals;
        fits.push((m, point));
    }

    // alternate descending and ascending passes seeded by the neighbour's
    // optimum until no grid point improves
    for pass in 0..PROFILE_PASSES {
        let order: Vec<usize> =
            if pass % 2 == 0 { (0..grid.len().saturating_sub(1)).rev().collect() } else { (1..grid.len()).collect() };
        let mut changed = false;
        for i in order {
            let nb = if pass % 2 == 0 { i + 1 } else { i - 1 };
            let (m_nb, m) = (fits[nb].0, fits[i].0);
            let f = objective(&layout, camera, y, m as f64);
            let (start, n) = best_of(&f, transplant(&fits[nb].1.x, m_nb, m));
            total_evals += n;
            let point = optimize_point(&layout, camera, y, m as f64, start, options, &mut rng);
            total_evals += point.evals;
            if point.loglik > fits[i].1.loglik + options.tol {
                fits[i].1 = point;
                changed = true;
            }
        }
        if !changed && pass > 0 {
            break;
        }
    }

    let profile: Vec<ProfilePoint> =
        fits.iter().map(|(m, p)| ProfilePoint { m: *m, loglik: p.loglik, converged: p.converged }).collect();
    // argmax with ties resolved towards the smaller count
    let mut best = 0;
    for (i, p) in profile.iter().enumerate() {
        if p.loglik > profile[best].loglik {
            best = i;
        }
    }
    let (m_hat, point) = &fits[best];
    let Some(gamma_hat) = layout.decode(&point.x, *m_hat as f64) else {
        return Err(EstimatorError::DegenerateTrace("no feasible parameter found for any m".into()));
    };
    let sigma = crate::moments::moment_set_unchecked(&gamma_hat, camera, y.len()).sigma;
    let eig = sigma.clone().symmetric_eigenvalues();
    let (lo, hi) = eig.iter().fold((f64::INFINITY, 0.0f64), |(lo, hi), &v| (lo.min(v), hi.max(v.abs())));
    let sigma_condition = if lo > 0.0 { hi / lo } else { f64::INFINITY };
    let loglik = match pseudo_loglik(&gamma_hat, camera, y) {
        Ok(v) => v,
        Err(_) => point.loglik,
    };
    let converged = point.converged;
    let result = FitResult {
        m_hat: *m_hat,
        loglik,
        profile,
        diagnostics: FitDiagnostics {
            converged,
            iterations: total_evals,
            constraint_residuals: check_constraints(&gamma_hat),
            sigma_condition,
            warnings,
        },
        gamma_hat,
    };
    if !converged {
        return Err(EstimatorError::NoConvergence(Box::new(result)));
    }
    Ok(result)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub a: f64,
    pub slope: f64,
    /// intercept of the variance-vs-mean line
    pub intercept: f64,
}

/// Least-squares line of pixel variance on pixel mean; the slope is `a f2`.
pub fn calibrate_camera(pixel_stats: &[(f64, f64)], f2: f64) -> Result<Calibration, EstimatorError> {
    if pixel_stats.len() < 3 {
        return Err(EstimatorError::IllConditioned(format!("{} mean/variance pairs, need 3", pixel_stats.len())));
    }
    if !(1.0..=2.0).contains(&f2) {
        return Err(EstimatorError::InvalidOptions(format!("f2 = {f2} outside [1, 2]")));
    }
    let lo = pixel_stats.iter().map(|p| p.0).fold(f64::INFINITY, f64::min);
    let hi = pixel_stats.iter().map(|p| p.0).fold(f64::NEG_INFINITY, f64::max);
    let spans_decade = if lo > 0.0 { hi >= 10.0 * lo } else { hi > lo };
    if !spans_decade {
        return Err(EstimatorError::IllConditioned(format!("means span [{lo}, {hi}], less than a decade")));
    }
    let n = pixel_stats.len() as f64;
    let mx = pixel_stats.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pixel_stats.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = pixel_stats.iter().map(|p| (p.0 - mx) * (p.0 - mx)).sum();
    let sxy: f64 = pixel_stats.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let slope = sxy / sxx;
    Ok(Calibration { a: slope / f2, slope, intercept: my - slope * mx })
}
