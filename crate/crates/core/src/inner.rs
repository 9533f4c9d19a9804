//! Alexa 647 inner model: photon bursts during one exposure, the derived
//! θ-parameters, generating functions, detection thinning and camera folding.

#[allow(unused_imports)]
use num_traits::Float;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use rand::Rng;
use rand_distr::{Distribution, Gamma, Geometric, Poisson};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq)]
pub enum InnerError {
    InvalidParams(&'static str),
    OutOfDomain(f64),
    OutOfConvergenceRegion(f64),
}

impl fmt::Display for InnerError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            InnerError::InvalidParams(msg) => write!(f, "invalid parameters: {msg}"),
            InnerError::OutOfDomain(x) => write!(f, "argument {x} outside the domain (0, 1)"),
            InnerError::OutOfConvergenceRegion(x) => {
                write!(f, "generating function diverges at {x}")
            }
        }
    }
}

/// Burst model: `Z ~ Poisson(rate)` burst attempts, `G ~ Geom(1-q)` bursts before
/// the exit, `B = min(Z, G)` completed bursts, `Geom(1-p)` photons per burst.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InnerAlexaParams {
    pub p: f64,
    pub q: f64,
    pub rate: f64,
}

impl InnerAlexaParams {
    pub fn new(p: f64, q: f64, rate: f64) -> Result<Self, InnerError> {
        let params = InnerAlexaParams { p, q, rate };
        params.validate()?;
        Ok(params)
    }

    pub fn validate(&self) -> Result<(), InnerError> {
        if !(self.p > 0.0 && self.p < 1.0) {
            return Err(InnerError::InvalidParams("p must lie in (0, 1)"));
        }
        if !(self.q > 0.0 && self.q < 1.0) {
            return Err(InnerError::InvalidParams("q must lie in (0, 1)"));
        }
        if !(self.rate > 0.0 && self.rate.is_finite()) {
            return Err(InnerError::InvalidParams("rate must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThetaParams {
    pub theta1: f64,
    pub theta2: f64,
    pub theta3: f64,
}

/// Camera chain. `sigma` holds either one value (broadcast over frames) or one
/// value per frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CameraModel {
    pub a: f64,
    pub f2: f64,
    #[serde(default)]
    pub o: f64,
    #[serde(with = "scalar_or_vec")]
    pub sigma: Vec<f64>,
    #[serde(default = "one")]
    pub p_d: f64,
}

fn one() -> f64 {
    1.0
}

mod scalar_or_vec {
    use alloc::vec;
    use alloc::vec::Vec;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Either {
        Scalar(f64),
        Vector(Vec<f64>),
    }

    pub fn serialize<S: Serializer>(v: &Vec<f64>, s: S) -> Result<S::Ok, S::Error> {
        if v.len() == 1 {
            v[0].serialize(s)
        } else {
            v.serialize(s)
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<f64>, D::Error> {
        Ok(match Either::deserialize(d)? {
            Either::Scalar(x) => vec![x],
            Either::Vector(v) => v,
        })
    }
}

impl CameraModel {
    /// Unit gain, no excess noise, no background: the identity camera.
    pub fn ideal() -> Self {
        CameraModel { a: 1.0, f2: 1.0, o: 0.0, sigma: vec![0.0], p_d: 1.0 }
    }

    pub fn validate(&self) -> Result<(), InnerError> {
        if !(self.a > 0.0 && self.a.is_finite()) {
            return Err(InnerError::InvalidParams("camera amplification a must be positive"));
        }
        if !(1.0..=2.0).contains(&self.f2) {
            return Err(InnerError::InvalidParams("excess noise factor f2 must lie in [1, 2]"));
        }
        if self.sigma.is_empty() || self.sigma.iter().any(|&s| !(s >= 0.0 && s.is_finite())) {
            return Err(InnerError::InvalidParams("sigma entries must be finite and non-negative"));
        }
        if !(self.p_d > 0.0 && self.p_d <= 1.0) {
            return Err(InnerError::InvalidParams("detection probability must lie in (0, 1]"));
        }
        if !self.o.is_finite() {
            return Err(InnerError::InvalidParams("offset must be finite"));
        }
        Ok(())
    }

    /// Background standard deviation for frame `t` (0-based).
    pub fn sigma_at(&self, t: usize) -> f64 {
        if self.sigma.len() == 1 {
            self.sigma[0]
        } else {
            self.sigma[t.min(self.sigma.len() - 1)]
        }
    }

    /// Background variance in normalized units, `sigma_t^2 / a^2`.
    pub fn normalized_background_var(&self, t: usize) -> f64 {
        let s = self.sigma_at(t) / self.a;
        s * s
    }
}

pub fn q00_from_inner(params: &InnerAlexaParams) -> f64 {
    (-(1.0 - params.q) * params.rate).exp()
}

/// `-q00 ln q00 / (1 - q00)`, continuous at `q00 = 1`.
pub fn theta2_from_q00(q00: f64) -> f64 {
    let d = 1.0 - q00;
    if d < 1e-12 {
        return 1.0 - d / 2.0;
    }
    if q00 <= 0.0 {
        return 0.0;
    }
    let ln_q00 = if d < 0.5 { (-d).ln_1p() } else { q00.ln() };
    -q00 * ln_q00 / d
}

pub fn theta_from_inner(params: &InnerAlexaParams) -> ThetaParams {
    let InnerAlexaParams { p, q, rate } = *params;
    let exit = -(-(1.0 - q) * rate).exp_m1();
    let q00 = 1.0 - exit;
    let theta1 = p / (1.0 - p) * q / (1.0 - q) * exit;
    let theta2 = theta2_from_q00(q00);
    let theta3 = 2.0 / exit * ((1.0 - q) / q - theta2 + 1.0) - 1.0;
    ThetaParams { theta1, theta2, theta3 }
}

/// Lower real branch `W_{-1}` of the Lambert W function on `[-1/e, 0)`.
///
/// Halley iteration on `w + ln(-w) = ln(-x)`, which stays accurate near the
/// branch point where `w e^w - x` loses all significant digits.
pub fn lambert_wm1(x: f64) -> Result<f64, InnerError> {
    let branch = -(-1.0f64).exp();
    if !(x >= branch && x < 0.0) {
        return Err(InnerError::OutOfDomain(x));
    }
    if x == branch {
        return Ok(-1.0);
    }
    let target = (-x).ln();
    let mut w = if x < -0.25 {
        let p = -(2.0 * (1.0 + core::f64::consts::E * x)).max(0.0).sqrt();
        -1.0 + p - p * p / 3.0 + 11.0 / 72.0 * p * p * p
    } else {
        let l1 = (-x).ln();
        l1 - (-l1).ln()
    };
    if w >= -1.0 {
        w = -1.0 - 1e-8;
    }
    for _ in 0..100 {
        let g = w + (-w).ln() - target;
        let g1 = 1.0 + 1.0 / w;
        let g2 = -1.0 / (w * w);
        let denom = g1 - g * g2 / (2.0 * g1);
        if denom == 0.0 || !denom.is_finite() {
            break;
        }
        let mut next = w - g / denom;
        if next >= -1.0 {
            next = (w - 1.0) / 2.0;
        }
        let step = (next - w).abs();
        w = next;
        if step <= 1e-15 * w.abs() {
            break;
        }
    }
    Ok(w)
}

/// Inverts `theta2 = -q00 ln q00 / (1 - q00)` through
/// `q00 = -theta2 / W_{-1}(-theta2 e^{-theta2})`.
pub fn q00_from_theta2(theta2: f64) -> Result<f64, InnerError> {
    if !(theta2 > 0.0 && theta2 < 1.0) {
        return Err(InnerError::OutOfDomain(theta2));
    }
    let w = lambert_wm1(-theta2 * (-theta2).exp())?;
    Ok(-theta2 / w)
}

/// `(1 - e^{-mu d}) / d`, with its series when `d` vanishes.
fn exit_kernel(mu: f64, d: f64) -> f64 {
    if d.abs() < 1e-8 {
        mu * (1.0 - mu * d / 2.0)
    } else {
        -(-mu * d).exp_m1() / d
    }
}

/// Moment generating function of the burst count `B`.
pub fn gen_fn_b(xi: f64, params: &InnerAlexaParams) -> f64 {
    let InnerAlexaParams { q, rate, .. } = *params;
    if xi == 0.0 {
        return 1.0;
    }
    let d = 1.0 - q * xi.exp();
    (-rate * d).exp() + (1.0 - q) * exit_kernel(rate, d)
}

/// MGF of `B` given the molecule stays bright (`Z <= G`): Poisson(q rate).
pub fn gen_fn_b00(xi: f64, params: &InnerAlexaParams) -> f64 {
    (params.q * params.rate * xi.exp_m1()).exp()
}

/// MGF of `B` given the molecule leaves the bright state (`Z > G`).
pub fn gen_fn_b10(xi: f64, params: &InnerAlexaParams) -> f64 {
    if xi == 0.0 {
        return 1.0;
    }
    let exit = -(-(1.0 - params.q) * params.rate).exp_m1();
    let d = 1.0 - params.q * xi.exp();
    (1.0 - params.q) * exit_kernel(params.rate, d) / exit
}

/// Log-MGF argument of the per-burst geometric photon count.
fn burst_transform(xi: f64, params: &InnerAlexaParams) -> Result<f64, InnerError> {
    let p = params.p;
    let pe = p * xi.exp();
    if !(pe < 1.0) || !(params.q * (1.0 - p) / (1.0 - pe) < 1.0) {
        return Err(InnerError::OutOfConvergenceRegion(xi));
    }
    if xi == 0.0 {
        return Ok(0.0);
    }
    Ok(((1.0 - p) / (1.0 - pe)).ln())
}

/// Moment generating function of the photon count of a bright frame.
pub fn gen_fn_y(xi: f64, params: &InnerAlexaParams) -> Result<f64, InnerError> {
    Ok(gen_fn_b(burst_transform(xi, params)?, params))
}

pub fn gen_fn_y00(xi: f64, params: &InnerAlexaParams) -> Result<f64, InnerError> {
    Ok(gen_fn_b00(burst_transform(xi, params)?, params))
}

pub fn gen_fn_y10(xi: f64, params: &InnerAlexaParams) -> Result<f64, InnerError> {
    Ok(gen_fn_b10(burst_transform(xi, params)?, params))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConditionalBurstLaw {
    pub poisson_reduced_rate: f64,
}

/// Law of `B` given `Z <= G`.
pub fn conditional_burst_law(params: &InnerAlexaParams) -> ConditionalBurstLaw {
    ConditionalBurstLaw { poisson_reduced_rate: params.q * params.rate }
}

/// Geometric parameter after binomial detection with probability `p_d`.
pub fn thin_inner(p: f64, p_d: f64) -> f64 {
    p * p_d / (1.0 - p + p * p_d)
}

pub fn thin_theta(theta: &ThetaParams, p_d: f64) -> ThetaParams {
    ThetaParams { theta1: p_d * theta.theta1, ..*theta }
}

/// θ after stochastic amplification; `a = 1` for normalized data.
pub fn camera_theta(theta: &ThetaParams, camera: &CameraModel) -> ThetaParams {
    ThetaParams {
        theta1: camera.a * theta.theta1,
        theta2: theta.theta2,
        theta3: theta.theta3 + (camera.f2 - 1.0) / theta.theta1,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Frame {
    pub photons: u64,
    pub exited: bool,
    pub bursts: u64,
}

/// Draws a Poisson variate; zero rate gives zero.
pub(crate) fn poisson<R: Rng + ?Sized>(rate: f64, rng: &mut R) -> u64 {
    if rate <= 0.0 {
        return 0;
    }
    match Poisson::new(rate) {
        Ok(d) => {
            let x: f64 = d.sample(rng);
            x as u64
        }
        Err(_) => 0,
    }
}

/// Sum of `n` independent geometric counts with success probability `1 - p`.
pub(crate) fn negative_binomial<R: Rng + ?Sized>(n: u64, p: f64, rng: &mut R) -> u64 {
    if n == 0 || p <= 0.0 {
        return 0;
    }
    let g = Gamma::new(n as f64, p / (1.0 - p)).expect("positive shape and scale");
    poisson(g.sample(rng), rng)
}

/// One exposure of a molecule that starts the exposure in the bright state.
pub fn sample_frame<R: Rng + ?Sized>(params: &InnerAlexaParams, rng: &mut R) -> Frame {
    let z = poisson(params.rate, rng);
    let g = Geometric::new(1.0 - params.q).expect("q in (0, 1)").sample(rng);
    let bursts = z.min(g);
    let photons = negative_binomial(bursts, params.p, rng);
    Frame { photons, exited: z > g, bursts }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn q00_direct_values() {
        let p = InnerAlexaParams::new(0.5, 0.99, 100.0).unwrap();
        assert_abs_diff_eq!(q00_from_inner(&p), (-1.0f64).exp(), epsilon = 1e-12);
        let p = InnerAlexaParams::new(0.5, 0.99, 1e-12).unwrap();
        assert!(q00_from_inner(&p) > 1.0 - 1e-12);
        assert!(InnerAlexaParams::new(1.0, 0.5, 1.0).is_err());
        assert!(InnerAlexaParams::new(0.5, 0.5, 0.0).is_err());
    }

    #[test]
    fn theta_direct_values() {
        let p = InnerAlexaParams::new(0.5, 0.99, 100.0).unwrap();
        let th = theta_from_inner(&p);
        assert_abs_diff_eq!(th.theta1, 99.0 * (1.0 - (-1.0f64).exp()), epsilon = 1e-9);
        assert_abs_diff_eq!(th.theta1, 62.58, epsilon = 5e-3);
        let e1 = (-1.0f64).exp();
        assert_abs_diff_eq!(th.theta2, e1 / (1.0 - e1), epsilon = 1e-12);
        assert_abs_diff_eq!(theta2_from_q00(1.0 - 1e-14), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn theta_reference_values() {
        // independently evaluated closed forms
        let p = InnerAlexaParams::new(0.9, 0.995, 200.0).unwrap();
        let th = theta_from_inner(&p);
        assert_abs_diff_eq!(th.theta1, 1132.1279, epsilon = 1e-3);
        assert_abs_diff_eq!(th.theta3, 0.338505, epsilon = 1e-5);
    }

    #[test]
    fn theta2_stays_finite_when_q00_underflows() {
        assert_eq!(theta2_from_q00(0.0), 0.0);
        let q00 = (-144.0f64).exp();
        let v = theta2_from_q00(q00);
        assert!(v.is_finite() && v > 0.0);
        assert_abs_diff_eq!(v, 144.0 * q00, epsilon = 1e-70);
    }

    #[test]
    fn lambert_roundtrip() {
        let e1 = (-1.0f64).exp();
        assert_abs_diff_eq!(q00_from_theta2(e1 / (1.0 - e1)).unwrap(), e1, epsilon = 1e-12);
        for i in 1..=99 {
            let q00 = i as f64 / 100.0;
            let back = q00_from_theta2(theta2_from_q00(q00)).unwrap();
            assert!((back - q00).abs() < 1e-10, "q00 {q00} -> {back}");
        }
        assert!(q00_from_theta2(0.0).is_err());
        assert!(q00_from_theta2(1.0).is_err());
    }

    #[test]
    fn lambert_monotone_near_one() {
        let hi = q00_from_theta2(0.999).unwrap();
        assert!(hi > 0.99);
        let mut prev = 0.0;
        for i in 1..1000 {
            let q = q00_from_theta2(i as f64 / 1000.0).unwrap();
            assert!(q > prev);
            prev = q;
        }
    }

    #[test]
    fn lambert_defining_equation() {
        for &x in &[-0.3678, -0.3, -0.2, -0.1, -1e-3, -1e-10] {
            let w = lambert_wm1(x).unwrap();
            assert!(w <= -1.0);
            assert_abs_diff_eq!(w * w.exp(), x, epsilon = 1e-14);
        }
        assert!(lambert_wm1(0.1).is_err());
        assert!(lambert_wm1(-0.5).is_err());
    }

    #[test]
    fn generating_functions_normalized() {
        let p = InnerAlexaParams::new(0.9, 0.995, 200.0).unwrap();
        assert_eq!(gen_fn_b(0.0, &p), 1.0);
        assert_eq!(gen_fn_y(0.0, &p).unwrap(), 1.0);
        assert_abs_diff_eq!(gen_fn_y00(0.0, &p).unwrap(), 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(gen_fn_y10(0.0, &p).unwrap(), 1.0, epsilon = 1e-15);
    }

    #[test]
    fn burst_mgf_decomposes() {
        let p = InnerAlexaParams::new(0.7, 0.98, 30.0).unwrap();
        let q00 = q00_from_inner(&p);
        for &xi in &[-0.5, -0.1, 0.01, 0.02] {
            let total = gen_fn_b(xi, &p);
            let split = q00 * gen_fn_b00(xi, &p) + (1.0 - q00) * gen_fn_b10(xi, &p);
            assert_abs_diff_eq!(total, split, epsilon = 1e-12 * total);
        }
    }

    #[test]
    fn burst_mgf_series_branch_is_continuous() {
        let p = InnerAlexaParams::new(0.7, 0.98, 30.0).unwrap();
        let xi0 = -(0.98f64).ln();
        let at = gen_fn_b(xi0, &p);
        let near = gen_fn_b(xi0 + 1e-7, &p);
        assert!((at - near).abs() < 1e-4 * at);
    }

    #[test]
    fn mgf_derivative_is_theta1() {
        let p = InnerAlexaParams::new(0.9, 0.995, 200.0).unwrap();
        let th = theta_from_inner(&p);
        let h = 1e-5 / th.theta1;
        let d = (gen_fn_y(h, &p).unwrap() - gen_fn_y(-h, &p).unwrap()) / (2.0 * h);
        assert!((d - th.theta1).abs() < 1e-6 * th.theta1, "{d} vs {}", th.theta1);
    }

    #[test]
    fn mgf_second_moment_is_theta3() {
        let p = InnerAlexaParams::new(0.6, 0.97, 20.0).unwrap();
        let th = theta_from_inner(&p);
        // E[Y^2] = theta1^2 (theta3 + 1) + theta1
        let h = 1e-4;
        let g = |x: f64| gen_fn_y(x, &p).unwrap();
        let second = (g(h) - 2.0 * g(0.0) + g(-h)) / (h * h);
        let expected = th.theta1 * th.theta1 * (th.theta3 + 1.0) + th.theta1;
        assert!((second - expected).abs() < 1e-5 * expected, "{second} vs {expected}");
    }

    #[test]
    fn convergence_region_enforced() {
        let p = InnerAlexaParams::new(0.9, 0.5, 2.0).unwrap();
        assert!(matches!(gen_fn_y(0.2, &p), Err(InnerError::OutOfConvergenceRegion(_))));
    }

    #[test]
    fn thinning_arithmetic() {
        assert_eq!(thin_inner(0.9, 1.0), 0.9);
        assert_abs_diff_eq!(thin_inner(0.9, 0.5), 9.0 / 11.0, epsilon = 1e-15);
        let th = ThetaParams { theta1: 100.0, theta2: 0.5, theta3: 0.2 };
        assert_eq!(thin_theta(&th, 1.0), th);
        assert_abs_diff_eq!(thin_theta(&th, 0.03).theta1, 3.0, epsilon = 1e-12);
    }

    #[test]
    fn thinning_commutes_with_theta() {
        for &(p, q, rate, pd) in &[(0.9, 0.995, 200.0, 0.5), (0.3, 0.9, 5.0, 0.03), (0.99, 0.999, 1e3, 0.7)] {
            let params = InnerAlexaParams::new(p, q, rate).unwrap();
            let thinned = InnerAlexaParams::new(thin_inner(p, pd), q, rate).unwrap();
            let a = theta_from_inner(&thinned);
            let b = thin_theta(&theta_from_inner(&params), pd);
            assert!((a.theta1 - b.theta1).abs() < 1e-10 * b.theta1.max(1.0));
            assert!((a.theta2 - b.theta2).abs() < 1e-10);
            assert!((a.theta3 - b.theta3).abs() < 1e-10);
        }
    }

    #[test]
    fn thinning_generating_function_identity() {
        let params = InnerAlexaParams::new(0.9, 0.995, 200.0).unwrap();
        let pd = 0.5;
        let thinned = InnerAlexaParams::new(thin_inner(0.9, pd), 0.995, 200.0).unwrap();
        for i in -40..=0 {
            let xi = i as f64 * 0.005;
            let lhs = gen_fn_y(xi, &thinned).unwrap();
            let rhs = gen_fn_y((1.0 + pd * xi.exp_m1()).ln(), &params).unwrap();
            assert!((lhs - rhs).abs() < 1e-12 * lhs.max(1.0), "xi {xi}: {lhs} vs {rhs}");
        }
    }

    #[test]
    fn camera_folding() {
        let th = ThetaParams { theta1: 50.0, theta2: 0.5, theta3: 0.1 };
        let mut cam = CameraModel::ideal();
        assert_eq!(camera_theta(&th, &cam), th);
        cam.f2 = 2.0;
        assert_abs_diff_eq!(camera_theta(&th, &cam).theta3, 0.1 + 1.0 / 50.0, epsilon = 1e-15);
    }

    #[test]
    fn sampling_without_bursts() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let params = InnerAlexaParams::new(0.9, 0.9, 1e-300).unwrap();
        for _ in 0..1000 {
            let f = sample_frame(&params, &mut rng);
            assert_eq!(f.photons, 0);
            assert!(!f.exited);
        }
    }

    #[test]
    fn conditional_rate() {
        let p = InnerAlexaParams::new(0.5, 0.5, 10.0).unwrap();
        assert_eq!(conditional_burst_law(&p).poisson_reduced_rate, 5.0);
    }
}
