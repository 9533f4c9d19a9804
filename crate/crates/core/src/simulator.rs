//! Synthetic traces through the whole acquisition chain: hidden outer path,
//! burst photons, detection thinning, stochastic amplification, offset and
//! background noise, normalization.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, Distribution, Gamma, Normal};
use serde::{Deserialize, Serialize};

use crate::inner::{
    q00_from_inner, sample_frame, theta_from_inner, thin_theta, CameraModel, InnerAlexaParams,
};
use crate::markov::{build_matrices, OuterModelSpec, TransitionMatrices};
use crate::moments::{second_order_from_model, MomentsError, SecondOrderParams};

#[derive(Debug, Clone, PartialEq)]
pub enum SimError {
    InvalidConfig(String),
    InconsistentQ00 { inner: f64, outer: f64 },
}

impl fmt::Display for SimError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SimError::InvalidConfig(msg) => write!(f, "invalid simulation config: {msg}"),
            SimError::InconsistentQ00 { inner, outer } => write!(
                f,
                "bright-stay probability of the burst model ({inner}) disagrees with q[0][0] ({outer})"
            ),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationConfig {
    pub spec: OuterModelSpec,
    pub inner: InnerAlexaParams,
    pub camera: CameraModel,
    pub m: usize,
    #[serde(rename = "T")]
    pub t_len: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "one_replicate")]
    pub replicates: usize,
}

fn one_replicate() -> usize {
    1
}

impl SimulationConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        self.spec.validate().map_err(|e| SimError::InvalidConfig(format!("spec: {e}")))?;
        self.inner.validate().map_err(|e| SimError::InvalidConfig(format!("inner: {e}")))?;
        self.camera.validate().map_err(|e| SimError::InvalidConfig(format!("camera: {e}")))?;
        if self.m == 0 {
            return Err(SimError::InvalidConfig("m: must be at least 1".into()));
        }
        if self.t_len == 0 {
            return Err(SimError::InvalidConfig("T: must be at least 1".into()));
        }
        if self.replicates == 0 {
            return Err(SimError::InvalidConfig("replicates: must be at least 1".into()));
        }
        let s = self.camera.sigma.len();
        if s != 1 && s != self.t_len {
            return Err(SimError::InvalidConfig(format!(
                "camera.sigma: expected 1 or {} entries, found {s}",
                self.t_len
            )));
        }
        let inner = q00_from_inner(&self.inner);
        let outer = self.spec.q00();
        if (inner - outer).abs() > 1e-6 {
            return Err(SimError::InconsistentQ00 { inner, outer });
        }
        Ok(())
    }

    /// Moment parameters of the normalized traces this config produces.
    pub fn second_order_params(&self) -> Result<SecondOrderParams, MomentsError> {
        let theta = thin_theta(&theta_from_inner(&self.inner), self.camera.p_d);
        second_order_from_model(&self.spec, theta, self.m as f64)
    }

    /// FNV-1a over the numeric content of the config.
    pub fn config_hash(&self) -> u64 {
        let mut h = Fnv::default();
        h.usize(self.spec.r);
        self.spec.q.iter().flatten().for_each(|&v| h.f64(v));
        self.spec.nu.iter().for_each(|&v| h.f64(v));
        for v in [self.inner.p, self.inner.q, self.inner.rate] {
            h.f64(v);
        }
        for v in [self.camera.a, self.camera.f2, self.camera.o, self.camera.p_d] {
            h.f64(v);
        }
        self.camera.sigma.iter().for_each(|&v| h.f64(v));
        h.usize(self.m);
        h.usize(self.t_len);
        h.0 ^= self.seed.wrapping_mul(0x9e37_79b9_7f4a_7c15);
        h.0
    }
}

struct Fnv(u64);

impl Default for Fnv {
    fn default() -> Self {
        Fnv(0xcbf2_9ce4_8422_2325)
    }
}

impl Fnv {
    fn bytes(&mut self, b: &[u8]) {
        for &x in b {
            self.0 ^= x as u64;
            self.0 = self.0.wrapping_mul(0x100_0000_01b3);
        }
    }
    fn f64(&mut self, v: f64) {
        self.bytes(&v.to_bits().to_le_bytes());
    }
    fn usize(&mut self, v: usize) {
        self.bytes(&(v as u64).to_le_bytes());
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceMeta {
    pub m_true: usize,
    pub seed: u64,
    pub replicate: u64,
    pub config_hash: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trace {
    pub y: Vec<f64>,
    pub meta: TraceMeta,
}

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Independent generator for the unit `(seed, replicate, stream)`.
pub fn stream_rng(seed: u64, replicate: u64, stream: u64) -> ChaCha8Rng {
    let mut state = seed;
    let a = splitmix64(&mut state);
    state ^= replicate.wrapping_mul(0xd6e8_feb8_6659_fd93);
    let b = splitmix64(&mut state);
    state ^= stream.wrapping_mul(0xa076_1d64_78bd_642f);
    let c = splitmix64(&mut state);
    let d = splitmix64(&mut state);
    let mut key = [0u8; 32];
    for (chunk, word) in key.chunks_mut(8).zip([a, b, c, d]) {
        chunk.copy_from_slice(&word.to_le_bytes());
    }
    ChaCha8Rng::from_seed(key)
}

/// Stream index used for detection and camera noise of a replicate.
const CAMERA_STREAM: u64 = u64::MAX;

/// Index drawn with probability proportional to its (not necessarily normalized) weight.
fn categorical<R: Rng + ?Sized>(weights: impl Iterator<Item = f64> + Clone, rng: &mut R) -> usize {
    let total: f64 = weights.clone().filter(|w| *w > 0.0).sum();
    let u: f64 = rng.random::<f64>() * total;
    let mut acc = 0.0;
    let mut last = 0;
    for (i, w) in weights.enumerate() {
        if w <= 0.0 {
            continue;
        }
        acc += w;
        last = i;
        if u < acc {
            return i;
        }
    }
    last
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HiddenPath {
    /// `X'_1..X'_T`, the state after the slow step of each frame.
    pub states_pre: Vec<usize>,
    /// `X_0..X_T`
    pub states_post: Vec<usize>,
}

fn column_step<R: Rng + ?Sized>(m: &nalgebra::DMatrix<f64>, from: usize, rng: &mut R) -> usize {
    categorical(m.column(from).iter().copied(), rng)
}

pub fn simulate_hidden_path<R: Rng + ?Sized>(spec: &OuterModelSpec, t_len: usize, rng: &mut R) -> HiddenPath {
    let mats = build_matrices(spec).expect("validated outer model");
    let mut x = categorical(spec.nu.iter().copied(), rng);
    let mut states_post = Vec::with_capacity(t_len + 1);
    let mut states_pre = Vec::with_capacity(t_len);
    states_post.push(x);
    for _ in 0..t_len {
        let xp = column_step(&mats.long, x, rng);
        x = column_step(&mats.short, xp, rng);
        states_pre.push(xp);
        states_post.push(x);
    }
    HiddenPath { states_pre, states_post }
}

/// Photon counts of one molecule. The fast step out of the bright state is
/// driven by the burst model, so the exit frequency is `1 - q00` of that model.
fn single_photon_trace<R: Rng + ?Sized>(
    spec: &OuterModelSpec,
    mats: &TransitionMatrices,
    inner: &InnerAlexaParams,
    t_len: usize,
    rng: &mut R,
) -> Vec<u64> {
    let r = spec.r;
    let exit_total: f64 = (1..=r).map(|x| spec.q[x][0]).sum();
    let mut x = categorical(spec.nu.iter().copied(), rng);
    let mut out = Vec::with_capacity(t_len);
    for _ in 0..t_len {
        let xp = column_step(&mats.long, x, rng);
        if xp == 0 {
            let frame = sample_frame(inner, rng);
            out.push(frame.photons);
            x = if frame.exited {
                if exit_total > 0.0 {
                    1 + categorical((1..=r).map(|d| spec.q[d][0]), rng)
                } else {
                    r
                }
            } else {
                0
            };
        } else {
            out.push(0);
            x = xp;
        }
    }
    out
}

/// Summed photon counts of `m` molecules for one replicate.
pub fn simulate_photon_trace(config: &SimulationConfig, replicate: u64) -> Result<Vec<u64>, SimError> {
    config.validate()?;
    let mats = build_matrices(&config.spec).expect("validated outer model");
    let mut total = vec![0u64; config.t_len];
    for k in 0..config.m as u64 {
        let mut rng = stream_rng(config.seed, replicate, k);
        let single = single_photon_trace(&config.spec, &mats, &config.inner, config.t_len, &mut rng);
        for (acc, v) in total.iter_mut().zip(single) {
            *acc += v;
        }
    }
    Ok(total)
}

/// Binomial thinning with detection probability `p_d`.
pub fn apply_detection<R: Rng + ?Sized>(photons: &[u64], p_d: f64, rng: &mut R) -> Vec<u64> {
    if p_d >= 1.0 {
        return photons.to_vec();
    }
    photons
        .iter()
        .map(|&n| if n == 0 { 0 } else { Binomial::new(n, p_d).expect("p_d in (0, 1]").sample(rng) })
        .collect()
}

/// Amplified camera output `a * gain + noise + o`, where the gain of `n`
/// photons is a sum of `n` Gamma-distributed per-photon gains with mean 1 and
/// relative variance `f2 - 1`.
pub fn apply_camera<R: Rng + ?Sized>(detected: &[u64], camera: &CameraModel, rng: &mut R) -> Vec<f64> {
    let excess = camera.f2 - 1.0;
    detected
        .iter()
        .enumerate()
        .map(|(t, &n)| {
            let gain = if n == 0 {
                0.0
            } else if excess <= 0.0 {
                n as f64
            } else {
                Gamma::new(n as f64 / excess, excess).expect("positive shape").sample(rng)
            };
            let sigma = camera.sigma_at(t);
            let noise = if sigma > 0.0 { Normal::new(0.0, sigma).expect("sigma > 0").sample(rng) } else { 0.0 };
            camera.a * gain + noise + camera.o
        })
        .collect()
}

pub fn normalize(ytilde: &[f64], camera: &CameraModel) -> Vec<f64> {
    ytilde.iter().map(|v| (v - camera.o) / camera.a).collect()
}

/// One normalized replicate through the full chain.
pub fn simulate_trace(config: &SimulationConfig, replicate: u64) -> Result<Trace, SimError> {
    let photons = simulate_photon_trace(config, replicate)?;
    let mut rng = stream_rng(config.seed, replicate, CAMERA_STREAM);
    let detected = apply_detection(&photons, config.camera.p_d, &mut rng);
    let raw = apply_camera(&detected, &config.camera, &mut rng);
    Ok(Trace {
        y: normalize(&raw, &config.camera),
        meta: TraceMeta {
            m_true: config.m,
            seed: config.seed,
            replicate,
            config_hash: config.config_hash(),
        },
    })
}

/// All replicates of a config, in replicate order.
pub fn simulate(config: &SimulationConfig) -> Result<Vec<Trace>, SimError> {
    config.validate()?;
    (0..config.replicates as u64).map(|rep| simulate_trace(config, rep)).collect()
}

/// Per-pixel `(mean, variance)` of raw camera output for pixels under constant
/// Poisson illumination with the given photon intensities, over `frames` frames.
pub fn simulate_calibration_stack(
    camera: &CameraModel,
    intensities: &[f64],
    frames: usize,
    seed: u64,
) -> Vec<(f64, f64)> {
    intensities
        .iter()
        .enumerate()
        .map(|(pixel, &rate)| {
            let mut rng = stream_rng(seed, pixel as u64, 0);
            let photons: Vec<u64> = (0..frames).map(|_| crate::inner::poisson(rate, &mut rng)).collect();
            let detected = apply_detection(&photons, camera.p_d, &mut rng);
            let flat = CameraModel { sigma: vec![camera.sigma_at(0)], ..camera.clone() };
            let values = apply_camera(&detected, &flat, &mut rng);
            let n = values.len() as f64;
            let mean = values.iter().sum::<f64>() / n;
            let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
            (mean, var)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracles::monte_carlo_moments;
    use approx::assert_abs_diff_eq;
    use nalgebra::DVector;

    fn two_state_config(m: usize, nu0: f64) -> SimulationConfig {
        let inner = InnerAlexaParams::new(0.8, 0.98, 10.0).unwrap();
        let q00 = q00_from_inner(&inner);
        let spec = OuterModelSpec::new(1, vec![vec![q00], vec![1.0 - q00]], vec![nu0, 1.0 - nu0]).unwrap();
        SimulationConfig { spec, inner, camera: CameraModel::ideal(), m, t_len: 20, seed: 5, replicates: 3 }
    }

    #[test]
    fn bleached_start_stays_bleached() {
        let spec = OuterModelSpec::new(1, vec![vec![0.9], vec![0.1]], vec![0.0, 1.0]).unwrap();
        let mut rng = stream_rng(1, 0, 0);
        let path = simulate_hidden_path(&spec, 50, &mut rng);
        assert!(path.states_post.iter().all(|&x| x == 1));
        assert!(path.states_pre.iter().all(|&x| x == 1));
        let cfg = two_state_config(1, 0.0);
        assert!(simulate_photon_trace(&cfg, 0).unwrap().iter().all(|&v| v == 0));
    }

    #[test]
    fn identity_transitions_keep_the_path_constant() {
        let q = vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![0.0, 0.0]];
        let spec = OuterModelSpec::new(2, q, vec![0.0, 1.0, 0.0]).unwrap();
        let mut rng = stream_rng(2, 0, 0);
        let path = simulate_hidden_path(&spec, 30, &mut rng);
        assert!(path.states_post.iter().all(|&x| x == 1));
    }

    #[test]
    fn occupation_matches_matrix_powers() {
        let q = vec![vec![0.8, 0.1], vec![0.15, 0.85], vec![0.05, 0.05]];
        let spec = OuterModelSpec::new(2, q, vec![0.6, 0.3, 0.1]).unwrap();
        let full = build_matrices(&spec).unwrap().full;
        let n = 20_000;
        let t_len = 6;
        let mut counts = vec![vec![0usize; 3]; t_len + 1];
        let mut rng = stream_rng(3, 0, 0);
        for _ in 0..n {
            let p = simulate_hidden_path(&spec, t_len, &mut rng);
            for (t, &x) in p.states_post.iter().enumerate() {
                counts[t][x] += 1;
            }
        }
        let mut dist = DVector::from_column_slice(&spec.nu);
        for t in 0..=t_len {
            for x in 0..3 {
                let f = counts[t][x] as f64 / n as f64;
                let se = (dist[x] * (1.0 - dist[x]) / n as f64).sqrt().max(1e-12);
                assert!((f - dist[x]).abs() < 4.0 * se + 1e-12, "t {t} x {x}: {f} vs {}", dist[x]);
            }
            dist = &full * dist;
        }
        // absorbing state frequency never decreases
        for t in 1..=t_len {
            assert!(counts[t][2] >= counts[t - 1][2]);
        }
    }

    #[test]
    fn determinism() {
        let cfg = two_state_config(2, 1.0);
        let a = simulate(&cfg).unwrap();
        let b = simulate(&cfg).unwrap();
        assert_eq!(a, b);
        assert_ne!(a[0].y, a[1].y);
    }

    #[test]
    fn config_validation() {
        let mut cfg = two_state_config(1, 1.0);
        cfg.m = 0;
        assert!(matches!(cfg.validate(), Err(SimError::InvalidConfig(_))));
        let mut cfg = two_state_config(1, 1.0);
        cfg.spec.q[0][0] -= 0.01;
        cfg.spec.q[1][0] += 0.01;
        assert!(matches!(cfg.validate(), Err(SimError::InconsistentQ00 { .. })));
        let mut cfg = two_state_config(1, 1.0);
        cfg.camera.sigma = vec![1.0, 2.0];
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn detection_and_camera_limits() {
        let mut rng = stream_rng(4, 0, 0);
        let photons = vec![3u64, 0, 7, 1_000_000];
        assert_eq!(apply_detection(&photons, 1.0, &mut rng), photons);
        let cam = CameraModel { a: 3.0, f2: 1.0, o: 10.0, sigma: vec![0.0], p_d: 1.0 };
        let out = apply_camera(&photons, &cam, &mut rng);
        assert_eq!(out, vec![19.0, 10.0, 31.0, 3_000_010.0]);
        assert_eq!(normalize(&out, &cam), vec![3.0, 0.0, 7.0, 1e6]);
        assert_eq!(normalize(&[10.0; 4], &cam), vec![0.0; 4]);
        let ident = CameraModel::ideal();
        assert_eq!(normalize(&[1.5, 2.5], &ident), vec![1.5, 2.5]);
    }

    #[test]
    fn binomial_thinning_mean() {
        let mut rng = stream_rng(5, 0, 0);
        let photons = vec![1_000_000u64; 200];
        let out = apply_detection(&photons, 0.5, &mut rng);
        let mean = out.iter().map(|&v| v as f64).sum::<f64>() / 200.0;
        let se = (1e6 * 0.25 / 200.0f64).sqrt();
        assert!((mean - 5e5).abs() < 3.0 * se);
    }

    #[test]
    fn camera_moments_per_photon() {
        let mut rng = stream_rng(6, 0, 0);
        let cam = CameraModel { a: 2.0, f2: 1.6, o: 0.0, sigma: vec![0.0], p_d: 1.0 };
        let n = 20_000;
        let vals = apply_camera(&vec![10u64; n], &cam, &mut rng);
        let y = normalize(&vals, &cam);
        let mean = y.iter().sum::<f64>() / n as f64;
        let var = y.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n as f64 - 1.0);
        // mean 10, variance 10 (f2 - 1)
        assert!((mean - 10.0).abs() < 4.0 * (6.0 / n as f64).sqrt());
        assert!((var - 6.0).abs() < 4.0 * 6.0 * (2.0 / n as f64).sqrt());
    }

    #[test]
    fn short_simulation_matches_closed_form_mean() {
        let mut cfg = two_state_config(2, 1.0);
        cfg.replicates = 2000;
        cfg.t_len = 8;
        let traces = simulate(&cfg).unwrap();
        let ys: Vec<Vec<f64>> = traces.into_iter().map(|t| t.y).collect();
        let mc = monte_carlo_moments(&ys).unwrap();
        let g = cfg.second_order_params().unwrap();
        let mu = crate::moments::mean_trace(&g, 8).unwrap();
        assert_abs_diff_eq!(mu[0], 2.0 * theta_from_inner(&cfg.inner).theta1, epsilon = 1e-9);
        for t in 0..8 {
            assert!((mc.mu_hat[t] - mu[t]).abs() < 4.0 * mc.mu_se[t], "t {t}");
        }
    }

    #[test]
    fn exit_destinations_follow_the_bright_column() {
        let inner = InnerAlexaParams::new(0.9, 0.99, 22.314355131420976).unwrap();
        let q00 = q00_from_inner(&inner);
        let q = vec![
            vec![q00, 0.3, 0.05],
            vec![0.14, 0.68, 0.0],
            vec![0.05, 0.01, 0.94],
            vec![1.0 - q00 - 0.19, 0.01, 0.01],
        ];
        let spec = OuterModelSpec::new(3, q, vec![1.0, 0.0, 0.0, 0.0]).unwrap();
        let cfg = SimulationConfig { spec, inner, camera: CameraModel::ideal(), m: 1, t_len: 30, seed: 9, replicates: 4000 };
        let ys: Vec<Vec<f64>> = simulate(&cfg).unwrap().into_iter().map(|t| t.y).collect();
        let mc = monte_carlo_moments(&ys).unwrap();
        let mu = crate::moments::mean_trace(&cfg.second_order_params().unwrap(), 30).unwrap();
        for t in [1, 5, 15, 29] {
            assert!((mc.mu_hat[t] - mu[t]).abs() < 4.0 * mc.mu_se[t], "t {t}: {} vs {}", mc.mu_hat[t], mu[t]);
        }
    }

    #[test]
    fn calibration_stack_slope() {
        let cam = CameraModel { a: 12.0, f2: 1.8, o: 100.0, sigma: vec![5.0], p_d: 1.0 };
        let stack = simulate_calibration_stack(&cam, &[1.0, 10.0, 100.0], 4000, 1);
        let (m0, v0) = stack[0];
        let (m2, v2) = stack[2];
        let slope = (v2 - v0) / (m2 - m0);
        assert!((slope / (12.0 * 1.8) - 1.0).abs() < 0.1, "slope {slope}");
    }
}
