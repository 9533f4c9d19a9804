//! Starting values: smoothed trace, non-negative multi-exponential fit of the
//! mean, single-molecule brightness from a late plateau.

#[allow(unused_imports)]
use num_traits::Float;
use alloc::vec;
use alloc::vec::Vec;

use nalgebra::{DMatrix, DVector};

use super::nelder_mead::{minimize, SimplexOptions};
use super::param::{Theta2Mode, LAMBDA_HI, LAMBDA_LO};
use super::EstimatorError;
use crate::inner::{theta2_from_q00, CameraModel, ThetaParams};
use crate::moments::SecondOrderParams;

/// Centered moving average with window `ceil(T / 50)`, shrinking at the edges.
pub fn smooth(y: &[f64]) -> Vec<f64> {
    let t_len = y.len();
    let w = t_len.div_ceil(50).max(1);
    let half = w / 2;
    let mut prefix = vec![0.0; t_len + 1];
    for (i, v) in y.iter().enumerate() {
        prefix[i + 1] = prefix[i] + v;
    }
    (0..t_len)
        .map(|t| {
            let lo = t.saturating_sub(half);
            let hi = (lo + w).min(t_len);
            (prefix[hi] - prefix[lo]) / (hi - lo) as f64
        })
        .collect()
}

/// Non-negative least squares for a handful of columns by exhaustive active sets.
fn nnls_small(design: &DMatrix<f64>, target: &DVector<f64>) -> (Vec<f64>, f64) {
    let k = design.ncols();
    let mut best = (vec![0.0; k], target.norm_squared());
    for mask in 1u32..(1 << k) {
        let cols: Vec<usize> = (0..k).filter(|c| mask & (1 << c) != 0).collect();
        let sub = DMatrix::from_fn(design.nrows(), cols.len(), |i, j| design[(i, cols[j])]);
        let Some(coef) = sub.clone().svd(true, true).solve(target, 1e-12).ok() else { continue };
        if coef.iter().any(|&c| c < 0.0) {
            continue;
        }
        let resid = (&sub * &coef - target).norm_squared();
        if resid < best.1 {
            let mut full = vec![0.0; k];
            for (j, &c) in cols.iter().enumerate() {
                full[c] = coef[j];
            }
            best = (full, resid);
        }
    }
    best
}

fn lambda_from(u: f64) -> f64 {
    LAMBDA_LO + (LAMBDA_HI - LAMBDA_LO) / (1.0 + (-u).exp())
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExpFit {
    /// descending
    pub lambda: Vec<f64>,
    pub coef: Vec<f64>,
    pub rss: f64,
}

/// Fits `s_t = sum_x c_x lambda_x^(t-1)` with `r` decaying terms and `c >= 0`.
/// Coefficients are profiled out; rates are searched by simplex from
/// log-spaced time-scale starts.
pub fn multi_exp_fit(s: &[f64], r: usize) -> ExpFit {
    let t_len = s.len();
    let target = DVector::from_column_slice(s);
    let eval = |lam: &[f64]| -> (Vec<f64>, f64) {
        let design = DMatrix::from_fn(t_len, lam.len(), |t, j| lam[j].powi(t as i32));
        nnls_small(&design, &target)
    };
    let objective = |u: &[f64]| -> f64 {
        let lam: Vec<f64> = u.iter().map(|&v| lambda_from(v)).collect();
        eval(&lam).1
    };

    // time scales from a couple of frames to several trace lengths
    let grid: Vec<f64> = (0..6)
        .map(|i| {
            let lo = 1.5f64.ln();
            let hi = (4.0 * t_len as f64).ln();
            (lo + (hi - lo) * i as f64 / 5.0).exp()
        })
        .collect();
    let mut starts: Vec<Vec<f64>> = Vec::new();
    combos(grid.len(), r, &mut Vec::new(), &mut |idx| {
        starts.push(idx.iter().map(|&i| (-1.0 / grid[i]).exp()).collect());
    });

    let to_u = |l: f64| {
        let p = ((l - LAMBDA_LO) / (LAMBDA_HI - LAMBDA_LO)).clamp(1e-12, 1.0 - 1e-12);
        (p / (1.0 - p)).ln()
    };
    let mut best: Option<(Vec<f64>, f64)> = None;
    for start in starts {
        let u0: Vec<f64> = start.iter().map(|&l| to_u(l)).collect();
        let res = minimize(objective, &u0, &vec![0.7; r], SimplexOptions { max_evals: 150 * r, ftol: 1e-10, xtol: 1e-6 });
        if best.as_ref().is_none_or(|b| res.f < b.1) {
            best = Some((res.x, res.f));
        }
    }
    let (u, _) = best.expect("at least one start");
    let lam: Vec<f64> = u.iter().map(|&v| lambda_from(v)).collect();
    let (coef, rss) = eval(&lam);
    let mut pairs: Vec<(f64, f64)> = lam.into_iter().zip(coef).collect();
    pairs.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap_or(core::cmp::Ordering::Equal));
    // keep rates distinct so the nested parameterization stays invertible
    for i in 1..pairs.len() {
        if pairs[i].0 >= pairs[i - 1].0 * (1.0 - 1e-4) {
            pairs[i].0 = (pairs[i - 1].0 * (1.0 - 1e-2)).max(LAMBDA_LO * 2.0);
        }
    }
    ExpFit { lambda: pairs.iter().map(|p| p.0).collect(), coef: pairs.iter().map(|p| p.1).collect(), rss }
}

fn combos(n: usize, k: usize, cur: &mut Vec<usize>, out: &mut impl FnMut(&[usize])) {
    if cur.len() == k {
        out(cur);
        return;
    }
    let start = cur.last().map_or(0, |&l| l + 1);
    for i in start..n {
        cur.push(i);
        combos(n, k, cur, out);
        cur.pop();
    }
}

/// Brightness of one molecule from the longest run of active frames in the
/// last quarter of the trace (10 % trimmed mean); `max(y) / 2` if there is none.
pub fn plateau_brightness(y: &[f64], noise_sd: f64) -> f64 {
    let t_len = y.len();
    let start = t_len - t_len / 4;
    let threshold = 3.0 * noise_sd;
    let (mut best_lo, mut best_len) = (0, 0);
    let mut run_lo = start;
    for t in start..=t_len {
        let active = t < t_len && y[t] > threshold;
        if !active {
            if t - run_lo > best_len {
                best_len = t - run_lo;
                best_lo = run_lo;
            }
            run_lo = t + 1;
        }
    }
    if best_len >= 3 {
        let mut run: Vec<f64> = y[best_lo..best_lo + best_len].to_vec();
        run.sort_by(|a, b| a.partial_cmp(b).unwrap_or(core::cmp::Ordering::Equal));
        let cut = best_len / 10;
        let kept = &run[cut..best_len - cut];
        return kept.iter().sum::<f64>() / kept.len() as f64;
    }
    y.iter().copied().fold(f64::NEG_INFINITY, f64::max) / 2.0
}

/// Starting γ plus the total initial amplitude `m theta1`.
#[derive(Debug, Clone, PartialEq)]
pub struct InitialGuess {
    pub gamma: SecondOrderParams,
    pub amplitude: f64,
    pub m_init: usize,
}

pub fn init_params(
    y: &[f64],
    r: usize,
    camera: &CameraModel,
    m_grid: &[usize],
    theta2_mode: Theta2Mode,
) -> Result<InitialGuess, EstimatorError> {
    let t_len = y.len();
    if r == 0 {
        return Err(EstimatorError::InvalidOptions("r must be at least 1".into()));
    }
    if t_len < 10 * r {
        return Err(EstimatorError::DegenerateTrace(alloc::format!("T = {t_len} below 10 r = {}", 10 * r)));
    }
    if y.iter().any(|v| !v.is_finite()) {
        return Err(EstimatorError::DegenerateTrace("trace has non-finite entries".into()));
    }
    let peak = y.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(peak > 0.0) {
        return Err(EstimatorError::DegenerateTrace("trace carries no positive signal".into()));
    }
    let s = smooth(y);
    let fit = multi_exp_fit(&s, r);
    let amplitude: f64 = fit.coef.iter().sum();
    if !(amplitude > 0.0) {
        return Err(EstimatorError::DegenerateTrace("no decaying component found".into()));
    }

    let noise_sd = (0..t_len).map(|t| camera.sigma_at(t) / camera.a).sum::<f64>() / t_len as f64;
    let theta1_plateau = plateau_brightness(y, noise_sd).max(1e-9);
    let lo = m_grid.iter().copied().min().unwrap_or(1).max(1);
    let hi = m_grid.iter().copied().max().unwrap_or(lo).max(lo);
    let m_init = ((amplitude / theta1_plateau).round() as usize).clamp(lo, hi);

    let mut lambda = fit.lambda.clone();
    lambda.push(1.0);
    let mut alpha0: Vec<f64> = fit.coef.iter().map(|c| c / amplitude).collect();
    alpha0.push(0.0);
    let inv: f64 = alpha0.iter().zip(&lambda).map(|(a, l)| a / l).sum();
    let q00 = (1.0 / inv).min(crate::moments::MAX_Q00);
    let theta2 = match theta2_mode {
        Theta2Mode::Alexa | Theta2Mode::Free => theta2_from_q00(q00),
    };
    let gamma = SecondOrderParams {
        m: m_init as f64,
        nu0: 1.0,
        q00,
        lambda,
        alpha0,
        alpha1: vec![0.0; r + 1],
        theta: ThetaParams { theta1: amplitude / m_init as f64, theta2, theta3: 0.0 },
    };
    Ok(InitialGuess { gamma, amplitude, m_init })
}
