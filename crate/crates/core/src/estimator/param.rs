//! Unconstrained coordinates for γ at fixed `m`.
//!
//! Layout: `[lambda (r) | alpha0_1..alpha0_{r-1} | ln theta1 | ln(theta3 + 1/theta1) |
//! logit theta2 (free mode) | logit nu0 (free mode) | alpha1_1..alpha1_{r-1}]`.
//! Equality constraints are solved for `alpha0_0`, `q00` and `alpha1_0`.
//! The theta3 coordinate is the log of the bright-frame photon variance over
//! `theta1^2`, which keeps that variance positive.

#[allow(unused_imports)]
use num_traits::Float;
use alloc::vec::Vec;
use core::ops::Range;

use serde::{Deserialize, Serialize};

use crate::inner::{theta2_from_q00, ThetaParams};
use crate::moments::{SecondOrderParams, MAX_Q00};

pub const LAMBDA_LO: f64 = 1e-6;
pub const LAMBDA_HI: f64 = 1.0 - 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Nu0Mode {
    Free,
    Fixed(f64),
}

/// How θ2 is determined.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Theta2Mode {
    /// Tied to `q00` by the burst model.
    Alexa,
    /// Free in `(0, 1)`.
    Free,
}

fn logistic(u: f64) -> f64 {
    if u >= 0.0 {
        1.0 / (1.0 + (-u).exp())
    } else {
        let e = u.exp();
        e / (1.0 + e)
    }
}

fn logit(p: f64) -> f64 {
    let p = p.clamp(1e-15, 1.0 - 1e-15);
    (p / (1.0 - p)).ln()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layout {
    pub r: usize,
    pub nu0: Nu0Mode,
    pub theta2: Theta2Mode,
}

impl Layout {
    pub fn new(r: usize, nu0: Nu0Mode, theta2: Theta2Mode) -> Self {
        Layout { r, nu0, theta2 }
    }

    fn has_alpha1(&self) -> bool {
        !matches!(self.nu0, Nu0Mode::Fixed(v) if v >= 1.0)
    }

    pub fn lambda(&self) -> Range<usize> {
        0..self.r
    }

    pub fn alpha0(&self) -> Range<usize> {
        self.r..2 * self.r - 1
    }

    pub fn theta(&self) -> Range<usize> {
        let start = 2 * self.r - 1;
        start..start + if self.theta2 == Theta2Mode::Free { 3 } else { 2 }
    }

    fn nu0_index(&self) -> Option<usize> {
        matches!(self.nu0, Nu0Mode::Free).then(|| self.theta().end)
    }

    pub fn alpha1(&self) -> Range<usize> {
        let start = self.theta().end + usize::from(self.nu0_index().is_some());
        start..start + if self.has_alpha1() { self.r - 1 } else { 0 }
    }

    pub fn dim(&self) -> usize {
        self.alpha1().end
    }

    /// Coordinate blocks cycled by the optimizer: kinetics, photon statistics,
    /// initial population.
    pub fn blocks(&self) -> Vec<Vec<usize>> {
        let mut kinetics: Vec<usize> = self.lambda().collect();
        kinetics.extend(self.alpha0());
        let photons: Vec<usize> = self.theta().collect();
        let mut population: Vec<usize> = self.nu0_index().into_iter().collect();
        population.extend(self.alpha1());
        [kinetics, photons, population].into_iter().filter(|b| !b.is_empty()).collect()
    }

    /// Maps coordinates to γ, or `None` when the implied `q00` or the range
    /// constraint on `alpha1` is violated.
    pub fn decode(&self, x: &[f64], m: f64) -> Option<SecondOrderParams> {
        let r = self.r;
        let n = r + 1;
        let mut lambda = Vec::with_capacity(n);
        let mut upper = LAMBDA_HI;
        for &u in &x[self.lambda()] {
            let l = LAMBDA_LO + (upper - LAMBDA_LO) * logistic(u);
            lambda.push(l);
            upper = l;
        }
        lambda.push(1.0);

        let mut alpha0 = Vec::with_capacity(n);
        alpha0.push(0.0);
        alpha0.extend_from_slice(&x[self.alpha0()]);
        alpha0.push(0.0);
        alpha0[0] = 1.0 - alpha0[1..r].iter().sum::<f64>();
        let inv: f64 = alpha0.iter().zip(&lambda).map(|(a, l)| a / l).sum();
        let q00 = 1.0 / inv;
        if !(q00 > 0.0 && q00 <= MAX_Q00) {
            return None;
        }

        let th = &x[self.theta()];
        let theta1 = th[0].exp();
        let theta3 = th[1].exp() - 1.0 / theta1;
        let theta2 = match self.theta2 {
            Theta2Mode::Alexa => theta2_from_q00(q00),
            Theta2Mode::Free => logistic(th[2]),
        };
        if !(theta1.is_finite() && theta1 > 0.0 && theta3.is_finite() && theta2 > 0.0 && theta2 < 1.0) {
            return None;
        }

        let nu0 = match (self.nu0, self.nu0_index()) {
            (Nu0Mode::Fixed(v), _) => v,
            (Nu0Mode::Free, Some(i)) => logistic(x[i]),
            (Nu0Mode::Free, None) => unreachable!(),
        };

        let mut alpha1 = alloc::vec![0.0; n];
        if self.has_alpha1() {
            alpha1[1..r].copy_from_slice(&x[self.alpha1()]);
            let s: f64 = alpha1[1..r].iter().zip(&lambda[1..r]).map(|(a, l)| a / l).sum();
            alpha1[0] = -lambda[0] * s;
            let total = q00 * alpha1.iter().sum::<f64>();
            if !(0.0..=1.0).contains(&total) {
                return None;
            }
        }
        Some(SecondOrderParams { m, nu0, q00, lambda, alpha0, alpha1, theta: ThetaParams { theta1, theta2, theta3 } })
    }

    /// Inverse of [`Layout::decode`] for a γ with descending eigenvalues.
    pub fn encode(&self, gamma: &SecondOrderParams) -> Vec<f64> {
        let r = self.r;
        let mut x = alloc::vec![0.0; self.dim()];
        let mut upper = LAMBDA_HI;
        for (slot, &l) in x[self.lambda()].iter_mut().zip(&gamma.lambda[..r]) {
            let frac = (l - LAMBDA_LO) / (upper - LAMBDA_LO);
            *slot = logit(frac);
            upper = LAMBDA_LO + (upper - LAMBDA_LO) * logistic(*slot);
        }
        x[self.alpha0()].copy_from_slice(&gamma.alpha0[1..r]);
        let th = self.theta();
        x[th.start] = gamma.theta.theta1.ln();
        x[th.start + 1] = (gamma.theta.theta3 + 1.0 / gamma.theta.theta1).max(1e-300).ln();
        if self.theta2 == Theta2Mode::Free {
            x[th.start + 2] = logit(gamma.theta.theta2);
        }
        if let Some(i) = self.nu0_index() {
            x[i] = logit(gamma.nu0);
        }
        if self.has_alpha1() {
            let range = self.alpha1();
            x[range].copy_from_slice(&gamma.alpha1[1..r]);
        }
        x
    }
}
