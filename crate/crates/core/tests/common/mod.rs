#![allow(dead_code)]

use htmm_core::inner::{theta2_from_q00, ThetaParams};
use htmm_core::markov::{build_matrices, spectral_decompose, OuterModelSpec};
use nalgebra::DMatrix;
use rand::Rng;

/// Random weights on `n` slots summing to `total`, with `skip` left at zero.
pub fn split<R: Rng>(rng: &mut R, n: usize, total: f64, skip: Option<usize>) -> Vec<f64> {
    let w: Vec<f64> = (0..n).map(|i| if Some(i) == skip { 0.0 } else { rng.random_range(0.01..1.0) }).collect();
    let s: f64 = w.iter().sum();
    w.iter().map(|v| total * v / s).collect()
}

/// Outer model with a dominant diagonal.
pub fn draw_spec<R: Rng>(r: usize, rng: &mut R, nu0: Option<f64>) -> OuterModelSpec {
    let n = r + 1;
    let mut q = vec![vec![0.0; r]; n];
    for z in 0..r {
        let stay = rng.random_range(0.7..0.97);
        let mut rest = split(rng, n, 1.0 - stay, Some(z));
        if z > 0 {
            let moved = rest[r] * 0.7;
            rest[r] -= moved;
            rest[0] += moved;
        }
        for x in 0..n {
            q[x][z] = if x == z { stay } else { rest[x] };
        }
    }
    let nu = match nu0 {
        Some(v0) => {
            let mut nu = split(rng, n, 1.0 - v0, Some(0));
            nu[0] = v0;
            nu
        }
        None => split(rng, n, 1.0, None),
    };
    OuterModelSpec::new(r, q, nu).unwrap()
}

/// Outer model whose full matrix has a real, positive spectrum.
pub fn random_spec<R: Rng>(r: usize, rng: &mut R, nu0: Option<f64>) -> OuterModelSpec {
    loop {
        let spec = draw_spec(r, rng, nu0);
        let full = build_matrices(&spec).unwrap().full;
        if spectral_decompose(&full).map(|d| d.is_positive).unwrap_or(false) {
            return spec;
        }
    }
}

/// Photon statistics consistent with the burst model at the given `q00`.
pub fn random_theta<R: Rng>(rng: &mut R, q00: f64) -> ThetaParams {
    ThetaParams {
        theta1: rng.random_range(0.5..20.0),
        theta2: theta2_from_q00(q00),
        theta3: rng.random_range(0.0..3.0),
    }
}

/// 4x4 column-stochastic matrix whose last column is absorbing and whose
/// upper-left block is strictly positive (hence irreducible).
pub fn random_m3<R: Rng>(rng: &mut R, min_diag: f64) -> DMatrix<f64> {
    let mut m = DMatrix::<f64>::zeros(4, 4);
    for z in 0..3 {
        let d = rng.random_range(min_diag..0.995);
        let rest = split(rng, 4, 1.0 - d, Some(z));
        for x in 0..4 {
            m[(x, z)] = if x == z { d } else { rest[x] };
        }
    }
    m[(3, 3)] = 1.0;
    m
}

pub fn max_abs_diff(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).amax()
}
