//! Random valid models for the verification suite.

use htmm_core::inner::{theta2_from_q00, ThetaParams};
use htmm_core::markov::{build_matrices, spectral_decompose, OuterModelSpec};
use rand::Rng;

fn split<R: Rng>(rng: &mut R, n: usize, total: f64, skip: Option<usize>) -> Vec<f64> {
    let w: Vec<f64> = (0..n).map(|i| if Some(i) == skip { 0.0 } else { rng.random_range(0.01..1.0) }).collect();
    let s: f64 = w.iter().sum();
    w.iter().map(|v| total * v / s).collect()
}

/// Outer model with a dominant diagonal and a real, positive spectrum.
/// `nu0` pins the initial bright probability.
pub fn random_spec<R: Rng>(r: usize, rng: &mut R, nu0: Option<f64>) -> OuterModelSpec {
    let n = r + 1;
    loop {
        let mut q = vec![vec![0.0; r]; n];
        for z in 0..r {
            let stay = rng.random_range(0.7..0.97);
            let rest = split(rng, n, 1.0 - stay, Some(z));
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
        let Ok(spec) = OuterModelSpec::new(r, q, nu) else { continue };
        let full = build_matrices(&spec).expect("valid spec").full;
        if spectral_decompose(&full).map(|d| d.is_positive).unwrap_or(false) {
            return spec;
        }
    }
}

/// Photon statistics consistent with the burst model at `q00`.
pub fn random_theta<R: Rng>(rng: &mut R, q00: f64) -> ThetaParams {
    ThetaParams {
        theta1: rng.random_range(0.5..5.0),
        theta2: theta2_from_q00(q00),
        theta3: rng.random_range(0.0..3.0),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use htmm_core::simulator::stream_rng;

    #[test]
    fn random_specs_are_valid_with_positive_spectrum() {
        let mut rng = stream_rng(1, 0, 0);
        for r in 1..=3 {
            for nu0 in [None, Some(1.0), Some(0.3)] {
                let spec = random_spec(r, &mut rng, nu0);
                assert_eq!(spec.n_states(), r + 1);
                if let Some(v) = nu0 {
                    assert_eq!(spec.nu[0], v);
                }
                let d = spectral_decompose(&build_matrices(&spec).unwrap().full).unwrap();
                assert!(d.is_positive);
                let th = random_theta(&mut rng, spec.q00());
                assert_eq!(th.theta2, theta2_from_q00(spec.q00()));
            }
        }
    }
}
