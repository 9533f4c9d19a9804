use htmm_core::inner::{
    conditional_burst_law, gen_fn_b, gen_fn_y, q00_from_inner, q00_from_theta2, sample_frame, theta2_from_q00,
    theta_from_inner, thin_inner, thin_theta, InnerAlexaParams,
};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn params() -> impl Strategy<Value = InnerAlexaParams> {
    (0.05f64..0.99, 0.5f64..0.999, 0.5f64..300.0).prop_map(|(p, q, rate)| InnerAlexaParams::new(p, q, rate).unwrap())
}

proptest! {
    #[test]
    fn generating_functions_are_normalized(params in params()) {
        prop_assert_eq!(gen_fn_b(0.0, &params), 1.0);
        prop_assert_eq!(gen_fn_y(0.0, &params).unwrap(), 1.0);
    }

    #[test]
    fn lambert_inversion_roundtrips(q00 in 0.01f64..=0.99) {
        let back = q00_from_theta2(theta2_from_q00(q00)).unwrap();
        prop_assert!((back - q00).abs() < 1e-10, "{} -> {}", q00, back);
    }

    #[test]
    fn thinning_commutes_with_theta(params in params(), pd in 0.01f64..1.0) {
        let thinned = InnerAlexaParams::new(thin_inner(params.p, pd), params.q, params.rate).unwrap();
        let a = theta_from_inner(&thinned);
        let b = thin_theta(&theta_from_inner(&params), pd);
        prop_assert!((a.theta1 - b.theta1).abs() <= 1e-10 * b.theta1.max(1.0));
        prop_assert!((a.theta2 - b.theta2).abs() <= 1e-10);
        prop_assert!((a.theta3 - b.theta3).abs() <= 1e-10 * b.theta3.abs().max(1.0));
    }

    #[test]
    fn thinning_generating_function_identity(params in params(), pd in 0.01f64..1.0, xi in -0.2f64..0.0) {
        let thinned = InnerAlexaParams::new(thin_inner(params.p, pd), params.q, params.rate).unwrap();
        let lhs = gen_fn_y(xi, &thinned).unwrap();
        let rhs = gen_fn_y((1.0 + pd * xi.exp_m1()).ln(), &params).unwrap();
        prop_assert!((lhs - rhs).abs() < 1e-12 * lhs.max(1.0));
    }
}

struct Draws {
    n: f64,
    y: Vec<f64>,
    stay: Vec<bool>,
}

fn draw(params: &InnerAlexaParams, n: usize, seed: u64) -> Draws {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut y = Vec::with_capacity(n);
    let mut stay = Vec::with_capacity(n);
    for _ in 0..n {
        let f = sample_frame(params, &mut rng);
        y.push(f.photons as f64);
        stay.push(!f.exited);
    }
    Draws { n: n as f64, y, stay }
}

fn mean(v: impl Iterator<Item = f64>, n: f64) -> f64 {
    v.sum::<f64>() / n
}

/// Delta-method standard error of `g(E[a], E[b])` with gradient `(ga, gb)`.
fn delta_se(a: &[f64], b: &[f64], ga: f64, gb: f64) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let var = a.iter().zip(b).map(|(x, y)| (ga * (x - ma) + gb * (y - mb)).powi(2)).sum::<f64>() / (n - 1.0);
    (var / n).sqrt()
}

#[test]
fn theta_closed_forms_match_sampled_frames() {
    let params = InnerAlexaParams::new(0.9, 0.99, 20.0).unwrap();
    let th = theta_from_inner(&params);
    let d = draw(&params, 400_000, 9);

    let q_hat = mean(d.stay.iter().map(|&s| f64::from(u8::from(s))), d.n);
    let q00 = q00_from_inner(&params);
    let q_se = (q00 * (1.0 - q00) / d.n).sqrt();
    assert!((q_hat - q00).abs() < 3.0 * q_se, "q00 {q_hat} vs {q00}");

    let m1 = mean(d.y.iter().copied(), d.n);
    let y_se = (d.y.iter().map(|v| (v - m1).powi(2)).sum::<f64>() / (d.n - 1.0) / d.n).sqrt();
    assert!((m1 - th.theta1).abs() < 3.0 * y_se, "theta1 {m1} vs {}", th.theta1);

    // theta2: share of the mean carried by frames that stay bright
    let ys: Vec<f64> = d.y.iter().zip(&d.stay).map(|(&v, &s)| if s { v } else { 0.0 }).collect();
    let ms = mean(ys.iter().copied(), d.n);
    let t2 = ms / m1;
    let se2 = delta_se(&ys, &d.y, 1.0 / m1, -ms / (m1 * m1));
    assert!((t2 - th.theta2).abs() < 3.0 * se2, "theta2 {t2} vs {}", th.theta2);

    // theta3 from E[Y^2] = theta1^2 (theta3 + 1) + theta1
    let y2: Vec<f64> = d.y.iter().map(|v| v * v).collect();
    let m2 = mean(y2.iter().copied(), d.n);
    let t3 = (m2 - m1) / (m1 * m1) - 1.0;
    let se3 = delta_se(&d.y, &y2, (-m1 - 2.0 * (m2 - m1)) / m1.powi(3), 1.0 / (m1 * m1));
    assert!((t3 - th.theta3).abs() < 3.0 * se3, "theta3 {t3} vs {}", th.theta3);
}

#[test]
fn bursts_of_frames_that_stay_bright_are_poisson() {
    let params = InnerAlexaParams::new(0.5, 0.95, 40.0).unwrap();
    let rate = conditional_burst_law(&params).poisson_reduced_rate;
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let mut counts = vec![0usize; 200];
    let mut n = 0usize;
    while n < 200_000 {
        let f = sample_frame(&params, &mut rng);
        if !f.exited {
            counts[(f.bursts as usize).min(199)] += 1;
            n += 1;
        }
    }
    let nf = n as f64;
    let mut pmf = (-rate).exp();
    let mut mass = 0.0;
    for (k, &c) in counts.iter().enumerate().take(120) {
        if k > 0 {
            pmf *= rate / k as f64;
        }
        mass += pmf;
        let f = c as f64 / nf;
        let se = (pmf * (1.0 - pmf) / nf).sqrt();
        assert!((f - pmf).abs() < 4.0 * se + 1e-5, "k {k}: {f} vs {pmf}");
    }
    assert!(mass > 1.0 - 1e-12);

    // dispersion index of a Poisson law is 1
    let m = counts.iter().enumerate().map(|(k, &c)| k as f64 * c as f64).sum::<f64>() / nf;
    let v = counts.iter().enumerate().map(|(k, &c)| (k as f64 - m).powi(2) * c as f64).sum::<f64>() / (nf - 1.0);
    assert!((m - rate).abs() < 4.0 * (rate / nf).sqrt());
    assert!((v / m - 1.0).abs() < 4.0 * (2.0 / nf).sqrt());
}
