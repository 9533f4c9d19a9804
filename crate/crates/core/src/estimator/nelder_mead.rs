//! Derivative-free simplex minimization with restarts.

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

#[derive(Debug, Clone, Copy)]
pub struct SimplexOptions {
    pub max_evals: usize,
    /// Stop when the spread of objective values across the simplex is below this.
    pub ftol: f64,
    /// ... and the simplex diameter is below this.
    pub xtol: f64,
}

impl Default for SimplexOptions {
    fn default() -> Self {
        SimplexOptions { max_evals: 2000, ftol: 1e-8, xtol: 1e-8 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimplexResult {
    pub x: Vec<f64>,
    pub f: f64,
    pub evals: usize,
    pub converged: bool,
}

fn worse(a: f64, b: f64) -> bool {
    // NaN counts as +infinity
    let a = if a.is_nan() { f64::INFINITY } else { a };
    let b = if b.is_nan() { f64::INFINITY } else { b };
    a > b
}

fn order(values: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&i, &j| {
        let a = if values[i].is_nan() { f64::INFINITY } else { values[i] };
        let b = if values[j].is_nan() { f64::INFINITY } else { values[j] };
        a.partial_cmp(&b).unwrap_or(core::cmp::Ordering::Equal)
    });
    idx
}

/// Nelder–Mead from `x0` with an axis-aligned initial simplex of size `step`.
pub fn minimize<F: FnMut(&[f64]) -> f64>(
    mut f: F,
    x0: &[f64],
    step: &[f64],
    opts: SimplexOptions,
) -> SimplexResult {
    let n = x0.len();
    let f0 = f(x0);
    if n == 0 {
        return SimplexResult { x: Vec::new(), f: f0, evals: 1, converged: true };
    }
    let mut points: Vec<Vec<f64>> = Vec::with_capacity(n + 1);
    let mut values: Vec<f64> = Vec::with_capacity(n + 1);
    points.push(x0.to_vec());
    values.push(f0);
    let mut evals = 1;
    for i in 0..n {
        let mut p = x0.to_vec();
        p[i] += step[i];
        let mut v = f(&p);
        evals += 1;
        if !v.is_finite() {
            // try the opposite direction before accepting an infeasible vertex
            p[i] = x0[i] - step[i];
            v = f(&p);
            evals += 1;
        }
        points.push(p);
        values.push(v);
    }

    let mut converged = false;
    let mut centroid = vec![0.0; n];
    let mut trial = vec![0.0; n];
    while evals < opts.max_evals {
        let idx = order(&values);
        let best = idx[0];
        let worst = idx[n];
        let second = idx[n - 1];
        let spread = values[worst] - values[best];
        let diameter = points
            .iter()
            .map(|p| p.iter().zip(&points[best]).fold(0.0f64, |a, (x, y)| a.max((x - y).abs())))
            .fold(0.0f64, f64::max);
        if values[best].is_finite() && spread.is_finite() && spread <= opts.ftol && diameter <= opts.xtol {
            converged = true;
            break;
        }
        if values[best].is_finite() && spread.is_finite() && spread <= opts.ftol * 1e-3 {
            // flat objective: nothing more to gain
            converged = true;
            break;
        }

        centroid.iter_mut().for_each(|c| *c = 0.0);
        for &i in idx.iter().take(n) {
            for (c, x) in centroid.iter_mut().zip(&points[i]) {
                *c += x / n as f64;
            }
        }
        let along = |coef: f64, out: &mut Vec<f64>, pts: &Vec<Vec<f64>>, cen: &Vec<f64>| {
            for k in 0..n {
                out[k] = cen[k] + coef * (pts[worst][k] - cen[k]);
            }
        };

        along(-1.0, &mut trial, &points, &centroid);
        let fr = f(&trial);
        evals += 1;
        if worse(values[best], fr) {
            let reflected = trial.clone();
            along(-2.0, &mut trial, &points, &centroid);
            let fe = f(&trial);
            evals += 1;
            if worse(fr, fe) {
                points[worst].copy_from_slice(&trial);
                values[worst] = fe;
            } else {
                points[worst] = reflected;
                values[worst] = fr;
            }
            continue;
        }
        if worse(values[second], fr) {
            points[worst].copy_from_slice(&trial);
            values[worst] = fr;
            continue;
        }
        // contraction, outside if the reflection beat the worst point
        let outside = worse(values[worst], fr);
        along(if outside { -0.5 } else { 0.5 }, &mut trial, &points, &centroid);
        let fc = f(&trial);
        evals += 1;
        let reference = if outside { fr } else { values[worst] };
        if worse(reference, fc) || (fc == reference && fc.is_finite()) {
            points[worst].copy_from_slice(&trial);
            values[worst] = fc;
            continue;
        }
        // shrink towards the best vertex
        let anchor = points[best].clone();
        for &i in idx.iter().skip(1) {
            for k in 0..n {
                points[i][k] = anchor[k] + 0.5 * (points[i][k] - anchor[k]);
            }
            values[i] = f(&points[i]);
            evals += 1;
        }
    }
    let idx = order(&values);
    SimplexResult { x: points[idx[0]].clone(), f: values[idx[0]], evals, converged }
}

/// Repeats [`minimize`] from the incumbent with a fresh, randomly oriented
/// simplex until a restart improves by less than `opts.ftol`. Such a restart
/// marks the result as converged.
pub fn minimize_with_restarts<F: FnMut(&[f64]) -> f64, R: Rng + ?Sized>(
    mut f: F,
    x0: &[f64],
    step: &[f64],
    opts: SimplexOptions,
    restarts: usize,
    rng: &mut R,
) -> SimplexResult {
    let mut best = minimize(&mut f, x0, step, opts);
    let mut evals = best.evals;
    for _ in 0..restarts {
        if evals >= opts.max_evals {
            break;
        }
        let scaled: Vec<f64> = step
            .iter()
            .map(|s| {
                let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
                sign * s * rng.random_range(0.25..1.0)
            })
            .collect();
        let budget = SimplexOptions { max_evals: opts.max_evals - evals, ..opts };
        let next = minimize(&mut f, &best.x, &scaled, budget);
        evals += next.evals;
        let gain = best.f - next.f;
        let improved = next.f < best.f;
        // a fresh simplex that cannot improve on the incumbent also counts as convergence
        let converged = next.converged || !(gain > opts.ftol);
        if improved {
            best = SimplexResult { evals, ..next };
        }
        best.converged = converged;
        if !(gain > opts.ftol) {
            break;
        }
    }
    best.evals = evals;
    best
}
