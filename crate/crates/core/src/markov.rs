//! Outer-state Markov structure: the constrained long/short-time transition
//! matrices, their eigendecomposition, the real-spectrum criteria for small
//! dark-state counts and Kemeny–Snell lumping.
//!
//! Matrices are column-stochastic throughout: `M[(to, from)]`.

#[allow(unused_imports)]
use num_traits::Float;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use nalgebra::DMatrix;
use num_complex::Complex;

use serde::{Deserialize, Serialize};

pub type C64 = Complex<f64>;

const STOCHASTIC_TOL: f64 = 1e-9;
const MAX_CONDITION: f64 = 1e12;
const IMAG_TOL: f64 = 1e-10;
const EIG_GROUP_TOL: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub enum MarkovError {
    InvalidSpec(String),
    ShapeMismatch { expected: usize, got: usize },
    NotStochastic { column: usize, sum: f64 },
    /// The bleached column is not the last unit vector.
    NotAbsorbing,
    NotDiagonalizable { condition: f64 },
    NotIrreducible,
    DegenerateDiagonal,
    InvalidArgument(String),
    InvalidPartition(String),
    NotLumpable { from_block: usize, to_block: usize, deviation: f64 },
}

impl fmt::Display for MarkovError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MarkovError::InvalidSpec(msg) => write!(f, "invalid outer model: {msg}"),
            MarkovError::ShapeMismatch { expected, got } => {
                write!(f, "shape mismatch: expected dimension {expected}, got {got}")
            }
            MarkovError::NotStochastic { column, sum } => {
                write!(f, "column {column} sums to {sum}, not 1")
            }
            MarkovError::NotAbsorbing => write!(f, "last state is not absorbing"),
            MarkovError::NotDiagonalizable { condition } => {
                write!(f, "matrix is not diagonalizable (eigenvector condition {condition:e})")
            }
            MarkovError::NotIrreducible => write!(f, "dark/bright block is not irreducible"),
            MarkovError::DegenerateDiagonal => write!(f, "diagonal values are not distinct"),
            MarkovError::InvalidArgument(msg) => write!(f, "invalid argument: {msg}"),
            MarkovError::InvalidPartition(msg) => write!(f, "invalid partition: {msg}"),
            MarkovError::NotLumpable { from_block, to_block, deviation } => write!(
                f,
                "not lumpable: transitions from block {from_block} into block {to_block} differ by {deviation:e}"
            ),
        }
    }
}

/// Parametric outer model: `q[x][z]` is the probability of moving to state `x`
/// from state `z` (for `z < r`), `nu` the law of the initial state.
///
/// State 0 is bright, state `r` is bleached.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OuterModelSpec {
    pub r: usize,
    pub q: Vec<Vec<f64>>,
    pub nu: Vec<f64>,
}

impl OuterModelSpec {
    pub fn new(r: usize, q: Vec<Vec<f64>>, nu: Vec<f64>) -> Result<Self, MarkovError> {
        let spec = OuterModelSpec { r, q, nu };
        spec.validate()?;
        Ok(spec)
    }

    pub fn n_states(&self) -> usize {
        self.r + 1
    }

    /// Probability to stay bright during one exposure.
    pub fn q00(&self) -> f64 {
        self.q[0][0]
    }

    pub fn validate(&self) -> Result<(), MarkovError> {
        let r = self.r;
        if r == 0 {
            return Err(MarkovError::InvalidSpec("r must be at least 1".into()));
        }
        if self.q.len() != r + 1 {
            return Err(MarkovError::InvalidSpec(alloc::format!(
                "q must have {} rows, found {}",
                r + 1,
                self.q.len()
            )));
        }
        for (x, row) in self.q.iter().enumerate() {
            if row.len() != r {
                return Err(MarkovError::InvalidSpec(alloc::format!(
                    "q[{x}] must have {r} columns, found {}",
                    row.len()
                )));
            }
            for (z, &v) in row.iter().enumerate() {
                if !(0.0..=1.0).contains(&v) {
                    return Err(MarkovError::InvalidSpec(alloc::format!(
                        "q[{x}][{z}] = {v} outside [0, 1]"
                    )));
                }
            }
        }
        for z in 0..r {
            let sum: f64 = self.q.iter().map(|row| row[z]).sum();
            if (sum - 1.0).abs() > STOCHASTIC_TOL {
                return Err(MarkovError::InvalidSpec(alloc::format!(
                    "column {z} of q sums to {sum}"
                )));
            }
        }
        if self.nu.len() != r + 1 {
            return Err(MarkovError::InvalidSpec(alloc::format!(
                "nu must have length {}, found {}",
                r + 1,
                self.nu.len()
            )));
        }
        if self.nu.iter().any(|&v| !(v >= 0.0)) {
            return Err(MarkovError::InvalidSpec("nu has negative entries".into()));
        }
        let total: f64 = self.nu.iter().sum();
        if (total - 1.0).abs() > STOCHASTIC_TOL {
            return Err(MarkovError::InvalidSpec(alloc::format!("nu sums to {total}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransitionMatrices {
    pub long: DMatrix<f64>,
    pub short: DMatrix<f64>,
    /// `short * long`
    pub full: DMatrix<f64>,
}

pub fn build_matrices(spec: &OuterModelSpec) -> Result<TransitionMatrices, MarkovError> {
    spec.validate()?;
    let r = spec.r;
    let n = r + 1;
    let mut long = DMatrix::<f64>::zeros(n, n);
    long[(0, 0)] = 1.0;
    long[(r, r)] = 1.0;
    for z in 1..r {
        for x in 0..n {
            long[(x, z)] = spec.q[x][z];
        }
    }
    let mut short = DMatrix::<f64>::identity(n, n);
    for x in 0..n {
        short[(x, 0)] = spec.q[x][0];
    }
    let full = &short * &long;
    Ok(TransitionMatrices { long, short, full })
}

/// Checks that `m` is square, column-stochastic and keeps the last state absorbing.
pub fn check_outer_matrix(m: &DMatrix<f64>) -> Result<(), MarkovError> {
    let n = m.nrows();
    if m.ncols() != n {
        return Err(MarkovError::ShapeMismatch { expected: n, got: m.ncols() });
    }
    if n == 0 {
        return Err(MarkovError::ShapeMismatch { expected: 1, got: 0 });
    }
    for j in 0..n {
        let sum: f64 = m.column(j).iter().sum();
        if (sum - 1.0).abs() > STOCHASTIC_TOL || m.column(j).iter().any(|&v| v < -1e-14) {
            return Err(MarkovError::NotStochastic { column: j, sum });
        }
    }
    let r = n - 1;
    for i in 0..r {
        if m[(i, r)].abs() > STOCHASTIC_TOL {
            return Err(MarkovError::NotAbsorbing);
        }
    }
    Ok(())
}

/// `M = V diag(lambda) V^{-1}` with the bleached eigenpair `(1, e_r)` stored last.
#[derive(Debug, Clone)]
pub struct SpectralDecomposition {
    pub lambda: Vec<C64>,
    pub v: DMatrix<C64>,
    pub v_inv: DMatrix<C64>,
    pub is_real: bool,
    pub is_positive: bool,
    pub condition: f64,
}

impl SpectralDecomposition {
    pub fn reconstruct(&self) -> DMatrix<C64> {
        let n = self.lambda.len();
        let mut scaled = self.v.clone();
        for j in 0..n {
            let l = self.lambda[j];
            for i in 0..n {
                scaled[(i, j)] *= l;
            }
        }
        scaled * &self.v_inv
    }

    /// Real parts of the eigenvalues, or `None` for a complex spectrum.
    pub fn real_lambda(&self) -> Option<Vec<f64>> {
        self.is_real.then(|| self.lambda.iter().map(|l| l.re).collect())
    }

    pub fn residual(&self, m: &DMatrix<f64>) -> f64 {
        let rec = self.reconstruct();
        let mut worst: f64 = 0.0;
        for i in 0..m.nrows() {
            for j in 0..m.ncols() {
                worst = worst.max((rec[(i, j)] - C64::new(m[(i, j)], 0.0)).norm());
            }
        }
        worst
    }
}

pub fn spectral_decompose(m: &DMatrix<f64>) -> Result<SpectralDecomposition, MarkovError> {
    check_outer_matrix(m)?;
    let n = m.nrows();
    let r = n - 1;

    let mut eigs: Vec<C64> = m.complex_eigenvalues().iter().copied().collect();
    // Reserve the eigenvalue nearest to 1 for the bleached state.
    let bleach_idx = eigs
        .iter()
        .enumerate()
        .min_by(|a, b| {
            (a.1 - C64::new(1.0, 0.0))
                .norm()
                .partial_cmp(&(b.1 - C64::new(1.0, 0.0)).norm())
                .unwrap_or(core::cmp::Ordering::Equal)
        })
        .map(|(i, _)| i)
        .unwrap_or(0);
    eigs.remove(bleach_idx);
    for e in eigs.iter_mut() {
        if e.im.abs() < IMAG_TOL {
            e.im = 0.0;
        }
    }
    eigs.sort_by(|a, b| {
        b.re.partial_cmp(&a.re)
            .unwrap_or(core::cmp::Ordering::Equal)
            .then(b.im.partial_cmp(&a.im).unwrap_or(core::cmp::Ordering::Equal))
    });

    let mut lambda = Vec::with_capacity(n);
    let mut v = DMatrix::<C64>::zeros(n, n);
    let mc: DMatrix<C64> = m.map(|x| C64::new(x, 0.0));

    let mut col = 0;
    while col < eigs.len() {
        // group numerically coincident eigenvalues
        let mut end = col + 1;
        while end < eigs.len() && (eigs[end] - eigs[col]).norm() < EIG_GROUP_TOL {
            end += 1;
        }
        let k = end - col;
        let mean = eigs[col..end].iter().fold(C64::new(0.0, 0.0), |acc, &e| acc + e) / (k as f64);
        let near_one = (mean - C64::new(1.0, 0.0)).norm() < EIG_GROUP_TOL;
        let vectors = null_vectors(&mc, mean, k, near_one, r);
        for (off, vec_) in vectors.into_iter().enumerate() {
            let mut vec_ = normalize_phase(vec_);
            let is_real_eig = eigs[col + off].im == 0.0;
            if is_real_eig {
                for c in vec_.iter_mut() {
                    c.im = 0.0;
                }
            }
            for i in 0..n {
                v[(i, col + off)] = vec_[i];
            }
            lambda.push(if is_real_eig { C64::new(eigs[col + off].re, 0.0) } else { eigs[col + off] });
        }
        col = end;
    }
    lambda.push(C64::new(1.0, 0.0));
    v[(r, r)] = C64::new(1.0, 0.0);

    let svd = v.clone().svd(false, false);
    let smax = svd.singular_values.iter().fold(0.0f64, |a, &b| a.max(b));
    let smin = svd.singular_values.iter().fold(f64::INFINITY, |a, &b| a.min(b));
    let condition = if smin > 0.0 { smax / smin } else { f64::INFINITY };
    if !(condition <= MAX_CONDITION) {
        return Err(MarkovError::NotDiagonalizable { condition });
    }
    let v_inv = v.clone().try_inverse().ok_or(MarkovError::NotDiagonalizable { condition })?;

    let is_real = lambda.iter().all(|l| l.im.abs() < IMAG_TOL);
    let is_positive = is_real && lambda.iter().all(|l| l.re > -IMAG_TOL);
    let decomp = SpectralDecomposition { lambda, v, v_inv, is_real, is_positive, condition };
    if decomp.residual(m) >= 1e-9 {
        return Err(MarkovError::NotDiagonalizable { condition });
    }
    Ok(decomp)
}

/// `k` independent vectors spanning the (numerical) null space of `m - shift I`.
/// For shifts near 1 the bleached direction `e_r` is projected out first.
fn null_vectors(m: &DMatrix<C64>, shift: C64, k: usize, skip_bleached: bool, r: usize) -> Vec<Vec<C64>> {
    let n = m.nrows();
    let mut a = m.clone();
    for i in 0..n {
        a[(i, i)] -= shift;
    }
    let svd = a.svd(false, true);
    let v_t = svd.v_t.expect("right singular vectors requested");
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&i, &j| {
        svd.singular_values[i]
            .partial_cmp(&svd.singular_values[j])
            .unwrap_or(core::cmp::Ordering::Equal)
    });
    let take = if skip_bleached { k + 1 } else { k };
    let mut basis: Vec<Vec<C64>> = Vec::new();
    for &idx in order.iter().take(take.min(n)) {
        let mut vec_: Vec<C64> = (0..n).map(|j| v_t[(idx, j)].conj()).collect();
        if skip_bleached {
            vec_[r] = C64::new(0.0, 0.0);
        }
        // Gram–Schmidt against vectors kept so far
        for b in &basis {
            let proj: C64 = b.iter().zip(vec_.iter()).map(|(x, y)| x.conj() * y).sum();
            for (y, x) in vec_.iter_mut().zip(b.iter()) {
                *y -= proj * x;
            }
        }
        let norm = vec_.iter().map(|c| c.norm_sqr()).sum::<f64>().sqrt();
        if norm > 1e-8 {
            for y in vec_.iter_mut() {
                *y /= norm;
            }
            basis.push(vec_);
        }
        if basis.len() == k {
            break;
        }
    }
    while basis.len() < k {
        // Defective: fill with the weakest direction so the conditioning check rejects it.
        basis.push(basis.last().cloned().unwrap_or_else(|| vec![C64::new(0.0, 0.0); n]));
    }
    basis
}

/// Rotates so that the largest-magnitude component is real and positive.
fn normalize_phase(mut v: Vec<C64>) -> Vec<C64> {
    let pivot = v
        .iter()
        .copied()
        .max_by(|a, b| a.norm().partial_cmp(&b.norm()).unwrap_or(core::cmp::Ordering::Equal))
        .unwrap_or(C64::new(1.0, 0.0));
    let norm = pivot.norm();
    if norm > 0.0 {
        let phase = pivot.conj() / norm;
        for c in v.iter_mut() {
            *c *= phase;
        }
    }
    v
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct R2Verdict {
    pub real: bool,
    pub nonnegative: bool,
    pub discriminant: f64,
    /// Eigenvalues of the upper-left 2x2 block, descending.
    pub block_eigenvalues: [f64; 2],
}

/// Real-spectrum check for `r = 2`: the 2x2 block discriminant
/// `(a1 - a4)^2 + 4 a2 a3` is non-negative for any stochastic matrix.
pub fn check_real_spectrum_r2(m: &DMatrix<f64>) -> Result<R2Verdict, MarkovError> {
    if m.nrows() != 3 || m.ncols() != 3 {
        return Err(MarkovError::ShapeMismatch { expected: 3, got: m.nrows().max(m.ncols()) });
    }
    check_outer_matrix(m)?;
    let (a1, a2, a3, a4) = (m[(0, 0)], m[(0, 1)], m[(1, 0)], m[(1, 1)]);
    let discriminant = (a1 - a4) * (a1 - a4) + 4.0 * a2 * a3;
    let real = discriminant >= 0.0;
    let root = discriminant.max(0.0).sqrt();
    let block_eigenvalues = [(a1 + a4 + root) / 2.0, (a1 + a4 - root) / 2.0];
    let nonnegative = (a1 >= 0.5 && a4 >= 0.5) || block_eigenvalues[1] >= -1e-12;
    Ok(R2Verdict { real, nonnegative, discriminant, block_eigenvalues })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct R3Verdict {
    pub lambda0: f64,
    pub condition_value: f64,
    pub real: bool,
}

/// Real-spectrum criterion for `r = 3` based on the Perron eigenvalue of the
/// non-bleached block.
pub fn check_real_spectrum_r3(m: &DMatrix<f64>) -> Result<R3Verdict, MarkovError> {
    if m.nrows() != 4 || m.ncols() != 4 {
        return Err(MarkovError::ShapeMismatch { expected: 4, got: m.nrows().max(m.ncols()) });
    }
    check_outer_matrix(m)?;
    let block = m.view((0, 0), (3, 3)).into_owned();
    if !is_irreducible(&block) {
        return Err(MarkovError::NotIrreducible);
    }
    spectral_decompose(m)?;
    let lambda0 = perron_eigenvalue(&block);
    let a = |i: usize, j: usize| block[(i, j)];
    let b1 = a(0, 0) - lambda0;
    let b5 = a(1, 1) - lambda0;
    let b9 = a(2, 2) - lambda0;
    // a6 a8 + a2 a4 + a3 a7 in row-major numbering of the 3x3 block
    let couplings = a(1, 2) * a(2, 1) + a(0, 1) * a(1, 0) + a(0, 2) * a(2, 0);
    let condition_value =
        (b1 + b5 + b9).powi(2) + 4.0 * (couplings - b1 * b5 - b1 * b9 - b5 * b9);
    Ok(R3Verdict { lambda0, condition_value, real: condition_value >= -1e-12 })
}

/// Boolean reachability closure on the sparsity graph.
pub fn is_irreducible(block: &DMatrix<f64>) -> bool {
    let n = block.nrows();
    let mut reach: Vec<Vec<bool>> =
        (0..n).map(|i| (0..n).map(|j| i == j || block[(i, j)] > 0.0).collect()).collect();
    for k in 0..n {
        for i in 0..n {
            if reach[i][k] {
                for j in 0..n {
                    if reach[k][j] {
                        reach[i][j] = true;
                    }
                }
            }
        }
    }
    reach.iter().all(|row| row.iter().all(|&b| b))
}

/// Perron root of a non-negative irreducible matrix by power iteration on
/// `B + I` (primitive even when `B` is periodic), starting from the uniform vector.
pub fn perron_eigenvalue(block: &DMatrix<f64>) -> f64 {
    let n = block.nrows();
    let shifted = block + DMatrix::<f64>::identity(n, n);
    let mut v = nalgebra::DVector::<f64>::from_element(n, 1.0 / n as f64);
    let mut estimate = 0.0;
    for _ in 0..100_000 {
        let w = &shifted * &v;
        let s: f64 = w.iter().sum();
        let next = w / s;
        let delta = (&next - &v).amax();
        v = next;
        estimate = s;
        if delta < 1e-12 {
            break;
        }
    }
    // Rayleigh-type refinement with the converged positive vector
    let w = &shifted * &v;
    let s: f64 = w.iter().sum();
    if s.is_finite() {
        estimate = s;
    }
    estimate - 1.0
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GapVerdict {
    pub mu1: f64,
    pub mu2: f64,
    pub satisfied: bool,
}

/// Diagonal gap condition `mu2^2 (1 - mu1)^2 >= 2 mu2 (1 + mu1) - 1`.
pub fn check_gap_condition(diag: [f64; 3], lambda0: f64) -> Result<GapVerdict, MarkovError> {
    let mut d = diag;
    d.sort_by(|a, b| b.partial_cmp(a).unwrap_or(core::cmp::Ordering::Equal));
    if (d[0] - d[1]).abs() < 1e-12 || (d[1] - d[2]).abs() < 1e-12 {
        return Err(MarkovError::DegenerateDiagonal);
    }
    if !(lambda0 > 0.0 && lambda0 <= 1.0) || lambda0 < d[0] {
        return Err(MarkovError::InvalidArgument(alloc::format!(
            "lambda0 = {lambda0} must lie in (0, 1] and dominate the diagonal"
        )));
    }
    let mu1 = (lambda0 - d[0]) / (lambda0 - d[1]);
    let mu2 = (lambda0 - d[1]) / (lambda0 - d[2]);
    let satisfied = mu2 * mu2 * (1.0 - mu1) * (1.0 - mu1) >= 2.0 * mu2 * (1.0 + mu1) - 1.0;
    Ok(GapVerdict { mu1, mu2, satisfied })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StatePartition {
    blocks: Vec<Vec<usize>>,
}

impl StatePartition {
    pub fn new(blocks: Vec<Vec<usize>>, n_states: usize) -> Result<Self, MarkovError> {
        let mut seen = vec![false; n_states];
        for block in &blocks {
            if block.is_empty() {
                return Err(MarkovError::InvalidPartition("empty block".into()));
            }
            for &s in block {
                if s >= n_states {
                    return Err(MarkovError::InvalidPartition(alloc::format!(
                        "state {s} out of range"
                    )));
                }
                if seen[s] {
                    return Err(MarkovError::InvalidPartition(alloc::format!(
                        "state {s} appears twice"
                    )));
                }
                seen[s] = true;
            }
        }
        if let Some(missing) = seen.iter().position(|&b| !b) {
            return Err(MarkovError::InvalidPartition(alloc::format!("state {missing} not covered")));
        }
        Ok(StatePartition { blocks })
    }

    pub fn singletons(n_states: usize) -> Self {
        StatePartition { blocks: (0..n_states).map(|s| vec![s]).collect() }
    }

    pub fn blocks(&self) -> &[Vec<usize>] {
        &self.blocks
    }

    pub fn n_states(&self) -> usize {
        self.blocks.iter().map(Vec::len).sum()
    }
}

/// Lumps a column-stochastic matrix along `partition`. `tol` bounds the allowed
/// spread of block-column sums within a source block.
pub fn lump(m: &DMatrix<f64>, partition: &StatePartition, tol: f64) -> Result<DMatrix<f64>, MarkovError> {
    let n = m.nrows();
    if m.ncols() != n {
        return Err(MarkovError::ShapeMismatch { expected: n, got: m.ncols() });
    }
    if partition.n_states() != n {
        return Err(MarkovError::ShapeMismatch { expected: n, got: partition.n_states() });
    }
    let blocks = partition.blocks();
    let k = blocks.len();
    let mut out = DMatrix::<f64>::zeros(k, k);
    for (i, from) in blocks.iter().enumerate() {
        for (j, to) in blocks.iter().enumerate() {
            let sums: Vec<f64> = from.iter().map(|&x| to.iter().map(|&z| m[(z, x)]).sum()).collect();
            let lo = sums.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = sums.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            if hi - lo > tol {
                return Err(MarkovError::NotLumpable { from_block: i, to_block: j, deviation: hi - lo });
            }
            out[(j, i)] = sums.iter().sum::<f64>() / sums.len() as f64;
        }
    }
    Ok(out)
}
