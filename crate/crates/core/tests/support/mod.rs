#![allow(dead_code)]

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use pruneprint::completion::MaskedMatrix;
use pruneprint::tensor::WeightMatrix;

/// One-sided Jacobi SVD. Returns `(U, σ, V)` with `σ` sorted descending and
/// `A = U diag(σ) Vᵀ`; `U` is `m×n` and `V` is `n×n` for `m ≥ n`.
pub fn jacobi_svd(a: &DMatrix<f64>) -> (DMatrix<f64>, Vec<f64>, DMatrix<f64>) {
    if a.nrows() < a.ncols() {
        let (u, s, v) = jacobi_svd(&a.transpose());
        return (v, s, u);
    }
    let n = a.ncols();
    let mut w = a.clone();
    let mut v = DMatrix::<f64>::identity(n, n);
    for _sweep in 0..100 {
        let mut rotated = false;
        for p in 0..n {
            for q in p + 1..n {
                let alpha = w.column(p).norm_squared();
                let beta = w.column(q).norm_squared();
                let gamma = w.column(p).dot(&w.column(q));
                if gamma == 0.0 || gamma.abs() <= 1e-15 * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for m in [&mut w, &mut v] {
                    for i in 0..m.nrows() {
                        let (x, y) = (m[(i, p)], m[(i, q)]);
                        m[(i, p)] = c * x - s * y;
                        m[(i, q)] = s * x + c * y;
                    }
                }
            }
        }
        if !rotated {
            break;
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    let norms: Vec<f64> = (0..n).map(|j| w.column(j).norm()).collect();
    order.sort_by(|&i, &j| norms[j].partial_cmp(&norms[i]).unwrap());
    let mut u = DMatrix::zeros(w.nrows(), n);
    let mut vs = DMatrix::zeros(n, n);
    let mut sigma = Vec::with_capacity(n);
    for (k, &j) in order.iter().enumerate() {
        let s = norms[j];
        sigma.push(s);
        if s > 0.0 {
            u.set_column(k, &(w.column(j) / s));
        }
        vs.set_column(k, &v.column(j));
    }
    (u, sigma, vs)
}

/// Dense `S_λ(Y)` through the Jacobi oracle.
pub fn soft_threshold_oracle(y: &DMatrix<f64>, lambda: f64) -> DMatrix<f64> {
    let (u, s, v) = jacobi_svd(y);
    let shrunk = DMatrix::from_diagonal(&nalgebra::DVector::from_iterator(
        s.len(),
        s.iter().map(|x| (x - lambda).max(0.0)),
    ));
    u * shrunk * v.transpose()
}

pub fn gaussian(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| rng.sample(StandardNormal))
}

/// Rank-`rank` product of Gaussian factors plus `noise`-scaled Gaussian entries.
pub fn low_rank(rows: usize, cols: usize, rank: usize, noise: f64, seed: u64) -> WeightMatrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a = gaussian(rows, rank, &mut rng);
    let b = gaussian(cols, rank, &mut rng);
    let e = gaussian(rows, cols, &mut rng);
    WeightMatrix::from_dmatrix("m", &(a * b.transpose() + e * noise)).unwrap()
}

/// Every entry missing independently with probability `frac`.
pub fn random_missing(len: usize, frac: f64, seed: u64) -> Vec<bool> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..len).map(|_| rng.random_bool(frac)).collect()
}

pub fn masked(m: &WeightMatrix, missing: &[bool]) -> MaskedMatrix {
    MaskedMatrix::from_missing(m.clone(), missing).unwrap()
}

/// `‖a − b‖_F` over positions where `select` holds, relative to `‖b‖_F` there.
pub fn rel_error_on(a: &WeightMatrix, b: &WeightMatrix, select: &[bool]) -> f64 {
    let (mut num, mut den) = (0.0, 0.0);
    for ((x, y), s) in a.data().iter().zip(b.data()).zip(select) {
        if *s {
            num += (x - y).powi(2);
            den += y * y;
        }
    }
    (num / den).sqrt()
}

pub fn frobenius_diff(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).norm()
}
