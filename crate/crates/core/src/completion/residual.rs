//! The observed-entry residual `P_Ω(X − M)` used by SoftImpute, plus the
//! sparse + low-rank operator `P_Ω(X − M) + M` that stands in for the filled
//! matrix without forming it.

use nalgebra::DMatrix;

use super::svd::{LinearOperator, SvdResult};

/// Observed fraction above which the residual is held zero-padded and
/// multiplied with GEMM instead of CSR loops.
const DENSE_STORAGE_MIN_DENSITY: f64 = 0.25;

#[derive(Debug, Clone)]
struct Csr {
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    values: Vec<f64>,
}

#[derive(Debug, Clone)]
enum Storage {
    Dense(DMatrix<f64>),
    Sparse(Csr),
}

/// Precomputed layout of Ω shared by every residual of one completion run.
#[derive(Debug, Clone)]
pub(crate) struct ObservedPattern {
    rows: usize,
    cols: usize,
    /// Column-major observed flags.
    observed_cm: Vec<bool>,
    /// Column-major zero-filled observations.
    x_cm: Vec<f64>,
    csr_row_ptr: Vec<usize>,
    csr_col_idx: Vec<usize>,
    csr_x: Vec<f64>,
    dense: bool,
}

impl ObservedPattern {
    /// `values` and `observed` are row-major.
    pub(crate) fn new(rows: usize, cols: usize, values: &[f64], observed: &[bool]) -> Self {
        let mut observed_cm = vec![false; rows * cols];
        let mut x_cm = vec![0.0; rows * cols];
        let mut csr_row_ptr = Vec::with_capacity(rows + 1);
        let mut csr_col_idx = Vec::new();
        let mut csr_x = Vec::new();
        csr_row_ptr.push(0);
        for i in 0..rows {
            for j in 0..cols {
                let p = i * cols + j;
                if observed[p] {
                    observed_cm[j * rows + i] = true;
                    x_cm[j * rows + i] = values[p];
                    csr_col_idx.push(j);
                    csr_x.push(values[p]);
                }
            }
            csr_row_ptr.push(csr_col_idx.len());
        }
        let density = csr_col_idx.len() as f64 / (rows * cols) as f64;
        ObservedPattern {
            rows,
            cols,
            observed_cm,
            x_cm,
            csr_row_ptr,
            csr_col_idx,
            csr_x,
            dense: density >= DENSE_STORAGE_MIN_DENSITY,
        }
    }

    /// `P_Ω(X − M)` for a dense column-major estimate `m`.
    pub(crate) fn residual(&self, m: &DMatrix<f64>) -> ObservedResidual {
        debug_assert_eq!(m.shape(), (self.rows, self.cols));
        if self.dense {
            let ms = m.as_slice();
            let data: Vec<f64> = (0..ms.len())
                .map(|p| if self.observed_cm[p] { self.x_cm[p] - ms[p] } else { 0.0 })
                .collect();
            ObservedResidual {
                storage: Storage::Dense(DMatrix::from_vec(self.rows, self.cols, data)),
                rows: self.rows,
                cols: self.cols,
            }
        } else {
            let mut values = Vec::with_capacity(self.csr_x.len());
            for i in 0..self.rows {
                for k in self.csr_row_ptr[i]..self.csr_row_ptr[i + 1] {
                    values.push(self.csr_x[k] - m[(i, self.csr_col_idx[k])]);
                }
            }
            ObservedResidual {
                storage: Storage::Sparse(Csr {
                    row_ptr: self.csr_row_ptr.clone(),
                    col_idx: self.csr_col_idx.clone(),
                    values,
                }),
                rows: self.rows,
                cols: self.cols,
            }
        }
    }

    /// `‖P_Ω(X − M)‖²_F` without building the residual.
    pub(crate) fn observed_squared_error(&self, m: &DMatrix<f64>) -> f64 {
        let ms = m.as_slice();
        (0..ms.len())
            .filter(|&p| self.observed_cm[p])
            .map(|p| (self.x_cm[p] - ms[p]).powi(2))
            .sum()
    }

    /// `P_Ω(X) + P_Ωᶜ(M)` materialized; used only by the dense IST-SVD route.
    pub(crate) fn fill(&self, m: &DMatrix<f64>) -> DMatrix<f64> {
        let ms = m.as_slice();
        let data: Vec<f64> = (0..ms.len())
            .map(|p| if self.observed_cm[p] { self.x_cm[p] } else { ms[p] })
            .collect();
        DMatrix::from_vec(self.rows, self.cols, data)
    }

    /// `P_Ω(X)` zero-filled, column-major.
    pub(crate) fn observed_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_vec(self.rows, self.cols, self.x_cm.clone())
    }
}

/// `P_Ω(X − M)`, stored densely or as CSR depending on the density of Ω.
#[derive(Debug, Clone)]
pub(crate) struct ObservedResidual {
    storage: Storage,
    rows: usize,
    cols: usize,
}

impl ObservedResidual {
    pub(crate) fn squared_norm(&self) -> f64 {
        match &self.storage {
            Storage::Dense(r) => r.norm_squared(),
            Storage::Sparse(csr) => csr.values.iter().map(|v| v * v).sum(),
        }
    }

    fn apply(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        match &self.storage {
            Storage::Dense(r) => r * x,
            Storage::Sparse(csr) => {
                let mut y = DMatrix::zeros(self.rows, x.ncols());
                for c in 0..x.ncols() {
                    let xc = x.column(c);
                    for i in 0..self.rows {
                        let mut acc = 0.0;
                        for k in csr.row_ptr[i]..csr.row_ptr[i + 1] {
                            acc += csr.values[k] * xc[csr.col_idx[k]];
                        }
                        y[(i, c)] = acc;
                    }
                }
                y
            }
        }
    }

    fn apply_transpose(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        match &self.storage {
            Storage::Dense(r) => (x.transpose() * r).transpose(),
            Storage::Sparse(csr) => {
                let mut y = DMatrix::zeros(self.cols, x.ncols());
                for c in 0..x.ncols() {
                    for i in 0..self.rows {
                        let xi = x[(i, c)];
                        if xi == 0.0 {
                            continue;
                        }
                        for k in csr.row_ptr[i]..csr.row_ptr[i + 1] {
                            y[(csr.col_idx[k], c)] += csr.values[k] * xi;
                        }
                    }
                }
                y
            }
        }
    }
}

/// The filled matrix `Z = P_Ω(X − M) + M` with `M = U diag(S) Vᵀ` kept factored.
pub(crate) struct SparsePlusLowRank<'a> {
    residual: &'a ObservedResidual,
    us: DMatrix<f64>,
    ut: DMatrix<f64>,
    vs: DMatrix<f64>,
    vt: DMatrix<f64>,
}

impl<'a> SparsePlusLowRank<'a> {
    pub(crate) fn new(residual: &'a ObservedResidual, factors: &SvdResult) -> Self {
        let mut us = factors.u.clone();
        let mut vs = factors.v.clone();
        for (k, s) in factors.singular_values.iter().enumerate() {
            us.column_mut(k).scale_mut(*s);
            vs.column_mut(k).scale_mut(*s);
        }
        SparsePlusLowRank {
            residual,
            us,
            ut: factors.u.transpose(),
            vs,
            vt: factors.v.transpose(),
        }
    }
}

impl LinearOperator for SparsePlusLowRank<'_> {
    fn nrows(&self) -> usize {
        self.residual.rows
    }

    fn ncols(&self) -> usize {
        self.residual.cols
    }

    fn apply(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let mut y = self.residual.apply(x);
        if self.vt.nrows() > 0 {
            y += &self.us * (&self.vt * x);
        }
        y
    }

    fn apply_transpose(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let mut y = self.residual.apply_transpose(x);
        if self.ut.nrows() > 0 {
            y += &self.vs * (&self.ut * x);
        }
        y
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::completion::svd::dense_svd;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn check_operator_matches_fill(density: f64) {
        let (rows, cols) = (13, 9);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let values: Vec<f64> = (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect();
        let observed: Vec<bool> = (0..rows * cols).map(|_| rng.random_bool(density)).collect();
        let pattern = ObservedPattern::new(rows, cols, &values, &observed);
        assert_eq!(pattern.dense, density >= DENSE_STORAGE_MIN_DENSITY);

        let m = DMatrix::from_fn(rows, cols, |i, j| ((i * 3 + j) % 5) as f64 - 2.0);
        let factors = dense_svd(&m, 9).unwrap();
        let m = factors.reconstruct();
        let residual = pattern.residual(&m);
        let op = SparsePlusLowRank::new(&residual, &factors);
        let z = pattern.fill(&m);
        let x = DMatrix::from_fn(cols, 4, |i, j| (i as f64 - j as f64) * 0.25);
        let xt = DMatrix::from_fn(rows, 4, |i, j| (i + 2 * j) as f64 * 0.1);
        assert!((op.apply(&x) - &z * &x).amax() < 1e-12);
        assert!((op.apply_transpose(&xt) - z.transpose() * &xt).amax() < 1e-12);

        let expected: f64 = (0..rows * cols)
            .filter(|&p| observed[p])
            .map(|p| {
                let (i, j) = (p / cols, p % cols);
                (values[p] - m[(i, j)]).powi(2)
            })
            .sum();
        assert!((residual.squared_norm() - expected).abs() < 1e-10);
    }

    #[test]
    fn sparse_storage_matches_filled_matrix() {
        check_operator_matches_fill(0.15);
    }

    #[test]
    fn dense_storage_matches_filled_matrix() {
        check_operator_matches_fill(0.8);
    }
}
