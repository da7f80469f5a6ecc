//! Randomized truncated SVD over matrix-free operators.

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

/// Something that can be multiplied against dense blocks from either side.
pub trait LinearOperator {
    fn nrows(&self) -> usize;
    fn ncols(&self) -> usize;
    /// `A · x`
    fn apply(&self, x: &DMatrix<f64>) -> DMatrix<f64>;
    /// `Aᵀ · x`
    fn apply_transpose(&self, x: &DMatrix<f64>) -> DMatrix<f64>;
}

/// A dense matrix together with its explicit transpose, so both products run as GEMMs.
pub struct DenseOperator {
    a: DMatrix<f64>,
    at: DMatrix<f64>,
}

impl DenseOperator {
    pub fn new(a: DMatrix<f64>) -> Self {
        let at = a.transpose();
        DenseOperator { a, at }
    }
}

impl LinearOperator for DenseOperator {
    fn nrows(&self) -> usize {
        self.a.nrows()
    }

    fn ncols(&self) -> usize {
        self.a.ncols()
    }

    fn apply(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        &self.a * x
    }

    fn apply_transpose(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        &self.at * x
    }
}

/// Thin SVD factors `U diag(S) Vᵀ`, singular values non-increasing.
#[derive(Debug, Clone)]
pub struct SvdResult {
    pub u: DMatrix<f64>,
    pub singular_values: Vec<f64>,
    pub v: DMatrix<f64>,
}

impl SvdResult {
    /// The explicit rank-0 factorization of an `rows × cols` zero matrix.
    pub fn zero(rows: usize, cols: usize) -> Self {
        SvdResult {
            u: DMatrix::zeros(rows, 0),
            singular_values: Vec::new(),
            v: DMatrix::zeros(cols, 0),
        }
    }

    pub fn rank(&self) -> usize {
        self.singular_values.len()
    }

    pub fn nrows(&self) -> usize {
        self.u.nrows()
    }

    pub fn ncols(&self) -> usize {
        self.v.nrows()
    }

    pub fn nuclear_norm(&self) -> f64 {
        self.singular_values.iter().sum()
    }

    /// Shrinks every singular value by `lambda`, dropping components that reach zero.
    pub fn soft_threshold(&self, lambda: f64) -> SvdResult {
        let keep: Vec<usize> = (0..self.rank()).filter(|&i| self.singular_values[i] > lambda).collect();
        SvdResult {
            u: self.u.select_columns(&keep),
            singular_values: keep.iter().map(|&i| self.singular_values[i] - lambda).collect(),
            v: self.v.select_columns(&keep),
        }
    }

    /// `U diag(S) Vᵀ` as a dense matrix.
    pub fn reconstruct(&self) -> DMatrix<f64> {
        if self.rank() == 0 {
            return DMatrix::zeros(self.nrows(), self.ncols());
        }
        let mut us = self.u.clone();
        for (k, s) in self.singular_values.iter().enumerate() {
            us.column_mut(k).scale_mut(*s);
        }
        us * self.v.transpose()
    }

    fn sorted_truncated(u: DMatrix<f64>, s: Vec<f64>, v: DMatrix<f64>, rank: usize) -> SvdResult {
        let mut order: Vec<usize> = (0..s.len()).collect();
        order.sort_by(|&a, &b| s[b].total_cmp(&s[a]).then(a.cmp(&b)));
        order.truncate(rank);
        SvdResult {
            u: u.select_columns(&order),
            singular_values: order.iter().map(|&i| s[i].max(0.0)).collect(),
            v: v.select_columns(&order),
        }
    }
}

/// Largest-to-smallest diagonal ratio of a Cholesky factor below which the
/// Gram route is not trusted.
const CHOLESKY_MIN_DIAG_RATIO: f64 = 1e-7;

/// One CholeskyQR pass: `y = Q Lᵀ`. `None` when the Gram matrix is too
/// ill-conditioned for the result to be trusted.
fn cholesky_qr(y: &DMatrix<f64>) -> Option<(DMatrix<f64>, DMatrix<f64>)> {
    let gram = y.transpose() * y;
    let l = gram.cholesky()?.unpack();
    let diag = l.diagonal();
    let max = diag.max();
    let min = diag.min();
    if !(min > max * CHOLESKY_MIN_DIAG_RATIO) {
        return None;
    }
    let l_inv = l.solve_lower_triangular(&DMatrix::identity(l.nrows(), l.nrows()))?;
    Some((y * l_inv.transpose(), l))
}

/// Thin QR factorization `y = Q R` with `R` square upper triangular.
///
/// CholeskyQR2 on well-conditioned blocks; Householder QR otherwise.
/// Rows of `y` that are exactly zero stay exactly zero on the Cholesky route.
pub fn thin_qr(y: DMatrix<f64>) -> (DMatrix<f64>, DMatrix<f64>) {
    if y.ncols() == 0 {
        return (y, DMatrix::zeros(0, 0));
    }
    if let Some((q1, l1)) = cholesky_qr(&y) {
        if let Some((q, l2)) = cholesky_qr(&q1) {
            return (q, l2.transpose() * l1.transpose());
        }
    }
    let qr = y.qr();
    (qr.q(), qr.r())
}

/// Orthonormal basis for the columns of `y` with the same column count.
pub fn orthonormalize(y: DMatrix<f64>) -> DMatrix<f64> {
    thin_qr(y).0
}

fn gaussian_block(rows: usize, cols: usize, rng: &mut impl Rng) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| rng.sample::<f64, _>(StandardNormal))
}

/// Randomized rank-`rank` SVD of `op`.
///
/// The sketch has `rank + oversample` columns (capped at `min(m, n)`). When
/// `warm_start` is given its leading columns replace the first Gaussian
/// columns of the sketch. Each power iteration re-orthonormalizes on both
/// sides. When the sketch already spans the full range the result is exact
/// and power iterations are skipped.
pub fn randomized_svd<O: LinearOperator + ?Sized>(
    op: &O,
    rank: usize,
    oversample: usize,
    power_iters: usize,
    rng: &mut impl Rng,
    warm_start: Option<&DMatrix<f64>>,
) -> Result<SvdResult> {
    let (m, n) = (op.nrows(), op.ncols());
    let full = m.min(n);
    if rank == 0 || rank > full {
        return Err(Error::Argument(format!(
            "rank {rank} outside 1..={full} for a {m}x{n} matrix"
        )));
    }
    let width = (rank + oversample).min(full);
    let mut omega = gaussian_block(n, width, rng);
    if let Some(start) = warm_start {
        let k = start.ncols().min(width);
        if k > 0 {
            omega.columns_mut(0, k).copy_from(&start.columns(0, k));
        }
    }

    let mut q = orthonormalize(op.apply(&omega));
    if width < full {
        for _ in 0..power_iters {
            let w = orthonormalize(op.apply_transpose(&q));
            q = orthonormalize(op.apply(&w));
        }
    }

    // Qᵀ A = Cᵀ with C = Aᵀ Q, which is n × width and tall.
    let c = op.apply_transpose(&q);
    // C = Q_c R and R = U_r Σ V_rᵀ, so C = (Q_c U_r) Σ V_rᵀ.
    let (qc, r) = thin_qr(c);
    let (ur, sigma, vr) = exact_svd(&r)?;
    let u = &q * vr;
    Ok(SvdResult::sorted_truncated(u, sigma, qc * ur, rank))
}

fn to_faer(a: &DMatrix<f64>) -> faer::MatRef<'_, f64> {
    faer::MatRef::from_column_major_slice(a.as_slice(), a.nrows(), a.ncols())
}

fn from_faer(a: faer::MatRef<'_, f64>) -> DMatrix<f64> {
    DMatrix::from_fn(a.nrows(), a.ncols(), |i, j| a[(i, j)])
}

/// Sequential faer SVD, so results do not depend on the thread count.
fn faer_svd(a: &DMatrix<f64>, vectors: bool) -> Result<(Vec<f64>, Option<(DMatrix<f64>, DMatrix<f64>)>)> {
    use faer::dyn_stack::{MemBuffer, MemStack};
    use faer::linalg::svd::{svd, svd_scratch, ComputeSvdVectors};

    let (m, n) = a.shape();
    let size = m.min(n);
    let compute = if vectors { ComputeSvdVectors::Thin } else { ComputeSvdVectors::No };
    let mut u = faer::Mat::<f64>::zeros(m, if vectors { size } else { 0 });
    let mut v = faer::Mat::<f64>::zeros(n, if vectors { size } else { 0 });
    let mut s = faer::diag::Diag::<f64>::zeros(size);
    let mut buf = MemBuffer::new(svd_scratch::<f64>(m, n, compute, compute, faer::Par::Seq, Default::default()));
    svd(
        to_faer(a),
        s.as_mut(),
        vectors.then(|| u.as_mut()),
        vectors.then(|| v.as_mut()),
        faer::Par::Seq,
        MemStack::new(&mut buf),
        Default::default(),
    )
    .map_err(|e| Error::Numerical(format!("SVD of a {m}x{n} matrix failed: {e:?}")))?;
    let sigma = s.column_vector().iter().copied().collect();
    Ok((sigma, vectors.then(|| (from_faer(u.as_ref()), from_faer(v.as_ref())))))
}

fn exact_svd(a: &DMatrix<f64>) -> Result<(DMatrix<f64>, Vec<f64>, DMatrix<f64>)> {
    let (sigma, vectors) = faer_svd(a, true)?;
    let (u, v) = vectors.expect("vectors requested");
    Ok((u, sigma, v))
}

/// Singular values of a dense matrix, descending.
pub fn singular_values(a: &DMatrix<f64>) -> Result<Vec<f64>> {
    let mut s = faer_svd(a, false)?.0;
    s.sort_by(|x, y| y.total_cmp(x));
    Ok(s)
}

/// Exact thin SVD of a dense matrix, truncated to `rank_cap` components.
pub fn dense_svd(a: &DMatrix<f64>, rank_cap: usize) -> Result<SvdResult> {
    let (u, sigma, v) = exact_svd(a)?;
    Ok(SvdResult::sorted_truncated(u, sigma, v, rank_cap))
}
