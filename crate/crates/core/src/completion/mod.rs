//! Nuclear-norm regularized matrix completion.
//!
//! Minimizes `½‖P_Ω(X) − P_Ω(M)‖²_F + λ‖M‖_*` along a decreasing λ path,
//! warm-starting each λ from the previous solution. Each iteration fills the
//! missing entries from the current estimate and applies singular value
//! soft-thresholding to the filled matrix.
//!
//! Two solvers share that iteration:
//!
//! * [`Algorithm::IstSvd`] materializes the filled matrix and takes an exact
//!   dense SVD every step.
//! * [`Algorithm::SoftImpute`] keeps the estimate factored and hands the
//!   randomized SVD an operator made of the observed residual plus the
//!   low-rank factors, so the filled matrix is never formed. The working
//!   rank adapts to the rank of the current estimate, and the previous right
//!   singular vectors seed the next sketch.

mod residual;
pub mod svd;

use std::fmt;

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::WeightMatrix;

use residual::{ObservedPattern, SparsePlusLowRank};
pub use svd::{randomized_svd, DenseOperator, LinearOperator, SvdResult};

/// Extra rank the SoftImpute working subspace carries above the current estimate.
const RANK_HEADROOM: usize = 8;

/// Power iterations used when estimating `σ₁(P_Ω(X))` for the automatic λ path.
const LAMBDA_MAX_POWER_ITERS: usize = 6;

/// A matrix with an observed-entry indicator. Missing slots hold exactly 0.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskedMatrix {
    values: WeightMatrix,
    observed: Vec<bool>,
    observed_count: usize,
}

impl MaskedMatrix {
    /// `observed` is row-major; `true` marks an entry of Ω. Values in missing
    /// slots are replaced by 0.
    pub fn new(values: WeightMatrix, observed: Vec<bool>) -> Result<Self> {
        if observed.len() != values.len() {
            return Err(Error::Shape(format!(
                "observed mask has {} entries, matrix has {}",
                observed.len(),
                values.len()
            )));
        }
        let observed_count = observed.iter().filter(|o| **o).count();
        if observed_count == 0 {
            return Err(Error::Precondition("no observed entries".into()));
        }
        let mut values = values;
        for (v, o) in values.data_mut().iter_mut().zip(&observed) {
            if !*o {
                *v = 0.0;
            }
        }
        Ok(MaskedMatrix {
            values,
            observed,
            observed_count,
        })
    }

    /// Treats `missing[p] == true` as an entry outside Ω.
    pub fn from_missing(values: WeightMatrix, missing: &[bool]) -> Result<Self> {
        MaskedMatrix::new(values, missing.iter().map(|m| !m).collect())
    }

    pub fn values(&self) -> &WeightMatrix {
        &self.values
    }

    pub fn observed(&self) -> &[bool] {
        &self.observed
    }

    pub fn is_observed(&self, row: usize, col: usize) -> bool {
        self.observed[row * self.values.cols() + col]
    }

    pub fn observed_count(&self) -> usize {
        self.observed_count
    }

    pub fn shape(&self) -> (usize, usize) {
        self.values.shape()
    }

    /// Rows and columns with no observed entry.
    pub fn unobserved_lines(&self) -> (Vec<usize>, Vec<usize>) {
        let (rows, cols) = self.shape();
        let mut row_seen = vec![false; rows];
        let mut col_seen = vec![false; cols];
        for i in 0..rows {
            for j in 0..cols {
                if self.observed[i * cols + j] {
                    row_seen[i] = true;
                    col_seen[j] = true;
                }
            }
        }
        let pick = |seen: Vec<bool>| seen.iter().enumerate().filter(|(_, s)| !**s).map(|(k, _)| k).collect();
        (pick(row_seen), pick(col_seen))
    }

    fn pattern(&self) -> ObservedPattern {
        let (rows, cols) = self.shape();
        ObservedPattern::new(rows, cols, self.values.data(), &self.observed)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    IstSvd,
    #[default]
    SoftImpute,
}

impl fmt::Display for Algorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Algorithm::IstSvd => "ist_svd",
            Algorithm::SoftImpute => "softimpute",
        })
    }
}

impl std::str::FromStr for Algorithm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.replace('-', "_").as_str() {
            "ist_svd" => Ok(Algorithm::IstSvd),
            "softimpute" | "soft_impute" => Ok(Algorithm::SoftImpute),
            other => Err(Error::Argument(format!("unknown algorithm {other:?}"))),
        }
    }
}

/// The sequence of regularization weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LambdaPath {
    /// `steps` geometric values from `σ₁(P_Ω(X))` down to `σ₁(P_Ω(X)) · ratio`.
    Auto { steps: usize, ratio: f64 },
    /// Explicit values, strictly decreasing and positive.
    Explicit { values: Vec<f64> },
}

impl Default for LambdaPath {
    fn default() -> Self {
        LambdaPath::Auto {
            steps: 20,
            ratio: 1e-3,
        }
    }
}

impl LambdaPath {
    pub fn validate(&self) -> Result<()> {
        match self {
            LambdaPath::Auto { steps, ratio } => {
                if *steps == 0 {
                    return Err(Error::Argument("lambda path needs at least one step".into()));
                }
                if !(*ratio > 0.0 && *ratio <= 1.0) {
                    return Err(Error::Argument(format!("lambda ratio {ratio} must lie in (0, 1]")));
                }
                if *steps > 1 && *ratio == 1.0 {
                    return Err(Error::Argument("lambda ratio 1 cannot give a strictly decreasing path".into()));
                }
            }
            LambdaPath::Explicit { values } => {
                if values.is_empty() {
                    return Err(Error::Argument("explicit lambda path is empty".into()));
                }
                if values.iter().any(|l| !(l.is_finite() && *l > 0.0)) {
                    return Err(Error::Argument("lambda values must be positive and finite".into()));
                }
                if values.windows(2).any(|w| w[1] >= w[0]) {
                    return Err(Error::Argument("lambda path must be strictly decreasing".into()));
                }
            }
        }
        Ok(())
    }
}

/// Geometric path from `lambda_max` to `lambda_max · ratio`.
pub fn geometric_path(lambda_max: f64, steps: usize, ratio: f64) -> Vec<f64> {
    if steps == 1 {
        return vec![lambda_max * ratio];
    }
    (0..steps)
        .map(|k| lambda_max * ratio.powf(k as f64 / (steps - 1) as f64))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CompletionConfig {
    pub algorithm: Algorithm,
    pub lambda_path: LambdaPath,
    /// Largest rank an iterate may take; clamped to `min(rows, cols)`.
    pub rank_cap: usize,
    pub max_iters_per_lambda: usize,
    /// Stop a λ once `‖M⁺ − M‖_F / max(‖M‖_F, 1e-12)` falls below this.
    pub rel_tol: f64,
    pub svd_oversample: usize,
    pub svd_power_iters: usize,
    pub seed: u64,
}

impl Default for CompletionConfig {
    fn default() -> Self {
        CompletionConfig {
            algorithm: Algorithm::SoftImpute,
            lambda_path: LambdaPath::default(),
            rank_cap: 256,
            max_iters_per_lambda: 100,
            rel_tol: 1e-4,
            svd_oversample: 10,
            svd_power_iters: 2,
            seed: 0,
        }
    }
}

impl CompletionConfig {
    pub fn validate(&self) -> Result<()> {
        self.lambda_path.validate()?;
        if self.rank_cap == 0 {
            return Err(Error::Argument("rank_cap must be positive".into()));
        }
        if self.max_iters_per_lambda == 0 {
            return Err(Error::Argument("max_iters_per_lambda must be positive".into()));
        }
        if !(self.rel_tol.is_finite() && self.rel_tol > 0.0) {
            return Err(Error::Argument(format!("rel_tol {} must be positive", self.rel_tol)));
        }
        Ok(())
    }
}

/// Diagnostics for one λ of the path.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LambdaStep {
    pub lambda: f64,
    pub iterations: usize,
    pub objective: f64,
    pub rel_change: f64,
    pub rank: usize,
}

/// Reported to an observer after every iteration.
#[derive(Debug, Clone, PartialEq)]
pub struct IterationRecord {
    pub lambda_index: usize,
    pub lambda: f64,
    pub iteration: usize,
    pub objective: f64,
    pub rel_change: f64,
    pub rank: usize,
}

#[derive(Debug, Clone)]
pub struct CompletionResult {
    /// The estimate at the final (smallest) λ.
    pub estimate: WeightMatrix,
    /// Factors of `estimate` before unidentifiable lines were cleared.
    pub factors: SvdResult,
    pub per_lambda: Vec<LambdaStep>,
    pub effective_rank: usize,
    /// Rows with no observed entry; their estimate is 0.
    pub unidentifiable_rows: Vec<usize>,
    /// Columns with no observed entry; their estimate is 0.
    pub unidentifiable_cols: Vec<usize>,
}

impl CompletionResult {
    pub fn final_objective(&self) -> Option<f64> {
        self.per_lambda.last().map(|s| s.objective)
    }
}

fn rng_for(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Rank-`rank` randomized SVD of a dense matrix, deterministic in `seed`.
pub fn truncated_svd(
    y: &WeightMatrix,
    rank: usize,
    oversample: usize,
    power_iters: usize,
    seed: u64,
) -> Result<SvdResult> {
    let op = DenseOperator::new(y.to_dmatrix());
    randomized_svd(&op, rank, oversample, power_iters, &mut rng_for(seed), None)
}

/// Factors of `S_λ(Y) = U diag((σᵢ − λ)₊) Vᵀ` computed from a rank-`rank_cap`
/// randomized SVD. Components shrunk to zero are dropped, so the result may
/// have rank 0.
pub fn soft_threshold_svd(
    y: &WeightMatrix,
    lambda: f64,
    rank_cap: usize,
    oversample: usize,
    power_iters: usize,
    seed: u64,
) -> Result<SvdResult> {
    if !(lambda >= 0.0) || !lambda.is_finite() {
        return Err(Error::Argument(format!("lambda {lambda} must be finite and non-negative")));
    }
    let svd = truncated_svd(y, rank_cap, oversample, power_iters, seed)?;
    Ok(svd.soft_threshold(lambda))
}

/// `½‖P_Ω(X − M)‖²_F + λ‖M‖_*`, with the nuclear norm from a dense SVD of `m`.
pub fn objective_value(x: &MaskedMatrix, m: &WeightMatrix, lambda: f64) -> Result<f64> {
    if x.shape() != m.shape() {
        return Err(Error::Argument(format!(
            "estimate is {:?}, observations are {:?}",
            m.shape(),
            x.shape()
        )));
    }
    let fit: f64 = x
        .values()
        .data()
        .iter()
        .zip(m.data())
        .zip(x.observed())
        .filter(|(_, o)| **o)
        .map(|((a, b), _)| (a - b).powi(2))
        .sum();
    let nuclear: f64 = svd::singular_values(&m.to_dmatrix())?.iter().sum();
    Ok(0.5 * fit + lambda * nuclear)
}

/// The λ values `complete` will visit for `x`.
pub fn resolve_lambda_path(x: &MaskedMatrix, cfg: &CompletionConfig) -> Result<Vec<f64>> {
    cfg.lambda_path.validate()?;
    match &cfg.lambda_path {
        LambdaPath::Explicit { values } => Ok(values.clone()),
        LambdaPath::Auto { steps, ratio } => {
            let lambda_max = lambda_max(&x.pattern(), cfg)?;
            Ok(geometric_path(lambda_max, *steps, *ratio))
        }
    }
}

fn lambda_max(pattern: &ObservedPattern, cfg: &CompletionConfig) -> Result<f64> {
    let op = DenseOperator::new(pattern.observed_matrix());
    let power = cfg.svd_power_iters.max(LAMBDA_MAX_POWER_ITERS);
    let svd = randomized_svd(&op, 1, cfg.svd_oversample, power, &mut rng_for(cfg.seed), None)?;
    Ok(svd.singular_values.first().copied().unwrap_or(0.0))
}

pub fn complete(x: &MaskedMatrix, cfg: &CompletionConfig) -> Result<CompletionResult> {
    complete_with_observer(x, cfg, |_| {})
}

/// [`complete`], calling `observer` after every iteration.
pub fn complete_with_observer(
    x: &MaskedMatrix,
    cfg: &CompletionConfig,
    mut observer: impl FnMut(&IterationRecord),
) -> Result<CompletionResult> {
    cfg.validate()?;
    if x.observed_count() == 0 {
        return Err(Error::Precondition("no observed entries".into()));
    }
    let (rows, cols) = x.shape();
    let rank_cap = cfg.rank_cap.min(rows.min(cols));
    let pattern = x.pattern();

    let path = match &cfg.lambda_path {
        LambdaPath::Explicit { values } => values.clone(),
        LambdaPath::Auto { steps, ratio } => {
            let lambda_max = lambda_max(&pattern, cfg)?;
            if lambda_max == 0.0 {
                Vec::new()
            } else {
                geometric_path(lambda_max, *steps, *ratio)
            }
        }
    };

    let solver = Solver {
        pattern: &pattern,
        cfg,
        rank_cap,
        rows,
        cols,
    };
    let (factors, per_lambda) = match cfg.algorithm {
        Algorithm::IstSvd => solver.ist_svd(&path, &mut observer)?,
        Algorithm::SoftImpute => solver.soft_impute(&path, &mut observer)?,
    };

    let (unidentifiable_rows, unidentifiable_cols) = x.unobserved_lines();
    let mut dense = factors.reconstruct();
    for &i in &unidentifiable_rows {
        dense.row_mut(i).fill(0.0);
    }
    for &j in &unidentifiable_cols {
        dense.column_mut(j).fill(0.0);
    }
    let estimate = WeightMatrix::from_dmatrix(x.values().name(), &dense)
        .map_err(|e| Error::Numerical(format!("completion estimate: {e}")))?;
    Ok(CompletionResult {
        estimate,
        effective_rank: factors.rank(),
        factors,
        per_lambda,
        unidentifiable_rows,
        unidentifiable_cols,
    })
}

struct Solver<'a> {
    pattern: &'a ObservedPattern,
    cfg: &'a CompletionConfig,
    rank_cap: usize,
    rows: usize,
    cols: usize,
}

fn relative_change(new: &DMatrix<f64>, old: &DMatrix<f64>) -> f64 {
    let diff: f64 = new
        .as_slice()
        .iter()
        .zip(old.as_slice())
        .map(|(a, b)| (a - b).powi(2))
        .sum::<f64>()
        .sqrt();
    diff / old.norm().max(1e-12)
}

impl Solver<'_> {
    fn ist_svd(
        &self,
        path: &[f64],
        observer: &mut impl FnMut(&IterationRecord),
    ) -> Result<(SvdResult, Vec<LambdaStep>)> {
        let mut factors = SvdResult::zero(self.rows, self.cols);
        let mut m = DMatrix::zeros(self.rows, self.cols);
        let mut steps = Vec::with_capacity(path.len());
        for (lambda_index, &lambda) in path.iter().enumerate() {
            let mut step = LambdaStep {
                lambda,
                iterations: 0,
                objective: f64::NAN,
                rel_change: f64::INFINITY,
                rank: 0,
            };
            for iteration in 1..=self.cfg.max_iters_per_lambda {
                let z = self.pattern.fill(&m);
                let next = svd::dense_svd(&z, self.rank_cap)?.soft_threshold(lambda);
                let next_m = next.reconstruct();
                let rel_change = relative_change(&next_m, &m);
                let objective = 0.5 * self.pattern.observed_squared_error(&next_m) + lambda * next.nuclear_norm();
                factors = next;
                m = next_m;
                step = LambdaStep {
                    lambda,
                    iterations: iteration,
                    objective,
                    rel_change,
                    rank: factors.rank(),
                };
                observer(&IterationRecord {
                    lambda_index,
                    lambda,
                    iteration,
                    objective,
                    rel_change,
                    rank: factors.rank(),
                });
                if rel_change < self.cfg.rel_tol {
                    break;
                }
            }
            steps.push(step);
        }
        Ok((factors, steps))
    }

    fn soft_impute(
        &self,
        path: &[f64],
        observer: &mut impl FnMut(&IterationRecord),
    ) -> Result<(SvdResult, Vec<LambdaStep>)> {
        // Iterations draw from one stream after the λ_max estimate.
        let mut rng = rng_for(self.cfg.seed ^ 0x5eed_50f7_1a9e_0001);
        let mut factors = SvdResult::zero(self.rows, self.cols);
        let mut m = DMatrix::zeros(self.rows, self.cols);
        let mut residual = self.pattern.residual(&m);
        let mut requested = RANK_HEADROOM.min(self.rank_cap);
        let mut steps = Vec::with_capacity(path.len());

        for (lambda_index, &lambda) in path.iter().enumerate() {
            let mut step = LambdaStep {
                lambda,
                iterations: 0,
                objective: f64::NAN,
                rel_change: f64::INFINITY,
                rank: 0,
            };
            for iteration in 1..=self.cfg.max_iters_per_lambda {
                let op = SparsePlusLowRank::new(&residual, &factors);
                let warm = (factors.rank() > 0).then_some(&factors.v);
                // A warm start covering the request stands in for the power iterations.
                let power = if factors.rank() > 0 && factors.rank() + RANK_HEADROOM >= requested {
                    0
                } else {
                    self.cfg.svd_power_iters
                };
                let svd = randomized_svd(
                    &op,
                    requested,
                    self.cfg.svd_oversample,
                    power,
                    &mut rng,
                    warm,
                )?;
                let next = svd.soft_threshold(lambda);
                let next_m = next.reconstruct();
                let rel_change = relative_change(&next_m, &m);
                residual = self.pattern.residual(&next_m);
                let objective = 0.5 * residual.squared_norm() + lambda * next.nuclear_norm();

                // Saturated estimates may be truncating components above λ.
                requested = if next.rank() >= requested {
                    (2 * requested).min(self.rank_cap)
                } else {
                    (next.rank() + RANK_HEADROOM).min(self.rank_cap)
                };
                factors = next;
                m = next_m;
                step = LambdaStep {
                    lambda,
                    iterations: iteration,
                    objective,
                    rel_change,
                    rank: factors.rank(),
                };
                observer(&IterationRecord {
                    lambda_index,
                    lambda,
                    iteration,
                    objective,
                    rel_change,
                    rank: factors.rank(),
                });
                if rel_change < self.cfg.rel_tol {
                    break;
                }
            }
            log::debug!(
                "lambda {:.3e}: {} iterations, rank {}, rel change {:.2e}",
                lambda,
                step.iterations,
                step.rank,
                step.rel_change
            );
            steps.push(step);
        }
        Ok((factors, steps))
    }
}
