//! Synthetic ground truth, pruning masks, scoring metrics and the bench runner.

use std::path::{Path, PathBuf};
use std::time::Instant;

use nalgebra::DMatrix;
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::completion::CompletionConfig;
use crate::defense::{self, DefenseParams, SIGMA_M_LADDER};
use crate::error::{Error, Result};
use crate::report;
use crate::revival::{
    assign_magnitudes, attack_layer_detailed, rank_by_magnitude, retained_target, MagnitudeStrategy, MaskPolicy,
    PruneMask, RevivalPlan, Sign, SignPlan,
};
use crate::tensor::WeightMatrix;

/// Relative noise level used when a spec leaves `noise_std` unset.
pub const DEFAULT_NOISE_FRACTION: f64 = 0.1;

/// Ground-truth generator parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub rows: usize,
    pub cols: usize,
    pub rank: usize,
    /// Entrywise noise scale before rescaling. `None` means
    /// `0.1 × sqrt(rank)`, a tenth of the low-rank component's entry std.
    #[serde(default)]
    pub noise_std: Option<f64>,
    #[serde(default = "default_target_sigma")]
    pub target_sigma: f64,
    #[serde(default)]
    pub seed: u64,
}

fn default_target_sigma() -> f64 {
    0.02
}

impl SynthSpec {
    pub fn new(rows: usize, cols: usize, rank: usize, seed: u64) -> Self {
        SynthSpec {
            rows,
            cols,
            rank,
            noise_std: None,
            target_sigma: default_target_sigma(),
            seed,
        }
    }

    pub fn effective_noise_std(&self) -> f64 {
        self.noise_std
            .unwrap_or(DEFAULT_NOISE_FRACTION * (self.rank as f64).sqrt())
    }

    pub fn validate(&self) -> Result<()> {
        if self.rows == 0 || self.cols == 0 {
            return Err(Error::Argument(format!("synthetic shape {}x{} is empty", self.rows, self.cols)));
        }
        if self.rank == 0 || self.rank > self.rows.min(self.cols) {
            return Err(Error::Argument(format!(
                "rank {} outside 1..={} for {}x{}",
                self.rank,
                self.rows.min(self.cols),
                self.rows,
                self.cols
            )));
        }
        if !(self.target_sigma.is_finite() && self.target_sigma > 0.0) {
            return Err(Error::Argument(format!("target_sigma {} must be positive", self.target_sigma)));
        }
        let noise = self.effective_noise_std();
        if !(noise.is_finite() && noise >= 0.0) {
            return Err(Error::Argument(format!("noise_std {noise} must be non-negative")));
        }
        Ok(())
    }
}

fn standard_normal_block(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    // Row-major draw order so the stream does not depend on storage layout.
    let draws: Vec<f64> = (0..rows * cols).map(|_| rng.sample(StandardNormal)).collect();
    DMatrix::from_row_slice(rows, cols, &draws)
}

/// `A·Bᵀ + E`, rescaled so the population std of the entries is exactly
/// `target_sigma`.
pub fn gen_lowrank_matrix(spec: &SynthSpec) -> Result<WeightMatrix> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let a = standard_normal_block(spec.rows, spec.rank, &mut rng);
    let b = standard_normal_block(spec.cols, spec.rank, &mut rng);
    let mut w = a * b.transpose();
    let noise = spec.effective_noise_std();
    if noise > 0.0 {
        let e = standard_normal_block(spec.rows, spec.cols, &mut rng);
        w += e * noise;
    }
    let n = w.len() as f64;
    let mean = w.sum() / n;
    let std = (w.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
    if std == 0.0 {
        return Err(Error::Degenerate("generated matrix is constant".into()));
    }
    WeightMatrix::from_dmatrix("synth", &(w * (spec.target_sigma / std)))
}

/// Population standard deviation of all entries.
pub fn entry_std(m: &WeightMatrix) -> f64 {
    let n = m.len() as f64;
    let mean = m.data().iter().sum::<f64>() / n;
    (m.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt()
}

/// How pruned positions are chosen.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case", deny_unknown_fields)]
pub enum MaskMode {
    /// Every entry independently with probability `frac`.
    Uniform { frac: f64 },
    /// `round(row_frac · rows)` random rows, each losing
    /// `round(within_row_frac · cols)` random entries.
    RowsPartial { row_frac: f64, within_row_frac: f64 },
    /// The intersection of `round(row_frac · rows)` random rows and
    /// `round(col_frac · cols)` random columns.
    Block { row_frac: f64, col_frac: f64 },
}

impl MaskMode {
    pub fn validate(&self) -> Result<()> {
        let check = |name: &str, v: f64, allow_one: bool| {
            let ok = v > 0.0 && (v < 1.0 || (allow_one && v == 1.0));
            if ok {
                Ok(())
            } else {
                Err(Error::Argument(format!("{name} = {v} is outside the allowed range")))
            }
        };
        match *self {
            MaskMode::Uniform { frac } => check("frac", frac, false),
            MaskMode::RowsPartial {
                row_frac,
                within_row_frac,
            } => {
                check("row_frac", row_frac, false)?;
                check("within_row_frac", within_row_frac, true)
            }
            MaskMode::Block { row_frac, col_frac } => {
                check("row_frac", row_frac, true)?;
                check("col_frac", col_frac, true)
            }
        }
    }
}

fn sorted_subset(n: usize, count: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut picked = index::sample(rng, n, count).into_vec();
    picked.sort_unstable();
    picked
}

fn portion(frac: f64, n: usize) -> usize {
    ((frac * n as f64).round() as usize).min(n)
}

pub fn gen_mask(m: &WeightMatrix, mode: &MaskMode, seed: u64) -> Result<PruneMask> {
    mode.validate()?;
    let (rows, cols) = m.shape();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pruned = vec![false; rows * cols];
    match *mode {
        MaskMode::Uniform { frac } => {
            for p in pruned.iter_mut() {
                *p = rng.random_bool(frac);
            }
        }
        MaskMode::RowsPartial {
            row_frac,
            within_row_frac,
        } => {
            let per_row = portion(within_row_frac, cols);
            for i in sorted_subset(rows, portion(row_frac, rows), &mut rng) {
                for j in sorted_subset(cols, per_row, &mut rng) {
                    pruned[i * cols + j] = true;
                }
            }
        }
        MaskMode::Block { row_frac, col_frac } => {
            let picked_rows = sorted_subset(rows, portion(row_frac, rows), &mut rng);
            let picked_cols = sorted_subset(cols, portion(col_frac, cols), &mut rng);
            for &i in &picked_rows {
                for &j in &picked_cols {
                    pruned[i * cols + j] = true;
                }
            }
        }
    }
    let count = pruned.iter().filter(|&&p| p).count();
    if count == 0 || count == pruned.len() {
        return Err(Error::Argument(format!(
            "mask {mode:?} on {rows}x{cols} prunes {count} of {} entries",
            pruned.len()
        )));
    }
    PruneMask::new(rows, cols, pruned)
}

/// Zeroes every pruned entry, as plain pruning-based unlearning does.
pub fn apply_mask(m: &WeightMatrix, mask: &PruneMask) -> Result<WeightMatrix> {
    if m.shape() != mask.shape() {
        return Err(Error::Argument(format!("matrix is {:?}, mask is {:?}", m.shape(), mask.shape())));
    }
    let mut out = m.clone();
    for p in mask.pruned_indices() {
        out.data_mut()[p] = 0.0;
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SignScope {
    /// Every pruned position; a revived 0 is wrong unless the truth is 0.
    AllPruned,
    /// Pruned positions where both the truth and the revived value are nonzero.
    RetainedOnly,
}

fn check_shapes(truth: &WeightMatrix, other: &WeightMatrix, mask: &PruneMask) -> Result<()> {
    if truth.shape() != other.shape() || truth.shape() != mask.shape() {
        return Err(Error::Argument(format!(
            "shapes differ: truth {:?}, other {:?}, mask {:?}",
            truth.shape(),
            other.shape(),
            mask.shape()
        )));
    }
    Ok(())
}

fn signs_agree(truth: f64, value: f64) -> bool {
    Sign::of(truth) == Sign::of(value)
}

fn accuracy_over(truth: &[f64], values: &[f64], positions: impl Iterator<Item = usize>) -> Option<f64> {
    let (mut hits, mut total) = (0usize, 0usize);
    for p in positions {
        total += 1;
        if signs_agree(truth[p], values[p]) {
            hits += 1;
        }
    }
    (total > 0).then(|| hits as f64 / total as f64)
}

pub fn sign_accuracy(truth: &WeightMatrix, revived: &WeightMatrix, mask: &PruneMask, scope: SignScope) -> Result<f64> {
    check_shapes(truth, revived, mask)?;
    let (t, r) = (truth.data(), revived.data());
    let accuracy = match scope {
        SignScope::AllPruned => accuracy_over(t, r, mask.pruned_indices()),
        SignScope::RetainedOnly => accuracy_over(t, r, mask.pruned_indices().filter(|&p| t[p] != 0.0 && r[p] != 0.0)),
    };
    accuracy.ok_or_else(|| Error::UndefinedMetric(format!("no positions in {scope:?} scope")))
}

/// One row of the Top-K table. `rest_accuracy` is absent when Top-K covers
/// every pruned position.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopKPoint {
    pub k: f64,
    pub topk_count: usize,
    pub topk_accuracy: f64,
    pub rest_accuracy: Option<f64>,
}

pub fn topk_sign_accuracy_curve(
    truth: &WeightMatrix,
    recovered: &WeightMatrix,
    mask: &PruneMask,
    ks: &[f64],
) -> Result<Vec<TopKPoint>> {
    check_shapes(truth, recovered, mask)?;
    if let Some(k) = ks.iter().find(|&&k| !(k > 0.0 && k <= 1.0)) {
        return Err(Error::Argument(format!("k = {k} must lie in (0, 1]")));
    }
    let order = rank_by_magnitude(recovered, mask);
    if order.is_empty() {
        return Err(Error::UndefinedMetric("mask has no pruned positions".into()));
    }
    let (t, r) = (truth.data(), recovered.data());
    // Prefix sums of sign hits along the magnitude order.
    let mut hits = Vec::with_capacity(order.len() + 1);
    hits.push(0usize);
    for &p in &order {
        hits.push(hits.last().unwrap() + signs_agree(t[p], r[p]) as usize);
    }
    let n = order.len();
    Ok(ks
        .iter()
        .map(|&k| {
            let top = retained_target(k, n).max(1);
            let rest = n - top;
            TopKPoint {
                k,
                topk_count: top,
                topk_accuracy: hits[top] as f64 / top as f64,
                rest_accuracy: (rest > 0).then(|| (hits[n] - hits[top]) as f64 / rest as f64),
            }
        })
        .collect())
}

/// Overlap of magnitude quintiles: row `i` is recovered group `R_{i+1}`,
/// column `j` is true group `P_{j+1}`, both ordered largest first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignmentMatrix {
    pub entries: [[f64; 5]; 5],
}

impl AlignmentMatrix {
    pub fn diagonal(&self) -> [f64; 5] {
        std::array::from_fn(|i| self.entries[i][i])
    }

    /// Whether every diagonal entry is the largest in its row.
    pub fn diagonal_dominates_rows(&self) -> bool {
        (0..5).all(|i| self.entries[i].iter().all(|&v| v <= self.entries[i][i]))
    }
}

/// Quintile of each pruned position, keyed by position in `order`.
fn quintile_of(order: &[usize], len: usize) -> Vec<usize> {
    let n = order.len();
    let mut group = vec![usize::MAX; len];
    for (rank, &p) in order.iter().enumerate() {
        group[p] = rank * 5 / n;
    }
    group
}

pub fn alignment_matrix(truth: &WeightMatrix, recovered: &WeightMatrix, mask: &PruneMask) -> Result<AlignmentMatrix> {
    check_shapes(truth, recovered, mask)?;
    if mask.pruned_count() < 5 {
        return Err(Error::Precondition(format!(
            "alignment needs at least 5 pruned positions, found {}",
            mask.pruned_count()
        )));
    }
    let r_order = rank_by_magnitude(recovered, mask);
    let p_group = quintile_of(&rank_by_magnitude(truth, mask), truth.len());
    let r_group = quintile_of(&r_order, truth.len());
    let mut counts = [[0usize; 5]; 5];
    for &p in &r_order {
        counts[r_group[p]][p_group[p]] += 1;
    }
    let entries = std::array::from_fn(|i| {
        let total: usize = counts[i].iter().sum();
        std::array::from_fn(|j| counts[i][j] as f64 / total as f64)
    });
    Ok(AlignmentMatrix { entries })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IdealVariant {
    /// True magnitudes with seeded random signs.
    TrueMagRandomSign,
    /// True signs with magnitudes sampled from the surviving line pool.
    TrueSignSampledMag,
    /// True signs with neuron-max magnitudes.
    TrueSignNms,
}

impl std::fmt::Display for IdealVariant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            IdealVariant::TrueMagRandomSign => "true_mag_random_sign",
            IdealVariant::TrueSignSampledMag => "true_sign_sampled_mag",
            IdealVariant::TrueSignNms => "true_sign_nms",
        })
    }
}

impl std::str::FromStr for IdealVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.replace('-', "_").as_str() {
            "true_mag_random_sign" | "a" => Ok(IdealVariant::TrueMagRandomSign),
            "true_sign_sampled_mag" | "b" => Ok(IdealVariant::TrueSignSampledMag),
            "true_sign_nms" | "c" => Ok(IdealVariant::TrueSignNms),
            other => Err(Error::Argument(format!("unknown ideal-case variant {other:?}"))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct IdealOutcome {
    pub variant: IdealVariant,
    pub revived: WeightMatrix,
    pub sign_accuracy: f64,
}

/// Builds one of the idealized revivals where either the signs or the
/// magnitudes of the pruned entries are known exactly.
pub fn ideal_case_study(
    truth: &WeightMatrix,
    mask: &PruneMask,
    variant: IdealVariant,
    plan: &RevivalPlan,
    seed: u64,
) -> Result<IdealOutcome> {
    let pruned = apply_mask(truth, mask)?;
    let revived = match variant {
        IdealVariant::TrueMagRandomSign => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut out = pruned;
            for p in mask.pruned_indices() {
                let magnitude = truth.data()[p].abs();
                out.data_mut()[p] = if rng.random_bool(0.5) { magnitude } else { -magnitude };
            }
            out
        }
        IdealVariant::TrueSignSampledMag | IdealVariant::TrueSignNms => {
            let strategy = if variant == IdealVariant::TrueSignNms {
                MagnitudeStrategy::NeuronMax
            } else {
                MagnitudeStrategy::NeuronSample
            };
            let ideal_plan = RevivalPlan {
                k_fraction: 1.0,
                magnitude_strategy: strategy,
                seed,
                ..plan.clone()
            };
            let decisions = mask.pruned_indices().map(|p| (p, Sign::of(truth.data()[p]))).collect();
            let signs = SignPlan::new(truth.rows(), truth.cols(), decisions);
            assign_magnitudes(&pruned, mask, &ideal_plan, &signs)?.matrix
        }
    };
    let sign_accuracy = sign_accuracy(truth, &revived, mask, SignScope::AllPruned)?;
    Ok(IdealOutcome {
        variant,
        revived,
        sign_accuracy,
    })
}

/// Default Top-K fractions scored for every bench cell.
pub fn default_topk_ks() -> Vec<f64> {
    vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0]
}

fn default_ladder() -> Vec<f64> {
    SIGMA_M_LADDER.to_vec()
}

/// Obfuscation scales to try on one pruned matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DefenseSweep {
    #[serde(default = "default_ladder")]
    pub sigma_m: Vec<f64>,
    /// Detector half-width; `σ_U / 10` when unset.
    #[serde(default)]
    pub w: Option<f64>,
}

impl Default for DefenseSweep {
    fn default() -> Self {
        DefenseSweep {
            sigma_m: default_ladder(),
            w: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CellConfig {
    pub spec: SynthSpec,
    pub mask: MaskMode,
    #[serde(default)]
    pub plan: RevivalPlan,
    #[serde(default)]
    pub defense: Option<DefenseSweep>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchConfig {
    #[serde(default)]
    pub master_seed: u64,
    #[serde(default)]
    pub completion: CompletionConfig,
    #[serde(default = "default_topk_ks")]
    pub topk_ks: Vec<f64>,
    #[serde(default)]
    pub cells: Vec<CellConfig>,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            master_seed: 0,
            completion: CompletionConfig::default(),
            topk_ks: default_topk_ks(),
            cells: Vec::new(),
        }
    }
}

impl BenchConfig {
    pub fn validate(&self) -> Result<()> {
        self.completion.validate()?;
        if let Some(k) = self.topk_ks.iter().find(|&&k| !(k > 0.0 && k <= 1.0)) {
            return Err(Error::Argument(format!("top-k fraction {k} must lie in (0, 1]")));
        }
        for (i, cell) in self.cells.iter().enumerate() {
            let tag = |e: Error| Error::Argument(format!("cell {i}: {e}"));
            cell.spec.validate().map_err(tag)?;
            cell.mask.validate().map_err(tag)?;
            cell.plan.validate().map_err(tag)?;
            if let Some(sweep) = &cell.defense {
                if sweep.sigma_m.is_empty() {
                    return Err(Error::Argument(format!("cell {i}: defense sweep has no sigma_m values")));
                }
                if let Some(s) = sweep.sigma_m.iter().find(|s| !(s.is_finite() && **s >= 0.0)) {
                    return Err(Error::Argument(format!("cell {i}: sigma_m {s} must be non-negative")));
                }
                if let Some(w) = sweep.w {
                    if !(w.is_finite() && w > 0.0) {
                        return Err(Error::Argument(format!("cell {i}: w {w} must be positive")));
                    }
                }
            }
        }
        Ok(())
    }
}

/// SplitMix64 finalizer over `base + stream`, giving independent sub-seeds.
pub fn derive_seed(base: u64, stream: u64) -> u64 {
    let mut z = base.wrapping_add(stream.wrapping_mul(0x9e37_79b9_7f4a_7c15));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub const STREAM_MATRIX: u64 = 1;
pub const STREAM_MASK: u64 = 2;
pub const STREAM_PLAN: u64 = 3;
pub const STREAM_OBFUSCATION: u64 = 4;
pub const STREAM_COMPLETION: u64 = 5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DefenseOutcome {
    pub sigma_m: f64,
    /// Scale of the surviving entries, estimated from the pruned matrix.
    pub sigma_u: f64,
    pub w: f64,
    pub detector_score: f64,
    /// Analytic `p(w)` with `α` set to the true pruned fraction.
    pub detect_probability: Option<f64>,
    /// Fraction of the true mask recovered by exact-zero extraction.
    pub mask_recall: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackMetrics {
    pub extracted_pruned_fraction: f64,
    pub retained: usize,
    pub effective_rank: usize,
    pub unidentifiable_rows: usize,
    pub unidentifiable_cols: usize,
    pub sign_accuracy_overall: f64,
    pub sign_accuracy_retained: Option<f64>,
    pub missing_rel_error: f64,
    pub topk_curve: Vec<TopKPoint>,
    pub alignment: AlignmentMatrix,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellReport {
    pub index: usize,
    /// Cells expanded from one defense sweep share a group and its seed.
    pub group: usize,
    pub seed: u64,
    pub spec: SynthSpec,
    pub mask: MaskMode,
    pub mask_seed: u64,
    pub plan: RevivalPlan,
    pub completion_seed: u64,
    pub pruned_fraction: Option<f64>,
    pub defense: Option<DefenseOutcome>,
    pub attack: Option<AttackMetrics>,
    pub error: Option<String>,
    pub wall_time_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub config: BenchConfig,
    pub cells: Vec<CellReport>,
    pub wall_time_s: f64,
}

impl BenchReport {
    /// Copy with every wall time zeroed, for reproducibility comparisons.
    pub fn without_timings(&self) -> BenchReport {
        let mut out = self.clone();
        out.wall_time_s = 0.0;
        for c in &mut out.cells {
            c.wall_time_s = 0.0;
        }
        out
    }

    pub fn summary_rows(&self) -> Vec<CellSummaryRow> {
        self.cells
            .iter()
            .map(|c| CellSummaryRow {
                cell: c.index,
                group: c.group,
                seed: c.seed,
                rows: c.spec.rows,
                cols: c.spec.cols,
                rank: c.spec.rank,
                mask: mask_label(&c.mask),
                pruned_fraction: c.pruned_fraction,
                k_fraction: c.plan.k_fraction,
                magnitude: c.plan.magnitude_strategy.to_string(),
                sigma_m: c.defense.as_ref().map(|d| d.sigma_m),
                sign_accuracy_overall: c.attack.as_ref().map(|a| a.sign_accuracy_overall),
                sign_accuracy_retained: c.attack.as_ref().and_then(|a| a.sign_accuracy_retained),
                missing_rel_error: c.attack.as_ref().map(|a| a.missing_rel_error),
                effective_rank: c.attack.as_ref().map(|a| a.effective_rank),
                error: c.error.clone(),
                wall_time_s: c.wall_time_s,
            })
            .collect()
    }

    pub fn topk_rows(&self) -> Vec<TopKRow> {
        let mut rows = Vec::new();
        for c in &self.cells {
            for p in c.attack.iter().flat_map(|a| &a.topk_curve) {
                rows.push(TopKRow {
                    cell: c.index,
                    k: p.k,
                    topk_count: p.topk_count,
                    topk_accuracy: p.topk_accuracy,
                    rest_accuracy: p.rest_accuracy,
                });
            }
        }
        rows
    }

    pub fn alignment_rows(&self) -> Vec<AlignmentRow> {
        let mut rows = Vec::new();
        for c in &self.cells {
            if let Some(a) = &c.attack {
                for (i, r) in a.alignment.entries.iter().enumerate() {
                    rows.push(AlignmentRow {
                        cell: c.index,
                        recovered_group: i + 1,
                        p1: r[0],
                        p2: r[1],
                        p3: r[2],
                        p4: r[3],
                        p5: r[4],
                    });
                }
            }
        }
        rows
    }

    pub fn defense_rows(&self) -> Vec<DefenseRow> {
        self.cells
            .iter()
            .filter_map(|c| {
                c.defense.as_ref().map(|d| DefenseRow {
                    cell: c.index,
                    group: c.group,
                    sigma_m: d.sigma_m,
                    sigma_u: d.sigma_u,
                    w: d.w,
                    detector_score: d.detector_score,
                    detect_probability: d.detect_probability,
                    mask_recall: d.mask_recall,
                    sign_accuracy_overall: c.attack.as_ref().map(|a| a.sign_accuracy_overall),
                })
            })
            .collect()
    }

    /// Writes `cells.csv`, `topk.csv`, `alignment.csv` and `defense.csv` into
    /// `dir`, skipping tables without rows. Returns the files written.
    pub fn write_tables(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        let mut written = Vec::new();
        let mut put = |name: &str, rows_empty: bool, write: &dyn Fn(&Path) -> Result<()>| -> Result<()> {
            if !rows_empty {
                let path = dir.join(name);
                write(&path)?;
                written.push(path);
            }
            Ok(())
        };
        let (cells, topk, alignment, defense) =
            (self.summary_rows(), self.topk_rows(), self.alignment_rows(), self.defense_rows());
        put("cells.csv", cells.is_empty(), &|p| report::write_csv(&cells, p))?;
        put("topk.csv", topk.is_empty(), &|p| report::write_csv(&topk, p))?;
        put("alignment.csv", alignment.is_empty(), &|p| report::write_csv(&alignment, p))?;
        put("defense.csv", defense.is_empty(), &|p| report::write_csv(&defense, p))?;
        Ok(written)
    }
}

fn mask_label(mode: &MaskMode) -> String {
    match *mode {
        MaskMode::Uniform { frac } => format!("uniform({frac})"),
        MaskMode::RowsPartial {
            row_frac,
            within_row_frac,
        } => format!("rows_partial({row_frac},{within_row_frac})"),
        MaskMode::Block { row_frac, col_frac } => format!("block({row_frac},{col_frac})"),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellSummaryRow {
    pub cell: usize,
    pub group: usize,
    pub seed: u64,
    pub rows: usize,
    pub cols: usize,
    pub rank: usize,
    pub mask: String,
    pub pruned_fraction: Option<f64>,
    pub k_fraction: f64,
    pub magnitude: String,
    pub sigma_m: Option<f64>,
    pub sign_accuracy_overall: Option<f64>,
    pub sign_accuracy_retained: Option<f64>,
    pub missing_rel_error: Option<f64>,
    pub effective_rank: Option<usize>,
    pub error: Option<String>,
    pub wall_time_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopKRow {
    pub cell: usize,
    pub k: f64,
    pub topk_count: usize,
    pub topk_accuracy: f64,
    pub rest_accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignmentRow {
    pub cell: usize,
    pub recovered_group: usize,
    pub p1: f64,
    pub p2: f64,
    pub p3: f64,
    pub p4: f64,
    pub p5: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DefenseRow {
    pub cell: usize,
    pub group: usize,
    pub sigma_m: f64,
    pub sigma_u: f64,
    pub w: f64,
    pub detector_score: f64,
    pub detect_probability: Option<f64>,
    pub mask_recall: f64,
    pub sign_accuracy_overall: Option<f64>,
}

struct CellJob {
    index: usize,
    group: usize,
    seed: u64,
    spec: SynthSpec,
    mask: MaskMode,
    plan: RevivalPlan,
    sigma_m: Option<f64>,
    w: Option<f64>,
}

fn expand_cells(cfg: &BenchConfig) -> Vec<CellJob> {
    let mut jobs = Vec::new();
    for (group, cell) in cfg.cells.iter().enumerate() {
        let seed = cfg.master_seed.wrapping_add(group as u64);
        let spec = SynthSpec {
            noise_std: Some(cell.spec.effective_noise_std()),
            seed: derive_seed(seed, STREAM_MATRIX),
            ..cell.spec.clone()
        };
        let plan = RevivalPlan {
            seed: derive_seed(seed, STREAM_PLAN),
            ..cell.plan.clone()
        };
        let sigmas: Vec<Option<f64>> = match &cell.defense {
            None => vec![None],
            Some(sweep) => sweep.sigma_m.iter().copied().map(Some).collect(),
        };
        for sigma_m in sigmas {
            jobs.push(CellJob {
                index: jobs.len(),
                group,
                seed,
                spec: spec.clone(),
                mask: cell.mask.clone(),
                plan: plan.clone(),
                sigma_m,
                w: cell.defense.as_ref().and_then(|d| d.w),
            });
        }
    }
    jobs
}

fn missing_rel_error(truth: &WeightMatrix, recovered: &WeightMatrix, mask: &PruneMask) -> Result<f64> {
    let (t, r) = (truth.data(), recovered.data());
    let (mut num, mut den) = (0.0, 0.0);
    for p in mask.pruned_indices() {
        num += (r[p] - t[p]).powi(2);
        den += t[p] * t[p];
    }
    if den == 0.0 {
        return Err(Error::UndefinedMetric("truth is zero on every pruned position".into()));
    }
    Ok((num / den).sqrt())
}

fn optional(r: Result<f64>) -> Result<Option<f64>> {
    match r {
        Ok(v) => Ok(Some(v)),
        Err(Error::UndefinedMetric(_)) => Ok(None),
        Err(e) => Err(e),
    }
}

struct CellOutcome {
    pruned_fraction: f64,
    defense: Option<DefenseOutcome>,
    attack: AttackMetrics,
}

fn run_cell(job: &CellJob, completion: &CompletionConfig, ks: &[f64]) -> Result<CellOutcome> {
    let truth = gen_lowrank_matrix(&job.spec)?;
    let mask = gen_mask(&truth, &job.mask, derive_seed(job.seed, STREAM_MASK))?;
    let pruned = apply_mask(&truth, &mask)?;

    let (attacked, defense) = match job.sigma_m {
        None => (pruned, None),
        Some(sigma_m) => {
            let sigma_u = defense::estimate_sigma_u(&pruned, &mask)?.sigma_u;
            let w = job.w.unwrap_or(sigma_u / 10.0);
            let defended = defense::gaussian_obfuscate(&pruned, &mask, sigma_m, derive_seed(job.seed, STREAM_OBFUSCATION))?;
            let extracted = crate::revival::extract_mask(&defended, &MaskPolicy::ExactZero)?;
            let detect_probability = if sigma_m > 0.0 {
                let params = DefenseParams {
                    sigma_m,
                    sigma_u,
                    alpha: mask.pruned_fraction(),
                    w,
                    seed: 0,
                };
                optional(defense::detect_probability(&params).map_err(|e| match e {
                    Error::Argument(m) => Error::UndefinedMetric(m),
                    other => other,
                }))?
            } else {
                None
            };
            let outcome = DefenseOutcome {
                sigma_m,
                sigma_u,
                w,
                detector_score: defense::excess_mass_detector(&defended, w)?,
                detect_probability,
                mask_recall: extracted.recall_of(&mask),
            };
            (defended, Some(outcome))
        }
    };

    let cfg = CompletionConfig {
        seed: derive_seed(job.seed, STREAM_COMPLETION),
        ..completion.clone()
    };
    let attack = attack_layer_detailed(&attacked, &MaskPolicy::ExactZero, &cfg, &job.plan)?;
    // Without an extracted mask the attacker's only estimate is what it sees.
    let recovered = attack.recovered.as_ref().unwrap_or(&attacked);
    let metrics = AttackMetrics {
        extracted_pruned_fraction: attack.mask.pruned_fraction(),
        retained: attack.report.retained,
        effective_rank: attack.report.effective_rank,
        unidentifiable_rows: attack.report.unidentifiable_rows,
        unidentifiable_cols: attack.report.unidentifiable_cols,
        sign_accuracy_overall: sign_accuracy(&truth, &attack.revived, &mask, SignScope::AllPruned)?,
        sign_accuracy_retained: optional(sign_accuracy(&truth, &attack.revived, &mask, SignScope::RetainedOnly))?,
        missing_rel_error: missing_rel_error(&truth, recovered, &mask)?,
        topk_curve: topk_sign_accuracy_curve(&truth, recovered, &mask, ks)?,
        alignment: alignment_matrix(&truth, recovered, &mask)?,
    };
    Ok(CellOutcome {
        pruned_fraction: mask.pruned_fraction(),
        defense,
        attack: metrics,
    })
}

/// Runs every configured cell, `jobs` at a time. A failing cell is reported
/// with its error and the rest still run.
pub fn run_bench(cfg: &BenchConfig, jobs: usize) -> Result<BenchReport> {
    cfg.validate()?;
    let start = Instant::now();
    let cell_jobs = expand_cells(cfg);
    let run = |job: &CellJob| {
        let t = Instant::now();
        let outcome = run_cell(job, &cfg.completion, &cfg.topk_ks);
        let mut report = CellReport {
            index: job.index,
            group: job.group,
            seed: job.seed,
            spec: job.spec.clone(),
            mask: job.mask.clone(),
            mask_seed: derive_seed(job.seed, STREAM_MASK),
            plan: job.plan.clone(),
            completion_seed: derive_seed(job.seed, STREAM_COMPLETION),
            pruned_fraction: None,
            defense: None,
            attack: None,
            error: None,
            wall_time_s: 0.0,
        };
        match outcome {
            Ok(o) => {
                report.pruned_fraction = Some(o.pruned_fraction);
                report.defense = o.defense;
                report.attack = Some(o.attack);
            }
            Err(e) => {
                log::warn!("bench cell {} failed: {e}", job.index);
                report.error = Some(e.to_string());
            }
        }
        report.wall_time_s = t.elapsed().as_secs_f64();
        report
    };
    let cells: Vec<CellReport> = if jobs <= 1 {
        cell_jobs.iter().map(run).collect()
    } else {
        use rayon::prelude::*;
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build()
            .map_err(|e| Error::Argument(format!("cannot start {jobs} workers: {e}")))?;
        pool.install(|| cell_jobs.par_iter().map(run).collect())
    };
    Ok(BenchReport {
        config: cfg.clone(),
        cells,
        wall_time_s: start.elapsed().as_secs_f64(),
    })
}
