//! The revival attack: read the pruning footprint, complete the pruned
//! entries, keep the signs of the largest recovered values, and give them
//! magnitudes pooled from the surviving weights.

use std::fmt;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::completion::{self, CompletionConfig, LambdaStep, MaskedMatrix};
use crate::error::{Error, Result};
use crate::tensor::{LayerSet, WeightMatrix};

/// Exact-zero masks pruning more than this fraction carry a warning.
pub const SUSPICIOUS_PRUNED_FRACTION: f64 = 0.95;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskSource {
    ExactZero,
    Supplied,
}

/// Which entries of a matrix were pruned (`true`) and how that was decided.
#[derive(Debug, Clone, PartialEq)]
pub struct PruneMask {
    rows: usize,
    cols: usize,
    pruned: Vec<bool>,
    pruned_count: usize,
    source: MaskSource,
    warning: Option<String>,
}

impl PruneMask {
    /// Builds a supplied mask from row-major flags.
    pub fn new(rows: usize, cols: usize, pruned: Vec<bool>) -> Result<Self> {
        Self::with_source(rows, cols, pruned, MaskSource::Supplied)
    }

    fn with_source(rows: usize, cols: usize, pruned: Vec<bool>, source: MaskSource) -> Result<Self> {
        if pruned.len() != rows * cols {
            return Err(Error::Argument(format!(
                "mask has {} entries, expected {rows}x{cols}",
                pruned.len()
            )));
        }
        let pruned_count = pruned.iter().filter(|p| **p).count();
        Ok(PruneMask {
            rows,
            cols,
            pruned,
            pruned_count,
            source,
            warning: None,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    /// Row-major flags, `true` = pruned.
    pub fn pruned(&self) -> &[bool] {
        &self.pruned
    }

    #[inline]
    pub fn is_pruned(&self, row: usize, col: usize) -> bool {
        self.pruned[row * self.cols + col]
    }

    pub fn pruned_count(&self) -> usize {
        self.pruned_count
    }

    pub fn pruned_fraction(&self) -> f64 {
        self.pruned_count as f64 / self.pruned.len() as f64
    }

    pub fn is_empty(&self) -> bool {
        self.pruned_count == 0
    }

    pub fn source(&self) -> MaskSource {
        self.source
    }

    pub fn warning(&self) -> Option<&str> {
        self.warning.as_deref()
    }

    /// Row-major indices of pruned entries, ascending.
    pub fn pruned_indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.pruned.iter().enumerate().filter(|(_, p)| **p).map(|(i, _)| i)
    }

    /// Fraction of `truth`'s pruned entries that this mask also marks.
    pub fn recall_of(&self, truth: &PruneMask) -> f64 {
        if truth.pruned_count == 0 {
            return 0.0;
        }
        let hits = self
            .pruned
            .iter()
            .zip(&truth.pruned)
            .filter(|(a, b)| **a && **b)
            .count();
        hits as f64 / truth.pruned_count as f64
    }
}

/// How the pruning mask of a matrix is obtained.
#[derive(Debug, Clone)]
pub enum MaskPolicy {
    /// Entries exactly equal to 0.0 are pruned.
    ExactZero,
    Supplied(PruneMask),
}

pub fn extract_mask(m: &WeightMatrix, policy: &MaskPolicy) -> Result<PruneMask> {
    match policy {
        MaskPolicy::ExactZero => {
            let pruned = m.data().iter().map(|v| *v == 0.0).collect();
            let mut mask = PruneMask::with_source(m.rows(), m.cols(), pruned, MaskSource::ExactZero)?;
            if mask.pruned_fraction() > SUSPICIOUS_PRUNED_FRACTION {
                mask.warning = Some(format!(
                    "{:.1}% of {} is exactly zero; the mask is probably not a pruning footprint",
                    100.0 * mask.pruned_fraction(),
                    m.name()
                ));
            }
            Ok(mask)
        }
        MaskPolicy::Supplied(mask) => {
            if mask.shape() != m.shape() {
                return Err(Error::Argument(format!(
                    "supplied mask is {:?}, matrix {} is {:?}",
                    mask.shape(),
                    m.name(),
                    m.shape()
                )));
            }
            let mut mask = mask.clone();
            mask.source = MaskSource::Supplied;
            Ok(mask)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum MagnitudeStrategy {
    /// Largest surviving magnitude in the entry's pool.
    #[default]
    NeuronMax,
    /// Mean surviving magnitude in the entry's pool.
    NeuronAverage,
    /// Magnitude of a uniform draw from the entry's pool.
    NeuronSample,
    /// Magnitude of a uniform draw from every surviving weight of the layer.
    LayerSample,
}

impl fmt::Display for MagnitudeStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MagnitudeStrategy::NeuronMax => "neuron_max",
            MagnitudeStrategy::NeuronAverage => "neuron_average",
            MagnitudeStrategy::NeuronSample => "neuron_sample",
            MagnitudeStrategy::LayerSample => "layer_sample",
        })
    }
}

impl std::str::FromStr for MagnitudeStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.replace('-', "_").as_str() {
            "neuron_max" | "nms" => Ok(MagnitudeStrategy::NeuronMax),
            "neuron_average" | "neuron_mean" => Ok(MagnitudeStrategy::NeuronAverage),
            "neuron_sample" => Ok(MagnitudeStrategy::NeuronSample),
            "layer_sample" => Ok(MagnitudeStrategy::LayerSample),
            other => Err(Error::Argument(format!("unknown magnitude strategy {other:?}"))),
        }
    }
}

/// The group of surviving weights a revived entry draws its magnitude from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PoolAxis {
    /// Entries sharing the row index.
    Row,
    /// Entries sharing the column index.
    #[default]
    Column,
}

impl std::str::FromStr for PoolAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "row" => Ok(PoolAxis::Row),
            "column" | "col" => Ok(PoolAxis::Column),
            other => Err(Error::Argument(format!("unknown pool axis {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RevivalPlan {
    /// Fraction of pruned entries whose recovered sign is kept.
    pub k_fraction: f64,
    pub magnitude_strategy: MagnitudeStrategy,
    pub pool_axis: PoolAxis,
    pub seed: u64,
}

impl Default for RevivalPlan {
    fn default() -> Self {
        RevivalPlan {
            k_fraction: 0.6,
            magnitude_strategy: MagnitudeStrategy::NeuronMax,
            pool_axis: PoolAxis::Column,
            seed: 0,
        }
    }
}

impl RevivalPlan {
    pub fn validate(&self) -> Result<()> {
        check_k(self.k_fraction)
    }
}

fn check_k(k: f64) -> Result<()> {
    if !(k > 0.0 && k <= 1.0) {
        return Err(Error::Argument(format!("k_fraction {k} must lie in (0, 1]")));
    }
    Ok(())
}

/// `⌈k · n⌉`, ignoring the rounding error in products such as `0.6 · 5`.
pub fn retained_target(k: f64, n: usize) -> usize {
    let raw = k * n as f64;
    let count = (raw - raw * 1e-12).ceil();
    (count.max(0.0) as usize).min(n)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Sign {
    Plus,
    Minus,
    Drop,
}

impl Sign {
    pub fn of(value: f64) -> Sign {
        if value > 0.0 {
            Sign::Plus
        } else if value < 0.0 {
            Sign::Minus
        } else {
            Sign::Drop
        }
    }

    pub fn factor(self) -> f64 {
        match self {
            Sign::Plus => 1.0,
            Sign::Minus => -1.0,
            Sign::Drop => 0.0,
        }
    }
}

/// A sign decision for every pruned entry, in ascending row-major order.
#[derive(Debug, Clone, PartialEq)]
pub struct SignPlan {
    rows: usize,
    cols: usize,
    decisions: Vec<(usize, Sign)>,
}

impl SignPlan {
    /// Builds a plan from `(row-major index, sign)` pairs.
    pub fn new(rows: usize, cols: usize, mut decisions: Vec<(usize, Sign)>) -> Self {
        decisions.sort_by_key(|(i, _)| *i);
        SignPlan { rows, cols, decisions }
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn decisions(&self) -> &[(usize, Sign)] {
        &self.decisions
    }

    pub fn retained_count(&self) -> usize {
        self.decisions.iter().filter(|(_, s)| *s != Sign::Drop).count()
    }

    pub fn dropped_count(&self) -> usize {
        self.decisions.len() - self.retained_count()
    }

    /// Row-major indices of retained entries.
    pub fn retained_indices(&self) -> Vec<usize> {
        self.decisions
            .iter()
            .filter(|(_, s)| *s != Sign::Drop)
            .map(|(i, _)| *i)
            .collect()
    }
}

/// Pruned indices ordered by descending `|values|`, ties by index.
pub fn rank_by_magnitude(values: &WeightMatrix, mask: &PruneMask) -> Vec<usize> {
    let data = values.data();
    let mut order: Vec<usize> = mask.pruned_indices().collect();
    order.sort_by(|&a, &b| data[b].abs().total_cmp(&data[a].abs()).then(a.cmp(&b)));
    order
}

/// Keeps the recovered sign of the `⌈k · |pruned|⌉` largest-magnitude pruned
/// entries; everything else, and any recovered value of exactly 0, is dropped.
pub fn topk_sign_retention(recovered: &WeightMatrix, mask: &PruneMask, k_fraction: f64) -> Result<SignPlan> {
    check_k(k_fraction)?;
    if recovered.shape() != mask.shape() {
        return Err(Error::Argument(format!(
            "recovered matrix is {:?}, mask is {:?}",
            recovered.shape(),
            mask.shape()
        )));
    }
    let order = rank_by_magnitude(recovered, mask);
    let keep = retained_target(k_fraction, order.len());
    let data = recovered.data();
    let decisions = order
        .iter()
        .enumerate()
        .map(|(rank, &idx)| {
            let sign = if rank < keep { Sign::of(data[idx]) } else { Sign::Drop };
            (idx, sign)
        })
        .collect();
    Ok(SignPlan::new(recovered.rows(), recovered.cols(), decisions))
}

#[derive(Debug, Clone, Default)]
struct Pool {
    values: Vec<f64>,
    max_abs: f64,
    mean_abs: f64,
}

impl Pool {
    fn from_values(values: Vec<f64>) -> Self {
        let max_abs = values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let mean_abs = if values.is_empty() {
            0.0
        } else {
            values.iter().map(|v| v.abs()).sum::<f64>() / values.len() as f64
        };
        Pool {
            values,
            max_abs,
            mean_abs,
        }
    }

    fn magnitude(&self, strategy: MagnitudeStrategy, rng: &mut ChaCha8Rng) -> f64 {
        match strategy {
            MagnitudeStrategy::NeuronMax => self.max_abs,
            MagnitudeStrategy::NeuronAverage => self.mean_abs,
            MagnitudeStrategy::NeuronSample | MagnitudeStrategy::LayerSample => {
                self.values[rng.random_range(0..self.values.len())].abs()
            }
        }
    }
}

/// A revived matrix plus how many entries had to use the layer-wide pool.
#[derive(Debug, Clone)]
pub struct Revived {
    pub matrix: WeightMatrix,
    pub pool_fallbacks: usize,
}

/// Writes `sign × pooled magnitude` into every retained pruned entry and 0
/// into every dropped one. Unpruned entries are copied unchanged.
pub fn assign_magnitudes(
    pruned_matrix: &WeightMatrix,
    mask: &PruneMask,
    plan: &RevivalPlan,
    signs: &SignPlan,
) -> Result<Revived> {
    plan.validate()?;
    let (rows, cols) = pruned_matrix.shape();
    if mask.shape() != (rows, cols) || signs.shape() != (rows, cols) {
        return Err(Error::Argument("matrix, mask and sign plan shapes differ".into()));
    }
    let data = pruned_matrix.data();
    let survivors: Vec<f64> = (0..data.len()).filter(|&p| !mask.pruned[p]).map(|p| data[p]).collect();
    if survivors.is_empty() {
        return Err(Error::Precondition(format!(
            "every entry of {} is pruned; no magnitude pool exists",
            pruned_matrix.name()
        )));
    }
    let layer_pool = Pool::from_values(survivors);

    let line_count = match plan.pool_axis {
        PoolAxis::Row => rows,
        PoolAxis::Column => cols,
    };
    let mut line_values: Vec<Vec<f64>> = vec![Vec::new(); line_count];
    for i in 0..rows {
        for j in 0..cols {
            let p = i * cols + j;
            if !mask.pruned[p] {
                let line = match plan.pool_axis {
                    PoolAxis::Row => i,
                    PoolAxis::Column => j,
                };
                line_values[line].push(data[p]);
            }
        }
    }
    let pools: Vec<Pool> = line_values.into_iter().map(Pool::from_values).collect();

    let mut rng = ChaCha8Rng::seed_from_u64(plan.seed);
    let mut out = pruned_matrix.clone();
    let mut pool_fallbacks = 0;
    for &(idx, sign) in signs.decisions() {
        if !mask.pruned[idx] {
            return Err(Error::Argument(format!("sign plan addresses unpruned entry {idx}")));
        }
        if sign == Sign::Drop {
            out.data_mut()[idx] = 0.0;
            continue;
        }
        let line = match plan.pool_axis {
            PoolAxis::Row => idx / cols,
            PoolAxis::Column => idx % cols,
        };
        let pool = if plan.magnitude_strategy == MagnitudeStrategy::LayerSample {
            &layer_pool
        } else if pools[line].values.is_empty() {
            pool_fallbacks += 1;
            &layer_pool
        } else {
            &pools[line]
        };
        out.data_mut()[idx] = sign.factor() * pool.magnitude(plan.magnitude_strategy, &mut rng);
    }
    Ok(Revived {
        matrix: out,
        pool_fallbacks,
    })
}

/// Per-layer attack diagnostics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerReport {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub pruned_count: usize,
    pub pruned_fraction: f64,
    pub retained: usize,
    pub zeroed: usize,
    pub unidentifiable_rows: usize,
    pub unidentifiable_cols: usize,
    pub pool_fallbacks: usize,
    pub effective_rank: usize,
    pub completion: Vec<LambdaStep>,
    pub mask_warning: Option<String>,
    pub wall_time_s: f64,
}

/// Everything an attack on one layer produced, including intermediates the
/// benchmarks score.
#[derive(Debug, Clone)]
pub struct LayerAttack {
    pub revived: WeightMatrix,
    pub mask: PruneMask,
    /// The completion estimate; `None` when nothing was pruned.
    pub recovered: Option<WeightMatrix>,
    pub signs: SignPlan,
    pub report: LayerReport,
}

/// Mask extraction, completion, Top-K sign retention and magnitude assignment.
pub fn attack_layer(pruned: &WeightMatrix, cfg: &CompletionConfig, plan: &RevivalPlan) -> Result<(WeightMatrix, LayerReport)> {
    let attack = attack_layer_detailed(pruned, &MaskPolicy::ExactZero, cfg, plan)?;
    Ok((attack.revived, attack.report))
}

pub fn attack_layer_detailed(
    pruned: &WeightMatrix,
    policy: &MaskPolicy,
    cfg: &CompletionConfig,
    plan: &RevivalPlan,
) -> Result<LayerAttack> {
    let start = Instant::now();
    plan.validate()?;
    cfg.validate()?;
    let mask = extract_mask(pruned, policy)?;
    if let Some(w) = mask.warning() {
        log::warn!("{w}");
    }
    let (rows, cols) = pruned.shape();
    let mut report = LayerReport {
        name: pruned.name().to_string(),
        rows,
        cols,
        pruned_count: mask.pruned_count(),
        pruned_fraction: mask.pruned_fraction(),
        retained: 0,
        zeroed: 0,
        unidentifiable_rows: 0,
        unidentifiable_cols: 0,
        pool_fallbacks: 0,
        effective_rank: 0,
        completion: Vec::new(),
        mask_warning: mask.warning().map(str::to_string),
        wall_time_s: 0.0,
    };
    if mask.is_empty() {
        report.wall_time_s = start.elapsed().as_secs_f64();
        return Ok(LayerAttack {
            revived: pruned.clone(),
            signs: SignPlan::new(rows, cols, Vec::new()),
            mask,
            recovered: None,
            report,
        });
    }
    if mask.pruned_count() == pruned.len() {
        return Err(Error::Precondition(format!("every entry of {} is pruned", pruned.name())));
    }

    let observed = MaskedMatrix::from_missing(pruned.clone(), mask.pruned())?;
    let completed = completion::complete(&observed, cfg)?;
    let signs = topk_sign_retention(&completed.estimate, &mask, plan.k_fraction)?;
    let revived = assign_magnitudes(pruned, &mask, plan, &signs)?;

    report.retained = signs.retained_count();
    report.zeroed = signs.dropped_count();
    report.unidentifiable_rows = completed.unidentifiable_rows.len();
    report.unidentifiable_cols = completed.unidentifiable_cols.len();
    report.pool_fallbacks = revived.pool_fallbacks;
    report.effective_rank = completed.effective_rank;
    report.completion = completed.per_lambda;
    report.wall_time_s = start.elapsed().as_secs_f64();
    Ok(LayerAttack {
        revived: revived.matrix,
        mask,
        recovered: Some(completed.estimate),
        signs,
        report,
    })
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct AttackTotals {
    pub layers: usize,
    pub pruned_count: usize,
    pub retained: usize,
    pub zeroed: usize,
    pub unidentifiable_rows: usize,
    pub unidentifiable_cols: usize,
    pub pool_fallbacks: usize,
    pub wall_time_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackReport {
    pub layers: Vec<LayerReport>,
    pub totals: AttackTotals,
}

impl AttackReport {
    fn from_layers(layers: Vec<LayerReport>) -> Self {
        let mut totals = AttackTotals::default();
        for l in &layers {
            totals.layers += 1;
            totals.pruned_count += l.pruned_count;
            totals.retained += l.retained;
            totals.zeroed += l.zeroed;
            totals.unidentifiable_rows += l.unidentifiable_rows;
            totals.unidentifiable_cols += l.unidentifiable_cols;
            totals.pool_fallbacks += l.pool_fallbacks;
            totals.wall_time_s += l.wall_time_s;
        }
        AttackReport { layers, totals }
    }
}

/// Attacks every layer independently, `jobs` at a time. Output order follows
/// the input order.
pub fn attack_model(
    layers: &LayerSet,
    cfg: &CompletionConfig,
    plan: &RevivalPlan,
    jobs: usize,
) -> Result<(LayerSet, AttackReport)> {
    if layers.is_empty() {
        return Err(Error::Precondition("layer set is empty".into()));
    }
    let run = |layer: &WeightMatrix| attack_layer(layer, cfg, plan).map_err(|e| e.in_layer(layer.name()));
    let results: Vec<Result<(WeightMatrix, LayerReport)>> = if jobs <= 1 {
        layers.layers().iter().map(run).collect()
    } else {
        use rayon::prelude::*;
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build()
            .map_err(|e| Error::Argument(format!("cannot start {jobs} workers: {e}")))?;
        pool.install(|| layers.layers().par_iter().map(run).collect())
    };
    let mut revived = Vec::with_capacity(results.len());
    let mut reports = Vec::with_capacity(results.len());
    for r in results {
        let (m, rep) = r?;
        revived.push(m);
        reports.push(rep);
    }
    Ok((LayerSet::new(revived)?, AttackReport::from_layers(reports)))
}
