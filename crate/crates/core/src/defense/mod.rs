//! Gaussian obfuscation of pruned weights and how detectable it remains.
//!
//! Modified values are modelled as `N(0, σ_M²)` and unmodified ones as
//! `N(0, σ_U²)`, with a fraction `α` of all entries modified. For a window
//! `[−w, w]` the probability that a value inside it was modified is
//!
//! ```text
//! p(w) = α·erf(w/(√2 σ_M)) / (α·erf(w/(√2 σ_M)) + (1−α)·erf(w/(√2 σ_U)))
//! ```

mod erf;

use std::fmt::Write as _;
use std::f64::consts::SQRT_2;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::revival::PruneMask;
use crate::tensor::WeightMatrix;

pub use erf::{erf, erfc};

/// Obfuscation scales of the default sweep ladder.
pub const SIGMA_M_LADDER: [f64; 6] = [1e-6, 1e-5, 1e-4, 1e-3, 1e-2, 1e-1];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DefenseParams {
    pub sigma_m: f64,
    pub sigma_u: f64,
    pub alpha: f64,
    pub w: f64,
    #[serde(default)]
    pub seed: u64,
}

impl DefenseParams {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("sigma_m", self.sigma_m), ("sigma_u", self.sigma_u), ("w", self.w)] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::Argument(format!("{name} = {v} must be positive and finite")));
            }
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::Argument(format!("alpha = {} must lie in (0, 1)", self.alpha)));
        }
        Ok(())
    }
}

/// Probability mass of `N(0, σ²)` inside `[−w, w]`.
pub fn centered_normal_mass(w: f64, sigma: f64) -> f64 {
    erf(w / (SQRT_2 * sigma))
}

/// Standard deviation of the unpruned entries about zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScaleEstimate {
    pub sigma_u: f64,
    pub samples: usize,
    pub warning: Option<String>,
}

/// `sqrt(mean(x²))` over unpruned entries.
pub fn estimate_sigma_u(m: &WeightMatrix, mask: &PruneMask) -> Result<ScaleEstimate> {
    if mask.shape() != m.shape() {
        return Err(Error::Argument("mask shape differs from matrix".into()));
    }
    let (sum_sq, count) = m
        .data()
        .iter()
        .zip(mask.pruned())
        .filter(|(_, p)| !**p)
        .fold((0.0, 0usize), |(s, c), (v, _)| (s + v * v, c + 1));
    if count < 2 {
        return Err(Error::Precondition(format!(
            "need at least 2 unpruned entries to estimate sigma_u, found {count}"
        )));
    }
    let sigma_u = (sum_sq / count as f64).sqrt();
    let warning = (sigma_u == 0.0).then(|| "all unpruned entries are zero; scale is degenerate".to_string());
    Ok(ScaleEstimate {
        sigma_u,
        samples: count,
        warning,
    })
}

/// Replaces every pruned entry with an independent `N(0, σ_M²)` draw.
///
/// The same seed gives the same standard-normal draws for any `σ_M`, so a
/// ladder of scales perturbs identical directions. `σ_M = 0` returns the
/// input unchanged.
pub fn gaussian_obfuscate(pruned: &WeightMatrix, mask: &PruneMask, sigma_m: f64, seed: u64) -> Result<WeightMatrix> {
    if !(sigma_m.is_finite() && sigma_m >= 0.0) {
        return Err(Error::Argument(format!("sigma_m = {sigma_m} must be finite and non-negative")));
    }
    if mask.shape() != pruned.shape() {
        return Err(Error::Argument("mask shape differs from matrix".into()));
    }
    let mut out = pruned.clone();
    if sigma_m == 0.0 {
        return Ok(out);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = out.data_mut();
    for idx in mask.pruned_indices() {
        let z: f64 = StandardNormal.sample(&mut rng);
        data[idx] = sigma_m * z;
    }
    Ok(out)
}

/// `p(w)` under the centered-normal model.
pub fn detect_probability(params: &DefenseParams) -> Result<f64> {
    params.validate()?;
    let modified = params.alpha * centered_normal_mass(params.w, params.sigma_m);
    let unmodified = (1.0 - params.alpha) * centered_normal_mass(params.w, params.sigma_u);
    let p = modified / (modified + unmodified);
    if !p.is_finite() {
        return Err(Error::Numerical(format!("p(w) is not finite for {params:?}")));
    }
    Ok(p)
}

/// `p(w)` over an `α × σ_M` grid at fixed `σ_U` and `w`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectabilityGrid {
    pub alpha_values: Vec<f64>,
    pub sigma_m_values: Vec<f64>,
    pub sigma_u: f64,
    pub w: f64,
    /// `p[i][j]` is at `alpha_values[i]`, `sigma_m_values[j]`.
    pub p: Vec<Vec<f64>>,
}

fn check_monotone(name: &str, values: &[f64]) -> Result<()> {
    if values.is_empty() {
        return Err(Error::Argument(format!("{name} grid is empty")));
    }
    let up = values.windows(2).all(|w| w[1] > w[0]);
    let down = values.windows(2).all(|w| w[1] < w[0]);
    if !(up || down) {
        return Err(Error::Argument(format!("{name} grid must be strictly monotone")));
    }
    Ok(())
}

pub fn detectability_surface(alpha_grid: &[f64], sigma_m_grid: &[f64], sigma_u: f64, w: f64) -> Result<DetectabilityGrid> {
    check_monotone("alpha", alpha_grid)?;
    check_monotone("sigma_m", sigma_m_grid)?;
    let p = alpha_grid
        .iter()
        .map(|&alpha| {
            sigma_m_grid
                .iter()
                .map(|&sigma_m| {
                    detect_probability(&DefenseParams {
                        sigma_m,
                        sigma_u,
                        alpha,
                        w,
                        seed: 0,
                    })
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(DetectabilityGrid {
        alpha_values: alpha_grid.to_vec(),
        sigma_m_values: sigma_m_grid.to_vec(),
        sigma_u,
        w,
        p,
    })
}

impl DetectabilityGrid {
    /// `alpha,sigma_m,p` rows, α-major, 17 significant digits.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("alpha,sigma_m,p\n");
        for (i, alpha) in self.alpha_values.iter().enumerate() {
            for (j, sigma_m) in self.sigma_m_values.iter().enumerate() {
                let _ = writeln!(out, "{alpha:.16e},{sigma_m:.16e},{:.16e}", self.p[i][j]);
            }
        }
        out
    }

    /// Parses CSV produced by [`to_csv`](Self::to_csv). `sigma_u` and `w` are not stored in it.
    pub fn from_csv(text: &str, sigma_u: f64, w: f64) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next().map(str::trim) != Some("alpha,sigma_m,p") {
            return Err(Error::Serialization("missing alpha,sigma_m,p header".into()));
        }
        let mut cells = Vec::new();
        for (n, line) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let fields: Vec<f64> = line
                .split(',')
                .map(|f| f.trim().parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::Serialization(format!("line {}: {e}", n + 2)))?;
            if fields.len() != 3 {
                return Err(Error::Serialization(format!("line {}: expected 3 fields", n + 2)));
            }
            cells.push((fields[0], fields[1], fields[2]));
        }
        let mut alpha_values: Vec<f64> = Vec::new();
        let mut sigma_m_values: Vec<f64> = Vec::new();
        for &(a, s, _) in &cells {
            if !alpha_values.contains(&a) {
                alpha_values.push(a);
            }
            if !sigma_m_values.contains(&s) {
                sigma_m_values.push(s);
            }
        }
        if cells.len() != alpha_values.len() * sigma_m_values.len() {
            return Err(Error::Serialization("CSV is not a full grid".into()));
        }
        let p = cells
            .chunks(sigma_m_values.len())
            .map(|row| row.iter().map(|c| c.2).collect())
            .collect();
        Ok(DetectabilityGrid {
            alpha_values,
            sigma_m_values,
            sigma_u,
            w,
            p,
        })
    }
}

/// Ratio of the observed fraction of entries in `[−w, w]` to what a
/// `N(0, σ̂²)` fit predicts, with `σ̂ = sqrt(mean(x²))` over all entries.
/// Values well above 1 reveal a hidden spike near zero.
pub fn excess_mass_detector(m: &WeightMatrix, w: f64) -> Result<f64> {
    if !(w.is_finite() && w > 0.0) {
        return Err(Error::Argument(format!("window half-width {w} must be positive")));
    }
    let n = m.len() as f64;
    let sigma_hat = (m.data().iter().map(|v| v * v).sum::<f64>() / n).sqrt();
    if sigma_hat == 0.0 {
        return Err(Error::Degenerate(format!("{} is identically zero", m.name())));
    }
    let inside = m.data().iter().filter(|v| v.abs() <= w).count() as f64 / n;
    let predicted = centered_normal_mass(w, sigma_hat);
    if predicted == 0.0 {
        return Err(Error::Degenerate(format!(
            "window {w} carries no mass under the fitted scale {sigma_hat}"
        )));
    }
    Ok(inside / predicted)
}

/// `count` evenly spaced values from `start` to `stop` inclusive.
pub fn linear_grid(start: f64, stop: f64, count: usize) -> Vec<f64> {
    match count {
        0 => Vec::new(),
        1 => vec![start],
        _ => (0..count)
            .map(|k| start + (stop - start) * k as f64 / (count - 1) as f64)
            .collect(),
    }
}

/// `count` log-spaced values from `start` to `stop` inclusive; both must be positive.
pub fn geometric_grid(start: f64, stop: f64, count: usize) -> Vec<f64> {
    match count {
        0 => Vec::new(),
        1 => vec![start],
        _ => {
            let (a, b) = (start.ln(), stop.ln());
            (0..count)
                .map(|k| (a + (b - a) * k as f64 / (count - 1) as f64).exp())
                .collect()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::revival::{extract_mask, MaskPolicy};

    fn params(alpha: f64, sigma_m: f64, sigma_u: f64, w: f64) -> DefenseParams {
        DefenseParams {
            sigma_m,
            sigma_u,
            alpha,
            w,
            seed: 0,
        }
    }

    #[test]
    fn equal_scales_give_alpha() {
        for w in [1e-4, 0.01, 1.0, 50.0] {
            let p = detect_probability(&params(0.2, 0.03, 0.03, w)).unwrap();
            assert!((p - 0.2).abs() < 1e-12);
        }
    }

    #[test]
    fn wide_window_tends_to_alpha() {
        let p = detect_probability(&params(0.3, 1e-3, 2e-2, 10.0)).unwrap();
        assert!((p - 0.3).abs() < 1e-12);
    }

    #[test]
    fn tight_obfuscation_is_detectable() {
        let p = detect_probability(&params(0.2, 1e-4, 2e-2, 1e-3)).unwrap();
        assert!(p > 0.85 && p < 0.87, "{p}");
    }

    #[test]
    fn params_validated() {
        assert!(detect_probability(&params(0.0, 1.0, 1.0, 1.0)).is_err());
        assert!(detect_probability(&params(0.5, 0.0, 1.0, 1.0)).is_err());
        assert!(detect_probability(&params(0.5, 1.0, 1.0, -1.0)).is_err());
    }

    #[test]
    fn sigma_u_estimate() {
        let m = WeightMatrix::new("m", 1, 3, vec![1.0, -1.0, 0.0]).unwrap();
        let mask = extract_mask(&m, &MaskPolicy::ExactZero).unwrap();
        let est = estimate_sigma_u(&m, &mask).unwrap();
        assert_eq!(est.sigma_u, 1.0);
        assert!(est.warning.is_none());

        let zeros = WeightMatrix::zeros("z", 2, 2);
        let none = PruneMask::new(2, 2, vec![false; 4]).unwrap();
        let est = estimate_sigma_u(&zeros, &none).unwrap();
        assert_eq!(est.sigma_u, 0.0);
        assert!(est.warning.is_some());

        let one = PruneMask::new(2, 2, vec![true, true, true, false]).unwrap();
        assert!(matches!(estimate_sigma_u(&zeros, &one), Err(Error::Precondition(_))));
    }

    #[test]
    fn obfuscation_identity_and_determinism() {
        let m = WeightMatrix::new("m", 2, 3, vec![0.0, 1.5, -0.0, 2.0, 0.0, -3.0]).unwrap();
        let mask = extract_mask(&m, &MaskPolicy::ExactZero).unwrap();
        let same = gaussian_obfuscate(&m, &mask, 0.0, 3).unwrap();
        assert_eq!(
            same.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            m.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );

        let a = gaussian_obfuscate(&m, &mask, 0.1, 3).unwrap();
        let b = gaussian_obfuscate(&m, &mask, 0.1, 3).unwrap();
        assert_eq!(a, b);
        assert_eq!((a.get(0, 1), a.get(1, 0), a.get(1, 2)), (1.5, 2.0, -3.0));
        assert!(extract_mask(&a, &MaskPolicy::ExactZero).unwrap().is_empty());

        // A larger scale moves the same draws proportionally.
        let c = gaussian_obfuscate(&m, &mask, 0.2, 3).unwrap();
        assert!((c.get(0, 0) - 2.0 * a.get(0, 0)).abs() < 1e-15);
        assert!(gaussian_obfuscate(&m, &mask, -1.0, 3).is_err());
    }

    #[test]
    fn detector_flags_spike_and_rejects_zero() {
        let mut data: Vec<f64> = (0..1000).map(|i| ((i as f64 * 0.37).sin()) * 0.02).collect();
        for v in data.iter_mut().step_by(5) {
            *v = 0.0;
        }
        let m = WeightMatrix::new("m", 10, 100, data).unwrap();
        assert!(excess_mass_detector(&m, 2e-4).unwrap() > 5.0);
        assert!(matches!(
            excess_mass_detector(&WeightMatrix::zeros("z", 2, 2), 0.1),
            Err(Error::Degenerate(_))
        ));
    }

    #[test]
    fn surface_single_cell_and_csv() {
        let g = detectability_surface(&[0.2], &[1e-3], 0.02, 1e-3).unwrap();
        let direct = detect_probability(&params(0.2, 1e-3, 0.02, 1e-3)).unwrap();
        assert_eq!(g.p, vec![vec![direct]]);
        let csv = g.to_csv();
        assert!(csv.starts_with("alpha,sigma_m,p\n"));
        assert_eq!(DetectabilityGrid::from_csv(&csv, 0.02, 1e-3).unwrap(), g);
        assert!(detectability_surface(&[], &[1.0], 1.0, 1.0).is_err());
        assert!(detectability_surface(&[0.1, 0.1], &[1.0], 1.0, 1.0).is_err());
    }

    #[test]
    fn grids() {
        assert_eq!(linear_grid(0.0, 1.0, 3), vec![0.0, 0.5, 1.0]);
        let g = geometric_grid(1e-6, 1e-1, 6);
        for (a, b) in g.iter().zip(SIGMA_M_LADDER) {
            assert!((a / b - 1.0).abs() < 1e-12);
        }
    }
}
