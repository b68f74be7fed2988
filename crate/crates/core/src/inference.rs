//! Standard errors, confidence intervals on the identification region, and
//! age standardization.
//!
//! Every bound is a sample proportion, so its standard error is
//! `sqrt(p (1 - p) / n)` where `n` is the population of the cell for
//! confirmed-positive-rate style endpoints and the number tested for
//! positivity endpoints. The region interval is
//! `[L - z·σ_L, U + z·σ_U]`, clamped to `[0, 1]`.

use log::debug;
use thiserror::Error;

use crate::bounds::{AssumptionRegime, CellSide, DenominatorRole, Endpoint, Interval};
use crate::domain::{AgeGroup, AgeWeights, BoundsResult, CellCounts};

/// Two-sided 95% normal critical value.
pub const Z_95: f64 = 1.96;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum InferenceError {
    #[error("standard error needs a positive denominator")]
    ZeroDenominator,
    #[error("every age stratum is empty")]
    AllStrataEmpty,
    #[error("bound endpoint refers to the hospital cell but none was supplied")]
    MissingHospitalCell,
}

/// How the standard error of an age-standardized bound is combined.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum StandardizedSe {
    /// `sqrt(Σ π(a) σ_a²)`, the published formula.
    #[default]
    Published,
    /// `sqrt(Σ π(a)² σ_a²)`, the variance of a weighted mean of independent strata.
    WeightedMean,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InferenceConfig {
    pub critical_value: f64,
    pub standardized_se: StandardizedSe,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        InferenceConfig {
            critical_value: Z_95,
            standardized_se: StandardizedSe::Published,
        }
    }
}

/// Standard error of a proportion `p` estimated on `cell`.
pub fn proportion_se(
    cell: &CellCounts,
    p: f64,
    role: DenominatorRole,
) -> Result<f64, InferenceError> {
    let n = match role {
        DenominatorRole::Population => cell.n_pop,
        DenominatorRole::Tested => cell.n_tested,
    };
    if n == 0 {
        return Err(InferenceError::ZeroDenominator);
    }
    let p = p.clamp(0.0, 1.0);
    Ok((p * (1.0 - p) / n as f64).sqrt())
}

/// `[lower - z·se_lower, upper + z·se_upper]`, clamped to the unit interval.
pub fn region_ci(lower: f64, upper: f64, se_lower: f64, se_upper: f64, z: f64) -> (f64, f64) {
    (
        (lower - z * se_lower).clamp(0.0, 1.0),
        (upper + z * se_upper).clamp(0.0, 1.0),
    )
}

fn endpoint_se(
    end: &Endpoint<f64>,
    pop: &CellCounts,
    hosp: Option<&CellCounts>,
) -> Result<f64, InferenceError> {
    let cell = match end.side {
        CellSide::Population => pop,
        CellSide::Hospital => hosp.ok_or(InferenceError::MissingHospitalCell)?,
    };
    proportion_se(cell, end.value, end.denominator)
}

/// Attach standard errors and the region CI to a computed interval.
pub fn summarize(
    regime: AssumptionRegime,
    interval: &Interval<f64>,
    pop: &CellCounts,
    hosp: Option<&CellCounts>,
    cfg: &InferenceConfig,
) -> Result<BoundsResult, InferenceError> {
    let se_lower = endpoint_se(&interval.lower, pop, hosp)?;
    let se_upper = endpoint_se(&interval.upper, pop, hosp)?;
    let (lower, upper) = interval.values();
    let (ci_lower, ci_upper) = region_ci(lower, upper, se_lower, se_upper, cfg.critical_value);
    Ok(BoundsResult {
        regime,
        lower,
        upper,
        se_lower,
        se_upper,
        ci_lower,
        ci_upper,
    })
}

/// Per-age-group results for one cell, `None` where the stratum had no valid
/// bounds.
#[derive(Debug, Clone)]
pub struct StratifiedBounds {
    pub strata: Vec<(AgeGroup, Option<BoundsResult>)>,
    pub age_weights: AgeWeights,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Standardized {
    pub result: BoundsResult,
    /// Strata dropped for lack of data; weights were renormalized without them.
    pub dropped: Vec<AgeGroup>,
}

/// Weight stratum bounds by population age shares.
pub fn age_standardize(
    strata: &StratifiedBounds,
    cfg: &InferenceConfig,
) -> Result<Standardized, InferenceError> {
    let mut dropped = Vec::new();
    let mut kept: Vec<(f64, &BoundsResult)> = Vec::new();
    for (group, res) in &strata.strata {
        let w = strata.age_weights.get(*group);
        match res {
            Some(r) if w > 0.0 => kept.push((w, r)),
            Some(_) => {}
            None => dropped.push(*group),
        }
    }
    let total: f64 = kept.iter().map(|(w, _)| w).sum();
    if kept.is_empty() || total <= 0.0 {
        return Err(InferenceError::AllStrataEmpty);
    }
    if !dropped.is_empty() {
        debug!("age standardization dropped empty strata {dropped:?}; weights renormalized");
    }

    let regime = kept[0].1.regime;
    let mut lower = 0.0;
    let mut upper = 0.0;
    let mut var_lower = 0.0;
    let mut var_upper = 0.0;
    for (w, r) in &kept {
        let pi = w / total;
        lower += pi * r.lower;
        upper += pi * r.upper;
        let k = match cfg.standardized_se {
            StandardizedSe::Published => pi,
            StandardizedSe::WeightedMean => pi * pi,
        };
        var_lower += k * r.se_lower * r.se_lower;
        var_upper += k * r.se_upper * r.se_upper;
    }
    // keep the convex combination inside the stratum range despite rounding
    let lo_min = kept.iter().map(|(_, r)| r.lower).fold(f64::INFINITY, f64::min);
    let hi_max = kept.iter().map(|(_, r)| r.upper).fold(f64::NEG_INFINITY, f64::max);
    let lower = lower.max(lo_min);
    let upper = upper.min(hi_max).max(lower);

    let se_lower = var_lower.sqrt();
    let se_upper = var_upper.sqrt();
    let (ci_lower, ci_upper) = region_ci(lower, upper, se_lower, se_upper, cfg.critical_value);
    Ok(Standardized {
        result: BoundsResult {
            regime,
            lower,
            upper,
            se_lower,
            se_upper,
            ci_lower,
            ci_upper,
        },
        dropped,
    })
}
