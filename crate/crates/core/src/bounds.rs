//! Closed-form prevalence bounds across the assumption ladder.
//!
//! Every bound is a ratio of cell counts. Each endpoint remembers which cell it
//! came from and which denominator it uses, so that standard errors and the
//! false-negative correction can be applied with the right sample size.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{CellCounts, ErrorBand, Scalar};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BoundsError {
    #[error("{0} cell has zero population")]
    EmptyPopulation(CellSide),
    #[error("{0} cell has no tests; test positivity is undefined")]
    NoTests(CellSide),
    #[error("regime {0} requires a hospital cell")]
    MissingHospitalCell(Assumption),
    #[error("assumptions are refuted by the data: lower {lower} exceeds upper {upper}")]
    Refuted { lower: f64, upper: f64 },
}

/// Which cell an endpoint is computed from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum CellSide {
    Population,
    Hospital,
}

impl fmt::Display for CellSide {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CellSide::Population => "population",
            CellSide::Hospital => "hospital",
        })
    }
}

/// Denominator of the proportion an endpoint is expressed as.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum DenominatorRole {
    /// Share of everyone in the cell (confirmed positive rate, untested rate).
    Population,
    /// Share of those tested (test positivity).
    Tested,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Assumption {
    WorstCase,
    TestMonotone,
    TestMonotonePlusHospMonotone,
    TestMonotonePlusHospIndependent,
}

impl Assumption {
    pub const ALL: [Assumption; 4] = [
        Assumption::WorstCase,
        Assumption::TestMonotone,
        Assumption::TestMonotonePlusHospMonotone,
        Assumption::TestMonotonePlusHospIndependent,
    ];

    pub fn needs_hospital(self) -> bool {
        matches!(
            self,
            Assumption::TestMonotonePlusHospMonotone | Assumption::TestMonotonePlusHospIndependent
        )
    }

    pub fn label(self) -> &'static str {
        match self {
            Assumption::WorstCase => "worst",
            Assumption::TestMonotone => "monotone",
            Assumption::TestMonotonePlusHospMonotone => "hosp-monotone",
            Assumption::TestMonotonePlusHospIndependent => "hosp-independent",
        }
    }
}

impl fmt::Display for Assumption {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for Assumption {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let t = s.trim();
        Assumption::ALL
            .into_iter()
            .find(|a| a.label() == t)
            .ok_or_else(|| format!("unknown regime {t:?} (expected worst, monotone, hosp-monotone, hosp-independent)"))
    }
}

/// A rung of the assumption ladder, optionally widened for test errors.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct AssumptionRegime<S = f64> {
    pub assumption: Assumption,
    pub error_band: Option<ErrorBand<S>>,
}

impl<S: Scalar> AssumptionRegime<S> {
    pub fn new(assumption: Assumption) -> Self {
        AssumptionRegime {
            assumption,
            error_band: None,
        }
    }

    pub fn with_band(assumption: Assumption, band: ErrorBand<S>) -> Self {
        AssumptionRegime {
            assumption,
            error_band: Some(band),
        }
    }

    /// `monotone`, or `monotone+err` when an error band is set.
    pub fn label(&self) -> String {
        match self.error_band {
            None => self.assumption.label().to_owned(),
            Some(_) => format!("{}+err", self.assumption.label()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Endpoint<S> {
    pub value: S,
    pub side: CellSide,
    pub denominator: DenominatorRole,
}

impl<S: Scalar> Endpoint<S> {
    fn new(value: S, side: CellSide, denominator: DenominatorRole) -> Self {
        Endpoint {
            value,
            side,
            denominator,
        }
    }
}

/// Identification region `[lower, upper]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Interval<S = f64> {
    pub lower: Endpoint<S>,
    pub upper: Endpoint<S>,
}

impl<S: Scalar> Interval<S> {
    pub fn values(&self) -> (S, S) {
        (self.lower.value, self.upper.value)
    }

    fn checked(self) -> Result<Self, BoundsError> {
        if self.lower.value > self.upper.value {
            return Err(BoundsError::Refuted {
                lower: self.lower.value.to_f64(),
                upper: self.upper.value.to_f64(),
            });
        }
        Ok(self)
    }
}

fn require_population(cell: &CellCounts, side: CellSide) -> Result<(), BoundsError> {
    if cell.n_pop == 0 {
        return Err(BoundsError::EmptyPopulation(side));
    }
    Ok(())
}

fn require_tests(cell: &CellCounts, side: CellSide) -> Result<(), BoundsError> {
    require_population(cell, side)?;
    if cell.n_tested == 0 {
        return Err(BoundsError::NoTests(side));
    }
    Ok(())
}

fn confirmed_positive_rate<S: Scalar>(cell: &CellCounts, side: CellSide) -> Endpoint<S> {
    Endpoint::new(
        S::ratio(cell.n_positive, cell.n_pop),
        side,
        DenominatorRole::Population,
    )
}

fn test_positivity<S: Scalar>(cell: &CellCounts, side: CellSide) -> Endpoint<S> {
    Endpoint::new(
        S::ratio(cell.n_positive, cell.n_tested),
        side,
        DenominatorRole::Tested,
    )
}

fn worst_case_on<S: Scalar>(cell: &CellCounts, side: CellSide) -> Result<Interval<S>, BoundsError> {
    require_population(cell, side)?;
    let lower = confirmed_positive_rate(cell, side);
    let upper = Endpoint::new(
        lower.value + S::ratio(cell.n_untested(), cell.n_pop),
        side,
        DenominatorRole::Population,
    );
    Ok(Interval { lower, upper })
}

fn test_monotone_on<S: Scalar>(
    cell: &CellCounts,
    side: CellSide,
) -> Result<Interval<S>, BoundsError> {
    require_tests(cell, side)?;
    Ok(Interval {
        lower: confirmed_positive_rate(cell, side),
        upper: test_positivity(cell, side),
    })
}

/// No-assumption bounds: confirmed positive rate, plus the untested rate for
/// the upper end.
pub fn worst_case<S: Scalar>(pop: &CellCounts) -> Result<Interval<S>, BoundsError> {
    worst_case_on(pop, CellSide::Population)
}

/// Bounds when the tested are at least as likely to be infected as the
/// untested: confirmed positive rate to test positivity.
pub fn test_monotone<S: Scalar>(pop: &CellCounts) -> Result<Interval<S>, BoundsError> {
    test_monotone_on(pop, CellSide::Population)
}

/// Test monotonicity plus hospital monotonicity. The upper bound becomes the
/// smaller of population and hospital test positivity; the lower bound is left
/// at the population confirmed positive rate.
pub fn hospital_monotone_upper<S: Scalar>(
    pop: &CellCounts,
    hosp: &CellCounts,
) -> Result<Interval<S>, BoundsError> {
    let p = test_monotone_on::<S>(pop, CellSide::Population)?;
    let h = test_monotone_on::<S>(hosp, CellSide::Hospital)?;
    combine_monotone(p, h)
}

/// Test monotonicity plus hospital independence: the intersection of the
/// population and hospital test-monotone regions.
pub fn hospital_independent<S: Scalar>(
    pop: &CellCounts,
    hosp: &CellCounts,
) -> Result<Interval<S>, BoundsError> {
    let p = test_monotone_on::<S>(pop, CellSide::Population)?;
    let h = test_monotone_on::<S>(hosp, CellSide::Hospital)?;
    combine_independent(p, h)
}

fn lesser<S: Scalar>(a: Endpoint<S>, b: Endpoint<S>) -> Endpoint<S> {
    // ties keep the population endpoint
    if b.value < a.value {
        b
    } else {
        a
    }
}

fn greater<S: Scalar>(a: Endpoint<S>, b: Endpoint<S>) -> Endpoint<S> {
    if b.value > a.value {
        b
    } else {
        a
    }
}

fn combine_monotone<S: Scalar>(
    pop: Interval<S>,
    hosp: Interval<S>,
) -> Result<Interval<S>, BoundsError> {
    Interval {
        lower: pop.lower,
        upper: lesser(pop.upper, hosp.upper),
    }
    .checked()
}

fn combine_independent<S: Scalar>(
    pop: Interval<S>,
    hosp: Interval<S>,
) -> Result<Interval<S>, BoundsError> {
    Interval {
        lower: greater(pop.lower, hosp.lower),
        upper: lesser(pop.upper, hosp.upper),
    }
    .checked()
}

fn cell_for<'a>(
    side: CellSide,
    pop: &'a CellCounts,
    hosp: Option<&'a CellCounts>,
    assumption: Assumption,
) -> Result<&'a CellCounts, BoundsError> {
    match side {
        CellSide::Population => Ok(pop),
        CellSide::Hospital => hosp.ok_or(BoundsError::MissingHospitalCell(assumption)),
    }
}

fn false_negative_share<S: Scalar>(cell: &CellCounts, role: DenominatorRole) -> S {
    let denom = match role {
        DenominatorRole::Population => cell.n_pop,
        DenominatorRole::Tested => cell.n_tested,
    };
    if denom == 0 {
        S::zero()
    } else {
        S::ratio(cell.n_negative(), denom)
    }
}

/// Widen a region for false negatives: a share in `[λ_l, λ_u]` of tested
/// negatives may be infected. Each endpoint is shifted by `λ · negatives /
/// denominator` using its own cell and denominator, then clamped to `[0, 1]`.
pub fn error_adjusted<S: Scalar>(
    base: Interval<S>,
    pop: &CellCounts,
    hosp: Option<&CellCounts>,
    band: &ErrorBand<S>,
) -> Result<Interval<S>, BoundsError> {
    let adjust = |end: Endpoint<S>, lambda: S| -> Result<Endpoint<S>, BoundsError> {
        let cell = cell_for(end.side, pop, hosp, Assumption::TestMonotonePlusHospMonotone)?;
        let shifted = end.value + lambda * false_negative_share::<S>(cell, end.denominator);
        Ok(Endpoint {
            value: shifted.clamp_unit(),
            ..end
        })
    };
    Ok(Interval {
        lower: adjust(base.lower, band.lambda_lower)?,
        upper: adjust(base.upper, band.lambda_upper)?,
    })
}

/// Dispatch to the regime's closed form.
///
/// With an error band, each constituent region is widened before population
/// and hospital regions are intersected, so the hospital regimes combine
/// error-adjusted test-monotone regions.
pub fn bound_ladder<S: Scalar>(
    pop: &CellCounts,
    hosp: Option<&CellCounts>,
    regime: &AssumptionRegime<S>,
) -> Result<Interval<S>, BoundsError> {
    let assumption = regime.assumption;
    let widen = |iv: Interval<S>| match &regime.error_band {
        Some(band) => error_adjusted(iv, pop, hosp, band),
        None => Ok(iv),
    };
    match assumption {
        Assumption::WorstCase => widen(worst_case(pop)?),
        Assumption::TestMonotone => widen(test_monotone(pop)?),
        Assumption::TestMonotonePlusHospMonotone | Assumption::TestMonotonePlusHospIndependent => {
            let hosp_cell = hosp.ok_or(BoundsError::MissingHospitalCell(assumption))?;
            let p = widen(test_monotone_on(pop, CellSide::Population)?)?;
            let h = widen(test_monotone_on(hosp_cell, CellSide::Hospital)?)?;
            if assumption == Assumption::TestMonotonePlusHospMonotone {
                combine_monotone(p, h)
            } else {
                combine_independent(p, h)
            }
        }
    }
}
