//! Core value types shared by every stage of the pipeline.

use std::collections::BTreeMap;
use std::fmt;
use std::ops::{Add, Div, Mul, Sub};
use std::str::FromStr;

use chrono::{NaiveDate, NaiveDateTime};
use num_rational::Ratio;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bounds::AssumptionRegime;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DomainError {
    #[error("cell ordering violated: positives={n_positive}, tested={n_tested}, population={n_pop}")]
    OrderingViolation {
        n_pop: u64,
        n_tested: u64,
        n_positive: u64,
    },
    #[error("negative count: {0}")]
    NegativeCount(i64),
    #[error("invalid probability {0}")]
    InvalidProbability(f64),
    #[error("error band requires 0 <= lambda_lower <= lambda_upper <= 1, got [{0}, {1}]")]
    InvalidErrorBand(f64, f64),
    #[error("age weights must be nonnegative and sum to 1 (sum = {0})")]
    InvalidAgeWeights(f64),
    #[error("unknown age group {0:?}")]
    UnknownAgeGroup(String),
    #[error("invalid ICD-10 code {0:?}")]
    InvalidCode(String),
    #[error("unknown test result {0:?}")]
    UnknownResult(String),
    #[error("unknown sex {0:?}")]
    UnknownSex(String),
}

/// Opaque linkage identifier shared by test, admission and person files.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct PersonId(pub String);

impl PersonId {
    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for PersonId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for PersonId {
    fn from(s: &str) -> Self {
        PersonId(s.to_owned())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum TestResult {
    Inconclusive,
    Negative,
    Positive,
}

impl TestResult {
    pub fn is_positive(self) -> bool {
        matches!(self, TestResult::Positive)
    }

    pub fn label(self) -> &'static str {
        match self {
            TestResult::Positive => "positive",
            TestResult::Negative => "negative",
            TestResult::Inconclusive => "inconclusive",
        }
    }
}

impl FromStr for TestResult {
    type Err = DomainError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let t = s.trim();
        if t.eq_ignore_ascii_case("positive") {
            Ok(TestResult::Positive)
        } else if t.eq_ignore_ascii_case("negative") {
            Ok(TestResult::Negative)
        } else if t.eq_ignore_ascii_case("inconclusive") {
            Ok(TestResult::Inconclusive)
        } else {
            Err(DomainError::UnknownResult(s.to_owned()))
        }
    }
}

/// One SARS-CoV-2 test: who, when the specimen was taken, and the outcome.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TestRecord {
    pub person_id: PersonId,
    pub specimen_date: NaiveDate,
    pub result: TestResult,
}

/// An ICD-10 code, kept as written plus a normalized form (uppercase, no dot)
/// used for prefix matching.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct IcdCode {
    raw: String,
    normalized: String,
}

impl IcdCode {
    pub fn parse(s: &str) -> Result<Self, DomainError> {
        let raw = s.trim();
        let bytes = raw.as_bytes();
        let bad = || DomainError::InvalidCode(s.to_owned());
        if bytes.len() < 3
            || !bytes[0].is_ascii_alphabetic()
            || !bytes[1].is_ascii_digit()
            || !bytes[2].is_ascii_alphanumeric()
        {
            return Err(bad());
        }
        let rest = &raw[3..];
        let suffix = match rest.strip_prefix('.') {
            Some(sfx) if sfx.is_empty() => return Err(bad()),
            Some(sfx) => sfx,
            None => rest,
        };
        if suffix.len() > 4 || !suffix.bytes().all(|b| b.is_ascii_alphanumeric()) {
            return Err(bad());
        }
        Ok(IcdCode {
            raw: raw.to_owned(),
            normalized: normalize_code(raw),
        })
    }

    pub fn as_str(&self) -> &str {
        &self.raw
    }

    pub fn normalized(&self) -> &str {
        &self.normalized
    }

    /// True if this code falls under `prefix` (already normalized).
    pub fn has_prefix(&self, normalized_prefix: &str) -> bool {
        self.normalized.starts_with(normalized_prefix)
    }
}

impl fmt::Display for IcdCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.raw)
    }
}

/// Uppercase and strip dots, so `j12.89` and `J1289` compare equal.
pub fn normalize_code(code: &str) -> String {
    code.trim()
        .chars()
        .filter(|c| *c != '.')
        .map(|c| c.to_ascii_uppercase())
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct DiagnosisEntry {
    pub code: IcdCode,
    pub is_admitting: bool,
    pub is_primary_final: bool,
    /// Priority ordinal, 0 = first listed.
    pub position: u32,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AdmissionRecord {
    pub person_id: PersonId,
    pub admit_time: NaiveDateTime,
    pub discharge_time: Option<NaiveDateTime>,
    pub diagnoses: Vec<DiagnosisEntry>,
}

impl AdmissionRecord {
    pub fn admit_date(&self) -> NaiveDate {
        self.admit_time.date()
    }
}

/// The six population age bands used for stratification.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum AgeGroup {
    #[serde(rename = "0-17")]
    Age0To17,
    #[serde(rename = "18-30")]
    Age18To30,
    #[serde(rename = "30-50")]
    Age30To50,
    #[serde(rename = "50-64")]
    Age50To64,
    #[serde(rename = "65-74")]
    Age65To74,
    #[serde(rename = "75+")]
    Age75Plus,
}

impl AgeGroup {
    pub const ALL: [AgeGroup; 6] = [
        AgeGroup::Age0To17,
        AgeGroup::Age18To30,
        AgeGroup::Age30To50,
        AgeGroup::Age50To64,
        AgeGroup::Age65To74,
        AgeGroup::Age75Plus,
    ];

    pub fn label(self) -> &'static str {
        match self {
            AgeGroup::Age0To17 => "0-17",
            AgeGroup::Age18To30 => "18-30",
            AgeGroup::Age30To50 => "30-50",
            AgeGroup::Age50To64 => "50-64",
            AgeGroup::Age65To74 => "65-74",
            AgeGroup::Age75Plus => "75+",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

impl FromStr for AgeGroup {
    type Err = DomainError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let t = s.trim();
        AgeGroup::ALL
            .into_iter()
            .find(|g| g.label() == t)
            .ok_or_else(|| DomainError::UnknownAgeGroup(s.to_owned()))
    }
}

impl fmt::Display for AgeGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Sex {
    Female,
    Male,
}

impl FromStr for Sex {
    type Err = DomainError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_uppercase().as_str() {
            "F" | "FEMALE" => Ok(Sex::Female),
            "M" | "MALE" => Ok(Sex::Male),
            _ => Err(DomainError::UnknownSex(s.to_owned())),
        }
    }
}

impl Sex {
    pub fn label(self) -> &'static str {
        match self {
            Sex::Female => "F",
            Sex::Male => "M",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PersonRecord {
    pub person_id: PersonId,
    pub age_group: AgeGroup,
    pub sex: Option<Sex>,
    pub county: Option<String>,
}

/// Sufficient statistics for one cell: population, tested, positive.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Hash, Serialize, Deserialize)]
pub struct CellCounts {
    pub n_pop: u64,
    pub n_tested: u64,
    pub n_positive: u64,
}

impl CellCounts {
    pub fn new(n_pop: u64, n_tested: u64, n_positive: u64) -> Result<Self, DomainError> {
        validate_cell(CellCounts {
            n_pop,
            n_tested,
            n_positive,
        })
    }

    /// Accepts signed input (e.g. from an external table) and rejects negatives.
    pub fn from_signed(n_pop: i64, n_tested: i64, n_positive: i64) -> Result<Self, DomainError> {
        let conv = |v: i64| u64::try_from(v).map_err(|_| DomainError::NegativeCount(v));
        Self::new(conv(n_pop)?, conv(n_tested)?, conv(n_positive)?)
    }

    pub fn n_negative(&self) -> u64 {
        self.n_tested - self.n_positive
    }

    pub fn n_untested(&self) -> u64 {
        self.n_pop - self.n_tested
    }

    pub fn is_empty(&self) -> bool {
        self.n_pop == 0
    }

    /// Multiply every count by `k`.
    pub fn scaled(&self, k: u64) -> CellCounts {
        CellCounts {
            n_pop: self.n_pop * k,
            n_tested: self.n_tested * k,
            n_positive: self.n_positive * k,
        }
    }
}

impl Add for CellCounts {
    type Output = CellCounts;

    fn add(self, rhs: CellCounts) -> CellCounts {
        CellCounts {
            n_pop: self.n_pop + rhs.n_pop,
            n_tested: self.n_tested + rhs.n_tested,
            n_positive: self.n_positive + rhs.n_positive,
        }
    }
}

pub fn validate_cell(counts: CellCounts) -> Result<CellCounts, DomainError> {
    if counts.n_positive > counts.n_tested || counts.n_tested > counts.n_pop {
        return Err(DomainError::OrderingViolation {
            n_pop: counts.n_pop,
            n_tested: counts.n_tested,
            n_positive: counts.n_positive,
        });
    }
    Ok(counts)
}

/// Numeric type the closed-form bounds are evaluated in.
///
/// Implemented for `f64` (production) and [`Rational`] (exact comparison
/// against the enumeration oracle).
pub trait Scalar:
    Copy
    + PartialOrd
    + fmt::Debug
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
{
    fn zero() -> Self;
    fn one() -> Self;
    fn from_count(n: u64) -> Self;
    fn to_f64(self) -> f64;

    fn ratio(num: u64, den: u64) -> Self {
        Self::from_count(num) / Self::from_count(den)
    }

    fn min_of(self, other: Self) -> Self {
        if other < self {
            other
        } else {
            self
        }
    }

    fn max_of(self, other: Self) -> Self {
        if other > self {
            other
        } else {
            self
        }
    }

    fn clamp_unit(self) -> Self {
        self.max_of(Self::zero()).min_of(Self::one())
    }
}

impl Scalar for f64 {
    fn zero() -> Self {
        0.0
    }
    fn one() -> Self {
        1.0
    }
    fn from_count(n: u64) -> Self {
        n as f64
    }
    fn to_f64(self) -> f64 {
        self
    }
}

/// Exact rational arithmetic for oracle comparisons.
pub type Rational = Ratio<i128>;

impl Scalar for Rational {
    fn zero() -> Self {
        Ratio::from_integer(0)
    }
    fn one() -> Self {
        Ratio::from_integer(1)
    }
    fn from_count(n: u64) -> Self {
        Ratio::from_integer(i128::from(n))
    }
    fn to_f64(self) -> f64 {
        *self.numer() as f64 / *self.denom() as f64
    }
}

/// Bounds on 1 - NPV, the share of tested negatives who are truly infected.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ErrorBand<S = f64> {
    pub lambda_lower: S,
    pub lambda_upper: S,
}

impl<S: Scalar> ErrorBand<S> {
    pub fn new(lambda_lower: S, lambda_upper: S) -> Result<Self, DomainError> {
        if !(S::zero() <= lambda_lower && lambda_lower <= lambda_upper && lambda_upper <= S::one())
        {
            return Err(DomainError::InvalidErrorBand(
                lambda_lower.to_f64(),
                lambda_upper.to_f64(),
            ));
        }
        Ok(ErrorBand {
            lambda_lower,
            lambda_upper,
        })
    }

    pub fn zero() -> Self {
        ErrorBand {
            lambda_lower: S::zero(),
            lambda_upper: S::zero(),
        }
    }
}

/// Population share of each age band, used for age standardization.
#[derive(Debug, Clone, PartialEq)]
pub struct AgeWeights(BTreeMap<AgeGroup, f64>);

impl AgeWeights {
    pub fn new(weights: BTreeMap<AgeGroup, f64>) -> Result<Self, DomainError> {
        let sum: f64 = weights.values().sum();
        if weights.values().any(|w| !(*w >= 0.0)) || (sum - 1.0).abs() > 1e-12 {
            return Err(DomainError::InvalidAgeWeights(sum));
        }
        Ok(AgeWeights(weights))
    }

    /// Shares proportional to population totals.
    pub fn from_totals(totals: &BTreeMap<AgeGroup, u64>) -> Result<Self, DomainError> {
        let total: u64 = totals.values().sum();
        if total == 0 {
            return Err(DomainError::InvalidAgeWeights(0.0));
        }
        let weights = totals
            .iter()
            .map(|(g, n)| (*g, *n as f64 / total as f64))
            .collect();
        Self::new(weights)
    }

    pub fn get(&self, group: AgeGroup) -> f64 {
        self.0.get(&group).copied().unwrap_or(0.0)
    }

    pub fn iter(&self) -> impl Iterator<Item = (AgeGroup, f64)> + '_ {
        self.0.iter().map(|(g, w)| (*g, *w))
    }
}

/// Point bounds with their standard errors and the confidence interval on the
/// identification region.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BoundsResult {
    pub regime: AssumptionRegime,
    pub lower: f64,
    pub upper: f64,
    pub se_lower: f64,
    pub se_upper: f64,
    pub ci_lower: f64,
    pub ci_upper: f64,
}

impl BoundsResult {
    /// `0 <= lower <= upper <= 1` and the CI nests the bounds.
    pub fn is_consistent(&self) -> bool {
        0.0 <= self.lower
            && self.lower <= self.upper
            && self.upper <= 1.0
            && self.ci_lower <= self.lower
            && self.ci_upper >= self.upper
            && self.se_lower >= 0.0
            && self.se_upper >= 0.0
    }
}
