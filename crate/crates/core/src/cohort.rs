//! Admission cohorts, in-hospital test outcomes and weekly cell counts.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use chrono::{Datelike, Duration, NaiveDate, Weekday};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{
    normalize_code, AdmissionRecord, AgeGroup, CellCounts, DomainError, TestResult,
};
use crate::ingest::{DayTest, LinkedStore};

pub const DEFAULT_CODES_TOML: &str = include_str!("../config/codes.default.toml");

/// Days before admission that still count as an in-hospital test.
pub const HOSPITAL_WINDOW_BEFORE: i64 = 5;
/// Days after admission that still count as an in-hospital test.
pub const HOSPITAL_WINDOW_AFTER: i64 = 1;
/// Prior-testing window is `[t - 15, t - 9]`.
pub const PRIOR_WINDOW: (i64, i64) = (15, 9);

#[derive(Debug, Error)]
pub enum CohortError {
    #[error("cannot read code-set config {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid code-set config: {0}")]
    Toml(#[from] toml::de::Error),
    #[error("invalid code-set config: {0}")]
    Config(String),
    #[error("admission has no diagnoses")]
    EmptyDiagnoses,
    #[error("no population total configured for {0}")]
    MissingPopulationTotals(String),
    #[error("no population total configured for county {0:?}")]
    MissingCountyTotals(String),
    #[error("{context}: {source}")]
    Cell {
        context: String,
        #[source]
        source: DomainError,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ClearCause {
    LaborDelivery,
    Ami,
    Stroke,
    Fractures,
    Crushes,
    OpenWounds,
    Appendicitis,
    VehicleAccidents,
    OtherAccidents,
    Cancer,
}

impl ClearCause {
    pub const ALL: [ClearCause; 10] = [
        ClearCause::LaborDelivery,
        ClearCause::Ami,
        ClearCause::Stroke,
        ClearCause::Fractures,
        ClearCause::Crushes,
        ClearCause::OpenWounds,
        ClearCause::Appendicitis,
        ClearCause::VehicleAccidents,
        ClearCause::OtherAccidents,
        ClearCause::Cancer,
    ];

    pub fn label(self) -> &'static str {
        match self {
            ClearCause::LaborDelivery => "labor_delivery",
            ClearCause::Ami => "ami",
            ClearCause::Stroke => "stroke",
            ClearCause::Fractures => "fractures",
            ClearCause::Crushes => "crushes",
            ClearCause::OpenWounds => "open_wounds",
            ClearCause::Appendicitis => "appendicitis",
            ClearCause::VehicleAccidents => "vehicle_accidents",
            ClearCause::OtherAccidents => "other_accidents",
            ClearCause::Cancer => "cancer",
        }
    }
}

impl FromStr for ClearCause {
    type Err = CohortError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        ClearCause::ALL
            .into_iter()
            .find(|c| c.label() == s)
            .ok_or_else(|| CohortError::Config(format!("unknown clear cause {s:?}")))
    }
}

/// Analysis sample a cell belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum CohortLabel {
    Population,
    Icli,
    NonIcli,
    /// Admissions with any clear cause.
    ClearCauseAny,
    ClearCause(ClearCause),
}

impl CohortLabel {
    /// Every hospital cohort, in output order.
    pub fn hospital_cohorts() -> Vec<CohortLabel> {
        let mut v = vec![
            CohortLabel::Icli,
            CohortLabel::NonIcli,
            CohortLabel::ClearCauseAny,
        ];
        v.extend(ClearCause::ALL.into_iter().map(CohortLabel::ClearCause));
        v
    }

    fn hospital_index(self) -> Option<usize> {
        match self {
            CohortLabel::Population => None,
            CohortLabel::Icli => Some(0),
            CohortLabel::NonIcli => Some(1),
            CohortLabel::ClearCauseAny => Some(2),
            CohortLabel::ClearCause(c) => Some(3 + c as usize),
        }
    }

    pub fn label(self) -> String {
        match self {
            CohortLabel::Population => "population".into(),
            CohortLabel::Icli => "icli".into(),
            CohortLabel::NonIcli => "non_icli".into(),
            CohortLabel::ClearCauseAny => "clear_cause".into(),
            CohortLabel::ClearCause(c) => format!("clear_cause.{}", c.label()),
        }
    }
}

impl fmt::Display for CohortLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.label())
    }
}

impl FromStr for CohortLabel {
    type Err = CohortError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "population" => Ok(CohortLabel::Population),
            "icli" => Ok(CohortLabel::Icli),
            "non_icli" => Ok(CohortLabel::NonIcli),
            "clear_cause" => Ok(CohortLabel::ClearCauseAny),
            other => match other.strip_prefix("clear_cause.") {
                Some(c) => c.parse().map(CohortLabel::ClearCause),
                None => Err(CohortError::Config(format!("unknown cohort {other:?}"))),
            },
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    icli: RawCodes,
    clear_cause: BTreeMap<String, RawCodes>,
    cancer_rule: RawCancerRule,
    #[serde(default)]
    testing: RawTesting,
    #[serde(default)]
    population: RawPopulation,
    week_anchor: Option<RawAnchor>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawCodes {
    codes: Vec<String>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawCancerRule {
    restrict_to_admitting_or_primary: bool,
    #[serde(default)]
    chemotherapy_codes: Vec<String>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct RawTesting {
    inconclusive_counts_as_tested: bool,
    prior_testing_start: NaiveDate,
}

impl Default for RawTesting {
    fn default() -> Self {
        RawTesting {
            inconclusive_counts_as_tested: true,
            prior_testing_start: NaiveDate::from_ymd_opt(2020, 3, 1).expect("valid date"),
        }
    }
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawPopulation {
    total: Option<u64>,
    #[serde(default)]
    age_totals: BTreeMap<AgeGroup, u64>,
    #[serde(default)]
    county_totals: BTreeMap<String, u64>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawAnchor {
    date: NaiveDate,
}

/// Normalized code prefixes.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct CodeSet(Vec<String>);

impl CodeSet {
    /// Parse prefixes, expanding same-letter two-digit ranges like `I60-I63`.
    pub fn parse(entries: &[String]) -> Result<Self, CohortError> {
        let mut out = Vec::new();
        for e in entries {
            match e.split_once('-') {
                None => {
                    let p = normalize_code(e);
                    if p.is_empty() || !p.chars().all(|c| c.is_ascii_alphanumeric()) {
                        return Err(CohortError::Config(format!("bad code prefix {e:?}")));
                    }
                    out.push(p);
                }
                Some((a, b)) => out.extend(expand_range(a.trim(), b.trim())?),
            }
        }
        out.sort();
        out.dedup();
        Ok(CodeSet(out))
    }

    pub fn prefixes(&self) -> &[String] {
        &self.0
    }

    pub fn matches(&self, normalized_code: &str) -> bool {
        self.0.iter().any(|p| normalized_code.starts_with(p.as_str()))
    }
}

fn expand_range(a: &str, b: &str) -> Result<Vec<String>, CohortError> {
    let bad = || CohortError::Config(format!("bad code range {a}-{b}"));
    let split = |s: &str| -> Option<(char, u32)> {
        let mut chars = s.chars();
        let letter = chars.next()?.to_ascii_uppercase();
        let digits = chars.as_str();
        if !letter.is_ascii_alphabetic() || digits.len() != 2 {
            return None;
        }
        Some((letter, digits.parse().ok()?))
    };
    let (la, na) = split(a).ok_or_else(bad)?;
    let (lb, nb) = split(b).ok_or_else(bad)?;
    if la != lb || na > nb {
        return Err(bad());
    }
    Ok((na..=nb).map(|n| format!("{la}{n:02}")).collect())
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CancerRule {
    pub restrict_to_admitting_or_primary: bool,
    pub chemotherapy_codes: CodeSet,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PopulationTotals {
    pub total: Option<u64>,
    pub age_totals: BTreeMap<AgeGroup, u64>,
    pub county_totals: BTreeMap<String, u64>,
}

impl PopulationTotals {
    /// All-ages denominator: the configured total, else the sum over age bands.
    pub fn all_ages(&self) -> Option<u64> {
        self.total.or_else(|| {
            (self.age_totals.len() == AgeGroup::ALL.len()).then(|| self.age_totals.values().sum())
        })
    }

    pub fn stratum(&self, age: Option<AgeGroup>) -> Result<u64, CohortError> {
        match age {
            None => self
                .all_ages()
                .ok_or_else(|| CohortError::MissingPopulationTotals("all ages".into())),
            Some(g) => self
                .age_totals
                .get(&g)
                .copied()
                .ok_or_else(|| CohortError::MissingPopulationTotals(format!("age group {g}"))),
        }
    }
}

/// Code sets, cohort rules and population denominators.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CodeSetConfig {
    pub icli: CodeSet,
    pub clear_cause: BTreeMap<ClearCause, CodeSet>,
    pub cancer_rule: CancerRule,
    pub inconclusive_counts_as_tested: bool,
    pub prior_testing_start: NaiveDate,
    pub population: PopulationTotals,
    pub week_anchor: Option<NaiveDate>,
}

impl CodeSetConfig {
    pub fn from_toml(text: &str) -> Result<Self, CohortError> {
        let raw: RawConfig = toml::from_str(text)?;
        let mut clear_cause = BTreeMap::new();
        for (label, codes) in &raw.clear_cause {
            clear_cause.insert(label.parse::<ClearCause>()?, CodeSet::parse(&codes.codes)?);
        }
        if let Some(missing) = ClearCause::ALL
            .into_iter()
            .find(|c| !clear_cause.contains_key(c))
        {
            return Err(CohortError::Config(format!(
                "clear_cause.{} is not defined",
                missing.label()
            )));
        }
        Ok(CodeSetConfig {
            icli: CodeSet::parse(&raw.icli.codes)?,
            clear_cause,
            cancer_rule: CancerRule {
                restrict_to_admitting_or_primary: raw.cancer_rule.restrict_to_admitting_or_primary,
                chemotherapy_codes: CodeSet::parse(&raw.cancer_rule.chemotherapy_codes)?,
            },
            inconclusive_counts_as_tested: raw.testing.inconclusive_counts_as_tested,
            prior_testing_start: raw.testing.prior_testing_start,
            population: PopulationTotals {
                total: raw.population.total,
                age_totals: raw.population.age_totals,
                county_totals: raw.population.county_totals,
            },
            week_anchor: raw.week_anchor.map(|a| a.date),
        })
    }

    pub fn load(path: &Path) -> Result<Self, CohortError> {
        let text = std::fs::read_to_string(path).map_err(|source| CohortError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_toml(&text)
    }

    pub fn default_codes() -> Self {
        Self::from_toml(DEFAULT_CODES_TOML).expect("shipped code-set config parses")
    }

    fn counts_as_test(&self, t: &DayTest) -> bool {
        self.inconclusive_counts_as_tested || t.result != TestResult::Inconclusive
    }
}

/// Cohorts an admission belongs to: exactly one of ICLI / non-ICLI, plus any
/// matching clear causes.
pub fn classify_admission(
    adm: &AdmissionRecord,
    cfg: &CodeSetConfig,
) -> Result<BTreeSet<CohortLabel>, CohortError> {
    if adm.diagnoses.is_empty() {
        return Err(CohortError::EmptyDiagnoses);
    }
    let mut labels = BTreeSet::new();
    let icli = adm
        .diagnoses
        .iter()
        .any(|d| cfg.icli.matches(d.code.normalized()));
    labels.insert(if icli {
        CohortLabel::Icli
    } else {
        CohortLabel::NonIcli
    });

    let chemo = adm
        .diagnoses
        .iter()
        .any(|d| cfg.cancer_rule.chemotherapy_codes.matches(d.code.normalized()));
    for (cause, codes) in &cfg.clear_cause {
        let hit = if *cause == ClearCause::Cancer && cfg.cancer_rule.restrict_to_admitting_or_primary
        {
            chemo
                || adm.diagnoses.iter().any(|d| {
                    (d.is_admitting || d.is_primary_final) && codes.matches(d.code.normalized())
                })
        } else {
            adm.diagnoses.iter().any(|d| codes.matches(d.code.normalized()))
        };
        if hit {
            labels.insert(CohortLabel::ClearCause(*cause));
            labels.insert(CohortLabel::ClearCauseAny);
        }
    }
    Ok(labels)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum HospitalTest {
    NotTested,
    TestedNegative,
    TestedPositive,
}

fn window_outcome<'a>(tests: impl Iterator<Item = &'a DayTest>, cfg: &CodeSetConfig) -> HospitalTest {
    let mut outcome = HospitalTest::NotTested;
    for t in tests.filter(|t| cfg.counts_as_test(t)) {
        if t.result.is_positive() {
            return HospitalTest::TestedPositive;
        }
        outcome = HospitalTest::TestedNegative;
    }
    outcome
}

fn hospital_window(admit: NaiveDate) -> (NaiveDate, NaiveDate) {
    (
        admit - Duration::days(HOSPITAL_WINDOW_BEFORE),
        admit + Duration::days(HOSPITAL_WINDOW_AFTER),
    )
}

/// Test outcome over the closed window from five days before to one day
/// after the admission date.
pub fn in_hospital_test_outcome(
    adm: &AdmissionRecord,
    store: &LinkedStore,
    cfg: &CodeSetConfig,
) -> HospitalTest {
    match store.person_index(&adm.person_id) {
        Some(p) => outcome_for(store, p, adm.admit_date(), cfg),
        None => HospitalTest::NotTested,
    }
}

fn outcome_for(store: &LinkedStore, person: u32, admit: NaiveDate, cfg: &CodeSetConfig) -> HospitalTest {
    let (from, to) = hospital_window(admit);
    window_outcome(store.tests_between(person, from, to).iter(), cfg)
}

/// Calendar week index relative to an anchor date; negative before it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct WeekId(pub i64);

impl fmt::Display for WeekId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Seven-day bins starting on the anchor date.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WeekCalendar {
    pub anchor: NaiveDate,
}

impl WeekCalendar {
    pub fn new(anchor: NaiveDate) -> Self {
        WeekCalendar { anchor }
    }

    /// The configured anchor, else the first Friday on or after `start`.
    pub fn for_config(cfg: &CodeSetConfig, start: NaiveDate) -> Self {
        match cfg.week_anchor {
            Some(a) => WeekCalendar::new(a),
            None => {
                let ahead = (7 + Weekday::Fri.num_days_from_monday() as i64
                    - start.weekday().num_days_from_monday() as i64)
                    % 7;
                WeekCalendar::new(start + Duration::days(ahead))
            }
        }
    }

    pub fn week_of(&self, date: NaiveDate) -> WeekId {
        WeekId((date - self.anchor).num_days().div_euclid(7))
    }

    pub fn start(&self, week: WeekId) -> NaiveDate {
        self.anchor + Duration::days(7 * week.0)
    }

    pub fn end(&self, week: WeekId) -> NaiveDate {
        self.start(week) + Duration::days(6)
    }

    pub fn weeks_between(&self, from: NaiveDate, to: NaiveDate) -> Vec<WeekId> {
        let (a, b) = (self.week_of(from).0, self.week_of(to).0);
        (a..=b).map(WeekId).collect()
    }
}

/// Sufficient statistics for one week, cohort and age stratum (`None` is all
/// ages).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WeeklyCell {
    pub week: WeekId,
    pub cohort: CohortLabel,
    pub age_group: Option<AgeGroup>,
    pub counts: CellCounts,
}

/// Strata in output order: all ages first, then each band.
pub fn strata() -> impl Iterator<Item = Option<AgeGroup>> {
    std::iter::once(None).chain(AgeGroup::ALL.into_iter().map(Some))
}

const STRATA: usize = 7;

fn stratum_slot(age: Option<AgeGroup>) -> usize {
    age.map_or(0, |g| 1 + g.index())
}

fn cell(
    n_pop: u64,
    n_tested: u64,
    n_positive: u64,
    context: impl FnOnce() -> String,
) -> Result<CellCounts, CohortError> {
    CellCounts::new(n_pop, n_tested, n_positive).map_err(|source| CohortError::Cell {
        context: context(),
        source,
    })
}

/// Distinct persons tested and positive in `[from, to]`.
fn person_week(tests: &[DayTest], cfg: &CodeSetConfig) -> (bool, bool) {
    let mut tested = false;
    for t in tests.iter().filter(|t| cfg.counts_as_test(t)) {
        if t.result.is_positive() {
            return (true, true);
        }
        tested = true;
    }
    (tested, false)
}

/// Population cells for one week, all ages plus each age band. People with
/// no demographics count toward the all-ages cell only.
pub fn weekly_population_cells(
    store: &LinkedStore,
    cfg: &CodeSetConfig,
    calendar: &WeekCalendar,
    week: WeekId,
) -> Result<Vec<WeeklyCell>, CohortError> {
    let (from, to) = (calendar.start(week), calendar.end(week));
    let tallies = (0..store.person_count() as u32)
        .into_par_iter()
        .fold(
            || [[0u64; 2]; STRATA],
            |mut acc, p| {
                let (tested, positive) = person_week(store.tests_between(p, from, to), cfg);
                if tested {
                    let mut add = |slot: usize| {
                        acc[slot][0] += 1;
                        acc[slot][1] += positive as u64;
                    };
                    add(0);
                    if let Some(d) = store.demographics(p) {
                        add(stratum_slot(Some(d.age_group)));
                    }
                }
                acc
            },
        )
        .reduce(|| [[0u64; 2]; STRATA], add_tallies);
    strata()
        .map(|age| {
            let [tested, positive] = tallies[stratum_slot(age)];
            let n_pop = cfg.population.stratum(age)?;
            Ok(WeeklyCell {
                week,
                cohort: CohortLabel::Population,
                age_group: age,
                counts: cell(n_pop, tested, positive, || {
                    format!("population week {week} {}", age_label(age))
                })?,
            })
        })
        .collect()
}

fn add_tallies<const K: usize>(mut a: [[u64; K]; STRATA], b: [[u64; K]; STRATA]) -> [[u64; K]; STRATA] {
    for (x, y) in a.iter_mut().zip(b) {
        for (u, v) in x.iter_mut().zip(y) {
            *u += v;
        }
    }
    a
}

pub fn age_label(age: Option<AgeGroup>) -> &'static str {
    age.map_or("all", AgeGroup::label)
}

/// Hospital cells for one week and cohort. The unit is the admission.
pub fn weekly_hospital_cells(
    store: &LinkedStore,
    cfg: &CodeSetConfig,
    calendar: &WeekCalendar,
    week: WeekId,
    cohort: CohortLabel,
) -> Result<Vec<WeeklyCell>, CohortError> {
    if cohort == CohortLabel::Population {
        return Err(CohortError::Config(
            "population is not a hospital cohort".into(),
        ));
    }
    let mut tallies = [[0u64; 3]; STRATA];
    for adm in store.admissions() {
        if calendar.week_of(adm.record.admit_date()) != week {
            continue;
        }
        let Ok(labels) = classify_admission(&adm.record, cfg) else {
            continue;
        };
        if !labels.contains(&cohort) {
            continue;
        }
        let outcome = outcome_for(store, adm.person, adm.record.admit_date(), cfg);
        let age = store.demographics(adm.person).map(|d| d.age_group);
        tally_admission(&mut tallies, age, outcome);
    }
    Ok(strata()
        .map(|age| {
            let [n, t, p] = tallies[stratum_slot(age)];
            WeeklyCell {
                week,
                cohort,
                age_group: age,
                counts: CellCounts {
                    n_pop: n,
                    n_tested: t,
                    n_positive: p,
                },
            }
        })
        .collect())
}

fn tally_admission(tallies: &mut [[u64; 3]; STRATA], age: Option<AgeGroup>, outcome: HospitalTest) {
    let mut add = |slot: usize| {
        tallies[slot][0] += 1;
        tallies[slot][1] += (outcome != HospitalTest::NotTested) as u64;
        tallies[slot][2] += (outcome == HospitalTest::TestedPositive) as u64;
    };
    add(0);
    if age.is_some() {
        add(stratum_slot(age));
    }
}

/// Every weekly cell for a store, computed in one pass over persons and one
/// over admissions.
#[derive(Debug, Clone, PartialEq)]
pub struct CellTable {
    pub calendar: WeekCalendar,
    pub weeks: Vec<WeekId>,
    pub population: BTreeMap<(WeekId, Option<AgeGroup>), CellCounts>,
    pub hospital: BTreeMap<(WeekId, CohortLabel, Option<AgeGroup>), CellCounts>,
    /// Admissions without diagnoses, left out of every hospital cohort.
    pub undiagnosed_admissions: usize,
}

impl CellTable {
    pub fn population_cell(&self, week: WeekId, age: Option<AgeGroup>) -> Option<CellCounts> {
        self.population.get(&(week, age)).copied()
    }

    /// Zero when the cohort had no admissions that week.
    pub fn hospital_cell(&self, week: WeekId, cohort: CohortLabel, age: Option<AgeGroup>) -> CellCounts {
        self.hospital
            .get(&(week, cohort, age))
            .copied()
            .unwrap_or_default()
    }
}

pub fn build_cells(
    store: &LinkedStore,
    cfg: &CodeSetConfig,
    calendar: &WeekCalendar,
) -> Result<CellTable, CohortError> {
    let Some((first, last)) = store.date_range() else {
        return Ok(CellTable {
            calendar: *calendar,
            weeks: Vec::new(),
            population: BTreeMap::new(),
            hospital: BTreeMap::new(),
            undiagnosed_admissions: 0,
        });
    };
    let weeks = calendar.weeks_between(first, last);
    let w0 = weeks[0].0;
    let n_weeks = weeks.len();

    let pop_tallies = (0..store.person_count() as u32)
        .into_par_iter()
        .fold(
            || vec![[0u64; 2]; n_weeks * STRATA],
            |mut acc, p| {
                let slot = store
                    .demographics(p)
                    .map(|d| stratum_slot(Some(d.age_group)));
                let tests = store.tests(p);
                let mut i = 0;
                while i < tests.len() {
                    let w = calendar.week_of(tests[i].date);
                    let j = i + tests[i..]
                        .iter()
                        .take_while(|t| calendar.week_of(t.date) == w)
                        .count();
                    let (tested, positive) = person_week(&tests[i..j], cfg);
                    if tested {
                        let base = (w.0 - w0) as usize * STRATA;
                        for s in std::iter::once(0).chain(slot) {
                            acc[base + s][0] += 1;
                            acc[base + s][1] += positive as u64;
                        }
                    }
                    i = j;
                }
                acc
            },
        )
        .reduce(|| vec![[0u64; 2]; n_weeks * STRATA], add_flat);

    let mut population = BTreeMap::new();
    for (wi, week) in weeks.iter().enumerate() {
        for age in strata() {
            let [tested, positive] = pop_tallies[wi * STRATA + stratum_slot(age)];
            let n_pop = cfg.population.stratum(age)?;
            let counts = cell(n_pop, tested, positive, || {
                format!("population week {week} {}", age_label(age))
            })?;
            population.insert((*week, age), counts);
        }
    }

    let cohorts = CohortLabel::hospital_cohorts();
    let n_cohorts = cohorts.len();
    let (hosp_tallies, undiagnosed) = store
        .admissions()
        .par_iter()
        .fold(
            || (vec![[0u64; 3]; n_weeks * n_cohorts * STRATA], 0usize),
            |(mut acc, skipped), adm| {
                let Ok(labels) = classify_admission(&adm.record, cfg) else {
                    return (acc, skipped + 1);
                };
                let date = adm.record.admit_date();
                let w = (calendar.week_of(date).0 - w0) as usize;
                let outcome = outcome_for(store, adm.person, date, cfg);
                let age = store.demographics(adm.person).map(|d| d.age_group);
                for label in labels {
                    let c = label.hospital_index().expect("hospital cohort");
                    let base = (w * n_cohorts + c) * STRATA;
                    let slice: &mut [[u64; 3]; STRATA] = (&mut acc[base..base + STRATA])
                        .try_into()
                        .expect("stratum block");
                    tally_admission(slice, age, outcome);
                }
                (acc, skipped)
            },
        )
        .reduce(
            || (vec![[0u64; 3]; n_weeks * n_cohorts * STRATA], 0),
            |(a, sa), (b, sb)| (add_flat(a, b), sa + sb),
        );

    let mut hospital = BTreeMap::new();
    for (wi, week) in weeks.iter().enumerate() {
        for (ci, cohort) in cohorts.iter().enumerate() {
            for age in strata() {
                let [n, t, p] = hosp_tallies[(wi * n_cohorts + ci) * STRATA + stratum_slot(age)];
                if n > 0 {
                    hospital.insert(
                        (*week, *cohort, age),
                        CellCounts {
                            n_pop: n,
                            n_tested: t,
                            n_positive: p,
                        },
                    );
                }
            }
        }
    }

    Ok(CellTable {
        calendar: *calendar,
        weeks,
        population,
        hospital,
        undiagnosed_admissions: undiagnosed,
    })
}

fn add_flat<const K: usize>(mut a: Vec<[u64; K]>, b: Vec<[u64; K]>) -> Vec<[u64; K]> {
    for (x, y) in a.iter_mut().zip(b) {
        for (u, v) in x.iter_mut().zip(y) {
            *u += v;
        }
    }
    a
}

/// Whether the person has a test in `[t - 15, t - 9]`.
pub fn had_prior_test(store: &LinkedStore, cfg: &CodeSetConfig, person: u32, t: NaiveDate) -> bool {
    let from = t - Duration::days(PRIOR_WINDOW.0);
    let to = t - Duration::days(PRIOR_WINDOW.1);
    store
        .tests_between(person, from, to)
        .iter()
        .any(|d| cfg.counts_as_test(d))
}

/// Share of a set of admissions whose person was tested in `[t - 15, t - 9]`
/// relative to their own admission date. Zero for an empty set.
pub fn prior_test_rate<'a>(
    store: &LinkedStore,
    cfg: &CodeSetConfig,
    admissions: impl IntoIterator<Item = &'a crate::ingest::LinkedAdmission>,
) -> f64 {
    let (mut n, mut hits) = (0u64, 0u64);
    for a in admissions {
        n += 1;
        hits += had_prior_test(store, cfg, a.person, a.record.admit_date()) as u64;
    }
    if n == 0 {
        0.0
    } else {
        hits as f64 / n as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PriorRateRow {
    pub week: WeekId,
    pub cohort: CohortLabel,
    /// Admissions for hospital cohorts; days averaged over for the population.
    pub n: u64,
    pub rate: f64,
}

/// Weekly prior-test-rate series by admission week.
///
/// Hospital cohorts use each person's first admission on or after the
/// configured start date. The population rate for day `t` is the share of
/// the population tested in `[t - 15, t - 9]`, averaged over the days of the
/// week.
pub fn prior_test_rates(
    store: &LinkedStore,
    cfg: &CodeSetConfig,
    calendar: &WeekCalendar,
) -> Result<Vec<PriorRateRow>, CohortError> {
    let Some((first, last)) = store.date_range() else {
        return Ok(Vec::new());
    };
    let n_pop = cfg.population.stratum(None)?;
    let start = cfg.prior_testing_start;

    let mut hosp: BTreeMap<(WeekId, CohortLabel), (u64, u64)> = BTreeMap::new();
    let admissions = store.admissions();
    let mut i = 0;
    while i < admissions.len() {
        let person = admissions[i].person;
        let j = i + admissions[i..]
            .iter()
            .take_while(|a| a.person == person)
            .count();
        let first_after = admissions[i..j]
            .iter()
            .find(|a| a.record.admit_date() >= start);
        if let Some(a) = first_after {
            if let Ok(labels) = classify_admission(&a.record, cfg) {
                let date = a.record.admit_date();
                let hit = had_prior_test(store, cfg, person, date) as u64;
                for l in labels {
                    let e = hosp.entry((calendar.week_of(date), l)).or_default();
                    e.0 += 1;
                    e.1 += hit;
                }
            }
        }
        i = j;
    }

    // Person p tested on day d counts for every t in [d + 9, d + 15].
    let days = (last - first).num_days() as usize + 1;
    let (lo, hi) = (PRIOR_WINDOW.1, PRIOR_WINDOW.0);
    let mut diff = vec![0i64; days + 1];
    for p in 0..store.person_count() as u32 {
        let mut covered_to: Option<i64> = None;
        for t in store.tests(p).iter().filter(|t| cfg.counts_as_test(t)) {
            let d = (t.date - first).num_days();
            let (a, b) = (d + lo, d + hi);
            let a = covered_to.map_or(a, |c| a.max(c + 1));
            if a <= b {
                let (ca, cb) = (a.max(0), b.min(days as i64 - 1));
                if ca <= cb {
                    diff[ca as usize] += 1;
                    diff[cb as usize + 1] -= 1;
                }
                covered_to = Some(b);
            }
        }
    }
    let mut pop: BTreeMap<WeekId, (u64, f64)> = BTreeMap::new();
    let mut running = 0i64;
    for (k, delta) in diff.iter().take(days).enumerate() {
        running += delta;
        let day = first + Duration::days(k as i64);
        if day < start {
            continue;
        }
        let e = pop.entry(calendar.week_of(day)).or_default();
        e.0 += 1;
        e.1 += running as f64 / n_pop as f64;
    }

    let mut rows: Vec<PriorRateRow> = pop
        .into_iter()
        .map(|(week, (n, total))| PriorRateRow {
            week,
            cohort: CohortLabel::Population,
            n,
            rate: total / n as f64,
        })
        .collect();
    rows.extend(hosp.into_iter().map(|((week, cohort), (n, hits))| PriorRateRow {
        week,
        cohort,
        n,
        rate: hits as f64 / n as f64,
    }));
    rows.sort_by_key(|a| (a.week, a.cohort));
    Ok(rows)
}

fn ever_tested(store: &LinkedStore, cfg: &CodeSetConfig, person: u32) -> bool {
    store.tests(person).iter().any(|t| cfg.counts_as_test(t))
}

/// Share of a county's population that has ever been tested.
pub fn community_test_rate(
    store: &LinkedStore,
    cfg: &CodeSetConfig,
    county: &str,
) -> Result<f64, CohortError> {
    let total = *cfg
        .population
        .county_totals
        .get(county)
        .ok_or_else(|| CohortError::MissingCountyTotals(county.to_owned()))?;
    let tested = (0..store.person_count() as u32)
        .filter(|&p| {
            store
                .demographics(p)
                .and_then(|d| d.county.as_deref())
                .is_some_and(|c| c == county)
                && ever_tested(store, cfg, p)
        })
        .count() as u64;
    let counts = cell(total, tested, 0, || format!("county {county}"))?;
    Ok(if counts.n_pop == 0 {
        0.0
    } else {
        counts.n_tested as f64 / counts.n_pop as f64
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CommunityRateRow {
    pub group: String,
    /// Persons (population) or admissions (cohorts) averaged over.
    pub n: u64,
    pub mean_county_rate: f64,
}

/// County test rates summarized per group: the unweighted average county,
/// the average person, and the average admission in each hospital cohort.
/// Admissions whose person has no known county are left out.
pub fn community_test_rates(
    store: &LinkedStore,
    cfg: &CodeSetConfig,
) -> Result<(BTreeMap<String, f64>, Vec<CommunityRateRow>), CohortError> {
    let totals = &cfg.population.county_totals;
    if totals.is_empty() {
        return Err(CohortError::MissingCountyTotals("<none configured>".into()));
    }
    let mut tested: BTreeMap<&str, u64> = totals.keys().map(|k| (k.as_str(), 0)).collect();
    for p in 0..store.person_count() as u32 {
        let Some(county) = store.demographics(p).and_then(|d| d.county.as_deref()) else {
            continue;
        };
        let slot = tested
            .get_mut(county)
            .ok_or_else(|| CohortError::MissingCountyTotals(county.to_owned()))?;
        *slot += ever_tested(store, cfg, p) as u64;
    }
    let mut rates = BTreeMap::new();
    for (county, total) in totals {
        let counts = cell(*total, tested[county.as_str()], 0, || format!("county {county}"))?;
        let r = if counts.n_pop == 0 {
            0.0
        } else {
            counts.n_tested as f64 / counts.n_pop as f64
        };
        rates.insert(county.clone(), r);
    }

    let mut rows = Vec::new();
    rows.push(CommunityRateRow {
        group: "county_average".into(),
        n: rates.len() as u64,
        mean_county_rate: rates.values().sum::<f64>() / rates.len() as f64,
    });
    let pop_total: u64 = totals.values().sum();
    let weighted: f64 = totals
        .iter()
        .map(|(c, n)| *n as f64 * rates[c])
        .sum::<f64>();
    rows.push(CommunityRateRow {
        group: CohortLabel::Population.label(),
        n: pop_total,
        mean_county_rate: if pop_total == 0 { 0.0 } else { weighted / pop_total as f64 },
    });

    let mut by_cohort: BTreeMap<CohortLabel, (u64, f64)> = BTreeMap::new();
    for adm in store.admissions() {
        let Some(county) = store.demographics(adm.person).and_then(|d| d.county.as_deref()) else {
            continue;
        };
        let Ok(labels) = classify_admission(&adm.record, cfg) else {
            continue;
        };
        let r = rates[county];
        for l in labels {
            let e = by_cohort.entry(l).or_default();
            e.0 += 1;
            e.1 += r;
        }
    }
    rows.extend(by_cohort.into_iter().map(|(l, (n, s))| CommunityRateRow {
        group: l.label(),
        n,
        mean_county_rate: s / n as f64,
    }));
    Ok((rates, rows))
}
