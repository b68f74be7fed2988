//! Seeded synthetic populations with known infection status.
//!
//! Each person draws from their own ChaCha8 stream (seed, person index), so
//! output is identical regardless of thread count or chunking.

pub mod oracle;

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use chrono::{Duration, NaiveDate, NaiveDateTime, NaiveTime};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Deserialize;
use thiserror::Error;

use crate::cohort::{classify_admission, CodeSetConfig, CohortLabel, WeekId, DEFAULT_CODES_TOML};
use crate::domain::{
    AdmissionRecord, AgeGroup, PersonId, PersonRecord, Sex, TestRecord, TestResult,
};
use crate::ingest::{self, build_store, dedup_admissions, IngestError, LinkedStore};

pub use oracle::{enumerate_bounds, enumerate_finite, Observed, OracleError, SmallInstance};

pub const MAX_WEEKS: usize = 64;

/// Everything in the shipped code-set config that is not population data.
const CODES_SECTION_END: &str = "# Approximate 2019 Indiana resident population by age band.";

#[derive(Debug, Error)]
pub enum SimulateError {
    #[error("invalid scenario: {0}")]
    InvalidScenario(String),
    #[error("invalid scenario file: {0}")]
    Toml(#[from] toml::de::Error),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Ingest(#[from] IngestError),
}

fn invalid(msg: impl Into<String>) -> SimulateError {
    SimulateError::InvalidScenario(msg.into())
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HospitalScenario {
    /// Weekly probability of a non-ICLI admission, averaged over everyone.
    pub admission_rate: f64,
    /// Correlation between a non-ICLI admission and infection. Zero makes
    /// admitted patients representative; negative values admit the infected
    /// less often.
    #[serde(default)]
    pub phi: f64,
    /// In-hospital test probability for uninfected non-ICLI patients.
    pub test_rate: f64,
    /// Multiplier on `test_rate` for infected patients.
    #[serde(default = "one")]
    pub infected_test_ratio: f64,
    /// Weekly probability of an ICLI admission for the infected.
    #[serde(default)]
    pub icli_rate: f64,
    /// Weekly probability of an ICLI admission for the uninfected.
    #[serde(default)]
    pub icli_background_rate: f64,
    #[serde(default = "default_icli_test_rate")]
    pub icli_test_rate: f64,
    /// Share of non-ICLI admissions coded with a clear cause.
    #[serde(default = "default_clear_cause_share")]
    pub clear_cause_share: f64,
    /// Share of admissions that also appear as a second, duplicate record.
    #[serde(default)]
    pub duplicate_rate: f64,
}

fn one() -> f64 {
    1.0
}

fn default_icli_test_rate() -> f64 {
    0.7
}

fn default_clear_cause_share() -> f64 {
    0.3
}

fn default_start() -> NaiveDate {
    NaiveDate::from_ymd_opt(2020, 6, 12).expect("valid date")
}

fn default_age_shares() -> [f64; 6] {
    let totals = [1_580_000.0, 1_150_000.0, 1_700_000.0, 1_250_000.0, 620_000.0, 430_000.0];
    let sum: f64 = totals.iter().sum();
    totals.map(|t| t / sum)
}

fn default_counties() -> u32 {
    10
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub seed: u64,
    pub population: u64,
    #[serde(default = "default_start")]
    pub start_date: NaiveDate,
    /// Infection probability per week; its length is the number of weeks.
    pub prevalence: Vec<f64>,
    /// Keep infection status correlated across weeks: a person infected at a
    /// lower weekly prevalence stays infected at any higher one.
    #[serde(default)]
    pub persistent_infection: bool,
    /// Weekly test probability for the uninfected.
    pub test_rate: f64,
    /// Ratio of infected to uninfected weekly test probability.
    pub rho: f64,
    #[serde(default)]
    pub false_negative_rate: f64,
    #[serde(default)]
    pub inconclusive_rate: f64,
    /// Probability of a next-day retest after any test.
    #[serde(default)]
    pub retest_rate: f64,
    /// Multiplier on `retest_rate` for infected people whose first test was
    /// negative. One means retesting is unrelated to the first result.
    #[serde(default = "one")]
    pub selective_retest_factor: f64,
    pub hospital: Option<HospitalScenario>,
    #[serde(default = "default_age_shares")]
    pub age_shares: [f64; 6],
    #[serde(default = "default_counties")]
    pub counties: u32,
    /// Share of people left out of the persons file.
    #[serde(default)]
    pub missing_demographics_rate: f64,
}

impl ScenarioConfig {
    pub fn from_toml(text: &str) -> Result<Self, SimulateError> {
        let cfg: ScenarioConfig = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, SimulateError> {
        let text = std::fs::read_to_string(path).map_err(|source| SimulateError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_toml(&text)
    }

    pub fn weeks(&self) -> usize {
        self.prevalence.len()
    }

    pub fn validate(&self) -> Result<(), SimulateError> {
        let unit = |name: &str, v: f64| {
            if (0.0..=1.0).contains(&v) {
                Ok(())
            } else {
                Err(invalid(format!("{name} = {v} is not in [0, 1]")))
            }
        };
        if self.population == 0 || self.population > u32::MAX as u64 {
            return Err(invalid("population must be between 1 and 2^32 - 1"));
        }
        if self.prevalence.is_empty() || self.prevalence.len() > MAX_WEEKS {
            return Err(invalid(format!("between 1 and {MAX_WEEKS} weeks of prevalence required")));
        }
        for p in &self.prevalence {
            unit("prevalence", *p)?;
        }
        unit("test_rate", self.test_rate)?;
        unit("false_negative_rate", self.false_negative_rate)?;
        unit("inconclusive_rate", self.inconclusive_rate)?;
        unit("retest_rate", self.retest_rate)?;
        unit("missing_demographics_rate", self.missing_demographics_rate)?;
        if !(self.rho > 0.0) || !(self.selective_retest_factor > 0.0) {
            return Err(invalid("rho and selective_retest_factor must be positive"));
        }
        if self.age_shares.iter().any(|s| !(*s >= 0.0))
            || (self.age_shares.iter().sum::<f64>() - 1.0).abs() > 1e-9
        {
            return Err(invalid("age_shares must be nonnegative and sum to 1"));
        }
        if self.counties == 0 {
            return Err(invalid("at least one county required"));
        }
        if let Some(h) = &self.hospital {
            unit("hospital.admission_rate", h.admission_rate)?;
            unit("hospital.test_rate", h.test_rate)?;
            unit("hospital.icli_rate", h.icli_rate)?;
            unit("hospital.icli_background_rate", h.icli_background_rate)?;
            unit("hospital.icli_test_rate", h.icli_test_rate)?;
            unit("hospital.clear_cause_share", h.clear_cause_share)?;
            unit("hospital.duplicate_rate", h.duplicate_rate)?;
            if !(h.infected_test_ratio > 0.0) {
                return Err(invalid("hospital.infected_test_ratio must be positive"));
            }
            if !(-1.0..=1.0).contains(&h.phi) {
                return Err(invalid("hospital.phi must be in [-1, 1]"));
            }
            for &p in &self.prevalence {
                admission_probabilities(h.admission_rate, h.phi, p)?;
            }
        }
        Ok(())
    }
}

/// `(Pr(H | infected), Pr(H | uninfected))` giving marginal rate `h` and
/// correlation `phi` with an infection indicator of mean `p`.
pub fn admission_probabilities(h: f64, phi: f64, p: f64) -> Result<(f64, f64), SimulateError> {
    if p <= 0.0 || p >= 1.0 || phi == 0.0 {
        return Ok((h, h));
    }
    let cov = phi * (h * (1.0 - h) * p * (1.0 - p)).sqrt();
    let infected = h + cov / p;
    let uninfected = h - cov / (1.0 - p);
    if !(0.0..=1.0).contains(&infected) || !(0.0..=1.0).contains(&uninfected) {
        return Err(invalid(format!(
            "phi = {phi} is not attainable with admission rate {h} and prevalence {p}"
        )));
    }
    Ok((infected, uninfected))
}

const ROUTINE_CODES: [&str; 10] = [
    "I10", "E11.9", "K21.9", "E78.5", "N18.3", "I50.9", "F32.9", "M54.5", "K57.30", "N39.0",
];
const CLEAR_CAUSE_CODES: [&str; 10] = [
    "O80", "I21.4", "I63.9", "S72.001A", "S07.0XXA", "S61.419A", "K35.80", "V43.5", "W19.XXXA",
    "C50.9",
];
const ICLI_CODES: [&str; 6] = ["U07.1", "J12.89", "J18.9", "R05", "R50.9", "J06.9"];
/// Codes outside every cohort set; varied between duplicate records.
const FILLER_CODES: [&str; 2] = ["Z79.899", "Z87.891"];

/// One generated admission and the infection status behind it.
#[derive(Debug, Clone)]
struct GeneratedAdmission {
    record: AdmissionRecord,
    duplicate: Option<AdmissionRecord>,
    week: usize,
    infected: bool,
}

#[derive(Debug, Clone)]
struct GeneratedPerson {
    record: Option<PersonRecord>,
    infected: u64,
    tests: Vec<TestRecord>,
    admissions: Vec<GeneratedAdmission>,
}

fn person_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

pub fn person_id(index: u64) -> PersonId {
    PersonId(format!("P{index:09}"))
}

fn pick_age(rng: &mut ChaCha8Rng, shares: &[f64; 6]) -> AgeGroup {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (g, s) in AgeGroup::ALL.into_iter().zip(shares) {
        acc += s;
        if u < acc {
            return g;
        }
    }
    AgeGroup::Age75Plus
}

struct Plan<'a> {
    cfg: &'a ScenarioConfig,
    admit: Vec<(f64, f64)>,
}

impl<'a> Plan<'a> {
    fn new(cfg: &'a ScenarioConfig) -> Result<Self, SimulateError> {
        cfg.validate()?;
        let admit = match &cfg.hospital {
            Some(h) => cfg
                .prevalence
                .iter()
                .map(|&p| admission_probabilities(h.admission_rate, h.phi, p))
                .collect::<Result<_, _>>()?,
            None => vec![(0.0, 0.0); cfg.weeks()],
        };
        Ok(Plan { cfg, admit })
    }

    fn result(&self, rng: &mut ChaCha8Rng, infected: bool) -> TestResult {
        if rng.random_bool(self.cfg.inconclusive_rate) {
            TestResult::Inconclusive
        } else if infected && !rng.random_bool(self.cfg.false_negative_rate) {
            TestResult::Positive
        } else {
            TestResult::Negative
        }
    }

    fn person(&self, index: u64) -> GeneratedPerson {
        let cfg = self.cfg;
        let mut rng = person_rng(cfg.seed, index);
        let id = person_id(index);
        let age_group = pick_age(&mut rng, &cfg.age_shares);
        let sex = if rng.random_bool(0.5) { Sex::Female } else { Sex::Male };
        let county = format!("county_{:02}", rng.random_range(0..cfg.counties));
        let record = (!rng.random_bool(cfg.missing_demographics_rate)).then(|| PersonRecord {
            person_id: id.clone(),
            age_group,
            sex: Some(sex),
            county: Some(county),
        });
        let persistent_draw: f64 = rng.random();

        let mut infected_mask = 0u64;
        let mut tests = Vec::new();
        let mut admissions = Vec::new();
        let infected_rate = (cfg.rho * cfg.test_rate).min(1.0);
        for (w, &p) in cfg.prevalence.iter().enumerate() {
            let week_start = cfg.start_date + Duration::days(7 * w as i64);
            let infected = if cfg.persistent_infection {
                persistent_draw < p
            } else {
                rng.random_bool(p)
            };
            infected_mask |= (infected as u64) << w;

            let rate = if infected { infected_rate } else { cfg.test_rate };
            if rng.random_bool(rate) {
                let date = week_start + Duration::days(rng.random_range(0..7));
                let first = self.result(&mut rng, infected);
                tests.push(TestRecord {
                    person_id: id.clone(),
                    specimen_date: date,
                    result: first,
                });
                let mut q = cfg.retest_rate;
                if infected && first == TestResult::Negative {
                    q = (q * cfg.selective_retest_factor).min(1.0);
                }
                if rng.random_bool(q) {
                    tests.push(TestRecord {
                        person_id: id.clone(),
                        specimen_date: date + Duration::days(1),
                        result: self.result(&mut rng, infected),
                    });
                }
            }

            let Some(h) = &cfg.hospital else { continue };
            let (h_inf, h_uninf) = self.admit[w];
            if rng.random_bool(if infected { h_inf } else { h_uninf }) {
                let test_p = if infected {
                    (h.test_rate * h.infected_test_ratio).min(1.0)
                } else {
                    h.test_rate
                };
                let codes = non_icli_codes(&mut rng, h.clear_cause_share);
                admissions.push(self.admission(&mut rng, &id, week_start, w, infected, codes, test_p, &mut tests));
            }
            let icli_p = if infected { h.icli_rate } else { h.icli_background_rate };
            if rng.random_bool(icli_p) {
                let mut codes = vec![ICLI_CODES[rng.random_range(0..ICLI_CODES.len())].to_owned()];
                extend_routine(&mut rng, &mut codes);
                admissions.push(self.admission(
                    &mut rng,
                    &id,
                    week_start,
                    w,
                    infected,
                    codes,
                    h.icli_test_rate,
                    &mut tests,
                ));
            }
        }
        // two admissions for one person never share a timestamp
        for i in 1..admissions.len() {
            while admissions[..i]
                .iter()
                .any(|a| a.record.admit_time == admissions[i].record.admit_time)
            {
                let t = admissions[i].record.admit_time + Duration::seconds(1);
                set_admit_time(&mut admissions[i], t);
            }
        }
        GeneratedPerson {
            record,
            infected: infected_mask,
            tests,
            admissions,
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn admission(
        &self,
        rng: &mut ChaCha8Rng,
        id: &PersonId,
        week_start: NaiveDate,
        week: usize,
        infected: bool,
        codes: Vec<String>,
        test_p: f64,
        tests: &mut Vec<TestRecord>,
    ) -> GeneratedAdmission {
        let h = self.cfg.hospital.as_ref().expect("hospital scenario");
        let date = week_start + Duration::days(rng.random_range(0..7));
        let secs = rng.random_range(0..86_400u32);
        let admit_time = NaiveDateTime::new(
            date,
            NaiveTime::from_num_seconds_from_midnight_opt(secs, 0).expect("valid time"),
        );
        let stay = Duration::hours(rng.random_range(12..240));
        let duplicated = rng.random_bool(h.duplicate_rate);
        let tie = rng.random_bool(0.5);

        let mut dx: Vec<String> = codes;
        if duplicated {
            dx.push(FILLER_CODES[0].to_owned());
        }
        let record = AdmissionRecord {
            person_id: id.clone(),
            admit_time,
            discharge_time: Some(admit_time + stay),
            diagnoses: diagnoses(&dx),
        };
        let duplicate = duplicated.then(|| {
            let mut alt = dx.clone();
            if tie {
                *alt.last_mut().expect("filler present") = FILLER_CODES[1].to_owned();
            } else {
                alt.pop();
            }
            AdmissionRecord {
                diagnoses: diagnoses(&alt),
                ..record.clone()
            }
        });

        if rng.random_bool(test_p) {
            let offset = rng.random_range(-5..=1);
            let specimen_date = date + Duration::days(offset);
            let result = self.result(rng, infected);
            tests.push(TestRecord {
                person_id: id.clone(),
                specimen_date,
                result,
            });
        }
        GeneratedAdmission {
            record,
            duplicate,
            week,
            infected,
        }
    }
}

fn set_admit_time(a: &mut GeneratedAdmission, t: NaiveDateTime) {
    let stay = a.record.discharge_time.map(|d| d - a.record.admit_time);
    a.record.admit_time = t;
    a.record.discharge_time = stay.map(|s| t + s);
    if let Some(d) = &mut a.duplicate {
        d.admit_time = a.record.admit_time;
        d.discharge_time = a.record.discharge_time;
    }
}

fn non_icli_codes(rng: &mut ChaCha8Rng, clear_share: f64) -> Vec<String> {
    let first = if rng.random_bool(clear_share) {
        CLEAR_CAUSE_CODES[rng.random_range(0..CLEAR_CAUSE_CODES.len())]
    } else {
        ROUTINE_CODES[rng.random_range(0..ROUTINE_CODES.len())]
    };
    let mut codes = vec![first.to_owned()];
    extend_routine(rng, &mut codes);
    codes
}

fn extend_routine(rng: &mut ChaCha8Rng, codes: &mut Vec<String>) {
    for _ in 0..rng.random_range(0..4) {
        let c = ROUTINE_CODES[rng.random_range(0..ROUTINE_CODES.len())];
        if !codes.iter().any(|x| x == c) {
            codes.push(c.to_owned());
        }
    }
}

/// First code is both admitting and primary final.
fn diagnoses(codes: &[String]) -> Vec<crate::domain::DiagnosisEntry> {
    let text = codes
        .iter()
        .enumerate()
        .map(|(i, c)| if i == 0 { format!("{c}:A:P") } else { c.clone() })
        .collect::<Vec<_>>()
        .join(";");
    ingest::parse_dx_codes(&text).expect("generated codes are valid")
}

/// Realized infection shares per week and cohort.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct GroundTruth {
    pub start_date: NaiveDate,
    pub population: u64,
    /// Infected people per week.
    pub infected: Vec<u64>,
    /// Infected and total admissions per week and hospital cohort.
    pub cohorts: BTreeMap<(WeekId, CohortLabel), (u64, u64)>,
}

impl GroundTruth {
    pub fn prevalence(&self, week: WeekId) -> Option<f64> {
        let w = usize::try_from(week.0).ok()?;
        self.infected
            .get(w)
            .map(|k| *k as f64 / self.population as f64)
    }

    pub fn cohort_prevalence(&self, week: WeekId, cohort: CohortLabel) -> Option<f64> {
        if cohort == CohortLabel::Population {
            return self.prevalence(week);
        }
        self.cohorts
            .get(&(week, cohort))
            .map(|(i, n)| *i as f64 / *n as f64)
    }

    /// `(week_id, cohort, true_prevalence)` rows in output order.
    pub fn rows(&self) -> Vec<(WeekId, CohortLabel, f64)> {
        let mut rows: Vec<_> = (0..self.infected.len())
            .map(|w| {
                let week = WeekId(w as i64);
                (week, CohortLabel::Population, self.prevalence(week).unwrap_or(0.0))
            })
            .collect();
        rows.extend(
            self.cohorts
                .iter()
                .map(|((w, c), (i, n))| (*w, *c, *i as f64 / *n as f64)),
        );
        rows.sort_by_key(|a| (a.0, a.1));
        rows
    }

    fn absorb(&mut self, person: &GeneratedPerson, codes: &CodeSetConfig) {
        for (w, k) in self.infected.iter_mut().enumerate() {
            *k += person.infected >> w & 1;
        }
        for a in &person.admissions {
            let labels = classify_admission(&a.record, codes).expect("generated admissions have codes");
            for l in labels {
                let e = self.cohorts.entry((WeekId(a.week as i64), l)).or_default();
                e.0 += a.infected as u64;
                e.1 += 1;
            }
        }
    }
}

/// Generated files held in memory.
#[derive(Debug, Clone)]
pub struct SyntheticData {
    pub persons: Vec<PersonRecord>,
    pub tests: Vec<TestRecord>,
    /// Raw admissions, duplicates included.
    pub admissions: Vec<AdmissionRecord>,
    pub truth: GroundTruth,
    /// Infection bitmask per person index (bit `w` for week `w`).
    pub infected: Vec<u64>,
    pub codes_toml: String,
}

impl SyntheticData {
    pub fn codes(&self) -> CodeSetConfig {
        CodeSetConfig::from_toml(&self.codes_toml).expect("generated code-set config parses")
    }

    /// Deduplicate admissions with `seed` and link everything.
    pub fn store(&self, seed: u64) -> Result<LinkedStore, IngestError> {
        build_store(
            self.persons.iter().cloned(),
            self.tests.iter().cloned(),
            dedup_admissions(self.admissions.clone(), seed),
        )
    }

    /// Keep each person independently with probability `fraction`, together
    /// with their tests and admissions. Population denominators in the code-set
    /// config are recounted; the ground truth stays that of the full population.
    pub fn subsample(&self, fraction: f64, seed: u64) -> SyntheticData {
        let keep = |id: &PersonId| {
            let index: u64 = id.as_str()[1..].parse().expect("generated id");
            person_rng(seed ^ 0x5eed_5eed, index).random_bool(fraction)
        };
        let persons: Vec<PersonRecord> =
            self.persons.iter().filter(|p| keep(&p.person_id)).cloned().collect();
        let mut age_totals = [0u64; 6];
        for p in &persons {
            age_totals[p.age_group.index()] += 1;
        }
        let total = self
            .infected
            .iter()
            .enumerate()
            .filter(|(i, _)| keep(&person_id(*i as u64)))
            .count() as u64;
        let mut counties = BTreeMap::new();
        for p in &persons {
            *counties.entry(p.county.clone().unwrap_or_default()).or_insert(0u64) += 1;
        }
        SyntheticData {
            persons,
            tests: self.tests.iter().filter(|t| keep(&t.person_id)).cloned().collect(),
            admissions: self
                .admissions
                .iter()
                .filter(|a| keep(&a.person_id))
                .cloned()
                .collect(),
            truth: self.truth.clone(),
            infected: self.infected.clone(),
            codes_toml: codes_toml(total, &age_totals, &counties, self.truth.start_date),
        }
    }
}

fn codes_toml(
    total: u64,
    age_totals: &[u64; 6],
    counties: &BTreeMap<String, u64>,
    anchor: NaiveDate,
) -> String {
    let head = DEFAULT_CODES_TOML
        .split(CODES_SECTION_END)
        .next()
        .expect("split yields a head");
    let mut s = head.trim_end().to_owned();
    s.push_str("\n\n[population]\n");
    s.push_str(&format!("total = {total}\n\n[population.age_totals]\n"));
    for (g, n) in AgeGroup::ALL.iter().zip(age_totals) {
        s.push_str(&format!("\"{}\" = {n}\n", g.label()));
    }
    s.push_str("\n[population.county_totals]\n");
    for (c, n) in counties {
        s.push_str(&format!("\"{c}\" = {n}\n"));
    }
    s.push_str(&format!("\n[week_anchor]\ndate = \"{anchor}\"\n"));
    s
}

struct Accumulator {
    truth: GroundTruth,
    age_totals: [u64; 6],
    counties: BTreeMap<String, u64>,
}

impl Accumulator {
    fn new(cfg: &ScenarioConfig) -> Self {
        Accumulator {
            truth: GroundTruth {
                start_date: cfg.start_date,
                population: cfg.population,
                infected: vec![0; cfg.weeks()],
                cohorts: BTreeMap::new(),
            },
            age_totals: [0; 6],
            counties: BTreeMap::new(),
        }
    }

    fn absorb(&mut self, p: &GeneratedPerson, codes: &CodeSetConfig) {
        self.truth.absorb(p, codes);
        if let Some(r) = &p.record {
            self.age_totals[r.age_group.index()] += 1;
            if let Some(c) = &r.county {
                *self.counties.entry(c.clone()).or_insert(0) += 1;
            }
        }
    }

    fn codes_toml(&self) -> String {
        codes_toml(
            self.truth.population,
            &self.age_totals,
            &self.counties,
            self.truth.start_date,
        )
    }
}

/// Generate a scenario in memory.
pub fn generate(cfg: &ScenarioConfig) -> Result<SyntheticData, SimulateError> {
    let plan = Plan::new(cfg)?;
    let codes = CodeSetConfig::default_codes();
    let people: Vec<GeneratedPerson> = (0..cfg.population)
        .into_par_iter()
        .map(|i| plan.person(i))
        .collect();
    let mut acc = Accumulator::new(cfg);
    let mut data = SyntheticData {
        persons: Vec::new(),
        tests: Vec::new(),
        admissions: Vec::new(),
        truth: GroundTruth::default(),
        infected: Vec::with_capacity(people.len()),
        codes_toml: String::new(),
    };
    for p in people {
        acc.absorb(&p, &codes);
        data.infected.push(p.infected);
        data.persons.extend(p.record);
        data.tests.extend(p.tests);
        for a in p.admissions {
            data.admissions.push(a.record);
            data.admissions.extend(a.duplicate);
        }
    }
    data.codes_toml = acc.codes_toml();
    data.truth = acc.truth;
    Ok(data)
}

const CHUNK: u64 = 1 << 16;

fn create(dir: &Path, name: &str) -> Result<csv::Writer<BufWriter<File>>, SimulateError> {
    let path = dir.join(name);
    let f = File::create(&path).map_err(|source| SimulateError::Io {
        path: path.display().to_string(),
        source,
    })?;
    Ok(csv::WriterBuilder::new()
        .has_headers(false)
        .from_writer(BufWriter::with_capacity(1 << 20, f)))
}

fn datetime(t: &NaiveDateTime) -> String {
    t.format("%Y-%m-%dT%H:%M:%S").to_string()
}

fn write_admission<W: Write>(w: &mut csv::Writer<W>, a: &AdmissionRecord) -> Result<(), csv::Error> {
    w.write_record([
        a.person_id.as_str(),
        &datetime(&a.admit_time),
        &a.discharge_time.as_ref().map(datetime).unwrap_or_default(),
        &ingest::format_dx_codes(&a.diagnoses),
    ])
}

/// Generate a scenario straight to `persons.csv`, `tests.csv`,
/// `admissions.csv`, `truth.csv` and `codes.toml` in `dir`, in chunks so
/// large populations never sit in memory at once.
pub fn write_to_dir(cfg: &ScenarioConfig, dir: &Path) -> Result<GroundTruth, SimulateError> {
    let plan = Plan::new(cfg)?;
    let codes = CodeSetConfig::default_codes();
    std::fs::create_dir_all(dir).map_err(|source| SimulateError::Io {
        path: dir.display().to_string(),
        source,
    })?;
    let mut persons = create(dir, "persons.csv")?;
    let mut tests = create(dir, "tests.csv")?;
    let mut admissions = create(dir, "admissions.csv")?;
    persons.write_record(ingest::PERSON_COLUMNS)?;
    tests.write_record(ingest::TEST_COLUMNS)?;
    admissions.write_record(ingest::ADMISSION_COLUMNS)?;

    let mut acc = Accumulator::new(cfg);
    let mut start = 0;
    while start < cfg.population {
        let end = (start + CHUNK).min(cfg.population);
        let chunk: Vec<GeneratedPerson> = (start..end)
            .into_par_iter()
            .map(|i| plan.person(i))
            .collect();
        for p in &chunk {
            acc.absorb(p, &codes);
            if let Some(r) = &p.record {
                persons.write_record([
                    r.person_id.as_str(),
                    r.age_group.label(),
                    r.sex.map_or("", Sex::label),
                    r.county.as_deref().unwrap_or(""),
                ])?;
            }
            for t in &p.tests {
                tests.write_record([
                    t.person_id.as_str(),
                    &t.specimen_date.to_string(),
                    t.result.label(),
                ])?;
            }
            for a in &p.admissions {
                write_admission(&mut admissions, &a.record)?;
                if let Some(d) = &a.duplicate {
                    write_admission(&mut admissions, d)?;
                }
            }
        }
        start = end;
    }
    for w in [&mut persons, &mut tests, &mut admissions] {
        w.flush().map_err(|source| SimulateError::Io {
            path: dir.display().to_string(),
            source,
        })?;
    }

    let mut truth = create(dir, "truth.csv")?;
    truth.write_record(["week_id", "cohort", "true_prevalence"])?;
    for (w, c, p) in acc.truth.rows() {
        truth.write_record([w.to_string(), c.label(), p.to_string()])?;
    }
    truth.flush().map_err(|source| SimulateError::Io {
        path: dir.display().to_string(),
        source,
    })?;
    let toml_path = dir.join("codes.toml");
    std::fs::write(&toml_path, acc.codes_toml()).map_err(|source| SimulateError::Io {
        path: toml_path.display().to_string(),
        source,
    })?;
    Ok(acc.truth)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scenario() -> ScenarioConfig {
        ScenarioConfig::from_toml(
            r#"
            seed = 11
            population = 20000
            prevalence = [0.02, 0.05, 0.03]
            test_rate = 0.05
            rho = 4.0
            retest_rate = 0.1
            [hospital]
            admission_rate = 0.03
            test_rate = 0.2
            infected_test_ratio = 3.0
            icli_rate = 0.1
            duplicate_rate = 0.05
            "#,
        )
        .unwrap()
    }

    #[test]
    fn same_seed_same_data() {
        let a = generate(&scenario()).unwrap();
        let b = generate(&scenario()).unwrap();
        assert_eq!(a.tests, b.tests);
        assert_eq!(a.admissions, b.admissions);
        assert_eq!(a.truth, b.truth);
        let mut other = scenario();
        other.seed = 12;
        assert_ne!(generate(&other).unwrap().tests, a.tests);
    }

    #[test]
    fn truth_is_the_mean_of_indicators() {
        let data = generate(&scenario()).unwrap();
        for w in 0..3 {
            let k = data.infected.iter().filter(|m| *m >> w & 1 == 1).count();
            assert_eq!(
                data.truth.prevalence(WeekId(w)),
                Some(k as f64 / 20000.0)
            );
        }
    }

    #[test]
    fn generated_config_and_files_parse() {
        let data = generate(&scenario()).unwrap();
        let codes = data.codes();
        assert_eq!(codes.population.all_ages(), Some(20000));
        assert_eq!(codes.week_anchor, Some(default_start()));
        let store = data.store(3).unwrap();
        assert!(store.admissions().len() < data.admissions.len());
    }

    #[test]
    fn test_propensity_ratio_tracks_rho() {
        let mut cfg = scenario();
        cfg.population = 200_000;
        cfg.hospital = None;
        cfg.retest_rate = 0.0;
        let data = generate(&cfg).unwrap();
        let (mut tested, mut people) = ([0u64; 2], [0u64; 2]);
        let start = cfg.start_date;
        for mask in &data.infected {
            for w in 0..3 {
                people[(*mask >> w & 1) as usize] += 1;
            }
        }
        for t in &data.tests {
            let i: usize = t.person_id.as_str()[1..].parse().unwrap();
            let w = (t.specimen_date - start).num_days() / 7;
            let c = (data.infected[i] >> w & 1) as usize;
            tested[c] += 1;
        }
        let ratio = (tested[1] as f64 / people[1] as f64) / (tested[0] as f64 / people[0] as f64);
        assert!((ratio - 4.0).abs() < 0.25, "ratio {ratio}");
    }

    #[test]
    fn admission_correlation_matches_phi() {
        let (h, p, phi) = (0.03, 0.02, -0.02);
        let (hi, hu) = admission_probabilities(h, phi, p).unwrap();
        let mean = p * hi + (1.0 - p) * hu;
        assert!((mean - h).abs() < 1e-15);
        let cov = p * hi - p * h;
        let corr = cov / (h * (1.0 - h) * p * (1.0 - p)).sqrt();
        assert!((corr - phi).abs() < 1e-12);
        assert!(admission_probabilities(h, -0.5, p).is_err());
    }

    #[test]
    fn invalid_scenarios_rejected() {
        let base = "seed = 1\npopulation = 10\ntest_rate = 0.1\nrho = 1.0\n";
        assert!(ScenarioConfig::from_toml(&format!("{base}prevalence = [1.5]")).is_err());
        assert!(ScenarioConfig::from_toml(&format!("{base}prevalence = []")).is_err());
        let weeks = vec!["0.1"; 65].join(",");
        assert!(ScenarioConfig::from_toml(&format!("{base}prevalence = [{weeks}]")).is_err());
        assert!(ScenarioConfig::from_toml(
            "seed = 1\npopulation = 10\ntest_rate = 0.1\nrho = 0.0\nprevalence = [0.1]"
        )
        .is_err());
    }

    #[test]
    fn persistent_infection_nests_across_weeks() {
        let mut cfg = scenario();
        cfg.persistent_infection = true;
        cfg.prevalence = vec![0.02, 0.05, 0.03];
        let data = generate(&cfg).unwrap();
        for m in &data.infected {
            if m & 1 == 1 {
                assert_eq!(m & 0b111, 0b111);
            }
            if m >> 2 & 1 == 1 {
                assert!(m >> 1 & 1 == 1);
            }
        }
    }
}
