//! Command-line subcommands: `bounds`, `npv`, `simulate` and `validate`.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};

use clap::{Args, Parser, Subcommand};
use log::{debug, info, warn};
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::bounds::{bound_ladder, Assumption, AssumptionRegime, BoundsError};
use crate::cohort::{
    self, build_cells, CellTable, CodeSetConfig, CohortError, CohortLabel, WeekCalendar, WeekId,
};
use crate::domain::{AgeGroup, AgeWeights, BoundsResult, CellCounts, DomainError, ErrorBand};
use crate::inference::{age_standardize, summarize, InferenceConfig, StandardizedSe, StratifiedBounds};
use crate::ingest::{self, build_store, dedup_admissions, IngestError, LinkedStore};
use crate::retest::{self, FnEstimate, JointProportions, RetestSummary, SymmetryTest};
use crate::simulate::{self, SimulateError};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("internal invariant violated: {0}")]
    Invariant(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Data(_) => 3,
            CliError::Invariant(_) => 4,
        }
    }
}

impl From<IngestError> for CliError {
    fn from(e: IngestError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<CohortError> for CliError {
    fn from(e: CohortError) -> Self {
        match e {
            CohortError::Cell { .. } | CohortError::EmptyDiagnoses => CliError::Data(e.to_string()),
            _ => CliError::Config(e.to_string()),
        }
    }
}

impl From<SimulateError> for CliError {
    fn from(e: SimulateError) -> Self {
        match e {
            SimulateError::InvalidScenario(_) | SimulateError::Toml(_) => {
                CliError::Config(e.to_string())
            }
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<DomainError> for CliError {
    fn from(e: DomainError) -> Self {
        CliError::Config(e.to_string())
    }
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Data(format!("{}: {e}", path.display()))
}

#[derive(Debug, Parser)]
#[command(name = "prevbounds", version, about = "Prevalence bounds from linked test and admission records")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Weekly bounds for the population and every admission cohort.
    Bounds(BoundsArgs),
    /// False-negative rate and symmetry diagnostic from test-retest pairs.
    Npv(NpvArgs),
    /// Generate a synthetic scenario with ground truth.
    Simulate(SimulateArgs),
    /// Prior-testing and community-testing comparisons.
    Validate(ValidateArgs),
}

#[derive(Debug, Args)]
pub struct InputArgs {
    #[arg(long)]
    pub persons: PathBuf,
    #[arg(long)]
    pub tests: PathBuf,
    #[arg(long)]
    pub admissions: PathBuf,
    /// Code-set config; the shipped defaults when omitted.
    #[arg(long)]
    pub codes: Option<PathBuf>,
    /// Seed for breaking ties among duplicate admission records.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct BoundsArgs {
    #[command(flatten)]
    pub input: InputArgs,
    #[arg(long, value_delimiter = ',', default_value = "worst,monotone,hosp-monotone,hosp-independent")]
    pub regimes: Vec<String>,
    /// Lower error-band limit; setting either limit adds `+err` rows.
    #[arg(long)]
    pub lambda_l: Option<f64>,
    #[arg(long)]
    pub lambda_u: Option<f64>,
    #[arg(long)]
    pub out: PathBuf,
    /// Standardize to the configured age distribution.
    #[arg(long)]
    pub age_weights: bool,
    /// Combine stratum standard errors as the variance of a weighted mean.
    #[arg(long)]
    pub weighted_mean_se: bool,
    /// Also write `bounds.json`.
    #[arg(long)]
    pub json: bool,
}

#[derive(Debug, Args)]
pub struct NpvArgs {
    #[arg(long)]
    pub tests: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[arg(long)]
    pub scenario: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ValidateArgs {
    #[command(flatten)]
    pub input: InputArgs,
    #[arg(long)]
    pub out: PathBuf,
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Bounds(a) => cmd_bounds(&a),
        Command::Npv(a) => cmd_npv(&a),
        Command::Simulate(a) => cmd_simulate(&a),
        Command::Validate(a) => cmd_validate(&a),
    }
}

fn require_file(path: &Path) -> Result<(), CliError> {
    if path.is_file() {
        Ok(())
    } else {
        Err(CliError::Data(format!("input file not found: {}", path.display())))
    }
}

fn parse_file<T, F>(path: &Path, parse: F) -> Result<Vec<T>, CliError>
where
    F: FnOnce(std::io::BufReader<File>) -> Result<Vec<T>, IngestError>,
{
    let reader = ingest::open(path).map_err(|e| io_err(path, e))?;
    parse(reader).map_err(|e| io_err(path, e))
}

/// Parse the three inputs concurrently, deduplicate admissions with `seed`
/// and link them.
pub fn load_store(
    persons: &Path,
    tests: &Path,
    admissions: &Path,
    seed: u64,
) -> Result<LinkedStore, CliError> {
    for p in [persons, tests, admissions] {
        require_file(p)?;
    }
    let (p, t, a) = std::thread::scope(|s| {
        let p = s.spawn(|| parse_file(persons, ingest::parse_persons));
        let t = s.spawn(|| parse_file(tests, ingest::parse_tests));
        let a = s.spawn(|| parse_file(admissions, ingest::parse_admissions));
        (
            p.join().expect("persons parser panicked"),
            t.join().expect("tests parser panicked"),
            a.join().expect("admissions parser panicked"),
        )
    });
    let raw = a?;
    let raw_len = raw.len();
    let deduped = dedup_admissions(raw, seed);
    let store = build_store(p?, t?, deduped)?;
    let d = store.diagnostics();
    info!(
        "linked {} persons, {} test rows ({} person-days), {} admissions ({} duplicates dropped)",
        d.persons,
        d.test_rows,
        d.test_days,
        d.admissions,
        raw_len - d.admissions
    );
    if d.tests_without_demographics + d.admissions_without_demographics > 0 {
        info!(
            "{} test rows and {} admissions have no demographics; counted in all-ages cells only",
            d.tests_without_demographics, d.admissions_without_demographics
        );
    }
    Ok(store)
}

pub fn load_codes(path: Option<&Path>) -> Result<CodeSetConfig, CliError> {
    match path {
        Some(p) => {
            require_file(p).map_err(|e| CliError::Config(e.to_string()))?;
            Ok(CodeSetConfig::load(p)?)
        }
        None => Ok(CodeSetConfig::default_codes()),
    }
}

pub fn calendar_for(store: &LinkedStore, codes: &CodeSetConfig) -> WeekCalendar {
    let start = store
        .date_range()
        .map_or(codes.prior_testing_start, |(lo, _)| lo);
    WeekCalendar::for_config(codes, start)
}

/// One line of `bounds.csv`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BoundsRow {
    pub week_id: i64,
    pub cohort: String,
    pub regime: String,
    pub lower: f64,
    pub upper: f64,
    pub se_lower: f64,
    pub se_upper: f64,
    pub ci_lower: f64,
    pub ci_upper: f64,
    pub n_pop: u64,
    pub n_tested: u64,
    pub n_positive: u64,
}

/// What to compute for every cell.
#[derive(Debug, Clone)]
pub struct BoundsPlan {
    pub regimes: Vec<AssumptionRegime>,
    pub inference: InferenceConfig,
    /// Standardize over age strata with these weights; crude all-ages cells otherwise.
    pub age_weights: Option<AgeWeights>,
}

impl BoundsPlan {
    /// Each assumption, then each assumption with the band when one is given.
    pub fn new(assumptions: &[Assumption], band: Option<ErrorBand>) -> Self {
        let mut regimes: Vec<AssumptionRegime> =
            assumptions.iter().map(|a| AssumptionRegime::new(*a)).collect();
        if let Some(b) = band {
            regimes.extend(assumptions.iter().map(|a| AssumptionRegime::with_band(*a, b)));
        }
        BoundsPlan {
            regimes,
            inference: InferenceConfig::default(),
            age_weights: None,
        }
    }
}

/// Bounds for one cohort and stratum. Worst-case and test-monotone regimes
/// bound the cohort's own prevalence; hospital regimes bound population
/// prevalence using the cohort as the hospital sample.
pub fn cell_bounds(
    table: &CellTable,
    week: WeekId,
    cohort: CohortLabel,
    regime: &AssumptionRegime,
    age: Option<AgeGroup>,
    cfg: &InferenceConfig,
) -> Result<Option<BoundsResult>, BoundsError> {
    let Some(pop) = table.population_cell(week, age) else {
        return Ok(None);
    };
    let hosp = table.hospital_cell(week, cohort, age);
    let (subject, other) = match (cohort, regime.assumption.needs_hospital()) {
        (CohortLabel::Population, true) => return Ok(None),
        (CohortLabel::Population, false) => (pop, None),
        (_, false) => (hosp, None),
        (_, true) => (pop, Some(hosp)),
    };
    match bound_ladder(&subject, other.as_ref(), regime) {
        Ok(iv) => Ok(summarize(*regime, &iv, &subject, other.as_ref(), cfg).ok()),
        Err(e @ BoundsError::Refuted { .. }) => Err(e),
        Err(_) => Ok(None),
    }
}

fn cohort_cell(table: &CellTable, week: WeekId, cohort: CohortLabel) -> CellCounts {
    match cohort {
        CohortLabel::Population => table.population_cell(week, None).unwrap_or_default(),
        c => table.hospital_cell(week, c, None),
    }
}

/// Every output row, ordered by week, cohort and regime.
pub fn bounds_rows(table: &CellTable, plan: &BoundsPlan) -> Result<Vec<BoundsRow>, CliError> {
    let mut cohorts = vec![CohortLabel::Population];
    cohorts.extend(CohortLabel::hospital_cohorts());
    let refuted = AtomicUsize::new(0);
    let partial = AtomicUsize::new(0);
    let per_week: Vec<Result<Vec<BoundsRow>, CliError>> = table
        .weeks
        .par_iter()
        .map(|&week| {
            let mut rows = Vec::new();
            for &cohort in &cohorts {
                let counts = cohort_cell(table, week, cohort);
                if counts.is_empty() {
                    continue;
                }
                for regime in &plan.regimes {
                    let result = match &plan.age_weights {
                        None => match cell_bounds(table, week, cohort, regime, None, &plan.inference) {
                            Ok(r) => r,
                            Err(e) => {
                                debug!("week {week} {cohort} {}: {e}", regime.label());
                                refuted.fetch_add(1, Ordering::Relaxed);
                                None
                            }
                        },
                        Some(weights) => {
                            let strata = AgeGroup::ALL
                                .into_iter()
                                .map(|g| {
                                    let r = cell_bounds(table, week, cohort, regime, Some(g), &plan.inference);
                                    (g, r.ok().flatten())
                                })
                                .collect();
                            let strat = StratifiedBounds {
                                strata,
                                age_weights: weights.clone(),
                            };
                            age_standardize(&strat, &plan.inference).ok().map(|s| {
                                if !s.dropped.is_empty() {
                                    partial.fetch_add(1, Ordering::Relaxed);
                                }
                                s.result
                            })
                        }
                    };
                    let Some(r) = result else { continue };
                    if !r.is_consistent() {
                        return Err(CliError::Invariant(format!(
                            "week {week} {cohort} {}: {r:?}",
                            regime.label()
                        )));
                    }
                    rows.push(BoundsRow {
                        week_id: week.0,
                        cohort: cohort.label(),
                        regime: regime.label(),
                        lower: r.lower,
                        upper: r.upper,
                        se_lower: r.se_lower,
                        se_upper: r.se_upper,
                        ci_lower: r.ci_lower,
                        ci_upper: r.ci_upper,
                        n_pop: counts.n_pop,
                        n_tested: counts.n_tested,
                        n_positive: counts.n_positive,
                    });
                }
            }
            Ok(rows)
        })
        .collect();
    let refuted = refuted.into_inner();
    if refuted > 0 {
        warn!("{refuted} cells dropped because the data refute their assumptions");
    }
    let partial = partial.into_inner();
    if partial > 0 {
        warn!("{partial} standardized cells had empty age strata; weights renormalized over the rest");
    }
    let mut out = Vec::new();
    for r in per_week {
        out.extend(r?);
    }
    Ok(out)
}

fn create_out_dir(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<(), CliError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| io_err(path, e))?;
    for r in rows {
        w.serialize(r).map_err(|e| io_err(path, e))?;
    }
    w.flush().map_err(|e| io_err(path, e))
}

#[derive(Serialize)]
struct JsonRow<'a> {
    week_start: String,
    #[serde(flatten)]
    row: &'a BoundsRow,
}

fn parse_assumptions(names: &[String]) -> Result<Vec<Assumption>, CliError> {
    if names.is_empty() {
        return Err(CliError::Config("no regimes requested".into()));
    }
    names
        .iter()
        .map(|n| {
            n.trim()
                .parse::<Assumption>()
                .map_err(|e| CliError::Config(e.to_string()))
        })
        .collect()
}

pub fn cmd_bounds(args: &BoundsArgs) -> Result<(), CliError> {
    let assumptions = parse_assumptions(&args.regimes)?;
    let band = match (args.lambda_l, args.lambda_u) {
        (None, None) => None,
        (l, u) => Some(ErrorBand::new(l.unwrap_or(0.0), u.unwrap_or(0.0))?),
    };
    let codes = load_codes(args.input.codes.as_deref())?;
    let mut plan = BoundsPlan::new(&assumptions, band);
    if args.weighted_mean_se {
        plan.inference.standardized_se = StandardizedSe::WeightedMean;
    }
    if args.age_weights {
        plan.age_weights = Some(AgeWeights::from_totals(&codes.population.age_totals)?);
    }
    let i = &args.input;
    let store = load_store(&i.persons, &i.tests, &i.admissions, i.seed)?;
    let calendar = calendar_for(&store, &codes);
    let table = build_cells(&store, &codes, &calendar)?;
    if table.undiagnosed_admissions > 0 {
        info!(
            "{} admissions without diagnoses left out of hospital cohorts",
            table.undiagnosed_admissions
        );
    }
    let rows = bounds_rows(&table, &plan)?;

    create_out_dir(&args.out)?;
    write_csv(&args.out.join("bounds.csv"), &rows)?;
    if args.json {
        let path = args.out.join("bounds.json");
        let json: Vec<JsonRow> = rows
            .iter()
            .map(|row| JsonRow {
                week_start: calendar.start(WeekId(row.week_id)).to_string(),
                row,
            })
            .collect();
        let f = File::create(&path).map_err(|e| io_err(&path, e))?;
        let mut w = BufWriter::new(f);
        serde_json::to_writer_pretty(&mut w, &json).map_err(|e| io_err(&path, e))?;
        w.write_all(b"\n").map_err(|e| io_err(&path, e))?;
    }
    info!("wrote {} rows to {}", rows.len(), args.out.display());
    Ok(())
}

/// Contents of `npv.toml`.
#[derive(Debug, Clone, Serialize)]
pub struct NpvReport {
    pub events: RetestSummary,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub proportions: Option<JointProportions>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub estimate: Option<FnEstimate>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub symmetry: Option<SymmetryTest>,
}

pub fn npv_report(store: &LinkedStore) -> NpvReport {
    let events = retest::extract_retest_events(store);
    let summary = RetestSummary::from_events(&events);
    let proportions = summary.proportions();
    let estimate = proportions.and_then(|p| match retest::estimate_fn_bound(&p) {
        Ok(e) => Some(e),
        Err(e) => {
            warn!("{e}");
            None
        }
    });
    let symmetry = match retest::symmetry_diagnostic(&summary) {
        Ok(s) => Some(s),
        Err(e) => {
            warn!("{e}");
            None
        }
    };
    NpvReport {
        events: summary,
        proportions,
        estimate,
        symmetry,
    }
}

pub fn cmd_npv(args: &NpvArgs) -> Result<(), CliError> {
    require_file(&args.tests)?;
    let tests = parse_file(&args.tests, ingest::parse_tests)?;
    let store = build_store(Vec::new(), tests, Vec::new())?;
    let report = npv_report(&store);
    create_out_dir(&args.out)?;
    let path = args.out.join("npv.toml");
    let text = toml::to_string(&report).map_err(|e| CliError::Invariant(e.to_string()))?;
    std::fs::write(&path, text).map_err(|e| io_err(&path, e))?;
    info!(
        "{} retest events written to {}",
        report.events.n_events(),
        path.display()
    );
    Ok(())
}

pub fn cmd_simulate(args: &SimulateArgs) -> Result<(), CliError> {
    require_file(&args.scenario).map_err(|e| CliError::Config(e.to_string()))?;
    let scenario = simulate::ScenarioConfig::load(&args.scenario)?;
    let truth = simulate::write_to_dir(&scenario, &args.out)?;
    info!(
        "generated {} people over {} weeks into {}",
        truth.population,
        truth.infected.len(),
        args.out.display()
    );
    Ok(())
}

#[derive(Serialize)]
struct PriorRow {
    week_id: i64,
    week_start: String,
    cohort: String,
    n: u64,
    prior_test_rate: f64,
}

#[derive(Serialize)]
struct CountyRow<'a> {
    county: &'a str,
    test_rate: f64,
}

pub fn cmd_validate(args: &ValidateArgs) -> Result<(), CliError> {
    let codes = load_codes(args.input.codes.as_deref())?;
    let i = &args.input;
    let store = load_store(&i.persons, &i.tests, &i.admissions, i.seed)?;
    let calendar = calendar_for(&store, &codes);
    let prior: Vec<PriorRow> = cohort::prior_test_rates(&store, &codes, &calendar)?
        .into_iter()
        .map(|r| PriorRow {
            week_id: r.week.0,
            week_start: calendar.start(r.week).to_string(),
            cohort: r.cohort.label(),
            n: r.n,
            prior_test_rate: r.rate,
        })
        .collect();
    let (counties, community) = cohort::community_test_rates(&store, &codes)?;
    create_out_dir(&args.out)?;
    write_csv(&args.out.join("prior_test_rates.csv"), &prior)?;
    write_csv(&args.out.join("community_test_rates.csv"), &community)?;
    let county_rows: Vec<CountyRow> = counties
        .iter()
        .map(|(c, r)| CountyRow {
            county: c,
            test_rate: *r,
        })
        .collect();
    write_csv(&args.out.join("county_test_rates.csv"), &county_rows)?;
    Ok(())
}
