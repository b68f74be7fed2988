//! Acceptance criteria, one PASS/FAIL line each. Pass criterion names as
//! arguments to run a subset, e.g. `cargo test --test acceptance -- retest`.

mod common;

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tempfile::TempDir;

use common::{compare_with_oracle, q, regime, valid_scenario, Comparison, ALL_ASSUMPTIONS};
use prevbounds::bounds::{bound_ladder, Assumption, AssumptionRegime, BoundsError};
use prevbounds::cli::{bounds_rows, calendar_for, cell_bounds, load_codes, load_store, BoundsPlan, BoundsRow};
use prevbounds::cohort::{build_cells, strata, CellTable, CohortLabel, WeekCalendar, WeekId};
use prevbounds::domain::{AgeGroup, AgeWeights, CellCounts, ErrorBand, Rational};
use prevbounds::inference::{
    age_standardize, proportion_se, summarize, InferenceConfig, StandardizedSe, StratifiedBounds,
};
use prevbounds::retest::{estimate_fn_bound, extract_retest_events, symmetry_diagnostic, RetestSummary, Verdict};
use prevbounds::simulate::oracle::SmallInstance;
use prevbounds::simulate::{generate, write_to_dir, ScenarioConfig, SyntheticData};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn table_for(data: &SyntheticData) -> CellTable {
    let store = data.store(0).unwrap();
    let cal = WeekCalendar::new(data.truth.start_date);
    build_cells(&store, &data.codes(), &cal).unwrap()
}

fn weeks(n: usize) -> impl Iterator<Item = WeekId> {
    (0..n as i64).map(WeekId)
}

// ---------------------------------------------------------------------------

fn oracle_equivalence() -> Outcome {
    let started = Instant::now();
    let bands = [None, Some((q(0, 1), q(1, 200))), Some((q(1, 10), q(2, 5)))];
    let mut rng = ChaCha8Rng::seed_from_u64(20200612);
    let (mut instances, mut complete, mut compared, mut skipped) = (0, 0, 0, 0);
    let mut mismatches = Vec::new();
    // draw until 1000 instances have every regime and band defined
    while complete < 1000 {
        let inst = SmallInstance::random(&mut rng, 12);
        instances += 1;
        let mut all_defined = true;
        for a in ALL_ASSUMPTIONS {
            for band in bands {
                match compare_with_oracle(&inst, &regime(a, band)) {
                    Comparison::Equal => compared += 1,
                    Comparison::Skipped => {
                        skipped += 1;
                        all_defined = false;
                    }
                    Comparison::Mismatch(m) => mismatches.push(m),
                }
            }
        }
        complete += all_defined as usize;
    }
    let elapsed = started.elapsed();
    outcome(
        mismatches.is_empty() && elapsed < Duration::from_secs(60),
        format!(
            "{instances} instances ({complete} with all 4 regimes x 3 bands defined), {compared} comparisons exact, \
             {skipped} undefined (empty or untested cell), {} mismatches{}, {:.1}s",
            mismatches.len(),
            mismatches.first().map(|m| format!(" e.g. {m}")).unwrap_or_default(),
            elapsed.as_secs_f64()
        ),
    )
}

// ---------------------------------------------------------------------------

/// A statewide-sized run, shared by the nesting and error-band criteria.
struct StateRun {
    table: CellTable,
    rows: Vec<BoundsRow>,
}

fn state_scenario() -> ScenarioConfig {
    ScenarioConfig::from_toml(
        r#"
seed = 2020
population = 6730000
start_date = "2020-06-12"
prevalence = [0.012, 0.015, 0.02, 0.017]
test_rate = 0.01
rho = 5.0
false_negative_rate = 0.05
inconclusive_rate = 0.01
retest_rate = 0.05
missing_demographics_rate = 0.02

[hospital]
admission_rate = 0.002
phi = 0.0
test_rate = 0.15
infected_test_ratio = 4.0
icli_rate = 0.004
icli_background_rate = 0.0002
duplicate_rate = 0.02
"#,
    )
    .unwrap()
}

fn state_run() -> &'static StateRun {
    static RUN: OnceLock<StateRun> = OnceLock::new();
    RUN.get_or_init(|| {
        let dir = TempDir::new().unwrap();
        write_to_dir(&state_scenario(), dir.path()).unwrap();
        let d = dir.path();
        let store = load_store(&d.join("persons.csv"), &d.join("tests.csv"), &d.join("admissions.csv"), 0).unwrap();
        let codes = load_codes(Some(&d.join("codes.toml"))).unwrap();
        let table = build_cells(&store, &codes, &calendar_for(&store, &codes)).unwrap();
        drop(store);
        let band = ErrorBand::new(0.0, 0.005).unwrap();
        let rows = bounds_rows(&table, &BoundsPlan::new(&ALL_ASSUMPTIONS, Some(band))).unwrap();
        StateRun { table, rows }
    })
}

fn exact(cell: &CellCounts, other: Option<&CellCounts>, a: Assumption) -> Result<(Rational, Rational), BoundsError> {
    bound_ladder::<Rational>(cell, other, &AssumptionRegime::new(a)).map(|iv| iv.values())
}

fn nesting() -> Outcome {
    let run = state_run();
    let t = &run.table;
    let (mut cells, mut pairs, mut refuted) = (0usize, 0usize, 0usize);
    let mut violations = Vec::new();
    for &week in &t.weeks {
        for age in strata() {
            let Some(pop) = t.population_cell(week, age) else { continue };
            let mut singles = vec![pop];
            let hosp: Vec<_> = CohortLabel::hospital_cohorts()
                .into_iter()
                .map(|c| (c, t.hospital_cell(week, c, age)))
                .collect();
            singles.extend(hosp.iter().map(|(_, h)| *h));
            for cell in &singles {
                let (Ok(w), Ok(m)) = (exact(cell, None, Assumption::WorstCase), exact(cell, None, Assumption::TestMonotone)) else {
                    continue;
                };
                cells += 1;
                if !(w.0 <= m.0 && m.1 <= w.1) {
                    violations.push(format!("{week} {age:?} {cell:?}: monotone {m:?} outside worst {w:?}"));
                }
            }
            let Ok(m) = exact(&pop, None, Assumption::TestMonotone) else { continue };
            for (cohort, h) in &hosp {
                let mh = exact(&pop, Some(h), Assumption::TestMonotonePlusHospMonotone);
                let ind = exact(&pop, Some(h), Assumption::TestMonotonePlusHospIndependent);
                match (&mh, &ind) {
                    (Ok(mh), Ok(ind)) => {
                        pairs += 1;
                        if !(ind.0 >= m.0 && ind.1 == mh.1 && mh.1 <= m.1) {
                            violations.push(format!("{week} {cohort} {age:?}: m {m:?} mh {mh:?} ind {ind:?}"));
                        }
                    }
                    (Err(BoundsError::Refuted { .. }), Ok(_)) => {
                        violations.push(format!("{week} {cohort} {age:?}: independence holds where monotone selection is refuted"));
                    }
                    (_, Err(BoundsError::Refuted { .. })) => refuted += 1,
                    _ => {}
                }
            }
        }
    }
    outcome(
        violations.is_empty() && cells > 0 && pairs > 0,
        format!(
            "{cells} cells and {pairs} population/cohort pairs checked exactly ({refuted} pairs refuted, skipped); {} violations{}",
            violations.len(),
            violations.first().map(|v| format!(" e.g. {v}")).unwrap_or_default()
        ),
    )
}

// ---------------------------------------------------------------------------

const COVERAGE_SEEDS: u64 = 200;
const COVERAGE_WEEKS: usize = 4;

fn coverage() -> Outcome {
    let started = Instant::now();
    let r = AssumptionRegime::new(Assumption::TestMonotonePlusHospIndependent);
    let cfg = InferenceConfig::default();
    let (mut bounds_hit, mut ci_hit) = (0u64, 0u64);
    let mut misses = Vec::new();
    for seed in 0..COVERAGE_SEEDS {
        let data = generate(&valid_scenario(seed, 100_000, COVERAGE_WEEKS, 0.02)).unwrap();
        let table = table_for(&data);
        let inside = weeks(COVERAGE_WEEKS).all(|w| {
            let truth = data.truth.prevalence(w).unwrap();
            match cell_bounds(&table, w, CohortLabel::NonIcli, &r, None, &cfg) {
                Ok(Some(b)) => b.lower <= truth && truth <= b.upper,
                other => {
                    misses.push(format!("seed {seed} {w}: {other:?}"));
                    false
                }
            }
        });
        bounds_hit += inside as u64;

        let sub = data.subsample(0.2, seed);
        let sub_table = table_for(&sub);
        let covered = weeks(COVERAGE_WEEKS).all(|w| {
            let truth = data.truth.prevalence(w).unwrap();
            matches!(
                cell_bounds(&sub_table, w, CohortLabel::NonIcli, &r, None, &cfg),
                Ok(Some(b)) if b.ci_lower <= truth && truth <= b.ci_upper
            )
        });
        ci_hit += covered as u64;
    }
    let elapsed = started.elapsed();
    let bounds_rate = bounds_hit as f64 / COVERAGE_SEEDS as f64;
    let ci_rate = ci_hit as f64 / COVERAGE_SEEDS as f64;
    outcome(
        bounds_rate == 1.0 && ci_rate >= 0.94 && elapsed < Duration::from_secs(600),
        format!(
            "truth inside bounds in {bounds_hit}/{COVERAGE_SEEDS} runs, inside 20%-subsample region CI in {ci_hit}/{COVERAGE_SEEDS} \
             ({:.1}s){}",
            elapsed.as_secs_f64(),
            misses.first().map(|m| format!("; first miss {m}")).unwrap_or_default()
        ),
    )
}

// ---------------------------------------------------------------------------

fn violation_detection() -> Outcome {
    let weeks_n = 4;
    let worried = ScenarioConfig::from_toml(
        "seed = 11\npopulation = 100000\nprevalence = [0.02, 0.02, 0.02, 0.02]\ntest_rate = 0.02\nrho = 0.5\n",
    )
    .unwrap();
    let data = generate(&worried).unwrap();
    let table = table_for(&data);
    let mut detected_m = Vec::new();
    for w in weeks(weeks_n) {
        let truth = data.truth.prevalence(w).unwrap();
        let pop = table.population_cell(w, None).unwrap();
        let (_, u_m) = exact(&pop, None, Assumption::TestMonotone).unwrap();
        if truth > prevbounds::domain::Scalar::to_f64(u_m) {
            detected_m.push(w.0);
        }
    }

    let mut negative = valid_scenario(13, 100_000, weeks_n, 0.02);
    negative.hospital.as_mut().unwrap().phi = -0.022;
    let data = generate(&negative).unwrap();
    let table = table_for(&data);
    let mut detected_mh = Vec::new();
    for w in weeks(weeks_n) {
        let truth = data.truth.prevalence(w).unwrap();
        let pop = table.population_cell(w, None).unwrap();
        let hosp = table.hospital_cell(w, CohortLabel::NonIcli, None);
        // a refuted regime still carries its upper bound
        let u_mh = match exact(&pop, Some(&hosp), Assumption::TestMonotonePlusHospMonotone) {
            Ok((_, u)) => prevbounds::domain::Scalar::to_f64(u),
            Err(BoundsError::Refuted { upper, .. }) => upper,
            Err(e) => return outcome(false, format!("negative selection week {w}: {e}")),
        };
        if truth > u_mh {
            detected_mh.push(w.0);
        }
    }
    outcome(
        !detected_m.is_empty() && !detected_mh.is_empty(),
        format!(
            "worried well: truth above U_m in weeks {detected_m:?}; negative hospital selection: truth above U_m,h in weeks {detected_mh:?}"
        ),
    )
}

// ---------------------------------------------------------------------------

fn error_adjustment() -> Outcome {
    let cell = CellCounts::new(100, 20, 5).unwrap();
    let band = ErrorBand::new(q(0, 1), q(2, 5)).unwrap();
    let wide = bound_ladder::<Rational>(&cell, None, &AssumptionRegime::with_band(Assumption::WorstCase, band))
        .unwrap()
        .values();
    let exact_ok = wide.1 == q(91, 100);

    let run = state_run();
    let base: BTreeMap<(i64, &str, &str), &BoundsRow> = run
        .rows
        .iter()
        .filter(|r| !r.regime.ends_with("+err"))
        .map(|r| ((r.week_id, r.cohort.as_str(), r.regime.as_str()), r))
        .collect();
    let mut worst_change: BTreeMap<String, f64> = BTreeMap::new();
    for r in run.rows.iter().filter(|r| r.regime.ends_with("+err")) {
        let plain = r.regime.trim_end_matches("+err");
        let Some(b) = base.get(&(r.week_id, r.cohort.as_str(), plain)) else { continue };
        let change = (r.lower - b.lower).abs().max((r.upper - b.upper).abs());
        let e = worst_change.entry(plain.to_owned()).or_insert(0.0);
        *e = e.max(change);
    }
    let max = worst_change.values().copied().fold(0.0, f64::max);
    let by_regime = worst_change
        .iter()
        .map(|(k, v)| format!("{k} {v:.5}"))
        .collect::<Vec<_>>()
        .join(", ");
    outcome(
        exact_ok && max < 0.001 && !worst_change.is_empty(),
        format!(
            "worst case (100,20,5) with lambda_u 0.4 gives upper {}/{}; largest change from the (0, 0.005) band \
             on the statewide run is {max:.5} (by regime: {by_regime}); threshold 0.001",
            wide.1.numer(),
            wide.1.denom()
        ),
    )
}

// ---------------------------------------------------------------------------

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-12
}

fn se_ci_arithmetic() -> Outcome {
    let cell = CellCounts::new(100, 20, 5).unwrap();
    let cfg = InferenceConfig::default();
    let mut failures = Vec::new();
    let mut check = |what: &str, got: f64, want: f64| {
        if !close(got, want) {
            failures.push(format!("{what}: {got} vs {want}"));
        }
    };

    // hand-derived: sqrt(p(1-p)/n) with the bound's own denominator
    let se_l = proportion_se(&cell, 0.05, prevbounds::bounds::DenominatorRole::Population).unwrap();
    check("se of 0.05 over 100", se_l, 0.021794494717703367);

    let wc = AssumptionRegime::new(Assumption::WorstCase);
    let iv = bound_ladder::<f64>(&cell, None, &wc).unwrap();
    let s = summarize(wc, &iv, &cell, None, &cfg).unwrap();
    check("worst se_lower", s.se_lower, 0.021794494717703367);
    check("worst se_upper", s.se_upper, 0.035707142142714254);
    check("worst ci_lower", s.ci_lower, 0.05 - 1.96 * 0.021794494717703367);
    check("worst ci_upper", s.ci_upper, 0.85 + 1.96 * 0.035707142142714254);

    let tm = AssumptionRegime::new(Assumption::TestMonotone);
    let iv = bound_ladder::<f64>(&cell, None, &tm).unwrap();
    let s = summarize(tm, &iv, &cell, None, &cfg).unwrap();
    check("monotone se_upper", s.se_upper, 0.09682458365518543);
    check("monotone ci_lower", s.ci_lower, 0.007282790353301406);
    check("monotone ci_upper", s.ci_upper, 0.4397761839641634);

    // two strata with weights 0.25 / 0.75
    let a = CellCounts::new(100, 20, 5).unwrap();
    let b = CellCounts::new(400, 40, 4).unwrap();
    let strata: Vec<_> = [(AgeGroup::Age0To17, a), (AgeGroup::Age18To30, b)]
        .into_iter()
        .map(|(g, c)| {
            let iv = bound_ladder::<f64>(&c, None, &tm).unwrap();
            (g, Some(summarize(tm, &iv, &c, None, &cfg).unwrap()))
        })
        .collect();
    let mut weights = BTreeMap::new();
    weights.insert(AgeGroup::Age0To17, 0.25);
    weights.insert(AgeGroup::Age18To30, 0.75);
    let sb = StratifiedBounds {
        strata,
        age_weights: AgeWeights::new(weights).unwrap(),
    };
    let published = age_standardize(&sb, &cfg).unwrap().result;
    let var_a: f64 = 0.25 * 0.75 / 20.0;
    let var_b: f64 = 0.1 * 0.9 / 40.0;
    check("standardized upper", published.upper, 0.25 * 0.25 + 0.75 * 0.1);
    check("published se_upper", published.se_upper, (0.25 * var_a + 0.75 * var_b).sqrt());
    let alt_cfg = InferenceConfig {
        standardized_se: StandardizedSe::WeightedMean,
        ..cfg
    };
    let alt = age_standardize(&sb, &alt_cfg).unwrap().result;
    check("weighted-mean se_upper", alt.se_upper, (0.0625 * var_a + 0.5625 * var_b).sqrt());

    outcome(
        failures.is_empty(),
        if failures.is_empty() {
            "standard errors, region CI and both standardized SE formulas match hand values to 1e-12".to_owned()
        } else {
            failures.join("; ")
        },
    )
}

// ---------------------------------------------------------------------------

fn retest_scenario(seed: u64, population: u64, prevalence: f64, retest: f64, factor: f64) -> ScenarioConfig {
    ScenarioConfig::from_toml(&format!(
        "seed = {seed}\npopulation = {population}\nprevalence = [{prevalence}]\ntest_rate = 1.0\nrho = 1.0\n\
         false_negative_rate = 0.05\nretest_rate = {retest}\nselective_retest_factor = {factor}\n"
    ))
    .unwrap()
}

fn person_index(id: &str) -> usize {
    id[1..].parse().unwrap()
}

fn retest_estimator() -> Outcome {
    let data = generate(&retest_scenario(5, 1_000_000, 0.12, 1.0, 1.0)).unwrap();
    let store = prevbounds::ingest::build_store(Vec::new(), data.tests.iter().cloned(), Vec::new()).unwrap();
    let events = extract_retest_events(&store);
    let summary = RetestSummary::from_events(&events);
    let est = estimate_fn_bound(&summary.proportions().unwrap()).unwrap();
    // realized false omission among first tests in the retest sample
    let (mut neg, mut neg_infected) = (0u64, 0u64);
    for e in &events {
        if !e.first_positive {
            neg += 1;
            neg_infected += data.infected[person_index(e.person_id.as_str())] & 1;
        }
    }
    let realized_fo = neg_infected as f64 / neg as f64;
    let fn_ok = (est.fn_rate - 0.05).abs() <= 0.005;
    let npv_ok = (est.one_minus_npv - realized_fo).abs() <= 0.003;
    drop((data, store, events));

    let mut flagged = 0;
    for seed in 0..100 {
        let data = generate(&retest_scenario(1000 + seed, 60_000, 0.1, 0.5, 2.0)).unwrap();
        let store = prevbounds::ingest::build_store(Vec::new(), data.tests.iter().cloned(), Vec::new()).unwrap();
        let s = RetestSummary::from_events(&extract_retest_events(&store));
        if symmetry_diagnostic(&s).map(|t| t.verdict == Verdict::NonRandomRetesting).unwrap_or(false) {
            flagged += 1;
        }
    }
    outcome(
        fn_ok && npv_ok && summary.n_events() >= 1_000_000 && flagged >= 95,
        format!(
            "{} events: fn {:.4} (injected 0.05), 1-NPV {:.5} (realized {:.5}); selective retesting flagged in {flagged}/100 seeds",
            summary.n_events(),
            est.fn_rate,
            est.one_minus_npv,
            realized_fo
        ),
    )
}

// ---------------------------------------------------------------------------

const BIN: &str = env!("CARGO_BIN_EXE_prevbounds");

fn pipeline(scenario: &Path, out: &Path) -> Result<(), String> {
    let data = out.join("data");
    let p = |f: &str| data.join(f).to_str().unwrap().to_owned();
    let o = |f: &str| out.join(f).to_str().unwrap().to_owned();
    let steps: Vec<Vec<String>> = vec![
        vec!["simulate".into(), "--scenario".into(), scenario.to_str().unwrap().into(), "--out".into(), o("data")],
        vec![
            "bounds".into(), "--persons".into(), p("persons.csv"), "--tests".into(), p("tests.csv"),
            "--admissions".into(), p("admissions.csv"), "--codes".into(), p("codes.toml"), "--seed".into(),
            "17".into(), "--lambda-u".into(), "0.005".into(), "--json".into(), "--age-weights".into(),
            "--out".into(), o("bounds"),
        ],
        vec!["npv".into(), "--tests".into(), p("tests.csv"), "--out".into(), o("npv")],
        vec![
            "validate".into(), "--persons".into(), p("persons.csv"), "--tests".into(), p("tests.csv"),
            "--admissions".into(), p("admissions.csv"), "--codes".into(), p("codes.toml"), "--seed".into(),
            "17".into(), "--out".into(), o("validate"),
        ],
    ];
    for args in steps {
        let res = Command::new(BIN).args(&args).env("RUST_LOG", "error").output().map_err(|e| e.to_string())?;
        if !res.status.success() {
            return Err(format!("{} failed: {}", args[0], String::from_utf8_lossy(&res.stderr)));
        }
    }
    Ok(())
}

fn files_under(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    for entry in std::fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        if path.is_dir() {
            for (k, v) in files_under(&path) {
                out.insert(format!("{}/{k}", path.file_name().unwrap().to_string_lossy()), v);
            }
        } else {
            out.insert(path.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&path).unwrap());
        }
    }
    out
}

fn determinism() -> Outcome {
    let dir = TempDir::new().unwrap();
    let scenario = dir.path().join("scenario.toml");
    // duplicates that differ only in a filler code tie on diagnosis count
    std::fs::write(
        &scenario,
        "seed = 99\npopulation = 150000\nprevalence = [0.02, 0.03, 0.025]\ntest_rate = 0.02\nrho = 4.0\n\
         false_negative_rate = 0.05\ninconclusive_rate = 0.01\nretest_rate = 0.2\nmissing_demographics_rate = 0.01\n\n\
         [hospital]\nadmission_rate = 0.005\nphi = 0.0\ntest_rate = 0.2\ninfected_test_ratio = 3.0\n\
         icli_rate = 0.01\nicli_background_rate = 0.001\nduplicate_rate = 0.3\n",
    )
    .unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        if let Err(e) = pipeline(&scenario, out) {
            return outcome(false, e);
        }
    }
    let (fa, fb) = (files_under(&a), files_under(&b));
    let differing: Vec<&String> = fa.keys().filter(|k| fa.get(*k) != fb.get(*k)).collect();
    let bytes: usize = fa.values().map(Vec::len).sum();
    outcome(
        differing.is_empty() && fa.len() == fb.len() && fa.len() >= 9,
        format!("{} output files ({bytes} bytes) compared; differing: {differing:?}", fa.len()),
    )
}

// ---------------------------------------------------------------------------

fn throughput() -> Outcome {
    let dir = TempDir::new().unwrap();
    let cfg = ScenarioConfig::from_toml(
        r#"
seed = 4
population = 1000000
prevalence = [0.01, 0.012, 0.015, 0.018, 0.02, 0.02, 0.018, 0.015, 0.012, 0.01]
test_rate = 0.4
rho = 1.0
false_negative_rate = 0.05
inconclusive_rate = 0.01
retest_rate = 0.25

[hospital]
admission_rate = 0.1
phi = 0.0
test_rate = 0.1
infected_test_ratio = 3.0
icli_rate = 0.01
icli_background_rate = 0.001
duplicate_rate = 0.02
"#,
    )
    .unwrap();
    write_to_dir(&cfg, dir.path()).unwrap();
    let d = dir.path();
    let lines = |f: &str| -> usize {
        let text = std::fs::read(d.join(f)).unwrap();
        text.iter().filter(|&&c| c == b'\n').count() - 1
    };
    let (n_tests, n_adm) = (lines("tests.csv"), lines("admissions.csv"));

    let started = Instant::now();
    let store = load_store(&d.join("persons.csv"), &d.join("tests.csv"), &d.join("admissions.csv"), 0).unwrap();
    let codes = load_codes(Some(&d.join("codes.toml"))).unwrap();
    let table = build_cells(&store, &codes, &calendar_for(&store, &codes)).unwrap();
    let band = ErrorBand::new(0.0, 0.005).unwrap();
    let rows = bounds_rows(&table, &BoundsPlan::new(&ALL_ASSUMPTIONS, Some(band))).unwrap();
    let elapsed = started.elapsed();
    outcome(
        n_tests >= 5_000_000 && n_adm >= 1_000_000 && elapsed < Duration::from_secs(120),
        format!(
            "{n_tests} test rows, {n_adm} admission rows -> {} bound rows in {:.1}s on {} thread(s)",
            rows.len(),
            elapsed.as_secs_f64(),
            rayon::current_num_threads()
        ),
    )
}

// ---------------------------------------------------------------------------

fn main() {
    let criteria: [(&str, fn() -> Outcome); 9] = [
        ("oracle_equivalence", oracle_equivalence),
        ("nesting", nesting),
        ("coverage", coverage),
        ("violation_detection", violation_detection),
        ("error_adjustment", error_adjustment),
        ("se_ci_arithmetic", se_ci_arithmetic),
        ("retest_estimator", retest_estimator),
        ("determinism", determinism),
        ("throughput", throughput),
    ];
    let filters: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (name, f) in criteria {
        if !filters.is_empty() && !filters.iter().any(|p| name.contains(p.as_str())) {
            continue;
        }
        let started = Instant::now();
        let o = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            outcome(false, format!("panicked: {msg}"))
        });
        if !o.pass {
            failed += 1;
        }
        println!(
            "{} {name} [{:.1}s]: {}",
            if o.pass { "PASS" } else { "FAIL" },
            started.elapsed().as_secs_f64(),
            o.detail
        );
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
