#![allow(dead_code)]

use num_rational::Ratio;
use prevbounds::bounds::{bound_ladder, Assumption, AssumptionRegime, BoundsError};
use prevbounds::domain::{ErrorBand, Rational};
use prevbounds::simulate::oracle::{enumerate_bounds, SmallInstance};
use prevbounds::simulate::ScenarioConfig;

pub const ALL_ASSUMPTIONS: [Assumption; 4] = [
    Assumption::WorstCase,
    Assumption::TestMonotone,
    Assumption::TestMonotonePlusHospMonotone,
    Assumption::TestMonotonePlusHospIndependent,
];

pub fn q(n: i128, d: i128) -> Rational {
    Ratio::new(n, d)
}

pub fn regime(a: Assumption, band: Option<(Rational, Rational)>) -> AssumptionRegime<Rational> {
    match band {
        None => AssumptionRegime::new(a),
        Some((l, u)) => AssumptionRegime::with_band(a, ErrorBand::new(l, u).unwrap()),
    }
}

#[derive(Debug, PartialEq)]
pub enum Comparison {
    Equal,
    /// The closed form is undefined on this instance (no tests in a cell).
    Skipped,
    Mismatch(String),
}

/// Closed-form bounds against the vertex enumeration, exactly.
pub fn compare_with_oracle(inst: &SmallInstance, r: &AssumptionRegime<Rational>) -> Comparison {
    let pop = inst.population_cell();
    let hosp = r.assumption.needs_hospital().then(|| inst.hospital_cell());
    let closed = match bound_ladder::<Rational>(&pop, hosp.as_ref(), r) {
        Ok(iv) => Some(iv.values()),
        Err(BoundsError::Refuted { .. }) => None,
        Err(_) => return Comparison::Skipped,
    };
    let oracle = match enumerate_bounds(inst, r) {
        Ok(o) => o,
        Err(e) => return Comparison::Mismatch(format!("oracle error {e}")),
    };
    if closed == oracle {
        Comparison::Equal
    } else {
        Comparison::Mismatch(format!(
            "{} on {inst:?}: closed {closed:?}, oracle {oracle:?}",
            r.label()
        ))
    }
}

/// A scenario with hospitals where every regime's assumptions hold.
pub fn valid_scenario(seed: u64, population: u64, weeks: usize, prevalence: f64) -> ScenarioConfig {
    let prevalence = vec![prevalence.to_string(); weeks].join(", ");
    ScenarioConfig::from_toml(&format!(
        r#"
seed = {seed}
population = {population}
prevalence = [{prevalence}]
test_rate = 0.01
rho = 5.0

[hospital]
admission_rate = 0.03
phi = 0.0
test_rate = 0.1
infected_test_ratio = 5.0
"#
    ))
    .unwrap()
}
