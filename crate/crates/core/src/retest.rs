//! Test-retest pairs and the false-negative rate they imply.
//!
//! A retest event is a person tested on day `t` and again on `t + 1` with no
//! test on `t - 1`. Assuming no false positives, a stable infection status
//! across the two days and retesting unrelated to the first result, the
//! discordant share of pairs identifies the false-negative rate.

use chrono::Duration;
use rayon::prelude::*;
use serde::Serialize;
use statrs::distribution::{Binomial, DiscreteCDF};
use thiserror::Error;

use crate::domain::{PersonId, TestResult};
use crate::ingest::{DayTest, LinkedStore};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RetestError {
    #[error("no concordant positive pairs; the false-negative rate is not identified")]
    DegenerateSummary,
    #[error("no discordant pairs to test for symmetry")]
    NoDiscordantPairs,
    #[error("joint proportions must be nonnegative and sum to 1 (got sum {0})")]
    InvalidProportions(f64),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RetestEvent {
    pub person_id: PersonId,
    pub date: chrono::NaiveDate,
    pub first_positive: bool,
    pub second_positive: bool,
}

fn definitive(t: &DayTest) -> Option<bool> {
    match t.result {
        TestResult::Inconclusive => None,
        r => Some(r.is_positive()),
    }
}

fn person_events(id: &PersonId, tests: &[DayTest]) -> Vec<RetestEvent> {
    let mut out = Vec::new();
    for (i, pair) in tests.windows(2).enumerate() {
        let (a, b) = (&pair[0], &pair[1]);
        if b.date != a.date + Duration::days(1) {
            continue;
        }
        if i > 0 && tests[i - 1].date == a.date - Duration::days(1) {
            continue;
        }
        // a day with only inconclusive results still counts as tested above
        if let (Some(r1), Some(r2)) = (definitive(a), definitive(b)) {
            out.push(RetestEvent {
                person_id: id.clone(),
                date: a.date,
                first_positive: r1,
                second_positive: r2,
            });
        }
    }
    out
}

/// All retest events, ordered by person id then date.
pub fn extract_retest_events(store: &LinkedStore) -> Vec<RetestEvent> {
    let mut events: Vec<RetestEvent> = (0..store.person_count() as u32)
        .into_par_iter()
        .flat_map_iter(|p| person_events(store.person_id(p), store.tests(p)))
        .collect();
    events.sort_by(|a, b| (&a.person_id, a.date).cmp(&(&b.person_id, b.date)));
    events
}

/// Counts of `(first, second)` result pairs; `n10` is positive then negative.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
pub struct RetestSummary {
    pub n11: u64,
    pub n10: u64,
    pub n01: u64,
    pub n00: u64,
}

impl RetestSummary {
    pub fn from_events<'a>(events: impl IntoIterator<Item = &'a RetestEvent>) -> Self {
        let mut s = RetestSummary::default();
        for e in events {
            match (e.first_positive, e.second_positive) {
                (true, true) => s.n11 += 1,
                (true, false) => s.n10 += 1,
                (false, true) => s.n01 += 1,
                (false, false) => s.n00 += 1,
            }
        }
        s
    }

    pub fn n_events(&self) -> u64 {
        self.n11 + self.n10 + self.n01 + self.n00
    }

    /// `None` when there are no events.
    pub fn proportions(&self) -> Option<JointProportions> {
        let n = self.n_events();
        if n == 0 {
            return None;
        }
        let f = |k: u64| k as f64 / n as f64;
        Some(JointProportions {
            p11: f(self.n11),
            p10: f(self.n10),
            p01: f(self.n01),
            p00: f(self.n00),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct JointProportions {
    pub p11: f64,
    pub p10: f64,
    pub p01: f64,
    pub p00: f64,
}

impl JointProportions {
    pub fn new(p11: f64, p10: f64, p01: f64, p00: f64) -> Result<Self, RetestError> {
        let sum = p11 + p10 + p01 + p00;
        if [p11, p10, p01, p00].iter().any(|p| !(*p >= 0.0)) || (sum - 1.0).abs() > 1e-12 {
            return Err(RetestError::InvalidProportions(sum));
        }
        Ok(JointProportions { p11, p10, p01, p00 })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FnEstimate {
    /// Share of infected people whose test comes back negative.
    pub fn_rate: f64,
    /// Infection prevalence among the retested implied by the pairs.
    pub implied_prevalence: f64,
    /// Share of negative first tests that are infected, i.e. `1 - NPV`.
    pub one_minus_npv: f64,
}

/// Method-of-moments false-negative rate and `1 - NPV`.
///
/// The two discordant cells share an expectation under the maintained
/// assumptions, so their average is used in both places they appear.
pub fn estimate_fn_bound(p: &JointProportions) -> Result<FnEstimate, RetestError> {
    if p.p11 <= 0.0 {
        return Err(RetestError::DegenerateSummary);
    }
    let discordant = (p.p10 + p.p01) / 2.0;
    let positive_share = p.p11 + discordant;
    let fn_rate = discordant / positive_share;
    let implied_prevalence = positive_share * positive_share / p.p11;
    let one_minus_npv = if fn_rate == 0.0 {
        0.0
    } else {
        implied_prevalence * fn_rate / (discordant + p.p00)
    };
    Ok(FnEstimate {
        fn_rate,
        implied_prevalence,
        one_minus_npv,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Direction {
    Balanced,
    PositiveThenNegative,
    NegativeThenPositive,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Verdict {
    RandomRetestingConsistent,
    NonRandomRetesting,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SymmetryTest {
    pub n10: u64,
    pub n01: u64,
    /// Share of discordant pairs that are positive then negative; 0.5 under symmetry.
    pub share_10: f64,
    pub p_value: f64,
    pub verdict: Verdict,
    pub direction: Direction,
}

/// Two-sided exact binomial test that the two discordant orders are equally
/// likely, at the 5% level.
pub fn symmetry_diagnostic(s: &RetestSummary) -> Result<SymmetryTest, RetestError> {
    symmetry_diagnostic_at(s, 0.05)
}

pub fn symmetry_diagnostic_at(s: &RetestSummary, alpha: f64) -> Result<SymmetryTest, RetestError> {
    let n = s.n10 + s.n01;
    if n == 0 {
        return Err(RetestError::NoDiscordantPairs);
    }
    let binom = Binomial::new(0.5, n).expect("valid binomial parameters");
    let p_value = (2.0 * binom.cdf(s.n10.min(s.n01))).min(1.0);
    let verdict = if p_value < alpha {
        Verdict::NonRandomRetesting
    } else {
        Verdict::RandomRetestingConsistent
    };
    let direction = match s.n10.cmp(&s.n01) {
        std::cmp::Ordering::Equal => Direction::Balanced,
        std::cmp::Ordering::Greater => Direction::PositiveThenNegative,
        std::cmp::Ordering::Less => Direction::NegativeThenPositive,
    };
    Ok(SymmetryTest {
        n10: s.n10,
        n01: s.n01,
        share_10: s.n10 as f64 / n as f64,
        p_value,
        verdict,
        direction,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::TestRecord;
    use crate::ingest::build_store;
    use chrono::NaiveDate;

    fn store_with(days: &[(u32, TestResult)]) -> LinkedStore {
        let base = NaiveDate::from_ymd_opt(2020, 6, 1).unwrap();
        let tests = days
            .iter()
            .map(|(d, r)| TestRecord {
                person_id: "p1".into(),
                specimen_date: base + Duration::days(*d as i64),
                result: *r,
            })
            .collect::<Vec<_>>();
        build_store(Vec::new(), tests, Vec::new()).unwrap()
    }

    use TestResult::*;

    #[test]
    fn two_consecutive_days_make_one_event() {
        let events = extract_retest_events(&store_with(&[(10, Negative), (11, Positive)]));
        assert_eq!(events.len(), 1);
        assert!(!events[0].first_positive && events[0].second_positive);
    }

    #[test]
    fn test_on_previous_day_disqualifies() {
        let events =
            extract_retest_events(&store_with(&[(9, Negative), (10, Negative), (11, Negative)]));
        // the pair (9, 10) qualifies, (10, 11) does not
        assert_eq!(events.len(), 1);
        assert_eq!(events[0].date, NaiveDate::from_ymd_opt(2020, 6, 10).unwrap());
    }

    #[test]
    fn single_test_no_event() {
        assert!(extract_retest_events(&store_with(&[(10, Positive)])).is_empty());
        assert!(extract_retest_events(&store_with(&[(10, Positive), (12, Positive)])).is_empty());
    }

    #[test]
    fn inconclusive_days_block_but_never_pair() {
        assert!(extract_retest_events(&store_with(&[(10, Inconclusive), (11, Positive)])).is_empty());
        // an inconclusive day before t still disqualifies t
        assert_eq!(
            extract_retest_events(&store_with(&[(9, Inconclusive), (10, Positive), (11, Positive)])),
            Vec::new()
        );
    }

    #[test]
    fn concordant_positives_give_zero() {
        let p = JointProportions::new(1.0, 0.0, 0.0, 0.0).unwrap();
        let e = estimate_fn_bound(&p).unwrap();
        assert_eq!(e.fn_rate, 0.0);
        assert_eq!(e.one_minus_npv, 0.0);
    }

    #[test]
    fn all_negative_is_degenerate() {
        let p = JointProportions::new(0.0, 0.0, 0.0, 1.0).unwrap();
        assert_eq!(estimate_fn_bound(&p), Err(RetestError::DegenerateSummary));
    }

    #[test]
    fn proportions_must_sum_to_one() {
        assert!(JointProportions::new(0.5, 0.1, 0.1, 0.1).is_err());
        assert!(JointProportions::new(1.1, -0.1, 0.0, 0.0).is_err());
    }

    #[test]
    fn reported_shares_imply_small_false_omission() {
        let p = JointProportions::new(0.11, 0.005, 0.005, 0.88).unwrap();
        let e = estimate_fn_bound(&p).unwrap();
        assert!((e.fn_rate - 0.005 / 0.115).abs() < 1e-15);
        let prevalence = 0.115 * 0.115 / 0.11;
        assert!((e.one_minus_npv - prevalence * (0.005 / 0.115) / 0.885).abs() < 1e-15);
        assert!((e.one_minus_npv - 0.0059).abs() < 1e-4);
    }

    #[test]
    fn swap_invariance() {
        let a = JointProportions::new(0.2, 0.03, 0.01, 0.76).unwrap();
        let b = JointProportions::new(0.2, 0.01, 0.03, 0.76).unwrap();
        assert_eq!(estimate_fn_bound(&a), estimate_fn_bound(&b));
    }

    #[test]
    fn exact_model_recovers_parameters() {
        let (prev, fnr) = (0.12_f64, 0.05_f64);
        let s = 1.0 - fnr;
        let p = JointProportions::new(
            prev * s * s,
            prev * s * fnr,
            prev * s * fnr,
            1.0 - prev * s * s - 2.0 * prev * s * fnr,
        )
        .unwrap();
        let e = estimate_fn_bound(&p).unwrap();
        assert!((e.fn_rate - fnr).abs() < 1e-12);
        assert!((e.implied_prevalence - prev).abs() < 1e-12);
        let truth = prev * fnr / (prev * fnr + 1.0 - prev);
        assert!((e.one_minus_npv - truth).abs() < 1e-12);
    }

    fn summary(n10: u64, n01: u64) -> RetestSummary {
        RetestSummary {
            n11: 100,
            n10,
            n01,
            n00: 800,
        }
    }

    #[test]
    fn symmetric_counts_not_rejected() {
        let t = symmetry_diagnostic(&summary(5, 5)).unwrap();
        assert_eq!(t.verdict, Verdict::RandomRetestingConsistent);
        assert_eq!(t.direction, Direction::Balanced);
        assert_eq!(t.p_value, 1.0);
        assert_eq!(t.share_10, 0.5);
    }

    #[test]
    fn lopsided_counts_rejected() {
        let t = symmetry_diagnostic(&summary(10, 40)).unwrap();
        assert_eq!(t.verdict, Verdict::NonRandomRetesting);
        assert_eq!(t.direction, Direction::NegativeThenPositive);
        // two-sided exact p-value for 10 of 50, checked against a table
        assert!((t.p_value - 2.3861e-5).abs() < 1e-8, "{}", t.p_value);
    }

    #[test]
    fn no_discordant_pairs() {
        assert_eq!(
            symmetry_diagnostic(&summary(0, 0)),
            Err(RetestError::NoDiscordantPairs)
        );
    }
}
