//! Exhaustive bound computation for tiny populations.
//!
//! Two enumerators are provided. [`enumerate_bounds`] treats the latent
//! infection shares among the untested and among tested negatives as
//! unknowns, writes every maintained assumption as a linear inequality on
//! them, and finds the extreme population prevalence by visiting every vertex
//! of the feasible polytope in exact rational arithmetic. [`enumerate_finite`]
//! instead tries every 0/1 infection assignment to the individual people;
//! its answers are always inside the polytope range, but integrality can keep
//! them strictly inside it.

use num_rational::Ratio;
use rand::Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::bounds::{Assumption, AssumptionRegime, CellSide};
use crate::domain::{CellCounts, Rational, Scalar};

pub const MAX_PERSONS: usize = 12;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum OracleError {
    #[error("{0} people is too many to enumerate (limit {MAX_PERSONS})")]
    TooLarge(usize),
    #[error("{0} group is empty")]
    EmptyPopulation(CellSide),
}

/// What was observed for one person.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Observed {
    Untested,
    Negative,
    Positive,
}

/// A population, and for hospital regimes a hospital group, of individually
/// observed people.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct SmallInstance {
    pub population: Vec<Observed>,
    pub hospital: Vec<Observed>,
}

fn tally(people: &[Observed]) -> CellCounts {
    let mut c = CellCounts::default();
    for p in people {
        c.n_pop += 1;
        if *p != Observed::Untested {
            c.n_tested += 1;
        }
        if *p == Observed::Positive {
            c.n_positive += 1;
        }
    }
    c
}

impl SmallInstance {
    pub fn population_cell(&self) -> CellCounts {
        tally(&self.population)
    }

    pub fn hospital_cell(&self) -> CellCounts {
        tally(&self.hospital)
    }

    pub fn len(&self) -> usize {
        self.population.len() + self.hospital.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// A random instance with a nonempty population and at most `max` people.
    pub fn random<R: Rng>(rng: &mut R, max: usize) -> Self {
        let max = max.clamp(1, MAX_PERSONS);
        let n_pop = rng.random_range(1..=max);
        let n_hosp = rng.random_range(0..=max - n_pop);
        let p_test: f64 = rng.random();
        let p_pos: f64 = rng.random();
        let mut draw = |n: usize| -> Vec<Observed> {
            (0..n)
                .map(|_| {
                    if !rng.random_bool(p_test) {
                        Observed::Untested
                    } else if rng.random_bool(p_pos) {
                        Observed::Positive
                    } else {
                        Observed::Negative
                    }
                })
                .collect()
        };
        let population = draw(n_pop);
        let hospital = draw(n_hosp);
        SmallInstance {
            population,
            hospital,
        }
    }

    fn check(&self, assumption: Assumption) -> Result<(), OracleError> {
        if self.len() > MAX_PERSONS {
            return Err(OracleError::TooLarge(self.len()));
        }
        if self.population.is_empty() {
            return Err(OracleError::EmptyPopulation(CellSide::Population));
        }
        if assumption.needs_hospital() && self.hospital.is_empty() {
            return Err(OracleError::EmptyPopulation(CellSide::Hospital));
        }
        Ok(())
    }
}

fn r(n: u64) -> Rational {
    Rational::from_count(n)
}

/// `a · x <= b`.
struct Constraint {
    a: Vec<Rational>,
    b: Rational,
}

fn band_of(regime: &AssumptionRegime<Rational>) -> (Rational, Rational) {
    regime
        .error_band
        .map_or((Rational::zero(), Rational::zero()), |b| {
            (b.lambda_lower, b.lambda_upper)
        })
}

/// Coefficients of a group's prevalence in its two share variables, plus the
/// constant term.
fn prevalence_terms(c: &CellCounts) -> (Rational, Rational, Rational) {
    let n = r(c.n_pop);
    (r(c.n_untested()) / n, r(c.n_negative()) / n, r(c.n_positive) / n)
}

/// Extreme population prevalence over the polytope of latent infection
/// shares consistent with the data and the regime, or `None` when the
/// assumptions admit no solution.
///
/// Variables are, per group, the infected share of the untested and the
/// infected share of tested negatives (the latter held inside the error band,
/// or at zero without one).
pub fn enumerate_bounds(
    inst: &SmallInstance,
    regime: &AssumptionRegime<Rational>,
) -> Result<Option<(Rational, Rational)>, OracleError> {
    let assumption = regime.assumption;
    inst.check(assumption)?;
    let (lo, hi) = band_of(regime);
    let pop = inst.population_cell();
    let hosp = inst.hospital_cell();
    let dims = if assumption.needs_hospital() { 4 } else { 2 };
    let zero = Rational::zero;
    let one = Rational::one();

    let mut cons = Vec::new();
    let unit = |i: usize, sign: i128| {
        let mut a = vec![zero(); dims];
        a[i] = Ratio::from_integer(sign);
        a
    };
    for g in 0..dims / 2 {
        let (u, n) = (2 * g, 2 * g + 1);
        cons.push(Constraint { a: unit(u, -1), b: zero() });
        cons.push(Constraint { a: unit(u, 1), b: one });
        cons.push(Constraint { a: unit(n, -1), b: -lo });
        cons.push(Constraint { a: unit(n, 1), b: hi });
    }
    if assumption != Assumption::WorstCase {
        // infected share among the tested is at least that among the untested
        let groups: &[CellCounts] = if dims == 4 { &[pop, hosp] } else { &[pop] };
        for (g, c) in groups.iter().enumerate() {
            let mut a = vec![zero(); dims];
            a[2 * g] = r(c.n_tested);
            a[2 * g + 1] = -r(c.n_negative());
            cons.push(Constraint {
                a,
                b: r(c.n_positive),
            });
        }
    }
    if dims == 4 {
        let (pu, pn, pc) = prevalence_terms(&pop);
        let (hu, hn, hc) = prevalence_terms(&hosp);
        // population prevalence minus hospital prevalence <= 0
        let diff = Constraint {
            a: vec![pu, pn, -hu, -hn],
            b: hc - pc,
        };
        if assumption == Assumption::TestMonotonePlusHospIndependent {
            cons.push(Constraint {
                a: diff.a.iter().map(|x| -*x).collect(),
                b: -diff.b,
            });
        }
        cons.push(diff);
    }

    let (ou, on, oc) = prevalence_terms(&pop);
    let objective = |x: &[Rational]| oc + ou * x[0] + on * x[1];

    let subsets = combinations(cons.len(), dims);
    let extremes = subsets
        .par_iter()
        .filter_map(|rows| {
            let a: Vec<Vec<Rational>> = rows.iter().map(|&i| cons[i].a.clone()).collect();
            let b: Vec<Rational> = rows.iter().map(|&i| cons[i].b).collect();
            let x = solve(a, b)?;
            let feasible = cons.iter().all(|c| dot(&c.a, &x) <= c.b);
            feasible.then(|| objective(&x))
        })
        .fold(
            || None,
            |acc: Option<(Rational, Rational)>, v| {
                Some(acc.map_or((v, v), |(a, b)| (a.min_of(v), b.max_of(v))))
            },
        )
        .reduce(
            || None,
            |x, y| match (x, y) {
                (Some((a, b)), Some((c, d))) => Some((a.min_of(c), b.max_of(d))),
                (x, None) => x,
                (None, y) => y,
            },
        );
    Ok(extremes)
}

fn dot(a: &[Rational], x: &[Rational]) -> Rational {
    a.iter()
        .zip(x)
        .fold(Rational::zero(), |acc, (p, q)| acc + *p * *q)
}

fn combinations(n: usize, k: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut idx: Vec<usize> = (0..k).collect();
    if k > n {
        return out;
    }
    loop {
        out.push(idx.clone());
        let Some(i) = (0..k).rev().find(|&i| idx[i] != i + n - k) else {
            return out;
        };
        idx[i] += 1;
        for j in i + 1..k {
            idx[j] = idx[j - 1] + 1;
        }
    }
}

/// Solve a square system exactly; `None` if singular.
fn solve(mut a: Vec<Vec<Rational>>, mut b: Vec<Rational>) -> Option<Vec<Rational>> {
    let n = b.len();
    for col in 0..n {
        let pivot = (col..n).find(|&r| a[r][col] != Rational::zero())?;
        a.swap(col, pivot);
        b.swap(col, pivot);
        let p = a[col][col];
        for row in 0..n {
            if row == col || a[row][col] == Rational::zero() {
                continue;
            }
            let f = a[row][col] / p;
            for k in col..n {
                let v = a[col][k];
                a[row][k] -= f * v;
            }
            let v = b[col];
            b[row] -= f * v;
        }
    }
    Some((0..n).map(|i| b[i] / a[i][i]).collect())
}

fn ceil(x: Rational) -> i128 {
    x.ceil().to_integer()
}

fn floor(x: Rational) -> i128 {
    x.floor().to_integer()
}

/// Extreme prevalence over every 0/1 infection assignment to untested people
/// and, with an error band, to tested negatives, keeping assignments that
/// satisfy the regime. Between `⌈λ_l·negatives⌉` and `⌊λ_u·negatives⌋`
/// negatives in each group may be infected.
pub fn enumerate_finite(
    inst: &SmallInstance,
    regime: &AssumptionRegime<Rational>,
) -> Result<Option<(Rational, Rational)>, OracleError> {
    let assumption = regime.assumption;
    inst.check(assumption)?;
    let (lo, hi) = band_of(regime);
    let with_hosp = assumption.needs_hospital();
    let people: Vec<(bool, Observed)> = inst
        .population
        .iter()
        .map(|o| (false, *o))
        .chain(
            inst.hospital
                .iter()
                .filter(|_| with_hosp)
                .map(|o| (true, *o)),
        )
        .collect();
    let free: Vec<usize> = people
        .iter()
        .enumerate()
        .filter(|(_, (_, o))| *o != Observed::Positive)
        .map(|(i, _)| i)
        .collect();
    let pop = inst.population_cell();
    let hosp = inst.hospital_cell();
    let allowed = |c: &CellCounts, k: u64| {
        let neg = Rational::from_count(c.n_negative());
        let k = k as i128;
        ceil(lo * neg) <= k && k <= floor(hi * neg)
    };
    // infected among the tested over tested >= infected among untested over untested
    let monotone = |c: &CellCounts, untested: u64, negatives: u64| {
        c.n_tested == 0
            || c.n_untested() == 0
            || untested * c.n_tested <= (c.n_positive + negatives) * c.n_untested()
    };

    (0u32..1 << free.len())
        .into_par_iter()
        .filter_map(|mask| {
            let mut k = [[0u64; 2]; 2]; // [group][untested, negative]
            for (bit, &i) in free.iter().enumerate() {
                if mask >> bit & 1 == 1 {
                    let (is_hosp, o) = people[i];
                    let slot = if o == Observed::Untested { 0 } else { 1 };
                    k[is_hosp as usize][slot] += 1;
                }
            }
            if !allowed(&pop, k[0][1]) || (with_hosp && !allowed(&hosp, k[1][1])) {
                return None;
            }
            if assumption != Assumption::WorstCase {
                if !monotone(&pop, k[0][0], k[0][1]) {
                    return None;
                }
                if with_hosp && !monotone(&hosp, k[1][0], k[1][1]) {
                    return None;
                }
            }
            let prev_p = Rational::ratio(pop.n_positive + k[0][0] + k[0][1], pop.n_pop);
            if with_hosp {
                let prev_h = Rational::ratio(hosp.n_positive + k[1][0] + k[1][1], hosp.n_pop);
                let ok = match assumption {
                    Assumption::TestMonotonePlusHospMonotone => prev_h >= prev_p,
                    _ => prev_h == prev_p,
                };
                if !ok {
                    return None;
                }
            }
            Some((prev_p, prev_p))
        })
        .reduce_with(|(a, b), (c, d)| (a.min_of(c), b.max_of(d)))
        .map_or(Ok(None), |x| Ok(Some(x)))
}
