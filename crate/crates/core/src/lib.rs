//! Partial-identification bounds on active-infection prevalence.
//!
//! The crate turns linked individual-level test records and hospital
//! admissions into weekly sufficient statistics ([`domain::CellCounts`]) and
//! computes prevalence bounds under a ladder of increasingly strong
//! assumptions:
//!
//! * worst case (no assumptions),
//! * test monotonicity (the tested are at least as likely to be infected as the
//!   untested),
//! * test monotonicity plus hospital monotonicity,
//! * test monotonicity plus hospital independence,
//!
//! each optionally widened for false-negative test results. Standard errors,
//! confidence intervals on the identification region and age standardization
//! live in [`inference`]; [`retest`] estimates false-negative rates from
//! test-retest pairs; [`simulate`] provides a seeded synthetic population and an
//! exhaustive bound enumerator used as a verification oracle.

pub mod bounds;
pub mod cli;
pub mod cohort;
pub mod domain;
pub mod inference;
pub mod ingest;
pub mod retest;
pub mod simulate;

pub use bounds::{Assumption, AssumptionRegime, BoundsError, Interval};
pub use domain::{AgeGroup, BoundsResult, CellCounts, ErrorBand, PersonId, TestResult};
