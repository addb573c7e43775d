//! Sequential and multistage estimation of a mean with prescribed coverage.
//!
//! Sampling continues until a confidence interval drawn from a confidence
//! sequence fits inside the target interval `(L(Y_n, eps), U(Y_n, eps))`
//! built around the running sample mean. The crate provides the margin
//! shapes, one-parameter model families, the large-deviation rate function,
//! confidence-sequence and stage schedules, the four stopping rules with
//! their sequential and multistage drivers, asymptotic predictions, and a
//! seeded Monte Carlo harness that checks coverage and efficiency.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod asymptotics;
pub mod config;
pub mod error;
pub mod margins;
pub mod models;
pub mod rate_fn;
pub mod schedules;
pub mod sim;
pub mod stopping;

pub use asymptotics::{normal_cdf, normal_quantile, AsymptoticReport};
pub use error::{Error, Result};
pub use margins::MarginShape;
pub use models::{Family, MeanModel, SampleState};
pub use rate_fn::RateEval;
pub use schedules::{RuleFamily, SeqSchedule, StageSchedule};
pub use sim::{SimConfig, SimSummary};
pub use stopping::{RuleKind, TrialOutcome};

/// An open interval `(lo, hi)` of the real line; either end may be infinite.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Interval {
    pub lo: f64,
    pub hi: f64,
}

impl Interval {
    pub const REAL_LINE: Interval = Interval {
        lo: f64::NEG_INFINITY,
        hi: f64::INFINITY,
    };
    pub const POSITIVE: Interval = Interval {
        lo: 0.0,
        hi: f64::INFINITY,
    };
    pub const UNIT: Interval = Interval { lo: 0.0, hi: 1.0 };

    pub fn new(lo: f64, hi: f64) -> Self {
        Interval { lo, hi }
    }

    #[inline]
    pub fn contains(&self, x: f64) -> bool {
        x > self.lo && x < self.hi
    }
}
