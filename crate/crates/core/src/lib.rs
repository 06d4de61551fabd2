//! Fairness auditing for ranked candidate lists.
//!
//! The crate ingests multi-day ranking snapshots, assigns group labels from
//! offline name tables, measures exposure disparity (deviation, Skew@k,
//! MinSkew@k, integrality-corrected skew) and day-over-day churn, re-ranks
//! pools under floor/ceiling representation constraints, and fits
//! random-intercept mixed models for Wald testing. A seeded simulator
//! produces ground-truth datasets for all of the above.

pub mod churn;
pub mod detgreedy;
pub mod error;
pub mod exposure;
pub mod format;
pub mod infer;
pub mod ingest;
pub mod model;
pub mod report;
pub mod sim;
pub mod stats;

pub use error::{Error, Result};
pub use format::Cell;
pub use model::{
    observed_proportions, CandidateRecord, GroupProportions, GroupScheme, ProportionSource, QuerySeries,
    RankingSnapshot,
};
