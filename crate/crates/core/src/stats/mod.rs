//! Random-intercept mixed models, Wald tests, and the MinSkew and churn
//! testing protocols.

pub mod mixed;
pub mod protocol;
pub mod wald;

pub use mixed::{
    fit_random_intercept, fit_random_intercept_with, Coefficient, Criterion, LongObservation, MixedModelFit,
    INTERCEPT,
};
pub use protocol::{
    churn_design, churn_observations, churn_protocol, group_indicator, minskew_observations, minskew_protocol,
    CutoffSummary, MinSkewObservation, ProtocolReport, ProtocolRow, DAY, BENCHMARK_MINSKEW,
};
pub use wald::{two_sided_p, wald_test, WaldTest};
