//! Per-cutoff testing protocols built on the random-intercept fit.
//!
//! * MinSkew: intercept-only model per cutoff, Wald test of the mean against
//!   a published benchmark value.
//! * Churn: churn regressed on group indicators and end day with a query
//!   random intercept; Wald tests of each group coefficient against 0.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::mixed::{fit_random_intercept, LongObservation, MixedModelFit, INTERCEPT};
use super::wald::{wald_test, WaldTest};
use crate::churn::ChurnCell;
use crate::error::{Error, Result};
use crate::exposure::min_skew_curve;
use crate::format::Cell;
use crate::model::{GroupProportions, GroupScheme, QuerySeries, RankingSnapshot};

/// Mean MinSkew@100 reported by the platform's own audit after re-ranking.
pub const BENCHMARK_MINSKEW: f64 = -0.011;

/// Covariate name for the churn end day.
pub const DAY: &str = "day";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MinSkewObservation {
    pub query_id: String,
    pub day: u32,
    pub k: usize,
    pub cell: Cell,
}

/// One `k,coef,estimate,se,z,p,ci_lo,ci_hi` row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProtocolRow {
    pub k: usize,
    pub coef: String,
    pub estimate: f64,
    pub se: f64,
    pub z: f64,
    pub p: f64,
    pub ci_lo: f64,
    pub ci_hi: f64,
}

impl ProtocolRow {
    fn new(k: usize, t: &WaldTest) -> Self {
        Self {
            k,
            coef: t.coefficient.clone(),
            estimate: t.estimate,
            se: t.se,
            z: t.z,
            p: t.p,
            ci_lo: t.ci95.0,
            ci_hi: t.ci95.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CutoffSummary {
    pub k: usize,
    pub n_obs: usize,
    pub n_groups: usize,
    pub excluded_undefined: usize,
    pub excluded_neg_inf: usize,
    pub tau2: f64,
    pub sigma2: f64,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ProtocolReport {
    pub rows: Vec<ProtocolRow>,
    pub summaries: Vec<CutoffSummary>,
}

impl ProtocolReport {
    pub fn row(&self, k: usize, coef: &str) -> Option<&ProtocolRow> {
        self.rows.iter().find(|r| r.k == k && r.coef == coef)
    }
}

fn summary(k: usize, fit: &MixedModelFit, undefined: usize, neg_inf: usize) -> CutoffSummary {
    CutoffSummary {
        k,
        n_obs: fit.n_obs,
        n_groups: fit.n_groups,
        excluded_undefined: undefined,
        excluded_neg_inf: neg_inf,
        tau2: fit.tau2,
        sigma2: fit.sigma2,
        warnings: fit.warnings.clone(),
    }
}

/// MinSkew cells at each cutoff for every snapshot. Snapshots whose targets
/// cannot be formed (no labeled entries, a zero target share) are skipped and
/// counted in the second return value.
pub fn minskew_observations<F>(
    series: &[QuerySeries],
    scheme: &GroupScheme,
    ks: &[usize],
    targets: F,
) -> (Vec<MinSkewObservation>, usize)
where
    F: Fn(&RankingSnapshot) -> Result<GroupProportions>,
{
    let mut out = Vec::new();
    let mut skipped = 0;
    for s in series {
        for snap in s.snapshots().values() {
            let curve = targets(snap).and_then(|p| min_skew_curve(snap, scheme, &p, ks));
            match curve {
                Ok(curve) => out.extend(curve.values.into_iter().map(|(k, cell)| MinSkewObservation {
                    query_id: snap.query_id().to_string(),
                    day: snap.day(),
                    k,
                    cell,
                })),
                Err(_) => skipped += 1,
            }
        }
    }
    (out, skipped)
}

/// Intercept-only fit and Wald test against `null_value` per cutoff.
/// Undefined and `-inf` cells are excluded and counted, never clipped.
pub fn minskew_protocol(observations: &[MinSkewObservation], null_value: f64) -> Result<ProtocolReport> {
    let ks: BTreeSet<usize> = observations.iter().map(|o| o.k).collect();
    let mut report = ProtocolReport::default();
    for k in ks {
        let mut undefined = 0;
        let mut neg_inf = 0;
        let mut data = Vec::new();
        for o in observations.iter().filter(|o| o.k == k) {
            match o.cell {
                Cell::Value(v) => data.push(LongObservation::new(o.query_id.clone(), v)),
                Cell::Undefined => undefined += 1,
                Cell::NegInfinite => neg_inf += 1,
            }
        }
        if undefined + neg_inf > 0 {
            log::info!("k={k}: excluded {undefined} undefined and {neg_inf} -inf MinSkew cells");
        }
        let fit = fit_random_intercept(&data, &[INTERCEPT])?;
        for w in &fit.warnings {
            log::warn!("k={k}: {w}");
        }
        let test = wald_test(&fit, INTERCEPT, null_value)?;
        report.rows.push(ProtocolRow::new(k, &test));
        report.summaries.push(summary(k, &fit, undefined, neg_inf));
    }
    Ok(report)
}

/// Indicator covariate name for a non-reference label.
pub fn group_indicator(label: &str) -> String {
    format!("is_{label}")
}

/// Design for the churn model: intercept, one indicator per non-reference
/// label (the scheme's first label is the reference), then the end day.
pub fn churn_design(scheme: &GroupScheme) -> Vec<String> {
    let mut d = vec![INTERCEPT.to_string()];
    d.extend(scheme.labels()[1..].iter().map(|l| group_indicator(l)));
    d.push(DAY.to_string());
    d
}

/// Long-format rows for one cutoff; undefined cells are dropped and counted.
pub fn churn_observations(cells: &[ChurnCell], scheme: &GroupScheme, k: usize) -> Result<(Vec<LongObservation>, usize)> {
    let mut data = Vec::new();
    let mut undefined = 0;
    for c in cells.iter().filter(|c| c.k == k) {
        let idx = scheme.require_index(&c.label)?;
        let Some(v) = c.churn else {
            undefined += 1;
            continue;
        };
        let mut o = LongObservation::new(c.query_id.clone(), v).with(DAY, c.end_day as f64);
        for (j, l) in scheme.labels().iter().enumerate().skip(1) {
            o = o.with(group_indicator(l), if j == idx { 1.0 } else { 0.0 });
        }
        data.push(o);
    }
    Ok((data, undefined))
}

/// Per-cutoff churn model; rows hold each group coefficient and the day
/// slope, each tested against 0.
pub fn churn_protocol(cells: &[ChurnCell], scheme: &GroupScheme) -> Result<ProtocolReport> {
    if let Some(c) = cells.iter().find(|c| c.attribute != scheme.attribute()) {
        return Err(Error::UnknownLabel(format!("{}:{}", c.attribute, c.label)));
    }
    let design = churn_design(scheme);
    let design_refs: Vec<&str> = design.iter().map(String::as_str).collect();
    let ks: BTreeSet<usize> = cells.iter().map(|c| c.k).collect();
    let mut report = ProtocolReport::default();
    for k in ks {
        let (data, undefined) = churn_observations(cells, scheme, k)?;
        let fit = fit_random_intercept(&data, &design_refs)?;
        for name in &design[1..] {
            report.rows.push(ProtocolRow::new(k, &wald_test(&fit, name, 0.0)?));
        }
        report.summaries.push(summary(k, &fit, undefined, 0));
    }
    Ok(report)
}
