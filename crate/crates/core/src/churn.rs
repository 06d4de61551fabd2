//! Day-over-day churn of top-k membership.
//!
//! Top-k windows are positional over the raw entry list, so anonymized
//! members hold window slots; the group filter is applied afterwards.
//! Candidates are matched across days by `candidate_id`.

use std::collections::{BTreeMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{GroupScheme, QuerySeries};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChurnCell {
    pub query_id: String,
    pub attribute: String,
    pub label: String,
    pub k: usize,
    pub start_day: u32,
    pub end_day: u32,
    /// Departed / base; `None` when the base set is empty.
    pub churn: Option<f64>,
    /// Group members in the top-k on the start day.
    pub base_count: usize,
    pub departed: usize,
}

fn top_ids(series: &QuerySeries, day: u32, k: usize) -> Result<HashSet<&str>> {
    let snap = series.require(day)?;
    if k == 0 || k > snap.len() {
        return Err(Error::CutoffOutOfRange { k, len: snap.len() });
    }
    Ok(snap.entries()[..k].iter().map(|e| e.candidate_id.as_str()).collect())
}

/// Fraction of `label` members in the day-`start` top-k that are absent from
/// the day-`end` top-k.
pub fn churn_rate(
    series: &QuerySeries,
    scheme: &GroupScheme,
    label: &str,
    k: usize,
    start: u32,
    end: u32,
) -> Result<ChurnCell> {
    if start >= end {
        return Err(Error::InvalidDayPair { start, end });
    }
    let idx = scheme.require_index(label)?;
    let first = series.require(start)?;
    let later = top_ids(series, end, k)?;
    if k == 0 || k > first.len() {
        return Err(Error::CutoffOutOfRange { k, len: first.len() });
    }
    let mut base_count = 0;
    let mut departed = 0;
    for e in &first.entries()[..k] {
        if e.group_index(scheme) == Some(idx) {
            base_count += 1;
            if !later.contains(e.candidate_id.as_str()) {
                departed += 1;
            }
        }
    }
    Ok(ChurnCell {
        query_id: series.query_id().to_string(),
        attribute: scheme.attribute().to_string(),
        label: label.to_string(),
        k,
        start_day: start,
        end_day: end,
        churn: (base_count > 0).then(|| departed as f64 / base_count as f64),
        base_count,
        departed,
    })
}

/// One cell per (label, day pair, k), in that nesting order. Cells whose day
/// is absent or whose `k` exceeds either list are undefined rather than
/// failing the grid.
pub fn churn_grid(
    series: &QuerySeries,
    scheme: &GroupScheme,
    k_grid: &[usize],
    day_pairs: &[(u32, u32)],
) -> Result<Vec<ChurnCell>> {
    let mut cells = Vec::with_capacity(scheme.len() * k_grid.len() * day_pairs.len());
    for label in scheme.labels() {
        for &(s, e) in day_pairs {
            for &k in k_grid {
                let cell = match churn_rate(series, scheme, label, k, s, e) {
                    Ok(c) => c,
                    Err(Error::DayMissing { .. }) | Err(Error::CutoffOutOfRange { .. }) if k > 0 => ChurnCell {
                        query_id: series.query_id().to_string(),
                        attribute: scheme.attribute().to_string(),
                        label: label.clone(),
                        k,
                        start_day: s,
                        end_day: e,
                        churn: None,
                        base_count: 0,
                        departed: 0,
                    },
                    Err(err) => return Err(err),
                };
                cells.push(cell);
            }
        }
    }
    Ok(cells)
}

/// `(first, d)` for every later observed day `d`.
pub fn pairs_from_first(series: &QuerySeries) -> Vec<(u32, u32)> {
    let mut days = series.days();
    match days.next() {
        Some(first) => days.map(|d| (first, d)).collect(),
        None => Vec::new(),
    }
}

/// Consecutive observed days.
pub fn consecutive_pairs(series: &QuerySeries) -> Vec<(u32, u32)> {
    let days: Vec<u32> = series.days().collect();
    days.windows(2).map(|w| (w[0], w[1])).collect()
}

/// Mean churn over defined cells sharing (label, k, day gap).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapAggregate {
    pub label: String,
    pub k: usize,
    pub gap: u32,
    pub mean: f64,
    pub cells: usize,
}

/// Averages churn by day distance, e.g. every 1-day-apart pair together.
/// Undefined cells are skipped.
pub fn aggregate_by_gap(cells: &[ChurnCell]) -> Vec<GapAggregate> {
    let mut acc: BTreeMap<(String, usize, u32), (f64, usize)> = BTreeMap::new();
    for c in cells {
        if let Some(v) = c.churn {
            let slot = acc.entry((c.label.clone(), c.k, c.end_day - c.start_day)).or_default();
            slot.0 += v;
            slot.1 += 1;
        }
    }
    acc.into_iter()
        .map(|((label, k, gap), (sum, n))| GapAggregate {
            label,
            k,
            gap,
            mean: sum / n as f64,
            cells: n,
        })
        .collect()
}
