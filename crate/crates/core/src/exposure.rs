//! Per-cutoff representation metrics over a ranked list.
//!
//! All shares at cutoff `k` are taken over the labeled prefix: counts come
//! from the first `k` positions, and the denominator is the number of
//! labeled, non-missing entries among them (`labeled_total(k)`), not `k`.
//! Logs are natural logs.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::format::Cell;
use crate::model::{GroupProportions, GroupScheme, RankingSnapshot};

/// Default page size for summary cutoffs.
pub const PAGE_SIZE: usize = 25;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricKind {
    Deviation,
    Skew,
    MinSkew,
    CorrectedSkew,
    Churn,
}

impl MetricKind {
    pub fn as_str(self) -> &'static str {
        match self {
            MetricKind::Deviation => "deviation",
            MetricKind::Skew => "skew",
            MetricKind::MinSkew => "minskew",
            MetricKind::CorrectedSkew => "corrected_skew",
            MetricKind::Churn => "churn",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [
            MetricKind::Deviation,
            MetricKind::Skew,
            MetricKind::MinSkew,
            MetricKind::CorrectedSkew,
            MetricKind::Churn,
        ]
        .into_iter()
        .find(|m| m.as_str() == s)
    }
}

impl fmt::Display for MetricKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Metric values over a grid of cutoffs for one (query, day, label).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricCurve {
    pub query_id: String,
    pub day: u32,
    pub attribute: String,
    /// `None` for MinSkew, which spans all labels.
    pub label: Option<String>,
    pub metric: MetricKind,
    pub values: BTreeMap<usize, Cell>,
}

/// Per-label counts in the first `k` positions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TopKCounts {
    pub k: usize,
    /// Aligned with the scheme's labels.
    pub counts: Vec<usize>,
    pub labeled_total: usize,
}

impl TopKCounts {
    pub fn share(&self, idx: usize) -> Option<f64> {
        (self.labeled_total > 0).then(|| self.counts[idx] as f64 / self.labeled_total as f64)
    }
}

/// Cumulative per-label counts for every prefix of a snapshot.
#[derive(Debug, Clone)]
pub struct PrefixCounts {
    groups: usize,
    // row k holds counts over the first k positions; row 0 is all zeros
    rows: Vec<usize>,
}

impl PrefixCounts {
    pub fn new(snapshot: &RankingSnapshot, scheme: &GroupScheme) -> Self {
        let m = scheme.len();
        let mut rows = vec![0usize; (snapshot.len() + 1) * m];
        for (pos, e) in snapshot.entries().iter().enumerate() {
            let (prev, next) = rows.split_at_mut((pos + 1) * m);
            next[..m].copy_from_slice(&prev[pos * m..]);
            if let Some(i) = e.group_index(scheme) {
                next[i] += 1;
            }
        }
        Self { groups: m, rows }
    }

    pub fn len(&self) -> usize {
        self.rows.len() / self.groups - 1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn at(&self, k: usize) -> Result<TopKCounts> {
        if k == 0 || k > self.len() {
            return Err(Error::CutoffOutOfRange { k, len: self.len() });
        }
        let counts = self.rows[k * self.groups..(k + 1) * self.groups].to_vec();
        let labeled_total = counts.iter().sum();
        Ok(TopKCounts {
            k,
            counts,
            labeled_total,
        })
    }
}

fn check_scheme(scheme: &GroupScheme, proportions: &GroupProportions) -> Result<()> {
    if proportions.scheme().labels() != scheme.labels() {
        return Err(Error::InvalidProportions(format!(
            "proportions cover {:?}, scheme has {:?}",
            proportions.scheme().labels(),
            scheme.labels()
        )));
    }
    Ok(())
}

pub fn topk_counts(snapshot: &RankingSnapshot, scheme: &GroupScheme, k: usize) -> Result<TopKCounts> {
    if k == 0 || k > snapshot.len() {
        return Err(Error::CutoffOutOfRange { k, len: snapshot.len() });
    }
    let mut counts = vec![0usize; scheme.len()];
    for e in &snapshot.entries()[..k] {
        if let Some(i) = e.group_index(scheme) {
            counts[i] += 1;
        }
    }
    let labeled_total = counts.iter().sum();
    Ok(TopKCounts {
        k,
        counts,
        labeled_total,
    })
}

/// Every cutoff `1..=len`.
pub fn full_grid(len: usize) -> Vec<usize> {
    (1..=len).collect()
}

/// Page boundaries `page, 2*page, ...` up to `max_k`.
pub fn page_grid(max_k: usize, page: usize) -> Vec<usize> {
    (1..=max_k / page.max(1)).map(|i| i * page).collect()
}

fn curve_over<F>(
    snapshot: &RankingSnapshot,
    scheme: &GroupScheme,
    label: Option<&str>,
    metric: MetricKind,
    k_grid: &[usize],
    mut cell: F,
) -> Result<MetricCurve>
where
    F: FnMut(&TopKCounts) -> Result<Cell>,
{
    let prefix = PrefixCounts::new(snapshot, scheme);
    let mut values = BTreeMap::new();
    for &k in k_grid {
        if k == 0 {
            return Err(Error::CutoffOutOfRange { k, len: snapshot.len() });
        }
        let c = if k > snapshot.len() {
            Cell::Undefined
        } else {
            cell(&prefix.at(k)?)?
        };
        values.insert(k, c);
    }
    Ok(MetricCurve {
        query_id: snapshot.query_id().to_string(),
        day: snapshot.day(),
        attribute: scheme.attribute().to_string(),
        label: label.map(str::to_string),
        metric,
        values,
    })
}

/// `p* - share(k)`: positive means the group is under-represented.
pub fn deviation_curve(
    snapshot: &RankingSnapshot,
    scheme: &GroupScheme,
    proportions: &GroupProportions,
    label: &str,
    k_grid: &[usize],
) -> Result<MetricCurve> {
    check_scheme(scheme, proportions)?;
    let idx = scheme.require_index(label)?;
    let target = proportions.shares()[idx];
    curve_over(snapshot, scheme, Some(label), MetricKind::Deviation, k_grid, |c| {
        Ok(match c.share(idx) {
            Some(s) => Cell::Value(target - s),
            None => Cell::Undefined,
        })
    })
}

/// `ln(share / p_star)`, `NegInfinite` for a zero share.
pub fn log_ratio_skew(share: f64, p_star: f64) -> Cell {
    if share <= 0.0 {
        Cell::NegInfinite
    } else {
        Cell::Value((share / p_star).ln())
    }
}

fn skew_cell(counts: &TopKCounts, idx: usize, p_star: f64) -> Cell {
    match counts.share(idx) {
        Some(s) => log_ratio_skew(s, p_star),
        None => Cell::Undefined,
    }
}

fn target_for(proportions: &GroupProportions, scheme: &GroupScheme, idx: usize) -> Result<f64> {
    let p = proportions.shares()[idx];
    if p <= 0.0 {
        return Err(Error::ZeroTargetProportion(scheme.labels()[idx].clone()));
    }
    Ok(p)
}

pub fn skew_at_k(
    snapshot: &RankingSnapshot,
    scheme: &GroupScheme,
    proportions: &GroupProportions,
    label: &str,
    k: usize,
) -> Result<Cell> {
    check_scheme(scheme, proportions)?;
    let idx = scheme.require_index(label)?;
    let p = target_for(proportions, scheme, idx)?;
    let counts = topk_counts(snapshot, scheme, k)?;
    Ok(skew_cell(&counts, idx, p))
}

fn min_skew_cell(counts: &TopKCounts, targets: &[f64]) -> Cell {
    if counts.labeled_total == 0 {
        return Cell::Undefined;
    }
    let mut min = f64::INFINITY;
    for (i, &p) in targets.iter().enumerate() {
        match skew_cell(counts, i, p) {
            Cell::Value(v) => min = min.min(v),
            Cell::NegInfinite => return Cell::NegInfinite,
            Cell::Undefined => return Cell::Undefined,
        }
    }
    Cell::Value(min)
}

fn all_targets(proportions: &GroupProportions, scheme: &GroupScheme) -> Result<Vec<f64>> {
    (0..scheme.len()).map(|i| target_for(proportions, scheme, i)).collect()
}

/// Minimum skew over all labels at cutoff `k`.
pub fn min_skew_at_k(
    snapshot: &RankingSnapshot,
    scheme: &GroupScheme,
    proportions: &GroupProportions,
    k: usize,
) -> Result<Cell> {
    check_scheme(scheme, proportions)?;
    let targets = all_targets(proportions, scheme)?;
    let counts = topk_counts(snapshot, scheme, k)?;
    Ok(min_skew_cell(&counts, &targets))
}

pub fn skew_curve(
    snapshot: &RankingSnapshot,
    scheme: &GroupScheme,
    proportions: &GroupProportions,
    label: &str,
    k_grid: &[usize],
) -> Result<MetricCurve> {
    check_scheme(scheme, proportions)?;
    let idx = scheme.require_index(label)?;
    let p = target_for(proportions, scheme, idx)?;
    curve_over(snapshot, scheme, Some(label), MetricKind::Skew, k_grid, |c| {
        Ok(skew_cell(c, idx, p))
    })
}

pub fn min_skew_curve(
    snapshot: &RankingSnapshot,
    scheme: &GroupScheme,
    proportions: &GroupProportions,
    k_grid: &[usize],
) -> Result<MetricCurve> {
    check_scheme(scheme, proportions)?;
    let targets = all_targets(proportions, scheme)?;
    curve_over(snapshot, scheme, None, MetricKind::MinSkew, k_grid, |c| {
        Ok(min_skew_cell(c, &targets))
    })
}

/// Counts bracketing `p_star * k`. Products within 1e-9 of an integer count
/// as integral so that e.g. `0.4 * 100` is not split into 39/40.
pub fn integral_bracket(p_star: f64, k: usize) -> (usize, usize) {
    let x = p_star * k as f64;
    let r = x.round();
    if (x - r).abs() <= 1e-9 * r.abs().max(1.0) {
        let r = r.max(0.0) as usize;
        return (r, r);
    }
    (x.floor().max(0.0) as usize, x.ceil().max(0.0) as usize)
}

/// Smallest `|skew|` any list of length `k` can reach for a group with target
/// share `p_star`. A zero floor count is excluded (its log is infinite).
pub fn best_attainable_skew(p_star: f64, k: usize) -> Result<f64> {
    if !(p_star > 0.0 && p_star < 1.0) {
        return Err(Error::DegenerateProportion(p_star));
    }
    if k == 0 {
        return Err(Error::CutoffOutOfRange { k, len: 0 });
    }
    let (lo, hi) = integral_bracket(p_star, k);
    let branch = |c: usize| ((c as f64 / k as f64) / p_star).ln().abs();
    let up = branch(hi);
    Ok(if lo == 0 { up } else { branch(lo).min(up) })
}

/// `sign(S) * (|S| - S_int)` with `S_int = best_attainable_skew(p_star, k)`.
/// Non-finite inputs pass through.
pub fn corrected_skew(observed: Cell, p_star: f64, k: usize) -> Result<Cell> {
    let floor = best_attainable_skew(p_star, k)?;
    Ok(match observed {
        Cell::Value(0.0) => Cell::Value(0.0),
        Cell::Value(s) => Cell::Value(s.signum() * (s.abs() - floor)),
        other => other,
    })
}

fn corrected_cell(counts: &TopKCounts, idx: usize, p: f64) -> Result<Cell> {
    if counts.labeled_total == 0 {
        return Ok(Cell::Undefined);
    }
    corrected_skew(skew_cell(counts, idx, p), p, counts.labeled_total)
}

/// Integrality-corrected skew at cutoff `k`. The attainable bracket is taken
/// over `labeled_total(k)` entries, the same denominator the observed share
/// uses, so `|corrected| <= |observed|` holds for every prefix.
pub fn corrected_skew_at_k(
    snapshot: &RankingSnapshot,
    scheme: &GroupScheme,
    proportions: &GroupProportions,
    label: &str,
    k: usize,
) -> Result<Cell> {
    check_scheme(scheme, proportions)?;
    let idx = scheme.require_index(label)?;
    let p = proportions.shares()[idx];
    let counts = topk_counts(snapshot, scheme, k)?;
    corrected_cell(&counts, idx, p)
}

pub fn corrected_skew_curve(
    snapshot: &RankingSnapshot,
    scheme: &GroupScheme,
    proportions: &GroupProportions,
    label: &str,
    k_grid: &[usize],
) -> Result<MetricCurve> {
    check_scheme(scheme, proportions)?;
    let idx = scheme.require_index(label)?;
    let p = proportions.shares()[idx];
    best_attainable_skew(p, 1)?;
    curve_over(snapshot, scheme, Some(label), MetricKind::CorrectedSkew, k_grid, |c| {
        corrected_cell(c, idx, p)
    })
}
