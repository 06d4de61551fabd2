//! Domain types shared by every analysis: group schemes, candidate records,
//! per-day ranking snapshots, multi-day query series and target proportions.
//!
//! Ranks are implicit: the entry at index `i` of a snapshot sits at rank
//! `i + 1`. Anonymized ("missing") members are kept as position holders with
//! no labels so that positional analyses (churn) can see them, while every
//! group tally skips them together with unknown-labeled members.

use std::collections::{BTreeMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Share sums must hit 1 within this tolerance.
pub const SHARE_SUM_TOLERANCE: f64 = 1e-9;

/// A categorical attribute partitioning candidates into disjoint groups.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "SchemeRepr", into = "SchemeRepr")]
pub struct GroupScheme {
    attribute: String,
    labels: Vec<String>,
    unknown_label: String,
}

#[derive(Serialize, Deserialize)]
struct SchemeRepr {
    attribute: String,
    labels: Vec<String>,
    #[serde(default = "default_unknown")]
    unknown_label: String,
}

fn default_unknown() -> String {
    "unknown".to_string()
}

impl TryFrom<SchemeRepr> for GroupScheme {
    type Error = Error;
    fn try_from(r: SchemeRepr) -> Result<Self> {
        GroupScheme::new(r.attribute, r.labels, r.unknown_label)
    }
}

impl From<GroupScheme> for SchemeRepr {
    fn from(s: GroupScheme) -> Self {
        SchemeRepr {
            attribute: s.attribute,
            labels: s.labels,
            unknown_label: s.unknown_label,
        }
    }
}

impl GroupScheme {
    pub fn new<L, S>(attribute: impl Into<String>, labels: L, unknown_label: impl Into<String>) -> Result<Self>
    where
        L: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let attribute = attribute.into();
        let labels: Vec<String> = labels.into_iter().map(Into::into).collect();
        let unknown_label = unknown_label.into();
        if attribute.is_empty() {
            return Err(Error::InvalidScheme("empty attribute name".into()));
        }
        if labels.len() < 2 {
            return Err(Error::InvalidScheme(format!(
                "`{attribute}` needs at least 2 labels, got {}",
                labels.len()
            )));
        }
        let mut seen = HashSet::new();
        for l in &labels {
            if l.is_empty() {
                return Err(Error::InvalidScheme("empty label".into()));
            }
            if !seen.insert(l.as_str()) {
                return Err(Error::InvalidScheme(format!("duplicate label `{l}`")));
            }
        }
        if seen.contains(unknown_label.as_str()) {
            return Err(Error::InvalidScheme(format!(
                "unknown label `{unknown_label}` collides with a group label"
            )));
        }
        Ok(Self {
            attribute,
            labels,
            unknown_label,
        })
    }

    /// `gender` with labels `F`, `M` and `unknown`.
    pub fn binary_gender() -> Self {
        Self::new("gender", ["F", "M"], "unknown").expect("static scheme is valid")
    }

    pub fn attribute(&self) -> &str {
        &self.attribute
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn unknown_label(&self) -> &str {
        &self.unknown_label
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn index_of(&self, label: &str) -> Option<usize> {
        self.labels.iter().position(|l| l == label)
    }

    pub(crate) fn require_index(&self, label: &str) -> Result<usize> {
        self.index_of(label)
            .ok_or_else(|| Error::UnknownLabel(label.to_string()))
    }
}

/// One observed candidate card.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CandidateRecord {
    pub candidate_id: String,
    pub first_name: Option<String>,
    pub last_name: Option<String>,
    /// attribute name -> label. Absent attributes read as unknown.
    pub group_labels: BTreeMap<String, String>,
    pub missing: bool,
}

impl CandidateRecord {
    pub fn new(candidate_id: impl Into<String>) -> Self {
        Self {
            candidate_id: candidate_id.into(),
            first_name: None,
            last_name: None,
            group_labels: BTreeMap::new(),
            missing: false,
        }
    }

    /// An anonymized member: occupies a position, carries no profile data.
    pub fn anonymous(candidate_id: impl Into<String>) -> Self {
        Self {
            missing: true,
            ..Self::new(candidate_id)
        }
    }

    pub fn with_label(mut self, attribute: impl Into<String>, label: impl Into<String>) -> Self {
        self.group_labels.insert(attribute.into(), label.into());
        self
    }

    pub fn with_names(mut self, first: Option<String>, last: Option<String>) -> Self {
        self.first_name = first;
        self.last_name = last;
        self
    }

    /// The label this record carries for `scheme.attribute`, or the scheme's
    /// unknown label when missing or unlabeled.
    pub fn label<'a>(&'a self, scheme: &'a GroupScheme) -> &'a str {
        if self.missing {
            return scheme.unknown_label();
        }
        self.group_labels
            .get(scheme.attribute())
            .map(String::as_str)
            .unwrap_or(scheme.unknown_label())
    }

    /// Index of this record's group in `scheme`, or `None` for missing and
    /// unknown-labeled records (they take part in no group tally).
    pub fn group_index(&self, scheme: &GroupScheme) -> Option<usize> {
        if self.missing {
            return None;
        }
        self.group_labels
            .get(scheme.attribute())
            .and_then(|l| scheme.index_of(l))
    }
}

/// One (query, day) ordered candidate list.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankingSnapshot {
    query_id: String,
    day: u32,
    entries: Vec<CandidateRecord>,
    pool_size: Option<usize>,
    missing_count: usize,
}

impl RankingSnapshot {
    /// Validates ids and pool size; missing records have any labels cleared.
    pub fn new(
        query_id: impl Into<String>,
        day: u32,
        mut entries: Vec<CandidateRecord>,
        pool_size: Option<usize>,
    ) -> Result<Self> {
        let query_id = query_id.into();
        let invalid = |reason: String| Error::InvalidSnapshot {
            query_id: query_id.clone(),
            day,
            reason,
        };
        if day < 1 {
            return Err(invalid("day must be >= 1".into()));
        }
        let mut ids = HashSet::with_capacity(entries.len());
        for e in &entries {
            if !ids.insert(e.candidate_id.as_str()) {
                return Err(invalid(format!("duplicate candidate id `{}`", e.candidate_id)));
            }
        }
        if let Some(p) = pool_size {
            if p < entries.len() {
                return Err(invalid(format!(
                    "pool size {p} smaller than list length {}",
                    entries.len()
                )));
            }
        }
        for e in entries.iter_mut().filter(|e| e.missing) {
            e.group_labels.clear();
        }
        let missing_count = entries.iter().filter(|e| e.missing).count();
        Ok(Self {
            query_id,
            day,
            entries,
            pool_size,
            missing_count,
        })
    }

    pub fn query_id(&self) -> &str {
        &self.query_id
    }

    pub fn day(&self) -> u32 {
        self.day
    }

    pub fn entries(&self) -> &[CandidateRecord] {
        &self.entries
    }

    pub fn into_entries(self) -> Vec<CandidateRecord> {
        self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn pool_size(&self) -> Option<usize> {
        self.pool_size
    }

    /// Known pool size, falling back to the list length.
    pub fn effective_pool_size(&self) -> usize {
        self.pool_size.unwrap_or(self.entries.len())
    }

    pub fn missing_count(&self) -> usize {
        self.missing_count
    }

    pub fn missing_rate(&self) -> f64 {
        if self.entries.is_empty() {
            0.0
        } else {
            self.missing_count as f64 / self.entries.len() as f64
        }
    }

    /// Group index per position (`None` = missing or unknown).
    pub fn group_indices(&self, scheme: &GroupScheme) -> Vec<Option<usize>> {
        self.entries.iter().map(|e| e.group_index(scheme)).collect()
    }

    /// Same snapshot with the entries replaced; metadata is kept.
    pub fn with_entries(&self, entries: Vec<CandidateRecord>) -> Result<Self> {
        Self::new(self.query_id.clone(), self.day, entries, self.pool_size)
    }
}

/// All snapshots for one query, keyed by ordinal day.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuerySeries {
    query_id: String,
    snapshots: BTreeMap<u32, RankingSnapshot>,
}

impl QuerySeries {
    pub fn new(query_id: impl Into<String>, snapshots: Vec<RankingSnapshot>) -> Result<Self> {
        let query_id = query_id.into();
        let mut map = BTreeMap::new();
        for s in snapshots {
            if s.query_id() != query_id {
                return Err(Error::InvalidSnapshot {
                    query_id: s.query_id().to_string(),
                    day: s.day(),
                    reason: format!("does not belong to series `{query_id}`"),
                });
            }
            let day = s.day();
            if map.insert(day, s).is_some() {
                return Err(Error::InvalidSnapshot {
                    query_id,
                    day,
                    reason: "day appears twice".into(),
                });
            }
        }
        Ok(Self {
            query_id,
            snapshots: map,
        })
    }

    pub fn query_id(&self) -> &str {
        &self.query_id
    }

    pub fn snapshots(&self) -> &BTreeMap<u32, RankingSnapshot> {
        &self.snapshots
    }

    pub fn get(&self, day: u32) -> Option<&RankingSnapshot> {
        self.snapshots.get(&day)
    }

    pub fn require(&self, day: u32) -> Result<&RankingSnapshot> {
        self.get(day).ok_or_else(|| Error::DayMissing {
            query_id: self.query_id.clone(),
            day,
        })
    }

    pub fn days(&self) -> impl Iterator<Item = u32> + '_ {
        self.snapshots.keys().copied()
    }

    /// Earliest observed snapshot.
    pub fn first(&self) -> Option<&RankingSnapshot> {
        self.snapshots.values().next()
    }
}

/// Where a set of target shares came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProportionSource {
    ObservedPool,
    ExternalBaseline,
}

/// Target shares `p*` per label of a scheme.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupProportions {
    scheme: GroupScheme,
    shares: Vec<f64>,
    source: ProportionSource,
    denominator: usize,
}

impl GroupProportions {
    /// Shares aligned with `scheme.labels()`.
    pub fn new(scheme: GroupScheme, shares: Vec<f64>, source: ProportionSource, denominator: usize) -> Result<Self> {
        if shares.len() != scheme.len() {
            return Err(Error::InvalidProportions(format!(
                "{} shares for {} labels",
                shares.len(),
                scheme.len()
            )));
        }
        if let Some(bad) = shares.iter().find(|s| !(0.0..=1.0).contains(*s)) {
            return Err(Error::InvalidProportions(format!("share {bad} outside [0, 1]")));
        }
        let total: f64 = shares.iter().sum();
        if (total - 1.0).abs() > SHARE_SUM_TOLERANCE {
            return Err(Error::InvalidProportions(format!("shares sum to {total}")));
        }
        Ok(Self {
            scheme,
            shares,
            source,
            denominator,
        })
    }

    /// External baseline from a label -> share map covering every label.
    pub fn external(scheme: GroupScheme, shares: &BTreeMap<String, f64>) -> Result<Self> {
        let mut aligned = Vec::with_capacity(scheme.len());
        for l in scheme.labels() {
            let s = shares
                .get(l)
                .copied()
                .ok_or_else(|| Error::LabelWithoutProportion(l.clone()))?;
            aligned.push(s);
        }
        if let Some(extra) = shares.keys().find(|k| scheme.index_of(k).is_none()) {
            return Err(Error::UnknownLabel(extra.clone()));
        }
        Self::new(scheme, aligned, ProportionSource::ExternalBaseline, 0)
    }

    /// Shares from raw per-label counts.
    pub fn from_counts(scheme: GroupScheme, counts: &[usize]) -> Result<Self> {
        let total: usize = counts.iter().sum();
        if total == 0 {
            return Err(Error::EmptyLabeledPool);
        }
        let shares = counts.iter().map(|&c| c as f64 / total as f64).collect();
        Self::new(scheme, shares, ProportionSource::ObservedPool, total)
    }

    pub fn scheme(&self) -> &GroupScheme {
        &self.scheme
    }

    pub fn shares(&self) -> &[f64] {
        &self.shares
    }

    pub fn share(&self, label: &str) -> Option<f64> {
        self.scheme.index_of(label).map(|i| self.shares[i])
    }

    pub fn source(&self) -> ProportionSource {
        self.source
    }

    pub fn denominator(&self) -> usize {
        self.denominator
    }

    pub fn as_map(&self) -> BTreeMap<String, f64> {
        self.scheme
            .labels()
            .iter()
            .cloned()
            .zip(self.shares.iter().copied())
            .collect()
    }
}

/// Group shares among labeled, non-missing entries in the first `max_rank`
/// positions (whole list when `None`).
pub fn observed_proportions(
    snapshot: &RankingSnapshot,
    scheme: &GroupScheme,
    max_rank: Option<usize>,
) -> Result<GroupProportions> {
    let end = max_rank.unwrap_or(snapshot.len()).min(snapshot.len());
    let mut counts = vec![0usize; scheme.len()];
    for e in &snapshot.entries()[..end] {
        if let Some(i) = e.group_index(scheme) {
            counts[i] += 1;
        }
    }
    GroupProportions::from_counts(scheme.clone(), &counts)
}
