//! Snapshot JSONL and baseline CSV ingestion.
//!
//! A snapshot file holds one JSON object per ranked entry:
//!
//! ```text
//! {"query_id":"q1","day":1,"rank":1,"candidate_id":"a","first_name":"ann","last_name":null,"groups":{"gender":"F"},"missing":false}
//! ```
//!
//! `pool_size` may be added to every row of a snapshot to record the size of
//! the retrieved pool. Loading never aborts on bad rows: unparseable lines are
//! reported and skipped, and snapshots failing integrity checks are
//! quarantined with the offending line numbers.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{CandidateRecord, GroupProportions, GroupScheme, QuerySeries, RankingSnapshot};

/// Tolerance on baseline share sums before renormalising.
pub const BASELINE_SUM_TOLERANCE: f64 = 1e-6;

/// Baseline rows with this query id apply to every query without its own row.
pub const ANY_QUERY: &str = "*";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SnapshotRow {
    pub query_id: String,
    pub day: u32,
    pub rank: usize,
    pub candidate_id: String,
    pub first_name: Option<String>,
    pub last_name: Option<String>,
    pub groups: Option<BTreeMap<String, String>>,
    pub missing: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pool_size: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LineIssue {
    pub line: usize,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuarantinedSnapshot {
    pub query_id: String,
    pub day: u32,
    pub rows: usize,
    pub issues: Vec<LineIssue>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MissingSummary {
    pub query_id: String,
    pub day: u32,
    pub entries: usize,
    pub missing: usize,
    pub missing_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ValidationReport {
    pub lines_read: usize,
    pub parse_errors: Vec<LineIssue>,
    pub quarantined: Vec<QuarantinedSnapshot>,
    /// Accepted snapshots only.
    pub missing: Vec<MissingSummary>,
}

impl ValidationReport {
    /// No parse errors and nothing quarantined.
    pub fn is_clean(&self) -> bool {
        self.parse_errors.is_empty() && self.quarantined.is_empty()
    }
}

/// Rows for a collection, ordered by query, day and rank.
pub fn dataset_rows(series: &[QuerySeries]) -> Vec<SnapshotRow> {
    let mut sorted: Vec<&QuerySeries> = series.iter().collect();
    sorted.sort_by(|a, b| a.query_id().cmp(b.query_id()));
    let mut rows = Vec::new();
    for s in sorted {
        for snap in s.snapshots().values() {
            for (i, e) in snap.entries().iter().enumerate() {
                rows.push(SnapshotRow {
                    query_id: snap.query_id().to_string(),
                    day: snap.day(),
                    rank: i + 1,
                    candidate_id: e.candidate_id.clone(),
                    first_name: e.first_name.clone(),
                    last_name: e.last_name.clone(),
                    groups: (!e.group_labels.is_empty()).then(|| e.group_labels.clone()),
                    missing: e.missing,
                    pool_size: snap.pool_size(),
                });
            }
        }
    }
    rows
}

pub fn write_dataset<W: Write>(series: &[QuerySeries], mut out: W) -> Result<()> {
    for row in dataset_rows(series) {
        let line = serde_json::to_string(&row).map_err(|e| Error::Io(e.to_string()))?;
        out.write_all(line.as_bytes())?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn write_dataset_path(series: &[QuerySeries], path: impl AsRef<Path>) -> Result<()> {
    let f = File::create(path)?;
    write_dataset(series, std::io::BufWriter::new(f))
}

struct Pending {
    rows: Vec<(usize, SnapshotRow)>,
}

fn integrity_issues(rows: &[(usize, SnapshotRow)]) -> Vec<LineIssue> {
    let mut issues = Vec::new();
    let mut ranks = HashMap::new();
    let mut ids = HashSet::new();
    for (line, r) in rows {
        let line = *line;
        if r.rank == 0 {
            issues.push(LineIssue {
                line,
                reason: "rank must be >= 1".into(),
            });
        } else if let Some(first) = ranks.insert(r.rank, line) {
            issues.push(LineIssue {
                line,
                reason: format!("duplicate rank {} (first at line {first})", r.rank),
            });
        }
        if !ids.insert(r.candidate_id.as_str()) {
            issues.push(LineIssue {
                line,
                reason: format!("duplicate candidate id `{}`", r.candidate_id),
            });
        }
        if r.missing && (r.first_name.is_some() || r.last_name.is_some() || r.groups.is_some()) {
            issues.push(LineIssue {
                line,
                reason: "missing entry carries names or groups".into(),
            });
        }
    }
    let n = rows.len();
    for (line, r) in rows {
        if r.rank > n {
            issues.push(LineIssue {
                line: *line,
                reason: format!("rank gap: rank {} in a list of {n} entries", r.rank),
            });
        }
    }
    let pools: HashSet<Option<usize>> = rows.iter().map(|(_, r)| r.pool_size).collect();
    if pools.len() > 1 {
        issues.push(LineIssue {
            line: rows[0].0,
            reason: "pool_size differs between rows of one snapshot".into(),
        });
    }
    issues.sort_by_key(|i| i.line);
    issues
}

fn assemble(query_id: &str, day: u32, mut rows: Vec<(usize, SnapshotRow)>) -> std::result::Result<RankingSnapshot, Vec<LineIssue>> {
    let issues = integrity_issues(&rows);
    if !issues.is_empty() {
        return Err(issues);
    }
    rows.sort_by_key(|(_, r)| r.rank);
    let first_line = rows[0].0;
    let pool_size = rows[0].1.pool_size;
    let entries = rows
        .into_iter()
        .map(|(_, r)| CandidateRecord {
            candidate_id: r.candidate_id,
            first_name: r.first_name,
            last_name: r.last_name,
            group_labels: r.groups.unwrap_or_default(),
            missing: r.missing,
        })
        .collect();
    RankingSnapshot::new(query_id, day, entries, pool_size).map_err(|e| {
        vec![LineIssue {
            line: first_line,
            reason: e.to_string(),
        }]
    })
}

/// Reads snapshot JSONL. Only I/O failures (including invalid UTF-8) are
/// errors; everything else lands in the report.
pub fn load_dataset<R: BufRead>(reader: R) -> Result<(Vec<QuerySeries>, ValidationReport)> {
    let mut report = ValidationReport::default();
    let mut pending: BTreeMap<(String, u32), Pending> = BTreeMap::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        let lineno = i + 1;
        report.lines_read = lineno;
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<SnapshotRow>(&line) {
            Ok(row) => pending
                .entry((row.query_id.clone(), row.day))
                .or_insert_with(|| Pending { rows: Vec::new() })
                .rows
                .push((lineno, row)),
            Err(e) => report.parse_errors.push(LineIssue {
                line: lineno,
                reason: e.to_string(),
            }),
        }
    }

    let mut by_query: BTreeMap<String, Vec<RankingSnapshot>> = BTreeMap::new();
    for ((query_id, day), p) in pending {
        let n = p.rows.len();
        match assemble(&query_id, day, p.rows) {
            Ok(snap) => {
                report.missing.push(MissingSummary {
                    query_id: query_id.clone(),
                    day,
                    entries: snap.len(),
                    missing: snap.missing_count(),
                    missing_rate: snap.missing_rate(),
                });
                by_query.entry(query_id).or_default().push(snap);
            }
            Err(issues) => {
                log::warn!("quarantined {query_id}/day {day}: {} issue(s)", issues.len());
                report.quarantined.push(QuarantinedSnapshot {
                    query_id,
                    day,
                    rows: n,
                    issues,
                });
            }
        }
    }
    let series = by_query
        .into_iter()
        .map(|(q, snaps)| QuerySeries::new(q, snaps))
        .collect::<Result<Vec<_>>>()?;
    Ok((series, report))
}

pub fn load_dataset_path(path: impl AsRef<Path>) -> Result<(Vec<QuerySeries>, ValidationReport)> {
    let f = File::open(path)?;
    load_dataset(BufReader::new(f))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterDecision {
    pub query_id: String,
    pub kept: bool,
    pub missing_rate: f64,
    pub pool_size: usize,
    pub reason: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct FilterManifest {
    pub decisions: Vec<FilterDecision>,
}

impl FilterManifest {
    pub fn kept(&self) -> impl Iterator<Item = &str> {
        self.decisions.iter().filter(|d| d.kept).map(|d| d.query_id.as_str())
    }

    pub fn dropped(&self) -> impl Iterator<Item = &FilterDecision> {
        self.decisions.iter().filter(|d| !d.kept)
    }
}

/// Keeps series whose earliest snapshot has `missing_rate <= max_missing_rate`
/// and `pool >= min_pool`, where the pool is the recorded pool size or the
/// list length when none was recorded.
pub fn filter_queries(
    series: Vec<QuerySeries>,
    max_missing_rate: f64,
    min_pool: usize,
) -> Result<(Vec<QuerySeries>, FilterManifest)> {
    if !(0.0..=1.0).contains(&max_missing_rate) {
        return Err(Error::InvalidConfig(format!(
            "max missing rate {max_missing_rate} outside [0, 1]"
        )));
    }
    let mut manifest = FilterManifest::default();
    let mut kept = Vec::new();
    for s in series {
        let (rate, pool) = s
            .first()
            .map_or((0.0, 0), |f| (f.missing_rate(), f.effective_pool_size()));
        let reason = if s.first().is_none() {
            Some("no snapshots".to_string())
        } else if rate > max_missing_rate {
            Some(format!("missing rate {rate} above {max_missing_rate}"))
        } else if pool < min_pool {
            Some(format!("pool {pool} below {min_pool}"))
        } else {
            None
        };
        manifest.decisions.push(FilterDecision {
            query_id: s.query_id().to_string(),
            kept: reason.is_none(),
            missing_rate: rate,
            pool_size: pool,
            reason: reason.clone(),
        });
        if reason.is_none() {
            kept.push(s);
        }
    }
    Ok((kept, manifest))
}

#[derive(Debug, Deserialize)]
struct BaselineRow {
    query_id: String,
    attribute: String,
    label: String,
    share: f64,
}

/// External baseline proportions per query for one scheme, from CSV
/// `query_id,attribute,label,share`. Rows for other attributes are ignored.
/// Shares summing to 1 within `BASELINE_SUM_TOLERANCE` are renormalised.
#[derive(Debug, Clone, PartialEq)]
pub struct Baselines {
    by_query: BTreeMap<String, GroupProportions>,
}

impl Baselines {
    pub fn get(&self, query_id: &str) -> Option<&GroupProportions> {
        self.by_query.get(query_id).or_else(|| self.by_query.get(ANY_QUERY))
    }

    pub fn require(&self, query_id: &str) -> Result<&GroupProportions> {
        self.get(query_id)
            .ok_or_else(|| Error::InvalidProportions(format!("no baseline for query `{query_id}`")))
    }

    pub fn queries(&self) -> impl Iterator<Item = &str> {
        self.by_query.keys().map(String::as_str)
    }
}

pub fn load_baselines<R: Read>(source: R, scheme: &GroupScheme) -> Result<Baselines> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(source);
    let mut raw: BTreeMap<String, BTreeMap<String, f64>> = BTreeMap::new();
    for (i, rec) in rdr.deserialize::<BaselineRow>().enumerate() {
        // header is line 1
        let line = i + 2;
        let row = rec.map_err(|e| Error::MalformedRow {
            line,
            reason: e.to_string(),
        })?;
        if row.attribute != scheme.attribute() {
            continue;
        }
        if scheme.index_of(&row.label).is_none() {
            return Err(Error::UnknownLabel(row.label));
        }
        if !row.share.is_finite() || !(0.0..=1.0).contains(&row.share) {
            return Err(Error::MalformedRow {
                line,
                reason: format!("share {} outside [0, 1]", row.share),
            });
        }
        let shares = raw.entry(row.query_id.clone()).or_default();
        if shares.insert(row.label.clone(), row.share).is_some() {
            return Err(Error::MalformedRow {
                line,
                reason: format!("repeated label `{}` for query `{}`", row.label, row.query_id),
            });
        }
    }
    let mut by_query = BTreeMap::new();
    for (q, mut shares) in raw {
        let total: f64 = shares.values().sum();
        if (total - 1.0).abs() > BASELINE_SUM_TOLERANCE {
            return Err(Error::InvalidProportions(format!(
                "baseline shares for `{q}` sum to {total}"
            )));
        }
        for v in shares.values_mut() {
            *v /= total;
        }
        by_query.insert(q, GroupProportions::external(scheme.clone(), &shares)?);
    }
    Ok(Baselines { by_query })
}
