//! Dataset-level audits and every emitted table: long-format metric rows,
//! churn rows, protocol tables, heatmap matrices and the simulator ledger.
//!
//! Reals are written with [`format_real`]; CSV is LF-terminated and quoted
//! only where needed. Rows are sorted by query, day and cutoff, so output is
//! independent of how the work was scheduled.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::{BufRead, Read, Write};
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize, Serializer};

use crate::churn::{churn_grid, consecutive_pairs, pairs_from_first, ChurnCell};
use crate::error::{Error, Result};
use crate::exposure::{corrected_skew_curve, deviation_curve, full_grid, min_skew_curve, skew_curve, MetricCurve, MetricKind};
use crate::format::{format_real, Cell};
use crate::ingest::Baselines;
use crate::model::{observed_proportions, GroupProportions, GroupScheme, QuerySeries, RankingSnapshot};
use crate::sim::{GroundTruth, LedgerRecord};
use crate::stats::ProtocolReport;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OutputFormat {
    #[default]
    Csv,
    Json,
}

impl FromStr for OutputFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(Self::Csv),
            "json" => Ok(Self::Json),
            other => Err(Error::InvalidConfig(format!("unknown format `{other}`"))),
        }
    }
}

impl fmt::Display for OutputFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Csv => "csv",
            Self::Json => "json",
        })
    }
}

/// Real rounded to the export precision. Non-finite values become strings.
struct JsonReal(f64);

impl Serialize for JsonReal {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let text = format_real(self.0);
        match text.parse::<f64>() {
            Ok(v) if v.is_finite() => s.serialize_f64(v),
            _ => s.serialize_str(&text),
        }
    }
}

/// Defined cells as numbers, undefined as `null`, `-inf` as a string.
struct JsonCell(Cell);

impl Serialize for JsonCell {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self.0 {
            Cell::Value(v) => JsonReal(v).serialize(s),
            Cell::Undefined => s.serialize_none(),
            Cell::NegInfinite => s.serialize_str("-inf"),
        }
    }
}

fn csv_writer<W: Write>(out: W) -> csv::Writer<W> {
    csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(out)
}

fn write_json<W: Write, T: Serialize>(value: &T, mut out: W) -> Result<()> {
    serde_json::to_writer_pretty(&mut out, value).map_err(|e| Error::Io(e.to_string()))?;
    out.write_all(b"\n")?;
    out.flush()?;
    Ok(())
}

/// Where per-snapshot target shares come from.
#[derive(Debug, Clone, Copy)]
pub enum Targets<'a> {
    /// Shares of the snapshot's own labeled list.
    ObservedPool,
    Baseline(&'a Baselines),
}

impl Targets<'_> {
    pub fn for_snapshot(&self, snapshot: &RankingSnapshot, scheme: &GroupScheme) -> Result<GroupProportions> {
        match self {
            Targets::ObservedPool => observed_proportions(snapshot, scheme, None),
            Targets::Baseline(b) => b.require(snapshot.query_id()).cloned(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SkippedSnapshot {
    pub query_id: String,
    pub day: u32,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct AuditOutput {
    pub curves: Vec<MetricCurve>,
    pub skipped: Vec<SkippedSnapshot>,
}

fn audit_snapshot(
    snap: &RankingSnapshot,
    scheme: &GroupScheme,
    targets: Targets<'_>,
    k_grid: Option<&[usize]>,
) -> Result<Vec<MetricCurve>> {
    let props = targets.for_snapshot(snap, scheme)?;
    let full;
    let ks = match k_grid {
        Some(ks) => ks,
        None => {
            full = full_grid(snap.len());
            &full
        }
    };
    let mut out = Vec::with_capacity(3 * scheme.len() + 1);
    for label in scheme.labels() {
        out.push(deviation_curve(snap, scheme, &props, label, ks)?);
        out.push(skew_curve(snap, scheme, &props, label, ks)?);
        out.push(corrected_skew_curve(snap, scheme, &props, label, ks)?);
    }
    out.push(min_skew_curve(snap, scheme, &props, ks)?);
    Ok(out)
}

/// Deviation, skew and corrected skew per label plus MinSkew for every
/// snapshot, over `k_grid` or every cutoff of each list when `None`.
/// Snapshots whose targets or metrics cannot be formed are skipped and listed.
pub fn audit_dataset(
    series: &[QuerySeries],
    scheme: &GroupScheme,
    targets: Targets<'_>,
    k_grid: Option<&[usize]>,
) -> AuditOutput {
    let snaps: Vec<&RankingSnapshot> = series.iter().flat_map(|s| s.snapshots().values()).collect();
    let results: Vec<_> = snaps
        .par_iter()
        .map(|snap| audit_snapshot(snap, scheme, targets, k_grid))
        .collect();
    let mut out = AuditOutput::default();
    for (snap, r) in snaps.iter().zip(results) {
        match r {
            Ok(c) => out.curves.extend(c),
            Err(e) => out.skipped.push(SkippedSnapshot {
                query_id: snap.query_id().to_string(),
                day: snap.day(),
                reason: e.to_string(),
            }),
        }
    }
    out.skipped.sort_by(|a, b| (&a.query_id, a.day).cmp(&(&b.query_id, b.day)));
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DayPairs {
    /// First observed day against every later day.
    #[default]
    FromFirst,
    Consecutive,
}

/// Churn cells for every series. A `k` beyond a list yields undefined cells.
pub fn churn_dataset(series: &[QuerySeries], scheme: &GroupScheme, k_grid: &[usize], pairs: DayPairs) -> Result<Vec<ChurnCell>> {
    let grids: Vec<Result<Vec<ChurnCell>>> = series
        .par_iter()
        .map(|s| {
            let p = match pairs {
                DayPairs::FromFirst => pairs_from_first(s),
                DayPairs::Consecutive => consecutive_pairs(s),
            };
            churn_grid(s, scheme, k_grid, &p)
        })
        .collect();
    let mut cells = Vec::new();
    for g in grids {
        cells.extend(g?);
    }
    Ok(cells)
}

/// One long-format row: `query_id,day,attribute,label,k,metric,value`.
/// `label` is empty for MinSkew.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub query_id: String,
    pub day: u32,
    pub attribute: String,
    pub label: String,
    pub k: usize,
    pub metric: MetricKind,
    pub value: Cell,
}

pub const METRIC_HEADER: [&str; 7] = ["query_id", "day", "attribute", "label", "k", "metric", "value"];

impl MetricRow {
    fn sort_key(&self) -> (&str, u32, usize, MetricKind, &str) {
        (&self.query_id, self.day, self.k, self.metric, &self.label)
    }
}

/// Flattens curves into rows ordered by query, day, k, metric and label.
pub fn curve_rows(curves: &[MetricCurve]) -> Vec<MetricRow> {
    let mut rows: Vec<MetricRow> = curves
        .iter()
        .flat_map(|c| {
            c.values.iter().map(move |(&k, &value)| MetricRow {
                query_id: c.query_id.clone(),
                day: c.day,
                attribute: c.attribute.clone(),
                label: c.label.clone().unwrap_or_default(),
                k,
                metric: c.metric,
                value,
            })
        })
        .collect();
    rows.sort_by(|a, b| a.sort_key().cmp(&b.sort_key()));
    rows
}

#[derive(Serialize)]
struct MetricRowJson<'a> {
    query_id: &'a str,
    day: u32,
    attribute: &'a str,
    label: &'a str,
    k: usize,
    metric: &'a str,
    value: JsonCell,
}

pub fn write_metric_rows<W: Write>(rows: &[MetricRow], format: OutputFormat, out: W) -> Result<()> {
    match format {
        OutputFormat::Csv => {
            let mut w = csv_writer(out);
            w.write_record(METRIC_HEADER)?;
            for r in rows {
                w.write_record([
                    r.query_id.clone(),
                    r.day.to_string(),
                    r.attribute.clone(),
                    r.label.clone(),
                    r.k.to_string(),
                    r.metric.to_string(),
                    r.value.render(),
                ])?;
            }
            w.flush()?;
            Ok(())
        }
        OutputFormat::Json => {
            let v: Vec<_> = rows
                .iter()
                .map(|r| MetricRowJson {
                    query_id: &r.query_id,
                    day: r.day,
                    attribute: &r.attribute,
                    label: &r.label,
                    k: r.k,
                    metric: r.metric.as_str(),
                    value: JsonCell(r.value),
                })
                .collect();
            write_json(&v, out)
        }
    }
}

fn field(rec: &csv::StringRecord, i: usize, line: usize) -> Result<&str> {
    rec.get(i).ok_or_else(|| Error::MalformedRow {
        line,
        reason: format!("missing column {}", i + 1),
    })
}

fn parse_field<T: FromStr>(rec: &csv::StringRecord, i: usize, line: usize) -> Result<T>
where
    T::Err: fmt::Display,
{
    let s = field(rec, i, line)?;
    s.parse().map_err(|e: T::Err| Error::MalformedRow {
        line,
        reason: format!("`{s}`: {e}"),
    })
}

/// Parses long-format CSV written by [`write_metric_rows`].
pub fn read_metric_rows<R: Read>(source: R) -> Result<Vec<MetricRow>> {
    let mut rdr = csv::Reader::from_reader(source);
    if rdr.headers()?.iter().ne(METRIC_HEADER) {
        return Err(Error::MalformedRow {
            line: 1,
            reason: format!("expected header {}", METRIC_HEADER.join(",")),
        });
    }
    let mut rows = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let line = i + 2;
        let rec = rec?;
        let metric = field(&rec, 5, line)?;
        rows.push(MetricRow {
            query_id: field(&rec, 0, line)?.to_string(),
            day: parse_field(&rec, 1, line)?,
            attribute: field(&rec, 2, line)?.to_string(),
            label: field(&rec, 3, line)?.to_string(),
            k: parse_field(&rec, 4, line)?,
            metric: MetricKind::parse(metric).ok_or_else(|| Error::MalformedRow {
                line,
                reason: format!("unknown metric `{metric}`"),
            })?,
            value: parse_field(&rec, 6, line)?,
        });
    }
    Ok(rows)
}

pub const CHURN_HEADER: [&str; 8] = ["query_id", "attribute", "label", "k", "metric", "value", "start_day", "end_day"];

fn sorted_churn(cells: &[ChurnCell]) -> Vec<&ChurnCell> {
    let mut v: Vec<&ChurnCell> = cells.iter().collect();
    v.sort_by(|a, b| {
        (&a.query_id, a.start_day, a.end_day, a.k, &a.label).cmp(&(&b.query_id, b.start_day, b.end_day, b.k, &b.label))
    });
    v
}

fn churn_value(c: &ChurnCell) -> Cell {
    c.churn.map_or(Cell::Undefined, Cell::Value)
}

#[derive(Serialize)]
struct ChurnRowJson<'a> {
    query_id: &'a str,
    attribute: &'a str,
    label: &'a str,
    k: usize,
    metric: &'static str,
    value: JsonCell,
    start_day: u32,
    end_day: u32,
}

/// Churn cells as long-format rows, ordered by query, day pair, k and label.
pub fn write_churn_rows<W: Write>(cells: &[ChurnCell], format: OutputFormat, out: W) -> Result<()> {
    let cells = sorted_churn(cells);
    match format {
        OutputFormat::Csv => {
            let mut w = csv_writer(out);
            w.write_record(CHURN_HEADER)?;
            for c in cells {
                w.write_record([
                    c.query_id.clone(),
                    c.attribute.clone(),
                    c.label.clone(),
                    c.k.to_string(),
                    MetricKind::Churn.to_string(),
                    churn_value(c).render(),
                    c.start_day.to_string(),
                    c.end_day.to_string(),
                ])?;
            }
            w.flush()?;
            Ok(())
        }
        OutputFormat::Json => {
            let v: Vec<_> = cells
                .iter()
                .map(|c| ChurnRowJson {
                    query_id: &c.query_id,
                    attribute: &c.attribute,
                    label: &c.label,
                    k: c.k,
                    metric: MetricKind::Churn.as_str(),
                    value: JsonCell(churn_value(c)),
                    start_day: c.start_day,
                    end_day: c.end_day,
                })
                .collect();
            write_json(&v, out)
        }
    }
}

pub const PROTOCOL_HEADER: [&str; 8] = ["k", "coef", "estimate", "se", "z", "p", "ci_lo", "ci_hi"];

#[derive(Serialize)]
struct ProtocolRowJson<'a> {
    k: usize,
    coef: &'a str,
    estimate: JsonReal,
    se: JsonReal,
    z: JsonReal,
    p: JsonReal,
    ci_lo: JsonReal,
    ci_hi: JsonReal,
}

pub fn write_protocol<W: Write>(report: &ProtocolReport, format: OutputFormat, out: W) -> Result<()> {
    match format {
        OutputFormat::Csv => {
            let mut w = csv_writer(out);
            w.write_record(PROTOCOL_HEADER)?;
            for r in &report.rows {
                w.write_record([
                    r.k.to_string(),
                    r.coef.clone(),
                    format_real(r.estimate),
                    format_real(r.se),
                    format_real(r.z),
                    format_real(r.p),
                    format_real(r.ci_lo),
                    format_real(r.ci_hi),
                ])?;
            }
            w.flush()?;
            Ok(())
        }
        OutputFormat::Json => {
            let v: Vec<_> = report
                .rows
                .iter()
                .map(|r| ProtocolRowJson {
                    k: r.k,
                    coef: &r.coef,
                    estimate: JsonReal(r.estimate),
                    se: JsonReal(r.se),
                    z: JsonReal(r.z),
                    p: JsonReal(r.p),
                    ci_lo: JsonReal(r.ci_lo),
                    ci_hi: JsonReal(r.ci_hi),
                })
                .collect();
            write_json(&v, out)
        }
    }
}

/// Rectangular matrix for heatmaps: one row per query (or day pair), one
/// column per cutoff.
#[derive(Debug, Clone, PartialEq)]
pub struct HeatmapMatrix {
    pub rows: Vec<String>,
    pub ks: Vec<usize>,
    pub cells: Vec<Vec<Cell>>,
}

pub const MATRIX_CORNER: &str = "row";

impl HeatmapMatrix {
    /// Every row must carry exactly the same cutoffs.
    pub fn new(rows: Vec<(String, BTreeMap<usize, Cell>)>) -> Result<Self> {
        let Some((_, first)) = rows.first() else {
            return Err(Error::InconsistentGrid("no rows".into()));
        };
        let ks: Vec<usize> = first.keys().copied().collect();
        let mut seen = BTreeSet::new();
        let mut names = Vec::with_capacity(rows.len());
        let mut cells = Vec::with_capacity(rows.len());
        for (name, values) in rows {
            if !values.keys().copied().eq(ks.iter().copied()) {
                return Err(Error::InconsistentGrid(format!("row `{name}` has a different k-grid")));
            }
            if !seen.insert(name.clone()) {
                return Err(Error::InconsistentGrid(format!("row `{name}` appears twice")));
            }
            cells.push(values.into_values().collect());
            names.push(name);
        }
        Ok(Self { rows: names, ks, cells })
    }

    /// Rows are `query_id`, or `query_id@day` when the curves span several
    /// days. All curves must share one metric and label.
    pub fn from_curves(curves: &[&MetricCurve]) -> Result<Self> {
        let Some(first) = curves.first() else {
            return Err(Error::InconsistentGrid("no curves".into()));
        };
        if curves.iter().any(|c| c.metric != first.metric || c.label != first.label) {
            return Err(Error::InconsistentGrid("curves mix metrics or labels".into()));
        }
        let one_day = curves.iter().all(|c| c.day == first.day);
        let mut sorted = curves.to_vec();
        sorted.sort_by(|a, b| (&a.query_id, a.day).cmp(&(&b.query_id, b.day)));
        Self::new(
            sorted
                .into_iter()
                .map(|c| {
                    let name = if one_day {
                        c.query_id.clone()
                    } else {
                        format!("{}@{}", c.query_id, c.day)
                    };
                    (name, c.values.clone())
                })
                .collect(),
        )
    }

    /// Rows are day pairs `start-end` for one label, prefixed by `query_id:`
    /// when the cells span several queries.
    pub fn from_churn(cells: &[ChurnCell], label: &str) -> Result<Self> {
        let picked: Vec<&ChurnCell> = cells.iter().filter(|c| c.label == label).collect();
        let one_query = picked.windows(2).all(|w| w[0].query_id == w[1].query_id);
        let mut rows: BTreeMap<(String, u32, u32), BTreeMap<usize, Cell>> = BTreeMap::new();
        for c in picked {
            let slot = rows.entry((c.query_id.clone(), c.start_day, c.end_day)).or_default();
            if slot.insert(c.k, churn_value(c)).is_some() {
                return Err(Error::InconsistentGrid(format!(
                    "k={} repeated for {}:{}-{}",
                    c.k, c.query_id, c.start_day, c.end_day
                )));
            }
        }
        Self::new(
            rows.into_iter()
                .map(|((q, s, e), v)| {
                    let name = if one_query {
                        format!("{s}-{e}")
                    } else {
                        format!("{q}:{s}-{e}")
                    };
                    (name, v)
                })
                .collect(),
        )
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv_writer(out);
        let mut header = vec![MATRIX_CORNER.to_string()];
        header.extend(self.ks.iter().map(usize::to_string));
        w.write_record(&header)?;
        for (name, row) in self.rows.iter().zip(&self.cells) {
            let mut rec = vec![name.clone()];
            rec.extend(row.iter().map(|c| c.render_matrix()));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    /// CSV matrix, or JSON `{rows, ks, cells}` with cells as in the long format.
    pub fn write<W: Write>(&self, format: OutputFormat, out: W) -> Result<()> {
        #[derive(Serialize)]
        struct Matrix<'a> {
            rows: &'a [String],
            ks: &'a [usize],
            cells: Vec<Vec<JsonCell>>,
        }
        match format {
            OutputFormat::Csv => self.write_csv(out),
            OutputFormat::Json => write_json(
                &Matrix {
                    rows: &self.rows,
                    ks: &self.ks,
                    cells: self.cells.iter().map(|r| r.iter().map(|&c| JsonCell(c)).collect()).collect(),
                },
                out,
            ),
        }
    }

    pub fn read_csv<R: Read>(source: R) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(source);
        let header = rdr.headers()?.clone();
        if header.get(0) != Some(MATRIX_CORNER) {
            return Err(Error::MalformedRow {
                line: 1,
                reason: format!("first header cell must be `{MATRIX_CORNER}`"),
            });
        }
        let ks = (1..header.len())
            .map(|i| parse_field::<usize>(&header, i, 1))
            .collect::<Result<Vec<_>>>()?;
        let mut rows = Vec::new();
        for (i, rec) in rdr.records().enumerate() {
            let line = i + 2;
            let rec = rec?;
            let name = field(&rec, 0, line)?.to_string();
            let values = ks
                .iter()
                .enumerate()
                .map(|(j, &k)| Ok((k, parse_field::<Cell>(&rec, j + 1, line)?)))
                .collect::<Result<BTreeMap<_, _>>>()?;
            rows.push((name, values));
        }
        Self::new(rows)
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows.len(), self.ks.len())
    }
}

pub fn write_ledger<W: Write>(ledger: &GroundTruth, mut out: W) -> Result<()> {
    for r in &ledger.records {
        let line = serde_json::to_string(r).map_err(|e| Error::Io(e.to_string()))?;
        out.write_all(line.as_bytes())?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_ledger<R: BufRead>(source: R) -> Result<GroundTruth> {
    let mut records = Vec::new();
    for (i, line) in source.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let r: LedgerRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: i + 1,
            reason: e.to_string(),
        })?;
        records.push(r);
    }
    Ok(GroundTruth { records })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::CandidateRecord;
    use crate::stats::ProtocolRow;

    fn snap(q: &str, day: u32, labels: &str) -> RankingSnapshot {
        let entries = labels
            .chars()
            .enumerate()
            .map(|(i, l)| match l {
                '-' => CandidateRecord::anonymous(format!("{q}{i}")),
                l => CandidateRecord::new(format!("{q}{i}")).with_label("gender", l.to_string()),
            })
            .collect();
        RankingSnapshot::new(q, day, entries, None).unwrap()
    }

    fn dataset() -> Vec<QuerySeries> {
        vec![
            QuerySeries::new("b", vec![snap("b", 1, "FMMF"), snap("b", 2, "MMFF")]).unwrap(),
            QuerySeries::new("a", vec![snap("a", 1, "MMMF")]).unwrap(),
        ]
    }

    fn csv_text(rows: &[MetricRow]) -> String {
        let mut buf = Vec::new();
        write_metric_rows(rows, OutputFormat::Csv, &mut buf).unwrap();
        String::from_utf8(buf).unwrap()
    }

    #[test]
    fn audit_rows_are_sorted_and_reparse() {
        let g = GroupScheme::binary_gender();
        let out = audit_dataset(&dataset(), &g, Targets::ObservedPool, None);
        assert!(out.skipped.is_empty());
        // 3 snapshots x (3 per label x 2 labels + minskew)
        assert_eq!(out.curves.len(), 21);
        let rows = curve_rows(&out.curves);
        assert_eq!(rows.len(), 21 * 4);
        assert_eq!(rows[0].query_id, "a");
        assert_eq!((rows[0].k, rows[0].metric, rows[0].label.as_str()), (1, MetricKind::Deviation, "F"));
        let text = csv_text(&rows);
        assert!(text.starts_with("query_id,day,attribute,label,k,metric,value\na,1,gender,F,1,deviation,0.25\n"));
        assert!(text.contains("a,1,gender,F,1,skew,-inf\n"));
        assert!(text.contains("a,1,gender,,1,minskew,-inf\n"));
        assert!(!text.contains('\r'));
        let back = read_metric_rows(text.as_bytes()).unwrap();
        assert_eq!(csv_text(&back), text);
    }

    #[test]
    fn skipped_snapshots_are_listed() {
        let g = GroupScheme::binary_gender();
        let all_missing = vec![QuerySeries::new("z", vec![snap("z", 1, "--")]).unwrap()];
        let out = audit_dataset(&all_missing, &g, Targets::ObservedPool, None);
        assert!(out.curves.is_empty());
        assert_eq!(out.skipped.len(), 1);
        assert_eq!(out.skipped[0].query_id, "z");
    }

    #[test]
    fn json_cells() {
        let rows = vec![
            MetricRow {
                query_id: "q".into(),
                day: 1,
                attribute: "gender".into(),
                label: "F".into(),
                k: 1,
                metric: MetricKind::Skew,
                value: Cell::Value(1.0 / 3.0),
            },
            MetricRow {
                value: Cell::Undefined,
                k: 2,
                ..rows_template()
            },
            MetricRow {
                value: Cell::NegInfinite,
                k: 3,
                ..rows_template()
            },
        ];
        let mut buf = Vec::new();
        write_metric_rows(&rows, OutputFormat::Json, &mut buf).unwrap();
        let v: serde_json::Value = serde_json::from_slice(&buf).unwrap();
        assert_eq!(v[0]["value"], serde_json::json!(0.3333333333));
        assert!(v[1]["value"].is_null());
        assert_eq!(v[2]["value"], "-inf");
    }

    fn rows_template() -> MetricRow {
        MetricRow {
            query_id: "q".into(),
            day: 1,
            attribute: "gender".into(),
            label: "F".into(),
            k: 0,
            metric: MetricKind::Skew,
            value: Cell::Undefined,
        }
    }

    #[test]
    fn single_curve_matrix() {
        let g = GroupScheme::binary_gender();
        let out = audit_dataset(&dataset()[1..], &g, Targets::ObservedPool, Some(&[1, 2, 4, 8]));
        let skew_f: Vec<&MetricCurve> = out
            .curves
            .iter()
            .filter(|c| c.metric == MetricKind::Skew && c.label.as_deref() == Some("F"))
            .collect();
        let m = HeatmapMatrix::from_curves(&skew_f).unwrap();
        assert_eq!(m.shape(), (1, 4));
        let mut buf = Vec::new();
        m.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let want = format!("row,1,2,4,8\na,-inf,-inf,{},\n", format_real((0.5f64 / 0.5).ln()));
        assert_eq!(text, want);
        assert_eq!(HeatmapMatrix::read_csv(text.as_bytes()).unwrap(), m);

        let mut json = Vec::new();
        m.write(OutputFormat::Json, &mut json).unwrap();
        let v: serde_json::Value = serde_json::from_slice(&json).unwrap();
        assert_eq!(v["cells"][0], serde_json::json!(["-inf", "-inf", 0.0, null]));
        assert_eq!(v["ks"], serde_json::json!([1, 2, 4, 8]));
    }

    #[test]
    fn churn_matrix_shape() {
        let g = GroupScheme::binary_gender();
        let ids: Vec<String> = (0..40).map(|i| format!("c{i}")).collect();
        let snaps = (1..=9u32)
            .map(|d| {
                let entries = (0..20)
                    .map(|j| {
                        let id = &ids[(j + d as usize) % 40];
                        CandidateRecord::new(id.clone()).with_label("gender", if j % 2 == 0 { "F" } else { "M" })
                    })
                    .collect();
                RankingSnapshot::new("q", d, entries, None).unwrap()
            })
            .collect();
        let s = QuerySeries::new("q", snaps).unwrap();
        let ks = [1, 2, 3, 5, 8, 10, 15, 20];
        let cells = churn_dataset(&[s], &g, &ks, DayPairs::FromFirst).unwrap();
        let m = HeatmapMatrix::from_churn(&cells, "F").unwrap();
        assert_eq!(m.shape(), (8, 8));
        assert_eq!(m.rows[0], "1-2");
        let mut buf = Vec::new();
        m.write_csv(&mut buf).unwrap();
        let back = HeatmapMatrix::read_csv(&buf[..]).unwrap();
        for (r, row) in back.cells.iter().enumerate() {
            for (c, cell) in row.iter().enumerate() {
                let orig = m.cells[r][c];
                assert_eq!(cell.render(), orig.render());
            }
        }
    }

    #[test]
    fn ragged_grid_rejected() {
        let a: BTreeMap<usize, Cell> = [(1, Cell::Value(0.1)), (2, Cell::Undefined)].into();
        let b: BTreeMap<usize, Cell> = [(1, Cell::Value(0.1))].into();
        assert!(matches!(
            HeatmapMatrix::new(vec![("a".into(), a.clone()), ("b".into(), b)]),
            Err(Error::InconsistentGrid(_))
        ));
        assert!(matches!(
            HeatmapMatrix::new(vec![("a".into(), a.clone()), ("a".into(), a)]),
            Err(Error::InconsistentGrid(_))
        ));
    }

    #[test]
    fn protocol_table() {
        let report = ProtocolReport {
            rows: vec![ProtocolRow {
                k: 25,
                coef: "intercept".into(),
                estimate: -0.36,
                se: 0.03,
                z: -11.633333333333333,
                p: 2.8e-31,
                ci_lo: -0.4188,
                ci_hi: -0.3012,
            }],
            summaries: vec![],
        };
        let mut buf = Vec::new();
        write_protocol(&report, OutputFormat::Csv, &mut buf).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "k,coef,estimate,se,z,p,ci_lo,ci_hi\n25,intercept,-0.36,0.03,-11.63333333,2.8e-31,-0.4188,-0.3012\n"
        );
    }

    #[test]
    fn ledger_round_trip() {
        let ledger = GroundTruth {
            records: vec![
                LedgerRecord::Departure {
                    query_id: "q".into(),
                    candidate_id: "c".into(),
                    day: 2,
                },
                LedgerRecord::Query {
                    query_id: "q".into(),
                    shares: [("F".to_string(), 0.25), ("M".to_string(), 0.75)].into(),
                    pool_size: 10,
                },
            ],
        };
        let mut buf = Vec::new();
        write_ledger(&ledger, &mut buf).unwrap();
        assert!(String::from_utf8_lossy(&buf).starts_with(r#"{"kind":"departure""#));
        assert_eq!(read_ledger(&buf[..]).unwrap(), ledger);
    }
}
