//! Name-based group labels from offline frequency tables.
//!
//! Tables are consulted in chain order; the first table that knows a name
//! decides it, and later tables only see names every earlier table lacks.
//! Equal top counts resolve to the scheme's unknown label.

use std::collections::{BTreeMap, HashMap};
use std::io::{Read, Write};

use serde::Deserialize;

use crate::error::{Error, Result};
use crate::model::{GroupScheme, RankingSnapshot};

/// Lookup key normalization: trimmed, lowercased.
pub fn normalize_name(name: &str) -> String {
    name.trim().to_lowercase()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NameFrequencyTable {
    scheme: GroupScheme,
    entries: HashMap<String, BTreeMap<String, u64>>,
}

#[derive(Deserialize)]
struct NameRow {
    name: String,
    label: String,
    count: String,
}

impl NameFrequencyTable {
    pub fn new(scheme: GroupScheme) -> Self {
        Self {
            scheme,
            entries: HashMap::new(),
        }
    }

    /// Adds `count` occurrences of `name` under `label`.
    pub fn add(&mut self, name: &str, label: &str, count: u64) -> Result<()> {
        if self.scheme.index_of(label).is_none() {
            return Err(Error::UnknownLabel(label.to_string()));
        }
        if count == 0 {
            return Ok(());
        }
        *self
            .entries
            .entry(normalize_name(name))
            .or_default()
            .entry(label.to_string())
            .or_default() += count;
        Ok(())
    }

    pub fn scheme(&self) -> &GroupScheme {
        &self.scheme
    }

    pub fn counts(&self, name: &str) -> Option<&BTreeMap<String, u64>> {
        self.entries.get(&normalize_name(name))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.counts(name).is_some()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Majority label for a known name; `None` when absent.
    fn resolve(&self, name: &str) -> Option<(Option<&str>, f64)> {
        let counts = self.counts(name)?;
        let total: u64 = counts.values().sum();
        let best = counts.values().copied().max().unwrap_or(0);
        let mut winners = counts.iter().filter(|(_, &c)| c == best);
        let first = winners.next().map(|(l, _)| l.as_str());
        if winners.next().is_some() {
            return Some((None, 0.0));
        }
        Some((first, best as f64 / total as f64))
    }
}

/// Writes `name,label,count` rows sorted by name then label.
pub fn write_name_table<W: Write>(table: &NameFrequencyTable, out: W) -> Result<()> {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(out);
    w.write_record(["name", "label", "count"])?;
    let sorted: BTreeMap<&String, &BTreeMap<String, u64>> = table.entries.iter().collect();
    for (name, counts) in sorted {
        for (label, count) in counts {
            w.write_record([name.as_str(), label.as_str(), &count.to_string()])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Reads a `name,label,count` CSV. Duplicate (name, label) rows are summed.
/// Line numbers in errors are 1-based and count the header.
pub fn load_name_table<R: Read>(source: R, scheme: &GroupScheme) -> Result<NameFrequencyTable> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(source);
    let headers = rdr.headers()?.clone();
    for col in ["name", "label", "count"] {
        if !headers.iter().any(|h| h == col) {
            return Err(Error::MalformedRow {
                line: 1,
                reason: format!("missing column `{col}`"),
            });
        }
    }
    let mut table = NameFrequencyTable::new(scheme.clone());
    for rec in rdr.records() {
        let rec = rec.map_err(|e| Error::MalformedRow {
            line: e.position().map(|p| p.line() as usize).unwrap_or(0),
            reason: e.to_string(),
        })?;
        let line = rec.position().map(|p| p.line() as usize).unwrap_or(0);
        let row: NameRow = rec.deserialize(Some(&headers)).map_err(|e| Error::MalformedRow {
            line,
            reason: e.to_string(),
        })?;
        if row.name.trim().is_empty() {
            return Err(Error::MalformedRow {
                line,
                reason: "empty name".into(),
            });
        }
        let count: u64 = row.count.parse().map_err(|_| Error::MalformedRow {
            line,
            reason: format!("count `{}` is not a non-negative integer", row.count),
        })?;
        table.add(&row.name, &row.label, count)?;
    }
    Ok(table)
}

#[derive(Debug, Clone, PartialEq)]
pub struct InferenceResult {
    pub label: String,
    pub confidence: f64,
    /// Chain position of the table that knew the name.
    pub provider_index: Option<usize>,
}

impl InferenceResult {
    pub fn is_resolved(&self, scheme: &GroupScheme) -> bool {
        self.label != scheme.unknown_label()
    }
}

pub fn infer_label(name: &str, chain: &[NameFrequencyTable], scheme: &GroupScheme) -> InferenceResult {
    for (i, table) in chain.iter().enumerate() {
        if let Some((label, confidence)) = table.resolve(name) {
            return InferenceResult {
                label: label.unwrap_or(scheme.unknown_label()).to_string(),
                confidence,
                provider_index: Some(i),
            };
        }
    }
    InferenceResult {
        label: scheme.unknown_label().to_string(),
        confidence: 0.0,
        provider_index: None,
    }
}

/// Which name fields form the lookup key.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum NameKey {
    #[default]
    FirstName,
    /// `"first last"`, for tables keyed on full names.
    FullName,
}

impl NameKey {
    fn key(self, first: Option<&str>, last: Option<&str>) -> Option<String> {
        match self {
            NameKey::FirstName => first.map(str::to_string),
            NameKey::FullName => match (first, last) {
                (Some(f), Some(l)) => Some(format!("{} {}", f.trim(), l.trim())),
                _ => None,
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Coverage {
    pub resolved: usize,
    pub non_missing: usize,
}

impl Coverage {
    /// Resolved / non-missing; 0 when there are no non-missing candidates.
    pub fn fraction(&self) -> f64 {
        if self.non_missing == 0 {
            0.0
        } else {
            self.resolved as f64 / self.non_missing as f64
        }
    }
}

/// Labels every non-missing candidate for `scheme.attribute`, overwriting any
/// existing label for that attribute.
pub fn label_dataset(
    snapshots: &[RankingSnapshot],
    scheme: &GroupScheme,
    chain: &[NameFrequencyTable],
    key: NameKey,
) -> Result<(Vec<RankingSnapshot>, Coverage)> {
    let mut coverage = Coverage::default();
    let mut out = Vec::with_capacity(snapshots.len());
    for snap in snapshots {
        let mut entries = snap.entries().to_vec();
        for e in entries.iter_mut().filter(|e| !e.missing) {
            coverage.non_missing += 1;
            let result = match key.key(e.first_name.as_deref(), e.last_name.as_deref()) {
                Some(name) => infer_label(&name, chain, scheme),
                None => infer_label("", &[], scheme),
            };
            if result.is_resolved(scheme) {
                coverage.resolved += 1;
            }
            e.group_labels.insert(scheme.attribute().to_string(), result.label);
        }
        out.push(snap.with_entries(entries)?);
    }
    Ok((out, coverage))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::CandidateRecord;
    use proptest::prelude::*;

    fn gender() -> GroupScheme {
        GroupScheme::binary_gender()
    }

    #[test]
    fn table_csv_round_trip() {
        let t = table(&[("Ann", "F", 9), ("ann", "M", 1), ("bo", "M", 4)]);
        let mut buf = Vec::new();
        write_name_table(&t, &mut buf).unwrap();
        assert_eq!(String::from_utf8(buf.clone()).unwrap(), "name,label,count\nann,F,9\nann,M,1\nbo,M,4\n");
        assert_eq!(load_name_table(&buf[..], &gender()).unwrap(), t);
    }

    fn table(rows: &[(&str, &str, u64)]) -> NameFrequencyTable {
        let mut t = NameFrequencyTable::new(gender());
        for (n, l, c) in rows {
            t.add(n, l, *c).unwrap();
        }
        t
    }

    #[test]
    fn loads_and_sums_duplicates() {
        let csv = "name,label,count\nmary,F,7065\nMary,M,12\nalex,M,5\nalex,M,3\n";
        let t = load_name_table(csv.as_bytes(), &gender()).unwrap();
        let mary = t.counts("mary").unwrap();
        assert_eq!(mary.get("F"), Some(&7065));
        assert_eq!(mary.get("M"), Some(&12));
        assert_eq!(t.counts("ALEX").unwrap().get("M"), Some(&8));
        assert_eq!(t.len(), 2);
    }

    #[test]
    fn load_reports_line_numbers() {
        let csv = "name,label,count\nmary,F,7065\nbob,M,lots\n";
        match load_name_table(csv.as_bytes(), &gender()) {
            Err(Error::MalformedRow { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
        let csv = "name,label,count\nbob,M,-4\n";
        assert!(matches!(
            load_name_table(csv.as_bytes(), &gender()),
            Err(Error::MalformedRow { line: 2, .. })
        ));
        let csv = "name,label,count\nbob,X,4\n";
        assert_eq!(
            load_name_table(csv.as_bytes(), &gender()),
            Err(Error::UnknownLabel("X".into()))
        );
        let csv = "name,count\nbob,4\n";
        assert!(matches!(
            load_name_table(csv.as_bytes(), &gender()),
            Err(Error::MalformedRow { line: 1, .. })
        ));
    }

    #[test]
    fn zero_count_names_are_not_stored() {
        let csv = "name,label,count\nghost,F,0\n";
        let t = load_name_table(csv.as_bytes(), &gender()).unwrap();
        assert!(!t.contains("ghost"));
    }

    #[test]
    fn majority_rule() {
        let chain = [table(&[("mary", "F", 7065), ("mary", "M", 12)])];
        let r = infer_label("Mary", &chain, &gender());
        assert_eq!(r.label, "F");
        assert_eq!(r.confidence, 7065.0 / 7077.0);
        assert_eq!(r.provider_index, Some(0));
    }

    #[test]
    fn absent_and_tied_names_are_unknown() {
        let chain = [table(&[("sam", "F", 5), ("sam", "M", 5)])];
        let r = infer_label("nobody", &chain, &gender());
        assert_eq!((r.label.as_str(), r.confidence, r.provider_index), ("unknown", 0.0, None));
        let r = infer_label("sam", &chain, &gender());
        assert_eq!((r.label.as_str(), r.confidence), ("unknown", 0.0));
        assert_eq!(r.provider_index, Some(0));
    }

    #[test]
    fn later_tables_only_fill_gaps() {
        let chain = [table(&[("kim", "F", 3)]), table(&[("kim", "M", 100), ("lee", "M", 2)])];
        assert_eq!(infer_label("kim", &chain, &gender()).label, "F");
        let lee = infer_label("  LEE ", &chain, &gender());
        assert_eq!(lee.label, "M");
        assert_eq!(lee.provider_index, Some(1));
    }

    #[test]
    fn unicode_names_fold_case() {
        let chain = [table(&[("élodie", "F", 10)])];
        assert_eq!(infer_label("ÉLODIE", &chain, &gender()).label, "F");
    }

    fn snapshot(names: &[Option<&str>]) -> RankingSnapshot {
        let entries = names
            .iter()
            .enumerate()
            .map(|(i, n)| match n {
                Some(n) => CandidateRecord::new(format!("c{i}")).with_names(Some(n.to_string()), None),
                None => CandidateRecord::anonymous(format!("c{i}")),
            })
            .collect();
        RankingSnapshot::new("q", 1, entries, None).unwrap()
    }

    #[test]
    fn coverage_extremes() {
        let chain = [table(&[("ann", "F", 9), ("bo", "M", 4)])];
        let all = snapshot(&[Some("ann"), Some("bo"), None]);
        let (labeled, cov) = label_dataset(&[all], &gender(), &chain, NameKey::FirstName).unwrap();
        assert_eq!(cov.fraction(), 1.0);
        assert_eq!(cov.non_missing, 2);
        assert_eq!(labeled[0].entries()[0].label(&gender()), "F");
        assert_eq!(labeled[0].entries()[2].label(&gender()), "unknown");

        let none = snapshot(&[Some("zed"), Some("yan")]);
        let (_, cov) = label_dataset(&[none], &gender(), &chain, NameKey::FirstName).unwrap();
        assert_eq!(cov.fraction(), 0.0);
    }

    #[test]
    fn full_name_key() {
        let race = GroupScheme::new("race", ["nh_white", "other"], "unknown").unwrap();
        let mut t = NameFrequencyTable::new(race.clone());
        t.add("Ann Smith", "nh_white", 3).unwrap();
        let rec = CandidateRecord::new("a").with_names(Some("ann".into()), Some("SMITH".into()));
        let s = RankingSnapshot::new("q", 1, vec![rec], None).unwrap();
        let (out, cov) = label_dataset(&[s], &race, &[t], NameKey::FullName).unwrap();
        assert_eq!(cov.resolved, 1);
        assert_eq!(out[0].entries()[0].label(&race), "nh_white");
    }

    proptest! {
        #[test]
        fn case_and_whitespace_insensitive(name in "[a-zA-Z]{1,8}", pad in " {0,3}", f in 1u64..50, m in 1u64..50) {
            let chain = [table(&[(&name.to_lowercase(), "F", f), (&name.to_lowercase(), "M", m)])];
            let a = infer_label(&name, &chain, &gender());
            let b = infer_label(&format!("{pad}{}{pad}", name.to_uppercase()), &chain, &gender());
            prop_assert_eq!(a, b);
        }

        #[test]
        fn appending_tables_keeps_resolved_names(f in 0u64..20, m in 0u64..20, extra_f in 1u64..20) {
            prop_assume!(f + m > 0);
            let base = vec![table(&[("x", "F", f), ("x", "M", m)])];
            let before = infer_label("x", &base, &gender());
            let mut longer = base.clone();
            longer.push(table(&[("x", "F", extra_f), ("y", "M", 1)]));
            prop_assert_eq!(before, infer_label("x", &longer, &gender()));
        }

        #[test]
        fn two_label_confidence_at_least_half(f in 0u64..1000, m in 0u64..1000) {
            prop_assume!(f != m);
            let r = infer_label("x", &[table(&[("x", "F", f), ("x", "M", m)])], &gender());
            prop_assert!(r.confidence >= 0.5 && r.confidence <= 1.0);
        }
    }
}
