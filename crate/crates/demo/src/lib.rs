//! Three browser-facing operations over the rankaudit core. Each takes plain
//! strings and returns JSON, so the page needs no bindings beyond these.

use std::collections::BTreeMap;

use rankaudit::detgreedy::{detgreedy_rerank, ScoredCandidate, Violation};
use rankaudit::exposure::{
    best_attainable_skew, corrected_skew_curve, full_grid, integral_bracket, min_skew_curve, skew_curve,
};
use rankaudit::{CandidateRecord, Cell, GroupProportions, GroupScheme, RankingSnapshot};
use serde::Serialize;
use wasm_bindgen::prelude::wasm_bindgen;

const ATTRIBUTE: &str = "group";
const UNKNOWN: &str = "?";

/// `LABEL=SHARE` pairs separated by commas; label order is kept.
fn parse_targets(text: &str) -> Result<GroupProportions, String> {
    let mut labels = Vec::new();
    let mut shares = BTreeMap::new();
    for part in text.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        let (label, share) = part.split_once('=').ok_or(format!("`{part}` is not LABEL=SHARE"))?;
        let label = label.trim().to_string();
        let share: f64 = share.trim().parse().map_err(|_| format!("bad share in `{part}`"))?;
        if shares.insert(label.clone(), share).is_some() {
            return Err(format!("label `{label}` given twice"));
        }
        labels.push(label);
    }
    let scheme = GroupScheme::new(ATTRIBUTE, labels, UNKNOWN).map_err(|e| e.to_string())?;
    GroupProportions::external(scheme, &shares).map_err(|e| e.to_string())
}

fn js_cell(c: Cell) -> serde_json::Value {
    match c {
        Cell::Value(v) => serde_json::json!(v),
        Cell::NegInfinite => serde_json::json!("-inf"),
        Cell::Undefined => serde_json::Value::Null,
    }
}

#[derive(Serialize)]
struct Series {
    name: String,
    values: Vec<serde_json::Value>,
}

#[derive(Serialize)]
struct Curves {
    ks: Vec<usize>,
    series: Vec<Series>,
}

/// Skew and corrected skew per label plus MinSkew at every cutoff of a
/// ranking given as labels in rank order (separated by commas or spaces).
/// Labels missing from `targets` count as unlabeled.
#[wasm_bindgen]
pub fn skew_curves(ranking: &str, targets: &str) -> Result<String, String> {
    let props = parse_targets(targets)?;
    let scheme = props.scheme().clone();
    let entries: Vec<CandidateRecord> = ranking
        .split(|c: char| c == ',' || c.is_whitespace())
        .filter(|t| !t.is_empty())
        .enumerate()
        .map(|(i, l)| CandidateRecord::new(format!("c{i}")).with_label(ATTRIBUTE, l))
        .collect();
    if entries.is_empty() {
        return Err("empty ranking".into());
    }
    let snap = RankingSnapshot::new("demo", 1, entries, None).map_err(|e| e.to_string())?;
    let ks = full_grid(snap.len());
    let mut series = Vec::new();
    let mut push = |name: String, values: &BTreeMap<usize, Cell>| {
        series.push(Series {
            name,
            values: values.values().map(|&c| js_cell(c)).collect(),
        })
    };
    for l in scheme.labels() {
        let c = skew_curve(&snap, &scheme, &props, l, &ks).map_err(|e| e.to_string())?;
        push(format!("skew {l}"), &c.values);
        let c = corrected_skew_curve(&snap, &scheme, &props, l, &ks).map_err(|e| e.to_string())?;
        push(format!("corrected {l}"), &c.values);
    }
    let c = min_skew_curve(&snap, &scheme, &props, &ks).map_err(|e| e.to_string())?;
    push("minskew".into(), &c.values);
    serde_json::to_string(&Curves { ks, series }).map_err(|e| e.to_string())
}

#[derive(Serialize)]
struct Slot {
    candidate_id: String,
    label: String,
    score: f64,
}

#[derive(Serialize)]
struct Band {
    label: String,
    /// Prefix counts after each slot.
    counts: Vec<usize>,
    floor: Vec<usize>,
    ceiling: Vec<usize>,
}

#[derive(Serialize)]
struct Rerank {
    order: Vec<Slot>,
    feasible: bool,
    violations: Vec<Violation>,
    forced_positions: Vec<usize>,
    first_exhaustion: Option<usize>,
    bands: Vec<Band>,
}

/// DetGreedy over a pool given as `candidate_id,label,score` lines (a header
/// line is optional). Returns the new order with per-label prefix counts and
/// the floor/ceiling band they must stay in.
#[wasm_bindgen]
pub fn rerank(pool: &str, targets: &str) -> Result<String, String> {
    let props = parse_targets(targets)?;
    let mut candidates = Vec::new();
    for (i, line) in pool.lines().map(str::trim).enumerate().filter(|(_, l)| !l.is_empty()) {
        let f: Vec<&str> = line.split(',').map(str::trim).collect();
        if i == 0 && f.first() == Some(&"candidate_id") {
            continue;
        }
        let [id, label, score] = f[..] else {
            return Err(format!("line {}: expected candidate_id,label,score", i + 1));
        };
        let score: f64 = score.parse().map_err(|_| format!("line {}: bad score `{score}`", i + 1))?;
        candidates.push(ScoredCandidate::new(id, label, score));
    }
    let r = detgreedy_rerank(&candidates, &props).map_err(|e| e.to_string())?;
    let score: BTreeMap<&str, f64> = candidates.iter().map(|c| (c.candidate_id.as_str(), c.score)).collect();
    let bands = props
        .scheme()
        .labels()
        .iter()
        .zip(props.shares())
        .map(|(l, &p)| {
            let ks = 1..=r.order.len();
            Band {
                label: l.clone(),
                counts: r
                    .labels
                    .iter()
                    .scan(0, |c, x| {
                        *c += (x == l) as usize;
                        Some(*c)
                    })
                    .collect(),
                floor: ks.clone().map(|k| integral_bracket(p, k).0).collect(),
                ceiling: ks.map(|k| integral_bracket(p, k).1).collect(),
            }
        })
        .collect();
    let out = Rerank {
        order: r
            .order
            .iter()
            .zip(&r.labels)
            .map(|(id, l)| Slot {
                candidate_id: id.clone(),
                label: l.clone(),
                score: score[id.as_str()],
            })
            .collect(),
        feasible: r.feasible,
        violations: r.violation_positions,
        forced_positions: r.forced_positions,
        first_exhaustion: r.first_exhaustion,
        bands,
    };
    serde_json::to_string(&out).map_err(|e| e.to_string())
}

/// Smallest attainable `|skew|` for `k = 1..=max_k`.
#[wasm_bindgen]
pub fn best_attainable(p_star: f64, max_k: usize) -> Result<Vec<f64>, String> {
    (1..=max_k)
        .map(|k| best_attainable_skew(p_star, k).map_err(|e| e.to_string()))
        .collect()
}
