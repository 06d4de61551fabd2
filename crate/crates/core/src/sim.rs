//! Seeded generator of multi-day ranking datasets with a ground-truth ledger.
//!
//! Per query: a pool is drawn (size uniform in a range, each member's group
//! drawn from the query's true shares), scored from a per-group truncated
//! normal, ranked by score and optionally re-ranked with DetGreedy against
//! the pool's own composition. Each later day every member independently
//! departs with its group's probability and is replaced by a fresh
//! candidate; the survivors and newcomers are ranked again.
//!
//! Every query draws from its own ChaCha stream (`seed`, stream = query
//! index), so output is identical regardless of thread count and any subset
//! of queries can be regenerated alone.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::detgreedy::{detgreedy_rerank, ScoredCandidate};
use crate::error::{Error, Result};
use crate::infer::NameFrequencyTable;
use crate::model::{CandidateRecord, GroupProportions, GroupScheme, ProportionSource, QuerySeries, RankingSnapshot};

/// Synthetic first names generated per group.
pub const NAMES_PER_GROUP: usize = 40;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoreModel {
    /// Mean of the underlying normal, in [0, 1].
    pub mean: f64,
    /// Standard deviation of the underlying normal, > 0.
    pub spread: f64,
}

impl Default for ScoreModel {
    fn default() -> Self {
        Self { mean: 0.5, spread: 0.15 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PostProcess {
    None,
    #[default]
    Detgreedy,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Replacement {
    /// A leaver is replaced by a newcomer from the same group.
    #[default]
    SameGroup,
    /// Newcomers' groups are drawn from the query's true shares.
    TargetShares,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    pub seed: u64,
    pub n_queries: usize,
    /// Inclusive (min, max) pool size.
    pub pool_size: (usize, usize),
    pub scheme: GroupScheme,
    /// Base true shares, aligned with the scheme's labels.
    pub shares: Vec<f64>,
    /// Each query's shares are the base shares times U(1-j, 1+j), renormalized.
    pub share_jitter: f64,
    pub scores: Vec<ScoreModel>,
    pub postprocess: PostProcess,
    pub days: u32,
    /// Daily departure probability per group.
    pub departure: Vec<f64>,
    pub replacement: Replacement,
    /// Probability that a candidate is anonymized (fixed for its lifetime).
    pub missing_rate: f64,
    /// Std. dev. of independent per-day score noise (0 = stable scores).
    pub score_noise: f64,
    /// Attach synthetic first names (see [`synthetic_name_table`]).
    pub names: bool,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            n_queries: 20,
            pool_size: (100, 300),
            scheme: GroupScheme::binary_gender(),
            shares: vec![0.4, 0.6],
            share_jitter: 0.2,
            scores: vec![ScoreModel::default(); 2],
            postprocess: PostProcess::Detgreedy,
            days: 5,
            departure: vec![0.1, 0.1],
            replacement: Replacement::SameGroup,
            missing_rate: 0.0,
            score_noise: 0.0,
            names: false,
        }
    }
}

fn prob(name: &str, p: f64) -> Result<()> {
    if (0.0..=1.0).contains(&p) {
        Ok(())
    } else {
        Err(Error::InvalidConfig(format!("{name} = {p} is not a probability")))
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        let m = self.scheme.len();
        let bad = |s: String| Err(Error::InvalidConfig(s));
        if self.days < 1 {
            return bad("days must be >= 1".into());
        }
        let (lo, hi) = self.pool_size;
        if lo < 1 || lo > hi {
            return bad(format!("pool size range ({lo}, {hi}) is empty"));
        }
        if self.shares.len() != m || self.scores.len() != m || self.departure.len() != m {
            return bad(format!("shares, scores and departure need {m} entries each"));
        }
        for &s in &self.shares {
            prob("share", s)?;
        }
        let total: f64 = self.shares.iter().sum();
        if (total - 1.0).abs() > 1e-6 {
            return bad(format!("shares sum to {total}"));
        }
        if !(0.0..1.0).contains(&self.share_jitter) {
            return bad(format!("share_jitter {} outside [0, 1)", self.share_jitter));
        }
        for s in &self.scores {
            prob("score mean", s.mean)?;
            if !(s.spread > 0.0 && s.spread.is_finite()) {
                return bad(format!("score spread {} must be positive", s.spread));
            }
        }
        for &d in &self.departure {
            prob("departure", d)?;
        }
        prob("missing_rate", self.missing_rate)?;
        if !(self.score_noise >= 0.0 && self.score_noise.is_finite()) {
            return bad(format!("score_noise {} must be >= 0", self.score_noise));
        }
        Ok(())
    }
}

/// Ground-truth events, one JSONL object each.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LedgerRecord {
    Query {
        query_id: String,
        shares: BTreeMap<String, f64>,
        pool_size: usize,
    },
    Candidate {
        query_id: String,
        candidate_id: String,
        label: String,
        score: f64,
        missing: bool,
        first_day: u32,
    },
    /// `day` is the first day the candidate is gone.
    Departure {
        query_id: String,
        candidate_id: String,
        day: u32,
    },
    Bias {
        query_id: String,
        label: String,
        strength: f64,
        depth: usize,
        demoted: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct GroundTruth {
    pub records: Vec<LedgerRecord>,
}

impl GroundTruth {
    pub fn true_shares(&self, query_id: &str) -> Option<&BTreeMap<String, f64>> {
        self.records.iter().find_map(|r| match r {
            LedgerRecord::Query { query_id: q, shares, .. } if q == query_id => Some(shares),
            _ => None,
        })
    }

    pub fn departures(&self) -> impl Iterator<Item = &LedgerRecord> {
        self.records.iter().filter(|r| matches!(r, LedgerRecord::Departure { .. }))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimOutput {
    pub series: Vec<QuerySeries>,
    pub ledger: GroundTruth,
}

#[derive(Debug, Clone)]
struct Member {
    id: String,
    group: usize,
    score: f64,
    missing: bool,
    first_name: Option<String>,
}

fn truncated_normal<R: Rng>(rng: &mut R, model: ScoreModel) -> f64 {
    let dist = Normal::new(model.mean, model.spread).expect("validated spread");
    loop {
        let x = dist.sample(rng);
        if (0.0..=1.0).contains(&x) {
            return x;
        }
    }
}

fn categorical<R: Rng>(rng: &mut R, weights: &[f64]) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, w) in weights.iter().enumerate() {
        acc += w;
        if u < acc {
            return i;
        }
    }
    weights.iter().rposition(|&w| w > 0.0).unwrap_or(0)
}

/// Synthetic first name `j` of a group.
pub fn synthetic_name(label: &str, j: usize) -> String {
    format!("{}{j:02}", label.to_lowercase())
}

/// Frequency table matching the simulator's synthetic names: each name is
/// dominated by its own group with a small count for every other group.
pub fn synthetic_name_table(scheme: &GroupScheme) -> NameFrequencyTable {
    let mut t = NameFrequencyTable::new(scheme.clone());
    for own in scheme.labels() {
        for j in 0..NAMES_PER_GROUP {
            let name = synthetic_name(own, j);
            for l in scheme.labels() {
                let count = if l == own { 100 } else { 1 + (j % 3) as u64 };
                t.add(&name, l, count).expect("labels from the scheme");
            }
        }
    }
    t
}

struct QuerySim<'a> {
    cfg: &'a SimConfig,
    query_id: String,
    rng: ChaCha8Rng,
    next_id: usize,
    shares: Vec<f64>,
    ledger: Vec<LedgerRecord>,
}

impl<'a> QuerySim<'a> {
    fn new_member(&mut self, group: usize, day: u32) -> Member {
        let id = format!("{}-c{:05}", self.query_id, self.next_id);
        self.next_id += 1;
        let score = truncated_normal(&mut self.rng, self.cfg.scores[group]);
        let missing = self.rng.gen_bool(self.cfg.missing_rate);
        let label = &self.cfg.scheme.labels()[group];
        let first_name = self
            .cfg
            .names
            .then(|| synthetic_name(label, self.rng.gen_range(0..NAMES_PER_GROUP)));
        self.ledger.push(LedgerRecord::Candidate {
            query_id: self.query_id.clone(),
            candidate_id: id.clone(),
            label: label.clone(),
            score,
            missing,
            first_day: day,
        });
        Member {
            id,
            group,
            score,
            missing,
            first_name,
        }
    }

    fn rank(&mut self, pool: &[Member], day: u32) -> Result<RankingSnapshot> {
        let scheme = &self.cfg.scheme;
        let day_scores: Vec<f64> = if self.cfg.score_noise > 0.0 {
            let noise = Normal::new(0.0, self.cfg.score_noise).expect("validated noise");
            pool.iter()
                .map(|m| (m.score + noise.sample(&mut self.rng)).clamp(0.0, 1.0))
                .collect()
        } else {
            pool.iter().map(|m| m.score).collect()
        };
        let scored: Vec<ScoredCandidate> = pool
            .iter()
            .zip(&day_scores)
            .map(|(m, &s)| ScoredCandidate::new(m.id.clone(), scheme.labels()[m.group].clone(), s))
            .collect();
        let order: Vec<String> = match self.cfg.postprocess {
            PostProcess::Detgreedy => {
                let mut counts = vec![0usize; scheme.len()];
                for m in pool {
                    counts[m.group] += 1;
                }
                let props = GroupProportions::from_counts(scheme.clone(), &counts)?;
                detgreedy_rerank(&scored, &props)?.order
            }
            PostProcess::None => {
                let mut v: Vec<&ScoredCandidate> = scored.iter().collect();
                v.sort_by(|a, b| b.score.total_cmp(&a.score).then_with(|| a.candidate_id.cmp(&b.candidate_id)));
                v.into_iter().map(|c| c.candidate_id.clone()).collect()
            }
        };
        let by_id: BTreeMap<&str, &Member> = pool.iter().map(|m| (m.id.as_str(), m)).collect();
        let entries = order
            .iter()
            .map(|id| {
                let m = by_id[id.as_str()];
                if m.missing {
                    CandidateRecord::anonymous(m.id.clone())
                } else {
                    CandidateRecord::new(m.id.clone())
                        .with_label(scheme.attribute(), scheme.labels()[m.group].clone())
                        .with_names(m.first_name.clone(), None)
                }
            })
            .collect();
        RankingSnapshot::new(self.query_id.clone(), day, entries, Some(pool.len()))
    }

    fn run(mut self) -> Result<(QuerySeries, Vec<LedgerRecord>)> {
        let cfg = self.cfg;
        let (lo, hi) = cfg.pool_size;
        let size = self.rng.gen_range(lo..=hi);
        let shares = self.shares.clone();
        self.ledger.push(LedgerRecord::Query {
            query_id: self.query_id.clone(),
            shares: cfg.scheme.labels().iter().cloned().zip(shares.iter().copied()).collect(),
            pool_size: size,
        });
        let mut pool: Vec<Member> = (0..size)
            .map(|_| {
                let g = categorical(&mut self.rng, &shares);
                self.new_member(g, 1)
            })
            .collect();
        let mut snapshots = vec![self.rank(&pool, 1)?];
        for day in 2..=cfg.days {
            let mut next = Vec::with_capacity(pool.len());
            for m in pool {
                if self.rng.gen_bool(cfg.departure[m.group]) {
                    self.ledger.push(LedgerRecord::Departure {
                        query_id: self.query_id.clone(),
                        candidate_id: m.id.clone(),
                        day,
                    });
                    let g = match cfg.replacement {
                        Replacement::SameGroup => m.group,
                        Replacement::TargetShares => categorical(&mut self.rng, &shares),
                    };
                    next.push(self.new_member(g, day));
                } else {
                    next.push(m);
                }
            }
            pool = next;
            snapshots.push(self.rank(&pool, day)?);
        }
        let series = QuerySeries::new(self.query_id.clone(), snapshots)?;
        Ok((series, self.ledger))
    }
}

/// Query ids are `q0000`, `q0001`, ...
pub fn query_id(index: usize) -> String {
    format!("q{index:04}")
}

fn query_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn jittered_shares<R: Rng>(rng: &mut R, base: &[f64], jitter: f64) -> Vec<f64> {
    if jitter == 0.0 {
        return base.to_vec();
    }
    let raw: Vec<f64> = base.iter().map(|s| s * rng.gen_range(1.0 - jitter..=1.0 + jitter)).collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|s| s / total).collect()
}

pub fn generate(config: &SimConfig) -> Result<SimOutput> {
    config.validate()?;
    let results: Vec<Result<(QuerySeries, Vec<LedgerRecord>)>> = (0..config.n_queries)
        .into_par_iter()
        .map(|q| {
            let mut rng = query_rng(config.seed, q as u64);
            let shares = jittered_shares(&mut rng, &config.shares, config.share_jitter);
            QuerySim {
                cfg: config,
                query_id: query_id(q),
                rng,
                next_id: 0,
                shares,
                ledger: Vec::new(),
            }
            .run()
        })
        .collect();
    let mut series = Vec::with_capacity(results.len());
    let mut ledger = GroundTruth::default();
    for r in results {
        let (s, l) = r?;
        series.push(s);
        ledger.records.extend(l);
    }
    Ok(SimOutput { series, ledger })
}

/// FNV-1a, used to derive a stable stream id from a query id.
fn stable_hash(s: &str) -> u64 {
    s.bytes()
        .fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

/// Demotes members of `label` out of the first `depth` positions. Each
/// member there is marked with probability `strength`; marked members (best
/// ranked first) swap out for the highest-ranked non-`label` entries below
/// the window, as long as such entries exist. Promoted entries fill the end
/// of the window; demoted ones follow it, ahead of the untouched tail.
pub fn inject_topk_bias(
    series: &QuerySeries,
    scheme: &GroupScheme,
    label: &str,
    strength: f64,
    depth: usize,
    seed: u64,
) -> Result<(QuerySeries, LedgerRecord)> {
    prob("strength", strength)?;
    scheme.require_index(label)?;
    let mut demoted_total = 0;
    let mut snapshots = Vec::with_capacity(series.snapshots().len());
    for (&day, snap) in series.snapshots() {
        let mut rng = query_rng(seed, stable_hash(series.query_id()) ^ day as u64);
        let entries = snap.entries();
        let d = depth.min(entries.len());
        let (top, rest) = entries.split_at(d);
        let is_target = |e: &CandidateRecord| e.label(scheme) == label;
        let marked: Vec<usize> = top
            .iter()
            .enumerate()
            .filter(|(_, e)| is_target(e))
            .filter(|_| rng.gen_bool(strength))
            .map(|(i, _)| i)
            .collect();
        let alternatives: Vec<usize> = rest
            .iter()
            .enumerate()
            .filter(|(_, e)| !is_target(e))
            .map(|(i, _)| i)
            .take(marked.len())
            .collect();
        let demote = &marked[..alternatives.len()];
        demoted_total += demote.len();

        let mut out = Vec::with_capacity(entries.len());
        out.extend(top.iter().enumerate().filter(|(i, _)| !demote.contains(i)).map(|(_, e)| e.clone()));
        out.extend(alternatives.iter().map(|&i| rest[i].clone()));
        out.extend(demote.iter().map(|&i| top[i].clone()));
        out.extend(rest.iter().enumerate().filter(|(i, _)| !alternatives.contains(i)).map(|(_, e)| e.clone()));
        snapshots.push(snap.with_entries(out)?);
    }
    let record = LedgerRecord::Bias {
        query_id: series.query_id().to_string(),
        label: label.to_string(),
        strength,
        depth,
        demoted: demoted_total,
    };
    Ok((QuerySeries::new(series.query_id(), snapshots)?, record))
}

/// Target shares from a snapshot's labeled pool, the way the simulator's
/// re-ranker sees them when nothing is masked.
pub fn pool_targets(snapshot: &RankingSnapshot, scheme: &GroupScheme) -> Result<GroupProportions> {
    let mut counts = vec![0usize; scheme.len()];
    for e in snapshot.entries() {
        if let Some(i) = e.group_index(scheme) {
            counts[i] += 1;
        }
    }
    let total: usize = counts.iter().sum();
    if total == 0 {
        return Err(Error::EmptyLabeledPool);
    }
    GroupProportions::new(
        scheme.clone(),
        counts.iter().map(|&c| c as f64 / total as f64).collect(),
        ProportionSource::ObservedPool,
        total,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::churn::churn_rate;
    use crate::detgreedy::check_feasibility;
    use crate::infer::{label_dataset, NameKey};

    fn small() -> SimConfig {
        SimConfig {
            n_queries: 6,
            pool_size: (40, 80),
            ..SimConfig::default()
        }
    }

    #[test]
    fn validation() {
        assert!(small().validate().is_ok());
        let mut c = small();
        c.days = 0;
        assert!(generate(&c).is_err());
        let mut c = small();
        c.departure = vec![1.2, 0.0];
        assert!(matches!(c.validate(), Err(Error::InvalidConfig(_))));
        let mut c = small();
        c.scores[0].spread = 0.0;
        assert!(c.validate().is_err());
        let mut c = small();
        c.shares = vec![0.5, 0.6];
        assert!(c.validate().is_err());
        let mut c = small();
        c.pool_size = (10, 5);
        assert!(c.validate().is_err());
    }

    #[test]
    fn deterministic_for_fixed_seed() {
        let a = generate(&small()).unwrap();
        let b = generate(&small()).unwrap();
        assert_eq!(a, b);
        let mut other = small();
        other.seed = 1;
        assert_ne!(generate(&other).unwrap().series, a.series);
    }

    #[test]
    fn subset_regeneration_is_stable() {
        let all = generate(&small()).unwrap();
        let mut fewer = small();
        fewer.n_queries = 3;
        let part = generate(&fewer).unwrap();
        assert_eq!(&all.series[..3], &part.series[..]);
    }

    #[test]
    fn no_departures_means_no_churn() {
        let mut c = small();
        c.departure = vec![0.0, 0.0];
        let out = generate(&c).unwrap();
        assert_eq!(out.ledger.departures().count(), 0);
        for s in &out.series {
            let len = s.first().unwrap().len();
            for k in [1, len / 2, len] {
                for e in 2..=5 {
                    for l in ["F", "M"] {
                        let cell = churn_rate(s, &c.scheme, l, k, 1, e).unwrap();
                        assert!(cell.churn.is_none_or(|v| v == 0.0));
                    }
                }
            }
        }
    }

    #[test]
    fn detgreedy_days_are_feasible() {
        let mut c = small();
        c.score_noise = 0.05;
        c.scores = vec![ScoreModel { mean: 0.3, spread: 0.1 }, ScoreModel { mean: 0.7, spread: 0.1 }];
        let out = generate(&c).unwrap();
        for s in &out.series {
            for snap in s.snapshots().values() {
                let props = pool_targets(snap, &c.scheme).unwrap();
                let labels: Vec<&str> = snap.entries().iter().map(|e| e.label(&c.scheme)).collect();
                assert!(check_feasibility(&labels, &props).is_empty());
            }
        }
    }

    #[test]
    fn masking_keeps_positions() {
        let mut masked = small();
        masked.missing_rate = 0.3;
        let a = generate(&masked).unwrap();
        let ids: Vec<Vec<String>> = a.series[0]
            .snapshots()
            .values()
            .map(|s| s.entries().iter().map(|e| e.candidate_id.clone()).collect())
            .collect();
        // recover the unmasked ranking from the ledger and compare ordering
        assert!(a.series[0].first().unwrap().missing_count() > 0);
        let truth: BTreeMap<&str, bool> = a
            .ledger
            .records
            .iter()
            .filter_map(|r| match r {
                LedgerRecord::Candidate { candidate_id, missing, .. } => Some((candidate_id.as_str(), *missing)),
                _ => None,
            })
            .collect();
        for (snap, ids) in a.series[0].snapshots().values().zip(&ids) {
            for (e, id) in snap.entries().iter().zip(ids) {
                assert_eq!(&e.candidate_id, id);
                assert_eq!(e.missing, truth[id.as_str()]);
            }
        }
    }

    #[test]
    fn bias_limits() {
        let out = generate(&small()).unwrap();
        let scheme = GroupScheme::binary_gender();
        let s = &out.series[0];
        let (same, rec) = inject_topk_bias(s, &scheme, "F", 0.0, 25, 9).unwrap();
        assert_eq!(&same, s);
        assert!(matches!(rec, LedgerRecord::Bias { demoted: 0, .. }));

        let (biased, _) = inject_topk_bias(s, &scheme, "F", 1.0, 25, 9).unwrap();
        for snap in biased.snapshots().values() {
            assert!(snap.entries()[..25].iter().all(|e| e.label(&scheme) != "F"));
            let mut a: Vec<_> = snap.entries().iter().map(|e| e.candidate_id.clone()).collect();
            a.sort();
            let mut b: Vec<_> = s.get(snap.day()).unwrap().entries().iter().map(|e| e.candidate_id.clone()).collect();
            b.sort();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn bias_without_alternatives_leaves_window() {
        let recs: Vec<_> = (0..5).map(|i| CandidateRecord::new(format!("c{i}")).with_label("gender", "F")).collect();
        let snap = RankingSnapshot::new("q", 1, recs, None).unwrap();
        let s = QuerySeries::new("q", vec![snap]).unwrap();
        let (out, rec) = inject_topk_bias(&s, &GroupScheme::binary_gender(), "F", 1.0, 3, 0).unwrap();
        assert_eq!(out, s);
        assert!(matches!(rec, LedgerRecord::Bias { demoted: 0, .. }));
    }

    #[test]
    fn synthetic_names_resolve() {
        let mut c = small();
        c.names = true;
        let out = generate(&c).unwrap();
        let snaps: Vec<RankingSnapshot> = out.series[0].snapshots().values().cloned().collect();
        let table = synthetic_name_table(&c.scheme);
        let (labeled, cov) = label_dataset(&snaps, &c.scheme, &[table], NameKey::FirstName).unwrap();
        assert_eq!(cov.fraction(), 1.0);
        assert_eq!(labeled, snaps);
    }
}
