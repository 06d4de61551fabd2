//! Greedy re-ranking under per-prefix representation bounds.
//!
//! For every prefix length `k` and group `i` the target is
//! `floor(p_i * k) <= c_i(k) <= ceil(p_i * k)`, where `c_i(k)` counts group
//! members in the first `k` slots. Scores are only compared between group
//! heads; within a group the output keeps descending score order.
//!
//! Selection at slot `k`:
//! 1. Groups still holding candidates whose count is below the floor compete
//!    on floor deficit, then head score, then label order.
//! 2. Otherwise the best head among groups below their ceiling wins.
//! 3. Otherwise (every group at its ceiling or exhausted) the best remaining
//!    head is placed and the slot is recorded as forced.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exposure::integral_bracket;
use crate::model::GroupProportions;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredCandidate {
    pub candidate_id: String,
    pub label: String,
    pub score: f64,
}

impl ScoredCandidate {
    pub fn new(candidate_id: impl Into<String>, label: impl Into<String>, score: f64) -> Self {
        Self {
            candidate_id: candidate_id.into(),
            label: label.into(),
            score,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoundKind {
    Floor,
    Ceiling,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub k: usize,
    pub label: String,
    pub kind: BoundKind,
    pub count: usize,
    pub bound: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RerankResult {
    /// Candidate ids, rank 1 first.
    pub order: Vec<String>,
    /// Group label per output slot.
    pub labels: Vec<String>,
    pub feasible: bool,
    pub violation_positions: Vec<Violation>,
    /// Slots filled by rule 3.
    pub forced_positions: Vec<usize>,
    /// Earliest slot at which a group with no candidates left sits below its
    /// floor. Bounds cannot all hold from there on.
    pub first_exhaustion: Option<usize>,
}

fn ranked(a: &ScoredCandidate, b: &ScoredCandidate) -> std::cmp::Ordering {
    b.score
        .total_cmp(&a.score)
        .then_with(|| a.candidate_id.cmp(&b.candidate_id))
}

pub fn detgreedy_rerank(pool: &[ScoredCandidate], proportions: &GroupProportions) -> Result<RerankResult> {
    if pool.is_empty() {
        return Err(Error::EmptyPool);
    }
    let scheme = proportions.scheme();
    let targets = proportions.shares();
    let m = scheme.len();
    let mut queues: Vec<Vec<&ScoredCandidate>> = vec![Vec::new(); m];
    for c in pool {
        if !c.score.is_finite() {
            return Err(Error::InvalidScore {
                id: c.candidate_id.clone(),
                score: c.score,
            });
        }
        let i = scheme
            .index_of(&c.label)
            .ok_or_else(|| Error::LabelWithoutProportion(c.label.clone()))?;
        queues[i].push(c);
    }
    for q in &mut queues {
        q.sort_by(|a, b| ranked(a, b));
    }

    let n = pool.len();
    let mut next = vec![0usize; m];
    let mut counts = vec![0usize; m];
    let mut order = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    let mut forced_positions = Vec::new();
    let mut first_exhaustion = None;

    let head = |i: usize, next: &[usize]| queues[i].get(next[i]).copied();
    // higher head score first, then lower label index
    let better = |a: usize, b: usize, next: &[usize]| {
        let (ha, hb) = (head(a, next).unwrap(), head(b, next).unwrap());
        ha.score.total_cmp(&hb.score).then(b.cmp(&a)).is_gt()
    };

    for k in 1..=n {
        if first_exhaustion.is_none()
            && (0..m).any(|i| head(i, &next).is_none() && counts[i] < integral_bracket(targets[i], k).0)
        {
            first_exhaustion = Some(k);
        }
        let mut pick: Option<(usize, usize)> = None; // (group, deficit)
        for i in 0..m {
            if head(i, &next).is_none() {
                continue;
            }
            let (floor, _) = integral_bracket(targets[i], k);
            if counts[i] < floor {
                let deficit = floor - counts[i];
                pick = match pick {
                    Some((j, d)) if d > deficit || (d == deficit && !better(i, j, &next)) => Some((j, d)),
                    _ => Some((i, deficit)),
                };
            }
        }
        let mut choice = pick.map(|(i, _)| i);
        if choice.is_none() {
            for i in 0..m {
                if head(i, &next).is_none() {
                    continue;
                }
                let (_, ceil) = integral_bracket(targets[i], k);
                if counts[i] < ceil && choice.is_none_or(|j| better(i, j, &next)) {
                    choice = Some(i);
                }
            }
        }
        let group = match choice {
            Some(i) => i,
            None => {
                forced_positions.push(k);
                (0..m)
                    .filter(|&i| head(i, &next).is_some())
                    .reduce(|j, i| if better(i, j, &next) { i } else { j })
                    .expect("a candidate remains while k <= n")
            }
        };
        let c = head(group, &next).unwrap();
        order.push(c.candidate_id.clone());
        labels.push(c.label.clone());
        next[group] += 1;
        counts[group] += 1;
    }

    let violation_positions = check_feasibility(&labels, proportions);
    Ok(RerankResult {
        order,
        labels,
        feasible: violation_positions.is_empty(),
        violation_positions,
        forced_positions,
        first_exhaustion,
    })
}

/// Every (k, label) where a ranked label sequence leaves
/// `[floor(p*k), ceil(p*k)]`. Labels outside the scheme count toward no group.
pub fn check_feasibility<S: AsRef<str>>(order: &[S], proportions: &GroupProportions) -> Vec<Violation> {
    let scheme = proportions.scheme();
    let mut counts = vec![0usize; scheme.len()];
    let mut out = Vec::new();
    for (pos, label) in order.iter().enumerate() {
        let k = pos + 1;
        if let Some(i) = scheme.index_of(label.as_ref()) {
            counts[i] += 1;
        }
        for (i, (&c, &p)) in counts.iter().zip(proportions.shares()).enumerate() {
            let (lo, hi) = integral_bracket(p, k);
            let kind = if c < lo {
                Some((BoundKind::Floor, lo))
            } else if c > hi {
                Some((BoundKind::Ceiling, hi))
            } else {
                None
            };
            if let Some((kind, bound)) = kind {
                out.push(Violation {
                    k,
                    label: scheme.labels()[i].clone(),
                    kind,
                    count: c,
                    bound,
                });
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{GroupScheme, ProportionSource};
    use proptest::prelude::*;

    fn props(scheme: GroupScheme, shares: Vec<f64>) -> GroupProportions {
        GroupProportions::new(scheme, shares, ProportionSource::ObservedPool, 0).unwrap()
    }

    fn half() -> GroupProportions {
        props(GroupScheme::binary_gender(), vec![0.5, 0.5])
    }

    #[test]
    fn small_pool_example() {
        let pool = [
            ScoredCandidate::new("f1", "F", 0.9),
            ScoredCandidate::new("f2", "F", 0.5),
            ScoredCandidate::new("m1", "M", 0.8),
            ScoredCandidate::new("m2", "M", 0.4),
        ];
        let r = detgreedy_rerank(&pool, &half()).unwrap();
        assert_eq!(r.order, ["f1", "m1", "f2", "m2"]);
        assert!(r.feasible);
        assert!(r.forced_positions.is_empty());
        assert_eq!(r.first_exhaustion, None);
    }

    /// Every ordering of the 4-candidate example that keeps within-group
    /// score order and satisfies all bounds; the greedy pick must be among
    /// them and must be the lexicographically best by slot score.
    #[test]
    fn small_pool_enumeration() {
        let pool = [
            ScoredCandidate::new("f1", "F", 0.9),
            ScoredCandidate::new("f2", "F", 0.5),
            ScoredCandidate::new("m1", "M", 0.8),
            ScoredCandidate::new("m2", "M", 0.4),
        ];
        let mut valid = Vec::new();
        let idx = [0usize, 1, 2, 3];
        for a in idx {
            for b in idx {
                for c in idx {
                    for d in idx {
                        let perm = [a, b, c, d];
                        let mut seen = [false; 4];
                        if perm.iter().any(|&x| std::mem::replace(&mut seen[x], true)) {
                            continue;
                        }
                        let order: Vec<&ScoredCandidate> = perm.iter().map(|&i| &pool[i]).collect();
                        let in_group_sorted = ["F", "M"].iter().all(|g| {
                            let s: Vec<f64> = order.iter().filter(|c| c.label == *g).map(|c| c.score).collect();
                            s.windows(2).all(|w| w[0] >= w[1])
                        });
                        let labels: Vec<&str> = order.iter().map(|c| c.label.as_str()).collect();
                        if in_group_sorted && check_feasibility(&labels, &half()).is_empty() {
                            valid.push(order.iter().map(|c| c.score).collect::<Vec<_>>());
                        }
                    }
                }
            }
        }
        assert_eq!(valid.len(), 4); // FMFM, FMMF, MFMF, MFFM
        valid.sort_by(|a, b| b.partial_cmp(a).unwrap());
        let got = detgreedy_rerank(&pool, &half()).unwrap();
        let got_scores: Vec<f64> = got
            .order
            .iter()
            .map(|id| pool.iter().find(|c| &c.candidate_id == id).unwrap().score)
            .collect();
        assert_eq!(got_scores, valid[0]);
    }

    #[test]
    fn single_group_is_score_order() {
        let p = props(GroupScheme::binary_gender(), vec![1.0, 0.0]);
        let pool: Vec<_> = [0.3, 0.9, 0.1, 0.5]
            .iter()
            .enumerate()
            .map(|(i, &s)| ScoredCandidate::new(format!("c{i}"), "F", s))
            .collect();
        let r = detgreedy_rerank(&pool, &p).unwrap();
        assert_eq!(r.order, ["c1", "c3", "c0", "c2"]);
        assert!(r.feasible);
    }

    #[test]
    fn ties_break_by_id() {
        let pool = [
            ScoredCandidate::new("b", "F", 0.5),
            ScoredCandidate::new("a", "F", 0.5),
        ];
        let p = props(GroupScheme::binary_gender(), vec![1.0, 0.0]);
        assert_eq!(detgreedy_rerank(&pool, &p).unwrap().order, ["a", "b"]);
    }

    #[test]
    fn exhaustion_is_recorded() {
        let pool = [
            ScoredCandidate::new("f1", "F", 0.9),
            ScoredCandidate::new("m1", "M", 0.8),
            ScoredCandidate::new("m2", "M", 0.7),
            ScoredCandidate::new("m3", "M", 0.6),
        ];
        let r = detgreedy_rerank(&pool, &half()).unwrap();
        // F runs dry after slot 1 and falls below its floor at slot 4
        assert_eq!(r.first_exhaustion, Some(4));
        assert!(!r.feasible);
        assert!(r.violation_positions.iter().all(|v| v.k >= 4));
        assert_eq!(r.forced_positions, [4]);
    }

    #[test]
    fn errors() {
        assert_eq!(detgreedy_rerank(&[], &half()), Err(Error::EmptyPool));
        let pool = [ScoredCandidate::new("x", "X", 0.1)];
        assert_eq!(
            detgreedy_rerank(&pool, &half()),
            Err(Error::LabelWithoutProportion("X".into()))
        );
        let pool = [ScoredCandidate::new("x", "F", f64::NAN)];
        assert!(matches!(detgreedy_rerank(&pool, &half()), Err(Error::InvalidScore { .. })));
    }

    #[test]
    fn feasibility_checker_examples() {
        assert!(check_feasibility(&["F", "M", "F", "M", "F", "M"], &half()).is_empty());
        let v = check_feasibility(&["F", "F", "F", "F", "M"], &half());
        let first = &v[0];
        assert_eq!((first.k, first.label.as_str(), first.kind), (2, "F", BoundKind::Ceiling));
        assert!(v.iter().any(|x| x.k == 2 && x.label == "M" && x.kind == BoundKind::Floor));
    }

    fn three() -> GroupScheme {
        GroupScheme::new("g", ["a", "b", "c"], "unknown").unwrap()
    }

    /// Pool whose composition equals the targets, so no group runs dry early.
    fn arb_balanced_pool() -> impl Strategy<Value = (Vec<ScoredCandidate>, GroupProportions)> {
        (2usize..=3, prop::collection::vec(1usize..60, 3), any::<u64>()).prop_map(|(m, sizes, seed)| {
            let scheme = if m == 2 { GroupScheme::binary_gender() } else { three() };
            let mut pool = Vec::new();
            let mut x = seed | 1;
            for (g, &n) in sizes.iter().take(m).enumerate() {
                for j in 0..n {
                    x ^= x << 13;
                    x ^= x >> 7;
                    x ^= x << 17;
                    let score = (x % 10_000) as f64 / 10_000.0;
                    pool.push(ScoredCandidate::new(format!("{g}-{j}"), scheme.labels()[g].clone(), score));
                }
            }
            let total = pool.len() as f64;
            let shares = sizes.iter().take(m).map(|&n| n as f64 / total).collect();
            (pool, props(scheme, shares))
        })
    }

    proptest! {
        #[test]
        fn balanced_pools_are_feasible((pool, p) in arb_balanced_pool()) {
            let r = detgreedy_rerank(&pool, &p).unwrap();
            prop_assert!(r.feasible, "{:?}", r.violation_positions.first());
            prop_assert!(check_feasibility(&r.labels, &p).is_empty());
            let mut counts = vec![0usize; p.scheme().len()];
            for (pos, l) in r.labels.iter().enumerate() {
                counts[p.scheme().index_of(l).unwrap()] += 1;
                for (c, s) in counts.iter().zip(p.shares()) {
                    prop_assert!((*c as f64 - s * (pos + 1) as f64).abs() < 1.0);
                }
            }
        }

        #[test]
        fn output_is_group_sorted_permutation((pool, p) in arb_balanced_pool()) {
            let r = detgreedy_rerank(&pool, &p).unwrap();
            let mut ids = r.order.clone();
            ids.sort();
            let mut want: Vec<String> = pool.iter().map(|c| c.candidate_id.clone()).collect();
            want.sort();
            prop_assert_eq!(ids, want);
            for g in p.scheme().labels() {
                let scores: Vec<f64> = r.order.iter()
                    .map(|id| pool.iter().find(|c| &c.candidate_id == id).unwrap())
                    .filter(|c| &c.label == g)
                    .map(|c| c.score)
                    .collect();
                prop_assert!(scores.windows(2).all(|w| w[0] >= w[1]));
            }
        }

        #[test]
        fn positive_rescaling_keeps_order((pool, p) in arb_balanced_pool(), factor in 0.01f64..100.0) {
            let scaled: Vec<_> = pool.iter()
                .map(|c| ScoredCandidate::new(c.candidate_id.clone(), c.label.clone(), c.score * factor))
                .collect();
            prop_assert_eq!(
                detgreedy_rerank(&pool, &p).unwrap().order,
                detgreedy_rerank(&scaled, &p).unwrap().order
            );
        }
    }
}
