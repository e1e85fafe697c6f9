//! Independent reference implementations used by the integration and
//! acceptance tests. They work from raw triple lists and never call the
//! library's ranking, filtering, mining or rerank code.
#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet, HashSet};

use drkgc_core::embedding::CandidateScorer;
use drkgc_core::kg::{CompletionQuery, Direction, EntityId, KnowledgeGraph, RelationId, Triple};
use drkgc_core::rules::BodyStep;

/// Deterministic scores with many ties: `hash(query, entity) % levels`.
pub struct HashScorer {
    pub salt: u64,
    pub levels: u64,
}

impl HashScorer {
    pub fn score(&self, q: &CompletionQuery, e: EntityId) -> f64 {
        let dir = u64::from(q.direction == Direction::Head);
        let mut x = self.salt
            ^ (u64::from(q.known.0) << 1)
            ^ (u64::from(q.rel.0) << 21)
            ^ (dir << 41)
            ^ (u64::from(e.0) << 43);
        // splitmix64 finaliser
        x = (x ^ (x >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
        x = (x ^ (x >> 27)).wrapping_mul(0x94d049bb133111eb);
        x ^= x >> 31;
        (x % self.levels) as f64
    }
}

impl CandidateScorer for HashScorer {
    fn score_answers(&self, kg: &KnowledgeGraph, q: &CompletionQuery) -> Vec<f64> {
        (0..kg.num_entities() as u32).map(|e| self.score(q, EntityId(e))).collect()
    }
}

/// How the brute-force evaluator picks a candidate.
#[derive(Copy, Clone, Debug)]
pub enum Pick {
    First,
    GoldIfPresent,
    FirstWrong,
}

pub struct BruteResult {
    /// `None` for skipped queries.
    pub base: Vec<Option<usize>>,
    pub last: Vec<Option<usize>>,
    pub recall_hits: usize,
}

fn complete(q: &CompletionQuery, e: EntityId) -> Triple {
    match q.direction {
        Direction::Head => Triple::new(e, q.rel, q.known),
        Direction::Tail => Triple::new(q.known, q.rel, e),
    }
}

/// Filtered evaluation by enumeration. `displace` selects the displacement
/// rerank rule, otherwise gold keeps its base rank on a wrong pick.
pub fn brute_evaluate(
    kg: &KnowledgeGraph,
    score: &dyn Fn(&CompletionQuery, EntityId) -> f64,
    pick: Pick,
    queries: &[CompletionQuery],
    k: usize,
    displace: bool,
) -> BruteResult {
    let train: HashSet<Triple> = kg.train().iter().copied().collect();
    let all: HashSet<Triple> = kg.train().iter().chain(kg.valid()).chain(kg.test()).copied().collect();
    let n = kg.num_entities() as u32;
    let mut base = Vec::new();
    let mut last = Vec::new();
    let mut recall_hits = 0;
    for q in queries {
        let Some(gold) = q.gold.filter(|g| g.0 < n) else {
            base.push(None);
            last.push(None);
            continue;
        };
        let s = |e: EntityId| score(q, e);
        let beats = |a: EntityId, b: EntityId| s(a) > s(b) || (s(a) == s(b) && a.0 < b.0);
        // Filtered rank of x among entities that are neither known true
        // nor x itself, gold always being a competitor.
        let filtered_rank = |x: EntityId| -> Option<usize> {
            if x != gold && all.contains(&complete(q, x)) {
                return None;
            }
            let ahead = (0..n)
                .map(EntityId)
                .filter(|&e| e != x)
                .filter(|&e| e == gold || !all.contains(&complete(q, e)))
                .filter(|&e| beats(e, x))
                .count();
            Some(ahead + 1)
        };
        let gold_rank = filtered_rank(gold).expect("gold is always rankable");
        let mut cands: Vec<EntityId> = (0..n).map(EntityId).filter(|&e| !train.contains(&complete(q, e))).collect();
        cands.sort_by(|&a, &b| if beats(a, b) { std::cmp::Ordering::Less } else { std::cmp::Ordering::Greater });
        cands.truncate(k);
        if cands.contains(&gold) {
            recall_hits += 1;
        }
        let chosen = match pick {
            Pick::First => cands[0],
            Pick::GoldIfPresent => {
                if cands.contains(&gold) {
                    gold
                } else {
                    cands[0]
                }
            }
            Pick::FirstWrong => cands.iter().copied().find(|&c| c != gold).unwrap_or(cands[0]),
        };
        let final_rank = if chosen == gold {
            1
        } else {
            match filtered_rank(chosen) {
                Some(c) if displace && c > gold_rank => gold_rank + 1,
                _ => gold_rank,
            }
        };
        base.push(Some(gold_rank));
        last.push(Some(final_rank));
    }
    BruteResult {
        base,
        last,
        recall_hits,
    }
}

/// (mrr, hits1, hits3, hits10) of the non-skipped ranks.
pub fn brute_metrics(ranks: &[Option<usize>]) -> (f64, f64, f64, f64) {
    let r: Vec<usize> = ranks.iter().flatten().copied().collect();
    if r.is_empty() {
        return (0.0, 0.0, 0.0, 0.0);
    }
    let n = r.len() as f64;
    let mut mrr = 0.0;
    for &x in &r {
        mrr += 1.0 / x as f64;
    }
    let hit = |k| r.iter().filter(|&&x| x <= k).count() as f64 / n;
    (mrr / n, hit(1), hit(3), hit(10))
}

/// Endpoints of walks matching `body` from `x`, following raw triples.
pub fn walk(train: &[Triple], body: &[BodyStep], x: EntityId) -> BTreeSet<EntityId> {
    let mut cur = BTreeSet::from([x]);
    for step in body {
        let mut next = BTreeSet::new();
        for t in train.iter().filter(|t| t.rel == step.rel) {
            let (from, to) = if step.inverse { (t.tail, t.head) } else { (t.head, t.tail) };
            if cur.contains(&from) {
                next.insert(to);
            }
        }
        cur = next;
    }
    cur
}

/// Standard confidence by enumerating every start entity.
pub fn brute_confidence(kg: &KnowledgeGraph, head: RelationId, body: &[BodyStep]) -> (usize, usize) {
    let train = kg.train();
    let facts: HashSet<(EntityId, EntityId)> =
        train.iter().filter(|t| t.rel == head).map(|t| (t.head, t.tail)).collect();
    let (mut pairs, mut support) = (0, 0);
    for x in 0..kg.num_entities() as u32 {
        for y in walk(train, body, EntityId(x)) {
            pairs += 1;
            if facts.contains(&(EntityId(x), y)) {
                support += 1;
            }
        }
    }
    (support, pairs)
}

/// Whether some simple path `h → t` (inner nodes distinct and not `h` or
/// `t`) spells `body`.
fn spells(train: &[Triple], body: &[BodyStep], h: EntityId, t: EntityId) -> bool {
    fn go(train: &[Triple], body: &[BodyStep], at: EntityId, t: EntityId, seen: &mut Vec<EntityId>) -> bool {
        let Some((step, rest)) = body.split_first() else {
            return false;
        };
        for tr in train.iter().filter(|x| x.rel == step.rel) {
            let (from, to) = if step.inverse { (tr.tail, tr.head) } else { (tr.head, tr.tail) };
            if from != at {
                continue;
            }
            if rest.is_empty() {
                if to == t {
                    return true;
                }
            } else if to != t && !seen.contains(&to) {
                seen.push(to);
                let ok = go(train, rest, to, t, seen);
                seen.pop();
                if ok {
                    return true;
                }
            }
        }
        false
    }
    go(train, body, h, t, &mut vec![h])
}

/// Every body of length ≤ `max_len` that spells a path between the ends of
/// some `head` triple, with brute-force (support, body pairs).
pub fn brute_rules(kg: &KnowledgeGraph, head: RelationId, max_len: usize) -> BTreeMap<Vec<BodyStep>, (usize, usize)> {
    let steps: Vec<BodyStep> = (0..kg.num_relations() as u32)
        .flat_map(|r| [BodyStep::forward(RelationId(r)), BodyStep::inverse(RelationId(r))])
        .collect();
    let mut bodies: Vec<Vec<BodyStep>> = steps.iter().map(|s| vec![*s]).collect();
    let mut layer = bodies.clone();
    for _ in 1..max_len {
        layer = layer
            .iter()
            .flat_map(|b| {
                steps.iter().map(move |s| {
                    let mut nb = b.clone();
                    nb.push(*s);
                    nb
                })
            })
            .collect();
        bodies.extend(layer.iter().cloned());
    }
    let facts: Vec<Triple> = kg.train().iter().filter(|t| t.rel == head).copied().collect();
    bodies
        .into_iter()
        .filter(|b| b[..] != [BodyStep::forward(head)])
        .filter(|b| facts.iter().any(|t| spells(kg.train(), b, t.head, t.tail)))
        .map(|b| {
            let c = brute_confidence(kg, head, &b);
            (b, c)
        })
        .collect()
}
