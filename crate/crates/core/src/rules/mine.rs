use std::collections::{BTreeSet, HashSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{body_reach, BodyStep, Rule, RuleSet, DEFAULT_MAX_RULE_LEN};
use crate::error::{Error, Result};
use crate::kg::{EntityId, KnowledgeGraph, RelationId, Triple};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MiningConfig {
    pub max_len: usize,
    pub min_support: usize,
    /// Rules below this confidence are discarded.
    pub min_confidence: f64,
    /// Triples per relation used to discover body patterns. When it covers
    /// every triple of a relation, confidences are computed exhaustively;
    /// otherwise body support is estimated from this many start entities.
    pub samples_per_rel: usize,
    pub seed: u64,
}

impl Default for MiningConfig {
    fn default() -> Self {
        MiningConfig {
            max_len: DEFAULT_MAX_RULE_LEN,
            min_support: 1,
            min_confidence: 0.0,
            samples_per_rel: 1000,
            seed: 7,
        }
    }
}

/// Path-sampling miner. For every relation `r`, simple paths between the
/// endpoints of sampled `r` triples become candidate bodies; each body is
/// scored by standard confidence `|body ∧ head| / |body|` over entity pairs.
pub fn mine_rules(kg: &KnowledgeGraph, config: &MiningConfig) -> Result<RuleSet> {
    if config.max_len < 1 {
        return Err(Error::Config("rules.max_len must be at least 1".into()));
    }
    if !(0.0..=1.0).contains(&config.min_confidence) {
        return Err(Error::Config("rules.min_confidence must lie in [0, 1]".into()));
    }
    if kg.train().is_empty() {
        return Err(Error::Training("train split is empty".into()));
    }
    let per_relation: Vec<Vec<Rule>> = kg
        .relation_ids()
        .collect::<Vec<_>>()
        .par_iter()
        .map(|&r| mine_relation(kg, r, config))
        .collect();
    Ok(RuleSet::new(per_relation.into_iter().flatten().collect()))
}

fn relation_rng(seed: u64, r: RelationId, salt: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ (u64::from(r.0) << 32) ^ salt)
}

fn mine_relation(kg: &KnowledgeGraph, r: RelationId, config: &MiningConfig) -> Vec<Rule> {
    let triples = kg.relation_triples(r);
    if triples.is_empty() {
        return Vec::new();
    }
    let exhaustive = config.samples_per_rel >= triples.len();
    let sample: Vec<Triple> = if exhaustive {
        triples.to_vec()
    } else {
        let mut rng = relation_rng(config.seed, r, 0x0a11);
        triples
            .choose_multiple(&mut rng, config.samples_per_rel)
            .copied()
            .collect()
    };

    let trivial = vec![BodyStep::forward(r)];
    let mut patterns = BTreeSet::new();
    for t in &sample {
        let mut visited = HashSet::from([t.head]);
        let mut body = Vec::new();
        collect_paths(kg, t.head, t.tail, config.max_len, &mut visited, &mut body, &mut patterns);
    }
    patterns.remove(&trivial);

    patterns
        .into_iter()
        .filter_map(|body| {
            let starts = start_entities(kg, body[0]);
            let starts = if exhaustive || starts.len() <= config.samples_per_rel {
                starts
            } else {
                let mut rng = relation_rng(config.seed, r, 0x57a7);
                let mut s: Vec<_> = starts
                    .choose_multiple(&mut rng, config.samples_per_rel)
                    .copied()
                    .collect();
                s.sort_unstable();
                s
            };
            let (mut body_pairs, mut support) = (0usize, 0usize);
            for x in starts {
                let reach = body_reach(kg, &body, x);
                body_pairs += reach.len();
                let heads = kg.tails(x, r);
                support += reach.iter().filter(|y| heads.binary_search(y).is_ok()).count();
            }
            if body_pairs == 0 || support < config.min_support {
                return None;
            }
            let confidence = support as f64 / body_pairs as f64;
            (confidence >= config.min_confidence).then(|| Rule::new(r, body, confidence, support))
        })
        .collect()
}

/// Entities from which `step` can be taken, ascending.
fn start_entities(kg: &KnowledgeGraph, step: BodyStep) -> Vec<EntityId> {
    let mut out: Vec<EntityId> = kg
        .relation_triples(step.rel)
        .iter()
        .map(|t| if step.inverse { t.tail } else { t.head })
        .collect();
    out.sort_unstable();
    out.dedup();
    out
}

fn collect_paths(
    kg: &KnowledgeGraph,
    at: EntityId,
    target: EntityId,
    remaining: usize,
    visited: &mut HashSet<EntityId>,
    body: &mut Vec<BodyStep>,
    out: &mut BTreeSet<Vec<BodyStep>>,
) {
    if remaining == 0 {
        return;
    }
    for step in kg.adjacency(at) {
        let s = BodyStep {
            rel: step.rel,
            inverse: step.inverse,
        };
        if step.neighbor == target {
            body.push(s);
            out.insert(body.clone());
            body.pop();
            continue;
        }
        if remaining > 1 && visited.insert(step.neighbor) {
            body.push(s);
            collect_paths(kg, step.neighbor, target, remaining - 1, visited, body, out);
            body.pop();
            visited.remove(&step.neighbor);
        }
    }
}
