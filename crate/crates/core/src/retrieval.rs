//! Bottom-up dynamic subgraph retrieval for a single query.
//!
//! Three phases fill a triple budget `tau`:
//! 1. one shortest path from every candidate to the anchor (always
//!    completes, even past `tau`);
//! 2. groundings of the query relation's rules, most confident rule first,
//!    each grounding admitted whole or not at all;
//! 3. breadth-first augmentation from the anchor and candidates along the
//!    query relation and the relations used by its rules.

use std::collections::{BTreeSet, HashMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::embedding::CandidateSet;
use crate::kg::{CompletionQuery, Direction, EntityId, KnowledgeGraph, RelationId, Triple};
use crate::rules::{ground_body, ground_rule, LocalIndex, RuleId, RuleSet, DEFAULT_MAX_RULE_LEN};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RetrievalConfig {
    pub tau: usize,
    pub use_rules: bool,
    /// Longest shortest path admitted in phase 1.
    pub path_cap: usize,
    /// Groundings enumerated per (rule, candidate) pair.
    pub grounding_limit: usize,
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        RetrievalConfig {
            tau: 100,
            use_rules: true,
            path_cap: DEFAULT_MAX_RULE_LEN,
            grounding_limit: 32,
        }
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    ShortestPath,
    RuleGrounding(RuleId),
    Augmentation,
}

impl Provenance {
    fn phase(self) -> usize {
        match self {
            Provenance::ShortestPath => 0,
            Provenance::RuleGrounding(_) => 1,
            Provenance::Augmentation => 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Subgraph {
    pub query: CompletionQuery,
    pub anchor: EntityId,
    pub candidates: Vec<EntityId>,
    triples: Vec<Triple>,
    provenance: Vec<Provenance>,
    members: HashSet<Triple>,
}

impl Subgraph {
    fn new(query: CompletionQuery, candidates: Vec<EntityId>) -> Self {
        Subgraph {
            query,
            anchor: query.known,
            candidates,
            triples: Vec::new(),
            provenance: Vec::new(),
            members: HashSet::new(),
        }
    }

    /// A hand-built subgraph; every triple is tagged as augmentation.
    pub fn from_triples(
        query: CompletionQuery,
        candidates: Vec<EntityId>,
        triples: impl IntoIterator<Item = Triple>,
    ) -> Self {
        let mut g = Subgraph::new(query, candidates);
        for t in triples {
            g.push(t, Provenance::Augmentation);
        }
        g
    }

    pub fn triples(&self) -> &[Triple] {
        &self.triples
    }

    pub fn provenance(&self) -> &[Provenance] {
        &self.provenance
    }

    pub fn len(&self) -> usize {
        self.triples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.triples.is_empty()
    }

    pub fn contains(&self, t: &Triple) -> bool {
        self.members.contains(t)
    }

    /// Entities touched by a triple, plus the anchor, ascending.
    pub fn entities(&self) -> Vec<EntityId> {
        let mut out: BTreeSet<EntityId> = self.triples.iter().flat_map(|t| [t.head, t.tail]).collect();
        out.insert(self.anchor);
        out.into_iter().collect()
    }

    fn missing<'a>(&self, triples: &'a [Triple]) -> Vec<&'a Triple> {
        let mut seen = HashSet::new();
        triples
            .iter()
            .filter(|t| !self.members.contains(t) && seen.insert(**t))
            .collect()
    }

    fn push(&mut self, t: Triple, p: Provenance) -> bool {
        if self.members.insert(t) {
            self.triples.push(t);
            self.provenance.push(p);
            true
        } else {
            false
        }
    }

    pub fn dump(&self, kg: &KnowledgeGraph) -> SubgraphDump {
        SubgraphDump {
            anchor: kg.entity_label(self.anchor).to_string(),
            relation: kg.relation_label(self.query.rel).to_string(),
            direction: self.query.direction,
            candidates: self
                .candidates
                .iter()
                .map(|e| kg.entity_label(*e).to_string())
                .collect(),
            triples: self
                .triples
                .iter()
                .zip(&self.provenance)
                .map(|(t, p)| DumpTriple {
                    h: kg.entity_label(t.head).to_string(),
                    r: kg.relation_label(t.rel).to_string(),
                    t: kg.entity_label(t.tail).to_string(),
                    phase: match p {
                        Provenance::ShortestPath => "shortest_path",
                        Provenance::RuleGrounding(_) => "rule_grounding",
                        Provenance::Augmentation => "augmentation",
                    }
                    .to_string(),
                    rule: match p {
                        Provenance::RuleGrounding(id) => Some(id.0),
                        _ => None,
                    },
                })
                .collect(),
        }
    }
}

/// Debug form of a subgraph with entities and relations by label.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubgraphDump {
    pub anchor: String,
    pub relation: String,
    pub direction: Direction,
    pub candidates: Vec<String>,
    pub triples: Vec<DumpTriple>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DumpTriple {
    pub h: String,
    pub r: String,
    pub t: String,
    pub phase: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rule: Option<usize>,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum AttemptOutcome {
    Admitted,
    /// Every triple of the grounding was already present.
    AlreadyPresent,
    /// Admitting it would have exceeded `tau`.
    OverBudget,
}

/// One phase-2 grounding considered during retrieval.
#[derive(Clone, Debug, PartialEq)]
pub struct GroundingAttempt {
    pub rule: RuleId,
    pub candidate: EntityId,
    pub grounding: Vec<Triple>,
    pub size_before: usize,
    pub new_triples: usize,
    pub outcome: AttemptOutcome,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RetrievalTrace {
    pub phase1_size: usize,
    pub attempts: Vec<GroundingAttempt>,
    /// Phase 2 ended because the budget was reached.
    pub budget_reached_in_phase2: bool,
}

/// Rule head variables `(x, y)` for a candidate answer.
pub fn rule_endpoints(query: &CompletionQuery, candidate: EntityId) -> (EntityId, EntityId) {
    match query.direction {
        Direction::Head => (candidate, query.known),
        Direction::Tail => (query.known, candidate),
    }
}

pub fn retrieve_subgraph(
    kg: &KnowledgeGraph,
    query: &CompletionQuery,
    cands: &CandidateSet,
    rules: &RuleSet,
    config: &RetrievalConfig,
) -> Subgraph {
    retrieve_subgraph_traced(kg, query, cands, rules, config).0
}

pub fn retrieve_subgraph_traced(
    kg: &KnowledgeGraph,
    query: &CompletionQuery,
    cands: &CandidateSet,
    rules: &RuleSet,
    config: &RetrievalConfig,
) -> (Subgraph, RetrievalTrace) {
    let tau = config.tau.max(1);
    let mut g = Subgraph::new(*query, cands.entities.clone());
    let mut trace = RetrievalTrace::default();

    for &c in &cands.entities {
        if let Some(path) = kg.shortest_path(c, g.anchor, config.path_cap) {
            for t in path {
                g.push(t, Provenance::ShortestPath);
            }
        }
    }
    trace.phase1_size = g.len();

    if config.use_rules && g.len() < tau {
        'rules: for (id, rule) in rules.for_head(query.rel) {
            for &c in &cands.entities {
                let (x, y) = rule_endpoints(query, c);
                for grounding in ground_rule(kg, rule, x, y, config.grounding_limit) {
                    let missing = g.missing(&grounding);
                    let size_before = g.len();
                    let outcome = if missing.is_empty() {
                        AttemptOutcome::AlreadyPresent
                    } else if size_before + missing.len() > tau {
                        AttemptOutcome::OverBudget
                    } else {
                        for t in missing.iter() {
                            g.push(**t, Provenance::RuleGrounding(id));
                        }
                        AttemptOutcome::Admitted
                    };
                    trace.attempts.push(GroundingAttempt {
                        rule: id,
                        candidate: c,
                        new_triples: missing.len(),
                        grounding,
                        size_before,
                        outcome,
                    });
                    if g.len() >= tau {
                        trace.budget_reached_in_phase2 = true;
                        break 'rules;
                    }
                }
            }
        }
    }

    if g.len() < tau {
        let mut relations: BTreeSet<RelationId> = BTreeSet::from([query.rel]);
        if config.use_rules {
            for (_, rule) in rules.for_head(query.rel) {
                relations.extend(rule.body.iter().map(|s| s.rel));
            }
        }
        augment(kg, &mut g, &relations, tau);
    }
    (g, trace)
}

fn augment(kg: &KnowledgeGraph, g: &mut Subgraph, relations: &BTreeSet<RelationId>, tau: usize) {
    let mut layer: BTreeSet<EntityId> = g.candidates.iter().copied().collect();
    layer.insert(g.anchor);
    let mut visited: HashSet<EntityId> = layer.iter().copied().collect();
    while !layer.is_empty() {
        let mut next = BTreeSet::new();
        for &e in &layer {
            let mut steps: Vec<_> = kg
                .adjacency(e)
                .iter()
                .filter(|s| relations.contains(&s.rel))
                .collect();
            steps.sort_by_key(|s| (s.rel, s.neighbor, s.inverse));
            for s in steps {
                if g.push(s.triple, Provenance::Augmentation) && g.len() >= tau {
                    return;
                }
                if visited.insert(s.neighbor) {
                    next.insert(s.neighbor);
                }
            }
        }
        layer = next;
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SubgraphReport {
    pub size: usize,
    /// Triples contributed by shortest paths, rule groundings, augmentation.
    pub phase_counts: [usize; 3],
    /// Share of candidates in the anchor's undirected component.
    pub connected_fraction: f64,
    /// Some rule of the query relation grounds gold ↔ anchor inside the subgraph.
    pub gold_grounding_present: bool,
}

pub fn subgraph_report(g: &Subgraph, rules: &RuleSet) -> SubgraphReport {
    let mut phase_counts = [0; 3];
    for p in g.provenance() {
        phase_counts[p.phase()] += 1;
    }
    let connected_fraction = if g.candidates.is_empty() {
        0.0
    } else {
        let mut uf = UnionFind::default();
        for t in g.triples() {
            uf.union(t.head, t.tail);
        }
        let root = uf.find(g.anchor);
        let connected = g.candidates.iter().filter(|&&c| uf.find(c) == root).count();
        connected as f64 / g.candidates.len() as f64
    };
    let gold_grounding_present = match g.query.gold {
        Some(gold) if !g.is_empty() => {
            let local = LocalIndex::new(g.triples());
            let (x, y) = rule_endpoints(&g.query, gold);
            rules
                .for_head(g.query.rel)
                .any(|(_, r)| !ground_body(&local, &r.body, x, y, 1).is_empty())
        }
        _ => false,
    };
    SubgraphReport {
        size: g.len(),
        phase_counts,
        connected_fraction,
        gold_grounding_present,
    }
}

#[derive(Default)]
struct UnionFind {
    parent: HashMap<EntityId, EntityId>,
}

impl UnionFind {
    fn find(&mut self, e: EntityId) -> EntityId {
        let p = *self.parent.entry(e).or_insert(e);
        if p == e {
            return e;
        }
        let root = self.find(p);
        self.parent.insert(e, root);
        root
    }

    fn union(&mut self, a: EntityId, b: EntityId) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            self.parent.insert(ra.max(rb), ra.min(rb));
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures::toy_t1;
    use crate::rules::{BodyStep, Rule};

    fn t1_setup() -> (KnowledgeGraph, CompletionQuery, CandidateSet, RuleSet) {
        let kg = toy_t1();
        let e = |l| kg.entity_by_label(l).unwrap();
        let r3 = kg.relation_by_label("r3").unwrap();
        let query = CompletionQuery::head(r3, e("C"), Some(e("A")));
        let cands = CandidateSet {
            query,
            entities: vec![e("A"), e("D")],
            scores: vec![2.0, 1.0],
        };
        let rules = RuleSet::new(vec![Rule::new(
            r3,
            vec![BodyStep::forward(RelationId(0)), BodyStep::forward(RelationId(1))],
            0.25,
            1,
        )]);
        (kg, query, cands, rules)
    }

    #[test]
    fn t1_three_phase_trace() {
        let (kg, query, cands, rules) = t1_setup();
        let e = |l| kg.entity_by_label(l).unwrap();
        let (r1, r2, r3) = (RelationId(0), RelationId(1), RelationId(2));
        let config = RetrievalConfig {
            tau: 10,
            ..RetrievalConfig::default()
        };
        let g = retrieve_subgraph(&kg, &query, &cands, &rules, &config);
        assert_eq!(
            g.triples(),
            &[
                Triple::new(e("A"), r1, e("B")),
                Triple::new(e("B"), r2, e("C")),
                Triple::new(e("D"), r1, e("B")),
                Triple::new(e("D"), r3, e("E")),
                Triple::new(e("B"), r2, e("E")),
            ]
        );
        let report = subgraph_report(&g, &rules);
        assert_eq!(
            report,
            SubgraphReport {
                size: 5,
                phase_counts: [3, 0, 2],
                connected_fraction: 1.0,
                gold_grounding_present: true,
            }
        );
    }

    #[test]
    fn minimal_budget_keeps_the_single_connecting_triple() {
        let kg = toy_t1();
        let e = |l| kg.entity_by_label(l).unwrap();
        let query = CompletionQuery::tail(e("A"), RelationId(0), None);
        let cands = CandidateSet {
            query,
            entities: vec![e("B")],
            scores: vec![1.0],
        };
        let config = RetrievalConfig {
            tau: 1,
            ..RetrievalConfig::default()
        };
        let g = retrieve_subgraph(&kg, &query, &cands, &RuleSet::empty(), &config);
        assert_eq!(g.triples(), &[Triple::new(e("A"), RelationId(0), e("B"))]);
    }

    #[test]
    fn ablation_skips_phase_two() {
        let (kg, query, cands, rules) = t1_setup();
        let config = RetrievalConfig {
            tau: 10,
            use_rules: false,
            ..RetrievalConfig::default()
        };
        let (g, trace) = retrieve_subgraph_traced(&kg, &query, &cands, &rules, &config);
        assert!(trace.attempts.is_empty());
        assert!(g.provenance().iter().all(|p| !matches!(p, Provenance::RuleGrounding(_))));
    }

    #[test]
    fn empty_subgraph_report_is_zero() {
        let kg = toy_t1();
        let q = CompletionQuery::tail(EntityId(0), RelationId(0), Some(EntityId(1)));
        let g = Subgraph::new(q, vec![]);
        let _ = &kg;
        assert_eq!(subgraph_report(&g, &RuleSet::empty()), SubgraphReport::default());
    }

    #[test]
    fn no_rules_means_no_gold_grounding() {
        let (kg, query, cands, _) = t1_setup();
        let g = retrieve_subgraph(&kg, &query, &cands, &RuleSet::empty(), &RetrievalConfig::default());
        assert!(!g.is_empty());
        assert!(!subgraph_report(&g, &RuleSet::empty()).gold_grounding_present);
    }

    #[test]
    fn unreachable_anchor_gets_augmentation_only() {
        // Anchor X only touches r3; candidate Y is in another component.
        let mut b = crate::kg::KgBuilder::new();
        b.push(crate::kg::Split::Train, "X", "r3", "Z")
            .push(crate::kg::Split::Train, "Y", "r1", "W");
        let kg = b.build();
        let e = |l| kg.entity_by_label(l).unwrap();
        let query = CompletionQuery::tail(e("X"), kg.relation_by_label("r3").unwrap(), None);
        let cands = CandidateSet {
            query,
            entities: vec![e("Y")],
            scores: vec![0.0],
        };
        let g = retrieve_subgraph(&kg, &query, &cands, &RuleSet::empty(), &RetrievalConfig::default());
        assert!(g.provenance().iter().all(|p| *p == Provenance::Augmentation));
        assert_eq!(g.len(), 1);
    }

    #[test]
    fn dump_uses_labels() {
        let (kg, query, cands, rules) = t1_setup();
        let g = retrieve_subgraph(&kg, &query, &cands, &rules, &RetrievalConfig::default());
        let dump = g.dump(&kg);
        assert_eq!(dump.anchor, "C");
        assert_eq!(dump.candidates, vec!["A", "D"]);
        assert_eq!(dump.triples[0].phase, "shortest_path");
        let json = serde_json::to_value(&dump).unwrap();
        assert!(json["triples"][0].get("h").is_some());
    }

    mod props {
        use super::*;
        use crate::fixtures::random_kg;
        use crate::rules::ground_rule;
        use proptest::prelude::*;
        use rand::{Rng, SeedableRng};
        use rand_chacha::ChaCha8Rng;

        struct Case {
            kg: KnowledgeGraph,
            query: CompletionQuery,
            cands: CandidateSet,
            rules: RuleSet,
            config: RetrievalConfig,
        }

        fn case(seed: u64) -> Case {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n_e = rng.gen_range(8..30);
            let n_r = rng.gen_range(1..4);
            let n_t = rng.gen_range(10..90);
            let kg = random_kg(&mut rng, n_e, n_r, n_t, 0.0, 0.0);
            let rel = RelationId(rng.gen_range(0..n_r as u32));
            let known = EntityId(rng.gen_range(0..n_e as u32));
            let query = if rng.gen_bool(0.5) {
                CompletionQuery::head(rel, known, None)
            } else {
                CompletionQuery::tail(known, rel, None)
            };
            let mut pool: Vec<EntityId> = kg.entity_ids().filter(|e| *e != known).collect();
            rand::seq::SliceRandom::shuffle(pool.as_mut_slice(), &mut rng);
            pool.truncate(rng.gen_range(1..8));
            let scores = (0..pool.len()).map(|i| -(i as f64)).collect();
            let cands = CandidateSet {
                query,
                entities: pool,
                scores,
            };
            let rules = (0..rng.gen_range(0..6))
                .map(|_| {
                    let body = (0..rng.gen_range(1..=3))
                        .map(|_| BodyStep {
                            rel: RelationId(rng.gen_range(0..n_r as u32)),
                            inverse: rng.gen_bool(0.5),
                        })
                        .collect();
                    Rule::new(rel, body, f64::from(rng.gen_range(1..=10u32)) / 10.0, 1)
                })
                .collect();
            let config = RetrievalConfig {
                tau: rng.gen_range(1..40),
                use_rules: rng.gen_bool(0.8),
                ..RetrievalConfig::default()
            };
            Case {
                kg,
                query,
                cands,
                rules: RuleSet::new(rules),
                config,
            }
        }

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(1000))]

            #[test]
            fn size_cap_holds(seed in any::<u64>()) {
                let c = case(seed);
                let (g, trace) = retrieve_subgraph_traced(&c.kg, &c.query, &c.cands, &c.rules, &c.config);
                prop_assert!(g.len() <= c.config.tau.max(trace.phase1_size));
                if trace.phase1_size <= c.config.tau {
                    prop_assert!(g.len() <= c.config.tau);
                }
                let unique: HashSet<_> = g.triples().iter().collect();
                prop_assert_eq!(unique.len(), g.len());
                prop_assert!(g.triples().iter().all(|t| c.kg.in_train(t)));
            }

            #[test]
            fn reachable_candidates_are_connected(seed in any::<u64>()) {
                let c = case(seed);
                let g = retrieve_subgraph(&c.kg, &c.query, &c.cands, &c.rules, &c.config);
                let mut uf = UnionFind { parent: HashMap::new() };
                for t in g.triples() {
                    uf.union(t.head, t.tail);
                }
                let root = uf.find(g.anchor);
                for &cand in &c.cands.entities {
                    if c.kg.shortest_path(cand, g.anchor, c.config.path_cap).is_some() {
                        prop_assert_eq!(uf.find(cand), root);
                    }
                }
            }

            #[test]
            fn retrieval_is_deterministic(seed in any::<u64>()) {
                let c = case(seed);
                let a = retrieve_subgraph(&c.kg, &c.query, &c.cands, &c.rules, &c.config);
                let b = retrieve_subgraph(&c.kg, &c.query, &c.cands, &c.rules, &c.config);
                prop_assert_eq!(a.triples(), b.triples());
                prop_assert_eq!(a.provenance(), b.provenance());
            }

            #[test]
            fn rule_order_is_respected(seed in any::<u64>()) {
                let c = case(seed);
                let (g, trace) = retrieve_subgraph_traced(&c.kg, &c.query, &c.cands, &c.rules, &c.config);
                let tau = c.config.tau;
                for admitted in trace.attempts.iter().filter(|a| a.outcome == AttemptOutcome::Admitted) {
                    let lower = c.rules.get(admitted.rule).confidence;
                    for (id, rule) in c.rules.for_head(c.query.rel).filter(|(_, r)| r.confidence > lower) {
                        for &cand in &c.cands.entities {
                            let (x, y) = rule_endpoints(&c.query, cand);
                            for grounding in ground_rule(&c.kg, rule, x, y, c.config.grounding_limit) {
                                let seen = trace.attempts.iter().find(|a| {
                                    a.rule == id && a.candidate == cand && a.grounding == grounding
                                });
                                let seen = seen.expect("higher-confidence grounding was skipped");
                                match seen.outcome {
                                    AttemptOutcome::OverBudget => {
                                        prop_assert!(seen.size_before + seen.new_triples > tau)
                                    }
                                    _ => prop_assert!(grounding.iter().all(|t| g.contains(t))),
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}
