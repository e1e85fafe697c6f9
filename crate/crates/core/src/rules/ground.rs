use std::collections::{BTreeSet, HashMap};

use super::{BodyStep, Rule};
use crate::kg::{EntityId, KnowledgeGraph, RelationId, Triple};

/// Where a single body step can lead from a given entity.
pub trait StepIndex {
    /// Reachable entities, ascending.
    fn targets(&self, from: EntityId, step: BodyStep) -> &[EntityId];
}

impl StepIndex for KnowledgeGraph {
    fn targets(&self, from: EntityId, step: BodyStep) -> &[EntityId] {
        if step.inverse {
            self.heads(from, step.rel)
        } else {
            self.tails(from, step.rel)
        }
    }
}

/// Step index over an explicit triple list, e.g. a retrieved subgraph.
#[derive(Clone, Debug, Default)]
pub struct LocalIndex {
    forward: HashMap<(EntityId, RelationId), Vec<EntityId>>,
    backward: HashMap<(EntityId, RelationId), Vec<EntityId>>,
}

impl LocalIndex {
    pub fn new<'a>(triples: impl IntoIterator<Item = &'a Triple>) -> Self {
        let mut idx = LocalIndex::default();
        for t in triples {
            idx.forward.entry((t.head, t.rel)).or_default().push(t.tail);
            idx.backward.entry((t.tail, t.rel)).or_default().push(t.head);
        }
        for v in idx.forward.values_mut().chain(idx.backward.values_mut()) {
            v.sort_unstable();
            v.dedup();
        }
        idx
    }
}

impl StepIndex for LocalIndex {
    fn targets(&self, from: EntityId, step: BodyStep) -> &[EntityId] {
        let map = if step.inverse { &self.backward } else { &self.forward };
        map.get(&(from, step.rel)).map_or(&[], Vec::as_slice)
    }
}

fn step_triple(from: EntityId, to: EntityId, step: BodyStep) -> Triple {
    if step.inverse {
        Triple::new(to, step.rel, from)
    } else {
        Triple::new(from, step.rel, to)
    }
}

/// Up to `limit` triple sequences realising `body` from `start` to `end`,
/// enumerated with ascending intermediate entities.
pub fn ground_body<I: StepIndex + ?Sized>(
    index: &I,
    body: &[BodyStep],
    start: EntityId,
    end: EntityId,
    limit: usize,
) -> Vec<Vec<Triple>> {
    let mut out = Vec::new();
    if body.is_empty() || limit == 0 {
        return out;
    }
    let mut path = Vec::with_capacity(body.len());
    extend(index, body, start, end, limit, &mut path, &mut out);
    out
}

fn extend<I: StepIndex + ?Sized>(
    index: &I,
    body: &[BodyStep],
    at: EntityId,
    end: EntityId,
    limit: usize,
    path: &mut Vec<Triple>,
    out: &mut Vec<Vec<Triple>>,
) {
    let step = body[path.len()];
    let targets = index.targets(at, step);
    if path.len() + 1 == body.len() {
        if targets.binary_search(&end).is_ok() {
            path.push(step_triple(at, end, step));
            out.push(path.clone());
            path.pop();
        }
        return;
    }
    for &next in targets {
        if out.len() >= limit {
            return;
        }
        path.push(step_triple(at, next, step));
        extend(index, body, next, end, limit, path, out);
        path.pop();
    }
}

pub fn ground_rule(
    kg: &KnowledgeGraph,
    rule: &Rule,
    start: EntityId,
    end: EntityId,
    limit: usize,
) -> Vec<Vec<Triple>> {
    ground_body(kg, &rule.body, start, end, limit)
}

/// Every entity reachable from `start` by some walk matching `body`.
pub fn body_reach<I: StepIndex + ?Sized>(index: &I, body: &[BodyStep], start: EntityId) -> BTreeSet<EntityId> {
    let mut frontier = BTreeSet::from([start]);
    for &step in body {
        let mut next = BTreeSet::new();
        for &x in &frontier {
            next.extend(index.targets(x, step).iter().copied());
        }
        if next.is_empty() {
            return next;
        }
        frontier = next;
    }
    frontier
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures::{random_kg, toy_t1};
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t1_rule() -> Rule {
        Rule::new(
            RelationId(2),
            vec![BodyStep::forward(RelationId(0)), BodyStep::forward(RelationId(1))],
            0.25,
            1,
        )
    }

    #[test]
    fn grounds_a_to_c() {
        let kg = toy_t1();
        let e = |l| kg.entity_by_label(l).unwrap();
        let got = ground_rule(&kg, &t1_rule(), e("A"), e("C"), 10);
        assert_eq!(
            got,
            vec![vec![
                Triple::new(e("A"), RelationId(0), e("B")),
                Triple::new(e("B"), RelationId(1), e("C"))
            ]]
        );
    }

    #[test]
    fn grounds_d_to_e() {
        let kg = toy_t1();
        let e = |l| kg.entity_by_label(l).unwrap();
        let got = ground_rule(&kg, &t1_rule(), e("D"), e("E"), 10);
        assert_eq!(
            got,
            vec![vec![
                Triple::new(e("D"), RelationId(0), e("B")),
                Triple::new(e("B"), RelationId(1), e("E"))
            ]]
        );
    }

    #[test]
    fn empty_graph_has_no_groundings() {
        let kg = KnowledgeGraph::from_ids(3, 3, vec![], vec![], vec![]);
        assert!(ground_rule(&kg, &t1_rule(), EntityId(0), EntityId(1), 10).is_empty());
    }

    #[test]
    fn inverse_steps_follow_stored_orientation() {
        let kg = toy_t1();
        let e = |l| kg.entity_by_label(l).unwrap();
        // A -r1-> B <-r1- D : body r1 · r1⁻¹
        let body = [BodyStep::forward(RelationId(0)), BodyStep::inverse(RelationId(0))];
        let got = ground_body(&kg, &body, e("A"), e("D"), 10);
        assert_eq!(
            got,
            vec![vec![
                Triple::new(e("A"), RelationId(0), e("B")),
                Triple::new(e("D"), RelationId(0), e("B"))
            ]]
        );
    }

    #[test]
    fn limit_caps_the_number_of_groundings() {
        // S -r-> M_i -r-> T for five middles.
        let mut train = Vec::new();
        for m in 2..7 {
            train.push(Triple::new(EntityId(0), RelationId(0), EntityId(m)));
            train.push(Triple::new(EntityId(m), RelationId(0), EntityId(1)));
        }
        let kg = KnowledgeGraph::from_ids(7, 1, train, vec![], vec![]);
        let body = [BodyStep::forward(RelationId(0)); 2];
        let all = ground_body(&kg, &body, EntityId(0), EntityId(1), 100);
        assert_eq!(all.len(), 5);
        let mids: Vec<_> = all.iter().map(|g| g[0].tail.0).collect();
        assert_eq!(mids, vec![2, 3, 4, 5, 6]);
        assert_eq!(ground_body(&kg, &body, EntityId(0), EntityId(1), 2).len(), 2);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn groundings_are_train_walks_between_the_endpoints(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let kg = random_kg(&mut rng, 30, 3, 120, 0.0, 0.0);
            use rand::Rng;
            let len = rng.gen_range(1..=3);
            let body: Vec<BodyStep> = (0..len)
                .map(|_| BodyStep { rel: RelationId(rng.gen_range(0..3)), inverse: rng.gen_bool(0.5) })
                .collect();
            let start = EntityId(rng.gen_range(0..30));
            for end in kg.entity_ids() {
                for g in ground_body(&kg, &body, start, end, 50) {
                    prop_assert_eq!(g.len(), body.len());
                    let mut at = start;
                    for (t, step) in g.iter().zip(&body) {
                        prop_assert!(kg.in_train(t));
                        prop_assert_eq!(t.rel, step.rel);
                        let (from, to) = if step.inverse { (t.tail, t.head) } else { (t.head, t.tail) };
                        prop_assert_eq!(from, at);
                        at = to;
                    }
                    prop_assert_eq!(at, end);
                }
            }
        }
    }
}
