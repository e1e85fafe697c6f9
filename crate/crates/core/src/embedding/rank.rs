use std::collections::HashMap;
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::GlobalEmbeddings;
use crate::error::{Error, Result};
use crate::kg::{CompletionQuery, Direction, EntityId, KnowledgeGraph, RelationId};

/// Anything that can score every entity as the answer to a query.
pub trait CandidateScorer: Sync {
    /// One score per entity id; higher is better.
    fn score_answers(&self, kg: &KnowledgeGraph, query: &CompletionQuery) -> Vec<f64>;
}

impl CandidateScorer for GlobalEmbeddings {
    fn score_answers(&self, kg: &KnowledgeGraph, query: &CompletionQuery) -> Vec<f64> {
        kg.entity_ids()
            .map(|e| {
                let t = query.complete(e);
                self.score(t.head, t.rel, t.tail)
            })
            .collect()
    }
}

/// Rankings produced elsewhere, keyed by query.
#[derive(Clone, Debug, Default)]
pub struct ExternalRanking {
    rankings: HashMap<(Direction, EntityId, RelationId), Vec<EntityId>>,
}

/// One line of an external-ranking JSONL file; entities and relations are
/// referenced by label.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RankingRecord {
    pub direction: Direction,
    pub known_entity: String,
    pub rel: String,
    pub ranked_entities: Vec<String>,
}

impl ExternalRanking {
    pub fn insert(&mut self, query: &CompletionQuery, ranked: Vec<EntityId>) {
        self.rankings
            .insert((query.direction, query.known, query.rel), ranked);
    }

    pub fn len(&self) -> usize {
        self.rankings.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rankings.is_empty()
    }
}

impl CandidateScorer for ExternalRanking {
    /// Listed entities score `-position`; unlisted ones `-inf`.
    fn score_answers(&self, kg: &KnowledgeGraph, query: &CompletionQuery) -> Vec<f64> {
        let mut scores = vec![f64::NEG_INFINITY; kg.num_entities()];
        if let Some(ranked) = self.rankings.get(&(query.direction, query.known, query.rel)) {
            for (pos, e) in ranked.iter().enumerate() {
                if let Some(s) = scores.get_mut(e.index()) {
                    if s.is_infinite() {
                        *s = -(pos as f64);
                    }
                }
            }
        }
        scores
    }
}

pub fn load_external_ranking(path: &Path, kg: &KnowledgeGraph) -> Result<ExternalRanking> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = ExternalRanking::default();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: RankingRecord =
            serde_json::from_str(&line).map_err(|e| Error::parse(path, i + 1, e.to_string()))?;
        let entity = |label: &str| {
            kg.entity_by_label(label)
                .ok_or_else(|| Error::parse(path, i + 1, format!("unknown entity {label:?}")))
        };
        let known = entity(&rec.known_entity)?;
        let rel = kg
            .relation_by_label(&rec.rel)
            .ok_or_else(|| Error::parse(path, i + 1, format!("unknown relation {:?}", rec.rel)))?;
        let ranked = rec
            .ranked_entities
            .iter()
            .map(|l| entity(l))
            .collect::<Result<Vec<_>>>()?;
        let query = CompletionQuery {
            direction: rec.direction,
            known,
            rel,
            gold: None,
        };
        out.insert(&query, ranked);
    }
    Ok(out)
}

/// Top-k entities for a query, best first.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CandidateSet {
    pub query: CompletionQuery,
    pub entities: Vec<EntityId>,
    pub scores: Vec<f64>,
}

impl CandidateSet {
    pub fn len(&self) -> usize {
        self.entities.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entities.is_empty()
    }

    pub fn position(&self, e: EntityId) -> Option<usize> {
        self.entities.iter().position(|&c| c == e)
    }

    pub fn contains(&self, e: EntityId) -> bool {
        self.entities.contains(&e)
    }
}

/// A full score vector together with the eligibility rule of its query.
///
/// Eligible entities are those whose completed triple is not in train;
/// in filtered mode every other known-true answer except the gold is
/// dropped as well.
pub struct ScoredRanking<'a> {
    kg: &'a KnowledgeGraph,
    query: CompletionQuery,
    scores: Vec<f64>,
}

impl<'a> ScoredRanking<'a> {
    pub fn new(kg: &'a KnowledgeGraph, query: CompletionQuery, scores: Vec<f64>) -> Self {
        assert_eq!(scores.len(), kg.num_entities(), "one score per entity");
        ScoredRanking { kg, query, scores }
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    fn excluded(&self, filtered: bool) -> Vec<bool> {
        let mut out = vec![false; self.kg.num_entities()];
        for e in self.kg.train_answers(&self.query) {
            out[e.index()] = true;
        }
        if filtered {
            for e in self.kg.known_true_answers(&self.query) {
                out[e.index()] = true;
            }
            if let Some(g) = self.query.gold {
                if let Some(x) = out.get_mut(g.index()) {
                    *x = false;
                }
            }
        }
        out
    }

    /// Eligible entities sorted by score descending, ties by ascending id.
    pub fn ranking(&self, filtered: bool) -> Vec<(EntityId, f64)> {
        let excluded = self.excluded(filtered);
        let mut out: Vec<(EntityId, f64)> = self
            .kg
            .entity_ids()
            .filter(|e| !excluded[e.index()])
            .map(|e| (e, self.scores[e.index()]))
            .collect();
        out.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        out
    }

    /// 1-based position of `e` in the ranking, or `None` if `e` is not
    /// eligible.
    pub fn rank_of(&self, e: EntityId, filtered: bool) -> Option<usize> {
        let excluded = self.excluded(filtered);
        if e.index() >= excluded.len() || excluded[e.index()] {
            return None;
        }
        let s = self.scores[e.index()];
        let ahead = self
            .kg
            .entity_ids()
            .filter(|x| !excluded[x.index()])
            .filter(|x| {
                let o = self.scores[x.index()];
                o.total_cmp(&s).is_gt() || (o.total_cmp(&s).is_eq() && *x < e)
            })
            .count();
        Some(ahead + 1)
    }

    /// Unfiltered top-k prefix.
    pub fn candidates(&self, k: usize) -> CandidateSet {
        assert!(k >= 1, "k must be at least 1");
        let (entities, scores) = self.ranking(false).into_iter().take(k).unzip();
        CandidateSet {
            query: self.query,
            entities,
            scores,
        }
    }
}

pub fn rank_from_scores(
    kg: &KnowledgeGraph,
    query: &CompletionQuery,
    scores: Vec<f64>,
    filtered: bool,
) -> Vec<(EntityId, f64)> {
    ScoredRanking::new(kg, *query, scores).ranking(filtered)
}

pub fn rank_entities(
    kg: &KnowledgeGraph,
    scorer: &dyn CandidateScorer,
    query: &CompletionQuery,
    filtered: bool,
) -> Vec<(EntityId, f64)> {
    rank_from_scores(kg, query, scorer.score_answers(kg, query), filtered)
}

pub fn collect_candidates(
    kg: &KnowledgeGraph,
    scorer: &dyn CandidateScorer,
    query: &CompletionQuery,
    k: usize,
) -> CandidateSet {
    ScoredRanking::new(kg, *query, scorer.score_answers(kg, query)).candidates(k)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures::{random_kg, toy_t1};
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    struct Table(HashMap<EntityId, f64>);

    impl CandidateScorer for Table {
        fn score_answers(&self, kg: &KnowledgeGraph, _: &CompletionQuery) -> Vec<f64> {
            kg.entity_ids()
                .map(|e| self.0.get(&e).copied().unwrap_or(f64::NEG_INFINITY))
                .collect()
        }
    }

    fn t1_ids(kg: &KnowledgeGraph, labels: &[&str]) -> Vec<EntityId> {
        labels.iter().map(|l| kg.entity_by_label(l).unwrap()).collect()
    }

    #[test]
    fn sorts_by_score_then_id() {
        // Query whose train answers are empty, so all five entities are eligible.
        let kg = toy_t1();
        let [a, d, e] = t1_ids(&kg, &["A", "D", "E"])[..] else { unreachable!() };
        let scorer = Table(HashMap::from([(a, 0.9), (d, 0.5), (e, 0.1)]));
        let q = CompletionQuery::head(RelationId(2), kg.entity_by_label("C").unwrap(), None);
        let ranked: Vec<_> = rank_entities(&kg, &scorer, &q, false)
            .into_iter()
            .map(|(e, _)| e)
            .take(3)
            .collect();
        assert_eq!(ranked, vec![a, d, e]);
    }

    #[test]
    fn candidate_a_is_eligible_for_t1_test_query() {
        let kg = toy_t1();
        let c = kg.entity_by_label("C").unwrap();
        let a = kg.entity_by_label("A").unwrap();
        let q = CompletionQuery::head(kg.relation_by_label("r3").unwrap(), c, Some(a));
        let ranked = rank_entities(&kg, &EqualScores, &q, false);
        assert!(ranked.iter().any(|(e, _)| *e == a));
    }

    #[test]
    fn filtered_ranking_drops_known_true_competitors() {
        // Raw order x1, x2, gold; x1 is known true.
        let kg = KnowledgeGraph::from_ids(
            4,
            1,
            vec![],
            vec![Triple::new(EntityId(3), RelationId(0), EntityId(0))],
            vec![Triple::new(EntityId(3), RelationId(0), EntityId(2))],
        );
        let q = CompletionQuery::tail(EntityId(3), RelationId(0), Some(EntityId(2)));
        let scores = vec![0.9, 0.8, 0.7, f64::NEG_INFINITY];
        let sr = ScoredRanking::new(&kg, q, scores);
        let ids: Vec<_> = sr.ranking(true).into_iter().map(|(e, _)| e).take(2).collect();
        assert_eq!(ids, vec![EntityId(1), EntityId(2)]);
        assert_eq!(sr.rank_of(EntityId(2), true), Some(2));
        assert_eq!(sr.rank_of(EntityId(2), false), Some(3));
        assert_eq!(sr.rank_of(EntityId(0), true), None);
    }

    #[test]
    fn t1_candidates_prefix_of_mock_ranking() {
        let kg = toy_t1();
        let ids = t1_ids(&kg, &["A", "D", "B", "E"]);
        let scorer = Table(ids.iter().zip([4.0, 3.0, 2.0, 1.0]).map(|(e, s)| (*e, s)).collect());
        let c = kg.entity_by_label("C").unwrap();
        let q = CompletionQuery::head(kg.relation_by_label("r3").unwrap(), c, None);
        let cands = collect_candidates(&kg, &scorer, &q, 2);
        assert_eq!(cands.entities, ids[..2].to_vec());
        assert_eq!(cands.scores, vec![4.0, 3.0]);
    }

    #[test]
    fn k_larger_than_entity_count_truncates() {
        let kg = toy_t1();
        let b = kg.entity_by_label("B").unwrap();
        let q = CompletionQuery::tail(b, kg.relation_by_label("r2").unwrap(), None);
        let cands = collect_candidates(&kg, &EqualScores, &q, 100);
        // C and E are train answers of (B, r2, ?).
        assert_eq!(cands.len(), 3);
    }

    #[test]
    fn external_ranking_scores_follow_list_order() {
        let kg = toy_t1();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("rank.jsonl");
        fs::write(
            &path,
            r#"{"direction":"head","known_entity":"C","rel":"r3","ranked_entities":["E","A","D"]}"#,
        )
        .unwrap();
        let ext = load_external_ranking(&path, &kg).unwrap();
        let c = kg.entity_by_label("C").unwrap();
        let q = CompletionQuery::head(kg.relation_by_label("r3").unwrap(), c, None);
        let cands = collect_candidates(&kg, &ext, &q, 3);
        assert_eq!(cands.entities, t1_ids(&kg, &["E", "A", "D"]));
    }

    #[test]
    fn external_ranking_rejects_unknown_labels() {
        let kg = toy_t1();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("rank.jsonl");
        fs::write(
            &path,
            r#"{"direction":"tail","known_entity":"Q","rel":"r3","ranked_entities":[]}"#,
        )
        .unwrap();
        assert!(matches!(load_external_ranking(&path, &kg), Err(Error::Parse { line: 1, .. })));
    }

    struct EqualScores;

    impl CandidateScorer for EqualScores {
        fn score_answers(&self, kg: &KnowledgeGraph, _: &CompletionQuery) -> Vec<f64> {
            vec![0.0; kg.num_entities()]
        }
    }

    use crate::kg::Triple;

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn ranking_is_a_permutation_of_the_eligible_set(seed in any::<u64>(), n in 1usize..200) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let kg = random_kg(&mut rng, n, 3, n * 2, 0.1, 0.1);
            let scores: Vec<f64> = (0..n).map(|i| ((i * 7919 + seed as usize) % 13) as f64).collect();
            let q = CompletionQuery::tail(EntityId(0), RelationId(0), None);
            let ranked = rank_from_scores(&kg, &q, scores.clone(), false);
            let mut got: Vec<_> = ranked.iter().map(|(e, _)| *e).collect();
            got.sort();
            let expected: Vec<_> = kg.entity_ids().filter(|e| !kg.in_train(&q.complete(*e))).collect();
            prop_assert_eq!(got, expected);
            prop_assert!(ranked.windows(2).all(|w| w[0].1 > w[1].1 || (w[0].1 == w[1].1 && w[0].0 < w[1].0)));
        }
    }
}
