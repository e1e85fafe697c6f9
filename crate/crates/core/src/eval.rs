//! Filtered ranking metrics, noise injection, inductive query selection and
//! experiment reports.

use std::collections::HashSet;
use std::fmt::Write as _;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::embedding::{CandidateScorer, ScoredRanking};
use crate::error::{Error, Result};
use crate::kg::{CompletionQuery, Direction, EntityId, KnowledgeGraph, RelationId, Split, Triple};
use crate::selector::{rerank, RerankPolicy, SelectionSource, Selector};

/// MRR and Hits@n over one group of ranks.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mrr: f64,
    pub hits1: f64,
    pub hits3: f64,
    pub hits10: f64,
    pub query_count: usize,
}

impl Summary {
    /// Sums run in slice order so equal inputs give bit-equal outputs.
    pub fn from_ranks(ranks: &[usize]) -> Self {
        if ranks.is_empty() {
            return Summary::default();
        }
        let n = ranks.len() as f64;
        let hits = |k: usize| ranks.iter().filter(|&&r| r <= k).count() as f64 / n;
        Summary {
            mrr: ranks.iter().map(|&r| 1.0 / r as f64).sum::<f64>() / n,
            hits1: hits(1),
            hits3: hits(3),
            hits10: hits(10),
            query_count: ranks.len(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub mrr: f64,
    pub hits1: f64,
    pub hits3: f64,
    pub hits10: f64,
    pub query_count: usize,
    /// Queries without a usable gold answer.
    pub skipped: usize,
    pub head: Summary,
    pub tail: Summary,
}

impl Metrics {
    pub fn from_records(records: &[QueryRecord], skipped: usize) -> Self {
        let ranks = |dir: Option<Direction>| -> Vec<usize> {
            records
                .iter()
                .filter(|r| dir.map_or(true, |d| r.query.direction == d))
                .map(|r| r.final_rank)
                .collect()
        };
        let all = Summary::from_ranks(&ranks(None));
        Metrics {
            mrr: all.mrr,
            hits1: all.hits1,
            hits3: all.hits3,
            hits10: all.hits10,
            query_count: all.query_count,
            skipped,
            head: Summary::from_ranks(&ranks(Some(Direction::Head))),
            tail: Summary::from_ranks(&ranks(Some(Direction::Tail))),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("metrics serialise")
    }
}

/// What happened to one query.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QueryRecord {
    pub query: CompletionQuery,
    pub base_rank: usize,
    pub final_rank: usize,
    pub chosen: EntityId,
    pub source: SelectionSource,
    pub gold_in_candidates: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub metrics: Metrics,
    pub records: Vec<QueryRecord>,
}

impl Evaluation {
    /// Share of evaluated queries whose gold answer made the candidate set.
    pub fn candidate_recall(&self) -> f64 {
        if self.records.is_empty() {
            return 0.0;
        }
        self.records.iter().filter(|r| r.gold_in_candidates).count() as f64 / self.records.len() as f64
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalOptions {
    pub k: usize,
    pub policy: RerankPolicy,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            k: 20,
            policy: RerankPolicy::default(),
        }
    }
}

/// Head and tail queries for every triple of a split.
pub fn split_queries(kg: &KnowledgeGraph, split: Split) -> Vec<CompletionQuery> {
    kg.split(split).iter().flat_map(|t| CompletionQuery::pair_from(*t)).collect()
}

/// Ranks gold among all eligible entities (filtered), lets the selector
/// pick from the unfiltered top-k, then applies [`rerank`].
///
/// Queries without a gold answer in the entity table are skipped and
/// counted.
pub fn evaluate_queries(
    kg: &KnowledgeGraph,
    scorer: &dyn CandidateScorer,
    selector: &dyn Selector,
    queries: &[CompletionQuery],
    options: &EvalOptions,
) -> Evaluation {
    assert!(options.k >= 1, "k must be at least 1");
    let outcomes: Vec<Option<QueryRecord>> = queries
        .par_iter()
        .map(|q| evaluate_one(kg, scorer, selector, q, options))
        .collect();
    let skipped = outcomes.iter().filter(|o| o.is_none()).count();
    let records: Vec<QueryRecord> = outcomes.into_iter().flatten().collect();
    if skipped > 0 {
        log::warn!("{skipped} queries skipped: no usable gold answer");
    }
    Evaluation {
        metrics: Metrics::from_records(&records, skipped),
        records,
    }
}

pub fn evaluate(
    kg: &KnowledgeGraph,
    scorer: &dyn CandidateScorer,
    selector: &dyn Selector,
    split: Split,
    options: &EvalOptions,
) -> Evaluation {
    evaluate_queries(kg, scorer, selector, &split_queries(kg, split), options)
}

fn evaluate_one(
    kg: &KnowledgeGraph,
    scorer: &dyn CandidateScorer,
    selector: &dyn Selector,
    query: &CompletionQuery,
    options: &EvalOptions,
) -> Option<QueryRecord> {
    let gold = query.gold?;
    if gold.index() >= kg.num_entities() {
        return None;
    }
    let ranking = ScoredRanking::new(kg, *query, scorer.score_answers(kg, query));
    let base_rank = ranking.rank_of(gold, true)?;
    let cands = ranking.candidates(options.k);
    if cands.is_empty() {
        return None;
    }
    let sel = selector.select(kg, query, &cands);
    debug_assert!(cands.contains(sel.chosen), "selection outside the candidate set");
    let chosen_rank = ranking.rank_of(sel.chosen, true);
    Some(QueryRecord {
        query: *query,
        base_rank,
        final_rank: rerank(base_rank, gold, sel.chosen, chosen_rank, options.policy),
        chosen: sel.chosen,
        source: sel.source,
        gold_in_candidates: cands.contains(gold),
    })
}

/// Replaces `⌊proportion·|train|⌋` uniformly chosen train triples with
/// random triples found in no split. Tables and valid/test are untouched.
pub fn inject_noise(kg: &KnowledgeGraph, proportion: f64, seed: u64) -> Result<KnowledgeGraph> {
    if !(0.0..=1.0).contains(&proportion) {
        return Err(Error::Config(format!("noise proportion {proportion} is outside [0, 1]")));
    }
    let train = kg.train();
    let n = (proportion * train.len() as f64).floor() as usize;
    if n == 0 {
        return Ok(kg.with_train(train.to_vec()));
    }
    let (n_e, n_r) = (kg.num_entities(), kg.num_relations());
    let mut taken: HashSet<Triple> = train.iter().chain(kg.valid()).chain(kg.test()).copied().collect();
    let free = (n_e * n_e * n_r).saturating_sub(taken.len());
    if free < n {
        return Err(Error::GraphTooSmall(format!(
            "{n} noise triples requested but only {free} unused (h, r, t) combinations exist"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let victims = index::sample(&mut rng, train.len(), n);
    let mut out = train.to_vec();
    for i in victims.iter() {
        let t = loop {
            let t = Triple::new(
                EntityId(rng.gen_range(0..n_e as u32)),
                RelationId(rng.gen_range(0..n_r as u32)),
                EntityId(rng.gen_range(0..n_e as u32)),
            );
            if taken.insert(t) {
                break t;
            }
        };
        out[i] = t;
    }
    Ok(kg.with_train(out))
}

/// Head and tail queries for test triples that mention an entity or a
/// relation never seen in train.
pub fn inductive_subset(kg: &KnowledgeGraph) -> Vec<CompletionQuery> {
    kg.test()
        .iter()
        .filter(|t| !(kg.entity_in_train(t.head) && kg.entity_in_train(t.tail) && kg.relation_in_train(t.rel)))
        .flat_map(|t| CompletionQuery::pair_from(*t))
        .collect()
}

/// One grid cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConditionResult {
    pub condition: String,
    pub metrics: Metrics,
    pub wall_clock_secs: f64,
    /// Time spent in subgraph retrieval alone, measured sequentially.
    pub retrieval_secs: f64,
    pub mean_subgraph_size: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub axis: String,
    pub config: serde_json::Value,
    pub conditions: Vec<ConditionResult>,
    /// Set when a condition failed; earlier conditions are kept.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failure: Option<String>,
}

const COLUMNS: [&str; 9] = [
    "condition",
    "mrr",
    "hits1",
    "hits3",
    "hits10",
    "queries",
    "wall_clock_s",
    "retrieval_s",
    "subgraph",
];

impl ExperimentReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialises")
    }

    fn rows(&self) -> Vec<[String; 9]> {
        self.conditions
            .iter()
            .map(|c| {
                let m = &c.metrics;
                [
                    c.condition.clone(),
                    format!("{:.4}", m.mrr),
                    format!("{:.4}", m.hits1),
                    format!("{:.4}", m.hits3),
                    format!("{:.4}", m.hits10),
                    m.query_count.to_string(),
                    format!("{:.3}", c.wall_clock_secs),
                    format!("{:.4}", c.retrieval_secs),
                    format!("{:.1}", c.mean_subgraph_size),
                ]
            })
            .collect()
    }

    pub fn to_table(&self) -> String {
        let rows = self.rows();
        let mut widths: Vec<usize> = COLUMNS.iter().map(|c| c.len()).collect();
        for row in &rows {
            for (w, cell) in widths.iter_mut().zip(row) {
                *w = (*w).max(cell.len());
            }
        }
        let mut out = String::new();
        let mut line = |cells: &mut dyn Iterator<Item = &str>| {
            let parts: Vec<String> = cells
                .zip(&widths)
                .enumerate()
                .map(|(i, (c, w))| if i == 0 { format!("{c:<w$}") } else { format!("{c:>w$}") })
                .collect();
            let _ = writeln!(out, "{}", parts.join("  ").trim_end());
        };
        line(&mut COLUMNS.iter().copied());
        for row in &rows {
            line(&mut row.iter().map(String::as_str));
        }
        if let Some(f) = &self.failure {
            let _ = writeln!(out, "aborted: {f}");
        }
        out
    }

    pub fn to_csv(&self) -> String {
        let mut out = COLUMNS.join(",");
        out.push('\n');
        for row in self.rows() {
            let cells: Vec<String> = row
                .iter()
                .map(|c| if c.contains([',', '"']) { format!("\"{}\"", c.replace('"', "\"\"")) } else { c.clone() })
                .collect();
            out.push_str(&cells.join(","));
            out.push('\n');
        }
        out
    }
}
