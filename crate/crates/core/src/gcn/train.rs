use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{AdapterModel, AdapterShape};
use crate::embedding::{collect_candidates, CandidateScorer, CandidateSet, GlobalEmbeddings};
use crate::error::{Error, Result};
use crate::kg::{CompletionQuery, KnowledgeGraph, Triple};
use crate::retrieval::{retrieve_subgraph, RetrievalConfig, Subgraph};
use crate::rules::RuleSet;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdapterTrainConfig {
    #[serde(flatten)]
    pub shape: AdapterShape,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub use_local: bool,
    /// Train triples additionally turned into training queries, each with
    /// the triple itself removed from the graph. Zero uses valid queries only.
    pub masked_train_triples: usize,
}

impl Default for AdapterTrainConfig {
    fn default() -> Self {
        AdapterTrainConfig {
            shape: AdapterShape::default(),
            lr: 2e-3,
            epochs: 30,
            batch_size: 8,
            seed: 7,
            use_local: true,
            masked_train_triples: 200,
        }
    }
}

impl AdapterTrainConfig {
    pub fn validate(&self) -> Vec<String> {
        let mut errs = Vec::new();
        if !(1..=2).contains(&self.shape.layers) {
            errs.push("adapter.layers must be 1 or 2".to_string());
        }
        if self.shape.d_gcn == 0 {
            errs.push("adapter.d_gcn must be positive".to_string());
        }
        if self.shape.d_out == 0 {
            errs.push("adapter.d_out must be positive".to_string());
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            errs.push("adapter.lr must be a positive number".to_string());
        }
        if self.batch_size == 0 {
            errs.push("adapter.batch_size must be positive".to_string());
        }
        errs
    }
}

/// One supervised query: its subgraph, its candidates and where the gold
/// answer sits among them.
#[derive(Clone, Debug)]
pub struct TrainingExample {
    pub subgraph: Subgraph,
    pub candidates: CandidateSet,
    pub gold_index: usize,
}

impl TrainingExample {
    /// Retrieves subgraphs and candidates for labelled queries. Queries
    /// whose gold answer is missing from the top-`k` are skipped and
    /// counted.
    pub fn build(
        kg: &KnowledgeGraph,
        scorer: &dyn CandidateScorer,
        rules: &RuleSet,
        queries: &[CompletionQuery],
        k: usize,
        retrieval: &RetrievalConfig,
    ) -> (Vec<TrainingExample>, usize) {
        let built: Vec<Option<TrainingExample>> = queries
            .par_iter()
            .map(|q| {
                let gold = q.gold?;
                let candidates = collect_candidates(kg, scorer, q, k);
                let gold_index = candidates.position(gold)?;
                let subgraph = retrieve_subgraph(kg, q, &candidates, rules, retrieval);
                Some(TrainingExample {
                    subgraph,
                    candidates,
                    gold_index,
                })
            })
            .collect();
        let skipped = built.iter().filter(|b| b.is_none()).count();
        (built.into_iter().flatten().collect(), skipped)
    }

    /// Like [`build`](Self::build) for head and tail queries of known
    /// triples, each retrieved and ranked on a copy of the graph without
    /// that triple, so the answer is neither filtered nor directly linked.
    pub fn build_masked(
        kg: &KnowledgeGraph,
        scorer: &dyn CandidateScorer,
        rules: &RuleSet,
        triples: &[Triple],
        k: usize,
        retrieval: &RetrievalConfig,
    ) -> (Vec<TrainingExample>, usize) {
        let built: Vec<[Option<TrainingExample>; 2]> = triples
            .par_iter()
            .map(|t| {
                let train: Vec<Triple> = kg.train().iter().filter(|x| *x != t).copied().collect();
                let masked = kg.with_train(train);
                CompletionQuery::pair_from(*t).map(|q| {
                    let candidates = collect_candidates(&masked, scorer, &q, k);
                    let gold_index = candidates.position(q.gold?)?;
                    let subgraph = retrieve_subgraph(&masked, &q, &candidates, rules, retrieval);
                    Some(TrainingExample {
                        subgraph,
                        candidates,
                        gold_index,
                    })
                })
            })
            .collect();
        let flat: Vec<Option<TrainingExample>> = built.into_iter().flatten().collect();
        let skipped = flat.iter().filter(|b| b.is_none()).count();
        (flat.into_iter().flatten().collect(), skipped)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AdapterTrace {
    pub epoch_loss: Vec<f64>,
    pub examples: usize,
}

/// Fits the adapter and GCN with softmax cross-entropy over candidate sets.
/// Global embeddings are read only. Adam, seeded shuffling, minibatch
/// gradients summed in a fixed order so results do not depend on thread
/// scheduling.
pub fn train_adapter(
    emb: &GlobalEmbeddings,
    n_relations: usize,
    examples: &[TrainingExample],
    config: &AdapterTrainConfig,
) -> Result<(AdapterModel, AdapterTrace)> {
    let errs = config.validate();
    if !errs.is_empty() {
        return Err(Error::Config(errs.join("; ")));
    }
    if examples.is_empty() {
        return Err(Error::Training("no usable adapter training queries".into()));
    }
    let mut model = AdapterModel::new(emb.entity_width(), n_relations, &config.shape, config.seed)?;
    let mut adam = Adam::new(model.params().len(), config.lr);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0xada9);
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut trace = AdapterTrace {
        epoch_loss: Vec::with_capacity(config.epochs),
        examples: examples.len(),
    };

    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(config.batch_size) {
            let parts: Vec<(f64, Vec<f64>)> = batch
                .par_iter()
                .map(|&i| {
                    let ex = &examples[i];
                    model.loss_and_gradient(&ex.subgraph, emb, &ex.candidates, ex.gold_index, config.use_local)
                })
                .collect();
            let mut grad = vec![0.0; model.params().len()];
            for (loss, g) in parts {
                epoch_loss += loss;
                for (acc, v) in grad.iter_mut().zip(g) {
                    *acc += v;
                }
            }
            let scale = 1.0 / batch.len() as f64;
            grad.iter_mut().for_each(|g| *g *= scale);
            adam.step(model.params_mut(), &grad);
        }
        let mean = epoch_loss / examples.len() as f64;
        if !mean.is_finite() || !model.is_finite() {
            return Err(Error::NonFinite(format!("adapter training diverged at epoch {epoch}")));
        }
        log::debug!("adapter epoch {epoch}: loss {mean:.5}");
        trace.epoch_loss.push(mean);
    }
    Ok((model, trace))
}

struct Adam {
    lr: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(n: usize, lr: f64) -> Self {
        Adam {
            lr,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        self.t += 1;
        let c1 = 1.0 - Self::BETA1.powi(self.t);
        let c2 = 1.0 - Self::BETA2.powi(self.t);
        for i in 0..params.len() {
            let g = grad[i];
            self.m[i] = Self::BETA1 * self.m[i] + (1.0 - Self::BETA1) * g;
            self.v[i] = Self::BETA2 * self.v[i] + (1.0 - Self::BETA2) * g * g;
            params[i] -= self.lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + Self::EPS);
        }
    }
}
