use std::collections::HashMap;
use std::f64::consts::TAU;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{rotate, wrap_phase, GlobalEmbeddings, ModelKind};
use crate::error::{Error, Result};
use crate::kg::{EntityId, KnowledgeGraph, Triple};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EmbeddingConfig {
    pub model: ModelKind,
    pub dim: usize,
    pub epochs: usize,
    pub lr: f64,
    pub negatives: usize,
    pub margin: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for EmbeddingConfig {
    fn default() -> Self {
        EmbeddingConfig {
            model: ModelKind::TransE,
            dim: 32,
            epochs: 200,
            lr: 0.01,
            negatives: 4,
            margin: 1.0,
            batch_size: 128,
            seed: 7,
        }
    }
}

impl EmbeddingConfig {
    pub fn validate(&self) -> Vec<String> {
        let mut problems = Vec::new();
        if self.dim == 0 {
            problems.push("embedding.dim must be positive".to_string());
        }
        if self.negatives == 0 {
            problems.push("embedding.negatives must be positive".to_string());
        }
        if self.batch_size == 0 {
            problems.push("embedding.batch_size must be positive".to_string());
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            problems.push("embedding.lr must be a positive finite number".to_string());
        }
        if !self.margin.is_finite() {
            problems.push("embedding.margin must be finite".to_string());
        }
        problems
    }
}

/// Mean margin loss per epoch.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingTrace {
    pub epoch_loss: Vec<f64>,
}

/// The seeded starting point of [`train_global`]. Entities absent from
/// train start (and stay) at zero.
pub fn init_embeddings(kg: &KnowledgeGraph, config: &EmbeddingConfig) -> Result<GlobalEmbeddings> {
    let problems = config.validate();
    if !problems.is_empty() {
        return Err(Error::Config(problems.join("; ")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let kind = config.model;
    let dim = config.dim;
    let width = kind.entity_width(dim);
    let bound = 6.0 / (dim as f64).sqrt();
    let mut entity = vec![0.0; kg.num_entities() * width];
    for (e, row) in entity.chunks_mut(width).enumerate() {
        // Draw for every row so ids do not shift the stream.
        let draws: Vec<f64> = (0..width).map(|_| rng.gen_range(-bound..bound)).collect();
        if kg.entity_in_train(EntityId(e as u32)) {
            row.copy_from_slice(&draws);
        }
    }
    let relation: Vec<f64> = match kind {
        ModelKind::RotatE => (0..kg.num_relations() * dim)
            .map(|_| rng.gen_range(0.0..TAU))
            .collect(),
        _ => (0..kg.num_relations() * dim)
            .map(|_| rng.gen_range(-bound..bound))
            .collect(),
    };
    let mut emb = GlobalEmbeddings::new(kind, dim, kg.num_entities(), kg.num_relations(), entity, relation);
    if kind == ModelKind::TransE {
        // Relations start on the unit sphere, like entities, so translations
        // are on the same scale as the points they move.
        let (_, relation) = emb.matrices_mut();
        for row in relation.chunks_mut(dim) {
            let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            row.iter_mut().for_each(|x| *x /= norm);
        }
    }
    normalize_entities(&mut emb);
    Ok(emb)
}

/// Minibatch SGD on `max(0, γ − s(pos) + s(neg))` with uniform head-or-tail
/// corruption.
pub fn train_global(
    kg: &KnowledgeGraph,
    config: &EmbeddingConfig,
) -> Result<(GlobalEmbeddings, TrainingTrace)> {
    if kg.train().is_empty() {
        return Err(Error::Training("train split is empty".into()));
    }
    let mut emb = init_embeddings(kg, config)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed_0f_e3b0);
    let mut order: Vec<usize> = (0..kg.train().len()).collect();
    let mut trace = TrainingTrace::default();
    let n_e = kg.num_entities() as u32;

    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut pairs = 0usize;
        for batch in order.chunks(config.batch_size) {
            let mut grads = Gradients::default();
            for &i in batch {
                let pos = kg.train()[i];
                for _ in 0..config.negatives {
                    let fake = EntityId(rng.gen_range(0..n_e));
                    let neg = if rng.gen_bool(0.5) {
                        Triple::new(fake, pos.rel, pos.tail)
                    } else {
                        Triple::new(pos.head, pos.rel, fake)
                    };
                    let loss = config.margin - emb.score(pos.head, pos.rel, pos.tail)
                        + emb.score(neg.head, neg.rel, neg.tail);
                    pairs += 1;
                    if loss > 0.0 {
                        total += loss;
                        grads.add_score(&emb, pos, -1.0);
                        grads.add_score(&emb, neg, 1.0);
                    }
                }
            }
            grads.apply(&mut emb, config.lr);
        }
        let mean = total / pairs as f64;
        if !mean.is_finite() || !emb.is_finite() {
            return Err(Error::NonFinite(format!(
                "{:?} loss became {mean} at epoch {}",
                config.model,
                epoch + 1
            )));
        }
        trace.epoch_loss.push(mean);
        normalize_entities(&mut emb);
    }
    Ok((emb, trace))
}

/// TransE and DistMult keep entity rows on the unit sphere.
fn normalize_entities(emb: &mut GlobalEmbeddings) {
    if emb.kind() == ModelKind::RotatE {
        return;
    }
    let width = emb.entity_width();
    let (entity, _) = emb.matrices_mut();
    for row in entity.chunks_mut(width) {
        let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1.0 {
            row.iter_mut().for_each(|x| *x /= norm);
        }
    }
}

#[derive(Default)]
struct Gradients {
    entity: HashMap<usize, Vec<f64>>,
    relation: HashMap<usize, Vec<f64>>,
}

impl Gradients {
    /// Accumulates `coef · ∂s(t)/∂θ`.
    fn add_score(&mut self, emb: &GlobalEmbeddings, t: Triple, coef: f64) {
        let h = emb.entity(t.head);
        let r = emb.relation(t.rel);
        let tl = emb.entity(t.tail);
        let width = emb.entity_width();
        let dim = emb.dim();
        let mut gh = vec![0.0; width];
        let mut gr = vec![0.0; dim];
        let mut gt = vec![0.0; width];
        match emb.kind() {
            ModelKind::TransE => {
                for i in 0..dim {
                    let s = signum(h[i] + r[i] - tl[i]);
                    gh[i] = -s;
                    gr[i] = -s;
                    gt[i] = s;
                }
            }
            ModelKind::DistMult => {
                for i in 0..dim {
                    gh[i] = r[i] * tl[i];
                    gr[i] = h[i] * tl[i];
                    gt[i] = h[i] * r[i];
                }
            }
            ModelKind::RotatE => {
                let mut diff = vec![0.0; width];
                let mut rot = vec![0.0; width];
                for i in 0..dim {
                    let (re, im) = rotate(h[2 * i], h[2 * i + 1], r[i]);
                    rot[2 * i] = re;
                    rot[2 * i + 1] = im;
                    diff[2 * i] = re - tl[2 * i];
                    diff[2 * i + 1] = im - tl[2 * i + 1];
                }
                let dist = diff.iter().map(|d| d * d).sum::<f64>().sqrt();
                if dist > 0.0 {
                    for i in 0..dim {
                        // s = -dist, so ds/d(diff) = -diff/dist.
                        let gre = -diff[2 * i] / dist;
                        let gim = -diff[2 * i + 1] / dist;
                        let (sin, cos) = r[i].sin_cos();
                        gh[2 * i] = gre * cos + gim * sin;
                        gh[2 * i + 1] = -gre * sin + gim * cos;
                        gr[i] = -gre * rot[2 * i + 1] + gim * rot[2 * i];
                        gt[2 * i] = -gre;
                        gt[2 * i + 1] = -gim;
                    }
                }
            }
        }
        accumulate(&mut self.entity, t.head.index(), &gh, coef);
        accumulate(&mut self.relation, t.rel.index(), &gr, coef);
        accumulate(&mut self.entity, t.tail.index(), &gt, coef);
    }

    fn apply(self, emb: &mut GlobalEmbeddings, lr: f64) {
        let width = emb.entity_width();
        let dim = emb.dim();
        let rotate = emb.kind() == ModelKind::RotatE;
        let (entity, relation) = emb.matrices_mut();
        for (row, g) in self.entity {
            for (p, g) in entity[row * width..(row + 1) * width].iter_mut().zip(g) {
                *p -= lr * g;
            }
        }
        for (row, g) in self.relation {
            for (p, g) in relation[row * dim..(row + 1) * dim].iter_mut().zip(g) {
                *p -= lr * g;
                if rotate {
                    *p = wrap_phase(*p);
                }
            }
        }
    }
}

fn accumulate(map: &mut HashMap<usize, Vec<f64>>, row: usize, grad: &[f64], coef: f64) {
    let slot = map.entry(row).or_insert_with(|| vec![0.0; grad.len()]);
    for (s, g) in slot.iter_mut().zip(grad) {
        *s += coef * g;
    }
}

fn signum(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}
