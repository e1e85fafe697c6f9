//! Global structural embeddings: TransE, DistMult and RotatE scorers, their
//! training loop, and entity ranking.

mod rank;
mod train;

use std::f64::consts::TAU;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kg::{EntityId, RelationId};
use crate::util::{ByteReader, ByteWriter};

pub use rank::{
    collect_candidates, load_external_ranking, rank_entities, rank_from_scores, CandidateScorer,
    CandidateSet, ExternalRanking, RankingRecord, ScoredRanking,
};
pub use train::{init_embeddings, train_global, EmbeddingConfig, TrainingTrace};

#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    TransE,
    DistMult,
    RotatE,
}

impl ModelKind {
    fn code(self) -> u32 {
        match self {
            ModelKind::TransE => 0,
            ModelKind::DistMult => 1,
            ModelKind::RotatE => 2,
        }
    }

    fn from_code(code: u32) -> Option<Self> {
        match code {
            0 => Some(ModelKind::TransE),
            1 => Some(ModelKind::DistMult),
            2 => Some(ModelKind::RotatE),
            _ => None,
        }
    }

    /// Reals per entity row for embedding dimension `dim`.
    pub fn entity_width(self, dim: usize) -> usize {
        match self {
            ModelKind::RotatE => 2 * dim,
            _ => dim,
        }
    }
}

/// Row-major entity and relation matrices.
///
/// RotatE entities store `dim` complex coordinates as interleaved
/// `(re, im)` pairs and relations store `dim` phases in `[0, 2π)`.
#[derive(Clone, Debug, PartialEq)]
pub struct GlobalEmbeddings {
    kind: ModelKind,
    dim: usize,
    n_entities: usize,
    n_relations: usize,
    entity: Vec<f64>,
    relation: Vec<f64>,
}

impl GlobalEmbeddings {
    pub fn new(
        kind: ModelKind,
        dim: usize,
        n_entities: usize,
        n_relations: usize,
        entity: Vec<f64>,
        relation: Vec<f64>,
    ) -> Self {
        assert_eq!(entity.len(), n_entities * kind.entity_width(dim), "entity matrix shape");
        assert_eq!(relation.len(), n_relations * dim, "relation matrix shape");
        let mut emb = GlobalEmbeddings {
            kind,
            dim,
            n_entities,
            n_relations,
            entity,
            relation,
        };
        if kind == ModelKind::RotatE {
            emb.relation.iter_mut().for_each(|p| *p = wrap_phase(*p));
        }
        emb
    }

    pub fn kind(&self) -> ModelKind {
        self.kind
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Length of an entity row, i.e. the global embedding width.
    pub fn entity_width(&self) -> usize {
        self.kind.entity_width(self.dim)
    }

    pub fn num_entities(&self) -> usize {
        self.n_entities
    }

    pub fn num_relations(&self) -> usize {
        self.n_relations
    }

    pub fn entity(&self, e: EntityId) -> &[f64] {
        let w = self.entity_width();
        &self.entity[e.index() * w..(e.index() + 1) * w]
    }

    pub fn relation(&self, r: RelationId) -> &[f64] {
        &self.relation[r.index() * self.dim..(r.index() + 1) * self.dim]
    }

    pub fn entity_matrix(&self) -> &[f64] {
        &self.entity
    }

    pub fn relation_matrix(&self) -> &[f64] {
        &self.relation
    }

    pub(crate) fn matrices_mut(&mut self) -> (&mut [f64], &mut [f64]) {
        (&mut self.entity, &mut self.relation)
    }

    pub fn is_finite(&self) -> bool {
        self.entity.iter().chain(&self.relation).all(|x| x.is_finite())
    }

    /// Plausibility of `(h, r, t)`; higher is better.
    pub fn score(&self, h: EntityId, r: RelationId, t: EntityId) -> f64 {
        assert!(
            h.index() < self.n_entities && t.index() < self.n_entities && r.index() < self.n_relations,
            "ids ({h}, {r}, {t}) outside a {}x{} embedding table",
            self.n_entities,
            self.n_relations
        );
        score_rows(self.kind, self.entity(h), self.relation(r), self.entity(t))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = ByteWriter::new(EMB_MAGIC);
        w.u32(self.kind.code());
        w.u64(self.n_entities as u64);
        w.u64(self.n_relations as u64);
        w.u64(self.dim as u64);
        w.f64s(&self.entity);
        w.f64s(&self.relation);
        fs::write(path, w.finish()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let mut r = ByteReader::new(&bytes, EMB_MAGIC, path)?;
        let kind = ModelKind::from_code(r.u32()?).ok_or_else(|| r.error("unknown model kind"))?;
        let n_e = r.u64()? as usize;
        let n_r = r.u64()? as usize;
        let dim = r.u64()? as usize;
        let entity = r.f64s(n_e * kind.entity_width(dim))?;
        let relation = r.f64s(n_r * dim)?;
        r.expect_end()?;
        Ok(GlobalEmbeddings::new(kind, dim, n_e, n_r, entity, relation))
    }
}

const EMB_MAGIC: &[u8; 8] = b"DRKGEMB\0";

pub(crate) fn wrap_phase(p: f64) -> f64 {
    let w = p.rem_euclid(TAU);
    if w >= TAU {
        0.0
    } else {
        w
    }
}

pub(crate) fn score_rows(kind: ModelKind, h: &[f64], r: &[f64], t: &[f64]) -> f64 {
    match kind {
        ModelKind::TransE => -h
            .iter()
            .zip(r)
            .zip(t)
            .map(|((h, r), t)| (h + r - t).abs())
            .sum::<f64>(),
        ModelKind::DistMult => h.iter().zip(r).zip(t).map(|((h, r), t)| h * r * t).sum(),
        ModelKind::RotatE => {
            let mut sq = 0.0;
            for (i, theta) in r.iter().enumerate() {
                let (re, im) = rotate(h[2 * i], h[2 * i + 1], *theta);
                let dr = re - t[2 * i];
                let di = im - t[2 * i + 1];
                sq += dr * dr + di * di;
            }
            -sq.sqrt()
        }
    }
}

/// Complex product `(re + i·im) · e^{iθ}`.
#[inline]
pub(crate) fn rotate(re: f64, im: f64, theta: f64) -> (f64, f64) {
    let (s, c) = theta.sin_cos();
    (re * c - im * s, re * s + im * c)
}
