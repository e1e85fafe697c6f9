//! Relational GCN adapter.
//!
//! Local embeddings come from a small relational GCN run over the retrieved
//! subgraph, initialised from the (frozen) global embeddings. The enhanced
//! embedding `[global; local]` is projected by an affine adapter, and a
//! DistMult-style bilinear form over projected embeddings scores candidates.
//!
//! All parameters live in one flat vector described by a [`Layout`], which
//! keeps the optimizer, the checkpoint format and gradient checking simple.

mod train;

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::embedding::{CandidateSet, GlobalEmbeddings};
use crate::error::{Error, Result};
use crate::kg::{CompletionQuery, EntityId};
use crate::retrieval::Subgraph;
use crate::util::{ByteReader, ByteWriter};

pub use train::{train_adapter, AdapterTrace, AdapterTrainConfig, TrainingExample};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdapterShape {
    pub d_gcn: usize,
    pub layers: usize,
    pub d_out: usize,
}

impl Default for AdapterShape {
    fn default() -> Self {
        AdapterShape {
            d_gcn: 128,
            layers: 2,
            d_out: 64,
        }
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub struct Tensor {
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
}

impl Tensor {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

/// Named parameter blocks inside the flat parameter vector.
#[derive(Clone, Debug, PartialEq)]
pub struct Layout {
    pub d_global: usize,
    pub d_gcn: usize,
    pub d_out: usize,
    pub layers: usize,
    pub n_relations: usize,
    pub in_w: Tensor,
    pub in_b: Tensor,
    /// Per layer: self-loop, then forward and inverse weights per relation.
    pub self_w: Vec<Tensor>,
    pub fwd_w: Vec<Vec<Tensor>>,
    pub inv_w: Vec<Vec<Tensor>>,
    pub out_w: Tensor,
    pub out_b: Tensor,
    pub rel_w: Tensor,
    pub total: usize,
}

impl Layout {
    pub fn new(d_global: usize, n_relations: usize, shape: &AdapterShape) -> Self {
        let mut offset = 0;
        let mut take = |rows: usize, cols: usize| {
            let t = Tensor { offset, rows, cols };
            offset += rows * cols;
            t
        };
        let d = shape.d_gcn;
        let in_w = take(d, d_global);
        let in_b = take(d, 1);
        let mut self_w = Vec::new();
        let mut fwd_w = Vec::new();
        let mut inv_w = Vec::new();
        for _ in 0..shape.layers {
            self_w.push(take(d, d));
            fwd_w.push((0..n_relations).map(|_| take(d, d)).collect());
            inv_w.push((0..n_relations).map(|_| take(d, d)).collect());
        }
        let out_w = take(shape.d_out, d_global + d);
        let out_b = take(shape.d_out, 1);
        let rel_w = take(n_relations, shape.d_out);
        Layout {
            d_global,
            d_gcn: d,
            d_out: shape.d_out,
            layers: shape.layers,
            n_relations,
            in_w,
            in_b,
            self_w,
            fwd_w,
            inv_w,
            out_w,
            out_b,
            rel_w,
            total: offset,
        }
    }

    /// Every tensor with a readable name.
    pub fn tensors(&self) -> Vec<(String, Tensor)> {
        let mut out = vec![("in_w".to_string(), self.in_w), ("in_b".to_string(), self.in_b)];
        for l in 0..self.layers {
            out.push((format!("layer{l}.self"), self.self_w[l]));
            for r in 0..self.n_relations {
                out.push((format!("layer{l}.fwd{r}"), self.fwd_w[l][r]));
                out.push((format!("layer{l}.inv{r}"), self.inv_w[l][r]));
            }
        }
        out.push(("out_w".to_string(), self.out_w));
        out.push(("out_b".to_string(), self.out_b));
        out.push(("rel_w".to_string(), self.rel_w));
        out
    }

    fn weight(&self, layer: usize, kind: MessageKind) -> Tensor {
        match kind {
            MessageKind::Forward(r) => self.fwd_w[layer][r],
            MessageKind::Inverse(r) => self.inv_w[layer][r],
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdapterModel {
    layout: Layout,
    params: Vec<f64>,
    seed: u64,
}

/// Per-entity view produced by [`AdapterModel::gcn_forward`].
#[derive(Clone, Debug, PartialEq)]
pub struct EnhancedEmbedding {
    pub entity: EntityId,
    pub global: Vec<f64>,
    pub local: Vec<f64>,
    /// `[global; local]`.
    pub enhanced: Vec<f64>,
    pub projected: Vec<f64>,
}

impl AdapterModel {
    pub fn new(d_global: usize, n_relations: usize, shape: &AdapterShape, seed: u64) -> Result<Self> {
        if !(1..=2).contains(&shape.layers) {
            return Err(Error::Config("adapter.layers must be 1 or 2".into()));
        }
        if shape.d_gcn == 0 || shape.d_out == 0 {
            return Err(Error::Config("adapter dimensions must be positive".into()));
        }
        let layout = Layout::new(d_global, n_relations, shape);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = vec![0.0; layout.total];
        let mut xavier = |t: Tensor, params: &mut [f64]| {
            let bound = (6.0 / (t.rows + t.cols) as f64).sqrt();
            for p in &mut params[t.range()] {
                *p = rng.gen_range(-bound..bound);
            }
        };
        xavier(layout.in_w, &mut params);
        for l in 0..layout.layers {
            xavier(layout.self_w[l], &mut params);
            for r in 0..n_relations {
                xavier(layout.fwd_w[l][r], &mut params);
                xavier(layout.inv_w[l][r], &mut params);
            }
        }
        xavier(layout.out_w, &mut params);
        for p in &mut params[layout.rel_w.range()] {
            *p = rng.gen_range(-0.1..0.1);
        }
        Ok(AdapterModel { layout, params, seed })
    }

    pub fn from_params(layout: Layout, params: Vec<f64>, seed: u64) -> Self {
        assert_eq!(params.len(), layout.total, "parameter count");
        AdapterModel { layout, params, seed }
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn is_finite(&self) -> bool {
        self.params.iter().all(|p| p.is_finite())
    }

    fn tensor(&self, t: Tensor) -> &[f64] {
        &self.params[t.range()]
    }

    /// Local, enhanced and projected embeddings for `entities`. Entities
    /// outside the subgraph (and every entity when `use_local` is off) get a
    /// zero local vector.
    pub fn gcn_forward(
        &self,
        g: &Subgraph,
        emb: &GlobalEmbeddings,
        entities: &[EntityId],
        use_local: bool,
    ) -> Vec<EnhancedEmbedding> {
        let pass = ForwardPass::run(self, g, emb, entities, use_local);
        pass.outputs
    }

    /// Bilinear scores of the candidates against the anchor.
    pub fn score_candidates(
        &self,
        query: &CompletionQuery,
        cands: &CandidateSet,
        enh: &[EnhancedEmbedding],
    ) -> Vec<f64> {
        let find = |e: EntityId| {
            enh.iter()
                .find(|x| x.entity == e)
                .unwrap_or_else(|| panic!("no enhanced embedding for {e}"))
        };
        let anchor = &find(query.known).projected;
        let w = self.relation_weights(query);
        cands
            .entities
            .iter()
            .map(|&c| bilinear(&find(c).projected, w, anchor))
            .collect()
    }

    fn relation_weights(&self, query: &CompletionQuery) -> &[f64] {
        let d = self.layout.d_out;
        let r = query.rel.index();
        assert!(r < self.layout.n_relations, "relation {} outside adapter", query.rel);
        &self.tensor(self.layout.rel_w)[r * d..(r + 1) * d]
    }

    /// Softmax cross-entropy of the candidate scores against `gold_index`,
    /// and its gradient with respect to every parameter.
    pub fn loss_and_gradient(
        &self,
        g: &Subgraph,
        emb: &GlobalEmbeddings,
        cands: &CandidateSet,
        gold_index: usize,
        use_local: bool,
    ) -> (f64, Vec<f64>) {
        let query = g.query;
        let mut wanted: Vec<EntityId> = cands.entities.clone();
        wanted.push(query.known);
        wanted.sort_unstable();
        wanted.dedup();
        let pass = ForwardPass::run(self, g, emb, &wanted, use_local);
        let proj = |e: EntityId| &pass.outputs[wanted.binary_search(&e).unwrap()].projected;

        let anchor = proj(query.known);
        let w = self.relation_weights(&query);
        let scores: Vec<f64> = cands.entities.iter().map(|&c| bilinear(proj(c), w, anchor)).collect();
        let (loss, dscore) = softmax_cross_entropy(&scores, gold_index);

        let lay = &self.layout;
        let d_out = lay.d_out;
        let mut grad = vec![0.0; lay.total];
        let mut dproj: Vec<Vec<f64>> = vec![vec![0.0; d_out]; wanted.len()];
        let a_idx = wanted.binary_search(&query.known).unwrap();
        let rel_off = lay.rel_w.offset + query.rel.index() * d_out;
        for (j, &c) in cands.entities.iter().enumerate() {
            let gj = dscore[j];
            let c_idx = wanted.binary_search(&c).unwrap();
            let pc = proj(c);
            for i in 0..d_out {
                dproj[c_idx][i] += gj * w[i] * anchor[i];
                dproj[a_idx][i] += gj * w[i] * pc[i];
                grad[rel_off + i] += gj * pc[i] * anchor[i];
            }
        }
        pass.backward(self, &dproj, &mut grad);
        (loss, grad)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let lay = &self.layout;
        let mut w = ByteWriter::new(ADAPTER_MAGIC);
        for v in [lay.d_global, lay.d_gcn, lay.d_out, lay.layers, lay.n_relations] {
            w.u64(v as u64);
        }
        w.u64(self.seed);
        w.f64s(&self.params);
        fs::write(path, w.finish()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let mut r = ByteReader::new(&bytes, ADAPTER_MAGIC, path)?;
        let d_global = r.u64()? as usize;
        let d_gcn = r.u64()? as usize;
        let d_out = r.u64()? as usize;
        let layers = r.u64()? as usize;
        let n_rel = r.u64()? as usize;
        let seed = r.u64()?;
        let layout = Layout::new(d_global, n_rel, &AdapterShape { d_gcn, layers, d_out });
        let params = r.f64s(layout.total)?;
        r.expect_end()?;
        Ok(AdapterModel { layout, params, seed })
    }
}

const ADAPTER_MAGIC: &[u8; 8] = b"DRKGADP\0";

fn bilinear(e: &[f64], w: &[f64], a: &[f64]) -> f64 {
    e.iter().zip(w).zip(a).map(|((e, w), a)| e * w * a).sum()
}

/// Loss and `∂loss/∂score`.
pub(crate) fn softmax_cross_entropy(scores: &[f64], gold: usize) -> (f64, Vec<f64>) {
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    let loss = -(scores[gold] - max - z.ln());
    let mut grad: Vec<f64> = exps.iter().map(|e| e / z).collect();
    grad[gold] -= 1.0;
    (loss, grad)
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
enum MessageKind {
    Forward(usize),
    Inverse(usize),
}

/// Messages of one kind arriving at one node, mean-aggregated.
struct MessageGroup {
    dst: usize,
    kind: MessageKind,
    sources: Vec<usize>,
}

struct ForwardPass {
    nodes: Vec<EntityId>,
    globals: Vec<Vec<f64>>,
    groups: Vec<MessageGroup>,
    /// `h[l][node]` for l = 0..=layers.
    h: Vec<Vec<Vec<f64>>>,
    /// Pre-activations `z[l][node]` for l = 1..=layers (index l-1).
    z: Vec<Vec<Vec<f64>>>,
    /// Node index of every requested entity, if inside the subgraph.
    requested: Vec<Option<usize>>,
    outputs: Vec<EnhancedEmbedding>,
    use_local: bool,
}

impl ForwardPass {
    fn run(
        model: &AdapterModel,
        g: &Subgraph,
        emb: &GlobalEmbeddings,
        entities: &[EntityId],
        use_local: bool,
    ) -> Self {
        let lay = &model.layout;
        assert_eq!(emb.entity_width(), lay.d_global, "global embedding width");
        let d = lay.d_gcn;
        let nodes = if use_local { g.entities() } else { Vec::new() };
        let index: HashMap<EntityId, usize> = nodes.iter().enumerate().map(|(i, e)| (*e, i)).collect();

        let mut grouped: HashMap<(usize, MessageKind), Vec<usize>> = HashMap::new();
        if use_local {
            for t in g.triples() {
                let (u, v) = (index[&t.head], index[&t.tail]);
                let r = t.rel.index();
                assert!(r < lay.n_relations, "relation {} outside adapter", t.rel);
                grouped.entry((v, MessageKind::Forward(r))).or_default().push(u);
                grouped.entry((u, MessageKind::Inverse(r))).or_default().push(v);
            }
        }
        let mut groups: Vec<MessageGroup> = grouped
            .into_iter()
            .map(|((dst, kind), sources)| MessageGroup { dst, kind, sources })
            .collect();
        groups.sort_by_key(|g| (g.dst, g.kind));

        let globals: Vec<Vec<f64>> = nodes.iter().map(|e| emb.entity(*e).to_vec()).collect();
        let mut h0 = Vec::with_capacity(nodes.len());
        for gv in &globals {
            let mut x = model.tensor(lay.in_b).to_vec();
            matvec_acc(model.tensor(lay.in_w), d, lay.d_global, gv, &mut x);
            h0.push(x);
        }
        let mut h = vec![h0];
        let mut z = Vec::new();
        for l in 0..lay.layers {
            let prev = &h[l];
            let mut zl: Vec<Vec<f64>> = Vec::with_capacity(nodes.len());
            for hv in prev {
                let mut x = vec![0.0; d];
                matvec_acc(model.tensor(lay.self_w[l]), d, d, hv, &mut x);
                zl.push(x);
            }
            for grp in &groups {
                let mean = mean_of(prev, &grp.sources, d);
                matvec_acc(model.tensor(lay.weight(l, grp.kind)), d, d, &mean, &mut zl[grp.dst]);
            }
            let hl: Vec<Vec<f64>> = zl.iter().map(|x| x.iter().map(|v| v.max(0.0)).collect()).collect();
            z.push(zl);
            h.push(hl);
        }

        let requested: Vec<Option<usize>> = entities.iter().map(|e| index.get(e).copied()).collect();
        let top = &h[lay.layers];
        let outputs = entities
            .iter()
            .zip(&requested)
            .map(|(&e, node)| {
                let global = emb.entity(e).to_vec();
                let local = match node {
                    Some(i) => top[*i].clone(),
                    None => vec![0.0; d],
                };
                let mut enhanced = global.clone();
                enhanced.extend_from_slice(&local);
                let mut projected = model.tensor(lay.out_b).to_vec();
                matvec_acc(
                    model.tensor(lay.out_w),
                    lay.d_out,
                    lay.d_global + d,
                    &enhanced,
                    &mut projected,
                );
                EnhancedEmbedding {
                    entity: e,
                    global,
                    local,
                    enhanced,
                    projected,
                }
            })
            .collect();
        ForwardPass {
            nodes,
            globals,
            groups,
            h,
            z,
            requested,
            outputs,
            use_local,
        }
    }

    /// Accumulates parameter gradients given `∂loss/∂projected` for each
    /// requested entity.
    fn backward(&self, model: &AdapterModel, dproj: &[Vec<f64>], grad: &mut [f64]) {
        let lay = &model.layout;
        let d = lay.d_gcn;
        let width = lay.d_global + d;
        let mut dh_top = vec![vec![0.0; d]; self.nodes.len()];
        for ((out, dp), node) in self.outputs.iter().zip(dproj).zip(&self.requested) {
            outer_acc(&mut grad[lay.out_w.range()], dp, &out.enhanced);
            for (g, v) in grad[lay.out_b.range()].iter_mut().zip(dp) {
                *g += v;
            }
            if let (Some(i), true) = (node, self.use_local) {
                let mut denh = vec![0.0; width];
                matvec_t_acc(model.tensor(lay.out_w), lay.d_out, width, dp, &mut denh);
                for (acc, v) in dh_top[*i].iter_mut().zip(&denh[lay.d_global..]) {
                    *acc += v;
                }
            }
        }

        let mut dh = dh_top;
        for l in (0..lay.layers).rev() {
            let dz: Vec<Vec<f64>> = dh
                .iter()
                .zip(&self.z[l])
                .map(|(g, z)| g.iter().zip(z).map(|(g, z)| if *z > 0.0 { *g } else { 0.0 }).collect())
                .collect();
            let prev = &self.h[l];
            let mut dprev = vec![vec![0.0; d]; self.nodes.len()];
            let self_w = lay.self_w[l];
            for v in 0..self.nodes.len() {
                outer_acc(&mut grad[self_w.range()], &dz[v], &prev[v]);
                matvec_t_acc(model.tensor(self_w), d, d, &dz[v], &mut dprev[v]);
            }
            for grp in &self.groups {
                let t = lay.weight(l, grp.kind);
                let mean = mean_of(prev, &grp.sources, d);
                outer_acc(&mut grad[t.range()], &dz[grp.dst], &mean);
                let mut dmean = vec![0.0; d];
                matvec_t_acc(model.tensor(t), d, d, &dz[grp.dst], &mut dmean);
                let coef = 1.0 / grp.sources.len() as f64;
                for &u in &grp.sources {
                    for (acc, v) in dprev[u].iter_mut().zip(&dmean) {
                        *acc += coef * v;
                    }
                }
            }
            dh = dprev;
        }

        for (dv, gv) in dh.iter().zip(&self.globals) {
            outer_acc(&mut grad[lay.in_w.range()], dv, gv);
            for (g, v) in grad[lay.in_b.range()].iter_mut().zip(dv) {
                *g += v;
            }
        }
    }
}

fn mean_of(h: &[Vec<f64>], sources: &[usize], d: usize) -> Vec<f64> {
    let mut mean = vec![0.0; d];
    for &u in sources {
        for (m, v) in mean.iter_mut().zip(&h[u]) {
            *m += v;
        }
    }
    let n = sources.len() as f64;
    mean.iter_mut().for_each(|m| *m /= n);
    mean
}

/// `out += W x` for row-major `W` of shape `rows × cols`.
fn matvec_acc(w: &[f64], rows: usize, cols: usize, x: &[f64], out: &mut [f64]) {
    debug_assert_eq!(w.len(), rows * cols);
    for (o, row) in out.iter_mut().zip(w.chunks_exact(cols)) {
        *o += row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
    }
}

/// `out += Wᵀ y`.
fn matvec_t_acc(w: &[f64], rows: usize, cols: usize, y: &[f64], out: &mut [f64]) {
    debug_assert_eq!(w.len(), rows * cols);
    for (yi, row) in y.iter().zip(w.chunks_exact(cols)) {
        if *yi == 0.0 {
            continue;
        }
        for (o, a) in out.iter_mut().zip(row) {
            *o += yi * a;
        }
    }
}

/// `g += y xᵀ`.
fn outer_acc(g: &mut [f64], y: &[f64], x: &[f64]) {
    for (yi, row) in y.iter().zip(g.chunks_exact_mut(x.len())) {
        if *yi == 0.0 {
            continue;
        }
        for (o, xv) in row.iter_mut().zip(x) {
            *o += yi * xv;
        }
    }
}
