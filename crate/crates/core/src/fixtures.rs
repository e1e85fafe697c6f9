//! Small graphs used by the test suites and the experiment grids.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::kg::{EntityId, KgBuilder, KnowledgeGraph, RelationId, Split, Symbol, Triple};

/// Five entities, three relations:
/// train `(A,r1,B) (B,r2,C) (D,r1,B) (B,r2,E) (D,r3,E)`, test `(A,r3,C)`.
pub fn toy_t1() -> KnowledgeGraph {
    let mut b = KgBuilder::new();
    b.push(Split::Train, "A", "r1", "B")
        .push(Split::Train, "B", "r2", "C")
        .push(Split::Train, "D", "r1", "B")
        .push(Split::Train, "B", "r2", "E")
        .push(Split::Train, "D", "r3", "E")
        .push(Split::Test, "A", "r3", "C");
    b.build()
}

/// Shape of the synthetic composition graph.
#[derive(Clone, Debug)]
pub struct CompositionSpec {
    /// Entities in the source layer; each has exactly one `r1` edge.
    pub sources: usize,
    /// Size of the middle and target layers.
    pub middles: usize,
    /// Source entities (the lowest ids) every other entity links to via `r4`.
    /// Zero leaves `r4` out.
    pub hubs: usize,
    pub seed: u64,
}

impl Default for CompositionSpec {
    fn default() -> Self {
        CompositionSpec {
            sources: 100,
            middles: 50,
            hubs: 2,
            seed: 7,
        }
    }
}

/// Three layers: sources `X`, middles `Y`, targets `Z`. `r1: X → Y` maps
/// sources onto middles evenly, `r2: Y → Z` is a bijection, and
/// `r3 = r2 ∘ r1`, so every `r3` fact is witnessed by an `r1·r2` path.
/// `r1`, `r2` and the hub edges `r4` live in train; `r3` is split 90/5/5.
pub fn composition_kg(spec: &CompositionSpec) -> KnowledgeGraph {
    let (nx, ny) = (spec.sources, spec.middles);
    let n = nx + 2 * ny;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut middle: Vec<usize> = (0..nx).map(|x| nx + x * ny / nx).collect();
    middle.shuffle(&mut rng);
    let mut target: Vec<usize> = (nx + ny..n).collect();
    target.shuffle(&mut rng);

    let (r1, r2, r3, r4) = (RelationId(0), RelationId(1), RelationId(2), RelationId(3));
    let e = |i: usize| EntityId(i as u32);
    let mut train = Vec::new();
    for (x, &y) in middle.iter().enumerate() {
        train.push(Triple::new(e(x), r1, e(y)));
    }
    for y in 0..ny {
        train.push(Triple::new(e(nx + y), r2, e(target[y])));
    }
    let mut composed: Vec<Triple> = (0..nx)
        .map(|x| Triple::new(e(x), r3, e(target[middle[x] - nx])))
        .collect();
    composed.shuffle(&mut rng);
    let n_held = nx * 5 / 100;
    let test = composed.split_off(composed.len() - n_held);
    let valid = composed.split_off(composed.len() - n_held);
    train.extend(composed);

    let mut relations = vec!["r1", "r2", "r3"];
    if spec.hubs > 0 {
        relations.push("r4");
        for i in spec.hubs..n {
            train.push(Triple::new(e(i), r4, e(rng.gen_range(0..spec.hubs))));
        }
    }
    let entities = (0..n).map(|i| symbol(format!("e{i:03}"))).collect();
    let relations = relations.into_iter().map(|r| symbol(r.to_string())).collect();
    KnowledgeGraph::from_parts(entities, relations, train, valid, test)
}

/// Uniformly random multigraph; `valid_frac`/`test_frac` of the triples are
/// moved out of train.
pub fn random_kg(
    rng: &mut impl Rng,
    n_entities: usize,
    n_relations: usize,
    n_triples: usize,
    valid_frac: f64,
    test_frac: f64,
) -> KnowledgeGraph {
    let mut triples: Vec<Triple> = (0..n_triples)
        .map(|_| {
            Triple::new(
                EntityId(rng.gen_range(0..n_entities as u32)),
                RelationId(rng.gen_range(0..n_relations as u32)),
                EntityId(rng.gen_range(0..n_entities as u32)),
            )
        })
        .collect();
    triples.sort_unstable();
    triples.dedup();
    triples.shuffle(rng);
    let n_test = (triples.len() as f64 * test_frac) as usize;
    let n_valid = (triples.len() as f64 * valid_frac) as usize;
    let test = triples.split_off(triples.len() - n_test);
    let valid = triples.split_off(triples.len() - n_valid);
    KnowledgeGraph::from_ids(n_entities, n_relations, triples, valid, test)
}

fn symbol(key: String) -> Symbol {
    Symbol {
        label: key.clone(),
        key,
        description: None,
    }
}
