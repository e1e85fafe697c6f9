//! Indexed triple store.
//!
//! A [`KnowledgeGraph`] holds the entity and relation tables, the three
//! disjoint splits, and indices over the train split. Ids are dense and
//! assigned in first-seen order over train, then valid, then test.

use std::collections::{HashMap, HashSet, VecDeque};
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct EntityId(pub u32);

#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct RelationId(pub u32);

impl EntityId {
    #[inline]
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl RelationId {
    #[inline]
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for EntityId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "e{}", self.0)
    }
}

impl fmt::Display for RelationId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "r{}", self.0)
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Triple {
    pub head: EntityId,
    pub rel: RelationId,
    pub tail: EntityId,
}

impl Triple {
    pub fn new(head: EntityId, rel: RelationId, tail: EntityId) -> Self {
        Triple { head, rel, tail }
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    /// `(?, r, t)`
    Head,
    /// `(h, r, ?)`
    Tail,
}

/// An incomplete triple. `known` is `t_q` for head prediction and `h_q`
/// for tail prediction.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CompletionQuery {
    pub direction: Direction,
    pub known: EntityId,
    pub rel: RelationId,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gold: Option<EntityId>,
}

impl CompletionQuery {
    pub fn head(rel: RelationId, tail: EntityId, gold: Option<EntityId>) -> Self {
        CompletionQuery {
            direction: Direction::Head,
            known: tail,
            rel,
            gold,
        }
    }

    pub fn tail(head: EntityId, rel: RelationId, gold: Option<EntityId>) -> Self {
        CompletionQuery {
            direction: Direction::Tail,
            known: head,
            rel,
            gold,
        }
    }

    /// Both queries an evaluation triple gives rise to, head first.
    pub fn pair_from(triple: Triple) -> [CompletionQuery; 2] {
        [
            CompletionQuery::head(triple.rel, triple.tail, Some(triple.head)),
            CompletionQuery::tail(triple.head, triple.rel, Some(triple.tail)),
        ]
    }

    /// The triple obtained by filling the missing slot with `answer`.
    pub fn complete(&self, answer: EntityId) -> Triple {
        match self.direction {
            Direction::Head => Triple::new(answer, self.rel, self.known),
            Direction::Tail => Triple::new(self.known, self.rel, answer),
        }
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Valid, Split::Test];

    fn slot(self) -> usize {
        match self {
            Split::Train => 0,
            Split::Valid => 1,
            Split::Test => 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Symbol {
    /// Token used in the triple files.
    pub key: String,
    pub label: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub description: Option<String>,
}

#[derive(Clone, Debug, Default)]
pub struct SymbolTable {
    symbols: Vec<Symbol>,
    by_key: HashMap<String, u32>,
}

impl SymbolTable {
    fn from_symbols(symbols: Vec<Symbol>) -> Self {
        let by_key = symbols
            .iter()
            .enumerate()
            .map(|(i, s)| (s.key.clone(), i as u32))
            .collect();
        SymbolTable { symbols, by_key }
    }

    fn intern(&mut self, key: &str) -> u32 {
        if let Some(&id) = self.by_key.get(key) {
            return id;
        }
        let id = self.symbols.len() as u32;
        self.symbols.push(Symbol {
            key: key.to_string(),
            label: key.to_string(),
            description: None,
        });
        self.by_key.insert(key.to_string(), id);
        id
    }

    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }

    pub fn get(&self, id: u32) -> Option<&Symbol> {
        self.symbols.get(id as usize)
    }

    pub fn lookup(&self, key: &str) -> Option<u32> {
        self.by_key.get(key).copied()
    }

    /// Resolves a display label first, then a file key.
    pub fn lookup_label(&self, label: &str) -> Option<u32> {
        self.symbols
            .iter()
            .position(|s| s.label == label)
            .map(|i| i as u32)
            .or_else(|| self.lookup(label))
    }

    pub fn symbols(&self) -> &[Symbol] {
        &self.symbols
    }

    fn symbols_mut(&mut self) -> &mut [Symbol] {
        &mut self.symbols
    }
}

/// One undirected traversal option out of an entity.
#[derive(Copy, Clone, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub struct Step {
    pub neighbor: EntityId,
    pub rel: RelationId,
    /// `false` when the owning entity is the triple's head.
    pub inverse: bool,
    pub triple: Triple,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LoadStats {
    /// Duplicates dropped within train, valid, test.
    pub duplicates: [usize; 3],
    /// Triples dropped from a later split because an earlier split holds them.
    pub cross_split: usize,
    /// Entities that never occur in train.
    pub unseen_entities: usize,
    /// Relations that never occur in train.
    pub unseen_relations: usize,
}

#[derive(Clone, Debug)]
pub struct KnowledgeGraph {
    entities: SymbolTable,
    relations: SymbolTable,
    splits: [Vec<Triple>; 3],
    stats: LoadStats,

    train_set: HashSet<Triple>,
    train_tails: HashMap<(EntityId, RelationId), Vec<EntityId>>,
    train_heads: HashMap<(EntityId, RelationId), Vec<EntityId>>,
    known_tails: HashMap<(EntityId, RelationId), Vec<EntityId>>,
    known_heads: HashMap<(EntityId, RelationId), Vec<EntityId>>,
    adjacency: Vec<Vec<Step>>,
    by_relation: Vec<Vec<Triple>>,
    entity_in_train: Vec<bool>,
    relation_in_train: Vec<bool>,
}

impl KnowledgeGraph {
    /// Builds and indexes a graph from already-interned tables and splits.
    /// Duplicates within a split and overlaps with earlier splits are dropped.
    pub fn from_parts(
        entities: Vec<Symbol>,
        relations: Vec<Symbol>,
        train: Vec<Triple>,
        valid: Vec<Triple>,
        test: Vec<Triple>,
    ) -> Self {
        let mut stats = LoadStats::default();
        let mut seen = HashSet::new();
        let mut splits: [Vec<Triple>; 3] = Default::default();
        for (slot, triples) in [train, valid, test].into_iter().enumerate() {
            let mut local = HashSet::new();
            for t in triples {
                assert!(
                    t.head.index() < entities.len()
                        && t.tail.index() < entities.len()
                        && t.rel.index() < relations.len(),
                    "triple {t:?} references an id outside the tables"
                );
                if !local.insert(t) {
                    stats.duplicates[slot] += 1;
                    continue;
                }
                if !seen.insert(t) {
                    stats.cross_split += 1;
                    continue;
                }
                splits[slot].push(t);
            }
        }
        Self::index(
            SymbolTable::from_symbols(entities),
            SymbolTable::from_symbols(relations),
            splits,
            stats,
        )
    }

    /// Graph over `n_entities` and `n_relations` with generated labels
    /// `e{i}` and `r{i}`.
    pub fn from_ids(
        n_entities: usize,
        n_relations: usize,
        train: Vec<Triple>,
        valid: Vec<Triple>,
        test: Vec<Triple>,
    ) -> Self {
        let entities = (0..n_entities).map(|i| plain_symbol(format!("e{i}"))).collect();
        let relations = (0..n_relations).map(|i| plain_symbol(format!("r{i}"))).collect();
        Self::from_parts(entities, relations, train, valid, test)
    }

    fn index(
        entities: SymbolTable,
        relations: SymbolTable,
        splits: [Vec<Triple>; 3],
        mut stats: LoadStats,
    ) -> Self {
        let n_e = entities.len();
        let n_r = relations.len();
        let mut train_tails: HashMap<_, Vec<_>> = HashMap::new();
        let mut train_heads: HashMap<_, Vec<_>> = HashMap::new();
        let mut known_tails: HashMap<_, Vec<_>> = HashMap::new();
        let mut known_heads: HashMap<_, Vec<_>> = HashMap::new();
        let mut adjacency = vec![Vec::new(); n_e];
        let mut by_relation = vec![Vec::new(); n_r];
        let mut entity_in_train = vec![false; n_e];
        let mut relation_in_train = vec![false; n_r];

        for &t in &splits[0] {
            train_tails.entry((t.head, t.rel)).or_default().push(t.tail);
            train_heads.entry((t.tail, t.rel)).or_default().push(t.head);
            adjacency[t.head.index()].push(Step {
                neighbor: t.tail,
                rel: t.rel,
                inverse: false,
                triple: t,
            });
            adjacency[t.tail.index()].push(Step {
                neighbor: t.head,
                rel: t.rel,
                inverse: true,
                triple: t,
            });
            by_relation[t.rel.index()].push(t);
            entity_in_train[t.head.index()] = true;
            entity_in_train[t.tail.index()] = true;
            relation_in_train[t.rel.index()] = true;
        }
        for split in &splits {
            for &t in split {
                known_tails.entry((t.head, t.rel)).or_default().push(t.tail);
                known_heads.entry((t.tail, t.rel)).or_default().push(t.head);
            }
        }
        for v in train_tails
            .values_mut()
            .chain(train_heads.values_mut())
            .chain(known_tails.values_mut())
            .chain(known_heads.values_mut())
        {
            v.sort_unstable();
            v.dedup();
        }
        for steps in &mut adjacency {
            steps.sort_unstable();
        }
        for triples in &mut by_relation {
            triples.sort_unstable();
        }
        stats.unseen_entities = entity_in_train.iter().filter(|s| !**s).count();
        stats.unseen_relations = relation_in_train.iter().filter(|s| !**s).count();

        KnowledgeGraph {
            train_set: splits[0].iter().copied().collect(),
            entities,
            relations,
            splits,
            stats,
            train_tails,
            train_heads,
            known_tails,
            known_heads,
            adjacency,
            by_relation,
            entity_in_train,
            relation_in_train,
        }
    }

    /// Same tables and valid/test splits, different train split.
    pub fn with_train(&self, train: Vec<Triple>) -> Self {
        let splits = [train, self.splits[1].clone(), self.splits[2].clone()];
        Self::index(
            self.entities.clone(),
            self.relations.clone(),
            splits,
            LoadStats {
                duplicates: self.stats.duplicates,
                cross_split: self.stats.cross_split,
                ..LoadStats::default()
            },
        )
    }

    pub fn num_entities(&self) -> usize {
        self.entities.len()
    }

    pub fn num_relations(&self) -> usize {
        self.relations.len()
    }

    pub fn entities(&self) -> &SymbolTable {
        &self.entities
    }

    pub fn relations(&self) -> &SymbolTable {
        &self.relations
    }

    pub fn entity_ids(&self) -> impl Iterator<Item = EntityId> + '_ {
        (0..self.entities.len() as u32).map(EntityId)
    }

    pub fn relation_ids(&self) -> impl Iterator<Item = RelationId> + '_ {
        (0..self.relations.len() as u32).map(RelationId)
    }

    pub fn entity_label(&self, e: EntityId) -> &str {
        &self.entities.symbols[e.index()].label
    }

    pub fn relation_label(&self, r: RelationId) -> &str {
        &self.relations.symbols[r.index()].label
    }

    pub fn entity_by_label(&self, label: &str) -> Option<EntityId> {
        self.entities.lookup_label(label).map(EntityId)
    }

    pub fn relation_by_label(&self, label: &str) -> Option<RelationId> {
        self.relations.lookup_label(label).map(RelationId)
    }

    pub fn split(&self, split: Split) -> &[Triple] {
        &self.splits[split.slot()]
    }

    pub fn train(&self) -> &[Triple] {
        &self.splits[0]
    }

    pub fn valid(&self) -> &[Triple] {
        &self.splits[1]
    }

    pub fn test(&self) -> &[Triple] {
        &self.splits[2]
    }

    pub fn stats(&self) -> &LoadStats {
        &self.stats
    }

    pub fn in_train(&self, t: &Triple) -> bool {
        self.train_set.contains(t)
    }

    pub fn entity_in_train(&self, e: EntityId) -> bool {
        self.entity_in_train.get(e.index()).copied().unwrap_or(false)
    }

    pub fn relation_in_train(&self, r: RelationId) -> bool {
        self.relation_in_train.get(r.index()).copied().unwrap_or(false)
    }

    /// Train tails `t` with `(head, rel, t)`, ascending.
    pub fn tails(&self, head: EntityId, rel: RelationId) -> &[EntityId] {
        self.train_tails.get(&(head, rel)).map_or(&[], Vec::as_slice)
    }

    /// Train heads `h` with `(h, rel, tail)`, ascending.
    pub fn heads(&self, tail: EntityId, rel: RelationId) -> &[EntityId] {
        self.train_heads.get(&(tail, rel)).map_or(&[], Vec::as_slice)
    }

    /// Incident train triples in the undirected view, sorted by
    /// `(neighbor, relation, direction)`.
    pub fn adjacency(&self, e: EntityId) -> &[Step] {
        self.adjacency.get(e.index()).map_or(&[], Vec::as_slice)
    }

    pub fn relation_triples(&self, rel: RelationId) -> &[Triple] {
        self.by_relation.get(rel.index()).map_or(&[], Vec::as_slice)
    }

    /// All entities completing `query` into a triple of any split, ascending.
    pub fn known_true_answers(&self, query: &CompletionQuery) -> &[EntityId] {
        let index = match query.direction {
            Direction::Head => &self.known_heads,
            Direction::Tail => &self.known_tails,
        };
        index.get(&(query.known, query.rel)).map_or(&[], Vec::as_slice)
    }

    /// Train-split answers of `query`, ascending.
    pub fn train_answers(&self, query: &CompletionQuery) -> &[EntityId] {
        match query.direction {
            Direction::Head => self.heads(query.known, query.rel),
            Direction::Tail => self.tails(query.known, query.rel),
        }
    }

    /// One shortest path from `src` to `dst` over the undirected view of
    /// train, at most `max_len` triples long. Triples keep their stored
    /// orientation and are listed from `src` to `dst`.
    pub fn shortest_path(&self, src: EntityId, dst: EntityId, max_len: usize) -> Option<Vec<Triple>> {
        if src.index() >= self.num_entities() || dst.index() >= self.num_entities() {
            return None;
        }
        if src == dst {
            return Some(Vec::new());
        }
        let mut parent: HashMap<EntityId, (EntityId, Triple)> = HashMap::new();
        let mut queue = VecDeque::from([(src, 0usize)]);
        parent.insert(src, (src, Triple::new(src, RelationId(0), src)));
        while let Some((node, depth)) = queue.pop_front() {
            if depth == max_len {
                continue;
            }
            for step in self.adjacency(node) {
                if parent.contains_key(&step.neighbor) {
                    continue;
                }
                parent.insert(step.neighbor, (node, step.triple));
                if step.neighbor == dst {
                    let mut path = Vec::with_capacity(depth + 1);
                    let mut cur = dst;
                    while cur != src {
                        let (prev, triple) = parent[&cur];
                        path.push(triple);
                        cur = prev;
                    }
                    path.reverse();
                    return Some(path);
                }
                queue.push_back((step.neighbor, depth + 1));
            }
        }
        None
    }

    pub fn save_cache(&self, path: &Path) -> Result<()> {
        let payload = CachePayload {
            entities: self.entities.symbols.clone(),
            relations: self.relations.symbols.clone(),
            splits: self.splits.clone(),
            duplicates: self.stats.duplicates,
            cross_split: self.stats.cross_split,
        };
        let body = serde_json::to_vec(&payload).expect("graph payload serializes");
        let mut out = Vec::with_capacity(body.len() + 16);
        out.extend_from_slice(CACHE_MAGIC);
        out.extend_from_slice(&CACHE_VERSION.to_le_bytes());
        out.extend_from_slice(&body);
        let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        file.write_all(&out).map_err(|e| Error::io(path, e))
    }

    pub fn load_cache(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let bad = |message: &str| Error::Checkpoint {
            path: path.to_path_buf(),
            message: message.to_string(),
        };
        if bytes.len() < CACHE_MAGIC.len() + 4 || &bytes[..CACHE_MAGIC.len()] != CACHE_MAGIC {
            return Err(bad("not a graph cache"));
        }
        let mut version = [0u8; 4];
        version.copy_from_slice(&bytes[CACHE_MAGIC.len()..CACHE_MAGIC.len() + 4]);
        if u32::from_le_bytes(version) != CACHE_VERSION {
            return Err(bad("unsupported graph cache version"));
        }
        let payload: CachePayload = serde_json::from_slice(&bytes[CACHE_MAGIC.len() + 4..])
            .map_err(|e| bad(&e.to_string()))?;
        Ok(Self::index(
            SymbolTable::from_symbols(payload.entities),
            SymbolTable::from_symbols(payload.relations),
            payload.splits,
            LoadStats {
                duplicates: payload.duplicates,
                cross_split: payload.cross_split,
                ..LoadStats::default()
            },
        ))
    }
}

const CACHE_MAGIC: &[u8; 8] = b"DRKGCKG\0";
const CACHE_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct CachePayload {
    entities: Vec<Symbol>,
    relations: Vec<Symbol>,
    splits: [Vec<Triple>; 3],
    duplicates: [usize; 3],
    cross_split: usize,
}

fn plain_symbol(key: String) -> Symbol {
    Symbol {
        label: key.clone(),
        key,
        description: None,
    }
}

/// Locations of a dataset on disk.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DatasetPaths {
    pub train: PathBuf,
    pub valid: PathBuf,
    pub test: PathBuf,
    #[serde(default)]
    pub entity_labels: Option<PathBuf>,
    #[serde(default)]
    pub relation_labels: Option<PathBuf>,
}

/// Incrementally interns label-space triples.
#[derive(Debug, Default)]
pub struct KgBuilder {
    entities: SymbolTable,
    relations: SymbolTable,
    splits: [Vec<Triple>; 3],
}

impl KgBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, split: Split, head: &str, rel: &str, tail: &str) -> &mut Self {
        let h = EntityId(self.entities.intern(head));
        let r = RelationId(self.relations.intern(rel));
        let t = EntityId(self.entities.intern(tail));
        self.splits[split.slot()].push(Triple::new(h, r, t));
        self
    }

    /// Reserves an entity id without attaching any triple.
    pub fn entity(&mut self, key: &str) -> EntityId {
        EntityId(self.entities.intern(key))
    }

    pub fn relation(&mut self, key: &str) -> RelationId {
        RelationId(self.relations.intern(key))
    }

    /// Applies `key -> (label, description)`; unknown keys are ignored.
    fn apply_labels(table: &mut SymbolTable, labels: &HashMap<String, (String, Option<String>)>) {
        for s in table.symbols_mut() {
            if let Some((label, desc)) = labels.get(&s.key) {
                s.label = label.clone();
                s.description = desc.clone();
            }
        }
    }

    pub fn build(self) -> KnowledgeGraph {
        let [train, valid, test] = self.splits;
        KnowledgeGraph::from_parts(
            self.entities.symbols,
            self.relations.symbols,
            train,
            valid,
            test,
        )
    }
}

/// Reads the three TSV splits plus optional label files.
pub fn load_kg(paths: &DatasetPaths) -> Result<KnowledgeGraph> {
    let mut builder = KgBuilder::new();
    for (split, path) in [
        (Split::Train, &paths.train),
        (Split::Valid, &paths.valid),
        (Split::Test, &paths.test),
    ] {
        for (line_no, fields) in read_tsv(path)? {
            if fields.len() != 3 {
                return Err(Error::parse(
                    path,
                    line_no,
                    format!("expected head<TAB>relation<TAB>tail, found {} field(s)", fields.len()),
                ));
            }
            if fields.iter().any(|f| f.is_empty()) {
                return Err(Error::parse(path, line_no, "empty field"));
            }
            builder.push(split, &fields[0], &fields[1], &fields[2]);
        }
    }
    if let Some(path) = &paths.entity_labels {
        let labels = read_labels(path)?;
        KgBuilder::apply_labels(&mut builder.entities, &labels);
    }
    if let Some(path) = &paths.relation_labels {
        let labels = read_labels(path)?;
        KgBuilder::apply_labels(&mut builder.relations, &labels);
    }
    let kg = builder.build();
    let stats = kg.stats();
    let dups: usize = stats.duplicates.iter().sum();
    if dups > 0 {
        log::warn!("dropped {dups} duplicate triple(s) within splits ({:?})", stats.duplicates);
    }
    if stats.cross_split > 0 {
        log::warn!("dropped {} triple(s) already present in an earlier split", stats.cross_split);
    }
    if stats.unseen_entities > 0 || stats.unseen_relations > 0 {
        log::info!(
            "{} entities and {} relations occur only outside train",
            stats.unseen_entities,
            stats.unseen_relations
        );
    }
    Ok(kg)
}

/// Writes the three splits (and labels, when they differ from keys) as TSV
/// files under `dir`, in the layout [`load_kg`] reads.
pub fn write_dataset(kg: &KnowledgeGraph, dir: &Path) -> Result<DatasetPaths> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let key = |table: &SymbolTable, id: u32| table.symbols[id as usize].key.clone();
    let mut paths = DatasetPaths::default();
    for (split, name) in [(Split::Train, "train"), (Split::Valid, "valid"), (Split::Test, "test")] {
        let path = dir.join(format!("{name}.tsv"));
        let mut text = String::new();
        for t in kg.split(split) {
            text.push_str(&format!(
                "{}\t{}\t{}\n",
                key(&kg.entities, t.head.0),
                key(&kg.relations, t.rel.0),
                key(&kg.entities, t.tail.0)
            ));
        }
        fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        match split {
            Split::Train => paths.train = path,
            Split::Valid => paths.valid = path,
            Split::Test => paths.test = path,
        }
    }
    for (table, name) in [(&kg.entities, "entity_labels"), (&kg.relations, "relation_labels")] {
        if table.symbols.iter().all(|s| s.label == s.key && s.description.is_none()) {
            continue;
        }
        let path = dir.join(format!("{name}.tsv"));
        let text: String = table
            .symbols
            .iter()
            .map(|s| match &s.description {
                Some(d) => format!("{}\t{}\t{d}\n", s.key, s.label),
                None => format!("{}\t{}\n", s.key, s.label),
            })
            .collect();
        fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        if name == "entity_labels" {
            paths.entity_labels = Some(path);
        } else {
            paths.relation_labels = Some(path);
        }
    }
    Ok(paths)
}

fn read_tsv(path: &Path) -> Result<Vec<(usize, Vec<String>)>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut rows = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let line = line.trim_end_matches(['\r', '\n']);
        if line.trim().is_empty() {
            continue;
        }
        rows.push((i + 1, line.split('\t').map(|s| s.trim().to_string()).collect()));
    }
    Ok(rows)
}

fn read_labels(path: &Path) -> Result<HashMap<String, (String, Option<String>)>> {
    let mut labels = HashMap::new();
    for (line_no, mut fields) in read_tsv(path)? {
        if fields.len() < 2 || fields.len() > 3 {
            return Err(Error::parse(
                path,
                line_no,
                "expected id<TAB>label[<TAB>description]",
            ));
        }
        let desc = if fields.len() == 3 { fields.pop() } else { None };
        let label = fields.pop().expect("two fields");
        let key = fields.pop().expect("two fields");
        labels.insert(key, (label, desc.filter(|d| !d.is_empty())));
    }
    Ok(labels)
}
