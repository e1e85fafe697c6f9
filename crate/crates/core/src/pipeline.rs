//! Stage wiring shared by the command line and the experiment grid.

use std::path::PathBuf;
use std::time::Instant;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::embedding::{collect_candidates, train_global, EmbeddingConfig, GlobalEmbeddings};
use crate::error::{Error, Result};
use crate::eval::{
    evaluate_queries, inductive_subset, inject_noise, split_queries, ConditionResult, EvalOptions, Evaluation,
    ExperimentReport,
};
use crate::gcn::{train_adapter, AdapterModel, AdapterTrace, AdapterTrainConfig, TrainingExample};
use crate::kg::{CompletionQuery, DatasetPaths, EntityId, KnowledgeGraph, Split, Triple};
use crate::prompt::{load_lexicon, Lexicon, Role};
use crate::retrieval::{retrieve_subgraph, subgraph_report, RetrievalConfig};
use crate::rules::{mine_rules, postprocess, MiningConfig, RuleSet, SubsetMode};
use crate::selector::{
    Endpoint, ExternalClient, ExternalSelector, RankerTop, RerankPolicy, Selection, SelectionSource, Selector,
    SurrogateSelector,
};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    #[serde(flatten)]
    pub paths: DatasetPaths,
    /// JSON question templates; a generic phrasing is used when absent.
    pub lexicon: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RulesConfig {
    #[serde(flatten)]
    pub mining: MiningConfig,
    pub postprocess: bool,
    pub subset_mode: SubsetMode,
}

impl Default for RulesConfig {
    fn default() -> Self {
        RulesConfig {
            mining: MiningConfig::default(),
            postprocess: true,
            subset_mode: SubsetMode::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RetrievalSection {
    #[serde(flatten)]
    pub retrieval: RetrievalConfig,
    /// Candidate set size.
    pub k: usize,
}

impl Default for RetrievalSection {
    fn default() -> Self {
        RetrievalSection {
            retrieval: RetrievalConfig::default(),
            k: 20,
        }
    }
}

#[derive(Copy, Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectorMode {
    #[default]
    Surrogate,
    External,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SelectorConfig {
    pub mode: SelectorMode,
    pub use_embeddings: bool,
    pub use_templates: bool,
    pub role: Role,
    pub rerank: RerankPolicy,
    /// In-flight requests in external mode.
    pub concurrency: usize,
    pub endpoint: Endpoint,
}

impl Default for SelectorConfig {
    fn default() -> Self {
        SelectorConfig {
            mode: SelectorMode::default(),
            use_embeddings: true,
            use_templates: true,
            role: Role::default(),
            rerank: RerankPolicy::default(),
            concurrency: 4,
            endpoint: Endpoint::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub split: Split,
    /// Share of train triples replaced by random negatives before training.
    pub noise: f64,
    pub noise_seed: u64,
    /// Restrict evaluation to test triples with unseen entities or relations.
    pub inductive: bool,
    /// Repetitions of the sequential retrieval timing pass in grids.
    pub timing_repeats: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            split: Split::Test,
            noise: 0.0,
            noise_seed: 7,
            inductive: false,
            timing_repeats: 3,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub data: DataConfig,
    pub embedding: EmbeddingConfig,
    pub rules: RulesConfig,
    pub retrieval: RetrievalSection,
    pub adapter: AdapterTrainConfig,
    pub selector: SelectorConfig,
    pub eval: EvalConfig,
}

impl PipelineConfig {
    /// Every problem found, not just the first.
    pub fn validate(&self) -> Vec<String> {
        let mut errs = self.validate_settings();
        errs.extend(self.validate_paths());
        errs
    }

    /// Checks that do not touch the file system.
    pub fn validate_settings(&self) -> Vec<String> {
        let mut errs = self.embedding.validate();
        errs.extend(self.adapter.validate());
        if self.retrieval.k == 0 {
            errs.push("retrieval.k must be at least 1".into());
        }
        if self.retrieval.retrieval.tau == 0 {
            errs.push("retrieval.tau must be at least 1".into());
        }
        if self.rules.mining.max_len == 0 {
            errs.push("rules.max_len must be at least 1".into());
        }
        if !(0.0..=1.0).contains(&self.rules.mining.min_confidence) {
            errs.push("rules.min_confidence must lie in [0, 1]".into());
        }
        if !(0.0..=1.0).contains(&self.eval.noise) {
            errs.push("eval.noise must lie in [0, 1]".into());
        }
        if self.eval.split == Split::Train {
            errs.push("eval.split must be valid or test".into());
        }
        if self.eval.inductive && self.eval.split != Split::Test {
            errs.push("eval.inductive only applies to the test split".into());
        }
        if self.selector.concurrency == 0 {
            errs.push("selector.concurrency must be at least 1".into());
        }
        if self.selector.mode == SelectorMode::External && self.selector.endpoint.url.is_empty() {
            errs.push("selector.endpoint.url is required in external mode".into());
        }
        errs
    }

    pub fn validate_paths(&self) -> Vec<String> {
        let mut errs = Vec::new();
        let paths = &self.data.paths;
        for (key, path) in [
            ("data.train", Some(&paths.train)),
            ("data.valid", Some(&paths.valid)),
            ("data.test", Some(&paths.test)),
            ("data.entity_labels", paths.entity_labels.as_ref()),
            ("data.relation_labels", paths.relation_labels.as_ref()),
            ("data.lexicon", self.data.lexicon.as_ref()),
        ] {
            match path {
                Some(p) if p.as_os_str().is_empty() => errs.push(format!("{key} is not set")),
                Some(p) if !p.exists() => errs.push(format!("{key}: {} does not exist", p.display())),
                _ => {}
            }
        }
        errs
    }

    /// Whether evaluation needs a trained adapter.
    pub fn needs_adapter(&self) -> bool {
        self.selector.mode == SelectorMode::Surrogate && self.selector.use_embeddings
    }

    /// Whether retrieval needs mined rules.
    pub fn needs_rules(&self) -> bool {
        self.retrieval.retrieval.use_rules
    }

    fn eval_options(&self) -> EvalOptions {
        EvalOptions {
            k: self.retrieval.k,
            policy: self.selector.rerank,
        }
    }
}

/// The graph after optional noise injection.
pub fn prepare_graph(kg: &KnowledgeGraph, config: &PipelineConfig) -> Result<KnowledgeGraph> {
    if config.eval.noise > 0.0 {
        inject_noise(kg, config.eval.noise, config.eval.noise_seed)
    } else {
        Ok(kg.clone())
    }
}

pub fn mine_stage(kg: &KnowledgeGraph, config: &RulesConfig) -> Result<RuleSet> {
    let mined = mine_rules(kg, &config.mining)?;
    Ok(if config.postprocess {
        postprocess(&mined, config.subset_mode)
    } else {
        mined
    })
}

/// Rules as retrieval sees them: empty when rules are switched off.
pub fn active_rules<'a>(rules: Option<&'a RuleSet>, config: &PipelineConfig, empty: &'a RuleSet) -> Result<&'a RuleSet> {
    match rules {
        Some(r) => Ok(r),
        None if !config.needs_rules() => Ok(empty),
        None => Err(Error::Config("rules are required while retrieval.use_rules is on".into())),
    }
}

/// Queries used for adapter training (valid split) or evaluation.
pub fn eval_queries(kg: &KnowledgeGraph, config: &PipelineConfig) -> Vec<CompletionQuery> {
    if config.eval.inductive {
        inductive_subset(kg)
    } else {
        split_queries(kg, config.eval.split)
    }
}

#[derive(Clone, Debug)]
pub struct AdapterOutcome {
    pub model: AdapterModel,
    pub trace: AdapterTrace,
    /// Valid queries whose gold answer missed the candidate set.
    pub skipped: usize,
}

pub fn adapter_stage(
    kg: &KnowledgeGraph,
    emb: &GlobalEmbeddings,
    rules: &RuleSet,
    config: &PipelineConfig,
) -> Result<AdapterOutcome> {
    let queries = split_queries(kg, Split::Valid);
    let (k, retrieval) = (config.retrieval.k, &config.retrieval.retrieval);
    let (mut examples, mut skipped) = TrainingExample::build(kg, emb, rules, &queries, k, retrieval);
    let mut total = queries.len();
    let n_masked = config.adapter.masked_train_triples.min(kg.train().len());
    if n_masked > 0 {
        let mut rng = ChaCha8Rng::seed_from_u64(config.adapter.seed ^ 0x3a5c);
        let mut picked: Vec<usize> = index::sample(&mut rng, kg.train().len(), n_masked).into_vec();
        picked.sort_unstable();
        let triples: Vec<Triple> = picked.iter().map(|&i| kg.train()[i]).collect();
        let (more, more_skipped) = TrainingExample::build_masked(kg, emb, rules, &triples, k, retrieval);
        examples.extend(more);
        skipped += more_skipped;
        total += 2 * triples.len();
    }
    if skipped > 0 {
        log::info!("{skipped} of {total} adapter queries have gold outside the top-{k}");
    }
    let (model, trace) = train_adapter(emb, kg.num_relations(), &examples, &config.adapter)?;
    Ok(AdapterOutcome { model, trace, skipped })
}

/// Everything an evaluation reads.
pub struct Trained<'a> {
    pub emb: &'a GlobalEmbeddings,
    pub rules: &'a RuleSet,
    pub adapter: Option<&'a AdapterModel>,
}

/// Builds the configured selector. The external client is only created in
/// external mode.
pub fn build_selector<'a>(
    kg: &KnowledgeGraph,
    trained: &Trained<'a>,
    config: &PipelineConfig,
) -> Result<Box<dyn Selector + 'a>> {
    let sel = &config.selector;
    Ok(match sel.mode {
        SelectorMode::External => {
            let lexicon = match &config.data.lexicon {
                Some(path) => load_lexicon(path, kg)?,
                None => Lexicon::generic(kg),
            };
            Box::new(ExternalSelector {
                client: ExternalClient::new(sel.endpoint.clone())?,
                lexicon,
                role: sel.role,
                use_templates: sel.use_templates,
            })
        }
        SelectorMode::Surrogate if !sel.use_embeddings => Box::new(RankerTop),
        SelectorMode::Surrogate => {
            let model = trained
                .adapter
                .ok_or_else(|| Error::Config("the surrogate selector needs a trained adapter".into()))?;
            if model.layout().d_global != trained.emb.entity_width() {
                return Err(Error::Config(format!(
                    "adapter expects {}-wide global embeddings, found {}",
                    model.layout().d_global,
                    trained.emb.entity_width()
                )));
            }
            Box::new(SurrogateSelector {
                model,
                emb: trained.emb,
                rules: trained.rules,
                retrieval: config.retrieval.retrieval.clone(),
                use_local: config.adapter.use_local,
                use_embeddings: true,
            })
        }
    })
}

/// Runs `f` with parallelism capped at the external selector's
/// concurrency, or on the global pool otherwise.
fn with_pool<T: Send>(config: &PipelineConfig, f: impl FnOnce() -> T + Send) -> Result<T> {
    if config.selector.mode != SelectorMode::External {
        return Ok(f());
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.selector.concurrency)
        .build()
        .map_err(|e| Error::Config(format!("cannot start worker pool: {e}")))?;
    Ok(pool.install(f))
}

pub fn evaluate_pipeline(
    kg: &KnowledgeGraph,
    trained: &Trained<'_>,
    config: &PipelineConfig,
    queries: &[CompletionQuery],
) -> Result<Evaluation> {
    let selector = build_selector(kg, trained, config)?;
    let options = config.eval_options();
    with_pool(config, || evaluate_queries(kg, trained.emb, selector.as_ref(), queries, &options))
}

/// One selection in label space.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub query: String,
    pub candidates: Vec<String>,
    pub chosen: String,
    pub source: SelectionSource,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gold: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub raw_text: Option<String>,
}

pub fn query_text(kg: &KnowledgeGraph, q: &CompletionQuery) -> String {
    let t = q.complete(q.known);
    match q.direction {
        crate::kg::Direction::Head => format!("(?, {}, {})", kg.relation_label(t.rel), kg.entity_label(q.known)),
        crate::kg::Direction::Tail => format!("({}, {}, ?)", kg.entity_label(q.known), kg.relation_label(t.rel)),
    }
}

pub fn predict(
    kg: &KnowledgeGraph,
    trained: &Trained<'_>,
    config: &PipelineConfig,
    queries: &[CompletionQuery],
) -> Result<Vec<Prediction>> {
    use rayon::prelude::*;
    let selector = build_selector(kg, trained, config)?;
    let k = config.retrieval.k;
    with_pool(config, || {
        queries
            .par_iter()
            .map(|q| {
                let cands = collect_candidates(kg, trained.emb, q, k);
                let label = |e: EntityId| kg.entity_label(e).to_string();
                let Selection { chosen, source, raw_text } = selector.select(kg, q, &cands);
                Prediction {
                    query: query_text(kg, q),
                    candidates: cands.entities.iter().map(|&e| label(e)).collect(),
                    chosen: label(chosen),
                    source,
                    gold: q.gold.map(label),
                    raw_text,
                }
            })
            .collect()
    })
}

/// Sequential retrieval over precomputed candidates: the fastest of
/// `repeats` passes, and the mean subgraph size.
pub fn time_retrieval(
    kg: &KnowledgeGraph,
    emb: &GlobalEmbeddings,
    rules: &RuleSet,
    queries: &[CompletionQuery],
    k: usize,
    retrieval: &RetrievalConfig,
    repeats: usize,
) -> (f64, f64) {
    use rayon::prelude::*;
    let cands: Vec<_> = queries.par_iter().map(|q| collect_candidates(kg, emb, q, k)).collect();
    let mut best = f64::INFINITY;
    let mut total_size = 0usize;
    for _ in 0..repeats.max(1) {
        total_size = 0;
        let start = Instant::now();
        for (q, c) in queries.iter().zip(&cands) {
            total_size += std::hint::black_box(retrieve_subgraph(kg, q, c, rules, retrieval)).len();
        }
        best = best.min(start.elapsed().as_secs_f64());
    }
    let mean = if queries.is_empty() { 0.0 } else { total_size as f64 / queries.len() as f64 };
    (best, mean)
}

/// Share of queries whose subgraph holds a rule grounding linking gold to
/// the anchor.
pub fn gold_grounding_rate(
    kg: &KnowledgeGraph,
    emb: &GlobalEmbeddings,
    rules: &RuleSet,
    queries: &[CompletionQuery],
    k: usize,
    retrieval: &RetrievalConfig,
) -> f64 {
    use rayon::prelude::*;
    if queries.is_empty() {
        return 0.0;
    }
    let hits: usize = queries
        .par_iter()
        .map(|q| {
            let cands = collect_candidates(kg, emb, q, k);
            let g = retrieve_subgraph(kg, q, &cands, rules, retrieval);
            usize::from(subgraph_report(&g, rules).gold_grounding_present)
        })
        .sum();
    hits as f64 / queries.len() as f64
}

/// Embeddings, rules and adapter for one graph under one configuration.
pub struct PipelineArtifacts {
    pub emb: GlobalEmbeddings,
    pub rules: RuleSet,
    pub adapter: Option<AdapterOutcome>,
}

impl PipelineArtifacts {
    pub fn trained(&self) -> Trained<'_> {
        Trained {
            emb: &self.emb,
            rules: &self.rules,
            adapter: self.adapter.as_ref().map(|a| &a.model),
        }
    }
}

/// All training stages in order. Rules are mined even when retrieval does
/// not use them, so ablations can share them.
pub fn train_pipeline(kg: &KnowledgeGraph, config: &PipelineConfig) -> Result<PipelineArtifacts> {
    let (emb, _) = train_global(kg, &config.embedding)?;
    let rules = mine_stage(kg, &config.rules)?;
    let adapter = train_adapter_for(kg, &emb, &rules, config)?;
    Ok(PipelineArtifacts { emb, rules, adapter })
}

fn train_adapter_for(
    kg: &KnowledgeGraph,
    emb: &GlobalEmbeddings,
    rules: &RuleSet,
    config: &PipelineConfig,
) -> Result<Option<AdapterOutcome>> {
    if !config.needs_adapter() {
        return Ok(None);
    }
    let empty = RuleSet::empty();
    let rules = if config.needs_rules() { rules } else { &empty };
    adapter_stage(kg, emb, rules, config).map(Some)
}

/// One experiment axis.
#[derive(Clone, Debug, PartialEq)]
pub enum GridAxis {
    Tau(Vec<usize>),
    Noise(Vec<f64>),
    /// Each entry switches one flag off; `None` is the full pipeline.
    Ablation(Vec<Option<AblationFlag>>),
}

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum AblationFlag {
    UseRules,
    UseLocal,
    UseEmbeddings,
    UseTemplates,
}

impl AblationFlag {
    pub fn name(self) -> &'static str {
        match self {
            AblationFlag::UseRules => "use_rules",
            AblationFlag::UseLocal => "use_local",
            AblationFlag::UseEmbeddings => "use_embeddings",
            AblationFlag::UseTemplates => "use_templates",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        [
            AblationFlag::UseRules,
            AblationFlag::UseLocal,
            AblationFlag::UseEmbeddings,
            AblationFlag::UseTemplates,
        ]
        .into_iter()
        .find(|f| f.name() == s)
    }

    fn switch_off(self, config: &mut PipelineConfig) {
        match self {
            AblationFlag::UseRules => config.retrieval.retrieval.use_rules = false,
            AblationFlag::UseLocal => config.adapter.use_local = false,
            AblationFlag::UseEmbeddings => config.selector.use_embeddings = false,
            AblationFlag::UseTemplates => config.selector.use_templates = false,
        }
    }
}

impl GridAxis {
    /// Parses `tau=50,100,200`, `noise=0,0.2` or
    /// `ablation=full,use_rules=false,use_local=false`.
    pub fn parse(spec: &str) -> Result<Self> {
        let (name, values) = spec
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("axis {spec:?} should look like name=v1,v2")))?;
        let items: Vec<&str> = values.split(',').map(str::trim).filter(|s| !s.is_empty()).collect();
        if items.is_empty() {
            return Err(Error::Config(format!("axis {name} has no values")));
        }
        let bad = |v: &str| Error::Config(format!("bad value {v:?} on axis {name}"));
        Ok(match name.trim() {
            "tau" => GridAxis::Tau(items.iter().map(|v| v.parse().map_err(|_| bad(v))).collect::<Result<_>>()?),
            "noise" => GridAxis::Noise(items.iter().map(|v| v.parse().map_err(|_| bad(v))).collect::<Result<_>>()?),
            "ablation" => GridAxis::Ablation(
                items
                    .iter()
                    .map(|v| {
                        if *v == "full" {
                            return Ok(None);
                        }
                        let flag = v.strip_suffix("=false").unwrap_or(v);
                        AblationFlag::parse(flag).map(Some).ok_or_else(|| bad(v))
                    })
                    .collect::<Result<_>>()?,
            ),
            other => return Err(Error::Config(format!("unknown axis {other:?}; expected tau, noise or ablation"))),
        })
    }

    pub fn name(&self) -> &'static str {
        match self {
            GridAxis::Tau(_) => "tau",
            GridAxis::Noise(_) => "noise",
            GridAxis::Ablation(_) => "ablation",
        }
    }

    fn is_empty(&self) -> bool {
        match self {
            GridAxis::Tau(v) => v.is_empty(),
            GridAxis::Noise(v) => v.is_empty(),
            GridAxis::Ablation(v) => v.is_empty(),
        }
    }

    /// Condition labels and the configuration each one runs under.
    fn conditions(&self, base: &PipelineConfig) -> Vec<(String, PipelineConfig)> {
        match self {
            GridAxis::Tau(values) => values
                .iter()
                .map(|&t| {
                    let mut c = base.clone();
                    c.retrieval.retrieval.tau = t;
                    (format!("tau={t}"), c)
                })
                .collect(),
            GridAxis::Noise(values) => values
                .iter()
                .map(|&p| {
                    let mut c = base.clone();
                    c.eval.noise = p;
                    (format!("noise={p}"), c)
                })
                .collect(),
            GridAxis::Ablation(flags) => flags
                .iter()
                .map(|f| {
                    let mut c = base.clone();
                    match f {
                        None => ("full".to_string(), c),
                        Some(flag) => {
                            flag.switch_off(&mut c);
                            (format!("{}=false", flag.name()), c)
                        }
                    }
                })
                .collect(),
        }
    }
}

/// One full train-and-evaluate per condition with everything else fixed.
/// Embeddings and rules are shared between conditions on the same graph.
/// A failing condition stops the grid; finished rows are kept in the
/// report and the failure is recorded on it.
pub fn run_grid(kg: &KnowledgeGraph, base: &PipelineConfig, axis: &GridAxis) -> Result<ExperimentReport> {
    if axis.is_empty() {
        return Err(Error::Config("grid axis is empty".into()));
    }
    let mut report = ExperimentReport {
        axis: axis.name().to_string(),
        config: serde_json::to_value(base).expect("config serialises"),
        conditions: Vec::new(),
        failure: None,
    };
    let mut shared: Option<(f64, GlobalEmbeddings, RuleSet)> = None;
    for (label, config) in axis.conditions(base) {
        log::info!("grid condition {label}");
        match run_condition(kg, &config, &label, &mut shared) {
            Ok(row) => report.conditions.push(row),
            Err(e) => {
                let err = Error::Grid {
                    condition: label,
                    source: Box::new(e),
                };
                log::error!("{err}");
                report.failure = Some(err.to_string());
                break;
            }
        }
    }
    Ok(report)
}

fn run_condition(
    kg: &KnowledgeGraph,
    config: &PipelineConfig,
    label: &str,
    shared: &mut Option<(f64, GlobalEmbeddings, RuleSet)>,
) -> Result<ConditionResult> {
    let problems = config.validate_settings();
    if !problems.is_empty() {
        return Err(Error::Config(problems.join("; ")));
    }
    let start = Instant::now();
    let graph = prepare_graph(kg, config)?;
    let reuse = matches!(shared, Some((noise, _, _)) if *noise == config.eval.noise);
    if !reuse {
        let (emb, _) = train_global(&graph, &config.embedding)?;
        let rules = mine_stage(&graph, &config.rules)?;
        *shared = Some((config.eval.noise, emb, rules));
    }
    let (_, emb, all_rules) = shared.as_ref().expect("filled above");
    let adapter = train_adapter_for(&graph, emb, all_rules, config)?;
    let empty = RuleSet::empty();
    let rules = if config.needs_rules() { all_rules } else { &empty };
    let trained = Trained {
        emb,
        rules,
        adapter: adapter.as_ref().map(|a| &a.model),
    };
    let queries = eval_queries(&graph, config);
    let evaluation = evaluate_pipeline(&graph, &trained, config, &queries)?;
    let wall_clock_secs = start.elapsed().as_secs_f64();
    let (retrieval_secs, mean_subgraph_size) = time_retrieval(
        &graph,
        emb,
        rules,
        &queries,
        config.retrieval.k,
        &config.retrieval.retrieval,
        config.eval.timing_repeats,
    );
    log::info!("{label}: hits@1 {:.4}, mrr {:.4}", evaluation.metrics.hits1, evaluation.metrics.mrr);
    Ok(ConditionResult {
        condition: label.to_string(),
        metrics: evaluation.metrics,
        wall_clock_secs,
        retrieval_secs,
        mean_subgraph_size,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures::{composition_kg, CompositionSpec};
    use crate::gcn::AdapterShape;

    fn small_kg() -> KnowledgeGraph {
        composition_kg(&CompositionSpec {
            sources: 40,
            middles: 20,
            hubs: 2,
            seed: 7,
        })
    }

    fn small_config() -> PipelineConfig {
        PipelineConfig {
            embedding: EmbeddingConfig {
                dim: 8,
                epochs: 30,
                ..EmbeddingConfig::default()
            },
            adapter: AdapterTrainConfig {
                shape: AdapterShape {
                    d_gcn: 8,
                    layers: 1,
                    d_out: 8,
                },
                epochs: 5,
                ..AdapterTrainConfig::default()
            },
            retrieval: RetrievalSection {
                k: 40,
                ..RetrievalSection::default()
            },
            ..PipelineConfig::default()
        }
    }

    #[test]
    fn defaults_need_dataset_paths() {
        let errs = PipelineConfig::default().validate();
        assert!(errs.iter().any(|e| e.contains("data.train")));
        assert!(errs.iter().any(|e| e.contains("data.test")));
    }

    #[test]
    fn validation_lists_every_violation() {
        let mut c = PipelineConfig::default();
        c.retrieval.k = 0;
        c.retrieval.retrieval.tau = 0;
        c.eval.noise = 2.0;
        let errs = c.validate();
        for key in ["retrieval.k", "retrieval.tau", "eval.noise"] {
            assert!(errs.iter().any(|e| e.contains(key)), "{key} missing from {errs:?}");
        }
    }

    #[test]
    fn axis_parsing() {
        assert_eq!(GridAxis::parse("tau=50,100,200").unwrap(), GridAxis::Tau(vec![50, 100, 200]));
        assert_eq!(GridAxis::parse("noise=0,0.2").unwrap(), GridAxis::Noise(vec![0.0, 0.2]));
        assert_eq!(
            GridAxis::parse("ablation=full,use_rules=false,use_local").unwrap(),
            GridAxis::Ablation(vec![None, Some(AblationFlag::UseRules), Some(AblationFlag::UseLocal)])
        );
        assert!(GridAxis::parse("tau=").is_err());
        assert!(GridAxis::parse("depth=1").is_err());
        assert!(GridAxis::parse("tau=x").is_err());
    }

    #[test]
    fn empty_axis_is_an_error() {
        let kg = small_kg();
        assert!(run_grid(&kg, &small_config(), &GridAxis::Tau(vec![])).is_err());
    }

    #[test]
    fn tau_axis_gives_one_row_per_value() {
        let kg = small_kg();
        let report = run_grid(&kg, &small_config(), &GridAxis::Tau(vec![50, 100, 200])).unwrap();
        assert_eq!(report.conditions.len(), 3);
        assert_eq!(report.conditions[2].condition, "tau=200");
        assert!(report.failure.is_none());
    }

    #[test]
    fn failing_condition_keeps_earlier_rows() {
        let kg = small_kg();
        let report = run_grid(&kg, &small_config(), &GridAxis::Noise(vec![0.0, 2.0, 0.1])).unwrap();
        assert_eq!(report.conditions.len(), 1);
        assert!(report.failure.unwrap().contains("noise=2"));
    }

    #[test]
    fn ablation_without_embeddings_is_ranker_order() {
        let kg = small_kg();
        let mut cfg = small_config();
        cfg.selector.use_embeddings = false;
        let arts = train_pipeline(&kg, &cfg).unwrap();
        assert!(arts.adapter.is_none());
        let ev = evaluate_pipeline(&kg, &arts.trained(), &cfg, &eval_queries(&kg, &cfg)).unwrap();
        assert!(ev.records.iter().all(|r| r.final_rank == r.base_rank || r.final_rank == 1));
    }

    #[test]
    fn surrogate_needs_an_adapter() {
        let kg = small_kg();
        let cfg = small_config();
        let arts = train_pipeline(&kg, &cfg).unwrap();
        let t = Trained {
            adapter: None,
            ..arts.trained()
        };
        assert!(build_selector(&kg, &t, &cfg).is_err());
    }

    #[test]
    fn predictions_use_labels() {
        let kg = small_kg();
        let cfg = small_config();
        let arts = train_pipeline(&kg, &cfg).unwrap();
        let q = eval_queries(&kg, &cfg);
        let preds = predict(&kg, &arts.trained(), &cfg, &q).unwrap();
        assert_eq!(preds.len(), q.len());
        assert!(preds.iter().all(|p| p.candidates.contains(&p.chosen)));
        assert!(preds[0].query.contains('?'));
    }
}
