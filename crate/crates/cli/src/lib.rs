//! The `drkgc` command line: stage runners over an artifact directory.

pub mod artifacts;
pub mod config;

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use drkgc_core::embedding::{collect_candidates, train_global, GlobalEmbeddings};
use drkgc_core::eval::Metrics;
use drkgc_core::fixtures::{composition_kg, toy_t1, CompositionSpec};
use drkgc_core::gcn::AdapterModel;
use drkgc_core::kg::{load_kg, write_dataset, CompletionQuery, KnowledgeGraph};
use drkgc_core::pipeline::{
    adapter_stage, eval_queries, evaluate_pipeline, mine_stage, predict, prepare_graph, query_text, run_grid,
    GridAxis, PipelineConfig, SelectorMode, Trained,
};
use drkgc_core::retrieval::{retrieve_subgraph, subgraph_report};
use drkgc_core::rules::{load_rules, save_rules, RuleSet};
use serde_json::json;

use artifacts::{config_hash, FileHash, Lock, Manifest, Stage, ARTIFACT_VERSION};

#[derive(Debug, Parser)]
#[command(
    name = "drkgc",
    version,
    about = "Knowledge-graph completion: embeddings, rules, subgraph retrieval, GCN re-ranking",
    after_help = "Any setting can be overridden as --section.key=value, e.g. --retrieval.tau=50."
)]
pub struct Cli {
    /// TOML configuration file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Artifact directory.
    #[arg(long, global = true, default_value = "drkgc-out")]
    pub out: PathBuf,
    /// Rerun stages even when their manifests are up to date.
    #[arg(long, global = true)]
    pub force: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Read the dataset (applying configured noise) into a graph cache.
    Load,
    /// Train global embeddings.
    TrainEmbeddings,
    /// Mine and post-process rules.
    MineRules,
    /// Retrieve a subgraph for every evaluation query.
    Retrieve,
    /// Train the GCN adapter.
    TrainAdapter,
    /// Select one answer per evaluation query, or for a single query.
    Predict {
        /// A query such as "head,relation,?" or "?,relation,tail".
        #[arg(long)]
        query: Option<String>,
    },
    /// Compute filtered MRR and Hits@{1,3,10}.
    Evaluate,
    /// Run one experiment axis: tau=50,100,200 | noise=0,0.2 | ablation=full,use_rules=false.
    Grid {
        #[arg(long)]
        axis: String,
    },
    /// Every stage from load to evaluate.
    All,
    /// Write a synthetic dataset and a matching config.
    MakeFixture {
        #[arg(long, value_enum, default_value_t = FixtureKind::Composition)]
        kind: FixtureKind,
        #[arg(long)]
        dir: PathBuf,
    },
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
pub enum FixtureKind {
    /// Five entities, three relations.
    Toy,
    /// 200 entities with r3 = r2 after r1.
    Composition,
}

/// Parses process arguments, pulling out `--section.key=value` overrides.
pub fn parse_args(args: Vec<String>) -> (Cli, Vec<(String, String)>) {
    let (rest, overrides) = config::split_overrides(args);
    (Cli::parse_from(rest), overrides)
}

pub fn run(cli: Cli, overrides: &[(String, String)]) -> Result<()> {
    if let Command::MakeFixture { kind, dir } = &cli.command {
        return make_fixture(*kind, dir);
    }
    let config = config::load_config(cli.config.as_deref(), overrides)?;
    let _lock = Lock::acquire(&cli.out)?;
    let ws = Workspace {
        out: cli.out.clone(),
        config,
        force: cli.force,
    };
    match &cli.command {
        Command::Load => ws.load(),
        Command::TrainEmbeddings => ws.train_embeddings(),
        Command::MineRules => ws.mine_rules(),
        Command::Retrieve => ws.retrieve(),
        Command::TrainAdapter => ws.train_adapter(),
        Command::Predict { query } => ws.predict(query.as_deref()),
        Command::Evaluate => ws.evaluate(),
        Command::Grid { axis } => ws.grid(axis),
        Command::All => {
            ws.load()?;
            ws.train_embeddings()?;
            ws.mine_rules()?;
            if ws.config.needs_adapter() {
                ws.train_adapter()?;
            }
            ws.evaluate()
        }
        Command::MakeFixture { .. } => unreachable!("handled above"),
    }
}

fn make_fixture(kind: FixtureKind, dir: &Path) -> Result<()> {
    let kg = match kind {
        FixtureKind::Toy => toy_t1(),
        FixtureKind::Composition => composition_kg(&CompositionSpec::default()),
    };
    write_dataset(&kg, dir)?;
    let config = "[data]\ntrain = \"train.tsv\"\nvalid = \"valid.tsv\"\ntest = \"test.tsv\"\n";
    let path = dir.join("drkgc.toml");
    fs::write(&path, config).with_context(|| format!("cannot write {}", path.display()))?;
    println!("wrote {} and {}", dir.join("*.tsv").display(), path.display());
    Ok(())
}

#[derive(Debug, PartialEq, Eq)]
pub enum Outcome {
    Ran,
    UpToDate,
}

struct Workspace {
    out: PathBuf,
    config: PipelineConfig,
    force: bool,
}

const GRAPH: &str = "graph.bin";
const EMBEDDINGS: &str = "embeddings.bin";
const RULES: &str = "rules.jsonl";
const ADAPTER: &str = "adapter.bin";

impl Workspace {
    fn dir(&self, stage: Stage) -> PathBuf {
        self.out.join(stage.dir_name())
    }

    fn file(&self, stage: Stage, name: &str) -> PathBuf {
        self.dir(stage).join(name)
    }

    /// The settings a stage's output depends on.
    fn settings(&self, stage: Stage) -> serde_json::Value {
        let c = &self.config;
        match stage {
            Stage::Load => json!({"data": c.data, "noise": c.eval.noise, "noise_seed": c.eval.noise_seed}),
            Stage::TrainEmbeddings => json!({"embedding": c.embedding}),
            Stage::MineRules => json!({"rules": c.rules}),
            Stage::Retrieve => json!({"retrieval": c.retrieval, "split": c.eval.split, "inductive": c.eval.inductive}),
            Stage::TrainAdapter => json!({"adapter": c.adapter, "retrieval": c.retrieval}),
            Stage::Predict | Stage::Evaluate => json!({
                "retrieval": c.retrieval,
                "selector": c.selector,
                "use_local": c.adapter.use_local,
                "split": c.eval.split,
                "inductive": c.eval.inductive,
            }),
            Stage::Grid => json!(c),
        }
    }

    fn stage_hash(&self, stage: Stage, extra: &serde_json::Value) -> String {
        if extra.is_null() {
            config_hash(&self.settings(stage))
        } else {
            config_hash(&json!({"settings": self.settings(stage), "extra": extra}))
        }
    }

    fn seed(&self, stage: Stage) -> u64 {
        let c = &self.config;
        match stage {
            Stage::Load => c.eval.noise_seed,
            Stage::TrainEmbeddings => c.embedding.seed,
            Stage::MineRules => c.rules.mining.seed,
            Stage::TrainAdapter | Stage::Predict | Stage::Evaluate | Stage::Grid => c.adapter.seed,
            Stage::Retrieve => 0,
        }
    }

    /// Upstream stages whose artifacts `stage` reads.
    fn upstream(&self, stage: Stage) -> Vec<Stage> {
        let mut up = Vec::new();
        match stage {
            Stage::Load | Stage::Grid => {}
            Stage::TrainEmbeddings | Stage::MineRules => up.push(Stage::Load),
            Stage::Retrieve | Stage::TrainAdapter | Stage::Predict | Stage::Evaluate => {
                up.extend([Stage::Load, Stage::TrainEmbeddings]);
                if self.config.needs_rules() {
                    up.push(Stage::MineRules);
                }
                if matches!(stage, Stage::Predict | Stage::Evaluate) && self.config.needs_adapter() {
                    up.push(Stage::TrainAdapter);
                }
            }
        }
        up
    }

    fn what(stage: Stage) -> &'static str {
        match stage {
            Stage::Load => "graph cache",
            Stage::TrainEmbeddings => "embeddings",
            Stage::MineRules => "rules",
            Stage::TrainAdapter => "adapter",
            _ => "artifacts",
        }
    }

    /// Checks that `stage` has been run with the current settings.
    fn require(&self, stage: Stage) -> Result<Manifest> {
        let dir = self.dir(stage);
        let cmd = stage.command();
        let Some(m) = Manifest::read(&dir) else {
            bail!("no {} in {}: run `drkgc {cmd}` first", Self::what(stage), dir.display());
        };
        if m.version != ARTIFACT_VERSION || m.config_hash != self.stage_hash(stage, &serde_json::Value::Null) {
            bail!(
                "the {} in {} were built with different settings: rerun `drkgc {cmd}`",
                Self::what(stage),
                dir.display()
            );
        }
        if !m.outputs_intact() {
            bail!("the {} in {} were modified: rerun `drkgc {cmd} --force`", Self::what(stage), dir.display());
        }
        Ok(m)
    }

    fn dataset_files(&self) -> Vec<PathBuf> {
        let d = &self.config.data;
        let mut files = vec![d.paths.train.clone(), d.paths.valid.clone(), d.paths.test.clone()];
        files.extend(d.paths.entity_labels.iter().cloned());
        files.extend(d.paths.relation_labels.iter().cloned());
        files
    }

    /// Runs `produce` into the stage directory unless its manifest shows
    /// identical settings and inputs. `extra` joins the settings hash.
    fn run_stage(
        &self,
        stage: Stage,
        dir: &Path,
        extra: serde_json::Value,
        produce: impl FnOnce(&Path) -> Result<Vec<PathBuf>>,
    ) -> Result<Outcome> {
        let mut inputs: Vec<PathBuf> = Vec::new();
        for up in self.upstream(stage) {
            let m = self.require(up)?;
            inputs.extend(m.outputs.into_iter().map(|f| f.path));
        }
        match stage {
            Stage::Load | Stage::Grid => inputs.extend(self.dataset_files()),
            Stage::Predict | Stage::Evaluate if self.config.selector.mode == SelectorMode::External => {
                inputs.extend(self.config.data.lexicon.iter().cloned())
            }
            _ => {}
        }
        let inputs = inputs.iter().map(|p| FileHash::of(p)).collect::<Result<Vec<_>>>()?;
        let hash = self.stage_hash(stage, &extra);
        if !self.force {
            if let Some(m) = Manifest::read(dir) {
                if m.version == ARTIFACT_VERSION && m.config_hash == hash && m.inputs == inputs && m.outputs_intact() {
                    println!("{}: up to date ({})", stage.command(), dir.display());
                    return Ok(Outcome::UpToDate);
                }
            }
        }
        if dir.exists() {
            fs::remove_dir_all(dir).with_context(|| format!("cannot clear {}", dir.display()))?;
        }
        fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))?;
        let outputs = produce(dir)?;
        let manifest = Manifest {
            stage: stage.command().to_string(),
            version: ARTIFACT_VERSION,
            config_hash: hash,
            seed: self.seed(stage),
            inputs,
            outputs: outputs.iter().map(|p| FileHash::of(p)).collect::<Result<_>>()?,
        };
        manifest.write(dir)?;
        Ok(Outcome::Ran)
    }

    fn graph(&self) -> Result<KnowledgeGraph> {
        Ok(KnowledgeGraph::load_cache(&self.file(Stage::Load, GRAPH))?)
    }

    fn embeddings(&self) -> Result<GlobalEmbeddings> {
        Ok(GlobalEmbeddings::load(&self.file(Stage::TrainEmbeddings, EMBEDDINGS))?)
    }

    /// Mined rules, or an empty set when retrieval does not use them.
    fn rules(&self, kg: &KnowledgeGraph) -> Result<RuleSet> {
        if self.config.needs_rules() {
            Ok(load_rules(&self.file(Stage::MineRules, RULES), kg)?)
        } else {
            Ok(RuleSet::empty())
        }
    }

    fn adapter(&self) -> Result<Option<AdapterModel>> {
        if self.config.needs_adapter() {
            Ok(Some(AdapterModel::load(&self.file(Stage::TrainAdapter, ADAPTER))?))
        } else {
            Ok(None)
        }
    }

    fn load(&self) -> Result<()> {
        let stage = Stage::Load;
        self.run_stage(stage, &self.dir(stage), serde_json::Value::Null, |dir| {
            let raw = load_kg(&self.config.data.paths)?;
            let kg = prepare_graph(&raw, &self.config)?;
            let graph = dir.join(GRAPH);
            kg.save_cache(&graph)?;
            let summary = dir.join("summary.json");
            let changed = kg.train().iter().filter(|t| !raw.in_train(t)).count();
            let text = json!({
                "entities": kg.num_entities(),
                "relations": kg.num_relations(),
                "train": kg.train().len(),
                "valid": kg.valid().len(),
                "test": kg.test().len(),
                "noise_triples": changed,
            });
            write_json(&summary, &text)?;
            println!(
                "load: {} entities, {} relations, {}/{}/{} triples",
                kg.num_entities(),
                kg.num_relations(),
                kg.train().len(),
                kg.valid().len(),
                kg.test().len()
            );
            Ok(vec![graph, summary])
        })?;
        Ok(())
    }

    fn train_embeddings(&self) -> Result<()> {
        let stage = Stage::TrainEmbeddings;
        self.run_stage(stage, &self.dir(stage), serde_json::Value::Null, |dir| {
            let kg = self.graph()?;
            let (emb, trace) = train_global(&kg, &self.config.embedding)?;
            let path = dir.join(EMBEDDINGS);
            emb.save(&path)?;
            let trace_path = dir.join("trace.json");
            write_json(&trace_path, &serde_json::to_value(&trace)?)?;
            if let Some(loss) = trace.epoch_loss.last() {
                println!("train-embeddings: final loss {loss:.5}");
            }
            Ok(vec![path, trace_path])
        })?;
        Ok(())
    }

    fn mine_rules(&self) -> Result<()> {
        let stage = Stage::MineRules;
        self.run_stage(stage, &self.dir(stage), serde_json::Value::Null, |dir| {
            let kg = self.graph()?;
            let rules = mine_stage(&kg, &self.config.rules)?;
            let path = dir.join(RULES);
            save_rules(&path, &kg, &rules)?;
            println!("mine-rules: {} rules", rules.len());
            Ok(vec![path])
        })?;
        Ok(())
    }

    fn retrieve(&self) -> Result<()> {
        let stage = Stage::Retrieve;
        self.run_stage(stage, &self.dir(stage), serde_json::Value::Null, |dir| {
            let kg = self.graph()?;
            let emb = self.embeddings()?;
            let rules = self.rules(&kg)?;
            let cfg = &self.config;
            let mut lines = String::new();
            let (mut size, mut grounded, mut connected) = (0usize, 0usize, 0.0);
            let queries = eval_queries(&kg, cfg);
            for q in &queries {
                let cands = collect_candidates(&kg, &emb, q, cfg.retrieval.k);
                let g = retrieve_subgraph(&kg, q, &cands, &rules, &cfg.retrieval.retrieval);
                let report = subgraph_report(&g, &rules);
                size += report.size;
                grounded += usize::from(report.gold_grounding_present);
                connected += report.connected_fraction;
                let line = json!({"query": query_text(&kg, q), "report": report, "subgraph": g.dump(&kg)});
                lines.push_str(&line.to_string());
                lines.push('\n');
            }
            let path = dir.join("subgraphs.jsonl");
            fs::write(&path, lines).with_context(|| format!("cannot write {}", path.display()))?;
            let n = queries.len().max(1) as f64;
            let summary = json!({
                "queries": queries.len(),
                "mean_size": size as f64 / n,
                "gold_grounding_rate": grounded as f64 / n,
                "mean_connected_fraction": connected / n,
            });
            let summary_path = dir.join("summary.json");
            write_json(&summary_path, &summary)?;
            println!("retrieve: {} subgraphs, mean size {:.1}", queries.len(), size as f64 / n);
            Ok(vec![path, summary_path])
        })?;
        Ok(())
    }

    fn train_adapter(&self) -> Result<()> {
        let stage = Stage::TrainAdapter;
        self.run_stage(stage, &self.dir(stage), serde_json::Value::Null, |dir| {
            let kg = self.graph()?;
            let emb = self.embeddings()?;
            let rules = self.rules(&kg)?;
            let outcome = adapter_stage(&kg, &emb, &rules, &self.config)?;
            let path = dir.join(ADAPTER);
            outcome.model.save(&path)?;
            let trace_path = dir.join("trace.json");
            write_json(
                &trace_path,
                &json!({"epoch_loss": outcome.trace.epoch_loss, "examples": outcome.trace.examples, "skipped": outcome.skipped}),
            )?;
            println!(
                "train-adapter: {} examples ({} skipped), final loss {:.5}",
                outcome.trace.examples,
                outcome.skipped,
                outcome.trace.epoch_loss.last().copied().unwrap_or(f64::NAN)
            );
            Ok(vec![path, trace_path])
        })?;
        Ok(())
    }

    fn predict(&self, query: Option<&str>) -> Result<()> {
        let stage = Stage::Predict;
        let extra = query.map_or(serde_json::Value::Null, |q| json!(q));
        self.run_stage(stage, &self.dir(stage), extra, |dir| {
            let kg = self.graph()?;
            let emb = self.embeddings()?;
            let rules = self.rules(&kg)?;
            let adapter = self.adapter()?;
            let trained = Trained {
                emb: &emb,
                rules: &rules,
                adapter: adapter.as_ref(),
            };
            let queries = match query {
                Some(text) => vec![parse_query(&kg, text)?],
                None => eval_queries(&kg, &self.config),
            };
            let preds = predict(&kg, &trained, &self.config, &queries)?;
            let mut lines = String::new();
            for p in &preds {
                lines.push_str(&serde_json::to_string(p)?);
                lines.push('\n');
            }
            if query.is_some() {
                for p in &preds {
                    println!("{} -> {} ({:?})", p.query, p.chosen, p.source);
                }
            } else {
                println!("predict: {} predictions", preds.len());
            }
            let path = dir.join("predictions.jsonl");
            fs::write(&path, lines).with_context(|| format!("cannot write {}", path.display()))?;
            Ok(vec![path])
        })?;
        Ok(())
    }

    fn evaluate(&self) -> Result<()> {
        let stage = Stage::Evaluate;
        let outcome = self.run_stage(stage, &self.dir(stage), serde_json::Value::Null, |dir| {
            let kg = self.graph()?;
            let emb = self.embeddings()?;
            let rules = self.rules(&kg)?;
            let adapter = self.adapter()?;
            let trained = Trained {
                emb: &emb,
                rules: &rules,
                adapter: adapter.as_ref(),
            };
            let queries = eval_queries(&kg, &self.config);
            let ev = evaluate_pipeline(&kg, &trained, &self.config, &queries)?;
            let metrics = dir.join("metrics.json");
            fs::write(&metrics, ev.metrics.to_json() + "\n")
                .with_context(|| format!("cannot write {}", metrics.display()))?;
            let mut lines = String::new();
            for r in &ev.records {
                lines.push_str(&serde_json::to_string(r)?);
                lines.push('\n');
            }
            let records = dir.join("records.jsonl");
            fs::write(&records, lines).with_context(|| format!("cannot write {}", records.display()))?;
            Ok(vec![metrics, records])
        })?;
        let path = self.file(stage, "metrics.json");
        let metrics: Metrics = serde_json::from_str(&fs::read_to_string(&path)?)?;
        if outcome == Outcome::Ran {
            println!("evaluate: wrote {}", path.display());
        }
        println!(
            "MRR {:.4}  Hits@1 {:.4}  Hits@3 {:.4}  Hits@10 {:.4}  ({} queries, {} skipped)",
            metrics.mrr, metrics.hits1, metrics.hits3, metrics.hits10, metrics.query_count, metrics.skipped
        );
        Ok(())
    }

    fn grid(&self, axis_spec: &str) -> Result<()> {
        let axis = GridAxis::parse(axis_spec)?;
        let dir = self.dir(Stage::Grid).join(axis.name());
        let mut failure = None;
        self.run_stage(Stage::Grid, &dir, json!(axis_spec), |dir| {
            let kg = load_kg(&self.config.data.paths)?;
            let report = run_grid(&kg, &self.config, &axis)?;
            let json_path = dir.join("report.json");
            let txt_path = dir.join("report.txt");
            let csv_path = dir.join("report.csv");
            fs::write(&json_path, report.to_json() + "\n")?;
            fs::write(&txt_path, report.to_table())?;
            fs::write(&csv_path, report.to_csv())?;
            print!("{}", report.to_table());
            failure = report.failure.clone();
            Ok(vec![json_path, txt_path, csv_path])
        })?;
        if let Some(f) = failure {
            fs::remove_file(dir.join(artifacts::MANIFEST)).ok();
            bail!("{f} (partial report kept in {})", dir.display());
        }
        Ok(())
    }
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<()> {
    let text = serde_json::to_string_pretty(value)? + "\n";
    fs::write(path, text).with_context(|| format!("cannot write {}", path.display()))
}

/// Reads `head,relation,?` or `?,relation,tail`; names are entity keys or
/// labels.
pub fn parse_query(kg: &KnowledgeGraph, text: &str) -> Result<CompletionQuery> {
    let parts: Vec<&str> = text.split(',').map(str::trim).collect();
    let [h, r, t] = parts[..] else {
        bail!("query {text:?} should have three comma-separated fields");
    };
    let entity = |name: &str| {
        kg.entities()
            .lookup(name)
            .map(drkgc_core::kg::EntityId)
            .or_else(|| kg.entity_by_label(name))
            .with_context(|| format!("unknown entity {name:?}"))
    };
    let rel = kg
        .relations()
        .lookup(r)
        .map(drkgc_core::kg::RelationId)
        .or_else(|| kg.relation_by_label(r))
        .with_context(|| format!("unknown relation {r:?}"))?;
    match (h, t) {
        ("?", "?") => bail!("query {text:?} has two unknowns"),
        ("?", tail) => Ok(CompletionQuery::head(rel, entity(tail)?, None)),
        (head, "?") => Ok(CompletionQuery::tail(entity(head)?, rel, None)),
        _ => bail!("query {text:?} needs a ? in the head or tail position"),
    }
}
