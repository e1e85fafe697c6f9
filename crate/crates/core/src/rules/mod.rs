//! Relation-path rules `head(x, y) ← b₁(x, z₁) ∧ … ∧ bₙ(zₙ₋₁, y)`: mining,
//! file ingestion, post-processing and grounding.

mod ground;
mod mine;
mod postprocess;

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::ops::Range;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kg::{KnowledgeGraph, RelationId};

pub use ground::{body_reach, ground_body, ground_rule, LocalIndex, StepIndex};
pub use mine::{mine_rules, MiningConfig};
pub use postprocess::{postprocess, SubsetMode};

/// Default maximum body length.
pub const DEFAULT_MAX_RULE_LEN: usize = 3;

#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct BodyStep {
    pub rel: RelationId,
    /// Traverse the relation from tail to head.
    pub inverse: bool,
}

impl BodyStep {
    pub fn forward(rel: RelationId) -> Self {
        BodyStep { rel, inverse: false }
    }

    pub fn inverse(rel: RelationId) -> Self {
        BodyStep { rel, inverse: true }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Rule {
    pub head: RelationId,
    pub body: Vec<BodyStep>,
    pub confidence: f64,
    pub support: usize,
}

impl Rule {
    pub fn new(head: RelationId, body: Vec<BodyStep>, confidence: f64, support: usize) -> Self {
        Rule {
            head,
            body,
            confidence,
            support,
        }
    }
}

/// Index of a rule inside its [`RuleSet`].
#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct RuleId(pub usize);

/// Rules grouped by head relation, each group in descending confidence.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RuleSet {
    rules: Vec<Rule>,
    groups: BTreeMap<RelationId, Range<usize>>,
}

impl RuleSet {
    pub fn new(mut rules: Vec<Rule>) -> Self {
        rules.sort_by(|a, b| {
            a.head
                .cmp(&b.head)
                .then(b.confidence.total_cmp(&a.confidence))
                .then_with(|| a.body.cmp(&b.body))
        });
        let mut groups = BTreeMap::new();
        let mut start = 0;
        for i in 1..=rules.len() {
            if i == rules.len() || rules[i].head != rules[start].head {
                if i > start {
                    groups.insert(rules[start].head, start..i);
                }
                start = i;
            }
        }
        RuleSet { rules, groups }
    }

    pub fn empty() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.rules.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rules.is_empty()
    }

    pub fn rules(&self) -> &[Rule] {
        &self.rules
    }

    pub fn get(&self, id: RuleId) -> &Rule {
        &self.rules[id.0]
    }

    /// Rules concluding `head`, best first, with their ids.
    pub fn for_head(&self, head: RelationId) -> impl Iterator<Item = (RuleId, &Rule)> + '_ {
        let range = self.groups.get(&head).cloned().unwrap_or(0..0);
        range.map(move |i| (RuleId(i), &self.rules[i]))
    }

    pub fn max_body_len(&self) -> usize {
        self.rules.iter().map(|r| r.body.len()).max().unwrap_or(0)
    }

    pub fn into_rules(self) -> Vec<Rule> {
        self.rules
    }
}

#[derive(Serialize, Deserialize)]
struct StepRecord {
    rel: String,
    #[serde(default)]
    inv: bool,
}

#[derive(Serialize, Deserialize)]
struct RuleRecord {
    head: String,
    body: Vec<StepRecord>,
    conf: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    support: Option<usize>,
}

/// Reads a JSONL rule file. Relations are referenced by label.
/// Post-processing is not applied.
pub fn load_rules(path: &Path, kg: &KnowledgeGraph) -> Result<RuleSet> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut rules = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let err = |msg: String| Error::parse(path, i + 1, msg);
        let rec: RuleRecord = serde_json::from_str(&line).map_err(|e| err(e.to_string()))?;
        if !(0.0..=1.0).contains(&rec.conf) {
            return Err(err(format!("confidence {} outside [0, 1]", rec.conf)));
        }
        if rec.body.is_empty() {
            return Err(err("empty rule body".into()));
        }
        let relation = |label: &str| {
            kg.relation_by_label(label)
                .ok_or_else(|| err(format!("unknown relation {label:?}")))
        };
        let head = relation(&rec.head)?;
        let body = rec
            .body
            .iter()
            .map(|s| {
                Ok(BodyStep {
                    rel: relation(&s.rel)?,
                    inverse: s.inv,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        rules.push(Rule::new(head, body, rec.conf, rec.support.unwrap_or(0)));
    }
    Ok(RuleSet::new(rules))
}

pub fn save_rules(path: &Path, kg: &KnowledgeGraph, rules: &RuleSet) -> Result<()> {
    let mut out = Vec::new();
    for rule in rules.rules() {
        let rec = RuleRecord {
            head: kg.relation_label(rule.head).to_string(),
            body: rule
                .body
                .iter()
                .map(|s| StepRecord {
                    rel: kg.relation_label(s.rel).to_string(),
                    inv: s.inverse,
                })
                .collect(),
            conf: rule.confidence,
            support: Some(rule.support),
        };
        serde_json::to_writer(&mut out, &rec).expect("rule serializes");
        out.push(b'\n');
    }
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&out).map_err(|e| Error::io(path, e))
}
