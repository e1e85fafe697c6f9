//! Question templates, prompt rendering and mapping free-text answers back
//! to candidate entities.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::embedding::CandidateSet;
use crate::error::{Error, Result};
use crate::kg::{CompletionQuery, Direction, EntityId, KnowledgeGraph, RelationId};

pub const PLACEHOLDER: &str = "[Placeholder]";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Templates {
    /// Asks for the head given the tail.
    pub head: String,
    /// Asks for the tail given the head.
    pub tail: String,
}

/// Question templates for every relation of a graph.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Lexicon {
    templates: Vec<Templates>,
}

impl Lexicon {
    /// Validates `entries` (keyed by relation label) against `kg`.
    pub fn new(kg: &KnowledgeGraph, entries: BTreeMap<String, Templates>) -> Result<Self> {
        let mut problems = Vec::new();
        let mut slots: Vec<Option<Templates>> = vec![None; kg.num_relations()];
        for (label, t) in entries {
            let Some(r) = find_relation(kg, &label) else {
                problems.push(format!("unknown relation {label:?}"));
                continue;
            };
            for (side, template) in [("head", &t.head), ("tail", &t.tail)] {
                let n = template.matches("{}").count();
                if n != 1 {
                    problems.push(format!(
                        "{side} template for {label:?} has {n} placeholders, expected exactly one"
                    ));
                }
            }
            slots[r.index()] = Some(t);
        }
        let missing: Vec<&str> = kg
            .relation_ids()
            .filter(|r| slots[r.index()].is_none())
            .map(|r| kg.relation_label(r))
            .collect();
        if !missing.is_empty() {
            problems.push(format!("no templates for relations: {}", missing.join(", ")));
        }
        if !problems.is_empty() {
            return Err(Error::Validation(problems.join("; ")));
        }
        Ok(Lexicon {
            templates: slots.into_iter().flatten().collect(),
        })
    }

    /// Plain templates built from relation labels, for graphs that ship
    /// without a lexicon.
    pub fn generic(kg: &KnowledgeGraph) -> Self {
        let templates = kg
            .relation_ids()
            .map(|r| {
                let rel = readable(kg.relation_label(r));
                Templates {
                    head: format!("What has the relation {rel} to {{}}?"),
                    tail: format!("What does {{}} have the relation {rel} to?"),
                }
            })
            .collect();
        Lexicon { templates }
    }

    pub fn len(&self) -> usize {
        self.templates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.templates.is_empty()
    }

    pub fn template(&self, rel: RelationId, direction: Direction) -> Option<&str> {
        self.templates.get(rel.index()).map(|t| match direction {
            Direction::Head => t.head.as_str(),
            Direction::Tail => t.tail.as_str(),
        })
    }
}

/// Lexicon keys may use the human form ("has part") of a relation stored as
/// `_has_part`.
fn find_relation(kg: &KnowledgeGraph, label: &str) -> Option<RelationId> {
    kg.relation_by_label(label).or_else(|| {
        let wanted = readable(label);
        kg.relation_ids().find(|&r| {
            readable(kg.relation_label(r)) == wanted || readable(&kg.relations().symbols()[r.index()].key) == wanted
        })
    })
}

fn readable(label: &str) -> String {
    label.trim_start_matches('_').replace('_', " ")
}

/// Reads a JSON object `{relation: {"head": ..., "tail": ...}}`.
pub fn load_lexicon(path: &Path, kg: &KnowledgeGraph) -> Result<Lexicon> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let entries: BTreeMap<String, Templates> = serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        line: e.line(),
        message: e.to_string(),
    })?;
    Lexicon::new(kg, entries)
}

/// Substitutes the known entity's label into the query's template.
pub fn generate_question(lex: &Lexicon, query: &CompletionQuery, kg: &KnowledgeGraph) -> Result<String> {
    let template = lex.template(query.rel, query.direction).ok_or_else(|| {
        Error::Validation(format!("no template for relation {}", query.rel))
    })?;
    Ok(template.replacen("{}", kg.entity_label(query.known), 1))
}

/// Instruction used instead of a templated question when templates are
/// switched off.
pub fn bare_question(query: &CompletionQuery, kg: &KnowledgeGraph) -> String {
    let known = kg.entity_label(query.known);
    let rel = kg.relation_label(query.rel);
    match query.direction {
        Direction::Head => format!("Complete the triple (?, {rel}, {known})."),
        Direction::Tail => format!("Complete the triple ({known}, {rel}, ?)."),
    }
}

#[derive(Copy, Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    #[default]
    General,
    Biomedical,
}

impl Role {
    pub fn title(self) -> &'static str {
        match self {
            Role::General => "linguist",
            Role::Biomedical => "biomedical scientist",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prompt {
    pub role_line: String,
    pub instruction: String,
    pub candidate_labels: Vec<String>,
    /// Embedding injection points: the query entity, then each candidate.
    pub slots: Vec<(String, EntityId)>,
    pub question: String,
}

impl Prompt {
    /// The text sent to a model, with every slot shown as a placeholder.
    pub fn render(&self) -> String {
        let answers = self
            .candidate_labels
            .iter()
            .map(|l| format!("'{l}'"))
            .collect::<Vec<_>>()
            .join(", ");
        let slots = self
            .slots
            .iter()
            .map(|(name, _)| format!("'{name}': {PLACEHOLDER}"))
            .collect::<Vec<_>>()
            .join(", ");
        format!(
            "{} {} The answer must be in ({answers}).\nYou can refer to the entity embeddings: {slots}.\nQuestion: {}\nAnswer:",
            self.role_line, self.instruction, self.question
        )
    }
}

pub fn build_prompt(
    question: &str,
    cands: &CandidateSet,
    query: &CompletionQuery,
    role: Role,
    kg: &KnowledgeGraph,
) -> Prompt {
    let candidate_labels: Vec<String> = cands.entities.iter().map(|&e| kg.entity_label(e).to_string()).collect();
    let mut slots = vec![("query entity".to_string(), query.known)];
    slots.extend(candidate_labels.iter().cloned().zip(cands.entities.iter().copied()));
    Prompt {
        role_line: format!("You are an excellent {}.", role.title()),
        instruction: "The task is to predict the answer based on the given question, and you only need to answer one entity."
            .to_string(),
        candidate_labels,
        slots,
        question: question.to_string(),
    }
}

/// Maps a free-text reply to a candidate: exact match on normalised labels
/// first, then a unique substring match either way round.
pub fn parse_answer(text: &str, cands: &CandidateSet, kg: &KnowledgeGraph) -> Option<EntityId> {
    let reply = normalize(text);
    if reply.is_empty() {
        return None;
    }
    let labels: Vec<(EntityId, String)> = cands
        .entities
        .iter()
        .map(|&e| (e, normalize(kg.entity_label(e))))
        .filter(|(_, l)| !l.is_empty())
        .collect();
    let exact: Vec<EntityId> = labels.iter().filter(|(_, l)| *l == reply).map(|(e, _)| *e).collect();
    if !exact.is_empty() {
        return (exact.len() == 1).then(|| exact[0]);
    }
    let partial: Vec<EntityId> = labels
        .iter()
        .filter(|(_, l)| reply.contains(l.as_str()) || l.contains(reply.as_str()))
        .map(|(e, _)| *e)
        .collect();
    (partial.len() == 1).then(|| partial[0])
}

fn normalize(text: &str) -> String {
    let trimmed = text.trim().trim_matches(|c: char| c.is_ascii_punctuation() || c.is_whitespace() || "‘’“”".contains(c));
    trimmed
        .split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
        .to_lowercase()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures::toy_t1;
    use crate::kg::KgBuilder;
    use crate::kg::Split;
    use proptest::prelude::*;

    fn t1_lexicon(kg: &KnowledgeGraph) -> Lexicon {
        let entries = ["r1", "r2", "r3"]
            .iter()
            .map(|r| {
                (
                    r.to_string(),
                    Templates {
                        head: format!("Who relates via {r} to {{}}?"),
                        tail: format!("What does {{}} reach via {r}?"),
                    },
                )
            })
            .collect();
        Lexicon::new(kg, entries).unwrap()
    }

    fn cands_of(kg: &KnowledgeGraph, labels: &[&str]) -> CandidateSet {
        let entities: Vec<EntityId> = labels.iter().map(|l| kg.entity_by_label(l).unwrap()).collect();
        CandidateSet {
            query: CompletionQuery::tail(entities[0], RelationId(0), None),
            scores: vec![0.0; entities.len()],
            entities,
        }
    }

    fn labelled(labels: &[&str]) -> KnowledgeGraph {
        let mut b = KgBuilder::new();
        for l in labels {
            b.push(Split::Train, l, "r", labels[0]);
        }
        b.build()
    }

    #[test]
    fn t1_question() {
        let kg = toy_t1();
        let q = CompletionQuery::head(RelationId(2), kg.entity_by_label("C").unwrap(), None);
        assert_eq!(generate_question(&t1_lexicon(&kg), &q, &kg).unwrap(), "Who relates via r3 to C?");
    }

    #[test]
    fn shipped_lexicon_loads_with_underscored_relations() {
        let mut b = KgBuilder::new();
        for rel in [
            "_also_see",
            "_derivationally_related_form",
            "_has_part",
            "_hypernym",
            "_instance_hypernym",
            "_member_meronym",
            "_member_of_domain_region",
            "_member_of_domain_usage",
            "_similar_to",
            "_synset_domain_topic_of",
            "_verb_group",
        ] {
            b.push(Split::Train, "dog", rel, "animal");
        }
        let kg = b.build();
        let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/lexicons/wn18rr.json");
        let lex = load_lexicon(&path, &kg).unwrap();
        let hypernym = kg.relation_by_label("_hypernym").unwrap();
        let dog = kg.entity_by_label("dog").unwrap();
        let q = CompletionQuery::head(hypernym, dog, None);
        assert_eq!(
            generate_question(&lex, &q, &kg).unwrap(),
            "What is a example or specific instance of dog?"
        );
        let has_part = kg.relation_by_label("_has_part").unwrap();
        assert_eq!(lex.template(has_part, Direction::Tail), Some("What part does {} have?"));
    }

    #[test]
    fn bare_placeholder_template() {
        let kg = labelled(&["x"]);
        let entries = BTreeMap::from([(
            "r".to_string(),
            Templates {
                head: "{}".into(),
                tail: "{}".into(),
            },
        )]);
        let lex = Lexicon::new(&kg, entries).unwrap();
        let q = CompletionQuery::tail(EntityId(0), RelationId(0), None);
        assert_eq!(generate_question(&lex, &q, &kg).unwrap(), "x");
    }

    #[test]
    fn empty_lexicon_for_empty_relation_set() {
        let kg = KnowledgeGraph::from_ids(0, 0, vec![], vec![], vec![]);
        assert!(Lexicon::new(&kg, BTreeMap::new()).unwrap().is_empty());
    }

    #[test]
    fn validation_lists_every_problem() {
        let kg = toy_t1();
        let entries = BTreeMap::from([
            (
                "r1".to_string(),
                Templates {
                    head: "no slot".into(),
                    tail: "{}".into(),
                },
            ),
            (
                "r9".to_string(),
                Templates {
                    head: "{}".into(),
                    tail: "{}".into(),
                },
            ),
        ]);
        let Err(Error::Validation(msg)) = Lexicon::new(&kg, entries) else {
            panic!("expected a validation error");
        };
        assert!(msg.contains("r9"));
        assert!(msg.contains("0 placeholders"));
        assert!(msg.contains("r2, r3"));
    }

    #[test]
    fn prompt_layout() {
        let kg = toy_t1();
        let cands = cands_of(&kg, &["A", "D"]);
        let q = CompletionQuery::head(RelationId(2), kg.entity_by_label("C").unwrap(), None);
        let p = build_prompt("Who relates via r3 to C?", &cands, &q, Role::General, &kg);
        assert_eq!(
            p.render(),
            "You are an excellent linguist. The task is to predict the answer based on the given question, \
             and you only need to answer one entity. The answer must be in ('A', 'D').\n\
             You can refer to the entity embeddings: 'query entity': [Placeholder], 'A': [Placeholder], 'D': [Placeholder].\n\
             Question: Who relates via r3 to C?\nAnswer:"
        );
        assert_eq!(p.slots[0].1, q.known);
        let bio = build_prompt("q", &cands, &q, Role::Biomedical, &kg);
        assert!(bio.render().starts_with("You are an excellent biomedical scientist."));
    }

    #[test]
    fn twenty_candidates_give_twenty_one_placeholders() {
        let labels: Vec<String> = (0..21).map(|i| format!("ent{i}")).collect();
        let refs: Vec<&str> = labels.iter().map(String::as_str).collect();
        let kg = labelled(&refs);
        let cands = cands_of(&kg, &refs[1..]);
        let q = CompletionQuery::tail(EntityId(0), RelationId(0), None);
        let p = build_prompt("q?", &cands, &q, Role::General, &kg);
        assert_eq!(p.render().matches(PLACEHOLDER).count(), 21);
        let one = cands_of(&kg, &refs[1..2]);
        assert_eq!(build_prompt("q?", &one, &q, Role::General, &kg).slots.len(), 2);
    }

    #[test]
    fn answers_are_normalised() {
        let kg = labelled(&["Enzalutamide", "car", "carbon"]);
        let cands = cands_of(&kg, &["Enzalutamide", "car", "carbon"]);
        assert_eq!(parse_answer("  'Enzalutamide' ", &cands, &kg), kg.entity_by_label("Enzalutamide"));
        assert_eq!(parse_answer("", &cands, &kg), None);
        assert_eq!(parse_answer("car", &cands, &kg), kg.entity_by_label("car"));
        assert_eq!(parse_answer("The answer is enzalutamide.", &cands, &kg), kg.entity_by_label("Enzalutamide"));
        assert_eq!(parse_answer("ca", &cands, &kg), None);
        assert_eq!(parse_answer("truck", &cands, &kg), None);
    }

    proptest! {
        #[test]
        fn every_label_round_trips(raw in prop::collection::btree_set("[A-Za-z][A-Za-z0-9 ]{0,12}", 1..12)) {
            let normalized: std::collections::BTreeSet<String> = raw.iter().map(|l| normalize(l)).collect();
            prop_assume!(normalized.len() == raw.len());
            let labels: Vec<&str> = raw.iter().map(String::as_str).collect();
            let kg = labelled(&labels);
            let cands = cands_of(&kg, &labels);
            for l in &labels {
                prop_assert_eq!(parse_answer(l, &cands, &kg), kg.entity_by_label(l));
            }
        }

        #[test]
        fn questions_hold_the_label_once(label in "[0-9]{2,8}") {
            let kg = labelled(&[label.as_str()]);
            let lex = Lexicon::generic(&kg);
            let q = CompletionQuery::head(RelationId(0), EntityId(0), None);
            let text = generate_question(&lex, &q, &kg).unwrap();
            prop_assert!(!text.contains("{}"), "residual placeholder in {}", text);
            prop_assert_eq!(text.matches(label.as_str()).count(), 1);
        }
    }
}
