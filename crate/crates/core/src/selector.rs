//! Picking one candidate per query and turning that pick into a final rank.

use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::embedding::{CandidateSet, GlobalEmbeddings};
use crate::error::{Error, Result};
use crate::gcn::AdapterModel;
use crate::kg::{CompletionQuery, EntityId, KnowledgeGraph};
use crate::prompt::{bare_question, build_prompt, generate_question, parse_answer, Lexicon, Prompt, Role};
use crate::retrieval::{retrieve_subgraph, RetrievalConfig};
use crate::rules::RuleSet;

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionSource {
    Surrogate,
    External,
    Fallback,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    pub chosen: EntityId,
    pub source: SelectionSource,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub raw_text: Option<String>,
}

impl Selection {
    fn new(chosen: EntityId, source: SelectionSource) -> Self {
        Selection {
            chosen,
            source,
            raw_text: None,
        }
    }
}

/// Anything that can choose among a query's candidates.
pub trait Selector: Sync {
    fn select(&self, kg: &KnowledgeGraph, query: &CompletionQuery, cands: &CandidateSet) -> Selection;
}

/// Index of the best score; ties go to the earlier (better ranked) position.
pub fn argmax_first(scores: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, s) in scores.iter().enumerate() {
        if best.map_or(true, |b| *s > scores[b]) {
            best = Some(i);
        }
    }
    best
}

/// Retrieve, enhance, score and take the argmax.
#[allow(clippy::too_many_arguments)]
pub fn select_surrogate(
    model: &AdapterModel,
    kg: &KnowledgeGraph,
    emb: &GlobalEmbeddings,
    rules: &RuleSet,
    query: &CompletionQuery,
    cands: &CandidateSet,
    retrieval: &RetrievalConfig,
    use_local: bool,
) -> Selection {
    assert!(!cands.is_empty(), "empty candidate set");
    let g = retrieve_subgraph(kg, query, cands, rules, retrieval);
    let mut wanted = cands.entities.clone();
    wanted.push(query.known);
    let enh = model.gcn_forward(&g, emb, &wanted, use_local);
    let scores = model.score_candidates(query, cands, &enh);
    let best = argmax_first(&scores).unwrap_or(0);
    Selection::new(cands.entities[best], SelectionSource::Surrogate)
}

/// The trained adapter as a [`Selector`].
pub struct SurrogateSelector<'a> {
    pub model: &'a AdapterModel,
    pub emb: &'a GlobalEmbeddings,
    pub rules: &'a RuleSet,
    pub retrieval: RetrievalConfig,
    pub use_local: bool,
    /// When off, the ranker's first candidate is returned unchanged.
    pub use_embeddings: bool,
}

impl Selector for SurrogateSelector<'_> {
    fn select(&self, kg: &KnowledgeGraph, query: &CompletionQuery, cands: &CandidateSet) -> Selection {
        if !self.use_embeddings {
            return Selection::new(cands.entities[0], SelectionSource::Surrogate);
        }
        select_surrogate(
            self.model,
            kg,
            self.emb,
            self.rules,
            query,
            cands,
            &self.retrieval,
            self.use_local,
        )
    }
}

/// Always the ranker's first candidate.
pub struct RankerTop;

impl Selector for RankerTop {
    fn select(&self, _: &KnowledgeGraph, _: &CompletionQuery, cands: &CandidateSet) -> Selection {
        Selection::new(cands.entities[0], SelectionSource::Fallback)
    }
}

/// Picks the gold answer whenever it is a candidate.
pub struct OracleSelector;

impl Selector for OracleSelector {
    fn select(&self, _: &KnowledgeGraph, query: &CompletionQuery, cands: &CandidateSet) -> Selection {
        let chosen = query.gold.filter(|g| cands.contains(*g)).unwrap_or(cands.entities[0]);
        Selection::new(chosen, SelectionSource::Surrogate)
    }
}

/// Picks the best-ranked candidate that is not the gold answer (the gold
/// answer only when it is the sole candidate).
pub struct AdversarialSelector;

impl Selector for AdversarialSelector {
    fn select(&self, _: &KnowledgeGraph, query: &CompletionQuery, cands: &CandidateSet) -> Selection {
        let chosen = cands
            .entities
            .iter()
            .copied()
            .find(|e| Some(*e) != query.gold)
            .unwrap_or(cands.entities[0]);
        Selection::new(chosen, SelectionSource::Surrogate)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Endpoint {
    pub url: String,
    pub model: String,
    pub timeout_secs: f64,
    pub max_retries: u32,
    /// Environment variable holding the bearer token, if any.
    pub token_env: String,
}

impl Default for Endpoint {
    fn default() -> Self {
        Endpoint {
            url: "http://127.0.0.1:8000/v1/chat/completions".into(),
            model: "default".into(),
            timeout_secs: 30.0,
            max_retries: 2,
            token_env: "DRKGC_API_TOKEN".into(),
        }
    }
}

#[derive(Serialize)]
struct ChatRequest<'a> {
    model: &'a str,
    messages: [ChatMessage<'a>; 1],
    temperature: f64,
}

#[derive(Serialize)]
struct ChatMessage<'a> {
    role: &'a str,
    content: &'a str,
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<ChatChoice>,
}

#[derive(Deserialize)]
struct ChatChoice {
    message: ChatReply,
}

#[derive(Deserialize)]
struct ChatReply {
    content: String,
}

/// Client for a chat-completions style HTTP endpoint.
pub struct ExternalClient {
    client: reqwest::blocking::Client,
    endpoint: Endpoint,
    token: Option<String>,
}

impl ExternalClient {
    pub fn new(endpoint: Endpoint) -> Result<Self> {
        if !(endpoint.timeout_secs.is_finite() && endpoint.timeout_secs > 0.0) {
            return Err(Error::Config("selector.timeout_secs must be positive".into()));
        }
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs_f64(endpoint.timeout_secs))
            .build()
            .map_err(|e| Error::Config(format!("cannot build HTTP client: {e}")))?;
        let token = std::env::var(&endpoint.token_env).ok().filter(|t| !t.is_empty());
        Ok(ExternalClient { client, endpoint, token })
    }

    /// The reply text of the first choice, retrying transport and HTTP
    /// failures up to `max_retries` times.
    pub fn complete(&self, prompt: &str) -> std::result::Result<String, String> {
        let body = ChatRequest {
            model: &self.endpoint.model,
            messages: [ChatMessage {
                role: "user",
                content: prompt,
            }],
            temperature: 0.0,
        };
        let mut last = String::new();
        for attempt in 0..=self.endpoint.max_retries {
            let mut req = self.client.post(&self.endpoint.url).json(&body);
            if let Some(token) = &self.token {
                req = req.bearer_auth(token);
            }
            match req.send().and_then(|r| r.error_for_status()).and_then(|r| r.json::<ChatResponse>()) {
                Ok(resp) => {
                    return resp
                        .choices
                        .into_iter()
                        .next()
                        .map(|c| c.message.content)
                        .ok_or_else(|| "response has no choices".to_string())
                }
                Err(e) => {
                    log::debug!("attempt {} to {} failed: {e}", attempt + 1, self.endpoint.url);
                    last = e.to_string();
                }
            }
        }
        Err(last)
    }
}

/// Sends the rendered prompt and maps the reply back to a candidate,
/// falling back to `ranker_top` on any failure.
pub fn select_external(
    client: &ExternalClient,
    prompt: &Prompt,
    cands: &CandidateSet,
    kg: &KnowledgeGraph,
    ranker_top: EntityId,
) -> Selection {
    match client.complete(&prompt.render()) {
        Ok(text) => match parse_answer(&text, cands, kg) {
            Some(chosen) => Selection {
                chosen,
                source: SelectionSource::External,
                raw_text: Some(text),
            },
            None => {
                log::warn!("reply {text:?} names no candidate; using the ranker's top answer");
                Selection {
                    chosen: ranker_top,
                    source: SelectionSource::Fallback,
                    raw_text: Some(text),
                }
            }
        },
        Err(e) => {
            log::warn!("external selector unavailable ({e}); using the ranker's top answer");
            Selection::new(ranker_top, SelectionSource::Fallback)
        }
    }
}

/// Prompt construction plus [`select_external`] as a [`Selector`].
pub struct ExternalSelector {
    pub client: ExternalClient,
    pub lexicon: Lexicon,
    pub role: Role,
    pub use_templates: bool,
}

impl ExternalSelector {
    pub fn prompt_for(&self, kg: &KnowledgeGraph, query: &CompletionQuery, cands: &CandidateSet) -> Prompt {
        let question = if self.use_templates {
            generate_question(&self.lexicon, query, kg).unwrap_or_else(|_| bare_question(query, kg))
        } else {
            bare_question(query, kg)
        };
        build_prompt(&question, cands, query, self.role, kg)
    }
}

impl Selector for ExternalSelector {
    fn select(&self, kg: &KnowledgeGraph, query: &CompletionQuery, cands: &CandidateSet) -> Selection {
        let prompt = self.prompt_for(kg, query, cands);
        select_external(&self.client, &prompt, cands, kg, cands.entities[0])
    }
}

/// What a wrong pick does to the gold answer's rank.
#[derive(Copy, Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RerankPolicy {
    /// The promoted entity moves to the top, pushing gold down one place
    /// if it was ranked below gold.
    #[default]
    Displace,
    /// Gold keeps its base rank.
    Keep,
}

/// Final rank of gold. `chosen_rank` is the chosen entity's filtered base
/// rank, `None` when it is itself a filtered (known true) answer.
pub fn rerank(
    gold_rank: usize,
    gold: EntityId,
    chosen: EntityId,
    chosen_rank: Option<usize>,
    policy: RerankPolicy,
) -> usize {
    assert!(gold_rank >= 1, "ranks start at 1");
    if chosen == gold {
        return 1;
    }
    match (policy, chosen_rank) {
        (RerankPolicy::Displace, Some(c)) if c > gold_rank => gold_rank + 1,
        _ => gold_rank,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kg::RelationId;
    use proptest::prelude::*;
    use std::io::{Read, Write};
    use std::net::TcpListener;

    fn e(i: u32) -> EntityId {
        EntityId(i)
    }

    #[test]
    fn argmax_and_ties() {
        assert_eq!(argmax_first(&[0.2, 0.9]), Some(1));
        assert_eq!(argmax_first(&[0.5, 0.5, 0.5]), Some(0));
        assert_eq!(argmax_first(&[]), None);
    }

    #[test]
    fn rerank_examples() {
        assert_eq!(rerank(17, e(1), e(1), Some(17), RerankPolicy::Displace), 1);
        assert_eq!(rerank(3, e(1), e(2), Some(9), RerankPolicy::Displace), 4);
        // Promoting an entity already ranked above gold leaves gold alone.
        assert_eq!(rerank(5, e(1), e(2), Some(2), RerankPolicy::Displace), 5);
        assert_eq!(rerank(2, e(1), e(2), Some(5), RerankPolicy::Displace), 3);
        assert_eq!(rerank(2, e(1), e(2), Some(5), RerankPolicy::Keep), 2);
        assert_eq!(rerank(4, e(1), e(2), None, RerankPolicy::Displace), 4);
    }

    proptest! {
        #[test]
        fn wrong_picks_never_help(gold in 1usize..500, chosen in proptest::option::of(1usize..500), keep in any::<bool>()) {
            let policy = if keep { RerankPolicy::Keep } else { RerankPolicy::Displace };
            prop_assume!(chosen != Some(gold));
            prop_assert!(rerank(gold, e(0), e(1), chosen, policy) >= gold);
            prop_assert_eq!(rerank(gold, e(0), e(0), chosen, policy), 1);
        }
    }

    fn labelled_cands() -> (KnowledgeGraph, CandidateSet) {
        let mut b = crate::kg::KgBuilder::new();
        b.push(crate::kg::Split::Train, "Enzalutamide", "treats", "cancer")
            .push(crate::kg::Split::Train, "Aspirin", "treats", "pain");
        let kg = b.build();
        let cands = CandidateSet {
            query: CompletionQuery::head(RelationId(0), e(1), None),
            entities: vec![e(2), e(0)],
            scores: vec![1.0, 0.5],
        };
        (kg, cands)
    }

    /// Serves `replies` to successive connections and records each request.
    fn mock_server(replies: Vec<(u16, String)>) -> (String, std::thread::JoinHandle<Vec<String>>) {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let url = format!("http://{}/v1/chat/completions", listener.local_addr().unwrap());
        let handle = std::thread::spawn(move || {
            let mut seen = Vec::new();
            for (status, body) in replies {
                let (mut stream, _) = listener.accept().unwrap();
                let mut buf = Vec::new();
                let mut chunk = [0u8; 4096];
                loop {
                    let n = stream.read(&mut chunk).unwrap();
                    buf.extend_from_slice(&chunk[..n]);
                    let text = String::from_utf8_lossy(&buf);
                    if let Some(end) = text.find("\r\n\r\n") {
                        let len = text[..end]
                            .lines()
                            .find_map(|l| l.to_ascii_lowercase().strip_prefix("content-length:").map(|v| v.trim().parse::<usize>().unwrap()))
                            .unwrap_or(0);
                        if buf.len() >= end + 4 + len {
                            break;
                        }
                    }
                    if n == 0 {
                        break;
                    }
                }
                seen.push(String::from_utf8_lossy(&buf).into_owned());
                let resp = format!(
                    "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
                    body.len()
                );
                stream.write_all(resp.as_bytes()).unwrap();
            }
            seen
        });
        (url, handle)
    }

    fn reply(text: &str) -> String {
        serde_json::json!({"choices": [{"message": {"role": "assistant", "content": text}}]}).to_string()
    }

    fn client(url: String, retries: u32) -> ExternalClient {
        ExternalClient::new(Endpoint {
            url,
            model: "test-model".into(),
            timeout_secs: 5.0,
            max_retries: retries,
            token_env: "DRKGC_TEST_TOKEN_UNSET".into(),
        })
        .unwrap()
    }

    fn prompt(kg: &KnowledgeGraph, cands: &CandidateSet) -> Prompt {
        build_prompt("What treats cancer?", cands, &cands.query, Role::Biomedical, kg)
    }

    #[test]
    fn external_reply_is_parsed() {
        let (kg, cands) = labelled_cands();
        let (url, server) = mock_server(vec![(200, reply("Enzalutamide"))]);
        let sel = select_external(&client(url, 0), &prompt(&kg, &cands), &cands, &kg, e(2));
        assert_eq!(sel.chosen, e(0));
        assert_eq!(sel.source, SelectionSource::External);
        let requests = server.join().unwrap();
        assert!(requests[0].contains("\"temperature\":0"));
        assert!(requests[0].contains("test-model"));
        assert!(requests[0].contains("[Placeholder]"));
    }

    #[test]
    fn retries_after_a_server_error() {
        let (kg, cands) = labelled_cands();
        let (url, server) = mock_server(vec![(500, "{}".into()), (200, reply("'enzalutamide'"))]);
        let sel = select_external(&client(url, 1), &prompt(&kg, &cands), &cands, &kg, e(2));
        assert_eq!(sel.chosen, e(0));
        assert_eq!(server.join().unwrap().len(), 2);
    }

    #[test]
    fn non_candidate_reply_falls_back() {
        let (kg, cands) = labelled_cands();
        let (url, server) = mock_server(vec![(200, reply("Ibuprofen"))]);
        let sel = select_external(&client(url, 0), &prompt(&kg, &cands), &cands, &kg, e(2));
        assert_eq!(sel.chosen, e(2));
        assert_eq!(sel.source, SelectionSource::Fallback);
        assert_eq!(sel.raw_text.as_deref(), Some("Ibuprofen"));
        server.join().unwrap();
    }

    #[test]
    fn unreachable_endpoint_falls_back() {
        let (kg, cands) = labelled_cands();
        let port = TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
        let url = format!("http://127.0.0.1:{port}/v1/chat/completions");
        let sel = select_external(&client(url, 1), &prompt(&kg, &cands), &cands, &kg, e(2));
        assert_eq!(sel, Selection::new(e(2), SelectionSource::Fallback));
    }

    #[test]
    fn oracle_and_adversary() {
        let (kg, mut cands) = labelled_cands();
        cands.query.gold = Some(e(0));
        assert_eq!(OracleSelector.select(&kg, &cands.query, &cands).chosen, e(0));
        assert_eq!(AdversarialSelector.select(&kg, &cands.query, &cands).chosen, e(2));
        cands.query.gold = Some(e(2));
        assert_eq!(AdversarialSelector.select(&kg, &cands.query, &cands).chosen, e(0));
    }
}
