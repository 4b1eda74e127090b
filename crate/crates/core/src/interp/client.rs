use std::collections::BTreeMap;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: String,
    pub content: String,
}

impl ChatMessage {
    pub fn user(content: impl Into<String>) -> Self {
        Self {
            role: "user".into(),
            content: content.into(),
        }
    }
}

/// A chat-completion backend. Implementations must be deterministic for
/// the pipeline's byte-identical reruns to hold.
pub trait ChatClient: Send + Sync {
    /// Endpoint plus model; generator and judge must differ here.
    fn identity(&self) -> String;
    fn model(&self) -> &str;
    fn complete(&self, messages: &[ChatMessage]) -> Result<String>;
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClientConfig {
    /// `https://host/v1` style base, or `mock:concept`, `mock:judge`,
    /// `mock:matcher`.
    pub base_url: String,
    pub model: String,
    /// Environment variable holding the bearer token.
    pub token_env: Option<String>,
    pub timeout_secs: u64,
    pub max_retries: usize,
}

impl Default for ClientConfig {
    fn default() -> Self {
        Self {
            base_url: String::new(),
            model: "mock".into(),
            token_env: None,
            timeout_secs: 120,
            max_retries: 2,
        }
    }
}

impl ClientConfig {
    pub fn mock(kind: &str) -> Self {
        Self {
            base_url: format!("mock:{kind}"),
            model: format!("mock-{kind}"),
            ..Self::default()
        }
    }
}

pub fn make_client(cfg: &ClientConfig) -> Result<Box<dyn ChatClient>> {
    if let Some(kind) = cfg.base_url.strip_prefix("mock:") {
        let mock = match kind {
            "concept" => MockKind::Concept,
            "judge" => MockKind::Judge,
            "matcher" => MockKind::Matcher,
            other => return Err(Error::Config(format!("unknown mock client {other:?}"))),
        };
        return Ok(Box::new(MockClient {
            kind: mock,
            model: cfg.model.clone(),
        }));
    }
    if !(cfg.base_url.starts_with("http://") || cfg.base_url.starts_with("https://")) {
        return Err(Error::Config(format!(
            "client base_url {:?} must be http(s):// or mock:",
            cfg.base_url
        )));
    }
    let token = match &cfg.token_env {
        Some(var) => Some(
            std::env::var(var).map_err(|_| Error::Config(format!("environment variable {var} is not set")))?,
        ),
        None => None,
    };
    let agent: ureq::Agent = ureq::Agent::config_builder()
        .timeout_global(Some(Duration::from_secs(cfg.timeout_secs.max(1))))
        .build()
        .into();
    Ok(Box::new(HttpClient {
        agent,
        url: format!("{}/chat/completions", cfg.base_url.trim_end_matches('/')),
        base_url: cfg.base_url.clone(),
        model: cfg.model.clone(),
        token,
        max_retries: cfg.max_retries,
    }))
}

/// OpenAI-style `/chat/completions` endpoint.
pub struct HttpClient {
    agent: ureq::Agent,
    url: String,
    base_url: String,
    model: String,
    token: Option<String>,
    max_retries: usize,
}

impl HttpClient {
    fn attempt(&self, body: &serde_json::Value) -> std::result::Result<String, String> {
        let mut req = self.agent.post(&self.url);
        if let Some(t) = &self.token {
            req = req.header("Authorization", format!("Bearer {t}"));
        }
        let mut resp = req.send_json(body).map_err(|e| e.to_string())?;
        let v: serde_json::Value = resp.body_mut().read_json().map_err(|e| e.to_string())?;
        v["choices"][0]["message"]["content"]
            .as_str()
            .map(str::to_owned)
            .ok_or_else(|| format!("response has no choices[0].message.content: {v}"))
    }
}

impl ChatClient for HttpClient {
    fn identity(&self) -> String {
        format!("{}#{}", self.base_url, self.model)
    }

    fn model(&self) -> &str {
        &self.model
    }

    fn complete(&self, messages: &[ChatMessage]) -> Result<String> {
        let body = json!({
            "model": self.model,
            "messages": messages,
            "temperature": 0.0,
        });
        let mut last = String::new();
        for attempt in 0..=self.max_retries {
            match self.attempt(&body) {
                Ok(text) => return Ok(text),
                Err(e) => {
                    log::warn!("chat request to {} failed (attempt {}): {e}", self.url, attempt + 1);
                    last = e;
                }
            }
        }
        Err(Error::Transport {
            attempts: self.max_retries + 1,
            detail: last,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum MockKind {
    Concept,
    Judge,
    Matcher,
}

/// Rule-based stand-ins that read the structured lines of the prompts.
pub struct MockClient {
    kind: MockKind,
    model: String,
}

impl ChatClient for MockClient {
    fn identity(&self) -> String {
        let kind = match self.kind {
            MockKind::Concept => "concept",
            MockKind::Judge => "judge",
            MockKind::Matcher => "matcher",
        };
        format!("mock:{kind}#{}", self.model)
    }

    fn model(&self) -> &str {
        &self.model
    }

    fn complete(&self, messages: &[ChatMessage]) -> Result<String> {
        let prompt = messages
            .iter()
            .rev()
            .find(|m| m.role == "user")
            .map(|m| m.content.as_str())
            .unwrap_or("");
        Ok(match self.kind {
            MockKind::Concept => mock_concept(prompt),
            MockKind::Judge => mock_judge(prompt),
            MockKind::Matcher => mock_matcher(prompt),
        })
    }
}

/// Most frequent value, ties to the lexicographically smallest.
fn dominant<'a>(values: impl Iterator<Item = &'a str>) -> Option<&'a str> {
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for v in values {
        *counts.entry(v).or_default() += 1;
    }
    let best = counts.values().copied().max()?;
    counts.into_iter().find(|(_, c)| *c == best).map(|(v, _)| v)
}

struct Exemplar<'a> {
    modality: &'a str,
    organs: Vec<&'a str>,
}

fn exemplars(prompt: &str) -> Vec<Exemplar<'_>> {
    prompt
        .lines()
        .filter_map(|l| l.strip_prefix("- image: "))
        .map(|l| {
            let mut ex = Exemplar {
                modality: "unknown",
                organs: Vec::new(),
            };
            for field in l.split(" | ") {
                if let Some(m) = field.strip_prefix("modality: ") {
                    ex.modality = m.trim();
                } else if let Some(o) = field.strip_prefix("organs: ") {
                    ex.organs = o
                        .split(',')
                        .map(str::trim)
                        .filter(|s| !s.is_empty() && *s != "unknown")
                        .collect();
                }
            }
            ex
        })
        .collect()
}

/// Dominant organ and modality over the exemplar lines.
fn dominant_concept(prompt: &str) -> (String, String) {
    let ex = exemplars(prompt);
    let organ = dominant(ex.iter().flat_map(|e| e.organs.iter().copied())).unwrap_or("unknown anatomy");
    let modality = dominant(ex.iter().map(|e| e.modality)).unwrap_or("unknown");
    (organ.to_owned(), modality.to_owned())
}

fn mock_concept(prompt: &str) -> String {
    let (organ, modality) = dominant_concept(prompt);
    format!("{modality} images showing {organ}.")
}

pub(crate) fn tokens(text: &str) -> Vec<String> {
    text.split(|c: char| !(c.is_alphanumeric() || c == '_'))
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

fn mock_judge(prompt: &str) -> String {
    let (organ, modality) = dominant_concept(prompt);
    let keys = [organ.to_lowercase(), modality.to_lowercase()];
    let mut scored: Vec<(usize, char)> = prompt
        .lines()
        .filter_map(|l| {
            let mut c = l.chars();
            let label = c.next()?;
            let rest = c.as_str().strip_prefix(". ")?;
            ('A'..='E').contains(&label).then(|| {
                let toks = tokens(rest);
                (keys.iter().filter(|k| toks.contains(k)).count(), label)
            })
        })
        .collect();
    scored.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
    scored
        .iter()
        .map(|s| s.1.to_string())
        .collect::<Vec<_>>()
        .join(",")
}

const STOPWORDS: &[&str] = &[
    "a", "an", "and", "the", "of", "in", "on", "with", "showing", "images", "image", "for", "to", "at", "or",
];

fn content_tokens(text: &str) -> Vec<String> {
    tokens(text)
        .into_iter()
        .filter(|t| !STOPWORDS.contains(&t.as_str()))
        .collect()
}

fn mock_matcher(prompt: &str) -> String {
    let query = prompt
        .lines()
        .find_map(|l| l.strip_prefix("Clinical query: "))
        .unwrap_or("");
    let q = content_tokens(query);
    let mut hits: Vec<(usize, usize)> = prompt
        .lines()
        .filter_map(|l| {
            let (num, desc) = l.split_once(". ")?;
            let num: usize = num.trim().parse().ok()?;
            let d = content_tokens(desc);
            let overlap = q.iter().filter(|t| d.contains(t)).count();
            (overlap > 0).then_some((overlap, num))
        })
        .collect();
    if hits.is_empty() {
        return "NONE".into();
    }
    hits.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
    hits.iter()
        .map(|h| h.1.to_string())
        .collect::<Vec<_>>()
        .join(", ")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ask(kind: &str, prompt: &str) -> String {
        make_client(&ClientConfig::mock(kind))
            .unwrap()
            .complete(&[ChatMessage::user(prompt)])
            .unwrap()
    }

    #[test]
    fn concept_mock_names_dominant_organ() {
        let p = "x\n- image: a | modality: CT | organs: liver, spleen | age group: 40-59 | sex: F\n\
                 - image: b | modality: CT | organs: liver | age group: 40-59 | sex: M\n";
        assert_eq!(ask("concept", p), "CT images showing liver.");
    }

    #[test]
    fn judge_mock_prefers_matching_candidate() {
        let p = "- image: a | modality: MR | organs: kidney | age group: x | sex: F\n\
                 A. CT images showing liver.\nB. MR images showing kidney.\nC. MR images showing liver.\n\
                 D. CT images showing kidney.\nE. CT images showing lung.\n";
        assert_eq!(ask("judge", p), "B,C,D,A,E");
    }

    #[test]
    fn matcher_mock_keyword_overlap() {
        let p = "Clinical query: abdomen CT\n\nConcept catalog:\n1. MR images of the brain.\n2. Axial CT of the abdomen.\n";
        assert_eq!(ask("matcher", p), "2");
        let none = "Clinical query: femur\n\nConcept catalog:\n1. MR images of the brain.\n";
        assert_eq!(ask("matcher", none), "NONE");
    }

    #[test]
    fn identities_and_config_errors() {
        let g = make_client(&ClientConfig::mock("concept")).unwrap();
        let j = make_client(&ClientConfig::mock("judge")).unwrap();
        assert_ne!(g.identity(), j.identity());
        assert!(make_client(&ClientConfig::mock("oracle")).is_err());
        let bad = ClientConfig {
            base_url: "ftp://x".into(),
            ..ClientConfig::default()
        };
        assert!(make_client(&bad).is_err());
    }

    #[test]
    fn unreachable_endpoint_surfaces_transport_error() {
        let cfg = ClientConfig {
            base_url: "http://127.0.0.1:9".into(),
            timeout_secs: 2,
            max_retries: 1,
            ..ClientConfig::default()
        };
        let c = make_client(&cfg).unwrap();
        match c.complete(&[ChatMessage::user("hi")]) {
            Err(Error::Transport { attempts, .. }) => assert_eq!(attempts, 2),
            other => panic!("expected transport error, got {other:?}"),
        }
    }
}
