//! LLM adapter contract with a deterministic mock and an HTTP client.
//!
//! The mock renders per-purpose templates. Placeholders are resolved against
//! the prompt, so tests can assert on what the engine actually sent:
//!
//! - `{block_count}`: number of `[source: ...]` segments in the prompt
//! - `{last_query}`: the last `SendQuery:` transcript line, else the `Question:` line
//! - `{prompt}`: the prompt verbatim

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::time::Duration;

use parking_lot::Mutex;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LlmPurpose {
    IntentionSummary,
    Answer,
    ReportSection,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LlmRequest {
    pub purpose: LlmPurpose,
    pub prompt: String,
    pub max_chars: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LlmResponse {
    pub text: String,
}

pub trait LlmAdapter: Send + Sync {
    fn name(&self) -> &str;

    fn complete(&self, request: &LlmRequest) -> Result<LlmResponse>;
}

/// Prefix of every provenance-tagged block segment in a prompt.
pub const SEGMENT_PREFIX: &str = "[source: ";
pub const TRANSCRIPT_QUERY_PREFIX: &str = "SendQuery: ";
pub const QUESTION_PREFIX: &str = "Question: ";

pub fn truncate_chars(text: &str, max_chars: usize) -> String {
    match text.char_indices().nth(max_chars) {
        Some((at, _)) => text[..at].to_owned(),
        None => text.to_owned(),
    }
}

pub fn count_segments(prompt: &str) -> usize {
    prompt.lines().filter(|l| l.starts_with(SEGMENT_PREFIX)).count()
}

fn last_query(prompt: &str) -> &str {
    let from_transcript = prompt.lines().rev().find_map(|l| l.strip_prefix(TRANSCRIPT_QUERY_PREFIX));
    from_transcript
        .or_else(|| prompt.lines().rev().find_map(|l| l.strip_prefix(QUESTION_PREFIX)))
        .unwrap_or("")
        .trim()
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct MockRules {
    #[serde(default)]
    pub rules: BTreeMap<LlmPurpose, String>,
    /// Purposes for which the mock reports an error instead of answering.
    #[serde(default)]
    pub fail: Vec<LlmPurpose>,
}

#[derive(Debug, Default)]
pub struct MockLlm {
    rules: MockRules,
    calls: AtomicUsize,
    log: Mutex<Vec<LlmRequest>>,
}

impl MockLlm {
    pub fn new(rules: MockRules) -> Self {
        Self { rules, ..Default::default() }
    }

    /// Echo templates used when no fixture is configured.
    pub fn echo() -> Self {
        let mut rules = BTreeMap::new();
        rules.insert(LlmPurpose::IntentionSummary, "USER SEEKS: {last_query}".to_owned());
        rules.insert(LlmPurpose::Answer, "Answer grounded in {block_count} blocks for: {last_query}".to_owned());
        rules.insert(LlmPurpose::ReportSection, "Draft synthesised from {block_count} blocks.".to_owned());
        Self::new(MockRules { rules, fail: Vec::new() })
    }

    /// Same reply for every purpose.
    pub fn fixed(text: impl Into<String>) -> Self {
        let text = text.into();
        let rules = [LlmPurpose::IntentionSummary, LlmPurpose::Answer, LlmPurpose::ReportSection]
            .into_iter()
            .map(|p| (p, text.clone()))
            .collect();
        Self::new(MockRules { rules, fail: Vec::new() })
    }

    pub fn failing() -> Self {
        Self::new(MockRules {
            rules: BTreeMap::new(),
            fail: vec![LlmPurpose::IntentionSummary, LlmPurpose::Answer, LlmPurpose::ReportSection],
        })
    }

    pub fn with_rule(mut self, purpose: LlmPurpose, template: impl Into<String>) -> Self {
        self.rules.rules.insert(purpose, template.into());
        self.rules.fail.retain(|p| *p != purpose);
        self
    }

    pub fn failing_for(mut self, purpose: LlmPurpose) -> Self {
        self.rules.fail.push(purpose);
        self
    }

    pub fn call_count(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }

    pub fn requests(&self) -> Vec<LlmRequest> {
        self.log.lock().clone()
    }
}

impl LlmAdapter for MockLlm {
    fn name(&self) -> &str {
        "mock"
    }

    fn complete(&self, request: &LlmRequest) -> Result<LlmResponse> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        self.log.lock().push(request.clone());
        if self.rules.fail.contains(&request.purpose) {
            return Err(Error::adapter("mock-llm", format!("scripted failure for {:?}", request.purpose)));
        }
        let template = self
            .rules
            .rules
            .get(&request.purpose)
            .ok_or_else(|| Error::adapter("mock-llm", format!("no rule for {:?}", request.purpose)))?;
        let text = template
            .replace("{block_count}", &count_segments(&request.prompt).to_string())
            .replace("{last_query}", last_query(&request.prompt))
            .replace("{prompt}", &request.prompt);
        Ok(LlmResponse { text: truncate_chars(&text, request.max_chars) })
    }
}

/// POSTs the request as JSON and expects `{"text": ...}` back.
pub struct HttpLlm {
    endpoint: String,
    agent: ureq::Agent,
}

impl HttpLlm {
    pub fn new(endpoint: impl Into<String>, timeout: Duration) -> Self {
        let config = ureq::Agent::config_builder().timeout_global(Some(timeout)).build();
        Self { endpoint: endpoint.into(), agent: config.into() }
    }
}

impl LlmAdapter for HttpLlm {
    fn name(&self) -> &str {
        "http"
    }

    fn complete(&self, request: &LlmRequest) -> Result<LlmResponse> {
        let mut response = self
            .agent
            .post(&self.endpoint)
            .send_json(request)
            .map_err(|e| Error::adapter("http-llm", e.to_string()))?;
        let parsed: LlmResponse =
            response.body_mut().read_json().map_err(|e| Error::adapter("http-llm", e.to_string()))?;
        Ok(LlmResponse { text: truncate_chars(&parsed.text, request.max_chars) })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn echo_mock_counts_segments() {
        let llm = MockLlm::echo();
        let prompt = "pre\n\n[source: a.pdf p.1 Text]\nfoo\n\n[source: a.pdf p.2 Table]\nbar\n\nQuestion: zinc?";
        let out = llm
            .complete(&LlmRequest { purpose: LlmPurpose::Answer, prompt: prompt.into(), max_chars: 500 })
            .unwrap();
        assert_eq!(out.text, "Answer grounded in 2 blocks for: zinc?");
        assert_eq!(llm.call_count(), 1);
    }

    #[test]
    fn echo_mock_picks_last_transcript_query() {
        let llm = MockLlm::echo();
        let prompt = "SendQuery: first\nSelectBlock: blk_1\nSendQuery: second one\n";
        let out = llm
            .complete(&LlmRequest { purpose: LlmPurpose::IntentionSummary, prompt: prompt.into(), max_chars: 600 })
            .unwrap();
        assert_eq!(out.text, "USER SEEKS: second one");
    }

    #[test]
    fn replies_are_capped() {
        let llm = MockLlm::fixed("é".repeat(700));
        let out = llm
            .complete(&LlmRequest { purpose: LlmPurpose::IntentionSummary, prompt: String::new(), max_chars: 600 })
            .unwrap();
        assert_eq!(out.text.chars().count(), 600);
    }

    #[test]
    fn failing_mock_errors() {
        let llm = MockLlm::echo().failing_for(LlmPurpose::Answer);
        let req = LlmRequest { purpose: LlmPurpose::Answer, prompt: String::new(), max_chars: 10 };
        assert!(llm.complete(&req).is_err());
    }
}
