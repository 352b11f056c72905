//! Pluggable retrieval strategies.
//!
//! Three ship by default:
//!
//! * `naive`: embed the query, exact top-k over every block.
//! * `label_naive`: top-k per block type, merged into one top-k so minority
//!   types (tables, formulas, figures) get a chance to surface.
//! * `symbiotic`: the query is extended with an LLM summary of the user's
//!   earlier interactions before embedding.
//!
//! New strategies implement [`RetrieverStrategy`] and register by name.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use tracing::warn;

use crate::error::{Error, Result};
use crate::events::{render_transcript, InteractionEvent};
use crate::ids::{BlockId, DocumentId, SessionId};
use crate::index::{rank_order, top_k, Embedder, ScoredBlock, SearchFilter, VectorIndex};
use crate::llm::{LlmAdapter, LlmPurpose, LlmRequest};
use crate::model::BlockType;

pub const INTENT_SEPARATOR: &str = "\n[user intent]\n";
pub const SUMMARY_EVENT_WINDOW: usize = 50;
pub const SUMMARY_MAX_CHARS: usize = 600;

const SUMMARY_INSTRUCTION: &str =
    "Summarise in a few sentences what this user is trying to find out, based on their recent activity.";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntentionSummary {
    pub session_id: SessionId,
    pub summary_text: String,
    pub source_event_count: usize,
    pub generated_at: DateTime<Utc>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalResult {
    pub strategy_name: String,
    pub query_as_issued: String,
    pub augmented_query: Option<String>,
    pub items: Vec<ScoredBlock>,
    pub k_requested: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub intention_summary: Option<IntentionSummary>,
    /// Set when a strategy fell back to degraded behaviour.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub warning: Option<String>,
}

impl RetrievalResult {
    pub fn block_ids(&self) -> impl Iterator<Item = &BlockId> {
        self.items.iter().map(|i| &i.block_id)
    }
}

/// Everything a strategy may look at. Strategies keep no state of their own.
pub struct RetrievalContext<'a> {
    pub index: &'a VectorIndex,
    pub embedder: &'a dyn Embedder,
    pub corpus: Option<&'a BTreeSet<DocumentId>>,
    pub session_id: &'a SessionId,
    /// Session events strictly preceding the query being answered.
    pub history: &'a [InteractionEvent],
    pub llm: &'a dyn LlmAdapter,
    pub describe_block: &'a dyn Fn(&BlockId) -> Option<String>,
    pub now: DateTime<Utc>,
}

pub trait RetrieverStrategy: Send + Sync {
    fn name(&self) -> &str;

    fn retrieve(&self, ctx: &RetrievalContext<'_>, query: &str, k: usize) -> Result<RetrievalResult>;
}

fn check_k(k: usize) -> Result<()> {
    if k == 0 {
        return Err(Error::Invalid("k must be at least 1".into()));
    }
    Ok(())
}

fn plain_result(strategy: &str, query: &str, items: Vec<ScoredBlock>, k: usize) -> RetrievalResult {
    RetrievalResult {
        strategy_name: strategy.to_owned(),
        query_as_issued: query.to_owned(),
        augmented_query: None,
        items,
        k_requested: k,
        intention_summary: None,
        warning: None,
    }
}

pub fn naive_search(
    index: &VectorIndex,
    embedder: &dyn Embedder,
    text: &str,
    k: usize,
    corpus: Option<&BTreeSet<DocumentId>>,
) -> Result<Vec<ScoredBlock>> {
    check_k(k)?;
    let vector = embedder.embed(text)?;
    index.search(&vector, k, &SearchFilter { block_type: None, corpus })
}

#[derive(Debug, Clone, Copy, Default)]
pub struct NaiveRetriever;

impl NaiveRetriever {
    pub const NAME: &'static str = "naive";
}

impl RetrieverStrategy for NaiveRetriever {
    fn name(&self) -> &str {
        Self::NAME
    }

    fn retrieve(&self, ctx: &RetrievalContext<'_>, query: &str, k: usize) -> Result<RetrievalResult> {
        let items = naive_search(ctx.index, ctx.embedder, query, k, ctx.corpus)?;
        Ok(plain_result(Self::NAME, query, items, k))
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct LabelNaiveRetriever;

impl LabelNaiveRetriever {
    pub const NAME: &'static str = "label_naive";

    /// Union of the per-type top-k lists, one list for each type present in the corpus.
    pub fn candidates(
        index: &VectorIndex,
        embedder: &dyn Embedder,
        query: &str,
        k: usize,
        corpus: Option<&BTreeSet<DocumentId>>,
    ) -> Result<BTreeMap<BlockType, Vec<ScoredBlock>>> {
        check_k(k)?;
        let vector = embedder.embed(query)?;
        index
            .types_present(corpus)
            .into_iter()
            .map(|t| Ok((t, index.search(&vector, k, &SearchFilter { block_type: Some(t), corpus })?)))
            .collect()
    }
}

/// Merge rule for per-type lists: rank the union by raw score, keep the overall top-k.
pub fn merge_per_type(per_type: BTreeMap<BlockType, Vec<ScoredBlock>>, k: usize) -> Vec<ScoredBlock> {
    let union: Vec<ScoredBlock> = per_type.into_values().flatten().collect();
    let mut merged = top_k(union, k);
    merged.sort_by(rank_order);
    merged
}

impl RetrieverStrategy for LabelNaiveRetriever {
    fn name(&self) -> &str {
        Self::NAME
    }

    fn retrieve(&self, ctx: &RetrievalContext<'_>, query: &str, k: usize) -> Result<RetrievalResult> {
        let per_type = Self::candidates(ctx.index, ctx.embedder, query, k, ctx.corpus)?;
        Ok(plain_result(Self::NAME, query, merge_per_type(per_type, k), k))
    }
}

/// Condenses the most recent events into an intention summary. Never fails:
/// adapter errors come back as an empty summary plus a warning.
pub fn summarize_intention(
    session_id: &SessionId,
    events: &[InteractionEvent],
    llm: &dyn LlmAdapter,
    describe_block: &dyn Fn(&BlockId) -> Option<String>,
    now: DateTime<Utc>,
) -> (IntentionSummary, Option<String>) {
    let empty = IntentionSummary {
        session_id: session_id.clone(),
        summary_text: String::new(),
        source_event_count: 0,
        generated_at: now,
    };
    if events.is_empty() {
        return (empty, None);
    }
    let window = &events[events.len().saturating_sub(SUMMARY_EVENT_WINDOW)..];
    let transcript = render_transcript(window, describe_block);
    let request = LlmRequest {
        purpose: LlmPurpose::IntentionSummary,
        prompt: format!("{SUMMARY_INSTRUCTION}\n\n{transcript}\n"),
        max_chars: SUMMARY_MAX_CHARS,
    };
    match llm.complete(&request) {
        Ok(response) if !response.text.trim().is_empty() => {
            let summary_text = crate::llm::truncate_chars(response.text.trim(), SUMMARY_MAX_CHARS);
            (IntentionSummary { summary_text, source_event_count: window.len(), ..empty }, None)
        }
        Ok(_) => (empty, Some("intention summary came back empty".to_owned())),
        Err(e) => {
            warn!(session = %session_id, error = %e, "intention summary failed, retrieving without it");
            (empty, Some(format!("intention summary unavailable: {e}")))
        }
    }
}

pub fn augment_query(query: &str, summary: &IntentionSummary) -> String {
    if summary.summary_text.is_empty() {
        query.to_owned()
    } else {
        format!("{query}{INTENT_SEPARATOR}{}", summary.summary_text)
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct SymbioticRetriever;

impl SymbioticRetriever {
    pub const NAME: &'static str = "symbiotic";
}

impl RetrieverStrategy for SymbioticRetriever {
    fn name(&self) -> &str {
        Self::NAME
    }

    fn retrieve(&self, ctx: &RetrievalContext<'_>, query: &str, k: usize) -> Result<RetrievalResult> {
        check_k(k)?;
        let (summary, warning) = summarize_intention(ctx.session_id, ctx.history, ctx.llm, ctx.describe_block, ctx.now);
        let augmented = augment_query(query, &summary);
        let items = naive_search(ctx.index, ctx.embedder, &augmented, k, ctx.corpus)?;
        Ok(RetrievalResult {
            strategy_name: Self::NAME.to_owned(),
            query_as_issued: query.to_owned(),
            augmented_query: Some(augmented),
            items,
            k_requested: k,
            intention_summary: Some(summary),
            warning,
        })
    }
}

/// Name-keyed strategy table.
#[derive(Clone)]
pub struct StrategyRegistry {
    strategies: BTreeMap<String, Arc<dyn RetrieverStrategy>>,
}

impl StrategyRegistry {
    pub fn empty() -> Self {
        Self { strategies: BTreeMap::new() }
    }

    pub fn standard() -> Self {
        let mut registry = Self::empty();
        registry.register(Arc::new(NaiveRetriever));
        registry.register(Arc::new(LabelNaiveRetriever));
        registry.register(Arc::new(SymbioticRetriever));
        registry
    }

    pub fn register(&mut self, strategy: Arc<dyn RetrieverStrategy>) {
        self.strategies.insert(strategy.name().to_owned(), strategy);
    }

    pub fn canonical_name(name: &str) -> &str {
        match name {
            "label" | "labelnaive" | "label-naive" => LabelNaiveRetriever::NAME,
            other => other,
        }
    }

    pub fn get(&self, name: &str) -> Result<Arc<dyn RetrieverStrategy>> {
        self.strategies
            .get(Self::canonical_name(name))
            .cloned()
            .ok_or_else(|| Error::not_found("strategy", name))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.strategies.keys().map(String::as_str)
    }
}

impl Default for StrategyRegistry {
    fn default() -> Self {
        Self::standard()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::events::EventPayload;
    use crate::index::{IndexEntry, ReferenceEmbedder};
    use crate::llm::MockLlm;
    use chrono::TimeZone;

    fn now() -> DateTime<Utc> {
        Utc.with_ymd_and_hms(2025, 1, 1, 0, 0, 0).unwrap()
    }

    fn ev(n: usize, query: &str) -> InteractionEvent {
        InteractionEvent {
            event_id: format!("s-{n:08}"),
            session_id: "s".into(),
            user_id: "u".into(),
            payload: EventPayload::SendQuery { query: query.into(), message_id: format!("m{n}").into() },
            timestamp: now(),
        }
    }

    #[test]
    fn zero_events_skip_the_adapter() {
        let llm = MockLlm::echo();
        let (summary, warning) = summarize_intention(&"s".into(), &[], &llm, &|_| None, now());
        assert!(summary.summary_text.is_empty());
        assert_eq!(summary.source_event_count, 0);
        assert!(warning.is_none());
        assert_eq!(llm.call_count(), 0);
    }

    #[test]
    fn summary_mentions_last_query() {
        let llm = MockLlm::echo();
        let events = vec![ev(1, "porphyry copper"), ev(2, "zinc grade by depth")];
        let (summary, _) = summarize_intention(&"s".into(), &events, &llm, &|_| None, now());
        assert!(summary.summary_text.contains("zinc grade by depth"));
        assert_eq!(summary.source_event_count, 2);
    }

    #[test]
    fn transcript_window_is_last_fifty() {
        let llm = MockLlm::echo();
        let events: Vec<_> = (0..80).map(|i| ev(i, &format!("query number {i:03}"))).collect();
        let (summary, _) = summarize_intention(&"s".into(), &events, &llm, &|_| None, now());
        assert_eq!(summary.source_event_count, 50);
        let prompt = &llm.requests()[0].prompt;
        assert_eq!(prompt.matches("SendQuery: ").count(), 50);
        assert!(!prompt.contains("query number 029"));
        assert!(prompt.contains("query number 030"));
        assert!(prompt.contains("query number 079"));
    }

    #[test]
    fn adapter_failure_yields_empty_summary_and_warning() {
        let llm = MockLlm::failing();
        let (summary, warning) = summarize_intention(&"s".into(), &[ev(1, "x")], &llm, &|_| None, now());
        assert!(summary.summary_text.is_empty());
        assert_eq!(summary.source_event_count, 0);
        assert!(warning.is_some());
    }

    #[test]
    fn augmented_query_uses_fixed_separator() {
        let s = IntentionSummary {
            session_id: "s".into(),
            summary_text: "wants assays".into(),
            source_event_count: 1,
            generated_at: now(),
        };
        assert_eq!(augment_query("zinc", &s), "zinc\n[user intent]\nwants assays");
    }

    #[test]
    fn merge_ranks_union_by_score() {
        let item = |id: &str, s: f64, t| ScoredBlock { block_id: id.into(), score: s, block_type: t, document_id: "d".into() };
        let mut per_type = BTreeMap::new();
        per_type.insert(BlockType::Text, vec![item("t1", 0.9, BlockType::Text), item("t2", 0.5, BlockType::Text)]);
        per_type.insert(BlockType::Table, vec![item("x1", 0.7, BlockType::Table)]);
        let merged = merge_per_type(per_type, 2);
        assert_eq!(merged.iter().map(|i| i.block_id.as_str()).collect::<Vec<_>>(), ["t1", "x1"]);
    }

    #[test]
    fn registry_resolves_aliases() {
        let r = StrategyRegistry::standard();
        assert_eq!(r.get("label").unwrap().name(), "label_naive");
        assert!(r.get("bm25").is_err());
        assert_eq!(r.names().collect::<Vec<_>>(), ["label_naive", "naive", "symbiotic"]);
    }

    #[test]
    fn symbiotic_with_empty_history_matches_naive() {
        let e = ReferenceEmbedder;
        let mut index = VectorIndex::for_embedder(&e);
        for (i, t) in ["zinc grade", "copper porphyry", "zinc assay table"].iter().enumerate() {
            index
                .upsert_entry(IndexEntry {
                    block_id: format!("b{i}").into(),
                    document_id: "d".into(),
                    block_type: BlockType::Text,
                    vector: e.embed_text(t),
                    revision: 0,
                })
                .unwrap();
        }
        let llm = MockLlm::echo();
        let ctx = RetrievalContext {
            index: &index,
            embedder: &e,
            corpus: None,
            session_id: &"s".into(),
            history: &[],
            llm: &llm,
            describe_block: &|_| None,
            now: now(),
        };
        let naive = NaiveRetriever.retrieve(&ctx, "zinc", 2).unwrap();
        let sym = SymbioticRetriever.retrieve(&ctx, "zinc", 2).unwrap();
        assert_eq!(naive.items, sym.items);
        assert_eq!(sym.augmented_query.as_deref(), Some("zinc"));
    }
}
