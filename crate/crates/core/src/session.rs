//! Chat sessions: querying, the staging area of hand-picked blocks, answer
//! regeneration and ratings. Every user gesture is appended to the event log
//! first; staging, corpus and ratings are folds over that log.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use std::sync::Arc;

use chrono::{DateTime, Utc};
use parking_lot::Mutex;
use serde::{Deserialize, Serialize};
use tracing::warn;

use crate::engine::Engine;
use crate::error::{Error, Result};
use crate::events::{fold_corpus, fold_ratings, fold_staging, EventPayload, InteractionEvent};
use crate::ids::{BlockId, DocumentId, MessageId, SessionId};
use crate::llm::{LlmPurpose, LlmRequest, QUESTION_PREFIX, SEGMENT_PREFIX};
use crate::model::{LayoutBlock, ProcessingState};
use crate::retrievers::{RetrievalContext, RetrievalResult};
use crate::store::{write_atomic, BlockStore};

pub const ANSWER_PREAMBLE: &str = "Answer the question using only the source blocks below. \
Cite sources by their bracketed tags. Say so if the blocks do not contain the answer.";
pub const ANSWER_MAX_CHARS: usize = 4000;
const SNIPPET_CHARS: usize = 80;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    User,
    Retrieval,
    Assistant,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Rating {
    Liked,
    Disliked,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Citation {
    pub block_id: BlockId,
    pub revision: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub message_id: MessageId,
    pub role: Role,
    pub content: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub retrieval_result: Option<RetrievalResult>,
    /// Blocks shown to the model (assistant) or returned (retrieval), with the revision used.
    #[serde(default)]
    pub citations: Vec<Citation>,
    /// Assistant messages point at the retrieval message of their turn.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reply_to: Option<MessageId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub regenerated_from: Option<MessageId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rating: Option<Rating>,
    #[serde(default)]
    pub is_error: bool,
    pub created_at: DateTime<Utc>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatSession {
    pub session_id: SessionId,
    pub user_id: String,
    pub strategy_name: String,
    pub initial_corpus: BTreeSet<DocumentId>,
    pub corpus: BTreeSet<DocumentId>,
    pub messages: Vec<ChatMessage>,
    pub staging: BTreeSet<BlockId>,
    /// Overall 1..=5 satisfaction, captured at the end of a session.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub satisfaction: Option<u8>,
    pub created_at: DateTime<Utc>,
    next_event: u64,
    next_message: u64,
    last_timestamp: DateTime<Utc>,
}

impl ChatSession {
    fn new(
        session_id: SessionId,
        user_id: String,
        strategy_name: String,
        corpus: BTreeSet<DocumentId>,
        now: DateTime<Utc>,
    ) -> Self {
        Self {
            session_id,
            user_id,
            strategy_name,
            initial_corpus: corpus.clone(),
            corpus,
            messages: Vec::new(),
            staging: BTreeSet::new(),
            satisfaction: None,
            created_at: now,
            next_event: 0,
            next_message: 0,
            last_timestamp: now,
        }
    }

    pub fn message(&self, message_id: &MessageId) -> Result<&ChatMessage> {
        self.messages
            .iter()
            .find(|m| &m.message_id == message_id)
            .ok_or_else(|| Error::not_found("message", message_id.as_str()))
    }

    fn message_mut(&mut self, message_id: &MessageId) -> Result<&mut ChatMessage> {
        self.messages
            .iter_mut()
            .find(|m| &m.message_id == message_id)
            .ok_or_else(|| Error::not_found("message", message_id.as_str()))
    }

    fn mint_message_id(&mut self) -> MessageId {
        self.next_message += 1;
        MessageId(format!("m{}", self.next_message))
    }

    /// Blocks returned by the retriever over the whole session.
    pub fn retrieved_blocks(&self) -> BTreeSet<BlockId> {
        self.messages
            .iter()
            .filter_map(|m| m.retrieval_result.as_ref())
            .flat_map(|r| r.block_ids().cloned())
            .collect()
    }

    pub fn retrieval_messages(&self) -> impl Iterator<Item = &ChatMessage> {
        self.messages.iter().filter(|m| m.role == Role::Retrieval)
    }

    /// Checks that cached state equals the folds over `events`.
    pub fn check_against(&self, events: &[InteractionEvent]) -> Result<()> {
        if fold_staging(events) != self.staging {
            return Err(Error::Conflict(format!("session {} staging disagrees with its log", self.session_id)));
        }
        if fold_corpus(&self.initial_corpus, events) != self.corpus {
            return Err(Error::Conflict(format!("session {} corpus disagrees with its log", self.session_id)));
        }
        let ratings = fold_ratings(events);
        for m in &self.messages {
            let folded = ratings.get(&m.message_id).map(|liked| if *liked { Rating::Liked } else { Rating::Disliked });
            if folded != m.rating {
                return Err(Error::Conflict(format!("session {} rating of {} disagrees with its log", self.session_id, m.message_id)));
            }
        }
        Ok(())
    }
}

/// `[source: <name> p.<page+1> <type>]` followed by the block text.
pub fn render_segment(source_name: &str, block: &LayoutBlock) -> String {
    format!(
        "{SEGMENT_PREFIX}{source_name} p.{} {}]\n{}",
        block.page_index() + 1,
        block.block_type,
        block.text_repr
    )
}

/// Resolves, de-duplicates and renders the given blocks in order. Tombstoned
/// and unknown blocks are skipped.
pub fn render_blocks<'a>(store: &BlockStore, ids: impl IntoIterator<Item = &'a BlockId>) -> (Vec<String>, Vec<Citation>) {
    let mut seen = BTreeSet::new();
    let mut segments = Vec::new();
    let mut citations = Vec::new();
    for id in ids {
        if !seen.insert(id.clone()) {
            continue;
        }
        let Ok(block) = store.block(id) else { continue };
        if block.tombstoned {
            continue;
        }
        let source = store.document(&block.document_id).map(|d| d.source_name.as_str()).unwrap_or("unknown");
        segments.push(render_segment(source, block));
        citations.push(Citation { block_id: block.block_id.clone(), revision: block.revision });
    }
    (segments, citations)
}

pub fn answer_prompt(segments: &[String], query: &str) -> String {
    let mut prompt = String::from(ANSWER_PREAMBLE);
    for segment in segments {
        prompt.push_str("\n\n");
        prompt.push_str(segment);
    }
    prompt.push_str("\n\n");
    prompt.push_str(QUESTION_PREFIX);
    prompt.push_str(query);
    prompt
}

pub(crate) fn snippet(store: &BlockStore, id: &BlockId) -> Option<String> {
    let block = store.block(id).ok()?;
    let text = block.text_repr.split_whitespace().collect::<Vec<_>>().join(" ");
    Some(crate::llm::truncate_chars(&text, SNIPPET_CHARS))
}

pub(crate) fn load_sessions(dir: &Path) -> Result<BTreeMap<SessionId, ChatSession>> {
    let mut sessions = BTreeMap::new();
    let entries = match std::fs::read_dir(dir) {
        Ok(e) => e,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(sessions),
        Err(e) => return Err(Error::io(dir, e)),
    };
    for entry in entries.filter_map(|e| e.ok()) {
        let path = entry.path();
        if path.extension().is_some_and(|x| x == "json") {
            let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
            let session: ChatSession = serde_json::from_slice(&bytes)?;
            sessions.insert(session.session_id.clone(), session);
        }
    }
    Ok(sessions)
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct NewSession {
    pub user_id: String,
    pub strategy: String,
    /// Documents to search. `None` means every indexed document.
    #[serde(default)]
    pub corpus: Option<BTreeSet<DocumentId>>,
    /// Caller-chosen id; generated when absent.
    #[serde(default)]
    pub session_id: Option<SessionId>,
}

impl Engine {
    pub(crate) fn verify_sessions(&self) -> Result<()> {
        let events = self.events.lock();
        for session in self.sessions.read().values() {
            let session = session.lock();
            session.check_against(&events.for_session(&session.session_id))?;
        }
        Ok(())
    }

    fn session_handle(&self, session_id: &SessionId) -> Result<Arc<Mutex<ChatSession>>> {
        self.sessions
            .read()
            .get(session_id)
            .cloned()
            .ok_or_else(|| Error::not_found("session", session_id.as_str()))
    }

    fn persist_session(&self, session: &ChatSession) -> Result<()> {
        if let Some(layout) = self.layout() {
            let path = layout.sessions().join(format!("{}.json", session.session_id));
            write_atomic(&path, &serde_json::to_vec_pretty(session)?)?;
        }
        Ok(())
    }

    /// Appends one event for `session`, keeping per-session (timestamp, id) order.
    fn log_event(&self, session: &mut ChatSession, payload: EventPayload) -> Result<InteractionEvent> {
        let timestamp = self.clock.now().max(session.last_timestamp);
        session.next_event += 1;
        let event = InteractionEvent {
            event_id: format!("{}-{:08}", session.session_id, session.next_event),
            session_id: session.session_id.clone(),
            user_id: session.user_id.clone(),
            payload,
            timestamp,
        };
        session.last_timestamp = timestamp;
        self.events.lock().append(event.clone())?;
        Ok(event)
    }

    pub fn create_session(&self, request: NewSession) -> Result<ChatSession> {
        let strategy = self.strategies.get(&request.strategy)?;
        let corpus = match request.corpus {
            Some(corpus) => {
                let store = self.store.read();
                for id in &corpus {
                    store.document(id)?;
                }
                corpus
            }
            None => self
                .store
                .read()
                .documents()
                .filter(|d| d.processing_state == ProcessingState::Indexed)
                .map(|d| d.document_id.clone())
                .collect(),
        };
        let session_id = request.session_id.unwrap_or_else(|| SessionId(self.ids.next_id("ses")));
        let mut sessions = self.sessions.write();
        if sessions.contains_key(&session_id) {
            return Err(Error::Conflict(format!("session {session_id} already exists")));
        }
        let session = ChatSession::new(session_id.clone(), request.user_id, strategy.name().to_owned(), corpus, self.clock.now());
        self.persist_session(&session)?;
        sessions.insert(session_id, Arc::new(Mutex::new(session.clone())));
        Ok(session)
    }

    pub fn session(&self, session_id: &SessionId) -> Result<ChatSession> {
        Ok(self.session_handle(session_id)?.lock().clone())
    }

    pub fn session_ids(&self) -> Vec<SessionId> {
        self.sessions.read().keys().cloned().collect()
    }

    pub fn session_events(&self, session_id: &SessionId) -> Vec<InteractionEvent> {
        self.events.lock().for_session(session_id)
    }

    pub fn export_events(&self) -> Result<Vec<u8>> {
        self.events.lock().export_jsonl()
    }

    /// Retrieves for `query` with the session's strategy, records the result and
    /// asks the LLM for an answer grounded in the retrieved blocks.
    pub fn post_query(&self, session_id: &SessionId, query: &str) -> Result<(ChatMessage, ChatMessage)> {
        if query.trim().is_empty() {
            return Err(Error::Invalid("query is empty".into()));
        }
        let handle = self.session_handle(session_id)?;
        let mut session = handle.lock();
        let strategy = self.strategies.get(&session.strategy_name)?;

        // the summary only sees events before this query's SendQuery
        let history = self.events.lock().for_session(session_id);
        let (result, segments, citations) = {
            let store = self.store.read();
            let index = self.index.read();
            let describe = |id: &BlockId| snippet(&store, id);
            let ctx = RetrievalContext {
                index: &index,
                embedder: self.embedder.as_ref(),
                corpus: Some(&session.corpus),
                session_id,
                history: &history,
                llm: self.llm.as_ref(),
                describe_block: &describe,
                now: self.clock.now(),
            };
            let result = strategy.retrieve(&ctx, query, self.config.k)?;
            let (segments, citations) = render_blocks(&store, result.block_ids());
            (result, segments, citations)
        };

        let user_id = session.mint_message_id();
        self.log_event(&mut session, EventPayload::SendQuery { query: query.to_owned(), message_id: user_id.clone() })?;
        let now = session.last_timestamp;
        session.messages.push(ChatMessage {
            message_id: user_id.clone(),
            role: Role::User,
            content: query.to_owned(),
            retrieval_result: None,
            citations: Vec::new(),
            reply_to: None,
            regenerated_from: None,
            rating: None,
            is_error: false,
            created_at: now,
        });

        let retrieval_id = session.mint_message_id();
        let retrieval = ChatMessage {
            message_id: retrieval_id.clone(),
            role: Role::Retrieval,
            content: format!("{} blocks retrieved by {}", result.items.len(), result.strategy_name),
            retrieval_result: Some(result),
            citations: citations.clone(),
            reply_to: Some(user_id),
            regenerated_from: None,
            rating: None,
            is_error: false,
            created_at: now,
        };
        session.messages.push(retrieval.clone());

        let assistant = self.generate_answer(&mut session, &segments, citations, query, retrieval_id, None);
        session.messages.push(assistant.clone());
        self.persist_session(&session)?;
        Ok((retrieval, assistant))
    }

    fn generate_answer(
        &self,
        session: &mut ChatSession,
        segments: &[String],
        citations: Vec<Citation>,
        query: &str,
        reply_to: MessageId,
        regenerated_from: Option<MessageId>,
    ) -> ChatMessage {
        let request = LlmRequest {
            purpose: LlmPurpose::Answer,
            prompt: answer_prompt(segments, query),
            max_chars: ANSWER_MAX_CHARS,
        };
        let (content, is_error) = match self.llm.complete(&request) {
            Ok(response) => (response.text, false),
            Err(e) => {
                warn!(session = %session.session_id, error = %e, "answer generation failed");
                (format!("The answer could not be generated: {e}"), true)
            }
        };
        ChatMessage {
            message_id: session.mint_message_id(),
            role: Role::Assistant,
            content,
            retrieval_result: None,
            citations,
            reply_to: Some(reply_to),
            regenerated_from,
            rating: None,
            is_error,
            created_at: self.clock.now().max(session.last_timestamp),
        }
    }

    pub fn toggle_block(&self, session_id: &SessionId, block_id: &BlockId, select: bool) -> Result<BTreeSet<BlockId>> {
        let handle = self.session_handle(session_id)?;
        let mut session = handle.lock();
        {
            let store = self.store.read();
            let block = store.block(block_id)?;
            if block.tombstoned {
                return Err(Error::Invalid(format!("block {block_id} has been removed")));
            }
        }
        let payload = if select {
            EventPayload::SelectBlock { block_id: block_id.clone() }
        } else {
            EventPayload::DeselectBlock { block_id: block_id.clone() }
        };
        self.log_event(&mut session, payload)?;
        if select {
            session.staging.insert(block_id.clone());
        } else {
            session.staging.remove(block_id);
        }
        self.persist_session(&session)?;
        Ok(session.staging.clone())
    }

    pub fn staging(&self, session_id: &SessionId) -> Result<BTreeSet<BlockId>> {
        Ok(self.session_handle(session_id)?.lock().staging.clone())
    }

    /// Answers the turn again with the retrieved blocks plus everything staged.
    pub fn regenerate(&self, session_id: &SessionId, message_id: &MessageId) -> Result<ChatMessage> {
        let handle = self.session_handle(session_id)?;
        let mut session = handle.lock();
        let original = session.message(message_id)?;
        if original.role != Role::Assistant {
            return Err(Error::Invalid(format!("{message_id} is not an assistant message")));
        }
        let retrieval_id = original
            .reply_to
            .clone()
            .ok_or_else(|| Error::Invalid(format!("{message_id} has no retrieval turn")))?;
        let result = session
            .message(&retrieval_id)?
            .retrieval_result
            .clone()
            .ok_or_else(|| Error::Invalid(format!("{retrieval_id} is not a retrieval message")))?;

        let (segments, citations) = {
            let store = self.store.read();
            let ids: Vec<&BlockId> = result.block_ids().chain(session.staging.iter()).collect();
            render_blocks(&store, ids)
        };
        self.log_event(&mut session, EventPayload::Regenerate { message_id: message_id.clone() })?;
        let message = self.generate_answer(
            &mut session,
            &segments,
            citations,
            &result.query_as_issued,
            retrieval_id,
            Some(message_id.clone()),
        );
        session.messages.push(message.clone());
        self.persist_session(&session)?;
        Ok(message)
    }

    pub fn rate(&self, session_id: &SessionId, message_id: &MessageId, liked: bool) -> Result<()> {
        let handle = self.session_handle(session_id)?;
        let mut session = handle.lock();
        if session.message(message_id)?.role != Role::Assistant {
            return Err(Error::Invalid(format!("{message_id} is not an assistant message")));
        }
        let payload = if liked {
            EventPayload::Like { message_id: message_id.clone() }
        } else {
            EventPayload::Dislike { message_id: message_id.clone() }
        };
        self.log_event(&mut session, payload)?;
        session.message_mut(message_id)?.rating = Some(if liked { Rating::Liked } else { Rating::Disliked });
        self.persist_session(&session)
    }

    pub fn add_document_to_corpus(&self, session_id: &SessionId, document_id: &DocumentId) -> Result<BTreeSet<DocumentId>> {
        let handle = self.session_handle(session_id)?;
        let mut session = handle.lock();
        {
            let store = self.store.read();
            let doc = store.document(document_id)?;
            if doc.processing_state != ProcessingState::Indexed {
                return Err(Error::Invalid(format!(
                    "document {document_id} is {:?}, not Indexed",
                    doc.processing_state
                )));
            }
        }
        self.log_event(&mut session, EventPayload::AddDocument { document_id: document_id.clone() })?;
        session.corpus.insert(document_id.clone());
        self.persist_session(&session)?;
        Ok(session.corpus.clone())
    }

    /// Records that the user opened a retrieved block from a result table.
    pub fn click_result(&self, session_id: &SessionId, message_id: &MessageId, block_id: &BlockId) -> Result<()> {
        let handle = self.session_handle(session_id)?;
        let mut session = handle.lock();
        let message = session.message(message_id)?;
        let listed = message.retrieval_result.as_ref().is_some_and(|r| r.block_ids().any(|b| b == block_id));
        if !listed {
            return Err(Error::Invalid(format!("{block_id} is not a result of {message_id}")));
        }
        self.log_event(&mut session, EventPayload::ClickResult { message_id: message_id.clone(), block_id: block_id.clone() })?;
        self.persist_session(&session)
    }

    pub fn navigate_page(&self, session_id: &SessionId, document_id: &DocumentId, page_index: u32) -> Result<()> {
        let handle = self.session_handle(session_id)?;
        let mut session = handle.lock();
        {
            let store = self.store.read();
            let doc = store.document(document_id)?;
            if page_index >= doc.page_count {
                return Err(Error::Invalid(format!("page {page_index} out of range")));
            }
        }
        self.log_event(&mut session, EventPayload::NavigatePage { document_id: document_id.clone(), page_index })?;
        self.persist_session(&session)
    }

    pub fn set_satisfaction(&self, session_id: &SessionId, rating: u8) -> Result<()> {
        if !(1..=5).contains(&rating) {
            return Err(Error::Invalid(format!("satisfaction must be 1..=5, got {rating}")));
        }
        let handle = self.session_handle(session_id)?;
        let mut session = handle.lock();
        session.satisfaction = Some(rating);
        self.persist_session(&session)
    }
}
