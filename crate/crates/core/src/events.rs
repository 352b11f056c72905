//! Append-only interaction log and the folds that derive session state from it.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::path::{Path, PathBuf};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::ids::{BlockId, DocumentId, MessageId, SessionId};
use crate::llm::TRANSCRIPT_QUERY_PREFIX;
use crate::store::{append_line, read_json_lines};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "payload")]
pub enum EventPayload {
    SendQuery { query: String, message_id: MessageId },
    ClickResult { message_id: MessageId, block_id: BlockId },
    SelectBlock { block_id: BlockId },
    DeselectBlock { block_id: BlockId },
    NavigatePage { document_id: DocumentId, page_index: u32 },
    AddDocument { document_id: DocumentId },
    Like { message_id: MessageId },
    Dislike { message_id: MessageId },
    Regenerate { message_id: MessageId },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum EventKind {
    SendQuery,
    ClickResult,
    SelectBlock,
    DeselectBlock,
    NavigatePage,
    AddDocument,
    Like,
    Dislike,
    Regenerate,
}

impl fmt::Display for EventKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

impl EventPayload {
    pub fn kind(&self) -> EventKind {
        match self {
            EventPayload::SendQuery { .. } => EventKind::SendQuery,
            EventPayload::ClickResult { .. } => EventKind::ClickResult,
            EventPayload::SelectBlock { .. } => EventKind::SelectBlock,
            EventPayload::DeselectBlock { .. } => EventKind::DeselectBlock,
            EventPayload::NavigatePage { .. } => EventKind::NavigatePage,
            EventPayload::AddDocument { .. } => EventKind::AddDocument,
            EventPayload::Like { .. } => EventKind::Like,
            EventPayload::Dislike { .. } => EventKind::Dislike,
            EventPayload::Regenerate { .. } => EventKind::Regenerate,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InteractionEvent {
    pub event_id: String,
    pub session_id: SessionId,
    pub user_id: String,
    #[serde(flatten)]
    pub payload: EventPayload,
    pub timestamp: DateTime<Utc>,
}

impl InteractionEvent {
    pub fn kind(&self) -> EventKind {
        self.payload.kind()
    }
}

pub fn fold_staging<'a>(events: impl IntoIterator<Item = &'a InteractionEvent>) -> BTreeSet<BlockId> {
    let mut staging = BTreeSet::new();
    for event in events {
        match &event.payload {
            EventPayload::SelectBlock { block_id } => {
                staging.insert(block_id.clone());
            }
            EventPayload::DeselectBlock { block_id } => {
                staging.remove(block_id);
            }
            _ => {}
        }
    }
    staging
}

pub fn fold_corpus<'a>(
    initial: &BTreeSet<DocumentId>,
    events: impl IntoIterator<Item = &'a InteractionEvent>,
) -> BTreeSet<DocumentId> {
    let mut corpus = initial.clone();
    for event in events {
        if let EventPayload::AddDocument { document_id } = &event.payload {
            corpus.insert(document_id.clone());
        }
    }
    corpus
}

/// Last rating per message; `true` means liked.
pub fn fold_ratings<'a>(events: impl IntoIterator<Item = &'a InteractionEvent>) -> BTreeMap<MessageId, bool> {
    let mut ratings = BTreeMap::new();
    for event in events {
        match &event.payload {
            EventPayload::Like { message_id } => {
                ratings.insert(message_id.clone(), true);
            }
            EventPayload::Dislike { message_id } => {
                ratings.insert(message_id.clone(), false);
            }
            _ => {}
        }
    }
    ratings
}

/// One line per event: kind plus its salient payload. `describe` may add a
/// short snippet for referenced blocks.
pub fn render_transcript(events: &[InteractionEvent], describe: &dyn Fn(&BlockId) -> Option<String>) -> String {
    let block_line = |kind: &str, id: &BlockId| match describe(id) {
        Some(snippet) => format!("{kind}: {id} \"{snippet}\""),
        None => format!("{kind}: {id}"),
    };
    events
        .iter()
        .map(|e| match &e.payload {
            EventPayload::SendQuery { query, .. } => format!("{TRANSCRIPT_QUERY_PREFIX}{query}"),
            EventPayload::ClickResult { block_id, .. } => block_line("ClickResult", block_id),
            EventPayload::SelectBlock { block_id } => block_line("SelectBlock", block_id),
            EventPayload::DeselectBlock { block_id } => block_line("DeselectBlock", block_id),
            EventPayload::NavigatePage { document_id, page_index } => {
                format!("NavigatePage: {document_id} p.{}", page_index + 1)
            }
            EventPayload::AddDocument { document_id } => format!("AddDocument: {document_id}"),
            EventPayload::Like { message_id } => format!("Like: {message_id}"),
            EventPayload::Dislike { message_id } => format!("Dislike: {message_id}"),
            EventPayload::Regenerate { message_id } => format!("Regenerate: {message_id}"),
        })
        .collect::<Vec<_>>()
        .join("\n")
}

/// Global append-only event log, optionally mirrored to JSON Lines.
#[derive(Debug, Default)]
pub struct EventLog {
    path: Option<PathBuf>,
    events: Vec<InteractionEvent>,
    by_session: HashMap<SessionId, Vec<usize>>,
}

impl EventLog {
    pub fn in_memory() -> Self {
        Self::default()
    }

    pub fn open(path: &Path) -> Result<Self> {
        let mut log = Self { path: Some(path.to_owned()), ..Default::default() };
        for event in read_json_lines::<InteractionEvent>(path)? {
            log.index(event);
        }
        Ok(log)
    }

    fn index(&mut self, event: InteractionEvent) {
        self.by_session.entry(event.session_id.clone()).or_default().push(self.events.len());
        self.events.push(event);
    }

    pub fn append(&mut self, event: InteractionEvent) -> Result<()> {
        if let Some(path) = &self.path {
            append_line(path, &serde_json::to_vec(&event)?)?;
        }
        self.index(event);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn all(&self) -> &[InteractionEvent] {
        &self.events
    }

    pub fn for_session(&self, session_id: &SessionId) -> Vec<InteractionEvent> {
        self.by_session
            .get(session_id)
            .map(|idx| idx.iter().map(|i| self.events[*i].clone()).collect())
            .unwrap_or_default()
    }

    pub fn session_len(&self, session_id: &SessionId) -> usize {
        self.by_session.get(session_id).map_or(0, Vec::len)
    }

    pub fn export_jsonl(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        for event in &self.events {
            serde_json::to_writer(&mut out, event)?;
            out.push(b'\n');
        }
        Ok(out)
    }
}
