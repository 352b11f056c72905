//! Retrieval over typed layout blocks with human curation.
//!
//! Documents are split into typed blocks (text, tables, formulas, figures),
//! reviewed by people, embedded, and retrieved during chat sessions whose
//! interactions are logged as events. Sessions feed a report builder and an
//! evaluation harness that measures how far the retriever's picks are from
//! the user's.

pub mod engine;
pub mod error;
pub mod evaluation;
pub mod events;
pub mod ids;
pub mod index;
pub mod ingestion;
pub mod llm;
pub mod model;
pub mod pdf;
pub mod report;
pub mod retrievers;
pub mod session;
pub mod store;
pub mod validation;

pub use engine::{Engine, EngineBuilder, EngineConfig};
pub use error::{Error, Result};
pub use ids::{BlockId, DocumentId, MessageId, ReportId, SessionId};
pub use model::{BlockPayload, BlockType, BoundingBox, Document, LayoutBlock, ProcessingState};
