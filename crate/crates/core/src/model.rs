//! Document, page and layout-block data model.
//!
//! Coordinates are PDF points with a top-left origin. A block's identity is a
//! content hash over its document, page, rounded box and type, so re-ingesting
//! the same bytes reproduces every id.

use std::cmp::Ordering;
use std::fmt;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::ids::{BlockId, DocumentId};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub page_index: u32,
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl BoundingBox {
    pub fn new(page_index: u32, x0: f64, y0: f64, x1: f64, y1: f64) -> Result<Self> {
        let bbox = Self { page_index, x0, y0, x1, y1 };
        bbox.validate()?;
        Ok(bbox)
    }

    pub fn validate(&self) -> Result<()> {
        let coords = [self.x0, self.y0, self.x1, self.y1];
        if coords.iter().any(|c| !c.is_finite() || *c < 0.0) {
            return Err(Error::Invalid(format!("bbox coordinates must be finite and non-negative: {self}")));
        }
        if self.x0 >= self.x1 || self.y0 >= self.y1 {
            return Err(Error::Invalid(format!("bbox must satisfy x0 < x1 and y0 < y1: {self}")));
        }
        Ok(())
    }

    /// Coordinates in tenths of a point, the resolution used for identity.
    pub fn rounded_tenths(&self) -> [i64; 4] {
        [self.x0, self.y0, self.x1, self.y1].map(|c| (c * 10.0).round() as i64)
    }

    /// Intersects the box with the page rectangle. `None` when nothing is left.
    pub fn clip_to(&self, width: f64, height: f64) -> Option<Self> {
        let clip = |v: f64, hi: f64| if v.is_finite() { v.clamp(0.0, hi) } else { 0.0 };
        let clipped = Self {
            page_index: self.page_index,
            x0: clip(self.x0, width),
            y0: clip(self.y0, height),
            x1: clip(self.x1, width),
            y1: clip(self.y1, height),
        };
        clipped.validate().ok().map(|_| clipped)
    }

    pub fn area(&self) -> f64 {
        (self.x1 - self.x0) * (self.y1 - self.y0)
    }
}

impl fmt::Display for BoundingBox {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "p{}[{}, {}, {}, {}]", self.page_index, self.x0, self.y0, self.x1, self.y1)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum BlockType {
    Title,
    Text,
    Table,
    Figure,
    Formula,
    Caption,
    Other,
}

impl BlockType {
    pub const ALL: [BlockType; 7] = [
        BlockType::Title,
        BlockType::Text,
        BlockType::Table,
        BlockType::Figure,
        BlockType::Formula,
        BlockType::Caption,
        BlockType::Other,
    ];

    /// Maps a detector label onto the closed enumeration. Unknown labels become `Other`.
    pub fn from_label(label: &str) -> Self {
        match label.trim().to_ascii_lowercase().replace([' ', '-'], "_").as_str() {
            "title" | "heading" | "section_header" | "doc_title" => BlockType::Title,
            "text" | "plain_text" | "paragraph" | "list" | "list_item" => BlockType::Text,
            "table" => BlockType::Table,
            "figure" | "picture" | "image" | "chart" => BlockType::Figure,
            "formula" | "equation" | "isolate_formula" | "isolated_formula" => BlockType::Formula,
            "caption" | "figure_caption" | "table_caption" | "formula_caption" | "table_footnote" => {
                BlockType::Caption
            }
            _ => BlockType::Other,
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            BlockType::Title => "Title",
            BlockType::Text => "Text",
            BlockType::Table => "Table",
            BlockType::Figure => "Figure",
            BlockType::Formula => "Formula",
            BlockType::Caption => "Caption",
            BlockType::Other => "Other",
        }
    }

    /// The payload shape blocks of this type carry.
    pub fn payload_kind(&self) -> PayloadKind {
        match self {
            BlockType::Title | BlockType::Text | BlockType::Caption | BlockType::Other => PayloadKind::Text,
            BlockType::Table => PayloadKind::Table,
            BlockType::Figure => PayloadKind::Figure,
            BlockType::Formula => PayloadKind::Formula,
        }
    }
}

impl fmt::Display for BlockType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for BlockType {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        BlockType::ALL
            .into_iter()
            .find(|t| t.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Invalid(format!("unknown block type {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PayloadKind {
    Text,
    Table,
    Formula,
    Figure,
}

/// Structured cell record produced by table extraction. LaTeX and HTML are
/// optional alternate renderings; `rows` is canonical.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TableRecord {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub caption: Option<String>,
    pub rows: Vec<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub latex: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub html: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BlockPayload {
    Text {
        text: String,
    },
    Table(TableRecord),
    Formula {
        latex: String,
        description: String,
    },
    Figure {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        caption: Option<String>,
        description: String,
    },
}

impl BlockPayload {
    pub fn kind(&self) -> PayloadKind {
        match self {
            BlockPayload::Text { .. } => PayloadKind::Text,
            BlockPayload::Table(_) => PayloadKind::Table,
            BlockPayload::Formula { .. } => PayloadKind::Formula,
            BlockPayload::Figure { .. } => PayloadKind::Figure,
        }
    }

    pub fn text(text: impl Into<String>) -> Self {
        BlockPayload::Text { text: text.into() }
    }
}

pub const FORMULA_SEPARATOR: &str = "\n---\n";

/// Flattens a typed extraction record into the text that gets embedded.
pub fn canonical_text_repr(block_type: BlockType, payload: &BlockPayload) -> Result<String> {
    if block_type.payload_kind() != payload.kind() {
        return Err(Error::Schema(format!(
            "{block_type} block cannot carry a {:?} payload",
            payload.kind()
        )));
    }
    let text = match payload {
        BlockPayload::Text { text } => text.clone(),
        BlockPayload::Table(table) => {
            let mut lines = Vec::with_capacity(table.rows.len() + 1);
            if let Some(caption) = table.caption.as_deref().filter(|c| !c.trim().is_empty()) {
                lines.push(caption.to_owned());
            }
            lines.extend(table.rows.iter().map(|row| row.join(" | ")));
            lines.join("\n")
        }
        BlockPayload::Formula { latex, description } => {
            if description.trim().is_empty() {
                latex.clone()
            } else {
                format!("{latex}{FORMULA_SEPARATOR}{description}")
            }
        }
        BlockPayload::Figure { caption, description } => caption
            .iter()
            .map(String::as_str)
            .chain(std::iter::once(description.as_str()))
            .filter(|s| !s.trim().is_empty())
            .collect::<Vec<_>>()
            .join("\n"),
    };
    Ok(text)
}

/// Stable block id. The box is rounded to 0.1 pt before hashing.
pub fn block_identity(document_id: &DocumentId, page_index: u32, bbox: &BoundingBox, block_type: BlockType) -> BlockId {
    let [x0, y0, x1, y1] = bbox.rounded_tenths();
    let mut hasher = Sha256::new();
    hasher.update(document_id.as_str().as_bytes());
    hasher.update(format!("\x1f{page_index}\x1f{x0}\x1f{y0}\x1f{x1}\x1f{y1}\x1f{block_type}").as_bytes());
    let digest = hasher.finalize();
    BlockId(format!("blk_{}", hex::encode(&digest[..16])))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayoutBlock {
    pub block_id: BlockId,
    pub document_id: DocumentId,
    pub bbox: BoundingBox,
    pub block_type: BlockType,
    pub raw_payload: Option<BlockPayload>,
    pub text_repr: String,
    pub revision: u64,
    #[serde(default)]
    pub needs_validation: bool,
    #[serde(default)]
    pub tombstoned: bool,
}

impl LayoutBlock {
    /// A freshly detected block with no extraction yet.
    pub fn detected(document_id: DocumentId, bbox: BoundingBox, block_type: BlockType) -> Self {
        let block_id = block_identity(&document_id, bbox.page_index, &bbox, block_type);
        Self {
            block_id,
            document_id,
            bbox,
            block_type,
            raw_payload: None,
            text_repr: String::new(),
            revision: 0,
            needs_validation: false,
            tombstoned: false,
        }
    }

    pub fn page_index(&self) -> u32 {
        self.bbox.page_index
    }

    /// Whether the block may live in the retrieval index.
    pub fn is_indexable(&self) -> bool {
        !self.tombstoned && !self.text_repr.trim().is_empty()
    }
}

/// Reading order within a page: top-to-bottom, then left-to-right.
pub fn reading_order(a: &LayoutBlock, b: &LayoutBlock) -> Ordering {
    a.bbox
        .y0
        .total_cmp(&b.bbox.y0)
        .then(a.bbox.x0.total_cmp(&b.bbox.x0))
        .then_with(|| a.block_id.cmp(&b.block_id))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Page {
    pub page_index: u32,
    pub width: f64,
    pub height: f64,
    /// Native text layer, when the source has one.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text_layer: Option<String>,
    pub blocks: Vec<LayoutBlock>,
}

impl Page {
    pub fn new(page_index: u32, width: f64, height: f64, text_layer: Option<String>) -> Self {
        Self { page_index, width, height, text_layer, blocks: Vec::new() }
    }

    pub fn sort_blocks(&mut self) {
        self.blocks.sort_by(reading_order);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ProcessingState {
    Uploaded,
    Normalized,
    LayoutDetected,
    Extracted,
    Indexed,
    Failed,
}

impl ProcessingState {
    pub fn is_terminal(&self) -> bool {
        matches!(self, ProcessingState::Indexed | ProcessingState::Failed)
    }

    /// Forward along the pipeline order, or to `Failed` from any non-terminal state.
    pub fn can_transition_to(&self, next: ProcessingState) -> bool {
        if next == ProcessingState::Failed {
            return !self.is_terminal();
        }
        *self != ProcessingState::Failed && next > *self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Document {
    pub document_id: DocumentId,
    pub source_name: String,
    pub page_count: u32,
    pub pages: Vec<Page>,
    pub processing_state: ProcessingState,
}

impl Document {
    pub fn advance(&mut self, next: ProcessingState) -> Result<()> {
        if !self.processing_state.can_transition_to(next) {
            return Err(Error::Invalid(format!(
                "document {} cannot move from {:?} to {:?}",
                self.document_id, self.processing_state, next
            )));
        }
        self.processing_state = next;
        Ok(())
    }

    pub fn blocks(&self) -> impl Iterator<Item = &LayoutBlock> {
        self.pages.iter().flat_map(|p| p.blocks.iter())
    }

    pub fn blocks_mut(&mut self) -> impl Iterator<Item = &mut LayoutBlock> {
        self.pages.iter_mut().flat_map(|p| p.blocks.iter_mut())
    }

    pub fn block(&self, block_id: &BlockId) -> Option<&LayoutBlock> {
        self.blocks().find(|b| &b.block_id == block_id)
    }

    pub fn block_mut(&mut self, block_id: &BlockId) -> Option<&mut LayoutBlock> {
        self.blocks_mut().find(|b| &b.block_id == block_id)
    }

    pub fn page(&self, page_index: u32) -> Option<&Page> {
        self.pages.iter().find(|p| p.page_index == page_index)
    }

    /// Checks page bounds and in-page reading order.
    pub fn check_invariants(&self) -> Result<()> {
        if self.page_count == 0 || self.pages.len() != self.page_count as usize {
            return Err(Error::Invalid(format!(
                "document {} declares {} pages but holds {}",
                self.document_id,
                self.page_count,
                self.pages.len()
            )));
        }
        for page in &self.pages {
            for block in &page.blocks {
                if block.page_index() >= self.page_count || block.page_index() != page.page_index {
                    return Err(Error::Invalid(format!("block {} is on the wrong page", block.block_id)));
                }
                block.bbox.validate()?;
            }
            if page.blocks.windows(2).any(|w| reading_order(&w[0], &w[1]) == Ordering::Greater) {
                return Err(Error::Invalid(format!("page {} blocks are out of reading order", page.page_index)));
            }
        }
        Ok(())
    }
}
