//! Human review of pipeline output: revisioned, append-only block edits.
//!
//! Every edit carries the snapshot it was made against. An edit applies only
//! if that snapshot (and its revision) still matches the live block, so two
//! reviewers racing on one block cannot overwrite each other.

use std::path::{Path, PathBuf};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use crate::engine::Engine;
use crate::error::{Error, Result};
use crate::ids::{BlockId, DocumentId};
use crate::index::IndexEntry;
use crate::model::{
    block_identity, canonical_text_repr, BlockPayload, BlockType, BoundingBox, Document, LayoutBlock, PayloadKind,
};
use crate::store::{append_line, read_json_lines, BlockStore};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum EditKind {
    Reclassify,
    AdjustBounds,
    AddBlock,
    RemoveBlock,
    CorrectText,
    CorrectTable,
    CorrectFigure,
    CorrectFormula,
}

impl EditKind {
    fn corrected_payload(&self) -> Option<PayloadKind> {
        match self {
            EditKind::CorrectText => Some(PayloadKind::Text),
            EditKind::CorrectTable => Some(PayloadKind::Table),
            EditKind::CorrectFigure => Some(PayloadKind::Figure),
            EditKind::CorrectFormula => Some(PayloadKind::Formula),
            _ => None,
        }
    }
}

/// The reviewable state of a block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockSnapshot {
    pub bbox: BoundingBox,
    pub block_type: BlockType,
    pub raw_payload: Option<BlockPayload>,
    #[serde(default)]
    pub tombstoned: bool,
}

impl BlockSnapshot {
    pub fn of(block: &LayoutBlock) -> Self {
        Self {
            bbox: block.bbox,
            block_type: block.block_type,
            raw_payload: block.raw_payload.clone(),
            tombstoned: block.tombstoned,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationEdit {
    pub edit_id: String,
    pub block_id: BlockId,
    pub document_id: DocumentId,
    pub editor_id: String,
    pub edit_kind: EditKind,
    /// Revision of the block the edit was made against; 0 for `AddBlock`.
    pub base_revision: u64,
    /// Absent only for `AddBlock`.
    pub before: Option<BlockSnapshot>,
    pub after: BlockSnapshot,
    pub timestamp: DateTime<Utc>,
}

/// Id an `AddBlock` edit must carry.
pub fn minted_id(document_id: &DocumentId, after: &BlockSnapshot) -> BlockId {
    block_identity(document_id, after.bbox.page_index, &after.bbox, after.block_type)
}

fn check_only(kind: EditKind, before: &BlockSnapshot, after: &BlockSnapshot, allowed: &[&str]) -> Result<()> {
    let changed = [
        ("bbox", before.bbox != after.bbox),
        ("block_type", before.block_type != after.block_type),
        ("raw_payload", before.raw_payload != after.raw_payload),
        ("tombstoned", before.tombstoned != after.tombstoned),
    ];
    for (field, differs) in changed {
        if differs && !allowed.contains(&field) {
            return Err(Error::Invalid(format!("{kind:?} may not change {field}")));
        }
    }
    Ok(())
}

fn check_payload(block_type: BlockType, payload: Option<&BlockPayload>) -> Result<String> {
    match payload {
        Some(payload) => canonical_text_repr(block_type, payload),
        None => Ok(String::new()),
    }
}

/// Applies one edit to the current state of its block (`None` when the block
/// does not exist yet). Pure: the store is not touched.
pub fn apply_to_block(current: Option<&LayoutBlock>, edit: &ValidationEdit) -> Result<LayoutBlock> {
    let after = &edit.after;
    after.bbox.validate()?;

    if edit.edit_kind == EditKind::AddBlock {
        if let Some(existing) = current {
            return Err(Error::Conflict(format!("block {} already exists", existing.block_id)));
        }
        if edit.before.is_some() || edit.base_revision != 0 || after.tombstoned {
            return Err(Error::Invalid("AddBlock takes no before-snapshot and starts live".into()));
        }
        if edit.block_id != minted_id(&edit.document_id, after) {
            return Err(Error::Invalid("AddBlock block_id must be the minted content id".into()));
        }
        let text_repr = check_payload(after.block_type, after.raw_payload.as_ref())?;
        return Ok(LayoutBlock {
            block_id: edit.block_id.clone(),
            document_id: edit.document_id.clone(),
            bbox: after.bbox,
            block_type: after.block_type,
            needs_validation: text_repr.trim().is_empty(),
            raw_payload: after.raw_payload.clone(),
            text_repr,
            revision: 1,
            tombstoned: false,
        });
    }

    let current = current.ok_or_else(|| Error::not_found("block", edit.block_id.as_str()))?;
    let before = edit.before.as_ref().ok_or_else(|| Error::Invalid(format!("{:?} needs a before-snapshot", edit.edit_kind)))?;
    if edit.base_revision != current.revision || *before != BlockSnapshot::of(current) {
        return Err(Error::Conflict(format!(
            "block {} is at revision {}, edit was made against revision {}",
            current.block_id, current.revision, edit.base_revision
        )));
    }
    if current.tombstoned {
        return Err(Error::Invalid(format!("block {} has been removed", current.block_id)));
    }

    match edit.edit_kind {
        EditKind::Reclassify => {
            check_only(edit.edit_kind, before, after, &["block_type", "raw_payload"])?;
            if before.block_type == after.block_type {
                return Err(Error::Invalid("Reclassify must change the block type".into()));
            }
        }
        EditKind::AdjustBounds => {
            check_only(edit.edit_kind, before, after, &["bbox"])?;
            if before.bbox.page_index != after.bbox.page_index {
                return Err(Error::Invalid("AdjustBounds cannot move a block to another page".into()));
            }
        }
        EditKind::RemoveBlock => {
            check_only(edit.edit_kind, before, after, &["tombstoned"])?;
            if !after.tombstoned {
                return Err(Error::Invalid("RemoveBlock must tombstone the block".into()));
            }
        }
        kind => {
            check_only(kind, before, after, &["raw_payload"])?;
            let expected = kind.corrected_payload().expect("correction kinds carry a payload kind");
            match &after.raw_payload {
                Some(p) if p.kind() == expected => {}
                _ => return Err(Error::Schema(format!("{kind:?} requires a {expected:?} payload"))),
            }
        }
    }

    let text_repr = check_payload(after.block_type, after.raw_payload.as_ref())?;
    Ok(LayoutBlock {
        block_id: current.block_id.clone(),
        document_id: current.document_id.clone(),
        bbox: after.bbox,
        block_type: after.block_type,
        raw_payload: after.raw_payload.clone(),
        needs_validation: !after.tombstoned && text_repr.trim().is_empty(),
        text_repr,
        revision: current.revision + 1,
        tombstoned: after.tombstoned,
    })
}

/// Rebuilds a block from its initial state and its full edit sequence.
pub fn replay(initial: Option<&LayoutBlock>, edits: &[ValidationEdit]) -> Result<Option<LayoutBlock>> {
    let mut state = initial.cloned();
    for edit in edits {
        state = Some(apply_to_block(state.as_ref(), edit)?);
    }
    Ok(state)
}

/// Append-only edit log, mirrored to a JSON Lines file when a path is set.
#[derive(Debug, Default)]
pub struct EditLog {
    path: Option<PathBuf>,
    edits: Vec<ValidationEdit>,
}

impl EditLog {
    pub fn in_memory() -> Self {
        Self::default()
    }

    pub fn open(path: &Path) -> Result<Self> {
        Ok(Self { path: Some(path.to_owned()), edits: read_json_lines(path)? })
    }

    pub fn append(&mut self, edit: ValidationEdit) -> Result<()> {
        if let Some(path) = &self.path {
            append_line(path, &serde_json::to_vec(&edit)?)?;
        }
        self.edits.push(edit);
        Ok(())
    }

    pub fn all(&self) -> &[ValidationEdit] {
        &self.edits
    }

    pub fn for_block(&self, block_id: &BlockId) -> Vec<ValidationEdit> {
        self.edits.iter().filter(|e| &e.block_id == block_id).cloned().collect()
    }

    /// Accepted corrections as training-ready JSON Lines.
    pub fn export_corrections(&self) -> Result<Vec<u8>> {
        #[derive(Serialize)]
        struct Correction<'a> {
            block_id: &'a BlockId,
            edit_kind: EditKind,
            before: &'a Option<BlockSnapshot>,
            after: &'a BlockSnapshot,
        }
        let mut out = Vec::new();
        for e in &self.edits {
            serde_json::to_writer(
                &mut out,
                &Correction { block_id: &e.block_id, edit_kind: e.edit_kind, before: &e.before, after: &e.after },
            )?;
            out.push(b'\n');
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PendingFilter {
    NeedsValidation,
    BlockType(BlockType),
    All,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PendingPage {
    pub blocks: Vec<LayoutBlock>,
    pub next_cursor: Option<usize>,
}

/// Live blocks of a document matching `filter`, in page then reading order.
/// `cursor` is the offset returned by the previous page.
pub fn list_pending(
    store: &BlockStore,
    document_id: &DocumentId,
    filter: PendingFilter,
    cursor: usize,
    page_size: usize,
) -> Result<PendingPage> {
    if page_size == 0 {
        return Err(Error::Invalid("page size must be at least 1".into()));
    }
    let doc = store.document(document_id)?;
    let matching: Vec<&LayoutBlock> = doc
        .blocks()
        .filter(|b| !b.tombstoned)
        .filter(|b| match filter {
            PendingFilter::NeedsValidation => b.needs_validation,
            PendingFilter::BlockType(t) => b.block_type == t,
            PendingFilter::All => true,
        })
        .collect();
    let end = (cursor + page_size).min(matching.len());
    let blocks = matching.get(cursor..end).unwrap_or_default().iter().map(|b| (*b).clone()).collect();
    Ok(PendingPage { blocks, next_cursor: (end < matching.len()).then_some(end) })
}

/// An edit as submitted by a reviewer; the engine assigns id and time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EditRequest {
    pub editor_id: String,
    pub edit_kind: EditKind,
    #[serde(default)]
    pub base_revision: u64,
    #[serde(default)]
    pub before: Option<BlockSnapshot>,
    pub after: BlockSnapshot,
}

impl Engine {
    pub fn document(&self, document_id: &DocumentId) -> Result<Document> {
        self.store.read().document(document_id).cloned()
    }

    pub fn block(&self, block_id: &BlockId) -> Result<LayoutBlock> {
        self.store.read().block(block_id).cloned()
    }

    /// Blocks on one page in reading order, removed blocks included.
    pub fn page_blocks(&self, document_id: &DocumentId, page_index: u32) -> Result<Vec<LayoutBlock>> {
        let store = self.store.read();
        let doc = store.document(document_id)?;
        let page = doc
            .page(page_index)
            .ok_or_else(|| Error::not_found("page", format!("{document_id}/{page_index}")))?;
        Ok(page.blocks.clone())
    }

    pub fn pending(&self, document_id: &DocumentId, filter: PendingFilter, cursor: usize, page_size: usize) -> Result<PendingPage> {
        list_pending(&self.store.read(), document_id, filter, cursor, page_size)
    }

    /// Applies a correction to an existing block.
    pub fn edit_block(&self, block_id: &BlockId, request: EditRequest) -> Result<LayoutBlock> {
        if request.edit_kind == EditKind::AddBlock {
            return Err(Error::Invalid("new blocks are added to a document, not to a block".into()));
        }
        let document_id = self.store.read().block(block_id)?.document_id.clone();
        self.commit_edit(block_id.clone(), document_id, request)
    }

    /// Adds a block the detector missed. Its id is minted from the content.
    pub fn add_block(&self, document_id: &DocumentId, request: EditRequest) -> Result<LayoutBlock> {
        if request.edit_kind != EditKind::AddBlock {
            return Err(Error::Invalid(format!("{:?} edits target an existing block", request.edit_kind)));
        }
        let block_id = minted_id(document_id, &request.after);
        self.commit_edit(block_id, document_id.clone(), request)
    }

    fn commit_edit(&self, block_id: BlockId, document_id: DocumentId, request: EditRequest) -> Result<LayoutBlock> {
        let edit = ValidationEdit {
            edit_id: self.ids.next_id("edit"),
            block_id,
            document_id,
            editor_id: request.editor_id,
            edit_kind: request.edit_kind,
            base_revision: request.base_revision,
            before: request.before,
            after: request.after,
            timestamp: self.now(),
        };
        let mut store = self.store.write();
        let page_count = store.document(&edit.document_id)?.page_count;
        let current = store.block(&edit.block_id).ok().cloned();
        let block = apply_to_block(current.as_ref(), &edit)?;
        if block.page_index() >= page_count {
            return Err(Error::Invalid(format!("page {} out of range", block.page_index())));
        }
        let vector = if block.is_indexable() { Some(self.embedder.embed(&block.text_repr)?) } else { None };
        let mut index = self.index.write();
        self.edits.lock().append(edit)?;
        store.put_block(block.clone())?;
        match vector {
            Some(vector) => index.upsert_entry(IndexEntry {
                block_id: block.block_id.clone(),
                document_id: block.document_id.clone(),
                block_type: block.block_type,
                vector,
                revision: block.revision,
            })?,
            None => {
                index.remove(&block.block_id);
            }
        }
        self.persist_document(&store, &block.document_id)?;
        self.persist_index(&index)?;
        Ok(block)
    }

    pub fn edits(&self) -> Vec<ValidationEdit> {
        self.edits.lock().all().to_vec()
    }

    pub fn block_history(&self, block_id: &BlockId) -> Vec<ValidationEdit> {
        self.edits.lock().for_block(block_id)
    }

    pub fn export_corrections(&self) -> Result<Vec<u8>> {
        self.edits.lock().export_corrections()
    }

    /// The document as the pipeline produced it, before any review.
    pub fn initial_document(&self, document_id: &DocumentId) -> Result<Document> {
        self.initial.read().document(document_id).cloned()
    }

    /// Rebuilds a document from its pipeline output and the edit log.
    pub fn replay_document(&self, document_id: &DocumentId) -> Result<Document> {
        let mut scratch = BlockStore::new();
        scratch.insert(self.initial_document(document_id)?);
        let edits: Vec<ValidationEdit> =
            self.edits.lock().all().iter().filter(|e| &e.document_id == document_id).cloned().collect();
        for edit in &edits {
            let current = scratch.block(&edit.block_id).ok().cloned();
            scratch.put_block(apply_to_block(current.as_ref(), edit)?)?;
        }
        scratch.document(document_id).cloned()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Document, Page, ProcessingState, TableRecord};
    use chrono::TimeZone;

    fn text_block(text: &str, y: f64) -> LayoutBlock {
        let bbox = BoundingBox::new(0, 72.0, y, 540.0, y + 12.0).unwrap();
        let mut b = LayoutBlock::detected("doc".into(), bbox, BlockType::Text);
        b.raw_payload = Some(BlockPayload::text(text));
        b.text_repr = text.into();
        b
    }

    fn edit(block: &LayoutBlock, kind: EditKind, after: BlockSnapshot) -> ValidationEdit {
        ValidationEdit {
            edit_id: "e1".into(),
            block_id: block.block_id.clone(),
            document_id: block.document_id.clone(),
            editor_id: "rev".into(),
            edit_kind: kind,
            base_revision: block.revision,
            before: Some(BlockSnapshot::of(block)),
            after,
            timestamp: Utc.with_ymd_and_hms(2025, 1, 1, 0, 0, 0).unwrap(),
        }
    }

    #[test]
    fn correct_text_bumps_revision_and_repr() {
        let b = text_block("helo", 10.0);
        let mut after = BlockSnapshot::of(&b);
        after.raw_payload = Some(BlockPayload::text("hello"));
        let out = apply_to_block(Some(&b), &edit(&b, EditKind::CorrectText, after)).unwrap();
        assert_eq!(out.revision, 1);
        assert_eq!(out.text_repr, "hello");
    }

    #[test]
    fn reclassify_without_payload_migration_is_schema_violation() {
        let bbox = BoundingBox::new(0, 72.0, 10.0, 540.0, 200.0).unwrap();
        let mut fig = LayoutBlock::detected("doc".into(), bbox, BlockType::Figure);
        fig.raw_payload = Some(BlockPayload::Figure { caption: None, description: "map".into() });
        fig.text_repr = "map".into();
        let mut after = BlockSnapshot::of(&fig);
        after.block_type = BlockType::Table;
        let err = apply_to_block(Some(&fig), &edit(&fig, EditKind::Reclassify, after.clone())).unwrap_err();
        assert!(matches!(err, Error::Schema(_)));

        after.raw_payload = Some(BlockPayload::Table(TableRecord { rows: vec![vec!["a".into()]], ..Default::default() }));
        let ok = apply_to_block(Some(&fig), &edit(&fig, EditKind::Reclassify, after)).unwrap();
        assert_eq!(ok.block_type, BlockType::Table);
        assert_eq!(ok.revision, 1);
    }

    #[test]
    fn stale_snapshot_conflicts() {
        let b = text_block("helo", 10.0);
        let mut after = BlockSnapshot::of(&b);
        after.raw_payload = Some(BlockPayload::text("hello"));
        let first = edit(&b, EditKind::CorrectText, after.clone());
        let updated = apply_to_block(Some(&b), &first).unwrap();
        after.raw_payload = Some(BlockPayload::text("hullo"));
        let second = edit(&b, EditKind::CorrectText, after);
        assert!(matches!(apply_to_block(Some(&updated), &second), Err(Error::Conflict(_))));
    }

    #[test]
    fn kind_may_only_touch_its_fields() {
        let b = text_block("x", 10.0);
        let mut after = BlockSnapshot::of(&b);
        after.bbox.x1 = 500.0;
        after.raw_payload = Some(BlockPayload::text("y"));
        assert!(matches!(apply_to_block(Some(&b), &edit(&b, EditKind::CorrectText, after)), Err(Error::Invalid(_))));
    }

    #[test]
    fn remove_tombstones_and_add_mints() {
        let b = text_block("x", 10.0);
        let mut after = BlockSnapshot::of(&b);
        after.tombstoned = true;
        let removed = apply_to_block(Some(&b), &edit(&b, EditKind::RemoveBlock, after)).unwrap();
        assert!(removed.tombstoned && !removed.is_indexable());

        let snap = BlockSnapshot {
            bbox: BoundingBox::new(0, 72.0, 300.0, 300.0, 320.0).unwrap(),
            block_type: BlockType::Caption,
            raw_payload: Some(BlockPayload::text("Figure 1")),
            tombstoned: false,
        };
        let add = ValidationEdit {
            block_id: minted_id(&"doc".into(), &snap),
            edit_kind: EditKind::AddBlock,
            base_revision: 0,
            before: None,
            after: snap,
            ..edit(&b, EditKind::AddBlock, BlockSnapshot::of(&b))
        };
        let added = apply_to_block(None, &add).unwrap();
        assert_eq!(added.revision, 1);
        assert_eq!(added.text_repr, "Figure 1");
        assert!(matches!(apply_to_block(Some(&added), &add), Err(Error::Conflict(_))));
    }

    #[test]
    fn replay_reproduces_state() {
        let b0 = text_block("helo", 10.0);
        let mut after = BlockSnapshot::of(&b0);
        after.raw_payload = Some(BlockPayload::text("hello"));
        let e1 = edit(&b0, EditKind::CorrectText, after);
        let b1 = apply_to_block(Some(&b0), &e1).unwrap();
        let mut after = BlockSnapshot::of(&b1);
        after.bbox.y1 += 4.0;
        let e2 = edit(&b1, EditKind::AdjustBounds, after);
        let b2 = apply_to_block(Some(&b1), &e2).unwrap();
        assert_eq!(replay(Some(&b0), &[e1, e2]).unwrap().unwrap(), b2);
    }

    fn store_with(blocks: Vec<LayoutBlock>) -> BlockStore {
        let mut page = Page::new(0, 612.0, 792.0, None);
        page.blocks = blocks;
        page.sort_blocks();
        let mut store = BlockStore::new();
        store.insert(Document {
            document_id: "doc".into(),
            source_name: "doc.txt".into(),
            page_count: 1,
            pages: vec![page],
            processing_state: ProcessingState::Indexed,
        });
        store
    }

    #[test]
    fn pending_filters() {
        let mut a = text_block("a", 10.0);
        a.needs_validation = true;
        let b = text_block("b", 30.0);
        let mut c = text_block("c", 50.0);
        c.needs_validation = true;
        let store = store_with(vec![a.clone(), b, c.clone()]);
        let page = list_pending(&store, &"doc".into(), PendingFilter::NeedsValidation, 0, 10).unwrap();
        assert_eq!(page.blocks.iter().map(|b| &b.block_id).collect::<Vec<_>>(), vec![&a.block_id, &c.block_id]);
        let tables = list_pending(&store, &"doc".into(), PendingFilter::BlockType(BlockType::Table), 0, 10).unwrap();
        assert!(tables.blocks.is_empty());
        assert!(matches!(list_pending(&store, &"nope".into(), PendingFilter::All, 0, 10), Err(Error::NotFound { .. })));
    }

    #[test]
    fn pagination_partitions_the_listing() {
        let blocks: Vec<_> = (0..3).map(|i| text_block(&format!("t{i}"), 10.0 + 20.0 * i as f64)).collect();
        let store = store_with(blocks.clone());
        let mut seen = Vec::new();
        let mut cursor = Some(0);
        let mut pages = 0;
        while let Some(at) = cursor {
            let page = list_pending(&store, &"doc".into(), PendingFilter::All, at, 1).unwrap();
            assert_eq!(page.blocks.len(), 1);
            seen.extend(page.blocks.into_iter().map(|b| b.block_id));
            cursor = page.next_cursor;
            pages += 1;
        }
        assert_eq!(pages, 3);
        let mut expected: Vec<_> = blocks.into_iter().map(|b| b.block_id).collect();
        let mut sorted_seen = seen.clone();
        sorted_seen.sort();
        sorted_seen.dedup();
        expected.sort();
        assert_eq!(sorted_seen, expected);
        assert_eq!(seen.len(), 3);
    }
}
