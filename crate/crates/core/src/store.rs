//! Block store: one JSON document per source document.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::ids::{BlockId, DocumentId};
use crate::model::{Document, LayoutBlock};

/// Writes through a sibling temp file so readers never see a torn file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let tmp = path.with_extension("tmp");
    let mut file = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    file.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    file.sync_all().map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn append_line(path: &Path, line: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let mut file = fs::OpenOptions::new().create(true).append(true).open(path).map_err(|e| Error::io(path, e))?;
    let mut buf = Vec::with_capacity(line.len() + 1);
    buf.extend_from_slice(line);
    buf.push(b'\n');
    file.write_all(&buf).map_err(|e| Error::io(path, e))
}

/// Reads a JSON Lines file, skipping blank lines. A missing file reads as empty.
pub fn read_json_lines<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let text = match fs::read_to_string(path) {
        Ok(text) => text,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(Error::io(path, e)),
    };
    text.lines().filter(|l| !l.trim().is_empty()).map(|l| serde_json::from_str(l).map_err(Error::from)).collect()
}

#[derive(Debug, Default, Clone, PartialEq)]
pub struct BlockStore {
    documents: BTreeMap<DocumentId, Document>,
    locator: HashMap<BlockId, DocumentId>,
}

impl BlockStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn document_path(dir: &Path, document_id: &DocumentId) -> PathBuf {
        dir.join(format!("{document_id}.json"))
    }

    pub fn load_dir(dir: &Path) -> Result<Self> {
        let mut store = Self::new();
        let entries = match fs::read_dir(dir) {
            Ok(entries) => entries,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(store),
            Err(e) => return Err(Error::io(dir, e)),
        };
        let mut paths: Vec<PathBuf> = entries
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "json"))
            .collect();
        paths.sort();
        for path in paths {
            let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
            store.insert(serde_json::from_slice(&bytes)?);
        }
        Ok(store)
    }

    pub fn to_json(document: &Document) -> Result<Vec<u8>> {
        let mut bytes = serde_json::to_vec_pretty(document)?;
        bytes.push(b'\n');
        Ok(bytes)
    }

    pub fn save_document(&self, dir: &Path, document_id: &DocumentId) -> Result<()> {
        let doc = self.document(document_id)?;
        write_atomic(&Self::document_path(dir, document_id), &Self::to_json(doc)?)
    }

    pub fn insert(&mut self, document: Document) {
        if let Some(old) = self.documents.get(&document.document_id) {
            for block in old.blocks() {
                self.locator.remove(&block.block_id);
            }
        }
        for block in document.blocks() {
            self.locator.insert(block.block_id.clone(), document.document_id.clone());
        }
        self.documents.insert(document.document_id.clone(), document);
    }

    pub fn contains(&self, document_id: &DocumentId) -> bool {
        self.documents.contains_key(document_id)
    }

    pub fn document(&self, document_id: &DocumentId) -> Result<&Document> {
        self.documents.get(document_id).ok_or_else(|| Error::not_found("document", document_id.as_str()))
    }

    pub fn documents(&self) -> impl Iterator<Item = &Document> {
        self.documents.values()
    }

    pub fn block(&self, block_id: &BlockId) -> Result<&LayoutBlock> {
        self.locator
            .get(block_id)
            .and_then(|doc| self.documents.get(doc))
            .and_then(|doc| doc.block(block_id))
            .ok_or_else(|| Error::not_found("block", block_id.as_str()))
    }

    /// Replaces an existing block in place, or adds a new one to its page in reading order.
    pub fn put_block(&mut self, block: LayoutBlock) -> Result<()> {
        let doc = self
            .documents
            .get_mut(&block.document_id)
            .ok_or_else(|| Error::not_found("document", block.document_id.as_str()))?;
        let page_index = block.page_index();
        if let Some(current) = doc.block(&block.block_id) {
            if current.page_index() != page_index {
                return Err(Error::Invalid("blocks cannot move between pages".into()));
            }
        }
        let page = doc
            .pages
            .iter_mut()
            .find(|p| p.page_index == page_index)
            .ok_or_else(|| Error::Invalid(format!("page {page_index} out of range")))?;
        match page.blocks.iter_mut().find(|b| b.block_id == block.block_id) {
            Some(slot) => *slot = block,
            None => {
                self.locator.insert(block.block_id.clone(), block.document_id.clone());
                page.blocks.push(block);
            }
        }
        // a bounds edit can move a block within its page
        page.sort_blocks();
        Ok(())
    }
}
