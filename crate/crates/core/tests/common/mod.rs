#![allow(dead_code)]

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use blockrag_core::ids::{SequentialIds, SteppingClock};
use blockrag_core::index::{Embedder, VectorIndex};
use blockrag_core::ingestion::{AdapterConfig, AdapterSet, PipelineJob};
use blockrag_core::store::BlockStore;
use blockrag_core::{
    BlockId, BlockPayload, BlockType, BoundingBox, Document, DocumentId, Engine, EngineBuilder, LayoutBlock,
    ProcessingState,
};
use blockrag_core::model::Page;

pub const CORPUS: [&str; 3] = ["site-report.pdf", "assay-notes.md", "field-log.txt"];

pub fn fixtures() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("fixtures")
}

pub fn corpus_dir() -> PathBuf {
    fixtures().join("corpus")
}

pub fn corpus_files() -> Vec<PathBuf> {
    CORPUS.iter().map(|n| corpus_dir().join(n)).collect()
}

/// Adapters from `fixtures/adapters.<mode>.toml`.
pub fn adapters(mode: &str) -> AdapterSet {
    let config = AdapterConfig::load(&fixtures().join(format!("adapters.{mode}.toml"))).expect("adapter config");
    AdapterSet::from_config(&config).expect("adapter set")
}

/// Fixed clock and sequential ids so runs compare byte for byte.
pub fn deterministic() -> EngineBuilder {
    Engine::builder().clock(Arc::new(SteppingClock::default())).ids(Arc::new(SequentialIds::default()))
}

pub fn ingest_corpus(engine: &Engine) -> Vec<PipelineJob> {
    corpus_files()
        .iter()
        .map(|path| {
            let job = engine.ingest_path(path).expect("readable fixture");
            assert_eq!(job.stage, ProcessingState::Indexed, "{}: {:?}", job.source_name, job.error_message);
            job
        })
        .collect()
}

pub fn corpus_engine(mode: &str) -> Engine {
    let engine = deterministic().adapters(adapters(mode)).build().unwrap();
    ingest_corpus(&engine);
    engine
}

pub fn persistent_corpus_engine(mode: &str, dir: &Path) -> Engine {
    let engine = deterministic().adapters(adapters(mode)).data_dir(dir).build().unwrap();
    ingest_corpus(&engine);
    engine
}

pub fn document_ids(engine: &Engine) -> Vec<DocumentId> {
    engine.store_snapshot().documents().map(|d| d.document_id.clone()).collect()
}

pub fn live_blocks(engine: &Engine) -> Vec<LayoutBlock> {
    engine.store_snapshot().documents().flat_map(|d| d.blocks().cloned().collect::<Vec<_>>()).filter(|b| !b.tombstoned).collect()
}

pub fn set(ids: &[&str]) -> BTreeSet<BlockId> {
    ids.iter().map(|s| BlockId::new(*s)).collect()
}

/// One-page document holding `blocks` stacked top to bottom.
pub fn synthetic_document(document_id: &str, blocks: &[(BlockType, String)]) -> Document {
    let doc_id = DocumentId::new(document_id);
    let height = 20.0 * blocks.len() as f64 + 40.0;
    let mut page = Page::new(0, 612.0, height, None);
    for (i, (block_type, text)) in blocks.iter().enumerate() {
        let y = 20.0 + 20.0 * i as f64;
        let bbox = BoundingBox::new(0, 20.0, y, 590.0, y + 15.0).unwrap();
        let mut block = LayoutBlock::detected(doc_id.clone(), bbox, *block_type);
        let payload = payload_for(*block_type, text);
        block.text_repr = blockrag_core::model::canonical_text_repr(*block_type, &payload).unwrap();
        block.raw_payload = Some(payload);
        page.blocks.push(block);
    }
    page.sort_blocks();
    Document {
        document_id: doc_id,
        source_name: format!("{document_id}.txt"),
        page_count: 1,
        pages: vec![page],
        processing_state: ProcessingState::Indexed,
    }
}

pub fn payload_for(block_type: BlockType, text: &str) -> BlockPayload {
    use blockrag_core::model::{PayloadKind, TableRecord};
    match block_type.payload_kind() {
        PayloadKind::Text => BlockPayload::text(text),
        PayloadKind::Table => BlockPayload::Table(TableRecord {
            caption: None,
            rows: vec![text.split_whitespace().map(str::to_owned).collect()],
            latex: None,
            html: None,
        }),
        PayloadKind::Formula => BlockPayload::Formula { latex: text.to_owned(), description: String::new() },
        PayloadKind::Figure => BlockPayload::Figure { caption: None, description: text.to_owned() },
    }
}

/// Store and index for a set of synthetic documents.
pub fn seeded(documents: Vec<Document>, embedder: &dyn Embedder) -> (BlockStore, VectorIndex) {
    let mut store = BlockStore::new();
    let mut index = VectorIndex::for_embedder(embedder);
    for doc in documents {
        for block in doc.blocks() {
            if block.is_indexable() {
                index.upsert(block, embedder).unwrap();
            }
        }
        store.insert(doc);
    }
    (store, index)
}

pub mod oracle {
    //! Brute-force references written independently of the library code.

    use std::cmp::Ordering;
    use std::collections::BTreeSet;

    use blockrag_core::index::VectorIndex;
    use blockrag_core::{BlockId, BlockType, DocumentId};

    pub fn cosine(a: &[f32], b: &[f32]) -> f64 {
        let dot: f64 = a.iter().zip(b).map(|(x, y)| f64::from(*x) * f64::from(*y)).fold(0.0, |acc, v| acc + v);
        let na: f64 = a.iter().map(|x| f64::from(*x) * f64::from(*x)).fold(0.0, |acc, v| acc + v);
        let nb: f64 = b.iter().map(|x| f64::from(*x) * f64::from(*x)).fold(0.0, |acc, v| acc + v);
        if na == 0.0 || nb == 0.0 {
            0.0
        } else {
            (dot / (na.sqrt() * nb.sqrt())).clamp(-1.0, 1.0)
        }
    }

    /// Scores every admitted entry, sorts the full list, keeps the first `k`.
    pub fn top_k(
        index: &VectorIndex,
        query: &[f32],
        k: usize,
        block_type: Option<BlockType>,
        corpus: Option<&BTreeSet<DocumentId>>,
    ) -> Vec<(BlockId, f64)> {
        let mut all: Vec<(BlockId, f64)> = index
            .entries()
            .filter(|e| block_type.is_none_or(|t| t == e.block_type))
            .filter(|e| corpus.is_none_or(|c| c.contains(&e.document_id)))
            .map(|e| (e.block_id.clone(), cosine(query, &e.vector)))
            .collect();
        all.sort_by(|a, b| match b.1.partial_cmp(&a.1).unwrap_or(Ordering::Equal) {
            Ordering::Equal => a.0.cmp(&b.0),
            other => other,
        });
        all.truncate(k);
        all
    }

    /// 1-based rank of `id` in the full ranking.
    pub fn rank_of(index: &VectorIndex, query: &[f32], id: &BlockId) -> usize {
        top_k(index, query, usize::MAX, None, None).iter().position(|(b, _)| b == id).expect("id in index") + 1
    }

    pub fn distance(h: &BTreeSet<BlockId>, r: &BTreeSet<BlockId>) -> f64 {
        let mut union: Vec<&BlockId> = h.iter().chain(r.iter()).collect();
        union.sort();
        union.dedup();
        if union.is_empty() {
            return 0.0;
        }
        let common = h.iter().filter(|x| r.contains(*x)).count();
        (union.len() - common) as f64 / union.len() as f64
    }
}

pub mod random {
    use blockrag_core::index::{Embedder, IndexEntry, ReferenceEmbedder, VectorIndex};
    use blockrag_core::{BlockId, BlockType, DocumentId};
    use rand::seq::SliceRandom;
    use rand::Rng;

    pub const VOCAB: [&str; 16] = [
        "zinc", "lead", "skarn", "garnet", "assay", "core", "drill", "hole", "grade", "camp", "road", "survey",
        "sample", "blank", "fault", "marble",
    ];

    pub const TYPES: [BlockType; 5] = [BlockType::Text, BlockType::Title, BlockType::Table, BlockType::Formula, BlockType::Figure];

    /// Short phrase over a small vocabulary, so identical texts (and tied scores) are common.
    pub fn phrase(rng: &mut impl Rng) -> String {
        let n = rng.gen_range(1..=3);
        (0..n).map(|_| *VOCAB.choose(rng).unwrap()).collect::<Vec<_>>().join(" ")
    }

    /// Index of `n` reference-embedded entries spread over a few documents.
    pub fn index(rng: &mut impl Rng, n: usize) -> VectorIndex {
        let embedder = ReferenceEmbedder;
        let mut index = VectorIndex::for_embedder(&embedder);
        for i in 0..n {
            let entry = IndexEntry {
                block_id: BlockId(format!("blk_{:08x}_{i}", rng.gen::<u32>())),
                document_id: DocumentId(format!("doc_{}", rng.gen_range(0..4))),
                block_type: *TYPES.choose(rng).unwrap(),
                vector: embedder.embed(&phrase(rng)).unwrap(),
                revision: 0,
            };
            index.upsert_entry(entry).unwrap();
        }
        index
    }
}
