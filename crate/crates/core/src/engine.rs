//! The engine owns every store and adapter and is the single entry point the
//! CLI and the HTTP service call into. Module operations are implemented as
//! `impl Engine` blocks next to their types.
//!
//! Lock order: session or report, then store, index, initial, then logs.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use chrono::{DateTime, Utc};
use parking_lot::{Mutex, RwLock};

use crate::error::{Error, Result};
use crate::events::EventLog;
use crate::ids::{Clock, IdGenerator, RandomIds, ReportId, SessionId, SystemClock};
use crate::index::{Embedder, ReferenceEmbedder, VectorIndex, DEFAULT_K};
use crate::ingestion::{AdapterSet, PipelineJob};
use crate::llm::{LlmAdapter, MockLlm};
use crate::report::Report;
use crate::retrievers::StrategyRegistry;
use crate::session::ChatSession;
use crate::store::BlockStore;
use crate::validation::EditLog;

#[derive(Debug, Clone)]
pub struct EngineConfig {
    /// Persistence root. `None` keeps everything in memory.
    pub data_dir: Option<PathBuf>,
    pub k: usize,
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self { data_dir: None, k: DEFAULT_K }
    }
}

pub(crate) struct DataLayout {
    root: PathBuf,
}

impl DataLayout {
    pub(crate) fn blocks(&self) -> PathBuf {
        self.root.join("blocks")
    }
    pub(crate) fn initial(&self) -> PathBuf {
        self.root.join("initial")
    }
    pub(crate) fn index(&self) -> PathBuf {
        self.root.join("index.json")
    }
    pub(crate) fn edits(&self) -> PathBuf {
        self.root.join("edits.jsonl")
    }
    pub(crate) fn events(&self) -> PathBuf {
        self.root.join("events.jsonl")
    }
    pub(crate) fn sessions(&self) -> PathBuf {
        self.root.join("sessions")
    }
    pub(crate) fn reports(&self) -> PathBuf {
        self.root.join("reports")
    }
    pub(crate) fn sources(&self) -> PathBuf {
        self.root.join("sources")
    }
    pub(crate) fn pages(&self) -> PathBuf {
        self.root.join("pages")
    }
}

pub struct Engine {
    pub(crate) config: EngineConfig,
    pub(crate) store: RwLock<BlockStore>,
    /// Pipeline output before review; the base for edit replay.
    pub(crate) initial: RwLock<BlockStore>,
    pub(crate) index: RwLock<VectorIndex>,
    pub(crate) edits: Mutex<EditLog>,
    pub(crate) events: Mutex<EventLog>,
    pub(crate) sessions: RwLock<BTreeMap<SessionId, Arc<Mutex<ChatSession>>>>,
    pub(crate) reports: RwLock<BTreeMap<ReportId, Arc<Mutex<Report>>>>,
    pub(crate) jobs: RwLock<BTreeMap<String, PipelineJob>>,
    pub(crate) embedder: Arc<dyn Embedder>,
    pub(crate) llm: Arc<dyn LlmAdapter>,
    pub(crate) adapters: AdapterSet,
    pub(crate) strategies: StrategyRegistry,
    pub(crate) clock: Arc<dyn Clock>,
    pub(crate) ids: Arc<dyn IdGenerator>,
}

pub struct EngineBuilder {
    config: EngineConfig,
    embedder: Arc<dyn Embedder>,
    llm: Arc<dyn LlmAdapter>,
    adapters: AdapterSet,
    strategies: StrategyRegistry,
    clock: Arc<dyn Clock>,
    ids: Arc<dyn IdGenerator>,
    seed: Option<(BlockStore, VectorIndex)>,
}

impl EngineBuilder {
    pub fn data_dir(mut self, dir: impl Into<PathBuf>) -> Self {
        self.config.data_dir = Some(dir.into());
        self
    }

    pub fn config(mut self, config: EngineConfig) -> Self {
        self.config = config;
        self
    }

    pub fn k(mut self, k: usize) -> Self {
        self.config.k = k;
        self
    }

    pub fn embedder(mut self, embedder: Arc<dyn Embedder>) -> Self {
        self.embedder = embedder;
        self
    }

    pub fn llm(mut self, llm: Arc<dyn LlmAdapter>) -> Self {
        self.llm = llm;
        self
    }

    pub fn adapters(mut self, adapters: AdapterSet) -> Self {
        self.adapters = adapters;
        self
    }

    pub fn strategies(mut self, strategies: StrategyRegistry) -> Self {
        self.strategies = strategies;
        self
    }

    pub fn clock(mut self, clock: Arc<dyn Clock>) -> Self {
        self.clock = clock;
        self
    }

    pub fn ids(mut self, ids: Arc<dyn IdGenerator>) -> Self {
        self.ids = ids;
        self
    }

    /// Starts from an already ingested block store and index instead of disk.
    pub fn seeded(mut self, store: BlockStore, index: VectorIndex) -> Self {
        self.seed = Some((store, index));
        self
    }

    pub fn build(self) -> Result<Engine> {
        if self.config.k == 0 {
            return Err(Error::Invalid("k must be at least 1".into()));
        }
        let layout = self.config.data_dir.as_ref().map(|root| DataLayout { root: root.clone() });
        let (store, initial, index) = match (self.seed, &layout) {
            (Some((store, index)), _) => (store.clone(), store, index),
            (None, Some(layout)) => {
                let store = BlockStore::load_dir(&layout.blocks())?;
                let initial = BlockStore::load_dir(&layout.initial())?;
                let index = if layout.index().exists() {
                    VectorIndex::load(&layout.index(), self.embedder.name())?
                } else {
                    VectorIndex::for_embedder(self.embedder.as_ref())
                };
                (store, initial, index)
            }
            (None, None) => (BlockStore::new(), BlockStore::new(), VectorIndex::for_embedder(self.embedder.as_ref())),
        };
        if index.embedder_name != self.embedder.name() {
            return Err(Error::EmbedderMismatch {
                expected: self.embedder.name().to_owned(),
                found: index.embedder_name.clone(),
            });
        }
        let (edits, events, sessions, reports) = match &layout {
            Some(layout) => (
                EditLog::open(&layout.edits())?,
                EventLog::open(&layout.events())?,
                crate::session::load_sessions(&layout.sessions())?,
                crate::report::load_reports(&layout.reports())?,
            ),
            None => (EditLog::in_memory(), EventLog::in_memory(), BTreeMap::new(), BTreeMap::new()),
        };
        let engine = Engine {
            config: self.config,
            store: RwLock::new(store),
            initial: RwLock::new(initial),
            index: RwLock::new(index),
            edits: Mutex::new(edits),
            events: Mutex::new(events),
            sessions: RwLock::new(sessions.into_iter().map(|(k, v)| (k, Arc::new(Mutex::new(v)))).collect()),
            reports: RwLock::new(reports.into_iter().map(|(k, v)| (k, Arc::new(Mutex::new(v)))).collect()),
            jobs: RwLock::new(BTreeMap::new()),
            embedder: self.embedder,
            llm: self.llm,
            adapters: self.adapters,
            strategies: self.strategies,
            clock: self.clock,
            ids: self.ids,
        };
        engine.verify_sessions()?;
        Ok(engine)
    }
}

impl Engine {
    pub fn builder() -> EngineBuilder {
        EngineBuilder {
            config: EngineConfig::default(),
            embedder: Arc::new(ReferenceEmbedder),
            llm: Arc::new(MockLlm::echo()),
            adapters: AdapterSet::reference(),
            strategies: StrategyRegistry::standard(),
            clock: Arc::new(SystemClock),
            ids: Arc::new(RandomIds),
            seed: None,
        }
    }

    pub fn k(&self) -> usize {
        self.config.k
    }

    pub fn data_dir(&self) -> Option<&Path> {
        self.config.data_dir.as_deref()
    }

    pub(crate) fn layout(&self) -> Option<DataLayout> {
        self.config.data_dir.as_ref().map(|root| DataLayout { root: root.clone() })
    }

    pub fn now(&self) -> DateTime<Utc> {
        self.clock.now()
    }

    pub fn embedder(&self) -> &dyn Embedder {
        self.embedder.as_ref()
    }

    pub fn strategies(&self) -> &StrategyRegistry {
        &self.strategies
    }

    /// A consistent copy of the block store.
    pub fn store_snapshot(&self) -> BlockStore {
        self.store.read().clone()
    }

    /// A consistent copy of the index.
    pub fn index_snapshot(&self) -> VectorIndex {
        self.index.read().clone()
    }

    /// Runs `f` against the live store and index under read locks.
    pub fn with_corpus<T>(&self, f: impl FnOnce(&BlockStore, &VectorIndex) -> T) -> T {
        let store = self.store.read();
        let index = self.index.read();
        f(&store, &index)
    }

    pub(crate) fn persist_index(&self, index: &VectorIndex) -> Result<()> {
        if let Some(layout) = self.layout() {
            index.save(&layout.index())?;
        }
        Ok(())
    }

    pub(crate) fn persist_document(&self, store: &BlockStore, document_id: &crate::ids::DocumentId) -> Result<()> {
        if let Some(layout) = self.layout() {
            store.save_document(&layout.blocks(), document_id)?;
        }
        Ok(())
    }

    /// Directory holding pre-rendered page rasters, when persisting.
    pub fn pages_dir(&self) -> Option<PathBuf> {
        self.layout().map(|l| l.pages())
    }
}
