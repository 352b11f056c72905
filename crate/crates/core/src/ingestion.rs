//! Document processing: normalization, layout detection, per-type extraction
//! and the job that drives them into the index.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use chrono::{DateTime, Utc};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::engine::Engine;
use crate::error::{Error, Result};
use crate::ids::DocumentId;
use crate::model::{
    canonical_text_repr, BlockPayload, BlockType, BoundingBox, Document, LayoutBlock, Page, ProcessingState,
    TableRecord,
};
use crate::pdf::{self, PageSpec, TextLine, TextRun};
use crate::store::write_atomic;

pub const LINES_PER_PAGE: usize = 60;
pub const SYNTHETIC_PAGE_WIDTH: f64 = 612.0;
pub const SYNTHETIC_PAGE_HEIGHT: f64 = 792.0;
const SYNTHETIC_MARGIN: f64 = 56.0;
const SYNTHETIC_FONT_SIZE: f64 = 9.0;
const SYNTHETIC_LEADING: f64 = 11.0;
/// A vertical gap larger than this fraction of the line height starts a new paragraph.
pub const PARAGRAPH_GAP: f64 = 0.6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SourceFormat {
    Pdf,
    Txt,
    Md,
}

impl SourceFormat {
    pub fn from_path(path: &Path) -> Result<Self> {
        let ext = path.extension().and_then(|e| e.to_str()).unwrap_or_default();
        ext.parse()
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            SourceFormat::Pdf => "pdf",
            SourceFormat::Txt => "txt",
            SourceFormat::Md => "md",
        }
    }
}

impl std::str::FromStr for SourceFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "pdf" => Ok(SourceFormat::Pdf),
            "txt" | "text" => Ok(SourceFormat::Txt),
            "md" | "markdown" => Ok(SourceFormat::Md),
            "doc" | "docx" | "xls" | "xlsx" | "ppt" | "pptx" | "odt" | "rtf" => {
                Err(Error::Invalid(format!("office format {s:?} is not converted; export it to PDF first")))
            }
            other => Err(Error::Invalid(format!("unsupported source format {other:?}; expected pdf, txt or md"))),
        }
    }
}

/// A normalized document plus what later stages need but the store does not keep.
#[derive(Debug, Clone)]
pub struct NormalizedSource {
    pub document: Document,
    pub pdf: Vec<u8>,
    /// Text lines per page, top-left coordinates.
    pub lines: Vec<Vec<TextLine>>,
}

pub fn document_id_for(bytes: &[u8], format: SourceFormat) -> DocumentId {
    let mut hasher = Sha256::new();
    hasher.update(format.as_str().as_bytes());
    hasher.update([0x1f]);
    hasher.update(bytes);
    DocumentId(format!("doc_{}", hex::encode(&hasher.finalize()[..16])))
}

fn paginate_text(text: &str) -> Vec<PageSpec> {
    let lines: Vec<&str> = text.lines().collect();
    lines
        .chunks(LINES_PER_PAGE)
        .map(|chunk| PageSpec {
            width: SYNTHETIC_PAGE_WIDTH,
            height: SYNTHETIC_PAGE_HEIGHT,
            runs: chunk
                .iter()
                .enumerate()
                .filter(|(_, l)| !l.trim().is_empty())
                .map(|(i, l)| TextRun {
                    x: SYNTHETIC_MARGIN,
                    baseline: SYNTHETIC_MARGIN + SYNTHETIC_LEADING * (i + 1) as f64,
                    size: SYNTHETIC_FONT_SIZE,
                    text: l.trim_end().replace('\t', "    "),
                })
                .collect(),
        })
        .collect()
}

/// Splits a page's lines into paragraphs at vertical gaps.
pub fn paragraphs(lines: &[TextLine]) -> Vec<&[TextLine]> {
    let mut out = Vec::new();
    let mut start = 0;
    for i in 1..=lines.len() {
        let split = i == lines.len() || {
            let (prev, next) = (&lines[i - 1], &lines[i]);
            next.y0 - prev.y1 > PARAGRAPH_GAP * (prev.y1 - prev.y0)
        };
        if split {
            if i > start {
                out.push(&lines[start..i]);
            }
            start = i;
        }
    }
    out
}

fn text_layer(lines: &[TextLine]) -> Option<String> {
    let paras: Vec<String> = paragraphs(lines)
        .iter()
        .map(|p| p.iter().map(|l| l.text.as_str()).collect::<Vec<_>>().join("\n"))
        .collect();
    (!paras.is_empty()).then(|| paras.join("\n\n"))
}

/// Brings a source file into PDF-backed form. Text formats become synthetic
/// single-column pages of `LINES_PER_PAGE` lines.
pub fn normalize(source_name: &str, bytes: &[u8], format: SourceFormat) -> Result<NormalizedSource> {
    if bytes.iter().all(u8::is_ascii_whitespace) {
        return Err(Error::EmptyDocument);
    }
    let pdf_bytes = match format {
        SourceFormat::Pdf => bytes.to_vec(),
        SourceFormat::Txt | SourceFormat::Md => {
            let text = std::str::from_utf8(bytes)
                .map_err(|e| Error::Format { format: format.as_str().into(), message: e.to_string() })?;
            pdf::write(&paginate_text(text))
        }
    };
    let pages = pdf::read(&pdf_bytes)?;
    if pages.is_empty() {
        return Err(Error::EmptyDocument);
    }
    let document_id = document_id_for(bytes, format);
    let mut doc_pages = Vec::with_capacity(pages.len());
    let mut lines = Vec::with_capacity(pages.len());
    for (i, page) in pages.into_iter().enumerate() {
        doc_pages.push(Page::new(i as u32, page.width, page.height, text_layer(&page.lines)));
        lines.push(page.lines);
    }
    let document = Document {
        document_id,
        source_name: source_name.to_owned(),
        page_count: doc_pages.len() as u32,
        pages: doc_pages,
        processing_state: ProcessingState::Normalized,
    };
    Ok(NormalizedSource { document, pdf: pdf_bytes, lines })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum AdapterKind {
    LayoutDetector,
    Ocr,
    TableExtractor,
    FormulaExtractor,
    FigureDescriber,
}

impl AdapterKind {
    pub const ALL: [AdapterKind; 5] = [
        AdapterKind::LayoutDetector,
        AdapterKind::Ocr,
        AdapterKind::TableExtractor,
        AdapterKind::FormulaExtractor,
        AdapterKind::FigureDescriber,
    ];

    /// The extractor responsible for a block type.
    pub fn for_block(block_type: BlockType) -> Self {
        match block_type {
            BlockType::Table => AdapterKind::TableExtractor,
            BlockType::Formula => AdapterKind::FormulaExtractor,
            BlockType::Figure => AdapterKind::FigureDescriber,
            BlockType::Title | BlockType::Text | BlockType::Caption | BlockType::Other => AdapterKind::Ocr,
        }
    }

    pub fn config_key(&self) -> &'static str {
        match self {
            AdapterKind::LayoutDetector => "layout_detector",
            AdapterKind::Ocr => "ocr",
            AdapterKind::TableExtractor => "table_extractor",
            AdapterKind::FormulaExtractor => "formula_extractor",
            AdapterKind::FigureDescriber => "figure_describer",
        }
    }

    /// Environment variable that overrides the configured HTTP endpoint.
    pub fn endpoint_env(&self) -> String {
        format!("BLOCKRAG_{}_ENDPOINT", self.config_key().to_ascii_uppercase())
    }
}

/// What an adapter is asked to look at. Page and crop images are passed by
/// reference (a raster path), never inline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "target", rename_all = "snake_case")]
pub enum AdapterRequest {
    Page {
        document_id: DocumentId,
        source_name: String,
        page_index: u32,
        width: f64,
        height: f64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        image: Option<String>,
        lines: Vec<TextLine>,
    },
    Crop {
        document_id: DocumentId,
        source_name: String,
        bbox: BoundingBox,
        block_type: BlockType,
        page_width: f64,
        page_height: f64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        image: Option<String>,
        lines: Vec<TextLine>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectedRegion {
    /// `[x0, y0, x1, y1]` in page points, top-left origin. May exceed the page.
    pub bbox: [f64; 4],
    pub label: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectorPayload {
    pub regions: Vec<DetectedRegion>,
}

pub trait ExtractionAdapter: Send + Sync {
    fn kind(&self) -> AdapterKind;
    fn name(&self) -> &str;
    /// Must not touch the block store; the pipeline applies the result.
    fn invoke(&self, request: &AdapterRequest) -> Result<Value>;
    fn health(&self) -> bool;
}

/// Checks a detector response against its schema.
pub fn validate_detector_payload(value: Value) -> Result<DetectorPayload> {
    let payload: DetectorPayload =
        serde_json::from_value(value).map_err(|e| Error::Schema(format!("layout detector payload: {e}")))?;
    for region in &payload.regions {
        if region.bbox.iter().any(|c| !c.is_finite()) {
            return Err(Error::Schema(format!("region {:?} has non-finite coordinates", region.bbox)));
        }
        if region.bbox[0] >= region.bbox[2] || region.bbox[1] >= region.bbox[3] {
            return Err(Error::Schema(format!("region {:?} is empty or inverted", region.bbox)));
        }
    }
    Ok(payload)
}

/// Checks an extractor response against the schema of the block it was asked about.
pub fn validate_block_payload(kind: AdapterKind, block_type: BlockType, value: Value) -> Result<BlockPayload> {
    let payload: BlockPayload =
        serde_json::from_value(value).map_err(|e| Error::Schema(format!("{} payload: {e}", kind.config_key())))?;
    if AdapterKind::for_block(block_type) != kind {
        return Err(Error::Schema(format!("{} cannot extract {block_type} blocks", kind.config_key())));
    }
    if payload.kind() != block_type.payload_kind() {
        return Err(Error::Schema(format!("{} returned a {:?} payload for a {block_type} block", kind.config_key(), payload.kind())));
    }
    Ok(payload)
}

/// Labels a paragraph from its text-layer markup.
pub fn classify_paragraph(lines: &[&str]) -> BlockType {
    let first = lines.first().map(|l| l.trim_start()).unwrap_or_default();
    let is_row = |l: &&str| l.trim_start().starts_with('|');
    let rows = lines.iter().filter(|l| is_row(l)).count();
    if first.starts_with('#') && lines.len() == 1 {
        BlockType::Title
    } else if first.starts_with("$$") {
        BlockType::Formula
    } else if first.starts_with("![") {
        BlockType::Figure
    } else if rows > 0 && rows + 1 >= lines.len() && lines.iter().skip(1).all(is_row) {
        BlockType::Table
    } else if lines.len() == 1 && is_caption(first) {
        BlockType::Caption
    } else {
        BlockType::Text
    }
}

fn is_caption(line: &str) -> bool {
    let rest = ["Figure ", "Fig. ", "Table "].iter().find_map(|p| line.strip_prefix(p));
    rest.is_some_and(|r| {
        let digits = r.chars().take_while(char::is_ascii_digit).count();
        digits > 0 && matches!(r[digits..].chars().next(), Some(':' | '.'))
    })
}

fn union_box(lines: &[TextLine]) -> [f64; 4] {
    lines.iter().fold([f64::MAX, f64::MAX, f64::MIN, f64::MIN], |b, l| {
        [b[0].min(l.x0), b[1].min(l.y0), b[2].max(l.x1), b[3].max(l.y1)]
    })
}

fn joined(lines: &[TextLine]) -> String {
    lines.iter().map(|l| l.text.trim()).filter(|t| !t.is_empty()).collect::<Vec<_>>().join(" ")
}

fn table_cells(line: &str) -> Vec<String> {
    let inner = line.trim().trim_start_matches('|').trim_end_matches('|');
    inner.split('|').map(|c| c.trim().to_owned()).collect()
}

fn is_rule_row(cells: &[String]) -> bool {
    cells.iter().all(|c| !c.is_empty() && c.chars().all(|ch| matches!(ch, '-' | ':' | ' ')))
}

/// Deterministic stand-ins that read the native text layer.
pub struct ReferenceAdapter {
    kind: AdapterKind,
}

impl ReferenceAdapter {
    pub fn new(kind: AdapterKind) -> Self {
        Self { kind }
    }

    fn fail(&self, message: impl Into<String>) -> Error {
        Error::adapter(format!("reference-{}", self.kind.config_key()), message)
    }

    fn detect(&self, lines: &[TextLine]) -> DetectorPayload {
        let regions = paragraphs(lines)
            .into_iter()
            .map(|para| {
                let texts: Vec<&str> = para.iter().map(|l| l.text.as_str()).collect();
                DetectedRegion { bbox: union_box(para), label: classify_paragraph(&texts).as_str().to_owned(), score: None }
            })
            .collect();
        DetectorPayload { regions }
    }

    fn extract(&self, block_type: BlockType, lines: &[TextLine]) -> Result<BlockPayload> {
        let texts: Vec<&str> = lines.iter().map(|l| l.text.trim()).collect();
        match self.kind {
            AdapterKind::Ocr => {
                let mut text = joined(lines);
                if block_type == BlockType::Title {
                    text = text.trim_start_matches('#').trim().to_owned();
                }
                if text.is_empty() {
                    return Err(self.fail("no text inside the crop"));
                }
                Ok(BlockPayload::text(text))
            }
            AdapterKind::TableExtractor => {
                let caption = texts.first().filter(|t| !t.starts_with('|')).map(|t| t.to_string());
                let rows: Vec<Vec<String>> = texts
                    .iter()
                    .filter(|t| t.starts_with('|'))
                    .map(|t| table_cells(t))
                    .filter(|cells| !is_rule_row(cells))
                    .collect();
                if rows.is_empty() {
                    return Err(self.fail("no table rows inside the crop"));
                }
                Ok(BlockPayload::Table(TableRecord { caption, rows, latex: None, html: None }))
            }
            AdapterKind::FormulaExtractor => {
                let text = texts.join(" ");
                let body = text.trim_start().strip_prefix("$$").ok_or_else(|| self.fail("no $$ delimiter"))?;
                let (latex, rest) = body.split_once("$$").unwrap_or((body, ""));
                if latex.trim().is_empty() {
                    return Err(self.fail("empty formula"));
                }
                Ok(BlockPayload::Formula { latex: latex.trim().to_owned(), description: rest.trim().to_owned() })
            }
            AdapterKind::FigureDescriber => {
                let first = texts.first().copied().unwrap_or_default();
                let (caption, described_from) = match first.strip_prefix("![").and_then(|r| r.split_once(']')) {
                    Some((alt, _)) => (Some(alt.trim().to_owned()).filter(|a| !a.is_empty()), 1),
                    None => (None, 0),
                };
                let description = texts[described_from.min(texts.len())..].join(" ");
                let description = if description.trim().is_empty() { caption.clone().unwrap_or_default() } else { description };
                if description.trim().is_empty() {
                    return Err(self.fail("figure has neither caption nor description"));
                }
                Ok(BlockPayload::Figure { caption, description })
            }
            AdapterKind::LayoutDetector => Err(self.fail("a layout detector cannot extract blocks")),
        }
    }
}

impl ExtractionAdapter for ReferenceAdapter {
    fn kind(&self) -> AdapterKind {
        self.kind
    }

    fn name(&self) -> &str {
        "reference"
    }

    fn invoke(&self, request: &AdapterRequest) -> Result<Value> {
        match (self.kind, request) {
            (AdapterKind::LayoutDetector, AdapterRequest::Page { lines, .. }) => Ok(serde_json::to_value(self.detect(lines))?),
            (AdapterKind::LayoutDetector, _) => Err(self.fail("a layout detector needs a page")),
            (_, AdapterRequest::Crop { block_type, lines, .. }) => Ok(serde_json::to_value(self.extract(*block_type, lines)?)?),
            (_, AdapterRequest::Page { .. }) => Err(self.fail("extractors take block crops")),
        }
    }

    fn health(&self) -> bool {
        true
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixtureRegion {
    pub bbox: [f64; 4],
    pub label: String,
    #[serde(default)]
    pub payload: Option<Value>,
    /// Makes the extractor fail for this region.
    #[serde(default)]
    pub fail: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixturePage {
    pub page_index: u32,
    pub regions: Vec<FixtureRegion>,
}

/// Sidecar region list for one source file, named `<source_name>.regions.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionFixture {
    pub source_name: String,
    pub pages: Vec<FixturePage>,
    /// Pages on which the detector fails.
    #[serde(default)]
    pub fail_pages: Vec<u32>,
}

pub const FIXTURE_SUFFIX: &str = ".regions.json";

#[derive(Debug, Clone, Default)]
pub struct MockFixtures {
    by_source: BTreeMap<String, RegionFixture>,
}

impl MockFixtures {
    pub fn insert(&mut self, fixture: RegionFixture) {
        self.by_source.insert(fixture.source_name.clone(), fixture);
    }

    /// Loads one sidecar file, or every sidecar in a directory.
    pub fn load(path: &Path) -> Result<Self> {
        let mut fixtures = Self::default();
        let files: Vec<PathBuf> = if path.is_dir() {
            let mut files: Vec<PathBuf> = std::fs::read_dir(path)
                .map_err(|e| Error::io(path, e))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.to_string_lossy().ends_with(FIXTURE_SUFFIX))
                .collect();
            files.sort();
            files
        } else {
            vec![path.to_path_buf()]
        };
        for file in files {
            let bytes = std::fs::read(&file).map_err(|e| Error::io(&file, e))?;
            fixtures.insert(serde_json::from_slice(&bytes)?);
        }
        Ok(fixtures)
    }

    pub fn get(&self, source_name: &str) -> Option<&RegionFixture> {
        self.by_source.get(source_name)
    }
}

/// Fixture-driven adapter: the detector echoes the region list and the
/// extractors return the payload recorded for the matching region.
pub struct MockAdapter {
    kind: AdapterKind,
    fixtures: Arc<MockFixtures>,
    healthy: bool,
}

impl MockAdapter {
    pub fn new(kind: AdapterKind, fixtures: Arc<MockFixtures>) -> Self {
        Self { kind, fixtures, healthy: true }
    }

    pub fn unhealthy(mut self) -> Self {
        self.healthy = false;
        self
    }

    fn fail(&self, message: impl Into<String>) -> Error {
        Error::adapter(format!("mock-{}", self.kind.config_key()), message)
    }
}

impl ExtractionAdapter for MockAdapter {
    fn kind(&self) -> AdapterKind {
        self.kind
    }

    fn name(&self) -> &str {
        "mock"
    }

    fn invoke(&self, request: &AdapterRequest) -> Result<Value> {
        if !self.healthy {
            return Err(self.fail("adapter is down"));
        }
        match (self.kind, request) {
            (AdapterKind::LayoutDetector, AdapterRequest::Page { source_name, page_index, .. }) => {
                let fixture = self.fixtures.get(source_name).ok_or_else(|| self.fail(format!("no fixture for {source_name}")))?;
                if fixture.fail_pages.contains(page_index) {
                    return Err(self.fail(format!("scripted failure on page {page_index}")));
                }
                let regions = fixture
                    .pages
                    .iter()
                    .filter(|p| p.page_index == *page_index)
                    .flat_map(|p| &p.regions)
                    .map(|r| DetectedRegion { bbox: r.bbox, label: r.label.clone(), score: None })
                    .collect();
                Ok(serde_json::to_value(DetectorPayload { regions })?)
            }
            (AdapterKind::LayoutDetector, _) => Err(self.fail("a layout detector needs a page")),
            (_, AdapterRequest::Crop { source_name, bbox, block_type, page_width, page_height, .. }) => {
                let fixture = self.fixtures.get(source_name).ok_or_else(|| self.fail(format!("no fixture for {source_name}")))?;
                let region = fixture
                    .pages
                    .iter()
                    .filter(|p| p.page_index == bbox.page_index)
                    .flat_map(|p| &p.regions)
                    .find(|r| {
                        BlockType::from_label(&r.label) == *block_type
                            && fixture_box(bbox.page_index, r.bbox, *page_width, *page_height).is_some_and(|b| b.rounded_tenths() == bbox.rounded_tenths())
                    })
                    .ok_or_else(|| self.fail(format!("no fixture region at {bbox}")))?;
                if region.fail {
                    return Err(self.fail(format!("scripted failure at {bbox}")));
                }
                region.payload.clone().ok_or_else(|| self.fail(format!("fixture region at {bbox} has no payload")))
            }
            (_, AdapterRequest::Page { .. }) => Err(self.fail("extractors take block crops")),
        }
    }

    fn health(&self) -> bool {
        self.healthy
    }
}

/// A fixture box clipped the same way the detector stage clips.
fn fixture_box(page_index: u32, raw: [f64; 4], width: f64, height: f64) -> Option<BoundingBox> {
    raw_box(page_index, raw).clip_to(width, height)
}

fn raw_box(page_index: u32, b: [f64; 4]) -> BoundingBox {
    BoundingBox { page_index, x0: b[0], y0: b[1], x1: b[2], y1: b[3] }
}

/// POSTs the request as JSON and returns the JSON body.
pub struct HttpAdapter {
    kind: AdapterKind,
    endpoint: String,
    agent: ureq::Agent,
}

impl HttpAdapter {
    pub fn new(kind: AdapterKind, endpoint: impl Into<String>, timeout: Duration) -> Self {
        let config = ureq::Agent::config_builder().timeout_global(Some(timeout)).build();
        Self { kind, endpoint: endpoint.into(), agent: config.into() }
    }
}

impl ExtractionAdapter for HttpAdapter {
    fn kind(&self) -> AdapterKind {
        self.kind
    }

    fn name(&self) -> &str {
        "http"
    }

    fn invoke(&self, request: &AdapterRequest) -> Result<Value> {
        let name = format!("http-{}", self.kind.config_key());
        let mut response = self.agent.post(&self.endpoint).send_json(request).map_err(|e| Error::adapter(&name, e.to_string()))?;
        response.body_mut().read_json().map_err(|e| Error::adapter(&name, e.to_string()))
    }

    fn health(&self) -> bool {
        let url = format!("{}/health", self.endpoint.trim_end_matches('/'));
        self.agent.get(&url).call().is_ok()
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AdapterMode {
    #[default]
    Reference,
    Mock,
    Http,
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdapterSpec {
    #[serde(default)]
    pub mode: AdapterMode,
    #[serde(default)]
    pub endpoint: Option<String>,
    /// Sidecar file or directory for mock mode.
    #[serde(default)]
    pub fixture: Option<PathBuf>,
    /// Lets a mock report itself down.
    #[serde(default = "default_true")]
    pub healthy: bool,
    #[serde(default)]
    pub timeout_secs: Option<u64>,
}

impl Default for AdapterSpec {
    fn default() -> Self {
        Self { mode: AdapterMode::Reference, endpoint: None, fixture: None, healthy: true, timeout_secs: None }
    }
}

/// External page rasterizer. `{input}` and `{output_dir}` in the arguments are
/// replaced with the normalized PDF path and the document's page directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RasterizerConfig {
    pub command: Vec<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AdapterConfig {
    #[serde(default)]
    pub layout_detector: AdapterSpec,
    #[serde(default)]
    pub ocr: AdapterSpec,
    #[serde(default)]
    pub table_extractor: AdapterSpec,
    #[serde(default)]
    pub formula_extractor: AdapterSpec,
    #[serde(default)]
    pub figure_describer: AdapterSpec,
    #[serde(default)]
    pub rasterizer: Option<RasterizerConfig>,
}

impl AdapterConfig {
    /// Mock mode for every kind, reading sidecars from `fixture`.
    pub fn all_mock(fixture: impl Into<PathBuf>) -> Self {
        let spec = AdapterSpec { mode: AdapterMode::Mock, fixture: Some(fixture.into()), ..AdapterSpec::default() };
        Self {
            layout_detector: spec.clone(),
            ocr: spec.clone(),
            table_extractor: spec.clone(),
            formula_extractor: spec.clone(),
            figure_describer: spec,
            rasterizer: None,
        }
    }

    pub fn spec(&self, kind: AdapterKind) -> &AdapterSpec {
        match kind {
            AdapterKind::LayoutDetector => &self.layout_detector,
            AdapterKind::Ocr => &self.ocr,
            AdapterKind::TableExtractor => &self.table_extractor,
            AdapterKind::FormulaExtractor => &self.formula_extractor,
            AdapterKind::FigureDescriber => &self.figure_describer,
        }
    }

    pub fn spec_mut(&mut self, kind: AdapterKind) -> &mut AdapterSpec {
        match kind {
            AdapterKind::LayoutDetector => &mut self.layout_detector,
            AdapterKind::Ocr => &mut self.ocr,
            AdapterKind::TableExtractor => &mut self.table_extractor,
            AdapterKind::FormulaExtractor => &mut self.formula_extractor,
            AdapterKind::FigureDescriber => &mut self.figure_describer,
        }
    }

    /// Reads TOML or JSON by extension; relative fixture paths resolve against the file.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut config: AdapterConfig = if path.extension().is_some_and(|e| e == "toml") {
            toml::from_str(&text).map_err(|e| Error::Invalid(format!("{}: {e}", path.display())))?
        } else {
            serde_json::from_str(&text)?
        };
        let base = path.parent().unwrap_or(Path::new("."));
        for kind in AdapterKind::ALL {
            let spec = config.spec_mut(kind);
            if let Some(f) = spec.fixture.as_mut() {
                if f.is_relative() {
                    *f = base.join(&*f);
                }
            }
        }
        Ok(config)
    }

    /// Applies `BLOCKRAG_<KIND>_ENDPOINT` overrides.
    pub fn with_env(mut self, env: impl Fn(&str) -> Option<String>) -> Self {
        for kind in AdapterKind::ALL {
            if let Some(endpoint) = env(&kind.endpoint_env()).filter(|e| !e.is_empty()) {
                self.spec_mut(kind).endpoint = Some(endpoint);
            }
        }
        self
    }
}

#[derive(Clone)]
pub struct AdapterSet {
    adapters: BTreeMap<AdapterKind, Arc<dyn ExtractionAdapter>>,
    rasterizer: Option<RasterizerConfig>,
}

impl AdapterSet {
    pub fn reference() -> Self {
        Self {
            adapters: AdapterKind::ALL.into_iter().map(|k| (k, Arc::new(ReferenceAdapter::new(k)) as Arc<dyn ExtractionAdapter>)).collect(),
            rasterizer: None,
        }
    }

    pub fn mock(fixtures: MockFixtures) -> Self {
        let fixtures = Arc::new(fixtures);
        Self {
            adapters: AdapterKind::ALL
                .into_iter()
                .map(|k| (k, Arc::new(MockAdapter::new(k, fixtures.clone())) as Arc<dyn ExtractionAdapter>))
                .collect(),
            rasterizer: None,
        }
    }

    pub fn from_config(config: &AdapterConfig) -> Result<Self> {
        let mut loaded: BTreeMap<PathBuf, Arc<MockFixtures>> = BTreeMap::new();
        let mut adapters = BTreeMap::new();
        for kind in AdapterKind::ALL {
            let spec = config.spec(kind);
            let adapter: Arc<dyn ExtractionAdapter> = match spec.mode {
                AdapterMode::Reference => Arc::new(ReferenceAdapter::new(kind)),
                AdapterMode::Mock => {
                    let path = spec
                        .fixture
                        .clone()
                        .ok_or_else(|| Error::Invalid(format!("{} in mock mode needs a fixture", kind.config_key())))?;
                    let fixtures = match loaded.get(&path) {
                        Some(f) => f.clone(),
                        None => {
                            let f = Arc::new(MockFixtures::load(&path)?);
                            loaded.insert(path, f.clone());
                            f
                        }
                    };
                    let mock = MockAdapter::new(kind, fixtures);
                    Arc::new(if spec.healthy { mock } else { mock.unhealthy() })
                }
                AdapterMode::Http => {
                    let endpoint = spec
                        .endpoint
                        .clone()
                        .ok_or_else(|| Error::Invalid(format!("{} in http mode needs an endpoint", kind.config_key())))?;
                    Arc::new(HttpAdapter::new(kind, endpoint, Duration::from_secs(spec.timeout_secs.unwrap_or(60))))
                }
            };
            adapters.insert(kind, adapter);
        }
        Ok(Self { adapters, rasterizer: config.rasterizer.clone() })
    }

    pub fn with_adapter(mut self, adapter: Arc<dyn ExtractionAdapter>) -> Self {
        self.adapters.insert(adapter.kind(), adapter);
        self
    }

    pub fn get(&self, kind: AdapterKind) -> &Arc<dyn ExtractionAdapter> {
        &self.adapters[&kind]
    }

    pub fn health(&self) -> BTreeMap<AdapterKind, bool> {
        self.adapters.iter().map(|(k, a)| (*k, a.health())).collect()
    }
}

/// Failure while detecting a specific page.
#[derive(Debug)]
pub struct PageFailure {
    pub page_index: u32,
    pub error: Error,
}

fn page_request(source: &NormalizedSource, page: &Page, image: Option<String>) -> AdapterRequest {
    AdapterRequest::Page {
        document_id: source.document.document_id.clone(),
        source_name: source.document.source_name.clone(),
        page_index: page.page_index,
        width: page.width,
        height: page.height,
        image,
        lines: source.lines[page.page_index as usize].clone(),
    }
}

fn detect_pages(
    source: &NormalizedSource,
    detector: &dyn ExtractionAdapter,
    images: &(dyn Fn(u32) -> Option<String> + Sync),
) -> std::result::Result<Vec<Vec<LayoutBlock>>, PageFailure> {
    let doc = &source.document;
    doc.pages
        .par_iter()
        .map(|page| {
            let fail = |error| PageFailure { page_index: page.page_index, error };
            let value = detector.invoke(&page_request(source, page, images(page.page_index))).map_err(fail)?;
            let payload = validate_detector_payload(value).map_err(fail)?;
            let mut seen = BTreeSet::new();
            let mut blocks: Vec<LayoutBlock> = payload
                .regions
                .iter()
                .filter_map(|r| raw_box(page.page_index, r.bbox).clip_to(page.width, page.height).map(|b| (b, r)))
                .map(|(bbox, r)| LayoutBlock::detected(doc.document_id.clone(), bbox, BlockType::from_label(&r.label)))
                .filter(|b| seen.insert(b.block_id.clone()))
                .collect();
            blocks.sort_by(crate::model::reading_order);
            Ok(blocks)
        })
        .collect()
}

/// Runs the detector over every page. Boxes are clipped to the page;
/// overlapping detections are kept.
pub fn detect_layout(source: &mut NormalizedSource, detector: &dyn ExtractionAdapter) -> Result<()> {
    detect_layout_with(source, detector, &|_| None)
}

fn detect_layout_with(
    source: &mut NormalizedSource,
    detector: &dyn ExtractionAdapter,
    images: &(dyn Fn(u32) -> Option<String> + Sync),
) -> Result<()> {
    if source.document.processing_state != ProcessingState::Normalized {
        return Err(Error::Invalid("layout detection needs a normalized document".into()));
    }
    let pages = detect_pages(source, detector, images).map_err(|f| match f.error {
        Error::Adapter { adapter, message } => Error::Adapter { adapter, message: format!("page {}: {message}", f.page_index) },
        other => Error::adapter(detector.name(), format!("page {}: {other}", f.page_index)),
    })?;
    for (page, blocks) in source.document.pages.iter_mut().zip(pages) {
        page.blocks = blocks;
    }
    source.document.advance(ProcessingState::LayoutDetected)
}

fn lines_in(lines: &[TextLine], bbox: &BoundingBox) -> Vec<TextLine> {
    lines
        .iter()
        .filter(|l| {
            let (cx, cy) = ((l.x0 + l.x1) / 2.0, (l.y0 + l.y1) / 2.0);
            (bbox.x0..=bbox.x1).contains(&cx) && (bbox.y0..=bbox.y1).contains(&cy)
        })
        .cloned()
        .collect()
}

fn extract_one(source: &NormalizedSource, adapters: &AdapterSet, block: &LayoutBlock, image: Option<String>) -> Result<(BlockPayload, String)> {
    let kind = AdapterKind::for_block(block.block_type);
    let adapter = adapters.get(kind);
    let page = source
        .document
        .page(block.page_index())
        .ok_or_else(|| Error::Invalid(format!("page {} out of range", block.page_index())))?;
    if !adapter.health() {
        return Err(Error::AdapterUnavailable(kind.config_key().into()));
    }
    let request = AdapterRequest::Crop {
        document_id: block.document_id.clone(),
        source_name: source.document.source_name.clone(),
        bbox: block.bbox,
        block_type: block.block_type,
        page_width: page.width,
        page_height: page.height,
        image,
        lines: lines_in(&source.lines[block.page_index() as usize], &block.bbox),
    };
    let payload = validate_block_payload(kind, block.block_type, adapter.invoke(&request)?)?;
    let text = canonical_text_repr(block.block_type, &payload)?;
    if text.trim().is_empty() {
        return Err(Error::Schema(format!("{} produced no text for {}", kind.config_key(), block.block_id)));
    }
    Ok((payload, text))
}

/// Fills payloads and text for every block. A block whose adapter fails is
/// flagged for review and left without a payload; the others are unaffected.
pub fn extract_blocks(source: &mut NormalizedSource, adapters: &AdapterSet) -> Result<usize> {
    extract_blocks_with(source, adapters, &|_| None)
}

fn extract_blocks_with(source: &mut NormalizedSource, adapters: &AdapterSet, images: &(dyn Fn(u32) -> Option<String> + Sync)) -> Result<usize> {
    if source.document.processing_state != ProcessingState::LayoutDetected {
        return Err(Error::Invalid("extraction needs a layout-detected document".into()));
    }
    let results: Vec<Result<(BlockPayload, String)>> = {
        let shared: &NormalizedSource = source;
        let blocks: Vec<&LayoutBlock> = shared.document.blocks().collect();
        blocks.par_iter().map(|b| extract_one(shared, adapters, b, images(b.page_index()))).collect()
    };
    let mut flagged = 0;
    for (block, result) in source.document.blocks_mut().zip(results) {
        match result {
            Ok((payload, text)) => {
                block.raw_payload = Some(payload);
                block.text_repr = text;
                block.needs_validation = false;
            }
            Err(e) => {
                tracing::warn!(block = %block.block_id, error = %e, "extraction failed; block needs review");
                block.needs_validation = true;
                flagged += 1;
            }
        }
    }
    source.document.advance(ProcessingState::Extracted)?;
    Ok(flagged)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineJob {
    pub job_id: String,
    pub source_name: String,
    pub document_id: Option<DocumentId>,
    pub stage: ProcessingState,
    pub stage_timestamps: BTreeMap<ProcessingState, DateTime<Utc>>,
    pub error_message: Option<String>,
    /// The stage that was running when the job failed.
    pub failed_stage: Option<ProcessingState>,
    pub failed_page: Option<u32>,
    /// Blocks whose extraction failed and await review.
    pub flagged_blocks: usize,
}

impl PipelineJob {
    fn new(job_id: String, source_name: String, now: DateTime<Utc>) -> Self {
        Self {
            job_id,
            source_name,
            document_id: None,
            stage: ProcessingState::Uploaded,
            stage_timestamps: BTreeMap::from([(ProcessingState::Uploaded, now)]),
            error_message: None,
            failed_stage: None,
            failed_page: None,
            flagged_blocks: 0,
        }
    }

    fn last_timestamp(&self) -> DateTime<Utc> {
        self.stage_timestamps.values().max().copied().unwrap_or(DateTime::<Utc>::MIN_UTC)
    }

    fn reach(&mut self, stage: ProcessingState, now: DateTime<Utc>) {
        let at = now.max(self.last_timestamp());
        self.stage = stage;
        self.stage_timestamps.insert(stage, at);
    }

    fn fail(&mut self, attempted: ProcessingState, error: &Error, now: DateTime<Utc>) {
        self.failed_stage = Some(attempted);
        self.error_message = Some(error.to_string());
        self.reach(ProcessingState::Failed, now);
    }

    pub fn is_finished(&self) -> bool {
        self.stage.is_terminal()
    }
}

impl Engine {
    /// Records a new upload and returns its job in the `Uploaded` stage.
    pub fn register_job(&self, source_name: &str) -> PipelineJob {
        let job = PipelineJob::new(self.ids.next_id("job"), source_name.to_owned(), self.now());
        self.jobs.write().insert(job.job_id.clone(), job.clone());
        job
    }

    pub fn job(&self, job_id: &str) -> Result<PipelineJob> {
        self.jobs.read().get(job_id).cloned().ok_or_else(|| Error::not_found("job", job_id))
    }

    pub fn jobs(&self) -> Vec<PipelineJob> {
        self.jobs.read().values().cloned().collect()
    }

    fn update_job(&self, job: &PipelineJob) {
        self.jobs.write().insert(job.job_id.clone(), job.clone());
    }

    pub fn adapters(&self) -> &AdapterSet {
        &self.adapters
    }

    /// Normalize, detect, extract and index one source file.
    pub fn run_pipeline(&self, source_name: &str, bytes: &[u8], format: SourceFormat) -> PipelineJob {
        let job = self.register_job(source_name);
        self.run_job(&job.job_id, bytes, format).unwrap_or(job)
    }

    /// Reads a file and runs the pipeline on it, taking the format from the extension.
    pub fn ingest_path(&self, path: &Path) -> Result<PipelineJob> {
        let format = SourceFormat::from_path(path)?;
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("upload").to_owned();
        Ok(self.run_pipeline(&name, &bytes, format))
    }

    /// Drives a registered job to a terminal stage.
    pub fn run_job(&self, job_id: &str, bytes: &[u8], format: SourceFormat) -> Result<PipelineJob> {
        let mut job = self.job(job_id)?;
        if job.stage != ProcessingState::Uploaded {
            return Err(Error::Conflict(format!("job {job_id} already ran")));
        }
        let outcome = self.drive(&mut job, bytes, format);
        if let Err((stage, error)) = outcome {
            tracing::warn!(job = %job.job_id, ?stage, error = %error, "pipeline failed");
            job.fail(stage, &error, self.now());
        }
        self.update_job(&job);
        Ok(job)
    }

    fn drive(&self, job: &mut PipelineJob, bytes: &[u8], format: SourceFormat) -> std::result::Result<(), (ProcessingState, Error)> {
        use ProcessingState as S;
        let mut source = normalize(&job.source_name, bytes, format).map_err(|e| (S::Normalized, e))?;
        let document_id = source.document.document_id.clone();
        job.document_id = Some(document_id.clone());
        if self.store.read().contains(&document_id) {
            // same bytes already ingested; keep the existing blocks and any human corrections
            for stage in [S::Normalized, S::LayoutDetected, S::Extracted, S::Indexed] {
                job.reach(stage, self.now());
            }
            return Ok(());
        }
        job.reach(S::Normalized, self.now());
        self.update_job(job);
        self.store_source(&source).map_err(|e| (S::Normalized, e))?;
        let images = |page: u32| self.page_image(&document_id, page).map(|p| p.to_string_lossy().into_owned());

        let detector = self.adapters.get(AdapterKind::LayoutDetector);
        if !detector.health() {
            return Err((S::LayoutDetected, Error::AdapterUnavailable("layout_detector".into())));
        }
        if let Err(f) = detect_pages(&source, detector.as_ref(), &images).map(|pages| {
            for (page, blocks) in source.document.pages.iter_mut().zip(pages) {
                page.blocks = blocks;
            }
        }) {
            job.failed_page = Some(f.page_index);
            let message = format!("page {}: {}", f.page_index, f.error);
            return Err((S::LayoutDetected, Error::adapter(detector.name(), message)));
        }
        source.document.advance(S::LayoutDetected).map_err(|e| (S::LayoutDetected, e))?;
        job.reach(S::LayoutDetected, self.now());
        self.update_job(job);

        job.flagged_blocks = extract_blocks_with(&mut source, &self.adapters, &images).map_err(|e| (S::Extracted, e))?;
        job.reach(S::Extracted, self.now());
        self.update_job(job);

        self.index_document(source.document).map_err(|e| (S::Indexed, e))?;
        job.reach(S::Indexed, self.now());
        Ok(())
    }

    fn index_document(&self, mut document: Document) -> Result<()> {
        let entries: Vec<(LayoutBlock, Vec<f32>)> = document
            .blocks()
            .filter(|b| b.is_indexable())
            .map(|b| Ok((b.clone(), self.embedder.embed(&b.text_repr)?)))
            .collect::<Result<_>>()?;
        document.advance(ProcessingState::Indexed)?;
        document.check_invariants()?;
        let document_id = document.document_id.clone();
        let mut store = self.store.write();
        let mut index = self.index.write();
        for (block, vector) in entries {
            index.upsert_entry(crate::index::IndexEntry {
                block_id: block.block_id,
                document_id: block.document_id,
                block_type: block.block_type,
                vector,
                revision: block.revision,
            })?;
        }
        store.insert(document.clone());
        let mut initial = self.initial.write();
        initial.insert(document);
        if let Some(layout) = self.layout() {
            initial.save_document(&layout.initial(), &document_id)?;
        }
        self.persist_document(&store, &document_id)?;
        self.persist_index(&index)
    }

    fn store_source(&self, source: &NormalizedSource) -> Result<()> {
        let Some(layout) = self.layout() else { return Ok(()) };
        let pdf_path = layout.sources().join(format!("{}.pdf", source.document.document_id));
        write_atomic(&pdf_path, &source.pdf)?;
        if let Some(raster) = &self.adapters.rasterizer {
            let out_dir = layout.pages().join(source.document.document_id.as_str());
            std::fs::create_dir_all(&out_dir).map_err(|e| Error::io(&out_dir, e))?;
            let args: Vec<String> = raster
                .command
                .iter()
                .map(|a| a.replace("{input}", &pdf_path.to_string_lossy()).replace("{output_dir}", &out_dir.to_string_lossy()))
                .collect();
            if let Some((program, rest)) = args.split_first() {
                // page images only feed the viewer; a rasterizer failure does not stop ingestion
                match std::process::Command::new(program).args(rest).status() {
                    Ok(status) if status.success() => {}
                    Ok(status) => tracing::warn!(%status, "rasterizer exited with failure"),
                    Err(e) => tracing::warn!(error = %e, "rasterizer could not start"),
                }
            }
        }
        Ok(())
    }

    /// The normalized PDF kept for a document, when persisting.
    pub fn source_pdf(&self, document_id: &DocumentId) -> Option<PathBuf> {
        let path = self.layout()?.sources().join(format!("{document_id}.pdf"));
        path.exists().then_some(path)
    }

    /// A pre-rendered raster for a page, looked up as `pages/<document_id>/<page_index>.png`.
    pub fn page_image(&self, document_id: &DocumentId, page_index: u32) -> Option<PathBuf> {
        let path = self.layout()?.pages().join(document_id.as_str()).join(format!("{page_index}.png"));
        path.exists().then_some(path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn line(y0: f64, text: &str) -> TextLine {
        TextLine { x0: 56.0, y0, x1: 56.0 + 4.5 * text.len() as f64, y1: y0 + 9.0, size: 9.0, text: text.into() }
    }

    #[test]
    fn txt_pagination_follows_line_policy() {
        let text: String = (0..120).map(|i| format!("line {i}\n")).collect();
        let src = normalize("a.txt", text.as_bytes(), SourceFormat::Txt).unwrap();
        assert_eq!(src.document.page_count, 2);
        let text: String = (0..121).map(|i| format!("line {i}\n")).collect();
        assert_eq!(normalize("a.txt", text.as_bytes(), SourceFormat::Txt).unwrap().document.page_count, 3);
    }

    #[test]
    fn empty_and_office_inputs_rejected() {
        assert!(matches!(normalize("e.txt", b"", SourceFormat::Txt), Err(Error::EmptyDocument)));
        assert!(matches!(normalize("e.pdf", b"  \n", SourceFormat::Pdf), Err(Error::EmptyDocument)));
        assert!(matches!(normalize("x.pdf", b"%PDF-garbage", SourceFormat::Pdf), Err(Error::Format { .. })));
        assert!(matches!("docx".parse::<SourceFormat>(), Err(Error::Invalid(_))));
    }

    #[test]
    fn paragraph_split_uses_gaps() {
        let lines = vec![line(60.0, "a"), line(71.0, "b"), line(93.0, "c")];
        let paras = paragraphs(&lines);
        assert_eq!(paras.len(), 2);
        assert_eq!(paras[0].len(), 2);
    }

    #[test]
    fn classification_rules() {
        assert_eq!(classify_paragraph(&["# Intro"]), BlockType::Title);
        assert_eq!(classify_paragraph(&["Table 2: grades", "| a | b |", "| 1 | 2 |"]), BlockType::Table);
        assert_eq!(classify_paragraph(&["$$ x^2 $$", "a square"]), BlockType::Formula);
        assert_eq!(classify_paragraph(&["![map](m.png)", "a map"]), BlockType::Figure);
        assert_eq!(classify_paragraph(&["Figure 3: the site"]), BlockType::Caption);
        assert_eq!(classify_paragraph(&["plain", "| not a table"]), BlockType::Table);
        assert_eq!(classify_paragraph(&["plain", "text | here"]), BlockType::Text);
    }

    #[test]
    fn reference_table_extraction() {
        let a = ReferenceAdapter::new(AdapterKind::TableExtractor);
        let lines = vec![line(0.0, "Table 1: zinc"), line(11.0, "| hole | zn |"), line(22.0, "|---|---|"), line(33.0, "| A1 | 4.2 |")];
        let p = a.extract(BlockType::Table, &lines).unwrap();
        assert_eq!(canonical_text_repr(BlockType::Table, &p).unwrap(), "Table 1: zinc\nhole | zn\nA1 | 4.2");
    }

    #[test]
    fn payload_schema_checked() {
        let good = serde_json::json!({"kind": "formula", "latex": "x", "description": "d"});
        assert!(validate_block_payload(AdapterKind::FormulaExtractor, BlockType::Formula, good.clone()).is_ok());
        assert!(matches!(validate_block_payload(AdapterKind::Ocr, BlockType::Text, good), Err(Error::Schema(_))));
        let bad = serde_json::json!({"regions": [{"bbox": [5.0, 0.0, 1.0, 3.0], "label": "Text"}]});
        assert!(matches!(validate_detector_payload(bad), Err(Error::Schema(_))));
    }

    #[test]
    fn env_overrides_endpoint() {
        let cfg = AdapterConfig::default().with_env(|k| (k == "BLOCKRAG_OCR_ENDPOINT").then(|| "http://ocr".to_string()));
        assert_eq!(cfg.ocr.endpoint.as_deref(), Some("http://ocr"));
        assert_eq!(cfg.table_extractor.endpoint, None);
    }
}
