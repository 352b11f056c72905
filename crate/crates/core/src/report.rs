//! Reports assembled from curated blocks, drafted section by section.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::Path;
use std::sync::Arc;

use parking_lot::Mutex;
use serde::{Deserialize, Serialize};

use crate::engine::Engine;
use crate::error::{Error, Result};
use crate::ids::{BlockId, ReportId, SessionId};
use crate::llm::{LlmPurpose, LlmRequest};
use crate::session::render_blocks;
use crate::store::{write_atomic, BlockStore};

pub const SECTION_MAX_CHARS: usize = 8000;
const REMOVED_NOTICE: &str = "(removed content)";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Section {
    pub section_id: String,
    pub heading: String,
    pub instruction: String,
    pub blocks: Vec<BlockId>,
    pub draft: String,
    pub draft_revision: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Report {
    pub report_id: ReportId,
    pub session_id: Option<SessionId>,
    pub title: String,
    pub sections: Vec<Section>,
    next_section: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExportFormat {
    #[serde(alias = "md")]
    Markdown,
    Html,
}

impl std::str::FromStr for ExportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "md" | "markdown" => Ok(ExportFormat::Markdown),
            "html" => Ok(ExportFormat::Html),
            other => Err(Error::Invalid(format!("unknown export format {other:?}"))),
        }
    }
}

impl Report {
    pub fn new(report_id: ReportId, session_id: Option<SessionId>, title: impl Into<String>) -> Self {
        Self { report_id, session_id, title: title.into(), sections: Vec::new(), next_section: 0 }
    }

    pub fn add_section(&mut self, heading: impl Into<String>, instruction: impl Into<String>) -> &Section {
        self.next_section += 1;
        self.sections.push(Section {
            section_id: format!("s{}", self.next_section),
            heading: heading.into(),
            instruction: instruction.into(),
            blocks: Vec::new(),
            draft: String::new(),
            draft_revision: 0,
        });
        self.sections.last().expect("just pushed")
    }

    pub fn section(&self, section_id: &str) -> Result<&Section> {
        self.sections
            .iter()
            .find(|s| s.section_id == section_id)
            .ok_or_else(|| Error::not_found("section", section_id))
    }

    fn section_mut(&mut self, section_id: &str) -> Result<&mut Section> {
        self.sections
            .iter_mut()
            .find(|s| s.section_id == section_id)
            .ok_or_else(|| Error::not_found("section", section_id))
    }

    /// Inserts `block_id` at `position` within the section. A block may sit in
    /// several sections but only once per section.
    pub fn assign_block(&mut self, section_id: &str, block_id: BlockId, position: usize) -> Result<()> {
        let section = self.section_mut(section_id)?;
        if position > section.blocks.len() {
            return Err(Error::Invalid(format!(
                "position {position} is past the end of section {section_id} ({} blocks)",
                section.blocks.len()
            )));
        }
        if section.blocks.contains(&block_id) {
            return Err(Error::Conflict(format!("block {block_id} is already in section {section_id}")));
        }
        section.blocks.insert(position, block_id);
        Ok(())
    }

    pub fn unassign_block(&mut self, section_id: &str, block_id: &BlockId) -> Result<()> {
        let section = self.section_mut(section_id)?;
        let before = section.blocks.len();
        section.blocks.retain(|b| b != block_id);
        if section.blocks.len() == before {
            return Err(Error::not_found("block in section", block_id.as_str()));
        }
        Ok(())
    }

    pub fn move_section(&mut self, section_id: &str, position: usize) -> Result<()> {
        let from = self
            .sections
            .iter()
            .position(|s| s.section_id == section_id)
            .ok_or_else(|| Error::not_found("section", section_id))?;
        if position >= self.sections.len() {
            return Err(Error::Invalid(format!("position {position} out of range")));
        }
        let section = self.sections.remove(from);
        self.sections.insert(position, section);
        Ok(())
    }

    pub fn set_instruction(&mut self, section_id: &str, instruction: impl Into<String>) -> Result<()> {
        self.section_mut(section_id)?.instruction = instruction.into();
        Ok(())
    }

    /// Manual draft edit. Bumps the draft revision like a generation does.
    pub fn edit_draft(&mut self, section_id: &str, draft: impl Into<String>) -> Result<u64> {
        let section = self.section_mut(section_id)?;
        section.draft = draft.into();
        section.draft_revision += 1;
        Ok(section.draft_revision)
    }

    /// Every assigned block, first appearance order.
    pub fn cited_blocks(&self) -> Vec<&BlockId> {
        let mut seen = BTreeSet::new();
        self.sections.iter().flat_map(|s| s.blocks.iter()).filter(|b| seen.insert(*b)).collect()
    }
}

pub fn section_prompt(section: &Section, segments: &[String]) -> String {
    let mut prompt = format!(
        "Write the report section \"{}\" from the source blocks below.\nInstruction: {}\n",
        section.heading, section.instruction
    );
    for segment in segments {
        prompt.push('\n');
        prompt.push_str(segment);
        prompt.push('\n');
    }
    prompt
}

struct ProvenanceLine {
    block_id: String,
    source: String,
    page: u32,
    block_type: String,
    removed: bool,
}

fn provenance(report: &Report, store: &BlockStore) -> Result<Vec<ProvenanceLine>> {
    report
        .cited_blocks()
        .into_iter()
        .map(|id| {
            let block = store.block(id)?;
            let source = store.document(&block.document_id)?.source_name.clone();
            Ok(ProvenanceLine {
                block_id: id.to_string(),
                source,
                page: block.page_index() + 1,
                block_type: block.block_type.to_string(),
                removed: block.tombstoned,
            })
        })
        .collect()
}

fn escape_html(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    for c in text.chars() {
        match c {
            '&' => out.push_str("&amp;"),
            '<' => out.push_str("&lt;"),
            '>' => out.push_str("&gt;"),
            '"' => out.push_str("&quot;"),
            '\'' => out.push_str("&#39;"),
            c => out.push(c),
        }
    }
    out
}

/// Renders the report with an appendix listing the provenance of every cited block.
pub fn export_report(report: &Report, store: &BlockStore, format: ExportFormat) -> Result<Vec<u8>> {
    let sources = provenance(report, store)?;
    let mut out = String::new();
    match format {
        ExportFormat::Markdown => {
            let _ = writeln!(out, "# {}\n", report.title);
            for section in &report.sections {
                let _ = writeln!(out, "## {}\n", section.heading);
                if !section.draft.is_empty() {
                    let _ = writeln!(out, "{}\n", section.draft.trim_end());
                }
            }
            out.push_str("## Sources\n\n");
            for (n, p) in sources.iter().enumerate() {
                let removed = if p.removed { format!(" {REMOVED_NOTICE}") } else { String::new() };
                let _ = writeln!(out, "{}. {} | {} p.{} | {}{removed}", n + 1, p.block_id, p.source, p.page, p.block_type);
            }
        }
        ExportFormat::Html => {
            let _ = writeln!(out, "<!DOCTYPE html>\n<html>\n<head><meta charset=\"utf-8\"><title>{0}</title></head>\n<body>\n<h1>{0}</h1>", escape_html(&report.title));
            for section in &report.sections {
                let _ = writeln!(out, "<section id=\"{}\">\n<h2>{}</h2>", escape_html(&section.section_id), escape_html(&section.heading));
                for para in section.draft.split("\n\n").filter(|p| !p.trim().is_empty()) {
                    let _ = writeln!(out, "<p>{}</p>", escape_html(para.trim()));
                }
                out.push_str("</section>\n");
            }
            out.push_str("<h2>Sources</h2>\n<ol class=\"sources\">\n");
            for p in &sources {
                let removed = if p.removed { format!(" {REMOVED_NOTICE}") } else { String::new() };
                let _ = writeln!(
                    out,
                    "<li data-block-id=\"{}\">{} p.{} | {}{removed}</li>",
                    escape_html(&p.block_id),
                    escape_html(&p.source),
                    p.page,
                    escape_html(&p.block_type)
                );
            }
            out.push_str("</ol>\n</body>\n</html>\n");
        }
    }
    Ok(out.into_bytes())
}

pub(crate) fn load_reports(dir: &Path) -> Result<BTreeMap<ReportId, Report>> {
    let mut reports = BTreeMap::new();
    let entries = match std::fs::read_dir(dir) {
        Ok(e) => e,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(reports),
        Err(e) => return Err(Error::io(dir, e)),
    };
    for entry in entries.filter_map(|e| e.ok()) {
        let path = entry.path();
        if path.extension().is_some_and(|x| x == "json") {
            let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
            let report: Report = serde_json::from_slice(&bytes)?;
            reports.insert(report.report_id.clone(), report);
        }
    }
    Ok(reports)
}

impl Engine {
    fn report_handle(&self, report_id: &ReportId) -> Result<Arc<Mutex<Report>>> {
        self.reports
            .read()
            .get(report_id)
            .cloned()
            .ok_or_else(|| Error::not_found("report", report_id.as_str()))
    }

    fn persist_report(&self, report: &Report) -> Result<()> {
        if let Some(layout) = self.layout() {
            let path = layout.reports().join(format!("{}.json", report.report_id));
            write_atomic(&path, &serde_json::to_vec_pretty(report)?)?;
        }
        Ok(())
    }

    pub fn create_report(&self, session_id: Option<SessionId>, title: &str) -> Result<Report> {
        if let Some(sid) = &session_id {
            self.session(sid)?;
        }
        let report = Report::new(ReportId(self.ids.next_id("rep")), session_id, title);
        self.persist_report(&report)?;
        self.reports.write().insert(report.report_id.clone(), Arc::new(Mutex::new(report.clone())));
        Ok(report)
    }

    pub fn report(&self, report_id: &ReportId) -> Result<Report> {
        Ok(self.report_handle(report_id)?.lock().clone())
    }

    /// Applies `f` to the report and persists it when `f` succeeds.
    pub fn update_report<T>(&self, report_id: &ReportId, f: impl FnOnce(&mut Report) -> Result<T>) -> Result<T> {
        let handle = self.report_handle(report_id)?;
        let mut report = handle.lock();
        let mut draft = report.clone();
        let out = f(&mut draft)?;
        self.persist_report(&draft)?;
        *report = draft;
        Ok(out)
    }

    pub fn add_section(&self, report_id: &ReportId, heading: &str, instruction: &str) -> Result<Section> {
        self.update_report(report_id, |r| Ok(r.add_section(heading, instruction).clone()))
    }

    pub fn assign_block(&self, report_id: &ReportId, section_id: &str, block_id: &BlockId, position: usize) -> Result<Report> {
        self.store.read().block(block_id)?;
        self.update_report(report_id, |r| {
            r.assign_block(section_id, block_id.clone(), position)?;
            Ok(r.clone())
        })
    }

    /// Drafts one section with the LLM from its heading, instruction and blocks.
    pub fn generate_section(&self, report_id: &ReportId, section_id: &str) -> Result<Section> {
        let handle = self.report_handle(report_id)?;
        let mut report = handle.lock();
        let section = report.section(section_id)?.clone();
        if section.blocks.is_empty() && section.instruction.trim().is_empty() {
            return Err(Error::Invalid(format!("section {section_id} has neither blocks nor an instruction")));
        }
        let (segments, _) = render_blocks(&self.store.read(), section.blocks.iter());
        let request = LlmRequest {
            purpose: LlmPurpose::ReportSection,
            prompt: section_prompt(&section, &segments),
            max_chars: SECTION_MAX_CHARS,
        };
        let response = self.llm.complete(&request)?;
        let mut updated = report.clone();
        let revision = updated.edit_draft(section_id, response.text)?;
        debug_assert!(revision > section.draft_revision);
        self.persist_report(&updated)?;
        *report = updated;
        Ok(report.section(section_id)?.clone())
    }

    pub fn export_report(&self, report_id: &ReportId, format: ExportFormat) -> Result<Vec<u8>> {
        let report = self.report(report_id)?;
        export_report(&report, &self.store.read(), format)
    }
}
