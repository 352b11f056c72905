mod common;

use std::sync::Arc;

use blockrag_core::llm::{count_segments, LlmPurpose, MockLlm};
use blockrag_core::report::ExportFormat;
use blockrag_core::validation::{BlockSnapshot, EditKind, EditRequest};
use blockrag_core::{BlockId, Engine, Error, ReportId};

fn engine_with(llm: Arc<MockLlm>) -> Engine {
    let engine = common::deterministic().adapters(common::adapters("mock")).llm(llm).build().unwrap();
    common::ingest_corpus(&engine);
    engine
}

fn blocks(engine: &Engine, n: usize) -> Vec<BlockId> {
    common::live_blocks(engine).into_iter().map(|b| b.block_id).take(n).collect()
}

fn last_section_prompt(llm: &MockLlm) -> String {
    llm.requests().iter().rev().find(|r| r.purpose == LlmPurpose::ReportSection).unwrap().prompt.clone()
}

/// Two sections holding three distinct blocks.
fn two_section_report(engine: &Engine) -> ReportId {
    let ids = blocks(engine, 3);
    let report = engine.create_report(None, "Hollow Creek review").unwrap().report_id;
    let s1 = engine.add_section(&report, "Geology", "Summarise the mineralisation").unwrap().section_id;
    let s2 = engine.add_section(&report, "Assays", "List the best results").unwrap().section_id;
    engine.assign_block(&report, &s1, &ids[0], 0).unwrap();
    engine.assign_block(&report, &s1, &ids[1], 1).unwrap();
    engine.assign_block(&report, &s2, &ids[2], 0).unwrap();
    engine.generate_section(&report, &s1).unwrap();
    engine.generate_section(&report, &s2).unwrap();
    report
}

fn markdown_sources(bytes: &[u8]) -> Vec<String> {
    let text = String::from_utf8(bytes.to_vec()).unwrap();
    let appendix = text.split("## Sources\n").nth(1).unwrap();
    appendix.lines().filter(|l| l.chars().next().is_some_and(|c| c.is_ascii_digit())).map(str::to_owned).collect()
}

#[test]
fn generated_draft_mentions_block_count() {
    let llm = Arc::new(MockLlm::echo());
    let engine = engine_with(llm.clone());
    let report = engine.create_report(None, "r").unwrap().report_id;
    let section = engine.add_section(&report, "Intro", "Overview").unwrap().section_id;
    for (i, id) in blocks(&engine, 3).iter().enumerate() {
        engine.assign_block(&report, &section, id, i).unwrap();
    }
    let drafted = engine.generate_section(&report, &section).unwrap();
    assert!(drafted.draft.contains('3'), "{}", drafted.draft);
    assert_eq!(drafted.draft_revision, 1);
    assert_eq!(engine.generate_section(&report, &section).unwrap().draft_revision, 2);
}

#[test]
fn instruction_only_section_sends_zero_segments() {
    let llm = Arc::new(MockLlm::echo());
    let engine = engine_with(llm.clone());
    let report = engine.create_report(None, "r").unwrap().report_id;
    let section = engine.add_section(&report, "Outlook", "Describe next season").unwrap().section_id;
    engine.generate_section(&report, &section).unwrap();
    assert_eq!(count_segments(&last_section_prompt(&llm)), 0);

    let empty = engine.add_section(&report, "Blank", "").unwrap().section_id;
    assert!(matches!(engine.generate_section(&report, &empty), Err(Error::Invalid(_))));
}

#[test]
fn adding_a_block_adds_one_prompt_segment() {
    let llm = Arc::new(MockLlm::echo());
    let engine = engine_with(llm.clone());
    let ids = blocks(&engine, 3);
    let report = engine.create_report(None, "r").unwrap().report_id;
    let section = engine.add_section(&report, "Body", "Write it").unwrap().section_id;
    engine.assign_block(&report, &section, &ids[0], 0).unwrap();
    engine.assign_block(&report, &section, &ids[1], 1).unwrap();
    engine.generate_section(&report, &section).unwrap();
    let before = last_section_prompt(&llm);
    engine.assign_block(&report, &section, &ids[2], 1).unwrap();
    engine.generate_section(&report, &section).unwrap();
    let after = last_section_prompt(&llm);
    assert_eq!(count_segments(&after), count_segments(&before) + 1);
    // the old segments are all still there
    let segments = |p: &str| p.lines().filter(|l| l.starts_with("[source: ")).map(str::to_owned).collect::<Vec<_>>();
    let (old, new) = (segments(&before), segments(&after));
    assert!(old.iter().all(|s| new.contains(s)));
}

#[test]
fn failed_generation_keeps_the_previous_draft() {
    let engine = engine_with(Arc::new(MockLlm::echo().failing_for(LlmPurpose::ReportSection)));
    let report = engine.create_report(None, "r").unwrap().report_id;
    let section = engine.add_section(&report, "Body", "Write it").unwrap().section_id;
    assert!(engine.generate_section(&report, &section).is_err());
    let s = engine.report(&report).unwrap().section(&section).unwrap().clone();
    assert_eq!((s.draft.as_str(), s.draft_revision), ("", 0));
}

#[test]
fn unknown_blocks_cannot_be_assigned() {
    let engine = common::corpus_engine("mock");
    let report = engine.create_report(None, "r").unwrap().report_id;
    let section = engine.add_section(&report, "Body", "").unwrap().section_id;
    assert!(matches!(engine.assign_block(&report, &section, &"blk_nope".into(), 0), Err(Error::NotFound { .. })));
    assert!(matches!(engine.create_report(Some("ses_nope".into()), "x"), Err(Error::NotFound { .. })));
}

#[test]
fn two_sections_three_blocks_export_three_sources() {
    let engine = common::corpus_engine("mock");
    let report = two_section_report(&engine);
    let md = engine.export_report(&report, ExportFormat::Markdown).unwrap();
    assert_eq!(markdown_sources(&md).len(), 3);
    let html = String::from_utf8(engine.export_report(&report, ExportFormat::Html).unwrap()).unwrap();
    assert_eq!(html.matches("<li data-block-id=").count(), 3);
    let text = String::from_utf8(md.clone()).unwrap();
    assert!(text.find("## Geology").unwrap() < text.find("## Assays").unwrap());
    assert_eq!(md, engine.export_report(&report, ExportFormat::Markdown).unwrap());
}

#[test]
fn export_is_byte_identical_across_engines() {
    let export = || {
        let engine = common::corpus_engine("mock");
        let report = two_section_report(&engine);
        (
            engine.export_report(&report, ExportFormat::Markdown).unwrap(),
            engine.export_report(&report, ExportFormat::Html).unwrap(),
        )
    };
    assert_eq!(export(), export());
}

#[test]
fn removed_sources_stay_in_the_appendix_with_a_notice() {
    let engine = common::corpus_engine("mock");
    let report = two_section_report(&engine);
    let cited = engine.report(&report).unwrap().sections[0].blocks[0].clone();
    let block = engine.block(&cited).unwrap();
    let mut after = BlockSnapshot::of(&block);
    after.tombstoned = true;
    engine
        .edit_block(&cited, EditRequest {
            editor_id: "r".into(),
            edit_kind: EditKind::RemoveBlock,
            base_revision: block.revision,
            before: Some(BlockSnapshot::of(&block)),
            after,
        })
        .unwrap();
    let sources = markdown_sources(&engine.export_report(&report, ExportFormat::Markdown).unwrap());
    assert_eq!(sources.len(), 3);
    assert!(sources.iter().any(|l| l.contains(cited.as_str()) && l.contains("(removed content)")));
}

#[test]
fn reports_reload_from_disk() {
    let dir = tempfile::tempdir().unwrap();
    let (report, snapshot, bytes) = {
        let engine = common::persistent_corpus_engine("mock", dir.path());
        let report = two_section_report(&engine);
        let bytes = engine.export_report(&report, ExportFormat::Html).unwrap();
        (report.clone(), engine.report(&report).unwrap(), bytes)
    };
    let engine = Engine::builder().data_dir(dir.path()).build().unwrap();
    assert_eq!(engine.report(&report).unwrap(), snapshot);
    assert_eq!(engine.export_report(&report, ExportFormat::Html).unwrap(), bytes);
}
