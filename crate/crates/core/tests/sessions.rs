mod common;

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use blockrag_core::events::{fold_staging, EventKind, EventPayload};
use blockrag_core::index::{Embedder, ReferenceEmbedder};
use blockrag_core::llm::{count_segments, LlmPurpose, MockLlm};
use blockrag_core::session::{NewSession, Rating, Role};
use blockrag_core::validation::{BlockSnapshot, EditKind, EditRequest};
use blockrag_core::{BlockId, BlockPayload, Engine, Error, SessionId};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn engine_with(llm: Arc<MockLlm>) -> Engine {
    let engine = common::deterministic().adapters(common::adapters("mock")).llm(llm).build().unwrap();
    common::ingest_corpus(&engine);
    engine
}

fn open(engine: &Engine, strategy: &str) -> SessionId {
    engine
        .create_session(NewSession { user_id: "geologist".into(), strategy: strategy.into(), ..Default::default() })
        .unwrap()
        .session_id
}

fn retrieved(message: &blockrag_core::session::ChatMessage) -> Vec<BlockId> {
    message.retrieval_result.as_ref().unwrap().block_ids().cloned().collect()
}

#[test]
fn first_symbiotic_query_matches_naive() {
    let engine = common::corpus_engine("mock");
    let naive = open(&engine, "naive");
    let symbiotic = open(&engine, "symbiotic");
    let (a, _) = engine.post_query(&naive, "zinc grade of the best intercept").unwrap();
    let (b, _) = engine.post_query(&symbiotic, "zinc grade of the best intercept").unwrap();
    assert_eq!(a.retrieval_result.unwrap().items, b.retrieval_result.unwrap().items);
}

#[test]
fn second_symbiotic_query_sees_only_earlier_events() {
    let llm = Arc::new(MockLlm::echo());
    let engine = engine_with(llm.clone());
    let sid = open(&engine, "symbiotic");
    engine.post_query(&sid, "garnet skarn").unwrap();
    let (retrieval, _) = engine.post_query(&sid, "fuel drums").unwrap();
    let summary = retrieval.retrieval_result.unwrap().intention_summary.unwrap();
    assert_eq!(summary.summary_text, "USER SEEKS: garnet skarn");
    assert_eq!(summary.source_event_count, 1);
}

#[test]
fn answer_mentions_block_count() {
    let engine = common::corpus_engine("mock");
    assert!(engine.index_snapshot().len() >= 5);
    let sid = open(&engine, "naive");
    let (retrieval, answer) = engine.post_query(&sid, "skarn").unwrap();
    assert_eq!(retrieved(&retrieval).len(), 5);
    assert!(answer.content.contains('5'), "{}", answer.content);
    assert_eq!(answer.role, Role::Assistant);
    assert_eq!(answer.reply_to, Some(retrieval.message_id.clone()));
}

#[test]
fn identical_queries_in_fresh_sessions_retrieve_identically() {
    let run = || {
        let engine = common::corpus_engine("mock");
        let sid = open(&engine, "label_naive");
        engine.post_query(&sid, "certified reference material").unwrap().0
    };
    let (a, b) = (run(), run());
    assert_eq!(serde_json::to_vec(&a).unwrap(), serde_json::to_vec(&b).unwrap());

    let engine = common::corpus_engine("mock");
    let (s1, s2) = (open(&engine, "naive"), open(&engine, "naive"));
    let r1 = engine.post_query(&s1, "road access").unwrap().0;
    let r2 = engine.post_query(&s2, "road access").unwrap().0;
    assert_eq!(r1.retrieval_result, r2.retrieval_result);
    assert_eq!(r1.citations, r2.citations);
}

#[test]
fn toggle_has_set_semantics() {
    let engine = common::corpus_engine("mock");
    let sid = open(&engine, "naive");
    let block = common::live_blocks(&engine)[0].block_id.clone();
    engine.toggle_block(&sid, &block, true).unwrap();
    assert!(engine.toggle_block(&sid, &block, false).unwrap().is_empty());
    engine.toggle_block(&sid, &block, true).unwrap();
    assert_eq!(engine.toggle_block(&sid, &block, true).unwrap().len(), 1);
}

#[test]
fn twenty_random_toggles_fold_to_oracle_state() {
    let engine = common::corpus_engine("mock");
    let blocks: Vec<BlockId> = common::live_blocks(&engine).into_iter().map(|b| b.block_id).take(6).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(20);
    for _ in 0..10 {
        let sid = open(&engine, "naive");
        let mut oracle = BTreeSet::new();
        for _ in 0..20 {
            let block = blocks[rng.gen_range(0..blocks.len())].clone();
            let select = rng.gen_bool(0.5);
            engine.toggle_block(&sid, &block, select).unwrap();
            if select {
                oracle.insert(block);
            } else {
                oracle.remove(&block);
            }
        }
        assert_eq!(engine.staging(&sid).unwrap(), oracle);
        assert_eq!(fold_staging(&engine.session_events(&sid)), oracle);
    }
}

#[test]
fn regenerate_prompts_with_retrieval_union_staging() {
    let llm = Arc::new(MockLlm::echo());
    let engine = engine_with(llm.clone());
    let sid = open(&engine, "naive");
    let (retrieval, answer) = engine.post_query(&sid, "zinc equivalent formula").unwrap();
    let shown = retrieved(&retrieval);

    let regenerated = engine.regenerate(&sid, &answer.message_id).unwrap();
    let last_prompt = |llm: &MockLlm| llm.requests().iter().rev().find(|r| r.purpose == LlmPurpose::Answer).unwrap().prompt.clone();
    assert_eq!(count_segments(&last_prompt(&llm)), shown.len());
    let cited: Vec<BlockId> = regenerated.citations.iter().map(|c| c.block_id.clone()).collect();
    assert_eq!(cited, shown);
    assert_eq!(regenerated.regenerated_from, Some(answer.message_id.clone()));

    // staging a retrieved block adds nothing
    engine.toggle_block(&sid, &shown[0], true).unwrap();
    engine.regenerate(&sid, &answer.message_id).unwrap();
    assert_eq!(count_segments(&last_prompt(&llm)), shown.len());

    // two blocks outside the retrieval grow the prompt by exactly two
    let extra: Vec<BlockId> =
        common::live_blocks(&engine).into_iter().map(|b| b.block_id).filter(|b| !shown.contains(b)).take(2).collect();
    for b in &extra {
        engine.toggle_block(&sid, b, true).unwrap();
    }
    let grown = engine.regenerate(&sid, &answer.message_id).unwrap();
    let expected: BTreeSet<BlockId> = shown.iter().chain(&extra).cloned().collect();
    assert_eq!(count_segments(&last_prompt(&llm)), expected.len());
    assert_eq!(grown.citations.iter().map(|c| c.block_id.clone()).collect::<BTreeSet<_>>(), expected);
}

#[test]
fn ratings_are_logged_and_last_wins() {
    let engine = common::corpus_engine("mock");
    let sid = open(&engine, "naive");
    let (retrieval, answer) = engine.post_query(&sid, "blanks").unwrap();
    engine.rate(&sid, &answer.message_id, true).unwrap();
    let last = engine.session_events(&sid).pop().unwrap();
    assert_eq!(last.payload, EventPayload::Like { message_id: answer.message_id.clone() });

    engine.rate(&sid, &answer.message_id, false).unwrap();
    let session = engine.session(&sid).unwrap();
    assert_eq!(session.message(&answer.message_id).unwrap().rating, Some(Rating::Disliked));
    let kinds: Vec<EventKind> = engine.session_events(&sid).iter().map(|e| e.kind()).collect();
    assert_eq!(kinds, [EventKind::SendQuery, EventKind::Like, EventKind::Dislike]);

    let user_message = retrieval.reply_to.unwrap();
    assert!(matches!(engine.rate(&sid, &user_message, true), Err(Error::Invalid(_))));
    assert!(matches!(engine.rate(&sid, &"m99".into(), true), Err(Error::NotFound { .. })));
}

#[test]
fn added_document_becomes_retrievable() {
    let engine = common::corpus_engine("mock");
    let store = engine.store_snapshot();
    let field_log = store.documents().find(|d| d.source_name == "field-log.txt").unwrap().document_id.clone();
    let report = store.documents().find(|d| d.source_name == "site-report.pdf").unwrap().document_id.clone();
    let sid = engine
        .create_session(NewSession {
            user_id: "u".into(),
            strategy: "naive".into(),
            corpus: Some(BTreeSet::from([report.clone()])),
            session_id: None,
        })
        .unwrap()
        .session_id;
    let query = "Black bear visited camp overnight";
    let (before, _) = engine.post_query(&sid, query).unwrap();
    assert!(before.retrieval_result.unwrap().items.iter().all(|i| i.document_id == report));

    let corpus = engine.add_document_to_corpus(&sid, &field_log).unwrap();
    assert_eq!(corpus, BTreeSet::from([report.clone(), field_log.clone()]));
    assert_eq!(engine.add_document_to_corpus(&sid, &field_log).unwrap(), corpus);

    let (after, _) = engine.post_query(&sid, query).unwrap();
    let top = &after.retrieval_result.unwrap().items[0];
    let index = engine.index_snapshot();
    let widened = BTreeSet::from([report, field_log.clone()]);
    let oracle = common::oracle::top_k(&index, &ReferenceEmbedder.embed(query).unwrap(), 1, None, Some(&widened));
    assert_eq!(top.block_id, oracle[0].0);
    assert_eq!(top.document_id, field_log);

    assert!(matches!(engine.add_document_to_corpus(&sid, &"doc_missing".into()), Err(Error::NotFound { .. })));
}

#[test]
fn clicks_and_navigation_are_validated_and_logged() {
    let engine = common::corpus_engine("mock");
    let sid = open(&engine, "naive");
    let (retrieval, _) = engine.post_query(&sid, "assay").unwrap();
    let first = retrieved(&retrieval)[0].clone();
    let doc = engine.block(&first).unwrap().document_id;
    engine.click_result(&sid, &retrieval.message_id, &first).unwrap();
    engine.navigate_page(&sid, &doc, 0).unwrap();
    let outsider = common::live_blocks(&engine).into_iter().map(|b| b.block_id).find(|b| !retrieved(&retrieval).contains(b)).unwrap();
    assert!(matches!(engine.click_result(&sid, &retrieval.message_id, &outsider), Err(Error::Invalid(_))));
    assert!(matches!(engine.navigate_page(&sid, &doc, 999), Err(Error::Invalid(_))));
    let kinds: Vec<EventKind> = engine.session_events(&sid).iter().map(|e| e.kind()).collect();
    assert_eq!(kinds, [EventKind::SendQuery, EventKind::ClickResult, EventKind::NavigatePage]);
}

#[test]
fn bad_requests_are_rejected_without_logging() {
    let engine = common::corpus_engine("mock");
    let sid = open(&engine, "naive");
    assert!(matches!(engine.post_query(&"ses_missing".into(), "q"), Err(Error::NotFound { .. })));
    assert!(matches!(engine.post_query(&sid, "   "), Err(Error::Invalid(_))));
    assert!(matches!(engine.toggle_block(&sid, &"blk_missing".into(), true), Err(Error::NotFound { .. })));
    assert!(matches!(engine.set_satisfaction(&sid, 0), Err(Error::Invalid(_))));
    assert!(matches!(engine.set_satisfaction(&sid, 6), Err(Error::Invalid(_))));
    assert!(matches!(
        engine.create_session(NewSession { user_id: "u".into(), strategy: "raw_log".into(), ..Default::default() }),
        Err(Error::NotFound { .. })
    ));
    assert!(engine.session_events(&sid).is_empty());
}

#[test]
fn removed_blocks_cannot_be_staged() {
    let engine = common::corpus_engine("mock");
    let sid = open(&engine, "naive");
    let block = common::live_blocks(&engine)[0].clone();
    let mut after = BlockSnapshot::of(&block);
    after.tombstoned = true;
    engine
        .edit_block(&block.block_id, EditRequest {
            editor_id: "r".into(),
            edit_kind: EditKind::RemoveBlock,
            base_revision: block.revision,
            before: Some(BlockSnapshot::of(&block)),
            after,
        })
        .unwrap();
    assert!(matches!(engine.toggle_block(&sid, &block.block_id, true), Err(Error::Invalid(_))));
}

#[test]
fn past_messages_keep_the_revision_they_cited() {
    let engine = common::corpus_engine("mock");
    let sid = open(&engine, "naive");
    let (retrieval, _) = engine.post_query(&sid, "Camp was operated from May to September").unwrap();
    let cited = retrieval.citations[0].clone();
    let block = engine.block(&cited.block_id).unwrap();
    let mut after = BlockSnapshot::of(&block);
    after.raw_payload = Some(match block.raw_payload.clone().unwrap() {
        BlockPayload::Text { text } => BlockPayload::text(format!("{text} (reviewed)")),
        other => other,
    });
    let kind = match block.block_type.payload_kind() {
        blockrag_core::model::PayloadKind::Text => EditKind::CorrectText,
        _ => return,
    };
    engine
        .edit_block(&block.block_id, EditRequest {
            editor_id: "r".into(),
            edit_kind: kind,
            base_revision: block.revision,
            before: Some(BlockSnapshot::of(&block)),
            after,
        })
        .unwrap();
    let session = engine.session(&sid).unwrap();
    assert_eq!(session.message(&retrieval.message_id).unwrap().citations[0], cited);
    assert_eq!(engine.block(&cited.block_id).unwrap().revision, cited.revision + 1);
}

#[test]
fn sessions_survive_a_restart() {
    let dir = tempfile::tempdir().unwrap();
    let (sid, snapshot) = {
        let engine = common::persistent_corpus_engine("mock", dir.path());
        let sid = open(&engine, "symbiotic");
        let (retrieval, answer) = engine.post_query(&sid, "sphalerite").unwrap();
        engine.toggle_block(&sid, &retrieved(&retrieval)[0], true).unwrap();
        engine.rate(&sid, &answer.message_id, true).unwrap();
        engine.set_satisfaction(&sid, 4).unwrap();
        (sid.clone(), engine.session(&sid).unwrap())
    };
    let engine = Engine::builder().data_dir(dir.path()).build().unwrap();
    let reloaded = engine.session(&sid).unwrap();
    assert_eq!(reloaded, snapshot);
    assert_eq!(fold_staging(&engine.session_events(&sid)), reloaded.staging);
    // the next event continues the sequence rather than restarting it
    let block = reloaded.staging.iter().next().unwrap().clone();
    engine.toggle_block(&sid, &block, false).unwrap();
    let ids: Vec<String> = engine.session_events(&sid).iter().map(|e| e.event_id.clone()).collect();
    let unique: BTreeSet<&String> = ids.iter().collect();
    assert_eq!(unique.len(), ids.len());
}

#[test]
fn tampered_log_is_detected_on_start() {
    let dir = tempfile::tempdir().unwrap();
    {
        let engine = common::persistent_corpus_engine("mock", dir.path());
        let sid = open(&engine, "naive");
        let block = common::live_blocks(&engine)[0].block_id.clone();
        engine.toggle_block(&sid, &block, true).unwrap();
    }
    std::fs::write(dir.path().join("events.jsonl"), b"").unwrap();
    assert!(Engine::builder().data_dir(dir.path()).build().is_err());
}

#[test]
fn concurrent_toggles_on_one_session_serialize() {
    let engine = common::corpus_engine("mock");
    let sid = open(&engine, "naive");
    let blocks: Vec<BlockId> = common::live_blocks(&engine).into_iter().map(|b| b.block_id).take(8).collect();
    std::thread::scope(|scope| {
        for (t, chunk) in blocks.chunks(2).enumerate() {
            let (engine, sid) = (&engine, &sid);
            scope.spawn(move || {
                for round in 0..25 {
                    for b in chunk {
                        engine.toggle_block(sid, b, (round + t) % 2 == 0).unwrap();
                    }
                }
            });
        }
    });
    let events = engine.session_events(&sid);
    assert_eq!(events.len(), 8 * 25);
    assert!(events.windows(2).all(|w| w[0].timestamp <= w[1].timestamp && w[0].event_id < w[1].event_id));
    assert_eq!(fold_staging(&events), engine.staging(&sid).unwrap());
}

#[test]
fn exported_log_is_one_json_object_per_line() {
    let engine = common::corpus_engine("mock");
    let sid = open(&engine, "naive");
    let (_, answer) = engine.post_query(&sid, "zinc").unwrap();
    engine.rate(&sid, &answer.message_id, true).unwrap();
    let bytes = engine.export_events().unwrap();
    let lines: Vec<serde_json::Value> =
        String::from_utf8(bytes).unwrap().lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 2);
    let kinds: BTreeMap<&str, usize> = lines.iter().fold(BTreeMap::new(), |mut m, v| {
        *m.entry(v["kind"].as_str().unwrap()).or_default() += 1;
        m
    });
    assert_eq!(kinds, BTreeMap::from([("Like", 1), ("SendQuery", 1)]));
}
