//! Human/retriever alignment metrics and scripted strategy comparisons.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::engine::Engine;
use crate::error::{Error, Result};
use crate::ids::{BlockId, DocumentId, MessageId, SessionId};
use crate::retrievers::StrategyRegistry;
use crate::session::{NewSession, Role};

/// One minus the Jaccard similarity of the two sets. Two empty sets are
/// treated as perfectly aligned.
pub fn distance<T: Ord>(human: &BTreeSet<T>, retrieved: &BTreeSet<T>) -> f64 {
    let union = human.union(retrieved).count();
    if union == 0 {
        return 0.0;
    }
    let shared = human.intersection(retrieved).count();
    1.0 - shared as f64 / union as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConversationOutcome {
    pub session_id: SessionId,
    pub strategy_name: String,
    /// Blocks staged by the user when the session ended.
    pub human_selected: BTreeSet<BlockId>,
    /// Every block the retriever returned over the session.
    pub retriever_selected: BTreeSet<BlockId>,
    pub satisfaction_rating: Option<u8>,
    pub k: usize,
    pub distance: f64,
}

pub fn mean_satisfaction<'a>(outcomes: impl IntoIterator<Item = &'a ConversationOutcome>) -> Result<f64> {
    let ratings: Vec<u8> = outcomes.into_iter().filter_map(|o| o.satisfaction_rating).collect();
    if ratings.is_empty() {
        return Err(Error::Undefined("mean satisfaction needs at least one rated session".into()));
    }
    if let Some(bad) = ratings.iter().find(|r| !(1..=5).contains(*r)) {
        return Err(Error::Invalid(format!("satisfaction rating {bad} outside 1..=5")));
    }
    Ok(ratings.iter().map(|r| f64::from(*r)).sum::<f64>() / ratings.len() as f64)
}

pub fn mean_distance<'a>(outcomes: impl IntoIterator<Item = &'a ConversationOutcome>) -> Option<f64> {
    let ds: Vec<f64> = outcomes.into_iter().map(|o| o.distance).collect();
    (!ds.is_empty()).then(|| ds.iter().sum::<f64>() / ds.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "action", rename_all = "snake_case")]
pub enum ActionOp {
    Select { block_id: BlockId },
    Deselect { block_id: BlockId },
    /// Stage every block the turn's retrieval returned.
    SelectRetrieved,
    /// Stage the turn's n-th result (1-based).
    SelectRank { rank: usize },
    ClickRank { rank: usize },
    Navigate { document_id: DocumentId, page_index: u32 },
    AddDocument { document_id: DocumentId },
    Like,
    Dislike,
    Regenerate,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScriptAction {
    /// Index into `queries`; the action runs after that query is answered.
    pub turn: usize,
    #[serde(flatten)]
    pub op: ActionOp,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Script {
    pub name: String,
    /// Restricts the script to one strategy; runs under every strategy when absent.
    #[serde(default)]
    pub strategy: Option<String>,
    #[serde(default = "default_user")]
    pub user_id: String,
    #[serde(default)]
    pub corpus: Option<BTreeSet<DocumentId>>,
    pub queries: Vec<String>,
    #[serde(default)]
    pub actions: Vec<ScriptAction>,
    #[serde(default)]
    pub rating: Option<u8>,
    #[serde(skip)]
    source: Option<String>,
}

fn default_user() -> String {
    "evaluator".to_owned()
}

impl Script {
    pub fn new(name: impl Into<String>, queries: Vec<String>, actions: Vec<ScriptAction>, rating: Option<u8>) -> Self {
        Self {
            name: name.into(),
            strategy: None,
            user_id: default_user(),
            corpus: None,
            queries,
            actions,
            rating,
            source: None,
        }
    }

    pub fn parse(name: &str, text: &str) -> Result<Self> {
        let mut script: Script = serde_json::from_str(text).map_err(|e| Error::Script {
            script: name.to_owned(),
            line: e.line(),
            message: e.to_string(),
        })?;
        if script.name.is_empty() {
            script.name = name.to_owned();
        }
        script.source = Some(text.to_owned());
        Ok(script)
    }

    pub fn load_dir(dir: &Path) -> Result<Vec<Script>> {
        let mut paths: Vec<_> = std::fs::read_dir(dir)
            .map_err(|e| Error::io(dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "json"))
            .collect();
        paths.sort();
        paths
            .iter()
            .map(|p| {
                let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                let stem = p.file_stem().and_then(|s| s.to_str()).unwrap_or("script");
                Script::parse(stem, &text)
            })
            .collect()
    }

    fn runs_under(&self, strategy: &str) -> bool {
        self.strategy.as_deref().is_none_or(|s| StrategyRegistry::canonical_name(s) == strategy)
    }

    /// 1-based line of the first occurrence of `needle` in the script source.
    fn line_of(&self, needle: &str) -> usize {
        let rendered;
        let text = match &self.source {
            Some(s) => s.as_str(),
            None => {
                rendered = serde_json::to_string_pretty(self).unwrap_or_default();
                rendered.as_str()
            }
        };
        text.lines().position(|l| l.contains(needle)).map_or(0, |i| i + 1)
    }

    fn error(&self, needle: &str, message: impl Into<String>) -> Error {
        Error::Script { script: self.name.clone(), line: self.line_of(needle), message: message.into() }
    }

    /// Checks every reference against the engine's corpus before anything runs.
    pub fn validate(&self, engine: &Engine) -> Result<()> {
        if self.queries.is_empty() {
            return Err(self.error("queries", "script has no queries"));
        }
        if let Some(r) = self.rating {
            if !(1..=5).contains(&r) {
                return Err(self.error("rating", format!("rating {r} outside 1..=5")));
            }
        }
        engine.with_corpus(|store, _| {
            for doc in self.corpus.iter().flatten() {
                if !store.contains(doc) {
                    return Err(self.error(doc.as_str(), format!("unknown document {doc}")));
                }
            }
            for action in &self.actions {
                if action.turn >= self.queries.len() {
                    return Err(self.error("\"turn\"", format!("turn {} has no query", action.turn)));
                }
                match &action.op {
                    ActionOp::Select { block_id } | ActionOp::Deselect { block_id } => {
                        if store.block(block_id).is_err() {
                            return Err(self.error(block_id.as_str(), format!("unknown block {block_id}")));
                        }
                    }
                    ActionOp::Navigate { document_id, .. } | ActionOp::AddDocument { document_id } => {
                        if !store.contains(document_id) {
                            return Err(self.error(document_id.as_str(), format!("unknown document {document_id}")));
                        }
                    }
                    ActionOp::SelectRank { rank } | ActionOp::ClickRank { rank } if *rank == 0 => {
                        return Err(self.error("rank", "ranks are 1-based"));
                    }
                    _ => {}
                }
            }
            Ok(())
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    pub strategy: String,
    pub sessions: usize,
    pub mean_distance: Option<f64>,
    pub mean_satisfaction: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub rows: Vec<TableRow>,
    pub outcomes: Vec<ConversationOutcome>,
}

impl ExperimentReport {
    pub fn render_table(&self) -> String {
        let fmt = |v: Option<f64>, digits: usize| v.map_or("-".to_owned(), |v| format!("{v:.digits$}"));
        let mut out = String::new();
        let _ = writeln!(out, "{:<14} {:>8} {:>22} {:>16}", "Strategy", "Sessions", "Distance D (0-1, low)", "Satisfaction S");
        for row in &self.rows {
            let _ = writeln!(
                out,
                "{:<14} {:>8} {:>22} {:>16}",
                row.strategy,
                row.sessions,
                fmt(row.mean_distance, 3),
                fmt(row.mean_satisfaction, 2)
            );
        }
        out
    }

    pub fn row(&self, strategy: &str) -> Option<&TableRow> {
        self.rows.iter().find(|r| r.strategy == strategy)
    }
}

fn turn_messages(engine: &Engine, session_id: &SessionId, turn: usize) -> Result<(MessageId, MessageId)> {
    let session = engine.session(session_id)?;
    let retrieval = session
        .retrieval_messages()
        .nth(turn)
        .ok_or_else(|| Error::Invalid(format!("turn {turn} has no retrieval")))?;
    let assistant = session
        .messages
        .iter()
        .rev()
        .find(|m| m.role == Role::Assistant && m.reply_to.as_ref() == Some(&retrieval.message_id))
        .ok_or_else(|| Error::Invalid(format!("turn {turn} has no answer")))?;
    Ok((retrieval.message_id.clone(), assistant.message_id.clone()))
}

fn turn_results(engine: &Engine, session_id: &SessionId, turn: usize) -> Result<Vec<BlockId>> {
    let (retrieval, _) = turn_messages(engine, session_id, turn)?;
    let session = engine.session(session_id)?;
    Ok(session.message(&retrieval)?.retrieval_result.iter().flat_map(|r| r.block_ids().cloned()).collect())
}

impl Engine {
    /// Replays one script as a fresh session under `strategy`.
    pub fn replay_script(&self, script: &Script, strategy: &str, session_id: SessionId) -> Result<ConversationOutcome> {
        let session = self.create_session(NewSession {
            user_id: script.user_id.clone(),
            strategy: strategy.to_owned(),
            corpus: script.corpus.clone(),
            session_id: Some(session_id),
        })?;
        let sid = session.session_id;
        for (turn, query) in script.queries.iter().enumerate() {
            self.post_query(&sid, query)?;
            for action in script.actions.iter().filter(|a| a.turn == turn) {
                match &action.op {
                    ActionOp::Select { block_id } => {
                        self.toggle_block(&sid, block_id, true)?;
                    }
                    ActionOp::Deselect { block_id } => {
                        self.toggle_block(&sid, block_id, false)?;
                    }
                    ActionOp::SelectRetrieved => {
                        for block_id in turn_results(self, &sid, turn)? {
                            self.toggle_block(&sid, &block_id, true)?;
                        }
                    }
                    ActionOp::SelectRank { rank } => {
                        if let Some(block_id) = turn_results(self, &sid, turn)?.get(rank - 1) {
                            self.toggle_block(&sid, block_id, true)?;
                        }
                    }
                    ActionOp::ClickRank { rank } => {
                        let (retrieval, _) = turn_messages(self, &sid, turn)?;
                        if let Some(block_id) = turn_results(self, &sid, turn)?.get(rank - 1) {
                            self.click_result(&sid, &retrieval, block_id)?;
                        }
                    }
                    ActionOp::Navigate { document_id, page_index } => self.navigate_page(&sid, document_id, *page_index)?,
                    ActionOp::AddDocument { document_id } => {
                        self.add_document_to_corpus(&sid, document_id)?;
                    }
                    ActionOp::Like | ActionOp::Dislike => {
                        let (_, assistant) = turn_messages(self, &sid, turn)?;
                        self.rate(&sid, &assistant, action.op == ActionOp::Like)?;
                    }
                    ActionOp::Regenerate => {
                        let (_, assistant) = turn_messages(self, &sid, turn)?;
                        self.regenerate(&sid, &assistant)?;
                    }
                }
            }
        }
        if let Some(rating) = script.rating {
            self.set_satisfaction(&sid, rating)?;
        }
        let session = self.session(&sid)?;
        let human_selected = session.staging.clone();
        let retriever_selected = session.retrieved_blocks();
        Ok(ConversationOutcome {
            distance: distance(&human_selected, &retriever_selected),
            session_id: sid,
            strategy_name: session.strategy_name,
            human_selected,
            retriever_selected,
            satisfaction_rating: session.satisfaction,
            k: self.k(),
        })
    }

    /// Replays every script under every requested strategy and tabulates mean D and S.
    pub fn run_experiment(&self, scripts: &[Script], strategies: &[String]) -> Result<ExperimentReport> {
        let strategies: Vec<String> = strategies
            .iter()
            .map(|s| self.strategies.get(s).map(|s| s.name().to_owned()))
            .collect::<Result<_>>()?;
        for script in scripts {
            script.validate(self)?;
        }
        let run = self.ids.next_id("run");
        let mut outcomes = Vec::new();
        let mut rows = Vec::new();
        for strategy in &strategies {
            let start = outcomes.len();
            for script in scripts.iter().filter(|s| s.runs_under(strategy)) {
                let sid = SessionId(format!("{run}-{}-{strategy}", script.name));
                outcomes.push(self.replay_script(script, strategy, sid)?);
            }
            let mine = &outcomes[start..];
            rows.push(TableRow {
                strategy: strategy.clone(),
                sessions: mine.len(),
                mean_distance: mean_distance(mine),
                mean_satisfaction: mean_satisfaction(mine).ok(),
            });
        }
        Ok(ExperimentReport { rows, outcomes })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(items: &[&str]) -> BTreeSet<String> {
        items.iter().map(|s| s.to_string()).collect()
    }

    fn rated(r: u8) -> ConversationOutcome {
        ConversationOutcome {
            session_id: "s".into(),
            strategy_name: "naive".into(),
            human_selected: BTreeSet::new(),
            retriever_selected: BTreeSet::new(),
            satisfaction_rating: Some(r),
            k: 5,
            distance: 0.0,
        }
    }

    #[test]
    fn distance_examples() {
        assert_eq!(distance(&set(&["a", "b"]), &set(&["a", "b"])), 0.0);
        assert_eq!(distance(&set(&["a"]), &set(&["b"])), 1.0);
        let d = distance(&set(&["a", "b", "c"]), &set(&["a", "b", "d", "e"]));
        assert!((d - 0.6).abs() < 1e-12);
        assert_eq!(distance(&set(&[]), &set(&[])), 0.0);
    }

    #[test]
    fn satisfaction_means() {
        let m = |rs: &[u8]| mean_satisfaction(&rs.iter().map(|r| rated(*r)).collect::<Vec<_>>()).unwrap();
        assert_eq!(m(&[4, 4, 4]), 4.0);
        assert_eq!(m(&[1, 5]), 3.0);
        assert!((m(&[2, 3, 2, 1, 3]) - 2.2).abs() < 1e-12);
        assert!(matches!(mean_satisfaction(&[]), Err(Error::Undefined(_))));
    }

    #[test]
    fn script_json_shape() {
        let text = r#"{
  "name": "s1",
  "strategy": "naive",
  "queries": ["zinc grade"],
  "actions": [
    {"turn": 0, "action": "select_rank", "rank": 1},
    {"turn": 0, "action": "select", "block_id": "blk_x"}
  ],
  "rating": 4
}"#;
        let script = Script::parse("s1", text).unwrap();
        assert_eq!(script.actions[0].op, ActionOp::SelectRank { rank: 1 });
        assert_eq!(script.line_of("blk_x"), 7);
        assert!(script.runs_under("naive"));
        assert!(!script.runs_under("symbiotic"));
    }
}
