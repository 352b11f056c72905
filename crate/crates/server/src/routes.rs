//! HTTP handlers. Each one decodes the request, calls one engine operation
//! and encodes the result.

use std::collections::BTreeSet;
use std::path::Path as FsPath;
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{DefaultBodyLimit, Path, Query, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post, put};
use axum::{Json, Router};
use blockrag_core::evaluation::{ExperimentReport, Script};
use blockrag_core::ingestion::{PipelineJob, SourceFormat};
use blockrag_core::report::{ExportFormat, Report, Section};
use blockrag_core::session::{ChatMessage, ChatSession, NewSession};
use blockrag_core::validation::{EditRequest, PendingFilter, PendingPage, ValidationEdit};
use blockrag_core::{BlockId, BlockType, Document, DocumentId, Engine, LayoutBlock, ProcessingState, ReportId, SessionId};
use serde::{Deserialize, Serialize};

use crate::error::{ApiError, ApiResult};
use crate::jobs::IngestPool;

pub const USER_HEADER: &str = "x-user-id";
const UPLOAD_LIMIT: usize = 256 * 1024 * 1024;

#[derive(Clone)]
pub struct AppState {
    pub engine: Arc<Engine>,
    pub pool: IngestPool,
}

impl AppState {
    pub fn new(engine: Arc<Engine>, ingest_workers: usize) -> Self {
        Self { engine, pool: IngestPool::new(ingest_workers) }
    }
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/health", get(health))
        .route("/strategies", get(strategies))
        .route("/documents", post(upload).get(list_documents))
        .route("/documents/{id}", get(document))
        .route("/documents/{id}/source", get(source_pdf))
        .route("/documents/{id}/blocks", post(add_block))
        .route("/documents/{id}/pages/{n}/blocks", get(page_blocks))
        .route("/documents/{id}/pages/{n}/image", get(page_image))
        .route("/jobs", get(jobs))
        .route("/jobs/{id}", get(job))
        .route("/blocks/{id}", get(block))
        .route("/blocks/{id}/history", get(block_history))
        .route("/blocks/{id}/edits", post(edit_block))
        .route("/validation/pending", get(pending))
        .route("/validation/corrections/export", get(export_corrections))
        .route("/sessions", post(create_session).get(list_sessions))
        .route("/sessions/{id}", get(session))
        .route("/sessions/{id}/query", post(query))
        .route("/sessions/{id}/staging", get(staging))
        .route("/sessions/{id}/events", get(session_events))
        .route("/sessions/{id}/blocks/{bid}/toggle", post(toggle))
        .route("/sessions/{id}/messages/{mid}/regenerate", post(regenerate))
        .route("/sessions/{id}/messages/{mid}/rate", post(rate))
        .route("/sessions/{id}/messages/{mid}/click", post(click))
        .route("/sessions/{id}/navigate", post(navigate))
        .route("/sessions/{id}/documents", post(add_document))
        .route("/sessions/{id}/satisfaction", post(satisfaction))
        .route("/reports", post(create_report))
        .route("/reports/{id}", get(report))
        .route("/reports/{id}/sections", post(add_section))
        .route("/reports/{id}/sections/{sid}/blocks", post(assign_block))
        .route("/reports/{id}/sections/{sid}/blocks/{bid}", axum::routing::delete(unassign_block))
        .route("/reports/{id}/sections/{sid}/move", post(move_section))
        .route("/reports/{id}/sections/{sid}/instruction", put(set_instruction))
        .route("/reports/{id}/sections/{sid}/draft", put(edit_draft))
        .route("/reports/{id}/sections/{sid}/generate", post(generate_section))
        .route("/reports/{id}/export", get(export_report))
        .route("/eval/run", post(eval_run))
        .route("/events/export", get(export_events))
        .layer(DefaultBodyLimit::max(UPLOAD_LIMIT))
        .with_state(state)
}

/// Runs a blocking engine call off the async workers.
async fn call<T, F>(state: &AppState, f: F) -> ApiResult<T>
where
    T: Send + 'static,
    F: FnOnce(&Engine) -> blockrag_core::Result<T> + Send + 'static,
{
    let engine = state.engine.clone();
    tokio::task::spawn_blocking(move || f(&engine))
        .await
        .map_err(|e| ApiError::internal(e.to_string()))?
        .map_err(ApiError::from)
}

fn body(content_type: &'static str, bytes: Vec<u8>) -> Response {
    ([(header::CONTENT_TYPE, content_type)], bytes).into_response()
}

fn user_from(headers: &HeaderMap) -> Option<String> {
    headers.get(USER_HEADER).and_then(|v| v.to_str().ok()).map(str::to_owned)
}

async fn health() -> Json<serde_json::Value> {
    Json(serde_json::json!({ "status": "ok" }))
}

async fn strategies(State(state): State<AppState>) -> Json<Vec<String>> {
    Json(state.engine.strategies().names().map(str::to_owned).collect())
}

// documents and ingestion

#[derive(Debug, Deserialize)]
pub struct UploadParams {
    pub filename: String,
    /// Overrides the extension of `filename`.
    pub format: Option<String>,
    /// Answer after the pipeline finishes instead of with 202.
    #[serde(default)]
    pub wait: bool,
}

async fn upload(State(state): State<AppState>, Query(params): Query<UploadParams>, bytes: Bytes) -> ApiResult<Response> {
    let format = match &params.format {
        Some(f) => f.parse::<SourceFormat>()?,
        None => SourceFormat::from_path(FsPath::new(&params.filename))?,
    };
    if params.wait {
        let job = state.pool.run(state.engine.clone(), &params.filename, bytes.to_vec(), format).await?;
        Ok((StatusCode::OK, Json(job)).into_response())
    } else {
        let job = state.pool.submit(state.engine.clone(), &params.filename, bytes.to_vec(), format);
        Ok((StatusCode::ACCEPTED, Json(job)).into_response())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DocumentSummary {
    pub document_id: DocumentId,
    pub source_name: String,
    pub page_count: u32,
    pub processing_state: ProcessingState,
}

async fn list_documents(State(state): State<AppState>) -> Json<Vec<DocumentSummary>> {
    Json(state.engine.with_corpus(|store, _| {
        store
            .documents()
            .map(|d| DocumentSummary {
                document_id: d.document_id.clone(),
                source_name: d.source_name.clone(),
                page_count: d.page_count,
                processing_state: d.processing_state,
            })
            .collect()
    }))
}

async fn document(State(state): State<AppState>, Path(id): Path<String>) -> ApiResult<Json<Document>> {
    Ok(Json(call(&state, move |e| e.document(&DocumentId(id))).await?))
}

async fn page_blocks(State(state): State<AppState>, Path((id, n)): Path<(String, u32)>) -> ApiResult<Json<Vec<LayoutBlock>>> {
    Ok(Json(call(&state, move |e| e.page_blocks(&DocumentId(id), n)).await?))
}

async fn read_file(path: Option<std::path::PathBuf>, what: &'static str, id: String) -> ApiResult<Vec<u8>> {
    let path = path.ok_or_else(|| ApiError::from(blockrag_core::Error::not_found(what, id)))?;
    tokio::fs::read(&path).await.map_err(|e| ApiError::from(blockrag_core::Error::io(path, e)))
}

async fn page_image(State(state): State<AppState>, Path((id, n)): Path<(String, u32)>) -> ApiResult<Response> {
    let doc = DocumentId(id.clone());
    state.engine.document(&doc)?;
    let path = state.engine.page_image(&doc, n);
    let content_type = match path.as_ref().and_then(|p| p.extension()).and_then(|e| e.to_str()) {
        Some("jpg" | "jpeg") => "image/jpeg",
        Some("webp") => "image/webp",
        _ => "image/png",
    };
    Ok(body(content_type, read_file(path, "page image", format!("{id}/{n}")).await?))
}

async fn source_pdf(State(state): State<AppState>, Path(id): Path<String>) -> ApiResult<Response> {
    let path = state.engine.source_pdf(&DocumentId(id.clone()));
    Ok(body("application/pdf", read_file(path, "document source", id).await?))
}

async fn add_block(
    State(state): State<AppState>,
    Path(id): Path<String>,
    Json(request): Json<EditRequest>,
) -> ApiResult<(StatusCode, Json<LayoutBlock>)> {
    let block = call(&state, move |e| e.add_block(&DocumentId(id), request)).await?;
    Ok((StatusCode::CREATED, Json(block)))
}

async fn jobs(State(state): State<AppState>) -> Json<Vec<PipelineJob>> {
    Json(state.engine.jobs())
}

async fn job(State(state): State<AppState>, Path(id): Path<String>) -> ApiResult<Json<PipelineJob>> {
    Ok(Json(state.engine.job(&id)?))
}

// validation

async fn block(State(state): State<AppState>, Path(id): Path<String>) -> ApiResult<Json<LayoutBlock>> {
    Ok(Json(state.engine.block(&BlockId(id))?))
}

async fn block_history(State(state): State<AppState>, Path(id): Path<String>) -> ApiResult<Json<Vec<ValidationEdit>>> {
    let id = BlockId(id);
    state.engine.block(&id)?;
    Ok(Json(state.engine.block_history(&id)))
}

async fn edit_block(
    State(state): State<AppState>,
    Path(id): Path<String>,
    Json(request): Json<EditRequest>,
) -> ApiResult<Json<LayoutBlock>> {
    Ok(Json(call(&state, move |e| e.edit_block(&BlockId(id), request)).await?))
}

#[derive(Debug, Deserialize)]
pub struct PendingParams {
    pub document_id: String,
    /// `needs_validation` (default) or `all`.
    pub filter: Option<String>,
    /// Restricts to one block type, e.g. `Table`.
    pub block_type: Option<String>,
    #[serde(default)]
    pub cursor: usize,
    pub page_size: Option<usize>,
}

async fn pending(State(state): State<AppState>, Query(params): Query<PendingParams>) -> ApiResult<Json<PendingPage>> {
    let filter = match (&params.block_type, params.filter.as_deref()) {
        (Some(t), _) => PendingFilter::BlockType(
            serde_json::from_value::<BlockType>(serde_json::Value::String(t.clone()))
                .map_err(|_| ApiError::invalid(format!("unknown block type {t:?}")))?,
        ),
        (None, None | Some("needs_validation")) => PendingFilter::NeedsValidation,
        (None, Some("all")) => PendingFilter::All,
        (None, Some(other)) => return Err(ApiError::invalid(format!("unknown filter {other:?}"))),
    };
    let page_size = params.page_size.unwrap_or(50);
    Ok(Json(state.engine.pending(&DocumentId(params.document_id), filter, params.cursor, page_size)?))
}

async fn export_corrections(State(state): State<AppState>) -> ApiResult<Response> {
    Ok(body("application/x-ndjson", state.engine.export_corrections()?))
}

// sessions

#[derive(Debug, Deserialize)]
pub struct CreateSession {
    pub user_id: Option<String>,
    pub strategy: String,
    #[serde(default)]
    pub corpus: Option<BTreeSet<DocumentId>>,
    #[serde(default)]
    pub session_id: Option<SessionId>,
}

async fn create_session(
    State(state): State<AppState>,
    headers: HeaderMap,
    Json(request): Json<CreateSession>,
) -> ApiResult<(StatusCode, Json<ChatSession>)> {
    let user_id = request
        .user_id
        .or_else(|| user_from(&headers))
        .ok_or_else(|| ApiError::invalid(format!("user_id missing from body and {USER_HEADER} header")))?;
    let new = NewSession { user_id, strategy: request.strategy, corpus: request.corpus, session_id: request.session_id };
    let session = call(&state, move |e| e.create_session(new)).await?;
    Ok((StatusCode::CREATED, Json(session)))
}

async fn list_sessions(State(state): State<AppState>) -> Json<Vec<SessionId>> {
    Json(state.engine.session_ids())
}

async fn session(State(state): State<AppState>, Path(id): Path<String>) -> ApiResult<Json<ChatSession>> {
    Ok(Json(state.engine.session(&SessionId(id))?))
}

#[derive(Debug, Deserialize)]
pub struct QueryRequest {
    pub query: String,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct QueryResponse {
    pub retrieval: ChatMessage,
    pub answer: ChatMessage,
}

async fn query(
    State(state): State<AppState>,
    Path(id): Path<String>,
    Json(request): Json<QueryRequest>,
) -> ApiResult<Json<QueryResponse>> {
    let (retrieval, answer) = call(&state, move |e| e.post_query(&SessionId(id), &request.query)).await?;
    Ok(Json(QueryResponse { retrieval, answer }))
}

async fn staging(State(state): State<AppState>, Path(id): Path<String>) -> ApiResult<Json<BTreeSet<BlockId>>> {
    Ok(Json(state.engine.staging(&SessionId(id))?))
}

async fn session_events(State(state): State<AppState>, Path(id): Path<String>) -> ApiResult<Json<Vec<blockrag_core::events::InteractionEvent>>> {
    let id = SessionId(id);
    state.engine.session(&id)?;
    Ok(Json(state.engine.session_events(&id)))
}

#[derive(Debug, Deserialize)]
pub struct ToggleRequest {
    pub select: bool,
}

async fn toggle(
    State(state): State<AppState>,
    Path((id, bid)): Path<(String, String)>,
    Json(request): Json<ToggleRequest>,
) -> ApiResult<Json<BTreeSet<BlockId>>> {
    Ok(Json(call(&state, move |e| e.toggle_block(&SessionId(id), &BlockId(bid), request.select)).await?))
}

async fn regenerate(State(state): State<AppState>, Path((id, mid)): Path<(String, String)>) -> ApiResult<Json<ChatMessage>> {
    Ok(Json(call(&state, move |e| e.regenerate(&SessionId(id), &blockrag_core::MessageId(mid))).await?))
}

#[derive(Debug, Deserialize)]
pub struct RateRequest {
    pub liked: bool,
}

async fn rate(
    State(state): State<AppState>,
    Path((id, mid)): Path<(String, String)>,
    Json(request): Json<RateRequest>,
) -> ApiResult<StatusCode> {
    call(&state, move |e| e.rate(&SessionId(id), &blockrag_core::MessageId(mid), request.liked)).await?;
    Ok(StatusCode::NO_CONTENT)
}

#[derive(Debug, Deserialize)]
pub struct ClickRequest {
    pub block_id: BlockId,
}

async fn click(
    State(state): State<AppState>,
    Path((id, mid)): Path<(String, String)>,
    Json(request): Json<ClickRequest>,
) -> ApiResult<StatusCode> {
    call(&state, move |e| e.click_result(&SessionId(id), &blockrag_core::MessageId(mid), &request.block_id)).await?;
    Ok(StatusCode::NO_CONTENT)
}

#[derive(Debug, Deserialize)]
pub struct NavigateRequest {
    pub document_id: DocumentId,
    pub page_index: u32,
}

async fn navigate(
    State(state): State<AppState>,
    Path(id): Path<String>,
    Json(request): Json<NavigateRequest>,
) -> ApiResult<StatusCode> {
    call(&state, move |e| e.navigate_page(&SessionId(id), &request.document_id, request.page_index)).await?;
    Ok(StatusCode::NO_CONTENT)
}

#[derive(Debug, Deserialize)]
pub struct AddDocumentRequest {
    pub document_id: DocumentId,
}

async fn add_document(
    State(state): State<AppState>,
    Path(id): Path<String>,
    Json(request): Json<AddDocumentRequest>,
) -> ApiResult<Json<BTreeSet<DocumentId>>> {
    Ok(Json(call(&state, move |e| e.add_document_to_corpus(&SessionId(id), &request.document_id)).await?))
}

#[derive(Debug, Deserialize)]
pub struct SatisfactionRequest {
    pub rating: u8,
}

async fn satisfaction(
    State(state): State<AppState>,
    Path(id): Path<String>,
    Json(request): Json<SatisfactionRequest>,
) -> ApiResult<StatusCode> {
    call(&state, move |e| e.set_satisfaction(&SessionId(id), request.rating)).await?;
    Ok(StatusCode::NO_CONTENT)
}

// reports

#[derive(Debug, Deserialize)]
pub struct CreateReport {
    pub title: String,
    #[serde(default)]
    pub session_id: Option<SessionId>,
}

async fn create_report(State(state): State<AppState>, Json(request): Json<CreateReport>) -> ApiResult<(StatusCode, Json<Report>)> {
    let report = call(&state, move |e| e.create_report(request.session_id, &request.title)).await?;
    Ok((StatusCode::CREATED, Json(report)))
}

async fn report(State(state): State<AppState>, Path(id): Path<String>) -> ApiResult<Json<Report>> {
    Ok(Json(state.engine.report(&ReportId(id))?))
}

#[derive(Debug, Deserialize)]
pub struct AddSection {
    pub heading: String,
    #[serde(default)]
    pub instruction: String,
}

async fn add_section(
    State(state): State<AppState>,
    Path(id): Path<String>,
    Json(request): Json<AddSection>,
) -> ApiResult<(StatusCode, Json<Section>)> {
    let section = call(&state, move |e| e.add_section(&ReportId(id), &request.heading, &request.instruction)).await?;
    Ok((StatusCode::CREATED, Json(section)))
}

#[derive(Debug, Deserialize)]
pub struct AssignBlock {
    pub block_id: BlockId,
    pub position: usize,
}

async fn assign_block(
    State(state): State<AppState>,
    Path((id, sid)): Path<(String, String)>,
    Json(request): Json<AssignBlock>,
) -> ApiResult<Json<Report>> {
    Ok(Json(call(&state, move |e| e.assign_block(&ReportId(id), &sid, &request.block_id, request.position)).await?))
}

async fn unassign_block(
    State(state): State<AppState>,
    Path((id, sid, bid)): Path<(String, String, String)>,
) -> ApiResult<Json<Report>> {
    Ok(Json(
        call(&state, move |e| {
            e.update_report(&ReportId(id), |r| {
                r.unassign_block(&sid, &BlockId(bid))?;
                Ok(r.clone())
            })
        })
        .await?,
    ))
}

#[derive(Debug, Deserialize)]
pub struct MoveSection {
    pub position: usize,
}

async fn move_section(
    State(state): State<AppState>,
    Path((id, sid)): Path<(String, String)>,
    Json(request): Json<MoveSection>,
) -> ApiResult<Json<Report>> {
    Ok(Json(
        call(&state, move |e| {
            e.update_report(&ReportId(id), |r| {
                r.move_section(&sid, request.position)?;
                Ok(r.clone())
            })
        })
        .await?,
    ))
}

#[derive(Debug, Deserialize)]
pub struct SetInstruction {
    pub instruction: String,
}

async fn set_instruction(
    State(state): State<AppState>,
    Path((id, sid)): Path<(String, String)>,
    Json(request): Json<SetInstruction>,
) -> ApiResult<Json<Section>> {
    Ok(Json(
        call(&state, move |e| {
            e.update_report(&ReportId(id), |r| {
                r.set_instruction(&sid, request.instruction)?;
                r.section(&sid).cloned()
            })
        })
        .await?,
    ))
}

#[derive(Debug, Deserialize)]
pub struct EditDraft {
    pub draft: String,
}

async fn edit_draft(
    State(state): State<AppState>,
    Path((id, sid)): Path<(String, String)>,
    Json(request): Json<EditDraft>,
) -> ApiResult<Json<Section>> {
    Ok(Json(
        call(&state, move |e| {
            e.update_report(&ReportId(id), |r| {
                r.edit_draft(&sid, request.draft)?;
                r.section(&sid).cloned()
            })
        })
        .await?,
    ))
}

async fn generate_section(State(state): State<AppState>, Path((id, sid)): Path<(String, String)>) -> ApiResult<Json<Section>> {
    Ok(Json(call(&state, move |e| e.generate_section(&ReportId(id), &sid)).await?))
}

#[derive(Debug, Deserialize)]
pub struct ExportParams {
    pub format: Option<String>,
}

async fn export_report(
    State(state): State<AppState>,
    Path(id): Path<String>,
    Query(params): Query<ExportParams>,
) -> ApiResult<Response> {
    let format: ExportFormat = params.format.as_deref().unwrap_or("md").parse()?;
    let bytes = call(&state, move |e| e.export_report(&ReportId(id), format)).await?;
    let content_type = match format {
        ExportFormat::Markdown => "text/markdown; charset=utf-8",
        ExportFormat::Html => "text/html; charset=utf-8",
    };
    Ok(body(content_type, bytes))
}

// evaluation and events

#[derive(Debug, Deserialize)]
pub struct EvalRequest {
    pub scripts: Vec<Script>,
    pub strategies: Vec<String>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct EvalResponse {
    pub report: ExperimentReport,
    pub table: String,
}

async fn eval_run(State(state): State<AppState>, Json(request): Json<EvalRequest>) -> ApiResult<Json<EvalResponse>> {
    let report = call(&state, move |e| e.run_experiment(&request.scripts, &request.strategies)).await?;
    Ok(Json(EvalResponse { table: report.render_table(), report }))
}

async fn export_events(State(state): State<AppState>) -> ApiResult<Response> {
    Ok(body("application/x-ndjson", state.engine.export_events()?))
}
