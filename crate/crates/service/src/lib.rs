//! HTTP service over the extraction pipeline and the review queue.
//!
//! Routes:
//!
//! | method | path                       | body / query                         |
//! |--------|----------------------------|--------------------------------------|
//! | POST   | `/extract`                 | `{"sentences": [..]}`                |
//! | POST   | `/queue`                   | `{"sentences": [..]}` or `{"docs": [record..]}` |
//! | GET    | `/queue`                   | `?status=pending&page=0&per_page=50` |
//! | GET    | `/items/{id}`              |                                      |
//! | POST   | `/items/{id}/correction`   | `{"verdict", "spans"?, "relations"?, "revision"?}` |
//! | GET    | `/export/train`            | `?include_rejected=true`             |
//! | GET    | `/healthz`                 |                                      |
//!
//! Every error body is `{"code", "message", "violations"}`.

pub mod store;

use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::{Arc, RwLock};

use axum::extract::rejection::{JsonRejection, QueryRejection};
use axum::extract::{DefaultBodyLimit, Path, Query, State};
use axum::http::{header, HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};

use evitab::corpus::{
    write_annotations_string, AnnotationRecord, Doc, EntitySpan, RelationEdge, RelationRecord,
};
use evitab::tabulate::{assemble_table, docs_from_sentences};
use evitab::{EvidenceTable, Pipeline};

pub use store::{Index, RecordStore, ReviewItem, Status, StoreError, Verdict};

pub const DEFAULT_BATCH_CAP: usize = 10_000;
pub const DEFAULT_PAGE_SIZE: usize = 50;
pub const MAX_PAGE_SIZE: usize = 1_000;
pub const LOG_FILE: &str = "review.jsonl";
pub const PORT_ENV: &str = "EVITAB_PORT";
pub const DATA_DIR_ENV: &str = "EVITAB_DATA_DIR";
pub const DEFAULT_PORT: u16 = 8080;

#[derive(Debug, Clone)]
pub struct ServiceConfig {
    /// Most sentences or docs accepted by one extract or enqueue request.
    pub batch_cap: usize,
    pub page_size: usize,
    /// Request bodies beyond this many bytes are refused before parsing.
    pub body_limit: usize,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        ServiceConfig {
            batch_cap: DEFAULT_BATCH_CAP,
            page_size: DEFAULT_PAGE_SIZE,
            body_limit: 64 << 20,
        }
    }
}

#[derive(Clone)]
pub struct AppState {
    pipeline: Option<Arc<Pipeline>>,
    store: Arc<RwLock<RecordStore>>,
    config: Arc<ServiceConfig>,
}

impl AppState {
    pub fn new(pipeline: Option<Pipeline>, store: RecordStore, config: ServiceConfig) -> Self {
        AppState {
            pipeline: pipeline.map(Arc::new),
            store: Arc::new(RwLock::new(store)),
            config: Arc::new(config),
        }
    }

    pub fn store(&self) -> &RwLock<RecordStore> {
        &self.store
    }
}

#[derive(Debug, Serialize, Deserialize, PartialEq, Eq)]
pub struct ErrorBody {
    pub code: String,
    pub message: String,
    pub violations: Vec<String>,
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    body: ErrorBody,
}

impl ApiError {
    fn new(status: StatusCode, code: &str, message: impl Into<String>) -> Self {
        ApiError {
            status,
            body: ErrorBody {
                code: code.to_owned(),
                message: message.into(),
                violations: Vec::new(),
            },
        }
    }

    fn bad_request(message: impl Into<String>) -> Self {
        ApiError::new(StatusCode::BAD_REQUEST, "bad_request", message)
    }

    fn internal(message: impl Into<String>) -> Self {
        ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", message)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(self.body)).into_response()
    }
}

impl From<StoreError> for ApiError {
    fn from(e: StoreError) -> Self {
        match e {
            StoreError::NotFound(_) => {
                ApiError::new(StatusCode::NOT_FOUND, "not_found", e.to_string())
            }
            StoreError::Conflict(_) => {
                ApiError::new(StatusCode::CONFLICT, "conflict", e.to_string())
            }
            StoreError::Invalid {
                message,
                violations,
            } => ApiError {
                status: StatusCode::UNPROCESSABLE_ENTITY,
                body: ErrorBody {
                    code: "validation".into(),
                    message,
                    violations,
                },
            },
            StoreError::Io { .. } | StoreError::Corrupt { .. } => ApiError::internal(e.to_string()),
        }
    }
}

impl From<evitab::Error> for ApiError {
    fn from(e: evitab::Error) -> Self {
        ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "pipeline", e.to_string())
    }
}

impl From<JsonRejection> for ApiError {
    fn from(e: JsonRejection) -> Self {
        match e {
            JsonRejection::BytesRejection(_) => {
                ApiError::new(StatusCode::PAYLOAD_TOO_LARGE, "oversize", e.body_text())
            }
            _ => ApiError::bad_request(e.body_text()),
        }
    }
}

impl From<QueryRejection> for ApiError {
    fn from(e: QueryRejection) -> Self {
        ApiError::bad_request(e.body_text())
    }
}

type ApiResult<T> = Result<T, ApiError>;

pub fn router(state: AppState) -> Router {
    let limit = state.config.body_limit;
    Router::new()
        .route("/extract", post(extract))
        .route("/queue", post(enqueue).get(list_queue))
        .route("/items/{id}", get(get_item))
        .route("/items/{id}/correction", post(correct))
        .route("/export/train", get(export_train))
        .route("/healthz", get(healthz))
        .layer(DefaultBodyLimit::max(limit))
        .with_state(state)
}

fn check_cap(n: usize, cap: usize) -> ApiResult<()> {
    if n > cap {
        Err(ApiError::new(
            StatusCode::PAYLOAD_TOO_LARGE,
            "oversize",
            format!("{n} items exceed the batch cap of {cap}"),
        ))
    } else {
        Ok(())
    }
}

fn pipeline(state: &AppState) -> ApiResult<Arc<Pipeline>> {
    state.pipeline.clone().ok_or_else(|| {
        ApiError::new(
            StatusCode::SERVICE_UNAVAILABLE,
            "models_unavailable",
            "no models loaded",
        )
    })
}

async fn annotate_all(pipeline: Arc<Pipeline>, docs: Vec<Doc>) -> ApiResult<Vec<Doc>> {
    tokio::task::spawn_blocking(move || {
        docs.iter()
            .map(|d| pipeline.annotate(d))
            .collect::<evitab::Result<Vec<_>>>()
    })
    .await
    .map_err(|e| ApiError::internal(e.to_string()))?
    .map_err(ApiError::from)
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExtractRequest {
    pub sentences: Vec<String>,
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
pub struct Extraction {
    #[serde(flatten)]
    pub doc: AnnotationRecord,
    pub table: EvidenceTable,
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
pub struct ExtractResponse {
    pub results: Vec<Extraction>,
}

async fn extract(
    State(state): State<AppState>,
    body: Result<Json<ExtractRequest>, JsonRejection>,
) -> ApiResult<Json<ExtractResponse>> {
    let Json(req) = body?;
    check_cap(req.sentences.len(), state.config.batch_cap)?;
    let pipeline = pipeline(&state)?;
    let docs = annotate_all(pipeline, docs_from_sentences(&req.sentences)).await?;
    let results = docs
        .iter()
        .map(|d| Extraction {
            doc: AnnotationRecord::from(d),
            table: assemble_table(d),
        })
        .collect();
    Ok(Json(ExtractResponse { results }))
}

/// Raw sentences get `input:<k>` ids; records keep theirs. Either way the
/// pipeline replaces any annotations they carry.
#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnqueueRequest {
    #[serde(default)]
    pub sentences: Vec<String>,
    #[serde(default)]
    pub docs: Vec<AnnotationRecord>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ItemsResponse {
    pub items: Vec<ReviewItem>,
}

async fn enqueue(
    State(state): State<AppState>,
    body: Result<Json<EnqueueRequest>, JsonRejection>,
) -> ApiResult<(StatusCode, Json<ItemsResponse>)> {
    let Json(req) = body?;
    check_cap(req.sentences.len() + req.docs.len(), state.config.batch_cap)?;
    let pipeline = pipeline(&state)?;
    let mut docs = Vec::new();
    for (k, record) in req.docs.into_iter().enumerate() {
        let Some(_) = record.id else {
            return Err(ApiError::bad_request(format!("docs[{k}] has no id")));
        };
        let doc = record.into_doc(|_| unreachable!()).unannotated();
        let violations = doc.violations();
        if !violations.is_empty() {
            return Err(ApiError {
                status: StatusCode::UNPROCESSABLE_ENTITY,
                body: ErrorBody {
                    code: "validation".into(),
                    message: format!("docs[{k}] ({}) is malformed", doc.id),
                    violations,
                },
            });
        }
        docs.push(doc);
    }
    let mut raw = docs_from_sentences(&req.sentences);
    if !raw.is_empty() {
        let mut store = state.store.write().expect("store lock poisoned");
        for d in &mut raw {
            d.id = store.fresh_input_id();
        }
    }
    docs.extend(raw);
    let annotated = annotate_all(pipeline, docs).await?;
    let items = state
        .store
        .write()
        .expect("store lock poisoned")
        .enqueue(annotated)?;
    Ok((StatusCode::CREATED, Json(ItemsResponse { items })))
}

#[derive(Debug, Deserialize)]
pub struct ListQuery {
    status: Option<String>,
    #[serde(default)]
    page: usize,
    per_page: Option<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct QueuePage {
    pub status: Option<Status>,
    pub page: usize,
    pub per_page: usize,
    /// Items matching the filter across all pages.
    pub total: usize,
    pub items: Vec<ReviewItem>,
}

/// Pages are in enqueue order, so a page's contents only change when items
/// before it change status.
async fn list_queue(
    State(state): State<AppState>,
    query: Result<Query<ListQuery>, QueryRejection>,
) -> ApiResult<Json<QueuePage>> {
    let Query(q) = query?;
    let status = match q.status.as_deref() {
        None | Some("") | Some("all") => None,
        Some(s) => Some(
            Status::parse(s)
                .ok_or_else(|| ApiError::bad_request(format!("unknown status {s:?}")))?,
        ),
    };
    let per_page = q.per_page.unwrap_or(state.config.page_size);
    if per_page == 0 || per_page > MAX_PAGE_SIZE {
        return Err(ApiError::bad_request(format!(
            "per_page must be in 1..={MAX_PAGE_SIZE}"
        )));
    }
    let store = state.store.read().expect("store lock poisoned");
    let index = store.index();
    let total = index.iter(status).count();
    let items = index
        .iter(status)
        .skip(q.page.saturating_mul(per_page))
        .take(per_page)
        .cloned()
        .collect();
    Ok(Json(QueuePage {
        status,
        page: q.page,
        per_page,
        total,
        items,
    }))
}

async fn get_item(
    State(state): State<AppState>,
    Path(id): Path<String>,
) -> ApiResult<Json<ReviewItem>> {
    let store = state.store.read().expect("store lock poisoned");
    store
        .index()
        .get(&id)
        .cloned()
        .map(Json)
        .ok_or_else(|| StoreError::NotFound(id).into())
}

/// Omitted `spans` and `relations` keep the item's current annotations.
#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorrectionRequest {
    pub verdict: Verdict,
    #[serde(default)]
    pub spans: Option<Vec<EntitySpan>>,
    #[serde(default)]
    pub relations: Option<Vec<RelationRecord>>,
    /// Revision the correction was made against; a mismatch is a conflict.
    #[serde(default)]
    pub revision: Option<u64>,
}

async fn correct(
    State(state): State<AppState>,
    Path(id): Path<String>,
    body: Result<Json<CorrectionRequest>, JsonRejection>,
) -> ApiResult<Json<ReviewItem>> {
    let Json(req) = body?;
    let mut store = state.store.write().expect("store lock poisoned");
    let corrected = match (&req.spans, &req.relations) {
        (None, None) => None,
        _ => {
            let item = store
                .index()
                .get(&id)
                .ok_or_else(|| StoreError::NotFound(id.clone()))?;
            let mut doc = item.doc();
            if let Some(spans) = req.spans {
                doc.entities = spans;
            }
            if let Some(relations) = &req.relations {
                doc.relations = relations.iter().map(RelationEdge::from).collect();
            }
            Some(doc)
        }
    };
    Ok(Json(store.correct(
        &id,
        corrected,
        req.verdict,
        req.revision,
    )?))
}

#[derive(Debug, Deserialize)]
pub struct ExportQuery {
    #[serde(default)]
    include_rejected: bool,
}

pub const COUNT_HEADER: &str = "x-evitab-count";

async fn export_train(
    State(state): State<AppState>,
    query: Result<Query<ExportQuery>, QueryRejection>,
) -> ApiResult<Response> {
    let Query(q) = query?;
    let docs = state
        .store
        .read()
        .expect("store lock poisoned")
        .export(q.include_rejected);
    let mut res = write_annotations_string(&docs).into_response();
    let headers = res.headers_mut();
    headers.insert(
        header::CONTENT_TYPE,
        HeaderValue::from_static("application/x-ndjson"),
    );
    headers.insert(COUNT_HEADER, HeaderValue::from(docs.len()));
    Ok(res)
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Health {
    pub status: String,
    pub models_loaded: bool,
    pub items: usize,
}

async fn healthz(State(state): State<AppState>) -> Json<Health> {
    let items = state
        .store
        .read()
        .expect("store lock poisoned")
        .index()
        .len();
    Json(Health {
        status: "ok".into(),
        models_loaded: state.pipeline.is_some(),
        items,
    })
}

/// Port from `EVITAB_PORT` (default 8080) and log path under
/// `EVITAB_DATA_DIR` (default `./data`).
pub fn env_defaults() -> Result<(u16, PathBuf), String> {
    let port = match std::env::var(PORT_ENV) {
        Ok(p) => p
            .parse()
            .map_err(|_| format!("{PORT_ENV}={p:?} is not a port"))?,
        Err(_) => DEFAULT_PORT,
    };
    let dir = std::env::var_os(DATA_DIR_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("data"));
    Ok((port, dir))
}

/// Serves until ctrl-c.
pub async fn serve(addr: SocketAddr, state: AppState) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}
