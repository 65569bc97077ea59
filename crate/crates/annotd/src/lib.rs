//! HTTP annotation service. Sessions hold a loaded case and its working
//! labels on the server; clients exchange slices (PNG), meshes (OBJ) and
//! JSON edits.
//!
//! Mutating requests must carry the session's `x-edit-token` header, which
//! is returned once when the session is opened.

mod render;
mod session;

use std::collections::hash_map::RandomState;
use std::collections::BTreeMap;
use std::hash::{BuildHasher, Hasher};
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use axum::extract::{Path as UrlPath, Query, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use parking_lot::RwLock;
use serde::{Deserialize, Serialize};
use serde_json::json;
use swct_core::segkit::Cage;
use swct_core::volcore::RegionCode;

pub use render::{encode_gray, encode_labels, slice_indices, window, Axis};
pub use session::{Edit, EditOutcome, Session, SessionSummary, CAGE_DIMS, CAGE_DIR, UNDO_LIMIT};

pub const EDIT_TOKEN_HEADER: &str = "x-edit-token";

pub struct AppState {
    data_root: PathBuf,
    sessions: RwLock<BTreeMap<String, Arc<RwLock<Session>>>>,
    counter: AtomicU64,
}

impl AppState {
    pub fn new(data_root: impl Into<PathBuf>) -> Arc<AppState> {
        Arc::new(AppState { data_root: data_root.into(), sessions: RwLock::new(BTreeMap::new()), counter: AtomicU64::new(0) })
    }

    fn session(&self, id: &str) -> Result<Arc<RwLock<Session>>, ApiError> {
        self.sessions.read().get(id).cloned().ok_or_else(|| ApiError::not_found(format!("no session '{id}'")))
    }

    fn resolve(&self, rel: &str) -> PathBuf {
        self.data_root.join(rel)
    }
}

#[derive(Debug)]
pub struct ApiError {
    pub status: StatusCode,
    pub message: String,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        Self { status, message: message.into() }
    }

    fn not_found(message: impl Into<String>) -> Self {
        Self::new(StatusCode::NOT_FOUND, message)
    }

    fn bad_request(message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, message)
    }
}

impl From<swct_core::Error> for ApiError {
    fn from(e: swct_core::Error) -> Self {
        use swct_core::Error as E;
        let status = match &e {
            E::Io { source, .. } if source.kind() == std::io::ErrorKind::NotFound => StatusCode::NOT_FOUND,
            E::Io { .. } | E::Predictor(_) => StatusCode::INTERNAL_SERVER_ERROR,
            E::GrowthCapExceeded { .. } | E::NonFiniteObjective { .. } => StatusCode::UNPROCESSABLE_ENTITY,
            _ => StatusCode::BAD_REQUEST,
        };
        ApiError::new(status, e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(json!({ "error": self.message }))).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

/// Runs blocking session work off the async executor.
async fn blocking<T: Send + 'static>(f: impl FnOnce() -> ApiResult<T> + Send + 'static) -> ApiResult<T> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, format!("worker failed: {e}")))?
}

fn check_token(s: &Session, headers: &HeaderMap) -> ApiResult<()> {
    match headers.get(EDIT_TOKEN_HEADER).and_then(|v| v.to_str().ok()) {
        Some(t) if t == s.edit_token => Ok(()),
        _ => Err(ApiError::new(StatusCode::FORBIDDEN, format!("missing or wrong {EDIT_TOKEN_HEADER}"))),
    }
}

fn parse_region(s: &str) -> ApiResult<RegionCode> {
    s.parse().map_err(|e: swct_core::Error| ApiError::bad_request(e.to_string()))
}

fn new_token() -> String {
    let mut h = RandomState::new().build_hasher();
    h.write_u64(0x5357_4354);
    format!("{:016x}", h.finish())
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/sessions", get(list_sessions).post(open_session))
        .route("/s/{id}/meta", get(meta))
        .route("/s/{id}/slice", get(slice))
        .route("/s/{id}/labels/slice", get(label_slice))
        .route("/s/{id}/edit", post(edit))
        .route("/s/{id}/undo", post(undo))
        .route("/s/{id}/save", post(save))
        .route("/s/{id}/mesh", get(mesh))
        .route("/s/{id}/dice", get(dice))
        .route("/s/{id}/cage", get(get_cage).put(put_cage))
        .with_state(state)
}

/// Serves the API until the process is stopped.
pub async fn serve(addr: SocketAddr, data_root: &Path) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("serving {} on http://{}", data_root.display(), listener.local_addr()?);
    axum::serve(listener, router(AppState::new(data_root))).await
}

async fn list_sessions(State(st): State<Arc<AppState>>) -> Json<Vec<SessionSummary>> {
    let sessions: Vec<_> = st.sessions.read().values().cloned().collect();
    Json(sessions.iter().map(|s| s.read().summary()).collect())
}

#[derive(Deserialize)]
struct OpenRequest {
    case: String,
}

#[derive(Serialize)]
struct Opened {
    id: String,
    edit_token: String,
    frames: usize,
}

async fn open_session(State(st): State<Arc<AppState>>, Json(req): Json<OpenRequest>) -> ApiResult<impl IntoResponse> {
    let dir = st.resolve(&req.case);
    if !dir.is_dir() {
        return Err(ApiError::not_found(format!("no case directory '{}'", req.case)));
    }
    let id = format!("s{}", st.counter.fetch_add(1, Ordering::Relaxed) + 1);
    let token = new_token();
    let (id2, token2) = (id.clone(), token.clone());
    let session = blocking(move || Ok(Session::open(id2, &dir, token2)?)).await?;
    let frames = session.seq.len();
    st.sessions.write().insert(id.clone(), Arc::new(RwLock::new(session)));
    Ok((StatusCode::CREATED, Json(Opened { id, edit_token: token, frames })))
}

async fn meta(State(st): State<Arc<AppState>>, UrlPath(id): UrlPath<String>) -> ApiResult<impl IntoResponse> {
    let s = st.session(&id)?;
    let s = s.read();
    let g = s.seq.geometry();
    let regions: Vec<_> =
        RegionCode::ALL.iter().map(|r| json!({ "code": r.code(), "name": r.name(), "color": r.color() })).collect();
    let cages: Vec<_> = s.cage_keys().iter().map(|(f, r)| json!({ "frame": f, "region": r.name() })).collect();
    Ok(Json(json!({
        "id": s.id,
        "case_id": s.seq.case_id,
        "case": s.case_dir.display().to_string(),
        "n_frames": s.seq.len(),
        "frame_interval_s": s.seq.frame_interval_s,
        "dims": g.dims,
        "spacing": g.spacing,
        "origin": g.origin,
        "regions": regions,
        "dirty": s.dirty,
        "undo_depth": s.undo_depth(),
        "cages": cages,
    })))
}

#[derive(Deserialize)]
struct SliceQuery {
    frame: usize,
    #[serde(default = "default_axis")]
    axis: Axis,
    index: usize,
    wc: Option<f64>,
    ww: Option<f64>,
}

fn default_axis() -> Axis {
    Axis::Axial
}

fn slice_of(s: &Session, q: &SliceQuery) -> ApiResult<(usize, usize, Vec<usize>)> {
    if q.frame >= s.seq.len() {
        return Err(ApiError::bad_request(format!("frame {} out of range 0..{}", q.frame, s.seq.len())));
    }
    let g = s.seq.geometry();
    let n = q.axis.extent(g);
    if q.index >= n {
        return Err(ApiError::bad_request(format!("slice index {} out of range 0..{n}", q.index)));
    }
    Ok(slice_indices(g, q.axis, q.index))
}

fn png(bytes: Vec<u8>) -> Response {
    ([(header::CONTENT_TYPE, "image/png")], bytes).into_response()
}

async fn slice(State(st): State<Arc<AppState>>, UrlPath(id): UrlPath<String>, Query(q): Query<SliceQuery>) -> ApiResult<Response> {
    let (wc, ww) = (q.wc.unwrap_or(40.0), q.ww.unwrap_or(400.0));
    if !(ww > 0.0 && ww.is_finite() && wc.is_finite()) {
        return Err(ApiError::bad_request("window width must be > 0"));
    }
    let s = st.session(&id)?;
    let s = s.read();
    let (w, h, idx) = slice_of(&s, &q)?;
    let data = s.seq.frames[q.frame].volume.data();
    let px: Vec<u8> = idx.iter().map(|&i| window(data[i], wc, ww)).collect();
    Ok(png(encode_gray(w, h, &px)))
}

async fn label_slice(
    State(st): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
    Query(q): Query<SliceQuery>,
) -> ApiResult<Response> {
    let s = st.session(&id)?;
    let s = s.read();
    let (w, h, idx) = slice_of(&s, &q)?;
    let codes = s.labels[q.frame].codes();
    // stray codes outside the palette render as background
    let px: Vec<u8> = idx.iter().map(|&i| if codes[i] < 10 { codes[i] } else { 0 }).collect();
    Ok(png(encode_labels(w, h, &px)))
}

async fn edit(
    State(st): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
    headers: HeaderMap,
    Json(e): Json<Edit>,
) -> ApiResult<Json<EditOutcome>> {
    let s = st.session(&id)?;
    blocking(move || {
        let mut s = s.write();
        check_token(&s, &headers)?;
        Ok(Json(s.apply(e)?))
    })
    .await
}

async fn undo(State(st): State<Arc<AppState>>, UrlPath(id): UrlPath<String>, headers: HeaderMap) -> ApiResult<Json<EditOutcome>> {
    let s = st.session(&id)?;
    blocking(move || {
        let mut s = s.write();
        check_token(&s, &headers)?;
        Ok(Json(s.undo()?))
    })
    .await
}

async fn save(State(st): State<Arc<AppState>>, UrlPath(id): UrlPath<String>, headers: HeaderMap) -> ApiResult<impl IntoResponse> {
    let s = st.session(&id)?;
    blocking(move || {
        let mut s = s.write();
        check_token(&s, &headers)?;
        let files = s.save()?;
        Ok(Json(json!({ "written": files })))
    })
    .await
}

#[derive(Deserialize)]
struct RegionQuery {
    frame: usize,
    region: String,
}

async fn mesh(State(st): State<Arc<AppState>>, UrlPath(id): UrlPath<String>, Query(q): Query<RegionQuery>) -> ApiResult<Response> {
    let region = parse_region(&q.region)?;
    let s = st.session(&id)?;
    let obj = blocking(move || Ok(s.read().mesh(q.frame, region)?.to_obj())).await?;
    Ok(([(header::CONTENT_TYPE, "model/obj")], obj).into_response())
}

#[derive(Deserialize)]
struct DiceQuery {
    #[serde(rename = "ref")]
    reference: String,
}

async fn dice(State(st): State<Arc<AppState>>, UrlPath(id): UrlPath<String>, Query(q): Query<DiceQuery>) -> ApiResult<impl IntoResponse> {
    let dir = st.resolve(&q.reference);
    if !dir.is_dir() {
        return Err(ApiError::not_found(format!("no reference case '{}'", q.reference)));
    }
    let s = st.session(&id)?;
    let report = blocking(move || Ok(s.read().dice(&dir)?)).await?;
    Ok(Json(report))
}

async fn get_cage(State(st): State<Arc<AppState>>, UrlPath(id): UrlPath<String>, Query(q): Query<RegionQuery>) -> ApiResult<Json<Cage>> {
    let region = parse_region(&q.region)?;
    let s = st.session(&id)?;
    blocking(move || Ok(Json(s.read().cage(q.frame, region)?))).await
}

async fn put_cage(
    State(st): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
    Query(q): Query<RegionQuery>,
    headers: HeaderMap,
    Json(cage): Json<Cage>,
) -> ApiResult<Json<EditOutcome>> {
    let region = parse_region(&q.region)?;
    let s = st.session(&id)?;
    blocking(move || {
        let mut s = s.write();
        check_token(&s, &headers)?;
        Ok(Json(s.put_cage(q.frame, region, cage)?))
    })
    .await
}
