use std::collections::BTreeMap;
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{Path, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use histoloop_core::active::{load_current_round, rank_slides_for_review, save_round, RoundStatus};
use histoloop_core::cluster::{ClusterStatus, Decision, Progress, SessionConfig, GRID_SIDE};
use histoloop_core::{EventMeta, TissueClass};

use crate::error::ApiError;
use crate::layout::{parse_patch_name, valid_id};
use crate::sessions::{session_id_for, KeyCheck, SessionSlot};
use crate::AppState;

pub const TOKEN_HEADER: &str = "x-session-token";
pub const ACTOR_HEADER: &str = "x-actor";
pub const IDEMPOTENCY_HEADER: &str = "idempotency-key";
const DEFAULT_ACTOR: &str = "annotator";

type AppResult<T> = Result<T, ApiError>;
type Shared = State<Arc<AppState>>;

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/health", get(health))
        .route("/sessions", post(create_session))
        .route("/sessions/{id}", get(get_session))
        .route("/sessions/{id}/next", get(next_grid))
        .route("/sessions/{id}/review", post(submit_review))
        .route("/sessions/{id}/recluster", post(recluster))
        .route("/sessions/{id}/finalize", post(finalize))
        .route("/rounds/current", get(round_dashboard))
        .route("/rounds/current/flags", post(set_flag))
        .route("/slides/{id}/overlay.png", get(overlay))
        .route("/slides/{id}/patches/{name}", get(patch))
        .with_state(state)
}

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> AppResult<T> + Send + 'static) -> AppResult<T> {
    tokio::task::spawn_blocking(f).await.map_err(ApiError::internal)?
}

fn parse_body<T: DeserializeOwned + Default>(body: &Bytes) -> AppResult<T> {
    if body.iter().all(u8::is_ascii_whitespace) {
        return Ok(T::default());
    }
    serde_json::from_slice(body).map_err(|e| ApiError::invalid(format!("malformed request body: {e}")))
}

struct Caller {
    actor: String,
    token: Option<String>,
    key: Option<String>,
}

impl Caller {
    fn from_headers(headers: &HeaderMap) -> Self {
        let get = |name: &str| headers.get(name).and_then(|v| v.to_str().ok()).map(str::trim).filter(|s| !s.is_empty()).map(String::from);
        Self {
            actor: get(ACTOR_HEADER).unwrap_or_else(|| DEFAULT_ACTOR.to_string()),
            token: get(TOKEN_HEADER),
            key: get(IDEMPOTENCY_HEADER),
        }
    }

    fn meta(&self) -> EventMeta {
        EventMeta::now(&self.actor)
    }

    fn authorize(&self, slot: &SessionSlot) -> AppResult<()> {
        match &self.token {
            None => Err(ApiError::new(StatusCode::UNAUTHORIZED, "missing_token", format!("the {TOKEN_HEADER} header is required"))),
            Some(t) if *t == slot.meta.token => Ok(()),
            Some(_) => Err(ApiError::new(StatusCode::FORBIDDEN, "wrong_token", "the session token does not match")),
        }
    }
}

fn lookup(state: &AppState, id: &str) -> AppResult<Arc<std::sync::Mutex<SessionSlot>>> {
    state.session(id).ok_or_else(|| ApiError::not_found(format!("no session `{id}`")))
}

async fn health() -> &'static str {
    "ok"
}

#[derive(Debug, Serialize)]
struct ClusterView {
    cluster_id: usize,
    size: usize,
    #[serde(flatten)]
    status: ClusterStatus,
}

#[derive(Debug, Serialize)]
struct ResultView {
    labeled: usize,
    discarded: usize,
    discard_fraction: f64,
    class_counts: BTreeMap<&'static str, u64>,
}

#[derive(Debug, Serialize)]
struct SessionDescriptor {
    session_id: String,
    slide_id: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    token: Option<String>,
    status: &'static str,
    round: u8,
    k: usize,
    queue: Vec<usize>,
    progress: Progress,
    transitions: Vec<&'static str>,
    clusters: Vec<ClusterView>,
    #[serde(skip_serializing_if = "Option::is_none")]
    result: Option<ResultView>,
    #[serde(skip_serializing_if = "std::ops::Not::not")]
    replayed: bool,
}

fn transitions(slot: &SessionSlot) -> Vec<&'static str> {
    let s = &slot.session;
    if s.is_finalized() {
        vec![]
    } else if !s.review_queue().is_empty() {
        vec!["review"]
    } else if s.round() == 1 && !s.heterogeneous_clusters().is_empty() {
        vec!["recluster"]
    } else {
        vec!["finalize"]
    }
}

fn class_counts(counts: &histoloop_core::ClassCounts) -> BTreeMap<&'static str, u64> {
    TissueClass::ALL.iter().map(|c| (c.name(), counts[*c])).collect()
}

fn describe(slot: &SessionSlot, with_token: bool) -> SessionDescriptor {
    let s = &slot.session;
    let assignment = s.current_assignment();
    let sizes = assignment.sizes();
    SessionDescriptor {
        session_id: slot.meta.session_id.clone(),
        slide_id: slot.meta.slide_id.clone(),
        token: with_token.then(|| slot.meta.token.clone()),
        status: if s.is_finalized() { "finalized" } else { "open" },
        round: s.round(),
        k: assignment.k,
        queue: s.review_queue(),
        progress: s.progress(),
        transitions: transitions(slot),
        clusters: s
            .statuses()
            .iter()
            .enumerate()
            .map(|(i, st)| ClusterView { cluster_id: i, size: sizes[i], status: *st })
            .collect(),
        result: s.result().map(|r| ResultView {
            labeled: r.records.len(),
            discarded: r.discarded.len(),
            discard_fraction: r.discard_fraction(),
            class_counts: class_counts(&r.class_counts()),
        }),
        replayed: false,
    }
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct CreateRequest {
    slide_id: String,
    k: Option<usize>,
    seed: Option<u64>,
}

async fn create_session(State(state): Shared, headers: HeaderMap, body: Bytes) -> AppResult<Response> {
    let req: CreateRequest = parse_body(&body)?;
    if !valid_id(&req.slide_id) {
        return Err(ApiError::invalid(format!("`{}` is not a valid slide id", req.slide_id)));
    }
    if req.k == Some(0) {
        return Err(ApiError::invalid("k must be at least 1"));
    }
    let caller = Caller::from_headers(&headers);
    blocking(move || {
        let _guard = state.create_lock.lock().expect("create lock poisoned");
        let session_id = session_id_for(&req.slide_id);
        if let Some(existing) = state.session(&session_id) {
            let slot = existing.lock().expect("session poisoned");
            return Ok((StatusCode::OK, Json(describe(&slot, true))).into_response());
        }
        let config = SessionConfig {
            k: req.k.unwrap_or(state.config.default_k),
            seed: req.seed.unwrap_or(state.config.default_seed),
        };
        let slot = SessionSlot::create(&state.root, &req.slide_id, config, &caller.actor)?;
        let descriptor = describe(&slot, true);
        state.insert_session(session_id, slot);
        Ok((StatusCode::CREATED, Json(descriptor)).into_response())
    })
    .await
}

async fn get_session(State(state): Shared, Path(id): Path<String>) -> AppResult<Json<SessionDescriptor>> {
    let slot = lookup(&state, &id)?;
    let slot = slot.lock().expect("session poisoned");
    Ok(Json(describe(&slot, false)))
}

#[derive(Debug, Serialize)]
struct GridTile {
    row: u32,
    col: u32,
    url: String,
}

#[derive(Debug, Serialize)]
#[serde(tag = "status", rename_all = "snake_case")]
enum NextPayload {
    Grid {
        session_id: String,
        round: u8,
        cluster_id: usize,
        cluster_size: usize,
        grid_side: usize,
        sampling_seed: u64,
        tiles: Vec<GridTile>,
        progress: Progress,
    },
    RoundComplete {
        session_id: String,
        round: u8,
        transitions: Vec<&'static str>,
        progress: Progress,
    },
}

async fn next_grid(State(state): Shared, Path(id): Path<String>) -> AppResult<Json<NextPayload>> {
    let slot = lookup(&state, &id)?;
    let slot = slot.lock().expect("session poisoned");
    let s = &slot.session;
    if s.is_finalized() {
        return Err(histoloop_core::cluster::SessionError::Finalized.into());
    }
    let Some(&cluster) = s.review_queue().first() else {
        return Ok(Json(NextPayload::RoundComplete {
            session_id: id,
            round: s.round(),
            transitions: transitions(&slot),
            progress: s.progress(),
        }));
    };
    let grid = s.grid(cluster)?;
    let slide = &slot.meta.slide_id;
    Ok(Json(NextPayload::Grid {
        session_id: id.clone(),
        round: s.round(),
        cluster_id: cluster,
        cluster_size: s.current_assignment().sizes()[cluster],
        grid_side: GRID_SIDE,
        sampling_seed: grid.sampling_seed,
        tiles: grid
            .tiles
            .iter()
            .map(|a| GridTile { row: a.row, col: a.col, url: format!("/slides/{slide}/patches/r{}_c{}.png", a.row, a.col) })
            .collect(),
        progress: s.progress(),
    }))
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct ReviewRequest {
    round: u8,
    cluster_id: usize,
    decision: String,
}

#[derive(Debug, Serialize)]
struct ReviewAck {
    session_id: String,
    round: u8,
    cluster_id: usize,
    decision: String,
    progress: Progress,
    replayed: bool,
}

/// Runs a mutation under the session lock: authorisation, idempotency,
/// journaling, and rollback when the journal write fails.
fn mutate<T>(
    state: &AppState,
    id: &str,
    caller: &Caller,
    request: &str,
    apply: impl FnOnce(&mut SessionSlot) -> AppResult<()>,
    respond: impl FnOnce(&SessionSlot, bool) -> T,
) -> AppResult<T> {
    let slot = lookup(state, id)?;
    let mut slot = slot.lock().expect("session poisoned");
    caller.authorize(&slot)?;
    if let KeyCheck::Replayed = slot.check_key(caller.key.as_deref(), request)? {
        return Ok(respond(&slot, true));
    }
    let before = slot.session.events().len();
    let backup = slot.session.clone();
    apply(&mut slot)?;
    if let Err(e) = slot.commit(before, caller.key.as_deref(), Some(request)) {
        slot.session = backup;
        return Err(e);
    }
    Ok(respond(&slot, false))
}

async fn submit_review(State(state): Shared, Path(id): Path<String>, headers: HeaderMap, body: Bytes) -> AppResult<Json<ReviewAck>> {
    let req: ReviewRequest = serde_json::from_slice(&body).map_err(|e| ApiError::invalid(format!("malformed review: {e}")))?;
    let decision: Decision = req
        .decision
        .parse()
        .map_err(|_| ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "invalid_decision", format!("`{}` is not a class or `heterogeneous`", req.decision)))?;
    let caller = Caller::from_headers(&headers);
    blocking(move || {
        let fingerprint = format!("review:{}:{}:{decision}", req.round, req.cluster_id);
        mutate(
            &state,
            &id,
            &caller,
            &fingerprint,
            |slot| {
                if slot.session.is_finalized() {
                    return Err(histoloop_core::cluster::SessionError::Finalized.into());
                }
                if req.round != slot.session.round() {
                    return Err(ApiError::new(
                        StatusCode::CONFLICT,
                        "stale_round",
                        format!("round {} is over; the session is in round {}", req.round, slot.session.round()),
                    ));
                }
                Ok(slot.session.review(req.cluster_id, decision, caller.meta())?)
            },
            |slot, replayed| ReviewAck {
                session_id: id.clone(),
                round: req.round,
                cluster_id: req.cluster_id,
                decision: decision.to_string(),
                progress: slot.session.progress(),
                replayed,
            },
        )
    })
    .await
    .map(Json)
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct ReclusterRequest {
    seed: Option<u64>,
}

async fn recluster(State(state): Shared, Path(id): Path<String>, headers: HeaderMap, body: Bytes) -> AppResult<Json<SessionDescriptor>> {
    let req: ReclusterRequest = parse_body(&body)?;
    let caller = Caller::from_headers(&headers);
    blocking(move || {
        let fingerprint = format!("recluster:{:?}", req.seed);
        mutate(
            &state,
            &id,
            &caller,
            &fingerprint,
            |slot| {
                let seed = req.seed.unwrap_or(slot.session.config.seed.wrapping_add(1));
                let embeddings = std::mem::take(&mut slot.embeddings);
                let result = slot.session.recluster(&embeddings, seed, caller.meta()).map(|_| ());
                slot.embeddings = embeddings;
                Ok(result?)
            },
            |slot, replayed| SessionDescriptor { replayed, ..describe(slot, false) },
        )
    })
    .await
    .map(Json)
}

async fn finalize(State(state): Shared, Path(id): Path<String>, headers: HeaderMap, body: Bytes) -> AppResult<Json<SessionDescriptor>> {
    let _: serde_json::Value = parse_body::<Option<serde_json::Value>>(&body)?.unwrap_or_default();
    let caller = Caller::from_headers(&headers);
    blocking(move || {
        mutate(
            &state,
            &id,
            &caller,
            "finalize",
            |slot| {
                slot.session.finalize(caller.meta())?;
                Ok(())
            },
            |slot, replayed| SessionDescriptor { replayed, ..describe(slot, false) },
        )
    })
    .await
    .map(Json)
}

#[derive(Debug, Serialize)]
struct ReportView {
    slide_id: String,
    confidence: f64,
    tile_count: usize,
    class_fractions: BTreeMap<&'static str, f64>,
    overlay_url: Option<String>,
    flagged: bool,
}

#[derive(Debug, Serialize)]
struct Dashboard {
    round_index: u32,
    status: RoundStatus,
    model_ref: String,
    training_slides: Vec<String>,
    pool_slides: Vec<String>,
    /// Reports in ranking order.
    reports: Vec<ReportView>,
    ranking: Vec<String>,
    flags: BTreeMap<String, bool>,
}

fn dashboard(state: &AppState) -> AppResult<Dashboard> {
    let round = load_current_round(&state.root.rounds_dir())?;
    let Some(model_ref) = round.model_ref.clone() else {
        return Err(ApiError::new(StatusCode::CONFLICT, "no_model_round", format!("round {} has no applied model yet", round.round_index))
            .with_hint("apply a model to the pool with `histoloop round apply`"));
    };
    let ranking = rank_slides_for_review(&round.reports);
    let by_id: BTreeMap<&str, _> = round.reports.iter().map(|r| (r.slide_id.as_str(), r)).collect();
    let reports = ranking
        .iter()
        .map(|id| {
            let r = by_id[id.as_str()];
            ReportView {
                slide_id: r.slide_id.clone(),
                confidence: r.confidence,
                tile_count: r.tile_count,
                class_fractions: TissueClass::ALL.iter().map(|c| (c.name(), r.fraction(*c))).collect(),
                overlay_url: state.root.overlay_file(id).is_file().then(|| format!("/slides/{id}/overlay.png")),
                flagged: round.is_flagged(id),
            }
        })
        .collect();
    Ok(Dashboard {
        round_index: round.round_index,
        status: round.status,
        model_ref,
        training_slides: round.training_slide_ids.iter().cloned().collect(),
        pool_slides: round.pool_slide_ids.iter().cloned().collect(),
        reports,
        ranking,
        flags: round.pool_slide_ids.iter().map(|s| (s.clone(), round.is_flagged(s))).collect(),
    })
}

async fn round_dashboard(State(state): Shared) -> AppResult<Json<Dashboard>> {
    blocking(move || dashboard(&state)).await.map(Json)
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct FlagRequest {
    slide_id: String,
    flagged: bool,
}

async fn set_flag(State(state): Shared, headers: HeaderMap, body: Bytes) -> AppResult<Json<Dashboard>> {
    let req: FlagRequest = serde_json::from_slice(&body).map_err(|e| ApiError::invalid(format!("malformed flag request: {e}")))?;
    let caller = Caller::from_headers(&headers);
    blocking(move || {
        let mut keys = state.rounds_lock.lock().expect("rounds lock poisoned");
        let fingerprint = format!("flag:{}:{}", req.slide_id, req.flagged);
        if let Some(k) = &caller.key {
            match keys.get(k) {
                Some(f) if *f == fingerprint => return dashboard(&state),
                Some(_) => return Err(ApiError::invalid("idempotency key was already used for a different request")),
                None => {}
            }
        }
        let dir = state.root.rounds_dir();
        let mut round = load_current_round(&dir)?;
        if round.model_ref.is_none() {
            return Err(ApiError::new(StatusCode::CONFLICT, "no_model_round", "no model has been applied in the current round"));
        }
        round.set_flag(&req.slide_id, req.flagged, caller.meta())?;
        save_round(&dir, &round)?;
        if let Some(k) = caller.key.clone() {
            keys.insert(k, fingerprint);
        }
        drop(keys);
        dashboard(&state)
    })
    .await
    .map(Json)
}

async fn png_file(path: std::path::PathBuf) -> AppResult<Response> {
    match tokio::fs::read(&path).await {
        Ok(bytes) => Ok(([(header::CONTENT_TYPE, "image/png"), (header::CACHE_CONTROL, "no-cache")], bytes).into_response()),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Err(ApiError::not_found(format!("{} does not exist", path.display()))),
        Err(e) => Err(ApiError::internal(e)),
    }
}

async fn overlay(State(state): Shared, Path(id): Path<String>) -> AppResult<Response> {
    if !valid_id(&id) {
        return Err(ApiError::not_found("no such slide"));
    }
    png_file(state.root.overlay_file(&id)).await
}

async fn patch(State(state): Shared, Path((id, name)): Path<(String, String)>) -> AppResult<Response> {
    let addr = parse_patch_name(&name).filter(|_| valid_id(&id)).ok_or_else(|| ApiError::not_found("no such patch"))?;
    png_file(state.root.patch_file(&id, addr)).await
}
