//! atlasforge-service: the HTTP gateway over campaign event logs and stored
//! volumes.
//!
//! Every response is derived from a campaign's event log plus the files named
//! in a [`VolumeManifest`]; the service keeps no other state, so a restart is
//! unobservable. Reads share a lock; each mutation takes the campaign's write
//! lock, appends its events and only then answers, which gives
//! read-your-writes after a `201`.
//!
//! All routes live under `/v1`:
//!
//! | method | path | |
//! |---|---|---|
//! | GET | `/registry` | class registry and its hash |
//! | GET | `/campaigns/{id}/state` | summary, lineage, open iteration |
//! | GET | `/campaigns/{id}/metrics` | status counts and effort ratio |
//! | GET | `/campaigns/{id}/priority?class=&limit=` | ranked pairs of the open iteration |
//! | GET | `/volumes/{id}/slices/{axis}/{index}?layers=&class=` | [`api::SlicePayload`] |
//! | POST | `/campaigns/{id}/revisions` | record a verdict (bearer token) |
//! | POST | `/campaigns/{id}/iterations/advance` | export, advance and check the stop rule |

pub mod api;
pub mod error;

use std::collections::{BTreeMap, HashMap};
use std::path::{Path as FsPath, PathBuf};
use std::sync::{Arc, RwLock, RwLockReadGuard, RwLockWriteGuard};

use atlasforge_core::campaign::{
    CampaignState, CampaignStore, EventBody, FinetuneManifest, StoreError,
};
use atlasforge_core::labelspace::{registry, registry_sha256};
use atlasforge_core::volgrid::{read_volume_file, write_volume_file, VolumeManifest, VolumeRole};
use atlasforge_core::{ClassId, PairStatus, RevisionRecord, Verdict, VoxelData, VoxelGrid};
use axum::extract::rejection::JsonRejection;
use axum::extract::{Path, Query, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::routing::{get, post};
use axum::{Json, Router};

use crate::api::*;
use crate::error::ApiError;

type ApiResult<T> = Result<T, ApiError>;

/// Shared server state: one lock-guarded store per campaign, the volume
/// manifest, the bearer tokens and the directory revised masks land in.
#[derive(Debug, Default)]
pub struct AppState {
    campaigns: BTreeMap<String, RwLock<CampaignStore>>,
    volumes: VolumeManifest,
    tokens: HashMap<String, String>,
    mask_dir: PathBuf,
}

impl AppState {
    pub fn new(volumes: VolumeManifest, tokens: HashMap<String, String>, mask_dir: impl Into<PathBuf>) -> Self {
        Self { campaigns: BTreeMap::new(), volumes, tokens, mask_dir: mask_dir.into() }
    }

    /// Register a store under its campaign id.
    pub fn with_campaign(mut self, store: CampaignStore) -> Self {
        let id = store.campaign().state().campaign_id.clone();
        self.campaigns.insert(id, RwLock::new(store));
        self
    }

    pub fn campaign_ids(&self) -> impl Iterator<Item = &str> {
        self.campaigns.keys().map(String::as_str)
    }

    fn slot(&self, id: &str) -> ApiResult<&RwLock<CampaignStore>> {
        self.campaigns.get(id).ok_or_else(|| ApiError::not_found(format!("unknown campaign {id:?}")))
    }

    fn read(&self, id: &str) -> ApiResult<RwLockReadGuard<'_, CampaignStore>> {
        Ok(self.slot(id)?.read().unwrap_or_else(|e| e.into_inner()))
    }

    fn write(&self, id: &str) -> ApiResult<RwLockWriteGuard<'_, CampaignStore>> {
        Ok(self.slot(id)?.write().unwrap_or_else(|e| e.into_inner()))
    }

    fn annotator(&self, headers: &HeaderMap) -> ApiResult<String> {
        let value = headers
            .get(header::AUTHORIZATION)
            .ok_or_else(|| ApiError::unauthorized("missing Authorization header"))?;
        let token = value
            .to_str()
            .ok()
            .and_then(|v| v.strip_prefix("Bearer "))
            .ok_or_else(|| ApiError::unauthorized("expected a Bearer token"))?;
        self.tokens.get(token.trim()).cloned().ok_or_else(|| ApiError::unauthorized("unknown token"))
    }

    fn campaign_dir(&self, campaign: &str) -> PathBuf {
        self.mask_dir.join(campaign)
    }
}

/// Read a token file: a JSON object mapping bearer token to annotator id.
pub fn load_tokens(path: impl AsRef<FsPath>) -> std::io::Result<HashMap<String, String>> {
    let text = std::fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(std::io::Error::other)
}

pub fn router(state: Arc<AppState>) -> Router {
    let v1 = Router::new()
        .route("/registry", get(get_registry))
        .route("/campaigns/{id}/state", get(get_state))
        .route("/campaigns/{id}/metrics", get(get_metrics))
        .route("/campaigns/{id}/priority", get(get_priority))
        .route("/campaigns/{id}/revisions", post(post_revision))
        .route("/campaigns/{id}/iterations/advance", post(post_advance))
        .route("/volumes/{id}/slices/{axis}/{index}", get(get_slice));
    Router::new().nest("/v1", v1).with_state(state)
}

/// Serve until the listener fails.
pub async fn serve(listener: tokio::net::TcpListener, state: Arc<AppState>) -> std::io::Result<()> {
    axum::serve(listener, router(state)).await
}

async fn get_registry() -> Json<RegistryResponse> {
    Json(RegistryResponse { sha256: registry_sha256(), classes: registry().iter().map(RegistryClass::from).collect() })
}

fn state_view(state: &CampaignState) -> StateResponse {
    StateResponse {
        summary: state.summary(),
        config: state.config.clone(),
        model_lineage: state.model_lineage.clone(),
        history: state.history.clone(),
        open: state.open.as_ref().map(|o| OpenIterationView {
            iteration: o.iteration,
            fraction: o.fraction,
            selections: o.selections.values().cloned().collect(),
            unresolved: state.unresolved(),
            manifest_exported: o.manifest.is_some(),
        }),
        stop: atlasforge_core::campaign::stop_decision(state),
    }
}

async fn get_state(State(app): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<Json<StateResponse>> {
    let store = app.read(&id)?;
    Ok(Json(state_view(store.campaign().state())))
}

async fn get_metrics(State(app): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<Json<MetricsResponse>> {
    let store = app.read(&id)?;
    let state = store.campaign().state();
    let status_counts = state.status_counts();
    let total_pairs: usize = status_counts.values().sum();
    let revised_pairs = state.live_revisions().count();
    Ok(Json(MetricsResponse {
        campaign_id: state.campaign_id.clone(),
        iteration: state.iteration,
        model_tag: state.model_tag.clone(),
        total_pairs,
        status_counts,
        revised_pairs,
        effort_ratio: if total_pairs == 0 { 0.0 } else { revised_pairs as f64 / total_pairs as f64 },
        history: state.history.clone(),
    }))
}

/// Parse a class query value: malformed is a 400, unregistered a 404.
fn parse_class(raw: Option<&String>) -> ApiResult<Option<ClassId>> {
    let Some(raw) = raw else { return Ok(None) };
    let id: u8 = raw.trim().parse().map_err(|_| ApiError::bad_request(format!("class {raw:?} is not a class id")))?;
    ClassId::new(id).map(Some).map_err(|e| ApiError::not_found(e.to_string()))
}

async fn get_priority(
    State(app): State<Arc<AppState>>,
    Path(id): Path<String>,
    Query(query): Query<HashMap<String, String>>,
) -> ApiResult<Json<PriorityResponse>> {
    let store = app.read(&id)?;
    let state = store.campaign().state();
    let class = parse_class(query.get("class"))?.ok_or_else(|| ApiError::bad_request("missing class parameter"))?;
    if !state.classes.contains(&class) {
        return Err(ApiError::not_found(format!("class {class} is not part of campaign {id:?}")));
    }
    let limit = match query.get("limit") {
        Some(raw) => Some(
            raw.trim().parse::<usize>().map_err(|_| ApiError::bad_request(format!("limit {raw:?} is not a count")))?,
        ),
        None => None,
    };
    let open = state.open.as_ref().ok_or(atlasforge_core::campaign::CampaignError::NoOpenIteration)?;
    let entries = open.priority.get(&class).map(|l| l.entries.as_slice()).unwrap_or_default();
    let items = entries
        .iter()
        .take(limit.unwrap_or(usize::MAX))
        .map(|e| PriorityItem {
            volume: e.volume.clone(),
            class,
            rank: e.rank,
            attention_size: e.size,
            status: state.pair(&e.volume, class).map_or(PairStatus::Unrevised, |p| p.status),
        })
        .collect();
    Ok(Json(PriorityResponse { class, iteration: open.iteration, total: entries.len(), entries: items }))
}

const LAYERS: [&str; 3] = ["image", "label", "attention"];

async fn get_slice(
    State(app): State<Arc<AppState>>,
    Path((id, axis, index)): Path<(String, String, String)>,
    Query(query): Query<HashMap<String, String>>,
) -> ApiResult<Json<SlicePayload>> {
    let axis: usize = axis.parse().map_err(|_| ApiError::bad_request(format!("axis {axis:?} must be 0, 1 or 2")))?;
    if axis > 2 {
        return Err(ApiError::bad_request(format!("axis {axis} must be 0, 1 or 2")));
    }
    let index: usize = index.parse().map_err(|_| ApiError::bad_request(format!("index {index:?} is not a count")))?;
    if !app.volumes.entries.iter().any(|e| e.volume == id) {
        return Err(ApiError::not_found(format!("unknown volume {id:?}")));
    }
    let requested: Vec<&str> = query
        .get("layers")
        .map_or("image", String::as_str)
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .collect();
    if requested.is_empty() {
        return Err(ApiError::bad_request("no layers requested"));
    }
    if let Some(bad) = requested.iter().find(|l| !LAYERS.contains(l)) {
        return Err(ApiError::bad_request(format!("unknown layer {bad:?}; expected image, label or attention")));
    }
    let class = parse_class(query.get("class"))?;
    if requested.contains(&"attention") && class.is_none() {
        return Err(ApiError::bad_request("the attention layer requires a class parameter"));
    }

    let mut layers = BTreeMap::new();
    let mut shape = None;
    let mut window = None;
    for name in requested {
        let (role, class) = match name {
            "image" => (VolumeRole::Image, None),
            "label" => (VolumeRole::Label, None),
            _ => (VolumeRole::Attention, class),
        };
        let entry = app.volumes.find(&id, role, class).ok_or_else(|| {
            let suffix = class.map(|c| format!(" for class {c}")).unwrap_or_default();
            ApiError::not_found(format!("volume {id:?} has no {name} layer{suffix}"))
        })?;
        let grid = read_volume_file(&entry.path)?;
        let plane = grid.extract_slice(axis, index)?;
        match shape {
            None => shape = Some((plane.width, plane.height)),
            Some(s) if s != (plane.width, plane.height) => {
                return Err(ApiError::internal(format!("{name} layer of {id:?} has different dims")))
            }
            Some(_) => {}
        }
        if name == "image" {
            window = finite_range(&plane.data);
        }
        layers.insert(name.to_owned(), Layer::encode(&plane.data));
    }
    let (width, height) = shape.unwrap_or_default();
    Ok(Json(SlicePayload { volume: id, axis, index, width, height, layers, window }))
}

fn finite_range(data: &VoxelData) -> Option<(f64, f64)> {
    (0..data.len())
        .map(|i| data.get_f64(i))
        .filter(|v| v.is_finite())
        .fold(None, |acc, v| Some(acc.map_or((v, v), |(lo, hi): (f64, f64)| (lo.min(v), hi.max(v)))))
}

fn revision_response(record: RevisionRecord) -> RevisionResponse {
    let status = match record.verdict {
        Verdict::Revised => PairStatus::Revised,
        Verdict::NoChange => PairStatus::AcceptedNoChange,
    };
    RevisionResponse { record, status }
}

/// Whether `req` repeats the verdict already stored as `prior`.
fn is_replay(prior: &RevisionRecord, annotator: &str, req: &RevisionRequest, voxels: Option<&[u8]>) -> bool {
    if prior.annotator != annotator || prior.verdict != req.verdict {
        return false;
    }
    match (&prior.mask_ref, req.mask.as_ref(), voxels) {
        (None, None, _) => true,
        (Some(path), Some(upload), Some(voxels)) => read_volume_file(path)
            .ok()
            .is_some_and(|g| g.dims() == upload.dims && g.as_u8() == Some(voxels)),
        _ => false,
    }
}

async fn post_revision(
    State(app): State<Arc<AppState>>,
    Path(id): Path<String>,
    headers: HeaderMap,
    body: Result<Json<RevisionRequest>, JsonRejection>,
) -> ApiResult<(StatusCode, Json<RevisionResponse>)> {
    let annotator = app.annotator(&headers)?;
    let Json(req) = body?;
    let voxels = match &req.mask {
        Some(m) => Some(m.voxels().ok_or_else(|| ApiError::unprocessable("invalid-mask", "mask data is not base64"))?),
        None => None,
    };

    let mut store = app.write(&id)?;
    let state = store.campaign().state();
    let open = state.open.as_ref().ok_or(atlasforge_core::campaign::CampaignError::NoOpenIteration)?;
    let iteration = open.iteration;
    if let Some(prior) = state.pair(&req.volume, req.class).and_then(|p| p.revision.as_ref()) {
        let resolved = matches!(
            state.pair(&req.volume, req.class).map(|p| p.status),
            Some(PairStatus::Revised | PairStatus::AcceptedNoChange)
        );
        if resolved && prior.iteration == iteration && is_replay(prior, &annotator, &req, voxels.as_deref()) {
            return Ok((StatusCode::CREATED, Json(revision_response(prior.clone()))));
        }
    }

    let mask = match (&req.mask, voxels) {
        (Some(upload), Some(voxels)) => {
            let spacing = app
                .volumes
                .find(&req.volume, VolumeRole::Image, None)
                .and_then(|e| read_volume_file(&e.path).ok())
                .map_or([1.0; 3], |g| g.spacing());
            Some(
                VoxelGrid::from_u8(upload.dims, spacing, voxels)
                    .map_err(|e| ApiError::unprocessable("invalid-mask", e.to_string()))?,
            )
        }
        _ => None,
    };
    let target = (req.verdict == Verdict::Revised && mask.is_some()).then(|| {
        app.campaign_dir(&id)
            .join(format!("it{iteration:02}"))
            .join(format!("{}_c{:02}.nii", req.volume, req.class.get()))
    });
    let tmp = target.as_ref().map(|t| t.with_extension("nii.tmp"));
    if let (Some(tmp), Some(mask)) = (&tmp, &mask) {
        if let Some(dir) = tmp.parent() {
            std::fs::create_dir_all(dir).map_err(|e| ApiError::internal(e.to_string()))?;
        }
        write_volume_file(tmp, mask)?;
    }
    let record = RevisionRecord {
        volume: req.volume.clone(),
        class: req.class,
        iteration,
        annotator,
        verdict: req.verdict,
        mask_ref: target.as_ref().map(|t| t.to_string_lossy().into_owned()),
        timestamp: 0,
    };
    let outcome = store.apply(|c| c.record_revision(record, mask.as_ref()));
    if let (Some(tmp), Some(target)) = (&tmp, &target) {
        let finished = match outcome {
            Ok(_) => std::fs::rename(tmp, target),
            Err(_) => std::fs::remove_file(tmp),
        };
        finished.map_err(|e| ApiError::internal(e.to_string()))?;
    }
    Ok((StatusCode::CREATED, Json(revision_response(outcome?))))
}

fn exported_manifest(events: &[atlasforge_core::campaign::Event], iteration: u32) -> Option<FinetuneManifest> {
    events.iter().rev().find_map(|e| match &e.body {
        EventBody::ManifestExported { manifest } if manifest.iteration == iteration => Some(manifest.clone()),
        _ => None,
    })
}

async fn post_advance(
    State(app): State<Arc<AppState>>,
    Path(id): Path<String>,
    body: Result<Json<AdvanceRequest>, JsonRejection>,
) -> ApiResult<Json<AdvanceResponse>> {
    let Json(req) = body?;
    if req.model_tag.is_empty() {
        return Err(atlasforge_core::campaign::CampaignError::EmptyModelTag.into());
    }
    let mut store = app.write(&id)?;
    let state = store.campaign().state();
    if state.open.is_none() {
        // A retry of an advance that already succeeded.
        let last = state.history.last();
        if let (Some(last), true) = (last, state.model_tag == req.model_tag) {
            let manifest = exported_manifest(store.campaign().events(), last.iteration)
                .ok_or_else(|| ApiError::internal("advanced iteration has no manifest event"))?;
            let stop = atlasforge_core::campaign::stop_decision(state);
            return Ok(Json(AdvanceResponse { summary: state.summary(), manifest, stop }));
        }
    }
    let tag = req.model_tag.clone();
    let (manifest, stop) = store.apply(|c| {
        let manifest = c.export_finetune_manifest()?;
        c.advance_iteration(tag)?;
        let stop = c.check_stop()?;
        Ok((manifest, stop))
    })?;
    let dir = app.campaign_dir(&id);
    let path = dir.join(format!("finetune_it{:02}.json", manifest.iteration));
    std::fs::create_dir_all(&dir)
        .and_then(|_| std::fs::write(&path, serde_json::to_string_pretty(&manifest).expect("manifest serializes")))
        .map_err(|e| ApiError::internal(format!("{}: {e}", path.display())))?;
    Ok(Json(AdvanceResponse { summary: store.campaign().state().summary(), manifest, stop }))
}

/// Open every campaign log in `logs` with a system clock.
pub fn open_stores(logs: &[PathBuf]) -> Result<Vec<CampaignStore>, StoreError> {
    logs.iter().map(|l| CampaignStore::open(l, Default::default())).collect()
}
