//! Read-only HTTP service over built artifacts.
//!
//! Every handler reads from an [`ApiState`] loaded once at startup, so
//! identical requests always return identical bodies.

use std::collections::{BTreeMap, HashMap};
use std::net::SocketAddr;
use std::sync::Arc;

use axum::extract::{Path, Query, State};
use axum::http::header::{HeaderValue, CONTENT_TYPE};
use axum::http::{Method, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::get;
use axum::Router;
use serde::Serialize;
use tower_http::cors::{AllowOrigin, CorsLayer};

use synergies_core::facilities::{normalize_activity_code, Facility};
use synergies_core::recommender::{EdgeKind, RecommendConfig};
use synergies_pipeline::{Config, LoadedArtifacts, PipelineError};

pub const JSON_CONTENT_TYPE: &str = "application/json; charset=utf-8";
pub const TOTAL_COUNT_HEADER: &str = "x-total-count";
pub const MAX_PAGE_SIZE: usize = 1000;
pub const VERSION: &str = env!("CARGO_PKG_VERSION");

/// Artifacts and configuration shared by all requests.
pub struct ApiState {
    pub artifacts: LoadedArtifacts,
    pub config: Config,
    pub version: String,
}

impl ApiState {
    pub fn new(artifacts: LoadedArtifacts, config: Config) -> Self {
        ApiState {
            artifacts,
            config,
            version: VERSION.to_string(),
        }
    }

    pub fn load(data_dir: &std::path::Path, config: Config) -> Result<Self, PipelineError> {
        Ok(ApiState::new(LoadedArtifacts::load(data_dir)?, config))
    }
}

pub fn router(state: Arc<ApiState>) -> Router {
    let cors = match &state.config.api_cors_origin {
        Some(origin) => match HeaderValue::from_str(origin) {
            Ok(v) => CorsLayer::new()
                .allow_origin(AllowOrigin::exact(v))
                .allow_methods([Method::GET]),
            Err(_) => {
                log::warn!("ignoring invalid CORS origin {origin:?}");
                CorsLayer::new()
            }
        },
        None => CorsLayer::permissive(),
    };
    Router::new()
        .route("/health", get(health))
        .route("/facilities", get(facilities))
        .route("/facilities/{id}/recommendations", get(recommendations))
        .route("/activities/{code}/neighbors", get(neighbors))
        .route("/graph", get(graph))
        .fallback(|| async { error(StatusCode::NOT_FOUND, "no such endpoint") })
        .layer(cors)
        .with_state(state)
}

/// Serves until the process is stopped.
pub async fn serve(state: ApiState, listen: &str) -> std::io::Result<()> {
    let addr: SocketAddr = listen.parse().map_err(|e| {
        std::io::Error::new(
            std::io::ErrorKind::InvalidInput,
            format!("listen address {listen:?}: {e}"),
        )
    })?;
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("listening on http://{}", listener.local_addr()?);
    axum::serve(listener, router(Arc::new(state))).await
}

fn json_body(status: StatusCode, body: String) -> Response {
    (status, [(CONTENT_TYPE, JSON_CONTENT_TYPE)], body).into_response()
}

fn json<T: Serialize>(status: StatusCode, value: &T) -> Response {
    let mut body = serde_json::to_string_pretty(value).expect("response serializes");
    body.push('\n');
    json_body(status, body)
}

fn error(status: StatusCode, message: impl Into<String>) -> Response {
    #[derive(Serialize)]
    struct ErrorBody {
        error: String,
    }
    json(status, &ErrorBody { error: message.into() })
}

struct ApiError {
    status: StatusCode,
    message: String,
}

impl ApiError {
    fn bad_request(message: impl Into<String>) -> Self {
        ApiError {
            status: StatusCode::BAD_REQUEST,
            message: message.into(),
        }
    }

    fn not_found(message: impl Into<String>) -> Self {
        ApiError {
            status: StatusCode::NOT_FOUND,
            message: message.into(),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        error(self.status, self.message)
    }
}

impl From<PipelineError> for ApiError {
    fn from(err: PipelineError) -> Self {
        let status = match &err {
            PipelineError::Core(synergies_core::Error::Lookup(_)) => StatusCode::NOT_FOUND,
            PipelineError::Core(synergies_core::Error::Config(_)) | PipelineError::Config(_) => StatusCode::BAD_REQUEST,
            PipelineError::MissingUpstream { .. } => StatusCode::SERVICE_UNAVAILABLE,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        ApiError {
            status,
            message: err.to_string(),
        }
    }
}

impl From<synergies_core::Error> for ApiError {
    fn from(err: synergies_core::Error) -> Self {
        PipelineError::from(err).into()
    }
}

type Params = Query<HashMap<String, String>>;

fn reject_unknown(params: &HashMap<String, String>, known: &[&str]) -> Result<(), ApiError> {
    let mut unknown: Vec<&str> = params
        .keys()
        .map(String::as_str)
        .filter(|k| !known.contains(k))
        .collect();
    unknown.sort_unstable();
    match unknown.first() {
        Some(k) => Err(ApiError::bad_request(format!("unknown query parameter {k:?}"))),
        None => Ok(()),
    }
}

fn parse<T: std::str::FromStr>(params: &HashMap<String, String>, key: &str) -> Result<Option<T>, ApiError> {
    match params.get(key) {
        None => Ok(None),
        Some(raw) => raw
            .parse()
            .map(Some)
            .map_err(|_| ApiError::bad_request(format!("malformed {key}: {raw:?}"))),
    }
}

fn finite(params: &HashMap<String, String>, key: &str) -> Result<Option<f64>, ApiError> {
    match parse::<f64>(params, key)? {
        Some(v) if !v.is_finite() => Err(ApiError::bad_request(format!("{key} must be finite"))),
        v => Ok(v),
    }
}

#[derive(Serialize)]
struct Health<'a> {
    status: &'static str,
    version: &'a str,
    artifact_hashes: BTreeMap<String, String>,
}

async fn health(State(state): State<Arc<ApiState>>) -> Response {
    json(
        StatusCode::OK,
        &Health {
            status: "ok",
            version: &state.version,
            artifact_hashes: state.artifacts.artifact_hashes(),
        },
    )
}

#[derive(Serialize)]
struct FacilityPage<'a> {
    total: usize,
    limit: usize,
    offset: usize,
    facilities: Vec<&'a Facility>,
}

async fn facilities(State(state): State<Arc<ApiState>>, Query(params): Params) -> Result<Response, ApiError> {
    reject_unknown(&params, &["territory", "activity", "limit", "offset"])?;
    let limit = parse::<usize>(&params, "limit")?.unwrap_or(100);
    if limit > MAX_PAGE_SIZE {
        return Err(ApiError::bad_request(format!("limit may not exceed {MAX_PAGE_SIZE}")));
    }
    let offset = parse::<usize>(&params, "offset")?.unwrap_or(0);
    let activity = match params.get("activity") {
        Some(raw) => Some(
            normalize_activity_code(raw)
                .ok_or_else(|| ApiError::bad_request(format!("malformed activity: {raw:?}")))?,
        ),
        None => None,
    };
    let territory = params.get("territory");

    let mut matching: Vec<&Facility> = state
        .artifacts
        .recommender
        .registry()
        .iter()
        .filter(|f| territory.is_none_or(|t| &f.territory == t))
        .filter(|f| activity.as_ref().is_none_or(|a| &f.activity_code == a))
        .collect();
    matching.sort_by(|a, b| a.id.cmp(&b.id));
    let total = matching.len();
    let page = FacilityPage {
        total,
        limit,
        offset,
        facilities: matching.into_iter().skip(offset).take(limit).collect(),
    };
    let mut response = json(StatusCode::OK, &page);
    response
        .headers_mut()
        .insert(TOTAL_COUNT_HEADER, HeaderValue::from(total));
    Ok(response)
}

/// Request-level recommendation settings over the configured defaults.
pub fn recommend_config(config: &Config, radius_km: Option<f64>, max_score: Option<f64>) -> RecommendConfig {
    let mut rc = config.recommend_config();
    if let Some(r) = radius_km {
        rc.radius_km = r;
    }
    if let Some(s) = max_score {
        rc.max_score = s;
    }
    rc
}

async fn recommendations(
    State(state): State<Arc<ApiState>>,
    Path(id): Path<String>,
    Query(params): Params,
) -> Result<Response, ApiError> {
    reject_unknown(&params, &["radius_km", "max_score"])?;
    let rc = recommend_config(
        &state.config,
        finite(&params, "radius_km")?,
        finite(&params, "max_score")?,
    );
    let body = state.artifacts.recommendation_json(&id, &rc).map_err(ApiError::from)?;
    Ok(json_body(StatusCode::OK, body))
}

#[derive(Serialize)]
struct Neighbor {
    activity: String,
    score: f64,
}

async fn neighbors(
    State(state): State<Arc<ApiState>>,
    Path(code): Path<String>,
    Query(params): Params,
) -> Result<Response, ApiError> {
    reject_unknown(&params, &["k", "max_score"])?;
    let k = parse::<usize>(&params, "k")?.unwrap_or(state.config.k_per_activity);
    let max_score = finite(&params, "max_score")?.unwrap_or(state.config.max_score);
    if max_score < 1.0 {
        return Err(ApiError::bad_request("max_score must be at least 1"));
    }
    let activities = state.artifacts.recommender.activities();
    let code = normalize_activity_code(&code)
        .filter(|c| activities.contains(c))
        .ok_or_else(|| ApiError::not_found(format!("activity {code} has no vector")))?;
    let ranked = activities.nearest_activities(&code, k, max_score)?;
    let body: Vec<Neighbor> = ranked
        .into_iter()
        .map(|(activity, score)| Neighbor { activity, score })
        .collect();
    Ok(json(StatusCode::OK, &body))
}

async fn graph(State(state): State<Arc<ApiState>>, Query(params): Params) -> Result<Response, ApiError> {
    reject_unknown(&params, &["territory", "kind"])?;
    let kind = match params.get("kind").map(String::as_str) {
        None | Some("all") => None,
        Some("direct") => Some(EdgeKind::Direct),
        Some("alternative") => Some(EdgeKind::Alternative),
        Some(other) => {
            return Err(ApiError::bad_request(format!(
                "kind must be direct, alternative or all, got {other:?}"
            )))
        }
    };
    let g = state
        .artifacts
        .graph_view(params.get("territory").map(String::as_str), kind)
        .map_err(ApiError::from)?;
    Ok(json_body(StatusCode::OK, g.to_json()))
}
