//! JSON HTTP adapter over the forecasting library.
//!
//! Endpoints: `GET /health`, `GET /regions`, `GET /regions/{id}/history` and
//! `POST /scenario`. Every response body carries `schema_version`.

use std::net::SocketAddr;
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Duration;

use axum::body::Bytes;
use axum::extract::{Path as UrlPath, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::Router;
use chrono::NaiveDate;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use tokio::sync::Semaphore;
use tower_http::cors::CorsLayer;

use cgp_core::data::{load_dataset, stringency_index, Dataset, IngestConfig};
use cgp_core::forecast::{
    forecast, ForecastResult, ScenarioSpec, MAX_SHIFT_DAYS, MIN_FORECAST_SAMPLES,
};
use cgp_core::posterior::{PosteriorModel, SCHEMA_VERSION};
use cgp_core::Error;

pub const MAX_HORIZON: usize = 365;
pub const MAX_SAMPLES: usize = 10_000;
pub const DEFAULT_SAMPLES: usize = 1000;

#[derive(Debug, Clone, Copy)]
pub struct ServiceOptions {
    pub max_concurrent: usize,
    pub timeout: Duration,
}

impl Default for ServiceOptions {
    fn default() -> Self {
        Self {
            max_concurrent: 2,
            timeout: Duration::from_secs(60),
        }
    }
}

pub struct AppState {
    model: PosteriorModel,
    data: Dataset,
    checkpoint_id: String,
    pool: Semaphore,
    timeout: Duration,
    next_error: AtomicU64,
}

impl AppState {
    pub fn new(
        model: PosteriorModel,
        data: Dataset,
        options: ServiceOptions,
    ) -> cgp_core::Result<Self> {
        model.check_dataset(&data.regions)?;
        Ok(Self {
            checkpoint_id: model.checkpoint_id(),
            model,
            data,
            pool: Semaphore::new(options.max_concurrent),
            timeout: options.timeout,
            next_error: AtomicU64::new(1),
        })
    }

    pub fn load(
        checkpoint: &Path,
        features: &Path,
        fatalities: &Path,
        policies: &Path,
        options: ServiceOptions,
    ) -> cgp_core::Result<Self> {
        let model = PosteriorModel::load(checkpoint)?;
        let data = load_dataset(features, fatalities, policies, &IngestConfig::default())?;
        Self::new(model, data, options)
    }

    pub fn checkpoint_id(&self) -> &str {
        &self.checkpoint_id
    }

    pub fn model(&self) -> &PosteriorModel {
        &self.model
    }

    pub fn data(&self) -> &Dataset {
        &self.data
    }

    fn indicators(&self) -> usize {
        self.data.indicator_names.len()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioRequest {
    pub region_id: String,
    pub horizon: usize,
    /// Days `t..=t + horizon`; omitted means the last observed policy is held.
    pub future_policy: Option<Vec<Vec<f64>>>,
    pub shift_days: Option<i64>,
    pub num_samples: usize,
    pub seed: u64,
    pub include_history: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FieldError {
    pub field: String,
    pub message: String,
}

fn field_error(field: impl Into<String>, message: impl Into<String>) -> FieldError {
    FieldError {
        field: field.into(),
        message: message.into(),
    }
}

fn unsigned(v: &Value, field: &str, errors: &mut Vec<FieldError>) -> Option<u64> {
    let n = v.as_u64();
    if n.is_none() {
        errors.push(field_error(field, "must be a non-negative integer"));
    }
    n
}

/// Structural and range validation collecting every violation.
pub fn validate_request(
    raw: &Value,
    indicators: usize,
) -> Result<ScenarioRequest, Vec<FieldError>> {
    let mut errors = Vec::new();
    let Some(obj) = raw.as_object() else {
        return Err(vec![field_error("body", "must be a JSON object")]);
    };
    const KNOWN: [&str; 7] = [
        "region_id",
        "horizon",
        "future_policy",
        "shift_days",
        "num_samples",
        "seed",
        "include_history",
    ];
    for key in obj.keys() {
        if !KNOWN.contains(&key.as_str()) {
            errors.push(field_error(key.as_str(), "unknown field"));
        }
    }

    let region_id = match obj.get("region_id") {
        Some(Value::String(s)) if !s.is_empty() => Some(s.clone()),
        Some(_) => {
            errors.push(field_error("region_id", "must be a non-empty string"));
            None
        }
        None => {
            errors.push(field_error("region_id", "is required"));
            None
        }
    };

    let horizon = match obj.get("horizon") {
        Some(v) => unsigned(v, "horizon", &mut errors).and_then(|h| {
            if h as usize > MAX_HORIZON {
                errors.push(field_error(
                    "horizon",
                    format!("must be at most {MAX_HORIZON}"),
                ));
                None
            } else {
                Some(h as usize)
            }
        }),
        None => {
            errors.push(field_error("horizon", "is required"));
            None
        }
    };

    let future_policy = match obj.get("future_policy") {
        None | Some(Value::Null) => None,
        Some(Value::Array(rows)) => {
            let mut out = Vec::with_capacity(rows.len());
            for (d, row) in rows.iter().enumerate() {
                let Some(row) = row.as_array() else {
                    errors.push(field_error(
                        format!("future_policy[{d}]"),
                        "must be an array of numbers",
                    ));
                    continue;
                };
                if row.len() != indicators {
                    errors.push(field_error(
                        format!("future_policy[{d}]"),
                        format!("has {} indicators, expected {indicators}", row.len()),
                    ));
                }
                let mut p = Vec::with_capacity(row.len());
                for (k, v) in row.iter().enumerate() {
                    match v.as_f64() {
                        Some(x) if (0.0..=1.0).contains(&x) => p.push(x),
                        Some(x) => errors.push(field_error(
                            format!("future_policy[{d}][{k}]"),
                            format!("day {d} indicator {k} is {x}, must be in [0, 1]"),
                        )),
                        None => errors.push(field_error(
                            format!("future_policy[{d}][{k}]"),
                            format!("day {d} indicator {k} must be a number"),
                        )),
                    }
                }
                out.push(p);
            }
            if let Some(h) = horizon {
                if rows.len() != h + 1 {
                    errors.push(field_error(
                        "future_policy",
                        format!("has {} days, horizon {h} needs {}", rows.len(), h + 1),
                    ));
                }
            }
            Some(out)
        }
        Some(_) => {
            errors.push(field_error(
                "future_policy",
                "must be an array of policy vectors",
            ));
            None
        }
    };

    let shift_days = match obj.get("shift_days") {
        None | Some(Value::Null) => None,
        Some(v) => match v.as_i64() {
            Some(s) if s.abs() <= MAX_SHIFT_DAYS => Some(s),
            Some(s) => {
                errors.push(field_error(
                    "shift_days",
                    format!("{s} is outside [-{MAX_SHIFT_DAYS}, {MAX_SHIFT_DAYS}]"),
                ));
                None
            }
            None => {
                errors.push(field_error("shift_days", "must be an integer"));
                None
            }
        },
    };

    let num_samples = match obj.get("num_samples") {
        None => DEFAULT_SAMPLES,
        Some(v) => match unsigned(v, "num_samples", &mut errors) {
            Some(n) if (MIN_FORECAST_SAMPLES as u64..=MAX_SAMPLES as u64).contains(&n) => {
                n as usize
            }
            Some(n) => {
                errors.push(field_error(
                    "num_samples",
                    format!("{n} is outside [{MIN_FORECAST_SAMPLES}, {MAX_SAMPLES}]"),
                ));
                0
            }
            None => 0,
        },
    };

    let seed = match obj.get("seed") {
        None => 0,
        Some(v) => unsigned(v, "seed", &mut errors).unwrap_or(0),
    };

    let include_history = match obj.get("include_history") {
        None => false,
        Some(Value::Bool(b)) => *b,
        Some(_) => {
            errors.push(field_error("include_history", "must be a boolean"));
            false
        }
    };

    if !errors.is_empty() {
        return Err(errors);
    }
    Ok(ScenarioRequest {
        region_id: region_id.expect("validated"),
        horizon: horizon.expect("validated"),
        future_policy,
        shift_days,
        num_samples,
        seed,
        include_history,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionSummary {
    pub region_id: String,
    pub parent_country: Option<String>,
    pub population: f64,
    pub start_date: NaiveDate,
    pub last_date: NaiveDate,
    pub num_days: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioResponse {
    pub schema_version: u32,
    pub checkpoint: String,
    pub region: RegionSummary,
    /// Stringency index of every requested future day.
    pub stringency: Vec<f64>,
    #[serde(flatten)]
    pub forecast: ForecastResult,
}

/// Builds the spec for a validated request against the loaded data.
pub fn scenario_spec(state: &AppState, req: &ScenarioRequest) -> cgp_core::Result<ScenarioSpec> {
    let region = state.data.region(&req.region_id)?;
    state.model.region(&req.region_id)?;
    let mut spec = ScenarioSpec::hold_last(region, req.horizon);
    if let Some(p) = &req.future_policy {
        spec.future_policy = p.clone();
    }
    spec.shift_days = req.shift_days;
    spec.include_history = req.include_history;
    Ok(spec)
}

/// The computation behind `POST /scenario`, without HTTP.
pub fn run_scenario(state: &AppState, req: &ScenarioRequest) -> cgp_core::Result<ScenarioResponse> {
    let spec = scenario_spec(state, req)?;
    let region = state.data.region(&req.region_id)?;
    let result = forecast(&state.model, region, &spec, req.num_samples, req.seed)?;
    Ok(ScenarioResponse {
        schema_version: SCHEMA_VERSION,
        checkpoint: state.checkpoint_id.clone(),
        region: summary(region),
        stringency: spec
            .future_policy
            .iter()
            .map(|p| stringency_index(p, None))
            .collect(),
        forecast: result,
    })
}

fn summary(r: &cgp_core::data::RegionRecord) -> RegionSummary {
    RegionSummary {
        region_id: r.region_id.clone(),
        parent_country: r.parent_country.clone(),
        population: r.population,
        start_date: r.start_date,
        last_date: r.last_date(),
        num_days: r.num_days(),
    }
}

fn body(status: StatusCode, value: Value) -> Response {
    let text = serde_json::to_string(&value).expect("json value serializes");
    (status, [("content-type", "application/json")], text).into_response()
}

fn ok<T: Serialize>(value: &T) -> Response {
    let text = serde_json::to_string(value).expect("response serializes");
    (StatusCode::OK, [("content-type", "application/json")], text).into_response()
}

fn error_body(
    status: StatusCode,
    code: &str,
    message: String,
    extra: Option<(&str, Value)>,
) -> Response {
    let mut err = json!({ "code": code, "message": message });
    if let Some((k, v)) = extra {
        err[k] = v;
    }
    body(
        status,
        json!({ "schema_version": SCHEMA_VERSION, "error": err }),
    )
}

fn internal(state: &AppState, message: String) -> Response {
    let id = format!("E{:06}", state.next_error.fetch_add(1, Ordering::Relaxed));
    log::error!("{id}: {message}");
    error_body(
        StatusCode::INTERNAL_SERVER_ERROR,
        "internal",
        message,
        Some(("error_id", Value::String(id))),
    )
}

fn core_error(state: &AppState, e: Error) -> Response {
    match e {
        Error::UnknownRegion(id) => error_body(
            StatusCode::NOT_FOUND,
            "not_found",
            format!("unknown region `{id}`"),
            None,
        ),
        Error::Shape(m) | Error::Domain(m) => {
            error_body(StatusCode::BAD_REQUEST, "invalid", m, None)
        }
        other => internal(state, other.to_string()),
    }
}

async fn health(State(state): State<Arc<AppState>>) -> Response {
    body(
        StatusCode::OK,
        json!({ "status": "ok", "checkpoint": state.checkpoint_id, "schema_version": SCHEMA_VERSION }),
    )
}

async fn regions(State(state): State<Arc<AppState>>) -> Response {
    let list: Vec<RegionSummary> = state
        .data
        .regions
        .iter()
        .filter(|r| state.model.region(&r.region_id).is_ok())
        .map(summary)
        .collect();
    body(
        StatusCode::OK,
        json!({
            "schema_version": SCHEMA_VERSION,
            "checkpoint": state.checkpoint_id,
            "feature_names": state.data.feature_names,
            "indicator_names": state.data.indicator_names,
            "regions": list,
        }),
    )
}

async fn history(State(state): State<Arc<AppState>>, UrlPath(id): UrlPath<String>) -> Response {
    let r = match state.data.region(&id) {
        Ok(r) => r,
        Err(e) => return core_error(&state, e),
    };
    let dates: Vec<NaiveDate> = (0..r.num_days()).map(|d| r.date_of(d)).collect();
    body(
        StatusCode::OK,
        json!({
            "schema_version": SCHEMA_VERSION,
            "region": summary(r),
            "days": (1..=r.num_days()).collect::<Vec<_>>(),
            "dates": dates,
            "cumulative_deaths": r.fatalities,
            "policy": r.policy.values,
            "stringency": r.policy.stringency_series(),
        }),
    )
}

async fn scenario(State(state): State<Arc<AppState>>, raw: Bytes) -> Response {
    let value: Value = match serde_json::from_slice(&raw) {
        Ok(v) => v,
        Err(e) => {
            let errors = vec![field_error("body", format!("invalid JSON: {e}"))];
            return error_body(
                StatusCode::BAD_REQUEST,
                "validation",
                "request body is not valid JSON".into(),
                Some(("errors", json!(errors))),
            );
        }
    };
    let req = match validate_request(&value, state.indicators()) {
        Ok(r) => r,
        Err(errors) => {
            return error_body(
                StatusCode::BAD_REQUEST,
                "validation",
                format!("{} invalid field(s)", errors.len()),
                Some(("errors", json!(errors))),
            )
        }
    };
    if let Err(e) = scenario_spec(&state, &req) {
        return core_error(&state, e);
    }
    let Ok(_permit) = state.pool.try_acquire() else {
        return error_body(
            StatusCode::SERVICE_UNAVAILABLE,
            "busy",
            "all scenario workers are busy, retry later".into(),
            None,
        );
    };
    let worker = Arc::clone(&state);
    let task = tokio::task::spawn_blocking(move || run_scenario(&worker, &req));
    match tokio::time::timeout(state.timeout, task).await {
        Err(_) => error_body(
            StatusCode::SERVICE_UNAVAILABLE,
            "timeout",
            format!("scenario exceeded {} s", state.timeout.as_secs()),
            None,
        ),
        Ok(Err(join)) => internal(&state, format!("worker failed: {join}")),
        Ok(Ok(Err(e))) => core_error(&state, e),
        Ok(Ok(Ok(resp))) => ok(&resp),
    }
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/health", get(health))
        .route("/regions", get(regions))
        .route("/regions/{id}/history", get(history))
        .route("/scenario", post(scenario))
        .layer(CorsLayer::permissive())
        .with_state(state)
}

/// Runs the service until the process is stopped.
pub async fn serve(state: Arc<AppState>, addr: SocketAddr) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(state)).await
}

#[cfg(test)]
mod tests {
    use super::*;

    fn base() -> Value {
        json!({ "region_id": "R01", "horizon": 2, "future_policy": [[0.0, 1.0], [0.5, 0.5], [1.0, 0.0]] })
    }

    #[test]
    fn well_formed_request_parses() {
        let req = validate_request(&base(), 2).unwrap();
        assert_eq!(req.horizon, 2);
        assert_eq!(req.num_samples, DEFAULT_SAMPLES);
        assert_eq!(req.seed, 0);
        assert_eq!(req.future_policy.unwrap()[1], vec![0.5, 0.5]);
    }

    #[test]
    fn out_of_range_entry_names_day_and_indicator() {
        let mut v = base();
        v["future_policy"][1][0] = json!(1.5);
        let errs = validate_request(&v, 2).unwrap_err();
        assert_eq!(errs.len(), 1);
        assert_eq!(errs[0].field, "future_policy[1][0]");
        assert!(errs[0].message.contains("day 1 indicator 0"));
    }

    #[test]
    fn violations_are_aggregated() {
        let mut v = base();
        v["future_policy"][2][1] = json!(-0.1);
        v["num_samples"] = json!(20_000);
        v["shift_days"] = json!(40);
        let errs = validate_request(&v, 2).unwrap_err();
        let fields: Vec<&str> = errs.iter().map(|e| e.field.as_str()).collect();
        assert_eq!(fields, ["future_policy[2][1]", "shift_days", "num_samples"]);
    }

    #[test]
    fn structural_errors() {
        assert_eq!(
            validate_request(&json!([1, 2]), 2).unwrap_err()[0].field,
            "body"
        );
        let errs = validate_request(&json!({ "horizon": 400, "extra": 1 }), 2).unwrap_err();
        let fields: Vec<&str> = errs.iter().map(|e| e.field.as_str()).collect();
        assert!(fields.contains(&"extra"));
        assert!(fields.contains(&"region_id"));
        assert!(fields.contains(&"horizon"));
        let mut v = base();
        v["horizon"] = json!(3);
        assert_eq!(
            validate_request(&v, 2).unwrap_err()[0].field,
            "future_policy"
        );
    }
}
