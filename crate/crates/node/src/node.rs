//! A running connector node: runtimes, storage and the HTTP surface.

use std::collections::BTreeMap;
use std::net::SocketAddr;
use std::sync::Arc;

use anyhow::Context;
use axum::body::Bytes;
use axum::extract::{Query, State};
use axum::http::{HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use parking_lot::Mutex;
use serde::Deserialize;
use serde_json::{json, Value};
use servicespace_core::consumer::{ContractBook, InvokeError, ResultError};
use servicespace_core::executor::ThreadPool;
use servicespace_core::registry::{CatalogEntry, Policy, PolicyKind, Properties, RegistryError};
use servicespace_core::store::{FileJournal, SystemClock};
use servicespace_core::{
    Connector, ConsumerRuntime, ContractId, Endpoint, InvocationId, InvocationStore, ProviderRuntime, Registry,
    ServiceRegistration, TransitionLog,
};
use tokio::net::TcpListener;
use tokio::sync::oneshot;
use tokio::task::JoinHandle;

use crate::config::NodeConfig;
use crate::transport::{HttpCallbacks, HttpTransport, NODE_HEADER, SECRET_HEADER, SIGNALS_PATH};

/// Requests served, by route name.
#[derive(Debug, Default)]
pub struct RequestCounts(Mutex<BTreeMap<&'static str, u64>>);

impl RequestCounts {
    fn hit(&self, route: &'static str) {
        *self.0.lock().entry(route).or_default() += 1;
    }

    pub fn get(&self, route: &str) -> u64 {
        self.0.lock().get(route).copied().unwrap_or(0)
    }

    pub fn snapshot(&self) -> BTreeMap<&'static str, u64> {
        self.0.lock().clone()
    }
}

struct Shared {
    config: NodeConfig,
    url: String,
    connector: Connector,
    registry: Arc<Registry>,
    counts: RequestCounts,
    client: reqwest::Client,
    recovered: usize,
}

pub struct RunningNode {
    shared: Arc<Shared>,
    pub addr: SocketAddr,
    pub log: TransitionLog,
    /// Provider invocations invalidated by startup recovery.
    pub recovered: usize,
    shutdown: Option<oneshot::Sender<()>>,
    task: Option<JoinHandle<()>>,
}

impl RunningNode {
    pub fn url(&self) -> &str {
        &self.shared.url
    }

    pub fn name(&self) -> &str {
        &self.shared.config.name
    }

    pub fn consumer(&self) -> &ConsumerRuntime {
        &self.shared.connector.consumer
    }

    pub fn provider(&self) -> Option<&ProviderRuntime> {
        self.shared.connector.provider.as_ref()
    }

    pub fn registry(&self) -> &Arc<Registry> {
        &self.shared.registry
    }

    pub fn counts(&self) -> &RequestCounts {
        &self.shared.counts
    }

    /// Stops accepting requests and waits for the server task.
    pub async fn shutdown(mut self) {
        self.stop().await;
    }

    async fn stop(&mut self) {
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
        if let Some(task) = self.task.take() {
            let _ = task.await;
        }
    }

    /// Serves until the process receives ctrl-c.
    pub async fn run_until_ctrl_c(mut self) -> anyhow::Result<()> {
        tokio::signal::ctrl_c().await.context("waiting for ctrl-c")?;
        tracing::info!("shutting down");
        self.stop().await;
        Ok(())
    }
}

/// Binds the listener, builds the runtimes over the configured storage,
/// recovers interrupted provider invocations and then starts serving. `extra` services are registered in addition
/// to those in the configuration.
pub async fn start(config: NodeConfig, extra: Vec<ServiceRegistration>) -> anyhow::Result<RunningNode> {
    config.validate()?;
    let handle = tokio::runtime::Handle::current();
    // Bind first so a port-0 address is known to the runtimes. Nothing is
    // served until recovery has finished.
    let listener = TcpListener::bind(config.listen).await.with_context(|| format!("binding {}", config.listen))?;
    let addr = listener.local_addr()?;
    let mut config = config;
    if config.public_url.is_none() {
        config.public_url = Some(format!("http://{addr}"));
    }
    let url = config.public_url();
    let log = TransitionLog::new();
    let cfg = config.clone();
    let log_for_build = log.clone();
    // storage and wrapper setup do blocking I/O
    let (connector, registry) = tokio::task::spawn_blocking(move || -> anyhow::Result<(Connector, Arc<Registry>)> {
        let clock = Arc::new(SystemClock);
        let (store, registry, contracts) = match &cfg.data_dir {
            Some(dir) => {
                std::fs::create_dir_all(dir).with_context(|| format!("creating data_dir {}", dir.display()))?;
                let journal = FileJournal::open(dir.join("invocations.jsonl")).context("opening invocation journal")?;
                let store = InvocationStore::open(Arc::new(journal), clock, log_for_build)
                    .context("restoring invocation journal")?;
                let registry = Registry::persistent(dir.join("registry.json")).context("opening registry")?;
                let contracts = ContractBook::persistent(dir.join("contracts.json")).context("opening contracts")?;
                (store, registry, contracts)
            }
            None => (InvocationStore::in_memory(clock, log_for_build), Registry::new(), ContractBook::new()),
        };
        let store = Arc::new(store);
        let registry = Arc::new(registry);
        let transport = Arc::new(HttpTransport::new(handle.clone(), cfg.name.clone(), cfg.shared_secret.clone()));
        let consumer = ConsumerRuntime::new(
            Endpoint::new(cfg.public_url()),
            store.clone(),
            Arc::new(contracts),
            transport.clone(),
            Arc::new(HttpCallbacks::new(handle.clone())),
        );
        let provider = if cfg.provider {
            let provider = ProviderRuntime::new(
                Endpoint::new(cfg.public_url()),
                store,
                registry.clone(),
                transport,
                Arc::new(ThreadPool::new(cfg.pool_size)),
            );
            for registration in cfg.registrations().into_iter().chain(extra) {
                provider.register_service(registration)?;
            }
            Some(provider)
        } else {
            None
        };
        Ok((Connector::new(consumer, provider), registry))
    })
    .await??;

    let recovered = match &connector.provider {
        Some(provider) => {
            let provider = provider.clone();
            tokio::task::spawn_blocking(move || provider.recover_on_start()).await?
        }
        None => 0,
    };
    if recovered > 0 {
        tracing::info!(node = %config.name, recovered, "recovered provider invocations after restart");
    }

    let shared = Arc::new(Shared {
        config: config.clone(),
        url: url.clone(),
        connector,
        registry,
        counts: RequestCounts::default(),
        client: reqwest::Client::builder()
            .timeout(std::time::Duration::from_secs(10))
            .redirect(reqwest::redirect::Policy::none())
            .build()?,
        recovered,
    });
    let app = router(shared.clone());
    let (tx, rx) = oneshot::channel::<()>();
    let task = tokio::spawn(async move {
        let server = axum::serve(listener, app).with_graceful_shutdown(async {
            let _ = rx.await;
        });
        if let Err(e) = server.await {
            tracing::error!(error = %e, "server stopped");
        }
    });
    tracing::info!(node = %config.name, %addr, %url, "listening");
    Ok(RunningNode { shared, addr, log, recovered, shutdown: Some(tx), task: Some(task) })
}

fn router(shared: Arc<Shared>) -> Router {
    Router::new()
        .route("/health", get(|| async { "ok" }))
        .route(SIGNALS_PATH, post(signals))
        .route("/serviceinvocation/invoke", post(invoke))
        .route("/serviceinvocation/status", get(status))
        .route("/serviceinvocation/result", get(result))
        .route("/management/assets", post(create_asset))
        .route("/management/offers", post(create_offer))
        .route("/management/catalog", get(catalog))
        .route("/management/contracts/negotiate", post(negotiate))
        .route("/management/negotiations", post(negotiate_remote))
        .route("/management/remote-catalog", get(remote_catalog))
        .route("/management/contracts", get(list_contracts))
        .route("/management/requests", get(request_counts))
        .route("/management/recovery", get(recovery))
        .with_state(shared)
}

type ApiResult = Result<Response, ApiError>;

struct ApiError(StatusCode, String);

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.0, Json(json!({ "error": self.1 }))).into_response()
    }
}

fn bad_request(message: impl Into<String>) -> ApiError {
    ApiError(StatusCode::BAD_REQUEST, message.into())
}

fn internal(e: impl std::fmt::Display) -> ApiError {
    ApiError(StatusCode::INTERNAL_SERVER_ERROR, e.to_string())
}

impl From<RegistryError> for ApiError {
    fn from(e: RegistryError) -> Self {
        let status = match e {
            RegistryError::UnknownAsset(_) | RegistryError::UnknownOffer(_) => StatusCode::NOT_FOUND,
            RegistryError::AccessDenied(_) => StatusCode::FORBIDDEN,
            RegistryError::DuplicateAsset(_) => StatusCode::CONFLICT,
            RegistryError::Persistence(_) => StatusCode::INTERNAL_SERVER_ERROR,
            _ => StatusCode::BAD_REQUEST,
        };
        ApiError(status, e.to_string())
    }
}

/// Runs blocking runtime work off the async executor.
async fn blocking<T: Send + 'static>(f: impl FnOnce() -> T + Send + 'static) -> Result<T, ApiError> {
    tokio::task::spawn_blocking(f).await.map_err(internal)
}

/// Rejects inter-connector calls without the configured shared secret.
fn check_secret(shared: &Shared, headers: &HeaderMap) -> Result<(), ApiError> {
    match &shared.config.shared_secret {
        Some(secret) if headers.get(SECRET_HEADER).and_then(|v| v.to_str().ok()) != Some(secret.as_str()) => {
            Err(ApiError(StatusCode::UNAUTHORIZED, "missing or wrong shared secret".into()))
        }
        _ => Ok(()),
    }
}

fn provider(shared: &Shared) -> Result<&ProviderRuntime, ApiError> {
    shared
        .connector
        .provider
        .as_ref()
        .ok_or_else(|| ApiError(StatusCode::NOT_FOUND, "this node does not act as a provider".into()))
}

async fn signals(State(shared): State<Arc<Shared>>, headers: HeaderMap, body: Bytes) -> ApiResult {
    shared.counts.hit("signals");
    check_secret(&shared, &headers)?;
    let connector = shared.connector.clone();
    match blocking(move || connector.receive(&body)).await? {
        Ok(_) => Ok(StatusCode::ACCEPTED.into_response()),
        Err(e) => Err(bad_request(e.to_string())),
    }
}

#[derive(Debug, Default, Deserialize)]
#[serde(rename_all = "camelCase")]
struct InvokeQuery {
    contract_id: Option<String>,
    callback_url: Option<String>,
}

/// Arguments arrive as JSON values; strings pass through, anything else is
/// handed to the service in its JSON text form.
fn argument_strings(values: Vec<Value>) -> Vec<String> {
    values
        .into_iter()
        .map(|v| match v {
            Value::String(s) => s,
            other => other.to_string(),
        })
        .collect()
}

async fn invoke(State(shared): State<Arc<Shared>>, Query(query): Query<InvokeQuery>, body: Bytes) -> ApiResult {
    shared.counts.hit("invoke");
    let body: Value = if body.is_empty() {
        Value::Array(Vec::new())
    } else {
        serde_json::from_slice(&body).map_err(|e| bad_request(format!("body is not JSON: {e}")))?
    };
    let (contract, callback, args) = match body {
        Value::Array(args) => (query.contract_id, query.callback_url, args),
        Value::Object(mut fields) => {
            let text = |v: Option<Value>| v.and_then(|v| v.as_str().map(str::to_string));
            let contract = query.contract_id.or_else(|| text(fields.remove("contractId")));
            let callback = query.callback_url.or_else(|| text(fields.remove("callbackUrl")));
            let args = match fields.remove("args") {
                Some(Value::Array(args)) => args,
                None => Vec::new(),
                Some(_) => return Err(bad_request("`args` must be an array")),
            };
            (contract, callback, args)
        }
        _ => return Err(bad_request("body must be an array of arguments or an object")),
    };
    let contract = contract.ok_or_else(|| bad_request("contractId is required"))?;
    let contract = ContractId::new(contract).map_err(bad_request)?;
    if let Some(url) = &callback {
        reqwest::Url::parse(url).map_err(|e| bad_request(format!("callbackUrl: {e}")))?;
    }
    let consumer = shared.connector.consumer.clone();
    let args = argument_strings(args);
    match blocking(move || consumer.invoke(&contract, args, callback)).await? {
        Ok(id) => Ok((StatusCode::OK, Json(json!({ "invocationId": id }))).into_response()),
        Err(e @ InvokeError::UnknownContract(_)) => Err(ApiError(StatusCode::NOT_FOUND, e.to_string())),
    }
}

#[derive(Debug, Deserialize)]
#[serde(rename_all = "camelCase")]
struct IdQuery {
    invocation_id: String,
}

fn parse_id(raw: &str) -> Result<InvocationId, ApiError> {
    raw.parse().map_err(|_| bad_request(format!("'{raw}' is not an invocation id")))
}

async fn status(State(shared): State<Arc<Shared>>, Query(query): Query<IdQuery>) -> ApiResult {
    shared.counts.hit("status");
    let id = parse_id(&query.invocation_id)?;
    let consumer = shared.connector.consumer.clone();
    match blocking(move || consumer.status(id)).await? {
        Some(view) => Ok(Json(view).into_response()),
        None => Err(ApiError(StatusCode::NOT_FOUND, format!("unknown invocation {id}"))),
    }
}

async fn result(State(shared): State<Arc<Shared>>, Query(query): Query<IdQuery>) -> ApiResult {
    shared.counts.hit("result");
    let id = parse_id(&query.invocation_id)?;
    let consumer = shared.connector.consumer.clone();
    match blocking(move || consumer.result(id)).await? {
        Ok(result) => Ok(Json(result).into_response()),
        Err(ResultError::Failed { state, message }) => {
            Ok(Json(json!({ "success": false, "errorMessage": message, "state": state })).into_response())
        }
        Err(e @ ResultError::NotFound(_)) => Err(ApiError(StatusCode::NOT_FOUND, e.to_string())),
        Err(e @ ResultError::CacheLost) => Err(ApiError(StatusCode::GONE, e.to_string())),
        Err(e) => Err(ApiError(StatusCode::CONFLICT, e.to_string())),
    }
}

#[derive(Debug, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
struct AssetRequest {
    asset_id: Option<String>,
    /// Fills the type properties and the private service id from a loaded service.
    service_id: Option<String>,
    #[serde(default)]
    public_properties: Properties,
    #[serde(default)]
    private_properties: Properties,
}

async fn create_asset(State(shared): State<Arc<Shared>>, Json(request): Json<AssetRequest>) -> ApiResult {
    shared.counts.hit("assets");
    let registry = shared.registry.clone();
    let asset_id = match request.service_id {
        Some(service_id) => {
            let metadata = provider(&shared)?
                .service_metadata(&service_id)
                .ok_or_else(|| bad_request(format!("no service '{service_id}' is loaded on this node")))?;
            if !request.private_properties.is_empty() {
                return Err(bad_request("privateProperties cannot be combined with serviceId"));
            }
            blocking(move || registry.create_service_asset(request.asset_id, &metadata, request.public_properties))
                .await??
        }
        None => {
            blocking(move || registry.create_asset(request.asset_id, request.public_properties, request.private_properties))
                .await??
        }
    };
    Ok((StatusCode::CREATED, Json(json!({ "assetId": asset_id }))).into_response())
}

#[derive(Debug, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
struct OfferRequest {
    asset_id: String,
    access_policy: Option<Policy>,
    usage_policy: Option<Policy>,
}

async fn create_offer(State(shared): State<Arc<Shared>>, Json(request): Json<OfferRequest>) -> ApiResult {
    shared.counts.hit("offers");
    let registry = shared.registry.clone();
    let access = request.access_policy.unwrap_or_else(|| Policy::allow_all(PolicyKind::Access));
    let usage = request.usage_policy.unwrap_or_else(|| Policy::allow_all(PolicyKind::Usage));
    let asset_id = request.asset_id.clone();
    let offer_id = blocking(move || registry.create_offer(&asset_id, access, usage)).await??;
    Ok((StatusCode::CREATED, Json(json!({ "offerId": offer_id, "assetId": request.asset_id }))).into_response())
}

#[derive(Debug, Deserialize)]
struct CatalogQuery {
    counterparty: Option<String>,
}

async fn catalog(State(shared): State<Arc<Shared>>, headers: HeaderMap, Query(query): Query<CatalogQuery>) -> ApiResult {
    shared.counts.hit("catalog");
    check_secret(&shared, &headers)?;
    let counterparty = query
        .counterparty
        .or_else(|| headers.get(NODE_HEADER).and_then(|v| v.to_str().ok()).map(str::to_string))
        .ok_or_else(|| bad_request("counterparty is required"))?;
    Ok(Json(shared.registry.catalog(&counterparty)).into_response())
}

#[derive(Debug, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
struct NegotiateRequest {
    consumer_id: String,
    offer_id: String,
}

async fn negotiate(State(shared): State<Arc<Shared>>, headers: HeaderMap, Json(request): Json<NegotiateRequest>) -> ApiResult {
    shared.counts.hit("negotiate");
    check_secret(&shared, &headers)?;
    provider(&shared)?;
    let registry = shared.registry.clone();
    let now = servicespace_core::store::Clock::now_ms(&SystemClock);
    let contract = blocking(move || registry.negotiate_contract(&request.consumer_id, &request.offer_id, now)).await??;
    Ok(Json(json!({ "contractId": contract })).into_response())
}

#[derive(Debug, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
struct RemoteNegotiation {
    /// Provider base URL or the name of a configured peer.
    provider: String,
    offer_id: String,
}

fn resolve_peer(shared: &Shared, provider: &str) -> Result<String, ApiError> {
    let url = shared.config.peer_url(provider).unwrap_or(provider);
    let parsed = reqwest::Url::parse(url).map_err(|_| bad_request(format!("'{provider}' is neither a peer nor a URL")))?;
    Ok(parsed.as_str().trim_end_matches('/').to_string())
}

fn peer_request(shared: &Shared, request: reqwest::RequestBuilder) -> reqwest::RequestBuilder {
    let request = request.header(NODE_HEADER, &shared.config.name);
    match &shared.config.shared_secret {
        Some(secret) => request.header(SECRET_HEADER, secret),
        None => request,
    }
}

async fn relay_error(response: reqwest::Response) -> ApiError {
    let status = StatusCode::from_u16(response.status().as_u16()).unwrap_or(StatusCode::BAD_GATEWAY);
    let body: Value = response.json().await.unwrap_or(Value::Null);
    let message = body.get("error").and_then(Value::as_str).unwrap_or("provider rejected the request");
    ApiError(status, format!("provider: {message}"))
}

async fn negotiate_remote(State(shared): State<Arc<Shared>>, Json(request): Json<RemoteNegotiation>) -> ApiResult {
    shared.counts.hit("negotiations");
    let provider_url = resolve_peer(&shared, &request.provider)?;
    let response = peer_request(&shared, shared.client.post(format!("{provider_url}/management/contracts/negotiate")))
        .json(&json!({ "consumerId": shared.config.name, "offerId": request.offer_id }))
        .send()
        .await
        .map_err(|e| ApiError(StatusCode::BAD_GATEWAY, format!("provider unreachable: {e}")))?;
    if !response.status().is_success() {
        return Err(relay_error(response).await);
    }
    let body: Value = response.json().await.map_err(|e| ApiError(StatusCode::BAD_GATEWAY, e.to_string()))?;
    let contract = body
        .get("contractId")
        .and_then(Value::as_str)
        .and_then(|raw| ContractId::new(raw).ok())
        .ok_or_else(|| ApiError(StatusCode::BAD_GATEWAY, "provider returned no valid contractId".into()))?;
    let book = shared.connector.consumer.contracts().clone();
    let (c, p) = (contract.clone(), Endpoint::new(provider_url.clone()));
    blocking(move || book.add(c, p)).await?;
    Ok(Json(json!({ "contractId": contract, "provider": provider_url })).into_response())
}

#[derive(Debug, Deserialize)]
struct RemoteCatalogQuery {
    provider: String,
}

async fn remote_catalog(State(shared): State<Arc<Shared>>, Query(query): Query<RemoteCatalogQuery>) -> ApiResult {
    shared.counts.hit("remote-catalog");
    let provider_url = resolve_peer(&shared, &query.provider)?;
    let response = peer_request(&shared, shared.client.get(format!("{provider_url}/management/catalog")))
        .query(&[("counterparty", shared.config.name.as_str())])
        .send()
        .await
        .map_err(|e| ApiError(StatusCode::BAD_GATEWAY, format!("provider unreachable: {e}")))?;
    if !response.status().is_success() {
        return Err(relay_error(response).await);
    }
    let entries: Vec<CatalogEntry> =
        response.json().await.map_err(|e| ApiError(StatusCode::BAD_GATEWAY, e.to_string()))?;
    Ok(Json(entries).into_response())
}

async fn list_contracts(State(shared): State<Arc<Shared>>) -> ApiResult {
    let entries: Vec<Value> = shared
        .connector
        .consumer
        .contracts()
        .list()
        .into_iter()
        .map(|(contract, provider)| json!({ "contractId": contract, "provider": provider }))
        .collect();
    Ok(Json(entries).into_response())
}

async fn request_counts(State(shared): State<Arc<Shared>>) -> ApiResult {
    Ok(Json(shared.counts.snapshot()).into_response())
}

/// Provider invocations invalidated when this process started.
async fn recovery(State(shared): State<Arc<Shared>>) -> ApiResult {
    Ok(Json(json!({ "recovered": shared.recovered })).into_response())
}

impl From<tokio::task::JoinError> for ApiError {
    fn from(e: tokio::task::JoinError) -> Self {
        internal(e)
    }
}
