//! Scripted end-to-end flow: a consumer node reaches an image classifier
//! only through a provider node's wrapper service.

use std::net::SocketAddr;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use anyhow::{anyhow, Context};
use axum::extract::State;
use axum::routing::post;
use axum::{Json, Router};
use serde_json::{json, Value};
use servicespace_core::consumer::CallbackNotification;
use servicespace_core::InvocationId;
use tokio::net::TcpListener;
use tokio::sync::{mpsc, oneshot};

use crate::classifier::{self, ClassifierServer};
use crate::client::NodeClient;
use crate::config::{NodeConfig, WrapperConfig};
use crate::node::{self, RunningNode};

pub const CLASSIFIER_SERVICE_ID: &str = "mnist.classify";
pub const PROVIDER_NAME: &str = "provider-a";
pub const CONSUMER_NAME: &str = "consumer-b";

/// Local endpoint that collects completion callbacks.
pub struct CallbackSink {
    pub url: String,
    received: Arc<AtomicU64>,
    rx: mpsc::UnboundedReceiver<CallbackNotification>,
    shutdown: Option<oneshot::Sender<()>>,
}

impl CallbackSink {
    pub async fn start() -> anyhow::Result<Self> {
        let listener = TcpListener::bind(SocketAddr::from(([127, 0, 0, 1], 0))).await?;
        let url = format!("http://{}/callback", listener.local_addr()?);
        let (tx, rx) = mpsc::unbounded_channel();
        let received = Arc::new(AtomicU64::new(0));
        let state = (tx, received.clone());
        let app = Router::new()
            .route(
                "/callback",
                post(
                    |State((tx, count)): State<(mpsc::UnboundedSender<CallbackNotification>, Arc<AtomicU64>)>,
                     Json(note): Json<CallbackNotification>| async move {
                        count.fetch_add(1, Ordering::SeqCst);
                        let _ = tx.send(note);
                        "ok"
                    },
                ),
            )
            .with_state(state);
        let (stop, stopped) = oneshot::channel::<()>();
        tokio::spawn(async move {
            let _ = axum::serve(listener, app)
                .with_graceful_shutdown(async {
                    let _ = stopped.await;
                })
                .await;
        });
        Ok(Self { url, received, rx, shutdown: Some(stop) })
    }

    /// Waits for the callback of `id`, skipping any for other invocations.
    pub async fn wait_for(&mut self, id: InvocationId, timeout: Duration) -> anyhow::Result<CallbackNotification> {
        let deadline = tokio::time::Instant::now() + timeout;
        loop {
            let note = tokio::time::timeout_at(deadline, self.rx.recv())
                .await
                .map_err(|_| anyhow!("no callback for {id} within {timeout:?}"))?
                .ok_or_else(|| anyhow!("callback sink closed"))?;
            if note.invocation_id == id {
                return Ok(note);
            }
        }
    }

    pub fn received(&self) -> u64 {
        self.received.load(Ordering::SeqCst)
    }
}

impl Drop for CallbackSink {
    fn drop(&mut self) {
        if let Some(stop) = self.shutdown.take() {
            let _ = stop.send(());
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct DemoOptions {
    /// External classifier endpoint; a local stub is started when absent.
    pub classifier_url: Option<String>,
    /// Poll /status instead of waiting for the callback.
    pub poll: bool,
}

#[derive(Debug, Clone)]
pub struct DemoReport {
    pub invocation_id: InvocationId,
    pub result: Value,
    pub label: Option<String>,
    pub status_requests: u64,
    pub callbacks: u64,
    /// Callers seen by the stub classifier; `None` when an external one was used.
    pub classifier_callers: Option<Vec<Option<String>>>,
    pub elapsed: Duration,
}

/// A failed demo step.
#[derive(Debug)]
pub struct StageError {
    pub stage: &'static str,
    pub error: anyhow::Error,
}

impl std::fmt::Display for StageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "demo failed at stage '{}': {:#}", self.stage, self.error)
    }
}

impl std::error::Error for StageError {}

trait Stage<T> {
    fn stage(self, stage: &'static str) -> Result<T, StageError>;
}

impl<T> Stage<T> for anyhow::Result<T> {
    fn stage(self, stage: &'static str) -> Result<T, StageError> {
        self.map_err(|error| StageError { stage, error })
    }
}

fn loopback() -> SocketAddr {
    SocketAddr::from(([127, 0, 0, 1], 0))
}

pub fn provider_config(classifier_url: &str) -> NodeConfig {
    let mut config = NodeConfig::new(PROVIDER_NAME, loopback());
    config.services = vec!["builtin.echo".into()];
    config.wrappers = vec![WrapperConfig {
        service_id: CLASSIFIER_SERVICE_ID.into(),
        url: classifier_url.into(),
        argument_types: vec!["image/png;base64".into()],
        return_type: "text/plain".into(),
        timeout_ms: Some(5_000),
    }];
    config
}

pub fn consumer_config() -> NodeConfig {
    let mut config = NodeConfig::new(CONSUMER_NAME, loopback());
    config.provider = false;
    config
}

pub async fn run(options: DemoOptions) -> Result<DemoReport, StageError> {
    let started = Instant::now();
    let stub: Option<ClassifierServer> = match &options.classifier_url {
        Some(_) => None,
        None => Some(classifier::serve(loopback(), Duration::ZERO).await.stage("start classifier")?),
    };
    let classifier_url = options.classifier_url.clone().unwrap_or_else(|| stub.as_ref().expect("stub").url());
    let provider = node::start(provider_config(&classifier_url), Vec::new()).await.stage("start provider")?;
    let consumer = node::start(consumer_config(), Vec::new()).await.stage("start consumer")?;
    let outcome = flow(&provider, &consumer, &options).await;
    let callers = stub.as_ref().map(|s| s.monitor.callers());
    consumer.shutdown().await;
    provider.shutdown().await;
    if let Some(stub) = stub {
        stub.shutdown().await;
    }
    let (invocation_id, result, status_requests, callbacks) = outcome?;
    if let Some(callers) = &callers {
        if callers.iter().any(|c| c.as_deref() != Some(PROVIDER_NAME)) {
            return Err(StageError {
                stage: "egress check",
                error: anyhow!("classifier was contacted by {callers:?}, not only by {PROVIDER_NAME}"),
            });
        }
    }
    let label = (result.get("success") == Some(&Value::Bool(true)))
        .then(|| result.get("data").and_then(Value::as_str).map(str::to_string))
        .flatten();
    Ok(DemoReport {
        invocation_id,
        result,
        label,
        status_requests,
        callbacks,
        classifier_callers: callers,
        elapsed: started.elapsed(),
    })
}

async fn flow(
    provider: &RunningNode,
    consumer: &RunningNode,
    options: &DemoOptions,
) -> Result<(InvocationId, Value, u64, u64), StageError> {
    let provider_api = NodeClient::new(provider.url());
    let consumer_api = NodeClient::new(consumer.url());
    let asset = provider_api.create_service_asset(CLASSIFIER_SERVICE_ID, None).await.stage("create asset")?;
    let offer = provider_api.create_offer(&asset, None, None).await.stage("create offer")?;
    let catalog = consumer_api.remote_catalog(provider.url()).await.stage("read catalog")?;
    if !catalog.iter().any(|entry| entry.offer_id == offer) {
        return Err(StageError { stage: "read catalog", error: anyhow!("offer {offer} not visible to the consumer") });
    }
    let contract = consumer_api.negotiate(provider.url(), &offer).await.stage("negotiate")?;
    let image = classifier::encode_image(&classifier::test_image());
    let mut sink = CallbackSink::start().await.stage("start callback receiver")?;
    let callback = (!options.poll).then(|| sink.url.clone());
    let id = consumer_api.invoke(&contract, vec![json!(image)], callback.as_deref()).await.stage("invoke")?;
    if options.poll {
        let deadline = Instant::now() + Duration::from_secs(30);
        loop {
            let status = consumer_api.status(id).await.stage("poll status")?;
            if status.state.is_settled() {
                break;
            }
            if Instant::now() > deadline {
                return Err(StageError { stage: "poll status", error: anyhow!("still {} after 30 s", status.state) });
            }
            tokio::time::sleep(Duration::from_millis(20)).await;
        }
    } else {
        sink.wait_for(id, Duration::from_secs(30)).await.stage("await callback")?;
    }
    let reply = consumer_api.result(id).await.stage("fetch result")?;
    let result = reply.ok_json().context("fetching result").stage("fetch result")?;
    // give a duplicate callback the chance to show up before counting
    tokio::time::sleep(Duration::from_millis(100)).await;
    let status_requests = consumer.counts().get("status");
    Ok((id, result, status_requests, sink.received()))
}
