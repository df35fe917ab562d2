#![allow(dead_code)]

use std::net::{SocketAddr, TcpListener};
use std::path::Path;
use std::process::{Child, Command, Stdio};
use std::time::{Duration, Instant};

use anyhow::{anyhow, bail, Context};
use servicespace_core::model::InvocationState;
use servicespace_core::sdk::ServiceRegistration;
use servicespace_core::{ContractId, InvocationId};
use servicespace_node::client::NodeClient;
use servicespace_node::{NodeConfig, RunningNode};

pub fn loopback() -> SocketAddr {
    SocketAddr::from(([127, 0, 0, 1], 0))
}

/// A port that was free a moment ago.
pub fn free_port() -> u16 {
    TcpListener::bind(loopback()).unwrap().local_addr().unwrap().port()
}

pub struct Pair {
    pub provider: RunningNode,
    pub consumer: RunningNode,
}

impl Pair {
    pub async fn start(services: &[&str], extra: Vec<ServiceRegistration>) -> anyhow::Result<Self> {
        let mut provider = NodeConfig::new("provider-a", loopback());
        provider.services = services.iter().map(|s| s.to_string()).collect();
        let mut consumer = NodeConfig::new("consumer-b", loopback());
        consumer.provider = false;
        Ok(Self {
            provider: servicespace_node::start(provider, extra).await?,
            consumer: servicespace_node::start(consumer, Vec::new()).await?,
        })
    }

    pub fn provider_api(&self) -> NodeClient {
        NodeClient::new(self.provider.url())
    }

    pub fn consumer_api(&self) -> NodeClient {
        NodeClient::new(self.consumer.url())
    }

    /// Asset, offer and negotiated contract for `service_id`.
    pub async fn contract_for(&self, service_id: &str) -> anyhow::Result<ContractId> {
        contract_for(&self.provider_api(), &self.consumer_api(), self.provider.url(), service_id).await
    }

    pub async fn wait_for(
        &self,
        id: InvocationId,
        pred: impl Fn(InvocationState) -> bool,
    ) -> anyhow::Result<InvocationState> {
        wait_state(&self.consumer, id, pred, Duration::from_secs(10)).await
    }

    pub async fn shutdown(self) {
        self.consumer.shutdown().await;
        self.provider.shutdown().await;
    }
}

pub async fn contract_for(
    provider_api: &NodeClient,
    consumer_api: &NodeClient,
    provider_url: &str,
    service_id: &str,
) -> anyhow::Result<ContractId> {
    let asset = provider_api.create_service_asset(service_id, None).await?;
    let offer = provider_api.create_offer(&asset, None, None).await?;
    consumer_api.negotiate(provider_url, &offer).await
}

/// Polls the consumer runtime directly, so no /status request is counted.
pub async fn wait_state(
    consumer: &RunningNode,
    id: InvocationId,
    pred: impl Fn(InvocationState) -> bool,
    timeout: Duration,
) -> anyhow::Result<InvocationState> {
    let deadline = Instant::now() + timeout;
    loop {
        let state = consumer.consumer().status(id).map(|s| s.state);
        if let Some(state) = state {
            if pred(state) {
                return Ok(state);
            }
        }
        if Instant::now() > deadline {
            bail!("invocation {id} still {state:?} after {timeout:?}");
        }
        tokio::time::sleep(Duration::from_millis(5)).await;
    }
}

/// A node running as a separate `servicespace serve` process.
pub struct NodeProcess {
    pub child: Child,
    pub url: String,
}

impl NodeProcess {
    pub fn config_text(name: &str, port: u16, data_dir: &Path, services: &[&str]) -> String {
        let services: Vec<String> = services.iter().map(|s| format!("{s:?}")).collect();
        format!(
            "name = {name:?}\nlisten = \"127.0.0.1:{port}\"\ndata_dir = {:?}\nservices = [{}]\n",
            data_dir.display().to_string(),
            services.join(", ")
        )
    }

    pub async fn spawn(config: &Path, port: u16) -> anyhow::Result<Self> {
        let child = Command::new(env!("CARGO_BIN_EXE_servicespace"))
            .arg("serve")
            .arg("--config")
            .arg(config)
            .env("RUST_LOG", "warn")
            .stdout(Stdio::null())
            .stderr(Stdio::null())
            .spawn()
            .context("spawning node process")?;
        let mut node = Self { child, url: format!("http://127.0.0.1:{port}") };
        let http = reqwest::Client::new();
        let deadline = Instant::now() + Duration::from_secs(10);
        loop {
            if let Ok(r) = http.get(format!("{}/health", node.url)).send().await {
                if r.status().is_success() {
                    return Ok(node);
                }
            }
            if let Some(status) = node.child.try_wait()? {
                bail!("node process exited early with {status}");
            }
            if Instant::now() > deadline {
                let _ = node.child.kill();
                return Err(anyhow!("node process did not come up at {}", node.url));
            }
            tokio::time::sleep(Duration::from_millis(20)).await;
        }
    }

    /// SIGKILL, no shutdown hooks.
    pub fn kill(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }

    pub async fn recovered(&self) -> anyhow::Result<u64> {
        let reply = NodeClient::new(self.url.clone()).get("/management/recovery", &[]).await?;
        reply.ok_json()?["recovered"].as_u64().ok_or_else(|| anyhow!("no recovered count"))
    }
}

impl Drop for NodeProcess {
    fn drop(&mut self) {
        self.kill();
    }
}

/// Forwards signals to `target` except those of one kind, which are
/// acknowledged and dropped.
pub struct SignalFilter {
    pub url: String,
    stop: Option<tokio::sync::oneshot::Sender<()>>,
}

impl SignalFilter {
    pub async fn start(target: String, drop: servicespace_core::SignalKind) -> anyhow::Result<Self> {
        use axum::body::Bytes;
        use axum::http::StatusCode;
        use axum::routing::post;

        let listener = tokio::net::TcpListener::bind(loopback()).await?;
        let url = format!("http://{}", listener.local_addr()?);
        let http = reqwest::Client::new();
        let app = axum::Router::new().route(
            "/signals",
            post(move |headers: axum::http::HeaderMap, body: Bytes| {
                let http = http.clone();
                let target = target.clone();
                async move {
                    let kind = servicespace_core::signal::decode_signal(&body).map(|s| s.kind());
                    if kind == Ok(drop) {
                        return StatusCode::ACCEPTED;
                    }
                    let mut request = http.post(format!("{target}/signals")).body(body.to_vec());
                    for (name, value) in &headers {
                        if name.as_str().starts_with("x-servicespace") || name == "content-type" {
                            request = request.header(name, value);
                        }
                    }
                    match request.send().await {
                        Ok(r) => StatusCode::from_u16(r.status().as_u16()).unwrap_or(StatusCode::BAD_GATEWAY),
                        Err(_) => StatusCode::BAD_GATEWAY,
                    }
                }
            }),
        );
        let (tx, rx) = tokio::sync::oneshot::channel::<()>();
        tokio::spawn(async move {
            let _ = axum::serve(listener, app).with_graceful_shutdown(async { let _ = rx.await; }).await;
        });
        Ok(Self { url, stop: Some(tx) })
    }
}

impl Drop for SignalFilter {
    fn drop(&mut self) {
        if let Some(stop) = self.stop.take() {
            let _ = stop.send(());
        }
    }
}
