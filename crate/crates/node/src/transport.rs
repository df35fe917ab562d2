//! Signal and callback delivery over HTTP.

use std::collections::HashMap;
use std::time::Duration;

use parking_lot::Mutex;
use servicespace_core::consumer::{CallbackNotification, CallbackNotifier};
use servicespace_core::signal::encode_signal;
use servicespace_core::{Endpoint, Signal, Transport};
use tokio::runtime::Handle;
use tokio::sync::mpsc::{unbounded_channel, UnboundedSender};

pub const SIGNALS_PATH: &str = "/signals";
pub const SECRET_HEADER: &str = "x-servicespace-secret";
pub const NODE_HEADER: &str = "x-servicespace-node";
pub const CALLBACK_TIMEOUT: Duration = Duration::from_secs(5);
const SIGNAL_TIMEOUT: Duration = Duration::from_secs(10);

/// Posts signals to `{destination}/signals`, one attempt each.
///
/// Each destination has its own sender task working through a queue, so
/// signals to one peer leave in the order they were sent. Failures are
/// logged; the protocol tolerates lost signals.
pub struct HttpTransport {
    runtime: Handle,
    client: reqwest::Client,
    node: String,
    secret: Option<String>,
    queues: Mutex<HashMap<Endpoint, UnboundedSender<Vec<u8>>>>,
}

impl HttpTransport {
    pub fn new(runtime: Handle, node: String, secret: Option<String>) -> Self {
        let client = reqwest::Client::builder()
            .timeout(SIGNAL_TIMEOUT)
            .redirect(reqwest::redirect::Policy::none())
            .build()
            .expect("http client builds without tls");
        Self { runtime, client, node, secret, queues: Mutex::new(HashMap::new()) }
    }

    fn queue_for(&self, destination: &Endpoint) -> UnboundedSender<Vec<u8>> {
        let mut queues = self.queues.lock();
        if let Some(tx) = queues.get(destination).filter(|tx| !tx.is_closed()) {
            return tx.clone();
        }
        let (tx, mut rx) = unbounded_channel::<Vec<u8>>();
        let url = format!("{}{SIGNALS_PATH}", destination.as_str());
        let client = self.client.clone();
        let node = self.node.clone();
        let secret = self.secret.clone();
        self.runtime.spawn(async move {
            while let Some(body) = rx.recv().await {
                let mut request = client
                    .post(&url)
                    .header(reqwest::header::CONTENT_TYPE, "application/json")
                    .header(NODE_HEADER, &node)
                    .body(body);
                if let Some(secret) = &secret {
                    request = request.header(SECRET_HEADER, secret);
                }
                match request.send().await {
                    Ok(response) if response.status().is_success() => {}
                    Ok(response) => tracing::warn!(%url, status = %response.status(), "signal rejected"),
                    Err(e) => tracing::warn!(%url, error = %e, "signal lost"),
                }
            }
        });
        queues.insert(destination.clone(), tx.clone());
        tx
    }
}

impl Transport for HttpTransport {
    fn send(&self, destination: &Endpoint, signal: Signal) {
        let body = match encode_signal(&signal) {
            Ok(body) => body,
            Err(e) => {
                tracing::error!(invocation = %signal.invocation_id, error = %e, "refusing to send invalid signal");
                return;
            }
        };
        if self.queue_for(destination).send(body).is_err() {
            tracing::warn!(destination = destination.as_str(), "sender task gone; signal lost");
        }
    }
}

/// Posts completion notifications once, with a 5 s timeout and no retry.
pub struct HttpCallbacks {
    runtime: Handle,
    client: reqwest::Client,
}

impl HttpCallbacks {
    pub fn new(runtime: Handle) -> Self {
        let client = reqwest::Client::builder()
            .timeout(CALLBACK_TIMEOUT)
            .redirect(reqwest::redirect::Policy::none())
            .build()
            .expect("http client builds without tls");
        Self { runtime, client }
    }
}

impl CallbackNotifier for HttpCallbacks {
    fn notify(&self, url: &str, notification: CallbackNotification) {
        let request = self.client.post(url).json(&notification);
        let url = url.to_string();
        self.runtime.spawn(async move {
            match request.send().await {
                Ok(response) if response.status().is_success() => {}
                Ok(response) => tracing::warn!(%url, status = %response.status(), "callback rejected"),
                Err(e) => tracing::warn!(%url, error = %e, "callback failed"),
            }
        });
    }
}
