//! Stand-in for an image classification model server.
//!
//! `POST /classify` takes `{"args": [base64]}` where the payload decodes to a
//! 28x28 grayscale image (784 bytes) and answers with the label
//! `sum(pixels) mod 10` as plain text. Every request is recorded together
//! with the caller header a connector wrapper sends, so a test can tell who
//! contacted the service.

use std::net::SocketAddr;
use std::sync::Arc;
use std::time::{Duration, Instant};

use anyhow::Context;
use axum::extract::State;
use axum::http::{HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::Engine;
use parking_lot::Mutex;
use serde::Deserialize;
use servicespace_core::sdk::WRAPPER_CALLER_HEADER;
use tokio::net::TcpListener;
use tokio::sync::oneshot;

pub const IMAGE_BYTES: usize = 28 * 28;
/// Response header carrying the handler's own processing time.
pub const BODY_TIME_HEADER: &str = "x-service-body-micros";
pub const CLASSIFY_PATH: &str = "/classify";

pub fn classify(pixels: &[u8]) -> Result<u8, String> {
    if pixels.len() != IMAGE_BYTES {
        return Err(format!("expected {IMAGE_BYTES} pixel bytes, got {}", pixels.len()));
    }
    let sum: u64 = pixels.iter().map(|&p| u64::from(p)).sum();
    Ok((sum % 10) as u8)
}

pub fn encode_image(pixels: &[u8]) -> String {
    base64::engine::general_purpose::STANDARD.encode(pixels)
}

/// A crude "7": a bar along rows 4-5 and a stroke down and to the left.
pub fn test_image() -> Vec<u8> {
    let mut pixels = vec![0u8; IMAGE_BYTES];
    for row in 4..6 {
        for col in 6..22 {
            pixels[row * 28 + col] = 255;
        }
    }
    for step in 0..19 {
        let (row, col) = (6 + step, 21 - step / 2);
        pixels[row * 28 + col] = 253;
    }
    pixels
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Contact {
    /// Value of the wrapper caller header, if any.
    pub caller: Option<String>,
    pub status: u16,
}

#[derive(Debug, Default)]
pub struct EgressMonitor {
    contacts: Mutex<Vec<Contact>>,
}

impl EgressMonitor {
    pub fn contacts(&self) -> Vec<Contact> {
        self.contacts.lock().clone()
    }

    /// Distinct callers that reached the endpoint, `None` for anonymous ones.
    pub fn callers(&self) -> Vec<Option<String>> {
        let mut callers: Vec<_> = self.contacts.lock().iter().map(|c| c.caller.clone()).collect();
        callers.sort();
        callers.dedup();
        callers
    }
}

struct ClassifierState {
    delay: Duration,
    monitor: Arc<EgressMonitor>,
}

pub struct ClassifierServer {
    pub addr: SocketAddr,
    pub monitor: Arc<EgressMonitor>,
    shutdown: Option<oneshot::Sender<()>>,
    task: Option<tokio::task::JoinHandle<()>>,
}

impl ClassifierServer {
    pub fn url(&self) -> String {
        format!("http://{}{CLASSIFY_PATH}", self.addr)
    }

    pub async fn shutdown(mut self) {
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
        if let Some(task) = self.task.take() {
            let _ = task.await;
        }
    }
}

/// Serves the classifier; every request takes at least `delay`.
pub async fn serve(listen: SocketAddr, delay: Duration) -> anyhow::Result<ClassifierServer> {
    let listener = TcpListener::bind(listen).await.with_context(|| format!("binding classifier on {listen}"))?;
    let addr = listener.local_addr()?;
    let monitor = Arc::new(EgressMonitor::default());
    let state = Arc::new(ClassifierState { delay, monitor: monitor.clone() });
    let app = Router::new()
        .route("/health", get(|| async { "ok" }))
        .route(CLASSIFY_PATH, post(handle))
        .with_state(state);
    let (tx, rx) = oneshot::channel::<()>();
    let task = tokio::spawn(async move {
        let server = axum::serve(listener, app).with_graceful_shutdown(async {
            let _ = rx.await;
        });
        if let Err(e) = server.await {
            tracing::error!(error = %e, "classifier stopped");
        }
    });
    Ok(ClassifierServer { addr, monitor, shutdown: Some(tx), task: Some(task) })
}

#[derive(Debug, Deserialize)]
struct ClassifyRequest {
    args: Vec<String>,
}

async fn handle(State(state): State<Arc<ClassifierState>>, headers: HeaderMap, body: axum::body::Bytes) -> Response {
    let started = Instant::now();
    let caller = headers.get(WRAPPER_CALLER_HEADER).and_then(|v| v.to_str().ok()).map(str::to_string);
    let outcome = label_for(&body);
    if !state.delay.is_zero() {
        // a blocking sleep is far more precise than the timer wheel
        let delay = state.delay;
        let _ = tokio::task::spawn_blocking(move || std::thread::sleep(delay)).await;
    }
    let elapsed = started.elapsed().as_micros().to_string();
    let (status, text) = match outcome {
        Ok(label) => (StatusCode::OK, label.to_string()),
        Err(message) => (StatusCode::BAD_REQUEST, message),
    };
    state.monitor.contacts.lock().push(Contact { caller, status: status.as_u16() });
    (status, [(BODY_TIME_HEADER, elapsed)], text).into_response()
}

fn label_for(body: &[u8]) -> Result<u8, String> {
    let Json(request): Json<ClassifyRequest> =
        Json::from_bytes(body).map_err(|e| format!("request body must be {{\"args\": [base64]}}: {e}"))?;
    let [payload] = request.args.as_slice() else {
        return Err(format!("expected exactly one argument, got {}", request.args.len()));
    };
    let pixels = base64::engine::general_purpose::STANDARD
        .decode(payload.trim())
        .map_err(|e| format!("argument is not valid base64: {e}"))?;
    classify(&pixels)
}
