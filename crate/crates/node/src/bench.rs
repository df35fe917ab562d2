//! Latency benchmark: mediated invocation through two connectors against a
//! direct call of the same service, on loopback.
//!
//! A mediated run starts at the `/invoke` request and ends when the
//! `/result` response has been read. The callback triggers the result fetch
//! immediately. Sub-spans use the consumer's own phase timestamps:
//!
//! - start until FINISHED: `/invoke` received by the consumer node until its
//!   FINISHED transition
//! - FINISHED until result requested: FINISHED transition until the
//!   `/result` request reaches the consumer node, so it includes the callback
//!   round trip
//! - result requested until retrieved: `/result` received until the client
//!   has read the response
//!
//! The complete span additionally contains the `/invoke` request's trip
//! to the consumer node.

use std::fmt::Write as _;
use std::net::SocketAddr;
use std::time::{Duration, Instant};

use anyhow::{anyhow, bail, Context};
use serde::Serialize;
use serde_json::json;

use crate::classifier::{self, BODY_TIME_HEADER};
use crate::client::NodeClient;
use crate::demo::{self, CallbackSink, CLASSIFIER_SERVICE_ID};
use crate::node;

pub const START_UNTIL_FINISHED: &str = "start until FINISHED";
pub const FINISHED_UNTIL_REQUESTED: &str = "FINISHED until result requested";
pub const REQUESTED_UNTIL_RETRIEVED: &str = "result requested until retrieved";
pub const COMPLETE: &str = "complete: start until result retrieved";
pub const DIRECT: &str = "direct invocation";
pub const BODY_ONLY: &str = "service body only";

#[derive(Debug, Clone)]
pub struct BenchOptions {
    pub runs: usize,
    pub warmup: usize,
    /// Extra time the service body takes per call.
    pub delay: Duration,
    pub direct_only: bool,
}

impl Default for BenchOptions {
    fn default() -> Self {
        Self { runs: 10, warmup: 3, delay: Duration::ZERO, direct_only: false }
    }
}

#[derive(Debug, Clone, Serialize)]
#[serde(rename_all = "camelCase")]
pub struct Row {
    pub span: &'static str,
    pub mean_ms: f64,
    pub std_ms: f64,
}

#[derive(Debug, Clone, Serialize)]
#[serde(rename_all = "camelCase")]
pub struct LatencyReport {
    pub runs: usize,
    pub warmup: usize,
    pub delay_ms: f64,
    pub rows: Vec<Row>,
    pub environment: String,
}

fn stats(span: &'static str, samples: &[f64]) -> Row {
    let n = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / n;
    let var = if samples.len() > 1 { samples.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0) } else { 0.0 };
    Row { span, mean_ms: mean, std_ms: var.sqrt() }
}

fn ms(d: Duration) -> f64 {
    d.as_secs_f64() * 1000.0
}

impl LatencyReport {
    pub fn row(&self, span: &str) -> Option<&Row> {
        self.rows.iter().find(|r| r.span == span)
    }

    pub fn mean(&self, span: &str) -> Option<f64> {
        self.row(span).map(|r| r.mean_ms)
    }

    /// Mediated minus direct mean.
    pub fn overhead_ms(&self) -> Option<f64> {
        Some(self.mean(COMPLETE)? - self.mean(DIRECT)?)
    }

    /// Complete span mean minus the sum of its three sub-span means.
    pub fn decomposition_gap_ms(&self) -> Option<f64> {
        let parts = self.mean(START_UNTIL_FINISHED)? + self.mean(FINISHED_UNTIL_REQUESTED)? + self.mean(REQUESTED_UNTIL_RETRIEVED)?;
        Some(self.mean(COMPLETE)? - parts)
    }

    pub fn table(&self) -> String {
        let width = self.rows.iter().map(|r| r.span.len()).max().unwrap_or(0).max(4);
        let mut out = String::new();
        let _ = writeln!(out, "{:<width$}  {:>10}  {:>10}", "span", "mean ms", "std ms");
        for row in &self.rows {
            let _ = writeln!(out, "{:<width$}  {:>10.3}  {:>10.3}", row.span, row.mean_ms, row.std_ms);
        }
        let _ = writeln!(
            out,
            "runs={} warmup={} service delay={} ms; {}",
            self.runs, self.warmup, self.delay_ms, self.environment
        );
        out
    }

    /// One JSON object per row.
    pub fn json_lines(&self) -> String {
        self.rows
            .iter()
            .map(|row| {
                let mut line = serde_json::to_value(row).expect("rows serialize");
                line["runs"] = json!(self.runs);
                line["delayMs"] = json!(self.delay_ms);
                line.to_string() + "\n"
            })
            .collect()
    }
}

fn environment() -> String {
    let cpus = std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1);
    format!(
        "loopback, {} {}, {cpus} cpus, {} build; absolute numbers are specific to this machine",
        std::env::consts::OS,
        std::env::consts::ARCH,
        if cfg!(debug_assertions) { "debug" } else { "release" }
    )
}

/// One direct call of the classifier; returns (round trip, body time).
async fn direct_call(http: &reqwest::Client, url: &str, image: &str) -> anyhow::Result<(Duration, Duration)> {
    let started = Instant::now();
    let response = http.post(url).json(&json!({ "args": [image] })).send().await.context("direct call")?;
    let body_micros: u64 = response
        .headers()
        .get(BODY_TIME_HEADER)
        .and_then(|v| v.to_str().ok())
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| anyhow!("classifier sent no body time"))?;
    let status = response.status();
    let _ = response.bytes().await?;
    let elapsed = started.elapsed();
    if !status.is_success() {
        bail!("direct call failed with {status}");
    }
    Ok((elapsed, Duration::from_micros(body_micros)))
}

pub async fn run(options: BenchOptions) -> anyhow::Result<LatencyReport> {
    if options.runs == 0 {
        bail!("runs must be a positive integer");
    }
    if options.warmup == 0 {
        bail!("warmup must be a positive integer");
    }
    let loopback = SocketAddr::from(([127, 0, 0, 1], 0));
    let stub = classifier::serve(loopback, options.delay).await?;
    let image = classifier::encode_image(&classifier::test_image());
    let http = reqwest::Client::builder().timeout(Duration::from_secs(60)).build()?;

    let mut direct = Vec::new();
    let mut body = Vec::new();
    for i in 0..options.warmup + options.runs {
        let (round_trip, body_time) = direct_call(&http, &stub.url(), &image).await?;
        if i >= options.warmup {
            direct.push(ms(round_trip));
            body.push(ms(body_time));
        }
    }
    if options.direct_only {
        stub.shutdown().await;
        return Ok(LatencyReport {
            runs: options.runs,
            warmup: options.warmup,
            delay_ms: ms(options.delay),
            rows: vec![stats(DIRECT, &direct)],
            environment: environment(),
        });
    }

    let provider = node::start(demo::provider_config(&stub.url()), Vec::new()).await?;
    let consumer = node::start(demo::consumer_config(), Vec::new()).await?;
    let outcome = mediated(&provider, &consumer, &options, &image).await;
    consumer.shutdown().await;
    provider.shutdown().await;
    stub.shutdown().await;
    let [a, b, c, complete] = outcome?;
    Ok(LatencyReport {
        runs: options.runs,
        warmup: options.warmup,
        delay_ms: ms(options.delay),
        rows: vec![
            stats(START_UNTIL_FINISHED, &a),
            stats(FINISHED_UNTIL_REQUESTED, &b),
            stats(REQUESTED_UNTIL_RETRIEVED, &c),
            stats(COMPLETE, &complete),
            stats(DIRECT, &direct),
            stats(BODY_ONLY, &body),
        ],
        environment: environment(),
    })
}

async fn mediated(
    provider: &node::RunningNode,
    consumer: &node::RunningNode,
    options: &BenchOptions,
    image: &str,
) -> anyhow::Result<[Vec<f64>; 4]> {
    let provider_api = NodeClient::new(provider.url());
    let consumer_api = NodeClient::new(consumer.url());
    let asset = provider_api.create_service_asset(CLASSIFIER_SERVICE_ID, None).await?;
    let offer = provider_api.create_offer(&asset, None, None).await?;
    let contract = consumer_api.negotiate(provider.url(), &offer).await?;
    let mut sink = CallbackSink::start().await?;
    let mut spans: [Vec<f64>; 4] = Default::default();
    for i in 0..options.warmup + options.runs {
        let started = Instant::now();
        let id = consumer_api.invoke(&contract, vec![json!(image)], Some(&sink.url)).await?;
        sink.wait_for(id, Duration::from_secs(60)).await?;
        let reply = consumer_api.result(id).await?;
        let retrieved = Instant::now();
        let result = reply.ok_json()?;
        if result.get("success") != Some(&json!(true)) {
            bail!("run {i}: service failed: {result}");
        }
        let marks = consumer.consumer().phase_marks(id).ok_or_else(|| anyhow!("no phase marks for {id}"))?;
        consumer.consumer().forget_phase_marks(id);
        let finished = marks.finished.ok_or_else(|| anyhow!("run {i}: FINISHED not marked"))?;
        let requested = marks.result_requested.ok_or_else(|| anyhow!("run {i}: result request not marked"))?;
        if i < options.warmup {
            continue;
        }
        spans[0].push(ms(finished - marks.invoked));
        spans[1].push(ms(requested - finished));
        spans[2].push(ms(retrieved - requested));
        spans[3].push(ms(retrieved - started));
    }
    Ok(spans)
}
