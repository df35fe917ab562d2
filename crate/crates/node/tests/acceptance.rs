//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any failed.

mod common;

use std::future::Future;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use anyhow::{ensure, Context};
use serde_json::{json, Value};
use servicespace_core::model::{InvocationState as S, Role, SignalKind};
use servicespace_core::sdk::{DELAY_SERVICE_ID, ECHO_SERVICE_ID};
use servicespace_core::sim::{enumerate_orderings, run_restart_scenario, Workload};
use servicespace_core::{ContractId, Service, ServiceError, ServiceMetadata, ServiceRegistration, ServiceResult};
use servicespace_node::bench::{self, BenchOptions, BODY_ONLY, COMPLETE, DIRECT};
use servicespace_node::client::NodeClient;
use servicespace_node::demo::CallbackSink;

use common::{free_port, wait_state, NodeProcess, Pair, SignalFilter};

const CONSUMER_HAPPY: [S; 6] = [S::Initializing, S::Initialized, S::Starting, S::Running, S::Finished, S::Closed];
const PROVIDER_HAPPY: [S; 3] = [S::Initialized, S::Running, S::Closed];

async fn happy_path() -> anyhow::Result<String> {
    let started = Instant::now();
    let pair = Pair::start(&[ECHO_SERVICE_ID], Vec::new()).await?;
    let contract = pair.contract_for(ECHO_SERVICE_ID).await?;
    let api = pair.consumer_api();
    let id = api.invoke(&contract, vec![json!("hello")], None).await?;
    pair.wait_for(id, |s| s == S::Finished).await?;
    let result = api.result(id).await?.ok_json()?;
    ensure!(result["data"] == "hello", "unexpected result {result}");
    let consumer_path = pair.consumer.log.path(id, Role::Consumer);
    let provider_path = pair.provider.log.path(id, Role::Provider);
    let discarded = pair.consumer.log.discarded().len() + pair.provider.log.discarded().len();
    let elapsed = started.elapsed();
    pair.shutdown().await;
    ensure!(consumer_path == CONSUMER_HAPPY, "consumer path {consumer_path:?}");
    ensure!(provider_path == PROVIDER_HAPPY, "provider path {provider_path:?}");
    ensure!(discarded == 0, "{discarded} discarded entries");
    ensure!(elapsed < Duration::from_secs(5), "took {elapsed:?}");
    Ok(format!("both paths exact, 0 discarded, {} ms", elapsed.as_millis()))
}

async fn invalid_contract() -> anyhow::Result<String> {
    let pair = Pair::start(&[ECHO_SERVICE_ID], Vec::new()).await?;
    // A contract the consumer believes in but the provider never issued.
    let bogus = ContractId::new("nosuchcontract").map_err(anyhow::Error::msg)?;
    pair.consumer.consumer().contracts().add(bogus.clone(), servicespace_core::Endpoint::new(pair.provider.url()));
    let id = pair.consumer_api().invoke(&bogus, vec![json!("x")], None).await?;
    pair.wait_for(id, |s| s == S::Invalid).await?;
    // give any stray signal time to arrive
    tokio::time::sleep(Duration::from_millis(300)).await;
    let message = pair.consumer.consumer().status(id).and_then(|s| s.error_message).unwrap_or_default();
    let provider_state = pair.provider.provider().context("provider runtime")?.store().get(id, Role::Provider).map(|r| r.state);
    let to_provider = pair.provider.counts().get("signals");
    let to_consumer = pair.consumer.counts().get("signals");
    let consumer_causes: Vec<_> = pair.consumer.log.entries().into_iter().filter_map(|e| e.cause.signal).collect();
    pair.shutdown().await;
    ensure!(provider_state == Some(S::Invalid), "provider {provider_state:?}");
    ensure!(!message.trim().is_empty(), "empty consumer error message");
    ensure!(to_provider == 1 && to_consumer == 1, "signals: {to_provider} to provider, {to_consumer} to consumer");
    ensure!(consumer_causes == [SignalKind::ServiceInvalidSignal], "consumer handled {consumer_causes:?}");
    Ok(format!("INVALID on both sides, 2 signals total, message {message:?}"))
}

struct FailsToLoad;

impl Service for FailsToLoad {
    fn load_args(&mut self, _args: Vec<String>) -> Result<(), ServiceError> {
        Err(ServiceError::new("argument 1 is not a valid image"))
    }

    fn execute(&mut self) -> Result<ServiceResult, ServiceError> {
        unreachable!("load_args always fails")
    }
}

struct FailsToRun;

impl Service for FailsToRun {
    fn load_args(&mut self, _args: Vec<String>) -> Result<(), ServiceError> {
        Ok(())
    }

    fn execute(&mut self) -> Result<ServiceResult, ServiceError> {
        Err(ServiceError::new("model weights missing: /models/mnist.onnx"))
    }
}

async fn failure_propagation() -> anyhow::Result<String> {
    let extra = vec![
        ServiceRegistration::new(ServiceMetadata::new("fail.load", "FailsToLoad", &["text/plain"], "text/plain"), || FailsToLoad),
        ServiceRegistration::new(ServiceMetadata::new("fail.run", "FailsToRun", &["text/plain"], "text/plain"), || FailsToRun),
    ];
    let pair = Pair::start(&[], extra).await?;
    let mut checked = Vec::new();
    for (service, expected) in
        [("fail.load", "argument 1 is not a valid image"), ("fail.run", "model weights missing: /models/mnist.onnx")]
    {
        let contract = pair.contract_for(service).await?;
        let id = pair.consumer_api().invoke(&contract, vec![json!("x")], None).await?;
        let state = pair.wait_for(id, |s| s.is_settled()).await?;
        let message = pair.consumer.consumer().status(id).and_then(|s| s.error_message);
        ensure!(state == S::Failed, "{service}: state {state}");
        ensure!(message.as_deref() == Some(expected), "{service}: message {message:?}");
        checked.push(service);
    }
    pair.shutdown().await;
    Ok(format!("{} messages reached the consumer verbatim", checked.len()))
}

async fn backward_discard() -> anyhow::Result<String> {
    let started = Instant::now();
    let verdict = tokio::task::spawn_blocking(|| enumerate_orderings(&Workload::echo())).await?;
    let elapsed = started.elapsed();
    ensure!(verdict.orderings.len() == 6, "{} plain orderings", verdict.orderings.len());
    ensure!(!verdict.duplicated.is_empty(), "no duplicated variants");
    ensure!(verdict.regressions.is_empty(), "regressions: {:?}", verdict.regressions);
    ensure!(verdict.in_order_final == S::Finished, "in-order final {}", verdict.in_order_final);
    ensure!(elapsed < Duration::from_secs(10), "took {elapsed:?}");
    Ok(format!(
        "{} schedules, 0 regressions, in-order FINISHED, {} ms ({} orders strand the consumer short of FINISHED)",
        verdict.schedules(),
        elapsed.as_millis(),
        verdict.stuck.len()
    ))
}

async fn exactly_once() -> anyhow::Result<String> {
    let pair = Pair::start(&[ECHO_SERVICE_ID], Vec::new()).await?;
    let contract = pair.contract_for(ECHO_SERVICE_ID).await?;
    let id = pair.consumer_api().invoke(&contract, vec![json!("once")], None).await?;
    pair.wait_for(id, |s| s == S::Finished).await?;
    let readers: Vec<_> = (0..8)
        .map(|_| {
            let api = pair.consumer_api();
            tokio::spawn(async move { api.result(id).await })
        })
        .collect();
    let mut ok = 0;
    let mut conflicts = 0;
    for reader in readers {
        match reader.await??.status.as_u16() {
            200 => ok += 1,
            409 => conflicts += 1,
            other => anyhow::bail!("unexpected status {other}"),
        }
    }
    let state = pair.consumer.consumer().status(id).map(|s| s.state);
    let cached = pair.consumer.consumer().cached_results();
    pair.shutdown().await;
    ensure!(ok == 1 && conflicts == 7, "{ok} successes, {conflicts} conflicts");
    ensure!(state == Some(S::Closed), "state {state:?}");
    ensure!(cached == 0, "{cached} cached results left");
    Ok("1 success, 7 conflicts, CLOSED, cache empty".into())
}

/// Drives one invocation on a provider process to `phase`, kills the
/// process, restarts it over the same data directory and reports the
/// recovery count and the consumer's final state.
async fn restart_process_at(phase: S) -> anyhow::Result<(u64, S)> {
    let dir = tempfile::tempdir()?;
    let port = free_port();
    let config = dir.path().join("provider.toml");
    std::fs::write(&config, NodeProcess::config_text("provider-a", port, &dir.path().join("data"), &[DELAY_SERVICE_ID]))?;
    let mut provider = NodeProcess::spawn(&config, port).await?;
    let mut consumer_config = servicespace_node::NodeConfig::new("consumer-b", common::loopback());
    consumer_config.provider = false;
    let consumer = servicespace_node::start(consumer_config, Vec::new()).await?;
    let consumer_api = NodeClient::new(consumer.url());
    let contract =
        common::contract_for(&NodeClient::new(provider.url.clone()), &consumer_api, &provider.url, DELAY_SERVICE_ID).await?;
    // Holding the execution signal back keeps the provider in INITIALIZED.
    let _filter = if phase == S::Initialized {
        let filter = SignalFilter::start(provider.url.clone(), SignalKind::ServiceExecutionSignal).await?;
        consumer.consumer().contracts().add(contract.clone(), servicespace_core::Endpoint::new(filter.url.clone()));
        Some(filter)
    } else {
        None
    };
    let delay_ms = if phase == S::Closed { 0 } else { 60_000 };
    let id = consumer_api.invoke(&contract, vec![json!(delay_ms), json!("payload")], None).await?;
    let reached = match phase {
        S::Initialized => S::Starting,
        S::Running => S::Running,
        _ => S::Finished,
    };
    wait_state(&consumer, id, |s| s == reached, Duration::from_secs(10)).await?;
    provider.kill();
    let restarted = NodeProcess::spawn(&config, port).await?;
    let recovered = restarted.recovered().await?;
    let settled = if recovered > 0 { |s: S| s == S::Invalid } else { |s: S| s.is_settled() };
    let state = wait_state(&consumer, id, settled, Duration::from_secs(10)).await?;
    consumer.shutdown().await;
    drop(restarted);
    Ok((recovered, state))
}

async fn restart_matrix() -> anyhow::Result<String> {
    for phase in [S::Initialized, S::Running, S::Closed] {
        let sim = tokio::task::spawn_blocking(move || run_restart_scenario(phase)).await?;
        let expected = if phase == S::Closed { 0 } else { 1 };
        ensure!(sim.restarted, "simulation never reached {phase}");
        ensure!(sim.recovered == expected, "simulation at {phase}: recovered {}", sim.recovered);
        let id = sim.report.invocations[0];
        let consumer = sim.report.consumer_state(id);
        if expected == 1 {
            ensure!(consumer == Some(S::Invalid), "simulation at {phase}: consumer {consumer:?}");
        }
        let (recovered, state) = restart_process_at(phase).await?;
        ensure!(recovered == expected as u64, "process killed at {phase}: recovered {recovered}");
        if expected == 1 {
            ensure!(state == S::Invalid, "process killed at {phase}: consumer {state}");
        } else {
            ensure!(state == S::Finished, "process killed at {phase}: consumer {state}");
        }
    }
    Ok("INITIALIZED 1, RUNNING 1, CLOSED 0; consumer INVALID after each recovery (simulated and killed process)".into())
}

async fn polling_free() -> anyhow::Result<String> {
    let pair = Pair::start(&[ECHO_SERVICE_ID], Vec::new()).await?;
    let contract = pair.contract_for(ECHO_SERVICE_ID).await?;
    let mut sink = CallbackSink::start().await?;
    let api = pair.consumer_api();
    let id = api.invoke(&contract, vec![json!("ping")], Some(&sink.url)).await?;
    sink.wait_for(id, Duration::from_secs(10)).await?;
    let result = api.result(id).await?.ok_json()?;
    // a second callback would arrive within this window
    tokio::time::sleep(Duration::from_millis(300)).await;
    let status_requests = pair.consumer.counts().get("status");
    let callbacks = sink.received();
    pair.shutdown().await;
    ensure!(result["data"] == "ping", "result {result}");
    ensure!(status_requests == 0, "{status_requests} status requests");
    ensure!(callbacks == 1, "{callbacks} callbacks");
    Ok("0 status requests, 1 callback".into())
}

async fn bench_structure() -> anyhow::Result<String> {
    let mut overheads = Vec::new();
    for delay in [0u64, 100, 1000] {
        let options = BenchOptions { runs: 10, warmup: 3, delay: Duration::from_millis(delay), direct_only: false };
        let report = bench::run(options).await?;
        ensure!(report.rows.len() == 6, "{} rows at {delay} ms", report.rows.len());
        ensure!(report.row(BODY_ONLY).is_some(), "no body-only row");
        let mediated = report.mean(COMPLETE).context("complete row")?;
        let direct = report.mean(DIRECT).context("direct row")?;
        ensure!(mediated > direct, "at {delay} ms mediated {mediated:.3} <= direct {direct:.3}");
        let gap = report.decomposition_gap_ms().context("sub-span rows")?;
        ensure!(gap.abs() <= 5.0, "at {delay} ms sub-spans miss the complete span by {gap:.3} ms");
        overheads.push(mediated - direct);
    }
    let max = overheads.iter().cloned().fold(f64::MIN, f64::max);
    let min = overheads.iter().cloned().fold(f64::MAX, f64::min);
    let mean = overheads.iter().sum::<f64>() / overheads.len() as f64;
    let variation = (max - min) / mean;
    ensure!(variation < 0.5, "overheads {overheads:.3?} ms vary by {:.0}%", variation * 100.0);
    Ok(format!("6 rows, overhead {overheads:.2?} ms at 0/100/1000 ms, variation {:.0}%", variation * 100.0))
}

async fn privacy() -> anyhow::Result<String> {
    // distinctive enough that any occurrence is a leak
    const SECRET_SERVICE: &str = "internal.scoring-v7-private";
    let mut secret = servicespace_core::sdk::Echo::registration();
    secret.metadata.service_id = SECRET_SERVICE.to_string();
    let pair = Pair::start(&[ECHO_SERVICE_ID], vec![secret]).await?;
    let provider = pair.provider_api();
    let consumer = pair.consumer_api();
    let asset = provider
        .create_asset(&json!({
            "serviceId": SECRET_SERVICE,
            "publicProperties": { "http://purl.org/dc/terms/title": "Scoring" },
        }))
        .await?;
    let mut bodies: Vec<(&str, String)> = Vec::new();
    let offer_reply = provider.create_offer_reply(&asset, None, None).await?;
    let offer: Value = offer_reply.ok_json()?;
    let offer_id = offer["offerId"].as_str().context("offer id")?.to_string();
    bodies.push(("offer", offer_reply.body.clone()));
    bodies.push(("catalog", provider.get("/management/catalog", &[("counterparty", "consumer-b")]).await?.body));
    bodies.push((
        "remote catalog",
        consumer.get("/management/remote-catalog", &[("provider", pair.provider.url())]).await?.body,
    ));
    let negotiation = consumer
        .post("/management/negotiations", &[], &json!({ "provider": pair.provider.url(), "offerId": offer_id }))
        .await?;
    let contract: ContractId = serde_json::from_value(negotiation.ok_json()?["contractId"].clone())?;
    bodies.push(("negotiation", negotiation.body.clone()));
    bodies.push(("contracts", consumer.get("/management/contracts", &[]).await?.body));
    // an invocation with bad arguments produces consumer-facing error text
    let id = consumer.invoke(&contract, vec![json!("a"), json!("b")], None).await?;
    pair.wait_for(id, |s| s.is_settled()).await?;
    bodies.push(("status", consumer.get("/serviceinvocation/status", &[("invocationId", &id.to_string())]).await?.body));
    bodies.push(("result", consumer.result(id).await?.body));
    pair.shutdown().await;
    let leaks: Vec<&str> = bodies
        .iter()
        .filter(|(_, body)| body.contains(SECRET_SERVICE))
        .map(|(name, _)| *name)
        .collect();
    ensure!(leaks.is_empty(), "serviceId leaked in {leaks:?}");
    Ok(format!("serviceId absent from {} consumer-facing responses", bodies.len()))
}

fn report(name: &str, outcome: anyhow::Result<String>) -> bool {
    match outcome {
        Ok(detail) => {
            println!("PASS {name}: {detail}");
            true
        }
        Err(err) => {
            println!("FAIL {name}: {err:#}");
            false
        }
    }
}

async fn within<F: Future<Output = anyhow::Result<String>>>(limit: Duration, f: F) -> anyhow::Result<String> {
    tokio::time::timeout(limit, f).await.unwrap_or_else(|_| Err(anyhow::anyhow!("timed out after {limit:?}")))
}

fn main() -> ExitCode {
    let runtime = tokio::runtime::Runtime::new().expect("tokio runtime");
    let minute = Duration::from_secs(60);
    let results = runtime.block_on(async {
        vec![
            report("happy-path conformance", within(minute, happy_path()).await),
            report("invalid-contract path", within(minute, invalid_contract()).await),
            report("failure propagation", within(minute, failure_propagation()).await),
            report("backward-discard brute force", within(minute, backward_discard()).await),
            report("exactly-once result", within(minute, exactly_once()).await),
            report("restart recovery matrix", within(2 * minute, restart_matrix()).await),
            report("polling-free flow", within(minute, polling_free()).await),
            report("bench structure", within(3 * minute, bench_structure()).await),
            report("privacy of private properties", within(minute, privacy()).await),
        ]
    });
    let failed = results.iter().filter(|ok| !**ok).count();
    println!("{} of {} criteria passed", results.len() - failed, results.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
