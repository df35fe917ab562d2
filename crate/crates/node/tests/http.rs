mod common;

use std::process::Command;
use std::time::Duration;

use serde_json::json;
use servicespace_core::model::InvocationState as S;
use servicespace_core::registry::{Policy, PolicyKind, PolicyRule};
use servicespace_core::sdk::{DELAY_SERVICE_ID, ECHO_SERVICE_ID};
use servicespace_core::ContractId;
use servicespace_node::client::NodeClient;
use servicespace_node::NodeConfig;

use common::{loopback, Pair};

#[tokio::test(flavor = "multi_thread")]
async fn unknown_ids_and_contracts_are_rejected() {
    let pair = Pair::start(&[ECHO_SERVICE_ID], Vec::new()).await.unwrap();
    let api = pair.consumer_api();
    let missing = ContractId::new("neverNegotiated").unwrap();
    let reply = api.post("/serviceinvocation/invoke", &[("contractId", "neverNegotiated")], &json!(["x"])).await.unwrap();
    assert_eq!(reply.status, 404);
    assert!(api.invoke(&missing, vec![json!("x")], None).await.is_err());

    let id = "00000000-0000-4000-8000-000000000000";
    let status = api.get("/serviceinvocation/status", &[("invocationId", id)]).await.unwrap();
    assert_eq!(status.status, 404);
    let result = api.get("/serviceinvocation/result", &[("invocationId", id)]).await.unwrap();
    assert_eq!(result.status, 404);
    let garbage = api.get("/serviceinvocation/status", &[("invocationId", "nope")]).await.unwrap();
    assert_eq!(garbage.status, 400);
    pair.shutdown().await;
}

#[tokio::test(flavor = "multi_thread")]
async fn result_before_finish_is_a_conflict() {
    let pair = Pair::start(&[DELAY_SERVICE_ID], Vec::new()).await.unwrap();
    let contract = pair.contract_for(DELAY_SERVICE_ID).await.unwrap();
    let api = pair.consumer_api();
    let id = api.invoke(&contract, vec![json!(400), json!("late")], None).await.unwrap();
    pair.wait_for(id, |s| s == S::Running).await.unwrap();
    assert_eq!(api.result(id).await.unwrap().status, 409);
    pair.wait_for(id, |s| s == S::Finished).await.unwrap();
    assert_eq!(api.result(id).await.unwrap().json().unwrap()["data"], "late");
    pair.shutdown().await;
}

#[tokio::test(flavor = "multi_thread")]
async fn malformed_signals_get_400() {
    let pair = Pair::start(&[ECHO_SERVICE_ID], Vec::new()).await.unwrap();
    let api = pair.provider_api();
    let reply = api.post("/signals", &[], &json!({ "kind": "ServiceTeleportSignal" })).await.unwrap();
    assert_eq!(reply.status, 400);
    let reply = api.post("/signals", &[], &json!("not an object")).await.unwrap();
    assert_eq!(reply.status, 400);
    pair.shutdown().await;
}

#[tokio::test(flavor = "multi_thread")]
async fn shared_secret_guards_signals_and_still_lets_peers_talk() {
    let mut provider = NodeConfig::new("provider-a", loopback());
    provider.services = vec![ECHO_SERVICE_ID.into()];
    provider.shared_secret = Some("s3cret".into());
    let mut consumer = NodeConfig::new("consumer-b", loopback());
    consumer.provider = false;
    consumer.shared_secret = Some("s3cret".into());
    let provider = servicespace_node::start(provider, Vec::new()).await.unwrap();
    let consumer = servicespace_node::start(consumer, Vec::new()).await.unwrap();

    let outsider = NodeClient::new(provider.url());
    let reply = outsider.post("/signals", &[], &json!({})).await.unwrap();
    assert_eq!(reply.status, 401);

    let contract = common::contract_for(&outsider, &NodeClient::new(consumer.url()), provider.url(), ECHO_SERVICE_ID)
        .await
        .unwrap();
    let id = NodeClient::new(consumer.url()).invoke(&contract, vec![json!("hi")], None).await.unwrap();
    common::wait_state(&consumer, id, |s| s == S::Finished, Duration::from_secs(10)).await.unwrap();
    consumer.shutdown().await;
    provider.shutdown().await;
}

#[tokio::test(flavor = "multi_thread")]
async fn access_policy_hides_offers_from_other_consumers() {
    let pair = Pair::start(&[ECHO_SERVICE_ID], Vec::new()).await.unwrap();
    let provider = pair.provider_api();
    let asset = provider.create_service_asset(ECHO_SERVICE_ID, Some("echoAsset")).await.unwrap();
    let only_b = Policy::with_rule(PolicyKind::Access, PolicyRule::AllowOnly(vec!["consumer-b".into()]));
    let offer = provider.create_offer(&asset, Some(&only_b), None).await.unwrap();
    assert_eq!(provider.catalog("consumer-b").await.unwrap().len(), 1);
    assert!(provider.catalog("consumer-c").await.unwrap().is_empty());
    // the consumer node sees it through its own name
    assert_eq!(pair.consumer_api().remote_catalog(pair.provider.url()).await.unwrap().len(), 1);
    let stranger = provider
        .post("/management/contracts/negotiate", &[], &json!({ "consumerId": "consumer-c", "offerId": offer }))
        .await
        .unwrap();
    assert!(!stranger.status.is_success());
    pair.shutdown().await;
}

#[tokio::test(flavor = "multi_thread")]
async fn consumer_restart_keeps_states_but_not_results() {
    let dir = tempfile::tempdir().unwrap();
    let mut provider = NodeConfig::new("provider-a", loopback());
    provider.services = vec![ECHO_SERVICE_ID.into()];
    let provider = servicespace_node::start(provider, Vec::new()).await.unwrap();
    let consumer_config = {
        let mut c = NodeConfig::new("consumer-b", loopback());
        c.provider = false;
        c.data_dir = Some(dir.path().to_path_buf());
        c
    };
    let consumer = servicespace_node::start(consumer_config.clone(), Vec::new()).await.unwrap();
    let api = NodeClient::new(consumer.url());
    let contract =
        common::contract_for(&NodeClient::new(provider.url()), &api, provider.url(), ECHO_SERVICE_ID).await.unwrap();
    let id = api.invoke(&contract, vec![json!("kept")], None).await.unwrap();
    common::wait_state(&consumer, id, |s| s == S::Finished, Duration::from_secs(10)).await.unwrap();
    consumer.shutdown().await;

    let consumer = servicespace_node::start(consumer_config, Vec::new()).await.unwrap();
    let api = NodeClient::new(consumer.url());
    assert_eq!(api.status(id).await.unwrap().state, S::Finished);
    assert_eq!(api.result(id).await.unwrap().status, 410);
    // the negotiated contract survived too
    assert!(api.invoke(&contract, vec![json!("again")], None).await.is_ok());
    consumer.shutdown().await;
    provider.shutdown().await;
}

#[test]
fn bad_config_fails_startup_with_the_field_name() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("node.toml");
    std::fs::write(&path, "name = \"p\"\nlisten = \"127.0.0.1:0\"\npool_size = 0\n").unwrap();
    let output = Command::new(env!("CARGO_BIN_EXE_servicespace")).args(["serve", "--config"]).arg(&path).output().unwrap();
    assert!(!output.status.success());
    let stderr = String::from_utf8_lossy(&output.stderr);
    assert!(stderr.contains("pool_size"), "{stderr}");

    std::fs::write(&path, "name = \"p\"\nlisten = \"127.0.0.1:0\"\nservices = [\"builtin.nope\"]\n").unwrap();
    let output = Command::new(env!("CARGO_BIN_EXE_servicespace")).args(["serve", "--config"]).arg(&path).output().unwrap();
    assert!(!output.status.success());
    assert!(String::from_utf8_lossy(&output.stderr).contains("services[0]"));
}

#[test]
fn simulate_command_is_deterministic() {
    let run = || {
        let output = Command::new(env!("CARGO_BIN_EXE_servicespace"))
            .args(["simulate", "--seed", "9", "--invocations", "5", "--max-delay", "4", "--drop-rate", "0.1", "--duplicate-rate", "0.3"])
            .env("RUST_LOG", "off")
            .output()
            .unwrap();
        assert!(output.status.success());
        String::from_utf8(output.stdout).unwrap()
    };
    let first = run();
    assert_eq!(first, run());
    let summary: serde_json::Value = serde_json::from_str(first.lines().last().unwrap()).unwrap();
    assert_eq!(summary["violations"], 0);
}

#[test]
fn bench_rejects_zero_runs() {
    let output = Command::new(env!("CARGO_BIN_EXE_servicespace")).args(["bench", "--runs", "0"]).output().unwrap();
    assert!(!output.status.success());
    assert!(String::from_utf8_lossy(&output.stderr).contains("runs must be a positive integer"));
}

#[test]
fn shipped_configs_parse() {
    let dir = concat!(env!("CARGO_MANIFEST_DIR"), "/../../config");
    for name in ["provider.toml", "consumer.toml"] {
        let text = std::fs::read_to_string(format!("{dir}/{name}")).unwrap();
        let config = NodeConfig::parse(&text).unwrap_or_else(|e| panic!("{name}: {e:#}"));
        config.validate().unwrap_or_else(|e| panic!("{name}: {e:#}"));
    }
}
