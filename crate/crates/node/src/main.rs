use std::net::SocketAddr;
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Duration;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};
use servicespace_core::model::InvocationState;
use servicespace_core::sim::{self, Schedule, ScriptedCall, Workload};
use servicespace_core::sdk::Echo;
use servicespace_core::{ContractId, InvocationId};
use servicespace_node::bench::{self, BenchOptions};
use servicespace_node::client::NodeClient;
use servicespace_node::demo::{self, DemoOptions};
use servicespace_node::{classifier, NodeConfig};
use tracing_subscriber::EnvFilter;

#[derive(Parser)]
#[command(name = "servicespace", version, about = "Service invocation over dataspace connectors")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a connector node.
    Serve {
        #[arg(long, short, env = "SERVICESPACE_CONFIG")]
        config: PathBuf,
    },
    /// Provider and consumer on loopback calling the stub classifier.
    Demo {
        /// Use this classifier endpoint instead of the local stub.
        #[arg(long)]
        classifier_url: Option<String>,
        /// Poll status instead of waiting for the callback.
        #[arg(long)]
        poll: bool,
    },
    /// Mediated versus direct invocation latency.
    Bench {
        #[arg(long, default_value_t = 10)]
        runs: usize,
        #[arg(long, default_value_t = 3)]
        warmup: usize,
        /// Service body delay; repeat to measure several.
        #[arg(long = "delay-ms", default_values_t = [0u64])]
        delay_ms: Vec<u64>,
        #[arg(long)]
        direct_only: bool,
        /// Print JSON lines instead of a table.
        #[arg(long)]
        json: bool,
    },
    /// Stand-alone stub classifier.
    Classifier {
        #[arg(long, default_value = "127.0.0.1:8090")]
        listen: SocketAddr,
        #[arg(long, default_value_t = 0)]
        delay_ms: u64,
    },
    /// Create an asset on a provider node.
    Asset(AssetArgs),
    /// Publish an offer for an asset.
    Offer {
        #[command(flatten)]
        node: NodeArg,
        #[arg(long)]
        asset: String,
    },
    /// Catalog of a node, or of a remote provider seen through it.
    Catalog {
        #[command(flatten)]
        node: NodeArg,
        #[arg(long, conflicts_with = "provider")]
        counterparty: Option<String>,
        /// Provider URL or configured peer name.
        #[arg(long)]
        provider: Option<String>,
    },
    /// Negotiate a contract from a consumer node.
    Negotiate {
        #[command(flatten)]
        node: NodeArg,
        #[arg(long)]
        provider: String,
        #[arg(long)]
        offer: String,
    },
    /// Start an invocation through a consumer node.
    Invoke {
        #[command(flatten)]
        node: NodeArg,
        #[arg(long)]
        contract: ContractId,
        #[arg(long = "arg")]
        args: Vec<String>,
        #[arg(long)]
        callback: Option<String>,
    },
    Status {
        #[command(flatten)]
        node: NodeArg,
        id: InvocationId,
    },
    Result {
        #[command(flatten)]
        node: NodeArg,
        id: InvocationId,
    },
    /// Deterministic simulation of echo invocations; prints JSON lines.
    Simulate(SimulateArgs),
}

#[derive(Args)]
struct NodeArg {
    /// Management URL of the node.
    #[arg(long, default_value = "http://127.0.0.1:8181", env = "SERVICESPACE_NODE")]
    node: String,
}

#[derive(Args)]
struct AssetArgs {
    #[command(flatten)]
    node: NodeArg,
    #[arg(long)]
    service_id: String,
    #[arg(long)]
    asset_id: Option<String>,
}

#[derive(Args)]
struct SimulateArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1)]
    invocations: u64,
    #[arg(long, default_value_t = 0)]
    max_delay: u64,
    #[arg(long, default_value_t = 0.0)]
    drop_rate: f64,
    #[arg(long, default_value_t = 0.0)]
    duplicate_rate: f64,
    /// Replay every delivery order of the consumer-bound signals instead.
    #[arg(long, conflicts_with = "restart")]
    orderings: bool,
    /// Restart the provider once it reaches this state.
    #[arg(long)]
    restart: Option<InvocationState>,
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new("info")))
        .with_writer(std::io::stderr)
        .init();
    let cli = Cli::parse();
    if let Command::Simulate(args) = cli.command {
        return finish(simulate(args));
    }
    let runtime = match tokio::runtime::Runtime::new() {
        Ok(runtime) => runtime,
        Err(err) => return finish(Err(err.into())),
    };
    finish(runtime.block_on(run(cli.command)))
}

fn finish(outcome: anyhow::Result<()>) -> ExitCode {
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::FAILURE
        }
    }
}

fn print(value: &Value) {
    println!("{}", serde_json::to_string_pretty(value).expect("json prints"));
}

async fn run(command: Command) -> anyhow::Result<()> {
    match command {
        Command::Serve { config } => {
            let config = NodeConfig::load(&config)?;
            let node = servicespace_node::start(config, Vec::new()).await?;
            eprintln!("{} listening on {}", node.name(), node.url());
            node.run_until_ctrl_c().await
        }
        Command::Demo { classifier_url, poll } => {
            let report = demo::run(DemoOptions { classifier_url, poll }).await?;
            print(&json!({
                "invocationId": report.invocation_id,
                "result": report.result,
                "label": report.label,
                "statusRequests": report.status_requests,
                "callbacks": report.callbacks,
                "classifierCallers": report.classifier_callers,
                "elapsedMs": report.elapsed.as_secs_f64() * 1000.0,
            }));
            Ok(())
        }
        Command::Bench { runs, warmup, delay_ms, direct_only, json } => {
            let mut overheads = Vec::new();
            for delay in &delay_ms {
                let options = BenchOptions { runs, warmup, delay: Duration::from_millis(*delay), direct_only };
                let report = bench::run(options).await?;
                if json {
                    print!("{}", report.json_lines());
                } else {
                    println!("{}", report.table());
                }
                overheads.extend(report.overhead_ms());
            }
            if !json && overheads.len() > 1 {
                let formatted: Vec<String> = overheads.iter().map(|o| format!("{o:.3}")).collect();
                println!("overhead ms per delay: {}", formatted.join(", "));
            }
            Ok(())
        }
        Command::Classifier { listen, delay_ms } => {
            let server = classifier::serve(listen, Duration::from_millis(delay_ms)).await?;
            eprintln!("classifier listening on {}", server.url());
            tokio::signal::ctrl_c().await?;
            server.shutdown().await;
            Ok(())
        }
        Command::Asset(args) => {
            let client = NodeClient::new(args.node.node);
            let asset = client.create_service_asset(&args.service_id, args.asset_id.as_deref()).await?;
            print(&json!({ "assetId": asset }));
            Ok(())
        }
        Command::Offer { node, asset } => {
            let offer = NodeClient::new(node.node).create_offer(&asset, None, None).await?;
            print(&json!({ "offerId": offer, "assetId": asset }));
            Ok(())
        }
        Command::Catalog { node, counterparty, provider } => {
            let client = NodeClient::new(node.node);
            let entries = match (provider, counterparty) {
                (Some(provider), _) => client.remote_catalog(&provider).await?,
                (None, Some(counterparty)) => client.catalog(&counterparty).await?,
                (None, None) => bail!("pass --counterparty or --provider"),
            };
            print(&serde_json::to_value(entries)?);
            Ok(())
        }
        Command::Negotiate { node, provider, offer } => {
            let contract = NodeClient::new(node.node).negotiate(&provider, &offer).await?;
            print(&json!({ "contractId": contract }));
            Ok(())
        }
        Command::Invoke { node, contract, args, callback } => {
            let args = args.into_iter().map(Value::String).collect();
            let id = NodeClient::new(node.node).invoke(&contract, args, callback.as_deref()).await?;
            print(&json!({ "invocationId": id }));
            Ok(())
        }
        Command::Status { node, id } => {
            let status = NodeClient::new(node.node).status(id).await?;
            print(&serde_json::to_value(status)?);
            Ok(())
        }
        Command::Result { node, id } => {
            let reply = NodeClient::new(node.node).result(id).await?;
            print(&reply.ok_json().context("result not available")?);
            Ok(())
        }
        Command::Simulate(_) => unreachable!("handled before the runtime starts"),
    }
}

fn simulate(args: SimulateArgs) -> anyhow::Result<()> {
    if let Some(phase) = args.restart {
        let outcome = sim::run_restart_scenario(phase);
        if !outcome.restarted {
            bail!("provider never reached {phase}");
        }
        print!("{}", outcome.report.to_json_lines());
        println!("{}", json!({ "restartedAt": phase, "recovered": outcome.recovered }));
        return Ok(());
    }
    if args.orderings {
        let verdict = sim::enumerate_orderings(&Workload::echo());
        for (duplicated, runs) in [(false, &verdict.orderings), (true, &verdict.duplicated)] {
            for run in runs {
                let stuck = verdict.stuck.contains(run);
                let regression = verdict.regressions.contains(run);
                println!(
                    "{}",
                    json!({
                        "duplicated": duplicated,
                        "deliveries": run.deliveries,
                        "path": run.path,
                        "final": run.final_state,
                        "stuck": stuck,
                        "regression": regression,
                    })
                );
            }
        }
        println!(
            "{}",
            json!({
                "schedules": verdict.schedules(),
                "regressions": verdict.regressions.len(),
                "stuck": verdict.stuck.len(),
                "duplicateMismatches": verdict.duplicate_mismatches.len(),
            })
        );
        return Ok(());
    }
    if !(0.0..=1.0).contains(&args.drop_rate) || !(0.0..=1.0).contains(&args.duplicate_rate) {
        bail!("rates must lie in [0, 1]");
    }
    let calls = (0..args.invocations).map(|i| ScriptedCall::new("builtin.echo", &["hello"]).at(i)).collect();
    let workload = Workload { seed: args.seed, ..Workload::new(vec![Echo::registration()], calls) };
    let schedule = Schedule::generated(args.seed, args.max_delay, args.drop_rate, args.duplicate_rate);
    let report = sim::run_scenario(schedule, workload);
    print!("{}", report.to_json_lines());
    let stuck: Vec<Value> =
        report.stuck.iter().map(|(id, role, state)| json!({ "invocationId": id, "role": role, "state": state })).collect();
    println!("{}", json!({ "stuck": stuck, "violations": report.violations().len() }));
    Ok(())
}
