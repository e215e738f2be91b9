// SPDX-License-Identifier: Apache-2.0

use std::path::PathBuf;
use std::process::ExitCode;

use barbie_client::bench::{write_latency_csv, Workload};
use barbie_cluster::bench::{bench_cluster, LoadShape};
use barbie_cluster::{launch_cluster, ClusterSpec, Routing};
use barbie_core::enclave::PlatformState;
use barbie_core::kms::KekMode;
use barbie_server::deploy::Deployment;
use barbie_server::InstanceConfig;
use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::rngs::OsRng;
use serde_json::json;

/// Runs several BarbiE instances over one store behind a sticky load balancer.
#[derive(Parser)]
#[command(name = "cluster", version)]
struct Cli {
    #[command(subcommand)]
    verb: Verb,
}

#[derive(Clone, Copy, ValueEnum)]
enum KekModeArg {
    SealDerived,
    AdminProvisioned,
}

#[derive(Args)]
struct ClusterArgs {
    /// Number of instances.
    #[arg(long, default_value_t = 4)]
    n: usize,
    /// Deployment directory (platform, manifest, authority key, store/).
    #[arg(long)]
    store: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "seal-derived")]
    kek_mode: KekModeArg,
    /// KEK for admin-provisioned mode (64 hex characters).
    #[arg(long)]
    kek: Option<String>,
    /// round-robin, random or least-outstanding.
    #[arg(long, default_value = "round-robin")]
    routing: Routing,
    /// Ignore the barbie_node cookie.
    #[arg(long)]
    no_sticky: bool,
    /// Worker threads per instance.
    #[arg(long, default_value_t = 1)]
    workers: usize,
    /// Skip fsync in the store (faster, not crash safe).
    #[arg(long)]
    no_fsync: bool,
    /// Write a request log per instance into the deployment directory.
    #[arg(long)]
    request_log: bool,
}

#[derive(Subcommand)]
enum Verb {
    /// Launch the cluster and keep it running until Ctrl-C.
    Up(ClusterArgs),
    /// Launch a cluster, run one benchmark through the balancer, tear down.
    Bench {
        #[command(flatten)]
        cluster: ClusterArgs,
        #[arg(long, default_value_t = 5)]
        users: usize,
        #[arg(long, default_value_t = 2)]
        concurrency: usize,
        /// Requests per user.
        #[arg(long, default_value_t = 100)]
        requests: usize,
        #[arg(long, default_value = "v2-ra-store")]
        workload: Workload,
        #[arg(long, default_value_t = 256)]
        payload_bytes: usize,
        /// Report JSON; the latency CSV goes next to it.
        #[arg(long, default_value = "report.json")]
        out: PathBuf,
    },
    /// Write a fresh platform file, optionally in the attestation domain of another.
    Platform {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        same_authority_as: Option<PathBuf>,
    },
    /// Run one instance (used by the launcher).
    #[command(hide = true)]
    Node {
        #[arg(long)]
        config: PathBuf,
    },
}

fn spec(args: &ClusterArgs) -> Result<ClusterSpec, String> {
    let mut s = ClusterSpec::new(args.n, std::env::current_exe().map_err(|e| e.to_string())?);
    s.kek_mode = match args.kek_mode {
        KekModeArg::SealDerived => KekMode::SealDerived,
        KekModeArg::AdminProvisioned => KekMode::AdminProvisioned,
    };
    s.kek_hex = args.kek.clone();
    s.routing = args.routing;
    s.honor_sticky = !args.no_sticky;
    s.worker_threads = args.workers;
    s.fsync = !args.no_fsync;
    s.request_log = args.request_log;
    if s.n == 0 {
        return Err("--n must be at least 1".into());
    }
    Ok(s)
}

fn runtime() -> tokio::runtime::Runtime {
    tokio::runtime::Builder::new_multi_thread().enable_all().build().expect("tokio runtime")
}

fn run(cli: Cli) -> Result<(), String> {
    match cli.verb {
        Verb::Node { config } => {
            let cfg = InstanceConfig::load(&config).map_err(|e| e.to_string())?;
            barbie_server::run_blocking(cfg).map_err(|e| e.to_string())
        }
        Verb::Platform { out, same_authority_as } => {
            let p = match same_authority_as {
                Some(other) => {
                    let other = PlatformState::load(&other).map_err(|e| e.to_string())?;
                    PlatformState::generate_with_authority(&mut OsRng, &other)
                }
                None => PlatformState::generate(&mut OsRng),
            };
            p.save(&out).map_err(|e| e.to_string())?;
            println!("{}", json!({ "platform": out, "authority_public_key": p.authority_key().to_base64() }));
            Ok(())
        }
        Verb::Up(args) => {
            let spec = spec(&args)?;
            let root = args.store.ok_or("up needs --store <dir>")?;
            let deployment = Deployment::create(&root).map_err(|e| e.to_string())?;
            runtime().block_on(async move {
                let cluster = launch_cluster(deployment, &spec).await.map_err(|e| e.to_string())?;
                let d = &cluster.deployment;
                println!(
                    "{}",
                    serde_json::to_string_pretty(&json!({
                        "lb_url": cluster.lb_url(),
                        "instances": cluster.instances.iter().map(|i| json!({ "id": i.id, "url": i.url() })).collect::<Vec<_>>(),
                        "authority_file": d.authority_file,
                        "mr_enclave": d.server_enclave().identity().mr_enclave,
                        "tokens": d.tokens,
                    }))
                    .expect("serializes")
                );
                let _ = tokio::signal::ctrl_c().await;
                cluster.shutdown().await;
                Ok(())
            })
        }
        Verb::Bench { cluster, users, concurrency, requests, workload, payload_bytes, out } => {
            let spec = spec(&cluster)?;
            let tmp;
            let root = match &cluster.store {
                Some(r) => r.clone(),
                None => {
                    tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
                    tmp.path().to_owned()
                }
            };
            let deployment = Deployment::create(&root).map_err(|e| e.to_string())?;
            let shape = LoadShape { users, concurrency, requests_per_user: requests, workload, payload_len: payload_bytes };
            let (report, samples) =
                runtime().block_on(bench_cluster(deployment, &spec, &shape)).map_err(|e| e.to_string())?;
            let text = serde_json::to_string_pretty(&report).expect("serializes");
            std::fs::write(&out, &text).map_err(|e| format!("{}: {e}", out.display()))?;
            write_latency_csv(&out.with_extension("csv"), &samples).map_err(|e| e.to_string())?;
            println!("{text}");
            if report.degraded {
                eprintln!("cluster: {} of {} requests failed", report.failed_requests, report.complete_requests);
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("cluster: {e}");
            ExitCode::from(1)
        }
    }
}
