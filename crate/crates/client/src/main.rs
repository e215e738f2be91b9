// SPDX-License-Identifier: Apache-2.0

use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::Arc;

use barbie_client::bench::{self, BenchPlan, BenchUser, Workload};
use barbie_client::{Acl, Client, ClientError, ClientMode, ClientProfile, HyperTransport, Session};
use barbie_core::attestation::IdentityPredicate;
use barbie_core::enclave::{load_enclave, AuthorityKey, Digest, EnclaveHandle, PlatformState};
use barbie_core::kms::Policy;
use clap::{Parser, Subcommand};
use serde_json::{json, Value};

/// Client for the BarbiE key manager. Prints JSON on stdout.
///
/// Exit codes: 0 success, 2 protocol or attestation failure, 3 access denied,
/// 4 transport error.
#[derive(Parser)]
#[command(name = "barbie", version)]
struct Cli {
    /// legacy, aware, enabled or admin.
    #[arg(long, global = true, default_value = "aware")]
    mode: ClientMode,
    #[arg(long, global = true, default_value = "http://127.0.0.1:9311")]
    server: String,
    #[arg(long, global = true, default_value = "")]
    project: String,
    #[arg(long, global = true, default_value = "", env = "BARBIE_TOKEN")]
    token: String,
    /// Required server MRENCLAVE (hex).
    #[arg(long, global = true)]
    expect_mrenclave: Option<Digest>,
    /// Required server MRSIGNER (hex).
    #[arg(long, global = true)]
    expect_mrsigner: Option<Digest>,
    /// Trusted quoting authority key file; repeatable.
    #[arg(long, global = true)]
    authority: Vec<PathBuf>,
    /// Platform file of the local enclave (enabled mode).
    #[arg(long, global = true)]
    platform: Option<PathBuf>,
    /// Manifest of the local enclave (enabled mode).
    #[arg(long, global = true)]
    manifest: Option<PathBuf>,
    #[arg(long, global = true, default_value = "barbie-client-signer-v1")]
    signer_key: String,
    #[arg(long, global = true, default_value_t = 1)]
    isv_svn: u16,
    /// Do not send the sticky cookie on handshake requests.
    #[arg(long, global = true)]
    no_cookie: bool,
    #[command(subcommand)]
    verb: Verb,
}

#[derive(Subcommand)]
enum Verb {
    /// Run RA (aware, admin) or MA (enabled) and print the session.
    Attest,
    /// Attest as admin and provision a 256-bit KEK.
    ProvisionKek {
        /// 64 hex characters.
        #[arg(long)]
        kek: String,
        #[arg(long)]
        overwrite: bool,
    },
    /// Attest and set the project sharing policy.
    SetPolicy {
        /// 1 (MRENCLAVE), 2 (MRSIGNER) or 3 (listed children).
        #[arg(long)]
        policy: u8,
        /// Child MRENCLAVE (hex); repeatable.
        #[arg(long)]
        child: Vec<Digest>,
    },
    /// Store a secret; in v2 modes attest first.
    Store {
        #[arg(long, default_value = "")]
        name: String,
        /// Secret as a UTF-8 string.
        #[arg(long, conflicts_with = "file")]
        value: Option<String>,
        /// Secret read from a file.
        #[arg(long)]
        file: Option<PathBuf>,
        #[arg(long)]
        policy: Option<u8>,
        #[arg(long)]
        child: Vec<Digest>,
    },
    /// Retrieve a secret; in v2 modes attest first.
    Get {
        #[arg(long = "ref")]
        secret_ref: String,
        /// Write the secret here instead of printing it.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Drive load against one server or a load balancer.
    Bench {
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
        /// Extra tokens; user i uses token i modulo the token count.
        #[arg(long = "user-token")]
        user_tokens: Vec<String>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Latency CSV; defaults to the report path with a .csv extension.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
}

#[derive(Debug)]
struct CliError {
    code: u8,
    body: Value,
}

impl From<ClientError> for CliError {
    fn from(e: ClientError) -> Self {
        CliError {
            code: e.exit_code(),
            body: json!({
                "error": e.code(),
                "status": e.status(),
                "reason": e.reason().map(str::to_owned).unwrap_or_else(|| e.to_string()),
            }),
        }
    }
}

fn usage(msg: impl Into<String>) -> CliError {
    CliError { code: 2, body: json!({ "error": "invalid-argument", "reason": msg.into() }) }
}

fn local_enclave(cli: &Cli) -> Result<Option<EnclaveHandle>, CliError> {
    let (Some(platform), Some(manifest)) = (&cli.platform, &cli.manifest) else {
        return Ok(None);
    };
    let platform = PlatformState::load(platform).map_err(|e| usage(e.to_string()))?;
    let manifest = std::fs::read(manifest).map_err(|e| usage(format!("{}: {e}", manifest.display())))?;
    let enclave = load_enclave(&manifest, cli.signer_key.as_bytes(), cli.isv_svn, Arc::new(platform))
        .map_err(|e| usage(e.to_string()))?;
    Ok(Some(enclave))
}

fn profile(cli: &Cli, mode: ClientMode) -> Result<ClientProfile, CliError> {
    let mut p = ClientProfile::new(mode, &cli.server, &cli.token).project(&cli.project);
    if cli.expect_mrenclave.is_some() || cli.expect_mrsigner.is_some() {
        p = p.expect_server(IdentityPredicate {
            mr_enclave: cli.expect_mrenclave,
            mr_signer: cli.expect_mrsigner,
            min_isv_svn: None,
        });
    }
    for path in &cli.authority {
        p = p.authority(AuthorityKey::load(path).map_err(|e| usage(e.to_string()))?);
    }
    if mode != ClientMode::Legacy && p.authorities.is_empty() {
        return Err(usage("v2 modes need at least one --authority key file"));
    }
    if let Some(e) = local_enclave(cli)? {
        p = p.enclave(e);
    }
    if mode == ClientMode::Enabled && p.local_enclave.is_none() {
        return Err(usage("enabled mode needs --platform and --manifest"));
    }
    p.use_cookie = !cli.no_cookie;
    Ok(p)
}

fn policy(n: u8) -> Result<Policy, CliError> {
    serde_json::from_value(json!(n)).map_err(|_| usage(format!("policy must be 1, 2 or 3, got {n}")))
}

fn session_json(s: &Session) -> Value {
    json!({
        "session_id": s.session_id.to_base64(),
        "mode": s.mode,
        "node": s.node,
        "server": {
            "mr_enclave": s.server_identity.mr_enclave,
            "mr_signer": s.server_identity.mr_signer,
            "isv_svn": s.server_identity.isv_svn,
        },
    })
}

async fn run(cli: Cli) -> Result<Value, CliError> {
    match &cli.verb {
        Verb::Attest => {
            let client = Client::new(profile(&cli, cli.mode)?);
            Ok(session_json(&client.attest().await?))
        }
        Verb::ProvisionKek { kek, overwrite } => {
            barbie_client::parse_kek_hex(kek)?;
            let client = Client::new(profile(&cli, ClientMode::Admin)?);
            let session = client.attest().await?;
            client.provision_kek(&session, kek, *overwrite).await?;
            Ok(json!({ "status": "OK", "node": session.node }))
        }
        Verb::SetPolicy { policy: n, child } => {
            let acl = Acl { policy: policy(*n)?, children: child.clone() };
            let client = Client::new(profile(&cli, cli.mode)?);
            let session = client.attest().await?;
            let r = client.set_policy(&session, &acl).await?;
            Ok(serde_json::to_value(r).expect("serializes"))
        }
        Verb::Store { name, value, file, policy: n, child } => {
            let data = match (value, file) {
                (Some(v), _) => v.clone().into_bytes(),
                (None, Some(f)) => std::fs::read(f).map_err(|e| usage(format!("{}: {e}", f.display())))?,
                (None, None) => return Err(usage("store needs --value or --file")),
            };
            let client = Client::new(profile(&cli, cli.mode)?);
            let secret_ref = if cli.mode == ClientMode::Legacy {
                client.legacy_store(name, &data).await?
            } else {
                let acl = n.map(policy).transpose()?.map(|p| Acl { policy: p, children: child.clone() });
                let session = client.attest().await?;
                client.store_secret(&session, name, &data, acl.as_ref()).await?
            };
            Ok(json!({ "secret_ref": secret_ref }))
        }
        Verb::Get { secret_ref, out } => {
            let client = Client::new(profile(&cli, cli.mode)?);
            let data = if cli.mode == ClientMode::Legacy {
                client.legacy_get(secret_ref).await?
            } else {
                let session = client.attest().await?;
                client.get_secret(&session, secret_ref).await?
            };
            if let Some(path) = out {
                std::fs::write(path, &data).map_err(|e| usage(format!("{}: {e}", path.display())))?;
                return Ok(json!({ "secret_ref": secret_ref, "bytes": data.len(), "out": path }));
            }
            match String::from_utf8(data) {
                Ok(text) => Ok(json!({ "secret_ref": secret_ref, "value": text })),
                Err(e) => Ok(json!({ "secret_ref": secret_ref, "hex": hex::encode(e.into_bytes()) })),
            }
        }
        Verb::Bench { users, concurrency, requests, workload, payload_bytes, user_tokens, out, csv } => {
            let mode = match workload {
                Workload::V1Store => ClientMode::Legacy,
                Workload::V2RaStore => ClientMode::Aware,
                Workload::V2MaRoundtrip => ClientMode::Enabled,
            };
            let template = profile(&cli, mode)?;
            let tokens = if user_tokens.is_empty() { vec![cli.token.clone()] } else { user_tokens.clone() };
            let plan = BenchPlan {
                server_url: template.server_url.clone(),
                workload: *workload,
                users: (0..*users)
                    .map(|i| BenchUser {
                        token: tokens[i % tokens.len()].clone(),
                        project_id: cli.project.clone(),
                        enclave: template.local_enclave.clone(),
                    })
                    .collect(),
                concurrency: *concurrency,
                requests_per_user: *requests,
                payload_len: *payload_bytes,
                template,
            };
            let (report, samples) = bench::run_bench(&plan, Arc::new(HyperTransport::default()))
                .await
                .map_err(|e| CliError { code: 2, body: json!({ "error": "bench-failed", "reason": e.to_string() }) })?;
            let value = serde_json::to_value(&report).expect("serializes");
            let csv_path = csv.clone().or_else(|| out.as_ref().map(|o| o.with_extension("csv")));
            if let Some(path) = out {
                std::fs::write(path, serde_json::to_vec_pretty(&value).expect("serializes"))
                    .map_err(|e| usage(format!("{}: {e}", path.display())))?;
            }
            if let Some(path) = csv_path {
                bench::write_latency_csv(&path, &samples).map_err(|e| usage(e.to_string()))?;
            }
            Ok(value)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let runtime = tokio::runtime::Builder::new_multi_thread().enable_all().build().expect("tokio runtime");
    match runtime.block_on(run(cli)) {
        Ok(v) => {
            println!("{}", serde_json::to_string_pretty(&v).expect("serializes"));
            ExitCode::SUCCESS
        }
        Err(e) => {
            println!("{}", serde_json::to_string_pretty(&e.body).expect("serializes"));
            ExitCode::from(e.code)
        }
    }
}
