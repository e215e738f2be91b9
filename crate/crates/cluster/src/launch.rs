// SPDX-License-Identifier: Apache-2.0

//! Starts server instances as separate processes over one shared store and
//! puts a load balancer in front of them.

use std::io::{BufRead, BufReader, Read};
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Stdio};
use std::sync::Arc;

use barbie_client::{Client, ClientError, ClientMode, ClientProfile};
use barbie_core::enclave::{load_enclave, PlatformState};
use barbie_core::kms::{generate_kek_from_seal_key, KekMode};
use barbie_server::deploy::{Deployment, SERVER_MANIFEST};
use barbie_server::InstanceConfig;
use rand::rngs::OsRng;

use crate::lb::{self, BackendAddr, LbConfig, Routing, RunningLb};

#[derive(Debug, thiserror::Error)]
pub enum LaunchError {
    #[error("{0}")]
    Io(#[from] std::io::Error),
    #[error("instance {id} did not start: {detail}")]
    Start { id: String, detail: String },
    #[error("seal-derived KEK mode needs one platform for all instances; {0} differs from the first")]
    MismatchedPlatforms(String),
    #[error("admin-provisioned mode needs a KEK")]
    NoKek,
    #[error("provisioning {id}: {source}")]
    Provisioning { id: String, source: ClientError },
    #[error("instance {0} has no KEK after launch")]
    KekMissing(String),
}

/// A server process. Killed on drop.
pub struct Instance {
    pub id: String,
    pub addr: SocketAddr,
    pub config: InstanceConfig,
    pub config_path: PathBuf,
    child: Option<Child>,
}

impl Instance {
    pub fn url(&self) -> String {
        format!("http://{}", self.addr)
    }

    pub fn is_running(&mut self) -> bool {
        self.child.as_mut().is_some_and(|c| matches!(c.try_wait(), Ok(None)))
    }

    pub fn stop(&mut self) {
        if let Some(mut c) = self.child.take() {
            let _ = c.kill();
            let _ = c.wait();
        }
    }
}

impl Drop for Instance {
    fn drop(&mut self) {
        self.stop();
    }
}

/// Writes `config` next to the store and starts `node_exe node --config <file>`.
pub fn spawn_instance(node_exe: &Path, config: &InstanceConfig, config_dir: &Path) -> Result<Instance, LaunchError> {
    std::fs::create_dir_all(config_dir)?;
    let config_path = config_dir.join(format!("{}.json", config.instance_id));
    std::fs::write(&config_path, config.to_json())?;
    let mut child = Command::new(node_exe)
        .arg("node")
        .arg("--config")
        .arg(&config_path)
        .env_remove("BARBIE_LISTEN")
        .env_remove("BARBIE_STORE_ROOT")
        .stdin(Stdio::null())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .spawn()?;
    let start_err = |detail: String| LaunchError::Start { id: config.instance_id.clone(), detail };
    let mut stdout = BufReader::new(child.stdout.take().expect("piped"));
    let mut line = String::new();
    stdout.read_line(&mut line)?;
    let Some(addr) = line.trim().strip_prefix("listening on ") else {
        let _ = child.kill();
        let mut stderr = String::new();
        if let Some(mut e) = child.stderr.take() {
            let _ = e.read_to_string(&mut stderr);
        }
        let _ = child.wait();
        return Err(start_err(stderr.trim().to_owned()));
    };
    let addr: SocketAddr = addr.parse().map_err(|e| start_err(format!("bad address {addr:?}: {e}")))?;
    // Keep draining so the child never blocks on a full pipe.
    std::thread::spawn(move || std::io::copy(&mut stdout, &mut std::io::sink()));
    if let Some(mut err) = child.stderr.take() {
        std::thread::spawn(move || std::io::copy(&mut err, &mut std::io::stderr()));
    }
    Ok(Instance { id: config.instance_id.clone(), addr, config: config.clone(), config_path, child: Some(child) })
}

#[derive(Debug, Clone)]
pub struct ClusterSpec {
    pub n: usize,
    pub kek_mode: KekMode,
    /// 64 hex characters; required for `ADMIN_PROVISIONED`.
    pub kek_hex: Option<String>,
    /// Platform file per instance; empty means all share the deployment platform.
    pub platforms: Vec<PathBuf>,
    pub routing: Routing,
    pub honor_sticky: bool,
    /// Executable that accepts `node --config <file>`.
    pub node_exe: PathBuf,
    pub worker_threads: usize,
    pub fsync: bool,
    pub request_log: bool,
}

impl ClusterSpec {
    pub fn new(n: usize, node_exe: impl Into<PathBuf>) -> Self {
        ClusterSpec {
            n,
            kek_mode: KekMode::SealDerived,
            kek_hex: None,
            platforms: Vec::new(),
            routing: Routing::RoundRobin,
            honor_sticky: true,
            node_exe: node_exe.into(),
            worker_threads: 1,
            fsync: true,
            request_log: false,
        }
    }
}

pub struct Cluster {
    pub deployment: Deployment,
    pub instances: Vec<Instance>,
    pub lb: RunningLb,
}

impl Cluster {
    pub fn lb_url(&self) -> String {
        self.lb.url()
    }

    pub async fn shutdown(mut self) {
        for i in &mut self.instances {
            i.stop();
        }
        self.lb.shutdown().await;
    }
}

fn kek_check_value(platform: &Path) -> Result<String, LaunchError> {
    let p = PlatformState::load(platform).map_err(|e| std::io::Error::other(e.to_string()))?;
    let signer = barbie_server::deploy::Deployment::server_signer();
    let enclave = load_enclave(SERVER_MANIFEST, signer.as_bytes(), 1, Arc::new(p)).expect("manifest is non-empty");
    Ok(generate_kek_from_seal_key(&enclave, &mut OsRng).check_value())
}

pub fn admin_profile(deployment: &Deployment, url: String) -> ClientProfile {
    ClientProfile::new(ClientMode::Admin, url, &deployment.admin_token).authority(deployment.platform().authority_key())
}

/// Sends `kek_hex` to one instance over an admin RA session.
pub async fn provision(deployment: &Deployment, instance: &Instance, kek_hex: &str) -> Result<(), LaunchError> {
    let client = Client::new(admin_profile(deployment, instance.url()));
    let wrap = |source| LaunchError::Provisioning { id: instance.id.clone(), source };
    let session = client.attest().await.map_err(wrap)?;
    client.provision_kek(&session, kek_hex, false).await.map_err(wrap)
}

/// Config for instance `index` of `spec`.
pub fn instance_config(deployment: &Deployment, spec: &ClusterSpec, index: usize) -> InstanceConfig {
    let id = format!("node{}", index + 1);
    let mut cfg = deployment.config(&id, spec.kek_mode);
    if let Some(p) = spec.platforms.get(index) {
        cfg.platform_file = p.clone();
    }
    cfg.worker_threads = spec.worker_threads;
    cfg.fsync = spec.fsync;
    if spec.request_log {
        cfg.request_log = Some(deployment.root.join(format!("{id}.requests.jsonl")));
    }
    cfg
}

/// Starts `spec.n` instances and a balancer; every instance has the KEK on return.
pub async fn launch_cluster(deployment: Deployment, spec: &ClusterSpec) -> Result<Cluster, LaunchError> {
    let platforms: Vec<PathBuf> =
        (0..spec.n).map(|i| spec.platforms.get(i).cloned().unwrap_or_else(|| deployment.platform_file.clone())).collect();
    if spec.kek_mode == KekMode::SealDerived {
        let first = kek_check_value(&platforms[0])?;
        for p in &platforms[1..] {
            if kek_check_value(p)? != first {
                return Err(LaunchError::MismatchedPlatforms(p.display().to_string()));
            }
        }
    }
    if spec.kek_mode == KekMode::AdminProvisioned && spec.kek_hex.is_none() {
        return Err(LaunchError::NoKek);
    }

    let config_dir = deployment.root.join("instances");
    let mut instances = Vec::with_capacity(spec.n);
    for i in 0..spec.n {
        instances.push(spawn_instance(&spec.node_exe, &instance_config(&deployment, spec, i), &config_dir)?);
    }
    for inst in &instances {
        let client = Client::new(admin_profile(&deployment, inst.url()));
        let health = client.health().await.map_err(|source| LaunchError::Provisioning { id: inst.id.clone(), source })?;
        if !health.kek_present {
            match &spec.kek_hex {
                Some(kek) => provision(&deployment, inst, kek).await?,
                None => return Err(LaunchError::KekMissing(inst.id.clone())),
            }
        }
    }

    let backends = instances.iter().map(|i| BackendAddr { id: i.id.clone(), addr: i.addr }).collect();
    let lb = lb::start(LbConfig::new(backends, spec.routing, spec.honor_sticky)).await?;
    Ok(Cluster { deployment, instances, lb })
}
