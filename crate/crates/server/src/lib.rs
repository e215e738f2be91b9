// SPDX-License-Identifier: Apache-2.0

//! HTTP front end of one BarbiE key-manager instance.
//!
//! | Method | Path | Purpose |
//! |---|---|---|
//! | GET | `/health` | instance id, KEK presence, enclave identity |
//! | POST | `/v1/secrets` | legacy store, token auth, plaintext payload |
//! | GET | `/v1/secrets/{ref}` | legacy retrieve |
//! | POST | `/v2/attest/start` | open a handshake; sets the `barbie_node` cookie |
//! | POST | `/v2/attest/msg2` | challenger `Msg2` → `Msg3` |
//! | POST | `/v2/attest/msg4` | RA close, or open the reverse RA for MA |
//! | POST | `/v2/attest/ma_msg3` | client `Msg3` + `SMsg4` → `CMsg4` |
//! | POST | `/v2/kek` | admin KEK provisioning |
//! | POST | `/v2/policy` | project sharing policy |
//! | POST | `/v2/secrets` | store a session-key encrypted secret |
//! | GET | `/v2/secrets/{ref}?session_id=` | retrieve under the caller's session key |
//!
//! Handshakes in progress live in this process only. Established session
//! keys are written to the shared store under the KEK, so any instance can
//! serve the data-plane calls that follow.

pub mod config;
pub mod deploy;
pub mod error;
mod handlers;
pub mod passthrough;

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::Write;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

use axum::extract::{Request, State};
use axum::middleware::{self, Next};
use axum::response::Response;
use axum::routing::{get, post};
use axum::Router;
use barbie_core::attestation::{AttestationSession, SessionId};
use barbie_core::enclave::{load_enclave, AuthorityKey, EnclaveError, PlatformState};
use barbie_core::kms::{KmsError, TrustedCore};
use barbie_core::store::{Store, StoreError};
use serde::Serialize;
use tokio::sync::oneshot;

pub use config::{CryptoPath, InstanceConfig};

#[derive(Debug, thiserror::Error)]
pub enum ServerError {
    #[error(transparent)]
    Config(#[from] config::ConfigError),
    #[error("reading {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("enclave: {0}")]
    Enclave(#[from] EnclaveError),
    #[error("trusted core: {0}")]
    Kms(#[from] KmsError),
    #[error("store: {0}")]
    Store(#[from] StoreError),
    #[error("binding {addr}: {source}")]
    Bind { addr: String, source: std::io::Error },
}

fn io_err(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> ServerError {
    let path = path.into();
    move |source| ServerError::Io { path, source }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub(crate) enum Caller {
    Admin,
    Project(String),
}

/// Instance-local state of one handshake.
pub(crate) struct Handshake {
    pub forward: AttestationSession,
    /// Server-as-challenger session towards the client enclave (MA only).
    pub reverse: Option<AttestationSession>,
    pub caller: Caller,
    pub last_used: Instant,
}

pub(crate) enum Backend {
    Enclave(Arc<TrustedCore>),
    PassThrough(passthrough::PassThrough),
}

pub struct AppState {
    pub(crate) config: InstanceConfig,
    pub(crate) backend: Backend,
    pub(crate) enclave: barbie_core::EnclaveHandle,
    pub(crate) authorities: Vec<AuthorityKey>,
    pub(crate) handshakes: Mutex<HashMap<SessionId, Arc<tokio::sync::Mutex<Handshake>>>>,
    log: Option<Mutex<File>>,
}

impl AppState {
    pub fn new(config: InstanceConfig) -> Result<Self, ServerError> {
        config.validate()?;
        let platform = Arc::new(PlatformState::load(&config.platform_file)?);
        let manifest = std::fs::read(&config.enclave_manifest).map_err(io_err(&config.enclave_manifest))?;
        let enclave = load_enclave(&manifest, config.enclave_signer_key.as_bytes(), config.isv_svn, platform.clone())?;
        let mut store = Store::open(&config.store_root)?;
        if !config.fsync {
            store = store.without_fsync();
        }
        let backend = match config.crypto_path {
            CryptoPath::Enclave => {
                let core = TrustedCore::open(
                    enclave.clone(),
                    store,
                    config.sealed_kek_path(),
                    config.kek_mode,
                    config.kek_hierarchy,
                )?
                .with_session_ttl(Duration::from_secs(config.session_ttl_secs));
                Backend::Enclave(Arc::new(core))
            }
            CryptoPath::PassThrough => {
                let key_file = config.pass_through_key_file();
                Backend::PassThrough(passthrough::PassThrough::open(store, &key_file).map_err(io_err(key_file))?)
            }
        };
        let mut authorities = vec![platform.authority_key()];
        for path in &config.client_authority_files {
            authorities.push(AuthorityKey::load(path)?);
        }
        let log = match &config.request_log {
            Some(path) => Some(Mutex::new(
                OpenOptions::new().create(true).append(true).open(path).map_err(io_err(path))?,
            )),
            None => None,
        };
        Ok(AppState { config, backend, enclave, authorities, handshakes: Mutex::new(HashMap::new()), log })
    }

    pub fn instance_id(&self) -> &str {
        &self.config.instance_id
    }

    /// The trusted core, unless this instance runs the pass-through path.
    pub fn core(&self) -> Option<&Arc<TrustedCore>> {
        match &self.backend {
            Backend::Enclave(core) => Some(core),
            Backend::PassThrough(_) => None,
        }
    }

    pub fn pending_handshakes(&self) -> usize {
        self.handshakes.lock().unwrap().len()
    }

    pub(crate) fn expire_handshakes(&self) {
        let ttl = Duration::from_secs(self.config.handshake_ttl_secs);
        self.handshakes.lock().unwrap().retain(|_, h| match h.try_lock() {
            Ok(h) => h.last_used.elapsed() <= ttl,
            Err(_) => true,
        });
    }

    fn log_request(&self, line: &RequestLogLine<'_>) {
        if let Some(log) = &self.log {
            let mut text = serde_json::to_string(line).expect("log line serializes");
            text.push('\n');
            let _ = log.lock().unwrap().write_all(text.as_bytes());
        }
    }
}

/// One line of the request log.
#[derive(Serialize)]
struct RequestLogLine<'a> {
    ts_ms: u128,
    instance_id: &'a str,
    method: &'a str,
    path: &'a str,
    status: u16,
    duration_us: u128,
}

async fn request_log(State(state): State<Arc<AppState>>, req: Request, next: Next) -> Response {
    let start = Instant::now();
    let method = req.method().clone();
    let path = req.uri().path().to_owned();
    let response = next.run(req).await;
    state.log_request(&RequestLogLine {
        ts_ms: SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_millis()).unwrap_or(0),
        instance_id: &state.config.instance_id,
        method: method.as_str(),
        path: &path,
        status: response.status().as_u16(),
        duration_us: start.elapsed().as_micros(),
    });
    response
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/health", get(handlers::health))
        .route("/v1/secrets", post(handlers::v1_store))
        .route("/v1/secrets/{secret_ref}", get(handlers::v1_get))
        .route("/v2/attest/start", post(handlers::attest_start))
        .route("/v2/attest/msg2", post(handlers::attest_msg2))
        .route("/v2/attest/msg4", post(handlers::attest_msg4))
        .route("/v2/attest/ma_msg3", post(handlers::attest_ma_msg3))
        .route("/v2/kek", post(handlers::provision_kek))
        .route("/v2/policy", post(handlers::set_policy))
        .route("/v2/secrets", post(handlers::v2_store))
        .route("/v2/secrets/{secret_ref}", get(handlers::v2_get))
        .layer(middleware::from_fn_with_state(state.clone(), request_log))
        .with_state(state)
}

/// A server bound and running on the current tokio runtime.
pub struct RunningServer {
    pub addr: SocketAddr,
    pub state: Arc<AppState>,
    shutdown: Option<oneshot::Sender<()>>,
    task: tokio::task::JoinHandle<std::io::Result<()>>,
}

impl RunningServer {
    pub fn url(&self) -> String {
        format!("http://{}", self.addr)
    }

    pub async fn shutdown(mut self) {
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
        let _ = (&mut self.task).await;
    }

    /// Resolves when the server stops on its own (listener error).
    pub async fn wait(&mut self) -> std::io::Result<()> {
        (&mut self.task).await.unwrap_or_else(|e| Err(std::io::Error::other(e)))
    }
}

pub async fn serve(config: InstanceConfig) -> Result<RunningServer, ServerError> {
    let addr = config.listen_address.clone();
    let state = Arc::new(AppState::new(config)?);
    let listener = tokio::net::TcpListener::bind(&addr).await.map_err(|source| ServerError::Bind { addr, source })?;
    let local = listener.local_addr().map_err(io_err("listener"))?;
    let (tx, rx) = oneshot::channel::<()>();
    let app = router(state.clone());
    let task = tokio::spawn(async move {
        axum::serve(listener, app)
            .with_graceful_shutdown(async {
                let _ = rx.await;
            })
            .await
    });
    Ok(RunningServer { addr: local, state, shutdown: Some(tx), task })
}

/// Runs an instance on its own runtime until Ctrl-C or a listener error.
/// Prints `listening on <addr>` once bound; launchers parse that line.
pub fn run_blocking(config: InstanceConfig) -> Result<(), ServerError> {
    let runtime = tokio::runtime::Builder::new_multi_thread()
        .worker_threads(config.worker_threads)
        .enable_all()
        .build()
        .map_err(io_err("tokio runtime"))?;
    runtime.block_on(async move {
        let mut server = serve(config).await?;
        println!("listening on {}", server.addr);
        let stopped = tokio::select! {
            _ = tokio::signal::ctrl_c() => None,
            res = server.wait() => Some(res),
        };
        match stopped {
            None => {
                server.shutdown().await;
                Ok(())
            }
            Some(res) => res.map_err(io_err("listener")),
        }
    })
}
