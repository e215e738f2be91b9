// SPDX-License-Identifier: Apache-2.0

//! HTTP load balancer with sticky-cookie routing and periodic health checks.
//!
//! A request carrying `barbie_node=<id>` goes to backend `<id>` when
//! stickiness is on and that backend is healthy. Everything else follows the
//! routing policy over the healthy backends. No healthy backend gives 503.

use std::net::SocketAddr;
use std::sync::atomic::{AtomicBool, AtomicU64, AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::Duration;

use axum::body::Body;
use axum::extract::{Request, State};
use axum::http::{header, HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::Router;
use barbie_client::transport::{HttpRequest, HyperTransport, Transport};
use barbie_core::wire::COOKIE_NAME;
use bytes::Bytes;
use http_body_util::{BodyExt, Full};
use hyper_util::rt::TokioIo;
use rand::Rng;
use serde::{Deserialize, Serialize};
use tokio::net::TcpStream;
use tokio::sync::oneshot;

/// Response header naming the backend that served a request.
pub const BACKEND_HEADER: &str = "x-barbie-backend";
const MAX_BODY: usize = 16 << 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Routing {
    RoundRobin,
    Random,
    /// Fewest in-flight requests; ties go to the lowest index.
    LeastOutstanding,
}

impl std::str::FromStr for Routing {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s.to_ascii_lowercase().replace('_', "-").as_str() {
            "round-robin" => Ok(Routing::RoundRobin),
            "random" => Ok(Routing::Random),
            "least-outstanding" => Ok(Routing::LeastOutstanding),
            other => Err(format!("unknown routing {other:?} (round-robin, random, least-outstanding)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackendAddr {
    /// Instance id; the sticky cookie value that selects this backend.
    pub id: String,
    pub addr: SocketAddr,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LbConfig {
    pub backends: Vec<BackendAddr>,
    pub routing: Routing,
    pub sticky_cookie_name: String,
    pub honor_sticky: bool,
    pub health_interval_ms: u64,
    pub listen: String,
}

impl LbConfig {
    pub fn new(backends: Vec<BackendAddr>, routing: Routing, honor_sticky: bool) -> Self {
        LbConfig {
            backends,
            routing,
            sticky_cookie_name: COOKIE_NAME.into(),
            honor_sticky,
            health_interval_ms: 500,
            listen: "127.0.0.1:0".into(),
        }
    }
}

struct Backend {
    id: String,
    addr: SocketAddr,
    healthy: AtomicBool,
    inflight: AtomicUsize,
    served: AtomicU64,
}

pub struct Balancer {
    config: LbConfig,
    backends: Vec<Backend>,
    next: AtomicUsize,
}

/// Per-backend counters.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct BackendStats {
    pub id: String,
    pub healthy: bool,
    pub inflight: usize,
    pub served: u64,
}

struct InflightGuard<'a>(&'a Backend);

impl Drop for InflightGuard<'_> {
    fn drop(&mut self) {
        self.0.inflight.fetch_sub(1, Ordering::SeqCst);
    }
}

/// Extracts `name` from a `Cookie` header value.
pub fn cookie_value<'a>(header: &'a str, name: &str) -> Option<&'a str> {
    header.split(';').find_map(|kv| {
        let (k, v) = kv.trim().split_once('=')?;
        (k.trim() == name).then(|| v.trim())
    })
}

impl Balancer {
    pub fn new(config: LbConfig) -> Self {
        let backends = config
            .backends
            .iter()
            .map(|b| Backend {
                id: b.id.clone(),
                addr: b.addr,
                healthy: AtomicBool::new(true),
                inflight: AtomicUsize::new(0),
                served: AtomicU64::new(0),
            })
            .collect();
        Balancer { config, backends, next: AtomicUsize::new(0) }
    }

    pub fn config(&self) -> &LbConfig {
        &self.config
    }

    pub fn set_healthy(&self, index: usize, healthy: bool) {
        self.backends[index].healthy.store(healthy, Ordering::SeqCst);
    }

    pub fn stats(&self) -> Vec<BackendStats> {
        self.backends
            .iter()
            .map(|b| BackendStats {
                id: b.id.clone(),
                healthy: b.healthy.load(Ordering::SeqCst),
                inflight: b.inflight.load(Ordering::SeqCst),
                served: b.served.load(Ordering::SeqCst),
            })
            .collect()
    }

    /// Picks a backend index for a request with the given sticky cookie value.
    pub fn route(&self, sticky: Option<&str>) -> Option<usize> {
        let healthy = |i: usize| self.backends[i].healthy.load(Ordering::SeqCst);
        if self.config.honor_sticky {
            if let Some(id) = sticky {
                if let Some(i) = self.backends.iter().position(|b| b.id == id) {
                    if healthy(i) {
                        return Some(i);
                    }
                }
            }
        }
        let n = self.backends.len();
        match self.config.routing {
            Routing::RoundRobin => {
                (0..n).map(|_| self.next.fetch_add(1, Ordering::SeqCst) % n).find(|&i| healthy(i))
            }
            Routing::Random => {
                let live: Vec<usize> = (0..n).filter(|&i| healthy(i)).collect();
                (!live.is_empty()).then(|| live[rand::thread_rng().gen_range(0..live.len())])
            }
            Routing::LeastOutstanding => (0..n)
                .filter(|&i| healthy(i))
                .min_by_key(|&i| (self.backends[i].inflight.load(Ordering::SeqCst), i)),
        }
    }

    /// Probes every backend's `/health` once.
    pub async fn check_health(&self) {
        let t = HyperTransport::with_timeout(Duration::from_secs(2));
        for b in &self.backends {
            let ok = matches!(t.send(HttpRequest::get(format!("http://{}/health", b.addr))).await, Ok(r) if r.status == 200);
            b.healthy.store(ok, Ordering::SeqCst);
        }
    }

    async fn forward(&self, index: usize, req: Request) -> Result<Response, String> {
        let backend = &self.backends[index];
        backend.inflight.fetch_add(1, Ordering::SeqCst);
        let _guard = InflightGuard(backend);
        let (parts, body) = req.into_parts();
        let body = axum::body::to_bytes(body, MAX_BODY).await.map_err(|e| e.to_string())?;
        let stream = TcpStream::connect(backend.addr).await.map_err(|e| e.to_string())?;
        stream.set_nodelay(true).map_err(|e| e.to_string())?;
        let (mut sender, conn) =
            hyper::client::conn::http1::handshake(TokioIo::new(stream)).await.map_err(|e| e.to_string())?;
        tokio::spawn(async move {
            let _ = conn.await;
        });
        let target = parts.uri.path_and_query().map_or("/", |p| p.as_str());
        let mut out = hyper::Request::builder().method(parts.method.clone()).uri(target);
        for (k, v) in &parts.headers {
            if k != header::HOST && k != header::CONNECTION {
                out = out.header(k, v);
            }
        }
        let out = out
            .header(header::HOST, backend.addr.to_string())
            .header(header::CONNECTION, "close")
            .body(Full::new(body))
            .map_err(|e| e.to_string())?;
        let resp = sender.send_request(out).await.map_err(|e| e.to_string())?;
        let (mut parts, body) = resp.into_parts();
        let bytes: Bytes = body.collect().await.map_err(|e| e.to_string())?.to_bytes();
        backend.served.fetch_add(1, Ordering::SeqCst);
        parts.headers.remove(header::CONNECTION);
        parts.headers.insert(BACKEND_HEADER, HeaderValue::from_str(&backend.id).map_err(|e| e.to_string())?);
        Ok(Response::from_parts(parts, Body::from(bytes)))
    }
}

fn error(status: StatusCode, code: &str, reason: String) -> Response {
    (status, axum::Json(serde_json::json!({ "error": code, "reason": reason }))).into_response()
}

async fn proxy(State(lb): State<Arc<Balancer>>, req: Request) -> Response {
    let sticky = req
        .headers()
        .get_all(header::COOKIE)
        .iter()
        .filter_map(|v| v.to_str().ok())
        .find_map(|c| cookie_value(c, &lb.config.sticky_cookie_name).map(str::to_owned));
    let Some(index) = lb.route(sticky.as_deref()) else {
        return error(StatusCode::SERVICE_UNAVAILABLE, "no-healthy-backend", "every backend failed its health check".into());
    };
    match lb.forward(index, req).await {
        Ok(resp) => resp,
        Err(e) => {
            lb.set_healthy(index, false);
            error(StatusCode::BAD_GATEWAY, "bad-gateway", format!("backend {}: {e}", lb.backends[index].id))
        }
    }
}

pub struct RunningLb {
    pub addr: SocketAddr,
    pub balancer: Arc<Balancer>,
    shutdown: Option<oneshot::Sender<()>>,
    tasks: Vec<tokio::task::JoinHandle<()>>,
}

impl RunningLb {
    pub fn url(&self) -> String {
        format!("http://{}", self.addr)
    }

    pub async fn shutdown(mut self) {
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
        for t in self.tasks.drain(..) {
            t.abort();
            let _ = t.await;
        }
    }
}

impl Drop for RunningLb {
    fn drop(&mut self) {
        for t in &self.tasks {
            t.abort();
        }
    }
}

/// Binds the balancer, runs one health check, then serves and keeps checking.
pub async fn start(config: LbConfig) -> std::io::Result<RunningLb> {
    let listener = tokio::net::TcpListener::bind(&config.listen).await?;
    let addr = listener.local_addr()?;
    let interval = Duration::from_millis(config.health_interval_ms.max(10));
    let balancer = Arc::new(Balancer::new(config));
    balancer.check_health().await;

    let (tx, rx) = oneshot::channel::<()>();
    let app = Router::new().fallback(proxy).with_state(balancer.clone());
    let server = tokio::spawn(async move {
        let _ = axum::serve(listener, app)
            .with_graceful_shutdown(async {
                let _ = rx.await;
            })
            .await;
    });
    let checker = {
        let lb = balancer.clone();
        tokio::spawn(async move {
            loop {
                tokio::time::sleep(interval).await;
                lb.check_health().await;
            }
        })
    };
    Ok(RunningLb { addr, balancer, shutdown: Some(tx), tasks: vec![server, checker] })
}
