// SPDX-License-Identifier: Apache-2.0

//! Load driver with Apache-benchmark style metrics.
//!
//! `users` independent streams each issue `requests_per_user` requests with
//! `concurrency` requests in flight, so the concurrency level is
//! `users * concurrency`. Attestation happens once per user before the clock
//! starts. Timers follow ab:
//!
//! * `requests_per_second` = complete / total time
//! * `mean_time_per_request_ms` = concurrency level * total time / complete
//! * `mean_time_across_connections_ms` = total time / complete
//! * processing time = total - connect, per request

use std::path::Path;
use std::sync::Arc;
use std::time::{Duration, Instant};

use barbie_core::crypto;
use barbie_core::enclave::EnclaveHandle;
use barbie_core::kms::SK_SECRET_AAD;
use barbie_core::wire::{SecretRef, V1StoreRequest, V2GetResponse, V2StoreRequest, AUTH_HEADER};
use rand::rngs::OsRng;
use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::transport::{HttpRequest, Timing, Transport};
use crate::{Client, ClientError, ClientMode, ClientProfile, Session};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Workload {
    V1Store,
    V2RaStore,
    V2MaRoundtrip,
}

impl std::str::FromStr for Workload {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s.to_ascii_lowercase().replace('_', "-").as_str() {
            "v1-store" => Ok(Workload::V1Store),
            "v2-ra-store" => Ok(Workload::V2RaStore),
            "v2-ma-roundtrip" => Ok(Workload::V2MaRoundtrip),
            other => Err(format!("unknown workload {other:?} (v1-store, v2-ra-store, v2-ma-roundtrip)")),
        }
    }
}

/// One simulated user. `enclave` is required for `V2_MA_ROUNDTRIP`.
#[derive(Clone)]
pub struct BenchUser {
    pub token: String,
    pub project_id: String,
    pub enclave: Option<EnclaveHandle>,
}

#[derive(Clone)]
pub struct BenchPlan {
    pub server_url: String,
    pub workload: Workload,
    pub users: Vec<BenchUser>,
    pub concurrency: usize,
    pub requests_per_user: usize,
    pub payload_len: usize,
    /// Server quote checks for the setup handshakes.
    pub template: ClientProfile,
}

/// One timed request (a store plus a get for `V2_MA_ROUNDTRIP`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub user: usize,
    pub worker: usize,
    pub seq: usize,
    pub status: u16,
    pub ok: bool,
    pub connect_ms: f64,
    pub processing_ms: f64,
    pub total_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub workload: Workload,
    pub users: usize,
    pub concurrency: usize,
    pub concurrency_level: usize,
    pub requests_per_user: usize,
    pub complete_requests: usize,
    pub failed_requests: usize,
    /// Set when any request failed.
    pub degraded: bool,
    pub total_time_s: f64,
    pub requests_per_second: f64,
    pub mean_time_per_request_ms: f64,
    pub mean_time_across_connections_ms: f64,
    pub mean_connect_time_ms: f64,
    pub mean_processing_time_ms: f64,
    pub total_body_bytes: u64,
}

impl BenchReport {
    pub fn from_samples(
        workload: Workload,
        users: usize,
        concurrency: usize,
        requests_per_user: usize,
        total_time: Duration,
        samples: &[Sample],
        total_body_bytes: u64,
    ) -> Self {
        let complete = samples.len();
        let failed = samples.iter().filter(|s| !s.ok).count();
        let level = users * concurrency;
        let total_s = total_time.as_secs_f64();
        let mean = |f: fn(&Sample) -> f64| {
            if complete == 0 {
                0.0
            } else {
                samples.iter().map(f).sum::<f64>() / complete as f64
            }
        };
        let (rps, across_ms) = if complete == 0 || total_s == 0.0 {
            (0.0, 0.0)
        } else {
            (complete as f64 / total_s, total_s * 1000.0 / complete as f64)
        };
        BenchReport {
            workload,
            users,
            concurrency,
            concurrency_level: level,
            requests_per_user,
            complete_requests: complete,
            failed_requests: failed,
            degraded: failed > 0,
            total_time_s: total_s,
            requests_per_second: rps,
            mean_time_per_request_ms: across_ms * level as f64,
            mean_time_across_connections_ms: across_ms,
            mean_connect_time_ms: mean(|s| s.connect_ms),
            mean_processing_time_ms: mean(|s| s.processing_ms),
            total_body_bytes,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum BenchError {
    #[error("bench plan: {0}")]
    Plan(String),
    #[error("setup for user {user}: {source}")]
    Setup { user: usize, source: ClientError },
    #[error("latency csv: {0}")]
    Csv(#[from] csv::Error),
}

struct Stream {
    user: usize,
    token: String,
    session: Option<Session>,
}

fn ms(d: Duration) -> f64 {
    d.as_secs_f64() * 1000.0
}

async fn one_request(
    plan: &BenchPlan,
    transport: &dyn Transport,
    stream: &Stream,
    payload: &[u8],
) -> (u16, bool, Timing, u64) {
    let url = |p: &str| format!("{}{}", plan.server_url, p);
    let post = |path: &str, body: Vec<u8>| HttpRequest::post_json(url(path), body);
    match plan.workload {
        Workload::V1Store => {
            let body = V1StoreRequest { payload: payload.to_vec(), name: "bench".into(), content_type: "text/plain".into() };
            let body = serde_json::to_vec(&body).expect("serializes");
            let len = body.len() as u64;
            let req = post("/v1/secrets", body).header(AUTH_HEADER, &stream.token);
            match transport.send(req).await {
                Ok(r) => (r.status, (200..300).contains(&r.status), r.timing, len),
                Err(_) => (0, false, Timing::default(), len),
            }
        }
        Workload::V2RaStore | Workload::V2MaRoundtrip => {
            let session = stream.session.as_ref().expect("v2 streams attest during setup");
            let body = V2StoreRequest {
                session_id: session.session_id,
                sk_secret: crypto::aead_seal(session.session_key(), payload, SK_SECRET_AAD, &mut OsRng),
                name: "bench".into(),
                content_type: "application/octet-stream".into(),
            };
            let body = serde_json::to_vec(&body).expect("serializes");
            let len = body.len() as u64;
            let stored = match transport.send(post("/v2/secrets", body)).await {
                Ok(r) => r,
                Err(_) => return (0, false, Timing::default(), len),
            };
            if plan.workload == Workload::V2RaStore || !(200..300).contains(&stored.status) {
                return (stored.status, (200..300).contains(&stored.status), stored.timing, len);
            }
            let Ok(secret) = serde_json::from_slice::<SecretRef>(&stored.body) else {
                return (stored.status, false, stored.timing, len);
            };
            let get = HttpRequest::get(url(&format!(
                "/v2/secrets/{}?session_id={}",
                secret.secret_ref,
                session.session_id.to_hex()
            )));
            let fetched = match transport.send(get).await {
                Ok(r) => r,
                Err(_) => return (0, false, stored.timing, len),
            };
            let timing = Timing {
                connect: stored.timing.connect + fetched.timing.connect,
                total: stored.timing.total + fetched.timing.total,
            };
            let ok = (200..300).contains(&fetched.status)
                && serde_json::from_slice::<V2GetResponse>(&fetched.body)
                    .ok()
                    .and_then(|g| crypto::aead_open(session.session_key(), &g.sk_secret, SK_SECRET_AAD).ok())
                    .is_some_and(|p| p == payload);
            (fetched.status, ok, timing, len)
        }
    }
}

async fn setup(plan: &BenchPlan, transport: Arc<dyn Transport>) -> Result<Vec<Stream>, BenchError> {
    let mut streams = Vec::with_capacity(plan.users.len());
    for (i, user) in plan.users.iter().enumerate() {
        let mode = match plan.workload {
            Workload::V1Store => ClientMode::Legacy,
            Workload::V2RaStore => ClientMode::Aware,
            Workload::V2MaRoundtrip => ClientMode::Enabled,
        };
        let session = if mode == ClientMode::Legacy {
            None
        } else {
            let mut profile = plan.template.clone();
            profile.mode = mode;
            profile.server_url = plan.server_url.clone();
            profile.token = user.token.clone();
            profile.project_id = user.project_id.clone();
            profile.local_enclave = user.enclave.clone();
            let client = Client::with_transport(profile, transport.clone());
            Some(client.attest().await.map_err(|source| BenchError::Setup { user: i, source })?)
        };
        streams.push(Stream { user: i, token: user.token.clone(), session });
    }
    Ok(streams)
}

/// Runs the plan and returns the report and the per-request samples.
pub async fn run_bench(
    plan: &BenchPlan,
    transport: Arc<dyn Transport>,
) -> Result<(BenchReport, Vec<Sample>), BenchError> {
    if plan.concurrency == 0 {
        return Err(BenchError::Plan("concurrency must be at least 1".into()));
    }
    if plan.workload == Workload::V2MaRoundtrip && plan.users.iter().any(|u| u.enclave.is_none()) {
        return Err(BenchError::Plan("V2_MA_ROUNDTRIP needs an enclave per user".into()));
    }
    let users = plan.users.len();
    let streams: Vec<Arc<Stream>> = setup(plan, transport.clone()).await?.into_iter().map(Arc::new).collect();
    let plan = Arc::new(plan.clone());

    let start = Instant::now();
    let mut tasks = Vec::new();
    for stream in &streams {
        for worker in 0..plan.concurrency {
            let (plan, stream, transport) = (plan.clone(), stream.clone(), transport.clone());
            tasks.push(tokio::spawn(async move {
                let mut out = Vec::new();
                let mut payload = vec![0u8; plan.payload_len];
                let mut seq = worker;
                while seq < plan.requests_per_user {
                    OsRng.fill_bytes(&mut payload);
                    let (status, ok, timing, len) = one_request(&plan, transport.as_ref(), &stream, &payload).await;
                    out.push((
                        Sample {
                            user: stream.user,
                            worker,
                            seq,
                            status,
                            ok,
                            connect_ms: ms(timing.connect),
                            processing_ms: ms(timing.total.saturating_sub(timing.connect)),
                            total_ms: ms(timing.total),
                        },
                        len,
                    ));
                    seq += plan.concurrency;
                }
                out
            }));
        }
    }
    let mut samples = Vec::new();
    let mut bytes = 0u64;
    for t in tasks {
        for (s, len) in t.await.expect("bench worker panicked") {
            bytes += len;
            samples.push(s);
        }
    }
    let elapsed = if samples.is_empty() { Duration::ZERO } else { start.elapsed() };
    samples.sort_by_key(|s| (s.user, s.seq));
    let report =
        BenchReport::from_samples(plan.workload, users, plan.concurrency, plan.requests_per_user, elapsed, &samples, bytes);
    Ok((report, samples))
}

pub fn write_latency_csv(path: &Path, samples: &[Sample]) -> Result<(), BenchError> {
    let mut w = csv::Writer::from_path(path)?;
    for s in samples {
        w.serialize(s)?;
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}
