// SPDX-License-Identifier: Apache-2.0

use std::sync::Arc;
use std::time::Instant;

use axum::body::Bytes;
use axum::extract::{Path, Query, State};
use axum::http::{header, HeaderMap, HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::Json;
use barbie_core::attestation::{
    self, AttestError, AttestationSession, CMsg4, Message, Msg2, Msg3, Msg4, SMsg4, SessionId, Status,
};
use barbie_core::kms::{KekMode, KmsError, Mode, TrustedCore};
use barbie_core::wire::{self, *};
use rand::rngs::OsRng;
use serde::de::DeserializeOwned;
use serde::Deserialize;

use crate::error::ApiError;
use crate::{AppState, Backend, Caller, CryptoPath, Handshake};

type ApiResult<T> = Result<T, ApiError>;
type Shared = State<Arc<AppState>>;

fn parse_json<T: DeserializeOwned>(body: &[u8]) -> ApiResult<T> {
    serde_json::from_slice(body).map_err(|e| ApiError::malformed(e.to_string()))
}

fn parse_message<T: TryFrom<Message, Error = AttestError>>(m: Message) -> ApiResult<T> {
    T::try_from(m).map_err(|e| ApiError::malformed(e.to_string()))
}

fn caller(state: &AppState, headers: &HeaderMap) -> ApiResult<Caller> {
    let token = headers.get(AUTH_HEADER).and_then(|v| v.to_str().ok()).ok_or_else(ApiError::unauthorized)?;
    if token == state.config.admin_token {
        return Ok(Caller::Admin);
    }
    state
        .config
        .keystone_tokens
        .get(token)
        .map(|p| Caller::Project(p.clone()))
        .ok_or_else(ApiError::unauthorized)
}

fn project_of(state: &AppState, headers: &HeaderMap) -> ApiResult<String> {
    match caller(state, headers)? {
        Caller::Project(p) => Ok(p),
        Caller::Admin => Err(ApiError::unauthorized()),
    }
}

fn core(state: &AppState) -> ApiResult<&Arc<TrustedCore>> {
    state.core().ok_or_else(ApiError::enclave_disabled)
}

fn handshake(state: &AppState, id: &SessionId) -> ApiResult<Arc<tokio::sync::Mutex<Handshake>>> {
    state.handshakes.lock().unwrap().get(id).cloned().ok_or_else(ApiError::unknown_session)
}

fn forget(state: &AppState, id: &SessionId) {
    state.handshakes.lock().unwrap().remove(id);
}

/// Runs `step` on the locked handshake. A failed step ends the handshake.
async fn with_handshake<T>(
    state: &AppState,
    id: &SessionId,
    step: impl FnOnce(&mut Handshake) -> ApiResult<T>,
) -> ApiResult<T> {
    let entry = handshake(state, id)?;
    let Ok(mut hs) = entry.try_lock() else {
        return Err(ApiError::busy());
    };
    hs.last_used = Instant::now();
    let out = step(&mut hs);
    if out.is_err() {
        forget(state, id);
    }
    out
}

pub async fn health(State(state): Shared) -> Json<Health> {
    let id = state.enclave.identity();
    let (kek_present, check) = match &state.backend {
        Backend::Enclave(core) => (core.kek_present(), core.kek_check_value()),
        Backend::PassThrough(_) => (true, None),
    };
    Json(Health {
        instance_id: state.config.instance_id.clone(),
        kek_present,
        kek_mode: match state.config.kek_mode {
            KekMode::SealDerived => "SEAL_DERIVED".into(),
            KekMode::AdminProvisioned => "ADMIN_PROVISIONED".into(),
        },
        crypto_path: match state.config.crypto_path {
            CryptoPath::Enclave => "ENCLAVE".into(),
            CryptoPath::PassThrough => "PASS_THROUGH".into(),
        },
        kek_check_value: check,
        mr_enclave: id.mr_enclave,
        mr_signer: id.mr_signer,
        isv_svn: id.isv_svn,
    })
}

pub async fn v1_store(State(state): Shared, headers: HeaderMap, body: Bytes) -> ApiResult<Json<SecretRef>> {
    let project = project_of(&state, &headers)?;
    let req: V1StoreRequest = parse_json(&body)?;
    let tag = format!("token:{project}");
    let secret_ref = match &state.backend {
        Backend::Enclave(core) => core.legacy_store(&project, &req.payload, &req.name, &req.content_type, &tag)?,
        Backend::PassThrough(pt) => pt.store_secret(&project, &req.payload, &req.name, &req.content_type, &tag)?,
    };
    Ok(Json(SecretRef { secret_ref }))
}

pub async fn v1_get(
    State(state): Shared,
    headers: HeaderMap,
    Path(secret_ref): Path<String>,
) -> ApiResult<Json<V1GetResponse>> {
    let project = project_of(&state, &headers)?;
    let plain = match &state.backend {
        Backend::Enclave(core) => core.legacy_retrieve(&secret_ref, &project)?,
        Backend::PassThrough(pt) => pt.retrieve_secret(&secret_ref, &project)?,
    };
    Ok(Json(V1GetResponse { payload: plain.to_vec() }))
}

pub async fn attest_start(State(state): Shared, headers: HeaderMap) -> ApiResult<Response> {
    let who = caller(&state, &headers)?;
    core(&state)?;
    state.expire_handshakes();
    let (session, msg1) = attestation::responder_start(&state.enclave, &mut OsRng);
    let session_id = session.session_id();
    let hs = Handshake { forward: session, reverse: None, caller: who, last_used: Instant::now() };
    state.handshakes.lock().unwrap().insert(session_id, Arc::new(tokio::sync::Mutex::new(hs)));
    let cookie = format!("{}={}; Path=/", COOKIE_NAME, state.config.instance_id);
    let mut resp = Json(StartResponse { session_id, msg1: msg1.into() }).into_response();
    resp.headers_mut().insert(header::SET_COOKIE, HeaderValue::from_str(&cookie).expect("instance id is a token"));
    Ok(resp)
}

pub async fn attest_msg2(State(state): Shared, body: Bytes) -> ApiResult<Json<Msg3Response>> {
    core(&state)?;
    let msg2: Msg2 = parse_message(parse_json(&body)?)?;
    let enclave = state.enclave.clone();
    let msg3 = with_handshake(&state, &msg2.session_id, |hs| {
        Ok(attestation::responder_process_msg2(&mut hs.forward, &msg2, &enclave)?)
    })
    .await?;
    Ok(Json(Msg3Response { msg3: msg3.into() }))
}

enum Msg4Outcome {
    Rejected,
    RaDone { sk: [u8; 16], project: Option<String> },
    ReverseStarted(Msg2),
}

pub async fn attest_msg4(State(state): Shared, body: Bytes) -> ApiResult<Json<Msg4Response>> {
    let core = core(&state)?.clone();
    let msg4: Msg4 = parse_message(parse_json(&body)?)?;
    let id = msg4.session_id;
    let outcome = with_handshake(&state, &id, |hs| {
        match attestation::responder_process_msg4(&mut hs.forward, &msg4) {
            Ok(()) => {}
            Err(AttestError::Rejected) => return Ok(Msg4Outcome::Rejected),
            Err(e) => return Err(e.into()),
        }
        match (&msg4.client_msg1, &hs.caller) {
            (None, Caller::Admin) => Ok(Msg4Outcome::RaDone { sk: session_key(&hs.forward), project: None }),
            (None, Caller::Project(p)) => {
                Ok(Msg4Outcome::RaDone { sk: session_key(&hs.forward), project: Some(p.clone()) })
            }
            (Some(_), Caller::Admin) => {
                Err(ApiError::new(StatusCode::FORBIDDEN, "forbidden", "admin sessions use remote attestation only"))
            }
            (Some(m1), Caller::Project(_)) => {
                let (reverse, msg2) = attestation::challenger_process_msg1(m1, &mut OsRng)?;
                hs.reverse = Some(reverse);
                Ok(Msg4Outcome::ReverseStarted(msg2))
            }
        }
    })
    .await?;
    match outcome {
        Msg4Outcome::Rejected => {
            forget(&state, &id);
            Ok(Json(Msg4Response { status: Status::Rejected, msg2: None }))
        }
        // Admin sessions stay local: they exist to provision a KEK, which
        // may not be there yet to protect them at rest.
        Msg4Outcome::RaDone { project: None, .. } => Ok(Json(Msg4Response { status: Status::Ok, msg2: None })),
        Msg4Outcome::RaDone { sk, project: Some(project) } => {
            forget(&state, &id);
            core.persist_session(&id, &project, Mode::Ra, None, &sk)?;
            Ok(Json(Msg4Response { status: Status::Ok, msg2: None }))
        }
        Msg4Outcome::ReverseStarted(msg2) => Ok(Json(Msg4Response { status: Status::Ok, msg2: Some(msg2.into()) })),
    }
}

fn session_key(s: &AttestationSession) -> [u8; 16] {
    s.session_key().expect("established session has a key")
}

pub async fn attest_ma_msg3(State(state): Shared, body: Bytes) -> ApiResult<Json<MaMsg3Response>> {
    let core = core(&state)?.clone();
    let req: MaMsg3Request = parse_json(&body)?;
    let msg3: Msg3 = parse_message(req.msg3)?;
    let s_msg4: SMsg4 = parse_message(req.s_msg4)?;
    let authorities = state.authorities.clone();
    let id = req.session_id;
    let c_msg4: CMsg4 = with_handshake(&state, &id, |hs| {
        let Caller::Project(project) = hs.caller.clone() else {
            return Err(ApiError::new(StatusCode::FORBIDDEN, "forbidden", "admin sessions cannot use MA"));
        };
        let reverse = hs
            .reverse
            .as_mut()
            .ok_or_else(|| ApiError::from(AttestError::Protocol("reverse attestation was not opened".into())))?;
        attestation::challenger_process_msg3(reverse, &msg3, &authorities, None)?;
        let claim = attestation::server_open_s_msg4(&mut hs.forward, &s_msg4, reverse)?;
        if claim.project_id != project {
            return Err(ApiError::new(StatusCode::FORBIDDEN, "forbidden", "s_msg4 names a different project"));
        }
        let sk = core.ma_session_key(&project, &claim.client_identity)?;
        let c_msg4 = attestation::server_build_c_msg4(&mut hs.forward, *sk, &mut OsRng)?;
        core.persist_session(&id, &project, Mode::Ma, Some(claim.client_identity), &sk)?;
        Ok(c_msg4)
    })
    .await?;
    forget(&state, &id);
    Ok(Json(MaMsg3Response { c_msg4: c_msg4.into() }))
}

pub async fn provision_kek(State(state): Shared, body: Bytes) -> ApiResult<Json<StatusResponse>> {
    let core = core(&state)?.clone();
    let req: KekRequest = parse_json(&body)?;
    let non_admin = || ApiError::new(StatusCode::FORBIDDEN, "non-admin", "KEK provisioning needs an admin session");
    let Ok(entry) = handshake(&state, &req.session_id) else {
        return Err(match core.load_session(&req.session_id.to_hex()) {
            Ok(_) => non_admin(),
            Err(_) => ApiError::unknown_session(),
        });
    };
    let Ok(mut hs) = entry.try_lock() else {
        return Err(ApiError::busy());
    };
    hs.last_used = Instant::now();
    if hs.caller != Caller::Admin {
        return Err(non_admin());
    }
    if !hs.forward.is_established() {
        return Err(AttestError::Protocol("handshake not complete".into()).into());
    }
    core.provision_kek(&req.sk_kek, &hs.forward, req.overwrite)?;
    drop(hs);
    forget(&state, &req.session_id);
    Ok(Json(StatusResponse { status: "OK".into() }))
}

fn load_session(core: &TrustedCore, id: &SessionId) -> ApiResult<barbie_core::kms::SessionContext> {
    Ok(core.load_session(&id.to_hex())?)
}

pub async fn set_policy(State(state): Shared, body: Bytes) -> ApiResult<Json<PolicyResponse>> {
    let core = core(&state)?;
    let req: PolicyRequest = parse_json(&body)?;
    let ctx = load_session(core, &req.session_id)?;
    let record = core.set_policy(&ctx, req.policy, req.child_mrenclaves)?;
    Ok(Json(PolicyResponse {
        status: "OK".into(),
        policy: record.policy_no,
        child_mrenclaves: record.child_mr_enclaves,
    }))
}

pub async fn v2_store(State(state): Shared, body: Bytes) -> ApiResult<Json<SecretRef>> {
    let core = core(&state)?;
    let req: V2StoreRequest = parse_json(&body)?;
    let ctx = load_session(core, &req.session_id)?;
    let secret_ref = core.store_secret(&ctx, &req.sk_secret, &req.name, &req.content_type)?;
    Ok(Json(SecretRef { secret_ref }))
}

#[derive(Deserialize)]
pub struct SessionQuery {
    session_id: Option<String>,
}

pub async fn v2_get(
    State(state): Shared,
    Path(secret_ref): Path<String>,
    Query(q): Query<SessionQuery>,
) -> ApiResult<Json<V2GetResponse>> {
    let core = core(&state)?;
    let id = q
        .session_id
        .as_deref()
        .and_then(wire::parse_session_id)
        .ok_or(KmsError::AttestationRequired)?;
    let ctx = load_session(core, &id)?;
    let sk_secret = core.retrieve_secret(&secret_ref, &ctx)?;
    Ok(Json(V2GetResponse { sk_secret }))
}
