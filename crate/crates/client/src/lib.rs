// SPDX-License-Identifier: Apache-2.0

//! Clients for the BarbiE key manager.
//!
//! * `LEGACY` talks to the v1 API with a token and plaintext payloads.
//! * `AWARE` runs remote attestation, checks the server quote against an
//!   identity predicate and uses the DH-derived session key.
//! * `ENABLED` owns a (simulated) enclave and runs mutual attestation; the
//!   session key is the one the server enclave hands out in `c_msg4`.
//! * `ADMIN` runs remote attestation with the admin token to provision a KEK.
//!
//! The `barbie_node` cookie from `/v2/attest/start` is replayed on every
//! handshake request so a sticky load balancer keeps the handshake on one
//! instance. Data-plane calls do not need it.

pub mod bench;
pub mod transport;

use std::sync::{Arc, Mutex};

use barbie_core::attestation::{
    self, AttestError, CMsg4, IdentityPredicate, Message, Msg3, SessionId, Status,
};
use barbie_core::crypto;
use barbie_core::enclave::{AuthorityKey, Digest, EnclaveHandle, EnclaveIdentity};
use barbie_core::kms::{Policy, SK_KEK_AAD, SK_SECRET_AAD};
use barbie_core::wire::*;
use rand::rngs::OsRng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use zeroize::Zeroizing;

pub use transport::{HttpRequest, HttpResponse, HyperTransport, Interceptor, Transport, TransportError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ClientMode {
    Legacy,
    Aware,
    Enabled,
    Admin,
}

impl std::str::FromStr for ClientMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "legacy" => Ok(ClientMode::Legacy),
            "aware" => Ok(ClientMode::Aware),
            "enabled" => Ok(ClientMode::Enabled),
            "admin" => Ok(ClientMode::Admin),
            other => Err(format!("unknown mode {other:?} (legacy, aware, enabled, admin)")),
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ClientError {
    #[error("transport: {0}")]
    Transport(#[from] TransportError),
    #[error("server returned {status} {code}: {reason}")]
    Http { status: u16, code: String, reason: String },
    #[error("attestation: {0}")]
    Attestation(#[from] AttestError),
    #[error("invalid response: {0}")]
    InvalidResponse(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("operation needs mode {0:?}")]
    WrongMode(ClientMode),
}

impl ClientError {
    /// CLI exit code: 2 protocol or attestation failure, 3 access denied, 4 transport.
    pub fn exit_code(&self) -> u8 {
        match self {
            ClientError::Transport(_) => 4,
            ClientError::Http { status: 401 | 403 | 428, .. } => 3,
            _ => 2,
        }
    }

    /// Server error code, or a local one in the same vocabulary.
    pub fn code(&self) -> &str {
        match self {
            ClientError::Http { code, .. } => code,
            ClientError::Transport(_) => "transport",
            ClientError::Attestation(e) => match e {
                AttestError::UnknownSession => "unknown-session",
                AttestError::Busy => "busy",
                AttestError::Protocol(_) => "protocol-error",
                AttestError::HandshakeFailed => "handshake-failed",
                AttestError::AttestationFailed => "attestation-failed",
                AttestError::BindingFailed => "binding-failed",
                AttestError::IdentityRejected => "identity-rejected",
                AttestError::Rejected => "rejected",
                AttestError::MutualAttestationFailed(_) => "mutual-attestation-failed",
            },
            ClientError::InvalidResponse(_) => "protocol-error",
            ClientError::InvalidArgument(_) | ClientError::WrongMode(_) => "invalid-argument",
        }
    }

    pub fn reason(&self) -> Option<&str> {
        match self {
            ClientError::Http { reason, .. } => Some(reason),
            _ => None,
        }
    }

    pub fn status(&self) -> Option<u16> {
        match self {
            ClientError::Http { status, .. } => Some(*status),
            _ => None,
        }
    }
}

pub type Result<T, E = ClientError> = std::result::Result<T, E>;

#[derive(Clone)]
pub struct ClientProfile {
    pub mode: ClientMode,
    pub server_url: String,
    pub token: String,
    pub project_id: String,
    /// Predicate the server quote must satisfy (AWARE, ENABLED, ADMIN).
    pub expected_server: Option<IdentityPredicate>,
    /// Quoting authorities trusted for server quotes.
    pub authorities: Vec<AuthorityKey>,
    /// The client's own enclave (ENABLED only).
    pub local_enclave: Option<EnclaveHandle>,
    /// Replay the sticky cookie on handshake requests.
    pub use_cookie: bool,
}

impl ClientProfile {
    pub fn new(mode: ClientMode, server_url: impl Into<String>, token: impl Into<String>) -> Self {
        ClientProfile {
            mode,
            server_url: server_url.into().trim_end_matches('/').to_owned(),
            token: token.into(),
            project_id: String::new(),
            expected_server: None,
            authorities: Vec::new(),
            local_enclave: None,
            use_cookie: true,
        }
    }

    pub fn project(mut self, project_id: impl Into<String>) -> Self {
        self.project_id = project_id.into();
        self
    }

    pub fn expect_server(mut self, predicate: IdentityPredicate) -> Self {
        self.expected_server = Some(predicate);
        self
    }

    pub fn authority(mut self, key: AuthorityKey) -> Self {
        self.authorities.push(key);
        self
    }

    pub fn enclave(mut self, enclave: EnclaveHandle) -> Self {
        self.local_enclave = Some(enclave);
        self
    }
}

/// An established session. The key never leaves the client.
#[derive(Clone)]
pub struct Session {
    pub session_id: SessionId,
    pub mode: ClientMode,
    pub server_identity: EnclaveIdentity,
    /// The sticky cookie value received on `/v2/attest/start`.
    pub node: Option<String>,
    sk: Zeroizing<[u8; 16]>,
}

impl std::fmt::Debug for Session {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Session")
            .field("session_id", &self.session_id)
            .field("mode", &self.mode)
            .field("node", &self.node)
            .finish_non_exhaustive()
    }
}

impl Session {
    pub fn session_key(&self) -> &[u8; 16] {
        &self.sk
    }
}

/// Sharing policy sent with `set_policy` or `store_secret`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Acl {
    pub policy: Policy,
    pub children: Vec<Digest>,
}

pub struct Client {
    profile: ClientProfile,
    transport: Arc<dyn Transport>,
    cookie: Mutex<Option<String>>,
}

fn cookie_value(resp: &HttpResponse) -> Option<String> {
    resp.headers_named("set-cookie").find_map(|c| {
        let first = c.split(';').next()?.trim();
        let (k, v) = first.split_once('=')?;
        (k.trim() == COOKIE_NAME).then(|| v.trim().to_owned())
    })
}

impl Client {
    pub fn new(profile: ClientProfile) -> Self {
        Self::with_transport(profile, Arc::new(HyperTransport::default()))
    }

    pub fn with_transport(profile: ClientProfile, transport: Arc<dyn Transport>) -> Self {
        Client { profile, transport, cookie: Mutex::new(None) }
    }

    pub fn profile(&self) -> &ClientProfile {
        &self.profile
    }

    fn url(&self, path: &str) -> String {
        format!("{}{}", self.profile.server_url, path)
    }

    async fn exchange<T: DeserializeOwned>(&self, req: HttpRequest) -> Result<T> {
        let resp = self.transport.send(req).await?;
        Self::decode(resp)
    }

    fn decode<T: DeserializeOwned>(resp: HttpResponse) -> Result<T> {
        if !(200..300).contains(&resp.status) {
            let body: Option<barbie_core_error::ErrorBody> = serde_json::from_slice(&resp.body).ok();
            let (code, reason) = body.map_or_else(
                || (format!("http-{}", resp.status), String::from_utf8_lossy(&resp.body).into_owned()),
                |b| (b.error, b.reason),
            );
            return Err(ClientError::Http { status: resp.status, code, reason });
        }
        serde_json::from_slice(&resp.body).map_err(|e| ClientError::InvalidResponse(e.to_string()))
    }

    fn post<B: Serialize>(&self, path: &str, body: &B) -> HttpRequest {
        HttpRequest::post_json(self.url(path), serde_json::to_vec(body).expect("request serializes"))
    }

    fn handshake_request(&self, mut req: HttpRequest) -> HttpRequest {
        if self.profile.use_cookie {
            if let Some(node) = self.cookie.lock().unwrap().as_ref() {
                req = req.header("cookie", format!("{COOKIE_NAME}={node}"));
            }
        }
        req
    }

    fn require(&self, modes: &[ClientMode]) -> Result<()> {
        if modes.contains(&self.profile.mode) {
            Ok(())
        } else {
            Err(ClientError::WrongMode(modes[0]))
        }
    }

    pub async fn health(&self) -> Result<Health> {
        self.exchange(HttpRequest::get(self.url("/health"))).await
    }

    pub async fn legacy_store(&self, name: &str, plaintext: &[u8]) -> Result<String> {
        self.require(&[ClientMode::Legacy])?;
        let body = V1StoreRequest { payload: plaintext.to_vec(), name: name.into(), content_type: "text/plain".into() };
        let req = self.post("/v1/secrets", &body).header(AUTH_HEADER, &self.profile.token);
        Ok(self.exchange::<SecretRef>(req).await?.secret_ref)
    }

    pub async fn legacy_get(&self, secret_ref: &str) -> Result<Vec<u8>> {
        self.require(&[ClientMode::Legacy])?;
        let req = HttpRequest::get(self.url(&format!("/v1/secrets/{secret_ref}"))).header(AUTH_HEADER, &self.profile.token);
        Ok(self.exchange::<V1GetResponse>(req).await?.payload)
    }

    /// Runs RA (AWARE, ADMIN) or MA (ENABLED) and returns the session.
    pub async fn attest(&self) -> Result<Session> {
        self.require(&[ClientMode::Aware, ClientMode::Enabled, ClientMode::Admin])?;
        if self.profile.mode == ClientMode::Enabled && self.profile.local_enclave.is_none() {
            return Err(ClientError::InvalidArgument("ENABLED mode needs a local enclave".into()));
        }
        *self.cookie.lock().unwrap() = None;

        let req = HttpRequest::post_json(self.url("/v2/attest/start"), b"{}".to_vec())
            .header(AUTH_HEADER, &self.profile.token);
        let resp = self.transport.send(req).await?;
        let node = cookie_value(&resp);
        *self.cookie.lock().unwrap() = node.clone();
        let start: StartResponse = Self::decode(resp)?;
        let msg1 = attestation::Msg1::try_from(start.msg1)?;
        if msg1.session_id != start.session_id {
            return Err(ClientError::InvalidResponse("msg1 session id differs from session_id".into()));
        }
        let (mut chal, msg2) = attestation::challenger_process_msg1(&msg1, &mut OsRng)?;

        let req = self.handshake_request(self.post("/v2/attest/msg2", &Message::from(msg2)));
        let reply: Msg3Response = self.exchange(req).await?;
        let msg3 = Msg3::try_from(reply.msg3)?;
        let verified = attestation::challenger_process_msg3(
            &mut chal,
            &msg3,
            &self.profile.authorities,
            self.profile.expected_server.as_ref(),
        );
        let mut msg4 = match verified {
            Ok(m) => m,
            Err(e) => {
                // Tell the server; the handshake is over either way.
                let reject = self.handshake_request(self.post("/v2/attest/msg4", &Message::from(chal.rejection())));
                let _ = self.transport.send(reject).await;
                return Err(e.into());
            }
        };
        let server_identity = chal.peer_identity().expect("established session has a peer");

        if self.profile.mode != ClientMode::Enabled {
            let req = self.handshake_request(self.post("/v2/attest/msg4", &Message::from(msg4)));
            let reply: Msg4Response = self.exchange(req).await?;
            if reply.status != Status::Ok {
                return Err(AttestError::Rejected.into());
            }
            let sk = chal.session_key().expect("established");
            return Ok(Session {
                session_id: chal.session_id(),
                mode: self.profile.mode,
                server_identity,
                node,
                sk: Zeroizing::new(sk),
            });
        }

        let enclave = self.profile.local_enclave.as_ref().expect("checked above");
        let (mut reverse, client_msg1) = attestation::responder_start(enclave, &mut OsRng);
        msg4.client_msg1 = Some(client_msg1);
        let req = self.handshake_request(self.post("/v2/attest/msg4", &Message::from(msg4)));
        let reply: Msg4Response = self.exchange(req).await?;
        let server_msg2 = match (reply.status, reply.msg2) {
            (Status::Ok, Some(m)) => attestation::Msg2::try_from(m)?,
            _ => return Err(ClientError::InvalidResponse("server did not open the reverse attestation".into())),
        };
        let client_msg3 = attestation::responder_process_msg2(&mut reverse, &server_msg2, enclave)?;
        let s_msg4 = attestation::client_build_s_msg4(&mut chal, &reverse, &self.profile.project_id, &mut OsRng)?;
        let body = MaMsg3Request {
            session_id: chal.session_id(),
            msg3: client_msg3.into(),
            s_msg4: s_msg4.into(),
        };
        let req = self.handshake_request(self.post("/v2/attest/ma_msg3", &body));
        let reply: MaMsg3Response = self.exchange(req).await?;
        let c_msg4 = CMsg4::try_from(reply.c_msg4)?;
        let sk = attestation::client_process_c_msg4(&mut chal, &c_msg4)?;
        Ok(Session { session_id: chal.session_id(), mode: ClientMode::Enabled, server_identity, node, sk: Zeroizing::new(sk) })
    }

    /// Sends `kek_hex` (64 hex characters) encrypted under the admin session key.
    pub async fn provision_kek(&self, session: &Session, kek_hex: &str, overwrite: bool) -> Result<()> {
        self.require(&[ClientMode::Admin])?;
        let kek = Zeroizing::new(parse_kek_hex(kek_hex)?);
        let sk_kek = crypto::aead_seal(session.session_key(), kek.as_ref(), SK_KEK_AAD, &mut OsRng);
        let body = KekRequest { session_id: session.session_id, sk_kek, overwrite };
        let req = self.handshake_request(self.post("/v2/kek", &body));
        let reply: StatusResponse = self.exchange(req).await?;
        if reply.status != "OK" {
            return Err(ClientError::InvalidResponse(format!("status {}", reply.status)));
        }
        Ok(())
    }

    pub async fn set_policy(&self, session: &Session, acl: &Acl) -> Result<PolicyResponse> {
        self.require(&[ClientMode::Aware, ClientMode::Enabled])?;
        let body = PolicyRequest {
            session_id: session.session_id,
            policy: acl.policy,
            child_mrenclaves: acl.children.clone(),
        };
        self.exchange(self.post("/v2/policy", &body)).await
    }

    /// Encrypts under the session key and stores; sets `acl` first when given.
    pub async fn store_secret(
        &self,
        session: &Session,
        name: &str,
        plaintext: &[u8],
        acl: Option<&Acl>,
    ) -> Result<String> {
        self.require(&[ClientMode::Aware, ClientMode::Enabled])?;
        if let Some(acl) = acl {
            self.set_policy(session, acl).await?;
        }
        let body = V2StoreRequest {
            session_id: session.session_id,
            sk_secret: crypto::aead_seal(session.session_key(), plaintext, SK_SECRET_AAD, &mut OsRng),
            name: name.into(),
            content_type: "application/octet-stream".into(),
        };
        Ok(self.exchange::<SecretRef>(self.post("/v2/secrets", &body)).await?.secret_ref)
    }

    pub async fn get_secret(&self, session: &Session, secret_ref: &str) -> Result<Vec<u8>> {
        self.require(&[ClientMode::Aware, ClientMode::Enabled])?;
        let url = self.url(&format!("/v2/secrets/{secret_ref}?session_id={}", session.session_id.to_hex()));
        let reply: V2GetResponse = self.exchange(HttpRequest::get(url)).await?;
        crypto::aead_open(session.session_key(), &reply.sk_secret, SK_SECRET_AAD)
            .map_err(|_| ClientError::InvalidResponse("sk_secret does not decrypt under the session key".into()))
    }
}

pub fn parse_kek_hex(kek_hex: &str) -> Result<[u8; 32]> {
    let mut kek = [0u8; 32];
    if kek_hex.len() != 64 {
        return Err(ClientError::InvalidArgument(format!("KEK must be 64 hex characters, got {}", kek_hex.len())));
    }
    hex::decode_to_slice(kek_hex, &mut kek).map_err(|e| ClientError::InvalidArgument(format!("KEK: {e}")))?;
    Ok(kek)
}

mod barbie_core_error {
    use serde::Deserialize;

    #[derive(Deserialize)]
    pub struct ErrorBody {
        pub error: String,
        #[serde(default)]
        pub reason: String,
    }
}
