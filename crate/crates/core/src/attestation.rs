// SPDX-License-Identifier: Apache-2.0

//! Sigma-style Diffie-Hellman remote attestation.
//!
//! Remote attestation (RA), responder = attested enclave, challenger = verifier:
//!
//! ```text
//! responder                                   challenger
//!   responder_start           -- Msg1 -->       challenger_process_msg1
//!   responder_process_msg2    <-- Msg2 --
//!                             -- Msg3 -->       challenger_process_msg3
//!   responder_process_msg4    <-- Msg4 --
//! ```
//!
//! Mutual attestation (MA) runs RA with the client as challenger, then a
//! reverse RA with the server as challenger. The client's reverse `Msg1`
//! travels inside the forward `Msg4`. Once the client has produced its reverse
//! `Msg3` it builds [`SMsg4`] (nonce, hash over both reports, project id, all
//! under `mk`); the server answers with [`CMsg4`] carrying the nonce and the
//! session key the client must use from then on.
//!
//! Key schedule: X25519 shared secret -> HKDF-SHA-256 with info labels
//! `SMK`, `SK`, `MK`, `VK`, 16 bytes each.

use std::fmt;

use rand::{CryptoRng, RngCore};
use serde::{Deserialize, Serialize};
use subtle::ConstantTimeEq;
use thiserror::Error;
use x25519_dalek::{PublicKey, StaticSecret};
use zeroize::{Zeroize, ZeroizeOnDrop};

use crate::crypto::{self, b64};
use crate::enclave::{
    self, create_report, pad_report_data, quote_report, AuthorityKey, Digest, EnclaveHandle,
    EnclaveIdentity, Quote, Report,
};

pub const NONCE_LEN: usize = 16;
pub const SK_LEN: usize = 16;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum AttestError {
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("handshake failed: message authentication")]
    HandshakeFailed,
    #[error("unknown session")]
    UnknownSession,
    #[error("attestation failed")]
    AttestationFailed,
    #[error("report data does not bind the handshake")]
    BindingFailed,
    #[error("peer identity rejected")]
    IdentityRejected,
    #[error("peer rejected the attestation")]
    Rejected,
    #[error("mutual attestation failed: {0}")]
    MutualAttestationFailed(String),
    #[error("session busy")]
    Busy,
}

fn protocol(msg: impl Into<String>) -> AttestError {
    AttestError::Protocol(msg.into())
}

#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SessionId(#[serde(with = "b64::array")] pub [u8; 16]);

impl SessionId {
    pub fn random<R: RngCore + CryptoRng + ?Sized>(rng: &mut R) -> Self {
        SessionId(crypto::random_array(rng))
    }

    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }

    pub fn to_base64(&self) -> String {
        b64::encode(&self.0)
    }

    pub fn from_base64(s: &str) -> Option<Self> {
        b64::decode(s).ok()?.try_into().ok().map(SessionId)
    }
}

impl fmt::Debug for SessionId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "SessionId({})", self.to_hex())
    }
}

impl fmt::Display for SessionId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_base64())
    }
}

#[derive(Clone, PartialEq, Eq, Zeroize, ZeroizeOnDrop)]
pub struct SessionKeys {
    pub smk: [u8; 16],
    pub sk: [u8; 16],
    pub mk: [u8; 16],
    pub vk: [u8; 16],
}

impl fmt::Debug for SessionKeys {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("SessionKeys(..)")
    }
}

pub fn derive_session_keys(shared_secret: &[u8]) -> SessionKeys {
    SessionKeys {
        smk: crypto::hkdf_sha256(None, shared_secret, b"SMK"),
        sk: crypto::hkdf_sha256(None, shared_secret, b"SK"),
        mk: crypto::hkdf_sha256(None, shared_secret, b"MK"),
        vk: crypto::hkdf_sha256(None, shared_secret, b"VK"),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Role {
    Challenger,
    Responder,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum HandshakeState {
    Started,
    Msg1Sent,
    Msg2Sent,
    Msg3Sent,
    Established,
    Failed,
}

/// Constraints a verifier places on the attested peer.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct IdentityPredicate {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mr_enclave: Option<Digest>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mr_signer: Option<Digest>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub min_isv_svn: Option<u16>,
}

impl IdentityPredicate {
    pub fn mr_enclave(d: Digest) -> Self {
        IdentityPredicate { mr_enclave: Some(d), ..Default::default() }
    }

    pub fn matches(&self, id: &EnclaveIdentity) -> bool {
        self.mr_enclave.map_or(true, |m| m == id.mr_enclave)
            && self.mr_signer.map_or(true, |s| s == id.mr_signer)
            && self.min_isv_svn.map_or(true, |v| id.isv_svn >= v)
    }
}

// ---------------------------------------------------------------------------
// Wire messages

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Msg1 {
    pub session_id: SessionId,
    #[serde(with = "b64")]
    pub g_a: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Msg2 {
    pub session_id: SessionId,
    #[serde(with = "b64")]
    pub g_b: Vec<u8>,
    #[serde(with = "b64")]
    pub mac: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Msg3 {
    pub session_id: SessionId,
    #[serde(with = "b64")]
    pub quote: Vec<u8>,
    #[serde(with = "b64")]
    pub mac: Vec<u8>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Status {
    Ok,
    Rejected,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Msg4 {
    pub session_id: SessionId,
    pub status: Status,
    /// Present when the challenger opens a mutual attestation: its own
    /// enclave's `Msg1` for the reverse RA.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub client_msg1: Option<Msg1>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SMsg4 {
    pub session_id: SessionId,
    #[serde(with = "b64")]
    pub payload: Vec<u8>,
    pub client_msg1: Msg1,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CMsg4 {
    pub session_id: SessionId,
    #[serde(with = "b64")]
    pub payload: Vec<u8>,
}

/// Tagged wire form of every handshake message (`"type": "msg1"`, ...).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Message {
    Msg1(Msg1),
    Msg2(Msg2),
    Msg3(Msg3),
    Msg4(Msg4),
    SMsg4(SMsg4),
    CMsg4(CMsg4),
}

impl Message {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("messages serialize")
    }

    pub fn from_json(s: &[u8]) -> Result<Self, AttestError> {
        serde_json::from_slice(s).map_err(|e| protocol(format!("malformed message: {e}")))
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Message::Msg1(_) => "msg1",
            Message::Msg2(_) => "msg2",
            Message::Msg3(_) => "msg3",
            Message::Msg4(_) => "msg4",
            Message::SMsg4(_) => "s_msg4",
            Message::CMsg4(_) => "c_msg4",
        }
    }
}

macro_rules! message_conversions {
    ($($ty:ident),*) => {$(
        impl From<$ty> for Message {
            fn from(m: $ty) -> Self {
                Message::$ty(m)
            }
        }

        impl TryFrom<Message> for $ty {
            type Error = AttestError;

            fn try_from(m: Message) -> Result<Self, AttestError> {
                match m {
                    Message::$ty(inner) => Ok(inner),
                    other => Err(protocol(format!(
                        "expected {}, got {}",
                        stringify!($ty).to_lowercase(),
                        other.kind()
                    ))),
                }
            }
        }

        impl $ty {
            pub fn to_json(&self) -> String {
                Message::from(self.clone()).to_json()
            }

            pub fn from_json(s: &[u8]) -> Result<Self, AttestError> {
                Message::from_json(s)?.try_into()
            }
        }
    )*};
}

message_conversions!(Msg1, Msg2, Msg3, Msg4, SMsg4, CMsg4);

// ---------------------------------------------------------------------------
// Session state machine

pub struct AttestationSession {
    session_id: SessionId,
    role: Role,
    ephemeral_dh: StaticSecret,
    own_dh_public: [u8; 32],
    peer_dh_public: Option<[u8; 32]>,
    keys: Option<SessionKeys>,
    state: HandshakeState,
    own_identity: Option<EnclaveIdentity>,
    own_report: Option<Report>,
    peer_report: Option<Report>,
    nonce: Option<[u8; NONCE_LEN]>,
    project_id: Option<String>,
    /// Key protecting traffic after the handshake: the DH-derived `sk`
    /// after RA, replaced by the server-issued key after MA.
    active_sk: Option<[u8; SK_LEN]>,
}

impl fmt::Debug for AttestationSession {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("AttestationSession")
            .field("session_id", &self.session_id)
            .field("role", &self.role)
            .field("state", &self.state)
            .field("project_id", &self.project_id)
            .finish_non_exhaustive()
    }
}

impl Drop for AttestationSession {
    fn drop(&mut self) {
        if let Some(sk) = self.active_sk.as_mut() {
            sk.zeroize();
        }
    }
}

impl AttestationSession {
    fn new<R: RngCore + CryptoRng + ?Sized>(session_id: SessionId, role: Role, rng: &mut R) -> Self {
        let mut seed = [0u8; 32];
        rng.fill_bytes(&mut seed);
        let ephemeral_dh = StaticSecret::from(seed);
        seed.zeroize();
        let own_dh_public = PublicKey::from(&ephemeral_dh).to_bytes();
        AttestationSession {
            session_id,
            role,
            ephemeral_dh,
            own_dh_public,
            peer_dh_public: None,
            keys: None,
            state: HandshakeState::Started,
            own_identity: None,
            own_report: None,
            peer_report: None,
            nonce: None,
            project_id: None,
            active_sk: None,
        }
    }

    pub fn session_id(&self) -> SessionId {
        self.session_id
    }

    pub fn role(&self) -> Role {
        self.role
    }

    pub fn state(&self) -> HandshakeState {
        self.state
    }

    pub fn is_established(&self) -> bool {
        self.state == HandshakeState::Established
    }

    pub fn keys(&self) -> Option<&SessionKeys> {
        self.keys.as_ref()
    }

    /// The session key currently protecting application traffic.
    pub fn session_key(&self) -> Option<[u8; SK_LEN]> {
        match self.state {
            HandshakeState::Established => self.active_sk,
            _ => None,
        }
    }

    pub fn own_dh_public(&self) -> [u8; 32] {
        self.own_dh_public
    }

    pub fn peer_dh_public(&self) -> Option<[u8; 32]> {
        self.peer_dh_public
    }

    pub fn own_report(&self) -> Option<&Report> {
        self.own_report.as_ref()
    }

    pub fn peer_report(&self) -> Option<&Report> {
        self.peer_report.as_ref()
    }

    pub fn peer_identity(&self) -> Option<EnclaveIdentity> {
        self.peer_report.as_ref().map(|r| r.identity)
    }

    pub fn own_identity(&self) -> Option<EnclaveIdentity> {
        self.own_identity
    }

    pub fn nonce(&self) -> Option<[u8; NONCE_LEN]> {
        self.nonce
    }

    pub fn project_id(&self) -> Option<&str> {
        self.project_id.as_deref()
    }

    /// The responder's opening message, reproducible at any time.
    pub fn msg1(&self) -> Msg1 {
        Msg1 { session_id: self.session_id, g_a: self.own_dh_public.to_vec() }
    }

    /// The `Msg4` a challenger sends after a failed `Msg3` check.
    pub fn rejection(&self) -> Msg4 {
        Msg4 { session_id: self.session_id, status: Status::Rejected, client_msg1: None }
    }

    fn fail(&mut self, err: AttestError) -> AttestError {
        self.state = HandshakeState::Failed;
        err
    }

    fn expect(&self, role: Role, state: HandshakeState, id: SessionId) -> Result<(), AttestError> {
        if id != self.session_id {
            return Err(AttestError::UnknownSession);
        }
        if self.state == HandshakeState::Failed {
            return Err(protocol("session already failed"));
        }
        if self.role != role || self.state != state {
            return Err(protocol(format!(
                "unexpected message for {:?} session in state {:?}",
                self.role, self.state
            )));
        }
        Ok(())
    }

    fn dh(&self, peer: &[u8]) -> Result<(SessionKeys, [u8; 32]), AttestError> {
        let peer: [u8; 32] =
            peer.try_into().map_err(|_| protocol("invalid group element encoding"))?;
        let shared = self.ephemeral_dh.diffie_hellman(&PublicKey::from(peer));
        if !shared.was_contributory() {
            return Err(protocol("invalid group element"));
        }
        Ok((derive_session_keys(shared.as_bytes()), peer))
    }
}

fn binding_report_data(g_a: &[u8], g_b: &[u8], vk: &[u8]) -> [u8; 64] {
    pad_report_data(&crypto::sha256(&[g_a, g_b, vk])).expect("32 bytes fit")
}

fn msg3_mac(smk: &[u8], session_id: &SessionId, quote: &[u8]) -> [u8; 32] {
    crypto::hmac_sha256(smk, &[&session_id.0, quote])
}

pub fn responder_start<R: RngCore + CryptoRng + ?Sized>(
    enclave: &EnclaveHandle,
    rng: &mut R,
) -> (AttestationSession, Msg1) {
    let mut session = AttestationSession::new(SessionId::random(rng), Role::Responder, rng);
    session.own_identity = Some(*enclave.identity());
    session.state = HandshakeState::Msg1Sent;
    let msg1 = session.msg1();
    (session, msg1)
}

pub fn challenger_process_msg1<R: RngCore + CryptoRng + ?Sized>(
    msg1: &Msg1,
    rng: &mut R,
) -> Result<(AttestationSession, Msg2), AttestError> {
    let mut session = AttestationSession::new(msg1.session_id, Role::Challenger, rng);
    let (keys, g_a) = session.dh(&msg1.g_a)?;
    let g_b = session.own_dh_public;
    let mac = crypto::hmac_sha256(&keys.smk, &[&g_b, &g_a]);
    session.peer_dh_public = Some(g_a);
    session.active_sk = Some(keys.sk);
    session.keys = Some(keys);
    session.state = HandshakeState::Msg2Sent;
    Ok((session, Msg2 { session_id: msg1.session_id, g_b: g_b.to_vec(), mac: mac.to_vec() }))
}

pub fn responder_process_msg2(
    session: &mut AttestationSession,
    msg2: &Msg2,
    enclave: &EnclaveHandle,
) -> Result<Msg3, AttestError> {
    session.expect(Role::Responder, HandshakeState::Msg1Sent, msg2.session_id)?;
    let (keys, g_b) = match session.dh(&msg2.g_b) {
        Ok(v) => v,
        Err(e) => return Err(session.fail(e)),
    };
    let g_a = session.own_dh_public;
    if !crypto::hmac_verify(&keys.smk, &[&g_b, &g_a], &msg2.mac) {
        return Err(session.fail(AttestError::HandshakeFailed));
    }
    let report_data = binding_report_data(&g_a, &g_b, &keys.vk);
    let report = create_report(enclave, &report_data).map_err(|e| session.fail(protocol(e.to_string())))?;
    let quote = quote_report(&report, enclave.platform())
        .map_err(|e| session.fail(protocol(e.to_string())))?
        .to_bytes();
    let mac = msg3_mac(&keys.smk, &session.session_id, &quote);
    session.peer_dh_public = Some(g_b);
    session.own_report = Some(report);
    session.active_sk = Some(keys.sk);
    session.keys = Some(keys);
    session.state = HandshakeState::Msg3Sent;
    Ok(Msg3 { session_id: session.session_id, quote, mac: mac.to_vec() })
}

/// Verifies the responder's quote; `authorities` lists the accepted quoting keys.
/// On error the session is FAILED and the caller should send [`AttestationSession::rejection`].
pub fn challenger_process_msg3(
    session: &mut AttestationSession,
    msg3: &Msg3,
    authorities: &[AuthorityKey],
    expected_identity: Option<&IdentityPredicate>,
) -> Result<Msg4, AttestError> {
    session.expect(Role::Challenger, HandshakeState::Msg2Sent, msg3.session_id)?;
    let keys = session.keys.as_ref().expect("keys exist after msg2");
    if !crypto::hmac_verify(&keys.smk, &[&msg3.session_id.0, &msg3.quote], &msg3.mac) {
        return Err(session.fail(AttestError::HandshakeFailed));
    }
    let quote = match Quote::from_bytes(&msg3.quote) {
        Ok(q) => q,
        Err(_) => return Err(session.fail(AttestError::AttestationFailed)),
    };
    let verified = authorities.iter().find_map(|a| enclave::verify_quote(&quote, a).ok());
    let Some(identity) = verified else {
        return Err(session.fail(AttestError::AttestationFailed));
    };
    let g_a = session.peer_dh_public.expect("peer public set after msg1");
    let expected = binding_report_data(&g_a, &session.own_dh_public, &keys.vk);
    if !bool::from(expected.ct_eq(&quote.report.report_data)) {
        return Err(session.fail(AttestError::BindingFailed));
    }
    if let Some(pred) = expected_identity {
        if !pred.matches(&identity) {
            return Err(session.fail(AttestError::IdentityRejected));
        }
    }
    session.peer_report = Some(quote.report);
    session.state = HandshakeState::Established;
    Ok(Msg4 { session_id: session.session_id, status: Status::Ok, client_msg1: None })
}

pub fn responder_process_msg4(session: &mut AttestationSession, msg4: &Msg4) -> Result<(), AttestError> {
    session.expect(Role::Responder, HandshakeState::Msg3Sent, msg4.session_id)?;
    match msg4.status {
        Status::Ok => {
            session.state = HandshakeState::Established;
            Ok(())
        }
        Status::Rejected => Err(session.fail(AttestError::Rejected)),
    }
}

// ---------------------------------------------------------------------------
// Mutual attestation

fn s_msg4_aad(id: &SessionId) -> Vec<u8> {
    [b"s_msg4".as_slice(), &id.0].concat()
}

fn c_msg4_aad(id: &SessionId) -> Vec<u8> {
    [b"c_msg4".as_slice(), &id.0].concat()
}

/// SHA-256 over client report then server report.
pub fn report_pair_hash(client: &Report, server: &Report) -> [u8; 32] {
    crypto::sha256(&[&client.to_bytes(), &server.to_bytes()])
}

/// Plaintext carried in [`SMsg4::payload`]:
/// `nonce (16) || report hash (32) || project_id length (u16 LE) || project_id`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SMsg4Plaintext {
    pub nonce: [u8; NONCE_LEN],
    pub report_hash: [u8; 32],
    pub project_id: String,
}

impl SMsg4Plaintext {
    pub fn encode(&self) -> Vec<u8> {
        let pid = self.project_id.as_bytes();
        let mut out = Vec::with_capacity(NONCE_LEN + 32 + 2 + pid.len());
        out.extend_from_slice(&self.nonce);
        out.extend_from_slice(&self.report_hash);
        out.extend_from_slice(&(pid.len() as u16).to_le_bytes());
        out.extend_from_slice(pid);
        out
    }

    pub fn decode(b: &[u8]) -> Result<Self, AttestError> {
        if b.len() < NONCE_LEN + 32 + 2 {
            return Err(protocol("s_msg4 payload too short"));
        }
        let len = u16::from_le_bytes([b[48], b[49]]) as usize;
        if b.len() != 50 + len {
            return Err(protocol("s_msg4 project id length mismatch"));
        }
        Ok(SMsg4Plaintext {
            nonce: b[..16].try_into().unwrap(),
            report_hash: b[16..48].try_into().unwrap(),
            project_id: String::from_utf8(b[50..].to_vec())
                .map_err(|_| protocol("project id is not utf-8"))?,
        })
    }
}

/// Client side, after the reverse RA produced its report: commits to both
/// reports and the project. `reverse` is the client's responder session.
pub fn client_build_s_msg4<R: RngCore + CryptoRng + ?Sized>(
    session: &mut AttestationSession,
    reverse: &AttestationSession,
    project_id: &str,
    rng: &mut R,
) -> Result<SMsg4, AttestError> {
    if session.role != Role::Challenger || session.state != HandshakeState::Established {
        return Err(protocol("s_msg4 requires an established challenger session"));
    }
    if project_id.len() > u16::MAX as usize {
        return Err(protocol("project id too long"));
    }
    let client_report = reverse
        .own_report
        .as_ref()
        .ok_or_else(|| protocol("reverse attestation has not produced a client report"))?;
    let server_report = session.peer_report.as_ref().expect("established challenger has peer report");
    let nonce: [u8; NONCE_LEN] = crypto::random_array(rng);
    let plain = SMsg4Plaintext {
        nonce,
        report_hash: report_pair_hash(client_report, server_report),
        project_id: project_id.to_owned(),
    };
    let mk = session.keys.as_ref().expect("keys").mk;
    let payload = crypto::aead_seal(&mk, &plain.encode(), &s_msg4_aad(&session.session_id), rng);
    session.nonce = Some(nonce);
    session.project_id = Some(project_id.to_owned());
    Ok(SMsg4 { session_id: session.session_id, payload, client_msg1: reverse.msg1() })
}

/// What the server learns from a verified `SMsg4`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaClaim {
    pub nonce: [u8; NONCE_LEN],
    pub project_id: String,
    pub client_identity: EnclaveIdentity,
}

/// Server side: checks `s_msg4` against the reverse RA of the client enclave.
/// `reverse` is the server's challenger session towards the client enclave.
pub fn server_open_s_msg4(
    session: &mut AttestationSession,
    s_msg4: &SMsg4,
    reverse: &AttestationSession,
) -> Result<MaClaim, AttestError> {
    if s_msg4.session_id != session.session_id {
        return Err(AttestError::UnknownSession);
    }
    if session.role != Role::Responder || session.state != HandshakeState::Established {
        return Err(protocol("s_msg4 requires an established responder session"));
    }
    if reverse.role != Role::Challenger || !reverse.is_established() {
        return Err(session.fail(AttestError::AttestationFailed));
    }
    if s_msg4.client_msg1.session_id != reverse.session_id
        || Some(s_msg4.client_msg1.g_a.as_slice()) != reverse.peer_dh_public.as_ref().map(|p| p.as_slice())
    {
        return Err(session.fail(AttestError::MutualAttestationFailed(
            "client_msg1 does not match the reverse attestation".into(),
        )));
    }
    let mk = session.keys.as_ref().expect("keys").mk;
    let plain = crypto::aead_open(&mk, &s_msg4.payload, &s_msg4_aad(&session.session_id))
        .map_err(|_| protocol("s_msg4 payload does not decrypt"))
        .and_then(|p| SMsg4Plaintext::decode(&p));
    let plain = match plain {
        Ok(p) => p,
        Err(e) => return Err(session.fail(e)),
    };
    let client_report = reverse.peer_report.as_ref().expect("established challenger has peer report");
    let server_report = session.own_report.as_ref().expect("responder has own report");
    let expected = report_pair_hash(client_report, server_report);
    if !bool::from(expected.ct_eq(&plain.report_hash)) {
        return Err(session.fail(AttestError::MutualAttestationFailed("report hash mismatch".into())));
    }
    session.nonce = Some(plain.nonce);
    session.project_id = Some(plain.project_id.clone());
    session.peer_report = Some(client_report.clone());
    Ok(MaClaim { nonce: plain.nonce, project_id: plain.project_id, client_identity: client_report.identity })
}

/// Server side: sends `sk` (fresh, or a project's shared key) back with the nonce.
pub fn server_build_c_msg4<R: RngCore + CryptoRng + ?Sized>(
    session: &mut AttestationSession,
    sk: [u8; SK_LEN],
    rng: &mut R,
) -> Result<CMsg4, AttestError> {
    let nonce = session.nonce.ok_or_else(|| protocol("no verified s_msg4 on this session"))?;
    if !session.is_established() {
        return Err(protocol("session not established"));
    }
    let mk = session.keys.as_ref().expect("keys").mk;
    let plain = [nonce.as_slice(), &sk].concat();
    let payload = crypto::aead_seal(&mk, &plain, &c_msg4_aad(&session.session_id), rng);
    session.active_sk = Some(sk);
    Ok(CMsg4 { session_id: session.session_id, payload })
}

/// [`server_open_s_msg4`] followed by [`server_build_c_msg4`] with a fresh key.
pub fn server_process_s_msg4<R: RngCore + CryptoRng + ?Sized>(
    session: &mut AttestationSession,
    s_msg4: &SMsg4,
    reverse: &AttestationSession,
    rng: &mut R,
) -> Result<(CMsg4, MaClaim), AttestError> {
    let claim = server_open_s_msg4(session, s_msg4, reverse)?;
    let sk: [u8; SK_LEN] = crypto::random_array(rng);
    let c_msg4 = server_build_c_msg4(session, sk, rng)?;
    Ok((c_msg4, claim))
}

pub fn client_process_c_msg4(
    session: &mut AttestationSession,
    c_msg4: &CMsg4,
) -> Result<[u8; SK_LEN], AttestError> {
    if c_msg4.session_id != session.session_id {
        return Err(AttestError::UnknownSession);
    }
    if session.role != Role::Challenger || !session.is_established() {
        return Err(protocol("c_msg4 requires an established challenger session"));
    }
    let Some(nonce) = session.nonce else {
        return Err(protocol("no s_msg4 was sent on this session"));
    };
    let mk = session.keys.as_ref().expect("keys").mk;
    let plain = match crypto::aead_open(&mk, &c_msg4.payload, &c_msg4_aad(&session.session_id)) {
        Ok(p) if p.len() == NONCE_LEN + SK_LEN => p,
        Ok(_) => return Err(session.fail(protocol("c_msg4 payload has wrong length"))),
        Err(_) => return Err(session.fail(protocol("c_msg4 payload does not decrypt"))),
    };
    if !bool::from(plain[..NONCE_LEN].ct_eq(&nonce)) {
        return Err(session.fail(AttestError::MutualAttestationFailed("nonce mismatch".into())));
    }
    let sk: [u8; SK_LEN] = plain[NONCE_LEN..].try_into().unwrap();
    session.active_sk = Some(sk);
    Ok(sk)
}
