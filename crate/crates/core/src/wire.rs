// SPDX-License-Identifier: Apache-2.0

//! REST request and response bodies shared by the server and clients.
//! Binary fields are standard base64; digests are lowercase hex.

use serde::{Deserialize, Serialize};

use crate::attestation::{Message, SessionId, Status};
use crate::crypto::b64;
use crate::enclave::Digest;
use crate::kms::Policy;

pub const COOKIE_NAME: &str = "barbie_node";
pub const AUTH_HEADER: &str = "X-Auth-Token";

fn default_name() -> String {
    String::new()
}

fn default_content_type() -> String {
    "application/octet-stream".into()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct V1StoreRequest {
    #[serde(with = "b64")]
    pub payload: Vec<u8>,
    #[serde(default = "default_name")]
    pub name: String,
    #[serde(default = "default_content_type")]
    pub content_type: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SecretRef {
    pub secret_ref: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct V1GetResponse {
    #[serde(with = "b64")]
    pub payload: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StartResponse {
    pub session_id: SessionId,
    pub msg1: Message,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Msg3Response {
    pub msg3: Message,
}

/// Reply to `Msg4`. `msg2` opens the reverse attestation when the client
/// asked for mutual attestation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Msg4Response {
    pub status: Status,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub msg2: Option<Message>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaMsg3Request {
    pub session_id: SessionId,
    pub msg3: Message,
    pub s_msg4: Message,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaMsg3Response {
    pub c_msg4: Message,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KekRequest {
    pub session_id: SessionId,
    #[serde(with = "b64")]
    pub sk_kek: Vec<u8>,
    #[serde(default)]
    pub overwrite: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StatusResponse {
    pub status: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PolicyRequest {
    pub session_id: SessionId,
    pub policy: Policy,
    #[serde(default)]
    pub child_mrenclaves: Vec<Digest>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PolicyResponse {
    pub status: String,
    pub policy: Policy,
    pub child_mrenclaves: Vec<Digest>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct V2StoreRequest {
    pub session_id: SessionId,
    #[serde(with = "b64")]
    pub sk_secret: Vec<u8>,
    #[serde(default = "default_name")]
    pub name: String,
    #[serde(default = "default_content_type")]
    pub content_type: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct V2GetResponse {
    #[serde(with = "b64")]
    pub sk_secret: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Health {
    pub instance_id: String,
    pub kek_present: bool,
    pub kek_mode: String,
    pub crypto_path: String,
    pub kek_check_value: Option<String>,
    pub mr_enclave: Digest,
    pub mr_signer: Digest,
    pub isv_svn: u16,
}

/// Session ids are base64 in JSON bodies; query strings may use hex instead.
pub fn parse_session_id(s: &str) -> Option<SessionId> {
    if s.len() == 32 {
        let mut id = [0u8; 16];
        if hex::decode_to_slice(s, &mut id).is_ok() {
            return Some(SessionId(id));
        }
    }
    SessionId::from_base64(s)
}
