// SPDX-License-Identifier: Apache-2.0

//! Software stand-in for an SGX-style enclave platform.
//!
//! A [`PlatformState`] plays the role of one physical machine: it owns the
//! sealing root secret, the report MAC key and the quoting authority signing
//! key. An [`EnclaveHandle`] is an enclave loaded on that platform; its
//! [`EnclaveIdentity`] is derived deterministically from the manifest bytes and
//! the signer public key.
//!
//! Byte layouts (all integers little-endian):
//!
//! ```text
//! identity  = mr_enclave (32) || mr_signer (32) || isv_svn (2) || cpu_svn (16)        82 bytes
//! report    = identity || report_data (64) || mac (16)                              162 bytes
//! quote     = report || ed25519 signature over report (64)                          226 bytes
//! sealed    = policy (1) || bound field (32) || isv_svn (2) || cpu_svn (16)
//!             || iv (12) || ciphertext || tag (16)
//! ```

use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::sync::Arc;

use ed25519_dalek::{Signature, Signer, SigningKey, VerifyingKey};
use rand::{CryptoRng, RngCore};
use serde::{Deserialize, Serialize};
use thiserror::Error;
use zeroize::Zeroizing;

use crate::crypto::{self, b64, hex_array, IV_LEN};

pub const IDENTITY_LEN: usize = 82;
pub const REPORT_DATA_LEN: usize = 64;
pub const REPORT_LEN: usize = IDENTITY_LEN + REPORT_DATA_LEN + 16;
pub const QUOTE_LEN: usize = REPORT_LEN + 64;
const SEAL_HEADER_LEN: usize = 1 + 32 + 2 + 16;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum EnclaveError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("report rejected by quoting enclave")]
    ReportRejected,
    #[error("attestation failed")]
    AttestationFailed,
    #[error("unseal denied")]
    UnsealDenied,
    #[error("platform configuration: {0}")]
    Platform(String),
}

/// A 32-byte measurement digest (MRENCLAVE or MRSIGNER), hex on the wire.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Digest(#[serde(with = "hex_array")] pub [u8; 32]);

impl Digest {
    pub fn of(bytes: &[u8]) -> Self {
        Digest(crypto::sha256(&[bytes]))
    }

    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }
}

impl fmt::Display for Digest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

impl fmt::Debug for Digest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Digest({})", self.to_hex())
    }
}

impl FromStr for Digest {
    type Err = EnclaveError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let mut out = [0u8; 32];
        hex::decode_to_slice(s.trim(), &mut out)
            .map_err(|e| EnclaveError::InvalidArgument(format!("digest hex: {e}")))?;
        Ok(Digest(out))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct EnclaveIdentity {
    pub mr_enclave: Digest,
    pub mr_signer: Digest,
    pub isv_svn: u16,
    #[serde(with = "hex_array")]
    pub cpu_svn: [u8; 16],
}

impl EnclaveIdentity {
    pub fn to_bytes(&self) -> [u8; IDENTITY_LEN] {
        let mut out = [0u8; IDENTITY_LEN];
        out[..32].copy_from_slice(&self.mr_enclave.0);
        out[32..64].copy_from_slice(&self.mr_signer.0);
        out[64..66].copy_from_slice(&self.isv_svn.to_le_bytes());
        out[66..].copy_from_slice(&self.cpu_svn);
        out
    }

    pub fn from_bytes(b: &[u8; IDENTITY_LEN]) -> Self {
        EnclaveIdentity {
            mr_enclave: Digest(b[..32].try_into().unwrap()),
            mr_signer: Digest(b[32..64].try_into().unwrap()),
            isv_svn: u16::from_le_bytes([b[64], b[65]]),
            cpu_svn: b[66..].try_into().unwrap(),
        }
    }
}

/// Public half of a quoting authority; verifies quotes.
#[derive(Clone, Copy, PartialEq, Eq)]
pub struct AuthorityKey(VerifyingKey);

impl AuthorityKey {
    pub fn from_bytes(bytes: &[u8]) -> Result<Self, EnclaveError> {
        let arr: [u8; 32] = bytes
            .try_into()
            .map_err(|_| EnclaveError::InvalidArgument("authority key must be 32 bytes".into()))?;
        VerifyingKey::from_bytes(&arr)
            .map(AuthorityKey)
            .map_err(|e| EnclaveError::InvalidArgument(format!("authority key: {e}")))
    }

    pub fn to_bytes(&self) -> [u8; 32] {
        self.0.to_bytes()
    }

    pub fn to_base64(&self) -> String {
        b64::encode(&self.to_bytes())
    }

    pub fn from_base64(s: &str) -> Result<Self, EnclaveError> {
        let raw = b64::decode(s).map_err(|e| EnclaveError::InvalidArgument(e.to_string()))?;
        Self::from_bytes(&raw)
    }

    /// Reads `{"public_key": "<base64>"}`. A full platform file is also accepted.
    pub fn load(path: &Path) -> Result<Self, EnclaveError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| EnclaveError::Platform(format!("{}: {e}", path.display())))?;
        #[derive(Deserialize)]
        struct KeyFile {
            public_key: Option<String>,
            authority_public_key: Option<String>,
        }
        let kf: KeyFile =
            serde_json::from_str(&text).map_err(|e| EnclaveError::Platform(e.to_string()))?;
        match (kf.public_key, kf.authority_public_key) {
            (Some(k), _) | (None, Some(k)) => Self::from_base64(&k),
            (None, None) => Err(EnclaveError::Platform("no authority public key in file".into())),
        }
    }

    pub fn save(&self, path: &Path) -> std::io::Result<()> {
        let body = serde_json::json!({ "public_key": self.to_base64() });
        std::fs::write(path, serde_json::to_vec_pretty(&body)?)
    }
}

impl fmt::Debug for AuthorityKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "AuthorityKey({})", self.to_base64())
    }
}

/// One simulated machine. Immutable after construction.
pub struct PlatformState {
    seal_root: Zeroizing<[u8; 32]>,
    report_key: Zeroizing<[u8; 16]>,
    authority: SigningKey,
    cpu_svn: [u8; 16],
}

#[derive(Serialize, Deserialize)]
struct PlatformFile {
    #[serde(with = "b64::array")]
    seal_root: [u8; 32],
    #[serde(with = "b64::array")]
    report_key: [u8; 16],
    #[serde(with = "b64::array")]
    authority_secret: [u8; 32],
    #[serde(with = "b64::array")]
    cpu_svn: [u8; 16],
    authority_public_key: String,
}

impl PlatformState {
    pub fn generate<R: RngCore + CryptoRng + ?Sized>(rng: &mut R) -> Self {
        Self::from_parts(
            crypto::random_array(rng),
            crypto::random_array(rng),
            crypto::random_array(rng),
            [0u8; 16],
        )
    }

    /// Builds a platform that shares `authority`'s quoting key but has fresh
    /// sealing and report secrets (a second machine in the same attestation domain).
    pub fn generate_with_authority<R: RngCore + CryptoRng + ?Sized>(
        rng: &mut R,
        authority: &PlatformState,
    ) -> Self {
        Self::from_parts(
            crypto::random_array(rng),
            crypto::random_array(rng),
            authority.authority.to_bytes(),
            authority.cpu_svn,
        )
    }

    pub fn from_parts(
        seal_root: [u8; 32],
        report_key: [u8; 16],
        authority_secret: [u8; 32],
        cpu_svn: [u8; 16],
    ) -> Self {
        PlatformState {
            seal_root: Zeroizing::new(seal_root),
            report_key: Zeroizing::new(report_key),
            authority: SigningKey::from_bytes(&authority_secret),
            cpu_svn,
        }
    }

    pub fn cpu_svn(&self) -> [u8; 16] {
        self.cpu_svn
    }

    pub fn authority_key(&self) -> AuthorityKey {
        AuthorityKey(self.authority.verifying_key())
    }

    pub fn to_json(&self) -> String {
        let file = PlatformFile {
            seal_root: *self.seal_root,
            report_key: *self.report_key,
            authority_secret: self.authority.to_bytes(),
            cpu_svn: self.cpu_svn,
            authority_public_key: self.authority_key().to_base64(),
        };
        serde_json::to_string_pretty(&file).expect("platform serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, EnclaveError> {
        let f: PlatformFile =
            serde_json::from_str(text).map_err(|e| EnclaveError::Platform(e.to_string()))?;
        let p = Self::from_parts(f.seal_root, f.report_key, f.authority_secret, f.cpu_svn);
        if p.authority_key().to_base64() != f.authority_public_key {
            return Err(EnclaveError::Platform(
                "authority_public_key does not match authority_secret".into(),
            ));
        }
        Ok(p)
    }

    pub fn load(path: &Path) -> Result<Self, EnclaveError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| EnclaveError::Platform(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn save(&self, path: &Path) -> std::io::Result<()> {
        std::fs::write(path, self.to_json())
    }

    fn report_mac(&self, body: &[u8]) -> [u8; 16] {
        let full = crypto::hmac_sha256(self.report_key.as_ref(), &[body]);
        full[..16].try_into().unwrap()
    }

    /// Checks a report MAC against this platform's report key.
    pub fn verify_report(&self, report: &Report) -> bool {
        crypto::hmac_verify_truncated(self.report_key.as_ref(), &[&report.body()], &report.mac)
    }
}

impl fmt::Debug for PlatformState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("PlatformState")
            .field("authority", &self.authority_key())
            .field("cpu_svn", &hex::encode(self.cpu_svn))
            .finish_non_exhaustive()
    }
}

#[derive(Clone)]
pub struct EnclaveHandle {
    identity: EnclaveIdentity,
    platform: Arc<PlatformState>,
}

impl EnclaveHandle {
    pub fn identity(&self) -> &EnclaveIdentity {
        &self.identity
    }

    pub fn platform(&self) -> &Arc<PlatformState> {
        &self.platform
    }

    fn seal_key(&self, policy: SealPolicy) -> Zeroizing<[u8; 32]> {
        let header = seal_header(policy, &self.identity);
        let mut info = Vec::with_capacity(5 + SEAL_HEADER_LEN);
        info.extend_from_slice(b"SEAL:");
        info.extend_from_slice(&header);
        Zeroizing::new(crypto::hkdf_sha256(
            Some(self.platform.seal_root.as_ref()),
            self.platform.seal_root.as_ref(),
            &info,
        ))
    }

    /// Derives a labelled 32-byte key from this enclave's seal key material.
    /// Like the seal key itself it depends on platform and identity.
    pub fn derive_sealing_secret(&self, policy: SealPolicy, label: &[u8]) -> Zeroizing<[u8; 32]> {
        let seal_key = self.seal_key(policy);
        Zeroizing::new(crypto::hkdf_sha256(None, seal_key.as_ref(), label))
    }
}

impl fmt::Debug for EnclaveHandle {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("EnclaveHandle").field("identity", &self.identity).finish()
    }
}

pub fn load_enclave(
    manifest: &[u8],
    signer_public_key: &[u8],
    isv_svn: u16,
    platform: Arc<PlatformState>,
) -> Result<EnclaveHandle, EnclaveError> {
    if manifest.is_empty() {
        return Err(EnclaveError::InvalidArgument("empty enclave manifest".into()));
    }
    let identity = EnclaveIdentity {
        mr_enclave: Digest::of(manifest),
        mr_signer: Digest::of(signer_public_key),
        isv_svn,
        cpu_svn: platform.cpu_svn,
    };
    Ok(EnclaveHandle { identity, platform })
}

#[derive(Clone, PartialEq, Eq)]
pub struct Report {
    pub identity: EnclaveIdentity,
    pub report_data: [u8; REPORT_DATA_LEN],
    pub mac: [u8; 16],
}

impl Report {
    fn body(&self) -> Vec<u8> {
        let mut b = Vec::with_capacity(IDENTITY_LEN + REPORT_DATA_LEN);
        b.extend_from_slice(&self.identity.to_bytes());
        b.extend_from_slice(&self.report_data);
        b
    }

    pub fn to_bytes(&self) -> [u8; REPORT_LEN] {
        let mut out = [0u8; REPORT_LEN];
        out[..IDENTITY_LEN].copy_from_slice(&self.identity.to_bytes());
        out[IDENTITY_LEN..IDENTITY_LEN + REPORT_DATA_LEN].copy_from_slice(&self.report_data);
        out[IDENTITY_LEN + REPORT_DATA_LEN..].copy_from_slice(&self.mac);
        out
    }

    pub fn from_bytes(b: &[u8]) -> Result<Self, EnclaveError> {
        if b.len() != REPORT_LEN {
            return Err(EnclaveError::InvalidArgument(format!(
                "report must be {REPORT_LEN} bytes, got {}",
                b.len()
            )));
        }
        Ok(Report {
            identity: EnclaveIdentity::from_bytes(b[..IDENTITY_LEN].try_into().unwrap()),
            report_data: b[IDENTITY_LEN..IDENTITY_LEN + REPORT_DATA_LEN].try_into().unwrap(),
            mac: b[IDENTITY_LEN + REPORT_DATA_LEN..].try_into().unwrap(),
        })
    }
}

impl fmt::Debug for Report {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Report")
            .field("identity", &self.identity)
            .field("report_data", &hex::encode(self.report_data))
            .finish_non_exhaustive()
    }
}

/// Zero-pads `data` to the 64-byte report data field.
pub fn pad_report_data(data: &[u8]) -> Result<[u8; REPORT_DATA_LEN], EnclaveError> {
    if data.len() > REPORT_DATA_LEN {
        return Err(EnclaveError::InvalidArgument("report data longer than 64 bytes".into()));
    }
    let mut out = [0u8; REPORT_DATA_LEN];
    out[..data.len()].copy_from_slice(data);
    Ok(out)
}

pub fn create_report(enclave: &EnclaveHandle, report_data: &[u8]) -> Result<Report, EnclaveError> {
    let report_data: [u8; REPORT_DATA_LEN] = report_data.try_into().map_err(|_| {
        EnclaveError::InvalidArgument(format!(
            "report data must be exactly {REPORT_DATA_LEN} bytes, got {}",
            report_data.len()
        ))
    })?;
    let mut report = Report { identity: enclave.identity, report_data, mac: [0; 16] };
    report.mac = enclave.platform.report_mac(&report.body());
    Ok(report)
}

#[derive(Clone, PartialEq, Eq, Debug)]
pub struct Quote {
    pub report: Report,
    pub signature: [u8; 64],
}

impl Quote {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(QUOTE_LEN);
        out.extend_from_slice(&self.report.to_bytes());
        out.extend_from_slice(&self.signature);
        out
    }

    pub fn from_bytes(b: &[u8]) -> Result<Self, EnclaveError> {
        if b.len() != QUOTE_LEN {
            return Err(EnclaveError::InvalidArgument(format!(
                "quote must be {QUOTE_LEN} bytes, got {}",
                b.len()
            )));
        }
        Ok(Quote {
            report: Report::from_bytes(&b[..REPORT_LEN])?,
            signature: b[REPORT_LEN..].try_into().unwrap(),
        })
    }
}

/// The quoting enclave: signs reports produced on its own platform only.
pub fn quote_report(report: &Report, platform: &PlatformState) -> Result<Quote, EnclaveError> {
    if !platform.verify_report(report) {
        return Err(EnclaveError::ReportRejected);
    }
    let signature = platform.authority.sign(&report.to_bytes()).to_bytes();
    Ok(Quote { report: report.clone(), signature })
}

pub fn verify_quote(quote: &Quote, authority: &AuthorityKey) -> Result<EnclaveIdentity, EnclaveError> {
    let sig = Signature::from_bytes(&quote.signature);
    authority
        .0
        .verify_strict(&quote.report.to_bytes(), &sig)
        .map_err(|_| EnclaveError::AttestationFailed)?;
    Ok(quote.report.identity)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum SealPolicy {
    ByMeasurement,
    BySigner,
}

impl SealPolicy {
    fn tag(self) -> u8 {
        match self {
            SealPolicy::ByMeasurement => 1,
            SealPolicy::BySigner => 2,
        }
    }

    fn from_tag(t: u8) -> Option<Self> {
        match t {
            1 => Some(SealPolicy::ByMeasurement),
            2 => Some(SealPolicy::BySigner),
            _ => None,
        }
    }
}

fn seal_header(policy: SealPolicy, id: &EnclaveIdentity) -> [u8; SEAL_HEADER_LEN] {
    let bound = match policy {
        SealPolicy::ByMeasurement => id.mr_enclave,
        SealPolicy::BySigner => id.mr_signer,
    };
    let mut h = [0u8; SEAL_HEADER_LEN];
    h[0] = policy.tag();
    h[1..33].copy_from_slice(&bound.0);
    h[33..35].copy_from_slice(&id.isv_svn.to_le_bytes());
    h[35..].copy_from_slice(&id.cpu_svn);
    h
}

#[derive(Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SealedBlob {
    pub seal_policy: SealPolicy,
    pub bound_identity: Digest,
    pub isv_svn: u16,
    #[serde(with = "hex_array")]
    pub cpu_svn: [u8; 16],
    #[serde(with = "b64::array")]
    pub iv: [u8; IV_LEN],
    #[serde(with = "b64")]
    pub ciphertext: Vec<u8>,
}

impl SealedBlob {
    fn header(&self) -> [u8; SEAL_HEADER_LEN] {
        let mut h = [0u8; SEAL_HEADER_LEN];
        h[0] = self.seal_policy.tag();
        h[1..33].copy_from_slice(&self.bound_identity.0);
        h[33..35].copy_from_slice(&self.isv_svn.to_le_bytes());
        h[35..].copy_from_slice(&self.cpu_svn);
        h
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(SEAL_HEADER_LEN + IV_LEN + self.ciphertext.len());
        out.extend_from_slice(&self.header());
        out.extend_from_slice(&self.iv);
        out.extend_from_slice(&self.ciphertext);
        out
    }

    pub fn from_bytes(b: &[u8]) -> Result<Self, EnclaveError> {
        if b.len() < SEAL_HEADER_LEN + IV_LEN + crypto::TAG_LEN {
            return Err(EnclaveError::InvalidArgument("sealed blob too short".into()));
        }
        let seal_policy = SealPolicy::from_tag(b[0])
            .ok_or_else(|| EnclaveError::InvalidArgument("unknown seal policy".into()))?;
        Ok(SealedBlob {
            seal_policy,
            bound_identity: Digest(b[1..33].try_into().unwrap()),
            isv_svn: u16::from_le_bytes([b[33], b[34]]),
            cpu_svn: b[35..SEAL_HEADER_LEN].try_into().unwrap(),
            iv: b[SEAL_HEADER_LEN..SEAL_HEADER_LEN + IV_LEN].try_into().unwrap(),
            ciphertext: b[SEAL_HEADER_LEN + IV_LEN..].to_vec(),
        })
    }
}

impl fmt::Debug for SealedBlob {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SealedBlob")
            .field("seal_policy", &self.seal_policy)
            .field("bound_identity", &self.bound_identity)
            .field("len", &self.ciphertext.len())
            .finish()
    }
}

pub fn seal<R: RngCore + CryptoRng + ?Sized>(
    enclave: &EnclaveHandle,
    plaintext: &[u8],
    policy: SealPolicy,
    rng: &mut R,
) -> SealedBlob {
    let header = seal_header(policy, &enclave.identity);
    let key = enclave.seal_key(policy);
    let iv: [u8; IV_LEN] = crypto::random_array(rng);
    let sealed = crypto::aead_seal_with_iv(key.as_ref(), &iv, plaintext, &header);
    let id = &enclave.identity;
    SealedBlob {
        seal_policy: policy,
        bound_identity: match policy {
            SealPolicy::ByMeasurement => id.mr_enclave,
            SealPolicy::BySigner => id.mr_signer,
        },
        isv_svn: id.isv_svn,
        cpu_svn: id.cpu_svn,
        iv,
        ciphertext: sealed[IV_LEN..].to_vec(),
    }
}

pub fn unseal(enclave: &EnclaveHandle, blob: &SealedBlob) -> Result<Vec<u8>, EnclaveError> {
    let expected = seal_header(blob.seal_policy, &enclave.identity);
    if expected != blob.header() {
        return Err(EnclaveError::UnsealDenied);
    }
    let key = enclave.seal_key(blob.seal_policy);
    let mut data = Vec::with_capacity(IV_LEN + blob.ciphertext.len());
    data.extend_from_slice(&blob.iv);
    data.extend_from_slice(&blob.ciphertext);
    crypto::aead_open(key.as_ref(), &data, &expected).map_err(|_| EnclaveError::UnsealDenied)
}
