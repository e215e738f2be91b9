// SPDX-License-Identifier: Apache-2.0

//! Trusted key-management core.
//!
//! Plaintext keys and secrets only exist inside this module. Everything that
//! leaves it is either sealed (the KEK), encrypted under the KEK with the
//! project id as associated data (project session keys, session records,
//! secrets), or encrypted under a client session key (wire payloads).
//!
//! The free functions are the individual trusted operations. [`TrustedCore`]
//! wires them to a [`Store`] and a sealed KEK file and is what the server uses.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::sync::{Arc, RwLock};
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use rand::rngs::OsRng;
use rand::{CryptoRng, RngCore};
use serde::{Deserialize, Serialize};
use subtle::ConstantTimeEq;
use thiserror::Error;
use zeroize::Zeroizing;

use crate::attestation::{AttestationSession, SessionId, SK_LEN};
use crate::crypto::{self, b64};
use crate::enclave::{self, Digest, EnclaveHandle, EnclaveIdentity, SealPolicy, SealedBlob};
use crate::store::{Store, StoreError, Table};

pub const KEK_LEN: usize = 32;

/// Associated data for the KEK encrypted under an admin session key.
pub const SK_KEK_AAD: &[u8] = b"sk_kek";
/// Associated data for secrets encrypted under a session key.
pub const SK_SECRET_AAD: &[u8] = b"sk_secret";

const KEK_LABEL: &[u8] = b"KEK";
const DEFAULT_SESSION_TTL: Duration = Duration::from_secs(3600);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DenyReason {
    MeasurementMismatch,
    SignerMismatch,
    NotInAcl,
    SvnDowngrade,
}

impl DenyReason {
    pub fn as_str(self) -> &'static str {
        match self {
            DenyReason::MeasurementMismatch => "measurement-mismatch",
            DenyReason::SignerMismatch => "signer-mismatch",
            DenyReason::NotInAcl => "not-in-acl",
            DenyReason::SvnDowngrade => "svn-downgrade",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [Self::MeasurementMismatch, Self::SignerMismatch, Self::NotInAcl, Self::SvnDowngrade]
            .into_iter()
            .find(|r| r.as_str() == s)
    }
}

impl std::fmt::Display for DenyReason {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Access {
    Allow,
    Deny(DenyReason),
}

#[derive(Debug, Error)]
pub enum KmsError {
    #[error("no KEK is available")]
    KekMissing,
    #[error("a KEK is already provisioned")]
    KekExists,
    #[error("KEK provisioning failed")]
    ProvisioningFailed,
    #[error("policy not allowed for this record origin")]
    PolicyNotAllowed,
    #[error("stored ciphertext failed authentication")]
    IntegrityViolation,
    #[error("ciphertext does not decrypt under the session key")]
    BadCiphertext,
    #[error("not found")]
    NotFound,
    #[error("access denied: {0}")]
    AccessDenied(DenyReason),
    #[error("forbidden: {0}")]
    Forbidden(&'static str),
    #[error("attestation required")]
    AttestationRequired,
    #[error("unknown session")]
    UnknownSession,
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error(transparent)]
    Store(StoreError),
}

impl KmsError {
    /// Stable machine-readable code used in API error bodies.
    pub fn code(&self) -> &'static str {
        match self {
            KmsError::KekMissing => "kek-missing",
            KmsError::KekExists => "kek-exists",
            KmsError::ProvisioningFailed => "provisioning-failed",
            KmsError::PolicyNotAllowed => "policy-not-allowed",
            KmsError::IntegrityViolation => "integrity-violation",
            KmsError::BadCiphertext => "bad-ciphertext",
            KmsError::NotFound => "not-found",
            KmsError::AccessDenied(_) => "access-denied",
            KmsError::Forbidden(_) => "forbidden",
            KmsError::AttestationRequired => "attestation-required",
            KmsError::UnknownSession => "unknown-session",
            KmsError::InvalidArgument(_) => "invalid-argument",
            KmsError::Store(_) => "io-error",
        }
    }
}

impl From<StoreError> for KmsError {
    fn from(e: StoreError) -> Self {
        match e {
            StoreError::NotFound => KmsError::NotFound,
            StoreError::InvalidKey(k) => KmsError::InvalidArgument(format!("invalid key {k:?}")),
            other => KmsError::Store(other),
        }
    }
}

/// Project sharing policy. Serialized as its number.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum Policy {
    /// Requester must have the owner's measurement.
    Measurement = 1,
    /// Requester must have the owner's signer.
    Signer = 2,
    /// Requester's measurement must be in the child list.
    ChildList = 3,
}

impl TryFrom<u8> for Policy {
    type Error = String;

    fn try_from(n: u8) -> Result<Self, String> {
        match n {
            1 => Ok(Policy::Measurement),
            2 => Ok(Policy::Signer),
            3 => Ok(Policy::ChildList),
            n => Err(format!("unknown policy number {n}")),
        }
    }
}

impl From<Policy> for u8 {
    fn from(p: Policy) -> u8 {
        p as u8
    }
}

/// How a record or session came to be.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Mode {
    Legacy,
    Ra,
    Ma,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum KekSource {
    AdminRa,
    SealDerived,
}

/// `Master` derives an independent key per project from the KEK.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum KekHierarchy {
    #[default]
    Single,
    Master,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum KekMode {
    SealDerived,
    AdminProvisioned,
}

pub struct KekState {
    kek: Zeroizing<[u8; KEK_LEN]>,
    sealed_form: SealedBlob,
    provisioned_by: KekSource,
    hierarchy: KekHierarchy,
}

impl std::fmt::Debug for KekState {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("KekState")
            .field("provisioned_by", &self.provisioned_by)
            .field("hierarchy", &self.hierarchy)
            .field("check_value", &self.check_value())
            .finish()
    }
}

/// On-disk form of a sealed KEK.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SealedKekFile {
    pub provisioned_by: KekSource,
    pub sealed: SealedBlob,
}

impl KekState {
    pub fn sealed_form(&self) -> &SealedBlob {
        &self.sealed_form
    }

    pub fn provisioned_by(&self) -> KekSource {
        self.provisioned_by
    }

    pub fn hierarchy(&self) -> KekHierarchy {
        self.hierarchy
    }

    pub fn with_hierarchy(mut self, hierarchy: KekHierarchy) -> Self {
        self.hierarchy = hierarchy;
        self
    }

    /// Short public fingerprint of the KEK, for comparing instances.
    pub fn check_value(&self) -> String {
        hex::encode(&crypto::hmac_sha256(self.kek.as_ref(), &[b"KCV"])[..8])
    }

    /// Key that protects `project_id`'s records.
    pub fn key_for(&self, project_id: &str) -> Zeroizing<[u8; KEK_LEN]> {
        match self.hierarchy {
            KekHierarchy::Single => self.kek.clone(),
            KekHierarchy::Master => Zeroizing::new(crypto::hkdf_sha256(
                None,
                self.kek.as_ref(),
                &[b"PROJECT-KEK:".as_slice(), project_id.as_bytes()].concat(),
            )),
        }
    }

    pub fn to_file(&self) -> SealedKekFile {
        SealedKekFile { provisioned_by: self.provisioned_by, sealed: self.sealed_form.clone() }
    }

    /// Unseals a KEK file. Fails with `KekMissing` on another enclave or platform.
    pub fn from_file(enclave: &EnclaveHandle, file: SealedKekFile) -> Result<Self, KmsError> {
        let plain = Zeroizing::new(enclave::unseal(enclave, &file.sealed).map_err(|_| KmsError::KekMissing)?);
        let kek: [u8; KEK_LEN] = plain.as_slice().try_into().map_err(|_| KmsError::KekMissing)?;
        Ok(KekState {
            kek: Zeroizing::new(kek),
            sealed_form: file.sealed,
            provisioned_by: file.provisioned_by,
            hierarchy: KekHierarchy::Single,
        })
    }
}

/// Derives the KEK from the enclave's seal key. Deterministic per enclave and platform.
pub fn generate_kek_from_seal_key<R: RngCore + CryptoRng + ?Sized>(
    enclave: &EnclaveHandle,
    rng: &mut R,
) -> KekState {
    let kek = enclave.derive_sealing_secret(SealPolicy::ByMeasurement, KEK_LABEL);
    let sealed_form = enclave::seal(enclave, kek.as_ref(), SealPolicy::ByMeasurement, rng);
    KekState { kek, sealed_form, provisioned_by: KekSource::SealDerived, hierarchy: KekHierarchy::Single }
}

/// Decrypts an admin-supplied `sk_kek` with the session key and seals the result.
pub fn provision_kek<R: RngCore + CryptoRng + ?Sized>(
    sk_kek: &[u8],
    session: &AttestationSession,
    enclave: &EnclaveHandle,
    current: Option<&KekState>,
    overwrite: bool,
    rng: &mut R,
) -> Result<KekState, KmsError> {
    if current.is_some() && !overwrite {
        return Err(KmsError::KekExists);
    }
    let sk = Zeroizing::new(session.session_key().ok_or(KmsError::ProvisioningFailed)?);
    let plain =
        Zeroizing::new(crypto::aead_open(sk.as_ref(), sk_kek, SK_KEK_AAD).map_err(|_| KmsError::ProvisioningFailed)?);
    let kek: [u8; KEK_LEN] = plain.as_slice().try_into().map_err(|_| KmsError::ProvisioningFailed)?;
    let sealed_form = enclave::seal(enclave, &kek, SealPolicy::ByMeasurement, rng);
    Ok(KekState {
        kek: Zeroizing::new(kek),
        sealed_form,
        provisioned_by: KekSource::AdminRa,
        hierarchy: current.map(|k| k.hierarchy).unwrap_or_default(),
    })
}

pub fn save_sealed_kek(path: &Path, kek: &KekState) -> io::Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let tmp = path.with_extension(format!("tmp.{}", std::process::id()));
    let body = serde_json::to_vec_pretty(&kek.to_file()).expect("serializable");
    {
        use std::io::Write;
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&body)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)
}

/// `Ok(None)` when no file exists; `Err(KekMissing)` when it cannot be unsealed here.
pub fn load_sealed_kek(path: &Path, enclave: &EnclaveHandle) -> Result<Option<KekState>, KmsError> {
    let bytes = match fs::read(path) {
        Ok(b) => b,
        Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(None),
        Err(e) => return Err(KmsError::Store(e.into())),
    };
    let file: SealedKekFile = serde_json::from_slice(&bytes).map_err(|_| KmsError::KekMissing)?;
    KekState::from_file(enclave, file).map(Some)
}

/// Per-project sharing record. `enc_sk` is the project session key under the
/// KEK with the project id as associated data.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProjectPolicyRecord {
    pub project_id: String,
    pub policy_no: Policy,
    pub origin: Mode,
    pub owner_mr_enclave: Option<Digest>,
    pub owner_mr_signer: Option<Digest>,
    pub owner_isv_svn: u16,
    pub child_mr_enclaves: Vec<Digest>,
    #[serde(with = "b64")]
    pub enc_sk: Vec<u8>,
}

#[allow(clippy::too_many_arguments)]
pub fn store_session_key<R: RngCore + CryptoRng + ?Sized>(
    project_id: &str,
    sk: &[u8; SK_LEN],
    policy_no: Policy,
    origin: Mode,
    owner: Option<&EnclaveIdentity>,
    child_mr_enclaves: Vec<Digest>,
    kek: Option<&KekState>,
    rng: &mut R,
) -> Result<ProjectPolicyRecord, KmsError> {
    if origin != Mode::Ma && policy_no != Policy::ChildList {
        return Err(KmsError::PolicyNotAllowed);
    }
    let kek = kek.ok_or(KmsError::KekMissing)?;
    let key = kek.key_for(project_id);
    Ok(ProjectPolicyRecord {
        project_id: project_id.to_owned(),
        policy_no,
        origin,
        owner_mr_enclave: owner.map(|o| o.mr_enclave),
        owner_mr_signer: owner.map(|o| o.mr_signer),
        owner_isv_svn: owner.map_or(0, |o| o.isv_svn),
        child_mr_enclaves,
        enc_sk: crypto::aead_seal(key.as_ref(), sk, project_id.as_bytes(), rng),
    })
}

pub fn load_session_key(
    record: &ProjectPolicyRecord,
    kek: Option<&KekState>,
) -> Result<Zeroizing<[u8; SK_LEN]>, KmsError> {
    let kek = kek.ok_or(KmsError::KekMissing)?;
    let key = kek.key_for(&record.project_id);
    let plain = Zeroizing::new(
        crypto::aead_open(key.as_ref(), &record.enc_sk, record.project_id.as_bytes())
            .map_err(|_| KmsError::IntegrityViolation)?,
    );
    let sk: [u8; SK_LEN] = plain.as_slice().try_into().map_err(|_| KmsError::IntegrityViolation)?;
    Ok(Zeroizing::new(sk))
}

/// Identity mismatch is reported before an SVN downgrade. CPU_SVN is not consulted.
pub fn check_access(record: &ProjectPolicyRecord, requester: &EnclaveIdentity) -> Access {
    let identity_ok = match record.policy_no {
        Policy::Measurement => record.owner_mr_enclave == Some(requester.mr_enclave),
        Policy::Signer => record.owner_mr_signer == Some(requester.mr_signer),
        Policy::ChildList => record.child_mr_enclaves.contains(&requester.mr_enclave),
    };
    if !identity_ok {
        return Access::Deny(match record.policy_no {
            Policy::Measurement => DenyReason::MeasurementMismatch,
            Policy::Signer => DenyReason::SignerMismatch,
            Policy::ChildList => DenyReason::NotInAcl,
        });
    }
    if requester.isv_svn < record.owner_isv_svn {
        return Access::Deny(DenyReason::SvnDowngrade);
    }
    Access::Allow
}

pub fn encrypt_for_project<R: RngCore + CryptoRng + ?Sized>(
    kek: &KekState,
    project_id: &str,
    plaintext: &[u8],
    rng: &mut R,
) -> Vec<u8> {
    crypto::aead_seal(kek.key_for(project_id).as_ref(), plaintext, project_id.as_bytes(), rng)
}

pub fn decrypt_for_project(
    kek: &KekState,
    project_id: &str,
    ciphertext: &[u8],
) -> Result<Zeroizing<Vec<u8>>, KmsError> {
    crypto::aead_open(kek.key_for(project_id).as_ref(), ciphertext, project_id.as_bytes())
        .map(Zeroizing::new)
        .map_err(|_| KmsError::IntegrityViolation)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SecretRecord {
    pub ref_id: String,
    pub project_id: String,
    #[serde(with = "b64")]
    pub kek_secret: Vec<u8>,
    pub name: String,
    pub content_type: String,
    pub mode: Mode,
    pub creator_session: Option<String>,
    pub creator_identity: Option<EnclaveIdentity>,
    pub creator_tag: Option<String>,
    pub created_at: u64,
}

/// Established data-plane session. `enc_sk` is under the KEK with AAD = project id.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionRecord {
    pub session_id: String,
    pub project_id: String,
    pub mode: Mode,
    pub client_identity: Option<EnclaveIdentity>,
    #[serde(with = "b64")]
    pub enc_sk: Vec<u8>,
    pub created_at: u64,
}

/// A loaded session with its key in the clear.
#[derive(Clone)]
pub struct SessionContext {
    pub record: SessionRecord,
    sk: Zeroizing<[u8; SK_LEN]>,
}

impl std::fmt::Debug for SessionContext {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SessionContext").field("record", &self.record).finish_non_exhaustive()
    }
}

impl SessionContext {
    pub fn sk(&self) -> &[u8; SK_LEN] {
        &self.sk
    }

    pub fn session_id(&self) -> &str {
        &self.record.session_id
    }

    pub fn project_id(&self) -> &str {
        &self.record.project_id
    }
}

fn now_secs() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

fn is_ref_id(s: &str) -> bool {
    s.len() == 32 && s.bytes().all(|b| b.is_ascii_hexdigit() && !b.is_ascii_uppercase())
}

fn decode_record<T: for<'de> Deserialize<'de>>(bytes: &[u8]) -> Result<T, KmsError> {
    serde_json::from_slice(bytes).map_err(|_| KmsError::IntegrityViolation)
}

fn encode_record<T: Serialize>(v: &T) -> Vec<u8> {
    serde_json::to_vec_pretty(v).expect("records serialize")
}

/// The enclave-resident service state of one server instance.
pub struct TrustedCore {
    enclave: EnclaveHandle,
    store: Store,
    kek_path: PathBuf,
    hierarchy: KekHierarchy,
    kek: RwLock<Option<Arc<KekState>>>,
    session_ttl: Duration,
}

impl std::fmt::Debug for TrustedCore {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("TrustedCore")
            .field("identity", self.enclave.identity())
            .field("kek_present", &self.kek_present())
            .finish_non_exhaustive()
    }
}

impl TrustedCore {
    /// Recovers the KEK from `kek_path` if it unseals here. In seal-derived mode
    /// a KEK is generated only when no sealed file exists at all, so data
    /// written under another platform's KEK is never silently orphaned.
    pub fn open(
        enclave: EnclaveHandle,
        store: Store,
        kek_path: impl Into<PathBuf>,
        mode: KekMode,
        hierarchy: KekHierarchy,
    ) -> Result<Self, KmsError> {
        let kek_path = kek_path.into();
        let kek = match load_sealed_kek(&kek_path, &enclave) {
            Ok(Some(k)) => Some(k),
            Ok(None) if mode == KekMode::SealDerived => {
                let k = generate_kek_from_seal_key(&enclave, &mut OsRng);
                save_sealed_kek(&kek_path, &k).map_err(|e| KmsError::Store(e.into()))?;
                Some(k)
            }
            Ok(None) | Err(KmsError::KekMissing) => None,
            Err(e) => return Err(e),
        };
        Ok(TrustedCore {
            enclave,
            store,
            kek_path,
            hierarchy,
            kek: RwLock::new(kek.map(|k| Arc::new(k.with_hierarchy(hierarchy)))),
            session_ttl: DEFAULT_SESSION_TTL,
        })
    }

    pub fn with_session_ttl(mut self, ttl: Duration) -> Self {
        self.session_ttl = ttl;
        self
    }

    pub fn enclave(&self) -> &EnclaveHandle {
        &self.enclave
    }

    pub fn store(&self) -> &Store {
        &self.store
    }

    pub fn kek_path(&self) -> &Path {
        &self.kek_path
    }

    fn kek(&self) -> Option<Arc<KekState>> {
        self.kek.read().unwrap().clone()
    }

    fn require_kek(&self) -> Result<Arc<KekState>, KmsError> {
        self.kek().ok_or(KmsError::KekMissing)
    }

    pub fn kek_present(&self) -> bool {
        self.kek().is_some()
    }

    pub fn kek_source(&self) -> Option<KekSource> {
        self.kek().map(|k| k.provisioned_by)
    }

    pub fn kek_check_value(&self) -> Option<String> {
        self.kek().map(|k| k.check_value())
    }

    pub fn provision_kek(
        &self,
        sk_kek: &[u8],
        session: &AttestationSession,
        overwrite: bool,
    ) -> Result<(), KmsError> {
        let mut guard = self.kek.write().unwrap();
        let new = provision_kek(sk_kek, session, &self.enclave, guard.as_deref(), overwrite, &mut OsRng)?
            .with_hierarchy(self.hierarchy);
        save_sealed_kek(&self.kek_path, &new).map_err(|e| KmsError::Store(e.into()))?;
        *guard = Some(Arc::new(new));
        Ok(())
    }

    pub fn persist_session(
        &self,
        session_id: &SessionId,
        project_id: &str,
        mode: Mode,
        client_identity: Option<EnclaveIdentity>,
        sk: &[u8; SK_LEN],
    ) -> Result<(), KmsError> {
        crate::store::validate_key(project_id)?;
        let kek = self.require_kek()?;
        let record = SessionRecord {
            session_id: session_id.to_hex(),
            project_id: project_id.to_owned(),
            mode,
            client_identity,
            enc_sk: encrypt_for_project(&kek, project_id, sk, &mut OsRng),
            created_at: now_secs(),
        };
        self.store.put(Table::Sessions, &record.session_id, &encode_record(&record))?;
        Ok(())
    }

    /// Unknown or expired sessions are `UnknownSession`.
    pub fn load_session(&self, session_id_hex: &str) -> Result<SessionContext, KmsError> {
        let bytes = match self.store.get(Table::Sessions, session_id_hex) {
            Ok(b) => b,
            Err(StoreError::NotFound | StoreError::InvalidKey(_)) => return Err(KmsError::UnknownSession),
            Err(e) => return Err(e.into()),
        };
        let record: SessionRecord = decode_record(&bytes)?;
        if record.session_id != session_id_hex {
            return Err(KmsError::IntegrityViolation);
        }
        if now_secs().saturating_sub(record.created_at) > self.session_ttl.as_secs() {
            return Err(KmsError::UnknownSession);
        }
        let kek = self.require_kek()?;
        let plain = decrypt_for_project(&kek, &record.project_id, &record.enc_sk)?;
        let sk: [u8; SK_LEN] = plain.as_slice().try_into().map_err(|_| KmsError::IntegrityViolation)?;
        Ok(SessionContext { record, sk: Zeroizing::new(sk) })
    }

    pub fn project_record(&self, project_id: &str) -> Result<Option<ProjectPolicyRecord>, KmsError> {
        match self.store.get(Table::Projects, project_id) {
            Ok(b) => {
                let rec: ProjectPolicyRecord = decode_record(&b)?;
                Ok(Some(rec))
            }
            Err(StoreError::NotFound) => Ok(None),
            Err(e) => Err(e.into()),
        }
    }

    /// Session key handed to a mutually attested client. An existing project
    /// shares its key with clients that pass its policy; a new project gets a
    /// fresh key with the client as policy-1 owner.
    pub fn ma_session_key(
        &self,
        project_id: &str,
        client: &EnclaveIdentity,
    ) -> Result<Zeroizing<[u8; SK_LEN]>, KmsError> {
        crate::store::validate_key(project_id)?;
        let kek = self.require_kek()?;
        loop {
            if let Some(record) = self.project_record(project_id)? {
                if record.project_id != project_id {
                    return Err(KmsError::IntegrityViolation);
                }
                let sk = load_session_key(&record, Some(&kek))?;
                return match check_access(&record, client) {
                    Access::Allow => Ok(sk),
                    Access::Deny(r) => Err(KmsError::AccessDenied(r)),
                };
            }
            let sk = Zeroizing::new(crypto::random_array::<SK_LEN, _>(&mut OsRng));
            let record = store_session_key(
                project_id,
                &sk,
                Policy::Measurement,
                Mode::Ma,
                Some(client),
                Vec::new(),
                Some(&kek),
                &mut OsRng,
            )?;
            match self.store.put_if_absent(Table::Projects, project_id, &encode_record(&record)) {
                Ok(()) => return Ok(sk),
                Err(StoreError::Exists) => continue,
                Err(e) => return Err(e.into()),
            }
        }
    }

    /// Creates the project record from this session, or updates the policy of
    /// a record whose key the session holds (and whose owner it is, if any).
    pub fn set_policy(
        &self,
        ctx: &SessionContext,
        policy: Policy,
        children: Vec<Digest>,
    ) -> Result<ProjectPolicyRecord, KmsError> {
        let kek = self.require_kek()?;
        let project_id = ctx.project_id();
        loop {
            match self.project_record(project_id)? {
                None => {
                    let record = store_session_key(
                        project_id,
                        ctx.sk(),
                        policy,
                        ctx.record.mode,
                        ctx.record.client_identity.as_ref(),
                        children.clone(),
                        Some(&kek),
                        &mut OsRng,
                    )?;
                    match self.store.put_if_absent(Table::Projects, project_id, &encode_record(&record)) {
                        Ok(()) => return Ok(record),
                        Err(StoreError::Exists) => continue,
                        Err(e) => return Err(e.into()),
                    }
                }
                Some(mut record) => {
                    let sk = load_session_key(&record, Some(&kek))?;
                    if !bool::from(sk.as_slice().ct_eq(ctx.sk())) {
                        return Err(KmsError::Forbidden("session does not hold the project key"));
                    }
                    if let Some(owner) = record.owner_mr_enclave {
                        if ctx.record.client_identity.map(|c| c.mr_enclave) != Some(owner) {
                            return Err(KmsError::Forbidden("only the owner enclave may change the policy"));
                        }
                    }
                    if record.origin != Mode::Ma && policy != Policy::ChildList {
                        return Err(KmsError::PolicyNotAllowed);
                    }
                    record.policy_no = policy;
                    record.child_mr_enclaves = children;
                    self.store.put(Table::Projects, project_id, &encode_record(&record))?;
                    return Ok(record);
                }
            }
        }
    }

    fn insert_secret(&self, mut record: SecretRecord) -> Result<String, KmsError> {
        loop {
            record.ref_id = hex::encode(crypto::random_array::<16, _>(&mut OsRng));
            match self.store.put_if_absent(Table::Secrets, &record.ref_id, &encode_record(&record)) {
                Ok(()) => return Ok(record.ref_id),
                Err(StoreError::Exists) => continue,
                Err(e) => return Err(e.into()),
            }
        }
    }

    fn load_secret(&self, ref_id: &str) -> Result<SecretRecord, KmsError> {
        if !is_ref_id(ref_id) {
            return Err(KmsError::NotFound);
        }
        let record: SecretRecord = decode_record(&self.store.get(Table::Secrets, ref_id)?)?;
        if record.ref_id != ref_id {
            return Err(KmsError::IntegrityViolation);
        }
        Ok(record)
    }

    /// `sk_secret` is the secret under the session key with [`SK_SECRET_AAD`].
    pub fn store_secret(
        &self,
        ctx: &SessionContext,
        sk_secret: &[u8],
        name: &str,
        content_type: &str,
    ) -> Result<String, KmsError> {
        let kek = self.require_kek()?;
        let plain =
            Zeroizing::new(crypto::aead_open(ctx.sk(), sk_secret, SK_SECRET_AAD).map_err(|_| KmsError::BadCiphertext)?);
        self.insert_secret(SecretRecord {
            ref_id: String::new(),
            project_id: ctx.project_id().to_owned(),
            kek_secret: encrypt_for_project(&kek, ctx.project_id(), &plain, &mut OsRng),
            name: name.to_owned(),
            content_type: content_type.to_owned(),
            mode: ctx.record.mode,
            creator_session: Some(ctx.session_id().to_owned()),
            creator_identity: ctx.record.client_identity,
            creator_tag: None,
            created_at: now_secs(),
        })
    }

    /// Returns the secret re-encrypted under the requester's session key.
    pub fn retrieve_secret(&self, ref_id: &str, ctx: &SessionContext) -> Result<Vec<u8>, KmsError> {
        let kek = self.require_kek()?;
        let record = self.load_secret(ref_id)?;
        if record.project_id != ctx.project_id() {
            return Err(KmsError::Forbidden("secret belongs to another project"));
        }
        let is_owner = record.creator_session.as_deref() == Some(ctx.session_id());
        if !is_owner && record.mode != Mode::Legacy {
            let requester = ctx.record.client_identity.ok_or(KmsError::AttestationRequired)?;
            let policy = self
                .project_record(&record.project_id)?
                .ok_or(KmsError::AccessDenied(DenyReason::NotInAcl))?;
            if let Access::Deny(r) = check_access(&policy, &requester) {
                return Err(KmsError::AccessDenied(r));
            }
        }
        let plain = decrypt_for_project(&kek, &record.project_id, &record.kek_secret)?;
        Ok(crypto::aead_seal(ctx.sk(), &plain, SK_SECRET_AAD, &mut OsRng))
    }

    pub fn legacy_store(
        &self,
        project_id: &str,
        plaintext: &[u8],
        name: &str,
        content_type: &str,
        creator_tag: &str,
    ) -> Result<String, KmsError> {
        crate::store::validate_key(project_id)?;
        let kek = self.require_kek()?;
        self.insert_secret(SecretRecord {
            ref_id: String::new(),
            project_id: project_id.to_owned(),
            kek_secret: encrypt_for_project(&kek, project_id, plaintext, &mut OsRng),
            name: name.to_owned(),
            content_type: content_type.to_owned(),
            mode: Mode::Legacy,
            creator_session: None,
            creator_identity: None,
            creator_tag: Some(creator_tag.to_owned()),
            created_at: now_secs(),
        })
    }

    /// Token-authenticated retrieval. Attested secrets are not released this way.
    pub fn legacy_retrieve(&self, ref_id: &str, project_id: &str) -> Result<Zeroizing<Vec<u8>>, KmsError> {
        let kek = self.require_kek()?;
        let record = self.load_secret(ref_id)?;
        if record.project_id != project_id {
            return Err(KmsError::Forbidden("secret belongs to another project"));
        }
        if record.mode != Mode::Legacy {
            return Err(KmsError::AttestationRequired);
        }
        decrypt_for_project(&kek, &record.project_id, &record.kek_secret)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attestation::{
        challenger_process_msg1, challenger_process_msg3, responder_process_msg2, responder_process_msg4,
        responder_start,
    };
    use crate::enclave::{load_enclave, PlatformState};
    use std::collections::HashMap;

    fn platform() -> Arc<PlatformState> {
        Arc::new(PlatformState::generate(&mut OsRng))
    }

    fn enclave_on(p: &Arc<PlatformState>, manifest: &[u8], signer: &[u8], svn: u16) -> EnclaveHandle {
        load_enclave(manifest, signer, svn, p.clone()).unwrap()
    }

    /// Returns the server-side (responder) session after an honest RA.
    fn ra(server: &EnclaveHandle) -> (AttestationSession, AttestationSession) {
        let (mut resp, m1) = responder_start(server, &mut OsRng);
        let (mut chal, m2) = challenger_process_msg1(&m1, &mut OsRng).unwrap();
        let m3 = responder_process_msg2(&mut resp, &m2, server).unwrap();
        let auth = server.platform().authority_key();
        let m4 = challenger_process_msg3(&mut chal, &m3, &[auth], None).unwrap();
        responder_process_msg4(&mut resp, &m4).unwrap();
        (resp, chal)
    }

    fn seal_kek(enclave: &EnclaveHandle) -> KekState {
        generate_kek_from_seal_key(enclave, &mut OsRng)
    }

    #[test]
    fn seal_derived_kek_is_deterministic_per_platform() {
        let p = platform();
        let e = enclave_on(&p, b"barbie-v1", b"signer", 1);
        let a = seal_kek(&e);
        let b = seal_kek(&e);
        assert_eq!(a.check_value(), b.check_value());
        assert_ne!(a.sealed_form(), b.sealed_form());
        assert_eq!(a.provisioned_by(), KekSource::SealDerived);
        let other = enclave_on(&platform(), b"barbie-v1", b"signer", 1);
        assert_ne!(seal_kek(&other).check_value(), a.check_value());
        let reloaded = KekState::from_file(&e, a.to_file()).unwrap();
        assert_eq!(reloaded.check_value(), a.check_value());
        assert!(matches!(KekState::from_file(&other, a.to_file()), Err(KmsError::KekMissing)));
    }

    #[test]
    fn provisioning() {
        let p = platform();
        let e = enclave_on(&p, b"barbie-v1", b"signer", 1);
        let (server, client) = ra(&e);
        let kek = [0x42u8; 32];
        let sk_kek = crypto::aead_seal(&client.session_key().unwrap(), &kek, SK_KEK_AAD, &mut OsRng);
        let state = provision_kek(&sk_kek, &server, &e, None, false, &mut OsRng).unwrap();
        assert_eq!(*state.kek, kek);
        assert_eq!(state.provisioned_by(), KekSource::AdminRa);
        assert_eq!(*KekState::from_file(&e, state.to_file()).unwrap().kek, kek);

        assert!(matches!(
            provision_kek(&sk_kek, &server, &e, Some(&state), false, &mut OsRng),
            Err(KmsError::KekExists)
        ));
        provision_kek(&sk_kek, &server, &e, Some(&state), true, &mut OsRng).unwrap();

        let (stale_server, _) = ra(&e);
        assert!(matches!(
            provision_kek(&sk_kek, &stale_server, &e, None, false, &mut OsRng),
            Err(KmsError::ProvisioningFailed)
        ));
        let short = crypto::aead_seal(&client.session_key().unwrap(), &[1u8; 16], SK_KEK_AAD, &mut OsRng);
        assert!(matches!(
            provision_kek(&short, &server, &e, None, false, &mut OsRng),
            Err(KmsError::ProvisioningFailed)
        ));
    }

    #[test]
    fn session_key_records() {
        let e = enclave_on(&platform(), b"barbie-v1", b"signer", 1);
        let kek = seal_kek(&e);
        let sk = [9u8; 16];
        let rec = store_session_key("projA", &sk, Policy::ChildList, Mode::Ra, None, vec![], Some(&kek), &mut OsRng)
            .unwrap();
        assert_eq!(*load_session_key(&rec, Some(&kek)).unwrap(), sk);

        let mut moved = rec.clone();
        moved.project_id = "projB".into();
        assert!(matches!(load_session_key(&moved, Some(&kek)), Err(KmsError::IntegrityViolation)));

        let mut flipped = rec.clone();
        flipped.enc_sk[20] ^= 1;
        assert!(matches!(load_session_key(&flipped, Some(&kek)), Err(KmsError::IntegrityViolation)));

        for p in [Policy::Measurement, Policy::Signer] {
            assert!(matches!(
                store_session_key("projA", &sk, p, Mode::Ra, None, vec![], Some(&kek), &mut OsRng),
                Err(KmsError::PolicyNotAllowed)
            ));
        }
        assert!(matches!(
            store_session_key("projA", &sk, Policy::ChildList, Mode::Ra, None, vec![], None, &mut OsRng),
            Err(KmsError::KekMissing)
        ));
        assert!(matches!(load_session_key(&rec, None), Err(KmsError::KekMissing)));
    }

    #[test]
    fn aad_binding_across_five_projects() {
        let e = enclave_on(&platform(), b"barbie-v1", b"signer", 1);
        for hierarchy in [KekHierarchy::Single, KekHierarchy::Master] {
            let kek = seal_kek(&e).with_hierarchy(hierarchy);
            let projects = ["p1", "p2", "p3", "p4", "p5"];
            let records: Vec<_> = projects
                .iter()
                .map(|p| {
                    let sk = crypto::random_array::<16, _>(&mut OsRng);
                    store_session_key(p, &sk, Policy::ChildList, Mode::Ra, None, vec![], Some(&kek), &mut OsRng)
                        .unwrap()
                })
                .collect();
            let secrets: Vec<_> =
                projects.iter().map(|p| encrypt_for_project(&kek, p, b"secret", &mut OsRng)).collect();
            let mut failures = 0;
            for (i, a) in projects.iter().enumerate() {
                for (j, b) in projects.iter().enumerate() {
                    let mut swapped = records[j].clone();
                    swapped.enc_sk = records[i].enc_sk.clone();
                    let sk_ok = load_session_key(&swapped, Some(&kek)).is_ok();
                    let secret_ok = decrypt_for_project(&kek, b, &secrets[i]).is_ok();
                    assert_eq!(sk_ok, i == j, "{a} -> {b}");
                    assert_eq!(secret_ok, i == j, "{a} -> {b}");
                    failures += usize::from(!sk_ok);
                }
            }
            assert_eq!(failures, 20);
        }
    }

    fn policy_fixture() -> (HashMap<&'static str, EnclaveIdentity>, ProjectPolicyRecord) {
        let id = |e: &str, s: &str| EnclaveIdentity {
            mr_enclave: Digest::of(e.as_bytes()),
            mr_signer: Digest::of(s.as_bytes()),
            isv_svn: 2,
            cpu_svn: [0; 16],
        };
        let ids = HashMap::from([
            ("owner", id("E_o", "S_o")),
            ("same_signer", id("E_s", "S_o")),
            ("child", id("E_c", "S_c")),
            ("stranger", id("E_x", "S_x")),
        ]);
        let owner = ids["owner"];
        let record = ProjectPolicyRecord {
            project_id: "p".into(),
            policy_no: Policy::Measurement,
            origin: Mode::Ma,
            owner_mr_enclave: Some(owner.mr_enclave),
            owner_mr_signer: Some(owner.mr_signer),
            owner_isv_svn: owner.isv_svn,
            child_mr_enclaves: vec![owner.mr_enclave, ids["child"].mr_enclave],
            enc_sk: vec![],
        };
        (ids, record)
    }

    #[test]
    fn policy_truth_table() {
        let (ids, base) = policy_fixture();
        let table = include_str!("../tests/data/policy_truth_table.csv");
        let mut rows = 0;
        for line in table.lines().skip(1) {
            let f: Vec<&str> = line.split(',').collect();
            let mut record = base.clone();
            record.policy_no = Policy::try_from(f[0].parse::<u8>().unwrap()).unwrap();
            let mut requester = ids[f[1]];
            requester.isv_svn = (2 + f[2].parse::<i32>().unwrap()) as u16;
            let expected = match f[3] {
                "allow" => Access::Allow,
                d => Access::Deny(DenyReason::parse(d.strip_prefix("deny:").unwrap()).unwrap()),
            };
            assert_eq!(check_access(&record, &requester), expected, "{line}");
            rows += 1;
        }
        assert_eq!(rows, 36);
    }

    #[test]
    fn cpu_svn_is_not_a_policy_input() {
        let (ids, record) = policy_fixture();
        let mut owner = ids["owner"];
        owner.cpu_svn = [0xff; 16];
        assert_eq!(check_access(&record, &owner), Access::Allow);
    }

    fn core_on(dir: &Path, enclave: EnclaveHandle, mode: KekMode) -> TrustedCore {
        let store = Store::open(dir.join("store")).unwrap().without_fsync();
        TrustedCore::open(enclave, store, dir.join("kek.json"), mode, KekHierarchy::Single).unwrap()
    }

    fn ma_ctx(core: &TrustedCore, project: &str, client: &EnclaveHandle) -> Result<SessionContext, KmsError> {
        let id = *client.identity();
        let sk = core.ma_session_key(project, &id)?;
        let sid = SessionId::random(&mut OsRng);
        core.persist_session(&sid, project, Mode::Ma, Some(id), &sk).unwrap();
        Ok(core.load_session(&sid.to_hex()).unwrap())
    }

    fn ra_ctx(core: &TrustedCore, project: &str) -> SessionContext {
        let sid = SessionId::random(&mut OsRng);
        let sk = crypto::random_array::<16, _>(&mut OsRng);
        core.persist_session(&sid, project, Mode::Ra, None, &sk).unwrap();
        core.load_session(&sid.to_hex()).unwrap()
    }

    fn put(ctx: &SessionContext, pt: &[u8]) -> Vec<u8> {
        crypto::aead_seal(ctx.sk(), pt, SK_SECRET_AAD, &mut OsRng)
    }

    fn get(core: &TrustedCore, r: &str, ctx: &SessionContext) -> Result<Vec<u8>, KmsError> {
        core.retrieve_secret(r, ctx).map(|ct| crypto::aead_open(ctx.sk(), &ct, SK_SECRET_AAD).unwrap())
    }

    fn scan(dir: &Path, needle: &[u8]) -> bool {
        let mut hit = false;
        for entry in fs::read_dir(dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                hit |= scan(&path, needle);
            } else {
                let data = fs::read(&path).unwrap();
                hit |= data.windows(needle.len()).any(|w| w == needle);
            }
        }
        hit
    }

    #[test]
    fn secrets_roundtrip_without_plaintext_at_rest() {
        let dir = tempfile::tempdir().unwrap();
        let p = platform();
        let core = core_on(dir.path(), enclave_on(&p, b"barbie-v1", b"s", 1), KekMode::SealDerived);
        let ctx = ra_ctx(&core, "projA");
        let r1 = core.store_secret(&ctx, &put(&ctx, b"hunter2"), "pw", "text/plain").unwrap();
        let r2 = core.store_secret(&ctx, &put(&ctx, b"hunter2"), "pw", "text/plain").unwrap();
        assert_ne!(r1, r2);
        let a = core.load_secret(&r1).unwrap();
        let b = core.load_secret(&r2).unwrap();
        assert_ne!(a.kek_secret, b.kek_secret);
        assert_eq!(get(&core, &r1, &ctx).unwrap(), b"hunter2");
        assert!(!scan(dir.path(), b"hunter2"));
        let kek = core.enclave().derive_sealing_secret(SealPolicy::ByMeasurement, KEK_LABEL);
        assert!(!scan(dir.path(), kek.as_ref()));

        let garbage = crypto::aead_seal(&[0u8; 16], b"x", SK_SECRET_AAD, &mut OsRng);
        assert!(matches!(core.store_secret(&ctx, &garbage, "n", "t"), Err(KmsError::BadCiphertext)));
        assert!(matches!(core.retrieve_secret(&"0".repeat(32), &ctx), Err(KmsError::NotFound)));
        assert!(matches!(core.retrieve_secret("../x", &ctx), Err(KmsError::NotFound)));
    }

    #[test]
    fn retrieval_rules() {
        let dir = tempfile::tempdir().unwrap();
        let p = platform();
        let core = core_on(dir.path(), enclave_on(&p, b"barbie-v1", b"s", 1), KekMode::SealDerived);
        let owner = enclave_on(&p, b"cinder", b"vendor", 2);
        let nova = enclave_on(&p, b"nova", b"vendor2", 2);
        let old_nova = enclave_on(&p, b"nova", b"vendor2", 1);
        let stranger = enclave_on(&p, b"stranger", b"x", 9);

        let a = ma_ctx(&core, "tenant", &owner).unwrap();
        let r = core.store_secret(&a, &put(&a, b"volume-key"), "vk", "application/octet-stream").unwrap();
        core.set_policy(&a, Policy::ChildList, vec![owner.identity().mr_enclave, nova.identity().mr_enclave])
            .unwrap();

        let b = ma_ctx(&core, "tenant", &nova).unwrap();
        assert_eq!(b.sk(), a.sk(), "listed child shares the project key");
        assert_eq!(get(&core, &r, &b).unwrap(), b"volume-key");

        assert!(matches!(ma_ctx(&core, "tenant", &stranger), Err(KmsError::AccessDenied(DenyReason::NotInAcl))));
        assert!(matches!(
            ma_ctx(&core, "tenant", &old_nova),
            Err(KmsError::AccessDenied(DenyReason::SvnDowngrade))
        ));

        // The owner can narrow the policy again; the child then loses access.
        core.set_policy(&a, Policy::Measurement, vec![]).unwrap();
        assert!(matches!(get(&core, &r, &b), Err(KmsError::AccessDenied(DenyReason::MeasurementMismatch))));
        assert!(matches!(core.set_policy(&b, Policy::Signer, vec![]), Err(KmsError::Forbidden(_))));

        // A fresh MA session of the owner enclave passes policy 1.
        let a2 = ma_ctx(&core, "tenant", &owner).unwrap();
        assert_eq!(get(&core, &r, &a2).unwrap(), b"volume-key");

        let plain_ra = ra_ctx(&core, "tenant");
        assert!(matches!(get(&core, &r, &plain_ra), Err(KmsError::AttestationRequired)));
        let other = ma_ctx(&core, "elsewhere", &stranger).unwrap();
        assert!(matches!(get(&core, &r, &other), Err(KmsError::Forbidden(_))));
    }

    #[test]
    fn ra_sessions_create_policy_three_only() {
        let dir = tempfile::tempdir().unwrap();
        let p = platform();
        let core = core_on(dir.path(), enclave_on(&p, b"barbie-v1", b"s", 1), KekMode::SealDerived);
        let ctx = ra_ctx(&core, "aware");
        assert!(matches!(core.set_policy(&ctx, Policy::Measurement, vec![]), Err(KmsError::PolicyNotAllowed)));
        let child = enclave_on(&p, b"child", b"c", 1);
        let rec = core.set_policy(&ctx, Policy::ChildList, vec![child.identity().mr_enclave]).unwrap();
        assert_eq!(rec.origin, Mode::Ra);
        assert_eq!(rec.owner_mr_enclave, None);
        let r = core.store_secret(&ctx, &put(&ctx, b"s3cret"), "n", "t").unwrap();
        assert_eq!(get(&core, &r, &ctx).unwrap(), b"s3cret");
        let c = ma_ctx(&core, "aware", &child).unwrap();
        assert_eq!(get(&core, &r, &c).unwrap(), b"s3cret");
        let other_ra = ra_ctx(&core, "aware");
        assert!(matches!(core.set_policy(&other_ra, Policy::ChildList, vec![]), Err(KmsError::Forbidden(_))));
    }

    #[test]
    fn legacy_path() {
        let dir = tempfile::tempdir().unwrap();
        let core = core_on(dir.path(), enclave_on(&platform(), b"barbie-v1", b"s", 1), KekMode::SealDerived);
        let r = core.legacy_store("projA", b"legacy-pw", "n", "text/plain", "token").unwrap();
        assert_eq!(core.legacy_retrieve(&r, "projA").unwrap().as_slice(), b"legacy-pw");
        assert!(matches!(core.legacy_retrieve(&r, "projB"), Err(KmsError::Forbidden(_))));
        let ctx = ra_ctx(&core, "projA");
        let v2 = core.store_secret(&ctx, &put(&ctx, b"attested"), "n", "t").unwrap();
        assert!(matches!(core.legacy_retrieve(&v2, "projA"), Err(KmsError::AttestationRequired)));
        assert!(!scan(dir.path(), b"legacy-pw"));
    }

    #[test]
    fn tampered_secret_record_is_an_integrity_violation() {
        let dir = tempfile::tempdir().unwrap();
        let core = core_on(dir.path(), enclave_on(&platform(), b"barbie-v1", b"s", 1), KekMode::SealDerived);
        let a = core.legacy_store("projA", b"a", "n", "t", "tok").unwrap();
        let mut rec = core.load_secret(&a).unwrap();
        rec.project_id = "projB".into();
        core.store().put(Table::Secrets, &a, &encode_record(&rec)).unwrap();
        assert!(matches!(core.legacy_retrieve(&a, "projB"), Err(KmsError::IntegrityViolation)));
    }

    #[test]
    fn restart_recovery() {
        let dir = tempfile::tempdir().unwrap();
        let p = platform();
        let server = enclave_on(&p, b"barbie-v1", b"s", 1);

        // Seal-derived.
        let sd = dir.path().join("sd");
        let (r, sid) = {
            let core = core_on(&sd, server.clone(), KekMode::SealDerived);
            let ctx = ra_ctx(&core, "p");
            (core.store_secret(&ctx, &put(&ctx, b"persist"), "n", "t").unwrap(), ctx.session_id().to_owned())
        };
        let core = core_on(&sd, server.clone(), KekMode::SealDerived);
        let ctx = core.load_session(&sid).unwrap();
        assert_eq!(get(&core, &r, &ctx).unwrap(), b"persist");

        // Admin-provisioned.
        let ap = dir.path().join("ap");
        let core = core_on(&ap, server.clone(), KekMode::AdminProvisioned);
        assert!(!core.kek_present());
        assert!(matches!(core.legacy_store("p", b"x", "n", "t", "tok"), Err(KmsError::KekMissing)));
        let (admin, client) = ra(&server);
        let sk_kek = crypto::aead_seal(&client.session_key().unwrap(), &[7u8; 32], SK_KEK_AAD, &mut OsRng);
        core.provision_kek(&sk_kek, &admin, false).unwrap();
        assert_eq!(core.kek_source(), Some(KekSource::AdminRa));
        let r = core.legacy_store("p", b"admin-kek", "n", "t", "tok").unwrap();
        drop(core);
        let core = core_on(&ap, server.clone(), KekMode::AdminProvisioned);
        assert_eq!(core.legacy_retrieve(&r, "p").unwrap().as_slice(), b"admin-kek");

        // Another platform cannot unseal either KEK, not even in seal-derived mode.
        let foreign = enclave_on(&platform(), b"barbie-v1", b"s", 1);
        for (d, mode) in [(&sd, KekMode::SealDerived), (&ap, KekMode::AdminProvisioned)] {
            let core = core_on(d, foreign.clone(), mode);
            assert!(!core.kek_present());
            assert!(matches!(core.legacy_retrieve(&r, "p"), Err(KmsError::KekMissing)));
        }
        let core = core_on(&ap, foreign.clone(), KekMode::AdminProvisioned);
        let (admin, client) = ra(&foreign);
        let sk_kek = crypto::aead_seal(&client.session_key().unwrap(), &[7u8; 32], SK_KEK_AAD, &mut OsRng);
        core.provision_kek(&sk_kek, &admin, false).unwrap();
        assert_eq!(core.legacy_retrieve(&r, "p").unwrap().as_slice(), b"admin-kek");
    }

    #[test]
    fn expired_session_is_unknown() {
        let dir = tempfile::tempdir().unwrap();
        let core = core_on(dir.path(), enclave_on(&platform(), b"barbie-v1", b"s", 1), KekMode::SealDerived)
            .with_session_ttl(Duration::ZERO);
        let sid = SessionId::random(&mut OsRng);
        core.persist_session(&sid, "p", Mode::Ra, None, &[1; 16]).unwrap();
        let mut rec: SessionRecord = decode_record(&core.store().get(Table::Sessions, &sid.to_hex()).unwrap()).unwrap();
        rec.created_at -= 10;
        core.store().put(Table::Sessions, &sid.to_hex(), &encode_record(&rec)).unwrap();
        assert!(matches!(core.load_session(&sid.to_hex()), Err(KmsError::UnknownSession)));
        assert!(matches!(core.load_session("nope"), Err(KmsError::UnknownSession)));
    }

    #[test]
    fn master_hierarchy_separates_projects() {
        let e = enclave_on(&platform(), b"barbie-v1", b"s", 1);
        let kek = seal_kek(&e).with_hierarchy(KekHierarchy::Master);
        assert_ne!(*kek.key_for("a"), *kek.key_for("b"));
        assert_ne!(*kek.key_for("a"), *kek.kek);
        let ct = encrypt_for_project(&kek, "a", b"v", &mut OsRng);
        assert_eq!(decrypt_for_project(&kek, "a", &ct).unwrap().as_slice(), b"v");
        let single = seal_kek(&e);
        assert!(decrypt_for_project(&single, "a", &ct).is_err());
    }

    #[test]
    fn replayed_stale_record_is_not_detected() {
        // Known gap: an old, validly encrypted record written back is accepted.
        let dir = tempfile::tempdir().unwrap();
        let core = core_on(dir.path(), enclave_on(&platform(), b"barbie-v1", b"s", 1), KekMode::SealDerived);
        let owner = enclave_on(core.enclave().platform(), b"o", b"s", 1);
        let ctx = ma_ctx(&core, "p", &owner).unwrap();
        let old = core.store().get(Table::Projects, "p").unwrap();
        core.set_policy(&ctx, Policy::ChildList, vec![]).unwrap();
        core.store().put(Table::Projects, "p", &old).unwrap();
        let replayed = core.project_record("p").unwrap().unwrap();
        assert_eq!(replayed.policy_no, Policy::Measurement, "replay goes unnoticed");
    }

    proptest::proptest! {
        #![proptest_config(proptest::prelude::ProptestConfig::with_cases(24))]
        #[test]
        fn plaintext_never_reaches_the_store(secrets in proptest::collection::vec(
            proptest::collection::vec(proptest::prelude::any::<u8>(), 8..=64), 1..6)) {
            let dir = tempfile::tempdir().unwrap();
            let core = core_on(dir.path(), enclave_on(&platform(), b"barbie-v1", b"s", 1), KekMode::SealDerived);
            let ctx = ra_ctx(&core, "p");
            for s in &secrets {
                let r = core.store_secret(&ctx, &put(&ctx, s), "n", "t").unwrap();
                proptest::prop_assert_eq!(&get(&core, &r, &ctx).unwrap(), s);
            }
            for s in &secrets {
                proptest::prop_assert!(!scan(dir.path(), s));
            }
        }
    }
}
