// SPDX-License-Identifier: Apache-2.0

//! Instance configuration, read from JSON with environment overrides.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use barbie_core::kms::{KekHierarchy, KekMode};
use serde::{Deserialize, Serialize};

pub const ENV_LISTEN: &str = "BARBIE_LISTEN";
pub const ENV_STORE_ROOT: &str = "BARBIE_STORE_ROOT";

/// Signer key used when the config does not name one.
pub const DEFAULT_SIGNER_KEY: &str = "barbie-enclave-signer-v1";

/// `Enclave` runs every operation through the trusted core. `PassThrough`
/// keeps the v1 API but encrypts with a software key outside any enclave,
/// as the stock key manager would.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum CryptoPath {
    #[default]
    Enclave,
    PassThrough,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InstanceConfig {
    pub instance_id: String,
    #[serde(default = "default_listen")]
    pub listen_address: String,
    pub store_root: PathBuf,
    pub platform_file: PathBuf,
    /// Path to the enclave manifest; its SHA-256 is the server MRENCLAVE.
    pub enclave_manifest: PathBuf,
    #[serde(default = "default_signer")]
    pub enclave_signer_key: String,
    #[serde(default = "default_svn")]
    pub isv_svn: u16,
    pub kek_mode: KekMode,
    #[serde(default)]
    pub kek_hierarchy: KekHierarchy,
    /// Defaults to `<store_root>/kek/<instance_id>.sealed.json`.
    #[serde(default)]
    pub sealed_kek_path: Option<PathBuf>,
    #[serde(default)]
    pub crypto_path: CryptoPath,
    /// Software key file for `PASS_THROUGH`; created on first start.
    #[serde(default)]
    pub pass_through_key_file: Option<PathBuf>,
    pub admin_token: String,
    #[serde(default)]
    pub keystone_tokens: BTreeMap<String, String>,
    /// Extra quoting-authority public keys accepted for client enclaves.
    #[serde(default)]
    pub client_authority_files: Vec<PathBuf>,
    /// JSON-lines request log. Absent means no log.
    #[serde(default)]
    pub request_log: Option<PathBuf>,
    #[serde(default = "default_workers")]
    pub worker_threads: usize,
    #[serde(default = "default_true")]
    pub fsync: bool,
    #[serde(default = "default_handshake_ttl")]
    pub handshake_ttl_secs: u64,
    #[serde(default = "default_session_ttl")]
    pub session_ttl_secs: u64,
}

fn default_listen() -> String {
    "127.0.0.1:9311".into()
}
pub(crate) fn default_signer() -> String {
    DEFAULT_SIGNER_KEY.into()
}
fn default_svn() -> u16 {
    1
}
fn default_workers() -> usize {
    1
}
fn default_true() -> bool {
    true
}
fn default_handshake_ttl() -> u64 {
    300
}
fn default_session_ttl() -> u64 {
    3600
}

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("reading {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("parsing {path}: {source}")]
    Parse { path: PathBuf, source: serde_json::Error },
    #[error("invalid config: {0}")]
    Invalid(String),
}

impl InstanceConfig {
    /// Minimal config; the remaining fields take their defaults.
    pub fn new(
        instance_id: impl Into<String>,
        store_root: impl Into<PathBuf>,
        platform_file: impl Into<PathBuf>,
        enclave_manifest: impl Into<PathBuf>,
        kek_mode: KekMode,
        admin_token: impl Into<String>,
    ) -> Self {
        InstanceConfig {
            instance_id: instance_id.into(),
            listen_address: "127.0.0.1:0".into(),
            store_root: store_root.into(),
            platform_file: platform_file.into(),
            enclave_manifest: enclave_manifest.into(),
            enclave_signer_key: default_signer(),
            isv_svn: default_svn(),
            kek_mode,
            kek_hierarchy: KekHierarchy::default(),
            sealed_kek_path: None,
            crypto_path: CryptoPath::default(),
            pass_through_key_file: None,
            admin_token: admin_token.into(),
            keystone_tokens: BTreeMap::new(),
            client_authority_files: Vec::new(),
            request_log: None,
            worker_threads: default_workers(),
            fsync: true,
            handshake_ttl_secs: default_handshake_ttl(),
            session_ttl_secs: default_session_ttl(),
        }
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io { path: path.into(), source })?;
        let mut cfg: InstanceConfig =
            serde_json::from_str(&text).map_err(|source| ConfigError::Parse { path: path.into(), source })?;
        cfg.apply_env();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn apply_env(&mut self) {
        if let Ok(v) = std::env::var(ENV_LISTEN) {
            self.listen_address = v;
        }
        if let Ok(v) = std::env::var(ENV_STORE_ROOT) {
            self.store_root = v.into();
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let id_ok = !self.instance_id.is_empty()
            && self.instance_id.len() <= 64
            && self.instance_id.bytes().all(|b| b.is_ascii_alphanumeric() || b == b'-' || b == b'_');
        if !id_ok {
            return Err(ConfigError::Invalid(format!("instance_id {:?} must be [A-Za-z0-9_-]{{1,64}}", self.instance_id)));
        }
        if self.admin_token.is_empty() {
            return Err(ConfigError::Invalid("admin_token must not be empty".into()));
        }
        if self.keystone_tokens.contains_key(&self.admin_token) {
            return Err(ConfigError::Invalid("admin_token must not also be a project token".into()));
        }
        if self.worker_threads == 0 {
            return Err(ConfigError::Invalid("worker_threads must be at least 1".into()));
        }
        Ok(())
    }

    pub fn sealed_kek_path(&self) -> PathBuf {
        self.sealed_kek_path
            .clone()
            .unwrap_or_else(|| self.store_root.join("kek").join(format!("{}.sealed.json", self.instance_id)))
    }

    pub fn pass_through_key_file(&self) -> PathBuf {
        self.pass_through_key_file
            .clone()
            .unwrap_or_else(|| self.store_root.join("kek").join("pass-through.key"))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}
