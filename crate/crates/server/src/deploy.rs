// SPDX-License-Identifier: Apache-2.0

//! Lays out a deployment directory: platform file, enclave manifest,
//! authority key and a shared store, plus configs for instances on it.
//!
//! ```text
//! <root>/platform.json        simulated machine of the server instances
//! <root>/authority.json       public quoting key clients trust
//! <root>/barbie-enclave.manifest
//! <root>/store/               shared record store
//! ```

use std::collections::BTreeMap;
use std::io;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use barbie_core::enclave::{load_enclave, EnclaveHandle, PlatformState};
use barbie_core::kms::KekMode;
use rand::rngs::OsRng;

use crate::config::{default_signer, InstanceConfig};

/// Manifest bytes of the key-manager enclave.
pub const SERVER_MANIFEST: &[u8] = b"barbie-kms-enclave\nbuild=1\n";
pub const ADMIN_TOKEN: &str = "admin-token";

#[derive(Debug, Clone)]
pub struct Deployment {
    pub root: PathBuf,
    pub platform_file: PathBuf,
    pub authority_file: PathBuf,
    pub manifest_file: PathBuf,
    pub store_root: PathBuf,
    pub admin_token: String,
    /// token -> project.
    pub tokens: BTreeMap<String, String>,
}

impl Deployment {
    /// Creates the layout with a fresh platform, unless `platform.json` exists.
    pub fn create(root: &Path) -> io::Result<Self> {
        std::fs::create_dir_all(root)?;
        let d = Self::at(root);
        std::fs::create_dir_all(&d.store_root)?;
        if !d.platform_file.exists() {
            PlatformState::generate(&mut OsRng).save(&d.platform_file)?;
        }
        let platform = d.platform();
        platform.authority_key().save(&d.authority_file)?;
        std::fs::write(&d.manifest_file, SERVER_MANIFEST)?;
        Ok(d)
    }

    fn at(root: &Path) -> Self {
        let tokens = [("token-a", "project-a"), ("token-b", "project-b"), ("token-c", "project-c")]
            .into_iter()
            .map(|(t, p)| (t.to_owned(), p.to_owned()))
            .collect();
        Deployment {
            root: root.to_owned(),
            platform_file: root.join("platform.json"),
            authority_file: root.join("authority.json"),
            manifest_file: root.join("barbie-enclave.manifest"),
            store_root: root.join("store"),
            admin_token: ADMIN_TOKEN.into(),
            tokens,
        }
    }

    pub fn platform(&self) -> Arc<PlatformState> {
        Arc::new(PlatformState::load(&self.platform_file).expect("deployment platform file"))
    }

    /// A second machine in the same attestation domain, written to `<root>/<name>.json`.
    pub fn add_platform(&self, name: &str) -> io::Result<PathBuf> {
        let path = self.root.join(format!("{name}.json"));
        PlatformState::generate_with_authority(&mut OsRng, &self.platform()).save(&path)?;
        Ok(path)
    }

    /// Token for `project`, adding one when missing.
    pub fn token_for(&mut self, project: &str) -> String {
        if let Some((t, _)) = self.tokens.iter().find(|(_, p)| *p == project) {
            return t.clone();
        }
        let t = format!("token-{project}");
        self.tokens.insert(t.clone(), project.to_owned());
        t
    }

    pub fn config(&self, instance_id: &str, kek_mode: KekMode) -> InstanceConfig {
        let mut c = InstanceConfig::new(
            instance_id,
            &self.store_root,
            &self.platform_file,
            &self.manifest_file,
            kek_mode,
            &self.admin_token,
        );
        c.keystone_tokens = self.tokens.clone();
        c
    }

    /// Signer key string every server instance is configured with.
    pub fn server_signer() -> String {
        default_signer()
    }

    /// The enclave a server instance on the deployment platform runs.
    pub fn server_enclave(&self) -> EnclaveHandle {
        load_enclave(SERVER_MANIFEST, default_signer().as_bytes(), 1, self.platform()).expect("manifest is non-empty")
    }

    /// A client enclave on its own machine in the same attestation domain.
    pub fn client_enclave(&self, manifest: &[u8], signer: &[u8], isv_svn: u16) -> EnclaveHandle {
        let platform = PlatformState::generate_with_authority(&mut OsRng, &self.platform());
        load_enclave(manifest, signer, isv_svn, Arc::new(platform)).expect("client manifest is non-empty")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_is_reusable() {
        let dir = tempfile::tempdir().unwrap();
        let a = Deployment::create(dir.path()).unwrap();
        let b = Deployment::create(dir.path()).unwrap();
        assert_eq!(a.platform().authority_key(), b.platform().authority_key());
        assert!(a.store_root.is_dir());
        let cfg = a.config("n1", KekMode::SealDerived);
        cfg.validate().unwrap();
        assert_eq!(cfg.keystone_tokens.get("token-a").map(String::as_str), Some("project-a"));
    }
}
