// SPDX-License-Identifier: Apache-2.0

//! Software crypto path: the v1 API with a plain key file instead of the
//! enclave. Records share the enclave path's layout.

use std::io::Write;
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use barbie_core::crypto;
use barbie_core::kms::{KmsError, Mode, SecretRecord};
use barbie_core::store::{Store, StoreError, Table};
use rand::rngs::OsRng;
use zeroize::Zeroizing;

pub struct PassThrough {
    store: Store,
    key: Zeroizing<[u8; 32]>,
}

impl PassThrough {
    /// Loads the hex key file, creating it on first use.
    pub fn open(store: Store, key_file: &Path) -> std::io::Result<Self> {
        let key = match std::fs::read_to_string(key_file) {
            Ok(text) => {
                let mut key = [0u8; 32];
                hex::decode_to_slice(text.trim(), &mut key)
                    .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))?;
                key
            }
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
                let key: [u8; 32] = crypto::random_array(&mut OsRng);
                if let Some(dir) = key_file.parent() {
                    std::fs::create_dir_all(dir)?;
                }
                match std::fs::OpenOptions::new().write(true).create_new(true).open(key_file) {
                    Ok(mut f) => {
                        f.write_all(hex::encode(key).as_bytes())?;
                        f.sync_all()?;
                        key
                    }
                    // Another instance created it first.
                    Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                        return Self::open(store, key_file);
                    }
                    Err(e) => return Err(e),
                }
            }
            Err(e) => return Err(e),
        };
        Ok(PassThrough { store, key: Zeroizing::new(key) })
    }

    pub fn store_secret(
        &self,
        project_id: &str,
        plaintext: &[u8],
        name: &str,
        content_type: &str,
        creator_tag: &str,
    ) -> Result<String, KmsError> {
        barbie_core::store::validate_key(project_id)?;
        let mut record = SecretRecord {
            ref_id: String::new(),
            project_id: project_id.to_owned(),
            kek_secret: crypto::aead_seal(self.key.as_ref(), plaintext, project_id.as_bytes(), &mut OsRng),
            name: name.to_owned(),
            content_type: content_type.to_owned(),
            mode: Mode::Legacy,
            creator_session: None,
            creator_identity: None,
            creator_tag: Some(creator_tag.to_owned()),
            created_at: SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0),
        };
        loop {
            record.ref_id = hex::encode(crypto::random_array::<16, _>(&mut OsRng));
            let body = serde_json::to_vec_pretty(&record).expect("records serialize");
            match self.store.put_if_absent(Table::Secrets, &record.ref_id, &body) {
                Ok(()) => return Ok(record.ref_id),
                Err(StoreError::Exists) => continue,
                Err(e) => return Err(e.into()),
            }
        }
    }

    pub fn retrieve_secret(&self, ref_id: &str, project_id: &str) -> Result<Zeroizing<Vec<u8>>, KmsError> {
        let bytes = match self.store.get(Table::Secrets, ref_id) {
            Ok(b) => b,
            Err(StoreError::NotFound | StoreError::InvalidKey(_)) => return Err(KmsError::NotFound),
            Err(e) => return Err(e.into()),
        };
        let record: SecretRecord = serde_json::from_slice(&bytes).map_err(|_| KmsError::IntegrityViolation)?;
        if record.project_id != project_id {
            return Err(KmsError::Forbidden("secret belongs to another project"));
        }
        crypto::aead_open(self.key.as_ref(), &record.kek_secret, project_id.as_bytes())
            .map(Zeroizing::new)
            .map_err(|_| KmsError::IntegrityViolation)
    }
}
