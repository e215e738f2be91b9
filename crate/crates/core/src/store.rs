// SPDX-License-Identifier: Apache-2.0

//! Record store shared by every server instance.
//!
//! One file per record: `<root>/<table>/<key>.json`. Writers stage the value in
//! a dot-prefixed temp file in the same directory, fsync it, then `rename` it
//! over the target (`put`) or `link` it to the target (`put_if_absent`, which
//! fails if the target exists). Readers therefore see either the previous or
//! the new record, never a partial one, and exclusive creation holds across
//! processes sharing the same root.

use std::fs::{self, File, OpenOptions};
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("invalid record key {0:?}")]
    InvalidKey(String),
    #[error("record not found")]
    NotFound,
    #[error("record already exists")]
    Exists,
    #[error("store io: {0}")]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Table {
    Projects,
    Secrets,
    Sessions,
}

impl Table {
    pub const ALL: [Table; 3] = [Table::Projects, Table::Secrets, Table::Sessions];

    pub fn dir_name(self) -> &'static str {
        match self {
            Table::Projects => "projects",
            Table::Secrets => "secrets",
            Table::Sessions => "sessions",
        }
    }
}

static TMP_COUNTER: AtomicU64 = AtomicU64::new(0);

#[derive(Debug, Clone)]
pub struct Store {
    root: PathBuf,
    durable: bool,
}

/// Keys become file names, so they are restricted to `[A-Za-z0-9._-]`,
/// must not start with a dot and are at most 128 bytes.
pub fn validate_key(key: &str) -> Result<(), StoreError> {
    let ok = !key.is_empty()
        && key.len() <= 128
        && !key.starts_with('.')
        && key.bytes().all(|b| b.is_ascii_alphanumeric() || matches!(b, b'.' | b'_' | b'-'));
    if ok {
        Ok(())
    } else {
        Err(StoreError::InvalidKey(key.to_owned()))
    }
}

impl Store {
    pub fn open(root: impl Into<PathBuf>) -> Result<Self, StoreError> {
        let root = root.into();
        for t in Table::ALL {
            fs::create_dir_all(root.join(t.dir_name()))?;
        }
        Ok(Store { root, durable: true })
    }

    /// Skips fsync calls. Records are still written atomically.
    pub fn without_fsync(mut self) -> Self {
        self.durable = false;
        self
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn record_path(&self, table: Table, key: &str) -> PathBuf {
        self.root.join(table.dir_name()).join(format!("{key}.json"))
    }

    fn stage(&self, table: Table, key: &str, value: &[u8]) -> Result<PathBuf, StoreError> {
        validate_key(key)?;
        let n = TMP_COUNTER.fetch_add(1, Ordering::Relaxed);
        let tmp = self
            .root
            .join(table.dir_name())
            .join(format!(".tmp.{key}.{}.{n}", std::process::id()));
        let mut f = OpenOptions::new().write(true).create_new(true).open(&tmp)?;
        let written = f.write_all(value).and_then(|_| if self.durable { f.sync_all() } else { Ok(()) });
        if let Err(e) = written {
            let _ = fs::remove_file(&tmp);
            return Err(e.into());
        }
        Ok(tmp)
    }

    fn sync_dir(&self, table: Table) -> Result<(), StoreError> {
        if self.durable {
            File::open(self.root.join(table.dir_name()))?.sync_all()?;
        }
        Ok(())
    }

    /// Last writer wins. Durable before return.
    pub fn put(&self, table: Table, key: &str, value: &[u8]) -> Result<(), StoreError> {
        let tmp = self.stage(table, key, value)?;
        if let Err(e) = fs::rename(&tmp, self.record_path(table, key)) {
            let _ = fs::remove_file(&tmp);
            return Err(e.into());
        }
        self.sync_dir(table)
    }

    pub fn get(&self, table: Table, key: &str) -> Result<Vec<u8>, StoreError> {
        validate_key(key)?;
        match fs::read(self.record_path(table, key)) {
            Ok(v) => Ok(v),
            Err(e) if e.kind() == io::ErrorKind::NotFound => Err(StoreError::NotFound),
            Err(e) => Err(e.into()),
        }
    }

    /// Atomic across threads and processes: exactly one concurrent caller wins.
    pub fn put_if_absent(&self, table: Table, key: &str, value: &[u8]) -> Result<(), StoreError> {
        let tmp = self.stage(table, key, value)?;
        let linked = fs::hard_link(&tmp, self.record_path(table, key));
        let _ = fs::remove_file(&tmp);
        match linked {
            Ok(()) => self.sync_dir(table),
            Err(e) if e.kind() == io::ErrorKind::AlreadyExists => Err(StoreError::Exists),
            Err(e) => Err(e.into()),
        }
    }

    /// Keys currently present in `table`, sorted.
    pub fn keys(&self, table: Table) -> Result<Vec<String>, StoreError> {
        let mut out = Vec::new();
        for entry in fs::read_dir(self.root.join(table.dir_name()))? {
            let name = entry?.file_name();
            let name = name.to_string_lossy();
            if let Some(key) = name.strip_suffix(".json") {
                if !key.starts_with('.') {
                    out.push(key.to_owned());
                }
            }
        }
        out.sort();
        Ok(out)
    }
}
