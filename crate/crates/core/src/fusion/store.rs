//! Content-addressed snapshot storage.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("refusing to store an empty snapshot")]
    Empty,
    #[error("malformed snapshot reference {0:?}")]
    BadRef(String),
    #[error("snapshot {0} not found")]
    NotFound(String),
    #[error("snapshot store I/O: {0}")]
    Io(#[from] io::Error),
}

/// Hex SHA-256 of `bytes`; the key a snapshot is stored under.
pub fn content_ref(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub trait SnapshotStore: Send + Sync {
    /// Stores `bytes` and returns their content reference.
    fn put(&self, bytes: &[u8]) -> Result<String, StoreError>;
    fn get(&self, snapshot_ref: &str) -> Result<Vec<u8>, StoreError>;
}

/// Uploads a snapshot; identical bytes always map to the same reference.
pub fn upload_snapshot(store: &dyn SnapshotStore, bytes: &[u8]) -> Result<String, StoreError> {
    if bytes.is_empty() {
        return Err(StoreError::Empty);
    }
    store.put(bytes)
}

/// One file per snapshot, named by its content reference.
#[derive(Debug, Clone)]
pub struct DirectoryStore {
    root: PathBuf,
}

impl DirectoryStore {
    pub fn open(root: impl AsRef<Path>) -> Result<Self, StoreError> {
        fs::create_dir_all(root.as_ref())?;
        Ok(Self {
            root: root.as_ref().to_path_buf(),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn path_for(&self, snapshot_ref: &str) -> Result<PathBuf, StoreError> {
        if snapshot_ref.len() != 64 || !snapshot_ref.bytes().all(|b| b.is_ascii_hexdigit()) {
            return Err(StoreError::BadRef(snapshot_ref.to_string()));
        }
        Ok(self.root.join(snapshot_ref))
    }
}

impl SnapshotStore for DirectoryStore {
    fn put(&self, bytes: &[u8]) -> Result<String, StoreError> {
        let r = content_ref(bytes);
        let path = self.path_for(&r)?;
        if !path.exists() {
            let tmp = self.root.join(format!(".{r}.tmp"));
            fs::write(&tmp, bytes)?;
            fs::rename(&tmp, &path)?;
        }
        Ok(r)
    }

    fn get(&self, snapshot_ref: &str) -> Result<Vec<u8>, StoreError> {
        let path = self.path_for(snapshot_ref)?;
        fs::read(&path).map_err(|e| match e.kind() {
            io::ErrorKind::NotFound => StoreError::NotFound(snapshot_ref.to_string()),
            _ => StoreError::Io(e),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn content_addressing() {
        let dir = tempfile::tempdir().unwrap();
        let store = DirectoryStore::open(dir.path()).unwrap();
        let a = upload_snapshot(&store, b"flame").unwrap();
        let b = upload_snapshot(&store, b"flame").unwrap();
        assert_eq!(a, b);
        assert_eq!(store.get(&a).unwrap(), b"flame");
        assert_ne!(upload_snapshot(&store, b"smoke").unwrap(), a);
        assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 2);
    }

    #[test]
    fn rejects_empty_and_bad_refs() {
        let dir = tempfile::tempdir().unwrap();
        let store = DirectoryStore::open(dir.path()).unwrap();
        assert!(matches!(upload_snapshot(&store, b""), Err(StoreError::Empty)));
        assert!(matches!(store.get("../etc/passwd"), Err(StoreError::BadRef(_))));
        assert!(matches!(
            store.get(&content_ref(b"never stored")),
            Err(StoreError::NotFound(_))
        ));
    }

    #[test]
    fn write_failure_surfaces() {
        let dir = tempfile::tempdir().unwrap();
        let store = DirectoryStore::open(dir.path().join("s")).unwrap();
        fs::remove_dir(dir.path().join("s")).unwrap();
        assert!(matches!(store.put(b"x"), Err(StoreError::Io(_))));
    }
}
