//! Filesystem-backed per-user module store.
//!
//! Layout: `<root>/<user_id>/<name>.mod`, one file per module, holding the
//! canonical code bytes. Writes go to a temporary file in the same directory
//! and are renamed into place, so readers see either the old or the new
//! module in full. Files are not fsynced: a deployment has to survive the
//! node process, not the machine, and an fsync per write would dominate
//! hot-replacement latency.

use std::collections::BTreeMap;
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::sync::RwLock;
use std::time::UNIX_EPOCH;

use thiserror::Error;

use crate::protocol::{
    canonicalize_str, is_valid_module_name, is_valid_user_id, now_ms, CodeModule, Signature,
};

pub const MODULE_EXTENSION: &str = "mod";

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("module {name} not found for user {user_id}")]
    NotFound { user_id: String, name: String },
    #[error("integrity check failed for {user_id}/{name}: expected {expected}, found {found}")]
    Integrity {
        user_id: String,
        name: String,
        expected: Signature,
        found: Signature,
    },
    #[error("invalid module: {0}")]
    Validation(String),
    #[error("storage error at {}: {source}", path.display())]
    Io { path: PathBuf, source: io::Error },
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> StoreError + '_ {
    move |source| StoreError::Io {
        path: path.to_owned(),
        source,
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct Entry {
    signature: Signature,
    deployed_at: u64,
}

/// Per-user modules under one root directory.
///
/// The in-memory index records the signature of each stored module; loads
/// re-read the file and verify its content against it.
#[derive(Debug)]
pub struct ModuleStore {
    root: PathBuf,
    index: RwLock<BTreeMap<(String, String), Entry>>,
}

impl ModuleStore {
    /// Opens (creating if needed) a store and indexes the modules already on disk.
    pub fn open(root: impl Into<PathBuf>) -> Result<Self, StoreError> {
        let root = root.into();
        fs::create_dir_all(&root).map_err(io_err(&root))?;
        let mut index = BTreeMap::new();
        for user_dir in fs::read_dir(&root).map_err(io_err(&root))? {
            let user_dir = user_dir.map_err(io_err(&root))?;
            let Some(user_id) = user_dir.file_name().to_str().map(str::to_owned) else {
                continue;
            };
            if !is_valid_user_id(&user_id) || !user_dir.path().is_dir() {
                continue;
            }
            let dir = user_dir.path();
            for file in fs::read_dir(&dir).map_err(io_err(&dir))? {
                let path = file.map_err(io_err(&dir))?.path();
                if path.extension().and_then(|e| e.to_str()) != Some(MODULE_EXTENSION) {
                    continue;
                }
                let Some(name) = path.file_stem().and_then(|s| s.to_str()).map(str::to_owned)
                else {
                    continue;
                };
                if !is_valid_module_name(&name) {
                    continue;
                }
                let bytes = fs::read(&path).map_err(io_err(&path))?;
                let Ok(code) = String::from_utf8(bytes) else {
                    continue;
                };
                let deployed_at = fs::metadata(&path)
                    .and_then(|m| m.modified())
                    .ok()
                    .and_then(|t| t.duration_since(UNIX_EPOCH).ok())
                    .map(|d| d.as_millis() as u64)
                    .unwrap_or(0);
                index.insert(
                    (user_id.clone(), name),
                    Entry {
                        signature: Signature::of_code(&code),
                        deployed_at,
                    },
                );
            }
        }
        Ok(Self {
            root,
            index: RwLock::new(index),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn module_path(&self, user_id: &str, name: &str) -> PathBuf {
        self.root
            .join(user_id)
            .join(format!("{name}.{MODULE_EXTENSION}"))
    }

    /// Writes `module` to disk, replacing any previous version, and returns
    /// the stored record with `deployed_at` set to now.
    pub fn store_module(&self, module: &CodeModule) -> Result<CodeModule, StoreError> {
        if !is_valid_user_id(&module.user_id) {
            return Err(StoreError::Validation(format!(
                "user id `{}` is not path-safe",
                module.user_id
            )));
        }
        if !is_valid_module_name(&module.name) {
            return Err(StoreError::Validation(format!(
                "module name `{}` must match [a-z0-9_]{{1,64}}",
                module.name
            )));
        }
        let found = Signature::of_code(&module.code);
        if found != module.signature {
            return Err(StoreError::Integrity {
                user_id: module.user_id.clone(),
                name: module.name.clone(),
                expected: module.signature.clone(),
                found,
            });
        }
        let canonical = canonicalize_str(&module.code);
        let dir = self.root.join(&module.user_id);
        fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        let mut tmp = tempfile::Builder::new()
            .prefix(".incoming-")
            .suffix(".tmp")
            .tempfile_in(&dir)
            .map_err(io_err(&dir))?;
        tmp.write_all(canonical.as_bytes())
            .map_err(io_err(tmp.path()))?;

        let path = self.module_path(&module.user_id, &module.name);
        let deployed_at = now_ms();
        let mut index = self.index.write().unwrap_or_else(|e| e.into_inner());
        tmp.persist(&path).map_err(|e| StoreError::Io {
            path: path.clone(),
            source: e.error,
        })?;
        index.insert(
            (module.user_id.clone(), module.name.clone()),
            Entry {
                signature: module.signature.clone(),
                deployed_at,
            },
        );
        Ok(CodeModule {
            user_id: module.user_id.clone(),
            name: module.name.clone(),
            code: canonical,
            signature: module.signature.clone(),
            deployed_at,
        })
    }

    /// Reads the module from disk and verifies it against the index.
    pub fn load_module(&self, user_id: &str, name: &str) -> Result<CodeModule, StoreError> {
        let not_found = || StoreError::NotFound {
            user_id: user_id.to_owned(),
            name: name.to_owned(),
        };
        if !is_valid_user_id(user_id) || !is_valid_module_name(name) {
            return Err(not_found());
        }
        let index = self.index.read().unwrap_or_else(|e| e.into_inner());
        let entry = index
            .get(&(user_id.to_owned(), name.to_owned()))
            .ok_or_else(not_found)?;
        let path = self.module_path(user_id, name);
        let bytes = match fs::read(&path) {
            Ok(b) => b,
            Err(e) if e.kind() == io::ErrorKind::NotFound => return Err(not_found()),
            Err(e) => return Err(StoreError::Io { path, source: e }),
        };
        let code = String::from_utf8_lossy(&bytes).into_owned();
        let found = Signature::of_code(&code);
        if found != entry.signature {
            return Err(StoreError::Integrity {
                user_id: user_id.to_owned(),
                name: name.to_owned(),
                expected: entry.signature.clone(),
                found,
            });
        }
        Ok(CodeModule {
            user_id: user_id.to_owned(),
            name: name.to_owned(),
            code,
            signature: entry.signature.clone(),
            deployed_at: entry.deployed_at,
        })
    }

    /// Signature of the indexed module, without touching the disk.
    pub fn signature_of(&self, user_id: &str, name: &str) -> Option<Signature> {
        let index = self.index.read().unwrap_or_else(|e| e.into_inner());
        index
            .get(&(user_id.to_owned(), name.to_owned()))
            .map(|e| e.signature.clone())
    }

    /// `(user_id, name, signature)` for every indexed module.
    pub fn snapshot(&self) -> Vec<(String, String, Signature)> {
        let index = self.index.read().unwrap_or_else(|e| e.into_inner());
        index
            .iter()
            .map(|((u, n), e)| (u.clone(), n.clone(), e.signature.clone()))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store() -> (tempfile::TempDir, ModuleStore) {
        let dir = tempfile::tempdir().unwrap();
        let store = ModuleStore::open(dir.path().join("modules")).unwrap();
        (dir, store)
    }

    #[test]
    fn store_then_load_round_trips_canonical_code() {
        let (_d, s) = store();
        let m = CodeModule::new("u1", "agg", "mean(xs)  \r\n");
        let stored = s.store_module(&m).unwrap();
        assert!(stored.deployed_at > 0);
        let loaded = s.load_module("u1", "agg").unwrap();
        assert_eq!(loaded.code, "mean(xs)\n");
        assert_eq!(loaded.signature, m.signature);
        assert_eq!(fs::read(s.module_path("u1", "agg")).unwrap(), b"mean(xs)\n");
    }

    #[test]
    fn replacing_keeps_one_file() {
        let (_d, s) = store();
        s.store_module(&CodeModule::new("u1", "agg", "mean(xs)"))
            .unwrap();
        s.store_module(&CodeModule::new("u1", "agg", "max(xs)"))
            .unwrap();
        let files: Vec<_> = fs::read_dir(s.root().join("u1")).unwrap().collect();
        assert_eq!(files.len(), 1);
        assert_eq!(
            s.load_module("u1", "agg").unwrap().signature,
            Signature::of_code("max(xs)")
        );
    }

    #[test]
    fn users_do_not_collide() {
        let (_d, s) = store();
        s.store_module(&CodeModule::new("u1", "agg", "min(xs)"))
            .unwrap();
        s.store_module(&CodeModule::new("u2", "agg", "max(xs)"))
            .unwrap();
        assert_eq!(s.load_module("u1", "agg").unwrap().code, "min(xs)\n");
        assert_eq!(s.load_module("u2", "agg").unwrap().code, "max(xs)\n");
        assert!(s.root().join("u1/agg.mod").exists());
        assert!(s.root().join("u2/agg.mod").exists());
    }

    #[test]
    fn missing_module_is_not_found() {
        let (_d, s) = store();
        let err = s.load_module("u1", "nope").unwrap_err();
        assert!(matches!(err, StoreError::NotFound { .. }));
        assert!(err.to_string().contains("nope") && err.to_string().contains("u1"));
    }

    #[test]
    fn load_does_not_change_the_index() {
        let (_d, s) = store();
        s.store_module(&CodeModule::new("u1", "agg", "mean(xs)"))
            .unwrap();
        let before = s.snapshot();
        s.load_module("u1", "agg").unwrap();
        let _ = s.load_module("u1", "other");
        assert_eq!(before, s.snapshot());
    }

    #[test]
    fn bad_signature_is_rejected_and_old_module_kept() {
        let (_d, s) = store();
        s.store_module(&CodeModule::new("u1", "agg", "mean(xs)"))
            .unwrap();
        let mut bad = CodeModule::new("u1", "agg", "max(xs)");
        bad.signature = Signature::of_code("something else");
        assert!(matches!(
            s.store_module(&bad),
            Err(StoreError::Integrity { .. })
        ));
        assert_eq!(s.load_module("u1", "agg").unwrap().code, "mean(xs)\n");
    }

    #[test]
    fn unsafe_names_are_rejected() {
        let (_d, s) = store();
        let m = CodeModule::new("u1", "../evil", "mean(xs)");
        assert!(matches!(s.store_module(&m), Err(StoreError::Validation(_))));
        let m = CodeModule::new("../u1", "agg", "mean(xs)");
        assert!(matches!(s.store_module(&m), Err(StoreError::Validation(_))));
    }

    #[test]
    fn tampering_on_disk_is_detected() {
        let (_d, s) = store();
        s.store_module(&CodeModule::new("u1", "agg", "mean(xs)"))
            .unwrap();
        fs::write(s.module_path("u1", "agg"), "max(xs)\n").unwrap();
        assert!(matches!(
            s.load_module("u1", "agg"),
            Err(StoreError::Integrity { .. })
        ));
    }

    #[test]
    fn reopening_reindexes_existing_files() {
        let (d, s) = store();
        s.store_module(&CodeModule::new("u1", "agg", "mean(xs)"))
            .unwrap();
        drop(s);
        let s = ModuleStore::open(d.path().join("modules")).unwrap();
        assert_eq!(
            s.load_module("u1", "agg").unwrap().signature,
            Signature::of_code("mean(xs)")
        );
    }
}
