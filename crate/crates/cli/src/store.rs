//! Content-addressed stage artifacts. A stage's key hashes everything that
//! determines its output (its own config plus upstream keys), so reruns and
//! sweep points reuse whatever did not change.

use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::Result;

#[derive(Clone, Debug)]
pub struct Store {
    root: PathBuf,
}

/// `<stage>-<first 16 hex digits of sha256(stage ‖ json(parts))>`.
pub fn key(stage: &str, parts: &impl Serialize) -> Result<String> {
    let mut h = Sha256::new();
    h.update(stage.as_bytes());
    h.update([0]);
    h.update(serde_json::to_vec(parts)?);
    Ok(format!("{stage}-{}", &hex::encode(h.finalize())[..16]))
}

impl Store {
    pub fn open(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        std::fs::create_dir_all(&root)?;
        Ok(Self { root })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn dir(&self, key: &str) -> PathBuf {
        self.root.join(key)
    }

    pub fn contains(&self, key: &str) -> bool {
        self.dir(key).join(".complete").is_file()
    }

    /// Load the artifact under `key`, building it first if absent. `build`
    /// writes into a scratch directory that is renamed into place only
    /// after it returns, so an interrupted stage leaves nothing behind.
    pub fn get_or_build<T>(
        &self,
        key: &str,
        build: impl FnOnce(&Path) -> Result<T>,
        load: impl FnOnce(&Path) -> Result<T>,
    ) -> Result<T> {
        let dir = self.dir(key);
        if self.contains(key) {
            log::info!("reusing {}", dir.display());
            return load(&dir);
        }
        let scratch = self.root.join(format!(".tmp-{key}-{}", std::process::id()));
        if scratch.exists() {
            std::fs::remove_dir_all(&scratch)?;
        }
        std::fs::create_dir_all(&scratch)?;
        let out = build(&scratch)?;
        std::fs::write(scratch.join(".complete"), key)?;
        if dir.exists() {
            std::fs::remove_dir_all(&dir)?;
        }
        std::fs::rename(&scratch, &dir)?;
        Ok(out)
    }
}
