//! Versioned model registry on disk:
//!
//! ```text
//! <root>/v<N>/model.bin
//! <root>/v<N>/meta
//! <root>/LATEST          # "N", replaced by rename
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::mlp::{load_model, save_model, MlpError, MlpModel};

#[derive(Debug, Error)]
pub enum RegistryError {
    #[error("model version {0} not found")]
    NotFound(u32),
    #[error("version {new} is not newer than latest {latest}")]
    NonMonotonic { new: u32, latest: u32 },
    #[error("bad registry uri {0:?}")]
    BadUri(String),
    #[error("corrupt LATEST pointer: {0:?}")]
    BadPointer(String),
    #[error(transparent)]
    Model(#[from] MlpError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Parses `registry://v<N>`.
pub fn parse_uri(uri: &str) -> Result<u32, RegistryError> {
    uri.strip_prefix("registry://v")
        .and_then(|n| n.parse().ok())
        .filter(|n| *n > 0)
        .ok_or_else(|| RegistryError::BadUri(uri.into()))
}

pub fn uri_for(version: u32) -> String {
    format!("registry://v{version}")
}

#[derive(Debug, Clone)]
pub struct ModelRegistry {
    root: PathBuf,
}

impl ModelRegistry {
    pub fn open(root: impl AsRef<Path>) -> Result<Self, RegistryError> {
        let root = root.as_ref().to_path_buf();
        fs::create_dir_all(&root)?;
        Ok(ModelRegistry { root })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn dir(&self, version: u32) -> PathBuf {
        self.root.join(format!("v{version}"))
    }

    pub fn model_path(&self, version: u32) -> PathBuf {
        self.dir(version).join("model.bin")
    }

    pub fn latest(&self) -> Result<Option<u32>, RegistryError> {
        match fs::read_to_string(self.root.join("LATEST")) {
            Ok(s) => s.trim().parse().map(Some).map_err(|_| RegistryError::BadPointer(s)),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(e.into()),
        }
    }

    pub fn next_version(&self) -> Result<u32, RegistryError> {
        Ok(self.latest()?.unwrap_or(0) + 1)
    }

    /// Stores the model under `model.meta.version` and then moves `LATEST`
    /// to it. The version must exceed the current latest.
    pub fn register(&self, model: &MlpModel) -> Result<u32, RegistryError> {
        let v = model.meta.version;
        let latest = self.latest()?.unwrap_or(0);
        if v <= latest {
            return Err(RegistryError::NonMonotonic { new: v, latest });
        }
        let dir = self.dir(v);
        fs::create_dir_all(&dir)?;
        save_model(model, &dir.join("model.bin"))?;
        let meta = serde_json::to_vec_pretty(&model.meta).expect("meta serializes");
        fs::write(dir.join("meta"), meta)?;
        let tmp = self.root.join("LATEST.tmp");
        fs::write(&tmp, v.to_string())?;
        fs::rename(&tmp, self.root.join("LATEST"))?;
        Ok(v)
    }

    pub fn load(&self, version: u32) -> Result<MlpModel, RegistryError> {
        let path = self.model_path(version);
        if !path.exists() {
            return Err(RegistryError::NotFound(version));
        }
        Ok(load_model(&path)?)
    }

    pub fn load_uri(&self, uri: &str) -> Result<MlpModel, RegistryError> {
        self.load(parse_uri(uri)?)
    }

    pub fn load_latest(&self) -> Result<Option<MlpModel>, RegistryError> {
        self.latest()?.map(|v| self.load(v)).transpose()
    }
}
