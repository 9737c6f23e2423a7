//! Checkpoint directory convention shared by the command line and the service.

use std::path::{Path, PathBuf};

use serde_json::json;
use thiserror::Error;

use crate::importance::{ImportanceError, ImportanceModel};
use crate::stegonet::{StegoError, StegoModel};

pub const MODEL_DIR_ENV: &str = "VISCODE_MODEL_DIR";
pub const DEFAULT_MODEL_DIR: &str = "models";
pub const IMPORTANCE_FILE: &str = "importance.bin";
pub const STEGO_FILE: &str = "stego.bin";

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("missing checkpoint {0}")]
    Missing(PathBuf),
    #[error("importance checkpoint: {0}")]
    Importance(#[from] ImportanceError),
    #[error("stego checkpoint: {0}")]
    Stego(#[from] StegoError),
}

/// Explicit flag first, then `VISCODE_MODEL_DIR`, then `./models`.
pub fn resolve_model_dir(flag: Option<&Path>) -> PathBuf {
    if let Some(p) = flag {
        return p.to_path_buf();
    }
    match std::env::var_os(MODEL_DIR_ENV) {
        Some(v) if !v.is_empty() => PathBuf::from(v),
        _ => PathBuf::from(DEFAULT_MODEL_DIR),
    }
}

pub fn importance_path(dir: &Path) -> PathBuf {
    dir.join(IMPORTANCE_FILE)
}

pub fn stego_path(dir: &Path) -> PathBuf {
    dir.join(STEGO_FILE)
}

fn require(p: PathBuf) -> Result<PathBuf, ModelError> {
    if p.is_file() {
        Ok(p)
    } else {
        Err(ModelError::Missing(p))
    }
}

pub fn load_importance(dir: &Path) -> Result<ImportanceModel, ModelError> {
    Ok(ImportanceModel::load(&require(importance_path(dir))?)?)
}

pub fn load_stego(dir: &Path) -> Result<StegoModel, ModelError> {
    Ok(StegoModel::load(&require(stego_path(dir))?)?)
}

/// Both trained networks, loaded once and shared read-only.
pub struct ModelSet {
    pub dir: PathBuf,
    pub importance: ImportanceModel,
    pub stego: StegoModel,
}

impl ModelSet {
    pub fn load(dir: &Path) -> Result<Self, ModelError> {
        require(importance_path(dir))?;
        require(stego_path(dir))?;
        Ok(Self { dir: dir.to_path_buf(), importance: load_importance(dir)?, stego: load_stego(dir)? })
    }

    /// Checkpoint summary reported by the health endpoint.
    pub fn describe(&self) -> serde_json::Value {
        let imp = &self.importance.meta;
        let st = &self.stego.meta;
        json!({
            "importance": {
                "checkpoint": importance_path(&self.dir),
                "config": imp.config,
                "epochs": imp.loss_curve.len(),
                "final_loss": imp.loss_curve.last(),
            },
            "stego": {
                "checkpoint": stego_path(&self.dir),
                "config": st.config,
                "epochs": st.loss_curve.len(),
                "final_loss": st.loss_curve.last(),
            },
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flag_wins_over_default() {
        assert_eq!(resolve_model_dir(Some(Path::new("/x"))), PathBuf::from("/x"));
    }

    #[test]
    fn missing_checkpoint_is_reported_by_path() {
        let dir = tempfile::tempdir().unwrap();
        match ModelSet::load(dir.path()) {
            Err(ModelError::Missing(p)) => assert_eq!(p, dir.path().join(IMPORTANCE_FILE)),
            other => panic!("{:?}", other.err()),
        }
    }
}
