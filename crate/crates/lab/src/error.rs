// SPDX-License-Identifier: Apache-2.0

use std::path::{Path, PathBuf};

pub type Result<T, E = LabError> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum LabError {
    #[error("config error: {0}")]
    Config(String),
    #[error("{}: {detail} at byte offset {offset}", path.display())]
    Parse { path: PathBuf, offset: u64, detail: String },
    #[error("{}: {detail}", path.display())]
    Data { path: PathBuf, detail: String },
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
    #[error("runtime budget exceeded: {0}")]
    Budget(String),
    #[error(transparent)]
    Core(#[from] probseg_core::Error),
}

impl LabError {
    /// Process exit status: 2 for configuration problems, 3 for bad or
    /// missing data, 4 when a runtime budget ran out.
    pub fn exit_code(&self) -> i32 {
        match self {
            LabError::Config(_) => 2,
            LabError::Core(probseg_core::Error::Config(_) | probseg_core::Error::Variant { .. }) => 2,
            LabError::Budget(_) => 4,
            _ => 3,
        }
    }

    pub fn io(path: &Path, source: std::io::Error) -> Self {
        LabError::Io { path: path.to_path_buf(), source }
    }

    pub fn data(path: &Path, detail: impl Into<String>) -> Self {
        LabError::Data { path: path.to_path_buf(), detail: detail.into() }
    }

    pub fn config(detail: impl Into<String>) -> Self {
        LabError::Config(detail.into())
    }
}
