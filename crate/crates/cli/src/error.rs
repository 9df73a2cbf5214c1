//! Error kinds and the process exit codes they map to.

use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum ErrorKind {
    /// Bad flags or configuration. Exit code 2.
    Usage,
    /// Missing or unreadable inputs, unwritable outputs. Exit code 3.
    Io,
    /// Anything that fails while running. Exit code 1.
    Runtime,
}

impl ErrorKind {
    pub fn exit_code(self) -> i32 {
        match self {
            ErrorKind::Usage => 2,
            ErrorKind::Io => 3,
            ErrorKind::Runtime => 1,
        }
    }
}

#[derive(Debug, Clone, Error, Serialize)]
#[error("{kind:?}: {message}")]
pub struct CliError {
    #[serde(rename = "error")]
    pub kind: ErrorKind,
    pub message: String,
}

impl CliError {
    pub fn usage(message: impl Into<String>) -> Self {
        Self { kind: ErrorKind::Usage, message: message.into() }
    }

    pub fn io(message: impl Into<String>) -> Self {
        Self { kind: ErrorKind::Io, message: message.into() }
    }

    pub fn runtime(message: impl Into<String>) -> Self {
        Self { kind: ErrorKind::Runtime, message: message.into() }
    }

    /// The single stderr line: `{"error":"io","message":"..."}`.
    pub fn to_line(&self) -> String {
        serde_json::to_string(self).expect("plain struct serialises")
    }
}

impl From<tryon_core::Error> for CliError {
    fn from(e: tryon_core::Error) -> Self {
        use tryon_core::Error as E;
        let message = crate::config::one_line(&e.to_string());
        match e {
            E::Io(_) | E::Image(_) | E::Manifest(_) | E::InvalidData(_) => Self::io(message),
            E::Config(_) => Self::usage(message),
            _ => Self::runtime(message),
        }
    }
}

impl From<tryon_toy::ToyError> for CliError {
    fn from(e: tryon_toy::ToyError) -> Self {
        use tryon_toy::ToyError as T;
        match e {
            T::Core(c) => c.into(),
            T::Io(_) | T::Checkpoint(_) => Self::io(crate::config::one_line(&e.to_string())),
            T::NonFinite { .. } => Self::runtime(e.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Self::io(e.to_string())
    }
}
