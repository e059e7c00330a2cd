use std::fmt;

use thiserror::Error;

/// Errors raised anywhere in the pipeline.
///
/// The variants are grouped so the command line can map them onto exit
/// codes: configuration problems, integrity failures of persisted
/// artifacts, and numerical aborts.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("non-finite value in {context}")]
    NonFinite { context: String },

    #[error("affinity overflow: exponent {value:.3} exceeds 700; reduce graph.affinity_dim or rescale the projections")]
    AffinityOverflow { value: f64 },

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error("config error at line {line}: {msg}")]
    Config { line: usize, msg: String },

    #[error("integrity error ({kind}): {msg}")]
    Integrity { kind: IntegrityKind, msg: String },

    #[error("numerical abort at {stage} step {step}: {msg}")]
    Numerical {
        stage: &'static str,
        step: usize,
        msg: String,
    },

    #[error("episode error: {0}")]
    Episode(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IntegrityKind {
    BadMagic,
    BadVersion,
    Truncated,
    Checksum,
    HashMismatch,
    FrozenViolation,
    MissingTensor,
    MissingArtifact,
    Malformed,
}

impl fmt::Display for IntegrityKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            IntegrityKind::BadMagic => "bad-magic",
            IntegrityKind::BadVersion => "bad-version",
            IntegrityKind::Truncated => "truncated",
            IntegrityKind::Checksum => "checksum",
            IntegrityKind::HashMismatch => "hash-mismatch",
            IntegrityKind::FrozenViolation => "frozen-violation",
            IntegrityKind::MissingTensor => "missing-tensor",
            IntegrityKind::MissingArtifact => "missing-artifact",
            IntegrityKind::Malformed => "malformed",
        };
        f.write_str(s)
    }
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn integrity(kind: IntegrityKind, msg: impl Into<String>) -> Self {
        Error::Integrity {
            kind,
            msg: msg.into(),
        }
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config {
            line: 0,
            msg: msg.into(),
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
