//! Error types for the engine, grouped by pipeline stage.

use thiserror::Error;

use crate::db::ProtoLevel;
use crate::norm::View;

/// Violation of a record-level invariant, naming the offending field.
#[derive(Debug, Clone, Error, PartialEq, Eq)]
#[error("field `{field}`: {message}")]
pub struct FieldViolation {
    pub field: &'static str,
    pub message: String,
}

impl FieldViolation {
    pub fn new(field: &'static str, message: impl Into<String>) -> Self {
        Self {
            field,
            message: message.into(),
        }
    }
}

/// Errors raised while loading or validating flow records.
#[derive(Debug, Error)]
pub enum IngestError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("line {line}: malformed record: {message}")]
    Parse { line: usize, message: String },
    #[error("line {line}: {violation}")]
    Validation {
        line: usize,
        violation: FieldViolation,
    },
    #[error("line {line}: duplicate flow_id {flow_id:?}")]
    DuplicateFlowId { line: usize, flow_id: String },
}

/// Errors raised while building, saving, or loading the traffic database.
#[derive(Debug, Error)]
pub enum DbError {
    #[error("cannot build a database from an empty flow set")]
    Empty,
    #[error("flow {flow_id:?} has no class label")]
    Unlabeled { flow_id: String },
    #[error("flow {flow_id:?} uses the reserved class label \"novel\"")]
    ReservedLabel { flow_id: String },
    #[error("duplicate flow_id {flow_id:?} in database input")]
    DuplicateFlowId { flow_id: String },
    #[error("snapshot io: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a database snapshot (bad magic bytes)")]
    BadMagic,
    #[error("snapshot format version {found} is unsupported (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("snapshot checksum mismatch; the file is corrupt")]
    ChecksumMismatch,
    #[error("snapshot file is truncated")]
    Truncated,
    #[error("snapshot decode failed: {0}")]
    Decode(String),
}

/// Internal-consistency failures during evidence retrieval.
#[derive(Debug, Error)]
pub enum RetrievalError {
    #[error(
        "no cached stats for class {class:?} protocol {protocol:?} view {view} at {level} level; \
         the database was built inconsistently"
    )]
    MissingStats {
        class: String,
        protocol: String,
        view: View,
        level: ProtoLevel,
    },
}

/// Errors raised while parsing templates or rendering prompts.
#[derive(Debug, Error)]
pub enum PromptError {
    #[error("template: {0}")]
    Template(String),
    #[error("unfilled substitution slot {{{slot}}} in the {segment} segment")]
    UnfilledSlot { slot: String, segment: &'static str },
    #[error("evidence references label {label:?} which is not in the database label set")]
    UnknownEvidenceLabel { label: String },
    #[error("evidence references flow {flow_id:?} which is not stored in the database")]
    UnknownEvidenceFlow { flow_id: String },
}

/// Errors raised by answer-generation backends and verdict parsing.
#[derive(Debug, Error)]
pub enum LlmError {
    #[error("invalid backend config: {0}")]
    Config(String),
    #[error("backend request failed after {attempts} attempt(s): {message}")]
    Backend { attempts: u32, message: String },
    #[error("backend returned status {status}: {message}")]
    Status { status: u16, message: String },
    #[error("backend timed out after {seconds}s")]
    Timeout { seconds: f64 },
    #[error("cannot extract a verdict from the response: {reason}; raw response: {raw:?}")]
    Parse { reason: String, raw: String },
}

/// Errors raised by the evaluation harness.
#[derive(Debug, Error)]
pub enum EvalError {
    #[error("validation: {0}")]
    Validation(String),
}

/// Errors raised while reading engine configuration.
#[derive(Debug, Error)]
pub enum ConfigError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("config line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("config: {0}")]
    Invalid(String),
}

/// Umbrella error for pipeline-level entry points.
#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Ingest(#[from] IngestError),
    #[error(transparent)]
    Db(#[from] DbError),
    #[error(transparent)]
    Retrieval(#[from] RetrievalError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Llm(#[from] LlmError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Config(#[from] ConfigError),
}
