//! Tool and agent registry, tool manuals, and the invocation adapter.

use thiserror::Error;

pub mod adapter;
pub mod manual;
pub mod registry;
pub mod tools;

pub use adapter::{adapt_invoke, derive_args, select_operation, ToolResult, ToolStatus};
pub use manual::{learn_interface, Operation, Param, ToolDescriptor};
pub use registry::{DiscoverConstraints, EntryKind, Objective, Registry, RegistryEntry};
pub use tools::{Calculator, Echo, KeywordSearch, LocalTool, ToolBox};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ToolError {
    #[error("duplicate entry id {0}")]
    DuplicateId(String),
    #[error("malformed entry {entry_id}: {reason}")]
    MalformedEntry { entry_id: String, reason: String },
    #[error("no registered entry satisfies the request")]
    NoCandidate,
    #[error("required capabilities must be non-empty")]
    EmptyRequirement,
    #[error("malformed manual at line {line}: {reason}")]
    MalformedManual { line: usize, reason: String },
    #[error("no operation of {tool_id} matches {wanted}")]
    UnknownOperation { tool_id: String, wanted: String },
    #[error("missing parameter {0}")]
    MissingParam(String),
    #[error("undeclared parameter {0}")]
    UnknownParam(String),
    #[error("parameter {name}: {reason}")]
    InvalidArgument { name: String, reason: String },
    #[error("no local implementation bound for tool {0}")]
    UnknownTool(String),
    #[error("tool failure: {0}")]
    ToolFailure(String),
    #[error("registry file: {0}")]
    RegistryFile(String),
}
