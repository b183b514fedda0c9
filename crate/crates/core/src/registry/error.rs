use crate::schema::{SchemaError, ValidationReport};

use super::types::{RecordKind, Reference, UpgradeReport};

#[derive(Debug, thiserror::Error)]
pub enum RegistryError {
    #[error("{kind} `{name}` already exists")]
    DuplicateName { kind: RecordKind, name: String },
    #[error("{kind} `{name}` not found")]
    NotFound { kind: RecordKind, name: String },
    #[error("invalid schema for `{name}`: {source}")]
    InvalidSchema { name: String, source: SchemaError },
    #[error("`{0}` has an empty executable")]
    EmptyExecutable(String),
    #[error("invalid configuration for {target}: {report}")]
    InvalidConfig {
        target: Reference,
        report: ValidationReport,
    },
    #[error("driver `{0}` is not installed")]
    DriverMissing(String),
    #[error("analytics unit `{0}` is not installed")]
    AuMissing(String),
    #[error("actuator `{0}` is not installed")]
    ActuatorMissing(String),
    #[error("input stream `{0}` is not registered")]
    UnknownInput(String),
    #[error("stream graph would contain a cycle: {}", .0.join(" -> "))]
    CycleDetected(Vec<String>),
    #[error("stream `{name}` needs at least one replica")]
    ZeroReplicas { name: String },
    #[error("{kind} `{name}` is in use by {}", join(.users))]
    InUse {
        kind: RecordKind,
        name: String,
        users: Vec<Reference>,
    },
    #[error("`{name}` has dependents: {}", .dependents.join(", "))]
    HasDependents {
        name: String,
        dependents: Vec<String>,
    },
    #[error("stream `{0}` belongs to a sensor; delete the sensor instead")]
    SensorStream(String),
    #[error("upgrade rejected: {0}")]
    IncompatibleUpgrade(Box<UpgradeReport>),
    #[error("journal: {0}")]
    Journal(#[from] std::io::Error),
    #[error("corrupt journal at line {line}: {reason}")]
    CorruptJournal { line: usize, reason: String },
}

fn join(users: &[Reference]) -> String {
    users
        .iter()
        .map(ToString::to_string)
        .collect::<Vec<_>>()
        .join(", ")
}
