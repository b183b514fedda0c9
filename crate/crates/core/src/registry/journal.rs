//! Append-only journal of admitted registry operations.
//!
//! One JSON document per line. JSON is a subset of YAML flow syntax, so each
//! line is also a valid manifest-format document.

use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::value::Document;

use super::error::RegistryError;
use super::state::RegistryState;
use super::types::*;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MigratedConfig {
    pub target: Reference,
    pub config: Document,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum JournalOp {
    RegisterEntity { record: EntityRecord },
    UpgradeEntity { record: EntityRecord, configs: Vec<MigratedConfig> },
    DeleteEntity { kind: EntityKind, name: String },
    RegisterSensor { record: SensorRecord },
    CreateStream { record: StreamRecord },
    RegisterGadget { record: GadgetRecord },
    DeleteSensor { name: String },
    DeleteStream { name: String },
    DeleteGadget { name: String },
}

impl JournalOp {
    /// Re-applies a journaled operation to `state`.
    pub fn replay(self, state: &mut RegistryState) -> Result<(), RegistryError> {
        match self {
            JournalOp::RegisterEntity { record } => state.register_entity(record).map(drop),
            JournalOp::UpgradeEntity { record, configs } => state.commit_upgrade(
                record,
                configs.into_iter().map(|m| (m.target, m.config)).collect(),
            ),
            JournalOp::DeleteEntity { kind, name } => state.delete_entity(kind, &name),
            JournalOp::RegisterSensor { record } => state.register_sensor(record).map(drop),
            JournalOp::CreateStream { record } => state.create_stream(record).map(drop),
            JournalOp::RegisterGadget { record } => state.register_gadget(record).map(drop),
            JournalOp::DeleteSensor { name } => state.delete_sensor(&name),
            JournalOp::DeleteStream { name } => state.delete_stream(&name),
            JournalOp::DeleteGadget { name } => state.delete_gadget(&name),
        }
    }
}

pub struct Journal {
    file: File,
}

impl Journal {
    /// Opens (creating if needed) the journal and rebuilds the state it records.
    pub fn open(path: &Path) -> Result<(Journal, RegistryState), RegistryError> {
        let mut state = RegistryState::default();
        if path.exists() {
            let reader = BufReader::new(File::open(path)?);
            for (index, line) in reader.lines().enumerate() {
                let line = line?;
                if line.trim().is_empty() {
                    continue;
                }
                let corrupt = |reason: String| RegistryError::CorruptJournal {
                    line: index + 1,
                    reason,
                };
                let op: JournalOp = serde_json::from_str(&line).map_err(|e| corrupt(e.to_string()))?;
                op.replay(&mut state).map_err(|e| corrupt(e.to_string()))?;
            }
        }
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        Ok((
            Journal { file },
            state,
        ))
    }

    pub fn append(&mut self, op: &JournalOp) -> std::io::Result<()> {
        let mut line = serde_json::to_vec(op).map_err(std::io::Error::other)?;
        line.push(b'\n');
        self.file.write_all(&line)?;
        self.file.sync_data()
    }
}
