//! Authoritative store of drivers, analytics units, actuators, sensors,
//! streams and gadgets, with the admission rules that keep them coherent.
//!
//! All mutations go through a single writer. Readers take cheap immutable
//! snapshots ([`Registry::snapshot`]) that never observe a half-applied
//! operation. When opened on a journal file, every admitted operation is
//! appended and synced before it becomes visible.

mod error;
mod journal;
mod migration;
mod state;
mod types;

use std::path::Path;
use std::sync::Arc;

use crossbeam_channel::{Receiver, Sender};
use parking_lot::{Mutex, RwLock};

pub use error::RegistryError;
pub use journal::{JournalOp, MigratedConfig};
pub use migration::{ConfigMigration, MigrationScript};
pub use state::RegistryState;
pub use types::*;

use crate::schema::validate_optional;
use journal::Journal;

pub struct Registry {
    state: RwLock<Arc<RegistryState>>,
    writer: Mutex<Option<Journal>>,
    watchers: Mutex<Vec<Sender<()>>>,
}

impl Default for Registry {
    fn default() -> Self {
        Self::in_memory()
    }
}

impl Registry {
    /// A registry without persistence.
    pub fn in_memory() -> Self {
        Registry {
            state: RwLock::new(Arc::new(RegistryState::default())),
            writer: Mutex::new(None),
            watchers: Mutex::new(Vec::new()),
        }
    }

    /// Opens a journaled registry, replaying whatever the journal holds.
    pub fn open(journal_path: &Path) -> Result<Self, RegistryError> {
        let (journal, state) = Journal::open(journal_path)?;
        Ok(Registry {
            state: RwLock::new(Arc::new(state)),
            writer: Mutex::new(Some(journal)),
            watchers: Mutex::new(Vec::new()),
        })
    }

    pub fn snapshot(&self) -> Arc<RegistryState> {
        self.state.read().clone()
    }

    /// A channel that receives a (coalesced) notification after every
    /// admitted operation.
    pub fn watch(&self) -> Receiver<()> {
        let (tx, rx) = crossbeam_channel::bounded(1);
        self.watchers.lock().push(tx);
        rx
    }

    fn notify(&self) {
        self.watchers.lock().retain(|tx| match tx.try_send(()) {
            Ok(()) | Err(crossbeam_channel::TrySendError::Full(_)) => true,
            Err(crossbeam_channel::TrySendError::Disconnected(_)) => false,
        });
    }

    /// Runs one admission step under the writer lock. `op` mutates a private
    /// copy of the state; the copy is journaled and published only on success.
    fn admit<T>(
        &self,
        op: impl FnOnce(&mut RegistryState) -> Result<(T, JournalOp), RegistryError>,
    ) -> Result<T, RegistryError> {
        let mut writer = self.writer.lock();
        let mut next = RegistryState::clone(&self.snapshot());
        let (out, entry) = op(&mut next)?;
        if let Some(journal) = writer.as_mut() {
            journal.append(&entry)?;
        }
        *self.state.write() = Arc::new(next);
        drop(writer);
        self.notify();
        Ok(out)
    }

    pub fn register_entity(&self, record: EntityRecord) -> Result<EntityRecord, RegistryError> {
        self.admit(|state| {
            let record = state.register_entity(record)?;
            Ok((record.clone(), JournalOp::RegisterEntity { record }))
        })
    }

    /// Replaces an entity's executable and schema, provided that every
    /// sensor, stream or gadget using it ends up with a valid configuration
    /// (after `migration`, when given). Either everything changes or nothing.
    pub fn upgrade_entity(
        &self,
        kind: EntityKind,
        name: &str,
        mut new: EntityRecord,
        migration: Option<&dyn ConfigMigration>,
    ) -> Result<UpgradeReport, RegistryError> {
        self.admit(|state| {
            let current = state
                .entity(kind, name)
                .ok_or_else(|| RegistryError::NotFound {
                    kind: kind.record_kind(),
                    name: name.to_string(),
                })?;
            new.name = name.to_string();
            new.kind = kind;
            RegistryState::check_entity(&new)?;
            let from_version = current.version;
            new.version = from_version + 1;

            let mut instances = Vec::new();
            let mut configs = Vec::new();
            for target in state.references(kind, name) {
                let old = state
                    .reference_config(&target)
                    .expect("references resolve to configured records");
                let (candidate, migrated) = match migration {
                    Some(m) => (m.migrate(old), true),
                    None => (Ok(old.clone()), false),
                };
                let outcome = match candidate {
                    Ok(config) => {
                        let report = validate_optional(new.schema.as_ref(), &config);
                        if report.is_valid() {
                            configs.push(MigratedConfig {
                                target: target.clone(),
                                config: report.normalized,
                            });
                            if migrated {
                                MigrationOutcome::Migrated
                            } else {
                                MigrationOutcome::Compatible
                            }
                        } else {
                            MigrationOutcome::Failed {
                                reason: report.to_string(),
                            }
                        }
                    }
                    Err(reason) => MigrationOutcome::Failed {
                        reason: format!("migration failed: {reason}"),
                    },
                };
                instances.push(InstanceMigration { target, outcome });
            }

            let accepted = instances
                .iter()
                .all(|i| !matches!(i.outcome, MigrationOutcome::Failed { .. }));
            let report = UpgradeReport {
                name: name.to_string(),
                kind,
                accepted,
                from_version,
                to_version: if accepted { new.version } else { from_version },
                instances,
            };
            if !accepted {
                return Err(RegistryError::IncompatibleUpgrade(Box::new(report)));
            }
            state.commit_upgrade(
                new.clone(),
                configs.iter().map(|m| (m.target.clone(), m.config.clone())).collect(),
            )?;
            Ok((report, JournalOp::UpgradeEntity { record: new, configs }))
        })
    }

    pub fn delete_entity(&self, kind: EntityKind, name: &str) -> Result<(), RegistryError> {
        self.admit(|state| {
            state.delete_entity(kind, name)?;
            Ok((
                (),
                JournalOp::DeleteEntity {
                    kind,
                    name: name.to_string(),
                },
            ))
        })
    }

    pub fn register_sensor(&self, record: SensorRecord) -> Result<SensorRecord, RegistryError> {
        self.admit(|state| {
            let record = state.register_sensor(record)?;
            Ok((record.clone(), JournalOp::RegisterSensor { record }))
        })
    }

    pub fn create_stream(&self, record: StreamRecord) -> Result<StreamRecord, RegistryError> {
        self.admit(|state| {
            let record = state.create_stream(record)?;
            Ok((record.clone(), JournalOp::CreateStream { record }))
        })
    }

    pub fn register_gadget(&self, record: GadgetRecord) -> Result<GadgetRecord, RegistryError> {
        self.admit(|state| {
            let record = state.register_gadget(record)?;
            Ok((record.clone(), JournalOp::RegisterGadget { record }))
        })
    }

    pub fn delete_sensor(&self, name: &str) -> Result<(), RegistryError> {
        self.admit(|state| {
            state.delete_sensor(name)?;
            Ok(((), JournalOp::DeleteSensor { name: name.to_string() }))
        })
    }

    pub fn delete_stream(&self, name: &str) -> Result<(), RegistryError> {
        self.admit(|state| {
            state.delete_stream(name)?;
            Ok(((), JournalOp::DeleteStream { name: name.to_string() }))
        })
    }

    pub fn delete_gadget(&self, name: &str) -> Result<(), RegistryError> {
        self.admit(|state| {
            state.delete_gadget(name)?;
            Ok(((), JournalOp::DeleteGadget { name: name.to_string() }))
        })
    }

    pub fn dependents(&self, name: &str) -> Result<Vec<String>, RegistryError> {
        self.snapshot().dependents(name)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schema::{ConfigSchema, FieldSpec, FieldType};
    use crate::value::{doc, Document};
    use serde_json::json;

    fn driver_schema() -> ConfigSchema {
        ConfigSchema::new().field("fps", FieldSpec::new(FieldType::Int).required())
    }

    fn with_three_sensors() -> Registry {
        let reg = Registry::in_memory();
        reg.register_entity(
            EntityRecord::new("thermal-cam-driver", EntityKind::Driver, "/bin/drv").with_schema(driver_schema()),
        )
        .unwrap();
        for (name, fps) in [("camA", 15), ("camB", 30), ("camC", 5)] {
            reg.register_sensor(SensorRecord::new(name, "thermal-cam-driver", doc(json!({"fps": fps}))))
                .unwrap();
        }
        reg
    }

    fn bytes(reg: &Registry) -> Vec<u8> {
        serde_json::to_vec(&*reg.snapshot()).unwrap()
    }

    #[test]
    fn identical_schema_upgrade() {
        let reg = with_three_sensors();
        let new = EntityRecord::new("", EntityKind::Driver, "/bin/drv2").with_schema(driver_schema());
        let report = reg
            .upgrade_entity(EntityKind::Driver, "thermal-cam-driver", new, None)
            .unwrap();
        assert!(report.accepted);
        assert_eq!(report.to_version, 2);
        assert_eq!(report.instances.len(), 3);
        assert!(report
            .instances
            .iter()
            .all(|i| i.outcome == MigrationOutcome::Compatible));
        let snap = reg.snapshot();
        let rec = snap.entity(EntityKind::Driver, "thermal-cam-driver").unwrap();
        assert_eq!((rec.version, rec.executable.as_str()), (2, "/bin/drv2"));
    }

    #[test]
    fn incompatible_upgrade_changes_nothing() {
        let reg = with_three_sensors();
        let before = bytes(&reg);
        let new = EntityRecord::new("", EntityKind::Driver, "/bin/drv2")
            .with_schema(driver_schema().field("mode", FieldSpec::new(FieldType::String).required()));
        match reg.upgrade_entity(EntityKind::Driver, "thermal-cam-driver", new, None) {
            Err(RegistryError::IncompatibleUpgrade(report)) => {
                assert!(!report.accepted);
                assert_eq!(report.to_version, 1);
            }
            other => panic!("unexpected {other:?}"),
        }
        assert_eq!(before, bytes(&reg));
    }

    #[test]
    fn migration_injects_field() {
        let reg = with_three_sensors();
        let new = EntityRecord::new("", EntityKind::Driver, "/bin/drv2")
            .with_schema(driver_schema().field("mode", FieldSpec::new(FieldType::String).required()));
        let inject = |c: &Document| {
            let mut c = c.clone();
            c.insert("mode".into(), json!("fast"));
            Ok(c)
        };
        let report = reg
            .upgrade_entity(EntityKind::Driver, "thermal-cam-driver", new, Some(&inject))
            .unwrap();
        assert!(report.instances.iter().all(|i| i.outcome == MigrationOutcome::Migrated));
        for sensor in reg.snapshot().sensors().values() {
            assert_eq!(sensor.config["mode"], json!("fast"));
        }
    }

    #[test]
    fn failing_migration_on_one_instance_rejects_all() {
        let reg = with_three_sensors();
        let before = bytes(&reg);
        let new = EntityRecord::new("", EntityKind::Driver, "/bin/drv2").with_schema(driver_schema());
        let picky = |c: &Document| {
            if c["fps"] == json!(30) {
                Err("refuse".to_string())
            } else {
                Ok(c.clone())
            }
        };
        assert!(matches!(
            reg.upgrade_entity(EntityKind::Driver, "thermal-cam-driver", new, Some(&picky)),
            Err(RegistryError::IncompatibleUpgrade(_))
        ));
        assert_eq!(before, bytes(&reg));
    }

    #[test]
    fn upgrade_missing_entity() {
        let reg = Registry::in_memory();
        assert!(matches!(
            reg.upgrade_entity(EntityKind::Driver, "x", EntityRecord::new("x", EntityKind::Driver, "y"), None),
            Err(RegistryError::NotFound { .. })
        ));
    }

    #[test]
    fn journal_replay_restores_state() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("registry.journal");
        let expected = {
            let reg = Registry::open(&path).unwrap();
            reg.register_entity(
                EntityRecord::new("thermal-cam-driver", EntityKind::Driver, "/bin/drv").with_schema(driver_schema()),
            )
            .unwrap();
            reg.register_entity(EntityRecord::new("au", EntityKind::AnalyticsUnit, "/bin/au"))
                .unwrap();
            reg.register_sensor(SensorRecord::new("camA", "thermal-cam-driver", doc(json!({"fps": 1}))))
                .unwrap();
            reg.create_stream(StreamRecord::derived("faces", "au", ["camA"], Document::new()))
                .unwrap();
            let inject = |c: &Document| {
                let mut c = c.clone();
                c.insert("mode".into(), json!("fast"));
                Ok(c)
            };
            let new = EntityRecord::new("", EntityKind::Driver, "/bin/drv2")
                .with_schema(driver_schema().field("mode", FieldSpec::new(FieldType::String).required()));
            reg.upgrade_entity(EntityKind::Driver, "thermal-cam-driver", new, Some(&inject))
                .unwrap();
            reg.delete_stream("faces").unwrap();
            // Refused operations leave no trace in the journal.
            assert!(reg.delete_sensor("ghost").is_err());
            bytes(&reg)
        };
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().count(), 6);
        for line in text.lines() {
            // Every journal line is a standalone YAML document too.
            let _: serde_yaml::Value = serde_yaml::from_str(line).unwrap();
        }
        let reopened = Registry::open(&path).unwrap();
        assert_eq!(bytes(&reopened), expected);
    }

    #[test]
    fn corrupt_journal_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("j");
        std::fs::write(&path, "{\"op\":\"delete_sensor\",\"name\":\"x\"}\n").unwrap();
        assert!(matches!(
            Registry::open(&path),
            Err(RegistryError::CorruptJournal { line: 1, .. })
        ));
    }

    #[test]
    fn watchers_are_notified() {
        let reg = Registry::in_memory();
        let rx = reg.watch();
        reg.register_entity(EntityRecord::new("d", EntityKind::Driver, "x")).unwrap();
        reg.register_entity(EntityRecord::new("e", EntityKind::Driver, "x")).unwrap();
        assert!(rx.try_recv().is_ok());
        // Notifications coalesce.
        assert!(rx.try_recv().is_err());
    }

    #[test]
    fn concurrent_admission() {
        let reg = Arc::new(Registry::in_memory());
        let handles: Vec<_> = (0..8)
            .map(|t| {
                let reg = reg.clone();
                std::thread::spawn(move || {
                    for i in 0..50 {
                        let _ = reg.register_entity(EntityRecord::new(
                            format!("d{}", (t * 50 + i) % 100),
                            EntityKind::Driver,
                            "x",
                        ));
                    }
                })
            })
            .collect();
        for h in handles {
            h.join().unwrap();
        }
        assert_eq!(reg.snapshot().entities(EntityKind::Driver).len(), 100);
    }
}
