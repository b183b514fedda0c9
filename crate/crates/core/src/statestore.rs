//! Platform-managed databases for stateful workers.
//!
//! Each database is an ordered key-value namespace owned by an entity or a
//! stream. On disk every namespace is its own subdirectory holding an
//! append-only log that is replayed at startup; the catalog of databases is a
//! single JSON file next to them.

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use parking_lot::{Mutex, RwLock};
use serde::{Deserialize, Serialize};

use crate::registry::{EntityKind, RegistryState};
use crate::value::Document;

#[derive(Debug, thiserror::Error)]
pub enum StateError {
    #[error("database `{0}` already exists")]
    DuplicateName(String),
    #[error("owner `{0}` is not registered")]
    UnknownOwner(String),
    #[error("database `{0}` not found")]
    NotFound(String),
    #[error("no such database `{0}`")]
    NoSuchDatabase(String),
    #[error("invalid database name `{0}`")]
    InvalidName(String),
    #[error("storage: {0}")]
    Io(#[from] std::io::Error),
    #[error("corrupt storage: {0}")]
    Corrupt(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatabaseRecord {
    pub name: String,
    pub owner: String,
    pub namespace: String,
}

/// Answers whether a database owner is registered.
pub trait OwnerDirectory {
    fn owner_exists(&self, name: &str) -> bool;
}

impl OwnerDirectory for RegistryState {
    fn owner_exists(&self, name: &str) -> bool {
        self.stream(name).is_some() || EntityKind::ALL.iter().any(|k| self.entity(*k, name).is_some())
    }
}

impl<F: Fn(&str) -> bool> OwnerDirectory for F {
    fn owner_exists(&self, name: &str) -> bool {
        self(name)
    }
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
enum LogEntry {
    Put { key: String, value: Document },
    Delete { key: String },
}

struct Database {
    record: DatabaseRecord,
    data: RwLock<BTreeMap<String, Document>>,
    log: Mutex<Option<File>>,
}

impl Database {
    fn append(&self, entry: &LogEntry) -> Result<(), StateError> {
        if let Some(file) = self.log.lock().as_mut() {
            let mut line = serde_json::to_vec(entry).map_err(std::io::Error::other)?;
            line.push(b'\n');
            file.write_all(&line)?;
            file.sync_data()?;
        }
        Ok(())
    }
}

pub struct StateStore {
    root: Option<PathBuf>,
    catalog: RwLock<BTreeMap<String, Arc<Database>>>,
    // Serializes catalog file rewrites.
    catalog_writer: Mutex<()>,
}

fn valid_name(name: &str) -> bool {
    !name.is_empty()
        && name != "."
        && name != ".."
        && name
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.'))
}

impl StateStore {
    pub fn in_memory() -> Self {
        StateStore {
            root: None,
            catalog: RwLock::new(BTreeMap::new()),
            catalog_writer: Mutex::new(()),
        }
    }

    /// Opens the store rooted at `root`, replaying every namespace log.
    pub fn open(root: &Path) -> Result<Self, StateError> {
        fs::create_dir_all(root)?;
        let store = StateStore {
            root: Some(root.to_path_buf()),
            catalog: RwLock::new(BTreeMap::new()),
            catalog_writer: Mutex::new(()),
        };
        let catalog_path = root.join("catalog.json");
        if catalog_path.exists() {
            let records: Vec<DatabaseRecord> = serde_json::from_slice(&fs::read(&catalog_path)?)
                .map_err(|e| StateError::Corrupt(format!("catalog: {e}")))?;
            let mut catalog = store.catalog.write();
            for record in records {
                let db = store.load(record)?;
                catalog.insert(db.record.name.clone(), Arc::new(db));
            }
        }
        Ok(store)
    }

    fn load(&self, record: DatabaseRecord) -> Result<Database, StateError> {
        let dir = self.root.as_ref().expect("load requires a root").join(&record.namespace);
        fs::create_dir_all(&dir)?;
        let log_path = dir.join("data.log");
        let mut data = BTreeMap::new();
        if log_path.exists() {
            for (n, line) in BufReader::new(File::open(&log_path)?).lines().enumerate() {
                let line = line?;
                if line.trim().is_empty() {
                    continue;
                }
                match serde_json::from_str::<LogEntry>(&line) {
                    Ok(LogEntry::Put { key, value }) => {
                        data.insert(key, value);
                    }
                    Ok(LogEntry::Delete { key }) => {
                        data.remove(&key);
                    }
                    // A torn final line is an unacknowledged write.
                    Err(_) if is_last_line(&log_path, n)? => break,
                    Err(e) => {
                        return Err(StateError::Corrupt(format!("{} line {}: {e}", record.name, n + 1)))
                    }
                }
            }
        }
        let file = OpenOptions::new().create(true).append(true).open(&log_path)?;
        Ok(Database {
            record,
            data: RwLock::new(data),
            log: Mutex::new(Some(file)),
        })
    }

    fn persist_catalog(&self) -> Result<(), StateError> {
        let Some(root) = &self.root else {
            return Ok(());
        };
        let _guard = self.catalog_writer.lock();
        let records: Vec<DatabaseRecord> = self.catalog.read().values().map(|d| d.record.clone()).collect();
        let tmp = root.join("catalog.json.tmp");
        let mut file = File::create(&tmp)?;
        file.write_all(&serde_json::to_vec_pretty(&records).map_err(std::io::Error::other)?)?;
        file.sync_all()?;
        fs::rename(&tmp, root.join("catalog.json"))?;
        Ok(())
    }

    pub fn create_database(
        &self,
        name: &str,
        owner: &str,
        directory: &dyn OwnerDirectory,
    ) -> Result<DatabaseRecord, StateError> {
        if !valid_name(name) {
            return Err(StateError::InvalidName(name.to_string()));
        }
        if !directory.owner_exists(owner) {
            return Err(StateError::UnknownOwner(owner.to_string()));
        }
        let record = DatabaseRecord {
            name: name.to_string(),
            owner: owner.to_string(),
            namespace: format!("db-{name}"),
        };
        {
            let mut catalog = self.catalog.write();
            if catalog.contains_key(name) {
                return Err(StateError::DuplicateName(name.to_string()));
            }
            let db = match &self.root {
                Some(root) => {
                    // A leftover directory from a crashed delete must not leak old keys.
                    let dir = root.join(&record.namespace);
                    if dir.exists() {
                        fs::remove_dir_all(&dir)?;
                    }
                    self.load(record.clone())?
                }
                None => Database {
                    record: record.clone(),
                    data: RwLock::new(BTreeMap::new()),
                    log: Mutex::new(None),
                },
            };
            catalog.insert(name.to_string(), Arc::new(db));
        }
        self.persist_catalog()?;
        Ok(record)
    }

    pub fn delete_database(&self, name: &str) -> Result<(), StateError> {
        let db = self
            .catalog
            .write()
            .remove(name)
            .ok_or_else(|| StateError::NotFound(name.to_string()))?;
        self.persist_catalog()?;
        *db.log.lock() = None;
        if let Some(root) = &self.root {
            let dir = root.join(&db.record.namespace);
            if dir.exists() {
                fs::remove_dir_all(dir)?;
            }
        }
        Ok(())
    }

    /// Deletes every database whose owner is no longer registered.
    pub fn prune(&self, directory: &dyn OwnerDirectory) -> Result<Vec<String>, StateError> {
        let orphans: Vec<String> = self
            .catalog
            .read()
            .values()
            .filter(|db| !directory.owner_exists(&db.record.owner))
            .map(|db| db.record.name.clone())
            .collect();
        for name in &orphans {
            self.delete_database(name)?;
        }
        Ok(orphans)
    }

    pub fn databases(&self) -> Vec<DatabaseRecord> {
        self.catalog.read().values().map(|d| d.record.clone()).collect()
    }

    pub fn database(&self, name: &str) -> Option<DatabaseRecord> {
        self.catalog.read().get(name).map(|d| d.record.clone())
    }

    /// Databases owned by any of `owners`.
    pub fn owned_by(&self, owners: &[&str]) -> Vec<String> {
        self.catalog
            .read()
            .values()
            .filter(|d| owners.contains(&d.record.owner.as_str()))
            .map(|d| d.record.name.clone())
            .collect()
    }

    fn db(&self, name: &str) -> Result<Arc<Database>, StateError> {
        self.catalog
            .read()
            .get(name)
            .cloned()
            .ok_or_else(|| StateError::NoSuchDatabase(name.to_string()))
    }

    pub fn kv_put(&self, db: &str, key: &str, value: Document) -> Result<(), StateError> {
        let db = self.db(db)?;
        let mut data = db.data.write();
        db.append(&LogEntry::Put {
            key: key.to_string(),
            value: value.clone(),
        })?;
        data.insert(key.to_string(), value);
        Ok(())
    }

    pub fn kv_get(&self, db: &str, key: &str) -> Result<Option<Document>, StateError> {
        Ok(self.db(db)?.data.read().get(key).cloned())
    }

    pub fn kv_delete(&self, db: &str, key: &str) -> Result<(), StateError> {
        let db = self.db(db)?;
        let mut data = db.data.write();
        if data.contains_key(key) {
            db.append(&LogEntry::Delete { key: key.to_string() })?;
            data.remove(key);
        }
        Ok(())
    }

    pub fn kv_scan(&self, db: &str, prefix: &str) -> Result<Vec<(String, Document)>, StateError> {
        let db = self.db(db)?;
        let data = db.data.read();
        Ok(data
            .range(prefix.to_string()..)
            .take_while(|(k, _)| k.starts_with(prefix))
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect())
    }
}

fn is_last_line(path: &Path, index: usize) -> std::io::Result<bool> {
    let count = BufReader::new(File::open(path)?).lines().count();
    Ok(index + 1 == count)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::value::doc;
    use proptest::prelude::*;
    use serde_json::json;

    fn anyone(_: &str) -> bool {
        true
    }

    #[test]
    fn create_and_duplicate() {
        let store = StateStore::in_memory();
        let rec = store
            .create_database("thermal-history", "screening-decisions", &anyone)
            .unwrap();
        assert_eq!(rec.owner, "screening-decisions");
        assert!(matches!(
            store.create_database("thermal-history", "x", &anyone),
            Err(StateError::DuplicateName(_))
        ));
        assert!(matches!(
            store.create_database("other", "ghost", &|_: &str| false),
            Err(StateError::UnknownOwner(_))
        ));
        assert!(matches!(
            store.create_database("../etc", "x", &anyone),
            Err(StateError::InvalidName(_))
        ));
        assert!(matches!(store.delete_database("nope"), Err(StateError::NotFound(_))));
    }

    #[test]
    fn kv_operations() {
        let store = StateStore::in_memory();
        store.create_database("db", "o", &anyone).unwrap();
        store.kv_put("db", "k", doc(json!({"v": 1}))).unwrap();
        assert_eq!(store.kv_get("db", "k").unwrap(), Some(doc(json!({"v": 1}))));
        assert_eq!(store.kv_get("db", "absent").unwrap(), None);
        for k in ["b", "ab", "a"] {
            store.kv_put("db", k, doc(json!({"k": k}))).unwrap();
        }
        let keys: Vec<String> = store.kv_scan("db", "a").unwrap().into_iter().map(|(k, _)| k).collect();
        assert_eq!(keys, ["a", "ab"]);
        store.kv_delete("db", "a").unwrap();
        assert_eq!(store.kv_get("db", "a").unwrap(), None);
        assert!(matches!(store.kv_get("nope", "k"), Err(StateError::NoSuchDatabase(_))));
    }

    #[test]
    fn prune_cascades() {
        let store = StateStore::in_memory();
        store.create_database("a", "s1", &anyone).unwrap();
        store.create_database("b", "s2", &anyone).unwrap();
        let removed = store.prune(&|owner: &str| owner == "s2").unwrap();
        assert_eq!(removed, ["a"]);
        assert_eq!(store.databases().len(), 1);
    }

    #[test]
    fn durable_across_restart() {
        let dir = tempfile::tempdir().unwrap();
        {
            let store = StateStore::open(dir.path()).unwrap();
            store.create_database("db", "o", &anyone).unwrap();
            store.create_database("gone", "o", &anyone).unwrap();
            store.kv_put("db", "k1", doc(json!({"v": 1}))).unwrap();
            store.kv_put("db", "k2", doc(json!({"v": 2}))).unwrap();
            store.kv_put("db", "k1", doc(json!({"v": 3}))).unwrap();
            store.kv_delete("db", "k2").unwrap();
            store.kv_put("gone", "x", Document::new()).unwrap();
            store.delete_database("gone").unwrap();
        }
        assert!(dir.path().join("db-db").is_dir());
        assert!(!dir.path().join("db-gone").exists());
        let store = StateStore::open(dir.path()).unwrap();
        assert_eq!(store.kv_get("db", "k1").unwrap(), Some(doc(json!({"v": 3}))));
        assert_eq!(store.kv_get("db", "k2").unwrap(), None);
        assert!(store.database("gone").is_none());
        // Recreating a deleted name starts empty.
        store.create_database("gone", "o", &anyone).unwrap();
        assert!(store.kv_scan("gone", "").unwrap().is_empty());
    }

    #[test]
    fn torn_tail_is_ignored() {
        let dir = tempfile::tempdir().unwrap();
        {
            let store = StateStore::open(dir.path()).unwrap();
            store.create_database("db", "o", &anyone).unwrap();
            store.kv_put("db", "k", doc(json!({"v": 1}))).unwrap();
        }
        let log = dir.path().join("db-db").join("data.log");
        let mut f = OpenOptions::new().append(true).open(&log).unwrap();
        f.write_all(b"{\"op\":\"put\",\"key\":\"k2\",\"val").unwrap();
        let store = StateStore::open(dir.path()).unwrap();
        assert_eq!(store.kv_scan("db", "").unwrap().len(), 1);
    }

    proptest! {
        // Operations through one database never touch another.
        #[test]
        fn namespaces_are_isolated(ops in prop::collection::vec((0usize..3, "[ab]{0,3}", any::<bool>(), 0i64..5), 1..60)) {
            let store = StateStore::in_memory();
            let names = ["d0", "d1", "d2"];
            for n in names {
                store.create_database(n, "o", &anyone).unwrap();
            }
            let mut model: Vec<BTreeMap<String, Document>> = vec![BTreeMap::new(); 3];
            for (db, key, put, v) in ops {
                if put {
                    let value = doc(json!({"v": v}));
                    store.kv_put(names[db], &key, value.clone()).unwrap();
                    model[db].insert(key, value);
                } else {
                    store.kv_delete(names[db], &key).unwrap();
                    model[db].remove(&key);
                }
                for (i, n) in names.iter().enumerate() {
                    let actual: BTreeMap<String, Document> = store.kv_scan(n, "").unwrap().into_iter().collect();
                    prop_assert_eq!(&actual, &model[i]);
                }
            }
        }
    }
}
