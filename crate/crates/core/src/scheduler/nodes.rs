use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

pub const HEARTBEAT_PERIOD_MS: u64 = 2_000;
/// A node is dead once this many consecutive heartbeats are missed.
pub const MISSED_HEARTBEATS: u64 = 3;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeRecord {
    pub node_id: String,
    /// `host:port` of the node's runner endpoint; empty for in-process nodes.
    #[serde(default)]
    pub address: String,
    pub capacity: u32,
    #[serde(default = "alive_default")]
    pub alive: bool,
    #[serde(default)]
    pub last_heartbeat_ms: u64,
}

fn alive_default() -> bool {
    true
}

impl NodeRecord {
    pub fn new(node_id: impl Into<String>, address: impl Into<String>, capacity: u32, now_ms: u64) -> Self {
        NodeRecord {
            node_id: node_id.into(),
            address: address.into(),
            capacity,
            alive: true,
            last_heartbeat_ms: now_ms,
        }
    }
}

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum NodeError {
    #[error("node `{0}` not found")]
    NotFound(String),
}

/// Node membership with a heartbeat failure detector.
#[derive(Debug, Clone, Default)]
pub struct NodeTable {
    nodes: BTreeMap<String, NodeRecord>,
}

impl NodeTable {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers or re-registers a node; registration counts as a heartbeat.
    pub fn register(&mut self, mut record: NodeRecord, now_ms: u64) {
        record.alive = true;
        record.last_heartbeat_ms = now_ms;
        self.nodes.insert(record.node_id.clone(), record);
    }

    pub fn heartbeat(&mut self, node_id: &str, now_ms: u64) -> Result<(), NodeError> {
        let node = self
            .nodes
            .get_mut(node_id)
            .ok_or_else(|| NodeError::NotFound(node_id.to_string()))?;
        node.last_heartbeat_ms = node.last_heartbeat_ms.max(now_ms);
        node.alive = true;
        Ok(())
    }

    pub fn remove(&mut self, node_id: &str) -> Option<NodeRecord> {
        self.nodes.remove(node_id)
    }

    /// Marks nodes dead whose last heartbeat is too old. Returns the ids that
    /// changed to dead.
    pub fn refresh(&mut self, now_ms: u64) -> Vec<String> {
        let limit = HEARTBEAT_PERIOD_MS * MISSED_HEARTBEATS;
        let mut died = Vec::new();
        for node in self.nodes.values_mut() {
            if node.alive && now_ms.saturating_sub(node.last_heartbeat_ms) > limit {
                node.alive = false;
                died.push(node.node_id.clone());
            }
        }
        died
    }

    pub fn get(&self, node_id: &str) -> Option<&NodeRecord> {
        self.nodes.get(node_id)
    }

    pub fn records(&self) -> &BTreeMap<String, NodeRecord> {
        &self.nodes
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dead_after_three_missed_heartbeats() {
        let mut table = NodeTable::new();
        table.register(NodeRecord::new("n1", "10.0.0.1:7000", 4, 0), 0);
        assert!(table.refresh(6_000).is_empty());
        assert!(table.get("n1").unwrap().alive);
        assert_eq!(table.refresh(6_001), vec!["n1".to_string()]);
        assert!(!table.get("n1").unwrap().alive);
        assert!(table.refresh(7_000).is_empty());
    }

    #[test]
    fn heartbeat_revives() {
        let mut table = NodeTable::new();
        table.register(NodeRecord::new("n1", "", 4, 0), 0);
        table.heartbeat("n1", 1_900).unwrap();
        assert!(table.refresh(7_500).is_empty());
        table.refresh(20_000);
        table.heartbeat("n1", 20_000).unwrap();
        assert!(table.get("n1").unwrap().alive);
        assert_eq!(table.heartbeat("n9", 0), Err(NodeError::NotFound("n9".into())));
    }
}
