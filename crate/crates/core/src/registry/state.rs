//! The registry's data and its admission rules, free of locking and I/O.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::schema::validate_optional;
use crate::value::Document;

use super::error::RegistryError;
use super::types::*;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RegistryState {
    drivers: BTreeMap<String, EntityRecord>,
    analytics_units: BTreeMap<String, EntityRecord>,
    actuators: BTreeMap<String, EntityRecord>,
    sensors: BTreeMap<String, SensorRecord>,
    streams: BTreeMap<String, StreamRecord>,
    gadgets: BTreeMap<String, GadgetRecord>,
}

impl RegistryState {
    pub fn entities(&self, kind: EntityKind) -> &BTreeMap<String, EntityRecord> {
        match kind {
            EntityKind::Driver => &self.drivers,
            EntityKind::AnalyticsUnit => &self.analytics_units,
            EntityKind::Actuator => &self.actuators,
        }
    }

    fn entities_mut(&mut self, kind: EntityKind) -> &mut BTreeMap<String, EntityRecord> {
        match kind {
            EntityKind::Driver => &mut self.drivers,
            EntityKind::AnalyticsUnit => &mut self.analytics_units,
            EntityKind::Actuator => &mut self.actuators,
        }
    }

    pub fn entity(&self, kind: EntityKind, name: &str) -> Option<&EntityRecord> {
        self.entities(kind).get(name)
    }

    pub fn sensors(&self) -> &BTreeMap<String, SensorRecord> {
        &self.sensors
    }

    pub fn streams(&self) -> &BTreeMap<String, StreamRecord> {
        &self.streams
    }

    pub fn gadgets(&self) -> &BTreeMap<String, GadgetRecord> {
        &self.gadgets
    }

    pub fn sensor(&self, name: &str) -> Option<&SensorRecord> {
        self.sensors.get(name)
    }

    pub fn stream(&self, name: &str) -> Option<&StreamRecord> {
        self.streams.get(name)
    }

    pub fn gadget(&self, name: &str) -> Option<&GadgetRecord> {
        self.gadgets.get(name)
    }

    /// Streams and gadgets that consume stream `name`, lexicographically ordered.
    pub fn dependents(&self, name: &str) -> Result<Vec<String>, RegistryError> {
        if !self.streams.contains_key(name) {
            return Err(RegistryError::NotFound {
                kind: RecordKind::Stream,
                name: name.to_string(),
            });
        }
        let consumers: BTreeSet<String> = self
            .streams
            .values()
            .filter(|s| s.inputs.iter().any(|i| i == name))
            .map(|s| s.name.clone())
            .chain(
                self.gadgets
                    .values()
                    .filter(|g| g.inputs.iter().any(|i| i == name))
                    .map(|g| g.name.clone()),
            )
            .collect();
        Ok(consumers.into_iter().collect())
    }

    /// Sensors, streams or gadgets whose configuration belongs to the entity.
    pub fn references(&self, kind: EntityKind, name: &str) -> Vec<Reference> {
        let mut refs: Vec<Reference> = match kind {
            EntityKind::Driver => self
                .sensors
                .values()
                .filter(|s| s.driver == name)
                .map(|s| Reference::new(RecordKind::Sensor, &s.name))
                .collect(),
            EntityKind::AnalyticsUnit => self
                .streams
                .values()
                .filter(|s| s.producer_kind == ProducerKind::AnalyticsUnit && s.producer == name)
                .map(|s| Reference::new(RecordKind::Stream, &s.name))
                .collect(),
            EntityKind::Actuator => self
                .gadgets
                .values()
                .filter(|g| g.actuator == name)
                .map(|g| Reference::new(RecordKind::Gadget, &g.name))
                .collect(),
        };
        refs.sort();
        refs
    }

    pub fn reference_config(&self, target: &Reference) -> Option<&Document> {
        match target.kind {
            RecordKind::Sensor => self.sensors.get(&target.name).map(|s| &s.config),
            RecordKind::Stream => self.streams.get(&target.name).map(|s| &s.au_config),
            RecordKind::Gadget => self.gadgets.get(&target.name).map(|g| &g.config),
            _ => None,
        }
    }

    fn reference_config_mut(&mut self, target: &Reference) -> Option<&mut Document> {
        match target.kind {
            RecordKind::Sensor => self.sensors.get_mut(&target.name).map(|s| &mut s.config),
            RecordKind::Stream => self.streams.get_mut(&target.name).map(|s| &mut s.au_config),
            RecordKind::Gadget => self.gadgets.get_mut(&target.name).map(|g| &mut g.config),
            _ => None,
        }
    }

    pub(crate) fn check_entity(record: &EntityRecord) -> Result<(), RegistryError> {
        if record.executable.trim().is_empty() {
            return Err(RegistryError::EmptyExecutable(record.name.clone()));
        }
        if let Some(schema) = &record.schema {
            schema.check().map_err(|source| RegistryError::InvalidSchema {
                name: record.name.clone(),
                source,
            })?;
        }
        Ok(())
    }

    pub fn register_entity(&mut self, mut record: EntityRecord) -> Result<EntityRecord, RegistryError> {
        if self.entities(record.kind).contains_key(&record.name) {
            return Err(RegistryError::DuplicateName {
                kind: record.kind.record_kind(),
                name: record.name,
            });
        }
        Self::check_entity(&record)?;
        record.version = 1;
        self.entities_mut(record.kind)
            .insert(record.name.clone(), record.clone());
        Ok(record)
    }

    /// Replaces an entity and the configurations of its references. The
    /// caller has already validated every configuration.
    pub(crate) fn commit_upgrade(
        &mut self,
        record: EntityRecord,
        configs: Vec<(Reference, Document)>,
    ) -> Result<(), RegistryError> {
        let kind = record.kind;
        if !self.entities(kind).contains_key(&record.name) {
            return Err(RegistryError::NotFound {
                kind: kind.record_kind(),
                name: record.name,
            });
        }
        for (target, config) in configs {
            let slot = self
                .reference_config_mut(&target)
                .ok_or_else(|| RegistryError::NotFound {
                    kind: target.kind,
                    name: target.name.clone(),
                })?;
            *slot = config;
        }
        self.entities_mut(kind).insert(record.name.clone(), record);
        Ok(())
    }

    pub fn delete_entity(&mut self, kind: EntityKind, name: &str) -> Result<(), RegistryError> {
        if !self.entities(kind).contains_key(name) {
            return Err(RegistryError::NotFound {
                kind: kind.record_kind(),
                name: name.to_string(),
            });
        }
        let users = self.references(kind, name);
        if !users.is_empty() {
            return Err(RegistryError::InUse {
                kind: kind.record_kind(),
                name: name.to_string(),
                users,
            });
        }
        self.entities_mut(kind).remove(name);
        Ok(())
    }

    fn validated(
        entity: &EntityRecord,
        target: Reference,
        config: &Document,
    ) -> Result<Document, RegistryError> {
        let report = validate_optional(entity.schema.as_ref(), config);
        if report.is_valid() {
            Ok(report.normalized)
        } else {
            Err(RegistryError::InvalidConfig { target, report })
        }
    }

    fn check_inputs(&self, inputs: &[String]) -> Result<(), RegistryError> {
        match inputs.iter().find(|i| !self.streams.contains_key(*i)) {
            Some(missing) => Err(RegistryError::UnknownInput(missing.clone())),
            None => Ok(()),
        }
    }

    pub fn register_sensor(&mut self, mut record: SensorRecord) -> Result<SensorRecord, RegistryError> {
        if self.sensors.contains_key(&record.name) || self.streams.contains_key(&record.name) {
            return Err(RegistryError::DuplicateName {
                kind: RecordKind::Sensor,
                name: record.name,
            });
        }
        let driver = self
            .drivers
            .get(&record.driver)
            .ok_or_else(|| RegistryError::DriverMissing(record.driver.clone()))?;
        record.config = Self::validated(
            driver,
            Reference::new(RecordKind::Sensor, &record.name),
            &record.config,
        )?;
        self.streams
            .insert(record.name.clone(), StreamRecord::for_sensor(&record));
        self.sensors.insert(record.name.clone(), record.clone());
        Ok(record)
    }

    pub fn create_stream(&mut self, mut record: StreamRecord) -> Result<StreamRecord, RegistryError> {
        if self.streams.contains_key(&record.name) {
            return Err(RegistryError::DuplicateName {
                kind: RecordKind::Stream,
                name: record.name,
            });
        }
        // Sensor streams only come into existence through register_sensor.
        record.producer_kind = ProducerKind::AnalyticsUnit;
        if record.replicas == Replicas::Fixed(0) {
            return Err(RegistryError::ZeroReplicas { name: record.name });
        }
        let au = self
            .analytics_units
            .get(&record.producer)
            .ok_or_else(|| RegistryError::AuMissing(record.producer.clone()))?;
        record.au_config = Self::validated(
            au,
            Reference::new(RecordKind::Stream, &record.name),
            &record.au_config,
        )?;
        if let Some(cycle) = self.cycle_through(&record.name, &record.inputs) {
            return Err(RegistryError::CycleDetected(cycle));
        }
        self.check_inputs(&record.inputs)?;
        self.streams.insert(record.name.clone(), record.clone());
        Ok(record)
    }

    pub fn register_gadget(&mut self, mut record: GadgetRecord) -> Result<GadgetRecord, RegistryError> {
        if self.gadgets.contains_key(&record.name) {
            return Err(RegistryError::DuplicateName {
                kind: RecordKind::Gadget,
                name: record.name,
            });
        }
        let actuator = self
            .actuators
            .get(&record.actuator)
            .ok_or_else(|| RegistryError::ActuatorMissing(record.actuator.clone()))?;
        record.config = Self::validated(
            actuator,
            Reference::new(RecordKind::Gadget, &record.name),
            &record.config,
        )?;
        self.check_inputs(&record.inputs)?;
        self.gadgets.insert(record.name.clone(), record.clone());
        Ok(record)
    }

    fn refuse_if_consumed(&self, name: &str) -> Result<(), RegistryError> {
        let dependents = self.dependents(name)?;
        if dependents.is_empty() {
            Ok(())
        } else {
            Err(RegistryError::HasDependents {
                name: name.to_string(),
                dependents,
            })
        }
    }

    pub fn delete_sensor(&mut self, name: &str) -> Result<(), RegistryError> {
        if !self.sensors.contains_key(name) {
            return Err(RegistryError::NotFound {
                kind: RecordKind::Sensor,
                name: name.to_string(),
            });
        }
        self.refuse_if_consumed(name)?;
        self.sensors.remove(name);
        self.streams.remove(name);
        Ok(())
    }

    pub fn delete_stream(&mut self, name: &str) -> Result<(), RegistryError> {
        let stream = self.streams.get(name).ok_or_else(|| RegistryError::NotFound {
            kind: RecordKind::Stream,
            name: name.to_string(),
        })?;
        if stream.producer_kind == ProducerKind::Sensor {
            return Err(RegistryError::SensorStream(name.to_string()));
        }
        self.refuse_if_consumed(name)?;
        self.streams.remove(name);
        Ok(())
    }

    pub fn delete_gadget(&mut self, name: &str) -> Result<(), RegistryError> {
        self.gadgets
            .remove(name)
            .map(|_| ())
            .ok_or_else(|| RegistryError::NotFound {
                kind: RecordKind::Gadget,
                name: name.to_string(),
            })
    }

    /// If a stream `name` consuming `inputs` would close a cycle, returns the
    /// cycle as a path starting and ending at `name`.
    fn cycle_through(&self, name: &str, inputs: &[String]) -> Option<Vec<String>> {
        // Walk upstream from each input looking for `name`.
        let mut stack: Vec<Vec<String>> = inputs
            .iter()
            .map(|i| vec![name.to_string(), i.clone()])
            .collect();
        let mut seen = BTreeSet::new();
        while let Some(path) = stack.pop() {
            let head = path.last().expect("paths are non-empty");
            if head == name {
                let mut cycle = path.clone();
                cycle.reverse();
                return Some(cycle);
            }
            if !seen.insert(head.clone()) {
                continue;
            }
            if let Some(stream) = self.streams.get(head) {
                for upstream in &stream.inputs {
                    let mut next = path.clone();
                    next.push(upstream.clone());
                    stack.push(next);
                }
            }
        }
        None
    }

    /// Returns a cycle in the stream graph, if one exists.
    pub fn find_cycle(&self) -> Option<Vec<String>> {
        #[derive(Clone, Copy, PartialEq)]
        enum Mark {
            Active,
            Done,
        }
        fn visit<'a>(
            state: &'a RegistryState,
            node: &'a str,
            marks: &mut BTreeMap<&'a str, Mark>,
            path: &mut Vec<&'a str>,
        ) -> Option<Vec<String>> {
            match marks.get(node) {
                Some(Mark::Done) => return None,
                Some(Mark::Active) => {
                    let start = path.iter().position(|n| *n == node).unwrap_or(0);
                    let mut cycle: Vec<String> = path[start..].iter().map(|s| s.to_string()).collect();
                    cycle.push(node.to_string());
                    return Some(cycle);
                }
                None => {}
            }
            marks.insert(node, Mark::Active);
            path.push(node);
            if let Some(stream) = state.streams.get(node) {
                for input in &stream.inputs {
                    if let Some(cycle) = visit(state, input, marks, path) {
                        return Some(cycle);
                    }
                }
            }
            path.pop();
            marks.insert(node, Mark::Done);
            None
        }

        let mut marks = BTreeMap::new();
        for name in self.streams.keys() {
            let mut path = Vec::new();
            if let Some(cycle) = visit(self, name, &mut marks, &mut path) {
                return Some(cycle);
            }
        }
        None
    }

    /// Checks referential integrity and the sensor/stream pairing. Returns a
    /// description of the first violation.
    pub fn check_integrity(&self) -> Result<(), String> {
        for sensor in self.sensors.values() {
            if !self.drivers.contains_key(&sensor.driver) {
                return Err(format!("sensor {} -> missing driver {}", sensor.name, sensor.driver));
            }
            match self.streams.get(&sensor.name) {
                Some(s) if s.producer_kind == ProducerKind::Sensor => {}
                _ => return Err(format!("sensor {} has no stream", sensor.name)),
            }
        }
        for stream in self.streams.values() {
            match stream.producer_kind {
                ProducerKind::Sensor => {
                    if !self.sensors.contains_key(&stream.name) || !stream.inputs.is_empty() {
                        return Err(format!("orphan sensor stream {}", stream.name));
                    }
                }
                ProducerKind::AnalyticsUnit => {
                    if !self.analytics_units.contains_key(&stream.producer) {
                        return Err(format!("stream {} -> missing AU {}", stream.name, stream.producer));
                    }
                }
            }
            if let Some(i) = stream.inputs.iter().find(|i| !self.streams.contains_key(*i)) {
                return Err(format!("stream {} -> missing input {i}", stream.name));
            }
        }
        for gadget in self.gadgets.values() {
            if !self.actuators.contains_key(&gadget.actuator) {
                return Err(format!("gadget {} -> missing actuator {}", gadget.name, gadget.actuator));
            }
            if let Some(i) = gadget.inputs.iter().find(|i| !self.streams.contains_key(*i)) {
                return Err(format!("gadget {} -> missing input {i}", gadget.name));
            }
        }
        Ok(())
    }

    /// Stream names ordered so that every stream follows its inputs.
    pub fn topological_streams(&self) -> Vec<String> {
        let mut order = Vec::with_capacity(self.streams.len());
        let mut placed = BTreeSet::new();
        while order.len() < self.streams.len() {
            let before = order.len();
            for stream in self.streams.values() {
                if !placed.contains(stream.name.as_str())
                    && stream.inputs.iter().all(|i| placed.contains(i.as_str()))
                {
                    placed.insert(stream.name.as_str());
                    order.push(stream.name.clone());
                }
            }
            if order.len() == before {
                break;
            }
        }
        order
    }
}
