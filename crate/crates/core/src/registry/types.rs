use std::fmt;

use serde::{Deserialize, Serialize};

use crate::schema::ConfigSchema;
use crate::value::Document;

/// The three kinds of reusable business-logic units.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EntityKind {
    Driver,
    AnalyticsUnit,
    Actuator,
}

impl EntityKind {
    pub const ALL: [EntityKind; 3] = [
        EntityKind::Driver,
        EntityKind::AnalyticsUnit,
        EntityKind::Actuator,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            EntityKind::Driver => "driver",
            EntityKind::AnalyticsUnit => "analytics_unit",
            EntityKind::Actuator => "actuator",
        }
    }

    pub fn record_kind(self) -> RecordKind {
        match self {
            EntityKind::Driver => RecordKind::Driver,
            EntityKind::AnalyticsUnit => RecordKind::AnalyticsUnit,
            EntityKind::Actuator => RecordKind::Actuator,
        }
    }
}

impl fmt::Display for EntityKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Every kind of record the registry stores, used to name things in errors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecordKind {
    Driver,
    AnalyticsUnit,
    Actuator,
    Sensor,
    Stream,
    Gadget,
}

impl RecordKind {
    pub fn as_str(self) -> &'static str {
        match self {
            RecordKind::Driver => "driver",
            RecordKind::AnalyticsUnit => "analytics_unit",
            RecordKind::Actuator => "actuator",
            RecordKind::Sensor => "sensor",
            RecordKind::Stream => "stream",
            RecordKind::Gadget => "gadget",
        }
    }
}

impl fmt::Display for RecordKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// A registered driver, analytics unit or actuator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntityRecord {
    pub name: String,
    pub kind: EntityKind,
    /// Program path or command line of the business logic.
    pub executable: String,
    /// `None` accepts any configuration; `Some(empty)` accepts only `{}`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub schema: Option<ConfigSchema>,
    #[serde(default)]
    pub version: u64,
}

impl EntityRecord {
    pub fn new(name: impl Into<String>, kind: EntityKind, executable: impl Into<String>) -> Self {
        EntityRecord {
            name: name.into(),
            kind,
            executable: executable.into(),
            schema: None,
            version: 0,
        }
    }

    pub fn with_schema(mut self, schema: ConfigSchema) -> Self {
        self.schema = Some(schema);
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensorRecord {
    pub name: String,
    pub driver: String,
    #[serde(default)]
    pub config: Document,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub node_pin: Option<String>,
}

impl SensorRecord {
    pub fn new(name: impl Into<String>, driver: impl Into<String>, config: Document) -> Self {
        SensorRecord {
            name: name.into(),
            driver: driver.into(),
            config,
            node_pin: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProducerKind {
    Sensor,
    AnalyticsUnit,
}

/// Replica policy of an analytics-unit stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Replicas {
    Fixed(u32),
    #[default]
    Auto,
}

impl Serialize for Replicas {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            Replicas::Fixed(n) => s.serialize_u32(*n),
            Replicas::Auto => s.serialize_str("auto"),
        }
    }
}

impl<'de> Deserialize<'de> for Replicas {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Count(u32),
            Word(String),
        }
        match Raw::deserialize(d)? {
            Raw::Count(n) => Ok(Replicas::Fixed(n)),
            Raw::Word(w) if w == "auto" => Ok(Replicas::Auto),
            Raw::Word(w) => Err(serde::de::Error::custom(format!(
                "replicas must be a positive integer or \"auto\", got {w:?}"
            ))),
        }
    }
}

impl fmt::Display for Replicas {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Replicas::Fixed(n) => write!(f, "{n}"),
            Replicas::Auto => f.write_str("auto"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StreamRecord {
    pub name: String,
    pub producer_kind: ProducerKind,
    /// Analytics-unit name, or the sensor name for sensor streams.
    pub producer: String,
    #[serde(default)]
    pub inputs: Vec<String>,
    #[serde(default)]
    pub au_config: Document,
    #[serde(default)]
    pub replicas: Replicas,
    /// Per-subscription buffer size for consumers of this stream.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub buffer_capacity: Option<usize>,
}

impl StreamRecord {
    /// An analytics-unit stream with automatic scaling.
    pub fn derived(
        name: impl Into<String>,
        au: impl Into<String>,
        inputs: impl IntoIterator<Item = impl Into<String>>,
        au_config: Document,
    ) -> Self {
        StreamRecord {
            name: name.into(),
            producer_kind: ProducerKind::AnalyticsUnit,
            producer: au.into(),
            inputs: inputs.into_iter().map(Into::into).collect(),
            au_config,
            replicas: Replicas::Auto,
            buffer_capacity: None,
        }
    }

    pub fn with_replicas(mut self, replicas: Replicas) -> Self {
        self.replicas = replicas;
        self
    }

    pub(crate) fn for_sensor(sensor: &SensorRecord) -> Self {
        StreamRecord {
            name: sensor.name.clone(),
            producer_kind: ProducerKind::Sensor,
            producer: sensor.name.clone(),
            inputs: Vec::new(),
            au_config: Document::new(),
            replicas: Replicas::Fixed(1),
            buffer_capacity: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GadgetRecord {
    pub name: String,
    pub actuator: String,
    #[serde(default)]
    pub inputs: Vec<String>,
    #[serde(default)]
    pub config: Document,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub node_pin: Option<String>,
}

impl GadgetRecord {
    pub fn new(
        name: impl Into<String>,
        actuator: impl Into<String>,
        inputs: impl IntoIterator<Item = impl Into<String>>,
        config: Document,
    ) -> Self {
        GadgetRecord {
            name: name.into(),
            actuator: actuator.into(),
            inputs: inputs.into_iter().map(Into::into).collect(),
            config,
            node_pin: None,
        }
    }
}

/// A sensor, stream or gadget whose configuration belongs to an entity.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Reference {
    pub kind: RecordKind,
    pub name: String,
}

impl Reference {
    pub fn new(kind: RecordKind, name: impl Into<String>) -> Self {
        Reference {
            kind,
            name: name.into(),
        }
    }
}

impl fmt::Display for Reference {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.kind, self.name)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum MigrationOutcome {
    /// Configuration already valid under the new schema; no script supplied.
    Compatible,
    Migrated,
    Failed { reason: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceMigration {
    pub target: Reference,
    #[serde(flatten)]
    pub outcome: MigrationOutcome,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UpgradeReport {
    pub name: String,
    pub kind: EntityKind,
    pub accepted: bool,
    pub from_version: u64,
    pub to_version: u64,
    pub instances: Vec<InstanceMigration>,
}

impl fmt::Display for UpgradeReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let failed: Vec<String> = self
            .instances
            .iter()
            .filter_map(|i| match &i.outcome {
                MigrationOutcome::Failed { reason } => Some(format!("{} ({reason})", i.target)),
                _ => None,
            })
            .collect();
        write!(f, "{} {}: ", self.kind, self.name)?;
        if failed.is_empty() {
            write!(f, "v{} -> v{}", self.from_version, self.to_version)
        } else {
            write!(f, "incompatible for {}", failed.join(", "))
        }
    }
}
