use std::fmt;
use std::str::FromStr;

use datax_core::registry::EntityKind;
use serde::{Deserialize, Serialize};

/// Every resource kind a manifest or the API can name.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Kind {
    Driver,
    AnalyticsUnit,
    Actuator,
    Sensor,
    Stream,
    Gadget,
    Database,
}

impl Kind {
    pub const ALL: [Kind; 7] = [
        Kind::Driver,
        Kind::AnalyticsUnit,
        Kind::Actuator,
        Kind::Sensor,
        Kind::Stream,
        Kind::Gadget,
        Kind::Database,
    ];

    /// Manifest spelling, e.g. `AnalyticsUnit`.
    pub fn as_str(self) -> &'static str {
        match self {
            Kind::Driver => "Driver",
            Kind::AnalyticsUnit => "AnalyticsUnit",
            Kind::Actuator => "Actuator",
            Kind::Sensor => "Sensor",
            Kind::Stream => "Stream",
            Kind::Gadget => "Gadget",
            Kind::Database => "Database",
        }
    }

    /// URL collection segment, e.g. `analyticsunits`.
    pub fn plural(self) -> String {
        format!("{}s", self.as_str().to_ascii_lowercase())
    }

    pub fn entity_kind(self) -> Option<EntityKind> {
        match self {
            Kind::Driver => Some(EntityKind::Driver),
            Kind::AnalyticsUnit => Some(EntityKind::AnalyticsUnit),
            Kind::Actuator => Some(EntityKind::Actuator),
            _ => None,
        }
    }

    /// Position in dependency order: entities, sensors, streams, gadgets,
    /// databases.
    pub fn apply_rank(self) -> u8 {
        match self {
            Kind::Driver | Kind::AnalyticsUnit | Kind::Actuator => 0,
            Kind::Sensor => 1,
            Kind::Stream => 2,
            Kind::Gadget => 3,
            Kind::Database => 4,
        }
    }

    /// Accepts manifest spelling, lowercase, plural, and the `au` shorthand.
    pub fn parse_loose(s: &str) -> Option<Kind> {
        let lower: String = s.chars().filter(|c| *c != '-' && *c != '_').collect::<String>().to_ascii_lowercase();
        let singular = lower.strip_suffix('s').unwrap_or(&lower);
        match singular {
            "driver" => Some(Kind::Driver),
            "analyticsunit" | "au" => Some(Kind::AnalyticsUnit),
            "actuator" => Some(Kind::Actuator),
            "sensor" => Some(Kind::Sensor),
            "stream" => Some(Kind::Stream),
            "gadget" => Some(Kind::Gadget),
            "database" | "db" => Some(Kind::Database),
            _ => None,
        }
    }
}

impl fmt::Display for Kind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("unknown kind `{0}`")]
pub struct UnknownKind(pub String);

impl FromStr for Kind {
    type Err = UnknownKind;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Kind::parse_loose(s).ok_or_else(|| UnknownKind(s.to_string()))
    }
}
