//! Declarative resource documents.
//!
//! A manifest file holds one or more YAML documents separated by `---`:
//!
//! ```yaml
//! kind: Stream
//! metadata:
//!   name: faces
//! spec:
//!   analytics_unit: face-detector
//!   inputs: [camA]
//!   replicas: auto
//! ```
//!
//! Parsing is strict: unknown keys at the top level or inside `spec` are
//! rejected with the line and column of the offending document.

use std::collections::{BTreeMap, VecDeque};

use datax_core::registry::Replicas;
use datax_core::schema::ConfigSchema;
use datax_core::value::Document;
use serde::{Deserialize, Serialize};

use crate::kind::Kind;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EntitySpec {
    pub executable: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub schema: Option<ConfigSchema>,
    /// Command that rewrites existing configurations during an upgrade.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub migration: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SensorSpec {
    pub driver: String,
    #[serde(default)]
    pub config: Document,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub node_pin: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StreamSpec {
    pub analytics_unit: String,
    #[serde(default)]
    pub inputs: Vec<String>,
    #[serde(default)]
    pub config: Document,
    #[serde(default)]
    pub replicas: Replicas,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub buffer_capacity: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GadgetSpec {
    pub actuator: String,
    #[serde(default)]
    pub inputs: Vec<String>,
    #[serde(default)]
    pub config: Document,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub node_pin: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatabaseSpec {
    pub owner: String,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Spec {
    Entity(EntitySpec),
    Sensor(SensorSpec),
    Stream(StreamSpec),
    Gadget(GadgetSpec),
    Database(DatabaseSpec),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub kind: Kind,
    pub name: String,
    pub spec: Spec,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, thiserror::Error)]
#[error("document {document}, line {line}, column {column}: {message}")]
pub struct ParseError {
    /// 1-based index of the document within the file.
    pub document: usize,
    pub line: usize,
    pub column: usize,
    pub message: String,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct Metadata {
    name: String,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawManifest {
    kind: String,
    metadata: Metadata,
    #[serde(default)]
    spec: serde_yaml::Value,
}

/// 1-based line of the `spec:` key in each document, for errors raised after
/// the YAML itself parsed.
fn spec_lines(text: &str) -> Vec<usize> {
    let mut out = Vec::new();
    let mut doc_start = 1;
    let mut spec_line = None;
    for (i, line) in text.lines().enumerate() {
        if line.starts_with("---") {
            if i > 0 {
                out.push(spec_line.unwrap_or(doc_start));
            }
            doc_start = i + 2;
            spec_line = None;
        } else if spec_line.is_none() && line.starts_with("spec:") {
            spec_line = Some(i + 1);
        }
    }
    out.push(spec_line.unwrap_or(doc_start));
    out
}

fn typed<T: serde::de::DeserializeOwned>(value: serde_yaml::Value) -> Result<T, String> {
    let value = match value {
        serde_yaml::Value::Null => serde_yaml::Value::Mapping(Default::default()),
        v => v,
    };
    serde_yaml::from_value(value).map_err(|e| format!("spec: {e}"))
}

fn convert(raw: RawManifest) -> Result<Manifest, String> {
    let kind = raw
        .kind
        .parse::<Kind>()
        .ok()
        .filter(|k| k.as_str() == raw.kind)
        .ok_or_else(|| format!("unknown kind `{}`", raw.kind))?;
    if raw.metadata.name.is_empty() {
        return Err("metadata.name must not be empty".into());
    }
    let spec = match kind {
        Kind::Driver | Kind::AnalyticsUnit | Kind::Actuator => Spec::Entity(typed(raw.spec)?),
        Kind::Sensor => Spec::Sensor(typed(raw.spec)?),
        Kind::Stream => Spec::Stream(typed(raw.spec)?),
        Kind::Gadget => Spec::Gadget(typed(raw.spec)?),
        Kind::Database => Spec::Database(typed(raw.spec)?),
    };
    Ok(Manifest {
        kind,
        name: raw.metadata.name,
        spec,
    })
}

/// Parses every document of a manifest file. Empty documents are skipped.
pub fn parse(text: &str) -> Result<Vec<Manifest>, ParseError> {
    let lines = spec_lines(text);
    let mut out = Vec::new();
    for (i, doc) in serde_yaml::Deserializer::from_str(text).enumerate() {
        let value = serde_yaml::Value::deserialize(doc).map_err(|e| located(i + 1, &e))?;
        if value.is_null() {
            continue;
        }
        let raw: RawManifest = serde_yaml::from_value(value).map_err(|e| ParseError {
            document: i + 1,
            line: lines.get(i).copied().unwrap_or(1),
            column: 1,
            message: e.to_string(),
        })?;
        out.push(convert(raw).map_err(|message| ParseError {
            document: i + 1,
            line: lines.get(i).copied().unwrap_or(1),
            column: 1,
            message,
        })?);
    }
    Ok(out)
}

fn located(document: usize, e: &serde_yaml::Error) -> ParseError {
    let (line, column) = e.location().map(|l| (l.line(), l.column())).unwrap_or((1, 1));
    ParseError {
        document,
        line,
        column,
        message: e.to_string(),
    }
}

/// Indices of `docs` in application order: entities, sensors, streams (each
/// after the in-file streams it reads), gadgets, databases. Text order is
/// kept within a group.
pub fn apply_order(docs: &[Manifest]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..docs.len()).collect();
    order.sort_by_key(|&i| docs[i].kind.apply_rank());

    let streams: Vec<usize> = order.iter().copied().filter(|&i| docs[i].kind == Kind::Stream).collect();
    let by_name: BTreeMap<&str, usize> = streams.iter().map(|&i| (docs[i].name.as_str(), i)).collect();
    let mut indegree: BTreeMap<usize, usize> = streams.iter().map(|&i| (i, 0)).collect();
    let mut readers: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for &i in &streams {
        if let Spec::Stream(s) = &docs[i].spec {
            for input in &s.inputs {
                if let Some(&j) = by_name.get(input.as_str()) {
                    if j != i {
                        *indegree.get_mut(&i).unwrap() += 1;
                        readers.entry(j).or_default().push(i);
                    }
                }
            }
        }
    }
    // Kahn's algorithm, always taking the earliest ready document.
    let mut sorted = Vec::with_capacity(streams.len());
    let mut ready: VecDeque<usize> = streams.iter().copied().filter(|i| indegree[i] == 0).collect();
    while let Some(i) = ready.pop_front() {
        sorted.push(i);
        for &r in readers.get(&i).map(Vec::as_slice).unwrap_or(&[]) {
            let d = indegree.get_mut(&r).unwrap();
            *d -= 1;
            if *d == 0 {
                let pos = ready.iter().position(|&x| x > r).unwrap_or(ready.len());
                ready.insert(pos, r);
            }
        }
    }
    // Cyclic leftovers go last in text order; the registry will refuse them.
    let leftovers: Vec<usize> = streams.iter().copied().filter(|i| !sorted.contains(i)).collect();
    sorted.extend(leftovers);

    let first = order.iter().position(|&i| docs[i].kind == Kind::Stream);
    if let Some(first) = first {
        order.splice(first..first + sorted.len(), sorted);
    }
    order
}

#[cfg(test)]
mod tests {
    use super::*;

    const SAMPLE: &str = "\
kind: Driver
metadata:
  name: cam
spec:
  executable: /bin/cam
  schema:
    fps: {type: int, required: true}
---
kind: Stream
metadata: {name: faces}
spec:
  analytics_unit: fd
  inputs: [camA]
  replicas: 2
---
kind: Sensor
metadata: {name: camA}
spec:
  driver: cam
  config: {fps: 15}
  node_pin: n1
";

    #[test]
    fn parses_documents() {
        let docs = parse(SAMPLE).unwrap();
        assert_eq!(docs.len(), 3);
        assert_eq!(docs[0].kind, Kind::Driver);
        let Spec::Stream(s) = &docs[1].spec else { panic!() };
        assert_eq!(s.replicas, Replicas::Fixed(2));
        assert_eq!(s.inputs, ["camA"]);
        let Spec::Sensor(s) = &docs[2].spec else { panic!() };
        assert_eq!(s.node_pin.as_deref(), Some("n1"));
        assert_eq!(s.config["fps"], 15);
    }

    #[test]
    fn unknown_top_level_key_is_located() {
        let text = "kind: Driver\nmetadata: {name: a}\nspec: {executable: x}\n---\nkind: Driver\nmetadata: {name: b}\nlabels: {}\n";
        let err = parse(text).unwrap_err();
        assert_eq!(err.document, 2);
        assert!(err.message.contains("labels"), "{err}");
    }

    #[test]
    fn unknown_spec_key_points_at_spec() {
        let text = "kind: Driver\nmetadata: {name: a}\nspec: {executable: x}\n---\nkind: Sensor\nmetadata: {name: s}\nspec:\n  driver: a\n  colour: red\n";
        let err = parse(text).unwrap_err();
        assert_eq!((err.document, err.line), (2, 7));
        assert!(err.message.contains("colour"), "{err}");
    }

    #[test]
    fn syntax_error_has_position() {
        let err = parse("kind: Driver\nmetadata: {name: a\n").unwrap_err();
        assert_eq!(err.document, 1);
        assert!(err.line >= 2, "{err}");
    }

    #[test]
    fn unknown_kind_rejected() {
        let err = parse("kind: Pod\nmetadata: {name: a}\n").unwrap_err();
        assert!(err.message.contains("Pod"));
        let err = parse("kind: driver\nmetadata: {name: a}\nspec: {executable: x}\n").unwrap_err();
        assert!(err.message.contains("driver"));
    }

    #[test]
    fn replicas_word_or_count() {
        let docs = parse("kind: Stream\nmetadata: {name: s}\nspec: {analytics_unit: a, replicas: auto}\n").unwrap();
        let Spec::Stream(s) = &docs[0].spec else { panic!() };
        assert_eq!(s.replicas, Replicas::Auto);
        assert!(parse("kind: Stream\nmetadata: {name: s}\nspec: {analytics_unit: a, replicas: many}\n").is_err());
    }

    fn stream(name: &str, inputs: &[&str]) -> Manifest {
        Manifest {
            kind: Kind::Stream,
            name: name.into(),
            spec: Spec::Stream(StreamSpec {
                analytics_unit: "au".into(),
                inputs: inputs.iter().map(|s| s.to_string()).collect(),
                config: Document::new(),
                replicas: Replicas::Auto,
                buffer_capacity: None,
            }),
        }
    }

    #[test]
    fn streams_follow_their_inputs() {
        let db = Manifest {
            kind: Kind::Database,
            name: "d".into(),
            spec: Spec::Database(DatabaseSpec { owner: "c".into() }),
        };
        let driver = Manifest {
            kind: Kind::Driver,
            name: "x".into(),
            spec: Spec::Entity(EntitySpec {
                executable: "x".into(),
                schema: None,
                migration: None,
            }),
        };
        let docs = vec![db, stream("c", &["b"]), stream("b", &["a", "cam"]), stream("a", &["cam"]), driver];
        assert_eq!(apply_order(&docs), vec![4, 3, 2, 1, 0]);
    }
}
