//! Configuration schemas and validation.
//!
//! A schema is a flat, closed-world map of typed fields. Validation never
//! fails with an error: it returns a [`ValidationReport`] whose issue list is
//! empty exactly when the configuration is acceptable, together with the
//! configuration normalized by filling in declared defaults.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::value::{type_name, Document, Value};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FieldType {
    String,
    Int,
    Float,
    Bool,
    List,
    Map,
}

impl FieldType {
    pub const ALL: [FieldType; 6] = [
        FieldType::String,
        FieldType::Int,
        FieldType::Float,
        FieldType::Bool,
        FieldType::List,
        FieldType::Map,
    ];

    /// Whether `value` inhabits this type. Integers are accepted where a
    /// float is expected; null inhabits no type.
    pub fn admits(self, value: &Value) -> bool {
        match self {
            FieldType::String => value.is_string(),
            FieldType::Int => value.is_i64() || value.is_u64(),
            FieldType::Float => value.is_number(),
            FieldType::Bool => value.is_boolean(),
            FieldType::List => value.is_array(),
            FieldType::Map => value.is_object(),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            FieldType::String => "string",
            FieldType::Int => "int",
            FieldType::Float => "float",
            FieldType::Bool => "bool",
            FieldType::List => "list",
            FieldType::Map => "map",
        }
    }
}

impl fmt::Display for FieldType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FieldSpec {
    #[serde(rename = "type")]
    pub ty: FieldType,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub required: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub default: Option<Value>,
}

impl FieldSpec {
    pub fn new(ty: FieldType) -> Self {
        FieldSpec {
            ty,
            required: false,
            default: None,
        }
    }

    pub fn required(mut self) -> Self {
        self.required = true;
        self
    }

    pub fn with_default(mut self, value: Value) -> Self {
        self.default = Some(value);
        self
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ConfigSchema {
    pub fields: BTreeMap<String, FieldSpec>,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum SchemaError {
    #[error("field names must be non-empty")]
    EmptyFieldName,
    #[error("default for field `{field}` is not a {expected}")]
    DefaultTypeMismatch { field: String, expected: FieldType },
}

impl ConfigSchema {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn field(mut self, name: impl Into<String>, spec: FieldSpec) -> Self {
        self.fields.insert(name.into(), spec);
        self
    }

    /// Checks the schema's own invariants.
    pub fn check(&self) -> Result<(), SchemaError> {
        for (name, spec) in &self.fields {
            if name.is_empty() {
                return Err(SchemaError::EmptyFieldName);
            }
            if let Some(default) = &spec.default {
                if !spec.ty.admits(default) {
                    return Err(SchemaError::DefaultTypeMismatch {
                        field: name.clone(),
                        expected: spec.ty,
                    });
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "issue", rename_all = "snake_case")]
pub enum IssueKind {
    MissingRequired,
    TypeMismatch { expected: FieldType, found: String },
    UnknownField,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FieldIssue {
    pub field: String,
    #[serde(flatten)]
    pub kind: IssueKind,
}

impl fmt::Display for FieldIssue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.kind {
            IssueKind::MissingRequired => write!(f, "{}: missing required field", self.field),
            IssueKind::TypeMismatch { expected, found } => {
                write!(f, "{}: expected {expected}, found {found}", self.field)
            }
            IssueKind::UnknownField => write!(f, "{}: unknown field", self.field),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub issues: Vec<FieldIssue>,
    /// The input with defaults filled in. Meaningful only when valid.
    pub normalized: Document,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.issues.is_empty()
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.issues.is_empty() {
            return f.write_str("valid");
        }
        for (i, issue) in self.issues.iter().enumerate() {
            if i > 0 {
                f.write_str("; ")?;
            }
            write!(f, "{issue}")?;
        }
        Ok(())
    }
}

/// Validates `config` against `schema`. Issues are reported in field-name order.
pub fn validate_config(schema: &ConfigSchema, config: &Document) -> ValidationReport {
    let mut issues = Vec::new();
    let mut normalized = config.clone();

    let mut names: Vec<&String> = schema.fields.keys().chain(config.keys()).collect();
    names.sort();
    names.dedup();

    for name in names {
        match (schema.fields.get(name), config.get(name)) {
            (Some(spec), Some(value)) => {
                if !spec.ty.admits(value) {
                    issues.push(FieldIssue {
                        field: name.clone(),
                        kind: IssueKind::TypeMismatch {
                            expected: spec.ty,
                            found: type_name(value).to_string(),
                        },
                    });
                }
            }
            (Some(spec), None) => match &spec.default {
                Some(default) => {
                    normalized.insert(name.clone(), default.clone());
                }
                None if spec.required => issues.push(FieldIssue {
                    field: name.clone(),
                    kind: IssueKind::MissingRequired,
                }),
                None => {}
            },
            (None, Some(_)) => issues.push(FieldIssue {
                field: name.clone(),
                kind: IssueKind::UnknownField,
            }),
            (None, None) => unreachable!("name comes from one of the maps"),
        }
    }

    ValidationReport { issues, normalized }
}

/// Validation for an entity's optional schema: an absent schema accepts any map.
pub fn validate_optional(schema: Option<&ConfigSchema>, config: &Document) -> ValidationReport {
    match schema {
        Some(schema) => validate_config(schema, config),
        None => ValidationReport {
            issues: Vec::new(),
            normalized: config.clone(),
        },
    }
}
