//! Document values shared by configurations, message payloads and stored state.
//!
//! A document is a map with string keys. Keys are kept sorted, so the JSON
//! encoding produced by [`to_canonical_json`] is canonical and two documents
//! are equal exactly when their canonical encodings are byte-identical.

pub use serde_json::Value;

/// A string-keyed map of values: configurations, payloads and KV values.
pub type Document = serde_json::Map<String, Value>;

/// Canonical JSON encoding (sorted keys, no insignificant whitespace).
pub fn to_canonical_json(doc: &Document) -> String {
    // serde_json's default map is ordered, so plain serialization is canonical.
    serde_json::to_string(doc).expect("document serialization cannot fail")
}

/// Builds a [`Document`] from a `serde_json::json!` object literal.
///
/// Panics if the value is not an object; intended for tests and fixtures.
pub fn doc(value: Value) -> Document {
    match value {
        Value::Object(map) => map,
        other => panic!("expected a JSON object, got {other}"),
    }
}

/// Short human-readable name of a value's type, used in diagnostics.
pub fn type_name(value: &Value) -> &'static str {
    match value {
        Value::Null => "null",
        Value::Bool(_) => "bool",
        Value::Number(n) if n.is_f64() => "float",
        Value::Number(_) => "int",
        Value::String(_) => "string",
        Value::Array(_) => "list",
        Value::Object(_) => "map",
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn canonical_form_sorts_keys() {
        let a = doc(json!({"b": 1, "a": {"z": 1, "y": [1, 2]}}));
        assert_eq!(to_canonical_json(&a), r#"{"a":{"y":[1,2],"z":1},"b":1}"#);
    }

    #[test]
    fn type_names() {
        assert_eq!(type_name(&json!(1)), "int");
        assert_eq!(type_name(&json!(1.5)), "float");
        assert_eq!(type_name(&json!("x")), "string");
        assert_eq!(type_name(&json!(null)), "null");
    }
}
