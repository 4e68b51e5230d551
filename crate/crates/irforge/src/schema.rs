//! Minimal JSON-schema validation for the specialization-point schema.
//!
//! The bundled schema (see `assets/specialization_points.schema.json`) uses a
//! small draft-07 subset: `type`, `properties`, `required`, `enum`, `items`,
//! and `additionalProperties` (both the `false` form and the map-value
//! schema form). This validator implements exactly that subset with draft-07
//! semantics; unknown keywords are ignored, and objects without an
//! `additionalProperties` keyword accept extra members. Violations are
//! collected exhaustively rather than stopping at the first failure.

use serde_json::Value;
use std::fmt;

/// One schema violation, addressed by JSON pointer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SchemaViolation {
    pub path: String,
    pub reason: String,
}

impl fmt::Display for SchemaViolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let path = if self.path.is_empty() { "/" } else { &self.path };
        write!(f, "{}: {}", path, self.reason)
    }
}

fn json_type_name(v: &Value) -> &'static str {
    match v {
        Value::Null => "null",
        Value::Bool(_) => "boolean",
        Value::Number(n) => {
            if n.is_i64() || n.is_u64() {
                "integer"
            } else {
                "number"
            }
        }
        Value::String(_) => "string",
        Value::Array(_) => "array",
        Value::Object(_) => "object",
    }
}

fn type_matches(instance: &Value, ty: &str) -> bool {
    match ty {
        "number" => instance.is_number(),
        "integer" => instance.is_i64() || instance.is_u64(),
        other => json_type_name(instance) == other,
    }
}

fn escape_pointer(segment: &str) -> String {
    segment.replace('~', "~0").replace('/', "~1")
}

/// Validate `instance` against `schema`, returning every violation found.
pub fn validate(schema: &Value, instance: &Value) -> Vec<SchemaViolation> {
    let mut violations = Vec::new();
    descend(schema, instance, "", &mut violations);
    violations
}

/// Convenience predicate over [`validate`].
pub fn is_valid(schema: &Value, instance: &Value) -> bool {
    validate(schema, instance).is_empty()
}

fn descend(schema: &Value, instance: &Value, path: &str, out: &mut Vec<SchemaViolation>) {
    let obj = match schema {
        Value::Bool(true) => return,
        Value::Bool(false) => {
            out.push(SchemaViolation {
                path: path.to_string(),
                reason: "schema forbids any value here".to_string(),
            });
            return;
        }
        Value::Object(o) => o,
        _ => return,
    };

    if let Some(ty) = obj.get("type") {
        let ok = match ty {
            Value::String(s) => type_matches(instance, s),
            Value::Array(options) => options
                .iter()
                .filter_map(Value::as_str)
                .any(|s| type_matches(instance, s)),
            _ => true,
        };
        if !ok {
            out.push(SchemaViolation {
                path: path.to_string(),
                reason: format!(
                    "expected type {}, found {}",
                    serde_json::to_string(ty).unwrap_or_default(),
                    json_type_name(instance)
                ),
            });
            // A type mismatch makes the structural keywords below
            // meaningless for this node.
            return;
        }
    }

    if let Some(allowed) = obj.get("enum").and_then(Value::as_array) {
        if !allowed.iter().any(|v| v == instance) {
            out.push(SchemaViolation {
                path: path.to_string(),
                reason: format!(
                    "value not in enum {}",
                    serde_json::to_string(allowed).unwrap_or_default()
                ),
            });
        }
    }

    match instance {
        Value::Object(members) => {
            let properties = obj.get("properties").and_then(Value::as_object);
            if let Some(required) = obj.get("required").and_then(Value::as_array) {
                for key in required.iter().filter_map(Value::as_str) {
                    if !members.contains_key(key) {
                        out.push(SchemaViolation {
                            path: format!("{path}/{}", escape_pointer(key)),
                            reason: "required key absent".to_string(),
                        });
                    }
                }
            }
            for (key, value) in members {
                let child_path = format!("{path}/{}", escape_pointer(key));
                if let Some(prop_schema) = properties.and_then(|p| p.get(key)) {
                    descend(prop_schema, value, &child_path, out);
                } else {
                    match obj.get("additionalProperties") {
                        Some(Value::Bool(false)) => out.push(SchemaViolation {
                            path: child_path,
                            reason: "additional property not allowed".to_string(),
                        }),
                        Some(Value::Bool(true)) | None => {}
                        Some(extra_schema) => descend(extra_schema, value, &child_path, out),
                    }
                }
            }
        }
        Value::Array(items) => {
            if let Some(item_schema) = obj.get("items") {
                for (i, item) in items.iter().enumerate() {
                    descend(item_schema, item, &format!("{path}/{i}"), out);
                }
            }
        }
        _ => {}
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn appendix_schema() -> Value {
        serde_json::from_str(include_str!("../assets/specialization_points.schema.json"))
            .expect("bundled schema parses")
    }

    #[test]
    fn top_level_additional_property_rejected() {
        let schema = json!({
            "type": "object",
            "properties": {"a": {"type": "string"}},
            "additionalProperties": false
        });
        let violations = validate(&schema, &json!({"a": "x", "b": 1}));
        assert_eq!(violations.len(), 1);
        assert_eq!(violations[0].path, "/b");
    }

    #[test]
    fn nested_objects_accept_extras_by_default() {
        // Draft-07: no additionalProperties keyword means extras are fine.
        let schema = json!({
            "type": "object",
            "properties": {
                "inner": {"type": "object", "properties": {"x": {"type": "boolean"}}}
            }
        });
        assert!(is_valid(&schema, &json!({"inner": {"x": true, "y": "extra"}})));
    }

    #[test]
    fn union_types_accept_null() {
        let schema = json!({"type": ["string", "null"]});
        assert!(is_valid(&schema, &json!(null)));
        assert!(is_valid(&schema, &json!("s")));
        assert!(!is_valid(&schema, &json!(3)));
    }

    #[test]
    fn required_key_without_declared_property_still_required() {
        // The FFT_libraries entries require a "condition" member that has no
        // property declaration; any value type satisfies it, absence fails.
        let schema = appendix_schema();
        let entry = |with_condition: bool| {
            let mut e = json!({
                "used_as_default": false,
                "build_flag": "-DGMX_FFT_LIBRARY=fftw3"
            });
            if with_condition {
                e["condition"] = json!(null);
            }
            json!({
                "gpu_build": {"value": false, "build_flag": null},
                "gpu_backends": {},
                "parallel_programming_libraries": {},
                "linear_algebra_libraries": {},
                "FFT_libraries": {"fftw3": e},
                "other_external_libraries": {},
                "compiler_flags": [],
                "optimization_build_flags": [],
                "compilers": {},
                "architectures": [],
                "simd_vectorization": {},
                "build_system": {"type": "cmake", "minimum_version": "3.18"},
                "internal_build": {"library_name": "", "build_flag": null}
            })
        };
        assert!(is_valid(&schema, &entry(true)));
        let violations = validate(&schema, &entry(false));
        assert_eq!(violations.len(), 1);
        assert_eq!(violations[0].path, "/FFT_libraries/fftw3/condition");
    }

    #[test]
    fn empty_document_reports_every_required_key() {
        let schema = appendix_schema();
        let violations = validate(&schema, &json!({}));
        assert_eq!(violations.len(), 13);
        assert!(violations.iter().all(|v| v.reason == "required key absent"));
    }

    #[test]
    fn enum_violation_reported() {
        let schema = appendix_schema();
        let mut doc = json!({
            "gpu_build": {"value": false, "build_flag": null},
            "gpu_backends": {},
            "parallel_programming_libraries": {},
            "linear_algebra_libraries": {},
            "FFT_libraries": {},
            "other_external_libraries": {},
            "compiler_flags": [],
            "optimization_build_flags": [],
            "compilers": {},
            "architectures": [],
            "simd_vectorization": {},
            "build_system": {"type": "bazel", "minimum_version": "1"},
            "internal_build": {"library_name": "", "build_flag": null}
        });
        let violations = validate(&schema, &doc);
        assert_eq!(violations.len(), 1);
        assert_eq!(violations[0].path, "/build_system/type");
        doc["build_system"]["type"] = json!("cmake");
        assert!(is_valid(&schema, &doc));
    }

    #[test]
    fn pointer_segments_escaped() {
        let schema = json!({"type": "object", "additionalProperties": false});
        let violations = validate(&schema, &json!({"a/b": 1}));
        assert_eq!(violations[0].path, "/a~1b");
    }
}
