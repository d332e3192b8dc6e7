//! A JSON Schema subset covering the keywords the checked-in output
//! schemas use: `type`, `properties`, `required`, `additionalProperties`,
//! `items`, `enum`, `const`, `anyOf`, `oneOf`, `allOf`, `minItems`,
//! `maxItems`, `minLength`, `maxLength`, `minimum`, `maximum`.
//!
//! Unsupported keywords are rejected when a schema is registered so a
//! schema never silently validates less than it claims.

use std::collections::BTreeMap;

use serde_json::Value;

const SUPPORTED: &[&str] = &[
    "$schema",
    "$id",
    "title",
    "description",
    "type",
    "properties",
    "required",
    "additionalProperties",
    "items",
    "enum",
    "const",
    "anyOf",
    "oneOf",
    "allOf",
    "minItems",
    "maxItems",
    "minLength",
    "maxLength",
    "minimum",
    "maximum",
];

const BUILTIN: &[(&str, &str)] = &[
    ("metadata", include_str!("../../data/schemas/metadata.json")),
    ("module_division", include_str!("../../data/schemas/module_division.json")),
    ("content_map", include_str!("../../data/schemas/content_map.json")),
    ("test_cases", include_str!("../../data/schemas/test_cases.json")),
    ("integration_tests", include_str!("../../data/schemas/integration_tests.json")),
];

#[derive(Debug, Clone, Default)]
pub struct SchemaRegistry {
    schemas: BTreeMap<String, Value>,
}

impl SchemaRegistry {
    pub fn builtin() -> SchemaRegistry {
        let mut reg = SchemaRegistry::default();
        for (id, src) in BUILTIN {
            let schema: Value = serde_json::from_str(src).expect("built-in schema is JSON");
            reg.register(id, schema).expect("built-in schema uses the supported subset");
        }
        reg
    }

    pub fn register(&mut self, id: &str, schema: Value) -> Result<(), String> {
        check_supported(&schema, "#")?;
        self.schemas.insert(id.to_string(), schema);
        Ok(())
    }

    pub fn get(&self, id: &str) -> Option<&Value> {
        self.schemas.get(id)
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.schemas.keys().map(String::as_str)
    }

    /// Validates `value` against schema `id`; the error names the first
    /// failing location.
    pub fn validate(&self, id: &str, value: &Value) -> Result<(), String> {
        let schema = self.get(id).ok_or_else(|| format!("unknown schema `{id}`"))?;
        validate(schema, value, "$")
    }
}

fn check_supported(schema: &Value, at: &str) -> Result<(), String> {
    let Value::Object(map) = schema else {
        return match schema {
            Value::Bool(_) => Ok(()),
            _ => Err(format!("{at}: schema must be an object or boolean")),
        };
    };
    for (key, sub) in map {
        if !SUPPORTED.contains(&key.as_str()) {
            return Err(format!("{at}: unsupported keyword `{key}`"));
        }
        match key.as_str() {
            "properties" => {
                for (name, s) in sub.as_object().ok_or(format!("{at}/properties must be an object"))? {
                    check_supported(s, &format!("{at}/properties/{name}"))?;
                }
            }
            "items" | "additionalProperties" => check_supported(sub, &format!("{at}/{key}"))?,
            "anyOf" | "oneOf" | "allOf" => {
                for (i, s) in sub.as_array().ok_or(format!("{at}/{key} must be an array"))?.iter().enumerate() {
                    check_supported(s, &format!("{at}/{key}/{i}"))?;
                }
            }
            _ => {}
        }
    }
    Ok(())
}

fn type_matches(name: &str, value: &Value) -> bool {
    match name {
        "null" => value.is_null(),
        "boolean" => value.is_boolean(),
        "object" => value.is_object(),
        "array" => value.is_array(),
        "string" => value.is_string(),
        "number" => value.is_number(),
        "integer" => match value {
            Value::Number(n) => n.is_i64() || n.is_u64() || n.as_f64().is_some_and(|f| f.fract() == 0.0),
            _ => false,
        },
        _ => false,
    }
}

fn numbers_equal(a: &Value, b: &Value) -> bool {
    match (a, b) {
        (Value::Number(x), Value::Number(y)) => x.as_f64() == y.as_f64(),
        (Value::Array(xs), Value::Array(ys)) => {
            xs.len() == ys.len() && xs.iter().zip(ys).all(|(x, y)| numbers_equal(x, y))
        }
        (Value::Object(xs), Value::Object(ys)) => {
            xs.len() == ys.len() && xs.iter().all(|(k, x)| ys.get(k).is_some_and(|y| numbers_equal(x, y)))
        }
        _ => a == b,
    }
}

pub fn validate(schema: &Value, value: &Value, at: &str) -> Result<(), String> {
    let map = match schema {
        Value::Bool(true) => return Ok(()),
        Value::Bool(false) => return Err(format!("{at}: no value is allowed here")),
        Value::Object(map) => map,
        _ => return Err(format!("{at}: invalid schema")),
    };

    if let Some(t) = map.get("type") {
        let ok = match t {
            Value::String(name) => type_matches(name, value),
            Value::Array(names) => names.iter().filter_map(Value::as_str).any(|n| type_matches(n, value)),
            _ => false,
        };
        if !ok {
            return Err(format!("{at}: expected type {t}, found {}", kind_of(value)));
        }
    }
    if let Some(c) = map.get("const") {
        if !numbers_equal(c, value) {
            return Err(format!("{at}: expected constant {c}"));
        }
    }
    if let Some(Value::Array(options)) = map.get("enum") {
        if !options.iter().any(|o| numbers_equal(o, value)) {
            return Err(format!("{at}: value is not one of {}", Value::Array(options.clone())));
        }
    }

    match value {
        Value::String(s) => {
            let len = s.chars().count() as u64;
            if let Some(min) = map.get("minLength").and_then(Value::as_u64) {
                if len < min {
                    return Err(format!("{at}: string shorter than {min}"));
                }
            }
            if let Some(max) = map.get("maxLength").and_then(Value::as_u64) {
                if len > max {
                    return Err(format!("{at}: string longer than {max}"));
                }
            }
        }
        Value::Number(n) => {
            let x = n.as_f64().unwrap_or(f64::NAN);
            if let Some(min) = map.get("minimum").and_then(Value::as_f64) {
                if x < min {
                    return Err(format!("{at}: {x} is below the minimum {min}"));
                }
            }
            if let Some(max) = map.get("maximum").and_then(Value::as_f64) {
                if x > max {
                    return Err(format!("{at}: {x} is above the maximum {max}"));
                }
            }
        }
        Value::Array(items) => {
            if let Some(min) = map.get("minItems").and_then(Value::as_u64) {
                if (items.len() as u64) < min {
                    return Err(format!("{at}: fewer than {min} items"));
                }
            }
            if let Some(max) = map.get("maxItems").and_then(Value::as_u64) {
                if (items.len() as u64) > max {
                    return Err(format!("{at}: more than {max} items"));
                }
            }
            if let Some(item_schema) = map.get("items") {
                for (i, item) in items.iter().enumerate() {
                    validate(item_schema, item, &format!("{at}[{i}]"))?;
                }
            }
        }
        Value::Object(fields) => {
            if let Some(Value::Array(required)) = map.get("required") {
                for name in required.iter().filter_map(Value::as_str) {
                    if !fields.contains_key(name) {
                        return Err(format!("{at}: missing required field `{name}`"));
                    }
                }
            }
            let props = map.get("properties").and_then(Value::as_object);
            for (name, field) in fields {
                match props.and_then(|p| p.get(name)) {
                    Some(s) => validate(s, field, &format!("{at}.{name}"))?,
                    None => {
                        if let Some(extra) = map.get("additionalProperties") {
                            validate(extra, field, &format!("{at}.{name}"))
                                .map_err(|e| format!("{e} (unexpected field `{name}`)"))?;
                        }
                    }
                }
            }
        }
        _ => {}
    }

    if let Some(Value::Array(all)) = map.get("allOf") {
        for s in all {
            validate(s, value, at)?;
        }
    }
    if let Some(Value::Array(any)) = map.get("anyOf") {
        if !any.iter().any(|s| validate(s, value, at).is_ok()) {
            return Err(format!("{at}: value matches none of the allowed shapes"));
        }
    }
    if let Some(Value::Array(one)) = map.get("oneOf") {
        let n = one.iter().filter(|s| validate(s, value, at).is_ok()).count();
        if n != 1 {
            return Err(format!("{at}: value matches {n} of the oneOf shapes, expected exactly 1"));
        }
    }
    Ok(())
}

fn kind_of(v: &Value) -> &'static str {
    match v {
        Value::Null => "null",
        Value::Bool(_) => "boolean",
        Value::Number(_) => "number",
        Value::String(_) => "string",
        Value::Array(_) => "array",
        Value::Object(_) => "object",
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn builtin_schemas_register() {
        let reg = SchemaRegistry::builtin();
        assert_eq!(reg.ids().count(), BUILTIN.len());
    }

    #[test]
    fn unsupported_keywords_are_refused() {
        let mut reg = SchemaRegistry::default();
        assert!(reg.register("x", json!({"pattern": "^a"})).is_err());
        assert!(reg.register("x", json!({"properties": {"a": {"$ref": "#"}}})).is_err());
    }

    #[test]
    fn integer_accepts_integral_floats() {
        assert!(validate(&json!({"type": "integer"}), &json!(3.0), "$").is_ok());
        assert!(validate(&json!({"type": "integer"}), &json!(3.5), "$").is_err());
    }
}
