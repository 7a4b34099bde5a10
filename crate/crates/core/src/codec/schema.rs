//! Tool schemas in the `{"name", "description", "arguments"}` shape and
//! argument validation against them.

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::{CodecError, ToolCall};

/// JSON type tags understood by the validator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum JsonType {
    String,
    Integer,
    Number,
    Boolean,
    Array,
    Object,
}

impl JsonType {
    fn accepts(self, value: &Value) -> bool {
        match self {
            JsonType::String => value.is_string(),
            JsonType::Integer => value.is_i64() || value.is_u64(),
            JsonType::Number => value.is_number(),
            JsonType::Boolean => value.is_boolean(),
            JsonType::Array => value.is_array(),
            JsonType::Object => value.is_object(),
        }
    }
}

/// A single type tag or a union such as `["string", "array"]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum TypeSpec {
    One(JsonType),
    Union(Vec<JsonType>),
}

impl TypeSpec {
    pub fn accepts(&self, value: &Value) -> bool {
        match self {
            TypeSpec::One(t) => t.accepts(value),
            TypeSpec::Union(ts) => ts.iter().any(|t| t.accepts(value)),
        }
    }

    fn allows(&self, ty: JsonType) -> bool {
        match self {
            TypeSpec::One(t) => *t == ty,
            TypeSpec::Union(ts) => ts.contains(&ty),
        }
    }
}

/// One node of a parameter-schema tree.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamSchema {
    #[serde(rename = "type")]
    pub ty: TypeSpec,
    #[serde(rename = "enum", default, skip_serializing_if = "Option::is_none")]
    pub enum_values: Option<Vec<Value>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub items: Option<Box<ParamSchema>>,
    #[serde(rename = "minItems", default, skip_serializing_if = "Option::is_none")]
    pub min_items: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub properties: Option<IndexMap<String, ParamSchema>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub required: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub description: Option<String>,
}

impl ParamSchema {
    pub fn of(ty: JsonType) -> Self {
        Self {
            ty: TypeSpec::One(ty),
            enum_values: None,
            items: None,
            min_items: None,
            properties: None,
            required: None,
            description: None,
        }
    }

    fn check_well_formed(&self, path: &str) -> Result<(), CodecError> {
        if let Some(values) = &self.enum_values {
            if values.is_empty() {
                return Err(CodecError::InvalidSchema(format!("{path}: empty enum")));
            }
        }
        if let Some(required) = &self.required {
            let props = self.properties.as_ref();
            for name in required {
                if !props.is_some_and(|p| p.contains_key(name)) {
                    return Err(CodecError::InvalidSchema(format!(
                        "{path}: required property `{name}` is not declared"
                    )));
                }
            }
        }
        if let Some(props) = &self.properties {
            for (name, child) in props {
                child.check_well_formed(&join(path, name))?;
            }
        }
        if let Some(items) = &self.items {
            items.check_well_formed(&format!("{path}[]"))?;
        }
        Ok(())
    }

    fn validate(&self, path: &str, value: &Value) -> Result<(), CodecError> {
        if !self.ty.accepts(value) {
            return Err(CodecError::TypeMismatch(path.to_string()));
        }
        if let Some(allowed) = &self.enum_values {
            if !allowed.contains(value) {
                return Err(CodecError::EnumViolation(path.to_string(), value.to_string()));
            }
        }
        match value {
            Value::Array(elems) => {
                if let Some(min) = self.min_items {
                    if elems.len() < min {
                        return Err(CodecError::TooFewItems(path.to_string()));
                    }
                }
                if let Some(items) = &self.items {
                    for (i, elem) in elems.iter().enumerate() {
                        items.validate(&format!("{path}[{i}]"), elem)?;
                    }
                }
            }
            Value::Object(map) if self.ty.allows(JsonType::Object) => {
                validate_object(self, path, map)?;
            }
            _ => {}
        }
        Ok(())
    }
}

fn join(path: &str, name: &str) -> String {
    if path.is_empty() {
        name.to_string()
    } else {
        format!("{path}.{name}")
    }
}

fn validate_object(
    schema: &ParamSchema,
    path: &str,
    map: &serde_json::Map<String, Value>,
) -> Result<(), CodecError> {
    for name in schema.required.iter().flatten() {
        if !map.contains_key(name) {
            return Err(CodecError::MissingRequired(join(path, name)));
        }
    }
    // Objects without declared properties accept anything.
    let Some(props) = &schema.properties else {
        return Ok(());
    };
    for (name, value) in map {
        match props.get(name) {
            Some(child) => child.validate(&join(path, name), value)?,
            None => return Err(CodecError::UnknownProperty(join(path, name))),
        }
    }
    Ok(())
}

/// Declared callable interface of a tool.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToolSchema {
    pub name: String,
    pub description: String,
    /// Root parameter schema; always an object.
    pub arguments: ParamSchema,
}

impl ToolSchema {
    /// Builds a schema and checks its invariants.
    pub fn new(
        name: impl Into<String>,
        description: impl Into<String>,
        arguments: ParamSchema,
    ) -> Result<Self, CodecError> {
        let schema = Self {
            name: name.into(),
            description: description.into(),
            arguments,
        };
        schema.check()?;
        Ok(schema)
    }

    pub fn check(&self) -> Result<(), CodecError> {
        if self.name.is_empty() {
            return Err(CodecError::InvalidSchema("empty tool name".into()));
        }
        if self.arguments.ty != TypeSpec::One(JsonType::Object) {
            return Err(CodecError::InvalidSchema(format!(
                "{}: arguments root must be an object",
                self.name
            )));
        }
        self.arguments.check_well_formed("")
    }

    pub fn required(&self) -> &[String] {
        self.arguments.required.as_deref().unwrap_or_default()
    }

    pub fn property_names(&self) -> impl Iterator<Item = &str> {
        self.arguments
            .properties
            .iter()
            .flat_map(|p| p.keys().map(String::as_str))
    }

    /// Compact JSON definition as it appears in the tool block of a prompt.
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("schema serializes")
    }

    /// Parses a JSON array of schemas, checking each one.
    pub fn load_all(json: &str) -> Result<Vec<ToolSchema>, CodecError> {
        let schemas: Vec<ToolSchema> =
            serde_json::from_str(json).map_err(|e| CodecError::InvalidSchema(e.to_string()))?;
        for s in &schemas {
            s.check()?;
        }
        Ok(schemas)
    }
}

/// Checks a call against its schema.
///
/// Every required property must be present, every supplied property must be
/// declared and match its type tag, and enum-constrained values must be one
/// of the allowed values. Nested objects are validated recursively and
/// errors carry a dotted path (`execution_summary.tools_used`).
pub fn validate_call(call: &ToolCall, schema: &ToolSchema) -> Result<(), CodecError> {
    if call.name != schema.name {
        return Err(CodecError::SchemaMismatch {
            call: call.name.clone(),
            schema: schema.name.clone(),
        });
    }
    let Value::Object(map) = &call.arguments else {
        return Err(CodecError::TypeMismatch("arguments".into()));
    };
    validate_object(&schema.arguments, "", map)
}
