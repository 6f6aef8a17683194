//! Ordered string-record context passed along the pipeline.
//!
//! A [`Context`] is a flat record of named text fields. Components never edit
//! fields in place: each one contributes a delta that is merged on top of the
//! running context ([`merge_outputs`]), and each one sees only the fields it
//! declared ([`project_inputs`]). Untouched fields therefore survive the whole
//! run byte-for-byte.

use std::fmt;

use serde::de::{MapAccess, Visitor};
use serde::ser::SerializeMap;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::graph::ComponentSpec;

/// Error raised when a projection cannot be satisfied.
#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ContextError {
    /// A component declared an input field the running context does not hold.
    #[error("component `{component}` requires field `{field}` which is absent from the context")]
    MissingField { component: String, field: String },
}

/// Flat record of named text fields with stable iteration order.
///
/// Iteration order equals first-insertion order; overwriting a field keeps
/// its original position. Serialized as a JSON object whose key order is the
/// iteration order, and deserialized preserving document order.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Context {
    entries: Vec<(String, String)>,
}

impl Context {
    /// Empty context.
    pub fn new() -> Self {
        Self::default()
    }

    /// Builds a context from `(field, value)` pairs, later duplicates
    /// overwriting earlier ones in place.
    pub fn from_pairs<I, K, V>(pairs: I) -> Self
    where
        I: IntoIterator<Item = (K, V)>,
        K: Into<String>,
        V: Into<String>,
    {
        let mut ctx = Self::new();
        for (k, v) in pairs {
            ctx.set(k.into(), v.into());
        }
        ctx
    }

    /// Value of `field`, if present.
    pub fn get(&self, field: &str) -> Option<&str> {
        self.entries
            .iter()
            .find(|(k, _)| k == field)
            .map(|(_, v)| v.as_str())
    }

    /// Inserts or overwrites `field`. Overwrites keep the field's original
    /// position in iteration order.
    pub fn set(&mut self, field: impl Into<String>, value: impl Into<String>) {
        let field = field.into();
        let value = value.into();
        match self.entries.iter_mut().find(|(k, _)| *k == field) {
            Some(slot) => slot.1 = value,
            None => self.entries.push((field, value)),
        }
    }

    /// Whether `field` is present.
    pub fn contains(&self, field: &str) -> bool {
        self.get(field).is_some()
    }

    /// Number of fields.
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    /// Whether the context holds no fields.
    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// `(field, value)` pairs in iteration order.
    pub fn iter(&self) -> impl Iterator<Item = (&str, &str)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v.as_str()))
    }

    /// Field names in iteration order.
    pub fn fields(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(k, _)| k.as_str())
    }
}

impl Serialize for Context {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        let mut map = serializer.serialize_map(Some(self.entries.len()))?;
        for (k, v) in &self.entries {
            map.serialize_entry(k, v)?;
        }
        map.end()
    }
}

impl<'de> Deserialize<'de> for Context {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        struct ContextVisitor;

        impl<'de> Visitor<'de> for ContextVisitor {
            type Value = Context;

            fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
                f.write_str("a map of field names to string values")
            }

            fn visit_map<A: MapAccess<'de>>(self, mut access: A) -> Result<Context, A::Error> {
                let mut ctx = Context::new();
                while let Some((k, v)) = access.next_entry::<String, String>()? {
                    ctx.set(k, v);
                }
                Ok(ctx)
            }
        }

        deserializer.deserialize_map(ContextVisitor)
    }
}

/// Restricts `context` to exactly the input fields a component declared, in
/// declaration order. Fails if any declared field is absent; extra fields are
/// dropped silently.
pub fn project_inputs(context: &Context, component: &ComponentSpec) -> Result<Context, ContextError> {
    let mut slice = Context::new();
    for field in &component.input_fields {
        match context.get(field) {
            Some(value) => slice.set(field.clone(), value.to_owned()),
            None => {
                return Err(ContextError::MissingField {
                    component: component.id.clone(),
                    field: field.clone(),
                })
            }
        }
    }
    Ok(slice)
}

/// Merges a component's output delta on top of the running context and returns
/// the result. The delta wins on field collisions; all other fields pass
/// through byte-for-byte. Neither argument is modified.
pub fn merge_outputs(context: &Context, delta: &Context) -> Context {
    let mut merged = context.clone();
    for (k, v) in delta.iter() {
        merged.set(k, v);
    }
    merged
}
