use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use super::TabularError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum FieldKind {
    Categorical,
    /// Discretized into `bins` equal-frequency bins.
    Continuous {
        bins: usize,
    },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FieldSpec {
    pub name: String,
    #[serde(flatten)]
    pub kind: FieldKind,
}

impl FieldSpec {
    pub fn categorical(name: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            kind: FieldKind::Categorical,
        }
    }

    pub fn continuous(name: impl Into<String>, bins: usize) -> Self {
        Self {
            name: name.into(),
            kind: FieldKind::Continuous { bins },
        }
    }
}

/// Column layout of a table: ordered feature fields plus the timestamp and
/// label columns.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Schema {
    pub timestamp_column: String,
    pub label_column: String,
    /// Field whose values are the ranked items in top-n evaluation.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub item_field: Option<String>,
    pub fields: Vec<FieldSpec>,
}

impl Schema {
    pub fn new(
        timestamp_column: impl Into<String>,
        label_column: impl Into<String>,
        fields: Vec<FieldSpec>,
    ) -> Self {
        Self {
            timestamp_column: timestamp_column.into(),
            label_column: label_column.into(),
            item_field: None,
            fields,
        }
    }

    /// Parses and validates a schema from its TOML form.
    pub fn from_toml(text: &str) -> Result<Self, TabularError> {
        let schema: Schema =
            toml::from_str(text).map_err(|e| TabularError::Config(e.to_string()))?;
        schema.validate()?;
        Ok(schema)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("schema serializes")
    }

    pub fn validate(&self) -> Result<(), TabularError> {
        if self.fields.is_empty() {
            return Err(TabularError::Config(
                "schema needs at least one feature field".into(),
            ));
        }
        let mut seen = HashSet::new();
        for f in &self.fields {
            if f.name == self.timestamp_column || f.name == self.label_column {
                return Err(TabularError::Config(format!(
                    "{:?} cannot be both a feature field and the timestamp/label column",
                    f.name
                )));
            }
            if !seen.insert(f.name.as_str()) {
                return Err(TabularError::Config(format!(
                    "duplicate field {:?}",
                    f.name
                )));
            }
            if let FieldKind::Continuous { bins } = f.kind {
                if bins == 0 {
                    return Err(TabularError::Config(format!(
                        "field {:?} needs bins >= 1",
                        f.name
                    )));
                }
            }
        }
        if self.timestamp_column == self.label_column {
            return Err(TabularError::Config(
                "timestamp and label columns must differ".into(),
            ));
        }
        if let Some(item) = &self.item_field {
            if !seen.contains(item.as_str()) {
                return Err(TabularError::Config(format!(
                    "item_field {item:?} is not a feature field"
                )));
            }
        }
        Ok(())
    }

    /// Number of feature fields, `F`.
    pub fn num_fields(&self) -> usize {
        self.fields.len()
    }

    pub fn field_index(&self, name: &str) -> Option<usize> {
        self.fields.iter().position(|f| f.name == name)
    }

    pub fn item_field_index(&self) -> Option<usize> {
        self.item_field.as_deref().and_then(|n| self.field_index(n))
    }
}
