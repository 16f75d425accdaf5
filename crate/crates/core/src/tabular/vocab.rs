use std::collections::{BTreeSet, HashMap};

use super::discretize::BinEdges;
use super::schema::{FieldKind, Schema};
use super::TabularError;

/// Code reserved in every field for values not seen while building the
/// vocabulary.
pub const OOV: u32 = 0;

/// Per-field encoder from raw strings to dense codes.
#[derive(Clone, Debug, PartialEq)]
pub enum FieldEncoder {
    /// Seen values get codes `1..=values.len()` in sorted order.
    Categorical {
        values: Vec<String>,
        codes: HashMap<String, u32>,
    },
    /// Parsed values are binned and bin `b` gets code `b + 1`.
    Continuous(BinEdges),
}

impl FieldEncoder {
    pub fn categorical(values: Vec<String>) -> Self {
        let codes = values
            .iter()
            .enumerate()
            .map(|(i, v)| (v.clone(), i as u32 + 1))
            .collect();
        FieldEncoder::Categorical { values, codes }
    }

    /// Number of codes including the OOV code.
    pub fn size(&self) -> usize {
        match self {
            FieldEncoder::Categorical { values, .. } => values.len() + 1,
            FieldEncoder::Continuous(edges) => edges.num_bins() + 1,
        }
    }

    pub fn encode(&self, raw: &str) -> u32 {
        match self {
            FieldEncoder::Categorical { codes, .. } => codes.get(raw).copied().unwrap_or(OOV),
            FieldEncoder::Continuous(edges) => match raw.trim().parse::<f64>() {
                Ok(v) if !v.is_nan() => edges.bin(v) + 1,
                _ => OOV,
            },
        }
    }

    /// Inverse of [`FieldEncoder::encode`] on codes ≥ 1. Continuous fields
    /// decode to a `bin<k>` label.
    pub fn decode(&self, code: u32) -> Option<String> {
        if code == OOV || code as usize >= self.size() {
            return None;
        }
        match self {
            FieldEncoder::Categorical { values, .. } => Some(values[code as usize - 1].clone()),
            FieldEncoder::Continuous(_) => Some(format!("bin{}", code - 1)),
        }
    }
}

/// Per-field vocabularies, one [`FieldEncoder`] per schema field.
#[derive(Clone, Debug, PartialEq)]
pub struct Vocabulary {
    fields: Vec<FieldEncoder>,
}

impl Vocabulary {
    pub fn new(fields: Vec<FieldEncoder>) -> Self {
        Self { fields }
    }

    /// Builds encoders from the raw values of the given rows. Callers pass
    /// only retrieval and train rows so test values stay unseen.
    pub fn build<'a, I>(schema: &Schema, rows: I) -> Result<Self, TabularError>
    where
        I: IntoIterator<Item = &'a [String]> + Clone,
    {
        let mut fields = Vec::with_capacity(schema.num_fields());
        for (f, spec) in schema.fields.iter().enumerate() {
            let enc = match spec.kind {
                FieldKind::Categorical => {
                    let distinct: BTreeSet<&str> =
                        rows.clone().into_iter().map(|r| r[f].as_str()).collect();
                    FieldEncoder::categorical(distinct.into_iter().map(str::to_owned).collect())
                }
                FieldKind::Continuous { bins } => {
                    let values: Vec<f64> = rows
                        .clone()
                        .into_iter()
                        .filter_map(|r| r[f].trim().parse::<f64>().ok())
                        .filter(|v| !v.is_nan())
                        .collect();
                    if values.is_empty() {
                        return Err(TabularError::Config(format!(
                            "continuous field {:?} has no numeric values to bin",
                            spec.name
                        )));
                    }
                    FieldEncoder::Continuous(BinEdges::fit(&values, bins)?)
                }
            };
            fields.push(enc);
        }
        Ok(Self { fields })
    }

    pub fn num_fields(&self) -> usize {
        self.fields.len()
    }

    pub fn field(&self, f: usize) -> &FieldEncoder {
        &self.fields[f]
    }

    pub fn fields(&self) -> &[FieldEncoder] {
        &self.fields
    }

    /// Code count of field `f`, including OOV.
    pub fn size(&self, f: usize) -> usize {
        self.fields[f].size()
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.fields.iter().map(FieldEncoder::size).collect()
    }

    pub fn encode_row<S: AsRef<str>>(&self, raw: &[S]) -> Result<Vec<u32>, TabularError> {
        if raw.len() != self.fields.len() {
            return Err(TabularError::Arity {
                expected: self.fields.len(),
                found: raw.len(),
            });
        }
        Ok(self
            .fields
            .iter()
            .zip(raw)
            .map(|(e, v)| e.encode(v.as_ref()))
            .collect())
    }

    pub fn decode_row(&self, codes: &[u32]) -> Vec<Option<String>> {
        self.fields
            .iter()
            .zip(codes)
            .map(|(e, &c)| e.decode(c))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tabular::schema::FieldSpec;

    fn strings(v: &[&str]) -> Vec<String> {
        v.iter().map(|s| s.to_string()).collect()
    }

    fn vocab() -> Vocabulary {
        let schema = Schema::new(
            "t",
            "y",
            vec![FieldSpec::categorical("a"), FieldSpec::continuous("b", 2)],
        );
        let rows = [
            strings(&["x", "1"]),
            strings(&["z", "2"]),
            strings(&["x", "3"]),
            strings(&["y", "4"]),
        ];
        Vocabulary::build(&schema, rows.iter().map(Vec::as_slice)).unwrap()
    }

    #[test]
    fn encodes_seen_and_unseen_values() {
        let v = vocab();
        assert_eq!(v.sizes(), vec![4, 3]);
        assert_eq!(v.encode_row(&["x", "1"]).unwrap(), vec![1, 1]);
        assert_eq!(v.encode_row(&["z", "4"]).unwrap(), vec![3, 2]);
        assert_eq!(v.encode_row(&["never", "2"]).unwrap(), vec![OOV, 1]);
        assert_eq!(v.encode_row(&["y", "not a number"]).unwrap(), vec![2, OOV]);
        // outside the fitted range still lands in an edge bin
        assert_eq!(v.encode_row(&["y", "1000"]).unwrap(), vec![2, 2]);
    }

    #[test]
    fn wrong_arity_is_an_error() {
        assert!(matches!(
            vocab().encode_row(&["x"]),
            Err(TabularError::Arity {
                expected: 2,
                found: 1
            })
        ));
    }

    #[test]
    fn decode_inverts_encode_on_seen_values() {
        let v = vocab();
        for raw in ["x", "y", "z"] {
            let code = v.field(0).encode(raw);
            assert_ne!(code, OOV);
            assert_eq!(v.field(0).decode(code).as_deref(), Some(raw));
        }
        assert_eq!(v.field(0).decode(OOV), None);
        assert_eq!(v.field(0).decode(99), None);
    }
}
