//! Seeded synthetic tables whose labels are shared by rows that agree on a
//! subset of fields, so that retrieving such rows is informative.
//!
//! Each field value gets a pseudo-random 16-bit weight. The latent label is
//! 1 when the weights of the rule fields, summed modulo 2^16, reach
//! `threshold · 2^16`. The wrap-around keeps every single rule field
//! uninformative on its own. The emitted label is the latent label flipped
//! with probability `noise`.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::retrieval::mix_seed;
use crate::tabular::{FieldSpec, Schema};

const MODULUS: u64 = 1 << 16;
const RULE_SALT: u64 = 0x5eed_0f_1abe1;

#[derive(Debug, Error, PartialEq)]
pub enum SynthError {
    #[error("invalid synthetic config: {0}")]
    Config(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub rows: usize,
    pub fields: usize,
    /// Distinct values per field.
    pub vocab: usize,
    /// Fields the latent label depends on.
    pub rule_fields: Vec<usize>,
    /// Fraction of the weight range mapped to label 0.
    pub threshold: f64,
    /// Label flip probability.
    pub noise: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            rows: 2000,
            fields: 6,
            vocab: 20,
            rule_fields: vec![0, 1],
            threshold: 0.5,
            noise: 0.05,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: String| Err(SynthError::Config(m));
        if self.fields == 0 || self.vocab == 0 || self.rows == 0 {
            return bad("rows, fields and vocab must be positive".into());
        }
        if self.rule_fields.is_empty() {
            return bad("at least one rule field is required".into());
        }
        if let Some(&f) = self.rule_fields.iter().find(|&&f| f >= self.fields) {
            return bad(format!("rule field {f} outside {} fields", self.fields));
        }
        if !(0.0..0.5).contains(&self.noise) {
            return bad(format!("noise {} outside [0, 0.5)", self.noise));
        }
        if !(0.0..=1.0).contains(&self.threshold) {
            return bad(format!("threshold {} outside [0, 1]", self.threshold));
        }
        Ok(())
    }

    /// Weight of value `v` in field `f`.
    pub fn value_weight(&self, f: usize, v: usize) -> u64 {
        mix_seed(self.seed ^ RULE_SALT, (f * self.vocab + v) as u64) % MODULUS
    }

    /// Noise-free label of a row of value indices.
    pub fn latent_label(&self, values: &[usize]) -> u8 {
        let sum: u64 = self
            .rule_fields
            .iter()
            .map(|&f| self.value_weight(f, values[f]))
            .sum();
        u8::from((sum % MODULUS) as f64 >= self.threshold * MODULUS as f64)
    }

    /// Schema for the generated CSV. The first field doubles as the item
    /// field for top-n evaluation.
    pub fn schema(&self) -> Schema {
        let mut schema = Schema::new(
            "timestamp",
            "label",
            (0..self.fields)
                .map(|f| FieldSpec::categorical(field_name(f)))
                .collect(),
        );
        schema.item_field = Some(field_name(0));
        schema
    }
}

fn field_name(f: usize) -> String {
    format!("f{f}")
}

/// A generated table: the value indices and emitted labels, plus the CSV.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthData {
    pub values: Vec<Vec<usize>>,
    pub latent: Vec<u8>,
    pub labels: Vec<u8>,
}

impl SynthData {
    pub fn to_csv(&self) -> String {
        let fields = self.values.first().map_or(0, Vec::len);
        let mut out = String::from("timestamp");
        for f in 0..fields {
            write!(out, ",{}", field_name(f)).unwrap();
        }
        out.push_str(",label\n");
        for (i, (vals, y)) in self.values.iter().zip(&self.labels).enumerate() {
            write!(out, "{i}").unwrap();
            for v in vals {
                write!(out, ",v{v}").unwrap();
            }
            writeln!(out, ",{y}").unwrap();
        }
        out
    }
}

pub fn generate(config: &SynthConfig) -> Result<SynthData, SynthError> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut data = SynthData {
        values: Vec::with_capacity(config.rows),
        latent: Vec::with_capacity(config.rows),
        labels: Vec::with_capacity(config.rows),
    };
    for _ in 0..config.rows {
        let values: Vec<usize> = (0..config.fields)
            .map(|_| rng.random_range(0..config.vocab))
            .collect();
        let latent = config.latent_label(&values);
        let flip = rng.random_bool(config.noise);
        data.labels.push(latent ^ u8::from(flip));
        data.latent.push(latent);
        data.values.push(values);
    }
    Ok(data)
}
