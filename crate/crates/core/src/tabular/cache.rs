//! Versioned binary cache of an encoded [`Dataset`], keyed by a content
//! hash of the source CSV bytes, the schema and the split fractions.

use std::path::Path;

use log::{debug, info};
use sha2::{Digest, Sha256};

use super::discretize::BinEdges;
use super::ingest::read_csv;
use super::schema::Schema;
use super::split::{PoolSplit, SplitFractions};
use super::vocab::{FieldEncoder, Vocabulary};
use super::{Dataset, Row, Table, TabularError};
use crate::codec::{DecodeError, Reader, Writer};

const MAGIC: &[u8; 8] = b"PETTABLE";
const VERSION: u32 = 1;

pub type ContentHash = [u8; 32];

pub fn content_hash(csv_bytes: &[u8], schema: &Schema, fractions: SplitFractions) -> ContentHash {
    let mut h = Sha256::new();
    h.update(b"pet-table\0");
    h.update((csv_bytes.len() as u64).to_le_bytes());
    h.update(csv_bytes);
    h.update(schema.to_toml().as_bytes());
    for f in [fractions.retrieval, fractions.train, fractions.test] {
        h.update(f.to_bits().to_le_bytes());
    }
    h.finalize().into()
}

pub fn encode_cache(dataset: &Dataset, hash: &ContentHash) -> Vec<u8> {
    let mut w = Writer::new(MAGIC, VERSION);
    w.bytes(hash);
    w.str(&dataset.table.schema.to_toml());
    let fr = dataset.fractions;
    for f in [fr.retrieval, fr.train, fr.test] {
        w.f64(f);
    }
    for enc in dataset.table.vocab.fields() {
        match enc {
            FieldEncoder::Categorical { values, .. } => {
                w.u8(0);
                w.usize(values.len());
                for v in values {
                    w.str(v);
                }
            }
            FieldEncoder::Continuous(edges) => {
                w.u8(1);
                w.usize(edges.num_bins());
                w.f64s(edges.edges());
            }
        }
    }
    w.usize(dataset.table.rows.len());
    for row in &dataset.table.rows {
        w.i64(row.timestamp);
        w.u8(row.label);
        for &c in &row.values {
            w.u32(c);
        }
    }
    for pool in [
        &dataset.split.retrieval,
        &dataset.split.train,
        &dataset.split.test,
    ] {
        w.usize(pool.len());
        for &id in pool {
            w.usize(id);
        }
    }
    w.finish()
}

/// Decodes and fully validates a cache file, returning its content hash and
/// dataset.
pub fn decode_cache(bytes: &[u8]) -> Result<(ContentHash, Dataset), TabularError> {
    let mut r = Reader::new(bytes, MAGIC, "PETTABLE", VERSION)?;
    let hash: ContentHash = r
        .bytes("hash")?
        .try_into()
        .map_err(|_| DecodeError::Invalid("content hash must be 32 bytes".into()))?;
    let schema = Schema::from_toml(r.str("schema")?)?;
    let fractions = SplitFractions::new(
        r.f64("fractions")?,
        r.f64("fractions")?,
        r.f64("fractions")?,
    );
    fractions.validate()?;

    let mut encoders = Vec::with_capacity(schema.num_fields());
    for spec in &schema.fields {
        let enc = match (r.u8("field tag")?, spec.kind) {
            (0, super::FieldKind::Categorical) => {
                let n = r.len("categorical values", 8)?;
                let values = (0..n)
                    .map(|_| r.str("categorical value").map(str::to_owned))
                    .collect::<Result<Vec<_>, _>>()?;
                if values.windows(2).any(|w| w[0] >= w[1]) {
                    return Err(DecodeError::Invalid(format!(
                        "vocabulary of {:?} is not sorted",
                        spec.name
                    ))
                    .into());
                }
                FieldEncoder::categorical(values)
            }
            (1, super::FieldKind::Continuous { bins }) => {
                let num_bins = r.usize("bin count")?;
                if num_bins != bins {
                    return Err(DecodeError::Invalid(format!(
                        "bin count mismatch for {:?}",
                        spec.name
                    ))
                    .into());
                }
                FieldEncoder::Continuous(BinEdges::from_parts(num_bins, r.f64s("bin edges")?)?)
            }
            (tag, _) => {
                return Err(
                    DecodeError::Invalid(format!("field tag {tag} does not match schema")).into(),
                )
            }
        };
        encoders.push(enc);
    }
    let vocab = Vocabulary::new(encoders);
    let sizes = vocab.sizes();

    let f = schema.num_fields();
    let n = r.len("rows", 9 + 4 * f)?;
    let mut rows = Vec::with_capacity(n);
    for row_id in 0..n {
        let timestamp = r.i64("timestamp")?;
        let label = r.u8("label")?;
        if label > 1 {
            return Err(DecodeError::Invalid(format!("row {row_id} has label {label}")).into());
        }
        let mut values = Vec::with_capacity(f);
        for &size in &sizes {
            let c = r.u32("code")?;
            if c as usize >= size {
                return Err(
                    DecodeError::Invalid(format!("row {row_id} code {c} out of range")).into(),
                );
            }
            values.push(c);
        }
        rows.push(Row {
            row_id,
            timestamp,
            values,
            label,
        });
    }

    let mut seen = vec![false; n];
    let mut pools: [Vec<usize>; 3] = Default::default();
    for pool in pools.iter_mut() {
        let len = r.len("pool", 8)?;
        for _ in 0..len {
            let id = r.usize("pool id")?;
            if id >= n || std::mem::replace(&mut seen[id], true) {
                return Err(
                    DecodeError::Invalid(format!("pool id {id} out of range or repeated")).into(),
                );
            }
            pool.push(id);
        }
    }
    if seen.iter().any(|s| !s) {
        return Err(DecodeError::Invalid("pools do not cover every row".into()).into());
    }
    r.finish()?;
    let [retrieval, train, test] = pools;
    Ok((
        hash,
        Dataset {
            table: Table {
                schema,
                vocab,
                rows,
            },
            split: PoolSplit {
                retrieval,
                train,
                test,
            },
            fractions,
        },
    ))
}

/// Loads the dataset from `cache_path` when its hash matches the current
/// CSV, schema and fractions; otherwise ingests the CSV and rewrites the
/// cache.
pub fn load_or_ingest(
    csv_path: &Path,
    schema: &Schema,
    fractions: SplitFractions,
    cache_path: &Path,
) -> Result<Dataset, TabularError> {
    let io_err = |p: &Path| {
        let p = p.display().to_string();
        move |e: std::io::Error| TabularError::Io {
            path: p.clone(),
            message: e.to_string(),
        }
    };
    let csv_bytes = std::fs::read(csv_path).map_err(io_err(csv_path))?;
    let hash = content_hash(&csv_bytes, schema, fractions);
    if let Ok(bytes) = std::fs::read(cache_path) {
        match decode_cache(&bytes) {
            Ok((cached, dataset)) if cached == hash => {
                info!("table cache hit: {}", cache_path.display());
                return Ok(dataset);
            }
            Ok(_) => info!("table cache stale, re-ingesting"),
            Err(e) => debug!("ignoring unreadable cache {}: {e}", cache_path.display()),
        }
    }
    let raw = read_csv(csv_bytes.as_slice(), schema)?;
    let dataset = Dataset::from_raw(&raw, fractions)?;
    std::fs::write(cache_path, encode_cache(&dataset, &hash)).map_err(io_err(cache_path))?;
    Ok(dataset)
}
