use std::io::Read;
use std::path::Path;

use super::schema::Schema;
use super::split::{temporal_split, SplitFractions};
use super::vocab::Vocabulary;
use super::{Dataset, Row, Table, TabularError};

/// A parsed but not yet encoded data line.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RawRow {
    pub row_id: usize,
    pub timestamp: i64,
    /// Feature values in schema field order.
    pub values: Vec<String>,
    pub label: u8,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RawTable {
    pub schema: Schema,
    pub rows: Vec<RawRow>,
}

/// Parses CSV text with a header line. Columns not named by the schema are
/// ignored; `row_id` is the zero-based data-line index.
pub fn read_csv<R: Read>(reader: R, schema: &Schema) -> Result<RawTable, TabularError> {
    schema.validate()?;
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_reader(reader);
    let header = rdr
        .headers()
        .map_err(|e| TabularError::Csv(e.to_string()))?
        .clone();
    if header.is_empty() || (header.len() == 1 && header[0].is_empty()) {
        return Err(TabularError::Empty);
    }
    let column = |name: &str| -> Result<usize, TabularError> {
        header
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| TabularError::MissingColumn(name.to_string()))
    };
    let ts_col = column(&schema.timestamp_column)?;
    let label_col = column(&schema.label_column)?;
    let field_cols = schema
        .fields
        .iter()
        .map(|f| column(&f.name))
        .collect::<Result<Vec<_>, _>>()?;

    let mut rows = Vec::new();
    for record in rdr.records() {
        let record = record.map_err(|e| TabularError::Csv(e.to_string()))?;
        let line = record
            .position()
            .map_or(rows.len() + 2, |p| p.line() as usize);
        let ts_raw = record[ts_col].trim();
        let timestamp = ts_raw.parse::<i64>().map_err(|_| TabularError::Row {
            line,
            message: format!("unparseable timestamp {ts_raw:?}"),
        })?;
        let label = match record[label_col].trim() {
            "0" => 0,
            "1" => 1,
            other => {
                return Err(TabularError::Row {
                    line,
                    message: format!("label must be 0 or 1, found {other:?}"),
                })
            }
        };
        let values = field_cols.iter().map(|&c| record[c].to_string()).collect();
        rows.push(RawRow {
            row_id: rows.len(),
            timestamp,
            values,
            label,
        });
    }
    if rows.is_empty() {
        return Err(TabularError::Empty);
    }
    Ok(RawTable {
        schema: schema.clone(),
        rows,
    })
}

impl Dataset {
    /// Splits raw rows by time, builds vocabularies on the retrieval and
    /// train pools, and encodes every row.
    pub fn from_raw(raw: &RawTable, fractions: SplitFractions) -> Result<Self, TabularError> {
        let keys: Vec<(usize, i64)> = raw.rows.iter().map(|r| (r.row_id, r.timestamp)).collect();
        let split = temporal_split(&keys, fractions)?;
        let seen = split
            .retrieval
            .iter()
            .chain(&split.train)
            .map(|&id| raw.rows[id].values.as_slice());
        let vocab = Vocabulary::build(&raw.schema, seen)?;
        let rows = raw
            .rows
            .iter()
            .map(|r| {
                Ok(Row {
                    row_id: r.row_id,
                    timestamp: r.timestamp,
                    values: vocab.encode_row(&r.values)?,
                    label: r.label,
                })
            })
            .collect::<Result<Vec<_>, TabularError>>()?;
        Ok(Dataset {
            table: Table {
                schema: raw.schema.clone(),
                vocab,
                rows,
            },
            split,
            fractions,
        })
    }
}

/// Reads, splits and encodes a CSV file.
pub fn ingest_csv(
    path: &Path,
    schema: &Schema,
    fractions: SplitFractions,
) -> Result<Dataset, TabularError> {
    let file = std::fs::File::open(path).map_err(|e| TabularError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    let raw = read_csv(std::io::BufReader::new(file), schema)?;
    Dataset::from_raw(&raw, fractions)
}
