use std::collections::BTreeMap;

use super::{Doc, InvertedIndex, RetrievalError};
use crate::codec::{DecodeError, Reader, Writer};

const MAGIC: &[u8; 8] = b"PETINDEX";
const VERSION: u32 = 1;

pub fn encode_index(index: &InvertedIndex) -> Vec<u8> {
    let mut w = Writer::new(MAGIC, VERSION);
    w.usize(index.num_fields);
    w.usize(index.docs.len());
    for d in &index.docs {
        w.usize(d.row_id);
        w.i64(d.timestamp);
    }
    for field in &index.postings {
        w.usize(field.len());
        for (&code, list) in field {
            w.u32(code);
            w.u32s(list);
        }
    }
    w.finish()
}

/// Decodes an index file, checking that documents are strictly ordered and
/// that every field's postings partition the documents.
pub fn decode_index(bytes: &[u8]) -> Result<InvertedIndex, RetrievalError> {
    let invalid = |m: &str| RetrievalError::Decode(DecodeError::Invalid(m.to_string()));
    let mut r = Reader::new(bytes, MAGIC, "PETINDEX", VERSION)?;
    let num_fields = r.len("field count", 8)?;
    let n = r.len("document count", 16)?;
    if n == 0 {
        return Err(RetrievalError::EmptyPool);
    }
    let mut docs = Vec::with_capacity(n);
    for _ in 0..n {
        let row_id = r.usize("row id")?;
        let timestamp = r.i64("timestamp")?;
        if docs.last().is_some_and(|d: &Doc| d.row_id >= row_id) {
            return Err(invalid("document row ids are not strictly increasing"));
        }
        docs.push(Doc { row_id, timestamp });
    }
    let mut postings = Vec::with_capacity(num_fields);
    for f in 0..num_fields {
        let keys = r.len("term count", 12)?;
        let mut field = BTreeMap::new();
        let mut covered = vec![false; n];
        let mut prev_code = None;
        for _ in 0..keys {
            let code = r.u32("code")?;
            if prev_code.is_some_and(|p| p >= code) {
                return Err(invalid("term codes are not strictly increasing"));
            }
            prev_code = Some(code);
            let list = r.u32s("posting list")?;
            if list.is_empty() || list.windows(2).any(|w| w[0] >= w[1]) {
                return Err(invalid("posting list empty or unsorted"));
            }
            for &pos in &list {
                let slot = covered
                    .get_mut(pos as usize)
                    .ok_or_else(|| invalid("posting refers past the last document"))?;
                if std::mem::replace(slot, true) {
                    return Err(invalid("document appears twice in one field"));
                }
            }
            field.insert(code, list);
        }
        if covered.iter().any(|c| !c) {
            return Err(invalid(&format!(
                "field {f} postings do not cover every document"
            )));
        }
        postings.push(field);
    }
    r.finish()?;
    Ok(InvertedIndex {
        num_fields,
        docs,
        postings,
    })
}
