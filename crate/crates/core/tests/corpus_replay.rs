//! Replays the checked-in fuzz seeds through the decoders. Every seed is a
//! valid encoding, so each must decode cleanly.

use std::fs;
use std::path::PathBuf;

use pet_core::config::RunConfig;
use pet_core::model::decode_checkpoint;
use pet_core::retrieval::decode_index;
use pet_core::tabular::{decode_cache, read_csv, FieldSpec, Schema};

fn seeds(target: &str) -> Vec<Vec<u8>> {
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fuzz/corpus").join(target);
    let mut files: Vec<_> = fs::read_dir(&dir).unwrap().map(|e| e.unwrap().path()).collect();
    files.sort();
    assert!(!files.is_empty(), "no seeds in {}", dir.display());
    files.iter().map(|p| fs::read(p).unwrap()).collect()
}

fn text(bytes: &[u8]) -> &str {
    std::str::from_utf8(bytes).unwrap()
}

#[test]
fn schema_seeds_parse() {
    for s in seeds("schema_config") {
        Schema::from_toml(text(&s)).unwrap();
    }
}

#[test]
fn run_config_seeds_parse() {
    for s in seeds("run_config") {
        RunConfig::from_toml(text(&s)).unwrap();
    }
}

#[test]
fn csv_seeds_ingest() {
    let schema = Schema::new("ts", "y", vec![FieldSpec::categorical("user"), FieldSpec::continuous("price", 4)]);
    for s in seeds("csv_ingest") {
        read_csv(s.as_slice(), &schema).unwrap();
    }
}

#[test]
fn binary_seeds_decode() {
    for s in seeds("table_cache") {
        decode_cache(&s).unwrap();
    }
    for s in seeds("index_file") {
        decode_index(&s).unwrap();
    }
    for s in seeds("checkpoint") {
        decode_checkpoint(&s, None).unwrap();
    }
}

#[test]
fn truncated_seeds_are_rejected() {
    for s in seeds("table_cache") {
        assert!(decode_cache(&s[..s.len() - 1]).is_err());
    }
    for s in seeds("index_file") {
        assert!(decode_index(&s[..s.len() - 1]).is_err());
    }
    for s in seeds("checkpoint") {
        assert!(decode_checkpoint(&s[..s.len() - 1], None).is_err());
    }
}
