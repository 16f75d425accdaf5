#![no_main]
use libfuzzer_sys::fuzz_target;
use pet_core::tabular::{read_csv, Dataset, FieldSpec, Schema, SplitFractions};

fuzz_target!(|data: &[u8]| {
    let schema = Schema::new(
        "ts",
        "y",
        vec![FieldSpec::categorical("user"), FieldSpec::continuous("price", 4)],
    );
    if let Ok(raw) = read_csv(data, &schema) {
        let _ = Dataset::from_raw(&raw, SplitFractions::default());
    }
});
