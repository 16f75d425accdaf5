#![no_main]
use libfuzzer_sys::fuzz_target;
use pet_core::tabular::Schema;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(schema) = Schema::from_toml(text) {
            // Whatever parses must survive a round trip.
            assert_eq!(Schema::from_toml(&schema.to_toml()).unwrap(), schema);
        }
    }
});
