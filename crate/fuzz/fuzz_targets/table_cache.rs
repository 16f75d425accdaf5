#![no_main]
use libfuzzer_sys::fuzz_target;
use pet_core::tabular::decode_cache;

fuzz_target!(|data: &[u8]| {
    let _ = decode_cache(data);
});
