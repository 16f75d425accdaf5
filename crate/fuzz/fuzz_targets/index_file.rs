#![no_main]
use libfuzzer_sys::fuzz_target;
use pet_core::retrieval::{decode_index, encode_index};

fuzz_target!(|data: &[u8]| {
    if let Ok(index) = decode_index(data) {
        assert_eq!(decode_index(&encode_index(&index)).unwrap(), index);
    }
});
