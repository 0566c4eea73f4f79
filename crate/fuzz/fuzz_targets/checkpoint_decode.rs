#![no_main]

use kbq_core::kbstore::Embeddings;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(e) = Embeddings::from_bytes(data) {
        assert_eq!(e.to_bytes(), data);
    }
});
