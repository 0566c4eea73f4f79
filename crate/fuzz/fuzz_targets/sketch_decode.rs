#![no_main]

use kbq_core::cms::CountMinSketch;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(s) = CountMinSketch::from_bytes(data) {
        assert_eq!(CountMinSketch::from_bytes(&s.to_bytes()).unwrap(), s);
        let _ = s.lookup(0);
    }
});
