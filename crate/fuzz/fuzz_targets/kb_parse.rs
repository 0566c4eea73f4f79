#![no_main]

use kbq_core::kbstore::{parse_kb, parse_kb_with, write_kb, IngestOptions};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let opts = IngestOptions {
        max_fanout: data.first().map(|&b| b as usize % 4 + 1),
        add_inverse: data.len() % 2 == 0,
    };
    let Ok((vocab, triples)) = parse_kb(data, &opts) else { return };
    let mut out = Vec::new();
    write_kb(&mut out, &vocab, &triples).unwrap();
    assert_eq!(parse_kb_with(&out[..], &vocab).unwrap(), triples);
});
