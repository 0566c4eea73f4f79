#![no_main]

use kbq_core::kbstore::Vocab;
use kbq_core::query::{canonicalize, parse_query};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(src) = std::str::from_utf8(data) else { return };
    let mut vocab = Vocab::default();
    for e in ["a", "b", "Apple_Inc", "x y"] {
        vocab.entities.intern(e);
    }
    for r in ["p", "q", "headquarters_of"] {
        vocab.relations.intern(r);
    }
    if let Ok(c) = canonicalize(src) {
        assert_eq!(canonicalize(&c).unwrap(), c);
    }
    if let Ok(q) = parse_query(src, &vocab) {
        let printed = q.to_sexpr(&vocab);
        assert_eq!(parse_query(&printed, &vocab).unwrap(), q);
    }
});
