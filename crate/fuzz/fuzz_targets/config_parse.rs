#![no_main]

use kbq_bench::config::parse_config;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(args) = parse_config(text) {
        assert!(args.iter().all(|a| a.starts_with("--")));
    }
});
