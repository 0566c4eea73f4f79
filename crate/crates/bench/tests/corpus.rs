use std::path::PathBuf;

use kbq_bench::config::parse_config;

#[test]
fn config_parse_corpus() {
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fuzz/corpus/config_parse");
    let mut ok = 0;
    for entry in std::fs::read_dir(dir).unwrap() {
        let data = std::fs::read(entry.unwrap().path()).unwrap();
        let Ok(text) = std::str::from_utf8(&data) else { continue };
        if let Ok(args) = parse_config(text) {
            assert!(args.iter().all(|a| a.starts_with("--")));
            ok += 1;
        }
    }
    assert!(ok > 0);
}
