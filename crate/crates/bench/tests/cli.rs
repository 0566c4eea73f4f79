use std::path::Path;

use kbq_bench::cli::run_cli_to;

fn run(args: &[&str]) -> (i32, String) {
    let mut out = Vec::new();
    let argv = std::iter::once("kbq").chain(args.iter().copied());
    let code = run_cli_to(argv, &mut out);
    (code, String::from_utf8(out).unwrap())
}

fn companies() -> String {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/data/companies.tsv").display().to_string()
}

fn s(p: &Path) -> String {
    p.display().to_string()
}

#[test]
fn apple_query_localist() {
    let (code, out) = run(&["query", "--kb", &companies(), "--localist", "(follow (basic e:Apple_Inc) (rel r:headquarters_of))"]);
    assert_eq!(code, 0);
    assert_eq!(out.lines().next().unwrap().split('\t').next(), Some("Cupertino"));
    assert_eq!(out.lines().count(), 1);
}

#[test]
fn apple_query_trained() {
    let (code, out) = run(&[
        "query",
        "--kb",
        &companies(),
        "--dim",
        "8",
        "--steps",
        "200",
        "--lr",
        "0.5",
        "(follow (basic e:Apple_Inc) (rel r:headquarters_of))",
    ]);
    assert_eq!(code, 0);
    assert!(out.starts_with("Cupertino\t"), "{out}");
}

#[test]
fn two_hop_localist_query() {
    let q = "(follow (follow (basic e:Apple_Inc e:Microsoft) (rel r:headquarters_of)) (rel r:located_in))";
    let (code, out) = run(&["query", "--kb", &companies(), "--localist", q]);
    assert_eq!(code, 0);
    let mut names: Vec<&str> = out.lines().map(|l| l.split('\t').next().unwrap()).collect();
    names.sort();
    assert_eq!(names, vec!["California", "Washington"]);
}

#[test]
fn bad_input_gives_nonzero_exit() {
    assert_ne!(run(&[]).0, 0);
    assert_ne!(run(&["frobnicate"]).0, 0);
    assert_ne!(run(&["eval", "--steps", "lots"]).0, 0);
    assert_ne!(run(&["query", "--kb", &companies(), "--localist", "(follow (basic e:Nobody) (rel r:headquarters_of))"]).0, 0);
    assert_ne!(run(&["query", "--kb", &companies(), "--localist", "(follow (basic e:Apple_Inc)"]).0, 0);
    assert_ne!(run(&["split", "--kb", "/nonexistent/kb.tsv", "--train-out", "a", "--test-out", "b"]).0, 0);
    assert_ne!(run(&["eval", "--mode", "generalization", "--holdout", "0", "--entities", "50", "--relations", "4", "--types", "2"]).0, 0);
}

#[test]
fn full_pipeline_through_files() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let kb = d.join("kb.tsv");
    let synth = ["--entities", "60", "--relations", "5", "--types", "3", "--synth-seed", "3"];

    let mut args = vec!["ingest", "--synthetic", "--output"];
    let kb_s = s(&kb);
    args.push(&kb_s);
    args.extend(synth);
    let (code, out) = run(&args);
    assert_eq!(code, 0, "{out}");
    assert!(out.contains("60 entities") || out.contains("entities"));

    let (train_kb, test_kb) = (s(&d.join("train.tsv")), s(&d.join("test.tsv")));
    let (code, _) = run(&["split", "--kb", &kb_s, "--holdout", "0.2", "--seed", "1", "--train-out", &train_kb, "--test-out", &test_kb]);
    assert_eq!(code, 0);
    let n_lines = |p: &str| std::fs::read_to_string(p).unwrap().lines().count();
    let total = n_lines(&kb_s);
    assert_eq!(n_lines(&train_kb) + n_lines(&test_kb), total);
    assert_eq!(n_lines(&test_kb), (total as f64 * 0.2).round() as usize);

    let ckpt = s(&d.join("model.ckpt"));
    let log = s(&d.join("loss.tsv"));
    let (code, out) = run(&[
        "train", "--kb", &kb_s, "--train-kb", &train_kb, "--mode", "generalization", "--dim", "8", "--steps", "20", "--out", &ckpt, "--log", &log,
    ]);
    assert_eq!(code, 0, "{out}");
    assert!(Path::new(&ckpt).exists());
    let log_text = std::fs::read_to_string(&log).unwrap();
    assert!(log_text.lines().count() >= 20);
    assert!(log_text.lines().all(|l| l.split('\t').count() == 3));

    let queries = s(&d.join("queries.sexpr"));
    let (code, _) = run(&[
        "genq", "--kb", &kb_s, "--train-kb", &train_kb, "--mode", "generalization", "--templates", "1p,2p,2i", "--n", "5", "--out", &queries,
    ]);
    assert_eq!(code, 0);
    let qtext = std::fs::read_to_string(&queries).unwrap();
    assert!(qtext.lines().count() > 0);
    assert!(qtext.lines().all(|l| l.starts_with("(")));

    let tsv = s(&d.join("report.tsv"));
    let answers = s(&d.join("answers.tsv"));
    let eval_args = [
        "eval", "--kb", &kb_s, "--train-kb", &train_kb, "--mode", "generalization", "--templates", "1p,2p,2i", "--checkpoint", &ckpt, "--queries", &queries,
        "--dim", "8", "--tsv", &tsv, "--answers", &answers,
    ];
    let (code, out) = run(&eval_args);
    assert_eq!(code, 0, "{out}");
    assert!(out.contains("Avg") && out.contains("hits@3"));
    let report = std::fs::read_to_string(&tsv).unwrap();
    assert!(report.contains("# mode=generalization"));
    assert!(report.lines().any(|l| l.starts_with("1p\t")));
    assert_eq!(std::fs::read_to_string(&answers).unwrap().lines().count(), qtext.lines().count());

    // Same inputs, same report.
    let tsv2 = s(&d.join("report2.tsv"));
    let mut again = eval_args.to_vec();
    let pos = again.iter().position(|a| *a == tsv).unwrap();
    again[pos] = &tsv2;
    assert_eq!(run(&again).0, 0);
    assert_eq!(report, std::fs::read_to_string(&tsv2).unwrap());
}

#[test]
fn config_file_and_overrides() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    std::fs::write(&cfg, "# small run\nentities = 40\nrelations=4\ntypes=2\ndim=8\nsteps=10\ntemplates=1p,2u\nqueries_per_template=5\nk=40\n").unwrap();
    let (code, a) = run(&["eval", "--config", &s(&cfg)]);
    assert_eq!(code, 0, "{a}");
    assert!(a.contains("# steps=10"), "{a}");
    let (code, b) = run(&["eval", "--config", &s(&cfg), "--steps", "12"]);
    assert_eq!(code, 0);
    assert!(b.contains("# steps=12"));

    std::fs::write(&cfg, "steps\n").unwrap();
    assert_ne!(run(&["eval", "--config", &s(&cfg)]).0, 0);
    assert_ne!(run(&["eval", "--config", "/nonexistent.cfg"]).0, 0);
}

#[test]
fn ingest_options() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("inv.tsv");
    let (code, msg) = run(&["ingest", "--input", &companies(), "--output", &s(&out), "--add-inverse"]);
    assert_eq!(code, 0);
    assert!(msg.contains("18 triples"), "{msg}");
    let text = std::fs::read_to_string(&out).unwrap();
    assert!(text.contains("Cupertino\theadquarters_of_inv\tApple_Inc"));

    let capped = dir.path().join("capped.tsv");
    let (code, msg) = run(&["ingest", "--input", &companies(), "--output", &s(&capped), "--max-fanout", "0"]);
    assert_eq!(code, 0);
    assert!(msg.starts_with("0 triples"), "{msg}");
    assert_ne!(run(&["ingest", "--output", &s(&capped)]).0, 0);
}

#[test]
fn sketch_bench_small() {
    let (code, out) = run(&["sketch-bench", "--trials", "100", "--pairs", "20"]);
    assert_eq!(code, 0, "{out}");
    assert!(out.contains("recovery: ok"));
    assert!(out.contains("add 20/20 hadamard 20/20"));
    let (code, out) = run(&["sketch-bench", "--nw", "8", "--nd", "12", "--trials", "50", "--pairs", "0"]);
    assert_eq!(code, 1);
    assert!(out.contains("FAILED") && out.contains("warning"));
}
