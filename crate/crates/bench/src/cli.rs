//! The `kbq` command line.
//!
//! Every subcommand also accepts `--config FILE`; the file's settings are
//! applied first and flags given on the command line override them.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use kbq_core::eval::{EvalConfig, Evaluator};
use kbq_core::kbstore::{add_inverse_relations, filter_fanout, parse_kb, parse_kb_with, write_kb, Embeddings, IngestOptions, KbIndex, KbSplit, Triple, TripleStore, Vocab};
use kbq_core::query::{parse_query, Template};
use kbq_core::setrep::{Families, SketchMode};
use kbq_core::trainer::{TrainConfig, TrainMode, Trainer};

use crate::config::parse_config;
use crate::pipeline::{run_with, split_for, BenchConfig};
use crate::protocol::{make_splits, template_seed, BenchMode, GenOptions, GoldQuery, QueryGenerator};
use crate::sketchbench::{linearity_trials, recovery_trials, LinearityConfig, RecoveryConfig};
use crate::synth::{generate, SynthConfig};

#[derive(Parser, Debug)]
#[command(name = "kbq", version, about = "Query embeddings over knowledge bases", args_override_self = true)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Load a triple file or generate a synthetic KB and write it out.
    Ingest(IngestArgs),
    /// Hold out a fraction of a KB's triples.
    Split(SplitArgs),
    /// Train embeddings and write a checkpoint.
    Train(TrainCmd),
    /// Generate templated test queries as s-expressions.
    Genq(GenqArgs),
    /// Run the benchmark protocol and print a report.
    Eval(EvalCmd),
    /// Answer a single s-expression query.
    Query(QueryCmd),
    /// Measure sketch recovery failures and linearity.
    SketchBench(SketchBenchArgs),
}

#[derive(Args, Debug)]
struct SynthArgs {
    /// Entities in a synthetic KB.
    #[arg(long, default_value_t = 1000)]
    entities: usize,
    /// Relations in a synthetic KB.
    #[arg(long, default_value_t = 20)]
    relations: usize,
    #[arg(long, default_value_t = 10)]
    types: usize,
    #[arg(long, default_value_t = 5)]
    synth_fanout: usize,
    #[arg(long, default_value_t = 0)]
    synth_seed: u64,
}

impl SynthArgs {
    fn config(&self) -> SynthConfig {
        SynthConfig {
            num_entities: self.entities,
            num_relations: self.relations,
            num_types: self.types,
            max_fanout: self.synth_fanout,
            seed: self.synth_seed,
            ..Default::default()
        }
    }
}

#[derive(Args, Debug)]
struct KbArgs {
    /// Triple file (`subject<TAB>relation<TAB>object`). A synthetic KB is
    /// generated when omitted.
    #[arg(long)]
    kb: Option<PathBuf>,
    #[command(flatten)]
    synth: SynthArgs,
}

impl KbArgs {
    fn load(&self) -> anyhow::Result<(Vocab, Vec<Triple>)> {
        match &self.kb {
            Some(p) => read_kb(p),
            None => Ok(generate(&self.synth.config())?),
        }
    }
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long, default_value_t = 64)]
    dim: usize,
    #[arg(long, default_value_t = 1000)]
    steps: usize,
    #[arg(long, default_value_t = 0.1)]
    lr: f64,
    #[arg(long, default_value_t = 0.0)]
    momentum: f64,
    #[arg(long, default_value_t = 64)]
    batch: usize,
    /// Triples retrieved per follow step, in training and evaluation.
    #[arg(long, default_value_t = 1000)]
    k_triples: usize,
    /// Scale of the relation block in retrieval queries.
    #[arg(long, default_value_t = 1.0)]
    lambda: f64,
}

impl TrainArgs {
    fn config(&self, mode: BenchMode, seed: u64) -> TrainConfig {
        TrainConfig {
            dim: self.dim,
            steps: self.steps,
            learning_rate: self.lr,
            momentum: self.momentum,
            batch_size: self.batch,
            k_triples: self.k_triples,
            lambda: self.lambda,
            seed,
            mode: train_mode(mode),
            ..Default::default()
        }
    }
}

fn train_mode(mode: BenchMode) -> TrainMode {
    match mode {
        BenchMode::Entailment => TrainMode::Entailment,
        BenchMode::Generalization => TrainMode::Generalization,
    }
}

#[derive(Args, Debug)]
struct IngestArgs {
    #[arg(long, conflicts_with = "synthetic")]
    input: Option<PathBuf>,
    #[arg(long)]
    synthetic: bool,
    #[command(flatten)]
    synth: SynthArgs,
    #[arg(long)]
    output: PathBuf,
    /// Add `r_inv` for every relation `r`.
    #[arg(long)]
    add_inverse: bool,
    /// Drop (subject, relation) groups with more objects than this.
    #[arg(long)]
    max_fanout: Option<usize>,
}

#[derive(Args, Debug)]
struct SplitArgs {
    #[arg(long)]
    kb: PathBuf,
    #[arg(long, default_value_t = 0.1)]
    holdout: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    train_out: PathBuf,
    #[arg(long)]
    test_out: PathBuf,
}

#[derive(Args, Debug)]
struct TrainCmd {
    #[arg(long)]
    kb: PathBuf,
    /// Training part of a split of `--kb`; defaults to the whole KB.
    #[arg(long)]
    train_kb: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = BenchMode::Entailment)]
    mode: BenchMode,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    train: TrainArgs,
    /// Checkpoint to write.
    #[arg(long)]
    out: PathBuf,
    /// Write `step<TAB>task<TAB>loss` records here.
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct GenqArgs {
    #[arg(long)]
    kb: PathBuf,
    #[arg(long)]
    train_kb: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = BenchMode::Entailment)]
    mode: BenchMode,
    #[arg(long, default_value = "all")]
    templates: String,
    #[arg(long, default_value_t = 100)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    disjoint: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct EvalCmd {
    #[command(flatten)]
    kb: KbArgs,
    /// Training KB; by default the split is made from `--holdout` and `--seed`.
    #[arg(long)]
    train_kb: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = BenchMode::Entailment)]
    mode: BenchMode,
    /// `all` or a comma-separated list such as `1p,2i,up`.
    #[arg(long, default_value = "all")]
    templates: String,
    #[arg(long, default_value_t = 100)]
    queries_per_template: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 0.1)]
    holdout: f64,
    /// Skip training and use these embeddings.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Queries file, one s-expression per line, instead of generated queries.
    #[arg(long)]
    queries: Option<PathBuf>,
    #[command(flatten)]
    train: TrainArgs,
    /// Candidates decoded for the final answer.
    #[arg(long, default_value_t = 1000)]
    k: usize,
    /// Remove answers derivable from the training KB and score the rest.
    #[arg(long)]
    filter_known: bool,
    /// Generalization queries must share no answer with the training KB.
    #[arg(long)]
    disjoint: bool,
    /// Use vacuous sketches everywhere.
    #[arg(long)]
    no_sketch: bool,
    /// Also write the report as TSV here.
    #[arg(long)]
    tsv: Option<PathBuf>,
    /// Write the top ten answers of every query here.
    #[arg(long)]
    answers: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct QueryCmd {
    /// The query, e.g. `(follow (basic e:Apple_Inc) (rel r:headquarters_of))`.
    query: String,
    #[arg(long)]
    kb: PathBuf,
    #[arg(long, conflicts_with = "localist")]
    checkpoint: Option<PathBuf>,
    /// One-hot embeddings: exact symbolic answers.
    #[arg(long)]
    localist: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    train: TrainArgs,
    #[arg(long, default_value_t = 10)]
    top: usize,
    /// Decode with a vacuous final sketch.
    #[arg(long)]
    generalize: bool,
    #[arg(long)]
    no_sketch: bool,
}

#[derive(Args, Debug)]
struct SketchBenchArgs {
    #[arg(long, default_value_t = 50)]
    m: usize,
    #[arg(long, default_value_t = 128)]
    nw: usize,
    #[arg(long, default_value_t = 16)]
    nd: usize,
    #[arg(long, default_value_t = 500)]
    candidates: usize,
    #[arg(long, default_value_t = 2000)]
    trials: usize,
    #[arg(long, default_value_t = 1_000_000)]
    universe: usize,
    /// Set pairs for the linearity check; 0 skips it.
    #[arg(long, default_value_t = 500)]
    pairs: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

/// Run with process arguments, printing to stdout.
pub fn run_cli<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<String>,
{
    run_cli_to(argv, &mut std::io::stdout().lock())
}

/// Run with `argv` (program name first) and return the exit code.
pub fn run_cli_to<I, S>(argv: I, out: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<String>,
{
    let argv: Vec<String> = argv.into_iter().map(Into::into).collect();
    let argv = match expand_config(argv) {
        Ok(a) => a,
        Err(e) => {
            eprintln!("error: {e:#}");
            return 2;
        }
    };
    let cli = match Cli::try_parse_from(&argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match dispatch(cli.command, out) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            1
        }
    }
}

/// Replace `--config FILE` with the file's flags, placed right after the
/// subcommand so that later command-line flags win.
fn expand_config(argv: Vec<String>) -> anyhow::Result<Vec<String>> {
    let mut rest = Vec::with_capacity(argv.len());
    let mut path = None;
    let mut it = argv.into_iter();
    while let Some(a) = it.next() {
        if a == "--config" {
            path = Some(it.next().context("--config needs a file")?);
        } else if let Some(p) = a.strip_prefix("--config=") {
            path = Some(p.to_owned());
        } else {
            rest.push(a);
        }
    }
    let Some(path) = path else { return Ok(rest) };
    let text = std::fs::read_to_string(&path).with_context(|| format!("reading {path}"))?;
    let flags = parse_config(&text).with_context(|| format!("in {path}"))?;
    // Program name, then the subcommand, which is the first non-flag token.
    let at = rest.iter().skip(1).position(|a| !a.starts_with('-')).map_or(rest.len(), |i| i + 2);
    rest.splice(at..at, flags);
    Ok(rest)
}

fn dispatch(cmd: Command, out: &mut dyn Write) -> anyhow::Result<i32> {
    match cmd {
        Command::Ingest(a) => ingest(a, out),
        Command::Split(a) => split(a, out),
        Command::Train(a) => train(a, out),
        Command::Genq(a) => genq(a, out),
        Command::Eval(a) => eval(a, out),
        Command::Query(a) => query(a, out),
        Command::SketchBench(a) => sketch_bench(a, out),
    }
}

fn read_kb(path: &Path) -> anyhow::Result<(Vocab, Vec<Triple>)> {
    let f = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    parse_kb(BufReader::new(f), &IngestOptions::default()).with_context(|| format!("reading {}", path.display()))
}

fn read_kb_with(path: &Path, vocab: &Vocab) -> anyhow::Result<Vec<Triple>> {
    let f = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    parse_kb_with(BufReader::new(f), vocab).with_context(|| format!("reading {}", path.display()))
}

fn write_triples(path: &Path, vocab: &Vocab, triples: &[Triple]) -> anyhow::Result<()> {
    let f = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    let mut w = BufWriter::new(f);
    write_kb(&mut w, vocab, triples)?;
    w.flush()?;
    Ok(())
}

/// A split whose training part is `train_kb` when given.
fn load_split(vocab: &Vocab, full: Vec<Triple>, train_kb: Option<&Path>) -> anyhow::Result<KbSplit> {
    let Some(p) = train_kb else { return Ok(KbSplit::entailment(full)) };
    let split = KbSplit {
        training: read_kb_with(p, vocab)?,
        full,
    };
    if !split.is_sound() {
        bail!("{} has triples that are not in the full KB", p.display());
    }
    Ok(split)
}

fn parse_templates(s: &str) -> anyhow::Result<Vec<Template>> {
    if s == "all" {
        return Ok(Template::ALL.to_vec());
    }
    s.split(',')
        .map(|t| Template::from_name(t.trim()).with_context(|| format!("unknown template `{t}`")))
        .collect()
}

fn ingest(a: IngestArgs, out: &mut dyn Write) -> anyhow::Result<i32> {
    let (mut vocab, mut triples) = match (&a.input, a.synthetic) {
        (Some(p), _) => read_kb(p)?,
        (None, true) => generate(&a.synth.config())?,
        (None, false) => bail!("give --input FILE or --synthetic"),
    };
    if let Some(cap) = a.max_fanout {
        triples = filter_fanout(triples, cap);
    }
    if a.add_inverse {
        triples = add_inverse_relations(&mut vocab, &triples);
    }
    write_triples(&a.output, &vocab, &triples)?;
    writeln!(
        out,
        "{} triples, {} entities, {} relations -> {}",
        triples.len(),
        vocab.num_entities(),
        vocab.num_relations(),
        a.output.display()
    )?;
    Ok(0)
}

fn split(a: SplitArgs, out: &mut dyn Write) -> anyhow::Result<i32> {
    let (vocab, triples) = read_kb(&a.kb)?;
    let s = make_splits(&triples, vocab.num_entities(), a.holdout, a.seed)?;
    let held = s.held_out();
    write_triples(&a.train_out, &vocab, &s.training)?;
    write_triples(&a.test_out, &vocab, &held)?;
    writeln!(out, "{} training, {} held out", s.training.len(), held.len())?;
    Ok(0)
}

fn train(a: TrainCmd, out: &mut dyn Write) -> anyhow::Result<i32> {
    let (vocab, full) = read_kb(&a.kb)?;
    let split = load_split(&vocab, full, a.train_kb.as_deref())?;
    let (n, nr) = (vocab.num_entities(), vocab.num_relations());
    let mut trainer = Trainer::new(a.train.config(a.mode, a.seed), &split, n, nr)?;
    let mut log = match &a.log {
        Some(p) => Some(BufWriter::new(File::create(p).with_context(|| format!("creating {}", p.display()))?)),
        None => None,
    };
    let mut io_err = None;
    trainer.run(|r| {
        log::debug!("{r}");
        if let Some(w) = log.as_mut() {
            if let Err(e) = writeln!(w, "{r}") {
                io_err.get_or_insert(e);
            }
        }
    })?;
    if let Some(e) = io_err {
        return Err(e.into());
    }
    if let Some(w) = log.as_mut() {
        w.flush()?;
    }
    trainer.embeddings()?.save(&a.out)?;
    writeln!(out, "trained {} steps -> {}", trainer.steps_done(), a.out.display())?;
    Ok(0)
}

fn genq(a: GenqArgs, out: &mut dyn Write) -> anyhow::Result<i32> {
    let (vocab, full) = read_kb(&a.kb)?;
    let split = load_split(&vocab, full, a.train_kb.as_deref())?;
    let (n, nr) = (vocab.num_entities(), vocab.num_relations());
    let fi = KbIndex::new(&split.full, n, nr);
    let ti = KbIndex::new(&split.training, n, nr);
    let gen = QueryGenerator::new(&split.full, &fi, &ti);
    let opts = GenOptions {
        mode: a.mode,
        disjoint: a.disjoint,
        ..Default::default()
    };
    let mut w = BufWriter::new(File::create(&a.out).with_context(|| format!("creating {}", a.out.display()))?);
    let mut total = 0;
    for t in parse_templates(&a.templates)? {
        for q in gen.generate(t, a.n, template_seed(a.seed, t), &opts) {
            writeln!(w, "{}", q.query.to_sexpr(&vocab))?;
            total += 1;
        }
    }
    w.flush()?;
    writeln!(out, "{total} queries -> {}", a.out.display())?;
    Ok(0)
}

fn read_queries(path: &Path, vocab: &Vocab, split: &KbSplit) -> anyhow::Result<Vec<GoldQuery>> {
    let (n, nr) = (vocab.num_entities(), vocab.num_relations());
    let fi = KbIndex::new(&split.full, n, nr);
    let ti = KbIndex::new(&split.training, n, nr);
    let f = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let mut qs = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let ctx = || format!("{}:{}", path.display(), i + 1);
        let q = parse_query(&line, vocab).with_context(ctx)?;
        qs.push(GoldQuery::new(q, &fi, &ti).with_context(ctx)?);
    }
    Ok(qs)
}

fn eval(a: EvalCmd, out: &mut dyn Write) -> anyhow::Result<i32> {
    let (vocab, full) = a.kb.load()?;
    let (n, nr) = (vocab.num_entities(), vocab.num_relations());
    let mut eval_cfg = if a.no_sketch {
        EvalConfig::without_sketches()
    } else {
        EvalConfig::entailment()
    }
    .with_k(a.k)
    .with_k_triples(a.train.k_triples)
    .with_lambda(a.train.lambda as f32);
    if a.no_sketch {
        eval_cfg.final_sketch = SketchMode::Vacuous;
    }
    let cfg = BenchConfig {
        mode: a.mode,
        templates: parse_templates(&a.templates)?,
        queries_per_template: a.queries_per_template,
        seed: a.seed,
        holdout_fraction: a.holdout,
        train: a.train.config(a.mode, a.seed),
        eval: eval_cfg,
        filter_known: a.filter_known,
        disjoint: a.disjoint,
    };
    let split = match &a.train_kb {
        Some(p) => load_split(&vocab, full, Some(p))?,
        None => split_for(&cfg, &full, n)?,
    };
    let emb = a.checkpoint.as_deref().map(Embeddings::load).transpose()?;
    let queries = a.queries.as_deref().map(|p| read_queries(p, &vocab, &split)).transpose()?;
    let run = run_with(&cfg, split, n, nr, emb, queries)?;
    writeln!(out, "{}", run.report.to_table())?;
    let tsv = run.report.to_tsv();
    match &a.tsv {
        Some(p) => std::fs::write(p, &tsv).with_context(|| format!("writing {}", p.display()))?,
        None => write!(out, "{tsv}")?,
    }
    if let Some(p) = &a.answers {
        let ev = Evaluator::new(&run.store, &run.families, cfg.eval_config());
        let mut w = BufWriter::new(File::create(p).with_context(|| format!("creating {}", p.display()))?);
        for (i, q) in run.queries.iter().enumerate() {
            let names: Vec<&str> = ev.evaluate(&q.query)?.iter().take(10).map(|&(e, _)| vocab.entity_name(e)).collect();
            writeln!(w, "{i}\t{}", names.join(","))?;
        }
        w.flush()?;
    }
    Ok(0)
}

fn query(a: QueryCmd, out: &mut dyn Write) -> anyhow::Result<i32> {
    let (vocab, triples) = read_kb(&a.kb)?;
    let (n, nr) = (vocab.num_entities(), vocab.num_relations());
    let q = parse_query(&a.query, &vocab)?;
    let mut cfg = if a.no_sketch {
        EvalConfig::without_sketches()
    } else if a.generalize {
        EvalConfig::generalization()
    } else {
        EvalConfig::entailment()
    };
    let emb = if a.localist {
        cfg = cfg.with_k(n).with_k_triples(triples.len());
        Embeddings::localist(n, nr)?
    } else if let Some(p) = &a.checkpoint {
        Embeddings::load(p)?
    } else {
        let split = KbSplit::entailment(triples.clone());
        let mut t = Trainer::new(a.train.config(BenchMode::Entailment, a.seed), &split, n, nr)?;
        t.run(|r| log::debug!("{r}"))?;
        t.embeddings()?
    };
    if !a.localist {
        cfg = cfg.with_k_triples(a.train.k_triples).with_lambda(a.train.lambda as f32);
    }
    let mut store = TripleStore::new(triples, n, nr)?;
    store.set_embeddings(emb)?;
    let families = Families::new(Default::default(), n, nr)?;
    let ranked = Evaluator::new(&store, &families, cfg).evaluate(&q)?;
    for (e, w) in ranked.iter().take(a.top) {
        writeln!(out, "{}\t{w:.6}", vocab.entity_name(*e))?;
    }
    Ok(0)
}

fn sketch_bench(a: SketchBenchArgs, out: &mut dyn Write) -> anyhow::Result<i32> {
    let r = recovery_trials(&RecoveryConfig {
        m: a.m,
        width: a.nw,
        depth: a.nd,
        candidates: a.candidates,
        trials: a.trials,
        universe: a.universe,
        seed: a.seed,
    })?;
    writeln!(out, "{}", r.summary())?;
    if !r.preconditions_hold() {
        writeln!(out, "warning: N_W <= 2m or N_D too small; the bound does not apply")?;
    }
    writeln!(out, "recovery: {}", if r.passes() { "ok" } else { "FAILED" })?;
    let mut ok = r.passes();
    if a.pairs > 0 {
        let l = linearity_trials(&LinearityConfig {
            pairs: a.pairs,
            seed: a.seed,
            ..Default::default()
        })?;
        writeln!(
            out,
            "linearity: add {}/{} hadamard {}/{} (collision-free pairs; {} of {} unconditioned draws exact)",
            l.add_exact, l.pairs, l.hadamard_exact, l.pairs, l.hadamard_unconditioned_exact, l.hadamard_draws
        )?;
        ok &= l.passes();
    }
    Ok(if ok { 0 } else { 1 })
}
