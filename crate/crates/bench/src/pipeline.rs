//! End-to-end benchmark runs: split, train, generate queries, evaluate.

use std::time::Instant;

use kbq_core::eval::{EvalConfig, Evaluator};
use kbq_core::kbstore::{Embeddings, KbIndex, KbSplit, Triple, TripleStore};
use kbq_core::query::Template;
use kbq_core::setrep::{Families, SketchMode};
use kbq_core::trainer::{TrainConfig, TrainMode, Trainer};
use kbq_core::{KbqError, Result};

use crate::metrics::{score, EvalReport, TemplateStats};
use crate::protocol::{make_splits, template_seed, BenchMode, GenOptions, GoldQuery, QueryGenerator};

#[derive(Debug, Clone, PartialEq)]
pub struct BenchConfig {
    pub mode: BenchMode,
    pub templates: Vec<Template>,
    pub queries_per_template: usize,
    pub seed: u64,
    pub holdout_fraction: f64,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    /// Remove training-KB answers from rankings and score only the rest.
    pub filter_known: bool,
    pub disjoint: bool,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            mode: BenchMode::Entailment,
            templates: Template::ALL.to_vec(),
            queries_per_template: 100,
            seed: 0,
            holdout_fraction: 0.1,
            train: TrainConfig::default(),
            eval: EvalConfig::entailment(),
            filter_known: false,
            disjoint: false,
        }
    }
}

impl BenchConfig {
    /// Evaluation settings implied by the mode: vacuous final sketch in
    /// generalization mode.
    pub fn eval_config(&self) -> EvalConfig {
        let mut e = self.eval;
        if self.mode == BenchMode::Generalization {
            e.final_sketch = SketchMode::Vacuous;
        }
        e
    }

    pub fn echo(&self) -> Vec<(String, String)> {
        let e = self.eval_config();
        let t = &self.train;
        let kv = |k: &str, v: String| (k.to_owned(), v);
        vec![
            kv("mode", self.mode.name().into()),
            kv("seed", self.seed.to_string()),
            kv("queries_per_template", self.queries_per_template.to_string()),
            kv("holdout", self.holdout_fraction.to_string()),
            kv("dim", t.dim.to_string()),
            kv("steps", t.steps.to_string()),
            kv("lr", t.learning_rate.to_string()),
            kv("batch", t.batch_size.to_string()),
            kv("k", e.k.to_string()),
            kv("k_triples", e.relops.k_triples.to_string()),
            kv("lambda", e.relops.lambda.to_string()),
            kv("intermediate_sketch", format!("{:?}", e.relops.sketch_mode).to_lowercase()),
            kv("final_sketch", format!("{:?}", e.final_sketch).to_lowercase()),
            kv("filter_known", self.filter_known.to_string()),
        ]
    }
}

/// Split according to the mode: entailment keeps the full KB for training.
pub fn split_for(cfg: &BenchConfig, triples: &[Triple], num_entities: usize) -> Result<KbSplit> {
    match cfg.mode {
        BenchMode::Entailment => Ok(KbSplit::entailment(triples.to_vec())),
        BenchMode::Generalization if cfg.holdout_fraction <= 0.0 => Err(KbqError::Config("generalization mode needs a non-empty holdout".into())),
        BenchMode::Generalization => make_splits(triples, num_entities, cfg.holdout_fraction, cfg.seed),
    }
}

pub fn train_for(cfg: &BenchConfig, split: &KbSplit, num_entities: usize, num_relations: usize) -> Result<Embeddings> {
    let mut tc = cfg.train.clone();
    tc.mode = match cfg.mode {
        BenchMode::Entailment => TrainMode::Entailment,
        BenchMode::Generalization => TrainMode::Generalization,
    };
    let mut t = Trainer::new(tc, split, num_entities, num_relations)?;
    t.run(|r| log::debug!("{r}"))?;
    log::info!("trained {} steps", t.steps_done());
    t.embeddings()
}

/// Test queries for every configured template.
pub fn queries_for(cfg: &BenchConfig, split: &KbSplit, num_entities: usize, num_relations: usize) -> Vec<GoldQuery> {
    let full = KbIndex::new(&split.full, num_entities, num_relations);
    let train = KbIndex::new(&split.training, num_entities, num_relations);
    let gen = QueryGenerator::new(&split.full, &full, &train);
    let opts = GenOptions {
        mode: cfg.mode,
        disjoint: cfg.disjoint,
        ..Default::default()
    };
    cfg.templates
        .iter()
        .flat_map(|&t| gen.generate(t, cfg.queries_per_template, template_seed(cfg.seed, t), &opts))
        .collect()
}

/// Ranked answer ids for each query.
pub fn rank_all(store: &TripleStore, families: &Families, eval: EvalConfig, queries: &[GoldQuery]) -> Result<Vec<Vec<usize>>> {
    let ev = Evaluator::new(store, families, eval);
    let qs: Vec<_> = queries.iter().map(|q| q.query.clone()).collect();
    Ok(ev
        .evaluate_batch(&qs)?
        .into_iter()
        .map(|r| r.into_iter().map(|p| p.0).collect())
        .collect())
}

/// Score rankings per template. With `filter_known`, training-KB answers are
/// removed from the ranking and only the remaining gold answers count;
/// queries with nothing left to find are skipped.
pub fn report(templates: &[Template], queries: &[GoldQuery], ranked: &[Vec<usize>], filter_known: bool, config: Vec<(String, String)>, started: Instant) -> EvalReport {
    let rows = templates
        .iter()
        .map(|&t| {
            let scores: Vec<_> = queries
                .iter()
                .zip(ranked)
                .filter(|(q, _)| q.template == t)
                .filter_map(|(q, r)| {
                    if filter_known {
                        let hard = q.hard();
                        if hard.is_empty() {
                            return None;
                        }
                        let r: Vec<usize> = r.iter().copied().filter(|i| !q.known.contains(i)).collect();
                        Some(score(&r, &hard))
                    } else {
                        Some(score(r, &q.gold))
                    }
                })
                .collect();
            TemplateStats::from_scores(t, &scores)
        })
        .collect();
    EvalReport {
        rows,
        config,
        wall_clock_secs: started.elapsed().as_secs_f64(),
    }
}

/// Everything a run produced, for follow-up evaluations on the same model.
pub struct BenchRun {
    pub split: KbSplit,
    pub store: TripleStore,
    pub families: Families,
    pub queries: Vec<GoldQuery>,
    pub report: EvalReport,
}

impl BenchRun {
    /// Re-evaluate the same queries and model under different settings.
    pub fn reevaluate(&self, cfg: &BenchConfig, eval: EvalConfig, filter_known: bool) -> Result<EvalReport> {
        let started = Instant::now();
        let ranked = rank_all(&self.store, &self.families, eval, &self.queries)?;
        let mut echo = cfg.echo();
        echo.push(("reevaluated".into(), format!("{eval:?}")));
        Ok(report(&cfg.templates, &self.queries, &ranked, filter_known, echo, started))
    }
}

/// Run the whole protocol on a KB.
pub fn run(cfg: &BenchConfig, triples: &[Triple], num_entities: usize, num_relations: usize) -> Result<BenchRun> {
    let split = split_for(cfg, triples, num_entities)?;
    run_with(cfg, split, num_entities, num_relations, None, None)
}

/// As `run` on a given split, reusing `embeddings` and `queries` when given.
pub fn run_with(
    cfg: &BenchConfig,
    split: KbSplit,
    num_entities: usize,
    num_relations: usize,
    embeddings: Option<Embeddings>,
    queries: Option<Vec<GoldQuery>>,
) -> Result<BenchRun> {
    let started = Instant::now();
    let emb = match embeddings {
        Some(e) => e,
        None => train_for(cfg, &split, num_entities, num_relations)?,
    };
    // Retrieval runs over the KB the model was trained on.
    let mut store = TripleStore::new(split.training.clone(), num_entities, num_relations)?;
    store.set_embeddings(emb)?;
    let families = Families::new(cfg.train.sketch, num_entities, num_relations)?;
    let queries = match queries {
        Some(q) => q,
        None => queries_for(cfg, &split, num_entities, num_relations),
    };
    let ranked = rank_all(&store, &families, cfg.eval_config(), &queries)?;
    let report = report(&cfg.templates, &queries, &ranked, cfg.filter_known, cfg.echo(), started);
    Ok(BenchRun {
        split,
        store,
        families,
        queries,
        report,
    })
}
