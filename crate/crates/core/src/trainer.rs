//! Embedding training on relation-following and intersection tasks.
//!
//! Training examples are built from basic sets `{x | r(x, y)}`. The loss is
//! the cross-entropy between `softmax(E a_Y)` over all entities and the
//! normalised target weights. Gradients are derived by hand; the top-k
//! candidate selection inside relation following is treated as a constant.
//!
//! Master weights are kept in `f64` and exported as `f32` [`Embeddings`].

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::cms::WeightedSet;
use crate::error::{KbqError, Result};
use crate::kbstore::{Embeddings, KbIndex, KbSplit, Triple};
use crate::mips::select_top_k;
use crate::query::{symbolic_evaluate, Query};
use crate::setrep::{softmax, SketchParams};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainMode {
    /// Train on the full KB.
    Entailment,
    /// Train on the training split only.
    Generalization,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub dim: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub seed: u64,
    pub mode: TrainMode,
    /// Triples retrieved per follow example.
    pub k_triples: usize,
    pub lambda: f64,
    pub sketch: SketchParams,
    /// Basic sets larger than this are dropped.
    pub max_basic_set: usize,
    /// Fraction of each batch given to the follow task.
    pub follow_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            dim: 64,
            learning_rate: 0.1,
            momentum: 0.0,
            batch_size: 64,
            steps: 1000,
            seed: 0,
            mode: TrainMode::Entailment,
            k_triples: 1000,
            lambda: 1.0,
            sketch: SketchParams::default(),
            max_basic_set: 100,
            follow_fraction: 0.5,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(KbqError::Config(m.into()));
        if self.dim == 0 {
            return bad("dim must be at least 1");
        }
        if self.batch_size == 0 {
            return bad("batch size must be at least 1");
        }
        if self.k_triples == 0 {
            return bad("k_triples must be at least 1");
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return bad("learning rate must be positive");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum must be in [0, 1)");
        }
        if !(0.0..=1.0).contains(&self.follow_fraction) {
            return bad("follow fraction must be in [0, 1]");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BasicSet {
    pub rel: usize,
    pub tail: usize,
    pub members: Vec<usize>,
}

/// One basic set per `(r, y)` with at least one and at most `cap` members,
/// ordered by `(r, y)`.
pub fn generate_basic_sets(triples: &[Triple], cap: usize) -> Vec<BasicSet> {
    let mut groups: BTreeMap<(usize, usize), BTreeSet<usize>> = BTreeMap::new();
    for t in triples {
        groups.entry((t.rel, t.obj)).or_default().insert(t.subj);
    }
    groups
        .into_iter()
        .filter(|(_, m)| m.len() <= cap)
        .map(|((rel, tail), m)| BasicSet {
            rel,
            tail,
            members: m.into_iter().collect(),
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum TaskKind {
    Follow,
    Intersect,
}

impl TaskKind {
    pub fn name(self) -> &'static str {
        match self {
            TaskKind::Follow => "follow",
            TaskKind::Intersect => "intersect",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingExample {
    pub kind: TaskKind,
    pub query: Query,
    pub target: WeightedSet,
}

/// Dense `f64` entity and relation parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Params {
    pub num_entities: usize,
    pub num_relations: usize,
    pub dim: usize,
    pub entity: Vec<f64>,
    pub relation: Vec<f64>,
}

impl Params {
    pub fn zeros(num_entities: usize, num_relations: usize, dim: usize) -> Self {
        Self {
            num_entities,
            num_relations,
            dim,
            entity: vec![0.0; num_entities * dim],
            relation: vec![0.0; num_relations * dim],
        }
    }

    pub fn from_embeddings(e: &Embeddings) -> Self {
        let cast = |v: &[f32]| v.iter().map(|&x| x as f64).collect();
        Self {
            num_entities: e.num_entities(),
            num_relations: e.num_relations(),
            dim: e.dim(),
            entity: cast(e.entity.as_slice()),
            relation: cast(e.relation.as_slice()),
        }
    }

    pub fn to_embeddings(&self, seed: u64) -> Result<Embeddings> {
        let cast = |v: &[f64]| v.iter().map(|&x| x as f32).collect();
        Ok(Embeddings {
            entity: crate::mips::Matrix::from_vec(self.num_entities, self.dim, cast(&self.entity))?,
            relation: crate::mips::Matrix::from_vec(self.num_relations, self.dim, cast(&self.relation))?,
            seed,
        })
    }

    pub fn ent(&self, i: usize) -> &[f64] {
        &self.entity[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rel(&self, i: usize) -> &[f64] {
        &self.relation[i * self.dim..(i + 1) * self.dim]
    }

    fn ent_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.entity[i * self.dim..(i + 1) * self.dim]
    }

    fn rel_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.relation[i * self.dim..(i + 1) * self.dim]
    }

    /// All parameters, entities first.
    pub fn len(&self) -> usize {
        self.entity.len() + self.relation.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn get(&self, i: usize) -> f64 {
        if i < self.entity.len() {
            self.entity[i]
        } else {
            self.relation[i - self.entity.len()]
        }
    }

    pub fn set(&mut self, i: usize, v: f64) {
        if i < self.entity.len() {
            self.entity[i] = v;
        } else {
            let j = i - self.entity.len();
            self.relation[j] = v;
        }
    }

    fn add_scaled(&mut self, other: &Params, scale: f64) {
        for (a, b) in self.entity.iter_mut().zip(&other.entity) {
            *a += scale * b;
        }
        for (a, b) in self.relation.iter_mut().zip(&other.relation) {
            *a += scale * b;
        }
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

fn normalised_target(target: &WeightedSet, n: usize) -> Result<Vec<(usize, f64)>> {
    let total = target.total_weight();
    if target.is_empty() || total <= 0.0 {
        return Err(KbqError::EmptySet);
    }
    if target.universe() != n {
        return Err(KbqError::Shape(format!(
            "target over {} entities, parameters have {n}",
            target.universe()
        )));
    }
    Ok(target.iter().map(|(i, w)| (i, w as f64 / total)).collect())
}

/// Output distribution `softmax(E a)` over all entities.
fn output_distribution(a_hat: &[f64], params: &Params) -> Vec<f64> {
    let logits: Vec<f64> = (0..params.num_entities).map(|i| dot(params.ent(i), a_hat)).collect();
    softmax(&logits)
}

/// `-sum_i tau_i log p_i` with `p = softmax(E a)` and `tau = v / |v|_1`.
pub fn loss(a_hat: &[f64], target: &WeightedSet, params: &Params) -> Result<f64> {
    let tau = normalised_target(target, params.num_entities)?;
    let logits: Vec<f64> = (0..params.num_entities).map(|i| dot(params.ent(i), a_hat)).collect();
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
    Ok(tau.iter().map(|&(i, t)| t * (lse - logits[i])).sum())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TaskParams {
    pub k_triples: usize,
    pub lambda: f64,
}

/// Shape of a trainable example.
enum Plan<'a> {
    /// `a = sum_c coef_c sum_{x in X_c} E[x]`.
    Centroid(Vec<(f64, &'a [usize])>),
    Follow { subjects: &'a [usize], rels: &'a [usize] },
}

fn plan(q: &Query) -> Result<Plan<'_>> {
    let unsupported = || KbqError::QueryType("only basic sets, follow of a basic set and intersections of basic sets are trainable".into());
    match q {
        Query::Basic(xs) => Ok(Plan::Centroid(vec![(1.0, xs)])),
        Query::Follow(x, rs) => match x.as_ref() {
            Query::Basic(xs) => Ok(Plan::Follow { subjects: xs, rels: rs }),
            _ => Err(unsupported()),
        },
        Query::Intersect(cs) => {
            let mut terms = Vec::with_capacity(cs.len());
            for (i, c) in cs.iter().enumerate() {
                let Query::Basic(xs) = c else { return Err(unsupported()) };
                // Left fold of pairwise averages.
                let coef = 0.5f64.powi((cs.len() - i.max(1)) as i32);
                terms.push((coef, xs.as_slice()));
            }
            Ok(Plan::Centroid(terms))
        }
        _ => Err(unsupported()),
    }
}

fn set_weights(ids: &[usize]) -> BTreeMap<usize, f64> {
    let mut m = BTreeMap::new();
    for &i in ids {
        *m.entry(i).or_insert(0.0) += 1.0;
    }
    m
}

fn check_ids(ids: &[usize], n: usize, universe: crate::setrep::Universe) -> Result<()> {
    match ids.iter().find(|&&i| i >= n) {
        Some(&id) => Err(KbqError::QueryType(format!("{universe:?} id {id} out of range {n}"))),
        None => Ok(()),
    }
}

/// Forward pass: the output centroid of `q`.
pub fn forward(q: &Query, params: &Params, triples: &[Triple], tp: &TaskParams) -> Result<Vec<f64>> {
    Ok(forward_impl(q, params, triples, tp)?.0)
}

struct FollowTape {
    cands: Vec<usize>,
    probs: Vec<f64>,
    factors: Vec<f64>,
    a_x: Vec<f64>,
    a_r: Vec<f64>,
    xw: BTreeMap<usize, f64>,
    rw: BTreeMap<usize, f64>,
}

fn forward_impl(q: &Query, params: &Params, triples: &[Triple], tp: &TaskParams) -> Result<(Vec<f64>, Option<FollowTape>)> {
    let d = params.dim;
    match plan(q)? {
        Plan::Centroid(terms) => {
            let mut a = vec![0.0; d];
            for (coef, xs) in terms {
                check_ids(xs, params.num_entities, crate::setrep::Universe::Entities)?;
                for &x in xs {
                    axpy(&mut a, coef, params.ent(x));
                }
            }
            Ok((a, None))
        }
        Plan::Follow { subjects, rels } => {
            check_ids(subjects, params.num_entities, crate::setrep::Universe::Entities)?;
            check_ids(rels, params.num_relations, crate::setrep::Universe::Relations)?;
            let xw = set_weights(subjects);
            let rw = set_weights(rels);
            let mut a_x = vec![0.0; d];
            for (&x, &w) in &xw {
                axpy(&mut a_x, w, params.ent(x));
            }
            let mut a_r = vec![0.0; d];
            for (&r, &w) in &rw {
                axpy(&mut a_r, w, params.rel(r));
            }
            let rel_score: Vec<f64> = (0..params.num_relations).map(|r| dot(params.rel(r), &a_r)).collect();
            let ent_score: Vec<f64> = (0..params.num_entities).map(|e| dot(params.ent(e), &a_x)).collect();
            let z: Vec<f64> = triples
                .iter()
                .map(|t| tp.lambda * rel_score[t.rel] + ent_score[t.subj])
                .collect();
            let top = select_top_k(z, tp.k_triples);
            let probs = softmax(&top.scores);
            // Sketch lookups of a basic set equal its exact weights.
            let factors: Vec<f64> = top
                .ids
                .iter()
                .map(|&t| {
                    let tr = triples[t];
                    rw.get(&tr.rel).copied().unwrap_or(0.0) * xw.get(&tr.subj).copied().unwrap_or(0.0)
                })
                .collect();
            let mut a = vec![0.0; d];
            for ((&t, p), c) in top.ids.iter().zip(&probs).zip(&factors) {
                let s = c * p;
                if s != 0.0 {
                    axpy(&mut a, s, params.ent(triples[t].obj));
                }
            }
            Ok((
                a,
                Some(FollowTape {
                    cands: top.ids,
                    probs,
                    factors,
                    a_x,
                    a_r,
                    xw,
                    rw,
                }),
            ))
        }
    }
}

/// Loss of one example and its gradient with respect to every parameter.
pub fn loss_and_gradients(ex: &TrainingExample, params: &Params, triples: &[Triple], tp: &TaskParams) -> Result<(f64, Params)> {
    let d = params.dim;
    let n = params.num_entities;
    let tau = normalised_target(&ex.target, n)?;
    let (a_hat, tape) = forward_impl(&ex.query, params, triples, tp)?;
    let l = loss(&a_hat, &ex.target, params)?;

    let mut grad = Params::zeros(n, params.num_relations, d);
    // Output layer: g = p - tau.
    let mut g = output_distribution(&a_hat, params);
    for &(i, t) in &tau {
        g[i] -= t;
    }
    let mut h = vec![0.0; d];
    for (i, &gi) in g.iter().enumerate() {
        if gi != 0.0 {
            axpy(&mut h, gi, params.ent(i));
            axpy(grad.ent_mut(i), gi, &a_hat);
        }
    }

    match (plan(&ex.query)?, tape) {
        (Plan::Centroid(terms), _) => {
            for (coef, xs) in terms {
                for &x in xs {
                    axpy(grad.ent_mut(x), coef, &h);
                }
            }
        }
        (Plan::Follow { .. }, Some(tape)) => {
            // a_hat = sum_t c_t p_t E[y_t]
            let mut u = Vec::with_capacity(tape.cands.len());
            for ((&t, p), c) in tape.cands.iter().zip(&tape.probs).zip(&tape.factors) {
                let y = triples[t].obj;
                let s = c * p;
                if s != 0.0 {
                    axpy(grad.ent_mut(y), s, &h);
                }
                u.push(if *c != 0.0 { dot(params.ent(y), &h) } else { 0.0 });
            }
            let mean: f64 = tape
                .probs
                .iter()
                .zip(&tape.factors)
                .zip(&u)
                .map(|((p, c), u)| p * c * u)
                .sum();
            let mut d_ax = vec![0.0; d];
            let mut d_ar = vec![0.0; d];
            for (i, &t) in tape.cands.iter().enumerate() {
                let dz = tape.probs[i] * (tape.factors[i] * u[i] - mean);
                if dz == 0.0 {
                    continue;
                }
                let tr = triples[t];
                axpy(&mut d_ar, tp.lambda * dz, params.rel(tr.rel));
                axpy(grad.rel_mut(tr.rel), tp.lambda * dz, &tape.a_r);
                axpy(&mut d_ax, dz, params.ent(tr.subj));
                axpy(grad.ent_mut(tr.subj), dz, &tape.a_x);
            }
            for (&x, &w) in &tape.xw {
                axpy(grad.ent_mut(x), w, &d_ax);
            }
            for (&r, &w) in &tape.rw {
                axpy(grad.rel_mut(r), w, &d_ar);
            }
        }
        (Plan::Follow { .. }, None) => unreachable!("follow forward always records a tape"),
    }
    Ok((l, grad))
}

/// Per-step, per-task mean loss.
#[derive(Debug, Clone, PartialEq)]
pub struct LogRecord {
    pub step: usize,
    pub task: TaskKind,
    pub loss: f64,
}

impl std::fmt::Display for LogRecord {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}\t{}\t{:.6}", self.step, self.task.name(), self.loss)
    }
}

/// Sampler of follow and intersection examples over a fixed training KB.
pub struct ExampleSampler {
    basic: Vec<BasicSet>,
    /// Relations leaving some member, per basic set.
    out_rels: Vec<Vec<usize>>,
    /// Basic sets containing each entity.
    containing: Vec<Vec<usize>>,
    /// Basic sets that share a member with some other basic set.
    overlapping: Vec<usize>,
    index: KbIndex,
}

impl ExampleSampler {
    pub fn new(triples: &[Triple], num_entities: usize, num_relations: usize, max_basic_set: usize) -> Result<Self> {
        let index = KbIndex::new(triples, num_entities, num_relations);
        let basic = generate_basic_sets(triples, max_basic_set);
        if basic.is_empty() {
            return Err(KbqError::EmptyKb);
        }
        let out_rels = basic
            .iter()
            .map(|b| {
                b.members
                    .iter()
                    .flat_map(|&x| index.outgoing(x).iter().map(|p| p.0))
                    .collect::<BTreeSet<_>>()
                    .into_iter()
                    .collect()
            })
            .collect();
        let mut containing = vec![Vec::new(); num_entities];
        for (i, b) in basic.iter().enumerate() {
            for &x in &b.members {
                containing[x].push(i);
            }
        }
        let overlapping = (0..basic.len())
            .filter(|&i| basic[i].members.iter().any(|&x| containing[x].len() > 1))
            .collect();
        Ok(Self {
            basic,
            out_rels,
            containing,
            overlapping,
            index,
        })
    }

    pub fn basic_sets(&self) -> &[BasicSet] {
        &self.basic
    }

    pub fn has_intersections(&self) -> bool {
        !self.overlapping.is_empty()
    }

    fn example(&self, kind: TaskKind, query: Query) -> Result<TrainingExample> {
        let answer = symbolic_evaluate(&query, &self.index);
        let target = WeightedSet::from_ids(self.index.num_entities(), answer)?;
        Ok(TrainingExample { kind, query, target })
    }

    pub fn follow<R: Rng>(&self, rng: &mut R) -> Result<TrainingExample> {
        let i = rng.gen_range(0..self.basic.len());
        let rel = *self.out_rels[i].choose(rng).expect("members of a basic set have outgoing edges");
        let q = Query::Follow(Box::new(Query::Basic(self.basic[i].members.clone())), vec![rel]);
        self.example(TaskKind::Follow, q)
    }

    pub fn intersect<R: Rng>(&self, rng: &mut R) -> Result<TrainingExample> {
        let a = *self
            .overlapping
            .choose(rng)
            .ok_or_else(|| KbqError::Config("no overlapping basic sets to intersect".into()))?;
        let shared: Vec<usize> = self.basic[a]
            .members
            .iter()
            .copied()
            .filter(|&x| self.containing[x].len() > 1)
            .collect();
        let x = *shared.choose(rng).expect("overlapping set has a shared member");
        let others: Vec<usize> = self.containing[x].iter().copied().filter(|&b| b != a).collect();
        let b = *others.choose(rng).expect("shared member lies in another set");
        let q = Query::Intersect(vec![
            Query::Basic(self.basic[a].members.clone()),
            Query::Basic(self.basic[b].members.clone()),
        ]);
        self.example(TaskKind::Intersect, q)
    }
}

pub struct Trainer {
    cfg: TrainConfig,
    triples: Vec<Triple>,
    sampler: ExampleSampler,
    params: Params,
    velocity: Option<Params>,
    rng: ChaCha8Rng,
    step: usize,
}

/// Examples per parallel work unit; partial sums are combined in order.
const CHUNK: usize = 8;

impl Trainer {
    /// Trains on `split.full` in entailment mode, `split.training` otherwise.
    pub fn new(cfg: TrainConfig, split: &KbSplit, num_entities: usize, num_relations: usize) -> Result<Self> {
        cfg.validate()?;
        let triples = match cfg.mode {
            TrainMode::Entailment => split.full.clone(),
            TrainMode::Generalization => split.training.clone(),
        };
        if triples.is_empty() {
            return Err(KbqError::EmptyKb);
        }
        let sampler = ExampleSampler::new(&triples, num_entities, num_relations, cfg.max_basic_set)?;
        let init = Embeddings::random(num_entities, num_relations, cfg.dim, cfg.seed);
        Ok(Self {
            params: Params::from_embeddings(&init),
            velocity: (cfg.momentum > 0.0).then(|| Params::zeros(num_entities, num_relations, cfg.dim)),
            rng: ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7261_696e),
            triples,
            sampler,
            cfg,
            step: 0,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn params(&self) -> &Params {
        &self.params
    }

    pub fn triples(&self) -> &[Triple] {
        &self.triples
    }

    pub fn sampler(&self) -> &ExampleSampler {
        &self.sampler
    }

    pub fn steps_done(&self) -> usize {
        self.step
    }

    pub fn task_params(&self) -> TaskParams {
        TaskParams {
            k_triples: self.cfg.k_triples,
            lambda: self.cfg.lambda,
        }
    }

    pub fn embeddings(&self) -> Result<Embeddings> {
        self.params.to_embeddings(self.cfg.seed)
    }

    fn sample_batch(&mut self) -> Result<Vec<TrainingExample>> {
        let b = self.cfg.batch_size;
        let n_follow = if self.sampler.has_intersections() {
            (b as f64 * self.cfg.follow_fraction).round() as usize
        } else {
            b
        };
        let mut batch = Vec::with_capacity(b);
        for i in 0..b {
            batch.push(if i < n_follow {
                self.sampler.follow(&mut self.rng)?
            } else {
                self.sampler.intersect(&mut self.rng)?
            });
        }
        Ok(batch)
    }

    /// Mean loss per task over `examples` under the current parameters.
    pub fn evaluate_loss(&self, examples: &[TrainingExample]) -> Result<BTreeMap<TaskKind, f64>> {
        let tp = self.task_params();
        let mut acc: BTreeMap<TaskKind, (f64, usize)> = BTreeMap::new();
        for ex in examples {
            let (a, _) = forward_impl(&ex.query, &self.params, &self.triples, &tp)?;
            let e = acc.entry(ex.kind).or_default();
            e.0 += loss(&a, &ex.target, &self.params)?;
            e.1 += 1;
        }
        Ok(acc.into_iter().map(|(k, (s, c))| (k, s / c as f64)).collect())
    }

    /// One minibatch update. Returns the batch's mean loss per task.
    pub fn step(&mut self) -> Result<Vec<LogRecord>> {
        let batch = self.sample_batch()?;
        let tp = self.task_params();
        let (params, triples) = (&self.params, &self.triples);
        let partials: Vec<(Vec<(TaskKind, f64)>, Params)> = batch
            .par_chunks(CHUNK)
            .map(|chunk| {
                let mut sum = Params::zeros(params.num_entities, params.num_relations, params.dim);
                let mut losses = Vec::with_capacity(chunk.len());
                for ex in chunk {
                    let (l, g) = loss_and_gradients(ex, params, triples, &tp)?;
                    sum.add_scaled(&g, 1.0);
                    losses.push((ex.kind, l));
                }
                Ok((losses, sum))
            })
            .collect::<Result<_>>()?;

        let mut grad = Params::zeros(params.num_entities, params.num_relations, params.dim);
        let mut per_task: BTreeMap<TaskKind, (f64, usize)> = BTreeMap::new();
        for (losses, g) in &partials {
            grad.add_scaled(g, 1.0);
            for &(k, l) in losses {
                let e = per_task.entry(k).or_default();
                e.0 += l;
                e.1 += 1;
            }
        }
        let records: Vec<LogRecord> = per_task
            .into_iter()
            .map(|(task, (s, c))| LogRecord {
                step: self.step,
                task,
                loss: s / c as f64,
            })
            .collect();
        if let Some(bad) = records.iter().find(|r| !r.loss.is_finite()) {
            return Err(KbqError::Diverged {
                step: bad.step,
                task: bad.task.name().into(),
                loss: bad.loss,
            });
        }

        let scale = 1.0 / batch.len() as f64;
        match &mut self.velocity {
            Some(v) => {
                let mu = self.cfg.momentum;
                for (vi, gi) in v.entity.iter_mut().zip(&grad.entity) {
                    *vi = mu * *vi + scale * gi;
                }
                for (vi, gi) in v.relation.iter_mut().zip(&grad.relation) {
                    *vi = mu * *vi + scale * gi;
                }
                self.params.add_scaled(v, -self.cfg.learning_rate);
            }
            None => self.params.add_scaled(&grad, -self.cfg.learning_rate * scale),
        }
        if self.params.entity.iter().chain(&self.params.relation).any(|x| !x.is_finite()) {
            return Err(KbqError::Diverged {
                step: self.step,
                task: "update".into(),
                loss: f64::NAN,
            });
        }
        self.step += 1;
        Ok(records)
    }

    /// Run the remaining configured steps, reporting each log record.
    pub fn run(&mut self, mut log: impl FnMut(&LogRecord)) -> Result<()> {
        while self.step < self.cfg.steps {
            for r in self.step()? {
                log(&r);
            }
        }
        Ok(())
    }
}

/// Train with `cfg` and return the final embeddings.
pub fn train(cfg: TrainConfig, split: &KbSplit, num_entities: usize, num_relations: usize, log: impl FnMut(&LogRecord)) -> Result<Embeddings> {
    let mut t = Trainer::new(cfg, split, num_entities, num_relations)?;
    t.run(log)?;
    t.embeddings()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::setrep::{SetRep, Universe};

    fn tiny_kb(n: usize, nr: usize, t: usize, seed: u64) -> Vec<Triple> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let set: BTreeSet<Triple> = (0..t)
            .map(|_| Triple::new(rng.gen_range(0..nr), rng.gen_range(0..n), rng.gen_range(0..n)))
            .collect();
        set.into_iter().collect()
    }

    fn random_params(n: usize, nr: usize, d: usize, seed: u64) -> Params {
        Params::from_embeddings(&Embeddings::random(n, nr, d, seed))
    }

    #[test]
    fn basic_set_examples() {
        let kb = vec![Triple::new(0, 0, 2), Triple::new(0, 1, 2)];
        assert_eq!(
            generate_basic_sets(&kb, 100),
            vec![BasicSet {
                rel: 0,
                tail: 2,
                members: vec![0, 1]
            }]
        );
        let kb = vec![Triple::new(0, 0, 2), Triple::new(0, 1, 3), Triple::new(1, 0, 3)];
        assert!(generate_basic_sets(&kb, 100).iter().all(|b| b.members.len() == 1));
        let big: Vec<Triple> = (0..5).map(|s| Triple::new(0, s, 9)).collect();
        assert!(generate_basic_sets(&big, 4).is_empty());
    }

    #[test]
    fn intersection_pairs_overlap() {
        let kb = tiny_kb(30, 3, 150, 1);
        let s = ExampleSampler::new(&kb, 30, 3, 100).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..100 {
            let ex = s.intersect(&mut rng).unwrap();
            assert!(!ex.target.is_empty());
            let Query::Intersect(cs) = &ex.query else { panic!() };
            let sets: Vec<BTreeSet<usize>> = cs
                .iter()
                .map(|c| match c {
                    Query::Basic(xs) => xs.iter().copied().collect(),
                    _ => panic!(),
                })
                .collect();
            assert_ne!(sets[0], BTreeSet::new());
            assert!(!sets[0].is_disjoint(&sets[1]));
            let f = s.follow(&mut rng).unwrap();
            assert!(!f.target.is_empty());
        }
    }

    #[test]
    fn loss_examples() {
        let p = random_params(1, 1, 3, 4);
        let t = WeightedSet::from_ids(1, [0]).unwrap();
        assert_eq!(loss(&[0.3, -0.2, 0.9], &t, &p).unwrap(), 0.0);

        let p = random_params(7, 1, 3, 4);
        let uniform = WeightedSet::from_ids(7, 0..7).unwrap();
        let l = loss(&[0.0; 3], &uniform, &p).unwrap();
        assert!((l - 7f64.ln()).abs() < 1e-12);
        assert!(loss(&[0.0; 3], &WeightedSet::new(7), &p).is_err());
    }

    #[test]
    fn loss_matches_direct_formula() {
        let p = random_params(6, 1, 3, 9);
        let a = [0.7, -1.1, 0.4];
        let target = WeightedSet::from_pairs(6, [(1, 2.0), (4, 1.0)]).unwrap();
        // Direct evaluation without log-sum-exp.
        let exps: Vec<f64> = (0..6)
            .map(|i| {
                let row = p.ent(i);
                (row[0] * a[0] + row[1] * a[1] + row[2] * a[2]).exp()
            })
            .collect();
        let z: f64 = exps.iter().sum();
        let want = -(2.0 / 3.0) * (exps[1] / z).ln() - (1.0 / 3.0) * (exps[4] / z).ln();
        assert!((loss(&a, &target, &p).unwrap() - want).abs() < 1e-6);
    }

    #[test]
    fn zero_output_gradient_when_prediction_matches_target() {
        // Two entities with identical rows: p is uniform, matching a uniform target.
        let mut p = Params::zeros(2, 1, 2);
        p.entity = vec![0.5, 0.5, 0.5, 0.5];
        let ex = TrainingExample {
            kind: TaskKind::Intersect,
            query: Query::Intersect(vec![Query::Basic(vec![0]), Query::Basic(vec![1])]),
            target: WeightedSet::from_ids(2, [0, 1]).unwrap(),
        };
        let tp = TaskParams { k_triples: 10, lambda: 1.0 };
        let (_, g) = loss_and_gradients(&ex, &p, &[], &tp).unwrap();
        assert!(g.entity.iter().all(|&x| x.abs() < 1e-15));
    }

    #[test]
    fn off_path_entities_only_see_the_partition_term() {
        let kb = tiny_kb(10, 2, 30, 3);
        let p = random_params(10, 2, 4, 5);
        let tp = TaskParams { k_triples: 100, lambda: 1.0 };
        let ex = TrainingExample {
            kind: TaskKind::Intersect,
            query: Query::Intersect(vec![Query::Basic(vec![0, 1]), Query::Basic(vec![1, 2])]),
            target: WeightedSet::from_ids(10, [1]).unwrap(),
        };
        let (_, g) = loss_and_gradients(&ex, &p, &kb, &tp).unwrap();
        let a = forward(&ex.query, &p, &kb, &tp).unwrap();
        let probs = output_distribution(&a, &p);
        for i in 3..10 {
            for j in 0..4 {
                assert!((g.ent(i)[j] - probs[i] * a[j]).abs() < 1e-12);
            }
        }
    }

    fn finite_difference_check(ex: &TrainingExample, kb: &[Triple], p: &Params, tp: &TaskParams, seed: u64) -> f64 {
        let (_, g) = loss_and_gradients(ex, p, kb, tp).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let h = 1e-4;
        let mut worst = 0.0f64;
        for _ in 0..20 {
            let i = rng.gen_range(0..p.len());
            let f = |v: f64| {
                let mut q = p.clone();
                q.set(i, v);
                let a = forward(&ex.query, &q, kb, tp).unwrap();
                loss(&a, &ex.target, &q).unwrap()
            };
            let x = p.get(i);
            let fd = (f(x + h) - f(x - h)) / (2.0 * h);
            let an = g.get(i);
            worst = worst.max((an - fd).abs() / (an.abs() + 1e-8));
        }
        worst
    }

    #[test]
    fn gradients_match_finite_differences() {
        let kb = tiny_kb(10, 3, 40, 7);
        let s = ExampleSampler::new(&kb, 10, 3, 100).unwrap();
        let p = random_params(10, 3, 4, 8);
        let tp = TaskParams {
            k_triples: kb.len(),
            lambda: 1.0,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for seed in 0..5 {
            let f = s.follow(&mut rng).unwrap();
            assert!(finite_difference_check(&f, &kb, &p, &tp, seed) < 1e-3);
            let i = s.intersect(&mut rng).unwrap();
            assert!(finite_difference_check(&i, &kb, &p, &tp, seed) < 1e-3);
        }
        let tp = TaskParams {
            k_triples: kb.len(),
            lambda: 0.1,
        };
        let f = s.follow(&mut rng).unwrap();
        assert!(finite_difference_check(&f, &kb, &p, &tp, 99) < 1e-3);
    }

    fn tiny_split() -> (KbSplit, usize, usize) {
        (KbSplit::entailment(tiny_kb(50, 4, 200, 11)), 50, 4)
    }

    fn small_cfg() -> TrainConfig {
        TrainConfig {
            dim: 16,
            batch_size: 16,
            steps: 100,
            seed: 3,
            ..Default::default()
        }
    }

    #[test]
    fn zero_steps_keep_initialisation() {
        let (split, n, nr) = tiny_split();
        let cfg = TrainConfig { steps: 0, ..small_cfg() };
        let emb = train(cfg.clone(), &split, n, nr, |_| {}).unwrap();
        assert_eq!(emb, Embeddings::random(n, nr, cfg.dim, cfg.seed));
    }

    #[test]
    fn training_is_deterministic() {
        let (split, n, nr) = tiny_split();
        let cfg = TrainConfig { steps: 20, ..small_cfg() };
        let a = train(cfg.clone(), &split, n, nr, |_| {}).unwrap();
        let b = train(cfg, &split, n, nr, |_| {}).unwrap();
        assert_eq!(a.to_bytes(), b.to_bytes());
    }

    #[test]
    fn probe_loss_decreases_over_first_100_steps() {
        let (split, n, nr) = tiny_split();
        let mut t = Trainer::new(small_cfg(), &split, n, nr).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let probe: Vec<TrainingExample> = (0..32)
            .map(|i| {
                if i % 2 == 0 {
                    t.sampler().follow(&mut rng).unwrap()
                } else {
                    t.sampler().intersect(&mut rng).unwrap()
                }
            })
            .collect();
        let mean = |t: &Trainer| t.evaluate_loss(&probe).unwrap().values().sum::<f64>();
        let mut last = mean(&t);
        for _ in 0..4 {
            for _ in 0..25 {
                t.step().unwrap();
            }
            let now = mean(&t);
            assert!(now < last, "{now} !< {last}");
            last = now;
        }
    }

    #[test]
    fn basic_set_decode_recall_improves() {
        let (split, n, nr) = tiny_split();
        let mut t = Trainer::new(small_cfg(), &split, n, nr).unwrap();
        let families = crate::setrep::Families::new(SketchParams::default(), n, nr).unwrap();
        let sets: Vec<BasicSet> = t.sampler().basic_sets().iter().filter(|b| b.members.len() > 1).cloned().collect();
        let recall = |t: &Trainer| {
            let emb = t.embeddings().unwrap();
            let mut hit = 0usize;
            let mut total = 0usize;
            for b in &sets {
                let ws = WeightedSet::from_ids(n, b.members.iter().copied()).unwrap();
                let rep = SetRep::encode(&ws, &emb.entity, &families.entities, Universe::Entities).unwrap();
                let got = rep.decode_ranked(&emb.entity, 10 * b.members.len()).unwrap();
                hit += got.len();
                total += b.members.len();
            }
            hit as f64 / total as f64
        };
        let mut last = recall(&t);
        for _ in 0..3 {
            for _ in 0..50 {
                t.step().unwrap();
            }
            let now = recall(&t);
            assert!(now >= last, "{now} < {last}");
            last = now;
        }
    }

    #[test]
    fn divergence_is_reported() {
        let (split, n, nr) = tiny_split();
        let cfg = TrainConfig {
            learning_rate: 1e30,
            ..small_cfg()
        };
        let mut t = Trainer::new(cfg, &split, n, nr).unwrap();
        let err = (0..10).find_map(|_| t.step().err()).unwrap();
        assert!(matches!(err, KbqError::Diverged { .. }));
    }

    #[test]
    fn rejects_bad_configs() {
        let (split, n, nr) = tiny_split();
        for cfg in [
            TrainConfig { dim: 0, ..small_cfg() },
            TrainConfig { batch_size: 0, ..small_cfg() },
            TrainConfig { momentum: 1.0, ..small_cfg() },
        ] {
            assert!(matches!(Trainer::new(cfg, &split, n, nr), Err(KbqError::Config(_))));
        }
    }
}
