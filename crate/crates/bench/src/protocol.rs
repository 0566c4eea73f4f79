//! Splits and templated query generation.

use std::collections::{BTreeSet, HashSet};

use kbq_core::kbstore::{KbIndex, KbSplit, Triple};
use kbq_core::query::{symbolic_evaluate, Query, Template};
use kbq_core::{KbqError, Result};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum BenchMode {
    Entailment,
    Generalization,
}

impl BenchMode {
    pub fn name(self) -> &'static str {
        match self {
            BenchMode::Entailment => "entailment",
            BenchMode::Generalization => "generalization",
        }
    }
}

/// Seeded uniform holdout of `fraction` of the triples.
pub fn make_splits(triples: &[Triple], num_entities: usize, fraction: f64, seed: u64) -> Result<KbSplit> {
    if !(0.0..1.0).contains(&fraction) {
        return Err(KbqError::Config(format!("holdout fraction {fraction} outside [0, 1)")));
    }
    let mut order: Vec<usize> = (0..triples.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_held = (triples.len() as f64 * fraction).round() as usize;
    let held: HashSet<usize> = order[..n_held].iter().copied().collect();
    let training: Vec<Triple> = (0..triples.len()).filter(|i| !held.contains(i)).map(|i| triples[i]).collect();

    let touched = |ts: &[Triple]| {
        let mut seen = vec![false; num_entities];
        for t in ts {
            seen[t.subj] = true;
            seen[t.obj] = true;
        }
        seen
    };
    let before = touched(triples);
    let after = touched(&training);
    let orphaned = before.iter().zip(&after).filter(|(b, a)| **b && !**a).count();
    if orphaned > 0 {
        log::warn!("{orphaned} entities have no training triples after the split");
    }
    Ok(KbSplit {
        full: triples.to_vec(),
        training,
    })
}

/// A generated test query with its answers on both KBs.
#[derive(Debug, Clone, PartialEq)]
pub struct GoldQuery {
    pub template: Template,
    pub query: Query,
    /// Answers on the full KB.
    pub gold: BTreeSet<usize>,
    /// Answers derivable from the training KB alone.
    pub known: BTreeSet<usize>,
}

impl GoldQuery {
    pub fn new(query: Query, full: &KbIndex, training: &KbIndex) -> Result<Self> {
        let template = query
            .template()
            .ok_or_else(|| KbqError::QueryType("query does not match a benchmark template".into()))?;
        Ok(Self {
            template,
            gold: symbolic_evaluate(&query, full),
            known: symbolic_evaluate(&query, training),
            query,
        })
    }

    /// Answers that need a held-out triple.
    pub fn hard(&self) -> BTreeSet<usize> {
        self.gold.difference(&self.known).copied().collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GenOptions {
    pub mode: BenchMode,
    /// In generalization mode, require no overlap with training answers
    /// instead of a strict superset.
    pub disjoint: bool,
    pub attempts_per_query: usize,
}

impl Default for GenOptions {
    fn default() -> Self {
        Self {
            mode: BenchMode::Entailment,
            disjoint: false,
            attempts_per_query: 200,
        }
    }
}

/// Walk sampler over the full KB.
pub struct QueryGenerator<'a> {
    full: &'a KbIndex,
    training: &'a KbIndex,
    triples: &'a [Triple],
    /// Entities with at least two and three distinct incoming edges.
    in2: Vec<usize>,
    in3: Vec<usize>,
}

impl<'a> QueryGenerator<'a> {
    pub fn new(triples: &'a [Triple], full: &'a KbIndex, training: &'a KbIndex) -> Self {
        let indeg = |m: usize| (0..full.num_entities()).filter(|&e| full.incoming(e).len() >= m).collect();
        Self {
            full,
            training,
            triples,
            in2: indeg(2),
            in3: indeg(3),
        }
    }

    /// Extend a path from `x` by `hops` random outgoing edges.
    fn walk<R: Rng>(&self, rng: &mut R, mut x: usize, hops: usize, rels: &mut Vec<usize>) -> Option<usize> {
        for _ in 0..hops {
            let &(r, y) = self.full.outgoing(x).choose(rng)?;
            rels.push(r);
            x = y;
        }
        Some(x)
    }

    /// `m` distinct incoming `(rel, subj)` edges of a random entity.
    fn converge<R: Rng>(&self, rng: &mut R, m: usize) -> Option<(usize, Vec<(usize, usize)>)> {
        let pool = if m >= 3 { &self.in3 } else { &self.in2 };
        let &y = pool.choose(rng)?;
        let edges: Vec<(usize, usize)> = self.full.incoming(y).choose_multiple(rng, m).copied().collect();
        Some((y, edges))
    }

    fn sample<R: Rng>(&self, rng: &mut R, t: Template) -> Option<Query> {
        let mut rels = Vec::new();
        let (anchors, rels) = match t {
            Template::P1 | Template::P2 | Template::P3 => {
                let hops = match t {
                    Template::P1 => 1,
                    Template::P2 => 2,
                    _ => 3,
                };
                let start = self.triples.choose(rng)?;
                rels.push(start.rel);
                self.walk(rng, start.obj, hops - 1, &mut rels)?;
                (vec![start.subj], rels)
            }
            Template::I2 | Template::U2 | Template::I3 | Template::Ip | Template::Up => {
                let m = if t == Template::I3 { 3 } else { 2 };
                let (y, edges) = self.converge(rng, m)?;
                let anchors = edges.iter().map(|e| e.1).collect();
                rels.extend(edges.iter().map(|e| e.0));
                if matches!(t, Template::Ip | Template::Up) {
                    self.walk(rng, y, 1, &mut rels)?;
                }
                (anchors, rels)
            }
            Template::Pi => {
                let (_, edges) = self.converge(rng, 2)?;
                // First branch reaches y in two hops through one of its
                // incoming edges; the second is a direct edge into y.
                let (r2, m) = edges[0];
                let &(r1, x1) = self.full.incoming(m).choose(rng)?;
                let (r3, x2) = edges[1];
                (vec![x1, x2], vec![r1, r2, r3])
            }
        };
        t.instantiate(&anchors, &rels).ok()
    }

    fn acceptable(&self, g: &GoldQuery, opts: &GenOptions) -> bool {
        if g.gold.is_empty() {
            return false;
        }
        match opts.mode {
            BenchMode::Entailment => true,
            BenchMode::Generalization if opts.disjoint => g.gold.is_disjoint(&g.known),
            BenchMode::Generalization => g.gold.len() > g.known.len() && g.known.is_subset(&g.gold),
        }
    }

    /// Up to `n` distinct queries; fewer (with a warning) if the template is
    /// hard to satisfy on this KB.
    pub fn generate(&self, t: Template, n: usize, seed: u64, opts: &GenOptions) -> Vec<GoldQuery> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut seen = HashSet::new();
        let mut out = Vec::with_capacity(n);
        for _ in 0..n.saturating_mul(opts.attempts_per_query) {
            if out.len() == n {
                break;
            }
            let Some(q) = self.sample(&mut rng, t) else { continue };
            if seen.contains(&q) {
                continue;
            }
            let Ok(g) = GoldQuery::new(q.clone(), self.full, self.training) else { continue };
            seen.insert(q);
            if self.acceptable(&g, opts) {
                out.push(g);
            }
        }
        if out.len() < n {
            log::warn!("template {t}: generated {} of {n} queries", out.len());
        }
        out
    }
}

/// Per-template seed derived from a run seed.
pub fn template_seed(seed: u64, t: Template) -> u64 {
    seed ^ (0x9e37_79b9_7f4a_7c15u64.wrapping_mul(t as u64 + 1))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate, SynthConfig};

    fn kb() -> (usize, usize, Vec<Triple>) {
        let cfg = SynthConfig {
            num_entities: 300,
            num_relations: 8,
            num_types: 4,
            ..Default::default()
        };
        let (v, t) = generate(&cfg).unwrap();
        (v.num_entities(), v.num_relations(), t)
    }

    #[test]
    fn splits_are_seeded_and_partition_the_kb() {
        let (n, _, t) = kb();
        let a = make_splits(&t, n, 0.1, 4).unwrap();
        assert_eq!(a, make_splits(&t, n, 0.1, 4).unwrap());
        assert!(a.is_sound());
        let held = a.held_out();
        assert_eq!(held.len(), (t.len() as f64 * 0.1).round() as usize);
        let mut all: Vec<Triple> = a.training.iter().chain(&held).copied().collect();
        all.sort();
        let mut orig = t.clone();
        orig.sort();
        assert_eq!(all, orig);
        assert_ne!(a.training, make_splits(&t, n, 0.1, 5).unwrap().training);
        assert_eq!(make_splits(&t, n, 0.0, 1).unwrap().training, t);
        assert!(make_splits(&t, n, 1.0, 1).is_err());
    }

    #[test]
    fn entailment_gold_equals_training_gold() {
        let (n, nr, t) = kb();
        let idx = KbIndex::new(&t, n, nr);
        let g = QueryGenerator::new(&t, &idx, &idx);
        for tmpl in Template::ALL {
            let qs = g.generate(tmpl, 20, 3, &GenOptions::default());
            assert!(!qs.is_empty(), "{tmpl}");
            for q in qs {
                assert_eq!(q.template, tmpl);
                assert_eq!(q.gold, q.known);
                assert!(!q.gold.is_empty());
            }
        }
    }

    #[test]
    fn generalization_queries_need_held_out_triples() {
        let (n, nr, t) = kb();
        let split = make_splits(&t, n, 0.1, 2).unwrap();
        let full = KbIndex::new(&split.full, n, nr);
        let train = KbIndex::new(&split.training, n, nr);
        let g = QueryGenerator::new(&split.full, &full, &train);
        for disjoint in [false, true] {
            let opts = GenOptions {
                mode: BenchMode::Generalization,
                disjoint,
                ..Default::default()
            };
            for tmpl in [Template::P1, Template::P2, Template::I2] {
                let qs = g.generate(tmpl, 15, 9, &opts);
                assert!(!qs.is_empty());
                for q in qs {
                    // Recheck from scratch.
                    let gold = symbolic_evaluate(&q.query, &full);
                    let known = symbolic_evaluate(&q.query, &train);
                    assert!(known.is_subset(&gold) && gold.len() > known.len());
                    if disjoint {
                        assert!(known.is_empty());
                    }
                }
            }
        }
    }

    #[test]
    fn unsatisfiable_templates_return_fewer_queries() {
        // A single edge has no converging pairs.
        let t = vec![Triple::new(0, 0, 1)];
        let idx = KbIndex::new(&t, 2, 1);
        let g = QueryGenerator::new(&t, &idx, &idx);
        assert!(g.generate(Template::I2, 5, 0, &GenOptions::default()).is_empty());
        assert_eq!(g.generate(Template::P1, 5, 0, &GenOptions::default()).len(), 1);
    }
}
