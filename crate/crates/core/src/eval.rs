//! Bottom-up evaluation of query ASTs over set representations.

use rayon::prelude::*;

use crate::cms::WeightedSet;
use crate::error::{KbqError, Result};
use crate::kbstore::TripleStore;
use crate::query::Query;
use crate::relops::{self, RelOpConfig};
use crate::setrep::{Families, SetRep, SketchMode, Universe};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalConfig {
    /// Candidates retrieved when decoding the final answer.
    pub k: usize,
    /// Retrieval settings for follow and filter. Its `sketch_mode` applies to
    /// every intermediate result, including encoded anchors.
    pub relops: RelOpConfig,
    /// Sketch attached to the outermost result before decoding.
    pub final_sketch: SketchMode,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self::entailment()
    }
}

impl EvalConfig {
    /// Exact sketches throughout.
    pub fn entailment() -> Self {
        Self {
            k: 1000,
            relops: RelOpConfig::default(),
            final_sketch: SketchMode::Exact,
        }
    }

    /// Exact intermediate sketches, vacuous final sketch.
    pub fn generalization() -> Self {
        Self {
            final_sketch: SketchMode::Vacuous,
            ..Self::entailment()
        }
    }

    /// Vacuous sketches everywhere.
    pub fn without_sketches() -> Self {
        let mut cfg = Self::generalization();
        cfg.relops.sketch_mode = SketchMode::Vacuous;
        cfg
    }

    pub fn with_k(mut self, k: usize) -> Self {
        self.k = k;
        self
    }

    pub fn with_k_triples(mut self, k: usize) -> Self {
        self.relops.k_triples = k;
        self
    }

    pub fn with_lambda(mut self, lambda: f32) -> Self {
        self.relops.lambda = lambda;
        self
    }
}

pub struct Evaluator<'a> {
    store: &'a TripleStore,
    families: &'a Families,
    cfg: EvalConfig,
}

impl<'a> Evaluator<'a> {
    pub fn new(store: &'a TripleStore, families: &'a Families, cfg: EvalConfig) -> Self {
        Self { store, families, cfg }
    }

    pub fn config(&self) -> &EvalConfig {
        &self.cfg
    }

    fn encode(&self, ids: &[usize], universe: Universe) -> Result<SetRep> {
        let emb = self.store.embeddings()?;
        let (matrix, n) = match universe {
            Universe::Entities => (&emb.entity, self.store.num_entities()),
            Universe::Relations => (&emb.relation, self.store.num_relations()),
        };
        let set = WeightedSet::from_ids(n, ids.iter().copied())?;
        SetRep::encode_with(&set, matrix, self.families.get(universe), universe, self.cfg.relops.sketch_mode)
    }

    /// Representation of `q` with intermediate sketches only (no final swap).
    pub fn represent(&self, q: &Query) -> Result<SetRep> {
        let fold = |cs: &[Query], op: fn(&SetRep, &SetRep) -> Result<SetRep>| -> Result<SetRep> {
            let (first, rest) = cs
                .split_first()
                .ok_or_else(|| KbqError::QueryType("set operator without arguments".into()))?;
            rest.iter().try_fold(self.represent(first)?, |acc, c| op(&acc, &self.represent(c)?))
        };
        match q {
            Query::Basic(es) => {
                if es.is_empty() {
                    return Err(KbqError::QueryType("basic set without anchors".into()));
                }
                self.encode(es, Universe::Entities)
            }
            Query::Follow(x, rs) => relops::follow(
                &self.represent(x)?,
                &self.encode(rs, Universe::Relations)?,
                self.store,
                self.families,
                &self.cfg.relops,
            ),
            Query::Filter(x, rs, y) => relops::filter(
                &self.represent(x)?,
                &self.encode(rs, Universe::Relations)?,
                &self.represent(y)?,
                self.store,
                self.families,
                &self.cfg.relops,
            ),
            Query::Intersect(cs) => fold(cs, SetRep::intersect),
            Query::Union(cs) => fold(cs, SetRep::union),
            Query::Difference(a, b) => self.represent(a)?.difference(&self.represent(b)?),
        }
    }

    /// Final representation, with the final sketch mode applied.
    pub fn final_rep(&self, q: &Query) -> Result<SetRep> {
        let rep = self.represent(q)?;
        Ok(match self.cfg.final_sketch {
            SketchMode::Exact => rep,
            SketchMode::Vacuous => rep.with_vacuous_sketch(),
        })
    }

    /// Ranked answers: weight descending, id ascending on ties.
    pub fn evaluate(&self, q: &Query) -> Result<Vec<(usize, f64)>> {
        self.final_rep(q)?.decode_ranked(&self.store.embeddings()?.entity, self.cfg.k)
    }

    pub fn evaluate_batch(&self, qs: &[Query]) -> Result<Vec<Vec<(usize, f64)>>> {
        qs.par_iter().map(|q| self.evaluate(q)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kbstore::{parse_kb, Embeddings, IngestOptions, KbIndex, Triple, Vocab};
    use crate::query::{parse_query, symbolic_evaluate, Template};
    use crate::setrep::SketchParams;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::collections::BTreeSet;

    fn localist(triples: Vec<Triple>, n: usize, nr: usize) -> (TripleStore, Families, KbIndex) {
        let idx = KbIndex::new(&triples, n, nr);
        let mut store = TripleStore::new(triples, n, nr).unwrap();
        store.set_embeddings(Embeddings::localist(n, nr).unwrap()).unwrap();
        let families = Families::new(SketchParams::default(), n, nr).unwrap();
        (store, families, idx)
    }

    fn support(ranked: &[(usize, f64)]) -> BTreeSet<usize> {
        ranked.iter().map(|p| p.0).collect()
    }

    #[test]
    fn apple_headquarters_ranks_cupertino_first() {
        let text = "Apple_Inc\theadquarters_of\tCupertino\nGoogle\theadquarters_of\tMountain_View\n";
        let (vocab, triples): (Vocab, _) = parse_kb(text.as_bytes(), &IngestOptions::default()).unwrap();
        let (store, families, _) = localist(triples, vocab.num_entities(), vocab.num_relations());
        let q = parse_query("(follow (basic e:Apple_Inc) (rel r:headquarters_of))", &vocab).unwrap();
        for cfg in [EvalConfig::entailment(), EvalConfig::generalization()] {
            let ranked = Evaluator::new(&store, &families, cfg).evaluate(&q).unwrap();
            assert_eq!(vocab.entity_name(ranked[0].0), "Cupertino");
        }
    }

    #[test]
    fn every_template_is_exact_in_localist_mode() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (n, nr) = (20, 5);
        let mut triples: Vec<Triple> = (0..80)
            .map(|_| Triple::new(rng.gen_range(0..nr), rng.gen_range(0..n), rng.gen_range(0..n)))
            .collect();
        triples.sort();
        triples.dedup();
        let t = triples.len();
        let (store, families, idx) = localist(triples, n, nr);
        let ev = Evaluator::new(&store, &families, EvalConfig::entailment().with_k(n).with_k_triples(t));
        for tmpl in Template::ALL {
            let (na, nrel) = tmpl.arity();
            for _ in 0..30 {
                let anchors: Vec<usize> = (0..na).map(|_| rng.gen_range(0..n)).collect();
                let rels: Vec<usize> = (0..nrel).map(|_| rng.gen_range(0..nr)).collect();
                let q = tmpl.instantiate(&anchors, &rels).unwrap();
                assert_eq!(support(&ev.evaluate(&q).unwrap()), symbolic_evaluate(&q, &idx), "{tmpl}");
            }
        }
    }

    #[test]
    fn filter_and_difference_are_exact_in_localist_mode() {
        let text = "c1\thq\tcup\nc2\thq\tmv\nc3\tfounded\tcup\ncup\tin\tca\n";
        let (vocab, triples) = parse_kb(text.as_bytes(), &IngestOptions::default()).unwrap();
        let t = triples.len();
        let (store, families, idx) = localist(triples, vocab.num_entities(), vocab.num_relations());
        let ev = Evaluator::new(&store, &families, EvalConfig::entailment().with_k(vocab.num_entities()).with_k_triples(t));
        for src in [
            "(filter (basic e:c1 e:c2 e:c3) (rel r:hq) (basic e:cup))",
            "(filter (basic e:c1 e:c2 e:c3) (rel r:hq r:founded) (follow (basic e:cup) (rel r:in)))",
            "(difference (basic e:c1 e:c2 e:c3) (filter (basic e:c1 e:c2 e:c3) (rel r:hq) (basic e:cup)))",
            "(union (basic e:c1) (basic e:c2) (basic e:c3))",
            "(intersect (basic e:c1 e:c2) (basic e:c2 e:c3) (basic e:c2))",
        ] {
            let q = parse_query(src, &vocab).unwrap();
            assert_eq!(support(&ev.evaluate(&q).unwrap()), symbolic_evaluate(&q, &idx), "{src}");
        }
    }

    #[test]
    fn entailment_answers_lie_in_generalization_support() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let (n, nr) = (30, 4);
        let triples: Vec<Triple> = (0..90)
            .map(|_| Triple::new(rng.gen_range(0..nr), rng.gen_range(0..n), rng.gen_range(0..n)))
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        let mut store = TripleStore::new(triples, n, nr).unwrap();
        store.set_embeddings(Embeddings::random(n, nr, 8, 3)).unwrap();
        let families = Families::new(SketchParams::default(), n, nr).unwrap();
        let ent = Evaluator::new(&store, &families, EvalConfig::entailment().with_k(10));
        let gen = Evaluator::new(&store, &families, EvalConfig::generalization().with_k(10));
        for _ in 0..50 {
            let q = Template::P2
                .instantiate(&[rng.gen_range(0..n)], &[rng.gen_range(0..nr), rng.gen_range(0..nr)])
                .unwrap();
            let e = support(&ent.evaluate(&q).unwrap());
            let g = support(&gen.evaluate(&q).unwrap());
            assert!(e.is_subset(&g));
        }
    }

    #[test]
    fn malformed_ast_is_a_type_error() {
        let (store, families, _) = localist(vec![Triple::new(0, 0, 1)], 2, 1);
        let ev = Evaluator::new(&store, &families, EvalConfig::default());
        assert!(matches!(ev.evaluate(&Query::Intersect(vec![])), Err(KbqError::QueryType(_))));
        assert!(matches!(ev.evaluate(&Query::Basic(vec![])), Err(KbqError::QueryType(_))));
        assert!(ev.evaluate(&Query::basic(7)).is_err());
    }
}
