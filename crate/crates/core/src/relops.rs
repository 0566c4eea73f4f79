//! Relation following and relational filtering by retrieval over the triple
//! matrix `K`.
//!
//! Both operators build a query vector against `K`, take the top-k triples,
//! re-score each retrieved triple `r_i(x_j, y_l)` with the input sketches and
//! a softmax over the retrieved scores, then sum the scores per object
//! (follow) or per subject (filter). The sparse result is re-encoded as a
//! [`SetRep`] so operators compose without decoding intermediate sets.

use std::collections::BTreeMap;

use crate::cms::WeightedSet;
use crate::error::{KbqError, Result};
use crate::kbstore::TripleStore;
use crate::mips::MipsBackend;
use crate::setrep::{softmax, Families, SetRep, SketchMode, Universe};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RelOpConfig {
    /// Number of triples retrieved per operator.
    pub k_triples: usize,
    /// Scale applied to the relation block of the query.
    pub lambda: f32,
    /// Sketch attached to operator outputs.
    pub sketch_mode: SketchMode,
}

impl Default for RelOpConfig {
    fn default() -> Self {
        Self {
            k_triples: 1000,
            lambda: 1.0,
            sketch_mode: SketchMode::Exact,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TripleQueryMode {
    Follow,
    Filter,
}

/// Query vector against `K`: `[lambda a_R; a_X; 0]` for follow,
/// `[lambda a_R; a_X; a_Y]` for filter.
#[derive(Debug, Clone, PartialEq)]
pub struct TripleQuery {
    pub vector: Vec<f32>,
    pub mode: TripleQueryMode,
    pub lambda: f32,
}

impl TripleQuery {
    pub fn follow(rels: &[f32], subjects: &[f32], lambda: f32) -> Self {
        let d = subjects.len();
        let mut vector = Vec::with_capacity(3 * d);
        vector.extend(rels.iter().map(|&r| lambda * r));
        vector.extend_from_slice(subjects);
        vector.resize(3 * d, 0.0);
        Self {
            vector,
            mode: TripleQueryMode::Follow,
            lambda,
        }
    }

    pub fn filter(rels: &[f32], subjects: &[f32], objects: &[f32], lambda: f32) -> Self {
        let mut vector = Vec::with_capacity(3 * subjects.len());
        vector.extend(rels.iter().map(|&r| lambda * r));
        vector.extend_from_slice(subjects);
        vector.extend_from_slice(objects);
        Self {
            vector,
            mode: TripleQueryMode::Filter,
            lambda,
        }
    }
}

/// A retrieved triple with its re-scoring terms.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoredTriple {
    pub triple: usize,
    pub rel: usize,
    pub subj: usize,
    pub obj: usize,
    /// `q^T r_t`.
    pub logit: f64,
    /// Softmax of the logit over the retrieved candidates.
    pub prob: f64,
    /// Product of the sketch lookups.
    pub sketch_factor: f64,
    /// `sketch_factor * prob`.
    pub score: f64,
}

fn expect(rep: &SetRep, universe: Universe, what: &str) -> Result<()> {
    if rep.universe != universe {
        return Err(KbqError::QueryType(format!(
            "{what} must be a set of {universe:?}, got {:?}",
            rep.universe
        )));
    }
    Ok(())
}

/// Retrieve and score triples for a follow (`objects = None`) or filter query.
pub fn retrieve(
    subjects: &SetRep,
    rels: &SetRep,
    objects: Option<&SetRep>,
    store: &TripleStore,
    cfg: &RelOpConfig,
) -> Result<Vec<ScoredTriple>> {
    expect(subjects, Universe::Entities, "subject set")?;
    expect(rels, Universe::Relations, "relation set")?;
    if let Some(o) = objects {
        expect(o, Universe::Entities, "object set")?;
    }
    let query = match objects {
        None => TripleQuery::follow(&rels.centroid, &subjects.centroid, cfg.lambda),
        Some(o) => TripleQuery::filter(&rels.centroid, &subjects.centroid, &o.centroid, cfg.lambda),
    };
    let index = store.triple_index()?;
    if index.dim() != query.vector.len() {
        return Err(KbqError::Shape(format!(
            "triple query of dimension {} against K with {} columns",
            query.vector.len(),
            index.dim()
        )));
    }
    let top = index.search(&query.vector, cfg.k_triples)?;
    let probs = softmax(&top.scores);
    let triples = store.triples();
    Ok(top
        .iter()
        .zip(probs)
        .map(|((t, logit), prob)| {
            let tr = triples[t];
            let mut sketch_factor = rels.sketch.lookup_unchecked(tr.rel) as f64
                * subjects.sketch.lookup_unchecked(tr.subj) as f64;
            if let Some(o) = objects {
                sketch_factor *= o.sketch.lookup_unchecked(tr.obj) as f64;
            }
            ScoredTriple {
                triple: t,
                rel: tr.rel,
                subj: tr.subj,
                obj: tr.obj,
                logit,
                prob,
                sketch_factor,
                score: sketch_factor * prob,
            }
        })
        .collect())
}

/// Sum scores per key, dropping zero totals.
fn aggregate(scored: &[ScoredTriple], key: impl Fn(&ScoredTriple) -> usize, universe: usize) -> Result<WeightedSet> {
    let mut acc: BTreeMap<usize, f64> = BTreeMap::new();
    for s in scored.iter().filter(|s| s.score > 0.0) {
        *acc.entry(key(s)).or_default() += s.score;
    }
    WeightedSet::from_pairs(universe, acc.into_iter().map(|(i, w)| (i, w as f32)))
}

/// Re-encode a sparse operator output; all-zero input gives the empty set.
pub fn reencode(v: &WeightedSet, store: &TripleStore, families: &Families, mode: SketchMode) -> Result<SetRep> {
    SetRep::encode_with(v, &store.embeddings()?.entity, &families.entities, Universe::Entities, mode)
}

/// `X.follow(R) = { y | exists r in R, x in X : r(x, y) }`.
pub fn follow(
    subjects: &SetRep,
    rels: &SetRep,
    store: &TripleStore,
    families: &Families,
    cfg: &RelOpConfig,
) -> Result<SetRep> {
    let scored = retrieve(subjects, rels, None, store, cfg)?;
    let v = aggregate(&scored, |s| s.obj, store.num_entities())?;
    reencode(&v, store, families, cfg.sketch_mode)
}

/// `X.filter(R, Y) = { x in X | exists r in R, y in Y : r(x, y) }`.
pub fn filter(
    subjects: &SetRep,
    rels: &SetRep,
    objects: &SetRep,
    store: &TripleStore,
    families: &Families,
    cfg: &RelOpConfig,
) -> Result<SetRep> {
    let scored = retrieve(subjects, rels, Some(objects), store, cfg)?;
    let v = aggregate(&scored, |s| s.subj, store.num_entities())?;
    reencode(&v, store, families, cfg.sketch_mode)
}
