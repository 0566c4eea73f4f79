//! Centroid-sketch set representations.
//!
//! A weighted set `X` is represented by the pair `(a_X, b_X)`: the centroid
//! `a_X = sum_i v_X[i] e_i` locates the region of embedding space holding the
//! set, and the count-min sketch `b_X` stores the exact member weights.
//! Decoding retrieves the `k` rows nearest the centroid and re-weights them
//! by the sketch.

use std::sync::Arc;

use crate::cms::{CountMinSketch, HashFamily, WeightedSet};
use crate::error::{KbqError, Result};
use crate::mips::{self, Matrix};

/// Which id space a set lives in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Universe {
    Entities,
    Relations,
}

/// Whether sets carry exact sketches or the all-ones vacuous sketch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SketchMode {
    #[default]
    Exact,
    Vacuous,
}

/// Sketch shape shared by all sets of one engine.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SketchParams {
    pub seed: u64,
    pub depth: usize,
    pub width: usize,
}

impl Default for SketchParams {
    fn default() -> Self {
        Self {
            seed: 0x5eed,
            depth: 20,
            width: 2000,
        }
    }
}

/// Hash families for the entity and relation universes.
#[derive(Debug, Clone)]
pub struct Families {
    pub entities: Arc<HashFamily>,
    pub relations: Arc<HashFamily>,
}

impl Families {
    pub fn new(params: SketchParams, num_entities: usize, num_relations: usize) -> Result<Self> {
        Ok(Self {
            entities: Arc::new(HashFamily::new(params.seed, params.depth, params.width, num_entities)?),
            relations: Arc::new(HashFamily::new(params.seed, params.depth, params.width, num_relations)?),
        })
    }

    pub fn get(&self, universe: Universe) -> &Arc<HashFamily> {
        match universe {
            Universe::Entities => &self.entities,
            Universe::Relations => &self.relations,
        }
    }
}

/// `(centroid, sketch)` pair.
#[derive(Debug, Clone, PartialEq)]
pub struct SetRep {
    pub centroid: Vec<f32>,
    pub sketch: CountMinSketch,
    pub universe: Universe,
}

/// Weighted sum of embedding rows, accumulated in `f64`.
pub fn weighted_centroid(set: &WeightedSet, embeddings: &Matrix) -> Vec<f32> {
    let mut acc = vec![0.0f64; embeddings.cols()];
    for (id, w) in set.iter() {
        for (a, &e) in acc.iter_mut().zip(embeddings.row(id)) {
            *a += w as f64 * e as f64;
        }
    }
    acc.into_iter().map(|x| x as f32).collect()
}

/// Numerically stable softmax over a slice of scores.
pub fn softmax(scores: &[f64]) -> Vec<f64> {
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if scores.is_empty() || !max.is_finite() {
        return vec![0.0; scores.len()];
    }
    let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

impl SetRep {
    /// Centroid and exact sketch of a non-empty set.
    pub fn encode(
        set: &WeightedSet,
        embeddings: &Matrix,
        family: &Arc<HashFamily>,
        universe: Universe,
    ) -> Result<Self> {
        if set.is_empty() {
            return Err(KbqError::EmptySet);
        }
        check_universe(set, embeddings, family)?;
        Ok(Self {
            centroid: weighted_centroid(set, embeddings),
            sketch: CountMinSketch::from_set(set, Arc::clone(family))?,
            universe,
        })
    }

    /// Like [`Self::encode`] but an empty set becomes [`Self::empty`] and the
    /// sketch follows `mode`.
    pub fn encode_with(
        set: &WeightedSet,
        embeddings: &Matrix,
        family: &Arc<HashFamily>,
        universe: Universe,
        mode: SketchMode,
    ) -> Result<Self> {
        if set.is_empty() {
            check_universe(set, embeddings, family)?;
            return Ok(Self::empty(embeddings.cols(), family, universe));
        }
        let rep = Self::encode(set, embeddings, family, universe)?;
        Ok(match mode {
            SketchMode::Exact => rep,
            SketchMode::Vacuous => rep.with_vacuous_sketch(),
        })
    }

    /// Zero centroid and all-zero sketch; decodes to the empty set.
    pub fn empty(dim: usize, family: &Arc<HashFamily>, universe: Universe) -> Self {
        Self {
            centroid: vec![0.0; dim],
            sketch: CountMinSketch::zeros(Arc::clone(family)),
            universe,
        }
    }

    pub fn with_vacuous_sketch(mut self) -> Self {
        self.sketch = CountMinSketch::vacuous(Arc::clone(self.sketch.family()));
        self
    }

    pub fn dim(&self) -> usize {
        self.centroid.len()
    }

    /// Candidates `TOP_k(a_X, E)`, each weighted by `CM(i, b_X) * softmax_i`
    /// with the softmax taken over the `k` candidate scores. Zero weights are
    /// dropped; the result is ranked by weight descending, id ascending.
    pub fn decode_ranked(&self, embeddings: &Matrix, k: usize) -> Result<Vec<(usize, f64)>> {
        if embeddings.rows() != self.sketch.family().universe() {
            return Err(KbqError::Shape(format!(
                "{} embedding rows for a universe of {}",
                embeddings.rows(),
                self.sketch.family().universe()
            )));
        }
        let top = mips::top_k(&self.centroid, embeddings, k)?;
        let probs = softmax(&top.scores);
        let mut out: Vec<(usize, f64)> = top
            .ids
            .iter()
            .zip(probs)
            .map(|(&i, p)| (i, self.sketch.lookup_unchecked(i) as f64 * p))
            .filter(|&(_, w)| w > 0.0)
            .collect();
        out.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        Ok(out)
    }

    /// Sparse decoding with at most `k` non-zeros.
    pub fn decode(&self, embeddings: &Matrix, k: usize) -> Result<WeightedSet> {
        let mut set = WeightedSet::new(embeddings.rows());
        for (i, w) in self.decode_ranked(embeddings, k)? {
            set.set(i, w as f32)?;
        }
        Ok(set)
    }

    fn check_pair(&self, other: &SetRep) -> Result<()> {
        if self.universe != other.universe {
            return Err(KbqError::UniverseMismatch {
                left: self.universe,
                right: other.universe,
            });
        }
        if self.dim() != other.dim() {
            return Err(KbqError::Shape(format!(
                "centroid dimensions {} and {}",
                self.dim(),
                other.dim()
            )));
        }
        Ok(())
    }

    fn mean_centroid(&self, other: &SetRep) -> Vec<f32> {
        self.centroid
            .iter()
            .zip(&other.centroid)
            .map(|(&a, &b)| (0.5 * (a as f64 + b as f64)) as f32)
            .collect()
    }

    /// Centroid `(a_A + a_B) / 2`, sketch `b_A * b_B` (cell-wise).
    pub fn intersect(&self, other: &SetRep) -> Result<SetRep> {
        self.check_pair(other)?;
        Ok(SetRep {
            centroid: self.mean_centroid(other),
            sketch: self.sketch.hadamard(&other.sketch)?,
            universe: self.universe,
        })
    }

    /// Centroid `(a_A + a_B) / 2`, sketch `b_A + b_B`.
    pub fn union(&self, other: &SetRep) -> Result<SetRep> {
        self.check_pair(other)?;
        Ok(SetRep {
            centroid: self.mean_centroid(other),
            sketch: self.sketch.add(&other.sketch)?,
            universe: self.universe,
        })
    }

    /// Centroid `a_A`, sketch `b_A` masked wherever `b_B` is nonzero.
    pub fn difference(&self, other: &SetRep) -> Result<SetRep> {
        self.check_pair(other)?;
        Ok(SetRep {
            centroid: self.centroid.clone(),
            sketch: self.sketch.mask_nonmembers(&other.sketch)?,
            universe: self.universe,
        })
    }
}

fn check_universe(set: &WeightedSet, embeddings: &Matrix, family: &HashFamily) -> Result<()> {
    if set.universe() != embeddings.rows() || family.universe() != embeddings.rows() {
        return Err(KbqError::Shape(format!(
            "set universe {}, embedding rows {}, sketch universe {}",
            set.universe(),
            embeddings.rows(),
            family.universe()
        )));
    }
    Ok(())
}
