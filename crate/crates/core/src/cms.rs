//! Seeded count-min sketches over integer-id universes.
//!
//! A sketch is a dense `depth x width` table of non-negative `f32` cells. Row
//! `j` is the primitive sketch of the encoded weighted set under hash `h_j`:
//! cell `(j, c)` holds the total weight of all elements `i` with `h_j(i) = c`.
//! Lookup takes the minimum over rows, so it never underestimates a
//! non-negative weight.
//!
//! Sketches built from the same [`HashFamily`] are linear: the sketch of a
//! weight-sum is the cell-wise sum of the sketches, and for sets whose
//! supports do not share hash cells the sketch of a Hadamard product is the
//! cell-wise product of the sketches.

use std::collections::BTreeMap;
use std::sync::Arc;

use crate::error::{KbqError, Result};

const SKETCH_MAGIC: &[u8; 4] = b"KBQS";
const SKETCH_VERSION: u32 = 1;
const SKETCH_HEADER_LEN: usize = 4 + 4 + 8 + 4 + 4 + 8;

/// 64-bit finalizer from SplitMix64. Bijective on `u64`.
#[inline]
pub(crate) fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

const GOLDEN: u64 = 0x9e37_79b9_7f4a_7c15;

/// A family of `depth` hash functions mapping `0..universe` to `0..width`.
///
/// Row `j` uses its own key derived from `(global_seed, j)`; rebuilding a
/// family from the same parameters reproduces every hash bit for bit.
#[derive(Debug, Clone)]
pub struct HashFamily {
    seed: u64,
    depth: usize,
    width: usize,
    universe: usize,
    keys: Vec<u64>,
}

impl HashFamily {
    pub fn new(seed: u64, depth: usize, width: usize, universe: usize) -> Result<Self> {
        if depth == 0 || width == 0 || width > u32::MAX as usize || depth > u32::MAX as usize {
            return Err(KbqError::InvalidSketchShape { depth, width });
        }
        let keys = (0..depth as u64)
            .map(|row| mix64(seed ^ mix64(row.wrapping_add(1).wrapping_mul(GOLDEN))))
            .collect();
        Ok(Self {
            seed,
            depth,
            width,
            universe,
            keys,
        })
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn universe(&self) -> usize {
        self.universe
    }

    /// `h_row(id)`. Callers are responsible for `row < depth`.
    #[inline]
    pub fn hash(&self, row: usize, id: usize) -> usize {
        let h = mix64((id as u64).wrapping_mul(GOLDEN) ^ self.keys[row]);
        (h % self.width as u64) as usize
    }

    pub fn check_id(&self, id: usize) -> Result<()> {
        if id >= self.universe {
            Err(KbqError::UniverseViolation {
                id,
                universe: self.universe,
            })
        } else {
            Ok(())
        }
    }

    /// Same seed, shape and universe.
    pub fn compatible(&self, other: &HashFamily) -> bool {
        self.seed == other.seed
            && self.depth == other.depth
            && self.width == other.width
            && self.universe == other.universe
    }
}

impl PartialEq for HashFamily {
    fn eq(&self, other: &Self) -> bool {
        self.compatible(other)
    }
}

/// Sparse weighted set over `0..universe`. Zero weights are never stored.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightedSet {
    universe: usize,
    entries: BTreeMap<usize, f32>,
}

fn check_weight(w: f32) -> Result<()> {
    if w.is_finite() && w >= 0.0 {
        Ok(())
    } else {
        Err(KbqError::InvalidWeight(w))
    }
}

impl WeightedSet {
    pub fn new(universe: usize) -> Self {
        Self {
            universe,
            entries: BTreeMap::new(),
        }
    }

    /// Unweighted set: every id gets weight 1.
    pub fn from_ids<I: IntoIterator<Item = usize>>(universe: usize, ids: I) -> Result<Self> {
        let mut set = Self::new(universe);
        for id in ids {
            set.set(id, 1.0)?;
        }
        Ok(set)
    }

    pub fn from_pairs<I: IntoIterator<Item = (usize, f32)>>(universe: usize, pairs: I) -> Result<Self> {
        let mut set = Self::new(universe);
        for (id, w) in pairs {
            set.add(id, w)?;
        }
        Ok(set)
    }

    pub fn universe(&self) -> usize {
        self.universe
    }

    /// Overwrite the weight of `id`; a zero weight removes it.
    pub fn set(&mut self, id: usize, w: f32) -> Result<()> {
        self.check(id, w)?;
        if w == 0.0 {
            self.entries.remove(&id);
        } else {
            self.entries.insert(id, w);
        }
        Ok(())
    }

    /// Add `w` to the weight of `id`.
    pub fn add(&mut self, id: usize, w: f32) -> Result<()> {
        self.check(id, w)?;
        if w == 0.0 {
            return Ok(());
        }
        *self.entries.entry(id).or_insert(0.0) += w;
        Ok(())
    }

    fn check(&self, id: usize, w: f32) -> Result<()> {
        if id >= self.universe {
            return Err(KbqError::UniverseViolation {
                id,
                universe: self.universe,
            });
        }
        check_weight(w)
    }

    pub fn weight(&self, id: usize) -> f32 {
        self.entries.get(&id).copied().unwrap_or(0.0)
    }

    pub fn contains(&self, id: usize) -> bool {
        self.entries.contains_key(&id)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Entries in ascending id order.
    pub fn iter(&self) -> impl Iterator<Item = (usize, f32)> + '_ {
        self.entries.iter().map(|(&i, &w)| (i, w))
    }

    pub fn ids(&self) -> impl Iterator<Item = usize> + '_ {
        self.entries.keys().copied()
    }

    pub fn total_weight(&self) -> f64 {
        self.entries.values().map(|&w| w as f64).sum()
    }

    /// Element-wise weight sum (multiset union).
    pub fn sum(&self, other: &WeightedSet) -> Result<WeightedSet> {
        let mut out = self.clone();
        for (id, w) in other.iter() {
            out.add(id, w)?;
        }
        Ok(out)
    }

    /// Element-wise weight product.
    pub fn product(&self, other: &WeightedSet) -> WeightedSet {
        let mut out = WeightedSet::new(self.universe);
        for (id, w) in self.iter() {
            let p = w * other.weight(id);
            if p != 0.0 {
                out.entries.insert(id, p);
            }
        }
        out
    }

    /// Entries ordered by weight descending, id ascending.
    pub fn ranked(&self) -> Vec<(usize, f32)> {
        let mut v: Vec<_> = self.iter().collect();
        v.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        v
    }
}

/// Dense count-min sketch bound to a shared [`HashFamily`].
#[derive(Debug, Clone)]
pub struct CountMinSketch {
    family: Arc<HashFamily>,
    table: Vec<f32>,
}

impl PartialEq for CountMinSketch {
    fn eq(&self, other: &Self) -> bool {
        self.family.compatible(&other.family)
            && self.table.len() == other.table.len()
            && self
                .table
                .iter()
                .zip(&other.table)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

impl CountMinSketch {
    /// All-zero sketch, the encoding of the empty set.
    pub fn zeros(family: Arc<HashFamily>) -> Self {
        let n = family.depth * family.width;
        Self {
            family,
            table: vec![0.0; n],
        }
    }

    /// All-ones sketch: every lookup returns 1.0.
    pub fn vacuous(family: Arc<HashFamily>) -> Self {
        let n = family.depth * family.width;
        Self {
            family,
            table: vec![1.0; n],
        }
    }

    pub fn from_set(set: &WeightedSet, family: Arc<HashFamily>) -> Result<Self> {
        let mut sketch = Self::zeros(family);
        for (id, w) in set.iter() {
            sketch.insert(id, w)?;
        }
        Ok(sketch)
    }

    pub fn family(&self) -> &Arc<HashFamily> {
        &self.family
    }

    pub fn depth(&self) -> usize {
        self.family.depth
    }

    pub fn width(&self) -> usize {
        self.family.width
    }

    /// Row-major cells.
    pub fn table(&self) -> &[f32] {
        &self.table
    }

    pub fn cell(&self, row: usize, col: usize) -> f32 {
        self.table[row * self.family.width + col]
    }

    /// Increment cell `(j, h_j(id))` by `w` in every row.
    pub fn insert(&mut self, id: usize, w: f32) -> Result<()> {
        self.family.check_id(id)?;
        check_weight(w)?;
        if w == 0.0 {
            return Ok(());
        }
        let width = self.family.width;
        for row in 0..self.family.depth {
            let col = self.family.hash(row, id);
            self.table[row * width + col] += w;
        }
        Ok(())
    }

    /// `min_j table[j, h_j(id)]`.
    pub fn lookup(&self, id: usize) -> Result<f32> {
        self.family.check_id(id)?;
        Ok(self.lookup_unchecked(id))
    }

    #[inline]
    pub(crate) fn lookup_unchecked(&self, id: usize) -> f32 {
        let width = self.family.width;
        let mut min = f32::INFINITY;
        for row in 0..self.family.depth {
            let v = self.table[row * width + self.family.hash(row, id)];
            if v < min {
                min = v;
            }
        }
        min
    }

    fn check_compatible(&self, other: &CountMinSketch) -> Result<()> {
        if Arc::ptr_eq(&self.family, &other.family) || self.family.compatible(&other.family) {
            Ok(())
        } else {
            Err(KbqError::IncompatibleSketch(format!(
                "seed/depth/width/universe ({}, {}, {}, {}) vs ({}, {}, {}, {})",
                self.family.seed,
                self.family.depth,
                self.family.width,
                self.family.universe,
                other.family.seed,
                other.family.depth,
                other.family.width,
                other.family.universe
            )))
        }
    }

    fn zip_with(&self, other: &CountMinSketch, f: impl Fn(f32, f32) -> f32) -> Result<Self> {
        self.check_compatible(other)?;
        Ok(Self {
            family: Arc::clone(&self.family),
            table: self
                .table
                .iter()
                .zip(&other.table)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    /// Cell-wise sum: the sketch of the weight-sum of the two sets.
    pub fn add(&self, other: &CountMinSketch) -> Result<Self> {
        self.zip_with(other, |a, b| a + b)
    }

    /// Cell-wise product: the intersection sketch.
    pub fn hadamard(&self, other: &CountMinSketch) -> Result<Self> {
        self.zip_with(other, |a, b| a * b)
    }

    /// Keep a cell of `self` only where `other` is zero.
    ///
    /// Every id whose hash path touches a nonzero cell of `other` looks up as
    /// zero; for an unweighted, collision-free `other` this is set difference.
    pub fn mask_nonmembers(&self, other: &CountMinSketch) -> Result<Self> {
        self.zip_with(other, |a, b| if b == 0.0 { a } else { 0.0 })
    }

    pub fn is_zero(&self) -> bool {
        self.table.iter().all(|&c| c == 0.0)
    }

    /// Header (magic, version, seed, depth, width, universe) then
    /// `depth * width` little-endian `f32` cells.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(SKETCH_HEADER_LEN + 4 * self.table.len());
        out.extend_from_slice(SKETCH_MAGIC);
        out.extend_from_slice(&SKETCH_VERSION.to_le_bytes());
        out.extend_from_slice(&self.family.seed.to_le_bytes());
        out.extend_from_slice(&(self.family.depth as u32).to_le_bytes());
        out.extend_from_slice(&(self.family.width as u32).to_le_bytes());
        out.extend_from_slice(&(self.family.universe as u64).to_le_bytes());
        for c in &self.table {
            out.extend_from_slice(&c.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < SKETCH_HEADER_LEN {
            return Err(KbqError::Decode(format!(
                "sketch needs at least {SKETCH_HEADER_LEN} header bytes, got {}",
                bytes.len()
            )));
        }
        if &bytes[0..4] != SKETCH_MAGIC {
            return Err(KbqError::Decode("bad sketch magic".into()));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != SKETCH_VERSION {
            return Err(KbqError::Decode(format!("unsupported sketch version {version}")));
        }
        let seed = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
        let depth = u32::from_le_bytes(bytes[16..20].try_into().unwrap()) as usize;
        let width = u32::from_le_bytes(bytes[20..24].try_into().unwrap()) as usize;
        let universe = u64::from_le_bytes(bytes[24..32].try_into().unwrap());
        let universe = usize::try_from(universe)
            .map_err(|_| KbqError::Decode("universe does not fit in usize".into()))?;
        let cells = depth
            .checked_mul(width)
            .ok_or_else(|| KbqError::Decode("sketch dimensions overflow".into()))?;
        let payload = &bytes[SKETCH_HEADER_LEN..];
        if cells.checked_mul(4) != Some(payload.len()) {
            return Err(KbqError::Decode(format!(
                "expected {cells} cells, payload has {} bytes",
                payload.len()
            )));
        }
        let family = Arc::new(HashFamily::new(seed, depth, width, universe)?);
        let table = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect::<Vec<_>>();
        if let Some(bad) = table.iter().find(|c| !(c.is_finite() && **c >= 0.0)) {
            return Err(KbqError::Decode(format!("invalid sketch cell {bad}")));
        }
        Ok(Self { family, table })
    }
}
