//! Exact top-k maximum inner-product search.
//!
//! Scores are `f32` products accumulated in `f64`. Results are ordered by
//! score descending with ties broken by ascending row id, so a search is
//! fully deterministic.

use std::cmp::Ordering;

use rayon::prelude::*;

use crate::error::{KbqError, Result};

/// Row-major dense `f32` matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(KbqError::Shape(format!(
                "{} values for a {rows}x{cols} matrix",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f32>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(KbqError::Shape("ragged rows".into()));
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data: rows.concat(),
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f32] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f32] {
        &mut self.data
    }

    /// `M q` with `f64` accumulation.
    pub fn scores(&self, query: &[f32]) -> Result<Vec<f64>> {
        if query.len() != self.cols {
            return Err(KbqError::Shape(format!(
                "query has dimension {}, matrix has {} columns",
                query.len(),
                self.cols
            )));
        }
        Ok((0..self.rows).map(|i| dot(self.row(i), query)).collect())
    }
}

#[inline]
pub fn dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum()
}

/// Ranked retrieval result.
#[derive(Debug, Clone, PartialEq)]
pub struct TopKResult {
    pub ids: Vec<usize>,
    pub scores: Vec<f64>,
}

impl TopKResult {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.ids.iter().copied().zip(self.scores.iter().copied())
    }
}

/// Score descending, then id ascending. Adding `0.0` maps `-0.0` to `0.0`
/// so that signed zeros tie.
#[inline]
fn rank_order(a: &(usize, f64), b: &(usize, f64)) -> Ordering {
    (b.1 + 0.0).total_cmp(&(a.1 + 0.0)).then(a.0.cmp(&b.0))
}

/// Select the `k` best `(id, score)` pairs and sort them.
pub fn select_top_k(scores: Vec<f64>, k: usize) -> TopKResult {
    let mut pairs: Vec<(usize, f64)> = scores.into_iter().enumerate().collect();
    if k < pairs.len() {
        pairs.select_nth_unstable_by(k, rank_order);
        pairs.truncate(k);
    }
    pairs.sort_unstable_by(rank_order);
    let (ids, scores) = pairs.into_iter().unzip();
    TopKResult { ids, scores }
}

/// `TOP_k(query, matrix)` by exhaustive scan.
pub fn top_k(query: &[f32], matrix: &Matrix, k: usize) -> Result<TopKResult> {
    if k == 0 {
        return Err(KbqError::Config("k must be at least 1".into()));
    }
    Ok(select_top_k(matrix.scores(query)?, k))
}

/// Retrieval backend over a fixed matrix. Approximate engines implement the
/// same trait; callers only depend on the ranking contract.
pub trait MipsBackend: Sync {
    fn dim(&self) -> usize;

    fn search(&self, query: &[f32], k: usize) -> Result<TopKResult>;

    fn search_batch(&self, queries: &[Vec<f32>], k: usize) -> Result<Vec<TopKResult>> {
        queries.par_iter().map(|q| self.search(q, k)).collect()
    }
}

/// Exact exhaustive scan.
#[derive(Debug, Clone, Copy)]
pub struct ExactScan<'a> {
    matrix: &'a Matrix,
}

impl<'a> ExactScan<'a> {
    pub fn new(matrix: &'a Matrix) -> Self {
        Self { matrix }
    }
}

impl MipsBackend for ExactScan<'_> {
    fn dim(&self) -> usize {
        self.matrix.cols()
    }

    fn search(&self, query: &[f32], k: usize) -> Result<TopKResult> {
        top_k(query, self.matrix, k)
    }
}
