//! Small dense numeric kernel: vectors, row-major matrices, stable softmax,
//! cosine similarity, norms and deterministic top-k selection.
//!
//! Everything here works in `f64`. Inputs are validated at the boundary and
//! values are immutable after construction.

use std::cmp::Ordering;
use std::ops::Deref;

use crate::error::{invalid_dim, Error, Result};

/// A finite, non-empty vector of reals.
#[derive(Debug, Clone, PartialEq)]
pub struct Vector(Vec<f64>);

impl Vector {
    pub fn new(data: Vec<f64>) -> Result<Self> {
        if data.is_empty() {
            return Err(invalid_dim("vector must have at least one entry"));
        }
        check_finite(&data)?;
        Ok(Self(data))
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

impl Deref for Vector {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl TryFrom<Vec<f64>> for Vector {
    type Error = Error;

    fn try_from(v: Vec<f64>) -> Result<Self> {
        Vector::new(v)
    }
}

/// Row-major dense matrix with finite entries.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows.checked_mul(cols) != Some(data.len()) {
            return Err(invalid_dim(format!(
                "{rows}x{cols} matrix needs {} entries, got {}",
                rows.saturating_mul(cols),
                data.len()
            )));
        }
        check_finite(&data)?;
        Ok(Self { rows, cols, data })
    }

    /// Builds a matrix from equally sized rows.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(invalid_dim(format!(
                    "row {i} has {} entries, expected {cols}",
                    r.len()
                )));
            }
            data.extend_from_slice(r);
        }
        Matrix::new(rows.len(), cols, data)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn iter_rows(&self) -> impl ExactSizeIterator<Item = &[f64]> + '_ {
        (0..self.rows).map(move |i| self.row(i))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }
}

/// Strictly increasing set of token indices.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Default)]
pub struct IndexSet(Vec<usize>);

impl IndexSet {
    /// Sorts and deduplicates the given indices.
    pub fn from_unsorted(mut indices: Vec<usize>) -> Self {
        indices.sort_unstable();
        indices.dedup();
        Self(indices)
    }

    /// The contiguous range `[start, end)`.
    pub fn range(start: usize, end: usize) -> Self {
        Self((start..end.max(start)).collect())
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.0
    }

    pub fn contains(&self, idx: usize) -> bool {
        self.0.binary_search(&idx).is_ok()
    }

    /// Number of indices present in both sets (linear merge).
    pub fn intersection_len(&self, other: &IndexSet) -> usize {
        let (mut i, mut j, mut n) = (0, 0, 0);
        let (a, b) = (&self.0, &other.0);
        while i < a.len() && j < b.len() {
            match a[i].cmp(&b[j]) {
                Ordering::Less => i += 1,
                Ordering::Greater => j += 1,
                Ordering::Equal => {
                    n += 1;
                    i += 1;
                    j += 1;
                }
            }
        }
        n
    }

    pub fn union(&self, other: &IndexSet) -> IndexSet {
        let mut v = self.0.clone();
        v.extend_from_slice(&other.0);
        IndexSet::from_unsorted(v)
    }

    /// Adds `offset` to every index.
    pub fn shifted(&self, offset: usize) -> IndexSet {
        IndexSet(self.0.iter().map(|&i| i + offset).collect())
    }
}

impl FromIterator<usize> for IndexSet {
    fn from_iter<T: IntoIterator<Item = usize>>(iter: T) -> Self {
        IndexSet::from_unsorted(iter.into_iter().collect())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Norm {
    L1,
    Linf,
}

fn check_finite(data: &[f64]) -> Result<()> {
    match data.iter().position(|v| !v.is_finite()) {
        Some(i) => Err(Error::NonFiniteInput(format!(
            "entry {i} is {}",
            data[i]
        ))),
        None => Ok(()),
    }
}

/// Softmax with max-subtraction.
pub fn softmax_stable(scores: &[f64]) -> Result<Vec<f64>> {
    if scores.is_empty() {
        return Err(invalid_dim("softmax of an empty vector"));
    }
    check_finite(scores)?;
    Ok(softmax_unchecked(scores))
}

/// Softmax for inputs already known to be finite and non-empty.
pub(crate) fn softmax_unchecked(scores: &[f64]) -> Vec<f64> {
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = scores.iter().map(|&s| (s - max).exp()).collect();
    let sum: f64 = out.iter().sum();
    for v in &mut out {
        *v /= sum;
    }
    out
}

pub fn dot(x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).map(|(a, b)| a * b).sum()
}

pub fn l2_norm(x: &[f64]) -> f64 {
    dot(x, x).sqrt()
}

/// Cosine of the angle between `x` and `y`, clamped to `[-1, 1]`.
pub fn cosine_similarity(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(invalid_dim(format!("{} vs {}", x.len(), y.len())));
    }
    let (nx, ny) = (l2_norm(x), l2_norm(y));
    if nx == 0.0 || ny == 0.0 {
        return Err(Error::DegenerateVector("cosine of a zero vector".into()));
    }
    if x == y {
        return Ok(1.0);
    }
    Ok((dot(x, y) / (nx * ny)).clamp(-1.0, 1.0))
}

/// Indices of the `k` largest scores, ties broken toward the lower index.
/// Returns every index when `k >= scores.len()`.
pub fn top_k_indices(scores: &[f64], k: usize) -> IndexSet {
    if k >= scores.len() {
        return IndexSet::range(0, scores.len());
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    let by_score_then_index =
        |&a: &usize, &b: &usize| scores[b].total_cmp(&scores[a]).then(a.cmp(&b));
    if k > 0 {
        order.select_nth_unstable_by(k - 1, by_score_then_index);
    }
    order.truncate(k);
    IndexSet::from_unsorted(order)
}

pub fn vector_distance(x: &[f64], y: &[f64], norm: Norm) -> Result<f64> {
    if x.len() != y.len() {
        return Err(invalid_dim(format!("{} vs {}", x.len(), y.len())));
    }
    let diffs = x.iter().zip(y).map(|(a, b)| (a - b).abs());
    Ok(match norm {
        Norm::L1 => diffs.sum(),
        Norm::Linf => diffs.fold(0.0, f64::max),
    })
}

/// Scales `x` to unit length, returning the original norm alongside.
pub fn normalize(x: &[f64]) -> Result<(Vec<f64>, f64)> {
    let n = l2_norm(x);
    if n == 0.0 || !n.is_finite() {
        return Err(Error::DegenerateVector("cannot normalize".into()));
    }
    Ok((x.iter().map(|v| v / n).collect(), n))
}
