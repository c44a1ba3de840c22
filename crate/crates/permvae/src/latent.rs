//! The L×L latent matrix: per-view Gaussians indexed by (source row, target
//! column), with rows present only for observed views. Columns are the
//! single-view cells, rows the complete-view cells; permuting each column by
//! a bundle turns the base matrix into its cross-view counterpart. Rows fuse
//! into the consensus variable.

use crate::gaussian::{geometric_mean_fusion, marginal_first_k, DiagonalGaussian};
use crate::permutation::PermutationBundle;
use crate::{Error, Real, Result};

/// L×L grid of diagonal Gaussians with availability flags. Entry `(v, l)`
/// holds the representation of view `l` derived from source view `v`; it
/// exists iff `v` is observed. Diagonal entries come from encoders,
/// off-diagonal entries from correspondence maps.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentMatrix<R> {
    l: usize,
    dim: usize,
    observed: Vec<usize>,
    entries: Vec<Option<DiagonalGaussian<R>>>, // row-major (v-1)*L + (l-1)
}

/// The fused k-dimensional consensus distribution of a complete-view cell.
#[derive(Debug, Clone, PartialEq)]
pub struct Consensus<R> {
    pub dist: DiagonalGaussian<R>,
}

impl<R: Real> LatentMatrix<R> {
    /// Build from a closure supplying the entry for each observed (row,
    /// column) pair. `observed` holds 1-based view indices.
    pub fn from_fn<F>(l: usize, dim: usize, observed: &[usize], mut entry: F) -> Result<Self>
    where
        F: FnMut(usize, usize) -> Result<DiagonalGaussian<R>>,
    {
        if observed.is_empty() {
            return Err(Error::contract("latent matrix needs at least one observed view"));
        }
        let mut sorted = observed.to_vec();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != observed.len() || sorted[0] < 1 || *sorted.last().unwrap() > l {
            return Err(Error::contract(format!("invalid observed set {observed:?} for L = {l}")));
        }
        let mut entries = vec![None; l * l];
        for &v in &sorted {
            for col in 1..=l {
                let g = entry(v, col)?;
                if g.dim() != dim {
                    return Err(Error::dim(format!(
                        "entry ({v}, {col}) has dim {} (expected {dim})",
                        g.dim()
                    )));
                }
                entries[(v - 1) * l + (col - 1)] = Some(g);
            }
        }
        Ok(LatentMatrix { l, dim, observed: sorted, entries })
    }

    pub fn view_count(&self) -> usize {
        self.l
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn observed(&self) -> &[usize] {
        &self.observed
    }

    /// Entry `(v, l)`; `None` when view `v` is missing.
    pub fn entry(&self, v: usize, l: usize) -> Option<&DiagonalGaussian<R>> {
        self.entries[(v - 1) * self.l + (l - 1)].as_ref()
    }

    fn expect_entry(&self, v: usize, l: usize) -> &DiagonalGaussian<R> {
        self.entry(v, l).expect("entry exists for observed row")
    }

    /// Permute every column by its bundle permutation: the result's entry
    /// `(i, l)` is this matrix's entry `(sigma_l(i), l)`.
    pub fn apply_column_permutations(&self, bundle: &PermutationBundle) -> Result<LatentMatrix<R>> {
        if bundle.len() != self.l {
            return Err(Error::contract(format!(
                "bundle has {} columns for an L = {} matrix",
                bundle.len(),
                self.l
            )));
        }
        if bundle.observed() != self.observed.as_slice() {
            return Err(Error::contract(format!(
                "bundle observed set {:?} differs from matrix observed set {:?}",
                bundle.observed(),
                self.observed
            )));
        }
        let mut entries = vec![None; self.l * self.l];
        for &i in &self.observed {
            for col in 1..=self.l {
                let source = bundle.column(col).apply(i);
                entries[(i - 1) * self.l + (col - 1)] =
                    Some(self.expect_entry(source, col).clone());
            }
        }
        Ok(LatentMatrix { l: self.l, dim: self.dim, observed: self.observed.clone(), entries })
    }

    /// Column `l` restricted to observed rows, in ascending row order.
    pub fn single_view_cell(&self, l: usize) -> Result<Vec<DiagonalGaussian<R>>> {
        if l < 1 || l > self.l {
            return Err(Error::contract(format!("column {l} outside 1..={}", self.l)));
        }
        Ok(self.observed.iter().map(|&v| self.expect_entry(v, l).clone()).collect())
    }

    /// Row `n`: one representative per view. `n` must be observed.
    pub fn complete_view_cell(&self, n: usize) -> Result<Vec<DiagonalGaussian<R>>> {
        if !self.observed.contains(&n) {
            return Err(Error::contract(format!("row {n} is not an observed view")));
        }
        Ok((1..=self.l).map(|col| self.expect_entry(n, col).clone()).collect())
    }

    /// The diagonal entries `(n, n)` for observed `n`, ascending.
    pub fn diagonal(&self) -> Vec<(usize, DiagonalGaussian<R>)> {
        self.observed.iter().map(|&n| (n, self.expect_entry(n, n).clone())).collect()
    }
}

/// Fuse a complete-view cell into its k-dimensional consensus distribution
/// (precision-weighted geometric mean of the first-k marginals).
pub fn consensus<R: Real>(cell: &[DiagonalGaussian<R>], k: usize) -> Result<Consensus<R>> {
    let marginals = cell.iter().map(|g| marginal_first_k(g, k)).collect::<Result<Vec<_>>>()?;
    Ok(Consensus { dist: geometric_mean_fusion(&marginals, k)? })
}
