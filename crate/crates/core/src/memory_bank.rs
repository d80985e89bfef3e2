//! Circular queue of key embeddings used as the negative pool, plus
//! selection of the rows farthest (lowest cosine similarity) from an anchor.

use std::cmp::Ordering;

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{cosine_similarity, norm, Matrix};
use crate::rng::SeededRng;

/// Rows whose norm differs from one by more than this are rejected.
pub const UNIT_TOLERANCE: f64 = 1e-6;

pub const DEFAULT_CAPACITY: usize = 4096;
/// Larger queue for batch sizes where 4096 turns over too quickly.
pub const LARGE_BATCH_CAPACITY: usize = 8192;

/// Which embedding anchors the hard-negative selection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum SelectionBasis {
    #[default]
    Query,
    Key,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MemoryBank {
    capacity: usize,
    dim: usize,
    storage: Matrix,
    write_ptr: usize,
    filled: usize,
    total_enqueued: u64,
}

/// Indices of the selected negatives, ordered by ascending similarity.
#[derive(Debug, Clone, PartialEq)]
pub struct NegativeSelection {
    pub indices: Vec<usize>,
    pub basis: SelectionBasis,
}

impl NegativeSelection {
    pub fn size(&self) -> usize {
        self.indices.len()
    }
}

pub(crate) fn check_unit(row: usize, v: &[f64]) -> Result<()> {
    let n = norm(v);
    if (n - 1.0).abs() > UNIT_TOLERANCE || !n.is_finite() {
        return Err(Error::NotNormalized { row, norm: n });
    }
    Ok(())
}

impl MemoryBank {
    /// A full bank of random unit vectors.
    pub fn new(capacity: usize, dim: usize, seed: u64) -> Result<Self> {
        if capacity == 0 || dim == 0 {
            return Err(Error::InvalidCapacity { capacity, dim });
        }
        let mut rng = SeededRng::new(seed);
        let mut storage = Matrix::zeros(capacity, dim);
        for r in 0..capacity {
            loop {
                let row = storage.row_mut(r);
                for v in row.iter_mut() {
                    *v = StandardNormal.sample(&mut rng);
                }
                let n = norm(row);
                if n > 1e-6 {
                    row.iter_mut().for_each(|v| *v /= n);
                    break;
                }
            }
        }
        Ok(Self { capacity, dim, storage, write_ptr: 0, filled: capacity, total_enqueued: 0 })
    }

    /// A full bank holding exactly `rows`, write pointer at zero.
    pub fn from_rows(rows: Matrix) -> Result<Self> {
        if rows.rows() == 0 || rows.cols() == 0 {
            return Err(Error::InvalidCapacity { capacity: rows.rows(), dim: rows.cols() });
        }
        for (i, r) in rows.iter_rows().enumerate() {
            check_unit(i, r)?;
        }
        Ok(Self {
            capacity: rows.rows(),
            dim: rows.cols(),
            filled: rows.rows(),
            storage: rows,
            write_ptr: 0,
            total_enqueued: 0,
        })
    }

    /// Restores a bank from raw parts, as read back from a checkpoint.
    pub fn from_parts(storage: Matrix, write_ptr: usize, filled: usize, total_enqueued: u64) -> Result<Self> {
        let capacity = storage.rows();
        if capacity == 0 || storage.cols() == 0 {
            return Err(Error::InvalidCapacity { capacity, dim: storage.cols() });
        }
        if write_ptr >= capacity || filled > capacity || (total_enqueued % capacity as u64) as usize != write_ptr {
            return Err(Error::ShapeMismatch(format!(
                "inconsistent bank state: ptr {write_ptr}, filled {filled}, total {total_enqueued}, capacity {capacity}"
            )));
        }
        for (i, r) in storage.iter_rows().enumerate().take(filled) {
            check_unit(i, r)?;
        }
        Ok(Self { capacity, dim: storage.cols(), storage, write_ptr, filled, total_enqueued })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn write_ptr(&self) -> usize {
        self.write_ptr
    }

    pub fn filled(&self) -> usize {
        self.filled
    }

    pub fn total_enqueued(&self) -> u64 {
        self.total_enqueued
    }

    pub fn storage(&self) -> &Matrix {
        &self.storage
    }

    pub fn row(&self, i: usize) -> &[f64] {
        self.storage.row(i)
    }

    /// The valid rows, `[0, filled)`.
    pub fn active_rows(&self) -> impl Iterator<Item = &[f64]> + Clone {
        self.storage.iter_rows().take(self.filled)
    }

    /// Overwrites the oldest rows with `keys`, advancing the write pointer.
    pub fn enqueue(&mut self, keys: &Matrix) -> Result<()> {
        let b = keys.rows();
        if b == 0 {
            return Err(Error::EmptyBatch);
        }
        if keys.cols() != self.dim {
            return Err(Error::DimensionMismatch { expected: self.dim, got: keys.cols() });
        }
        if b > self.capacity {
            return Err(Error::BatchTooLarge { batch: b, capacity: self.capacity });
        }
        if !self.capacity.is_multiple_of(b) {
            return Err(Error::IndivisibleCapacity { batch: b, capacity: self.capacity });
        }
        for (i, r) in keys.iter_rows().enumerate() {
            check_unit(i, r)?;
        }
        for r in keys.iter_rows() {
            self.storage.row_mut(self.write_ptr).copy_from_slice(r);
            self.write_ptr = (self.write_ptr + 1) % self.capacity;
        }
        self.filled = (self.filled + b).min(self.capacity);
        self.total_enqueued += b as u64;
        Ok(())
    }

    /// Cosine similarity of `anchor` to every active row.
    pub fn similarities(&self, anchor: &[f64]) -> Result<Vec<f64>> {
        self.active_rows().map(|r| cosine_similarity(anchor, r)).collect()
    }

    /// The `f_n` active rows least similar to `anchor`, ties to the lower index.
    pub fn select_hard_negatives(
        &self,
        anchor: &[f64],
        f_n: usize,
        basis: SelectionBasis,
    ) -> Result<NegativeSelection> {
        if f_n == 0 || f_n > self.filled {
            return Err(Error::InvalidSubsetSize { requested: f_n, available: self.filled });
        }
        if anchor.len() != self.dim {
            return Err(Error::DimensionMismatch { expected: self.dim, got: anchor.len() });
        }
        check_unit(0, anchor)?;
        let sims = self.similarities(anchor)?;
        let mut order: Vec<usize> = (0..self.filled).collect();
        let cmp = |a: &usize, b: &usize| -> Ordering {
            sims[*a].partial_cmp(&sims[*b]).unwrap_or(Ordering::Equal).then(a.cmp(b))
        };
        if f_n < order.len() {
            order.select_nth_unstable_by(f_n - 1, cmp);
            order.truncate(f_n);
        }
        order.sort_unstable_by(cmp);
        Ok(NegativeSelection { indices: order, basis })
    }
}

/// Number of hard negatives for a bank holding `filled` rows.
pub fn hard_negative_count(hard_fraction: f64, filled: usize) -> usize {
    // guard against 0.2 * 5 = 1.0000000000000002 rounding up
    let raw = hard_fraction * filled as f64;
    let rounded = raw.round();
    if (raw - rounded).abs() < 1e-9 {
        rounded as usize
    } else {
        raw.ceil() as usize
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::l2_normalize;

    fn unit_rows(rows: &[&[f64]]) -> Matrix {
        let normed: Vec<Vec<f64>> = rows.iter().map(|r| l2_normalize(r).unwrap()).collect();
        Matrix::from_rows(&normed).unwrap()
    }

    #[test]
    fn init_contract() {
        let a = MemoryBank::new(4, 2, 1).unwrap();
        for r in a.active_rows() {
            assert!((norm(r) - 1.0).abs() < 1e-9);
        }
        assert_eq!((a.filled(), a.write_ptr()), (4, 0));
        assert_eq!(a, MemoryBank::new(4, 2, 1).unwrap());
        assert!(matches!(MemoryBank::new(0, 2, 1), Err(Error::InvalidCapacity { .. })));
    }

    #[test]
    fn ring_semantics() {
        let mut bank = MemoryBank::new(4, 2, 1).unwrap();
        let b1 = unit_rows(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let b2 = unit_rows(&[&[-1.0, 0.0], &[0.0, -1.0]]);
        let b3 = unit_rows(&[&[1.0, 1.0], &[1.0, -1.0]]);
        bank.enqueue(&b1).unwrap();
        assert_eq!(bank.write_ptr(), 2);
        bank.enqueue(&b2).unwrap();
        assert_eq!(bank.write_ptr(), 0);
        bank.enqueue(&b3).unwrap();
        assert_eq!(bank.row(0), b3.row(0));
        assert_eq!(bank.row(1), b3.row(1));
        assert_eq!(bank.row(2), b2.row(0));
        assert_eq!(bank.total_enqueued(), 6);
    }

    #[test]
    fn enqueue_guards() {
        let mut bank = MemoryBank::new(4, 2, 1).unwrap();
        let three = unit_rows(&[&[1.0, 0.0], &[0.0, 1.0], &[1.0, 1.0]]);
        assert!(matches!(bank.enqueue(&three), Err(Error::IndivisibleCapacity { .. })));
        let wide = Matrix::from_rows(&[[1.0, 0.0, 0.0]]).unwrap();
        assert!(matches!(bank.enqueue(&wide), Err(Error::DimensionMismatch { .. })));
        let big = Matrix::from_rows(&[[1.0, 0.0]; 8]).unwrap();
        assert!(matches!(bank.enqueue(&big), Err(Error::BatchTooLarge { .. })));
        let raw = Matrix::from_rows(&[[3.0, 4.0], [1.0, 0.0]]).unwrap();
        assert!(matches!(bank.enqueue(&raw), Err(Error::NotNormalized { row: 0, .. })));
        assert_eq!(bank.write_ptr(), 0);
    }

    #[test]
    fn selects_farthest_row() {
        let bank = MemoryBank::from_rows(
            Matrix::from_rows(&[[0.0, 1.0], [-1.0, 0.0], [0.9, 0.435_889_894_354_067_4]]).unwrap(),
        )
        .unwrap();
        let sel = bank.select_hard_negatives(&[1.0, 0.0], 1, SelectionBasis::Query).unwrap();
        assert_eq!(sel.indices, vec![1]);
        let all = bank.select_hard_negatives(&[1.0, 0.0], 3, SelectionBasis::Key).unwrap();
        assert_eq!(all.indices, vec![1, 0, 2]);
        assert!(matches!(
            bank.select_hard_negatives(&[1.0, 0.0], 0, SelectionBasis::Query),
            Err(Error::InvalidSubsetSize { .. })
        ));
        assert!(matches!(
            bank.select_hard_negatives(&[1.0, 0.0], 4, SelectionBasis::Query),
            Err(Error::InvalidSubsetSize { .. })
        ));
    }

    #[test]
    fn ties_go_to_lower_index() {
        let bank =
            MemoryBank::from_rows(Matrix::from_rows(&[[0.0, 1.0], [0.0, -1.0], [0.0, 1.0], [1.0, 0.0]]).unwrap())
                .unwrap();
        let sel = bank.select_hard_negatives(&[1.0, 0.0], 2, SelectionBasis::Query).unwrap();
        assert_eq!(sel.indices, vec![0, 1]);
    }

    #[test]
    fn hard_negative_count_rounding() {
        assert_eq!(hard_negative_count(0.2, 512), 103);
        assert_eq!(hard_negative_count(0.2, 5), 1);
        assert_eq!(hard_negative_count(0.5, 2), 1);
        assert_eq!(hard_negative_count(1.0, 32), 32);
        assert_eq!(hard_negative_count(0.2, 4096), 820);
    }
}
