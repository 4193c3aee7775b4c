//! Compressed sparse row operator with deterministic assembly.

use crate::{Error, Result};

/// Square sparse matrix in CSR form. Rows are assembled in order and each
/// row's columns are kept sorted, so assembly is deterministic.
#[derive(Debug, Clone)]
pub struct SparseOperator {
    dim: usize,
    row_ptr: Vec<usize>,
    cols: Vec<usize>,
    vals: Vec<f64>,
}

/// Row-by-row builder for [`SparseOperator`].
pub struct SparseBuilder {
    dim: usize,
    row_ptr: Vec<usize>,
    cols: Vec<usize>,
    vals: Vec<f64>,
    // scratch for the row being assembled
    current: Vec<(usize, f64)>,
}

impl SparseBuilder {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            row_ptr: vec![0],
            cols: Vec::new(),
            vals: Vec::new(),
            current: Vec::new(),
        }
    }

    /// Adds to an entry of the row currently being assembled.
    pub fn add(&mut self, col: usize, value: f64) {
        debug_assert!(col < self.dim);
        if let Some(e) = self.current.iter_mut().find(|(c, _)| *c == col) {
            e.1 += value;
        } else {
            self.current.push((col, value));
        }
    }

    /// Finalizes the current row; rows must be closed in index order.
    pub fn finish_row(&mut self) {
        self.current.sort_unstable_by_key(|(c, _)| *c);
        for &(c, v) in &self.current {
            self.cols.push(c);
            self.vals.push(v);
        }
        self.current.clear();
        self.row_ptr.push(self.cols.len());
    }

    pub fn build(self) -> Result<SparseOperator> {
        if self.row_ptr.len() != self.dim + 1 {
            return Err(Error::Shape(format!(
                "assembled {} rows for a dimension-{} operator",
                self.row_ptr.len() - 1,
                self.dim
            )));
        }
        Ok(SparseOperator {
            dim: self.dim,
            row_ptr: self.row_ptr,
            cols: self.cols,
            vals: self.vals,
        })
    }
}

impl SparseOperator {
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn nnz(&self) -> usize {
        self.vals.len()
    }

    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let (lo, hi) = (self.row_ptr[i], self.row_ptr[i + 1]);
        self.cols[lo..hi]
            .iter()
            .copied()
            .zip(self.vals[lo..hi].iter().copied())
    }

    pub fn matvec(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.dim {
            return Err(Error::Shape(format!(
                "operator dimension {} does not match vector length {}",
                self.dim,
                x.len()
            )));
        }
        let mut y = vec![0.0; self.dim];
        for i in 0..self.dim {
            let mut acc = 0.0;
            for (c, v) in self.row(i) {
                acc += v * x[c];
            }
            y[i] = acc;
        }
        Ok(y)
    }

    /// `y <- A x` into a caller buffer (hot path of the iterative solvers).
    pub fn matvec_into(&self, x: &[f64], y: &mut [f64]) {
        debug_assert_eq!(x.len(), self.dim);
        debug_assert_eq!(y.len(), self.dim);
        for i in 0..self.dim {
            let (lo, hi) = (self.row_ptr[i], self.row_ptr[i + 1]);
            let mut acc = 0.0;
            for k in lo..hi {
                acc += self.vals[k] * x[self.cols[k]];
            }
            y[i] = acc;
        }
    }

    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.dim)
            .map(|i| {
                self.row(i)
                    .find(|&(c, _)| c == i)
                    .map(|(_, v)| v)
                    .unwrap_or(0.0)
            })
            .collect()
    }

    /// Sum of the entries of row `i`.
    pub fn row_sum(&self, i: usize) -> f64 {
        self.row(i).map(|(_, v)| v).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builder_accumulates_and_sorts() {
        let mut b = SparseBuilder::new(2);
        b.add(1, 2.0);
        b.add(0, 1.0);
        b.add(1, 3.0);
        b.finish_row();
        b.add(1, 4.0);
        b.finish_row();
        let a = b.build().unwrap();
        assert_eq!(a.nnz(), 3);
        let row0: Vec<_> = a.row(0).collect();
        assert_eq!(row0, vec![(0, 1.0), (1, 5.0)]);
        let y = a.matvec(&[1.0, 1.0]).unwrap();
        assert_eq!(y, vec![6.0, 4.0]);
        assert_eq!(a.diagonal(), vec![1.0, 4.0]);
    }

    #[test]
    fn build_rejects_missing_rows() {
        let mut b = SparseBuilder::new(3);
        b.finish_row();
        assert!(b.build().is_err());
    }
}
