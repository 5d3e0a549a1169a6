//! Compressed sparse row storage and a triplet-based builder.

use rayon::prelude::*;

/// Sparse matrix in CSR format. Column indices are sorted and unique per row.
#[derive(Debug, Clone, PartialEq)]
pub struct CsrMatrix {
    pub nrows: usize,
    pub ncols: usize,
    pub row_offsets: Vec<usize>,
    pub col_indices: Vec<usize>,
    pub values: Vec<f64>,
}

impl CsrMatrix {
    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn row(&self, i: usize) -> (&[usize], &[f64]) {
        let lo = self.row_offsets[i];
        let hi = self.row_offsets[i + 1];
        (&self.col_indices[lo..hi], &self.values[lo..hi])
    }

    pub fn row_mut(&mut self, i: usize) -> (&[usize], &mut [f64]) {
        let lo = self.row_offsets[i];
        let hi = self.row_offsets[i + 1];
        (&self.col_indices[lo..hi], &mut self.values[lo..hi])
    }

    /// y = A x
    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.ncols);
        let mut y = vec![0.0; self.nrows];
        self.mul_vec_into(x, &mut y);
        y
    }

    /// Row-parallel matvec. Each row is summed sequentially, so the result
    /// does not depend on the thread schedule.
    pub fn mul_vec_into(&self, x: &[f64], y: &mut [f64]) {
        y.par_iter_mut().enumerate().for_each(|(i, yi)| {
            let (cols, vals) = (
                &self.col_indices[self.row_offsets[i]..self.row_offsets[i + 1]],
                &self.values[self.row_offsets[i]..self.row_offsets[i + 1]],
            );
            let mut s = 0.0;
            for (&c, &v) in cols.iter().zip(vals) {
                s += v * x[c];
            }
            *yi = s;
        });
    }

    pub fn diagonal(&self) -> Vec<f64> {
        let mut d = vec![0.0; self.nrows];
        for i in 0..self.nrows {
            let (cols, vals) = self.row(i);
            if let Ok(k) = cols.binary_search(&i) {
                d[i] = vals[k];
            }
        }
        d
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        let (cols, vals) = self.row(i);
        match cols.binary_search(&j) {
            Ok(k) => vals[k],
            Err(_) => 0.0,
        }
    }

    /// Max absolute entry; a cheap scale proxy for tolerances.
    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }

    pub fn is_symmetric(&self, tol: f64) -> bool {
        for i in 0..self.nrows {
            let (cols, vals) = self.row(i);
            for (&j, &v) in cols.iter().zip(vals) {
                if (v - self.get(j, i)).abs() > tol {
                    return false;
                }
            }
        }
        true
    }

    pub fn identity(n: usize) -> Self {
        CsrMatrix {
            nrows: n,
            ncols: n,
            row_offsets: (0..=n).collect(),
            col_indices: (0..n).collect(),
            values: vec![1.0; n],
        }
    }

    pub fn to_dense(&self) -> Vec<Vec<f64>> {
        let mut d = vec![vec![0.0; self.ncols]; self.nrows];
        for i in 0..self.nrows {
            let (cols, vals) = self.row(i);
            for (&c, &v) in cols.iter().zip(vals) {
                d[i][c] = v;
            }
        }
        d
    }
}

/// Accumulates (row, col, value) triplets; duplicates are summed.
#[derive(Debug, Clone)]
pub struct TripletBuilder {
    nrows: usize,
    ncols: usize,
    entries: Vec<(usize, usize, f64)>,
}

impl TripletBuilder {
    pub fn new(nrows: usize, ncols: usize) -> Self {
        TripletBuilder {
            nrows,
            ncols,
            entries: Vec::new(),
        }
    }

    pub fn push(&mut self, row: usize, col: usize, value: f64) {
        debug_assert!(row < self.nrows && col < self.ncols);
        if value != 0.0 {
            self.entries.push((row, col, value));
        }
    }

    /// Merge another builder with row/column offsets; used for block systems.
    pub fn push_block(&mut self, row0: usize, col0: usize, block: &CsrMatrix, scale: f64) {
        for i in 0..block.nrows {
            let (cols, vals) = block.row(i);
            for (&c, &v) in cols.iter().zip(vals) {
                self.push(row0 + i, col0 + c, scale * v);
            }
        }
    }

    pub fn build(mut self) -> CsrMatrix {
        self.entries.sort_unstable_by(|a, b| (a.0, a.1).cmp(&(b.0, b.1)));
        let mut row_offsets = vec![0usize; self.nrows + 1];
        let mut col_indices = Vec::new();
        let mut values = Vec::new();
        let mut it = self.entries.iter().peekable();
        for row in 0..self.nrows {
            while let Some(&&(r, c, _)) = it.peek() {
                if r != row {
                    break;
                }
                let mut acc = 0.0;
                while let Some(&&(r2, c2, v2)) = it.peek() {
                    if r2 == row && c2 == c {
                        acc += v2;
                        it.next();
                    } else {
                        break;
                    }
                }
                col_indices.push(c);
                values.push(acc);
            }
            row_offsets[row + 1] = col_indices.len();
        }
        CsrMatrix {
            nrows: self.nrows,
            ncols: self.ncols,
            row_offsets,
            col_indices,
            values,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builder_sums_duplicates_and_sorts() {
        let mut b = TripletBuilder::new(2, 2);
        b.push(0, 1, 2.0);
        b.push(0, 0, 1.0);
        b.push(0, 1, 3.0);
        b.push(1, 1, 4.0);
        let a = b.build();
        assert_eq!(a.row_offsets, vec![0, 2, 3]);
        assert_eq!(a.col_indices, vec![0, 1, 1]);
        assert_eq!(a.values, vec![1.0, 5.0, 4.0]);
        assert_eq!(a.get(0, 1), 5.0);
        assert_eq!(a.get(1, 0), 0.0);
    }

    #[test]
    fn matvec_matches_dense() {
        let mut b = TripletBuilder::new(3, 3);
        for (i, j, v) in [(0, 0, 2.0), (0, 2, -1.0), (1, 1, 3.0), (2, 0, 1.0), (2, 2, 5.0)] {
            b.push(i, j, v);
        }
        let a = b.build();
        let y = a.mul_vec(&[1.0, 2.0, 3.0]);
        assert_eq!(y, vec![-1.0, 6.0, 16.0]);
    }

    #[test]
    fn symmetry_check() {
        let mut b = TripletBuilder::new(2, 2);
        b.push(0, 1, 1.0);
        b.push(1, 0, 1.0);
        b.push(0, 0, 2.0);
        assert!(b.build().is_symmetric(1e-14));
    }
}
