//! Compressed sparse row storage for the assembled finite element operators.
//!
//! All operators built from one mesh share the same sparsity pattern (every
//! P1 tetrahedron couples all four of its vertices), so linear combinations
//! such as the Monodomain system matrix are formed directly on the value
//! arrays.

#[derive(Clone, Debug, PartialEq)]
pub struct CsrMatrix {
    n: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    values: Vec<f64>,
}

impl CsrMatrix {
    /// Builds a square matrix from (row, col, value) triplets, summing duplicates.
    pub fn from_triplets(n: usize, triplets: &[(usize, usize, f64)]) -> Self {
        let mut counts = vec![0usize; n + 1];
        for &(i, _, _) in triplets {
            counts[i + 1] += 1;
        }
        for i in 0..n {
            counts[i + 1] += counts[i];
        }
        let mut cols = vec![0usize; triplets.len()];
        let mut vals = vec![0.0; triplets.len()];
        let mut next = counts.clone();
        for &(i, j, v) in triplets {
            cols[next[i]] = j;
            vals[next[i]] = v;
            next[i] += 1;
        }

        let mut row_ptr = Vec::with_capacity(n + 1);
        let mut col_idx = Vec::with_capacity(triplets.len() / 2);
        let mut values = Vec::with_capacity(triplets.len() / 2);
        row_ptr.push(0);
        let mut scratch: Vec<(usize, f64)> = Vec::new();
        for i in 0..n {
            scratch.clear();
            scratch.extend((counts[i]..counts[i + 1]).map(|k| (cols[k], vals[k])));
            scratch.sort_by_key(|&(j, _)| j);
            for &(j, v) in &scratch {
                if col_idx.len() > row_ptr[i] && *col_idx.last().unwrap() == j {
                    *values.last_mut().unwrap() += v;
                } else {
                    col_idx.push(j);
                    values.push(v);
                }
            }
            row_ptr.push(col_idx.len());
        }
        Self {
            n,
            row_ptr,
            col_idx,
            values,
        }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let range = self.row_ptr[i]..self.row_ptr[i + 1];
        self.col_idx[range.clone()]
            .iter()
            .copied()
            .zip(self.values[range].iter().copied())
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        let range = self.row_ptr[i]..self.row_ptr[i + 1];
        match self.col_idx[range.clone()].binary_search(&j) {
            Ok(k) => self.values[range.start + k],
            Err(_) => 0.0,
        }
    }

    pub fn same_pattern(&self, other: &CsrMatrix) -> bool {
        self.n == other.n && self.row_ptr == other.row_ptr && self.col_idx == other.col_idx
    }

    /// y = A x
    pub fn mul_vec(&self, x: &[f64], y: &mut [f64]) {
        debug_assert_eq!(x.len(), self.n);
        debug_assert_eq!(y.len(), self.n);
        for (i, yi) in y.iter_mut().enumerate() {
            let mut acc = 0.0;
            for k in self.row_ptr[i]..self.row_ptr[i + 1] {
                acc += self.values[k] * x[self.col_idx[k]];
            }
            *yi = acc;
        }
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.n];
        self.mul_vec(x, &mut y);
        y
    }

    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.n).map(|i| self.get(i, i)).collect()
    }

    /// Returns `Σ_k coeffs[k] · mats[k] + diag(shift)`; all matrices must share a pattern
    /// that contains the diagonal.
    pub fn combine(mats: &[(&CsrMatrix, f64)], shift: Option<&[f64]>) -> CsrMatrix {
        let (first, _) = mats[0];
        let mut out = first.clone();
        out.values.iter_mut().for_each(|v| *v = 0.0);
        for &(m, c) in mats {
            assert!(m.same_pattern(first), "operators must share a sparsity pattern");
            for (o, v) in out.values.iter_mut().zip(&m.values) {
                *o += c * v;
            }
        }
        if let Some(d) = shift {
            for i in 0..out.n {
                let range = out.row_ptr[i]..out.row_ptr[i + 1];
                let k = out.col_idx[range.clone()]
                    .binary_search(&i)
                    .expect("pattern must contain the diagonal");
                out.values[range.start + k] += d[i];
            }
        }
        out
    }

    pub fn transpose(&self) -> CsrMatrix {
        let mut trip = Vec::with_capacity(self.nnz());
        for i in 0..self.n {
            for (j, v) in self.row(i) {
                trip.push((j, i, v));
            }
        }
        CsrMatrix::from_triplets(self.n, &trip)
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Largest entrywise difference to another matrix (patterns may differ).
    pub fn max_abs_diff(&self, other: &CsrMatrix) -> f64 {
        let mut m: f64 = 0.0;
        for i in 0..self.n {
            for (j, v) in self.row(i) {
                m = m.max((v - other.get(i, j)).abs());
            }
            for (j, v) in other.row(i) {
                m = m.max((v - self.get(i, j)).abs());
            }
        }
        m
    }

    pub fn to_dense(&self) -> nalgebra::DMatrix<f64> {
        let mut d = nalgebra::DMatrix::zeros(self.n, self.n);
        for i in 0..self.n {
            for (j, v) in self.row(i) {
                d[(i, j)] = v;
            }
        }
        d
    }

    /// Z^T A Z for a dense column block Z (n × k).
    pub fn congruence(&self, z: &nalgebra::DMatrix<f64>) -> nalgebra::DMatrix<f64> {
        let az = self.mul_dense(z);
        z.transpose() * az
    }

    /// A Z for a dense column block Z (n × k).
    pub fn mul_dense(&self, z: &nalgebra::DMatrix<f64>) -> nalgebra::DMatrix<f64> {
        assert_eq!(z.nrows(), self.n);
        let mut out = nalgebra::DMatrix::zeros(self.n, z.ncols());
        for c in 0..z.ncols() {
            self.mul_vec(z.column(c).as_slice(), out.column_mut(c).as_mut_slice());
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duplicates_are_summed_and_rows_sorted() {
        let a = CsrMatrix::from_triplets(
            3,
            &[(0, 2, 1.0), (0, 0, 2.0), (0, 2, 3.0), (2, 1, -1.0), (1, 1, 5.0)],
        );
        assert_eq!(a.nnz(), 4);
        assert_eq!(a.get(0, 2), 4.0);
        assert_eq!(a.get(0, 1), 0.0);
        assert_eq!(a.row(0).map(|(j, _)| j).collect::<Vec<_>>(), vec![0, 2]);
        assert_eq!(a.apply(&[1.0, 1.0, 1.0]), vec![6.0, 5.0, -1.0]);
    }

    #[test]
    fn combine_with_diagonal_shift() {
        let a = CsrMatrix::from_triplets(2, &[(0, 0, 1.0), (0, 1, 1.0), (1, 0, 1.0), (1, 1, 1.0)]);
        let b = CsrMatrix::from_triplets(2, &[(0, 0, 2.0), (0, 1, -1.0), (1, 0, -1.0), (1, 1, 2.0)]);
        let c = CsrMatrix::combine(&[(&a, 2.0), (&b, 1.0)], Some(&[10.0, 20.0]));
        assert_eq!(c.get(0, 0), 14.0);
        assert_eq!(c.get(0, 1), 1.0);
        assert_eq!(c.get(1, 1), 24.0);
    }

    #[test]
    fn transpose_of_nonsymmetric() {
        let a = CsrMatrix::from_triplets(2, &[(0, 1, 3.0), (1, 1, 1.0)]);
        let t = a.transpose();
        assert_eq!(t.get(1, 0), 3.0);
        assert_eq!(t.get(0, 1), 0.0);
        assert_eq!(a.max_abs_diff(&t), 3.0);
    }
}
