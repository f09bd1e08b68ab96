//! Minimal sparse square matrix used as the graph-convolution propagation
//! operator. Entries are constant with respect to differentiation; only the
//! dense operand of `spmm` carries gradient.

/// Square sparse matrix stored as per-row `(col, weight)` lists.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseMat {
    n: usize,
    rows: Vec<Vec<(usize, f64)>>,
}

impl SparseMat {
    pub fn new(n: usize) -> Self {
        SparseMat {
            n,
            rows: vec![Vec::new(); n],
        }
    }

    pub fn size(&self) -> usize {
        self.n
    }

    /// Inserts an entry; entries within a row keep insertion order.
    pub fn push(&mut self, row: usize, col: usize, weight: f64) {
        assert!(row < self.n && col < self.n, "sparse index out of range");
        self.rows[row].push((col, weight));
    }

    pub fn row(&self, i: usize) -> &[(usize, f64)] {
        &self.rows[i]
    }

    pub fn nnz(&self) -> usize {
        self.rows.iter().map(|r| r.len()).sum()
    }

    /// `out[n x d] = self * dense[n x d]`.
    pub fn mul_dense(&self, dense: &[f64], d: usize, out: &mut [f64]) {
        assert_eq!(dense.len(), self.n * d);
        assert_eq!(out.len(), self.n * d);
        out.fill(0.0);
        for (i, row) in self.rows.iter().enumerate() {
            let out_row = &mut out[i * d..(i + 1) * d];
            for &(j, w) in row {
                let src = &dense[j * d..(j + 1) * d];
                for (o, &s) in out_row.iter_mut().zip(src) {
                    *o += w * s;
                }
            }
        }
    }

    /// `out[n x d] += self^T * dense[n x d]`; the transpose is applied by
    /// scattering, without materializing it.
    pub fn mul_transpose_dense_acc(&self, dense: &[f64], d: usize, out: &mut [f64]) {
        assert_eq!(dense.len(), self.n * d);
        assert_eq!(out.len(), self.n * d);
        for (i, row) in self.rows.iter().enumerate() {
            let src = &dense[i * d..(i + 1) * d];
            for &(j, w) in row {
                let dst = &mut out[j * d..(j + 1) * d];
                for (o, &s) in dst.iter_mut().zip(src) {
                    *o += w * s;
                }
            }
        }
    }

    /// Dense `n x n` copy, for tests and small-scale inspection.
    pub fn to_dense(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.n * self.n];
        for (i, row) in self.rows.iter().enumerate() {
            for &(j, w) in row {
                out[i * self.n + j] += w;
            }
        }
        out
    }
}
