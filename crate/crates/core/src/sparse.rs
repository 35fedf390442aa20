//! Sparse operator products against dense column-major matrices.
//!
//! Every generator in the double-well problem is banded in the Fock basis, so
//! the stochastic integrator multiplies through these instead of dense gemm.

use crate::hilbert::{CMatrix, C64};

#[derive(Debug, Clone)]
pub struct SparseOp {
    n: usize,
    // CSR: row i holds (col, value) pairs in row_ptr[i]..row_ptr[i + 1].
    row_ptr: Vec<usize>,
    row_entries: Vec<(usize, C64)>,
    // CSC: column j holds (row, value) pairs.
    col_ptr: Vec<usize>,
    col_entries: Vec<(usize, C64)>,
}

impl SparseOp {
    pub fn from_dense(m: &CMatrix) -> Self {
        let n = m.nrows();
        let mut row_ptr = Vec::with_capacity(n + 1);
        let mut row_entries = Vec::new();
        row_ptr.push(0);
        for i in 0..n {
            for j in 0..n {
                let v = m[(i, j)];
                if v.re != 0.0 || v.im != 0.0 {
                    row_entries.push((j, v));
                }
            }
            row_ptr.push(row_entries.len());
        }
        let mut col_ptr = Vec::with_capacity(n + 1);
        let mut col_entries = Vec::new();
        col_ptr.push(0);
        for j in 0..n {
            for i in 0..n {
                let v = m[(i, j)];
                if v.re != 0.0 || v.im != 0.0 {
                    col_entries.push((i, v));
                }
            }
            col_ptr.push(col_entries.len());
        }
        Self {
            n,
            row_ptr,
            row_entries,
            col_ptr,
            col_entries,
        }
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn nnz(&self) -> usize {
        self.row_entries.len()
    }

    /// `out = self · d`.
    pub fn left_mul(&self, d: &CMatrix, out: &mut CMatrix) {
        let n = self.n;
        let d = d.as_slice();
        let out = out.as_mut_slice();
        for j in 0..n {
            let dcol = &d[j * n..(j + 1) * n];
            let ocol = &mut out[j * n..(j + 1) * n];
            for (i, o) in ocol.iter_mut().enumerate() {
                let mut acc = C64::new(0.0, 0.0);
                for &(k, s) in &self.row_entries[self.row_ptr[i]..self.row_ptr[i + 1]] {
                    acc += s * dcol[k];
                }
                *o = acc;
            }
        }
    }

    /// `out = d · self`.
    pub fn right_mul(&self, d: &CMatrix, out: &mut CMatrix) {
        let n = self.n;
        let d = d.as_slice();
        let out = out.as_mut_slice();
        for j in 0..n {
            let ocol = &mut out[j * n..(j + 1) * n];
            ocol.fill(C64::new(0.0, 0.0));
            for &(k, s) in &self.col_entries[self.col_ptr[j]..self.col_ptr[j + 1]] {
                let dcol = &d[k * n..(k + 1) * n];
                for (o, v) in ocol.iter_mut().zip(dcol) {
                    *o += s * v;
                }
            }
        }
    }

    /// `tr(self · d)`.
    pub fn trace_mul(&self, d: &CMatrix) -> C64 {
        let mut acc = C64::new(0.0, 0.0);
        for i in 0..self.n {
            for &(k, s) in &self.row_entries[self.row_ptr[i]..self.row_ptr[i + 1]] {
                acc += s * d[(k, i)];
            }
        }
        acc
    }
}

/// LU factors of a banded matrix without pivoting.
///
/// Only valid when every leading minor is nonsingular; the Cayley
/// denominators `I + i·K` with hermitian `K` have a positive definite
/// hermitian part, which guarantees it.
#[derive(Debug, Clone)]
pub struct BandedLu {
    n: usize,
    bw: usize,
    // row i, column j stored at i * (2 bw + 1) + (j + bw - i)
    band: Vec<C64>,
}

impl BandedLu {
    pub fn factor(m: &CMatrix) -> Self {
        let n = m.nrows();
        let mut bw = 0;
        for j in 0..n {
            for i in 0..n {
                let v = m[(i, j)];
                if v.re != 0.0 || v.im != 0.0 {
                    bw = bw.max(i.abs_diff(j));
                }
            }
        }
        let width = 2 * bw + 1;
        let mut band = vec![C64::new(0.0, 0.0); n * width];
        for i in 0..n {
            for j in i.saturating_sub(bw)..(i + bw + 1).min(n) {
                band[i * width + j + bw - i] = m[(i, j)];
            }
        }
        let at = |i: usize, j: usize| i * width + j + bw - i;
        for k in 0..n {
            let pivot = band[at(k, k)];
            for i in k + 1..(k + bw + 1).min(n) {
                let l = band[at(i, k)] / pivot;
                band[at(i, k)] = l;
                for j in k + 1..(k + bw + 1).min(n) {
                    let u = band[at(k, j)];
                    band[at(i, j)] -= l * u;
                }
            }
        }
        Self { n, bw, band }
    }

    pub fn bandwidth(&self) -> usize {
        self.bw
    }

    /// Overwrites every column of `d` with the solution of `A x = d`.
    pub fn solve_in_place(&self, d: &mut CMatrix) {
        let (n, bw) = (self.n, self.bw);
        let width = 2 * bw + 1;
        let at = |i: usize, j: usize| i * width + j + bw - i;
        for col in d.as_mut_slice().chunks_exact_mut(n) {
            for i in 0..n {
                let mut acc = col[i];
                for k in i.saturating_sub(bw)..i {
                    acc -= self.band[at(i, k)] * col[k];
                }
                col[i] = acc;
            }
            for i in (0..n).rev() {
                let mut acc = col[i];
                for k in i + 1..(i + bw + 1).min(n) {
                    acc -= self.band[at(i, k)] * col[k];
                }
                col[i] = acc / self.band[at(i, i)];
            }
        }
    }
}
