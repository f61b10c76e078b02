//! Thin wrapper over faer's sparse Cholesky for the symmetric systems used here.

use faer::linalg::solvers::Solve;
use faer::sparse::{SparseColMat, Triplet};
use faer::{Mat, Side};

use crate::error::{Error, Result};

pub type CscMatrix = SparseColMat<usize, f64>;

/// Accumulates `(row, col, value)` entries; duplicates are summed on build.
#[derive(Debug, Clone)]
pub struct TripletBuilder {
    n: usize,
    entries: Vec<Triplet<usize, usize, f64>>,
}

impl TripletBuilder {
    pub fn new(n: usize) -> Self {
        Self {
            n,
            entries: Vec::new(),
        }
    }

    pub fn with_capacity(n: usize, capacity: usize) -> Self {
        Self {
            n,
            entries: Vec::with_capacity(capacity),
        }
    }

    pub fn add(&mut self, row: usize, col: usize, value: f64) {
        self.entries.push(Triplet::new(row, col, value));
    }

    /// Adds `value` at `(i, j)` and `(j, i)` (once when `i == j`).
    pub fn add_sym(&mut self, i: usize, j: usize, value: f64) {
        self.add(i, j, value);
        if i != j {
            self.add(j, i, value);
        }
    }

    pub fn build(&self) -> Result<CscMatrix> {
        SparseColMat::try_new_from_triplets(self.n, self.n, &self.entries)
            .map_err(|e| Error::Solver(format!("matrix assembly failed: {e:?}")))
    }
}

/// `y = A x` for a square sparse matrix.
pub fn mul_vec(a: &CscMatrix, x: &[f64]) -> Vec<f64> {
    let mut y = vec![0.0; a.nrows()];
    let a = a.as_ref();
    for j in 0..a.ncols() {
        let xj = x[j];
        if xj == 0.0 {
            continue;
        }
        for (i, v) in a.row_idx_of_col(j).zip(a.val_of_col(j)) {
            y[i] += v * xj;
        }
    }
    y
}

/// Sparse `L Lᵀ` factorization with a fill-reducing ordering.
#[derive(Debug, Clone)]
pub struct Cholesky {
    n: usize,
    llt: faer::sparse::linalg::solvers::Llt<usize, f64>,
}

impl Cholesky {
    /// Fails when the matrix is not numerically positive definite.
    pub fn factor(a: &CscMatrix) -> Result<Self> {
        let llt = a
            .sp_cholesky(Side::Lower)
            .map_err(|e| Error::Solver(format!("cholesky factorization failed: {e:?}")))?;
        Ok(Self { n: a.nrows(), llt })
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    /// Solves for `k` right-hand sides stored column-major in `rhs` (length `n k`).
    pub fn solve_in_place(&self, rhs: &mut [f64], k: usize) {
        assert_eq!(rhs.len(), self.n * k, "rhs length");
        let mut m = Mat::<f64>::from_fn(self.n, k, |i, j| rhs[j * self.n + i]);
        self.llt.solve_in_place(m.as_mut());
        for j in 0..k {
            for i in 0..self.n {
                rhs[j * self.n + i] = m[(i, j)];
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn factor_and_solve_small_spd() {
        let mut b = TripletBuilder::new(3);
        b.add(0, 0, 4.0);
        b.add(1, 1, 3.0);
        b.add(2, 2, 2.0);
        b.add_sym(0, 1, 1.0);
        b.add_sym(1, 2, -0.5);
        b.add(2, 2, 1.0); // duplicate, summed
        let a = b.build().unwrap();
        let x = [1.0, -2.0, 0.5];
        let mut rhs = mul_vec(&a, &x);
        Cholesky::factor(&a).unwrap().solve_in_place(&mut rhs, 1);
        for (u, v) in rhs.iter().zip(x) {
            assert!((u - v).abs() < 1e-12);
        }
    }

    #[test]
    fn indefinite_matrix_fails_to_factor() {
        let mut b = TripletBuilder::new(2);
        b.add(0, 0, 1.0);
        b.add(1, 1, -1.0);
        assert!(Cholesky::factor(&b.build().unwrap()).is_err());
    }
}
