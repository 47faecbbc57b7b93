//! Compressed sparse row matrices and the linear solvers used throughout.
//!
//! Direct solves go through faer's sparse LU; an unpreconditioned BiCGSTAB is
//! kept as a fallback for systems above [`DIRECT_SOLVE_LIMIT`] or when the
//! factorization breaks down.

use std::fmt::Write as _;

use faer::linalg::solvers::Solve;
use faer::sparse::{SparseColMat, Triplet};

use crate::error::{FemError, Result};

/// Systems with more unknowns than this are solved iteratively.
pub const DIRECT_SOLVE_LIMIT: usize = 100_000;

#[derive(Clone, Debug, PartialEq)]
pub struct CsrMatrix {
    nrows: usize,
    ncols: usize,
    indptr: Vec<usize>,
    indices: Vec<usize>,
    data: Vec<f64>,
}

impl CsrMatrix {
    /// Builds a matrix from `(row, col, value)` triplets. Duplicates are summed
    /// in insertion order, so assembly order fixes the floating point result.
    pub fn from_triplets(nrows: usize, ncols: usize, triplets: &[(usize, usize, f64)]) -> Self {
        let mut counts = vec![0usize; nrows + 1];
        for &(r, c, _) in triplets {
            assert!(r < nrows && c < ncols, "triplet ({r}, {c}) out of bounds");
            counts[r + 1] += 1;
        }
        for i in 0..nrows {
            counts[i + 1] += counts[i];
        }
        let mut order = vec![0usize; triplets.len()];
        let mut next = counts.clone();
        for (t, &(r, _, _)) in triplets.iter().enumerate() {
            order[next[r]] = t;
            next[r] += 1;
        }
        let mut indptr = Vec::with_capacity(nrows + 1);
        let mut indices = Vec::new();
        let mut data = Vec::new();
        indptr.push(0);
        let mut row: Vec<(usize, f64)> = Vec::new();
        for r in 0..nrows {
            row.clear();
            row.extend(order[counts[r]..counts[r + 1]].iter().map(|&t| {
                let (_, c, v) = triplets[t];
                (c, v)
            }));
            row.sort_by_key(|&(c, _)| c);
            let mut i = 0;
            while i < row.len() {
                let c = row[i].0;
                let mut v = 0.0;
                while i < row.len() && row[i].0 == c {
                    v += row[i].1;
                    i += 1;
                }
                indices.push(c);
                data.push(v);
            }
            indptr.push(indices.len());
        }
        Self {
            nrows,
            ncols,
            indptr,
            indices,
            data,
        }
    }

    pub fn nrows(&self) -> usize {
        self.nrows
    }

    pub fn ncols(&self) -> usize {
        self.ncols
    }

    pub fn nnz(&self) -> usize {
        self.data.len()
    }

    pub fn row(&self, r: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let range = self.indptr[r]..self.indptr[r + 1];
        self.indices[range.clone()]
            .iter()
            .copied()
            .zip(self.data[range].iter().copied())
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        let range = self.indptr[r]..self.indptr[r + 1];
        match self.indices[range.clone()].binary_search(&c) {
            Ok(pos) => self.data[range.start + pos],
            Err(_) => 0.0,
        }
    }

    pub fn triplets(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        (0..self.nrows).flat_map(move |r| self.row(r).map(move |(c, v)| (r, c, v)))
    }

    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.ncols);
        (0..self.nrows)
            .map(|r| self.row(r).map(|(c, v)| v * x[c]).sum())
            .collect()
    }

    pub fn transpose(&self) -> Self {
        let t: Vec<(usize, usize, f64)> = self.triplets().map(|(r, c, v)| (c, r, v)).collect();
        Self::from_triplets(self.ncols, self.nrows, &t)
    }

    pub fn to_dense(&self) -> Vec<Vec<f64>> {
        let mut d = vec![vec![0.0; self.ncols]; self.nrows];
        for (r, c, v) in self.triplets() {
            d[r][c] = v;
        }
        d
    }

    /// `max |M - M^T|` entrywise.
    pub fn max_asymmetry(&self) -> f64 {
        self.triplets()
            .map(|(r, c, v)| (v - self.get(c, r)).abs())
            .fold(0.0, f64::max)
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0f64, |a, v| a.max(v.abs()))
    }

    /// Coordinate text format, one `row col value` line per stored entry.
    pub fn to_coordinate_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "% {} {} {}", self.nrows, self.ncols, self.nnz());
        for (r, c, v) in self.triplets() {
            let _ = writeln!(s, "{r} {c} {v:.16e}");
        }
        s
    }
}

/// Factorized square matrix, reusable across right-hand sides.
pub struct LinearSolver {
    matrix: CsrMatrix,
    lu: Option<faer::sparse::linalg::solvers::Lu<usize, f64>>,
}

impl std::fmt::Debug for LinearSolver {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("LinearSolver")
            .field("n", &self.matrix.nrows)
            .field("direct", &self.lu.is_some())
            .finish()
    }
}

impl LinearSolver {
    pub fn new(matrix: CsrMatrix) -> Result<Self> {
        if matrix.nrows != matrix.ncols {
            return Err(FemError::InvalidArgument("matrix is not square".into()));
        }
        let lu = if matrix.nrows <= DIRECT_SOLVE_LIMIT {
            let trip: Vec<Triplet<usize, usize, f64>> = matrix
                .triplets()
                .map(|(r, c, v)| Triplet::new(r, c, v))
                .collect();
            let csc = SparseColMat::<usize, f64>::try_new_from_triplets(
                matrix.nrows,
                matrix.ncols,
                &trip,
            )
            .map_err(|e| FemError::SingularSystem(format!("{e:?}")))?;
            // faer panics on an exactly zero pivot instead of returning an error
            let lu = std::panic::catch_unwind(std::panic::AssertUnwindSafe(|| csc.sp_lu()))
                .map_err(|_| FemError::SingularSystem("zero pivot in LU factorization".into()))?
                .map_err(|e| FemError::SingularSystem(format!("LU factorization failed: {e:?}")))?;
            Some(lu)
        } else {
            None
        };
        Ok(Self { matrix, lu })
    }

    pub fn matrix(&self) -> &CsrMatrix {
        &self.matrix
    }

    pub fn solve(&self, rhs: &[f64]) -> Result<Vec<f64>> {
        let n = self.matrix.nrows;
        if rhs.len() != n {
            return Err(FemError::InvalidArgument("rhs length mismatch".into()));
        }
        if n == 0 {
            return Ok(Vec::new());
        }
        if let Some(lu) = &self.lu {
            let mut x = faer::Mat::<f64>::from_fn(n, 1, |i, _| rhs[i]);
            lu.solve_in_place(x.as_mut());
            let sol: Vec<f64> = (0..n).map(|i| x[(i, 0)]).collect();
            let scale = inf_norm(rhs).max(f64::MIN_POSITIVE);
            let res = inf_norm(&residual(&self.matrix, &sol, rhs));
            if sol.iter().all(|v| v.is_finite()) && res <= 1e-6 * scale {
                return Ok(sol);
            }
        }
        let (sol, converged) = bicgstab(&self.matrix, rhs, 1e-13, 20 * n.max(100));
        if !converged {
            return Err(FemError::SingularSystem(format!(
                "direct and iterative solves failed on a {n}x{n} system"
            )));
        }
        Ok(sol)
    }
}

pub fn residual(a: &CsrMatrix, x: &[f64], b: &[f64]) -> Vec<f64> {
    a.mul_vec(x).iter().zip(b).map(|(ax, bi)| ax - bi).collect()
}

pub fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0f64, |a, x| a.max(x.abs()))
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Unpreconditioned BiCGSTAB. Returns the iterate and whether the relative
/// residual reached `tol`.
pub fn bicgstab(a: &CsrMatrix, b: &[f64], tol: f64, max_iter: usize) -> (Vec<f64>, bool) {
    let n = b.len();
    let mut x = vec![0.0; n];
    let bnorm = dot(b, b).sqrt();
    if bnorm == 0.0 {
        return (x, true);
    }
    let mut r = b.to_vec();
    let r_hat = r.clone();
    let (mut rho, mut alpha, mut omega) = (1.0, 1.0, 1.0);
    let mut v = vec![0.0; n];
    let mut p = vec![0.0; n];
    for _ in 0..max_iter {
        let rho_new = dot(&r_hat, &r);
        if rho_new == 0.0 {
            break;
        }
        let beta = (rho_new / rho) * (alpha / omega);
        rho = rho_new;
        for i in 0..n {
            p[i] = r[i] + beta * (p[i] - omega * v[i]);
        }
        v = a.mul_vec(&p);
        let denom = dot(&r_hat, &v);
        if denom == 0.0 {
            break;
        }
        alpha = rho / denom;
        let s: Vec<f64> = r.iter().zip(&v).map(|(ri, vi)| ri - alpha * vi).collect();
        if dot(&s, &s).sqrt() <= tol * bnorm {
            for i in 0..n {
                x[i] += alpha * p[i];
            }
            return (x, true);
        }
        let t = a.mul_vec(&s);
        let tt = dot(&t, &t);
        if tt == 0.0 {
            break;
        }
        omega = dot(&t, &s) / tt;
        for i in 0..n {
            x[i] += alpha * p[i] + omega * s[i];
            r[i] = s[i] - omega * t[i];
        }
        if dot(&r, &r).sqrt() <= tol * bnorm {
            return (x, true);
        }
        if omega == 0.0 {
            break;
        }
    }
    let res = residual(a, &x, b);
    let ok = dot(&res, &res).sqrt() <= tol * bnorm;
    (x, ok)
}
