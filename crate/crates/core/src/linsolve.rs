//! Symmetric positive definite solves.
//!
//! The direct path is a skyline (variable band) Cholesky factorization. Row-major
//! grid numbering keeps the profile at roughly one grid row, so no reordering is done.

use thiserror::Error;

use crate::sparse::{norm2, SparseMatrix};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Method {
    Direct,
    /// Conjugate gradients with Jacobi preconditioning.
    Cg,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SolverOptions {
    pub method: Method,
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            method: Method::Direct,
            tol: 1e-12,
            max_iter: 20_000,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SolveReport {
    pub method: Method,
    pub iterations: usize,
    pub relative_residual: f64,
    pub reused_factorization: bool,
}

#[derive(Debug, Error)]
pub enum SolveError {
    #[error("factorization breakdown at row {row} (pivot {pivot:e})")]
    Breakdown { row: usize, pivot: f64 },
    #[error("conjugate gradients did not converge: {report:?}")]
    NotConverged { report: SolveReport },
    #[error("singular coarse system")]
    Singular,
}

/// Lower Cholesky factor `A = L Lᵀ` stored row by row from each row's first nonzero.
#[derive(Clone, Debug)]
pub struct Cholesky {
    n: usize,
    first: Vec<usize>,
    start: Vec<usize>,
    data: Vec<f64>,
}

impl Cholesky {
    pub fn factor(a: &SparseMatrix) -> Result<Self, SolveError> {
        let n = a.order();
        let mut first = vec![0usize; n];
        for (r, f) in first.iter_mut().enumerate() {
            *f = a.row(r).map(|(c, _)| c).filter(|&c| c <= r).min().unwrap_or(r);
        }
        // Cholesky fill never leaves the row envelope [first[r], r].
        let mut start = vec![0usize; n + 1];
        for r in 0..n {
            start[r + 1] = start[r] + (r - first[r] + 1);
        }
        let mut data = vec![0.0; start[n]];
        for r in 0..n {
            for (c, v) in a.row(r) {
                if c <= r {
                    data[start[r] + (c - first[r])] = v;
                }
            }
        }
        let mut chol = Self {
            n,
            first,
            start,
            data,
        };
        chol.factor_in_place()?;
        Ok(chol)
    }

    fn factor_in_place(&mut self) -> Result<(), SolveError> {
        for i in 0..self.n {
            let fi = self.first[i];
            let si = self.start[i];
            for k in fi..i {
                let fk = self.first[k];
                let sk = self.start[k];
                let p0 = fi.max(fk);
                let len = k - p0;
                let (head, tail) = self.data.split_at_mut(si);
                let row_k = &head[sk + (p0 - fk)..sk + (p0 - fk) + len];
                let row_i = &tail[(p0 - fi)..(p0 - fi) + len];
                let s: f64 = row_i.iter().zip(row_k).map(|(x, y)| x * y).sum();
                let lkk = head[sk + (k - fk)];
                tail[k - fi] = (tail[k - fi] - s) / lkk;
            }
            let row_i = &self.data[si..si + (i - fi)];
            let s: f64 = row_i.iter().map(|x| x * x).sum();
            let d = self.data[si + (i - fi)] - s;
            if !(d > 0.0) {
                return Err(SolveError::Breakdown { row: i, pivot: d });
            }
            self.data[si + (i - fi)] = d.sqrt();
        }
        Ok(())
    }

    pub fn order(&self) -> usize {
        self.n
    }

    /// Smallest and largest diagonal pivot of `L` (squared gives the Cholesky pivots).
    pub fn pivot_range(&self) -> (f64, f64) {
        (0..self.n)
            .map(|i| self.data[self.start[i] + (i - self.first[i])])
            .fold((f64::INFINITY, 0.0), |(lo, hi), d| (lo.min(d), hi.max(d)))
    }

    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let mut x = b.to_vec();
        self.solve_many_in_place(&mut x, 1);
        x
    }

    /// Solves for `r` right-hand sides stored row-major (`x[i * r + j]` is row `i`, column `j`).
    pub fn solve_many_in_place(&self, x: &mut [f64], r: usize) {
        assert_eq!(x.len(), self.n * r);
        let mut acc = vec![0.0; r];
        for i in 0..self.n {
            let fi = self.first[i];
            let si = self.start[i];
            acc.copy_from_slice(&x[i * r..(i + 1) * r]);
            for k in fi..i {
                let l = self.data[si + (k - fi)];
                if l != 0.0 {
                    let xk = &x[k * r..(k + 1) * r];
                    acc.iter_mut().zip(xk).for_each(|(a, v)| *a -= l * v);
                }
            }
            let d = self.data[si + (i - fi)];
            x[i * r..(i + 1) * r]
                .iter_mut()
                .zip(&acc)
                .for_each(|(xi, a)| *xi = a / d);
        }
        for i in (0..self.n).rev() {
            let fi = self.first[i];
            let si = self.start[i];
            let d = self.data[si + (i - fi)];
            x[i * r..(i + 1) * r].iter_mut().for_each(|v| *v /= d);
            acc.copy_from_slice(&x[i * r..(i + 1) * r]);
            for k in fi..i {
                let l = self.data[si + (k - fi)];
                if l != 0.0 {
                    x[k * r..(k + 1) * r]
                        .iter_mut()
                        .zip(&acc)
                        .for_each(|(xk, a)| *xk -= l * a);
                }
            }
        }
    }
}

fn relative_residual(a: &SparseMatrix, x: &[f64], b: &[f64]) -> f64 {
    let ax = a.mul_vec(x);
    let r: Vec<f64> = ax.iter().zip(b).map(|(p, q)| p - q).collect();
    let nb = norm2(b);
    if nb == 0.0 {
        norm2(&r)
    } else {
        norm2(&r) / nb
    }
}

/// Solves `A x = b` for symmetric positive definite `A`.
pub fn solve_spd(
    a: &SparseMatrix,
    b: &[f64],
    opts: &SolverOptions,
) -> Result<(Vec<f64>, SolveReport), SolveError> {
    match opts.method {
        Method::Direct => {
            let chol = Cholesky::factor(a)?;
            let x = chol.solve(b);
            let report = SolveReport {
                method: Method::Direct,
                iterations: 1,
                relative_residual: relative_residual(a, &x, b),
                reused_factorization: false,
            };
            Ok((x, report))
        }
        Method::Cg => conjugate_gradient(a, b, opts.tol, opts.max_iter),
    }
}

fn conjugate_gradient(
    a: &SparseMatrix,
    b: &[f64],
    tol: f64,
    max_iter: usize,
) -> Result<(Vec<f64>, SolveReport), SolveError> {
    let n = a.order();
    let inv_diag: Vec<f64> = a
        .diag()
        .iter()
        .map(|&d| if d > 0.0 { 1.0 / d } else { 1.0 })
        .collect();
    let nb = norm2(b);
    let mut x = vec![0.0; n];
    let mut report = SolveReport {
        method: Method::Cg,
        iterations: 0,
        relative_residual: 0.0,
        reused_factorization: false,
    };
    if nb == 0.0 {
        return Ok((x, report));
    }
    let mut r = b.to_vec();
    let mut z: Vec<f64> = r.iter().zip(&inv_diag).map(|(r, d)| r * d).collect();
    let mut p = z.clone();
    let mut rz: f64 = r.iter().zip(&z).map(|(a, b)| a * b).sum();
    let mut ap = vec![0.0; n];
    for it in 1..=max_iter {
        a.mul_vec_into(&p, &mut ap);
        let pap: f64 = p.iter().zip(&ap).map(|(a, b)| a * b).sum();
        if !(pap > 0.0) {
            return Err(SolveError::Breakdown { row: it, pivot: pap });
        }
        let alpha = rz / pap;
        for i in 0..n {
            x[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
        }
        let rel = norm2(&r) / nb;
        report.iterations = it;
        report.relative_residual = rel;
        if rel <= tol {
            // recompute from scratch so the reported residual is the true one
            report.relative_residual = relative_residual(a, &x, b);
            return Ok((x, report));
        }
        for i in 0..n {
            z[i] = r[i] * inv_diag[i];
        }
        let rz_new: f64 = r.iter().zip(&z).map(|(a, b)| a * b).sum();
        let beta = rz_new / rz;
        rz = rz_new;
        for i in 0..n {
            p[i] = z[i] + beta * p[i];
        }
    }
    Err(SolveError::NotConverged { report })
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DMatrix;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identity_system() {
        let a = SparseMatrix::identity(5);
        let b = vec![1.0, -2.0, 3.0, 0.5, 7.0];
        let (x, _) = solve_spd(&a, &b, &SolverOptions::default()).unwrap();
        assert_eq!(x, b);
    }

    #[test]
    fn two_by_two() {
        let a = SparseMatrix::from_dense(&DMatrix::from_row_slice(2, 2, &[2.0, 1.0, 1.0, 2.0]));
        for method in [Method::Direct, Method::Cg] {
            let opts = SolverOptions {
                method,
                ..Default::default()
            };
            let (x, rep) = solve_spd(&a, &[3.0, 3.0], &opts).unwrap();
            assert!((x[0] - 1.0).abs() < 1e-14 && (x[1] - 1.0).abs() < 1e-14);
            assert!(rep.relative_residual < 1e-14);
        }
    }

    fn random_spd(n: usize, seed: u64) -> SparseMatrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = DMatrix::from_fn(n, n, |_, _| rng.gen_range(-1.0..1.0));
        let a = &g * g.transpose() + DMatrix::identity(n, n) * n as f64;
        SparseMatrix::from_dense(&a)
    }

    #[test]
    fn direct_and_cg_agree() {
        let a = random_spd(50, 11);
        let b: Vec<f64> = (0..50).map(|i| (i as f64 * 0.37).sin()).collect();
        let (xd, _) = solve_spd(&a, &b, &SolverOptions::default()).unwrap();
        let (xc, rep) = solve_spd(
            &a,
            &b,
            &SolverOptions {
                method: Method::Cg,
                tol: 1e-12,
                max_iter: 20_000,
            },
        )
        .unwrap();
        assert!(rep.relative_residual <= 1e-12);
        let diff = xd.iter().zip(&xc).fold(0.0f64, |m, (p, q)| m.max((p - q).abs()));
        assert!(diff < 1e-10, "diff {diff}");
    }

    #[test]
    fn direct_is_deterministic() {
        let a = random_spd(30, 5);
        let b: Vec<f64> = (0..30).map(|i| i as f64).collect();
        let (x1, _) = solve_spd(&a, &b, &SolverOptions::default()).unwrap();
        let (x2, _) = solve_spd(&a, &b, &SolverOptions::default()).unwrap();
        assert_eq!(x1, x2);
    }

    #[test]
    fn indefinite_breaks_down() {
        let a = SparseMatrix::from_dense(&DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]));
        assert!(matches!(
            solve_spd(&a, &[1.0, 1.0], &SolverOptions::default()),
            Err(SolveError::Breakdown { row: 1, .. })
        ));
    }

    #[test]
    fn multiple_rhs_match_single() {
        let a = random_spd(20, 2);
        let chol = Cholesky::factor(&a).unwrap();
        let r = 3;
        let mut block: Vec<f64> = (0..20 * r).map(|k| (k as f64).cos()).collect();
        let cols: Vec<Vec<f64>> = (0..r)
            .map(|j| (0..20).map(|i| block[i * r + j]).collect())
            .collect();
        chol.solve_many_in_place(&mut block, r);
        for (j, col) in cols.iter().enumerate() {
            let x = chol.solve(col);
            for i in 0..20 {
                assert!((x[i] - block[i * r + j]).abs() < 1e-13);
            }
        }
    }
}
