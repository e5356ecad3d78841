//! Pseudoinverse, minimum-norm least squares and column-space projection.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Numerical tolerances shared by every solver.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Tolerances {
    /// Relative singular-value cutoff; `None` means `max(rows, cols) · ε`.
    pub rcond: Option<f64>,
    /// A solve is feasible when its relative residual is at most this.
    pub feas_tol: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Self {
            rcond: None,
            feas_tol: 1e-8,
        }
    }
}

/// Outcome of a minimum-norm solve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolveReport {
    pub solution: DVector<f64>,
    pub residual_norm: f64,
    /// `residual_norm / max(‖rhs‖, 1)`.
    pub relative_residual: f64,
    pub rank: usize,
    pub feasible: bool,
}

/// Thin SVD `A = U Σ Vᵀ` restricted to the singular values above the cutoff.
#[derive(Debug, Clone)]
pub struct Factorization {
    u: DMatrix<f64>,
    s: DVector<f64>,
    v: DMatrix<f64>,
    rows: usize,
    cols: usize,
    sigma_max: f64,
}

impl Factorization {
    pub fn new(a: &DMatrix<f64>, rcond: Option<f64>) -> Result<Self> {
        let (rows, cols) = a.shape();
        if a.iter().any(|x| !x.is_finite()) {
            return Err(Error::InvalidInput("matrix has non-finite entries".into()));
        }
        if rows == 0 || cols == 0 {
            return Ok(Self {
                u: DMatrix::zeros(rows, 0),
                s: DVector::zeros(0),
                v: DMatrix::zeros(cols, 0),
                rows,
                cols,
                sigma_max: 0.0,
            });
        }
        // Householder QR of the tall orientation, then a Jacobi SVD of the square factor R.
        let (u_full, s_full, v_full) = if rows >= cols {
            let (q, r) = a.clone().qr().unpack();
            let (ur, s, v) = jacobi_svd(r);
            (q * ur, s, v)
        } else {
            let (q, r) = a.transpose().qr().unpack();
            let (ur, s, v) = jacobi_svd(r);
            (v, s, q * ur)
        };
        let sigma_max = s_full.iter().copied().fold(0.0, f64::max);
        let rcond = rcond.unwrap_or(rows.max(cols) as f64 * f64::EPSILON);
        let cutoff = rcond * sigma_max;
        let keep: Vec<usize> = (0..s_full.len()).filter(|&k| s_full[k] > cutoff && s_full[k] > 0.0).collect();
        Ok(Self {
            u: u_full.select_columns(&keep),
            s: DVector::from_iterator(keep.len(), keep.iter().map(|&k| s_full[k])),
            v: v_full.select_columns(&keep),
            rows,
            cols,
            sigma_max,
        })
    }

    pub fn rank(&self) -> usize {
        self.s.len()
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn sigma_max(&self) -> f64 {
        self.sigma_max
    }

    /// `A⁺ y`.
    pub fn solve(&self, y: &DVector<f64>) -> DVector<f64> {
        let mut c = self.u.tr_mul(y);
        c.component_div_assign(&self.s);
        &self.v * c
    }

    /// `(Aᵀ)⁺ t`, the minimum-norm solution of `Aᵀ w = t`.
    pub fn solve_transposed(&self, t: &DVector<f64>) -> DVector<f64> {
        let mut c = self.v.tr_mul(t);
        c.component_div_assign(&self.s);
        &self.u * c
    }

    /// `A A⁺ v`, the orthogonal projection onto the column space.
    pub fn project(&self, v: &DVector<f64>) -> DVector<f64> {
        &self.u * self.u.tr_mul(v)
    }

    /// `A⁺ A t`, the orthogonal projection onto the row space.
    pub fn project_rows(&self, t: &DVector<f64>) -> DVector<f64> {
        &self.v * self.v.tr_mul(t)
    }

    pub fn pinv(&self) -> DMatrix<f64> {
        let mut vs = self.v.clone();
        for (k, mut col) in vs.column_iter_mut().enumerate() {
            col /= self.s[k];
        }
        vs * self.u.transpose()
    }
}

/// One-sided Jacobi SVD of a square matrix: returns `(U, σ, V)` with `r = U diag(σ) Vᵀ`.
fn jacobi_svd(mut w: DMatrix<f64>) -> (DMatrix<f64>, DVector<f64>, DMatrix<f64>) {
    let n = w.ncols();
    let mut v = DMatrix::<f64>::identity(n, n);
    for _sweep in 0..80 {
        let mut rotated = false;
        for p in 0..n {
            for q in p + 1..n {
                let (alpha, beta, gamma) = {
                    let (cp, cq) = (w.column(p), w.column(q));
                    (cp.norm_squared(), cq.norm_squared(), cp.dot(&cq))
                };
                if gamma == 0.0 || gamma.abs() <= f64::EPSILON * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate(&mut w, p, q, c, s);
                rotate(&mut v, p, q, c, s);
            }
        }
        if !rotated {
            break;
        }
    }
    let sigma = DVector::from_fn(n, |j, _| w.column(j).norm());
    for j in 0..n {
        if sigma[j] > 0.0 {
            let inv = 1.0 / sigma[j];
            w.column_mut(j).scale_mut(inv);
        }
    }
    (w, sigma, v)
}

fn rotate(m: &mut DMatrix<f64>, p: usize, q: usize, c: f64, s: f64) {
    for i in 0..m.nrows() {
        let (xp, xq) = (m[(i, p)], m[(i, q)]);
        m[(i, p)] = c * xp - s * xq;
        m[(i, q)] = s * xp + c * xq;
    }
}

/// Moore-Penrose pseudoinverse; singular values at or below `rcond · σ_max` are dropped.
pub fn pinv(a: &DMatrix<f64>, rcond: Option<f64>) -> Result<DMatrix<f64>> {
    Ok(Factorization::new(a, rcond)?.pinv())
}

/// Numerical rank under the same cutoff as [`pinv`].
pub fn rank(a: &DMatrix<f64>, rcond: Option<f64>) -> Result<usize> {
    Ok(Factorization::new(a, rcond)?.rank())
}

/// Minimum-norm least-squares solution of `A x = b`.
pub fn min_norm_solve(a: &DMatrix<f64>, b: &DVector<f64>, tol: &Tolerances) -> Result<SolveReport> {
    if a.nrows() != b.len() {
        return Err(Error::dim(format!("{} rows against a right-hand side of length {}", a.nrows(), b.len())));
    }
    if b.iter().any(|x| !x.is_finite()) {
        return Err(Error::InvalidInput("right-hand side has non-finite entries".into()));
    }
    let f = Factorization::new(a, tol.rcond)?;
    let solution = f.solve(b);
    let residual = a * &solution - b;
    Ok(report(solution, &residual, b, f.rank(), tol.feas_tol))
}

pub(crate) fn report(
    solution: DVector<f64>,
    residual: &DVector<f64>,
    rhs: &DVector<f64>,
    rank: usize,
    feas_tol: f64,
) -> SolveReport {
    let residual_norm = residual.norm();
    let relative_residual = residual_norm / rhs.norm().max(1.0);
    SolveReport {
        solution,
        residual_norm,
        relative_residual,
        rank,
        feasible: relative_residual <= feas_tol,
    }
}

/// Orthogonal projection of `v` onto the column space of `b`.
pub fn project_colspace(b: &DMatrix<f64>, v: &DVector<f64>, rcond: Option<f64>) -> Result<DVector<f64>> {
    if b.nrows() != v.len() {
        return Err(Error::dim(format!("{} rows against a vector of length {}", b.nrows(), v.len())));
    }
    Ok(Factorization::new(b, rcond)?.project(v))
}
