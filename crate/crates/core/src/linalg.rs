//! Dense vectors and matrices sized for latent spaces of a few dozen
//! dimensions, plus the numeric kernels the correction math needs: cosine
//! similarity, a Cholesky solver for symmetric positive definite systems,
//! and projection onto the span of a set of direction vectors.
//!
//! Construction is validating: a [`Vector`] or [`Matrix`] never holds a NaN
//! or infinity, so downstream code can assume finite inputs.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MathError {
    #[error("non-finite value at index {index}")]
    NonFinite { index: usize },
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("matrix shape {rows}x{cols} is incompatible with {len} values")]
    ShapeMismatch { rows: usize, cols: usize, len: usize },
    #[error("matrix of shape {rows}x{cols} is not square")]
    NotSquare { rows: usize, cols: usize },
    #[error("matrix is not symmetric (max asymmetry {asymmetry:e})")]
    NotSymmetric { asymmetry: f64 },
    #[error("vector has zero norm")]
    ZeroVector,
    #[error("matrix must have at least one column")]
    EmptyBasis,
    #[error("system is singular and has no usable ridge fallback")]
    SingularSystem,
}

pub type MathResult<T> = Result<T, MathError>;

fn check_finite(values: &[f64]) -> MathResult<()> {
    match values.iter().position(|v| !v.is_finite()) {
        Some(index) => Err(MathError::NonFinite { index }),
        None => Ok(()),
    }
}

/// Dense column vector of `f64` with validated, finite entries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct Vector {
    values: Vec<f64>,
}

impl TryFrom<Vec<f64>> for Vector {
    type Error = MathError;
    fn try_from(values: Vec<f64>) -> MathResult<Self> {
        Vector::new(values)
    }
}

impl From<Vector> for Vec<f64> {
    fn from(v: Vector) -> Vec<f64> {
        v.values
    }
}

impl Vector {
    pub fn new(values: Vec<f64>) -> MathResult<Self> {
        check_finite(&values)?;
        Ok(Vector { values })
    }

    pub fn from_slice(values: &[f64]) -> MathResult<Self> {
        Vector::new(values.to_vec())
    }

    /// Unvalidated constructor for crate internals whose intermediate values
    /// may legitimately overflow (e.g. divergent training, which is detected
    /// at the loss check rather than per-operation).
    pub(crate) fn from_raw(values: Vec<f64>) -> Self {
        Vector { values }
    }

    pub fn zeros(dim: usize) -> Self {
        Vector { values: vec![0.0; dim] }
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, i: usize) -> f64 {
        self.values[i]
    }

    pub fn dot(&self, other: &Vector) -> MathResult<f64> {
        if self.dim() != other.dim() {
            return Err(MathError::DimensionMismatch { expected: self.dim(), got: other.dim() });
        }
        Ok(self.values.iter().zip(&other.values).map(|(a, b)| a * b).sum())
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn add(&self, other: &Vector) -> MathResult<Vector> {
        if self.dim() != other.dim() {
            return Err(MathError::DimensionMismatch { expected: self.dim(), got: other.dim() });
        }
        Ok(Vector {
            values: self.values.iter().zip(&other.values).map(|(a, b)| a + b).collect(),
        })
    }

    pub fn sub(&self, other: &Vector) -> MathResult<Vector> {
        if self.dim() != other.dim() {
            return Err(MathError::DimensionMismatch { expected: self.dim(), got: other.dim() });
        }
        Ok(Vector {
            values: self.values.iter().zip(&other.values).map(|(a, b)| a - b).collect(),
        })
    }

    pub fn scale(&self, factor: f64) -> Vector {
        Vector { values: self.values.iter().map(|v| v * factor).collect() }
    }

    /// Unit vector in the same direction; `ZeroVector` if the norm is zero.
    pub fn normalized(&self) -> MathResult<Vector> {
        let n = self.norm();
        if n == 0.0 {
            return Err(MathError::ZeroVector);
        }
        Ok(self.scale(1.0 / n))
    }

    /// Arithmetic mean of a non-empty set of equal-dimension vectors.
    pub fn mean(vectors: &[Vector]) -> MathResult<Vector> {
        let first = vectors.first().ok_or(MathError::ZeroVector)?;
        let mut acc = vec![0.0; first.dim()];
        for v in vectors {
            if v.dim() != first.dim() {
                return Err(MathError::DimensionMismatch { expected: first.dim(), got: v.dim() });
            }
            for (a, x) in acc.iter_mut().zip(v.as_slice()) {
                *a += x;
            }
        }
        let inv = 1.0 / vectors.len() as f64;
        Ok(Vector { values: acc.into_iter().map(|a| a * inv).collect() })
    }
}

/// Dense row-major matrix with validated, finite entries.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    values: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, values: Vec<f64>) -> MathResult<Self> {
        if values.len() != rows * cols {
            return Err(MathError::ShapeMismatch { rows, cols, len: values.len() });
        }
        check_finite(&values)?;
        Ok(Matrix { rows, cols, values })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix { rows, cols, values: vec![0.0; rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.values[i * n + i] = 1.0;
        }
        m
    }

    /// Matrix whose columns are the given equal-dimension vectors.
    pub fn from_columns(columns: &[Vector]) -> MathResult<Self> {
        let first = columns.first().ok_or(MathError::EmptyBasis)?;
        let rows = first.dim();
        let cols = columns.len();
        let mut values = vec![0.0; rows * cols];
        for (j, col) in columns.iter().enumerate() {
            if col.dim() != rows {
                return Err(MathError::DimensionMismatch { expected: rows, got: col.dim() });
            }
            for i in 0..rows {
                values[i * cols + j] = col.get(i);
            }
        }
        Ok(Matrix { rows, cols, values })
    }

    pub fn from_rows(rows: &[Vector]) -> MathResult<Self> {
        let first = rows.first().ok_or(MathError::EmptyBasis)?;
        let cols = first.dim();
        let mut values = Vec::with_capacity(rows.len() * cols);
        for row in rows {
            if row.dim() != cols {
                return Err(MathError::DimensionMismatch { expected: cols, got: row.dim() });
            }
            values.extend_from_slice(row.as_slice());
        }
        Ok(Matrix { rows: rows.len(), cols, values })
    }

    pub fn n_rows(&self) -> usize {
        self.rows
    }

    pub fn n_cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.values[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, value: f64) {
        self.values[r * self.cols + c] = value;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.values[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_vector(&self, r: usize) -> Vector {
        Vector { values: self.row(r).to_vec() }
    }

    pub fn column(&self, c: usize) -> Vector {
        Vector { values: (0..self.rows).map(|r| self.get(r, c)).collect() }
    }

    /// `self * x`.
    pub fn matvec(&self, x: &Vector) -> MathResult<Vector> {
        if x.dim() != self.cols {
            return Err(MathError::DimensionMismatch { expected: self.cols, got: x.dim() });
        }
        let mut out = vec![0.0; self.rows];
        for r in 0..self.rows {
            out[r] = self.row(r).iter().zip(x.as_slice()).map(|(a, b)| a * b).sum();
        }
        Ok(Vector { values: out })
    }

    /// `self^T * x`.
    pub fn tr_matvec(&self, x: &Vector) -> MathResult<Vector> {
        if x.dim() != self.rows {
            return Err(MathError::DimensionMismatch { expected: self.rows, got: x.dim() });
        }
        let mut out = vec![0.0; self.cols];
        for r in 0..self.rows {
            let xr = x.get(r);
            for (c, o) in out.iter_mut().enumerate() {
                *o += self.get(r, c) * xr;
            }
        }
        Ok(Vector { values: out })
    }

    /// Gram matrix `self^T * self`.
    pub fn gram(&self) -> Matrix {
        let k = self.cols;
        let mut g = Matrix::zeros(k, k);
        for a in 0..k {
            for b in a..k {
                let mut s = 0.0;
                for r in 0..self.rows {
                    s += self.get(r, a) * self.get(r, b);
                }
                g.set(a, b, s);
                g.set(b, a, s);
            }
        }
        g
    }

    pub fn matmul(&self, other: &Matrix) -> MathResult<Matrix> {
        if self.cols != other.rows {
            return Err(MathError::DimensionMismatch { expected: self.cols, got: other.rows });
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        for r in 0..self.rows {
            for k in 0..self.cols {
                let v = self.get(r, k);
                if v == 0.0 {
                    continue;
                }
                for c in 0..other.cols {
                    out.values[r * other.cols + c] += v * other.get(k, c);
                }
            }
        }
        Ok(out)
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.set(c, r, self.get(r, c));
            }
        }
        out
    }
}

/// Cosine of the angle between two vectors, clamped to `[-1, 1]` so floating
/// point drift can never push it outside the mathematical range.
pub fn cosine_similarity(a: &Vector, b: &Vector) -> MathResult<f64> {
    if a.dim() != b.dim() {
        return Err(MathError::DimensionMismatch { expected: a.dim(), got: b.dim() });
    }
    let na = a.norm();
    let nb = b.norm();
    if na == 0.0 || nb == 0.0 {
        return Err(MathError::ZeroVector);
    }
    let dot = a.dot(b)?;
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

/// Solution of a symmetric positive definite system.
#[derive(Debug, Clone, PartialEq)]
pub struct SpdSolution {
    pub solution: Vector,
    /// True when the plain Cholesky solve failed or left a large residual and
    /// a ridge term `1e-10 * trace(G)/k` was added to the diagonal.
    pub regularized: bool,
}

const SYMMETRY_TOL: f64 = 1e-8;
const RESIDUAL_TOL: f64 = 1e-9;
const RIDGE_SCALE: f64 = 1e-10;

/// Solves `G c = b` for symmetric positive definite `G` via Cholesky.
///
/// The residual satisfies `||G c - b|| <= 1e-9 * (1 + ||b||)` for
/// well-conditioned systems (one step of iterative refinement is applied if
/// the first factorization misses the bound). If `G` is singular or too
/// ill-conditioned for that, the system `(G + lambda I) c = b` with
/// `lambda = 1e-10 * trace(G)/k` is solved instead and the result is flagged
/// `regularized`.
pub fn solve_spd(g: &Matrix, b: &Vector) -> MathResult<SpdSolution> {
    let k = g.n_rows();
    if g.n_cols() != k {
        return Err(MathError::NotSquare { rows: g.n_rows(), cols: g.n_cols() });
    }
    if b.dim() != k {
        return Err(MathError::DimensionMismatch { expected: k, got: b.dim() });
    }
    let mut max_abs = 0.0f64;
    let mut asymmetry = 0.0f64;
    for r in 0..k {
        for c in 0..k {
            max_abs = max_abs.max(g.get(r, c).abs());
            asymmetry = asymmetry.max((g.get(r, c) - g.get(c, r)).abs());
        }
    }
    if asymmetry > SYMMETRY_TOL * max_abs.max(1e-300) {
        return Err(MathError::NotSymmetric { asymmetry });
    }

    let bound = RESIDUAL_TOL * (1.0 + b.norm());
    if let Some(factor) = cholesky(g, 0.0) {
        let mut c = cholesky_solve(&factor, b);
        let mut residual = residual_norm(g, &c, b);
        if residual > bound {
            // One step of iterative refinement with the same factorization.
            let r = b.sub(&g.matvec(&c)?)?;
            let d = cholesky_solve(&factor, &r);
            let refined = c.add(&d)?;
            let refined_residual = residual_norm(g, &refined, b);
            if refined_residual < residual {
                c = refined;
                residual = refined_residual;
            }
        }
        if residual <= bound && c.as_slice().iter().all(|v| v.is_finite()) {
            return Ok(SpdSolution { solution: c, regularized: false });
        }
    }

    let trace: f64 = (0..k).map(|i| g.get(i, i)).sum();
    if trace <= 0.0 {
        // A PSD matrix with zero trace is the zero matrix.
        if b.norm() == 0.0 {
            return Ok(SpdSolution { solution: Vector::zeros(k), regularized: true });
        }
        return Err(MathError::SingularSystem);
    }
    let lambda = RIDGE_SCALE * trace / k as f64;
    let factor = cholesky(g, lambda).ok_or(MathError::SingularSystem)?;
    let c = cholesky_solve(&factor, b);
    check_finite(c.as_slice())?;
    Ok(SpdSolution { solution: c, regularized: true })
}

fn residual_norm(g: &Matrix, c: &Vector, b: &Vector) -> f64 {
    match g.matvec(c).and_then(|gc| gc.sub(b)) {
        Ok(r) => r.norm(),
        Err(_) => f64::INFINITY,
    }
}

/// Lower-triangular Cholesky factor of `g + ridge * I`, or None if a pivot
/// is not strictly positive.
fn cholesky(g: &Matrix, ridge: f64) -> Option<Matrix> {
    let k = g.n_rows();
    let mut l = Matrix::zeros(k, k);
    for i in 0..k {
        for j in 0..=i {
            let mut s = g.get(i, j);
            if i == j {
                s += ridge;
            }
            for p in 0..j {
                s -= l.get(i, p) * l.get(j, p);
            }
            if i == j {
                if !(s > 0.0) || !s.is_finite() {
                    return None;
                }
                l.set(i, j, s.sqrt());
            } else {
                l.set(i, j, s / l.get(j, j));
            }
        }
    }
    Some(l)
}

/// Solves `L L^T x = b` by forward then backward substitution.
fn cholesky_solve(l: &Matrix, b: &Vector) -> Vector {
    let k = l.n_rows();
    let mut y = vec![0.0; k];
    for i in 0..k {
        let mut s = b.get(i);
        for j in 0..i {
            s -= l.get(i, j) * y[j];
        }
        y[i] = s / l.get(i, i);
    }
    let mut x = vec![0.0; k];
    for i in (0..k).rev() {
        let mut s = y[i];
        for j in i + 1..k {
            s -= l.get(j, i) * x[j];
        }
        x[i] = s / l.get(i, i);
    }
    Vector { values: x }
}

/// Orthogonal projection of `x` onto the column span of `basis`.
#[derive(Debug, Clone, PartialEq)]
pub struct SpanProjection {
    pub projection: Vector,
    /// Carried over from [`solve_spd`] on the Gram system.
    pub regularized: bool,
}

/// Projects `x` onto `span(columns of basis)` by solving the normal
/// equations `(V^T V) c = V^T x` and returning `V c`.
pub fn project_onto_span(basis: &Matrix, x: &Vector) -> MathResult<SpanProjection> {
    if basis.n_cols() == 0 {
        return Err(MathError::EmptyBasis);
    }
    if x.dim() != basis.n_rows() {
        return Err(MathError::DimensionMismatch { expected: basis.n_rows(), got: x.dim() });
    }
    let gram = basis.gram();
    let rhs = basis.tr_matvec(x)?;
    let solved = solve_spd(&gram, &rhs)?;
    let projection = basis.matvec(&solved.solution)?;
    Ok(SpanProjection { projection, regularized: solved.regularized })
}

/// Dense projector matrix `P = V (V^T V)^{-1} V^T` for the column span of
/// `basis`, along with the `regularized` flag of the underlying solves.
/// Used where the projection must be treated as an explicit affine layer.
pub fn span_projector_matrix(basis: &Matrix) -> MathResult<(Matrix, bool)> {
    let m = basis.n_rows();
    let mut columns = Vec::with_capacity(m);
    let mut regularized = false;
    for i in 0..m {
        let mut e = Vector::zeros(m);
        e.values[i] = 1.0;
        let proj = project_onto_span(basis, &e)?;
        regularized |= proj.regularized;
        columns.push(proj.projection);
    }
    let p = Matrix::from_columns(&columns)?;
    Ok((p, regularized))
}
