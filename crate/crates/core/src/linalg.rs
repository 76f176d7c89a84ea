//! Dense linear algebra: QR with column pivoting, triangular solves,
//! orthogonal projection onto gradient-spanned subspaces, numerical rank.
//!
//! Everything is `f64` and row-major. Matrices here are small (a few
//! thousand rows at most), so the kernels favour clarity over blocking.

use std::ops::{Index, IndexMut};

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

/// Default relative pivot tolerance used to truncate rank-deficient spans.
pub const DEFAULT_RANK_TOL: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    /// Checked constructor: positive shape, matching length, finite entries.
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::validation(format!(
                "matrix shape must be positive, got {rows}x{cols}"
            )));
        }
        if data.len() != rows * cols {
            return Err(Error::validation(format!(
                "matrix data length {} does not match {rows}x{cols}",
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::validation(format!(
                "non-finite entry at ({}, {})",
                pos / cols,
                pos % cols
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|row| row.len() != c) {
            return Err(Error::validation("ragged rows"));
        }
        Self::new(r, c, rows.concat())
    }

    /// Zero matrix. Degenerate shapes (zero rows or columns) are allowed
    /// here so that empty spans and empty batches have a representation.
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
    }

    pub fn random_normal<R: Rng + ?Sized>(rows: usize, cols: usize, scale: f64, rng: &mut R) -> Self {
        Self::from_fn(rows, cols, |_, _| {
            let z: f64 = rng.sample(StandardNormal);
            z * scale
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn col(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self[(i, j)]).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn transpose(&self) -> Matrix {
        Matrix::from_fn(self.cols, self.rows, |i, j| self[(j, i)])
    }

    /// `self · other`
    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(Error::validation(format!(
                "matmul shape mismatch: {:?} x {:?}",
                self.shape(),
                other.shape()
            )));
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let a = self.row(i);
            let o = &mut out.data[i * other.cols..(i + 1) * other.cols];
            for (k, &aik) in a.iter().enumerate() {
                if aik == 0.0 {
                    continue;
                }
                for (oj, bkj) in o.iter_mut().zip(other.row(k)) {
                    *oj += aik * bkj;
                }
            }
        }
        Ok(out)
    }

    /// `selfᵀ · other` without materialising the transpose.
    pub fn t_matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.rows != other.rows {
            return Err(Error::validation(format!(
                "t_matmul shape mismatch: {:?}ᵀ x {:?}",
                self.shape(),
                other.shape()
            )));
        }
        let mut out = Matrix::zeros(self.cols, other.cols);
        for k in 0..self.rows {
            let a = self.row(k);
            let b = other.row(k);
            for (i, &aki) in a.iter().enumerate() {
                if aki == 0.0 {
                    continue;
                }
                let o = &mut out.data[i * other.cols..(i + 1) * other.cols];
                for (oj, bkj) in o.iter_mut().zip(b) {
                    *oj += aki * bkj;
                }
            }
        }
        Ok(out)
    }

    /// `self · otherᵀ`
    pub fn matmul_t(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.cols {
            return Err(Error::validation(format!(
                "matmul_t shape mismatch: {:?} x {:?}ᵀ",
                self.shape(),
                other.shape()
            )));
        }
        Ok(Matrix::from_fn(self.rows, other.rows, |i, j| dot(self.row(i), other.row(j))))
    }

    pub fn matvec(&self, v: &[f64]) -> Result<Vec<f64>> {
        if v.len() != self.cols {
            return Err(Error::validation(format!(
                "matvec length mismatch: {:?} x {}",
                self.shape(),
                v.len()
            )));
        }
        Ok((0..self.rows).map(|i| dot(self.row(i), v)).collect())
    }

    /// `selfᵀ · v`
    pub fn t_matvec(&self, v: &[f64]) -> Result<Vec<f64>> {
        if v.len() != self.rows {
            return Err(Error::validation(format!(
                "t_matvec length mismatch: {:?}ᵀ x {}",
                self.shape(),
                v.len()
            )));
        }
        let mut out = vec![0.0; self.cols];
        for (i, &vi) in v.iter().enumerate() {
            for (o, a) in out.iter_mut().zip(self.row(i)) {
                *o += a * vi;
            }
        }
        Ok(out)
    }

    pub fn frobenius_norm(&self) -> f64 {
        l2_norm(&self.data)
    }

    pub fn scale(&mut self, s: f64) {
        self.data.iter_mut().for_each(|v| *v *= s);
    }

    pub fn add_assign(&mut self, other: &Matrix) -> Result<()> {
        self.check_same_shape(other)?;
        self.data.iter_mut().zip(&other.data).for_each(|(a, b)| *a += b);
        Ok(())
    }

    pub fn sub(&self, other: &Matrix) -> Result<Matrix> {
        self.check_same_shape(other)?;
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect();
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            data,
        })
    }

    /// Columns `cols` of `self`, in the given order.
    pub fn select_cols(&self, cols: &[usize]) -> Matrix {
        Matrix::from_fn(self.rows, cols.len(), |i, j| self[(i, cols[j])])
    }

    pub fn leading_cols(&self, k: usize) -> Matrix {
        Matrix::from_fn(self.rows, k, |i, j| self[(i, j)])
    }

    pub fn select_rows(&self, rows: &[usize]) -> Matrix {
        let mut data = Vec::with_capacity(rows.len() * self.cols);
        for &r in rows {
            data.extend_from_slice(self.row(r));
        }
        Matrix {
            rows: rows.len(),
            cols: self.cols,
            data,
        }
    }

    fn check_same_shape(&self, other: &Matrix) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::validation(format!(
                "shape mismatch: {:?} vs {:?}",
                self.shape(),
                other.shape()
            )));
        }
        Ok(())
    }
}

impl Index<(usize, usize)> for Matrix {
    type Output = f64;

    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        debug_assert!(i < self.rows && j < self.cols);
        &self.data[i * self.cols + j]
    }
}

impl IndexMut<(usize, usize)> for Matrix {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        debug_assert!(i < self.rows && j < self.cols);
        &mut self.data[i * self.cols + j]
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn l1_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x.abs()).sum()
}

pub fn l2_norm(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

pub fn cosine_similarity(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::validation(format!(
            "cosine similarity length mismatch: {} vs {}",
            u.len(),
            v.len()
        )));
    }
    let nu = l2_norm(u);
    let nv = l2_norm(v);
    if nu == 0.0 || nv == 0.0 {
        return Err(Error::UndefinedSimilarity);
    }
    Ok((dot(u, v) / (nu * nv)).clamp(-1.0, 1.0))
}

/// Column-pivoted QR factors: `q · r = m[:, column_permutation]`.
#[derive(Debug, Clone)]
pub struct QrFactors {
    /// rows × min(rows, cols), orthonormal columns
    pub q: Matrix,
    /// min(rows, cols) × cols, upper triangular
    pub r: Matrix,
    pub rank: usize,
    pub column_permutation: Vec<usize>,
}

impl QrFactors {
    /// Orthonormal basis of the leading `rank` pivoted columns.
    pub fn basis(&self) -> Matrix {
        self.q.leading_cols(self.rank)
    }
}

/// Householder QR with column pivoting.
///
/// At each step the remaining column of largest norm is swapped into place
/// (ties go to the lowest index), so `|r[j,j]|` is non-increasing. Rank is
/// the number of diagonal entries above `rank_tol · |r[0,0]|`.
pub fn qr_decompose(m: &Matrix, rank_tol: f64) -> Result<QrFactors> {
    if rank_tol.is_nan() || rank_tol <= 0.0 {
        return Err(Error::validation(format!("rank_tol must be positive, got {rank_tol}")));
    }
    if !m.is_finite() {
        return Err(Error::validation("qr_decompose: non-finite input"));
    }
    let (rows, cols) = m.shape();
    let k = rows.min(cols);
    let mut a = m.clone();
    let mut perm: Vec<usize> = (0..cols).collect();
    // (start row, householder vector, beta) for each applied reflector
    let mut reflectors: Vec<Option<(Vec<f64>, f64)>> = Vec::with_capacity(k);

    for j in 0..k {
        // pivot: recompute trailing column norms exactly
        let mut best = j;
        let mut best_norm = -1.0;
        for c in j..cols {
            let s: f64 = (j..rows).map(|i| a[(i, c)] * a[(i, c)]).sum();
            if s > best_norm {
                best_norm = s;
                best = c;
            }
        }
        if best != j {
            perm.swap(j, best);
            for i in 0..rows {
                let t = a[(i, j)];
                a[(i, j)] = a[(i, best)];
                a[(i, best)] = t;
            }
        }

        let below: f64 = ((j + 1)..rows).map(|i| a[(i, j)] * a[(i, j)]).sum();
        if below == 0.0 {
            // already upper triangular in this column
            reflectors.push(None);
            continue;
        }
        let x0 = a[(j, j)];
        let norm = (x0 * x0 + below).sqrt();
        let alpha = if x0 >= 0.0 { -norm } else { norm };
        let mut v: Vec<f64> = (j..rows).map(|i| a[(i, j)]).collect();
        v[0] -= alpha;
        let vnorm2 = dot(&v, &v);
        let beta = 2.0 / vnorm2;

        // apply H = I - beta v vᵀ to trailing columns
        for c in j..cols {
            let s: f64 = v.iter().enumerate().map(|(t, vt)| vt * a[(j + t, c)]).sum();
            let f = beta * s;
            for (t, vt) in v.iter().enumerate() {
                a[(j + t, c)] -= f * vt;
            }
        }
        a[(j, j)] = alpha;
        for i in (j + 1)..rows {
            a[(i, j)] = 0.0;
        }
        reflectors.push(Some((v, beta)));
    }

    let r = Matrix::from_fn(k, cols, |i, c| if c >= i { a[(i, c)] } else { 0.0 });

    // Q = H_0 H_1 ... H_{k-1} applied to the first k columns of the identity
    let mut q = Matrix::from_fn(rows, k, |i, c| if i == c { 1.0 } else { 0.0 });
    for (j, refl) in reflectors.iter().enumerate().rev() {
        if let Some((v, beta)) = refl {
            for c in 0..k {
                let s: f64 = v.iter().enumerate().map(|(t, vt)| vt * q[(j + t, c)]).sum();
                let f = beta * s;
                for (t, vt) in v.iter().enumerate() {
                    q[(j + t, c)] -= f * vt;
                }
            }
        }
    }

    let lead = if k > 0 { r[(0, 0)].abs() } else { 0.0 };
    let rank = if lead == 0.0 {
        0
    } else {
        (0..k).take_while(|&i| r[(i, i)].abs() > rank_tol * lead).count()
    };

    Ok(QrFactors {
        q,
        r,
        rank,
        column_permutation: perm,
    })
}

/// Solves `r · x = y` for upper-triangular `r` using its leading
/// `y.len() × y.len()` block.
pub fn back_substitute(r: &Matrix, y: &[f64]) -> Result<Vec<f64>> {
    let k = y.len();
    if r.rows() != k || r.cols() < k {
        return Err(Error::validation(format!(
            "back_substitute: r is {:?}, y has length {k}",
            r.shape()
        )));
    }
    let mut x = vec![0.0; k];
    for i in (0..k).rev() {
        let d = r[(i, i)];
        if d.abs() < 1e-300 {
            return Err(Error::Singular {
                index: i,
                magnitude: d.abs(),
            });
        }
        let s: f64 = ((i + 1)..k).map(|c| r[(i, c)] * x[c]).sum();
        x[i] = (y[i] - s) / d;
    }
    Ok(x)
}

/// Orthonormal basis of a linear subspace of `R^ambient_dim`.
#[derive(Debug, Clone)]
pub struct Subspace {
    basis: Matrix,
}

impl Subspace {
    /// Column span of `m`, truncated to its numerical rank.
    pub fn column_span(m: &Matrix, rank_tol: f64) -> Result<Self> {
        let qr = qr_decompose(m, rank_tol)?;
        Ok(Self { basis: qr.basis() })
    }

    pub fn empty(ambient_dim: usize) -> Self {
        Self {
            basis: Matrix::zeros(ambient_dim, 0),
        }
    }

    /// Wraps a basis that the caller guarantees is orthonormal.
    pub fn from_orthonormal(basis: Matrix) -> Self {
        Self { basis }
    }

    pub fn basis(&self) -> &Matrix {
        &self.basis
    }

    pub fn ambient_dim(&self) -> usize {
        self.basis.rows()
    }

    pub fn rank(&self) -> usize {
        self.basis.cols()
    }

    pub fn is_proper(&self) -> bool {
        self.rank() < self.ambient_dim()
    }
}

/// Orthogonal projection `basis · (basisᵀ · v)`.
///
/// A full-dimensional subspace projects every vector onto itself exactly.
pub fn project_onto(subspace: &Subspace, v: &[f64]) -> Result<Vec<f64>> {
    let n = subspace.ambient_dim();
    if v.len() != n {
        return Err(Error::validation(format!(
            "project_onto: vector length {} but ambient dimension {n}",
            v.len()
        )));
    }
    if subspace.rank() == 0 {
        return Ok(vec![0.0; n]);
    }
    if subspace.rank() == n {
        return Ok(v.to_vec());
    }
    let coeffs = subspace.basis.t_matvec(v)?;
    subspace.basis.matvec(&coeffs)
}

/// Reconstructs `v` in the span of `m` through the triangular route:
/// solve `R₁₁ a = (Qᵀ v)[..rank]` by back substitution, then form
/// `m_pivoted[:, ..rank] · a`. Agrees with [`project_onto`] on the same span.
pub fn reconstruct_in_span(m: &Matrix, qr: &QrFactors, v: &[f64]) -> Result<Vec<f64>> {
    if v.len() != m.rows() {
        return Err(Error::validation("reconstruct_in_span: dimension mismatch"));
    }
    let k = qr.rank;
    if k == 0 {
        return Ok(vec![0.0; v.len()]);
    }
    let qk = qr.q.leading_cols(k);
    let rhs = qk.t_matvec(v)?;
    let r11 = Matrix::from_fn(k, k, |i, j| qr.r[(i, j)]);
    let coeffs = back_substitute(&r11, &rhs)?;
    let cols = m.select_cols(&qr.column_permutation[..k]);
    cols.matvec(&coeffs)
}

pub fn numerical_rank(m: &Matrix, rank_tol: f64) -> Result<usize> {
    Ok(qr_decompose(m, rank_tol)?.rank)
}

/// Random matrix with orthonormal columns (rows ≥ cols), from QR of a Gaussian draw.
pub fn random_orthonormal<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Result<Matrix> {
    let g = Matrix::random_normal(rows, cols, 1.0, rng);
    Ok(qr_decompose(&g, 1e-12)?.q.leading_cols(cols))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
    }

    #[test]
    fn new_rejects_non_finite_and_bad_shapes() {
        assert!(Matrix::new(1, 2, vec![1.0, f64::NAN]).is_err());
        assert!(Matrix::new(1, 2, vec![1.0, f64::INFINITY]).is_err());
        assert!(Matrix::new(0, 2, vec![]).is_err());
        assert!(Matrix::new(2, 2, vec![1.0; 3]).is_err());
    }

    #[test]
    fn qr_identity() {
        let qr = qr_decompose(&Matrix::identity(3), DEFAULT_RANK_TOL).unwrap();
        assert_eq!(qr.q, Matrix::identity(3));
        assert_eq!(qr.r, Matrix::identity(3));
        assert_eq!(qr.rank, 3);
        assert_eq!(qr.column_permutation, vec![0, 1, 2]);
    }

    #[test]
    fn qr_exact_dependence() {
        let m = Matrix::from_rows(&[
            vec![1.0, 3.0],
            vec![2.0, 6.0],
            vec![-1.0, -3.0],
            vec![0.5, 1.5],
        ])
        .unwrap();
        let qr = qr_decompose(&m, DEFAULT_RANK_TOL).unwrap();
        assert_eq!(qr.rank, 1);
        assert_eq!(qr.column_permutation[0], 1);
    }

    #[test]
    fn qr_zero_matrix_has_empty_basis() {
        let qr = qr_decompose(&Matrix::zeros(4, 3), DEFAULT_RANK_TOL).unwrap();
        assert_eq!(qr.rank, 0);
        assert_eq!(qr.basis().cols(), 0);
        assert_eq!(numerical_rank(&Matrix::zeros(5, 5), DEFAULT_RANK_TOL).unwrap(), 0);
    }

    #[test]
    fn qr_rejects_bad_tolerance() {
        assert!(qr_decompose(&Matrix::identity(2), 0.0).is_err());
    }

    #[test]
    fn back_substitution_cases() {
        let x = back_substitute(&Matrix::identity(2), &[5.0, -3.0]).unwrap();
        assert_eq!(x, vec![5.0, -3.0]);

        let r = Matrix::from_rows(&[vec![2.0, 1.0], vec![0.0, 4.0]]).unwrap();
        let x = back_substitute(&r, &[4.0, 8.0]).unwrap();
        assert!(max_abs_diff(&x, &[1.0, 2.0]) < 1e-15);
        let y = r.matvec(&x).unwrap();
        assert!(max_abs_diff(&y, &[4.0, 8.0]) < 1e-12);

        let r = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 0.0]]).unwrap();
        assert!(matches!(
            back_substitute(&r, &[1.0, 1.0]),
            Err(Error::Singular { index: 1, .. })
        ));
    }

    #[test]
    fn projection_axis_and_in_span() {
        let e1 = Matrix::from_rows(&[vec![1.0], vec![0.0], vec![0.0]]).unwrap();
        let s = Subspace::column_span(&e1, DEFAULT_RANK_TOL).unwrap();
        let p = project_onto(&s, &[1.0, 2.0, 3.0]).unwrap();
        assert!(max_abs_diff(&p, &[1.0, 0.0, 0.0]) < 1e-15);

        let mut rng = rng::stream(3, &[]);
        let b = random_orthonormal(16, 4, &mut rng).unwrap();
        let s = Subspace::from_orthonormal(b.clone());
        let v = b.col(2);
        let p = project_onto(&s, &v).unwrap();
        let resid: Vec<f64> = v.iter().zip(&p).map(|(a, b)| a - b).collect();
        assert!(l1_norm(&resid) < 1e-10);
    }

    #[test]
    fn projection_dimension_mismatch() {
        let s = Subspace::empty(3);
        assert!(project_onto(&s, &[1.0, 2.0]).is_err());
        assert_eq!(project_onto(&s, &[1.0, 2.0, 3.0]).unwrap(), vec![0.0; 3]);
    }

    #[test]
    fn norms_and_cosine() {
        assert_eq!(l1_norm(&[0.0, 0.0, 0.0]), 0.0);
        assert_eq!(l1_norm(&[1.0, -2.0, 3.0]), 6.0);
        let v = vec![0.13; 768];
        assert!((l1_norm(&v) - 99.84).abs() < 1e-9);

        assert!((cosine_similarity(&[1.0, 1.0], &[1.0, 1.0]).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(cosine_similarity(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        assert!((cosine_similarity(&[1.0, 1.0], &[-1.0, -1.0]).unwrap() + 1.0).abs() < 1e-15);
        assert!(matches!(
            cosine_similarity(&[0.0, 0.0], &[1.0, 0.0]),
            Err(Error::UndefinedSimilarity)
        ));
    }

    #[test]
    fn triangular_route_matches_projection() {
        let mut rng = rng::stream(11, &[]);
        let x = Matrix::random_normal(6, 40, 1.0, &mut rng);
        let a = Matrix::random_normal(6, 20, 1.0, &mut rng);
        let g = x.t_matmul(&a).unwrap();
        let qr = qr_decompose(&g, DEFAULT_RANK_TOL).unwrap();
        assert_eq!(qr.rank, 6);
        let s = Subspace::from_orthonormal(qr.basis());
        for _ in 0..5 {
            let v = Matrix::random_normal(40, 1, 1.0, &mut rng).into_vec();
            let p1 = project_onto(&s, &v).unwrap();
            let p2 = reconstruct_in_span(&g, &qr, &v).unwrap();
            assert!(max_abs_diff(&p1, &p2) < 1e-9);
        }
    }
}
