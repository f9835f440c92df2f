//! Dense real linear algebra: matrices, Cholesky factorization, a cyclic
//! Jacobi symmetric eigensolver, and Moore-Penrose pseudo-inverses.
//!
//! Everything is `f64`, row-major, and single-allocation. The solvers are
//! written for the small dense problems this crate works with (latent
//! dimensions up to a few tens, Gram matrices up to ~1000).

use thiserror::Error;

/// Relative tolerance for the symmetry precondition of [`cholesky`] and
/// [`sym_eigen`].
const SYMMETRY_RTOL: f64 = 1e-10;

/// Singular values below `PINV_RTOL * sigma_max` are truncated in [`pinv`].
const PINV_RTOL: f64 = 1e-12;

/// Sweep budget for the Jacobi eigensolver.
const JACOBI_MAX_SWEEPS: usize = 50;

#[derive(Debug, Error)]
pub enum LinalgError {
    #[error("dimension mismatch: {context} ({left} vs {right})")]
    DimensionMismatch {
        context: &'static str,
        left: String,
        right: String,
    },
    #[error("matrix is not symmetric within tolerance (max deviation {max_dev:e})")]
    NotSymmetric { max_dev: f64 },
    #[error("matrix not positive definite within jitter budget (pivot {pivot})")]
    NotSpd { pivot: usize },
    #[error("Jacobi eigensolver did not converge after {sweeps} sweeps")]
    NoConvergence { sweeps: usize },
}

/// Dense row-major matrix of 64-bit reals.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    /// Builds a matrix from a row-major slice. Panics if the slice length
    /// does not equal `rows * cols`.
    pub fn from_rows(rows: usize, cols: usize, data: &[f64]) -> Self {
        assert_eq!(
            data.len(),
            rows * cols,
            "data length {} does not match {}x{}",
            data.len(),
            rows,
            cols
        );
        Matrix {
            rows,
            cols,
            data: data.to_vec(),
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols);
        Matrix { rows, cols, data }
    }

    pub fn diag(values: &[f64]) -> Self {
        let n = values.len();
        let mut m = Matrix::zeros(n, n);
        for (i, &v) in values.iter().enumerate() {
            m.data[i * n + i] = v;
        }
        m
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn transpose(&self) -> Matrix {
        let mut t = Matrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                t.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        t
    }

    pub fn scale(&self, s: f64) -> Matrix {
        let mut m = self.clone();
        for v in &mut m.data {
            *v *= s;
        }
        m
    }

    pub fn add(&self, other: &Matrix) -> Matrix {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        let mut m = self.clone();
        for (v, o) in m.data.iter_mut().zip(&other.data) {
            *v += o;
        }
        m
    }

    pub fn sub(&self, other: &Matrix) -> Matrix {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        let mut m = self.clone();
        for (v, o) in m.data.iter_mut().zip(&other.data) {
            *v -= o;
        }
        m
    }

    /// `self * v` for a column vector `v`.
    pub fn matvec(&self, v: &[f64]) -> Vec<f64> {
        assert_eq!(self.cols, v.len(), "matvec dimension mismatch");
        let mut out = vec![0.0; self.rows];
        for r in 0..self.rows {
            let row = self.row(r);
            let mut acc = 0.0;
            for c in 0..self.cols {
                acc += row[c] * v[c];
            }
            out[r] = acc;
        }
        out
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Matrix product with a fixed i-k-j loop order, so repeated calls on the
/// same inputs are bit-identical.
pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix, LinalgError> {
    if a.cols != b.rows {
        return Err(LinalgError::DimensionMismatch {
            context: "matmul",
            left: format!("{}x{}", a.rows, a.cols),
            right: format!("{}x{}", b.rows, b.cols),
        });
    }
    let mut out = Matrix::zeros(a.rows, b.cols);
    let n = b.cols;
    for i in 0..a.rows {
        let a_row = &a.data[i * a.cols..(i + 1) * a.cols];
        let out_row = &mut out.data[i * n..(i + 1) * n];
        for (k, &aik) in a_row.iter().enumerate() {
            if aik == 0.0 {
                continue;
            }
            let b_row = &b.data[k * n..(k + 1) * n];
            for j in 0..n {
                out_row[j] += aik * b_row[j];
            }
        }
    }
    Ok(out)
}

/// `a * b^T` without forming the transpose; fixed loop order.
pub fn matmul_nt(a: &Matrix, b: &Matrix) -> Result<Matrix, LinalgError> {
    if a.cols != b.cols {
        return Err(LinalgError::DimensionMismatch {
            context: "matmul_nt",
            left: format!("{}x{}", a.rows, a.cols),
            right: format!("{}x{} (transposed)", b.rows, b.cols),
        });
    }
    let mut out = Matrix::zeros(a.rows, b.rows);
    let k_len = a.cols;
    let k_main = k_len - k_len % 4;
    for i in 0..a.rows {
        let a_row = a.row(i);
        let out_row = &mut out.data[i * b.rows..(i + 1) * b.rows];
        for j in 0..b.rows {
            let b_row = b.row(j);
            // Four independent accumulator chains; fixed order, so the
            // result is reproducible while the chains vectorize.
            let (mut s0, mut s1, mut s2, mut s3) = (0.0, 0.0, 0.0, 0.0);
            let mut k = 0;
            while k < k_main {
                s0 += a_row[k] * b_row[k];
                s1 += a_row[k + 1] * b_row[k + 1];
                s2 += a_row[k + 2] * b_row[k + 2];
                s3 += a_row[k + 3] * b_row[k + 3];
                k += 4;
            }
            let mut acc = (s0 + s1) + (s2 + s3);
            while k < k_len {
                acc += a_row[k] * b_row[k];
                k += 1;
            }
            out_row[j] = acc;
        }
    }
    Ok(out)
}

/// `a^T * b` without forming the transpose; fixed loop order. Panics on
/// mismatched row counts (internal kernel).
pub fn matmul_tn(a: &Matrix, b: &Matrix) -> Result<Matrix, LinalgError> {
    if a.rows != b.rows {
        return Err(LinalgError::DimensionMismatch {
            context: "matmul_tn",
            left: format!("{}x{} (transposed)", a.rows, a.cols),
            right: format!("{}x{}", b.rows, b.cols),
        });
    }
    let mut out = Matrix::zeros(a.cols, b.cols);
    for m in 0..a.rows {
        let a_row = a.row(m);
        let b_row = &b.data[m * b.cols..(m + 1) * b.cols];
        for (i, &av) in a_row.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let out_row = &mut out.data[i * b.cols..(i + 1) * b.cols];
            for j in 0..b.cols {
                out_row[j] += av * b_row[j];
            }
        }
    }
    Ok(out)
}

/// `a^T * a` without forming the transpose.
pub fn gram(a: &Matrix) -> Matrix {
    let (r, c) = (a.rows, a.cols);
    let mut out = Matrix::zeros(c, c);
    for k in 0..r {
        let row = a.row(k);
        for i in 0..c {
            let ri = row[i];
            if ri == 0.0 {
                continue;
            }
            let out_row = &mut out.data[i * c..(i + 1) * c];
            for j in 0..c {
                out_row[j] += ri * row[j];
            }
        }
    }
    out
}

/// Lower-triangular Cholesky factor of an SPD matrix, plus the diagonal
/// jitter that had to be added to reach positive definiteness.
#[derive(Debug, Clone)]
pub struct SpdFactor {
    lower: Matrix,
    jitter_used: f64,
}

impl SpdFactor {
    pub fn lower(&self) -> &Matrix {
        &self.lower
    }

    pub fn jitter_used(&self) -> f64 {
        self.jitter_used
    }

    pub fn dim(&self) -> usize {
        self.lower.rows
    }

    /// Solves `L x = b`.
    pub fn solve_lower(&self, b: &[f64]) -> Vec<f64> {
        let n = self.dim();
        assert_eq!(b.len(), n);
        let l = &self.lower;
        let mut x = b.to_vec();
        for i in 0..n {
            let row = l.row(i);
            let mut acc = x[i];
            for j in 0..i {
                acc -= row[j] * x[j];
            }
            x[i] = acc / row[i];
        }
        x
    }

    /// Solves `L^T x = b`.
    pub fn solve_upper(&self, b: &[f64]) -> Vec<f64> {
        let n = self.dim();
        assert_eq!(b.len(), n);
        let l = &self.lower;
        let mut x = b.to_vec();
        for i in (0..n).rev() {
            let mut acc = x[i];
            for j in i + 1..n {
                acc -= l.get(j, i) * x[j];
            }
            x[i] = acc / l.get(i, i);
        }
        x
    }

    /// Solves `(L L^T) x = b`.
    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        self.solve_upper(&self.solve_lower(b))
    }

    /// Explicit inverse of `L L^T`, built column by column.
    pub fn inverse(&self) -> Matrix {
        let n = self.dim();
        let mut inv = Matrix::zeros(n, n);
        let mut e = vec![0.0; n];
        for c in 0..n {
            e[c] = 1.0;
            let col = self.solve(&e);
            e[c] = 0.0;
            for r in 0..n {
                inv.set(r, c, col[r]);
            }
        }
        inv
    }
}

fn check_symmetric(m: &Matrix) -> Result<(), LinalgError> {
    let scale = m.max_abs().max(1.0);
    let mut max_dev = 0.0_f64;
    for i in 0..m.rows {
        for j in i + 1..m.cols {
            max_dev = max_dev.max((m.get(i, j) - m.get(j, i)).abs());
        }
    }
    if max_dev > SYMMETRY_RTOL * scale {
        return Err(LinalgError::NotSymmetric { max_dev });
    }
    Ok(())
}

fn try_cholesky(m: &Matrix, jitter: f64) -> Result<Matrix, usize> {
    let n = m.rows;
    let mut l = Matrix::zeros(n, n);
    for i in 0..n {
        for j in 0..=i {
            let mut acc = m.get(i, j);
            if i == j {
                acc += jitter;
            }
            for k in 0..j {
                acc -= l.get(i, k) * l.get(j, k);
            }
            if i == j {
                if acc <= 0.0 || !acc.is_finite() {
                    return Err(i);
                }
                l.set(i, j, acc.sqrt());
            } else {
                l.set(i, j, acc / l.get(j, j));
            }
        }
    }
    Ok(l)
}

/// Cholesky factorization with an escalating jitter ladder: 0, then 1e-12
/// multiplied by 10 per attempt, up to `max_jitter`.
pub fn cholesky(m: &Matrix, max_jitter: f64) -> Result<SpdFactor, LinalgError> {
    if m.rows != m.cols {
        return Err(LinalgError::DimensionMismatch {
            context: "cholesky",
            left: format!("{}", m.rows),
            right: format!("{}", m.cols),
        });
    }
    check_symmetric(m)?;
    let mut jitter = 0.0;
    loop {
        match try_cholesky(m, jitter) {
            Ok(lower) => {
                return Ok(SpdFactor {
                    lower,
                    jitter_used: jitter,
                })
            }
            Err(pivot) => {
                let next = if jitter == 0.0 { 1e-12 } else { jitter * 10.0 };
                if next > max_jitter {
                    return Err(LinalgError::NotSpd { pivot });
                }
                jitter = next;
            }
        }
    }
}

/// `log det(L L^T) = 2 * sum(log diag(L))`.
pub fn logdet_spd(f: &SpdFactor) -> f64 {
    let n = f.dim();
    let mut acc = 0.0;
    for i in 0..n {
        acc += f.lower.get(i, i).ln();
    }
    2.0 * acc
}

/// Symmetric eigendecomposition by cyclic Jacobi rotations.
///
/// Returns eigenvalues in descending order and the matching eigenvectors as
/// matrix columns.
pub fn sym_eigen(m: &Matrix) -> Result<(Vec<f64>, Matrix), LinalgError> {
    if m.rows != m.cols {
        return Err(LinalgError::DimensionMismatch {
            context: "sym_eigen",
            left: format!("{}", m.rows),
            right: format!("{}", m.cols),
        });
    }
    check_symmetric(m)?;
    let n = m.rows;
    if n == 0 {
        return Ok((Vec::new(), Matrix::zeros(0, 0)));
    }
    let mut a = m.clone();
    // Average out any tiny asymmetry so the rotations see an exactly
    // symmetric matrix.
    for i in 0..n {
        for j in i + 1..n {
            let v = 0.5 * (a.get(i, j) + a.get(j, i));
            a.set(i, j, v);
            a.set(j, i, v);
        }
    }
    let mut v = Matrix::identity(n);
    let norm = a.frobenius_norm().max(f64::MIN_POSITIVE);
    let tol = 1e-14 * norm;

    let off_norm = |a: &Matrix| -> f64 {
        let mut s = 0.0;
        for i in 0..n {
            for j in i + 1..n {
                s += a.get(i, j) * a.get(i, j);
            }
        }
        (2.0 * s).sqrt()
    };

    let mut converged = off_norm(&a) <= tol;
    let mut sweeps = 0;
    while !converged && sweeps < JACOBI_MAX_SWEEPS {
        for p in 0..n - 1 {
            for q in p + 1..n {
                let apq = a.get(p, q);
                if apq.abs() <= f64::MIN_POSITIVE {
                    continue;
                }
                let app = a.get(p, p);
                let aqq = a.get(q, q);
                let theta = (aqq - app) / (2.0 * apq);
                let t = if theta >= 0.0 {
                    1.0 / (theta + (1.0 + theta * theta).sqrt())
                } else {
                    -1.0 / (-theta + (1.0 + theta * theta).sqrt())
                };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = t * c;

                // Rotate rows/columns p and q of A.
                for k in 0..n {
                    let akp = a.get(k, p);
                    let akq = a.get(k, q);
                    a.set(k, p, c * akp - s * akq);
                    a.set(k, q, s * akp + c * akq);
                }
                for k in 0..n {
                    let apk = a.get(p, k);
                    let aqk = a.get(q, k);
                    a.set(p, k, c * apk - s * aqk);
                    a.set(q, k, s * apk + c * aqk);
                }
                // Accumulate the rotation into the eigenvector matrix.
                for k in 0..n {
                    let vkp = v.get(k, p);
                    let vkq = v.get(k, q);
                    v.set(k, p, c * vkp - s * vkq);
                    v.set(k, q, s * vkp + c * vkq);
                }
            }
        }
        sweeps += 1;
        converged = off_norm(&a) <= tol;
    }
    if !converged {
        return Err(LinalgError::NoConvergence {
            sweeps: JACOBI_MAX_SWEEPS,
        });
    }

    let mut order: Vec<usize> = (0..n).collect();
    let eig: Vec<f64> = (0..n).map(|i| a.get(i, i)).collect();
    order.sort_by(|&i, &j| eig[j].partial_cmp(&eig[i]).unwrap());
    let values: Vec<f64> = order.iter().map(|&i| eig[i]).collect();
    let mut vectors = Matrix::zeros(n, n);
    for (new_col, &old_col) in order.iter().enumerate() {
        for r in 0..n {
            vectors.set(r, new_col, v.get(r, old_col));
        }
    }
    Ok((values, vectors))
}

/// Moore-Penrose pseudo-inverse plus the effective rank after truncating
/// singular values below `1e-12 * sigma_max`.
#[derive(Debug, Clone)]
pub struct PseudoInverse {
    pub matrix: Matrix,
    pub effective_rank: usize,
}

/// Pseudo-inverse via the symmetric eigendecomposition of `m^T m` (or
/// `m m^T`, whichever is smaller).
pub fn pinv(m: &Matrix) -> Result<PseudoInverse, LinalgError> {
    let (r, c) = (m.rows, m.cols);
    if r == 0 || c == 0 {
        return Ok(PseudoInverse {
            matrix: Matrix::zeros(c, r),
            effective_rank: 0,
        });
    }
    let use_gram = c <= r; // eigendecompose the smaller of m^T m / m m^T
    let small = if use_gram {
        gram(m)
    } else {
        gram(&m.transpose())
    };
    let (eigvals, eigvecs) = sym_eigen(&small)?;
    let sigma_max = eigvals.first().copied().unwrap_or(0.0).max(0.0).sqrt();
    let cutoff = PINV_RTOL * sigma_max;
    let mut out = Matrix::zeros(c, r);
    let mut rank = 0;
    let k = small.rows;
    for i in 0..k {
        let lambda = eigvals[i];
        if lambda <= 0.0 {
            continue;
        }
        let sigma = lambda.sqrt();
        if sigma <= cutoff {
            continue;
        }
        rank += 1;
        let v_i: Vec<f64> = (0..k).map(|row| eigvecs.get(row, i)).collect();
        if use_gram {
            // m = U S V^T, small = V S^2 V^T: pinv = sum v_i (m v_i)^T / lambda_i
            let mv = m.matvec(&v_i);
            for a in 0..c {
                let coeff = v_i[a] / lambda;
                for b in 0..r {
                    out.data[a * r + b] += coeff * mv[b];
                }
            }
        } else {
            // small = U S^2 U^T: pinv = sum (m^T u_i) u_i^T / lambda_i
            let mtu = {
                let mut acc = vec![0.0; c];
                for row in 0..r {
                    let ur = v_i[row];
                    if ur == 0.0 {
                        continue;
                    }
                    let mrow = m.row(row);
                    for col in 0..c {
                        acc[col] += ur * mrow[col];
                    }
                }
                acc
            };
            for a in 0..c {
                let coeff = mtu[a] / lambda;
                for b in 0..r {
                    out.data[a * r + b] += coeff * v_i[b];
                }
            }
        }
    }
    Ok(PseudoInverse {
        matrix: out,
        effective_rank: rank,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn random_matrix(rng: &mut StdRng, r: usize, c: usize) -> Matrix {
        let data: Vec<f64> = (0..r * c).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Matrix::from_vec(r, c, data)
    }

    fn assert_close(a: f64, b: f64, tol: f64) {
        assert!((a - b).abs() <= tol, "{a} vs {b} (tol {tol})");
    }

    #[test]
    fn matmul_identity() {
        let m = Matrix::from_rows(2, 2, &[1.0, 2.0, 3.0, 4.0]);
        let i = Matrix::identity(2);
        assert_eq!(matmul(&i, &m).unwrap(), m);
    }

    #[test]
    fn matmul_hand_expansion() {
        let a = Matrix::from_rows(2, 2, &[1.0, 2.0, 3.0, 4.0]);
        let b = Matrix::from_rows(2, 1, &[0.0, 1.0]);
        let c = matmul(&a, &b).unwrap();
        assert_eq!(c.data(), &[2.0, 4.0]);
    }

    #[test]
    fn matmul_matches_naive_triple_loop() {
        let mut rng = StdRng::seed_from_u64(7);
        let a = random_matrix(&mut rng, 7, 5);
        let b = random_matrix(&mut rng, 5, 3);
        let fast = matmul(&a, &b).unwrap();
        // Naive i-j-k oracle.
        let mut naive = Matrix::zeros(7, 3);
        for i in 0..7 {
            for j in 0..3 {
                let mut acc = 0.0;
                for k in 0..5 {
                    acc += a.get(i, k) * b.get(k, j);
                }
                naive.set(i, j, acc);
            }
        }
        for (x, y) in fast.data().iter().zip(naive.data()) {
            assert_close(*x, *y, 1e-13);
        }
    }

    #[test]
    fn matmul_nt_and_tn_match_explicit_transpose() {
        let mut rng = StdRng::seed_from_u64(8);
        let a = random_matrix(&mut rng, 6, 4);
        let b = random_matrix(&mut rng, 5, 4);
        let fast = matmul_nt(&a, &b).unwrap();
        let slow = matmul(&a, &b.transpose()).unwrap();
        for (x, y) in fast.data().iter().zip(slow.data()) {
            assert!((x - y).abs() < 1e-13);
        }
        let c = random_matrix(&mut rng, 6, 3);
        let fast = matmul_tn(&a, &c).unwrap();
        let slow = matmul(&a.transpose(), &c).unwrap();
        for (x, y) in fast.data().iter().zip(slow.data()) {
            assert!((x - y).abs() < 1e-13);
        }
        assert!(matmul_nt(&a, &c).is_err());
        assert!(matmul_tn(&a, &b).is_err());
    }

    #[test]
    fn matmul_dimension_mismatch() {
        let a = Matrix::zeros(2, 3);
        let b = Matrix::zeros(2, 3);
        assert!(matches!(
            matmul(&a, &b),
            Err(LinalgError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn matmul_bit_reproducible() {
        let mut rng = StdRng::seed_from_u64(42);
        let a = random_matrix(&mut rng, 9, 11);
        let b = random_matrix(&mut rng, 11, 6);
        let c1 = matmul(&a, &b).unwrap();
        let c2 = matmul(&a, &b).unwrap();
        assert_eq!(c1.data(), c2.data());
    }

    #[test]
    fn cholesky_identity() {
        let f = cholesky(&Matrix::identity(3), 1e-6).unwrap();
        assert_eq!(f.jitter_used(), 0.0);
        assert_eq!(f.lower(), &Matrix::identity(3));
    }

    #[test]
    fn cholesky_2x2_closed_form() {
        let m = Matrix::from_rows(2, 2, &[4.0, 2.0, 2.0, 3.0]);
        let f = cholesky(&m, 0.0).unwrap();
        assert_close(f.lower().get(0, 0), 2.0, 1e-15);
        assert_close(f.lower().get(1, 0), 1.0, 1e-15);
        assert_close(f.lower().get(1, 1), 2.0_f64.sqrt(), 1e-15);
        assert_eq!(f.lower().get(0, 1), 0.0);
    }

    #[test]
    fn cholesky_random_spd_reconstructs() {
        let mut rng = StdRng::seed_from_u64(3);
        let a = random_matrix(&mut rng, 10, 10);
        let spd = gram(&a).add(&Matrix::identity(10));
        let f = cholesky(&spd, 1e-8).unwrap();
        let rec = matmul(f.lower(), &f.lower().transpose()).unwrap();
        let err = rec.sub(&spd).frobenius_norm() / spd.frobenius_norm();
        assert!(err < 1e-10, "reconstruction error {err}");
    }

    #[test]
    fn cholesky_not_spd_reports_pivot() {
        let m = Matrix::from_rows(2, 2, &[1.0, 0.0, 0.0, -5.0]);
        match cholesky(&m, 1e-10) {
            Err(LinalgError::NotSpd { pivot }) => assert_eq!(pivot, 1),
            other => panic!("expected NotSpd, got {other:?}"),
        }
    }

    #[test]
    fn cholesky_jitter_escalates() {
        // Rank-deficient PSD matrix: needs jitter, succeeds with budget.
        let m = Matrix::from_rows(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        let f = cholesky(&m, 1e-6).unwrap();
        assert!(f.jitter_used() > 0.0 && f.jitter_used() <= 1e-6);
    }

    #[test]
    fn logdet_identity_and_diag() {
        let f = cholesky(&Matrix::identity(3), 0.0).unwrap();
        assert_eq!(logdet_spd(&f), 0.0);
        let d = Matrix::diag(&[2.0, 3.0]);
        let f = cholesky(&d, 0.0).unwrap();
        assert_close(logdet_spd(&f), 6.0_f64.ln(), 1e-12);
    }

    #[test]
    fn logdet_matches_eigenvalue_sum() {
        let mut rng = StdRng::seed_from_u64(11);
        let a = random_matrix(&mut rng, 8, 8);
        let spd = gram(&a).add(&Matrix::identity(8));
        let f = cholesky(&spd, 0.0).unwrap();
        let (eigs, _) = sym_eigen(&spd).unwrap();
        let from_eigs: f64 = eigs.iter().map(|l| l.ln()).sum();
        assert_close(logdet_spd(&f), from_eigs, 1e-8);
    }

    #[test]
    fn sym_eigen_diagonal() {
        let (vals, vecs) = sym_eigen(&Matrix::diag(&[3.0, 1.0])).unwrap();
        assert_close(vals[0], 3.0, 1e-14);
        assert_close(vals[1], 1.0, 1e-14);
        assert_close(vecs.get(0, 0).abs(), 1.0, 1e-14);
        assert_close(vecs.get(1, 1).abs(), 1.0, 1e-14);
    }

    #[test]
    fn sym_eigen_2x2_closed_form() {
        let m = Matrix::from_rows(2, 2, &[2.0, 1.0, 1.0, 2.0]);
        let (vals, _) = sym_eigen(&m).unwrap();
        assert_close(vals[0], 3.0, 1e-12);
        assert_close(vals[1], 1.0, 1e-12);
    }

    #[test]
    fn sym_eigen_reconstructs_and_is_orthonormal() {
        let mut rng = StdRng::seed_from_u64(5);
        let a = random_matrix(&mut rng, 8, 8);
        let sym = a.add(&a.transpose()).scale(0.5);
        let (vals, vecs) = sym_eigen(&sym).unwrap();
        // V Lambda V^T reconstruction.
        let rec = matmul(
            &matmul(&vecs, &Matrix::diag(&vals)).unwrap(),
            &vecs.transpose(),
        )
        .unwrap();
        assert!(rec.sub(&sym).max_abs() < 1e-8 * sym.frobenius_norm().max(1.0));
        // Orthonormality.
        let vtv = matmul(&vecs.transpose(), &vecs).unwrap();
        assert!(vtv.sub(&Matrix::identity(8)).max_abs() < 1e-10);
        // Eigenpair residuals.
        for k in 0..8 {
            let v: Vec<f64> = (0..8).map(|r| vecs.get(r, k)).collect();
            let mv = sym.matvec(&v);
            for i in 0..8 {
                assert_close(mv[i], vals[k] * v[i], 1e-8 * sym.frobenius_norm());
            }
        }
    }

    #[test]
    fn pinv_identity() {
        let p = pinv(&Matrix::identity(4)).unwrap();
        assert_eq!(p.effective_rank, 4);
        assert!(p.matrix.sub(&Matrix::identity(4)).max_abs() < 1e-12);
    }

    #[test]
    fn pinv_single_column() {
        let m = Matrix::from_rows(2, 1, &[1.0, -1.0]);
        let p = pinv(&m).unwrap();
        assert_eq!(p.effective_rank, 1);
        assert_close(p.matrix.get(0, 0), 0.5, 1e-12);
        assert_close(p.matrix.get(0, 1), -0.5, 1e-12);
    }

    fn check_penrose(m: &Matrix, p: &Matrix, tol: f64) {
        let scale = m.frobenius_norm().max(1.0);
        let mp = matmul(m, p).unwrap();
        let pm = matmul(p, m).unwrap();
        // 1. m p m = m
        let c1 = matmul(&mp, m).unwrap();
        assert!(c1.sub(m).max_abs() < tol * scale);
        // 2. p m p = p
        let c2 = matmul(&pm, p).unwrap();
        assert!(c2.sub(p).max_abs() < tol * p.frobenius_norm().max(1.0));
        // 3/4. m p and p m symmetric
        assert!(mp.sub(&mp.transpose()).max_abs() < tol * scale);
        assert!(pm.sub(&pm.transpose()).max_abs() < tol * scale);
    }

    #[test]
    fn pinv_satisfies_penrose_conditions() {
        let mut rng = StdRng::seed_from_u64(19);
        let m = random_matrix(&mut rng, 6, 3);
        let p = pinv(&m).unwrap();
        assert_eq!(p.effective_rank, 3);
        check_penrose(&m, &p.matrix, 1e-8);
        // Wide case goes through the m m^T branch.
        let w = random_matrix(&mut rng, 3, 6);
        let pw = pinv(&w).unwrap();
        assert_eq!(pw.effective_rank, 3);
        check_penrose(&w, &pw.matrix, 1e-8);
    }

    #[test]
    fn pinv_of_pinv_is_original() {
        let mut rng = StdRng::seed_from_u64(23);
        let m = random_matrix(&mut rng, 5, 4);
        let p = pinv(&m).unwrap();
        let pp = pinv(&p.matrix).unwrap();
        let err = pp.matrix.sub(&m).frobenius_norm() / m.frobenius_norm();
        assert!(err < 1e-6, "double pinv error {err}");
    }

    #[test]
    fn pinv_reports_rank_deficiency() {
        // Two identical columns: rank 1.
        let m = Matrix::from_rows(3, 2, &[1.0, 1.0, 2.0, 2.0, 3.0, 3.0]);
        let p = pinv(&m).unwrap();
        assert_eq!(p.effective_rank, 1);
        check_penrose(&m, &p.matrix, 1e-8);
    }

    #[test]
    fn cholesky_logdet_agrees_with_eigen_product() {
        let mut rng = StdRng::seed_from_u64(31);
        for _ in 0..5 {
            let a = random_matrix(&mut rng, 6, 6);
            let spd = gram(&a).add(&Matrix::identity(6));
            let f = cholesky(&spd, 0.0).unwrap();
            let (eigs, _) = sym_eigen(&spd).unwrap();
            let det_chol = logdet_spd(&f).exp();
            let det_eig: f64 = eigs.iter().product();
            assert!((det_chol - det_eig).abs() <= 1e-6 * det_eig.abs().max(1.0));
        }
    }
}
