//! Dense row-major f64 linear algebra substrate.
//!
//! Everything in this crate funnels through the handful of kernels here:
//! `matmul`, `frobenius_norm`, thin Householder QR, and a Cholesky solve for
//! small SPD systems. The kernels are deliberately plain loops with a fixed
//! accumulation order so that a given input always produces bit-identical
//! output, which the reproducibility checks rely on.
//!
//! Conventions:
//! - storage is row-major; sample batches put one sample per row,
//! - QR fixes signs so the diagonal of R is nonnegative,
//! - every exported operation keeps the all-entries-finite invariant.

use crate::error::{Error, Result};

/// Diagonal of R below this magnitude counts as rank collapse in [`qr_thin`].
const QR_RANK_TOL: f64 = 1e-12;

/// Allowed asymmetry (relative to the largest entry) in [`solve_spd`].
const SPD_SYM_TOL: f64 = 1e-10;

/// Dense row-major matrix of `f64`. Entries are finite by construction.
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

    /// Builds from a row-major buffer. Rejects length mismatch and non-finite
    /// entries.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape(
                "Matrix::from_vec",
                format!("{rows}x{cols} needs {} entries, got {}", rows * cols, data.len()),
            ));
        }
        let m = Matrix { rows, cols, data };
        m.ensure_finite("Matrix::from_vec")?;
        Ok(m)
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(r * c);
        for (i, row) in rows.iter().enumerate() {
            if row.len() != c {
                return Err(Error::shape(
                    "Matrix::from_rows",
                    format!("row {i} has {} entries, expected {c}", row.len()),
                ));
            }
            data.extend_from_slice(row);
        }
        Matrix::from_vec(r, c, data)
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Result<Self> {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Matrix::from_vec(rows, cols, data)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        debug_assert!(i < self.rows && j < self.cols);
        self.data[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        debug_assert!(i < self.rows && j < self.cols);
        self.data[i * self.cols + j] = v;
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Stacks the given rows of `self` into a new matrix.
    pub fn select_rows(&self, idx: &[usize]) -> Result<Matrix> {
        let mut data = Vec::with_capacity(idx.len() * self.cols);
        for &i in idx {
            if i >= self.rows {
                return Err(Error::shape(
                    "Matrix::select_rows",
                    format!("row {i} out of range for {} rows", self.rows),
                ));
            }
            data.extend_from_slice(self.row(i));
        }
        Ok(Matrix {
            rows: idx.len(),
            cols: self.cols,
            data,
        })
    }

    pub fn transpose(&self) -> Matrix {
        let mut t = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        t
    }

    pub fn add(&self, rhs: &Matrix) -> Result<Matrix> {
        self.zip_with("Matrix::add", rhs, |a, b| a + b)
    }

    pub fn sub(&self, rhs: &Matrix) -> Result<Matrix> {
        self.zip_with("Matrix::sub", rhs, |a, b| a - b)
    }

    pub fn scale(&self, a: f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|x| x * a).collect(),
        }
    }

    /// Row-major product `self * rhs` with a fixed k-ascending accumulation
    /// order per output entry.
    pub fn matmul(&self, rhs: &Matrix) -> Result<Matrix> {
        if self.cols != rhs.rows {
            return Err(Error::shape(
                "matmul",
                format!(
                    "{}x{} * {}x{} (inner dimensions differ)",
                    self.rows, self.cols, rhs.rows, rhs.cols
                ),
            ));
        }
        let mut out = Matrix::zeros(self.rows, rhs.cols);
        for i in 0..self.rows {
            let lhs_row = &self.data[i * self.cols..(i + 1) * self.cols];
            let out_row = &mut out.data[i * rhs.cols..(i + 1) * rhs.cols];
            for (k, &l) in lhs_row.iter().enumerate() {
                let rhs_row = &rhs.data[k * rhs.cols..(k + 1) * rhs.cols];
                for (o, &r) in out_row.iter_mut().zip(rhs_row) {
                    *o += l * r;
                }
            }
        }
        out.ensure_finite("matmul")?;
        Ok(out)
    }

    /// sqrt of the sum of squared entries, accumulated in storage order.
    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |acc, x| acc.max(x.abs()))
    }

    fn zip_with(&self, op: &'static str, rhs: &Matrix, f: impl Fn(f64, f64) -> f64) -> Result<Matrix> {
        if self.rows != rhs.rows || self.cols != rhs.cols {
            return Err(Error::shape(
                op,
                format!(
                    "{}x{} vs {}x{}",
                    self.rows, self.cols, rhs.rows, rhs.cols
                ),
            ));
        }
        let data: Vec<f64> = self
            .data
            .iter()
            .zip(&rhs.data)
            .map(|(&a, &b)| f(a, b))
            .collect();
        let m = Matrix {
            rows: self.rows,
            cols: self.cols,
            data,
        };
        m.ensure_finite(op)?;
        Ok(m)
    }

    pub(crate) fn ensure_finite(&self, op: &'static str) -> Result<()> {
        for (idx, v) in self.data.iter().enumerate() {
            if !v.is_finite() {
                return Err(Error::non_finite(
                    op,
                    format!("entry ({}, {}) = {v}", idx / self.cols.max(1), idx % self.cols.max(1)),
                ));
            }
        }
        Ok(())
    }
}

/// Dot product of two equal-length slices, accumulated left to right.
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Thin Householder QR of `m` (d x k, d >= k): returns `(Q, R)` with
/// Q d x k orthonormal, R k x k upper triangular with nonnegative diagonal,
/// and `Q * R == m` up to roundoff.
///
/// The nonnegative-diagonal convention makes the factorization unique for
/// full-rank input, so repeated calls on the same bytes give the same bytes.
pub fn qr_thin(m: &Matrix) -> Result<(Matrix, Matrix)> {
    let (d, k) = (m.rows, m.cols);
    if d < k {
        return Err(Error::shape(
            "qr_thin",
            format!("{d}x{k} has more columns than rows"),
        ));
    }
    let mut a = m.clone();
    // Householder vectors; v[j] lives in rows j..d, with its squared norm.
    let mut reflectors: Vec<(Vec<f64>, f64)> = Vec::with_capacity(k);
    for j in 0..k {
        let mut norm_sq = 0.0;
        for i in j..d {
            let x = a.get(i, j);
            norm_sq += x * x;
        }
        let norm = norm_sq.sqrt();
        let pivot = a.get(j, j);
        let alpha = if pivot >= 0.0 { -norm } else { norm };
        let mut v = vec![0.0; d];
        for i in j..d {
            v[i] = a.get(i, j);
        }
        v[j] -= alpha;
        let vtv = dot(&v[j..], &v[j..]);
        if vtv > 0.0 {
            for col in j..k {
                let mut proj = 0.0;
                for i in j..d {
                    proj += v[i] * a.get(i, col);
                }
                let s = 2.0 * proj / vtv;
                for i in j..d {
                    let cur = a.get(i, col);
                    a.set(i, col, cur - s * v[i]);
                }
            }
        }
        reflectors.push((v, vtv));
    }

    let mut r = Matrix::zeros(k, k);
    for i in 0..k {
        for j in i..k {
            r.set(i, j, a.get(i, j));
        }
    }
    for j in 0..k {
        let pivot = r.get(j, j);
        if pivot.abs() < QR_RANK_TOL {
            return Err(Error::Degenerate {
                op: "qr_thin",
                column: j,
                pivot: pivot.abs(),
            });
        }
    }

    // Q = H_0 * ... * H_{k-1} applied to the first k columns of the identity.
    let mut q = Matrix::zeros(d, k);
    for j in 0..k {
        q.set(j, j, 1.0);
    }
    for j in (0..k).rev() {
        let (v, vtv) = &reflectors[j];
        if *vtv <= 0.0 {
            continue;
        }
        for col in 0..k {
            let mut proj = 0.0;
            for i in j..d {
                proj += v[i] * q.get(i, col);
            }
            let s = 2.0 * proj / vtv;
            for i in j..d {
                let cur = q.get(i, col);
                q.set(i, col, cur - s * v[i]);
            }
        }
    }

    for j in 0..k {
        if r.get(j, j) < 0.0 {
            for c in j..k {
                let x = r.get(j, c);
                r.set(j, c, -x);
            }
            for i in 0..d {
                let x = q.get(i, j);
                q.set(i, j, -x);
            }
        }
    }

    q.ensure_finite("qr_thin")?;
    r.ensure_finite("qr_thin")?;
    Ok((q, r))
}

/// Solves `G X = H` for SPD `G` (r x r) and `H` (r x n) via Cholesky.
///
/// `G` must be symmetric to a 1e-10 relative tolerance; a non-positive pivot
/// reports the failing index.
pub fn solve_spd(g: &Matrix, h: &Matrix) -> Result<Matrix> {
    let r = g.rows;
    if g.cols != r {
        return Err(Error::shape(
            "solve_spd",
            format!("G is {}x{}, expected square", g.rows, g.cols),
        ));
    }
    if h.rows != r {
        return Err(Error::shape(
            "solve_spd",
            format!("H has {} rows, expected {r}", h.rows),
        ));
    }
    let scale = g.max_abs().max(1.0);
    for i in 0..r {
        for j in (i + 1)..r {
            let asym = (g.get(i, j) - g.get(j, i)).abs();
            if asym > SPD_SYM_TOL * scale {
                return Err(Error::numerical(
                    "solve_spd",
                    format!("G not symmetric: |G[{i},{j}] - G[{j},{i}]| = {asym:.3e}"),
                ));
            }
        }
    }

    // Lower-triangular Cholesky factor, built column by column.
    let mut l = Matrix::zeros(r, r);
    for j in 0..r {
        let mut diag = g.get(j, j);
        for k in 0..j {
            let ljk = l.get(j, k);
            diag -= ljk * ljk;
        }
        if diag <= 0.0 {
            return Err(Error::numerical(
                "solve_spd",
                format!("non-positive pivot {diag:.3e} at index {j}"),
            ));
        }
        let ljj = diag.sqrt();
        l.set(j, j, ljj);
        for i in (j + 1)..r {
            let mut v = g.get(i, j);
            for k in 0..j {
                v -= l.get(i, k) * l.get(j, k);
            }
            l.set(i, j, v / ljj);
        }
    }

    // L Y = H, then L^T X = Y, one RHS column at a time.
    let n = h.cols;
    let mut x = Matrix::zeros(r, n);
    for c in 0..n {
        let mut y = vec![0.0; r];
        for i in 0..r {
            let mut v = h.get(i, c);
            for k in 0..i {
                v -= l.get(i, k) * y[k];
            }
            y[i] = v / l.get(i, i);
        }
        for i in (0..r).rev() {
            let mut v = y[i];
            for k in (i + 1)..r {
                v -= l.get(k, i) * x.get(k, c);
            }
            x.set(i, c, v / l.get(i, i));
        }
    }
    x.ensure_finite("solve_spd")?;
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle;
    use crate::testutil::{assert_close, seeded_rng, standard_matrix};
    use rand::Rng;

    #[test]
    fn from_vec_rejects_bad_length_and_nan() {
        assert!(matches!(
            Matrix::from_vec(2, 2, vec![1.0, 2.0, 3.0]),
            Err(Error::Shape { .. })
        ));
        assert!(matches!(
            Matrix::from_vec(1, 2, vec![1.0, f64::NAN]),
            Err(Error::NonFinite { .. })
        ));
    }

    #[test]
    fn matmul_identity_is_exact() {
        let mut rng = seeded_rng(11);
        let m = standard_matrix(&mut rng, 5, 3);
        let out = Matrix::identity(5).matmul(&m).unwrap();
        assert_eq!(out, m);
    }

    #[test]
    fn matmul_rejects_inner_mismatch() {
        let a = Matrix::zeros(2, 3);
        let b = Matrix::zeros(2, 3);
        assert!(matches!(a.matmul(&b), Err(Error::Shape { .. })));
    }

    #[test]
    fn matmul_matches_triple_loop_reference() {
        let mut rng = seeded_rng(12);
        for _ in 0..20 {
            let m = rng.gen_range(1..6);
            let k = rng.gen_range(1..6);
            let n = rng.gen_range(1..6);
            let a = standard_matrix(&mut rng, m, k);
            let b = standard_matrix(&mut rng, k, n);
            let got = a.matmul(&b).unwrap();
            let want = oracle::matmul_naive(&a, &b);
            assert_close(&got, &want, 1e-13, "matmul vs naive");
        }
    }

    #[test]
    fn matmul_with_zero_dimension_operands() {
        let a = Matrix::zeros(3, 0);
        let b = Matrix::zeros(0, 4);
        let out = a.matmul(&b).unwrap();
        assert_eq!(out, Matrix::zeros(3, 4));
    }

    #[test]
    fn frobenius_norm_matches_reference_and_hand_case() {
        // 3-4-5 triangle gives norm 5 exactly.
        let m = Matrix::from_rows(&[vec![3.0, 4.0]]).unwrap();
        assert_eq!(m.frobenius_norm(), 5.0);
        let mut rng = seeded_rng(13);
        let m = standard_matrix(&mut rng, 7, 4);
        let err = (m.frobenius_norm() - oracle::frobenius_naive(&m)).abs();
        assert!(err <= 1e-13);
    }

    #[test]
    fn qr_of_identity_is_identity() {
        let (q, r) = qr_thin(&Matrix::identity(4)).unwrap();
        let tol = 1e-14;
        for i in 0..4 {
            for j in 0..4 {
                let e = if i == j { 1.0 } else { 0.0 };
                assert!((q.get(i, j) - e).abs() <= tol);
                assert!((r.get(i, j) - e).abs() <= tol);
            }
        }
    }

    #[test]
    fn qr_hand_case_single_column() {
        // Gram-Schmidt by hand: [[3],[4]] has Q = [[0.6],[0.8]], R = [[5]].
        let m = Matrix::from_rows(&[vec![3.0], vec![4.0]]).unwrap();
        let (q, r) = qr_thin(&m).unwrap();
        assert!((q.get(0, 0) - 0.6).abs() <= 1e-15);
        assert!((q.get(1, 0) - 0.8).abs() <= 1e-15);
        assert!((r.get(0, 0) - 5.0).abs() <= 1e-14);
    }

    #[test]
    fn qr_reconstructs_with_orthonormal_q_and_nonnegative_diagonal() {
        let mut rng = seeded_rng(14);
        for _ in 0..25 {
            let d = rng.gen_range(2..10);
            let k = rng.gen_range(1..=d);
            let m = standard_matrix(&mut rng, d, k);
            let (q, r) = qr_thin(&m).unwrap();
            let qtq = q.transpose().matmul(&q).unwrap();
            let dev = qtq.sub(&Matrix::identity(k)).unwrap().frobenius_norm();
            assert!(dev <= 1e-12, "Q^T Q deviation {dev:.3e}");
            let recon = q.matmul(&r).unwrap().sub(&m).unwrap().frobenius_norm();
            assert!(recon <= 1e-10 * m.frobenius_norm().max(1.0), "QR != M: {recon:.3e}");
            for j in 0..k {
                assert!(r.get(j, j) >= 0.0);
                for i in (j + 1)..k {
                    assert_eq!(r.get(i, j), 0.0);
                }
            }
        }
    }

    #[test]
    fn qr_is_bitwise_deterministic() {
        let mut rng = seeded_rng(15);
        let m = standard_matrix(&mut rng, 8, 5);
        let (q1, r1) = qr_thin(&m).unwrap();
        let (q2, r2) = qr_thin(&m).unwrap();
        let bits = |m: &Matrix| m.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&q1), bits(&q2));
        assert_eq!(bits(&r1), bits(&r2));
    }

    #[test]
    fn qr_names_the_dependent_column() {
        // Third column = first + second.
        let m = Matrix::from_rows(&[
            vec![1.0, 0.0, 1.0],
            vec![0.0, 1.0, 1.0],
            vec![0.0, 0.0, 0.0],
            vec![1.0, 1.0, 2.0],
        ])
        .unwrap();
        match qr_thin(&m) {
            Err(Error::Degenerate { column, .. }) => assert_eq!(column, 2),
            other => panic!("expected degeneracy, got {other:?}"),
        }
    }

    #[test]
    fn qr_zero_column_count_is_empty() {
        let (q, r) = qr_thin(&Matrix::zeros(4, 0)).unwrap();
        assert_eq!((q.rows(), q.cols()), (4, 0));
        assert_eq!((r.rows(), r.cols()), (0, 0));
    }

    #[test]
    fn solve_spd_identity_returns_rhs() {
        let mut rng = seeded_rng(16);
        let h = standard_matrix(&mut rng, 4, 3);
        let x = solve_spd(&Matrix::identity(4), &h).unwrap();
        assert_close(&x, &h, 1e-14, "I x = h");
    }

    #[test]
    fn solve_spd_residual_is_small() {
        let mut rng = seeded_rng(17);
        for _ in 0..20 {
            let r = rng.gen_range(1..8);
            let n = rng.gen_range(1..6);
            // B^T B + I is SPD by construction.
            let b = standard_matrix(&mut rng, r + 2, r);
            let g = b
                .transpose()
                .matmul(&b)
                .unwrap()
                .add(&Matrix::identity(r))
                .unwrap();
            let h = standard_matrix(&mut rng, r, n);
            let x = solve_spd(&g, &h).unwrap();
            let resid = g.matmul(&x).unwrap().sub(&h).unwrap().frobenius_norm();
            assert!(
                resid <= 1e-8 * h.frobenius_norm().max(1.0),
                "residual {resid:.3e}"
            );
        }
    }

    #[test]
    fn solve_spd_names_failing_pivot() {
        // diag(1, -1) fails at index 1.
        let g = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, -1.0]]).unwrap();
        let h = Matrix::zeros(2, 1);
        match solve_spd(&g, &h) {
            Err(Error::Numerical { details, .. }) => {
                assert!(details.contains("index 1"), "details: {details}")
            }
            other => panic!("expected pivot failure, got {other:?}"),
        }
    }

    #[test]
    fn solve_spd_rejects_asymmetric_input() {
        let g = Matrix::from_rows(&[vec![1.0, 0.5], vec![0.0, 1.0]]).unwrap();
        let h = Matrix::zeros(2, 1);
        assert!(matches!(solve_spd(&g, &h), Err(Error::Numerical { .. })));
    }
}
