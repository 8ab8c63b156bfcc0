//! Independent reference implementations used by the verification suites and
//! the `selftest` command.
//!
//! Each function recomputes a quantity along a route disjoint from the main
//! implementation it checks: naive triple-loop products, Gauss-Jordan solves
//! instead of Cholesky, explicit sample-space projectors instead of basis
//! projection, and central finite differences instead of analytic gradients.
//! Nothing here is used on any training path.

use crate::error::{Error, Result};
use crate::linalg::Matrix;

/// Triple-loop matrix product, the reference for `matmul`.
pub fn matmul_naive(a: &Matrix, b: &Matrix) -> Matrix {
    assert_eq!(a.cols(), b.rows(), "oracle matmul shape");
    let mut out = Matrix::zeros(a.rows(), b.cols());
    for i in 0..a.rows() {
        for j in 0..b.cols() {
            let mut acc = 0.0;
            for k in 0..a.cols() {
                acc += a.get(i, k) * b.get(k, j);
            }
            out.set(i, j, acc);
        }
    }
    out
}

/// Direct sum-of-squares Frobenius norm.
pub fn frobenius_naive(m: &Matrix) -> f64 {
    let mut acc = 0.0;
    for i in 0..m.rows() {
        for j in 0..m.cols() {
            acc += m.get(i, j) * m.get(i, j);
        }
    }
    acc.sqrt()
}

/// Gauss-Jordan solve of `A X = B` with partial pivoting, for general square
/// `A`. Reference route for the Cholesky path.
pub fn solve_dense(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    let n = a.rows();
    if a.cols() != n || b.rows() != n {
        return Err(Error::shape("oracle::solve_dense", "square A and matching B required"));
    }
    let m = b.cols();
    // Augmented [A | B], eliminated in place.
    let mut aug = Matrix::zeros(n, n + m);
    for i in 0..n {
        for j in 0..n {
            aug.set(i, j, a.get(i, j));
        }
        for j in 0..m {
            aug.set(i, n + j, b.get(i, j));
        }
    }
    for col in 0..n {
        let mut piv = col;
        for i in (col + 1)..n {
            if aug.get(i, col).abs() > aug.get(piv, col).abs() {
                piv = i;
            }
        }
        let pv = aug.get(piv, col);
        if pv.abs() < 1e-14 {
            return Err(Error::Degenerate {
                op: "oracle::solve_dense",
                column: col,
                pivot: pv.abs(),
            });
        }
        if piv != col {
            for j in 0..(n + m) {
                let a1 = aug.get(col, j);
                let a2 = aug.get(piv, j);
                aug.set(col, j, a2);
                aug.set(piv, j, a1);
            }
        }
        let pv = aug.get(col, col);
        for j in 0..(n + m) {
            aug.set(col, j, aug.get(col, j) / pv);
        }
        for i in 0..n {
            if i == col {
                continue;
            }
            let f = aug.get(i, col);
            if f == 0.0 {
                continue;
            }
            for j in 0..(n + m) {
                let v = aug.get(i, j) - f * aug.get(col, j);
                aug.set(i, j, v);
            }
        }
    }
    let mut x = Matrix::zeros(n, m);
    for i in 0..n {
        for j in 0..m {
            x.set(i, j, aug.get(i, n + j));
        }
    }
    Ok(x)
}

/// Orthogonal projector onto the row space of `x` (samples as rows):
/// `P = X^T (X X^T)^{-1} X`, the constrained-optimum form of the protected
/// subspace. Requires the rows of `x` to be linearly independent.
pub fn projector_from_samples(x: &Matrix) -> Result<Matrix> {
    let gram = x.matmul(&x.transpose())?;
    let sol = solve_dense(&gram, x)?; // (X X^T)^{-1} X
    x.transpose().matmul(&sol)
}

/// Reference safe update: `G (I - P)` with the sample-space projector above.
pub fn project_out_samples(g: &Matrix, x: &Matrix) -> Result<Matrix> {
    let p = projector_from_samples(x)?;
    let d = p.rows();
    let ip = Matrix::identity(d).sub(&p)?;
    g.matmul(&ip)
}

/// Ridge normal equations for the first rectification stage, solved by
/// Gauss-Jordan: `(B^T B + delta I) dA = (1/s) B^T G`.
pub fn ridge_stage_one(b: &Matrix, g: &Matrix, scale: f64, delta: f64) -> Result<Matrix> {
    let r = b.cols();
    let gram = b.transpose().matmul(b)?;
    let reg = gram.add(&Matrix::identity(r).scale(delta))?;
    let rhs = b.transpose().matmul(g)?.scale(1.0 / scale);
    solve_dense(&reg, &rhs)
}

/// Central-difference gradient of `f` at `point`, entry by entry.
pub fn central_diff(point: &Matrix, h: f64, mut f: impl FnMut(&Matrix) -> f64) -> Matrix {
    let mut grad = Matrix::zeros(point.rows(), point.cols());
    for i in 0..point.rows() {
        for j in 0..point.cols() {
            let mut plus = point.clone();
            plus.set(i, j, point.get(i, j) + h);
            let mut minus = point.clone();
            minus.set(i, j, point.get(i, j) - h);
            grad.set(i, j, (f(&plus) - f(&minus)) / (2.0 * h));
        }
    }
    grad
}

/// Norm-relative agreement between an analytic gradient and its
/// finite-difference reference: `|a - f|_F / max(|f|_F, floor)`.
pub fn relative_gradient_error(analytic: &Matrix, reference: &Matrix) -> f64 {
    let diff = analytic
        .sub(reference)
        .expect("gradient shapes must match")
        .frobenius_norm();
    diff / reference.frobenius_norm().max(1e-8)
}

/// Nearest-centroid classification accuracy: centroids from the training
/// rows, prediction by smallest Euclidean distance, ties to the lower class.
pub fn nearest_centroid_accuracy(
    train: &Matrix,
    train_labels: &[usize],
    test: &Matrix,
    test_labels: &[usize],
) -> f64 {
    let classes = train_labels.iter().copied().max().map_or(0, |m| m + 1);
    let dim = train.cols();
    let mut sums = vec![vec![0.0; dim]; classes];
    let mut counts = vec![0usize; classes];
    for (i, &y) in train_labels.iter().enumerate() {
        counts[y] += 1;
        for j in 0..dim {
            sums[y][j] += train.get(i, j);
        }
    }
    for (c, sum) in sums.iter_mut().enumerate() {
        if counts[c] > 0 {
            for v in sum.iter_mut() {
                *v /= counts[c] as f64;
            }
        }
    }
    let mut correct = 0usize;
    for (i, &y) in test_labels.iter().enumerate() {
        let mut best = 0usize;
        let mut best_d = f64::INFINITY;
        for (c, centroid) in sums.iter().enumerate() {
            if counts[c] == 0 {
                continue;
            }
            let mut d = 0.0;
            for j in 0..dim {
                let diff = test.get(i, j) - centroid[j];
                d += diff * diff;
            }
            if d < best_d {
                best_d = d;
                best = c;
            }
        }
        if best == y {
            correct += 1;
        }
    }
    correct as f64 / test_labels.len().max(1) as f64
}
