//! Shared helpers for the in-crate unit tests.

use rand_chacha::ChaCha8Rng;

use crate::linalg::Matrix;
use crate::rng;

pub fn seeded_rng(seed: u64) -> ChaCha8Rng {
    rng::seeded_rng(seed)
}

/// Matrix with iid standard-normal entries.
pub fn standard_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
    rng::gaussian_matrix(rng, rows, cols, 1.0)
}

/// Asserts entrywise closeness within an absolute tolerance.
pub fn assert_close(got: &Matrix, want: &Matrix, tol: f64, ctx: &str) {
    assert_eq!(
        (got.rows(), got.cols()),
        (want.rows(), want.cols()),
        "{ctx}: shape"
    );
    for i in 0..got.rows() {
        for j in 0..got.cols() {
            let d = (got.get(i, j) - want.get(i, j)).abs();
            assert!(
                d <= tol,
                "{ctx}: entry ({i},{j}) differs by {d:.3e} (got {}, want {})",
                got.get(i, j),
                want.get(i, j)
            );
        }
    }
}
