//! Online estimation of the past-task activation subspace, plus an offline
//! SVD baseline and the projector distance used to compare bases.
//!
//! The online estimator keeps a rank-k orthonormal basis `V` (D x k) per
//! layer and descends the reconstruction loss
//!
//!   L(V) = 1/2 * |X - X V V^T|_F^2
//!
//! whose Euclidean gradient is `-[(I - V V^T) S + S (I - V V^T)] V` with
//! `S = X^T X`. Each step takes a plain gradient step and retracts back onto
//! the Stiefel manifold with a thin QR, so `|V^T V - I|_F <= 1e-10` holds
//! after every step no matter the step size. The basis actually used to
//! protect training is a frozen snapshot taken at a task boundary, never the
//! live estimate.
//!
//! The gradient is evaluated through the residual `E = X - X V V^T`
//! (`grad = -(M + M^T) V`, `M = X^T E`), which is algebraically the same
//! expression but returns an exactly zero matrix when the residual is
//! exactly zero.

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::linalg::{qr_thin, Matrix};
use crate::rng::gaussian_matrix;

/// Eigenvalues at or below this fraction of the largest count as zero when
/// ranking the spectrum in [`offline_svd_basis`].
const SPECTRUM_RANK_TOL: f64 = 1e-12;

/// Live rank-k subspace estimate for one adapted layer.
#[derive(Debug, Clone)]
pub struct OnlineEstimator {
    v: Matrix,
    eta_v: f64,
    layer_id: usize,
}

/// Frozen basis snapshot used to protect training. `source_task` records the
/// boundary at which it was taken.
#[derive(Debug, Clone)]
pub struct ProtectionBasis {
    v: Matrix,
    source_task: usize,
    layer_id: usize,
}

impl ProtectionBasis {
    /// Basis from an explicit orthonormal matrix (tests, offline baseline).
    pub fn from_matrix(v: Matrix, source_task: usize, layer_id: usize) -> Result<Self> {
        check_orthonormal("ProtectionBasis::from_matrix", &v, 1e-8)?;
        Ok(ProtectionBasis {
            v,
            source_task,
            layer_id,
        })
    }

    /// Rank-0 basis: projects nothing out.
    pub fn empty(dim: usize, layer_id: usize) -> Self {
        ProtectionBasis {
            v: Matrix::zeros(dim, 0),
            source_task: 0,
            layer_id,
        }
    }

    pub fn v(&self) -> &Matrix {
        &self.v
    }

    pub fn dim(&self) -> usize {
        self.v.rows()
    }

    pub fn rank(&self) -> usize {
        self.v.cols()
    }

    pub fn source_task(&self) -> usize {
        self.source_task
    }

    pub fn layer_id(&self) -> usize {
        self.layer_id
    }
}

impl OnlineEstimator {
    /// Starts from the first k columns of the identity, retracted once so the
    /// sign convention already holds.
    pub fn new(dim: usize, rank: usize, eta_v: f64, layer_id: usize) -> Result<Self> {
        if rank == 0 || rank > dim {
            return Err(Error::protocol(
                "OnlineEstimator::new",
                format!("rank {rank} outside 1..={dim}"),
            ));
        }
        if !(eta_v.is_finite() && eta_v > 0.0) {
            return Err(Error::protocol(
                "OnlineEstimator::new",
                format!("eta_v {eta_v} must be finite and positive"),
            ));
        }
        let mut v = Matrix::zeros(dim, rank);
        for j in 0..rank {
            v.set(j, j, 1.0);
        }
        let (q, _r) = qr_thin(&v)?;
        Ok(OnlineEstimator {
            v: q,
            eta_v,
            layer_id,
        })
    }

    pub fn basis(&self) -> &Matrix {
        &self.v
    }

    pub fn dim(&self) -> usize {
        self.v.rows()
    }

    pub fn rank(&self) -> usize {
        self.v.cols()
    }

    pub fn eta_v(&self) -> f64 {
        self.eta_v
    }

    pub fn layer_id(&self) -> usize {
        self.layer_id
    }

    /// One descent-and-retract step on a batch `x` (samples as rows).
    ///
    /// Rank collapse inside the retraction surfaces as a degeneracy error
    /// naming the dead column; [`Self::rerandomize_column`] restores a usable
    /// basis.
    pub fn step(&mut self, x: &Matrix) -> Result<()> {
        let grad = recon_grad(&self.v, x)?;
        let stepped = self.v.sub(&grad.scale(self.eta_v))?;
        let (q, _r) = qr_thin(&stepped)?;
        self.v = q;
        debug_assert!(self.orthonormality_defect() <= 1e-10);
        Ok(())
    }

    /// Replaces one column with a fresh Gaussian draw and re-orthonormalizes.
    /// Recovery path for rank collapse reported by [`Self::step`].
    pub fn rerandomize_column(&mut self, column: usize, rng: &mut ChaCha8Rng) -> Result<()> {
        if column >= self.rank() {
            return Err(Error::protocol(
                "OnlineEstimator::rerandomize_column",
                format!("column {column} out of range for rank {}", self.rank()),
            ));
        }
        let fresh = gaussian_matrix(rng, self.dim(), 1, 1.0);
        for i in 0..self.dim() {
            self.v.set(i, column, fresh.get(i, 0));
        }
        let (q, _r) = qr_thin(&self.v)?;
        self.v = q;
        Ok(())
    }

    /// Frozen copy of the current basis for use as a protection target.
    pub fn snapshot(&self, source_task: usize) -> ProtectionBasis {
        ProtectionBasis {
            v: self.v.clone(),
            source_task,
            layer_id: self.layer_id,
        }
    }

    /// `|V^T V - I|_F`, the quantity bounded by the manifold invariant.
    pub fn orthonormality_defect(&self) -> f64 {
        orthonormality_defect(&self.v)
    }
}

pub fn orthonormality_defect(v: &Matrix) -> f64 {
    let k = v.cols();
    let vtv = v
        .transpose()
        .matmul(v)
        .expect("V^T V is always well formed");
    vtv.sub(&Matrix::identity(k))
        .expect("square k x k")
        .frobenius_norm()
}

fn check_orthonormal(op: &'static str, v: &Matrix, tol: f64) -> Result<()> {
    let defect = orthonormality_defect(v);
    if defect > tol {
        return Err(Error::numerical(
            op,
            format!("columns not orthonormal: |V^T V - I|_F = {defect:.3e}"),
        ));
    }
    Ok(())
}

/// `1/2 * |X - X V V^T|_F^2` for samples-as-rows `x`.
pub fn recon_loss(v: &Matrix, x: &Matrix) -> Result<f64> {
    let e = residual(v, x)?;
    let n = e.frobenius_norm();
    Ok(0.5 * n * n)
}

/// Euclidean gradient of [`recon_loss`] with respect to `v`, valid for any
/// (not necessarily orthonormal) `v`:
/// `-[(I - V V^T) S + S (I - V V^T)] V` with `S = X^T X`, evaluated through
/// the residual so a zero residual yields an exactly zero gradient.
pub fn recon_grad(v: &Matrix, x: &Matrix) -> Result<Matrix> {
    let e = residual(v, x)?;
    let m = x.transpose().matmul(&e)?; // S (I - V V^T), D x D
    let sum = m.add(&m.transpose())?;
    Ok(sum.matmul(v)?.scale(-1.0))
}

fn residual(v: &Matrix, x: &Matrix) -> Result<Matrix> {
    if x.cols() != v.rows() {
        return Err(Error::shape(
            "subspace::residual",
            format!("x has {} columns, basis lives in dimension {}", x.cols(), v.rows()),
        ));
    }
    let xv = x.matmul(v)?;
    x.sub(&xv.matmul(&v.transpose())?)
}

/// `|V1 V1^T - V2 V2^T|_F`: projector distance between two orthonormal
/// bases, invariant to basis rotation within each span.
pub fn subspace_distance(v1: &Matrix, v2: &Matrix) -> Result<f64> {
    if v1.rows() != v2.rows() {
        return Err(Error::shape(
            "subspace_distance",
            format!("bases live in dimensions {} and {}", v1.rows(), v2.rows()),
        ));
    }
    let p1 = v1.matmul(&v1.transpose())?;
    let p2 = v2.matmul(&v2.transpose())?;
    Ok(p1.sub(&p2)?.frobenius_norm())
}

/// Top-k right singular vectors of `x_all` (samples as rows), computed by a
/// cyclic Jacobi eigendecomposition of the Gram matrix `S = X^T X`. Columns
/// are ordered by decreasing singular value; the entry of largest magnitude
/// in each column is made positive so the result is deterministic.
///
/// This is the batch baseline the online estimator is compared against; it
/// rebuilds from explicitly stored activations rather than a running
/// estimate.
pub fn offline_svd_basis(x_all: &Matrix, k: usize) -> Result<Matrix> {
    let d = x_all.cols();
    if k == 0 || k > d {
        return Err(Error::protocol(
            "offline_svd_basis",
            format!("rank {k} outside 1..={d}"),
        ));
    }
    if x_all.rows() < k {
        return Err(Error::protocol(
            "offline_svd_basis",
            format!("{} samples cannot determine a rank-{k} basis", x_all.rows()),
        ));
    }
    let s = x_all.transpose().matmul(x_all)?;
    let (eigvals, eigvecs) = jacobi_eigh(&s);

    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&i, &j| eigvals[j].partial_cmp(&eigvals[i]).unwrap().then(i.cmp(&j)));

    let lead = eigvals[order[0]].max(0.0);
    for (pos, &idx) in order.iter().take(k).enumerate() {
        if eigvals[idx] <= SPECTRUM_RANK_TOL * lead.max(1e-300) || lead == 0.0 {
            return Err(Error::Degenerate {
                op: "offline_svd_basis",
                column: pos,
                pivot: eigvals[idx].max(0.0),
            });
        }
    }

    let mut v = Matrix::zeros(d, k);
    for (pos, &idx) in order.iter().take(k).enumerate() {
        // Sign convention: largest-magnitude entry positive.
        let mut flip = 1.0;
        let mut best = 0.0;
        for i in 0..d {
            let val = eigvecs.get(i, idx);
            if val.abs() > best {
                best = val.abs();
                flip = if val < 0.0 { -1.0 } else { 1.0 };
            }
        }
        for i in 0..d {
            v.set(i, pos, flip * eigvecs.get(i, idx));
        }
    }
    Ok(v)
}

/// Cyclic Jacobi eigendecomposition of a symmetric matrix. Returns
/// `(eigenvalues, eigenvectors-as-columns)` with `A U = U diag(lambda)` up
/// to roundoff. Deterministic sweep order, no pivoting heuristics.
fn jacobi_eigh(a: &Matrix) -> (Vec<f64>, Matrix) {
    let n = a.rows();
    let mut m = a.clone();
    let mut u = Matrix::identity(n);
    let scale = m.max_abs().max(1e-300);
    let tol = 1e-15 * scale;
    for _sweep in 0..64 {
        let mut off = 0.0f64;
        for p in 0..n {
            for q in (p + 1)..n {
                off = off.max(m.get(p, q).abs());
            }
        }
        if off <= tol {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = m.get(p, q);
                if apq.abs() <= tol * 1e-2 {
                    continue;
                }
                let app = m.get(p, p);
                let aqq = m.get(q, q);
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for i in 0..n {
                    let mip = m.get(i, p);
                    let miq = m.get(i, q);
                    m.set(i, p, c * mip - s * miq);
                    m.set(i, q, s * mip + c * miq);
                }
                for j in 0..n {
                    let mpj = m.get(p, j);
                    let mqj = m.get(q, j);
                    m.set(p, j, c * mpj - s * mqj);
                    m.set(q, j, s * mpj + c * mqj);
                }
                for i in 0..n {
                    let uip = u.get(i, p);
                    let uiq = u.get(i, q);
                    u.set(i, p, c * uip - s * uiq);
                    u.set(i, q, s * uip + c * uiq);
                }
            }
        }
    }
    let eig = (0..n).map(|i| m.get(i, i)).collect();
    (eig, u)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::{central_diff, relative_gradient_error};
    use crate::rng::random_orthonormal;
    use crate::testutil::{seeded_rng, standard_matrix};
    use rand::Rng;

    #[test]
    fn estimator_starts_orthonormal_with_identity_block() {
        let est = OnlineEstimator::new(6, 3, 1e-3, 0).unwrap();
        assert!(est.orthonormality_defect() <= 1e-12);
        for j in 0..3 {
            assert!((est.basis().get(j, j) - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn step_on_zero_batch_leaves_basis_fixed_up_to_signs() {
        let mut est = OnlineEstimator::new(5, 2, 1e-3, 0).unwrap();
        let before = est.basis().clone();
        est.step(&Matrix::zeros(7, 5)).unwrap();
        for j in 0..2 {
            let mut same = 0.0;
            for i in 0..5 {
                same += before.get(i, j) * est.basis().get(i, j);
            }
            assert!((same.abs() - 1.0).abs() <= 1e-12, "column {j} changed span");
        }
    }

    #[test]
    fn recon_grad_is_exactly_zero_on_zero_residual() {
        // Canonical V and X supported on the first k coordinates make the
        // residual bitwise zero, so the gradient must be bitwise zero too.
        let mut v = Matrix::zeros(6, 2);
        v.set(0, 0, 1.0);
        v.set(1, 1, 1.0);
        let mut x = Matrix::zeros(4, 6);
        x.set(0, 0, 1.5);
        x.set(1, 1, -2.5);
        x.set(2, 0, 0.25);
        x.set(3, 1, 3.0);
        let g = recon_grad(&v, &x).unwrap();
        assert!(g.data().iter().all(|&v| v == 0.0));
        assert_eq!(recon_loss(&v, &x).unwrap(), 0.0);
    }

    #[test]
    fn recon_grad_matches_finite_differences_off_manifold() {
        let mut rng = seeded_rng(41);
        for _ in 0..10 {
            let d = rng.gen_range(3..7);
            let k = rng.gen_range(1..3.min(d));
            let n = rng.gen_range(2..6);
            // Deliberately non-orthonormal point: the formula must be the
            // true Euclidean gradient everywhere, not just on the manifold.
            let v = standard_matrix(&mut rng, d, k);
            let x = standard_matrix(&mut rng, n, d);
            let g = recon_grad(&v, &x).unwrap();
            let fd = central_diff(&v, 1e-5, |p| recon_loss(p, &x).unwrap());
            let err = relative_gradient_error(&g, &fd);
            assert!(err <= 1e-5, "gradient error {err:.3e}");
        }
    }

    #[test]
    fn retraction_restores_orthonormality_even_for_huge_steps() {
        let mut rng = seeded_rng(42);
        let mut est = OnlineEstimator::new(8, 3, 50.0, 0).unwrap();
        for _ in 0..20 {
            let x = standard_matrix(&mut rng, 6, 8);
            est.step(&x).unwrap();
            assert!(est.orthonormality_defect() <= 1e-10);
        }
    }

    #[test]
    fn stationary_when_rows_lie_in_the_span() {
        let mut rng = seeded_rng(43);
        let v0 = random_orthonormal(&mut rng, 7, 3).unwrap();
        let mut est = OnlineEstimator::new(7, 3, 1e-2, 0).unwrap();
        est.v = v0.clone();
        let coeff = standard_matrix(&mut rng, 5, 3);
        let x = coeff.matmul(&v0.transpose()).unwrap();
        est.step(&x).unwrap();
        let moved = subspace_distance(est.basis(), &v0).unwrap();
        assert!(moved <= 1e-10, "span moved by {moved:.3e}");
    }

    #[test]
    fn recon_loss_non_increasing_on_stationary_data() {
        let mut rng = seeded_rng(44);
        let x = standard_matrix(&mut rng, 20, 10);
        let s_norm = x.transpose().matmul(&x).unwrap().frobenius_norm();
        let mut est = OnlineEstimator::new(10, 3, 1e-3 / s_norm, 0).unwrap();
        let mut prev = recon_loss(est.basis(), &x).unwrap();
        for _ in 0..300 {
            est.step(&x).unwrap();
            let cur = recon_loss(est.basis(), &x).unwrap();
            assert!(cur <= prev + 1e-9, "loss rose from {prev} to {cur}");
            prev = cur;
        }
    }

    #[test]
    fn rerandomize_column_restores_full_rank() {
        let mut rng = seeded_rng(45);
        let mut est = OnlineEstimator::new(6, 2, 1e-3, 3).unwrap();
        est.rerandomize_column(1, &mut rng).unwrap();
        assert!(est.orthonormality_defect() <= 1e-10);
        assert!(matches!(
            est.rerandomize_column(5, &mut rng),
            Err(Error::Protocol { .. })
        ));
    }

    #[test]
    fn snapshot_is_a_frozen_copy() {
        let mut rng = seeded_rng(46);
        let mut est = OnlineEstimator::new(6, 2, 1e-2, 1).unwrap();
        let snap = est.snapshot(4);
        let frozen: Vec<u64> = snap.v().data().iter().map(|v| v.to_bits()).collect();
        for _ in 0..5 {
            est.step(&standard_matrix(&mut rng, 4, 6)).unwrap();
        }
        let still: Vec<u64> = snap.v().data().iter().map(|v| v.to_bits()).collect();
        assert_eq!(frozen, still);
        assert_eq!(snap.source_task(), 4);
        assert_eq!(snap.layer_id(), 1);
    }

    #[test]
    fn offline_basis_recovers_planted_spectrum() {
        let mut rng = seeded_rng(47);
        let (n, d, k) = (40, 9, 3);
        let u = random_orthonormal(&mut rng, n, k).unwrap();
        let w = random_orthonormal(&mut rng, d, k).unwrap();
        // X = U diag(sigma) W^T with a clean spectral gap.
        let mut sig = Matrix::zeros(k, k);
        for i in 0..k {
            sig.set(i, i, 8.0 / (i as f64 + 1.0));
        }
        let x = u.matmul(&sig).unwrap().matmul(&w.transpose()).unwrap();
        let v = offline_svd_basis(&x, k).unwrap();
        let dist = subspace_distance(&v, &w).unwrap();
        assert!(dist <= 1e-6, "planted span missed by {dist:.3e}");
        assert!(orthonormality_defect(&v) <= 1e-10);
    }

    #[test]
    fn offline_basis_single_direction_hand_case() {
        // All rows equal to e1: the only singular direction is e1.
        let mut x = Matrix::zeros(5, 4);
        for i in 0..5 {
            x.set(i, 0, 1.0);
        }
        let v = offline_svd_basis(&x, 1).unwrap();
        assert!((v.get(0, 0).abs() - 1.0).abs() <= 1e-12);
        for i in 1..4 {
            assert!(v.get(i, 0).abs() <= 1e-12);
        }
    }

    #[test]
    fn offline_basis_full_rank_gives_identity_projector() {
        let mut rng = seeded_rng(48);
        let x = standard_matrix(&mut rng, 30, 5);
        let v = offline_svd_basis(&x, 5).unwrap();
        let p = v.matmul(&v.transpose()).unwrap();
        let dev = p.sub(&Matrix::identity(5)).unwrap().frobenius_norm();
        assert!(dev <= 1e-10);
    }

    #[test]
    fn offline_basis_rejects_rank_overrun() {
        // Rank-1 data cannot support a rank-2 basis.
        let mut x = Matrix::zeros(6, 4);
        for i in 0..6 {
            x.set(i, 2, 1.0 + i as f64);
        }
        assert!(matches!(
            offline_svd_basis(&x, 2),
            Err(Error::Degenerate { .. })
        ));
    }

    #[test]
    fn offline_basis_minimizes_reconstruction_among_competitors() {
        let mut rng = seeded_rng(49);
        let x = standard_matrix(&mut rng, 25, 8);
        let k = 3;
        let v = offline_svd_basis(&x, k).unwrap();
        let best = recon_loss(&v, &x).unwrap();
        for _ in 0..100 {
            let q = random_orthonormal(&mut rng, 8, k).unwrap();
            let other = recon_loss(&q, &x).unwrap();
            assert!(
                best <= other + 1e-10,
                "competitor beat the SVD basis: {other} < {best}"
            );
        }
    }

    #[test]
    fn distance_is_rotation_invariant_and_detects_disjoint_spans() {
        let mut rng = seeded_rng(50);
        let v = random_orthonormal(&mut rng, 6, 2).unwrap();
        // Rotate within the span: distance stays zero.
        let angle: f64 = 0.7;
        let rot = Matrix::from_rows(&[
            vec![angle.cos(), -angle.sin()],
            vec![angle.sin(), angle.cos()],
        ])
        .unwrap();
        let v_rot = v.matmul(&rot).unwrap();
        assert!(subspace_distance(&v, &v_rot).unwrap() <= 1e-12);
        // Orthogonal spans: squared distance is k1 + k2.
        let mut e1 = Matrix::zeros(4, 1);
        e1.set(0, 0, 1.0);
        let mut e2 = Matrix::zeros(4, 1);
        e2.set(1, 0, 1.0);
        let d = subspace_distance(&e1, &e2).unwrap();
        assert!((d - (2.0f64).sqrt()).abs() <= 1e-12);
    }
}
