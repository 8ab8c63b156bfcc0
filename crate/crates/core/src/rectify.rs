//! Safe gradient projection and two-stage gradient rectification.
//!
//! Safe projection removes from a weight-space gradient everything that acts
//! on the protected subspace: `G_safe = G (I - V V^T)`. Because the basis is
//! orthonormal, `G_safe V = 0` up to the basis's own orthonormality defect,
//! so a step along `G_safe` cannot change the layer's response to inputs
//! lying in the protected span.
//!
//! Rectification converts `G_safe` into factor increments whose first-order
//! composite reproduces it as closely as the low-rank geometry allows. Both
//! stages are damped ridge solves (`delta > 0` keeps them well posed even
//! with a zero or rank-deficient factor):
//!
//!   dA = (1/s) (B^T B + delta I)^{-1} B^T G_safe
//!   R  = G_safe - s B dA
//!   dB = (1/s) R A^T (A A^T + delta I)^{-1}
//!
//! Stage one is the exact minimizer of `|G_safe - s B dA|_F^2 +
//! delta s^2 |dA|_F^2`; stage two routes the remainder through `A`. The
//! identity `B^T R = s delta dA` makes the residual nearly orthogonal to the
//! column space of `B`, which is what keeps the recombined update aligned
//! with the safe target.

use crate::error::{Error, Result};
use crate::linalg::{solve_spd, Matrix};
use crate::lora::LoraAdapter;
use crate::subspace::ProtectionBasis;

/// Damping for the two ridge stages. `delta` must be positive; the default
/// trades a 1e-6-sized bias for unconditional solvability.
#[derive(Debug, Clone, Copy)]
pub struct RectifyConfig {
    delta: f64,
}

impl RectifyConfig {
    pub const DEFAULT_DELTA: f64 = 1e-6;

    pub fn new(delta: f64) -> Result<Self> {
        if !(delta.is_finite() && delta > 0.0) {
            return Err(Error::protocol(
                "RectifyConfig::new",
                format!("delta {delta} must be finite and positive"),
            ));
        }
        Ok(RectifyConfig { delta })
    }

    pub fn delta(&self) -> f64 {
        self.delta
    }
}

impl Default for RectifyConfig {
    fn default() -> Self {
        RectifyConfig {
            delta: Self::DEFAULT_DELTA,
        }
    }
}

/// `G (I - V V^T)`, evaluated as `G - (G V) V^T` so no D x D projector is
/// ever formed. A rank-0 basis returns `G` unchanged.
pub fn safe_project(g_w: &Matrix, basis: &ProtectionBasis) -> Result<Matrix> {
    if g_w.cols() != basis.dim() {
        return Err(Error::shape(
            "safe_project",
            format!(
                "gradient has {} columns, basis lives in dimension {}",
                g_w.cols(),
                basis.dim()
            ),
        ));
    }
    if basis.rank() == 0 {
        return Ok(g_w.clone());
    }
    let gv = g_w.matmul(basis.v())?;
    g_w.sub(&gv.matmul(&basis.v().transpose())?)
}

/// Two-stage ridge rectification of a (projected) weight-space gradient into
/// factor increments `(dA, dB)`.
pub fn rectify(
    adapter: &LoraAdapter,
    g_safe: &Matrix,
    cfg: &RectifyConfig,
) -> Result<(Matrix, Matrix)> {
    if g_safe.rows() != adapter.d_out() || g_safe.cols() != adapter.d_in() {
        return Err(Error::shape(
            "rectify",
            format!(
                "gradient is {}x{}, layer weight is {}x{}",
                g_safe.rows(),
                g_safe.cols(),
                adapter.d_out(),
                adapter.d_in()
            ),
        ));
    }
    let s = adapter.scale();
    let r = adapter.rank();
    let damping = Matrix::identity(r).scale(cfg.delta);

    // Stage one: dA = (1/s) (B^T B + delta I)^{-1} B^T G.
    let bt = adapter.b().transpose();
    let gram_b = bt.matmul(adapter.b())?.add(&damping)?;
    let rhs_a = bt.matmul(g_safe)?;
    let d_a = solve_spd(&gram_b, &rhs_a)?.scale(1.0 / s);

    // Residual not yet expressed through B.
    let resid = g_safe.sub(&adapter.b().matmul(&d_a)?.scale(s))?;

    // Stage two: dB = (1/s) R A^T (A A^T + delta I)^{-1}, computed via the
    // transposed SPD system (A A^T + delta I) X = A R^T.
    let gram_a = adapter.a().matmul(&adapter.a().transpose())?.add(&damping)?;
    let rhs_b = adapter.a().matmul(&resid.transpose())?;
    let d_b = solve_spd(&gram_a, &rhs_b)?.transpose().scale(1.0 / s);

    Ok((d_a, d_b))
}

/// Interference of a weight-space update with reference samples:
/// `|dW X_ref^T|_F`. Zero means the update cannot change the layer's output
/// on any of those samples.
pub fn violation(d_w: &Matrix, x_ref: &Matrix) -> Result<f64> {
    if d_w.cols() != x_ref.cols() {
        return Err(Error::shape(
            "violation",
            format!(
                "update has {} columns, reference samples have {}",
                d_w.cols(),
                x_ref.cols()
            ),
        ));
    }
    Ok(d_w.matmul(&x_ref.transpose())?.frobenius_norm())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lora::LoraAdapter;
    use crate::oracle;
    use crate::rng::random_orthonormal;
    use crate::subspace::ProtectionBasis;
    use crate::testutil::{assert_close, seeded_rng, standard_matrix};
    use rand::Rng;

    fn random_setup(
        rng: &mut rand_chacha::ChaCha8Rng,
        d_out: usize,
        d_in: usize,
        r: usize,
        k: usize,
    ) -> (LoraAdapter, Matrix, ProtectionBasis) {
        let w0 = standard_matrix(rng, d_out, d_in);
        let a = standard_matrix(rng, r, d_in);
        let b = standard_matrix(rng, d_out, r);
        let adapter = LoraAdapter::from_parts(w0, a, b, 1.0).unwrap();
        let g = standard_matrix(rng, d_out, d_in);
        let v = random_orthonormal(rng, d_in, k).unwrap();
        let basis = ProtectionBasis::from_matrix(v, 1, 0).unwrap();
        (adapter, g, basis)
    }

    #[test]
    fn projection_annihilates_the_protected_span() {
        let mut rng = seeded_rng(61);
        for _ in 0..30 {
            let d_in = rng.gen_range(4..12);
            let d_out = rng.gen_range(2..8);
            let k = rng.gen_range(1..d_in.min(5));
            let g = standard_matrix(&mut rng, d_out, d_in);
            let v = random_orthonormal(&mut rng, d_in, k).unwrap();
            let basis = ProtectionBasis::from_matrix(v, 1, 0).unwrap();
            let safe = safe_project(&g, &basis).unwrap();
            let null = safe.matmul(basis.v()).unwrap().frobenius_norm();
            assert!(
                null <= 1e-10 * g.frobenius_norm().max(1.0),
                "residual along basis: {null:.3e}"
            );
        }
    }

    #[test]
    fn projection_matches_the_sample_space_oracle() {
        // Reference route: P = X^T (X X^T)^{-1} X built from raw samples that
        // span the same space as the basis.
        let mut rng = seeded_rng(62);
        for _ in 0..20 {
            let d_in = rng.gen_range(5..10);
            let d_out = rng.gen_range(2..6);
            let k = rng.gen_range(1..4.min(d_in));
            let v = random_orthonormal(&mut rng, d_in, k).unwrap();
            // Exactly k independent rows: the oracle inverts the sample Gram
            // matrix, so the rows must be a basis of the span.
            let mix = standard_matrix(&mut rng, k, k);
            let x = mix.matmul(&v.transpose()).unwrap();
            let g = standard_matrix(&mut rng, d_out, d_in);
            let basis = ProtectionBasis::from_matrix(v, 1, 0).unwrap();
            let safe = safe_project(&g, &basis).unwrap();
            let reference = oracle::project_out_samples(&g, &x).unwrap();
            assert_close(&safe, &reference, 1e-8, "projection vs sample oracle");
        }
    }

    #[test]
    fn projection_is_idempotent() {
        let mut rng = seeded_rng(63);
        let (_, g, basis) = random_setup(&mut rng, 5, 9, 3, 3);
        let once = safe_project(&g, &basis).unwrap();
        let twice = safe_project(&once, &basis).unwrap();
        let gap = twice.sub(&once).unwrap().frobenius_norm();
        assert!(gap <= 1e-12 * once.frobenius_norm().max(1.0));
    }

    #[test]
    fn projection_is_the_nearest_feasible_point() {
        // Any other update with the same null-space property is farther from
        // the raw gradient.
        let mut rng = seeded_rng(64);
        let (_, g, basis) = random_setup(&mut rng, 4, 8, 2, 3);
        let safe = safe_project(&g, &basis).unwrap();
        let base_dist = safe.sub(&g).unwrap().frobenius_norm();
        for _ in 0..100 {
            let z = standard_matrix(&mut rng, 4, 8);
            let z_feasible = safe_project(&z, &basis).unwrap();
            let candidate = safe.add(&z_feasible.scale(0.1)).unwrap();
            let dist = candidate.sub(&g).unwrap().frobenius_norm();
            assert!(dist + 1e-10 >= base_dist);
        }
    }

    #[test]
    fn empty_basis_passes_gradients_through_unchanged() {
        let mut rng = seeded_rng(65);
        let g = standard_matrix(&mut rng, 3, 7);
        let basis = ProtectionBasis::empty(7, 0);
        let safe = safe_project(&g, &basis).unwrap();
        assert_eq!(safe, g);
    }

    #[test]
    fn full_rank_basis_zeroes_the_gradient() {
        let mut rng = seeded_rng(66);
        let g = standard_matrix(&mut rng, 3, 6);
        let v = random_orthonormal(&mut rng, 6, 6).unwrap();
        let basis = ProtectionBasis::from_matrix(v, 1, 0).unwrap();
        let safe = safe_project(&g, &basis).unwrap();
        assert!(safe.frobenius_norm() <= 1e-10 * g.frobenius_norm());
    }

    #[test]
    fn stage_one_matches_the_ridge_oracle() {
        let mut rng = seeded_rng(67);
        for _ in 0..20 {
            let d_out = rng.gen_range(3..9);
            let d_in = rng.gen_range(3..9);
            let r = rng.gen_range(1..=3.min(d_out).min(d_in));
            let (adapter, g, basis) = random_setup(&mut rng, d_out, d_in, r, 1.min(d_in));
            let safe = safe_project(&g, &basis).unwrap();
            let cfg = RectifyConfig::new(1e-6).unwrap();
            let (d_a, _d_b) = rectify(&adapter, &safe, &cfg).unwrap();
            let want = oracle::ridge_stage_one(adapter.b(), &safe, adapter.scale(), cfg.delta())
                .unwrap();
            assert_close(&d_a, &want, 1e-8, "stage one vs ridge oracle");
        }
    }

    #[test]
    fn residual_is_nearly_orthogonal_to_b() {
        let mut rng = seeded_rng(68);
        for _ in 0..20 {
            let (adapter, g, basis) = random_setup(&mut rng, 6, 8, 3, 2);
            let safe = safe_project(&g, &basis).unwrap();
            let cfg = RectifyConfig::default();
            let (d_a, _d_b) = rectify(&adapter, &safe, &cfg).unwrap();
            let resid = safe
                .sub(&adapter.b().matmul(&d_a).unwrap().scale(adapter.scale()))
                .unwrap();
            let bt_r = adapter.b().transpose().matmul(&resid).unwrap().frobenius_norm();
            let b_norm = adapter.b().frobenius_norm();
            let bound = 10.0 * cfg.delta() * d_a.frobenius_norm() * (1.0 + b_norm * b_norm);
            assert!(bt_r <= bound, "|B^T R| = {bt_r:.3e} > bound {bound:.3e}");
        }
    }

    #[test]
    fn zero_b_sends_everything_through_stage_two() {
        // With B = 0 stage one collapses to zero and dB carries the update.
        let mut rng = seeded_rng(69);
        let w0 = standard_matrix(&mut rng, 5, 7);
        let adapter = LoraAdapter::new(w0, 3, 1.0, 9).unwrap();
        let g = standard_matrix(&mut rng, 5, 7);
        let cfg = RectifyConfig::default();
        let (d_a, d_b) = rectify(&adapter, &g, &cfg).unwrap();
        assert!(d_a.frobenius_norm() == 0.0);
        assert!(d_b.frobenius_norm() > 0.0);
        // dB should match g A^T (A A^T + delta I)^{-1} directly.
        let gram = adapter
            .a()
            .matmul(&adapter.a().transpose())
            .unwrap()
            .add(&Matrix::identity(3).scale(cfg.delta()))
            .unwrap();
        let want = g
            .matmul(&adapter.a().transpose())
            .unwrap()
            .matmul(&oracle::solve_dense(&gram, &Matrix::identity(3)).unwrap())
            .unwrap();
        assert_close(&d_b, &want, 1e-8, "dB with zero B");
    }

    #[test]
    fn rectified_composite_interferes_less_than_naive() {
        let mut rng = seeded_rng(70);
        let mut wins = 0usize;
        let trials = 50;
        for _ in 0..trials {
            let (adapter, g, basis) = random_setup(&mut rng, 6, 10, 3, 3);
            // Reference samples drawn from the protected span.
            let mix = standard_matrix(&mut rng, 5, basis.rank());
            let x_ref = mix.matmul(&basis.v().transpose()).unwrap();
            let eta = 1e-2;
            let (na, nb) = adapter.factor_grads(&g).unwrap();
            let naive = adapter
                .composite_update(&na.scale(-eta), &nb.scale(-eta))
                .unwrap();
            let safe = safe_project(&g, &basis).unwrap();
            let (da, db) = rectify(&adapter, &safe, &RectifyConfig::default()).unwrap();
            let rect = adapter
                .composite_update(&da.scale(-eta), &db.scale(-eta))
                .unwrap();
            let v_naive = violation(&naive, &x_ref).unwrap();
            let v_rect = violation(&rect, &x_ref).unwrap();
            if v_rect < v_naive {
                wins += 1;
            }
        }
        assert!(wins >= trials * 9 / 10, "rectified won only {wins}/{trials}");
    }

    #[test]
    fn violation_is_zero_for_updates_supported_off_span() {
        let mut rng = seeded_rng(71);
        let v = random_orthonormal(&mut rng, 8, 2).unwrap();
        let basis = ProtectionBasis::from_matrix(v, 1, 0).unwrap();
        let g = standard_matrix(&mut rng, 4, 8);
        let safe = safe_project(&g, &basis).unwrap();
        let mix = standard_matrix(&mut rng, 6, 2);
        let x_ref = mix.matmul(&basis.v().transpose()).unwrap();
        let v = violation(&safe, &x_ref).unwrap();
        assert!(v <= 1e-10 * g.frobenius_norm().max(1.0));
    }

    #[test]
    fn config_rejects_non_positive_delta() {
        assert!(RectifyConfig::new(0.0).is_err());
        assert!(RectifyConfig::new(-1e-6).is_err());
        assert!(RectifyConfig::new(f64::NAN).is_err());
    }
}
