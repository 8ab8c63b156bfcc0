//! Low-rank adapters over a frozen base weight.
//!
//! A layer's effective weight is `W = W0 + s * B * A` with `A` (r x d_in)
//! Gaussian-initialized, `B` (d_out x r) zero-initialized, and `W0` never
//! written after construction. Zero `B` makes the adapter an exact identity
//! at step 0. Factor gradients for a weight-space gradient `G_W` follow the
//! chain rule through the product:
//!
//!   g_A = s * B^T * G_W        (r x d_in)
//!   g_B = s * G_W * A^T        (d_out x r)
//!
//! The weight-space effect of factor increments `(dA, dB)` is
//! `composite_update = s * (B dA + dB A)`, which differs from the true
//! effective-weight change by exactly the second-order term `s * dB * dA`.

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::rng::{gaussian_matrix, seeded_rng};

/// Low-rank adapted layer weight. `w0` is frozen; only `a` and `b` move.
#[derive(Debug, Clone)]
pub struct LoraAdapter {
    w0: Matrix,
    a: Matrix,
    b: Matrix,
    scale: f64,
}

impl LoraAdapter {
    /// Fresh adapter: `A` has iid N(0, 1/d_in) entries (std `1/sqrt(d_in)`)
    /// drawn from `seed`, `B` is zero, so the initial effective weight equals
    /// `w0` exactly.
    pub fn new(w0: Matrix, rank: usize, scale: f64, seed: u64) -> Result<Self> {
        let d_in = w0.cols();
        let d_out = w0.rows();
        check_rank("LoraAdapter::new", rank, d_in, d_out)?;
        check_scale("LoraAdapter::new", scale)?;
        let std = 1.0 / (d_in as f64).sqrt();
        let mut rng = seeded_rng(seed);
        let a = gaussian_matrix(&mut rng, rank, d_in, std);
        let b = Matrix::zeros(d_out, rank);
        Ok(LoraAdapter { w0, a, b, scale })
    }

    /// Adapter from explicit factors; used by tests and checkpoint loading.
    pub fn from_parts(w0: Matrix, a: Matrix, b: Matrix, scale: f64) -> Result<Self> {
        if a.cols() != w0.cols() || b.rows() != w0.rows() || a.rows() != b.cols() {
            return Err(Error::shape(
                "LoraAdapter::from_parts",
                format!(
                    "w0 {}x{}, a {}x{}, b {}x{}",
                    w0.rows(),
                    w0.cols(),
                    a.rows(),
                    a.cols(),
                    b.rows(),
                    b.cols()
                ),
            ));
        }
        check_rank("LoraAdapter::from_parts", a.rows(), w0.cols(), w0.rows())?;
        check_scale("LoraAdapter::from_parts", scale)?;
        Ok(LoraAdapter { w0, a, b, scale })
    }

    pub fn d_in(&self) -> usize {
        self.w0.cols()
    }

    pub fn d_out(&self) -> usize {
        self.w0.rows()
    }

    pub fn rank(&self) -> usize {
        self.a.rows()
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn w0(&self) -> &Matrix {
        &self.w0
    }

    pub fn a(&self) -> &Matrix {
        &self.a
    }

    pub fn b(&self) -> &Matrix {
        &self.b
    }

    /// `W = W0 + s * B * A`.
    pub fn effective_weight(&self) -> Matrix {
        let ba = self
            .b
            .matmul(&self.a)
            .expect("factor shapes fixed at construction");
        self.w0
            .add(&ba.scale(self.scale))
            .expect("shapes fixed at construction")
    }

    /// Batch forward `Y = X W^T` for row-major samples `X` (n x d_in).
    pub fn forward(&self, x: &Matrix) -> Result<Matrix> {
        if x.cols() != self.d_in() {
            return Err(Error::shape(
                "LoraAdapter::forward",
                format!("input has {} columns, layer expects {}", x.cols(), self.d_in()),
            ));
        }
        x.matmul(&self.effective_weight().transpose())
    }

    /// Factor gradients for a weight-space gradient `g_w` (d_out x d_in).
    pub fn factor_grads(&self, g_w: &Matrix) -> Result<(Matrix, Matrix)> {
        self.check_weight_shape("LoraAdapter::factor_grads", g_w)?;
        let g_a = self.b.transpose().matmul(g_w)?.scale(self.scale);
        let g_b = g_w.matmul(&self.a.transpose())?.scale(self.scale);
        Ok((g_a, g_b))
    }

    /// First-order weight-space effect of factor increments:
    /// `s * (B dA + dB A)`.
    pub fn composite_update(&self, d_a: &Matrix, d_b: &Matrix) -> Result<Matrix> {
        self.check_factor_shapes("LoraAdapter::composite_update", d_a, d_b)?;
        let lhs = self.b.matmul(d_a)?;
        let rhs = d_b.matmul(&self.a)?;
        Ok(lhs.add(&rhs)?.scale(self.scale))
    }

    /// Applies factor increments in place. `w0` is untouched.
    pub fn apply_factors(&mut self, d_a: &Matrix, d_b: &Matrix) -> Result<()> {
        self.check_factor_shapes("LoraAdapter::apply_factors", d_a, d_b)?;
        self.a = self.a.add(d_a)?;
        self.b = self.b.add(d_b)?;
        Ok(())
    }

    fn check_weight_shape(&self, op: &'static str, g: &Matrix) -> Result<()> {
        if g.rows() != self.d_out() || g.cols() != self.d_in() {
            return Err(Error::shape(
                op,
                format!(
                    "gradient is {}x{}, layer weight is {}x{}",
                    g.rows(),
                    g.cols(),
                    self.d_out(),
                    self.d_in()
                ),
            ));
        }
        Ok(())
    }

    fn check_factor_shapes(&self, op: &'static str, d_a: &Matrix, d_b: &Matrix) -> Result<()> {
        if d_a.rows() != self.rank() || d_a.cols() != self.d_in() {
            return Err(Error::shape(
                op,
                format!(
                    "dA is {}x{}, expected {}x{}",
                    d_a.rows(),
                    d_a.cols(),
                    self.rank(),
                    self.d_in()
                ),
            ));
        }
        if d_b.rows() != self.d_out() || d_b.cols() != self.rank() {
            return Err(Error::shape(
                op,
                format!(
                    "dB is {}x{}, expected {}x{}",
                    d_b.rows(),
                    d_b.cols(),
                    self.d_out(),
                    self.rank()
                ),
            ));
        }
        Ok(())
    }
}

fn check_rank(op: &'static str, rank: usize, d_in: usize, d_out: usize) -> Result<()> {
    if rank == 0 || rank > d_in.min(d_out) {
        return Err(Error::protocol(
            op,
            format!("rank {rank} outside 1..=min({d_in}, {d_out})"),
        ));
    }
    Ok(())
}

fn check_scale(op: &'static str, scale: f64) -> Result<()> {
    if !(scale.is_finite() && scale > 0.0) {
        return Err(Error::protocol(op, format!("scale {scale} must be finite and positive")));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::{central_diff, relative_gradient_error};
    use crate::testutil::{assert_close, seeded_rng, standard_matrix};
    use rand::Rng;

    fn random_adapter(rng: &mut rand_chacha::ChaCha8Rng, d_out: usize, d_in: usize, r: usize, scale: f64) -> LoraAdapter {
        let w0 = standard_matrix(rng, d_out, d_in);
        let a = standard_matrix(rng, r, d_in);
        let b = standard_matrix(rng, d_out, r);
        LoraAdapter::from_parts(w0, a, b, scale).unwrap()
    }

    #[test]
    fn zero_b_means_identity_at_step_zero() {
        let mut rng = seeded_rng(31);
        let w0 = standard_matrix(&mut rng, 6, 5);
        let ad = LoraAdapter::new(w0.clone(), 3, 1.0, 77).unwrap();
        // Exact equality: adding s * 0 * A changes nothing, bit for bit.
        assert_eq!(ad.effective_weight(), w0);
        let x = standard_matrix(&mut rng, 4, 5);
        let y = ad.forward(&x).unwrap();
        let plain = x.matmul(&w0.transpose()).unwrap();
        assert_eq!(y, plain);
    }

    #[test]
    fn init_is_seed_deterministic_and_correctly_scaled() {
        let mut rng = seeded_rng(32);
        let w0 = standard_matrix(&mut rng, 8, 16);
        let a1 = LoraAdapter::new(w0.clone(), 4, 1.0, 5).unwrap();
        let a2 = LoraAdapter::new(w0.clone(), 4, 1.0, 5).unwrap();
        assert_eq!(a1.a(), a2.a());
        let a3 = LoraAdapter::new(w0, 4, 1.0, 6).unwrap();
        assert_ne!(a1.a(), a3.a());
    }

    #[test]
    fn w0_is_frozen_across_updates() {
        let mut rng = seeded_rng(33);
        let mut ad = random_adapter(&mut rng, 5, 7, 2, 1.5);
        let before: Vec<u64> = ad.w0().data().iter().map(|v| v.to_bits()).collect();
        for _ in 0..10 {
            let da = standard_matrix(&mut rng, 2, 7);
            let db = standard_matrix(&mut rng, 5, 2);
            ad.apply_factors(&da, &db).unwrap();
        }
        let after: Vec<u64> = ad.w0().data().iter().map(|v| v.to_bits()).collect();
        assert_eq!(before, after);
    }

    #[test]
    fn factor_grads_match_finite_differences() {
        // Probe loss: L(W) = <C, W> so G_W = C; then perturb A and B.
        let mut rng = seeded_rng(34);
        for _ in 0..10 {
            let (d_out, d_in, r) = (rng.gen_range(2..6), rng.gen_range(2..7), rng.gen_range(1..3));
            let scale = rng.gen_range(0.5..2.0);
            let ad = random_adapter(&mut rng, d_out, d_in, r, scale);
            let c = standard_matrix(&mut rng, d_out, d_in);
            let (g_a, g_b) = ad.factor_grads(&c).unwrap();
            let loss = |a: &Matrix, b: &Matrix| {
                let w = ad
                    .w0()
                    .add(&b.matmul(a).unwrap().scale(ad.scale()))
                    .unwrap();
                let mut acc = 0.0;
                for i in 0..w.rows() {
                    for j in 0..w.cols() {
                        acc += c.get(i, j) * w.get(i, j);
                    }
                }
                acc
            };
            let fd_a = central_diff(ad.a(), 1e-6, |a| loss(a, ad.b()));
            let fd_b = central_diff(ad.b(), 1e-6, |b| loss(ad.a(), b));
            assert!(relative_gradient_error(&g_a, &fd_a) <= 1e-5);
            assert!(relative_gradient_error(&g_b, &fd_b) <= 1e-5);
        }
    }

    #[test]
    fn composite_matches_true_weight_change_minus_second_order() {
        let mut rng = seeded_rng(35);
        for _ in 0..10 {
            let ad = random_adapter(&mut rng, 6, 5, 3, 1.25);
            let da = standard_matrix(&mut rng, 3, 5);
            let db = standard_matrix(&mut rng, 6, 3);
            let composite = ad.composite_update(&da, &db).unwrap();
            let mut moved = ad.clone();
            moved.apply_factors(&da, &db).unwrap();
            let true_change = moved
                .effective_weight()
                .sub(&ad.effective_weight())
                .unwrap();
            let second = db.matmul(&da).unwrap().scale(ad.scale());
            let identity_gap = true_change
                .sub(&second)
                .unwrap()
                .sub(&composite)
                .unwrap()
                .frobenius_norm();
            assert!(identity_gap <= 1e-12 * composite.frobenius_norm().max(1.0));
        }
    }

    #[test]
    fn composite_is_linear_in_the_increments() {
        let mut rng = seeded_rng(36);
        let ad = random_adapter(&mut rng, 4, 6, 2, 0.75);
        let da1 = standard_matrix(&mut rng, 2, 6);
        let db1 = standard_matrix(&mut rng, 4, 2);
        let da2 = standard_matrix(&mut rng, 2, 6);
        let db2 = standard_matrix(&mut rng, 4, 2);
        let sum = ad
            .composite_update(&da1.add(&da2).unwrap(), &db1.add(&db2).unwrap())
            .unwrap();
        let parts = ad
            .composite_update(&da1, &db1)
            .unwrap()
            .add(&ad.composite_update(&da2, &db2).unwrap())
            .unwrap();
        assert_close(&sum, &parts, 1e-12, "composite linearity");
    }

    #[test]
    fn apply_then_negate_restores_factors() {
        let mut rng = seeded_rng(37);
        let ad0 = random_adapter(&mut rng, 5, 5, 2, 1.0);
        let mut ad = ad0.clone();
        let da = standard_matrix(&mut rng, 2, 5);
        let db = standard_matrix(&mut rng, 5, 2);
        ad.apply_factors(&da, &db).unwrap();
        ad.apply_factors(&da.scale(-1.0), &db.scale(-1.0)).unwrap();
        // (a + d) - d leaves at most last-place roundoff.
        let gap_a = ad.a().sub(ad0.a()).unwrap().frobenius_norm();
        let gap_b = ad.b().sub(ad0.b()).unwrap().frobenius_norm();
        assert!(gap_a <= 1e-15 * ad0.a().frobenius_norm().max(1.0));
        assert!(gap_b <= 1e-15 * ad0.b().frobenius_norm().max(1.0));
    }

    #[test]
    fn shape_errors_name_the_offender() {
        let mut rng = seeded_rng(38);
        let ad = random_adapter(&mut rng, 4, 6, 2, 1.0);
        let bad = standard_matrix(&mut rng, 3, 6);
        assert!(matches!(ad.factor_grads(&bad), Err(Error::Shape { .. })));
        assert!(matches!(
            ad.forward(&Matrix::zeros(2, 5)),
            Err(Error::Shape { .. })
        ));
        let da = Matrix::zeros(2, 6);
        let db_bad = Matrix::zeros(4, 3);
        assert!(matches!(
            ad.composite_update(&da, &db_bad),
            Err(Error::Shape { .. })
        ));
    }

    #[test]
    fn rank_and_scale_guards() {
        let w0 = Matrix::zeros(4, 6);
        assert!(matches!(
            LoraAdapter::new(w0.clone(), 0, 1.0, 1),
            Err(Error::Protocol { .. })
        ));
        assert!(matches!(
            LoraAdapter::new(w0.clone(), 5, 1.0, 1),
            Err(Error::Protocol { .. })
        ));
        assert!(matches!(
            LoraAdapter::new(w0, 2, 0.0, 1),
            Err(Error::Protocol { .. })
        ));
    }
}
