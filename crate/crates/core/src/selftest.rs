//! Built-in verification suite: every analytic route in the library checked
//! against an independent oracle. Used by the command-line `selftest`; each
//! check is deterministic and fast.

use crate::dml::{dml_loss, normalize_features, DmlConfig, FeatureBatch, PrototypeBank};
use crate::linalg::Matrix;
use crate::lora::LoraAdapter;
use crate::model::{cross_entropy, Activation, NetConfig, ToyNet};
use crate::oracle::{
    central_diff, project_out_samples, relative_gradient_error, ridge_stage_one,
};
use crate::rectify::{rectify, safe_project, RectifyConfig};
use crate::rng::{gaussian_matrix, random_orthonormal, seeded_rng, unit_vector};
use crate::subspace::{offline_svd_basis, recon_grad, recon_loss, subspace_distance, OnlineEstimator, ProtectionBasis};

#[derive(Debug, Clone)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

impl CheckResult {
    fn from_bound(name: &'static str, worst: f64, bound: f64) -> Self {
        CheckResult {
            name,
            passed: worst <= bound,
            detail: format!("worst {worst:.3e}, bound {bound:.1e}"),
        }
    }

    fn failure(name: &'static str, detail: String) -> Self {
        CheckResult {
            name,
            passed: false,
            detail,
        }
    }
}

fn check_projection() -> CheckResult {
    let name = "projection-vs-sample-space-oracle";
    let mut rng = seeded_rng(0x5E1F_0001);
    let mut worst = 0.0f64;
    for trial in 0..20 {
        let d = 8 + (trial % 3) * 4;
        let k = 3 + trial % 3;
        let x = gaussian_matrix(&mut rng, k, d, 1.0);
        let g = gaussian_matrix(&mut rng, 6, d, 1.0);
        let (q, _) = match crate::linalg::qr_thin(&x.transpose()) {
            Ok(v) => v,
            Err(e) => return CheckResult::failure(name, e.to_string()),
        };
        let basis = match ProtectionBasis::from_matrix(q, 0, 0) {
            Ok(b) => b,
            Err(e) => return CheckResult::failure(name, e.to_string()),
        };
        let ours = match safe_project(&g, &basis) {
            Ok(v) => v,
            Err(e) => return CheckResult::failure(name, e.to_string()),
        };
        let oracle = match project_out_samples(&g, &x) {
            Ok(v) => v,
            Err(e) => return CheckResult::failure(name, e.to_string()),
        };
        let diff = ours.sub(&oracle).map(|m| m.max_abs()).unwrap_or(f64::MAX);
        worst = worst.max(diff);
        let resid = ours
            .matmul(basis.v())
            .map(|m| m.frobenius_norm())
            .unwrap_or(f64::MAX)
            / g.frobenius_norm().max(1.0);
        worst = worst.max(resid / 1e-2); // weight exactness into the same bound
    }
    CheckResult::from_bound(name, worst, 1e-8)
}

fn check_ridge() -> CheckResult {
    let name = "rectification-vs-ridge-oracle";
    let mut rng = seeded_rng(0x5E1F_0002);
    let delta = 1e-6;
    let cfg = match RectifyConfig::new(delta) {
        Ok(c) => c,
        Err(e) => return CheckResult::failure(name, e.to_string()),
    };
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let (d_out, d_in, r) = (10, 12, 3);
        let w0 = gaussian_matrix(&mut rng, d_out, d_in, 0.3);
        let a = gaussian_matrix(&mut rng, r, d_in, 0.3);
        let b = gaussian_matrix(&mut rng, d_out, r, 0.3);
        let adapter = match LoraAdapter::from_parts(w0, a, b.clone(), 1.0) {
            Ok(v) => v,
            Err(e) => return CheckResult::failure(name, e.to_string()),
        };
        let g = gaussian_matrix(&mut rng, d_out, d_in, 1.0);
        let (da, _db) = match rectify(&adapter, &g, &cfg) {
            Ok(v) => v,
            Err(e) => return CheckResult::failure(name, e.to_string()),
        };
        let oracle = match ridge_stage_one(&b, &g, 1.0, delta) {
            Ok(v) => v,
            Err(e) => return CheckResult::failure(name, e.to_string()),
        };
        let diff = da.sub(&oracle).map(|m| m.max_abs()).unwrap_or(f64::MAX);
        worst = worst.max(diff);
    }
    CheckResult::from_bound(name, worst, 1e-8)
}

fn check_offline_svd() -> CheckResult {
    let name = "offline-svd-planted-spectrum";
    let mut rng = seeded_rng(0x5E1F_0003);
    let (d, k, n) = (16, 4, 200);
    let u = match random_orthonormal(&mut rng, d, k) {
        Ok(v) => v,
        Err(e) => return CheckResult::failure(name, e.to_string()),
    };
    let mut x = Matrix::zeros(n, d);
    for i in 0..n {
        let coeffs: Vec<f64> = (0..k)
            .map(|j| {
                let s = 4.0 / (j + 1) as f64;
                s * unit_vector(&mut rng, 1)[0]
            })
            .collect();
        for c in 0..d {
            let mut v = 0.0;
            for j in 0..k {
                v += coeffs[j] * u.get(c, j);
            }
            x.set(i, c, v);
        }
    }
    let basis = match offline_svd_basis(&x, k) {
        Ok(v) => v,
        Err(e) => return CheckResult::failure(name, e.to_string()),
    };
    let dist = match subspace_distance(&basis, &u) {
        Ok(v) => v,
        Err(e) => return CheckResult::failure(name, e.to_string()),
    };
    CheckResult::from_bound(name, dist, 1e-6)
}

fn check_online_estimator() -> CheckResult {
    let name = "online-estimator-tracks-planted-subspace";
    let mut rng = seeded_rng(0x5E1F_0004);
    let (d, k) = (12, 3);
    let u = match random_orthonormal(&mut rng, d, k) {
        Ok(v) => v,
        Err(e) => return CheckResult::failure(name, e.to_string()),
    };
    let mut est = match OnlineEstimator::new(d, k, 5e-3, 0) {
        Ok(v) => v,
        Err(e) => return CheckResult::failure(name, e.to_string()),
    };
    for _ in 0..400 {
        let coeffs = gaussian_matrix(&mut rng, 8, k, 1.0);
        let batch = match coeffs.matmul(&u.transpose()) {
            Ok(v) => v,
            Err(e) => return CheckResult::failure(name, e.to_string()),
        };
        if let Err(e) = est.step(&batch) {
            return CheckResult::failure(name, e.to_string());
        }
        let defect = est.orthonormality_defect();
        if defect > 1e-10 {
            return CheckResult::failure(name, format!("orthonormality defect {defect:.3e}"));
        }
    }
    let dist = match subspace_distance(est.basis(), &u) {
        Ok(v) => v,
        Err(e) => return CheckResult::failure(name, e.to_string()),
    };
    CheckResult::from_bound(name, dist, 0.05)
}

fn check_finite_difference_gradients() -> CheckResult {
    let name = "finite-difference-gradients";
    let mut rng = seeded_rng(0x5E1F_0005);
    let mut worst = 0.0f64;

    // Adapter factor gradients through a linear probe loss.
    for _ in 0..5 {
        let (d_out, d_in, r) = (6, 7, 2);
        let w0 = gaussian_matrix(&mut rng, d_out, d_in, 0.4);
        let a = gaussian_matrix(&mut rng, r, d_in, 0.4);
        let b = gaussian_matrix(&mut rng, d_out, r, 0.4);
        let probe = gaussian_matrix(&mut rng, d_out, d_in, 1.0);
        let adapter = match LoraAdapter::from_parts(w0.clone(), a.clone(), b.clone(), 1.3) {
            Ok(v) => v,
            Err(e) => return CheckResult::failure(name, e.to_string()),
        };
        let g_w = probe.clone();
        let (ga, gb) = match adapter.factor_grads(&g_w) {
            Ok(v) => v,
            Err(e) => return CheckResult::failure(name, e.to_string()),
        };
        let loss_of = |aa: &Matrix, bb: &Matrix| {
            let ad = LoraAdapter::from_parts(w0.clone(), aa.clone(), bb.clone(), 1.3).unwrap();
            let w = ad.effective_weight();
            let mut acc = 0.0;
            for i in 0..w.rows() {
                for j in 0..w.cols() {
                    acc += probe.get(i, j) * w.get(i, j);
                }
            }
            acc
        };
        let fd_a = central_diff(&a, 1e-6, |m| loss_of(m, &b));
        let fd_b = central_diff(&b, 1e-6, |m| loss_of(&a, m));
        worst = worst.max(relative_gradient_error(&ga, &fd_a));
        worst = worst.max(relative_gradient_error(&gb, &fd_b));
    }

    // Reconstruction gradient of the subspace objective.
    for _ in 0..5 {
        let v = gaussian_matrix(&mut rng, 9, 3, 0.8);
        let x = gaussian_matrix(&mut rng, 6, 9, 1.0);
        let g = match recon_grad(&v, &x) {
            Ok(m) => m,
            Err(e) => return CheckResult::failure(name, e.to_string()),
        };
        let fd = central_diff(&v, 1e-6, |m| recon_loss(m, &x).unwrap());
        worst = worst.max(relative_gradient_error(&g, &fd));
    }

    // Margin-loss feature gradient.
    let dml_cfg = DmlConfig::default();
    for trial in 0..5 {
        let n = 4;
        let d = 6;
        let z = normalize_features(&gaussian_matrix(&mut rng, n, d, 1.0));
        let labels: Vec<usize> = (0..n).map(|i| i % 2).collect();
        let mut bank = PrototypeBank::new(0.9).unwrap();
        if trial % 2 == 0 {
            let old = normalize_features(&gaussian_matrix(&mut rng, 1, d, 1.0));
            bank.update_live(7, &old).unwrap();
            bank.freeze_task();
        }
        for c in 0..2 {
            let p = normalize_features(&gaussian_matrix(&mut rng, 1, d, 1.0));
            bank.update_live(c, &p).unwrap();
        }
        let batch = FeatureBatch::new(z.clone(), labels.clone()).unwrap();
        let (_, dz) = match dml_loss(&batch, &bank, &dml_cfg) {
            Ok(v) => v,
            Err(e) => return CheckResult::failure(name, e.to_string()),
        };
        let fd = central_diff(&z, 1e-6, |m| {
            let b = FeatureBatch::new(m.clone(), labels.clone()).unwrap();
            dml_loss(&b, &bank, &dml_cfg).unwrap().0
        });
        worst = worst.max(relative_gradient_error(&dz, &fd));
    }

    // Full network backward through the task loss.
    let cfg = NetConfig {
        input_dim: 5,
        hidden: vec![6],
        rank: 2,
        scale: 1.0,
        activation: Activation::Tanh,
    };
    let mut net = match ToyNet::new(&cfg, 77) {
        Ok(v) => v,
        Err(e) => return CheckResult::failure(name, e.to_string()),
    };
    if let Err(e) = net.expand_head(2) {
        return CheckResult::failure(name, e.to_string());
    }
    if let Err(e) = net.apply_head_update(&gaussian_matrix(&mut rng, 2, 6, 0.5)) {
        return CheckResult::failure(name, e.to_string());
    }
    let x = gaussian_matrix(&mut rng, 4, 5, 1.0);
    let labels = vec![0, 1, 0, 1];
    let (logits, _, caches) = net.forward(&x).unwrap();
    let (_, dlogits) = cross_entropy(&logits, &labels).unwrap();
    let (g_w, _) = net
        .backward(&caches, &dlogits, &Matrix::zeros(4, 6))
        .unwrap();
    let base = net.clone();
    let fd = central_diff(net.adapter(0).w0(), 1e-5, |w0| {
        let ad = LoraAdapter::from_parts(
            w0.clone(),
            base.adapter(0).a().clone(),
            base.adapter(0).b().clone(),
            1.0,
        )
        .unwrap();
        let h = x.matmul(&ad.effective_weight().transpose()).unwrap();
        let mut act = h.clone();
        for i in 0..act.rows() {
            for j in 0..act.cols() {
                act.set(i, j, h.get(i, j).tanh());
            }
        }
        let z = normalize_features(&act);
        let logits = z.matmul(&base.head().transpose()).unwrap();
        cross_entropy(&logits, &labels).unwrap().0
    });
    worst = worst.max(relative_gradient_error(&g_w[0], &fd));

    CheckResult::from_bound(name, worst, 1e-4)
}

fn check_metric_recount() -> CheckResult {
    use crate::harness::metrics::{acc_final, bwt, maa, AccuracyMatrix};
    let name = "metric-recount-oracle";
    let mut rng = seeded_rng(0x5E1F_0006);
    let mut worst = 0.0f64;
    for _ in 0..10 {
        let t = 2 + (gaussian_matrix(&mut rng, 1, 1, 1.0).get(0, 0).abs() * 3.0) as usize % 5;
        let rows: Vec<Vec<f64>> = (0..t)
            .map(|i| {
                (0..=i)
                    .map(|_| gaussian_matrix(&mut rng, 1, 1, 1.0).get(0, 0).abs().fract())
                    .collect()
            })
            .collect();
        let a = match AccuracyMatrix::from_rows(rows.clone()) {
            Ok(v) => v,
            Err(e) => return CheckResult::failure(name, e.to_string()),
        };
        let last = &rows[t - 1];
        let want_acc: f64 = last.iter().sum::<f64>() / t as f64;
        let want_maa: f64 = rows
            .iter()
            .map(|r| r.iter().sum::<f64>() / r.len() as f64)
            .sum::<f64>()
            / t as f64;
        let want_bwt: f64 = (0..t - 1).map(|i| last[i] - rows[i][i]).sum::<f64>() / (t - 1) as f64;
        worst = worst.max((acc_final(&a).unwrap() - want_acc).abs());
        worst = worst.max((maa(&a).unwrap() - want_maa).abs());
        worst = worst.max((bwt(&a).unwrap() - want_bwt).abs());
    }
    CheckResult::from_bound(name, worst, 1e-12)
}

/// Runs every check; all must pass on a healthy build.
pub fn run_selftest() -> Vec<CheckResult> {
    vec![
        check_projection(),
        check_ridge(),
        check_offline_svd(),
        check_online_estimator(),
        check_finite_difference_gradients(),
        check_metric_recount(),
    ]
}
