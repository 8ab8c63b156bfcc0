//! Run diagnostics: feature-drift angles against frozen prototypes and the
//! per-step update-violation series. Diagnostics read evaluation-side data
//! only and never feed back into training.

use crate::dml::PrototypeBank;
use crate::error::{Error, Result};
use crate::linalg::{dot, Matrix};

/// A sample's maximum similarity to any old-class prototype crossing this
/// threshold marks it as encroaching on occupied feature space.
pub const DANGER_THRESHOLD: f64 = 0.5;

pub const HISTOGRAM_BINS: usize = 50;

/// Per-sample angles of a current-task feature against the prototype bank.
#[derive(Debug, Clone, Copy)]
pub struct AngularRecord {
    pub sample: usize,
    /// Max cosine similarity to any frozen (past-class) prototype.
    pub cos_old_max: f64,
    /// Cosine similarity to the sample's own class prototype.
    pub cos_own: f64,
    pub in_danger: bool,
}

/// One task's angular diagnostics plus aggregates.
#[derive(Debug, Clone)]
pub struct AngularSummary {
    pub task: usize,
    pub records: Vec<AngularRecord>,
    pub danger_fraction: f64,
    /// Counts of cos_old_max over [-1, 1] in 50 equal bins.
    pub histogram: [u32; HISTOGRAM_BINS],
}

/// Hypothetical violations of the three update styles at one logged step,
/// measured against raw reference activations from finished tasks.
#[derive(Debug, Clone, Copy)]
pub struct ViolationRow {
    pub step: u64,
    pub layer: usize,
    pub naive: f64,
    pub safe: f64,
    pub rectified: f64,
    /// Projection exactness at this step: residual alignment of the safe
    /// gradient with the protection basis, normalized by max(1, ||G||).
    /// Kept for verification; not part of the emitted series.
    pub safe_exactness: f64,
}

/// Bins a similarity in [-1, 1] (clamped) into one of the 50 bins.
fn bin_of(value: f64) -> usize {
    let clamped = value.clamp(-1.0, 1.0);
    let scaled = (clamped + 1.0) / 2.0 * HISTOGRAM_BINS as f64;
    (scaled as usize).min(HISTOGRAM_BINS - 1)
}

/// Angles of each feature row against the bank: `cos_old_max` over frozen
/// prototypes, `cos_own` against the row's own class prototype. Rows are
/// unit-normalized features; prototypes are unit by construction, so plain
/// dot products are cosines.
pub fn angular_diagnostics(
    features: &Matrix,
    labels: &[usize],
    bank: &PrototypeBank,
    task: usize,
) -> Result<AngularSummary> {
    if features.rows() != labels.len() {
        return Err(Error::shape(
            "angular_diagnostics",
            format!("{} feature rows vs {} labels", features.rows(), labels.len()),
        ));
    }
    if !bank.has_past() {
        return Err(Error::protocol(
            "angular_diagnostics",
            "no frozen prototypes to compare against",
        ));
    }
    let mut records = Vec::with_capacity(features.rows());
    let mut histogram = [0u32; HISTOGRAM_BINS];
    let mut danger = 0usize;
    for i in 0..features.rows() {
        let z = features.row(i);
        let mut cos_old_max = f64::NEG_INFINITY;
        for p in bank.past().values() {
            cos_old_max = cos_old_max.max(dot(z, p));
        }
        let own = bank.prototype(labels[i]).ok_or_else(|| {
            Error::protocol(
                "angular_diagnostics",
                format!("no prototype for class {}", labels[i]),
            )
        })?;
        let cos_own = dot(z, own);
        let in_danger = cos_old_max > DANGER_THRESHOLD;
        if in_danger {
            danger += 1;
        }
        histogram[bin_of(cos_old_max)] += 1;
        records.push(AngularRecord {
            sample: i,
            cos_old_max,
            cos_own,
            in_danger,
        });
    }
    let danger_fraction = if records.is_empty() {
        0.0
    } else {
        danger as f64 / records.len() as f64
    };
    Ok(AngularSummary {
        task,
        records,
        danger_fraction,
        histogram,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dml::PrototypeBank;
    use crate::linalg::Matrix;

    fn unit(dim: usize, axis: usize) -> Vec<f64> {
        let mut v = vec![0.0; dim];
        v[axis] = 1.0;
        v
    }

    fn bank_with(past: &[(usize, Vec<f64>)], live: &[(usize, Vec<f64>)]) -> PrototypeBank {
        let mut bank = PrototypeBank::new(0.9).unwrap();
        for (c, p) in past {
            bank.update_live(*c, &Matrix::from_rows(&[p.clone()]).unwrap()).unwrap();
        }
        bank.freeze_task();
        for (c, p) in live {
            bank.update_live(*c, &Matrix::from_rows(&[p.clone()]).unwrap()).unwrap();
        }
        bank
    }

    #[test]
    fn orthogonal_old_prototypes_are_harmless() {
        let bank = bank_with(&[(0, unit(4, 0))], &[(1, unit(4, 1))]);
        let features = Matrix::from_rows(&[unit(4, 1), unit(4, 1)]).unwrap();
        let s = angular_diagnostics(&features, &[1, 1], &bank, 1).unwrap();
        assert_eq!(s.danger_fraction, 0.0);
        for r in &s.records {
            assert_eq!(r.cos_own, 1.0);
            assert_eq!(r.cos_old_max, 0.0);
            assert!(!r.in_danger);
        }
        // cos_old_max = 0 lands exactly on the boundary bin 25.
        assert_eq!(s.histogram[25], 2);
    }

    #[test]
    fn features_on_an_old_prototype_are_all_danger() {
        let bank = bank_with(&[(0, unit(3, 0))], &[(1, unit(3, 1))]);
        let features = Matrix::from_rows(&[unit(3, 0)]).unwrap();
        let s = angular_diagnostics(&features, &[1], &bank, 1).unwrap();
        assert_eq!(s.danger_fraction, 1.0);
        assert_eq!(s.records[0].cos_old_max, 1.0);
        assert!(s.records[0].in_danger);
        assert_eq!(s.histogram[HISTOGRAM_BINS - 1], 1);
    }

    #[test]
    fn matches_a_brute_force_double_loop() {
        use crate::dml::normalize_features;
        use crate::testutil::{seeded_rng, standard_matrix};
        let mut rng = seeded_rng(41);
        let dim = 6;
        let past: Vec<(usize, Vec<f64>)> = (0..3)
            .map(|c| {
                let row = normalize_features(&standard_matrix(&mut rng, 1, dim));
                (c, row.row(0).to_vec())
            })
            .collect();
        let live: Vec<(usize, Vec<f64>)> = (3..5)
            .map(|c| {
                let row = normalize_features(&standard_matrix(&mut rng, 1, dim));
                (c, row.row(0).to_vec())
            })
            .collect();
        let bank = bank_with(&past, &live);
        let features = normalize_features(&standard_matrix(&mut rng, 20, dim));
        let labels: Vec<usize> = (0..20).map(|i| 3 + (i % 2)).collect();
        let s = angular_diagnostics(&features, &labels, &bank, 1).unwrap();
        for (i, rec) in s.records.iter().enumerate() {
            let z = features.row(i);
            let mut best = f64::NEG_INFINITY;
            for (_, p) in &past {
                best = best.max(dot(z, p));
            }
            assert!((rec.cos_old_max - best).abs() <= 1e-15);
            let own = bank.prototype(labels[i]).unwrap();
            assert!((rec.cos_own - dot(z, own)).abs() <= 1e-15);
            assert_eq!(rec.in_danger, best > DANGER_THRESHOLD);
        }
        let recount = s.records.iter().filter(|r| r.in_danger).count();
        assert!((s.danger_fraction - recount as f64 / 20.0).abs() <= 1e-15);
        let total: u32 = s.histogram.iter().sum();
        assert_eq!(total, 20);
    }

    #[test]
    fn empty_past_is_a_protocol_error() {
        let mut bank = PrototypeBank::new(0.9).unwrap();
        bank.update_live(0, &Matrix::from_rows(&[unit(3, 0)]).unwrap()).unwrap();
        let features = Matrix::from_rows(&[unit(3, 0)]).unwrap();
        assert!(matches!(
            angular_diagnostics(&features, &[0], &bank, 0),
            Err(Error::Protocol { .. })
        ));
    }

    #[test]
    fn histogram_bins_clamp_out_of_range_values() {
        assert_eq!(bin_of(-1.0), 0);
        assert_eq!(bin_of(1.0), HISTOGRAM_BINS - 1);
        assert_eq!(bin_of(-1.2), 0);
        assert_eq!(bin_of(1.2), HISTOGRAM_BINS - 1);
        assert_eq!(bin_of(0.0), 25);
    }
}
