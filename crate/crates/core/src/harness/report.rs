//! CSV emission with a fixed numeric format: every value is printed as a
//! plain decimal with 10 significant digits, so identical runs produce
//! byte-identical files.

use std::fmt::Write as _;

use crate::error::{Error, Result};

use super::diagnostics::{AngularSummary, ViolationRow};
use super::metrics::AccuracyMatrix;

/// One row of the per-run metrics table.
#[derive(Debug, Clone)]
pub struct MetricsRow {
    pub variant: String,
    pub seed: u64,
    pub acc: f64,
    pub maa: f64,
    pub bwt: f64,
}

/// Plain decimal with 10 significant digits, no exponent notation.
/// Zero prints as "0.000000000".
pub fn fmt_sig10(x: f64) -> String {
    if !x.is_finite() {
        // Diagnostics should never produce these; make them visible if so.
        return format!("{x}");
    }
    if x == 0.0 {
        return "0.000000000".to_string();
    }
    let exponent = x.abs().log10().floor() as i32;
    let decimals = (9 - exponent).max(0) as usize;
    let s = format!("{x:.decimals$}");
    // Rounding can carry into a new leading digit (9.9999.. -> 10.0..);
    // re-derive the width from the rounded value so digits stay at 10.
    let rounded: f64 = s.parse().unwrap_or(x);
    if rounded != 0.0 {
        let re_exp = rounded.abs().log10().floor() as i32;
        if re_exp != exponent {
            let decimals = (9 - re_exp).max(0) as usize;
            return format!("{rounded:.decimals$}");
        }
    }
    s
}

/// Accuracy matrix in wide form: row per finished task, one column per task,
/// blank cells above the diagonal.
pub fn accuracy_csv(a: &AccuracyMatrix) -> Result<String> {
    if a.is_empty() {
        return Err(Error::protocol("accuracy_csv", "empty accuracy matrix"));
    }
    let t_total = a.n_tasks();
    let mut out = String::from("task");
    for i in 1..=t_total {
        let _ = write!(out, ",acc_task_{i}");
    }
    out.push('\n');
    for (t, row) in a.rows().iter().enumerate() {
        let _ = write!(out, "{}", t + 1);
        for i in 0..t_total {
            if i < row.len() {
                let _ = write!(out, ",{}", fmt_sig10(row[i]));
            } else {
                out.push(',');
            }
        }
        out.push('\n');
    }
    Ok(out)
}

pub fn metrics_csv(rows: &[MetricsRow]) -> String {
    let mut out = String::from("variant,seed,acc,maa,bwt\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{}",
            r.variant,
            r.seed,
            fmt_sig10(r.acc),
            fmt_sig10(r.maa),
            fmt_sig10(r.bwt)
        );
    }
    out
}

pub fn violation_csv(rows: &[ViolationRow]) -> String {
    let mut out = String::from("step,layer,naive,safe,rectified\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{}",
            r.step,
            r.layer,
            fmt_sig10(r.naive),
            fmt_sig10(r.safe),
            fmt_sig10(r.rectified)
        );
    }
    out
}

/// Per-sample angular rows of one or more task summaries, in order.
pub fn angular_csv(summaries: &[AngularSummary]) -> String {
    let mut out = String::from("sample,cos_old_max,cos_own,in_danger\n");
    for s in summaries {
        for r in &s.records {
            let _ = writeln!(
                out,
                "{},{},{},{}",
                r.sample,
                fmt_sig10(r.cos_old_max),
                fmt_sig10(r.cos_own),
                u8::from(r.in_danger)
            );
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::diagnostics::AngularRecord;

    #[test]
    fn ten_significant_digits_across_magnitudes() {
        assert_eq!(fmt_sig10(0.0), "0.000000000");
        assert_eq!(fmt_sig10(0.8), "0.8000000000");
        assert_eq!(fmt_sig10(-0.10), "-0.1000000000");
        assert_eq!(fmt_sig10(123.456), "123.4560000");
        assert_eq!(fmt_sig10(1.0), "1.000000000");
        assert_eq!(fmt_sig10(1e-12), "0.000000000001000000000");
        assert_eq!(fmt_sig10(12345678901.0), "12345678901");
    }

    #[test]
    fn rounding_carry_keeps_digit_count() {
        // 0.99999999999 rounds up into a new leading digit.
        assert_eq!(fmt_sig10(0.99999999999), "1.000000000");
        assert_eq!(fmt_sig10(9.99999999999), "10.00000000");
    }

    #[test]
    fn accuracy_csv_pads_the_upper_triangle() {
        let a = AccuracyMatrix::from_rows(vec![vec![0.8], vec![0.7, 0.9]]).unwrap();
        let csv = accuracy_csv(&a).unwrap();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "task,acc_task_1,acc_task_2");
        assert_eq!(lines[1], "1,0.8000000000,");
        assert_eq!(lines[2], "2,0.7000000000,0.9000000000");
    }

    #[test]
    fn metrics_and_violation_headers() {
        let m = metrics_csv(&[MetricsRow {
            variant: "full".into(),
            seed: 3,
            acc: 0.5,
            maa: 0.25,
            bwt: -0.125,
        }]);
        assert!(m.starts_with("variant,seed,acc,maa,bwt\n"));
        assert!(m.contains("full,3,0.5000000000,0.2500000000,-0.1250000000"));
        let v = violation_csv(&[ViolationRow {
            step: 7,
            layer: 1,
            naive: 2.0,
            safe: 0.0,
            rectified: 1.0,
            safe_exactness: 0.0,
        }]);
        assert!(v.starts_with("step,layer,naive,safe,rectified\n"));
        assert!(v.contains("7,1,2.000000000,0.000000000,1.000000000"));
    }

    #[test]
    fn angular_csv_flattens_summaries() {
        let s = AngularSummary {
            task: 1,
            records: vec![AngularRecord {
                sample: 0,
                cos_old_max: 0.75,
                cos_own: 0.5,
                in_danger: true,
            }],
            danger_fraction: 1.0,
            histogram: [0; 50],
        };
        let csv = angular_csv(&[s]);
        assert!(csv.starts_with("sample,cos_old_max,cos_own,in_danger\n"));
        assert!(csv.contains("0,0.7500000000,0.5000000000,1"));
    }
}
