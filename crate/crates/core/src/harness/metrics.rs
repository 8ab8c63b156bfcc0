//! Forgetting metrics over the lower-triangular accuracy matrix.
//!
//! `A[t][i]` is the accuracy on task `i` measured after finishing task `t`
//! (both 0-based here; the row for task `t` has `t + 1` entries).

use crate::error::{Error, Result};

#[derive(Debug, Clone, Default, PartialEq)]
pub struct AccuracyMatrix {
    rows: Vec<Vec<f64>>,
}

impl AccuracyMatrix {
    pub fn new() -> Self {
        AccuracyMatrix { rows: Vec::new() }
    }

    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        let mut m = AccuracyMatrix::new();
        for row in rows {
            m.push_row(row)?;
        }
        Ok(m)
    }

    /// Appends the evaluation row after task `t`; must hold `t + 1` entries
    /// in `[0, 1]`.
    pub fn push_row(&mut self, row: Vec<f64>) -> Result<()> {
        let want = self.rows.len() + 1;
        if row.len() != want {
            return Err(Error::protocol(
                "AccuracyMatrix::push_row",
                format!("row {} must have {want} entries, got {}", self.rows.len(), row.len()),
            ));
        }
        for (i, &v) in row.iter().enumerate() {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::protocol(
                    "AccuracyMatrix::push_row",
                    format!("entry {i} = {v} outside [0, 1]"),
                ));
            }
        }
        self.rows.push(row);
        Ok(())
    }

    pub fn n_tasks(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn entry(&self, t: usize, i: usize) -> Option<f64> {
        self.rows.get(t).and_then(|r| r.get(i)).copied()
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }

    fn require_complete(&self, op: &'static str) -> Result<()> {
        if self.rows.is_empty() {
            return Err(Error::protocol(op, "empty accuracy matrix"));
        }
        for (t, row) in self.rows.iter().enumerate() {
            if row.len() != t + 1 {
                return Err(Error::protocol(
                    op,
                    format!("row {t} has {} entries, expected {}", row.len(), t + 1),
                ));
            }
        }
        Ok(())
    }
}

/// Mean of the final row: average accuracy over all tasks at the end.
pub fn acc_final(a: &AccuracyMatrix) -> Result<f64> {
    a.require_complete("acc_final")?;
    let last = a.rows.last().expect("nonempty checked");
    Ok(last.iter().sum::<f64>() / last.len() as f64)
}

/// Mean over time of the running average accuracy.
pub fn maa(a: &AccuracyMatrix) -> Result<f64> {
    a.require_complete("maa")?;
    let t_total = a.rows.len() as f64;
    let mut acc = 0.0;
    for row in &a.rows {
        acc += row.iter().sum::<f64>() / row.len() as f64;
    }
    Ok(acc / t_total)
}

/// Mean end-of-run accuracy change on earlier tasks; negative means
/// forgetting. Undefined for a single task.
pub fn bwt(a: &AccuracyMatrix) -> Result<f64> {
    a.require_complete("bwt")?;
    let t_total = a.rows.len();
    if t_total < 2 {
        return Err(Error::protocol("bwt", "needs at least two tasks"));
    }
    let last = &a.rows[t_total - 1];
    let mut acc = 0.0;
    for i in 0..t_total - 1 {
        acc += last[i] - a.rows[i][i];
    }
    Ok(acc / (t_total - 1) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;

    fn canonical() -> AccuracyMatrix {
        AccuracyMatrix::from_rows(vec![vec![0.80], vec![0.70, 0.90]]).unwrap()
    }

    #[test]
    fn canonical_two_task_values() {
        let a = canonical();
        assert!((acc_final(&a).unwrap() - 0.80).abs() <= 1e-15);
        assert!((maa(&a).unwrap() - 0.80).abs() <= 1e-15);
        assert!((bwt(&a).unwrap() - (-0.10)).abs() <= 1e-15);
    }

    #[test]
    fn single_task_matrix() {
        let a = AccuracyMatrix::from_rows(vec![vec![0.8]]).unwrap();
        assert_eq!(acc_final(&a).unwrap(), 0.8);
        assert_eq!(maa(&a).unwrap(), 0.8);
        assert!(matches!(bwt(&a), Err(Error::Protocol { .. })));
    }

    #[test]
    fn constant_matrix_yields_the_constant_and_zero_bwt() {
        let c = 0.37;
        let rows: Vec<Vec<f64>> = (0..4).map(|t| vec![c; t + 1]).collect();
        let a = AccuracyMatrix::from_rows(rows).unwrap();
        assert!((acc_final(&a).unwrap() - c).abs() <= 1e-15);
        assert!((maa(&a).unwrap() - c).abs() <= 1e-15);
        assert!(bwt(&a).unwrap().abs() <= 1e-15);
    }

    #[test]
    fn improvement_gives_positive_bwt() {
        let a = AccuracyMatrix::from_rows(vec![vec![0.5], vec![0.9, 0.8]]).unwrap();
        assert!(bwt(&a).unwrap() > 0.0);
    }

    #[test]
    fn push_row_enforces_shape_and_range() {
        let mut a = AccuracyMatrix::new();
        assert!(a.push_row(vec![0.5, 0.5]).is_err());
        a.push_row(vec![0.5]).unwrap();
        assert!(a.push_row(vec![1.5, 0.0]).is_err());
        assert!(matches!(acc_final(&AccuracyMatrix::new()), Err(Error::Protocol { .. })));
    }
}
