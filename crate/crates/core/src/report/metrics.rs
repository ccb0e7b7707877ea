//! Accuracy grid and the ACC / FGT summaries.
//!
//! `a[i][j]` is the accuracy on task `j`'s test split after training step
//! `i`, defined for `j <= i` (zero-based here).
//!
//! * ACC is the mean of the final row.
//! * FGT is the mean, over every later step `i >= 1` and earlier task
//!   `j < i`, of `max(0, a[j][j] - a[i][j])`: how far each task fell from
//!   its just-trained accuracy. It is 0 for a single task.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Identifies the forgetting formula in result files.
pub const FGT_DEFINITION: &str = "mean over i>j of max(0, a[j][j] - a[i][j])";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AccuracyMatrix {
    rows: Vec<Vec<f64>>,
}

impl AccuracyMatrix {
    pub fn new() -> Self {
        AccuracyMatrix { rows: Vec::new() }
    }

    /// Builds a matrix from its lower-triangular rows.
    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        let mut m = Self::new();
        for row in rows {
            m.push_row(row)?;
        }
        Ok(m)
    }

    /// Appends the row of the next step; it must hold one entry per task
    /// trained so far.
    pub fn push_row(&mut self, row: Vec<f64>) -> Result<()> {
        if row.len() != self.rows.len() + 1 {
            return Err(Error::Data(format!(
                "row {} of an accuracy matrix needs {} entries, got {}",
                self.rows.len(),
                self.rows.len() + 1,
                row.len()
            )));
        }
        if let Some(v) = row.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Data(format!("accuracy {v} outside [0, 1]")));
        }
        self.rows.push(row);
        Ok(())
    }

    /// Number of steps recorded.
    pub fn steps(&self) -> usize {
        self.rows.len()
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }

    pub fn get(&self, step: usize, task: usize) -> Option<f64> {
        self.rows.get(step).and_then(|r| r.get(task)).copied()
    }

    pub fn last_row(&self) -> Option<&[f64]> {
        self.rows.last().map(Vec::as_slice)
    }

    /// The same matrix truncated to its first `steps` rows.
    pub fn prefix(&self, steps: usize) -> AccuracyMatrix {
        AccuracyMatrix {
            rows: self.rows[..steps.min(self.rows.len())].to_vec(),
        }
    }
}

impl Default for AccuracyMatrix {
    fn default() -> Self {
        Self::new()
    }
}

/// Mean final accuracy; 0 for an empty matrix.
pub fn acc(a: &AccuracyMatrix) -> f64 {
    match a.last_row() {
        Some(row) => row.iter().sum::<f64>() / row.len() as f64,
        None => 0.0,
    }
}

/// Mean clamped decay from each task's just-trained accuracy.
pub fn fgt(a: &AccuracyMatrix) -> f64 {
    let mut total = 0.0;
    let mut pairs = 0usize;
    for i in 1..a.steps() {
        for j in 0..i {
            total += (a.rows[j][j] - a.rows[i][j]).max(0.0);
            pairs += 1;
        }
    }
    if pairs == 0 {
        0.0
    } else {
        total / pairs as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rows_must_be_triangular_and_bounded() {
        let mut m = AccuracyMatrix::new();
        assert!(m.push_row(vec![0.5, 0.5]).is_err());
        m.push_row(vec![0.5]).unwrap();
        assert!(m.push_row(vec![0.5, 1.5]).is_err());
        assert!(m.push_row(vec![0.5, f64::NAN]).is_err());
        m.push_row(vec![0.2, 0.7]).unwrap();
        assert_eq!(m.get(1, 0), Some(0.2));
        assert_eq!(m.get(0, 1), None);
    }
}
