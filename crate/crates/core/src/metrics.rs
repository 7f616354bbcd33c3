//! Accuracy matrix and the ACC / BWT summaries.
//!
//! `R[i][j]` is the test accuracy on domain `j` after finishing task `i`
//! (domain 0 is the source). Only `j <= i` is ever filled.
//!
//! ACC is the mean of the final row over its `N + 1` entries. The literal
//! formula divides that sum by `N` instead, which can exceed 1; it is
//! available as [`AccNormalization::PaperLiteral`] for comparison with
//! published numbers.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{GrclError, Result};
use crate::model::{Batch, ParamVector};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyMatrix {
    num_targets: usize,
    rows: Vec<Vec<f64>>,
}

impl AccuracyMatrix {
    pub fn new(num_targets: usize) -> Self {
        AccuracyMatrix {
            num_targets,
            rows: Vec::with_capacity(num_targets + 1),
        }
    }

    /// Builds a matrix from complete lower-triangular rows.
    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        if rows.is_empty() {
            return Err(GrclError::InvalidInput("accuracy matrix needs a row".into()));
        }
        let mut m = AccuracyMatrix::new(rows.len() - 1);
        for r in rows {
            m.push_row(r)?;
        }
        Ok(m)
    }

    /// Appends row `i` (accuracies on domains `0..=i`).
    pub fn push_row(&mut self, row: Vec<f64>) -> Result<()> {
        let i = self.rows.len();
        if i > self.num_targets {
            return Err(GrclError::InvalidInput("accuracy matrix is already full".into()));
        }
        if row.len() != i + 1 {
            return Err(GrclError::DimensionMismatch {
                what: "accuracy matrix row",
                expected: i + 1,
                found: row.len(),
            });
        }
        if let Some(v) = row.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(GrclError::InvalidInput(format!("accuracy {v} outside [0, 1]")));
        }
        self.rows.push(row);
        Ok(())
    }

    /// N, the number of target domains.
    pub fn num_targets(&self) -> usize {
        self.num_targets
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }

    pub fn get(&self, i: usize, j: usize) -> Option<f64> {
        self.rows.get(i).and_then(|r| r.get(j)).copied()
    }

    pub fn is_complete(&self) -> bool {
        self.rows.len() == self.num_targets + 1
    }

    fn final_row(&self) -> Result<&[f64]> {
        if !self.is_complete() {
            return Err(GrclError::InvalidInput(format!(
                "final row missing: {} of {} rows filled",
                self.rows.len(),
                self.num_targets + 1
            )));
        }
        Ok(&self.rows[self.num_targets])
    }

    /// Mean of the final row over the target domains only.
    pub fn final_target_mean(&self) -> Result<f64> {
        let row = self.final_row()?;
        if self.num_targets == 0 {
            return Err(GrclError::UndefinedMetric("no target domains".into()));
        }
        Ok(row[1..].iter().sum::<f64>() / self.num_targets as f64)
    }

    /// `row,d0,...,dN`; cells above the diagonal are empty.
    pub fn to_csv(&self) -> String {
        let n = self.num_targets;
        let mut out = String::from("row");
        for j in 0..=n {
            out.push_str(&format!(",d{j}"));
        }
        out.push('\n');
        for (i, row) in self.rows.iter().enumerate() {
            out.push_str(&i.to_string());
            for j in 0..=n {
                out.push(',');
                if let Some(v) = row.get(j) {
                    out.push_str(&v.to_string());
                }
            }
            out.push('\n');
        }
        out
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_csv()).map_err(|e| GrclError::io(path, e))
    }

    pub fn load_csv(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| GrclError::io(path, e))?;
        let err = |line: usize, message: String| GrclError::Parse {
            path: path.to_path_buf(),
            line,
            message,
        };
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| err(1, "empty file".into()))?;
        let cols: Vec<&str> = header.split(',').collect();
        if cols.len() < 2 || cols[0] != "row" {
            return Err(err(1, "expected header row,d0,...".into()));
        }
        let n = cols.len() - 2;
        let mut m = AccuracyMatrix::new(n);
        for (i, line) in lines.enumerate() {
            let lineno = i + 2;
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != n + 2 {
                return Err(err(lineno, format!("expected {} fields", n + 2)));
            }
            let row = f[1..]
                .iter()
                .take_while(|s| !s.is_empty())
                .map(|s| s.parse::<f64>().map_err(|e| err(lineno, format!("{s:?}: {e}"))))
                .collect::<Result<Vec<_>>>()?;
            m.push_row(row).map_err(|e| err(lineno, e.to_string()))?;
        }
        Ok(m)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum AccNormalization {
    /// Divide by `N + 1`.
    #[default]
    TrueMean,
    /// Divide by `N`.
    PaperLiteral,
}

pub fn compute_acc(r: &AccuracyMatrix, norm: AccNormalization) -> Result<f64> {
    let row = r.final_row()?;
    let sum: f64 = row.iter().sum();
    match norm {
        AccNormalization::TrueMean => Ok(sum / row.len() as f64),
        AccNormalization::PaperLiteral => {
            if r.num_targets == 0 {
                return Err(GrclError::UndefinedMetric(
                    "literal ACC divides by N = 0".into(),
                ));
            }
            Ok(sum / r.num_targets as f64)
        }
    }
}

/// `1/(N-1) * sum_{i=1}^{N-1} (R[N][i] - R[i][i])`
pub fn compute_bwt(r: &AccuracyMatrix) -> Result<f64> {
    let n = r.num_targets;
    if n < 2 {
        return Err(GrclError::UndefinedMetric(format!(
            "BWT needs at least 2 target domains, have {n}"
        )));
    }
    let last = r.final_row()?;
    let sum: f64 = (1..n).map(|i| last[i] - r.rows[i][i]).sum();
    Ok(sum / (n - 1) as f64)
}

/// Fraction of rows whose argmax logit (lowest index on ties) equals the
/// label.
pub fn evaluate_accuracy(params: &ParamVector, test: &Batch) -> Result<f64> {
    let labels = test
        .labels
        .as_deref()
        .ok_or_else(|| GrclError::InvalidInput("evaluation needs labels".into()))?;
    if labels.is_empty() {
        return Err(GrclError::InvalidInput("empty test set".into()));
    }
    let pred = params.predict(test.inputs.view())?;
    let correct = pred.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(correct as f64 / labels.len() as f64)
}

/// The per-method record written to `metrics.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodMetrics {
    pub acc: f64,
    pub acc_paper_literal: Option<f64>,
    pub bwt: Option<f64>,
    pub target_mean: Option<f64>,
    pub rows: Vec<Vec<f64>>,
}

impl MethodMetrics {
    pub fn from_matrix(r: &AccuracyMatrix) -> Result<Self> {
        Ok(MethodMetrics {
            acc: compute_acc(r, AccNormalization::TrueMean)?,
            acc_paper_literal: compute_acc(r, AccNormalization::PaperLiteral).ok(),
            bwt: compute_bwt(r).ok(),
            target_mean: r.final_target_mean().ok(),
            rows: r.rows.clone(),
        })
    }
}
