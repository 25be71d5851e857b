//! Learnable sigmoid attention gate over tabular inputs.
//!
//! Each tabular column `j` owns one logit `theta_j`; the gate weight is
//! `w_j = sigmoid(theta_j)` and the attended input is `x ⊙ w`. Logits start
//! at zero, so every gate opens at exactly 0.5 and training moves weights
//! toward 1 (keep) or 0 (suppress). Reported importance scores are the
//! post-sigmoid weights; gates are never softmax-normalized across columns,
//! so one column's score does not trade off against another's.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Matrix, Tape, ValueId};

/// Per-column gate logits for one tabular modality (`1 x d`).
#[derive(Clone, Debug, PartialEq)]
pub struct GateParams {
    pub theta: Matrix,
}

impl GateParams {
    /// Fresh gate with all logits at zero (every weight exactly 0.5).
    pub fn zeros(width: usize) -> Self {
        GateParams { theta: Matrix::zeros(1, width) }
    }

    pub fn from_theta(theta: Matrix) -> Result<Self> {
        if theta.rows() != 1 {
            return Err(Error::Shape {
                op: "gate",
                detail: format!("theta must be a row vector, got {}x{}", theta.rows(), theta.cols()),
            });
        }
        Ok(GateParams { theta })
    }

    pub fn width(&self) -> usize {
        self.theta.cols()
    }
}

/// Post-sigmoid gate weights, each in (0, 1).
pub fn gate_weights(gate: &GateParams) -> Matrix {
    gate.theta.sigmoid()
}

/// Applies the gate to a row of tabular inputs without recording gradients.
pub fn apply_gate(x: &Matrix, gate: &GateParams) -> Result<Matrix> {
    if x.cols() != gate.width() {
        return Err(Error::ShapeMismatch {
            op: "apply_gate",
            left_rows: x.rows(),
            left_cols: x.cols(),
            right_rows: 1,
            right_cols: gate.width(),
        });
    }
    let w = gate_weights(gate);
    Ok(Matrix::from_fn(x.rows(), x.cols(), |i, j| x.get(i, j) * w.get(0, j)))
}

/// Tape-recorded gate application: `x ⊙ sigmoid(theta)`, so `theta` receives
/// gradients. `x` is `N x d`, `theta` a `1 x d` node.
pub fn apply_gate_on_tape(tape: &mut Tape, x: ValueId, theta: ValueId) -> Result<ValueId> {
    let w = tape.sigmoid(theta)?;
    tape.mul_row(x, w)
}

/// One ranked row of an attention report.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AttentionEntry {
    pub column: String,
    pub score: f64,
    /// 1-based rank; 1 is the most important column.
    pub rank: usize,
}

/// Feature-importance report for one modality, ordered by descending score.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AttentionReport {
    pub entries: Vec<AttentionEntry>,
}

impl AttentionReport {
    /// CSV body with the fixed header `column,score`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("column,score\n");
        for e in &self.entries {
            out.push_str(&format!("{},{}\n", e.column, e.score));
        }
        out
    }

    /// Columns in rank order.
    pub fn columns(&self) -> Vec<&str> {
        self.entries.iter().map(|e| e.column.as_str()).collect()
    }
}

/// Ranks columns by gate weight, descending; ties break by ascending column
/// name so the ordering is total and deterministic.
///
/// One-hot expansions are named `base=token`. With `aggregate_one_hot` set,
/// every `base=...` group collapses to a single entry named `base` whose
/// score is the maximum over the group.
pub fn rank_features(
    gate: &GateParams,
    column_names: &[String],
    aggregate_one_hot: bool,
) -> Result<AttentionReport> {
    if column_names.len() != gate.width() {
        return Err(Error::Shape {
            op: "rank_features",
            detail: format!(
                "{} column names for a gate of width {}",
                column_names.len(),
                gate.width()
            ),
        });
    }
    let w = gate_weights(gate);
    let mut scored: Vec<(String, f64)> = Vec::with_capacity(column_names.len());
    for (j, name) in column_names.iter().enumerate() {
        let label = if aggregate_one_hot {
            name.split('=').next().unwrap_or(name).to_string()
        } else {
            name.clone()
        };
        let score = w.get(0, j);
        match scored.iter_mut().find(|(n, _)| *n == label) {
            Some((_, s)) if aggregate_one_hot => *s = s.max(score),
            Some(_) => {
                return Err(Error::Data(format!("duplicate column name {:?} in attention report", label)))
            }
            None => scored.push((label, score)),
        }
    }
    scored.sort_by(|a, b| {
        b.1.partial_cmp(&a.1)
            .expect("gate weights are finite")
            .then_with(|| a.0.cmp(&b.0))
    });
    let entries = scored
        .into_iter()
        .enumerate()
        .map(|(i, (column, score))| AttentionEntry { column, score, rank: i + 1 })
        .collect();
    Ok(AttentionReport { entries })
}
