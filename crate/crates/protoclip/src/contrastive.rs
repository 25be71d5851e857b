//! Temperature-scaled contrastive (CLIP/InfoNCE) loss over paired batches.
//!
//! Given matched batches of unit embeddings `Q` and `K` (row `i` of `Q` is
//! the positive of row `i` of `K`), the one-directional loss is
//!
//! ```text
//! L = (1/N) Σ_i −log( exp(q_i·k_i / τ) / Σ_j exp(q_i·k_j / τ) )
//! ```
//!
//! The symmetric form (the default) is the mean of the Q→K and K→Q
//! directions. Row terms are computed as `logsumexp(s_i/τ) − s_ii/τ` with
//! max-subtraction inside the log-sum-exp, so large `1/τ` never overflows.
//! The loss is non-negative, exactly zero for a single pair, and stays
//! finite when a batch contains duplicate keys — duplicates merely raise the
//! attainable floor.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Matrix, Tape, ValueId};

/// Which direction(s) of the InfoNCE objective to average.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossDirection {
    /// Queries against keys only (the published one-sided form).
    OneSided,
    /// Mean of both directions (default).
    Symmetric,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossConfig {
    pub temperature: f64,
    pub direction: LossDirection,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig { temperature: 0.1, direction: LossDirection::Symmetric }
    }
}

/// Tolerance for the unit-row requirement of [`similarity_matrix`].
pub const UNIT_ROW_TOL: f64 = 1e-6;

fn check_unit_rows(m: &Matrix, side: &'static str) -> Result<()> {
    for i in 0..m.rows() {
        let norm = m.row_norm(i);
        if (norm - 1.0).abs() > UNIT_ROW_TOL {
            return Err(Error::NotNormalized { side, row: i, norm });
        }
    }
    Ok(())
}

/// Pairwise cosine similarities `Q K^T` for unit-row batches. Because the
/// rows are unit-normalized, entry `(i, j)` is the cosine of `q_i` and
/// `k_j`. Rejects inputs whose rows deviate from unit norm by more than
/// [`UNIT_ROW_TOL`].
pub fn similarity_matrix(q: &Matrix, k: &Matrix) -> Result<Matrix> {
    if q.shape() != k.shape() {
        return Err(Error::ShapeMismatch {
            op: "similarity_matrix",
            left_rows: q.rows(),
            left_cols: q.cols(),
            right_rows: k.rows(),
            right_cols: k.cols(),
        });
    }
    check_unit_rows(q, "q")?;
    check_unit_rows(k, "k")?;
    q.matmul(&k.transpose())
}

fn validate_batch(q: &Matrix, k: &Matrix, cfg: &LossConfig) -> Result<()> {
    // `partial_cmp` returns `None` for NaN, so a NaN temperature fails too.
    if cfg.temperature.partial_cmp(&0.0) != Some(Ordering::Greater) {
        return Err(Error::Temperature { tau: cfg.temperature });
    }
    if q.shape() != k.shape() {
        return Err(Error::ShapeMismatch {
            op: "clip_loss",
            left_rows: q.rows(),
            left_cols: q.cols(),
            right_rows: k.rows(),
            right_cols: k.cols(),
        });
    }
    if q.rows() == 0 {
        return Err(Error::EmptyBatch { op: "clip_loss" });
    }
    Ok(())
}

/// One direction over pre-scaled logits: `mean_i(logsumexp_j(s_ij) − s_ii)`.
fn one_sided(tape: &mut Tape, scaled_logits: ValueId) -> Result<ValueId> {
    let lse = tape.logsumexp_rows(scaled_logits)?;
    let pos = tape.diag(scaled_logits)?;
    let per_row = tape.sub(lse, pos)?;
    tape.mean_all(per_row)
}

/// Records the contrastive loss on the tape and returns the 1 x 1 loss node.
/// `q` and `k` are matched `N x d` batches already on the tape; gradients
/// flow to both.
pub fn clip_loss_on_tape(
    tape: &mut Tape,
    q: ValueId,
    k: ValueId,
    cfg: &LossConfig,
) -> Result<ValueId> {
    validate_batch(tape.value(q), tape.value(k), cfg)?;
    let kt = tape.transpose(k);
    let logits = tape.matmul(q, kt)?;
    let scaled = tape.scale(logits, 1.0 / cfg.temperature);
    let loss_qk = one_sided(tape, scaled)?;
    match cfg.direction {
        LossDirection::OneSided => Ok(loss_qk),
        LossDirection::Symmetric => {
            let scaled_t = tape.transpose(scaled);
            let loss_kq = one_sided(tape, scaled_t)?;
            let sum = tape.add(loss_qk, loss_kq)?;
            Ok(tape.scale(sum, 0.5))
        }
    }
}

/// Loss value without keeping a tape around (validation, tests, reporting).
/// Shares the exact computation path with [`clip_loss_on_tape`].
pub fn clip_loss_value(q: &Matrix, k: &Matrix, cfg: &LossConfig) -> Result<f64> {
    let mut tape = Tape::new();
    let qi = tape.input(q.clone())?;
    let ki = tape.input(k.clone())?;
    let loss = clip_loss_on_tape(&mut tape, qi, ki, cfg)?;
    Ok(tape.scalar(loss))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::grad_check;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn assert_close(a: f64, b: f64, tol: f64, what: &str) {
        assert!((a - b).abs() <= tol, "{}: {} vs {} (tol {})", what, a, b, tol);
    }

    fn random_unit_rows(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Matrix {
        Matrix::from_fn(n, d, |_, _| rng.gen_range(-1.0..1.0))
            .l2_normalize_rows()
            .unwrap()
    }

    /// Independent oracle: the loss computed directly from its definition,
    /// with no max-subtraction stabilization.
    fn naive_loss(q: &Matrix, k: &Matrix, tau: f64, symmetric: bool) -> f64 {
        let n = q.rows();
        let dir = |a: &Matrix, b: &Matrix| -> f64 {
            let mut total = 0.0;
            for i in 0..n {
                let mut denom = 0.0;
                for j in 0..n {
                    denom += (a.row_dot(i, b, j) / tau).exp();
                }
                total += -((a.row_dot(i, b, i) / tau).exp() / denom).ln();
            }
            total / n as f64
        };
        if symmetric {
            0.5 * (dir(q, k) + dir(k, q))
        } else {
            dir(q, k)
        }
    }

    #[test]
    fn orthonormal_pair_matches_closed_form() {
        let q = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
        let k = q.clone();
        let cfg1 = LossConfig { temperature: 1.0, direction: LossDirection::Symmetric };
        let loss1 = clip_loss_value(&q, &k, &cfg1).unwrap();
        assert_close(loss1, (1.0 + (-1f64).exp()).ln(), 1e-12, "tau=1 closed form");
        assert_close(loss1, 0.3132616875182228, 1e-12, "tau=1 frozen value");

        let cfg01 = LossConfig { temperature: 0.1, direction: LossDirection::Symmetric };
        let loss01 = clip_loss_value(&q, &k, &cfg01).unwrap();
        assert_close(loss01, (1.0 + (-10f64).exp()).ln(), 1e-12, "tau=0.1 closed form");
        assert!(loss01 < 4.6e-5 && loss01 > 4.5e-5, "tau=0.1 magnitude: {}", loss01);
    }

    #[test]
    fn single_pair_loss_is_exactly_zero() {
        let q = Matrix::row_vector(vec![0.6, 0.8]);
        let k = Matrix::row_vector(vec![0.0, 1.0]);
        let loss = clip_loss_value(&q, &k, &LossConfig::default()).unwrap();
        assert_eq!(loss, 0.0, "N=1 must be exactly zero");
    }

    #[test]
    fn symmetric_is_mean_of_both_directions() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let q = random_unit_rows(&mut rng, 5, 7);
        let k = random_unit_rows(&mut rng, 5, 7);
        let one = LossConfig { temperature: 0.2, direction: LossDirection::OneSided };
        let sym = LossConfig { temperature: 0.2, direction: LossDirection::Symmetric };
        let qk = clip_loss_value(&q, &k, &one).unwrap();
        let kq = clip_loss_value(&k, &q, &one).unwrap();
        let s = clip_loss_value(&q, &k, &sym).unwrap();
        assert_close(s, 0.5 * (qk + kq), 1e-12, "symmetric = mean of directions");
    }

    #[test]
    fn stabilized_loss_matches_naive_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for &tau in &[0.01, 0.1, 1.0] {
            for &n in &[2usize, 4, 8] {
                let q = random_unit_rows(&mut rng, n, 6);
                let k = random_unit_rows(&mut rng, n, 6);
                for &sym in &[false, true] {
                    let cfg = LossConfig {
                        temperature: tau,
                        direction: if sym { LossDirection::Symmetric } else { LossDirection::OneSided },
                    };
                    let got = clip_loss_value(&q, &k, &cfg).unwrap();
                    let want = naive_loss(&q, &k, tau, sym);
                    assert_close(got, want, 1e-10, "stabilization identity");
                }
            }
        }
    }

    #[test]
    fn loss_is_non_negative_and_finite_with_duplicate_keys() {
        let mut rng = ChaCha8Rng::seed_from_u64(43);
        for trial in 0..20 {
            let n = 2 + (trial % 6);
            let q = random_unit_rows(&mut rng, n, 5);
            let k = random_unit_rows(&mut rng, n, 5);
            let loss = clip_loss_value(&q, &k, &LossConfig::default()).unwrap();
            assert!(loss >= 0.0 && loss.is_finite(), "loss {} at trial {}", loss, trial);
        }
        // All keys identical: still finite, floored near ln(N).
        let one = Matrix::row_vector(vec![1.0, 0.0]);
        let k = Matrix::from_rows(&[one.row(0).to_vec(), one.row(0).to_vec(), one.row(0).to_vec()]);
        let q = random_unit_rows(&mut rng, 3, 2);
        let loss = clip_loss_value(&q, &k, &LossConfig::default()).unwrap();
        assert!(loss.is_finite());
        assert!(loss >= 0.5 * 3f64.ln() - 1e-9, "duplicate keys floor, got {}", loss);
    }

    #[test]
    fn loss_is_invariant_under_joint_row_permutation() {
        let mut rng = ChaCha8Rng::seed_from_u64(44);
        let q = random_unit_rows(&mut rng, 6, 4);
        let k = random_unit_rows(&mut rng, 6, 4);
        let perm = [3usize, 0, 5, 1, 4, 2];
        let qp = Matrix::from_rows(&perm.iter().map(|&i| q.row(i).to_vec()).collect::<Vec<_>>());
        let kp = Matrix::from_rows(&perm.iter().map(|&i| k.row(i).to_vec()).collect::<Vec<_>>());
        let a = clip_loss_value(&q, &k, &LossConfig::default()).unwrap();
        let b = clip_loss_value(&qp, &kp, &LossConfig::default()).unwrap();
        assert_close(a, b, 1e-12, "pairing permutation invariance");
    }

    #[test]
    fn rejects_bad_temperature_empty_batch_and_shape_mismatch() {
        let q = Matrix::row_vector(vec![1.0, 0.0]);
        let cfg = LossConfig { temperature: 0.0, direction: LossDirection::Symmetric };
        assert!(matches!(clip_loss_value(&q, &q, &cfg), Err(Error::Temperature { .. })));

        let empty = Matrix::zeros(0, 2);
        assert!(matches!(
            clip_loss_value(&empty, &empty, &LossConfig::default()),
            Err(Error::EmptyBatch { .. })
        ));

        let k3 = Matrix::row_vector(vec![1.0, 0.0, 0.0]);
        assert!(matches!(
            clip_loss_value(&q, &k3, &LossConfig::default()),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn similarity_matrix_is_pairwise_cosines() {
        let q = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
        let k = Matrix::from_rows(&[vec![0.6, 0.8], vec![1.0, 0.0]]);
        let s = similarity_matrix(&q, &k).unwrap();
        assert_eq!(s.shape(), (2, 2));
        assert_close(s.get(0, 0), 0.6, 1e-12, "cos(q0,k0)");
        assert_close(s.get(0, 1), 1.0, 1e-12, "cos(q0,k1)");
        assert_close(s.get(1, 0), 0.8, 1e-12, "cos(q1,k0)");
        assert_close(s.get(1, 1), 0.0, 1e-12, "cos(q1,k1)");
    }

    #[test]
    fn similarity_matrix_rejects_non_unit_rows() {
        let q = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.5, 0.5]]);
        let k = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
        match similarity_matrix(&q, &k) {
            Err(Error::NotNormalized { side: "q", row: 1, .. }) => {}
            other => panic!("expected NotNormalized, got {:?}", other.map(|_| ())),
        }
    }

    #[test]
    fn clip_loss_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(45);
        let q = random_unit_rows(&mut rng, 4, 5);
        let k = random_unit_rows(&mut rng, 4, 5);
        for direction in [LossDirection::OneSided, LossDirection::Symmetric] {
            let cfg = LossConfig { temperature: 0.1, direction };
            let err = grad_check(
                |t, ids| clip_loss_on_tape(t, ids[0], ids[1], &cfg),
                &[q.clone(), k.clone()],
                1e-5,
            )
            .unwrap();
            assert!(err < 1e-6, "clip loss grad error {} ({:?})", err, direction);
        }
    }
}
