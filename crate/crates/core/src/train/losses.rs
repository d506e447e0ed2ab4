//! Objectives for every method, built on the autodiff tape.
//!
//! All guidance terms use the per-sample squared L2 distance averaged over
//! the batch; `alpha_half` multiplies that average.

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};

pub const HARD_WEIGHT_MIN: f64 = 0.1;
pub const HARD_WEIGHT_MAX: f64 = 10.0;

fn require_detached(tape: &Tape, v: Var, what: &str) -> Result<()> {
    if tape.requires_grad(v) {
        return Err(Error::Contract(format!("{what} must be detached")));
    }
    Ok(())
}

fn guided(tape: &mut Tape, cla: Var, guidance: Var, weight: f64) -> Result<Var> {
    let scaled = tape.scale(guidance, weight);
    tape.add(cla, scaled)
}

/// `H(softmax(z_E), y)` for one expert on its own domain's rows.
pub fn loss_expert(tape: &mut Tape, z: Var, y: Var) -> Result<Var> {
    let q = tape.softmax(z)?;
    tape.cross_entropy(q, y)
}

/// `H(softmax(z), y) + alpha_half · mean_B ‖z − q^E‖²` with `q^E` detached.
pub fn loss_lfme(tape: &mut Tape, z: Var, y: Var, q_expert: Var, alpha_half: f64) -> Result<Var> {
    require_detached(tape, q_expert, "expert probabilities")?;
    let q = tape.softmax(z)?;
    let cla = tape.cross_entropy(q, y)?;
    let guid = tape.mse(z, q_expert)?;
    guided(tape, cla, guid, alpha_half)
}

/// The expert probabilities replaced by the one-hot label.
pub fn loss_erm_plus(tape: &mut Tape, z: Var, y: Var, alpha_half: f64) -> Result<Var> {
    let q = tape.softmax(z)?;
    let cla = tape.cross_entropy(q, y)?;
    let guid = tape.mse(z, y)?;
    guided(tape, cla, guid, alpha_half)
}

/// `(1 − ε)·y + ε/K`.
pub fn smoothed_targets(labels: &[usize], num_classes: usize, epsilon: f64) -> Result<Tensor> {
    let mut t = Tensor::one_hot(labels, num_classes)?;
    let uniform = epsilon / num_classes as f64;
    t.data_mut()
        .iter_mut()
        .for_each(|v| *v = (1.0 - epsilon) * *v + uniform);
    Ok(t)
}

/// Cross-entropy against label-smoothed targets.
pub fn loss_ls(tape: &mut Tape, z: Var, labels: &[usize], epsilon: f64) -> Result<Var> {
    let k = tape.value(z).last_dim();
    let target = tape.constant(smoothed_targets(labels, k, epsilon)?);
    let q = tape.softmax(z)?;
    tape.soft_cross_entropy(q, target)
}

/// The knowledge-distillation alternatives to the logit regression term.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum KdKind {
    /// ‖z − z^E‖²
    LogitLogit,
    /// ‖q − z^E‖²
    ProbLogit,
    /// ‖q − q^E‖²
    ProbProb,
    /// (1 − w) H(q, y) + w H(q, q^E)
    CrossEntropy,
}

/// Linear ramp of the KD_CE weight: `alpha_half · min(1, step / ramp_steps)`.
pub fn kd_ce_weight(alpha_half: f64, step: usize, ramp_steps: usize) -> f64 {
    alpha_half * (step as f64 / ramp_steps.max(1) as f64).min(1.0)
}

pub fn loss_kd_variant(
    tape: &mut Tape,
    kind: KdKind,
    z: Var,
    y: Var,
    z_expert: Var,
    q_expert: Var,
    weight: f64,
) -> Result<Var> {
    require_detached(tape, z_expert, "expert logits")?;
    require_detached(tape, q_expert, "expert probabilities")?;
    let q = tape.softmax(z)?;
    let cla = tape.cross_entropy(q, y)?;
    match kind {
        KdKind::LogitLogit => {
            let g = tape.mse(z, z_expert)?;
            guided(tape, cla, g, weight)
        }
        KdKind::ProbLogit => {
            let g = tape.mse(q, z_expert)?;
            guided(tape, cla, g, weight)
        }
        KdKind::ProbProb => {
            let g = tape.mse(q, q_expert)?;
            guided(tape, cla, g, weight)
        }
        KdKind::CrossEntropy => {
            let soft = tape.soft_cross_entropy(q, q_expert)?;
            let a = tape.scale(cla, 1.0 - weight);
            let b = tape.scale(soft, weight);
            tape.add(a, b)
        }
    }
}

/// Guidance `mean_B ‖z − detach(softmax(z))‖²`.
pub fn loss_self_guid(tape: &mut Tape, z: Var) -> Result<Var> {
    let q = tape.softmax(z)?;
    let target = tape.detach(q);
    tape.mse(z, target)
}

/// Guidance `mean_B ‖q − q^LFME‖²` against a frozen model's probabilities.
pub fn loss_lfme_guid(tape: &mut Tape, q: Var, q_reference: Var) -> Result<Var> {
    require_detached(tape, q_reference, "reference probabilities")?;
    tape.mse(q, q_reference)
}

/// Per-sample weights growing with the loss: `1 + β·zscore(ℓ)`, clamped to [0.1, 10].
pub fn hard_weights(losses: &[f64], beta: f64) -> Result<Vec<f64>> {
    if losses.is_empty() {
        return Err(Error::Invalid("hard weights need a non-empty batch".into()));
    }
    if losses.iter().all(|&l| l == losses[0]) {
        // Rounding in the mean would otherwise leave tiny non-zero deviations.
        return Ok(vec![1.0; losses.len()]);
    }
    let n = losses.len() as f64;
    let mean = losses.iter().sum::<f64>() / n;
    let std = (losses.iter().map(|l| (l - mean) * (l - mean)).sum::<f64>() / n).sqrt();
    Ok(losses
        .iter()
        .map(|l| (1.0 + beta * (l - mean) / (std + 1e-8)).clamp(HARD_WEIGHT_MIN, HARD_WEIGHT_MAX))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn scalar(tape: &Tape, v: Var) -> f64 {
        tape.value(v).data()[0]
    }

    fn row(tape: &mut Tape, v: &[f64]) -> Var {
        tape.param(Tensor::from_rows(&[v]).unwrap())
    }

    #[test]
    fn expert_loss_examples() {
        let mut tape = Tape::new();
        let y = tape.constant(Tensor::one_hot(&[0], 3).unwrap());
        let z = row(&mut tape, &[0.0, 0.0, 0.0]);
        let l = loss_expert(&mut tape, z, y).unwrap();
        assert_abs_diff_eq!(scalar(&tape, l), 3f64.ln(), epsilon = 1e-15);
        assert_abs_diff_eq!(scalar(&tape, l), 1.098612, epsilon = 1e-6);
        let z = row(&mut tape, &[60.0, -60.0, -60.0]);
        let l = loss_expert(&mut tape, z, y).unwrap();
        assert!(scalar(&tape, l) < 1e-40);
    }

    #[test]
    fn lfme_loss_hand_evaluation() {
        let mut tape = Tape::new();
        let z = row(&mut tape, &[1.0, 0.0]);
        let y = tape.constant(Tensor::one_hot(&[0], 2).unwrap());
        let qe = tape.constant(Tensor::from_rows(&[[0.8, 0.2]]).unwrap());
        let l = loss_lfme(&mut tape, z, y, qe, 1.0).unwrap();
        let cla = -(1f64.exp() / (1f64.exp() + 1.0)).ln();
        assert_abs_diff_eq!(cla, 0.313262, epsilon = 1e-6);
        assert_abs_diff_eq!(scalar(&tape, l), cla + 0.08, epsilon = 1e-12);
        assert_abs_diff_eq!(scalar(&tape, l), 0.393262, epsilon = 1e-6);
    }

    #[test]
    fn lfme_reduces_to_erm() {
        let mut tape = Tape::new();
        let z = row(&mut tape, &[0.3, -0.4, 1.2]);
        let y = tape.constant(Tensor::one_hot(&[2], 3).unwrap());
        let qe = tape.constant(Tensor::from_rows(&[[0.2, 0.3, 0.5]]).unwrap());
        let l0 = loss_lfme(&mut tape, z, y, qe, 0.0).unwrap();
        let erm = loss_expert(&mut tape, z, y).unwrap();
        assert_eq!(scalar(&tape, l0), scalar(&tape, erm));
        // z == qE: guidance vanishes
        let z2 = tape.param(Tensor::from_rows(&[[0.2, 0.3, 0.5]]).unwrap());
        let l = loss_lfme(&mut tape, z2, y, qe, 5.0).unwrap();
        let e = loss_expert(&mut tape, z2, y).unwrap();
        assert_eq!(scalar(&tape, l), scalar(&tape, e));
    }

    #[test]
    fn lfme_rejects_attached_expert_probabilities() {
        let mut tape = Tape::new();
        let z = row(&mut tape, &[0.3, -0.4]);
        let y = tape.constant(Tensor::one_hot(&[1], 2).unwrap());
        let ze = row(&mut tape, &[0.1, 0.2]);
        let qe = tape.softmax(ze).unwrap();
        assert!(matches!(
            loss_lfme(&mut tape, z, y, qe, 1.0),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn erm_plus_examples() {
        let mut tape = Tape::new();
        let z = row(&mut tape, &[0.0, 0.0]);
        let y = tape.constant(Tensor::one_hot(&[0], 2).unwrap());
        let l = loss_erm_plus(&mut tape, z, y, 1.0).unwrap();
        assert_abs_diff_eq!(scalar(&tape, l), 2f64.ln() + 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(scalar(&tape, l), 1.693147, epsilon = 1e-6);
        let l0 = loss_erm_plus(&mut tape, z, y, 0.0).unwrap();
        assert_eq!(scalar(&tape, l0), 2f64.ln());
        let zy = tape.param(Tensor::one_hot(&[0], 2).unwrap());
        let l = loss_erm_plus(&mut tape, zy, y, 3.0).unwrap();
        let e = loss_expert(&mut tape, zy, y).unwrap();
        assert_eq!(scalar(&tape, l), scalar(&tape, e));
    }

    #[test]
    fn ls_examples() {
        let mut tape = Tape::new();
        let z = row(&mut tape, &[0.0, 0.0]);
        let l = loss_ls(&mut tape, z, &[1], 0.2).unwrap();
        assert_abs_diff_eq!(scalar(&tape, l), 0.693147, epsilon = 1e-6);

        let z = row(&mut tape, &[0.7, -0.2, 0.1]);
        let y = tape.constant(Tensor::one_hot(&[1], 3).unwrap());
        let l0 = loss_ls(&mut tape, z, &[1], 0.0).unwrap();
        let erm = loss_expert(&mut tape, z, y).unwrap();
        assert_eq!(scalar(&tape, l0), scalar(&tape, erm));
        assert_eq!(
            smoothed_targets(&[1], 3, 0.0).unwrap(),
            Tensor::one_hot(&[1], 3).unwrap()
        );
    }

    #[test]
    fn ls_with_full_smoothing_prefers_flat_logits() {
        let labels = [0usize];
        let loss_at = |z: [f64; 3]| {
            let mut tape = Tape::new();
            let zv = tape.param(Tensor::from_rows(&[z]).unwrap());
            let l = loss_ls(&mut tape, zv, &labels, 0.999_999).unwrap();
            tape.value(l).data()[0]
        };
        let flat = loss_at([0.5, 0.5, 0.5]);
        assert!(flat < loss_at([1.0, 0.5, 0.0]));
        assert!(flat < loss_at([0.0, 0.0, 2.0]));
    }

    #[test]
    fn kd_examples() {
        let mut tape = Tape::new();
        let y = tape.constant(Tensor::one_hot(&[0], 2).unwrap());
        let z = row(&mut tape, &[0.4, 0.1]);
        let ze = tape.constant(Tensor::from_rows(&[[0.4, 0.1]]).unwrap());
        let qe = tape.constant(Tensor::from_rows(&[[0.5, 0.5]]).unwrap());
        let l = loss_kd_variant(&mut tape, KdKind::LogitLogit, z, y, ze, qe, 2.0).unwrap();
        let cla = loss_expert(&mut tape, z, y).unwrap();
        assert_eq!(scalar(&tape, l), scalar(&tape, cla));

        let w0 = kd_ce_weight(1.0, 0, 100);
        assert_eq!(w0, 0.0);
        let l = loss_kd_variant(&mut tape, KdKind::CrossEntropy, z, y, ze, qe, w0).unwrap();
        assert_eq!(scalar(&tape, l), scalar(&tape, cla));
        assert_eq!(kd_ce_weight(0.8, 50, 100), 0.4);
        assert_eq!(kd_ce_weight(0.8, 500, 100), 0.8);

        // ‖q − q^E‖² for q = [0.6, 0.4] against [0.5, 0.5]: 0.01 + 0.01.
        let mut tape = Tape::new();
        let q = tape.constant(Tensor::from_rows(&[[0.6, 0.4]]).unwrap());
        let qe = tape.constant(Tensor::from_rows(&[[0.5, 0.5]]).unwrap());
        let g = tape.mse(q, qe).unwrap();
        assert_abs_diff_eq!(scalar(&tape, g), 0.02, epsilon = 1e-15);

        // The same value through the KD_QQ path: choose z with softmax = [0.6, 0.4].
        let mut tape = Tape::new();
        let z = row(&mut tape, &[(0.6f64 / 0.4).ln(), 0.0]);
        let y = tape.constant(Tensor::one_hot(&[0], 2).unwrap());
        let ze = tape.constant(Tensor::zeros(vec![1, 2]));
        let qe = tape.constant(Tensor::from_rows(&[[0.5, 0.5]]).unwrap());
        let l = loss_kd_variant(&mut tape, KdKind::ProbProb, z, y, ze, qe, 1.0).unwrap();
        let cla = loss_expert(&mut tape, z, y).unwrap();
        assert_abs_diff_eq!(scalar(&tape, l) - scalar(&tape, cla), 0.02, epsilon = 1e-12);
    }

    #[test]
    fn self_guid_value_and_detach() {
        let mut tape = Tape::new();
        let z = row(&mut tape, &[0.0, 0.0]);
        let g = loss_self_guid(&mut tape, z).unwrap();
        assert_abs_diff_eq!(scalar(&tape, g), 0.5, epsilon = 1e-15);

        // Gradient is 2(z − q) with q treated as a constant.
        let mut tape = Tape::new();
        let zv = [0.9, -0.3, 0.2];
        let z = row(&mut tape, &zv);
        let g = loss_self_guid(&mut tape, z).unwrap();
        tape.backward(g).unwrap();
        let q = crate::autodiff::softmax_values(&Tensor::from_rows(&[zv]).unwrap()).unwrap();
        for c in 0..3 {
            assert_abs_diff_eq!(
                tape.grad(z).unwrap()[c],
                2.0 * (zv[c] - q.data()[c]),
                epsilon = 1e-15
            );
        }
    }

    #[test]
    fn lfme_guid_examples() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::from_rows(&[[1.0, 0.0]]).unwrap());
        let b = tape.constant(Tensor::from_rows(&[[0.0, 1.0]]).unwrap());
        let g = loss_lfme_guid(&mut tape, a, b).unwrap();
        assert_eq!(scalar(&tape, g), 2.0);
        let g = loss_lfme_guid(&mut tape, a, a).unwrap();
        assert_eq!(scalar(&tape, g), 0.0);

        let p = [[0.2, 0.5, 0.3], [0.6, 0.1, 0.3]];
        let r = [[0.1, 0.1, 0.8], [0.3, 0.3, 0.4]];
        let pv = tape.constant(Tensor::from_rows(&p).unwrap());
        let rv = tape.constant(Tensor::from_rows(&r).unwrap());
        let g = loss_lfme_guid(&mut tape, pv, rv).unwrap();
        let mut oracle = 0.0;
        for i in 0..2 {
            for c in 0..3 {
                oracle += (p[i][c] - r[i][c]).powi(2);
            }
        }
        assert_abs_diff_eq!(scalar(&tape, g), oracle / 2.0, epsilon = 1e-15);
    }

    #[test]
    fn hard_weight_examples() {
        assert_eq!(hard_weights(&[0.7, 0.7, 0.7], 2.0).unwrap(), vec![1.0; 3]);
        assert_eq!(hard_weights(&[0.1, 0.9, 3.0], 0.0).unwrap(), vec![1.0; 3]);
        let w = hard_weights(&[0.0, 2.0], 1.0).unwrap();
        assert_eq!(w[0], HARD_WEIGHT_MIN);
        assert_abs_diff_eq!(w[1], 2.0, epsilon = 1e-7);
        assert!(hard_weights(&[], 1.0).is_err());

        let w = hard_weights(&[0.2, 0.4, 0.5, 0.9, 1.1], 0.5).unwrap();
        let mean = w.iter().sum::<f64>() / w.len() as f64;
        assert_abs_diff_eq!(mean, 1.0, epsilon = 1e-7);
        assert!(w.windows(2).all(|p| p[0] <= p[1]));
    }
}
