//! The consistency objectives: cosine similarity, instance-level and
//! image-level contrastive losses over scene-aligned cross-domain pairs, the
//! Manhattan-distance distillation regularizer, and total-loss assembly.
//!
//! The contrastive form is one-directional: anchors come from the original
//! domain, the aligned counterpart is the positive, and the other
//! counterparts in the batch are the negatives
//!
//!   L = (1/N) sum_i -log( exp(s_ii/t) / (exp(s_ii/t) + sum_{k!=i} exp(s_ik/t)) )
//!
//! with s the cosine similarity of projected embeddings. A symmetric variant
//! (both directions averaged) sits behind a flag and is off by default.

use ndarray::Array2;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};

/// Row-aligned embedding pairs: row i of `anchors` (original domain) and row
/// i of `counterparts` (stylized domain) describe the same scene content.
#[derive(Clone, Debug)]
pub struct PairBatch {
    pub anchors: Array2<f64>,
    pub counterparts: Array2<f64>,
}

impl PairBatch {
    pub fn new(anchors: Array2<f64>, counterparts: Array2<f64>) -> Result<Self> {
        if anchors.dim() != counterparts.dim() {
            return Err(Error::Shape(format!(
                "pair batch shapes differ: {:?} vs {:?}",
                anchors.dim(),
                counterparts.dim()
            )));
        }
        if anchors.nrows() == 0 {
            return Err(Error::Degenerate("empty pair batch".into()));
        }
        let finite =
            anchors.iter().all(|v| v.is_finite()) && counterparts.iter().all(|v| v.is_finite());
        if !finite {
            return Err(Error::Degenerate("non-finite embeddings in pair batch".into()));
        }
        for m in [&anchors, &counterparts] {
            for row in m.rows() {
                let n: f64 = row.iter().map(|v| v * v).sum::<f64>().sqrt();
                if n <= 1e-12 {
                    return Err(Error::Degenerate("zero-norm embedding row".into()));
                }
            }
        }
        Ok(PairBatch {
            anchors,
            counterparts,
        })
    }

    pub fn len(&self) -> usize {
        self.anchors.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.anchors.nrows() == 0
    }
}

/// Cosine similarity of two vectors. Near-zero-norm inputs are a degenerate
/// input error, not a silent NaN.
pub fn cosine_sim(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!("cosine dims {} vs {}", a.len(), b.len())));
    }
    let na: f64 = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if na <= 1e-12 || nb <= 1e-12 {
        return Err(Error::Degenerate("cosine of near-zero-norm vector".into()));
    }
    let dot: f64 = a.iter().zip(b.iter()).map(|(x, y)| x * y).sum();
    Ok(dot / (na * nb))
}

fn check_tau(tau: f64) -> Result<()> {
    if tau <= 0.0 {
        return Err(Error::Config(format!("temperature must be positive, got {tau}")));
    }
    Ok(())
}

/// Instance-level contrastive consistency over projected region embeddings.
pub fn instance_contrastive(batch: &PairBatch, tau: f64, symmetric: bool) -> Result<f64> {
    check_tau(tau)?;
    let mut tape = Tape::new();
    let a = tape.leaf(batch.anchors.clone().into_dyn());
    let b = tape.leaf(batch.counterparts.clone().into_dyn());
    let loss = tape.contrastive_pairs(a, b, tau, symmetric);
    Ok(tape.scalar(loss))
}

/// Image-level contrastive consistency: the identical formula applied to
/// whole-image embeddings.
pub fn image_contrastive(batch: &PairBatch, tau: f64, symmetric: bool) -> Result<f64> {
    instance_contrastive(batch, tau, symmetric)
}

/// Tape-resident contrastive loss for training (gradients flow through both
/// embedding matrices).
pub fn contrastive_var(tape: &mut Tape, anchors: Var, counterparts: Var, tau: f64, symmetric: bool) -> Result<Var> {
    check_tau(tau)?;
    let av = tape.value(anchors);
    let bv = tape.value(counterparts);
    if av.shape() != bv.shape() {
        return Err(Error::Shape("contrastive pair shapes differ".into()));
    }
    Ok(tape.contrastive_pairs(anchors, counterparts, tau, symmetric))
}

/// Distillation regularizer value on plain matrices: mean over rows of the
/// Manhattan distance between live and reference descriptive features.
pub fn kd_regularizer(live: &Array2<f64>, reference: &Array2<f64>) -> Result<f64> {
    if live.dim() != reference.dim() {
        return Err(Error::Shape("distillation feature shapes differ".into()));
    }
    if live.nrows() == 0 {
        return Err(Error::Degenerate("empty distillation batch".into()));
    }
    let mut tape = Tape::new();
    let a = tape.leaf(live.clone().into_dyn());
    let b = tape.leaf(reference.clone().into_dyn());
    let loss = tape.l1_rows_mean(a, b);
    Ok(tape.scalar(loss))
}

/// Tape-resident distillation term; the reference side is expected to be a
/// constant leaf so no gradient reaches it.
pub fn kd_var(tape: &mut Tape, live: Var, reference: Var) -> Var {
    tape.l1_rows_mean(live, reference)
}

/// Per-step loss record written to the training log.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossReport {
    pub l_det: f64,
    pub l_inst: f64,
    pub l_img: f64,
    pub l_dist: f64,
    pub omega: f64,
    pub l_total: f64,
}

/// Weighted total per the training objective:
/// total = det + inst + img + omega * dist.
pub fn total_loss(l_det: f64, l_inst: f64, l_img: f64, l_dist: f64, omega: f64) -> Result<LossReport> {
    for (name, v) in [
        ("l_det", l_det),
        ("l_inst", l_inst),
        ("l_img", l_img),
        ("l_dist", l_dist),
        ("omega", omega),
    ] {
        if !v.is_finite() {
            return Err(Error::Diverged(format!("non-finite component {name}: {v}")));
        }
    }
    Ok(LossReport {
        l_det,
        l_inst,
        l_img,
        l_dist,
        omega,
        l_total: l_det + l_inst + l_img + omega * l_dist,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr2;

    #[test]
    fn cosine_identity_orthogonal_and_hand_value() {
        assert_eq!(cosine_sim(&[1.0, 0.0], &[1.0, 0.0]).unwrap(), 1.0);
        assert_eq!(cosine_sim(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        // (1*2 + 2*1) / (sqrt(5)*sqrt(5)) = 4/5
        let v = cosine_sim(&[1.0, 2.0], &[2.0, 1.0]).unwrap();
        assert!((v - 0.8).abs() < 1e-12);
    }

    #[test]
    fn cosine_rejects_zero_norm() {
        assert!(cosine_sim(&[0.0, 0.0], &[1.0, 0.0]).is_err());
    }

    #[test]
    fn single_pair_loss_is_zero() {
        let batch = PairBatch::new(arr2(&[[0.3, 0.4]]), arr2(&[[0.5, -0.2]])).unwrap();
        let l = instance_contrastive(&batch, 0.07, false).unwrap();
        assert!(l.abs() < 1e-12);
    }

    #[test]
    fn orthogonal_two_pair_batch_matches_closed_form() {
        let batch = PairBatch::new(
            arr2(&[[1.0, 0.0], [0.0, 1.0]]),
            arr2(&[[1.0, 0.0], [0.0, 1.0]]),
        )
        .unwrap();
        let l = instance_contrastive(&batch, 1.0, false).unwrap();
        let expected = -(std::f64::consts::E / (std::f64::consts::E + 1.0)).ln();
        assert!((l - expected).abs() < 1e-12, "{l} vs {expected}");
    }

    #[test]
    fn loss_invariant_to_positive_rescaling() {
        let batch = PairBatch::new(
            arr2(&[[0.2, -1.0, 0.4], [1.1, 0.3, -0.2]]),
            arr2(&[[0.3, -0.9, 0.35], [1.0, 0.5, -0.1]]),
        )
        .unwrap();
        let l1 = instance_contrastive(&batch, 0.07, false).unwrap();
        let scaled = PairBatch::new(&batch.anchors * 3.0, &batch.counterparts * 3.0).unwrap();
        let l2 = instance_contrastive(&scaled, 0.07, false).unwrap();
        assert!((l1 - l2).abs() < 1e-9);
    }

    #[test]
    fn image_and_instance_share_the_formula() {
        let batch = PairBatch::new(
            arr2(&[[0.2, -1.0], [1.1, 0.3], [-0.4, 0.9]]),
            arr2(&[[0.3, -0.9], [1.0, 0.5], [-0.5, 1.0]]),
        )
        .unwrap();
        let a = instance_contrastive(&batch, 0.4, false).unwrap();
        let b = image_contrastive(&batch, 0.4, false).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn kd_hand_values() {
        // |1| + |-2| = 3 on a single row
        let l = kd_regularizer(&arr2(&[[1.0, -2.0]]), &arr2(&[[0.0, 0.0]])).unwrap();
        assert!((l - 3.0).abs() < 1e-12);
        // rows with distances 2 and 4 average to 3
        let l2 = kd_regularizer(
            &arr2(&[[1.0, 1.0], [2.0, 2.0]]),
            &arr2(&[[0.0, 0.0], [0.0, 0.0]]),
        )
        .unwrap();
        assert!((l2 - 3.0).abs() < 1e-12);
    }

    #[test]
    fn kd_zero_when_branches_agree() {
        let m = arr2(&[[0.4, -0.3, 1.2]]);
        let l = kd_regularizer(&m, &m).unwrap();
        assert_eq!(l, 0.0);
    }

    #[test]
    fn total_loss_assembly() {
        let r = total_loss(1.0, 0.5, 0.25, 0.2, 2.0).unwrap();
        assert!((r.l_total - 2.15).abs() < 1e-12);
        let plain = total_loss(1.0, 0.5, 0.25, 0.2, 1.0).unwrap();
        assert!((plain.l_total - 1.95).abs() < 1e-12);
        let zero_omega = total_loss(1.0, 0.5, 0.25, 0.9, 0.0).unwrap();
        assert!((zero_omega.l_total - 1.75).abs() < 1e-12);
    }

    #[test]
    fn total_loss_rejects_non_finite() {
        assert!(total_loss(f64::NAN, 0.0, 0.0, 0.0, 1.0).is_err());
        assert!(total_loss(0.0, f64::INFINITY, 0.0, 0.0, 1.0).is_err());
    }

    #[test]
    fn report_identity_reconstructs() {
        let r = total_loss(0.7, 0.2, 0.1, 0.4, 1.0).unwrap();
        assert!((r.l_total - (r.l_det + r.l_inst + r.l_img + r.omega * r.l_dist)).abs() < 1e-9);
    }
}
