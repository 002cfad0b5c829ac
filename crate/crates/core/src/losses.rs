//! Loss terms, the ramp weight and assembly of the two optimization
//! objectives.
//!
//! Everything here is a pure function of probabilities. Cross-entropies use
//! the natural logarithm and accept soft targets; a target entry of exactly 0
//! contributes 0 regardless of the prediction.

use ndarray::{ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mixup::MixedBatch;
use crate::model::{Head, ModelBundle};

/// Per-step (or per-epoch mean) loss values together with the ramp weight and
/// the two assembled objectives.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub cls: f64,
    pub adv: f64,
    pub cls_mix: f64,
    pub adv_mix: f64,
    pub ent: f64,
    pub ramp: f64,
    pub total_model: f64,
    pub total_discriminator: f64,
}

impl LossReport {
    pub fn is_finite(&self) -> bool {
        [
            self.cls,
            self.adv,
            self.cls_mix,
            self.adv_mix,
            self.ent,
            self.ramp,
            self.total_model,
            self.total_discriminator,
        ]
        .iter()
        .all(|v| v.is_finite())
    }
}

/// Cross-entropy of one probability row against a soft target row.
pub fn soft_cross_entropy(probs: ArrayView1<f64>, target: ArrayView1<f64>) -> Result<f64> {
    if probs.len() != target.len() {
        return Err(Error::shape(format!(
            "probability row has {} entries, target has {}",
            probs.len(),
            target.len()
        )));
    }
    let mut acc = 0.0;
    for (&p, &t) in probs.iter().zip(target.iter()) {
        if t != 0.0 {
            acc -= t * p.max(f64::MIN_POSITIVE).ln();
        }
    }
    Ok(acc)
}

fn mean_soft_ce(probs: ArrayView2<f64>, targets: ArrayView2<f64>) -> Result<f64> {
    if probs.nrows() != targets.nrows() {
        return Err(Error::shape(format!(
            "{} probability rows vs {} target rows",
            probs.nrows(),
            targets.nrows()
        )));
    }
    if probs.nrows() == 0 {
        return Ok(0.0);
    }
    let mut acc = 0.0;
    for (p, t) in probs.outer_iter().zip(targets.outer_iter()) {
        acc += soft_cross_entropy(p, t)?;
    }
    Ok(acc / probs.nrows() as f64)
}

fn mean_hard_ce(probs: ArrayView2<f64>, labels: &[usize]) -> Result<f64> {
    if probs.nrows() != labels.len() {
        return Err(Error::shape(format!(
            "{} probability rows vs {} labels",
            probs.nrows(),
            labels.len()
        )));
    }
    if labels.is_empty() {
        return Ok(0.0);
    }
    let mut acc = 0.0;
    for (p, &c) in probs.outer_iter().zip(labels.iter()) {
        if c >= p.len() {
            return Err(Error::shape(format!(
                "label {c} out of range for {} classes",
                p.len()
            )));
        }
        acc -= p[c].max(f64::MIN_POSITIVE).ln();
    }
    Ok(acc / labels.len() as f64)
}

/// Classification loss: mean cross-entropy over the labeled rows plus mean
/// cross-entropy over the pseudo-labeled rows, each normalized on its own.
/// The pseudo term is 0 when no pseudo-labeled rows are given.
pub fn cls_loss(
    probs_labeled: ArrayView2<f64>,
    labels: &[usize],
    probs_pseudo: ArrayView2<f64>,
    pseudo_labels: ArrayView2<f64>,
) -> Result<f64> {
    Ok(mean_hard_ce(probs_labeled, labels)? + mean_soft_ce(probs_pseudo, pseudo_labels)?)
}

/// Adversarial loss: cross-entropy of domain predictions against (possibly
/// soft) domain labels, normalized by the combined row count.
pub fn adv_loss(domain_probs: ArrayView2<f64>, domain_targets: ArrayView2<f64>) -> Result<f64> {
    mean_soft_ce(domain_probs, domain_targets)
}

/// Losses on the mixed batch: soft cross-entropy of the generalizable head
/// against the mixed class labels, and of the domain discriminator against
/// the mixed domain labels. An empty batch contributes (0, 0).
pub fn mix_losses(mixed: &MixedBatch, bundle: &ModelBundle) -> Result<(f64, f64)> {
    if mixed.is_empty() {
        return Ok((0.0, 0.0));
    }
    let class_probs = bundle.forward_class(&mixed.x_tilde, Head::Generalizable)?;
    let domain_probs = bundle.forward_domain(&mixed.x_tilde, 0.0)?;
    let cls_mix = mean_soft_ce(class_probs.view(), mixed.y_tilde.view())?;
    let adv_mix = mean_soft_ce(domain_probs.view(), mixed.z_tilde.view())?;
    Ok((cls_mix, adv_mix))
}

/// Mean Shannon entropy (natural log) over the rows; 0 for an empty batch.
/// Entries of exactly 0 contribute 0.
pub fn entropy_loss(probs: ArrayView2<f64>) -> f64 {
    if probs.nrows() == 0 {
        return 0.0;
    }
    let mut acc = 0.0;
    for row in probs.outer_iter() {
        acc += row_entropy(row);
    }
    acc / probs.nrows() as f64
}

pub(crate) fn row_entropy(row: ArrayView1<f64>) -> f64 {
    row.iter()
        .filter(|&&p| p > 0.0)
        .map(|&p| -p * p.ln())
        .sum()
}

/// Warm-up weight gating the adversarial and entropy terms. Rises from
/// exp(-5) at epoch 0 to exactly 1 at `ramp_epochs` and stays there.
pub fn ramp_weight(epoch: usize, ramp_epochs: usize) -> f64 {
    debug_assert!(ramp_epochs >= 1);
    let t = (epoch as f64 / ramp_epochs as f64).min(1.0);
    (-5.0 * (1.0 - t).powi(2)).exp()
}

/// The two objectives realized in one backward pass: the model objective is
/// minimized over the extractor and both classifier heads with the
/// adversarial terms reversed at the ramp weight; the discriminator
/// objective is minimized over the discriminator alone.
pub fn assemble_objectives(report: &LossReport) -> (f64, f64) {
    let model = report.cls + report.cls_mix
        + report.ramp * (-report.adv - report.adv_mix + report.ent);
    let discriminator = report.adv + report.adv_mix;
    (model, discriminator)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::{arr1, arr2, Array2};

    #[test]
    fn perfect_predictions_give_zero_cls() {
        let probs = arr2(&[[1.0, 0.0, 0.0], [0.0, 0.0, 1.0]]);
        let empty = Array2::zeros((0, 3));
        let loss = cls_loss(probs.view(), &[0, 2], empty.view(), empty.view()).unwrap();
        assert_abs_diff_eq!(loss, 0.0, epsilon = 1e-12);
    }

    #[test]
    fn uniform_predictions_give_ln_c_per_term() {
        let c = 7;
        let probs = Array2::from_elem((4, c), 1.0 / c as f64);
        let one_hot = {
            let mut t = Array2::zeros((4, c));
            for i in 0..4 {
                t[[i, i % c]] = 1.0;
            }
            t
        };
        let loss = cls_loss(probs.view(), &[0, 1, 2, 3], probs.view(), one_hot.view()).unwrap();
        assert_abs_diff_eq!(loss, 2.0 * (c as f64).ln(), epsilon = 1e-9);
    }

    #[test]
    fn hand_evaluated_log() {
        let probs = arr2(&[[0.8, 0.2]]);
        let empty = Array2::zeros((0, 2));
        let loss = cls_loss(probs.view(), &[0], empty.view(), empty.view()).unwrap();
        assert_abs_diff_eq!(loss, -(0.8f64.ln()), epsilon = 1e-12);
        assert_abs_diff_eq!(loss, 0.2231435513, epsilon = 1e-9);
    }

    #[test]
    fn adv_uniform_and_soft_targets() {
        let probs = Array2::from_elem((5, 3), 1.0 / 3.0);
        let mut targets = Array2::zeros((5, 3));
        for i in 0..5 {
            targets[[i, i % 3]] = 1.0;
        }
        assert_abs_diff_eq!(
            adv_loss(probs.view(), targets.view()).unwrap(),
            3f64.ln(),
            epsilon = 1e-9
        );

        let soft = arr2(&[[0.5, 0.5, 0.0]]);
        assert_abs_diff_eq!(
            adv_loss(soft.view(), soft.view()).unwrap(),
            2f64.ln(),
            epsilon = 1e-12
        );
    }

    #[test]
    fn entropy_cases() {
        let one_hot = arr2(&[[1.0, 0.0, 0.0]]);
        assert_abs_diff_eq!(entropy_loss(one_hot.view()), 0.0, epsilon = 1e-12);

        let c = 7;
        let uniform = Array2::from_elem((3, c), 1.0 / c as f64);
        assert_abs_diff_eq!(entropy_loss(uniform.view()), (c as f64).ln(), epsilon = 1e-9);

        let half = arr2(&[[0.5, 0.5, 0.0, 0.0]]);
        assert_abs_diff_eq!(entropy_loss(half.view()), 2f64.ln(), epsilon = 1e-12);

        let empty = Array2::zeros((0, 4));
        assert_eq!(entropy_loss(empty.view()), 0.0);
    }

    #[test]
    fn entropy_bounded_by_ln_c() {
        let rows = arr2(&[[0.7, 0.1, 0.1, 0.1], [0.25, 0.25, 0.25, 0.25]]);
        let e = entropy_loss(rows.view());
        assert!(e <= 4f64.ln() + 1e-9);
        assert!(e >= 0.0);
    }

    #[test]
    fn ramp_endpoints_and_monotonicity() {
        let r = 12;
        assert_abs_diff_eq!(ramp_weight(0, r), (-5.0f64).exp(), epsilon = 1e-12);
        assert_abs_diff_eq!(ramp_weight(r, r), 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(ramp_weight(r + 10, r), 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(ramp_weight(r / 2, r), (-1.25f64).exp(), epsilon = 1e-12);
        let mut prev = 0.0;
        for e in 0..=r + 3 {
            let w = ramp_weight(e, r);
            assert!(w >= prev);
            assert!((0.0..=1.0).contains(&w));
            prev = w;
        }
    }

    #[test]
    fn objective_assembly() {
        let report = LossReport {
            cls: 1.0,
            adv: 0.2,
            cls_mix: 0.5,
            adv_mix: 0.1,
            ent: 0.3,
            ramp: 1.0,
            ..Default::default()
        };
        let (model, disc) = assemble_objectives(&report);
        assert_abs_diff_eq!(model, 1.5, epsilon = 1e-12);
        assert_abs_diff_eq!(disc, 0.3, epsilon = 1e-12);

        let zero_ramp = LossReport {
            ramp: 0.0,
            ..report.clone()
        };
        let (model0, _) = assemble_objectives(&zero_ramp);
        assert_abs_diff_eq!(model0, 1.5, epsilon = 1e-12);

        let zeros = LossReport::default();
        assert_eq!(assemble_objectives(&zeros), (0.0, 0.0));
    }

    #[test]
    fn pseudo_term_zero_when_empty() {
        let probs = arr2(&[[0.8, 0.2]]);
        let empty = Array2::zeros((0, 2));
        let with_empty = cls_loss(probs.view(), &[0], empty.view(), empty.view()).unwrap();
        let both = cls_loss(probs.view(), &[0], probs.view(), arr2(&[[1.0, 0.0]]).view()).unwrap();
        assert!(both > with_empty);
    }

    #[test]
    fn shape_errors() {
        let probs = arr2(&[[0.8, 0.2]]);
        let bad = arr1(&[1.0, 0.0, 0.0]);
        assert!(soft_cross_entropy(probs.row(0), bad.view()).is_err());
        let empty = Array2::zeros((0, 2));
        assert!(cls_loss(probs.view(), &[5], empty.view(), empty.view()).is_err());
    }
}
