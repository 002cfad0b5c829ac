//! Domain-aware pseudo-labeling: the per-domain class-representation bank,
//! cosine similarity against it, score blending and thresholded assignment.
//!
//! Confidence for bank admission always comes from the predictive head's
//! probability (its max entry), never from the blended score. Raw cosine in
//! [-1, 1] is blended without rescaling, so thresholds are calibrated against
//! unnormalized blends.

use std::collections::BTreeMap;

use ndarray::{Array1, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::config::RepPolicy;
use crate::error::{Error, Result};
use crate::sample::SampleId;

/// One unlabeled sample's scoring record for an epoch: the classifier
/// probability `q`, the similarity vector `psi` when the bank was ready, and
/// the blended score `s` actually used for assignment (`s = q` when `psi` is
/// absent).
#[derive(Debug, Clone)]
pub struct ScoredSample {
    pub sample_id: SampleId,
    pub domain_id: usize,
    pub feature: Array1<f64>,
    pub q: Array1<f64>,
    pub psi: Option<Array1<f64>>,
    pub s: Array1<f64>,
}

/// Index of the largest entry; ties break to the lowest index.
pub fn argmax(v: ArrayView1<f64>) -> usize {
    let mut best = 0;
    let mut best_val = f64::NEG_INFINITY;
    for (i, &x) in v.iter().enumerate() {
        if x > best_val {
            best_val = x;
            best = i;
        }
    }
    best
}

/// Cosine similarity; errors on a zero-norm operand.
pub fn cosine(a: ArrayView1<f64>, b: ArrayView1<f64>) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::shape(format!(
            "cosine between vectors of length {} and {}",
            a.len(),
            b.len()
        )));
    }
    let na = a.dot(&a).sqrt();
    let nb = b.dot(&b).sqrt();
    if na < 1e-12 || nb < 1e-12 {
        return Err(Error::DegenerateVector);
    }
    Ok((a.dot(&b) / (na * nb)).clamp(-1.0, 1.0))
}

/// Elementwise convex combination `gamma * q + (1 - gamma) * psi`. No
/// renormalization is applied.
pub fn blend_scores(
    q: ArrayView1<f64>,
    psi: ArrayView1<f64>,
    gamma: f64,
) -> Result<Array1<f64>> {
    if q.len() != psi.len() {
        return Err(Error::shape(format!(
            "blend between vectors of length {} and {}",
            q.len(),
            psi.len()
        )));
    }
    Ok(q.mapv(|v| gamma * v) + psi.mapv(|v| (1.0 - gamma) * v))
}

/// Thresholded assignment: the argmax class as a one-hot vector when the max
/// entry strictly exceeds `delta`, absent (ambiguous) otherwise. Ties break
/// to the lowest class index.
pub fn assign_pseudo_label(s: ArrayView1<f64>, delta: f64) -> Option<(usize, Array1<f64>)> {
    debug_assert!(delta > 0.0);
    let c = argmax(s);
    if s[c] > delta {
        let mut one_hot = Array1::zeros(s.len());
        one_hot[c] = 1.0;
        Some((c, one_hot))
    } else {
        None
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct DomainBank {
    /// Row per class; absent until first filled.
    rows: Vec<Option<Array1<f64>>>,
    /// Highest predictive confidence admitted so far, per class.
    best_confidence: Vec<f64>,
    /// Features admitted under the Ensemble policy, per class.
    candidates: Vec<Vec<Array1<f64>>>,
    /// Epoch of the last write to each row.
    row_written_epoch: Vec<Option<usize>>,
}

impl DomainBank {
    fn new(num_classes: usize) -> Self {
        DomainBank {
            rows: vec![None; num_classes],
            best_confidence: vec![0.0; num_classes],
            candidates: vec![Vec::new(); num_classes],
            row_written_epoch: vec![None; num_classes],
        }
    }
}

/// What happened to the bank and when; used to observe that representations
/// written at epoch e are first consumed at epoch e+1.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BankEvent {
    /// A scoring pass read the bank at `epoch`; `newest_write` is the most
    /// recent row-write epoch visible to that pass.
    Score { epoch: usize, newest_write: Option<usize> },
    Update { epoch: usize },
}

/// Per-unlabeled-domain class representations with admission bookkeeping.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClassRepBank {
    num_classes: usize,
    domains: BTreeMap<usize, DomainBank>,
    events: Vec<BankEvent>,
}

impl ClassRepBank {
    pub fn new(unlabeled_domain_ids: &[usize], num_classes: usize) -> Self {
        let domains = unlabeled_domain_ids
            .iter()
            .map(|&d| (d, DomainBank::new(num_classes)))
            .collect();
        ClassRepBank {
            num_classes,
            domains,
            events: Vec::new(),
        }
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    /// True once every class of the domain has a representation row.
    pub fn is_ready(&self, domain_id: usize) -> bool {
        self.domains
            .get(&domain_id)
            .map(|d| d.rows.iter().all(|r| r.is_some()))
            .unwrap_or(false)
    }

    pub fn row(&self, domain_id: usize, class: usize) -> Option<&Array1<f64>> {
        self.domains.get(&domain_id)?.rows[class].as_ref()
    }

    pub fn best_confidence(&self, domain_id: usize, class: usize) -> f64 {
        self.domains
            .get(&domain_id)
            .map(|d| d.best_confidence[class])
            .unwrap_or(0.0)
    }

    /// Cosine similarity of a feature against every class representation of
    /// its domain. Errors if any row is still absent (callers fall back to
    /// naive scoring) or if an operand has zero norm.
    pub fn similarity_vector(
        &self,
        feature: ArrayView1<f64>,
        domain_id: usize,
    ) -> Result<Array1<f64>> {
        let bank = self
            .domains
            .get(&domain_id)
            .ok_or(Error::BankNotReady { domain: domain_id })?;
        let mut psi = Array1::zeros(self.num_classes);
        for (c, row) in bank.rows.iter().enumerate() {
            let rep = row
                .as_ref()
                .ok_or(Error::BankNotReady { domain: domain_id })?;
            psi[c] = cosine(feature, rep.view())?;
        }
        Ok(psi)
    }

    /// Most recent row-write epoch across all domains.
    pub fn newest_write_epoch(&self) -> Option<usize> {
        self.domains
            .values()
            .flat_map(|d| d.row_written_epoch.iter().flatten())
            .max()
            .copied()
    }

    /// Record that a scoring pass at `epoch` is about to read the bank.
    pub fn record_score_pass(&mut self, epoch: usize) {
        self.events.push(BankEvent::Score {
            epoch,
            newest_write: self.newest_write_epoch(),
        });
    }

    pub fn events(&self) -> &[BankEvent] {
        &self.events
    }

    /// Apply one epoch's worth of scored samples under the given policy.
    ///
    /// One: for each (domain, predicted class), the row is replaced by the
    /// feature of the most confident sample of this epoch; classes with no
    /// samples keep their previous row.
    ///
    /// Ensemble: a sample is admitted to its predicted class only when its
    /// confidence strictly exceeds the best seen so far; the row is the mean
    /// of everything admitted.
    pub fn update(&mut self, epoch: usize, scored: &[ScoredSample], policy: RepPolicy) {
        self.events.push(BankEvent::Update { epoch });
        match policy {
            RepPolicy::One => {
                let mut winners: BTreeMap<(usize, usize), (f64, &ScoredSample)> = BTreeMap::new();
                for s in scored {
                    let c = argmax(s.q.view());
                    let conf = s.q[c];
                    match winners.get(&(s.domain_id, c)) {
                        Some(&(best, _)) if best >= conf => {}
                        _ => {
                            winners.insert((s.domain_id, c), (conf, s));
                        }
                    }
                }
                for ((d, c), (conf, s)) in winners {
                    if let Some(bank) = self.domains.get_mut(&d) {
                        bank.rows[c] = Some(s.feature.clone());
                        bank.row_written_epoch[c] = Some(epoch);
                        if conf > bank.best_confidence[c] {
                            bank.best_confidence[c] = conf;
                        }
                    }
                }
            }
            RepPolicy::Ensemble => {
                for s in scored {
                    let c = argmax(s.q.view());
                    let conf = s.q[c];
                    if let Some(bank) = self.domains.get_mut(&s.domain_id) {
                        if conf > bank.best_confidence[c] {
                            bank.best_confidence[c] = conf;
                            bank.candidates[c].push(s.feature.clone());
                            let n = bank.candidates[c].len() as f64;
                            let mut mean = Array1::zeros(s.feature.len());
                            for cand in &bank.candidates[c] {
                                mean += cand;
                            }
                            bank.rows[c] = Some(mean / n);
                            bank.row_written_epoch[c] = Some(epoch);
                        }
                    }
                }
            }
        }
    }

    /// Recompute every Ensemble row from its candidates; true when the stored
    /// rows agree within `tol`.
    pub fn rows_match_candidate_means(&self, tol: f64) -> bool {
        for bank in self.domains.values() {
            for (c, cands) in bank.candidates.iter().enumerate() {
                if cands.is_empty() {
                    continue;
                }
                let n = cands.len() as f64;
                let mut mean: Array1<f64> = Array1::zeros(cands[0].len());
                for cand in cands {
                    mean += cand;
                }
                mean /= n;
                match &bank.rows[c] {
                    Some(row) => {
                        if row
                            .iter()
                            .zip(mean.iter())
                            .any(|(a, b)| (a - b).abs() > tol)
                        {
                            return false;
                        }
                    }
                    None => return false,
                }
            }
        }
        true
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::arr1;
    use proptest::prelude::*;

    fn scored(id: u64, domain: usize, feature: &[f64], q: &[f64]) -> ScoredSample {
        ScoredSample {
            sample_id: SampleId(id),
            domain_id: domain,
            feature: arr1(feature),
            q: arr1(q),
            psi: None,
            s: arr1(q),
        }
    }

    #[test]
    fn similarity_self_orthogonal_antipodal() {
        let mut bank = ClassRepBank::new(&[1], 3);
        bank.update(
            0,
            &[
                scored(0, 1, &[1.0, 0.0], &[0.9, 0.05, 0.05]),
                scored(1, 1, &[0.0, 1.0], &[0.05, 0.9, 0.05]),
                scored(2, 1, &[-1.0, 0.0], &[0.05, 0.05, 0.9]),
            ],
            RepPolicy::One,
        );
        assert!(bank.is_ready(1));
        let psi = bank.similarity_vector(arr1(&[1.0, 0.0]).view(), 1).unwrap();
        assert_abs_diff_eq!(psi[0], 1.0, epsilon = 1e-12); // self
        assert_abs_diff_eq!(psi[1], 0.0, epsilon = 1e-12); // orthogonal
        assert_abs_diff_eq!(psi[2], -1.0, epsilon = 1e-12); // antipodal
    }

    #[test]
    fn similarity_requires_full_bank_and_nonzero_norms() {
        let mut bank = ClassRepBank::new(&[1], 2);
        assert!(matches!(
            bank.similarity_vector(arr1(&[1.0, 0.0]).view(), 1),
            Err(Error::BankNotReady { domain: 1 })
        ));
        bank.update(
            0,
            &[
                scored(0, 1, &[1.0, 0.0], &[0.8, 0.2]),
                scored(1, 1, &[0.0, 1.0], &[0.2, 0.8]),
            ],
            RepPolicy::One,
        );
        assert!(matches!(
            bank.similarity_vector(arr1(&[0.0, 0.0]).view(), 1),
            Err(Error::DegenerateVector)
        ));
    }

    #[test]
    fn blend_identity_cases_and_arithmetic() {
        let q = arr1(&[0.6, 0.4]);
        let psi = arr1(&[0.2, 0.8]);
        assert_eq!(blend_scores(q.view(), psi.view(), 1.0).unwrap(), q);
        assert_eq!(blend_scores(q.view(), psi.view(), 0.0).unwrap(), psi);
        let s = blend_scores(q.view(), psi.view(), 0.5).unwrap();
        assert_abs_diff_eq!(s[0], 0.4, epsilon = 1e-12);
        assert_abs_diff_eq!(s[1], 0.6, epsilon = 1e-12);
        assert!(blend_scores(q.view(), arr1(&[1.0]).view(), 0.5).is_err());
    }

    #[test]
    fn assignment_threshold_and_tie_break() {
        // reference threshold pairing: gamma 0.1, delta 0.24
        let (c, one_hot) = assign_pseudo_label(arr1(&[0.30, 0.10]).view(), 0.24).unwrap();
        assert_eq!(c, 0);
        assert_eq!(one_hot, arr1(&[1.0, 0.0]));
        assert!(assign_pseudo_label(arr1(&[0.20, 0.20]).view(), 0.24).is_none());
        let (c, _) = assign_pseudo_label(arr1(&[0.5, 0.5]).view(), 0.24).unwrap();
        assert_eq!(c, 0, "ties break to the lowest class index");
    }

    #[test]
    fn ensemble_singleton_then_admission() {
        let mut bank = ClassRepBank::new(&[1], 2);
        bank.update(
            0,
            &[
                scored(0, 1, &[1.0, 0.0], &[0.9, 0.1]),
                scored(1, 1, &[0.0, 2.0], &[0.1, 0.9]),
            ],
            RepPolicy::Ensemble,
        );
        assert_eq!(bank.row(1, 0).unwrap(), &arr1(&[1.0, 0.0]));
        assert_abs_diff_eq!(bank.best_confidence(1, 0), 0.9, epsilon = 1e-12);

        // lower confidence: no admission
        bank.update(1, &[scored(2, 1, &[5.0, 5.0], &[0.8, 0.2])], RepPolicy::Ensemble);
        assert_eq!(bank.row(1, 0).unwrap(), &arr1(&[1.0, 0.0]));

        // higher confidence: admitted, row becomes the mean
        bank.update(2, &[scored(3, 1, &[3.0, 0.0], &[0.95, 0.05])], RepPolicy::Ensemble);
        assert_eq!(bank.row(1, 0).unwrap(), &arr1(&[2.0, 0.0]));
        assert!(bank.rows_match_candidate_means(1e-12));
    }

    #[test]
    fn ensemble_replay_is_idempotent() {
        let epoch: Vec<ScoredSample> = vec![
            scored(0, 1, &[1.0, 0.0], &[0.7, 0.3]),
            scored(1, 1, &[0.0, 1.0], &[0.2, 0.8]),
            scored(2, 1, &[0.5, 0.5], &[0.6, 0.4]),
        ];
        let mut bank = ClassRepBank::new(&[1], 2);
        bank.update(0, &epoch, RepPolicy::Ensemble);
        let snapshot: Vec<Option<Array1<f64>>> =
            (0..2).map(|c| bank.row(1, c).cloned()).collect();
        bank.update(1, &epoch, RepPolicy::Ensemble);
        for (c, snap) in snapshot.iter().enumerate() {
            assert_eq!(bank.row(1, c), snap.as_ref());
        }
    }

    #[test]
    fn one_policy_replaces_rows_and_keeps_absent_classes() {
        let mut bank = ClassRepBank::new(&[1], 3);
        bank.update(0, &[scored(0, 1, &[1.0, 1.0], &[0.9, 0.05, 0.05])], RepPolicy::One);
        assert_eq!(bank.row(1, 0).unwrap(), &arr1(&[1.0, 1.0]));
        assert!(bank.row(1, 1).is_none());
        // new epoch replaces class 0 even at lower confidence; class 1 appears
        bank.update(
            1,
            &[
                scored(1, 1, &[2.0, 2.0], &[0.5, 0.3, 0.2]),
                scored(2, 1, &[0.0, 3.0], &[0.1, 0.8, 0.1]),
            ],
            RepPolicy::One,
        );
        assert_eq!(bank.row(1, 0).unwrap(), &arr1(&[2.0, 2.0]));
        assert_eq!(bank.row(1, 1).unwrap(), &arr1(&[0.0, 3.0]));
        assert!(bank.row(1, 2).is_none());
    }

    #[test]
    fn score_pass_sees_previous_epoch_writes() {
        let mut bank = ClassRepBank::new(&[1], 1);
        bank.update(0, &[scored(0, 1, &[1.0], &[1.0])], RepPolicy::Ensemble);
        bank.record_score_pass(1);
        bank.update(1, &[scored(1, 1, &[1.0], &[1.0])], RepPolicy::Ensemble);
        match bank.events()[1] {
            BankEvent::Score { epoch, newest_write } => {
                assert_eq!(epoch, 1);
                assert_eq!(newest_write, Some(0));
            }
            _ => panic!("expected a score event"),
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]

        /// Raising the threshold can only shrink the confident set.
        #[test]
        fn delta_monotonicity(
            s in proptest::collection::vec(-1.0f64..1.0, 2..8),
            d1 in 0.01f64..1.0,
            d2 in 0.01f64..1.0,
        ) {
            let (lo, hi) = if d1 <= d2 { (d1, d2) } else { (d2, d1) };
            let v = arr1(&s);
            let at_hi = assign_pseudo_label(v.view(), hi).is_some();
            let at_lo = assign_pseudo_label(v.view(), lo).is_some();
            prop_assert!(!at_hi || at_lo);
        }

        /// With gamma = 1 the blend equals q, so assignment agrees with naive
        /// pseudo-labeling for every sample.
        #[test]
        fn gamma_one_degenerates_to_naive(
            q in proptest::collection::vec(0.01f64..1.0, 3),
            psi in proptest::collection::vec(-1.0f64..1.0, 3),
            delta in 0.05f64..0.9,
        ) {
            let total: f64 = q.iter().sum();
            let qv = arr1(&q.iter().map(|v| v / total).collect::<Vec<_>>());
            let pv = arr1(&psi);
            let s = blend_scores(qv.view(), pv.view(), 1.0).unwrap();
            let blended = assign_pseudo_label(s.view(), delta);
            let naive = assign_pseudo_label(qv.view(), delta);
            match (blended, naive) {
                (Some((a, _)), Some((b, _))) => prop_assert_eq!(a, b),
                (None, None) => {}
                _ => prop_assert!(false, "confident sets differ"),
            }
        }

        /// Blended scores are the elementwise convex combination.
        #[test]
        fn blend_is_convex_combination(
            q in proptest::collection::vec(0.0f64..1.0, 4),
            psi in proptest::collection::vec(-1.0f64..1.0, 4),
            gamma in 0.0f64..1.0,
        ) {
            let s = blend_scores(arr1(&q).view(), arr1(&psi).view(), gamma).unwrap();
            for i in 0..4 {
                prop_assert!((s[i] - (gamma * q[i] + (1.0 - gamma) * psi[i])).abs() < 1e-12);
            }
        }

        /// Ensemble rows stay the mean of their candidates, and replaying an
        /// epoch never changes the bank.
        #[test]
        fn ensemble_mean_and_idempotence(
            confs in proptest::collection::vec(0.01f64..1.0, 1..20),
            feats in proptest::collection::vec(-5.0f64..5.0, 1..20),
        ) {
            let n = confs.len().min(feats.len());
            let epoch: Vec<ScoredSample> = (0..n)
                .map(|i| {
                    let c = confs[i].min(0.99);
                    scored(i as u64, 1, &[feats[i], 1.0], &[c, 1.0 - c])
                })
                .collect();
            let mut bank = ClassRepBank::new(&[1], 2);
            bank.update(0, &epoch, RepPolicy::Ensemble);
            prop_assert!(bank.rows_match_candidate_means(1e-9));
            let before: Vec<Option<Array1<f64>>> = (0..2).map(|c| bank.row(1, c).cloned()).collect();
            bank.update(1, &epoch, RepPolicy::Ensemble);
            let after: Vec<Option<Array1<f64>>> = (0..2).map(|c| bank.row(1, c).cloned()).collect();
            prop_assert_eq!(before, after);
            prop_assert!(bank.rows_match_candidate_means(1e-9));
        }
    }
}
