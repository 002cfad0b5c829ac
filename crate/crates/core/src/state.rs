//! The evolving training-set state: the labeled set, the ambiguous unlabeled
//! set and the pseudo-labeled set, with migration bookkeeping.
//!
//! Samples only ever move from the unlabeled set to the pseudo-labeled set;
//! the labeled set is constant and the total count never changes.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sample::{PseudoLabeledSample, Sample, SampleId};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainState {
    pub labeled_set: Vec<Sample>,
    pub unlabeled_set: Vec<Sample>,
    pub pseudo_set: Vec<PseudoLabeledSample>,
    pub epoch: usize,
}

impl TrainState {
    pub fn new(labeled: Vec<Sample>, unlabeled: Vec<Sample>) -> Self {
        TrainState {
            labeled_set: labeled,
            unlabeled_set: unlabeled,
            pseudo_set: Vec::new(),
            epoch: 0,
        }
    }

    pub fn num_labeled(&self) -> usize {
        self.labeled_set.len()
    }

    pub fn num_unlabeled(&self) -> usize {
        self.unlabeled_set.len()
    }

    pub fn num_pseudo(&self) -> usize {
        self.pseudo_set.len()
    }

    /// Total sample count; invariant under migration.
    pub fn total(&self) -> usize {
        self.num_labeled() + self.num_unlabeled() + self.num_pseudo()
    }

    /// Move confident samples out of the unlabeled set and append them to the
    /// pseudo-labeled set. Every migrated sample must currently be a member
    /// of the unlabeled set; pseudo-labels of previously migrated samples are
    /// never touched.
    pub fn migrate_confident(&mut self, confident: Vec<PseudoLabeledSample>) -> Result<()> {
        if confident.is_empty() {
            return Ok(());
        }
        let mut moving: HashSet<SampleId> = HashSet::with_capacity(confident.len());
        for c in &confident {
            if !c.is_one_hot() {
                return Err(Error::Identity(format!(
                    "sample {:?} carries a non-one-hot pseudo-label",
                    c.sample.id
                )));
            }
            if !moving.insert(c.sample.id) {
                return Err(Error::Identity(format!(
                    "sample {:?} appears twice in one migration",
                    c.sample.id
                )));
            }
        }
        let unlabeled_ids: HashSet<SampleId> =
            self.unlabeled_set.iter().map(|s| s.id).collect();
        for id in &moving {
            if !unlabeled_ids.contains(id) {
                return Err(Error::Identity(format!(
                    "sample {id:?} is not a member of the unlabeled set"
                )));
            }
        }
        self.unlabeled_set.retain(|s| !moving.contains(&s.id));
        self.pseudo_set.extend(confident);
        Ok(())
    }

    /// Pairwise disjointness of the three sets by sample identity.
    pub fn sets_disjoint(&self) -> bool {
        let mut seen = HashSet::with_capacity(self.total());
        self.labeled_set
            .iter()
            .map(|s| s.id)
            .chain(self.unlabeled_set.iter().map(|s| s.id))
            .chain(self.pseudo_set.iter().map(|p| p.sample.id))
            .all(|id| seen.insert(id))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn state(n_l: usize, n_u: usize) -> TrainState {
        let labeled = (0..n_l as u64)
            .map(|i| Sample::labeled(i, vec![i as f64], 0))
            .collect();
        let unlabeled = (0..n_u as u64)
            .map(|i| Sample::unlabeled(1000 + i, vec![i as f64], 1))
            .collect();
        TrainState::new(labeled, unlabeled)
    }

    fn promote(s: &Sample, epoch: usize) -> PseudoLabeledSample {
        PseudoLabeledSample::new(s.clone(), 0, 3, 0.5, epoch)
    }

    #[test]
    fn migration_cardinality() {
        let mut st = state(10, 100);
        let confident: Vec<_> = st.unlabeled_set[..30].iter().map(|s| promote(s, 0)).collect();
        st.migrate_confident(confident).unwrap();
        assert_eq!(st.num_unlabeled(), 70);
        assert_eq!(st.num_pseudo(), 30);
        assert_eq!(st.total(), 110);
        assert!(st.sets_disjoint());
    }

    #[test]
    fn empty_migration_is_identity() {
        let mut st = state(5, 20);
        let before = st.clone();
        st.migrate_confident(Vec::new()).unwrap();
        assert_eq!(st.num_unlabeled(), before.num_unlabeled());
        assert_eq!(st.num_pseudo(), before.num_pseudo());
    }

    #[test]
    fn double_migration_rejected() {
        let mut st = state(5, 40);
        let confident: Vec<_> = st.unlabeled_set[..30].iter().map(|s| promote(s, 0)).collect();
        let again = confident.clone();
        st.migrate_confident(confident).unwrap();
        let err = st.migrate_confident(again).unwrap_err();
        assert!(matches!(err, Error::Identity(_)));
        // state is untouched on error
        assert_eq!(st.num_unlabeled(), 10);
        assert_eq!(st.num_pseudo(), 30);
    }

    #[test]
    fn duplicate_in_one_batch_rejected() {
        let mut st = state(5, 10);
        let a = promote(&st.unlabeled_set[0], 0);
        let b = promote(&st.unlabeled_set[0], 0);
        assert!(st.migrate_confident(vec![a, b]).is_err());
    }

    #[test]
    fn total_constant_over_migration_sequence() {
        let mut st = state(8, 50);
        let initial = st.total();
        for chunk in [5usize, 10, 20] {
            let confident: Vec<_> = st.unlabeled_set[..chunk]
                .iter()
                .map(|s| promote(s, 1))
                .collect();
            st.migrate_confident(confident).unwrap();
            assert_eq!(st.total(), initial);
            assert!(st.sets_disjoint());
        }
        assert_eq!(st.num_pseudo(), 35);
    }
}
