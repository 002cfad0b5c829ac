//! Samples and identities.
//!
//! A sample carries a raw input array, an optional class label and a domain
//! id. Identity is an opaque integer assigned at ingestion so set membership
//! checks never compare input arrays.

use ndarray::Array1;
use serde::{Deserialize, Serialize};

/// Opaque sample identity, unique within a dataset bundle.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SampleId(pub u64);

/// One training sample. Labeled source samples carry a class label and live
/// in domain 0; unlabeled source samples carry no label and a domain id >= 1.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Sample {
    pub id: SampleId,
    /// Flattened input values (a feature vector, or an image in channel-major
    /// layout as described by the dataset's input shape).
    pub input: Vec<f64>,
    pub class_label: Option<usize>,
    pub domain_id: usize,
}

impl Sample {
    pub fn labeled(id: u64, input: Vec<f64>, class_label: usize) -> Self {
        Sample {
            id: SampleId(id),
            input,
            class_label: Some(class_label),
            domain_id: 0,
        }
    }

    pub fn unlabeled(id: u64, input: Vec<f64>, domain_id: usize) -> Self {
        debug_assert!(domain_id >= 1, "unlabeled samples live in domains >= 1");
        Sample {
            id: SampleId(id),
            input,
            class_label: None,
            domain_id,
        }
    }

    /// Labeled samples have a class label and domain 0; unlabeled samples
    /// have no label and a domain id >= 1.
    pub fn is_consistent(&self) -> bool {
        match self.class_label {
            Some(_) => self.domain_id == 0,
            None => self.domain_id >= 1,
        }
    }
}

/// An unlabeled sample promoted to the pseudo-labeled set. The pseudo-label
/// is frozen at migration and never revisited.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PseudoLabeledSample {
    pub sample: Sample,
    /// One-hot vector of length C with exactly one entry equal to 1.
    pub pseudo_label: Array1<f64>,
    /// Blended score at assignment time; strictly above the threshold in
    /// force when the label was assigned.
    pub score_at_assignment: f64,
    pub epoch_assigned: usize,
}

impl PseudoLabeledSample {
    pub fn new(
        sample: Sample,
        class_index: usize,
        num_classes: usize,
        score: f64,
        epoch: usize,
    ) -> Self {
        let mut one_hot = Array1::zeros(num_classes);
        one_hot[class_index] = 1.0;
        PseudoLabeledSample {
            sample,
            pseudo_label: one_hot,
            score_at_assignment: score,
            epoch_assigned: epoch,
        }
    }

    /// Index of the single 1 entry.
    pub fn class_index(&self) -> usize {
        self.pseudo_label
            .iter()
            .position(|&v| v == 1.0)
            .expect("pseudo_label is one-hot")
    }

    pub fn is_one_hot(&self) -> bool {
        let ones = self.pseudo_label.iter().filter(|&&v| v == 1.0).count();
        let zeros = self.pseudo_label.iter().filter(|&&v| v == 0.0).count();
        ones == 1 && ones + zeros == self.pseudo_label.len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn consistency_rules() {
        assert!(Sample::labeled(0, vec![0.0], 3).is_consistent());
        assert!(Sample::unlabeled(1, vec![0.0], 2).is_consistent());
        let bad = Sample {
            id: SampleId(2),
            input: vec![],
            class_label: Some(1),
            domain_id: 1,
        };
        assert!(!bad.is_consistent());
    }

    #[test]
    fn pseudo_label_is_one_hot() {
        let s = Sample::unlabeled(7, vec![1.0, 2.0], 1);
        let p = PseudoLabeledSample::new(s, 2, 4, 0.9, 3);
        assert!(p.is_one_hot());
        assert_eq!(p.class_index(), 2);
        assert_eq!(p.pseudo_label.len(), 4);
    }
}
