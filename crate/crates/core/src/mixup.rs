//! Cross-domain interpolation of inputs, class labels and domain labels
//! between labeled and pseudo-labeled samples.
//!
//! One lambda is drawn per pair from Beta(alpha, alpha) and shared by the
//! input, class-label and domain-label interpolations of that pair.

use ndarray::{Array1, Array2};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution};

use crate::error::{Error, Result};
use crate::sample::{PseudoLabeledSample, Sample};

/// A batch of virtual samples. Row i of each array belongs to pair i.
#[derive(Debug, Clone)]
pub struct MixedBatch {
    pub x_tilde: Array2<f64>,
    /// Soft class labels; rows sum to 1.
    pub y_tilde: Array2<f64>,
    /// Soft domain labels; rows sum to 1.
    pub z_tilde: Array2<f64>,
    pub lam: Vec<f64>,
}

impl MixedBatch {
    pub fn empty(input_dim: usize, num_classes: usize, num_domains: usize) -> Self {
        MixedBatch {
            x_tilde: Array2::zeros((0, input_dim)),
            y_tilde: Array2::zeros((0, num_classes)),
            z_tilde: Array2::zeros((0, num_domains)),
            lam: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.lam.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lam.is_empty()
    }
}

/// Interpolation partner on the unlabeled side: a pseudo-labeled sample, or
/// (under the mix-all ablation) any unlabeled sample with its current argmax
/// label.
#[derive(Debug, Clone)]
pub struct MixPartner<'a> {
    pub input: &'a [f64],
    /// One-hot (or soft) class label of length C.
    pub label: Array1<f64>,
    pub domain_id: usize,
}

impl<'a> MixPartner<'a> {
    pub fn from_pseudo(p: &'a PseudoLabeledSample) -> Self {
        MixPartner {
            input: &p.sample.input,
            label: p.pseudo_label.clone(),
            domain_id: p.sample.domain_id,
        }
    }
}

/// `count` independent draws from Beta(alpha, alpha).
pub fn sample_lambda(alpha: f64, count: usize, rng: &mut ChaCha8Rng) -> Result<Vec<f64>> {
    if alpha <= 0.0 || !alpha.is_finite() {
        return Err(Error::config("alpha", "Beta parameter must be > 0"));
    }
    let beta = Beta::new(alpha, alpha)
        .map_err(|e| Error::config("alpha", format!("invalid Beta parameter: {e}")))?;
    Ok((0..count).map(|_| beta.sample(rng)).collect())
}

fn mix_into(
    x_row: &mut [f64],
    y_row: &mut [f64],
    z_row: &mut [f64],
    labeled_input: &[f64],
    labeled_class: usize,
    partner: &MixPartner<'_>,
    lam: f64,
) -> Result<()> {
    if partner.label.len() != y_row.len() {
        return Err(Error::shape(format!(
            "partner label has {} classes, expected {}",
            partner.label.len(),
            y_row.len()
        )));
    }
    if labeled_input.len() != partner.input.len() || labeled_input.len() != x_row.len() {
        return Err(Error::shape("mixup inputs differ in length".to_string()));
    }
    if labeled_class >= y_row.len() {
        return Err(Error::shape(format!(
            "class label {labeled_class} out of range for {} classes",
            y_row.len()
        )));
    }
    for (o, (&a, &b)) in x_row
        .iter_mut()
        .zip(labeled_input.iter().zip(partner.input.iter()))
    {
        *o = lam * a + (1.0 - lam) * b;
    }
    for (c, o) in y_row.iter_mut().enumerate() {
        let yl = if c == labeled_class { 1.0 } else { 0.0 };
        *o = lam * yl + (1.0 - lam) * partner.label[c];
    }
    for (d, o) in z_row.iter_mut().enumerate() {
        let zl = if d == 0 { 1.0 } else { 0.0 };
        let zu = if d == partner.domain_id { 1.0 } else { 0.0 };
        *o = lam * zl + (1.0 - lam) * zu;
    }
    Ok(())
}

/// Mix one labeled sample with one pseudo-labeled sample at the given lambda.
/// Returns the virtual (input, class label, domain label) triple.
pub fn mix_pair(
    labeled: &Sample,
    pseudo: &PseudoLabeledSample,
    lam: f64,
    num_domains: usize,
) -> Result<(Array1<f64>, Array1<f64>, Array1<f64>)> {
    debug_assert!((0.0..=1.0).contains(&lam));
    let class = labeled
        .class_label
        .ok_or_else(|| Error::Identity(format!("sample {:?} has no class label", labeled.id)))?;
    let num_classes = pseudo.pseudo_label.len();
    let mut x = Array1::zeros(labeled.input.len());
    let mut y = Array1::zeros(num_classes);
    let mut z = Array1::zeros(num_domains);
    let partner = MixPartner::from_pseudo(pseudo);
    mix_into(
        x.as_slice_mut().unwrap(),
        y.as_slice_mut().unwrap(),
        z.as_slice_mut().unwrap(),
        &labeled.input,
        class,
        &partner,
        lam,
    )?;
    Ok((x, y, z))
}

/// Pair every labeled sample with a partner drawn uniformly (with
/// replacement) from the pseudo batch, each pair at its own Beta(alpha,
/// alpha) lambda. Output size equals the labeled batch size; an empty pseudo
/// batch yields an empty mixed batch.
pub fn build_mixed_batch(
    labeled_batch: &[&Sample],
    pseudo_batch: &[MixPartner<'_>],
    alpha: f64,
    num_classes: usize,
    num_domains: usize,
    rng: &mut ChaCha8Rng,
) -> Result<MixedBatch> {
    let input_dim = labeled_batch
        .first()
        .map(|s| s.input.len())
        .or_else(|| pseudo_batch.first().map(|p| p.input.len()))
        .unwrap_or(0);
    if labeled_batch.is_empty() || pseudo_batch.is_empty() {
        return Ok(MixedBatch::empty(input_dim, num_classes, num_domains));
    }
    let n = labeled_batch.len();
    let lams = sample_lambda(alpha, n, rng)?;
    let mut x = Array2::zeros((n, input_dim));
    let mut y = Array2::zeros((n, num_classes));
    let mut z = Array2::zeros((n, num_domains));
    for (i, labeled) in labeled_batch.iter().enumerate() {
        let class = labeled.class_label.ok_or_else(|| {
            Error::Identity(format!("sample {:?} has no class label", labeled.id))
        })?;
        let partner = &pseudo_batch[rng.gen_range(0..pseudo_batch.len())];
        let (mut xr, mut yr, mut zr) = (x.row_mut(i), y.row_mut(i), z.row_mut(i));
        mix_into(
            xr.as_slice_mut().unwrap(),
            yr.as_slice_mut().unwrap(),
            zr.as_slice_mut().unwrap(),
            &labeled.input,
            class,
            partner,
            lams[i],
        )?;
    }
    Ok(MixedBatch {
        x_tilde: x,
        y_tilde: y,
        z_tilde: z,
        lam: lams,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;

    fn labeled(id: u64, input: &[f64], class: usize) -> Sample {
        Sample::labeled(id, input.to_vec(), class)
    }

    fn pseudo(id: u64, input: &[f64], class: usize, domain: usize, c: usize) -> PseudoLabeledSample {
        let s = Sample::unlabeled(id, input.to_vec(), domain);
        PseudoLabeledSample::new(s, class, c, 0.9, 0)
    }

    #[test]
    fn lambda_one_returns_labeled_sample() {
        let l = labeled(0, &[1.0, 2.0], 0);
        let p = pseudo(1, &[-1.0, -2.0], 1, 2, 2);
        let (x, y, z) = mix_pair(&l, &p, 1.0, 3).unwrap();
        assert_eq!(x.as_slice().unwrap(), &[1.0, 2.0]);
        assert_eq!(y.as_slice().unwrap(), &[1.0, 0.0]);
        assert_eq!(z.as_slice().unwrap(), &[1.0, 0.0, 0.0]);
    }

    #[test]
    fn lambda_zero_returns_pseudo_sample() {
        let l = labeled(0, &[1.0, 2.0], 0);
        let p = pseudo(1, &[-1.0, -2.0], 1, 2, 2);
        let (x, y, z) = mix_pair(&l, &p, 0.0, 3).unwrap();
        assert_eq!(x.as_slice().unwrap(), &[-1.0, -2.0]);
        assert_eq!(y.as_slice().unwrap(), &[0.0, 1.0]);
        assert_eq!(z.as_slice().unwrap(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn half_lambda_soft_labels() {
        let l = labeled(0, &[2.0], 0);
        let p = pseudo(1, &[0.0], 1, 1, 2);
        let (x, y, z) = mix_pair(&l, &p, 0.5, 2).unwrap();
        assert_abs_diff_eq!(x[0], 1.0, epsilon = 1e-12);
        assert_eq!(y.as_slice().unwrap(), &[0.5, 0.5]);
        assert_eq!(z.as_slice().unwrap(), &[0.5, 0.5]);
    }

    #[test]
    fn empty_pseudo_batch_yields_empty_output() {
        let l = labeled(0, &[1.0], 0);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let batch = build_mixed_batch(&[&l], &[], 0.2, 2, 2, &mut rng).unwrap();
        assert!(batch.is_empty());
    }

    #[test]
    fn output_size_matches_labeled_batch_with_replacement() {
        let labeled_set: Vec<Sample> = (0..128).map(|i| labeled(i, &[i as f64], 0)).collect();
        let pseudo_set: Vec<PseudoLabeledSample> =
            (0..40).map(|i| pseudo(1000 + i, &[-(i as f64)], 1, 1, 2)).collect();
        let refs: Vec<&Sample> = labeled_set.iter().collect();
        let partners: Vec<MixPartner> = pseudo_set.iter().map(MixPartner::from_pseudo).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let batch = build_mixed_batch(&refs, &partners, 0.2, 2, 2, &mut rng).unwrap();
        assert_eq!(batch.len(), 128);
        for row in batch.y_tilde.rows() {
            assert_abs_diff_eq!(row.sum(), 1.0, epsilon = 1e-12);
        }
        for row in batch.z_tilde.rows() {
            assert_abs_diff_eq!(row.sum(), 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn fixed_seed_reproduces_pairing_bitwise() {
        let labeled_set: Vec<Sample> = (0..16).map(|i| labeled(i, &[i as f64, 1.0], 1)).collect();
        let pseudo_set: Vec<PseudoLabeledSample> =
            (0..5).map(|i| pseudo(100 + i, &[0.5, -(i as f64)], 0, 1, 2)).collect();
        let refs: Vec<&Sample> = labeled_set.iter().collect();
        let partners: Vec<MixPartner> = pseudo_set.iter().map(MixPartner::from_pseudo).collect();
        let run = |seed: u64| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            build_mixed_batch(&refs, &partners, 0.2, 2, 2, &mut rng).unwrap()
        };
        let (a, b) = (run(3), run(3));
        assert_eq!(a.x_tilde, b.x_tilde);
        assert_eq!(a.lam, b.lam);
        let c = run(4);
        assert_ne!(a.lam, c.lam);
    }

    #[test]
    fn convexity_and_shared_lambda() {
        let l = labeled(0, &[4.0, -2.0], 0);
        let p = pseudo(1, &[0.0, 6.0], 1, 2, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let lams = sample_lambda(0.4, 200, &mut rng).unwrap();
        for lam in lams {
            let (x, y, z) = mix_pair(&l, &p, lam, 3).unwrap();
            for (i, &v) in x.iter().enumerate() {
                let (lo, hi) = (l.input[i].min(p.sample.input[i]), l.input[i].max(p.sample.input[i]));
                assert!(v >= lo - 1e-12 && v <= hi + 1e-12);
            }
            // recover lambda from the class labels and the domain labels
            let lam_y = y[0];
            let lam_z = z[0];
            assert_abs_diff_eq!(lam_y, lam_z, epsilon = 1e-9);
            assert_abs_diff_eq!(lam_y, lam, epsilon = 1e-12);
        }
    }

    #[test]
    fn beta_sampler_symmetry() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let draws = sample_lambda(0.2, 20_000, &mut rng).unwrap();
        let mean: f64 = draws.iter().sum::<f64>() / draws.len() as f64;
        assert!((mean - 0.5).abs() < 0.02, "mean of Beta(a,a) draws was {mean}");
        assert!(draws.iter().all(|&l| (0.0..=1.0).contains(&l)));
        assert!(sample_lambda(0.0, 1, &mut rng).is_err());
        assert!(sample_lambda(-1.0, 1, &mut rng).is_err());
    }

    #[test]
    fn arity_mismatch_is_shape_error() {
        let l = labeled(0, &[1.0], 0);
        let p = pseudo(1, &[0.0], 1, 1, 5); // 5 classes on the pseudo side
        let refs = [&l];
        let partners = [MixPartner::from_pseudo(&p)];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(build_mixed_batch(&refs, &partners, 0.2, 2, 2, &mut rng).is_err());
    }
}
