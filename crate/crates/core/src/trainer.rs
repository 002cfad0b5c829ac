//! The per-epoch training loop: optimize on mixed and pure batches, run
//! inference on the ambiguous set, update the class-representation bank,
//! assign pseudo-labels and migrate the confident samples; plus the SGD
//! schedule, evaluation and checkpointing.
//!
//! Within an epoch the sample sets are read-only; migration happens once at
//! the end of the epoch, so pseudo-labels assigned at epoch e always score
//! against the bank produced at epoch e-1.

use std::collections::BTreeMap;

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{hex_prefix, TrainConfig};
use crate::dapl::{argmax, assign_pseudo_label, blend_scores, ClassRepBank, ScoredSample};
use crate::data::DatasetBundle;
use crate::error::{Error, Result};
use crate::losses::{assemble_objectives, entropy_loss, ramp_weight, row_entropy, LossReport};
use crate::metrics::{MetricsRecord, MetricsWriter, SCHEMA_VERSION};
use crate::mixup::{build_mixed_batch, MixPartner, MixedBatch};
use crate::model::{
    d_entropy_d_logits, d_soft_ce_d_logits, softmax, Activation, BackboneKind, BackboneSpec,
    BundleSpec, Head, InputShape, ModelBundle,
};
use crate::sample::{PseudoLabeledSample, Sample};
use crate::state::TrainState;

/// Diagnostics recorded once per epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochSummary {
    pub epoch: usize,
    /// Epoch means of the per-step losses.
    pub losses: LossReport,
    pub num_confident_new: usize,
    pub pseudo_set_size: usize,
    /// Only computable when ground truth for the unlabeled domains exists.
    pub pseudo_label_accuracy: Option<f64>,
    pub target_accuracy: Option<f64>,
}

/// Everything a finished run hands back.
pub struct TrainOutcome {
    pub model: ModelBundle,
    pub summaries: Vec<EpochSummary>,
    pub bank: ClassRepBank,
    pub state: TrainState,
}

// ---------------------------------------------------------------------------
// Optimizer
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
struct SgdMomentum {
    velocity: Vec<Vec<f64>>,
}

impl SgdMomentum {
    fn new(model: &mut ModelBundle) -> Self {
        let velocity = model
            .flat_params_mut()
            .iter()
            .map(|p| vec![0.0; p.len()])
            .collect();
        SgdMomentum { velocity }
    }

    fn step(&mut self, params: Vec<&mut [f64]>, grads: Vec<&mut [f64]>, lr: f64, momentum: f64) {
        for ((p, g), v) in params.into_iter().zip(grads).zip(self.velocity.iter_mut()) {
            for i in 0..p.len() {
                v[i] = momentum * v[i] + g[i];
                p[i] -= lr * v[i];
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Batch composition
// ---------------------------------------------------------------------------

/// Cycles through a shuffled index range, reshuffling on wrap, so every pool
/// member is visited about once per epoch.
struct Cycler {
    order: Vec<usize>,
    pos: usize,
}

impl Cycler {
    fn new(n: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut order: Vec<usize> = (0..n).collect();
        shuffle(&mut order, rng);
        Cycler { order, pos: 0 }
    }

    fn take(&mut self, k: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
        let mut out = Vec::with_capacity(k);
        if self.order.is_empty() {
            return out;
        }
        for _ in 0..k {
            if self.pos == self.order.len() {
                shuffle(&mut self.order, rng);
                self.pos = 0;
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}

fn shuffle(v: &mut [usize], rng: &mut ChaCha8Rng) {
    for i in (1..v.len()).rev() {
        let j = rng.gen_range(0..=i);
        v.swap(i, j);
    }
}

#[derive(Clone, Copy)]
enum PoolRef {
    Labeled(usize),
    Pseudo(usize),
}

fn rows_to_array(inputs: &[&[f64]]) -> Array2<f64> {
    let dim = inputs.first().map(|r| r.len()).unwrap_or(0);
    let mut out = Array2::zeros((inputs.len(), dim));
    for (i, row) in inputs.iter().enumerate() {
        for (j, &v) in row.iter().enumerate() {
            out[[i, j]] = v;
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Trainer
// ---------------------------------------------------------------------------

pub struct Trainer {
    pub config: TrainConfig,
    model: ModelBundle,
    bank: ClassRepBank,
    state: TrainState,
    optimizer: SgdMomentum,
    rng: ChaCha8Rng,
    epoch: usize,
    summaries: Vec<EpochSummary>,
    /// Cached argmax labels of the ambiguous set from the previous epoch's
    /// inference pass; only maintained under the mix-all ablation.
    mixall_labels: BTreeMap<u64, usize>,
}

impl Trainer {
    pub fn new(config: TrainConfig, data: &DatasetBundle) -> Result<Self> {
        config.validate()?;
        data.validate()?;
        if data.num_classes() != config.num_classes {
            return Err(Error::config(
                "num_classes",
                format!(
                    "config says {}, dataset has {}",
                    config.num_classes,
                    data.num_classes()
                ),
            ));
        }
        if data.labeled_samples().is_empty() {
            return Err(Error::EmptyDomain(data.labeled_domain.clone()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let backbone = BackboneSpec {
            input: data.input_shape,
            kind: match data.input_shape {
                InputShape::Vector { .. } => BackboneKind::Dense { hidden: config.hidden_dim },
                InputShape::Image { .. } => BackboneKind::Conv { base_channels: config.conv_channels },
            },
            feature_dim: config.feature_dim,
            activation: Activation::Tanh,
        };
        let eval_head = if config.use_dual_classifier {
            Head::Generalizable
        } else {
            Head::Predictive
        };
        let spec = BundleSpec {
            backbone,
            num_classes: config.num_classes,
            num_domains: data.num_training_domains(),
            disc_hidden: config.disc_hidden,
            eval_head,
        };
        let mut model = ModelBundle::new(spec, &mut rng)?;
        let optimizer = SgdMomentum::new(&mut model);
        let unlabeled_ids: Vec<usize> = (1..data.num_training_domains()).collect();
        let bank = ClassRepBank::new(&unlabeled_ids, config.num_classes);
        Ok(Trainer {
            config,
            model,
            bank,
            state: data.initial_state(),
            optimizer,
            rng,
            epoch: 0,
            summaries: Vec::new(),
            mixall_labels: BTreeMap::new(),
        })
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn summaries(&self) -> &[EpochSummary] {
        &self.summaries
    }

    pub fn state(&self) -> &TrainState {
        &self.state
    }

    pub fn bank(&self) -> &ClassRepBank {
        &self.bank
    }

    pub fn model(&self) -> &ModelBundle {
        &self.model
    }

    fn effective_lr(&self) -> f64 {
        let decays = self
            .config
            .lr_decay_epochs
            .iter()
            .filter(|&&d| self.epoch >= d)
            .count();
        self.config.lr / 10f64.powi(decays as i32)
    }

    fn needs_unlabeled_rows(&self) -> bool {
        self.config.use_adversarial || self.config.use_entropy
    }

    /// Run all remaining epochs, emitting metrics as we go.
    pub fn run(&mut self, data: &DatasetBundle, mut metrics: Option<&mut MetricsWriter>) -> Result<()> {
        while self.epoch < self.config.epochs {
            self.run_one_epoch(data, metrics.as_deref_mut())?;
        }
        if let Some(m) = metrics {
            m.flush()?;
        }
        Ok(())
    }

    /// Advance by exactly one epoch.
    pub fn run_one_epoch(
        &mut self,
        data: &DatasetBundle,
        mut metrics: Option<&mut MetricsWriter>,
    ) -> Result<()> {
        let epoch = self.epoch;
        let ramp = ramp_weight(epoch, self.config.ramp_epochs());
        let lr = self.effective_lr();
        let num_domains = self.model.spec.num_domains;
        let num_classes = self.config.num_classes;
        let batch_size = self.config.batch_size;
        let use_pseudo_labels = self.config.use_pseudo_labels;

        let labeled_pool: Vec<PoolRef> = (0..self.state.num_labeled())
            .map(PoolRef::Labeled)
            .chain((0..self.state.num_pseudo()).map(PoolRef::Pseudo))
            .collect();
        let steps = self.state.total().div_ceil(batch_size);
        let mut labeled_cycler = Cycler::new(labeled_pool.len(), &mut self.rng);
        let mut unlabeled_cycler = Cycler::new(self.state.num_unlabeled(), &mut self.rng);

        let mut loss_sum = LossReport::default();
        for step in 0..steps {
            let (labeled_k, unlabeled_k) =
                if self.needs_unlabeled_rows() && self.state.num_unlabeled() > 0 {
                    (batch_size.div_ceil(2), batch_size / 2)
                } else {
                    (batch_size, 0)
                };
            let labeled_half: Vec<PoolRef> = labeled_cycler
                .take(labeled_k, &mut self.rng)
                .into_iter()
                .map(|i| labeled_pool[i])
                .collect();
            let unlabeled_half: Vec<usize> = unlabeled_cycler.take(unlabeled_k, &mut self.rng);

            let mixed = self.build_step_mixed_batch(&labeled_half, num_classes, num_domains)?;
            let report = self.optimize_step(&labeled_half, &unlabeled_half, &mixed, ramp, lr)?;
            if !report.is_finite() {
                return Err(Error::NonFinite {
                    epoch,
                    step,
                    report: Box::new(report),
                });
            }
            if let Some(m) = metrics.as_deref_mut() {
                m.write(&MetricsRecord::Step {
                    schema: SCHEMA_VERSION,
                    epoch,
                    step,
                    losses: report.clone(),
                })?;
            }
            add_report(&mut loss_sum, &report);
        }
        let mean_losses = scale_report(&loss_sum, 1.0 / steps.max(1) as f64);

        // end of epoch: inference on the ambiguous set, bank update,
        // assignment, migration
        let num_confident_new = if use_pseudo_labels && !self.state.unlabeled_set.is_empty() {
            self.label_assignment_pass(epoch)?
        } else {
            0
        };

        let pseudo_label_accuracy = data
            .hidden_labels
            .pseudo_label_accuracy(&self.state.pseudo_set);
        let target_accuracy = match data.target_samples() {
            Some(samples) if !samples.is_empty() => Some(evaluate(&self.model, samples)?),
            _ => None,
        };

        let summary = EpochSummary {
            epoch,
            losses: mean_losses,
            num_confident_new,
            pseudo_set_size: self.state.num_pseudo(),
            pseudo_label_accuracy,
            target_accuracy,
        };
        if let Some(m) = metrics.as_deref_mut() {
            m.write(&MetricsRecord::Epoch {
                schema: SCHEMA_VERSION,
                summary: summary.clone(),
            })?;
        }
        self.summaries.push(summary);
        self.epoch += 1;
        self.state.epoch = self.epoch;
        Ok(())
    }

    /// Mixed batch for one step: the labeled-set members of the batch,
    /// paired against pseudo-labeled partners (or, under mix-all, against
    /// every unlabeled-origin sample with its cached argmax label).
    fn build_step_mixed_batch(
        &mut self,
        labeled_half: &[PoolRef],
        num_classes: usize,
        num_domains: usize,
    ) -> Result<MixedBatch> {
        let input_dim = self.model.spec.backbone.input.flat_dim();
        if !self.config.use_mixup {
            return Ok(MixedBatch::empty(input_dim, num_classes, num_domains));
        }
        let pure_labeled: Vec<&Sample> = labeled_half
            .iter()
            .filter_map(|r| match r {
                PoolRef::Labeled(i) => Some(&self.state.labeled_set[*i]),
                PoolRef::Pseudo(_) => None,
            })
            .collect();
        let mut partners: Vec<MixPartner<'_>> = self
            .state
            .pseudo_set
            .iter()
            .map(MixPartner::from_pseudo)
            .collect();
        if self.config.mixup_all {
            for s in &self.state.unlabeled_set {
                if let Some(&class) = self.mixall_labels.get(&s.id.0) {
                    let mut label = Array1::zeros(num_classes);
                    label[class] = 1.0;
                    partners.push(MixPartner {
                        input: &s.input,
                        label,
                        domain_id: s.domain_id,
                    });
                }
            }
        }
        build_mixed_batch(
            &pure_labeled,
            &partners,
            self.config.alpha,
            num_classes,
            num_domains,
            &mut self.rng,
        )
    }

    /// One optimization step over the composed batch. Accumulates gradients
    /// for both objectives in a single backward pass (gradient reversal at
    /// the ramp weight) and applies SGD with momentum.
    fn optimize_step(
        &mut self,
        labeled_half: &[PoolRef],
        unlabeled_half: &[usize],
        mixed: &MixedBatch,
        ramp: f64,
        lr: f64,
    ) -> Result<LossReport> {
        let cfg = &self.config;
        let num_domains = self.model.spec.num_domains;
        let num_classes = cfg.num_classes;
        let mut grads = self.model.zero_grads();
        let mut report = LossReport {
            ramp,
            ..Default::default()
        };

        // --- pure batch, classification ---
        let inputs: Vec<&[f64]> = labeled_half
            .iter()
            .map(|r| match r {
                PoolRef::Labeled(i) => self.state.labeled_set[*i].input.as_slice(),
                PoolRef::Pseudo(i) => self.state.pseudo_set[*i].sample.input.as_slice(),
            })
            .collect();
        let x_pure = rows_to_array(&inputs);
        let cache_pure = self.model.features_cached(&x_pure)?;
        {
            let logits = self.model.class_logits(&cache_pure.features, Head::Predictive);
            let probs = softmax(&logits);
            // separately normalized means over the labeled and pseudo rows
            let n_l = labeled_half
                .iter()
                .filter(|r| matches!(r, PoolRef::Labeled(_)))
                .count();
            let n_p = labeled_half.len() - n_l;
            let mut d_logits = Array2::zeros(probs.raw_dim());
            let mut loss_l = 0.0;
            let mut loss_p = 0.0;
            for (row, r) in labeled_half.iter().enumerate() {
                let (target_class, soft): (Option<usize>, Option<&Array1<f64>>) = match r {
                    PoolRef::Labeled(i) => {
                        (Some(self.state.labeled_set[*i].class_label.expect("labeled")), None)
                    }
                    PoolRef::Pseudo(i) => (None, Some(&self.state.pseudo_set[*i].pseudo_label)),
                };
                let norm = match r {
                    PoolRef::Labeled(_) => n_l as f64,
                    PoolRef::Pseudo(_) => n_p as f64,
                };
                match (target_class, soft) {
                    (Some(c), _) => {
                        loss_l -= probs[[row, c]].max(f64::MIN_POSITIVE).ln() / norm;
                        for j in 0..num_classes {
                            let t = if j == c { 1.0 } else { 0.0 };
                            d_logits[[row, j]] = (probs[[row, j]] - t) / norm;
                        }
                    }
                    (None, Some(t)) => {
                        for j in 0..num_classes {
                            if t[j] != 0.0 {
                                loss_p -= t[j] * probs[[row, j]].max(f64::MIN_POSITIVE).ln() / norm;
                            }
                            d_logits[[row, j]] = (probs[[row, j]] - t[j]) / norm;
                        }
                    }
                    _ => unreachable!(),
                }
            }
            report.cls = loss_l + loss_p;
            self.model
                .backward_class(&cache_pure, Head::Predictive, &d_logits, &mut grads);
        }

        // --- ambiguous rows: entropy, and features for the adversarial loss ---
        let cache_unl = if unlabeled_half.is_empty() {
            None
        } else {
            let inputs: Vec<&[f64]> = unlabeled_half
                .iter()
                .map(|&i| self.state.unlabeled_set[i].input.as_slice())
                .collect();
            Some(self.model.features_cached(&rows_to_array(&inputs))?)
        };

        if cfg.use_entropy && ramp > 0.0 {
            if let Some(cache) = &cache_unl {
                let logits = self.model.class_logits(&cache.features, Head::Predictive);
                let probs = softmax(&logits);
                report.ent = entropy_loss(probs.view());
                let d_logits = d_entropy_d_logits(&probs).mapv(|v| v * ramp);
                self.model
                    .backward_class(cache, Head::Predictive, &d_logits, &mut grads);
            }
        }

        // --- adversarial loss over every row of the step ---
        if cfg.use_adversarial {
            let n_total = labeled_half.len() + unlabeled_half.len();
            let mut adv = 0.0;
            {
                let (logits, hidden) = self.model.domain_logits_cached(&cache_pure.features);
                let probs = softmax(&logits);
                let mut targets = Array2::zeros((labeled_half.len(), num_domains));
                for (row, r) in labeled_half.iter().enumerate() {
                    let d = match r {
                        PoolRef::Labeled(i) => self.state.labeled_set[*i].domain_id,
                        PoolRef::Pseudo(i) => self.state.pseudo_set[*i].sample.domain_id,
                    };
                    targets[[row, d]] = 1.0;
                    adv -= probs[[row, d]].max(f64::MIN_POSITIVE).ln() / n_total as f64;
                }
                let d_logits = (&probs - &targets) / n_total as f64;
                self.model
                    .backward_domain(&cache_pure, &hidden, &d_logits, ramp, &mut grads);
            }
            if let Some(cache) = &cache_unl {
                let (logits, hidden) = self.model.domain_logits_cached(&cache.features);
                let probs = softmax(&logits);
                let mut targets = Array2::zeros((unlabeled_half.len(), num_domains));
                for (row, &i) in unlabeled_half.iter().enumerate() {
                    let d = self.state.unlabeled_set[i].domain_id;
                    targets[[row, d]] = 1.0;
                    adv -= probs[[row, d]].max(f64::MIN_POSITIVE).ln() / n_total as f64;
                }
                let d_logits = (&probs - &targets) / n_total as f64;
                self.model
                    .backward_domain(cache, &hidden, &d_logits, ramp, &mut grads);
            }
            report.adv = adv;
        }

        // --- mixed batch ---
        if !mixed.is_empty() {
            let cache_mix = self.model.features_cached(&mixed.x_tilde)?;
            let mix_head = if cfg.use_dual_classifier {
                Head::Generalizable
            } else {
                Head::Predictive
            };
            let logits = self.model.class_logits(&cache_mix.features, mix_head);
            let probs = softmax(&logits);
            let mut cls_mix = 0.0;
            for (p, t) in probs.outer_iter().zip(mixed.y_tilde.outer_iter()) {
                for (pv, &tv) in p.iter().zip(t.iter()) {
                    if tv != 0.0 {
                        cls_mix -= tv * pv.max(f64::MIN_POSITIVE).ln();
                    }
                }
            }
            report.cls_mix = cls_mix / mixed.len() as f64;
            let d_logits = d_soft_ce_d_logits(&probs, &mixed.y_tilde);
            self.model
                .backward_class(&cache_mix, mix_head, &d_logits, &mut grads);

            if cfg.use_adversarial && cfg.use_adv_mix {
                let (logits, hidden) = self.model.domain_logits_cached(&cache_mix.features);
                let probs = softmax(&logits);
                let mut adv_mix = 0.0;
                for (p, t) in probs.outer_iter().zip(mixed.z_tilde.outer_iter()) {
                    for (pv, &tv) in p.iter().zip(t.iter()) {
                        if tv != 0.0 {
                            adv_mix -= tv * pv.max(f64::MIN_POSITIVE).ln();
                        }
                    }
                }
                report.adv_mix = adv_mix / mixed.len() as f64;
                let d_logits = d_soft_ce_d_logits(&probs, &mixed.z_tilde);
                self.model
                    .backward_domain(&cache_mix, &hidden, &d_logits, ramp, &mut grads);
            }
        }

        let (total_model, total_discriminator) = assemble_objectives(&report);
        report.total_model = total_model;
        report.total_discriminator = total_discriminator;

        self.optimizer
            .step(self.model.flat_params_mut(), grads.flat(), lr, cfg.momentum);
        Ok(report)
    }

    /// Inference on the ambiguous set, scoring against the bank state left by
    /// the previous epoch, then bank update, assignment and migration.
    /// Returns the number of newly confident samples.
    fn label_assignment_pass(&mut self, epoch: usize) -> Result<usize> {
        let use_dapl = self.config.use_dapl;
        let rep_policy = self.config.rep_policy;
        let delta = self.config.delta;
        let num_classes = self.config.num_classes;
        let mixup_all = self.config.mixup_all;
        let scored = self.score_unlabeled(epoch)?;
        if use_dapl {
            self.bank.update(epoch, &scored, rep_policy);
        }
        // scored rows are in unlabeled_set order
        debug_assert_eq!(scored.len(), self.state.unlabeled_set.len());
        let mut confident = Vec::new();
        for (s, sample) in scored.iter().zip(self.state.unlabeled_set.iter()) {
            debug_assert_eq!(s.sample_id, sample.id);
            // under domain-aware labeling, a domain whose representation list
            // still has absent rows assigns no labels this epoch; its samples
            // were scored with s = q only for the bank update
            if use_dapl && s.psi.is_none() {
                continue;
            }
            if let Some((class, _)) = assign_pseudo_label(s.s.view(), delta) {
                confident.push(PseudoLabeledSample::new(
                    sample.clone(),
                    class,
                    num_classes,
                    s.s[class],
                    epoch,
                ));
            }
        }
        let n_new = confident.len();
        self.state.migrate_confident(confident)?;
        if mixup_all {
            self.mixall_labels.clear();
            for s in &scored {
                self.mixall_labels
                    .insert(s.sample_id.0, argmax(s.q.view()));
            }
            // drop entries that just migrated
            let remaining: std::collections::HashSet<u64> =
                self.state.unlabeled_set.iter().map(|s| s.id.0).collect();
            self.mixall_labels.retain(|id, _| remaining.contains(id));
        }
        Ok(n_new)
    }

    /// Evaluation-mode inference over the ambiguous set: predictive-head
    /// probabilities and features, blended with bank similarities where the
    /// bank is ready.
    fn score_unlabeled(&mut self, epoch: usize) -> Result<Vec<ScoredSample>> {
        let cfg = &self.config;
        if cfg.use_dapl {
            self.bank.record_score_pass(epoch);
        }
        let mut scored = Vec::with_capacity(self.state.num_unlabeled());
        for chunk in self.state.unlabeled_set.chunks(512) {
            let inputs: Vec<&[f64]> = chunk.iter().map(|s| s.input.as_slice()).collect();
            let x = rows_to_array(&inputs);
            let cache = self.model.features_cached(&x)?;
            let probs = softmax(&self.model.class_logits(&cache.features, Head::Predictive));
            for (row, sample) in chunk.iter().enumerate() {
                let q = probs.row(row).to_owned();
                let feature = cache.features.row(row).to_owned();
                let psi = if cfg.use_dapl && self.bank.is_ready(sample.domain_id) {
                    // degenerate features fall back to naive scoring
                    match self.bank.similarity_vector(feature.view(), sample.domain_id) {
                        Ok(psi) => Some(psi),
                        Err(Error::DegenerateVector) => None,
                        Err(e) => return Err(e),
                    }
                } else {
                    None
                };
                let s = match &psi {
                    Some(psi) => blend_scores(q.view(), psi.view(), cfg.gamma)?,
                    None => q.clone(),
                };
                scored.push(ScoredSample {
                    sample_id: sample.id,
                    domain_id: sample.domain_id,
                    feature,
                    q,
                    psi,
                    s,
                });
            }
        }
        Ok(scored)
    }

    // -----------------------------------------------------------------------
    // Checkpointing
    // -----------------------------------------------------------------------

    pub fn checkpoint(&mut self) -> Checkpoint {
        let names: Vec<String> = self.model.param_names().iter().map(|s| s.to_string()).collect();
        let shapes = self.model.param_shapes();
        let mut model_params = BTreeMap::new();
        let mut momentum = BTreeMap::new();
        let velocity = self.optimizer.velocity.clone();
        for (((name, shape), slice), vel) in names
            .iter()
            .zip(shapes.iter())
            .zip(self.model.flat_params_mut())
            .zip(velocity.iter())
        {
            model_params.insert(
                name.clone(),
                ArrayEntry { shape: shape.clone(), data: slice.to_vec() },
            );
            momentum.insert(
                name.clone(),
                ArrayEntry { shape: shape.clone(), data: vel.clone() },
            );
        }
        Checkpoint {
            format_version: 1,
            config_hash: self.config.hash(),
            epoch: self.epoch,
            model_spec: self.model.spec.clone(),
            model_params,
            momentum,
            bank: self.bank.clone(),
            state: self.state.clone(),
            rng: self.rng.clone(),
            summaries: self.summaries.clone(),
            mixall_labels: self.mixall_labels.clone(),
        }
    }

    pub fn save_checkpoint(&mut self, path: &std::path::Path) -> Result<()> {
        let checkpoint = self.checkpoint();
        let json = serde_json::to_string(&checkpoint)?;
        std::fs::write(path, json)?;
        Ok(())
    }

    /// Rebuild a trainer from a checkpoint. The current config must hash to
    /// the value recorded at save time.
    pub fn resume(checkpoint: Checkpoint, config: TrainConfig) -> Result<Self> {
        let expected = config.hash();
        if checkpoint.config_hash != expected {
            return Err(Error::ConfigHashMismatch {
                expected,
                found: checkpoint.config_hash,
            });
        }
        let mut seed_rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut model = ModelBundle::new(checkpoint.model_spec.clone(), &mut seed_rng)?;
        let names: Vec<String> = model.param_names().iter().map(|s| s.to_string()).collect();
        let mut velocity = Vec::with_capacity(names.len());
        for (name, slice) in names.iter().zip(model.flat_params_mut()) {
            let entry = checkpoint
                .model_params
                .get(name)
                .ok_or_else(|| Error::CheckpointLoad(format!("missing component `{name}`")))?;
            if entry.data.len() != slice.len() {
                return Err(Error::CheckpointLoad(format!(
                    "component `{name}` has {} values, expected {}",
                    entry.data.len(),
                    slice.len()
                )));
            }
            slice.copy_from_slice(&entry.data);
            let vel = checkpoint
                .momentum
                .get(name)
                .ok_or_else(|| Error::CheckpointLoad(format!("missing momentum for `{name}`")))?;
            if vel.data.len() != slice.len() {
                return Err(Error::CheckpointLoad(format!(
                    "momentum `{name}` has {} values, expected {}",
                    vel.data.len(),
                    slice.len()
                )));
            }
            velocity.push(vel.data.clone());
        }
        Ok(Trainer {
            config,
            model,
            bank: checkpoint.bank,
            state: checkpoint.state,
            optimizer: SgdMomentum { velocity },
            rng: checkpoint.rng,
            epoch: checkpoint.epoch,
            summaries: checkpoint.summaries,
            mixall_labels: checkpoint.mixall_labels,
        })
    }

    pub fn load_checkpoint(path: &std::path::Path) -> Result<Checkpoint> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text)
            .map_err(|e| Error::CheckpointLoad(format!("corrupt checkpoint: {e}")))
    }

    pub fn into_outcome(self) -> TrainOutcome {
        TrainOutcome {
            model: self.model,
            summaries: self.summaries,
            bank: self.bank,
            state: self.state,
        }
    }
}

/// Serialized run state: the model parameter manifest (component name to
/// array), optimizer state, bank, set memberships and RNG state.
#[derive(Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub config_hash: String,
    pub epoch: usize,
    pub model_spec: BundleSpec,
    pub model_params: BTreeMap<String, ArrayEntry>,
    pub momentum: BTreeMap<String, ArrayEntry>,
    pub bank: ClassRepBank,
    pub state: TrainState,
    pub rng: ChaCha8Rng,
    pub summaries: Vec<EpochSummary>,
    pub mixall_labels: BTreeMap<u64, usize>,
}

#[derive(Serialize, Deserialize)]
pub struct ArrayEntry {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// Hash of a serialized checkpoint; determinism checks compare these.
pub fn checkpoint_hash(checkpoint: &Checkpoint) -> Result<String> {
    let json = serde_json::to_string(checkpoint)?;
    let digest = Sha256::digest(json.as_bytes());
    Ok(hex_prefix(&digest, 32))
}

/// Rebuild just the model from a checkpoint, for evaluation without the full
/// training state.
pub fn model_from_checkpoint(checkpoint: &Checkpoint) -> Result<ModelBundle> {
    let mut seed_rng = ChaCha8Rng::seed_from_u64(0);
    let mut model = ModelBundle::new(checkpoint.model_spec.clone(), &mut seed_rng)?;
    let names: Vec<String> = model.param_names().iter().map(|s| s.to_string()).collect();
    for (name, slice) in names.iter().zip(model.flat_params_mut()) {
        let entry = checkpoint
            .model_params
            .get(name)
            .ok_or_else(|| Error::CheckpointLoad(format!("missing component `{name}`")))?;
        if entry.data.len() != slice.len() {
            return Err(Error::CheckpointLoad(format!(
                "component `{name}` has {} values, expected {}",
                entry.data.len(),
                slice.len()
            )));
        }
        slice.copy_from_slice(&entry.data);
    }
    Ok(model)
}

/// Run a full training job and return the final-epoch model (no early
/// stopping: the target domain is unseen, so there is no selection signal).
pub fn train(
    config: TrainConfig,
    data: &DatasetBundle,
    metrics: Option<&mut MetricsWriter>,
) -> Result<TrainOutcome> {
    let mut trainer = Trainer::new(config, data)?;
    trainer.run(data, metrics)?;
    Ok(trainer.into_outcome())
}

/// Top-1 accuracy of the evaluation head over a labeled sample list.
pub fn evaluate(model: &ModelBundle, samples: &[Sample]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::EmptyDomain("evaluation set is empty".to_string()));
    }
    let head = model.spec.eval_head;
    let mut correct = 0usize;
    for chunk in samples.chunks(512) {
        let inputs: Vec<&[f64]> = chunk.iter().map(|s| s.input.as_slice()).collect();
        let probs = model.forward_class(&rows_to_array(&inputs), head)?;
        for (row, sample) in chunk.iter().enumerate() {
            let truth = sample.class_label.ok_or_else(|| {
                Error::Identity(format!("sample {:?} has no ground-truth label", sample.id))
            })?;
            if argmax(probs.row(row)) == truth {
                correct += 1;
            }
        }
    }
    Ok(correct as f64 / samples.len() as f64)
}

/// Mean prediction entropy of the predictive head over a sample list;
/// diagnostic only.
pub fn mean_prediction_entropy(model: &ModelBundle, samples: &[Sample]) -> Result<f64> {
    if samples.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for chunk in samples.chunks(512) {
        let inputs: Vec<&[f64]> = chunk.iter().map(|s| s.input.as_slice()).collect();
        let probs = model.forward_class(&rows_to_array(&inputs), Head::Predictive)?;
        for row in probs.rows() {
            total += row_entropy(row);
        }
    }
    Ok(total / samples.len() as f64)
}

fn add_report(acc: &mut LossReport, r: &LossReport) {
    acc.cls += r.cls;
    acc.adv += r.adv;
    acc.cls_mix += r.cls_mix;
    acc.adv_mix += r.adv_mix;
    acc.ent += r.ent;
    acc.ramp += r.ramp;
    acc.total_model += r.total_model;
    acc.total_discriminator += r.total_discriminator;
}

fn scale_report(r: &LossReport, k: f64) -> LossReport {
    LossReport {
        cls: r.cls * k,
        adv: r.adv * k,
        cls_mix: r.cls_mix * k,
        adv_mix: r.adv_mix * k,
        ent: r.ent * k,
        ramp: r.ramp * k,
        total_model: r.total_model * k,
        total_discriminator: r.total_discriminator * k,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, SyntheticSpec};

    fn tiny_spec() -> SyntheticSpec {
        SyntheticSpec {
            samples_per_class_per_domain: 8,
            num_classes: 3,
            ..Default::default()
        }
    }

    fn tiny_config() -> TrainConfig {
        TrainConfig {
            num_classes: 3,
            epochs: 3,
            batch_size: 16,
            hidden_dim: 16,
            feature_dim: 8,
            disc_hidden: 8,
            ..Default::default()
        }
    }

    #[test]
    fn zero_epochs_returns_initialized_model() {
        let data = generate_synthetic(&tiny_spec()).unwrap();
        let config = TrainConfig { epochs: 0, ..tiny_config() };
        let outcome = train(config, &data, None).unwrap();
        assert!(outcome.summaries.is_empty());
        assert_eq!(outcome.state.num_pseudo(), 0);
        let acc = evaluate(&outcome.model, data.target_samples().unwrap()).unwrap();
        assert!((0.0..=1.0).contains(&acc));
    }

    #[test]
    fn pseudo_set_grows_monotonically_and_sets_stay_disjoint() {
        let data = generate_synthetic(&tiny_spec()).unwrap();
        let outcome = train(tiny_config(), &data, None).unwrap();
        let mut prev = 0;
        for s in &outcome.summaries {
            assert!(s.pseudo_set_size >= prev);
            prev = s.pseudo_set_size;
        }
        assert!(outcome.state.sets_disjoint());
        assert_eq!(
            outcome.state.total(),
            data.initial_state().total(),
            "migration must conserve the total"
        );
    }

    #[test]
    fn seed_determinism_of_summaries() {
        let data = generate_synthetic(&tiny_spec()).unwrap();
        let a = train(tiny_config(), &data, None).unwrap();
        let b = train(tiny_config(), &data, None).unwrap();
        assert_eq!(a.summaries, b.summaries);
        let mut other = tiny_config();
        other.seed = 99;
        let c = train(other, &data, None).unwrap();
        assert_ne!(
            a.summaries, c.summaries,
            "different seeds should diverge somewhere"
        );
    }

    #[test]
    fn evaluate_counting_oracle() {
        let data = generate_synthetic(&tiny_spec()).unwrap();
        let config = TrainConfig { epochs: 0, ..tiny_config() };
        let outcome = train(config, &data, None).unwrap();
        // hand-build a set where we can count matches
        let model = outcome.model;
        let samples: Vec<Sample> = data.target_samples().unwrap()[..10].to_vec();
        let inputs: Vec<&[f64]> = samples.iter().map(|s| s.input.as_slice()).collect();
        let probs = model
            .forward_class(&rows_to_array(&inputs), model.spec.eval_head)
            .unwrap();
        let mut relabeled = samples.clone();
        // force 7 matches, 3 misses
        for (i, s) in relabeled.iter_mut().enumerate() {
            let predicted = argmax(probs.row(i));
            s.class_label = Some(if i < 7 { predicted } else { (predicted + 1) % 3 });
        }
        let acc = evaluate(&model, &relabeled).unwrap();
        assert!((acc - 0.7).abs() < 1e-12);
        assert!(evaluate(&model, &[]).is_err());
    }

    #[test]
    fn supone_ignores_unlabeled_domains() {
        let data = generate_synthetic(&tiny_spec()).unwrap();
        let outcome = train(tiny_config().supone(), &data, None).unwrap();
        for s in &outcome.summaries {
            assert_eq!(s.pseudo_set_size, 0);
            assert_eq!(s.losses.adv, 0.0);
            assert_eq!(s.losses.ent, 0.0);
            assert_eq!(s.losses.cls_mix, 0.0);
        }
        assert_eq!(outcome.state.num_unlabeled(), data.initial_state().num_unlabeled());
    }

    #[test]
    fn checkpoint_resume_reproduces_run_bitwise() {
        let data = generate_synthetic(&tiny_spec()).unwrap();
        let config = tiny_config();

        let full = train(config.clone(), &data, None).unwrap();

        let mut trainer = Trainer::new(config.clone(), &data).unwrap();
        while trainer.epoch() < 2 {
            trainer.run_one_epoch(&data, None).unwrap();
        }
        let checkpoint = trainer.checkpoint();
        let mut resumed = Trainer::resume(checkpoint, config.clone()).unwrap();
        resumed.run(&data, None).unwrap();
        assert_eq!(full.summaries, resumed.summaries());
    }

    #[test]
    fn resume_refuses_altered_config() {
        let data = generate_synthetic(&tiny_spec()).unwrap();
        let config = tiny_config();
        let mut trainer = Trainer::new(config.clone(), &data).unwrap();
        trainer.run_one_epoch(&data, None).unwrap();
        let checkpoint = trainer.checkpoint();
        let mut altered = config;
        altered.gamma = 0.7;
        assert!(matches!(
            Trainer::resume(checkpoint, altered),
            Err(Error::ConfigHashMismatch { .. })
        ));
    }

    #[test]
    fn corrupt_checkpoint_is_a_structured_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.json");
        std::fs::write(&path, b"{ not json").unwrap();
        assert!(matches!(
            Trainer::load_checkpoint(&path),
            Err(Error::CheckpointLoad(_))
        ));
    }

    #[test]
    fn bank_scores_read_previous_epoch_writes() {
        let data = generate_synthetic(&tiny_spec()).unwrap();
        let outcome = train(tiny_config(), &data, None).unwrap();
        use crate::dapl::BankEvent;
        let events = outcome.bank.events();
        assert!(!events.is_empty());
        for e in events {
            if let BankEvent::Score { epoch, newest_write } = e {
                if let Some(w) = newest_write {
                    assert!(w < epoch, "scores at epoch {epoch} saw a write from epoch {w}");
                }
            }
        }
    }
}
