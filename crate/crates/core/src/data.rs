//! Dataset ingestion and generation: directory-structured multi-domain image
//! datasets, and a parametric synthetic multi-domain generator for desk-scale
//! benchmarks.
//!
//! Ground-truth labels of unlabeled domains are kept in a separate
//! [`HiddenLabelStore`] that exposes only aggregate diagnostics; samples
//! handed to the trainer carry no class label, so no loss computation can
//! reach the hidden labels.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::io::Write;
use std::path::Path;

use ndarray::Array1;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::InputShape;
use crate::sample::{PseudoLabeledSample, Sample, SampleId};
use crate::state::TrainState;

/// Ground truth for unlabeled-domain samples, used only for diagnostics such
/// as pseudo-label accuracy. There is intentionally no per-sample getter.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct HiddenLabelStore {
    map: BTreeMap<SampleId, usize>,
}

impl HiddenLabelStore {
    pub(crate) fn insert(&mut self, id: SampleId, class: usize) {
        self.map.insert(id, class);
    }

    /// For dataset export and diagnostics only; the loss path receives bare
    /// arrays and has no route to this.
    pub(crate) fn class_of(&self, id: SampleId) -> Option<usize> {
        self.map.get(&id).copied()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    /// Fraction of pseudo-labeled samples whose frozen label matches the
    /// hidden ground truth. None when no ground truth is known or the pseudo
    /// set is empty.
    pub fn pseudo_label_accuracy(&self, pseudo_set: &[PseudoLabeledSample]) -> Option<f64> {
        if self.map.is_empty() || pseudo_set.is_empty() {
            return None;
        }
        let mut known = 0usize;
        let mut correct = 0usize;
        for p in pseudo_set {
            if let Some(&truth) = self.map.get(&p.sample.id) {
                known += 1;
                if p.class_index() == truth {
                    correct += 1;
                }
            }
        }
        if known == 0 {
            None
        } else {
            Some(correct as f64 / known as f64)
        }
    }

    /// Accuracy of arbitrary (id, predicted class) pairs against the hidden
    /// store; diagnostics for naive-labeling comparisons.
    pub fn prediction_accuracy(&self, predictions: &[(SampleId, usize)]) -> Option<f64> {
        if self.map.is_empty() || predictions.is_empty() {
            return None;
        }
        let mut known = 0usize;
        let mut correct = 0usize;
        for &(id, class) in predictions {
            if let Some(&truth) = self.map.get(&id) {
                known += 1;
                if class == truth {
                    correct += 1;
                }
            }
        }
        if known == 0 {
            None
        } else {
            Some(correct as f64 / known as f64)
        }
    }
}

/// A multi-domain dataset with assigned roles.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetBundle {
    pub input_shape: InputShape,
    pub class_names: Vec<String>,
    /// Domain name -> samples. Labeled and target samples carry class
    /// labels; unlabeled samples do not.
    pub domains: BTreeMap<String, Vec<Sample>>,
    pub labeled_domain: String,
    pub unlabeled_domains: Vec<String>,
    pub target_domain: Option<String>,
    pub hidden_labels: HiddenLabelStore,
    pub warnings: Vec<String>,
    pub skipped_files: usize,
}

impl DatasetBundle {
    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    /// Training domains: the labeled domain plus the unlabeled ones.
    pub fn num_training_domains(&self) -> usize {
        1 + self.unlabeled_domains.len()
    }

    pub fn labeled_samples(&self) -> &[Sample] {
        &self.domains[&self.labeled_domain]
    }

    pub fn target_samples(&self) -> Option<&[Sample]> {
        self.target_domain
            .as_ref()
            .map(|name| self.domains[name].as_slice())
    }

    /// Initial training state: the labeled set and the union of the
    /// unlabeled domains; the pseudo set starts empty.
    pub fn initial_state(&self) -> TrainState {
        let labeled = self.domains[&self.labeled_domain].clone();
        let mut unlabeled = Vec::new();
        for name in &self.unlabeled_domains {
            unlabeled.extend(self.domains[name].iter().cloned());
        }
        TrainState::new(labeled, unlabeled)
    }

    pub fn validate(&self) -> Result<()> {
        if self.domains.get(&self.labeled_domain).map_or(true, Vec::is_empty) {
            return Err(Error::EmptyDomain(self.labeled_domain.clone()));
        }
        for s in self.labeled_samples() {
            if !s.is_consistent() || s.domain_id != 0 {
                return Err(Error::Schema(format!(
                    "labeled sample {:?} must carry a label and domain id 0",
                    s.id
                )));
            }
        }
        for (i, name) in self.unlabeled_domains.iter().enumerate() {
            let samples = self
                .domains
                .get(name)
                .ok_or_else(|| Error::Schema(format!("unknown unlabeled domain `{name}`")))?;
            for s in samples {
                if s.class_label.is_some() || s.domain_id != i + 1 {
                    return Err(Error::Schema(format!(
                        "unlabeled sample {:?} must carry no label and domain id {}",
                        s.id,
                        i + 1
                    )));
                }
            }
        }
        Ok(())
    }

    /// Compact description for manifests and log headers.
    pub fn descriptor(&self) -> serde_json::Value {
        let counts: BTreeMap<&str, usize> = self
            .domains
            .iter()
            .map(|(k, v)| (k.as_str(), v.len()))
            .collect();
        serde_json::json!({
            "num_classes": self.num_classes(),
            "class_names": self.class_names,
            "input_dim": self.input_shape.flat_dim(),
            "domains": counts,
            "labeled": self.labeled_domain,
            "unlabeled": self.unlabeled_domains,
            "target": self.target_domain,
        })
    }
}

// ---------------------------------------------------------------------------
// Synthetic generation
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShiftKind {
    /// Rotate inputs in fixed coordinate planes; an isometry, so class
    /// geometry is preserved within every domain.
    Rotation,
    /// Add a domain-specific constant offset.
    ChannelShift,
    /// Scale coordinates by a domain-specific gain pattern.
    AdditiveStyle,
}

impl std::str::FromStr for ShiftKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "rotation" => Ok(ShiftKind::Rotation),
            "channel_shift" | "channel-shift" => Ok(ShiftKind::ChannelShift),
            "additive_style" | "additive-style" => Ok(ShiftKind::AdditiveStyle),
            other => Err(Error::config(
                "shift_kind",
                format!("expected rotation|channel_shift|additive_style, got `{other}`"),
            )),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SyntheticMode {
    /// Class-conditional Gaussian clusters in a vector space.
    Vector { dim: usize },
    /// Rendered blob images, 3 channels, side x side pixels.
    Image { side: usize },
}

/// Parameters of the synthetic multi-domain benchmark. Domain 0 is the
/// labeled source, the last domain is the target, everything in between is
/// unlabeled. Generation is a pure function of this spec.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub num_domains: usize,
    pub num_classes: usize,
    pub samples_per_class_per_domain: usize,
    pub shift_kind: ShiftKind,
    /// Shift applied per domain step; domain d is transformed at
    /// `shift_magnitude * d`.
    pub shift_magnitude: f64,
    pub class_separation: f64,
    pub noise_std: f64,
    pub seed: u64,
    pub mode: SyntheticMode,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            num_domains: 4,
            num_classes: 5,
            samples_per_class_per_domain: 200,
            shift_kind: ShiftKind::Rotation,
            shift_magnitude: 0.45,
            class_separation: 3.0,
            noise_std: 1.0,
            seed: 0,
            mode: SyntheticMode::Vector { dim: 16 },
        }
    }
}

impl SyntheticSpec {
    /// Apply one `key=value` assignment; `mode` takes `vector:<dim>` or
    /// `image:<side>`.
    pub fn apply_kv(&mut self, key: &str, value: &str) -> Result<()> {
        fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
            value
                .parse()
                .map_err(|_| Error::config(key, format!("cannot parse `{value}`")))
        }
        match key {
            "num_domains" => self.num_domains = parse(key, value)?,
            "num_classes" => self.num_classes = parse(key, value)?,
            "samples_per_class" | "samples_per_class_per_domain" => {
                self.samples_per_class_per_domain = parse(key, value)?
            }
            "shift_kind" => self.shift_kind = value.parse()?,
            "shift_magnitude" => self.shift_magnitude = parse(key, value)?,
            "class_separation" => self.class_separation = parse(key, value)?,
            "noise_std" => self.noise_std = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "mode" => {
                let (kind, size) = value.split_once(':').ok_or_else(|| {
                    Error::config("mode", "expected vector:<dim> or image:<side>")
                })?;
                let size: usize = parse("mode", size.trim())?;
                self.mode = match kind.trim() {
                    "vector" => SyntheticMode::Vector { dim: size },
                    "image" => SyntheticMode::Image { side: size },
                    other => {
                        return Err(Error::config(
                            "mode",
                            format!("expected vector|image, got `{other}`"),
                        ))
                    }
                };
            }
            other => return Err(Error::config(other, "unknown synthetic-spec key")),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_domains < 3 {
            return Err(Error::config(
                "num_domains",
                "need at least 3 (labeled, unlabeled, target)",
            ));
        }
        if self.num_classes < 2 {
            return Err(Error::config("num_classes", "need at least 2 classes"));
        }
        if self.samples_per_class_per_domain == 0 {
            return Err(Error::config("samples_per_class_per_domain", "must be > 0"));
        }
        if !self.shift_magnitude.is_finite() || self.shift_magnitude < 0.0 {
            return Err(Error::config("shift_magnitude", "must be finite and >= 0"));
        }
        if !(self.class_separation > 0.0) {
            return Err(Error::config("class_separation", "must be > 0"));
        }
        if !self.noise_std.is_finite() || self.noise_std < 0.0 {
            return Err(Error::config("noise_std", "must be finite and >= 0"));
        }
        if let SyntheticMode::Image { side } = self.mode {
            if side % 4 != 0 || side < 8 {
                return Err(Error::config("mode", "image side must be >= 8 and divisible by 4"));
            }
        }
        Ok(())
    }
}

fn unit_vector(rng: &mut ChaCha8Rng, dim: usize) -> Array1<f64> {
    let normal = Normal::new(0.0, 1.0).unwrap();
    loop {
        let v: Array1<f64> = Array1::from_shape_fn(dim, |_| normal.sample(rng));
        let n = v.dot(&v).sqrt();
        if n > 1e-9 {
            return v / n;
        }
    }
}

/// Rotate the first half of the coordinate planes (0,1), (2,3), ... by
/// `angle`; the remaining coordinates are untouched. The invariant subspace
/// keeps part of the class signal stable across domains, the way realistic
/// shifts disturb some features but not all.
fn rotate_planes(x: &mut [f64], angle: f64) {
    let (sin, cos) = angle.sin_cos();
    let planes = x.len() / 2;
    let rotated = planes.div_ceil(2);
    for p in 0..rotated {
        let i = 2 * p;
        let (a, b) = (x[i], x[i + 1]);
        x[i] = cos * a - sin * b;
        x[i + 1] = sin * a + cos * b;
    }
}

struct DomainTransform {
    kind: ShiftKind,
    angle: f64,
    offset: Array1<f64>,
    gain: Array1<f64>,
}

impl DomainTransform {
    fn apply(&self, x: &mut [f64]) {
        match self.kind {
            ShiftKind::Rotation => rotate_planes(x, self.angle),
            ShiftKind::ChannelShift => {
                for (v, o) in x.iter_mut().zip(self.offset.iter()) {
                    *v += o;
                }
            }
            ShiftKind::AdditiveStyle => {
                for (v, g) in x.iter_mut().zip(self.gain.iter()) {
                    *v *= 1.0 + g;
                }
            }
        }
    }
}

/// Deterministically generate the multi-domain benchmark described by the
/// spec. Domain 0 is labeled, the last domain is the target and the rest are
/// unlabeled; with `shift_magnitude = 0` all domains are i.i.d.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<DatasetBundle> {
    spec.validate()?;
    match spec.mode {
        SyntheticMode::Vector { dim } => generate_vector(spec, dim),
        SyntheticMode::Image { side } => generate_image(spec, side),
    }
}

fn domain_roles(spec: &SyntheticSpec) -> (Vec<String>, String, Vec<String>, String) {
    let names: Vec<String> = (0..spec.num_domains).map(|d| format!("d{d}")).collect();
    let labeled = names[0].clone();
    let target = names[spec.num_domains - 1].clone();
    let unlabeled = names[1..spec.num_domains - 1].to_vec();
    (names, labeled, unlabeled, target)
}

fn generate_vector(spec: &SyntheticSpec, dim: usize) -> Result<DatasetBundle> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let normal = Normal::new(0.0, 1.0).unwrap();
    let class_means: Vec<Array1<f64>> = (0..spec.num_classes)
        .map(|_| unit_vector(&mut rng, dim) * spec.class_separation)
        .collect();
    let transforms: Vec<DomainTransform> = (0..spec.num_domains)
        .map(|d| DomainTransform {
            kind: spec.shift_kind,
            angle: spec.shift_magnitude * d as f64,
            offset: unit_vector(&mut rng, dim) * (spec.shift_magnitude * d as f64),
            gain: Array1::from_shape_fn(dim, |_| rng.gen_range(-1.0..1.0))
                * (spec.shift_magnitude * d as f64),
        })
        .collect();

    let (names, labeled, unlabeled, target) = domain_roles(spec);
    let mut domains: BTreeMap<String, Vec<Sample>> = BTreeMap::new();
    let mut hidden = HiddenLabelStore::default();
    let mut next_id = 0u64;
    for (d, name) in names.iter().enumerate() {
        let mut samples = Vec::new();
        for class in 0..spec.num_classes {
            for _ in 0..spec.samples_per_class_per_domain {
                let mut input: Vec<f64> = class_means[class]
                    .iter()
                    .map(|&m| m + spec.noise_std * normal.sample(&mut rng))
                    .collect();
                transforms[d].apply(&mut input);
                let sample = if name == &labeled || name == &target {
                    // target samples keep their labels for evaluation; the
                    // domain id is irrelevant outside training
                    Sample::labeled(next_id, input, class)
                } else {
                    hidden.insert(SampleId(next_id), class);
                    Sample::unlabeled(next_id, input, d)
                };
                next_id += 1;
                samples.push(sample);
            }
        }
        domains.insert(name.clone(), samples);
    }

    Ok(DatasetBundle {
        input_shape: InputShape::Vector { dim },
        class_names: (0..spec.num_classes).map(|c| format!("c{c}")).collect(),
        domains,
        labeled_domain: labeled,
        unlabeled_domains: unlabeled,
        target_domain: Some(target),
        hidden_labels: hidden,
        warnings: Vec::new(),
        skipped_files: 0,
    })
}

/// Blob images: the class determines the blob's distance from the image
/// center, so rotation moves the blob without touching the class signal.
fn generate_image(spec: &SyntheticSpec, side: usize) -> Result<DatasetBundle> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let normal = Normal::new(0.0, 1.0).unwrap();
    let channels = 3usize;
    let half = side as f64 / 2.0;
    let max_radius = half - 3.0;
    let gap = (spec.class_separation).min(max_radius / spec.num_classes as f64);
    let sigma = side as f64 / 10.0;

    let channel_gains: Vec<[f64; 3]> = (0..spec.num_domains)
        .map(|_| [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)])
        .collect();

    let (names, labeled, unlabeled, target) = domain_roles(spec);
    let mut domains: BTreeMap<String, Vec<Sample>> = BTreeMap::new();
    let mut hidden = HiddenLabelStore::default();
    let mut next_id = 0u64;
    for (d, name) in names.iter().enumerate() {
        let magnitude = spec.shift_magnitude * d as f64;
        let mut samples = Vec::new();
        for class in 0..spec.num_classes {
            let radius = (2.0 + gap * class as f64).min(max_radius);
            for _ in 0..spec.samples_per_class_per_domain {
                let mut angle = rng.gen_range(0.0..2.0 * PI);
                if spec.shift_kind == ShiftKind::Rotation {
                    angle += magnitude;
                }
                let cy = half + radius * angle.sin();
                let cx = half + radius * angle.cos();
                let mut input = vec![0.0f64; channels * side * side];
                let base = [1.0, 0.8, 0.6];
                for ch in 0..channels {
                    let mut weight = base[ch];
                    match spec.shift_kind {
                        ShiftKind::ChannelShift => {
                            weight += magnitude * [0.3, 0.0, -0.3][ch];
                        }
                        ShiftKind::AdditiveStyle => {
                            weight *= 1.0 + magnitude * channel_gains[d][ch];
                        }
                        ShiftKind::Rotation => {}
                    }
                    for y in 0..side {
                        for x in 0..side {
                            let dy = y as f64 - cy;
                            let dx = x as f64 - cx;
                            let v = weight * (-(dy * dy + dx * dx) / (2.0 * sigma * sigma)).exp()
                                + spec.noise_std * 0.05 * normal.sample(&mut rng);
                            input[ch * side * side + y * side + x] = v;
                        }
                    }
                }
                let sample = if name == &labeled || name == &target {
                    Sample::labeled(next_id, input, class)
                } else {
                    hidden.insert(SampleId(next_id), class);
                    Sample::unlabeled(next_id, input, d)
                };
                next_id += 1;
                samples.push(sample);
            }
        }
        domains.insert(name.clone(), samples);
    }

    Ok(DatasetBundle {
        input_shape: InputShape::Image { channels, height: side, width: side },
        class_names: (0..spec.num_classes).map(|c| format!("c{c}")).collect(),
        domains,
        labeled_domain: labeled,
        unlabeled_domains: unlabeled,
        target_domain: Some(target),
        hidden_labels: hidden,
        warnings: Vec::new(),
        skipped_files: 0,
    })
}

/// Write the bundle to a self-describing columnar file: a header row of field
/// names followed by numeric rows. Hidden ground truth is included because
/// the export exists for external inspection, not for training.
pub fn export_columnar(bundle: &DatasetBundle, path: &Path) -> Result<()> {
    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    let dim = bundle.input_shape.flat_dim();
    let mut header = String::from("sample_id,domain,role,class");
    for i in 0..dim {
        header.push_str(&format!(",x{i}"));
    }
    writeln!(file, "{header}")?;
    for (name, samples) in &bundle.domains {
        let role = if *name == bundle.labeled_domain {
            "labeled"
        } else if bundle.target_domain.as_deref() == Some(name) {
            "target"
        } else {
            "unlabeled"
        };
        for s in samples {
            let class = s
                .class_label
                .or_else(|| bundle.hidden_labels.class_of(s.id))
                .map(|c| c as i64)
                .unwrap_or(-1);
            write!(file, "{},{},{},{}", s.id.0, name, role, class)?;
            for v in &s.input {
                write!(file, ",{v}")?;
            }
            writeln!(file)?;
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Directory ingestion
// ---------------------------------------------------------------------------

/// How to divide each source domain between training and a held-out portion.
/// The held-out fraction is excluded from training; no model selection is
/// performed on it (final-epoch selection is the rule), so it exists for
/// external protocols that require a fixed division.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SplitSpec {
    pub val_fraction: f64,
    pub split_seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec { val_fraction: 0.0, split_seed: 0 }
    }
}

/// Image preprocessing applied at ingestion. The constants are recorded in
/// the run manifest for reproducibility.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LoadOptions {
    /// Images are resized to side x side.
    pub image_side: u32,
    pub channel_mean: [f64; 3],
    pub channel_std: [f64; 3],
    pub split: SplitSpec,
}

impl Default for LoadOptions {
    fn default() -> Self {
        LoadOptions {
            image_side: 32,
            channel_mean: [0.5, 0.5, 0.5],
            channel_std: [0.25, 0.25, 0.25],
            split: SplitSpec::default(),
        }
    }
}

/// Load a `root/<domain>/<class>/<file>` image dataset with the given domain
/// roles. Iteration order is sorted paths, so sample ids are deterministic.
pub fn load_directory_dataset(
    root: &Path,
    labeled: &str,
    target: Option<&str>,
    options: &LoadOptions,
) -> Result<DatasetBundle> {
    let mut domain_names: Vec<String> = Vec::new();
    for entry in std::fs::read_dir(root)? {
        let entry = entry?;
        if entry.file_type()?.is_dir() {
            domain_names.push(entry.file_name().to_string_lossy().into_owned());
        }
    }
    domain_names.sort();
    if domain_names.is_empty() {
        return Err(Error::Schema(format!("no domain directories under {}", root.display())));
    }
    if !domain_names.iter().any(|d| d == labeled) {
        return Err(Error::config(
            "labeled",
            format!("domain `{labeled}` not found under {}", root.display()),
        ));
    }
    if let Some(t) = target {
        if !domain_names.iter().any(|d| d == t) {
            return Err(Error::config(
                "target",
                format!("domain `{t}` not found under {}", root.display()),
            ));
        }
        if t == labeled {
            return Err(Error::config("target", "target domain equals labeled domain"));
        }
    }

    // class sets must agree across domains
    let mut class_names: Option<Vec<String>> = None;
    let mut warnings = Vec::new();
    for domain in &domain_names {
        let mut classes: Vec<String> = Vec::new();
        for entry in std::fs::read_dir(root.join(domain))? {
            let entry = entry?;
            if entry.file_type()?.is_dir() {
                classes.push(entry.file_name().to_string_lossy().into_owned());
            }
        }
        classes.sort();
        match &class_names {
            None => class_names = Some(classes),
            Some(expected) => {
                if *expected != classes {
                    return Err(Error::Schema(format!(
                        "domain `{domain}` has classes {classes:?}, expected {expected:?}"
                    )));
                }
            }
        }
    }
    let class_names = class_names.unwrap();
    if class_names.is_empty() {
        return Err(Error::Schema("no class directories found".to_string()));
    }

    let unlabeled: Vec<String> = domain_names
        .iter()
        .filter(|d| d.as_str() != labeled && Some(d.as_str()) != target)
        .cloned()
        .collect();

    let side = options.image_side as usize;
    let mut domains: BTreeMap<String, Vec<Sample>> = BTreeMap::new();
    let mut hidden = HiddenLabelStore::default();
    let mut skipped = 0usize;
    let mut next_id = 0u64;
    for domain in &domain_names {
        let role_unlabeled = unlabeled.iter().position(|d| d == domain);
        let mut samples = Vec::new();
        for (class_idx, class) in class_names.iter().enumerate() {
            let class_dir = root.join(domain).join(class);
            let mut files: Vec<_> = walkdir::WalkDir::new(&class_dir)
                .min_depth(1)
                .max_depth(1)
                .into_iter()
                .filter_map(|e| e.ok())
                .filter(|e| e.file_type().is_file())
                .map(|e| e.into_path())
                .collect();
            files.sort();
            if files.is_empty() {
                warnings.push(format!(
                    "class `{class}` of domain `{domain}` has no files; retained with 0 samples"
                ));
            }
            for path in files {
                let input = match decode_image(&path, side, options) {
                    Ok(v) => v,
                    Err(e) => {
                        warnings.push(format!("skipping {}: {e}", path.display()));
                        skipped += 1;
                        continue;
                    }
                };
                let sample = match role_unlabeled {
                    Some(idx) => {
                        hidden.insert(SampleId(next_id), class_idx);
                        Sample::unlabeled(next_id, input, idx + 1)
                    }
                    None => Sample::labeled(next_id, input, class_idx),
                };
                next_id += 1;
                samples.push(sample);
            }
        }
        domains.insert(domain.clone(), samples);
    }

    // hold out a fraction of each source domain if requested
    if options.split.val_fraction > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(options.split.split_seed);
        for domain in &domain_names {
            if Some(domain.as_str()) == target {
                continue;
            }
            let samples = domains.get_mut(domain).unwrap();
            let keep = samples.len()
                - ((samples.len() as f64 * options.split.val_fraction).floor() as usize)
                    .min(samples.len());
            // deterministic subset: shuffle indices, keep the first `keep`
            let mut order: Vec<usize> = (0..samples.len()).collect();
            for i in (1..order.len()).rev() {
                let j = rng.gen_range(0..=i);
                order.swap(i, j);
            }
            let keep_set: std::collections::HashSet<usize> =
                order.into_iter().take(keep).collect();
            let mut idx = 0;
            samples.retain(|_| {
                let retain = keep_set.contains(&idx);
                idx += 1;
                retain
            });
        }
    }

    let bundle = DatasetBundle {
        input_shape: InputShape::Image { channels: 3, height: side, width: side },
        class_names,
        domains,
        labeled_domain: labeled.to_string(),
        unlabeled_domains: unlabeled,
        target_domain: target.map(str::to_string),
        hidden_labels: hidden,
        warnings,
        skipped_files: skipped,
    };
    bundle.validate()?;
    Ok(bundle)
}

fn decode_image(path: &Path, side: usize, options: &LoadOptions) -> Result<Vec<f64>> {
    let img = image::open(path)
        .map_err(|e| Error::Schema(format!("undecodable image: {e}")))?
        .resize_exact(side as u32, side as u32, image::imageops::FilterType::Triangle)
        .to_rgb8();
    let mut out = vec![0.0f64; 3 * side * side];
    for (x, y, pixel) in img.enumerate_pixels() {
        for ch in 0..3 {
            let raw = pixel.0[ch] as f64 / 255.0;
            out[ch * side * side + y as usize * side + x as usize] =
                (raw - options.channel_mean[ch]) / options.channel_std[ch];
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generation_is_deterministic_bitwise() {
        let spec = SyntheticSpec { samples_per_class_per_domain: 5, ..Default::default() };
        let a = generate_synthetic(&spec).unwrap();
        let b = generate_synthetic(&spec).unwrap();
        for (name, samples) in &a.domains {
            let other = &b.domains[name];
            assert_eq!(samples.len(), other.len());
            for (s, t) in samples.iter().zip(other.iter()) {
                assert_eq!(s.id, t.id);
                assert_eq!(s.input, t.input);
                assert_eq!(s.class_label, t.class_label);
            }
        }
    }

    #[test]
    fn roles_and_consistency() {
        let spec = SyntheticSpec { samples_per_class_per_domain: 3, ..Default::default() };
        let bundle = generate_synthetic(&spec).unwrap();
        bundle.validate().unwrap();
        assert_eq!(bundle.labeled_domain, "d0");
        assert_eq!(bundle.unlabeled_domains, vec!["d1".to_string(), "d2".to_string()]);
        assert_eq!(bundle.target_domain.as_deref(), Some("d3"));
        assert_eq!(bundle.num_training_domains(), 3);
        assert_eq!(bundle.hidden_labels.len(), 2 * 5 * 3);
        let state = bundle.initial_state();
        assert_eq!(state.num_labeled(), 5 * 3);
        assert_eq!(state.num_unlabeled(), 2 * 5 * 3);
        assert!(state.sets_disjoint());
    }

    #[test]
    fn zero_shift_means_identical_domain_statistics() {
        let spec = SyntheticSpec {
            samples_per_class_per_domain: 50,
            shift_magnitude: 0.0,
            ..Default::default()
        };
        let bundle = generate_synthetic(&spec).unwrap();
        // per-domain mean norms agree when no shift is applied
        let mean_norm = |samples: &[Sample]| -> f64 {
            samples
                .iter()
                .map(|s| s.input.iter().map(|v| v * v).sum::<f64>().sqrt())
                .sum::<f64>()
                / samples.len() as f64
        };
        let norms: Vec<f64> = bundle.domains.values().map(|s| mean_norm(s)).collect();
        for w in norms.windows(2) {
            assert!((w[0] - w[1]).abs() < 0.2, "no-shift domains should look alike: {norms:?}");
        }
    }

    #[test]
    fn rotation_preserves_norms() {
        let spec = SyntheticSpec {
            samples_per_class_per_domain: 20,
            shift_magnitude: 0.8,
            ..Default::default()
        };
        let bundle = generate_synthetic(&spec).unwrap();
        let mean_norm = |samples: &[Sample]| -> f64 {
            samples
                .iter()
                .map(|s| s.input.iter().map(|v| v * v).sum::<f64>().sqrt())
                .sum::<f64>()
                / samples.len() as f64
        };
        let norms: Vec<f64> = bundle.domains.values().map(|s| mean_norm(s)).collect();
        for w in norms.windows(2) {
            assert!((w[0] - w[1]).abs() < 0.3);
        }
    }

    #[test]
    fn image_mode_shapes() {
        let spec = SyntheticSpec {
            samples_per_class_per_domain: 2,
            num_classes: 3,
            mode: SyntheticMode::Image { side: 8 },
            ..Default::default()
        };
        let bundle = generate_synthetic(&spec).unwrap();
        assert_eq!(bundle.input_shape.flat_dim(), 3 * 8 * 8);
        for samples in bundle.domains.values() {
            for s in samples {
                assert_eq!(s.input.len(), 3 * 8 * 8);
                assert!(s.input.iter().all(|v| v.is_finite()));
            }
        }
    }

    #[test]
    fn pseudo_label_accuracy_via_hidden_store() {
        let spec = SyntheticSpec { samples_per_class_per_domain: 4, ..Default::default() };
        let bundle = generate_synthetic(&spec).unwrap();
        let state = bundle.initial_state();
        // pretend the first 10 unlabeled samples were migrated with label 0
        let pseudo: Vec<PseudoLabeledSample> = state.unlabeled_set[..10]
            .iter()
            .map(|s| PseudoLabeledSample::new(s.clone(), 0, 5, 0.5, 1))
            .collect();
        let acc = bundle.hidden_labels.pseudo_label_accuracy(&pseudo).unwrap();
        assert!((0.0..=1.0).contains(&acc));
        assert!(bundle.hidden_labels.pseudo_label_accuracy(&[]).is_none());
    }

    #[test]
    fn export_columnar_writes_header_and_rows() {
        let spec = SyntheticSpec {
            samples_per_class_per_domain: 2,
            num_classes: 2,
            num_domains: 3,
            mode: SyntheticMode::Vector { dim: 3 },
            ..Default::default()
        };
        let bundle = generate_synthetic(&spec).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("synth.csv");
        export_columnar(&bundle, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), "sample_id,domain,role,class,x0,x1,x2");
        assert_eq!(text.lines().count(), 1 + 3 * 2 * 2);
        assert!(text.contains(",labeled,"));
        assert!(text.contains(",unlabeled,"));
        assert!(text.contains(",target,"));
    }
}
