//! Training configuration: every hyper-parameter with its default, plus the
//! flat `key=value` config-file format used by the CLI and the FFI layer.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Policy for maintaining per-domain class representations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RepPolicy {
    /// Keep only the single most confident sample per class, replaced every epoch.
    One,
    /// Accumulate samples that beat the best confidence seen so far and store
    /// the mean of everything accumulated.
    Ensemble,
}

impl std::str::FromStr for RepPolicy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "one" => Ok(RepPolicy::One),
            "ensemble" => Ok(RepPolicy::Ensemble),
            other => Err(Error::config(
                "rep_policy",
                format!("expected `one` or `ensemble`, got `{other}`"),
            )),
        }
    }
}

/// All training hyper-parameters.
///
/// Defaults follow the reference experimental setup: blend weight 0.1 paired
/// with threshold 0.24, mixup strength 0.2, batch size 128, SGD momentum 0.9
/// with initial learning rate 0.01 decayed tenfold at epochs 30 and 50.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Blend weight between classifier probability and class-representation
    /// similarity when scoring unlabeled samples. 1.0 degenerates to naive
    /// pseudo-labeling.
    pub gamma: f64,
    /// Confidence threshold a blended score must strictly exceed for a
    /// pseudo-label to be assigned.
    pub delta: f64,
    /// Beta(alpha, alpha) parameter controlling mixup interpolation strength.
    pub alpha: f64,
    pub num_classes: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    /// Epochs at which the learning rate is divided by 10.
    pub lr_decay_epochs: Vec<usize>,
    /// Fraction of total epochs over which the adversarial/entropy ramp
    /// weight rises to one.
    pub ramp_fraction: f64,
    pub rep_policy: RepPolicy,
    pub seed: u64,

    /// Hidden width of the feature extractor.
    pub hidden_dim: usize,
    /// Feature dimension produced by the extractor.
    pub feature_dim: usize,
    /// Hidden width of the domain discriminator.
    pub disc_hidden: usize,
    /// Base channel count of the convolutional backbone (image inputs only).
    pub conv_channels: usize,

    // Ablation switches. All default to true except `mixup_all`.
    /// Score with the domain-aware blend; false replaces it by naive
    /// pseudo-labeling on the classifier probability alone.
    pub use_dapl: bool,
    /// Train a separate generalizable classifier on mixed samples; false
    /// routes the mixed loss through the predictive classifier too.
    pub use_dual_classifier: bool,
    /// Build mixed batches from labeled and pseudo-labeled samples.
    pub use_mixup: bool,
    /// Mix with all unlabeled samples (argmax label) instead of only the
    /// confident pseudo-labeled ones.
    pub mixup_all: bool,
    /// Entropy regularization on ambiguous unlabeled samples.
    pub use_entropy: bool,
    /// Include mixed samples in the adversarial loss.
    pub use_adv_mix: bool,
    /// Domain-adversarial alignment. Disabled together with the flags above
    /// this yields the supervised-on-one-domain baseline.
    pub use_adversarial: bool,
    /// Assign pseudo-labels at all; false keeps every unlabeled sample in the
    /// ambiguous set forever.
    pub use_pseudo_labels: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            gamma: 0.1,
            delta: 0.24,
            alpha: 0.2,
            num_classes: 5,
            epochs: 40,
            batch_size: 128,
            lr: 0.01,
            momentum: 0.9,
            lr_decay_epochs: vec![30, 50],
            ramp_fraction: 0.3,
            rep_policy: RepPolicy::Ensemble,
            seed: 0,
            hidden_dim: 64,
            feature_dim: 64,
            disc_hidden: 32,
            conv_channels: 8,
            use_dapl: true,
            use_dual_classifier: true,
            use_mixup: true,
            mixup_all: false,
            use_entropy: true,
            use_adv_mix: true,
            use_adversarial: true,
            use_pseudo_labels: true,
        }
    }
}

impl TrainConfig {
    /// The supervised baseline: train on the labeled domain only, ignoring
    /// unlabeled domains entirely.
    pub fn supone(mut self) -> Self {
        self.use_dapl = false;
        self.use_mixup = false;
        self.mixup_all = false;
        self.use_entropy = false;
        self.use_adv_mix = false;
        self.use_adversarial = false;
        self.use_pseudo_labels = false;
        self
    }

    /// Number of epochs over which the ramp weight rises to one.
    pub fn ramp_epochs(&self) -> usize {
        ((self.epochs as f64 * self.ramp_fraction).round() as usize).max(1)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.gamma) || !self.gamma.is_finite() {
            return Err(Error::config("gamma", "must lie in [0, 1]"));
        }
        if self.delta <= 0.0 || !self.delta.is_finite() {
            return Err(Error::config("delta", "must be > 0"));
        }
        if self.alpha <= 0.0 || !self.alpha.is_finite() {
            return Err(Error::config("alpha", "must be > 0"));
        }
        if self.batch_size < 2 {
            return Err(Error::config("batch_size", "must be >= 2"));
        }
        if self.num_classes < 2 {
            return Err(Error::config("num_classes", "must be >= 2"));
        }
        if self.lr <= 0.0 || !self.lr.is_finite() {
            return Err(Error::config("lr", "must be > 0"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config("momentum", "must lie in [0, 1)"));
        }
        if !(0.0..=1.0).contains(&self.ramp_fraction) {
            return Err(Error::config("ramp_fraction", "must lie in [0, 1]"));
        }
        if self.hidden_dim == 0 || self.feature_dim == 0 || self.disc_hidden == 0 {
            return Err(Error::config(
                "hidden_dim",
                "network dimensions must be positive",
            ));
        }
        Ok(())
    }

    /// Apply one `key=value` assignment. Unknown keys are rejected with the
    /// key name in the error.
    pub fn apply_kv(&mut self, key: &str, value: &str) -> Result<()> {
        fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
            value
                .parse()
                .map_err(|_| Error::config(key, format!("cannot parse `{value}`")))
        }
        match key {
            "gamma" => self.gamma = parse(key, value)?,
            "delta" => self.delta = parse(key, value)?,
            "alpha" => self.alpha = parse(key, value)?,
            "num_classes" => self.num_classes = parse(key, value)?,
            "epochs" => self.epochs = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "lr" => self.lr = parse(key, value)?,
            "momentum" => self.momentum = parse(key, value)?,
            "ramp_fraction" => self.ramp_fraction = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "hidden_dim" => self.hidden_dim = parse(key, value)?,
            "feature_dim" => self.feature_dim = parse(key, value)?,
            "disc_hidden" => self.disc_hidden = parse(key, value)?,
            "conv_channels" => self.conv_channels = parse(key, value)?,
            "rep_policy" => self.rep_policy = value.parse()?,
            "lr_decay_epochs" => {
                self.lr_decay_epochs = value
                    .split(',')
                    .filter(|s| !s.trim().is_empty())
                    .map(|s| parse(key, s.trim()))
                    .collect::<Result<Vec<usize>>>()?;
            }
            "use_dapl" => self.use_dapl = parse(key, value)?,
            "use_dual_classifier" => self.use_dual_classifier = parse(key, value)?,
            "use_mixup" => self.use_mixup = parse(key, value)?,
            "mixup_all" => self.mixup_all = parse(key, value)?,
            "use_entropy" => self.use_entropy = parse(key, value)?,
            "use_adv_mix" => self.use_adv_mix = parse(key, value)?,
            "use_adversarial" => self.use_adversarial = parse(key, value)?,
            "use_pseudo_labels" => self.use_pseudo_labels = parse(key, value)?,
            other => return Err(Error::config(other, "unknown config key")),
        }
        Ok(())
    }

    /// Parse a flat `key=value` config file body. Blank lines and lines
    /// starting with `#` are ignored.
    pub fn apply_file_contents(&mut self, contents: &str) -> Result<()> {
        for (lineno, raw) in contents.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::config(
                    "config file",
                    format!("line {}: expected key=value, got `{line}`", lineno + 1),
                )
            })?;
            self.apply_kv(key.trim(), value.trim())?;
        }
        Ok(())
    }

    /// Hash of the canonical serialized config; guards checkpoint resume.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        let digest = Sha256::digest(json.as_bytes());
        hex_prefix(&digest, 16)
    }

    /// Short human-readable name for the experiment arm this flag combination
    /// corresponds to. Comparison reports group runs by this label.
    pub fn arm_label(&self) -> String {
        let d = TrainConfig {
            seed: self.seed,
            ..TrainConfig::default()
        };
        let sup = d.clone().supone();
        let flags = |c: &TrainConfig| {
            (
                c.use_dapl,
                c.use_dual_classifier,
                c.use_mixup,
                c.mixup_all,
                c.use_entropy,
                c.use_adv_mix,
                c.use_adversarial,
                c.use_pseudo_labels,
            )
        };
        if flags(self) == flags(&sup) {
            return "supone".to_string();
        }
        if flags(self) == flags(&d) {
            if self.gamma == 1.0 {
                return "naive-pl".to_string();
            }
            return "ours".to_string();
        }
        let mut diffs = Vec::new();
        if !self.use_dapl {
            diffs.push("no-dapl");
        }
        if !self.use_dual_classifier {
            diffs.push("no-dc");
        }
        if !self.use_mixup {
            diffs.push("no-mixup");
        }
        if self.mixup_all {
            diffs.push("mixup-all");
        }
        if !self.use_entropy {
            diffs.push("no-entropy");
        }
        if !self.use_adv_mix {
            diffs.push("no-advmix");
        }
        if !self.use_adversarial {
            diffs.push("no-adv");
        }
        if !self.use_pseudo_labels {
            diffs.push("no-pl");
        }
        diffs.join("+")
    }
}

pub(crate) fn hex_prefix(bytes: &[u8], chars: usize) -> String {
    let mut s = String::with_capacity(chars);
    for b in bytes {
        s.push_str(&format!("{b:02x}"));
        if s.len() >= chars {
            break;
        }
    }
    s.truncate(chars);
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid_and_match_reference_values() {
        let c = TrainConfig::default();
        c.validate().unwrap();
        assert_eq!(c.gamma, 0.1);
        assert_eq!(c.delta, 0.24);
        assert_eq!(c.alpha, 0.2);
        assert_eq!(c.batch_size, 128);
        assert_eq!(c.lr, 0.01);
        assert_eq!(c.momentum, 0.9);
        assert_eq!(c.lr_decay_epochs, vec![30, 50]);
    }

    #[test]
    fn kv_roundtrip_and_unknown_key() {
        let mut c = TrainConfig::default();
        c.apply_file_contents("# comment\n\ngamma = 0.3\nrep_policy = one\nlr_decay_epochs=10,20\n")
            .unwrap();
        assert_eq!(c.gamma, 0.3);
        assert_eq!(c.rep_policy, RepPolicy::One);
        assert_eq!(c.lr_decay_epochs, vec![10, 20]);
        let err = c.apply_kv("granma", "1").unwrap_err();
        assert!(err.to_string().contains("granma"));
    }

    #[test]
    fn validation_rejects_out_of_range() {
        let mut c = TrainConfig::default();
        c.gamma = 1.5;
        assert!(c.validate().is_err());
        let mut c = TrainConfig::default();
        c.batch_size = 1;
        assert!(c.validate().is_err());
        let mut c = TrainConfig::default();
        c.alpha = 0.0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn hash_changes_with_config() {
        let a = TrainConfig::default();
        let mut b = TrainConfig::default();
        b.gamma = 0.2;
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash(), TrainConfig::default().hash());
    }

    #[test]
    fn arm_labels() {
        assert_eq!(TrainConfig::default().arm_label(), "ours");
        assert_eq!(TrainConfig::default().supone().arm_label(), "supone");
        let mut naive = TrainConfig::default();
        naive.gamma = 1.0;
        assert_eq!(naive.arm_label(), "naive-pl");
        let mut nd = TrainConfig::default();
        nd.use_dapl = false;
        assert_eq!(nd.arm_label(), "no-dapl");
    }
}
