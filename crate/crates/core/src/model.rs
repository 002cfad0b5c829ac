//! The four-network bundle: shared feature extractor, dual classifier heads
//! and a domain discriminator behind a gradient-reversal boundary.
//!
//! Networks are small dense or convolutional stacks in f64 with hand-written
//! backward passes, so gradients are exact and reversal semantics are under
//! our control: the discriminator's parameter gradients always see the plain
//! adversarial loss, while the gradient flowing from the discriminator into
//! the extractor is multiplied by `-reversal_scale`.

use ndarray::{Array1, Array2, Array4, Axis};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Smooth activations keep finite-difference gradient checks meaningful;
/// tanh is the default throughout.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Relu,
}

impl Activation {
    fn apply(&self, z: &Array2<f64>) -> Array2<f64> {
        match self {
            Activation::Tanh => z.mapv(f64::tanh),
            Activation::Relu => z.mapv(|v| v.max(0.0)),
        }
    }

    /// Derivative expressed through the activation output.
    fn deriv_from_output(&self, a: &Array2<f64>) -> Array2<f64> {
        match self {
            Activation::Tanh => a.mapv(|v| 1.0 - v * v),
            Activation::Relu => a.mapv(|v| if v > 0.0 { 1.0 } else { 0.0 }),
        }
    }
}

// ---------------------------------------------------------------------------
// Layers
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Linear {
    /// (in, out)
    pub w: Array2<f64>,
    pub b: Array1<f64>,
}

#[derive(Debug, Clone)]
pub struct LinearGrads {
    pub dw: Array2<f64>,
    pub db: Array1<f64>,
}

impl Linear {
    fn glorot(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize) -> Self {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let w = Array2::from_shape_fn((fan_in, fan_out), |_| rng.gen_range(-bound..bound));
        Linear {
            w,
            b: Array1::zeros(fan_out),
        }
    }

    fn zeros_like(&self) -> LinearGrads {
        LinearGrads {
            dw: Array2::zeros(self.w.raw_dim()),
            db: Array1::zeros(self.b.raw_dim()),
        }
    }

    fn forward(&self, x: &Array2<f64>) -> Array2<f64> {
        x.dot(&self.w) + &self.b
    }

    /// Accumulates parameter gradients and returns the gradient w.r.t. the
    /// layer input.
    fn backward(&self, x: &Array2<f64>, dy: &Array2<f64>, grads: &mut LinearGrads) -> Array2<f64> {
        grads.dw += &x.t().dot(dy);
        grads.db += &dy.sum_axis(Axis(0));
        dy.dot(&self.w.t())
    }
}

/// 3x3 convolution, stride 1, zero padding 1 (spatial size preserved).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Conv2d {
    /// (out_channels, in_channels, 3, 3)
    pub w: Array4<f64>,
    pub b: Array1<f64>,
}

#[derive(Debug, Clone)]
pub struct Conv2dGrads {
    pub dw: Array4<f64>,
    pub db: Array1<f64>,
}

impl Conv2d {
    fn glorot(rng: &mut ChaCha8Rng, in_c: usize, out_c: usize) -> Self {
        let fan_in = in_c * 9;
        let fan_out = out_c * 9;
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let w = Array4::from_shape_fn((out_c, in_c, 3, 3), |_| rng.gen_range(-bound..bound));
        Conv2d {
            w,
            b: Array1::zeros(out_c),
        }
    }

    fn zeros_like(&self) -> Conv2dGrads {
        Conv2dGrads {
            dw: Array4::zeros(self.w.raw_dim()),
            db: Array1::zeros(self.b.raw_dim()),
        }
    }

    fn forward(&self, x: &Array4<f64>) -> Array4<f64> {
        let (batch, in_c, h, w) = x.dim();
        let out_c = self.w.dim().0;
        debug_assert_eq!(in_c, self.w.dim().1);
        let mut out = Array4::zeros((batch, out_c, h, w));
        for b in 0..batch {
            for o in 0..out_c {
                for y in 0..h {
                    for xx in 0..w {
                        let mut acc = self.b[o];
                        for i in 0..in_c {
                            for ky in 0..3 {
                                let sy = y as isize + ky as isize - 1;
                                if sy < 0 || sy >= h as isize {
                                    continue;
                                }
                                for kx in 0..3 {
                                    let sx = xx as isize + kx as isize - 1;
                                    if sx < 0 || sx >= w as isize {
                                        continue;
                                    }
                                    acc += self.w[[o, i, ky, kx]]
                                        * x[[b, i, sy as usize, sx as usize]];
                                }
                            }
                        }
                        out[[b, o, y, xx]] = acc;
                    }
                }
            }
        }
        out
    }

    fn backward(
        &self,
        x: &Array4<f64>,
        dy: &Array4<f64>,
        grads: &mut Conv2dGrads,
    ) -> Array4<f64> {
        let (batch, in_c, h, w) = x.dim();
        let out_c = self.w.dim().0;
        let mut dx = Array4::zeros(x.raw_dim());
        for b in 0..batch {
            for o in 0..out_c {
                for y in 0..h {
                    for xx in 0..w {
                        let g = dy[[b, o, y, xx]];
                        if g == 0.0 {
                            continue;
                        }
                        grads.db[o] += g;
                        for i in 0..in_c {
                            for ky in 0..3 {
                                let sy = y as isize + ky as isize - 1;
                                if sy < 0 || sy >= h as isize {
                                    continue;
                                }
                                for kx in 0..3 {
                                    let sx = xx as isize + kx as isize - 1;
                                    if sx < 0 || sx >= w as isize {
                                        continue;
                                    }
                                    grads.dw[[o, i, ky, kx]] +=
                                        g * x[[b, i, sy as usize, sx as usize]];
                                    dx[[b, i, sy as usize, sx as usize]] +=
                                        g * self.w[[o, i, ky, kx]];
                                }
                            }
                        }
                    }
                }
            }
        }
        dx
    }
}

/// 2x2 average pooling, stride 2. Average (not max) keeps the map smooth.
fn avg_pool2(x: &Array4<f64>) -> Array4<f64> {
    let (batch, c, h, w) = x.dim();
    let mut out = Array4::zeros((batch, c, h / 2, w / 2));
    for b in 0..batch {
        for ch in 0..c {
            for y in 0..h / 2 {
                for xx in 0..w / 2 {
                    out[[b, ch, y, xx]] = 0.25
                        * (x[[b, ch, 2 * y, 2 * xx]]
                            + x[[b, ch, 2 * y + 1, 2 * xx]]
                            + x[[b, ch, 2 * y, 2 * xx + 1]]
                            + x[[b, ch, 2 * y + 1, 2 * xx + 1]]);
                }
            }
        }
    }
    out
}

fn avg_pool2_backward(dy: &Array4<f64>, in_dim: (usize, usize, usize, usize)) -> Array4<f64> {
    let mut dx = Array4::zeros(in_dim);
    let (batch, c, oh, ow) = dy.dim();
    for b in 0..batch {
        for ch in 0..c {
            for y in 0..oh {
                for xx in 0..ow {
                    let g = dy[[b, ch, y, xx]] * 0.25;
                    dx[[b, ch, 2 * y, 2 * xx]] += g;
                    dx[[b, ch, 2 * y + 1, 2 * xx]] += g;
                    dx[[b, ch, 2 * y, 2 * xx + 1]] += g;
                    dx[[b, ch, 2 * y + 1, 2 * xx + 1]] += g;
                }
            }
        }
    }
    dx
}

// ---------------------------------------------------------------------------
// Backbone
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum InputShape {
    Vector { dim: usize },
    /// Channel-major flattened images (c, h, w).
    Image { channels: usize, height: usize, width: usize },
}

impl InputShape {
    pub fn flat_dim(&self) -> usize {
        match *self {
            InputShape::Vector { dim } => dim,
            InputShape::Image { channels, height, width } => channels * height * width,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BackboneKind {
    /// Two dense layers, for vector inputs.
    Dense { hidden: usize },
    /// Two convolutional blocks (conv-act-pool) and one dense layer, for
    /// image inputs. Height and width must be divisible by 4.
    Conv { base_channels: usize },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackboneSpec {
    pub input: InputShape,
    pub kind: BackboneKind,
    pub feature_dim: usize,
    pub activation: Activation,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
enum Backbone {
    Dense {
        l1: Linear,
        l2: Linear,
    },
    Conv {
        c1: Conv2d,
        c2: Conv2d,
        fc: Linear,
    },
}

#[derive(Debug, Clone)]
enum BackboneGrads {
    Dense {
        l1: LinearGrads,
        l2: LinearGrads,
    },
    Conv {
        c1: Conv2dGrads,
        c2: Conv2dGrads,
        fc: LinearGrads,
    },
}

/// Intermediate activations kept from a forward pass for the backward pass.
pub struct FeatureCache {
    x: Array2<f64>,
    inner: CacheInner,
    /// Extractor output (batch, feature_dim).
    pub features: Array2<f64>,
}

enum CacheInner {
    Dense {
        a1: Array2<f64>,
    },
    Conv {
        x4: Array4<f64>,
        a1: Array4<f64>,
        p1: Array4<f64>,
        a2: Array4<f64>,
        p2_flat: Array2<f64>,
    },
}

/// Which classifier head to run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Head {
    /// Trained on pure samples; produces pseudo-label probabilities.
    Predictive,
    /// Trained on mixed samples; serves target-domain inference.
    Generalizable,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BundleSpec {
    pub backbone: BackboneSpec,
    pub num_classes: usize,
    /// Number of training domains (labeled + unlabeled).
    pub num_domains: usize,
    pub disc_hidden: usize,
    /// Head used by `evaluate` and target-domain inference.
    pub eval_head: Head,
}

/// Feature extractor, the two classifier heads and the domain discriminator.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelBundle {
    pub spec: BundleSpec,
    backbone: Backbone,
    f_c: Linear,
    f_m: Linear,
    f_d_hidden: Linear,
    f_d_out: Linear,
}

/// Gradient accumulator mirroring [`ModelBundle`]'s parameter tree.
pub struct BundleGrads {
    backbone: BackboneGrads,
    f_c: LinearGrads,
    f_m: LinearGrads,
    f_d_hidden: LinearGrads,
    f_d_out: LinearGrads,
}

fn softmax_rows(logits: &Array2<f64>) -> Array2<f64> {
    let mut out = logits.clone();
    for mut row in out.rows_mut() {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - m).exp());
        let s: f64 = row.sum();
        row.mapv_inplace(|v| v / s);
    }
    out
}

impl ModelBundle {
    pub fn new(spec: BundleSpec, rng: &mut ChaCha8Rng) -> Result<Self> {
        if spec.num_classes < 2 {
            return Err(Error::config("num_classes", "need at least 2 classes"));
        }
        if spec.num_domains < 1 {
            return Err(Error::config("num_domains", "need at least 1 domain"));
        }
        let d = spec.backbone.feature_dim;
        let backbone = match (spec.backbone.kind, spec.backbone.input) {
            (BackboneKind::Dense { hidden }, input) => {
                let l1 = Linear::glorot(rng, input.flat_dim(), hidden);
                let l2 = Linear::glorot(rng, hidden, d);
                Backbone::Dense { l1, l2 }
            }
            (BackboneKind::Conv { base_channels }, InputShape::Image { channels, height, width }) => {
                if height % 4 != 0 || width % 4 != 0 {
                    return Err(Error::config(
                        "backbone",
                        "image height and width must be divisible by 4",
                    ));
                }
                let c1 = Conv2d::glorot(rng, channels, base_channels);
                let c2 = Conv2d::glorot(rng, base_channels, 2 * base_channels);
                let flat = 2 * base_channels * (height / 4) * (width / 4);
                let fc = Linear::glorot(rng, flat, d);
                Backbone::Conv { c1, c2, fc }
            }
            (BackboneKind::Conv { .. }, InputShape::Vector { .. }) => {
                return Err(Error::config(
                    "backbone",
                    "convolutional backbone requires image inputs",
                ));
            }
        };
        let f_c = Linear::glorot(rng, d, spec.num_classes);
        let f_m = Linear::glorot(rng, d, spec.num_classes);
        let f_d_hidden = Linear::glorot(rng, d, spec.disc_hidden);
        let f_d_out = Linear::glorot(rng, spec.disc_hidden, spec.num_domains);
        Ok(ModelBundle {
            spec,
            backbone,
            f_c,
            f_m,
            f_d_hidden,
            f_d_out,
        })
    }

    pub fn zero_grads(&self) -> BundleGrads {
        let backbone = match &self.backbone {
            Backbone::Dense { l1, l2 } => BackboneGrads::Dense {
                l1: l1.zeros_like(),
                l2: l2.zeros_like(),
            },
            Backbone::Conv { c1, c2, fc } => BackboneGrads::Conv {
                c1: c1.zeros_like(),
                c2: c2.zeros_like(),
                fc: fc.zeros_like(),
            },
        };
        BundleGrads {
            backbone,
            f_c: self.f_c.zeros_like(),
            f_m: self.f_m.zeros_like(),
            f_d_hidden: self.f_d_hidden.zeros_like(),
            f_d_out: self.f_d_out.zeros_like(),
        }
    }

    fn check_batch(&self, batch: &Array2<f64>) -> Result<()> {
        let expect = self.spec.backbone.input.flat_dim();
        if batch.ncols() != expect {
            return Err(Error::config(
                "batch",
                format!("input has {} columns, backbone expects {expect}", batch.ncols()),
            ));
        }
        Ok(())
    }

    /// Run the extractor, keeping intermediates for a later backward pass.
    pub fn features_cached(&self, batch: &Array2<f64>) -> Result<FeatureCache> {
        self.check_batch(batch)?;
        let act = self.spec.backbone.activation;
        match (&self.backbone, self.spec.backbone.input) {
            (Backbone::Dense { l1, l2 }, _) => {
                let a1 = act.apply(&l1.forward(batch));
                let features = act.apply(&l2.forward(&a1));
                Ok(FeatureCache {
                    x: batch.clone(),
                    inner: CacheInner::Dense { a1 },
                    features,
                })
            }
            (Backbone::Conv { c1, c2, fc }, InputShape::Image { channels, height, width }) => {
                let batch_n = batch.nrows();
                let x4 = Array4::from_shape_vec(
                    (batch_n, channels, height, width),
                    batch.iter().cloned().collect(),
                )
                .map_err(|e| Error::shape(e.to_string()))?;
                let z1 = c1.forward(&x4);
                let a1 = match act {
                    Activation::Tanh => z1.mapv(f64::tanh),
                    Activation::Relu => z1.mapv(|v| v.max(0.0)),
                };
                let p1 = avg_pool2(&a1);
                let z2 = c2.forward(&p1);
                let a2 = match act {
                    Activation::Tanh => z2.mapv(f64::tanh),
                    Activation::Relu => z2.mapv(|v| v.max(0.0)),
                };
                let p2 = avg_pool2(&a2);
                let flat_dim = p2.len() / batch_n;
                let p2_flat = Array2::from_shape_vec(
                    (batch_n, flat_dim),
                    p2.iter().cloned().collect(),
                )
                .map_err(|e| Error::shape(e.to_string()))?;
                let features = act.apply(&fc.forward(&p2_flat));
                Ok(FeatureCache {
                    x: batch.clone(),
                    inner: CacheInner::Conv { x4, a1, p1, a2, p2_flat },
                    features,
                })
            }
            (Backbone::Conv { .. }, InputShape::Vector { .. }) => unreachable!(),
        }
    }

    /// Backpropagate a feature gradient through the extractor, accumulating
    /// parameter gradients.
    fn backward_features(
        &self,
        cache: &FeatureCache,
        d_features: &Array2<f64>,
        grads: &mut BundleGrads,
    ) {
        let act = self.spec.backbone.activation;
        match (&self.backbone, &cache.inner, &mut grads.backbone) {
            (
                Backbone::Dense { l1, l2 },
                CacheInner::Dense { a1 },
                BackboneGrads::Dense { l1: g1, l2: g2 },
            ) => {
                let dz2 = d_features * &act.deriv_from_output(&cache.features);
                let da1 = l2.backward(a1, &dz2, g2);
                let dz1 = da1 * &act.deriv_from_output(a1);
                l1.backward(&cache.x, &dz1, g1);
            }
            (
                Backbone::Conv { c1, c2, fc },
                CacheInner::Conv { x4, a1, p1, a2, p2_flat },
                BackboneGrads::Conv { c1: gc1, c2: gc2, fc: gfc },
            ) => {
                let dz_fc = d_features * &act.deriv_from_output(&cache.features);
                let dp2_flat = fc.backward(p2_flat, &dz_fc, gfc);
                let (n, ch2, h2, w2) = a2.dim();
                let dp2 = Array4::from_shape_vec(
                    (n, ch2, h2 / 2, w2 / 2),
                    dp2_flat.iter().cloned().collect(),
                )
                .expect("pool shape");
                let da2 = avg_pool2_backward(&dp2, a2.dim());
                let deriv2 = match act {
                    Activation::Tanh => a2.mapv(|v| 1.0 - v * v),
                    Activation::Relu => a2.mapv(|v| if v > 0.0 { 1.0 } else { 0.0 }),
                };
                let dz2 = da2 * &deriv2;
                let dp1 = c2.backward(p1, &dz2, gc2);
                let da1 = avg_pool2_backward(&dp1, a1.dim());
                let deriv1 = match act {
                    Activation::Tanh => a1.mapv(|v| 1.0 - v * v),
                    Activation::Relu => a1.mapv(|v| if v > 0.0 { 1.0 } else { 0.0 }),
                };
                let dz1 = da1 * &deriv1;
                c1.backward(x4, &dz1, gc1);
            }
            _ => unreachable!("cache kind matches backbone kind"),
        }
    }

    fn head(&self, head: Head) -> &Linear {
        match head {
            Head::Predictive => &self.f_c,
            Head::Generalizable => &self.f_m,
        }
    }

    /// Class logits of the given head over precomputed features.
    pub fn class_logits(&self, features: &Array2<f64>, head: Head) -> Array2<f64> {
        self.head(head).forward(features)
    }

    /// Accumulate gradients for a classifier head given the gradient of the
    /// scalar loss w.r.t. the head logits, and flow back into the extractor.
    pub fn backward_class(
        &self,
        cache: &FeatureCache,
        head: Head,
        d_logits: &Array2<f64>,
        grads: &mut BundleGrads,
    ) {
        let layer = self.head(head);
        let slot = match head {
            Head::Predictive => &mut grads.f_c,
            Head::Generalizable => &mut grads.f_m,
        };
        let d_features = layer.backward(&cache.features, d_logits, slot);
        self.backward_features(cache, &d_features, grads);
    }

    /// Discriminator logits over precomputed features, with cache.
    pub fn domain_logits_cached(&self, features: &Array2<f64>) -> (Array2<f64>, Array2<f64>) {
        let act = self.spec.backbone.activation;
        let h = act.apply(&self.f_d_hidden.forward(features));
        let logits = self.f_d_out.forward(&h);
        (logits, h)
    }

    /// Accumulate discriminator gradients (plain sign) and flow the feature
    /// gradient back into the extractor scaled by `-reversal_scale`. A scale
    /// of 0 detaches the extractor exactly.
    pub fn backward_domain(
        &self,
        cache: &FeatureCache,
        disc_hidden: &Array2<f64>,
        d_logits: &Array2<f64>,
        reversal_scale: f64,
        grads: &mut BundleGrads,
    ) {
        let act = self.spec.backbone.activation;
        let dh = self.f_d_out.backward(disc_hidden, d_logits, &mut grads.f_d_out);
        let dz = dh * &act.deriv_from_output(disc_hidden);
        let d_features = self
            .f_d_hidden
            .backward(&cache.features, &dz, &mut grads.f_d_hidden);
        if reversal_scale != 0.0 {
            let reversed = d_features.mapv(|v| -reversal_scale * v);
            self.backward_features(cache, &reversed, grads);
        }
    }

    /// Class probabilities for a batch: softmax over the chosen head's
    /// logits. Pure inference; no state is touched.
    pub fn forward_class(&self, batch: &Array2<f64>, head: Head) -> Result<Array2<f64>> {
        let cache = self.features_cached(batch)?;
        Ok(softmax_rows(&self.class_logits(&cache.features, head)))
    }

    /// Domain probabilities for a batch. The forward value is independent of
    /// `reversal_scale`; the scale only matters during backpropagation.
    pub fn forward_domain(&self, batch: &Array2<f64>, reversal_scale: f64) -> Result<Array2<f64>> {
        if !(reversal_scale >= 0.0) || !reversal_scale.is_finite() {
            return Err(Error::config(
                "reversal_scale",
                "must be finite and non-negative",
            ));
        }
        let cache = self.features_cached(batch)?;
        let (logits, _) = self.domain_logits_cached(&cache.features);
        Ok(softmax_rows(&logits))
    }

    /// Features in evaluation mode (no caching beyond the returned array).
    pub fn features(&self, batch: &Array2<f64>) -> Result<Array2<f64>> {
        Ok(self.features_cached(batch)?.features)
    }

    /// Flat views over every parameter array, in a fixed documented order.
    pub fn flat_params_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::new();
        match &mut self.backbone {
            Backbone::Dense { l1, l2 } => {
                out.push(l1.w.as_slice_mut().unwrap());
                out.push(l1.b.as_slice_mut().unwrap());
                out.push(l2.w.as_slice_mut().unwrap());
                out.push(l2.b.as_slice_mut().unwrap());
            }
            Backbone::Conv { c1, c2, fc } => {
                out.push(c1.w.as_slice_mut().unwrap());
                out.push(c1.b.as_slice_mut().unwrap());
                out.push(c2.w.as_slice_mut().unwrap());
                out.push(c2.b.as_slice_mut().unwrap());
                out.push(fc.w.as_slice_mut().unwrap());
                out.push(fc.b.as_slice_mut().unwrap());
            }
        }
        out.push(self.f_c.w.as_slice_mut().unwrap());
        out.push(self.f_c.b.as_slice_mut().unwrap());
        out.push(self.f_m.w.as_slice_mut().unwrap());
        out.push(self.f_m.b.as_slice_mut().unwrap());
        out.push(self.f_d_hidden.w.as_slice_mut().unwrap());
        out.push(self.f_d_hidden.b.as_slice_mut().unwrap());
        out.push(self.f_d_out.w.as_slice_mut().unwrap());
        out.push(self.f_d_out.b.as_slice_mut().unwrap());
        out
    }

    /// Parameter names aligned with [`Self::flat_params_mut`] order.
    pub fn param_names(&self) -> Vec<&'static str> {
        let mut names = match self.backbone {
            Backbone::Dense { .. } => {
                vec!["f_g.l1.w", "f_g.l1.b", "f_g.l2.w", "f_g.l2.b"]
            }
            Backbone::Conv { .. } => vec![
                "f_g.c1.w", "f_g.c1.b", "f_g.c2.w", "f_g.c2.b", "f_g.fc.w", "f_g.fc.b",
            ],
        };
        names.extend([
            "f_c.w", "f_c.b", "f_m.w", "f_m.b", "f_d.hidden.w", "f_d.hidden.b", "f_d.out.w",
            "f_d.out.b",
        ]);
        names
    }

    /// Shapes aligned with the parameter order.
    pub fn param_shapes(&self) -> Vec<Vec<usize>> {
        let mut shapes = match &self.backbone {
            Backbone::Dense { l1, l2 } => vec![
                l1.w.shape().to_vec(),
                l1.b.shape().to_vec(),
                l2.w.shape().to_vec(),
                l2.b.shape().to_vec(),
            ],
            Backbone::Conv { c1, c2, fc } => vec![
                c1.w.shape().to_vec(),
                c1.b.shape().to_vec(),
                c2.w.shape().to_vec(),
                c2.b.shape().to_vec(),
                fc.w.shape().to_vec(),
                fc.b.shape().to_vec(),
            ],
        };
        for l in [&self.f_c, &self.f_m, &self.f_d_hidden, &self.f_d_out] {
            shapes.push(l.w.shape().to_vec());
            shapes.push(l.b.shape().to_vec());
        }
        shapes
    }

    pub fn num_params(&self) -> usize {
        let mut this = self.clone();
        this.flat_params_mut().iter().map(|s| s.len()).sum()
    }

    /// Prefix groups for scoping: parameter index -> component.
    pub fn param_component(&self, name: &str) -> Component {
        if name.starts_with("f_g") {
            Component::Extractor
        } else if name.starts_with("f_c") {
            Component::Predictive
        } else if name.starts_with("f_m") {
            Component::Generalizable
        } else {
            Component::Discriminator
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Component {
    Extractor,
    Predictive,
    Generalizable,
    Discriminator,
}

impl BundleGrads {
    pub fn flat(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::new();
        match &mut self.backbone {
            BackboneGrads::Dense { l1, l2 } => {
                out.push(l1.dw.as_slice_mut().unwrap());
                out.push(l1.db.as_slice_mut().unwrap());
                out.push(l2.dw.as_slice_mut().unwrap());
                out.push(l2.db.as_slice_mut().unwrap());
            }
            BackboneGrads::Conv { c1, c2, fc } => {
                out.push(c1.dw.as_slice_mut().unwrap());
                out.push(c1.db.as_slice_mut().unwrap());
                out.push(c2.dw.as_slice_mut().unwrap());
                out.push(c2.db.as_slice_mut().unwrap());
                out.push(fc.dw.as_slice_mut().unwrap());
                out.push(fc.db.as_slice_mut().unwrap());
            }
        }
        out.push(self.f_c.dw.as_slice_mut().unwrap());
        out.push(self.f_c.db.as_slice_mut().unwrap());
        out.push(self.f_m.dw.as_slice_mut().unwrap());
        out.push(self.f_m.db.as_slice_mut().unwrap());
        out.push(self.f_d_hidden.dw.as_slice_mut().unwrap());
        out.push(self.f_d_hidden.db.as_slice_mut().unwrap());
        out.push(self.f_d_out.dw.as_slice_mut().unwrap());
        out.push(self.f_d_out.db.as_slice_mut().unwrap());
        out
    }
}

/// Gradient of mean soft cross-entropy w.r.t. logits: (softmax - target) / n.
pub fn d_soft_ce_d_logits(probs: &Array2<f64>, targets: &Array2<f64>) -> Array2<f64> {
    let n = probs.nrows().max(1) as f64;
    (probs - targets) / n
}

/// Gradient of mean Shannon entropy w.r.t. logits:
/// -p * (ln p + H(row)) / n per entry.
pub fn d_entropy_d_logits(probs: &Array2<f64>) -> Array2<f64> {
    let n = probs.nrows().max(1) as f64;
    let mut out = probs.clone();
    for mut row in out.rows_mut() {
        let h: f64 = row.iter().filter(|&&p| p > 0.0).map(|&p| -p * p.ln()).sum();
        row.mapv_inplace(|p| if p > 0.0 { -p * (p.ln() + h) / n } else { 0.0 });
    }
    out
}

pub fn softmax(logits: &Array2<f64>) -> Array2<f64> {
    softmax_rows(logits)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::arr2;
    use rand::SeedableRng;

    fn dense_spec(input_dim: usize, c: usize, domains: usize) -> BundleSpec {
        BundleSpec {
            backbone: BackboneSpec {
                input: InputShape::Vector { dim: input_dim },
                kind: BackboneKind::Dense { hidden: 6 },
                feature_dim: 5,
                activation: Activation::Tanh,
            },
            num_classes: c,
            num_domains: domains,
            disc_hidden: 4,
            eval_head: Head::Generalizable,
        }
    }

    fn bundle(seed: u64) -> ModelBundle {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ModelBundle::new(dense_spec(4, 7, 3), &mut rng).unwrap()
    }

    #[test]
    fn rows_are_probabilities() {
        let b = bundle(1);
        let x = Array2::from_shape_fn((4, 4), |(i, j)| (i + j) as f64 * 0.1);
        let p = b.forward_class(&x, Head::Predictive).unwrap();
        assert_eq!(p.dim(), (4, 7));
        for row in p.rows() {
            assert_abs_diff_eq!(row.sum(), 1.0, epsilon = 1e-6);
            assert!(row.iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn zeroed_head_gives_uniform() {
        let mut b = bundle(2);
        // zero the predictive head's weight and bias
        let names = b.param_names();
        for (name, slice) in names.iter().zip(b.flat_params_mut()) {
            if name.starts_with("f_c") {
                slice.fill(0.0);
            }
        }
        let x = Array2::from_shape_fn((3, 4), |(i, j)| (i * j) as f64 * 0.3 - 0.5);
        let p = b.forward_class(&x, Head::Predictive).unwrap();
        for row in p.rows() {
            for &v in row {
                assert_abs_diff_eq!(v, 1.0 / 7.0, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn duplicated_input_rows_give_identical_outputs() {
        let b = bundle(3);
        let row = [0.3, -0.2, 0.9, 0.01];
        let x = arr2(&[row, row]);
        let p = b.forward_class(&x, Head::Generalizable).unwrap();
        for j in 0..7 {
            assert_eq!(p[[0, j]], p[[1, j]]);
        }
    }

    #[test]
    fn forward_domain_independent_of_scale() {
        let b = bundle(4);
        let x = Array2::from_shape_fn((2, 4), |(i, j)| i as f64 - j as f64 * 0.2);
        let p0 = b.forward_domain(&x, 0.0).unwrap();
        let p5 = b.forward_domain(&x, 0.5).unwrap();
        let p1 = b.forward_domain(&x, 1.0).unwrap();
        assert_eq!(p0, p5);
        assert_eq!(p0, p1);
        assert!(b.forward_domain(&x, -0.1).is_err());
    }

    #[test]
    fn shape_mismatch_is_config_error() {
        let b = bundle(5);
        let x = Array2::zeros((2, 9));
        assert!(matches!(
            b.forward_class(&x, Head::Predictive),
            Err(Error::Config { .. })
        ));
    }

    #[test]
    fn reversal_zero_detaches_extractor_exactly() {
        let b = bundle(6);
        let x = Array2::from_shape_fn((3, 4), |(i, j)| (i as f64 * 0.7 - j as f64 * 0.3).sin());
        let cache = b.features_cached(&x).unwrap();
        let (logits, h) = b.domain_logits_cached(&cache.features);
        let probs = softmax(&logits);
        let mut targets = Array2::zeros(probs.raw_dim());
        targets[[0, 0]] = 1.0;
        targets[[1, 1]] = 1.0;
        targets[[2, 2]] = 1.0;
        let d_logits = d_soft_ce_d_logits(&probs, &targets);
        let mut grads = b.zero_grads();
        b.backward_domain(&cache, &h, &d_logits, 0.0, &mut grads);
        let names: Vec<String> = b.param_names().iter().map(|s| s.to_string()).collect();
        for (name, g) in names.iter().zip(grads.flat()) {
            if name.starts_with("f_g") {
                assert!(g.iter().all(|&v| v == 0.0), "{name} must have zero grads");
            }
            if name.starts_with("f_d") {
                assert!(g.iter().any(|&v| v != 0.0), "{name} should be nonzero");
            }
        }
    }

    #[test]
    fn reversal_negates_extractor_gradient_exactly() {
        let b = bundle(7);
        let x = Array2::from_shape_fn((3, 4), |(i, j)| (i as f64 - j as f64).cos());
        let cache = b.features_cached(&x).unwrap();
        let (logits, h) = b.domain_logits_cached(&cache.features);
        let probs = softmax(&logits);
        let mut targets = Array2::zeros(probs.raw_dim());
        for i in 0..3 {
            targets[[i, i % 3]] = 1.0;
        }
        let d_logits = d_soft_ce_d_logits(&probs, &targets);

        let mut reversed = b.zero_grads();
        b.backward_domain(&cache, &h, &d_logits, 1.0, &mut reversed);
        let mut plain = b.zero_grads();
        // scale -1 flows the unreversed gradient into the extractor
        b.backward_domain(&cache, &h, &d_logits, -1.0, &mut plain);

        let names: Vec<String> = b.param_names().iter().map(|s| s.to_string()).collect();
        for ((name, r), p) in names.iter().zip(reversed.flat()).zip(plain.flat()) {
            if name.starts_with("f_g") {
                for (a, bb) in r.iter().zip(p.iter()) {
                    assert_abs_diff_eq!(*a, -*bb, epsilon = 1e-15);
                }
            } else if name.starts_with("f_d") {
                for (a, bb) in r.iter().zip(p.iter()) {
                    assert_eq!(*a, *bb, "discriminator grads ignore the scale");
                }
            }
        }
    }

    #[test]
    fn conv_backbone_forward_shapes() {
        let spec = BundleSpec {
            backbone: BackboneSpec {
                input: InputShape::Image { channels: 2, height: 8, width: 8 },
                kind: BackboneKind::Conv { base_channels: 3 },
                feature_dim: 5,
                activation: Activation::Tanh,
            },
            num_classes: 4,
            num_domains: 3,
            disc_hidden: 4,
            eval_head: Head::Generalizable,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let b = ModelBundle::new(spec, &mut rng).unwrap();
        let x = Array2::from_shape_fn((2, 2 * 8 * 8), |(i, j)| ((i + j) as f64 * 0.05).sin());
        let p = b.forward_class(&x, Head::Predictive).unwrap();
        assert_eq!(p.dim(), (2, 4));
        for row in p.rows() {
            assert_abs_diff_eq!(row.sum(), 1.0, epsilon = 1e-9);
        }
    }
}
