//! Model configuration, architecture construction and inference.

use std::fmt;
use std::str::FromStr;

use image::RgbImage;
use poseguard_core::autolabel::{LabeledRegion, RegionLabel, CROP_SIZE};
use poseguard_core::pose_render::{PoseHalf, CANVAS_SIZE, HALF_WIDTH};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::ClassifierError;
use crate::layers::{
    backward_stack, forward_stack, forward_stack_train, BatchNorm2d, Conv2d, GlobalAvgPool,
    Layer, LeakyRelu, Linear, Param,
};
use crate::tensor::Tensor;

pub const NUM_CLASSES: usize = 2;
pub const REGION_SIZE: usize = CROP_SIZE as usize;
pub const REDUCED_CHANNELS: [usize; 8] = [8, 16, 32, 64, 128, 256, 256, 256];
pub const POSE_CHANNELS: [usize; 5] = [16, 32, 64, 128, 256];
/// `(stage width, residual blocks)` after each downsampling convolution.
const DARKNET_STAGES: [(usize, usize); 5] = [(64, 1), (128, 2), (256, 8), (512, 8), (1024, 4)];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    #[serde(rename = "HRC")]
    Hrc,
    #[serde(rename = "HRC_P")]
    HrcP,
}

impl Variant {
    pub fn as_str(&self) -> &'static str {
        match self {
            Variant::Hrc => "HRC",
            Variant::HrcP => "HRC_P",
        }
    }

    pub fn uses_pose(&self) -> bool {
        matches!(self, Variant::HrcP)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = ClassifierError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_uppercase().replace(['+', '-'], "_").as_str() {
            "HRC" => Ok(Variant::Hrc),
            "HRC_P" | "HRCP" => Ok(Variant::HrcP),
            _ => Err(ClassifierError::Config(format!("unknown variant {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackboneScale {
    Full,
    Reduced,
}

impl BackboneScale {
    pub fn as_str(&self) -> &'static str {
        match self {
            BackboneScale::Full => "full",
            BackboneScale::Reduced => "reduced",
        }
    }

    /// Length of the pooled appearance feature.
    pub fn feature_len(&self) -> usize {
        match self {
            BackboneScale::Full => DARKNET_STAGES[4].0,
            BackboneScale::Reduced => REDUCED_CHANNELS[7],
        }
    }
}

impl fmt::Display for BackboneScale {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for BackboneScale {
    type Err = ClassifierError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "full" => Ok(BackboneScale::Full),
            "reduced" => Ok(BackboneScale::Reduced),
            _ => Err(ClassifierError::Config(format!("unknown backbone scale {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub variant: Variant,
    pub backbone_scale: BackboneScale,
}

impl ModelConfig {
    pub fn new(variant: Variant, backbone_scale: BackboneScale) -> Self {
        Self {
            variant,
            backbone_scale,
        }
    }

    pub fn head_inputs(&self) -> usize {
        self.backbone_scale.feature_len()
            + if self.variant.uses_pose() {
                POSE_CHANNELS[4]
            } else {
                0
            }
    }
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::new(Variant::HrcP, BackboneScale::Full)
    }
}

/// Network inputs for `N` regions. Crops are `(N, 3, 256, 256)` with pixels in
/// `[0, 1]`; pose halves are `(N, 1, 512, 256)` with values in `{0, 1}`.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub regions: Tensor,
    pub poses: Option<Tensor>,
}

fn crop_values(crop: &RgbImage) -> Result<Vec<f64>, ClassifierError> {
    if crop.width() as usize != REGION_SIZE || crop.height() as usize != REGION_SIZE {
        return Err(ClassifierError::Input(format!(
            "region crop is {}x{}, expected {REGION_SIZE}x{REGION_SIZE}",
            crop.width(),
            crop.height()
        )));
    }
    let plane = REGION_SIZE * REGION_SIZE;
    let mut out = vec![0.0; 3 * plane];
    for (i, px) in crop.pixels().enumerate() {
        for c in 0..3 {
            out[c * plane + i] = f64::from(px[c]) / 255.0;
        }
    }
    Ok(out)
}

fn pose_values(pose: &PoseHalf) -> Vec<f64> {
    pose.raster().as_slice().iter().map(|&b| f64::from(b.min(1))).collect()
}

impl Batch {
    pub fn len(&self) -> usize {
        self.regions.batch()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn from_inputs(
        crops: &[&RgbImage],
        poses: Option<&[&PoseHalf]>,
    ) -> Result<Self, ClassifierError> {
        let n = crops.len();
        let mut regions = Vec::with_capacity(n * 3 * REGION_SIZE * REGION_SIZE);
        for crop in crops {
            regions.extend(crop_values(crop)?);
        }
        let poses = match poses {
            None => None,
            Some(p) if p.len() != n => {
                return Err(ClassifierError::Input(format!(
                    "{} pose halves for {n} crops",
                    p.len()
                )))
            }
            Some(p) => Some(Tensor::from_vec(
                [n, 1, CANVAS_SIZE, HALF_WIDTH],
                p.iter().flat_map(|h| pose_values(h)).collect(),
            )),
        };
        Ok(Self {
            regions: Tensor::from_vec([n, 3, REGION_SIZE, REGION_SIZE], regions),
            poses,
        })
    }

    /// Builds a batch from labelled regions; pose halves are required when
    /// `with_pose` is set.
    pub fn from_regions(items: &[&LabeledRegion], with_pose: bool) -> Result<Self, ClassifierError> {
        let crops: Vec<&RgbImage> = items.iter().map(|r| &r.crop).collect();
        if !with_pose {
            return Self::from_inputs(&crops, None);
        }
        let poses = items
            .iter()
            .map(|r| {
                r.pose_half.as_ref().ok_or_else(|| {
                    ClassifierError::Input(format!("region {:?} has no pose half", r.source))
                })
            })
            .collect::<Result<Vec<_>, _>>()?;
        Self::from_inputs(&crops, Some(&poses))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Prediction {
    pub label: RegionLabel,
    /// Probability of the handgun class.
    pub score: f64,
    /// Indexed by [`RegionLabel::class_index`].
    pub probabilities: [f64; NUM_CLASSES],
}

impl Prediction {
    pub fn from_probabilities(probabilities: [f64; NUM_CLASSES]) -> Self {
        let score = probabilities[RegionLabel::Handgun.class_index()];
        let label = if score >= 0.5 {
            RegionLabel::Handgun
        } else {
            RegionLabel::NoHandgun
        };
        Self {
            label,
            score,
            probabilities,
        }
    }
}

fn conv_bn_leaky<R: rand::Rng>(
    layers: &mut Vec<Layer>,
    in_c: usize,
    out_c: usize,
    k: usize,
    stride: usize,
    rng: &mut R,
) {
    layers.push(Layer::Conv(Conv2d::new(in_c, out_c, k, stride, false, rng)));
    layers.push(Layer::BatchNorm(BatchNorm2d::new(out_c)));
    layers.push(Layer::LeakyRelu(LeakyRelu::default()));
}

fn conv_leaky<R: rand::Rng>(layers: &mut Vec<Layer>, in_c: usize, out_c: usize, rng: &mut R) {
    layers.push(Layer::Conv(Conv2d::new(in_c, out_c, 3, 2, true, rng)));
    layers.push(Layer::LeakyRelu(LeakyRelu::default()));
}

fn skip_input_grad(layers: &mut [Layer]) {
    if let Some(Layer::Conv(c)) = layers.first_mut() {
        c.set_input_grad(false);
    }
}

/// Darknet-53 convolutional body (52 convolutions) with global average pool.
fn darknet53<R: rand::Rng>(rng: &mut R) -> Vec<Layer> {
    let mut layers = Vec::new();
    conv_bn_leaky(&mut layers, 3, 32, 3, 1, rng);
    let mut c = 32;
    for &(width, blocks) in &DARKNET_STAGES {
        conv_bn_leaky(&mut layers, c, width, 3, 2, rng);
        for _ in 0..blocks {
            let mut body = Vec::new();
            conv_bn_leaky(&mut body, width, width / 2, 1, 1, rng);
            conv_bn_leaky(&mut body, width / 2, width, 3, 1, rng);
            layers.push(Layer::Residual(body));
        }
        c = width;
    }
    layers.push(Layer::GlobalAvgPool(GlobalAvgPool::default()));
    skip_input_grad(&mut layers);
    layers
}

fn strided_stack<R: rand::Rng>(in_c: usize, channels: &[usize], rng: &mut R) -> Vec<Layer> {
    let mut layers = Vec::new();
    let mut c = in_c;
    for &w in channels {
        conv_leaky(&mut layers, c, w, rng);
        c = w;
    }
    layers.push(Layer::GlobalAvgPool(GlobalAvgPool::default()));
    skip_input_grad(&mut layers);
    layers
}

/// HRC or HRC_P network. Inference through `&self` is read-only and can be
/// shared across threads.
#[derive(Debug, Clone)]
pub struct Model {
    config: ModelConfig,
    appearance: Vec<Layer>,
    pose: Option<Vec<Layer>>,
    head: Linear,
}

impl Model {
    /// Builds a freshly initialised network; `seed` fixes the weights.
    pub fn new(config: ModelConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let appearance = match config.backbone_scale {
            BackboneScale::Full => darknet53(&mut rng),
            BackboneScale::Reduced => strided_stack(3, &REDUCED_CHANNELS, &mut rng),
        };
        let pose = config
            .variant
            .uses_pose()
            .then(|| strided_stack(1, &POSE_CHANNELS, &mut rng));
        let head = Linear::new(config.head_inputs(), NUM_CLASSES, &mut rng);
        Self {
            config,
            appearance,
            pose,
            head,
        }
    }

    pub fn config(&self) -> ModelConfig {
        self.config
    }

    pub fn conv_layers(&self) -> usize {
        self.appearance.iter().map(Layer::conv_count).sum()
    }

    fn check_batch(&self, batch: &Batch) -> Result<(), ClassifierError> {
        let [_, c, h, w] = batch.regions.shape();
        if (c, h, w) != (3, REGION_SIZE, REGION_SIZE) {
            return Err(ClassifierError::Input(format!(
                "region tensor has shape {:?}",
                batch.regions.shape()
            )));
        }
        match (&batch.poses, self.config.variant) {
            (Some(_), Variant::Hrc) => Err(ClassifierError::Input(
                "HRC takes only the region input".into(),
            )),
            (None, Variant::HrcP) => Err(ClassifierError::Input(
                "HRC_P requires a pose half for every region".into(),
            )),
            (Some(p), Variant::HrcP) => {
                let [n, c, h, w] = p.shape();
                if (n, c, h, w) != (batch.len(), 1, CANVAS_SIZE, HALF_WIDTH) {
                    Err(ClassifierError::Input(format!("pose tensor has shape {:?}", p.shape())))
                } else {
                    Ok(())
                }
            }
            (None, Variant::Hrc) => Ok(()),
        }
    }

    /// Raw class scores `(N, 2, 1, 1)`.
    pub fn logits(&self, batch: &Batch) -> Result<Tensor, ClassifierError> {
        self.check_batch(batch)?;
        let a = forward_stack(&self.appearance, &batch.regions);
        let features = match (&self.pose, &batch.poses) {
            (Some(branch), Some(p)) => Tensor::concat_features(&a, &forward_stack(branch, p)),
            _ => a,
        };
        Ok(self.head.forward(&features))
    }

    pub fn probabilities(&self, batch: &Batch) -> Result<Vec<[f64; NUM_CLASSES]>, ClassifierError> {
        let logits = self.logits(batch)?;
        Ok((0..logits.batch()).map(|i| softmax(logits.item(i))).collect())
    }

    pub fn predict_batch(&self, batch: &Batch) -> Result<Vec<Prediction>, ClassifierError> {
        Ok(self
            .probabilities(batch)?
            .into_iter()
            .map(Prediction::from_probabilities)
            .collect())
    }

    pub fn predict(
        &self,
        crop: &RgbImage,
        pose_half: Option<&PoseHalf>,
    ) -> Result<Prediction, ClassifierError> {
        let poses = pose_half.map(|p| [p]);
        let batch = Batch::from_inputs(&[crop], poses.as_ref().map(|p| &p[..]))?;
        Ok(self.predict_batch(&batch)?[0])
    }

    /// Mean cross-entropy over the batch in training mode, without touching
    /// gradients.
    pub fn loss(&mut self, batch: &Batch, labels: &[usize]) -> Result<f64, ClassifierError> {
        let logits = self.logits_train(batch)?;
        Ok(cross_entropy(&logits, labels)?.0)
    }

    /// Zeroes gradients, then runs a training-mode forward and backward pass.
    /// Returns the mean cross-entropy.
    pub fn loss_and_grad(&mut self, batch: &Batch, labels: &[usize]) -> Result<f64, ClassifierError> {
        self.visit_params(&mut |p| p.zero_grad());
        let logits = self.logits_train(batch)?;
        let (loss, dlogits) = cross_entropy(&logits, labels)?;
        let dfeat = self.head.backward(&dlogits);
        let app_len = self.config.backbone_scale.feature_len();
        match &mut self.pose {
            Some(branch) => {
                let (da, dp) = dfeat.split_features(app_len);
                backward_stack(&mut self.appearance, &da);
                backward_stack(branch, &dp);
            }
            None => {
                backward_stack(&mut self.appearance, &dfeat);
            }
        }
        Ok(loss)
    }

    fn logits_train(&mut self, batch: &Batch) -> Result<Tensor, ClassifierError> {
        self.check_batch(batch)?;
        let a = forward_stack_train(&mut self.appearance, &batch.regions);
        let features = match (&mut self.pose, &batch.poses) {
            (Some(branch), Some(p)) => {
                Tensor::concat_features(&a, &forward_stack_train(branch, p))
            }
            _ => a,
        };
        Ok(self.head.forward_train(&features))
    }

    /// Visits trainable parameters: appearance branch, pose branch, head.
    pub fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.appearance.iter_mut().for_each(|l| l.visit_params(f));
        if let Some(branch) = &mut self.pose {
            branch.iter_mut().for_each(|l| l.visit_params(f));
        }
        self.head.visit_params(f);
    }

    pub fn param_count(&mut self) -> usize {
        let mut n = 0;
        self.visit_params(&mut |p| n += p.value.len());
        n
    }

    /// Named persisted buffers (weights and normalisation statistics) in a
    /// fixed order.
    pub fn state(&self) -> Vec<(String, Vec<f64>)> {
        let mut out = Vec::new();
        let mut push = |name: String, v: &[f64]| out.push((name, v.to_vec()));
        for (i, l) in self.appearance.iter().enumerate() {
            l.visit_state(&format!("appearance.{i}"), &mut push);
        }
        if let Some(branch) = &self.pose {
            for (i, l) in branch.iter().enumerate() {
                l.visit_state(&format!("pose.{i}"), &mut push);
            }
        }
        self.head.visit_state("head", &mut push);
        out
    }

    /// Overwrites buffers in [`Model::state`] order. Lengths must match.
    pub fn load_state(&mut self, values: Vec<Vec<f64>>) -> Result<(), ClassifierError> {
        let expected = self.state();
        if expected.len() != values.len() {
            return Err(ClassifierError::Checkpoint(format!(
                "expected {} tensors, found {}",
                expected.len(),
                values.len()
            )));
        }
        for ((name, e), v) in expected.iter().zip(&values) {
            if e.len() != v.len() {
                return Err(ClassifierError::Checkpoint(format!(
                    "tensor {name} has {} values, expected {}",
                    v.len(),
                    e.len()
                )));
            }
        }
        let mut iter = values.into_iter();
        let mut put = |dst: &mut Vec<f64>| *dst = iter.next().expect("length checked");
        self.appearance.iter_mut().for_each(|l| l.visit_state_mut(&mut put));
        if let Some(branch) = &mut self.pose {
            branch.iter_mut().for_each(|l| l.visit_state_mut(&mut put));
        }
        self.head.visit_state_mut(&mut put);
        Ok(())
    }

    /// Copies the appearance branch from another model with the same
    /// backbone, e.g. a trained HRC into a fresh HRC_P.
    pub fn load_appearance_from(&mut self, other: &Model) -> Result<(), ClassifierError> {
        if other.config.backbone_scale != self.config.backbone_scale {
            return Err(ClassifierError::Config(format!(
                "cannot transfer a {} backbone into a {} model",
                other.config.backbone_scale, self.config.backbone_scale
            )));
        }
        self.appearance = other.appearance.clone();
        Ok(())
    }
}

/// Numerically stable softmax of a logit pair.
pub fn softmax(logits: &[f64]) -> [f64; NUM_CLASSES] {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    [e[0] / s, e[1] / s]
}

/// Mean cross-entropy and its gradient with respect to the logits.
fn cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<(f64, Tensor), ClassifierError> {
    let n = logits.batch();
    if labels.len() != n {
        return Err(ClassifierError::Input(format!("{} labels for {n} items", labels.len())));
    }
    let mut grad = Tensor::zeros(logits.shape());
    let mut loss = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        if y >= NUM_CLASSES {
            return Err(ClassifierError::Input(format!("class index {y} out of range")));
        }
        let z = logits.item(i);
        let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        loss += lse - z[y];
        let g = grad.item_mut(i);
        for c in 0..NUM_CLASSES {
            g[c] = ((z[c] - lse).exp() - if c == y { 1.0 } else { 0.0 }) / n as f64;
        }
    }
    Ok((loss / n as f64, grad))
}
