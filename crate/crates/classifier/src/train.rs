//! Mini-batch training with Adam and categorical cross-entropy.

use poseguard_core::autolabel::LabeledRegion;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::checkpoint::ModelCheckpoint;
use crate::error::ClassifierError;
use crate::model::{Batch, Model, Prediction};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 4,
            epochs: 60,
            learning_rate: 1e-4,
            seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), ClassifierError> {
        if self.batch_size == 0 {
            return Err(ClassifierError::Config("batch_size must be at least 1".into()));
        }
        if self.epochs == 0 {
            return Err(ClassifierError::Config("epochs must be at least 1".into()));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(ClassifierError::Config(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(ClassifierError::Config("Adam betas must lie in [0, 1)".into()));
        }
        if !(self.epsilon > 0.0) {
            return Err(ClassifierError::Config("epsilon must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingMeta {
    pub epochs_run: usize,
    /// Mean training loss of each epoch.
    pub epoch_losses: Vec<f64>,
    /// Mean loss over the dataset before the first update.
    pub initial_loss: f64,
    pub final_loss: f64,
    /// Fraction of training items predicted correctly after training.
    pub train_accuracy: f64,
    pub dataset_size: usize,
    pub dataset_fingerprint: String,
    pub train_config: TrainConfig,
}

/// Hex SHA-256 over labels, crop pixels and pose halves, in order.
pub fn dataset_fingerprint(dataset: &[LabeledRegion]) -> String {
    let mut h = Sha256::new();
    for r in dataset {
        h.update([r.label.class_index() as u8]);
        h.update(r.crop.width().to_le_bytes());
        h.update(r.crop.height().to_le_bytes());
        h.update(r.crop.as_raw());
        match &r.pose_half {
            Some(p) => {
                h.update([1]);
                h.update(p.raster().as_slice());
            }
            None => h.update([0]),
        }
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

struct Adam {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: i32,
}

impl Adam {
    fn new(model: &mut Model) -> Self {
        let mut m = Vec::new();
        model.visit_params(&mut |p| m.push(vec![0.0; p.value.len()]));
        let v = m.clone();
        Self { m, v, t: 0 }
    }

    fn step(&mut self, model: &mut Model, cfg: &TrainConfig) {
        self.t += 1;
        let c1 = 1.0 - cfg.beta1.powi(self.t);
        let c2 = 1.0 - cfg.beta2.powi(self.t);
        let mut k = 0;
        let (ms, vs) = (&mut self.m, &mut self.v);
        model.visit_params(&mut |p| {
            let (m, v) = (&mut ms[k], &mut vs[k]);
            for i in 0..p.value.len() {
                let g = p.grad[i];
                m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
                v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
                p.value[i] -= cfg.learning_rate * (m[i] / c1) / ((v[i] / c2).sqrt() + cfg.epsilon);
            }
            k += 1;
        });
    }
}

fn labels_of(items: &[&LabeledRegion]) -> Vec<usize> {
    items.iter().map(|r| r.label.class_index()).collect()
}

/// Inference-mode mean loss and accuracy over the dataset.
fn evaluate(
    model: &Model,
    dataset: &[LabeledRegion],
    chunk: usize,
) -> Result<(f64, f64), ClassifierError> {
    let with_pose = model.config().variant.uses_pose();
    let (mut loss, mut correct) = (0.0, 0usize);
    for items in dataset.chunks(chunk) {
        let refs: Vec<&LabeledRegion> = items.iter().collect();
        let probs = model.probabilities(&Batch::from_regions(&refs, with_pose)?)?;
        for (p, r) in probs.iter().zip(items) {
            let y = r.label.class_index();
            loss -= p[y].max(f64::MIN_POSITIVE).ln();
            if Prediction::from_probabilities(*p).label == r.label {
                correct += 1;
            }
        }
    }
    let n = dataset.len() as f64;
    Ok((loss / n, correct as f64 / n))
}

/// Trains `model` on `dataset` and returns the resulting checkpoint. The run
/// is a pure function of the initial weights, the data order and `cfg.seed`.
pub fn train(
    mut model: Model,
    dataset: &[LabeledRegion],
    cfg: &TrainConfig,
) -> Result<ModelCheckpoint, ClassifierError> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(ClassifierError::Data("training set is empty".into()));
    }
    let with_pose = model.config().variant.uses_pose();
    if with_pose {
        if let Some(r) = dataset.iter().find(|r| r.pose_half.is_none()) {
            return Err(ClassifierError::Data(format!(
                "{} requires a pose half for every item; {:?} has none",
                model.config().variant,
                r.source
            )));
        }
    }
    let (initial_loss, _) = evaluate(&model, dataset, cfg.batch_size)?;
    log::info!("initial loss {initial_loss:.6} over {} items", dataset.len());

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::new(&mut model);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for idx in order.chunks(cfg.batch_size) {
            let items: Vec<&LabeledRegion> = idx.iter().map(|&i| &dataset[i]).collect();
            let batch = Batch::from_regions(&items, with_pose)?;
            let loss = model.loss_and_grad(&batch, &labels_of(&items))?;
            adam.step(&mut model, cfg);
            total += loss * items.len() as f64;
        }
        let mean = total / dataset.len() as f64;
        log::info!("epoch {}/{}: loss {mean:.6}", epoch + 1, cfg.epochs);
        epoch_losses.push(mean);
    }
    let (_, train_accuracy) = evaluate(&model, dataset, cfg.batch_size)?;
    let meta = TrainingMeta {
        epochs_run: cfg.epochs,
        final_loss: *epoch_losses.last().expect("epochs >= 1"),
        epoch_losses,
        initial_loss,
        train_accuracy,
        dataset_size: dataset.len(),
        dataset_fingerprint: dataset_fingerprint(dataset),
        train_config: cfg.clone(),
    };
    Ok(ModelCheckpoint {
        model,
        meta: Some(meta),
    })
}

/// Training accuracy of `model` on `dataset` in inference mode.
pub fn accuracy(model: &Model, dataset: &[LabeledRegion]) -> Result<f64, ClassifierError> {
    Ok(evaluate(model, dataset, 8)?.1)
}
