//! Deterministic training loop: seeded shuffling and augmentation, Adam or
//! SGD updates with a NaN guard, per-epoch accuracy reports, and
//! evaluation/prediction over image or feature datasets.

use std::collections::BTreeMap;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{augment, AugmentConfig, Dataset};
use crate::error::{Error, Result};
use crate::model::{ForwardOutput, MaskMode, Model};
use crate::objective::{default_recon_weight, MarginLossConfig};
use crate::tape::{NodeId, Tape};
use crate::tensor::{s, Scalar, Tensor};
use crate::zoo::{InputShape, ModelSpec};

/// Optimizer choice. Adam is the default with the usual moment constants.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum OptimizerKind {
    Adam { beta1: f64, beta2: f64, epsilon: f64 },
    Sgd,
}

impl Default for OptimizerKind {
    fn default() -> Self {
        OptimizerKind::Adam {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Training hyperparameters. Epoch count is always explicit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    pub seed: u64,
    pub routing_iterations: usize,
    /// Margin + recon_weight * reconstruction for capsule models; when
    /// unset the weight defaults to 0.0005 * pixel_count / 784.
    pub recon_weight: Option<f64>,
    pub augment: Option<AugmentConfig>,
    /// Stratified subset taken before training (1.0 keeps everything).
    pub dataset_fraction: f64,
}

impl TrainConfig {
    pub fn new(epochs: usize, seed: u64) -> Self {
        TrainConfig {
            epochs,
            batch_size: 16,
            learning_rate: 1e-3,
            optimizer: OptimizerKind::default(),
            seed,
            routing_iterations: 3,
            recon_weight: None,
            augment: None,
            dataset_fraction: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::contract("epochs and batch size must be positive"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::contract("learning rate must be positive"));
        }
        if self.routing_iterations == 0 {
            return Err(Error::contract("routing needs at least 1 iteration"));
        }
        if let Some(w) = self.recon_weight {
            if w < 0.0 {
                return Err(Error::contract("reconstruction weight must be non-negative"));
            }
        }
        if !(0.0 < self.dataset_fraction && self.dataset_fraction <= 1.0) {
            return Err(Error::contract("dataset fraction must lie in (0, 1]"));
        }
        if let Some(aug) = &self.augment {
            aug.validate()?;
        }
        Ok(())
    }
}

/// Per-epoch training record; serialized as one JSON line per epoch.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochReport {
    pub epoch: usize,
    pub mean_train_loss: f64,
    pub train_accuracy: f64,
    pub test_accuracy: f64,
    pub wall_seconds: f64,
}

/// First-moment/second-moment state for Adam, or nothing for SGD.
pub struct Optimizer<T> {
    kind: OptimizerKind,
    learning_rate: f64,
    m: BTreeMap<String, Tensor<T>>,
    v: BTreeMap<String, Tensor<T>>,
    t: u64,
}

impl<T: Scalar> Optimizer<T> {
    pub fn new(kind: OptimizerKind, learning_rate: f64) -> Self {
        Optimizer {
            kind,
            learning_rate,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
            t: 0,
        }
    }

    /// Apply one update. Every updated parameter is checked for finiteness;
    /// a NaN/Inf aborts with the parameter named.
    pub fn step(
        &mut self,
        params: &mut BTreeMap<String, Tensor<T>>,
        grads: &BTreeMap<String, Tensor<T>>,
    ) -> Result<()> {
        self.t += 1;
        let lr = s::<T>(self.learning_rate);
        match self.kind {
            OptimizerKind::Sgd => {
                for (name, p) in params.iter_mut() {
                    let g = &grads[name];
                    for (pv, gv) in p.data_mut().iter_mut().zip(g.data()) {
                        *pv = *pv - lr * *gv;
                    }
                    if !p.is_finite() {
                        return Err(Error::NonFinite(format!(
                            "parameter {} became non-finite at step {}",
                            name, self.t
                        )));
                    }
                }
            }
            OptimizerKind::Adam {
                beta1,
                beta2,
                epsilon,
            } => {
                let b1 = s::<T>(beta1);
                let b2 = s::<T>(beta2);
                let eps = s::<T>(epsilon);
                let corr1 = s::<T>(1.0 - beta1.powi(self.t as i32));
                let corr2 = s::<T>(1.0 - beta2.powi(self.t as i32));
                for (name, p) in params.iter_mut() {
                    let g = &grads[name];
                    let m = self
                        .m
                        .entry(name.clone())
                        .or_insert_with(|| Tensor::zeros(p.shape().to_vec()));
                    let v = self
                        .v
                        .entry(name.clone())
                        .or_insert_with(|| Tensor::zeros(p.shape().to_vec()));
                    for ((pv, gv), (mv, vv)) in p
                        .data_mut()
                        .iter_mut()
                        .zip(g.data())
                        .zip(m.data_mut().iter_mut().zip(v.data_mut().iter_mut()))
                    {
                        *mv = b1 * *mv + (T::one() - b1) * *gv;
                        *vv = b2 * *vv + (T::one() - b2) * *gv * *gv;
                        let m_hat = *mv / corr1;
                        let v_hat = *vv / corr2;
                        *pv = *pv - lr * m_hat / (v_hat.sqrt() + eps);
                    }
                    if !p.is_finite() {
                        return Err(Error::NonFinite(format!(
                            "parameter {} became non-finite at step {}",
                            name, self.t
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }
}

/// Attach the model's training objective to a finished forward pass:
/// margin + weighted reconstruction for capsule outputs, softmax
/// cross-entropy otherwise. Returns the scalar loss node.
pub fn build_loss<T: Scalar>(
    tape: &mut Tape<T>,
    output: &ForwardOutput,
    target: usize,
    margin_cfg: &MarginLossConfig,
    recon_weight: f64,
) -> Result<NodeId> {
    match output {
        ForwardOutput::Capsule {
            norms,
            recon,
            recon_target,
            ..
        } => {
            let margin = tape.margin_loss(*norms, target, margin_cfg)?;
            let recon_loss = tape.sq_diff_sum(*recon_target, *recon)?;
            tape.weighted_add(margin, recon_loss, s::<T>(recon_weight))
        }
        ForwardOutput::Softmax { logits } => tape.cross_entropy(*logits, target),
    }
}

/// The reconstruction weight a spec trains with: the explicit override or
/// the pixel-count-scaled default.
pub fn resolve_recon_weight(spec: &ModelSpec, override_weight: Option<f64>) -> f64 {
    match override_weight {
        Some(w) => w,
        None => match spec.input {
            InputShape::Image { side, .. } => default_recon_weight(side * side),
            InputShape::Features { len } => default_recon_weight(len),
        },
    }
}

/// Stateful trainer so callers can drive epochs themselves (early
/// stopping, report streaming). [`train`] is the one-shot wrapper.
pub struct Trainer {
    model: Model<f32>,
    cfg: TrainConfig,
    optimizer: Optimizer<f32>,
    margin_cfg: MarginLossConfig,
    recon_weight: f64,
    epoch: usize,
}

impl Trainer {
    pub fn new(spec: ModelSpec, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let spec = spec.with_routing_iterations(cfg.routing_iterations)?;
        let recon_weight = resolve_recon_weight(&spec, cfg.recon_weight);
        let model = Model::init(spec, cfg.seed)?;
        let optimizer = Optimizer::new(cfg.optimizer, cfg.learning_rate);
        Ok(Trainer {
            model,
            cfg,
            optimizer,
            margin_cfg: MarginLossConfig::default(),
            recon_weight,
        epoch: 0,
        })
    }

    pub fn model(&self) -> &Model<f32> {
        &self.model
    }

    pub fn into_model(self) -> Model<f32> {
        self.model
    }

    pub fn optimizer_steps(&self) -> u64 {
        self.optimizer.steps_taken()
    }

    /// One pass over the training set (seeded shuffle, per-batch gradient
    /// averaging, optimizer update) followed by a test-set evaluation.
    pub fn run_epoch(&mut self, train_set: &Dataset, test_set: &Dataset) -> Result<EpochReport> {
        if train_set.is_empty() {
            return Err(Error::contract("training set is empty"));
        }
        let started = Instant::now();
        let epoch = self.epoch;
        self.epoch += 1;

        let mut order: Vec<usize> = (0..train_set.len()).collect();
        let mut shuffle_rng =
            ChaCha8Rng::seed_from_u64(mix(self.cfg.seed, SHUFFLE_TAG, epoch as u64));
        use rand::seq::SliceRandom;
        order.shuffle(&mut shuffle_rng);

        let mut loss_sum = 0.0f64;
        let mut correct = 0usize;
        let mut grad_acc: BTreeMap<String, Tensor<f32>> = BTreeMap::new();

        for batch in order.chunks(self.cfg.batch_size) {
            grad_acc.clear();
            for &idx in batch {
                let target = train_set.label(idx);
                let input = self.training_input(train_set, idx, epoch)?;
                let mut tape = Tape::new();
                let pass = self
                    .model
                    .forward(&mut tape, &input, MaskMode::Label(target))?;
                let loss = build_loss(
                    &mut tape,
                    &pass.output,
                    target,
                    &self.margin_cfg,
                    self.recon_weight,
                )?;
                let loss_value = tape.value(loss).item() as f64;
                if !loss_value.is_finite() {
                    return Err(Error::NonFinite(format!(
                        "loss became non-finite in epoch {}",
                        epoch
                    )));
                }
                loss_sum += loss_value;
                let scores = tape.value(pass.output.score_node());
                if argmax(scores.data()) == target {
                    correct += 1;
                }
                let grads = tape.backward(loss)?;
                for (name, node) in &pass.param_nodes {
                    let g = grads.get_or_zeros(*node, self.model.params()[name].shape());
                    match grad_acc.get_mut(name) {
                        Some(acc) => acc.add_assign(&g),
                        None => {
                            grad_acc.insert(name.clone(), g);
                        }
                    }
                }
            }
            let inv = 1.0 / batch.len() as f32;
            for g in grad_acc.values_mut() {
                for v in g.data_mut() {
                    *v *= inv;
                }
            }
            self.optimizer.step(self.model.params_mut(), &grad_acc)?;
        }

        let test_accuracy = evaluate(&self.model, test_set)?;
        Ok(EpochReport {
            epoch,
            mean_train_loss: loss_sum / train_set.len() as f64,
            train_accuracy: correct as f64 / train_set.len() as f64,
            test_accuracy,
            wall_seconds: started.elapsed().as_secs_f64(),
        })
    }

    /// The (possibly augmented) input for one training sample. The
    /// augmentation stream is seeded per (seed, epoch, sample), so results
    /// do not depend on visit order.
    fn training_input(&self, data: &Dataset, idx: usize, epoch: usize) -> Result<Tensor<f32>> {
        match (data, &self.cfg.augment) {
            (Dataset::Images(images), Some(cfg)) => {
                let mut rng = ChaCha8Rng::seed_from_u64(mix(
                    self.cfg.seed,
                    AUGMENT_TAG,
                    ((epoch as u64) << 32) | idx as u64,
                ));
                Ok(augment(&images.samples[idx], cfg, &mut rng)?.pixels)
            }
            _ => Ok(data.input(idx).clone()),
        }
    }
}

/// Train a freshly initialized model for `cfg.epochs` epochs.
pub fn train(
    spec: ModelSpec,
    train_set: &Dataset,
    test_set: &Dataset,
    cfg: &TrainConfig,
) -> Result<(Model<f32>, Vec<EpochReport>)> {
    let mut trainer = Trainer::new(spec, cfg.clone())?;
    let mut reports = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        reports.push(trainer.run_epoch(train_set, test_set)?);
    }
    Ok((trainer.into_model(), reports))
}

/// Fraction of correctly classified samples.
pub fn evaluate(model: &Model<f32>, dataset: &Dataset) -> Result<f64> {
    if dataset.is_empty() {
        return Err(Error::contract("cannot evaluate on an empty dataset"));
    }
    let mut correct = 0usize;
    for idx in 0..dataset.len() {
        let prediction = model.predict(dataset.input(idx))?;
        if prediction.class_index == dataset.label(idx) {
            correct += 1;
        }
    }
    Ok(correct as f64 / dataset.len() as f64)
}

fn argmax<T: Scalar>(values: &[T]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

const SHUFFLE_TAG: u64 = 1;
const AUGMENT_TAG: u64 = 2;

/// SplitMix64-style stream derivation for (seed, purpose, index).
fn mix(seed: u64, tag: u64, index: u64) -> u64 {
    let mut z = seed
        ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ index.wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{FeatureDataset, FeatureRecord};
    use crate::zoo;

    fn scalar_param(value: f64) -> BTreeMap<String, Tensor<f64>> {
        let mut params = BTreeMap::new();
        params.insert("x".to_string(), Tensor::scalar(value));
        params
    }

    #[test]
    fn adam_matches_scalar_reference_for_100_steps() {
        // Reference: hand-rolled scalar Adam minimizing f(x) = x^2
        // (gradient 2x), lr 0.1.
        let mut params = scalar_param(3.0);
        let mut opt = Optimizer::<f64>::new(OptimizerKind::default(), 0.1);

        let (mut x_ref, mut m, mut v) = (3.0f64, 0.0f64, 0.0f64);
        let (b1, b2, eps, lr) = (0.9f64, 0.999f64, 1e-8f64, 0.1f64);
        for t in 1..=100u32 {
            let g = 2.0 * params["x"].item();
            let mut grads = BTreeMap::new();
            grads.insert("x".to_string(), Tensor::scalar(g));
            opt.step(&mut params, &grads).unwrap();

            let g_ref = 2.0 * x_ref;
            m = b1 * m + (1.0 - b1) * g_ref;
            v = b2 * v + (1.0 - b2) * g_ref * g_ref;
            let m_hat = m / (1.0 - b1.powi(t as i32));
            let v_hat = v / (1.0 - b2.powi(t as i32));
            x_ref -= lr * m_hat / (v_hat.sqrt() + eps);

            assert!(
                (params["x"].item() - x_ref).abs() < 1e-12,
                "step {}: {} vs {}",
                t,
                params["x"].item(),
                x_ref
            );
        }
    }

    #[test]
    fn sgd_step_is_plain_descent() {
        let mut params = scalar_param(1.0);
        let mut opt = Optimizer::<f64>::new(OptimizerKind::Sgd, 0.5);
        let mut grads = BTreeMap::new();
        grads.insert("x".to_string(), Tensor::scalar(2.0));
        opt.step(&mut params, &grads).unwrap();
        assert_eq!(params["x"].item(), 0.0);
    }

    #[test]
    fn nan_gradient_trips_the_guard() {
        let mut params = scalar_param(1.0);
        let mut opt = Optimizer::<f64>::new(OptimizerKind::Sgd, 0.5);
        let mut grads = BTreeMap::new();
        grads.insert("x".to_string(), Tensor::scalar(f64::NAN));
        assert!(matches!(
            opt.step(&mut params, &grads),
            Err(Error::NonFinite(_))
        ));
    }

    fn tiny_feature_sets() -> (Dataset, Dataset) {
        // 10 linearly separable records in R^4, 2 classes.
        let mut records = Vec::new();
        for i in 0..10 {
            let label = i % 2;
            let mut features = vec![0.1f32; 4];
            features[label] = 1.0;
            features[2 + label] = 0.5 + i as f32 * 0.01;
            records.push(FeatureRecord {
                features: Tensor::from_vec(vec![4], features).unwrap(),
                label,
            });
        }
        let d = Dataset::Features(FeatureDataset { records, dim: 4 });
        let (train, test) = d.split(0.5, 3).unwrap();
        (train, test)
    }

    #[test]
    fn batches_of_four_over_ten_samples_take_three_steps() {
        let (train_set, test_set) = tiny_feature_sets();
        // Re-merge so the train set holds exactly 10 samples.
        let full = match (&train_set, &test_set) {
            (Dataset::Features(a), Dataset::Features(b)) => {
                let mut records = a.records.clone();
                records.extend(b.records.clone());
                Dataset::Features(FeatureDataset {
                    records,
                    dim: a.dim,
                })
            }
            _ => unreachable!(),
        };
        let mut cfg = TrainConfig::new(1, 0);
        cfg.batch_size = 4;
        let mut trainer = Trainer::new(zoo::build_mlp_head(4, 2).unwrap(), cfg).unwrap();
        trainer.run_epoch(&full, &full).unwrap();
        assert_eq!(trainer.optimizer_steps(), 3);
    }

    #[test]
    fn training_is_deterministic_for_a_fixed_seed() {
        let (train_set, test_set) = tiny_feature_sets();
        let mut cfg = TrainConfig::new(3, 42);
        cfg.batch_size = 4;
        let run = || {
            train(
                zoo::build_mlp_head(4, 2).unwrap(),
                &train_set,
                &test_set,
                &cfg,
            )
            .unwrap()
        };
        let (model_a, reports_a) = run();
        let (model_b, reports_b) = run();
        for (a, b) in reports_a.iter().zip(&reports_b) {
            assert_eq!(a.mean_train_loss, b.mean_train_loss);
            assert_eq!(a.train_accuracy, b.train_accuracy);
            assert_eq!(a.test_accuracy, b.test_accuracy);
        }
        for (ta, tb) in model_a.params().values().zip(model_b.params().values()) {
            let bits_a: Vec<u32> = ta.data().iter().map(|v| v.to_bits()).collect();
            let bits_b: Vec<u32> = tb.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(bits_a, bits_b);
        }
    }

    #[test]
    fn evaluate_rejects_empty_dataset_and_counts_correctly() {
        let (train_set, _) = tiny_feature_sets();
        let model = Model::<f32>::init(zoo::build_mlp_head(4, 2).unwrap(), 0).unwrap();
        let empty = Dataset::Features(FeatureDataset {
            records: vec![],
            dim: 4,
        });
        assert!(evaluate(&model, &empty).is_err());
        // Manual tally oracle over the same forward outputs.
        let acc = evaluate(&model, &train_set).unwrap();
        let mut correct = 0;
        for i in 0..train_set.len() {
            if model.predict(train_set.input(i)).unwrap().class_index == train_set.label(i) {
                correct += 1;
            }
        }
        assert_eq!(acc, correct as f64 / train_set.len() as f64);
    }
}
