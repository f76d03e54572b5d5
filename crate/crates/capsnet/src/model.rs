//! Instantiated models: deterministic parameter initialization from a
//! [`ModelSpec`], the taped forward pass, and single-input prediction.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::capsule;
use crate::error::{Error, Result};
use crate::linalg::{softmax_axis, Activation};
use crate::lstm::{lstm_step_on_tape, LstmNodeParams};
use crate::tape::{NodeId, Tape};
use crate::tensor::{Scalar, Tensor};
use crate::zoo::{Flow, InputShape, LayerSpec, ModelSpec};

/// How a parameter tensor is filled at initialization.
#[derive(Debug, Clone, Copy, PartialEq)]
enum InitKind {
    /// Uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
    FanInUniform(usize),
    /// Normal with the given standard deviation (capsule transforms).
    Normal(f64),
    Zero,
}

/// Name, shape and init rule for every trainable tensor of a spec, in
/// deterministic layer order.
fn param_plan(spec: &ModelSpec) -> Result<Vec<(String, Vec<usize>, InitKind)>> {
    spec.validate()?;
    let flows = spec.layer_input_flows()?;
    let mut plan = Vec::new();
    for (idx, (layer, flow)) in spec.layers.iter().zip(&flows).enumerate() {
        let name = |suffix: &str| format!("l{:02}.{}", idx, suffix);
        match layer {
            LayerSpec::Conv {
                filters, kernel, ..
            } => {
                let (c, _, _) = image_dims(flow);
                let fan_in = c * kernel * kernel;
                plan.push((
                    name("kernels"),
                    vec![*filters, c, *kernel, *kernel],
                    InitKind::FanInUniform(fan_in),
                ));
                plan.push((name("bias"), vec![*filters], InitKind::Zero));
            }
            LayerSpec::MaxPool => {}
            LayerSpec::Dense { width, .. } => {
                let n = flow.flat_len();
                plan.push((
                    name("weights"),
                    vec![*width, n],
                    InitKind::FanInUniform(n),
                ));
                plan.push((name("bias"), vec![*width], InitKind::Zero));
            }
            LayerSpec::PrimaryCaps {
                kernel,
                n_types,
                dim,
                ..
            } => {
                let (c, _, _) = image_dims(flow);
                let filters = n_types * dim;
                let fan_in = c * kernel * kernel;
                plan.push((
                    name("kernels"),
                    vec![filters, c, *kernel, *kernel],
                    InitKind::FanInUniform(fan_in),
                ));
                plan.push((name("bias"), vec![filters], InitKind::Zero));
            }
            LayerSpec::ClassCaps {
                n_capsules, dim, ..
            } => {
                let (n_in, d_in) = match flow {
                    Flow::Capsules { n, dim } => (*n, *dim),
                    _ => unreachable!("validated"),
                };
                plan.push((
                    name("w"),
                    vec![n_in, *n_capsules, *dim, d_in],
                    InitKind::Normal(0.05),
                ));
            }
            LayerSpec::Decoder(dec) => {
                let mut prev = flow.flat_len();
                for (i, &width) in dec.fc_sizes.iter().enumerate() {
                    plan.push((
                        name(&format!("fc{}.weights", i)),
                        vec![width, prev],
                        InitKind::FanInUniform(prev),
                    ));
                    plan.push((name(&format!("fc{}.bias", i)), vec![width], InitKind::Zero));
                    prev = width;
                }
            }
            LayerSpec::Lstm { units } => {
                let z = flow.flat_len() + units;
                for gate in ["i", "f", "g", "o"] {
                    plan.push((
                        name(&format!("w_{}", gate)),
                        vec![*units, z],
                        InitKind::FanInUniform(z),
                    ));
                }
                for gate in ["i", "f", "g", "o"] {
                    plan.push((name(&format!("b_{}", gate)), vec![*units], InitKind::Zero));
                }
            }
            LayerSpec::SoftmaxHead => {
                let n = flow.flat_len();
                plan.push((
                    name("weights"),
                    vec![spec.n_classes, n],
                    InitKind::FanInUniform(n),
                ));
                plan.push((name("bias"), vec![spec.n_classes], InitKind::Zero));
            }
        }
    }
    Ok(plan)
}

fn image_dims(flow: &Flow) -> (usize, usize, usize) {
    match flow {
        Flow::Image { channels, h, w } => (*channels, *h, *w),
        _ => unreachable!("validated"),
    }
}

/// Which capsule the reconstruction decoder keeps.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskMode {
    /// Teacher forcing with the true label (training).
    Label(usize),
    /// The capsule with the largest norm (inference).
    Infer,
}

/// Node handles produced by one forward pass.
pub struct ForwardPass {
    pub param_nodes: BTreeMap<String, NodeId>,
    pub input_node: NodeId,
    pub output: ForwardOutput,
}

pub enum ForwardOutput {
    /// Capsule classifier: per-class capsule vectors and their norms, plus
    /// the reconstruction branch and its single-channel target.
    Capsule {
        capsules: NodeId,
        norms: NodeId,
        recon: NodeId,
        recon_target: NodeId,
    },
    /// Softmax classifier logits.
    Softmax { logits: NodeId },
}

impl ForwardOutput {
    /// The node scores are read from: capsule norms or logits.
    pub fn score_node(&self) -> NodeId {
        match self {
            ForwardOutput::Capsule { norms, .. } => *norms,
            ForwardOutput::Softmax { logits } => *logits,
        }
    }
}

/// Result of classifying one input.
#[derive(Debug, Clone)]
pub struct Prediction {
    pub class_index: usize,
    /// Max capsule norm (capsule models) or max softmax probability.
    pub confidence: f64,
    pub scores: Vec<f64>,
}

/// A spec together with its trainable tensors.
#[derive(Debug, Clone)]
pub struct Model<T> {
    spec: ModelSpec,
    params: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> Model<T> {
    /// Deterministically initialize parameters from a seed. Conv and dense
    /// weights use fan-in-scaled uniform draws, capsule transforms a small
    /// normal, biases zero; draws are made in `f64` so a given seed yields
    /// the same values in both precisions.
    pub fn init(spec: ModelSpec, seed: u64) -> Result<Self> {
        let plan = param_plan(&spec)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = BTreeMap::new();
        for (name, shape, kind) in plan {
            let numel: usize = shape.iter().product();
            let data: Vec<T> = match kind {
                InitKind::FanInUniform(fan_in) => {
                    let bound = 1.0 / (fan_in as f64).sqrt();
                    (0..numel)
                        .map(|_| T::from_f64(rng.gen_range(-bound..bound)))
                        .collect()
                }
                InitKind::Normal(stddev) => {
                    let dist = Normal::new(0.0, stddev).expect("valid stddev");
                    (0..numel)
                        .map(|_| T::from_f64(dist.sample(&mut rng)))
                        .collect()
                }
                InitKind::Zero => vec![T::zero(); numel],
            };
            params.insert(name, Tensor::from_vec(shape, data)?);
        }
        Ok(Model { spec, params })
    }

    /// Rebuild a model from externally loaded tensors, validating names
    /// and shapes against the spec's parameter plan.
    pub fn from_params(spec: ModelSpec, params: BTreeMap<String, Tensor<T>>) -> Result<Self> {
        let plan = param_plan(&spec)?;
        if plan.len() != params.len() {
            return Err(Error::contract(format!(
                "model {} expects {} parameter tensors, got {}",
                spec.name,
                plan.len(),
                params.len()
            )));
        }
        for (name, shape, _) in &plan {
            match params.get(name) {
                Some(t) if t.shape() == shape.as_slice() => {}
                Some(t) => {
                    return Err(Error::shape(format!(
                        "parameter {} has shape {:?}, expected {:?}",
                        name,
                        t.shape(),
                        shape
                    )))
                }
                None => {
                    return Err(Error::contract(format!("missing parameter tensor {}", name)))
                }
            }
        }
        Ok(Model { spec, params })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn params(&self) -> &BTreeMap<String, Tensor<T>> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut BTreeMap<String, Tensor<T>> {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    /// Cast every parameter into another precision.
    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            spec: self.spec.clone(),
            params: self
                .params
                .iter()
                .map(|(k, v)| (k.clone(), v.cast()))
                .collect(),
        }
    }

    fn check_input(&self, input: &Tensor<T>) -> Result<()> {
        let ok = match self.spec.input {
            InputShape::Image { channels, side } => input.shape() == [channels, side, side],
            InputShape::Features { len } => input.shape() == [len],
        };
        if !ok {
            return Err(Error::shape(format!(
                "model {} expects input {:?}, got {:?}",
                self.spec.name, self.spec.input, input.shape()
            )));
        }
        Ok(())
    }

    /// Run the full stack on a tape. `mask` picks the capsule fed to the
    /// reconstruction decoder; softmax models ignore it.
    pub fn forward(
        &self,
        tape: &mut Tape<T>,
        input: &Tensor<T>,
        mask: MaskMode,
    ) -> Result<ForwardPass> {
        self.check_input(input)?;
        let mut param_nodes = BTreeMap::new();
        for (name, tensor) in &self.params {
            param_nodes.insert(name.clone(), tape.leaf(tensor.clone()));
        }
        let input_node = tape.leaf(input.clone());

        let mut cur = input_node;
        let mut output = None;
        let mut caps_nodes: Option<(NodeId, NodeId)> = None; // (capsules, norms)
        for (idx, layer) in self.spec.layers.iter().enumerate() {
            let node = |suffix: &str| param_nodes[&format!("l{:02}.{}", idx, suffix)];
            match layer {
                LayerSpec::Conv {
                    stride,
                    padding,
                    activation,
                    ..
                } => {
                    let lin = tape.conv2d(cur, node("kernels"), node("bias"), *stride, *padding)?;
                    cur = tape.activation(lin, *activation);
                }
                LayerSpec::MaxPool => {
                    cur = tape.maxpool2(cur)?;
                }
                LayerSpec::Dense { activation, .. } => {
                    let flat = self.flatten(tape, cur)?;
                    let lin = tape.dense(flat, node("weights"), node("bias"))?;
                    cur = tape.activation(lin, *activation);
                }
                LayerSpec::PrimaryCaps {
                    stride,
                    padding,
                    n_types,
                    dim,
                    ..
                } => {
                    let maps =
                        tape.conv2d(cur, node("kernels"), node("bias"), *stride, *padding)?;
                    let grouped = tape.primary_caps_regroup(maps, *n_types, *dim)?;
                    cur = tape.squash(grouped)?;
                }
                LayerSpec::ClassCaps {
                    routing_iterations, ..
                } => {
                    let votes = tape.compute_votes(cur, node("w"))?;
                    let routed =
                        capsule::dynamic_routing_on_tape(tape, votes, *routing_iterations)?;
                    let norms = tape.caps_norms(routed.outputs)?;
                    caps_nodes = Some((routed.outputs, norms));
                    cur = routed.outputs;
                }
                LayerSpec::Decoder(dec) => {
                    let (capsules, norms) = caps_nodes.expect("validated: decoder after caps");
                    let selected = match mask {
                        MaskMode::Label(label) => {
                            if label >= self.spec.n_classes {
                                return Err(Error::Index(format!(
                                    "mask label {} out of range for {} classes",
                                    label, self.spec.n_classes
                                )));
                            }
                            label
                        }
                        MaskMode::Infer => argmax(tape.value(norms).data()),
                    };
                    let mut d = tape.mask_capsules(capsules, selected)?;
                    let last = dec.fc_sizes.len() - 1;
                    for (i, _) in dec.fc_sizes.iter().enumerate() {
                        let lin = tape.dense(
                            d,
                            node(&format!("fc{}.weights", i)),
                            node(&format!("fc{}.bias", i)),
                        )?;
                        let act = if i == last {
                            Activation::Sigmoid
                        } else {
                            Activation::Relu
                        };
                        d = tape.activation(lin, act);
                    }
                    let recon = tape.reshape(d, vec![dec.output_side, dec.output_side])?;
                    let recon_target = tape.channel_mean(input_node)?;
                    output = Some(ForwardOutput::Capsule {
                        capsules,
                        norms,
                        recon,
                        recon_target,
                    });
                }
                LayerSpec::Lstm { units } => {
                    let x = self.flatten(tape, cur)?;
                    let h0 = tape.leaf(Tensor::zeros(vec![*units]));
                    let c0 = tape.leaf(Tensor::zeros(vec![*units]));
                    let gates = LstmNodeParams {
                        w_i: node("w_i"),
                        w_f: node("w_f"),
                        w_g: node("w_g"),
                        w_o: node("w_o"),
                        b_i: node("b_i"),
                        b_f: node("b_f"),
                        b_g: node("b_g"),
                        b_o: node("b_o"),
                    };
                    let (h, _c) = lstm_step_on_tape(tape, x, h0, c0, &gates)?;
                    cur = h;
                }
                LayerSpec::SoftmaxHead => {
                    let flat = self.flatten(tape, cur)?;
                    let logits = tape.dense(flat, node("weights"), node("bias"))?;
                    cur = logits;
                    output = Some(ForwardOutput::Softmax { logits });
                }
            }
        }
        let output = output.ok_or_else(|| Error::contract("model produced no classifier output"))?;
        Ok(ForwardPass {
            param_nodes,
            input_node,
            output,
        })
    }

    fn flatten(&self, tape: &mut Tape<T>, id: NodeId) -> Result<NodeId> {
        if tape.value(id).shape().len() == 1 {
            Ok(id)
        } else {
            let n = tape.value(id).numel();
            tape.reshape(id, vec![n])
        }
    }

    /// Classify one input. Capsule models score by capsule norm, softmax
    /// models by class probability; `scores` always has one entry per
    /// class and `class_index` is its argmax.
    pub fn predict(&self, input: &Tensor<T>) -> Result<Prediction> {
        let mut tape = Tape::new();
        let pass = self.forward(&mut tape, input, MaskMode::Infer)?;
        let scores: Vec<f64> = match &pass.output {
            ForwardOutput::Capsule { norms, .. } => {
                tape.value(*norms).data().iter().map(|v| v.as_f64()).collect()
            }
            ForwardOutput::Softmax { logits } => softmax_axis(tape.value(*logits), 0)?
                .data()
                .iter()
                .map(|v| v.as_f64())
                .collect(),
        };
        let class_index = argmax_f64(&scores);
        Ok(Prediction {
            class_index,
            confidence: scores[class_index],
            scores,
        })
    }
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

fn argmax_f64(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::zoo;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(seed: u64, channels: usize, side: usize) -> Tensor<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_vec(
            vec![channels, side, side],
            (0..channels * side * side)
                .map(|_| rng.gen_range(0.0..1.0))
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn init_is_deterministic_and_matches_spec_count() {
        let spec = zoo::build_capsule_base(1, 16, 5).unwrap();
        let a = Model::<f32>::init(spec.clone(), 7).unwrap();
        let b = Model::<f32>::init(spec.clone(), 7).unwrap();
        assert_eq!(a.param_count(), spec.param_count().unwrap());
        for (k, v) in a.params() {
            assert_eq!(v.data(), b.params()[k].data());
        }
        let c = Model::<f32>::init(spec, 8).unwrap();
        assert!(a.params().values().zip(c.params().values()).any(|(x, y)| x.data() != y.data()));
    }

    #[test]
    fn forward_yields_finite_scores_for_every_builder() {
        let checks: Vec<ModelSpec> = vec![
            zoo::build_capsule_base(1, 16, 3).unwrap(),
            zoo::build_baseline_convnet(1, 16, 3).unwrap(),
            zoo::build_mlp_head(12, 3).unwrap(),
        ];
        for spec in checks {
            let input = match spec.input {
                InputShape::Image { channels, side } => random_image(1, channels, side),
                InputShape::Features { len } => {
                    let mut rng = ChaCha8Rng::seed_from_u64(2);
                    Tensor::from_vec(vec![len], (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect())
                        .unwrap()
                }
            };
            let model = Model::<f32>::init(spec, 3).unwrap();
            let pred = model.predict(&input).unwrap();
            assert!(pred.scores.iter().all(|s| s.is_finite()));
            assert_eq!(pred.scores.len(), model.spec().n_classes);
        }
    }

    #[test]
    fn capsule_confidence_is_below_one() {
        let spec = zoo::build_capsule_base(1, 16, 3).unwrap();
        let model = Model::<f32>::init(spec, 11).unwrap();
        let pred = model.predict(&random_image(4, 1, 16)).unwrap();
        assert!(pred.confidence < 1.0);
    }

    #[test]
    fn softmax_scores_sum_to_one() {
        let model = Model::<f64>::init(zoo::build_mlp_head(10, 4).unwrap(), 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = Tensor::from_vec(vec![10], (0..10).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .unwrap();
        let pred = model.predict(&x).unwrap();
        let sum: f64 = pred.scores.iter().sum();
        assert!((sum - 1.0).abs() < 1e-9);
    }

    #[test]
    fn prediction_class_is_argmax_of_scores() {
        let model = Model::<f32>::init(zoo::build_baseline_convnet(1, 16, 5).unwrap(), 9).unwrap();
        let pred = model.predict(&random_image(3, 1, 16)).unwrap();
        let argmax = pred
            .scores
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .unwrap()
            .0;
        assert_eq!(pred.class_index, argmax);
    }

    #[test]
    fn input_shape_mismatch_is_rejected() {
        let model = Model::<f32>::init(zoo::build_capsule_base(1, 16, 3).unwrap(), 1).unwrap();
        assert!(model.predict(&random_image(0, 1, 32)).is_err());
        assert!(model.predict(&random_image(0, 3, 16)).is_err());
    }

    #[test]
    fn from_params_round_trips_and_rejects_mismatch() {
        let spec = zoo::build_mlp_head(8, 3).unwrap();
        let model = Model::<f32>::init(spec.clone(), 2).unwrap();
        let rebuilt = Model::from_params(spec.clone(), model.params().clone()).unwrap();
        assert_eq!(rebuilt.param_count(), model.param_count());

        let mut bad = model.params().clone();
        let w = bad["l00.weights"].clone();
        bad.insert("l00.weights".into(), w.reshape(vec![w.numel()]).unwrap());
        assert!(Model::from_params(spec, bad).is_err());
    }
}
