//! Finite-difference gradient verification in double precision: central
//! differences per parameter element against tape gradients, runnable per
//! layer kind or on downscaled end-to-end clones of the zoo models.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::linalg::{Activation, Padding};
use crate::model::{MaskMode, Model};
use crate::objective::{DecoderSpec, MarginLossConfig};
use crate::tape::Tape;
use crate::tensor::Tensor;
use crate::train::{build_loss, resolve_recon_weight};
use crate::zoo::{InputShape, LayerSpec, ModelSpec};

/// Maximum relative error accepted between tape and finite-difference
/// gradients.
pub const TOLERANCE: f64 = 1e-4;

type Params = BTreeMap<String, Tensor<f64>>;

/// Central difference `(f(x + eps e_i) - f(x - eps e_i)) / (2 eps)` per
/// element, evaluated in double precision.
pub fn finite_diff_grad(
    mut f: impl FnMut(&Tensor<f64>) -> f64,
    x: &Tensor<f64>,
    eps: f64,
) -> Result<Tensor<f64>> {
    if eps <= 0.0 {
        return Err(Error::contract("finite difference step must be positive"));
    }
    let mut grad = vec![0.0; x.numel()];
    let mut probe = x.clone();
    for (i, g) in grad.iter_mut().enumerate() {
        let original = probe.data()[i];
        probe.data_mut()[i] = original + eps;
        let plus = f(&probe);
        probe.data_mut()[i] = original - eps;
        let minus = f(&probe);
        probe.data_mut()[i] = original;
        *g = (plus - minus) / (2.0 * eps);
    }
    Tensor::from_vec(x.shape().to_vec(), grad)
}

/// Max relative error between analytic gradients and central differences
/// over every element of every parameter. The step adapts to the element
/// magnitude; the error denominator is floored so near-zero gradients
/// cannot fabricate failures.
pub fn compare_with_finite_diff(
    params: &Params,
    analytic: &Params,
    eval: impl Fn(&Params) -> Result<f64>,
) -> Result<f64> {
    let mut worst: f64 = 0.0;
    for (name, tensor) in params {
        let grads = analytic.get(name).ok_or_else(|| {
            Error::contract(format!("analytic gradients missing parameter {}", name))
        })?;
        let mut probe = params.clone();
        for i in 0..tensor.numel() {
            let original = tensor.data()[i];
            let eps = 1e-5 * original.abs().max(1.0);
            probe.get_mut(name).unwrap().data_mut()[i] = original + eps;
            let plus = eval(&probe)?;
            probe.get_mut(name).unwrap().data_mut()[i] = original - eps;
            let minus = eval(&probe)?;
            probe.get_mut(name).unwrap().data_mut()[i] = original;
            let fd = (plus - minus) / (2.0 * eps);
            let a = grads.data()[i];
            let err = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-6);
            if err > worst {
                worst = err;
            }
        }
    }
    Ok(worst)
}

/// Run a case once for analytic gradients, then sweep finite differences.
fn check_case(params: &Params, run: impl Fn(&Params) -> Result<(f64, Params)>) -> Result<f64> {
    let (_, analytic) = run(params)?;
    compare_with_finite_diff(params, &analytic, |p| run(p).map(|(loss, _)| loss))
}

/// Outcome of checking one layer kind or model clone.
#[derive(Debug, Clone)]
pub struct KindReport {
    pub kind: String,
    pub trials: usize,
    pub max_rel_err: f64,
}

impl KindReport {
    pub fn new(kind: impl Into<String>, trials: usize, max_rel_err: f64) -> Self {
        KindReport {
            kind: kind.into(),
            trials,
            max_rel_err,
        }
    }

    pub fn passed(&self) -> bool {
        self.max_rel_err < TOLERANCE
    }
}

/// Collected per-kind results.
#[derive(Debug, Clone, Default)]
pub struct GradCheckReport {
    pub kinds: Vec<KindReport>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        !self.kinds.is_empty() && self.kinds.iter().all(KindReport::passed)
    }

    /// Names of the kinds whose gradients disagreed.
    pub fn failing(&self) -> Vec<&str> {
        self.kinds
            .iter()
            .filter(|k| !k.passed())
            .map(|k| k.kind.as_str())
            .collect()
    }
}

/// Layer-kind check names.
pub const KIND_NAMES: &[&str] = &[
    "conv2d",
    "maxpool",
    "dense",
    "squash",
    "routing",
    "margin-loss",
    "decoder",
    "lstm-cell",
];

/// Downscaled end-to-end clones (same layer kinds, tiny widths).
pub const TINY_MODEL_NAMES: &[&str] = &[
    "tiny-capsule32-v1",
    "tiny-capsule32-v2",
    "tiny-baseline-convnet",
    "tiny-mlp-head",
    "tiny-lstm-head",
];

fn rand_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>, lo: f64, hi: f64) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(lo..hi)).collect()).expect("shape")
}

fn grads_for(
    tape: &Tape<f64>,
    params: &Params,
    nodes: &BTreeMap<String, crate::tape::NodeId>,
    loss: crate::tape::NodeId,
) -> Result<(f64, Params)> {
    let grads = tape.backward(loss)?;
    let mut out = Params::new();
    for (name, node) in nodes {
        out.insert(name.clone(), grads.get_or_zeros(*node, params[name].shape()));
    }
    Ok((tape.value(loss).item(), out))
}

fn trial_conv2d(trial: usize, rng: &mut ChaCha8Rng) -> Result<f64> {
    let (stride, padding) = match trial % 4 {
        0 => (1, Padding::Valid),
        1 => (2, Padding::Valid),
        2 => (1, Padding::Same),
        _ => (2, Padding::Same),
    };
    let mut params = Params::new();
    params.insert("x".into(), rand_tensor(rng, vec![2, 5, 5], -1.0, 1.0));
    params.insert("k".into(), rand_tensor(rng, vec![3, 2, 3, 3], -1.0, 1.0));
    params.insert("b".into(), rand_tensor(rng, vec![3], -0.5, 0.5));
    let probe_shape = crate::linalg::ConvGeom::resolve(&[2, 5, 5], &[3, 2, 3, 3], stride, padding)?;
    let weights = rand_tensor(
        rng,
        vec![3, probe_shape.out_h, probe_shape.out_w],
        -1.0,
        1.0,
    );
    check_case(&params, move |p| {
        let mut tape = Tape::new();
        let mut nodes = BTreeMap::new();
        for (name, value) in p {
            nodes.insert(name.clone(), tape.leaf(value.clone()));
        }
        let r = tape.leaf(weights.clone());
        let conv = tape.conv2d(nodes["x"], nodes["k"], nodes["b"], stride, padding)?;
        let weighted = tape.mul(conv, r)?;
        let loss = tape.sum_all(weighted);
        grads_for(&tape, p, &nodes, loss)
    })
}

fn trial_maxpool(rng: &mut ChaCha8Rng) -> Result<f64> {
    let mut params = Params::new();
    params.insert("x".into(), rand_tensor(rng, vec![2, 4, 4], -1.0, 1.0));
    let weights = rand_tensor(rng, vec![2, 2, 2], -1.0, 1.0);
    check_case(&params, move |p| {
        let mut tape = Tape::new();
        let x = tape.leaf(p["x"].clone());
        let mut nodes = BTreeMap::new();
        nodes.insert("x".to_string(), x);
        let r = tape.leaf(weights.clone());
        let pooled = tape.maxpool2(x)?;
        let weighted = tape.mul(pooled, r)?;
        let loss = tape.sum_all(weighted);
        grads_for(&tape, p, &nodes, loss)
    })
}

fn trial_dense(rng: &mut ChaCha8Rng) -> Result<f64> {
    let mut params = Params::new();
    params.insert("x".into(), rand_tensor(rng, vec![5], -1.0, 1.0));
    params.insert("w".into(), rand_tensor(rng, vec![4, 5], -1.0, 1.0));
    params.insert("b".into(), rand_tensor(rng, vec![4], -0.5, 0.5));
    let weights = rand_tensor(rng, vec![4], -1.0, 1.0);
    check_case(&params, move |p| {
        let mut tape = Tape::new();
        let mut nodes = BTreeMap::new();
        for (name, value) in p {
            nodes.insert(name.clone(), tape.leaf(value.clone()));
        }
        let r = tape.leaf(weights.clone());
        let y = tape.dense(nodes["x"], nodes["w"], nodes["b"])?;
        let weighted = tape.mul(y, r)?;
        let loss = tape.sum_all(weighted);
        grads_for(&tape, p, &nodes, loss)
    })
}

fn trial_squash(rng: &mut ChaCha8Rng) -> Result<f64> {
    let mut params = Params::new();
    params.insert("x".into(), rand_tensor(rng, vec![3, 4], -1.5, 1.5));
    let weights = rand_tensor(rng, vec![3, 4], -1.0, 1.0);
    check_case(&params, move |p| {
        let mut tape = Tape::new();
        let x = tape.leaf(p["x"].clone());
        let mut nodes = BTreeMap::new();
        nodes.insert("x".to_string(), x);
        let r = tape.leaf(weights.clone());
        let squashed = tape.squash(x)?;
        let weighted = tape.mul(squashed, r)?;
        let loss = tape.sum_all(weighted);
        grads_for(&tape, p, &nodes, loss)
    })
}

fn trial_routing(trial: usize, rng: &mut ChaCha8Rng) -> Result<f64> {
    // Alternate between the 2x2 capsule toy and a slightly larger grid;
    // gradients flow through the full unrolled iteration count.
    let (n_in, n_out, d, iterations) = if trial % 2 == 0 {
        (2, 2, 3, 3)
    } else {
        (3, 2, 4, 2)
    };
    let mut params = Params::new();
    params.insert(
        "votes".into(),
        rand_tensor(rng, vec![n_in, n_out, d], -1.0, 1.0),
    );
    let weights = rand_tensor(rng, vec![n_out, d], -1.0, 1.0);
    check_case(&params, move |p| {
        let mut tape = Tape::new();
        let votes = tape.leaf(p["votes"].clone());
        let mut nodes = BTreeMap::new();
        nodes.insert("votes".to_string(), votes);
        let r = tape.leaf(weights.clone());
        let routed = crate::capsule::dynamic_routing_on_tape(&mut tape, votes, iterations)?;
        let weighted = tape.mul(routed.outputs, r)?;
        let loss = tape.sum_all(weighted);
        grads_for(&tape, p, &nodes, loss)
    })
}

fn trial_margin_loss(trial: usize, rng: &mut ChaCha8Rng) -> Result<f64> {
    let target = trial % 4;
    let cfg = MarginLossConfig::default();
    let mut params = Params::new();
    params.insert("v".into(), rand_tensor(rng, vec![4, 3], -0.6, 0.6));
    check_case(&params, move |p| {
        let mut tape = Tape::new();
        let v = tape.leaf(p["v"].clone());
        let mut nodes = BTreeMap::new();
        nodes.insert("v".to_string(), v);
        let norms = tape.caps_norms(v)?;
        let loss = tape.margin_loss(norms, target, &cfg)?;
        grads_for(&tape, p, &nodes, loss)
    })
}

fn trial_decoder(trial: usize, rng: &mut ChaCha8Rng) -> Result<f64> {
    let selected = trial % 3;
    let mut params = Params::new();
    params.insert("v".into(), rand_tensor(rng, vec![3, 4], -0.8, 0.8));
    params.insert("w0".into(), rand_tensor(rng, vec![6, 12], -0.5, 0.5));
    params.insert("b0".into(), rand_tensor(rng, vec![6], -0.2, 0.2));
    params.insert("w1".into(), rand_tensor(rng, vec![16, 6], -0.5, 0.5));
    params.insert("b1".into(), rand_tensor(rng, vec![16], -0.2, 0.2));
    let target = rand_tensor(rng, vec![4, 4], 0.0, 1.0);
    check_case(&params, move |p| {
        let mut tape = Tape::new();
        let mut nodes = BTreeMap::new();
        for (name, value) in p {
            nodes.insert(name.clone(), tape.leaf(value.clone()));
        }
        let masked = tape.mask_capsules(nodes["v"], selected)?;
        let h_lin = tape.dense(masked, nodes["w0"], nodes["b0"])?;
        let h = tape.activation(h_lin, Activation::Relu);
        let o_lin = tape.dense(h, nodes["w1"], nodes["b1"])?;
        let o = tape.activation(o_lin, Activation::Sigmoid);
        let image = tape.reshape(o, vec![4, 4])?;
        let t = tape.leaf(target.clone());
        let loss = tape.sq_diff_sum(t, image)?;
        grads_for(&tape, p, &nodes, loss)
    })
}

fn trial_lstm_cell(rng: &mut ChaCha8Rng) -> Result<f64> {
    let (input, units) = (4usize, 3usize);
    let z = input + units;
    let mut params = Params::new();
    params.insert("x".into(), rand_tensor(rng, vec![input], -1.0, 1.0));
    params.insert("h".into(), rand_tensor(rng, vec![units], -1.0, 1.0));
    params.insert("c".into(), rand_tensor(rng, vec![units], -1.0, 1.0));
    for gate in ["i", "f", "g", "o"] {
        params.insert(format!("w_{}", gate), rand_tensor(rng, vec![units, z], -0.7, 0.7));
        params.insert(format!("b_{}", gate), rand_tensor(rng, vec![units], -0.3, 0.3));
    }
    let r_h = rand_tensor(rng, vec![units], -1.0, 1.0);
    let r_c = rand_tensor(rng, vec![units], -1.0, 1.0);
    check_case(&params, move |p| {
        let mut tape = Tape::new();
        let mut nodes = BTreeMap::new();
        for (name, value) in p {
            nodes.insert(name.clone(), tape.leaf(value.clone()));
        }
        let gates = crate::lstm::LstmNodeParams {
            w_i: nodes["w_i"],
            w_f: nodes["w_f"],
            w_g: nodes["w_g"],
            w_o: nodes["w_o"],
            b_i: nodes["b_i"],
            b_f: nodes["b_f"],
            b_g: nodes["b_g"],
            b_o: nodes["b_o"],
        };
        let (h_out, c_out) =
            crate::lstm::lstm_step_on_tape(&mut tape, nodes["x"], nodes["h"], nodes["c"], &gates)?;
        let rh = tape.leaf(r_h.clone());
        let rc = tape.leaf(r_c.clone());
        let wh = tape.mul(h_out, rh)?;
        let wc = tape.mul(c_out, rc)?;
        let sh = tape.sum_all(wh);
        let sc = tape.sum_all(wc);
        let loss = tape.add(sh, sc)?;
        grads_for(&tape, p, &nodes, loss)
    })
}

/// Downscaled clone of a zoo model, preserving its layer-kind sequence.
pub fn tiny_model_spec(name: &str) -> Result<ModelSpec> {
    let conv = |filters, padding| LayerSpec::Conv {
        filters,
        kernel: 3,
        stride: 1,
        padding,
        activation: Activation::Relu,
    };
    let spec = match name {
        "tiny-capsule32-v1" => ModelSpec {
            name: name.into(),
            input: InputShape::Image {
                channels: 1,
                side: 8,
            },
            layers: vec![
                conv(4, Padding::Same),
                conv(8, Padding::Valid),
                LayerSpec::PrimaryCaps {
                    kernel: 3,
                    stride: 2,
                    padding: Padding::Same,
                    n_types: 2,
                    dim: 2,
                },
                LayerSpec::ClassCaps {
                    n_capsules: 3,
                    dim: 3,
                    routing_iterations: 3,
                },
                LayerSpec::Decoder(DecoderSpec::new(vec![8, 64], 8)?),
            ],
            n_classes: 3,
        },
        "tiny-capsule32-v2" => ModelSpec {
            name: name.into(),
            input: InputShape::Image {
                channels: 1,
                side: 8,
            },
            layers: vec![
                conv(4, Padding::Same),
                LayerSpec::MaxPool,
                conv(4, Padding::Same),
                conv(6, Padding::Valid),
                LayerSpec::PrimaryCaps {
                    kernel: 3,
                    stride: 2,
                    padding: Padding::Same,
                    n_types: 2,
                    dim: 3,
                },
                LayerSpec::ClassCaps {
                    n_capsules: 3,
                    dim: 3,
                    routing_iterations: 3,
                },
                LayerSpec::Decoder(DecoderSpec::new(vec![8, 64], 8)?),
            ],
            n_classes: 3,
        },
        "tiny-baseline-convnet" => ModelSpec {
            name: name.into(),
            input: InputShape::Image {
                channels: 1,
                side: 8,
            },
            layers: vec![
                conv(4, Padding::Same),
                LayerSpec::MaxPool,
                conv(4, Padding::Same),
                LayerSpec::MaxPool,
                LayerSpec::Dense {
                    width: 8,
                    activation: Activation::Relu,
                },
                LayerSpec::SoftmaxHead,
            ],
            n_classes: 3,
        },
        "tiny-mlp-head" => ModelSpec {
            name: name.into(),
            input: InputShape::Features { len: 6 },
            layers: vec![
                LayerSpec::Dense {
                    width: 8,
                    activation: Activation::Relu,
                },
                LayerSpec::Dense {
                    width: 8,
                    activation: Activation::Relu,
                },
                LayerSpec::SoftmaxHead,
            ],
            n_classes: 3,
        },
        "tiny-lstm-head" => ModelSpec {
            name: name.into(),
            input: InputShape::Features { len: 5 },
            layers: vec![
                LayerSpec::Lstm { units: 6 },
                LayerSpec::Dense {
                    width: 4,
                    activation: Activation::Relu,
                },
                LayerSpec::SoftmaxHead,
            ],
            n_classes: 3,
        },
        other => {
            return Err(Error::contract(format!(
                "unknown gradcheck model '{}'; known: {}",
                other,
                TINY_MODEL_NAMES.join(", ")
            )))
        }
    };
    spec.validate()?;
    Ok(spec)
}

fn trial_model(spec: &ModelSpec, trial: usize, rng: &mut ChaCha8Rng) -> Result<f64> {
    let model = Model::<f64>::init(spec.clone(), 1000 + trial as u64)?;
    let input = match spec.input {
        InputShape::Image { channels, side } => {
            rand_tensor(rng, vec![channels, side, side], 0.0, 1.0)
        }
        InputShape::Features { len } => rand_tensor(rng, vec![len], -1.0, 1.0),
    };
    let target = rng.gen_range(0..spec.n_classes);
    let recon_weight = resolve_recon_weight(spec, None);
    let margin_cfg = MarginLossConfig::default();
    let spec_clone = spec.clone();
    check_case(model.params(), move |p| {
        let probe = Model::from_params(spec_clone.clone(), p.clone())?;
        let mut tape = Tape::new();
        let pass = probe.forward(&mut tape, &input, MaskMode::Label(target))?;
        let loss = build_loss(&mut tape, &pass.output, target, &margin_cfg, recon_weight)?;
        grads_for(&tape, p, &pass.param_nodes, loss)
    })
}

/// Check one named kind or tiny model over `trials` random draws.
pub fn check_named(name: &str, trials: usize, seed: u64) -> Result<KindReport> {
    if trials == 0 {
        return Err(Error::contract("gradcheck needs at least 1 trial"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for trial in 0..trials {
        let err = match name {
            "conv2d" => trial_conv2d(trial, &mut rng)?,
            "maxpool" => trial_maxpool(&mut rng)?,
            "dense" => trial_dense(&mut rng)?,
            "squash" => trial_squash(&mut rng)?,
            "routing" => trial_routing(trial, &mut rng)?,
            "margin-loss" => trial_margin_loss(trial, &mut rng)?,
            "decoder" => trial_decoder(trial, &mut rng)?,
            "lstm-cell" => trial_lstm_cell(&mut rng)?,
            model_name if TINY_MODEL_NAMES.contains(&model_name) => {
                let spec = tiny_model_spec(model_name)?;
                trial_model(&spec, trial, &mut rng)?
            }
            other => {
                return Err(Error::contract(format!(
                    "unknown gradcheck target '{}'; known: {}, {}",
                    other,
                    KIND_NAMES.join(", "),
                    TINY_MODEL_NAMES.join(", ")
                )))
            }
        };
        if err > worst {
            worst = err;
        }
    }
    Ok(KindReport::new(name, trials, worst))
}

/// Check every layer kind and every tiny model clone.
pub fn check_all(kind_trials: usize, model_trials: usize, seed: u64) -> Result<GradCheckReport> {
    let mut report = GradCheckReport::default();
    for kind in KIND_NAMES {
        report.kinds.push(check_named(kind, kind_trials, seed)?);
    }
    for name in TINY_MODEL_NAMES {
        report.kinds.push(check_named(name, model_trials, seed)?);
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn finite_diff_of_square_at_three_is_six() {
        let x = Tensor::scalar(3.0f64);
        let grad = finite_diff_grad(|t| t.data()[0] * t.data()[0], &x, 1e-5).unwrap();
        assert!((grad.data()[0] - 6.0).abs() < 1e-9);
    }

    #[test]
    fn finite_diff_of_sum_is_ones() {
        let x = Tensor::from_vec(vec![4], vec![0.3, -1.2, 2.0, 0.0]).unwrap();
        let grad = finite_diff_grad(|t| t.data().iter().sum(), &x, 1e-6).unwrap();
        for &g in grad.data() {
            assert!((g - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn finite_diff_sigmoid_sum_matches_analytic() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = rand_tensor(&mut rng, vec![6], -2.0, 2.0);
        let f = |t: &Tensor<f64>| -> f64 {
            t.data().iter().map(|&v| 1.0 / (1.0 + (-v).exp())).sum()
        };
        let grad = finite_diff_grad(f, &x, 1e-5).unwrap();
        for (g, &v) in grad.data().iter().zip(x.data()) {
            let s = 1.0 / (1.0 + (-v).exp());
            assert!((g - s * (1.0 - s)).abs() < 1e-7);
        }
    }

    #[test]
    fn finite_diff_rejects_non_positive_eps() {
        let x = Tensor::scalar(1.0f64);
        assert!(finite_diff_grad(|t| t.data()[0], &x, 0.0).is_err());
    }

    #[test]
    fn every_kind_passes_a_small_run() {
        for kind in KIND_NAMES {
            let report = check_named(kind, 4, 7).unwrap();
            assert!(
                report.passed(),
                "{} max rel err {}",
                kind,
                report.max_rel_err
            );
        }
    }

    #[test]
    fn tiny_models_pass_a_smoke_run() {
        for name in ["tiny-mlp-head", "tiny-lstm-head"] {
            let report = check_named(name, 2, 3).unwrap();
            assert!(report.passed(), "{}: {}", name, report.max_rel_err);
        }
    }

    #[test]
    fn corrupted_gradient_rule_fails_with_the_kind_named() {
        // A deliberately wrong backward rule for f = sum(x^2): claims
        // 2.2x instead of 2x. The checker must flag it by name.
        let mut params = Params::new();
        params.insert(
            "x".into(),
            Tensor::from_vec(vec![3], vec![0.7, -0.4, 1.3]).unwrap(),
        );
        let run = |p: &Params| -> Result<(f64, Params)> {
            let x = &p["x"];
            let loss = x.data().iter().map(|v| v * v).sum();
            let mut grads = Params::new();
            grads.insert("x".into(), x.map(|v| 2.2 * v));
            Ok((loss, grads))
        };
        let (_, analytic) = run(&params).unwrap();
        let err =
            compare_with_finite_diff(&params, &analytic, |p| run(p).map(|(l, _)| l)).unwrap();
        let report = GradCheckReport {
            kinds: vec![KindReport::new("corrupted-dense", 1, err)],
        };
        assert!(!report.passed());
        assert_eq!(report.failing(), vec!["corrupted-dense"]);
    }

    #[test]
    fn unknown_target_is_rejected() {
        assert!(check_named("no-such-kind", 1, 0).is_err());
    }
}
