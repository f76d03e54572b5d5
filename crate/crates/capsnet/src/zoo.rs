//! Declarative model specs and builders for every architecture the engine
//! supports: the capsule base at 16/32/64 input, the two extended capsule
//! variants, the small baseline ConvNet, and the MLP/LSTM heads over
//! precomputed backbone feature vectors.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{Activation, ConvGeom, Padding};
use crate::objective::DecoderSpec;

/// What a model consumes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum InputShape {
    Image { channels: usize, side: usize },
    Features { len: usize },
}

/// One layer of a model stack.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum LayerSpec {
    Conv {
        filters: usize,
        kernel: usize,
        stride: usize,
        padding: Padding,
        activation: Activation,
    },
    MaxPool,
    Dense {
        width: usize,
        activation: Activation,
    },
    /// Convolution to `n_types * dim` feature maps, regrouped into capsule
    /// vectors and squashed.
    PrimaryCaps {
        kernel: usize,
        stride: usize,
        padding: Padding,
        n_types: usize,
        dim: usize,
    },
    /// Fully connected capsule layer with routing by agreement.
    ClassCaps {
        n_capsules: usize,
        dim: usize,
        routing_iterations: usize,
    },
    /// Reconstruction branch fed by the masked class capsules.
    Decoder(DecoderSpec),
    Lstm {
        units: usize,
    },
    /// Final dense layer to `n_classes` logits; probabilities via softmax.
    SoftmaxHead,
}

/// Declarative description of a full model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub name: String,
    pub input: InputShape,
    pub layers: Vec<LayerSpec>,
    pub n_classes: usize,
}

/// Shape flowing between layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Flow {
    Image { channels: usize, h: usize, w: usize },
    Vector { len: usize },
    Capsules { n: usize, dim: usize },
}

impl Flow {
    /// Element count when flattened to a vector.
    pub fn flat_len(&self) -> usize {
        match self {
            Flow::Image { channels, h, w } => channels * h * w,
            Flow::Vector { len } => *len,
            Flow::Capsules { n, dim } => n * dim,
        }
    }
}

fn expect_image(flow: &Flow, idx: usize) -> Result<(usize, usize, usize)> {
    match flow {
        Flow::Image { channels, h, w } => Ok((*channels, *h, *w)),
        other => Err(Error::shape(format!(
            "layer {} needs image input, got {:?}",
            idx, other
        ))),
    }
}

/// Shape composition of a single layer. The decoder is a side branch and
/// leaves the main flow unchanged.
fn transition(flow: Flow, layer: &LayerSpec, idx: usize, n_classes: usize) -> Result<Flow> {
    Ok(match layer {
        LayerSpec::Conv {
            filters,
            kernel,
            stride,
            padding,
            ..
        } => {
            let (c, h, w) = expect_image(&flow, idx)?;
            let g = ConvGeom::resolve(&[c, h, w], &[*filters, c, *kernel, *kernel], *stride, *padding)?;
            Flow::Image {
                channels: *filters,
                h: g.out_h,
                w: g.out_w,
            }
        }
        LayerSpec::MaxPool => {
            let (c, h, w) = expect_image(&flow, idx)?;
            if h % 2 != 0 || w % 2 != 0 {
                return Err(Error::shape(format!(
                    "layer {}: maxpool needs even dims, got {}x{}",
                    idx, h, w
                )));
            }
            Flow::Image {
                channels: c,
                h: h / 2,
                w: w / 2,
            }
        }
        LayerSpec::Dense { width, .. } => {
            if *width == 0 {
                return Err(Error::contract("dense width must be positive"));
            }
            Flow::Vector { len: *width }
        }
        LayerSpec::PrimaryCaps {
            kernel,
            stride,
            padding,
            n_types,
            dim,
        } => {
            let (c, h, w) = expect_image(&flow, idx)?;
            if *n_types == 0 || *dim == 0 {
                return Err(Error::contract("primary caps need positive types and dims"));
            }
            let g = ConvGeom::resolve(
                &[c, h, w],
                &[n_types * dim, c, *kernel, *kernel],
                *stride,
                *padding,
            )?;
            Flow::Capsules {
                n: n_types * g.out_h * g.out_w,
                dim: *dim,
            }
        }
        LayerSpec::ClassCaps {
            n_capsules, dim, ..
        } => {
            if !matches!(flow, Flow::Capsules { .. }) {
                return Err(Error::shape(format!(
                    "layer {}: class capsules need capsule input, got {:?}",
                    idx, flow
                )));
            }
            if *n_capsules != n_classes {
                return Err(Error::contract(format!(
                    "class capsule count {} must equal n_classes {}",
                    n_capsules, n_classes
                )));
            }
            Flow::Capsules {
                n: *n_capsules,
                dim: *dim,
            }
        }
        LayerSpec::Decoder(spec) => {
            match flow {
                Flow::Capsules { .. } => {}
                other => {
                    return Err(Error::shape(format!(
                        "layer {}: decoder needs class-capsule input, got {:?}",
                        idx, other
                    )))
                }
            }
            DecoderSpec::new(spec.fc_sizes.clone(), spec.output_side)?;
            flow
        }
        LayerSpec::Lstm { units } => {
            if *units == 0 {
                return Err(Error::contract("lstm needs positive unit count"));
            }
            Flow::Vector { len: *units }
        }
        LayerSpec::SoftmaxHead => Flow::Vector { len: n_classes },
    })
}

impl ModelSpec {
    fn input_flow(&self) -> Result<Flow> {
        Ok(match self.input {
            InputShape::Image { channels, side } => {
                if channels == 0 || side == 0 {
                    return Err(Error::contract("image input needs positive dimensions"));
                }
                Flow::Image {
                    channels,
                    h: side,
                    w: side,
                }
            }
            InputShape::Features { len } => {
                if len == 0 {
                    return Err(Error::contract("feature length must be positive"));
                }
                Flow::Vector { len }
            }
        })
    }

    /// The flow each layer consumes (`flows[i]` feeds `layers[i]`).
    pub fn layer_input_flows(&self) -> Result<Vec<Flow>> {
        let mut flow = self.input_flow()?;
        let mut flows = Vec::with_capacity(self.layers.len());
        for (idx, layer) in self.layers.iter().enumerate() {
            flows.push(flow);
            flow = transition(flow, layer, idx, self.n_classes)?;
        }
        Ok(flows)
    }

    /// Walk the stack, check consecutive shapes compose and the
    /// terminal-layer invariants hold; returns the classifier output flow.
    pub fn validate(&self) -> Result<Flow> {
        if self.n_classes < 2 {
            return Err(Error::contract("a model needs at least 2 classes"));
        }
        let mut flow = self.input_flow()?;
        let mut terminal: Option<Flow> = None;
        let mut saw_decoder = false;
        let mut saw_class_caps = false;
        for (idx, layer) in self.layers.iter().enumerate() {
            if saw_decoder {
                return Err(Error::contract(format!(
                    "layer {} appears after the decoder branch",
                    idx
                )));
            }
            match layer {
                LayerSpec::ClassCaps { .. } | LayerSpec::SoftmaxHead => {
                    if terminal.is_some() {
                        return Err(Error::contract(
                            "model has more than one classification terminal",
                        ));
                    }
                }
                LayerSpec::Decoder(spec) => {
                    if !saw_class_caps {
                        return Err(Error::contract(
                            "decoder requires a preceding class-capsule layer",
                        ));
                    }
                    if let InputShape::Image { side, .. } = self.input {
                        if spec.output_side != side {
                            return Err(Error::contract(format!(
                                "decoder reconstructs {0}x{0} but input is {1}x{1}",
                                spec.output_side, side
                            )));
                        }
                    }
                    saw_decoder = true;
                }
                _ => {}
            }
            flow = transition(flow, layer, idx, self.n_classes)?;
            match layer {
                LayerSpec::ClassCaps { .. } => {
                    saw_class_caps = true;
                    terminal = Some(flow);
                }
                LayerSpec::SoftmaxHead => terminal = Some(flow),
                _ => {}
            }
        }
        let terminal = terminal.ok_or_else(|| {
            Error::contract("model has no classification terminal (class caps or softmax head)")
        })?;
        let is_capsule = matches!(terminal, Flow::Capsules { .. });
        if is_capsule && !saw_decoder {
            return Err(Error::contract("capsule models must carry a decoder"));
        }
        if !is_capsule && saw_decoder {
            return Err(Error::contract("only capsule models carry a decoder"));
        }
        Ok(terminal)
    }

    pub fn is_capsule_model(&self) -> bool {
        self.layers
            .iter()
            .any(|l| matches!(l, LayerSpec::ClassCaps { .. }))
    }

    /// Override the routing iteration count of every class-capsule layer.
    pub fn with_routing_iterations(mut self, iterations: usize) -> Result<Self> {
        if iterations == 0 {
            return Err(Error::contract("routing needs at least 1 iteration"));
        }
        for layer in &mut self.layers {
            if let LayerSpec::ClassCaps {
                routing_iterations, ..
            } = layer
            {
                *routing_iterations = iterations;
            }
        }
        Ok(self)
    }

    /// Trainable parameter count implied by the spec.
    pub fn param_count(&self) -> Result<usize> {
        self.validate()?;
        let flows = self.layer_input_flows()?;
        let mut count = 0usize;
        for (layer, flow) in self.layers.iter().zip(&flows) {
            count += match layer {
                LayerSpec::Conv {
                    filters, kernel, ..
                } => {
                    let (c, _, _) = expect_image(flow, 0)?;
                    filters * c * kernel * kernel + filters
                }
                LayerSpec::MaxPool => 0,
                LayerSpec::Dense { width, .. } => width * flow.flat_len() + width,
                LayerSpec::PrimaryCaps {
                    kernel,
                    n_types,
                    dim,
                    ..
                } => {
                    let (c, _, _) = expect_image(flow, 0)?;
                    let filters = n_types * dim;
                    filters * c * kernel * kernel + filters
                }
                LayerSpec::ClassCaps {
                    n_capsules, dim, ..
                } => match flow {
                    Flow::Capsules { n, dim: d_in } => n * n_capsules * dim * d_in,
                    _ => unreachable!("validated above"),
                },
                LayerSpec::Decoder(spec) => {
                    let mut prev = flow.flat_len();
                    let mut total = 0;
                    for &width in &spec.fc_sizes {
                        total += width * prev + width;
                        prev = width;
                    }
                    total
                }
                LayerSpec::Lstm { units } => {
                    let len = flow.flat_len();
                    4 * (units * (len + units) + units)
                }
                LayerSpec::SoftmaxHead => self.n_classes * flow.flat_len() + self.n_classes,
            };
        }
        Ok(count)
    }
}

/// Capsule stack shared by the base model and the 32-input variants:
/// a 256-filter 9x9 feature conv (valid), a 9x9 stride-2 primary-capsule
/// conv (same padding) regrouped into 16 capsule types of 16 dims, and a
/// routed class-capsule layer of dimension 16.
fn base_capsule_stack(n_classes: usize, layers: &mut Vec<LayerSpec>) {
    layers.push(LayerSpec::Conv {
        filters: 256,
        kernel: 9,
        stride: 1,
        padding: Padding::Valid,
        activation: Activation::Relu,
    });
    layers.push(LayerSpec::PrimaryCaps {
        kernel: 9,
        stride: 2,
        padding: Padding::Same,
        n_types: 16,
        dim: 16,
    });
    layers.push(LayerSpec::ClassCaps {
        n_capsules: n_classes,
        dim: 16,
        routing_iterations: 3,
    });
}

/// Capsule base model for 16/32/64 inputs with the two-layer
/// reconstruction decoder (half the image size, then the full size).
pub fn build_capsule_base(channels: usize, input_side: usize, n_classes: usize) -> Result<ModelSpec> {
    if !matches!(input_side, 16 | 32 | 64) {
        return Err(Error::contract(format!(
            "capsule base supports input sides 16, 32 and 64, got {}",
            input_side
        )));
    }
    let mut layers = Vec::new();
    base_capsule_stack(n_classes, &mut layers);
    let half = (input_side / 2) * (input_side / 2);
    let full = input_side * input_side;
    layers.push(LayerSpec::Decoder(DecoderSpec::new(
        vec![half, full],
        input_side,
    )?));
    let spec = ModelSpec {
        name: format!("capsule-base-{}", input_side),
        input: InputShape::Image {
            channels,
            side: input_side,
        },
        layers,
        n_classes,
    };
    spec.validate()?;
    Ok(spec)
}

/// 32x32 capsule variant: one extra 3x3/64 context convolution (no
/// pooling) before the base stack, and a four-layer decoder of sizes
/// 4^2, 8^2, 16^2, 32^2.
pub fn build_capsule32_v1(channels: usize, n_classes: usize) -> Result<ModelSpec> {
    if n_classes < 2 {
        return Err(Error::contract("capsule32-v1 needs at least 2 classes"));
    }
    let mut layers = vec![LayerSpec::Conv {
        filters: 64,
        kernel: 3,
        stride: 1,
        padding: Padding::Same,
        activation: Activation::Relu,
    }];
    base_capsule_stack(n_classes, &mut layers);
    layers.push(LayerSpec::Decoder(DecoderSpec::new(
        vec![16, 64, 256, 1024],
        32,
    )?));
    let spec = ModelSpec {
        name: "capsule32-v1".to_string(),
        input: InputShape::Image { channels, side: 32 },
        layers,
        n_classes,
    };
    spec.validate()?;
    Ok(spec)
}

/// 64x64 capsule variant: two extra 3x3/64 convolutions, the first
/// followed by a 2x2 pool, giving the base stack 32x32 maps; decoder
/// sizes 8^2, 16^2, 32^2, 64^2.
pub fn build_capsule32_v2(channels: usize, n_classes: usize) -> Result<ModelSpec> {
    if n_classes < 2 {
        return Err(Error::contract("capsule32-v2 needs at least 2 classes"));
    }
    let ctx = LayerSpec::Conv {
        filters: 64,
        kernel: 3,
        stride: 1,
        padding: Padding::Same,
        activation: Activation::Relu,
    };
    let mut layers = vec![ctx.clone(), LayerSpec::MaxPool, ctx];
    base_capsule_stack(n_classes, &mut layers);
    layers.push(LayerSpec::Decoder(DecoderSpec::new(
        vec![64, 256, 1024, 4096],
        64,
    )?));
    let spec = ModelSpec {
        name: "capsule32-v2".to_string(),
        input: InputShape::Image { channels, side: 64 },
        layers,
        n_classes,
    };
    spec.validate()?;
    Ok(spec)
}

/// Small reference ConvNet: two 32-filter convolutions with pooling, one
/// 128-wide dense layer, softmax classifier trained with cross-entropy.
pub fn build_baseline_convnet(
    channels: usize,
    input_side: usize,
    n_classes: usize,
) -> Result<ModelSpec> {
    if n_classes < 2 {
        return Err(Error::contract("baseline convnet needs at least 2 classes"));
    }
    if input_side < 4 || input_side % 4 != 0 {
        return Err(Error::contract(format!(
            "baseline convnet needs an input side divisible by 4, got {}",
            input_side
        )));
    }
    let conv = |filters| LayerSpec::Conv {
        filters,
        kernel: 3,
        stride: 1,
        padding: Padding::Same,
        activation: Activation::Relu,
    };
    let spec = ModelSpec {
        name: "baseline-convnet".to_string(),
        input: InputShape::Image {
            channels,
            side: input_side,
        },
        layers: vec![
            conv(32),
            LayerSpec::MaxPool,
            conv(32),
            LayerSpec::MaxPool,
            LayerSpec::Dense {
                width: 128,
                activation: Activation::Relu,
            },
            LayerSpec::SoftmaxHead,
        ],
        n_classes,
    };
    spec.validate()?;
    Ok(spec)
}

/// Two 512-wide fully connected layers over a fixed-length feature vector.
pub fn build_mlp_head(feature_len: usize, n_classes: usize) -> Result<ModelSpec> {
    if feature_len == 0 {
        return Err(Error::contract("feature length must be positive"));
    }
    let dense = |width| LayerSpec::Dense {
        width,
        activation: Activation::Relu,
    };
    let spec = ModelSpec {
        name: "mlp-head".to_string(),
        input: InputShape::Features { len: feature_len },
        layers: vec![dense(512), dense(512), LayerSpec::SoftmaxHead],
        n_classes,
    };
    spec.validate()?;
    Ok(spec)
}

/// A 2048-unit LSTM consuming one feature frame per step (lookback of
/// one, zero initial state), followed by one 512-wide dense layer.
pub fn build_lstm_head(feature_len: usize, n_classes: usize) -> Result<ModelSpec> {
    if feature_len == 0 {
        return Err(Error::contract("feature length must be positive"));
    }
    let spec = ModelSpec {
        name: "lstm-head".to_string(),
        input: InputShape::Features { len: feature_len },
        layers: vec![
            LayerSpec::Lstm { units: 2048 },
            LayerSpec::Dense {
                width: 512,
                activation: Activation::Relu,
            },
            LayerSpec::SoftmaxHead,
        ],
        n_classes,
    };
    spec.validate()?;
    Ok(spec)
}

/// Model names accepted on the command line.
pub const MODEL_NAMES: &[&str] = &[
    "capsule-base-16",
    "capsule-base-32",
    "capsule-base-64",
    "capsule32-v1",
    "capsule32-v2",
    "baseline-convnet",
    "mlp-head",
    "lstm-head",
];

/// The input side an image model name requires, when fixed by the
/// architecture.
pub fn required_side(name: &str) -> Option<usize> {
    match name {
        "capsule-base-16" => Some(16),
        "capsule-base-32" => Some(32),
        "capsule-base-64" => Some(64),
        "capsule32-v1" => Some(32),
        "capsule32-v2" => Some(64),
        _ => None,
    }
}

/// Build a zoo model by CLI name. Image models take `(channels, side)`,
/// feature heads take the feature length in `side`'s place.
pub fn build_named(
    name: &str,
    channels: usize,
    side_or_len: usize,
    n_classes: usize,
) -> Result<ModelSpec> {
    match name {
        "capsule-base-16" | "capsule-base-32" | "capsule-base-64" => {
            build_capsule_base(channels, side_or_len, n_classes)
        }
        "capsule32-v1" => build_capsule32_v1(channels, n_classes),
        "capsule32-v2" => build_capsule32_v2(channels, n_classes),
        "baseline-convnet" => build_baseline_convnet(channels, side_or_len, n_classes),
        "mlp-head" => build_mlp_head(side_or_len, n_classes),
        "lstm-head" => build_lstm_head(side_or_len, n_classes),
        other => Err(Error::contract(format!(
            "unknown model '{}'; known models: {}",
            other,
            MODEL_NAMES.join(", ")
        ))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn base_16_decoder_sizes() {
        let spec = build_capsule_base(1, 16, 5).unwrap();
        let decoder = spec
            .layers
            .iter()
            .find_map(|l| match l {
                LayerSpec::Decoder(d) => Some(d),
                _ => None,
            })
            .unwrap();
        assert_eq!(decoder.fc_sizes, vec![64, 256]);
        assert_eq!(decoder.output_side, 16);
    }

    #[test]
    fn base_64_has_29_class_capsules() {
        let spec = build_capsule_base(3, 64, 29).unwrap();
        let caps = spec
            .layers
            .iter()
            .find_map(|l| match l {
                LayerSpec::ClassCaps { n_capsules, .. } => Some(*n_capsules),
                _ => None,
            })
            .unwrap();
        assert_eq!(caps, 29);
    }

    #[test]
    fn base_rejects_unsupported_side() {
        assert!(matches!(
            build_capsule_base(1, 20, 5),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn all_builders_validate() {
        build_capsule_base(3, 16, 5).unwrap().validate().unwrap();
        build_capsule_base(3, 32, 29).unwrap().validate().unwrap();
        build_capsule_base(3, 64, 29).unwrap().validate().unwrap();
        build_capsule32_v1(3, 29).unwrap().validate().unwrap();
        build_capsule32_v2(3, 29).unwrap().validate().unwrap();
        build_baseline_convnet(3, 64, 29).unwrap().validate().unwrap();
        build_mlp_head(1024, 29).unwrap().validate().unwrap();
        build_lstm_head(2048, 29).unwrap().validate().unwrap();
    }

    #[test]
    fn v1_has_one_conv_before_the_base_conv_and_no_pooling() {
        let spec = build_capsule32_v1(3, 29).unwrap();
        let convs: Vec<usize> = spec
            .layers
            .iter()
            .filter_map(|l| match l {
                LayerSpec::Conv { filters, .. } => Some(*filters),
                _ => None,
            })
            .collect();
        assert_eq!(convs, vec![64, 256]);
        assert!(!spec.layers.iter().any(|l| matches!(l, LayerSpec::MaxPool)));
        let decoder = spec
            .layers
            .iter()
            .find_map(|l| match l {
                LayerSpec::Decoder(d) => Some(d),
                _ => None,
            })
            .unwrap();
        assert_eq!(decoder.fc_sizes, vec![16, 64, 256, 1024]);
    }

    #[test]
    fn v2_pools_exactly_once_after_first_conv() {
        let spec = build_capsule32_v2(3, 29).unwrap();
        let pools: Vec<usize> = spec
            .layers
            .iter()
            .enumerate()
            .filter_map(|(i, l)| matches!(l, LayerSpec::MaxPool).then_some(i))
            .collect();
        assert_eq!(pools, vec![1]);
        let decoder = spec
            .layers
            .iter()
            .find_map(|l| match l {
                LayerSpec::Decoder(d) => Some(d),
                _ => None,
            })
            .unwrap();
        assert_eq!(decoder.fc_sizes, vec![64, 256, 1024, 4096]);
    }

    #[test]
    fn v2_spatial_trace_halves_after_pool() {
        // 64x64 -> conv(same) 64x64 -> pool 32x32, feeding the base stack.
        let spec = build_capsule32_v2(3, 29).unwrap();
        let flows = spec.layer_input_flows().unwrap();
        assert_eq!(
            flows[2],
            Flow::Image {
                channels: 64,
                h: 32,
                w: 32
            }
        );
    }

    #[test]
    fn baseline_has_two_32_filter_convs_and_dense_128() {
        let spec = build_baseline_convnet(3, 64, 29).unwrap();
        let convs: Vec<usize> = spec
            .layers
            .iter()
            .filter_map(|l| match l {
                LayerSpec::Conv { filters, .. } => Some(*filters),
                _ => None,
            })
            .collect();
        assert_eq!(convs, vec![32, 32]);
        assert!(spec
            .layers
            .iter()
            .any(|l| matches!(l, LayerSpec::Dense { width: 128, .. })));
    }

    #[test]
    fn mlp_head_widths() {
        let spec = build_mlp_head(1024, 29).unwrap();
        let widths: Vec<usize> = spec
            .layers
            .iter()
            .filter_map(|l| match l {
                LayerSpec::Dense { width, .. } => Some(*width),
                _ => None,
            })
            .collect();
        assert_eq!(widths, vec![512, 512]);
        assert!(matches!(spec.validate().unwrap(), Flow::Vector { len: 29 }));
    }

    #[test]
    fn lstm_head_units_fixed_at_2048() {
        let spec = build_lstm_head(2048, 29).unwrap();
        assert!(spec
            .layers
            .iter()
            .any(|l| matches!(l, LayerSpec::Lstm { units: 2048 })));
    }

    #[test]
    fn routing_override_applies_to_class_caps() {
        let spec = build_capsule_base(1, 16, 5)
            .unwrap()
            .with_routing_iterations(5)
            .unwrap();
        assert!(spec.layers.iter().any(|l| matches!(
            l,
            LayerSpec::ClassCaps {
                routing_iterations: 5,
                ..
            }
        )));
    }

    #[test]
    fn param_counts_are_frozen() {
        // Golden values derived once from the layer arithmetic below and
        // pinned; any drift in builder geometry shows up here.
        //
        // capsule-base-16 (c=1, 5 classes):
        //   conv1   256*1*81 + 256        =    20,992
        //   pcaps   256*256*81 + 256      = 5,308,672
        //   W       (16*4*4)*5*16*16      =   327,680  (16->8 valid, 8->4 same)
        //   decoder 64*80+64 + 256*64+256 =    21,824
        assert_eq!(
            build_capsule_base(1, 16, 5).unwrap().param_count().unwrap(),
            20_992 + 5_308_672 + 327_680 + 21_824
        );
        // capsule32-v1 (c=3, 29 classes):
        //   ctx     64*3*9 + 64             =     1,792
        //   conv1   256*64*81 + 256         = 1,327,360
        //   pcaps   256*256*81 + 256        = 5,308,672
        //   W       (16*12*12)*29*16*16     = 17,104,896 (32->24 valid, 24->12 same)
        //   decoder 16*464+16, 64*16+64, 256*64+256, 1024*256+1024
        let v1_decoder = 16 * 464 + 16 + 64 * 16 + 64 + 256 * 64 + 256 + 1024 * 256 + 1024;
        assert_eq!(
            build_capsule32_v1(3, 29).unwrap().param_count().unwrap(),
            1_792 + 1_327_360 + 5_308_672 + 17_104_896 + v1_decoder
        );
        // baseline-convnet (c=3, side 64, 29 classes):
        //   conv 32*3*9+32, conv 32*32*9+32, dense 128*(32*16*16)+128,
        //   head 29*128+29
        assert_eq!(
            build_baseline_convnet(3, 64, 29)
                .unwrap()
                .param_count()
                .unwrap(),
            (32 * 27 + 32) + (32 * 288 + 32) + (128 * 8192 + 128) + (29 * 128 + 29)
        );
        // mlp-head (1024 features, 29 classes)
        assert_eq!(
            build_mlp_head(1024, 29).unwrap().param_count().unwrap(),
            (512 * 1024 + 512) + (512 * 512 + 512) + (29 * 512 + 29)
        );
        // lstm-head (2048 features, 29 classes): 4 gates of 2048x4096 + bias
        assert_eq!(
            build_lstm_head(2048, 29).unwrap().param_count().unwrap(),
            4 * (2048 * 4096 + 2048) + (512 * 2048 + 512) + (29 * 512 + 29)
        );
    }

    #[test]
    fn spec_without_terminal_is_rejected() {
        let spec = ModelSpec {
            name: "broken".into(),
            input: InputShape::Features { len: 8 },
            layers: vec![LayerSpec::Dense {
                width: 4,
                activation: Activation::Relu,
            }],
            n_classes: 3,
        };
        assert!(matches!(spec.validate(), Err(Error::Contract(_))));
    }

    #[test]
    fn unknown_model_name_is_rejected() {
        assert!(build_named("capsule-base-48", 1, 48, 5).is_err());
    }
}
