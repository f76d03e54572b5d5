//! Reverse-mode differentiation over a linear operation tape.
//!
//! A [`Tape`] records every primitive executed during a forward pass along
//! with the intermediates its backward rule needs, then replays the record
//! in exact reverse execution order to accumulate vector-Jacobian products.
//! One forward/backward pass owns its tape exclusively; all operations are
//! pure functions of their recorded inputs.

use crate::capsule;
use crate::error::{Error, Result};
use crate::linalg::{self, Activation, ConvGeom, Padding};
use crate::objective::MarginLossConfig;
use crate::tensor::{s, Scalar, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(pub(crate) usize);

struct Node<T> {
    value: Tensor<T>,
    op: Recorded<T>,
}

enum Recorded<T> {
    Leaf,
    Conv2d {
        input: NodeId,
        kernels: NodeId,
        bias: NodeId,
        cols: Vec<T>,
        geom: ConvGeom,
    },
    MaxPool2 {
        input: NodeId,
        argmax: Vec<usize>,
    },
    Dense {
        input: NodeId,
        weights: NodeId,
        bias: NodeId,
    },
    Activation {
        input: NodeId,
        kind: Activation,
    },
    Softmax {
        input: NodeId,
        axis: usize,
    },
    Add {
        a: NodeId,
        b: NodeId,
    },
    Mul {
        a: NodeId,
        b: NodeId,
    },
    Concat {
        a: NodeId,
        b: NodeId,
    },
    Reshape {
        input: NodeId,
    },
    SumAll {
        input: NodeId,
    },
    WeightedAdd {
        a: NodeId,
        b: NodeId,
        weight: T,
    },
    ChannelMean {
        input: NodeId,
    },
    Squash {
        input: NodeId,
    },
    ComputeVotes {
        u: NodeId,
        w: NodeId,
    },
    RouteWeightedSum {
        couplings: NodeId,
        votes: NodeId,
    },
    RouteAgreement {
        logits: NodeId,
        votes: NodeId,
        v: NodeId,
    },
    PrimaryCapsRegroup {
        input: NodeId,
        n_types: usize,
        dim: usize,
    },
    CapsNorms {
        input: NodeId,
    },
    MarginLoss {
        norms: NodeId,
        target: usize,
        cfg: MarginLossConfig,
    },
    MaskCapsules {
        input: NodeId,
        selected: usize,
    },
    SqDiffSum {
        a: NodeId,
        b: NodeId,
    },
    CrossEntropy {
        logits: NodeId,
        target: usize,
    },
}

/// Gradients produced by [`Tape::backward`], indexed by node.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, id: NodeId) -> Option<&Tensor<T>> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    /// Gradient for `id`, or zeros of the given shape when no gradient
    /// reached it.
    pub fn get_or_zeros(&self, id: NodeId, shape: &[usize]) -> Tensor<T> {
        match self.get(id) {
            Some(g) => g.clone(),
            None => Tensor::zeros(shape.to_vec()),
        }
    }
}

/// Operation record for one forward pass.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    fn push(&mut self, value: Tensor<T>, op: Recorded<T>) -> NodeId {
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    /// Record an input or parameter tensor.
    pub fn leaf(&mut self, value: Tensor<T>) -> NodeId {
        self.push(value, Recorded::Leaf)
    }

    pub fn conv2d(
        &mut self,
        input: NodeId,
        kernels: NodeId,
        bias: NodeId,
        stride: usize,
        padding: Padding,
    ) -> Result<NodeId> {
        let (out, cols, geom) = linalg::conv2d_forward(
            self.value(input),
            self.value(kernels),
            self.value(bias),
            stride,
            padding,
        )?;
        Ok(self.push(
            out,
            Recorded::Conv2d {
                input,
                kernels,
                bias,
                cols,
                geom,
            },
        ))
    }

    pub fn maxpool2(&mut self, input: NodeId) -> Result<NodeId> {
        let (out, argmax) = linalg::maxpool2_forward(self.value(input))?;
        Ok(self.push(out, Recorded::MaxPool2 { input, argmax }))
    }

    pub fn dense(&mut self, input: NodeId, weights: NodeId, bias: NodeId) -> Result<NodeId> {
        let out = linalg::dense_forward(self.value(input), self.value(weights), self.value(bias))?;
        Ok(self.push(
            out,
            Recorded::Dense {
                input,
                weights,
                bias,
            },
        ))
    }

    pub fn activation(&mut self, input: NodeId, kind: Activation) -> NodeId {
        let out = self.value(input).map(|x| kind.apply(x));
        self.push(out, Recorded::Activation { input, kind })
    }

    pub fn softmax(&mut self, input: NodeId, axis: usize) -> Result<NodeId> {
        let out = linalg::softmax_axis(self.value(input), axis)?;
        Ok(self.push(out, Recorded::Softmax { input, axis }))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check_same_shape("add", a, b)?;
        let out = Tensor::from_vec(
            self.value(a).shape().to_vec(),
            self.value(a)
                .data()
                .iter()
                .zip(self.value(b).data())
                .map(|(&x, &y)| x + y)
                .collect(),
        )?;
        Ok(self.push(out, Recorded::Add { a, b }))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check_same_shape("mul", a, b)?;
        let out = Tensor::from_vec(
            self.value(a).shape().to_vec(),
            self.value(a)
                .data()
                .iter()
                .zip(self.value(b).data())
                .map(|(&x, &y)| x * y)
                .collect(),
        )?;
        Ok(self.push(out, Recorded::Mul { a, b }))
    }

    /// Concatenate two rank-1 tensors.
    pub fn concat(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.value(a).shape().len() != 1 || self.value(b).shape().len() != 1 {
            return Err(Error::shape(format!(
                "concat expects rank-1 tensors, got {:?} and {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        let mut data = self.value(a).data().to_vec();
        data.extend_from_slice(self.value(b).data());
        let out = Tensor::from_vec(vec![data.len()], data)?;
        Ok(self.push(out, Recorded::Concat { a, b }))
    }

    pub fn reshape(&mut self, input: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        let out = self.value(input).reshape(shape)?;
        Ok(self.push(out, Recorded::Reshape { input }))
    }

    pub fn sum_all(&mut self, input: NodeId) -> NodeId {
        let total: T = self.value(input).data().iter().copied().sum();
        self.push(Tensor::scalar(total), Recorded::SumAll { input })
    }

    /// `out = a + weight * b` for scalar nodes.
    pub fn weighted_add(&mut self, a: NodeId, b: NodeId, weight: T) -> Result<NodeId> {
        if self.value(a).numel() != 1 || self.value(b).numel() != 1 {
            return Err(Error::contract("weighted_add expects scalar nodes"));
        }
        let out = Tensor::scalar(self.value(a).item() + weight * self.value(b).item());
        Ok(self.push(out, Recorded::WeightedAdd { a, b, weight }))
    }

    pub fn channel_mean(&mut self, input: NodeId) -> Result<NodeId> {
        let out = linalg::channel_mean(self.value(input))?;
        Ok(self.push(out, Recorded::ChannelMean { input }))
    }

    /// Squash nonlinearity over the last axis.
    pub fn squash(&mut self, input: NodeId) -> Result<NodeId> {
        let out = capsule::squash(self.value(input))?;
        Ok(self.push(out, Recorded::Squash { input }))
    }

    /// Votes `u_hat[i][j] = W[i][j] . u[i]`.
    pub fn compute_votes(&mut self, u: NodeId, w: NodeId) -> Result<NodeId> {
        let out = capsule::compute_votes_raw(self.value(u), self.value(w))?;
        Ok(self.push(out, Recorded::ComputeVotes { u, w }))
    }

    /// Totals `s[j] = sum_i c[i][j] * u_hat[i][j]`.
    pub fn route_weighted_sum(&mut self, couplings: NodeId, votes: NodeId) -> Result<NodeId> {
        let out = capsule::route_weighted_sum(self.value(couplings), self.value(votes))?;
        Ok(self.push(out, Recorded::RouteWeightedSum { couplings, votes }))
    }

    /// Logit update `b'[i][j] = b[i][j] + u_hat[i][j] . v[j]`.
    pub fn route_agreement(&mut self, logits: NodeId, votes: NodeId, v: NodeId) -> Result<NodeId> {
        let out = capsule::routing_update(self.value(logits), self.value(votes), self.value(v))?;
        Ok(self.push(out, Recorded::RouteAgreement { logits, votes, v }))
    }

    /// Regroup feature maps into capsule vectors (no squash).
    pub fn primary_caps_regroup(
        &mut self,
        input: NodeId,
        n_types: usize,
        dim: usize,
    ) -> Result<NodeId> {
        let out = capsule::primary_caps_regroup(self.value(input), n_types, dim)?;
        Ok(self.push(
            out,
            Recorded::PrimaryCapsRegroup {
                input,
                n_types,
                dim,
            },
        ))
    }

    /// L2 norm of each capsule vector: `n x d -> n`.
    pub fn caps_norms(&mut self, input: NodeId) -> Result<NodeId> {
        let shape = self.value(input).shape();
        if shape.len() != 2 {
            return Err(Error::shape(format!(
                "caps_norms expects n x d, got {:?}",
                shape
            )));
        }
        let (n, d) = (shape[0], shape[1]);
        let norms = linalg::row_norms(self.value(input).data(), n, d);
        let out = Tensor::from_vec(vec![n], norms)?;
        Ok(self.push(out, Recorded::CapsNorms { input }))
    }

    pub fn margin_loss(
        &mut self,
        norms: NodeId,
        target: usize,
        cfg: &MarginLossConfig,
    ) -> Result<NodeId> {
        let loss = crate::objective::margin_loss(self.value(norms), target, cfg)?;
        Ok(self.push(
            Tensor::scalar(loss),
            Recorded::MarginLoss {
                norms,
                target,
                cfg: *cfg,
            },
        ))
    }

    /// Zero all capsule vectors except `selected` and flatten.
    pub fn mask_capsules(&mut self, input: NodeId, selected: usize) -> Result<NodeId> {
        let out = crate::objective::mask_class_capsules(self.value(input), selected)?;
        Ok(self.push(out, Recorded::MaskCapsules { input, selected }))
    }

    /// Sum of squared elementwise differences.
    pub fn sq_diff_sum(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check_same_shape("sq_diff_sum", a, b)?;
        let total: T = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| (x - y) * (x - y))
            .sum();
        Ok(self.push(Tensor::scalar(total), Recorded::SqDiffSum { a, b }))
    }

    /// Stable softmax cross-entropy against a class index.
    pub fn cross_entropy(&mut self, logits: NodeId, target: usize) -> Result<NodeId> {
        let z = self.value(logits);
        if z.shape().len() != 1 {
            return Err(Error::shape(format!(
                "cross_entropy expects rank-1 logits, got {:?}",
                z.shape()
            )));
        }
        let k = z.numel();
        if target >= k {
            return Err(Error::Index(format!(
                "cross_entropy target {} out of range for {} classes",
                target, k
            )));
        }
        let data = z.data();
        let max = data.iter().copied().fold(data[0], T::max);
        let log_sum = data
            .iter()
            .map(|&v| (v - max).exp())
            .sum::<T>()
            .ln();
        let loss = log_sum - (data[target] - max);
        Ok(self.push(Tensor::scalar(loss), Recorded::CrossEntropy { logits, target }))
    }

    fn check_same_shape(&self, what: &str, a: NodeId, b: NodeId) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::shape(format!(
                "{}: operand shapes differ: {:?} vs {:?}",
                what,
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        Ok(())
    }

    /// Accumulate `dLoss/d(node)` for every node feeding the scalar `loss`
    /// by replaying the tape in reverse execution order.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients<T>> {
        if self.value(loss).numel() != 1 {
            return Err(Error::contract(format!(
                "backward requires a scalar loss node, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(T::one()));

        for id in (0..=loss.0).rev() {
            // Leaves keep their accumulated gradient; interior gradients are
            // consumed here and released.
            let d_out = if matches!(self.nodes[id].op, Recorded::Leaf) {
                continue;
            } else {
                match grads[id].take() {
                    Some(g) => g,
                    None => continue,
                }
            };
            self.backward_op(id, &d_out, &mut grads);
        }
        Ok(Gradients { grads })
    }

    fn backward_op(&self, id: usize, d_out: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let acc = |grads: &mut [Option<Tensor<T>>], target: NodeId, delta: Tensor<T>| {
            match &mut grads[target.0] {
                Some(g) => g.add_assign(&delta),
                slot @ None => *slot = Some(delta),
            }
        };

        match &self.nodes[id].op {
            Recorded::Leaf => unreachable!("leaves are skipped in backward"),

            Recorded::Conv2d {
                input,
                kernels,
                bias,
                cols,
                geom: g,
            } => {
                let spatial = g.out_spatial();
                let d_out_mat = d_out.data();

                let mut d_bias = vec![T::zero(); g.out_c];
                for f in 0..g.out_c {
                    d_bias[f] = d_out_mat[f * spatial..(f + 1) * spatial]
                        .iter()
                        .copied()
                        .sum();
                }
                acc(
                    grads,
                    *bias,
                    Tensor::from_vec(vec![g.out_c], d_bias).expect("bias grad"),
                );

                // d_K = d_out (F x S) . cols^T (S x P)
                let mut d_k = vec![T::zero(); g.out_c * g.patch_len()];
                T::gemm(
                    g.out_c,
                    spatial,
                    g.patch_len(),
                    T::one(),
                    d_out_mat,
                    false,
                    cols,
                    true,
                    T::zero(),
                    &mut d_k,
                );
                acc(
                    grads,
                    *kernels,
                    Tensor::from_vec(self.value(*kernels).shape().to_vec(), d_k)
                        .expect("kernel grad"),
                );

                // d_cols = K^T (P x F) . d_out (F x S), then fold back.
                let mut d_cols = vec![T::zero(); g.patch_len() * spatial];
                T::gemm(
                    g.patch_len(),
                    g.out_c,
                    spatial,
                    T::one(),
                    self.value(*kernels).data(),
                    true,
                    d_out_mat,
                    false,
                    T::zero(),
                    &mut d_cols,
                );
                let mut d_input = vec![T::zero(); self.value(*input).numel()];
                linalg::col2im(&d_cols, g, &mut d_input);
                acc(
                    grads,
                    *input,
                    Tensor::from_vec(self.value(*input).shape().to_vec(), d_input)
                        .expect("conv input grad"),
                );
            }

            Recorded::MaxPool2 { input, argmax } => {
                let mut d_input = vec![T::zero(); self.value(*input).numel()];
                for (o, &src) in argmax.iter().enumerate() {
                    d_input[src] += d_out.data()[o];
                }
                acc(
                    grads,
                    *input,
                    Tensor::from_vec(self.value(*input).shape().to_vec(), d_input)
                        .expect("pool grad"),
                );
            }

            Recorded::Dense {
                input,
                weights,
                bias,
            } => {
                let w = self.value(*weights);
                let (m, n) = (w.shape()[0], w.shape()[1]);
                acc(grads, *bias, d_out.reshape(vec![m]).expect("bias grad"));

                // d_W = d_y (m x 1) . x^T (1 x n)
                let mut d_w = vec![T::zero(); m * n];
                T::gemm(
                    m,
                    1,
                    n,
                    T::one(),
                    d_out.data(),
                    false,
                    self.value(*input).data(),
                    false,
                    T::zero(),
                    &mut d_w,
                );
                acc(
                    grads,
                    *weights,
                    Tensor::from_vec(vec![m, n], d_w).expect("weight grad"),
                );

                // d_x = W^T (n x m) . d_y (m x 1)
                let mut d_x = vec![T::zero(); n];
                T::gemm(
                    n,
                    m,
                    1,
                    T::one(),
                    w.data(),
                    true,
                    d_out.data(),
                    false,
                    T::zero(),
                    &mut d_x,
                );
                acc(
                    grads,
                    *input,
                    Tensor::from_vec(self.value(*input).shape().to_vec(), d_x)
                        .expect("dense input grad"),
                );
            }

            Recorded::Activation { input, kind } => {
                let x = self.value(*input).data();
                let y = self.nodes[id].value.data();
                let d: Vec<T> = d_out
                    .data()
                    .iter()
                    .zip(x.iter().zip(y.iter()))
                    .map(|(&d, (&x, &y))| d * kind.grad(x, y))
                    .collect();
                acc(
                    grads,
                    *input,
                    Tensor::from_vec(self.value(*input).shape().to_vec(), d)
                        .expect("activation grad"),
                );
            }

            Recorded::Softmax { input, axis } => {
                let d = linalg::softmax_axis_vjp(&self.nodes[id].value, d_out, *axis);
                acc(grads, *input, d);
            }

            Recorded::Add { a, b } => {
                acc(grads, *a, d_out.clone());
                acc(grads, *b, d_out.clone());
            }

            Recorded::Mul { a, b } => {
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                let d_a: Vec<T> = d_out.data().iter().zip(bv).map(|(&d, &y)| d * y).collect();
                let d_b: Vec<T> = d_out.data().iter().zip(av).map(|(&d, &x)| d * x).collect();
                let shape = self.value(*a).shape().to_vec();
                acc(grads, *a, Tensor::from_vec(shape.clone(), d_a).expect("mul grad"));
                acc(grads, *b, Tensor::from_vec(shape, d_b).expect("mul grad"));
            }

            Recorded::Concat { a, b } => {
                let na = self.value(*a).numel();
                let d = d_out.data();
                acc(
                    grads,
                    *a,
                    Tensor::from_vec(vec![na], d[..na].to_vec()).expect("concat grad"),
                );
                acc(
                    grads,
                    *b,
                    Tensor::from_vec(vec![d.len() - na], d[na..].to_vec()).expect("concat grad"),
                );
            }

            Recorded::Reshape { input } => {
                let d = d_out
                    .reshape(self.value(*input).shape().to_vec())
                    .expect("reshape grad");
                acc(grads, *input, d);
            }

            Recorded::SumAll { input } => {
                let d = d_out.item();
                acc(
                    grads,
                    *input,
                    Tensor::filled(self.value(*input).shape().to_vec(), d),
                );
            }

            Recorded::WeightedAdd { a, b, weight } => {
                let d = d_out.item();
                acc(grads, *a, Tensor::scalar(d));
                acc(grads, *b, Tensor::scalar(d * *weight));
            }

            Recorded::ChannelMean { input } => {
                let shape = self.value(*input).shape().to_vec();
                let (c_n, hw) = (shape[0], shape[1] * shape[2]);
                let inv = T::one() / s::<T>(c_n as f64);
                let mut d = vec![T::zero(); c_n * hw];
                for c in 0..c_n {
                    for (i, &g) in d_out.data().iter().enumerate() {
                        d[c * hw + i] = g * inv;
                    }
                }
                acc(grads, *input, Tensor::from_vec(shape, d).expect("mean grad"));
            }

            Recorded::Squash { input } => {
                let d = capsule::squash_vjp(self.value(*input), d_out);
                acc(grads, *input, d);
            }

            Recorded::ComputeVotes { u, w } => {
                let (d_u, d_w) = capsule::compute_votes_vjp(self.value(*u), self.value(*w), d_out);
                acc(grads, *u, d_u);
                acc(grads, *w, d_w);
            }

            Recorded::RouteWeightedSum { couplings, votes } => {
                let (d_c, d_v) = capsule::route_weighted_sum_vjp(
                    self.value(*couplings),
                    self.value(*votes),
                    d_out,
                );
                acc(grads, *couplings, d_c);
                acc(grads, *votes, d_v);
            }

            Recorded::RouteAgreement { logits, votes, v } => {
                let (d_votes, d_v) =
                    capsule::routing_update_vjp(self.value(*votes), self.value(*v), d_out);
                acc(grads, *logits, d_out.clone());
                acc(grads, *votes, d_votes);
                acc(grads, *v, d_v);
            }

            Recorded::PrimaryCapsRegroup {
                input,
                n_types,
                dim,
            } => {
                let d = capsule::primary_caps_regroup_vjp(
                    self.value(*input).shape(),
                    d_out,
                    *n_types,
                    *dim,
                );
                acc(grads, *input, d);
            }

            Recorded::CapsNorms { input } => {
                let x = self.value(*input);
                let (n, dim) = (x.shape()[0], x.shape()[1]);
                let norms = self.nodes[id].value.data();
                let mut d = vec![T::zero(); n * dim];
                for i in 0..n {
                    if norms[i] > T::zero() {
                        let scale = d_out.data()[i] / norms[i];
                        for k in 0..dim {
                            d[i * dim + k] = scale * x.data()[i * dim + k];
                        }
                    }
                }
                acc(
                    grads,
                    *input,
                    Tensor::from_vec(vec![n, dim], d).expect("norm grad"),
                );
            }

            Recorded::MarginLoss { norms, target, cfg } => {
                let d = d_out.item();
                let x = self.value(*norms).data();
                let m_plus = s::<T>(cfg.m_plus);
                let m_minus = s::<T>(cfg.m_minus);
                let lambda = s::<T>(cfg.lambda);
                let two = s::<T>(2.0);
                let mut grad = vec![T::zero(); x.len()];
                for (k, g) in grad.iter_mut().enumerate() {
                    if k == *target {
                        let hinge = (m_plus - x[k]).max(T::zero());
                        *g = -two * hinge * d;
                    } else {
                        let hinge = (x[k] - m_minus).max(T::zero());
                        *g = lambda * two * hinge * d;
                    }
                }
                acc(
                    grads,
                    *norms,
                    Tensor::from_vec(vec![x.len()], grad).expect("margin grad"),
                );
            }

            Recorded::MaskCapsules { input, selected } => {
                let shape = self.value(*input).shape().to_vec();
                let (n, dim) = (shape[0], shape[1]);
                let mut d = vec![T::zero(); n * dim];
                let row = *selected * dim;
                d[row..row + dim].copy_from_slice(&d_out.data()[row..row + dim]);
                acc(grads, *input, Tensor::from_vec(shape, d).expect("mask grad"));
            }

            Recorded::SqDiffSum { a, b } => {
                let d = d_out.item();
                let two = s::<T>(2.0);
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                let d_a: Vec<T> = av
                    .iter()
                    .zip(bv)
                    .map(|(&x, &y)| two * (x - y) * d)
                    .collect();
                let d_b: Vec<T> = d_a.iter().map(|&g| -g).collect();
                let shape = self.value(*a).shape().to_vec();
                acc(grads, *a, Tensor::from_vec(shape.clone(), d_a).expect("sqdiff grad"));
                acc(grads, *b, Tensor::from_vec(shape, d_b).expect("sqdiff grad"));
            }

            Recorded::CrossEntropy { logits, target } => {
                let d = d_out.item();
                let probs = linalg::softmax_axis(self.value(*logits), 0).expect("ce softmax");
                let mut grad = probs.into_data();
                grad[*target] -= T::one();
                for g in &mut grad {
                    *g *= d;
                }
                acc(
                    grads,
                    *logits,
                    Tensor::from_vec(vec![grad.len()], grad).expect("ce grad"),
                );
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t64(shape: Vec<usize>, data: Vec<f64>) -> Tensor<f64> {
        Tensor::from_vec(shape, data).unwrap()
    }

    #[test]
    fn loss_sum_gradient_is_all_ones() {
        let mut tape = Tape::new();
        let x = tape.leaf(t64(vec![2, 3], vec![1.0, -2.0, 3.0, 0.5, 4.0, -1.0]));
        let loss = tape.sum_all(x);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[1.0; 6]);
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut tape = Tape::new();
        let x = tape.leaf(t64(vec![2], vec![1.0, 2.0]));
        assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn unreached_leaf_has_no_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(t64(vec![2], vec![1.0, 2.0]));
        let unused = tape.leaf(t64(vec![3], vec![0.0; 3]));
        let loss = tape.sum_all(x);
        let grads = tape.backward(loss).unwrap();
        assert!(grads.get(unused).is_none());
        assert_eq!(
            grads.get_or_zeros(unused, &[3]).data(),
            &[0.0, 0.0, 0.0]
        );
    }

    #[test]
    fn gradient_accumulates_across_consumers() {
        // loss = sum(x) + sum(x .* x): d = 1 + 2x
        let mut tape = Tape::new();
        let x = tape.leaf(t64(vec![2], vec![3.0, -2.0]));
        let s1 = tape.sum_all(x);
        let xx = tape.mul(x, x).unwrap();
        let s2 = tape.sum_all(xx);
        let loss = tape.add(s1, s2).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[7.0, -3.0]);
    }

    #[test]
    fn maxpool_routes_gradient_to_argmax_only() {
        let mut tape = Tape::new();
        let x = tape.leaf(t64(vec![1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]));
        let pooled = tape.maxpool2(x).unwrap();
        assert_eq!(tape.value(pooled).data(), &[4.0]);
        let loss = tape.sum_all(pooled);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[0.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn cross_entropy_matches_log_softmax() {
        let mut tape = Tape::new();
        let z = tape.leaf(t64(vec![3], vec![1.0, 2.0, 3.0]));
        let loss = tape.cross_entropy(z, 1).unwrap();
        let denom: f64 = (1.0f64).exp() + (2.0f64).exp() + (3.0f64).exp();
        let expect = -((2.0f64).exp() / denom).ln();
        assert!((tape.value(loss).item() - expect).abs() < 1e-12);
    }
}
