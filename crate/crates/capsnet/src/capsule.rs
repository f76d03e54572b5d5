//! Capsule computations: the squash nonlinearity, vote transforms,
//! coupling softmax, iterative routing by agreement, and the regrouping of
//! convolutional feature maps into primary capsule vectors.
//!
//! Everything here exists in a pure tensor-level form; the tape ops in
//! [`crate::tape`] call into these functions for their forward math and the
//! `*_vjp` companions for their backward rules.

use crate::error::{Error, Result};
use crate::linalg::{self, row_norms, softmax_axis, squash_factor};
use crate::tape::{NodeId, Tape};
use crate::tensor::{Scalar, Tensor};

/// A set of capsule vectors: `n_capsules x dim`.
#[derive(Debug, Clone)]
pub struct CapsuleGrid<T> {
    pub vectors: Tensor<T>,
}

impl<T: Scalar> CapsuleGrid<T> {
    pub fn new(vectors: Tensor<T>) -> Result<Self> {
        if vectors.shape().len() != 2 {
            return Err(Error::shape(format!(
                "capsule grid must be n x dim, got {:?}",
                vectors.shape()
            )));
        }
        Ok(CapsuleGrid { vectors })
    }

    pub fn n_capsules(&self) -> usize {
        self.vectors.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.vectors.shape()[1]
    }
}

/// Final quantities of one routing pass.
#[derive(Debug, Clone)]
pub struct RoutingState<T> {
    /// Votes `u_hat[j|i]`: `n_in x n_out x d_out`.
    pub votes: Tensor<T>,
    /// Raw logits `b[i][j]`: `n_in x n_out`.
    pub logits: Tensor<T>,
    /// Couplings `c[i][j]` (softmax of logits over j): `n_in x n_out`.
    pub couplings: Tensor<T>,
    /// Weighted vote totals `s[j]`: `n_out x d_out`.
    pub totals: Tensor<T>,
    /// Squashed outputs `v[j]`: `n_out x d_out`.
    pub outputs: Tensor<T>,
}

/// Squash every vector along the last axis:
/// `v = s * ||s|| / (1 + ||s||^2)`, which preserves direction, bounds the
/// norm below 1, and maps the zero vector to the zero vector.
pub fn squash<T: Scalar>(input: &Tensor<T>) -> Result<Tensor<T>> {
    let shape = input.shape();
    if shape.is_empty() {
        return Err(Error::shape("squash input must have at least one axis"));
    }
    let d = shape[shape.len() - 1];
    let n = input.numel() / d;
    let norms = row_norms(input.data(), n, d);
    let mut out = input.data().to_vec();
    for i in 0..n {
        let f = squash_factor(norms[i]);
        for v in &mut out[i * d..(i + 1) * d] {
            *v *= f;
        }
    }
    Tensor::from_vec(shape.to_vec(), out)
}

/// VJP of [`squash`]. With `f(n) = n / (1 + n^2)` and `v = f(n) s`:
/// `d_s = f(n) d_v + f'(n)/n * (d_v . s) s`, zero at the (guarded) origin.
pub fn squash_vjp<T: Scalar>(input: &Tensor<T>, d_out: &Tensor<T>) -> Tensor<T> {
    let shape = input.shape();
    let d = shape[shape.len() - 1];
    let n = input.numel() / d;
    let x = input.data();
    let dv = d_out.data();
    let mut out = vec![T::zero(); x.len()];
    for i in 0..n {
        let row = &x[i * d..(i + 1) * d];
        let drow = &dv[i * d..(i + 1) * d];
        let sq: T = row.iter().map(|&v| v * v).sum();
        let norm = sq.sqrt();
        if norm == T::zero() {
            continue;
        }
        let denom = T::one() + sq;
        let f = norm / denom;
        // f'(n) = (1 - n^2) / (1 + n^2)^2
        let fprime = (T::one() - sq) / (denom * denom);
        let dot: T = drow.iter().zip(row).map(|(&a, &b)| a * b).sum();
        let radial = fprime / norm * dot;
        for k in 0..d {
            out[i * d + k] = f * drow[k] + radial * row[k];
        }
    }
    Tensor::from_vec(shape.to_vec(), out).expect("squash vjp shape")
}

/// Transform weights `W[i][j]`: one `d_out x d_in` matrix per (input
/// capsule, output capsule) pair, stored as `n_in x n_out x d_out x d_in`.
#[derive(Debug, Clone)]
pub struct TransformWeights<T> {
    pub w: Tensor<T>,
}

impl<T: Scalar> TransformWeights<T> {
    pub fn new(w: Tensor<T>) -> Result<Self> {
        if w.shape().len() != 4 {
            return Err(Error::shape(format!(
                "transform weights must be n_in x n_out x d_out x d_in, got {:?}",
                w.shape()
            )));
        }
        Ok(TransformWeights { w })
    }
}

/// Votes `u_hat[i][j] = W[i][j] . u[i]` over a capsule grid.
pub fn compute_votes<T: Scalar>(
    u: &CapsuleGrid<T>,
    w: &TransformWeights<T>,
) -> Result<Tensor<T>> {
    compute_votes_raw(&u.vectors, &w.w)
}

pub(crate) fn compute_votes_raw<T: Scalar>(u: &Tensor<T>, w: &Tensor<T>) -> Result<Tensor<T>> {
    if u.shape().len() != 2 || w.shape().len() != 4 {
        return Err(Error::shape(format!(
            "votes expect u as n_in x d_in and W as n_in x n_out x d_out x d_in, got {:?} / {:?}",
            u.shape(),
            w.shape()
        )));
    }
    let (n_in, d_in) = (u.shape()[0], u.shape()[1]);
    if w.shape()[0] != n_in || w.shape()[3] != d_in {
        return Err(Error::shape(format!(
            "transform weights {:?} do not match capsule grid {}x{}",
            w.shape(),
            n_in,
            d_in
        )));
    }
    let (n_out, d_out) = (w.shape()[1], w.shape()[2]);
    let block = n_out * d_out;
    let mut votes = vec![T::zero(); n_in * block];
    for i in 0..n_in {
        // W[i] is a contiguous (n_out * d_out) x d_in matrix.
        T::gemm(
            block,
            d_in,
            1,
            T::one(),
            &w.data()[i * block * d_in..(i + 1) * block * d_in],
            false,
            &u.data()[i * d_in..(i + 1) * d_in],
            false,
            T::zero(),
            &mut votes[i * block..(i + 1) * block],
        );
    }
    Tensor::from_vec(vec![n_in, n_out, d_out], votes)
}

pub(crate) fn compute_votes_vjp<T: Scalar>(
    u: &Tensor<T>,
    w: &Tensor<T>,
    d_votes: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>) {
    let (n_in, d_in) = (u.shape()[0], u.shape()[1]);
    let (n_out, d_out) = (w.shape()[1], w.shape()[2]);
    let block = n_out * d_out;
    let mut d_u = vec![T::zero(); n_in * d_in];
    let mut d_w = vec![T::zero(); w.numel()];
    let wd = w.data();
    let ud = u.data();
    let dv = d_votes.data();
    for i in 0..n_in {
        let w_i = &wd[i * block * d_in..(i + 1) * block * d_in];
        let dv_i = &dv[i * block..(i + 1) * block];
        let u_i = &ud[i * d_in..(i + 1) * d_in];
        // d_u[i] = W[i]^T . d_votes[i]
        T::gemm(
            d_in,
            block,
            1,
            T::one(),
            w_i,
            true,
            dv_i,
            false,
            T::zero(),
            &mut d_u[i * d_in..(i + 1) * d_in],
        );
        // d_W[i] = d_votes[i] (block x 1) . u[i]^T (1 x d_in)
        T::gemm(
            block,
            1,
            d_in,
            T::one(),
            dv_i,
            false,
            u_i,
            false,
            T::zero(),
            &mut d_w[i * block * d_in..(i + 1) * block * d_in],
        );
    }
    (
        Tensor::from_vec(vec![n_in, d_in], d_u).expect("votes vjp u"),
        Tensor::from_vec(w.shape().to_vec(), d_w).expect("votes vjp w"),
    )
}

/// Coupling coefficients `c[i][j] = exp(b[i][j]) / sum_k exp(b[i][k])`:
/// softmax over the output-capsule axis, per input capsule.
pub fn coupling_from_logits<T: Scalar>(b: &Tensor<T>) -> Result<Tensor<T>> {
    if b.shape().len() != 2 {
        return Err(Error::shape(format!(
            "routing logits must be n_in x n_out, got {:?}",
            b.shape()
        )));
    }
    softmax_axis(b, 1)
}

/// Logit update `b'[i][j] = b[i][j] + u_hat[i][j] . v[j]`.
pub fn routing_update<T: Scalar>(
    b: &Tensor<T>,
    votes: &Tensor<T>,
    v: &Tensor<T>,
) -> Result<Tensor<T>> {
    let (n_in, n_out, d_out) = votes_dims(votes)?;
    if b.shape() != [n_in, n_out] {
        return Err(Error::shape(format!(
            "routing logits {:?} do not match votes {:?}",
            b.shape(),
            votes.shape()
        )));
    }
    if v.shape() != [n_out, d_out] {
        return Err(Error::shape(format!(
            "routing outputs {:?} do not match votes {:?}",
            v.shape(),
            votes.shape()
        )));
    }
    let mut out = b.data().to_vec();
    let votes_d = votes.data();
    let v_d = v.data();
    for i in 0..n_in {
        for j in 0..n_out {
            let vote = &votes_d[(i * n_out + j) * d_out..(i * n_out + j + 1) * d_out];
            let vj = &v_d[j * d_out..(j + 1) * d_out];
            let dot: T = vote.iter().zip(vj).map(|(&a, &b)| a * b).sum();
            out[i * n_out + j] += dot;
        }
    }
    Tensor::from_vec(vec![n_in, n_out], out)
}

pub(crate) fn routing_update_vjp<T: Scalar>(
    votes: &Tensor<T>,
    v: &Tensor<T>,
    d_out: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>) {
    let shape = votes.shape();
    let (n_in, n_out, d) = (shape[0], shape[1], shape[2]);
    let mut d_votes = vec![T::zero(); votes.numel()];
    let mut d_v = vec![T::zero(); v.numel()];
    let dv = d_out.data();
    let votes_d = votes.data();
    let v_d = v.data();
    for i in 0..n_in {
        for j in 0..n_out {
            let g = dv[i * n_out + j];
            let base = (i * n_out + j) * d;
            for k in 0..d {
                d_votes[base + k] = g * v_d[j * d + k];
                d_v[j * d + k] += g * votes_d[base + k];
            }
        }
    }
    (
        Tensor::from_vec(shape.to_vec(), d_votes).expect("agreement vjp votes"),
        Tensor::from_vec(v.shape().to_vec(), d_v).expect("agreement vjp v"),
    )
}

/// Weighted vote totals `s[j] = sum_i c[i][j] * u_hat[i][j]`.
pub fn route_weighted_sum<T: Scalar>(c: &Tensor<T>, votes: &Tensor<T>) -> Result<Tensor<T>> {
    let (n_in, n_out, d_out) = votes_dims(votes)?;
    if c.shape() != [n_in, n_out] {
        return Err(Error::shape(format!(
            "couplings {:?} do not match votes {:?}",
            c.shape(),
            votes.shape()
        )));
    }
    let mut s = vec![T::zero(); n_out * d_out];
    let cd = c.data();
    let vd = votes.data();
    for i in 0..n_in {
        for j in 0..n_out {
            let cij = cd[i * n_out + j];
            let vote = &vd[(i * n_out + j) * d_out..(i * n_out + j + 1) * d_out];
            for k in 0..d_out {
                s[j * d_out + k] += cij * vote[k];
            }
        }
    }
    Tensor::from_vec(vec![n_out, d_out], s)
}

pub(crate) fn route_weighted_sum_vjp<T: Scalar>(
    c: &Tensor<T>,
    votes: &Tensor<T>,
    d_s: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>) {
    let shape = votes.shape();
    let (n_in, n_out, d) = (shape[0], shape[1], shape[2]);
    let mut d_c = vec![T::zero(); c.numel()];
    let mut d_votes = vec![T::zero(); votes.numel()];
    let cd = c.data();
    let vd = votes.data();
    let ds = d_s.data();
    for i in 0..n_in {
        for j in 0..n_out {
            let base = (i * n_out + j) * d;
            let mut dot = T::zero();
            let cij = cd[i * n_out + j];
            for k in 0..d {
                dot += ds[j * d + k] * vd[base + k];
                d_votes[base + k] = cij * ds[j * d + k];
            }
            d_c[i * n_out + j] = dot;
        }
    }
    (
        Tensor::from_vec(c.shape().to_vec(), d_c).expect("weighted sum vjp c"),
        Tensor::from_vec(shape.to_vec(), d_votes).expect("weighted sum vjp votes"),
    )
}

fn votes_dims<T: Scalar>(votes: &Tensor<T>) -> Result<(usize, usize, usize)> {
    let shape = votes.shape();
    if shape.len() != 3 {
        return Err(Error::shape(format!(
            "votes must be n_in x n_out x d_out, got {:?}",
            shape
        )));
    }
    Ok((shape[0], shape[1], shape[2]))
}

/// Iterative routing by agreement over a fixed vote tensor.
///
/// Logits start at zero (iteration-1 couplings are uniform). Each iteration
/// computes couplings, weighted totals and squashed outputs; the logit
/// update is skipped after the final iteration.
pub fn dynamic_routing<T: Scalar>(votes: &Tensor<T>, iterations: usize) -> Result<RoutingState<T>> {
    if iterations == 0 {
        return Err(Error::contract("dynamic_routing needs at least 1 iteration"));
    }
    let (n_in, n_out, _) = votes_dims(votes)?;
    let mut logits = Tensor::zeros(vec![n_in, n_out]);
    let mut couplings = coupling_from_logits(&logits)?;
    let mut totals = route_weighted_sum(&couplings, votes)?;
    let mut outputs = squash(&totals)?;
    for _ in 1..iterations {
        logits = routing_update(&logits, votes, &outputs)?;
        couplings = coupling_from_logits(&logits)?;
        totals = route_weighted_sum(&couplings, votes)?;
        outputs = squash(&totals)?;
    }
    Ok(RoutingState {
        votes: votes.clone(),
        logits,
        couplings,
        totals,
        outputs,
    })
}

/// Routing output nodes from one taped pass.
pub struct TapedRouting {
    pub couplings: NodeId,
    pub totals: NodeId,
    pub outputs: NodeId,
}

/// The same unrolled routing loop recorded on a tape, so gradients flow
/// through every iteration including the logit updates.
pub fn dynamic_routing_on_tape<T: Scalar>(
    tape: &mut Tape<T>,
    votes: NodeId,
    iterations: usize,
) -> Result<TapedRouting> {
    if iterations == 0 {
        return Err(Error::contract("dynamic_routing needs at least 1 iteration"));
    }
    let shape = tape.value(votes).shape();
    let (n_in, n_out, _) = votes_dims(tape.value(votes))?;
    let _ = shape;
    let mut logits = tape.leaf(Tensor::zeros(vec![n_in, n_out]));
    let mut couplings = tape.softmax(logits, 1)?;
    let mut totals = tape.route_weighted_sum(couplings, votes)?;
    let mut outputs = tape.squash(totals)?;
    for _ in 1..iterations {
        logits = tape.route_agreement(logits, votes, outputs)?;
        couplings = tape.softmax(logits, 1)?;
        totals = tape.route_weighted_sum(couplings, votes)?;
        outputs = tape.squash(totals)?;
    }
    Ok(TapedRouting {
        couplings,
        totals,
        outputs,
    })
}

/// Regroup `C x H x W` feature maps into `n_types * H * W` capsule vectors
/// of length `dim` (requires `C == n_types * dim`). Capsule `(t, y, x)`
/// takes component `k` from channel `t * dim + k` at position `(y, x)`.
pub fn primary_caps_regroup<T: Scalar>(
    maps: &Tensor<T>,
    n_types: usize,
    dim: usize,
) -> Result<Tensor<T>> {
    let shape = maps.shape();
    if shape.len() != 3 {
        return Err(Error::shape(format!(
            "primary caps input must be C x H x W, got {:?}",
            shape
        )));
    }
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    if n_types == 0 || dim == 0 || c != n_types * dim {
        return Err(Error::shape(format!(
            "{} channels cannot regroup into {} capsule types of {} dims",
            c, n_types, dim
        )));
    }
    let hw = h * w;
    let data = maps.data();
    let mut out = vec![T::zero(); c * hw];
    for t in 0..n_types {
        for pos in 0..hw {
            let cap = t * hw + pos;
            for k in 0..dim {
                out[cap * dim + k] = data[(t * dim + k) * hw + pos];
            }
        }
    }
    Tensor::from_vec(vec![n_types * hw, dim], out)
}

pub(crate) fn primary_caps_regroup_vjp<T: Scalar>(
    input_shape: &[usize],
    d_out: &Tensor<T>,
    n_types: usize,
    dim: usize,
) -> Tensor<T> {
    let (c, h, w) = (input_shape[0], input_shape[1], input_shape[2]);
    let hw = h * w;
    let mut d_in = vec![T::zero(); c * hw];
    let dv = d_out.data();
    for t in 0..n_types {
        for pos in 0..hw {
            let cap = t * hw + pos;
            for k in 0..dim {
                d_in[(t * dim + k) * hw + pos] = dv[cap * dim + k];
            }
        }
    }
    Tensor::from_vec(input_shape.to_vec(), d_in).expect("regroup vjp shape")
}

/// Full primary-capsule transform: regroup then squash each vector.
pub fn primary_caps<T: Scalar>(
    maps: &Tensor<T>,
    n_types: usize,
    dim: usize,
) -> Result<CapsuleGrid<T>> {
    let grouped = primary_caps_regroup(maps, n_types, dim)?;
    CapsuleGrid::new(squash(&grouped)?)
}

pub use linalg::squash_factor as squash_scale;

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn t(shape: Vec<usize>, data: Vec<f64>) -> Tensor<f64> {
        Tensor::from_vec(shape, data).unwrap()
    }

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn squash_zero_vector_maps_to_zero() {
        let out = squash(&t(vec![1, 3], vec![0.0; 3])).unwrap();
        assert_eq!(out.data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn squash_unit_norm_gives_half() {
        let out = squash(&t(vec![1, 2], vec![0.6, 0.8])).unwrap();
        let norm = (out.data()[0].powi(2) + out.data()[1].powi(2)).sqrt();
        assert!((norm - 0.5).abs() < 1e-12);
        // Direction preserved.
        assert!((out.data()[0] / out.data()[1] - 0.75).abs() < 1e-12);
    }

    #[test]
    fn squash_norm_ten_gives_hundred_over_hundred_one() {
        let out = squash(&t(vec![1, 1], vec![10.0])).unwrap();
        assert!((out.data()[0] - 100.0 / 101.0).abs() < 1e-12);
    }

    #[test]
    fn squash_norm_monotone_and_bounded() {
        let mut prev = 0.0;
        for i in 1..200 {
            let n = i as f64 * 0.1;
            let out = squash(&t(vec![1, 1], vec![n])).unwrap().data()[0];
            assert!(out > prev && out < 1.0);
            prev = out;
        }
    }

    #[test]
    fn squash_preserves_direction() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..50 {
            let v = rand_tensor(&mut rng, vec![1, 4]);
            let out = squash(&v).unwrap();
            let dot: f64 = v.data().iter().zip(out.data()).map(|(a, b)| a * b).sum();
            let nv: f64 = v.data().iter().map(|x| x * x).sum::<f64>().sqrt();
            let no: f64 = out.data().iter().map(|x| x * x).sum::<f64>().sqrt();
            if nv > 1e-9 {
                assert!((dot / (nv * no) - 1.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn identity_transform_votes_copy_input() {
        // W[i][j] = I (d_in == d_out == 2) -> votes[i][j] = u[i] for all j.
        let n_in = 3;
        let n_out = 2;
        let d = 2;
        let mut w = vec![0.0; n_in * n_out * d * d];
        for i in 0..n_in {
            for j in 0..n_out {
                for k in 0..d {
                    w[((i * n_out + j) * d + k) * d + k] = 1.0;
                }
            }
        }
        let u = t(vec![n_in, d], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let votes = compute_votes_raw(&u, &t(vec![n_in, n_out, d, d], w)).unwrap();
        for i in 0..n_in {
            for j in 0..n_out {
                for k in 0..d {
                    assert_eq!(
                        votes.data()[(i * n_out + j) * d + k],
                        u.data()[i * d + k]
                    );
                }
            }
        }
    }

    #[test]
    fn zero_transform_gives_zero_votes() {
        let u = t(vec![2, 3], vec![1.0; 6]);
        let w = Tensor::zeros(vec![2, 2, 4, 3]);
        let votes = compute_votes_raw(&u, &w).unwrap();
        assert!(votes.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn votes_match_naive_matvec_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (n_in, n_out, d_out, d_in) = (2, 2, 3, 4);
        let u = rand_tensor(&mut rng, vec![n_in, d_in]);
        let w = rand_tensor(&mut rng, vec![n_in, n_out, d_out, d_in]);
        let votes = compute_votes_raw(&u, &w).unwrap();
        for i in 0..n_in {
            for j in 0..n_out {
                for a in 0..d_out {
                    let mut expect = 0.0;
                    for b in 0..d_in {
                        expect += w.data()[((i * n_out + j) * d_out + a) * d_in + b]
                            * u.data()[i * d_in + b];
                    }
                    let got = votes.data()[(i * n_out + j) * d_out + a];
                    assert!((got - expect).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn uniform_couplings_from_zero_logits() {
        let c = coupling_from_logits(&Tensor::<f64>::zeros(vec![3, 4])).unwrap();
        for &v in c.data() {
            assert!((v - 0.25).abs() < 1e-12);
        }
    }

    #[test]
    fn coupling_row_analytic_quarter_three_quarters() {
        let c = coupling_from_logits(&t(vec![1, 2], vec![0.0, 3.0f64.ln()])).unwrap();
        assert!((c.data()[0] - 0.25).abs() < 1e-12);
        assert!((c.data()[1] - 0.75).abs() < 1e-12);
    }

    #[test]
    fn coupling_rows_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let b = rand_tensor(&mut rng, vec![5, 7]);
            let c = coupling_from_logits(&b).unwrap();
            for i in 0..5 {
                let sum: f64 = c.data()[i * 7..(i + 1) * 7].iter().sum();
                assert!((sum - 1.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn routing_update_zero_output_keeps_logits() {
        let b = t(vec![2, 2], vec![0.1, 0.2, 0.3, 0.4]);
        let votes = t(vec![2, 2, 2], (0..8).map(|i| i as f64).collect());
        let v = Tensor::zeros(vec![2, 2]);
        let b2 = routing_update(&b, &votes, &v).unwrap();
        assert_eq!(b2.data(), b.data());
    }

    #[test]
    fn routing_update_orthogonal_vote_keeps_logit() {
        let b = Tensor::zeros(vec![1, 1]);
        let votes = t(vec![1, 1, 2], vec![1.0, 0.0]);
        let v = t(vec![1, 2], vec![0.0, 2.0]);
        let b2 = routing_update(&b, &votes, &v).unwrap();
        assert_eq!(b2.data()[0], 0.0);
    }

    #[test]
    fn routing_update_matches_dot_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let b = rand_tensor(&mut rng, vec![2, 2]);
        let votes = rand_tensor(&mut rng, vec![2, 2, 3]);
        let v = rand_tensor(&mut rng, vec![2, 3]);
        let b2 = routing_update(&b, &votes, &v).unwrap();
        for i in 0..2 {
            for j in 0..2 {
                let mut dot = 0.0;
                for k in 0..3 {
                    dot += votes.data()[(i * 2 + j) * 3 + k] * v.data()[j * 3 + k];
                }
                let expect = b.data()[i * 2 + j] + dot;
                assert!((b2.data()[i * 2 + j] - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn single_route_output_is_squashed_vote() {
        let votes = t(vec![1, 1, 3], vec![1.0, 2.0, 2.0]);
        for iters in 1..4 {
            let state = dynamic_routing(&votes, iters).unwrap();
            assert!((state.couplings.data()[0] - 1.0).abs() < 1e-12);
            let expect = squash(&t(vec![1, 3], vec![1.0, 2.0, 2.0])).unwrap();
            for (a, b) in state.outputs.data().iter().zip(expect.data()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn two_identical_votes_single_output() {
        // With one output capsule the couplings are forced to 1, so after
        // one iteration v = squash(2 * u_hat).
        let votes = t(vec![2, 1, 2], vec![0.3, -0.4, 0.3, -0.4]);
        let state = dynamic_routing(&votes, 1).unwrap();
        let expect = squash(&t(vec![1, 2], vec![0.6, -0.8])).unwrap();
        for (a, b) in state.outputs.data().iter().zip(expect.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn routing_zero_iterations_is_contract_error() {
        let votes = Tensor::<f64>::zeros(vec![1, 1, 2]);
        assert!(matches!(
            dynamic_routing(&votes, 0),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn routing_matches_unrolled_equation_oracle() {
        // Independent script of the routing equations: raw (unstabilized)
        // coupling softmax, explicit loops, two iterations.
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let (n_in, n_out, d) = (2, 2, 3);
        let votes = rand_tensor(&mut rng, vec![n_in, n_out, d]);
        let state = dynamic_routing(&votes, 2).unwrap();

        let vd = votes.data();
        let mut b = vec![0.0f64; n_in * n_out];
        let mut v = vec![0.0f64; n_out * d];
        let mut c = vec![0.0f64; n_in * n_out];
        for it in 0..2 {
            for i in 0..n_in {
                let denom: f64 = (0..n_out).map(|j| b[i * n_out + j].exp()).sum();
                for j in 0..n_out {
                    c[i * n_out + j] = b[i * n_out + j].exp() / denom;
                }
            }
            let mut s = vec![0.0f64; n_out * d];
            for j in 0..n_out {
                for k in 0..d {
                    for i in 0..n_in {
                        s[j * d + k] += c[i * n_out + j] * vd[(i * n_out + j) * d + k];
                    }
                }
            }
            for j in 0..n_out {
                let norm: f64 = s[j * d..(j + 1) * d]
                    .iter()
                    .map(|x| x * x)
                    .sum::<f64>()
                    .sqrt();
                let f = norm / (1.0 + norm * norm);
                for k in 0..d {
                    v[j * d + k] = f * s[j * d + k];
                }
            }
            if it == 0 {
                for i in 0..n_in {
                    for j in 0..n_out {
                        let mut dot = 0.0;
                        for k in 0..d {
                            dot += vd[(i * n_out + j) * d + k] * v[j * d + k];
                        }
                        b[i * n_out + j] += dot;
                    }
                }
            }
        }
        for (got, expect) in state.outputs.data().iter().zip(v.iter()) {
            assert!((got - expect).abs() < 1e-12, "{} vs {}", got, expect);
        }
        for (got, expect) in state.couplings.data().iter().zip(c.iter()) {
            assert!((got - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn routing_iteration_one_closed_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (n_in, n_out, d) = (4, 3, 2);
        let votes = rand_tensor(&mut rng, vec![n_in, n_out, d]);
        let state = dynamic_routing(&votes, 1).unwrap();
        // Uniform couplings, weighted sum, squash.
        let uniform = 1.0 / n_out as f64;
        let mut s = vec![0.0f64; n_out * d];
        for i in 0..n_in {
            for j in 0..n_out {
                for k in 0..d {
                    s[j * d + k] += uniform * votes.data()[(i * n_out + j) * d + k];
                }
            }
        }
        let expect = squash(&t(vec![n_out, d], s)).unwrap();
        for (a, b) in state.outputs.data().iter().zip(expect.data()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn routing_invariants_hold_on_random_votes() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            let n_in = rng.gen_range(1..6);
            let n_out = rng.gen_range(1..5);
            let d = rng.gen_range(1..5);
            let votes = rand_tensor(&mut rng, vec![n_in, n_out, d]);
            let state = dynamic_routing(&votes, 3).unwrap();
            for i in 0..n_in {
                let sum: f64 = state.couplings.data()[i * n_out..(i + 1) * n_out].iter().sum();
                assert!((sum - 1.0).abs() < 1e-6);
            }
            for j in 0..n_out {
                let norm: f64 = state.outputs.data()[j * d..(j + 1) * d]
                    .iter()
                    .map(|x| x * x)
                    .sum::<f64>()
                    .sqrt();
                assert!(norm < 1.0);
            }
        }
    }

    #[test]
    fn routing_permutation_equivariant() {
        // Permuting input capsules (and their votes) leaves outputs unchanged.
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let (n_in, n_out, d) = (5, 3, 4);
        let votes = rand_tensor(&mut rng, vec![n_in, n_out, d]);
        let perm = [3usize, 0, 4, 1, 2];
        let mut permuted = vec![0.0; votes.numel()];
        let block = n_out * d;
        for (dst, &src) in perm.iter().enumerate() {
            permuted[dst * block..(dst + 1) * block]
                .copy_from_slice(&votes.data()[src * block..(src + 1) * block]);
        }
        let a = dynamic_routing(&votes, 3).unwrap();
        let b = dynamic_routing(&t(vec![n_in, n_out, d], permuted), 3).unwrap();
        for (x, y) in a.outputs.data().iter().zip(b.outputs.data()) {
            assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn taped_routing_matches_pure_routing() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let votes = rand_tensor(&mut rng, vec![3, 2, 4]);
        let pure = dynamic_routing(&votes, 3).unwrap();
        let mut tape = Tape::new();
        let votes_node = tape.leaf(votes);
        let taped = dynamic_routing_on_tape(&mut tape, votes_node, 3).unwrap();
        assert_eq!(tape.value(taped.outputs).data(), pure.outputs.data());
        assert_eq!(tape.value(taped.couplings).data(), pure.couplings.data());
    }

    #[test]
    fn paper_shape_regroups_to_3136_capsules() {
        let maps = Tensor::<f32>::zeros(vec![256, 14, 14]);
        let grid = primary_caps(&maps, 16, 16).unwrap();
        assert_eq!(grid.n_capsules(), 3136);
        assert_eq!(grid.dim(), 16);
    }

    #[test]
    fn regroup_rejects_bad_channel_split() {
        let maps = Tensor::<f32>::zeros(vec![10, 4, 4]);
        assert!(primary_caps_regroup(&maps, 3, 3).is_err());
    }

    #[test]
    fn zero_maps_give_zero_capsules() {
        let grid = primary_caps(&Tensor::<f64>::zeros(vec![8, 3, 3]), 2, 4).unwrap();
        assert!(grid.vectors.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn regroup_is_a_pure_permutation() {
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        let maps = rand_tensor(&mut rng, vec![6, 3, 2]);
        let grouped = primary_caps_regroup(&maps, 3, 2).unwrap();
        let mut a: Vec<u64> = maps.data().iter().map(|v| v.to_bits()).collect();
        let mut b: Vec<u64> = grouped.data().iter().map(|v| v.to_bits()).collect();
        a.sort_unstable();
        b.sort_unstable();
        assert_eq!(a, b);
    }
}
