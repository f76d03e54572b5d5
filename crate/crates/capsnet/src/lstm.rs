//! Standard LSTM cell over the concatenated `[x; h_prev]` vector, with one
//! weight matrix and bias per gate so individual gate shapes stay visible.

use crate::error::{Error, Result};
use crate::linalg::{dense_forward, Activation};
use crate::tape::{NodeId, Tape};
use crate::tensor::{Scalar, Tensor};

/// Per-gate parameters; each weight is `units x (input + units)`.
/// Gate order: input `i`, forget `f`, candidate `g`, output `o`.
#[derive(Debug, Clone)]
pub struct LstmParams<T> {
    pub w_i: Tensor<T>,
    pub w_f: Tensor<T>,
    pub w_g: Tensor<T>,
    pub w_o: Tensor<T>,
    pub b_i: Tensor<T>,
    pub b_f: Tensor<T>,
    pub b_g: Tensor<T>,
    pub b_o: Tensor<T>,
}

impl<T: Scalar> LstmParams<T> {
    pub fn units(&self) -> usize {
        self.w_i.shape()[0]
    }
}

/// One cell step:
/// `i,f,o = sigmoid(W [x;h] + b)`, `g = tanh(W [x;h] + b)`,
/// `c = f*c_prev + i*g`, `h = o*tanh(c)`.
pub fn lstm_step<T: Scalar>(
    x: &Tensor<T>,
    h_prev: &Tensor<T>,
    c_prev: &Tensor<T>,
    params: &LstmParams<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let units = params.units();
    if h_prev.numel() != units || c_prev.numel() != units {
        return Err(Error::shape(format!(
            "lstm state length {} does not match {} units",
            h_prev.numel(),
            units
        )));
    }
    let mut z = x.data().to_vec();
    z.extend_from_slice(h_prev.data());
    let z = Tensor::from_vec(vec![z.len()], z)?;
    let gate = |w: &Tensor<T>, b: &Tensor<T>, act: Activation| -> Result<Tensor<T>> {
        Ok(dense_forward(&z, w, b)?.map(|v| act.apply(v)))
    };
    let i = gate(&params.w_i, &params.b_i, Activation::Sigmoid)?;
    let f = gate(&params.w_f, &params.b_f, Activation::Sigmoid)?;
    let g = gate(&params.w_g, &params.b_g, Activation::Tanh)?;
    let o = gate(&params.w_o, &params.b_o, Activation::Sigmoid)?;
    let mut c = vec![T::zero(); units];
    let mut h = vec![T::zero(); units];
    for k in 0..units {
        c[k] = f.data()[k] * c_prev.data()[k] + i.data()[k] * g.data()[k];
        h[k] = o.data()[k] * c[k].tanh();
    }
    Ok((
        Tensor::from_vec(vec![units], h)?,
        Tensor::from_vec(vec![units], c)?,
    ))
}

/// Node handles for each gate parameter of a taped step.
pub struct LstmNodeParams {
    pub w_i: NodeId,
    pub w_f: NodeId,
    pub w_g: NodeId,
    pub w_o: NodeId,
    pub b_i: NodeId,
    pub b_f: NodeId,
    pub b_g: NodeId,
    pub b_o: NodeId,
}

/// The same step recorded on a tape (differentiable composition of
/// concat, dense, activations and elementwise products).
pub fn lstm_step_on_tape<T: Scalar>(
    tape: &mut Tape<T>,
    x: NodeId,
    h_prev: NodeId,
    c_prev: NodeId,
    params: &LstmNodeParams,
) -> Result<(NodeId, NodeId)> {
    let z = tape.concat(x, h_prev)?;
    let i_lin = tape.dense(z, params.w_i, params.b_i)?;
    let i = tape.activation(i_lin, Activation::Sigmoid);
    let f_lin = tape.dense(z, params.w_f, params.b_f)?;
    let f = tape.activation(f_lin, Activation::Sigmoid);
    let g_lin = tape.dense(z, params.w_g, params.b_g)?;
    let g = tape.activation(g_lin, Activation::Tanh);
    let o_lin = tape.dense(z, params.w_o, params.b_o)?;
    let o = tape.activation(o_lin, Activation::Sigmoid);
    let fc = tape.mul(f, c_prev)?;
    let ig = tape.mul(i, g)?;
    let c = tape.add(fc, ig)?;
    let c_tanh = tape.activation(c, Activation::Tanh);
    let h = tape.mul(o, c_tanh)?;
    Ok((h, c))
}
