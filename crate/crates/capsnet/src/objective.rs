//! Training objective pieces: margin loss over class-capsule norms, the
//! masked reconstruction decoder input, reconstruction loss, and their
//! weighted combination.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{s, Scalar, Tensor};

/// Margin-loss constants. Defaults follow the usual vector-capsule choice:
/// present-class threshold 0.9, absent-class threshold 0.1, absent-class
/// down-weight 0.5.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MarginLossConfig {
    pub m_plus: f64,
    pub m_minus: f64,
    pub lambda: f64,
}

impl Default for MarginLossConfig {
    fn default() -> Self {
        MarginLossConfig {
            m_plus: 0.9,
            m_minus: 0.1,
            lambda: 0.5,
        }
    }
}

impl MarginLossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 < self.m_minus && self.m_minus < self.m_plus && self.m_plus < 1.0) {
            return Err(Error::contract(format!(
                "margin loss needs 0 < m_minus < m_plus < 1, got {} / {}",
                self.m_minus, self.m_plus
            )));
        }
        if self.lambda <= 0.0 {
            return Err(Error::contract("margin loss lambda must be positive"));
        }
        Ok(())
    }
}

/// `sum_k [ T_k max(0, m+ - n_k)^2 + lambda (1 - T_k) max(0, n_k - m-)^2 ]`
/// with `T_k = 1` iff `k == target`.
pub fn margin_loss<T: Scalar>(
    norms: &Tensor<T>,
    target: usize,
    cfg: &MarginLossConfig,
) -> Result<T> {
    let n = norms.numel();
    if target >= n {
        return Err(Error::Index(format!(
            "margin loss target {} out of range for {} classes",
            target, n
        )));
    }
    let m_plus = s::<T>(cfg.m_plus);
    let m_minus = s::<T>(cfg.m_minus);
    let lambda = s::<T>(cfg.lambda);
    let mut loss = T::zero();
    for (k, &norm) in norms.data().iter().enumerate() {
        if k == target {
            let hinge = (m_plus - norm).max(T::zero());
            loss += hinge * hinge;
        } else {
            let hinge = (norm - m_minus).max(T::zero());
            loss += lambda * hinge * hinge;
        }
    }
    Ok(loss)
}

/// Zero every capsule vector except `selected`, then flatten to
/// `n_classes * d`. Training masks with the true label; inference masks
/// with the argmax-norm capsule.
pub fn mask_class_capsules<T: Scalar>(v: &Tensor<T>, selected: usize) -> Result<Tensor<T>> {
    let shape = v.shape();
    if shape.len() != 2 {
        return Err(Error::shape(format!(
            "mask expects n_classes x d capsules, got {:?}",
            shape
        )));
    }
    let (n, d) = (shape[0], shape[1]);
    if selected >= n {
        return Err(Error::Index(format!(
            "mask index {} out of range for {} capsules",
            selected, n
        )));
    }
    let mut out = vec![T::zero(); n * d];
    out[selected * d..(selected + 1) * d]
        .copy_from_slice(&v.data()[selected * d..(selected + 1) * d]);
    Tensor::from_vec(vec![n * d], out)
}

/// Reconstruction decoder layout: an ordered stack of fully connected
/// widths ending at `output_side^2`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecoderSpec {
    pub fc_sizes: Vec<usize>,
    pub output_side: usize,
}

impl DecoderSpec {
    pub fn new(fc_sizes: Vec<usize>, output_side: usize) -> Result<Self> {
        if fc_sizes.is_empty() || fc_sizes.iter().any(|&w| w == 0) {
            return Err(Error::contract("decoder needs positive layer widths"));
        }
        if *fc_sizes.last().unwrap() != output_side * output_side {
            return Err(Error::contract(format!(
                "decoder final width {} must equal output side squared {}",
                fc_sizes.last().unwrap(),
                output_side * output_side
            )));
        }
        Ok(DecoderSpec {
            fc_sizes,
            output_side,
        })
    }
}

/// Sum of squared pixel differences.
pub fn reconstruction_loss<T: Scalar>(original: &Tensor<T>, reconstructed: &Tensor<T>) -> Result<T> {
    if original.shape() != reconstructed.shape() {
        return Err(Error::shape(format!(
            "reconstruction loss over mismatched shapes {:?} vs {:?}",
            original.shape(),
            reconstructed.shape()
        )));
    }
    Ok(original
        .data()
        .iter()
        .zip(reconstructed.data())
        .map(|(&a, &b)| (a - b) * (a - b))
        .sum())
}

/// `margin + recon_weight * recon`.
pub fn total_loss<T: Scalar>(margin: T, recon: T, recon_weight: f64) -> Result<T> {
    if recon_weight < 0.0 {
        return Err(Error::contract("reconstruction weight must be non-negative"));
    }
    Ok(margin + s::<T>(recon_weight) * recon)
}

/// Default reconstruction weight, scaled from the usual 28x28 value of
/// 0.0005 by the pixel count ratio.
pub fn default_recon_weight(pixel_count: usize) -> f64 {
    0.0005 * pixel_count as f64 / 784.0
}
