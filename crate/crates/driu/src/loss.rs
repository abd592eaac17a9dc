//! Class-balancing cross entropy over a sigmoid output, with the analytic
//! gradient with respect to the pre-sigmoid activations.
//!
//! The loss is the total over all pixels (not the per-pixel mean):
//!   L = -beta * sum_{fg} log p  -  (1-beta) * sum_{bg} log(1-p)
//! with beta = |background| / |all pixels|.
//!
//! Log-probabilities are computed in f64 directly from the activations
//! (log-sigmoid via softplus), never as the log of a stored probability.

use crate::error::{Error, Result};
use crate::ops::sigmoid_scalar;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Binary [1,H,W] ground-truth mask.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GroundTruthMask {
    height: usize,
    width: usize,
    foreground: Vec<bool>,
}

impl GroundTruthMask {
    pub fn new(height: usize, width: usize, foreground: Vec<bool>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::shape("mask extents must be >= 1"));
        }
        if foreground.len() != height * width {
            return Err(Error::shape(format!(
                "mask data length {} does not match {}x{}",
                foreground.len(),
                height,
                width
            )));
        }
        Ok(GroundTruthMask {
            height,
            width,
            foreground,
        })
    }

    /// Accepts only strictly binary tensors of shape [1,H,W].
    pub fn from_tensor<S: Scalar>(t: &Tensor<S>) -> Result<Self> {
        if t.shape().len() != 3 || t.shape()[0] != 1 {
            return Err(Error::shape(format!(
                "mask must be [1,H,W], got {:?}",
                t.shape()
            )));
        }
        let mut fg = Vec::with_capacity(t.len());
        for &v in t.data() {
            if v == S::one() {
                fg.push(true);
            } else if v == S::zero() {
                fg.push(false);
            } else {
                return Err(Error::InvalidArgument(format!(
                    "mask value {:?} is not binary",
                    v
                )));
            }
        }
        Self::new(t.shape()[1], t.shape()[2], fg)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn foreground(&self) -> &[bool] {
        &self.foreground
    }

    pub fn foreground_count(&self) -> usize {
        self.foreground.iter().filter(|&&b| b).count()
    }

    pub fn len(&self) -> usize {
        self.foreground.len()
    }

    pub fn is_empty(&self) -> bool {
        self.foreground.is_empty()
    }

    pub fn to_tensor<S: Scalar>(&self) -> Tensor<S> {
        Tensor::from_vec(
            &[1, self.height, self.width],
            self.foreground
                .iter()
                .map(|&b| if b { S::one() } else { S::zero() })
                .collect(),
        )
        .expect("consistent mask shape")
    }
}

#[derive(Debug, Clone)]
pub struct LossTerms {
    pub beta: f64,
    pub total: f64,
    /// Per-pixel contribution, diagnostic only.
    pub per_pixel: Tensor<f64>,
}

/// beta = |Y-| / |Y|, exact from integer counts.
pub fn class_balance_beta(mask: &GroundTruthMask) -> f64 {
    let total = mask.len();
    let fg = mask.foreground_count();
    (total - fg) as f64 / total as f64
}

#[inline]
fn softplus(x: f64) -> f64 {
    // ln(1 + e^x) without overflow
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn check_mask_shape<S: Scalar>(activation: &Tensor<S>, mask: &GroundTruthMask) -> Result<()> {
    if activation.shape() != [1, mask.height, mask.width] {
        return Err(Error::shape(format!(
            "activation shape {:?} does not match mask [1,{},{}]",
            activation.shape(),
            mask.height,
            mask.width
        )));
    }
    Ok(())
}

/// Total balanced cross entropy from pre-sigmoid activations.
pub fn balanced_bce_loss<S: Scalar>(
    activation: &Tensor<S>,
    mask: &GroundTruthMask,
) -> Result<LossTerms> {
    check_mask_shape(activation, mask)?;
    let beta = class_balance_beta(mask);
    let mut per_pixel = Tensor::<f64>::zeros(activation.shape())?;
    let mut total = 0.0;
    for (i, (&a, &fg)) in activation
        .data()
        .iter()
        .zip(mask.foreground())
        .enumerate()
    {
        let a = a.to_f64_();
        // -log p = softplus(-a); -log(1-p) = softplus(a)
        let term = if fg {
            beta * softplus(-a)
        } else {
            (1.0 - beta) * softplus(a)
        };
        per_pixel.data_mut()[i] = term;
        total += term;
    }
    Ok(LossTerms {
        beta,
        total,
        per_pixel,
    })
}

/// dL/da: -beta*(1-sigma(a)) on foreground, (1-beta)*sigma(a) on background.
pub fn balanced_bce_grad<S: Scalar>(
    activation: &Tensor<S>,
    mask: &GroundTruthMask,
) -> Result<Tensor<S>> {
    check_mask_shape(activation, mask)?;
    let beta = class_balance_beta(mask);
    Tensor::from_vec(
        activation.shape(),
        activation
            .data()
            .iter()
            .zip(mask.foreground())
            .map(|(&a, &fg)| {
                let p = sigmoid_scalar(a.to_f64_());
                let g = if fg {
                    -beta * (1.0 - p)
                } else {
                    (1.0 - beta) * p
                };
                S::from_f64(g)
            })
            .collect(),
    )
}
