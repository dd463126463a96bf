//! Row-partitioned execution of the full model across two devices.
//!
//! The lower half (groups G1–G2) runs on the master, the upper half (G3–G4)
//! on the worker. Each conv layer computes its own output rows from all 16
//! input channels, so both sides need the other's pooled activations after
//! conv1 and conv2. The classifier is split by column group; the two partial
//! logit vectors plus the W100 bias give the full logits.

use std::ops::Range;

use super::arch::{Group, ARCH};
use super::forward::check_batch;
use super::params::FluidParams;
use super::subnet::SubnetId;
use crate::error::{dim_err, Result};
use crate::ops;
use crate::tensor::{concat_channels, flatten, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Half {
    Lower,
    Upper,
}

impl Half {
    pub fn groups(self) -> [Group; 2] {
        match self {
            Half::Lower => [Group::G1, Group::G2],
            Half::Upper => [Group::G3, Group::G4],
        }
    }

    pub fn channels(self) -> Range<usize> {
        let [a, b] = self.groups();
        a.channels().start..b.channels().end
    }

    pub fn features(self) -> Range<usize> {
        let [a, b] = self.groups();
        a.features().start..b.features().end
    }

    pub fn other(self) -> Half {
        match self {
            Half::Lower => Half::Upper,
            Half::Upper => Half::Lower,
        }
    }
}

/// conv(`layer`) → relu → pool for this half's output rows.
///
/// `input` is the image for layer 0 and all 16 pooled channels otherwise.
pub fn conv_stage(params: &FluidParams, layer: usize, input: &Tensor, half: Half) -> Result<Tensor> {
    if layer >= ARCH.conv_layers {
        return Err(dim_err!("conv layer {layer} out of range"));
    }
    if layer == 0 {
        check_batch(input)?;
    }
    let w = &params.weights;
    let in_range = 0..w.conv_w[layer].dim(1);
    let z = ops::conv2d_forward_sliced(input, &w.conv_w[layer], &w.conv_b[layer], half.channels(), in_range)?;
    Ok(ops::maxpool2(&ops::relu(&z)?)?.0)
}

/// Classifier columns of this half applied to its pooled conv3 output; no bias.
pub fn fc_partial(params: &FluidParams, pooled: &Tensor, half: Half) -> Result<Tensor> {
    let feats = flatten(pooled.clone())?;
    ops::fc_forward_sliced(&feats, &params.weights.fc_w, None, half.features())
}

/// Joins the two halves' activations in channel order.
pub fn merge_halves(own: &Tensor, other: &Tensor, own_half: Half) -> Result<Tensor> {
    match own_half {
        Half::Lower => concat_channels(own, other),
        Half::Upper => concat_channels(other, own),
    }
}

/// `lower + upper + bias(W100)`.
pub fn combine_logits(params: &FluidParams, lower: &Tensor, upper: &Tensor) -> Result<Tensor> {
    if lower.shape() != upper.shape() || lower.rank() != 2 || lower.dim(1) != ARCH.classes {
        return Err(dim_err!(
            "partial logits {:?} vs {:?}",
            lower.shape(),
            upper.shape()
        ));
    }
    let bias = params.weights.fc_b[SubnetId::W100.index()].data();
    let data = lower
        .data()
        .iter()
        .zip(upper.data())
        .enumerate()
        .map(|(k, (a, b))| a + b + bias[k % ARCH.classes])
        .collect();
    Tensor::new(lower.shape().to_vec(), data)
}

/// Runs both halves in-process exactly as the distributed protocol does.
pub fn split_forward(params: &FluidParams, batch: &Tensor) -> Result<Tensor> {
    let mut lower = batch.clone();
    let mut upper = batch.clone();
    for layer in 0..ARCH.conv_layers {
        let lo = conv_stage(params, layer, &lower, Half::Lower)?;
        let up = conv_stage(params, layer, &upper, Half::Upper)?;
        if layer + 1 < ARCH.conv_layers {
            lower = merge_halves(&lo, &up, Half::Lower)?;
            upper = merge_halves(&up, &lo, Half::Upper)?;
        } else {
            lower = lo;
            upper = up;
        }
    }
    let pl = fc_partial(params, &lower, Half::Lower)?;
    let pu = fc_partial(params, &upper, Half::Upper)?;
    combine_logits(params, &pl, &pu)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::forward::forward;
    use crate::model::params::init_params;

    #[test]
    fn split_matches_full_model() {
        let p = init_params(5);
        let x = Tensor::from_fn(&[4, 1, 28, 28], |i| ((i * 31) % 256) as f32 / 255.0);
        let local = forward(&p, &SubnetId::W100.spec(), &x).unwrap();
        let split = split_forward(&p, &x).unwrap();
        for (a, b) in local.data().iter().zip(split.data()) {
            assert!((a - b).abs() <= 1e-5, "{a} vs {b}");
        }
    }

    #[test]
    fn stage_shapes() {
        let p = init_params(5);
        let x = Tensor::zeros(&[2, 1, 28, 28]);
        let a = conv_stage(&p, 0, &x, Half::Upper).unwrap();
        assert_eq!(a.shape(), &[2, 8, 14, 14]);
        assert!(conv_stage(&p, 1, &a, Half::Upper).is_err(), "needs all 16 channels");
    }
}
