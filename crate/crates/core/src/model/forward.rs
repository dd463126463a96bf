//! Forward and backward passes over a channel-range view of the store.

use std::ops::Range;

use super::arch::ARCH;
use super::params::{FluidParams, ParamSet};
use super::subnet::SubnetSpec;
use crate::error::{dim_err, Result};
use crate::ops::{self, PoolIndex};
use crate::tensor::{flatten, Tensor};

#[derive(Debug, Clone, Copy)]
pub struct ConvView<'a> {
    pub weight: &'a Tensor,
    pub bias: &'a Tensor,
    pub out: (usize, usize),
    pub inp: (usize, usize),
}

impl ConvView<'_> {
    fn out_range(&self) -> Range<usize> {
        self.out.0..self.out.1
    }
    fn in_range(&self) -> Range<usize> {
        self.inp.0..self.inp.1
    }
}

/// A runnable network: three sliced conv layers and a sliced classifier.
#[derive(Debug, Clone, Copy)]
pub struct NetView<'a> {
    pub conv: [ConvView<'a>; 3],
    pub fc_weight: &'a Tensor,
    pub fc_bias: &'a Tensor,
    pub fc_cols: (usize, usize),
}

impl<'a> NetView<'a> {
    pub fn of_spec(weights: &'a ParamSet, spec: &SubnetSpec) -> Self {
        let ch = spec.channels();
        let ch = (ch.start, ch.end);
        let feats = spec.features();
        let conv = std::array::from_fn(|l| ConvView {
            weight: &weights.conv_w[l],
            bias: &weights.conv_b[l],
            out: ch,
            inp: if l == 0 { (0, ARCH.input_channels) } else { ch },
        });
        Self {
            conv,
            fc_weight: &weights.fc_w,
            fc_bias: &weights.fc_b[spec.fc_bias_slot.index()],
            fc_cols: (feats.start, feats.end),
        }
    }

    pub fn forward(&self, batch: &Tensor) -> Result<Tensor> {
        check_batch(batch)?;
        let mut h = batch.clone();
        for c in &self.conv {
            let z = ops::conv2d_forward_sliced(&h, c.weight, c.bias, c.out_range(), c.in_range())?;
            let a = ops::relu(&z)?;
            h = ops::maxpool2(&a)?.0;
        }
        let feats = flatten(h)?;
        ops::fc_forward_sliced(&feats, self.fc_weight, Some(self.fc_bias), self.fc_cols.0..self.fc_cols.1)
    }
}

pub(crate) fn check_batch(batch: &Tensor) -> Result<()> {
    let expected = [ARCH.input_channels, ARCH.input_height, ARCH.input_width];
    if batch.rank() != 4 || batch.shape()[1..] != expected {
        return Err(dim_err!(
            "batch must be [N, {}, {}, {}], got {:?}",
            expected[0],
            expected[1],
            expected[2],
            batch.shape()
        ));
    }
    Ok(())
}

/// Logits of sub-network `spec`. Channels outside the spec are neither read nor computed.
pub fn forward(params: &FluidParams, spec: &SubnetSpec, batch: &Tensor) -> Result<Tensor> {
    NetView::of_spec(&params.weights, spec).forward(batch)
}

struct LayerCache {
    input: Tensor,
    pre_act: Tensor,
    pool_idx: PoolIndex,
}

/// Activations kept from a training forward pass.
pub struct ForwardCache {
    layers: Vec<LayerCache>,
    pooled_shape: Vec<usize>,
    features: Tensor,
    pub logits: Tensor,
}

pub fn forward_train(view: &NetView<'_>, batch: &Tensor) -> Result<ForwardCache> {
    check_batch(batch)?;
    let mut layers = Vec::with_capacity(3);
    let mut h = batch.clone();
    for c in &view.conv {
        let z = ops::conv2d_forward_sliced(&h, c.weight, c.bias, c.out_range(), c.in_range())?;
        let a = ops::relu(&z)?;
        let (p, idx) = ops::maxpool2(&a)?;
        layers.push(LayerCache {
            input: h,
            pre_act: z,
            pool_idx: idx,
        });
        h = p;
    }
    let pooled_shape = h.shape().to_vec();
    let features = flatten(h)?;
    let logits = ops::fc_forward_sliced(
        &features,
        view.fc_weight,
        Some(view.fc_bias),
        view.fc_cols.0..view.fc_cols.1,
    )?;
    Ok(ForwardCache {
        layers,
        pooled_shape,
        features,
        logits,
    })
}

/// Accumulates the gradient of the loss into `grads` (same layout as the
/// weights); only the spec's slices are touched.
pub fn backward(
    view: &NetView<'_>,
    spec: &SubnetSpec,
    cache: &ForwardCache,
    dlogits: &Tensor,
    grads: &mut ParamSet,
) -> Result<()> {
    let slot = spec.fc_bias_slot.index();
    let dfeat = ops::fc_backward_sliced(
        &cache.features,
        view.fc_weight,
        dlogits,
        view.fc_cols.0..view.fc_cols.1,
        &mut grads.fc_w,
        Some(&mut grads.fc_b[slot]),
        true,
    )?
    .expect("dx requested");
    let mut dh = dfeat.reshape(cache.pooled_shape.clone())?;
    for l in (0..3).rev() {
        let lc = &cache.layers[l];
        let c = &view.conv[l];
        let da = ops::maxpool2_backward(&lc.pool_idx, &dh, lc.pre_act.shape())?;
        let dz = ops::relu_backward(&lc.pre_act, &da)?;
        let dx = ops::conv2d_backward_sliced(
            &lc.input,
            c.weight,
            &dz,
            c.out_range(),
            c.in_range(),
            &mut grads.conv_w[l],
            &mut grads.conv_b[l],
            l > 0,
        )?;
        if let Some(dx) = dx {
            dh = dx;
        }
    }
    Ok(())
}
