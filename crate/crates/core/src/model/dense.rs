//! Standalone contiguous copies of a sub-network.
//!
//! Used as an equivalence oracle for the sliced forward pass and to ship a
//! single sub-network on its own.

use super::arch::ARCH;
use super::forward::{ConvView, NetView};
use super::params::FluidParams;
use super::subnet::{SubnetId, SubnetSpec};
use crate::error::{dim_err, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct DenseNet {
    pub id: SubnetId,
    pub conv_w: [Tensor; 3],
    pub conv_b: [Tensor; 3],
    pub fc_w: Tensor,
    pub fc_b: Tensor,
}

impl DenseNet {
    pub fn view(&self) -> NetView<'_> {
        NetView {
            conv: std::array::from_fn(|l| ConvView {
                weight: &self.conv_w[l],
                bias: &self.conv_b[l],
                out: (0, self.conv_w[l].dim(0)),
                inp: (0, self.conv_w[l].dim(1)),
            }),
            fc_weight: &self.fc_w,
            fc_bias: &self.fc_b,
            fc_cols: (0, self.fc_w.dim(1)),
        }
    }

    /// Writes this network's values back into the store at the spec's positions.
    pub fn write_into(&self, params: &mut FluidParams) -> Result<()> {
        let spec = self.id.spec();
        let ch = spec.channels();
        let w = &mut params.weights;
        for l in 0..3 {
            let full = w.conv_w[l].shape().to_vec();
            let in_range = if l == 0 { 0..ARCH.input_channels } else { ch.clone() };
            let src = &self.conv_w[l];
            if src.shape() != [ch.len(), in_range.len(), 3, 3] {
                return Err(dim_err!("conv{} block shape {:?}", l + 1, src.shape()));
            }
            let dst = w.conv_w[l].data_mut();
            for (oi, o) in ch.clone().enumerate() {
                for (ci, c) in in_range.clone().enumerate() {
                    let s = &src.data()[(oi * in_range.len() + ci) * 9..][..9];
                    dst[(o * full[1] + c) * 9..][..9].copy_from_slice(s);
                }
            }
            w.conv_b[l].data_mut()[ch.clone()].copy_from_slice(self.conv_b[l].data());
        }
        let feats = spec.features();
        for r in 0..ARCH.classes {
            let s = &self.fc_w.data()[r * feats.len()..][..feats.len()];
            w.fc_w.data_mut()[r * ARCH.fc_in_features + feats.start..][..feats.len()].copy_from_slice(s);
        }
        w.fc_b[spec.fc_bias_slot.index()]
            .data_mut()
            .copy_from_slice(self.fc_b.data());
        Ok(())
    }
}

pub fn extract_dense(params: &FluidParams, spec: &SubnetSpec) -> DenseNet {
    let w = &params.weights;
    let ch = spec.channels();
    let conv_w = std::array::from_fn(|l| {
        let full = w.conv_w[l].shape();
        let in_range = if l == 0 { 0..ARCH.input_channels } else { ch.clone() };
        let mut data = Vec::with_capacity(ch.len() * in_range.len() * 9);
        for o in ch.clone() {
            for c in in_range.clone() {
                data.extend_from_slice(&w.conv_w[l].data()[(o * full[1] + c) * 9..][..9]);
            }
        }
        Tensor::new(vec![ch.len(), in_range.len(), 3, 3], data).expect("block shape")
    });
    let conv_b = std::array::from_fn(|l| {
        Tensor::new(vec![ch.len()], w.conv_b[l].data()[ch.clone()].to_vec()).expect("bias shape")
    });
    let feats = spec.features();
    let mut fc = Vec::with_capacity(ARCH.classes * feats.len());
    for r in 0..ARCH.classes {
        fc.extend_from_slice(&w.fc_w.data()[r * ARCH.fc_in_features + feats.start..][..feats.len()]);
    }
    DenseNet {
        id: spec.id,
        conv_w,
        conv_b,
        fc_w: Tensor::new(vec![ARCH.classes, feats.len()], fc).expect("fc shape"),
        fc_b: w.fc_b[spec.fc_bias_slot.index()].clone(),
    }
}

pub fn dense_forward(net: &DenseNet, batch: &Tensor) -> Result<Tensor> {
    net.view().forward(batch)
}
