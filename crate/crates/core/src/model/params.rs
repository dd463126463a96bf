//! The shared parameter store.
//!
//! Every weight element has exactly one storage location. Sub-networks are
//! channel-range views into these tensors, so the "copy weights to the next
//! model" steps of nested training need no data movement.
//!
//! The store is partitioned logically into [`ParamUnit`]s: conv1 row groups,
//! the 4×4 grid of 4×4×3×3 blocks of conv2/conv3, per-group conv biases,
//! the four 10×36 column groups of the classifier, and six independent
//! classifier bias vectors (one per [`SubnetId`]).

use std::collections::BTreeSet;

use rand::distributions::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::arch::{Group, ARCH};
use super::subnet::{SubnetId, SubnetSpec};
use crate::error::{dim_err, Result};
use crate::tensor::Tensor;

/// Identifies one physical tensor of the store.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum TensorSlot {
    ConvWeight(u8),
    ConvBias(u8),
    FcWeight,
    FcBias(SubnetId),
}

impl TensorSlot {
    pub fn all() -> Vec<TensorSlot> {
        let mut v = Vec::new();
        for l in 0..3 {
            v.push(TensorSlot::ConvWeight(l));
        }
        for l in 0..3 {
            v.push(TensorSlot::ConvBias(l));
        }
        v.push(TensorSlot::FcWeight);
        v.extend(SubnetId::ALL.map(TensorSlot::FcBias));
        v
    }
}

/// The unit of sharing, freezing and serialization.
///
/// The derived ordering is the canonical checkpoint order: conv1 rows
/// G1..G4, conv2 blocks row-major, conv3 blocks, conv biases, fc column
/// groups, fc bias slots.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ParamUnit {
    Conv1Rows(Group),
    /// `layer` is 1 (conv2) or 2 (conv3).
    ConvBlock { layer: u8, out: Group, inp: Group },
    ConvBias { layer: u8, group: Group },
    FcColumns(Group),
    FcBias(SubnetId),
}

impl ParamUnit {
    pub fn slot(self) -> TensorSlot {
        match self {
            ParamUnit::Conv1Rows(_) => TensorSlot::ConvWeight(0),
            ParamUnit::ConvBlock { layer, .. } => TensorSlot::ConvWeight(layer),
            ParamUnit::ConvBias { layer, .. } => TensorSlot::ConvBias(layer),
            ParamUnit::FcColumns(_) => TensorSlot::FcWeight,
            ParamUnit::FcBias(id) => TensorSlot::FcBias(id),
        }
    }

    /// Flat offsets of this unit's elements inside its tensor, ascending.
    pub fn element_indices(self) -> Vec<usize> {
        let full = ARCH.conv_channels_full;
        match self {
            ParamUnit::Conv1Rows(g) => g.channels().flat_map(|o| o * 9..o * 9 + 9).collect(),
            ParamUnit::ConvBlock { out, inp, .. } => out
                .channels()
                .flat_map(|o| {
                    inp.channels()
                        .flat_map(move |c| (o * full + c) * 9..(o * full + c) * 9 + 9)
                })
                .collect(),
            ParamUnit::ConvBias { group, .. } => group.channels().collect(),
            ParamUnit::FcColumns(g) => (0..ARCH.classes)
                .flat_map(|r| {
                    let f = g.features();
                    r * ARCH.fc_in_features + f.start..r * ARCH.fc_in_features + f.end
                })
                .collect(),
            ParamUnit::FcBias(_) => (0..ARCH.classes).collect(),
        }
    }

    /// Every unit of the store, in canonical order.
    pub fn all() -> Vec<ParamUnit> {
        let mut v: Vec<ParamUnit> = Group::all().map(ParamUnit::Conv1Rows).collect();
        for layer in 1..3 {
            for out in Group::all() {
                for inp in Group::all() {
                    v.push(ParamUnit::ConvBlock { layer, out, inp });
                }
            }
        }
        for layer in 0..3 {
            v.extend(Group::all().map(|group| ParamUnit::ConvBias { layer, group }));
        }
        v.extend(Group::all().map(ParamUnit::FcColumns));
        v.extend(SubnetId::ALL.map(ParamUnit::FcBias));
        v
    }
}

/// Units read by a sub-network's forward pass.
pub fn holdings(spec: &SubnetSpec) -> BTreeSet<ParamUnit> {
    let mut set = BTreeSet::new();
    for &g in &spec.row_groups {
        set.insert(ParamUnit::Conv1Rows(g));
        for layer in 0..3 {
            set.insert(ParamUnit::ConvBias { layer, group: g });
        }
    }
    for layer in 1..3 {
        for &(out, inp) in &spec.hidden_blocks {
            set.insert(ParamUnit::ConvBlock { layer, out, inp });
        }
    }
    for &g in &spec.fc_col_groups {
        set.insert(ParamUnit::FcColumns(g));
    }
    set.insert(ParamUnit::FcBias(spec.fc_bias_slot));
    set
}

/// One full set of network tensors (weights, gradients or velocities).
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet {
    pub conv_w: [Tensor; 3],
    pub conv_b: [Tensor; 3],
    pub fc_w: Tensor,
    pub fc_b: [Tensor; 6],
}

impl ParamSet {
    pub fn zeros() -> Self {
        let c = ARCH.conv_channels_full;
        Self {
            conv_w: [
                Tensor::zeros(&[c, ARCH.input_channels, 3, 3]),
                Tensor::zeros(&[c, c, 3, 3]),
                Tensor::zeros(&[c, c, 3, 3]),
            ],
            conv_b: std::array::from_fn(|_| Tensor::zeros(&[c])),
            fc_w: Tensor::zeros(&[ARCH.classes, ARCH.fc_in_features]),
            fc_b: std::array::from_fn(|_| Tensor::zeros(&[ARCH.classes])),
        }
    }

    pub fn tensor(&self, slot: TensorSlot) -> &Tensor {
        match slot {
            TensorSlot::ConvWeight(l) => &self.conv_w[usize::from(l)],
            TensorSlot::ConvBias(l) => &self.conv_b[usize::from(l)],
            TensorSlot::FcWeight => &self.fc_w,
            TensorSlot::FcBias(id) => &self.fc_b[id.index()],
        }
    }

    pub fn tensor_mut(&mut self, slot: TensorSlot) -> &mut Tensor {
        match slot {
            TensorSlot::ConvWeight(l) => &mut self.conv_w[usize::from(l)],
            TensorSlot::ConvBias(l) => &mut self.conv_b[usize::from(l)],
            TensorSlot::FcWeight => &mut self.fc_w,
            TensorSlot::FcBias(id) => &mut self.fc_b[id.index()],
        }
    }

    /// Total scalar count (6300 for the default architecture).
    pub fn scalar_count(&self) -> usize {
        TensorSlot::all().into_iter().map(|s| self.tensor(s).len()).sum()
    }

    pub fn unit_values(&self, unit: ParamUnit) -> Vec<f32> {
        let t = self.tensor(unit.slot()).data();
        unit.element_indices().into_iter().map(|i| t[i]).collect()
    }

    pub fn set_unit_values(&mut self, unit: ParamUnit, values: &[f32]) -> Result<()> {
        let idx = unit.element_indices();
        if idx.len() != values.len() {
            return Err(dim_err!(
                "{unit:?} holds {} values, got {}",
                idx.len(),
                values.len()
            ));
        }
        let t = self.tensor_mut(unit.slot()).data_mut();
        for (i, &v) in idx.into_iter().zip(values) {
            t[i] = v;
        }
        Ok(())
    }

    /// Applies `f` to every element of `unit`.
    pub fn map_unit(&mut self, unit: ParamUnit, mut f: impl FnMut(f32) -> f32) {
        let idx = unit.element_indices();
        let t = self.tensor_mut(unit.slot()).data_mut();
        for i in idx {
            t[i] = f(t[i]);
        }
    }

    pub fn check_finite(&self) -> Result<()> {
        for slot in TensorSlot::all() {
            self.tensor(slot).check_finite(&format!("{slot:?}"))?;
        }
        Ok(())
    }
}

/// Weights plus the optimizer's momentum buffers.
#[derive(Debug, Clone, PartialEq)]
pub struct FluidParams {
    pub weights: ParamSet,
    pub velocity: ParamSet,
}

impl FluidParams {
    pub fn from_weights(weights: ParamSet) -> Self {
        Self {
            weights,
            velocity: ParamSet::zeros(),
        }
    }
}

/// Uniform(−√(1/fan_in), √(1/fan_in)) weights with fan-in of the full layer;
/// zero biases and velocities.
pub fn init_params(seed: u64) -> FluidParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut weights = ParamSet::zeros();
    let fill = |t: &mut Tensor, fan_in: usize, rng: &mut ChaCha8Rng| {
        let bound = init_bound(fan_in);
        let dist = Uniform::new(-bound, bound);
        for v in t.data_mut() {
            *v = dist.sample(rng);
        }
    };
    let c = ARCH.conv_channels_full;
    fill(&mut weights.conv_w[0], ARCH.input_channels * 9, &mut rng);
    fill(&mut weights.conv_w[1], c * 9, &mut rng);
    fill(&mut weights.conv_w[2], c * 9, &mut rng);
    fill(&mut weights.fc_w, ARCH.fc_in_features, &mut rng);
    FluidParams::from_weights(weights)
}

pub fn init_bound(fan_in: usize) -> f32 {
    (1.0 / fan_in as f64).sqrt() as f32
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn units_partition_every_tensor() {
        let set = ParamSet::zeros();
        for slot in TensorSlot::all() {
            let mut seen = vec![0u32; set.tensor(slot).len()];
            for unit in ParamUnit::all().into_iter().filter(|u| u.slot() == slot) {
                for i in unit.element_indices() {
                    seen[i] += 1;
                }
            }
            assert!(seen.iter().all(|&c| c == 1), "{slot:?} not partitioned");
        }
        let mut sorted = ParamUnit::all();
        sorted.sort();
        assert_eq!(sorted, ParamUnit::all(), "derived order is canonical");
    }

    #[test]
    fn scalar_count_of_default_arch() {
        // conv1 144+16, conv2/conv3 2304+16 each, fc 1440, six bias slots of 10.
        assert_eq!(ParamSet::zeros().scalar_count(), 160 + 2 * 2320 + 1440 + 60);
    }

    #[test]
    fn init_is_deterministic_and_bounded() {
        let a = init_params(7);
        let b = init_params(7);
        assert_eq!(a, b);
        assert_ne!(a, init_params(8));
        let bound = init_bound(144);
        assert!((bound - 0.083333).abs() < 1e-5);
        assert!(a.weights.conv_w[1].data().iter().all(|v| v.abs() <= bound));
        assert!(a.weights.conv_w[0].data().iter().all(|v| v.abs() <= init_bound(9)));
        for slot in a.weights.fc_b.iter().chain(a.weights.conv_b.iter()) {
            assert!(slot.data().iter().all(|&v| v == 0.0));
        }
        assert_eq!(a.velocity, ParamSet::zeros());
    }

    #[test]
    fn holdings_of_upper_model() {
        let h = holdings(&SubnetId::U25.spec());
        assert!(h.contains(&ParamUnit::ConvBlock { layer: 2, out: Group::G3, inp: Group::G3 }));
        assert!(!h.contains(&ParamUnit::ConvBlock { layer: 2, out: Group::G3, inp: Group::G4 }));
        assert!(h.contains(&ParamUnit::FcBias(SubnetId::U25)));
        // 1 conv1 row + 3 biases + 2 blocks + 1 fc column + 1 bias slot
        assert_eq!(h.len(), 8);
    }
}
