use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use super::params::{holdings, ParamSet, ParamUnit, TensorSlot};
use super::subnet::SubnetSpec;
use crate::error::Error;

/// What a chain model may update while it is trained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum FreezePolicy {
    /// Chain models freeze everything held by their chain predecessor.
    #[default]
    FreezeInherited,
    /// Everything inside the spec trains.
    Joint,
}

impl FromStr for FreezePolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "freeze-inherited" => Ok(FreezePolicy::FreezeInherited),
            "joint" => Ok(FreezePolicy::Joint),
            other => Err(Error::Input(format!(
                "invalid freeze policy {other:?} (expected freeze-inherited or joint)"
            ))),
        }
    }
}

impl fmt::Display for FreezePolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FreezePolicy::FreezeInherited => "freeze-inherited",
            FreezePolicy::Joint => "joint",
        })
    }
}

/// Trainable flag for every unit of the store.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FreezeMask {
    trainable: BTreeMap<ParamUnit, bool>,
}

impl FreezeMask {
    pub fn all_frozen() -> Self {
        Self {
            trainable: ParamUnit::all().into_iter().map(|u| (u, false)).collect(),
        }
    }

    pub fn is_trainable(&self, unit: ParamUnit) -> bool {
        self.trainable[&unit]
    }

    pub fn trainable_units(&self) -> impl Iterator<Item = ParamUnit> + '_ {
        self.trainable.iter().filter(|(_, &t)| t).map(|(&u, _)| u)
    }

    pub fn units(&self) -> impl Iterator<Item = (ParamUnit, bool)> + '_ {
        self.trainable.iter().map(|(&u, &t)| (u, t))
    }

    /// Per-element frozen flags for every tensor, in `TensorSlot::all()` order.
    pub fn element_masks(&self) -> Vec<(TensorSlot, Vec<bool>)> {
        let shapes = ParamSet::zeros();
        TensorSlot::all()
            .into_iter()
            .map(|slot| {
                let mut frozen = vec![true; shapes.tensor(slot).len()];
                for unit in self.trainable_units().filter(|u| u.slot() == slot) {
                    for i in unit.element_indices() {
                        frozen[i] = false;
                    }
                }
                (slot, frozen)
            })
            .collect()
    }
}

/// Units outside the spec are always frozen. `_outer_iteration` is accepted
/// for schedules that vary freezing over time; neither policy does.
pub fn freeze_mask(spec: &SubnetSpec, policy: FreezePolicy, _outer_iteration: usize) -> FreezeMask {
    let own = holdings(spec);
    let inherited = match (policy, spec.id.chain_predecessor()) {
        (FreezePolicy::FreezeInherited, Some(prev)) => holdings(&prev.spec()),
        _ => Default::default(),
    };
    let mut mask = FreezeMask::all_frozen();
    for unit in own {
        let shared = inherited.contains(&unit) && !matches!(unit, ParamUnit::FcBias(_));
        mask.trainable.insert(unit, !shared);
    }
    mask
}
