use std::fmt;
use std::ops::Range;
use std::str::FromStr;

use super::arch::{channel_span, feature_span, Group};
use crate::error::Error;

/// The six sub-networks sharing one parameter store.
///
/// `W*` are the nested width-25/50/75/100% models built from the lower channel
/// groups; `U25`/`U50` are the upper models built from groups G3 and G3–G4
/// that run without any lower-group weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum SubnetId {
    W25,
    W50,
    W75,
    W100,
    U25,
    U50,
}

impl SubnetId {
    /// Canonical order; also the fc-bias slot order.
    pub const ALL: [SubnetId; 6] = [
        SubnetId::W25,
        SubnetId::W50,
        SubnetId::W75,
        SubnetId::W100,
        SubnetId::U25,
        SubnetId::U50,
    ];

    pub const CHAIN: [SubnetId; 4] = [SubnetId::W25, SubnetId::W50, SubnetId::W75, SubnetId::W100];
    pub const UPPER: [SubnetId; 2] = [SubnetId::U25, SubnetId::U50];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            SubnetId::W25 => "W25",
            SubnetId::W50 => "W50",
            SubnetId::W75 => "W75",
            SubnetId::W100 => "W100",
            SubnetId::U25 => "U25",
            SubnetId::U50 => "U50",
        }
    }

    pub fn spec(self) -> SubnetSpec {
        subnet_spec(self)
    }

    /// The largest chain model strictly contained in this one.
    pub fn chain_predecessor(self) -> Option<SubnetId> {
        match self {
            SubnetId::W50 => Some(SubnetId::W25),
            SubnetId::W75 => Some(SubnetId::W50),
            SubnetId::W100 => Some(SubnetId::W75),
            _ => None,
        }
    }
}

impl fmt::Display for SubnetId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SubnetId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        SubnetId::ALL
            .into_iter()
            .find(|id| id.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Input(format!("unknown sub-network {s:?}")))
    }
}

/// Which channel groups and weight blocks a sub-network reads.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SubnetSpec {
    pub id: SubnetId,
    /// Output-channel groups of every conv layer; contiguous and ascending.
    pub row_groups: Vec<Group>,
    /// `(out, in)` blocks of conv2 and conv3.
    pub hidden_blocks: Vec<(Group, Group)>,
    pub fc_col_groups: Vec<Group>,
    pub fc_bias_slot: SubnetId,
}

impl SubnetSpec {
    pub fn channels(&self) -> Range<usize> {
        channel_span(&self.row_groups)
    }

    pub fn features(&self) -> Range<usize> {
        feature_span(&self.fc_col_groups)
    }

    pub fn uses_group(&self, g: Group) -> bool {
        self.row_groups.contains(&g)
    }
}

pub fn subnet_spec(id: SubnetId) -> SubnetSpec {
    let row_groups: Vec<Group> = match id {
        SubnetId::W25 => vec![Group::G1],
        SubnetId::W50 => vec![Group::G1, Group::G2],
        SubnetId::W75 => vec![Group::G1, Group::G2, Group::G3],
        SubnetId::W100 => vec![Group::G1, Group::G2, Group::G3, Group::G4],
        SubnetId::U25 => vec![Group::G3],
        SubnetId::U50 => vec![Group::G3, Group::G4],
    };
    let hidden_blocks = row_groups
        .iter()
        .flat_map(|&i| row_groups.iter().map(move |&j| (i, j)))
        .collect();
    SubnetSpec {
        id,
        fc_col_groups: row_groups.clone(),
        row_groups,
        hidden_blocks,
        fc_bias_slot: id,
    }
}
