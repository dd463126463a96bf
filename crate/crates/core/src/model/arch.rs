use std::fmt;
use std::ops::Range;

/// Geometry of the three-conv, one-FC network.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ArchConfig {
    pub conv_channels_full: usize,
    pub channel_group_size: usize,
    pub groups: usize,
    pub conv_layers: usize,
    pub fc_in_features: usize,
    pub classes: usize,
    pub input_channels: usize,
    pub input_height: usize,
    pub input_width: usize,
}

pub const ARCH: ArchConfig = ArchConfig {
    conv_channels_full: 16,
    channel_group_size: 4,
    groups: 4,
    conv_layers: 3,
    fc_in_features: 144,
    classes: 10,
    input_channels: 1,
    input_height: 28,
    input_width: 28,
};

impl Default for ArchConfig {
    fn default() -> Self {
        ARCH
    }
}

impl ArchConfig {
    /// Spatial size entering conv layer `layer` (0-based): 28, 14, 7.
    pub fn conv_input_hw(&self, layer: usize) -> (usize, usize) {
        (self.input_height >> layer, self.input_width >> layer)
    }

    /// Spatial size after the final pool: 3×3.
    pub fn pooled_hw(&self) -> (usize, usize) {
        (
            self.input_height >> self.conv_layers,
            self.input_width >> self.conv_layers,
        )
    }

    /// FC features contributed by one channel group (4 channels × 3×3).
    pub fn features_per_group(&self) -> usize {
        let (h, w) = self.pooled_hw();
        self.channel_group_size * h * w
    }

    pub fn input_pixels(&self) -> usize {
        self.input_channels * self.input_height * self.input_width
    }

    /// Group boundaries on the channel axis: 0, 4, 8, 12, 16.
    pub fn group_boundaries(&self) -> Vec<usize> {
        (0..=self.groups).map(|g| g * self.channel_group_size).collect()
    }
}

/// One of the four 4-channel slices of a conv layer (0-based; `G1` is index 0).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Group(pub u8);

impl Group {
    pub const G1: Group = Group(0);
    pub const G2: Group = Group(1);
    pub const G3: Group = Group(2);
    pub const G4: Group = Group(3);

    pub fn index(self) -> usize {
        usize::from(self.0)
    }

    pub fn channels(self) -> Range<usize> {
        let s = ARCH.channel_group_size;
        self.index() * s..(self.index() + 1) * s
    }

    pub fn features(self) -> Range<usize> {
        let f = ARCH.features_per_group();
        self.index() * f..(self.index() + 1) * f
    }

    pub fn all() -> impl Iterator<Item = Group> {
        (0..ARCH.groups as u8).map(Group)
    }
}

impl fmt::Display for Group {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "G{}", self.0 + 1)
    }
}

/// Channel range covered by a contiguous run of groups.
pub fn channel_span(groups: &[Group]) -> Range<usize> {
    let first = groups.first().expect("non-empty group set");
    let last = groups.last().expect("non-empty group set");
    first.channels().start..last.channels().end
}

pub fn feature_span(groups: &[Group]) -> Range<usize> {
    let first = groups.first().expect("non-empty group set");
    let last = groups.last().expect("non-empty group set");
    first.features().start..last.features().end
}

/// Multiply-accumulates of one conv layer per image.
pub fn conv_macs(layer: usize, out_channels: usize, in_channels: usize) -> u64 {
    let (h, w) = ARCH.conv_input_hw(layer);
    (h * w * out_channels * in_channels * 9) as u64
}

pub fn fc_macs(features: usize) -> u64 {
    (features * ARCH.classes) as u64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn geometry_matches_network() {
        assert_eq!(ARCH.conv_input_hw(0), (28, 28));
        assert_eq!(ARCH.conv_input_hw(2), (7, 7));
        assert_eq!(ARCH.pooled_hw(), (3, 3));
        assert_eq!(ARCH.features_per_group(), 36);
        assert_eq!(ARCH.features_per_group() * ARCH.groups, ARCH.fc_in_features);
        assert_eq!(ARCH.group_boundaries(), vec![0, 4, 8, 12, 16]);
    }

    #[test]
    fn group_ranges() {
        assert_eq!(Group::G3.channels(), 8..12);
        assert_eq!(Group::G4.features(), 108..144);
        assert_eq!(channel_span(&[Group::G3, Group::G4]), 8..16);
        assert_eq!(Group::G2.to_string(), "G2");
    }
}
