//! `.fldn` checkpoint files.
//!
//! Layout (header integers big-endian, floats little-endian binary32):
//!
//! | offset | size | field |
//! |-------:|-----:|-------|
//! | 0  | 4 | magic `FLDN` |
//! | 4  | 2 | format version (1) |
//! | 6  | 2 | conv channels (16) |
//! | 8  | 2 | channel group size (4) |
//! | 10 | 2 | group count (4) |
//! | 12 | 2 | conv layers (3) |
//! | 14 | 2 | fc input features (144) |
//! | 16 | 2 | classes (10) |
//! | 18 | 2 | input channels (1) |
//! | 20 | 2 | input height (28) |
//! | 22 | 2 | input width (28) |
//! | 24 | 2 | fc bias slots (6) |
//! | 26 | 1 | float format, 1 = binary32 little-endian |
//! | 27 | 1 | reserved, 0 |
//! | 28 | 4 | payload float count |
//! | 32 | 4·n | payload in canonical unit order |
//! | 32+4·n | 8 | FNV-1a 64 digest of the payload bytes |
//!
//! Canonical unit order is conv1 rows G1..G4, conv2 blocks (1,1)..(4,4)
//! row-major, conv3 blocks, conv biases (conv1, conv2, conv3; G1..G4 each),
//! fc column groups G1..G4, fc bias slots in `SubnetId` order. Elements
//! inside a unit follow their tensor's row-major order. Optimizer
//! velocities are not stored.

use std::hash::Hasher;
use std::path::Path;

use fnv::FnvHasher;

use crate::error::{Error, Result};
use crate::model::arch::ARCH;
use crate::model::params::{FluidParams, ParamSet, ParamUnit};

pub const MAGIC: [u8; 4] = *b"FLDN";
pub const VERSION: u16 = 1;
pub const HEADER_LEN: usize = 32;
const FLOAT_FORMAT_F32_LE: u8 = 1;
const BIAS_SLOTS: u16 = 6;

fn arch_fields() -> [u16; 10] {
    [
        ARCH.conv_channels_full as u16,
        ARCH.channel_group_size as u16,
        ARCH.groups as u16,
        ARCH.conv_layers as u16,
        ARCH.fc_in_features as u16,
        ARCH.classes as u16,
        ARCH.input_channels as u16,
        ARCH.input_height as u16,
        ARCH.input_width as u16,
        BIAS_SLOTS,
    ]
}

const ARCH_FIELD_NAMES: [&str; 10] = [
    "conv channels",
    "group size",
    "groups",
    "conv layers",
    "fc features",
    "classes",
    "input channels",
    "input height",
    "input width",
    "bias slots",
];

/// Canonical little-endian payload of the weights.
pub fn canonical_payload(weights: &ParamSet) -> Vec<u8> {
    let mut out = Vec::with_capacity(weights.scalar_count() * 4);
    for unit in ParamUnit::all() {
        for v in weights.unit_values(unit) {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn payload_digest(payload: &[u8]) -> u64 {
    let mut h = FnvHasher::default();
    h.write(payload);
    h.finish()
}

/// 8-byte model identity used in the HELLO handshake; equals the digest
/// stored in the checkpoint.
pub fn model_hash(params: &FluidParams) -> [u8; 8] {
    payload_digest(&canonical_payload(&params.weights)).to_be_bytes()
}

pub fn encode_checkpoint(params: &FluidParams) -> Vec<u8> {
    let payload = canonical_payload(&params.weights);
    let mut out = Vec::with_capacity(HEADER_LEN + payload.len() + 8);
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_be_bytes());
    for f in arch_fields() {
        out.extend_from_slice(&f.to_be_bytes());
    }
    out.push(FLOAT_FORMAT_F32_LE);
    out.push(0);
    out.extend_from_slice(&((payload.len() / 4) as u32).to_be_bytes());
    out.extend_from_slice(&payload);
    out.extend_from_slice(&payload_digest(&payload).to_be_bytes());
    out
}

fn be16(b: &[u8], at: usize) -> u16 {
    u16::from_be_bytes([b[at], b[at + 1]])
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<FluidParams> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::Length(format!(
            "checkpoint header needs {HEADER_LEN} bytes, got {}",
            bytes.len()
        )));
    }
    let magic: [u8; 4] = bytes[0..4].try_into().expect("4 bytes");
    if magic != MAGIC {
        return Err(Error::BadMagic(magic));
    }
    let version = be16(bytes, 4);
    if version != VERSION {
        return Err(Error::BadVersion(version));
    }
    for (k, (expected, name)) in arch_fields().into_iter().zip(ARCH_FIELD_NAMES).enumerate() {
        let got = be16(bytes, 6 + 2 * k);
        if got != expected {
            return Err(Error::ArchMismatch(format!("{name} is {got}, expected {expected}")));
        }
    }
    if bytes[26] != FLOAT_FORMAT_F32_LE {
        return Err(Error::ArchMismatch(format!("float format {}", bytes[26])));
    }
    if bytes[27] != 0 {
        return Err(Error::Format(format!("reserved header byte is {}", bytes[27])));
    }
    let count = u32::from_be_bytes(bytes[28..32].try_into().expect("4 bytes")) as usize;
    let mut weights = ParamSet::zeros();
    if count != weights.scalar_count() {
        return Err(Error::ArchMismatch(format!(
            "payload holds {count} floats, expected {}",
            weights.scalar_count()
        )));
    }
    let end = HEADER_LEN + count * 4;
    if bytes.len() != end + 8 {
        return Err(Error::Length(format!(
            "checkpoint should be {} bytes, got {}",
            end + 8,
            bytes.len()
        )));
    }
    let payload = &bytes[HEADER_LEN..end];
    let stored = u64::from_be_bytes(bytes[end..end + 8].try_into().expect("8 bytes"));
    let computed = payload_digest(payload);
    if stored != computed {
        return Err(Error::DigestMismatch { stored, computed });
    }
    let mut floats = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")));
    for unit in ParamUnit::all() {
        let n = unit.element_indices().len();
        let values: Vec<f32> = floats.by_ref().take(n).collect();
        weights.set_unit_values(unit, &values)?;
    }
    weights.check_finite()?;
    Ok(FluidParams::from_weights(weights))
}

pub fn save_checkpoint(params: &FluidParams, path: &Path) -> Result<()> {
    std::fs::write(path, encode_checkpoint(params))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<FluidParams> {
    decode_checkpoint(&std::fs::read(path)?)
}
