use crate::error::{Result, RuntimeError};

/// Fixed per-message plus per-byte link delay for the emulated transport.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LatencyModel {
    pub per_message_us: f64,
    pub per_byte_us: f64,
}

impl Default for LatencyModel {
    fn default() -> Self {
        Self {
            per_message_us: 1000.0,
            per_byte_us: 0.01,
        }
    }
}

impl LatencyModel {
    pub fn zero() -> Self {
        Self {
            per_message_us: 0.0,
            per_byte_us: 0.0,
        }
    }

    pub fn new(per_message_us: f64, per_byte_us: f64) -> Result<Self> {
        let m = Self {
            per_message_us,
            per_byte_us,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("per-message", self.per_message_us), ("per-byte", self.per_byte_us)] {
            if !v.is_finite() || v < 0.0 {
                return Err(RuntimeError::Invalid(format!("{name} latency must be >= 0, got {v}")));
            }
        }
        Ok(())
    }

    /// Transfer time of a frame of `bytes` bytes, in microseconds.
    pub fn transfer_us(&self, bytes: usize) -> f64 {
        self.per_message_us + self.per_byte_us * bytes as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_model() {
        let m = LatencyModel::default();
        assert_eq!(m.transfer_us(0), 1000.0);
        assert!((m.transfer_us(100_000) - 2000.0).abs() < 1e-9);
        assert!(LatencyModel::new(-1.0, 0.0).is_err());
        assert!(LatencyModel::new(0.0, f64::NAN).is_err());
    }
}
