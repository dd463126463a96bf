use crate::error::{HarnessError, Result};

/// Images per second when each batch costs `comp_s + comm_s` seconds.
pub fn analytic_throughput(comp_s: f64, comm_s: f64, batch: usize) -> Result<f64> {
    if !(comp_s.is_finite() && comm_s.is_finite()) || comp_s < 0.0 || comm_s < 0.0 {
        return Err(HarnessError::Domain(format!(
            "latencies must be finite and non-negative, got comp={comp_s} comm={comm_s}"
        )));
    }
    if batch == 0 {
        return Err(HarnessError::Domain("batch must be at least 1".into()));
    }
    let total = comp_s + comm_s;
    if total == 0.0 {
        return Err(HarnessError::Domain("computation plus communication latency is zero".into()));
    }
    Ok(batch as f64 / total)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn examples() {
        assert!((analytic_throughput(0.1, 0.0, 1).unwrap() - 10.0).abs() < 1e-12);
        let r = analytic_throughput(0.05, 0.04, 1).unwrap();
        assert!((r - 11.1).abs() < 0.05, "{r}");
        let one = analytic_throughput(0.05, 0.04, 3).unwrap();
        assert!((analytic_throughput(0.05, 0.04, 6).unwrap() - 2.0 * one).abs() < 1e-9);
        assert!(matches!(analytic_throughput(0.0, 0.0, 1), Err(HarnessError::Domain(_))));
        assert!(analytic_throughput(-0.1, 0.2, 1).is_err());
        assert!(analytic_throughput(0.1, 0.0, 0).is_err());
    }
}
