//! Distributional kinematic features: per channel (mean, std, min, max).

use crate::error::{Error, Result};
use crate::telemetry::CHANNELS;

pub const FEATURES: usize = 4 * CHANNELS;

/// Blocks ordered `(r, x, y, z)`, each `(mean, std, min, max)`. This order is
/// part of the uncertainty model's file contract.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FeatureVector16(pub [f64; FEATURES]);

impl FeatureVector16 {
    pub fn block(&self, channel: usize) -> [f64; 4] {
        let b = &self.0[channel * 4..channel * 4 + 4];
        [b[0], b[1], b[2], b[3]]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

pub fn extract_features(values: &[[f64; CHANNELS]]) -> Result<FeatureVector16> {
    if values.is_empty() {
        return Err(Error::Domain("cannot summarize an empty window".into()));
    }
    if !values.iter().flatten().all(|v| v.is_finite()) {
        return Err(Error::Domain("window contains non-finite values".into()));
    }
    let n = values.len() as f64;
    let mut out = [0.0; FEATURES];
    for c in 0..CHANNELS {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        let mut sum = 0.0;
        for row in values {
            let v = row[c];
            lo = lo.min(v);
            hi = hi.max(v);
            sum += v;
        }
        // Rounding can push the mean one ulp outside [min, max].
        let mean = (sum / n).clamp(lo, hi);
        let var = values
            .iter()
            .map(|row| {
                let d = row[c] - mean;
                d * d
            })
            .sum::<f64>()
            / n;
        out[c * 4] = mean;
        out[c * 4 + 1] = var.sqrt();
        out[c * 4 + 2] = lo;
        out[c * 4 + 3] = hi;
    }
    Ok(FeatureVector16(out))
}
