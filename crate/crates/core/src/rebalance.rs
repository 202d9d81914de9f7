//! Training-set rebalancing strategies compared against relabelling.

use std::fmt;
use std::str::FromStr;

use rand::seq::index::sample;

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::telemetry::Window;

/// Default majority:minority ratio for random undersampling.
pub const DEFAULT_RUS_RATIO: f64 = 1.0;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum RebalanceStrategy {
    /// Train on the data as labelled.
    None,
    /// Uncertainty-guided relabelling with flip threshold τ.
    Ulnr { tau: f64 },
    /// Minority loss weight = majority / minority count.
    ClassWeight,
    /// Subsample the majority class down to `ratio : 1`.
    RandomUndersample { ratio: f64 },
}

impl RebalanceStrategy {
    /// The short name used on the command line and in result tables.
    pub fn name(&self) -> &'static str {
        match self {
            RebalanceStrategy::None => "none",
            RebalanceStrategy::Ulnr { .. } => "ulnr",
            RebalanceStrategy::ClassWeight => "cw",
            RebalanceStrategy::RandomUndersample { .. } => "rus",
        }
    }

    /// Parses a strategy name; `tau` and `ratio` fill in the parameters.
    pub fn parse(name: &str, tau: f64, ratio: f64) -> Result<Self> {
        match name {
            "none" | "plain" => Ok(RebalanceStrategy::None),
            "ulnr" => Ok(RebalanceStrategy::Ulnr { tau }),
            "cw" => Ok(RebalanceStrategy::ClassWeight),
            "rus" => {
                if !(ratio >= 1.0 && ratio.is_finite()) {
                    return Err(Error::Config(format!("undersampling ratio must be >= 1, got {ratio}")));
                }
                Ok(RebalanceStrategy::RandomUndersample { ratio })
            }
            other => Err(Error::Config(format!(
                "unknown strategy {other:?} (expected none, ulnr, cw or rus)"
            ))),
        }
    }
}

impl fmt::Display for RebalanceStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for RebalanceStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::parse(s, crate::ulnr::DEFAULT_TAU, DEFAULT_RUS_RATIO)
    }
}

/// `(w_safe, w_unsafe)` with `w_unsafe = n_safe / n_unsafe`.
pub fn class_weights(is_unsafe: &[bool]) -> Result<(f64, f64)> {
    let n_unsafe = is_unsafe.iter().filter(|&&u| u).count();
    let n_safe = is_unsafe.len() - n_unsafe;
    if n_unsafe == 0 || n_safe == 0 {
        return Err(Error::Config(
            "class weighting needs both classes in the training set".into(),
        ));
    }
    Ok((1.0, n_safe as f64 / n_unsafe as f64))
}

/// Keeps every unsafe window and a uniform sample of at most
/// `floor(ratio · n_unsafe)` safe windows, preserving dataset order.
pub fn random_undersample(windows: &[Window], ratio: f64, rng: &mut Rng) -> Result<Vec<Window>> {
    if !(ratio >= 1.0 && ratio.is_finite()) {
        return Err(Error::Config(format!("undersampling ratio must be >= 1, got {ratio}")));
    }
    let safe: Vec<usize> = (0..windows.len()).filter(|&i| !windows[i].is_unsafe).collect();
    let n_unsafe = windows.len() - safe.len();
    let target = ((ratio * n_unsafe as f64).floor() as usize).min(safe.len());
    let mut keep = vec![true; windows.len()];
    if target < safe.len() {
        for &i in &safe {
            keep[i] = false;
        }
        for k in sample(rng, safe.len(), target) {
            keep[safe[k]] = true;
        }
    }
    Ok(windows
        .iter()
        .zip(keep)
        .filter(|(_, k)| *k)
        .map(|(w, _)| w.clone())
        .collect())
}
