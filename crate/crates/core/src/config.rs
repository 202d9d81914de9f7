//! Run configuration: one TOML file with sections, every field defaulted.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::rebalance::{RebalanceStrategy, DEFAULT_RUS_RATIO};
use crate::safety::{Fusion, SafetyConfig};
use crate::synthgen::GenConfig;
use crate::ulnr::{DEFAULT_TAU, SWEEP_TAUS};
use crate::uncertainty::UncertaintyConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StrategyName {
    #[serde(alias = "plain")]
    None,
    Ulnr,
    Cw,
    Rus,
}

impl StrategyName {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "none" | "plain" => Ok(StrategyName::None),
            "ulnr" => Ok(StrategyName::Ulnr),
            "cw" => Ok(StrategyName::Cw),
            "rus" => Ok(StrategyName::Rus),
            other => Err(Error::Config(format!(
                "unknown strategy {other:?} (expected none, ulnr, cw or rus)"
            ))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            StrategyName::None => "none",
            StrategyName::Ulnr => "ulnr",
            StrategyName::Cw => "cw",
            StrategyName::Rus => "rus",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Benchmark directory written by `gen`.
    pub dir: PathBuf,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig { dir: PathBuf::from("data") }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    /// Number of seeds for multi-seed evaluation.
    pub seeds: usize,
    pub strategy: StrategyName,
    pub fusion: Fusion,
    pub tau: f64,
    /// When non-empty, relabelling picks τ from this list by validation F1
    /// instead of using `tau`.
    pub tau_grid: Vec<f64>,
    pub sweep_taus: Vec<f64>,
    pub rus_ratio: f64,
    /// Methods compared by `evaluate`; the first is the reference.
    pub methods: Vec<StrategyName>,
    pub data: DataConfig,
    pub uncertainty: UncertaintyConfig,
    pub safety: SafetyConfig,
    pub generator: GenConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 7,
            seeds: 10,
            strategy: StrategyName::Ulnr,
            fusion: Fusion::Plain,
            tau: DEFAULT_TAU,
            tau_grid: Vec::new(),
            sweep_taus: SWEEP_TAUS.to_vec(),
            rus_ratio: DEFAULT_RUS_RATIO,
            methods: vec![StrategyName::Ulnr, StrategyName::None, StrategyName::Cw, StrategyName::Rus],
            data: DataConfig::default(),
            uncertainty: UncertaintyConfig::default(),
            safety: SafetyConfig::default(),
            generator: GenConfig::default(),
        }
    }
}

fn check_tau(tau: f64, what: &str) -> Result<()> {
    if tau.is_finite() {
        Ok(())
    } else {
        Err(Error::Config(format!("{what}: τ must be finite, got {tau}")))
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.seed > i64::MAX as u64 || self.generator.seed > i64::MAX as u64 {
            return Err(Error::Config(format!("seeds must be <= {}", i64::MAX)));
        }
        if self.seeds == 0 {
            return Err(Error::Config("seeds must be >= 1".into()));
        }
        check_tau(self.tau, "tau")?;
        for &t in &self.tau_grid {
            check_tau(t, "tau_grid")?;
        }
        if self.sweep_taus.is_empty() {
            return Err(Error::Config("sweep_taus must not be empty".into()));
        }
        for &t in &self.sweep_taus {
            check_tau(t, "sweep_taus")?;
        }
        if !(self.rus_ratio >= 1.0 && self.rus_ratio.is_finite()) {
            return Err(Error::Config(format!("rus_ratio must be >= 1, got {}", self.rus_ratio)));
        }
        if self.methods.is_empty() {
            return Err(Error::Config("methods must name at least one strategy".into()));
        }
        for (i, m) in self.methods.iter().enumerate() {
            if self.methods[..i].contains(m) {
                return Err(Error::Config(format!("method {} listed twice", m.as_str())));
            }
        }
        self.uncertainty.validate()?;
        self.safety.validate()?;
        self.generator.validate()
    }

    pub fn strategy_for(&self, name: StrategyName) -> RebalanceStrategy {
        match name {
            StrategyName::None => RebalanceStrategy::None,
            StrategyName::Ulnr => RebalanceStrategy::Ulnr { tau: self.tau },
            StrategyName::Cw => RebalanceStrategy::ClassWeight,
            StrategyName::Rus => RebalanceStrategy::RandomUndersample { ratio: self.rus_ratio },
        }
    }

    pub fn strategy(&self) -> RebalanceStrategy {
        self.strategy_for(self.strategy)
    }

    /// Hex SHA-256 of the canonical TOML serialization.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_toml().as_bytes());
        let mut s = String::with_capacity(64);
        for b in digest {
            let _ = write!(s, "{b:02x}");
        }
        s
    }
}
