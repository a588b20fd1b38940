//! JSON run configuration. Every field has a default, so `{}` is a valid
//! configuration file.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::experiment::{ExperimentSetup, GridSearchConfig, SweepConfig};
use crate::preprocess::FirSpec;
use crate::seed;
use crate::synth::SynthSpec;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FugwConfig {
    /// Balance between the feature term (alpha = 0) and the geometry term
    /// (alpha = 1).
    pub alpha: f64,
    /// Weight of the KL penalty on the plan marginals.
    pub rho: f64,
    /// Entropic regularisation.
    pub epsilon: f64,
    pub bcd_iters: usize,
    pub sinkhorn_iters: usize,
    /// Divide the feature and geometry costs by their maximum at
    /// initialisation before weighting them.
    pub normalize_costs: bool,
}

impl Default for FugwConfig {
    fn default() -> Self {
        Self {
            alpha: 0.5,
            rho: 1.0,
            epsilon: 1e-4,
            bcd_iters: 10,
            sinkhorn_iters: 1000,
            normalize_costs: true,
        }
    }
}

impl FugwConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Validation(format!("fugw.alpha = {} outside [0, 1]", self.alpha)));
        }
        if !(self.rho > 0.0) {
            return Err(Error::Validation(format!("fugw.rho = {} must be > 0", self.rho)));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::Validation(format!("fugw.epsilon = {} must be > 0", self.epsilon)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RidgeConfig {
    pub alpha_ridge: f64,
}

impl Default for RidgeConfig {
    fn default() -> Self {
        Self { alpha_ridge: 50_000.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RetrievalConfig {
    /// Negatives per retrieval set.
    pub set_size: usize,
    pub num_sets: usize,
    pub top_k: usize,
    pub seed: u64,
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        Self {
            set_size: 499,
            num_sets: 50,
            top_k: 5,
            seed: 0,
        }
    }
}

impl RetrievalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.set_size == 0 || self.num_sets == 0 || self.top_k == 0 {
            return Err(Error::Validation(
                "retrieval.set_size, num_sets and top_k must be >= 1".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PreprocessConfig {
    /// Repetition time in seconds; converts minutes to frames and sets the
    /// drift basis order.
    pub tr: f64,
    /// Cutoff period of the cosine drift basis, in seconds.
    pub high_pass_period: f64,
    /// Explicit drift basis order, overriding the period-based default.
    pub drift_order: Option<usize>,
    pub detrend: bool,
    pub standardize: bool,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            tr: 2.0,
            high_pass_period: 128.0,
            drift_order: None,
            detrend: true,
            standardize: true,
        }
    }
}

impl PreprocessConfig {
    /// Drift order for a run of `n` frames: `ceil(2 n TR / period)`, capped
    /// at `n - 1`.
    pub fn drift_order_for(&self, n: usize) -> usize {
        let order = self
            .drift_order
            .unwrap_or_else(|| (2.0 * n as f64 * self.tr / self.high_pass_period).ceil() as usize);
        order.min(n.saturating_sub(1))
    }

    pub fn frames_for_minutes(&self, minutes: f64) -> usize {
        (minutes * 60.0 / self.tr).round() as usize
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Root seed. Component seeds derive from it when `derive_seeds` is set.
    pub seed: u64,
    pub derive_seeds: bool,
    pub fugw: FugwConfig,
    pub ridge: RidgeConfig,
    pub fir: FirSpec,
    pub retrieval: RetrievalConfig,
    pub preprocess: PreprocessConfig,
    pub synth: Option<SynthSpec>,
    pub setup: Option<ExperimentSetup>,
    pub sweep: Option<SweepConfig>,
    pub gridsearch: Option<GridSearchConfig>,
}

impl RunConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let cfg: RunConfig = super::read_json(path)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.fugw.validate()?;
        self.fir.validate()?;
        self.retrieval.validate()?;
        if !(self.ridge.alpha_ridge >= 0.0) {
            return Err(Error::Validation("ridge.alpha_ridge must be >= 0".into()));
        }
        if !(self.preprocess.tr > 0.0) || !(self.preprocess.high_pass_period > 0.0) {
            return Err(Error::Validation("preprocess.tr and high_pass_period must be > 0".into()));
        }
        if let Some(s) = &self.synth {
            s.validate()?;
        }
        Ok(())
    }

    /// Replaces the root seed and re-derives the component seeds from it.
    pub fn with_root_seed(mut self, root: u64) -> Self {
        self.seed = root;
        self.derive_seeds = true;
        self.resolve_seeds();
        self
    }

    /// Applies labeled seed derivation when enabled.
    pub fn resolve_seeds(&mut self) {
        if !self.derive_seeds {
            return;
        }
        self.retrieval.seed = seed::derive(self.seed, "retrieval");
        if let Some(s) = self.synth.as_mut() {
            s.seed = seed::derive(self.seed, "synth");
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_json_gives_defaults() {
        let cfg: RunConfig = serde_json::from_str("{}").unwrap();
        assert_eq!(cfg, RunConfig::default());
        assert_eq!(cfg.fugw.alpha, 0.5);
        assert_eq!(cfg.fugw.rho, 1.0);
        assert_eq!(cfg.fugw.epsilon, 1e-4);
        assert_eq!(cfg.fugw.bcd_iters, 10);
        assert_eq!(cfg.fugw.sinkhorn_iters, 1000);
        assert_eq!(cfg.ridge.alpha_ridge, 50_000.0);
        assert_eq!(cfg.retrieval.set_size, 499);
        assert_eq!(cfg.retrieval.num_sets, 50);
        assert_eq!(cfg.retrieval.top_k, 5);
    }

    #[test]
    fn rejects_out_of_range() {
        let mut cfg = RunConfig::default();
        cfg.fugw.alpha = 1.5;
        assert!(cfg.validate().is_err());
        let mut cfg = RunConfig::default();
        cfg.fugw.rho = 0.0;
        assert!(cfg.validate().is_err());
        let mut cfg = RunConfig::default();
        cfg.fugw.epsilon = -1.0;
        assert!(cfg.validate().is_err());
        let mut cfg = RunConfig::default();
        cfg.fir.window = 0;
        assert!(cfg.validate().is_err());
        assert!(serde_json::from_str::<RunConfig>(r#"{"bogus": 1}"#).is_err());
    }

    #[test]
    fn drift_order_default() {
        let p = PreprocessConfig::default();
        // 2 * 200 * 2 / 128 = 6.25
        assert_eq!(p.drift_order_for(200), 7);
        assert_eq!(p.drift_order_for(3), 1);
        assert_eq!(p.frames_for_minutes(1.0), 30);
    }
}
