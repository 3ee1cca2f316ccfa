//! Experiment configuration: flat key-value TOML with section headers.
//!
//! Every field has a default, so a config file only states what it changes
//! and `--print-config` shows the full effective document.

use serde::{Deserialize, Serialize};
use std::path::Path;

use streamqoe::analytic::BoundaryMode;
use streamqoe::flowsim::{RebufferPolicy, SimMode};
use streamqoe::markov::FlowClass;
use streamqoe::{Error, Result, SystemConfig};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Root seed; all component randomness derives from it by name.
    pub seed: u64,
    pub system: SystemSection,
    pub solve: SolveSection,
    pub simulate: SimulateSection,
    pub compare: CompareSection,
    pub fit: FitSection,
    pub infer: InferSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 42,
            system: SystemSection::default(),
            solve: SolveSection::default(),
            simulate: SimulateSection::default(),
            compare: CompareSection::default(),
            fit: FitSection::default(),
            infer: InferSection::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SystemSection {
    pub capacity_bps: f64,
    pub bitrate_bps: f64,
    pub admission_cap: usize,
    pub weight_short: f64,
    pub weight_long: f64,
    /// Fraction of arrivals that are short views.
    pub p_short: f64,
    pub mean_view_short_s: f64,
    pub mean_view_long_s: f64,
    /// Offered load used to calibrate the arrival intensity; ignored when
    /// `arrival_rate_per_s` is set explicitly.
    pub offered_load: f64,
    pub arrival_rate_per_s: Option<f64>,
    pub startup_threshold_s: f64,
    pub progressive: bool,
}

impl Default for SystemSection {
    fn default() -> Self {
        SystemSection {
            capacity_bps: 5.0e6,
            bitrate_bps: 980.0e3,
            admission_cap: 10,
            weight_short: 1.0,
            weight_long: 1.0,
            p_short: 0.6,
            mean_view_short_s: 94.0,
            mean_view_long_s: 1143.0,
            offered_load: 0.96,
            arrival_rate_per_s: None,
            startup_threshold_s: 0.0,
            progressive: false,
        }
    }
}

impl SystemSection {
    pub fn to_system_config(&self) -> Result<SystemConfig> {
        if !(self.p_short > 0.0 && self.p_short < 1.0) {
            return Err(Error::invalid(format!(
                "system.p_short must be in (0,1), got {}",
                self.p_short
            )));
        }
        let mut cfg = SystemConfig {
            capacity_bps: self.capacity_bps,
            bitrate_bps: self.bitrate_bps,
            admission_cap: self.admission_cap,
            weight_short: self.weight_short,
            weight_long: self.weight_long,
            arrival_rate_short: 0.0,
            arrival_rate_long: 0.0,
            view_rate_short: 1.0 / self.mean_view_short_s,
            view_rate_long: 1.0 / self.mean_view_long_s,
            startup_threshold_s: self.startup_threshold_s,
            progressive: self.progressive,
            tagged: FlowClass::Short,
        };
        match self.arrival_rate_per_s {
            Some(lambda) => {
                cfg.arrival_rate_short = self.p_short * lambda;
                cfg.arrival_rate_long = (1.0 - self.p_short) * lambda;
            }
            None => {
                cfg = cfg.with_offered_load(self.offered_load, self.p_short);
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolveSection {
    /// Startup-threshold sweep in content-seconds.
    pub startup_thresholds_s: Vec<f64>,
    /// Admission-cap sweep; empty means the single [system] value.
    pub admission_caps: Vec<usize>,
    /// Sweep of weight ratios phi_short/phi_long; empty means [system].
    pub weight_ratios: Vec<f64>,
    pub boundary_mode: BoundaryModeKey,
}

impl Default for SolveSection {
    fn default() -> Self {
        SolveSection {
            startup_thresholds_s: vec![0.0, 10.0, 20.0, 30.0],
            admission_caps: Vec::new(),
            weight_ratios: Vec::new(),
            boundary_mode: BoundaryModeKey::BoundedModes,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoundaryModeKey {
    BoundedModes,
    StateIndexed,
}

impl From<BoundaryModeKey> for BoundaryMode {
    fn from(key: BoundaryModeKey) -> BoundaryMode {
        match key {
            BoundaryModeKey::BoundedModes => BoundaryMode::BoundedModes,
            BoundaryModeKey::StateIndexed => BoundaryMode::StateIndexed,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulateSection {
    pub mode: SimModeKey,
    pub accepted_flows: usize,
    pub replicas: usize,
    pub warmup_flows: usize,
    pub rebuffer_policy: RebufferPolicyKey,
    /// Trace CSV path; empty means synthetic arrivals.
    pub trace: String,
}

impl Default for SimulateSection {
    fn default() -> Self {
        SimulateSection {
            mode: SimModeKey::Basic,
            accepted_flows: 100_000,
            replicas: 4,
            warmup_flows: 2_000,
            rebuffer_policy: RebufferPolicyKey::RebufferToThreshold,
            trace: String::new(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SimModeKey {
    Basic,
    Progressive,
    ProgressiveFinite,
}

impl From<SimModeKey> for SimMode {
    fn from(key: SimModeKey) -> SimMode {
        match key {
            SimModeKey::Basic => SimMode::Basic,
            SimModeKey::Progressive => SimMode::Progressive,
            SimModeKey::ProgressiveFinite => SimMode::ProgressiveFinite,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RebufferPolicyKey {
    RebufferToThreshold,
    StopAtFirst,
}

impl From<RebufferPolicyKey> for RebufferPolicy {
    fn from(key: RebufferPolicyKey) -> RebufferPolicy {
        match key {
            RebufferPolicyKey::RebufferToThreshold => RebufferPolicy::RebufferToThreshold,
            RebufferPolicyKey::StopAtFirst => RebufferPolicy::StopAtFirst,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CompareSection {
    /// Absolute gap allowed between analytic and simulated starvation
    /// probability before a row is flagged.
    pub tolerance: f64,
}

impl Default for CompareSection {
    fn default() -> Self {
        CompareSection { tolerance: 0.03 }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitSection {
    /// View-record CSV to fit.
    pub input: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InferSection {
    /// Bucket table file (one line per bucket: lo,hi,epsilon,c,a,b).
    pub table: String,
    pub duration_s: f64,
}

impl Default for InferSection {
    fn default() -> Self {
        InferSection {
            table: String::new(),
            duration_s: 0.0,
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let cfg = match path {
            None => ExperimentConfig::default(),
            Some(p) => {
                let text = std::fs::read_to_string(p)?;
                toml::from_str(&text)
                    .map_err(|e| Error::invalid(format!("config {}: {e}", p.display())))?
            }
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.system.to_system_config()?;
        if self.solve.startup_thresholds_s.is_empty() {
            return Err(Error::invalid(
                "solve.startup_thresholds_s sweep must not be empty",
            ));
        }
        if self.solve.startup_thresholds_s.iter().any(|q| *q < 0.0) {
            return Err(Error::invalid("startup thresholds must be nonnegative"));
        }
        if self.solve.weight_ratios.iter().any(|r| *r <= 0.0) {
            return Err(Error::invalid("weight ratios must be positive"));
        }
        if self.solve.admission_caps.iter().any(|k| *k == 0) {
            return Err(Error::invalid("admission caps must be at least 1"));
        }
        if self.simulate.replicas == 0 {
            return Err(Error::invalid("simulate.replicas must be at least 1"));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Sweep points in deterministic order: caps, then weight ratios, then
    /// startup thresholds. Empty cap/ratio axes fall back to [system].
    pub fn sweep_points(&self) -> Vec<SweepPoint> {
        let caps: Vec<usize> = if self.solve.admission_caps.is_empty() {
            vec![self.system.admission_cap]
        } else {
            self.solve.admission_caps.clone()
        };
        let ratios: Vec<f64> = if self.solve.weight_ratios.is_empty() {
            vec![self.system.weight_short / self.system.weight_long]
        } else {
            self.solve.weight_ratios.clone()
        };
        let mut points = Vec::new();
        for &cap in &caps {
            for &ratio in &ratios {
                for &qa in &self.solve.startup_thresholds_s {
                    points.push(SweepPoint {
                        admission_cap: cap,
                        weight_ratio: ratio,
                        startup_threshold_s: qa,
                    });
                }
            }
        }
        points
    }

    /// System config at one sweep point.
    pub fn system_at(&self, point: &SweepPoint) -> Result<SystemConfig> {
        let mut section = self.system.clone();
        section.admission_cap = point.admission_cap;
        section.weight_short = point.weight_ratio;
        section.weight_long = 1.0;
        section.startup_threshold_s = point.startup_threshold_s;
        section.to_system_config()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepPoint {
    pub admission_cap: usize,
    pub weight_ratio: f64,
    pub startup_threshold_s: f64,
}
