//! JSON experiment configuration shared by every subcommand.
//!
//! Sections `solver`, `features`, `reduction`, `opinf` and `bench`; missing
//! keys take their defaults, unknown keys are rejected. Dotted-key overrides
//! are applied to the parsed JSON before deserialisation and validation.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{Error, Result};
use crate::field_data::{speed_for_reynolds, FluidProperties, PipeGeometry, SplitRatios};
use crate::opinf::{OperatorTerms, RegularizationConfig, DEFAULT_BLOCK};
use crate::pod::{RankPolicy, DEFAULT_ENERGY_THRESHOLD, DEFAULT_MAX_RANK};
use crate::solver::{
    Boundaries, FrictionModel, InletProfile, InletShape, SolverConfig, REFERENCE_REYNOLDS, SOLVER_FIELDS,
};

/// Forecasting methods the harness knows by name.
pub const METHODS: [&str; 5] = ["opinf", "linear_ar", "persistence", "persistence_full", "mean"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InletSection {
    /// Reynolds number the base velocity is derived from when `base` is unset.
    pub reynolds: f64,
    /// Mean inlet velocity, m/s.
    pub base: Option<f64>,
    /// Amplitude as a fraction of the base velocity.
    pub amplitude_ratio: f64,
    /// s
    pub period: f64,
    pub shape: InletShape,
}

impl Default for InletSection {
    fn default() -> Self {
        Self {
            reynolds: REFERENCE_REYNOLDS,
            base: None,
            amplitude_ratio: 0.3,
            period: 0.5,
            shape: InletShape::Sinusoid,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverSection {
    pub length: f64,
    pub diameter: f64,
    pub density: f64,
    pub dynamic_viscosity: f64,
    pub sound_speed: f64,
    pub n_cells: usize,
    pub friction: FrictionModel,
    /// Absolute outlet pressure, Pa; defaults to a²ρ.
    pub outlet_pressure: Option<f64>,
    pub dt_snap: f64,
    pub n_snapshots: usize,
    pub cfl: f64,
    pub seed: u64,
    pub initial_noise: f64,
    pub spinup: f64,
    pub boundaries: Boundaries,
    pub inlet: InletSection,
}

impl Default for SolverSection {
    fn default() -> Self {
        let d = SolverConfig::default();
        Self {
            length: d.geometry.length,
            diameter: d.geometry.diameter,
            density: d.fluid.density,
            dynamic_viscosity: d.fluid.dynamic_viscosity,
            sound_speed: d.fluid.sound_speed,
            n_cells: d.n_cells,
            friction: d.friction,
            outlet_pressure: None,
            dt_snap: d.dt_snap,
            n_snapshots: d.n_snapshots,
            cfl: d.cfl,
            seed: d.seed,
            initial_noise: d.initial_noise,
            spinup: d.spinup,
            boundaries: d.boundaries,
            inlet: InletSection::default(),
        }
    }
}

impl SolverSection {
    pub fn to_solver(&self) -> Result<(SolverConfig, InletProfile)> {
        let fluid = FluidProperties {
            density: self.density,
            dynamic_viscosity: self.dynamic_viscosity,
            sound_speed: self.sound_speed,
        };
        let geometry = PipeGeometry { diameter: self.diameter, length: self.length };
        let config = SolverConfig {
            geometry,
            fluid,
            n_cells: self.n_cells,
            friction: self.friction,
            outlet_pressure: self
                .outlet_pressure
                .unwrap_or(self.sound_speed * self.sound_speed * self.density),
            dt_snap: self.dt_snap,
            n_snapshots: self.n_snapshots,
            cfl: self.cfl,
            seed: self.seed,
            initial_noise: self.initial_noise,
            spinup: self.spinup,
            boundaries: self.boundaries,
        };
        config.validate()?;
        let inlet = &self.inlet;
        let base = match inlet.base {
            Some(b) => b,
            None => {
                if !(inlet.reynolds > 0.0 && inlet.reynolds.is_finite()) {
                    return Err(Error::Config(format!(
                        "inlet reynolds must be positive, got {}",
                        inlet.reynolds
                    )));
                }
                speed_for_reynolds(&fluid, inlet.reynolds, &geometry)
            }
        };
        let profile = InletProfile {
            base,
            amplitude: inlet.amplitude_ratio * base,
            period: inlet.period,
            shape: inlet.shape,
        };
        profile.validate()?;
        Ok((config, profile))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReductionSection {
    pub energy_threshold: f64,
    pub max_rank: usize,
    /// Overrides the energy rule when set.
    pub fixed_rank: Option<usize>,
}

impl Default for ReductionSection {
    fn default() -> Self {
        Self {
            energy_threshold: DEFAULT_ENERGY_THRESHOLD,
            max_rank: DEFAULT_MAX_RANK,
            fixed_rank: None,
        }
    }
}

impl ReductionSection {
    pub fn rank_policy(&self) -> RankPolicy {
        match self.fixed_rank {
            Some(r) => RankPolicy::Fixed(r),
            None => RankPolicy::Energy { threshold: self.energy_threshold, max_rank: self.max_rank },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OpInfSection {
    pub lambda_grid: Vec<f64>,
    /// With `terms.input` set, the inlet U^z sample is the external input u(t).
    pub terms: OperatorTerms,
    /// Period used to continue the input past the training window; defaults
    /// to the inlet period.
    pub input_period: Option<f64>,
}

impl Default for OpInfSection {
    fn default() -> Self {
        Self {
            lambda_grid: RegularizationConfig::default().grid,
            terms: OperatorTerms::default(),
            input_period: None,
        }
    }
}

impl OpInfSection {
    pub fn regularization(&self) -> RegularizationConfig {
        RegularizationConfig { grid: self.lambda_grid.clone() }
    }
}

/// Forecast computed elsewhere, scored alongside the built-in methods.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExternalPrediction {
    pub name: String,
    pub path: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchSection {
    pub methods: Vec<String>,
    pub block: usize,
    pub split: SplitRatios,
    /// Snapshot file (SNP1 or CSV) used instead of running the solver.
    pub data: Option<String>,
    pub external: Vec<ExternalPrediction>,
    pub out_dir: String,
}

impl Default for BenchSection {
    fn default() -> Self {
        Self {
            methods: ["opinf", "linear_ar", "persistence", "mean"].map(String::from).to_vec(),
            block: DEFAULT_BLOCK,
            split: SplitRatios::default(),
            data: None,
            external: Vec::new(),
            out_dir: "bench_out".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub solver: SolverSection,
    pub features: Vec<String>,
    pub reduction: ReductionSection,
    pub opinf: OpInfSection,
    pub bench: BenchSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            solver: SolverSection::default(),
            features: vec!["p".into(), "Uz".into()],
            reduction: ReductionSection::default(),
            opinf: OpInfSection::default(),
            bench: BenchSection::default(),
        }
    }
}

impl ExperimentConfig {
    /// Parses `text` (an empty string means all defaults), applies the
    /// `key=value` overrides and validates.
    pub fn from_json(text: &str, overrides: &[String]) -> Result<Self> {
        let mut value: Value = if text.trim().is_empty() {
            Value::Object(Map::new())
        } else {
            serde_json::from_str(text).map_err(|e| Error::Config(format!("invalid JSON: {e}")))?
        };
        for o in overrides {
            apply_override(&mut value, o)?;
        }
        let config: Self = serde_json::from_value(value).map_err(|e| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p)
                .map_err(|e| Error::Config(format!("cannot read config {}: {e}", p.display())))?,
            None => String::new(),
        };
        Self::from_json(&text, overrides)
    }

    pub fn validate(&self) -> Result<()> {
        self.solver.to_solver()?;
        if self.features.is_empty() {
            return Err(Error::Config("feature selection is empty".into()));
        }
        for (i, f) in self.features.iter().enumerate() {
            if !SOLVER_FIELDS.contains(&f.as_str()) {
                return Err(Error::Config(format!(
                    "unknown feature '{f}', expected one of {SOLVER_FIELDS:?}"
                )));
            }
            if self.features[..i].contains(f) {
                return Err(Error::Config(format!("feature '{f}' selected twice")));
            }
        }
        if !self.features.iter().any(|f| f == "p") {
            return Err(Error::Config("features must include the pressure field 'p'".into()));
        }
        if self.opinf.terms.input && !self.features.iter().any(|f| f == "Uz") {
            return Err(Error::Config("the input term reads the inlet U^z and needs feature 'Uz'".into()));
        }
        let r = &self.reduction;
        if !(r.energy_threshold > 0.0 && r.energy_threshold < 1.0) {
            return Err(Error::Config(format!(
                "energy_threshold must lie in (0, 1), got {}",
                r.energy_threshold
            )));
        }
        if r.max_rank == 0 || r.fixed_rank == Some(0) {
            return Err(Error::Config("rank must be at least 1".into()));
        }
        self.opinf.regularization().validate()?;
        if let Some(p) = self.opinf.input_period {
            if !(p > 0.0 && p.is_finite()) {
                return Err(Error::Config(format!("input_period must be positive, got {p}")));
            }
        }
        let b = &self.bench;
        if b.methods.is_empty() && b.external.is_empty() {
            return Err(Error::Config("method list is empty".into()));
        }
        for (i, m) in b.methods.iter().enumerate() {
            if !METHODS.contains(&m.as_str()) {
                return Err(Error::Config(format!("unknown method '{m}', expected one of {METHODS:?}")));
            }
            if b.methods[..i].contains(m) {
                return Err(Error::Config(format!("method '{m}' listed twice")));
            }
        }
        for e in &b.external {
            if e.name.is_empty() || METHODS.contains(&e.name.as_str()) || b.external.iter().filter(|x| x.name == e.name).count() > 1 {
                return Err(Error::Config(format!(
                    "external prediction name '{}' is empty, reserved or duplicated",
                    e.name
                )));
            }
        }
        if b.block == 0 {
            return Err(Error::Config("block size must be at least 1".into()));
        }
        b.split.counts(10).map(|_| ())
    }
}

/// Applies `a.b.c=value`. The value is parsed as JSON and falls back to a
/// plain string.
pub fn apply_override(root: &mut Value, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override '{assignment}' is not of the form key=value")))?;
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("override key '{key}' has an empty segment")));
    }
    let value = serde_json::from_str(raw.trim()).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut node = root;
    for (i, part) in parts.iter().enumerate() {
        let obj = match node {
            Value::Object(m) => m,
            Value::Null => {
                *node = Value::Object(Map::new());
                node.as_object_mut().expect("just set")
            }
            _ => {
                return Err(Error::Config(format!(
                    "override '{key}': '{}' is not an object",
                    parts[..i].join(".")
                )))
            }
        };
        if i + 1 == parts.len() {
            obj.insert(part.to_string(), value);
            return Ok(());
        }
        node = obj.entry(part.to_string()).or_insert_with(|| Value::Object(Map::new()));
    }
    Ok(())
}
