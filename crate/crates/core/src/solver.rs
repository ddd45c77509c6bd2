//! One-dimensional isothermal compressible pipe flow with wall friction.
//!
//! Solves
//!
//! ```text
//! ∂ρ/∂t + ∂(ρu)/∂x = 0
//! ∂(ρu)/∂t + ∂(ρu² + p)/∂x = −(f / 2D) ρ u |u|,     p = a²ρ
//! ```
//!
//! with first-order Rusanov fluxes and explicit Euler steps. The inlet
//! prescribes the velocity (density extrapolated), the outlet the reference
//! pressure (velocity extrapolated). Turbulence quantities k, ω and ν_t are
//! emitted from inlet-estimate correlations, not transported.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field_data::{
    assemble_snapshots, reynolds, speed_for_reynolds, FluidProperties, PipeGeometry, RawField,
    ScalingPolicy, SnapshotMatrix,
};

/// Reynolds number the default inlet base velocity is back-calculated from.
pub const REFERENCE_REYNOLDS: f64 = 15_565.58;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InletShape {
    Sinusoid,
    Trapezoid,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InletProfile {
    /// Mean velocity u₀, m/s.
    pub base: f64,
    /// m/s
    pub amplitude: f64,
    /// s
    pub period: f64,
    pub shape: InletShape,
}

impl Default for InletProfile {
    /// Sinusoid around the velocity matching Re ≈ 15 565.58 for hydrogen in
    /// the 7.62 cm pipe, 30 % amplitude, 0.5 s period.
    fn default() -> Self {
        let base = speed_for_reynolds(
            &FluidProperties::HYDROGEN,
            REFERENCE_REYNOLDS,
            &PipeGeometry::TABLE_PIPE,
        );
        Self {
            base,
            amplitude: 0.3 * base,
            period: 0.5,
            shape: InletShape::Sinusoid,
        }
    }
}

impl InletProfile {
    pub fn validate(&self) -> Result<()> {
        if !(self.period > 0.0 && self.period.is_finite()) {
            return Err(Error::Config(format!("inlet period must be positive, got {}", self.period)));
        }
        if !(self.amplitude >= 0.0) || !(self.base > self.amplitude) || !self.base.is_finite() {
            return Err(Error::Config(format!(
                "inlet needs base > amplitude >= 0, got base = {}, amplitude = {}",
                self.base, self.amplitude
            )));
        }
        Ok(())
    }

    /// Inlet velocity at time `t`; T-periodic for either shape.
    pub fn velocity(&self, t: f64) -> f64 {
        let phase = (t / self.period).rem_euclid(1.0);
        let wave = match self.shape {
            InletShape::Sinusoid => (2.0 * PI * phase).sin(),
            InletShape::Trapezoid => trapezoid(phase),
        };
        self.base + self.amplitude * wave
    }
}

/// Unit trapezoid wave: ramps over an eighth of the period, plateaus at ±1
/// for a quarter, starts and ends at 0.
fn trapezoid(phase: f64) -> f64 {
    match phase {
        p if p < 0.125 => p / 0.125,
        p if p < 0.375 => 1.0,
        p if p < 0.625 => 1.0 - (p - 0.375) / 0.125,
        p if p < 0.875 => -1.0,
        p => -1.0 + (p - 0.875) / 0.125,
    }
}

pub fn inlet_velocity(profile: &InletProfile, t: f64) -> f64 {
    profile.velocity(t)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "model", rename_all = "lowercase", deny_unknown_fields)]
pub enum FrictionModel {
    /// Constant Darcy factor.
    Constant { factor: f64 },
    /// f = 0.316 Re^(−1/4) per cell.
    Blasius,
}

impl Default for FrictionModel {
    fn default() -> Self {
        FrictionModel::Constant { factor: 0.02 }
    }
}

impl FrictionModel {
    fn factor(&self, rho: f64, speed: f64, fluid: &FluidProperties, d: f64) -> f64 {
        match *self {
            FrictionModel::Constant { factor } => factor,
            FrictionModel::Blasius => {
                let re = rho * speed * d / fluid.dynamic_viscosity;
                if re > 0.0 {
                    0.316 * re.powf(-0.25)
                } else {
                    0.0
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Boundaries {
    /// Velocity inlet, pressure outlet.
    #[default]
    InletOutlet,
    /// Reflecting walls at both ends.
    Closed,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolverConfig {
    pub geometry: PipeGeometry,
    pub fluid: FluidProperties,
    pub n_cells: usize,
    pub friction: FrictionModel,
    /// Absolute outlet pressure, Pa.
    pub outlet_pressure: f64,
    /// Snapshot sampling interval, s.
    pub dt_snap: f64,
    pub n_snapshots: usize,
    pub cfl: f64,
    pub seed: u64,
    /// Relative amplitude of uniform random density noise in the initial state.
    pub initial_noise: f64,
    /// Simulated time before the first sampling interval starts, s.
    pub spinup: f64,
    pub boundaries: Boundaries,
}

impl Default for SolverConfig {
    fn default() -> Self {
        let fluid = FluidProperties::HYDROGEN;
        Self {
            geometry: PipeGeometry::TABLE_PIPE,
            fluid,
            n_cells: 256,
            friction: FrictionModel::default(),
            outlet_pressure: fluid.sound_speed * fluid.sound_speed * fluid.density,
            dt_snap: 0.002,
            n_snapshots: 1000,
            cfl: 0.9,
            seed: 0,
            initial_noise: 0.0,
            spinup: 2.0,
            boundaries: Boundaries::InletOutlet,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        self.geometry.validate().map_err(to_config)?;
        self.fluid.validate().map_err(to_config)?;
        let bad = |msg: String| Err(Error::Config(msg));
        if self.n_cells < 8 {
            return bad(format!("n_cells must be at least 8, got {}", self.n_cells));
        }
        if let FrictionModel::Constant { factor } = self.friction {
            if !(factor >= 0.0 && factor.is_finite()) {
                return bad(format!("friction factor must be non-negative, got {factor}"));
            }
        }
        if !(self.outlet_pressure > 0.0 && self.outlet_pressure.is_finite()) {
            return bad(format!("outlet pressure must be positive, got {}", self.outlet_pressure));
        }
        if !(self.dt_snap > 0.0 && self.dt_snap.is_finite()) {
            return bad(format!("dt_snap must be positive, got {}", self.dt_snap));
        }
        if self.n_snapshots < 2 {
            return bad(format!("n_snapshots must be at least 2, got {}", self.n_snapshots));
        }
        if !(self.cfl > 0.0 && self.cfl <= 1.0) {
            return bad(format!("cfl must lie in (0, 1], got {}", self.cfl));
        }
        if !(self.initial_noise >= 0.0 && self.initial_noise < 1.0) {
            return bad(format!("initial_noise must lie in [0, 1), got {}", self.initial_noise));
        }
        if !(self.spinup >= 0.0 && self.spinup.is_finite()) {
            return bad(format!("spinup must be non-negative, got {}", self.spinup));
        }
        Ok(())
    }

    pub fn dx(&self) -> f64 {
        self.geometry.length / self.n_cells as f64
    }

    /// Density held at the outlet, p₀/a².
    pub fn outlet_density(&self) -> f64 {
        self.outlet_pressure / (self.fluid.sound_speed * self.fluid.sound_speed)
    }
}

fn to_config(e: Error) -> Error {
    Error::Config(e.to_string())
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolverState {
    pub density: Vec<f64>,
    pub velocity: Vec<f64>,
    pub time: f64,
    pub dx: f64,
}

impl SolverState {
    pub fn new(density: Vec<f64>, velocity: Vec<f64>, time: f64, dx: f64) -> Result<Self> {
        if density.len() != velocity.len() || density.len() < 8 {
            return Err(Error::Dimension(format!(
                "state needs at least 8 cells with matching arrays, got {}/{}",
                density.len(),
                velocity.len()
            )));
        }
        if let Some(i) = density.iter().position(|r| !(*r > 0.0)) {
            return Err(Error::Data(format!("non-positive density in cell {i}")));
        }
        if !(dx > 0.0) {
            return Err(Error::Data(format!("cell size must be positive, got {dx}")));
        }
        Ok(Self { density, velocity, time, dx })
    }

    /// Uniform state over `config.n_cells` cells.
    pub fn uniform(config: &SolverConfig, density: f64, velocity: f64) -> Result<Self> {
        Self::new(
            vec![density; config.n_cells],
            vec![velocity; config.n_cells],
            0.0,
            config.dx(),
        )
    }

    pub fn n_cells(&self) -> usize {
        self.density.len()
    }

    /// Total mass per unit area, Σρᵢ Δx.
    pub fn mass(&self) -> f64 {
        self.density.iter().sum::<f64>() * self.dx
    }

    pub fn pressure(&self, fluid: &FluidProperties) -> Vec<f64> {
        let a2 = fluid.sound_speed * fluid.sound_speed;
        self.density.iter().map(|r| a2 * r).collect()
    }
}

/// Largest explicit step allowed by the CFL condition: cfl·Δx / max(|uᵢ| + a).
pub fn stable_dt(state: &SolverState, fluid: &FluidProperties, cfl: f64) -> f64 {
    let max_speed = state
        .velocity
        .iter()
        .fold(0.0_f64, |m, u| m.max(u.abs() + fluid.sound_speed));
    cfl * state.dx / max_speed
}

#[inline]
fn rusanov(rl: f64, ul: f64, rr: f64, ur: f64, a: f64) -> (f64, f64) {
    let a2 = a * a;
    let (ml, mr) = (rl * ul, rr * ur);
    let fl = (ml, ml * ul + a2 * rl);
    let fr = (mr, mr * ur + a2 * rr);
    let s = (ul.abs() + a).max(ur.abs() + a);
    (
        0.5 * (fl.0 + fr.0) - 0.5 * s * (rr - rl),
        0.5 * (fl.1 + fr.1) - 0.5 * s * (mr - ml),
    )
}

/// Advances the state by one explicit step of length `dt`.
pub fn step(
    state: &SolverState,
    config: &SolverConfig,
    inlet: &InletProfile,
    dt: f64,
) -> Result<SolverState> {
    let limit = stable_dt(state, &config.fluid, config.cfl);
    if !(dt > 0.0) || dt > limit * (1.0 + 1e-12) {
        return Err(Error::Stability { dt, limit });
    }
    let n = state.n_cells();
    let a = config.fluid.sound_speed;
    let (rho, u) = (&state.density, &state.velocity);

    let (left, right) = match config.boundaries {
        Boundaries::InletOutlet => (
            (rho[0], inlet.velocity(state.time)),
            (config.outlet_density(), u[n - 1]),
        ),
        Boundaries::Closed => ((rho[0], -u[0]), (rho[n - 1], -u[n - 1])),
    };

    let mut flux = Vec::with_capacity(n + 1);
    flux.push(rusanov(left.0, left.1, rho[0], u[0], a));
    for i in 0..n - 1 {
        flux.push(rusanov(rho[i], u[i], rho[i + 1], u[i + 1], a));
    }
    flux.push(rusanov(rho[n - 1], u[n - 1], right.0, right.1, a));

    let ratio = dt / state.dx;
    let d = config.geometry.diameter;
    let mut density = Vec::with_capacity(n);
    let mut velocity = Vec::with_capacity(n);
    for i in 0..n {
        let r_new = rho[i] - ratio * (flux[i + 1].0 - flux[i].0);
        let f = config.friction.factor(rho[i], u[i].abs(), &config.fluid, d);
        let source = -(f / (2.0 * d)) * rho[i] * u[i] * u[i].abs();
        let m_new = rho[i] * u[i] - ratio * (flux[i + 1].1 - flux[i].1) + dt * source;
        density.push(r_new);
        velocity.push(m_new / r_new);
    }
    let time = state.time + dt;
    if let Some(cell) = (0..n).find(|&i| !(density[i] > 0.0 && density[i].is_finite() && velocity[i].is_finite())) {
        return Err(Error::SolverDivergence { cell, time });
    }
    Ok(SolverState { density, velocity, time, dx: state.dx })
}

/// Integrates from `state` to exactly `target`, substepping at the stable step.
pub fn advance_to(
    mut state: SolverState,
    config: &SolverConfig,
    inlet: &InletProfile,
    target: f64,
) -> Result<SolverState> {
    while state.time < target {
        let dt_max = stable_dt(&state, &config.fluid, config.cfl);
        let remaining = target - state.time;
        let last = remaining <= dt_max * (1.0 + 1e-9);
        let dt = if last { remaining } else { dt_max };
        state = step(&state, config, inlet, dt)?;
        if last {
            state.time = target;
        }
    }
    Ok(state)
}

/// Turbulence quantities per cell from inlet-estimate correlations.
#[derive(Debug, Clone, PartialEq)]
pub struct TurbulenceProxies {
    /// m²/s²
    pub k: Vec<f64>,
    /// 1/s
    pub omega: Vec<f64>,
    /// m²/s
    pub nut: Vec<f64>,
}

/// I = 0.16 Re^(−1/8), k = 1.5 (I|u|)², ℓ = 0.07 D, ω = √k / (C_μ^¼ ℓ), ν_t = k/ω.
/// Re uses the cell's own density and |u|.
pub fn turbulence_proxies(
    state: &SolverState,
    fluid: &FluidProperties,
    geometry: &PipeGeometry,
) -> TurbulenceProxies {
    let d = geometry.diameter;
    let length_scale = 0.07 * d;
    let c_mu_quarter = 0.09_f64.powf(0.25);
    let n = state.n_cells();
    let mut out = TurbulenceProxies {
        k: Vec::with_capacity(n),
        omega: Vec::with_capacity(n),
        nut: Vec::with_capacity(n),
    };
    for (&rho, &u) in state.density.iter().zip(&state.velocity) {
        let speed = u.abs();
        let k = if speed > 0.0 {
            let re = rho * speed * d / fluid.dynamic_viscosity;
            let intensity = 0.16 * re.powf(-0.125);
            1.5 * (intensity * speed).powi(2)
        } else {
            0.0
        };
        let omega = k.sqrt() / (c_mu_quarter * length_scale);
        out.nut.push(if omega > 0.0 { k / omega } else { 0.0 });
        out.k.push(k);
        out.omega.push(omega);
    }
    out
}

/// Field names the solver can emit.
pub const SOLVER_FIELDS: [&str; 6] = ["p", "U", "Uz", "k", "omega", "nut"];

fn field_components(name: &str) -> usize {
    if name == "U" {
        3
    } else {
        1
    }
}

fn sample_fields(state: &SolverState, config: &SolverConfig, fields: &[String], out: &mut [RawField]) {
    let need_turb = fields.iter().any(|f| matches!(f.as_str(), "k" | "omega" | "nut"));
    let turb = need_turb.then(|| turbulence_proxies(state, &config.fluid, &config.geometry));
    let n = state.n_cells();
    for (name, raw) in fields.iter().zip(out.iter_mut()) {
        let step = match name.as_str() {
            "p" => state.pressure(&config.fluid),
            "Uz" => state.velocity.clone(),
            "U" => {
                let mut v = vec![0.0; 2 * n];
                v.extend_from_slice(&state.velocity);
                v
            }
            "k" => turb.as_ref().expect("computed").k.clone(),
            "omega" => turb.as_ref().expect("computed").omega.clone(),
            "nut" => turb.as_ref().expect("computed").nut.clone(),
            other => unreachable!("unchecked field {other}"),
        };
        raw.steps.push(step);
    }
}

/// Runs the solver from the steady uniform state ρ = p₀/a², u = u₀ and
/// samples the selected fields every `dt_snap`, returning raw (identity
/// scaled) snapshots at `spinup + k·dt_snap`, k = 1..=n_snapshots.
pub fn generate_dataset(
    config: &SolverConfig,
    inlet: &InletProfile,
    fields: &[String],
) -> Result<SnapshotMatrix> {
    config.validate()?;
    inlet.validate()?;
    if fields.is_empty() {
        return Err(Error::Config("no fields selected".into()));
    }
    for (i, f) in fields.iter().enumerate() {
        if !SOLVER_FIELDS.contains(&f.as_str()) {
            return Err(Error::Config(format!(
                "unknown field '{f}', expected one of {SOLVER_FIELDS:?}"
            )));
        }
        if fields[..i].contains(f) {
            return Err(Error::Config(format!("field '{f}' selected twice")));
        }
    }

    let mut state = SolverState::uniform(config, config.outlet_density(), inlet.base)?;
    if config.initial_noise > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        for r in &mut state.density {
            *r *= 1.0 + config.initial_noise * rng.random_range(-1.0..1.0);
        }
    }
    if config.spinup > 0.0 {
        state = advance_to(state, config, inlet, config.spinup)?;
    }

    let mut raw: Vec<RawField> = fields
        .iter()
        .map(|f| RawField {
            name: f.clone(),
            components: field_components(f),
            points: config.n_cells,
            steps: Vec::with_capacity(config.n_snapshots),
        })
        .collect();
    let mut times = Vec::with_capacity(config.n_snapshots);
    for k in 1..=config.n_snapshots {
        let target = config.spinup + k as f64 * config.dt_snap;
        state = advance_to(state, config, inlet, target)?;
        times.push(target);
        sample_fields(&state, config, fields, &mut raw);
    }
    assemble_snapshots(&raw, &times, &ScalingPolicy::Identity)
}

/// Reynolds number of the mean inlet state.
pub fn inlet_reynolds(config: &SolverConfig, inlet: &InletProfile) -> Result<crate::field_data::Reynolds> {
    reynolds(&config.fluid, inlet.base, &config.geometry)
}
