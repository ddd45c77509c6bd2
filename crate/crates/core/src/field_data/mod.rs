//! Snapshot data model: field layout, affine scaling, dataset splitting and
//! the Reynolds-number utility.
//!
//! A [`SnapshotMatrix`] stores one time step per column. Rows are stacked
//! field-major, then component-major, then point-minor, so row
//! `offset(field) + component * points + point` holds one scalar sample.

mod snp1;
mod table;

use std::ops::Range;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use snp1::{read_snp1, write_snp1};
pub use table::{read_csv, write_csv, CsvSnapshots};

/// Relative tolerance on constant time spacing.
const SPACING_RTOL: f64 = 1e-12;

/// Fields emitted by the surrogate solver from turbulence correlations rather
/// than transport equations.
pub const SYNTHETIC_FIELDS: [&str; 3] = ["k", "omega", "nut"];

/// One named block of rows in the snapshot matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FieldSpec {
    pub name: String,
    pub components: usize,
    pub points: usize,
    /// One offset per component block.
    pub scale_offset: Vec<f64>,
    /// One strictly positive factor per component block.
    pub scale_factor: Vec<f64>,
}

impl FieldSpec {
    /// Field with identity scaling.
    pub fn new(name: impl Into<String>, components: usize, points: usize) -> Self {
        Self {
            name: name.into(),
            components,
            points,
            scale_offset: vec![0.0; components],
            scale_factor: vec![1.0; components],
        }
    }

    pub fn rows(&self) -> usize {
        self.components * self.points
    }

    /// True for the turbulence proxies, which are correlations rather than
    /// solved quantities.
    pub fn is_synthetic(&self) -> bool {
        SYNTHETIC_FIELDS.contains(&self.name.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FieldLayout {
    fields: Vec<FieldSpec>,
}

impl FieldLayout {
    pub fn new(fields: Vec<FieldSpec>) -> Result<Self> {
        if fields.is_empty() {
            return Err(Error::Dimension("layout has no fields".into()));
        }
        for (i, f) in fields.iter().enumerate() {
            if f.components == 0 || f.points == 0 {
                return Err(Error::Dimension(format!(
                    "field '{}' has zero components or points",
                    f.name
                )));
            }
            if f.scale_offset.len() != f.components || f.scale_factor.len() != f.components {
                return Err(Error::Dimension(format!(
                    "field '{}' needs {} scale pairs, has {}/{}",
                    f.name,
                    f.components,
                    f.scale_offset.len(),
                    f.scale_factor.len()
                )));
            }
            if f.scale_factor.iter().any(|&s| !(s > 0.0 && s.is_finite()))
                || f.scale_offset.iter().any(|o| !o.is_finite())
            {
                return Err(Error::Data(format!(
                    "field '{}' has a non-positive or non-finite scale",
                    f.name
                )));
            }
            if fields[..i].iter().any(|g| g.name == f.name) {
                return Err(Error::Data(format!("duplicate field name '{}'", f.name)));
            }
        }
        Ok(Self { fields })
    }

    pub fn fields(&self) -> &[FieldSpec] {
        &self.fields
    }

    pub fn n_state(&self) -> usize {
        self.fields.iter().map(FieldSpec::rows).sum()
    }

    pub fn field(&self, name: &str) -> Option<&FieldSpec> {
        self.fields.iter().find(|f| f.name == name)
    }

    /// Row range occupied by the named field.
    pub fn field_rows(&self, name: &str) -> Option<Range<usize>> {
        let mut start = 0;
        for f in &self.fields {
            if f.name == name {
                return Some(start..start + f.rows());
            }
            start += f.rows();
        }
        None
    }

    /// Row index of `(field, component, point)`.
    pub fn row_of(&self, name: &str, component: usize, point: usize) -> Option<usize> {
        let f = self.field(name)?;
        if component >= f.components || point >= f.points {
            return None;
        }
        Some(self.field_rows(name)?.start + component * f.points + point)
    }

    /// Per-row `(offset, factor)` pairs, expanded from the component blocks.
    pub fn row_scaling(&self) -> Vec<(f64, f64)> {
        let mut out = Vec::with_capacity(self.n_state());
        for f in &self.fields {
            for c in 0..f.components {
                out.extend(std::iter::repeat_n(
                    (f.scale_offset[c], f.scale_factor[c]),
                    f.points,
                ));
            }
        }
        out
    }

    /// Column names `field.component.point` in row order.
    pub fn row_labels(&self) -> Vec<String> {
        let mut out = Vec::with_capacity(self.n_state());
        for f in &self.fields {
            for c in 0..f.components {
                for p in 0..f.points {
                    out.push(format!("{}.{}.{}", f.name, c, p));
                }
            }
        }
        out
    }

    pub fn scale_column(&self, raw: &mut [f64]) {
        for (v, (o, s)) in raw.iter_mut().zip(self.row_scaling()) {
            *v = (*v - o) / s;
        }
    }

    pub fn unscale_column(&self, scaled: &mut [f64]) {
        for (v, (o, s)) in scaled.iter_mut().zip(self.row_scaling()) {
            *v = *v * s + o;
        }
    }

    /// Converts a scaled matrix (rows in layout order) to raw units.
    pub fn unscale(&self, scaled: &DMatrix<f64>) -> DMatrix<f64> {
        let scaling = self.row_scaling();
        let mut out = scaled.clone();
        for mut col in out.column_iter_mut() {
            for (v, &(o, s)) in col.iter_mut().zip(&scaling) {
                *v = *v * s + o;
            }
        }
        out
    }

    pub fn scale(&self, raw: &DMatrix<f64>) -> DMatrix<f64> {
        let scaling = self.row_scaling();
        let mut out = raw.clone();
        for mut col in out.column_iter_mut() {
            for (v, &(o, s)) in col.iter_mut().zip(&scaling) {
                *v = (*v - o) / s;
            }
        }
        out
    }
}

/// Column-per-time-step matrix of scaled field values.
#[derive(Debug, Clone, PartialEq)]
pub struct SnapshotMatrix {
    layout: FieldLayout,
    t0: f64,
    dt: f64,
    values: DMatrix<f64>,
}

impl SnapshotMatrix {
    /// Builds from an explicit time sequence; needs at least two times to fix Δt.
    pub fn new(layout: FieldLayout, times: &[f64], values: DMatrix<f64>) -> Result<Self> {
        if times.len() < 2 {
            return Err(Error::Dimension(
                "at least two times are needed to infer the spacing".into(),
            ));
        }
        if values.ncols() != times.len() {
            return Err(Error::Dimension(format!(
                "{} columns but {} times",
                values.ncols(),
                times.len()
            )));
        }
        let dt = check_uniform_times(times)?;
        Self::with_spacing(layout, times[0], dt, values)
    }

    pub fn with_spacing(layout: FieldLayout, t0: f64, dt: f64, values: DMatrix<f64>) -> Result<Self> {
        if !(dt > 0.0 && dt.is_finite() && t0.is_finite()) {
            return Err(Error::Data(format!("invalid time axis t0 = {t0}, dt = {dt}")));
        }
        if values.nrows() != layout.n_state() {
            return Err(Error::Dimension(format!(
                "values have {} rows, layout needs {}",
                values.nrows(),
                layout.n_state()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Data("snapshot values contain non-finite entries".into()));
        }
        Ok(Self { layout, t0, dt, values })
    }

    pub fn layout(&self) -> &FieldLayout {
        &self.layout
    }

    pub fn values(&self) -> &DMatrix<f64> {
        &self.values
    }

    pub fn into_values(self) -> DMatrix<f64> {
        self.values
    }

    pub fn n_state(&self) -> usize {
        self.values.nrows()
    }

    pub fn n_times(&self) -> usize {
        self.values.ncols()
    }

    pub fn t0(&self) -> f64 {
        self.t0
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn time(&self, k: usize) -> f64 {
        self.t0 + k as f64 * self.dt
    }

    pub fn times(&self) -> Vec<f64> {
        (0..self.n_times()).map(|k| self.time(k)).collect()
    }

    /// Time of the last column, or the time one step before `t0` when empty.
    pub fn last_time(&self) -> f64 {
        self.t0 + (self.n_times() as f64 - 1.0) * self.dt
    }

    pub fn raw_values(&self) -> DMatrix<f64> {
        self.layout.unscale(&self.values)
    }

    pub fn last_column(&self) -> Option<DVector<f64>> {
        let n = self.n_times();
        (n > 0).then(|| self.values.column(n - 1).into_owned())
    }

    /// Contiguous column sub-range with its times.
    pub fn columns(&self, range: Range<usize>) -> Result<Self> {
        if range.start > range.end || range.end > self.n_times() {
            return Err(Error::Dimension(format!(
                "column range {range:?} outside 0..{}",
                self.n_times()
            )));
        }
        Ok(Self {
            layout: self.layout.clone(),
            t0: self.time(range.start),
            dt: self.dt,
            values: self.values.columns(range.start, range.len()).into_owned(),
        })
    }

    /// Appends `next`, which must continue this matrix's time axis.
    pub fn concat(&self, next: &Self) -> Result<Self> {
        if next.layout != self.layout {
            return Err(Error::Dimension("cannot concatenate different layouts".into()));
        }
        let expected = self.time(self.n_times());
        if (next.dt - self.dt).abs() > SPACING_RTOL * self.dt
            || (next.n_times() > 0 && (next.t0 - expected).abs() > 1e-9 * self.dt.max(expected.abs()))
        {
            return Err(Error::Dimension(format!(
                "time axes do not join: expected t0 = {expected}, found {}",
                next.t0
            )));
        }
        let mut values = DMatrix::zeros(self.n_state(), self.n_times() + next.n_times());
        values.columns_mut(0, self.n_times()).copy_from(&self.values);
        values
            .columns_mut(self.n_times(), next.n_times())
            .copy_from(&next.values);
        Ok(Self {
            layout: self.layout.clone(),
            t0: self.t0,
            dt: self.dt,
            values,
        })
    }

    /// Keeps the named fields, in the order given, with their scaling.
    pub fn select_fields(&self, names: &[String]) -> Result<Self> {
        let mut specs = Vec::with_capacity(names.len());
        let mut rows = Vec::new();
        for name in names {
            let r = self.layout.field_rows(name).ok_or_else(|| {
                Error::Config(format!(
                    "field '{name}' not present; available: {:?}",
                    self.layout.fields.iter().map(|f| &f.name).collect::<Vec<_>>()
                ))
            })?;
            if specs.iter().any(|f: &FieldSpec| &f.name == name) {
                return Err(Error::Config(format!("field '{name}' selected twice")));
            }
            specs.push(self.layout.field(name).expect("rows found").clone());
            rows.extend(r);
        }
        let layout = FieldLayout::new(specs)?;
        let values = self.values.select_rows(rows.iter());
        Self::with_spacing(layout, self.t0, self.dt, values)
    }

    /// Re-scales the raw values with `policy`, fitting statistics on the
    /// leading columns only when the policy says so.
    pub fn rescaled(&self, policy: &ScalingPolicy) -> Result<Self> {
        let out = assemble_snapshots(&self.to_raw_fields(), &self.times(), policy)?;
        Ok(Self { t0: self.t0, dt: self.dt, ..out })
    }

    /// Splits back into per-field raw arrays.
    pub fn to_raw_fields(&self) -> Vec<RawField> {
        let raw = self.raw_values();
        let mut start = 0;
        let mut out = Vec::with_capacity(self.layout.fields.len());
        for f in &self.layout.fields {
            let rows = f.rows();
            let steps = raw
                .column_iter()
                .map(|c| c.rows(start, rows).iter().copied().collect())
                .collect();
            out.push(RawField {
                name: f.name.clone(),
                components: f.components,
                points: f.points,
                steps,
            });
            start += rows;
        }
        out
    }
}

fn check_uniform_times(times: &[f64]) -> Result<f64> {
    if times.iter().any(|t| !t.is_finite()) {
        return Err(Error::Data("non-finite time value".into()));
    }
    let dt = (times[times.len() - 1] - times[0]) / (times.len() - 1) as f64;
    if dt <= 0.0 {
        return Err(Error::Data("times must be strictly increasing".into()));
    }
    for (k, w) in times.windows(2).enumerate() {
        if w[1] <= w[0] {
            return Err(Error::Data(format!("times not increasing at index {}", k + 1)));
        }
        let expected = times[0] + (k + 1) as f64 * dt;
        if (w[1] - expected).abs() > SPACING_RTOL * w[1].abs().max(dt) {
            return Err(Error::Data(format!(
                "non-uniform time spacing at index {}: t = {}, expected {expected}",
                k + 1,
                w[1]
            )));
        }
    }
    Ok(dt)
}

/// Raw (unscaled) samples of one field: `steps[t]` holds `components * points`
/// values, component-major.
#[derive(Debug, Clone, PartialEq)]
pub struct RawField {
    pub name: String,
    pub components: usize,
    pub points: usize,
    pub steps: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub enum ScalingPolicy {
    #[default]
    Identity,
    /// Per component block: subtract the mean over the first `fit_columns`
    /// columns (all columns when `None`) and divide by the standard
    /// deviation, falling back to max-abs when it is below 1e-14.
    Standardize { fit_columns: Option<usize> },
}

const STD_FLOOR: f64 = 1e-14;

/// Stacks per-field arrays into a scaled snapshot matrix.
pub fn assemble_snapshots(
    fields: &[RawField],
    times: &[f64],
    scaling: &ScalingPolicy,
) -> Result<SnapshotMatrix> {
    let n_times = times.len();
    let mut specs = Vec::with_capacity(fields.len());
    for f in fields {
        if f.steps.len() != n_times {
            return Err(Error::Dimension(format!(
                "field '{}' has {} time steps, expected {n_times}",
                f.name,
                f.steps.len()
            )));
        }
        let width = f.components * f.points;
        if let Some(t) = f.steps.iter().position(|s| s.len() != width) {
            return Err(Error::Dimension(format!(
                "field '{}' step {t} has {} values, expected {width}",
                f.name,
                f.steps[t].len()
            )));
        }
        if f.steps.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Data(format!("field '{}' has non-finite values", f.name)));
        }
        let mut spec = FieldSpec::new(f.name.clone(), f.components, f.points);
        if let ScalingPolicy::Standardize { fit_columns } = scaling {
            let n_fit = fit_columns.unwrap_or(n_times).min(n_times);
            for c in 0..f.components {
                let block = f.steps[..n_fit]
                    .iter()
                    .flat_map(|s| s[c * f.points..(c + 1) * f.points].iter().copied());
                let (offset, factor) = standardize_block(block);
                spec.scale_offset[c] = offset;
                spec.scale_factor[c] = factor;
            }
        }
        specs.push(spec);
    }
    let layout = FieldLayout::new(specs)?;
    let n_state = layout.n_state();
    let mut values = DMatrix::zeros(n_state, n_times);
    for (t, mut col) in values.column_iter_mut().enumerate() {
        let mut row = 0;
        for f in fields {
            for &v in &f.steps[t] {
                col[row] = v;
                row += 1;
            }
        }
    }
    let values = layout.scale(&values);
    if n_times >= 2 {
        SnapshotMatrix::new(layout, times, values)
    } else {
        Err(Error::Dimension("at least two time steps are required".into()))
    }
}

fn standardize_block(values: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = values.clone().count();
    if n == 0 {
        return (0.0, 1.0);
    }
    let mean = values.clone().sum::<f64>() / n as f64;
    let var = values.clone().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
    let std = var.sqrt();
    if std >= STD_FLOOR {
        return (mean, std);
    }
    let max_abs = values.fold(0.0_f64, |m, v| m.max(v.abs()));
    (mean, if max_abs >= STD_FLOOR { max_abs } else { 1.0 })
}

/// Split fractions for train / validation / test.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitRatios {
    pub train: f64,
    pub validation: f64,
    pub test: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        Self { train: 0.5, validation: 0.1, test: 0.4 }
    }
}

impl SplitRatios {
    /// Column counts for `n` columns: floor for train and validation, remainder to test.
    pub fn counts(&self, n: usize) -> Result<(usize, usize, usize)> {
        let all = [self.train, self.validation, self.test];
        if all.iter().any(|r| !(*r > 0.0)) || (all.iter().sum::<f64>() - 1.0).abs() > 1e-12 {
            return Err(Error::Config(format!(
                "split ratios must be positive and sum to 1, got {all:?}"
            )));
        }
        if n < 10 {
            return Err(Error::Dimension(format!("need at least 10 columns to split, got {n}")));
        }
        let train = (self.train * n as f64 + 1e-9).floor() as usize;
        let val = (self.validation * n as f64 + 1e-9).floor() as usize;
        if train == 0 || val == 0 || train + val >= n {
            return Err(Error::Dimension(format!("split of {n} columns leaves an empty part")));
        }
        Ok((train, val, n - train - val))
    }
}

/// Contiguous train / validation / test split.
pub fn split_sequences(
    data: &SnapshotMatrix,
    ratios: &SplitRatios,
) -> Result<(SnapshotMatrix, SnapshotMatrix, SnapshotMatrix)> {
    let (n_train, n_val, _) = ratios.counts(data.n_times())?;
    let train = data.columns(0..n_train)?;
    let val = data.columns(n_train..n_train + n_val)?;
    let test = data.columns(n_train + n_val..data.n_times())?;
    Ok((train, val, test))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FluidProperties {
    /// kg/m³
    pub density: f64,
    /// Pa·s
    pub dynamic_viscosity: f64,
    /// Isothermal sound speed, m/s.
    pub sound_speed: f64,
}

impl FluidProperties {
    /// Hydrogen near 293 K and 1 atm; the sound speed is √(RT/M).
    pub const HYDROGEN: Self = Self {
        density: 0.0838,
        dynamic_viscosity: 8.9e-6,
        sound_speed: 1099.6,
    };

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("density", self.density),
            ("dynamic_viscosity", self.dynamic_viscosity),
            ("sound_speed", self.sound_speed),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Domain(format!("fluid {name} must be positive, got {v}")));
            }
        }
        Ok(())
    }
}

impl Default for FluidProperties {
    fn default() -> Self {
        Self::HYDROGEN
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipeGeometry {
    /// m
    pub diameter: f64,
    /// m
    pub length: f64,
}

impl PipeGeometry {
    /// 3-inch (7.62 cm) pipe, 5 m long.
    pub const TABLE_PIPE: Self = Self { diameter: 0.0762, length: 5.0 };

    pub fn validate(&self) -> Result<()> {
        if !(self.diameter > 0.0 && self.length > 0.0 && self.diameter.is_finite() && self.length.is_finite()) {
            return Err(Error::Domain(format!(
                "pipe diameter and length must be positive, got D = {}, L = {}",
                self.diameter, self.length
            )));
        }
        Ok(())
    }
}

impl Default for PipeGeometry {
    fn default() -> Self {
        Self::TABLE_PIPE
    }
}

/// Pipe flow becomes turbulent above this Reynolds number.
pub const TURBULENT_REYNOLDS: f64 = 2900.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Reynolds {
    pub value: f64,
    pub turbulent: bool,
}

/// Re = ρuD/μ, turbulent iff Re > 2900.
pub fn reynolds(fluid: &FluidProperties, speed: f64, geometry: &PipeGeometry) -> Result<Reynolds> {
    fluid.validate()?;
    geometry.validate()?;
    if !(speed > 0.0 && speed.is_finite()) {
        return Err(Error::Domain(format!("flow speed must be positive, got {speed}")));
    }
    let value = fluid.density * speed * geometry.diameter / fluid.dynamic_viscosity;
    Ok(Reynolds { value, turbulent: value > TURBULENT_REYNOLDS })
}

/// Flow speed giving Reynolds number `re`; inverse of [`reynolds`].
pub fn speed_for_reynolds(fluid: &FluidProperties, re: f64, geometry: &PipeGeometry) -> f64 {
    re * fluid.dynamic_viscosity / (fluid.density * geometry.diameter)
}
