//! Fitted forecasters behind one interface, and the BND1 model bundle.
//!
//! ```text
//! "BND1" | u16 name_len, method name
//! u32 len, SNP1 header with zero columns (layout, scaling, t_end, dt)
//! u32 len, POD1 basis (len 0 when the method needs none)
//! u8 kind | kind payload
//!   0 persistence_full, 1 persistence: nothing
//!   2 mean: u32 r, r × f64 (full-space mean when there is no basis)
//!   3 linear_ar: u32 len, ARM1
//!   4 opinf: u32 len, OPI1, u8 has_input
//!            [f64 t0, f64 dt, u8 has_period, f64 period, u32 width, u32 n, width × n f64]
//! ```

use nalgebra::{DMatrix, DVector};

use crate::baselines::{
    ar_rollout, fit_linear_ar, fit_linear_ar_validated, read_arm1, write_arm1, LinearArModel,
};
use crate::binio::{to_u32, Reader, Writer};
use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::field_data::{read_snp1, write_snp1, FieldLayout, SnapshotMatrix};
use crate::opinf::{
    fit_opinf, read_opi1, refit_opinf, rollout, write_opi1, LambdaScore, OperatorTerms, ReducedOperators,
    RegularizationConfig, TabulatedInput,
};
use crate::pod::{project, project_vector, read_pod1, reconstruct_values, write_pod1, PodBasis};

const MAGIC: &[u8; 4] = b"BND1";

#[allow(clippy::large_enum_variant)]
#[derive(Debug, Clone, PartialEq)]
pub enum Predictor {
    /// Last full-space state repeated.
    PersistenceFull,
    /// Last state projected onto the basis, repeated.
    Persistence,
    /// Mean reduced state over the fitting window.
    Mean(DVector<f64>),
    LinearAr(LinearArModel),
    OpInf { ops: ReducedOperators, input: Option<TabulatedInput> },
}

impl Predictor {
    fn kind(&self) -> u8 {
        match self {
            Predictor::PersistenceFull => 0,
            Predictor::Persistence => 1,
            Predictor::Mean(_) => 2,
            Predictor::LinearAr(_) => 3,
            Predictor::OpInf { .. } => 4,
        }
    }

    pub fn lambda(&self) -> Option<f64> {
        match self {
            Predictor::LinearAr(m) => Some(m.lambda),
            Predictor::OpInf { ops, .. } => Some(ops.lambda),
            _ => None,
        }
    }
}

/// A forecaster ready to roll out from any state laid out like `layout`.
#[derive(Debug, Clone, PartialEq)]
pub struct FittedModel {
    pub method: String,
    pub layout: FieldLayout,
    /// Time of the last fitted column.
    pub t_end: f64,
    pub dt: f64,
    pub basis: Option<PodBasis>,
    pub predictor: Predictor,
}

impl FittedModel {
    pub fn rank(&self) -> Option<usize> {
        self.basis.as_ref().map(PodBasis::rank)
    }

    /// Forecasts `n_steps` scaled full states after the last column of
    /// `history`, re-seeding every `block` steps.
    pub fn forecast(&self, history: &SnapshotMatrix, n_steps: usize, block: usize) -> Result<DMatrix<f64>> {
        if history.layout().row_labels() != self.layout.row_labels() {
            return Err(Error::Dimension("history layout does not match the model".into()));
        }
        let last = history
            .last_column()
            .ok_or_else(|| Error::Dimension("history is empty".into()))?;
        if block == 0 {
            return Err(Error::Config("block size must be at least 1".into()));
        }
        let basis = || {
            self.basis
                .as_ref()
                .ok_or_else(|| Error::Format(format!("method '{}' needs a basis", self.method)))
        };
        let repeat = |v: &DVector<f64>| DMatrix::from_fn(v.len(), n_steps, |i, _| v[i]);
        match &self.predictor {
            Predictor::PersistenceFull => Ok(repeat(&last)),
            Predictor::Persistence => match &self.basis {
                Some(b) => reconstruct_values(b, &repeat(&project_vector(b, &last)?)),
                None => Ok(repeat(&last)),
            },
            Predictor::Mean(m) => match &self.basis {
                Some(b) => reconstruct_values(b, &repeat(m)),
                None => Ok(repeat(m)),
            },
            Predictor::LinearAr(ar) => {
                let b = basis()?;
                reconstruct_values(b, &ar_rollout(ar, &project_vector(b, &last)?, n_steps, block)?)
            }
            Predictor::OpInf { ops, input } => {
                let b = basis()?;
                let x0 = project_vector(b, &last)?;
                let sig = input.as_ref().map(|i| i as &dyn crate::opinf::InputSignal);
                reconstruct_values(b, &rollout(ops, &x0, history.last_time(), sig, n_steps, block)?)
            }
        }
    }
}

/// Scaled inlet U^z over `data`, as a one-row input table.
fn inlet_input(data: &SnapshotMatrix, period: Option<f64>) -> Result<TabulatedInput> {
    let row = data
        .layout()
        .row_of("Uz", 0, 0)
        .ok_or_else(|| Error::Config("input term needs the 'Uz' field".into()))?;
    Ok(TabulatedInput {
        t0: data.t0(),
        dt: data.dt(),
        values: data.values().rows(row, 1).into_owned(),
        period,
    })
}

/// Fit result with the validation sweep, when the method has one.
#[derive(Debug, Clone)]
pub struct MethodFit {
    pub model: FittedModel,
    pub sweep: Vec<LambdaScore>,
}

/// Fits `method` with λ chosen on `val`, then refits on train + val at that
/// λ with the same basis.
pub fn fit_method(
    method: &str,
    basis: Option<&PodBasis>,
    train: &SnapshotMatrix,
    val: &SnapshotMatrix,
    config: &ExperimentConfig,
) -> Result<MethodFit> {
    let all = train.concat(val)?;
    let need_basis = || basis.cloned().ok_or_else(|| Error::DegenerateData("no POD basis available".into()));
    let dt = train.dt();
    let mut sweep = Vec::new();
    let (basis, predictor) = match method {
        "persistence_full" => (None, Predictor::PersistenceFull),
        // Without a basis (zero-variance training data) these two act in
        // full space, where the projection would be exact.
        "persistence" => (basis.cloned(), Predictor::Persistence),
        "mean" => match basis {
            Some(b) => (Some(b.clone()), Predictor::Mean(project(b, &all)?.column_mean())),
            None => (None, Predictor::Mean(all.values().column_mean())),
        },
        "linear_ar" => {
            let b = need_basis()?;
            let reg = config.opinf.regularization();
            let (chosen, s) = fit_linear_ar_validated(&project(&b, train)?, &project(&b, val)?, &reg, dt)?;
            sweep = s;
            let model = fit_linear_ar(&project(&b, &all)?, chosen.lambda, dt)?;
            (Some(b), Predictor::LinearAr(model))
        }
        "opinf" => {
            let b = need_basis()?;
            let (ops, input, s) = fit_opinf_method(&b, train, val, &all, config)?;
            sweep = s;
            (Some(b), Predictor::OpInf { ops, input })
        }
        other => return Err(Error::Config(format!("unknown method '{other}'"))),
    };
    let model = FittedModel {
        method: method.to_string(),
        layout: train.layout().clone(),
        t_end: all.last_time(),
        dt,
        basis,
        predictor,
    };
    Ok(MethodFit { model, sweep })
}

fn fit_opinf_method(
    basis: &PodBasis,
    train: &SnapshotMatrix,
    val: &SnapshotMatrix,
    all: &SnapshotMatrix,
    config: &ExperimentConfig,
) -> Result<(ReducedOperators, Option<TabulatedInput>, Vec<LambdaScore>)> {
    let terms: OperatorTerms = config.opinf.terms;
    let reg: RegularizationConfig = config.opinf.regularization();
    let period = Some(config.opinf.input_period.unwrap_or(config.solver.inlet.period));
    let train_input = if terms.input { Some(inlet_input(train, period)?) } else { None };
    let fit = fit_opinf(
        &project(basis, train)?,
        &project(basis, val)?,
        train_input.as_ref().map(|i| &i.values),
        train_input.as_ref().map(|i| i as &dyn crate::opinf::InputSignal),
        &terms,
        &reg,
        train.dt(),
        train.last_time(),
    )?;
    let all_input = if terms.input { Some(inlet_input(all, period)?) } else { None };
    let ops = refit_opinf(
        &project(basis, all)?,
        all_input.as_ref().map(|i| &i.values),
        &terms,
        fit.operators.lambda,
        train.dt(),
    )?;
    Ok((ops, all_input, fit.sweep))
}

pub fn write_bundle(model: &FittedModel) -> Result<Vec<u8>> {
    let mut w = Writer::new();
    w.magic(MAGIC);
    let name = model.method.as_bytes();
    w.u16(u16::try_from(name.len()).map_err(|_| Error::Format("method name too long".into()))?);
    w.bytes(name);
    let header = SnapshotMatrix::with_spacing(
        model.layout.clone(),
        model.t_end,
        model.dt,
        DMatrix::zeros(model.layout.n_state(), 0),
    )?;
    section(&mut w, &write_snp1(&header)?)?;
    match &model.basis {
        Some(b) => section(&mut w, &write_pod1(b)?)?,
        None => w.u32(0),
    }
    w.u8(model.predictor.kind());
    match &model.predictor {
        Predictor::PersistenceFull | Predictor::Persistence => {}
        Predictor::Mean(m) => {
            w.u32(to_u32(m.len(), "rank")?);
            w.f64s(m.as_slice());
        }
        Predictor::LinearAr(ar) => section(&mut w, &write_arm1(ar)?)?,
        Predictor::OpInf { ops, input } => {
            section(&mut w, &write_opi1(ops)?)?;
            match input {
                None => w.u8(0),
                Some(i) => {
                    w.u8(1);
                    w.f64(i.t0);
                    w.f64(i.dt);
                    w.u8(u8::from(i.period.is_some()));
                    w.f64(i.period.unwrap_or(0.0));
                    w.u32(to_u32(i.values.nrows(), "input width")?);
                    w.u32(to_u32(i.values.ncols(), "input length")?);
                    w.matrix(&i.values);
                }
            }
        }
    }
    Ok(w.finish())
}

fn section(w: &mut Writer, bytes: &[u8]) -> Result<()> {
    w.u32(to_u32(bytes.len(), "section length")?);
    w.bytes(bytes);
    Ok(())
}

pub fn read_bundle(bytes: &[u8]) -> Result<FittedModel> {
    let mut r = Reader::new("BND1", bytes);
    r.expect_magic(MAGIC)?;
    let method = r.string()?;
    let n = r.u32()? as usize;
    let header = read_snp1(r.take(n)?)?;
    let n = r.u32()? as usize;
    let basis = if n == 0 {
        None
    } else {
        Some(read_pod1(r.take(n)?)?.with_layout(header.layout().clone())?)
    };
    let predictor = match r.u8()? {
        0 => Predictor::PersistenceFull,
        1 => Predictor::Persistence,
        2 => {
            let k = r.u32()? as usize;
            Predictor::Mean(DVector::from_vec(r.f64s(k)?))
        }
        3 => {
            let n = r.u32()? as usize;
            Predictor::LinearAr(read_arm1(r.take(n)?)?)
        }
        4 => {
            let n = r.u32()? as usize;
            let ops = read_opi1(r.take(n)?)?;
            let input = match r.u8()? {
                0 => None,
                _ => {
                    let t0 = r.f64()?;
                    let dt = r.f64()?;
                    let has_period = r.u8()? != 0;
                    let period = r.f64()?;
                    let width = r.u32()? as usize;
                    let len = r.u32()? as usize;
                    let values = r.matrix(width, len)?;
                    Some(TabulatedInput { t0, dt, values, period: has_period.then_some(period) })
                }
            };
            Predictor::OpInf { ops, input }
        }
        k => return Err(Error::Format(format!("unknown predictor kind {k} in BND1 file"))),
    };
    r.finish()?;
    let consistent = match &predictor {
        Predictor::PersistenceFull => basis.is_none(),
        Predictor::Persistence => true,
        Predictor::Mean(m) => m.len() == basis.as_ref().map_or(header.n_state(), PodBasis::rank),
        Predictor::LinearAr(_) | Predictor::OpInf { .. } => basis.is_some(),
    };
    if !consistent {
        return Err(Error::Format(format!("BND1 basis section inconsistent with method '{method}'")));
    }
    Ok(FittedModel {
        method,
        t_end: header.t0(),
        dt: header.dt(),
        layout: header.layout().clone(),
        basis,
        predictor,
    })
}

/// Brings `data` onto `layout`: picks its fields in order and applies its
/// scaling to the raw values.
pub fn conform(data: &SnapshotMatrix, layout: &FieldLayout) -> Result<SnapshotMatrix> {
    let names: Vec<String> = layout.fields().iter().map(|f| f.name.clone()).collect();
    let picked = data.select_fields(&names)?;
    for (a, b) in picked.layout().fields().iter().zip(layout.fields()) {
        if a.components != b.components || a.points != b.points {
            return Err(Error::Dimension(format!(
                "field '{}' is {}×{} in the data but {}×{} in the model",
                a.name, a.components, a.points, b.components, b.points
            )));
        }
    }
    let scaled = layout.scale(&picked.raw_values());
    SnapshotMatrix::with_spacing(layout.clone(), data.t0(), data.dt(), scaled)
}
