//! Classical reference forecasters: persistence, climatological mean and a
//! discrete linear autoregressive model in POD coordinates.

use nalgebra::{DMatrix, DVector};

use crate::binio::{to_u32, Reader, Writer};
use crate::error::{Error, Result};
use crate::field_data::SnapshotMatrix;
use crate::opinf::{argmin_with_ties, LambdaScore, RegularizationConfig, TikhonovSolver};

const MAGIC: &[u8; 4] = b"ARM1";

/// `last_state` repeated `n_steps` times.
pub fn persistence_forecast(last_state: &DVector<f64>, n_steps: usize) -> DMatrix<f64> {
    DMatrix::from_fn(last_state.len(), n_steps, |i, _| last_state[i])
}

/// Column mean of `train` repeated `n_steps` times.
pub fn mean_forecast(train: &SnapshotMatrix, n_steps: usize) -> Result<DMatrix<f64>> {
    if train.n_times() == 0 {
        return Err(Error::Dimension("mean forecast needs at least one column".into()));
    }
    Ok(persistence_forecast(&train.values().column_mean(), n_steps))
}

/// x_{k+1} = A_d x_k + b.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearArModel {
    pub transition: DMatrix<f64>,
    pub offset: DVector<f64>,
    pub lambda: f64,
    pub dt: f64,
}

impl LinearArModel {
    pub fn rank(&self) -> usize {
        self.offset.len()
    }

    pub fn step(&self, x: &DVector<f64>) -> DVector<f64> {
        &self.transition * x + &self.offset
    }
}

fn ar_system(train_reduced: &DMatrix<f64>) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let (r, m) = train_reduced.shape();
    if m < 2 {
        return Err(Error::Dimension(format!("need at least 2 columns, got {m}")));
    }
    // rows [x_kᵀ | 1], targets x_{k+1}ᵀ
    let mut d = DMatrix::from_element(m - 1, r + 1, 1.0);
    d.view_mut((0, 0), (m - 1, r))
        .copy_from(&train_reduced.columns(0, m - 1).transpose());
    let targets = train_reduced.columns(1, m - 1).transpose();
    Ok((d, targets))
}

fn model_from_solution(o: &DMatrix<f64>, lambda: f64, dt: f64) -> LinearArModel {
    let r = o.ncols();
    LinearArModel {
        transition: o.rows(0, r).transpose(),
        offset: o.row(r).transpose(),
        lambda,
        dt,
    }
}

/// Ridge fit of (A_d, b) with penalty λ²(‖A_d‖²_F + ‖b‖²).
pub fn fit_linear_ar(train_reduced: &DMatrix<f64>, lambda: f64, dt: f64) -> Result<LinearArModel> {
    let (d, targets) = ar_system(train_reduced)?;
    let o = TikhonovSolver::new(&d)?.solve(&targets, lambda)?;
    Ok(model_from_solution(&o, lambda, dt))
}

/// Fits for every λ on `train_reduced`, scores the rollout from its last
/// column over `val_reduced` and returns the best model (ties to smaller λ).
pub fn fit_linear_ar_validated(
    train_reduced: &DMatrix<f64>,
    val_reduced: &DMatrix<f64>,
    reg: &RegularizationConfig,
    dt: f64,
) -> Result<(LinearArModel, Vec<LambdaScore>)> {
    reg.validate()?;
    let (d, targets) = ar_system(train_reduced)?;
    let solver = TikhonovSolver::new(&d)?;
    let x0 = train_reduced.column(train_reduced.ncols() - 1).into_owned();
    let mut models = Vec::with_capacity(reg.grid.len());
    let mut sweep = Vec::with_capacity(reg.grid.len());
    for &lambda in &reg.grid {
        let model = model_from_solution(&solver.solve(&targets, lambda)?, lambda, dt);
        let rmse = ar_rollout(&model, &x0, val_reduced.ncols(), 10)
            .ok()
            .map(|p| ((p - val_reduced).norm_squared() / val_reduced.len() as f64).sqrt())
            .filter(|s| s.is_finite());
        sweep.push(LambdaScore { lambda, rmse });
        models.push(model);
    }
    let scores: Vec<Option<f64>> = sweep.iter().map(|s| s.rmse).collect();
    let best = argmin_with_ties(&scores)
        .ok_or_else(|| Error::FitFailure("linear AR diverged for every regularisation value".into()))?;
    Ok((models.swap_remove(best), sweep))
}

/// Iterates the map `n_steps` times, re-seeding every `block` steps from the
/// last emitted state.
pub fn ar_rollout(model: &LinearArModel, x0: &DVector<f64>, n_steps: usize, block: usize) -> Result<DMatrix<f64>> {
    if x0.len() != model.rank() {
        return Err(Error::Dimension(format!(
            "initial state has {} entries, model rank is {}",
            x0.len(),
            model.rank()
        )));
    }
    if block == 0 {
        return Err(Error::Config("block size must be at least 1".into()));
    }
    let mut out = DMatrix::zeros(model.rank(), n_steps);
    let mut seed = x0.clone();
    let mut k = 0;
    while k < n_steps {
        let mut x = seed.clone();
        for _ in 0..block.min(n_steps - k) {
            x = model.step(&x);
            if x.iter().any(|v| !v.is_finite()) {
                return Err(Error::RolloutDivergence { step: k + 1 });
            }
            out.set_column(k, &x);
            k += 1;
        }
        seed = x;
    }
    Ok(out)
}

pub fn write_arm1(model: &LinearArModel) -> Result<Vec<u8>> {
    let mut w = Writer::new();
    w.magic(MAGIC);
    w.u32(to_u32(model.rank(), "rank")?);
    w.f64(model.lambda);
    w.f64(model.dt);
    w.matrix(&model.transition);
    w.f64s(model.offset.as_slice());
    Ok(w.finish())
}

pub fn read_arm1(bytes: &[u8]) -> Result<LinearArModel> {
    let mut rd = Reader::new("ARM1", bytes);
    rd.expect_magic(MAGIC)?;
    let r = rd.u32()? as usize;
    let expected = 4 + 4 + 16 + 8 * (r * r + r);
    if expected != bytes.len() {
        return Err(Error::Format(format!(
            "ARM1 file length mismatch: expected {expected} bytes, found {}",
            bytes.len()
        )));
    }
    let lambda = rd.f64()?;
    let dt = rd.f64()?;
    let transition = rd.matrix(r, r)?;
    let offset = DVector::from_vec(rd.f64s(r)?);
    rd.finish()?;
    Ok(LinearArModel { transition, offset, lambda, dt })
}
