//! Operator Inference: non-intrusive fitting of polynomial latent dynamics
//!
//! ```text
//! dx/dt = c + A x + H (x ⊗ x) + G (x ⊗ x ⊗ x) + B u
//! ```
//!
//! Quadratic and cubic terms are stored over unique monomials (`i ≤ j`,
//! `i ≤ j ≤ k`), which is equivalent to the full Kronecker form through a
//! fixed duplication map. Operators are learned by Tikhonov-regularised least
//! squares against finite-difference time derivatives, and the regulariser is
//! picked by validation rollout error.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::binio::{to_u32, Reader, Writer};
use crate::error::{Error, Result};
use crate::field_data::SnapshotMatrix;
use crate::pod::{project_vector, reconstruct, PodBasis};

const MAGIC: &[u8; 4] = b"OPI1";

/// Number of rollout steps between re-seeding from the model's own output.
pub const DEFAULT_BLOCK: usize = 10;

/// Which polynomial terms enter the model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OperatorTerms {
    pub constant: bool,
    pub linear: bool,
    pub quadratic: bool,
    pub cubic: bool,
    pub input: bool,
}

impl Default for OperatorTerms {
    /// c, A and H; the inlet velocity travels inside the state, so B is off.
    fn default() -> Self {
        Self { constant: true, linear: true, quadratic: true, cubic: false, input: false }
    }
}

impl OperatorTerms {
    fn bits(&self) -> u8 {
        u8::from(self.constant)
            | u8::from(self.linear) << 1
            | u8::from(self.quadratic) << 2
            | u8::from(self.cubic) << 3
            | u8::from(self.input) << 4
    }

    fn from_bits(b: u8) -> Self {
        Self {
            constant: b & 1 != 0,
            linear: b & 2 != 0,
            quadratic: b & 4 != 0,
            cubic: b & 8 != 0,
            input: b & 16 != 0,
        }
    }

    fn any(&self) -> bool {
        self.constant || self.linear || self.quadratic || self.cubic || self.input
    }

    /// Column count of the data matrix for rank `r` and input width `q`.
    pub fn width(&self, r: usize, q: usize) -> usize {
        usize::from(self.constant)
            + if self.linear { r } else { 0 }
            + if self.quadratic { quadratic_width(r) } else { 0 }
            + if self.cubic { cubic_width(r) } else { 0 }
            + if self.input { q } else { 0 }
    }
}

pub fn quadratic_width(r: usize) -> usize {
    r * (r + 1) / 2
}

pub fn cubic_width(r: usize) -> usize {
    r * (r + 1) * (r + 2) / 6
}

/// Unique quadratic monomials `x_i x_j`, `i ≤ j`, lexicographic.
pub fn kron_compressed(x: &[f64]) -> Vec<f64> {
    let r = x.len();
    let mut out = Vec::with_capacity(quadratic_width(r));
    for i in 0..r {
        for j in i..r {
            out.push(x[i] * x[j]);
        }
    }
    out
}

/// Unique cubic monomials `x_i x_j x_k`, `i ≤ j ≤ k`, lexicographic.
pub fn kron3_compressed(x: &[f64]) -> Vec<f64> {
    let r = x.len();
    let mut out = Vec::with_capacity(cubic_width(r));
    for i in 0..r {
        for j in i..r {
            let xij = x[i] * x[j];
            out.extend(x[j..].iter().map(|xk| xij * xk));
        }
    }
    out
}

/// Position of `x_i x_j` in [`kron_compressed`] output.
pub fn quadratic_index(r: usize, i: usize, j: usize) -> usize {
    let (i, j) = if i <= j { (i, j) } else { (j, i) };
    // rows before i contribute r, r-1, ..., r-i+1 entries
    i * r - i * i.saturating_sub(1) / 2 + (j - i)
}

/// Maps each entry of the full `x ⊗ x` (length r²) to its compressed index.
pub fn duplication_map(r: usize) -> Vec<usize> {
    (0..r * r).map(|idx| quadratic_index(r, idx / r, idx % r)).collect()
}

/// Time derivatives by second-order finite differences: central in the
/// interior, one-sided three-point at both ends.
pub fn estimate_derivatives(reduced: &DMatrix<f64>, dt: f64) -> Result<DMatrix<f64>> {
    let m = reduced.ncols();
    if m < 3 {
        return Err(Error::Dimension(format!("need at least 3 columns to differentiate, got {m}")));
    }
    if !(dt > 0.0) {
        return Err(Error::Domain(format!("dt must be positive, got {dt}")));
    }
    let h2 = 2.0 * dt;
    let mut out = DMatrix::zeros(reduced.nrows(), m);
    let c = |k: usize| reduced.column(k);
    out.set_column(0, &((-3.0 * c(0) + 4.0 * c(1) - c(2)) / h2));
    for k in 1..m - 1 {
        out.set_column(k, &((c(k + 1) - c(k - 1)) / h2));
    }
    out.set_column(m - 1, &((3.0 * c(m - 1) - 4.0 * c(m - 2) + c(m - 3)) / h2));
    Ok(out)
}

/// One row per time step: `[1 | xᵀ | (x⊗x)ᵀ | (x⊗x⊗x)ᵀ | uᵀ]` for the selected terms.
pub fn build_data_matrix(
    reduced: &DMatrix<f64>,
    inputs: Option<&DMatrix<f64>>,
    terms: &OperatorTerms,
) -> Result<DMatrix<f64>> {
    if !terms.any() {
        return Err(Error::Config("no operator terms selected".into()));
    }
    let (r, m) = reduced.shape();
    let q = match (terms.input, inputs) {
        (true, Some(u)) => {
            if u.ncols() != m {
                return Err(Error::Dimension(format!(
                    "inputs have {} columns, states {m}",
                    u.ncols()
                )));
            }
            u.nrows()
        }
        (true, None) => return Err(Error::Config("input term selected but no inputs given".into())),
        (false, Some(_)) => return Err(Error::Config("inputs given but input term not selected".into())),
        (false, None) => 0,
    };
    let d = terms.width(r, q);
    let mut out = DMatrix::zeros(m, d);
    let mut row = Vec::with_capacity(d);
    for k in 0..m {
        let x: Vec<f64> = reduced.column(k).iter().copied().collect();
        row.clear();
        if terms.constant {
            row.push(1.0);
        }
        if terms.linear {
            row.extend_from_slice(&x);
        }
        if terms.quadratic {
            row.extend(kron_compressed(&x));
        }
        if terms.cubic {
            row.extend(kron3_compressed(&x));
        }
        if let (true, Some(u)) = (terms.input, inputs) {
            row.extend(u.column(k).iter());
        }
        for (j, v) in row.iter().enumerate() {
            out[(k, j)] = *v;
        }
    }
    Ok(out)
}

/// Tikhonov least squares through one SVD of the data matrix, reusable across
/// regularisation values.
pub struct TikhonovSolver {
    u: DMatrix<f64>,
    sigma: DVector<f64>,
    v_t: DMatrix<f64>,
    cutoff: f64,
}

impl TikhonovSolver {
    pub fn new(d: &DMatrix<f64>) -> Result<Self> {
        if d.nrows() == 0 || d.ncols() == 0 {
            return Err(Error::Dimension("empty data matrix".into()));
        }
        if d.iter().any(|v| !v.is_finite()) {
            return Err(Error::Data("data matrix has non-finite entries".into()));
        }
        let svd = d.clone().svd(true, true);
        let sigma = svd.singular_values;
        let smax = sigma.max();
        let cutoff = smax * f64::EPSILON * d.nrows().max(d.ncols()) as f64;
        Ok(Self {
            u: svd.u.expect("requested"),
            sigma,
            v_t: svd.v_t.expect("requested"),
            cutoff,
        })
    }

    /// argmin ‖D·O − R‖²_F + λ²‖O‖²_F; minimum-norm solution when λ = 0.
    pub fn solve(&self, rhs: &DMatrix<f64>, lambda: f64) -> Result<DMatrix<f64>> {
        if rhs.nrows() != self.u.nrows() {
            return Err(Error::Dimension(format!(
                "targets have {} rows, data matrix {}",
                rhs.nrows(),
                self.u.nrows()
            )));
        }
        if rhs.iter().any(|v| !v.is_finite()) || !(lambda >= 0.0) {
            return Err(Error::Data("non-finite targets or negative regulariser".into()));
        }
        let l2 = lambda * lambda;
        let filter = self.sigma.map(|s| {
            if lambda == 0.0 {
                if s > self.cutoff {
                    1.0 / s
                } else {
                    0.0
                }
            } else {
                s / (s * s + l2)
            }
        });
        let mut projected = self.u.tr_mul(rhs);
        for (mut row, f) in projected.row_iter_mut().zip(filter.iter()) {
            row *= *f;
        }
        Ok(self.v_t.tr_mul(&projected))
    }
}

/// One-shot form of [`TikhonovSolver::solve`].
pub fn solve_tikhonov(d: &DMatrix<f64>, rhs: &DMatrix<f64>, lambda: f64) -> Result<DMatrix<f64>> {
    TikhonovSolver::new(d)?.solve(rhs, lambda)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegularizationConfig {
    /// Candidate λ values, ascending. Ties resolve to the smaller λ.
    pub grid: Vec<f64>,
}

impl Default for RegularizationConfig {
    /// Ten log-spaced values from 1e-6 to 1e3.
    fn default() -> Self {
        Self { grid: (0..10).map(|i| 10f64.powi(i - 6)).collect() }
    }
}

impl RegularizationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.grid.is_empty() {
            return Err(Error::Config("regularisation grid is empty".into()));
        }
        if self.grid.iter().any(|l| !(*l >= 0.0 && l.is_finite())) {
            return Err(Error::Config("regularisation values must be finite and non-negative".into()));
        }
        if self.grid.windows(2).any(|w| w[1] < w[0]) {
            return Err(Error::Config("regularisation grid must be sorted ascending".into()));
        }
        Ok(())
    }
}

/// Fitted reduced model.
#[derive(Debug, Clone, PartialEq)]
pub struct ReducedOperators {
    pub rank: usize,
    pub input_width: usize,
    pub terms: OperatorTerms,
    pub c: Option<DVector<f64>>,
    pub a: Option<DMatrix<f64>>,
    /// r × r(r+1)/2
    pub h: Option<DMatrix<f64>>,
    /// r × C(r+2, 3)
    pub g: Option<DMatrix<f64>>,
    /// r × q
    pub b: Option<DMatrix<f64>>,
    pub lambda: f64,
    pub dt: f64,
}

impl ReducedOperators {
    /// Model with every selected operator zero.
    pub fn zeros(rank: usize, input_width: usize, terms: OperatorTerms, dt: f64) -> Self {
        let r = rank;
        Self {
            rank,
            input_width,
            terms,
            c: terms.constant.then(|| DVector::zeros(r)),
            a: terms.linear.then(|| DMatrix::zeros(r, r)),
            h: terms.quadratic.then(|| DMatrix::zeros(r, quadratic_width(r))),
            g: terms.cubic.then(|| DMatrix::zeros(r, cubic_width(r))),
            b: terms.input.then(|| DMatrix::zeros(r, input_width)),
            lambda: 0.0,
            dt,
        }
    }

    /// Splits a d×r least-squares solution into operator blocks.
    fn from_solution(o: &DMatrix<f64>, rank: usize, q: usize, terms: OperatorTerms, lambda: f64, dt: f64) -> Self {
        let ot = o.transpose();
        let mut col = 0;
        let mut take = |on: bool, w: usize| {
            on.then(|| {
                let block = ot.columns(col, w).into_owned();
                col += w;
                block
            })
        };
        let c = take(terms.constant, 1).map(|m| m.column(0).into_owned());
        let a = take(terms.linear, rank);
        let h = take(terms.quadratic, quadratic_width(rank));
        let g = take(terms.cubic, cubic_width(rank));
        let b = take(terms.input, q);
        Self { rank, input_width: q, terms, c, a, h, g, b, lambda, dt }
    }

    /// Right-hand side c + A x + H(x⊗x) + G(x⊗x⊗x) + B u.
    pub fn rhs(&self, x: &DVector<f64>, u: Option<&DVector<f64>>) -> DVector<f64> {
        let mut out = match &self.c {
            Some(c) => c.clone(),
            None => DVector::zeros(self.rank),
        };
        if let Some(a) = &self.a {
            out.gemv(1.0, a, x, 1.0);
        }
        if let Some(h) = &self.h {
            let q = DVector::from_vec(kron_compressed(x.as_slice()));
            out.gemv(1.0, h, &q, 1.0);
        }
        if let Some(g) = &self.g {
            let cub = DVector::from_vec(kron3_compressed(x.as_slice()));
            out.gemv(1.0, g, &cub, 1.0);
        }
        if let (Some(b), Some(u)) = (&self.b, u) {
            out.gemv(1.0, b, u, 1.0);
        }
        out
    }

    pub fn is_finite(&self) -> bool {
        let m = |o: &Option<DMatrix<f64>>| o.as_ref().is_none_or(|m| m.iter().all(|v| v.is_finite()));
        self.c.as_ref().is_none_or(|c| c.iter().all(|v| v.is_finite()))
            && m(&self.a)
            && m(&self.h)
            && m(&self.g)
            && m(&self.b)
    }
}

/// Time-dependent forcing for the B term.
pub trait InputSignal: Sync {
    fn width(&self) -> usize;
    fn value(&self, t: f64) -> DVector<f64>;
}

/// Uniformly sampled input table with linear interpolation. Past the last
/// sample the table repeats with the given period; without one it holds the
/// last value. Before the first sample it holds the first value.
#[derive(Debug, Clone, PartialEq)]
pub struct TabulatedInput {
    pub t0: f64,
    pub dt: f64,
    pub values: DMatrix<f64>,
    pub period: Option<f64>,
}

impl InputSignal for TabulatedInput {
    fn width(&self) -> usize {
        self.values.nrows()
    }

    fn value(&self, t: f64) -> DVector<f64> {
        let n = self.values.ncols();
        let t_end = self.t0 + (n - 1) as f64 * self.dt;
        let mut t = t;
        if t > t_end {
            if let Some(p) = self.period {
                t -= ((t - t_end) / p).ceil() * p;
            }
        }
        let s = ((t - self.t0) / self.dt).clamp(0.0, (n - 1) as f64);
        let k = (s.floor() as usize).min(n.saturating_sub(2));
        if n == 1 {
            return self.values.column(0).into_owned();
        }
        let w = s - k as f64;
        self.values.column(k) * (1.0 - w) + self.values.column(k + 1) * w
    }
}

/// Closure-backed input signal.
pub struct FnInput<F: Fn(f64) -> DVector<f64> + Sync> {
    pub width: usize,
    pub f: F,
}

impl<F: Fn(f64) -> DVector<f64> + Sync> InputSignal for FnInput<F> {
    fn width(&self) -> usize {
        self.width
    }

    fn value(&self, t: f64) -> DVector<f64> {
        (self.f)(t)
    }
}

/// Fits operators at a single λ from states and their time derivatives.
pub fn fit_operators(
    states: &DMatrix<f64>,
    derivatives: &DMatrix<f64>,
    inputs: Option<&DMatrix<f64>>,
    terms: &OperatorTerms,
    lambda: f64,
    dt: f64,
) -> Result<ReducedOperators> {
    let d = build_data_matrix(states, inputs, terms)?;
    let solver = TikhonovSolver::new(&d)?;
    let q = inputs.map_or(0, |u| u.nrows());
    let o = solver.solve(&derivatives.transpose(), lambda)?;
    Ok(ReducedOperators::from_solution(&o, states.nrows(), q, *terms, lambda, dt))
}

/// Validation score of one λ; `None` when the rollout diverged.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LambdaScore {
    pub lambda: f64,
    pub rmse: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct OpInfFit {
    pub operators: ReducedOperators,
    pub sweep: Vec<LambdaScore>,
}

/// Picks the index with minimal score; ties within 1e-12 go to the earlier
/// (smaller λ) entry.
pub(crate) fn argmin_with_ties(scores: &[Option<f64>]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, s) in scores.iter().enumerate() {
        if let Some(s) = *s {
            match best {
                Some((_, b)) if s >= b - 1e-12 => {}
                _ => best = Some((i, s)),
            }
        }
    }
    best.map(|(i, _)| i)
}

fn rmse_all(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    ((a - b).norm_squared() / (a.len().max(1)) as f64).sqrt()
}

/// Fits on the training window for every λ, rolls each model across the
/// validation window from the last training state and returns the model with
/// the lowest validation RMSE.
#[allow(clippy::too_many_arguments)]
pub fn fit_opinf(
    train_reduced: &DMatrix<f64>,
    val_reduced: &DMatrix<f64>,
    train_inputs: Option<&DMatrix<f64>>,
    input_signal: Option<&dyn InputSignal>,
    terms: &OperatorTerms,
    reg: &RegularizationConfig,
    dt: f64,
    t_last_train: f64,
) -> Result<OpInfFit> {
    reg.validate()?;
    if train_reduced.ncols() < 3 {
        return Err(Error::Dimension("training window needs at least 3 columns".into()));
    }
    if val_reduced.ncols() < 1 || val_reduced.nrows() != train_reduced.nrows() {
        return Err(Error::Dimension("validation window is empty or has the wrong rank".into()));
    }
    if terms.input && input_signal.is_none() {
        return Err(Error::Config("input term selected but no input signal for rollout".into()));
    }
    let derivs = estimate_derivatives(train_reduced, dt)?;
    let d = build_data_matrix(train_reduced, train_inputs, terms)?;
    let solver = TikhonovSolver::new(&d)?;
    let rhs = derivs.transpose();
    let q = train_inputs.map_or(0, |u| u.nrows());
    let r = train_reduced.nrows();
    let x0 = train_reduced.column(train_reduced.ncols() - 1).into_owned();
    let n_val = val_reduced.ncols();

    let candidates: Vec<(Option<ReducedOperators>, LambdaScore)> = reg
        .grid
        .par_iter()
        .map(|&lambda| {
            let ops = solver
                .solve(&rhs, lambda)
                .map(|o| ReducedOperators::from_solution(&o, r, q, *terms, lambda, dt));
            let ops = match ops {
                Ok(ops) if ops.is_finite() => ops,
                _ => return (None, LambdaScore { lambda, rmse: None }),
            };
            let score = rollout(&ops, &x0, t_last_train, input_signal, n_val, DEFAULT_BLOCK)
                .ok()
                .map(|pred| rmse_all(&pred, val_reduced))
                .filter(|s| s.is_finite());
            (Some(ops), LambdaScore { lambda, rmse: score })
        })
        .collect();

    let scores: Vec<Option<f64>> = candidates.iter().map(|c| c.1.rmse).collect();
    let sweep: Vec<LambdaScore> = candidates.iter().map(|c| c.1).collect();
    let Some(best) = argmin_with_ties(&scores) else {
        let status: Vec<String> = sweep
            .iter()
            .map(|s| format!("λ={:e}: diverged", s.lambda))
            .collect();
        return Err(Error::FitFailure(format!(
            "every regularisation value diverged on validation ({})",
            status.join(", ")
        )));
    };
    let operators = candidates
        .into_iter()
        .nth(best)
        .and_then(|c| c.0)
        .expect("scored candidates have operators");
    Ok(OpInfFit { operators, sweep })
}

/// Refits at a fixed λ on a (longer) window, estimating derivatives from it.
pub fn refit_opinf(
    reduced: &DMatrix<f64>,
    inputs: Option<&DMatrix<f64>>,
    terms: &OperatorTerms,
    lambda: f64,
    dt: f64,
) -> Result<ReducedOperators> {
    let derivs = estimate_derivatives(reduced, dt)?;
    fit_operators(reduced, &derivs, inputs, terms, lambda, dt)
}

fn rk4_step(
    ops: &ReducedOperators,
    x: &DVector<f64>,
    t: f64,
    h: f64,
    input: Option<&dyn InputSignal>,
) -> DVector<f64> {
    let u = |s: f64| input.map(|i| i.value(s));
    let u0 = u(t);
    let um = u(t + 0.5 * h);
    let u1 = u(t + h);
    let k1 = ops.rhs(x, u0.as_ref());
    let k2 = ops.rhs(&(x + &k1 * (0.5 * h)), um.as_ref());
    let k3 = ops.rhs(&(x + &k2 * (0.5 * h)), um.as_ref());
    let k4 = ops.rhs(&(x + &k3 * h), u1.as_ref());
    x + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0)
}

/// Classical RK4 rollout at the model's Δt, emitted in blocks of `block`
/// steps; each block starts from the previous block's last emitted state.
/// Column k holds the state at `t0 + (k+1)·Δt`.
pub fn rollout(
    ops: &ReducedOperators,
    x0: &DVector<f64>,
    t0: f64,
    input: Option<&dyn InputSignal>,
    n_steps: usize,
    block: usize,
) -> Result<DMatrix<f64>> {
    if x0.len() != ops.rank {
        return Err(Error::Dimension(format!(
            "initial state has {} entries, model rank is {}",
            x0.len(),
            ops.rank
        )));
    }
    if block == 0 {
        return Err(Error::Config("block size must be at least 1".into()));
    }
    if ops.terms.input && input.is_none() {
        return Err(Error::Config("model has an input operator but no input signal".into()));
    }
    let h = ops.dt;
    let mut out = DMatrix::zeros(ops.rank, n_steps);
    let mut seed = x0.clone();
    let mut k = 0;
    while k < n_steps {
        let len = block.min(n_steps - k);
        let mut x = seed.clone();
        for _ in 0..len {
            let t = t0 + k as f64 * h;
            x = rk4_step(ops, &x, t, h, input);
            if x.iter().any(|v| !v.is_finite()) {
                return Err(Error::RolloutDivergence { step: k + 1 });
            }
            out.set_column(k, &x);
            k += 1;
        }
        seed = out.column(k - 1).into_owned();
    }
    Ok(out)
}

/// Projects the last history column, rolls out `n_steps` and lifts the result
/// back to the full (scaled) state; `raw_values()` on the result undoes the
/// scaling.
pub fn forecast_full(
    ops: &ReducedOperators,
    basis: &PodBasis,
    history: &SnapshotMatrix,
    n_steps: usize,
    input: Option<&dyn InputSignal>,
    block: usize,
) -> Result<SnapshotMatrix> {
    let last = history
        .last_column()
        .ok_or_else(|| Error::Dimension("history is empty".into()))?;
    let x0 = project_vector(basis, &last)?;
    let reduced = rollout(ops, &x0, history.last_time(), input, n_steps, block)?;
    reconstruct(basis, &reduced, history.last_time() + history.dt(), history.dt())
}

pub fn write_opi1(ops: &ReducedOperators) -> Result<Vec<u8>> {
    let mut w = Writer::new();
    w.magic(MAGIC);
    w.u32(to_u32(ops.rank, "rank")?);
    w.u32(to_u32(ops.input_width, "input width")?);
    w.u8(ops.terms.bits());
    w.f64(ops.lambda);
    w.f64(ops.dt);
    match &ops.c {
        Some(c) => {
            w.u8(1);
            w.f64s(c.as_slice());
        }
        None => w.u8(0),
    }
    for block in [&ops.a, &ops.h, &ops.g, &ops.b] {
        match block {
            Some(m) => {
                w.u8(1);
                w.matrix(m);
            }
            None => w.u8(0),
        }
    }
    Ok(w.finish())
}

pub fn read_opi1(bytes: &[u8]) -> Result<ReducedOperators> {
    let mut rd = Reader::new("OPI1", bytes);
    rd.expect_magic(MAGIC)?;
    let r = rd.u32()? as usize;
    let q = rd.u32()? as usize;
    let terms = OperatorTerms::from_bits(rd.u8()?);
    let lambda = rd.f64()?;
    let dt = rd.f64()?;
    let present = |rd: &mut Reader, expected: bool, name: &str| -> Result<bool> {
        let p = rd.u8()? != 0;
        if p != expected {
            return Err(Error::Format(format!("OPI1 presence byte for {name} disagrees with flags")));
        }
        Ok(p)
    };
    let c = if present(&mut rd, terms.constant, "c")? {
        Some(DVector::from_vec(rd.f64s(r)?))
    } else {
        None
    };
    let a = if present(&mut rd, terms.linear, "A")? { Some(rd.matrix(r, r)?) } else { None };
    let h = if present(&mut rd, terms.quadratic, "H")? {
        Some(rd.matrix(r, quadratic_width(r))?)
    } else {
        None
    };
    let g = if present(&mut rd, terms.cubic, "G")? {
        Some(rd.matrix(r, cubic_width(r))?)
    } else {
        None
    };
    let b = if present(&mut rd, terms.input, "B")? { Some(rd.matrix(r, q)?) } else { None };
    rd.finish()?;
    Ok(ReducedOperators { rank: r, input_width: q, terms, c, a, h, g, b, lambda, dt })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(n: usize, m: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        DMatrix::from_fn(n, m, |_, _| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn kron_examples() {
        assert_eq!(kron_compressed(&[2.0]), vec![4.0]);
        assert_eq!(kron_compressed(&[1.0, 2.0]), vec![1.0, 2.0, 4.0]);
        assert_eq!(kron3_compressed(&[1.0, 2.0]), vec![1.0, 2.0, 4.0, 8.0]);
        assert_eq!(cubic_width(4), 20);
        assert_eq!(quadratic_width(30), 465);
    }

    #[test]
    fn duplication_map_recovers_full_kronecker() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for r in 1..=6 {
            let map = duplication_map(r);
            for _ in 0..100 {
                let x: Vec<f64> = (0..r).map(|_| rng.random_range(-2.0..2.0)).collect();
                let compressed = kron_compressed(&x);
                for i in 0..r {
                    for j in 0..r {
                        assert_eq!(compressed[map[i * r + j]], x[i] * x[j]);
                    }
                }
            }
        }
    }

    #[test]
    fn derivatives_of_linear_and_quadratic_signals() {
        let dt = 0.1;
        let lin = DMatrix::from_fn(2, 7, |i, k| (i as f64 + 1.5) * k as f64 * dt);
        let d = estimate_derivatives(&lin, dt).unwrap();
        for k in 0..7 {
            assert!((d[(0, k)] - 1.5).abs() < 1e-12 && (d[(1, k)] - 2.5).abs() < 1e-12);
        }
        let quad = DMatrix::from_fn(1, 9, |_, k| (k as f64 * dt).powi(2));
        let d = estimate_derivatives(&quad, dt).unwrap();
        for k in 0..9 {
            assert!((d[(0, k)] - 2.0 * k as f64 * dt).abs() < 1e-10);
        }
        assert!(matches!(estimate_derivatives(&DMatrix::zeros(1, 2), dt), Err(Error::Dimension(_))));
    }

    #[test]
    fn derivative_error_is_second_order() {
        let err = |dt: f64| {
            let n = (2.0 / dt) as usize;
            let x = DMatrix::from_fn(1, n, |_, k| (k as f64 * dt).sin());
            let d = estimate_derivatives(&x, dt).unwrap();
            (0..n).map(|k| (d[(0, k)] - (k as f64 * dt).cos()).abs()).fold(0.0, f64::max)
        };
        let ratio = err(0.02) / err(0.01);
        assert!((ratio - 4.0).abs() < 0.4, "{ratio}");
    }

    #[test]
    fn data_matrix_widths() {
        let x = random(2, 5, 1);
        let t = OperatorTerms { constant: true, linear: true, quadratic: false, cubic: false, input: false };
        assert_eq!(build_data_matrix(&x, None, &t).unwrap().shape(), (5, 3));
        let x = random(3, 5, 2);
        let u = random(1, 5, 3);
        let t = OperatorTerms { input: true, ..OperatorTerms::default() };
        assert_eq!(build_data_matrix(&x, Some(&u), &t).unwrap().shape(), (5, 11));
        assert!(matches!(build_data_matrix(&x, None, &t), Err(Error::Config(_))));
    }

    #[test]
    fn data_matrix_blocks_match_monomials() {
        let x = random(3, 6, 4);
        let u = random(2, 6, 5);
        let t = OperatorTerms { cubic: true, input: true, ..OperatorTerms::default() };
        let d = build_data_matrix(&x, Some(&u), &t).unwrap();
        for k in 0..6 {
            let (a, b, c) = (x[(0, k)], x[(1, k)], x[(2, k)]);
            assert_eq!(d[(k, 0)], 1.0);
            assert_eq!(d[(k, 3)], c);
            // quadratic block starts at 4: aa ab ac bb bc cc
            assert_eq!(d[(k, 5)], a * b);
            assert_eq!(d[(k, 9)], c * c);
            // cubic block starts at 10: aaa aab aac abb abc acc bbb ...
            assert_eq!(d[(k, 14)], a * b * c);
            assert_eq!(d[(k, 19)], c * c * c);
            assert_eq!(d[(k, 20)], u[(0, k)]);
            assert_eq!(d[(k, 21)], u[(1, k)]);
        }
    }

    #[test]
    fn tikhonov_identity_cases() {
        let i3 = DMatrix::<f64>::identity(3, 3);
        assert!((solve_tikhonov(&i3, &i3, 0.0).unwrap() - &i3).amax() < 1e-15);
        assert!((solve_tikhonov(&i3, &i3, 1.0).unwrap() - &i3 * 0.5).amax() < 1e-15);
    }

    #[test]
    fn tikhonov_min_norm_for_rank_deficient() {
        // duplicated column: min-norm splits the weight evenly
        let d = DMatrix::from_row_slice(3, 2, &[1.0, 1.0, 2.0, 2.0, 3.0, 3.0]);
        let r = DMatrix::from_column_slice(3, 1, &[2.0, 4.0, 6.0]);
        let o = solve_tikhonov(&d, &r, 0.0).unwrap();
        assert!((o[(0, 0)] - 1.0).abs() < 1e-12 && (o[(1, 0)] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn tikhonov_rejects_non_finite() {
        let mut d = DMatrix::<f64>::identity(2, 2);
        d[(0, 1)] = f64::NAN;
        assert!(matches!(solve_tikhonov(&d, &d, 0.0), Err(Error::Data(_))));
    }

    #[test]
    fn tie_break_prefers_first() {
        assert_eq!(argmin_with_ties(&[Some(1.0), Some(1.0 - 1e-13), Some(2.0)]), Some(0));
        assert_eq!(argmin_with_ties(&[None, Some(3.0), Some(1.0)]), Some(2));
        assert_eq!(argmin_with_ties(&[None, None]), None);
    }

    #[test]
    fn zero_operators_hold_state() {
        let ops = ReducedOperators::zeros(3, 0, OperatorTerms::default(), 0.01);
        let x0 = DVector::from_vec(vec![1.0, -2.0, 0.5]);
        let traj = rollout(&ops, &x0, 0.0, None, 25, 10).unwrap();
        for col in traj.column_iter() {
            assert_eq!(col, x0.column(0));
        }
    }

    #[test]
    fn scalar_decay_matches_exponential() {
        let mut ops = ReducedOperators::zeros(1, 0, OperatorTerms::default(), 0.002);
        ops.a = Some(DMatrix::from_element(1, 1, -1.0));
        let traj = rollout(&ops, &DVector::from_element(1, 1.0), 0.0, None, 400, 10).unwrap();
        for (n, v) in traj.iter().enumerate() {
            assert!((v - (-(n as f64 + 1.0) * 0.002).exp()).abs() < 1e-8);
        }
    }

    #[test]
    fn rollout_divergence_reports_step() {
        let mut ops = ReducedOperators::zeros(1, 0, OperatorTerms::default(), 0.1);
        ops.h = Some(DMatrix::from_element(1, 1, 1.0));
        let err = rollout(&ops, &DVector::from_element(1, 10.0), 0.0, None, 1000, 10).unwrap_err();
        match err {
            Error::RolloutDivergence { step } => assert!(step > 1 && step < 1000),
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn input_forcing_integrates() {
        // dx/dt = u(t) = cos t → x = sin t
        let terms = OperatorTerms { constant: false, linear: false, quadratic: false, cubic: false, input: true };
        let mut ops = ReducedOperators::zeros(1, 1, terms, 0.01);
        ops.b = Some(DMatrix::from_element(1, 1, 1.0));
        let sig = FnInput { width: 1, f: |t: f64| DVector::from_element(1, t.cos()) };
        let traj = rollout(&ops, &DVector::zeros(1), 0.0, Some(&sig), 100, 10).unwrap();
        assert!((traj[(0, 99)] - 1.0_f64.sin()).abs() < 1e-10);
    }

    #[test]
    fn tabulated_input_interpolates_and_repeats() {
        let tab = TabulatedInput {
            t0: 0.0,
            dt: 1.0,
            values: DMatrix::from_row_slice(1, 5, &[0.0, 1.0, 0.0, -1.0, 0.0]),
            period: Some(4.0),
        };
        assert_eq!(tab.value(0.5)[0], 0.5);
        assert_eq!(tab.value(5.0)[0], 1.0);
        assert_eq!(tab.value(7.5)[0], -0.5);
        let hold = TabulatedInput { period: None, ..tab };
        assert_eq!(hold.value(9.0)[0], 0.0);
        assert_eq!(hold.value(-1.0)[0], 0.0);
    }

    #[test]
    fn constant_data_selects_smallest_lambda() {
        let x = DMatrix::from_fn(2, 40, |i, _| if i == 0 { 0.7 } else { -0.2 });
        let val = x.columns(0, 5).into_owned();
        let train = x.columns(5, 35).into_owned();
        let fit = fit_opinf(&train, &val, None, None, &OperatorTerms::default(), &RegularizationConfig::default(), 0.01, 0.0).unwrap();
        assert_eq!(fit.operators.lambda, 1e-6);
        let ops = &fit.operators;
        let xbar = DVector::from_vec(vec![0.7, -0.2]);
        assert!(ops.rhs(&xbar, None).amax() < 1e-10);
    }

    #[test]
    fn opi1_round_trip() {
        let terms = OperatorTerms { cubic: true, input: true, ..OperatorTerms::default() };
        let mut ops = ReducedOperators::zeros(3, 2, terms, 0.002);
        ops.lambda = 0.5;
        ops.h = Some(random(3, 6, 9));
        ops.b = Some(random(3, 2, 10));
        let bytes = write_opi1(&ops).unwrap();
        assert_eq!(&bytes[..4], b"OPI1");
        assert_eq!(read_opi1(&bytes).unwrap(), ops);
        assert!(read_opi1(&bytes[..bytes.len() - 1]).is_err());
    }
}
