//! Proper orthogonal decomposition of snapshot matrices.
//!
//! The basis is the set of left singular vectors of the mean-centred training
//! snapshots. Each mode is sign-normalised so that its largest-magnitude
//! entry is positive, which makes repeated fits comparable entry by entry.

use nalgebra::{DMatrix, DVector};
use sha2::{Digest, Sha256};

use crate::binio::{to_u32, Reader, Writer};
use crate::error::{Error, Result};
use crate::field_data::{FieldLayout, SnapshotMatrix};

const MAGIC: &[u8; 4] = b"POD1";

/// Energy fraction used for automatic rank selection.
pub const DEFAULT_ENERGY_THRESHOLD: f64 = 0.9982;
/// Upper bound on automatically selected ranks.
pub const DEFAULT_MAX_RANK: usize = 30;

#[derive(Debug, Clone, PartialEq)]
pub struct PodBasis {
    mean: DVector<f64>,
    /// Retained modes only (`n_state × rank`).
    modes: DMatrix<f64>,
    /// Full spectrum, non-increasing.
    singular_values: Vec<f64>,
    energy_captured: f64,
    layout: Option<FieldLayout>,
}

impl PodBasis {
    /// Assembles a basis from its parts. `singular_values` is the full
    /// descending spectrum; `modes` holds the retained leading columns.
    pub fn new(mean: DVector<f64>, modes: DMatrix<f64>, singular_values: Vec<f64>) -> Result<Self> {
        if modes.nrows() != mean.len() || modes.ncols() == 0 || modes.ncols() > singular_values.len() {
            return Err(Error::Dimension(format!(
                "modes are {}x{}, mean has {} entries, {} singular values",
                modes.nrows(),
                modes.ncols(),
                mean.len(),
                singular_values.len()
            )));
        }
        if singular_values.iter().any(|s| !(*s >= 0.0 && s.is_finite()))
            || singular_values.windows(2).any(|w| w[1] > w[0])
        {
            return Err(Error::Domain("singular values must be finite, non-negative and descending".into()));
        }
        Ok(Self::from_parts(mean, modes, singular_values, None))
    }

    fn from_parts(
        mean: DVector<f64>,
        modes: DMatrix<f64>,
        singular_values: Vec<f64>,
        layout: Option<FieldLayout>,
    ) -> Self {
        let energy_captured = cumulative_energy(&singular_values, modes.ncols());
        Self { mean, modes, singular_values, energy_captured, layout }
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn modes(&self) -> &DMatrix<f64> {
        &self.modes
    }

    pub fn singular_values(&self) -> &[f64] {
        &self.singular_values
    }

    pub fn rank(&self) -> usize {
        self.modes.ncols()
    }

    pub fn n_state(&self) -> usize {
        self.mean.len()
    }

    pub fn energy_captured(&self) -> f64 {
        self.energy_captured
    }

    pub fn layout(&self) -> Option<&FieldLayout> {
        self.layout.as_ref()
    }

    pub fn with_layout(mut self, layout: FieldLayout) -> Result<Self> {
        if layout.n_state() != self.n_state() {
            return Err(Error::Dimension(format!(
                "layout has {} rows, basis {}",
                layout.n_state(),
                self.n_state()
            )));
        }
        self.layout = Some(layout);
        Ok(self)
    }

    /// Keeps the leading `rank` modes.
    pub fn truncated(&self, rank: usize) -> Result<Self> {
        if rank == 0 || rank > self.rank() {
            return Err(Error::Dimension(format!(
                "rank {rank} outside 1..={}",
                self.rank()
            )));
        }
        Ok(Self::from_parts(
            self.mean.clone(),
            self.modes.columns(0, rank).into_owned(),
            self.singular_values.clone(),
            self.layout.clone(),
        ))
    }

    /// Energy fraction captured by the leading `rank` modes.
    pub fn energy_at(&self, rank: usize) -> f64 {
        cumulative_energy(&self.singular_values, rank)
    }

    /// Max |modesᵀ·modes − I|.
    pub fn orthonormality_defect(&self) -> f64 {
        let gram = self.modes.transpose() * &self.modes;
        let r = self.rank();
        (gram - DMatrix::<f64>::identity(r, r)).abs().max()
    }

    /// SHA-256 of the POD1 encoding, hex.
    pub fn fingerprint(&self) -> String {
        let bytes = write_pod1(self).expect("basis dimensions fit the container");
        hex::encode(Sha256::digest(&bytes))
    }
}

fn cumulative_energy(sigma: &[f64], rank: usize) -> f64 {
    let total: f64 = sigma.iter().map(|s| s * s).sum();
    if total == 0.0 {
        return 0.0;
    }
    sigma.iter().take(rank).map(|s| s * s).sum::<f64>() / total
}

/// Fits the POD basis at maximal rank (`min(n_state, n_times)` modes).
pub fn fit_basis(train: &SnapshotMatrix) -> Result<PodBasis> {
    let basis = fit_basis_matrix(train.values())?;
    basis.with_layout(train.layout().clone())
}

/// [`fit_basis`] on a bare column-per-snapshot matrix.
pub fn fit_basis_matrix(x: &DMatrix<f64>) -> Result<PodBasis> {
    let (n, m) = x.shape();
    if m < 2 {
        return Err(Error::Dimension(format!("need at least 2 snapshots, got {m}")));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::Data("snapshots contain non-finite values".into()));
    }
    let mean = x.column_mean();
    let mut centered = x.clone();
    for mut col in centered.column_iter_mut() {
        col -= &mean;
    }
    let svd = centered.svd(true, false);
    let u = svd.u.expect("left singular vectors requested");
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&i, &j| svd.singular_values[j].total_cmp(&svd.singular_values[i]));
    let sigma: Vec<f64> = order.iter().map(|&i| svd.singular_values[i]).collect();

    let scale = x.abs().max().max(1.0);
    if sigma[0] <= 1e-12 * scale * ((n * m) as f64).sqrt() {
        return Err(Error::DegenerateData(
            "all snapshots are identical; the centred data has rank 0".into(),
        ));
    }

    let mut modes = DMatrix::zeros(n, order.len());
    for (k, &i) in order.iter().enumerate() {
        let mut col = u.column(i).into_owned();
        let mut pivot = 0;
        for (r, v) in col.iter().enumerate() {
            if v.abs() > col[pivot].abs() {
                pivot = r;
            }
        }
        if col[pivot] < 0.0 {
            col.neg_mut();
        }
        modes.set_column(k, &col);
    }
    Ok(PodBasis::from_parts(mean, modes, sigma, None))
}

/// Smallest rank whose cumulative energy reaches `threshold`.
pub fn select_rank(basis: &PodBasis, threshold: f64) -> Result<usize> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::Domain(format!("energy threshold must lie in (0, 1), got {threshold}")));
    }
    let sigma = &basis.singular_values;
    let total: f64 = sigma.iter().map(|s| s * s).sum();
    let mut acc = 0.0;
    for (i, s) in sigma.iter().enumerate() {
        acc += s * s;
        if acc / total >= threshold {
            return Ok(i + 1);
        }
    }
    Ok(sigma.len())
}

/// Rank policy: energy threshold capped at `max_rank`, or a fixed rank.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RankPolicy {
    Energy { threshold: f64, max_rank: usize },
    Fixed(usize),
}

impl Default for RankPolicy {
    fn default() -> Self {
        RankPolicy::Energy {
            threshold: DEFAULT_ENERGY_THRESHOLD,
            max_rank: DEFAULT_MAX_RANK,
        }
    }
}

impl RankPolicy {
    pub fn apply(&self, full: &PodBasis) -> Result<PodBasis> {
        let r = match *self {
            RankPolicy::Energy { threshold, max_rank } => select_rank(full, threshold)?.min(max_rank).max(1),
            RankPolicy::Fixed(r) => r,
        };
        full.truncated(r.min(full.rank()))
    }
}

/// Reduced coordinates modesᵀ·(X − mean).
pub fn project(basis: &PodBasis, data: &SnapshotMatrix) -> Result<DMatrix<f64>> {
    project_matrix(basis, data.values())
}

pub fn project_matrix(basis: &PodBasis, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if x.nrows() != basis.n_state() {
        return Err(Error::Dimension(format!(
            "data has {} rows, basis {}",
            x.nrows(),
            basis.n_state()
        )));
    }
    let mut centered = x.clone();
    for mut col in centered.column_iter_mut() {
        col -= &basis.mean;
    }
    Ok(basis.modes.tr_mul(&centered))
}

pub fn project_vector(basis: &PodBasis, x: &DVector<f64>) -> Result<DVector<f64>> {
    if x.len() != basis.n_state() {
        return Err(Error::Dimension(format!(
            "state has {} entries, basis {}",
            x.len(),
            basis.n_state()
        )));
    }
    Ok(basis.modes.tr_mul(&(x - &basis.mean)))
}

/// mean + modes·reduced, as a bare matrix.
pub fn reconstruct_values(basis: &PodBasis, reduced: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if reduced.nrows() != basis.rank() {
        return Err(Error::Dimension(format!(
            "reduced data has {} rows, basis rank is {}",
            reduced.nrows(),
            basis.rank()
        )));
    }
    let mut out = &basis.modes * reduced;
    for mut col in out.column_iter_mut() {
        col += &basis.mean;
    }
    Ok(out)
}

/// Lifts reduced coordinates back to a snapshot matrix on the time axis
/// `t0 + k·dt`, using the layout recorded at fit time.
pub fn reconstruct(basis: &PodBasis, reduced: &DMatrix<f64>, t0: f64, dt: f64) -> Result<SnapshotMatrix> {
    let layout = basis
        .layout
        .clone()
        .ok_or_else(|| Error::Config("basis carries no field layout".into()))?;
    SnapshotMatrix::with_spacing(layout, t0, dt, reconstruct_values(basis, reduced)?)
}

/// Principal angles (degrees, non-decreasing) between the spans of two bases.
///
/// Cosines come from the singular values of Aᵀ·B and sines from those of
/// B − A·(Aᵀ·B); small angles are taken from the sines, where arccos loses
/// precision.
pub fn subspace_shift(a: &PodBasis, b: &PodBasis) -> Result<Vec<f64>> {
    if a.n_state() != b.n_state() || a.rank() != b.rank() {
        return Err(Error::Dimension(format!(
            "bases differ in shape: {}×{} vs {}×{}",
            a.n_state(),
            a.rank(),
            b.n_state(),
            b.rank()
        )));
    }
    principal_angles(&a.modes, &b.modes)
}

pub(crate) fn principal_angles(qa: &DMatrix<f64>, qb: &DMatrix<f64>) -> Result<Vec<f64>> {
    let cross = qa.tr_mul(qb);
    let mut cos: Vec<f64> = cross
        .singular_values()
        .iter()
        .map(|c| c.clamp(0.0, 1.0))
        .collect();
    cos.sort_by(|x, y| y.total_cmp(x));
    let residual = qb - qa * &cross;
    let mut sin: Vec<f64> = residual
        .singular_values()
        .iter()
        .map(|s| s.clamp(0.0, 1.0))
        .collect();
    sin.sort_by(|x, y| x.total_cmp(y));
    let r = qa.ncols();
    sin.resize(r, 0.0);
    let mut angles: Vec<f64> = cos
        .iter()
        .zip(&sin)
        .map(|(&c, &s)| {
            let theta = if c * c >= 0.5 { s.asin() } else { c.acos() };
            theta.to_degrees()
        })
        .collect();
    angles.sort_by(f64::total_cmp);
    Ok(angles)
}

pub fn write_pod1(basis: &PodBasis) -> Result<Vec<u8>> {
    let mut w = Writer::new();
    w.magic(MAGIC);
    w.u32(to_u32(basis.n_state(), "n_state")?);
    w.u32(to_u32(basis.rank(), "rank")?);
    w.u32(to_u32(basis.singular_values.len(), "n_sigma")?);
    w.f64s(&basis.singular_values);
    w.f64s(basis.mean.as_slice());
    w.matrix(&basis.modes);
    Ok(w.finish())
}

pub fn read_pod1(bytes: &[u8]) -> Result<PodBasis> {
    let mut r = Reader::new("POD1", bytes);
    r.expect_magic(MAGIC)?;
    let n = r.u32()? as usize;
    let rank = r.u32()? as usize;
    let n_sigma = r.u32()? as usize;
    let expected = 16 + 8 * (n_sigma + n + n * rank);
    if expected != bytes.len() {
        return Err(Error::Format(format!(
            "POD1 file length mismatch: expected {expected} bytes, found {}",
            bytes.len()
        )));
    }
    if rank == 0 || rank > n_sigma {
        return Err(Error::Format(format!("POD1 rank {rank} inconsistent with {n_sigma} singular values")));
    }
    let sigma = r.f64s(n_sigma)?;
    let mean = DVector::from_vec(r.f64s(n)?);
    let modes = r.matrix(n, rank)?;
    r.finish()?;
    Ok(PodBasis::from_parts(mean, modes, sigma, None))
}
