//! Ulam discretization of transfer (Frobenius–Perron) and Koopman operators
//! on a uniform box grid.
//!
//! Densities are piecewise constant: one value per cell, in units of
//! 1/volume. An [`UlamMatrix`] row `i` holds the fractions of cell `i`'s
//! sample points that land in each cell after one application of the map;
//! whatever leaves the box is booked as leakage for that row.

use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TransferError {
    #[error("invalid partition: {0}")]
    InvalidPartition(String),
    #[error("invalid density: {0}")]
    InvalidDensity(String),
    #[error("invalid observable: {0}")]
    InvalidObservable(String),
    #[error("operands live on different partitions or have different lengths")]
    PartitionMismatch,
    #[error("mass escapes the domain: cell {cell} leaks {leakage:.4} (tolerance {tolerance})")]
    DomainEscape {
        cell: usize,
        leakage: f64,
        tolerance: f64,
    },
    #[error("trajectory left the domain at step {step}")]
    TrajectoryEscape { step: usize },
    #[error("no mass left to renormalize")]
    ZeroMass,
    #[error("stationary iteration did not converge after {iterations} iterations (last residual {residual:.3e})")]
    NonConvergence { iterations: usize, residual: f64 },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

type Result<T> = std::result::Result<T, TransferError>;

/// Leakage above which an operator is rejected unless configured otherwise.
pub const DEFAULT_LEAK_TOL: f64 = 0.05;

/// Uniform grid over the compact box `[lower, upper]`.
///
/// Cells are numbered row-major: the last axis varies fastest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Partition {
    lower: Vec<f64>,
    upper: Vec<f64>,
    cells_per_axis: Vec<usize>,
    #[serde(skip)]
    widths: Vec<f64>,
    #[serde(skip)]
    strides: Vec<usize>,
    cell_volume: f64,
    cell_count: usize,
}

impl Partition {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>, cells_per_axis: Vec<usize>) -> Result<Self> {
        let d = lower.len();
        if d == 0 || upper.len() != d || cells_per_axis.len() != d {
            return Err(TransferError::InvalidPartition(
                "lower, upper and cells_per_axis must have the same positive length".into(),
            ));
        }
        for k in 0..d {
            if !(lower[k].is_finite() && upper[k].is_finite() && lower[k] < upper[k]) {
                return Err(TransferError::InvalidPartition(format!(
                    "axis {k}: lower ({}) must be < upper ({})",
                    lower[k], upper[k]
                )));
            }
            if cells_per_axis[k] == 0 {
                return Err(TransferError::InvalidPartition(format!(
                    "axis {k}: cell count must be positive"
                )));
            }
        }
        let widths: Vec<f64> = (0..d)
            .map(|k| (upper[k] - lower[k]) / cells_per_axis[k] as f64)
            .collect();
        let mut strides = vec![1; d];
        for k in (0..d.saturating_sub(1)).rev() {
            strides[k] = strides[k + 1] * cells_per_axis[k + 1];
        }
        let cell_count = cells_per_axis.iter().product();
        let cell_volume = widths.iter().product();
        Ok(Self {
            lower,
            upper,
            cells_per_axis,
            widths,
            strides,
            cell_volume,
            cell_count,
        })
    }

    /// One-dimensional interval split into `cells` equal pieces.
    pub fn interval(lower: f64, upper: f64, cells: usize) -> Result<Self> {
        Self::new(vec![lower], vec![upper], vec![cells])
    }

    /// Rebuilds the derived fields after deserialization.
    pub fn revalidate(self) -> Result<Self> {
        Self::new(self.lower, self.upper, self.cells_per_axis)
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }
    pub fn lower(&self) -> &[f64] {
        &self.lower
    }
    pub fn upper(&self) -> &[f64] {
        &self.upper
    }
    pub fn cells_per_axis(&self) -> &[usize] {
        &self.cells_per_axis
    }
    pub fn widths(&self) -> &[f64] {
        &self.widths
    }
    pub fn cell_volume(&self) -> f64 {
        self.cell_volume
    }
    pub fn cell_count(&self) -> usize {
        self.cell_count
    }

    /// Lebesgue measure of the whole box.
    pub fn domain_volume(&self) -> f64 {
        self.cell_volume * self.cell_count as f64
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.iter()
            .enumerate()
            .all(|(k, &v)| v >= self.lower[k] && v <= self.upper[k])
    }

    /// Cell holding `x`. The upper face belongs to the last cell on each axis.
    pub fn cell_of(&self, x: &[f64]) -> Option<usize> {
        let mut idx = 0;
        for k in 0..self.dim() {
            let v = x[k];
            if !(v >= self.lower[k] && v <= self.upper[k]) {
                return None;
            }
            let pos = ((v - self.lower[k]) / self.widths[k]).floor() as usize;
            idx += pos.min(self.cells_per_axis[k] - 1) * self.strides[k];
        }
        Some(idx)
    }

    pub fn multi_index(&self, cell: usize) -> Vec<usize> {
        (0..self.dim())
            .map(|k| (cell / self.strides[k]) % self.cells_per_axis[k])
            .collect()
    }

    pub fn cell_center(&self, cell: usize) -> Vec<f64> {
        self.multi_index(cell)
            .iter()
            .enumerate()
            .map(|(k, &i)| self.lower[k] + (i as f64 + 0.5) * self.widths[k])
            .collect()
    }

    /// Point at sub-grid position `sub` (each coordinate in `0..q`) of `cell`.
    pub fn subgrid_point(&self, cell: usize, sub: &[usize], q: usize, out: &mut [f64]) {
        let mi = self.multi_index(cell);
        for k in 0..self.dim() {
            let frac = (mi[k] as f64 + (sub[k] as f64 + 0.5) / q as f64) * self.widths[k];
            out[k] = self.lower[k] + frac;
        }
    }
}

/// Iterates the `q^d` multi-indices of a regular sub-grid.
pub(crate) fn for_each_subindex(dim: usize, q: usize, mut f: impl FnMut(&[usize])) {
    let mut sub = vec![0usize; dim];
    loop {
        f(&sub);
        let mut k = dim;
        loop {
            if k == 0 {
                return;
            }
            k -= 1;
            sub[k] += 1;
            if sub[k] < q {
                break;
            }
            sub[k] = 0;
        }
    }
}

/// Tolerance on unit mass for validated densities.
pub const MASS_TOL: f64 = 1e-9;

/// Piecewise-constant density on a [`Partition`].
///
/// Densities produced by [`apply_fp`] without renormalization may carry less
/// than unit mass when the operator leaks; [`DensityVector::mass`] reports it.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityVector {
    partition: Arc<Partition>,
    values: Vec<f64>,
}

impl DensityVector {
    /// Validates non-negativity and unit mass (within [`MASS_TOL`]).
    pub fn new(partition: Arc<Partition>, values: Vec<f64>) -> Result<Self> {
        Self::with_mass_tolerance(partition, values, MASS_TOL)
    }

    pub fn with_mass_tolerance(
        partition: Arc<Partition>,
        values: Vec<f64>,
        tol: f64,
    ) -> Result<Self> {
        if values.len() != partition.cell_count() {
            return Err(TransferError::InvalidDensity(format!(
                "{} values for {} cells",
                values.len(),
                partition.cell_count()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite() || *v < 0.0) {
            return Err(TransferError::InvalidDensity(format!(
                "cell {i} has value {} (must be finite and >= 0)",
                values[i]
            )));
        }
        let mass: f64 = values.iter().sum::<f64>() * partition.cell_volume();
        if (mass - 1.0).abs() > tol {
            return Err(TransferError::InvalidDensity(format!(
                "total mass {mass} differs from 1"
            )));
        }
        Ok(Self { partition, values })
    }

    /// Scales non-negative weights to unit mass.
    pub fn normalized(partition: Arc<Partition>, values: Vec<f64>) -> Result<Self> {
        if values.len() != partition.cell_count() {
            return Err(TransferError::InvalidDensity(format!(
                "{} values for {} cells",
                values.len(),
                partition.cell_count()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite() || *v < 0.0) {
            return Err(TransferError::InvalidDensity(format!(
                "cell {i} has value {}",
                values[i]
            )));
        }
        let mass: f64 = values.iter().sum::<f64>() * partition.cell_volume();
        if mass <= 0.0 {
            return Err(TransferError::ZeroMass);
        }
        let values = values.into_iter().map(|v| v / mass).collect();
        Ok(Self { partition, values })
    }

    pub fn uniform(partition: Arc<Partition>) -> Self {
        let v = 1.0 / partition.domain_volume();
        let values = vec![v; partition.cell_count()];
        Self { partition, values }
    }

    /// Samples `f` at cell centers and normalizes.
    pub fn from_fn(partition: Arc<Partition>, f: impl Fn(&[f64]) -> f64) -> Result<Self> {
        let values = (0..partition.cell_count())
            .map(|i| f(&partition.cell_center(i)))
            .collect();
        Self::normalized(partition, values)
    }

    /// Density from raw cell masses, no validation.
    pub(crate) fn from_masses_unchecked(partition: Arc<Partition>, masses: Vec<f64>) -> Self {
        let vol = partition.cell_volume();
        let values = masses.into_iter().map(|m| m / vol).collect();
        Self { partition, values }
    }

    pub fn partition(&self) -> &Arc<Partition> {
        &self.partition
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    /// Per-cell masses `θ_i · vol`.
    pub fn masses(&self) -> Vec<f64> {
        let vol = self.partition.cell_volume();
        self.values.iter().map(|v| v * vol).collect()
    }

    pub fn mass(&self) -> f64 {
        self.values.iter().sum::<f64>() * self.partition.cell_volume()
    }

    pub fn support_len(&self) -> usize {
        self.values.iter().filter(|&&v| v > 0.0).count()
    }

    pub fn same_grid(&self, other: &DensityVector) -> bool {
        Arc::ptr_eq(&self.partition, &other.partition) || self.partition == other.partition
    }

    /// Volume-weighted L¹ distance.
    pub fn l1_distance(&self, other: &DensityVector) -> Result<f64> {
        if !self.same_grid(other) {
            return Err(TransferError::PartitionMismatch);
        }
        Ok(self
            .values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b).abs())
            .sum::<f64>()
            * self.partition.cell_volume())
    }

    fn renormalized(self) -> Result<Self> {
        let mass = self.mass();
        if mass <= 0.0 {
            return Err(TransferError::ZeroMass);
        }
        Ok(Self {
            values: self.values.into_iter().map(|v| v / mass).collect(),
            partition: self.partition,
        })
    }
}

/// Bounded observable, one value per cell.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservableVector {
    values: Vec<f64>,
}

impl ObservableVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(TransferError::InvalidObservable(format!(
                "cell {i} is not finite"
            )));
        }
        Ok(Self { values })
    }

    pub fn from_fn(partition: &Partition, f: impl Fn(&[f64]) -> f64) -> Result<Self> {
        Self::new(
            (0..partition.cell_count())
                .map(|i| f(&partition.cell_center(i)))
                .collect(),
        )
    }

    pub fn constant(len: usize, c: f64) -> Self {
        Self {
            values: vec![c; len],
        }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn sup_norm(&self) -> f64 {
        self.values.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
    }
}

/// A point transformation `x ↦ S(x)` on ℝᵈ.
pub trait PointMap: Sync {
    fn map_point(&self, x: &[f64], out: &mut [f64]);
}

impl<F> PointMap for F
where
    F: Fn(&[f64], &mut [f64]) + Sync,
{
    fn map_point(&self, x: &[f64], out: &mut [f64]) {
        self(x, out)
    }
}

/// Where an operator came from.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FlowMeta {
    pub t0: f64,
    pub t1: f64,
    pub profile: String,
    pub epsilon: Option<f64>,
}

/// Per-row landing counts prior to assembly into an [`UlamMatrix`].
#[derive(Debug, Clone, Default)]
pub(crate) struct RowCounts {
    pub entries: Vec<(usize, u32)>,
    pub escaped: u32,
}

impl RowCounts {
    /// Counts landing cells; `None` means the point left the domain.
    pub fn from_landings(mut landings: Vec<Option<usize>>) -> Self {
        landings.sort_unstable();
        let mut row = RowCounts::default();
        for l in landings {
            match l {
                None => row.escaped += 1,
                Some(c) => match row.entries.last_mut() {
                    Some((last, n)) if *last == c => *n += 1,
                    _ => row.entries.push((c, 1)),
                },
            }
        }
        row
    }
}

/// Sparse row-(sub)stochastic transfer matrix with exact sample counts.
#[derive(Debug, Clone, PartialEq)]
pub struct UlamMatrix {
    partition: Arc<Partition>,
    samples_per_row: u32,
    row_ptr: Vec<usize>,
    cols: Vec<usize>,
    counts: Vec<u32>,
    escaped: Vec<u32>,
    meta: FlowMeta,
}

impl UlamMatrix {
    pub(crate) fn from_rows(
        partition: Arc<Partition>,
        samples_per_row: u32,
        rows: Vec<RowCounts>,
        meta: FlowMeta,
        leak_tol: f64,
    ) -> Result<Self> {
        debug_assert_eq!(rows.len(), partition.cell_count());
        let mut row_ptr = Vec::with_capacity(rows.len() + 1);
        let mut cols = Vec::new();
        let mut counts = Vec::new();
        let mut escaped = Vec::with_capacity(rows.len());
        row_ptr.push(0);
        for r in rows {
            debug_assert_eq!(
                r.entries.iter().map(|e| e.1).sum::<u32>() + r.escaped,
                samples_per_row
            );
            for (c, n) in r.entries {
                cols.push(c);
                counts.push(n);
            }
            escaped.push(r.escaped);
            row_ptr.push(cols.len());
        }
        let m = Self {
            partition,
            samples_per_row,
            row_ptr,
            cols,
            counts,
            escaped,
            meta,
        };
        if let Some((cell, leakage)) = m.worst_leakage() {
            if leakage > leak_tol {
                return Err(TransferError::DomainEscape {
                    cell,
                    leakage,
                    tolerance: leak_tol,
                });
            }
        }
        Ok(m)
    }

    /// Permutation operator: cell `i` moves wholesale to `perm[i]`.
    pub fn from_permutation(partition: Arc<Partition>, perm: &[usize]) -> Result<Self> {
        let m = partition.cell_count();
        let mut seen = vec![false; m];
        if perm.len() != m
            || perm
                .iter()
                .any(|&p| p >= m || std::mem::replace(&mut seen[p], true))
        {
            return Err(TransferError::InvalidArgument(
                "not a permutation of the cells".into(),
            ));
        }
        let rows = perm
            .iter()
            .map(|&p| RowCounts {
                entries: vec![(p, 1)],
                escaped: 0,
            })
            .collect();
        Self::from_rows(partition, 1, rows, FlowMeta::default(), 0.0)
    }

    pub fn identity(partition: Arc<Partition>) -> Self {
        let perm: Vec<usize> = (0..partition.cell_count()).collect();
        Self::from_permutation(partition, &perm).expect("identity is a permutation")
    }

    pub fn partition(&self) -> &Arc<Partition> {
        &self.partition
    }
    pub fn size(&self) -> usize {
        self.escaped.len()
    }
    pub fn samples_per_row(&self) -> u32 {
        self.samples_per_row
    }
    pub fn meta(&self) -> &FlowMeta {
        &self.meta
    }
    pub fn nnz(&self) -> usize {
        self.cols.len()
    }

    /// Non-zero `(column, fraction)` pairs of row `i`, by increasing column.
    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let s = self.samples_per_row as f64;
        let r = self.row_ptr[i]..self.row_ptr[i + 1];
        self.cols[r.clone()]
            .iter()
            .zip(&self.counts[r])
            .map(move |(&c, &n)| (c, n as f64 / s))
    }

    /// Raw landing counts of row `i`.
    pub fn row_counts(&self, i: usize) -> impl Iterator<Item = (usize, u32)> + '_ {
        let r = self.row_ptr[i]..self.row_ptr[i + 1];
        self.cols[r.clone()]
            .iter()
            .copied()
            .zip(self.counts[r].iter().copied())
    }

    pub fn escaped_count(&self, i: usize) -> u32 {
        self.escaped[i]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.row(i).find(|&(c, _)| c == j).map_or(0.0, |(_, v)| v)
    }

    pub fn leakage(&self, i: usize) -> f64 {
        self.escaped[i] as f64 / self.samples_per_row as f64
    }

    pub fn leakage_vector(&self) -> Vec<f64> {
        (0..self.size()).map(|i| self.leakage(i)).collect()
    }

    /// Row with the largest escaped fraction (lowest index on ties).
    pub fn worst_leakage(&self) -> Option<(usize, f64)> {
        let mut best: Option<(usize, u32)> = None;
        for (i, &e) in self.escaped.iter().enumerate() {
            if best.is_none_or(|(_, b)| e > b) {
                best = Some((i, e));
            }
        }
        best.map(|(i, _)| (i, self.leakage(i)))
    }

    pub fn max_leakage(&self) -> f64 {
        self.worst_leakage().map_or(0.0, |(_, l)| l)
    }

    /// Dense copy, row-major, for small checks.
    pub fn to_dense(&self) -> Vec<Vec<f64>> {
        let m = self.size();
        let mut dense = vec![vec![0.0; m]; m];
        for (i, row) in dense.iter_mut().enumerate() {
            for (j, v) in self.row(i) {
                row[j] = v;
            }
        }
        dense
    }

    /// `m' = Pᵀ m` on raw cell masses. Linear in `masses`; no sign requirement.
    pub fn push_masses(&self, masses: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.size()];
        for (i, &m) in masses.iter().enumerate() {
            if m == 0.0 {
                continue;
            }
            for (j, p) in self.row(i) {
                out[j] += m * p;
            }
        }
        out
    }

    /// `(Uζ)_i = Σ_j P_ij ζ_j`.
    pub fn pull_values(&self, values: &[f64]) -> Vec<f64> {
        (0..self.size())
            .map(|i| self.row(i).map(|(j, p)| p * values[j]).sum())
            .collect()
    }
}

/// Deterministic Ulam matrix from a `q^d` interior sub-grid in every cell.
pub fn build_ulam(
    partition: &Arc<Partition>,
    map: &(impl PointMap + ?Sized),
    q: usize,
    leak_tol: f64,
    meta: FlowMeta,
) -> Result<UlamMatrix> {
    if q < 2 {
        return Err(TransferError::InvalidArgument(format!(
            "sub-grid resolution q must be >= 2, got {q}"
        )));
    }
    let d = partition.dim();
    let samples = q
        .checked_pow(d as u32)
        .filter(|&s| s <= u32::MAX as usize)
        .ok_or_else(|| TransferError::InvalidArgument("too many samples per cell".into()))?;
    let rows: Vec<RowCounts> = (0..partition.cell_count())
        .into_par_iter()
        .map(|cell| {
            let mut x = vec![0.0; d];
            let mut y = vec![0.0; d];
            let mut landings = Vec::with_capacity(samples);
            for_each_subindex(d, q, |sub| {
                partition.subgrid_point(cell, sub, q, &mut x);
                map.map_point(&x, &mut y);
                landings.push(partition.cell_of(&y));
            });
            RowCounts::from_landings(landings)
        })
        .collect();
    UlamMatrix::from_rows(partition.clone(), samples as u32, rows, meta, leak_tol)
}

/// Transports `θ` through `P`. With `renormalize`, the result is rescaled to
/// unit mass.
pub fn apply_fp(p: &UlamMatrix, theta: &DensityVector, renormalize: bool) -> Result<DensityVector> {
    if p.size() != theta.len() || **p.partition() != **theta.partition() {
        return Err(TransferError::PartitionMismatch);
    }
    let pushed = p.push_masses(&theta.masses());
    let out = DensityVector::from_masses_unchecked(theta.partition().clone(), pushed);
    if renormalize {
        out.renormalized()
    } else {
        Ok(out)
    }
}

pub fn apply_koopman(p: &UlamMatrix, zeta: &ObservableVector) -> Result<ObservableVector> {
    if p.size() != zeta.values().len() {
        return Err(TransferError::PartitionMismatch);
    }
    Ok(ObservableVector {
        values: p.pull_values(zeta.values()),
    })
}

fn inner(a: &[f64], b: &[f64], vol: f64) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() * vol
}

/// `|⟨Pθ, ζ⟩ − ⟨θ, Uζ⟩|` with the volume-weighted inner product.
pub fn adjoint_residual(
    p: &UlamMatrix,
    theta: &DensityVector,
    zeta: &ObservableVector,
) -> Result<f64> {
    let vol = theta.partition().cell_volume();
    let pushed = apply_fp(p, theta, false)?;
    let pulled = apply_koopman(p, zeta)?;
    Ok(
        (inner(pushed.values(), zeta.values(), vol) - inner(theta.values(), pulled.values(), vol))
            .abs(),
    )
}

/// `‖Pθ − θ‖₁`: how far `μ_θ` is from being invariant.
pub fn invariance_check(p: &UlamMatrix, theta: &DensityVector) -> Result<f64> {
    apply_fp(p, theta, false)?.l1_distance(theta)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverSettings {
    pub tol: f64,
    pub max_iter: usize,
    pub cesaro: bool,
}

impl Default for SolverSettings {
    fn default() -> Self {
        Self {
            tol: 1e-10,
            max_iter: 100_000,
            cesaro: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StationarySolution {
    pub density: DensityVector,
    pub iterations: usize,
    /// `‖Pθ* − θ*‖₁` with `Pθ*` renormalized.
    pub residual: f64,
}

fn fixed_point_residual(p: &UlamMatrix, theta: &DensityVector) -> Result<f64> {
    apply_fp(p, theta, true)?.l1_distance(theta)
}

/// Power iteration `θ ← normalize(Pθ)`, or the Cesàro mean of the iterates.
///
/// The plain iteration stops once consecutive iterates are closer than `tol`
/// in L¹. The Cesàro mean `(1/n) Σ_{k<n} Pᵏθ0` stops once its own fixed-point
/// residual drops below `tol`.
pub fn stationary_density(
    p: &UlamMatrix,
    theta0: &DensityVector,
    settings: SolverSettings,
) -> Result<StationarySolution> {
    if settings.max_iter == 0 || !(settings.tol > 0.0) {
        return Err(TransferError::InvalidArgument(
            "max_iter must be positive and tol > 0".into(),
        ));
    }
    let mut current = theta0.clone();
    if settings.cesaro {
        let mut sum = theta0.values().to_vec();
        let mut residual = f64::INFINITY;
        for n in 1..=settings.max_iter {
            let avg = DensityVector::from_masses_unchecked(
                theta0.partition().clone(),
                sum.iter()
                    .map(|s| s / n as f64 * theta0.partition().cell_volume())
                    .collect(),
            );
            residual = fixed_point_residual(p, &avg)?;
            if residual < settings.tol {
                return Ok(StationarySolution {
                    density: avg,
                    iterations: n,
                    residual,
                });
            }
            current = apply_fp(p, &current, true)?;
            for (s, v) in sum.iter_mut().zip(current.values()) {
                *s += v;
            }
        }
        return Err(TransferError::NonConvergence {
            iterations: settings.max_iter,
            residual,
        });
    }
    let mut step = f64::INFINITY;
    for n in 1..=settings.max_iter {
        let next = apply_fp(p, &current, true)?;
        step = next.l1_distance(&current)?;
        current = next;
        if step < settings.tol {
            let residual = fixed_point_residual(p, &current)?;
            return Ok(StationarySolution {
                density: current,
                iterations: n,
                residual,
            });
        }
    }
    Err(TransferError::NonConvergence {
        iterations: settings.max_iter,
        residual: step,
    })
}

/// Cesàro mean `(1/n) Σ_{k<n} Pᵏθ0` for a fixed `n ≥ 1`.
pub fn cesaro_average(p: &UlamMatrix, theta0: &DensityVector, n: usize) -> Result<DensityVector> {
    if n == 0 {
        return Err(TransferError::InvalidArgument("n must be >= 1".into()));
    }
    let mut sum = theta0.values().to_vec();
    let mut current = theta0.clone();
    for _ in 1..n {
        current = apply_fp(p, &current, true)?;
        for (s, v) in sum.iter_mut().zip(current.values()) {
            *s += v;
        }
    }
    let vol = theta0.partition().cell_volume();
    Ok(DensityVector::from_masses_unchecked(
        theta0.partition().clone(),
        sum.into_iter().map(|s| s / n as f64 * vol).collect(),
    ))
}

/// Time average `(1/n) Σ_{k<n} f(Sᵏ x0)` along a trajectory that must stay in
/// `domain`.
pub fn birkhoff_average(
    domain: &Partition,
    map: &(impl PointMap + ?Sized),
    x0: &[f64],
    observable: impl Fn(&[f64]) -> f64,
    n_steps: usize,
) -> Result<f64> {
    if n_steps == 0 {
        return Err(TransferError::InvalidArgument(
            "n_steps must be >= 1".into(),
        ));
    }
    let mut x = x0.to_vec();
    let mut y = vec![0.0; x.len()];
    let mut total = 0.0;
    for k in 0..n_steps {
        if !domain.contains(&x) {
            return Err(TransferError::TrajectoryEscape { step: k });
        }
        total += observable(&x);
        map.map_point(&x, &mut y);
        std::mem::swap(&mut x, &mut y);
    }
    Ok(total / n_steps as f64)
}

/// Largest row-wise L¹ gap between `direct` and the product `first · second`
/// (apply `first`, then `second`).
pub fn composition_defect(direct: &UlamMatrix, first: &UlamMatrix, second: &UlamMatrix) -> f64 {
    let m = direct.size();
    let mut worst = 0.0_f64;
    let mut row = vec![0.0; m];
    for i in 0..m {
        row.iter_mut().for_each(|v| *v = 0.0);
        for (k, a) in first.row(i) {
            for (j, b) in second.row(k) {
                row[j] += a * b;
            }
        }
        for (j, v) in direct.row(i) {
            row[j] -= v;
        }
        worst = worst.max(row.iter().map(|v| v.abs()).sum());
    }
    worst
}
