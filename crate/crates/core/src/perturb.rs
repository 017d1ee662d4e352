//! Small stochastic perturbations of the closed loop,
//! `dZ = M Z dt + √ε σ dW`, simulated by Euler–Maruyama.
//!
//! Random numbers come from one ChaCha8 stream per `(seed, cell, path)`; the
//! step index is the position inside that stream. Results therefore do not
//! depend on how paths are scheduled across threads.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::entropy::{self, EntropyError};
use crate::system::{self, FeedbackProfile, MultiChannelSystem, SystemError};
use crate::transfer::{
    apply_fp, for_each_subindex, stationary_density, DensityVector, FlowMeta, Partition, RowCounts,
    SolverSettings, StationarySolution, TransferError, UlamMatrix,
};

/// Smallest number of paths per cell accepted for operator estimates.
pub const MIN_PATHS_PER_CELL: usize = 100;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PerturbError {
    #[error("invalid perturbation setting: {0}")]
    Config(String),
    #[error("path {path} from cell {cell} diverged at step {step}")]
    Divergence {
        cell: usize,
        path: usize,
        step: usize,
    },
    #[error(transparent)]
    System(#[from] SystemError),
    #[error(transparent)]
    Transfer(#[from] TransferError),
    #[error(transparent)]
    Entropy(#[from] EntropyError),
}

type Result<T> = std::result::Result<T, PerturbError>;

/// Constant diffusion matrix and the noise levels to sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSpec {
    sigma: DMatrix<f64>,
    epsilons: Vec<f64>,
}

impl NoiseSpec {
    /// `epsilons` must be strictly decreasing and non-negative; a trailing 0
    /// gives the zero-noise control row.
    pub fn new(sigma: DMatrix<f64>, epsilons: Vec<f64>) -> Result<Self> {
        if !sigma.is_square() || sigma.iter().any(|v| !v.is_finite()) {
            return Err(PerturbError::Config(
                "sigma must be a finite square matrix".into(),
            ));
        }
        if epsilons.is_empty() {
            return Err(PerturbError::Config("epsilon list is empty".into()));
        }
        for (k, &e) in epsilons.iter().enumerate() {
            if !(e >= 0.0) || !e.is_finite() {
                return Err(PerturbError::Config(format!("epsilon[{k}] must be >= 0")));
            }
            if k > 0 && !(e < epsilons[k - 1]) {
                return Err(PerturbError::Config(format!(
                    "epsilon[{k}] must be strictly decreasing"
                )));
            }
        }
        Ok(Self { sigma, epsilons })
    }

    pub fn sigma(&self) -> &DMatrix<f64> {
        &self.sigma
    }

    pub fn epsilons(&self) -> &[f64] {
        &self.epsilons
    }

    fn check_dim(&self, d: usize) -> Result<()> {
        if self.sigma.nrows() != d {
            return Err(PerturbError::Config(format!(
                "sigma is {}x{}, state dimension is {d}",
                self.sigma.nrows(),
                self.sigma.ncols()
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SdePathConfig {
    pub h: f64,
    pub n_steps: usize,
    pub n_paths: usize,
    pub seed: u64,
}

impl SdePathConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.h > 0.0) || !self.h.is_finite() {
            return Err(PerturbError::Config("h must be > 0".into()));
        }
        if self.n_paths == 0 {
            return Err(PerturbError::Config("n_paths must be >= 1".into()));
        }
        Ok(())
    }
}

/// Closed-loop matrices per schedule segment, looked up by time.
struct Drift {
    starts: Vec<f64>,
    matrices: Vec<DMatrix<f64>>,
}

impl Drift {
    fn new(sys: &MultiChannelSystem, profile: &FeedbackProfile) -> Result<Self> {
        let starts: Vec<f64> = sys.segments().iter().map(|s| s.start).collect();
        let matrices = starts
            .iter()
            .map(|&t| system::closed_loop_matrix(sys, profile, t))
            .collect::<std::result::Result<_, _>>()?;
        Ok(Self { starts, matrices })
    }

    fn at(&self, t: f64) -> &DMatrix<f64> {
        let k = self.starts.partition_point(|&s| s <= t).saturating_sub(1);
        &self.matrices[k]
    }
}

fn stream_rng(seed: u64, cell: usize, path: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((cell as u64) << 32) | path as u64);
    rng
}

/// Shared Euler–Maruyama stepper; `record(step, state)` runs after every
/// step. Returns the failing step on a non-finite state.
#[allow(clippy::too_many_arguments)]
fn euler_maruyama(
    drift: &Drift,
    sigma: &DMatrix<f64>,
    epsilon: f64,
    x0: &[f64],
    h: f64,
    n_steps: usize,
    rng: &mut ChaCha8Rng,
    mut record: impl FnMut(usize, &DVector<f64>),
) -> std::result::Result<(), usize> {
    let d = x0.len();
    let noisy = epsilon > 0.0 && sigma.iter().any(|&v| v != 0.0);
    let scale = (epsilon * h).sqrt();
    let mut z = DVector::from_column_slice(x0);
    let mut xi = DVector::zeros(d);
    for step in 1..=n_steps {
        let m = drift.at((step - 1) as f64 * h);
        let mut next = &z + m * &z * h;
        if noisy {
            for v in xi.iter_mut() {
                *v = StandardNormal.sample(rng);
            }
            next += sigma * &xi * scale;
        }
        if next.iter().any(|v| !v.is_finite()) {
            return Err(step);
        }
        z = next;
        record(step, &z);
    }
    Ok(())
}

/// One sample path; `states[k]` is the state after `k` steps.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub h: f64,
    pub states: Vec<Vec<f64>>,
}

impl Trajectory {
    pub fn endpoint(&self) -> &[f64] {
        self.states.last().expect("trajectory holds x0")
    }
}

/// Path number `path` of the ensemble described by `cfg`, over `cfg.n_steps`
/// steps from `x0`.
pub fn simulate_sde(
    sys: &MultiChannelSystem,
    profile: &FeedbackProfile,
    noise: &NoiseSpec,
    epsilon: f64,
    x0: &[f64],
    cfg: &SdePathConfig,
    path: usize,
) -> Result<Trajectory> {
    cfg.validate()?;
    check_inputs(sys, profile, noise, epsilon, x0.len())?;
    let drift = Drift::new(sys, profile)?;
    let mut rng = stream_rng(cfg.seed, 0, path);
    let mut states = Vec::with_capacity(cfg.n_steps + 1);
    states.push(x0.to_vec());
    euler_maruyama(
        &drift,
        &noise.sigma,
        epsilon,
        x0,
        cfg.h,
        cfg.n_steps,
        &mut rng,
        |_, z| states.push(z.as_slice().to_vec()),
    )
    .map_err(|step| PerturbError::Divergence {
        cell: 0,
        path,
        step,
    })?;
    Ok(Trajectory { h: cfg.h, states })
}

fn check_inputs(
    sys: &MultiChannelSystem,
    profile: &FeedbackProfile,
    noise: &NoiseSpec,
    epsilon: f64,
    d: usize,
) -> Result<()> {
    profile.check(sys)?;
    noise.check_dim(sys.dim())?;
    if d != sys.dim() {
        return Err(PerturbError::Config(format!(
            "initial state has {d} components, system has {}",
            sys.dim()
        )));
    }
    if !(epsilon >= 0.0) || !epsilon.is_finite() {
        return Err(PerturbError::Config("epsilon must be >= 0".into()));
    }
    Ok(())
}

/// Endpoints of all `cfg.n_paths` paths from a common `x0`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EnsembleStats {
    pub t: f64,
    pub n_paths: usize,
    pub mean: Vec<f64>,
    /// Per-component sample variance (divisor `n − 1`).
    pub variance: Vec<f64>,
}

pub fn simulate_ensemble(
    sys: &MultiChannelSystem,
    profile: &FeedbackProfile,
    noise: &NoiseSpec,
    epsilon: f64,
    x0: &[f64],
    cfg: &SdePathConfig,
) -> Result<(Vec<Vec<f64>>, EnsembleStats)> {
    cfg.validate()?;
    check_inputs(sys, profile, noise, epsilon, x0.len())?;
    let drift = Drift::new(sys, profile)?;
    let endpoints = (0..cfg.n_paths)
        .into_par_iter()
        .map(|path| {
            let mut rng = stream_rng(cfg.seed, 0, path);
            let mut end = x0.to_vec();
            euler_maruyama(
                &drift,
                &noise.sigma,
                epsilon,
                x0,
                cfg.h,
                cfg.n_steps,
                &mut rng,
                |_, z| end.copy_from_slice(z.as_slice()),
            )
            .map_err(|step| PerturbError::Divergence {
                cell: 0,
                path,
                step,
            })?;
            Ok(end)
        })
        .collect::<Result<Vec<_>>>()?;
    let d = x0.len();
    let n = endpoints.len() as f64;
    let mean: Vec<f64> = (0..d)
        .map(|i| endpoints.iter().map(|e| e[i]).sum::<f64>() / n)
        .collect();
    let variance = (0..d)
        .map(|i| {
            if endpoints.len() < 2 {
                0.0
            } else {
                endpoints
                    .iter()
                    .map(|e| (e[i] - mean[i]).powi(2))
                    .sum::<f64>()
                    / (n - 1.0)
            }
        })
        .collect();
    Ok((
        endpoints,
        EnsembleStats {
            t: cfg.n_steps as f64 * cfg.h,
            n_paths: cfg.n_paths,
            mean,
            variance,
        },
    ))
}

/// Number of Euler steps used to reach `t`: `max(1, round(t / h))`.
pub fn steps_for(t: f64, h: f64) -> usize {
    ((t / h).round() as usize).max(1)
}

/// Largest `s` with `s^d <= n`.
fn stratum_side(n: usize, d: usize) -> usize {
    let mut s = (n as f64).powf(1.0 / d as f64).round() as usize + 1;
    while s > 1 && s.checked_pow(d as u32).is_none_or(|v| v > n) {
        s -= 1;
    }
    s.max(1)
}

/// Monte Carlo transfer operators at every time in `times` (ascending, > 0).
///
/// Each cell launches `n_paths` paths from an `s^d` stratified sub-grid of
/// start points (cycled when `s^d < n_paths`). Paths are shared across
/// times: the operator for `t` counts where each path sits after
/// `steps_for(t, h)` steps.
#[allow(clippy::too_many_arguments)]
pub fn build_stochastic_ulam(
    partition: &Arc<Partition>,
    sys: &MultiChannelSystem,
    profile: &FeedbackProfile,
    noise: &NoiseSpec,
    epsilon: f64,
    times: &[f64],
    cfg: &SdePathConfig,
    leak_tol: f64,
) -> Result<Vec<UlamMatrix>> {
    cfg.validate()?;
    let d = partition.dim();
    check_inputs(sys, profile, noise, epsilon, d)?;
    if cfg.n_paths < MIN_PATHS_PER_CELL {
        return Err(PerturbError::Config(format!(
            "n_paths must be >= {MIN_PATHS_PER_CELL} per cell, got {}",
            cfg.n_paths
        )));
    }
    if cfg.n_paths > u32::MAX as usize {
        return Err(PerturbError::Config("n_paths too large".into()));
    }
    if times.is_empty()
        || times.iter().any(|&t| !(t > 0.0))
        || times.windows(2).any(|w| w[1] <= w[0])
    {
        return Err(PerturbError::Config(
            "times must be positive and increasing".into(),
        ));
    }
    let record_at: Vec<usize> = times.iter().map(|&t| steps_for(t, cfg.h)).collect();
    let last = *record_at.last().expect("non-empty");
    let drift = Drift::new(sys, profile)?;
    let side = stratum_side(cfg.n_paths, d);
    let mut subs = Vec::with_capacity(side.pow(d as u32));
    for_each_subindex(d, side, |s| subs.push(s.to_vec()));

    // rows[cell][k] holds the counts for times[k].
    let rows: Vec<Vec<RowCounts>> = (0..partition.cell_count())
        .into_par_iter()
        .map(|cell| {
            let mut landings = vec![Vec::with_capacity(cfg.n_paths); times.len()];
            let mut x0 = vec![0.0; d];
            for path in 0..cfg.n_paths {
                partition.subgrid_point(cell, &subs[path % subs.len()], side, &mut x0);
                let mut rng = stream_rng(cfg.seed, cell, path);
                let mut k = 0;
                euler_maruyama(
                    &drift,
                    &noise.sigma,
                    epsilon,
                    &x0,
                    cfg.h,
                    last,
                    &mut rng,
                    |step, z| {
                        while k < record_at.len() && record_at[k] == step {
                            landings[k].push(partition.cell_of(z.as_slice()));
                            k += 1;
                        }
                    },
                )
                .map_err(|step| PerturbError::Divergence { cell, path, step })?;
            }
            Ok(landings.into_iter().map(RowCounts::from_landings).collect())
        })
        .collect::<Result<_>>()?;

    let mut per_time: Vec<Vec<RowCounts>> = vec![Vec::with_capacity(rows.len()); times.len()];
    for cell_rows in rows {
        for (k, r) in cell_rows.into_iter().enumerate() {
            per_time[k].push(r);
        }
    }
    per_time
        .into_iter()
        .zip(&record_at)
        .map(|(rows, &n)| {
            let meta = FlowMeta {
                t0: 0.0,
                t1: n as f64 * cfg.h,
                profile: profile.fingerprint(),
                epsilon: Some(epsilon),
            };
            Ok(UlamMatrix::from_rows(
                partition.clone(),
                cfg.n_paths as u32,
                rows,
                meta,
                leak_tol,
            )?)
        })
        .collect()
}

/// Stationary density of a perturbed operator.
pub fn perturbed_stationary(
    p_eps: &UlamMatrix,
    theta0: &DensityVector,
    settings: SolverSettings,
) -> Result<StationarySolution> {
    Ok(stationary_density(p_eps, theta0, settings)?)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResilienceConfig {
    /// Times at which perturbed and unperturbed push-forwards are compared.
    pub times: Vec<f64>,
    /// Time step of the operators whose stationary densities are compared.
    pub stationary_time: f64,
    pub path: SdePathConfig,
    pub leak_tol: f64,
    pub solver: SolverSettings,
    /// Value given to empty cells of the unperturbed density in relative
    /// entropies.
    pub kl_floor: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ResilienceEntry {
    pub epsilon: f64,
    pub t: f64,
    pub density_id: usize,
    pub l1_distance: f64,
    /// `None` marks a support violation without a floor.
    pub rel_entropy: Option<f64>,
    pub support_violation_mass: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ResilienceReport {
    pub profile: String,
    pub entries: Vec<ResilienceEntry>,
    pub epsilons: Vec<f64>,
    /// Per ε, sup of the finite relative entropies; `None` if there are none.
    pub theta_eps: Vec<Option<f64>>,
    /// Per ε, `‖ϑ*^ε − ϑ*‖₁`.
    pub stationary_distance: Vec<f64>,
    /// `theta_eps` never increases as ε decreases (missing values count as `+∞`).
    pub monotone_flag: bool,
    /// Same ordering check for `stationary_distance`.
    pub stationary_monotone: bool,
}

fn non_increasing(values: impl Iterator<Item = f64>) -> bool {
    let v: Vec<f64> = values.collect();
    v.windows(2).all(|w| w[1] <= w[0])
}

/// Compares perturbed against unperturbed push-forwards of every density in
/// `thetas` for every ε and time.
///
/// The unperturbed reference runs through the same sampler at ε = 0, so the
/// two only differ by the noise term and ε = 0 entries are exactly zero.
pub fn resilience_report(
    sys: &MultiChannelSystem,
    profile: &FeedbackProfile,
    noise: &NoiseSpec,
    cfg: &ResilienceConfig,
    thetas: &[DensityVector],
) -> Result<ResilienceReport> {
    if thetas.is_empty() {
        return Err(PerturbError::Config("no densities to compare".into()));
    }
    let partition = thetas[0].partition().clone();
    if thetas.iter().any(|t| !t.same_grid(&thetas[0])) {
        return Err(TransferError::PartitionMismatch.into());
    }
    if let Some(f) = cfg.kl_floor {
        if !(f > 0.0) {
            return Err(PerturbError::Config("kl floor must be > 0".into()));
        }
    }
    let mut times = cfg.times.clone();
    let stat_idx = match times.iter().position(|&t| t == cfg.stationary_time) {
        Some(k) => k,
        None => {
            times.push(cfg.stationary_time);
            times.sort_by(f64::total_cmp);
            times
                .iter()
                .position(|&t| t == cfg.stationary_time)
                .expect("just inserted")
        }
    };
    let build = |eps: f64| {
        build_stochastic_ulam(
            &partition,
            sys,
            profile,
            noise,
            eps,
            &times,
            &cfg.path,
            cfg.leak_tol,
        )
    };
    let reference = build(0.0)?;
    let star = perturbed_stationary(&reference[stat_idx], &thetas[0], cfg.solver)?.density;
    let pushed_ref: Vec<Vec<DensityVector>> = reference
        .iter()
        .map(|p| thetas.iter().map(|th| apply_fp(p, th, true)).collect())
        .collect::<std::result::Result<_, _>>()?;

    let mut entries = Vec::new();
    let mut theta_eps = Vec::new();
    let mut stationary_distance = Vec::new();
    for &eps in noise.epsilons() {
        let ops = if eps == 0.0 {
            reference.clone()
        } else {
            build(eps)?
        };
        let star_eps = perturbed_stationary(&ops[stat_idx], &thetas[0], cfg.solver)?.density;
        stationary_distance.push(star_eps.l1_distance(&star)?);
        let mut sup: Option<f64> = None;
        for &t in &cfg.times {
            let k = times.iter().position(|&s| s == t).expect("time in grid");
            for (id, th) in thetas.iter().enumerate() {
                let pert = apply_fp(&ops[k], th, true)?;
                let det = &pushed_ref[k][id];
                let violation = entropy::support_violation_mass(&pert, det)?;
                let rel = match cfg.kl_floor {
                    Some(f) => Some(entropy::relative_entropy_floored(&pert, det, f)?),
                    None if violation > 0.0 => None,
                    None => Some(entropy::relative_entropy(&pert, det)?),
                };
                if let Some(r) = rel {
                    sup = Some(sup.map_or(r, |s| s.max(r)));
                }
                entries.push(ResilienceEntry {
                    epsilon: eps,
                    t,
                    density_id: id,
                    l1_distance: pert.l1_distance(det)?,
                    rel_entropy: rel,
                    support_violation_mass: violation,
                });
            }
        }
        theta_eps.push(sup);
    }
    Ok(ResilienceReport {
        profile: profile.fingerprint(),
        entries,
        epsilons: noise.epsilons().to_vec(),
        monotone_flag: non_increasing(theta_eps.iter().map(|v| v.unwrap_or(f64::INFINITY))),
        stationary_monotone: non_increasing(stationary_distance.iter().copied()),
        theta_eps,
        stationary_distance,
    })
}
