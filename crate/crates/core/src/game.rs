//! Best-response search for equilibrium feedback gains.
//!
//! Each channel picks a gain from a finite candidate list. The criterion of a
//! profile at time `t` is the relative entropy `H_r(P_t θ_ref | θ_ref)` of the
//! transported reference density, which every channel tries to minimize. The
//! quantifier over all `t ≥ 0` is replaced by a finite time grid: best
//! responses minimize the maximum over the grid, and [`verify_equilibrium`]
//! re-checks every grid time separately.

use std::collections::HashMap;
use std::sync::{Arc, Mutex};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::entropy::{self, EntropyError};
use crate::system::{self, FeedbackGain, FeedbackProfile, MultiChannelSystem, SystemError};
use crate::transfer::{
    apply_fp, build_ulam, stationary_density, DensityVector, FlowMeta, SolverSettings,
    TransferError, UlamMatrix, DEFAULT_LEAK_TOL,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GameError {
    #[error(transparent)]
    System(#[from] SystemError),
    #[error("operator at t = {t} for profile {profile}: {source}")]
    Operator {
        t: f64,
        profile: String,
        source: TransferError,
    },
    #[error(transparent)]
    Transfer(#[from] TransferError),
    #[error(transparent)]
    Entropy(#[from] EntropyError),
    #[error("channel {channel}: every candidate was rejected ({reasons})")]
    EmptyStrategy { channel: usize, reasons: String },
    #[error("invalid game configuration: {0}")]
    Config(String),
}

type Result<T> = std::result::Result<T, GameError>;

/// Finite candidate gains per channel.
#[derive(Debug, Clone, PartialEq)]
pub struct StrategySpace {
    candidates: Vec<Vec<FeedbackGain>>,
    stability_filter: bool,
}

impl StrategySpace {
    pub fn new(
        sys: &MultiChannelSystem,
        candidates: Vec<Vec<FeedbackGain>>,
        stability_filter: bool,
    ) -> Result<Self> {
        if candidates.len() != sys.channel_count() {
            return Err(GameError::Config(format!(
                "{} candidate lists for {} channels",
                candidates.len(),
                sys.channel_count()
            )));
        }
        for (j, list) in candidates.iter().enumerate() {
            if list.is_empty() {
                return Err(GameError::Config(format!("channel {j} has no candidates")));
            }
            for g in list {
                if g.channel != j {
                    return Err(GameError::Config(format!(
                        "candidate listed under channel {j} is tagged for channel {}",
                        g.channel
                    )));
                }
                g.check(sys)?;
            }
        }
        Ok(Self {
            candidates,
            stability_filter,
        })
    }

    /// Builds candidate gains from bare matrices, channel by channel.
    pub fn from_matrices(
        sys: &MultiChannelSystem,
        candidates: Vec<Vec<nalgebra::DMatrix<f64>>>,
        stability_filter: bool,
    ) -> Result<Self> {
        let lists = candidates
            .into_iter()
            .enumerate()
            .map(|(j, list)| list.into_iter().map(|l| FeedbackGain::new(j, l)).collect())
            .collect();
        Self::new(sys, lists, stability_filter)
    }

    pub fn channel_count(&self) -> usize {
        self.candidates.len()
    }

    pub fn candidates(&self, channel: usize) -> &[FeedbackGain] {
        &self.candidates[channel]
    }

    pub fn stability_filter(&self) -> bool {
        self.stability_filter
    }

    pub fn profile(&self, choice: &[usize]) -> FeedbackProfile {
        FeedbackProfile::new(
            choice
                .iter()
                .enumerate()
                .map(|(j, &c)| self.candidates[j][c].clone())
                .collect(),
        )
        .expect("strategy space lists every channel")
    }

    /// Every index combination, last channel varying fastest.
    pub fn all_choices(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new()];
        for list in &self.candidates {
            out = out
                .into_iter()
                .flat_map(|prefix| {
                    (0..list.len()).map(move |c| {
                        let mut v = prefix.clone();
                        v.push(c);
                        v
                    })
                })
                .collect();
        }
        out
    }
}

/// How transfer operators are discretized.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OperatorSettings {
    /// Sub-grid points per cell and axis.
    pub q: usize,
    pub leak_tol: f64,
    /// RK4 steps per transition integration.
    pub integration_steps: usize,
}

impl Default for OperatorSettings {
    fn default() -> Self {
        Self {
            q: 16,
            leak_tol: DEFAULT_LEAK_TOL,
            integration_steps: 200,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GameConfig {
    pub time_grid: Vec<f64>,
    pub reference: DensityVector,
    pub tol: f64,
    pub max_rounds: usize,
    pub operator: OperatorSettings,
    pub solver: SolverSettings,
    /// Further densities checked by [`verify_equilibrium`].
    pub extra_densities: Vec<DensityVector>,
}

impl GameConfig {
    pub fn new(time_grid: Vec<f64>, reference: DensityVector) -> Result<Self> {
        let cfg = Self {
            time_grid,
            reference,
            tol: 1e-9,
            max_rounds: 50,
            operator: OperatorSettings::default(),
            solver: SolverSettings::default(),
            extra_densities: Vec::new(),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        validate_time_grid(&self.time_grid).map_err(GameError::Config)?;
        if !(self.tol > 0.0) {
            return Err(GameError::Config("tol must be positive".into()));
        }
        if self.max_rounds == 0 {
            return Err(GameError::Config("max_rounds must be positive".into()));
        }
        Ok(())
    }

    pub fn horizon(&self) -> f64 {
        *self.time_grid.last().expect("validated non-empty")
    }
}

/// Non-empty, strictly increasing, first element positive. The message names
/// the offending index.
pub fn validate_time_grid(grid: &[f64]) -> std::result::Result<(), String> {
    if grid.is_empty() {
        return Err("must not be empty".into());
    }
    if !(grid[0] > 0.0) || !grid[0].is_finite() {
        return Err("[0]: must be > 0".into());
    }
    for k in 1..grid.len() {
        if !(grid[k] > grid[k - 1]) || !grid[k].is_finite() {
            return Err(format!("[{k}]: must be increasing"));
        }
    }
    Ok(())
}

/// Ulam operator for the closed loop of `profile` over `[0, t]`.
pub fn operator_at(
    sys: &MultiChannelSystem,
    profile: &FeedbackProfile,
    t: f64,
    settings: &OperatorSettings,
    partition: &Arc<crate::transfer::Partition>,
) -> Result<UlamMatrix> {
    let flow = system::flow_map(sys, profile, 0.0, t, settings.integration_steps)?;
    let meta = FlowMeta {
        t0: 0.0,
        t1: t,
        profile: profile.fingerprint(),
        epsilon: None,
    };
    build_ulam(partition, &flow, settings.q, settings.leak_tol, meta).map_err(|source| {
        GameError::Operator {
            t,
            profile: profile.fingerprint(),
            source,
        }
    })
}

fn relative_entropy_of_push(p: &UlamMatrix, theta: &DensityVector) -> Result<f64> {
    let pushed = apply_fp(p, theta, true)?;
    Ok(entropy::relative_entropy(&pushed, theta)?)
}

/// `H_r(P_t θ_ref | θ_ref)` at every grid time.
///
/// The value depends on the full closed loop only; `channel` is validated and
/// otherwise does not enter.
pub fn criterion(
    sys: &MultiChannelSystem,
    profile: &FeedbackProfile,
    channel: usize,
    cfg: &GameConfig,
) -> Result<Vec<f64>> {
    if channel >= sys.channel_count() {
        return Err(GameError::Config(format!("channel {channel} out of range")));
    }
    profile.check(sys)?;
    let partition = cfg.reference.partition().clone();
    cfg.time_grid
        .iter()
        .map(|&t| {
            let p = operator_at(sys, profile, t, &cfg.operator, &partition)?;
            relative_entropy_of_push(&p, &cfg.reference)
        })
        .collect()
}

/// Outcome of evaluating one profile.
#[derive(Debug, Clone, PartialEq)]
enum Evaluation {
    Admissible(Vec<f64>),
    Rejected(String),
}

fn objective(values: &[f64]) -> f64 {
    values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
}

fn evaluate(
    sys: &MultiChannelSystem,
    profile: &FeedbackProfile,
    stability_filter: bool,
    cfg: &GameConfig,
) -> Result<Evaluation> {
    if stability_filter && sys.is_time_invariant() && !system::is_hurwitz(sys, profile)? {
        return Ok(Evaluation::Rejected("closed loop not Hurwitz".into()));
    }
    match criterion(sys, profile, 0, cfg) {
        Ok(v) => Ok(Evaluation::Admissible(v)),
        Err(GameError::Operator { t, source, .. }) => {
            Ok(Evaluation::Rejected(format!("t = {t}: {source}")))
        }
        Err(GameError::System(SystemError::Divergence { t })) => {
            Ok(Evaluation::Rejected(format!("diverged at t = {t}")))
        }
        Err(e) => Err(e),
    }
}

/// Lowest-index minimizer of `max_k criterion` among admissible candidates.
fn argmin(evals: &[Evaluation], channel: usize) -> Result<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (c, e) in evals.iter().enumerate() {
        if let Evaluation::Admissible(v) = e {
            let obj = objective(v);
            if best.is_none_or(|(_, b)| obj < b) {
                best = Some((c, obj));
            }
        }
    }
    best.map(|(c, _)| c)
        .ok_or_else(|| GameError::EmptyStrategy {
            channel,
            reasons: evals
                .iter()
                .enumerate()
                .map(|(c, e)| match e {
                    Evaluation::Rejected(r) => format!("#{c}: {r}"),
                    Evaluation::Admissible(_) => format!("#{c}: admissible"),
                })
                .collect::<Vec<_>>()
                .join("; "),
        })
}

/// Channel `j`'s best candidate against the other gains of `profile`.
pub fn best_response(
    sys: &MultiChannelSystem,
    profile: &FeedbackProfile,
    channel: usize,
    space: &StrategySpace,
    cfg: &GameConfig,
) -> Result<FeedbackGain> {
    profile.check(sys)?;
    if channel >= space.channel_count() {
        return Err(GameError::Config(format!("channel {channel} out of range")));
    }
    let evals = space
        .candidates(channel)
        .par_iter()
        .map(|g| {
            evaluate(
                sys,
                &profile.with_gain(g.clone()),
                space.stability_filter,
                cfg,
            )
        })
        .collect::<Result<Vec<_>>>()?;
    let c = argmin(&evals, channel)?;
    Ok(space.candidates(channel)[c].clone())
}

/// Memoized evaluations keyed by candidate indices.
struct Evaluator<'a> {
    sys: &'a MultiChannelSystem,
    space: &'a StrategySpace,
    cfg: &'a GameConfig,
    cache: Mutex<HashMap<Vec<usize>, Evaluation>>,
}

impl<'a> Evaluator<'a> {
    fn new(sys: &'a MultiChannelSystem, space: &'a StrategySpace, cfg: &'a GameConfig) -> Self {
        Self {
            sys,
            space,
            cfg,
            cache: Mutex::new(HashMap::new()),
        }
    }

    fn get(&self, choice: &[usize]) -> Result<Evaluation> {
        if let Some(e) = self.cache.lock().expect("cache lock").get(choice) {
            return Ok(e.clone());
        }
        let e = evaluate(
            self.sys,
            &self.space.profile(choice),
            self.space.stability_filter,
            self.cfg,
        )?;
        self.cache
            .lock()
            .expect("cache lock")
            .insert(choice.to_vec(), e.clone());
        Ok(e)
    }

    fn channel_evaluations(&self, choice: &[usize], channel: usize) -> Result<Vec<Evaluation>> {
        (0..self.space.candidates(channel).len())
            .into_par_iter()
            .map(|c| {
                let mut alt = choice.to_vec();
                alt[channel] = c;
                self.get(&alt)
            })
            .collect()
    }
}

/// Stationary density of the equilibrium closed loop and the checks of the
/// convergence and entropy conditions on the reference density.
#[derive(Debug, Clone, PartialEq)]
pub struct StationaryReport {
    pub density: DensityVector,
    pub entropy: f64,
    pub iterations: usize,
    /// Fixed-point residual of the solve at the horizon.
    pub residual: f64,
    /// `‖normalize(P_t ϑ*) − ϑ*‖₁` per grid time.
    pub grid_residuals: Vec<f64>,
    /// `‖P_t θ_ref − ϑ*‖₁` per grid time.
    pub convergence_distances: Vec<f64>,
    /// `H(P_t θ_ref) − H(ϑ*)` per grid time; positive values violate the
    /// entropy condition.
    pub entropy_excess: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EquilibriumResult {
    pub profile: FeedbackProfile,
    pub choice: Vec<usize>,
    /// `N × |time_grid|` criterion values at the final profile.
    pub per_channel_criteria: Vec<Vec<f64>>,
    pub stationary: Option<StationaryReport>,
    pub rounds: usize,
    pub converged: bool,
    /// Candidate indices after each round, starting with the initial profile.
    pub history: Vec<Vec<usize>>,
}

impl EquilibriumResult {
    pub fn stationary_entropy(&self) -> Option<f64> {
        self.stationary.as_ref().map(|s| s.entropy)
    }
}

/// Solves for the stationary density of `profile` at the horizon and checks it
/// against every grid time.
pub fn stationary_report(
    sys: &MultiChannelSystem,
    profile: &FeedbackProfile,
    cfg: &GameConfig,
) -> Result<StationaryReport> {
    let partition = cfg.reference.partition().clone();
    let ops = cfg
        .time_grid
        .iter()
        .map(|&t| operator_at(sys, profile, t, &cfg.operator, &partition))
        .collect::<Result<Vec<_>>>()?;
    let sol = stationary_density(
        ops.last().expect("non-empty grid"),
        &cfg.reference,
        cfg.solver,
    )?;
    let star = sol.density;
    let h_star = entropy::entropy(&star).value;
    let mut grid_residuals = Vec::with_capacity(ops.len());
    let mut convergence_distances = Vec::with_capacity(ops.len());
    let mut entropy_excess = Vec::with_capacity(ops.len());
    for p in &ops {
        grid_residuals.push(apply_fp(p, &star, true)?.l1_distance(&star)?);
        let pushed = apply_fp(p, &cfg.reference, true)?;
        convergence_distances.push(pushed.l1_distance(&star)?);
        entropy_excess.push(entropy::entropy(&pushed).value - h_star);
    }
    Ok(StationaryReport {
        entropy: h_star,
        density: star,
        iterations: sol.iterations,
        residual: sol.residual,
        grid_residuals,
        convergence_distances,
        entropy_excess,
    })
}

/// Round-robin best-response iteration from `initial` (candidate indices).
///
/// A channel only moves when its best response beats the current candidate by
/// more than `cfg.tol` (or the current candidate is inadmissible).
pub fn find_equilibrium(
    sys: &MultiChannelSystem,
    space: &StrategySpace,
    cfg: &GameConfig,
    initial: &[usize],
) -> Result<EquilibriumResult> {
    cfg.validate()?;
    if initial.len() != space.channel_count()
        || initial
            .iter()
            .enumerate()
            .any(|(j, &c)| c >= space.candidates(j).len())
    {
        return Err(GameError::Config(
            "initial profile is not in the strategy space".into(),
        ));
    }
    let eval = Evaluator::new(sys, space, cfg);
    let mut choice = initial.to_vec();
    let mut history = vec![choice.clone()];
    let mut converged = false;
    let mut rounds = 0;
    while rounds < cfg.max_rounds {
        rounds += 1;
        let mut changed = false;
        for j in 0..space.channel_count() {
            let evals = eval.channel_evaluations(&choice, j)?;
            let best = argmin(&evals, j)?;
            let improves = match (&evals[choice[j]], &evals[best]) {
                (Evaluation::Admissible(cur), Evaluation::Admissible(new)) => {
                    objective(new) < objective(cur) - cfg.tol
                }
                _ => true,
            };
            if best != choice[j] && improves {
                choice[j] = best;
                changed = true;
            }
        }
        history.push(choice.clone());
        if !changed {
            converged = true;
            break;
        }
    }
    if !converged {
        log::warn!(
            "best-response iteration did not settle after {rounds} rounds; last profiles: {:?}",
            &history[history.len().saturating_sub(4)..]
        );
    }
    let profile = space.profile(&choice);
    let criteria = match eval.get(&choice)? {
        Evaluation::Admissible(v) => v,
        Evaluation::Rejected(r) => {
            return Err(GameError::EmptyStrategy {
                channel: 0,
                reasons: r,
            })
        }
    };
    let stationary = if converged {
        Some(stationary_report(sys, &profile, cfg)?)
    } else {
        None
    };
    Ok(EquilibriumResult {
        per_channel_criteria: vec![criteria; space.channel_count()],
        profile,
        choice,
        stationary,
        rounds,
        converged,
        history,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConditionCheck {
    pub passed: bool,
    /// Largest violation found; `<= tol` passes.
    pub worst_margin: f64,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DensityVerification {
    /// 0 is the reference density, then the extra densities in order.
    pub density: usize,
    pub no_deviation: ConditionCheck,
    pub convergence: ConditionCheck,
    pub entropy_dominance: ConditionCheck,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VerificationReport {
    pub no_deviation: ConditionCheck,
    pub convergence: ConditionCheck,
    pub entropy_dominance: ConditionCheck,
    pub stationary_entropy: f64,
    pub per_density: Vec<DensityVerification>,
}

impl VerificationReport {
    pub fn all_passed(&self) -> bool {
        self.no_deviation.passed && self.convergence.passed && self.entropy_dominance.passed
    }
}

fn criterion_or_inf(p: &UlamMatrix, theta: &DensityVector) -> Result<f64> {
    match relative_entropy_of_push(p, theta) {
        Err(GameError::Entropy(EntropyError::Support { .. })) => Ok(f64::INFINITY),
        other => other,
    }
}

/// `a − b` with `∞ − ∞ = 0`.
fn gap(a: f64, b: f64) -> f64 {
    if a == b {
        0.0
    } else {
        a - b
    }
}

/// Violation margin of one deviation given its per-time improvements
/// `eq − dev`. A deviation that raises the criterion somewhere by more than
/// `tol` cannot violate and gets its (negative) worst improvement; otherwise
/// the margin is its best improvement.
fn deviation_margin(improvements: &[f64], tol: f64) -> f64 {
    let lo = improvements.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = improvements
        .iter()
        .copied()
        .fold(f64::NEG_INFINITY, f64::max);
    if lo < -tol {
        lo
    } else {
        hi
    }
}

fn worst(checks: &[(f64, String)], tol: f64) -> ConditionCheck {
    let (m, d) = checks
        .iter()
        .fold((f64::NEG_INFINITY, String::new()), |(m, d), (v, s)| {
            if *v > m {
                (*v, s.clone())
            } else {
                (m, d)
            }
        });
    ConditionCheck {
        passed: m <= tol,
        worst_margin: if m == f64::NEG_INFINITY { 0.0 } else { m },
        detail: d,
    }
}

fn merge(checks: Vec<&ConditionCheck>) -> ConditionCheck {
    let mut out = ConditionCheck {
        passed: true,
        worst_margin: 0.0,
        detail: String::new(),
    };
    for (k, c) in checks.into_iter().enumerate() {
        out.passed &= c.passed;
        if k == 0 || c.worst_margin > out.worst_margin {
            out.worst_margin = c.worst_margin;
            out.detail = c.detail.clone();
        }
    }
    out
}

/// Checks the three equilibrium conditions on the time grid for the reference
/// density and every extra density:
///
/// 1. no admissible unilateral deviation lowers the criterion by more than
///    `tol` at some grid time without raising it at another;
/// 2. `‖P_t θ − ϑ*‖₁` is non-increasing over the grid (within `tol`);
/// 3. `H(P_t θ) ≤ H(ϑ*) + tol` at every grid time.
pub fn verify_equilibrium(
    sys: &MultiChannelSystem,
    profile: &FeedbackProfile,
    space: &StrategySpace,
    cfg: &GameConfig,
) -> Result<VerificationReport> {
    cfg.validate()?;
    profile.check(sys)?;
    let partition = cfg.reference.partition().clone();
    let densities: Vec<&DensityVector> = std::iter::once(&cfg.reference)
        .chain(cfg.extra_densities.iter())
        .collect();
    let ops = cfg
        .time_grid
        .iter()
        .map(|&t| operator_at(sys, profile, t, &cfg.operator, &partition))
        .collect::<Result<Vec<_>>>()?;
    let star = stationary_density(
        ops.last().expect("non-empty grid"),
        &cfg.reference,
        cfg.solver,
    )?
    .density;
    let h_star = entropy::entropy(&star).value;

    // Deviation operators, admissible ones only.
    let mut deviations: Vec<(usize, usize, Vec<UlamMatrix>)> = Vec::new();
    for j in 0..space.channel_count() {
        for (c, g) in space.candidates(j).iter().enumerate() {
            let alt = profile.with_gain(g.clone());
            if space.stability_filter && sys.is_time_invariant() && !system::is_hurwitz(sys, &alt)?
            {
                continue;
            }
            let built: Result<Vec<_>> = cfg
                .time_grid
                .iter()
                .map(|&t| operator_at(sys, &alt, t, &cfg.operator, &partition))
                .collect();
            match built {
                Ok(v) => deviations.push((j, c, v)),
                Err(GameError::Operator { .. })
                | Err(GameError::System(SystemError::Divergence { .. })) => {}
                Err(e) => return Err(e),
            }
        }
    }

    let mut per_density = Vec::with_capacity(densities.len());
    for (id, theta) in densities.iter().enumerate() {
        let eq: Vec<f64> = ops
            .iter()
            .map(|p| criterion_or_inf(p, theta))
            .collect::<Result<_>>()?;
        let mut c1 = Vec::new();
        for (j, c, dev_ops) in &deviations {
            let gains: Vec<f64> = dev_ops
                .iter()
                .zip(&eq)
                .map(|(p, &e)| Ok(gap(e, criterion_or_inf(p, theta)?)))
                .collect::<Result<_>>()?;
            c1.push((
                deviation_margin(&gains, cfg.tol),
                format!("channel {j}, candidate {c}"),
            ));
        }
        let mut dist = Vec::with_capacity(ops.len());
        let mut c3 = Vec::new();
        for (k, p) in ops.iter().enumerate() {
            let pushed = apply_fp(p, theta, true)?;
            dist.push(pushed.l1_distance(&star)?);
            c3.push((
                entropy::entropy(&pushed).value - h_star,
                format!("t = {}", cfg.time_grid[k]),
            ));
        }
        let c2: Vec<(f64, String)> = dist
            .windows(2)
            .enumerate()
            .map(|(k, w)| (w[1] - w[0], format!("t = {}", cfg.time_grid[k + 1])))
            .collect();
        per_density.push(DensityVerification {
            density: id,
            no_deviation: worst(&c1, cfg.tol),
            convergence: worst(&c2, cfg.tol),
            entropy_dominance: worst(&c3, cfg.tol),
        });
    }
    Ok(VerificationReport {
        no_deviation: merge(per_density.iter().map(|d| &d.no_deviation).collect()),
        convergence: merge(per_density.iter().map(|d| &d.convergence).collect()),
        entropy_dominance: merge(per_density.iter().map(|d| &d.entropy_dominance).collect()),
        stationary_entropy: h_star,
        per_density,
    })
}

/// Outcome of the contraction/ball test.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ContractionEstimate {
    pub kappa: f64,
    pub drift: f64,
    pub ball_ok: bool,
    pub pairs: usize,
    pub operators: usize,
    /// Pairs redrawn because the two densities coincided.
    pub resampled: usize,
}

/// Draws `n` density pairs from the L¹ ball of radius `beta` around `center`.
///
/// Each density is a convex combination `(1 − s)·center + s·η` with `η` a
/// random density and `s` chosen so the distance to `center` is uniform in
/// `[0, beta]` (capped at `η` itself).
pub fn sample_ball_pairs(
    center: &DensityVector,
    beta: f64,
    n: usize,
    seed: u64,
) -> Result<(Vec<(DensityVector, DensityVector)>, usize)> {
    if !(beta > 0.0) || n == 0 {
        return Err(GameError::Config(
            "beta must be > 0 and n_pairs >= 1".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let partition = center.partition().clone();
    let m = center.len();
    let draw = |rng: &mut ChaCha8Rng| -> Result<DensityVector> {
        let weights: Vec<f64> = (0..m)
            .map(|_| -rng.random::<f64>().max(1e-300).ln())
            .collect();
        let eta = DensityVector::normalized(partition.clone(), weights)?;
        let dist = eta.l1_distance(center)?;
        let target = beta * rng.random::<f64>();
        let s = if dist > 0.0 {
            (target / dist).min(1.0)
        } else {
            0.0
        };
        let values = center
            .values()
            .iter()
            .zip(eta.values())
            .map(|(c, e)| (1.0 - s) * c + s * e)
            .collect();
        Ok(DensityVector::with_mass_tolerance(
            partition.clone(),
            values,
            1e-9,
        )?)
    };
    let mut pairs = Vec::with_capacity(n);
    let mut resampled = 0;
    while pairs.len() < n {
        let a = draw(&mut rng)?;
        let b = draw(&mut rng)?;
        if a.l1_distance(&b)? < 1e-12 {
            resampled += 1;
            if resampled > 1000 * n {
                return Err(GameError::Config(
                    "could not draw distinct density pairs".into(),
                ));
            }
            continue;
        }
        pairs.push((a, b));
    }
    Ok((pairs, resampled))
}

fn l1_raw(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum()
}

/// Contraction estimate over an explicit list of operators.
pub fn contraction_estimate_for(
    operators: &[UlamMatrix],
    center: &DensityVector,
    beta: f64,
    n_pairs: usize,
    seed: u64,
) -> Result<ContractionEstimate> {
    if operators.is_empty() {
        return Err(GameError::Config("no admissible operators".into()));
    }
    let (pairs, resampled) = sample_ball_pairs(center, beta, n_pairs, seed)?;
    let mut kappa = 0.0_f64;
    let mut drift = 0.0_f64;
    for p in operators {
        let moved = apply_fp(p, center, false)?;
        drift = drift.max(moved.l1_distance(center)?);
        for (a, b) in &pairs {
            let (ma, mb) = (a.masses(), b.masses());
            let num = l1_raw(&p.push_masses(&ma), &p.push_masses(&mb));
            kappa = kappa.max(num / l1_raw(&ma, &mb));
        }
    }
    Ok(ContractionEstimate {
        kappa,
        drift,
        ball_ok: kappa < 1.0 && drift <= beta * (1.0 - kappa),
        pairs: pairs.len(),
        operators: operators.len(),
        resampled,
    })
}

/// Contraction estimate over every admissible profile of `space` and every
/// grid time.
pub fn contraction_estimate(
    sys: &MultiChannelSystem,
    space: &StrategySpace,
    cfg: &GameConfig,
    center: &DensityVector,
    beta: f64,
    n_pairs: usize,
    seed: u64,
) -> Result<ContractionEstimate> {
    let partition = center.partition().clone();
    let mut ops = Vec::new();
    for choice in space.all_choices() {
        let profile = space.profile(&choice);
        if space.stability_filter && sys.is_time_invariant() && !system::is_hurwitz(sys, &profile)?
        {
            continue;
        }
        for &t in &cfg.time_grid {
            match operator_at(sys, &profile, t, &cfg.operator, &partition) {
                Ok(p) => ops.push(p),
                Err(GameError::Operator { .. })
                | Err(GameError::System(SystemError::Divergence { .. })) => {}
                Err(e) => return Err(e),
            }
        }
    }
    contraction_estimate_for(&ops, center, beta, n_pairs, seed)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DecayRow {
    pub density: usize,
    pub t: f64,
    /// `+∞` when the evolved density has mass outside `supp ϑ*` (no floor).
    pub relative_entropy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SkippedDensity {
    pub density: usize,
    pub mass_outside_support: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DecayTrace {
    pub rows: Vec<DecayRow>,
    pub skipped: Vec<SkippedDensity>,
}

impl DecayTrace {
    pub fn sequence(&self, density: usize) -> Vec<f64> {
        self.rows
            .iter()
            .filter(|r| r.density == density)
            .map(|r| r.relative_entropy)
            .collect()
    }
}

/// `H_r(P_t θ | ϑ*)` for every density and time.
///
/// Without a floor, densities with mass outside `supp ϑ*` have infinite
/// relative entropy at `t = 0` and are skipped with a warning. With
/// `floor = Some(δ)` empty cells of `ϑ*` count as `δ` and nothing is skipped.
pub fn entropy_decay_trace(
    sys: &MultiChannelSystem,
    profile: &FeedbackProfile,
    stationary: &DensityVector,
    densities: &[DensityVector],
    times: &[f64],
    settings: &OperatorSettings,
    floor: Option<f64>,
) -> Result<DecayTrace> {
    let partition = stationary.partition().clone();
    let mut skipped = Vec::new();
    let mut active = Vec::new();
    for (id, theta) in densities.iter().enumerate() {
        let outside = entropy::support_violation_mass(theta, stationary)?;
        if floor.is_none() && outside > 0.0 {
            log::warn!(
                "density {id} has mass {outside:.3e} outside the stationary support; relative entropy is infinite, skipped"
            );
            skipped.push(SkippedDensity {
                density: id,
                mass_outside_support: outside,
            });
        } else {
            active.push(id);
        }
    }
    let mut rows = Vec::new();
    let ops = times
        .iter()
        .map(|&t| {
            if t == 0.0 {
                Ok(UlamMatrix::identity(partition.clone()))
            } else {
                operator_at(sys, profile, t, settings, &partition)
            }
        })
        .collect::<Result<Vec<_>>>()?;
    for id in active {
        for (p, &t) in ops.iter().zip(times) {
            let pushed = apply_fp(p, &densities[id], true)?;
            let value = match floor {
                Some(delta) => entropy::relative_entropy_floored(&pushed, stationary, delta)?,
                None => match entropy::relative_entropy(&pushed, stationary) {
                    Ok(v) => v,
                    Err(EntropyError::Support { .. }) => f64::INFINITY,
                    Err(e) => return Err(e.into()),
                },
            };
            rows.push(DecayRow {
                density: id,
                t,
                relative_entropy: value,
            });
        }
    }
    Ok(DecayTrace { rows, skipped })
}

/// Entropy and relative entropy to `stationary` of `P_t θ` along `times`.
pub fn entropy_trace(
    sys: &MultiChannelSystem,
    profile: &FeedbackProfile,
    theta: &DensityVector,
    stationary: &DensityVector,
    times: &[f64],
    settings: &OperatorSettings,
    floor: Option<f64>,
) -> Result<Vec<entropy::EntropyTraceRow>> {
    let partition = theta.partition().clone();
    times
        .iter()
        .map(|&t| {
            let pushed = if t == 0.0 {
                theta.clone()
            } else {
                apply_fp(
                    &operator_at(sys, profile, t, settings, &partition)?,
                    theta,
                    true,
                )?
            };
            let rel = match floor {
                Some(delta) => Some(entropy::relative_entropy_floored(
                    &pushed, stationary, delta,
                )?),
                None => entropy::relative_entropy(&pushed, stationary).ok(),
            };
            Ok(entropy::EntropyTraceRow {
                t,
                entropy: entropy::entropy(&pushed).value,
                relative_entropy_to_stationary: rel,
            })
        })
        .collect()
}

/// Whether `values` never increases by more than `tol`.
pub fn is_non_increasing(values: &[f64], tol: f64) -> bool {
    values
        .windows(2)
        .all(|w| w[1] <= w[0] + tol || w[0] == f64::INFINITY)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::transfer::Partition;
    use nalgebra::DMatrix;

    fn s(v: f64) -> DMatrix<f64> {
        DMatrix::from_element(1, 1, v)
    }

    fn scalar_sys(a: f64, n: usize) -> MultiChannelSystem {
        MultiChannelSystem::new(s(a), vec![s(1.0); n]).unwrap()
    }

    fn cfg(grid: Vec<f64>, cells: usize) -> GameConfig {
        let part = Arc::new(Partition::interval(-1.0, 1.0, cells).unwrap());
        GameConfig::new(grid, DensityVector::uniform(part)).unwrap()
    }

    #[test]
    fn time_grid_validation_messages() {
        assert_eq!(
            validate_time_grid(&[0.5, 1.0, 1.0]).unwrap_err(),
            "[2]: must be increasing"
        );
        assert_eq!(
            validate_time_grid(&[0.0, 1.0]).unwrap_err(),
            "[0]: must be > 0"
        );
        assert!(validate_time_grid(&[]).is_err());
    }

    #[test]
    fn criterion_of_zero_closed_loop_vanishes() {
        let sys = scalar_sys(0.0, 2);
        let c = criterion(
            &sys,
            &FeedbackProfile::zeros(&sys),
            0,
            &cfg(vec![0.5, 1.0], 32),
        )
        .unwrap();
        assert_eq!(c, vec![0.0, 0.0]);
    }

    #[test]
    fn criterion_of_halving_flow_is_ln2() {
        let sys = scalar_sys(-1.0, 1);
        let c = criterion(
            &sys,
            &FeedbackProfile::zeros(&sys),
            0,
            &cfg(vec![2f64.ln()], 256),
        )
        .unwrap();
        assert!((c[0] - 2f64.ln()).abs() < 5e-3, "{}", c[0]);
    }

    #[test]
    fn criterion_ignores_channel_index() {
        let sys = scalar_sys(0.0, 2);
        let p = FeedbackProfile::from_matrices(vec![s(-0.3), s(-0.6)]).unwrap();
        let g = cfg(vec![0.5, 1.0], 64);
        assert_eq!(
            criterion(&sys, &p, 0, &g).unwrap(),
            criterion(&sys, &p, 1, &g).unwrap()
        );
    }

    #[test]
    fn best_response_single_and_exhaustive() {
        let sys = scalar_sys(0.0, 1);
        let g = cfg(vec![0.25, 0.5], 64);
        let single = StrategySpace::from_matrices(&sys, vec![vec![s(-0.7)]], true).unwrap();
        let br = best_response(&sys, &FeedbackProfile::zeros(&sys), 0, &single, &g).unwrap();
        assert_eq!(br.gain, s(-0.7));

        let cands = [-1.2, -0.4, -0.8];
        let space =
            StrategySpace::from_matrices(&sys, vec![cands.iter().map(|&v| s(v)).collect()], true)
                .unwrap();
        let br = best_response(&sys, &FeedbackProfile::zeros(&sys), 0, &space, &g).unwrap();
        // exhaustive argmin of the max-over-grid objective
        let objs: Vec<f64> = cands
            .iter()
            .map(|&v| {
                let p = FeedbackProfile::from_matrices(vec![s(v)]).unwrap();
                objective(&criterion(&sys, &p, 0, &g).unwrap())
            })
            .collect();
        let best = (0..3).fold(0, |b, c| if objs[c] < objs[b] { c } else { b });
        assert_eq!(br.gain, s(cands[best]));
        assert_eq!(best, 1);
    }

    #[test]
    fn symmetric_channels_respond_alike() {
        let sys = scalar_sys(0.2, 2);
        let g = cfg(vec![0.5], 64);
        let list: Vec<DMatrix<f64>> = vec![s(-0.3), s(-0.6), s(-0.9)];
        let space = StrategySpace::from_matrices(&sys, vec![list.clone(), list], true).unwrap();
        let p = FeedbackProfile::from_matrices(vec![s(-0.6), s(-0.6)]).unwrap();
        let b0 = best_response(&sys, &p, 0, &space, &g).unwrap();
        let b1 = best_response(&sys, &p, 1, &space, &g).unwrap();
        assert_eq!(b0.gain, b1.gain);
    }

    #[test]
    fn all_unstable_candidates_give_empty_strategy() {
        let sys = scalar_sys(1.0, 1);
        let space = StrategySpace::from_matrices(&sys, vec![vec![s(0.0), s(-0.5)]], true).unwrap();
        let err = find_equilibrium(&sys, &space, &cfg(vec![0.5], 16), &[0]).unwrap_err();
        assert!(matches!(err, GameError::EmptyStrategy { channel: 0, .. }));
    }

    #[test]
    fn single_candidates_converge_in_one_round() {
        let sys = scalar_sys(0.0, 2);
        let space =
            StrategySpace::from_matrices(&sys, vec![vec![s(-0.5)], vec![s(-0.5)]], true).unwrap();
        let res = find_equilibrium(&sys, &space, &cfg(vec![0.5, 1.0], 64), &[0, 0]).unwrap();
        assert!(res.converged);
        assert_eq!(res.rounds, 1);
        assert_eq!(res.choice, vec![0, 0]);
    }

    #[test]
    fn vacuous_verification_passes() {
        let sys = scalar_sys(0.0, 1);
        let space = StrategySpace::from_matrices(&sys, vec![vec![s(0.0)]], false).unwrap();
        let rep = verify_equilibrium(&sys, &space.profile(&[0]), &space, &cfg(vec![0.5, 1.0], 32))
            .unwrap();
        assert!(rep.all_passed(), "{rep:?}");
    }

    #[test]
    fn identity_and_permutation_contraction() {
        let part = Arc::new(Partition::interval(-1.0, 1.0, 16).unwrap());
        let center = DensityVector::uniform(part.clone());
        let id = UlamMatrix::identity(part.clone());
        let est = contraction_estimate_for(&[id], &center, 0.5, 20, 7).unwrap();
        assert!((est.kappa - 1.0).abs() < 1e-12);
        assert_eq!(est.drift, 0.0);
        assert!(!est.ball_ok);
    }

    #[test]
    fn ball_pairs_stay_in_ball() {
        let part = Arc::new(Partition::interval(0.0, 1.0, 10).unwrap());
        let center = DensityVector::from_fn(part, |x| 1.0 + x[0]).unwrap();
        let (pairs, _) = sample_ball_pairs(&center, 0.3, 50, 1).unwrap();
        for (a, b) in &pairs {
            assert!(a.l1_distance(&center).unwrap() <= 0.3 + 1e-12);
            assert!(b.l1_distance(&center).unwrap() <= 0.3 + 1e-12);
        }
        let (again, _) = sample_ball_pairs(&center, 0.3, 50, 1).unwrap();
        assert_eq!(pairs, again);
    }

    #[test]
    fn decay_trace_skips_unsupported_density() {
        let sys = scalar_sys(-1.0, 1);
        let part = Arc::new(Partition::interval(-1.0, 1.0, 8).unwrap());
        let mut v = vec![0.0; 8];
        v[3] = 2.0;
        v[4] = 2.0;
        let star = DensityVector::new(part.clone(), v).unwrap();
        let trace = entropy_decay_trace(
            &sys,
            &FeedbackProfile::zeros(&sys),
            &star,
            &[star.clone(), DensityVector::uniform(part)],
            &[0.5, 1.0],
            &OperatorSettings::default(),
            None,
        )
        .unwrap();
        assert_eq!(trace.sequence(0), vec![0.0, 0.0]);
        assert_eq!(trace.skipped.len(), 1);
        assert_eq!(trace.skipped[0].density, 1);
    }

    #[test]
    fn non_increasing_helper() {
        assert!(is_non_increasing(&[3.0, 2.0, 2.0 + 1e-9, 0.0], 1e-6));
        assert!(!is_non_increasing(&[1.0, 1.1], 1e-6));
        assert!(is_non_increasing(&[f64::INFINITY, f64::INFINITY, 0.0], 0.0));
    }
}
