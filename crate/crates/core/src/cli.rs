//! Scenario configuration and subcommand dispatch.
//!
//! Exit codes: 0 success, 1 output failure, 2 invalid input, 3 numerical
//! rejection (leakage, divergence, non-convergence, empty strategy).

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

use crate::game::{self, GameConfig, OperatorSettings, StrategySpace};
use crate::io::{self, fmt_real, CsvTable, IoError, Provenance};
use crate::perturb::{self, NoiseSpec, ResilienceConfig, ResilienceReport, SdePathConfig};
use crate::system::{CoefficientSegment, FeedbackGain, FeedbackProfile, MultiChannelSystem};
use crate::transfer::{
    stationary_density, DensityVector, Partition, SolverSettings, DEFAULT_LEAK_TOL,
};

/// Floor used by `--kl-floor` when no value is given.
pub const DEFAULT_KL_FLOOR: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Validation(String),
    #[error("{0}")]
    Numerical(String),
    #[error("{0}")]
    Output(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Output(_) => 1,
            CliError::Validation(_) => 2,
            CliError::Numerical(_) => 3,
        }
    }
}

macro_rules! numerical_from {
    ($($t:ty),*) => {$(
        impl From<$t> for CliError {
            fn from(e: $t) -> Self {
                CliError::Numerical(e.to_string())
            }
        }
    )*};
}
numerical_from!(
    crate::game::GameError,
    crate::perturb::PerturbError,
    crate::transfer::TransferError,
    crate::system::SystemError,
    crate::entropy::EntropyError
);

impl From<IoError> for CliError {
    fn from(e: IoError) -> Self {
        CliError::Output(e.to_string())
    }
}

/// Validation failure located by its path in the config document.
#[derive(Debug, Clone, PartialEq, Error)]
#[error("{path}: {message}")]
pub struct ConfigError {
    pub path: String,
    pub message: String,
}

fn cfg_err(path: impl Into<String>, message: impl Into<String>) -> ConfigError {
    ConfigError {
        path: path.into(),
        message: message.into(),
    }
}

type CfgResult<T> = std::result::Result<T, ConfigError>;

// ---------------------------------------------------------------------------
// Raw config document

type RawMatrix = Vec<Vec<f64>>;

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub system: SystemBlock,
    pub domain: DomainBlock,
    #[serde(default)]
    pub ulam: UlamBlock,
    #[serde(default)]
    pub solver: SolverBlock,
    #[serde(default)]
    pub game: Option<GameBlock>,
    #[serde(default)]
    pub perturb: Option<PerturbBlock>,
    #[serde(default)]
    pub trace: Option<TraceBlock>,
    #[serde(default)]
    pub output: OutputBlock,
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct SystemBlock {
    pub d: usize,
    #[serde(rename = "A")]
    pub a: RawMatrix,
    pub channels: Vec<ChannelBlock>,
    /// Segments after `t = 0`; the top-level coefficients hold from 0.
    #[serde(default)]
    pub schedule: Vec<SegmentBlock>,
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct ChannelBlock {
    #[serde(rename = "B")]
    pub b: RawMatrix,
    /// Gain used by the single-profile subcommands; zero when omitted.
    #[serde(default)]
    pub gains: Option<RawMatrix>,
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct SegmentBlock {
    pub start: f64,
    #[serde(rename = "A")]
    pub a: RawMatrix,
    #[serde(rename = "B")]
    pub b: Vec<RawMatrix>,
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct DomainBlock {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub cells_per_axis: Vec<usize>,
    #[serde(default = "default_leak_tol")]
    pub leak_tol: f64,
}

fn default_leak_tol() -> f64 {
    DEFAULT_LEAK_TOL
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct UlamBlock {
    #[serde(default = "default_q", alias = "samples_per_cell")]
    pub q: usize,
    #[serde(default = "default_t_step")]
    pub t_step: f64,
    #[serde(default = "default_integration_steps")]
    pub integration_steps: usize,
}

fn default_q() -> usize {
    16
}
fn default_t_step() -> f64 {
    1.0
}
fn default_integration_steps() -> usize {
    200
}

impl Default for UlamBlock {
    fn default() -> Self {
        Self {
            q: default_q(),
            t_step: default_t_step(),
            integration_steps: default_integration_steps(),
        }
    }
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct SolverBlock {
    #[serde(default = "default_solver_tol")]
    pub tol: f64,
    #[serde(default = "default_max_iter")]
    pub max_iter: usize,
    #[serde(default)]
    pub cesaro: bool,
}

fn default_solver_tol() -> f64 {
    SolverSettings::default().tol
}
fn default_max_iter() -> usize {
    SolverSettings::default().max_iter
}

impl Default for SolverBlock {
    fn default() -> Self {
        Self {
            tol: default_solver_tol(),
            max_iter: default_max_iter(),
            cesaro: false,
        }
    }
}

#[derive(Debug, Clone, Deserialize, Serialize, PartialEq)]
#[serde(untagged)]
pub enum DensitySource {
    /// Only `"uniform"` is recognized.
    Named(String),
    Csv {
        csv: PathBuf,
    },
}

impl Default for DensitySource {
    fn default() -> Self {
        DensitySource::Named("uniform".into())
    }
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct GameBlock {
    /// Per channel, the candidate gain matrices.
    pub candidates: Vec<Vec<RawMatrix>>,
    pub time_grid: Vec<f64>,
    #[serde(default = "default_game_tol")]
    pub tol: f64,
    #[serde(default = "default_max_rounds")]
    pub max_rounds: usize,
    #[serde(default)]
    pub reference_density: DensitySource,
    #[serde(default)]
    pub extra_densities: Vec<DensitySource>,
    #[serde(default = "default_true")]
    pub stability_filter: bool,
    /// Candidate index per channel to start from; all zeros when omitted.
    #[serde(default)]
    pub initial: Option<Vec<usize>>,
}

fn default_game_tol() -> f64 {
    1e-9
}
fn default_max_rounds() -> usize {
    50
}
fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct PerturbBlock {
    pub sigma: RawMatrix,
    pub epsilon_list: Vec<f64>,
    pub h: f64,
    pub n_paths: usize,
    #[serde(default)]
    pub seed: u64,
    /// Start point of the `perturb` ensemble; domain center when omitted.
    #[serde(default)]
    pub x0: Option<Vec<f64>>,
    /// Horizon of the `perturb` ensemble; `ulam.t_step` when omitted.
    #[serde(default)]
    pub t_end: Option<f64>,
    /// Comparison times of `resilience`; the game grid (or `ulam.t_step`)
    /// when omitted.
    #[serde(default)]
    pub times: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct TraceBlock {
    pub times: Vec<f64>,
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct OutputBlock {
    #[serde(default = "default_out_dir")]
    pub directory: PathBuf,
    #[serde(default = "default_formats")]
    pub formats: Vec<String>,
}

fn default_out_dir() -> PathBuf {
    PathBuf::from("out")
}
fn default_formats() -> Vec<String> {
    vec!["csv".into(), "json".into()]
}

impl Default for OutputBlock {
    fn default() -> Self {
        Self {
            directory: default_out_dir(),
            formats: default_formats(),
        }
    }
}

// ---------------------------------------------------------------------------
// Validated scenario

#[derive(Debug, Clone)]
pub struct GameScenario {
    pub space: StrategySpace,
    pub config: GameConfig,
    pub initial: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct PerturbScenario {
    pub noise: NoiseSpec,
    pub h: f64,
    pub n_paths: usize,
    pub seed: u64,
    pub x0: Vec<f64>,
    pub t_end: f64,
    pub times: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct Scenario {
    pub system: MultiChannelSystem,
    pub profile: FeedbackProfile,
    pub partition: Arc<Partition>,
    pub operator: OperatorSettings,
    pub t_step: f64,
    pub solver: SolverSettings,
    /// Reference density followed by the extra densities.
    pub densities: Vec<DensityVector>,
    pub game: Option<GameScenario>,
    pub perturb: Option<PerturbScenario>,
    pub trace_times: Vec<f64>,
    pub output_dir: PathBuf,
    pub write_csv: bool,
    pub write_json: bool,
}

/// Parses JSON, reporting the document path of the first type error.
pub fn parse_config(bytes: &[u8]) -> CfgResult<ScenarioConfig> {
    let de = &mut serde_json::Deserializer::from_slice(bytes);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        cfg_err(
            if path == "." { "config".into() } else { path },
            e.into_inner().to_string(),
        )
    })
}

fn matrix(
    raw: &RawMatrix,
    rows: usize,
    cols: Option<usize>,
    path: &str,
) -> CfgResult<DMatrix<f64>> {
    if raw.len() != rows {
        return Err(cfg_err(
            path,
            format!("expected {rows} rows, got {}", raw.len()),
        ));
    }
    let cols = cols.unwrap_or_else(|| raw.first().map_or(0, Vec::len));
    if cols == 0 {
        return Err(cfg_err(path, "matrix has no columns"));
    }
    for (i, r) in raw.iter().enumerate() {
        if r.len() != cols {
            return Err(cfg_err(
                format!("{path}[{i}]"),
                format!("expected {cols} entries, got {}", r.len()),
            ));
        }
        if let Some(k) = r.iter().position(|v| !v.is_finite()) {
            return Err(cfg_err(format!("{path}[{i}][{k}]"), "must be finite"));
        }
    }
    Ok(DMatrix::from_row_iterator(
        rows,
        cols,
        raw.iter().flatten().copied(),
    ))
}

fn positive(v: f64, path: &str) -> CfgResult<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(cfg_err(path, "must be > 0"))
    }
}

fn increasing(times: &[f64], path: &str, allow_zero: bool) -> CfgResult<()> {
    if times.is_empty() {
        return Err(cfg_err(path, "must not be empty"));
    }
    for (k, &t) in times.iter().enumerate() {
        if !t.is_finite() || t < 0.0 || (!allow_zero && t == 0.0) {
            return Err(cfg_err(
                format!("{path}[{k}]"),
                if allow_zero {
                    "must be >= 0"
                } else {
                    "must be > 0"
                },
            ));
        }
        if k > 0 && !(t > times[k - 1]) {
            return Err(cfg_err(format!("{path}[{k}]"), "must be increasing"));
        }
    }
    Ok(())
}

fn load_density(
    src: &DensitySource,
    partition: &Arc<Partition>,
    base: &Path,
    path: &str,
) -> CfgResult<DensityVector> {
    match src {
        DensitySource::Named(name) if name == "uniform" => {
            Ok(DensityVector::uniform(partition.clone()))
        }
        DensitySource::Named(name) => Err(cfg_err(path, format!("unknown density `{name}`"))),
        DensitySource::Csv { csv } => {
            let file = if csv.is_absolute() {
                csv.clone()
            } else {
                base.join(csv)
            };
            io::read_density(&file, Some(partition)).map_err(|e| cfg_err(path, e.to_string()))
        }
    }
}

impl ScenarioConfig {
    /// Checks every block and builds the in-memory scenario. Relative density
    /// paths resolve against `base`.
    pub fn validate(&self, base: &Path) -> CfgResult<Scenario> {
        let (system, profile) = self.validate_system()?;
        let d = system.dim();
        let partition = Arc::new(self.validate_domain(d)?);

        let u = &self.ulam;
        if u.q < 2 {
            return Err(cfg_err("ulam.q", "must be >= 2"));
        }
        positive(u.t_step, "ulam.t_step")?;
        if u.integration_steps == 0 {
            return Err(cfg_err("ulam.integration_steps", "must be >= 1"));
        }
        let operator = OperatorSettings {
            q: u.q,
            leak_tol: self.domain.leak_tol,
            integration_steps: u.integration_steps,
        };
        positive(self.solver.tol, "solver.tol")?;
        if self.solver.max_iter == 0 {
            return Err(cfg_err("solver.max_iter", "must be >= 1"));
        }
        let solver = SolverSettings {
            tol: self.solver.tol,
            max_iter: self.solver.max_iter,
            cesaro: self.solver.cesaro,
        };

        let mut densities = vec![DensityVector::uniform(partition.clone())];
        let game = match &self.game {
            None => None,
            Some(g) => {
                let gs = self.validate_game(g, &system, &partition, base, operator, solver)?;
                densities = std::iter::once(gs.config.reference.clone())
                    .chain(gs.config.extra_densities.iter().cloned())
                    .collect();
                Some(gs)
            }
        };
        let perturb = match &self.perturb {
            None => None,
            Some(p) => Some(self.validate_perturb(p, d, &partition)?),
        };
        let trace_times = match &self.trace {
            Some(t) => {
                increasing(&t.times, "trace.times", true)?;
                t.times.clone()
            }
            None => (1..=10).map(|k| 0.5 * k as f64).collect(),
        };
        for (k, f) in self.output.formats.iter().enumerate() {
            if f != "csv" && f != "json" {
                return Err(cfg_err(
                    format!("output.formats[{k}]"),
                    "must be `csv` or `json`",
                ));
            }
        }
        Ok(Scenario {
            system,
            profile,
            partition,
            operator,
            t_step: u.t_step,
            solver,
            densities,
            game,
            perturb,
            trace_times,
            output_dir: self.output.directory.clone(),
            write_csv: self.output.formats.iter().any(|f| f == "csv"),
            write_json: self.output.formats.iter().any(|f| f == "json"),
        })
    }

    fn validate_system(&self) -> CfgResult<(MultiChannelSystem, FeedbackProfile)> {
        let s = &self.system;
        if s.d == 0 {
            return Err(cfg_err("system.d", "must be >= 1"));
        }
        let d = s.d;
        let a = matrix(&s.a, d, Some(d), "system.A")?;
        if s.channels.is_empty() {
            return Err(cfg_err(
                "system.channels",
                "at least one channel is required",
            ));
        }
        let mut inputs = Vec::new();
        let mut gains = Vec::new();
        for (j, ch) in s.channels.iter().enumerate() {
            let b = matrix(&ch.b, d, None, &format!("system.channels[{j}].B"))?;
            let r = b.ncols();
            gains.push(match &ch.gains {
                Some(g) => matrix(g, r, Some(d), &format!("system.channels[{j}].gains"))?,
                None => DMatrix::zeros(r, d),
            });
            inputs.push(b);
        }
        let mut segments = vec![CoefficientSegment {
            start: 0.0,
            drift: a,
            inputs: inputs.clone(),
        }];
        for (k, seg) in s.schedule.iter().enumerate() {
            let path = format!("system.schedule[{k}]");
            if seg.b.len() != inputs.len() {
                return Err(cfg_err(
                    format!("{path}.B"),
                    format!("expected {} input maps", inputs.len()),
                ));
            }
            segments.push(CoefficientSegment {
                start: seg.start,
                drift: matrix(&seg.a, d, Some(d), &format!("{path}.A"))?,
                inputs: seg
                    .b
                    .iter()
                    .enumerate()
                    .map(|(j, b)| matrix(b, d, Some(inputs[j].ncols()), &format!("{path}.B[{j}]")))
                    .collect::<CfgResult<_>>()?,
            });
        }
        let system = MultiChannelSystem::with_schedule(segments)
            .map_err(|e| cfg_err("system.schedule", e.to_string()))?;
        let profile = FeedbackProfile::from_matrices(gains)
            .map_err(|e| cfg_err("system.channels", e.to_string()))?;
        Ok((system, profile))
    }

    fn validate_domain(&self, d: usize) -> CfgResult<Partition> {
        let dm = &self.domain;
        if dm.lower.len() != d {
            return Err(cfg_err("domain.lower", format!("expected {d} entries")));
        }
        if dm.upper.len() != d {
            return Err(cfg_err("domain.upper", format!("expected {d} entries")));
        }
        if dm.cells_per_axis.len() != d {
            return Err(cfg_err(
                "domain.cells_per_axis",
                format!("expected {d} entries"),
            ));
        }
        for k in 0..d {
            if !(dm.lower[k].is_finite() && dm.upper[k].is_finite()) {
                return Err(cfg_err(
                    format!("domain.lower[{k}]"),
                    "bounds must be finite",
                ));
            }
            if !(dm.lower[k] < dm.upper[k]) {
                return Err(cfg_err(
                    format!("domain.lower[{k}]"),
                    "must be below domain.upper",
                ));
            }
            if dm.cells_per_axis[k] == 0 {
                return Err(cfg_err(
                    format!("domain.cells_per_axis[{k}]"),
                    "must be >= 1",
                ));
            }
        }
        if !(0.0..=1.0).contains(&dm.leak_tol) {
            return Err(cfg_err("domain.leak_tol", "must lie in [0, 1]"));
        }
        Partition::new(
            dm.lower.clone(),
            dm.upper.clone(),
            dm.cells_per_axis.clone(),
        )
        .map_err(|e| cfg_err("domain", e.to_string()))
    }

    fn validate_game(
        &self,
        g: &GameBlock,
        system: &MultiChannelSystem,
        partition: &Arc<Partition>,
        base: &Path,
        operator: OperatorSettings,
        solver: SolverSettings,
    ) -> CfgResult<GameScenario> {
        let n = system.channel_count();
        if g.candidates.len() != n {
            return Err(cfg_err(
                "game.candidates",
                format!("expected {n} candidate lists"),
            ));
        }
        let mut lists = Vec::with_capacity(n);
        for (j, list) in g.candidates.iter().enumerate() {
            if list.is_empty() {
                return Err(cfg_err(
                    format!("game.candidates[{j}]"),
                    "must not be empty",
                ));
            }
            lists.push(
                list.iter()
                    .enumerate()
                    .map(|(c, m)| {
                        matrix(
                            m,
                            system.input_width(j),
                            Some(system.dim()),
                            &format!("game.candidates[{j}][{c}]"),
                        )
                        .map(|l| FeedbackGain::new(j, l))
                    })
                    .collect::<CfgResult<Vec<_>>>()?,
            );
        }
        let space = StrategySpace::new(system, lists, g.stability_filter)
            .map_err(|e| cfg_err("game.candidates", e.to_string()))?;
        increasing(&g.time_grid, "game.time_grid", false)?;
        positive(g.tol, "game.tol")?;
        if g.max_rounds == 0 {
            return Err(cfg_err("game.max_rounds", "must be >= 1"));
        }
        let reference = load_density(
            &g.reference_density,
            partition,
            base,
            "game.reference_density",
        )?;
        let extra_densities = g
            .extra_densities
            .iter()
            .enumerate()
            .map(|(k, s)| load_density(s, partition, base, &format!("game.extra_densities[{k}]")))
            .collect::<CfgResult<Vec<_>>>()?;
        let initial = g.initial.clone().unwrap_or_else(|| vec![0; n]);
        if initial.len() != n {
            return Err(cfg_err("game.initial", format!("expected {n} indices")));
        }
        for (j, &c) in initial.iter().enumerate() {
            if c >= g.candidates[j].len() {
                return Err(cfg_err(
                    format!("game.initial[{j}]"),
                    "candidate index out of range",
                ));
            }
        }
        Ok(GameScenario {
            space,
            config: GameConfig {
                time_grid: g.time_grid.clone(),
                reference,
                tol: g.tol,
                max_rounds: g.max_rounds,
                operator,
                solver,
                extra_densities,
            },
            initial,
        })
    }

    fn validate_perturb(
        &self,
        p: &PerturbBlock,
        d: usize,
        partition: &Partition,
    ) -> CfgResult<PerturbScenario> {
        let sigma = matrix(&p.sigma, d, Some(d), "perturb.sigma")?;
        let noise = NoiseSpec::new(sigma, p.epsilon_list.clone())
            .map_err(|e| cfg_err("perturb.epsilon_list", e.to_string()))?;
        positive(p.h, "perturb.h")?;
        if p.n_paths < perturb::MIN_PATHS_PER_CELL {
            return Err(cfg_err(
                "perturb.n_paths",
                format!("must be >= {}", perturb::MIN_PATHS_PER_CELL),
            ));
        }
        let x0 = match &p.x0 {
            Some(x) if x.len() != d => {
                return Err(cfg_err("perturb.x0", format!("expected {d} entries")))
            }
            Some(x) if x.iter().any(|v| !v.is_finite()) => {
                return Err(cfg_err("perturb.x0", "must be finite"))
            }
            Some(x) => x.clone(),
            None => (0..d)
                .map(|k| 0.5 * (partition.lower()[k] + partition.upper()[k]))
                .collect(),
        };
        let t_end = p.t_end.unwrap_or(self.ulam.t_step);
        positive(t_end, "perturb.t_end")?;
        let times = match (&p.times, &self.game) {
            (Some(t), _) => {
                increasing(t, "perturb.times", false)?;
                t.clone()
            }
            (None, Some(g)) => g.time_grid.clone(),
            (None, None) => vec![self.ulam.t_step],
        };
        Ok(PerturbScenario {
            noise,
            h: p.h,
            n_paths: p.n_paths,
            seed: p.seed,
            x0,
            t_end,
            times,
        })
    }
}

// ---------------------------------------------------------------------------
// Command line

#[derive(Debug, Parser)]
#[command(
    name = "fpgame",
    version,
    about = "Transfer-operator analysis of feedback equilibria"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Build and export the transfer matrix at `ulam.t_step`.
    Ulam(Common),
    /// Solve for the stationary density at `ulam.t_step`.
    Stationary(Common),
    /// Entropy and relative entropy to the stationary density over time.
    EntropyTrace(Common),
    /// Best-response search, verification and report.
    Equilibrium(Common),
    /// Euler–Maruyama ensemble statistics per noise level.
    Perturb(Common),
    /// Perturbed versus unperturbed density evolution per noise level.
    Resilience(Common),
}

#[derive(Debug, Clone, Args)]
struct Common {
    #[arg(long, value_name = "PATH")]
    config: PathBuf,
    /// Output directory (overrides `output.directory`).
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Overrides `perturb.seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads; results do not depend on it.
    #[arg(long)]
    threads: Option<usize>,
    /// Give empty reference cells this value in relative entropies.
    #[arg(long, value_name = "DELTA", num_args = 0..=1, default_missing_value = "1e-12")]
    kl_floor: Option<f64>,
    /// Also evaluate resilience at every unilateral deviation.
    #[arg(long)]
    with_deviations: bool,
}

/// Parses `args` (including the program name) and runs the subcommand.
/// Returns the process exit code; diagnostics go to stderr.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match execute(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

struct Context {
    scenario: Scenario,
    provenance: Provenance,
    out: PathBuf,
    flags: Common,
}

impl Context {
    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn json<T: Serialize>(&self, name: &str, body: T) -> Result<(), CliError> {
        if !self.scenario.write_json {
            return Ok(());
        }
        let mut value = serde_json::to_value(body).map_err(|e| CliError::Output(e.to_string()))?;
        if let serde_json::Value::Object(map) = &mut value {
            map.insert(
                "provenance".into(),
                serde_json::to_value(&self.provenance).expect("plain struct"),
            );
        }
        Ok(io::write_json(&self.path(name), &value)?)
    }

    fn csv(&self, name: &str, table: &CsvTable) -> Result<(), CliError> {
        if self.scenario.write_csv {
            table.write(&self.path(name))?;
        }
        Ok(())
    }

    fn table(&self, header: &[&str]) -> CsvTable {
        CsvTable::new(Some(&self.provenance), header)
    }

    fn kl_floor(&self) -> Result<Option<f64>, CliError> {
        match self.flags.kl_floor {
            Some(f) if !(f > 0.0) => Err(CliError::Validation("--kl-floor: must be > 0".into())),
            other => Ok(other),
        }
    }

    fn perturb(&self) -> Result<PerturbScenario, CliError> {
        let mut p = self.scenario.perturb.clone().ok_or_else(|| {
            CliError::Validation("perturb: block is required for this subcommand".into())
        })?;
        if let Some(seed) = self.flags.seed {
            p.seed = seed;
        }
        Ok(p)
    }
}

type Runner = fn(&Context) -> Result<(), CliError>;

fn execute(command: Command) -> Result<(), CliError> {
    let (flags, runner): (Common, Runner) = match command {
        Command::Ulam(c) => (c, cmd_ulam),
        Command::Stationary(c) => (c, cmd_stationary),
        Command::EntropyTrace(c) => (c, cmd_entropy_trace),
        Command::Equilibrium(c) => (c, cmd_equilibrium),
        Command::Perturb(c) => (c, cmd_perturb),
        Command::Resilience(c) => (c, cmd_resilience),
    };
    let bytes = fs::read(&flags.config)
        .map_err(|e| CliError::Validation(format!("{}: {e}", flags.config.display())))?;
    let base = flags
        .config
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_default();
    let scenario = parse_config(&bytes)
        .and_then(|c| c.validate(&base))
        .map_err(|e| CliError::Validation(e.to_string()))?;
    let out = flags
        .out
        .clone()
        .unwrap_or_else(|| scenario.output_dir.clone());
    let ctx = Context {
        scenario,
        provenance: Provenance::for_config(&bytes),
        out,
        flags,
    };
    match ctx.flags.threads {
        Some(0) => Err(CliError::Validation("--threads: must be >= 1".into())),
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| CliError::Output(e.to_string()))?
            .install(|| runner(&ctx)),
        None => runner(&ctx),
    }
}

fn cmd_ulam(ctx: &Context) -> Result<(), CliError> {
    let s = &ctx.scenario;
    let p = game::operator_at(&s.system, &s.profile, s.t_step, &s.operator, &s.partition)?;
    if s.write_csv {
        io::write_ulam(&ctx.path("ulam.csv"), &p, &ctx.provenance)?;
    }
    log::info!(
        "operator: {} cells, {} nonzeros, max leakage {:.3e}",
        p.size(),
        p.nnz(),
        p.max_leakage()
    );
    Ok(())
}

fn solve_stationary(s: &Scenario) -> Result<(crate::transfer::StationarySolution, f64), CliError> {
    let p = game::operator_at(&s.system, &s.profile, s.t_step, &s.operator, &s.partition)?;
    let sol = stationary_density(&p, &s.densities[0], s.solver)?;
    Ok((sol, p.max_leakage()))
}

fn cmd_stationary(ctx: &Context) -> Result<(), CliError> {
    let s = &ctx.scenario;
    let (sol, leak) = solve_stationary(s)?;
    if s.write_csv {
        io::write_density(
            &ctx.path("stationary.csv"),
            &sol.density,
            Some(&ctx.provenance),
        )?;
    }
    ctx.json(
        "stationary_report.json",
        json!({
            "t_step": s.t_step,
            "iterations": sol.iterations,
            "residual": sol.residual,
            "entropy": crate::entropy::entropy(&sol.density).value,
            "support_cells": sol.density.support_len(),
            "max_leakage": leak,
        }),
    )
}

fn cmd_entropy_trace(ctx: &Context) -> Result<(), CliError> {
    let s = &ctx.scenario;
    let (sol, _) = solve_stationary(s)?;
    let rows = game::entropy_trace(
        &s.system,
        &s.profile,
        &s.densities[0],
        &sol.density,
        &s.trace_times,
        &s.operator,
        ctx.kl_floor()?,
    )?;
    let mut table = ctx.table(&["t", "entropy", "relative_entropy_to_stationary"]);
    for r in &rows {
        table.row(&[
            fmt_real(r.t),
            fmt_real(r.entropy),
            fmt_real(r.relative_entropy_to_stationary.unwrap_or(f64::INFINITY)),
        ]);
    }
    ctx.csv("entropy_trace.csv", &table)
}

fn gains_json(profile: &FeedbackProfile) -> Vec<Vec<Vec<f64>>> {
    profile
        .gains()
        .iter()
        .map(|g| {
            (0..g.gain.nrows())
                .map(|i| g.gain.row(i).iter().copied().collect())
                .collect()
        })
        .collect()
}

fn cmd_equilibrium(ctx: &Context) -> Result<(), CliError> {
    let s = &ctx.scenario;
    let g = s.game.as_ref().ok_or_else(|| {
        CliError::Validation("game: block is required for this subcommand".into())
    })?;
    let res = game::find_equilibrium(&s.system, &g.space, &g.config, &g.initial)?;
    let verification = if res.converged {
        Some(game::verify_equilibrium(
            &s.system,
            &res.profile,
            &g.space,
            &g.config,
        )?)
    } else {
        None
    };

    let mut table = ctx.table(&["channel", "t", "criterion"]);
    for (j, row) in res.per_channel_criteria.iter().enumerate() {
        for (k, v) in row.iter().enumerate() {
            table.row(&[j.to_string(), fmt_real(g.config.time_grid[k]), fmt_real(*v)]);
        }
    }
    ctx.csv("criteria.csv", &table)?;
    if let (Some(st), true) = (&res.stationary, s.write_csv) {
        io::write_density(
            &ctx.path("stationary.csv"),
            &st.density,
            Some(&ctx.provenance),
        )?;
    }
    ctx.json(
        "equilibrium.json",
        json!({
            "converged": res.converged,
            "rounds": res.rounds,
            "choice": res.choice,
            "history": res.history,
            "profile": gains_json(&res.profile),
            "profile_fingerprint": res.profile.fingerprint(),
            "time_grid": g.config.time_grid,
            "criteria": res.per_channel_criteria,
            "stationary": res.stationary.as_ref().map(|st| json!({
                "entropy": st.entropy,
                "iterations": st.iterations,
                "residual": st.residual,
                "grid_residuals": st.grid_residuals,
                "convergence_distances": st.convergence_distances,
                "entropy_excess": st.entropy_excess,
            })),
            "verification": verification,
        }),
    )?;
    if !res.converged {
        return Err(CliError::Numerical(format!(
            "best-response iteration did not converge within {} rounds",
            res.rounds
        )));
    }
    Ok(())
}

fn cmd_perturb(ctx: &Context) -> Result<(), CliError> {
    let s = &ctx.scenario;
    let p = ctx.perturb()?;
    let cfg = SdePathConfig {
        h: p.h,
        n_steps: perturb::steps_for(p.t_end, p.h),
        n_paths: p.n_paths,
        seed: p.seed,
    };
    let mut table = ctx.table(&["epsilon", "t", "component", "mean", "variance"]);
    let mut summary = Vec::new();
    for &eps in p.noise.epsilons() {
        let (_, stats) =
            perturb::simulate_ensemble(&s.system, &s.profile, &p.noise, eps, &p.x0, &cfg)?;
        for k in 0..stats.mean.len() {
            table.row(&[
                fmt_real(eps),
                fmt_real(stats.t),
                k.to_string(),
                fmt_real(stats.mean[k]),
                fmt_real(stats.variance[k]),
            ]);
        }
        summary.push(json!({ "epsilon": eps, "stats": stats }));
    }
    ctx.csv("perturb.csv", &table)?;
    ctx.json(
        "perturb.json",
        json!({ "seed": p.seed, "h": p.h, "n_steps": cfg.n_steps, "x0": p.x0, "ensembles": summary }),
    )
}

fn resilience_table(ctx: &Context, report: &ResilienceReport) -> CsvTable {
    let mut table = ctx.table(&[
        "epsilon",
        "t",
        "density_id",
        "l1_distance",
        "rel_entropy",
        "support_violation_mass",
    ]);
    for e in &report.entries {
        table.row(&[
            fmt_real(e.epsilon),
            fmt_real(e.t),
            e.density_id.to_string(),
            fmt_real(e.l1_distance),
            fmt_real(e.rel_entropy.unwrap_or(f64::INFINITY)),
            fmt_real(e.support_violation_mass),
        ]);
    }
    table
}

fn resilience_summary(report: &ResilienceReport) -> serde_json::Value {
    json!({
        "profile": report.profile,
        "epsilons": report.epsilons,
        "theta_eps": report.theta_eps,
        "monotone_flag": report.monotone_flag,
        "stationary_distance": report.stationary_distance,
        "stationary_monotone": report.stationary_monotone,
    })
}

fn cmd_resilience(ctx: &Context) -> Result<(), CliError> {
    let s = &ctx.scenario;
    let p = ctx.perturb()?;
    let cfg = ResilienceConfig {
        times: p.times.clone(),
        stationary_time: s.t_step,
        path: SdePathConfig {
            h: p.h,
            n_steps: 0,
            n_paths: p.n_paths,
            seed: p.seed,
        },
        leak_tol: s.operator.leak_tol,
        solver: s.solver,
        kl_floor: ctx.kl_floor()?,
    };
    let report = perturb::resilience_report(&s.system, &s.profile, &p.noise, &cfg, &s.densities)?;
    ctx.csv("resilience.csv", &resilience_table(ctx, &report))?;

    let mut deviations = Vec::new();
    if ctx.flags.with_deviations {
        let g = s.game.as_ref().ok_or_else(|| {
            CliError::Validation("game: block is required for --with-deviations".into())
        })?;
        for j in 0..g.space.channel_count() {
            for (c, gain) in g.space.candidates(j).iter().enumerate() {
                if gain == s.profile.gain(j) {
                    continue;
                }
                let alt = s.profile.with_gain(gain.clone());
                match perturb::resilience_report(&s.system, &alt, &p.noise, &cfg, &s.densities) {
                    Ok(r) => {
                        ctx.csv(
                            &format!("resilience_deviation_ch{j}_cand{c}.csv"),
                            &resilience_table(ctx, &r),
                        )?;
                        deviations.push(json!({ "channel": j, "candidate": c, "report": resilience_summary(&r) }));
                    }
                    Err(e) => {
                        log::warn!("deviation channel {j}, candidate {c}: {e}");
                        deviations
                            .push(json!({ "channel": j, "candidate": c, "error": e.to_string() }));
                    }
                }
            }
        }
    }
    let mut summary = resilience_summary(&report);
    summary["seed"] = json!(p.seed);
    summary["times"] = json!(p.times);
    summary["kl_floor"] = json!(cfg.kl_floor);
    if ctx.flags.with_deviations {
        summary["deviations"] = json!(deviations);
    }
    ctx.json("resilience.json", summary)
}
