//! Multi-channel linear plants, constant-gain feedback profiles and their
//! state-transition matrices.
//!
//! The plant is `ẋ = A(t)x + Σ_j B_j(t)u_j` with `u_j = L_j x`. Coefficients
//! are either constant or piecewise constant over a schedule that starts at
//! `t = 0`. Channel indices are zero-based.

use nalgebra::DMatrix;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::transfer::PointMap;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SystemError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("integration diverged at t = {t}: non-finite transition matrix")]
    Divergence { t: f64 },
    #[error("transition matrix of the remaining channels is near-singular at t = {t} (condition number {condition:.3e})")]
    Conditioning { t: f64, condition: f64 },
}

type Result<T> = std::result::Result<T, SystemError>;

/// Condition number above which `Φ_rest` is treated as singular.
const MAX_CONDITION: f64 = 1e12;

/// Coefficients active from `start` until the next segment begins.
#[derive(Debug, Clone, PartialEq)]
pub struct CoefficientSegment {
    pub start: f64,
    pub drift: DMatrix<f64>,
    pub inputs: Vec<DMatrix<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MultiChannelSystem {
    dim: usize,
    segments: Vec<CoefficientSegment>,
}

impl MultiChannelSystem {
    /// Time-invariant system with drift `A` and input maps `B_j`.
    pub fn new(drift: DMatrix<f64>, inputs: Vec<DMatrix<f64>>) -> Result<Self> {
        Self::with_schedule(vec![CoefficientSegment {
            start: 0.0,
            drift,
            inputs,
        }])
    }

    /// Piecewise-constant system. Breakpoints must start at zero and increase
    /// strictly; every segment must agree on `d`, `N` and the widths `r_j`.
    pub fn with_schedule(segments: Vec<CoefficientSegment>) -> Result<Self> {
        let first = segments
            .first()
            .ok_or_else(|| SystemError::Config("empty coefficient schedule".into()))?;
        if first.start != 0.0 {
            return Err(SystemError::Config(format!(
                "schedule must start at t = 0, got {}",
                first.start
            )));
        }
        let dim = first.drift.nrows();
        if dim == 0 {
            return Err(SystemError::Config(
                "state dimension must be positive".into(),
            ));
        }
        let widths: Vec<usize> = first.inputs.iter().map(|b| b.ncols()).collect();
        if widths.is_empty() {
            return Err(SystemError::Config(
                "at least one input channel is required".into(),
            ));
        }
        for (k, seg) in segments.iter().enumerate() {
            if k > 0 && !(seg.start > segments[k - 1].start) {
                return Err(SystemError::Config(format!(
                    "schedule breakpoint {k} ({}) is not strictly increasing",
                    seg.start
                )));
            }
            if seg.drift.nrows() != dim || seg.drift.ncols() != dim {
                return Err(SystemError::Config(format!(
                    "segment {k}: drift is {}x{}, expected {dim}x{dim}",
                    seg.drift.nrows(),
                    seg.drift.ncols()
                )));
            }
            if seg.inputs.len() != widths.len() {
                return Err(SystemError::Config(format!(
                    "segment {k}: {} input maps, expected {}",
                    seg.inputs.len(),
                    widths.len()
                )));
            }
            for (j, b) in seg.inputs.iter().enumerate() {
                if b.nrows() != dim || b.ncols() != widths[j] || b.ncols() == 0 {
                    return Err(SystemError::Config(format!(
                        "segment {k}: B[{j}] is {}x{}, expected {dim}x{}",
                        b.nrows(),
                        b.ncols(),
                        widths[j]
                    )));
                }
            }
            let finite = seg
                .drift
                .iter()
                .chain(seg.inputs.iter().flat_map(|b| b.iter()));
            if finite.into_iter().any(|v| !v.is_finite()) {
                return Err(SystemError::Config(format!(
                    "segment {k}: non-finite coefficient"
                )));
            }
        }
        Ok(Self { dim, segments })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn channel_count(&self) -> usize {
        self.segments[0].inputs.len()
    }

    /// Column count `r_j` of `B_j`.
    pub fn input_width(&self, channel: usize) -> usize {
        self.segments[0].inputs[channel].ncols()
    }

    pub fn segments(&self) -> &[CoefficientSegment] {
        &self.segments
    }

    pub fn is_time_invariant(&self) -> bool {
        self.segments.len() == 1
    }

    /// Index of the segment active at `t`; times before zero use the first one.
    pub fn segment_index(&self, t: f64) -> usize {
        self.segments
            .iter()
            .rposition(|s| s.start <= t)
            .unwrap_or(0)
    }

    fn breakpoints_within(&self, t0: f64, t1: f64) -> impl Iterator<Item = f64> + '_ {
        self.segments
            .iter()
            .skip(1)
            .map(|s| s.start)
            .filter(move |&s| s > t0 && s < t1)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeedbackGain {
    pub channel: usize,
    pub gain: DMatrix<f64>,
}

impl FeedbackGain {
    pub fn new(channel: usize, gain: DMatrix<f64>) -> Self {
        Self { channel, gain }
    }

    pub fn zeros(sys: &MultiChannelSystem, channel: usize) -> Self {
        Self::new(channel, DMatrix::zeros(sys.input_width(channel), sys.dim()))
    }

    pub fn check(&self, sys: &MultiChannelSystem) -> Result<()> {
        if self.channel >= sys.channel_count() {
            return Err(SystemError::Config(format!(
                "gain refers to channel {} but the system has {} channels",
                self.channel,
                sys.channel_count()
            )));
        }
        let (r, d) = (sys.input_width(self.channel), sys.dim());
        if self.gain.nrows() != r || self.gain.ncols() != d {
            return Err(SystemError::Config(format!(
                "gain for channel {} is {}x{}, expected {r}x{d}",
                self.channel,
                self.gain.nrows(),
                self.gain.ncols()
            )));
        }
        if self.gain.iter().any(|v| !v.is_finite()) {
            return Err(SystemError::Config(format!(
                "gain for channel {} has non-finite entries",
                self.channel
            )));
        }
        Ok(())
    }
}

/// One gain per channel, stored in channel order.
#[derive(Debug, Clone, PartialEq)]
pub struct FeedbackProfile {
    gains: Vec<FeedbackGain>,
}

impl FeedbackProfile {
    /// Accepts the gains in any order; each channel `0..N` must appear exactly once.
    pub fn new(mut gains: Vec<FeedbackGain>) -> Result<Self> {
        gains.sort_by_key(|g| g.channel);
        for (k, g) in gains.iter().enumerate() {
            if g.channel != k {
                return Err(SystemError::Config(format!(
                    "feedback profile must list channels 0..{} exactly once",
                    gains.len()
                )));
            }
        }
        if gains.is_empty() {
            return Err(SystemError::Config("feedback profile is empty".into()));
        }
        Ok(Self { gains })
    }

    pub fn from_matrices(gains: Vec<DMatrix<f64>>) -> Result<Self> {
        Self::new(
            gains
                .into_iter()
                .enumerate()
                .map(|(j, l)| FeedbackGain::new(j, l))
                .collect(),
        )
    }

    pub fn zeros(sys: &MultiChannelSystem) -> Self {
        Self {
            gains: (0..sys.channel_count())
                .map(|j| FeedbackGain::zeros(sys, j))
                .collect(),
        }
    }

    pub fn gains(&self) -> &[FeedbackGain] {
        &self.gains
    }

    pub fn gain(&self, channel: usize) -> &FeedbackGain {
        &self.gains[channel]
    }

    pub fn len(&self) -> usize {
        self.gains.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gains.is_empty()
    }

    /// Copy of this profile with channel `j` replaced by `gain`.
    pub fn with_gain(&self, gain: FeedbackGain) -> Self {
        let mut gains = self.gains.clone();
        let j = gain.channel;
        gains[j] = gain;
        Self { gains }
    }

    pub fn check(&self, sys: &MultiChannelSystem) -> Result<()> {
        if self.gains.len() != sys.channel_count() {
            return Err(SystemError::Config(format!(
                "profile has {} gains but the system has {} channels",
                self.gains.len(),
                sys.channel_count()
            )));
        }
        self.gains.iter().try_for_each(|g| g.check(sys))
    }

    /// Short content hash used to tag operators built from this profile.
    pub fn fingerprint(&self) -> String {
        let mut hasher = Sha256::new();
        for g in &self.gains {
            hasher.update((g.channel as u64).to_le_bytes());
            hasher.update((g.gain.nrows() as u64).to_le_bytes());
            hasher.update((g.gain.ncols() as u64).to_le_bytes());
            for v in g.gain.iter() {
                hasher.update(v.to_bits().to_le_bytes());
            }
        }
        hex::encode(&hasher.finalize()[..8])
    }
}

fn closed_loop_on_segment(
    seg: &CoefficientSegment,
    profile: &FeedbackProfile,
    skip: Option<usize>,
) -> DMatrix<f64> {
    let mut m = seg.drift.clone();
    for g in profile.gains() {
        if Some(g.channel) != skip {
            m += &seg.inputs[g.channel] * &g.gain;
        }
    }
    m
}

/// `A(t) + Σ_j B_j(t) L_j` on the schedule segment active at `t`.
pub fn closed_loop_matrix(
    sys: &MultiChannelSystem,
    profile: &FeedbackProfile,
    t: f64,
) -> Result<DMatrix<f64>> {
    profile.check(sys)?;
    let seg = &sys.segments[sys.segment_index(t)];
    Ok(closed_loop_on_segment(seg, profile, None))
}

/// Whether every closed-loop eigenvalue has negative real part on every
/// schedule segment.
pub fn is_hurwitz(sys: &MultiChannelSystem, profile: &FeedbackProfile) -> Result<bool> {
    profile.check(sys)?;
    Ok(sys.segments.iter().all(|seg| {
        let m = closed_loop_on_segment(seg, profile, None);
        m.complex_eigenvalues().iter().all(|z| z.re < 0.0)
    }))
}

/// `Φ(t1, t0)` together with its time span.
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionMatrix {
    pub t0: f64,
    pub t1: f64,
    pub phi: DMatrix<f64>,
}

impl TransitionMatrix {
    pub fn identity(dim: usize, t: f64) -> Self {
        Self {
            t0: t,
            t1: t,
            phi: DMatrix::identity(dim, dim),
        }
    }
}

fn check_interval(t0: f64, t1: f64, steps: usize) -> Result<()> {
    if !t0.is_finite() || !t1.is_finite() || t1 < t0 {
        return Err(SystemError::Config(format!(
            "integration interval [{t0}, {t1}] is invalid"
        )));
    }
    if steps == 0 {
        return Err(SystemError::Config("steps must be at least 1".into()));
    }
    Ok(())
}

/// Splits `[t0, t1]` at schedule breakpoints and shares `steps` between the
/// pieces in proportion to their length (at least one step each).
fn pieces(sys: &MultiChannelSystem, t0: f64, t1: f64, steps: usize) -> Vec<(f64, f64, usize)> {
    let mut cuts = vec![t0];
    cuts.extend(sys.breakpoints_within(t0, t1));
    cuts.push(t1);
    let span = t1 - t0;
    cuts.windows(2)
        .map(|w| {
            let n = if cuts.len() == 2 {
                steps
            } else {
                ((steps as f64) * (w[1] - w[0]) / span).ceil().max(1.0) as usize
            };
            (w[0], w[1], n)
        })
        .collect()
}

fn all_finite(m: &DMatrix<f64>) -> bool {
    m.iter().all(|v| v.is_finite())
}

/// Fixed-step RK4 for `Φ̇ = M(t)Φ`, `Φ(t0) = I`.
pub fn integrate_transition(
    sys: &MultiChannelSystem,
    profile: &FeedbackProfile,
    t0: f64,
    t1: f64,
    steps: usize,
) -> Result<TransitionMatrix> {
    profile.check(sys)?;
    check_interval(t0, t1, steps)?;
    let d = sys.dim();
    let mut phi = DMatrix::identity(d, d);
    if t1 == t0 {
        return Ok(TransitionMatrix { t0, t1, phi });
    }
    for (a, b, n) in pieces(sys, t0, t1, steps) {
        // Coefficients are constant on each piece.
        let seg = &sys.segments[sys.segment_index(0.5 * (a + b))];
        let m = closed_loop_on_segment(seg, profile, None);
        let h = (b - a) / n as f64;
        for k in 0..n {
            let k1 = &m * &phi;
            let k2 = &m * (&phi + &k1 * (0.5 * h));
            let k3 = &m * (&phi + &k2 * (0.5 * h));
            let k4 = &m * (&phi + &k3 * h);
            phi += (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0);
            if !all_finite(&phi) {
                return Err(SystemError::Divergence {
                    t: a + (k + 1) as f64 * h,
                });
            }
        }
    }
    Ok(TransitionMatrix { t0, t1, phi })
}

fn condition_number(m: &DMatrix<f64>) -> f64 {
    let sv = m.singular_values();
    let max = sv.max();
    let min = sv.min();
    if min <= 0.0 {
        f64::INFINITY
    } else {
        max / min
    }
}

/// Channel-`j` factorization `Φ = Φ_rest · Φ_j`.
///
/// `Φ_rest` is driven by every channel except `j`; `Φ_j` solves
/// `Φ̇_j = Φ_rest⁻¹ B_j L_j Φ_rest Φ_j`. Both are advanced together with RK4
/// so the stage values of `Φ_rest` feed the stages of `Φ_j`.
pub fn decompose_transition(
    sys: &MultiChannelSystem,
    profile: &FeedbackProfile,
    channel: usize,
    t0: f64,
    t1: f64,
    steps: usize,
) -> Result<(TransitionMatrix, TransitionMatrix)> {
    profile.check(sys)?;
    check_interval(t0, t1, steps)?;
    if channel >= sys.channel_count() {
        return Err(SystemError::Config(format!(
            "channel {channel} out of range (system has {})",
            sys.channel_count()
        )));
    }
    let d = sys.dim();
    let mut rest = DMatrix::identity(d, d);
    let mut own = DMatrix::identity(d, d);
    if t1 > t0 {
        for (a, b, n) in pieces(sys, t0, t1, steps) {
            let seg = &sys.segments[sys.segment_index(0.5 * (a + b))];
            let m_rest = closed_loop_on_segment(seg, profile, Some(channel));
            let bl = &seg.inputs[channel] * &profile.gain(channel).gain;
            let h = (b - a) / n as f64;
            let rhs = |t: f64, r: &DMatrix<f64>, o: &DMatrix<f64>| -> Result<_> {
                let cond = condition_number(r);
                if !(cond < MAX_CONDITION) {
                    return Err(SystemError::Conditioning { t, condition: cond });
                }
                let r_inv = r
                    .clone()
                    .try_inverse()
                    .ok_or(SystemError::Conditioning { t, condition: cond })?;
                Ok((&m_rest * r, r_inv * &bl * r * o))
            };
            for k in 0..n {
                let t = a + k as f64 * h;
                let (r1, o1) = rhs(t, &rest, &own)?;
                let (r2, o2) = rhs(
                    t + 0.5 * h,
                    &(&rest + &r1 * (0.5 * h)),
                    &(&own + &o1 * (0.5 * h)),
                )?;
                let (r3, o3) = rhs(
                    t + 0.5 * h,
                    &(&rest + &r2 * (0.5 * h)),
                    &(&own + &o2 * (0.5 * h)),
                )?;
                let (r4, o4) = rhs(t + h, &(&rest + &r3 * h), &(&own + &o3 * h))?;
                rest += (r1 + r2 * 2.0 + r3 * 2.0 + r4) * (h / 6.0);
                own += (o1 + o2 * 2.0 + o3 * 2.0 + o4) * (h / 6.0);
                if !all_finite(&rest) || !all_finite(&own) {
                    return Err(SystemError::Divergence { t: t + h });
                }
            }
        }
    }
    Ok((
        TransitionMatrix { t0, t1, phi: rest },
        TransitionMatrix { t0, t1, phi: own },
    ))
}

/// The linear point map `x ↦ Φ(t1, t0) x`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearFlow {
    transition: TransitionMatrix,
}

impl LinearFlow {
    pub fn new(transition: TransitionMatrix) -> Self {
        Self { transition }
    }

    pub fn transition(&self) -> &TransitionMatrix {
        &self.transition
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; x.len()];
        self.map_point(x, &mut out);
        out
    }
}

impl PointMap for LinearFlow {
    fn map_point(&self, x: &[f64], out: &mut [f64]) {
        let phi = &self.transition.phi;
        for (i, o) in out.iter_mut().enumerate() {
            *o = (0..x.len()).map(|k| phi[(i, k)] * x[k]).sum();
        }
    }
}

pub fn flow_map(
    sys: &MultiChannelSystem,
    profile: &FeedbackProfile,
    t0: f64,
    t1: f64,
    steps: usize,
) -> Result<LinearFlow> {
    integrate_transition(sys, profile, t0, t1, steps).map(LinearFlow::new)
}


#[cfg(test)]
mod proptests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn flow_is_linear(
            entries in proptest::collection::vec(-1.0f64..1.0, 4),
            x in proptest::collection::vec(-1.0f64..1.0, 2),
            y in proptest::collection::vec(-1.0f64..1.0, 2),
            alpha in -2.0f64..2.0,
            beta in -2.0f64..2.0,
        ) {
            let sys = MultiChannelSystem::new(
                DMatrix::from_row_slice(2, 2, &entries),
                vec![DMatrix::from_row_slice(2, 1, &[0.0, 1.0])],
            ).unwrap();
            let f = flow_map(&sys, &FeedbackProfile::zeros(&sys), 0.0, 0.5, 50).unwrap();
            let combo: Vec<f64> = x.iter().zip(&y).map(|(a, b)| alpha * a + beta * b).collect();
            let lhs = f.apply(&combo);
            let (fx, fy) = (f.apply(&x), f.apply(&y));
            for i in 0..2 {
                prop_assert!((lhs[i] - (alpha * fx[i] + beta * fy[i])).abs() < 1e-12);
            }
        }

        #[test]
        fn decomposition_product_reproduces_full(
            entries in proptest::collection::vec(-0.5f64..0.5, 4),
            l0 in proptest::collection::vec(-0.5f64..0.5, 2),
            l1 in proptest::collection::vec(-0.5f64..0.5, 2),
            channel in 0usize..2,
        ) {
            let sys = MultiChannelSystem::new(
                DMatrix::from_row_slice(2, 2, &entries),
                vec![
                    DMatrix::from_row_slice(2, 1, &[0.0, 1.0]),
                    DMatrix::from_row_slice(2, 1, &[1.0, 0.0]),
                ],
            ).unwrap();
            let p = FeedbackProfile::from_matrices(vec![
                DMatrix::from_row_slice(1, 2, &l0),
                DMatrix::from_row_slice(1, 2, &l1),
            ]).unwrap();
            let full = integrate_transition(&sys, &p, 0.0, 1.0, 200).unwrap();
            let (rest, own) = decompose_transition(&sys, &p, channel, 0.0, 1.0, 200).unwrap();
            let prod = &rest.phi * &own.phi;
            for (a, b) in prod.iter().zip(full.phi.iter()) {
                prop_assert!((a - b).abs() < 1e-6);
            }
        }
    }
}
