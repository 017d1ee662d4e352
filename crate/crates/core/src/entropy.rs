//! Entropy, relative entropy and expectations of grid densities (nats).
//!
//! `0 · ln 0` is taken as 0 throughout.

use serde::Serialize;
use thiserror::Error;

use crate::transfer::{DensityVector, ObservableVector};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EntropyError {
    #[error(
        "support violation: cell {cell} has mass {mass:.3e} where the reference density is zero"
    )]
    Support { cell: usize, mass: f64 },
    #[error("operands live on different partitions")]
    PartitionMismatch,
}

type Result<T> = std::result::Result<T, EntropyError>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EntropyReport {
    pub value: f64,
    pub support_cells: usize,
}

/// `−Σ θ_i ln θ_i · vol` over the support of `θ`.
pub fn entropy(theta: &DensityVector) -> EntropyReport {
    let vol = theta.partition().cell_volume();
    let mut value = 0.0;
    let mut support_cells = 0;
    for &v in theta.values() {
        if v > 0.0 {
            value -= v * v.ln();
            support_cells += 1;
        }
    }
    EntropyReport {
        value: value * vol,
        support_cells,
    }
}

fn check_grid(a: &DensityVector, b: &DensityVector) -> Result<()> {
    if a.same_grid(b) {
        Ok(())
    } else {
        Err(EntropyError::PartitionMismatch)
    }
}

/// `Σ ξ_i ln(ξ_i / θ_i) · vol`. Requires `supp ξ ⊆ supp θ`.
pub fn relative_entropy(xi: &DensityVector, theta: &DensityVector) -> Result<f64> {
    check_grid(xi, theta)?;
    let vol = xi.partition().cell_volume();
    let mut total = 0.0;
    for (cell, (&x, &t)) in xi.values().iter().zip(theta.values()).enumerate() {
        if x > 0.0 {
            if t <= 0.0 {
                return Err(EntropyError::Support {
                    cell,
                    mass: x * vol,
                });
            }
            total += x * (x / t).ln();
        }
    }
    Ok(total * vol)
}

/// Mass of `xi` sitting on cells where `theta` vanishes.
pub fn support_violation_mass(xi: &DensityVector, theta: &DensityVector) -> Result<f64> {
    check_grid(xi, theta)?;
    let vol = xi.partition().cell_volume();
    Ok(xi
        .values()
        .iter()
        .zip(theta.values())
        .filter(|(&x, &t)| x > 0.0 && t <= 0.0)
        .map(|(&x, _)| x)
        .sum::<f64>()
        * vol)
}

/// Relative entropy with every empty cell of `theta` raised to `floor`.
///
/// Finite for any `floor > 0` and equal to [`relative_entropy`] whenever
/// `supp ξ ⊆ supp θ`.
pub fn relative_entropy_floored(
    xi: &DensityVector,
    theta: &DensityVector,
    floor: f64,
) -> Result<f64> {
    check_grid(xi, theta)?;
    let vol = xi.partition().cell_volume();
    Ok(xi
        .values()
        .iter()
        .zip(theta.values())
        .filter(|(&x, _)| x > 0.0)
        .map(|(&x, &t)| x * (x / if t > 0.0 { t } else { floor }).ln())
        .sum::<f64>()
        * vol)
}

/// Gibbs gap `(−Σ θ ln ξ) − (−Σ θ ln θ)`, computed as cross entropy minus
/// entropy. Requires `supp θ ⊆ supp ξ`.
pub fn gibbs_gap(theta: &DensityVector, xi: &DensityVector) -> Result<f64> {
    check_grid(theta, xi)?;
    let vol = theta.partition().cell_volume();
    let mut cross = 0.0;
    for (cell, (&t, &x)) in theta.values().iter().zip(xi.values()).enumerate() {
        if t > 0.0 {
            if x <= 0.0 {
                return Err(EntropyError::Support {
                    cell,
                    mass: t * vol,
                });
            }
            cross -= t * x.ln();
        }
    }
    Ok(cross * vol - entropy(theta).value)
}

/// `Σ V_i θ_i · vol`.
pub fn expectation(observable: &ObservableVector, theta: &DensityVector) -> f64 {
    observable
        .values()
        .iter()
        .zip(theta.values())
        .map(|(v, t)| v * t)
        .sum::<f64>()
        * theta.partition().cell_volume()
}

/// One row of an entropy trace.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EntropyTraceRow {
    pub t: f64,
    pub entropy: f64,
    /// `None` when the evolved density is not supported inside the stationary one.
    pub relative_entropy_to_stationary: Option<f64>,
}
