//! Prediction and retrodiction of the intermediate measurement.

use rayon::prelude::*;
use serde::Serialize;
use std::f64::consts::FRAC_PI_2;

use crate::error::{Error, Result};
use crate::experiment::{past_quantum_state, PastQuantumState, SequenceConfig};
use crate::gaussian::{combine_rho_effect, EffectState, GaussianOscillatorState, QuadratureDirection};
use crate::grid_oracle::{retrodicted_optical_moments, Grid, GridDensity, GridParams, REFINEMENT_TOL};
use crate::qnd::PROBE_VACUUM_VARIANCE;

/// Angles closer than this to a multiple of π/2 use the on-axis closed form.
pub const AXIS_TOL: f64 = 1e-12;

/// `(μ_ρE, σ_ρE²)` of a projective measurement of `x_A(θ)`.
pub fn retrodict_projective(
    rho: &GaussianOscillatorState,
    eff: &EffectState,
    theta: f64,
) -> (f64, f64) {
    combine_rho_effect(rho, eff, QuadratureDirection::new(theta))
}

/// `Var(m₂|m₁) = κ₂²σ_ρ²(θ) + 1/2`.
pub fn predict_optical(rho: &GaussianOscillatorState, kappa2_sq: f64, theta: f64) -> f64 {
    let (_, var) = rho.marginal(QuadratureDirection::new(theta));
    kappa2_sq * var + PROBE_VACUUM_VARIANCE
}

/// How an optical retrodicted variance was obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum OpticalMethod {
    /// `κ₂²σ_ρE² + 1/2`, exact on the axes.
    ClosedForm,
    /// No posterior information: equals the prior prediction.
    PriorOnly,
    /// Grid evaluation of the coherent double integral.
    Oracle,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct OpticalRetrodiction {
    pub variance: f64,
    pub method: OpticalMethod,
    /// Relative change against the half-resolution grid (oracle only).
    pub refinement_change: Option<f64>,
}

/// `Var(m₂|m₁,m₃,m₄)` on the default grid.
pub fn retrodict_optical(
    rho: &GaussianOscillatorState,
    eff: &EffectState,
    kappa2_sq: f64,
    theta: f64,
) -> Result<f64> {
    Ok(retrodict_optical_with(rho, eff, kappa2_sq, theta, GridParams::default())?.variance)
}

/// `Var(m₂|m₁,m₃,m₄)` with explicit oracle grid.
///
/// On the axes the Gaussian product is exact. Elsewhere the coherences of ρ and
/// E in the θ basis enter, and the double integral is evaluated on the grid at
/// `N` and `N/2` points; disagreement above [`REFINEMENT_TOL`] is an error.
pub fn retrodict_optical_with(
    rho: &GaussianOscillatorState,
    eff: &EffectState,
    kappa2_sq: f64,
    theta: f64,
    grid: GridParams,
) -> Result<OpticalRetrodiction> {
    if !(kappa2_sq >= 0.0) {
        return Err(Error::invalid("negative coupling"));
    }
    let dir = QuadratureDirection::new(theta);
    if eff.is_flat() {
        return Ok(OpticalRetrodiction {
            variance: predict_optical(rho, kappa2_sq, theta),
            method: OpticalMethod::PriorOnly,
            refinement_change: None,
        });
    }
    if dir.is_axis(AXIS_TOL) || kappa2_sq == 0.0 {
        let (_, var) = combine_rho_effect(rho, eff, dir);
        return Ok(OpticalRetrodiction {
            variance: kappa2_sq * var + PROBE_VACUUM_VARIANCE,
            method: OpticalMethod::ClosedForm,
            refinement_change: None,
        });
    }
    let fine = oracle_optical_variance(rho, eff, kappa2_sq, dir.theta(), grid)?;
    let coarse = oracle_optical_variance(rho, eff, kappa2_sq, dir.theta(), grid.halved())?;
    let change = (fine - coarse).abs() / fine;
    if change > REFINEMENT_TOL {
        return Err(Error::NonConvergent(format!(
            "θ = {theta}: variance moved by {:.2e} between {} and {} points",
            change,
            grid.points / 2,
            grid.points
        )));
    }
    Ok(OpticalRetrodiction {
        variance: fine,
        method: OpticalMethod::Oracle,
        refinement_change: Some(change),
    })
}

/// Grid evaluation of the optical retrodicted variance with ρ and E written directly in the θ basis.
pub fn oracle_optical_variance(
    rho: &GaussianOscillatorState,
    eff: &EffectState,
    kappa2_sq: f64,
    theta: f64,
    params: GridParams,
) -> Result<f64> {
    let grid = Grid::shared(params)?;
    let r = GridDensity::from_state(&grid, rho, theta)?;
    let e = GridDensity::from_effect(&grid, eff, theta);
    Ok(retrodicted_optical_moments(&r, &e, kappa2_sq, theta)?.variance)
}

/// Outcome of the optical retrodiction at one angle of a sweep.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepStatus {
    ClosedForm,
    PriorOnly,
    Oracle,
    /// Off-axis and no oracle requested.
    NotComputed,
    /// Oracle failed its refinement check.
    NonConvergent,
}

/// Prior and retrodicted variances over a set of angles.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RetrodictionResult {
    pub theta_grid: Vec<f64>,
    pub var_prior: Vec<f64>,
    pub var_retro: Vec<f64>,
    pub var_optical_prior: Vec<f64>,
    pub var_optical_retro: Vec<Option<f64>>,
    pub optical_status: Vec<SweepStatus>,
    pub inferred_atomic_prior: Vec<f64>,
    pub inferred_atomic_retro: Vec<Option<f64>>,
    /// `√(σ_ρE²(0)·σ_ρE²(π/2))`.
    pub uncertainty_product: f64,
    pub kappa2_sq: f64,
}

/// Evaluates prior and retrodicted variances on `theta_grid`.
///
/// Off-axis optical values need `oracle`; failures are recorded per angle.
pub fn polar_sweep(
    rho: &GaussianOscillatorState,
    eff: &EffectState,
    theta_grid: &[f64],
    kappa2_sq: f64,
    oracle: Option<GridParams>,
) -> Result<RetrodictionResult> {
    if theta_grid.is_empty() {
        return Err(Error::invalid("empty θ grid"));
    }
    if !(kappa2_sq >= 0.0) {
        return Err(Error::invalid("negative coupling"));
    }
    rho.validate()?;
    let rows: Vec<(f64, f64, f64, Option<f64>, SweepStatus)> = theta_grid
        .par_iter()
        .map(|&theta| {
            let (_, prior) = rho.marginal(QuadratureDirection::new(theta));
            let (_, retro) = retrodict_projective(rho, eff, theta);
            let opt_prior = kappa2_sq * prior + PROBE_VACUUM_VARIANCE;
            let on_axis = eff.is_flat() || kappa2_sq == 0.0 || QuadratureDirection::new(theta).is_axis(AXIS_TOL);
            let (opt_retro, status) = match (on_axis, oracle) {
                (false, None) => (None, SweepStatus::NotComputed),
                (_, grid) => match retrodict_optical_with(rho, eff, kappa2_sq, theta, grid.unwrap_or_default()) {
                    Ok(r) => (
                        Some(r.variance),
                        match r.method {
                            OpticalMethod::ClosedForm => SweepStatus::ClosedForm,
                            OpticalMethod::PriorOnly => SweepStatus::PriorOnly,
                            OpticalMethod::Oracle => SweepStatus::Oracle,
                        },
                    ),
                    Err(_) => (None, SweepStatus::NonConvergent),
                },
            };
            (prior, retro, opt_prior, opt_retro, status)
        })
        .collect();
    let infer = |v: f64| {
        if kappa2_sq > 0.0 {
            (v - PROBE_VACUUM_VARIANCE) / kappa2_sq
        } else {
            f64::NAN
        }
    };
    let (_, var_p) = retrodict_projective(rho, eff, 0.0);
    let (_, var_x) = retrodict_projective(rho, eff, FRAC_PI_2);
    Ok(RetrodictionResult {
        theta_grid: theta_grid.to_vec(),
        var_prior: rows.iter().map(|r| r.0).collect(),
        var_retro: rows.iter().map(|r| r.1).collect(),
        var_optical_prior: rows.iter().map(|r| r.2).collect(),
        var_optical_retro: rows.iter().map(|r| r.3).collect(),
        optical_status: rows.iter().map(|r| r.4).collect(),
        inferred_atomic_prior: rows.iter().map(|r| infer(r.2)).collect(),
        inferred_atomic_retro: rows.iter().map(|r| r.3.map(infer)).collect(),
        uncertainty_product: (var_p * var_x).sqrt(),
        kappa2_sq,
    })
}

/// ρ before and E after the second pulse of `config`, with all outcomes zero.
///
/// Covariances of the past quantum state do not depend on the outcomes.
pub fn protocol_states(config: &SequenceConfig) -> Result<PastQuantumState> {
    past_quantum_state(config, 0.0, 0.0, 0.0)
}

/// Sweep over `theta_grid` using the effective κ₂² of `config`.
pub fn protocol_sweep(
    config: &SequenceConfig,
    theta_grid: &[f64],
    oracle: Option<GridParams>,
) -> Result<RetrodictionResult> {
    let pqs = protocol_states(config)?;
    polar_sweep(&pqs.rho, &pqs.effect, theta_grid, pqs.target.kappa_sq, oracle)
}

/// `n` equally spaced angles in `[start, stop)`.
pub fn theta_grid(start: f64, stop: f64, n: usize) -> Vec<f64> {
    let step = (stop - start) / n as f64;
    (0..n).map(|k| start + k as f64 * step).collect()
}
