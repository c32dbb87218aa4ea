//! Faraday QND pulse model.
//!
//! A pulse couples the quadrature `x_A(θ)` to the probe through
//! `U = exp(-iκ x_A(θ) p_L)` and the probe `x_L` is then read out. On the
//! Gaussian level this is a Kalman update with gain `κ` and readout noise 1/2,
//! followed by back-action noise `β κ²/2` on the conjugate quadrature.

use nalgebra::Matrix2;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::gaussian::{
    symmetrize, EffectState, GaussianOscillatorState, QuadratureDirection, VACUUM_VARIANCE,
};

/// Variance of the probe `x_L` quadrature in the input coherent state.
pub const PROBE_VACUUM_VARIANCE: f64 = VACUUM_VARIANCE;

/// How much back-action noise a pulse deposits on the conjugate quadrature.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum BackactionMode {
    /// Perfect stroboscopic evasion, `β = 0`.
    IdealBae,
    /// Finite duty cycle, `β = (1 - Sinc(πD)) / (1 + Sinc(πD))`.
    #[default]
    Residual,
    /// Continuous-wave probing; equals the bare Kraus operator, `β = 1`.
    FullCw,
}

/// One QND probe pulse.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PulseSpec {
    #[serde(rename = "theta_rad")]
    pub direction: QuadratureDirection,
    pub kappa_sq: f64,
    #[serde(default = "default_duty")]
    pub duty: f64,
    #[serde(default)]
    pub backaction: BackactionMode,
}

fn default_duty() -> f64 {
    0.14
}

impl PulseSpec {
    pub fn new(
        direction: QuadratureDirection,
        kappa_sq: f64,
        duty: f64,
        backaction: BackactionMode,
    ) -> Result<Self> {
        let pulse = Self {
            direction,
            kappa_sq,
            duty,
            backaction,
        };
        pulse.validate()?;
        Ok(pulse)
    }

    /// Ideal back-action-evading pulse.
    pub fn ideal(direction: QuadratureDirection, kappa_sq: f64) -> Result<Self> {
        Self::new(direction, kappa_sq, 1.0, BackactionMode::IdealBae)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.kappa_sq >= 0.0 && self.kappa_sq.is_finite()) {
            return Err(Error::invalid(format!(
                "coupling kappa^2 must be finite and non-negative, got {}",
                self.kappa_sq
            )));
        }
        if !(self.duty > 0.0 && self.duty <= 1.0) {
            return Err(Error::invalid(format!(
                "duty cycle must lie in (0, 1], got {}",
                self.duty
            )));
        }
        Ok(())
    }

    pub fn kappa(&self) -> f64 {
        self.kappa_sq.sqrt()
    }

    pub fn probe_vacuum_variance(&self) -> f64 {
        PROBE_VACUUM_VARIANCE
    }

    /// β for this pulse.
    pub fn backaction_coefficient(&self) -> f64 {
        match self.backaction {
            BackactionMode::IdealBae => 0.0,
            BackactionMode::Residual => backaction_coefficient(self.duty),
            BackactionMode::FullCw => 1.0,
        }
    }

    /// Covariance of the back-action kick this pulse adds to the atoms.
    pub fn backaction_noise(&self) -> Matrix2<f64> {
        let w = self.direction.conjugate();
        w * w.transpose() * (self.backaction_coefficient() * self.kappa_sq * 0.5)
    }

    pub fn with_kappa_sq(mut self, kappa_sq: f64) -> Self {
        self.kappa_sq = kappa_sq;
        self
    }
}

/// Gaussian law of a single optical outcome, in probe shot-noise units.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OutcomeDistribution {
    pub mean: f64,
    pub variance: f64,
}

/// `⟨m⟩ = κ μ_ρ(θ)`, `Var(m) = κ² σ_ρ²(θ) + 1/2`.
pub fn outcome_distribution(state: &GaussianOscillatorState, pulse: &PulseSpec) -> OutcomeDistribution {
    let (mu, var) = state.marginal(pulse.direction);
    OutcomeDistribution {
        mean: pulse.kappa() * mu,
        variance: pulse.kappa_sq * var + PROBE_VACUUM_VARIANCE,
    }
}

/// Draws one outcome from [`outcome_distribution`].
pub fn sample_outcome<R: Rng + ?Sized>(
    state: &GaussianOscillatorState,
    pulse: &PulseSpec,
    rng: &mut R,
) -> f64 {
    let dist = outcome_distribution(state, pulse);
    let z: f64 = rng.sample(StandardNormal);
    dist.mean + dist.variance.sqrt() * z
}

/// Conditions ρ on the outcome `m` of `pulse`.
///
/// The posterior covariance does not depend on `m`.
pub fn forward_update(
    state: &GaussianOscillatorState,
    pulse: &PulseSpec,
    m: f64,
) -> Result<GaussianOscillatorState> {
    pulse.validate()?;
    if pulse.kappa_sq == 0.0 {
        return Ok(state.clone());
    }
    let u = pulse.direction.unit();
    let kappa = pulse.kappa();
    let pu = state.cov * u;
    let innovation_var = pulse.kappa_sq * u.dot(&pu) + PROBE_VACUUM_VARIANCE;
    let gain = pu * (kappa / innovation_var);
    let residual = m - kappa * u.dot(&state.mean);
    let cov = state.cov - gain * pu.transpose() * kappa;
    Ok(GaussianOscillatorState {
        mean: state.mean + gain * residual,
        cov: symmetrize(cov + pulse.backaction_noise()),
        mean_spin_fraction: state.mean_spin_fraction,
    })
}

/// Propagates the effect E backwards through `pulse` with outcome `m`.
///
/// The likelihood `|ψ(m - κa)|² ∝ exp(-(m - κa)²)` contributes precision `2κ²`
/// and information `2κm` along θ; the pulse's back-action kick is pulled back
/// as a convolution along the conjugate direction.
pub fn backward_update(eff: &EffectState, pulse: &PulseSpec, m: f64) -> Result<EffectState> {
    pulse.validate()?;
    if pulse.kappa_sq == 0.0 {
        return Ok(eff.clone());
    }
    let conditioned = eff.add_information(
        pulse.direction,
        2.0 * pulse.kappa_sq,
        2.0 * pulse.kappa() * m,
    );
    if pulse.backaction_coefficient() == 0.0 {
        return Ok(conditioned);
    }
    Ok(conditioned.pull_back(1.0, &pulse.backaction_noise()))
}

/// `Sinc(πD) = sin(πD)/(πD)`, exactly 0 at non-zero integers and 1 at 0.
pub fn sinc_pi(duty: f64) -> f64 {
    if duty == 0.0 {
        return 1.0;
    }
    if duty.fract() == 0.0 {
        return 0.0;
    }
    let x = PI * duty;
    x.sin() / x
}

/// Residual back-action factor of stroboscopic probing, `(1 - Sinc(πD)) / (1 + Sinc(πD))`.
pub fn backaction_coefficient(duty: f64) -> f64 {
    let s = sinc_pi(duty);
    (1.0 - s) / (1.0 + s)
}

/// Output probe variance in shot-noise units after a stroboscopic pulse:
/// `1 + κ̃² + (κ̃⁴/3) (1 - Sinc(πD)) / (1 + Sinc(πD))`.
pub fn strob_noise_variance(kappa_tilde_sq: f64, duty: f64) -> f64 {
    1.0 + kappa_tilde_sq + kappa_tilde_sq * kappa_tilde_sq / 3.0 * backaction_coefficient(duty)
}

/// [`strob_noise_variance`] for a pulse, with `κ̃² = strob_coefficient · κ²`.
pub fn pulse_strob_noise(pulse: &PulseSpec, strob_coefficient: f64) -> f64 {
    strob_noise_variance(strob_coefficient * pulse.kappa_sq, pulse.duty)
}
