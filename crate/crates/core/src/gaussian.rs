//! Phase-space Gaussian description of the collective spin oscillator.
//!
//! Coordinates are ordered `(x_A, p_A)` in vacuum units: the coherent spin
//! state has variance 1/2 along every quadrature. The forward (prior) state is
//! stored as mean and covariance, the backward effect in information form so
//! that "no posterior data" is the exact zero element.

use nalgebra::{Matrix2, Vector2};
use std::f64::consts::TAU;

use crate::error::{Error, Result};

/// Quadrature variance of the oscillator ground state (and of the probe vacuum).
pub const VACUUM_VARIANCE: f64 = 0.5;

/// Uncertainty-product bound on the determinant of a single-state covariance.
pub const HEISENBERG_DET: f64 = 0.25;

const SYMMETRY_TOL: f64 = 1e-9;

/// Direction of the measured quadrature `x_A(θ) = p_A cosθ + x_A sinθ`.
///
/// `θ = 0` is `p_A`, `θ = π/2` is `x_A`.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(from = "f64", into = "f64")]
pub struct QuadratureDirection {
    theta: f64,
}

impl QuadratureDirection {
    pub fn new(theta: f64) -> Self {
        let mut reduced = theta.rem_euclid(TAU);
        // rem_euclid can round up to exactly TAU for tiny negative inputs
        if reduced >= TAU {
            reduced = 0.0;
        }
        Self { theta: reduced }
    }

    /// The `p_A` quadrature.
    pub fn p() -> Self {
        Self { theta: 0.0 }
    }

    /// The `x_A` quadrature.
    pub fn x() -> Self {
        Self {
            theta: std::f64::consts::FRAC_PI_2,
        }
    }

    pub fn theta(&self) -> f64 {
        self.theta
    }

    /// Unit vector `(sinθ, cosθ)` in `(x, p)` coordinates.
    pub fn unit(&self) -> Vector2<f64> {
        Vector2::new(self.theta.sin(), self.theta.cos())
    }

    /// Unit vector `(cosθ, -sinθ)` of the canonically conjugate quadrature.
    ///
    /// With `a = unit·z` and `b = conjugate·z`, `[b, a] = i` just like `[x, p] = i`.
    pub fn conjugate(&self) -> Vector2<f64> {
        Vector2::new(self.theta.cos(), -self.theta.sin())
    }

    /// True when the direction is `p_A` or `x_A` (up to sign) to within `tol` radians.
    pub fn is_axis(&self, tol: f64) -> bool {
        let quarter = std::f64::consts::FRAC_PI_2;
        let k = (self.theta / quarter).round();
        (self.theta - k * quarter).abs() <= tol
    }
}

impl From<f64> for QuadratureDirection {
    fn from(theta: f64) -> Self {
        Self::new(theta)
    }
}

impl From<QuadratureDirection> for f64 {
    fn from(dir: QuadratureDirection) -> f64 {
        dir.theta
    }
}

/// Forward-conditioned Gaussian state ρ of the atomic oscillator.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianOscillatorState {
    pub mean: Vector2<f64>,
    pub cov: Matrix2<f64>,
    /// `|⟨J_x⟩|` relative to its initial value.
    pub mean_spin_fraction: f64,
}

impl GaussianOscillatorState {
    /// Coherent spin state: zero mean, covariance `I/2`.
    pub fn vacuum() -> Self {
        Self {
            mean: Vector2::zeros(),
            cov: Matrix2::identity() * VACUUM_VARIANCE,
            mean_spin_fraction: 1.0,
        }
    }

    pub fn new(mean: Vector2<f64>, cov: Matrix2<f64>) -> Result<Self> {
        let state = Self {
            mean,
            cov,
            mean_spin_fraction: 1.0,
        };
        state.validate()?;
        Ok(state)
    }

    pub fn with_spin_fraction(mut self, fraction: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&fraction) {
            return Err(Error::invalid(format!(
                "mean spin fraction {fraction} outside [0, 1]"
            )));
        }
        self.mean_spin_fraction = fraction;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        if !self.mean.iter().chain(self.cov.iter()).all(|v| v.is_finite()) {
            return Err(Error::invalid("non-finite state entries"));
        }
        check_symmetric_psd(&self.cov, "state covariance")
    }

    pub fn det(&self) -> f64 {
        self.cov.determinant()
    }

    /// Whether the covariance satisfies `det ≥ 1/4` (within `tol`).
    pub fn satisfies_heisenberg(&self, tol: f64) -> bool {
        self.det() >= HEISENBERG_DET - tol
    }

    /// Phase-space rotation by `angle`; `marginal(rotate(s, φ), θ) == marginal(s, θ + φ)`.
    pub fn rotate(&self, angle: f64) -> Self {
        let r = rotation(angle);
        Self {
            mean: r * self.mean,
            cov: symmetrize(r * self.cov * r.transpose()),
            mean_spin_fraction: self.mean_spin_fraction,
        }
    }

    /// Mean and variance of the quadrature along `dir`.
    pub fn marginal(&self, dir: QuadratureDirection) -> (f64, f64) {
        let v = dir.unit();
        let var = (v.transpose() * self.cov * v)[(0, 0)];
        (v.dot(&self.mean), var.max(0.0))
    }

    pub fn displace(&self, delta: Vector2<f64>) -> Self {
        Self {
            mean: self.mean + delta,
            ..self.clone()
        }
    }
}

/// Free-function form of [`GaussianOscillatorState::rotate`].
pub fn rotate(state: &GaussianOscillatorState, angle: f64) -> GaussianOscillatorState {
    state.rotate(angle)
}

/// Free-function form of [`GaussianOscillatorState::marginal`].
pub fn marginal(state: &GaussianOscillatorState, dir: QuadratureDirection) -> (f64, f64) {
    state.marginal(dir)
}

/// Backward effect `E` in information form: `E(z) ∝ exp(-zᵀJz/2 + hᵀz)`.
#[derive(Debug, Clone, PartialEq)]
pub struct EffectState {
    pub info_matrix: Matrix2<f64>,
    pub info_vector: Vector2<f64>,
}

impl Default for EffectState {
    fn default() -> Self {
        Self::flat()
    }
}

impl EffectState {
    /// The know-nothing effect (identity operator).
    pub fn flat() -> Self {
        Self {
            info_matrix: Matrix2::zeros(),
            info_vector: Vector2::zeros(),
        }
    }

    pub fn new(info_matrix: Matrix2<f64>, info_vector: Vector2<f64>) -> Result<Self> {
        check_symmetric_psd(&info_matrix, "effect information matrix")?;
        Ok(Self {
            info_matrix,
            info_vector,
        })
    }

    /// Effect with a finite Gaussian profile of the given centroid and covariance.
    pub fn from_moments(mean: Vector2<f64>, cov: Matrix2<f64>) -> Result<Self> {
        check_symmetric_psd(&cov, "effect covariance")?;
        let info = cov
            .try_inverse()
            .ok_or_else(|| Error::invalid("singular effect covariance"))?;
        Ok(Self {
            info_matrix: symmetrize(info),
            info_vector: info * mean,
        })
    }

    pub fn is_flat(&self) -> bool {
        self.info_matrix.iter().all(|v| *v == 0.0)
    }

    /// Covariance implied by the information matrix, if it is invertible.
    pub fn covariance(&self) -> Option<Matrix2<f64>> {
        if self.info_matrix.determinant() <= 1e-300 {
            return None;
        }
        self.info_matrix.try_inverse().map(symmetrize)
    }

    pub fn mean(&self) -> Option<Vector2<f64>> {
        self.covariance().map(|c| c * self.info_vector)
    }

    /// Precision and precision-weighted centroid of the profile `⟨a,θ|E|a,θ⟩`.
    pub fn marginal_information(&self, dir: QuadratureDirection) -> (f64, f64) {
        let u = dir.unit();
        let w = dir.conjugate();
        let j = &self.info_matrix;
        let jaa = u.dot(&(j * u));
        let jab = u.dot(&(j * w));
        let jbb = w.dot(&(j * w));
        let ha = u.dot(&self.info_vector);
        let hb = w.dot(&self.info_vector);
        let scale = jaa.abs() + jbb.abs();
        let (precision, info) = if jbb > 1e-12 * scale && jbb > 0.0 {
            (jaa - jab * jab / jbb, ha - jab * hb / jbb)
        } else {
            (jaa, ha)
        };
        if precision <= 1e-12 * scale {
            (0.0, 0.0)
        } else {
            (precision, info)
        }
    }

    /// Centroid `μ_E(θ)` and variance `σ_E²(θ)`, or `None` without information along θ.
    pub fn marginal(&self, dir: QuadratureDirection) -> Option<(f64, f64)> {
        let (precision, info) = self.marginal_information(dir);
        (precision > 0.0).then(|| (info / precision, 1.0 / precision))
    }

    /// Multiplies in a Gaussian likelihood along `dir`.
    pub fn add_information(&self, dir: QuadratureDirection, precision: f64, info: f64) -> Self {
        let u = dir.unit();
        Self {
            info_matrix: symmetrize(self.info_matrix + precision * u * u.transpose()),
            info_vector: self.info_vector + info * u,
        }
    }

    /// Adjoint of the forward map `z → gain·z + n`, `n ~ N(0, noise)`.
    ///
    /// `J' = gain² J (I + QJ)⁻¹`, `h' = gain (I + JQ)⁻¹ h`; valid for singular `J` and `Q`.
    pub fn pull_back(&self, gain: f64, noise: &Matrix2<f64>) -> Self {
        let id = Matrix2::identity();
        let j = &self.info_matrix;
        let a = (id + noise * j)
            .try_inverse()
            .expect("I + QJ is invertible for PSD Q, J");
        let b = (id + j * noise)
            .try_inverse()
            .expect("I + JQ is invertible for PSD Q, J");
        Self {
            info_matrix: symmetrize(gain * gain * j * a),
            info_vector: gain * b * self.info_vector,
        }
    }
}

/// Fuses two 1-D Gaussians (mean, variance) by the product rule.
///
/// `None` stands for a flat factor.
pub fn fuse_marginals(first: Option<(f64, f64)>, second: Option<(f64, f64)>) -> Option<(f64, f64)> {
    match (first, second) {
        (None, None) => None,
        (Some(g), None) | (None, Some(g)) => Some(g),
        (Some((m1, v1)), Some((m2, v2))) => {
            if v1 == 0.0 {
                return Some((m1, 0.0));
            }
            if v2 == 0.0 {
                return Some((m2, 0.0));
            }
            let var = 1.0 / (1.0 / v1 + 1.0 / v2);
            Some(((m1 * v2 + m2 * v1) / (v1 + v2), var))
        }
    }
}

/// `μ_ρE(θ)` and `σ_ρE²(θ)`: the θ-marginals of ρ and E combined by the Gaussian product.
pub fn combine_rho_effect(
    rho: &GaussianOscillatorState,
    eff: &EffectState,
    dir: QuadratureDirection,
) -> (f64, f64) {
    let prior = rho.marginal(dir);
    fuse_marginals(Some(prior), eff.marginal(dir)).unwrap_or(prior)
}

/// Rotation matrix `[[cos, -sin], [sin, cos]]` acting on `(x, p)`.
pub fn rotation(angle: f64) -> Matrix2<f64> {
    let (s, c) = angle.sin_cos();
    Matrix2::new(c, -s, s, c)
}

pub(crate) fn symmetrize(m: Matrix2<f64>) -> Matrix2<f64> {
    (m + m.transpose()) * 0.5
}

fn check_symmetric_psd(m: &Matrix2<f64>, what: &str) -> Result<()> {
    let scale = m.abs().max().max(1.0);
    if (m[(0, 1)] - m[(1, 0)]).abs() > SYMMETRY_TOL * scale {
        return Err(Error::invalid(format!("{what} is not symmetric")));
    }
    let tol = 1e-12 * scale;
    let det = m[(0, 0)] * m[(1, 1)] - m[(0, 1)] * m[(1, 0)];
    if m[(0, 0)] < -tol || m[(1, 1)] < -tol || det < -tol * scale {
        return Err(Error::invalid(format!("{what} is not positive semi-definite")));
    }
    Ok(())
}
