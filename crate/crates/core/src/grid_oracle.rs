//! Brute-force position-grid backend.
//!
//! Operators are `N × N` complex matrices in the discrete eigenbasis of a
//! quadrature `x_A(θ)` sampled at `a_j = (j - N/2)·h`, `h = 2L/N`. The matrix of
//! a density operator holds `h·⟨a_i,θ|ρ|a_j,θ⟩`, so its trace is the norm.
//!
//! Changing the quadrature frame uses the eigenbasis of the grid oscillator
//! Hamiltonian `(X² + P²)/2` with `X²` from the Fourier grid; the rotation is
//! exactly unitary on the grid. Measurements apply the Kraus operator
//! `Ω_m = ∫ψ(m - κa)|a,θ⟩⟨a,θ| da` directly, so nothing here relies on the
//! Gaussian closed forms in [`crate::gaussian`] or [`crate::qnd`].

use nalgebra::{DMatrix, Matrix2, SymmetricEigen, Vector2};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use std::f64::consts::{PI, TAU};
use std::collections::HashMap;
use std::sync::{Arc, Mutex, OnceLock};

use crate::error::{Error, Result};
use crate::gaussian::{EffectState, GaussianOscillatorState, QuadratureDirection};

/// Largest accepted grid spacing.
pub const MAX_SPACING: f64 = 0.1;

/// Mass fraction beyond which a state is considered to touch the grid edge.
pub const BOUNDARY_MASS_TOL: f64 = 1e-8;

/// Relative variance change tolerated between a grid and its half-resolution twin.
pub const REFINEMENT_TOL: f64 = 2e-3;

/// Grid extent `[-L, L)` and point count.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridParams {
    pub half_width: f64,
    pub points: usize,
}

impl Default for GridParams {
    fn default() -> Self {
        Self {
            half_width: 8.0,
            points: 512,
        }
    }
}

impl GridParams {
    pub fn new(half_width: f64, points: usize) -> Self {
        Self { half_width, points }
    }

    pub fn spacing(&self) -> f64 {
        2.0 * self.half_width / self.points as f64
    }

    pub fn validate(&self) -> Result<()> {
        if self.points < 64 || !self.points.is_multiple_of(2) {
            return Err(Error::invalid(format!(
                "grid needs an even point count >= 64, got {}",
                self.points
            )));
        }
        if !(self.half_width >= 6.0 && self.half_width.is_finite()) {
            return Err(Error::invalid(format!(
                "grid half-width must be >= 6, got {}",
                self.half_width
            )));
        }
        if self.spacing() > MAX_SPACING {
            return Err(Error::GridTooCoarse {
                spacing: self.spacing(),
                max: MAX_SPACING,
            });
        }
        Ok(())
    }

    pub fn halved(&self) -> Self {
        Self {
            half_width: self.half_width,
            points: self.points / 2,
        }
    }
}

/// Sample points plus a lazily built oscillator eigenbasis used for rotations.
#[derive(Clone)]
pub struct Grid {
    inner: Arc<GridInner>,
}

struct GridInner {
    params: GridParams,
    spacing: f64,
    points: Vec<f64>,
    oscillator: OnceLock<OscillatorBasis>,
}

struct OscillatorBasis {
    energies: Vec<f64>,
    vectors: DMatrix<f64>,
}

impl std::fmt::Debug for Grid {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Grid").field("params", &self.inner.params).finish()
    }
}

impl Grid {
    pub fn new(params: GridParams) -> Result<Self> {
        params.validate()?;
        let n = params.points;
        let h = params.spacing();
        let points = (0..n).map(|j| (j as f64 - (n / 2) as f64) * h).collect();
        Ok(Self {
            inner: Arc::new(GridInner {
                params,
                spacing: h,
                points,
                oscillator: OnceLock::new(),
            }),
        })
    }

    /// Process-wide grid for `params`, so the oscillator basis is built once.
    pub fn shared(params: GridParams) -> Result<Self> {
        static CACHE: OnceLock<Mutex<HashMap<(u64, usize), Grid>>> = OnceLock::new();
        params.validate()?;
        let key = (params.half_width.to_bits(), params.points);
        let mut cache = CACHE
            .get_or_init(Default::default)
            .lock()
            .unwrap_or_else(|e| e.into_inner());
        if let Some(g) = cache.get(&key) {
            return Ok(g.clone());
        }
        let g = Self::new(params)?;
        cache.insert(key, g.clone());
        Ok(g)
    }

    pub fn params(&self) -> GridParams {
        self.inner.params
    }

    pub fn len(&self) -> usize {
        self.inner.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inner.points.is_empty()
    }

    pub fn spacing(&self) -> f64 {
        self.inner.spacing
    }

    pub fn points(&self) -> &[f64] {
        &self.inner.points
    }

    /// Eigenvalues of the grid oscillator Hamiltonian (≈ n + 1/2 at low n).
    pub fn oscillator_energies(&self) -> &[f64] {
        &self.oscillator().energies
    }

    fn oscillator(&self) -> &OscillatorBasis {
        self.inner.oscillator.get_or_init(|| {
            let n = self.len();
            let h = self.spacing();
            let dk = TAU / (n as f64 * h);
            // Toeplitz kernel of X² = F† diag(x_k²) F on the periodic grid
            let kernel: Vec<f64> = (0..n)
                .map(|d| {
                    (0..n)
                        .map(|k| {
                            let xk = (k as f64 - (n / 2) as f64) * dk;
                            xk * xk * (xk * d as f64 * h).cos()
                        })
                        .sum::<f64>()
                        / n as f64
                })
                .collect();
            let points = &self.inner.points;
            let hamiltonian = DMatrix::from_fn(n, n, |i, j| {
                let d = i.abs_diff(j);
                let diag = if i == j { points[i] * points[i] } else { 0.0 };
                0.5 * (kernel[d] + diag)
            });
            let eig = SymmetricEigen::new(hamiltonian);
            OscillatorBasis {
                energies: eig.eigenvalues.iter().copied().collect(),
                vectors: eig.eigenvectors,
            }
        })
    }

    /// `U M U†` with `U = exp(iφH)`: re-expresses an operator in the frame turned by `angle`.
    ///
    /// Angles are not reduced modulo 2π: the grid spectrum is only harmonic at low
    /// energy, so `angle` and `angle + 2π` differ on high-lying states.
    fn rotate_matrix(&self, m: &DMatrix<Complex64>, angle: f64) -> DMatrix<Complex64> {
        if angle == 0.0 {
            return m.clone();
        }
        let basis = self.oscillator();
        let v = &basis.vectors;
        let vt = v.transpose();
        let re = m.map(|z| z.re);
        let im = m.map(|z| z.im);
        let t_re = &vt * &re * v;
        let t_im = &vt * &im * v;
        let e = &basis.energies;
        let n = self.len();
        let mut r_re = DMatrix::zeros(n, n);
        let mut r_im = DMatrix::zeros(n, n);
        for k in 0..n {
            for j in 0..n {
                let (s, c) = (angle * (e[j] - e[k])).sin_cos();
                let (a, b) = (t_re[(j, k)], t_im[(j, k)]);
                r_re[(j, k)] = a * c - b * s;
                r_im[(j, k)] = a * s + b * c;
            }
        }
        let out_re = v * r_re * &vt;
        let out_im = v * r_im * &vt;
        DMatrix::from_fn(n, n, |i, j| Complex64::new(out_re[(i, j)], out_im[(i, j)]))
    }
}

/// Probe vacuum amplitude `ψ(m) = π^{-1/4} exp(-m²/2)`.
pub fn probe_amplitude(m: f64) -> f64 {
    PI.powf(-0.25) * (-0.5 * m * m).exp()
}

/// An operator (density matrix or effect) on the grid, in the eigenbasis of `x_A(frame)`.
#[derive(Debug, Clone)]
pub struct GridDensity {
    grid: Grid,
    frame: f64,
    matrix: DMatrix<Complex64>,
}

/// Result of applying one Kraus operator to a grid state.
#[derive(Debug, Clone)]
pub struct PovmOutcome {
    /// Normalized post-measurement state, in the frame of the input.
    pub state: GridDensity,
    /// `Tr(Ω ρ Ω†)`: likelihood density of the outcome.
    pub weight: f64,
    /// Posterior mass in the outer 10% of the measured-axis grid.
    pub boundary_mass: f64,
    pub converged: bool,
}

/// Pure vacuum on a fresh grid.
pub fn vacuum_grid(half_width: f64, points: usize) -> Result<GridDensity> {
    let grid = Grid::new(GridParams::new(half_width, points))?;
    Ok(GridDensity::vacuum(&grid))
}

impl GridDensity {
    pub fn vacuum(grid: &Grid) -> Self {
        let h = grid.spacing();
        let psi: Vec<f64> = grid.points().iter().map(|a| probe_amplitude(*a) * h.sqrt()).collect();
        let n = grid.len();
        let matrix = DMatrix::from_fn(n, n, |i, j| Complex64::new(psi[i] * psi[j], 0.0));
        Self {
            grid: grid.clone(),
            frame: 0.0,
            matrix,
        }
        .normalized()
    }

    /// The identity operator: the effect of "no posterior measurement".
    pub fn identity(grid: &Grid) -> Self {
        Self {
            grid: grid.clone(),
            frame: 0.0,
            matrix: DMatrix::identity(grid.len(), grid.len()),
        }
    }

    /// Density matrix of a Gaussian state, written directly in the `frame` quadrature basis.
    pub fn from_state(grid: &Grid, state: &GaussianOscillatorState, frame: f64) -> Result<Self> {
        let info = state
            .cov
            .try_inverse()
            .ok_or_else(|| Error::invalid("singular state covariance"))?;
        let h = info * state.mean;
        Ok(Self::from_information(grid, &info, &h, frame).normalized())
    }

    /// Operator of a Gaussian effect, written directly in the `frame` quadrature basis.
    pub fn from_effect(grid: &Grid, eff: &EffectState, frame: f64) -> Self {
        let mut op = Self::from_information(grid, &eff.info_matrix, &eff.info_vector, frame);
        let peak = (0..op.dim()).map(|i| op.matrix[(i, i)].re).fold(0.0, f64::max);
        if peak > 0.0 {
            op.matrix /= Complex64::new(peak, 0.0);
        }
        op
    }

    /// Operator whose Wigner function is `exp(-zᵀJz/2 + hᵀz)`.
    ///
    /// With `a` the frame quadrature and `b` its conjugate, integrating the
    /// Wigner function against `exp(-i b d)` gives the kernel at `s = (a+a')/2`,
    /// `d = a - a'`.
    fn from_information(grid: &Grid, info: &Matrix2<f64>, h: &Vector2<f64>, frame: f64) -> Self {
        let dir = QuadratureDirection::new(frame);
        let (u, w) = (dir.unit(), dir.conjugate());
        let jaa = u.dot(&(info * u));
        let jab = u.dot(&(info * w));
        let jbb = w.dot(&(info * w));
        let (ha, hb) = (u.dot(h), w.dot(h));
        let pts = grid.points();
        let n = grid.len();
        let scale = jaa.abs() + jbb.abs();
        let matrix = if jbb <= 1e-12 * scale.max(1e-300) {
            let logs: Vec<f64> = pts.iter().map(|a| -0.5 * jaa * a * a + ha * a).collect();
            let top = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            DMatrix::from_fn(n, n, |i, j| {
                if i == j {
                    Complex64::new((logs[i] - top).exp(), 0.0)
                } else {
                    Complex64::new(0.0, 0.0)
                }
            })
        } else {
            let log_kernel = |s: f64, d: f64| {
                let c = Complex64::new(hb - jab * s, -d);
                Complex64::new(-0.5 * jaa * s * s + ha * s, 0.0) + c * c / (2.0 * jbb)
            };
            let top = pts
                .iter()
                .map(|a| log_kernel(*a, 0.0).re)
                .fold(f64::NEG_INFINITY, f64::max);
            DMatrix::from_fn(n, n, |i, j| {
                let s = 0.5 * (pts[i] + pts[j]);
                let d = pts[i] - pts[j];
                (log_kernel(s, d) - top).exp()
            })
        };
        Self {
            grid: grid.clone(),
            frame,
            matrix,
        }
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn frame(&self) -> f64 {
        self.frame
    }

    pub fn matrix(&self) -> &DMatrix<Complex64> {
        &self.matrix
    }

    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn trace(&self) -> f64 {
        self.matrix.diagonal().iter().map(|z| z.re).sum()
    }

    pub fn normalized(mut self) -> Self {
        let tr = self.trace();
        if tr > 0.0 {
            self.matrix /= Complex64::new(tr, 0.0);
        }
        self
    }

    /// Same operator expressed in the eigenbasis of `x_A(frame)`.
    pub fn to_frame(&self, frame: f64) -> Self {
        Self {
            grid: self.grid.clone(),
            frame,
            matrix: self.grid.rotate_matrix(&self.matrix, frame - self.frame),
        }
    }

    /// Normalized diagonal `⟨a,frame|ρ|a,frame⟩ h`.
    pub fn diagonal_distribution(&self) -> Vec<f64> {
        let tr = self.trace();
        self.matrix.diagonal().iter().map(|z| z.re / tr).collect()
    }

    /// Mean and variance of the normalized diagonal in the current frame.
    pub fn diagonal_moments(&self) -> (f64, f64) {
        moments(self.grid.points(), &self.diagonal_distribution())
    }

    /// Mean and variance of the quadrature along `theta`.
    pub fn marginal(&self, theta: f64) -> (f64, f64) {
        let framed = self.to_frame(theta);
        moments(framed.grid.points(), &framed.diagonal_distribution())
    }

    /// `Tr(ρ²)/Tr(ρ)²`.
    pub fn purity(&self) -> f64 {
        let tr = self.trace();
        self.matrix.iter().map(|z| z.norm_sqr()).sum::<f64>() / (tr * tr)
    }

    /// Largest `|M - M†|` entry relative to the largest entry.
    pub fn hermiticity_error(&self) -> f64 {
        let scale = self.matrix.iter().map(|z| z.norm()).fold(0.0, f64::max);
        let diff = (&self.matrix - self.matrix.adjoint())
            .iter()
            .map(|z| z.norm())
            .fold(0.0, f64::max);
        diff / scale.max(f64::MIN_POSITIVE)
    }

    /// Smallest eigenvalue relative to the trace, via the real symmetric embedding.
    pub fn smallest_eigenvalue(&self) -> f64 {
        let n = self.dim();
        let herm = (&self.matrix + self.matrix.adjoint()) * Complex64::new(0.5, 0.0);
        let embed = DMatrix::from_fn(2 * n, 2 * n, |i, j| {
            let z = herm[(i % n, j % n)];
            match (i < n, j < n) {
                (true, true) | (false, false) => z.re,
                (true, false) => -z.im,
                (false, true) => z.im,
            }
        });
        let eig = SymmetricEigen::new(embed);
        eig.eigenvalues.iter().copied().fold(f64::INFINITY, f64::min) / self.trace()
    }

    /// Mass in the outer 10% of the grid along the current frame.
    pub fn boundary_mass(&self) -> f64 {
        let edge = 0.9 * self.grid.params().half_width;
        self.grid
            .points()
            .iter()
            .zip(self.diagonal_distribution())
            .filter(|(a, _)| a.abs() > edge)
            .map(|(_, p)| p.abs())
            .sum()
    }

    /// `Ω_m ρ Ω_m†` for a measurement of `x_A(θ)` with coupling `κ²`, renormalized.
    pub fn povm_apply(&self, kappa_sq: f64, theta: f64, m: f64) -> Result<PovmOutcome> {
        if !(kappa_sq >= 0.0) {
            return Err(Error::invalid("negative coupling"));
        }
        let kappa = kappa_sq.sqrt();
        let framed = self.to_frame(theta);
        let kraus: Vec<f64> = framed.grid.points().iter().map(|a| probe_amplitude(m - kappa * a)).collect();
        let mut out = framed;
        scale_both_sides(&mut out.matrix, &kraus);
        let weight = out.trace();
        if !(weight > 0.0) {
            return Err(Error::NonConvergent(format!(
                "outcome {m} has zero likelihood on the grid"
            )));
        }
        let out = out.normalized();
        let boundary_mass = out.boundary_mass();
        let state = out.to_frame(self.frame);
        Ok(PovmOutcome {
            state,
            weight,
            boundary_mass,
            converged: boundary_mass <= BOUNDARY_MASS_TOL,
        })
    }

    /// `Ω_m† E Ω_m`: one measurement pulled back onto an effect. The result is unnormalized
    /// up to an overall scale.
    pub fn effect_apply(&self, kappa_sq: f64, theta: f64, m: f64) -> Result<Self> {
        if !(kappa_sq >= 0.0) {
            return Err(Error::invalid("negative coupling"));
        }
        let kappa = kappa_sq.sqrt();
        let mut framed = self.to_frame(theta);
        let kraus: Vec<f64> = framed.grid.points().iter().map(|a| probe_amplitude(m - kappa * a)).collect();
        scale_both_sides(&mut framed.matrix, &kraus);
        let peak = framed.matrix.iter().map(|z| z.norm()).fold(0.0, f64::max);
        if peak > 0.0 {
            framed.matrix /= Complex64::new(peak, 0.0);
        }
        Ok(framed.to_frame(self.frame))
    }
}

fn scale_both_sides(m: &mut DMatrix<Complex64>, d: &[f64]) {
    let n = m.nrows();
    for j in 0..n {
        for i in 0..n {
            m[(i, j)] *= d[i] * d[j];
        }
    }
}

fn moments(points: &[f64], weights: &[f64]) -> (f64, f64) {
    let total: f64 = weights.iter().sum();
    let mean = points.iter().zip(weights).map(|(a, w)| a * w).sum::<f64>() / total;
    let var = points
        .iter()
        .zip(weights)
        .map(|(a, w)| (a - mean).powi(2) * w)
        .sum::<f64>()
        / total;
    (mean, var)
}

/// Optical outcome law `Pr(m₂ | past, future)` sampled on a grid of outcomes.
#[derive(Debug, Clone)]
pub struct OpticalDistribution {
    pub outcomes: Vec<f64>,
    /// Normalized density (trapezoid rule).
    pub density: Vec<f64>,
    pub mean: f64,
    pub variance: f64,
    /// Most negative raw density value relative to the peak.
    pub min_relative_density: f64,
}

/// Mean and variance of `Pr(m₂ | past, future)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OpticalMoments {
    pub mean: f64,
    pub variance: f64,
}

/// `M_ij = ρ_ij E_ji` in the θ frame: the (a, a') kernel of the double integral.
fn retrodiction_kernel(rho: &GridDensity, eff: &GridDensity, theta: f64) -> Result<(Grid, DMatrix<Complex64>)> {
    if rho.grid.params() != eff.grid.params() {
        return Err(Error::invalid("state and effect live on different grids"));
    }
    let r = rho.to_frame(theta);
    let e = eff.to_frame(theta);
    let n = r.dim();
    let kernel = DMatrix::from_fn(n, n, |i, j| r.matrix[(i, j)] * e.matrix[(j, i)]);
    Ok((r.grid, kernel))
}

/// Evaluates
/// `Pr(m₂) ∝ ∫∫ ψ(m₂-κa) ψ(m₂-κa') ⟨a,θ|ρ|a',θ⟩⟨a',θ|E|a,θ⟩ da da'`
/// on the supplied outcome grid.
pub fn retrodicted_optical_distribution(
    rho: &GridDensity,
    eff: &GridDensity,
    kappa2_sq: f64,
    theta: f64,
    outcomes: &[f64],
) -> Result<OpticalDistribution> {
    if outcomes.len() < 3 {
        return Err(Error::invalid("outcome grid needs at least 3 points"));
    }
    let (grid, kernel) = retrodiction_kernel(rho, eff, theta)?;
    let kappa = kappa2_sq.sqrt();
    let pts = grid.points();
    let n = pts.len();
    let kr = kernel.map(|z| z.re);
    let raw: Vec<f64> = outcomes
        .iter()
        .map(|m| {
            let w: Vec<f64> = pts.iter().map(|a| probe_amplitude(m - kappa * a)).collect();
            let mut total = 0.0;
            for j in 0..n {
                if w[j] == 0.0 {
                    continue;
                }
                let col: f64 = (0..n).map(|i| w[i] * kr[(i, j)]).sum();
                total += col * w[j];
            }
            total
        })
        .collect();
    let peak = raw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(peak > 0.0) {
        return Err(Error::NonConvergent("retrodicted distribution vanishes".into()));
    }
    let min_relative_density = raw.iter().copied().fold(f64::INFINITY, f64::min) / peak;
    let norm = trapezoid(outcomes, &raw);
    let density: Vec<f64> = raw.iter().map(|p| p / norm).collect();
    let first: Vec<f64> = outcomes.iter().zip(&density).map(|(m, p)| m * p).collect();
    let mean = trapezoid(outcomes, &first);
    let second: Vec<f64> = outcomes
        .iter()
        .zip(&density)
        .map(|(m, p)| (m - mean).powi(2) * p)
        .collect();
    let variance = trapezoid(outcomes, &second);
    Ok(OpticalDistribution {
        outcomes: outcomes.to_vec(),
        density,
        mean,
        variance,
        min_relative_density,
    })
}

/// Moments of the same law with the `m₂` integral done in closed form:
/// `∫ψ(m-κa)ψ(m-κa') m^k dm` with `s = (a+a')/2`, `d = a-a'` is
/// `exp(-κ²d²/4)·{1, κs, κ²s² + 1/2}`.
pub fn retrodicted_optical_moments(
    rho: &GridDensity,
    eff: &GridDensity,
    kappa2_sq: f64,
    theta: f64,
) -> Result<OpticalMoments> {
    let (grid, kernel) = retrodiction_kernel(rho, eff, theta)?;
    let pts = grid.points();
    let n = pts.len();
    let (mut z, mut s1, mut s2) = (0.0, 0.0, 0.0);
    for j in 0..n {
        for i in 0..n {
            let d = pts[i] - pts[j];
            let s = 0.5 * (pts[i] + pts[j]);
            let w = kernel[(i, j)].re * (-0.25 * kappa2_sq * d * d).exp();
            z += w;
            s1 += w * s;
            s2 += w * s * s;
        }
    }
    if !(z > 0.0) {
        return Err(Error::NonConvergent("retrodicted distribution vanishes".into()));
    }
    let (s1, s2) = (s1 / z, s2 / z);
    Ok(OpticalMoments {
        mean: kappa2_sq.sqrt() * s1,
        variance: kappa2_sq * (s2 - s1 * s1) + 0.5,
    })
}

/// Uniform outcome grid wide enough for couplings up to `kappa2_sq` on `params`.
pub fn default_outcome_grid(params: &GridParams, kappa2_sq: f64, count: usize) -> Vec<f64> {
    let reach = kappa2_sq.sqrt() * params.half_width + 8.0;
    let step = 2.0 * reach / (count - 1) as f64;
    (0..count).map(|k| -reach + k as f64 * step).collect()
}

fn trapezoid(x: &[f64], y: &[f64]) -> f64 {
    x.windows(2)
        .zip(y.windows(2))
        .map(|(xs, ys)| 0.5 * (xs[1] - xs[0]) * (ys[0] + ys[1]))
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use std::f64::consts::FRAC_PI_2;

    fn grid() -> Grid {
        Grid::new(GridParams::default()).unwrap()
    }

    #[test]
    fn rejects_bad_grids() {
        assert!(matches!(
            Grid::new(GridParams::new(8.0, 128)),
            Err(Error::GridTooCoarse { .. })
        ));
        assert!(Grid::new(GridParams::new(5.0, 512)).is_err());
        assert!(Grid::new(GridParams::new(8.0, 32)).is_err());
    }

    #[test]
    fn vacuum_moments_trace_purity() {
        let vac = vacuum_grid(8.0, 512).unwrap();
        let (mean, var) = vac.marginal(0.0);
        assert_abs_diff_eq!(mean, 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(var, 0.5, epsilon = 1e-6);
        assert_abs_diff_eq!(vac.trace(), 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(vac.purity(), 1.0, epsilon = 1e-6);
        assert!(vac.hermiticity_error() < 1e-12);
    }

    #[test]
    fn oscillator_spectrum_is_harmonic_at_low_energy() {
        let g = grid();
        let mut e = g.oscillator_energies().to_vec();
        e.sort_by(f64::total_cmp);
        for (n, en) in e.iter().take(12).enumerate() {
            assert_abs_diff_eq!(*en, n as f64 + 0.5, epsilon = 1e-9);
        }
    }

    #[test]
    fn quarter_turn_maps_displacement_to_x_axis() {
        // p-representation of the vacuum displaced by +1 in x is e^{-ip}ψ₀(p)
        let g = grid();
        let h = g.spacing();
        let n = g.len();
        let psi: Vec<Complex64> = g
            .points()
            .iter()
            .map(|p| Complex64::from_polar(probe_amplitude(*p) * h.sqrt(), -p))
            .collect();
        let rho = GridDensity {
            grid: g.clone(),
            frame: 0.0,
            matrix: DMatrix::from_fn(n, n, |i, j| psi[i] * psi[j].conj()),
        };
        let (mx, vx) = rho.marginal(FRAC_PI_2);
        assert_abs_diff_eq!(mx, 1.0, epsilon = 1e-9);
        assert_abs_diff_eq!(vx, 0.5, epsilon = 1e-9);
        let (mp, _) = rho.marginal(0.0);
        assert_abs_diff_eq!(mp, 0.0, epsilon = 1e-12);
    }

    #[test]
    fn rotation_is_unitary_and_composes() {
        let g = grid();
        let state = GaussianOscillatorState::new(
            Vector2::new(0.3, -0.4),
            Matrix2::new(0.9, 0.2, 0.2, 0.4),
        )
        .unwrap();
        let rho = GridDensity::from_state(&g, &state, 0.0).unwrap();
        let once = rho.to_frame(0.7);
        let twice = rho.to_frame(0.3).to_frame(0.7);
        assert_abs_diff_eq!(once.trace(), 1.0, epsilon = 1e-10);
        let diff = (&once.matrix - &twice.matrix).iter().map(|z| z.norm()).fold(0.0, f64::max);
        assert!(diff < 1e-10, "{diff}");
        // building directly in the rotated frame agrees with rotating on the grid
        let direct = GridDensity::from_state(&g, &state, 0.7).unwrap();
        let diff = (&once.matrix - &direct.matrix).iter().map(|z| z.norm()).fold(0.0, f64::max);
        assert!(diff < 1e-8, "{diff}");
    }

    #[test]
    fn gaussian_state_moments_on_grid() {
        let g = grid();
        let state = GaussianOscillatorState::new(
            Vector2::new(0.5, -0.25),
            Matrix2::new(1.1, 0.3, 0.3, 0.4),
        )
        .unwrap();
        let rho = GridDensity::from_state(&g, &state, 0.0).unwrap();
        for theta in [0.0, 0.4, FRAC_PI_2, 2.0] {
            let (m, v) = rho.marginal(theta);
            let (m0, v0) = state.marginal(QuadratureDirection::new(theta));
            assert_abs_diff_eq!(m, m0, epsilon = 1e-8);
            assert_abs_diff_eq!(v, v0, epsilon = 1e-8);
        }
    }

    #[test]
    fn povm_matches_one_dimensional_conditioning() {
        let vac = GridDensity::vacuum(&grid());
        let out = vac.povm_apply(1.7, 0.0, 0.0).unwrap();
        let (_, vp) = out.state.marginal(0.0);
        assert_abs_diff_eq!(vp, 1.0 / 5.4, epsilon = 1e-3);
        assert!(out.converged);
        // the bare Kraus operator carries the full back-action
        let (_, vx) = out.state.marginal(FRAC_PI_2);
        assert_abs_diff_eq!(vx, 0.5 + 0.85, epsilon = 1e-6);
        assert_abs_diff_eq!(out.state.purity(), 1.0, epsilon = 1e-8);
    }

    #[test]
    fn povm_with_zero_coupling_is_trivial() {
        let vac = GridDensity::vacuum(&grid());
        let a = vac.povm_apply(0.0, 0.0, 0.3).unwrap();
        let b = vac.povm_apply(0.0, 0.0, -1.4).unwrap();
        let diff = (&a.state.matrix - &vac.matrix).iter().map(|z| z.norm()).fold(0.0, f64::max);
        assert!(diff < 1e-14);
        assert_abs_diff_eq!(a.weight, probe_amplitude(0.3).powi(2), epsilon = 1e-14);
        assert_abs_diff_eq!(b.weight, probe_amplitude(-1.4).powi(2), epsilon = 1e-14);
    }

    #[test]
    fn strong_measurement_is_projective() {
        let vac = GridDensity::vacuum(&grid());
        let kappa_sq = 50.0;
        let a0 = 0.37;
        let out = vac.povm_apply(kappa_sq, 0.0, kappa_sq.sqrt() * a0).unwrap();
        let (mean, var) = out.state.marginal(0.0);
        // posterior centre a0·κ²/(κ²+1), precision 2κ² + 2
        assert_abs_diff_eq!(mean, a0 * kappa_sq / (kappa_sq + 1.0), epsilon = 1e-9);
        assert_abs_diff_eq!(var, 1.0 / (2.0 * kappa_sq + 2.0), epsilon = 1e-9);
    }

    #[test]
    fn flat_effect_reduces_to_prior_prediction() {
        let g = grid();
        let state = GaussianOscillatorState::new(Vector2::zeros(), Matrix2::new(0.5, 0.0, 0.0, 1.0 / 5.4)).unwrap();
        let rho = GridDensity::from_state(&g, &state, 0.0).unwrap();
        let flat = GridDensity::identity(&g);
        let moments = retrodicted_optical_moments(&rho, &flat, 0.81, 0.0).unwrap();
        assert!((moments.variance / 0.65 - 1.0).abs() < 5e-3);
        let zero = retrodicted_optical_moments(&rho, &flat, 0.0, 0.0).unwrap();
        assert_abs_diff_eq!(zero.variance, 0.5, epsilon = 1e-12);
    }

    #[test]
    fn distribution_and_closed_m_integral_agree() {
        let g = grid();
        let state = GaussianOscillatorState::new(Vector2::new(0.1, 0.3), Matrix2::new(0.5, 0.0, 0.0, 1.0 / 5.4)).unwrap();
        let eff = EffectState::new(Matrix2::new(6.6, 0.0, 0.0, 4.4), Vector2::new(0.2, -0.5)).unwrap();
        let rho = GridDensity::from_state(&g, &state, 0.0).unwrap();
        let e = GridDensity::from_effect(&g, &eff, 0.0);
        let theta = 0.6;
        let outcomes = default_outcome_grid(&g.params(), 0.81, 1601);
        let dist = retrodicted_optical_distribution(&rho, &e, 0.81, theta, &outcomes).unwrap();
        let mom = retrodicted_optical_moments(&rho, &e, 0.81, theta).unwrap();
        assert_abs_diff_eq!(dist.mean, mom.mean, epsilon = 1e-8);
        assert_abs_diff_eq!(dist.variance, mom.variance, epsilon = 1e-8);
        assert!(dist.min_relative_density >= -1e-12);
        assert_abs_diff_eq!(trapezoid(&outcomes, &dist.density), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn rotations_compose_on_unbounded_operators() {
        let g = grid();
        let e = GridDensity::identity(&g).effect_apply(1.7, FRAC_PI_2, 0.0).unwrap();
        let (_, var) = e.to_frame(FRAC_PI_2).diagonal_moments();
        assert_abs_diff_eq!(var, 1.0 / 3.4, epsilon = 1e-9);
    }

    #[test]
    fn effect_chain_on_grid_matches_information_form() {
        let g = grid();
        let e4 = GridDensity::identity(&g).effect_apply(2.2, 0.0, 0.5).unwrap();
        let diag = e4.diagonal_distribution();
        let (mean, var) = moments(g.points(), &diag);
        assert_abs_diff_eq!(var, 1.0 / 4.4, epsilon = 1e-6);
        assert_abs_diff_eq!(mean, 0.5 / 2.2f64.sqrt(), epsilon = 1e-9);
    }
}
