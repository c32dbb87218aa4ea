//! Model-free analysis of measurement records: covariances, conditional
//! variances by linear regression, shot-noise calibration and squeezing metrics.

use nalgebra::{Matrix3, Matrix4, Vector3, Vector4};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::experiment::MeasurementRecord;
use crate::gaussian::VACUUM_VARIANCE;
use crate::qnd::PROBE_VACUUM_VARIANCE;

/// Thermal (unpolarized) spin noise relative to the coherent spin state.
pub const THERMAL_FACTOR: f64 = 1.25;

/// Variance increase from incomplete initial polarization.
pub const POLARIZATION_CORRECTION: f64 = 1.06;

/// Records an optical variance may sit below the shot-noise floor before it is an error.
pub const INCONSISTENCY_SIGMAS: f64 = 5.0;

const CHUNK: usize = 4096;

/// Streaming mean and co-moment of 4-vectors; chunks combine exactly.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct MomentAccumulator {
    n: u64,
    mean: Vector4<f64>,
    comoment: Matrix4<f64>,
}

impl MomentAccumulator {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, x: Vector4<f64>) {
        self.n += 1;
        let delta = x - self.mean;
        self.mean += delta / self.n as f64;
        self.comoment += delta * (x - self.mean).transpose();
    }

    pub fn merge(&self, other: &Self) -> Self {
        if self.n == 0 {
            return *other;
        }
        if other.n == 0 {
            return *self;
        }
        let n = self.n + other.n;
        let delta = other.mean - self.mean;
        let w = (self.n as f64) * (other.n as f64) / n as f64;
        Self {
            n,
            mean: self.mean + delta * (other.n as f64 / n as f64),
            comoment: self.comoment + other.comoment + delta * delta.transpose() * w,
        }
    }

    pub fn count(&self) -> u64 {
        self.n
    }

    pub fn mean(&self) -> Vector4<f64> {
        self.mean
    }

    /// Unbiased covariance; `None` below two samples.
    pub fn covariance(&self) -> Option<Matrix4<f64>> {
        (self.n >= 2).then(|| self.comoment / (self.n - 1) as f64)
    }
}

/// How standard errors are resampled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum ErrorMethod {
    /// Delete-one jackknife over repetitions.
    #[default]
    Jackknife,
    /// Spread of the statistic over `count` contiguous blocks.
    Blocks { count: usize },
}

/// Sample moments of `(m₁, m₂, m₃, m₄)`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CovarianceSummary {
    pub n: usize,
    pub mean: [f64; 4],
    pub cov: [[f64; 4]; 4],
    pub std_err: [[f64; 4]; 4],
    pub error_method: ErrorMethod,
}

impl CovarianceSummary {
    pub fn matrix(&self) -> Matrix4<f64> {
        Matrix4::from_fn(|i, j| self.cov[i][j])
    }

    /// A summary with given covariance and no sampling information.
    pub fn from_matrix(cov: Matrix4<f64>) -> Self {
        Self {
            n: 0,
            mean: [0.0; 4],
            cov: to_array(&cov),
            std_err: [[0.0; 4]; 4],
            error_method: ErrorMethod::Jackknife,
        }
    }
}

fn to_array(m: &Matrix4<f64>) -> [[f64; 4]; 4] {
    let mut a = [[0.0; 4]; 4];
    for (i, row) in a.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            *v = m[(i, j)];
        }
    }
    a
}

/// Records centred on their mean, for resampling.
pub struct RecordSample {
    centred: Vec<Vector4<f64>>,
    mean: Vector4<f64>,
    sum_outer: Matrix4<f64>,
}

impl RecordSample {
    pub fn new(records: &[MeasurementRecord]) -> Result<Self> {
        Self::from_vectors(records.iter().map(|r| Vector4::from(r.outcomes())).collect())
    }

    pub fn from_vectors(data: Vec<Vector4<f64>>) -> Result<Self> {
        if data.len() < 2 {
            return Err(Error::InsufficientData(format!(
                "need at least 2 records, got {}",
                data.len()
            )));
        }
        let acc = data
            .par_chunks(CHUNK)
            .map(|chunk| {
                let mut a = MomentAccumulator::new();
                chunk.iter().for_each(|x| a.push(*x));
                a
            })
            .collect::<Vec<_>>()
            .iter()
            .fold(MomentAccumulator::new(), |acc, a| acc.merge(a));
        let mean = acc.mean();
        let centred: Vec<Vector4<f64>> = data.iter().map(|x| x - mean).collect();
        Ok(Self {
            centred,
            mean,
            sum_outer: acc.comoment,
        })
    }

    pub fn len(&self) -> usize {
        self.centred.len()
    }

    pub fn is_empty(&self) -> bool {
        self.centred.is_empty()
    }

    pub fn mean(&self) -> Vector4<f64> {
        self.mean
    }

    pub fn covariance(&self) -> Matrix4<f64> {
        self.sum_outer / (self.len() - 1) as f64
    }

    /// Covariance with record `i` removed.
    fn leave_one_out(&self, i: usize) -> Matrix4<f64> {
        let n1 = (self.len() - 1) as f64;
        let y = self.centred[i];
        // centred data sum to zero, so the reduced sum is -y
        let s = self.sum_outer - y * y.transpose() - y * y.transpose() / n1;
        s / (n1 - 1.0)
    }

    /// Standard error of `stat(covariance)` under `method`.
    pub fn standard_error<F>(&self, method: ErrorMethod, stat: F) -> Result<f64>
    where
        F: Fn(&Matrix4<f64>) -> f64 + Sync,
    {
        let n = self.len();
        match method {
            ErrorMethod::Jackknife => {
                if n < 3 {
                    return Err(Error::InsufficientData("jackknife needs at least 3 records".into()));
                }
                let values: Vec<f64> = (0..n).into_par_iter().map(|i| stat(&self.leave_one_out(i))).collect();
                let mean = values.iter().sum::<f64>() / n as f64;
                let ss: f64 = values.iter().map(|v| (v - mean).powi(2)).sum();
                Ok((ss * (n - 1) as f64 / n as f64).sqrt())
            }
            ErrorMethod::Blocks { count } => {
                if count < 2 || n / count < 2 {
                    return Err(Error::InsufficientData(format!(
                        "{n} records cannot form {count} blocks of at least 2"
                    )));
                }
                let size = n / count;
                let values: Vec<f64> = (0..count)
                    .map(|b| {
                        let end = if b + 1 == count { n } else { (b + 1) * size };
                        let mut acc = MomentAccumulator::new();
                        self.centred[b * size..end].iter().for_each(|x| acc.push(*x));
                        stat(&acc.covariance().unwrap_or_else(Matrix4::zeros))
                    })
                    .collect();
                let mean = values.iter().sum::<f64>() / count as f64;
                let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (count - 1) as f64;
                Ok((var / count as f64).sqrt())
            }
        }
    }

    pub fn summary(&self, method: ErrorMethod) -> Result<CovarianceSummary> {
        let cov = self.covariance();
        let mut std_err = [[0.0; 4]; 4];
        for i in 0..4 {
            for j in i..4 {
                let se = if self.len() < 3 && method == ErrorMethod::Jackknife {
                    // normal-theory fallback for the smallest samples
                    ((cov[(i, i)] * cov[(j, j)] + cov[(i, j)].powi(2)) / (self.len() - 1) as f64).sqrt()
                } else {
                    self.standard_error(method, |c| c[(i, j)])?
                };
                std_err[i][j] = se;
                std_err[j][i] = se;
            }
        }
        Ok(CovarianceSummary {
            n: self.len(),
            mean: self.mean.into(),
            cov: to_array(&cov),
            std_err,
            error_method: method,
        })
    }
}

/// Unbiased covariances with jackknife standard errors.
pub fn covariance_summary(records: &[MeasurementRecord]) -> Result<CovarianceSummary> {
    RecordSample::new(records)?.summary(ErrorMethod::Jackknife)
}

/// `Var(m₂|m₁)` and its regression coefficient.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SingleConditional {
    pub variance: f64,
    pub alpha: f64,
    pub degenerate: bool,
}

/// `Var(m₂|m₁,m₃,m₄)` and its regression coefficients.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TripleConditional {
    pub variance: f64,
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub lambda: f64,
    /// Λ vanished and the pseudo-inverse solution was used.
    pub degenerate: bool,
}

/// `Var(m₂) - Cov(m₂,m₁)²/Var(m₁)`, `α = Cov(m₂,m₁)/Var(m₁)`.
pub fn conditional_variance_single(summary: &CovarianceSummary) -> SingleConditional {
    single_from_matrix(&summary.matrix())
}

pub fn single_from_matrix(c: &Matrix4<f64>) -> SingleConditional {
    let scale = c.diagonal().max();
    let (c11, c12, c22) = (c[(0, 0)], c[(0, 1)], c[(1, 1)]);
    if !(c11 > 1e-14 * scale) {
        return SingleConditional {
            variance: c22,
            alpha: 0.0,
            degenerate: true,
        };
    }
    let alpha = c12 / c11;
    SingleConditional {
        variance: c22 - alpha * c12,
        alpha,
        degenerate: false,
    }
}

/// Minimizes `Var(m₂ - αm₁ - βm₃ - γm₄)` via the explicit cofactor formulas.
pub fn conditional_variance_triple(summary: &CovarianceSummary) -> TripleConditional {
    triple_from_matrix(&summary.matrix())
}

pub fn triple_from_matrix(c: &Matrix4<f64>) -> TripleConditional {
    let cv = |u: usize, v: usize| c[(u - 1, v - 1)];
    let (c11, c12, c13, c14) = (cv(1, 1), cv(1, 2), cv(1, 3), cv(1, 4));
    let (c22, c23, c24) = (cv(2, 2), cv(2, 3), cv(2, 4));
    let (c33, c34, c44) = (cv(3, 3), cv(3, 4), cv(4, 4));
    let lambda = c11 * c33 * c44 + 2.0 * c13 * c14 * c34
        - c14 * c14 * c33
        - c13 * c13 * c44
        - c11 * c34 * c34;
    let scale = (c11 * c33 * c44).abs();
    if !(lambda.abs() > 1e-12 * scale) || scale == 0.0 {
        let k = Matrix3::new(c11, c13, c14, c13, c33, c34, c14, c34, c44);
        let rhs = Vector3::new(c12, c23, c24);
        let coef = k
            .svd(true, true)
            .solve(&rhs, 1e-12 * k.amax().max(f64::MIN_POSITIVE))
            .unwrap_or_else(|_| Vector3::zeros());
        return TripleConditional {
            variance: c22 - coef.dot(&rhs),
            alpha: coef[0],
            beta: coef[1],
            gamma: coef[2],
            lambda,
            degenerate: true,
        };
    }
    let alpha = (c14 * c23 * c34 + c13 * c24 * c34 - c12 * c34 * c34 - c14 * c24 * c33 - c13 * c23 * c44
        + c12 * c33 * c44)
        / lambda;
    let beta = (c13 * c14 * c24 + c12 * c14 * c34 - c23 * c14 * c14 - c24 * c34 * c11 - c12 * c13 * c44
        + c11 * c23 * c44)
        / lambda;
    let gamma = (c13 * c14 * c23 + c12 * c13 * c34 - c24 * c13 * c13 - c23 * c34 * c11 - c12 * c14 * c33
        + c24 * c11 * c33)
        / lambda;
    TripleConditional {
        variance: c22 - alpha * c12 - beta * c23 - gamma * c24,
        alpha,
        beta,
        gamma,
        lambda,
        degenerate: false,
    }
}

/// Optical-to-atomic calibration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibrationModel {
    /// Optical shot-noise variance at the operating power, raw detector units.
    pub shot_noise_unit: f64,
    pub thermal_factor: f64,
    pub polarization_correction: f64,
    pub kappa2_sq: f64,
    pub sql_atomic: f64,
    /// Linear shot-noise fit, when the model came from a calibration run.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub linearity: Option<LinearityCheck>,
}

impl CalibrationModel {
    /// Model for data already in shot-noise units with known coupling.
    pub fn from_kappa(kappa2_sq: f64) -> Result<Self> {
        if !(kappa2_sq > 0.0 && kappa2_sq.is_finite()) {
            return Err(Error::Calibration(format!("coupling κ² = {kappa2_sq} must be positive")));
        }
        Ok(Self {
            shot_noise_unit: PROBE_VACUUM_VARIANCE,
            thermal_factor: THERMAL_FACTOR,
            polarization_correction: POLARIZATION_CORRECTION,
            kappa2_sq,
            sql_atomic: VACUUM_VARIANCE,
            linearity: None,
        })
    }

    /// Raw detector variance expressed with the shot-noise floor at 1/2.
    pub fn to_shot_noise_units(&self, raw_variance: f64) -> f64 {
        raw_variance / self.shot_noise_unit * PROBE_VACUUM_VARIANCE
    }
}

/// Shot-noise variance measured at one probe power with the atomic signal detuned away.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ShotNoisePoint {
    pub power: f64,
    pub variance: f64,
}

/// Straight-line fit of shot noise against power.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinearityCheck {
    pub intercept: f64,
    pub slope: f64,
    pub r_squared: f64,
    /// `|c|·P_max/|b|` from a quadratic fit `a + bP + cP²`.
    pub curvature: f64,
}

/// Largest tolerated relative curvature of the shot-noise line.
pub const MAX_CURVATURE: f64 = 0.01;
pub const MIN_R_SQUARED: f64 = 0.99;

/// Fits the shot-noise line and checks it is straight.
pub fn check_linearity(points: &[ShotNoisePoint]) -> Result<LinearityCheck> {
    if points.len() < 3 {
        return Err(Error::Calibration(format!(
            "shot-noise linearity needs at least 3 probe powers, got {}",
            points.len()
        )));
    }
    let n = points.len() as f64;
    let mp = points.iter().map(|p| p.power).sum::<f64>() / n;
    let mv = points.iter().map(|p| p.variance).sum::<f64>() / n;
    let spp: f64 = points.iter().map(|p| (p.power - mp).powi(2)).sum();
    let spv: f64 = points.iter().map(|p| (p.power - mp) * (p.variance - mv)).sum();
    let svv: f64 = points.iter().map(|p| (p.variance - mv).powi(2)).sum();
    if !(spp > 0.0) {
        return Err(Error::Calibration("shot-noise powers are all equal".into()));
    }
    let slope = spv / spp;
    let intercept = mv - slope * mp;
    let r_squared = if svv > 0.0 { spv * spv / (spp * svv) } else { 0.0 };
    // quadratic least squares on centred powers
    let mut a = Matrix3::zeros();
    let mut b = Vector3::zeros();
    for p in points {
        let t = p.power - mp;
        let row = Vector3::new(1.0, t, t * t);
        a += row * row.transpose();
        b += row * p.variance;
    }
    let q = a
        .svd(true, true)
        .solve(&b, 1e-14 * a.amax())
        .map_err(|e| Error::Calibration(e.to_string()))?;
    // back to P: b_P = q1 - 2 q2 mp
    let c = q[2];
    let b_p = q[1] - 2.0 * c * mp;
    let p_max = points.iter().map(|p| p.power.abs()).fold(0.0, f64::max);
    let curvature = if b_p != 0.0 { (c * p_max / b_p).abs() } else { f64::INFINITY };
    Ok(LinearityCheck {
        intercept,
        slope,
        r_squared,
        curvature,
    })
}

/// Calibrates the atomic SQL from a thermal-state measurement.
///
/// The unpolarized ensemble has 5/4 of the coherent-state spin noise, so the
/// coherent-state contribution is `(thermal - shot)/1.25` in detector units and
/// `κ² = that / shot` once the shot-noise floor is mapped to 1/2.
pub fn calibrate_sql(
    thermal_variance_optical: f64,
    shot_noise: &[ShotNoisePoint],
    operating_power: f64,
) -> Result<CalibrationModel> {
    let lin = check_linearity(shot_noise)?;
    if !(lin.r_squared > MIN_R_SQUARED) {
        return Err(Error::Calibration(format!(
            "shot noise is not linear in probe power (R² = {:.4})",
            lin.r_squared
        )));
    }
    if !(lin.curvature < MAX_CURVATURE) {
        return Err(Error::Calibration(format!(
            "shot noise bends with probe power (relative curvature {:.3})",
            lin.curvature
        )));
    }
    let snu = lin.intercept + lin.slope * operating_power;
    if !(snu > 0.0) {
        return Err(Error::Calibration(format!("shot-noise unit {snu} is not positive")));
    }
    if !(thermal_variance_optical > snu) {
        return Err(Error::Calibration(
            "thermal variance does not exceed shot noise; no atomic signal".into(),
        ));
    }
    let css = (thermal_variance_optical - snu) / THERMAL_FACTOR;
    Ok(CalibrationModel {
        shot_noise_unit: snu,
        thermal_factor: THERMAL_FACTOR,
        polarization_correction: POLARIZATION_CORRECTION,
        kappa2_sq: css / snu,
        sql_atomic: VACUUM_VARIANCE,
        linearity: Some(lin),
    })
}

/// Atomic variance inferred from an optical one.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct AtomicVariance {
    pub value: f64,
    pub std_err: f64,
    /// The optical variance sat below shot noise and the result was set to 0.
    pub clamped: bool,
}

/// `(Var - 1/2)/κ₂²` for an optical variance in shot-noise units.
pub fn infer_atomic_variance(optical_var: f64, std_err: f64, cal: &CalibrationModel) -> Result<AtomicVariance> {
    let excess = optical_var - PROBE_VACUUM_VARIANCE;
    let se = std_err / cal.kappa2_sq;
    if excess >= 0.0 {
        return Ok(AtomicVariance {
            value: excess / cal.kappa2_sq,
            std_err: se,
            clamped: false,
        });
    }
    if -excess > INCONSISTENCY_SIGMAS * std_err {
        return Err(Error::DataInconsistency(format!(
            "optical variance {optical_var} lies more than {INCONSISTENCY_SIGMAS} standard errors below shot noise"
        )));
    }
    Ok(AtomicVariance {
        value: 0.0,
        std_err: se,
        clamped: true,
    })
}

/// `√(var_p·var_x)`; the single-state bound is 1/2.
pub fn uncertainty_product(var_p_atomic: f64, var_x_atomic: f64) -> f64 {
    (var_p_atomic.max(0.0) * var_x_atomic.max(0.0)).sqrt()
}

/// Wineland parameter in linear and dB form.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Squeezing {
    pub xi_sq: f64,
    pub db: f64,
}

/// `ξ² = (var/(1/2))/f²` with `f` the mean-spin fraction.
pub fn wineland_xi_sq(var_atomic: f64, mean_spin_fraction: f64) -> Result<Squeezing> {
    if !(mean_spin_fraction > 0.0 && mean_spin_fraction <= 1.0) {
        return Err(Error::invalid(format!(
            "mean spin fraction {mean_spin_fraction} outside (0, 1]"
        )));
    }
    let xi_sq = var_atomic / VACUUM_VARIANCE / (mean_spin_fraction * mean_spin_fraction);
    Ok(Squeezing {
        xi_sq,
        db: 10.0 * xi_sq.log10(),
    })
}

/// Estimate with its standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Estimate {
    pub value: f64,
    pub std_err: f64,
}

/// Conditional optical variances of one record set, with resampled errors.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConditionalEstimates {
    pub var_m2: Estimate,
    pub given_m1: SingleConditional,
    pub given_m1_se: f64,
    pub given_all: TripleConditional,
    pub given_all_se: f64,
}

pub fn conditional_estimates(sample: &RecordSample, method: ErrorMethod) -> Result<ConditionalEstimates> {
    let cov = sample.covariance();
    Ok(ConditionalEstimates {
        var_m2: Estimate {
            value: cov[(1, 1)],
            std_err: sample.standard_error(method, |c| c[(1, 1)])?,
        },
        given_m1: single_from_matrix(&cov),
        given_m1_se: sample.standard_error(method, |c| single_from_matrix(c).variance)?,
        given_all: triple_from_matrix(&cov),
        given_all_se: sample.standard_error(method, |c| triple_from_matrix(c).variance)?,
    })
}
