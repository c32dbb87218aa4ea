//! Four-pulse protocol: decoherence channel, RF displacement, Monte Carlo records.

use nalgebra::{DMatrix, DVector, Matrix2, Vector2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::f64::consts::FRAC_PI_2;
use std::io::{BufRead, Write};

use crate::error::{Error, Result};
use crate::gaussian::{
    combine_rho_effect, symmetrize, EffectState, GaussianOscillatorState, QuadratureDirection,
    VACUUM_VARIANCE,
};
use crate::qnd::{
    backward_update, forward_update, outcome_distribution, sample_outcome, BackactionMode,
    OutcomeDistribution, PulseSpec, PROBE_VACUUM_VARIANCE,
};

/// Index of the retrodicted pulse in the four-pulse protocol.
pub const TARGET_PULSE: usize = 1;

/// Relaxation constants of the spin oscillator. Times in ms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecoherenceParams {
    /// Mean-spin decay time; `None` disables it.
    #[serde(default)]
    pub t1_ms: Option<f64>,
    /// Transverse thermalization time; `None` disables it.
    #[serde(default)]
    pub t2_ms: Option<f64>,
    /// Probe-induced depolarization rate per ms of probe time.
    #[serde(default)]
    pub probe_depolarization: f64,
    /// Initial atomic polarization; reference for the Wineland parameter.
    #[serde(default = "default_polarization")]
    pub initial_polarization: f64,
}

fn default_polarization() -> f64 {
    0.979
}

impl Default for DecoherenceParams {
    fn default() -> Self {
        Self::none()
    }
}

impl DecoherenceParams {
    pub fn none() -> Self {
        Self {
            t1_ms: None,
            t2_ms: None,
            probe_depolarization: 0.0,
            initial_polarization: default_polarization(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, t) in [("t1_ms", self.t1_ms), ("t2_ms", self.t2_ms)] {
            if let Some(t) = t {
                if !(t > 0.0) {
                    return Err(Error::invalid(format!("{name} must be positive, got {t}")));
                }
            }
        }
        if !(self.probe_depolarization >= 0.0 && self.probe_depolarization.is_finite()) {
            return Err(Error::invalid("probe depolarization must be non-negative"));
        }
        if !(self.initial_polarization > 0.0 && self.initial_polarization <= 1.0) {
            return Err(Error::invalid("initial polarization must lie in (0, 1]"));
        }
        Ok(())
    }

    fn rate(t: Option<f64>) -> f64 {
        t.map_or(0.0, |t| 1.0 / t)
    }

    /// Fraction of the transverse state that survives `dt` ms: `1 - ε_dt`.
    pub fn survival(&self, dt_ms: f64) -> f64 {
        (-dt_ms * (Self::rate(self.t2_ms) + self.probe_depolarization)).exp()
    }

    /// Factor applied to the mean spin over `dt` ms.
    pub fn spin_decay(&self, dt_ms: f64) -> f64 {
        (-dt_ms * (Self::rate(self.t1_ms) + self.probe_depolarization)).exp()
    }
}

/// Thermalization towards the vacuum over `dt_ms`:
/// `mean ← √s·mean`, `cov ← s·cov + (1 - s)/2·I`.
pub fn apply_decoherence(
    state: &GaussianOscillatorState,
    dt_ms: f64,
    params: &DecoherenceParams,
) -> Result<GaussianOscillatorState> {
    if !(dt_ms >= 0.0) {
        return Err(Error::invalid(format!("negative time step {dt_ms}")));
    }
    let s = params.survival(dt_ms);
    Ok(GaussianOscillatorState {
        mean: state.mean * s.sqrt(),
        cov: symmetrize(state.cov * s + Matrix2::identity() * ((1.0 - s) * VACUUM_VARIANCE)),
        mean_spin_fraction: state.mean_spin_fraction * params.spin_decay(dt_ms),
    })
}

/// Heisenberg-picture adjoint of [`apply_decoherence`] acting on an effect.
pub fn pull_back_decoherence(eff: &EffectState, dt_ms: f64, params: &DecoherenceParams) -> EffectState {
    let s = params.survival(dt_ms);
    if s == 1.0 {
        return eff.clone();
    }
    eff.pull_back(s.sqrt(), &(Matrix2::identity() * ((1.0 - s) * VACUUM_VARIANCE)))
}

/// Resonant RF pulse used to displace the oscillator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RFPulseSpec {
    /// Cosine-quadrature Rabi rate, rad/s.
    pub omega_c: f64,
    /// Sine-quadrature Rabi rate, rad/s.
    pub omega_s: f64,
    /// Pulse length, s.
    pub duration_s: f64,
    #[serde(default)]
    pub phase_rad: f64,
    /// RF carrier, rad/s.
    pub drive_frequency: f64,
    /// Larmor frequency, rad/s.
    pub larmor_frequency: f64,
}

impl RFPulseSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.duration_s > 0.0) {
            return Err(Error::invalid("RF duration must be positive"));
        }
        for (name, w) in [("omega_c", self.omega_c), ("omega_s", self.omega_s)] {
            if !((w * self.duration_s).abs() < 0.1) {
                return Err(Error::invalid(format!(
                    "{name}·T = {} violates the weak-drive condition (< 0.1)",
                    w * self.duration_s
                )));
            }
        }
        if !(self.drive_frequency * self.duration_s > 10.0) {
            return Err(Error::invalid(format!(
                "Ω·T = {} violates the many-cycle condition (> 10)",
                self.drive_frequency * self.duration_s
            )));
        }
        Ok(())
    }

    /// Displacement `-(ω_s, ω_c)·√J_x·T/2` of `(x_A, p_A)`.
    pub fn displacement(&self, mean_spin: f64) -> Result<Vector2<f64>> {
        self.validate()?;
        if self.phase_rad != 0.0 || self.drive_frequency != self.larmor_frequency {
            return Err(Error::OffResonant);
        }
        if !(mean_spin >= 0.0) {
            return Err(Error::invalid("mean spin must be non-negative"));
        }
        let k = -0.5 * mean_spin.sqrt() * self.duration_s;
        Ok(Vector2::new(self.omega_s * k, self.omega_c * k))
    }
}

/// Classical displacement by a resonant RF pulse; covariance is untouched.
pub fn rf_displacement(
    state: &GaussianOscillatorState,
    rf: &RFPulseSpec,
    mean_spin: f64,
) -> Result<GaussianOscillatorState> {
    Ok(state.displace(rf.displacement(mean_spin)?))
}

/// One probe pulse with its duration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PulseStep {
    pub theta_rad: f64,
    pub kappa_sq: f64,
    pub duration_ms: f64,
    #[serde(default = "default_duty")]
    pub duty: f64,
    #[serde(default)]
    pub backaction: BackactionMode,
}

fn default_duty() -> f64 {
    0.14
}

impl PulseStep {
    pub fn new(theta_rad: f64, kappa_sq: f64, duration_ms: f64) -> Self {
        Self {
            theta_rad,
            kappa_sq,
            duration_ms,
            duty: default_duty(),
            backaction: BackactionMode::default(),
        }
    }

    pub fn pulse(&self) -> Result<PulseSpec> {
        PulseSpec::new(
            QuadratureDirection::new(self.theta_rad),
            self.kappa_sq,
            self.duty,
            self.backaction,
        )
    }
}

/// RF displacement applied right before a given pulse.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RfInjection {
    pub rf: RFPulseSpec,
    /// `J_x` in units of ħ.
    pub mean_spin: f64,
    /// 1-based pulse index the displacement precedes.
    #[serde(default = "default_rf_pulse")]
    pub before_pulse: usize,
}

fn default_rf_pulse() -> usize {
    2
}

/// Pulse sequence plus noise model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SequenceConfig {
    pub pulses: Vec<PulseStep>,
    #[serde(default)]
    pub decoherence: DecoherenceParams,
    pub repetitions: usize,
    pub seed: u64,
    /// Initial covariance is `factor·I/2`.
    #[serde(default = "one")]
    pub initial_variance_factor: f64,
    /// Multiplies every κ².
    #[serde(default = "one")]
    pub detection_efficiency: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rf_injection: Option<RfInjection>,
}

fn one() -> f64 {
    1.0
}

impl SequenceConfig {
    /// κ₁² = 1.7, κ₂² = 0.81, κ₃² = 3.3, κ₄² = 2.2 with durations 1, 0.5, 2, 1 ms.
    pub fn reference(theta2: f64, backaction: BackactionMode) -> Self {
        let mut pulses = vec![
            PulseStep::new(0.0, 1.7, 1.0),
            PulseStep::new(theta2, 0.81, 0.5),
            PulseStep::new(FRAC_PI_2, 3.3, 2.0),
            PulseStep::new(0.0, 2.2, 1.0),
        ];
        for p in &mut pulses {
            p.backaction = backaction;
        }
        Self {
            pulses,
            decoherence: DecoherenceParams::none(),
            repetitions: 10_000,
            seed: 1,
            initial_variance_factor: 1.0,
            detection_efficiency: 1.0,
            rf_injection: None,
        }
    }

    pub fn with_kappas(mut self, kappa_sq: [f64; 4]) -> Self {
        for (p, k) in self.pulses.iter_mut().zip(kappa_sq) {
            p.kappa_sq = k;
        }
        self
    }

    pub fn with_theta2(mut self, theta2: f64) -> Self {
        if let Some(p) = self.pulses.get_mut(TARGET_PULSE) {
            p.theta_rad = theta2;
        }
        self
    }

    pub fn theta2(&self) -> f64 {
        self.pulses
            .get(TARGET_PULSE)
            .map_or(0.0, |p| QuadratureDirection::new(p.theta_rad).theta())
    }

    /// Whether this is the four-pulse layout the records and estimator expect.
    pub fn is_four_pulse(&self) -> bool {
        self.pulses.len() == 4
    }

    pub fn validate(&self) -> Result<()> {
        if self.pulses.is_empty() {
            return Err(Error::invalid("sequence has no pulses"));
        }
        self.decoherence.validate()?;
        for (i, step) in self.pulses.iter().enumerate() {
            step.pulse()?;
            if !(step.duration_ms > 0.0) {
                return Err(Error::invalid(format!("pulse {} has non-positive duration", i + 1)));
            }
            if self.decoherence.probe_depolarization * step.duration_ms >= 1.0 {
                return Err(Error::invalid(format!(
                    "pulse {} depolarizes completely (ε·τ >= 1)",
                    i + 1
                )));
            }
        }
        if !(self.initial_variance_factor >= 1.0 && self.initial_variance_factor.is_finite()) {
            return Err(Error::invalid("initial variance factor must be >= 1"));
        }
        if !(self.detection_efficiency > 0.0 && self.detection_efficiency <= 1.0) {
            return Err(Error::invalid("detection efficiency must lie in (0, 1]"));
        }
        if let Some(inj) = &self.rf_injection {
            if inj.before_pulse == 0 || inj.before_pulse > self.pulses.len() {
                return Err(Error::invalid("RF injection refers to a missing pulse"));
            }
            inj.rf.displacement(inj.mean_spin)?;
        }
        Ok(())
    }

    pub fn initial_state(&self) -> GaussianOscillatorState {
        let mut s = GaussianOscillatorState::vacuum();
        s.cov *= self.initial_variance_factor;
        s
    }

    fn rf_before(&self, pulse_index: usize) -> Result<Option<Vector2<f64>>> {
        match &self.rf_injection {
            Some(inj) if inj.before_pulse == pulse_index + 1 => Ok(Some(inj.rf.displacement(inj.mean_spin)?)),
            _ => Ok(None),
        }
    }

    /// Per-pulse `(survival before the pulse, effective pulse)`.
    ///
    /// The effective coupling is `κ²·η·f` with `f` the mean-spin fraction when the
    /// pulse starts.
    pub fn schedule(&self) -> Result<Vec<(f64, PulseSpec)>> {
        self.validate()?;
        let mut fraction = 1.0;
        self.pulses
            .iter()
            .map(|step| {
                fraction *= self.decoherence.spin_decay(step.duration_ms);
                let pulse = step.pulse()?;
                let eff = pulse.with_kappa_sq(step.kappa_sq * self.detection_efficiency * fraction);
                Ok((self.decoherence.survival(step.duration_ms), eff))
            })
            .collect()
    }
}

/// One repetition's outcomes, in probe shot-noise units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeasurementRecord {
    pub repetition_id: u64,
    pub theta2_rad: f64,
    pub m1: f64,
    pub m2: f64,
    pub m3: f64,
    pub m4: f64,
}

impl MeasurementRecord {
    pub fn outcomes(&self) -> [f64; 4] {
        [self.m1, self.m2, self.m3, self.m4]
    }
}

/// Records of one configuration, all sharing θ₂.
#[derive(Debug, Clone, PartialEq)]
pub struct RecordSet {
    pub config: SequenceConfig,
    pub records: Vec<MeasurementRecord>,
}

/// Random stream of repetition `rep`: the seed's ChaCha8 generator on stream `rep`.
pub fn repetition_rng(seed: u64, rep: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(rep);
    rng
}

/// Runs the sequence once, returning each outcome with the conditional law it was drawn from.
pub fn run_chain<R: Rng + ?Sized>(
    config: &SequenceConfig,
    rng: &mut R,
) -> Result<Vec<(f64, OutcomeDistribution)>> {
    let schedule = config.schedule()?;
    let mut state = config.initial_state();
    let mut out = Vec::with_capacity(schedule.len());
    for (i, (survival, pulse)) in schedule.iter().enumerate() {
        state = decohere_by(&state, *survival);
        if let Some(delta) = config.rf_before(i)? {
            state = state.displace(delta);
        }
        let law = outcome_distribution(&state, pulse);
        let m = sample_outcome(&state, pulse, rng);
        state = forward_update(&state, pulse, m)?;
        out.push((m, law));
    }
    Ok(out)
}

fn decohere_by(state: &GaussianOscillatorState, s: f64) -> GaussianOscillatorState {
    GaussianOscillatorState {
        mean: state.mean * s.sqrt(),
        cov: symmetrize(state.cov * s + Matrix2::identity() * ((1.0 - s) * VACUUM_VARIANCE)),
        mean_spin_fraction: state.mean_spin_fraction,
    }
}

/// One repetition of the four-pulse protocol.
pub fn run_sequence<R: Rng + ?Sized>(
    config: &SequenceConfig,
    repetition_id: u64,
    rng: &mut R,
) -> Result<MeasurementRecord> {
    if !config.is_four_pulse() {
        return Err(Error::invalid(format!(
            "records need exactly 4 pulses, sequence has {}",
            config.pulses.len()
        )));
    }
    let chain = run_chain(config, rng)?;
    Ok(MeasurementRecord {
        repetition_id,
        theta2_rad: config.theta2(),
        m1: chain[0].0,
        m2: chain[1].0,
        m3: chain[2].0,
        m4: chain[3].0,
    })
}

/// `config.repetitions` independent repetitions, each on its own stream.
pub fn monte_carlo(config: &SequenceConfig) -> Result<RecordSet> {
    if config.repetitions == 0 {
        return Err(Error::invalid("repetitions must be >= 1"));
    }
    config.validate()?;
    let records = (0..config.repetitions as u64)
        .into_par_iter()
        .map(|rep| run_sequence(config, rep, &mut repetition_rng(config.seed, rep)))
        .collect::<Result<Vec<_>>>()?;
    Ok(RecordSet {
        config: config.clone(),
        records,
    })
}

/// Exact mean vector and covariance of `(m₁, …, m_k)` from joint propagation of
/// the atomic quadratures and all outcomes.
pub fn analytic_record_moments(config: &SequenceConfig) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let schedule = config.schedule()?;
    let k = schedule.len();
    let dim = 2 + k;
    let init = config.initial_state();
    let mut mean = DVector::zeros(dim);
    let mut cov = DMatrix::zeros(dim, dim);
    cov.view_mut((0, 0), (2, 2)).copy_from(&init.cov);
    for (i, (s, pulse)) in schedule.iter().enumerate() {
        // z ← √s z + noise
        let mut a = DMatrix::identity(dim, dim);
        a[(0, 0)] = s.sqrt();
        a[(1, 1)] = s.sqrt();
        let mut q = DMatrix::zeros(dim, dim);
        q[(0, 0)] = (1.0 - s) * VACUUM_VARIANCE;
        q[(1, 1)] = (1.0 - s) * VACUUM_VARIANCE;
        if let Some(delta) = config.rf_before(i)? {
            mean = &a * mean;
            mean[0] += delta[0];
            mean[1] += delta[1];
        } else {
            mean = &a * mean;
        }
        cov = &a * cov * a.transpose() + q;
        // m_i = κ u·z + ν, then z ← z + w·kick
        let u = pulse.direction.unit();
        let kappa = pulse.kappa();
        let mut b = DMatrix::identity(dim, dim);
        b[(2 + i, 2 + i)] = 0.0;
        b[(2 + i, 0)] = kappa * u[0];
        b[(2 + i, 1)] = kappa * u[1];
        let mut q = DMatrix::zeros(dim, dim);
        q[(2 + i, 2 + i)] = PROBE_VACUUM_VARIANCE;
        let kick = pulse.backaction_noise();
        for r in 0..2 {
            for c in 0..2 {
                q[(r, c)] = kick[(r, c)];
            }
        }
        mean = &b * mean;
        cov = &b * cov * b.transpose() + q;
    }
    let outcome_mean = mean.rows(2, k).into_owned();
    let outcome_cov = cov.view((2, 2), (k, k)).into_owned();
    Ok((outcome_mean, outcome_cov))
}

/// Past quantum state of pulse 2 for given outcomes `m₁, m₃, m₄`.
#[derive(Debug, Clone, PartialEq)]
pub struct PastQuantumState {
    pub rho: GaussianOscillatorState,
    pub effect: EffectState,
    /// Effective pulse 2 (coupling includes efficiency and spin decay).
    pub target: PulseSpec,
}

/// ρ just before pulse 2 and E just after it, conditioned on the other outcomes.
pub fn past_quantum_state(config: &SequenceConfig, m1: f64, m3: f64, m4: f64) -> Result<PastQuantumState> {
    if !config.is_four_pulse() {
        return Err(Error::invalid("past quantum state needs the four-pulse sequence"));
    }
    let schedule = config.schedule()?;
    let mut rho = decohere_by(&config.initial_state(), schedule[0].0);
    if let Some(delta) = config.rf_before(0)? {
        rho = rho.displace(delta);
    }
    rho = forward_update(&rho, &schedule[0].1, m1)?;
    rho = decohere_by(&rho, schedule[1].0);
    if let Some(delta) = config.rf_before(1)? {
        rho = rho.displace(delta);
    }
    let mut eff = backward_update(&EffectState::flat(), &schedule[3].1, m4)?;
    if let Some(delta) = config.rf_before(3)? {
        eff = shift_effect(&eff, delta);
    }
    eff = pull_back_survival(&eff, schedule[3].0);
    eff = backward_update(&eff, &schedule[2].1, m3)?;
    if let Some(delta) = config.rf_before(2)? {
        eff = shift_effect(&eff, delta);
    }
    eff = pull_back_survival(&eff, schedule[2].0);
    Ok(PastQuantumState {
        rho,
        effect: eff,
        target: schedule[1].1,
    })
}

fn pull_back_survival(eff: &EffectState, s: f64) -> EffectState {
    if s == 1.0 {
        return eff.clone();
    }
    eff.pull_back(s.sqrt(), &(Matrix2::identity() * ((1.0 - s) * VACUUM_VARIANCE)))
}

/// E(z) → E(z + δ): an effect seen through a deterministic displacement.
fn shift_effect(eff: &EffectState, delta: Vector2<f64>) -> EffectState {
    EffectState {
        info_matrix: eff.info_matrix,
        info_vector: eff.info_vector - eff.info_matrix * delta,
    }
}

/// Retrodicted atomic quadrature of pulse 2 for one record.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RetrodictedRecord {
    pub mean: f64,
    pub variance: f64,
}

/// `(μ_ρE, σ_ρE²)` along θ₂ from the record's `m₁, m₃, m₄`.
pub fn retrodict_record(config: &SequenceConfig, record: &MeasurementRecord) -> Result<RetrodictedRecord> {
    let pqs = past_quantum_state(config, record.m1, record.m3, record.m4)?;
    let (mean, variance) = combine_rho_effect(&pqs.rho, &pqs.effect, pqs.target.direction);
    Ok(RetrodictedRecord { mean, variance })
}

pub const CSV_HEADER: &str = "repetition_id,theta2_rad,m1,m2,m3,m4";

impl RecordSet {
    /// Writes the config echo as `# ` lines followed by the CSV body.
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        let echo = toml::to_string(&self.config).map_err(|e| Error::Config(e.to_string()))?;
        let mut buf = String::new();
        for line in echo.lines() {
            buf.push_str("# ");
            buf.push_str(line);
            buf.push('\n');
        }
        buf.push_str(CSV_HEADER);
        buf.push('\n');
        for r in &self.records {
            buf.push_str(&format!(
                "{},{},{},{},{},{}\n",
                r.repetition_id, r.theta2_rad, r.m1, r.m2, r.m3, r.m4
            ));
        }
        out.write_all(buf.as_bytes())
            .map_err(|e| Error::io("<record stream>", e))
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = std::io::BufWriter::new(file);
        self.write_csv(&mut w)?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_csv(std::io::BufReader::new(file))
    }

    /// Parses a record file. The config echo is required.
    pub fn read_csv<R: BufRead>(input: R) -> Result<Self> {
        let mut echo = String::new();
        let mut records = Vec::new();
        let mut header_seen = false;
        let mut theta2: Option<f64> = None;
        for (idx, line) in input.lines().enumerate() {
            let line_no = idx as u64 + 1;
            let line = line.map_err(|e| Error::Parse {
                line: line_no,
                message: e.to_string(),
            })?;
            if let Some(rest) = line.strip_prefix('#') {
                echo.push_str(rest.strip_prefix(' ').unwrap_or(rest));
                echo.push('\n');
                continue;
            }
            if !header_seen {
                if line.trim_end_matches('\r') != CSV_HEADER {
                    return Err(Error::Parse {
                        line: line_no,
                        message: format!("expected header `{CSV_HEADER}`"),
                    });
                }
                header_seen = true;
                continue;
            }
            if line.is_empty() {
                continue;
            }
            let record = parse_record(&line, line_no)?;
            match theta2 {
                None => theta2 = Some(record.theta2_rad),
                Some(t) if t != record.theta2_rad => {
                    return Err(Error::Parse {
                        line: line_no,
                        message: "theta2_rad differs from earlier rows".into(),
                    })
                }
                _ => {}
            }
            records.push(record);
        }
        if !header_seen {
            return Err(Error::Parse {
                line: 1,
                message: "missing CSV header".into(),
            });
        }
        if echo.trim().is_empty() {
            return Err(Error::Parse {
                line: 1,
                message: "missing config echo".into(),
            });
        }
        let config: SequenceConfig =
            toml::from_str(&echo).map_err(|e| Error::Parse {
                line: 1,
                message: format!("config echo: {e}"),
            })?;
        Ok(Self { config, records })
    }
}

fn parse_record(line: &str, line_no: u64) -> Result<MeasurementRecord> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .from_reader(line.as_bytes());
    let row = reader
        .records()
        .next()
        .transpose()
        .map_err(|e| Error::Parse {
            line: line_no,
            message: e.to_string(),
        })?
        .ok_or_else(|| Error::Parse {
            line: line_no,
            message: "empty row".into(),
        })?;
    if row.len() != 6 {
        return Err(Error::Parse {
            line: line_no,
            message: format!("expected 6 columns, found {}", row.len()),
        });
    }
    let field = |col: usize| -> Result<f64> {
        let v: f64 = row[col].trim().parse().map_err(|_| Error::Parse {
            line: line_no,
            message: format!("column {}: `{}` is not a number", col + 1, &row[col]),
        })?;
        if !v.is_finite() {
            return Err(Error::Parse {
                line: line_no,
                message: format!("column {}: non-finite value", col + 1),
            });
        }
        Ok(v)
    };
    let repetition_id = row[0].trim().parse().map_err(|_| Error::Parse {
        line: line_no,
        message: format!("column 1: `{}` is not a repetition id", &row[0]),
    })?;
    Ok(MeasurementRecord {
        repetition_id,
        theta2_rad: field(1)?,
        m1: field(2)?,
        m2: field(3)?,
        m3: field(4)?,
        m4: field(5)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn t2_only(t2: f64) -> DecoherenceParams {
        DecoherenceParams {
            t2_ms: Some(t2),
            ..DecoherenceParams::none()
        }
    }

    #[test]
    fn decoherence_identity_and_fixed_point() {
        let p = t2_only(20.0);
        let s = GaussianOscillatorState::new(Vector2::new(0.3, 0.1), Matrix2::new(0.5, 0.0, 0.0, 0.1852)).unwrap();
        assert_eq!(apply_decoherence(&s, 0.0, &p).unwrap(), s);
        let vac = GaussianOscillatorState::vacuum();
        let out = apply_decoherence(&vac, 7.3, &p).unwrap();
        assert_abs_diff_eq!(out.cov, vac.cov, epsilon = 1e-15);
    }

    #[test]
    fn decoherence_half_mixing() {
        let p = t2_only(1.0);
        let dt = std::f64::consts::LN_2;
        let s = GaussianOscillatorState::new(Vector2::zeros(), Matrix2::new(0.5, 0.0, 0.0, 0.1852)).unwrap();
        let out = apply_decoherence(&s, dt, &p).unwrap();
        assert_abs_diff_eq!(out.cov[(1, 1)], 0.3426, epsilon = 1e-12);
    }

    #[test]
    fn decoherence_composes() {
        let p = DecoherenceParams {
            t1_ms: Some(125.0),
            t2_ms: Some(20.0),
            probe_depolarization: 0.03,
            initial_polarization: 0.979,
        };
        let s = GaussianOscillatorState::new(Vector2::new(1.0, -0.4), Matrix2::new(1.3, 0.2, 0.2, 0.15)).unwrap();
        let two = apply_decoherence(&apply_decoherence(&s, 1.2, &p).unwrap(), 2.5, &p).unwrap();
        let one = apply_decoherence(&s, 3.7, &p).unwrap();
        assert_abs_diff_eq!(two.cov, one.cov, epsilon = 1e-10);
        assert_abs_diff_eq!(two.mean, one.mean, epsilon = 1e-10);
        assert_abs_diff_eq!(two.mean_spin_fraction, one.mean_spin_fraction, epsilon = 1e-10);
    }

    fn rf(omega_c: f64, omega_s: f64, duration_s: f64) -> RFPulseSpec {
        RFPulseSpec {
            omega_c,
            omega_s,
            duration_s,
            phase_rad: 0.0,
            drive_frequency: 2.0 * std::f64::consts::PI * 375e3,
            larmor_frequency: 2.0 * std::f64::consts::PI * 375e3,
        }
    }

    #[test]
    fn rf_displacement_structure() {
        let vac = GaussianOscillatorState::vacuum();
        assert_eq!(rf_displacement(&vac, &rf(0.0, 0.0, 1e-4), 1e12).unwrap(), vac);
        let cos_only = rf_displacement(&vac, &rf(100.0, 0.0, 1e-4), 1e12).unwrap();
        assert_eq!(cos_only.mean[0], 0.0);
        assert_abs_diff_eq!(cos_only.mean[1], -0.5 * 100.0 * 1e6 * 1e-4, epsilon = 1e-9);
        let sin_only = rf_displacement(&vac, &rf(0.0, 100.0, 1e-4), 1e12).unwrap();
        assert_eq!(sin_only.mean[1], 0.0);
        assert_eq!(sin_only.cov, vac.cov);
        let doubled = rf_displacement(&vac, &rf(100.0, 50.0, 2e-4), 1e12).unwrap();
        let single = rf_displacement(&vac, &rf(100.0, 50.0, 1e-4), 1e12).unwrap();
        assert_abs_diff_eq!(doubled.mean, single.mean * 2.0, epsilon = 1e-9);
    }

    #[test]
    fn rf_rejects_off_resonance_and_strong_drive() {
        let vac = GaussianOscillatorState::vacuum();
        let mut off = rf(10.0, 0.0, 1e-4);
        off.drive_frequency *= 1.01;
        assert!(matches!(rf_displacement(&vac, &off, 1.0), Err(Error::OffResonant)));
        let mut phased = rf(10.0, 0.0, 1e-4);
        phased.phase_rad = 0.2;
        assert!(matches!(rf_displacement(&vac, &phased, 1.0), Err(Error::OffResonant)));
        assert!(rf_displacement(&vac, &rf(2000.0, 0.0, 1e-4), 1.0).is_err());
        assert!(rf_displacement(&vac, &rf(10.0, 0.0, 1e-6), 1.0).is_err());
    }

    #[test]
    fn zero_coupling_records_are_shot_noise() {
        let mut cfg = SequenceConfig::reference(0.0, BackactionMode::IdealBae).with_kappas([0.0; 4]);
        cfg.repetitions = 20_000;
        let (mean, cov) = analytic_record_moments(&cfg).unwrap();
        assert_eq!(mean, DVector::zeros(4));
        assert_abs_diff_eq!(cov, DMatrix::identity(4, 4) * 0.5, epsilon = 1e-15);
        let set = monte_carlo(&cfg).unwrap();
        let n = set.records.len() as f64;
        let var1 = set.records.iter().map(|r| r.m1 * r.m1).sum::<f64>() / n;
        assert!((var1 / 0.5 - 1.0).abs() < 0.03, "{var1}");
    }

    #[test]
    fn monte_carlo_is_deterministic() {
        let mut cfg = SequenceConfig::reference(0.3, BackactionMode::Residual);
        cfg.repetitions = 500;
        cfg.seed = 99;
        let a = monte_carlo(&cfg).unwrap();
        let b = monte_carlo(&cfg).unwrap();
        assert_eq!(a, b);
        let mut ba = Vec::new();
        let mut bb = Vec::new();
        a.write_csv(&mut ba).unwrap();
        b.write_csv(&mut bb).unwrap();
        assert_eq!(ba, bb);
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let mut cfg = SequenceConfig::reference(FRAC_PI_2, BackactionMode::Residual);
        cfg.repetitions = 50;
        cfg.decoherence = t2_only(20.0);
        let set = monte_carlo(&cfg).unwrap();
        let mut buf = Vec::new();
        set.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(!text.contains('\r'));
        let back = RecordSet::read_csv(buf.as_slice()).unwrap();
        assert_eq!(back, set);
    }

    #[test]
    fn csv_errors_carry_line_numbers() {
        let cfg = SequenceConfig::reference(0.0, BackactionMode::Residual);
        let echo: String = toml::to_string(&cfg)
            .unwrap()
            .lines()
            .map(|l| format!("# {l}\n"))
            .collect();
        let echo_lines = echo.lines().count() as u64;
        let bad = format!("{echo}{CSV_HEADER}\n0,0,1,2,3,4\n1,0,1,x,3,4\n");
        match RecordSet::read_csv(bad.as_bytes()) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, echo_lines + 3),
            other => panic!("{other:?}"),
        }
        let short = format!("{echo}{CSV_HEADER}\n0,0,1,2,3\n");
        assert!(matches!(RecordSet::read_csv(short.as_bytes()), Err(Error::Parse { .. })));
        assert!(matches!(RecordSet::read_csv("".as_bytes()), Err(Error::Parse { .. })));
        let mixed = format!("{echo}{CSV_HEADER}\n0,0,1,2,3,4\n1,0.5,1,2,3,4\n");
        assert!(matches!(RecordSet::read_csv(mixed.as_bytes()), Err(Error::Parse { .. })));
    }

    #[test]
    fn past_quantum_state_matches_chain_values() {
        let cfg = SequenceConfig::reference(0.0, BackactionMode::IdealBae);
        let pqs = past_quantum_state(&cfg, 0.0, 0.0, 0.0).unwrap();
        assert_abs_diff_eq!(pqs.rho.cov[(1, 1)], 0.185185, epsilon = 1e-6);
        let ecov = pqs.effect.covariance().unwrap();
        assert_abs_diff_eq!(ecov[(0, 0)], 0.151515, epsilon = 1e-6);
        assert_abs_diff_eq!(ecov[(1, 1)], 0.227273, epsilon = 1e-6);
        let r = retrodict_record(&cfg, &MeasurementRecord {
            repetition_id: 0,
            theta2_rad: 0.0,
            m1: 0.0,
            m2: 0.0,
            m3: 0.0,
            m4: 0.0,
        })
        .unwrap();
        assert_abs_diff_eq!(r.variance, 0.102041, epsilon = 1e-6);
    }

    #[test]
    fn residual_backaction_chain_values() {
        let cfg = SequenceConfig::reference(0.0, BackactionMode::Residual);
        let pqs = past_quantum_state(&cfg, 0.0, 0.0, 0.0).unwrap();
        assert_abs_diff_eq!(pqs.rho.cov[(0, 0)], 0.513791, epsilon = 1e-6);
        let ecov = pqs.effect.covariance().unwrap();
        assert_abs_diff_eq!(ecov[(1, 1)], 0.254043, epsilon = 1e-6);
    }

    #[test]
    fn analytic_moments_match_filter_marginals() {
        let mut cfg = SequenceConfig::reference(0.7, BackactionMode::Residual);
        cfg.decoherence = t2_only(20.0);
        let (_, cov) = analytic_record_moments(&cfg).unwrap();
        // marginal variance of m₁ and the prior-predictive Var(m₂|m₁)
        let chain = run_chain(&cfg, &mut repetition_rng(3, 0)).unwrap();
        assert_abs_diff_eq!(cov[(0, 0)], chain[0].1.variance, epsilon = 1e-12);
        let cond = cov[(1, 1)] - cov[(0, 1)].powi(2) / cov[(0, 0)];
        assert_abs_diff_eq!(cond, chain[1].1.variance, epsilon = 1e-12);
    }
}
