//! Subcommand implementations behind the command-line front end.

use serde::Serialize;
use std::f64::consts::{FRAC_PI_2, FRAC_PI_4};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::config::{Mode, RunConfig};
use crate::error::{Error, Result};
use crate::estimator::{
    calibrate_sql, conditional_estimates, infer_atomic_variance, uncertainty_product, wineland_xi_sq,
    AtomicVariance, CalibrationModel, ConditionalEstimates, CovarianceSummary, ErrorMethod, RecordSample,
    Squeezing,
};
use crate::experiment::{monte_carlo, RecordSet, SequenceConfig, TARGET_PULSE};
use crate::gaussian::{GaussianOscillatorState, QuadratureDirection};
use crate::grid_oracle::{Grid, GridDensity};
use crate::past_state::{
    oracle_optical_variance, predict_optical, protocol_states, protocol_sweep, retrodict_optical_with,
    retrodict_projective,
};
use crate::qnd::{backward_update, forward_update, BackactionMode, PulseSpec};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_ORACLE: i32 = 4;

/// Relative deviation tolerated between closed forms and the grid on the axes.
pub const ORACLE_TOL: f64 = 5e-3;

/// Files written by a command and the exit status it asks for.
#[derive(Debug, Clone, PartialEq)]
pub struct CommandOutput {
    pub files: Vec<PathBuf>,
    pub exit_code: i32,
    pub summary: String,
}

/// Exit status for an error.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_)
        | Error::InvalidParameter(_)
        | Error::GridTooCoarse { .. }
        | Error::OffResonant
        | Error::Io { .. } => EXIT_CONFIG,
        Error::Parse { .. }
        | Error::InsufficientData(_)
        | Error::DataInconsistency(_)
        | Error::Calibration(_) => EXIT_DATA,
        Error::NonConvergent(_) => EXIT_ORACLE,
    }
}

fn prepare_out(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    std::fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Dispatches `mode` on a prepared config.
pub fn run(mode: Mode, cfg: &RunConfig, out: &Path, records: &[PathBuf]) -> Result<CommandOutput> {
    match mode {
        Mode::Theory => cmd_theory(cfg, out),
        Mode::Simulate => cmd_simulate(cfg, out),
        Mode::Estimate => cmd_estimate(cfg, records, out),
        Mode::Sweep => cmd_sweep(cfg, out),
        Mode::OracleCheck => cmd_oracle_check(cfg, out),
    }
}

/// Writes `theory.csv`: prior and retrodicted variances over the θ grid.
pub fn cmd_theory(cfg: &RunConfig, out: &Path) -> Result<CommandOutput> {
    let oracle = cfg.oracle.enabled.then(|| cfg.oracle.grid());
    let res = protocol_sweep(&cfg.sequence, &cfg.theta_grid.angles(), oracle)?;
    let mut csv = String::from("theta_rad,var_prior,var_retro,var_optical_prior,var_optical_retro\n");
    for i in 0..res.theta_grid.len() {
        let _ = writeln!(
            csv,
            "{},{},{},{},{}",
            res.theta_grid[i],
            res.var_prior[i],
            res.var_retro[i],
            res.var_optical_prior[i],
            opt(res.var_optical_retro[i])
        );
    }
    prepare_out(out)?;
    let path = out.join("theory.csv");
    write_file(&path, &csv)?;
    let skipped = res
        .optical_status
        .iter()
        .filter(|s| matches!(s, crate::past_state::SweepStatus::NonConvergent))
        .count();
    Ok(CommandOutput {
        files: vec![path],
        exit_code: EXIT_OK,
        summary: format!(
            "{} angles, uncertainty product {:.6}, {} oracle entries unconverged",
            res.theta_grid.len(),
            res.uncertainty_product,
            skipped
        ),
    })
}

/// Writes `records.csv` from a Monte Carlo run.
pub fn cmd_simulate(cfg: &RunConfig, out: &Path) -> Result<CommandOutput> {
    let set = monte_carlo(&cfg.sequence)?;
    prepare_out(out)?;
    let path = out.join("records.csv");
    set.save(&path)?;
    Ok(CommandOutput {
        files: vec![path],
        exit_code: EXIT_OK,
        summary: format!("{} repetitions at θ₂ = {}", set.records.len(), cfg.sequence.theta2()),
    })
}

/// Closed-form and oracle values attached to an estimate.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TheoryValues {
    pub var_optical_prior: f64,
    pub var_optical_retro: Option<f64>,
    pub var_atomic_prior: f64,
    pub var_atomic_retro: f64,
}

/// Analysis of one record file.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ThetaEstimate {
    pub source: String,
    pub theta2_rad: f64,
    pub n: usize,
    pub covariance: CovarianceSummary,
    pub conditional: ConditionalEstimates,
    pub atomic_prior: AtomicVariance,
    pub atomic_retro: AtomicVariance,
    pub xi_sq_prior: Squeezing,
    pub xi_sq_retro: Squeezing,
    pub mean_spin_fraction: f64,
    pub theory: TheoryValues,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ProductEstimate {
    pub prior: f64,
    pub retro: f64,
    pub retro_std_err: f64,
}

/// Result document of `estimate`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EstimateReport {
    pub calibration: CalibrationModel,
    pub wineland_definition: &'static str,
    pub error_method: ErrorMethod,
    pub per_theta: Vec<ThetaEstimate>,
    /// Present when records at θ₂ = 0 and π/2 are both supplied.
    pub uncertainty_product: Option<ProductEstimate>,
    pub degenerate: bool,
}

fn calibration_for(cfg: &RunConfig, sequence: &SequenceConfig) -> Result<CalibrationModel> {
    let c = &cfg.calibration;
    if let Some(k) = c.kappa2_sq {
        return CalibrationModel::from_kappa(k);
    }
    if let Some(thermal) = c.thermal_variance {
        let power = c
            .operating_power
            .ok_or_else(|| Error::Config("calibration.operating_power is required with thermal_variance".into()))?;
        return calibrate_sql(thermal, &c.shot_noise, power);
    }
    let schedule = sequence.schedule()?;
    CalibrationModel::from_kappa(schedule[TARGET_PULSE].1.kappa_sq)
}

fn spin_fraction_at_target(seq: &SequenceConfig) -> f64 {
    seq.pulses[..=TARGET_PULSE]
        .iter()
        .map(|p| seq.decoherence.spin_decay(p.duration_ms))
        .product()
}

/// Closed-form prior and retrodicted variances for a sequence's θ₂.
pub fn theory_values(seq: &SequenceConfig, oracle: Option<crate::grid_oracle::GridParams>) -> Result<TheoryValues> {
    let pqs = protocol_states(seq)?;
    let theta = seq.theta2();
    let k = pqs.target.kappa_sq;
    let (_, var_prior) = pqs.rho.marginal(QuadratureDirection::new(theta));
    let (_, var_retro) = retrodict_projective(&pqs.rho, &pqs.effect, theta);
    let on_axis = QuadratureDirection::new(theta).is_axis(crate::past_state::AXIS_TOL);
    let var_optical_retro = match (on_axis, oracle) {
        (false, None) => None,
        (_, grid) => retrodict_optical_with(&pqs.rho, &pqs.effect, k, theta, grid.unwrap_or_default())
            .ok()
            .map(|r| r.variance),
    };
    Ok(TheoryValues {
        var_optical_prior: predict_optical(&pqs.rho, k, theta),
        var_optical_retro,
        var_atomic_prior: var_prior,
        var_atomic_retro: var_retro,
    })
}

fn estimate_one(cfg: &RunConfig, path: &Path) -> Result<(ThetaEstimate, CalibrationModel)> {
    let set = RecordSet::load(path)?;
    let cal = calibration_for(cfg, &set.config)?;
    let sample = RecordSample::new(&set.records)?;
    let method = cfg.estimate.error_method;
    let covariance = sample.summary(method)?;
    let conditional = conditional_estimates(&sample, method)?;
    let atomic_prior = infer_atomic_variance(conditional.given_m1.variance, conditional.given_m1_se, &cal)?;
    let atomic_retro = infer_atomic_variance(conditional.given_all.variance, conditional.given_all_se, &cal)?;
    let fraction = spin_fraction_at_target(&set.config);
    let oracle = cfg.oracle.enabled.then(|| cfg.oracle.grid());
    Ok((
        ThetaEstimate {
            source: path.display().to_string(),
            theta2_rad: set.records.first().map_or(set.config.theta2(), |r| r.theta2_rad),
            n: set.records.len(),
            covariance,
            atomic_prior,
            atomic_retro,
            xi_sq_prior: wineland_xi_sq(atomic_prior.value, fraction)?,
            xi_sq_retro: wineland_xi_sq(atomic_retro.value, fraction)?,
            mean_spin_fraction: fraction,
            theory: theory_values(&set.config, oracle)?,
            conditional,
        },
        cal,
    ))
}

/// Analyses record files and writes `estimate.json`.
///
/// The exit status is non-zero when any conditioning block was degenerate.
pub fn cmd_estimate(cfg: &RunConfig, records: &[PathBuf], out: &Path) -> Result<CommandOutput> {
    let paths: Vec<PathBuf> = if records.is_empty() {
        cfg.estimate.records.iter().map(|p| cfg.resolve(p)).collect()
    } else {
        records.to_vec()
    };
    if paths.is_empty() {
        return Err(Error::Config("no record files given".into()));
    }
    let mut per_theta = Vec::new();
    let mut calibration = None;
    for p in &paths {
        let (est, cal) = estimate_one(cfg, p)?;
        calibration.get_or_insert(cal);
        per_theta.push(est);
    }
    let at = |target: f64| {
        per_theta
            .iter()
            .find(|e| (QuadratureDirection::new(e.theta2_rad).theta() - target).abs() < 1e-9)
    };
    let uncertainty_product = match (at(0.0), at(FRAC_PI_2)) {
        (Some(p), Some(x)) => {
            let retro = uncertainty_product(p.atomic_retro.value, x.atomic_retro.value);
            let rel = if retro > 0.0 {
                0.5 * ((p.atomic_retro.std_err / p.atomic_retro.value).powi(2)
                    + (x.atomic_retro.std_err / x.atomic_retro.value).powi(2))
                .sqrt()
            } else {
                0.0
            };
            Some(ProductEstimate {
                prior: uncertainty_product(p.atomic_prior.value, x.atomic_prior.value),
                retro,
                retro_std_err: retro * rel,
            })
        }
        _ => None,
    };
    let degenerate = per_theta
        .iter()
        .any(|e| e.conditional.given_m1.degenerate || e.conditional.given_all.degenerate);
    let report = EstimateReport {
        calibration: calibration.expect("at least one record file"),
        wineland_definition: "standard",
        error_method: cfg.estimate.error_method,
        per_theta,
        uncertainty_product,
        degenerate,
    };
    prepare_out(out)?;
    let path = out.join("estimate.json");
    let mut json = serde_json::to_string_pretty(&report).map_err(|e| Error::Config(e.to_string()))?;
    json.push('\n');
    write_file(&path, &json)?;
    let mut summary = String::new();
    for e in &report.per_theta {
        let _ = write!(
            summary,
            "θ₂={:.4}: Var(m2|m1)={:.5}±{:.5} Var(m2|m1,m3,m4)={:.5}±{:.5}; ",
            e.theta2_rad,
            e.conditional.given_m1.variance,
            e.conditional.given_m1_se,
            e.conditional.given_all.variance,
            e.conditional.given_all_se
        );
    }
    if degenerate {
        summary.push_str("degenerate conditioning flagged");
    }
    Ok(CommandOutput {
        files: vec![path],
        exit_code: if degenerate { EXIT_DATA } else { EXIT_OK },
        summary,
    })
}

/// Simulates and analyses every θ of the grid; writes `sweep.csv`.
pub fn cmd_sweep(cfg: &RunConfig, out: &Path) -> Result<CommandOutput> {
    let oracle = cfg.oracle.enabled.then(|| cfg.oracle.grid());
    let mut csv = String::from(
        "theta_rad,n,var_optical_prior,var_optical_prior_se,var_optical_retro,var_optical_retro_se,theory_optical_prior,theory_optical_retro\n",
    );
    let angles = cfg.theta_grid.angles();
    for (k, theta) in angles.iter().enumerate() {
        let mut seq = cfg.sequence.clone().with_theta2(*theta);
        seq.seed = cfg.sequence.seed.wrapping_add(k as u64);
        let set = monte_carlo(&seq)?;
        let sample = RecordSample::new(&set.records)?;
        let est = conditional_estimates(&sample, cfg.estimate.error_method)?;
        let theory = theory_values(&seq, oracle)?;
        let _ = writeln!(
            csv,
            "{},{},{},{},{},{},{},{}",
            theta,
            set.records.len(),
            est.given_m1.variance,
            est.given_m1_se,
            est.given_all.variance,
            est.given_all_se,
            theory.var_optical_prior,
            opt(theory.var_optical_retro)
        );
    }
    prepare_out(out)?;
    let path = out.join("sweep.csv");
    write_file(&path, &csv)?;
    Ok(CommandOutput {
        files: vec![path],
        exit_code: EXIT_OK,
        summary: format!("{} angles × {} repetitions", angles.len(), cfg.sequence.repetitions),
    })
}

/// One row of the oracle comparison.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OracleRow {
    pub case: String,
    pub theta_rad: f64,
    pub closed_form: Option<f64>,
    pub oracle: Option<f64>,
    pub relative_error: Option<f64>,
    pub status: &'static str,
}

/// Closed-form versus grid values; writes `oracle_check.csv`.
pub fn cmd_oracle_check(cfg: &RunConfig, out: &Path) -> Result<CommandOutput> {
    let rows = oracle_rows(cfg)?;
    let mut csv = String::from("case,theta_rad,closed_form,oracle,relative_error,status\n");
    for r in &rows {
        let _ = writeln!(
            csv,
            "{},{},{},{},{},{}",
            r.case,
            r.theta_rad,
            opt(r.closed_form),
            opt(r.oracle),
            opt(r.relative_error),
            r.status
        );
    }
    prepare_out(out)?;
    let path = out.join("oracle_check.csv");
    write_file(&path, &csv)?;
    let failed = rows.iter().filter(|r| r.status == "fail" || r.status == "non-convergent").count();
    Ok(CommandOutput {
        files: vec![path],
        exit_code: if failed > 0 { EXIT_ORACLE } else { EXIT_OK },
        summary: format!("{} cases, {} failed", rows.len(), failed),
    })
}

fn compare(case: String, theta: f64, closed: f64, oracle: Result<f64>) -> OracleRow {
    match oracle {
        Ok(v) => {
            let rel = (v - closed).abs() / closed.abs();
            OracleRow {
                case,
                theta_rad: theta,
                closed_form: Some(closed),
                oracle: Some(v),
                relative_error: Some(rel),
                status: if rel <= ORACLE_TOL { "pass" } else { "fail" },
            }
        }
        Err(_) => OracleRow {
            case,
            theta_rad: theta,
            closed_form: Some(closed),
            oracle: None,
            relative_error: None,
            status: "non-convergent",
        },
    }
}

/// All comparison rows for `oracle-check`.
pub fn oracle_rows(cfg: &RunConfig) -> Result<Vec<OracleRow>> {
    let grid = Grid::shared(cfg.oracle.grid())?;
    let vac = GridDensity::vacuum(&grid);
    let mut rows = vec![compare("vacuum".into(), 0.0, 0.5, Ok(vac.marginal(0.0).1))];
    for kappa_sq in [0.5, 1.7, 2.2, 3.3] {
        for theta in [0.0, FRAC_PI_2] {
            let dir = QuadratureDirection::new(theta);
            let pulse = PulseSpec::new(dir, kappa_sq, 1.0, BackactionMode::FullCw)?;
            let closed = forward_update(&GaussianOscillatorState::vacuum(), &pulse, 0.0)?.marginal(dir).1;
            let grid_fwd = vac
                .povm_apply(kappa_sq, theta, 0.0)
                .and_then(|o| {
                    if o.converged {
                        Ok(o.state.marginal(theta).1)
                    } else {
                        Err(Error::NonConvergent("posterior reaches grid edge".into()))
                    }
                });
            rows.push(compare(format!("forward kappa_sq={kappa_sq}"), theta, closed, grid_fwd));
            let closed_b = backward_update(&crate::gaussian::EffectState::flat(), &pulse, 0.0)?
                .marginal(dir)
                .map_or(f64::NAN, |m| m.1);
            let grid_b = GridDensity::identity(&grid)
                .effect_apply(kappa_sq, theta, 0.0)
                .map(|e| e.to_frame(theta).diagonal_moments().1);
            rows.push(compare(format!("backward kappa_sq={kappa_sq}"), theta, closed_b, grid_b));
        }
    }
    let pqs = protocol_states(&cfg.sequence)?;
    let k2 = pqs.target.kappa_sq;
    for theta in [0.0, FRAC_PI_2] {
        let closed = k2 * retrodict_projective(&pqs.rho, &pqs.effect, theta).1 + 0.5;
        let grid_v = oracle_optical_variance(&pqs.rho, &pqs.effect, k2, theta, cfg.oracle.grid());
        rows.push(compare("optical retrodiction".into(), theta, closed, grid_v));
    }
    let naive = k2 * retrodict_projective(&pqs.rho, &pqs.effect, FRAC_PI_4).1 + 0.5;
    let off = retrodict_optical_with(&pqs.rho, &pqs.effect, k2, FRAC_PI_4, cfg.oracle.grid());
    rows.push(OracleRow {
        case: "optical retrodiction (naive axis formula as reference)".into(),
        theta_rad: FRAC_PI_4,
        closed_form: Some(naive),
        oracle: off.as_ref().ok().map(|r| r.variance),
        relative_error: off.as_ref().ok().map(|r| (r.variance - naive).abs() / naive),
        status: if off.is_ok() { "oracle-only" } else { "non-convergent" },
    });
    Ok(rows)
}
