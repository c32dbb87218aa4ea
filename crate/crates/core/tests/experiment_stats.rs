use nalgebra::{Matrix4, Vector4};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use qnd_retro::estimator::{conditional_estimates, ErrorMethod, RecordSample};
use qnd_retro::experiment::{analytic_record_moments, monte_carlo, DecoherenceParams, SequenceConfig};
use qnd_retro::qnd::BackactionMode;

fn reference(reps: usize, seed: u64) -> SequenceConfig {
    let mut cfg = SequenceConfig::reference(0.0, BackactionMode::Residual);
    cfg.repetitions = reps;
    cfg.seed = seed;
    cfg
}

fn max_z(sample: &RecordSample, cov: &Matrix4<f64>) -> f64 {
    let s = sample.covariance();
    let n = sample.len() as f64;
    let mut worst: f64 = 0.0;
    for i in 0..4 {
        for j in 0..4 {
            let se = ((cov[(i, i)] * cov[(j, j)] + cov[(i, j)].powi(2)) / n).sqrt();
            worst = worst.max((s[(i, j)] - cov[(i, j)]).abs() / se);
        }
    }
    worst
}

fn analytic(cfg: &SequenceConfig) -> Matrix4<f64> {
    let (_, cov) = analytic_record_moments(cfg).unwrap();
    Matrix4::from_fn(|i, j| cov[(i, j)])
}

#[test]
fn sample_covariance_matches_joint_propagation() {
    for mut cfg in [reference(100_000, 1), reference(100_000, 2).with_theta2(std::f64::consts::FRAC_PI_2)] {
        let cov = analytic(&cfg);
        let set = monte_carlo(&cfg).unwrap();
        let sample = RecordSample::new(&set.records).unwrap();
        assert!(max_z(&sample, &cov) < 4.0);
        let mean = sample.mean();
        for i in 0..4 {
            assert!(mean[i].abs() < 4.0 * (cov[(i, i)] / 1e5).sqrt());
        }
        cfg.decoherence = DecoherenceParams {
            t1_ms: Some(125.0),
            t2_ms: Some(20.0),
            probe_depolarization: 0.365,
            ..DecoherenceParams::none()
        };
        let cov = analytic(&cfg);
        let sample = RecordSample::new(&monte_carlo(&cfg).unwrap().records).unwrap();
        assert!(max_z(&sample, &cov) < 4.0);
    }
}

#[test]
fn simulated_conditional_variance_is_near_0_65() {
    let set = monte_carlo(&reference(100_000, 7)).unwrap();
    let sample = RecordSample::new(&set.records).unwrap();
    let est = conditional_estimates(&sample, ErrorMethod::Jackknife).unwrap();
    assert!((est.given_m1.variance / 0.65 - 1.0).abs() < 0.02);
    let cov = sample.covariance();
    // m1 and m3 measure conjugate quadratures of a state with no p-x correlation
    assert!(cov[(0, 2)].abs() < 4.0 * (cov[(0, 0)] * cov[(2, 2)] / 1e5).sqrt());
}

#[test]
fn estimation_error_shrinks_as_inverse_root_n() {
    let cfg = reference(1, 0);
    let cov = analytic(&cfg);
    let mut errors = Vec::new();
    for (n, seed) in [(1_000, 31), (10_000, 32), (100_000, 33)] {
        let mut c = cfg.clone();
        c.repetitions = n;
        c.seed = seed;
        let sample = RecordSample::new(&monte_carlo(&c).unwrap().records).unwrap();
        let diff = sample.covariance() - cov;
        errors.push((n as f64, diff.norm()));
        assert!(max_z(&sample, &cov) < 4.0);
    }
    // scaled error stays within a factor of a few of a common constant
    let scaled: Vec<f64> = errors.iter().map(|(n, e)| e * n.sqrt()).collect();
    let hi = scaled.iter().cloned().fold(f64::MIN, f64::max);
    let lo = scaled.iter().cloned().fold(f64::MAX, f64::min);
    assert!(hi / lo < 5.0, "{scaled:?}");
    assert!(errors[2].1 < errors[0].1);
}

#[test]
fn conditional_estimates_recover_a_known_gaussian() {
    let truth = Matrix4::new(
        1.2, 0.8, 0.1, 0.5,
        0.8, 1.5, -0.3, 0.7,
        0.1, -0.3, 2.0, 0.2,
        0.5, 0.7, 0.2, 1.1,
    );
    let l = truth.cholesky().unwrap().l();
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let data: Vec<Vector4<f64>> = (0..100_000)
        .map(|_| l * Vector4::from_fn(|_, _| StandardNormal.sample(&mut rng)))
        .collect();
    let sample = RecordSample::from_vectors(data).unwrap();
    let single = truth[(1, 1)] - truth[(0, 1)].powi(2) / truth[(0, 0)];
    let idx = [0, 2, 3];
    let k = nalgebra::Matrix3::from_fn(|i, j| truth[(idx[i], idx[j])]);
    let c = nalgebra::Vector3::from_fn(|i, _| truth[(idx[i], 1)]);
    let triple = truth[(1, 1)] - (c.transpose() * k.try_inverse().unwrap() * c)[(0, 0)];
    let jack = conditional_estimates(&sample, ErrorMethod::Jackknife).unwrap();
    let blocks = conditional_estimates(&sample, ErrorMethod::Blocks { count: 20 }).unwrap();
    assert!((jack.given_m1.variance - single).abs() < 3.0 * jack.given_m1_se);
    assert!((jack.given_all.variance - triple).abs() < 3.0 * jack.given_all_se);
    // delta-method scale for a conditional variance
    let expected_se = triple * (2.0 / 1e5f64).sqrt();
    assert!((jack.given_all_se / expected_se - 1.0).abs() < 0.2);
    assert!((blocks.given_all_se / jack.given_all_se - 1.0).abs() < 0.6);
}
