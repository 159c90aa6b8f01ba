use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use salient_si::noise::{calibrate_noise, NoiseKind};
use statrs::distribution::{ContinuousCDF, Normal};

const TARGETS: [f64; 4] = [0.01, 0.05, 0.1, 0.15];

#[test]
fn every_family_reaches_every_target() {
    for kind in NoiseKind::ALL {
        for &target in &TARGETS {
            let fam = calibrate_noise(kind, target).unwrap_or_else(|e| panic!("{kind} at {target}: {e}"));
            let w = fam.wasserstein_to_normal(2048);
            assert!((w - target).abs() < 1e-4, "{kind} at {target}: {w}");
        }
    }
}

#[test]
fn small_targets_approach_the_gaussian_member() {
    let near = |kind| calibrate_noise(kind, 1e-3).unwrap().shape;
    assert!(near(NoiseKind::Skewnorm) < 1.0);
    assert!(near(NoiseKind::Exponnorm) < 0.2);
    assert!((near(NoiseKind::GennormSteep) - 2.0).abs() < 0.1);
    assert!((near(NoiseKind::GennormFlat) - 2.0).abs() < 0.1);
    assert!(near(NoiseKind::StudentT) > 50.0);
}

// sorted samples against normal quantiles at the plotting positions
fn empirical_w1(samples: &mut [f64]) -> f64 {
    samples.sort_by(f64::total_cmp);
    let normal = Normal::new(0.0, 1.0).unwrap();
    let m = samples.len() as f64;
    samples
        .iter()
        .enumerate()
        .map(|(i, &x)| (x - normal.inverse_cdf((i as f64 + 0.5) / m)).abs())
        .sum::<f64>()
        / m
}

#[test]
fn skewnorm_distance_matches_monte_carlo() {
    let fam = calibrate_noise(NoiseKind::Skewnorm, 0.15).unwrap();
    let mut rng = ChaCha20Rng::seed_from_u64(11);
    let mut samples: Vec<f64> = (0..1_000_000).map(|_| fam.sample(&mut rng)).collect();
    let w = empirical_w1(&mut samples);
    assert!((w - 0.15).abs() < 5e-3, "{w}");
}

#[test]
fn calibrated_moments_by_quadrature() {
    let (x, w) = salient_si::noise::gauss_legendre(2048);
    for kind in NoiseKind::ALL {
        let fam = calibrate_noise(kind, 0.15).unwrap();
        let (mut m1, mut m2) = (0.0, 0.0);
        for (&t, &wt) in x.iter().zip(w) {
            let q = fam.quantile(0.5 * (t + 1.0));
            m1 += 0.5 * wt * q;
            m2 += 0.5 * wt * q * q;
        }
        assert!(m1.abs() < 1e-3, "{kind}: mean {m1}");
        assert!((m2 - 1.0).abs() < 1e-3 || kind == NoiseKind::StudentT, "{kind}: second moment {m2}");
    }
}

#[test]
fn calibrated_families_are_standardized() {
    for kind in NoiseKind::ALL {
        let fam = calibrate_noise(kind, 0.15).unwrap();
        let mut rng = ChaCha20Rng::seed_from_u64(7);
        let m = 1_000_000;
        let xs: Vec<f64> = (0..m).map(|_| fam.sample(&mut rng)).collect();
        let n = m as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        let m4 = xs.iter().map(|x| (x - mean).powi(4)).sum::<f64>() / n;
        // five standard errors of each estimator
        let mean_tol = 5.0 * (var / n).sqrt();
        let var_tol = 5.0 * ((m4 - var * var) / n).sqrt();
        assert!(mean.abs() < mean_tol, "{kind}: mean {mean} tol {mean_tol}");
        assert!((var - 1.0).abs() < var_tol, "{kind}: var {var} tol {var_tol}");
    }
}
