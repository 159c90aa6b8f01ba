use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::{Array1, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use salient_si::graph::CovarianceModel;
use salient_si::synthgen::{kronecker_cov, random_graph, sample_features, spatial_correlation, CovKind};

fn min_eigenvalue(m: &Array2<f64>) -> f64 {
    let n = m.nrows();
    let dm = DMatrix::from_row_slice(n, n, m.as_slice().unwrap());
    SymmetricEigen::new(dm).eigenvalues.min()
}

#[test]
fn correlation_factors_are_positive_definite() {
    let mut rng = ChaCha20Rng::seed_from_u64(41);
    for k in 0..50 {
        let n = 4 + k % 29;
        let g = random_graph(n, 3.0_f64.min(n as f64 - 1.0), &mut rng).unwrap();
        assert!(min_eigenvalue(&spatial_correlation(&g)) > 0.0, "graph {k}");
    }
    match kronecker_cov(CovKind::Correlation, &random_graph(8, 3.0, &mut rng).unwrap(), 5) {
        CovarianceModel::Kronecker { feature, .. } => assert!(min_eigenvalue(&feature) > 0.0),
        other => panic!("{other:?}"),
    }
}

fn sample_moments(draws: &[Array1<f64>]) -> (Array1<f64>, Array2<f64>) {
    let m = draws.len() as f64;
    let p = draws[0].len();
    let mean = draws.iter().fold(Array1::zeros(p), |acc, x| acc + x) / m;
    let mut cov = Array2::<f64>::zeros((p, p));
    for x in draws {
        let c = x - &mean;
        for i in 0..p {
            for j in 0..p {
                cov[[i, j]] += c[i] * c[j];
            }
        }
    }
    (mean, cov / (m - 1.0))
}

#[test]
fn identity_draws_have_identity_moments() {
    let (n, d) = (3, 2);
    let factor = CovarianceModel::identity(n, d).cholesky().unwrap();
    let mut mu = Array2::zeros((n, d));
    mu[[1, 0]] = 2.0;
    let mut rng = ChaCha20Rng::seed_from_u64(5);
    let draws: Vec<Array1<f64>> =
        (0..100_000).map(|_| sample_features(&mu, &factor, None, &mut rng).unwrap().to_vec()).collect();
    let (mean, cov) = sample_moments(&draws);
    for (k, &v) in mean.iter().enumerate() {
        let expected = if k == 2 { 2.0 } else { 0.0 };
        assert!((v - expected).abs() < 0.02, "mean[{k}] = {v}");
    }
    let err = (&cov - &Array2::<f64>::eye(n * d)).iter().fold(0.0f64, |m, v| m.max(v.abs()));
    assert!(err < 0.02, "{err}");
}

#[test]
fn kronecker_coloring_matches_dense_coloring() {
    let (n, d) = (8, 4);
    let mut rng = ChaCha20Rng::seed_from_u64(17);
    let g = random_graph(n, 3.0, &mut rng).unwrap();
    let kron = kronecker_cov(CovKind::Correlation, &g, d);
    let dense = CovarianceModel::Dense(kron.materialize());
    let mu = Array2::zeros((n, d));
    let estimate = |cov: &CovarianceModel, seed| {
        let factor = cov.cholesky().unwrap();
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let draws: Vec<Array1<f64>> =
            (0..100_000).map(|_| sample_features(&mu, &factor, None, &mut rng).unwrap().to_vec()).collect();
        sample_moments(&draws).1
    };
    // L_space ⊗ L_feature is the Cholesky factor of the product, so a shared
    // stream gives the same draws up to rounding
    let a = estimate(&kron, 1);
    let b = estimate(&dense, 1);
    let frob = (&a - &b).mapv(|v| v * v).sum().sqrt();
    assert!(frob < 0.05, "{frob}");
    // each entry has standard error below 0.0045 at 1e5 draws
    let truth = kron.materialize();
    let worst = (&a - &truth).iter().fold(0.0f64, |m, v| m.max(v.abs()));
    assert!(worst < 0.025, "{worst}");
}
