//! Synthetic instances: random graphs, structured covariances, null and
//! alternative feature draws, and the per-trial seed scheme.

use std::collections::BTreeSet;

use nalgebra::SymmetricEigen;
use ndarray::{Array1, Array2, Axis};
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{to_nalgebra, CholeskyFactor, CovarianceModel, FeatureMatrix, Graph};
use crate::noise::NoiseFamily;

/// Decay base of the correlation covariance, `0.1^distance`.
pub const CORRELATION_BASE: f64 = 0.1;

/// Ridge added to a rank-deficient sample covariance.
pub const RIDGE: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CovKind {
    Independence,
    Correlation,
}

impl std::str::FromStr for CovKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "independence" => Ok(CovKind::Independence),
            "correlation" => Ok(CovKind::Correlation),
            other => Err(Error::Config(format!("unknown covariance kind '{other}'"))),
        }
    }
}

/// splitmix64 finalizer.
pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seed of one trial, a pure function of the base seed, the setting index
/// and the trial index. Trials therefore draw the same numbers whatever the
/// thread count or scheduling order.
pub fn trial_seed(base: u64, setting: u64, trial: u64) -> u64 {
    splitmix64(splitmix64(splitmix64(base) ^ setting) ^ trial)
}

pub fn trial_rng(base: u64, setting: u64, trial: u64) -> ChaCha20Rng {
    ChaCha20Rng::seed_from_u64(trial_seed(base, setting, trial))
}

// k-th pair (i, j), i < j, in row-major order of the strict upper triangle
fn pair_from_index(n: usize, mut k: usize) -> (usize, usize) {
    let mut i = 0;
    while k >= n - 1 - i {
        k -= n - 1 - i;
        i += 1;
    }
    (i, i + 1 + k)
}

/// `⌊n·avg_degree/2⌋` distinct edges drawn uniformly without replacement,
/// then each isolated node takes over one endpoint of an edge whose other
/// endpoint keeps degree ≥ 1.
pub fn random_graph<R: Rng + ?Sized>(n: usize, avg_degree: f64, rng: &mut R) -> Result<Graph> {
    let m = (n as f64 * avg_degree / 2.0).floor() as usize;
    let pairs = n * n.saturating_sub(1) / 2;
    if n < 2 || !(avg_degree < n as f64) || avg_degree <= 0.0 || m > pairs || 2 * m < n {
        return Err(Error::InfeasibleDegree { nodes: n, edges: m });
    }
    let mut edges: BTreeSet<(usize, usize)> =
        index::sample(rng, pairs, m).into_iter().map(|k| pair_from_index(n, k)).collect();
    let mut degree = vec![0usize; n];
    for &(i, j) in &edges {
        degree[i] += 1;
        degree[j] += 1;
    }
    for v in 0..n {
        if degree[v] > 0 {
            continue;
        }
        // an edge (keep, drop) with deg(drop) ≥ 2 exists while some node is isolated and 2m ≥ n
        let candidates: Vec<(usize, usize)> = edges
            .iter()
            .flat_map(|&(i, j)| [(i, j), (j, i)])
            .filter(|&(keep, drop)| degree[drop] >= 2 && !edges.contains(&ordered(keep, v)))
            .collect();
        if candidates.is_empty() {
            return Err(Error::InfeasibleDegree { nodes: n, edges: m });
        }
        let (keep, drop) = candidates[rng.random_range(0..candidates.len())];
        edges.remove(&ordered(keep, drop));
        edges.insert(ordered(keep, v));
        degree[drop] -= 1;
        degree[v] += 1;
    }
    let list: Vec<(usize, usize)> = edges.into_iter().collect();
    Graph::from_edges(n, &list)
}

fn ordered(a: usize, b: usize) -> (usize, usize) {
    if a < b {
        (a, b)
    } else {
        (b, a)
    }
}

/// Space factor `0.1^{d_ij}` from shortest-path distances, unreachable pairs
/// getting 0.
pub fn spatial_correlation(g: &Graph) -> Array2<f64> {
    let n = g.node_count();
    let dist = g.shortest_paths();
    Array2::from_shape_fn((n, n), |(i, j)| match dist[i][j] {
        Some(k) => CORRELATION_BASE.powi(k as i32),
        None => 0.0,
    })
}

/// Feature factor `0.1^{|k−l|}`.
pub fn feature_correlation(d: usize) -> Array2<f64> {
    Array2::from_shape_fn((d, d), |(k, l)| CORRELATION_BASE.powi(k.abs_diff(l) as i32))
}

pub fn kronecker_cov(kind: CovKind, g: &Graph, d: usize) -> CovarianceModel {
    match kind {
        CovKind::Independence => CovarianceModel::identity(g.node_count(), d),
        CovKind::Correlation => {
            CovarianceModel::Kronecker { space: spatial_correlation(g), feature: feature_correlation(d) }
        }
    }
}

/// `μ + Lν` with `ν` i.i.d. standard normal, or i.i.d. from `noise` when
/// given. `ν` is drawn in node-major order.
pub fn sample_features<R: Rng + ?Sized>(
    mu: &Array2<f64>,
    factor: &CholeskyFactor,
    noise: Option<&NoiseFamily>,
    rng: &mut R,
) -> Result<FeatureMatrix> {
    let (n, d) = mu.dim();
    let nu: Array1<f64> = match noise {
        None => (0..n * d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect(),
        Some(fam) => (0..n * d).map(|_| fam.sample(rng)).collect(),
    };
    let eps = factor.color(nu.view());
    if eps.len() != n * d {
        return Err(Error::DimensionMismatch(format!("covariance of dimension {} for {n}x{d} features", eps.len())));
    }
    let x = mu + &eps.into_shape_with_order((n, d)).expect("length checked");
    FeatureMatrix::new(x)
}

/// Each entry independently `delta` with probability `flip_prob`, else 0.
pub fn make_alternative_mu<R: Rng + ?Sized>(n: usize, d: usize, delta: f64, flip_prob: f64, rng: &mut R) -> Array2<f64> {
    let p = flip_prob.clamp(0.0, 1.0);
    Array2::from_shape_fn((n, d), |_| if rng.random_bool(p) { delta } else { 0.0 })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModifiedCovMode {
    Full,
    Eye,
}

#[derive(Debug, Clone)]
pub struct ModifiedGenerator {
    /// Mean of the positive samples, node-major.
    pub mu_plus: Array1<f64>,
    pub cov: CovarianceModel,
    /// The sample covariance was singular and a ridge of `RIDGE·I` was added.
    pub ridge_added: bool,
}

/// Mean and covariance of a generator fitted to real samples. Each row of
/// `pos` and `neg` is one flattened `n·d` feature matrix.
pub fn modified_real_generator(
    pos: &Array2<f64>,
    neg: &Array2<f64>,
    mode: ModifiedCovMode,
    gamma: f64,
) -> Result<ModifiedGenerator> {
    let dim = pos.ncols();
    if neg.ncols() != dim {
        return Err(Error::DimensionMismatch(format!("positive width {dim}, negative width {}", neg.ncols())));
    }
    if pos.nrows() == 0 {
        return Err(Error::DimensionMismatch("no positive samples".into()));
    }
    if !(gamma > 0.0) {
        return Err(Error::Config(format!("covariance scale {gamma} must be positive")));
    }
    let mu_plus = pos.mean_axis(Axis(0)).expect("non-empty");
    let (cov, ridge_added) = match mode {
        ModifiedCovMode::Eye => (Array2::eye(dim) * gamma, false),
        ModifiedCovMode::Full => {
            let m = neg.nrows();
            if m < 2 {
                return Err(Error::DimensionMismatch("need at least two negative samples".into()));
            }
            let mean = neg.mean_axis(Axis(0)).expect("non-empty");
            let centered = neg - &mean;
            let sample = centered.t().dot(&centered) / (m - 1) as f64;
            let eig = SymmetricEigen::new(to_nalgebra(&sample));
            let top = eig.eigenvalues.max();
            if !(top > 0.0) {
                return Err(Error::Config("negative samples have zero covariance".into()));
            }
            let mut cov = sample * (gamma / top);
            let singular = eig.eigenvalues.min() <= 1e-12 * top;
            if singular {
                cov.diag_mut().mapv_inplace(|v| v + RIDGE);
            }
            (cov, singular)
        }
    };
    Ok(ModifiedGenerator { mu_plus, cov: CovarianceModel::Dense(cov), ridge_added })
}
