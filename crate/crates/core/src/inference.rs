//! Selective test for the mean difference between salient and non-salient
//! nodes.
//!
//! The statistic is `T(X) = ηᵀX / √(ηᵀΣη)`. Conditioning on the component of
//! `X` orthogonal to `η` in the Σ geometry leaves a line `X(z) = a + b z`
//! with `z = T(X)`. The truncation set is every `z` on that line whose
//! saliency selection equals the observed one; it is found by walking the
//! line piece by piece, where a piece is an interval on which all ReLU signs,
//! the predicted class and the selection are constant. Under the null the
//! conditional law of `T` is a standard normal truncated to that set.

use ndarray::{Array1, ArrayView1};

use crate::error::{Error, Result};
use crate::gnn::{Network, PieceInterval};
use crate::graph::{CovarianceModel, FeatureMatrix, Graph};
use crate::gnn::ModelSpec;
use crate::normal::{ln_interval_mass, log_sum_exp};
use crate::saliency::{
    saliency_affine, saliency_from_pass, subgraph_interval_normalized, subgraph_interval_raw, SaliencyMap,
    SaliencyMethod, SubgraphSelection,
};

/// Floor on `ηᵀΣη` below which the statistic is undefined.
pub const VARIANCE_FLOOR: f64 = 1e-30;

/// Node-major contrast vector: `1/|V+|` on salient feature entries,
/// `-1/|V-|` on non-salient ones, zero elsewhere.
#[derive(Debug, Clone, PartialEq)]
pub struct TestDirection {
    pub eta: Array1<f64>,
}

pub fn build_eta(sel: &SubgraphSelection, n: usize, d: usize) -> Result<TestDirection> {
    if !sel.is_testable() {
        return Err(Error::EmptySide);
    }
    if sel.salient.iter().chain(&sel.nonsalient).any(|&v| v >= n) {
        return Err(Error::DimensionMismatch(format!("selection refers to nodes beyond n = {n}")));
    }
    let mut eta = Array1::zeros(n * d);
    let plus = 1.0 / sel.salient.len() as f64;
    let minus = -1.0 / sel.nonsalient.len() as f64;
    for &v in &sel.salient {
        eta.slice_mut(ndarray::s![v * d..(v + 1) * d]).fill(plus);
    }
    for &v in &sel.nonsalient {
        eta.slice_mut(ndarray::s![v * d..(v + 1) * d]).fill(minus);
    }
    Ok(TestDirection { eta })
}

fn eta_variance(eta: ArrayView1<f64>, cov: &CovarianceModel) -> Result<(Array1<f64>, f64)> {
    let sigma_eta = cov.matvec(eta)?;
    let var = eta.dot(&sigma_eta);
    if !(var > VARIANCE_FLOOR) {
        return Err(Error::ZeroVariance);
    }
    Ok((sigma_eta, var))
}

pub fn test_statistic(eta: &TestDirection, x: ArrayView1<f64>, cov: &CovarianceModel) -> Result<f64> {
    if x.len() != eta.eta.len() {
        return Err(Error::DimensionMismatch(format!("x has length {}, η has {}", x.len(), eta.eta.len())));
    }
    let (_, var) = eta_variance(eta.eta.view(), cov)?;
    Ok(eta.eta.dot(&x) / var.sqrt())
}

/// `X(z) = a + b z` through the observation at `z = z_obs`.
#[derive(Debug, Clone, PartialEq)]
pub struct LineParametrization {
    pub a: Array1<f64>,
    pub b: Array1<f64>,
    pub z_obs: f64,
}

impl LineParametrization {
    pub fn new(eta: &TestDirection, x: ArrayView1<f64>, cov: &CovarianceModel) -> Result<Self> {
        if x.len() != eta.eta.len() {
            return Err(Error::DimensionMismatch(format!("x has length {}, η has {}", x.len(), eta.eta.len())));
        }
        let (sigma_eta, var) = eta_variance(eta.eta.view(), cov)?;
        let sd = var.sqrt();
        let z_obs = eta.eta.dot(&x) / sd;
        let b = sigma_eta / sd;
        let a = &x - &(&b * z_obs);
        Ok(LineParametrization { a, b, z_obs })
    }

    pub fn point(&self, z: f64) -> Array1<f64> {
        &self.a + &(&self.b * z)
    }
}

/// Sorted, pairwise-disjoint closed intervals.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TruncationSet {
    intervals: Vec<PieceInterval>,
}

impl TruncationSet {
    pub fn full() -> Self {
        TruncationSet { intervals: vec![PieceInterval::FULL] }
    }

    /// Sorts and merges intervals whose gap is below `merge_gap`.
    pub fn from_intervals(mut intervals: Vec<PieceInterval>, merge_gap: f64) -> Self {
        intervals.retain(|iv| iv.lo <= iv.hi);
        intervals.sort_by(|x, y| x.lo.total_cmp(&y.lo));
        let mut merged: Vec<PieceInterval> = Vec::with_capacity(intervals.len());
        for iv in intervals {
            match merged.last_mut() {
                Some(last) if iv.lo <= last.hi + merge_gap => last.hi = last.hi.max(iv.hi),
                _ => merged.push(iv),
            }
        }
        TruncationSet { intervals: merged }
    }

    pub fn intervals(&self) -> &[PieceInterval] {
        &self.intervals
    }

    pub fn len(&self) -> usize {
        self.intervals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.intervals.is_empty()
    }

    pub fn contains(&self, z: f64) -> bool {
        self.intervals.iter().any(|iv| iv.contains(z))
    }

    /// Lebesgue measure of the part inside `[lo, hi]`.
    pub fn measure_within(&self, lo: f64, hi: f64) -> f64 {
        self.intervals.iter().map(|iv| (iv.hi.min(hi) - iv.lo.max(lo)).max(0.0)).sum()
    }
}

/// Two-sided tail probability of a standard normal restricted to a set.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TailProbability {
    pub p: f64,
    /// The set carries no representable normal mass; `p` is reported as 1.
    pub underflow: bool,
}

/// `P(|Z| > |t| | Z ∈ set)` for `Z ~ N(0, 1)`.
pub fn selective_p(t: f64, set: &TruncationSet) -> TailProbability {
    let t = t.abs();
    let ln_den = log_sum_exp(set.intervals.iter().map(|iv| ln_interval_mass(iv.lo, iv.hi)));
    let ln_num = log_sum_exp(set.intervals.iter().flat_map(|iv| {
        [ln_interval_mass(iv.lo, iv.hi.min(-t)), ln_interval_mass(iv.lo.max(t), iv.hi)]
    }));
    if !ln_den.is_finite() {
        return TailProbability { p: 1.0, underflow: true };
    }
    TailProbability { p: (ln_num - ln_den).exp().clamp(0.0, 1.0), underflow: false }
}

/// Unconditional two-sided p-value; shares the code path of
/// [`selective_p`] on the whole line.
pub fn naive_p(t: f64) -> f64 {
    selective_p(t, &TruncationSet::full()).p
}

/// `min(1, 3^n · p)`, evaluated in log space.
pub fn bonferroni_p(p_naive: f64, n: usize) -> f64 {
    if p_naive <= 0.0 {
        return 0.0;
    }
    (n as f64 * 3f64.ln() + p_naive.ln()).exp().min(1.0)
}

/// Selective p-value conditioned only on the piece containing the
/// observation.
pub fn wo_pp_p(t: f64, observed_piece: PieceInterval) -> f64 {
    selective_p(t, &TruncationSet { intervals: vec![observed_piece] }).p
}

/// What is tested and how the saliency map is thresholded.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TestOptions {
    pub method: SaliencyMethod,
    pub tau_l: f64,
    pub tau_u: f64,
    pub normalize: bool,
    pub search: SearchConfig,
}

impl Default for TestOptions {
    fn default() -> Self {
        TestOptions { method: SaliencyMethod::Cam, tau_l: 0.3, tau_u: 0.7, normalize: true, search: SearchConfig::default() }
    }
}

/// Line-walk parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SearchConfig {
    /// Nudge past the end of each piece.
    pub step: f64,
    /// Minimum advance per iteration before the walk is declared stalled.
    pub stall_guard: f64,
    /// The walk covers `[-R, R]` with `R = max(min_radius, |z_obs| + margin)`.
    pub min_radius: f64,
    pub margin: f64,
}

impl Default for SearchConfig {
    fn default() -> Self {
        SearchConfig { step: 1e-10, stall_guard: 1e-12, min_radius: 20.0, margin: 10.0 }
    }
}

impl SearchConfig {
    pub fn radius(&self, z_obs: f64) -> f64 {
        self.min_radius.max(z_obs.abs() + self.margin)
    }
}

/// Selection state at one point of the line and the interval around it on
/// which that state is constant. `selection` is `None` where the normalized
/// map is degenerate.
#[derive(Debug, Clone, PartialEq)]
pub struct LinePiece {
    pub interval: PieceInterval,
    pub selection: Option<SubgraphSelection>,
}

pub fn piece_at(net: &Network<'_>, line: &LineParametrization, z: f64, opts: &TestOptions) -> Result<LinePiece> {
    let pass = net.forward_affine(line.a.view(), line.b.view(), z)?;
    let (_, sa) = saliency_affine(net, &pass, line.a.view(), line.b.view(), z, opts.method)?;
    let values = sa.eval(z);
    if !opts.normalize {
        let selection = SubgraphSelection::partition(values.view(), opts.tau_l, opts.tau_u);
        let interval = subgraph_interval_raw(&sa, &selection, opts.tau_l, opts.tau_u, z);
        return Ok(LinePiece { interval, selection: Some(selection) });
    }
    let map = SaliencyMap::new(values);
    let Some(normalized) = map.normalized else {
        let flat = sa.coef.iter().all(|&c| c == sa.coef[0]) && sa.slope.iter().all(|&s| s == sa.slope[0]);
        let interval = if flat { sa.valid } else { PieceInterval::new(z, z) };
        return Ok(LinePiece { interval, selection: None });
    };
    let selection = SubgraphSelection::partition(normalized.view(), opts.tau_l, opts.tau_u);
    let interval = subgraph_interval_normalized(&sa, &selection, opts.tau_l, opts.tau_u, z)?;
    Ok(LinePiece { interval, selection: Some(selection) })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SearchOutcome {
    pub truncation: TruncationSet,
    /// Piece containing `z_obs`, used by the w/o-pp baseline.
    pub observed: PieceInterval,
    /// Number of pieces visited.
    pub steps: usize,
}

/// Walks `[-R, R]` and collects every piece whose selection equals `sel_obs`.
pub fn parametric_search(
    net: &Network<'_>,
    line: &LineParametrization,
    sel_obs: &SubgraphSelection,
    opts: &TestOptions,
) -> Result<SearchOutcome> {
    let cfg = opts.search;
    let radius = cfg.radius(line.z_obs);
    let observed = piece_at(net, line, line.z_obs, opts)?;
    let mut matched = Vec::new();
    if observed.selection.as_ref() == Some(sel_obs) {
        matched.push(observed.interval);
    }
    let mut z = -radius;
    let mut steps = 0;
    while z <= radius {
        let piece = piece_at(net, line, z, opts)?;
        steps += 1;
        if piece.selection.as_ref() == Some(sel_obs) {
            matched.push(piece.interval);
        }
        let next = piece.interval.hi.max(z) + cfg.step;
        if !(next - z >= cfg.stall_guard) {
            return Err(Error::SearchStalled(z));
        }
        z = next;
    }
    Ok(SearchOutcome {
        truncation: TruncationSet::from_intervals(matched, 2.0 * cfg.step),
        observed: observed.interval,
        steps,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SkipReason {
    EmptySide,
    DegenerateSaliency,
}

impl std::fmt::Display for SkipReason {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            SkipReason::EmptySide => "EmptySide",
            SkipReason::DegenerateSaliency => "DegenerateSaliency",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TestReport {
    pub class: usize,
    pub t_obs: f64,
    pub p_selective: f64,
    pub p_naive: f64,
    pub p_bonferroni: f64,
    pub p_wo_pp: f64,
    pub selection: SubgraphSelection,
    pub truncation: TruncationSet,
    pub observed_piece: PieceInterval,
    pub search_steps: usize,
    /// The truncation set carried no representable mass.
    pub truncation_underflow: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub enum TestResult {
    Tested(Box<TestReport>),
    Skipped(SkipReason),
}

impl TestResult {
    pub fn report(&self) -> Option<&TestReport> {
        match self {
            TestResult::Tested(r) => Some(r),
            TestResult::Skipped(_) => None,
        }
    }
}

/// Forward pass, saliency, selection, line construction, truncation search
/// and all four p-values.
pub fn run_test(
    model: &ModelSpec,
    g: &Graph,
    x_obs: &FeatureMatrix,
    cov: &CovarianceModel,
    opts: &TestOptions,
) -> Result<TestResult> {
    if opts.tau_l >= opts.tau_u {
        return Err(Error::Config(format!("thresholds must satisfy tau_l < tau_u (got {}, {})", opts.tau_l, opts.tau_u)));
    }
    let (n, d) = (x_obs.node_count(), x_obs.dim());
    if cov.dim() != n * d {
        return Err(Error::DimensionMismatch(format!("covariance has size {}, features have {}", cov.dim(), n * d)));
    }
    let net = Network::new(model, g)?;
    let pass = net.forward(x_obs.values())?;
    let (class, map) = saliency_from_pass(&net, &pass, x_obs.values(), opts.method)?;
    let scores = if opts.normalize {
        match &map.normalized {
            Some(s) => s.view(),
            None => return Ok(TestResult::Skipped(SkipReason::DegenerateSaliency)),
        }
    } else {
        map.raw.view()
    };
    let selection = SubgraphSelection::partition(scores, opts.tau_l, opts.tau_u);
    if !selection.is_testable() {
        return Ok(TestResult::Skipped(SkipReason::EmptySide));
    }
    let eta = build_eta(&selection, n, d)?;
    let x = x_obs.to_vec();
    let line = LineParametrization::new(&eta, x.view(), cov)?;
    let search = parametric_search(&net, &line, &selection, opts)?;
    // the observed piece reproduces the observed selection by construction
    let truncation = if search.truncation.contains(line.z_obs) {
        search.truncation
    } else {
        let mut ivs = search.truncation.intervals().to_vec();
        ivs.push(search.observed);
        TruncationSet::from_intervals(ivs, 2.0 * opts.search.step)
    };
    let t_obs = line.z_obs;
    let selective = selective_p(t_obs, &truncation);
    let p_naive = naive_p(t_obs);
    Ok(TestResult::Tested(Box::new(TestReport {
        class,
        t_obs,
        p_selective: selective.p,
        p_naive,
        p_bonferroni: bonferroni_p(p_naive, n),
        p_wo_pp: wo_pp_p(t_obs, search.observed),
        selection,
        truncation,
        observed_piece: search.observed,
        search_steps: search.steps,
        truncation_underflow: selective.underflow,
    })))
}
