//! Monte Carlo campaigns: Type I error, power, robustness and threshold
//! sweeps, with per-trial records and CSV/JSON emission.
//!
//! Every trial draws from its own ChaCha20 stream seeded by
//! [`trial_seed`]`(seed, setting, trial)`, so results do not depend on the
//! number of worker threads. Skipped trials are left out of rejection-rate
//! denominators and counted separately.

use std::io::Write;
use std::path::PathBuf;
use std::time::Instant;

use ndarray::Array2;
use rand::RngCore;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gnn::{Architecture, ModelSpec};
use crate::inference::{run_test, TestOptions, TestResult};
use crate::model_io::{load_model, random_model, ModelDims};
use crate::noise::{calibrate_noise, NoiseFamily, NoiseKind};
use crate::saliency::SaliencyMethod;
use crate::synthgen::{
    kronecker_cov, make_alternative_mu, random_graph, sample_features, splitmix64, trial_rng, trial_seed, CovKind,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CovMode {
    Known,
    /// Σ̂ = σ̂²·Σ₀ with σ̂² the sample variance of the observed entries.
    Estimated,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub n: usize,
    pub d: usize,
    pub avg_degree: f64,
    pub cov_kind: CovKind,
    /// Signal size; 0 draws null data.
    pub delta: f64,
    pub flip_prob: f64,
    pub tau_l: f64,
    pub tau_u: f64,
    pub alpha: f64,
    pub trials: usize,
    pub seed: u64,
    pub architecture: Architecture,
    pub saliency_method: SaliencyMethod,
    /// Normalize saliency to [0, 1] before thresholding.
    pub normalize: bool,
    /// `None` for Gaussian noise.
    pub noise: Option<NoiseFamily>,
    pub cov_mode: CovMode,
    /// Widths of the GCN layers.
    pub gcn_hidden: Vec<usize>,
    /// GCN propagation over `A + I`.
    pub self_loops: bool,
    pub gin_layers: usize,
    /// Widths of the two-block GIN MLP.
    pub gin_mlp: Vec<usize>,
    pub classes: usize,
    /// One model for the whole campaign instead of a fresh one per trial.
    pub fixed_model: bool,
    /// Weight file used as the fixed model; overrides the architecture and
    /// width fields.
    pub model_file: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            n: 256,
            d: 5,
            avg_degree: 3.0,
            cov_kind: CovKind::Independence,
            delta: 0.0,
            flip_prob: 0.1,
            tau_l: 0.3,
            tau_u: 0.7,
            alpha: 0.05,
            trials: 1000,
            seed: 0,
            architecture: Architecture::Gcn,
            saliency_method: SaliencyMethod::Cam,
            normalize: true,
            noise: None,
            cov_mode: CovMode::Known,
            gcn_hidden: vec![10, 10, 10],
            self_loops: true,
            gin_layers: 3,
            gin_mlp: vec![64, 64],
            classes: 2,
            fixed_model: false,
            model_file: None,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if !(self.tau_l < self.tau_u) {
            return fail(format!("tau_l = {} must be below tau_u = {}", self.tau_l, self.tau_u));
        }
        if self.trials == 0 {
            return fail("trials must be at least 1".into());
        }
        if self.n < 2 || self.d == 0 {
            return fail(format!("need n >= 2 and d >= 1 (got n = {}, d = {})", self.n, self.d));
        }
        let edges = (self.n as f64 * self.avg_degree / 2.0).floor() as usize;
        if !(self.avg_degree > 0.0 && self.avg_degree < self.n as f64) || 2 * edges < self.n {
            return fail(format!("average degree {} is infeasible for n = {}", self.avg_degree, self.n));
        }
        if !(0.0..=1.0).contains(&self.flip_prob) || !(self.alpha > 0.0 && self.alpha < 1.0) {
            return fail("flip_prob must lie in [0, 1] and alpha in (0, 1)".into());
        }
        if let (SaliencyMethod::GradCam { layer }, None) = (self.saliency_method, &self.model_file) {
            let depth = match self.architecture {
                Architecture::Gcn => self.gcn_hidden.len(),
                Architecture::Gin => self.gin_layers,
            };
            if layer == 0 || layer > depth {
                return fail(format!("gradcam layer {layer} outside 1..={depth}"));
            }
        }
        if let Some(noise) = &self.noise {
            noise.validate()?;
        }
        Ok(())
    }

    pub fn model_dims(&self) -> ModelDims {
        match self.architecture {
            Architecture::Gcn => ModelDims::gcn(self.d, &self.gcn_hidden, self.classes),
            Architecture::Gin => ModelDims::gin(self.d, self.gin_layers, &self.gin_mlp, self.classes),
        }
    }

    pub fn test_options(&self) -> TestOptions {
        TestOptions {
            method: self.saliency_method,
            tau_l: self.tau_l,
            tau_u: self.tau_u,
            normalize: self.normalize,
            ..TestOptions::default()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Proposed,
    Naive,
    Bonferroni,
    WoPp,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Proposed, Method::Naive, Method::Bonferroni, Method::WoPp];

    pub fn name(self) -> &'static str {
        match self {
            Method::Proposed => "proposed",
            Method::Naive => "naive",
            Method::Bonferroni => "bonferroni",
            Method::WoPp => "w/o-pp",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub trial: usize,
    pub seed: u64,
    /// `tested`, `skipped:<reason>` or `failed:<message>`.
    pub status: String,
    pub t_obs: Option<f64>,
    pub n_intervals: Option<usize>,
    /// In the order of [`Method::ALL`]; `None` unless tested.
    pub p_values: Option<[f64; 4]>,
}

impl TrialRecord {
    pub fn p_value(&self, method: Method) -> Option<f64> {
        let k = Method::ALL.iter().position(|&m| m == method).expect("listed");
        self.p_values.map(|p| p[k])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodRate {
    pub method: Method,
    pub rejections: usize,
    pub tested: usize,
    pub rate: f64,
    /// Binomial standard error `√(r(1−r)/tested)`.
    pub std_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SettingResult {
    pub label: String,
    pub setting: u64,
    pub config: ExperimentConfig,
    pub rates: Vec<MethodRate>,
    pub tested: usize,
    pub skipped: usize,
    pub failed: usize,
    pub records: Vec<TrialRecord>,
    pub wall_clock_secs: f64,
}

impl SettingResult {
    pub fn rate(&self, method: Method) -> &MethodRate {
        self.rates.iter().find(|r| r.method == method).expect("all methods summarized")
    }

    /// p-values of `method` over the tested trials.
    pub fn p_values(&self, method: Method) -> Vec<f64> {
        self.records.iter().filter_map(|r| r.p_value(method)).collect()
    }

    /// Rejection rate at a level other than the configured one.
    pub fn rate_at(&self, method: Method, alpha: f64) -> MethodRate {
        summarize(method, &self.records, alpha)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CampaignResult {
    pub kind: String,
    pub settings: Vec<SettingResult>,
    pub wall_clock_secs: f64,
}

fn summarize(method: Method, records: &[TrialRecord], alpha: f64) -> MethodRate {
    let ps: Vec<f64> = records.iter().filter_map(|r| r.p_value(method)).collect();
    let rejections = ps.iter().filter(|&&p| p <= alpha).count();
    let tested = ps.len();
    let rate = if tested == 0 { 0.0 } else { rejections as f64 / tested as f64 };
    let std_error = if tested == 0 { 0.0 } else { (rate * (1.0 - rate) / tested as f64).sqrt() };
    MethodRate { method, rejections, tested, rate, std_error }
}

const FIXED_MODEL_STREAM: u64 = 0x6d6f_6465_6c00_0000;

fn campaign_model(cfg: &ExperimentConfig) -> Result<Option<ModelSpec>> {
    if let Some(path) = &cfg.model_file {
        let model = load_model(path)?;
        if model.input_dim() != cfg.d {
            return Err(Error::Config(format!("model expects d = {}, campaign has d = {}", model.input_dim(), cfg.d)));
        }
        if let SaliencyMethod::GradCam { layer } = cfg.saliency_method {
            if layer > model.layer_count() {
                return Err(Error::Config(format!("gradcam layer {layer} but the model has {} layers", model.layer_count())));
            }
        }
        return Ok(Some(model));
    }
    if cfg.fixed_model {
        let model = random_model(cfg.architecture, &cfg.model_dims(), splitmix64(cfg.seed ^ FIXED_MODEL_STREAM))?;
        Ok(Some(model.with_self_loops(cfg.self_loops)))
    } else {
        Ok(None)
    }
}

/// One trial: graph, model, mean, noise, covariance, test.
pub fn run_trial(cfg: &ExperimentConfig, fixed: Option<&ModelSpec>, setting: u64, trial: usize) -> TrialRecord {
    let seed = trial_seed(cfg.seed, setting, trial as u64);
    let record = |status: String, report: Option<&crate::inference::TestReport>| TrialRecord {
        trial,
        seed,
        status,
        t_obs: report.map(|r| r.t_obs),
        n_intervals: report.map(|r| r.truncation.len()),
        p_values: report.map(|r| [r.p_selective, r.p_naive, r.p_bonferroni, r.p_wo_pp]),
    };
    match trial_outcome(cfg, fixed, setting, trial) {
        Ok(TestResult::Tested(report)) => record("tested".into(), Some(&report)),
        Ok(TestResult::Skipped(reason)) => record(format!("skipped:{reason}"), None),
        Err(e) => record(format!("failed:{e}"), None),
    }
}

/// The test result of one trial, replayable from its indices alone.
pub fn trial_outcome(
    cfg: &ExperimentConfig,
    fixed: Option<&ModelSpec>,
    setting: u64,
    trial: usize,
) -> Result<TestResult> {
    let mut rng = trial_rng(cfg.seed, setting, trial as u64);
    let g = random_graph(cfg.n, cfg.avg_degree, &mut rng)?;
    let fresh;
    let model = match fixed {
        Some(m) => m,
        None => {
            fresh = random_model(cfg.architecture, &cfg.model_dims(), rng.next_u64())?.with_self_loops(cfg.self_loops);
            &fresh
        }
    };
    let cov = kronecker_cov(cfg.cov_kind, &g, cfg.d);
    let factor = cov.cholesky()?;
    let mu = if cfg.delta != 0.0 {
        make_alternative_mu(cfg.n, cfg.d, cfg.delta, cfg.flip_prob, &mut rng)
    } else {
        Array2::zeros((cfg.n, cfg.d))
    };
    let x = sample_features(&mu, &factor, cfg.noise.as_ref(), &mut rng)?;
    let test_cov = match cfg.cov_mode {
        CovMode::Known => cov,
        CovMode::Estimated => {
            let v = x.values();
            let m = v.len() as f64;
            let mean = v.sum() / m;
            let var = v.iter().map(|t| (t - mean).powi(2)).sum::<f64>() / (m - 1.0);
            cov.scaled(var)
        }
    };
    run_test(model, &g, &x, &test_cov, &cfg.test_options())
}

/// Runs `cfg.trials` trials of one setting on the current rayon pool.
pub fn run_setting(cfg: &ExperimentConfig, setting: u64, label: impl Into<String>) -> Result<SettingResult> {
    cfg.validate()?;
    let start = Instant::now();
    let fixed = campaign_model(cfg)?;
    let records: Vec<TrialRecord> =
        (0..cfg.trials).into_par_iter().map(|t| run_trial(cfg, fixed.as_ref(), setting, t)).collect();
    let rates = Method::ALL.iter().map(|&m| summarize(m, &records, cfg.alpha)).collect();
    let tested = records.iter().filter(|r| r.status == "tested").count();
    let skipped = records.iter().filter(|r| r.status.starts_with("skipped")).count();
    let failed = records.iter().filter(|r| r.status.starts_with("failed")).count();
    Ok(SettingResult {
        label: label.into(),
        setting,
        config: cfg.clone(),
        rates,
        tested,
        skipped,
        failed,
        records,
        wall_clock_secs: start.elapsed().as_secs_f64(),
    })
}

fn campaign(kind: &str, settings: Vec<(ExperimentConfig, String)>) -> Result<CampaignResult> {
    let start = Instant::now();
    let settings = settings
        .into_iter()
        .enumerate()
        .map(|(i, (cfg, label))| run_setting(&cfg, i as u64, label))
        .collect::<Result<Vec<_>>>()?;
    Ok(CampaignResult { kind: kind.into(), settings, wall_clock_secs: start.elapsed().as_secs_f64() })
}

/// Null campaign (`delta` forced to 0).
pub fn type1(cfg: &ExperimentConfig) -> Result<CampaignResult> {
    let cfg = ExperimentConfig { delta: 0.0, ..cfg.clone() };
    campaign("type1", vec![(cfg, "null".into())])
}

/// One setting per signal size.
pub fn power(cfg: &ExperimentConfig, deltas: &[f64]) -> Result<CampaignResult> {
    let settings = deltas
        .iter()
        .map(|&delta| (ExperimentConfig { delta, ..cfg.clone() }, format!("delta={delta}")))
        .collect();
    campaign("power", settings)
}

/// Null campaigns under each family calibrated to each distance.
pub fn robustness(cfg: &ExperimentConfig, kinds: &[NoiseKind], distances: &[f64]) -> Result<CampaignResult> {
    let mut settings = Vec::new();
    for &kind in kinds {
        for &dist in distances {
            let noise = calibrate_noise(kind, dist)?;
            let c = ExperimentConfig { delta: 0.0, noise: Some(noise), ..cfg.clone() };
            settings.push((c, format!("{kind}:W1={dist}")));
        }
    }
    campaign("robustness", settings)
}

/// Pairs `(τ_l, τ_u)` of the grid with `τ_l < τ_u`, row-major.
pub fn tau_grid(lower: &[f64], upper: &[f64]) -> Vec<(f64, f64)> {
    lower.iter().flat_map(|&l| upper.iter().filter(move |&&u| l < u).map(move |&u| (l, u))).collect()
}

pub fn tau_sweep(cfg: &ExperimentConfig, lower: &[f64], upper: &[f64]) -> Result<CampaignResult> {
    let settings = tau_grid(lower, upper)
        .into_iter()
        .map(|(tau_l, tau_u)| {
            (ExperimentConfig { delta: 0.0, tau_l, tau_u, ..cfg.clone() }, format!("tau_l={tau_l},tau_u={tau_u}"))
        })
        .collect();
    campaign("tau-sweep", settings)
}

pub const CSV_HEADER: &str = "setting,trial,method,p_value,rejected,status,T_obs,n_intervals,seed";

fn opt<T: ToString>(v: Option<T>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Long format: one row per trial and method.
pub fn write_csv(result: &CampaignResult, mut out: impl Write) -> Result<()> {
    writeln!(out, "{CSV_HEADER}")?;
    for s in &result.settings {
        for r in &s.records {
            for m in Method::ALL {
                let p = r.p_value(m);
                writeln!(
                    out,
                    "{},{},{},{},{},{},{},{},{}",
                    s.label,
                    r.trial,
                    m.name(),
                    opt(p),
                    opt(p.map(|p| p <= s.config.alpha)),
                    r.status.replace(',', ";"),
                    opt(r.t_obs),
                    opt(r.n_intervals),
                    r.seed
                )?;
            }
        }
    }
    Ok(())
}

/// One-sample Kolmogorov–Smirnov test against Uniform(0, 1); returns the
/// statistic and its asymptotic p-value.
pub fn ks_uniform(samples: &[f64]) -> (f64, f64) {
    let mut v = samples.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len() as f64;
    let stat = v.iter().enumerate().fold(0.0f64, |acc, (i, &x)| {
        let above = (i as f64 + 1.0) / m - x;
        let below = x - i as f64 / m;
        acc.max(above).max(below)
    });
    let sq = m.sqrt();
    let lambda = (sq + 0.12 + 0.11 / sq) * stat;
    (stat, kolmogorov_survival(lambda))
}

/// `P(K > λ)` for the Kolmogorov distribution.
fn kolmogorov_survival(lambda: f64) -> f64 {
    if lambda < 0.2 {
        return 1.0;
    }
    let mut sum = 0.0;
    for j in 1..=100 {
        let term = (-2.0 * (j * j) as f64 * lambda * lambda).exp();
        sum += if j % 2 == 1 { term } else { -term };
        if term < 1e-16 {
            break;
        }
    }
    (2.0 * sum).clamp(0.0, 1.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ExperimentConfig {
        ExperimentConfig { n: 12, trials: 6, seed: 3, ..ExperimentConfig::default() }
    }

    #[test]
    fn tau_grid_keeps_ordered_pairs() {
        let grid = tau_grid(&[0.1, 0.3, 0.5, 0.7], &[0.2, 0.4, 0.6, 0.8]);
        assert_eq!(grid.len(), 10);
        assert!(grid.iter().all(|(l, u)| l < u));
        assert_eq!(grid[0], (0.1, 0.2));
        assert_eq!(grid[9], (0.7, 0.8));
    }

    #[test]
    fn invalid_configs() {
        let bad = [
            ExperimentConfig { tau_l: 0.7, tau_u: 0.3, ..tiny() },
            ExperimentConfig { trials: 0, ..tiny() },
            ExperimentConfig { avg_degree: 0.5, ..tiny() },
            ExperimentConfig { saliency_method: SaliencyMethod::GradCam { layer: 4 }, ..tiny() },
        ];
        for cfg in bad {
            assert!(matches!(cfg.validate(), Err(Error::Config(_))), "{cfg:?}");
        }
        assert!(tiny().validate().is_ok());
    }

    #[test]
    fn records_are_complete_and_replayable() {
        let res = run_setting(&tiny(), 0, "x").unwrap();
        assert_eq!(res.records.len(), 6);
        assert_eq!(res.tested + res.skipped + res.failed, 6);
        assert!(res.records.iter().enumerate().all(|(i, r)| r.trial == i));
        let again = run_trial(&tiny(), None, 0, 4);
        assert_eq!(again, res.records[4]);
        for r in &res.rates {
            assert!((0.0..=1.0).contains(&r.rate));
        }
    }

    #[test]
    fn csv_has_one_row_per_trial_and_method() {
        let res = type1(&tiny()).unwrap();
        let mut buf = Vec::new();
        write_csv(&res, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 1 + 6 * 4);
        assert!(text.starts_with(CSV_HEADER));
    }

    #[test]
    fn config_parses_with_defaults() {
        let cfg: ExperimentConfig =
            serde_json::from_str(r#"{"n": 32, "saliency_method": "gradcam:2", "cov_kind": "correlation"}"#).unwrap();
        assert_eq!(cfg.n, 32);
        assert_eq!(cfg.d, 5);
        assert_eq!(cfg.saliency_method, SaliencyMethod::GradCam { layer: 2 });
        assert!(serde_json::from_str::<ExperimentConfig>(r#"{"nodes": 3}"#).is_err());
    }

    #[test]
    fn ks_reference_values() {
        // evenly spread points are as uniform as possible
        let even: Vec<f64> = (0..1000).map(|i| (i as f64 + 0.5) / 1000.0).collect();
        let (d, p) = ks_uniform(&even);
        assert!((d - 0.0005).abs() < 1e-12);
        assert!(p > 0.99);
        let squeezed: Vec<f64> = even.iter().map(|x| x * 0.8).collect();
        assert!(ks_uniform(&squeezed).1 < 1e-10);
        // P(K > 1.628) ≈ 0.01
        assert!((kolmogorov_survival(1.6276) - 0.01).abs() < 2e-4);
    }
}
