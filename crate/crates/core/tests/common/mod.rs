//! Straight-line dense re-implementation of the forward pass and CAM
//! selection, used as an oracle, plus random small instances.
#![allow(dead_code)]

use ndarray::{Array1, Array2};
use rand::Rng;
use rand_distr::StandardNormal;
use salient_si::gnn::{Architecture, ModelSpec, Network};
use salient_si::graph::{CovarianceModel, FeatureMatrix, Graph};
use salient_si::inference::{run_test, TestOptions, TestResult};
use salient_si::saliency::{compute_saliency, grad, grad_cam, grad_input, saliency_affine, SaliencyMethod};
use salient_si::model_io::{random_model, ModelDims};
use salient_si::synthgen::{kronecker_cov, random_graph, CovKind};

struct Dense {
    w: Vec<f64>,
    rows: usize,
    cols: usize,
}

pub struct Oracle {
    n: usize,
    /// Row-major n×n aggregation matrix per layer.
    aggs: Vec<Vec<f64>>,
    layers: Vec<Vec<Dense>>,
    classifier: Dense,
    mean_pool: bool,
}

fn dense(m: &Array2<f64>) -> Dense {
    Dense { w: m.iter().copied().collect(), rows: m.nrows(), cols: m.ncols() }
}

impl Oracle {
    pub fn new(model: &ModelSpec, g: &Graph) -> Self {
        let n = g.node_count();
        let adj = g.adjacency();
        let loops = model.self_loops();
        let deg: Vec<f64> = (0..n).map(|i| adj.row(i).sum() + if loops { 1.0 } else { 0.0 }).collect();
        let aggs = model
            .layers()
            .iter()
            .map(|layer| {
                let mut a = vec![0.0; n * n];
                for i in 0..n {
                    for j in 0..n {
                        a[i * n + j] = match model.architecture() {
                            Architecture::Gcn => {
                                let aij = adj[[i, j]] + if loops && i == j { 1.0 } else { 0.0 };
                                aij / (deg[i] * deg[j]).sqrt()
                            }
                            Architecture::Gin => adj[[i, j]] + if i == j { 1.0 + layer.eps } else { 0.0 },
                        };
                    }
                }
                a
            })
            .collect();
        Oracle {
            n,
            aggs,
            layers: model.layers().iter().map(|l| l.weights.iter().map(dense).collect()).collect(),
            classifier: dense(model.classifier()),
            mean_pool: model.architecture() == Architecture::Gcn,
        }
    }

    fn layer(&self, l: usize, h: &[f64], width: usize) -> (Vec<f64>, usize) {
        self.layer_masked(l, h, width, &mut Vec::new())
    }

    /// As `layer`, appending the active flag of every unit to `mask`.
    fn layer_masked(&self, l: usize, h: &[f64], width: usize, mask: &mut Vec<bool>) -> (Vec<f64>, usize) {
        let n = self.n;
        let a = &self.aggs[l];
        let mut cur = vec![0.0; n * width];
        for i in 0..n {
            for j in 0..n {
                let aij = a[i * n + j];
                if aij != 0.0 {
                    for k in 0..width {
                        cur[i * width + k] += aij * h[j * width + k];
                    }
                }
            }
        }
        let mut w_in = width;
        for blk in &self.layers[l] {
            assert_eq!(blk.rows, w_in);
            let mut next = vec![0.0; n * blk.cols];
            for i in 0..n {
                for k in 0..w_in {
                    let v = cur[i * w_in + k];
                    if v != 0.0 {
                        for c in 0..blk.cols {
                            next[i * blk.cols + c] += v * blk.w[k * blk.cols + c];
                        }
                    }
                }
            }
            for v in &mut next {
                mask.push(*v > 0.0);
                if *v <= 0.0 {
                    *v = 0.0;
                }
            }
            cur = next;
            w_in = blk.cols;
        }
        (cur, w_in)
    }

    fn input_width(&self, l: usize) -> usize {
        if l == 0 {
            self.layers[0][0].rows
        } else {
            self.layers[l - 1].last().unwrap().cols
        }
    }

    /// `X_1, …, X_L` for row-major input `x`.
    pub fn outputs(&self, x: &[f64]) -> Vec<Vec<f64>> {
        let mut out = Vec::new();
        let mut h = x.to_vec();
        let mut width = self.input_width(0);
        for l in 0..self.layers.len() {
            let (next, w) = self.layer(l, &h, width);
            out.push(next.clone());
            h = next;
            width = w;
        }
        out
    }

    /// Logits when `h` is substituted for `X_start` (`start = 0` is the input).
    pub fn logits_from(&self, start: usize, h: &[f64]) -> Vec<f64> {
        let mut h = h.to_vec();
        let mut width = self.input_width(start);
        for l in start..self.layers.len() {
            let (next, w) = self.layer(l, &h, width);
            h = next;
            width = w;
        }
        self.head(&h, width)
    }

    fn head(&self, h: &[f64], width: usize) -> Vec<f64> {
        let mut pooled = vec![0.0; width];
        for i in 0..self.n {
            for k in 0..width {
                pooled[k] += h[i * width + k];
            }
        }
        if self.mean_pool {
            pooled.iter_mut().for_each(|v| *v /= self.n as f64);
        }
        let c = &self.classifier;
        (0..c.cols).map(|j| (0..width).map(|k| pooled[k] * c.w[k * c.cols + j]).sum()).collect()
    }

    /// ReLU sign pattern of every layer from `start` on.
    pub fn mask_from(&self, start: usize, h: &[f64]) -> Vec<bool> {
        let mut mask = Vec::new();
        let mut h = h.to_vec();
        let mut width = self.input_width(start);
        for l in start..self.layers.len() {
            let (next, w) = self.layer_masked(l, &h, width, &mut mask);
            h = next;
            width = w;
        }
        mask
    }

    pub fn logits(&self, x: &[f64]) -> Vec<f64> {
        self.logits_from(0, x)
    }

    /// Predicted class (first maximum) and its CAM.
    pub fn cam(&self, x: &[f64]) -> (usize, Vec<f64>) {
        let outs = self.outputs(x);
        let last = outs.last().unwrap();
        let width = self.layers.last().unwrap().last().unwrap().cols;
        let logits = self.head(last, width);
        let mut class = 0;
        for (j, &v) in logits.iter().enumerate() {
            if v > logits[class] {
                class = j;
            }
        }
        let c = &self.classifier;
        let cam = (0..self.n)
            .map(|i| {
                let s: f64 = (0..width).map(|k| last[i * width + k] * c.w[k * c.cols + class]).sum();
                s.max(0.0)
            })
            .collect();
        (class, cam)
    }

    /// CAM selection `(salient, nonsalient)`, `None` when normalization is
    /// impossible.
    pub fn selection(&self, x: &[f64], tau_l: f64, tau_u: f64, normalize: bool) -> Option<(Vec<usize>, Vec<usize>)> {
        let (_, s) = self.cam(x);
        let scores = if normalize {
            let lo = s.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = s.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            if hi == lo {
                return None;
            }
            s.iter().map(|v| (v - lo) / (hi - lo)).collect()
        } else {
            s
        };
        let plus = (0..self.n).filter(|&i| scores[i] > tau_u).collect();
        let minus = (0..self.n).filter(|&i| scores[i] <= tau_l).collect();
        Some((plus, minus))
    }
}

pub struct Instance {
    pub model: ModelSpec,
    pub graph: Graph,
    pub x: FeatureMatrix,
    pub cov: CovarianceModel,
    pub opts: TestOptions,
}

pub fn random_spd(dim: usize, rng: &mut impl Rng) -> Array2<f64> {
    let a = Array2::from_shape_fn((dim, dim), |_| rng.sample::<f64, _>(StandardNormal));
    a.dot(&a.t()) / dim as f64 + Array2::<f64>::eye(dim) * 0.5
}

/// Small random instance: n ≤ `max_n`, d ≤ `max_d`, at most `max_layers`
/// layers of width ≤ 8, GCN or GIN, CAM, random covariance.
pub fn random_instance(rng: &mut impl Rng, max_n: usize, max_d: usize, max_layers: usize) -> Instance {
    let n = rng.random_range(4..=max_n);
    let d = rng.random_range(1..=max_d);
    let depth = rng.random_range(1..=max_layers);
    let classes = rng.random_range(2..=3);
    let architecture = if rng.random_bool(0.5) { Architecture::Gcn } else { Architecture::Gin };
    let dims = match architecture {
        Architecture::Gcn => {
            let widths: Vec<usize> = (0..depth).map(|_| rng.random_range(2..=8)).collect();
            ModelDims::gcn(d, &widths, classes)
        }
        Architecture::Gin => {
            let mlp = [rng.random_range(2..=8), rng.random_range(2..=8)];
            ModelDims::gin(d, depth, &mlp, classes)
        }
    };
    let model = random_model(architecture, &dims, rng.random()).unwrap().with_self_loops(rng.random_bool(0.5));
    let graph = random_graph(n, 2.0 + rng.random::<f64>() * (n as f64 / 2.0 - 2.0).clamp(0.0, 2.0), rng).unwrap();
    let cov = match rng.random_range(0..3) {
        0 => CovarianceModel::identity(n, d),
        1 => kronecker_cov(CovKind::Correlation, &graph, d),
        _ => CovarianceModel::Kronecker { space: random_spd(n, rng), feature: random_spd(d, rng) },
    };
    let factor = cov.cholesky().unwrap();
    let nu: ndarray::Array1<f64> = (0..n * d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    let shift = rng.random::<f64>();
    let x = (factor.color(nu.view()) + shift).into_shape_with_order((n, d)).unwrap();
    let (tau_l, tau_u) = if rng.random_bool(0.5) { (0.3, 0.7) } else { (0.2, 0.5) };
    let opts = TestOptions { tau_l, tau_u, normalize: rng.random_bool(0.7), ..TestOptions::default() };
    Instance { model, graph, x: FeatureMatrix::new(x).unwrap(), cov, opts }
}

/// Row-major `nd x nd` covariance assembled entry by entry.
pub fn dense_cov(cov: &CovarianceModel) -> Vec<f64> {
    match cov {
        CovarianceModel::Dense(m) => m.iter().copied().collect(),
        CovarianceModel::Kronecker { space, feature } => {
            let (n, d) = (space.nrows(), feature.nrows());
            let m = n * d;
            let mut out = vec![0.0; m * m];
            for i in 0..n {
                for k in 0..d {
                    for j in 0..n {
                        for l in 0..d {
                            out[(i * d + k) * m + j * d + l] = space[[i, j]] * feature[[k, l]];
                        }
                    }
                }
            }
            out
        }
    }
}

/// `(a, b, z)` with `x = a + b z` along the mean-difference direction of
/// `plus` against `minus`.
pub fn oracle_line(x: &[f64], cov: &[f64], plus: &[usize], minus: &[usize], d: usize) -> (Vec<f64>, Vec<f64>, f64) {
    let m = x.len();
    let mut eta = vec![0.0; m];
    for &i in plus {
        for k in 0..d {
            eta[i * d + k] = 1.0 / plus.len() as f64;
        }
    }
    for &i in minus {
        for k in 0..d {
            eta[i * d + k] = -1.0 / minus.len() as f64;
        }
    }
    let s_eta: Vec<f64> = (0..m).map(|r| (0..m).map(|c| cov[r * m + c] * eta[c]).sum()).collect();
    let var: f64 = eta.iter().zip(&s_eta).map(|(e, s)| e * s).sum();
    let sd = var.sqrt();
    let z = eta.iter().zip(x).map(|(e, v)| e * v).sum::<f64>() / sd;
    let b: Vec<f64> = s_eta.iter().map(|v| v / sd).collect();
    let a = x.iter().zip(&b).map(|(v, bv)| v - bv * z).collect();
    (a, b, z)
}

pub const GRID_STEP: f64 = 1e-4;

/// Length of the symmetric difference between the library's truncation set
/// and a grid scan of the oracle selection over the search range. `None`
/// when the library skips the instance.
pub fn truncation_mismatch(inst: &Instance) -> Option<f64> {
    let report = match run_test(&inst.model, &inst.graph, &inst.x, &inst.cov, &inst.opts).unwrap() {
        TestResult::Tested(r) => r,
        TestResult::Skipped(_) => return None,
    };
    let oracle = Oracle::new(&inst.model, &inst.graph);
    let x = inst.x.to_vec().to_vec();
    let (tl, tu, norm) = (inst.opts.tau_l, inst.opts.tau_u, inst.opts.normalize);
    let (plus, minus) = oracle.selection(&x, tl, tu, norm).expect("library tested a degenerate map");
    assert_eq!(plus, report.selection.salient.iter().copied().collect::<Vec<_>>());
    assert_eq!(minus, report.selection.nonsalient.iter().copied().collect::<Vec<_>>());
    let (a, b, z_obs) = oracle_line(&x, &dense_cov(&inst.cov), &plus, &minus, inst.x.dim());
    assert!((z_obs - report.t_obs).abs() < 1e-9 * z_obs.abs().max(1.0));
    assert!(report.truncation.contains(report.t_obs));

    let radius = 20f64.max(z_obs.abs() + 10.0);
    let steps = (2.0 * radius / GRID_STEP).round() as usize;
    let mut point = vec![0.0; a.len()];
    let mut mismatches = 0usize;
    for k in 0..=steps {
        let z = -radius + k as f64 * GRID_STEP;
        for (p, (av, bv)) in point.iter_mut().zip(a.iter().zip(&b)) {
            *p = av + bv * z;
        }
        let same = oracle.selection(&point, tl, tu, norm).is_some_and(|(p, m)| p == plus && m == minus);
        if same != report.truncation.contains(z) {
            mismatches += 1;
        }
    }
    Some(mismatches as f64 * GRID_STEP)
}

pub fn random_method(rng: &mut impl Rng, layers: usize) -> SaliencyMethod {
    match rng.random_range(0..4) {
        0 => SaliencyMethod::Cam,
        1 => SaliencyMethod::GradCam { layer: rng.random_range(1..=layers) },
        2 => SaliencyMethod::Grad,
        _ => SaliencyMethod::GradInput,
    }
}

fn max_abs_diff<'a>(p: impl IntoIterator<Item = &'a f64>, q: impl IntoIterator<Item = &'a f64>) -> f64 {
    p.into_iter().zip(q).map(|(u, v)| (u - v).abs()).fold(0.0, f64::max)
}

/// Largest disagreement between the affine pass on the piece around a random
/// point of a random line and direct evaluation at `points` points inside
/// that piece. Covers pre-activations, layer outputs, logits and saliency.
pub fn affine_error(inst: &Instance, rng: &mut impl Rng, points: usize) -> f64 {
    let net = Network::new(&inst.model, &inst.graph).unwrap();
    let oracle = Oracle::new(&inst.model, &inst.graph);
    let (n, d) = (inst.x.node_count(), inst.x.dim());
    let a = inst.x.to_vec();
    let b: Array1<f64> = (0..n * d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    let z0 = rng.random_range(-3.0..3.0);
    let method = random_method(rng, inst.model.layer_count());
    let pass = net.forward_affine(a.view(), b.view(), z0).unwrap();
    let (class, sa) = saliency_affine(&net, &pass, a.view(), b.view(), z0, method).unwrap();
    let lo = sa.valid.lo.max(z0 - 5.0);
    let hi = sa.valid.hi.min(z0 + 5.0);
    let mut worst = 0.0f64;
    for _ in 0..points {
        let z = if hi > lo { rng.random_range(lo..hi) } else { z0 };
        let xz = (&a + &(&b * z)).into_shape_with_order((n, d)).unwrap();
        let flat: Vec<f64> = xz.iter().copied().collect();
        let direct = net.forward(&xz).unwrap();
        for (aff, dir) in pass.pre_at(z).iter().flatten().zip(direct.pre.iter().flatten()) {
            worst = worst.max(max_abs_diff(aff, dir));
        }
        for (aff, dir) in pass.outputs.iter().zip(oracle.outputs(&flat)) {
            worst = worst.max(max_abs_diff(&aff.eval(z), &dir));
        }
        worst = worst.max(max_abs_diff(&pass.logits.eval(z), &oracle.logits(&flat)));
        let feats = FeatureMatrix::new(xz).unwrap();
        let (c, map) = compute_saliency(&inst.model, &inst.graph, &feats, method).unwrap();
        assert_eq!(c, class);
        worst = worst.max(max_abs_diff(&sa.eval(z), &map.raw));
    }
    worst
}

pub const FD_STEP: f64 = 1e-6;

/// Largest gap between analytic Grad, GradInput and Grad-CAM at every layer
/// and central differences of the oracle logits. `None` if some stencil
/// crosses a ReLU kink, where the difference quotient is not a derivative.
pub fn gradient_error(inst: &Instance) -> Option<f64> {
    let oracle = Oracle::new(&inst.model, &inst.graph);
    let (n, d) = (inst.x.node_count(), inst.x.dim());
    let x = inst.x.to_vec().to_vec();
    let (class, _) = oracle.cam(&x);

    // d y_class / d h, h substituted for X_start
    let fd = |start: usize, h: &[f64]| -> Option<Vec<f64>> {
        let mask = oracle.mask_from(start, h);
        let mut grad = vec![0.0; h.len()];
        let mut probe = h.to_vec();
        for (e, g) in grad.iter_mut().enumerate() {
            probe[e] = h[e] + FD_STEP;
            if oracle.mask_from(start, &probe) != mask {
                return None;
            }
            let up = oracle.logits_from(start, &probe)[class];
            probe[e] = h[e] - FD_STEP;
            if oracle.mask_from(start, &probe) != mask {
                return None;
            }
            let down = oracle.logits_from(start, &probe)[class];
            probe[e] = h[e];
            *g = (up - down) / (2.0 * FD_STEP);
        }
        Some(grad)
    };

    let g0 = fd(0, &x)?;
    let row_sum = |g: &[f64], w: usize, weight: &dyn Fn(usize) -> f64| -> Vec<f64> {
        (0..g.len() / w).map(|i| (0..w).map(|k| g[i * w + k] * weight(i * w + k)).sum()).collect()
    };
    let mut worst = 0.0f64;
    let grad_map = grad(&inst.model, &inst.graph, &inst.x, class).unwrap();
    worst = worst.max(max_abs_diff(&grad_map.raw, &row_sum(&g0, d, &|_| 1.0)));
    let gi_map = grad_input(&inst.model, &inst.graph, &inst.x, class).unwrap();
    worst = worst.max(max_abs_diff(&gi_map.raw, &row_sum(&g0, d, &|e| x[e])));

    let outs = oracle.outputs(&x);
    for (l, xl) in outs.iter().enumerate() {
        let w = xl.len() / n;
        let gl = fd(l + 1, xl)?;
        let alpha: Vec<f64> = (0..w).map(|k| (0..n).map(|i| gl[i * w + k]).sum::<f64>() / n as f64).collect();
        let expected = row_sum(xl, w, &|e| alpha[e % w]).into_iter().map(|v| v.max(0.0)).collect::<Vec<_>>();
        let map = grad_cam(&inst.model, &inst.graph, &inst.x, l + 1, class).unwrap();
        worst = worst.max(max_abs_diff(&map.raw, &expected));
    }
    Some(worst)
}
