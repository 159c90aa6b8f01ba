//! Node saliency maps, threshold-based subgraph selection, and the intervals
//! of the line parameter on which a selection stays fixed.
//!
//! All four saliency methods are piecewise linear in the input features:
//!
//! * CAM: `ReLU(X_L w_c)`.
//! * Grad-CAM at layer `l`: `ReLU(X_l α)` with `α_k = mean_i ∂y_c/∂(X_l)_{ik}`.
//! * Grad: `Σ_j ∂y_c/∂x_{vj}` per node.
//! * GradInput: `Σ_j x_{vj} ∂y_c/∂x_{vj}` per node.
//!
//! Gradients are exact because ReLU masks are fixed within a piece; on a
//! piece of the line Grad is constant and the other three are affine up to
//! the final ReLU, whose sign changes are added to the piece constraints.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use ndarray::{Array1, Array2, ArrayView1, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gnn::{argmax, argmax_class_interval, AffinePass, ForwardPass, ModelSpec, Network, PieceInterval};
use crate::graph::{FeatureMatrix, Graph};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum SaliencyMethod {
    Cam,
    /// Grad-CAM on the output of layer `layer` (1-based, `X_layer`).
    GradCam { layer: usize },
    Grad,
    GradInput,
}

impl fmt::Display for SaliencyMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SaliencyMethod::Cam => f.write_str("cam"),
            SaliencyMethod::GradCam { layer } => write!(f, "gradcam:{layer}"),
            SaliencyMethod::Grad => f.write_str("grad"),
            SaliencyMethod::GradInput => f.write_str("gradinput"),
        }
    }
}

impl FromStr for SaliencyMethod {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let lower = s.to_ascii_lowercase();
        let (name, arg) = match lower.split_once(':') {
            Some((n, a)) => (n, Some(a)),
            None => (lower.as_str(), None),
        };
        match (name, arg) {
            ("cam", None) => Ok(SaliencyMethod::Cam),
            ("grad", None) => Ok(SaliencyMethod::Grad),
            ("gradinput" | "grad_input" | "grad-input", None) => Ok(SaliencyMethod::GradInput),
            ("gradcam" | "grad_cam" | "grad-cam", None) => Ok(SaliencyMethod::GradCam { layer: 2 }),
            ("gradcam" | "grad_cam" | "grad-cam", Some(l)) => l
                .parse()
                .map(|layer| SaliencyMethod::GradCam { layer })
                .map_err(|_| Error::Config(format!("bad Grad-CAM layer '{l}'"))),
            _ => Err(Error::Config(format!("unknown saliency method '{s}'"))),
        }
    }
}

impl TryFrom<String> for SaliencyMethod {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<SaliencyMethod> for String {
    fn from(m: SaliencyMethod) -> String {
        m.to_string()
    }
}

/// Raw node scores and, when they are not all equal, their min-max
/// normalization.
#[derive(Debug, Clone, PartialEq)]
pub struct SaliencyMap {
    pub raw: Array1<f64>,
    pub normalized: Option<Array1<f64>>,
}

impl SaliencyMap {
    pub fn new(raw: Array1<f64>) -> Self {
        let (lo, hi) = min_max(raw.view());
        let normalized = (hi != lo).then(|| raw.mapv(|v| (v - lo) / (hi - lo)));
        SaliencyMap { raw, normalized }
    }

    pub fn is_degenerate(&self) -> bool {
        self.normalized.is_none()
    }
}

fn min_max(v: ArrayView1<f64>) -> (f64, f64) {
    v.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| (lo.min(x), hi.max(x)))
}

/// First index of the minimum.
fn argmin(values: ArrayView1<f64>) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v < values[best] {
            best = i;
        }
    }
    best
}

/// Salient nodes (`score > tau_u`) and non-salient nodes (`score <= tau_l`).
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct SubgraphSelection {
    pub salient: BTreeSet<usize>,
    pub nonsalient: BTreeSet<usize>,
}

impl SubgraphSelection {
    /// Thresholds `scores` without checking that both sides are non-empty.
    pub fn partition(scores: ArrayView1<f64>, tau_l: f64, tau_u: f64) -> Self {
        let salient = scores.iter().enumerate().filter(|(_, &s)| s > tau_u).map(|(i, _)| i).collect();
        let nonsalient = scores.iter().enumerate().filter(|(_, &s)| s <= tau_l).map(|(i, _)| i).collect();
        SubgraphSelection { salient, nonsalient }
    }

    pub fn is_testable(&self) -> bool {
        !self.salient.is_empty() && !self.nonsalient.is_empty()
    }
}

fn check_thresholds(tau_l: f64, tau_u: f64) -> Result<()> {
    if tau_l < tau_u {
        Ok(())
    } else {
        Err(Error::Config(format!("thresholds must satisfy tau_l < tau_u (got {tau_l}, {tau_u})")))
    }
}

pub fn select_subgraphs(s: &SaliencyMap, tau_l: f64, tau_u: f64, normalize: bool) -> Result<SubgraphSelection> {
    check_thresholds(tau_l, tau_u)?;
    let scores = if normalize {
        s.normalized.as_ref().ok_or(Error::DegenerateSaliency)?.view()
    } else {
        s.raw.view()
    };
    let sel = SubgraphSelection::partition(scores, tau_l, tau_u);
    if sel.is_testable() {
        Ok(sel)
    } else {
        Err(Error::EmptySide)
    }
}

fn relu(v: f64) -> f64 {
    if v > 0.0 {
        v
    } else {
        0.0
    }
}

pub fn cam(last_output: &Array2<f64>, classifier: &Array2<f64>, class: usize) -> SaliencyMap {
    SaliencyMap::new(last_output.dot(&classifier.column(class)).mapv(relu))
}

fn gradcam_weights(net: &Network<'_>, pre: &[Vec<Array2<f64>>], layer: usize, class: usize) -> Result<Array1<f64>> {
    check_layer(net.model(), layer)?;
    let grads = net.class_gradients(pre, class);
    Ok(grads[layer].mean_axis(Axis(0)).expect("graph has nodes"))
}

fn check_layer(model: &ModelSpec, layer: usize) -> Result<()> {
    if layer == 0 || layer > model.layer_count() {
        return Err(Error::Config(format!(
            "Grad-CAM layer must be in 1..={}, got {layer}",
            model.layer_count()
        )));
    }
    Ok(())
}

/// Saliency of the predicted class from an existing forward pass.
pub fn saliency_from_pass(
    net: &Network<'_>,
    pass: &ForwardPass,
    x: &Array2<f64>,
    method: SaliencyMethod,
) -> Result<(usize, SaliencyMap)> {
    let class = argmax(pass.logits.view());
    let model = net.model();
    let map = match method {
        SaliencyMethod::Cam => cam(pass.outputs.last().expect("non-empty"), model.classifier(), class),
        SaliencyMethod::GradCam { layer } => {
            let alpha = gradcam_weights(net, &pass.pre, layer, class)?;
            SaliencyMap::new(pass.outputs[layer - 1].dot(&alpha).mapv(relu))
        }
        SaliencyMethod::Grad => {
            let g = &net.class_gradients(&pass.pre, class)[0];
            SaliencyMap::new(g.sum_axis(Axis(1)))
        }
        SaliencyMethod::GradInput => {
            let g = &net.class_gradients(&pass.pre, class)[0];
            SaliencyMap::new((g * x).sum_axis(Axis(1)))
        }
    };
    Ok((class, map))
}

/// Forward pass plus saliency of the predicted class.
pub fn compute_saliency(
    model: &ModelSpec,
    g: &Graph,
    x: &FeatureMatrix,
    method: SaliencyMethod,
) -> Result<(usize, SaliencyMap)> {
    let net = Network::new(model, g)?;
    let pass = net.forward(x.values())?;
    saliency_from_pass(&net, &pass, x.values(), method)
}

pub fn grad_cam(model: &ModelSpec, g: &Graph, x: &FeatureMatrix, layer: usize, class: usize) -> Result<SaliencyMap> {
    let net = Network::new(model, g)?;
    let pass = net.forward(x.values())?;
    let alpha = gradcam_weights(&net, &pass.pre, layer, class)?;
    Ok(SaliencyMap::new(pass.outputs[layer - 1].dot(&alpha).mapv(relu)))
}

/// `∂y_class / ∂x`, `n x d`.
pub fn input_gradient(model: &ModelSpec, g: &Graph, x: &FeatureMatrix, class: usize) -> Result<Array2<f64>> {
    let net = Network::new(model, g)?;
    let pass = net.forward(x.values())?;
    Ok(net.class_gradients(&pass.pre, class).swap_remove(0))
}

pub fn grad(model: &ModelSpec, g: &Graph, x: &FeatureMatrix, class: usize) -> Result<SaliencyMap> {
    Ok(SaliencyMap::new(input_gradient(model, g, x, class)?.sum_axis(Axis(1))))
}

pub fn grad_input(model: &ModelSpec, g: &Graph, x: &FeatureMatrix, class: usize) -> Result<SaliencyMap> {
    let gr = input_gradient(model, g, x, class)?;
    Ok(SaliencyMap::new((gr * x.values()).sum_axis(Axis(1))))
}

/// Raw saliency `c_i + β_i r` on `valid`.
#[derive(Debug, Clone, PartialEq)]
pub struct SaliencyAffine {
    pub coef: Array1<f64>,
    pub slope: Array1<f64>,
    pub valid: PieceInterval,
}

impl SaliencyAffine {
    pub fn eval(&self, z: f64) -> Array1<f64> {
        &self.coef + &(&self.slope * z)
    }
}

fn relu_affine(coef: Array1<f64>, slope: Array1<f64>, z: f64, valid: &mut PieceInterval) -> (Array1<f64>, Array1<f64>) {
    let mut c = coef;
    let mut s = slope;
    for (u, v) in c.iter_mut().zip(s.iter_mut()) {
        if *u + *v * z > 0.0 {
            valid.require_nonneg(*u, *v);
        } else {
            valid.require_nonpos(*u, *v);
            *u = 0.0;
            *v = 0.0;
        }
    }
    (c, s)
}

/// Saliency of the predicted class along `a + b r` near `z`. The returned
/// interval keeps every ReLU sign, the predicted class and the saliency's own
/// ReLU pattern fixed.
pub fn saliency_affine(
    net: &Network<'_>,
    pass: &AffinePass,
    a: ArrayView1<f64>,
    b: ArrayView1<f64>,
    z: f64,
    method: SaliencyMethod,
) -> Result<(usize, SaliencyAffine)> {
    let (class, class_interval) = argmax_class_interval(&pass.logits, z);
    let mut valid = pass.piece.intersect(class_interval);
    let model = net.model();
    let (coef, slope) = match method {
        SaliencyMethod::Cam => {
            let last = pass.outputs.last().expect("non-empty");
            let w = model.classifier().column(class);
            relu_affine(last.offset.dot(&w), last.slope.dot(&w), z, &mut valid)
        }
        SaliencyMethod::GradCam { layer } => {
            let alpha = gradcam_weights(net, &pass.pre_at(z), layer, class)?;
            let xl = &pass.outputs[layer - 1];
            relu_affine(xl.offset.dot(&alpha), xl.slope.dot(&alpha), z, &mut valid)
        }
        SaliencyMethod::Grad => {
            let g = &net.class_gradients(&pass.pre_at(z), class)[0];
            let n = g.nrows();
            (g.sum_axis(Axis(1)), Array1::zeros(n))
        }
        SaliencyMethod::GradInput => {
            let g = &net.class_gradients(&pass.pre_at(z), class)[0];
            let (n, d) = g.dim();
            let a2 = a.to_owned().into_shape_with_order((n, d)).expect("line length");
            let b2 = b.to_owned().into_shape_with_order((n, d)).expect("line length");
            ((g * &a2).sum_axis(Axis(1)), (g * &b2).sum_axis(Axis(1)))
        }
    };
    Ok((class, SaliencyAffine { coef, slope, valid }))
}

fn ensure_contains(mut iv: PieceInterval, z: f64) -> PieceInterval {
    // guards against the last-ulp disagreement between a sign test at z and
    // the crossing point computed from the same affine form
    iv.lo = iv.lo.min(z);
    iv.hi = iv.hi.max(z);
    iv
}

/// Interval around `z` on which thresholding the raw saliency reproduces
/// `sel` (the selection at `z`).
pub fn subgraph_interval_raw(
    sa: &SaliencyAffine,
    sel: &SubgraphSelection,
    tau_l: f64,
    tau_u: f64,
    z: f64,
) -> PieceInterval {
    let mut iv = sa.valid;
    for i in 0..sa.coef.len() {
        let (c, beta) = (sa.coef[i], sa.slope[i]);
        if sel.salient.contains(&i) {
            iv.require_nonneg(c - tau_u, beta);
        } else {
            iv.require_nonpos(c - tau_u, beta);
        }
        if sel.nonsalient.contains(&i) {
            iv.require_nonpos(c - tau_l, beta);
        } else {
            iv.require_nonneg(c - tau_l, beta);
        }
    }
    ensure_contains(iv, z)
}

/// Interval around `z` on which thresholding the min-max normalized
/// saliency reproduces `sel`. The argmin node `p` and argmax node `q` at `z`
/// are held fixed, so normalized score `i` exceeds `τ` exactly when
/// `s_i(r) - ((1-τ) s_p(r) + τ s_q(r))` is positive.
pub fn subgraph_interval_normalized(
    sa: &SaliencyAffine,
    sel: &SubgraphSelection,
    tau_l: f64,
    tau_u: f64,
    z: f64,
) -> Result<PieceInterval> {
    let values = sa.eval(z);
    let p = argmin(values.view());
    let q = argmax(values.view());
    if values[p] == values[q] {
        return Err(Error::DegenerateSaliency);
    }
    let (c, beta) = (&sa.coef, &sa.slope);
    let mut iv = sa.valid;
    for i in 0..c.len() {
        iv.require_nonneg(c[i] - c[p], beta[i] - beta[p]);
        iv.require_nonneg(c[q] - c[i], beta[q] - beta[i]);
    }
    let line = |tau: f64| ((1.0 - tau) * c[p] + tau * c[q], (1.0 - tau) * beta[p] + tau * beta[q]);
    let (cu, bu) = line(tau_u);
    let (cl, bl) = line(tau_l);
    for i in 0..c.len() {
        if sel.salient.contains(&i) {
            iv.require_nonneg(c[i] - cu, beta[i] - bu);
        } else {
            iv.require_nonpos(c[i] - cu, beta[i] - bu);
        }
        if sel.nonsalient.contains(&i) {
            iv.require_nonpos(c[i] - cl, beta[i] - bl);
        } else {
            iv.require_nonneg(c[i] - cl, beta[i] - bl);
        }
    }
    Ok(ensure_contains(iv, z))
}
