//! GCN / GIN forward evaluation and exact affine propagation along a line.
//!
//! Every layer is a neighbourhood aggregation followed by one or more dense
//! blocks `H <- ReLU(H W)`:
//!
//! * GCN: aggregation `D^{-1/2} A D^{-1/2}`, a single block. With
//!   [`ModelSpec::with_self_loops`] the operator becomes
//!   `(D + I)^{-1/2} (A + I) (D + I)^{-1/2}` instead.
//! * GIN: aggregation `(1 + eps) I + A`, two blocks (the MLP).
//!
//! Node embeddings of the last layer are pooled (mean for GCN, sum for GIN)
//! and scored by a bias-free linear classifier.
//!
//! Along the line `X(z) = a + b z` every activation is affine in `z` as long
//! as no ReLU changes sign. [`forward_affine`] tracks the offsets and slopes
//! of all activations together with the interval of `z` on which the ReLU
//! sign pattern observed at the query point is unchanged.

use ndarray::{Array, Array1, Array2, ArrayView1, Axis, Dimension, Ix1, Ix2, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{FeatureMatrix, Graph, SparseMatrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Architecture {
    Gcn,
    Gin,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Pooling {
    Mean,
    Sum,
}

impl Architecture {
    pub fn pooling(self) -> Pooling {
        match self {
            Architecture::Gcn => Pooling::Mean,
            Architecture::Gin => Pooling::Sum,
        }
    }
}

impl std::fmt::Display for Architecture {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Architecture::Gcn => "gcn",
            Architecture::Gin => "gin",
        })
    }
}

impl std::str::FromStr for Architecture {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "gcn" => Ok(Architecture::Gcn),
            "gin" => Ok(Architecture::Gin),
            other => Err(Error::Config(format!("unknown architecture '{other}'"))),
        }
    }
}

/// One message-passing layer.
#[derive(Debug, Clone, PartialEq)]
pub struct GnnLayer {
    /// Dense blocks applied after aggregation, each followed by ReLU.
    pub weights: Vec<Array2<f64>>,
    /// GIN self-weight; ignored for GCN.
    pub eps: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpec {
    architecture: Architecture,
    layers: Vec<GnnLayer>,
    /// `d_L x classes`; column `c` is `w_c`.
    classifier: Array2<f64>,
    self_loops: bool,
}

impl ModelSpec {
    pub fn new(architecture: Architecture, layers: Vec<GnnLayer>, classifier: Array2<f64>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::ShapeMismatch("model needs at least one layer".into()));
        }
        let mut width = layers[0]
            .weights
            .first()
            .ok_or_else(|| Error::ShapeMismatch("layer 0 has no weights".into()))?
            .nrows();
        for (l, layer) in layers.iter().enumerate() {
            let expected_blocks = match architecture {
                Architecture::Gcn => layer.weights.len() == 1,
                Architecture::Gin => !layer.weights.is_empty(),
            };
            if !expected_blocks {
                return Err(Error::ShapeMismatch(format!(
                    "{architecture} layer {l} has {} weight matrices",
                    layer.weights.len()
                )));
            }
            for w in &layer.weights {
                if w.nrows() != width {
                    return Err(Error::ShapeMismatch(format!(
                        "layer {l}: weight has {} rows, incoming width is {width}",
                        w.nrows()
                    )));
                }
                width = w.ncols();
            }
            if !layer.eps.is_finite() {
                return Err(Error::ShapeMismatch(format!("layer {l}: eps is not finite")));
            }
        }
        if classifier.nrows() != width {
            return Err(Error::ShapeMismatch(format!(
                "classifier has {} rows, embedding width is {width}",
                classifier.nrows()
            )));
        }
        if classifier.ncols() < 2 {
            return Err(Error::ShapeMismatch("classifier needs at least two classes".into()));
        }
        Ok(ModelSpec { architecture, layers, classifier, self_loops: false })
    }

    /// GCN propagation over `A + I`. No effect on GIN, which always keeps
    /// its own self term.
    pub fn with_self_loops(mut self, on: bool) -> Self {
        self.self_loops = on && self.architecture == Architecture::Gcn;
        self
    }

    pub fn self_loops(&self) -> bool {
        self.self_loops
    }

    pub fn architecture(&self) -> Architecture {
        self.architecture
    }

    pub fn layers(&self) -> &[GnnLayer] {
        &self.layers
    }

    pub fn classifier(&self) -> &Array2<f64> {
        &self.classifier
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].weights[0].nrows()
    }

    pub fn class_count(&self) -> usize {
        self.classifier.ncols()
    }

    pub fn layer_count(&self) -> usize {
        self.layers.len()
    }

    /// Sparse aggregation operator of every layer on `g`.
    pub fn aggregators(&self, g: &Graph) -> Result<Vec<SparseMatrix>> {
        match self.architecture {
            Architecture::Gcn => {
                let a = if self.self_loops { g.renormalized_operator() } else { g.normalized_operator()? };
                Ok(vec![a; self.layers.len()])
            }
            Architecture::Gin => Ok(self.layers.iter().map(|l| g.sum_operator(l.eps)).collect()),
        }
    }
}

/// A model bound to a graph; aggregation operators are built once.
#[derive(Debug, Clone)]
pub struct Network<'a> {
    model: &'a ModelSpec,
    aggregators: Vec<SparseMatrix>,
}

/// All intermediate values of a forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardPass {
    /// Pre-activations of every dense block, grouped by layer.
    pub pre: Vec<Vec<Array2<f64>>>,
    /// Layer outputs `X_1 .. X_L`.
    pub outputs: Vec<Array2<f64>>,
    pub pooled: Array1<f64>,
    pub logits: Array1<f64>,
}

/// Closed interval of the line parameter; endpoints may be infinite.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PieceInterval {
    pub lo: f64,
    pub hi: f64,
}

impl PieceInterval {
    pub const FULL: PieceInterval = PieceInterval { lo: f64::NEG_INFINITY, hi: f64::INFINITY };

    pub fn new(lo: f64, hi: f64) -> Self {
        PieceInterval { lo, hi }
    }

    pub fn intersect(self, other: PieceInterval) -> PieceInterval {
        PieceInterval { lo: self.lo.max(other.lo), hi: self.hi.min(other.hi) }
    }

    pub fn contains(&self, z: f64) -> bool {
        self.lo <= z && z <= self.hi
    }

    pub fn width(&self) -> f64 {
        self.hi - self.lo
    }

    /// Restricts to `{r : u + v r >= 0}`. Constant constraints (`v == 0`)
    /// leave the interval unchanged.
    pub fn require_nonneg(&mut self, u: f64, v: f64) {
        if v > 0.0 {
            self.lo = self.lo.max(-u / v);
        } else if v < 0.0 {
            self.hi = self.hi.min(-u / v);
        }
    }

    /// Restricts to `{r : u + v r <= 0}`.
    pub fn require_nonpos(&mut self, u: f64, v: f64) {
        self.require_nonneg(-u, -v);
    }
}

/// `offset + slope · z`, elementwise.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineTensor<D: Dimension> {
    pub offset: Array<f64, D>,
    pub slope: Array<f64, D>,
}

pub type AffineMatrix = AffineTensor<Ix2>;
pub type AffineVector = AffineTensor<Ix1>;

impl<D: Dimension> AffineTensor<D> {
    pub fn eval(&self, z: f64) -> Array<f64, D> {
        let mut out = self.offset.clone();
        Zip::from(&mut out).and(&self.slope).for_each(|o, &s| *o += s * z);
        out
    }
}

impl AffineMatrix {
    fn map_linear(&self, f: impl Fn(&Array2<f64>) -> Array2<f64>) -> AffineMatrix {
        AffineTensor { offset: f(&self.offset), slope: f(&self.slope) }
    }

    /// ReLU with the sign pattern fixed at `z`; zero pre-activation counts as
    /// inactive. The piece is shrunk to where that pattern holds.
    fn relu_at(&self, z: f64, piece: &mut PieceInterval) -> AffineMatrix {
        let mut offset = self.offset.clone();
        let mut slope = self.slope.clone();
        Zip::from(&mut offset).and(&mut slope).for_each(|u, v| {
            if *u + *v * z > 0.0 {
                piece.require_nonneg(*u, *v);
            } else {
                piece.require_nonpos(*u, *v);
                *u = 0.0;
                *v = 0.0;
            }
        });
        AffineTensor { offset, slope }
    }
}

/// Affine counterpart of [`ForwardPass`] on one piece of the line.
#[derive(Debug, Clone, PartialEq)]
pub struct AffinePass {
    pub pre: Vec<Vec<AffineMatrix>>,
    pub outputs: Vec<AffineMatrix>,
    pub pooled: AffineVector,
    pub logits: AffineVector,
    /// Interval on which every ReLU keeps the sign it has at the query point.
    pub piece: PieceInterval,
}

impl AffinePass {
    /// Pre-activations evaluated at `z`; these determine the ReLU masks.
    pub fn pre_at(&self, z: f64) -> Vec<Vec<Array2<f64>>> {
        self.pre.iter().map(|blocks| blocks.iter().map(|t| t.eval(z)).collect()).collect()
    }
}

impl<'a> Network<'a> {
    pub fn new(model: &'a ModelSpec, g: &Graph) -> Result<Self> {
        Ok(Network { model, aggregators: model.aggregators(g)? })
    }

    pub fn model(&self) -> &ModelSpec {
        self.model
    }

    pub fn node_count(&self) -> usize {
        self.aggregators[0].dim()
    }

    fn check_input(&self, x: &Array2<f64>) -> Result<()> {
        let expected = (self.node_count(), self.model.input_dim());
        if x.dim() != expected {
            return Err(Error::DimensionMismatch(format!(
                "features are {:?}, model expects {:?}",
                x.dim(),
                expected
            )));
        }
        Ok(())
    }

    fn pool(&self, h: &Array2<f64>) -> Array1<f64> {
        let s = h.sum_axis(Axis(0));
        match self.model.architecture.pooling() {
            Pooling::Sum => s,
            Pooling::Mean => s / h.nrows() as f64,
        }
    }

    pub fn forward(&self, x: &Array2<f64>) -> Result<ForwardPass> {
        self.check_input(x)?;
        let mut h = x.clone();
        let mut pre = Vec::with_capacity(self.model.layers.len());
        let mut outputs = Vec::with_capacity(self.model.layers.len());
        for (layer, agg) in self.model.layers.iter().zip(&self.aggregators) {
            h = agg.apply(&h);
            let mut block_pre = Vec::with_capacity(layer.weights.len());
            for w in &layer.weights {
                let p = h.dot(w);
                h = p.mapv(|v| if v > 0.0 { v } else { 0.0 });
                block_pre.push(p);
            }
            pre.push(block_pre);
            outputs.push(h.clone());
        }
        let pooled = self.pool(&h);
        let logits = pooled.dot(&self.model.classifier);
        Ok(ForwardPass { pre, outputs, pooled, logits })
    }

    pub fn forward_affine(&self, a: ArrayView1<f64>, b: ArrayView1<f64>, z: f64) -> Result<AffinePass> {
        let (n, d) = (self.node_count(), self.model.input_dim());
        if a.len() != n * d || b.len() != n * d {
            return Err(Error::DimensionMismatch(format!(
                "line vectors have lengths {} and {}, expected {}",
                a.len(),
                b.len(),
                n * d
            )));
        }
        let reshape = |v: ArrayView1<f64>| v.to_owned().into_shape_with_order((n, d)).expect("length checked");
        let mut h = AffineTensor { offset: reshape(a), slope: reshape(b) };
        let mut piece = PieceInterval::FULL;
        let mut pre = Vec::with_capacity(self.model.layers.len());
        let mut outputs = Vec::with_capacity(self.model.layers.len());
        for (layer, agg) in self.model.layers.iter().zip(&self.aggregators) {
            h = h.map_linear(|m| agg.apply(m));
            let mut block_pre = Vec::with_capacity(layer.weights.len());
            for w in &layer.weights {
                let p = h.map_linear(|m| m.dot(w));
                h = p.relu_at(z, &mut piece);
                block_pre.push(p);
            }
            pre.push(block_pre);
            outputs.push(h.clone());
        }
        let pooled = AffineTensor { offset: self.pool(&h.offset), slope: self.pool(&h.slope) };
        let logits = AffineTensor {
            offset: pooled.offset.dot(&self.model.classifier),
            slope: pooled.slope.dot(&self.model.classifier),
        };
        Ok(AffinePass { pre, outputs, pooled, logits, piece })
    }

    /// Gradients of logit `class` with respect to the input (index 0) and
    /// every layer output (index `l` for `X_l`), with the ReLU masks implied
    /// by `pre` held fixed.
    pub fn class_gradients(&self, pre: &[Vec<Array2<f64>>], class: usize) -> Vec<Array2<f64>> {
        let n = self.node_count();
        let w_c = self.model.classifier.column(class);
        let scale = match self.model.architecture.pooling() {
            Pooling::Mean => 1.0 / n as f64,
            Pooling::Sum => 1.0,
        };
        let mut grad = Array2::from_shape_fn((n, w_c.len()), |(_, k)| w_c[k] * scale);
        let mut grads = vec![grad.clone()];
        for l in (0..self.model.layers.len()).rev() {
            let layer = &self.model.layers[l];
            for (w, p) in layer.weights.iter().zip(&pre[l]).rev() {
                Zip::from(&mut grad).and(p).for_each(|g, &v| {
                    if v <= 0.0 {
                        *g = 0.0;
                    }
                });
                grad = grad.dot(&w.t());
            }
            // aggregation operators are symmetric
            grad = self.aggregators[l].apply(&grad);
            grads.push(grad.clone());
        }
        grads.reverse();
        grads
    }
}

pub fn forward(model: &ModelSpec, g: &Graph, x: &FeatureMatrix) -> Result<ForwardPass> {
    Network::new(model, g)?.forward(x.values())
}

pub fn forward_affine(
    model: &ModelSpec,
    g: &Graph,
    a: ArrayView1<f64>,
    b: ArrayView1<f64>,
    z: f64,
) -> Result<AffinePass> {
    Network::new(model, g)?.forward_affine(a, b, z)
}

/// First index of the maximum.
pub fn argmax(values: ArrayView1<f64>) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Predicted class at `z` and the interval on which it stays the argmax.
pub fn argmax_class_interval(logits: &AffineVector, z: f64) -> (usize, PieceInterval) {
    let values = logits.eval(z);
    let class = argmax(values.view());
    let mut interval = PieceInterval::FULL;
    for other in 0..values.len() {
        if other != class {
            interval.require_nonneg(
                logits.offset[class] - logits.offset[other],
                logits.slope[class] - logits.slope[other],
            );
        }
    }
    (class, interval)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn toy_gcn() -> ModelSpec {
        ModelSpec::new(
            Architecture::Gcn,
            vec![GnnLayer { weights: vec![array![[1.0, -1.0], [0.5, 2.0]]], eps: 0.0 }],
            array![[1.0, 0.0], [0.0, 1.0]],
        )
        .unwrap()
    }

    #[test]
    fn zero_features_give_zero_everything() {
        let g = Graph::from_edges(3, &[(0, 1), (1, 2)]).unwrap();
        let x = FeatureMatrix::new(Array2::zeros((3, 2))).unwrap();
        let out = forward(&toy_gcn(), &g, &x).unwrap();
        assert!(out.outputs.iter().all(|o| o.iter().all(|&v| v == 0.0)));
        assert!(out.logits.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_node_gcn_is_isolated() {
        let model = ModelSpec::new(
            Architecture::Gcn,
            vec![GnnLayer { weights: vec![Array2::eye(2)], eps: 0.0 }],
            Array2::eye(2),
        )
        .unwrap();
        let g = Graph::from_edges(1, &[]).unwrap();
        let x = FeatureMatrix::new(array![[1.0, 2.0]]).unwrap();
        assert_eq!(forward(&model, &g, &x), Err(Error::IsolatedNode(0)));
    }

    #[test]
    fn model_shape_validation() {
        let bad_chain = ModelSpec::new(
            Architecture::Gcn,
            vec![
                GnnLayer { weights: vec![Array2::zeros((2, 3))], eps: 0.0 },
                GnnLayer { weights: vec![Array2::zeros((4, 3))], eps: 0.0 },
            ],
            Array2::zeros((3, 2)),
        );
        assert!(matches!(bad_chain, Err(Error::ShapeMismatch(_))));
        let one_class =
            ModelSpec::new(Architecture::Gcn, vec![GnnLayer { weights: vec![Array2::eye(2)], eps: 0.0 }], Array2::zeros((2, 1)));
        assert!(matches!(one_class, Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn constant_line_has_unbounded_piece() {
        let g = Graph::from_edges(3, &[(0, 1), (1, 2)]).unwrap();
        let a = array![0.3, -0.2, 1.0, 0.5, -1.0, 0.1];
        let b = Array1::zeros(6);
        let pass = forward_affine(&toy_gcn(), &g, a.view(), b.view(), 0.7).unwrap();
        assert_eq!(pass.piece, PieceInterval::FULL);
        assert!(pass.outputs.iter().all(|o| o.slope.iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn single_relu_unit_piece() {
        // two nodes, one feature, identity weight: pre-activation of node 0 is z
        let model = ModelSpec::new(
            Architecture::Gcn,
            vec![GnnLayer { weights: vec![array![[1.0]]], eps: 0.0 }],
            array![[1.0, -1.0]],
        )
        .unwrap();
        let g = Graph::from_edges(2, &[(0, 1)]).unwrap();
        // aggregation swaps the nodes, so put the line on node 1
        let a = array![-1.0, 0.0];
        let b = array![0.0, 1.0];
        let pass = forward_affine(&model, &g, a.view(), b.view(), 1.0).unwrap();
        assert_eq!(pass.piece, PieceInterval::new(0.0, f64::INFINITY));
    }

    #[test]
    fn argmax_constant_logits() {
        let logits = AffineTensor { offset: array![1.0, 0.0], slope: array![0.0, 0.0] };
        assert_eq!(argmax_class_interval(&logits, 3.0), (0, PieceInterval::FULL));
    }

    #[test]
    fn argmax_crossing_at_half() {
        let logits = AffineTensor { offset: array![0.0, 1.0], slope: array![1.0, -1.0] };
        assert_eq!(argmax_class_interval(&logits, 1.0), (0, PieceInterval::new(0.5, f64::INFINITY)));
        assert_eq!(argmax_class_interval(&logits, 0.0), (1, PieceInterval::new(f64::NEG_INFINITY, 0.5)));
    }

    #[test]
    fn interval_constraints() {
        let mut p = PieceInterval::FULL;
        p.require_nonneg(1.0, 2.0); // r >= -0.5
        p.require_nonpos(-3.0, 1.0); // r <= 3
        p.require_nonneg(-5.0, 0.0); // constant: ignored
        assert_eq!(p, PieceInterval::new(-0.5, 3.0));
        assert!(p.contains(0.0) && !p.contains(3.5));
    }
}
