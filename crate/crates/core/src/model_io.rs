//! Weight files and random initialization.
//!
//! A weight file is JSON:
//!
//! ```json
//! {
//!   "format_version": 1,
//!   "architecture": "gcn",
//!   "layers": [
//!     { "eps": "0.0000000000000000e0",
//!       "weights": [ { "shape": [5, 10], "data": ["…", …] } ] }
//!   ],
//!   "classifier": { "shape": [10, 2], "data": ["…", …] },
//!   "self_loops": false,
//!   "metadata": { "hidden_sizes": [10, 10, 10], "class_count": 2 }
//! }
//! ```
//!
//! Matrices are row-major. GCN layers hold one weight matrix, GIN layers one
//! per MLP block. Floats are written as 17-significant-digit strings; plain
//! numbers are accepted when reading. Unknown metadata keys are preserved.
//! `self_loops` only affects GCN and defaults to false when missing.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::Array2;
use rand::distr::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gnn::{Architecture, GnnLayer, ModelSpec};

pub const WEIGHT_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatrixRecord {
    pub shape: [usize; 2],
    #[serde(with = "crate::codec::float_vec")]
    pub data: Vec<f64>,
}

impl MatrixRecord {
    pub fn from_array(m: &Array2<f64>) -> Self {
        MatrixRecord { shape: [m.nrows(), m.ncols()], data: m.iter().copied().collect() }
    }

    pub fn to_array(&self, what: &str) -> Result<Array2<f64>> {
        let [r, c] = self.shape;
        if self.data.len() != r * c {
            return Err(Error::ShapeMismatch(format!("{what}: shape {r}x{c} but {} values", self.data.len())));
        }
        if let Some(bad) = self.data.iter().find(|v| !v.is_finite()) {
            return Err(Error::Parse(format!("{what}: non-finite value {bad}")));
        }
        Ok(Array2::from_shape_vec((r, c), self.data.clone()).expect("length checked"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerRecord {
    #[serde(with = "crate::codec::float", default)]
    pub eps: f64,
    pub weights: Vec<MatrixRecord>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct WeightMetadata {
    #[serde(default)]
    pub hidden_sizes: Vec<usize>,
    #[serde(default)]
    pub class_count: usize,
    #[serde(flatten)]
    pub extra: BTreeMap<String, serde_json::Value>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightFile {
    pub format_version: u32,
    pub architecture: Architecture,
    pub layers: Vec<LayerRecord>,
    pub classifier: MatrixRecord,
    /// GCN propagation over `A + I`; absent means false.
    #[serde(default)]
    pub self_loops: bool,
    #[serde(default)]
    pub metadata: WeightMetadata,
}

impl WeightFile {
    pub fn from_model(model: &ModelSpec) -> Self {
        let layers: Vec<LayerRecord> = model
            .layers()
            .iter()
            .map(|l| LayerRecord { eps: l.eps, weights: l.weights.iter().map(MatrixRecord::from_array).collect() })
            .collect();
        let hidden_sizes = model.layers().iter().map(|l| l.weights.last().map_or(0, |w| w.ncols())).collect();
        WeightFile {
            format_version: WEIGHT_FORMAT_VERSION,
            architecture: model.architecture(),
            layers,
            classifier: MatrixRecord::from_array(model.classifier()),
            self_loops: model.self_loops(),
            metadata: WeightMetadata { hidden_sizes, class_count: model.class_count(), extra: BTreeMap::new() },
        }
    }

    pub fn to_model(&self) -> Result<ModelSpec> {
        if self.format_version != WEIGHT_FORMAT_VERSION {
            return Err(Error::VersionMismatch { found: self.format_version, expected: WEIGHT_FORMAT_VERSION });
        }
        let layers = self
            .layers
            .iter()
            .enumerate()
            .map(|(l, rec)| {
                let weights = rec
                    .weights
                    .iter()
                    .enumerate()
                    .map(|(k, m)| m.to_array(&format!("layer {l} block {k}")))
                    .collect::<Result<Vec<_>>>()?;
                Ok(GnnLayer { weights, eps: rec.eps })
            })
            .collect::<Result<Vec<_>>>()?;
        let classifier = self.classifier.to_array("classifier")?;
        Ok(ModelSpec::new(self.architecture, layers, classifier)?.with_self_loops(self.self_loops))
    }
}

pub fn parse_model(text: &str) -> Result<ModelSpec> {
    let file: WeightFile = serde_json::from_str(text)?;
    file.to_model()
}

pub fn load_model(path: impl AsRef<Path>) -> Result<ModelSpec> {
    parse_model(&std::fs::read_to_string(path)?)
}

pub fn save_model(model: &ModelSpec, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(&WeightFile::from_model(model))?)?;
    Ok(())
}

/// Layer widths of a model to initialize.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    pub input: usize,
    /// Output widths of the dense blocks of each layer.
    pub layers: Vec<Vec<usize>>,
    pub classes: usize,
}

impl ModelDims {
    /// One block per layer.
    pub fn gcn(input: usize, hidden: &[usize], classes: usize) -> Self {
        ModelDims { input, layers: hidden.iter().map(|&h| vec![h]).collect(), classes }
    }

    /// `depth` layers sharing the MLP widths `mlp`.
    pub fn gin(input: usize, depth: usize, mlp: &[usize], classes: usize) -> Self {
        ModelDims { input, layers: vec![mlp.to_vec(); depth], classes }
    }
}

fn glorot<R: rand::Rng>(rows: usize, cols: usize, rng: &mut R) -> Array2<f64> {
    let s = (6.0 / (rows + cols) as f64).sqrt();
    let dist = Uniform::new_inclusive(-s, s).expect("finite bounds");
    let data: Vec<f64> = (0..rows * cols).map(|_| dist.sample(rng)).collect();
    Array2::from_shape_vec((rows, cols), data).expect("sized")
}

/// Glorot-uniform weights drawn from a ChaCha20 stream in layer, block,
/// row-major order, classifier last. GIN `eps` is 0.
pub fn random_model(architecture: Architecture, dims: &ModelDims, seed: u64) -> Result<ModelSpec> {
    if dims.classes < 2 {
        return Err(Error::ShapeMismatch("classifier needs at least two classes".into()));
    }
    if dims.input == 0 || dims.layers.iter().flatten().any(|&w| w == 0) {
        return Err(Error::ShapeMismatch("zero-width layer".into()));
    }
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut width = dims.input;
    let mut layers = Vec::with_capacity(dims.layers.len());
    for blocks in &dims.layers {
        let mut weights = Vec::with_capacity(blocks.len());
        for &out in blocks {
            weights.push(glorot(width, out, &mut rng));
            width = out;
        }
        layers.push(GnnLayer { weights, eps: 0.0 });
    }
    let classifier = glorot(width, dims.classes, &mut rng);
    ModelSpec::new(architecture, layers, classifier)
}
