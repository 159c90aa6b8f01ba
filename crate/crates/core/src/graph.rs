//! Graph and feature containers.
//!
//! Features are vectorized node-major everywhere in this crate:
//! `vec(X) = (x_1, ..., x_n)` where `x_v` is row `v` of the `n x d` feature
//! matrix. For a row-major `Array2` this is simply the flattened storage
//! order, and the Kronecker covariance `space ⊗ feature` acts on it as
//! `X -> space · X · featureᵀ`.

use std::collections::{BTreeSet, VecDeque};
use std::path::Path;

use nalgebra::DMatrix;
use ndarray::{Array1, Array2, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model_io::MatrixRecord;

/// Undirected simple graph without self-loops.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Graph {
    n: usize,
    neighbors: Vec<Vec<usize>>,
}

impl Graph {
    /// Builds a graph from an undirected edge list. Duplicate edges are
    /// collapsed; self-loops are rejected.
    pub fn from_edges(n: usize, edges: &[(usize, usize)]) -> Result<Self> {
        if n == 0 {
            return Err(Error::InvalidGraph("graph must have at least one node".into()));
        }
        let mut sets = vec![BTreeSet::new(); n];
        for &(i, j) in edges {
            if i >= n || j >= n {
                return Err(Error::InvalidGraph(format!("edge ({i}, {j}) out of range for n = {n}")));
            }
            if i == j {
                return Err(Error::InvalidGraph(format!("self-loop at node {i}")));
            }
            sets[i].insert(j);
            sets[j].insert(i);
        }
        let neighbors = sets.into_iter().map(|s| s.into_iter().collect()).collect();
        Ok(Graph { n, neighbors })
    }

    /// Builds a graph from a dense 0/1 adjacency matrix.
    pub fn from_adjacency(adjacency: &Array2<f64>) -> Result<Self> {
        let (r, c) = adjacency.dim();
        if r != c {
            return Err(Error::DimensionMismatch(format!("adjacency is {r}x{c}")));
        }
        let mut edges = Vec::new();
        for i in 0..r {
            for j in 0..r {
                let a = adjacency[[i, j]];
                if a != 0.0 && a != 1.0 {
                    return Err(Error::InvalidGraph(format!("entry ({i}, {j}) = {a} is not 0/1")));
                }
                if a != adjacency[[j, i]] {
                    return Err(Error::InvalidGraph("adjacency is not symmetric".into()));
                }
                if i == j && a != 0.0 {
                    return Err(Error::InvalidGraph(format!("self-loop at node {i}")));
                }
                if i < j && a == 1.0 {
                    edges.push((i, j));
                }
            }
        }
        Graph::from_edges(r, &edges)
    }

    pub fn node_count(&self) -> usize {
        self.n
    }

    pub fn neighbors(&self, v: usize) -> &[usize] {
        &self.neighbors[v]
    }

    pub fn degree(&self, v: usize) -> usize {
        self.neighbors[v].len()
    }

    pub fn edge_count(&self) -> usize {
        self.neighbors.iter().map(Vec::len).sum::<usize>() / 2
    }

    /// Edges as `(i, j)` pairs with `i < j`, in lexicographic order.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::with_capacity(self.edge_count());
        for (i, nb) in self.neighbors.iter().enumerate() {
            out.extend(nb.iter().filter(|&&j| j > i).map(|&j| (i, j)));
        }
        out
    }

    pub fn adjacency(&self) -> Array2<f64> {
        let mut a = Array2::zeros((self.n, self.n));
        for (i, nb) in self.neighbors.iter().enumerate() {
            for &j in nb {
                a[[i, j]] = 1.0;
            }
        }
        a
    }

    fn check_no_isolated(&self) -> Result<()> {
        match (0..self.n).find(|&v| self.degree(v) == 0) {
            Some(v) => Err(Error::IsolatedNode(v)),
            None => Ok(()),
        }
    }

    /// `D^{-1/2} A D^{-1/2}` in sparse form.
    pub fn normalized_operator(&self) -> Result<SparseMatrix> {
        self.check_no_isolated()?;
        let inv_sqrt: Vec<f64> = (0..self.n).map(|v| 1.0 / (self.degree(v) as f64).sqrt()).collect();
        let rows = self
            .neighbors
            .iter()
            .enumerate()
            .map(|(i, nb)| nb.iter().map(|&j| (j, inv_sqrt[i] * inv_sqrt[j])).collect())
            .collect();
        Ok(SparseMatrix { rows })
    }

    /// `D'^{-1/2} (A + I) D'^{-1/2}` with `D' = D + I`; defined for every
    /// graph.
    pub fn renormalized_operator(&self) -> SparseMatrix {
        let inv_sqrt: Vec<f64> = (0..self.n).map(|v| 1.0 / (self.degree(v) as f64 + 1.0).sqrt()).collect();
        let rows = self
            .neighbors
            .iter()
            .enumerate()
            .map(|(i, nb)| {
                let mut row: Vec<(usize, f64)> = nb.iter().map(|&j| (j, inv_sqrt[i] * inv_sqrt[j])).collect();
                row.push((i, inv_sqrt[i] * inv_sqrt[i]));
                row.sort_by_key(|e| e.0);
                row
            })
            .collect();
        SparseMatrix { rows }
    }

    /// `(1 + eps) I + A`, the GIN sum aggregation.
    pub fn sum_operator(&self, eps: f64) -> SparseMatrix {
        let rows = self
            .neighbors
            .iter()
            .enumerate()
            .map(|(i, nb)| {
                let mut row: Vec<(usize, f64)> = nb.iter().map(|&j| (j, 1.0)).collect();
                row.push((i, 1.0 + eps));
                row.sort_by_key(|e| e.0);
                row
            })
            .collect();
        SparseMatrix { rows }
    }

    /// All-pairs shortest path lengths by BFS; `None` for unreachable pairs.
    pub fn shortest_paths(&self) -> Vec<Vec<Option<usize>>> {
        (0..self.n)
            .map(|src| {
                let mut dist = vec![None; self.n];
                dist[src] = Some(0);
                let mut queue = VecDeque::from([src]);
                while let Some(u) = queue.pop_front() {
                    let du = dist[u].unwrap();
                    for &w in &self.neighbors[u] {
                        if dist[w].is_none() {
                            dist[w] = Some(du + 1);
                            queue.push_back(w);
                        }
                    }
                }
                dist
            })
            .collect()
    }

    pub fn is_connected(&self) -> bool {
        self.shortest_paths()[0].iter().all(Option::is_some)
    }
}

/// `D^{-1/2} A D^{-1/2}` as a dense matrix.
pub fn normalize_adjacency(g: &Graph) -> Result<Array2<f64>> {
    Ok(g.normalized_operator()?.to_dense(g.node_count()))
}

/// Row-compressed square matrix used for neighbourhood aggregation.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseMatrix {
    rows: Vec<Vec<(usize, f64)>>,
}

impl SparseMatrix {
    pub fn dim(&self) -> usize {
        self.rows.len()
    }

    /// `self · h` for an `n x w` matrix `h`.
    pub fn apply(&self, h: &Array2<f64>) -> Array2<f64> {
        let w = h.ncols();
        let mut out = Array2::zeros((self.rows.len(), w));
        for (i, row) in self.rows.iter().enumerate() {
            let mut acc = out.row_mut(i);
            for &(j, a) in row {
                acc.scaled_add(a, &h.row(j));
            }
        }
        out
    }

    pub fn to_dense(&self, n: usize) -> Array2<f64> {
        let mut a = Array2::zeros((n, n));
        for (i, row) in self.rows.iter().enumerate() {
            for &(j, v) in row {
                a[[i, j]] = v;
            }
        }
        a
    }
}

/// Node feature matrix, `n x d`, rows are nodes.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix(Array2<f64>);

impl FeatureMatrix {
    pub fn new(values: Array2<f64>) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidGraph("feature matrix has non-finite entries".into()));
        }
        Ok(FeatureMatrix(values))
    }

    /// Inverse of [`FeatureMatrix::to_vec`]: node-major vector of length `n·d`.
    pub fn from_vec(v: ArrayView1<f64>, n: usize, d: usize) -> Result<Self> {
        if v.len() != n * d {
            return Err(Error::DimensionMismatch(format!("vector of length {} is not {n}x{d}", v.len())));
        }
        let values = Array2::from_shape_vec((n, d), v.to_vec()).expect("length checked");
        FeatureMatrix::new(values)
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.0
    }

    pub fn into_inner(self) -> Array2<f64> {
        self.0
    }

    pub fn node_count(&self) -> usize {
        self.0.nrows()
    }

    pub fn dim(&self) -> usize {
        self.0.ncols()
    }

    pub fn to_vec(&self) -> Array1<f64> {
        self.0.iter().copied().collect()
    }
}

/// Noise covariance of the node-major feature vector.
#[derive(Debug, Clone, PartialEq)]
pub enum CovarianceModel {
    Dense(Array2<f64>),
    /// `space ⊗ feature`.
    Kronecker { space: Array2<f64>, feature: Array2<f64> },
}

impl CovarianceModel {
    pub fn identity(n: usize, d: usize) -> Self {
        CovarianceModel::Kronecker { space: Array2::eye(n), feature: Array2::eye(d) }
    }

    /// Side length `n·d` of the full matrix.
    pub fn dim(&self) -> usize {
        match self {
            CovarianceModel::Dense(m) => m.nrows(),
            CovarianceModel::Kronecker { space, feature } => space.nrows() * feature.nrows(),
        }
    }

    pub fn materialize(&self) -> Array2<f64> {
        match self {
            CovarianceModel::Dense(m) => m.clone(),
            CovarianceModel::Kronecker { space, feature } => kron(space, feature),
        }
    }

    /// `Σ v` without materializing Kronecker products.
    pub fn matvec(&self, v: ArrayView1<f64>) -> Result<Array1<f64>> {
        if v.len() != self.dim() {
            return Err(Error::DimensionMismatch(format!(
                "covariance of size {} applied to vector of length {}",
                self.dim(),
                v.len()
            )));
        }
        Ok(match self {
            CovarianceModel::Dense(m) => m.dot(&v),
            CovarianceModel::Kronecker { space, feature } => {
                let x = v
                    .to_owned()
                    .into_shape_with_order((space.nrows(), feature.nrows()))
                    .expect("length checked");
                let y = space.dot(&x).dot(&feature.t());
                y.into_iter().collect()
            }
        })
    }

    /// `c · Σ`.
    pub fn scaled(&self, c: f64) -> Self {
        match self {
            CovarianceModel::Dense(m) => CovarianceModel::Dense(m * c),
            CovarianceModel::Kronecker { space, feature } => {
                CovarianceModel::Kronecker { space: space * c, feature: feature.clone() }
            }
        }
    }

    /// Lower Cholesky factor, kept factor-wise for Kronecker models.
    pub fn cholesky(&self) -> Result<CholeskyFactor> {
        Ok(match self {
            CovarianceModel::Dense(m) => CholeskyFactor::Dense(lower_cholesky(m)?),
            CovarianceModel::Kronecker { space, feature } => CholeskyFactor::Kronecker {
                space: lower_cholesky(space)?,
                feature: lower_cholesky(feature)?,
            },
        })
    }
}

/// Lower-triangular factor `L` with `L Lᵀ = Σ`.
#[derive(Debug, Clone, PartialEq)]
pub enum CholeskyFactor {
    Dense(Array2<f64>),
    Kronecker { space: Array2<f64>, feature: Array2<f64> },
}

impl CholeskyFactor {
    /// `L ν` for a node-major vector `ν`.
    pub fn color(&self, nu: ArrayView1<f64>) -> Array1<f64> {
        match self {
            CholeskyFactor::Dense(l) => l.dot(&nu),
            CholeskyFactor::Kronecker { space, feature } => {
                let x = nu
                    .to_owned()
                    .into_shape_with_order((space.nrows(), feature.nrows()))
                    .expect("noise vector length must be n·d");
                space.dot(&x).dot(&feature.t()).into_iter().collect()
            }
        }
    }
}

pub(crate) fn to_nalgebra(m: &Array2<f64>) -> DMatrix<f64> {
    DMatrix::from_fn(m.nrows(), m.ncols(), |i, j| m[[i, j]])
}

pub(crate) fn from_nalgebra(m: &DMatrix<f64>) -> Array2<f64> {
    Array2::from_shape_fn((m.nrows(), m.ncols()), |(i, j)| m[(i, j)])
}

fn lower_cholesky(m: &Array2<f64>) -> Result<Array2<f64>> {
    let chol = nalgebra::Cholesky::new(to_nalgebra(m)).ok_or(Error::CholeskyFailure)?;
    Ok(from_nalgebra(&chol.l()))
}

pub fn kron(a: &Array2<f64>, b: &Array2<f64>) -> Array2<f64> {
    let (ar, ac) = a.dim();
    let (br, bc) = b.dim();
    Array2::from_shape_fn((ar * br, ac * bc), |(i, j)| a[[i / br, j / bc]] * b[[i % br, j % bc]])
}

/// Sensors on a fixed adjacency, each time series cut into equal segments.
#[derive(Debug, Clone, PartialEq)]
pub struct SpatioTemporalLayout {
    pub sensor_count: usize,
    pub sensor_adjacency: Array2<f64>,
    pub segment_count: usize,
    pub segment_length: usize,
}

/// One node per (sensor, segment), indexed `s·segment_count + t`. Nodes are
/// joined along time within a sensor and across adjacent sensors at equal
/// time. Segment samples become node features without any rescaling.
pub fn build_spatiotemporal_graph(
    layout: &SpatioTemporalLayout,
    series: &Array2<f64>,
) -> Result<(Graph, FeatureMatrix)> {
    let (sensors, width) = series.dim();
    let segs = layout.segment_count;
    if sensors != layout.sensor_count || layout.sensor_adjacency.dim() != (sensors, sensors) {
        return Err(Error::DimensionMismatch(format!(
            "series has {sensors} rows, layout declares {} sensors",
            layout.sensor_count
        )));
    }
    if segs == 0 || width % segs != 0 || width / segs != layout.segment_length || layout.segment_length == 0 {
        return Err(Error::DimensionMismatch(format!(
            "series width {width} is not {segs} segments of length {}",
            layout.segment_length
        )));
    }
    let len = layout.segment_length;
    let node = |s: usize, t: usize| s * segs + t;
    let mut edges = Vec::new();
    for s in 0..sensors {
        for t in 0..segs.saturating_sub(1) {
            edges.push((node(s, t), node(s, t + 1)));
        }
        for s2 in (s + 1)..sensors {
            if layout.sensor_adjacency[[s, s2]] != 0.0 {
                edges.extend((0..segs).map(|t| (node(s, t), node(s2, t))));
            }
        }
    }
    let g = Graph::from_edges(sensors * segs, &edges)?;
    let features = Array2::from_shape_fn((sensors * segs, len), |(v, k)| {
        let (s, t) = (v / segs, v % segs);
        series[[s, t * len + k]]
    });
    Ok((g, FeatureMatrix::new(features)?))
}

pub const GRAPH_FORMAT_VERSION: u32 = 1;

/// On-disk graph description (JSON).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphFile {
    pub format_version: u32,
    pub n: usize,
    pub d: usize,
    pub edges: Vec<[usize; 2]>,
    /// Row-major `n·d` feature values.
    #[serde(with = "crate::codec::float_vec")]
    pub features: Vec<f64>,
}

impl GraphFile {
    pub fn from_parts(g: &Graph, x: &FeatureMatrix) -> Self {
        GraphFile {
            format_version: GRAPH_FORMAT_VERSION,
            n: g.node_count(),
            d: x.dim(),
            edges: g.edges().into_iter().map(|(i, j)| [i, j]).collect(),
            features: x.values().iter().copied().collect(),
        }
    }

    pub fn into_parts(self) -> Result<(Graph, FeatureMatrix)> {
        if self.format_version != GRAPH_FORMAT_VERSION {
            return Err(Error::VersionMismatch { found: self.format_version, expected: GRAPH_FORMAT_VERSION });
        }
        if self.features.len() != self.n * self.d {
            return Err(Error::ShapeMismatch(format!(
                "{} feature values for n = {}, d = {}",
                self.features.len(),
                self.n,
                self.d
            )));
        }
        let edges: Vec<(usize, usize)> = self.edges.iter().map(|e| (e[0], e[1])).collect();
        let g = Graph::from_edges(self.n, &edges)?;
        let x = FeatureMatrix::from_vec(ArrayView1::from(&self.features), self.n, self.d)?;
        Ok((g, x))
    }
}

pub fn load_graph(path: impl AsRef<Path>) -> Result<(Graph, FeatureMatrix)> {
    let text = std::fs::read_to_string(path)?;
    let file: GraphFile = serde_json::from_str(&text)?;
    file.into_parts()
}

pub fn save_graph(g: &Graph, x: &FeatureMatrix, path: impl AsRef<Path>) -> Result<()> {
    let text = serde_json::to_string_pretty(&GraphFile::from_parts(g, x))?;
    std::fs::write(path, text)?;
    Ok(())
}

/// Covariance on disk: `{"space": M, "feature": M}` for `space ⊗ feature`
/// or `{"dense": M}`, with matrices stored as in weight files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum CovarianceFile {
    Kronecker { space: MatrixRecord, feature: MatrixRecord },
    Dense { dense: MatrixRecord },
}

impl CovarianceFile {
    pub fn from_model(cov: &CovarianceModel) -> Self {
        match cov {
            CovarianceModel::Dense(m) => CovarianceFile::Dense { dense: MatrixRecord::from_array(m) },
            CovarianceModel::Kronecker { space, feature } => CovarianceFile::Kronecker {
                space: MatrixRecord::from_array(space),
                feature: MatrixRecord::from_array(feature),
            },
        }
    }

    pub fn to_model(&self) -> Result<CovarianceModel> {
        let square = |m: Array2<f64>, what: &str| {
            if m.is_square() {
                Ok(m)
            } else {
                Err(Error::ShapeMismatch(format!("{what} covariance is {}x{}", m.nrows(), m.ncols())))
            }
        };
        Ok(match self {
            CovarianceFile::Dense { dense } => CovarianceModel::Dense(square(dense.to_array("dense")?, "dense")?),
            CovarianceFile::Kronecker { space, feature } => CovarianceModel::Kronecker {
                space: square(space.to_array("space")?, "space")?,
                feature: square(feature.to_array("feature")?, "feature")?,
            },
        })
    }
}

pub fn load_covariance(path: impl AsRef<Path>) -> Result<CovarianceModel> {
    let file: CovarianceFile = serde_json::from_str(&std::fs::read_to_string(path)?)?;
    file.to_model()
}

pub fn save_covariance(cov: &CovarianceModel, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(&CovarianceFile::from_model(cov))?)?;
    Ok(())
}
