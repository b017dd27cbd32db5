//! The three landmark graphs and landmark-guided node-feature sampling.
//!
//! * LCG: unweighted contour graph, independent of the clip.
//! * DAG: fully connected, weight `1 / (mean_t |p_i - p_j| + eps)`.
//! * SAG: fully connected, weight `max(0, cos(f_i, f_j))` on time-averaged
//!   node features.
//!
//! Every builder returns a row-normalized matrix with a positive diagonal.
//! The `*_weights` / `sag_similarity` functions expose the matrices before
//! normalization for inspection.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::landmarks::LipTopology;
use crate::tensor::Tensor;

/// Default DAG distance guard, in pixels.
pub const DAG_EPSILON: f64 = 1e-3;

/// Tolerance for "rows sum to one".
pub const ROW_SUM_TOL: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GraphKind {
    Lcg,
    Dag,
    Sag,
}

impl GraphKind {
    pub const ALL: [GraphKind; 3] = [GraphKind::Lcg, GraphKind::Dag, GraphKind::Sag];

    pub fn name(self) -> &'static str {
        match self {
            GraphKind::Lcg => "lcg",
            GraphKind::Dag => "dag",
            GraphKind::Sag => "sag",
        }
    }
}

/// A square weighted adjacency matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct AdjacencyMatrix {
    pub weights: Tensor,
    pub kind: GraphKind,
    pub normalized: bool,
}

impl AdjacencyMatrix {
    pub fn num_nodes(&self) -> usize {
        self.weights.shape()[0]
    }

    pub fn row_sums(&self) -> Vec<f64> {
        let n = self.num_nodes();
        self.weights.data().chunks(n).map(|r| r.iter().sum()).collect()
    }

    /// Nonzero entries per row, self-loop included.
    pub fn degrees(&self) -> Vec<usize> {
        let n = self.num_nodes();
        self.weights.data().chunks(n).map(|r| r.iter().filter(|&&v| v != 0.0).count()).collect()
    }

    pub fn is_row_stochastic(&self, tol: f64) -> bool {
        self.row_sums().iter().all(|s| (s - 1.0).abs() <= tol)
    }
}

/// Checks a square, nonnegative, finite matrix.
fn check_square(m: &Tensor) -> Result<usize> {
    let sh = m.shape();
    if sh.len() != 2 || sh[0] != sh[1] {
        return Err(Error::Construction(format!("adjacency must be square, got {sh:?}")));
    }
    if let Some(v) = m.data().iter().find(|v| !(v.is_finite() && **v >= 0.0)) {
        return Err(Error::Construction(format!("adjacency entry {v} is negative or non-finite")));
    }
    Ok(sh[0])
}

/// Divides each row by its sum.
pub fn normalize_adjacency(m: &AdjacencyMatrix) -> Result<AdjacencyMatrix> {
    let n = check_square(&m.weights)?;
    let mut w = m.weights.clone();
    for (i, row) in w.data_mut().chunks_mut(n).enumerate() {
        let s: f64 = row.iter().sum();
        if s <= 0.0 {
            return Err(Error::Construction(format!("{} adjacency row {i} sums to zero", m.kind.name())));
        }
        row.iter_mut().for_each(|v| *v /= s);
    }
    Ok(AdjacencyMatrix {
        weights: w,
        kind: m.kind,
        normalized: true,
    })
}

/// 0/1 contour adjacency with self-loops, before normalization.
pub fn lcg_weights(topology: &LipTopology) -> Result<Tensor> {
    topology.validate()?;
    let n = topology.num_nodes();
    let mut w = Tensor::eye(n);
    for (a, b) in topology.edges() {
        w.set(&[a, b], 1.0);
        w.set(&[b, a], 1.0);
    }
    Ok(w)
}

pub fn build_lcg(topology: &LipTopology) -> Result<AdjacencyMatrix> {
    let raw = AdjacencyMatrix {
        weights: lcg_weights(topology)?,
        kind: GraphKind::Lcg,
        normalized: false,
    };
    normalize_adjacency(&raw)
}

/// Time-averaged pairwise landmark distances of a `[T, N, 2]` track.
pub fn mean_distances(coords: &Tensor) -> Result<Tensor> {
    let sh = coords.shape();
    if sh.len() != 3 || sh[2] != 2 || sh[0] == 0 {
        return Err(Error::Data(format!("landmark track must be [T, N, 2], got {sh:?}")));
    }
    let (t, n) = (sh[0], sh[1]);
    let c = coords.data();
    let mut d = Tensor::zeros(&[n, n]);
    for i in 0..n {
        for j in (i + 1)..n {
            let mut acc = 0.0;
            for ti in 0..t {
                let (pi, pj) = ((ti * n + i) * 2, (ti * n + j) * 2);
                acc += (c[pi] - c[pj]).hypot(c[pi + 1] - c[pj + 1]);
            }
            let v = acc / t as f64;
            d.set(&[i, j], v);
            d.set(&[j, i], v);
        }
    }
    Ok(d)
}

/// DAG weights before normalization: `1/(d_ij + eps)` off the diagonal, the
/// row's largest off-diagonal weight on it.
pub fn dag_weights(coords: &Tensor, epsilon: f64) -> Result<Tensor> {
    if !(epsilon > 0.0) {
        return Err(Error::Config(format!("DAG epsilon must be positive, got {epsilon}")));
    }
    let d = mean_distances(coords)?;
    let n = d.shape()[0];
    if d.data().iter().all(|&v| v == 0.0) {
        return Err(Error::Construction("all landmarks coincide; distance graph is degenerate".into()));
    }
    let mut w = Tensor::zeros(&[n, n]);
    for i in 0..n {
        let mut row_max = 0.0f64;
        for j in 0..n {
            if i != j {
                let v = 1.0 / (d.at(&[i, j]) + epsilon);
                w.set(&[i, j], v);
                row_max = row_max.max(v);
            }
        }
        w.set(&[i, i], row_max);
    }
    Ok(w)
}

pub fn build_dag(coords: &Tensor, epsilon: f64) -> Result<AdjacencyMatrix> {
    let raw = AdjacencyMatrix {
        weights: dag_weights(coords, epsilon)?,
        kind: GraphKind::Dag,
        normalized: false,
    };
    normalize_adjacency(&raw)
}

/// Cosine similarity between rows of `[N, C]` node features, unclamped.
pub fn sag_similarity(node_feats: &Tensor) -> Result<Tensor> {
    let sh = node_feats.shape();
    if sh.len() != 2 {
        return Err(Error::Construction(format!("SAG node features must be [N, C], got {sh:?}")));
    }
    let (n, c) = (sh[0], sh[1]);
    let rows: Vec<&[f64]> = node_feats.data().chunks(c).collect();
    let norms: Vec<f64> = rows.iter().map(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt()).collect();
    if let Some(i) = norms.iter().position(|&v| v == 0.0 || !v.is_finite()) {
        return Err(Error::Construction(format!("SAG node {i} has a zero-norm feature vector")));
    }
    let mut s = Tensor::zeros(&[n, n]);
    for i in 0..n {
        for j in 0..n {
            let dot: f64 = rows[i].iter().zip(rows[j]).map(|(a, b)| a * b).sum();
            s.set(&[i, j], dot / (norms[i] * norms[j]));
        }
    }
    Ok(s)
}

/// SAG weights before normalization: clamped similarity, unit diagonal.
pub fn sag_weights(node_feats: &Tensor) -> Result<Tensor> {
    let mut s = sag_similarity(node_feats)?;
    let n = s.shape()[0];
    for i in 0..n {
        for j in 0..n {
            let v = if i == j { 1.0 } else { s.at(&[i, j]).max(0.0) };
            s.set(&[i, j], v);
        }
    }
    Ok(s)
}

pub fn build_sag(node_feats: &Tensor) -> Result<AdjacencyMatrix> {
    let raw = AdjacencyMatrix {
        weights: sag_weights(node_feats)?,
        kind: GraphKind::Sag,
        normalized: false,
    };
    normalize_adjacency(&raw)
}

/// Distance outside the crop still accepted before clamping, in pixels.
pub const SAMPLE_TOLERANCE: f64 = 1.0;

/// Nearest feature-map cell `(row, col)` for a pixel position.
///
/// The pixel is rescaled by `extent / frame_size`, rounded half-up and
/// clamped into the grid.
pub fn nearest_cell(x: f64, y: f64, frame_size: usize, h: usize, w: usize) -> Result<(usize, usize)> {
    let fs = frame_size as f64;
    let tol = SAMPLE_TOLERANCE;
    if !(x.is_finite() && y.is_finite()) || x < -tol || y < -tol || x > fs + tol || y > fs + tol {
        return Err(Error::Data(format!("landmark ({x}, {y}) outside {frame_size}px crop")));
    }
    let cell = |v: f64, ext: usize| -> usize {
        let u = (v * ext as f64 / fs + 0.5).floor();
        u.clamp(0.0, (ext - 1) as f64) as usize
    };
    Ok((cell(y, h), cell(x, w)))
}

/// Flat offsets into a `[B, C, T, H, W]` feature map that gather a
/// `[B, N, T, C]` node-feature tensor. `coords[b]` is clip `b`'s `[T, N, 2]`
/// track.
pub fn sampling_index(fmap_shape: &[usize], coords: &[&Tensor], frame_size: usize) -> Result<Vec<usize>> {
    if fmap_shape.len() != 5 {
        return Err(Error::Shape(format!("feature map must be [B, C, T, H, W], got {fmap_shape:?}")));
    }
    let (b, c, t, h, w) = (fmap_shape[0], fmap_shape[1], fmap_shape[2], fmap_shape[3], fmap_shape[4]);
    if coords.len() != b {
        return Err(Error::Shape(format!("{} landmark tracks for a batch of {b}", coords.len())));
    }
    let n = coords.first().map(|c| c.shape()[1]).unwrap_or(0);
    let mut index = Vec::with_capacity(b * n * t * c);
    for (bi, track) in coords.iter().enumerate() {
        let sh = track.shape();
        if sh.len() != 3 || sh[0] != t || sh[1] != n || sh[2] != 2 {
            return Err(Error::Shape(format!("landmark track {sh:?} does not match {t} frames x {n} nodes")));
        }
        for ni in 0..n {
            for ti in 0..t {
                let (x, y) = (track.at(&[ti, ni, 0]), track.at(&[ti, ni, 1]));
                let (row, col) = nearest_cell(x, y, frame_size, h, w)?;
                for ci in 0..c {
                    index.push((((bi * c + ci) * t + ti) * h + row) * w + col);
                }
            }
        }
    }
    Ok(index)
}

/// Plain-tensor node sampling: the same `[T, N, 2]` track applied to every
/// batch entry of `[B, C, T, H, W]`, giving `[B, N, T, C]`.
pub fn sample_node_features(feat_map: &Tensor, coords: &Tensor, frame_size: usize) -> Result<Tensor> {
    let sh = feat_map.shape();
    if sh.len() != 5 {
        return Err(Error::Shape(format!("feature map must be [B, C, T, H, W], got {sh:?}")));
    }
    let tracks = vec![coords; sh[0]];
    let index = sampling_index(sh, &tracks, frame_size)?;
    let n = coords.shape()[1];
    let data = index.iter().map(|&i| feat_map.data()[i]).collect();
    Tensor::new(&[sh[0], n, sh[2], sh[1]], data)
}

/// Time average of `[N, T, C]` node features.
pub fn time_average(node_feats: &Tensor) -> Result<Tensor> {
    let sh = node_feats.shape();
    if sh.len() != 3 {
        return Err(Error::Shape(format!("node features must be [N, T, C], got {sh:?}")));
    }
    let (n, t, c) = (sh[0], sh[1], sh[2]);
    let mut out = Tensor::zeros(&[n, c]);
    for ni in 0..n {
        for ti in 0..t {
            for ci in 0..c {
                let v = out.at(&[ni, ci]) + node_feats.at(&[ni, ti, ci]) / t as f64;
                out.set(&[ni, ci], v);
            }
        }
    }
    Ok(out)
}
