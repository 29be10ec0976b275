// SPDX-License-Identifier: Apache-2.0

//! Packing several circuits into one disjoint-union graph.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::aig::{GraphTensors, NODE_FEATURE_DIM};
use crate::autodiff::{EdgeSet, Segments, Tensor, TensorError};

/// Standardized ratios are clamped to this magnitude.
pub const RATIO_CLAMP: f64 = 5.0;

/// Train-split statistics used to standardize the gate ratio.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RatioScaler {
    pub mean: f64,
    pub std: f64,
}

impl Default for RatioScaler {
    fn default() -> Self {
        RatioScaler { mean: 0.0, std: 1.0 }
    }
}

impl RatioScaler {
    /// Population mean and std; a degenerate or empty sample gets `std = 1`.
    pub fn fit(ratios: &[f64]) -> Self {
        if ratios.is_empty() {
            return Self::default();
        }
        let n = ratios.len() as f64;
        let mean = ratios.iter().sum::<f64>() / n;
        let std = (ratios.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n).sqrt();
        RatioScaler {
            mean,
            std: if std > 1e-12 { std } else { 1.0 },
        }
    }

    pub fn apply(&self, r: f64) -> f64 {
        ((r - self.mean) / self.std).clamp(-RATIO_CLAMP, RATIO_CLAMP)
    }
}

/// Disjoint union of graphs. Node rows of graph `g` occupy
/// `segments.range(g)`; edges are re-indexed accordingly.
#[derive(Debug, Clone)]
pub struct GraphBatch {
    pub features: Tensor,
    pub edges: Arc<EdgeSet>,
    pub segments: Arc<Segments>,
    /// Standardized ratio per graph, as a `G x 1` matrix.
    pub ratios: Tensor,
    pub signed_mean_coeffs: Arc<[f64]>,
    pub sym_norm_coeffs: Arc<[f64]>,
}

impl GraphBatch {
    pub fn new(graphs: &[&GraphTensors], scaler: &RatioScaler) -> Result<Self, TensorError> {
        let mut sizes = Vec::with_capacity(graphs.len());
        let mut features = Vec::new();
        let (mut src, mut dst, mut sign) = (Vec::new(), Vec::new(), Vec::new());
        let mut ratios = Vec::with_capacity(graphs.len());
        let mut offset = 0;
        for g in graphs {
            if g.features.len() != g.num_nodes * NODE_FEATURE_DIM {
                return Err(TensorError::ShapeMismatch {
                    op: "batch",
                    detail: format!(
                        "{} feature values for {} nodes",
                        g.features.len(),
                        g.num_nodes
                    ),
                });
            }
            features.extend_from_slice(&g.features);
            src.extend(g.edge_src.iter().map(|s| s + offset));
            dst.extend(g.edge_dst.iter().map(|d| d + offset));
            sign.extend_from_slice(&g.edge_sign);
            ratios.push(scaler.apply(g.gate_ratio));
            sizes.push(g.num_nodes);
            offset += g.num_nodes;
        }
        let edges = EdgeSet::new(offset, src, dst, sign)?;
        let signed_mean_coeffs = edges.signed_mean_coeffs().into();
        let sym_norm_coeffs = edges.symmetric_norm_coeffs().into();
        Ok(GraphBatch {
            features: Tensor::matrix(offset, NODE_FEATURE_DIM, features)?,
            edges: Arc::new(edges),
            segments: Arc::new(Segments::from_sizes(&sizes)),
            ratios: Tensor::matrix(graphs.len(), 1, ratios)?,
            signed_mean_coeffs,
            sym_norm_coeffs,
        })
    }

    pub fn num_nodes(&self) -> usize {
        self.features.rows()
    }

    pub fn num_graphs(&self) -> usize {
        self.segments.num_graphs()
    }

    /// Replaces the standardized ratio of every graph.
    pub fn with_ratios(mut self, ratios: &[f64]) -> Result<Self, TensorError> {
        self.ratios = Tensor::matrix(self.num_graphs(), 1, ratios.to_vec())?;
        Ok(self)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::aig::{random_aig, to_graph_tensors};

    #[test]
    fn scaler_fit_and_clamp() {
        let s = RatioScaler::fit(&[1.0, 3.0]);
        assert_eq!(s, RatioScaler { mean: 2.0, std: 1.0 });
        assert_eq!(s.apply(3.0), 1.0);
        assert_eq!(s.apply(100.0), RATIO_CLAMP);
        assert_eq!(s.apply(-100.0), -RATIO_CLAMP);
        assert_eq!(RatioScaler::fit(&[4.0, 4.0]).std, 1.0);
    }

    #[test]
    fn offsets_and_edges() {
        let a = to_graph_tensors(&random_aig(1, 3, 5, 0.3).unwrap(), true);
        let b = to_graph_tensors(&random_aig(2, 4, 7, 0.3).unwrap(), true);
        let batch = GraphBatch::new(&[&a, &b], &RatioScaler::default()).unwrap();
        assert_eq!(batch.num_nodes(), 8 + 11);
        assert_eq!(batch.segments.offsets(), &[0, 8, 19]);
        assert_eq!(batch.edges.len(), a.num_edges() + b.num_edges());
        let k = a.num_edges();
        assert_eq!(batch.edges.src[k], b.edge_src[0] + 8);
        assert_eq!(batch.edges.dst[k], b.edge_dst[0] + 8);
        assert_eq!(batch.ratios.shape(), &[2, 1]);
    }
}
