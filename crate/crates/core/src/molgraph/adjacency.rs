use std::collections::BTreeSet;

use crate::diffcore::{Tape, Tensor, Var};
use crate::error::Result;
use crate::molgraph::MolecularGraph;

/// Sparse `D̃^{-1/2} (A + I) D̃^{-1/2}` in coordinate form, sorted by
/// `(row, col)`.
///
/// Directed input edges are merged into undirected pairs and existing
/// self-loops are dropped, so each node gets exactly one self-loop.
#[derive(Clone, Debug, PartialEq)]
pub struct NormalizedAdjacency {
    pub n: usize,
    pub rows: Vec<usize>,
    pub cols: Vec<usize>,
    pub weights: Vec<f64>,
}

impl NormalizedAdjacency {
    pub fn from_edges(n: usize, edges: impl IntoIterator<Item = (usize, usize)>) -> Self {
        let mut pairs = BTreeSet::new();
        for (s, d) in edges {
            if s != d {
                pairs.insert((s, d));
                pairs.insert((d, s));
            }
        }
        for i in 0..n {
            pairs.insert((i, i));
        }
        let mut degree = vec![0usize; n];
        for &(r, _) in &pairs {
            degree[r] += 1;
        }
        let inv_sqrt: Vec<f64> = degree.iter().map(|&d| 1.0 / (d as f64).sqrt()).collect();
        let mut rows = Vec::with_capacity(pairs.len());
        let mut cols = Vec::with_capacity(pairs.len());
        let mut weights = Vec::with_capacity(pairs.len());
        for (r, c) in pairs {
            rows.push(r);
            cols.push(c);
            weights.push(inv_sqrt[r] * inv_sqrt[c]);
        }
        NormalizedAdjacency { n, rows, cols, weights }
    }

    pub fn nnz(&self) -> usize {
        self.rows.len()
    }

    pub fn to_dense(&self) -> Vec<Vec<f64>> {
        let mut m = vec![vec![0.0; self.n]; self.n];
        for ((&r, &c), &w) in self.rows.iter().zip(&self.cols).zip(&self.weights) {
            m[r][c] = w;
        }
        m
    }

    /// Records `Â · x` for `x` of shape `[n, f]`.
    pub fn propagate(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let gathered = tape.gather(x, &self.cols)?;
        let w = tape.constant(Tensor::new(vec![self.nnz(), 1], self.weights.clone())?);
        let scaled = tape.mul_col(gathered, w)?;
        tape.segment_sum(scaled, &self.rows, self.n)
    }
}

pub fn normalized_adjacency(graph: &MolecularGraph) -> NormalizedAdjacency {
    NormalizedAdjacency::from_edges(graph.num_nodes, graph.edge_index.iter().map(|&[s, d]| (s, d)))
}
