use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const NODE_FEATURES: usize = 9;
pub const EDGE_FEATURES: usize = 3;

/// Atom coordinates of one conformer, in Å.
pub type Coords = Vec<[f64; 3]>;

/// A molecule as a directed graph: every bond is stored in both directions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MolecularGraph {
    pub id: String,
    pub num_nodes: usize,
    pub node_feat: Vec<[u32; NODE_FEATURES]>,
    pub edge_index: Vec<[usize; 2]>,
    pub edge_feat: Vec<[u32; EDGE_FEATURES]>,
    pub target: Option<f64>,
}

/// Per-column vocabulary sizes of the categorical atom and bond features.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureVocab {
    pub node: [usize; NODE_FEATURES],
    pub edge: [usize; EDGE_FEATURES],
}

impl Default for FeatureVocab {
    fn default() -> Self {
        FeatureVocab {
            node: [1; NODE_FEATURES],
            edge: [1; EDGE_FEATURES],
        }
    }
}

impl FeatureVocab {
    /// Smallest vocabulary covering every feature value in `graphs`.
    pub fn from_graphs<'a>(graphs: impl IntoIterator<Item = &'a MolecularGraph>) -> Self {
        let mut v = FeatureVocab::default();
        for g in graphs {
            for row in &g.node_feat {
                for (size, &x) in v.node.iter_mut().zip(row) {
                    *size = (*size).max(x as usize + 1);
                }
            }
            for row in &g.edge_feat {
                for (size, &x) in v.edge.iter_mut().zip(row) {
                    *size = (*size).max(x as usize + 1);
                }
            }
        }
        v
    }

    pub fn validate(&self) -> Result<()> {
        if self.node.iter().chain(&self.edge).any(|&s| s == 0) {
            return Err(Error::invalid("vocabulary sizes must be at least 1"));
        }
        Ok(())
    }
}

impl MolecularGraph {
    /// Checks structural invariants and, when given, feature ranges.
    pub fn validate(&self, vocab: Option<&FeatureVocab>) -> Result<()> {
        let n = self.num_nodes;
        let ctx = |msg: String| Error::invalid(format!("molecule `{}`: {msg}", self.id));
        if self.node_feat.len() != n {
            return Err(ctx(format!("{} node feature rows for {n} nodes", self.node_feat.len())));
        }
        if self.edge_feat.len() != self.edge_index.len() {
            return Err(ctx(format!(
                "{} edge feature rows for {} edges",
                self.edge_feat.len(),
                self.edge_index.len()
            )));
        }
        let mut directed = HashSet::with_capacity(self.edge_index.len());
        for &[s, d] in &self.edge_index {
            if s >= n || d >= n {
                return Err(ctx(format!("node index out of range: edge ({s}, {d}) with {n} nodes")));
            }
            directed.insert((s, d));
        }
        for &[s, d] in &self.edge_index {
            if !directed.contains(&(d, s)) {
                return Err(ctx(format!("edge ({s}, {d}) has no reverse edge")));
            }
        }
        if let Some(t) = self.target {
            if !t.is_finite() {
                return Err(ctx("non-finite target".into()));
            }
        }
        if let Some(v) = vocab {
            for row in &self.node_feat {
                for (col, (&x, &size)) in row.iter().zip(&v.node).enumerate() {
                    if x as usize >= size {
                        return Err(ctx(format!(
                            "node feature column {col} value {x} outside vocabulary of {size}"
                        )));
                    }
                }
            }
            for row in &self.edge_feat {
                for (col, (&x, &size)) in row.iter().zip(&v.edge).enumerate() {
                    if x as usize >= size {
                        return Err(ctx(format!(
                            "edge feature column {col} value {x} outside vocabulary of {size}"
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    /// Sorted neighbor lists from the directed edge list.
    pub fn neighbors(&self) -> Vec<Vec<usize>> {
        let mut adj = vec![Vec::new(); self.num_nodes];
        for &[s, d] in &self.edge_index {
            adj[d].push(s);
        }
        for a in &mut adj {
            a.sort_unstable();
            a.dedup();
        }
        adj
    }

    /// Relabels atom `i` as `perm[i]`, carrying features and edges along.
    pub fn permuted(&self, perm: &[usize]) -> MolecularGraph {
        let mut node_feat = vec![[0; NODE_FEATURES]; self.num_nodes];
        for (i, &p) in perm.iter().enumerate() {
            node_feat[p] = self.node_feat[i];
        }
        MolecularGraph {
            id: self.id.clone(),
            num_nodes: self.num_nodes,
            node_feat,
            edge_index: self.edge_index.iter().map(|&[s, d]| [perm[s], perm[d]]).collect(),
            edge_feat: self.edge_feat.clone(),
            target: self.target,
        }
    }
}

/// All conformers generated for one molecule. May be empty.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ConformerSet {
    pub id: String,
    pub conformers: Vec<Coords>,
}

impl ConformerSet {
    pub fn is_empty(&self) -> bool {
        self.conformers.is_empty()
    }

    pub fn len(&self) -> usize {
        self.conformers.len()
    }
}
