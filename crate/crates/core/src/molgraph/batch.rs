use crate::error::{Error, Result};
use crate::molgraph::{Coords, MolecularGraph, NormalizedAdjacency, EDGE_FEATURES, NODE_FEATURES};

/// Disjoint union of several molecules.
///
/// Node `i` of graph `g` becomes node `offsets[g] + i`; `node_graph` maps every
/// node back to its graph and is non-decreasing.
#[derive(Clone, Debug)]
pub struct Batch {
    pub ids: Vec<String>,
    pub num_graphs: usize,
    pub num_nodes: usize,
    pub offsets: Vec<usize>,
    pub sizes: Vec<usize>,
    pub node_feat: Vec<[u32; NODE_FEATURES]>,
    pub edge_src: Vec<usize>,
    pub edge_dst: Vec<usize>,
    pub edge_feat: Vec<[u32; EDGE_FEATURES]>,
    pub node_graph: Vec<usize>,
    pub targets: Vec<Option<f64>>,
    pub adjacency: NormalizedAdjacency,
    /// Per graph, the conformers that take part in a 3D forward pass.
    pub conformers: Option<Vec<Vec<Coords>>>,
}

pub fn batch_graphs(graphs: &[&MolecularGraph]) -> Result<Batch> {
    if graphs.is_empty() {
        return Err(Error::invalid("cannot batch an empty list of graphs"));
    }
    let mut b = Batch {
        ids: Vec::with_capacity(graphs.len()),
        num_graphs: graphs.len(),
        num_nodes: 0,
        offsets: Vec::with_capacity(graphs.len()),
        sizes: Vec::with_capacity(graphs.len()),
        node_feat: Vec::new(),
        edge_src: Vec::new(),
        edge_dst: Vec::new(),
        edge_feat: Vec::new(),
        node_graph: Vec::new(),
        targets: Vec::with_capacity(graphs.len()),
        adjacency: NormalizedAdjacency::from_edges(0, []),
        conformers: None,
    };
    for (gi, g) in graphs.iter().enumerate() {
        let off = b.num_nodes;
        b.ids.push(g.id.clone());
        b.offsets.push(off);
        b.sizes.push(g.num_nodes);
        b.node_feat.extend_from_slice(&g.node_feat);
        b.node_graph.extend(std::iter::repeat_n(gi, g.num_nodes));
        for &[s, d] in &g.edge_index {
            b.edge_src.push(s + off);
            b.edge_dst.push(d + off);
        }
        b.edge_feat.extend_from_slice(&g.edge_feat);
        b.targets.push(g.target);
        b.num_nodes += g.num_nodes;
    }
    b.adjacency =
        NormalizedAdjacency::from_edges(b.num_nodes, b.edge_src.iter().copied().zip(b.edge_dst.iter().copied()));
    Ok(b)
}

impl Batch {
    /// Attaches one non-empty conformer list per graph.
    pub fn with_conformers(mut self, conformers: Vec<Vec<Coords>>) -> Result<Self> {
        if conformers.len() != self.num_graphs {
            return Err(Error::invalid(format!(
                "{} conformer lists for {} graphs",
                conformers.len(),
                self.num_graphs
            )));
        }
        for (g, confs) in conformers.iter().enumerate() {
            if confs.is_empty() {
                return Err(Error::invalid(format!("molecule `{}` has no conformers", self.ids[g])));
            }
            if let Some(c) = confs.iter().find(|c| c.len() != self.sizes[g]) {
                return Err(Error::invalid(format!(
                    "molecule `{}`: conformer with {} rows for {} atoms",
                    self.ids[g],
                    c.len(),
                    self.sizes[g]
                )));
            }
        }
        self.conformers = Some(conformers);
        Ok(self)
    }

    /// Targets of every graph, or an error naming the first unlabeled one.
    pub fn require_targets(&self) -> Result<Vec<f64>> {
        self.targets
            .iter()
            .zip(&self.ids)
            .map(|(t, id)| t.ok_or_else(|| Error::invalid(format!("molecule `{id}` has no target"))))
            .collect()
    }
}
