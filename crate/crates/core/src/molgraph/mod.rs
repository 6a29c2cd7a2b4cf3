//! Molecular graphs, conformer sets, file formats, batching and splits.

mod adjacency;
mod batch;
mod embed;
mod graph;
pub mod io;
mod split;

pub use adjacency::{normalized_adjacency, NormalizedAdjacency};
pub use batch::{batch_graphs, Batch};
pub use embed::embed_features;
pub use graph::{ConformerSet, Coords, FeatureVocab, MolecularGraph, EDGE_FEATURES, NODE_FEATURES};
pub use io::{load_conformer_dataset, load_graph_dataset};
pub use split::{make_new_splits, SplitSpec};

use std::collections::HashMap;

use crate::error::{Error, Result};

/// Loaded graphs with an id index and, for 3D work, their conformer sets.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub graphs: Vec<MolecularGraph>,
    pub vocab: FeatureVocab,
    pub conformers: Option<HashMap<String, ConformerSet>>,
    index: HashMap<String, usize>,
}

impl Dataset {
    pub fn new(graphs: Vec<MolecularGraph>, vocab: FeatureVocab) -> Result<Self> {
        let mut index = HashMap::with_capacity(graphs.len());
        for (i, g) in graphs.iter().enumerate() {
            g.validate(Some(&vocab))?;
            if index.insert(g.id.clone(), i).is_some() {
                return Err(Error::invalid(format!("duplicate molecule id `{}`", g.id)));
            }
        }
        Ok(Dataset {
            graphs,
            vocab,
            conformers: None,
            index,
        })
    }

    pub fn with_conformers(mut self, conformers: HashMap<String, ConformerSet>) -> Self {
        self.conformers = Some(conformers);
        self
    }

    pub fn len(&self) -> usize {
        self.graphs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.graphs.is_empty()
    }

    pub fn get(&self, id: &str) -> Result<&MolecularGraph> {
        self.index
            .get(id)
            .map(|&i| &self.graphs[i])
            .ok_or_else(|| Error::invalid(format!("unknown molecule id `{id}`")))
    }

    pub fn contains(&self, id: &str) -> bool {
        self.index.contains_key(id)
    }

    /// Conformers of `id`; empty when none were loaded or generated.
    pub fn conformers_of(&self, id: &str) -> &[Coords] {
        self.conformers
            .as_ref()
            .and_then(|c| c.get(id))
            .map_or(&[], |s| s.conformers.as_slice())
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.graphs.iter().map(|g| g.id.as_str())
    }
}
