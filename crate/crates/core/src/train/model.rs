use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::{Mode, ParamStore, Tape, Var};
use crate::error::{Error, Result};
use crate::gnn2d::{Model2D, Model2DConfig};
use crate::gnn3d::{select_conformers, Model3D, Model3DConfig};
use crate::molgraph::{batch_graphs, Batch, Dataset, FeatureVocab};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ModelKind {
    #[serde(rename = "2d")]
    TwoD,
    #[serde(rename = "3d")]
    ThreeD,
}

impl ModelKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ModelKind::TwoD => "2d",
            ModelKind::ThreeD => "3d",
        }
    }
}

impl std::str::FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "2d" => Ok(ModelKind::TwoD),
            "3d" => Ok(ModelKind::ThreeD),
            other => Err(Error::Config(format!(
                "unknown model kind `{other}` (expected 2d or 3d)"
            ))),
        }
    }
}

impl std::fmt::Display for ModelKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind")]
pub enum ModelConfig {
    #[serde(rename = "2d")]
    TwoD(Model2DConfig),
    #[serde(rename = "3d")]
    ThreeD(Model3DConfig),
}

impl ModelConfig {
    pub fn kind(&self) -> ModelKind {
        match self {
            ModelConfig::TwoD(_) => ModelKind::TwoD,
            ModelConfig::ThreeD(_) => ModelKind::ThreeD,
        }
    }
}

/// Either network behind one interface.
#[derive(Clone, Debug, PartialEq)]
pub enum Model {
    TwoD(Model2D),
    ThreeD(Model3D),
}

impl Model {
    pub fn new(config: ModelConfig, vocab: FeatureVocab, seed: u64) -> Result<Self> {
        Ok(match config {
            ModelConfig::TwoD(c) => Model::TwoD(Model2D::new(c, vocab, seed)?),
            ModelConfig::ThreeD(c) => Model::ThreeD(Model3D::new(c, vocab, seed)?),
        })
    }

    pub fn kind(&self) -> ModelKind {
        match self {
            Model::TwoD(_) => ModelKind::TwoD,
            Model::ThreeD(_) => ModelKind::ThreeD,
        }
    }

    pub fn config(&self) -> ModelConfig {
        match self {
            Model::TwoD(m) => ModelConfig::TwoD(m.config.clone()),
            Model::ThreeD(m) => ModelConfig::ThreeD(m.config.clone()),
        }
    }

    pub fn vocab(&self) -> &FeatureVocab {
        match self {
            Model::TwoD(m) => &m.vocab,
            Model::ThreeD(m) => &m.vocab,
        }
    }

    pub fn store(&self) -> &ParamStore {
        match self {
            Model::TwoD(m) => &m.store,
            Model::ThreeD(m) => &m.store,
        }
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        match self {
            Model::TwoD(m) => &mut m.store,
            Model::ThreeD(m) => &mut m.store,
        }
    }

    pub fn forward(&self, tape: &mut Tape, batch: &Batch) -> Result<Var> {
        match self {
            Model::TwoD(m) => m.forward(tape, batch),
            Model::ThreeD(m) => m.forward(tape, batch),
        }
    }

    /// Whether this model can score `id` (3D needs at least one conformer).
    pub fn can_predict(&self, dataset: &Dataset, id: &str) -> bool {
        match self {
            Model::TwoD(_) => true,
            Model::ThreeD(_) => !dataset.conformers_of(id).is_empty(),
        }
    }

    /// Builds the batch for `ids`. For the 3D model `rng` selects a training
    /// subsample of conformers; without it the prediction cap applies.
    pub fn make_batch(&self, dataset: &Dataset, ids: &[&str], rng: Option<&mut ChaCha8Rng>) -> Result<Batch> {
        let graphs = ids.iter().map(|id| dataset.get(id)).collect::<Result<Vec<_>>>()?;
        let batch = batch_graphs(&graphs)?;
        let Model::ThreeD(m) = self else {
            return Ok(batch);
        };
        let mut rng = rng;
        let mut sets = Vec::with_capacity(ids.len());
        for id in ids {
            let confs = dataset.conformers_of(id);
            if confs.is_empty() {
                return Err(Error::invalid(format!("molecule `{id}` has no conformers")));
            }
            let picked = match rng.as_deref_mut() {
                Some(r) => select_conformers(confs, m.config.max_train_conformers, Some(r)),
                None => select_conformers(confs, m.config.max_predict_conformers, None),
            };
            sets.push(picked);
        }
        batch.with_conformers(sets)
    }

    /// Eval-mode predictions in `ids` order; `None` where the model cannot
    /// score a molecule. Unknown ids are errors.
    pub fn predict_ids(&self, dataset: &Dataset, ids: &[&str], batch_size: usize) -> Result<Vec<Option<f64>>> {
        for id in ids {
            dataset.get(id)?;
        }
        let scorable: Vec<&str> = ids.iter().copied().filter(|id| self.can_predict(dataset, id)).collect();
        let mut values = std::collections::HashMap::with_capacity(scorable.len());
        for chunk in scorable.chunks(batch_size.max(1)) {
            let batch = self.make_batch(dataset, chunk, None)?;
            let mut tape = Tape::new(self.store(), Mode::Eval, 0);
            let out = self.forward(&mut tape, &batch)?;
            for (id, &p) in chunk.iter().zip(tape.value(out).data()) {
                values.insert(*id, p);
            }
        }
        Ok(ids.iter().map(|id| values.get(id).copied()).collect())
    }
}
