//! Binary checkpoint layout:
//!
//! ```text
//! magic "MOLGNNCK" | version u32 LE | header length u64 LE | header JSON
//! | payload: per parameter, value then Adam m then Adam v, as f64 LE
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Adam, AdamConfig, Model, ModelConfig, TrainConfig, TrainState};
use crate::diffcore::Tensor;
use crate::error::{Error, Result};
use crate::molgraph::FeatureVocab;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"MOLGNNCK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    model: ModelConfig,
    vocab: FeatureVocab,
    train: TrainConfig,
    epoch: usize,
    best_valid_mae: Option<f64>,
    adam: AdamConfig,
    adam_step: u64,
    params: Vec<ParamEntry>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
    trainable: bool,
}

pub(super) fn to_bytes(state: &TrainState) -> Result<Vec<u8>> {
    let store = state.model.store();
    let header = Header {
        model: state.model.config(),
        vocab: state.model.vocab().clone(),
        train: state.config.clone(),
        epoch: state.epoch,
        best_valid_mae: state.best_valid_mae,
        adam: state.optimizer.config.clone(),
        adam_step: state.optimizer.step,
        params: store
            .iter()
            .map(|(_, p)| ParamEntry {
                name: p.name.clone(),
                shape: p.value.shape().to_vec(),
                trainable: p.trainable,
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(20 + json.len() + 24 * store.iter().map(|(_, p)| p.value.len()).sum::<usize>());
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for (id, p) in store.iter() {
        let k = id.index();
        for t in [&p.value, &state.optimizer.m[k], &state.optimizer.v[k]] {
            for x in t.data() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
    }
    Ok(out)
}

pub(super) fn from_bytes(bytes: &[u8]) -> Result<TrainState> {
    let bad = |m: String| Error::Checkpoint(m);
    if bytes.len() < 20 || &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(bad("not a checkpoint file (bad magic or truncated preamble)".into()));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(bad(format!(
            "checkpoint version {version} is not supported (expected {CHECKPOINT_VERSION})"
        )));
    }
    let header_len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    let body = &bytes[20..];
    if body.len() < header_len {
        return Err(bad("truncated header".into()));
    }
    let header: Header =
        serde_json::from_slice(&body[..header_len]).map_err(|e| bad(format!("malformed header: {e}")))?;
    let payload = &body[header_len..];
    let values: usize = header.params.iter().map(|p| p.shape.iter().product::<usize>()).sum();
    if payload.len() != values * 3 * 8 {
        return Err(bad(format!(
            "payload has {} bytes, expected {}",
            payload.len(),
            values * 3 * 8
        )));
    }

    let mut model = Model::new(header.model, header.vocab, 0)?;
    let mut optimizer = Adam::new(header.adam, model.store());
    optimizer.step = header.adam_step;
    if model.store().len() != header.params.len() {
        return Err(bad(format!(
            "checkpoint lists {} parameters, architecture has {}",
            header.params.len(),
            model.store().len()
        )));
    }
    let mut chunks = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")));
    let ids: Vec<_> = model.store().ids().collect();
    for (id, entry) in ids.into_iter().zip(&header.params) {
        let p = model.store().get(id);
        if p.name != entry.name || p.value.shape() != entry.shape.as_slice() || p.trainable != entry.trainable {
            return Err(bad(format!(
                "parameter `{}` {:?} does not match architecture slot `{}` {:?}",
                entry.name,
                entry.shape,
                p.name,
                p.value.shape()
            )));
        }
        let n = p.value.len();
        let mut take = || Tensor::new(entry.shape.clone(), chunks.by_ref().take(n).collect());
        let value = take()?;
        let m = take()?;
        let v = take()?;
        model.store_mut().set_value(id, value)?;
        optimizer.m[id.index()] = m;
        optimizer.v[id.index()] = v;
    }
    Ok(TrainState {
        model,
        optimizer,
        config: header.train,
        epoch: header.epoch,
        best_valid_mae: header.best_valid_mae,
    })
}

pub fn save_checkpoint(state: &TrainState, path: &Path) -> Result<()> {
    fs::write(path, to_bytes(state)?)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<TrainState> {
    from_bytes(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gnn2d::Model2DConfig;
    use crate::molgraph::{Dataset, MolecularGraph};
    use crate::train::ModelKind;

    fn tiny_state() -> TrainState {
        let g = MolecularGraph {
            id: "a".into(),
            num_nodes: 2,
            node_feat: vec![[0; 9], [1, 0, 0, 0, 0, 0, 0, 0, 0]],
            edge_index: vec![[0, 1], [1, 0]],
            edge_feat: vec![[0; 3]; 2],
            target: Some(1.0),
        };
        let vocab = FeatureVocab::from_graphs([&g]);
        let data = Dataset::new(vec![g], vocab).unwrap();
        let cfg = Model2DConfig {
            num_layers: 2,
            dagnn_steps: 1,
            hidden_dim: 4,
            ..Default::default()
        };
        TrainState::new(ModelConfig::TwoD(cfg), TrainConfig::defaults(ModelKind::TwoD), &data).unwrap()
    }

    #[test]
    fn bytes_round_trip() {
        let mut state = tiny_state();
        state.optimizer.step = 7;
        state.optimizer.m[0].data_mut()[0] = 0.125;
        state.best_valid_mae = Some(0.3);
        let bytes = to_bytes(&state).unwrap();
        let back = from_bytes(&bytes).unwrap();
        assert_eq!(back, state);
        assert_eq!(to_bytes(&back).unwrap(), bytes);
    }

    #[test]
    fn rejects_wrong_version_and_truncation() {
        let bytes = to_bytes(&tiny_state()).unwrap();
        let mut wrong = bytes.clone();
        wrong[8] = 99;
        assert!(matches!(from_bytes(&wrong), Err(Error::Checkpoint(m)) if m.contains("version")));
        for cut in [0, 10, 30, bytes.len() - 1] {
            assert!(from_bytes(&bytes[..cut]).is_err());
        }
        let mut garbage = bytes;
        garbage[0] = b'X';
        assert!(from_bytes(&garbage).is_err());
    }
}
