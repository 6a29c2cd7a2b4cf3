use std::collections::HashMap;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use super::{load_checkpoint, Model, ModelKind, PredictionRow};
use crate::error::{Error, Result};
use crate::molgraph::Dataset;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnsembleMember {
    pub checkpoint: PathBuf,
    pub kind: ModelKind,
}

/// Checkpoints whose predictions are averaged with equal weight.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnsembleSpec {
    pub members: Vec<EnsembleMember>,
}

impl EnsembleSpec {
    pub fn load_models(&self) -> Result<Vec<Model>> {
        if self.members.is_empty() {
            return Err(Error::invalid("ensemble needs at least one member"));
        }
        self.members
            .iter()
            .map(|m| {
                let state = load_checkpoint(&m.checkpoint)?;
                if state.model.kind() != m.kind {
                    return Err(Error::Checkpoint(format!(
                        "{} holds a {} model, ensemble lists it as {}",
                        m.checkpoint.display(),
                        state.model.kind(),
                        m.kind
                    )));
                }
                Ok(state.model)
            })
            .collect()
    }

    pub fn predict(&self, dataset: &Dataset, ids: &[&str], batch_size: usize) -> Result<Vec<(String, f64)>> {
        let models = self.load_models()?;
        ensemble_predict(&models, dataset, ids, batch_size)
    }
}

/// Per id, the mean over member tables that hold a value for it. Ids keep
/// the order of first appearance; an id no member scored is an error.
pub fn ensemble_average(members: &[Vec<PredictionRow>]) -> Result<Vec<(String, f64)>> {
    if members.is_empty() {
        return Err(Error::invalid("ensemble needs at least one member"));
    }
    let mut order: Vec<&str> = Vec::new();
    let mut acc: HashMap<&str, Vec<f64>> = HashMap::new();
    for table in members {
        for row in table {
            let slot = acc.entry(row.id.as_str()).or_insert_with(|| {
                order.push(row.id.as_str());
                Vec::new()
            });
            if let Some(p) = row.pred {
                slot.push(p);
            }
        }
    }
    order
        .into_iter()
        .map(|id| {
            let vals = &acc[id];
            if vals.is_empty() {
                return Err(Error::invalid(format!("no ensemble member predicts molecule `{id}`")));
            }
            Ok((id.to_string(), vals.iter().sum::<f64>() / vals.len() as f64))
        })
        .collect()
}

/// Averages eval-mode predictions of `models`; models that cannot score a
/// molecule (3D without conformers) are left out for that molecule.
pub fn ensemble_predict(
    models: &[Model],
    dataset: &Dataset,
    ids: &[&str],
    batch_size: usize,
) -> Result<Vec<(String, f64)>> {
    let tables = models
        .iter()
        .map(|m| {
            let preds = m.predict_ids(dataset, ids, batch_size)?;
            Ok(ids
                .iter()
                .zip(preds)
                .map(|(id, pred)| PredictionRow {
                    id: id.to_string(),
                    pred,
                })
                .collect())
        })
        .collect::<Result<Vec<_>>>()?;
    ensemble_average(&tables)
}

/// Both sides of the convexity bound for one evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct JensenReport {
    pub ensemble_mae: f64,
    /// Mean over ids of the mean absolute error of the members scoring that
    /// id; equals the mean of member MAEs when every member scores every id.
    pub member_bound: f64,
}

impl JensenReport {
    /// The bound up to summation round-off.
    pub fn holds(&self) -> bool {
        self.ensemble_mae <= self.member_bound * (1.0 + 1e-12) + 1e-15
    }
}

/// `members[k][i]` is member k's prediction for target i.
pub fn jensen_bound(targets: &[f64], members: &[Vec<Option<f64>>]) -> Result<JensenReport> {
    if targets.is_empty() || members.is_empty() {
        return Err(Error::invalid("jensen bound needs targets and members"));
    }
    if members.iter().any(|m| m.len() != targets.len()) {
        return Err(Error::shape("jensen_bound", "member length differs from targets"));
    }
    let mut ens = 0.0;
    let mut bound = 0.0;
    for (i, &y) in targets.iter().enumerate() {
        let vals: Vec<f64> = members.iter().filter_map(|m| m[i]).collect();
        if vals.is_empty() {
            return Err(Error::invalid(format!("target {i} has no member prediction")));
        }
        let k = vals.len() as f64;
        ens += (vals.iter().sum::<f64>() / k - y).abs();
        bound += vals.iter().map(|p| (p - y).abs()).sum::<f64>() / k;
    }
    let n = targets.len() as f64;
    Ok(JensenReport {
        ensemble_mae: ens / n,
        member_bound: bound / n,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn row(id: &str, pred: Option<f64>) -> PredictionRow {
        PredictionRow { id: id.into(), pred }
    }

    #[test]
    fn averaging_examples() {
        let out = ensemble_average(&[vec![row("x", Some(1.0))], vec![row("x", Some(3.0))]]).unwrap();
        assert_eq!(out, vec![("x".to_string(), 2.0)]);
        let single = ensemble_average(&[vec![row("a", Some(0.7)), row("b", Some(-1.0))]]).unwrap();
        assert_eq!(single, vec![("a".into(), 0.7), ("b".into(), -1.0)]);
        let skip = ensemble_average(&[vec![row("x", Some(1.0))], vec![row("x", None)]]).unwrap();
        assert_eq!(skip, vec![("x".to_string(), 1.0)]);
        assert!(ensemble_average(&[vec![row("x", None)], vec![row("x", None)]]).is_err());
        assert!(ensemble_average(&[]).is_err());
    }

    #[test]
    fn jensen_equals_member_mean_when_complete() {
        let r = jensen_bound(&[0.0, 1.0], &[vec![Some(1.0), Some(1.0)], vec![Some(-1.0), Some(2.0)]]).unwrap();
        assert_eq!(r.ensemble_mae, 0.25);
        assert_eq!(r.member_bound, (0.5 + 1.0) / 2.0);
        assert!(r.holds());
    }

    proptest! {
        #[test]
        fn jensen_bound_holds(
            targets in prop::collection::vec(-5.0f64..5.0, 1..20),
            seeds in prop::collection::vec(prop::collection::vec(-5.0f64..5.0, 20), 1..6),
        ) {
            let members: Vec<Vec<Option<f64>>> = seeds
                .iter()
                .map(|s| s[..targets.len()].iter().map(|&v| Some(v)).collect())
                .collect();
            let r = jensen_bound(&targets, &members).unwrap();
            prop_assert!(r.holds(), "{:?}", r);
        }
    }
}
