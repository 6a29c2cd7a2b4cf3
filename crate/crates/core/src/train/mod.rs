//! MAE training, evaluation, checkpoints and ensembling.

mod adam;
mod checkpoint;
mod ensemble;
mod model;
mod output;

pub use adam::{Adam, AdamConfig};
pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use ensemble::{ensemble_average, ensemble_predict, jensen_bound, EnsembleMember, EnsembleSpec, JensenReport};
pub use model::{Model, ModelConfig, ModelKind};
pub use output::{read_predictions, write_predictions, MetricsWriter, PredictionRow};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::{Mode, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::molgraph::{Dataset, SplitSpec};
use crate::seed::derive_seed;

/// Reads `MOLGNN_DETERMINISTIC`; `1` (or `true`) forces deterministic mode.
pub fn deterministic_forced_by_env() -> bool {
    std::env::var("MOLGNN_DETERMINISTIC")
        .map(|v| matches!(v.trim(), "1" | "true"))
        .unwrap_or(false)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub kind: ModelKind,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr0: f64,
    pub decay_factor: f64,
    pub decay_every: usize,
    /// Epochs of linear ramp up to the scheduled rate; 0 disables it.
    #[serde(default)]
    pub warmup_epochs: usize,
    pub seed: u64,
    #[serde(default)]
    pub adam: AdamConfig,
    /// Order-independent reductions in training passes.
    #[serde(default = "default_true")]
    pub deterministic: bool,
}

fn default_true() -> bool {
    true
}

impl TrainConfig {
    pub fn defaults(kind: ModelKind) -> Self {
        let (epochs, decay_factor, decay_every) = match kind {
            ModelKind::TwoD => (100, 0.25, 30),
            ModelKind::ThreeD => (60, 0.1, 40),
        };
        TrainConfig {
            kind,
            epochs,
            batch_size: 256,
            lr0: 1e-3,
            decay_factor,
            decay_every,
            warmup_epochs: 0,
            seed: 0,
            adam: AdamConfig::default(),
            deterministic: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.into()));
        if self.epochs == 0 {
            return fail("epochs must be at least 1");
        }
        if self.batch_size == 0 {
            return fail("batch_size must be at least 1");
        }
        if !(self.lr0.is_finite() && self.lr0 >= 0.0) {
            return fail("lr0 must be finite and non-negative");
        }
        if !(self.decay_factor > 0.0 && self.decay_factor <= 1.0) {
            return fail("decay_factor must lie in (0, 1]");
        }
        if self.decay_every == 0 {
            return fail("decay_every must be at least 1");
        }
        self.adam.validate()
    }

    pub fn lr_at_epoch(&self, epoch: usize) -> f64 {
        lr_at_epoch(self, epoch)
    }
}

/// `lr0 · decay_factor^⌊epoch / decay_every⌋`, epochs counted from 0,
/// scaled by `(epoch + 1) / warmup_epochs` during warmup.
pub fn lr_at_epoch(cfg: &TrainConfig, epoch: usize) -> f64 {
    let k = (epoch / cfg.decay_every.max(1)) as i32;
    let lr = cfg.lr0 * cfg.decay_factor.powi(k);
    if epoch < cfg.warmup_epochs {
        lr * (epoch + 1) as f64 / cfg.warmup_epochs as f64
    } else {
        lr
    }
}

/// Mean absolute error as a tape scalar. Shapes must agree.
pub fn mae_loss(tape: &mut Tape, pred: Var, target: Var) -> Result<Var> {
    if tape.value(pred).is_empty() {
        return Err(Error::shape("mae_loss", "empty prediction"));
    }
    let diff = tape.sub(pred, target)?;
    let a = tape.abs(diff)?;
    tape.mean(a)
}

/// Plain MAE over paired values.
pub fn mae(pred: &[f64], target: &[f64]) -> Result<f64> {
    if pred.len() != target.len() {
        return Err(Error::shape(
            "mae",
            format!("{} predictions for {} targets", pred.len(), target.len()),
        ));
    }
    if pred.is_empty() {
        return Err(Error::shape("mae", "empty input"));
    }
    Ok(pred.iter().zip(target).map(|(p, t)| (p - t).abs()).sum::<f64>() / pred.len() as f64)
}

/// Everything needed to continue training: model, optimizer and progress.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub model: Model,
    pub optimizer: Adam,
    pub config: TrainConfig,
    /// Number of completed epochs.
    pub epoch: usize,
    pub best_valid_mae: Option<f64>,
}

impl TrainState {
    /// Fresh model initialized from `config.seed`.
    pub fn new(model_config: ModelConfig, config: TrainConfig, dataset: &Dataset) -> Result<Self> {
        config.validate()?;
        if model_config.kind() != config.kind {
            return Err(Error::Config(format!(
                "model section is {} but training kind is {}",
                model_config.kind(),
                config.kind
            )));
        }
        let model = Model::new(model_config, dataset.vocab.clone(), derive_seed(config.seed, "init"))?;
        let optimizer = Adam::new(config.adam.clone(), model.store());
        Ok(TrainState {
            model,
            optimizer,
            config,
            epoch: 0,
            best_valid_mae: None,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochStats {
    /// Size-weighted mean of the training-mode batch losses.
    pub train_loss: f64,
    /// Mean global gradient norm over batches.
    pub grad_norm: f64,
    pub batches: usize,
    /// Train ids the model could not use (3D without conformers).
    pub skipped: usize,
}

/// Sizes of consecutive batches covering `n` items; the last may be short.
pub fn batch_sizes(n: usize, batch_size: usize) -> Vec<usize> {
    (0..n.div_ceil(batch_size))
        .map(|b| batch_size.min(n - b * batch_size))
        .collect()
}

/// One pass over `train_ids` at the learning rate of epoch `state.epoch`;
/// increments `state.epoch` on success.
pub fn train_epoch(state: &mut TrainState, dataset: &Dataset, train_ids: &[String]) -> Result<EpochStats> {
    let epoch = state.epoch;
    let cfg = state.config.clone();
    let lr = cfg.lr_at_epoch(epoch);
    let mut ids: Vec<&str> = train_ids
        .iter()
        .map(String::as_str)
        .filter(|id| state.model.can_predict(dataset, id))
        .collect();
    let skipped = train_ids.len() - ids.len();
    if ids.is_empty() {
        return Err(Error::invalid("no usable training molecules"));
    }
    let mut shuffle = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &format!("shuffle.{epoch}")));
    ids.shuffle(&mut shuffle);
    let mut conf_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &format!("conformers.{epoch}")));

    let mut loss_sum = 0.0;
    let mut norm_sum = 0.0;
    let mut batches = 0;
    for (b, chunk) in ids.chunks(cfg.batch_size).enumerate() {
        let dropout_seed = derive_seed(cfg.seed, &format!("dropout.{epoch}.{b}"));
        let step = train_step(state, dataset, chunk, &mut conf_rng, dropout_seed, lr).map_err(|e| Error::Batch {
            batch: b,
            ids: chunk.iter().map(|s| s.to_string()).collect(),
            source: Box::new(e),
        })?;
        loss_sum += step.0 * chunk.len() as f64;
        norm_sum += step.1;
        batches += 1;
    }
    state.epoch += 1;
    Ok(EpochStats {
        train_loss: loss_sum / ids.len() as f64,
        grad_norm: norm_sum / batches as f64,
        batches,
        skipped,
    })
}

/// Forward, backward and one optimizer update; returns (loss, grad norm).
fn train_step(
    state: &mut TrainState,
    dataset: &Dataset,
    ids: &[&str],
    conf_rng: &mut ChaCha8Rng,
    dropout_seed: u64,
    lr: f64,
) -> Result<(f64, f64)> {
    let batch = state.model.make_batch(dataset, ids, Some(conf_rng))?;
    let targets = batch.require_targets()?;
    let (loss, grads, stats) = {
        let mut tape =
            Tape::new(state.model.store(), Mode::Train, dropout_seed).with_deterministic(state.config.deterministic);
        let pred = state.model.forward(&mut tape, &batch)?;
        let target = tape.constant(Tensor::new(vec![targets.len(), 1], targets)?);
        let loss = mae_loss(&mut tape, pred, target)?;
        let grads = tape.backward_scalar(loss)?;
        (tape.value(loss).data()[0], grads, tape.take_running_stats())
    };
    let store = state.model.store_mut();
    store.zero_grad();
    store.accumulate(&grads);
    let norm = Adam::grad_norm(store);
    state.optimizer.update(store, lr)?;
    for s in &stats {
        s.apply(store);
    }
    store.zero_grad();
    Ok((loss, norm))
}

#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    /// MAE over scored molecules; `None` when nothing was scored.
    pub mae: Option<f64>,
    /// Scored ids with their predictions, in request order.
    pub predictions: Vec<(String, f64)>,
    /// Ids the model could not score (3D without conformers).
    pub skipped: Vec<String>,
}

/// Eval-mode MAE on `ids`. Every scored id needs a target.
pub fn evaluate(model: &Model, dataset: &Dataset, ids: &[String], batch_size: usize) -> Result<Evaluation> {
    let refs: Vec<&str> = ids.iter().map(String::as_str).collect();
    let preds = model.predict_ids(dataset, &refs, batch_size)?;
    let mut predictions = Vec::new();
    let mut skipped = Vec::new();
    let mut total = 0.0;
    for (id, p) in ids.iter().zip(preds) {
        match p {
            Some(p) => {
                let t = dataset
                    .get(id)?
                    .target
                    .ok_or_else(|| Error::invalid(format!("molecule `{id}` has no target")))?;
                total += (p - t).abs();
                predictions.push((id.clone(), p));
            }
            None => skipped.push(id.clone()),
        }
    }
    let mae = (!predictions.is_empty()).then(|| total / predictions.len() as f64);
    Ok(Evaluation {
        mae,
        predictions,
        skipped,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_mae: f64,
    pub valid_mae: Option<f64>,
}

/// Trains from `state.epoch` up to `config.epochs`, evaluating the split's
/// validation ids after each epoch. `on_epoch` sees every record together
/// with the updated state and whether it is the best so far.
pub fn fit(
    state: &mut TrainState,
    dataset: &Dataset,
    split: &SplitSpec,
    mut on_epoch: impl FnMut(&EpochRecord, &TrainState, bool) -> Result<()>,
) -> Result<Vec<EpochRecord>> {
    let mut history = Vec::new();
    while state.epoch < state.config.epochs {
        let lr = state.config.lr_at_epoch(state.epoch);
        let stats = train_epoch(state, dataset, &split.train)?;
        let valid_mae = if split.valid.is_empty() {
            None
        } else {
            evaluate(&state.model, dataset, &split.valid, state.config.batch_size)?.mae
        };
        let improved = match (valid_mae, state.best_valid_mae) {
            (Some(v), Some(best)) => v < best,
            (Some(_), None) => true,
            (None, _) => false,
        };
        if improved {
            state.best_valid_mae = valid_mae;
        }
        let record = EpochRecord {
            epoch: state.epoch - 1,
            lr,
            train_mae: stats.train_loss,
            valid_mae,
        };
        on_epoch(&record, state, improved)?;
        history.push(record);
    }
    Ok(history)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mae_examples() {
        assert_eq!(mae(&[1.0, 2.0], &[1.0, 4.0]).unwrap(), 1.0);
        assert_eq!(mae(&[0.3, -1.0], &[0.3, -1.0]).unwrap(), 0.0);
        assert!(mae(&[1.0], &[1.0, 2.0]).is_err());
        let store = crate::diffcore::ParamStore::new();
        let mut tape = Tape::new(&store, Mode::Eval, 0);
        let p = tape.constant(Tensor::vector(vec![1.0, 2.0]));
        let t = tape.constant(Tensor::vector(vec![1.0, 4.0]));
        let l = mae_loss(&mut tape, p, t).unwrap();
        assert_eq!(tape.value(l).data(), &[1.0]);
        let short = tape.constant(Tensor::vector(vec![1.0]));
        assert!(mae_loss(&mut tape, p, short).is_err());
    }

    #[test]
    fn mae_gradient_is_sign_over_m() {
        let mut store = crate::diffcore::ParamStore::new();
        let id = store.add("p", Tensor::vector(vec![0.5, -2.0, 3.0]), true);
        let mut tape = Tape::new(&store, Mode::Eval, 0);
        let p = tape.param(id);
        let t = tape.constant(Tensor::vector(vec![0.0, 1.0, 2.5]));
        let l = mae_loss(&mut tape, p, t).unwrap();
        let g = tape.backward_scalar(l).unwrap();
        assert_eq!(g.get(id).unwrap().data(), &[1.0 / 3.0, -1.0 / 3.0, 1.0 / 3.0]);
        drop(tape);
        let report =
            crate::diffcore::finite_diff_check(&mut store, &crate::diffcore::GradCheckOptions::default(), |tape| {
                let p = tape.param(id);
                let t = tape.constant(Tensor::vector(vec![0.0, 1.0, 2.5]));
                mae_loss(tape, p, t)
            })
            .unwrap();
        assert!(report.max_rel_error < 1e-8);
    }

    #[test]
    fn schedule_breakpoints() {
        let two = TrainConfig::defaults(ModelKind::TwoD);
        assert_eq!(lr_at_epoch(&two, 0), 0.001);
        assert_eq!(lr_at_epoch(&two, 29), 0.001);
        assert!((lr_at_epoch(&two, 30) - 0.00025).abs() < 1e-18);
        assert!((lr_at_epoch(&two, 60) - 0.0000625).abs() < 1e-18);
        let three = TrainConfig::defaults(ModelKind::ThreeD);
        assert!((lr_at_epoch(&three, 39) - 0.001).abs() < 1e-18);
        assert!((lr_at_epoch(&three, 40) - 0.0001).abs() < 1e-18);
        let flat = TrainConfig {
            decay_factor: 1.0,
            ..two.clone()
        };
        assert!((0..200).all(|e| lr_at_epoch(&flat, e) == 0.001));
        for e in 1..200 {
            let (a, b) = (lr_at_epoch(&two, e - 1), lr_at_epoch(&two, e));
            assert!(b <= a);
            assert_eq!(b < a, e % two.decay_every == 0);
        }
    }

    #[test]
    fn warmup_ramp() {
        let cfg = TrainConfig {
            lr0: 0.01,
            decay_factor: 0.2,
            decay_every: 50,
            warmup_epochs: 10,
            ..TrainConfig::defaults(ModelKind::TwoD)
        };
        assert!((lr_at_epoch(&cfg, 0) - 0.001).abs() < 1e-15);
        assert!((lr_at_epoch(&cfg, 4) - 0.005).abs() < 1e-15);
        assert_eq!(lr_at_epoch(&cfg, 9), 0.01);
        assert_eq!(lr_at_epoch(&cfg, 49), 0.01);
        assert!((lr_at_epoch(&cfg, 50) - 0.002).abs() < 1e-15);
    }

    #[test]
    fn partition_arithmetic() {
        assert_eq!(batch_sizes(10, 4), vec![4, 4, 2]);
        assert_eq!(batch_sizes(8, 4), vec![4, 4]);
        assert_eq!(batch_sizes(3, 256), vec![3]);
    }

    #[test]
    fn config_defaults_and_validation() {
        let c = TrainConfig::defaults(ModelKind::TwoD);
        assert_eq!((c.epochs, c.batch_size, c.lr0), (100, 256, 1e-3));
        assert!(c.validate().is_ok());
        assert!(TrainConfig { epochs: 0, ..c.clone() }.validate().is_err());
        assert!(TrainConfig {
            decay_factor: 0.0,
            ..c.clone()
        }
        .validate()
        .is_err());
        assert!(TrainConfig { decay_factor: 1.5, ..c }.validate().is_err());
    }
}
