use std::time::Instant;

use super::Check;
use crate::error::Result;
use crate::fixtures::{synthetic_dataset, train_on_all, FixtureSpec};
use crate::gnn2d::Model2DConfig;
use crate::gnn3d::Model3DConfig;
use crate::train::{evaluate, fit, ModelConfig, ModelKind, TrainConfig, TrainState};

/// A memorization run on the 32-molecule fixture.
#[derive(Clone, Debug)]
pub struct OverfitSettings {
    pub name: &'static str,
    pub fixture: FixtureSpec,
    pub model: ModelConfig,
    pub train: TrainConfig,
    /// Eval-mode training MAE that must be undercut.
    pub threshold: f64,
}

/// Full-batch schedule shared by both pilots: 10 warmup epochs, then
/// 1e-2 decayed by 0.2 every 50 epochs.
fn pilot_schedule(kind: ModelKind, fixture: &FixtureSpec) -> TrainConfig {
    TrainConfig {
        epochs: 200,
        batch_size: fixture.molecules,
        lr0: 1e-2,
        decay_factor: 0.2,
        decay_every: 50,
        warmup_epochs: 10,
        seed: 0,
        ..TrainConfig::defaults(kind)
    }
}

impl OverfitSettings {
    /// 2D model with 4 layers, 2 diffusion steps and width 64.
    pub fn two_d() -> Self {
        let fixture = FixtureSpec::default();
        OverfitSettings {
            name: "overfit_2d",
            fixture,
            model: ModelConfig::TwoD(Model2DConfig {
                num_layers: 4,
                dagnn_steps: 2,
                hidden_dim: 64,
                dropout: 0.0,
                ..Default::default()
            }),
            train: pilot_schedule(ModelKind::TwoD, &fixture),
            threshold: 0.02,
        }
    }

    /// 3D model with 2 ConfDSS layers on two conformers per molecule.
    pub fn three_d() -> Self {
        let fixture = FixtureSpec::default();
        OverfitSettings {
            name: "overfit_3d",
            fixture,
            model: ModelConfig::ThreeD(Model3DConfig {
                num_confdss_layers: 2,
                hidden_dim: 64,
                num_rbf: 32,
                ..Default::default()
            }),
            train: pilot_schedule(ModelKind::ThreeD, &fixture),
            threshold: 0.05,
        }
    }
}

#[derive(Clone, Debug)]
pub struct OverfitReport {
    pub name: &'static str,
    /// Training loss of the last epoch.
    pub final_mae: f64,
    /// Eval-mode MAE on the same molecules after training.
    pub eval_mae: f64,
    pub threshold: f64,
    pub seconds: f64,
    pub train_loss: Vec<f64>,
}

impl OverfitReport {
    pub fn check(&self) -> Check {
        Check::new(
            self.name,
            self.final_mae < self.threshold,
            format!(
                "train MAE {:.4} after {} epochs, threshold < {} (eval-mode MAE {:.4}), {:.1}s",
                self.final_mae,
                self.train_loss.len(),
                self.threshold,
                self.eval_mae,
                self.seconds
            ),
        )
    }
}

fn run(settings: &OverfitSettings) -> Result<OverfitReport> {
    let data = synthetic_dataset(settings.fixture)?;
    let split = train_on_all(&data);
    let mut state = TrainState::new(settings.model.clone(), settings.train.clone(), &data)?;
    let started = Instant::now();
    let history = fit(&mut state, &data, &split, |_, _, _| Ok(()))?;
    let eval_mae = evaluate(&state.model, &data, &split.train, 64)?
        .mae
        .unwrap_or(f64::INFINITY);
    let train_loss: Vec<f64> = history.iter().map(|r| r.train_mae).collect();
    Ok(OverfitReport {
        name: settings.name,
        final_mae: train_loss.last().copied().unwrap_or(f64::INFINITY),
        eval_mae,
        threshold: settings.threshold,
        seconds: started.elapsed().as_secs_f64(),
        train_loss,
    })
}

pub fn overfit_2d(settings: &OverfitSettings) -> Result<OverfitReport> {
    run(settings)
}

pub fn overfit_3d(settings: &OverfitSettings) -> Result<OverfitReport> {
    run(settings)
}
