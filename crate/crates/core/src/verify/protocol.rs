use std::collections::{BTreeSet, HashMap};

use super::{Check, VerifyOptions};
use crate::error::Result;
use crate::fixtures::{synthetic_dataset, synthetic_split, FixtureSpec};
use crate::gnn2d::Model2DConfig;
use crate::gnn3d::Model3DConfig;
use crate::molgraph::{make_new_splits, ConformerSet, Dataset, SplitSpec};
use crate::train::{
    ensemble_average, evaluate, fit, jensen_bound, ModelConfig, ModelKind, PredictionRow, TrainConfig, TrainState,
};

fn split_check(seed: u64) -> Result<Check> {
    let base = synthetic_split(800, 100, 100);
    let folds = make_new_splits(&base, 5, seed)?;
    let again = make_new_splits(&base, 5, seed)?;
    let mut ok = folds == again && folds.len() == 5;
    let mut union = BTreeSet::new();
    for f in &folds {
        f.validate()?;
        ok &= (f.train.len(), f.valid.len(), f.test.len()) == (880, 20, 100);
        ok &= f.test == base.test;
        let train: BTreeSet<_> = f.train.iter().collect();
        ok &= base.train.iter().all(|id| train.contains(id));
        ok &= f.valid.iter().all(|id| !train.contains(id));
        for id in &f.valid {
            ok &= union.insert(id.clone());
        }
    }
    let original: BTreeSet<String> = base.valid.iter().cloned().collect();
    ok &= union == original;
    Ok(Check::new(
        "new_splits_partition",
        ok,
        "5 folds of 880/20/100 (88%/2%/10%), valid parts partition the original validation set",
    ))
}

fn tiny_2d() -> ModelConfig {
    ModelConfig::TwoD(Model2DConfig {
        num_layers: 2,
        dagnn_steps: 2,
        hidden_dim: 8,
        dropout: 0.25,
        ..Default::default()
    })
}

fn tiny_3d() -> ModelConfig {
    ModelConfig::ThreeD(Model3DConfig {
        num_confdss_layers: 1,
        hidden_dim: 8,
        num_rbf: 8,
        max_train_conformers: 2,
        ..Default::default()
    })
}

fn tiny_train(kind: ModelKind, seed: u64, epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        batch_size: 5,
        seed,
        ..TrainConfig::defaults(kind)
    }
}

fn trained(model: ModelConfig, cfg: TrainConfig, data: &Dataset, split: &SplitSpec) -> Result<TrainState> {
    let mut state = TrainState::new(model, cfg, data)?;
    fit(&mut state, data, split, |_, _, _| Ok(()))?;
    Ok(state)
}

pub fn protocol_suite(opts: &VerifyOptions) -> Result<Vec<Check>> {
    let mut checks = vec![Check::from_result("new_splits_partition", split_check(opts.seed))];

    let mut data = synthetic_dataset(FixtureSpec {
        molecules: 16,
        conformers: 3,
        seed: opts.seed ^ 0x9e,
        ..Default::default()
    })?;
    let mut sets: HashMap<String, ConformerSet> = data.conformers.take().unwrap_or_default();
    for id in ["mol-003", "mol-010"] {
        sets.insert(
            id.to_string(),
            ConformerSet {
                id: id.to_string(),
                conformers: Vec::new(),
            },
        );
    }
    data.conformers = Some(sets);
    let ids: Vec<String> = data.ids().map(String::from).collect();
    let split = SplitSpec {
        name: "protocol".into(),
        train: ids[..12].to_vec(),
        valid: ids[12..].to_vec(),
        test: Vec::new(),
    };

    let members = [
        trained(tiny_2d(), tiny_train(ModelKind::TwoD, opts.seed, 3), &data, &split)?,
        trained(tiny_2d(), tiny_train(ModelKind::TwoD, opts.seed + 1, 3), &data, &split)?,
        trained(tiny_3d(), tiny_train(ModelKind::ThreeD, opts.seed, 3), &data, &split)?,
    ];

    // Ensemble error bound on the validation and the full id lists.
    let mut bound_ok = true;
    let mut detail = String::new();
    for (label, list) in [("valid", &split.valid), ("all", &ids)] {
        let refs: Vec<&str> = list.iter().map(String::as_str).collect();
        let targets: Vec<f64> = refs
            .iter()
            .map(|id| data.get(id).map(|g| g.target.unwrap_or(0.0)))
            .collect::<Result<_>>()?;
        let preds = members
            .iter()
            .map(|m| m.model.predict_ids(&data, &refs, 4))
            .collect::<Result<Vec<_>>>()?;
        let r = jensen_bound(&targets, &preds)?;
        bound_ok &= r.holds();
        detail.push_str(&format!("{label}: {:.5} ≤ {:.5}; ", r.ensemble_mae, r.member_bound));
    }
    checks.push(Check::new("ensemble_jensen_bound", bound_ok, detail.trim_end()));

    // Conformer-less molecules: the 3D member abstains, 2D members decide.
    let refs: Vec<&str> = ids.iter().map(String::as_str).collect();
    let tables = members
        .iter()
        .map(|m| {
            Ok(refs
                .iter()
                .zip(m.model.predict_ids(&data, &refs, 4)?)
                .map(|(id, pred)| PredictionRow {
                    id: id.to_string(),
                    pred,
                })
                .collect::<Vec<_>>())
        })
        .collect::<Result<Vec<_>>>()?;
    let averaged = ensemble_average(&tables)?;
    let mut served = true;
    for (k, (id, v)) in averaged.iter().enumerate() {
        let p2: Vec<f64> = tables[..2]
            .iter()
            .map(|t| t[k].pred.expect("2D always predicts"))
            .collect();
        let p3 = tables[2][k].pred;
        let expected = match p3 {
            Some(p) => (p2[0] + p2[1] + p) / 3.0,
            None => (p2[0] + p2[1]) / 2.0,
        };
        served &= *v == expected && p3.is_none() == data.conformers_of(id).is_empty();
    }
    let eval3 = evaluate(&members[2].model, &data, &ids, 4)?;
    served &= eval3.skipped == vec!["mol-003".to_string(), "mol-010".to_string()];
    checks.push(Check::new(
        "conformerless_served_by_2d",
        served,
        "3D abstains on 2 conformer-less molecules; their ensemble value is the 2D mean",
    ));

    // Checkpoint round trip.
    let dir = std::env::temp_dir().join(format!("molgnn-protocol-{}-{}", std::process::id(), opts.seed));
    std::fs::create_dir_all(&dir)?;
    let mut round_trip = true;
    for (k, m) in members.iter().enumerate() {
        let p1 = dir.join(format!("m{k}.ckpt"));
        let p2 = dir.join(format!("m{k}.again.ckpt"));
        crate::train::save_checkpoint(m, &p1)?;
        let loaded = crate::train::load_checkpoint(&p1)?;
        crate::train::save_checkpoint(&loaded, &p2)?;
        round_trip &= std::fs::read(&p1)? == std::fs::read(&p2)?;
        round_trip &= loaded.model.predict_ids(&data, &refs, 4)? == m.model.predict_ids(&data, &refs, 4)?;
        round_trip &= loaded == *m;
    }
    checks.push(Check::new(
        "checkpoint_round_trip",
        round_trip,
        "save→load→save byte-identical; eval predictions bit-identical",
    ));

    // Deterministic reruns and resumption.
    let mut rerun = true;
    for (model, kind) in [(tiny_2d(), ModelKind::TwoD), (tiny_3d(), ModelKind::ThreeD)] {
        let a = trained(model.clone(), tiny_train(kind, 5, 3), &data, &split)?;
        let b = trained(model.clone(), tiny_train(kind, 5, 3), &data, &split)?;
        let pa = dir.join("a.ckpt");
        let pb = dir.join("b.ckpt");
        crate::train::save_checkpoint(&a, &pa)?;
        crate::train::save_checkpoint(&b, &pb)?;
        rerun &= std::fs::read(&pa)? == std::fs::read(&pb)?;

        let mut partial = TrainState::new(model, tiny_train(kind, 5, 2), &data)?;
        fit(&mut partial, &data, &split, |_, _, _| Ok(()))?;
        let pp = dir.join("partial.ckpt");
        crate::train::save_checkpoint(&partial, &pp)?;
        let mut resumed = crate::train::load_checkpoint(&pp)?;
        resumed.config.epochs = 3;
        fit(&mut resumed, &data, &split, |_, _, _| Ok(()))?;
        let pr = dir.join("resumed.ckpt");
        crate::train::save_checkpoint(&resumed, &pr)?;
        rerun &= std::fs::read(&pa)? == std::fs::read(&pr)?;
    }
    let _ = std::fs::remove_dir_all(&dir);
    checks.push(Check::new(
        "deterministic_rerun",
        rerun,
        "same seed gives byte-identical checkpoints; resumed training matches uninterrupted",
    ));
    Ok(checks)
}
