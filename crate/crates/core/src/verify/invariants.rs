use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{max_abs_diff, Check, VerifyOptions};
use crate::diffcore::{Mode, ParamStore, Tape, Tensor};
use crate::error::Result;
use crate::fixtures::{random_rotation, rigid_transform, synthetic_dataset, FixtureSpec};
use crate::gnn2d::{softmax_agg, Model2D, Model2DConfig};
use crate::gnn3d::{Model3D, Model3DConfig};
use crate::molgraph::{batch_graphs, ConformerSet, Coords, MolecularGraph};
use crate::train::{ensemble_predict, jensen_bound, Model, ModelConfig};

fn predict_2d(model: &Model2D, graphs: &[&MolecularGraph], mode: Mode) -> Result<Vec<f64>> {
    let batch = batch_graphs(graphs)?;
    let mut tape = Tape::new(&model.store, mode, 0);
    let out = model.forward(&mut tape, &batch)?;
    Ok(tape.value(out).data().to_vec())
}

fn predict_3d(model: &Model3D, graph: &MolecularGraph, confs: Vec<Coords>, mode: Mode) -> Result<f64> {
    let batch = batch_graphs(&[graph])?.with_conformers(vec![confs])?;
    let mut tape = Tape::new(&model.store, mode, 0);
    let out = model.forward(&mut tape, &batch)?;
    Ok(tape.value(out).data()[0])
}

fn permute_coords(coords: &[[f64; 3]], perm: &[usize]) -> Coords {
    let mut out = vec![[0.0; 3]; coords.len()];
    for (old, c) in coords.iter().enumerate() {
        out[perm[old]] = *c;
    }
    out
}

fn exact(name: &str, a: &[f64], b: &[f64]) -> Check {
    let d = max_abs_diff(a, b);
    Check::new(name, a == b, format!("max |Δ| = {d:.3e} (exact equality required)"))
}

pub fn invariants_suite(opts: &VerifyOptions) -> Result<Vec<Check>> {
    let data = synthetic_dataset(FixtureSpec {
        molecules: 8,
        seed: opts.seed ^ 0x1a7,
        ..Default::default()
    })?;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut checks = Vec::new();

    let model2d = Model2D::new(
        Model2DConfig {
            num_layers: 3,
            dagnn_steps: 3,
            hidden_dim: 16,
            dropout: 0.0,
            ..Default::default()
        },
        data.vocab.clone(),
        opts.seed,
    )?;
    let model3d = Model3D::new(
        Model3DConfig {
            num_confdss_layers: 2,
            hidden_dim: 16,
            num_rbf: 16,
            ..Default::default()
        },
        data.vocab.clone(),
        opts.seed,
    )?;

    // Atom relabelling, one molecule at a time and as a whole batch.
    let perms: Vec<Vec<usize>> = data
        .graphs
        .iter()
        .map(|g| {
            let mut p: Vec<usize> = (0..g.num_nodes).collect();
            p.shuffle(&mut rng);
            p
        })
        .collect();
    let permuted: Vec<MolecularGraph> = data.graphs.iter().zip(&perms).map(|(g, p)| g.permuted(p)).collect();
    let orig_refs: Vec<&MolecularGraph> = data.graphs.iter().collect();
    let perm_refs: Vec<&MolecularGraph> = permuted.iter().collect();
    for mode in [Mode::Eval, Mode::Train] {
        let a = predict_2d(&model2d, &orig_refs, mode)?;
        let b = predict_2d(&model2d, &perm_refs, mode)?;
        checks.push(exact(&format!("atom_permutation_2d_{mode:?}").to_lowercase(), &a, &b));
    }
    for mode in [Mode::Eval, Mode::Train] {
        let mut a = Vec::new();
        let mut b = Vec::new();
        for ((g, pg), p) in data.graphs.iter().zip(&permuted).zip(&perms) {
            let confs = data.conformers_of(&g.id).to_vec();
            let pconfs = confs.iter().map(|c| permute_coords(c, p)).collect();
            a.push(predict_3d(&model3d, g, confs, mode)?);
            b.push(predict_3d(&model3d, pg, pconfs, mode)?);
        }
        checks.push(exact(&format!("atom_permutation_3d_{mode:?}").to_lowercase(), &a, &b));
    }

    // Rigid motions of every conformer.
    let mut worst: f64 = 0.0;
    for g in &data.graphs {
        let confs = data.conformers_of(&g.id).to_vec();
        let rot = random_rotation(&mut rng);
        let shift: [f64; 3] = std::array::from_fn(|_| rng.gen_range(-20.0..20.0));
        let moved = confs.iter().map(|c| rigid_transform(c, &rot, shift)).collect();
        let a = predict_3d(&model3d, g, confs, Mode::Eval)?;
        let b = predict_3d(&model3d, g, moved, Mode::Eval)?;
        worst = worst.max((a - b).abs());
    }
    checks.push(Check::within("e3_invariance_3d", worst, 1e-8));

    // Conformer order and duplication.
    let mut base = Vec::new();
    let mut reversed = Vec::new();
    let mut duplicated = Vec::new();
    for g in &data.graphs {
        let confs = data.conformers_of(&g.id).to_vec();
        let mut rev = confs.clone();
        rev.reverse();
        let mut dup = confs.clone();
        dup.push(confs[0].clone());
        base.push(predict_3d(&model3d, g, confs, Mode::Eval)?);
        reversed.push(predict_3d(&model3d, g, rev, Mode::Eval)?);
        duplicated.push(predict_3d(&model3d, g, dup, Mode::Eval)?);
    }
    checks.push(exact("conformer_permutation", &base, &reversed));
    checks.push(exact("conformer_duplication", &base, &duplicated));

    // SoftMax aggregation limits.
    let store = ParamStore::new();
    let mut mean_ok = true;
    let mut max_err: f64 = 0.0;
    for _ in 0..20 {
        let k = rng.gen_range(1..8);
        let f = 3;
        let n = 2;
        let dst: Vec<usize> = (0..k).map(|_| rng.gen_range(0..n)).collect();
        let vals: Vec<f64> = (0..k * f).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let mut tape = Tape::new(&store, Mode::Eval, 0);
        let m = tape.constant(Tensor::new(vec![k, f], vals)?);
        let zero = tape.constant(Tensor::scalar(0.0));
        let agg = softmax_agg(&mut tape, m, zero, &dst, n)?;
        let mean = tape.segment_mean(m, &dst, n)?;
        mean_ok &= tape.value(agg) == tape.value(mean);

        // Gap ≥ 0.5 between the top value and the rest of each column.
        let mut gapped = vec![0.0; k * f];
        for node in 0..n {
            let rows: Vec<usize> = (0..k).filter(|&r| dst[r] == node).collect();
            for c in 0..f {
                let top = rng.gen_range(0.0..2.0);
                let winner = rows.first().map(|_| rows[rng.gen_range(0..rows.len())]);
                for &r in &rows {
                    gapped[r * f + c] = if Some(r) == winner {
                        top
                    } else {
                        top - rng.gen_range(0.5..3.0)
                    };
                }
            }
        }
        let gm = tape.constant(Tensor::new(vec![k, f], gapped)?);
        let fifty = tape.constant(Tensor::scalar(50.0));
        let soft = softmax_agg(&mut tape, gm, fifty, &dst, n)?;
        let hard = tape.segment_max(gm, &dst, n)?;
        max_err = max_err.max(tape.value(soft).max_abs_diff(tape.value(hard)));
    }
    checks.push(Check::new(
        "softmax_agg_beta0_is_mean",
        mean_ok,
        "exact equality with segment mean".to_string(),
    ));
    checks.push(Check::within("softmax_agg_beta50_is_max", max_err, 1e-8));

    // Convexity of the ensemble error, with some molecules lacking conformers.
    let mut data_gaps = data.clone();
    let mut sets: HashMap<String, ConformerSet> = data.conformers.clone().unwrap_or_default();
    for id in ["mol-001", "mol-004"] {
        sets.insert(
            id.to_string(),
            ConformerSet {
                id: id.to_string(),
                conformers: Vec::new(),
            },
        );
    }
    data_gaps.conformers = Some(sets);
    let cfg2 = ModelConfig::TwoD(model2d.config.clone());
    let members = vec![
        Model::new(cfg2.clone(), data.vocab.clone(), opts.seed + 1)?,
        Model::new(cfg2, data.vocab.clone(), opts.seed + 2)?,
        Model::ThreeD(model3d.clone()),
    ];
    let ids: Vec<&str> = data_gaps.ids().collect();
    let targets: Vec<f64> = data_gaps.graphs.iter().map(|g| g.target.unwrap_or(0.0)).collect();
    let preds = members
        .iter()
        .map(|m| m.predict_ids(&data_gaps, &ids, 4))
        .collect::<Result<Vec<_>>>()?;
    let report = jensen_bound(&targets, &preds)?;
    checks.push(Check::new(
        "jensen_bound",
        report.holds(),
        format!(
            "ensemble {:.6} ≤ member bound {:.6}",
            report.ensemble_mae, report.member_bound
        ),
    ));
    let ens = ensemble_predict(&members, &data_gaps, &ids, 4)?;
    let mut served = true;
    for (k, (id, value)) in ens.iter().enumerate() {
        let avail: Vec<f64> = preds.iter().filter_map(|p| p[k]).collect();
        let expected = avail.iter().sum::<f64>() / avail.len() as f64;
        let no_confs = data_gaps.conformers_of(id).is_empty();
        served &= *value == expected && (avail.len() == 2) == no_confs;
    }
    checks.push(Check::new(
        "conformerless_2d_only_average",
        served,
        "conformer-less molecules average the 2D members only".to_string(),
    ));
    Ok(checks)
}
