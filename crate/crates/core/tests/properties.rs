use std::collections::BTreeSet;

use molgnn::fixtures::{fixture_vocab, random_conformer, random_molecule, random_rotation, rigid_transform};
use molgnn::gnn2d::{Model2D, Model2DConfig};
use molgnn::gnn3d::{build_radius_graph, Model3D, Model3DConfig};
use molgnn::molgraph::{batch_graphs, make_new_splits, normalized_adjacency, Coords, SplitSpec};
use molgnn::train::{lr_at_epoch, ModelKind, TrainConfig};
use molgnn::verify::brute_force_radius_graph;
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn ids(prefix: &str, n: usize) -> Vec<String> {
    (0..n).map(|i| format!("{prefix}{i}")).collect()
}

fn sorted(v: &[String]) -> Vec<String> {
    let mut v = v.to_vec();
    v.sort();
    v
}

fn permute_coords(coords: &[[f64; 3]], perm: &[usize]) -> Coords {
    let mut out = vec![[0.0; 3]; coords.len()];
    for (old, c) in coords.iter().enumerate() {
        out[perm[old]] = *c;
    }
    out
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn new_splits_are_partitions(
        train in 0usize..40,
        valid in 1usize..60,
        test in 0usize..20,
        folds_frac in 0.0f64..1.0,
        seed in any::<u64>(),
        other_seed in any::<u64>(),
    ) {
        let base = SplitSpec { name: "b".into(), train: ids("tr", train), valid: ids("va", valid), test: ids("te", test) };
        let folds = 1 + ((valid - 1) as f64 * folds_frac) as usize;
        let a = make_new_splits(&base, folds, seed).unwrap();
        prop_assert_eq!(&a, &make_new_splits(&base, folds, seed).unwrap());
        prop_assert_eq!(a.len(), folds);

        let mut all_valid = Vec::new();
        for fold in &a {
            fold.validate().unwrap();
            prop_assert_eq!(fold.len(), base.len());
            prop_assert_eq!(&fold.test, &base.test);
            let size = fold.valid.len();
            prop_assert!(size == valid / folds || size == valid / folds + 1);
            let mut pool = fold.train.clone();
            pool.extend(fold.valid.iter().cloned());
            let mut expected = base.train.clone();
            expected.extend(base.valid.iter().cloned());
            prop_assert_eq!(sorted(&pool), sorted(&expected));
            all_valid.extend(fold.valid.iter().cloned());
        }
        prop_assert_eq!(sorted(&all_valid), sorted(&base.valid));

        let b = make_new_splits(&base, folds, other_seed).unwrap();
        for fold in &b {
            fold.validate().unwrap();
            prop_assert_eq!(fold.len(), base.len());
        }
    }

    #[test]
    fn normalized_adjacency_matches_dense_formula(seed in any::<u64>(), n in 1usize..=6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = random_molecule(&mut rng, "g", n);
        let mut a = vec![vec![0.0; n]; n];
        for &[s, d] in &g.edge_index {
            a[s][d] = 1.0;
        }
        for (i, row) in a.iter_mut().enumerate() {
            row[i] = 1.0;
        }
        let deg: Vec<f64> = a.iter().map(|r| r.iter().sum()).collect();
        let dense = normalized_adjacency(&g).to_dense();
        for i in 0..n {
            for j in 0..n {
                let want = a[i][j] / (deg[i] * deg[j]).sqrt();
                prop_assert!((dense[i][j] - want).abs() <= 1e-12, "({}, {}): {} vs {}", i, j, dense[i][j], want);
            }
        }
    }

    #[test]
    fn radius_graph_matches_brute_force(seed in any::<u64>(), n in 0usize..=50, cutoff in 0.0f64..6.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let coords: Vec<[f64; 3]> = (0..n)
            .map(|_| std::array::from_fn(|_| rng.gen_range(-4.0..4.0)))
            .collect();
        let edges = |g: &molgnn::gnn3d::SpatialGraph| -> BTreeSet<(usize, usize)> {
            g.src.iter().copied().zip(g.dst.iter().copied()).collect()
        };
        let fast = build_radius_graph(&coords, cutoff);
        let slow = brute_force_radius_graph(&coords, cutoff);
        prop_assert_eq!(fast.len(), slow.len());
        prop_assert_eq!(edges(&fast), edges(&slow));
    }

    #[test]
    fn lr_schedule_is_a_nonincreasing_staircase(
        lr0 in 1e-5f64..1.0,
        decay in 0.01f64..1.0,
        every in 1usize..40,
    ) {
        let mut cfg = TrainConfig::defaults(ModelKind::TwoD);
        cfg.lr0 = lr0;
        cfg.decay_factor = decay;
        cfg.decay_every = every;
        let lrs: Vec<f64> = (0..200).map(|e| lr_at_epoch(&cfg, e)).collect();
        prop_assert_eq!(lrs[0], lr0);
        for e in 1..lrs.len() {
            prop_assert!(lrs[e] <= lrs[e - 1]);
            if e % every == 0 {
                prop_assert!(lrs[e] < lrs[e - 1]);
            } else {
                prop_assert_eq!(lrs[e], lrs[e - 1]);
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn model_2d_ignores_atom_order(seed in any::<u64>(), n in 1usize..=10) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = random_molecule(&mut rng, "g", n);
        let other = random_molecule(&mut rng, "h", 5);
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut rng);
        let pg = g.permuted(&perm);
        let model = Model2D::new(
            Model2DConfig { num_layers: 2, dagnn_steps: 3, hidden_dim: 8, dropout: 0.0, ..Default::default() },
            fixture_vocab(),
            seed,
        ).unwrap();
        let a = model.predict(&batch_graphs(&[&g, &other]).unwrap()).unwrap();
        let b = model.predict(&batch_graphs(&[&pg, &other]).unwrap()).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn model_3d_respects_geometric_and_set_symmetries(seed in any::<u64>(), n in 1usize..=8, k in 1usize..=4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = random_molecule(&mut rng, "g", n);
        let confs: Vec<Coords> = (0..k).map(|_| random_conformer(&mut rng, &g)).collect();
        let model = Model3D::new(
            Model3DConfig { num_confdss_layers: 2, hidden_dim: 8, num_rbf: 8, ..Default::default() },
            fixture_vocab(),
            seed,
        ).unwrap();
        let run = |graph: &molgnn::molgraph::MolecularGraph, c: Vec<Coords>| -> f64 {
            let batch = batch_graphs(&[graph]).unwrap().with_conformers(vec![c]).unwrap();
            model.predict(&batch).unwrap()[0]
        };
        let base = run(&g, confs.clone());

        let rot = random_rotation(&mut rng);
        let shift: [f64; 3] = std::array::from_fn(|_| rng.gen_range(-10.0..10.0));
        let moved = confs.iter().map(|c| rigid_transform(c, &rot, shift)).collect();
        prop_assert!((run(&g, moved) - base).abs() <= 1e-8);

        let mut shuffled = confs.clone();
        shuffled.shuffle(&mut rng);
        prop_assert_eq!(run(&g, shuffled), base);

        let mut dup = confs.clone();
        dup.push(confs[rng.gen_range(0..k)].clone());
        prop_assert_eq!(run(&g, dup), base);

        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut rng);
        let pconfs = confs.iter().map(|c| permute_coords(c, &perm)).collect();
        prop_assert_eq!(run(&g.permuted(&perm), pconfs), base);
    }
}

#[test]
fn radius_graph_degenerate_cutoffs() {
    let pair = [[0.0, 0.0, 0.0], [1.3, -0.4, 2.0]];
    assert_eq!(build_radius_graph(&pair, 1e9).len(), 2);
    assert!(build_radius_graph(&pair, 0.0).is_empty());
}
