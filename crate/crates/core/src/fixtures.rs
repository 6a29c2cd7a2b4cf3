//! Small synthetic molecules for tests, verification and smoke runs.

use std::collections::HashMap;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::molgraph::{ConformerSet, Coords, Dataset, FeatureVocab, MolecularGraph, SplitSpec};

/// Vocabulary used by every fixture so tables stay small.
pub fn fixture_vocab() -> FeatureVocab {
    FeatureVocab {
        node: [6, 3, 4, 3, 2, 3, 2, 2, 2],
        edge: [4, 2, 2],
    }
}

/// Random connected molecule with `n` atoms: a random tree plus up to two
/// ring-closing bonds. Both directions of every bond are listed.
pub fn random_molecule(rng: &mut impl Rng, id: &str, n: usize) -> MolecularGraph {
    let vocab = fixture_vocab();
    let mut bonds: Vec<[usize; 2]> = (1..n).map(|i| [rng.gen_range(0..i), i]).collect();
    for _ in 0..2 {
        if n >= 4 && rng.gen_bool(0.5) {
            let a = rng.gen_range(0..n);
            let b = rng.gen_range(0..n);
            let (a, b) = (a.min(b), a.max(b));
            if a != b && !bonds.iter().any(|e| e == &[a, b] || e == &[b, a]) {
                bonds.push([a, b]);
            }
        }
    }
    let node_feat = (0..n)
        .map(|_| std::array::from_fn(|j| rng.gen_range(0..vocab.node[j] as u32)))
        .collect();
    let mut edge_index = Vec::with_capacity(2 * bonds.len());
    let mut edge_feat = Vec::with_capacity(2 * bonds.len());
    for [a, b] in bonds {
        let f: [u32; 3] = std::array::from_fn(|j| rng.gen_range(0..vocab.edge[j] as u32));
        edge_index.push([a, b]);
        edge_index.push([b, a]);
        edge_feat.push(f);
        edge_feat.push(f);
    }
    MolecularGraph {
        id: id.to_string(),
        num_nodes: n,
        node_feat,
        edge_index,
        edge_feat,
        target: None,
    }
}

/// Coordinates placing bonded atoms about 1.5 Å apart along random
/// directions, with random jitter per conformer.
pub fn random_conformer(rng: &mut impl Rng, graph: &MolecularGraph) -> Coords {
    let n = graph.num_nodes;
    let mut coords = vec![[0.0; 3]; n];
    let mut placed = vec![false; n];
    placed[0] = true;
    let neighbors = graph.neighbors();
    let mut stack = vec![0];
    while let Some(a) = stack.pop() {
        for &b in &neighbors[a] {
            if placed[b] {
                continue;
            }
            let dir = unit_vector(rng);
            let len = 1.5 + rng.gen_range(-0.1..0.1);
            coords[b] = [0, 1, 2].map(|k| coords[a][k] + len * dir[k]);
            placed[b] = true;
            stack.push(b);
        }
    }
    for (i, c) in coords.iter_mut().enumerate() {
        if !placed[i] {
            *c = [0, 1, 2].map(|_| rng.gen_range(-3.0..3.0));
        }
    }
    coords
}

fn unit_vector(rng: &mut impl Rng) -> [f64; 3] {
    loop {
        let v: [f64; 3] = std::array::from_fn(|_| rng.gen_range(-1.0..1.0));
        let norm = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        if norm > 0.1 && norm <= 1.0 {
            return v.map(|x| x / norm);
        }
    }
}

/// Target in roughly the 3 to 8 range that depends on composition and size.
fn synthetic_target(rng: &mut impl Rng, g: &MolecularGraph) -> f64 {
    let kind_sum: f64 = g.node_feat.iter().map(|f| f[0] as f64).sum();
    let bonds = g.edge_index.len() as f64 / 2.0;
    let raw = 3.0 + 0.35 * kind_sum / g.num_nodes as f64 + 0.12 * bonds + rng.gen_range(-0.5..0.5);
    (raw * 1000.0).round() / 1000.0
}

/// Fixture options.
#[derive(Clone, Copy, Debug)]
pub struct FixtureSpec {
    pub molecules: usize,
    pub min_atoms: usize,
    pub max_atoms: usize,
    pub conformers: usize,
    pub seed: u64,
}

impl Default for FixtureSpec {
    fn default() -> Self {
        FixtureSpec {
            molecules: 32,
            min_atoms: 4,
            max_atoms: 12,
            conformers: 2,
            seed: 7,
        }
    }
}

/// Molecules `mol-000`, `mol-001`, … with targets and conformers.
pub fn synthetic_dataset(spec: FixtureSpec) -> Result<Dataset> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut graphs = Vec::with_capacity(spec.molecules);
    let mut sets = HashMap::new();
    for i in 0..spec.molecules {
        let id = format!("mol-{i:03}");
        let n = rng.gen_range(spec.min_atoms..=spec.max_atoms);
        let mut g = random_molecule(&mut rng, &id, n);
        g.target = Some(synthetic_target(&mut rng, &g));
        let conformers = (0..spec.conformers).map(|_| random_conformer(&mut rng, &g)).collect();
        sets.insert(id.clone(), ConformerSet { id, conformers });
        graphs.push(g);
    }
    Ok(Dataset::new(graphs, fixture_vocab())?.with_conformers(sets))
}

/// Split with every molecule in train and in valid, for overfitting runs.
pub fn train_on_all(dataset: &Dataset) -> SplitSpec {
    let ids: Vec<String> = dataset.ids().map(String::from).collect();
    SplitSpec {
        name: "all".into(),
        train: ids,
        valid: Vec::new(),
        test: Vec::new(),
    }
}

/// Id-only split with the given sizes, named `id-0000`, `id-0001`, ….
pub fn synthetic_split(train: usize, valid: usize, test: usize) -> SplitSpec {
    let mut next = 0;
    let mut take = |k: usize| {
        let out: Vec<String> = (next..next + k).map(|i| format!("id-{i:04}")).collect();
        next += k;
        out
    };
    SplitSpec {
        name: "base".into(),
        train: take(train),
        valid: take(valid),
        test: take(test),
    }
}

/// Uniformly random rotation matrix from a random unit quaternion.
pub fn random_rotation(rng: &mut impl Rng) -> [[f64; 3]; 3] {
    let q: [f64; 4] = loop {
        let v: [f64; 4] = std::array::from_fn(|_| rng.gen_range(-1.0..1.0));
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 0.1 && n <= 1.0 {
            break v.map(|x| x / n);
        }
    };
    let [w, x, y, z] = q;
    [
        [
            1.0 - 2.0 * (y * y + z * z),
            2.0 * (x * y - w * z),
            2.0 * (x * z + w * y),
        ],
        [
            2.0 * (x * y + w * z),
            1.0 - 2.0 * (x * x + z * z),
            2.0 * (y * z - w * x),
        ],
        [
            2.0 * (x * z - w * y),
            2.0 * (y * z + w * x),
            1.0 - 2.0 * (x * x + y * y),
        ],
    ]
}

pub fn rigid_transform(coords: &[[f64; 3]], rot: &[[f64; 3]; 3], shift: [f64; 3]) -> Coords {
    coords
        .iter()
        .map(|c| std::array::from_fn(|i| (0..3).map(|k| rot[i][k] * c[k]).sum::<f64>() + shift[i]))
        .collect()
}
