// Oracles are written as plain index loops on purpose.
#![allow(clippy::needless_range_loop)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{max_abs_diff, random_tensor, Check, VerifyOptions};
use crate::diffcore::{sigmoid, BatchNorm, Mode, ParamStore, Tape, Tensor, BN_EPS};
use crate::error::Result;
use crate::fixtures::random_molecule;
use crate::gnn2d::{dagnn_forward, genconv_forward};
use crate::gnn3d::{build_radius_graph, gin_aggregated_forward, SpatialGraph};
use crate::molgraph::{normalized_adjacency, MolecularGraph};
use crate::nn::{Activation, Linear, Mlp, MlpSpec};

const SEEDS: u64 = 50;
const TOL: f64 = 1e-10;

type Matrix = Vec<Vec<f64>>;

fn rows(t: &Tensor) -> Matrix {
    (0..t.rows()).map(|i| t.row(i).to_vec()).collect()
}

fn flat(m: &Matrix) -> Vec<f64> {
    m.iter().flatten().copied().collect()
}

fn dense_linear(x: &Matrix, store: &ParamStore, lin: &Linear) -> Matrix {
    let w = rows(store.value(lin.weight));
    let b = lin.bias.map(|b| store.value(b).data().to_vec());
    x.iter()
        .map(|xi| {
            (0..w[0].len())
                .map(|c| {
                    let mut s = 0.0;
                    for (k, xk) in xi.iter().enumerate() {
                        s += xk * w[k][c];
                    }
                    s + b.as_ref().map_or(0.0, |b| b[c])
                })
                .collect()
        })
        .collect()
}

fn dense_batch_norm(x: &Matrix, store: &ParamStore, bn: &BatchNorm) -> Matrix {
    let m = x.len() as f64;
    let f = x[0].len();
    let gamma = store.value(bn.gamma).data();
    let beta = store.value(bn.beta).data();
    let mut out = x.clone();
    for c in 0..f {
        let mean = x.iter().map(|r| r[c]).sum::<f64>() / m;
        let var = x.iter().map(|r| (r[c] - mean).powi(2)).sum::<f64>() / m;
        for (o, r) in out.iter_mut().zip(x) {
            o[c] = gamma[c] * (r[c] - mean) / (var + BN_EPS).sqrt() + beta[c];
        }
    }
    out
}

fn relu(m: &Matrix) -> Matrix {
    m.iter().map(|r| r.iter().map(|v| v.max(0.0)).collect()).collect()
}

fn dense_mlp(x: &Matrix, store: &ParamStore, mlp: &Mlp) -> Matrix {
    let mut h = dense_linear(x, store, &mlp.first);
    if let Some(bn) = &mlp.norm {
        h = dense_batch_norm(&h, store, bn);
    }
    dense_linear(&relu(&h), store, &mlp.second)
}

fn graph_with(rng: &mut ChaCha8Rng) -> MolecularGraph {
    let n = rng.gen_range(1..=6);
    random_molecule(rng, "g", n)
}

fn edge_lists(g: &MolecularGraph) -> (Vec<usize>, Vec<usize>) {
    (
        g.edge_index.iter().map(|e| e[0]).collect(),
        g.edge_index.iter().map(|e| e[1]).collect(),
    )
}

fn genconv_case(seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let g = graph_with(&mut rng);
    let f = 3;
    let eps = 1e-7;
    let x = random_tensor(&mut rng, &[g.num_nodes, f], 1.5);
    let e = random_tensor(&mut rng, &[g.edge_index.len(), f], 1.5);
    let beta: f64 = rng.gen_range(0.2..3.0);
    let mut store = ParamStore::new();
    let mlp = Mlp::new(
        &mut store,
        &mut rng,
        "mlp",
        MlpSpec {
            inputs: f,
            hidden: 2 * f,
            outputs: f,
            batch_norm: false,
            activation: Activation::Relu,
            dropout: 0.0,
        },
    );
    for (id, p) in store
        .iter()
        .map(|(id, p)| (id, p.value.shape().to_vec()))
        .collect::<Vec<_>>()
    {
        store.set_value(id, random_tensor(&mut rng, &p, 1.0))?;
    }
    let (src, dst) = edge_lists(&g);

    let mut tape = Tape::new(&store, Mode::Eval, 0);
    let xv = tape.constant(x.clone());
    let ev = tape.constant(e.clone());
    let bv = tape.constant(Tensor::scalar(beta));
    let out = genconv_forward(&mut tape, xv, &src, &dst, ev, bv, eps, &mlp)?;

    let xm = rows(&x);
    let em = rows(&e);
    let mut h = xm.clone();
    for i in 0..g.num_nodes {
        for c in 0..f {
            let msgs: Vec<f64> = (0..src.len())
                .filter(|&k| dst[k] == i)
                .map(|k| (xm[src[k]][c] + em[k][c]).max(0.0) + eps)
                .collect();
            if msgs.is_empty() {
                continue;
            }
            let top = msgs.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(beta * b));
            let w: Vec<f64> = msgs.iter().map(|m| (beta * m - top).exp()).collect();
            let z: f64 = w.iter().sum();
            h[i][c] += msgs.iter().zip(&w).map(|(m, w)| m * w / z).sum::<f64>();
        }
    }
    let expected = dense_mlp(&h, &store, &mlp);
    Ok(max_abs_diff(tape.value(out).data(), &flat(&expected)))
}

fn gin_case(seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let g = graph_with(&mut rng);
    let f = 3;
    let x = random_tensor(&mut rng, &[g.num_nodes, f], 1.5);
    let e = random_tensor(&mut rng, &[g.edge_index.len(), f], 1.5);
    let eps_g: f64 = rng.gen_range(-0.5..0.5);
    let mut store = ParamStore::new();
    let mlp = Mlp::new(
        &mut store,
        &mut rng,
        "mlp",
        MlpSpec {
            inputs: f,
            hidden: 2 * f,
            outputs: f,
            batch_norm: true,
            activation: Activation::Relu,
            dropout: 0.0,
        },
    );
    for (id, p) in store
        .iter()
        .filter(|(_, p)| p.trainable)
        .map(|(id, p)| (id, p.value.shape().to_vec()))
        .collect::<Vec<_>>()
    {
        store.set_value(id, random_tensor(&mut rng, &p, 1.0))?;
    }
    let (src, dst) = edge_lists(&g);

    let mut tape = Tape::new(&store, Mode::Train, 0);
    let xv = tape.constant(x.clone());
    let ev = tape.constant(e.clone());
    let epsv = tape.constant(Tensor::scalar(eps_g));
    let out = gin_aggregated_forward(&mut tape, xv, &src, &dst, ev, epsv, &mlp)?;

    let xm = rows(&x);
    let em = rows(&e);
    let mut a: Matrix = xm
        .iter()
        .map(|r| r.iter().map(|v| (1.0 + eps_g) * v).collect())
        .collect();
    for i in 0..g.num_nodes {
        for k in 0..src.len() {
            if dst[k] == i {
                for c in 0..f {
                    a[i][c] += (xm[src[k]][c] + em[k][c]).max(0.0);
                }
            }
        }
    }
    let expected = dense_mlp(&a, &store, &mlp);
    Ok(max_abs_diff(tape.value(out).data(), &flat(&expected)))
}

fn matmul(a: &Matrix, b: &Matrix) -> Matrix {
    a.iter()
        .map(|r| {
            (0..b[0].len())
                .map(|c| r.iter().enumerate().map(|(k, v)| v * b[k][c]).sum())
                .collect()
        })
        .collect()
}

/// `D^-1/2 (A + I) D^-1/2` built from the edge list with dense arithmetic.
pub(crate) fn dense_normalized_adjacency(g: &MolecularGraph) -> Matrix {
    let n = g.num_nodes;
    let mut a = vec![vec![0.0; n]; n];
    for e in &g.edge_index {
        if e[0] != e[1] {
            a[e[0]][e[1]] = 1.0;
            a[e[1]][e[0]] = 1.0;
        }
    }
    for (i, row) in a.iter_mut().enumerate() {
        row[i] = 1.0;
    }
    let deg: Vec<f64> = a.iter().map(|r| r.iter().sum()).collect();
    (0..n)
        .map(|i| (0..n).map(|j| a[i][j] / (deg[i] * deg[j]).sqrt()).collect())
        .collect()
}

fn dagnn_case(seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let g = graph_with(&mut rng);
    let f = 3;
    let steps = rng.gen_range(0..=5);
    let z = random_tensor(&mut rng, &[g.num_nodes, f], 1.5);
    let s = random_tensor(&mut rng, &[f, 1], 1.5);
    let store = ParamStore::new();
    let mut tape = Tape::new(&store, Mode::Eval, 0);
    let zv = tape.constant(z.clone());
    let sv = tape.constant(s.clone());
    let out = dagnn_forward(&mut tape, zv, &normalized_adjacency(&g), sv, steps)?;

    let a = dense_normalized_adjacency(&g);
    let sm = rows(&s);
    let mut power = rows(&z);
    let mut expected = vec![vec![0.0; f]; g.num_nodes];
    for k in 0..=steps {
        if k > 0 {
            power = matmul(&a, &power);
        }
        let score = matmul(&power, &sm);
        for i in 0..g.num_nodes {
            let w = sigmoid(score[i][0]);
            for c in 0..f {
                expected[i][c] += w * power[i][c];
            }
        }
    }
    Ok(max_abs_diff(tape.value(out).data(), &flat(&expected)))
}

/// Every ordered pair within `cutoff`, by exhaustive search.
pub fn brute_force_radius_graph(coords: &[[f64; 3]], cutoff: f64) -> SpatialGraph {
    let mut out = SpatialGraph::default();
    for i in 0..coords.len() {
        for j in 0..coords.len() {
            if i == j {
                continue;
            }
            let d = (0..3)
                .map(|k| (coords[i][k] - coords[j][k]).powi(2))
                .sum::<f64>()
                .sqrt();
            if d <= cutoff {
                out.src.push(i);
                out.dst.push(j);
                out.dist.push(d);
            }
        }
    }
    out
}

pub fn oracles_suite(opts: &VerifyOptions) -> Result<Vec<Check>> {
    let mut checks = Vec::new();
    type Case = fn(u64) -> Result<f64>;
    let cases: [(&str, Case); 3] = [
        ("genconv_vs_loops", genconv_case),
        ("gin_vs_loops", gin_case),
        ("dagnn_vs_dense_powers", dagnn_case),
    ];
    for (name, case) in cases {
        let mut worst: f64 = 0.0;
        for s in 0..SEEDS {
            worst = worst.max(case(opts.seed.wrapping_mul(1000).wrapping_add(s))?);
        }
        let mut c = Check::within(name, worst, TOL);
        c.detail.push_str(&format!(" over {SEEDS} random graphs, n ≤ 6"));
        checks.push(c);
    }

    let mut adj_worst: f64 = 0.0;
    for s in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ (s << 8));
        let g = graph_with(&mut rng);
        let sparse = normalized_adjacency(&g).to_dense();
        adj_worst = adj_worst.max(max_abs_diff(&flat(&sparse), &flat(&dense_normalized_adjacency(&g))));
    }
    checks.push(Check::within("normalized_adjacency_vs_dense", adj_worst, 1e-12));

    let mut mismatches = 0;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0xabc);
    let mut clouds = 0;
    for n in 0..=50 {
        for _ in 0..2 {
            let side = rng.gen_range(1.0..12.0);
            let coords: Vec<[f64; 3]> = (0..n)
                .map(|_| std::array::from_fn(|_| rng.gen_range(-side..side)))
                .collect();
            let cutoff = rng.gen_range(0.3..6.0);
            if build_radius_graph(&coords, cutoff) != brute_force_radius_graph(&coords, cutoff) {
                mismatches += 1;
            }
            clouds += 1;
        }
    }
    checks.push(Check::new(
        "radius_graph_vs_brute_force",
        mismatches == 0,
        format!("{mismatches} mismatching edge sets over {clouds} clouds with n ≤ 50"),
    ));
    Ok(checks)
}
