use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{probe, random_tensor, Check, VerifyOptions};
use crate::diffcore::{finite_diff_check, BatchNorm, GradCheckOptions, Mode, ParamStore, Tape, Tensor};
use crate::error::Result;
use crate::fixtures::{synthetic_dataset, FixtureSpec};
use crate::gnn2d::{dagnn_forward, virtual_node_update, DeeperGcnLayer, GenConv, Model2D, Model2DConfig};
use crate::gnn3d::{
    ConfDssLayer, ConformerLayout, ConformerState, GinBlock, Model3D, Model3DConfig, SchNetInteraction,
};
use crate::molgraph::{batch_graphs, Batch, Dataset};
use crate::nn::{Activation, Mlp, MlpSpec, Module};

const LAYER_TOL: f64 = 1e-5;
const MODEL_TOL: f64 = 1e-4;
const F: usize = 8;
const NUM_RBF: usize = 16;
const CUTOFF: f64 = 5.0;

fn run<Fw>(name: &str, tol: f64, mode: Mode, opts: &VerifyOptions, store: &mut ParamStore, f: Fw) -> Check
where
    Fw: for<'a> Fn(&mut Tape<'a>) -> Result<crate::diffcore::Var>,
{
    let gc = GradCheckOptions {
        mode,
        corrupt_analytic: opts.corrupt_gradients,
        ..Default::default()
    };
    match finite_diff_check(store, &gc, f) {
        Ok(report) => {
            let worst = report
                .worst()
                .map(|p| format!(", worst `{}`, entrywise max {:.1e}", p.name, report.max_entry_rel_error))
                .unwrap_or_default();
            let mut c = Check::below(name, report.max_rel_error, tol);
            c.detail.push_str(&worst);
            c
        }
        Err(e) => Check::new(name, false, format!("error: {e}")),
    }
}

/// `molecules` molecules of at most `max_atoms` atoms with two conformers each.
fn small_batch(seed: u64, molecules: usize, max_atoms: usize) -> Result<(Dataset, Batch)> {
    let data = synthetic_dataset(FixtureSpec {
        molecules,
        min_atoms: 3,
        max_atoms,
        conformers: 2,
        seed,
    })?;
    let graphs: Vec<_> = data.graphs.iter().collect();
    let confs = data.graphs.iter().map(|g| data.conformers_of(&g.id).to_vec()).collect();
    let batch = batch_graphs(&graphs)?.with_conformers(confs)?;
    Ok((data, batch))
}

fn mlp(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, outputs: usize, bn: bool) -> Mlp {
    Mlp::new(
        store,
        rng,
        name,
        MlpSpec {
            inputs: F,
            hidden: F,
            outputs,
            batch_norm: bn,
            activation: Activation::Relu,
            dropout: 0.0,
        },
    )
}

pub fn gradcheck_suite(opts: &VerifyOptions) -> Result<Vec<Check>> {
    let (data, batch) = small_batch(opts.seed ^ 0x5eed, 2, 6)?;
    let (_, batch5) = small_batch(opts.seed ^ 0xb5, 2, 5)?;
    // Training-mode batch norm over graph rows needs more than two graphs
    // to be smooth enough for central differences.
    let (_, wide) = small_batch(opts.seed ^ 0x3a, 8, 6)?;
    let (_, wide5) = small_batch(opts.seed ^ 0x3b, 8, 5)?;
    let vocab = data.vocab.clone();
    let layout = ConformerLayout::build(&batch, CUTOFF, NUM_RBF)?;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let nodes = batch.num_nodes;
    let graphs = batch.num_graphs;
    let mut checks = Vec::new();

    {
        let mut store = ParamStore::new();
        let x = store.add("input.x", random_tensor(&mut rng, &[nodes, F], 1.0), true);
        let conv = GenConv::new(&mut store, &mut rng, "conv", &vocab, F, 1e-7);
        store.set_value(conv.beta, Tensor::scalar(1.3))?;
        checks.push(run("genconv", LAYER_TOL, Mode::Eval, opts, &mut store, |t| {
            let xv = t.param(x);
            let y = conv.forward(t, xv, &batch)?;
            probe(t, y, 1)
        }));
    }
    {
        let mut store = ParamStore::new();
        let x = store.add("input.x", random_tensor(&mut rng, &[nodes, F], 1.0), true);
        let layer = DeeperGcnLayer {
            norm: BatchNorm::new(&mut store, "norm", F),
            conv: GenConv::new(&mut store, &mut rng, "conv", &vocab, F, 1e-7),
        };
        store.set_value(layer.norm.gamma, random_tensor(&mut rng, &[F], 1.0))?;
        store.set_value(layer.norm.beta, random_tensor(&mut rng, &[F], 0.5))?;
        checks.push(run("deepergcn_layer", LAYER_TOL, Mode::Train, opts, &mut store, |t| {
            let xv = t.param(x);
            let y = layer.forward(t, xv, &batch)?;
            probe(t, y, 2)
        }));
    }
    {
        let mut store = ParamStore::new();
        let x = store.add("input.x", random_tensor(&mut rng, &[nodes, F], 1.0), true);
        let g = store.add("input.g", random_tensor(&mut rng, &[graphs, F], 1.0), true);
        let vn = mlp(&mut store, &mut rng, "vn", F, false);
        checks.push(run("virtual_node", LAYER_TOL, Mode::Eval, opts, &mut store, |t| {
            let (xv, gv) = (t.param(x), t.param(g));
            let (x2, g2) = virtual_node_update(t, xv, gv, &batch.node_graph, graphs, &vn)?;
            let a = probe(t, x2, 3)?;
            let b = probe(t, g2, 4)?;
            t.add(a, b)
        }));
    }
    {
        let mut store = ParamStore::new();
        let z = store.add("input.z", random_tensor(&mut rng, &[nodes, F], 1.0), true);
        let s = store.add("dagnn.score", random_tensor(&mut rng, &[F, 1], 1.0), true);
        checks.push(run("dagnn", LAYER_TOL, Mode::Eval, opts, &mut store, |t| {
            let (zv, sv) = (t.param(z), t.param(s));
            let y = dagnn_forward(t, zv, &batch.adjacency, sv, 3)?;
            probe(t, y, 5)
        }));
    }
    {
        let mut store = ParamStore::new();
        let z = store.add("input.z", random_tensor(&mut rng, &[nodes, F], 1.0), true);
        let w = store.add("head.weight", random_tensor(&mut rng, &[F, 1], 1.0), true);
        checks.push(run("head_2d", LAYER_TOL, Mode::Eval, opts, &mut store, |t| {
            let zv = t.param(z);
            let pooled = t.segment_sum(zv, &batch.node_graph, graphs)?;
            let wv = t.param(w);
            let y = t.matmul(pooled, wv)?;
            probe(t, y, 6)
        }));
    }
    {
        let mut store = ParamStore::new();
        let x = store.add("input.x", random_tensor(&mut rng, &[layout.num_rows(), F], 1.0), true);
        let block = SchNetInteraction::new(&mut store, &mut rng, "schnet", F, NUM_RBF);
        checks.push(run(
            "schnet_interaction",
            LAYER_TOL,
            Mode::Eval,
            opts,
            &mut store,
            |t| {
                let xv = t.param(x);
                let rbf = t.constant(layout.rbf.clone());
                let y = block.forward(t, xv, &layout.spatial_src, &layout.spatial_dst, rbf)?;
                probe(t, y, 7)
            },
        ));
    }
    {
        let mut store = ParamStore::new();
        let x = store.add("input.x", random_tensor(&mut rng, &[nodes, F], 1.0), true);
        let gin = GinBlock::new(&mut store, &mut rng, "gin", &vocab, F);
        store.set_value(gin.eps, Tensor::scalar(0.2))?;
        checks.push(run("gin", LAYER_TOL, Mode::Train, opts, &mut store, |t| {
            let xv = t.param(x);
            let y = gin.forward(t, xv, &batch)?;
            probe(t, y, 8)
        }));
    }
    {
        let mut store = ParamStore::new();
        let c = store.add(
            "input.conformers",
            random_tensor(&mut rng, &[layout.num_rows(), F], 1.0),
            true,
        );
        let a = store.add("input.aggregated", random_tensor(&mut rng, &[nodes, F], 1.0), true);
        let g = store.add("input.g", random_tensor(&mut rng, &[graphs, F], 1.0), true);
        let layer = ConfDssLayer {
            interaction: SchNetInteraction::new(&mut store, &mut rng, "schnet", F, NUM_RBF),
            gin: GinBlock::new(&mut store, &mut rng, "gin", &vocab, F),
            virtual_node: Some(mlp(&mut store, &mut rng, "vn", F, false)),
        };
        checks.push(run("confdss_layer", LAYER_TOL, Mode::Train, opts, &mut store, |t| {
            let state = ConformerState {
                conformers: t.param(c),
                aggregated: t.param(a),
                virtual_node: t.param(g),
            };
            let rbf = t.constant(layout.rbf.clone());
            let out = layer.forward(t, state, &batch, &layout, rbf)?;
            let p1 = probe(t, out.conformers, 9)?;
            let p2 = probe(t, out.aggregated, 10)?;
            let p3 = probe(t, out.virtual_node, 11)?;
            let s = t.add(p1, p2)?;
            t.add(s, p3)
        }));
    }
    {
        let mut store = ParamStore::new();
        let c = store.add(
            "input.conformers",
            random_tensor(&mut rng, &[layout.num_rows(), F], 1.0),
            true,
        );
        let head = mlp(&mut store, &mut rng, "head", 1, false);
        checks.push(run("head_3d", LAYER_TOL, Mode::Eval, opts, &mut store, |t| {
            let cv = t.param(c);
            let per = t.segment_sum(cv, &layout.conformer_of_row, layout.num_conformers())?;
            let mol = t.segment_max(per, &layout.graph_of_conformer, graphs)?;
            let y = head.forward(t, mol)?;
            probe(t, y, 12)
        }));
    }
    for (mode, label) in [(Mode::Eval, "eval"), (Mode::Train, "train")] {
        let config = Model2DConfig {
            num_layers: 2,
            dagnn_steps: 2,
            hidden_dim: F,
            dropout: 0.0,
            ..Default::default()
        };
        let mut model = Model2D::new(config, vocab.clone(), opts.seed)?;
        let mut store = std::mem::take(&mut model.store);
        let batch = if mode == Mode::Train { &wide } else { &batch };
        checks.push(run(
            &format!("model_2d_{label}"),
            MODEL_TOL,
            mode,
            opts,
            &mut store,
            |t| {
                let y = model.forward(t, batch)?;
                probe(t, y, 13)
            },
        ));
    }
    for (mode, label) in [(Mode::Eval, "eval"), (Mode::Train, "train")] {
        let config = Model3DConfig {
            num_confdss_layers: 2,
            hidden_dim: F,
            num_rbf: NUM_RBF,
            dropout: 0.0,
            ..Default::default()
        };
        let mut model = Model3D::new(config, vocab.clone(), opts.seed)?;
        let mut store = std::mem::take(&mut model.store);
        let batch = if mode == Mode::Train { &wide5 } else { &batch5 };
        checks.push(run(
            &format!("model_3d_{label}"),
            MODEL_TOL,
            mode,
            opts,
            &mut store,
            |t| {
                let y = model.forward(t, batch)?;
                probe(t, y, 14)
            },
        ));
    }
    Ok(checks)
}
