//! Deep 2D model over bond graphs.
//!
//! Atom features are embedded, refined by a stack of pre-activation residual
//! layers (`x + GENConv(ReLU(BN(x)))`) with a per-graph virtual node between
//! layers, diffused by adaptive multi-hop propagation, and read out by a
//! summed projection.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::{BatchNorm, Mode, ParamId, ParamStore, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::molgraph::{embed_features, Batch, FeatureVocab, NormalizedAdjacency};
use crate::nn::{glorot, Activation, Mlp, MlpSpec, Module};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Model2DConfig {
    pub num_layers: usize,
    pub dagnn_steps: usize,
    pub hidden_dim: usize,
    pub dropout: f64,
    pub epsilon: f64,
    pub virtual_node: bool,
    /// Adaptive diffusion after the layer stack; off means `Y = Z`.
    pub dagnn: bool,
}

impl Default for Model2DConfig {
    fn default() -> Self {
        Model2DConfig {
            num_layers: 16,
            dagnn_steps: 5,
            hidden_dim: 600,
            dropout: 0.25,
            epsilon: 1e-7,
            virtual_node: true,
            dagnn: true,
        }
    }
}

impl Model2DConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_layers == 0 {
            return Err(Error::Config("num_layers must be at least 1".into()));
        }
        if self.hidden_dim == 0 {
            return Err(Error::Config("hidden_dim must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config("dropout must lie in [0, 1)".into()));
        }
        if self.epsilon <= 0.0 || !self.epsilon.is_finite() {
            return Err(Error::Config("epsilon must be positive".into()));
        }
        Ok(())
    }
}

/// `ReLU(x_j + e_ji) + ε` for every edge; rows of `x_src` and `edge` align.
pub fn genconv_message(tape: &mut Tape, x_src: Var, edge: Var, epsilon: f64) -> Result<Var> {
    let s = tape.add(x_src, edge)?;
    let r = tape.relu(s)?;
    tape.shift(r, epsilon)
}

/// Per destination node and per dimension,
/// `Σ_j softmax_j(β m_ji) · m_ji`; nodes without messages get zero.
pub fn softmax_agg(tape: &mut Tape, messages: Var, beta: Var, dst: &[usize], num_nodes: usize) -> Result<Var> {
    let logits = tape.scale_by(messages, beta)?;
    tape.softmax_aggregate(logits, messages, dst, num_nodes)
}

/// `MLP(x_i + SoftMax_Agg_β({m_ji}))` with already-embedded edge features.
#[allow(clippy::too_many_arguments)]
pub fn genconv_forward(
    tape: &mut Tape,
    x: Var,
    src: &[usize],
    dst: &[usize],
    edge: Var,
    beta: Var,
    epsilon: f64,
    mlp: &impl Module,
) -> Result<Var> {
    let n = tape.value(x).rows();
    let xj = tape.gather(x, src)?;
    let m = genconv_message(tape, xj, edge, epsilon)?;
    let agg = softmax_agg(tape, m, beta, dst, n)?;
    let h = tape.add(x, agg)?;
    mlp.forward(tape, h)
}

/// Sum-readout virtual node: `g' = MLP(Σ_{i∈g} x_i + g)`, then `g'` is added
/// back to every node of its graph.
pub fn virtual_node_update(
    tape: &mut Tape,
    x: Var,
    g: Var,
    node_graph: &[usize],
    num_graphs: usize,
    mlp: &impl Module,
) -> Result<(Var, Var)> {
    let pooled = tape.segment_sum(x, node_graph, num_graphs)?;
    let h = tape.add(pooled, g)?;
    let g_next = mlp.forward(tape, h)?;
    let spread = tape.gather(g_next, node_graph)?;
    let x_next = tape.add(x, spread)?;
    Ok((x_next, g_next))
}

/// Adaptive diffusion: stacks `Z, ÂZ, …, Â^K Z`, scores each slice per node
/// with `σ(H s)` and returns the score-weighted sum of slices.
pub fn dagnn_forward(tape: &mut Tape, z: Var, adj: &NormalizedAdjacency, score: Var, steps: usize) -> Result<Var> {
    let (n, f) = (tape.value(z).rows(), tape.value(z).row_len());
    if adj.n != n {
        return Err(Error::shape(
            "dagnn",
            format!("adjacency over {} nodes for {n} rows", adj.n),
        ));
    }
    let mut hops = vec![z];
    for _ in 0..steps {
        let prev = *hops.last().expect("non-empty");
        hops.push(adj.propagate(tape, prev)?);
    }
    let k = hops.len();
    let stacked = tape.stack(&hops)?;
    let flat = tape.reshape(stacked, &[n * k, f])?;
    let logits = tape.matmul(flat, score)?;
    let retain = tape.sigmoid(logits)?;
    let weighted = tape.mul_col(flat, retain)?;
    let owner: Vec<usize> = (0..n * k).map(|r| r / k).collect();
    tape.segment_sum(weighted, &owner, n)
}

#[derive(Clone, Debug, PartialEq)]
pub struct GenConv {
    pub edge_tables: Vec<ParamId>,
    pub beta: ParamId,
    pub mlp: Mlp,
    pub epsilon: f64,
}

impl GenConv {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        vocab: &FeatureVocab,
        f: usize,
        epsilon: f64,
    ) -> Self {
        let edge_tables = vocab
            .edge
            .iter()
            .enumerate()
            .map(|(j, &size)| store.add(format!("{name}.edge_emb.{j}"), glorot(rng, size, f), true))
            .collect();
        GenConv {
            edge_tables,
            beta: store.add(format!("{name}.beta"), Tensor::scalar(1.0), true),
            mlp: Mlp::new(
                store,
                rng,
                &format!("{name}.mlp"),
                MlpSpec {
                    inputs: f,
                    hidden: 2 * f,
                    outputs: f,
                    batch_norm: false,
                    activation: Activation::Relu,
                    dropout: 0.0,
                },
            ),
            epsilon,
        }
    }

    pub fn forward(&self, tape: &mut Tape, x: Var, batch: &Batch) -> Result<Var> {
        let e = embed_features(tape, &self.edge_tables, &batch.edge_feat)?;
        let beta = tape.param(self.beta);
        genconv_forward(
            tape,
            x,
            &batch.edge_src,
            &batch.edge_dst,
            e,
            beta,
            self.epsilon,
            &self.mlp,
        )
    }
}

/// Pre-activation residual layer: `x + GENConv(ReLU(BN(x)))`.
#[derive(Clone, Debug, PartialEq)]
pub struct DeeperGcnLayer {
    pub norm: BatchNorm,
    pub conv: GenConv,
}

impl DeeperGcnLayer {
    pub fn forward(&self, tape: &mut Tape, x: Var, batch: &Batch) -> Result<Var> {
        let h = tape.batch_norm(x, &self.norm)?;
        let h = tape.relu(h)?;
        let h = self.conv.forward(tape, h, batch)?;
        tape.add(x, h)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model2DParams {
    pub node_tables: Vec<ParamId>,
    pub layers: Vec<DeeperGcnLayer>,
    /// One MLP per gap between consecutive layers.
    pub virtual_node: Vec<Mlp>,
    /// Normalizes the residual stream after the last layer.
    pub output_norm: BatchNorm,
    pub score: ParamId,
    pub head: ParamId,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model2D {
    pub config: Model2DConfig,
    pub vocab: FeatureVocab,
    pub store: ParamStore,
    pub params: Model2DParams,
}

impl Model2D {
    pub fn new(config: Model2DConfig, vocab: FeatureVocab, seed: u64) -> Result<Self> {
        config.validate()?;
        vocab.validate()?;
        let f = config.hidden_dim;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let node_tables = vocab
            .node
            .iter()
            .enumerate()
            .map(|(j, &size)| store.add(format!("node_emb.{j}"), glorot(&mut rng, size, f), true))
            .collect();
        let layers = (0..config.num_layers)
            .map(|l| {
                let name = format!("layer{l}");
                DeeperGcnLayer {
                    norm: BatchNorm::new(&mut store, &format!("{name}.norm"), f),
                    conv: GenConv::new(&mut store, &mut rng, &name, &vocab, f, config.epsilon),
                }
            })
            .collect();
        let vn_count = if config.virtual_node { config.num_layers - 1 } else { 0 };
        let virtual_node = (0..vn_count)
            .map(|l| {
                Mlp::new(
                    &mut store,
                    &mut rng,
                    &format!("vn{l}.mlp"),
                    MlpSpec {
                        inputs: f,
                        hidden: f,
                        outputs: f,
                        batch_norm: true,
                        activation: Activation::Relu,
                        dropout: config.dropout,
                    },
                )
            })
            .collect();
        let output_norm = BatchNorm::new(&mut store, "output.norm", f);
        let score = store.add("dagnn.score", Tensor::zeros(&[f, 1]), true);
        let head = store.add("head.weight", glorot(&mut rng, f, 1), true);
        Ok(Model2D {
            config,
            vocab,
            store,
            params: Model2DParams {
                node_tables,
                layers,
                virtual_node,
                output_norm,
                score,
                head,
            },
        })
    }

    /// Node representations after the residual layer stack, before diffusion.
    pub fn encode(&self, tape: &mut Tape, batch: &Batch) -> Result<Var> {
        let f = self.config.hidden_dim;
        let mut h = embed_features(tape, &self.params.node_tables, &batch.node_feat)?;
        let mut g = tape.constant(Tensor::zeros(&[batch.num_graphs, f]));
        for (l, layer) in self.params.layers.iter().enumerate() {
            h = layer.forward(tape, h, batch)?;
            if let Some(mlp) = self.params.virtual_node.get(l) {
                (h, g) = virtual_node_update(tape, h, g, &batch.node_graph, batch.num_graphs, mlp)?;
            }
        }
        tape.batch_norm(h, &self.params.output_norm)
    }

    /// One prediction per graph, shape `[num_graphs, 1]`.
    pub fn forward(&self, tape: &mut Tape, batch: &Batch) -> Result<Var> {
        let z = self.encode(tape, batch)?;
        let y = if self.config.dagnn {
            let s = tape.param(self.params.score);
            dagnn_forward(tape, z, &batch.adjacency, s, self.config.dagnn_steps)?
        } else {
            z
        };
        let pooled = tape.segment_sum(y, &batch.node_graph, batch.num_graphs)?;
        let w = tape.param(self.params.head);
        tape.matmul(pooled, w)
    }

    /// Eval-mode predictions for every graph in `batch`.
    pub fn predict(&self, batch: &Batch) -> Result<Vec<f64>> {
        let mut tape = Tape::new(&self.store, Mode::Eval, 0);
        let out = self.forward(&mut tape, batch)?;
        Ok(tape.value(out).data().to_vec())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::{finite_diff_check, GradCheckOptions};
    use crate::nn::Identity;

    fn vector_case(x: f64, e: f64) -> f64 {
        let store = ParamStore::new();
        let mut tape = Tape::new(&store, Mode::Eval, 0);
        let xv = tape.constant(Tensor::from_rows(&[vec![x]]).unwrap());
        let ev = tape.constant(Tensor::from_rows(&[vec![e]]).unwrap());
        let m = genconv_message(&mut tape, xv, ev, 1e-7).unwrap();
        tape.value(m).data()[0]
    }

    #[test]
    fn message_examples() {
        assert_eq!(vector_case(-1.0, 0.5), 1e-7);
        assert_eq!(vector_case(1.0, 2.0), 3.0 + 1e-7);
    }

    #[test]
    fn message_dimension_mismatch() {
        let store = ParamStore::new();
        let mut tape = Tape::new(&store, Mode::Eval, 0);
        let x = tape.constant(Tensor::zeros(&[1, 2]));
        let e = tape.constant(Tensor::zeros(&[1, 3]));
        assert!(genconv_message(&mut tape, x, e, 1e-7).is_err());
    }

    fn agg(values: &[f64], beta: f64) -> f64 {
        let store = ParamStore::new();
        let mut tape = Tape::new(&store, Mode::Eval, 0);
        let m = tape.constant(Tensor::new(vec![values.len(), 1], values.to_vec()).unwrap());
        let b = tape.constant(Tensor::scalar(beta));
        let out = softmax_agg(&mut tape, m, b, &vec![0; values.len()], 1).unwrap();
        tape.value(out).data()[0]
    }

    #[test]
    fn softmax_agg_examples() {
        assert_eq!(agg(&[0.7], 3.0), 0.7);
        assert_eq!(agg(&[0.0, 1.0], 0.0), 0.5);
        let expected = 0.75 * 3f64.ln();
        assert!((agg(&[0.0, 3f64.ln()], 1.0) - expected).abs() < 1e-15);
        assert!((expected - 0.8240).abs() < 1e-4);
    }

    #[test]
    fn message_gradient_is_zero_on_dead_branch() {
        let mut store = ParamStore::new();
        let x = store.add("x", Tensor::from_rows(&[vec![-1.0, 0.4]]).unwrap(), true);
        let grads = {
            let mut tape = Tape::new(&store, Mode::Eval, 0);
            let xv = tape.param(x);
            let e = tape.constant(Tensor::from_rows(&[vec![0.5, 0.5]]).unwrap());
            let m = genconv_message(&mut tape, xv, e, 1e-7).unwrap();
            let s = tape.sum(m).unwrap();
            tape.backward_scalar(s).unwrap()
        };
        assert_eq!(grads.get(x).unwrap().data(), &[0.0, 1.0]);
        let report = finite_diff_check(&mut store, &GradCheckOptions::default(), |t| {
            let xv = t.param(x);
            let e = t.constant(Tensor::from_rows(&[vec![0.5, 0.5]]).unwrap());
            let m = genconv_message(t, xv, e, 1e-7)?;
            t.sum(m)
        })
        .unwrap();
        assert!(report.max_rel_error < 1e-8);
    }

    #[test]
    fn genconv_without_edges_is_mlp_of_input() {
        let store = ParamStore::new();
        let mut tape = Tape::new(&store, Mode::Eval, 0);
        let x = tape.constant(Tensor::from_rows(&[vec![1.0, -2.0], vec![0.5, 3.0]]).unwrap());
        let e = tape.constant(Tensor::zeros(&[0, 2]));
        let b = tape.constant(Tensor::scalar(1.0));
        let out = genconv_forward(&mut tape, x, &[], &[], e, b, 1e-7, &Identity).unwrap();
        assert_eq!(tape.value(out), tape.value(x));
    }

    #[test]
    fn virtual_node_sum_readout() {
        let store = ParamStore::new();
        let mut tape = Tape::new(&store, Mode::Eval, 0);
        let x = tape.constant(Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0], vec![10.0, 20.0]]).unwrap());
        let g = tape.constant(Tensor::zeros(&[2, 2]));
        let (x2, g2) = virtual_node_update(&mut tape, x, g, &[0, 0, 1], 2, &Identity).unwrap();
        assert_eq!(tape.value(g2).data(), &[4.0, 6.0, 10.0, 20.0]);
        assert_eq!(tape.value(x2).row(0), &[5.0, 8.0]);
        assert_eq!(tape.value(x2).row(2), &[20.0, 40.0]);
        let bad = virtual_node_update(&mut tape, x, g, &[0, 0, 2], 2, &Identity);
        assert!(bad.is_err());
    }

    #[test]
    fn dagnn_zero_steps_zero_score() {
        let store = ParamStore::new();
        let mut tape = Tape::new(&store, Mode::Eval, 0);
        let z = tape.constant(Tensor::from_rows(&[vec![2.0, -4.0], vec![1.0, 3.0]]).unwrap());
        let s = tape.constant(Tensor::zeros(&[2, 1]));
        let adj = NormalizedAdjacency::from_edges(2, [(0, 1)]);
        let y = dagnn_forward(&mut tape, z, &adj, s, 0).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, -2.0, 0.5, 1.5]);
    }

    #[test]
    fn dagnn_single_node_keeps_z() {
        let store = ParamStore::new();
        let mut tape = Tape::new(&store, Mode::Eval, 0);
        let z = tape.constant(Tensor::from_rows(&[vec![0.3, -0.7]]).unwrap());
        let s = tape.constant(Tensor::from_rows(&[vec![0.2], vec![0.9]]).unwrap());
        let adj = NormalizedAdjacency::from_edges(1, []);
        let y = dagnn_forward(&mut tape, z, &adj, s, 4).unwrap();
        let zrow = [0.3, -0.7];
        let score = crate::diffcore::sigmoid(0.3 * 0.2 - 0.7 * 0.9);
        for (yv, zv) in tape.value(y).data().iter().zip(zrow) {
            assert!((yv - 5.0 * score * zv).abs() < 1e-15);
        }
    }

    #[test]
    fn config_validation() {
        assert!(Model2DConfig::default().validate().is_ok());
        for bad in [
            Model2DConfig {
                num_layers: 0,
                ..Default::default()
            },
            Model2DConfig {
                hidden_dim: 0,
                ..Default::default()
            },
            Model2DConfig {
                dropout: 1.0,
                ..Default::default()
            },
            Model2DConfig {
                epsilon: 0.0,
                ..Default::default()
            },
        ] {
            assert!(bad.validate().is_err());
        }
    }
}
