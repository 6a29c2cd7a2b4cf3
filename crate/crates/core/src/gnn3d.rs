//! 3D model over sets of conformers.
//!
//! Each layer runs a continuous-filter interaction on every conformer's
//! radius graph, max-pools the conformers into one bond-topology graph,
//! refines that graph with a GIN block and a virtual node, and adds the
//! result back onto every conformer.

use std::collections::HashMap;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::{Mode, ParamId, ParamStore, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::gnn2d::virtual_node_update;
use crate::molgraph::{batch_graphs, embed_features, Batch, ConformerSet, Coords, FeatureVocab, MolecularGraph};
use crate::nn::{glorot, Activation, Linear, Mlp, MlpSpec, Module};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Model3DConfig {
    pub num_confdss_layers: usize,
    pub hidden_dim: usize,
    pub radius_cutoff: f64,
    pub num_rbf: usize,
    pub max_train_conformers: usize,
    pub max_predict_conformers: usize,
    pub virtual_node: bool,
    pub dropout: f64,
}

impl Default for Model3DConfig {
    fn default() -> Self {
        Model3DConfig {
            num_confdss_layers: 5,
            hidden_dim: 256,
            radius_cutoff: 5.0,
            num_rbf: 64,
            max_train_conformers: 20,
            max_predict_conformers: 40,
            virtual_node: true,
            dropout: 0.0,
        }
    }
}

impl Model3DConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.into()));
        if self.num_confdss_layers == 0 {
            return fail("num_confdss_layers must be at least 1");
        }
        if self.hidden_dim == 0 {
            return fail("hidden_dim must be at least 1");
        }
        if !(self.radius_cutoff.is_finite() && self.radius_cutoff > 0.0) {
            return fail("radius_cutoff must be positive and finite");
        }
        if self.num_rbf < 2 {
            return fail("num_rbf must be at least 2");
        }
        if self.max_train_conformers == 0 || self.max_predict_conformers == 0 {
            return fail("conformer caps must be at least 1");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail("dropout must lie in [0, 1)");
        }
        Ok(())
    }
}

/// Directed distance graph of one conformer.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SpatialGraph {
    pub src: Vec<usize>,
    pub dst: Vec<usize>,
    pub dist: Vec<f64>,
}

impl SpatialGraph {
    pub fn len(&self) -> usize {
        self.src.len()
    }

    pub fn is_empty(&self) -> bool {
        self.src.is_empty()
    }
}

fn distance(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    (dx * dx + dy * dy + dz * dz).sqrt()
}

/// All ordered pairs `(i, j)`, `i ≠ j`, with `‖x_i − x_j‖ ≤ cutoff`, sorted by
/// `(i, j)`. Neighbor candidates come from a uniform cell grid with cell edge
/// `cutoff`, so only the 27 surrounding cells are scanned per atom.
pub fn build_radius_graph(coords: &[[f64; 3]], cutoff: f64) -> SpatialGraph {
    let n = coords.len();
    let mut pairs: Vec<(usize, usize, f64)> = Vec::new();
    if n < 2 || cutoff.is_nan() || cutoff <= 0.0 {
        return SpatialGraph::default();
    }
    if !cutoff.is_finite() {
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    pairs.push((i, j, distance(&coords[i], &coords[j])));
                }
            }
        }
    } else {
        let mut lo = [f64::INFINITY; 3];
        for c in coords {
            for a in 0..3 {
                lo[a] = lo[a].min(c[a]);
            }
        }
        let cell_of = |c: &[f64; 3]| -> [i64; 3] { [0, 1, 2].map(|a| ((c[a] - lo[a]) / cutoff).floor() as i64) };
        let mut cells: HashMap<[i64; 3], Vec<usize>> = HashMap::new();
        for (i, c) in coords.iter().enumerate() {
            cells.entry(cell_of(c)).or_default().push(i);
        }
        for (i, c) in coords.iter().enumerate() {
            let home = cell_of(c);
            for dx in -1..=1 {
                for dy in -1..=1 {
                    for dz in -1..=1 {
                        let key = [home[0] + dx, home[1] + dy, home[2] + dz];
                        let Some(members) = cells.get(&key) else { continue };
                        for &j in members {
                            if j == i {
                                continue;
                            }
                            let d = distance(c, &coords[j]);
                            if d <= cutoff {
                                pairs.push((i, j, d));
                            }
                        }
                    }
                }
            }
        }
    }
    pairs.sort_unstable_by_key(|&(i, j, _)| (i, j));
    SpatialGraph {
        src: pairs.iter().map(|p| p.0).collect(),
        dst: pairs.iter().map(|p| p.1).collect(),
        dist: pairs.iter().map(|p| p.2).collect(),
    }
}

/// Gaussian basis `exp(−γ (d − μ_k)²)` with `num_rbf` centers spread evenly
/// over `[0, cutoff]` and `γ = 1 / (2 Δμ²)`. Distances above the cutoff are
/// clamped to it.
pub fn rbf_expand(d: f64, cutoff: f64, num_rbf: usize) -> Vec<f64> {
    let step = cutoff / (num_rbf - 1) as f64;
    let gamma = 1.0 / (2.0 * step * step);
    let d = d.clamp(0.0, cutoff);
    (0..num_rbf)
        .map(|k| {
            let diff = d - k as f64 * step;
            (-gamma * diff * diff).exp()
        })
        .collect()
}

/// Continuous-filter interaction with a skip connection:
/// `x_i + U2·ssp(U1·Σ_j (V x_j) ⊙ F(rbf(d_ij)))`.
#[derive(Clone, Debug, PartialEq)]
pub struct SchNetInteraction {
    pub value: Linear,
    pub filter: Mlp,
    pub update_in: Linear,
    pub update_out: Linear,
}

impl SchNetInteraction {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, f: usize, num_rbf: usize) -> Self {
        SchNetInteraction {
            value: Linear::new(store, rng, &format!("{name}.value"), f, f, false),
            filter: Mlp::new(
                store,
                rng,
                &format!("{name}.filter"),
                MlpSpec {
                    inputs: num_rbf,
                    hidden: f,
                    outputs: f,
                    batch_norm: false,
                    activation: Activation::ShiftedSoftplus,
                    dropout: 0.0,
                },
            ),
            update_in: Linear::new(store, rng, &format!("{name}.update_in"), f, f, true),
            update_out: Linear::new(store, rng, &format!("{name}.update_out"), f, f, true),
        }
    }

    /// `rbf` holds one expanded distance row per edge of `(src, dst)`.
    pub fn forward(&self, tape: &mut Tape, x: Var, src: &[usize], dst: &[usize], rbf: Var) -> Result<Var> {
        let n = tape.value(x).rows();
        let v = self.value.forward(tape, x)?;
        let w = self.filter.forward(tape, rbf)?;
        let vj = tape.gather(v, src)?;
        let msg = tape.mul(vj, w)?;
        let agg = tape.segment_sum(msg, dst, n)?;
        let h = self.update_in.forward(tape, agg)?;
        let h = tape.shifted_softplus(h)?;
        let h = self.update_out.forward(tape, h)?;
        tape.add(x, h)
    }
}

/// Expanded distances of `graph` as a constant `[edges, num_rbf]` tensor.
pub fn rbf_tensor(graph: &SpatialGraph, cutoff: f64, num_rbf: usize) -> Tensor {
    let data = graph
        .dist
        .iter()
        .flat_map(|&d| rbf_expand(d, cutoff, num_rbf))
        .collect();
    Tensor::new(vec![graph.len(), num_rbf], data).expect("shape matches")
}

/// Elementwise maximum over a non-empty list of equally shaped node arrays.
pub fn set_max_pool(tape: &mut Tape, feats: &[Var]) -> Result<Var> {
    let first = *feats
        .first()
        .ok_or_else(|| Error::invalid("set_max_pool over an empty set"))?;
    let n = tape.value(first).rows();
    let all = tape.concat(feats)?;
    let owner: Vec<usize> = (0..n * feats.len()).map(|r| r % n).collect();
    tape.segment_max(all, &owner, n)
}

/// `(1 + ε) x_i + Σ_{j→i} ReLU(x_j + e_ji)`.
pub fn gin_aggregate(tape: &mut Tape, x: Var, src: &[usize], dst: &[usize], edge: Var, eps: Var) -> Result<Var> {
    let n = tape.value(x).rows();
    let xj = tape.gather(x, src)?;
    let m = tape.add(xj, edge)?;
    let m = tape.relu(m)?;
    let agg = tape.segment_sum(m, dst, n)?;
    let scaled = tape.scale_by(x, eps)?;
    let self_term = tape.add(x, scaled)?;
    tape.add(self_term, agg)
}

pub fn gin_aggregated_forward(
    tape: &mut Tape,
    x: Var,
    src: &[usize],
    dst: &[usize],
    edge: Var,
    eps: Var,
    mlp: &impl Module,
) -> Result<Var> {
    let h = gin_aggregate(tape, x, src, dst, edge, eps)?;
    mlp.forward(tape, h)
}

#[derive(Clone, Debug, PartialEq)]
pub struct GinBlock {
    pub edge_tables: Vec<ParamId>,
    pub eps: ParamId,
    pub mlp: Mlp,
}

impl GinBlock {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, vocab: &FeatureVocab, f: usize) -> Self {
        let edge_tables = vocab
            .edge
            .iter()
            .enumerate()
            .map(|(j, &size)| store.add(format!("{name}.edge_emb.{j}"), glorot(rng, size, f), true))
            .collect();
        GinBlock {
            edge_tables,
            eps: store.add(format!("{name}.eps"), Tensor::scalar(0.0), true),
            mlp: Mlp::new(
                store,
                rng,
                &format!("{name}.mlp"),
                MlpSpec {
                    inputs: f,
                    hidden: 2 * f,
                    outputs: f,
                    batch_norm: true,
                    activation: Activation::Relu,
                    dropout: 0.0,
                },
            ),
        }
    }

    pub fn forward(&self, tape: &mut Tape, x: Var, batch: &Batch) -> Result<Var> {
        let e = embed_features(tape, &self.edge_tables, &batch.edge_feat)?;
        let eps = tape.param(self.eps);
        gin_aggregated_forward(tape, x, &batch.edge_src, &batch.edge_dst, e, eps, &self.mlp)
    }
}

/// Row bookkeeping for the conformer nodes of a batch.
///
/// Conformer node rows are laid out graph by graph, conformer by conformer,
/// atom by atom.
#[derive(Clone, Debug)]
pub struct ConformerLayout {
    /// Aggregated-graph node behind each conformer node row.
    pub atom_of_row: Vec<usize>,
    /// Global conformer index of each conformer node row.
    pub conformer_of_row: Vec<usize>,
    /// Graph of each global conformer.
    pub graph_of_conformer: Vec<usize>,
    pub spatial_src: Vec<usize>,
    pub spatial_dst: Vec<usize>,
    pub rbf: Tensor,
}

impl ConformerLayout {
    pub fn build(batch: &Batch, cutoff: f64, num_rbf: usize) -> Result<Self> {
        let confs = batch
            .conformers
            .as_ref()
            .ok_or_else(|| Error::invalid("3D forward pass needs conformers attached to the batch"))?;
        let mut layout = ConformerLayout {
            atom_of_row: Vec::new(),
            conformer_of_row: Vec::new(),
            graph_of_conformer: Vec::new(),
            spatial_src: Vec::new(),
            spatial_dst: Vec::new(),
            rbf: Tensor::zeros(&[0, num_rbf]),
        };
        let mut rbf = Vec::new();
        for (g, set) in confs.iter().enumerate() {
            for coords in set {
                let base = layout.atom_of_row.len();
                let cid = layout.graph_of_conformer.len();
                layout.graph_of_conformer.push(g);
                for i in 0..batch.sizes[g] {
                    layout.atom_of_row.push(batch.offsets[g] + i);
                    layout.conformer_of_row.push(cid);
                }
                let sg = build_radius_graph(coords, cutoff);
                layout.spatial_src.extend(sg.src.iter().map(|s| s + base));
                layout.spatial_dst.extend(sg.dst.iter().map(|d| d + base));
                rbf.extend(sg.dist.iter().flat_map(|&d| rbf_expand(d, cutoff, num_rbf)));
            }
        }
        layout.rbf = Tensor::new(vec![layout.spatial_src.len(), num_rbf], rbf)?;
        Ok(layout)
    }

    pub fn num_rows(&self) -> usize {
        self.atom_of_row.len()
    }

    pub fn num_conformers(&self) -> usize {
        self.graph_of_conformer.len()
    }
}

/// Node features flowing between layers.
#[derive(Clone, Copy, Debug)]
pub struct ConformerState {
    /// `[conformer rows, f]`
    pub conformers: Var,
    /// `[atoms, f]`, the pooled bond-topology graph.
    pub aggregated: Var,
    /// `[graphs, f]`
    pub virtual_node: Var,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConfDssLayer {
    pub interaction: SchNetInteraction,
    pub gin: GinBlock,
    pub virtual_node: Option<Mlp>,
}

impl ConfDssLayer {
    pub fn forward(
        &self,
        tape: &mut Tape,
        state: ConformerState,
        batch: &Batch,
        layout: &ConformerLayout,
        rbf: Var,
    ) -> Result<ConformerState> {
        let per_conf =
            self.interaction
                .forward(tape, state.conformers, &layout.spatial_src, &layout.spatial_dst, rbf)?;
        let pooled = tape.segment_max(per_conf, &layout.atom_of_row, batch.num_nodes)?;
        let mut aggregated = self.gin.forward(tape, pooled, batch)?;
        let mut g = state.virtual_node;
        if let Some(mlp) = &self.virtual_node {
            (aggregated, g) = virtual_node_update(tape, aggregated, g, &batch.node_graph, batch.num_graphs, mlp)?;
        }
        let back = tape.gather(aggregated, &layout.atom_of_row)?;
        let conformers = tape.add(per_conf, back)?;
        Ok(ConformerState {
            conformers,
            aggregated,
            virtual_node: g,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model3DParams {
    pub node_tables: Vec<ParamId>,
    pub layers: Vec<ConfDssLayer>,
    pub head: Mlp,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model3D {
    pub config: Model3DConfig,
    pub vocab: FeatureVocab,
    pub store: ParamStore,
    pub params: Model3DParams,
}

impl Model3D {
    pub fn new(config: Model3DConfig, vocab: FeatureVocab, seed: u64) -> Result<Self> {
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
        let layers = (0..config.num_confdss_layers)
            .map(|l| {
                let name = format!("confdss{l}");
                ConfDssLayer {
                    interaction: SchNetInteraction::new(
                        &mut store,
                        &mut rng,
                        &format!("{name}.schnet"),
                        f,
                        config.num_rbf,
                    ),
                    gin: GinBlock::new(&mut store, &mut rng, &format!("{name}.gin"), &vocab, f),
                    virtual_node: config.virtual_node.then(|| {
                        Mlp::new(
                            &mut store,
                            &mut rng,
                            &format!("{name}.vn.mlp"),
                            MlpSpec {
                                inputs: f,
                                hidden: f,
                                outputs: f,
                                batch_norm: true,
                                activation: Activation::Relu,
                                dropout: config.dropout,
                            },
                        )
                    }),
                }
            })
            .collect();
        let head = Mlp::new(
            &mut store,
            &mut rng,
            "head",
            MlpSpec {
                inputs: f,
                hidden: f,
                outputs: 1,
                batch_norm: false,
                activation: Activation::Relu,
                dropout: 0.0,
            },
        );
        Ok(Model3D {
            config,
            vocab,
            store,
            params: Model3DParams {
                node_tables,
                layers,
                head,
            },
        })
    }

    /// One prediction per graph, shape `[num_graphs, 1]`. The batch must carry
    /// conformers for every graph.
    pub fn forward(&self, tape: &mut Tape, batch: &Batch) -> Result<Var> {
        let layout = ConformerLayout::build(batch, self.config.radius_cutoff, self.config.num_rbf)?;
        let f = self.config.hidden_dim;
        let atoms = embed_features(tape, &self.params.node_tables, &batch.node_feat)?;
        let rbf = tape.constant(layout.rbf.clone());
        let mut state = ConformerState {
            conformers: tape.gather(atoms, &layout.atom_of_row)?,
            aggregated: atoms,
            virtual_node: tape.constant(Tensor::zeros(&[batch.num_graphs, f])),
        };
        for layer in &self.params.layers {
            state = layer.forward(tape, state, batch, &layout, rbf)?;
            state.conformers = tape.relu(state.conformers)?;
        }
        let per_conformer = tape.segment_sum(state.conformers, &layout.conformer_of_row, layout.num_conformers())?;
        let molecule = tape.segment_max(per_conformer, &layout.graph_of_conformer, batch.num_graphs)?;
        self.params.head.forward(tape, molecule)
    }

    /// Eval-mode prediction for one molecule using at most
    /// `max_predict_conformers` conformers; `None` when it has none.
    pub fn predict_molecule(&self, graph: &MolecularGraph, set: &ConformerSet) -> Result<Option<f64>> {
        if set.is_empty() {
            return Ok(None);
        }
        let confs = select_conformers(&set.conformers, self.config.max_predict_conformers, None);
        let batch = batch_graphs(&[graph])?.with_conformers(vec![confs])?;
        let mut tape = Tape::new(&self.store, Mode::Eval, 0);
        let out = self.forward(&mut tape, &batch)?;
        Ok(Some(tape.value(out).data()[0]))
    }

    /// Eval-mode predictions for a batch that already carries conformers.
    pub fn predict(&self, batch: &Batch) -> Result<Vec<f64>> {
        let mut tape = Tape::new(&self.store, Mode::Eval, 0);
        let out = self.forward(&mut tape, batch)?;
        Ok(tape.value(out).data().to_vec())
    }
}

/// Keeps at most `cap` conformers. With an rng the subset is a uniform sample
/// without replacement (kept in original order); without one the first `cap`
/// are used.
pub fn select_conformers(confs: &[Coords], cap: usize, rng: Option<&mut ChaCha8Rng>) -> Vec<Coords> {
    if confs.len() <= cap {
        return confs.to_vec();
    }
    match rng {
        Some(rng) => {
            let mut idx = sample(rng, confs.len(), cap).into_vec();
            idx.sort_unstable();
            idx.into_iter().map(|i| confs[i].clone()).collect()
        }
        None => confs[..cap].to_vec(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Identity;

    #[test]
    fn radius_graph_on_a_line() {
        let coords = [[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [3.0, 0.0, 0.0]];
        let g = build_radius_graph(&coords, 1.5);
        assert_eq!(g.src, vec![0, 1]);
        assert_eq!(g.dst, vec![1, 0]);
        assert_eq!(g.dist, vec![1.0, 1.0]);
        assert!(build_radius_graph(&coords[..1], 10.0).is_empty());
        assert!(build_radius_graph(&coords, 0.0).is_empty());
        assert_eq!(build_radius_graph(&coords[..2], f64::INFINITY).len(), 2);
    }

    #[test]
    fn rbf_examples() {
        let v = rbf_expand(2.0, 4.0, 2);
        let expected = (-4.0f64 / 32.0).exp();
        assert!((v[0] - expected).abs() < 1e-15 && (v[1] - expected).abs() < 1e-15);
        assert!((expected - 0.8825).abs() < 1e-4);
        let centers = rbf_expand(5.0 / 63.0 * 10.0, 5.0, 64);
        assert!((centers[10] - 1.0).abs() < 1e-12);
        for d in [0.0, 0.3, 2.2, 5.0, 9.0] {
            assert!(rbf_expand(d, 5.0, 64).iter().all(|&x| (0.0..=1.0).contains(&x)));
        }
    }

    #[test]
    fn set_max_pool_examples() {
        let store = ParamStore::new();
        let mut tape = Tape::new(&store, Mode::Eval, 0);
        let a = tape.constant(Tensor::from_rows(&[vec![1.0], vec![0.0]]).unwrap());
        let b = tape.constant(Tensor::from_rows(&[vec![0.0], vec![2.0]]).unwrap());
        let m = set_max_pool(&mut tape, &[a, b]).unwrap();
        assert_eq!(tape.value(m).data(), &[1.0, 2.0]);
        let m2 = set_max_pool(&mut tape, &[b, a]).unwrap();
        assert_eq!(tape.value(m), tape.value(m2));
        let single = set_max_pool(&mut tape, &[a]).unwrap();
        assert_eq!(tape.value(single), tape.value(a));
        assert!(set_max_pool(&mut tape, &[]).is_err());
    }

    #[test]
    fn gin_without_edges_is_identity() {
        let store = ParamStore::new();
        let mut tape = Tape::new(&store, Mode::Eval, 0);
        let x = tape.constant(Tensor::from_rows(&[vec![1.5, -2.0], vec![0.25, 7.0]]).unwrap());
        let e = tape.constant(Tensor::zeros(&[0, 2]));
        let eps = tape.constant(Tensor::scalar(0.0));
        let out = gin_aggregated_forward(&mut tape, x, &[], &[], e, eps, &Identity).unwrap();
        assert_eq!(tape.value(out), tape.value(x));
    }

    #[test]
    fn schnet_with_zero_output_layer_is_identity() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let block = SchNetInteraction::new(&mut store, &mut rng, "s", 4, 8);
        block.update_out.zero(&mut store);
        let coords = vec![[0.0, 0.0, 0.0], [1.2, 0.0, 0.0], [0.0, 1.0, 0.5]];
        let sg = build_radius_graph(&coords, 5.0);
        let mut tape = Tape::new(&store, Mode::Eval, 0);
        let x = tape.constant(glorot(&mut rng, 3, 4));
        let rbf = tape.constant(rbf_tensor(&sg, 5.0, 8));
        let out = block.forward(&mut tape, x, &sg.src, &sg.dst, rbf).unwrap();
        assert_eq!(tape.value(out), tape.value(x));
    }

    #[test]
    fn conformer_selection() {
        let confs: Vec<Coords> = (0..30).map(|i| vec![[i as f64, 0.0, 0.0]]).collect();
        assert_eq!(select_conformers(&confs, 40, None).len(), 30);
        assert_eq!(select_conformers(&confs, 20, None), confs[..20].to_vec());
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let picked = select_conformers(&confs, 20, Some(&mut rng));
        assert_eq!(picked.len(), 20);
        let xs: Vec<f64> = picked.iter().map(|c| c[0][0]).collect();
        assert!(xs.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn config_validation() {
        assert!(Model3DConfig::default().validate().is_ok());
        for bad in [
            Model3DConfig {
                radius_cutoff: 0.0,
                ..Default::default()
            },
            Model3DConfig {
                num_rbf: 1,
                ..Default::default()
            },
            Model3DConfig {
                max_train_conformers: 0,
                ..Default::default()
            },
        ] {
            assert!(bad.validate().is_err());
        }
    }
}
