//! Tape-based reverse-mode differentiation over [`Tensor`]s.
//!
//! A [`Tape`] borrows a [`ParamStore`] read-only, records every primitive
//! applied during a forward pass, and replays them in reverse in
//! [`Tape::backward`]. Gradients come back as a [`Gradients`] value which the
//! caller adds into the store, so many tapes can share one store during
//! inference.
//!
//! Tensors are treated as matrices whose first axis indexes rows and whose
//! remaining axes are flattened into columns. Segment primitives reduce rows
//! that share a segment id.
//!
//! In deterministic mode every reduction over a variable-size set of rows
//! (segment reductions, batch-norm statistics, loss means) sums its terms in
//! sorted order. The result then depends only on the multiset of terms, so
//! relabelling nodes or reordering edges reproduces outputs bit for bit.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::diffcore::param::{Gradients, ParamId, ParamStore};
use crate::diffcore::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

/// Batch-normalization parameters living in a [`ParamStore`].
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub eps: f64,
    pub momentum: f64,
}

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

impl BatchNorm {
    pub fn new(store: &mut ParamStore, name: &str, features: usize) -> Self {
        BatchNorm {
            gamma: store.add(format!("{name}.gamma"), Tensor::full(&[features], 1.0), true),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[features]), true),
            running_mean: store.add(format!("{name}.running_mean"), Tensor::zeros(&[features]), false),
            running_var: store.add(format!("{name}.running_var"), Tensor::full(&[features], 1.0), false),
            eps: BN_EPS,
            momentum: BN_MOMENTUM,
        }
    }
}

/// Pending running-statistics update produced by a train-mode batch norm.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStatUpdate {
    mean_id: ParamId,
    var_id: ParamId,
    batch_mean: Vec<f64>,
    batch_var: Vec<f64>,
    momentum: f64,
}

impl RunningStatUpdate {
    pub fn apply(&self, store: &mut ParamStore) {
        let m = self.momentum;
        for (r, b) in store
            .get_mut(self.mean_id)
            .value
            .data_mut()
            .iter_mut()
            .zip(&self.batch_mean)
        {
            *r = (1.0 - m) * *r + m * b;
        }
        for (r, b) in store
            .get_mut(self.var_id)
            .value
            .data_mut()
            .iter_mut()
            .zip(&self.batch_var)
        {
            *r = (1.0 - m) * *r + m * b;
        }
    }
}

enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulCol(Var, Var),
    Scale(Var, f64),
    Shift(Var),
    ScaleBy(Var, Var),
    Relu(Var),
    Sigmoid(Var),
    ShiftedSoftplus(Var),
    Abs(Var),
    Sum(Var),
    Mean(Var),
    SegmentSum {
        src: Var,
        seg: Vec<usize>,
    },
    SegmentMean {
        src: Var,
        seg: Vec<usize>,
        counts: Vec<usize>,
    },
    SegmentMax {
        src: Var,
        // flat source index per output element; usize::MAX for empty segments
        argmax: Vec<usize>,
    },
    SegmentSoftmax {
        src: Var,
        seg: Vec<usize>,
        num: usize,
    },
    SoftmaxAggregate {
        logits: Var,
        values: Var,
        seg: Vec<usize>,
        weights: Vec<f64>,
    },
    Gather {
        src: Var,
        idx: Vec<usize>,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        train: bool,
    },
    Dropout {
        src: Var,
        mask: Vec<f64>,
    },
    Stack(Vec<Var>),
    Concat(Vec<Var>),
    Reshape(Var),
}

struct Node {
    value: Tensor,
    op: Op,
}

pub struct Tape<'s> {
    store: &'s ParamStore,
    nodes: Vec<Node>,
    mode: Mode,
    deterministic: bool,
    stochastic: bool,
    rng: ChaCha8Rng,
    param_vars: HashMap<ParamId, Var>,
    running_stats: Vec<RunningStatUpdate>,
}

fn dims(t: &Tensor) -> (usize, usize) {
    (t.rows(), t.row_len())
}

/// Sum of `buf`; sorted first when `canonical` so the result depends only on
/// the multiset of terms.
fn reduce_sum(buf: &mut [f64], canonical: bool) -> f64 {
    if canonical {
        buf.sort_unstable_by(f64::total_cmp);
    }
    buf.iter().fold(0.0, |acc, v| acc + v)
}

fn buckets(seg: &[usize], num: usize) -> Vec<Vec<usize>> {
    let mut out = vec![Vec::new(); num];
    for (row, &s) in seg.iter().enumerate() {
        out[s].push(row);
    }
    out
}

impl<'s> Tape<'s> {
    pub fn new(store: &'s ParamStore, mode: Mode, seed: u64) -> Self {
        Tape {
            store,
            nodes: Vec::new(),
            mode,
            deterministic: true,
            stochastic: false,
            rng: ChaCha8Rng::seed_from_u64(seed),
            param_vars: HashMap::new(),
            running_stats: Vec::new(),
        }
    }

    /// Switches to index-order reductions. Results stay reproducible run to
    /// run but are no longer invariant to row relabelling at the bit level.
    pub fn with_deterministic(mut self, deterministic: bool) -> Self {
        self.deterministic = deterministic;
        self
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn store(&self) -> &'s ParamStore {
        self.store
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// True once a random dropout mask has been drawn on this tape.
    pub fn is_stochastic(&self) -> bool {
        self.stochastic
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn take_running_stats(&mut self) -> Vec<RunningStatUpdate> {
        std::mem::take(&mut self.running_stats)
    }

    fn push(&mut self, name: &'static str, value: Tensor, op: Op) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: name });
        }
        self.nodes.push(Node { value, op });
        Ok(Var(self.nodes.len() - 1))
    }

    fn val(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars.get(&id) {
            return *v;
        }
        let value = self.store.value(id).clone();
        self.nodes.push(Node {
            value,
            op: Op::Param(id),
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.val(a), self.val(b));
        if av.shape().len() != 2 || bv.shape().len() != 2 || av.shape()[1] != bv.shape()[0] {
            return Err(Error::shape("matmul", format!("{:?} x {:?}", av.shape(), bv.shape())));
        }
        let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
        let mut out = vec![0.0; m * n];
        let (ad, bd) = (av.data(), bv.data());
        for i in 0..m {
            let orow = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let aip = ad[i * k + p];
                if aip == 0.0 {
                    continue;
                }
                let brow = &bd[p * n..(p + 1) * n];
                for (o, b) in orow.iter_mut().zip(brow) {
                    *o += aip * b;
                }
            }
        }
        self.push("matmul", Tensor::new(vec![m, n], out)?, Op::MatMul(a, b))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.val(a).shape() != self.val(b).shape() {
            return Err(Error::shape(
                op,
                format!("{:?} vs {:?}", self.val(a).shape(), self.val(b).shape()),
            ));
        }
        Ok(())
    }

    fn zip_map(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (av, bv) = (self.val(a), self.val(b));
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| f(*x, *y)).collect();
        Tensor::new(av.shape().to_vec(), data).expect("same shape")
    }

    fn map(&self, a: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let av = self.val(a);
        Tensor::new(av.shape().to_vec(), av.data().iter().map(|x| f(*x)).collect()).expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let v = self.zip_map(a, b, |x, y| x + y);
        self.push("add", v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let v = self.zip_map(a, b, |x, y| x - y);
        self.push("sub", v, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let v = self.zip_map(a, b, |x, y| x * y);
        self.push("mul", v, Op::Mul(a, b))
    }

    /// `a[i, :] + row` for every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (m, n) = dims(self.val(a));
        if self.val(row).len() != n {
            return Err(Error::shape(
                "add_row",
                format!("{:?} + row {:?}", self.val(a).shape(), self.val(row).shape()),
            ));
        }
        let rv = self.val(row).data();
        let mut out = self.val(a).data().to_vec();
        for i in 0..m {
            for (o, r) in out[i * n..(i + 1) * n].iter_mut().zip(rv) {
                *o += r;
            }
        }
        let shape = self.val(a).shape().to_vec();
        self.push("add_row", Tensor::new(shape, out)?, Op::AddRow(a, row))
    }

    /// `a[i, :] * col[i]` for every row of `a`.
    pub fn mul_col(&mut self, a: Var, col: Var) -> Result<Var> {
        let (m, n) = dims(self.val(a));
        if self.val(col).len() != m {
            return Err(Error::shape(
                "mul_col",
                format!("{:?} * col {:?}", self.val(a).shape(), self.val(col).shape()),
            ));
        }
        let cv = self.val(col).data();
        let mut out = self.val(a).data().to_vec();
        for i in 0..m {
            for o in &mut out[i * n..(i + 1) * n] {
                *o *= cv[i];
            }
        }
        let shape = self.val(a).shape().to_vec();
        self.push("mul_col", Tensor::new(shape, out)?, Op::MulCol(a, col))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let v = self.map(a, |x| x * c);
        self.push("scale", v, Op::Scale(a, c))
    }

    /// Adds a constant to every element.
    pub fn shift(&mut self, a: Var, c: f64) -> Result<Var> {
        let v = self.map(a, |x| x + c);
        self.push("shift", v, Op::Shift(a))
    }

    /// Multiplies `a` by a one-element variable.
    pub fn scale_by(&mut self, a: Var, s: Var) -> Result<Var> {
        if self.val(s).len() != 1 {
            return Err(Error::shape(
                "scale_by",
                format!("scalar expected, got {:?}", self.val(s).shape()),
            ));
        }
        let c = self.val(s).data()[0];
        let v = self.map(a, |x| x * c);
        self.push("scale_by", v, Op::ScaleBy(a, s))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let v = self.map(a, |x| if x > 0.0 { x } else { 0.0 });
        self.push("relu", v, Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let v = self.map(a, sigmoid);
        self.push("sigmoid", v, Op::Sigmoid(a))
    }

    /// `ln(0.5 e^x + 0.5)`.
    pub fn shifted_softplus(&mut self, a: Var) -> Result<Var> {
        let v = self.map(a, shifted_softplus);
        self.push("shifted_softplus", v, Op::ShiftedSoftplus(a))
    }

    pub fn abs(&mut self, a: Var) -> Result<Var> {
        let v = self.map(a, f64::abs);
        self.push("abs", v, Op::Abs(a))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let mut buf = self.val(a).data().to_vec();
        let s = reduce_sum(&mut buf, self.deterministic);
        self.push("sum", Tensor::scalar(s), Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.val(a).len();
        if n == 0 {
            return Err(Error::shape("mean", "empty input"));
        }
        let mut buf = self.val(a).data().to_vec();
        let s = reduce_sum(&mut buf, self.deterministic) / n as f64;
        self.push("mean", Tensor::scalar(s), Op::Mean(a))
    }

    fn check_segments(&self, op: &'static str, rows: usize, seg: &[usize], num: usize) -> Result<()> {
        if seg.len() != rows {
            return Err(Error::shape(op, format!("{rows} rows but {} segment ids", seg.len())));
        }
        if let Some(&bad) = seg.iter().find(|&&s| s >= num) {
            return Err(Error::Index {
                op,
                index: bad,
                bound: num,
            });
        }
        Ok(())
    }

    fn out_shape(&self, a: Var, rows: usize) -> Vec<usize> {
        let mut shape = self.val(a).shape().to_vec();
        if shape.is_empty() {
            shape.push(rows);
        } else {
            shape[0] = rows;
        }
        shape
    }

    fn segment_reduce(&self, a: Var, seg: &[usize], num: usize) -> Vec<f64> {
        let (_, n) = dims(self.val(a));
        let src = self.val(a).data();
        let mut out = vec![0.0; num * n];
        let mut buf = Vec::new();
        for (s, rows) in buckets(seg, num).iter().enumerate() {
            if rows.is_empty() {
                continue;
            }
            for c in 0..n {
                buf.clear();
                buf.extend(rows.iter().map(|r| src[r * n + c]));
                out[s * n + c] = reduce_sum(&mut buf, self.deterministic);
            }
        }
        out
    }

    /// Sums rows sharing a segment id. Empty segments yield zero.
    pub fn segment_sum(&mut self, a: Var, seg: &[usize], num: usize) -> Result<Var> {
        let (m, _) = dims(self.val(a));
        self.check_segments("segment_sum", m, seg, num)?;
        let out = self.segment_reduce(a, seg, num);
        let shape = self.out_shape(a, num);
        self.push(
            "segment_sum",
            Tensor::new(shape, out)?,
            Op::SegmentSum {
                src: a,
                seg: seg.to_vec(),
            },
        )
    }

    /// Averages rows sharing a segment id. Empty segments yield zero.
    pub fn segment_mean(&mut self, a: Var, seg: &[usize], num: usize) -> Result<Var> {
        let (m, n) = dims(self.val(a));
        self.check_segments("segment_mean", m, seg, num)?;
        let mut out = self.segment_reduce(a, seg, num);
        let mut counts = vec![0usize; num];
        for &s in seg {
            counts[s] += 1;
        }
        for (s, &c) in counts.iter().enumerate() {
            if c > 0 {
                for o in &mut out[s * n..(s + 1) * n] {
                    *o /= c as f64;
                }
            }
        }
        let shape = self.out_shape(a, num);
        self.push(
            "segment_mean",
            Tensor::new(shape, out)?,
            Op::SegmentMean {
                src: a,
                seg: seg.to_vec(),
                counts,
            },
        )
    }

    /// Elementwise maximum over rows sharing a segment id. Empty segments
    /// yield zero and receive no gradient; ties send the gradient to the
    /// lowest row index.
    pub fn segment_max(&mut self, a: Var, seg: &[usize], num: usize) -> Result<Var> {
        let (m, n) = dims(self.val(a));
        self.check_segments("segment_max", m, seg, num)?;
        let src = self.val(a).data();
        let mut out = vec![0.0; num * n];
        let mut argmax = vec![usize::MAX; num * n];
        for (row, &s) in seg.iter().enumerate() {
            for c in 0..n {
                let v = src[row * n + c];
                let k = s * n + c;
                if argmax[k] == usize::MAX || v > out[k] {
                    out[k] = v;
                    argmax[k] = row * n + c;
                }
            }
        }
        let shape = self.out_shape(a, num);
        self.push(
            "segment_max",
            Tensor::new(shape, out)?,
            Op::SegmentMax { src: a, argmax },
        )
    }

    /// Softmax over the rows of each segment, independently per column.
    pub fn segment_softmax(&mut self, a: Var, seg: &[usize], num: usize) -> Result<Var> {
        let (m, n) = dims(self.val(a));
        self.check_segments("segment_softmax", m, seg, num)?;
        let src = self.val(a).data();
        let mut out = vec![0.0; m * n];
        let mut buf = Vec::new();
        for rows in buckets(seg, num) {
            for c in 0..n {
                let mx = rows.iter().map(|r| src[r * n + c]).fold(f64::NEG_INFINITY, f64::max);
                buf.clear();
                for r in &rows {
                    let e = (src[r * n + c] - mx).exp();
                    out[r * n + c] = e;
                    buf.push(e);
                }
                let denom = reduce_sum(&mut buf, self.deterministic);
                for r in &rows {
                    out[r * n + c] /= denom;
                }
            }
        }
        let shape = self.val(a).shape().to_vec();
        self.push(
            "segment_softmax",
            Tensor::new(shape, out)?,
            Op::SegmentSoftmax {
                src: a,
                seg: seg.to_vec(),
                num,
            },
        )
    }

    /// Softmax-weighted sum of `values` within each segment, with weights
    /// taken from `logits` per column:
    /// `out[s] = Σ_j exp(l_j) v_j / Σ_j exp(l_j)` over rows `j` in segment `s`.
    ///
    /// Numerator and denominator are reduced separately, so constant logits
    /// give exactly the segment mean. Empty segments yield zero.
    pub fn softmax_aggregate(&mut self, logits: Var, values: Var, seg: &[usize], num: usize) -> Result<Var> {
        self.same_shape("softmax_aggregate", logits, values)?;
        let (m, n) = dims(self.val(values));
        self.check_segments("softmax_aggregate", m, seg, num)?;
        let (lv, vv) = (self.val(logits).data(), self.val(values).data());
        let mut out = vec![0.0; num * n];
        let mut weights = vec![0.0; m * n];
        let (mut num_buf, mut den_buf) = (Vec::new(), Vec::new());
        for (s, rows) in buckets(seg, num).iter().enumerate() {
            if rows.is_empty() {
                continue;
            }
            for c in 0..n {
                let mx = rows.iter().map(|r| lv[r * n + c]).fold(f64::NEG_INFINITY, f64::max);
                num_buf.clear();
                den_buf.clear();
                for r in rows {
                    let e = (lv[r * n + c] - mx).exp();
                    weights[r * n + c] = e;
                    num_buf.push(e * vv[r * n + c]);
                    den_buf.push(e);
                }
                let den = reduce_sum(&mut den_buf, self.deterministic);
                out[s * n + c] = reduce_sum(&mut num_buf, self.deterministic) / den;
                for r in rows {
                    weights[r * n + c] /= den;
                }
            }
        }
        let shape = self.out_shape(values, num);
        self.push(
            "softmax_aggregate",
            Tensor::new(shape, out)?,
            Op::SoftmaxAggregate {
                logits,
                values,
                seg: seg.to_vec(),
                weights,
            },
        )
    }

    /// Rows of `a` selected by `idx`.
    pub fn gather(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let (m, n) = dims(self.val(a));
        if let Some(&bad) = idx.iter().find(|&&i| i >= m) {
            return Err(Error::Index {
                op: "gather",
                index: bad,
                bound: m,
            });
        }
        let src = self.val(a).data();
        let mut out = Vec::with_capacity(idx.len() * n);
        for &i in idx {
            out.extend_from_slice(&src[i * n..(i + 1) * n]);
        }
        let shape = self.out_shape(a, idx.len());
        self.push(
            "gather",
            Tensor::new(shape, out)?,
            Op::Gather {
                src: a,
                idx: idx.to_vec(),
            },
        )
    }

    /// Row lookup into a learned table: `table[idx[i], :]`.
    pub fn embedding(&mut self, table: ParamId, idx: &[usize]) -> Result<Var> {
        let t = self.param(table);
        self.gather(t, idx)
    }

    /// Batch normalization over rows. Train mode uses batch statistics and
    /// queues a running-statistics update; eval mode uses running statistics.
    pub fn batch_norm(&mut self, x: Var, bn: &BatchNorm) -> Result<Var> {
        let (m, n) = dims(self.val(x));
        if self.store.value(bn.gamma).len() != n {
            return Err(Error::shape(
                "batch_norm",
                format!("{n} features but parameters for {}", self.store.value(bn.gamma).len()),
            ));
        }
        let gamma = self.param(bn.gamma);
        let beta = self.param(bn.beta);
        let train = self.mode == Mode::Train;
        let src = self.val(x).data();
        let (mean, var) = if train {
            if m == 0 {
                return Err(Error::shape("batch_norm", "empty batch in train mode"));
            }
            let mut mean = vec![0.0; n];
            let mut var = vec![0.0; n];
            let mut buf = Vec::with_capacity(m);
            for c in 0..n {
                buf.clear();
                buf.extend((0..m).map(|r| src[r * n + c]));
                mean[c] = reduce_sum(&mut buf, self.deterministic) / m as f64;
                buf.clear();
                buf.extend((0..m).map(|r| (src[r * n + c] - mean[c]).powi(2)));
                var[c] = reduce_sum(&mut buf, self.deterministic) / m as f64;
            }
            (mean, var)
        } else {
            (
                self.store.value(bn.running_mean).data().to_vec(),
                self.store.value(bn.running_var).data().to_vec(),
            )
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + bn.eps).sqrt()).collect();
        let (g, b) = (self.val(gamma).data(), self.val(beta).data());
        let mut xhat = vec![0.0; m * n];
        let mut out = vec![0.0; m * n];
        for r in 0..m {
            for c in 0..n {
                let k = r * n + c;
                xhat[k] = (src[k] - mean[c]) * inv_std[c];
                out[k] = g[c] * xhat[k] + b[c];
            }
        }
        if train {
            let unbiased = if m > 1 {
                var.iter().map(|v| v * m as f64 / (m - 1) as f64).collect()
            } else {
                var.clone()
            };
            self.running_stats.push(RunningStatUpdate {
                mean_id: bn.running_mean,
                var_id: bn.running_var,
                batch_mean: mean,
                batch_var: unbiased,
                momentum: bn.momentum,
            });
        }
        let shape = self.val(x).shape().to_vec();
        self.push(
            "batch_norm",
            Tensor::new(shape, out)?,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            },
        )
    }

    /// Inverted dropout: active only in train mode with `rate > 0`.
    pub fn dropout(&mut self, a: Var, rate: f64) -> Result<Var> {
        if self.mode == Mode::Eval || rate <= 0.0 {
            return Ok(a);
        }
        let keep = 1.0 - rate;
        let n = self.val(a).len();
        let mask: Vec<f64> = (0..n)
            .map(|_| if self.rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        self.stochastic = true;
        self.dropout_with_mask(a, mask)
    }

    /// Multiplies by a caller-supplied mask; deterministic.
    pub fn dropout_with_mask(&mut self, a: Var, mask: Vec<f64>) -> Result<Var> {
        if mask.len() != self.val(a).len() {
            return Err(Error::shape(
                "dropout",
                format!("mask of {} for {:?}", mask.len(), self.val(a).shape()),
            ));
        }
        let av = self.val(a);
        let data = av.data().iter().zip(&mask).map(|(x, k)| x * k).collect();
        let v = Tensor::new(av.shape().to_vec(), data)?;
        self.push("dropout", v, Op::Dropout { src: a, mask })
    }

    /// Stacks `k` tensors of shape `[m, ...]` into `[m, k, ...]`.
    pub fn stack(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Error::shape("stack", "no inputs"))?;
        let shape0 = self.val(*first).shape().to_vec();
        for p in parts {
            if self.val(*p).shape() != shape0.as_slice() {
                return Err(Error::shape(
                    "stack",
                    format!("{:?} vs {:?}", self.val(*p).shape(), shape0),
                ));
            }
        }
        let (m, n) = dims(self.val(*first));
        let k = parts.len();
        let mut out = vec![0.0; m * k * n];
        for (t, p) in parts.iter().enumerate() {
            let src = self.val(*p).data();
            for r in 0..m {
                out[(r * k + t) * n..(r * k + t + 1) * n].copy_from_slice(&src[r * n..(r + 1) * n]);
            }
        }
        let mut shape = vec![m, k];
        shape.extend_from_slice(shape0.get(1..).unwrap_or(&[]));
        self.push("stack", Tensor::new(shape, out)?, Op::Stack(parts.to_vec()))
    }

    /// Concatenates along the first axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Error::shape("concat", "no inputs"))?;
        let tail = self.val(*first).shape()[1..].to_vec();
        let mut rows = 0;
        let mut out = Vec::new();
        for p in parts {
            let v = self.val(*p);
            if v.shape()[1..] != tail[..] {
                return Err(Error::shape(
                    "concat",
                    format!("{:?} vs trailing {:?}", v.shape(), tail),
                ));
            }
            rows += v.rows();
            out.extend_from_slice(v.data());
        }
        let mut shape = vec![rows];
        shape.extend(tail);
        self.push("concat", Tensor::new(shape, out)?, Op::Concat(parts.to_vec()))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        if shape.iter().product::<usize>() != self.val(a).len() {
            return Err(Error::shape(
                "reshape",
                format!("{:?} -> {:?}", self.val(a).shape(), shape),
            ));
        }
        let v = self.val(a).clone().reshaped(shape.to_vec());
        self.push("reshape", v, Op::Reshape(a))
    }

    /// Backpropagates from a one-element output with seed gradient 1.
    pub fn backward_scalar(&self, output: Var) -> Result<Gradients> {
        self.backward(output, &Tensor::scalar(1.0))
    }

    /// Reverse pass seeded with `output_grad`; returns gradients for every
    /// parameter read on this tape.
    pub fn backward(&self, output: Var, output_grad: &Tensor) -> Result<Gradients> {
        if output.0 >= self.nodes.len() {
            return Err(Error::NoForward(format!(
                "variable {} not recorded on this tape ({} nodes)",
                output.0,
                self.nodes.len()
            )));
        }
        let out_shape = self.val(output).shape();
        if self.val(output).len() != output_grad.len() || (out_shape != output_grad.shape() && output_grad.len() != 1) {
            return Err(Error::shape(
                "backward",
                format!("output {:?} vs seed {:?}", out_shape, output_grad.shape()),
            ));
        }
        let mut grads: Vec<Option<Vec<f64>>> = Vec::with_capacity(output.0 + 1);
        grads.resize_with(output.0 + 1, || None);
        grads[output.0] = Some(output_grad.data().to_vec());
        let mut result = Gradients::default();

        for i in (0..=output.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            let mut acc = |v: Var, d: Vec<f64>| match &mut grads[v.0] {
                Some(existing) => existing.iter_mut().zip(d).for_each(|(e, x)| *e += x),
                slot @ None => *slot = Some(d),
            };
            match &node.op {
                Op::Leaf => {}
                Op::Param(id) => {
                    let t = Tensor::new(node.value.shape().to_vec(), g)?;
                    match result.by_param.get_mut(id) {
                        Some(e) => e.add_assign(&t),
                        None => {
                            result.by_param.insert(*id, t);
                        }
                    }
                }
                Op::MatMul(a, b) => {
                    let (av, bv) = (self.val(*a), self.val(*b));
                    let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
                    let (ad, bd) = (av.data(), bv.data());
                    let mut ga = vec![0.0; m * k];
                    let mut gb = vec![0.0; k * n];
                    for r in 0..m {
                        let grow = &g[r * n..(r + 1) * n];
                        for p in 0..k {
                            let brow = &bd[p * n..(p + 1) * n];
                            ga[r * k + p] = grow.iter().zip(brow).map(|(x, y)| x * y).sum();
                            let arp = ad[r * k + p];
                            if arp != 0.0 {
                                for (gbv, gv) in gb[p * n..(p + 1) * n].iter_mut().zip(grow) {
                                    *gbv += arp * gv;
                                }
                            }
                        }
                    }
                    acc(*a, ga);
                    acc(*b, gb);
                }
                Op::Add(a, b) => {
                    acc(*a, g.clone());
                    acc(*b, g);
                }
                Op::Sub(a, b) => {
                    acc(*b, g.iter().map(|x| -x).collect());
                    acc(*a, g);
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (self.val(*a).data(), self.val(*b).data());
                    acc(*a, g.iter().zip(bv).map(|(x, y)| x * y).collect());
                    acc(*b, g.iter().zip(av).map(|(x, y)| x * y).collect());
                }
                Op::AddRow(a, row) => {
                    let n = self.val(*row).len();
                    let mut gr = vec![0.0; n];
                    for chunk in g.chunks(n) {
                        gr.iter_mut().zip(chunk).for_each(|(r, x)| *r += x);
                    }
                    acc(*row, gr);
                    acc(*a, g);
                }
                Op::MulCol(a, col) => {
                    let (av, cv) = (self.val(*a).data(), self.val(*col).data());
                    let n = self.val(*a).row_len();
                    let mut ga = g.clone();
                    let mut gc = vec![0.0; cv.len()];
                    for (r, c) in cv.iter().enumerate() {
                        for j in r * n..(r + 1) * n {
                            ga[j] *= c;
                            gc[r] += g[j] * av[j];
                        }
                    }
                    acc(*a, ga);
                    acc(*col, gc);
                }
                Op::Scale(a, c) => acc(*a, g.iter().map(|x| x * c).collect()),
                Op::Shift(a) => acc(*a, g),
                Op::ScaleBy(a, s) => {
                    let c = self.val(*s).data()[0];
                    let av = self.val(*a).data();
                    let gs: f64 = g.iter().zip(av).map(|(x, y)| x * y).sum();
                    acc(*s, vec![gs]);
                    acc(*a, g.iter().map(|x| x * c).collect());
                }
                Op::Relu(a) => {
                    let av = self.val(*a).data();
                    acc(
                        *a,
                        g.iter().zip(av).map(|(x, y)| if *y > 0.0 { *x } else { 0.0 }).collect(),
                    );
                }
                Op::Sigmoid(a) => {
                    let yv = node.value.data();
                    acc(*a, g.iter().zip(yv).map(|(x, y)| x * y * (1.0 - y)).collect());
                }
                Op::ShiftedSoftplus(a) => {
                    let av = self.val(*a).data();
                    acc(*a, g.iter().zip(av).map(|(x, y)| x * sigmoid(*y)).collect());
                }
                Op::Abs(a) => {
                    let av = self.val(*a).data();
                    acc(
                        *a,
                        g.iter()
                            .zip(av)
                            .map(|(x, y)| {
                                if *y > 0.0 {
                                    *x
                                } else if *y < 0.0 {
                                    -x
                                } else {
                                    0.0
                                }
                            })
                            .collect(),
                    );
                }
                Op::Sum(a) => acc(*a, vec![g[0]; self.val(*a).len()]),
                Op::Mean(a) => {
                    let n = self.val(*a).len();
                    acc(*a, vec![g[0] / n as f64; n]);
                }
                Op::SegmentSum { src, seg } => {
                    let n = self.val(*src).row_len();
                    let mut gs = vec![0.0; seg.len() * n];
                    for (r, &s) in seg.iter().enumerate() {
                        gs[r * n..(r + 1) * n].copy_from_slice(&g[s * n..(s + 1) * n]);
                    }
                    acc(*src, gs);
                }
                Op::SegmentMean { src, seg, counts } => {
                    let n = self.val(*src).row_len();
                    let mut gs = vec![0.0; seg.len() * n];
                    for (r, &s) in seg.iter().enumerate() {
                        let c = counts[s] as f64;
                        for j in 0..n {
                            gs[r * n + j] = g[s * n + j] / c;
                        }
                    }
                    acc(*src, gs);
                }
                Op::SegmentMax { src, argmax } => {
                    let mut gs = vec![0.0; self.val(*src).len()];
                    for (k, &a) in argmax.iter().enumerate() {
                        if a != usize::MAX {
                            gs[a] += g[k];
                        }
                    }
                    acc(*src, gs);
                }
                Op::SegmentSoftmax { src, seg, num } => {
                    let n = self.val(*src).row_len();
                    let y = node.value.data();
                    let mut dot = vec![0.0; num * n];
                    for (r, &s) in seg.iter().enumerate() {
                        for j in 0..n {
                            dot[s * n + j] += g[r * n + j] * y[r * n + j];
                        }
                    }
                    let mut gs = vec![0.0; seg.len() * n];
                    for (r, &s) in seg.iter().enumerate() {
                        for j in 0..n {
                            let k = r * n + j;
                            gs[k] = y[k] * (g[k] - dot[s * n + j]);
                        }
                    }
                    acc(*src, gs);
                }
                Op::SoftmaxAggregate {
                    logits,
                    values,
                    seg,
                    weights,
                } => {
                    let n = self.val(*values).row_len();
                    let vv = self.val(*values).data();
                    let out = node.value.data();
                    let mut gl = vec![0.0; vv.len()];
                    let mut gv = vec![0.0; vv.len()];
                    for (r, &s) in seg.iter().enumerate() {
                        for j in 0..n {
                            let k = r * n + j;
                            let go = g[s * n + j];
                            gv[k] = go * weights[k];
                            gl[k] = go * weights[k] * (vv[k] - out[s * n + j]);
                        }
                    }
                    acc(*logits, gl);
                    acc(*values, gv);
                }
                Op::Gather { src, idx } => {
                    let n = self.val(*src).row_len();
                    let mut gs = vec![0.0; self.val(*src).len()];
                    for (r, &i) in idx.iter().enumerate() {
                        for j in 0..n {
                            gs[i * n + j] += g[r * n + j];
                        }
                    }
                    acc(*src, gs);
                }
                Op::BatchNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                    train,
                } => {
                    let (m, n) = dims(self.val(*x));
                    let gm = self.val(*gamma).data();
                    let mut gg = vec![0.0; n];
                    let mut gb = vec![0.0; n];
                    for r in 0..m {
                        for c in 0..n {
                            let k = r * n + c;
                            gb[c] += g[k];
                            gg[c] += g[k] * xhat[k];
                        }
                    }
                    let mut gx = vec![0.0; m * n];
                    if *train {
                        let mf = m as f64;
                        for c in 0..n {
                            // gb[c] = Σ dy, gg[c] = Σ dy·x̂
                            let sum_dxhat = gm[c] * gb[c];
                            let sum_dxhat_xhat = gm[c] * gg[c];
                            for r in 0..m {
                                let k = r * n + c;
                                let dxhat = g[k] * gm[c];
                                gx[k] = inv_std[c] / mf * (mf * dxhat - sum_dxhat - xhat[k] * sum_dxhat_xhat);
                            }
                        }
                    } else {
                        for r in 0..m {
                            for c in 0..n {
                                let k = r * n + c;
                                gx[k] = g[k] * gm[c] * inv_std[c];
                            }
                        }
                    }
                    acc(*x, gx);
                    acc(*gamma, gg);
                    acc(*beta, gb);
                }
                Op::Dropout { src, mask } => {
                    acc(*src, g.iter().zip(mask).map(|(x, k)| x * k).collect());
                }
                Op::Stack(parts) => {
                    let k = parts.len();
                    let (m, n) = dims(self.val(parts[0]));
                    for (t, p) in parts.iter().enumerate() {
                        let mut gp = vec![0.0; m * n];
                        for r in 0..m {
                            gp[r * n..(r + 1) * n].copy_from_slice(&g[(r * k + t) * n..(r * k + t + 1) * n]);
                        }
                        acc(*p, gp);
                    }
                }
                Op::Concat(parts) => {
                    let mut off = 0;
                    for p in parts {
                        let len = self.val(*p).len();
                        acc(*p, g[off..off + len].to_vec());
                        off += len;
                    }
                }
                Op::Reshape(a) => acc(*a, g),
            }
        }
        Ok(result)
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn shifted_softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p() - std::f64::consts::LN_2
}
