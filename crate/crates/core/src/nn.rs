//! Parameterized building blocks shared by the 2D and 3D models.

use rand::Rng;

use crate::diffcore::{BatchNorm, ParamId, ParamStore, Tape, Tensor, Var};
use crate::error::Result;

pub trait Module {
    fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var>;
}

/// Passes its input through unchanged. Handy as a test double.
pub struct Identity;

impl Module for Identity {
    fn forward(&self, _tape: &mut Tape, x: Var) -> Result<Var> {
        Ok(x)
    }
}

/// Glorot-uniform `[rows, cols]` matrix.
pub fn glorot(rng: &mut impl Rng, rows: usize, cols: usize) -> Tensor {
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    let data = (0..rows * cols).map(|_| rng.gen_range(-limit..limit)).collect();
    Tensor::new(vec![rows, cols], data).expect("shape matches")
}

/// `x W + b` with `W` of shape `[in, out]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        inputs: usize,
        outputs: usize,
        bias: bool,
    ) -> Self {
        Linear {
            weight: store.add(format!("{name}.weight"), glorot(rng, inputs, outputs), true),
            bias: bias.then(|| store.add(format!("{name}.bias"), Tensor::zeros(&[outputs]), true)),
        }
    }

    pub fn zero(&self, store: &mut ParamStore) {
        store.get_mut(self.weight).value.fill(0.0);
        if let Some(b) = self.bias {
            store.get_mut(b).value.fill(0.0);
        }
    }
}

impl Module for Linear {
    fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let w = tape.param(self.weight);
        let y = tape.matmul(x, w)?;
        match self.bias {
            Some(b) => {
                let b = tape.param(b);
                tape.add_row(y, b)
            }
            None => Ok(y),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    ShiftedSoftplus,
}

impl Activation {
    pub fn apply(self, tape: &mut Tape, x: Var) -> Result<Var> {
        match self {
            Activation::Relu => tape.relu(x),
            Activation::ShiftedSoftplus => tape.shifted_softplus(x),
        }
    }
}

/// Two-layer perceptron: `Linear → [BatchNorm] → act → [Dropout] → Linear`.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    pub first: Linear,
    pub norm: Option<BatchNorm>,
    pub activation: Activation,
    pub dropout: f64,
    pub second: Linear,
}

pub struct MlpSpec {
    pub inputs: usize,
    pub hidden: usize,
    pub outputs: usize,
    pub batch_norm: bool,
    pub activation: Activation,
    pub dropout: f64,
}

impl Mlp {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, name: &str, spec: MlpSpec) -> Self {
        // A bias in front of batch norm is cancelled by the centering.
        let first = Linear::new(
            store,
            rng,
            &format!("{name}.0"),
            spec.inputs,
            spec.hidden,
            !spec.batch_norm,
        );
        let norm = spec
            .batch_norm
            .then(|| BatchNorm::new(store, &format!("{name}.norm"), spec.hidden));
        let second = Linear::new(store, rng, &format!("{name}.1"), spec.hidden, spec.outputs, true);
        Mlp {
            first,
            norm,
            activation: spec.activation,
            dropout: spec.dropout,
            second,
        }
    }

    /// Zeroes every weight and bias. With a zero output layer the MLP maps
    /// everything to zero.
    pub fn zero(&self, store: &mut ParamStore) {
        self.first.zero(store);
        self.second.zero(store);
    }
}

impl Module for Mlp {
    fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let mut h = self.first.forward(tape, x)?;
        if let Some(bn) = &self.norm {
            h = tape.batch_norm(h, bn)?;
        }
        h = self.activation.apply(tape, h)?;
        h = tape.dropout(h, self.dropout)?;
        self.second.forward(tape, h)
    }
}
