//! Self-checks runnable from tests and the command line: finite-difference
//! gradients, symmetry properties, independent oracles, protocol rules and
//! an overfitting sanity run.

mod gradients;
mod invariants;
mod oracles;
mod overfit;
mod protocol;

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::diffcore::{Tape, Tensor, Var};
use crate::error::{Error, Result};

pub use gradients::gradcheck_suite;
pub use invariants::invariants_suite;
pub use oracles::{brute_force_radius_graph, oracles_suite};
pub use overfit::{overfit_2d, overfit_3d, OverfitReport, OverfitSettings};
pub use protocol::protocol_suite;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Suite {
    Gradcheck,
    Invariants,
    Oracles,
    Protocol,
    Overfit,
}

impl Suite {
    pub const ALL: [Suite; 5] = [
        Suite::Gradcheck,
        Suite::Invariants,
        Suite::Oracles,
        Suite::Protocol,
        Suite::Overfit,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Suite::Gradcheck => "gradcheck",
            Suite::Invariants => "invariants",
            Suite::Oracles => "oracles",
            Suite::Protocol => "protocol",
            Suite::Overfit => "overfit",
        }
    }
}

impl FromStr for Suite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Suite::ALL
            .into_iter()
            .find(|x| x.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown suite `{s}`")))
    }
}

impl fmt::Display for Suite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, Default)]
pub struct VerifyOptions {
    pub seed: u64,
    /// Negative control: perturb analytic gradients so checks must fail.
    pub corrupt_gradients: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    pub fn new(name: impl Into<String>, passed: bool, detail: impl Into<String>) -> Self {
        Check {
            name: name.into(),
            passed,
            detail: detail.into(),
        }
    }

    /// `value < tol`, reported with both numbers.
    pub fn below(name: impl Into<String>, value: f64, tol: f64) -> Self {
        Check::new(name, value < tol, format!("{value:.3e} (tolerance < {tol:.0e})"))
    }

    /// `value ≤ tol`.
    pub fn within(name: impl Into<String>, value: f64, tol: f64) -> Self {
        Check::new(name, value <= tol, format!("{value:.3e} (tolerance ≤ {tol:.0e})"))
    }

    pub fn from_result(name: impl Into<String>, r: Result<Check>) -> Self {
        let name = name.into();
        match r {
            Ok(c) => c,
            Err(e) => Check::new(name, false, format!("error: {e}")),
        }
    }
}

#[derive(Clone, Debug)]
pub struct SuiteReport {
    pub suite: Suite,
    pub checks: Vec<Check>,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        !self.checks.is_empty() && self.checks.iter().all(|c| c.passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &Check> {
        self.checks.iter().filter(|c| !c.passed)
    }
}

impl fmt::Display for SuiteReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for c in &self.checks {
            let tag = if c.passed { "PASS" } else { "FAIL" };
            writeln!(f, "{tag} {}/{}: {}", self.suite, c.name, c.detail)?;
        }
        let failed = self.checks.iter().filter(|c| !c.passed).count();
        write!(f, "{}: {} checks, {} failed", self.suite, self.checks.len(), failed)
    }
}

pub fn run_suite(suite: Suite, opts: &VerifyOptions) -> Result<SuiteReport> {
    let checks = match suite {
        Suite::Gradcheck => gradcheck_suite(opts)?,
        Suite::Invariants => invariants_suite(opts)?,
        Suite::Oracles => oracles_suite(opts)?,
        Suite::Protocol => protocol_suite(opts)?,
        Suite::Overfit => {
            let two = overfit_2d(&OverfitSettings::two_d())?;
            let three = overfit_3d(&OverfitSettings::three_d())?;
            vec![two.check(), three.check()]
        }
    };
    Ok(SuiteReport { suite, checks })
}

/// Scalar probe `Σ w ⊙ out` with fixed pseudo-random weights, so every output
/// entry influences the gradient with a distinct coefficient.
pub(crate) fn probe(tape: &mut Tape, out: Var, seed: u64) -> Result<Var> {
    let value = tape.value(out);
    let shape = value.shape().to_vec();
    let n = value.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect())?;
    let w = tape.constant(w);
    let p = tape.mul(out, w)?;
    tape.sum(p)
}

pub(crate) fn random_tensor(rng: &mut impl Rng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-scale..scale)).collect()).expect("shape matches")
}

pub(crate) fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    if a.len() != b.len() {
        return f64::INFINITY;
    }
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}
