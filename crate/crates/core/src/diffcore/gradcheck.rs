//! Central finite-difference verification of backward passes.

use crate::diffcore::{Mode, ParamId, ParamStore, Tape, Var};
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub epsilon: f64,
    pub mode: Mode,
    /// Restrict the check to these parameters; all trainable ones otherwise.
    pub params: Option<Vec<ParamId>>,
    /// Negative-control hook: perturbs the analytic gradient before comparing.
    pub corrupt_analytic: bool,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            epsilon: 1e-6,
            mode: Mode::Eval,
            params: None,
            corrupt_analytic: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamError {
    pub name: String,
    /// `‖a − n‖₂ / max(‖a‖₂, ‖n‖₂, floor)` over the tensor, where the floor
    /// is 1e-6 of the norm of the whole analytic gradient (at least 1e-8).
    /// Gradients that vanish structurally are then judged on the scale of
    /// the expression instead of on finite-difference round-off.
    pub rel_error: f64,
    /// Largest entrywise [`relative_error`]; dominated by finite-difference
    /// round-off wherever a true gradient entry is near zero.
    pub max_entry_rel_error: f64,
    pub analytic_norm: f64,
    pub numeric_norm: f64,
    pub entries: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub params: Vec<ParamError>,
    /// Largest per-tensor relative error.
    pub max_rel_error: f64,
    pub max_entry_rel_error: f64,
}

impl GradCheckReport {
    pub fn worst(&self) -> Option<&ParamError> {
        self.params.iter().max_by(|a, b| a.rel_error.total_cmp(&b.rel_error))
    }
}

/// `|a - b| / max(|a|, |b|, 1e-8)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

fn evaluate<F>(store: &ParamStore, mode: Mode, f: &F) -> Result<f64>
where
    F: for<'a> Fn(&mut Tape<'a>) -> Result<Var>,
{
    let mut tape = Tape::new(store, mode, 0);
    let out = f(&mut tape)?;
    let value = tape.value(out);
    if value.len() != 1 {
        return Err(Error::shape(
            "finite_diff_check",
            format!("expression must be scalar, got {:?}", value.shape()),
        ));
    }
    if tape.is_stochastic() {
        return Err(Error::NonDeterministic(
            "dropout drew a random mask; run the check in eval mode or supply a fixed mask".into(),
        ));
    }
    Ok(value.data()[0])
}

/// Compares backward-pass gradients of the scalar expression `f` with
/// central differences `(f(θ+ε) − f(θ−ε)) / 2ε`, entry by entry.
pub fn finite_diff_check<F>(store: &mut ParamStore, opts: &GradCheckOptions, f: F) -> Result<GradCheckReport>
where
    F: for<'a> Fn(&mut Tape<'a>) -> Result<Var>,
{
    evaluate(store, opts.mode, &f)?;
    let grads = {
        let mut tape = Tape::new(store, opts.mode, 0);
        let out = f(&mut tape)?;
        tape.backward_scalar(out)?
    };

    let ids: Vec<ParamId> = match &opts.params {
        Some(ids) => ids.clone(),
        None => store.trainable_ids().collect(),
    };
    let eps = opts.epsilon;
    let total: f64 = ids
        .iter()
        .filter_map(|id| grads.get(*id))
        .flat_map(|g| g.data().iter())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt();
    let floor = (1e-6 * total).max(1e-8);
    let mut report = GradCheckReport {
        params: Vec::new(),
        max_rel_error: 0.0,
        max_entry_rel_error: 0.0,
    };
    for id in ids {
        let n = store.value(id).len();
        let mut worst: f64 = 0.0;
        let (mut diff2, mut a2, mut n2) = (0.0, 0.0, 0.0);
        for k in 0..n {
            let mut analytic = grads.get(id).map_or(0.0, |g| g.data()[k]);
            if opts.corrupt_analytic {
                analytic = analytic * 1.01 + 1e-3;
            }
            let orig = store.value(id).data()[k];
            store.get_mut(id).value.data_mut()[k] = orig + eps;
            let plus = evaluate(store, opts.mode, &f);
            store.get_mut(id).value.data_mut()[k] = orig - eps;
            let minus = evaluate(store, opts.mode, &f);
            store.get_mut(id).value.data_mut()[k] = orig;
            let numeric = (plus? - minus?) / (2.0 * eps);
            worst = worst.max(relative_error(analytic, numeric));
            diff2 += (analytic - numeric).powi(2);
            a2 += analytic * analytic;
            n2 += numeric * numeric;
        }
        let rel = diff2.sqrt() / a2.sqrt().max(n2.sqrt()).max(floor);
        report.max_rel_error = report.max_rel_error.max(rel);
        report.max_entry_rel_error = report.max_entry_rel_error.max(worst);
        report.params.push(ParamError {
            name: store.get(id).name.clone(),
            rel_error: rel,
            max_entry_rel_error: worst,
            analytic_norm: a2.sqrt(),
            numeric_norm: n2.sqrt(),
            entries: n,
        });
    }
    Ok(report)
}
