//! Central finite differences against the reverse sweep.

use super::params::ParamStore;
use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Worst-case agreement between analytic and numeric gradients.
#[derive(Clone, Debug, PartialEq)]
pub struct GradReport {
    pub max_rel_error: f64,
    /// Which input (or parameter name) and coordinate produced the maximum.
    pub worst: Option<(String, usize)>,
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
}

impl GradReport {
    fn new() -> Self {
        Self {
            max_rel_error: 0.0,
            worst: None,
            analytic: 0.0,
            numeric: 0.0,
            checked: 0,
        }
    }

    fn record(&mut self, label: &str, coord: usize, analytic: f64, numeric: f64) {
        let denom = analytic.abs().max(numeric.abs()).max(1e-8);
        let err = (analytic - numeric).abs() / denom;
        self.checked += 1;
        if err > self.max_rel_error || self.worst.is_none() {
            self.max_rel_error = err;
            self.worst = Some((label.to_string(), coord));
            self.analytic = analytic;
            self.numeric = numeric;
        }
    }
}

fn check_eps(eps: f64) -> Result<()> {
    if !(1e-7..=1e-3).contains(&eps) {
        return Err(Error::contract(format!("finite-difference step {eps} outside [1e-7, 1e-3]")));
    }
    Ok(())
}

/// Coordinates to probe: all of them, or an evenly strided subset.
fn probe_coords(len: usize, limit: Option<usize>) -> Vec<usize> {
    match limit {
        Some(m) if m < len => (0..m).map(|i| i * len / m).collect(),
        _ => (0..len).collect(),
    }
}

fn scalar_of(tape: &Tape, out: Var) -> Result<f64> {
    tape.check_finite()?;
    let v = tape.value(out);
    if v.len() != 1 {
        return Err(Error::contract("gradient check needs a scalar-valued graph"));
    }
    Ok(v.item())
}

/// Compares the reverse sweep of `f` against central differences with step
/// `eps`, for every coordinate of every input.
pub fn grad_check<F>(f: F, inputs: &[Tensor], eps: f64) -> Result<GradReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    grad_check_sampled(f, inputs, eps, None)
}

/// [`grad_check`] probing at most `limit` coordinates per input.
pub fn grad_check_sampled<F>(f: F, inputs: &[Tensor], eps: f64, limit: Option<usize>) -> Result<GradReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    check_eps(eps)?;
    let eval = |ins: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = ins.iter().map(|t| tape.input(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        scalar_of(&tape, out)
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.input(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    scalar_of(&tape, out)?;
    let grads = tape.backward(out)?;

    let mut report = GradReport::new();
    let mut work = inputs.to_vec();
    for (n, v) in vars.iter().enumerate() {
        let analytic = grads.get_or_zero(*v, inputs[n].len());
        for c in probe_coords(inputs[n].len(), limit) {
            let orig = work[n].data()[c];
            work[n].data_mut()[c] = orig + eps;
            let plus = eval(&work)?;
            work[n].data_mut()[c] = orig - eps;
            let minus = eval(&work)?;
            work[n].data_mut()[c] = orig;
            report.record(&format!("input{n}"), c, analytic[c], (plus - minus) / (2.0 * eps));
        }
    }
    Ok(report)
}

/// Finite-difference check of parameter gradients. `f` builds the loss from
/// a store; only the named parameters are perturbed, at most `limit`
/// coordinates each.
pub fn grad_check_params<F>(
    store: &ParamStore,
    names: &[String],
    f: F,
    eps: f64,
    limit: Option<usize>,
) -> Result<GradReport>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<Var>,
{
    check_eps(eps)?;
    let eval = |s: &ParamStore| -> Result<f64> {
        let mut tape = Tape::new();
        let out = f(&mut tape, s)?;
        scalar_of(&tape, out)
    };

    let mut tape = Tape::new();
    let out = f(&mut tape, store)?;
    scalar_of(&tape, out)?;
    let grads = tape.backward(out)?;
    let bound: std::collections::HashMap<String, Var> = tape.bound_params().into_iter().collect();

    let mut report = GradReport::new();
    let mut work = store.clone();
    for name in names {
        let len = store
            .get(name)
            .ok_or_else(|| Error::contract(format!("unknown parameter `{name}`")))?
            .len();
        let analytic = match bound.get(name) {
            Some(v) => grads.get_or_zero(*v, len),
            None => vec![0.0; len],
        };
        for c in probe_coords(len, limit) {
            let orig = store.get(name).map(|t| t.data()[c]).unwrap_or_default();
            set(&mut work, name, c, orig + eps);
            let plus = eval(&work)?;
            set(&mut work, name, c, orig - eps);
            let minus = eval(&work)?;
            set(&mut work, name, c, orig);
            report.record(name, c, analytic[c], (plus - minus) / (2.0 * eps));
        }
    }
    Ok(report)
}

fn set(store: &mut ParamStore, name: &str, c: usize, v: f64) {
    if let Some(t) = store.get_mut(name) {
        t.data_mut()[c] = v;
    }
}
