//! Central finite-difference gradient oracle.

use super::{Bound, Element, ParamStore, Tape, Var};
use crate::error::{Error, Result};
use crate::rng::Stream;

/// Which parameter scalars are probed.
#[derive(Clone, Copy, Debug)]
pub enum Probes {
    All,
    /// `count` seeded random coordinates from every parameter tensor (all of
    /// them when the tensor is smaller).
    PerTensor { count: usize, seed: u64 },
}

/// Central-difference step per probed scalar.
#[derive(Clone, Copy, Debug)]
pub enum Step {
    Fixed(f64),
    /// `change / |analytic|` clamped to `[min, max]`: every probe moves the
    /// objective by about `change` to first order, so rounding in the
    /// objective costs each probe the same relative accuracy.
    Scaled { change: f64, min: f64, max: f64 },
}

impl Step {
    fn validate(&self) -> Result<()> {
        let ok = match *self {
            Step::Fixed(eps) => eps > 0.0,
            Step::Scaled { change, min, max } => change > 0.0 && min > 0.0 && min <= max,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::config("grad_check steps must be positive"))
        }
    }

    fn at(&self, analytic: f64) -> f64 {
        match *self {
            Step::Fixed(eps) => eps,
            Step::Scaled { change, min, max } => (change / analytic.abs()).clamp(min, max),
        }
    }
}

#[derive(Clone, Debug)]
pub struct ProbeResult {
    pub param: String,
    pub index: usize,
    pub step: f64,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub probes: usize,
    pub worst: Option<ProbeResult>,
    /// Every probe in the order it was taken.
    pub results: Vec<ProbeResult>,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

fn evaluate<T, F>(store: &ParamStore<T>, f: &F) -> Result<f64>
where
    T: Element,
    F: for<'t> Fn(&'t Tape<T>, &Bound<'t, T>) -> Result<Var<'t, T>>,
{
    let tape = Tape::inference();
    let bound = store.bind(&tape);
    let out = f(&tape, &bound)?;
    let v = out.item().to_f64();
    if !v.is_finite() {
        return Err(Error::NonFiniteLoss(format!("objective evaluated to {v}")));
    }
    Ok(v)
}

/// Max relative error between reverse-mode gradients of the scalar `f` and
/// central differences `(f(p+eps) - f(p-eps)) / 2eps` over the probed
/// parameter scalars. Parameter values are restored afterwards.
pub fn grad_check<T, F>(store: &mut ParamStore<T>, f: F, eps: f64, probes: Probes) -> Result<GradCheckReport>
where
    T: Element,
    F: for<'t> Fn(&'t Tape<T>, &Bound<'t, T>) -> Result<Var<'t, T>>,
{
    grad_check_steps(store, f, Step::Fixed(eps), probes)
}

/// [`grad_check`] with a per-probe step.
pub fn grad_check_steps<T, F>(store: &mut ParamStore<T>, f: F, step: Step, probes: Probes) -> Result<GradCheckReport>
where
    T: Element,
    F: for<'t> Fn(&'t Tape<T>, &Bound<'t, T>) -> Result<Var<'t, T>>,
{
    step.validate()?;
    let analytic: Vec<Vec<f64>> = {
        let tape = Tape::new();
        let bound = store.bind(&tape);
        let out = f(&tape, &bound)?;
        let v = out.item().to_f64();
        if !v.is_finite() {
            return Err(Error::NonFiniteLoss(format!("objective evaluated to {v}")));
        }
        let grads = tape.backward(out)?;
        bound
            .vars()
            .iter()
            .map(|&var| grads.get_or_zeros(var).to_f64_vec())
            .collect()
    };

    let mut rng = match probes {
        Probes::PerTensor { seed, .. } => Some(Stream::new(seed, 0x67c)),
        Probes::All => None,
    };
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        probes: 0,
        worst: None,
        results: Vec::new(),
    };
    let ids: Vec<_> = store.ids().collect();
    for (pi, id) in ids.into_iter().enumerate() {
        let n = store.get(id).tensor.numel();
        let coords: Vec<usize> = match (&probes, rng.as_mut()) {
            (Probes::PerTensor { count, .. }, Some(rng)) if *count < n => {
                (0..*count).map(|_| rng.below(n)).collect()
            }
            _ => (0..n).collect(),
        };
        for i in coords {
            let a = analytic[pi][i];
            let eps = step.at(a);
            let orig = store.get(id).tensor.data()[i];
            store.get_mut(id).tensor.data_mut()[i] = T::from_f64(orig.to_f64() + eps);
            let plus = evaluate(store, &f);
            store.get_mut(id).tensor.data_mut()[i] = T::from_f64(orig.to_f64() - eps);
            let minus = evaluate(store, &f);
            store.get_mut(id).tensor.data_mut()[i] = orig;
            let numeric = (plus? - minus?) / (2.0 * eps);
            let rel = relative_error(a, numeric);
            let result = ProbeResult {
                param: store.get(id).name.clone(),
                index: i,
                step: eps,
                analytic: a,
                numeric,
                rel_error: rel,
            };
            report.probes += 1;
            if report.worst.is_none() || rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = Some(result.clone());
            }
            report.results.push(result);
        }
    }
    Ok(report)
}

/// Gradient check of a function of plain input tensors (each treated as a
/// parameter named `input{i}`).
pub fn grad_check_inputs<T, F>(inputs: &[super::Tensor<T>], f: F, eps: f64) -> Result<GradCheckReport>
where
    T: Element,
    F: for<'t> Fn(&'t Tape<T>, &[Var<'t, T>]) -> Result<Var<'t, T>>,
{
    let mut store = ParamStore::new();
    for (i, t) in inputs.iter().enumerate() {
        store.add(format!("input{i}"), t.clone())?;
    }
    grad_check(&mut store, |tape, bound| f(tape, bound.vars()), eps, Probes::All)
}
