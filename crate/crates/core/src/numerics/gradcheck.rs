//! Central-difference verification of reverse-mode gradients.

use super::params::ParamStore;
use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// One compared gradient entry.
#[derive(Clone, Debug)]
pub struct GradEntry {
    pub name: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_error: f64,
    pub worst: Option<GradEntry>,
    /// Entries whose relative error exceeded the tolerance.
    pub flagged: Vec<GradEntry>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.flagged.is_empty()
    }

    fn record(&mut self, entry: GradEntry, tol: f64) {
        self.checked += 1;
        if entry.rel_error > self.max_rel_error || self.worst.is_none() {
            self.max_rel_error = self.max_rel_error.max(entry.rel_error);
            self.worst = Some(entry.clone());
        }
        if entry.rel_error > tol {
            self.flagged.push(entry);
        }
    }
}

/// `|analytic - numeric| / max(1, |numeric|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / numeric.abs().max(1.0)
}

fn entry(name: &str, index: usize, analytic: f64, numeric: f64) -> Result<GradEntry> {
    if !analytic.is_finite() || !numeric.is_finite() {
        return Err(Error::NonFinite(format!(
            "gradient of `{name}`[{index}] (analytic {analytic}, numeric {numeric})"
        )));
    }
    Ok(GradEntry {
        name: name.to_owned(),
        index,
        analytic,
        numeric,
        rel_error: relative_error(analytic, numeric),
    })
}

fn scalar(tape: &Tape, loss: Var) -> Result<f64> {
    let value = tape.value(loss);
    if value.numel() != 1 {
        return Err(Error::Contract(
            "grad_check objective must be scalar".into(),
        ));
    }
    Ok(value.data()[0])
}

/// Checks every trainable parameter entry of `store`. `objective` must be
/// deterministic: the same store must always produce the same loss.
pub fn grad_check<F>(
    store: &mut ParamStore,
    mut objective: F,
    eps: f64,
    tol: f64,
) -> Result<GradCheckReport>
where
    F: FnMut(&mut ParamStore) -> Result<(Tape, Var)>,
{
    store.zero_grads();
    let (tape, loss) = objective(store)?;
    let grads = tape.backward(loss)?;
    grads.accumulate_into(&tape, store);
    drop(tape);

    let mut report = GradCheckReport::default();
    let ids: Vec<_> = store.trainable_ids().collect();
    for id in ids {
        let name = store.name(id).to_owned();
        let analytic = store.grad(id).data().to_vec();
        for (i, &a) in analytic.iter().enumerate() {
            let original = store.value(id).data()[i];
            store.value_mut(id).data_mut()[i] = original + eps;
            let (t, l) = objective(store)?;
            let plus = scalar(&t, l)?;
            store.value_mut(id).data_mut()[i] = original - eps;
            let (t, l) = objective(store)?;
            let minus = scalar(&t, l)?;
            store.value_mut(id).data_mut()[i] = original;
            report.record(entry(&name, i, a, (plus - minus) / (2.0 * eps))?, tol);
        }
    }
    Ok(report)
}

/// Checks the gradient of `f` with respect to each of its tensor inputs.
pub fn grad_check_inputs<F>(inputs: &[Tensor], f: F, eps: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|v| tape.constant(v.clone())).collect();
        let out = f(&mut tape, &vars)?;
        scalar(&tape, out)
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|v| tape.leaf(v.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out)?;

    let mut report = GradCheckReport::default();
    let mut work = inputs.to_vec();
    for (k, &v) in vars.iter().enumerate() {
        let name = format!("input{k}");
        let zeros = vec![0.0; inputs[k].numel()];
        let analytic = grads.get(v).unwrap_or(&zeros).to_vec();
        for (i, &a) in analytic.iter().enumerate() {
            let original = work[k].data()[i];
            work[k].data_mut()[i] = original + eps;
            let plus = eval(&work)?;
            work[k].data_mut()[i] = original - eps;
            let minus = eval(&work)?;
            work[k].data_mut()[i] = original;
            report.record(entry(&name, i, a, (plus - minus) / (2.0 * eps))?, tol);
        }
    }
    Ok(report)
}
