//! Central finite-difference gradient checking (64-bit).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::error::Result;
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const DEFAULT_STEP: f64 = 1e-5;

/// Denominator floor so exact zeros do not blow up the ratio.
const REL_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct Report {
    pub max_rel_err: f64,
    /// Location of the worst entry, e.g. `"stage1.ffn.w1[17]"`.
    pub worst: String,
    pub checked: usize,
}

impl Report {
    fn new() -> Self {
        Self {
            max_rel_err: 0.0,
            worst: String::new(),
            checked: 0,
        }
    }

    fn record(&mut self, analytic: f64, numeric: f64, at: impl FnOnce() -> String) {
        let err = rel_err(analytic, numeric);
        self.checked += 1;
        if err > self.max_rel_err || self.worst.is_empty() {
            self.max_rel_err = err;
            self.worst = format!("{} (analytic {analytic:e}, numeric {numeric:e})", at());
        }
    }

    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err <= tol
    }
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_FLOOR)
}

/// `sum(v ⊙ R)` with a fixed pseudo-random `R` in `[-1, 1]`, so that every
/// output element contributes a distinct weight.
pub fn weighted_sum(tape: &mut Tape<f64>, v: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = tape.shape(v).to_vec();
    let r = tape.constant(Tensor::from_fn(&shape, |_| rng.gen_range(-1.0..=1.0)));
    let p = tape.mul(v, r)?;
    tape.sum_all(p)
}

/// Checks gradients with respect to free inputs. `f` builds the scalar loss
/// from the input handles.
pub fn check_inputs<F>(inputs: &[Tensor<f64>], step: f64, f: F) -> Result<Report>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let eval = |ins: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::new().with_finite_check(true);
        let vars: Vec<Var> = ins.iter().map(|t| tape.constant(t.clone())).collect();
        let l = f(&mut tape, &vars)?;
        Ok(tape.value(l).item())
    };

    let mut tape = Tape::new().with_finite_check(true);
    let vars: Vec<Var> = inputs.iter().map(|t| tape.var(t.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    let grads = tape.backward(loss)?;

    let mut report = Report::new();
    let mut work = inputs.to_vec();
    for (k, &v) in vars.iter().enumerate() {
        let analytic = grads.get(&tape, v);
        for i in 0..work[k].len() {
            let orig = work[k].data()[i];
            work[k].data_mut()[i] = orig + step;
            let up = eval(&work)?;
            work[k].data_mut()[i] = orig - step;
            let down = eval(&work)?;
            work[k].data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * step);
            let a = analytic.as_ref().map_or(0.0, |g| g.data()[i]);
            report.record(a, numeric, || format!("input{k}[{i}]"));
        }
    }
    Ok(report)
}

/// Checks gradients of every trainable parameter in `store`. When
/// `sample` is set, only that many randomly chosen entries per tensor are
/// perturbed.
pub fn check_params<F>(
    store: &mut ParamStore<f64>,
    step: f64,
    sample: Option<usize>,
    f: F,
) -> Result<Report>
where
    F: Fn(&mut Tape<f64>, &ParamStore<f64>) -> Result<Var>,
{
    let eval = |s: &ParamStore<f64>| -> Result<f64> {
        let mut tape = Tape::new().with_finite_check(true);
        let l = f(&mut tape, s)?;
        Ok(tape.value(l).item())
    };

    store.zero_grad();
    {
        let mut tape = Tape::new().with_finite_check(true);
        let loss = f(&mut tape, store)?;
        tape.backward_into(loss, store)?;
    }

    let mut rng = ChaCha8Rng::seed_from_u64(0x9c);
    let mut report = Report::new();
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        if !store.get(id).trainable {
            continue;
        }
        let n = store.get(id).value.len();
        let entries: Vec<usize> = match sample {
            Some(k) if k < n => (0..k).map(|_| rng.gen_range(0..n)).collect(),
            _ => (0..n).collect(),
        };
        for i in entries {
            let orig = store.get(id).value.data()[i];
            store.get_mut(id).value.data_mut()[i] = orig + step;
            let up = eval(store)?;
            store.get_mut(id).value.data_mut()[i] = orig - step;
            let down = eval(store)?;
            store.get_mut(id).value.data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * step);
            let analytic = store.get(id).grad.data()[i];
            let name = &store.get(id).name;
            report.record(analytic, numeric, || format!("{name}[{i}]"));
        }
    }
    Ok(report)
}
