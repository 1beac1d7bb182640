//! Central-difference gradient oracle, evaluated in 64-bit.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

use super::tape::{Tape, Var};

/// Which coordinates of each checked tensor are perturbed.
#[derive(Clone, Copy, Debug)]
pub enum Coords {
    All,
    /// Up to `per_tensor` coordinates per tensor, chosen by `seed`.
    Sample {
        per_tensor: usize,
        seed: u64,
    },
}

impl Coords {
    fn pick(self, len: usize, salt: u64) -> Vec<usize> {
        match self {
            Coords::All => (0..len).collect(),
            Coords::Sample { per_tensor, seed } if per_tensor < len => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15));
                let mut v = sample(&mut rng, len, per_tensor).into_vec();
                v.sort_unstable();
                v
            }
            Coords::Sample { .. } => (0..len).collect(),
        }
    }
}

fn finite(v: f64, what: &str) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::Numeric(format!("non-finite {what}: {v}")))
    }
}

fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / numeric.abs().max(1.0)
}

fn check_step(h: f64) -> Result<()> {
    if !(h > 0.0 && h.is_finite()) {
        return Err(Error::Numeric(format!("finite-difference step must be positive, got {h}")));
    }
    Ok(())
}

/// Largest `|analytic − central difference| / max(1, |central difference|)`
/// over every coordinate of `x`, for the scalar function `f`.
pub fn grad_check<F>(f: F, x: &Tensor<f64>, h: f64) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    grad_check_inputs(|t, v| f(t, v[0]), std::slice::from_ref(x), h, Coords::All)
}

/// [`grad_check`] over several inputs at once.
pub fn grad_check_inputs<F>(f: F, xs: &[Tensor<f64>], h: f64, coords: Coords) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    check_step(h)?;
    let eval = |vals: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = vals.iter().map(|v| tape.constant(v.clone())).collect();
        let out = f(&mut tape, &vars)?;
        finite(tape.scalar(out), "loss")
    };
    let mut tape = Tape::new();
    let vars: Vec<Var> = xs.iter().map(|v| tape.input(v.clone())).collect();
    let out = f(&mut tape, &vars)?;
    finite(tape.scalar(out), "loss")?;
    let grads = tape.backward(out)?;
    let mut worst = 0.0f64;
    let mut work = xs.to_vec();
    for (t, var) in vars.iter().enumerate() {
        let analytic = grads.get(*var).cloned().unwrap_or_else(|| Tensor::zeros(xs[t].dims()));
        for i in coords.pick(xs[t].len(), t as u64) {
            let orig = xs[t].data()[i];
            work[t].data_mut()[i] = orig + h;
            let up = eval(&work)?;
            work[t].data_mut()[i] = orig - h;
            let down = eval(&work)?;
            work[t].data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * h);
            worst = worst.max(rel_err(finite(analytic.data()[i], "gradient")?, numeric));
        }
    }
    Ok(worst)
}

/// Gradient check of a loss built from a parameter store, perturbing the
/// selected coordinates of every parameter tensor.
pub fn grad_check_params<F>(f: F, store: &ParamStore<f64>, h: f64, coords: Coords) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, &ParamStore<f64>) -> Result<Var>,
{
    check_step(h)?;
    let mut tape = Tape::new();
    let out = f(&mut tape, store)?;
    finite(tape.scalar(out), "loss")?;
    let grads = tape.backward(out)?.param_grads(store.len());
    let mut work = store.clone();
    let mut worst = 0.0f64;
    let eval = |s: &ParamStore<f64>| -> Result<f64> {
        let mut tape = Tape::new();
        let out = f(&mut tape, s)?;
        finite(tape.scalar(out), "loss")
    };
    for id in store.ids() {
        let len = store.get(id).len();
        for i in coords.pick(len, id.index() as u64) {
            let orig = store.get(id).data()[i];
            work.get_mut(id).data_mut()[i] = orig + h;
            let up = eval(&work)?;
            work.get_mut(id).data_mut()[i] = orig - h;
            let down = eval(&work)?;
            work.get_mut(id).data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * h);
            let analytic = grads[id.index()].as_ref().map_or(0.0, |g| g.data()[i]);
            worst = worst.max(rel_err(finite(analytic, "gradient")?, numeric));
        }
    }
    Ok(worst)
}
