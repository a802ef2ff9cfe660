//! Central finite-difference checks for tape programs.

use super::tape::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Evaluates `f` with every input recorded as a parameter and returns the
/// scalar output together with the analytic gradient of each input.
pub fn analytic_gradients<F>(f: &F, inputs: &[Tensor]) -> Result<(f64, Vec<Tensor>)>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let root = f(&mut tape, &vars)?;
    let value = tape.value(root).item();
    let mut grads = tape.backward(root)?;
    let out = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| grads.take(v).unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();
    Ok((value, out))
}

fn eval<F>(f: &F, inputs: &[Tensor]) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let root = f(&mut tape, &vars)?;
    Ok(tape.value(root).item())
}

/// Max over the probed coordinates of `|analytic - numeric| / max(1, |analytic|)`.
///
/// `coords` lists `(input index, flat element index)` pairs; `None` probes
/// every element of every input.
pub fn grad_check_multi<F>(f: F, inputs: &[Tensor], h: f64, coords: Option<&[(usize, usize)]>) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if h.is_nan() || h <= 0.0 {
        return Err(Error::Invalid(format!("finite-difference step must be > 0, got {h}")));
    }
    let (_, analytic) = analytic_gradients(&f, inputs)?;
    let all: Vec<(usize, usize)>;
    let coords = match coords {
        Some(c) => c,
        None => {
            all = inputs
                .iter()
                .enumerate()
                .flat_map(|(i, t)| (0..t.numel()).map(move |j| (i, j)))
                .collect();
            &all
        }
    };
    let mut probe = inputs.to_vec();
    let mut worst = 0.0f64;
    for &(i, j) in coords {
        let orig = probe[i].data()[j];
        probe[i].data_mut()[j] = orig + h;
        let plus = eval(&f, &probe)?;
        probe[i].data_mut()[j] = orig - h;
        let minus = eval(&f, &probe)?;
        probe[i].data_mut()[j] = orig;
        let numeric = (plus - minus) / (2.0 * h);
        let a = analytic[i].data()[j];
        worst = worst.max((a - numeric).abs() / a.abs().max(1.0));
    }
    Ok(worst)
}

/// Single-input form of [`grad_check_multi`] probing every coordinate.
pub fn grad_check<F>(f: F, x: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    grad_check_multi(|tape, vars| f(tape, vars[0]), std::slice::from_ref(x), h, None)
}
