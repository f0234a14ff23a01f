//! Central finite-difference verification of tape gradients.

use super::{ParamId, ParamStore, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// `|analytic - numeric| / max(1, |analytic|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(1.0)
}

fn scalar_of(tape: &Tape, v: Var) -> Result<f64> {
    let t = tape.value(v);
    if t.numel() != 1 {
        return Err(Error::shape("finite_difference_check", format!("f returned shape {:?}", t.shape())));
    }
    Ok(t.item())
}

/// Coordinates to probe: all of them, or an evenly strided subset.
fn probe_coords(n: usize, limit: Option<usize>) -> Vec<usize> {
    match limit {
        Some(k) if k < n => (0..k).map(|i| i * n / k + (n / k) / 2).collect(),
        _ => (0..n).collect(),
    }
}

/// Max over coordinates of the relative error between the tape gradient of
/// scalar `f` at `x` and the central difference with step `h`.
pub fn finite_difference_check<F>(f: F, x: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    input_gradcheck(&ParamStore::new(), f, x, h)
}

/// [`finite_difference_check`] with `f` free to read parameters from `store`.
pub fn input_gradcheck<F>(store: &ParamStore, f: F, x: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let analytic = {
        let mut tape = Tape::new(store);
        let xv = tape.input(x.clone(), true);
        let y = f(&mut tape, xv)?;
        tape.backward(y)?
            .wrt(xv)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(x.shape().to_vec()))
    };
    let eval = |probe: &Tensor| -> Result<f64> {
        let mut tape = Tape::new(store);
        let xv = tape.input(probe.clone(), false);
        let y = f(&mut tape, xv)?;
        scalar_of(&tape, y)
    };
    let mut worst: f64 = 0.0;
    let mut probe = x.clone();
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = eval(&probe)?;
        probe.data_mut()[i] = orig - h;
        let down = eval(&probe)?;
        probe.data_mut()[i] = orig;
        worst = worst.max(relative_error(analytic.data()[i], (up - down) / (2.0 * h)));
    }
    Ok(worst)
}

/// Same check against stored parameters. `limit` bounds the number of probed
/// coordinates per parameter (evenly strided) for large tensors.
pub fn param_gradcheck<F>(store: &ParamStore, ids: &[ParamId], f: F, h: f64, limit: Option<usize>) -> Result<f64>
where
    F: Fn(&mut Tape) -> Result<Var>,
{
    let grads = {
        let mut tape = Tape::new(store);
        let y = f(&mut tape)?;
        tape.backward(y)?
    };
    let mut probe_store = store.clone();
    let eval = |s: &ParamStore| -> Result<f64> {
        let mut tape = Tape::new(s);
        let y = f(&mut tape)?;
        scalar_of(&tape, y)
    };
    let mut worst: f64 = 0.0;
    for &id in ids {
        let n = store.value(id).numel();
        let analytic = grads.param(id).cloned();
        for i in probe_coords(n, limit) {
            let orig = store.value(id).data()[i];
            probe_store.get_mut(id).value.data_mut()[i] = orig + h;
            let up = eval(&probe_store)?;
            probe_store.get_mut(id).value.data_mut()[i] = orig - h;
            let down = eval(&probe_store)?;
            probe_store.get_mut(id).value.data_mut()[i] = orig;
            let a = analytic.as_ref().map_or(0.0, |g| g.data()[i]);
            worst = worst.max(relative_error(a, (up - down) / (2.0 * h)));
        }
    }
    Ok(worst)
}
