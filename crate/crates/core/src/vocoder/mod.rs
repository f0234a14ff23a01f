//! Mel-conditioned diffusion vocoder: schedule, noise predictor, reverse
//! sampling and the base denoising objective.

mod net;
mod schedule;

pub use net::{step_embedding, Conditioning, Denoiser, DenoiserConfig, ResidualBlock, ROOT};
pub use schedule::{make_linear_schedule, q_sample, NoiseSchedule, ScheduleConfig};

use crate::autodiff::{ParamStore, Rng, Tape, Tensor, Var};
use crate::dsp::Spectrogram;
use crate::error::{Error, Result};
use crate::optim::AdamW;

/// Stacks per-clip mel spectrograms (`[frames, n_mels]`) into the
/// denoiser's `[B, n_mels, frames]` conditioning layout.
pub fn stack_conditioning(specs: &[&Spectrogram]) -> Result<Tensor> {
    let first = specs.first().ok_or_else(|| Error::invalid("no conditioning spectrograms"))?;
    let (f, m) = (first.frames(), first.bins());
    let mut data = Vec::with_capacity(specs.len() * f * m);
    for s in specs {
        if (s.frames(), s.bins()) != (f, m) {
            return Err(Error::shape(
                "stack_conditioning",
                format!("[{}, {}] vs [{f}, {m}]", s.frames(), s.bins()),
            ));
        }
        let d = s.magnitudes.data();
        for mi in 0..m {
            data.extend((0..f).map(|fi| d[fi * m + mi]));
        }
    }
    Tensor::new([specs.len(), m, f], data)
}

/// One reverse update
/// `(x_t - (1 - a_t) / sqrt(1 - abar_t) * eps(x_t)) / sqrt(a_t) + delta_t z`.
/// `z` is ignored at `t = 1`.
pub fn reverse_step(
    tape: &mut Tape,
    net: &Denoiser,
    x_t: Var,
    t: usize,
    cond: &Conditioning,
    sched: &NoiseSchedule,
    z: Option<&Tensor>,
) -> Result<Var> {
    let alpha = sched.alpha(t)?;
    let alpha_bar = sched.alpha_bar(t)?;
    let eps = net.forward_conditioned(tape, x_t, &[t], cond)?;
    let eps = tape.scale(eps, (1.0 - alpha) / (1.0 - alpha_bar).sqrt());
    let mean = tape.sub(x_t, eps)?;
    let mean = tape.scale(mean, 1.0 / alpha.sqrt());
    match z {
        Some(z) if t > 1 => {
            let d = sched.delta(t)?;
            let noise = tape.constant(z.map(|v| d * v));
            tape.add(mean, noise)
        }
        _ => Ok(mean),
    }
}

fn draw_z(rng: &mut Rng, t: usize, shape: &[usize]) -> Option<Tensor> {
    (t > 1).then(|| Tensor::new(shape.to_vec(), rng.normal_vec(shape.iter().product())).expect("shape"))
}

/// Runs the full reverse chain from `x_T` on `tape`, so gradients reach
/// anything `x_T` or the network depends on.
pub fn sample(
    tape: &mut Tape,
    net: &Denoiser,
    x_big_t: Var,
    cond: Var,
    sched: &NoiseSchedule,
    rng: &mut Rng,
) -> Result<Var> {
    let shape = tape.shape(x_big_t).to_vec();
    let cond = net.condition(tape, cond, *shape.last().unwrap_or(&0))?;
    let mut x = x_big_t;
    for t in (1..=sched.steps()).rev() {
        let z = draw_z(rng, t, &shape);
        x = reverse_step(tape, net, x, t, &cond, sched, z.as_ref())?;
    }
    Ok(x)
}

/// Same chain as [`sample`] without gradients; each step uses its own tape.
/// Consumes `rng` identically, so outputs match bit for bit.
pub fn sample_inference(
    store: &ParamStore,
    net: &Denoiser,
    x_big_t: &Tensor,
    cond: &Tensor,
    sched: &NoiseSchedule,
    rng: &mut Rng,
) -> Result<Tensor> {
    let mut x = x_big_t.clone();
    for t in (1..=sched.steps()).rev() {
        let z = draw_z(rng, t, x.shape());
        let mut tape = Tape::new(store);
        let xv = tape.constant(x.clone());
        let cv = tape.constant(cond.clone());
        let cv = net.condition(&mut tape, cv, x.shape()[2])?;
        let y = reverse_step(&mut tape, net, xv, t, &cv, sched, z.as_ref())?;
        x = tape.value(y).clone();
    }
    Ok(x)
}

/// Mean squared error between predicted and true noise.
pub fn noise_prediction_loss(tape: &mut Tape, predicted: Var, eps: Var) -> Result<Var> {
    let d = tape.sub(predicted, eps)?;
    let sq = tape.mul(d, d)?;
    let n = tape.shape(sq).len();
    tape.mean(sq, &(0..n).collect::<Vec<_>>())
}

/// One base-training step on clean clips `s0` (`[B, 1, L]`): a random step
/// per clip, fresh Gaussian noise, MSE on the noise prediction. Returns the
/// loss before the update.
pub fn pretrain_step(
    store: &mut ParamStore,
    net: &Denoiser,
    s0: &Tensor,
    cond: &Tensor,
    sched: &NoiseSchedule,
    rng: &mut Rng,
    opt: &mut AdamW,
) -> Result<f64> {
    let (b, len) = match s0.shape() {
        [b, 1, l] => (*b, *l),
        s => return Err(Error::shape("pretrain_step", format!("batch {s:?} is not [B, 1, L]"))),
    };
    let steps: Vec<usize> = (0..b).map(|_| 1 + rng.below(sched.steps())).collect();
    let eps = Tensor::new([b, 1, len], rng.normal_vec(b * len))?;
    let mut noisy = Vec::with_capacity(b * len);
    for (i, &t) in steps.iter().enumerate() {
        let clip = Tensor::from_vec(s0.data()[i * len..(i + 1) * len].to_vec());
        let e = Tensor::from_vec(eps.data()[i * len..(i + 1) * len].to_vec());
        noisy.extend_from_slice(q_sample(&clip, t, &e, sched)?.data());
    }
    let noisy = Tensor::new([b, 1, len], noisy)?;
    let grads = {
        let mut tape = Tape::new(store);
        let x = tape.constant(noisy);
        let c = tape.constant(cond.clone());
        let target = tape.constant(eps);
        let pred = net.forward(&mut tape, x, &steps, c)?;
        let loss = noise_prediction_loss(&mut tape, pred, target)?;
        let value = tape.value(loss).item();
        if !value.is_finite() {
            return Err(Error::NonFinite(format!("pretraining loss is {value}")));
        }
        (tape.backward(loss)?, value)
    };
    grads.0.accumulate_into(store);
    opt.step(store, true)?;
    Ok(grads.1)
}
