//! Joint fine-tuning of adapters, encoder and decoder through generation,
//! simulated attacks and extraction.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Rng, Tape, Tensor, Var};
use crate::codec::{bits_tensor, inject, WatermarkBits};
use crate::config::{Lambdas, SdftConfig};
use crate::dsp::{draw_attack_from, echo_delay_samples, mel_on_tape, AttackSpec, AudioClip, MelFilterbank};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::optim::AdamW;
use crate::vocoder::sample;

/// Floor inside the log of the log-magnitude loss.
pub const LOG_FLOOR: f64 = 1e-7;

/// Sum of absolute differences between log-mel spectrograms.
pub fn loss_mel(tape: &mut Tape, clean: Var, marked: Var, fb: &MelFilterbank, window_len: usize, hop: usize) -> Result<Var> {
    check_lengths("loss_mel", tape, clean, marked)?;
    let a = mel_on_tape(tape, clean, fb, window_len, hop)?;
    let b = mel_on_tape(tape, marked, fb, window_len, hop)?;
    tape.l1_distance(a, b)
}

/// Sum of absolute differences between `log(|STFT| + 1e-7)`.
pub fn loss_stft(tape: &mut Tape, clean: Var, marked: Var, window_len: usize, hop: usize) -> Result<Var> {
    check_lengths("loss_stft", tape, clean, marked)?;
    let log_mag = |tape: &mut Tape, x: Var| -> Result<Var> {
        let m = tape.stft_magnitude(x, window_len, hop)?;
        let m = tape.add_scalar(m, LOG_FLOOR);
        tape.log(m)
    };
    let a = log_mag(tape, clean)?;
    let b = log_mag(tape, marked)?;
    tape.l1_distance(a, b)
}

fn check_lengths(op: &'static str, tape: &Tape, a: Var, b: Var) -> Result<()> {
    if tape.value(a).numel() != tape.value(b).numel() {
        return Err(Error::shape(
            op,
            format!("{} vs {} samples", tape.value(a).numel(), tape.value(b).numel()),
        ));
    }
    Ok(())
}

pub fn loss_sq(mel: f64, stft: f64, lambdas: &Lambdas) -> f64 {
    lambdas.mel * mel + lambdas.stft * stft
}

/// Mean binary cross-entropy of the logits against the payload.
pub fn loss_wea(tape: &mut Tape, logits: Var, payload: &WatermarkBits) -> Result<Var> {
    if tape.value(logits).numel() != payload.len() {
        return Err(Error::shape(
            "loss_wea",
            format!("{} logits for a {}-bit payload", tape.value(logits).numel(), payload.len()),
        ));
    }
    let targets = Tensor::new(tape.shape(logits).to_vec(), payload.to_f64())?;
    tape.bce_with_logits(logits, &targets)
}

/// One-way switch of the loss weights on a smoothed watermark loss.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LambdaSchedule {
    pub current: Lambdas,
    pub switched: bool,
    pub ema: Option<f64>,
}

impl LambdaSchedule {
    pub fn new(cfg: &SdftConfig) -> Self {
        Self {
            current: cfg.initial_lambdas,
            switched: false,
            ema: None,
        }
    }

    /// Folds `l_wea` into the moving average (seeded by the first value)
    /// and switches once it falls below the threshold.
    pub fn update(&mut self, l_wea: f64, cfg: &SdftConfig) {
        let ema = match self.ema {
            None => l_wea,
            Some(prev) => cfg.wea_ema_decay * prev + (1.0 - cfg.wea_ema_decay) * l_wea,
        };
        self.ema = Some(ema);
        if !self.switched && ema < cfg.wea_threshold {
            self.switched = true;
            self.current = cfg.switched_lambdas;
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub step: usize,
    pub l_mel: f64,
    pub l_stft: f64,
    pub l_sq: f64,
    pub l_wea: f64,
    pub l_total: f64,
    pub lambdas: Lambdas,
    pub attacks: Vec<String>,
}

impl LossReport {
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("report serializes")
    }
}

/// Applies `spec` to a `[1, 1, L]` signal on the tape. The attacked value
/// always equals `spec.apply` on the current samples and consumes `rng`
/// the same way. Echo and crop are exact linear maps; additive noise is a
/// constant offset; dither passes gradients straight through.
pub fn attack_on_tape(tape: &mut Tape, x: Var, spec: &AttackSpec, sample_rate: u32, rng: &mut Rng) -> Result<Var> {
    let clip = AudioClip::new(tape.value(x).data().to_vec(), sample_rate)?;
    let attacked = spec.apply(&clip, rng)?;
    match *spec {
        AttackSpec::None => Ok(x),
        AttackSpec::Echo { attenuation, delay_ms } => {
            let d = echo_delay_samples(sample_rate, delay_ms);
            let delayed = tape.shift(x, d);
            let delayed = tape.scale(delayed, attenuation);
            tape.add(x, delayed)
        }
        AttackSpec::RearCrop { .. } => tape.narrow(x, 2, 0, attacked.len()),
        AttackSpec::GaussianNoise { .. } | AttackSpec::PinkNoise { .. } | AttackSpec::Dither { .. } => {
            let offset: Vec<f64> = attacked.samples.iter().zip(&clip.samples).map(|(a, c)| a - c).collect();
            let offset = tape.constant(Tensor::new(tape.shape(x).to_vec(), offset)?);
            tape.add(x, offset)
        }
        _ => Err(Error::invalid(format!("attack `{}` is not available during training", spec.kind()))),
    }
}

/// A training batch: clean clips `[B, 1, L]` and their conditioning.
pub struct Batch<'a> {
    pub clean: &'a Tensor,
    pub cond: &'a Tensor,
}

/// One fine-tuning step. Draws fresh payloads, generates watermarked audio
/// through the full reverse chain, attacks and decodes each clip, and
/// updates every trainable parameter. Returns the losses before the update.
pub fn sdft_step(
    model: &mut Model,
    batch: &Batch,
    lambdas: Lambdas,
    cfg: &SdftConfig,
    step: usize,
    rng: &mut Rng,
    opt: &mut AdamW,
) -> Result<LossReport> {
    let (b, len) = match batch.clean.shape() {
        [b, 1, l] => (*b, *l),
        s => return Err(Error::shape("sdft_step", format!("batch {s:?} is not [B, 1, L]"))),
    };
    if len != model.clip_len() {
        return Err(Error::shape("sdft_step", format!("clips of {len} samples, model expects {}", model.clip_len())));
    }
    let audio = model.config.audio.clone();
    let l = model.payload_bits();
    let payloads = (0..b)
        .map(|_| WatermarkBits::random(l, rng))
        .collect::<Result<Vec<_>>>()?;

    let (grads, report) = {
        let mut tape = Tape::new(&model.store);
        let bits = tape.constant(bits_tensor(&payloads)?);
        let latent = model.encoder.encode(&mut tape, bits)?;
        let noise = tape.constant(Tensor::new([b, 1, len], rng.normal_vec(b * len))?);
        let x_big_t = inject(&mut tape, latent, noise)?;
        let cond = tape.constant(batch.cond.clone());
        let marked = sample(&mut tape, &model.vocoder, x_big_t, cond, &model.schedule, rng)?;
        let clean = tape.constant(batch.clean.clone());

        let mut wea_terms = Vec::with_capacity(b);
        let mut mel_terms = Vec::with_capacity(b);
        let mut stft_terms = Vec::with_capacity(b);
        let mut attacks = Vec::with_capacity(b);
        for (i, payload) in payloads.iter().enumerate() {
            let y = tape.narrow(marked, 0, i, 1)?;
            let s0 = tape.narrow(clean, 0, i, 1)?;
            let spec = draw_attack_from(&cfg.attack_branches, rng)?;
            let attacked = attack_on_tape(&mut tape, y, &spec, audio.sample_rate, rng)?;
            attacks.push(spec.label());
            let logits = model.decoder.decode(&mut tape, attacked)?;
            wea_terms.push(loss_wea(&mut tape, logits, payload)?);
            mel_terms.push(loss_mel(&mut tape, s0, y, &model.filterbank, audio.window_len, audio.hop)?);
            stft_terms.push(loss_stft(&mut tape, s0, y, audio.window_len, audio.hop)?);
        }
        let mean_of = |tape: &mut Tape, terms: &[Var]| -> Result<Var> {
            let mut acc = terms[0];
            for &t in &terms[1..] {
                acc = tape.add(acc, t)?;
            }
            Ok(tape.scale(acc, 1.0 / terms.len() as f64))
        };
        let l_wea = mean_of(&mut tape, &wea_terms)?;
        let l_mel = mean_of(&mut tape, &mel_terms)?;
        let l_stft = mean_of(&mut tape, &stft_terms)?;

        let mut total = tape.scale(l_wea, lambdas.wea);
        for (w, term) in [(lambdas.mel, l_mel), (lambdas.stft, l_stft)] {
            if w != 0.0 {
                let t = tape.scale(term, w);
                total = tape.add(total, t)?;
            }
        }
        let (v_wea, v_mel, v_stft) = (tape.value(l_wea).item(), tape.value(l_mel).item(), tape.value(l_stft).item());
        let l_sq = loss_sq(v_mel, v_stft, &lambdas);
        let report = LossReport {
            step,
            l_mel: v_mel,
            l_stft: v_stft,
            l_sq,
            l_wea: v_wea,
            l_total: l_sq + lambdas.wea * v_wea,
            lambdas,
            attacks,
        };
        if !report.l_total.is_finite() {
            return Err(Error::NonFinite(format!(
                "fine-tuning loss at step {step}: wea {v_wea}, mel {v_mel}, stft {v_stft}"
            )));
        }
        (tape.backward(total)?, report)
    };
    grads.accumulate_into(&mut model.store);
    for (_, p) in model.store.iter() {
        if let Some(g) = &p.grad {
            if !g.is_finite() {
                return Err(Error::NonFinite(format!("gradient of `{}` at step {step}", p.name)));
            }
        }
    }
    opt.step(&mut model.store, false)?;
    Ok(report)
}
