use std::fmt;

use serde::{Deserialize, Serialize};

use super::filter::{apply_filter, FilterKind};
use super::AudioClip;
use crate::autodiff::Rng;
use crate::error::{Error, Result};

/// One 16-bit PCM quantization step.
pub const DITHER_LSB: f64 = 1.0 / 32768.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DitherPdf {
    /// Rectangular, `[-lsb/2, lsb/2]`.
    Rpdf,
    /// Triangular, `[-lsb, lsb]`.
    Tpdf,
}

/// A parameterized distortion.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AttackSpec {
    None,
    GaussianNoise { snr_db: f64 },
    Echo { attenuation: f64, delay_ms: f64 },
    RearCrop { rate: f64 },
    Dither { pdf: DitherPdf },
    Lowpass { cutoff_hz: f64 },
    Bandpass { low_hz: f64, high_hz: f64 },
    PinkNoise { level: f64 },
    TimeStretch { factor: f64 },
}

impl AttackSpec {
    pub const DEFAULT_ECHO: AttackSpec = AttackSpec::Echo {
        attenuation: 0.4,
        delay_ms: 100.0,
    };

    pub fn kind(&self) -> &'static str {
        match self {
            AttackSpec::None => "none",
            AttackSpec::GaussianNoise { .. } => "gaussian_noise",
            AttackSpec::Echo { .. } => "echo",
            AttackSpec::RearCrop { .. } => "rear_crop",
            AttackSpec::Dither { .. } => "dither",
            AttackSpec::Lowpass { .. } => "lowpass",
            AttackSpec::Bandpass { .. } => "bandpass",
            AttackSpec::PinkNoise { .. } => "pink_noise",
            AttackSpec::TimeStretch { .. } => "time_stretch",
        }
    }

    /// Short label used in report tables.
    pub fn label(&self) -> String {
        match *self {
            AttackSpec::None => "Non".into(),
            AttackSpec::GaussianNoise { snr_db } => format!("GN {snr_db}dB"),
            AttackSpec::Echo { .. } => "Echo".into(),
            AttackSpec::RearCrop { rate } => format!("RSC {}%", rate * 100.0),
            AttackSpec::Dither { pdf: DitherPdf::Rpdf } => "Dither RPDF".into(),
            AttackSpec::Dither { pdf: DitherPdf::Tpdf } => "Dither TPDF".into(),
            AttackSpec::Lowpass { cutoff_hz } => format!("LPF {}kHz", cutoff_hz / 1000.0),
            AttackSpec::Bandpass { low_hz, high_hz } => {
                format!("BPF {}-{}kHz", low_hz / 1000.0, high_hz / 1000.0)
            }
            AttackSpec::PinkNoise { level } => format!("PN {level}"),
            AttackSpec::TimeStretch { factor } => format!("TS x{factor}"),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            AttackSpec::None | AttackSpec::Dither { .. } => true,
            AttackSpec::GaussianNoise { snr_db } => snr_db.is_finite(),
            AttackSpec::Echo { attenuation, delay_ms } => {
                attenuation.is_finite() && delay_ms.is_finite() && delay_ms >= 0.0
            }
            AttackSpec::RearCrop { rate } => rate > 0.0 && rate < 1.0,
            AttackSpec::Lowpass { cutoff_hz } => cutoff_hz > 0.0,
            AttackSpec::Bandpass { low_hz, high_hz } => low_hz > 0.0 && high_hz > low_hz,
            AttackSpec::PinkNoise { level } => level > 0.0 && level.is_finite(),
            AttackSpec::TimeStretch { factor } => (0.5..=2.0).contains(&factor),
        };
        if ok {
            Ok(())
        } else {
            Err(Error::invalid(format!("attack parameters out of range: {self:?}")))
        }
    }

    pub fn apply(&self, clip: &AudioClip, rng: &mut Rng) -> Result<AudioClip> {
        match *self {
            AttackSpec::None => Ok(clip.clone()),
            AttackSpec::GaussianNoise { snr_db } => apply_gaussian_noise(clip, snr_db, rng),
            AttackSpec::Echo { attenuation, delay_ms } => apply_echo(clip, attenuation, delay_ms),
            AttackSpec::RearCrop { rate } => apply_rear_crop(clip, rate),
            AttackSpec::Dither { pdf } => Ok(apply_dither(clip, pdf, rng)),
            AttackSpec::Lowpass { cutoff_hz } => apply_filter(clip, FilterKind::Lowpass { cutoff_hz }),
            AttackSpec::Bandpass { low_hz, high_hz } => {
                apply_filter(clip, FilterKind::Bandpass { low_hz, high_hz })
            }
            AttackSpec::PinkNoise { level } => apply_pink_noise(clip, level, rng),
            AttackSpec::TimeStretch { factor } => apply_time_stretch(clip, factor),
        }
    }
}

impl fmt::Display for AttackSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.label())
    }
}

/// White Gaussian noise scaled so that the realized noise power gives
/// exactly `10 log10(P_signal / P_noise) = snr_db`.
pub fn apply_gaussian_noise(clip: &AudioClip, snr_db: f64, rng: &mut Rng) -> Result<AudioClip> {
    if !snr_db.is_finite() {
        return Err(Error::invalid("SNR must be finite; use the `none` attack for a clean signal"));
    }
    let p_signal = clip.power();
    if p_signal == 0.0 {
        return Err(Error::domain("gaussian_noise", "input has zero power"));
    }
    let noise = rng.normal_vec(clip.len());
    let p_noise = noise.iter().map(|v| v * v).sum::<f64>() / noise.len() as f64;
    let target = p_signal / 10f64.powf(snr_db / 10.0);
    let gain = if p_noise > 0.0 { (target / p_noise).sqrt() } else { 0.0 };
    Ok(clip.with_samples(
        clip.samples.iter().zip(&noise).map(|(x, n)| x + gain * n).collect(),
    ))
}

pub(crate) fn echo_delay_samples(sample_rate: u32, delay_ms: f64) -> usize {
    (delay_ms * sample_rate as f64 / 1000.0).round() as usize
}

/// Single-tap echo `y[n] = x[n] + attenuation * x[n - d]`.
pub fn apply_echo(clip: &AudioClip, attenuation: f64, delay_ms: f64) -> Result<AudioClip> {
    let d = echo_delay_samples(clip.sample_rate, delay_ms);
    if d >= clip.len() {
        return Err(Error::invalid(format!(
            "echo delay of {d} samples does not fit a {}-sample clip",
            clip.len()
        )));
    }
    let mut out = clip.samples.clone();
    for n in d..out.len() {
        out[n] += attenuation * clip.samples[n - d];
    }
    Ok(clip.with_samples(out))
}

fn crop_len(len: usize, rate: f64) -> Result<usize> {
    if !(rate > 0.0 && rate < 1.0) {
        return Err(Error::invalid(format!("crop rate {rate} must lie in (0, 1)")));
    }
    Ok((rate * len as f64).floor() as usize)
}

/// Removes the final `floor(rate * len)` samples.
pub fn apply_rear_crop(clip: &AudioClip, rate: f64) -> Result<AudioClip> {
    let cut = crop_len(clip.len(), rate)?;
    Ok(clip.with_samples(clip.samples[..clip.len() - cut].to_vec()))
}

/// Removes `floor(rate * len)` samples split between the front and the rear
/// (the extra sample, if any, comes off the rear).
pub fn apply_symmetric_crop(clip: &AudioClip, rate: f64) -> Result<AudioClip> {
    let cut = crop_len(clip.len(), rate)?;
    let front = cut / 2;
    let rear = cut - front;
    Ok(clip.with_samples(clip.samples[front..clip.len() - rear].to_vec()))
}

pub(crate) fn dither_noise(pdf: DitherPdf, rng: &mut Rng) -> f64 {
    let half = DITHER_LSB / 2.0;
    match pdf {
        DitherPdf::Rpdf => rng.uniform_range(-half, half),
        DitherPdf::Tpdf => rng.uniform_range(-half, half) + rng.uniform_range(-half, half),
    }
}

pub(crate) fn quantize16(v: f64) -> f64 {
    let q = (v / DITHER_LSB).round().clamp(-32768.0, 32767.0);
    q * DITHER_LSB
}

/// Adds dither noise and requantizes to the 16-bit grid.
pub fn apply_dither(clip: &AudioClip, pdf: DitherPdf, rng: &mut Rng) -> AudioClip {
    clip.with_samples(
        clip.samples
            .iter()
            .map(|&x| quantize16(x + dither_noise(pdf, rng)))
            .collect(),
    )
}

/// Voss-McCartney pink noise: 16 octave rows, row `k` refreshed every
/// `2^k` samples (by the trailing-zero count of the sample index), plus a
/// fresh white term per sample. Output has zero mean.
pub fn pink_noise(len: usize, rng: &mut Rng) -> Vec<f64> {
    const ROWS: usize = 16;
    let mut rows: Vec<f64> = (0..ROWS).map(|_| rng.uniform_range(-1.0, 1.0)).collect();
    let mut running: f64 = rows.iter().sum();
    let mut out: Vec<f64> = (0..len)
        .map(|n| {
            if n > 0 {
                let k = (n.trailing_zeros() as usize).min(ROWS - 1);
                let fresh = rng.uniform_range(-1.0, 1.0);
                running += fresh - rows[k];
                rows[k] = fresh;
            }
            running + rng.uniform_range(-1.0, 1.0)
        })
        .collect();
    let mean = out.iter().sum::<f64>() / len.max(1) as f64;
    for v in &mut out {
        *v -= mean;
    }
    out
}

/// Adds pink noise whose RMS is `level * RMS(clip)`.
pub fn apply_pink_noise(clip: &AudioClip, level: f64, rng: &mut Rng) -> Result<AudioClip> {
    if !(level > 0.0 && level.is_finite()) {
        return Err(Error::invalid(format!("pink-noise level {level} must be positive")));
    }
    let rms = clip.rms();
    if rms == 0.0 {
        return Err(Error::domain("pink_noise", "input has zero power"));
    }
    let noise = pink_noise(clip.len(), rng);
    let noise_rms = (noise.iter().map(|v| v * v).sum::<f64>() / noise.len() as f64).sqrt();
    let gain = if noise_rms > 0.0 { level * rms / noise_rms } else { 0.0 };
    Ok(clip.with_samples(
        clip.samples.iter().zip(&noise).map(|(x, n)| x + gain * n).collect(),
    ))
}

/// Linear-interpolation resampling to `round(len / factor)` samples with the
/// first and last samples aligned; the nominal sample rate is kept.
pub fn apply_time_stretch(clip: &AudioClip, factor: f64) -> Result<AudioClip> {
    if !(0.5..=2.0).contains(&factor) {
        return Err(Error::invalid(format!("time-stretch factor {factor} is outside [0.5, 2]")));
    }
    let len = clip.len();
    let out_len = ((len as f64 / factor).round() as usize).max(1);
    if out_len == len {
        return Ok(clip.clone());
    }
    let step = if out_len > 1 {
        (len - 1) as f64 / (out_len - 1) as f64
    } else {
        0.0
    };
    let x = &clip.samples;
    let out = (0..out_len)
        .map(|i| {
            let pos = i as f64 * step;
            let i0 = (pos.floor() as usize).min(len - 1);
            let i1 = (i0 + 1).min(len - 1);
            let frac = pos - i0 as f64;
            x[i0] + (x[i1] - x[i0]) * frac
        })
        .collect();
    Ok(clip.with_samples(out))
}

/// A branch of the training-time attack simulator.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainingBranch {
    None,
    GaussianNoise,
    Echo,
    RearCrop,
    Dither,
}

impl TrainingBranch {
    pub const ALL: [TrainingBranch; 5] = [
        TrainingBranch::None,
        TrainingBranch::GaussianNoise,
        TrainingBranch::Echo,
        TrainingBranch::RearCrop,
        TrainingBranch::Dither,
    ];
}

/// Picks one of `branches` uniformly and draws its parameters: GN at
/// 15-20 dB, the default echo, RSC 25%, RPDF dither.
pub fn draw_attack_from(branches: &[TrainingBranch], rng: &mut Rng) -> Result<AttackSpec> {
    if branches.is_empty() {
        return Err(Error::invalid("attack simulator has no enabled branches"));
    }
    Ok(match branches[rng.below(branches.len())] {
        TrainingBranch::None => AttackSpec::None,
        TrainingBranch::GaussianNoise => AttackSpec::GaussianNoise {
            snr_db: rng.uniform_range(15.0, 20.0),
        },
        TrainingBranch::Echo => AttackSpec::DEFAULT_ECHO,
        TrainingBranch::RearCrop => AttackSpec::RearCrop { rate: 0.25 },
        TrainingBranch::Dither => AttackSpec::Dither { pdf: DitherPdf::Rpdf },
    })
}

/// Training-time attack with all five branches equally likely.
pub fn draw_training_attack(rng: &mut Rng) -> AttackSpec {
    draw_attack_from(&TrainingBranch::ALL, rng).expect("non-empty branch list")
}

pub fn simulate_attack(clip: &AudioClip, rng: &mut Rng) -> Result<(AudioClip, AttackSpec)> {
    let spec = draw_training_attack(rng);
    let out = spec.apply(clip, rng)?;
    Ok((out, spec))
}

/// The evaluation-time attack list: every inference-column setting.
pub fn inference_attacks() -> Vec<AttackSpec> {
    let mut v = vec![AttackSpec::None];
    v.extend([5.0, 10.0, 15.0, 20.0].map(|snr_db| AttackSpec::GaussianNoise { snr_db }));
    v.extend([0.3, 0.5].map(|level| AttackSpec::PinkNoise { level }));
    v.extend([
        AttackSpec::Lowpass { cutoff_hz: 3000.0 },
        AttackSpec::Bandpass {
            low_hz: 300.0,
            high_hz: 8000.0,
        },
        AttackSpec::DEFAULT_ECHO,
        AttackSpec::RearCrop { rate: 0.5 },
        AttackSpec::Dither { pdf: DitherPdf::Tpdf },
    ]);
    v
}
