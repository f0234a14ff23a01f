//! Signal transforms: STFT and mel analysis for the losses, and the
//! distortions used by the attack simulator and the robustness harness.

mod attacks;
mod filter;
mod mel;
pub(crate) mod stft;

pub(crate) use attacks::echo_delay_samples;

pub use attacks::{
    apply_dither, apply_echo, apply_gaussian_noise, apply_pink_noise, apply_rear_crop,
    apply_symmetric_crop, apply_time_stretch, draw_attack_from, draw_training_attack, inference_attacks,
    pink_noise, simulate_attack, AttackSpec, DitherPdf, TrainingBranch, DITHER_LSB,
};
pub use filter::{apply_filter, FilterKind, FIR_ORDER};
pub use mel::{conditioning_mel, mel_on_tape, mel_spectrogram, MelFilterbank};
pub use stft::{frame_count, hann, stft_magnitude, Spectrogram};

use crate::error::{Error, Result};

/// Mono sample buffer, nominally in `[-1, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct AudioClip {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

impl AudioClip {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::invalid("sample rate must be positive"));
        }
        if samples.is_empty() {
            return Err(Error::invalid("audio clip must hold at least one sample"));
        }
        Ok(Self {
            samples,
            sample_rate,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn power(&self) -> f64 {
        self.samples.iter().map(|v| v * v).sum::<f64>() / self.samples.len() as f64
    }

    pub fn rms(&self) -> f64 {
        self.power().sqrt()
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    pub(crate) fn with_samples(&self, samples: Vec<f64>) -> Self {
        Self {
            samples,
            sample_rate: self.sample_rate,
        }
    }
}
