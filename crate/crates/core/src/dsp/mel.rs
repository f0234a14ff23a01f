use std::sync::Arc;

use super::stft::{stft_magnitude, Spectrogram};
use super::AudioClip;
use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};

fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Triangular filters on the HTK mel scale with unit peak.
#[derive(Clone, Debug)]
pub struct MelFilterbank {
    weights: Arc<Tensor>,
    pub fmin: f64,
    pub fmax: f64,
    pub sample_rate: u32,
    pub n_fft: usize,
}

impl MelFilterbank {
    pub fn new(sample_rate: u32, n_fft: usize, n_mels: usize, fmin: f64, fmax: f64) -> Result<Self> {
        let nyquist = sample_rate as f64 / 2.0;
        if n_mels == 0 || !(0.0..fmax).contains(&fmin) || fmax > nyquist {
            return Err(Error::invalid(format!(
                "mel filterbank needs 0 <= fmin < fmax <= {nyquist}, n_mels >= 1 (got {fmin}, {fmax}, {n_mels})"
            )));
        }
        let bins = n_fft / 2 + 1;
        let (lo, hi) = (hz_to_mel(fmin), hz_to_mel(fmax));
        let edges: Vec<f64> = (0..n_mels + 2)
            .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (n_mels + 1) as f64))
            .collect();
        let mut w = Tensor::zeros([n_mels, bins]);
        for m in 0..n_mels {
            let (left, centre, right) = (edges[m], edges[m + 1], edges[m + 2]);
            let row = &mut w.data_mut()[m * bins..(m + 1) * bins];
            for (k, v) in row.iter_mut().enumerate() {
                let f = k as f64 * sample_rate as f64 / n_fft as f64;
                let up = (f - left) / (centre - left);
                let down = (right - f) / (right - centre);
                *v = up.min(down).max(0.0);
            }
            if row.iter().sum::<f64>() <= 0.0 {
                return Err(Error::invalid(format!(
                    "mel band {m} ({left:.1}-{right:.1} Hz) falls between FFT bins; use fewer bands or a longer window"
                )));
            }
        }
        Ok(Self {
            weights: Arc::new(w),
            fmin,
            fmax,
            sample_rate,
            n_fft,
        })
    }

    pub fn weights(&self) -> &Tensor {
        &self.weights
    }

    pub fn n_mels(&self) -> usize {
        self.weights.shape()[0]
    }

    pub fn bins(&self) -> usize {
        self.weights.shape()[1]
    }
}

fn check_bins(fb: &MelFilterbank, window_len: usize) -> Result<()> {
    if fb.bins() != window_len / 2 + 1 {
        return Err(Error::shape(
            "mel_spectrogram",
            format!("filterbank has {} bins, window {window_len} gives {}", fb.bins(), window_len / 2 + 1),
        ));
    }
    Ok(())
}

/// `log(1 + fb * |STFT|^2)`, `[frames, n_mels]`.
pub fn mel_spectrogram(clip: &AudioClip, fb: &MelFilterbank, window_len: usize, hop: usize) -> Result<Spectrogram> {
    check_bins(fb, window_len)?;
    let spec = stft_magnitude(clip, window_len, hop)?;
    let (frames, bins) = (spec.frames(), spec.bins());
    let n_mels = fb.n_mels();
    let mut out = Tensor::zeros([frames, n_mels]);
    for f in 0..frames {
        let row = &spec.magnitudes.data()[f * bins..(f + 1) * bins];
        for m in 0..n_mels {
            let w = &fb.weights.data()[m * bins..(m + 1) * bins];
            let e: f64 = w.iter().zip(row).map(|(w, x)| w * x * x).sum();
            out.data_mut()[f * n_mels + m] = e.ln_1p();
        }
    }
    Ok(Spectrogram {
        magnitudes: out,
        window_len,
        hop,
    })
}

/// Differentiable counterpart of [`mel_spectrogram`] for a signal on the tape.
pub fn mel_on_tape(tape: &mut Tape, x: Var, fb: &MelFilterbank, window_len: usize, hop: usize) -> Result<Var> {
    check_bins(fb, window_len)?;
    let mag = tape.stft_magnitude(x, window_len, hop)?;
    let power = tape.mul(mag, mag)?;
    let mel = tape.project_last(power, fb.weights.clone())?;
    let shifted = tape.add_scalar(mel, 1.0);
    tape.log(shifted)
}

/// Mel conditioner used by the vocoder: the clip is zero-padded by half a
/// window on both sides, so `1 + len / hop` frames cover every sample.
pub fn conditioning_mel(clip: &AudioClip, fb: &MelFilterbank, window_len: usize, hop: usize) -> Result<Spectrogram> {
    let pad = window_len / 2;
    let mut samples = vec![0.0; clip.len() + 2 * pad];
    samples[pad..pad + clip.len()].copy_from_slice(&clip.samples);
    let padded = AudioClip::new(samples, clip.sample_rate)?;
    mel_spectrogram(&padded, fb, window_len, hop)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fb() -> MelFilterbank {
        MelFilterbank::new(8000, 64, 8, 0.0, 4000.0).unwrap()
    }

    #[test]
    fn filters_are_triangular_and_ordered() {
        let fb = MelFilterbank::new(8000, 256, 20, 0.0, 4000.0).unwrap();
        let bins = fb.bins();
        let mut last_peak = 0;
        for m in 0..fb.n_mels() {
            let row = &fb.weights().data()[m * bins..(m + 1) * bins];
            assert!(row.iter().all(|&v| v >= 0.0));
            assert!(row.iter().sum::<f64>() > 0.0);
            let peak = (0..bins).max_by(|&a, &b| row[a].total_cmp(&row[b])).unwrap();
            assert!(peak >= last_peak);
            last_peak = peak;
        }
    }

    #[test]
    fn too_many_bands_is_an_error() {
        assert!(MelFilterbank::new(8000, 16, 40, 0.0, 4000.0).is_err());
    }

    #[test]
    fn zero_clip_gives_zero_mel() {
        let clip = AudioClip::new(vec![0.0; 256], 8000).unwrap();
        let mel = mel_spectrogram(&clip, &fb(), 64, 16).unwrap();
        assert!(mel.magnitudes.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn matches_dense_product_oracle() {
        let samples: Vec<f64> = (0..256).map(|i| ((i * 13 % 29) as f64 / 14.0 - 1.0) * 0.5).collect();
        let clip = AudioClip::new(samples, 8000).unwrap();
        let fb = fb();
        let mel = mel_spectrogram(&clip, &fb, 64, 16).unwrap();
        let spec = stft_magnitude(&clip, 64, 16).unwrap();
        // power [F, K] times weights^T [K, M], by explicit triple loop.
        let (f_n, k_n, m_n) = (spec.frames(), spec.bins(), fb.n_mels());
        for f in 0..f_n {
            for m in 0..m_n {
                let mut acc = 0.0;
                for k in 0..k_n {
                    let p = spec.magnitudes.data()[f * k_n + k].powi(2);
                    acc += fb.weights().data()[m * k_n + k] * p;
                }
                let got = mel.magnitudes.data()[f * m_n + m];
                assert!((got - (1.0 + acc).ln()).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn doubling_amplitude_never_decreases_cells() {
        let samples: Vec<f64> = (0..400).map(|i| (i as f64 * 0.21).sin() * 0.3).collect();
        let louder: Vec<f64> = samples.iter().map(|v| v * 2.0).collect();
        let a = mel_spectrogram(&AudioClip::new(samples, 8000).unwrap(), &fb(), 64, 16).unwrap();
        let b = mel_spectrogram(&AudioClip::new(louder, 8000).unwrap(), &fb(), 64, 16).unwrap();
        for (x, y) in a.magnitudes.data().iter().zip(b.magnitudes.data()) {
            assert!(y >= x);
        }
    }

    #[test]
    fn tape_version_matches_direct_version() {
        let samples: Vec<f64> = (0..300).map(|i| (i as f64 * 0.3).cos() * 0.4).collect();
        let clip = AudioClip::new(samples.clone(), 8000).unwrap();
        let fb = fb();
        let direct = mel_spectrogram(&clip, &fb, 64, 16).unwrap();
        let store = crate::autodiff::ParamStore::new();
        let mut tape = Tape::new(&store);
        let x = tape.constant(Tensor::from_vec(samples));
        let m = mel_on_tape(&mut tape, x, &fb, 64, 16).unwrap();
        assert!(tape.value(m).max_abs_diff(&direct.magnitudes) < 1e-12);
    }

    #[test]
    fn conditioning_covers_every_sample() {
        let clip = AudioClip::new(vec![0.1; 4000], 8000).unwrap();
        let fb = MelFilterbank::new(8000, 256, 20, 0.0, 4000.0).unwrap();
        let mel = conditioning_mel(&clip, &fb, 256, 64).unwrap();
        assert_eq!(mel.frames(), 1 + 4000 / 64);
        assert!(mel.frames() * 64 >= 4000);
    }
}
