use std::f64::consts::PI;

use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;

use super::AudioClip;
use crate::autodiff::Tensor;
use crate::error::{Error, Result};

/// Magnitude spectrogram, `[frames, bins]` with `bins = window_len / 2 + 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct Spectrogram {
    pub magnitudes: Tensor,
    pub window_len: usize,
    pub hop: usize,
}

impl Spectrogram {
    pub fn frames(&self) -> usize {
        self.magnitudes.shape()[0]
    }

    pub fn bins(&self) -> usize {
        self.magnitudes.shape()[1]
    }
}

/// Periodic Hann window.
pub fn hann(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / n as f64).cos())
        .collect()
}

/// Frames produced without padding: `1 + (len - window_len) / hop`, or a
/// single zero-padded frame when the signal is shorter than the window.
pub fn frame_count(len: usize, window_len: usize, hop: usize) -> usize {
    if len < window_len {
        1
    } else {
        1 + (len - window_len) / hop
    }
}

/// Complex one-sided STFT kept around for the magnitude adjoint.
pub(crate) struct ComplexStft {
    frames: usize,
    bins: usize,
    window_len: usize,
    hop: usize,
    window: Vec<f64>,
    data: Vec<Complex64>,
}

pub(crate) fn stft_complex(signal: &[f64], window_len: usize, hop: usize) -> Result<ComplexStft> {
    if hop == 0 {
        return Err(Error::invalid("STFT hop must be positive"));
    }
    if window_len < 2 {
        return Err(Error::invalid("STFT window must have at least 2 samples"));
    }
    let frames = frame_count(signal.len(), window_len, hop);
    let bins = window_len / 2 + 1;
    let window = hann(window_len);
    let fft = FftPlanner::<f64>::new().plan_fft_forward(window_len);
    let mut buf = vec![Complex64::default(); window_len];
    let mut data = Vec::with_capacity(frames * bins);
    for f in 0..frames {
        let start = f * hop;
        for (n, slot) in buf.iter_mut().enumerate() {
            let v = signal.get(start + n).copied().unwrap_or(0.0);
            *slot = Complex64::new(v * window[n], 0.0);
        }
        fft.process(&mut buf);
        data.extend_from_slice(&buf[..bins]);
    }
    Ok(ComplexStft {
        frames,
        bins,
        window_len,
        hop,
        window,
        data,
    })
}

impl ComplexStft {
    pub(crate) fn magnitudes(&self) -> Tensor {
        let mags = self.data.iter().map(|c| c.norm()).collect();
        Tensor::new([self.frames, self.bins], mags).expect("frames * bins")
    }

    /// Pulls `d loss / d |X[f, k]|` back to the signal:
    /// `d/dx[start+n] = w[n] * Re(sum_k g[f,k] * X[f,k] / |X[f,k]| * e^{+2 pi i k n / N})`.
    /// Zero-magnitude cells contribute nothing.
    pub(crate) fn magnitude_vjp(&self, g: &[f64], len: usize) -> Vec<f64> {
        let n = self.window_len;
        let ifft = FftPlanner::<f64>::new().plan_fft_inverse(n);
        let mut buf = vec![Complex64::default(); n];
        let mut out = vec![0.0; len];
        for f in 0..self.frames {
            buf.fill(Complex64::default());
            for k in 0..self.bins {
                let x = self.data[f * self.bins + k];
                let mag = x.norm();
                if mag > 0.0 {
                    buf[k] = x * (g[f * self.bins + k] / mag);
                }
            }
            ifft.process(&mut buf);
            let start = f * self.hop;
            for (i, c) in buf.iter().enumerate() {
                if let Some(o) = out.get_mut(start + i) {
                    *o += self.window[i] * c.re;
                }
            }
        }
        out
    }
}

/// Hann-windowed magnitude STFT of a clip (no centering pad).
pub fn stft_magnitude(clip: &AudioClip, window_len: usize, hop: usize) -> Result<Spectrogram> {
    let spec = stft_complex(&clip.samples, window_len, hop)?;
    Ok(Spectrogram {
        magnitudes: spec.magnitudes(),
        window_len,
        hop,
    })
}
