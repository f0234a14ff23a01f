use std::f64::consts::PI;

use super::AudioClip;
use crate::error::{Error, Result};

/// Order of the windowed-sinc FIR (taps = order + 1).
pub const FIR_ORDER: usize = 255;

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum FilterKind {
    Lowpass { cutoff_hz: f64 },
    Bandpass { low_hz: f64, high_hz: f64 },
}

fn hamming(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.54 - 0.46 * (2.0 * PI * i as f64 / (n - 1) as f64).cos())
        .collect()
}

/// Hamming-windowed sinc lowpass with unit DC gain.
fn lowpass_taps(cutoff_hz: f64, sample_rate: f64) -> Vec<f64> {
    let taps = FIR_ORDER + 1;
    let fc = cutoff_hz / sample_rate;
    let mid = (taps - 1) as f64 / 2.0;
    let win = hamming(taps);
    let mut h: Vec<f64> = (0..taps)
        .map(|i| {
            let x = i as f64 - mid;
            let sinc = if x == 0.0 { 2.0 * fc } else { (2.0 * PI * fc * x).sin() / (PI * x) };
            sinc * win[i]
        })
        .collect();
    let dc: f64 = h.iter().sum();
    for v in &mut h {
        *v /= dc;
    }
    h
}

fn clamp_cutoff(hz: f64, nyquist: f64) -> f64 {
    let limit = 0.95 * nyquist;
    if hz >= nyquist {
        log::debug!("filter edge {hz} Hz is not below Nyquist ({nyquist} Hz); clamping to {limit} Hz");
        limit
    } else {
        hz
    }
}

/// Taps for `kind` at `sample_rate`, after clamping edges below Nyquist.
pub(crate) fn design(kind: FilterKind, sample_rate: u32) -> Result<Vec<f64>> {
    let rate = sample_rate as f64;
    let nyquist = rate / 2.0;
    match kind {
        FilterKind::Lowpass { cutoff_hz } => {
            let fc = clamp_cutoff(cutoff_hz, nyquist);
            if !(fc > 0.0 && fc < nyquist) {
                return Err(Error::invalid(format!("lowpass cutoff {cutoff_hz} Hz is out of range")));
            }
            Ok(lowpass_taps(fc, rate))
        }
        FilterKind::Bandpass { low_hz, high_hz } => {
            let hi = clamp_cutoff(high_hz, nyquist);
            if !(low_hz > 0.0 && low_hz < hi && hi < nyquist) {
                return Err(Error::invalid(format!(
                    "bandpass {low_hz}-{high_hz} Hz is out of range at {rate} Hz"
                )));
            }
            let upper = lowpass_taps(hi, rate);
            let lower = lowpass_taps(low_hz, rate);
            Ok(upper.iter().zip(&lower).map(|(a, b)| a - b).collect())
        }
    }
}

/// Forward-backward application: the effective kernel is the (symmetric)
/// autocorrelation of the taps, so there is no phase shift. The signal is
/// extended by odd reflection at both ends before filtering.
fn filtfilt(taps: &[f64], x: &[f64]) -> Vec<f64> {
    let m = taps.len();
    let kernel: Vec<f64> = (0..2 * m - 1)
        .map(|j| {
            // sum_i h[i] h[i + j - (m - 1)]
            let lag = j as isize - (m as isize - 1);
            (0..m)
                .filter_map(|i| {
                    let k = i as isize + lag;
                    (0..m as isize).contains(&k).then(|| taps[i] * taps[k as usize])
                })
                .sum()
        })
        .collect();
    let half = m - 1;
    let n = x.len();
    let pad = (2 * m).min(n - 1);
    let mut ext = Vec::with_capacity(n + 2 * pad);
    ext.extend((1..=pad).rev().map(|i| 2.0 * x[0] - x[i]));
    ext.extend_from_slice(x);
    ext.extend((1..=pad).map(|i| 2.0 * x[n - 1] - x[n - 1 - i]));
    (0..n)
        .map(|i| {
            let centre = (i + pad) as isize;
            kernel
                .iter()
                .enumerate()
                .filter_map(|(j, &c)| {
                    let idx = centre + half as isize - j as isize;
                    (0..ext.len() as isize).contains(&idx).then(|| c * ext[idx as usize])
                })
                .sum()
        })
        .collect()
}

pub fn apply_filter(clip: &AudioClip, kind: FilterKind) -> Result<AudioClip> {
    let taps = design(kind, clip.sample_rate)?;
    Ok(clip.with_samples(filtfilt(&taps, &clip.samples)))
}
