use std::f64::consts::PI;
use std::path::Path;

use sha2::{Digest, Sha256};

use super::wav::wav_read;
use crate::autodiff::Rng;
use crate::config::AudioConfig;
use crate::dsp::{conditioning_mel, AudioClip, MelFilterbank, Spectrogram};
use crate::error::{Error, Result};

pub const PEAK_LIMIT: f64 = 0.9;
pub const NOISE_FLOOR_DB: f64 = -30.0;

/// Equal-length clips with their vocoder conditioning.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub clips: Vec<AudioClip>,
    pub mels: Vec<Spectrogram>,
}

impl Dataset {
    pub fn from_clips(clips: Vec<AudioClip>, audio: &AudioConfig) -> Result<Self> {
        let len = clips.first().map(|c| c.len()).ok_or_else(|| Error::invalid("dataset is empty"))?;
        if clips.iter().any(|c| c.len() != len) {
            return Err(Error::invalid("dataset clips must share one length"));
        }
        let fb = MelFilterbank::new(audio.sample_rate, audio.window_len, audio.n_mels, audio.fmin, audio.fmax())?;
        let mels = clips
            .iter()
            .map(|c| conditioning_mel(c, &fb, audio.window_len, audio.hop))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { clips, mels })
    }

    pub fn len(&self) -> usize {
        self.clips.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clips.is_empty()
    }

    pub fn clip_len(&self) -> usize {
        self.clips[0].len()
    }

    /// SHA-256 over the little-endian bytes of every sample, in order.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for c in &self.clips {
            for v in &c.samples {
                h.update(v.to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// A harmonic tone with vibrato, ADSR envelope and a noise floor 30 dB
/// below the tone, scaled to peak at most 0.9.
pub fn synth_clip(len: usize, sample_rate: u32, rng: &mut Rng) -> Result<AudioClip> {
    let sr = sample_rate as f64;
    let f0 = rng.uniform_range(90.0, 300.0);
    let harmonics = 3 + rng.below(4);
    let vib_rate = rng.uniform_range(2.0, 6.0);
    let vib_depth = rng.uniform_range(0.0, 0.04);
    let partials: Vec<(f64, f64, f64)> = (1..=harmonics)
        .map(|k| (k as f64, rng.uniform_range(0.3, 1.0) / k as f64, rng.uniform_range(0.0, 2.0 * PI)))
        .collect();
    let n = len as f64;
    let attack = rng.uniform_range(0.01, 0.1) * n;
    let decay = rng.uniform_range(0.05, 0.2) * n;
    let sustain = rng.uniform_range(0.4, 0.9);
    let release = rng.uniform_range(0.05, 0.3) * n;
    let envelope = |i: f64| -> f64 {
        if i < attack {
            i / attack
        } else if i < attack + decay {
            1.0 - (1.0 - sustain) * (i - attack) / decay
        } else if i < n - release {
            sustain
        } else {
            sustain * ((n - i) / release).max(0.0)
        }
    };
    let mut phase = 0.0;
    let mut tone = Vec::with_capacity(len);
    for i in 0..len {
        let t = i as f64 / sr;
        let f = f0 * (1.0 + vib_depth * (2.0 * PI * vib_rate * t).sin());
        phase += 2.0 * PI * f / sr;
        let v: f64 = partials
            .iter()
            .filter(|(k, _, _)| k * f < sr / 2.0)
            .map(|(k, a, p)| a * (k * phase + p).sin())
            .sum();
        tone.push(v * envelope(i as f64));
    }
    let rms = (tone.iter().map(|v| v * v).sum::<f64>() / len.max(1) as f64).sqrt();
    let floor = rms * 10f64.powf(NOISE_FLOOR_DB / 20.0);
    let mut samples: Vec<f64> = tone.iter().map(|v| v + floor * rng.normal()).collect();
    let peak = samples.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let target = rng.uniform_range(0.5, PEAK_LIMIT);
    if peak > 0.0 {
        let g = target / peak;
        samples.iter_mut().for_each(|v| *v *= g);
    }
    AudioClip::new(samples, sample_rate)
}

pub fn synth_dataset(n_clips: usize, audio: &AudioConfig, rng: &mut Rng) -> Result<Dataset> {
    if n_clips == 0 {
        return Err(Error::invalid("dataset must hold at least one clip"));
    }
    let clips = (0..n_clips)
        .map(|_| synth_clip(audio.clip_len(), audio.sample_rate, rng))
        .collect::<Result<Vec<_>>>()?;
    Dataset::from_clips(clips, audio)
}

/// Cuts every `.wav` file in `dir` (sorted by name) into consecutive
/// clip-length segments, keeping at most `max_clips`.
pub fn load_wav_dir(dir: &Path, audio: &AudioConfig, max_clips: usize) -> Result<Dataset> {
    let mut paths: Vec<_> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("wav")))
        .collect();
    paths.sort();
    let len = audio.clip_len();
    let mut clips = Vec::new();
    'files: for p in paths {
        let clip = wav_read(&p)?;
        if clip.sample_rate != audio.sample_rate {
            return Err(Error::Format {
                what: "wav",
                detail: format!(
                    "{}: sample rate {} differs from configured {}",
                    p.display(),
                    clip.sample_rate,
                    audio.sample_rate
                ),
            });
        }
        for seg in clip.samples.chunks_exact(len) {
            if clips.len() == max_clips {
                break 'files;
            }
            clips.push(AudioClip::new(seg.to_vec(), clip.sample_rate)?);
        }
    }
    if clips.is_empty() {
        return Err(Error::invalid(format!("no {len}-sample segments found in {}", dir.display())));
    }
    Dataset::from_clips(clips, audio)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_peak_and_hash() {
        let audio = AudioConfig::default();
        let ds = synth_dataset(64, &audio, &mut Rng::new(1)).unwrap();
        assert_eq!(ds.len(), 64);
        assert!(ds.clips.iter().all(|c| c.len() == 4000));
        assert!(ds.clips.iter().all(|c| c.samples.iter().all(|v| v.abs() <= PEAK_LIMIT)));
        assert_eq!(ds.mels[0].frames(), 1 + 4000 / 64);
        let again = synth_dataset(64, &audio, &mut Rng::new(1)).unwrap();
        assert_eq!(ds.hash(), again.hash());
        assert_ne!(ds.hash(), synth_dataset(64, &audio, &mut Rng::new(2)).unwrap().hash());
    }

    #[test]
    fn clips_are_harmonic_with_a_noise_floor() {
        let clip = synth_clip(4000, 8000, &mut Rng::new(3)).unwrap();
        assert!(clip.rms() > 0.05);
        // Fine structure: the clip is not a pure constant and has no DC bias.
        let mean = clip.samples.iter().sum::<f64>() / 4000.0;
        assert!(mean.abs() < 0.05);
    }
}
