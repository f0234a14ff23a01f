use std::path::Path;

use crate::dsp::AudioClip;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct WavInfo {
    pub sample_rate: u32,
    pub channels: u16,
    pub bits_per_sample: u16,
    pub frames: usize,
}

const PCM: u16 = 1;
const EXTENSIBLE: u16 = 0xFFFE;

fn format_err(detail: impl Into<String>) -> Error {
    Error::Format {
        what: "WAV".into(),
        detail: detail.into(),
    }
}

fn u16_at(b: &[u8], at: usize) -> u16 {
    u16::from_le_bytes([b[at], b[at + 1]])
}

fn u32_at(b: &[u8], at: usize) -> u32 {
    u32::from_le_bytes([b[at], b[at + 1], b[at + 2], b[at + 3]])
}

/// Parses a RIFF/WAVE PCM16 file. Multi-channel audio is averaged to mono.
pub fn parse_wav(bytes: &[u8]) -> Result<(WavInfo, Vec<f64>)> {
    if bytes.len() < 12 || &bytes[0..4] != b"RIFF" || &bytes[8..12] != b"WAVE" {
        return Err(format_err("missing RIFF/WAVE header"));
    }
    let mut pos = 12;
    let mut fmt: Option<(u16, u16, u32, u16)> = None;
    let mut data: Option<&[u8]> = None;
    while pos + 8 <= bytes.len() {
        let id = &bytes[pos..pos + 4];
        let size = u32_at(bytes, pos + 4) as usize;
        let body_start = pos + 8;
        let body_end = body_start
            .checked_add(size)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| format_err(format!("chunk `{}` runs past the end of the file", String::from_utf8_lossy(id))))?;
        let body = &bytes[body_start..body_end];
        match id {
            b"fmt " => {
                if body.len() < 16 {
                    return Err(format_err("fmt chunk is too short"));
                }
                let mut tag = u16_at(body, 0);
                if tag == EXTENSIBLE && body.len() >= 26 {
                    tag = u16_at(body, 24);
                }
                fmt = Some((tag, u16_at(body, 2), u32_at(body, 4), u16_at(body, 14)));
            }
            b"data" => data = Some(body),
            _ => {}
        }
        pos = body_end + (size & 1);
    }
    let (tag, channels, sample_rate, bits) = fmt.ok_or_else(|| format_err("no fmt chunk"))?;
    let data = data.ok_or_else(|| format_err("no data chunk"))?;
    if tag != PCM {
        return Err(format_err(format!("unsupported codec tag {tag:#06x}; only PCM is read")));
    }
    if bits != 16 {
        return Err(format_err(format!("unsupported bit depth {bits}; only 16-bit PCM is read")));
    }
    if channels == 0 || sample_rate == 0 {
        return Err(format_err("zero channels or sample rate"));
    }
    let frame_bytes = 2 * channels as usize;
    let frames = data.len() / frame_bytes;
    if channels > 1 {
        log::warn!("downmixing {channels}-channel audio to mono");
    }
    let samples = data
        .chunks_exact(frame_bytes)
        .map(|f| {
            let sum: f64 = f.chunks_exact(2).map(|s| i16::from_le_bytes([s[0], s[1]]) as f64).sum();
            sum / channels as f64 / 32768.0
        })
        .collect();
    Ok((
        WavInfo {
            sample_rate,
            channels,
            bits_per_sample: bits,
            frames,
        },
        samples,
    ))
}

pub fn wav_read(path: &Path) -> Result<AudioClip> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let (info, samples) = parse_wav(&bytes).map_err(|e| match e {
        Error::Format { what, detail } => Error::Format {
            what,
            detail: format!("{}: {detail}", path.display()),
        },
        other => other,
    })?;
    AudioClip::new(samples, info.sample_rate)
}

/// Quantizes to 16 bits: round half away from zero, then clamp.
pub fn quantize_sample(v: f64) -> i16 {
    (v * 32768.0).round().clamp(-32768.0, 32767.0) as i16
}

/// Mono PCM16 file bytes.
pub fn encode_wav(clip: &AudioClip) -> Vec<u8> {
    let data_len = 2 * clip.len() as u32;
    let mut out = Vec::with_capacity(44 + data_len as usize);
    out.extend_from_slice(b"RIFF");
    out.extend_from_slice(&(36 + data_len).to_le_bytes());
    out.extend_from_slice(b"WAVEfmt ");
    out.extend_from_slice(&16u32.to_le_bytes());
    out.extend_from_slice(&PCM.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes());
    out.extend_from_slice(&clip.sample_rate.to_le_bytes());
    out.extend_from_slice(&(clip.sample_rate * 2).to_le_bytes());
    out.extend_from_slice(&2u16.to_le_bytes());
    out.extend_from_slice(&16u16.to_le_bytes());
    out.extend_from_slice(b"data");
    out.extend_from_slice(&data_len.to_le_bytes());
    for &v in &clip.samples {
        out.extend_from_slice(&quantize_sample(v).to_le_bytes());
    }
    out
}

pub fn wav_write(path: &Path, clip: &AudioClip) -> Result<()> {
    std::fs::write(path, encode_wav(clip)).map_err(|e| Error::io(path, e))
}
