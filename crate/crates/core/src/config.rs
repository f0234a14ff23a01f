//! Run configuration: one JSON document covering data, architecture,
//! adapters, training and evaluation. Unknown keys are rejected and every
//! field has a default.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::codec::CodecConfig;
use crate::dsp::TrainingBranch;
use crate::error::{Error, Result};
use crate::lora::{LoraScaling, DEFAULT_ALPHA, DEFAULT_RANK};
use crate::optim::AdamWConfig;
use crate::vocoder::{DenoiserConfig, ScheduleConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AudioConfig {
    pub sample_rate: u32,
    pub clip_seconds: f64,
    pub window_len: usize,
    pub hop: usize,
    pub n_mels: usize,
    pub fmin: f64,
    /// Upper mel edge; `null` means Nyquist.
    pub fmax: Option<f64>,
}

impl Default for AudioConfig {
    fn default() -> Self {
        Self {
            sample_rate: 8000,
            clip_seconds: 0.5,
            window_len: 256,
            hop: 64,
            n_mels: 20,
            fmin: 0.0,
            fmax: None,
        }
    }
}

impl AudioConfig {
    pub fn clip_len(&self) -> usize {
        (self.clip_seconds * self.sample_rate as f64).round() as usize
    }

    pub fn fmax(&self) -> f64 {
        self.fmax.unwrap_or(self.sample_rate as f64 / 2.0)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LoraConfig {
    pub rank: usize,
    pub alpha: f64,
    pub scaling: LoraScaling,
    /// Layer names to adapt; empty means the denoiser's final five convs.
    pub targets: Vec<String>,
}

impl Default for LoraConfig {
    fn default() -> Self {
        Self {
            rank: DEFAULT_RANK,
            alpha: DEFAULT_ALPHA,
            scaling: LoraScaling::default(),
            targets: Vec::new(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Lambdas {
    pub wea: f64,
    pub mel: f64,
    pub stft: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SdftConfig {
    pub batch: usize,
    /// Total optimizer steps.
    pub steps: usize,
    pub initial_lambdas: Lambdas,
    pub switched_lambdas: Lambdas,
    /// Switch once the smoothed watermark loss drops below this.
    pub wea_threshold: f64,
    pub wea_ema_decay: f64,
    pub optimizer: AdamWConfig,
    /// Attack-simulator branches drawn uniformly per clip.
    pub attack_branches: Vec<TrainingBranch>,
    pub log_every: usize,
}

impl Default for SdftConfig {
    fn default() -> Self {
        Self {
            batch: 4,
            steps: 1500,
            initial_lambdas: Lambdas {
                wea: 1.0,
                mel: 0.0,
                stft: 0.0,
            },
            switched_lambdas: Lambdas {
                wea: 0.1,
                mel: 0.5,
                stft: 0.5,
            },
            wea_threshold: 0.1,
            wea_ema_decay: 0.9,
            optimizer: AdamWConfig::default(),
            attack_branches: TrainingBranch::ALL.to_vec(),
            log_every: 50,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch: usize,
    /// Training crop length in samples; a multiple of the hop.
    pub segment: usize,
    pub optimizer: AdamWConfig,
    pub log_every: usize,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            steps: 400,
            batch: 4,
            segment: 1024,
            optimizer: AdamWConfig {
                lr: 1e-3,
                ..AdamWConfig::default()
            },
            log_every: 50,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub n_clips: usize,
    /// Directory of WAV files to segment instead of synthesizing clips.
    pub data_dir: Option<String>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            n_clips: 64,
            data_dir: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Random payloads per attack row, one per clip in turn.
    pub payloads: usize,
    /// Payload lengths for the capacity sweep.
    pub capacities: Vec<usize>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            payloads: 32,
            capacities: vec![8, 16, 32, 64],
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub audio: AudioConfig,
    pub schedule: ScheduleConfig,
    pub vocoder: DenoiserConfig,
    pub lora: LoraConfig,
    pub codec: CodecConfig,
    pub pretrain: PretrainConfig,
    pub sdft: SdftConfig,
    pub data: DataConfig,
    pub eval: EvalConfig,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        let a = &self.audio;
        if a.sample_rate == 0 || a.clip_len() == 0 {
            return bad("sample rate and clip length must be positive".into());
        }
        if a.hop == 0 || a.window_len < 2 || a.n_mels == 0 {
            return bad("hop, window and mel count must be positive".into());
        }
        if !(a.fmin >= 0.0 && a.fmin < a.fmax() && a.fmax() <= a.sample_rate as f64 / 2.0) {
            return bad(format!("mel range {}..{} is invalid", a.fmin, a.fmax()));
        }
        if self.lora.rank == 0 || !(self.lora.alpha > 0.0) {
            return bad("LoRA rank and alpha must be positive".into());
        }
        if self.codec.payload_bits == 0 {
            return bad("payload must hold at least one bit".into());
        }
        let s = &self.sdft;
        for l in [s.initial_lambdas, s.switched_lambdas] {
            if l.wea < 0.0 || l.mel < 0.0 || l.stft < 0.0 {
                return bad("loss weights must be non-negative".into());
            }
        }
        if s.batch == 0 || !(s.optimizer.lr > 0.0) || s.attack_branches.is_empty() {
            return bad("SDFT needs batch >= 1, lr > 0 and at least one attack branch".into());
        }
        if !(0.0..1.0).contains(&s.wea_ema_decay) {
            return bad("EMA decay must lie in [0, 1)".into());
        }
        let p = &self.pretrain;
        if p.batch == 0 || p.segment == 0 || p.segment % a.hop != 0 || p.segment > a.clip_len() {
            return bad(format!(
                "pretraining segment {} must be a positive multiple of the hop no longer than a clip",
                p.segment
            ));
        }
        if self.data.n_clips == 0 {
            return bad("dataset must hold at least one clip".into());
        }
        Ok(())
    }
}

/// Annotated reference for every configuration key and its default.
pub fn reference_document() -> String {
    let mut out = String::from(
        "Run configuration reference. Every key is optional; unknown keys are rejected.\n\
         Defaults:\n\n",
    );
    out.push_str(&RunConfig::default().to_json());
    out.push_str(
        "\n\nNotes:\n\
         - audio.fmax: null selects the Nyquist frequency.\n\
         - lora.scaling: \"alpha_over_rank\" multiplies B A by alpha / rank; \"alpha\" uses alpha directly.\n\
         - lora.targets: empty adapts the denoiser's final five convolutions.\n\
         - sdft.attack_branches: subset of none, gaussian_noise, echo, rear_crop, dither.\n\
         - sdft lambdas switch once, when the EMA of the watermark loss drops below wea_threshold.\n\
         - pretrain.segment: crop length in samples, a multiple of audio.hop.\n",
    );
    out
}
