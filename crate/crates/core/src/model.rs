//! The full bundle: vocoder, adapters, encoder and decoder in one store.

use crate::autodiff::{ParamStore, Rng, Tape, Tensor};
use crate::codec::{bits_tensor, inject, DecoderNet, EncoderNet, WatermarkBits};
use crate::config::RunConfig;
use crate::dsp::{conditioning_mel, AudioClip, MelFilterbank};
use crate::error::{Error, Result};
use crate::layers::Layer;
use crate::lora;
use crate::vocoder::{self, sample_inference, Denoiser, NoiseSchedule};

#[derive(Clone, Debug)]
pub struct Model {
    pub config: RunConfig,
    pub store: ParamStore,
    pub vocoder: Denoiser,
    pub encoder: EncoderNet,
    pub decoder: DecoderNet,
    pub schedule: NoiseSchedule,
    pub filterbank: MelFilterbank,
}

impl Model {
    /// Fresh vocoder and codec weights; no adapters yet.
    pub fn new(config: &RunConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let a = &config.audio;
        let mut store = ParamStore::new();
        let vocoder = Denoiser::new(&mut store, &config.vocoder, a.n_mels, a.hop, rng)?;
        let encoder = EncoderNet::new(&mut store, config.codec.payload_bits, a.clip_len(), rng)?;
        let decoder = DecoderNet::new(&mut store, &config.codec, rng)?;
        Ok(Self {
            config: config.clone(),
            store,
            vocoder,
            encoder,
            decoder,
            schedule: config.schedule.build()?,
            filterbank: MelFilterbank::new(a.sample_rate, a.window_len, a.n_mels, a.fmin, a.fmax())?,
        })
    }

    pub fn clip_len(&self) -> usize {
        self.config.audio.clip_len()
    }

    pub fn payload_bits(&self) -> usize {
        self.encoder.payload_bits
    }

    pub fn adapter_targets(&self) -> Vec<String> {
        if self.config.lora.targets.is_empty() {
            self.vocoder.final_convs()
        } else {
            self.config.lora.targets.clone()
        }
    }

    pub fn has_adapters(&self) -> bool {
        self.vocoder.layers().iter().any(|l| l.adapter.is_some())
    }

    pub fn adapted_layers(&self) -> Vec<&Layer> {
        self.vocoder.layers().into_iter().filter(|l| l.adapter.is_some()).collect()
    }

    /// Freezes the whole vocoder and attaches fresh adapters to the targets.
    pub fn attach_adapters(&mut self, rng: &mut Rng) -> Result<()> {
        self.store.set_trainable_prefix(vocoder::ROOT, false);
        let lc = self.config.lora.clone();
        for name in self.adapter_targets() {
            let layer = self.vocoder.layer_mut(&name)?;
            lora::attach(&mut self.store, layer, lc.rank, lc.alpha, lc.scaling, rng)?;
        }
        Ok(())
    }

    /// Re-links adapter tensors already present in the store.
    pub fn rebind_adapters(&mut self) -> Result<()> {
        self.store.set_trainable_prefix(vocoder::ROOT, false);
        let lc = self.config.lora.clone();
        for name in self.adapter_targets() {
            let layer = self.vocoder.layer_mut(&name)?;
            lora::rebind(&mut self.store, layer, lc.alpha, lc.scaling)?;
        }
        Ok(())
    }

    pub fn merge_adapters(&mut self) -> Result<()> {
        for layer in self.vocoder.layers_mut() {
            lora::merge(&mut self.store, layer)?;
        }
        Ok(())
    }

    pub fn adapter_param_count(&self) -> usize {
        lora::trainable_param_count(&self.store, self.adapted_layers())
    }

    /// Vocoder conditioning `[B, n_mels, frames]` for equal-length clips.
    pub fn conditioning(&self, clips: &[&AudioClip]) -> Result<Tensor> {
        let a = &self.config.audio;
        let specs = clips
            .iter()
            .map(|c| conditioning_mel(c, &self.filterbank, a.window_len, a.hop))
            .collect::<Result<Vec<_>>>()?;
        vocoder::stack_conditioning(&specs.iter().collect::<Vec<_>>())
    }

    /// Watermarked synthesis. `payloads = None` runs the plain vocoder. The
    /// noise draws do not depend on the payload, so the same `rng` state
    /// gives a matched unwatermarked reference.
    pub fn synthesize(&self, payloads: Option<&[WatermarkBits]>, cond: &Tensor, rng: &mut Rng) -> Result<Vec<AudioClip>> {
        let b = cond.shape()[0];
        let len = self.clip_len();
        let noise = Tensor::new([b, 1, len], rng.normal_vec(b * len))?;
        let x_big_t = match payloads {
            None => noise,
            Some(p) => {
                if p.len() != b {
                    return Err(Error::shape("synthesize", format!("{} payloads for batch {b}", p.len())));
                }
                let mut tape = Tape::new(&self.store);
                let bits = tape.constant(bits_tensor(p)?);
                let latent = self.encoder.encode(&mut tape, bits)?;
                let n = tape.constant(noise);
                let x = inject(&mut tape, latent, n)?;
                tape.value(x).clone()
            }
        };
        let out = sample_inference(&self.store, &self.vocoder, &x_big_t, cond, &self.schedule, rng)?;
        out.check_finite("synthesis")?;
        let rate = self.config.audio.sample_rate;
        out.data()
            .chunks(len)
            .map(|c| AudioClip::new(c.to_vec(), rate))
            .collect()
    }

    pub fn extract_logits(&self, clip: &AudioClip) -> Result<Vec<f64>> {
        self.decoder.decode_samples(&self.store, &clip.samples)
    }
}
