//! Training loops over a [`Dataset`]: vocoder pretraining on random crops
//! and watermark fine-tuning on full clips.

use std::path::Path;

use crate::autodiff::{Rng, Tensor};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::eval::{capacity_row, CapacityRow};
use crate::io::{load_wav_dir, synth_dataset, Dataset};
use crate::model::Model;
use crate::optim::AdamW;
use crate::sdft::{sdft_step, Batch, LambdaSchedule, LossReport};
use crate::vocoder::pretrain_step;

/// Clips `idx` with their conditioning, `[B, 1, L]` and `[B, n_mels, F]`.
pub fn full_batch(data: &Dataset, idx: &[usize]) -> Result<(Tensor, Tensor)> {
    let len = data.clip_len();
    let frames = data.mels[0].frames();
    crop_batch(data, idx, &vec![0; idx.len()], len, frames)
}

/// Crops of `segment` samples starting at hop-aligned `offsets`, with the
/// matching `frames` conditioning frames.
pub fn crop_batch(
    data: &Dataset,
    idx: &[usize],
    offsets: &[usize],
    segment: usize,
    frames: usize,
) -> Result<(Tensor, Tensor)> {
    let b = idx.len();
    let m = data.mels[0].bins();
    let hop = hop_of(data)?;
    let mut audio = Vec::with_capacity(b * segment);
    let mut cond = Vec::with_capacity(b * m * frames);
    for (&i, &off) in idx.iter().zip(offsets) {
        let clip = data.clips.get(i).ok_or_else(|| Error::invalid(format!("clip {i} out of range")))?;
        let mel = &data.mels[i];
        let f0 = off / hop;
        if off % hop != 0 || off + segment > clip.len() || f0 + frames > mel.frames() {
            return Err(Error::invalid(format!("crop at {off} of {segment} samples does not fit clip {i}")));
        }
        audio.extend_from_slice(&clip.samples[off..off + segment]);
        let d = mel.magnitudes.data();
        for mi in 0..m {
            cond.extend((f0..f0 + frames).map(|f| d[f * m + mi]));
        }
    }
    Ok((Tensor::new([b, 1, segment], audio)?, Tensor::new([b, m, frames], cond)?))
}

/// Conditioning frames are `1 + len / hop`, so the hop is recoverable.
fn hop_of(data: &Dataset) -> Result<usize> {
    let frames = data.mels[0].frames();
    if frames < 2 {
        return Err(Error::invalid("clips are shorter than one hop"));
    }
    Ok(data.clip_len() / (frames - 1))
}

fn check_dataset(model: &Model, data: &Dataset) -> Result<()> {
    if data.is_empty() {
        return Err(Error::invalid("dataset is empty"));
    }
    if data.clip_len() != model.clip_len() {
        return Err(Error::shape(
            "dataset",
            format!("clips of {} samples, model expects {}", data.clip_len(), model.clip_len()),
        ));
    }
    Ok(())
}

/// Trains the base vocoder on the denoising objective. `on_step` sees each
/// step index and loss. Returns the per-step losses.
pub fn pretrain(
    model: &mut Model,
    data: &Dataset,
    rng: &mut Rng,
    mut on_step: impl FnMut(usize, f64),
) -> Result<Vec<f64>> {
    check_dataset(model, data)?;
    if model.has_adapters() {
        return Err(Error::invalid("pretraining expects a model without adapters"));
    }
    let cfg = model.config.pretrain.clone();
    let hop = model.config.audio.hop;
    let len = model.clip_len();
    let segment = cfg.segment.min(len / hop * hop);
    if segment == 0 || segment % hop != 0 {
        return Err(Error::Config(format!("pretrain segment {} is not a positive multiple of hop {hop}", cfg.segment)));
    }
    let frames = 1 + segment / hop;
    let max_start = (len - segment) / hop;
    let mut opt = AdamW::new(cfg.optimizer.clone());
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let idx: Vec<usize> = (0..cfg.batch).map(|_| rng.below(data.len())).collect();
        let offsets: Vec<usize> = (0..cfg.batch).map(|_| rng.below(max_start + 1) * hop).collect();
        let (s0, cond) = crop_batch(data, &idx, &offsets, segment, frames)?;
        let loss = pretrain_step(&mut model.store, &model.vocoder, &s0, &cond, &model.schedule, rng, &mut opt)?;
        on_step(step, loss);
        losses.push(loss);
    }
    Ok(losses)
}

/// Watermark fine-tuning. Attaches adapters first when the model has none;
/// the base vocoder stays frozen. `on_step` sees every step's report.
pub fn finetune(
    model: &mut Model,
    data: &Dataset,
    rng: &mut Rng,
    mut on_step: impl FnMut(&LossReport),
) -> Result<Vec<LossReport>> {
    check_dataset(model, data)?;
    if !model.has_adapters() {
        model.attach_adapters(rng)?;
    }
    let cfg = model.config.sdft.clone();
    let mut opt = AdamW::new(cfg.optimizer.clone());
    let mut schedule = LambdaSchedule::new(&cfg);
    let mut reports = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let idx: Vec<usize> = (0..cfg.batch).map(|_| rng.below(data.len())).collect();
        let (clean, cond) = full_batch(data, &idx)?;
        let batch = Batch {
            clean: &clean,
            cond: &cond,
        };
        let report = sdft_step(model, &batch, schedule.current, &cfg, step, rng, &mut opt)?;
        schedule.update(report.l_wea, &cfg);
        on_step(&report);
        reports.push(report);
    }
    Ok(reports)
}

/// Independent random streams derived from one seed, so each pipeline
/// stage is reproducible on its own.
#[derive(Clone, Debug)]
pub struct Streams {
    pub data: Rng,
    pub init: Rng,
    pub pretrain: Rng,
    pub finetune: Rng,
    pub eval_seed: u64,
}

impl Streams {
    pub fn new(seed: u64) -> Self {
        let mut root = Rng::new(seed);
        Self {
            data: root.fork(),
            init: root.fork(),
            pretrain: root.fork(),
            finetune: root.fork(),
            eval_seed: root.next_u64(),
        }
    }
}

/// The configured corpus: WAV files from `data.data_dir` when set,
/// otherwise a synthetic one drawn from the seed's data stream.
pub fn load_dataset(cfg: &RunConfig, data_dir: Option<&Path>) -> Result<Dataset> {
    let dir = data_dir.map(Path::to_path_buf).or_else(|| cfg.data.data_dir.as_ref().map(Into::into));
    match dir {
        Some(d) => load_wav_dir(&d, &cfg.audio, cfg.data.n_clips),
        None => synth_dataset(cfg.data.n_clips, &cfg.audio, &mut Streams::new(cfg.seed).data),
    }
}

/// Copies the base vocoder weights of `from` into `to`. Both must share the
/// vocoder architecture; adapters are not copied.
pub fn copy_vocoder(from: &Model, to: &mut Model) -> Result<()> {
    let prefix = format!("{}.", crate::vocoder::ROOT);
    for (_, p) in from.store.iter().filter(|(_, p)| p.name.starts_with(&prefix)) {
        let id = to.store.id(&p.name)?;
        let dst = to.store.get_mut(id);
        if dst.value.shape() != p.value.shape() {
            return Err(Error::shape("copy_vocoder", format!("`{}` differs in shape", p.name)));
        }
        dst.value = p.value.clone();
    }
    Ok(())
}

/// Fine-tunes one fresh codec per payload length on top of a shared
/// pretrained vocoder and reports clean and attacked accuracy for each.
pub fn capacity_sweep(
    base: &Model,
    data: &Dataset,
    capacities: &[usize],
    mut on_step: impl FnMut(usize, &LossReport),
) -> Result<Vec<(Model, CapacityRow)>> {
    let mut out = Vec::with_capacity(capacities.len());
    for &bits in capacities {
        let mut cfg = base.config.clone();
        cfg.codec.payload_bits = bits;
        cfg.validate()?;
        let mut streams = Streams::new(cfg.seed);
        let mut model = Model::new(&cfg, &mut streams.init)?;
        copy_vocoder(base, &mut model)?;
        finetune(&mut model, data, &mut streams.finetune, |r| on_step(bits, r))?;
        let row = capacity_row(&model, data, cfg.eval.payloads, streams.eval_seed)?;
        out.push((model, row));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::RunConfig;
    use crate::io::synth_dataset;
    use crate::vocoder::DenoiserConfig;

    fn tiny() -> RunConfig {
        let mut cfg = RunConfig::default();
        cfg.audio.clip_seconds = 0.128;
        cfg.audio.window_len = 64;
        cfg.audio.hop = 16;
        cfg.audio.n_mels = 8;
        cfg.schedule.steps = 3;
        cfg.vocoder = DenoiserConfig {
            channels: 4,
            blocks: 2,
            dilation_cycle: 2,
            step_embed_dim: 4,
            step_hidden: 8,
        };
        cfg.codec.decoder_channels = vec![4, 8];
        cfg.codec.decoder_hidden = 8;
        cfg.codec.payload_bits = 4;
        cfg.pretrain.segment = 256;
        cfg.pretrain.steps = 3;
        cfg.pretrain.batch = 2;
        cfg.sdft.steps = 3;
        cfg.sdft.batch = 2;
        cfg
    }

    #[test]
    fn crops_line_up_with_conditioning() {
        let cfg = tiny();
        let data = synth_dataset(3, &cfg.audio, &mut Rng::new(1)).unwrap();
        let (s0, cond) = crop_batch(&data, &[2, 0], &[64, 0], 256, 17).unwrap();
        assert_eq!(s0.shape(), &[2, 1, 256]);
        assert_eq!(cond.shape(), &[2, 8, 17]);
        assert_eq!(s0.data()[0], data.clips[2].samples[64]);
        // Frame 4 of clip 2, mel band 3, lands at crop frame 0.
        assert_eq!(cond.data()[3 * 17], data.mels[2].magnitudes.data()[4 * 8 + 3]);
        assert!(crop_batch(&data, &[0], &[8], 256, 17).is_err());
        assert!(crop_batch(&data, &[0], &[1024], 256, 17).is_err());
        let (full, fc) = full_batch(&data, &[1]).unwrap();
        assert_eq!(full.data(), &data.clips[1].samples[..]);
        assert_eq!(fc.shape(), &[1, 8, 1 + 1024 / 16]);
    }

    #[test]
    fn loops_run_and_are_deterministic() {
        let cfg = tiny();
        let data = synth_dataset(4, &cfg.audio, &mut Rng::new(2)).unwrap();
        let run = || {
            let mut rng = Rng::new(5);
            let mut m = Model::new(&cfg, &mut rng).unwrap();
            let pre = pretrain(&mut m, &data, &mut rng, |_, _| {}).unwrap();
            let mut seen = 0;
            let ft = finetune(&mut m, &data, &mut rng, |_| seen += 1).unwrap();
            assert_eq!(seen, 3);
            (pre, ft.iter().map(|r| r.l_total).collect::<Vec<_>>())
        };
        let (a, b) = (run(), run());
        assert_eq!(a, b);
        assert_eq!(a.0.len(), 3);
        assert!(a.1.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn pretraining_rejects_adapted_models() {
        let cfg = tiny();
        let data = synth_dataset(2, &cfg.audio, &mut Rng::new(3)).unwrap();
        let mut rng = Rng::new(4);
        let mut m = Model::new(&cfg, &mut rng).unwrap();
        m.attach_adapters(&mut rng).unwrap();
        assert!(pretrain(&mut m, &data, &mut rng, |_, _| {}).is_err());
    }
}
