//! The finite-difference gradient suite: every differentiable tape op on
//! small random inputs, plus three end-to-end graphs through the models.

use std::sync::Arc;

use crate::autodiff::{input_gradcheck, param_gradcheck, ConvGeom, ParamStore, Rng, Tape, Tensor, Var};
use crate::codec::{bits_tensor, inject, WatermarkBits};
use crate::config::RunConfig;
use crate::error::Result;
use crate::model::Model;
use crate::sdft::{loss_mel, loss_stft, loss_wea};
use crate::vocoder::{noise_prediction_loss, sample, DenoiserConfig};

/// Central-difference step.
pub const STEP: f64 = 1e-5;
pub const OP_TOLERANCE: f64 = 1e-4;
pub const COMPOSITE_TOLERANCE: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub rel_err: f64,
    pub tolerance: f64,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.rel_err < self.tolerance
    }
}

fn random_t(shape: &[usize], rng: &mut Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), rng.normal_vec(n)).expect("shape matches")
}

type Case<'a> = (&'a str, Tensor, Box<dyn Fn(&mut Tape, Var) -> Result<Var> + 'a>);

/// Every differentiable op, each checked against its input.
pub fn op_checks(seed: u64) -> Result<Vec<CheckResult>> {
    let mut rng = Rng::new(seed);
    let x3 = random_t(&[2, 3, 7], &mut rng);
    let other = random_t(&[2, 3, 7], &mut rng);
    let chan = random_t(&[3], &mut rng);
    let w_conv = random_t(&[4, 3, 3], &mut rng);
    let w_dw = random_t(&[3, 1, 3], &mut rng);
    let bias4 = random_t(&[4], &mut rng);
    let w_lin = random_t(&[5, 7], &mut rng);
    let mat = random_t(&[7, 4], &mut rng);
    let proj = Arc::new(random_t(&[3, 7], &mut rng));
    let targets = Tensor::new([2, 3, 7], (0..42).map(|i| (i % 3 == 0) as u8 as f64).collect()).expect("shape matches");
    let positive = x3.map(|v| v.abs() + 0.5);
    let signal = random_t(&[1, 1, 90], &mut rng);

        let other_c = other.clone();
    let cases: Vec<Case> = vec![
        ("l1_distance", x3.clone(), Box::new(|t, x| {
            let o = t.constant(x3.map(|v| v + 0.25));
            let y = t.tanh(x);
            t.l1_distance(y, o)
        })),
        ("add", x3.clone(), Box::new(move |t, x| {
            let o = t.constant(other_c.clone());
            let y = t.add(x, o)?;
            let y = t.mul(y, y)?;
            Ok(t.sum(y))
        })),
        ("sub_mul_scale", x3.clone(), Box::new(|t, x| {
            let o = t.constant(other.clone());
            let y = t.sub(o, x)?;
            let y = t.mul(y, x)?;
            let y = t.scale(y, -0.7);
            let y = t.add_scalar(y, 2.0);
            Ok(t.sum(y))
        })),
        ("add_channel", x3.clone(), Box::new(|t, x| {
            let v = t.input(chan.clone(), true);
            let y = t.add_channel(x, v)?;
            let y = t.tanh(y);
            Ok(t.sum(y))
        })),
        ("conv_dilated_bias", x3.clone(), Box::new(|t, x| {
            let w = t.constant(w_conv.clone());
            let b = t.constant(bias4.clone());
            let y = t.conv1d(x, w, Some(b), ConvGeom::new(1, 2).with_dilation(2))?;
            let y = t.sigmoid(y);
            t.mean(y, &[0, 1, 2])
        })),
        ("gated_tanh", random_t(&[2, 4, 5], &mut rng).map(|v| 2.0 * v), Box::new(|t, x| {
            let y = t.gated_tanh(x)?;
            let y = t.mul(y, y)?;
            Ok(t.sum(y))
        })),
        ("conv_depthwise_stride", x3.clone(), Box::new(|t, x| {
            let w = t.constant(w_dw.clone());
            let y = t.conv1d(x, w, None, ConvGeom::new(2, 1).with_groups(3))?;
            let y = t.mul(y, y)?;
            Ok(t.sum(y))
        })),
        ("linear_matmul", random_t(&[3, 7], &mut rng), Box::new(|t, x| {
            let w = t.constant(w_lin.clone());
            let y = t.linear(x, w, None)?;
            let m = t.constant(random_t(&[5, 2], &mut Rng::new(8)));
            let z = t.matmul(y, m)?;
            let xm = t.constant(mat.clone());
            let q = t.matmul(x, xm)?;
            let a = t.sum(z);
            let b = t.sum(q);
            let ab = t.mul(a, b)?;
            Ok(ab)
        })),
        ("relu_log", positive.clone(), Box::new(|t, x| {
            let y = t.log(x)?;
            let y = t.relu(y);
            Ok(t.sum(y))
        })),
        ("narrow_shift_reshape", x3.clone(), Box::new(|t, x| {
            let y = t.narrow(x, 2, 1, 5)?;
            let y = t.narrow(y, 1, 1, 2)?;
            let y = t.shift(y, 2);
            let y = t.reshape(y, [20])?;
            let y = t.mul(y, y)?;
            t.mean(y, &[0])
        })),
        ("mean_axes", x3.clone(), Box::new(|t, x| {
            let y = t.tanh(x);
            let y = t.mean(y, &[0, 2])?;
            let y = t.mul(y, y)?;
            Ok(t.sum(y))
        })),
        ("bce", x3.clone(), Box::new(|t, x| t.bce_with_logits(x, &targets))),
        ("project_upsample", x3.clone(), Box::new(|t, x| {
            let y = t.project_last(x, proj.clone())?;
            let y = t.upsample_nearest(y, 4, 10)?;
            let y = t.mul(y, y)?;
            Ok(t.sum(y))
        })),
        ("stft_magnitude", signal.clone(), Box::new(|t, x| {
            let m = t.stft_magnitude(x, 32, 8)?;
            let p = t.mul(m, m)?;
            let p = t.add_scalar(p, 1.0);
            let l = t.log(p)?;
            Ok(t.sum(l))
        })),
    ];
    cases
        .into_iter()
        .map(|(name, x, f)| {
            let rel_err = input_gradcheck(&ParamStore::new(), |t, v| f(t, v), &x, STEP)?;
            Ok(CheckResult {
                name: name.to_string(),
                rel_err,
                tolerance: OP_TOLERANCE,
            })
        })
        .collect()
}

fn tiny_config(seed: u64) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.seed = seed;
    cfg.audio.sample_rate = 4000;
    cfg.audio.clip_seconds = 0.016;
    cfg.audio.window_len = 16;
    cfg.audio.hop = 8;
    cfg.audio.n_mels = 4;
    cfg.schedule.steps = 3;
    cfg.vocoder = DenoiserConfig {
        channels: 4,
        blocks: 2,
        dilation_cycle: 2,
        step_embed_dim: 4,
        step_hidden: 8,
    };
    cfg.codec.payload_bits = 4;
    cfg.codec.decoder_channels = vec![3, 4];
    cfg.codec.decoder_hidden = 6;
    cfg.pretrain.segment = 64;
    cfg
}

/// Gives every adapter a non-zero `B` so the adapter path carries gradient
/// into `A` as well.
fn perturb_adapters(model: &mut Model, rng: &mut Rng) {
    let ids: Vec<_> = model.adapted_layers().iter().filter_map(|l| l.adapter.as_ref().map(|a| a.b)).collect();
    for id in ids {
        model.store.get_mut(id).value.data_mut().iter_mut().for_each(|v| *v = 0.05 * rng.normal());
    }
}

/// Three graphs spanning the models: watermark generation and extraction,
/// the adapted denoiser's base objective, and the spectral losses.
pub fn composite_checks(seed: u64) -> Result<Vec<CheckResult>> {
    let cfg = tiny_config(seed);
    let mut rng = Rng::new(seed);
    let mut model = Model::new(&cfg, &mut rng)?;
    model.attach_adapters(&mut rng)?;
    perturb_adapters(&mut model, &mut rng);
    let len = model.clip_len();
    let clip = crate::dsp::AudioClip::new(rng.normal_vec(len).iter().map(|v| 0.3 * v).collect(), cfg.audio.sample_rate)?;
    let cond = model.conditioning(&[&clip])?;
    let payload = WatermarkBits::random(cfg.codec.payload_bits, &mut rng)?;
    let noise = Tensor::new([1, 1, len], rng.normal_vec(len))?;
    let chain_seed = rng.next_u64();
    let mut results = Vec::new();

    let enc_ids: Vec<_> = model.encoder.layers().iter().map(|l| l.weight).collect();
    let err = param_gradcheck(
        &model.store,
        &enc_ids,
        |t| {
            let bits = t.constant(bits_tensor(std::slice::from_ref(&payload))?);
            let latent = model.encoder.encode(t, bits)?;
            let n = t.constant(noise.clone());
            let x = inject(t, latent, n)?;
            let c = t.constant(cond.clone());
            let y = sample(t, &model.vocoder, x, c, &model.schedule, &mut Rng::new(chain_seed))?;
            let logits = model.decoder.decode(t, y)?;
            loss_wea(t, logits, &payload)
        },
        STEP,
        Some(24),
    )?;
    results.push(CheckResult {
        name: "encode_inject_sample_decode_bce".into(),
        rel_err: err,
        tolerance: COMPOSITE_TOLERANCE,
    });

    let lora_ids: Vec<_> = model
        .adapted_layers()
        .iter()
        .filter_map(|l| l.adapter.as_ref())
        .flat_map(|a| [a.a, a.b])
        .collect();
    let eps = Tensor::new([1, 1, len], rng.normal_vec(len))?;
    let err = param_gradcheck(
        &model.store,
        &lora_ids,
        |t| {
            let x = t.constant(noise.clone());
            let c = t.constant(cond.clone());
            let pred = model.vocoder.forward(t, x, &[2], c)?;
            let target = t.constant(eps.clone());
            noise_prediction_loss(t, pred, target)
        },
        STEP,
        Some(12),
    )?;
    results.push(CheckResult {
        name: "lora_denoiser_noise_loss".into(),
        rel_err: err,
        tolerance: COMPOSITE_TOLERANCE,
    });

    let a = &cfg.audio;
    let reference = Tensor::new([1, 1, len], clip.samples.clone())?;
    let marked = reference.map(|v| 0.8 * v + 0.01);
    let err = input_gradcheck(
        &model.store,
        |t, x| {
            let r = t.constant(reference.clone());
            let m = loss_mel(t, r, x, &model.filterbank, a.window_len, a.hop)?;
            let s = loss_stft(t, r, x, a.window_len, a.hop)?;
            let s = t.scale(s, 0.5);
            t.add(m, s)
        },
        &marked,
        STEP,
    )?;
    results.push(CheckResult {
        name: "spectral_losses".into(),
        rel_err: err,
        tolerance: COMPOSITE_TOLERANCE,
    });
    Ok(results)
}

/// The whole suite, ops first.
pub fn run_suite(seed: u64) -> Result<Vec<CheckResult>> {
    let mut all = op_checks(seed)?;
    all.extend(composite_checks(seed)?);
    Ok(all)
}
