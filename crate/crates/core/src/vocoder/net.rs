use std::f64::consts::FRAC_1_SQRT_2;

use serde::{Deserialize, Serialize};

use crate::autodiff::{ConvGeom, ParamStore, Rng, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::layers::Layer;

pub const ROOT: &str = "vocoder";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DenoiserConfig {
    pub channels: usize,
    pub blocks: usize,
    /// Dilation of block `i` is `2^(i % dilation_cycle)`.
    pub dilation_cycle: usize,
    pub step_embed_dim: usize,
    pub step_hidden: usize,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            channels: 32,
            blocks: 4,
            dilation_cycle: 4,
            step_embed_dim: 32,
            step_hidden: 64,
        }
    }
}

/// Sinusoidal embedding of a diffusion step, `[sin(t w_i), cos(t w_i)]`
/// with `w_i = 10000^(-i / (dim / 2))`.
pub fn step_embedding(t: usize, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for i in 0..half {
        let w = 10000f64.powf(-(i as f64) / half as f64);
        out[i] = (t as f64 * w).sin();
        out[half + i] = (t as f64 * w).cos();
    }
    out
}

#[derive(Clone, Debug)]
pub struct ResidualBlock {
    pub step_proj: Layer,
    pub dilated: Layer,
    pub cond: Layer,
    pub out: Layer,
}

/// Mel-conditioned noise predictor: a stack of gated, dilated residual
/// blocks with a skip path.
#[derive(Clone, Debug)]
pub struct Denoiser {
    pub config: DenoiserConfig,
    pub n_mels: usize,
    pub hop: usize,
    pub step_mlp: [Layer; 2],
    pub input_proj: Layer,
    pub blocks: Vec<ResidualBlock>,
    pub skip_proj: Layer,
    pub output_proj: Layer,
}

impl Denoiser {
    /// Registers freshly initialized weights under `vocoder.*`. The final
    /// output projection starts at zero.
    pub fn new(store: &mut ParamStore, config: &DenoiserConfig, n_mels: usize, hop: usize, rng: &mut Rng) -> Result<Self> {
        let c = config.channels;
        if c == 0 || config.blocks == 0 || config.dilation_cycle == 0 || hop == 0 || n_mels == 0 {
            return Err(Error::invalid("denoiser widths, blocks, cycle, hop and n_mels must be positive"));
        }
        if config.step_embed_dim < 2 || config.step_embed_dim % 2 != 0 {
            return Err(Error::invalid("step embedding dimension must be even and at least 2"));
        }
        let (e, h) = (config.step_embed_dim, config.step_hidden);
        let pw = ConvGeom::default();
        let step_mlp = [
            Layer::linear(store, &format!("{ROOT}.step_mlp.0"), e, h, rng)?,
            Layer::linear(store, &format!("{ROOT}.step_mlp.1"), h, h, rng)?,
        ];
        let input_proj = Layer::conv1d(store, &format!("{ROOT}.input_proj"), 1, c, 1, pw, rng)?;
        let mut blocks = Vec::with_capacity(config.blocks);
        for i in 0..config.blocks {
            let d = 1usize << (i % config.dilation_cycle);
            let p = format!("{ROOT}.blocks.{i}");
            blocks.push(ResidualBlock {
                step_proj: Layer::linear(store, &format!("{p}.step_proj"), h, c, rng)?,
                dilated: Layer::conv1d(
                    store,
                    &format!("{p}.dilated"),
                    c,
                    2 * c,
                    3,
                    ConvGeom::new(1, d).with_dilation(d),
                    rng,
                )?,
                cond: Layer::conv1d(store, &format!("{p}.cond"), n_mels, 2 * c, 1, pw, rng)?,
                out: Layer::conv1d(store, &format!("{p}.out"), c, 2 * c, 1, pw, rng)?,
            });
        }
        let skip_proj = Layer::conv1d(store, &format!("{ROOT}.skip_proj"), c, c, 1, pw, rng)?;
        let output_proj = Layer::conv1d(store, &format!("{ROOT}.output_proj"), c, 1, 1, pw, rng)?;
        output_proj.zero_init(store);
        Ok(Self {
            config: config.clone(),
            n_mels,
            hop,
            step_mlp,
            input_proj,
            blocks,
            skip_proj,
            output_proj,
        })
    }

    /// Every layer in forward order.
    pub fn layers(&self) -> Vec<&Layer> {
        let mut v: Vec<&Layer> = self.step_mlp.iter().collect();
        v.push(&self.input_proj);
        for b in &self.blocks {
            v.extend([&b.step_proj, &b.dilated, &b.cond, &b.out]);
        }
        v.extend([&self.skip_proj, &self.output_proj]);
        v
    }

    pub fn layers_mut(&mut self) -> Vec<&mut Layer> {
        let mut v: Vec<&mut Layer> = self.step_mlp.iter_mut().collect();
        v.push(&mut self.input_proj);
        for b in &mut self.blocks {
            v.extend([&mut b.step_proj, &mut b.dilated, &mut b.cond, &mut b.out]);
        }
        v.extend([&mut self.skip_proj, &mut self.output_proj]);
        v
    }

    pub fn layer_mut(&mut self, name: &str) -> Result<&mut Layer> {
        self.layers_mut()
            .into_iter()
            .find(|l| l.name == name)
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))
    }

    /// Names of the last five convolutions in forward order: the final
    /// block's dilated, conditioning and output convs, then the skip and
    /// output projections.
    pub fn final_convs(&self) -> Vec<String> {
        let last = self.blocks.last().expect("at least one block");
        [&last.dilated, &last.cond, &last.out, &self.skip_proj, &self.output_proj]
            .iter()
            .map(|l| l.name.clone())
            .collect()
    }

    /// Per-block conditioning projections at sample rate for signals of
    /// `len` samples. `cond` is `[B, n_mels, frames]`, one frame per `hop`
    /// samples. Computing these once lets a reverse chain share them.
    pub fn condition(&self, tape: &mut Tape, cond: Var, len: usize) -> Result<Conditioning> {
        match tape.shape(cond) {
            [_, m, f] if *m == self.n_mels => {
                if f * self.hop < len {
                    return Err(Error::shape(
                        "denoiser",
                        format!("{f} conditioning frames at hop {} do not cover {len} samples", self.hop),
                    ));
                }
            }
            s => {
                return Err(Error::shape(
                    "denoiser",
                    format!("conditioning {s:?} does not have {} mel bands", self.n_mels),
                ))
            }
        }
        let mut per_block = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            // Pointwise projection commutes with frame repetition, so it
            // runs at frame rate.
            let cf = block.cond.forward(tape, cond)?;
            per_block.push(tape.upsample_nearest(cf, self.hop, len)?);
        }
        Ok(Conditioning {
            batch: tape.shape(cond)[0],
            len,
            per_block,
        })
    }

    /// Predicts the noise in `x` (`[B, 1, L]`) at `steps` (one per clip, or
    /// one shared step) given raw conditioning `[B, n_mels, frames]`.
    pub fn forward(&self, tape: &mut Tape, x: Var, steps: &[usize], cond: Var) -> Result<Var> {
        let len = match tape.shape(x) {
            [_, 1, l] => *l,
            s => return Err(Error::shape("denoiser", format!("input {s:?} is not [B, 1, L]"))),
        };
        let c = self.condition(tape, cond, len)?;
        self.forward_conditioned(tape, x, steps, &c)
    }

    pub fn forward_conditioned(&self, tape: &mut Tape, x: Var, steps: &[usize], cond: &Conditioning) -> Result<Var> {
        let b = match tape.shape(x) {
            [b, 1, l] if *b == cond.batch && *l == cond.len => *b,
            s => {
                return Err(Error::shape(
                    "denoiser",
                    format!("input {s:?} for conditioning of [{}, _, {}]", cond.batch, cond.len),
                ))
            }
        };
        if steps.is_empty() || (steps.len() != 1 && steps.len() != b) {
            return Err(Error::shape("denoiser", format!("{} steps for batch {b}", steps.len())));
        }
        let c = self.config.channels;
        let e = self.config.step_embed_dim;

        let emb: Vec<f64> = steps.iter().flat_map(|&t| step_embedding(t, e)).collect();
        let emb = tape.constant(Tensor::new([steps.len(), e], emb)?);
        let hid = self.step_mlp[0].forward(tape, emb)?;
        let hid = tape.relu(hid);
        let hid = self.step_mlp[1].forward(tape, hid)?;
        let hid = tape.relu(hid);

        let h = self.input_proj.forward(tape, x)?;
        let mut h = tape.relu(h);
        let mut skip: Option<Var> = None;
        for (block, &cs) in self.blocks.iter().zip(&cond.per_block) {
            let mut sv = block.step_proj.forward(tape, hid)?;
            if steps.len() == 1 {
                sv = tape.reshape(sv, [c])?;
            }
            let y = tape.add_channel(h, sv)?;
            let y = block.dilated.forward(tape, y)?;
            let y = tape.add(y, cs)?;
            let y = tape.gated_tanh(y)?;
            let y = block.out.forward(tape, y)?;
            let res = tape.narrow(y, 1, 0, c)?;
            let sk = tape.narrow(y, 1, c, c)?;
            let merged = tape.add(h, res)?;
            h = tape.scale(merged, FRAC_1_SQRT_2);
            skip = Some(match skip {
                None => sk,
                Some(acc) => tape.add(acc, sk)?,
            });
        }
        let s = tape.scale(skip.expect("blocks > 0"), 1.0 / (self.blocks.len() as f64).sqrt());
        let s = self.skip_proj.forward(tape, s)?;
        let s = tape.relu(s);
        self.output_proj.forward(tape, s)
    }
}

/// Conditioning already projected for every residual block.
#[derive(Clone, Debug)]
pub struct Conditioning {
    pub batch: usize,
    pub len: usize,
    pub per_block: Vec<Var>,
}
