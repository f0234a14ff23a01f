//! Parameterized layers shared by the vocoder and the watermark codec.

use crate::autodiff::{ConvGeom, ParamId, ParamStore, Rng, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::lora::LoraAdapter;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerKind {
    Linear,
    Conv1d(ConvGeom),
}

/// A linear or 1-d convolution layer whose weights live in a [`ParamStore`].
///
/// Linear weights are `[out, in]`; convolution kernels are
/// `[out, in / groups, k]`. An attached adapter is folded into the weight
/// on every forward pass.
#[derive(Clone, Debug)]
pub struct Layer {
    pub name: String,
    pub kind: LayerKind,
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub adapter: Option<LoraAdapter>,
}

fn uniform_tensor(shape: &[usize], bound: f64, rng: &mut Rng) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.uniform_range(-bound, bound)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape product")
}

impl Layer {
    /// Linear layer with `U(-1/sqrt(in), 1/sqrt(in))` weights and bias.
    pub fn linear(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize, rng: &mut Rng) -> Result<Self> {
        let bound = 1.0 / (d_in as f64).sqrt();
        let weight = store.insert(format!("{name}.weight"), uniform_tensor(&[d_out, d_in], bound, rng), true)?;
        let bias = store.insert(format!("{name}.bias"), uniform_tensor(&[d_out], bound, rng), true)?;
        Ok(Self {
            name: name.to_string(),
            kind: LayerKind::Linear,
            weight,
            bias: Some(bias),
            adapter: None,
        })
    }

    /// Convolution with `U(-1/sqrt(fan_in), 1/sqrt(fan_in))` init, where
    /// `fan_in = in / groups * k`.
    pub fn conv1d(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        geom: ConvGeom,
        rng: &mut Rng,
    ) -> Result<Self> {
        if geom.groups == 0 || c_in % geom.groups != 0 || c_out % geom.groups != 0 {
            return Err(Error::invalid(format!(
                "{name}: {c_in} -> {c_out} channels not divisible into {} groups",
                geom.groups
            )));
        }
        let fan_in = c_in / geom.groups * k;
        let bound = 1.0 / (fan_in as f64).sqrt();
        let shape = [c_out, c_in / geom.groups, k];
        let weight = store.insert(format!("{name}.weight"), uniform_tensor(&shape, bound, rng), true)?;
        let bias = store.insert(format!("{name}.bias"), uniform_tensor(&[c_out], bound, rng), true)?;
        Ok(Self {
            name: name.to_string(),
            kind: LayerKind::Conv1d(geom),
            weight,
            bias: Some(bias),
            adapter: None,
        })
    }

    /// Redraws the weight from `N(0, 2 / fan_in)` and zeroes the bias, for
    /// layers feeding a ReLU.
    pub fn he_init(&self, store: &mut ParamStore, rng: &mut Rng) {
        let w = &mut store.get_mut(self.weight).value;
        let fan_in: usize = w.shape()[1..].iter().product();
        let std = (2.0 / fan_in as f64).sqrt();
        w.data_mut().iter_mut().for_each(|v| *v = std * rng.normal());
        if let Some(b) = self.bias {
            store.get_mut(b).value.data_mut().fill(0.0);
        }
    }

    pub fn zero_init(&self, store: &mut ParamStore) {
        store.get_mut(self.weight).value.data_mut().fill(0.0);
        if let Some(b) = self.bias {
            store.get_mut(b).value.data_mut().fill(0.0);
        }
    }

    /// `(d_out, d_in)` of the flattened weight matrix.
    pub fn matrix_dims(&self, store: &ParamStore) -> (usize, usize) {
        let s = store.value(self.weight).shape();
        (s[0], s[1..].iter().product())
    }

    /// Weight with any adapter folded in.
    pub fn effective_weight(&self, tape: &mut Tape) -> Result<Var> {
        let w = tape.param(self.weight);
        match &self.adapter {
            None => Ok(w),
            Some(adapter) => {
                let shape = tape.shape(w).to_vec();
                let delta = adapter.delta(tape)?;
                let delta = tape.reshape(delta, shape)?;
                tape.add(w, delta)
            }
        }
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let w = self.effective_weight(tape)?;
        let b = self.bias.map(|b| tape.param(b));
        match self.kind {
            LayerKind::Linear => tape.linear(x, w, b),
            LayerKind::Conv1d(geom) => tape.conv1d(x, w, b, geom),
        }
    }

    /// Ids of the base (non-adapter) parameters.
    pub fn base_params(&self) -> Vec<ParamId> {
        std::iter::once(self.weight).chain(self.bias).collect()
    }
}
