//! Low-rank adapters: `W = W_G + s * B A` beside a frozen base weight.
//!
//! A convolution kernel `[out, in / groups, k]` is adapted through its
//! flattened `[out, in / groups * k]` matrix view. `A` starts Gaussian
//! (std 0.01) and `B` starts at zero, so a fresh adapter is an exact no-op.

use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamId, ParamStore, Rng, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::layers::{Layer, LayerKind};

pub const DEFAULT_RANK: usize = 4;
pub const DEFAULT_ALPHA: f64 = 16.0;
pub const A_INIT_STD: f64 = 0.01;

/// How `alpha` turns into the multiplier on `B A`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LoraScaling {
    /// `alpha / r`.
    #[default]
    AlphaOverRank,
    /// `alpha` as written, independent of rank.
    Alpha,
}

#[derive(Clone, Debug)]
pub struct LoraAdapter {
    /// `[r, d_in]`.
    pub a: ParamId,
    /// `[d_out, r]`.
    pub b: ParamId,
    pub rank: usize,
    pub alpha: f64,
    pub scaling: LoraScaling,
}

impl LoraAdapter {
    pub fn scale(&self) -> f64 {
        match self.scaling {
            LoraScaling::AlphaOverRank => self.alpha / self.rank as f64,
            LoraScaling::Alpha => self.alpha,
        }
    }

    /// `s * B A` as a `[d_out, d_in]` node.
    pub fn delta(&self, tape: &mut Tape) -> Result<Var> {
        let a = tape.param(self.a);
        let b = tape.param(self.b);
        let ba = tape.matmul(b, a)?;
        Ok(tape.scale(ba, self.scale()))
    }

    /// Dense `s * B A` from the stored values.
    pub fn delta_tensor(&self, store: &ParamStore) -> Tensor {
        let (a, b) = (store.value(self.a), store.value(self.b));
        let (d_out, r, d_in) = (b.shape()[0], self.rank, a.shape()[1]);
        let s = self.scale();
        let mut out = Tensor::zeros([d_out, d_in]);
        for o in 0..d_out {
            for i in 0..d_in {
                let mut acc = 0.0;
                for k in 0..r {
                    acc += b.data()[o * r + k] * a.data()[k * d_in + i];
                }
                out.data_mut()[o * d_in + i] = s * acc;
            }
        }
        out
    }
}

pub fn adapter_param_names(layer_name: &str) -> (String, String) {
    (format!("lora.{layer_name}.A"), format!("lora.{layer_name}.B"))
}

/// Freezes `layer`'s base parameters and attaches a fresh adapter.
pub fn attach(
    store: &mut ParamStore,
    layer: &mut Layer,
    rank: usize,
    alpha: f64,
    scaling: LoraScaling,
    rng: &mut Rng,
) -> Result<()> {
    if rank == 0 {
        return Err(Error::invalid("LoRA rank must be at least 1"));
    }
    if layer.adapter.is_some() {
        return Err(Error::invalid(format!("layer `{}` already has an adapter", layer.name)));
    }
    if let LayerKind::Conv1d(geom) = layer.kind {
        if geom.groups != 1 {
            return Err(Error::invalid(format!(
                "layer `{}`: adapters on grouped convolutions are not supported",
                layer.name
            )));
        }
    }
    let (d_out, d_in) = layer.matrix_dims(store);
    let (a_name, b_name) = adapter_param_names(&layer.name);
    let a_init = Tensor::new([rank, d_in], (0..rank * d_in).map(|_| A_INIT_STD * rng.normal()).collect())?;
    let a = store.insert(a_name, a_init, true)?;
    let b = store.insert(b_name, Tensor::zeros([d_out, rank]), true)?;
    for id in layer.base_params() {
        let p = store.get_mut(id);
        p.trainable = false;
        p.grad = None;
    }
    layer.adapter = Some(LoraAdapter {
        a,
        b,
        rank,
        alpha,
        scaling,
    });
    Ok(())
}

/// Re-binds an adapter whose tensors already exist in `store` (e.g. after
/// loading a checkpoint) and freezes the base.
pub fn rebind(store: &mut ParamStore, layer: &mut Layer, alpha: f64, scaling: LoraScaling) -> Result<()> {
    let (a_name, b_name) = adapter_param_names(&layer.name);
    let a = store.id(&a_name)?;
    let b = store.id(&b_name)?;
    let rank = store.value(a).shape()[0];
    for id in layer.base_params() {
        store.get_mut(id).trainable = false;
    }
    layer.adapter = Some(LoraAdapter {
        a,
        b,
        rank,
        alpha,
        scaling,
    });
    Ok(())
}

/// Folds the adapter into the base weight, removes the adapter tensors and
/// leaves a plain layer. The base stays frozen.
pub fn merge(store: &mut ParamStore, layer: &mut Layer) -> Result<()> {
    let Some(adapter) = layer.adapter.take() else {
        return Ok(());
    };
    let delta = adapter.delta_tensor(store);
    let w = &mut store.get_mut(layer.weight).value;
    for (v, d) in w.data_mut().iter_mut().zip(delta.data()) {
        *v += d;
    }
    store.remove(adapter.a);
    store.remove(adapter.b);
    Ok(())
}

/// `sum r * (d_in + d_out)` over the adapted layers.
pub fn trainable_param_count<'a>(store: &ParamStore, layers: impl IntoIterator<Item = &'a Layer>) -> usize {
    layers
        .into_iter()
        .filter_map(|l| l.adapter.as_ref().map(|a| (l, a)))
        .map(|(l, a)| {
            let (d_out, d_in) = l.matrix_dims(store);
            a.rank * (d_in + d_out)
        })
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::ConvGeom;

    fn linear_setup(d_in: usize, d_out: usize, seed: u64) -> (ParamStore, Layer, Rng) {
        let mut rng = Rng::new(seed);
        let mut store = ParamStore::new();
        let layer = Layer::linear(&mut store, "fc", d_in, d_out, &mut rng).unwrap();
        (store, layer, rng)
    }

    fn randomize(store: &mut ParamStore, id: ParamId, rng: &mut Rng) {
        for v in store.get_mut(id).value.data_mut() {
            *v = rng.normal();
        }
    }

    fn run(store: &ParamStore, layer: &Layer, x: &Tensor) -> Tensor {
        let mut tape = Tape::new(store);
        let xv = tape.constant(x.clone());
        let y = layer.forward(&mut tape, xv).unwrap();
        tape.value(y).clone()
    }

    #[test]
    fn defaults_match_published_settings() {
        assert_eq!((DEFAULT_RANK, DEFAULT_ALPHA), (4, 16.0));
    }

    #[test]
    fn fresh_adapter_is_exactly_neutral() {
        let (mut store, mut layer, mut rng) = linear_setup(4, 3, 1);
        let x = Tensor::new([2, 4], rng.normal_vec(8)).unwrap();
        let before = run(&store, &layer, &x);
        attach(&mut store, &mut layer, 4, 16.0, LoraScaling::AlphaOverRank, &mut rng).unwrap();
        assert!(layer.adapter.as_ref().unwrap().delta_tensor(&store).data().iter().all(|&v| v == 0.0));
        assert_eq!(run(&store, &layer, &x), before);
        // Perturbing only A keeps B A = 0.
        let a = layer.adapter.as_ref().unwrap().a;
        randomize(&mut store, a, &mut rng);
        assert_eq!(run(&store, &layer, &x), before);
        assert!(attach(&mut store, &mut layer, 4, 16.0, LoraScaling::AlphaOverRank, &mut rng).is_err());
    }

    #[test]
    fn adapted_forward_matches_dense_oracle() {
        let (mut store, mut layer, mut rng) = linear_setup(4, 3, 2);
        attach(&mut store, &mut layer, 2, 16.0, LoraScaling::AlphaOverRank, &mut rng).unwrap();
        let ad = layer.adapter.clone().unwrap();
        randomize(&mut store, ad.a, &mut rng);
        randomize(&mut store, ad.b, &mut rng);
        let x = Tensor::new([1, 4], rng.normal_vec(4)).unwrap();
        let got = run(&store, &layer, &x);
        // y = (W_G + (alpha/r) B A) x + bias, by explicit loops.
        let (w, a, b, bias) = (
            store.value(layer.weight),
            store.value(ad.a),
            store.value(ad.b),
            store.value(layer.bias.unwrap()),
        );
        for o in 0..3 {
            let mut y = bias.data()[o];
            for i in 0..4 {
                let mut ba = 0.0;
                for k in 0..2 {
                    ba += b.data()[o * 2 + k] * a.data()[k * 4 + i];
                }
                y += (w.data()[o * 4 + i] + 8.0 * ba) * x.data()[i];
            }
            assert!((got.data()[o] - y).abs() < 1e-12);
        }
    }

    #[test]
    fn gradient_reaches_only_adapter() {
        let (mut store, mut layer, mut rng) = linear_setup(4, 3, 3);
        attach(&mut store, &mut layer, 4, 16.0, LoraScaling::AlphaOverRank, &mut rng).unwrap();
        let ad = layer.adapter.clone().unwrap();
        let x = Tensor::new([2, 4], rng.normal_vec(8)).unwrap();
        let mut tape = Tape::new(&store);
        let xv = tape.constant(x);
        let y = layer.forward(&mut tape, xv).unwrap();
        let y = tape.mul(y, y).unwrap();
        let loss = tape.sum(y);
        let g = tape.backward(loss).unwrap();
        assert!(g.param(layer.weight).is_none());
        assert!(g.param(layer.bias.unwrap()).is_none());
        assert!(g.param(ad.b).is_some());
        // With B = 0 the A-gradient is exactly zero but still present.
        assert!(g.param(ad.a).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn merge_preserves_outputs() {
        let mut rng = Rng::new(4);
        let mut store = ParamStore::new();
        let mut conv = Layer::conv1d(&mut store, "conv", 3, 5, 3, ConvGeom::new(1, 1), &mut rng).unwrap();
        let base_w = store.value(conv.weight).clone();
        attach(&mut store, &mut conv, 4, 16.0, LoraScaling::AlphaOverRank, &mut rng).unwrap();

        // Merging a fresh adapter leaves the weights bit-identical.
        let mut fresh = conv.clone();
        let mut fresh_store = store.clone();
        merge(&mut fresh_store, &mut fresh).unwrap();
        assert_eq!(fresh_store.value(fresh.weight), &base_w);

        let ad = conv.adapter.clone().unwrap();
        randomize(&mut store, ad.a, &mut rng);
        randomize(&mut store, ad.b, &mut rng);
        let x = Tensor::new([2, 3, 11], rng.normal_vec(66)).unwrap();
        let adapted = run(&store, &conv, &x);
        merge(&mut store, &mut conv).unwrap();
        assert!(conv.adapter.is_none());
        assert!(!store.contains("lora.conv.A"));
        let merged = run(&store, &conv, &x);
        assert!(adapted.max_abs_diff(&merged) < 1e-9);

        // Merge then attach fresh reproduces the adapted outputs.
        attach(&mut store, &mut conv, 4, 16.0, LoraScaling::AlphaOverRank, &mut rng).unwrap();
        assert_eq!(run(&store, &conv, &x), merged);
    }

    #[test]
    fn parameter_count_formula() {
        let (mut store, mut layer, mut rng) = linear_setup(32, 64, 5);
        assert_eq!(trainable_param_count(&store, [&layer]), 0);
        attach(&mut store, &mut layer, 4, 16.0, LoraScaling::AlphaOverRank, &mut rng).unwrap();
        assert_eq!(trainable_param_count(&store, [&layer]), 384);
        let (mut store2, mut layer2, mut rng2) = linear_setup(32, 64, 5);
        attach(&mut store2, &mut layer2, 8, 16.0, LoraScaling::AlphaOverRank, &mut rng2).unwrap();
        assert_eq!(trainable_param_count(&store2, [&layer2]), 768);
    }

    #[test]
    fn grouped_conv_is_rejected() {
        let mut rng = Rng::new(6);
        let mut store = ParamStore::new();
        let mut dw = Layer::conv1d(&mut store, "dw", 4, 4, 3, ConvGeom::new(1, 1).with_groups(4), &mut rng).unwrap();
        assert!(attach(&mut store, &mut dw, 2, 16.0, LoraScaling::AlphaOverRank, &mut rng).is_err());
    }

    #[test]
    fn scaling_modes() {
        let (mut store, mut layer, mut rng) = linear_setup(4, 3, 7);
        attach(&mut store, &mut layer, 4, 16.0, LoraScaling::Alpha, &mut rng).unwrap();
        assert_eq!(layer.adapter.as_ref().unwrap().scale(), 16.0);
        let (mut store, mut layer, mut rng) = linear_setup(4, 3, 7);
        attach(&mut store, &mut layer, 4, 16.0, LoraScaling::AlphaOverRank, &mut rng).unwrap();
        assert_eq!(layer.adapter.as_ref().unwrap().scale(), 4.0);
    }

    /// With alpha / r scaling, an update expressed at rank r and at rank 2r
    /// (the same Delta W spread over twice the factors) yields identical
    /// outputs, so the probe's argmax cannot change.
    #[test]
    fn same_delta_at_different_ranks_gives_same_outputs() {
        let mut rng = Rng::new(8);
        let (mut s1, mut l1, mut r1) = linear_setup(5, 4, 9);
        let (mut s2, mut l2, mut r2) = linear_setup(5, 4, 9);
        attach(&mut s1, &mut l1, 2, 16.0, LoraScaling::AlphaOverRank, &mut r1).unwrap();
        attach(&mut s2, &mut l2, 4, 16.0, LoraScaling::AlphaOverRank, &mut r2).unwrap();
        let (a1, b1) = (l1.adapter.clone().unwrap(), l2.adapter.clone().unwrap());
        let a = rng.normal_vec(2 * 5);
        let b = rng.normal_vec(4 * 2);
        s1.get_mut(a1.a).value.data_mut().copy_from_slice(&a);
        s1.get_mut(a1.b).value.data_mut().copy_from_slice(&b);
        // Rank 4: A stacked twice, B duplicated; scale halves, sum doubles.
        let a2: Vec<f64> = a.iter().chain(&a).copied().collect();
        let b2: Vec<f64> = (0..4).flat_map(|o| [b[o * 2], b[o * 2 + 1], b[o * 2], b[o * 2 + 1]]).collect();
        s2.get_mut(b1.a).value.data_mut().copy_from_slice(&a2);
        s2.get_mut(b1.b).value.data_mut().copy_from_slice(&b2);
        let probe = Tensor::new([1, 5], vec![0.3, -1.0, 0.5, 2.0, -0.7]).unwrap();
        let y1 = run(&s1, &l1, &probe);
        let y2 = run(&s2, &l2, &probe);
        assert!(y1.max_abs_diff(&y2) < 1e-12);
        let argmax = |t: &Tensor| (0..4).max_by(|&i, &j| t.data()[i].total_cmp(&t.data()[j])).unwrap();
        assert_eq!(argmax(&y1), argmax(&y2));
    }
}
