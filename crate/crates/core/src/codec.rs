//! Payload encoder, latent injection, and the length-agnostic decoder.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::autodiff::{ConvGeom, ParamStore, Rng, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::layers::Layer;

/// A non-empty bit string.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct WatermarkBits(Vec<u8>);

impl WatermarkBits {
    pub fn new(bits: Vec<u8>) -> Result<Self> {
        if bits.is_empty() {
            return Err(Error::invalid("payload must hold at least one bit"));
        }
        if let Some(b) = bits.iter().find(|&&b| b > 1) {
            return Err(Error::invalid(format!("payload bit {b} is not 0 or 1")));
        }
        Ok(Self(bits))
    }

    pub fn random(len: usize, rng: &mut Rng) -> Result<Self> {
        Self::new((0..len).map(|_| rng.bernoulli() as u8).collect())
    }

    /// Parses MSB-first hex into exactly `len` bits. Any bits past `len` in
    /// the last digit are padding and must be zero.
    pub fn from_hex(hex: &str, len: usize) -> Result<Self> {
        let hex = hex.trim().trim_start_matches("0x");
        let digits = len.div_ceil(4);
        if hex.len() != digits {
            return Err(Error::invalid(format!(
                "{len}-bit payload needs {digits} hex digits, got {}",
                hex.len()
            )));
        }
        let mut bits = Vec::with_capacity(digits * 4);
        for ch in hex.chars() {
            let v = ch
                .to_digit(16)
                .ok_or_else(|| Error::invalid(format!("`{ch}` is not a hex digit")))?;
            bits.extend((0..4).rev().map(|k| ((v >> k) & 1) as u8));
        }
        if bits[len..].iter().any(|&b| b != 0) {
            return Err(Error::invalid("padding bits beyond the payload length must be zero"));
        }
        bits.truncate(len);
        Self::new(bits)
    }

    /// MSB-first hex, zero-padded to whole digits.
    pub fn to_hex(&self) -> String {
        self.0
            .chunks(4)
            .map(|c| {
                let v = (0..4).fold(0u32, |acc, k| (acc << 1) | *c.get(k).unwrap_or(&0) as u32);
                char::from_digit(v, 16).expect("nibble")
            })
            .collect()
    }

    pub fn bits(&self) -> &[u8] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.0.iter().map(|&b| b as f64).collect()
    }
}

impl fmt::Display for WatermarkBits {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for b in &self.0 {
            write!(f, "{b}")?;
        }
        Ok(())
    }
}

/// Stacks payloads into a `[B, l]` tensor.
pub fn bits_tensor(payloads: &[WatermarkBits]) -> Result<Tensor> {
    let l = payloads.first().map(|p| p.len()).unwrap_or(0);
    if l == 0 || payloads.iter().any(|p| p.len() != l) {
        return Err(Error::invalid("payload batch must be non-empty with equal lengths"));
    }
    Tensor::new([payloads.len(), l], payloads.iter().flat_map(|p| p.to_f64()).collect())
}

/// Bit `i` is 1 iff `logits[i] > 0`; a zero logit reads as 0.
pub fn logits_to_bits(logits: &[f64]) -> Result<WatermarkBits> {
    WatermarkBits::new(logits.iter().map(|&z| (z > 0.0) as u8).collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CodecConfig {
    pub payload_bits: usize,
    /// Output channels of each depthwise-separable layer.
    pub decoder_channels: Vec<usize>,
    pub decoder_hidden: usize,
}

impl Default for CodecConfig {
    fn default() -> Self {
        Self {
            payload_bits: 16,
            decoder_channels: vec![16, 16, 32, 32, 64, 64, 64],
            decoder_hidden: 128,
        }
    }
}

/// `bits -> linear -> ReLU -> [B, 1, L] -> conv(k3, p1)`.
#[derive(Clone, Debug)]
pub struct EncoderNet {
    pub payload_bits: usize,
    pub latent_len: usize,
    pub linear: Layer,
    pub conv: Layer,
}

impl EncoderNet {
    pub fn new(store: &mut ParamStore, payload_bits: usize, latent_len: usize, rng: &mut Rng) -> Result<Self> {
        if payload_bits == 0 || latent_len == 0 {
            return Err(Error::invalid("encoder needs positive payload and latent lengths"));
        }
        Ok(Self {
            payload_bits,
            latent_len,
            linear: Layer::linear(store, "enc.linear", payload_bits, latent_len, rng)?,
            conv: Layer::conv1d(store, "enc.conv", 1, 1, 3, ConvGeom::new(1, 1), rng)?,
        })
    }

    /// `[B, l]` bits to a `[B, 1, L]` latent.
    pub fn encode(&self, tape: &mut Tape, bits: Var) -> Result<Var> {
        let b = match tape.shape(bits) {
            [b, l] if *l == self.payload_bits => *b,
            s => {
                return Err(Error::shape(
                    "encode",
                    format!("payload {s:?} for a {}-bit encoder", self.payload_bits),
                ))
            }
        };
        let h = self.linear.forward(tape, bits)?;
        let h = tape.relu(h);
        let h = tape.reshape(h, [b, 1, self.latent_len])?;
        self.conv.forward(tape, h)
    }

    pub fn layers(&self) -> Vec<&Layer> {
        vec![&self.linear, &self.conv]
    }
}

/// Adds the latent to the initial diffusion noise.
pub fn inject(tape: &mut Tape, latent: Var, noise: Var) -> Result<Var> {
    if tape.shape(latent) != tape.shape(noise) {
        return Err(Error::shape(
            "inject",
            format!("latent {:?} vs noise {:?}", tape.shape(latent), tape.shape(noise)),
        ));
    }
    tape.add(latent, noise)
}

#[derive(Clone, Debug)]
pub struct SeparableConv {
    pub depthwise: Layer,
    pub pointwise: Layer,
}

/// Depthwise-separable conv stack, mean over time, then a two-layer head.
/// Weights are He-initialized.
#[derive(Clone, Debug)]
pub struct DecoderNet {
    pub payload_bits: usize,
    pub convs: Vec<SeparableConv>,
    pub head: [Layer; 2],
}

pub const DSC_GEOM: ConvGeom = ConvGeom {
    stride: 2,
    padding: 1,
    dilation: 1,
    groups: 1,
};

impl DecoderNet {
    pub fn new(store: &mut ParamStore, config: &CodecConfig, rng: &mut Rng) -> Result<Self> {
        if config.payload_bits == 0 || config.decoder_channels.is_empty() || config.decoder_hidden == 0 {
            return Err(Error::invalid("decoder needs payload bits, conv channels and a hidden width"));
        }
        let mut convs = Vec::with_capacity(config.decoder_channels.len());
        let mut c_in = 1;
        for (i, &c_out) in config.decoder_channels.iter().enumerate() {
            if c_out == 0 {
                return Err(Error::invalid("decoder channel counts must be positive"));
            }
            convs.push(SeparableConv {
                depthwise: Layer::conv1d(
                    store,
                    &format!("dec.dsc.{i}.depthwise"),
                    c_in,
                    c_in,
                    3,
                    DSC_GEOM.with_groups(c_in),
                    rng,
                )?,
                pointwise: Layer::conv1d(store, &format!("dec.dsc.{i}.pointwise"), c_in, c_out, 1, ConvGeom::default(), rng)?,
            });
            c_in = c_out;
        }
        let head = [
            Layer::linear(store, "dec.head.0", c_in, config.decoder_hidden, rng)?,
            Layer::linear(store, "dec.head.1", config.decoder_hidden, config.payload_bits, rng)?,
        ];
        let dec = Self {
            payload_bits: config.payload_bits,
            convs,
            head,
        };
        // Fourteen stacked convs shrink the signal under the default init.
        for layer in dec.layers() {
            layer.he_init(store, rng);
        }
        Ok(dec)
    }

    /// `[B, 1, L]` audio to the `[B, C]` fixed-length feature.
    pub fn features(&self, tape: &mut Tape, audio: Var) -> Result<Var> {
        match tape.shape(audio) {
            [_, 1, l] if *l >= 1 => {}
            s => return Err(Error::shape("decode", format!("audio {s:?} is not [B, 1, L >= 1]"))),
        }
        let mut h = audio;
        for dsc in &self.convs {
            h = dsc.depthwise.forward(tape, h)?;
            h = dsc.pointwise.forward(tape, h)?;
            h = tape.relu(h);
        }
        tape.mean(h, &[2])
    }

    /// `[B, 1, L]` audio to `[B, l]` logits, for any `L >= 1`.
    pub fn decode(&self, tape: &mut Tape, audio: Var) -> Result<Var> {
        let h = self.features(tape, audio)?;
        let h = self.head[0].forward(tape, h)?;
        let h = tape.relu(h);
        self.head[1].forward(tape, h)
    }

    /// Logits for a single clip without gradient bookkeeping.
    pub fn decode_samples(&self, store: &ParamStore, samples: &[f64]) -> Result<Vec<f64>> {
        let mut tape = Tape::new(store);
        let x = tape.constant(Tensor::new([1, 1, samples.len()], samples.to_vec())?);
        let y = self.decode(&mut tape, x)?;
        Ok(tape.value(y).data().to_vec())
    }

    pub fn layers(&self) -> Vec<&Layer> {
        let mut v: Vec<&Layer> = self.convs.iter().flat_map(|d| [&d.depthwise, &d.pointwise]).collect();
        v.extend(self.head.iter());
        v
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::param_gradcheck;
    use proptest::prelude::{prop_assert_eq, proptest};

    fn decoder(seed: u64) -> (ParamStore, DecoderNet) {
        let mut rng = Rng::new(seed);
        let mut store = ParamStore::new();
        let dec = DecoderNet::new(&mut store, &CodecConfig::default(), &mut rng).unwrap();
        (store, dec)
    }

    #[test]
    fn threshold_rule() {
        assert_eq!(logits_to_bits(&[-3.0, 0.2, 0.0]).unwrap().bits(), &[0, 1, 0]);
        let target = [1u8, 0, 0, 1, 1];
        let sat: Vec<f64> = target.iter().map(|&b| if b == 1 { 40.0 } else { -40.0 }).collect();
        assert_eq!(logits_to_bits(&sat).unwrap().bits(), &target);
        let z = [0.4, -0.1, 2.0, 0.0];
        let scaled: Vec<f64> = z.iter().map(|v| v * 7.5).collect();
        assert_eq!(logits_to_bits(&z).unwrap(), logits_to_bits(&scaled).unwrap());
    }

    #[test]
    fn hex_round_trip_and_padding() {
        let w = WatermarkBits::from_hex("a5f0", 16).unwrap();
        assert_eq!(w.to_string(), "1010010111110000");
        assert_eq!(w.to_hex(), "a5f0");
        let w = WatermarkBits::from_hex("a", 3).unwrap();
        assert_eq!(w.bits(), &[1, 0, 1]);
        assert_eq!(w.to_hex(), "a");
        assert!(WatermarkBits::from_hex("f", 3).is_err());
        assert!(WatermarkBits::from_hex("a5", 16).is_err());
        assert!(WatermarkBits::from_hex("zz", 8).is_err());
        assert!(WatermarkBits::new(vec![0, 2]).is_err());
        assert!(WatermarkBits::new(vec![]).is_err());
    }

    #[test]
    fn zero_encoder_gives_zero_latent() {
        let mut rng = Rng::new(1);
        let mut store = ParamStore::new();
        let enc = EncoderNet::new(&mut store, 16, 4000, &mut rng).unwrap();
        for l in enc.layers() {
            l.zero_init(&mut store);
        }
        let mut tape = Tape::new(&store);
        let bits = bits_tensor(&[WatermarkBits::random(16, &mut rng).unwrap()]).unwrap();
        let b = tape.constant(bits);
        let s = enc.encode(&mut tape, b).unwrap();
        assert_eq!(tape.shape(s), &[1, 1, 4000]);
        assert!(tape.value(s).data().iter().all(|&v| v == 0.0));
        let wrong = tape.constant(Tensor::zeros([1, 8]));
        assert!(enc.encode(&mut tape, wrong).is_err());
    }

    #[test]
    fn encoder_gradient_matches_finite_differences() {
        let mut rng = Rng::new(2);
        let mut store = ParamStore::new();
        let enc = EncoderNet::new(&mut store, 4, 12, &mut rng).unwrap();
        let bits = bits_tensor(&[WatermarkBits::new(vec![1, 0, 1, 1]).unwrap()]).unwrap();
        let err = param_gradcheck(
            &store,
            &[enc.linear.weight, enc.linear.bias.unwrap()],
            |tape| {
                let b = tape.constant(bits.clone());
                let s = enc.encode(tape, b)?;
                tape.mean(s, &[0, 1, 2])
            },
            1e-6,
            None,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn injection_identities() {
        let store = ParamStore::new();
        let mut rng = Rng::new(3);
        let mut tape = Tape::new(&store);
        let s_t = Tensor::new([2, 1, 5], rng.normal_vec(10)).unwrap();
        let n = tape.constant(s_t.clone());
        let z = tape.constant(Tensor::zeros([2, 1, 5]));
        let y = inject(&mut tape, z, n).unwrap();
        assert_eq!(tape.value(y), &s_t);
        let neg = tape.constant(s_t.map(|v| -v));
        let y = inject(&mut tape, neg, n).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
        let bad = tape.constant(Tensor::zeros([2, 1, 4]));
        assert!(inject(&mut tape, bad, n).is_err());
        // Slicing the batch before or after injection agrees.
        let sig = tape.constant(Tensor::new([2, 1, 5], rng.normal_vec(10)).unwrap());
        let whole = inject(&mut tape, sig, n).unwrap();
        let whole1 = tape.narrow(whole, 0, 1, 1).unwrap();
        let (s1, n1) = (tape.narrow(sig, 0, 1, 1).unwrap(), tape.narrow(n, 0, 1, 1).unwrap());
        let part = inject(&mut tape, s1, n1).unwrap();
        assert_eq!(tape.value(whole1), tape.value(part));
    }

    #[test]
    fn decoder_output_is_length_agnostic() {
        let (store, dec) = decoder(4);
        let mut rng = Rng::new(5);
        for len in [1, 100, 173, 2048, 4000, 4096, 8000, 16000] {
            let logits = dec.decode_samples(&store, &rng.normal_vec(len)).unwrap();
            assert_eq!(logits.len(), 16, "len {len}");
        }
    }

    /// Direct loops for one separable layer: depthwise k3 s2 p1, pointwise
    /// 1x1, ReLU.
    fn dense_dsc(x: &[Vec<f64>], dw: &Tensor, dwb: &Tensor, pw: &Tensor, pwb: &Tensor) -> Vec<Vec<f64>> {
        let (c_in, len) = (x.len(), x[0].len());
        let out_len = (len + 2 - 3) / 2 + 1;
        let mut d = vec![vec![0.0; out_len]; c_in];
        for c in 0..c_in {
            for o in 0..out_len {
                let mut acc = dwb.data()[c];
                for k in 0..3 {
                    let pos = (2 * o + k) as isize - 1;
                    if pos >= 0 && (pos as usize) < len {
                        acc += dw.data()[c * 3 + k] * x[c][pos as usize];
                    }
                }
                d[c][o] = acc;
            }
        }
        let c_out = pw.shape()[0];
        (0..c_out)
            .map(|co| {
                (0..out_len)
                    .map(|o| {
                        let v = pwb.data()[co] + (0..c_in).map(|c| pw.data()[co * c_in + c] * d[c][o]).sum::<f64>();
                        v.max(0.0)
                    })
                    .collect()
            })
            .collect()
    }

    #[test]
    fn decode_matches_dense_oracle() {
        let (store, dec) = decoder(6);
        let mut rng = Rng::new(7);
        let clip = rng.normal_vec(64);
        let got = dec.decode_samples(&store, &clip).unwrap();
        let mut h = vec![clip];
        for dsc in &dec.convs {
            h = dense_dsc(
                &h,
                store.value(dsc.depthwise.weight),
                store.value(dsc.depthwise.bias.unwrap()),
                store.value(dsc.pointwise.weight),
                store.value(dsc.pointwise.bias.unwrap()),
            );
        }
        let feat: Vec<f64> = h.iter().map(|c| c.iter().sum::<f64>() / c.len() as f64).collect();
        let dense = |layer: &Layer, x: &[f64], relu: bool| -> Vec<f64> {
            let (w, b) = (store.value(layer.weight), store.value(layer.bias.unwrap()));
            (0..w.shape()[0])
                .map(|o| {
                    let v = b.data()[o] + (0..x.len()).map(|i| w.data()[o * x.len() + i] * x[i]).sum::<f64>();
                    if relu {
                        v.max(0.0)
                    } else {
                        v
                    }
                })
                .collect()
        };
        let hid = dense(&dec.head[0], &feat, true);
        let want = dense(&dec.head[1], &hid, false);
        for (g, w) in got.iter().zip(&want) {
            assert!((g - w).abs() < 1e-10);
        }
    }

    #[test]
    fn constant_stub_features() {
        // All weights zero and final pointwise bias v: every frame is v.
        let (mut store, dec) = decoder(8);
        for l in dec.layers() {
            l.zero_init(&mut store);
        }
        let last = dec.convs.last().unwrap().pointwise.bias.unwrap();
        store.get_mut(last).value.data_mut().fill(0.75);
        let mut rng = Rng::new(9);
        let clip = rng.normal_vec(500);
        let reversed: Vec<f64> = clip.iter().rev().copied().collect();
        let feat = |s: &[f64]| {
            let mut tape = Tape::new(&store);
            let x = tape.constant(Tensor::new([1, 1, s.len()], s.to_vec()).unwrap());
            let h = dec.features(&mut tape, x).unwrap();
            tape.value(h).clone()
        };
        let a = feat(&clip);
        assert_eq!(a.shape(), &[1, 64]);
        assert!(a.data().iter().all(|&v| (v - 0.75).abs() < 1e-15));
        assert_eq!(a, feat(&reversed));
    }

    #[test]
    fn separable_equals_constrained_dense_conv() {
        let mut rng = Rng::new(10);
        let mut store = ParamStore::new();
        let dec = DecoderNet::new(&mut store, &CodecConfig::default(), &mut rng).unwrap();
        let dsc = &dec.convs[2]; // 16 -> 32
        let (dw, pw) = (store.value(dsc.depthwise.weight), store.value(dsc.pointwise.weight));
        let (c_in, c_out) = (16, 32);
        // Full kernel with W[o, i, k] = P[o, i] * D[i, k]; bias folds the
        // depthwise bias through the pointwise map.
        let mut full = Tensor::zeros([c_out, c_in, 3]);
        let mut bias = store.value(dsc.pointwise.bias.unwrap()).clone();
        for o in 0..c_out {
            for i in 0..c_in {
                for k in 0..3 {
                    full.data_mut()[(o * c_in + i) * 3 + k] = pw.data()[o * c_in + i] * dw.data()[i * 3 + k];
                }
                bias.data_mut()[o] += pw.data()[o * c_in + i] * store.value(dsc.depthwise.bias.unwrap()).data()[i];
            }
        }
        let x = Tensor::new([2, c_in, 37], rng.normal_vec(2 * c_in * 37)).unwrap();
        let mut tape = Tape::new(&store);
        let xv = tape.constant(x);
        let y = dsc.depthwise.forward(&mut tape, xv).unwrap();
        let y = dsc.pointwise.forward(&mut tape, y).unwrap();
        let (fw, fb) = (tape.constant(full), tape.constant(bias));
        let z = tape.conv1d(xv, fw, Some(fb), DSC_GEOM).unwrap();
        assert!(tape.value(y).max_abs_diff(tape.value(z)) < 1e-12);
    }

    proptest! {
        #[test]
        fn hex_round_trips(bits in proptest::collection::vec(0u8..2, 1..70)) {
            let w = WatermarkBits::new(bits.clone()).unwrap();
            let back = WatermarkBits::from_hex(&w.to_hex(), bits.len()).unwrap();
            prop_assert_eq!(back, w);
        }
    }
}
