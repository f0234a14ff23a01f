//! Binary tensor container.
//!
//! Layout, all integers little-endian `u32`:
//! `"SLDO"`, version, config length, config JSON, tensor count, then per
//! tensor name length, name, rank and dims; then every tensor's data as
//! `f32` in manifest order; finally a CRC32 of all preceding bytes.

use std::path::Path;

use crate::autodiff::{Rng, Tensor};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::model::Model;

pub const MAGIC: &[u8; 4] = b"SLDO";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config_json: String,
    pub tensors: Vec<(String, Tensor)>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::invalid(format!("{v} does not fit the checkpoint's u32 fields")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

impl Checkpoint {
    pub fn from_model(model: &Model) -> Self {
        Self {
            config_json: model.config.to_json(),
            tensors: model.store.iter().map(|(_, p)| (p.name.clone(), p.value.clone())).collect(),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        put_u32(&mut out, VERSION as usize)?;
        put_u32(&mut out, self.config_json.len())?;
        out.extend_from_slice(self.config_json.as_bytes());
        put_u32(&mut out, self.tensors.len())?;
        let mut seen = std::collections::HashSet::new();
        for (name, t) in &self.tensors {
            if !seen.insert(name.as_str()) {
                return Err(Error::DuplicateName(name.clone()));
            }
            put_u32(&mut out, name.len())?;
            out.extend_from_slice(name.as_bytes());
            put_u32(&mut out, t.ndim())?;
            for &d in t.shape() {
                put_u32(&mut out, d)?;
            }
        }
        for (_, t) in &self.tensors {
            for &v in t.data() {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (config_json, manifest, data_start) = parse_header(bytes)?;
        let mut pos = data_start;
        let tensors = manifest
            .into_iter()
            .map(|e| {
                let n: usize = e.shape.iter().product();
                let end = pos + 4 * n;
                let data = bytes[pos..end]
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
                    .collect();
                pos = end;
                Ok((e.name, Tensor::new(e.shape, data)?))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { config_json, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| Error::Format {
            what: "checkpoint",
            detail: format!("truncated at byte {}", self.pos),
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()?;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Format {
            what: "checkpoint",
            detail: "string is not UTF-8".into(),
        })
    }
}

/// Validates magic, version and checksum; returns the config, manifest and
/// the offset of the tensor data.
fn parse_header(bytes: &[u8]) -> Result<(String, Vec<ManifestEntry>, usize)> {
    if bytes.len() < 12 || &bytes[..4] != MAGIC {
        return Err(Error::Format {
            what: "checkpoint",
            detail: "missing SLDO magic".into(),
        });
    }
    let body = &bytes[..bytes.len() - 4];
    let stored = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().expect("4 bytes"));
    let computed = crc32fast::hash(body);
    let mut r = Reader { bytes: body, pos: 4 };
    let version = r.u32()? as u32;
    if version != VERSION {
        return Err(Error::Version {
            found: version,
            expected: VERSION,
        });
    }
    if stored != computed {
        return Err(Error::Checksum { stored, computed });
    }
    let config_json = r.string()?;
    let count = r.u32()?;
    let mut manifest = Vec::with_capacity(count.min(1 << 16));
    let mut total = 0usize;
    for _ in 0..count {
        let name = r.string()?;
        let ndim = r.u32()?;
        let shape = (0..ndim).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
        total = total.saturating_add(shape.iter().product::<usize>());
        manifest.push(ManifestEntry { name, shape });
    }
    if total.saturating_mul(4) != body.len() - r.pos {
        return Err(Error::Format {
            what: "checkpoint",
            detail: format!("manifest needs {} data bytes, found {}", total * 4, body.len() - r.pos),
        });
    }
    Ok((config_json, manifest, r.pos))
}

/// Config and manifest without decoding tensor data.
pub fn inspect(bytes: &[u8]) -> Result<(String, Vec<ManifestEntry>)> {
    let (c, m, _) = parse_header(bytes)?;
    Ok((c, m))
}

/// Copies checkpoint tensors into `model`. Every model parameter must be
/// present with a matching shape, and the checkpoint may hold nothing else.
pub fn apply_to_model(ckpt: &Checkpoint, model: &mut Model) -> Result<()> {
    let mut by_name: std::collections::HashMap<&str, &Tensor> =
        ckpt.tensors.iter().map(|(n, t)| (n.as_str(), t)).collect();
    let mut missing = Vec::new();
    let ids: Vec<_> = model.store.iter().map(|(id, p)| (id, p.name.clone())).collect();
    for (id, name) in ids {
        match by_name.remove(name.as_str()) {
            None => missing.push(name),
            Some(t) => {
                let p = model.store.get_mut(id);
                if p.value.shape() != t.shape() {
                    return Err(Error::shape(
                        "checkpoint",
                        format!("`{name}` is {:?} in the model but {:?} on disk", p.value.shape(), t.shape()),
                    ));
                }
                p.value = t.clone();
            }
        }
    }
    if !missing.is_empty() {
        return Err(Error::MissingTensors(missing));
    }
    if !by_name.is_empty() {
        let mut extra: Vec<_> = by_name.into_keys().collect();
        extra.sort();
        return Err(Error::Format {
            what: "checkpoint",
            detail: format!("tensors not in the model: {}", extra.join(", ")),
        });
    }
    Ok(())
}

/// Rebuilds the model described by the embedded config and loads its
/// weights, re-attaching adapters when the checkpoint carries them.
pub fn load_model(ckpt: &Checkpoint) -> Result<Model> {
    let config = RunConfig::from_json(&ckpt.config_json)?;
    let mut rng = Rng::new(0);
    let mut model = Model::new(&config, &mut rng)?;
    if ckpt.tensors.iter().any(|(n, _)| n.starts_with("lora.")) {
        model.attach_adapters(&mut rng)?;
    }
    apply_to_model(ckpt, &mut model)?;
    Ok(model)
}

pub fn save_model(model: &Model, path: &Path) -> Result<()> {
    Checkpoint::from_model(model).save(path)
}

pub fn load_model_file(path: &Path) -> Result<Model> {
    load_model(&Checkpoint::load(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vocoder::DenoiserConfig;

    fn small() -> RunConfig {
        let mut cfg = RunConfig::default();
        cfg.audio.clip_seconds = 0.032;
        cfg.audio.window_len = 64;
        cfg.audio.hop = 16;
        cfg.audio.n_mels = 8;
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
        cfg.pretrain.segment = 128;
        cfg
    }

    #[test]
    fn save_load_identity() {
        let mut rng = Rng::new(1);
        let mut m = Model::new(&small(), &mut rng).unwrap();
        m.attach_adapters(&mut rng).unwrap();
        let b = m.adapted_layers()[0].adapter.clone().unwrap().b;
        m.store.get_mut(b).value.data_mut().iter_mut().for_each(|v| *v = rng.normal());
        let bytes = Checkpoint::from_model(&m).to_bytes().unwrap();
        let ck = Checkpoint::from_bytes(&bytes).unwrap();
        let loaded = load_model(&ck).unwrap();
        assert!(loaded.has_adapters());
        for ((_, a), (_, b)) in m.store.iter().zip(loaded.store.iter()) {
            assert_eq!(a.name, b.name);
            let rounded = a.value.map(|v| v as f32 as f64);
            assert_eq!(rounded, b.value);
        }
        // A second round trip is bit-exact.
        assert_eq!(Checkpoint::from_model(&loaded).to_bytes().unwrap(), bytes);
    }

    #[test]
    fn corruption_and_version_are_detected() {
        let m = Model::new(&small(), &mut Rng::new(2)).unwrap();
        let bytes = Checkpoint::from_model(&m).to_bytes().unwrap();
        let mut bad = bytes.clone();
        let mid = bad.len() / 2;
        bad[mid] ^= 0x40;
        assert!(matches!(Checkpoint::from_bytes(&bad), Err(Error::Checksum { .. })));
        let mut v2 = bytes.clone();
        v2[4] = 2;
        assert!(matches!(Checkpoint::from_bytes(&v2), Err(Error::Version { found: 2, .. })));
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 9]).is_err());
        assert!(Checkpoint::from_bytes(b"NOPE").is_err());
    }

    #[test]
    fn missing_tensors_are_listed() {
        let m = Model::new(&small(), &mut Rng::new(3)).unwrap();
        let mut ck = Checkpoint::from_model(&m);
        ck.tensors.retain(|(n, _)| !n.starts_with("enc."));
        let err = load_model(&ck).unwrap_err();
        match err {
            Error::MissingTensors(names) => {
                assert_eq!(names, ["enc.linear.weight", "enc.linear.bias", "enc.conv.weight", "enc.conv.bias"]);
            }
            other => panic!("{other}"),
        }
        let mut ck = Checkpoint::from_model(&m);
        ck.tensors.push(("stray".into(), Tensor::scalar(1.0)));
        assert!(load_model(&ck).is_err());
        let mut ck = Checkpoint::from_model(&m);
        ck.tensors.push(("stray".into(), Tensor::scalar(1.0)));
        ck.tensors.push(("stray".into(), Tensor::scalar(1.0)));
        assert!(matches!(ck.to_bytes(), Err(Error::DuplicateName(_))));
    }

    #[test]
    fn inspect_reads_manifest() {
        let m = Model::new(&small(), &mut Rng::new(4)).unwrap();
        let bytes = Checkpoint::from_model(&m).to_bytes().unwrap();
        let (cfg, manifest) = inspect(&bytes).unwrap();
        assert_eq!(RunConfig::from_json(&cfg).unwrap(), m.config);
        assert_eq!(manifest.len(), m.store.len());
        assert_eq!(manifest[0].name, "vocoder.step_mlp.0.weight");
        assert_eq!(manifest[0].shape, vec![8, 4]);
    }
}
