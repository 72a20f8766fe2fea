//! Binary checkpoint files.
//!
//! Layout, all integers little-endian `u32`:
//!
//! ```text
//! "VGUN" | version | config_len | config text (key=value lines)
//! entry_count | entries...
//! entry: name_len | name (UTF-8) | kind (u8: 0 learnable, 1 buffer) | tensor dump
//! ```
//!
//! Tensor dumps use the rank/dims/f32 layout of [`Tensor::write_dump`].
//! Entries follow the model's parameter order, then any extra tensors.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{ModelConfig, VigUnet};
use crate::tensor::{read_u32, Float, ParamEntry, ParamKind, RngState, Tensor};

pub const MAGIC: [u8; 4] = *b"VGUN";
pub const VERSION: u32 = 1;
/// Prefix reserved for tensors that are not model parameters.
pub const EXTRA_PREFIX: &str = "extra.";

/// Decoded checkpoint contents.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub entries: Vec<ParamEntry<f32>>,
}

impl Checkpoint {
    pub fn from_model<F: Float>(model: &VigUnet<F>) -> Self {
        Self {
            config: model.config().clone(),
            entries: model
                .store()
                .entries()
                .iter()
                .map(|e| ParamEntry {
                    name: e.name.clone(),
                    kind: e.kind,
                    tensor: e.tensor.cast::<f32>().detached(),
                })
                .collect(),
        }
    }

    /// Attaches a non-parameter tensor (stored as `extra.<name>`).
    pub fn with_extra(mut self, name: &str, tensor: Tensor<f32>) -> Self {
        self.entries.push(ParamEntry {
            name: format!("{EXTRA_PREFIX}{name}"),
            kind: ParamKind::Buffer,
            tensor,
        });
        self
    }

    pub fn extra(&self, name: &str) -> Option<&Tensor<f32>> {
        let full = format!("{EXTRA_PREFIX}{name}");
        self.entries.iter().find(|e| e.name == full).map(|e| &e.tensor)
    }

    pub fn get(&self, name: &str) -> Option<&ParamEntry<f32>> {
        self.entries.iter().find(|e| e.name == name)
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        w.write_all(&MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        let cfg = self.config.to_text();
        w.write_all(&(cfg.len() as u32).to_le_bytes())?;
        w.write_all(cfg.as_bytes())?;
        w.write_all(&(self.entries.len() as u32).to_le_bytes())?;
        for e in &self.entries {
            w.write_all(&(e.name.len() as u32).to_le_bytes())?;
            w.write_all(e.name.as_bytes())?;
            w.write_all(&[match e.kind {
                ParamKind::Learnable => 0,
                ParamKind::Buffer => 1,
            }])?;
            e.tensor.write_dump(w)?;
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.write_to(&mut out).expect("writing to a Vec cannot fail");
        out
    }

    /// Decodes a whole checkpoint; trailing bytes are rejected.
    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let mut magic = [0u8; 4];
        read_exact(r, &mut magic, "magic")?;
        if magic != MAGIC {
            return Err(Error::BadMagic { found: magic });
        }
        let version = read_u32(r, "version")?;
        if version != VERSION {
            return Err(Error::VersionMismatch {
                found: version,
                expected: VERSION,
            });
        }
        let cfg_text = read_string(r, "config")?;
        let config = ModelConfig::from_text(&cfg_text)
            .map_err(|e| Error::Malformed(format!("config echo: {e}")))?;
        let count = read_u32(r, "entry count")? as usize;
        let mut entries = Vec::with_capacity(count.min(4096));
        for _ in 0..count {
            let name = read_string(r, "entry name")?;
            let mut kind = [0u8];
            read_exact(r, &mut kind, "entry kind")?;
            let kind = match kind[0] {
                0 => ParamKind::Learnable,
                1 => ParamKind::Buffer,
                k => return Err(Error::Malformed(format!("entry `{name}` has kind byte {k}"))),
            };
            let tensor = Tensor::read_dump(r).map_err(|e| match e {
                Error::Truncated(m) => Error::Truncated(format!("{m} (entry `{name}`)")),
                other => other,
            })?;
            entries.push(ParamEntry { name, kind, tensor });
        }
        let mut rest = [0u8; 1];
        match r.read(&mut rest) {
            Ok(0) => {}
            Ok(_) => return Err(Error::Malformed("trailing bytes after last entry".into())),
            Err(e) => return Err(Error::Malformed(format!("reading past last entry: {e}"))),
        }
        Ok(Self { config, entries })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::read_from(&mut bytes.as_slice())
    }

    /// Builds a model from the stored config and fills in every tensor.
    pub fn to_model<F: Float>(&self) -> Result<VigUnet<F>> {
        self.to_model_with(self.config.clone())
    }

    /// Builds a model from `config` and fills it from this checkpoint. Every
    /// model tensor must be present with a matching shape.
    pub fn to_model_with<F: Float>(&self, config: ModelConfig) -> Result<VigUnet<F>> {
        // initial values are overwritten, so the seed is irrelevant
        let mut model = VigUnet::<F>::new(config, &mut RngState::new(0))?;
        let store = model.store_mut();
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let name = store.entry(id).name.clone();
            let src = self.get(&name).ok_or_else(|| Error::MissingTensor(name.clone()))?;
            let expected = store.get(id).shape().to_vec();
            if src.tensor.shape() != expected.as_slice() || src.kind != store.entry(id).kind {
                return Err(Error::CheckpointShape {
                    name,
                    found: src.tensor.shape().to_vec(),
                    expected,
                });
            }
            store.set_values(id, src.tensor.cast())?;
        }
        for e in &self.entries {
            if !e.name.starts_with(EXTRA_PREFIX) && model.store().id_of(&e.name).is_none() {
                return Err(Error::Malformed(format!("unexpected tensor `{}`", e.name)));
            }
        }
        Ok(model)
    }
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf).map_err(|e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            Error::Truncated(format!("ended inside {what}"))
        } else {
            Error::Malformed(format!("{what}: {e}"))
        }
    })
}

fn read_string<R: Read>(r: &mut R, what: &str) -> Result<String> {
    let len = read_u32(r, what)? as usize;
    if len > 1 << 20 {
        return Err(Error::Malformed(format!("{what} length {len}")));
    }
    let mut buf = vec![0u8; len];
    read_exact(r, &mut buf, what)?;
    String::from_utf8(buf).map_err(|_| Error::Malformed(format!("{what} is not UTF-8")))
}

/// Writes `model` to `path`.
pub fn save_checkpoint<F: Float>(model: &VigUnet<F>, path: impl AsRef<Path>) -> Result<()> {
    Checkpoint::from_model(model).save(path)
}

/// Reads a checkpoint and rebuilds the model it describes.
pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<VigUnet<f32>> {
    Checkpoint::load(path)?.to_model()
}

/// Reads a checkpoint into a model built from `config`.
pub fn load_into(path: impl AsRef<Path>, config: ModelConfig) -> Result<VigUnet<f32>> {
    Checkpoint::load(path)?.to_model_with(config)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> VigUnet<f32> {
        let mut c = ModelConfig::tiny();
        c.input_height = 32;
        c.input_width = 32;
        VigUnet::new(c, &mut RngState::new(7)).unwrap()
    }

    #[test]
    fn roundtrip_is_bit_exact() {
        let m = small();
        let ck = Checkpoint::from_model(&m).with_extra("norm.mean", Tensor::new(vec![3], vec![0.1, 0.2, 0.3]).unwrap());
        let bytes = ck.to_bytes();
        let back = Checkpoint::read_from(&mut bytes.as_slice()).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_bytes(), bytes);
        let m2: VigUnet<f32> = back.to_model().unwrap();
        for (a, b) in m.store().entries().iter().zip(m2.store().entries()) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.tensor.data(), b.tensor.data());
        }
        assert_eq!(back.extra("norm.mean").unwrap().data(), &[0.1, 0.2, 0.3]);
    }

    #[test]
    fn header_errors() {
        let bytes = Checkpoint::from_model(&small()).to_bytes();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Checkpoint::read_from(&mut bad.as_slice()), Err(Error::BadMagic { .. })));
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(matches!(
            Checkpoint::read_from(&mut bad.as_slice()),
            Err(Error::VersionMismatch { found: 9, expected: VERSION })
        ));
        for cut in [2, 10, bytes.len() / 2, bytes.len() - 1] {
            assert!(matches!(
                Checkpoint::read_from(&mut &bytes[..cut]),
                Err(Error::Truncated(_))
            ));
        }
        let mut long = bytes;
        long.push(0);
        assert!(matches!(Checkpoint::read_from(&mut long.as_slice()), Err(Error::Malformed(_))));
    }

    #[test]
    fn mismatched_config_names_tensor() {
        let ck = Checkpoint::from_model(&small());
        let mut other = ck.config.clone();
        other.input_height = 64;
        other.input_width = 64;
        match ck.to_model_with::<f32>(other) {
            Err(Error::CheckpointShape { name, .. }) => assert_eq!(name, "stem.pos_embed"),
            other => panic!("unexpected {other:?}"),
        }
        let mut missing = ck.clone();
        missing.entries.retain(|e| e.name != "final.bias");
        assert!(matches!(missing.to_model::<f32>(), Err(Error::MissingTensor(n)) if n == "final.bias"));
    }
}
