//! Checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic      8 bytes  "MRCNERCK"
//! version    u32
//! manifest   u64 length, then UTF-8 JSON
//! tensors    f64 values, concatenated in manifest order
//! ```
//!
//! Files are written to a temporary sibling and renamed into place, so an
//! interrupted save never leaves a partial checkpoint under the final name.

use std::io::Write;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::encoder::{MixLayer, ToyEncoder, ToyEncoderConfig, Vocab};
use super::heads::HeadParams;
use super::MrcModel;
use crate::error::{Error, Result};
use crate::query::QueryCatalog;
use crate::span::TagSet;

const MAGIC: &[u8; 8] = b"MRCNERCK";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointManifest {
    pub encoder_kind: String,
    pub encoder: ToyEncoderConfig,
    pub vocabulary: Vec<String>,
    pub tags: TagSet,
    pub catalog: QueryCatalog,
    pub char_level: bool,
    pub config_hash: String,
    pub tensors: Vec<TensorEntry>,
}

/// A trained model with the tag set and queries it was trained with.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: MrcModel,
    pub tags: TagSet,
    pub catalog: QueryCatalog,
    pub char_level: bool,
    pub config_hash: String,
}

impl Checkpoint {
    pub fn manifest(&self) -> CheckpointManifest {
        CheckpointManifest {
            encoder_kind: "toy".into(),
            encoder: self.model.encoder.config.clone(),
            vocabulary: self.model.encoder.vocab.tokens().to_vec(),
            tags: self.tags.clone(),
            catalog: self.catalog.clone(),
            char_level: self.char_level,
            config_hash: self.config_hash.clone(),
            tensors: self
                .model
                .named_tensors()
                .into_iter()
                .map(|t| TensorEntry {
                    name: t.name,
                    shape: t.shape,
                })
                .collect(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let manifest = serde_json::to_vec(&self.manifest()).expect("manifest serializes");
        let mut out = Vec::with_capacity(20 + manifest.len() + 8 * self.model.parameter_count());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
        out.extend_from_slice(&manifest);
        for t in self.model.named_tensors() {
            for v in t.values {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint file"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let body = bytes.get(20..20 + len).ok_or_else(|| bad("truncated manifest"))?;
        let manifest: CheckpointManifest =
            serde_json::from_slice(body).map_err(|e| Error::Checkpoint(e.to_string()))?;
        if manifest.encoder_kind != "toy" {
            return Err(Error::Checkpoint(format!(
                "unsupported encoder kind {:?}",
                manifest.encoder_kind
            )));
        }
        manifest.encoder.validate()?;
        let mut values = bytes[20 + len..]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")));
        if !(bytes.len() - 20 - len).is_multiple_of(8) {
            return Err(bad("trailing bytes"));
        }

        let vocab = Vocab::from_tokens(manifest.vocabulary.clone())?;
        let config = manifest.encoder.clone();
        let d = config.dim;
        let mut model = MrcModel {
            encoder: ToyEncoder {
                embedding: Array2::zeros((vocab.len(), d)),
                layers: (0..config.layers).map(|_| MixLayer::zeros(d)).collect(),
                config,
                vocab,
            },
            heads: HeadParams::zeros(d),
        };
        let expected: Vec<TensorEntry> = model
            .named_tensors()
            .into_iter()
            .map(|t| TensorEntry {
                name: t.name,
                shape: t.shape,
            })
            .collect();
        if expected != manifest.tensors {
            return Err(bad("tensor list does not match the encoder configuration"));
        }
        for (_, slot) in model.tensors_mut() {
            for v in slot.iter_mut() {
                *v = values.next().ok_or_else(|| bad("truncated tensor data"))?;
            }
        }
        if values.next().is_some() {
            return Err(bad("trailing tensor data"));
        }
        Ok(Checkpoint {
            model,
            tags: manifest.tags,
            catalog: manifest.catalog,
            char_level: manifest.char_level,
            config_hash: manifest.config_hash,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_atomic(path.as_ref(), &self.to_bytes())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

/// Writes `bytes` to a temporary file beside `path`, then renames it.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| Error::io(path, e))?;
    tmp.as_file().sync_all().map_err(|e| Error::io(path, e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}


#[cfg(test)]
mod tests {
    use super::*;
    use crate::query::QueryStrategy;

    fn checkpoint() -> Checkpoint {
        let vocab = Vocab::new(["a", "b", "<x>"]);
        let config = ToyEncoderConfig {
            dim: 5,
            layers: 2,
            temperature: 3.0,
            max_len: 32,
        };
        Checkpoint {
            model: MrcModel::new(config, vocab, 11).unwrap(),
            tags: TagSet::new(["X", "Y"]).unwrap(),
            catalog: QueryCatalog::position_index("t"),
            char_level: false,
            config_hash: "abc".into(),
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let ck = checkpoint();
        let bytes = ck.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_bytes(), bytes);
        assert_eq!(back.catalog.strategy, QueryStrategy::PositionIndex);
    }

    #[test]
    fn save_load_through_rename() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sub").join("model.ckpt");
        let ck = checkpoint();
        ck.save(&path).unwrap();
        assert_eq!(Checkpoint::load(&path).unwrap(), ck);
        let leftovers: Vec<_> = std::fs::read_dir(path.parent().unwrap())
            .unwrap()
            .map(|e| e.unwrap().file_name())
            .collect();
        assert_eq!(leftovers.len(), 1);
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let bytes = checkpoint().to_bytes();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 8]).is_err());
        assert!(Checkpoint::from_bytes(b"garbage garbage garbage").is_err());
        let mut extra = bytes.clone();
        extra.extend_from_slice(&[0; 8]);
        assert!(Checkpoint::from_bytes(&extra).is_err());
    }
}
