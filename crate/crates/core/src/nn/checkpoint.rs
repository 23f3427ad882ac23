//! Binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! b"MPCK" | version: u32 | header_len: u32 | header (JSON) | tensors (f32) | sha256 (32 bytes)
//! ```
//!
//! The header holds both network configs, the step counter, the config hash
//! and the name and shape of every tensor in storage order (generator first).
//! The trailing digest covers every preceding byte.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{config_hash, Discriminator, DiscriminatorConfig, Generator, GeneratorConfig, NetworkParameters, Param, ParamStore};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"MPCK";
pub const FORMAT_VERSION: u32 = 1;
const DIGEST_LEN: usize = 32;

/// Network parameters at a given training step.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkCheckpoint {
    pub params: NetworkParameters,
    pub step: u64,
    pub config_hash: String,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    trainable: bool,
}

#[derive(Serialize, Deserialize)]
struct Header {
    generator: GeneratorConfig,
    discriminator: DiscriminatorConfig,
    step: u64,
    config_hash: String,
    tensors: Vec<TensorEntry>,
}

impl NetworkCheckpoint {
    pub fn new(params: NetworkParameters, step: u64) -> Self {
        let config_hash = params.config_hash();
        Self { params, step, config_hash }
    }

    fn all_params(&self) -> impl Iterator<Item = &Param> {
        self.params.generator.params.params.iter().chain(&self.params.discriminator.params.params)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = Header {
            generator: self.params.generator.config,
            discriminator: self.params.discriminator.config,
            step: self.step,
            config_hash: self.config_hash.clone(),
            tensors: self
                .all_params()
                .map(|p| TensorEntry { name: p.name.clone(), shape: p.shape.clone(), trainable: p.trainable })
                .collect(),
        };
        let header = serde_json::to_vec(&header).expect("header serializes");
        let scalars = self.params.generator.params.scalar_count() + self.params.discriminator.params.scalar_count();
        let mut out = Vec::with_capacity(12 + header.len() + 4 * scalars + DIGEST_LEN);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        for p in self.all_params() {
            for v in &p.data {
                out.extend_from_slice(&(*v as f32).to_le_bytes());
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 12 + DIGEST_LEN {
            return Err(Error::ChecksumMismatch);
        }
        let (body, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
        if Sha256::digest(body).as_slice() != digest {
            return Err(Error::ChecksumMismatch);
        }
        if &body[0..4] != MAGIC {
            return Err(Error::MalformedCheckpoint("bad magic".into()));
        }
        let version = u32::from_le_bytes(body[4..8].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(Error::VersionMismatch { found: version, expected: FORMAT_VERSION });
        }
        let header_len = u32::from_le_bytes(body[8..12].try_into().expect("4 bytes")) as usize;
        let header_end = 12usize
            .checked_add(header_len)
            .filter(|&e| e <= body.len())
            .ok_or_else(|| Error::MalformedCheckpoint("header length".into()))?;
        let header: Header = serde_json::from_slice(&body[12..header_end])?;
        if config_hash(&header.generator, &header.discriminator) != header.config_hash {
            return Err(Error::MalformedCheckpoint("config hash does not match configs".into()));
        }

        let mut floats = body[header_end..].chunks_exact(4);
        if floats.remainder().len() != 0 {
            return Err(Error::MalformedCheckpoint("tensor section is not a whole number of f32".into()));
        }
        let total: usize = header.tensors.iter().map(|t| t.shape.iter().product::<usize>()).sum();
        if total != floats.len() {
            return Err(Error::MalformedCheckpoint(format!("{} values stored, header declares {total}", floats.len())));
        }
        let mut params: Vec<Param> = Vec::with_capacity(header.tensors.len());
        for t in header.tensors {
            let n = t.shape.iter().product::<usize>();
            let data = floats
                .by_ref()
                .take(n)
                .map(|b| f64::from(f32::from_le_bytes(b.try_into().expect("4 bytes"))))
                .collect();
            params.push(Param { name: t.name, shape: t.shape, data, trainable: t.trainable });
        }
        let split = params.iter().position(|p| !p.name.starts_with("gen.")).unwrap_or(params.len());
        let disc_params = params.split_off(split);
        let generator = Generator::from_params(header.generator, ParamStore { params })?;
        let discriminator = Discriminator::from_params(header.discriminator, ParamStore { params: disc_params })?;
        Ok(Self {
            params: NetworkParameters { generator, discriminator },
            step: header.step,
            config_hash: header.config_hash,
        })
    }

    /// Writes atomically: a temporary sibling file is renamed into place.
    pub fn save(&self, path: &Path) -> Result<()> {
        let dir = path.parent().filter(|d| !d.as_os_str().is_empty()).unwrap_or(Path::new("."));
        let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
        tmp.write_all(&self.to_bytes()).map_err(|e| Error::io(path, e))?;
        tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imaging::ModelImage;
    use crate::nn::{generator_forward, Mode};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sample() -> NetworkCheckpoint {
        let g = GeneratorConfig::compact(16, 4, 16);
        let d = DiscriminatorConfig::new(16, 2, 4, 16);
        NetworkCheckpoint::new(NetworkParameters::new(g, d, 11).unwrap(), 40)
    }

    #[test]
    fn roundtrip_is_bit_exact() {
        let ck = sample();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.ckpt");
        ck.save(&path).unwrap();
        let back = NetworkCheckpoint::load(&path).unwrap();
        assert_eq!(back, ck);
        for (a, b) in ck.all_params().zip(back.all_params()) {
            assert!(a.data.iter().zip(&b.data).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
        let probe = ModelImage { height: 16, width: 16, data: (0..768).map(|i| ((i * 37) % 200) as f64 / 100.0 - 1.0).collect() };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(
            generator_forward(&ck.params, &probe, Mode::Inference, &mut rng).unwrap(),
            generator_forward(&back.params, &probe, Mode::Inference, &mut rng).unwrap()
        );
    }

    #[test]
    fn truncation_is_a_checksum_error() {
        let bytes = sample().to_bytes();
        for cut in [0, 10, bytes.len() / 2, bytes.len() - 1] {
            assert!(matches!(NetworkCheckpoint::from_bytes(&bytes[..cut]), Err(Error::ChecksumMismatch)));
        }
    }

    #[test]
    fn flipped_byte_is_a_checksum_error() {
        let mut bytes = sample().to_bytes();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 1;
        assert!(matches!(NetworkCheckpoint::from_bytes(&bytes), Err(Error::ChecksumMismatch)));
    }

    #[test]
    fn version_is_checked() {
        let mut bytes = sample().to_bytes();
        bytes.truncate(bytes.len() - DIGEST_LEN);
        bytes[4..8].copy_from_slice(&7u32.to_le_bytes());
        let digest = Sha256::digest(&bytes);
        bytes.extend_from_slice(&digest);
        assert!(matches!(
            NetworkCheckpoint::from_bytes(&bytes),
            Err(Error::VersionMismatch { found: 7, expected: FORMAT_VERSION })
        ));
    }
}
