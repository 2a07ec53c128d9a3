//! Binary checkpoint format.
//!
//! ```text
//! "JFRM"                    magic
//! u32                       format version
//! u32 + bytes               model config as `key = value` text
//! per parameter, in enumeration order:
//!   u32 + bytes             name
//!   u32                     rank
//!   u32 × rank              dims
//!   f32 × numel             payload
//! ```
//!
//! All integers and floats are little-endian.

use std::fs;
use std::path::Path;

use crate::error::FormatError;
use crate::tensor::{Scalar, Tensor};

use super::{parameter_shapes, ModelConfig, Parameters};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"JFRM";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub params: Parameters<f32>,
}

impl Checkpoint {
    pub fn new<S: Scalar>(config: &ModelConfig, params: &Parameters<S>) -> Self {
        Checkpoint {
            config: config.clone(),
            params: params.cast(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&CHECKPOINT_MAGIC);
        put_u32(&mut out, CHECKPOINT_VERSION);
        put_bytes(&mut out, self.config.to_text().as_bytes());
        for (name, tensor) in self.params.named() {
            put_bytes(&mut out, name.as_bytes());
            put_u32(&mut out, tensor.rank() as u32);
            for &d in tensor.shape() {
                put_u32(&mut out, d as u32);
            }
            for &v in tensor.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, FormatError> {
        let mut r = Reader { bytes, pos: 0 };
        let magic: [u8; 4] = r.take(4, "magic")?.try_into().expect("4 bytes");
        if magic != CHECKPOINT_MAGIC {
            return Err(FormatError::BadMagic(magic));
        }
        let version = r.u32("version")?;
        if version != CHECKPOINT_VERSION {
            return Err(FormatError::UnsupportedVersion(version));
        }
        let len = r.u32("config length")? as usize;
        let text = std::str::from_utf8(r.take(len, "config")?).map_err(|e| FormatError::Parse {
            line: 0,
            message: format!("config is not UTF-8: {e}"),
        })?;
        let config = ModelConfig::from_text(text)?;

        let expected = parameter_shapes(&config);
        let mut next_index = 0;
        let params = expected.try_map(|expected_name, expected_shape| {
            let index = next_index;
            next_index += 1;
            let name_len = r.u32("parameter name length")? as usize;
            let name = String::from_utf8_lossy(r.take(name_len, "parameter name")?).into_owned();
            let rank = r.u32("parameter rank")? as usize;
            let shape = (0..rank)
                .map(|_| r.u32("parameter dims").map(|d| d as usize))
                .collect::<Result<Vec<_>, _>>()?;
            if name != expected_name || &shape != expected_shape {
                return Err(FormatError::ParameterMismatch {
                    index,
                    expected: expected_name.to_string(),
                    expected_shape: expected_shape.clone(),
                    found: name,
                    found_shape: shape,
                });
            }
            let numel: usize = shape.iter().product();
            let payload = r.take(numel * 4, "parameter payload")?;
            let data = payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            Ok(Tensor::new(&shape, data).expect("checked shape"))
        })?;
        if r.pos != bytes.len() {
            return Err(FormatError::TrailingBytes(bytes.len() - r.pos));
        }
        Ok(Checkpoint { config, params })
    }
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_bytes(out: &mut Vec<u8>, bytes: &[u8]) {
    put_u32(out, bytes.len() as u32);
    out.extend_from_slice(bytes);
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8], FormatError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or(FormatError::Truncated(what))?;
        let slice = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(slice)
    }

    fn u32(&mut self, what: &'static str) -> Result<u32, FormatError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }
}

pub fn write_checkpoint<S: Scalar>(path: &Path, config: &ModelConfig, params: &Parameters<S>) -> Result<(), FormatError> {
    fs::write(path, Checkpoint::new(config, params).to_bytes()).map_err(|source| FormatError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint, FormatError> {
    let bytes = fs::read(path).map_err(|source| FormatError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    Checkpoint::from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::model::Variant;

    fn sample(variant: Variant, seed: u64) -> Checkpoint {
        let config = ModelConfig::new(variant, 2, 6, 5, 11);
        let params = Parameters::<f32>::init(&config, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        Checkpoint::new(&config, &params)
    }

    #[test]
    fn header_layout() {
        let bytes = sample(Variant::RoFormer, 0).to_bytes();
        assert_eq!(&bytes[..4], b"JFRM");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
    }

    #[test]
    fn corrupt_inputs_are_diagnosed() {
        let bytes = sample(Variant::JoFormerPerToken, 1).to_bytes();
        assert!(matches!(Checkpoint::from_bytes(b"NOPE\x01\0\0\0"), Err(FormatError::BadMagic(_))));
        let mut wrong_version = bytes.clone();
        wrong_version[4] = 9;
        assert!(matches!(Checkpoint::from_bytes(&wrong_version), Err(FormatError::UnsupportedVersion(9))));
        assert!(matches!(
            Checkpoint::from_bytes(&bytes[..bytes.len() - 3]),
            Err(FormatError::Truncated(_))
        ));
        let mut trailing = bytes.clone();
        trailing.push(0);
        assert!(matches!(Checkpoint::from_bytes(&trailing), Err(FormatError::TrailingBytes(1))));
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let ckpt = sample(Variant::JoFormerFixed, 2);
        write_checkpoint(&path, &ckpt.config, &ckpt.params).unwrap();
        assert_eq!(read_checkpoint(&path).unwrap(), ckpt);
        assert!(matches!(read_checkpoint(&dir.path().join("missing")), Err(FormatError::Io { .. })));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]
        #[test]
        fn bytes_round_trip_bit_exactly(seed in any::<u64>(), v in 0usize..3) {
            let ckpt = sample(Variant::ALL[v], seed);
            let bytes = ckpt.to_bytes();
            let back = Checkpoint::from_bytes(&bytes).unwrap();
            prop_assert_eq!(back.to_bytes(), bytes);
            prop_assert_eq!(back, ckpt);
        }
    }
}
