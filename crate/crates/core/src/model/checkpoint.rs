//! Binary checkpoint: magic, version, config, parameter tensors as
//! little-endian f64 in declared order, then a SHA-256 trailer over
//! everything before it.

use std::path::Path;

use sha2::{Digest, Sha256};

use super::{ModelConfig, ModelParams};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"RTGNCKPT";
const VERSION: u32 = 1;
const HEADER_LEN: usize = 8 + 4 + 7 * 8;
const WHAT: &str = "checkpoint";

pub(crate) fn to_bytes(params: &ModelParams) -> Vec<u8> {
    let c = &params.config;
    let mut buf = Vec::with_capacity(HEADER_LEN + params.num_params() * 8 + 32);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    for v in [
        c.d_model,
        c.n_layers,
        c.n_heads,
        c.d_ff,
        c.max_seq_len,
        c.vocab_size,
    ] {
        buf.extend_from_slice(&(v as u64).to_le_bytes());
    }
    buf.extend_from_slice(&c.seed.to_le_bytes());
    for t in params.tensors() {
        for v in t {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let digest = Sha256::digest(&buf);
    buf.extend_from_slice(&digest);
    buf
}

pub(crate) fn fingerprint(params: &ModelParams) -> String {
    hex::encode(Sha256::digest(to_bytes(params)))
}

fn read_u64(b: &[u8], at: usize) -> u64 {
    u64::from_le_bytes(b[at..at + 8].try_into().unwrap())
}

pub(crate) fn from_bytes(bytes: &[u8]) -> Result<ModelParams> {
    if bytes.len() < HEADER_LEN + 32 || &bytes[..8] != MAGIC {
        return Err(Error::BadFormat { what: WHAT });
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != VERSION {
        return Err(Error::VersionMismatch {
            what: WHAT,
            found: version,
            expected: VERSION,
        });
    }
    let (body, trailer) = bytes.split_at(bytes.len() - 32);
    if Sha256::digest(body).as_slice() != trailer {
        return Err(Error::Checksum(WHAT));
    }
    let dim = |i: usize| read_u64(body, 12 + 8 * i) as usize;
    let config = ModelConfig {
        d_model: dim(0),
        n_layers: dim(1),
        n_heads: dim(2),
        d_ff: dim(3),
        max_seq_len: dim(4),
        vocab_size: dim(5),
        seed: read_u64(body, 12 + 8 * 6),
    };
    config.validate()?;
    let mut params = ModelParams::zeros(&config);
    let expected = HEADER_LEN + params.num_params() * 8;
    if body.len() != expected {
        return Err(Error::BadFormat { what: WHAT });
    }
    let mut at = HEADER_LEN;
    for t in params.tensors_mut() {
        for v in t.iter_mut() {
            *v = f64::from_le_bytes(body[at..at + 8].try_into().unwrap());
            at += 8;
        }
    }
    if !params.all_finite() {
        return Err(Error::NonFinite("checkpoint parameters".into()));
    }
    Ok(params)
}

pub fn save_checkpoint(params: &ModelParams, path: &Path) -> Result<()> {
    std::fs::write(path, to_bytes(params)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<ModelParams> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}

/// Loads a checkpoint and checks it was trained for a vocabulary of size `n`.
pub fn load_checkpoint_for_vocab(path: &Path, n: usize) -> Result<ModelParams> {
    let p = load_checkpoint(path)?;
    if p.config.vocab_size != n {
        return Err(Error::VocabSizeMismatch {
            found: p.config.vocab_size,
            expected: n,
        });
    }
    Ok(p)
}

#[cfg(test)]
mod tests {
    use super::super::init_params;
    use super::*;

    fn params() -> ModelParams {
        init_params(&ModelConfig {
            d_model: 8,
            n_layers: 1,
            n_heads: 2,
            d_ff: 8,
            max_seq_len: 6,
            vocab_size: 13,
            seed: 5,
        })
        .unwrap()
    }

    #[test]
    fn round_trip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let p = params();
        save_checkpoint(&p, &path).unwrap();
        let q = load_checkpoint(&path).unwrap();
        for (a, b) in p.tensors().iter().zip(q.tensors()) {
            assert!(a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
        assert_eq!(p.fingerprint(), q.fingerprint());
    }

    #[test]
    fn corrupted_byte_fails_checksum() {
        let mut bytes = to_bytes(&params());
        bytes[HEADER_LEN + 17] ^= 0x40;
        assert!(matches!(from_bytes(&bytes), Err(Error::Checksum(_))));
    }

    #[test]
    fn truncation_detected() {
        let bytes = to_bytes(&params());
        assert!(from_bytes(&bytes[..bytes.len() - 9]).is_err());
        assert!(matches!(from_bytes(&bytes[..20]), Err(Error::BadFormat { .. })));
    }

    #[test]
    fn version_mismatch_detected() {
        let mut bytes = to_bytes(&params());
        bytes[8] = 9;
        assert!(matches!(
            from_bytes(&bytes),
            Err(Error::VersionMismatch { found: 9, .. })
        ));
    }

    #[test]
    fn vocab_mismatch_names_n() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save_checkpoint(&params(), &path).unwrap();
        let err = load_checkpoint_for_vocab(&path, 20).unwrap_err();
        assert!(err.to_string().contains("N=13"), "{err}");
    }
}
