//! Binary checkpoint container: magic, version, length-prefixed bincode
//! payload, and a trailing SHA-256 of the payload.

use std::path::Path;

use serde::{de::DeserializeOwned, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::image::write_atomic;

pub const MAGIC: &[u8; 8] = b"BLRPCKPT";
pub const VERSION: u32 = 1;
const HEADER: usize = MAGIC.len() + 4 + 8;
const DIGEST: usize = 32;

pub fn encode<T: Serialize>(value: &T) -> Result<Vec<u8>> {
    let payload = bincode::serialize(value).map_err(|e| Error::Invalid(format!("serialize checkpoint: {e}")))?;
    let mut out = Vec::with_capacity(HEADER + payload.len() + DIGEST);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
    out.extend_from_slice(&payload);
    out.extend_from_slice(&Sha256::digest(&payload));
    Ok(out)
}

pub fn decode<T: DeserializeOwned>(bytes: &[u8]) -> Result<T> {
    if bytes.len() < HEADER + DIGEST {
        return Err(Error::Integrity(format!("file too short ({} bytes)", bytes.len())));
    }
    if &bytes[..MAGIC.len()] != MAGIC {
        return Err(Error::Integrity("not a checkpoint file".into()));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(Error::Integrity(format!("unsupported version {version}, expected {VERSION}")));
    }
    let len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    if bytes.len() != HEADER + len + DIGEST {
        return Err(Error::Integrity(format!(
            "length mismatch: header promises {len} payload bytes, file holds {}",
            bytes.len().saturating_sub(HEADER + DIGEST)
        )));
    }
    let payload = &bytes[HEADER..HEADER + len];
    if Sha256::digest(payload).as_slice() != &bytes[HEADER + len..] {
        return Err(Error::Integrity("checksum mismatch".into()));
    }
    bincode::deserialize(payload).map_err(|e| Error::Integrity(format!("malformed payload: {e}")))
}

pub fn save<T: Serialize>(value: &T, path: impl AsRef<Path>) -> Result<()> {
    write_atomic(path.as_ref(), &encode(value)?)
}

pub fn load<T: DeserializeOwned>(path: impl AsRef<Path>) -> Result<T> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}
