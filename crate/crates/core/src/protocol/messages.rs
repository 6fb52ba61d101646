//! Client/server messages and their byte encoding.
//!
//! ```text
//! Upload:    "UPLD" u32 client_id  u64 round  u64 packed_len  ciphertext list  plain
//! Broadcast: "BCST" u64 round  u64 packed_len  ciphertext list  plain
//! plain:     u8 0 | u8 1, u32 count, count × f64
//! ```

use crate::error::{Error, Result};
use crate::he::wire::{self, Reader};
use crate::he::Ciphertext;

const UPLOAD_TAG: [u8; 4] = *b"UPLD";
const BROADCAST_TAG: [u8; 4] = *b"BCST";

/// One client's contribution to a round.
#[derive(Debug, Clone, PartialEq)]
pub struct Upload {
    pub client_id: usize,
    pub round: u64,
    /// Number of values packed into `ciphertexts`.
    pub packed_len: usize,
    pub ciphertexts: Vec<Ciphertext>,
    /// Gradient entries sent in the clear (select-and-encrypt only).
    pub plaintext_grads: Option<Vec<f64>>,
}

/// Aggregate sent back to every client.
#[derive(Debug, Clone, PartialEq)]
pub struct Broadcast {
    pub round: u64,
    pub packed_len: usize,
    pub ciphertexts: Vec<Ciphertext>,
    pub plaintext_grads: Option<Vec<f64>>,
}

fn put_plain(out: &mut Vec<u8>, plain: &Option<Vec<f64>>) {
    match plain {
        None => out.push(0),
        Some(v) => {
            out.push(1);
            out.extend_from_slice(&(v.len() as u32).to_le_bytes());
            for x in v {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
    }
}

fn get_plain(r: &mut Reader<'_>) -> Result<Option<Vec<f64>>> {
    match r.u8()? {
        0 => Ok(None),
        1 => {
            let n = r.u32()? as usize;
            Ok(Some((0..n).map(|_| r.f64()).collect::<Result<_>>()?))
        }
        b => Err(Error::Format(format!("invalid plaintext flag {b}"))),
    }
}

fn get_list(r: &mut Reader<'_>) -> Result<Vec<Ciphertext>> {
    let (cts, used) = wire::decode_list(r.rest())?;
    r.pos += used;
    Ok(cts)
}

fn expect_end(r: &Reader<'_>, what: &str) -> Result<()> {
    if r.rest().is_empty() {
        Ok(())
    } else {
        Err(Error::Format(format!("{} trailing bytes after {what}", r.rest().len())))
    }
}

impl Upload {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&UPLOAD_TAG);
        out.extend_from_slice(&(self.client_id as u32).to_le_bytes());
        out.extend_from_slice(&self.round.to_le_bytes());
        out.extend_from_slice(&(self.packed_len as u64).to_le_bytes());
        wire::encode_list(&self.ciphertexts, &mut out);
        put_plain(&mut out, &self.plaintext_grads);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        if r.array::<4>()? != UPLOAD_TAG {
            return Err(Error::Format("not an upload message".into()));
        }
        let client_id = r.u32()? as usize;
        let round = r.u64()?;
        let packed_len = r.u64()? as usize;
        let ciphertexts = get_list(&mut r)?;
        let plaintext_grads = get_plain(&mut r)?;
        expect_end(&r, "upload")?;
        Ok(Self {
            client_id,
            round,
            packed_len,
            ciphertexts,
            plaintext_grads,
        })
    }
}

impl Broadcast {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&BROADCAST_TAG);
        out.extend_from_slice(&self.round.to_le_bytes());
        out.extend_from_slice(&(self.packed_len as u64).to_le_bytes());
        wire::encode_list(&self.ciphertexts, &mut out);
        put_plain(&mut out, &self.plaintext_grads);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        if r.array::<4>()? != BROADCAST_TAG {
            return Err(Error::Format("not a broadcast message".into()));
        }
        let round = r.u64()?;
        let packed_len = r.u64()? as usize;
        let ciphertexts = get_list(&mut r)?;
        let plaintext_grads = get_plain(&mut r)?;
        expect_end(&r, "broadcast")?;
        Ok(Self {
            round,
            packed_len,
            ciphertexts,
            plaintext_grads,
        })
    }
}
