//! Ciphertext byte format.
//!
//! ```text
//! u32   length of everything after this field
//! [u8;4] backend tag ("MOCK" | "RLWE")
//! u8    format version (1)
//! u64   parameter digest
//! u32   slot count
//! u32   scale exponent
//! u64   modeled size in bytes
//! payload:
//!   MOCK: u32 count, count × f64
//!   RLWE: u32 N, N × u64 (c0), N × u64 (c1)
//! ```
//!
//! All integers and floats are little-endian.

use super::{BackendTag, Body, Ciphertext};
use crate::error::{Error, Result};

pub const VERSION: u8 = 1;

pub fn encode(ct: &Ciphertext) -> Vec<u8> {
    let mut body = Vec::new();
    body.extend_from_slice(&ct.backend.wire_tag());
    body.push(VERSION);
    body.extend_from_slice(&ct.params_digest.to_le_bytes());
    body.extend_from_slice(&(ct.slot_count as u32).to_le_bytes());
    body.extend_from_slice(&ct.scale_bits.to_le_bytes());
    body.extend_from_slice(&ct.size_bytes.to_le_bytes());
    match &ct.body {
        Body::Mock(v) => {
            body.extend_from_slice(&(v.len() as u32).to_le_bytes());
            for x in v {
                body.extend_from_slice(&x.to_le_bytes());
            }
        }
        Body::Rlwe { c0, c1 } => {
            body.extend_from_slice(&(c0.len() as u32).to_le_bytes());
            for x in c0.iter().chain(c1) {
                body.extend_from_slice(&x.to_le_bytes());
            }
        }
    }
    let mut out = Vec::with_capacity(body.len() + 4);
    out.extend_from_slice(&(body.len() as u32).to_le_bytes());
    out.extend(body);
    out
}

/// Decodes one ciphertext from the front of `bytes`, returning it with the
/// number of bytes consumed.
pub fn decode(bytes: &[u8]) -> Result<(Ciphertext, usize)> {
    let mut r = Reader::new(bytes);
    let len = r.u32()? as usize;
    let start = r.pos;
    let tag = BackendTag::from_wire(r.array::<4>()?)?;
    let version = r.u8()?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported ciphertext version {version}")));
    }
    let params_digest = r.u64()?;
    let slot_count = r.u32()? as usize;
    let scale_bits = r.u32()?;
    let size_bytes = r.u64()?;
    let n = r.u32()? as usize;
    let body = match tag {
        BackendTag::Mock => Body::Mock((0..n).map(|_| r.f64()).collect::<Result<_>>()?),
        BackendTag::ToyRlwe => {
            let c0 = (0..n).map(|_| r.u64()).collect::<Result<_>>()?;
            let c1 = (0..n).map(|_| r.u64()).collect::<Result<_>>()?;
            Body::Rlwe { c0, c1 }
        }
    };
    if r.pos - start != len {
        return Err(Error::Format(format!(
            "length prefix {len} but {} bytes decoded",
            r.pos - start
        )));
    }
    Ok((
        Ciphertext {
            backend: tag,
            params_digest,
            slot_count,
            scale_bits,
            size_bytes,
            body,
        },
        r.pos,
    ))
}

/// `u32` count followed by that many encoded ciphertexts.
pub fn encode_list(cts: &[Ciphertext], out: &mut Vec<u8>) {
    out.extend_from_slice(&(cts.len() as u32).to_le_bytes());
    for ct in cts {
        out.extend(encode(ct));
    }
}

pub fn decode_list(bytes: &[u8]) -> Result<(Vec<Ciphertext>, usize)> {
    let mut r = Reader::new(bytes);
    let count = r.u32()? as usize;
    let mut pos = r.pos;
    let mut cts = Vec::with_capacity(count);
    for _ in 0..count {
        let (ct, used) = decode(&bytes[pos..])?;
        cts.push(ct);
        pos += used;
    }
    Ok((cts, pos))
}

/// Little-endian cursor shared with the protocol message codecs.
pub(crate) struct Reader<'a> {
    bytes: &'a [u8],
    pub(crate) pos: usize,
}

impl<'a> Reader<'a> {
    pub(crate) fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    pub(crate) fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        let end = self.pos + N;
        let slice = self
            .bytes
            .get(self.pos..end)
            .ok_or_else(|| Error::Format(format!("truncated input at byte {}", self.pos)))?;
        self.pos = end;
        Ok(slice.try_into().expect("slice has length N"))
    }

    pub(crate) fn u8(&mut self) -> Result<u8> {
        Ok(self.array::<1>()?[0])
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array()?))
    }

    pub(crate) fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array()?))
    }

    pub(crate) fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.array()?))
    }

    pub(crate) fn rest(&self) -> &'a [u8] {
        &self.bytes[self.pos..]
    }
}
