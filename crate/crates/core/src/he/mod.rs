//! Slot-packed additively homomorphic encryption.
//!
//! Two interchangeable backends implement [`HeBackend`]:
//!
//! * [`ToyRlwe`]: an additive-only RLWE scheme with coefficient packing. It
//!   has the structure of the real thing (public-key encryption, noise,
//!   slot-wise addition, plaintext scaling) but makes no security claim.
//! * [`MockBackend`]: plaintext "ciphertexts" that are exact, for oracle tests.
//!
//! Communication accounting never depends on the backend: every byte count is
//! derived from [`modeled_ciphertext_bytes`] at the configured accounting
//! parameters (by default the production CKKS setting, see [`HeParams::production`]).

mod mock;
mod rlwe;
pub mod wire;

use std::fmt;

use rand::RngCore;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub use mock::MockBackend;
pub use rlwe::ToyRlwe;

/// Default absolute tolerance for decrypted values.
pub const DEFAULT_NOISE_TOLERANCE: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct HeParams {
    /// Ring dimension `N`, a power of two.
    pub ring_dim: usize,
    /// Total bit width of the ciphertext modulus.
    pub coeff_modulus_bits: u32,
    /// Encoding scale exponent: reals are encoded as `round(v · 2^scale_bits)`.
    pub scale_bits: u32,
}

impl HeParams {
    /// CKKS parameters of the reference deployment: `N = 2^16`, a 1555-bit
    /// modulus, 32,768 slots per ciphertext.
    pub const fn production() -> Self {
        Self {
            ring_dim: 1 << 16,
            coeff_modulus_bits: 1555,
            scale_bits: 40,
        }
    }

    /// Desk-scale parameters for the toy scheme.
    pub const fn toy() -> Self {
        Self {
            ring_dim: 1 << 10,
            coeff_modulus_bits: 60,
            scale_bits: 30,
        }
    }

    pub fn with_ring_dim(self, ring_dim: usize) -> Self {
        Self { ring_dim, ..self }
    }

    pub fn slots(&self) -> usize {
        self.ring_dim / 2
    }

    pub fn validate(&self) -> Result<()> {
        if self.ring_dim < 2 || !self.ring_dim.is_power_of_two() {
            return Err(Error::Parameter(format!(
                "ring dimension {} is not a power of two >= 2",
                self.ring_dim
            )));
        }
        if self.coeff_modulus_bits == 0 {
            return Err(Error::Parameter("zero-width ciphertext modulus".into()));
        }
        Ok(())
    }

    /// First 8 bytes of SHA-256 over the little-endian parameter fields.
    pub fn digest(&self) -> u64 {
        let mut h = Sha256::new();
        h.update((self.ring_dim as u64).to_le_bytes());
        h.update(self.coeff_modulus_bits.to_le_bytes());
        h.update(self.scale_bits.to_le_bytes());
        let out = h.finalize();
        u64::from_le_bytes(out[..8].try_into().expect("sha256 is 32 bytes"))
    }

    /// Number of ciphertexts needed to pack `len` values.
    pub fn ciphertexts_for(&self, len: usize) -> usize {
        len.div_ceil(self.slots())
    }
}

/// Wire size of one ciphertext: two ring elements of `N` coefficients at the
/// full modulus width, `2 · N · ⌈bits/8⌉`.
pub fn modeled_ciphertext_bytes(params: &HeParams) -> u64 {
    2 * params.ring_dim as u64 * u64::from(params.coeff_modulus_bits.div_ceil(8))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BackendTag {
    Mock,
    ToyRlwe,
}

impl BackendTag {
    pub fn wire_tag(self) -> [u8; 4] {
        match self {
            BackendTag::Mock => *b"MOCK",
            BackendTag::ToyRlwe => *b"RLWE",
        }
    }

    pub fn from_wire(tag: [u8; 4]) -> Result<Self> {
        match &tag {
            b"MOCK" => Ok(BackendTag::Mock),
            b"RLWE" => Ok(BackendTag::ToyRlwe),
            _ => Err(Error::Format(format!("unknown backend tag {tag:?}"))),
        }
    }
}

impl fmt::Display for BackendTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BackendTag::Mock => "mock",
            BackendTag::ToyRlwe => "toy-rlwe",
        })
    }
}

#[derive(Clone, PartialEq)]
pub(crate) enum Body {
    Mock(Vec<f64>),
    Rlwe { c0: Vec<u64>, c1: Vec<u64> },
}

/// One packed ciphertext.
#[derive(Clone, PartialEq)]
pub struct Ciphertext {
    pub(crate) backend: BackendTag,
    pub(crate) params_digest: u64,
    pub(crate) slot_count: usize,
    /// Current encoding scale exponent; plaintext scaling raises it.
    pub(crate) scale_bits: u32,
    pub(crate) size_bytes: u64,
    pub(crate) body: Body,
}

impl fmt::Debug for Ciphertext {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Ciphertext")
            .field("backend", &self.backend)
            .field("slot_count", &self.slot_count)
            .field("scale_bits", &self.scale_bits)
            .field("size_bytes", &self.size_bytes)
            .finish_non_exhaustive()
    }
}

impl Ciphertext {
    pub fn backend(&self) -> BackendTag {
        self.backend
    }

    pub fn slot_count(&self) -> usize {
        self.slot_count
    }

    pub fn size_bytes(&self) -> u64 {
        self.size_bytes
    }

    pub fn params_digest(&self) -> u64 {
        self.params_digest
    }

    pub(crate) fn check_compatible(&self, other: &Ciphertext) -> Result<()> {
        if self.backend != other.backend {
            return Err(Error::Incompatible(format!(
                "backends {} and {}",
                self.backend, other.backend
            )));
        }
        if self.params_digest != other.params_digest {
            return Err(Error::Incompatible("parameter sets differ".into()));
        }
        if self.slot_count != other.slot_count {
            return Err(Error::Incompatible(format!(
                "slot counts {} and {}",
                self.slot_count, other.slot_count
            )));
        }
        if self.scale_bits != other.scale_bits {
            return Err(Error::Incompatible(format!(
                "scales 2^{} and 2^{}",
                self.scale_bits, other.scale_bits
            )));
        }
        Ok(())
    }
}

#[derive(Clone, PartialEq)]
pub enum PublicKey {
    Mock { seed: u64 },
    Rlwe { b: Vec<u64>, a: Vec<u64> },
}

#[derive(Clone, PartialEq)]
pub enum SecretKey {
    Mock { seed: u64 },
    Rlwe { s: Vec<u64> },
}

impl fmt::Debug for PublicKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("PublicKey(..)")
    }
}

impl fmt::Debug for SecretKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("SecretKey(..)")
    }
}

/// Key pair issued by the key authority and shared by all clients.
#[derive(Debug, Clone, PartialEq)]
pub struct KeyPair {
    pub public: PublicKey,
    pub secret: SecretKey,
}

/// An additively homomorphic scheme over packed real vectors.
///
/// Implementations are stateless after construction and safe to share
/// between client threads.
pub trait HeBackend: Send + Sync + fmt::Debug {
    fn tag(&self) -> BackendTag;

    fn params(&self) -> &HeParams;

    /// Deterministic for a fixed seed.
    fn keygen(&self, seed: u64) -> Result<KeyPair>;

    /// Encrypts one chunk of at most `slots` values; the rest are zero.
    fn encrypt(&self, pk: &PublicKey, chunk: &[f64], rng: &mut dyn RngCore) -> Result<Ciphertext>;

    /// Slot-wise sum.
    fn add(&self, a: &Ciphertext, b: &Ciphertext) -> Result<Ciphertext>;

    /// Multiplies every slot by a plaintext constant.
    fn scale_plain(&self, a: &Ciphertext, c: f64) -> Result<Ciphertext>;

    /// Decodes all slots.
    fn decrypt(&self, sk: &SecretKey, ct: &Ciphertext) -> Result<Vec<f64>>;

    fn slots(&self) -> usize {
        self.params().slots()
    }
}

/// Splits `values` into `⌈len/slots⌉` chunks and encrypts each one.
pub fn pack_encrypt(
    backend: &dyn HeBackend,
    pk: &PublicKey,
    values: &[f64],
    rng: &mut dyn RngCore,
) -> Result<Vec<Ciphertext>> {
    if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
        return Err(Error::Encoding(format!(
            "non-finite value {} at position {pos}",
            values[pos]
        )));
    }
    values
        .chunks(backend.slots())
        .map(|chunk| backend.encrypt(pk, chunk, rng))
        .collect()
}

/// Decrypts and concatenates `cts`, keeping the first `len` values.
pub fn decrypt_unpack(
    backend: &dyn HeBackend,
    sk: &SecretKey,
    cts: &[Ciphertext],
    len: usize,
) -> Result<Vec<f64>> {
    let capacity = cts.len() * backend.slots();
    if len > capacity {
        return Err(Error::Parameter(format!(
            "requested {len} values from {} ciphertexts holding {capacity}",
            cts.len()
        )));
    }
    let mut out = Vec::with_capacity(capacity);
    for ct in cts {
        out.extend(backend.decrypt(sk, ct)?);
    }
    out.truncate(len);
    Ok(out)
}

/// Element-wise ciphertext sum across equally long lists.
pub fn add_lists(backend: &dyn HeBackend, a: &[Ciphertext], b: &[Ciphertext]) -> Result<Vec<Ciphertext>> {
    if a.len() != b.len() {
        return Err(Error::Incompatible(format!(
            "{} and {} ciphertexts",
            a.len(),
            b.len()
        )));
    }
    a.iter().zip(b).map(|(x, y)| backend.add(x, y)).collect()
}

/// Backend selector used by configuration and the CLI.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BackendKind {
    Mock,
    ToyRlwe,
}

impl BackendKind {
    pub fn build(self, params: HeParams) -> Result<Box<dyn HeBackend>> {
        Ok(match self {
            BackendKind::Mock => Box::new(MockBackend::new(params)?),
            BackendKind::ToyRlwe => Box::new(ToyRlwe::new(params)?),
        })
    }
}

impl std::str::FromStr for BackendKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mock" => Ok(BackendKind::Mock),
            "toy-rlwe" | "rlwe" | "toy" => Ok(BackendKind::ToyRlwe),
            other => Err(Error::Parameter(format!("unknown backend '{other}'"))),
        }
    }
}

impl fmt::Display for BackendKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BackendKind::Mock => "mock",
            BackendKind::ToyRlwe => "toy-rlwe",
        })
    }
}
