//! Additive-only RLWE encryption over `Z_q[X]/(X^N + 1)` with coefficient
//! packing.
//!
//! Slot `i` of a chunk is coefficient `i` of the plaintext polynomial, encoded
//! as `round(v · 2^scale_bits)`. Coefficient-wise ring addition is therefore
//! exactly slot-wise addition. Only the lower `N/2` coefficients carry slots,
//! matching the slot count of a CKKS ciphertext at the same ring dimension.
//!
//! Structure-faithful, not production-secure: a single 60-bit modulus, ternary
//! secrets and σ = 3.2 errors, with no parameter selection for any security
//! level.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Normal};

use super::{modeled_ciphertext_bytes, BackendTag, Body, Ciphertext, HeBackend, HeParams, KeyPair, PublicKey, SecretKey};
use crate::error::{Error, Result};

/// NTT-friendly prime `q ≡ 1 (mod 2^18)`, just under `2^60`.
const Q: u64 = 1_152_921_504_606_584_833;
/// Generator of `Z_q^*`.
const GENERATOR: u64 = 10;
/// Largest supported ring dimension (`2N` must divide `q − 1`).
const MAX_RING_DIM: usize = 1 << 17;
/// Fixed-point precision of plaintext scalars in [`ToyRlwe::scale_plain`].
pub const PLAIN_SCALE_BITS: u32 = 20;
const ERROR_SIGMA: f64 = 3.2;

#[inline]
fn mul_mod(a: u64, b: u64) -> u64 {
    ((a as u128 * b as u128) % Q as u128) as u64
}

#[inline]
fn add_mod(a: u64, b: u64) -> u64 {
    let s = a + b;
    if s >= Q {
        s - Q
    } else {
        s
    }
}

#[inline]
fn sub_mod(a: u64, b: u64) -> u64 {
    if a >= b {
        a - b
    } else {
        a + Q - b
    }
}

fn pow_mod(mut base: u64, mut exp: u64) -> u64 {
    let mut acc = 1;
    while exp > 0 {
        if exp & 1 == 1 {
            acc = mul_mod(acc, base);
        }
        base = mul_mod(base, base);
        exp >>= 1;
    }
    acc
}

fn from_signed(v: i64) -> u64 {
    if v >= 0 {
        v as u64 % Q
    } else {
        Q - ((-v) as u64 % Q)
    }
}

fn centered(v: u64) -> i128 {
    if v > Q / 2 {
        v as i128 - Q as i128
    } else {
        v as i128
    }
}

/// Negacyclic number-theoretic transform of length `n`.
#[derive(Debug, Clone)]
struct Ntt {
    n: usize,
    psi: Vec<u64>,
    psi_inv: Vec<u64>,
    roots: Vec<u64>,
    inv_roots: Vec<u64>,
    n_inv: u64,
}

impl Ntt {
    fn new(n: usize) -> Self {
        let psi_root = pow_mod(GENERATOR, (Q - 1) / (2 * n as u64));
        debug_assert_eq!(pow_mod(psi_root, n as u64), Q - 1);
        let psi_root_inv = pow_mod(psi_root, Q - 2);
        let omega = mul_mod(psi_root, psi_root);
        let omega_inv = mul_mod(psi_root_inv, psi_root_inv);
        let powers = |base: u64, count: usize| {
            let mut v = Vec::with_capacity(count);
            let mut x = 1;
            for _ in 0..count {
                v.push(x);
                x = mul_mod(x, base);
            }
            v
        };
        Self {
            n,
            psi: powers(psi_root, n),
            psi_inv: powers(psi_root_inv, n),
            roots: powers(omega, n / 2),
            inv_roots: powers(omega_inv, n / 2),
            n_inv: pow_mod(n as u64, Q - 2),
        }
    }

    fn forward(&self, a: &mut [u64]) {
        for (x, p) in a.iter_mut().zip(&self.psi) {
            *x = mul_mod(*x, *p);
        }
        self.cyclic(a, &self.roots);
    }

    fn inverse(&self, a: &mut [u64]) {
        self.cyclic(a, &self.inv_roots);
        for (x, p) in a.iter_mut().zip(&self.psi_inv) {
            *x = mul_mod(mul_mod(*x, self.n_inv), *p);
        }
    }

    fn cyclic(&self, a: &mut [u64], roots: &[u64]) {
        let n = self.n;
        let bits = n.trailing_zeros();
        if bits > 0 {
            for i in 0..n {
                let j = i.reverse_bits() >> (usize::BITS - bits);
                if i < j {
                    a.swap(i, j);
                }
            }
        }
        let mut len = 2;
        while len <= n {
            let half = len / 2;
            let step = n / len;
            for start in (0..n).step_by(len) {
                for j in 0..half {
                    let w = roots[j * step];
                    let u = a[start + j];
                    let v = mul_mod(a[start + j + half], w);
                    a[start + j] = add_mod(u, v);
                    a[start + j + half] = sub_mod(u, v);
                }
            }
            len <<= 1;
        }
    }

    /// Negacyclic product of `a` (coefficients) with `b_hat` (already transformed).
    fn mul_transformed(&self, a: &[u64], b_hat: &[u64]) -> Vec<u64> {
        let mut a_hat = a.to_vec();
        self.forward(&mut a_hat);
        for (x, y) in a_hat.iter_mut().zip(b_hat) {
            *x = mul_mod(*x, *y);
        }
        self.inverse(&mut a_hat);
        a_hat
    }
}

/// Toy additive RLWE backend.
#[derive(Debug, Clone)]
pub struct ToyRlwe {
    params: HeParams,
    digest: u64,
    ntt: Ntt,
    noise: Normal<f64>,
}

impl ToyRlwe {
    pub fn new(params: HeParams) -> Result<Self> {
        params.validate()?;
        if params.ring_dim > MAX_RING_DIM {
            return Err(Error::Parameter(format!(
                "toy scheme supports ring dimensions up to {MAX_RING_DIM}, got {}",
                params.ring_dim
            )));
        }
        if params.scale_bits == 0 || params.scale_bits > 40 {
            return Err(Error::Parameter(format!(
                "encoding scale 2^{} outside 2^1..=2^40",
                params.scale_bits
            )));
        }
        Ok(Self {
            digest: params.digest(),
            ntt: Ntt::new(params.ring_dim),
            noise: Normal::new(0.0, ERROR_SIGMA).expect("valid sigma"),
            params,
        })
    }

    /// The ciphertext modulus.
    pub fn modulus() -> u64 {
        Q
    }

    fn ternary<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<u64> {
        (0..self.params.ring_dim)
            .map(|_| from_signed(rng.random_range(-1i64..=1)))
            .collect()
    }

    fn gaussian<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<u64> {
        (0..self.params.ring_dim)
            .map(|_| from_signed(self.noise.sample(rng).round() as i64))
            .collect()
    }

    fn wrap(&self, c0: Vec<u64>, c1: Vec<u64>, scale_bits: u32) -> Ciphertext {
        Ciphertext {
            backend: BackendTag::ToyRlwe,
            params_digest: self.digest,
            slot_count: self.params.slots(),
            scale_bits,
            size_bytes: modeled_ciphertext_bytes(&self.params),
            body: Body::Rlwe { c0, c1 },
        }
    }

    fn parts<'a>(&self, ct: &'a Ciphertext) -> Result<(&'a [u64], &'a [u64])> {
        if ct.backend != BackendTag::ToyRlwe || ct.params_digest != self.digest {
            return Err(Error::Incompatible(format!(
                "{} ciphertext given to the toy RLWE backend",
                ct.backend
            )));
        }
        match &ct.body {
            Body::Rlwe { c0, c1 } if c0.len() == self.params.ring_dim && c1.len() == c0.len() => {
                Ok((c0, c1))
            }
            _ => Err(Error::Incompatible("malformed RLWE ciphertext body".into())),
        }
    }

    fn encode(&self, chunk: &[f64]) -> Result<Vec<u64>> {
        if chunk.len() > self.params.slots() {
            return Err(Error::Parameter(format!(
                "{} values exceed {} slots",
                chunk.len(),
                self.params.slots()
            )));
        }
        let scale = (self.params.scale_bits as f64).exp2();
        let limit = (Q / 4) as f64;
        let mut poly = vec![0u64; self.params.ring_dim];
        for (i, &v) in chunk.iter().enumerate() {
            if !v.is_finite() {
                return Err(Error::Encoding(format!("non-finite value {v} at slot {i}")));
            }
            let x = (v * scale).round();
            if x.abs() >= limit {
                return Err(Error::Encoding(format!(
                    "value {v} at slot {i} overflows the plaintext space"
                )));
            }
            poly[i] = from_signed(x as i64);
        }
        Ok(poly)
    }
}

impl HeBackend for ToyRlwe {
    fn tag(&self) -> BackendTag {
        BackendTag::ToyRlwe
    }

    fn params(&self) -> &HeParams {
        &self.params
    }

    /// `s` ternary, `pk = (−a·s + e, a)`. Keys are stored in the NTT domain.
    fn keygen(&self, seed: u64) -> Result<KeyPair> {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let mut s = self.ternary(&mut rng);
        let a: Vec<u64> = (0..self.params.ring_dim)
            .map(|_| rng.random_range(0..Q))
            .collect();
        let e = self.gaussian(&mut rng);
        self.ntt.forward(&mut s);
        let a_s = self.ntt.mul_transformed(&a, &s);
        let mut b: Vec<u64> = a_s
            .iter()
            .zip(&e)
            .map(|(x, e)| add_mod(sub_mod(0, *x), *e))
            .collect();
        let mut a_hat = a;
        self.ntt.forward(&mut b);
        self.ntt.forward(&mut a_hat);
        Ok(KeyPair {
            public: PublicKey::Rlwe { b, a: a_hat },
            secret: SecretKey::Rlwe { s },
        })
    }

    /// `(b·u + e1 + m, a·u + e2)` with `u` ternary.
    fn encrypt(&self, pk: &PublicKey, chunk: &[f64], rng: &mut dyn RngCore) -> Result<Ciphertext> {
        let PublicKey::Rlwe { b, a } = pk else {
            return Err(Error::Incompatible("non-RLWE public key".into()));
        };
        if b.len() != self.params.ring_dim {
            return Err(Error::Incompatible("public key ring dimension differs".into()));
        }
        let m = self.encode(chunk)?;
        let mut u_hat = self.ternary(rng);
        let e1 = self.gaussian(rng);
        let e2 = self.gaussian(rng);
        self.ntt.forward(&mut u_hat);
        let mut bu: Vec<u64> = b.iter().zip(&u_hat).map(|(x, y)| mul_mod(*x, *y)).collect();
        let mut au: Vec<u64> = a.iter().zip(&u_hat).map(|(x, y)| mul_mod(*x, *y)).collect();
        self.ntt.inverse(&mut bu);
        self.ntt.inverse(&mut au);
        let c0 = bu
            .iter()
            .zip(&e1)
            .zip(&m)
            .map(|((x, e), m)| add_mod(add_mod(*x, *e), *m))
            .collect();
        let c1 = au.iter().zip(&e2).map(|(x, e)| add_mod(*x, *e)).collect();
        Ok(self.wrap(c0, c1, self.params.scale_bits))
    }

    fn add(&self, a: &Ciphertext, b: &Ciphertext) -> Result<Ciphertext> {
        a.check_compatible(b)?;
        let (a0, a1) = self.parts(a)?;
        let (b0, b1) = self.parts(b)?;
        let c0 = a0.iter().zip(b0).map(|(x, y)| add_mod(*x, *y)).collect();
        let c1 = a1.iter().zip(b1).map(|(x, y)| add_mod(*x, *y)).collect();
        Ok(self.wrap(c0, c1, a.scale_bits))
    }

    /// Multiplies by `round(c · 2^20)` and raises the scale by 20 bits. Decoded
    /// magnitudes must stay below `2^(59 − scale_bits)`.
    fn scale_plain(&self, a: &Ciphertext, c: f64) -> Result<Ciphertext> {
        if !c.is_finite() {
            return Err(Error::Encoding(format!("non-finite scalar {c}")));
        }
        let scale_bits = a.scale_bits + PLAIN_SCALE_BITS;
        if scale_bits >= 59 {
            return Err(Error::Encoding(format!(
                "scale 2^{scale_bits} leaves no room in a 60-bit modulus"
            )));
        }
        let factor = (c * f64::from(PLAIN_SCALE_BITS).exp2()).round();
        if factor.abs() >= (1u64 << 40) as f64 {
            return Err(Error::Encoding(format!("scalar {c} too large")));
        }
        let k = from_signed(factor as i64);
        let (a0, a1) = self.parts(a)?;
        let c0 = a0.iter().map(|x| mul_mod(*x, k)).collect();
        let c1 = a1.iter().map(|x| mul_mod(*x, k)).collect();
        Ok(self.wrap(c0, c1, scale_bits))
    }

    fn decrypt(&self, sk: &SecretKey, ct: &Ciphertext) -> Result<Vec<f64>> {
        let SecretKey::Rlwe { s } = sk else {
            return Err(Error::Incompatible("non-RLWE secret key".into()));
        };
        if s.len() != self.params.ring_dim {
            return Err(Error::Incompatible("secret key ring dimension differs".into()));
        }
        let (c0, c1) = self.parts(ct)?;
        let c1s = self.ntt.mul_transformed(c1, s);
        let inv_scale = (-f64::from(ct.scale_bits)).exp2();
        Ok(c0[..self.params.slots()]
            .iter()
            .zip(&c1s)
            .map(|(x, y)| centered(add_mod(*x, *y)) as f64 * inv_scale)
            .collect())
    }
}
