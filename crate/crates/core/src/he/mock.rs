use rand::RngCore;

use super::{modeled_ciphertext_bytes, BackendTag, Body, Ciphertext, HeBackend, HeParams, KeyPair, PublicKey, SecretKey};
use crate::error::{Error, Result};

/// Plaintext stand-in: ciphertexts carry the slot values themselves, so every
/// operation is exact. Same chunking and size model as a real backend.
#[derive(Debug, Clone)]
pub struct MockBackend {
    params: HeParams,
    digest: u64,
}

impl MockBackend {
    pub fn new(params: HeParams) -> Result<Self> {
        params.validate()?;
        Ok(Self {
            digest: params.digest(),
            params,
        })
    }

    fn wrap(&self, slots: Vec<f64>) -> Ciphertext {
        Ciphertext {
            backend: BackendTag::Mock,
            params_digest: self.digest,
            slot_count: self.params.slots(),
            scale_bits: 0,
            size_bytes: modeled_ciphertext_bytes(&self.params),
            body: Body::Mock(slots),
        }
    }

    fn slots_of<'a>(&self, ct: &'a Ciphertext) -> Result<&'a [f64]> {
        if ct.backend != BackendTag::Mock || ct.params_digest != self.digest {
            return Err(Error::Incompatible(format!(
                "{} ciphertext given to the mock backend",
                ct.backend
            )));
        }
        match &ct.body {
            Body::Mock(v) => Ok(v),
            Body::Rlwe { .. } => Err(Error::Incompatible("RLWE body in a mock ciphertext".into())),
        }
    }
}

impl HeBackend for MockBackend {
    fn tag(&self) -> BackendTag {
        BackendTag::Mock
    }

    fn params(&self) -> &HeParams {
        &self.params
    }

    fn keygen(&self, seed: u64) -> Result<KeyPair> {
        Ok(KeyPair {
            public: PublicKey::Mock { seed },
            secret: SecretKey::Mock { seed },
        })
    }

    fn encrypt(&self, pk: &PublicKey, chunk: &[f64], _rng: &mut dyn RngCore) -> Result<Ciphertext> {
        if !matches!(pk, PublicKey::Mock { .. }) {
            return Err(Error::Incompatible("non-mock public key".into()));
        }
        if chunk.len() > self.params.slots() {
            return Err(Error::Parameter(format!(
                "{} values exceed {} slots",
                chunk.len(),
                self.params.slots()
            )));
        }
        if let Some(v) = chunk.iter().find(|v| !v.is_finite()) {
            return Err(Error::Encoding(format!("non-finite value {v}")));
        }
        let mut slots = chunk.to_vec();
        slots.resize(self.params.slots(), 0.0);
        Ok(self.wrap(slots))
    }

    fn add(&self, a: &Ciphertext, b: &Ciphertext) -> Result<Ciphertext> {
        a.check_compatible(b)?;
        let sum = self
            .slots_of(a)?
            .iter()
            .zip(self.slots_of(b)?)
            .map(|(x, y)| x + y)
            .collect();
        Ok(self.wrap(sum))
    }

    fn scale_plain(&self, a: &Ciphertext, c: f64) -> Result<Ciphertext> {
        if !c.is_finite() {
            return Err(Error::Encoding(format!("non-finite scalar {c}")));
        }
        Ok(self.wrap(self.slots_of(a)?.iter().map(|x| x * c).collect()))
    }

    fn decrypt(&self, sk: &SecretKey, ct: &Ciphertext) -> Result<Vec<f64>> {
        if !matches!(sk, SecretKey::Mock { .. }) {
            return Err(Error::Incompatible("non-mock secret key".into()));
        }
        Ok(self.slots_of(ct)?.to_vec())
    }
}
