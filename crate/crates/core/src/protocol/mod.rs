//! Client/server round engine for DictPFL and the encrypted baselines.
//!
//! A round runs local training, selection, packing and encryption on every
//! client in parallel, then a server-side slot-wise sum scaled by `1/K`,
//! then broadcast, decryption and the model update on every client. The
//! server only ever handles ciphertexts (and, for select-and-encrypt, the
//! plaintext remainder that baseline deliberately leaks).

mod engine;
mod messages;

use std::fmt;
use std::str::FromStr;

pub use engine::{aggregate, sae_selection, ClientState, Federation, SaeSelection, ServerState};
pub use messages::{Broadcast, Upload};

use crate::error::{Error, Result};
use crate::he::HeParams;
use crate::netsim::ComputeCostModel;
use crate::prme::PruneConfig;
use crate::trainer::LocalTrainConfig;

/// What each client trains and encrypts.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Strategy {
    /// Lookup tables plus biases, pruned by PrME.
    DictPfl,
    /// Every parameter, all encrypted.
    FedHeFull,
    /// Only the last `k` layers are trained and encrypted.
    FedHeTopK(usize),
    /// Every parameter; the most sensitive fraction is encrypted, the rest
    /// travels in the clear.
    SaE(f64),
}

impl Strategy {
    pub fn validate(&self) -> Result<()> {
        match *self {
            Strategy::SaE(f) if !(f > 0.0 && f <= 1.0) => Err(Error::Parameter(format!(
                "select-and-encrypt fraction {f} outside (0, 1]"
            ))),
            _ => Ok(()),
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Strategy::DictPfl => f.write_str("dictpfl"),
            Strategy::FedHeFull => f.write_str("full"),
            Strategy::FedHeTopK(k) => write!(f, "top{k}"),
            Strategy::SaE(frac) => write!(f, "sae:{frac}"),
        }
    }
}

impl FromStr for Strategy {
    type Err = Error;

    /// Accepts `dictpfl`, `full`, `topK` / `top:K`, `sae` / `sae:F`.
    fn from_str(s: &str) -> Result<Self> {
        let lower = s.trim().to_ascii_lowercase();
        let bad = || Error::Parameter(format!("unknown strategy '{s}'"));
        let strategy = match lower.as_str() {
            "dictpfl" => Strategy::DictPfl,
            "full" | "fedhe-full" => Strategy::FedHeFull,
            "sae" | "fedml-he" => Strategy::SaE(0.1),
            _ => {
                if let Some(rest) = lower.strip_prefix("sae:") {
                    Strategy::SaE(rest.parse().map_err(|_| bad())?)
                } else if let Some(rest) = lower
                    .strip_prefix("fedhe-top")
                    .or_else(|| lower.strip_prefix("top"))
                {
                    let k = rest.strip_prefix(':').unwrap_or(rest);
                    Strategy::FedHeTopK(k.parse().map_err(|_| bad())?)
                } else {
                    return Err(bad());
                }
            }
        };
        strategy.validate()?;
        Ok(strategy)
    }
}

/// Layout of DictPFL uploads.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Packing {
    /// Only active table entries, in shared sorted order.
    #[default]
    Compacted,
    /// The whole table with inactive entries zeroed.
    Padded,
}

impl FromStr for Packing {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "compacted" | "compact" => Ok(Packing::Compacted),
            "padded" | "dense" => Ok(Packing::Padded),
            _ => Err(Error::Parameter(format!("unknown packing '{s}'"))),
        }
    }
}

/// How compute phases are timed. Network phases are always simulated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Timing {
    /// Derived from [`ComputeCostModel`]; reproducible.
    #[default]
    Modeled,
    /// Wall clock.
    Measured,
}

impl FromStr for Timing {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "modeled" | "model" => Ok(Timing::Modeled),
            "measured" | "wall" => Ok(Timing::Measured),
            _ => Err(Error::Parameter(format!("unknown timing mode '{s}'"))),
        }
    }
}

impl fmt::Display for Timing {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Timing::Modeled => "modeled",
            Timing::Measured => "measured",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FederationConfig {
    pub strategy: Strategy,
    /// Dictionary size, clamped to `min(n, m)` per layer.
    pub rank: usize,
    pub prune: PruneConfig,
    pub train: LocalTrainConfig,
    pub packing: Packing,
    /// Seeds key generation and encryption randomness.
    pub seed: u64,
    /// Parameters used for byte accounting.
    pub accounting: HeParams,
    pub timing: Timing,
    pub costs: ComputeCostModel,
    /// Worker threads; 0 picks `min(K, available cores)`.
    pub threads: usize,
}

impl Default for FederationConfig {
    fn default() -> Self {
        Self {
            strategy: Strategy::DictPfl,
            rank: 4,
            prune: PruneConfig::default(),
            train: LocalTrainConfig::default(),
            packing: Packing::default(),
            seed: 0,
            accounting: HeParams::production(),
            timing: Timing::default(),
            costs: ComputeCostModel::default(),
            threads: 0,
        }
    }
}

impl FederationConfig {
    pub fn validate(&self) -> Result<()> {
        self.strategy.validate()?;
        if self.rank == 0 {
            return Err(Error::Parameter("rank must be at least 1".into()));
        }
        self.prune.validate()?;
        self.accounting.validate()?;
        if !(self.train.lr.is_finite() && self.train.lr >= 0.0) {
            return Err(Error::Parameter(format!("learning rate {} must be finite and non-negative", self.train.lr)));
        }
        if self.train.epochs == 0 {
            return Err(Error::Parameter("local epochs must be at least 1".into()));
        }
        Ok(())
    }
}

/// Seconds spent in each phase of a round.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct PhaseTimes {
    pub local_train: f64,
    pub encrypt: f64,
    pub upload: f64,
    pub aggregate: f64,
    pub download: f64,
    pub decrypt: f64,
    pub update: f64,
}

impl PhaseTimes {
    pub const NAMES: [&'static str; 7] = [
        "local_train",
        "encrypt",
        "upload",
        "aggregate",
        "download",
        "decrypt",
        "update",
    ];

    pub fn as_array(&self) -> [f64; 7] {
        [
            self.local_train,
            self.encrypt,
            self.upload,
            self.aggregate,
            self.download,
            self.decrypt,
            self.update,
        ]
    }

    pub fn total(&self) -> f64 {
        self.as_array().iter().sum()
    }
}

/// Bytes moved in a round, summed over all clients.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ByteCounts {
    pub ciphertext_up: u64,
    pub ciphertext_down: u64,
    pub plaintext_up: u64,
    pub plaintext_down: u64,
}

impl ByteCounts {
    pub fn total(&self) -> u64 {
        self.ciphertext_up + self.ciphertext_down + self.plaintext_up + self.plaintext_down
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoundMetrics {
    pub round: u64,
    pub times: PhaseTimes,
    pub bytes: ByteCounts,
    /// Ciphertexts uploaded, over all clients.
    pub ciphertexts_up: u64,
    /// Ciphertexts in the broadcast aggregate.
    pub ciphertexts_broadcast: u64,
    /// Encrypted values per client upload.
    pub encrypted_elements: u64,
    /// Plaintext values per client upload.
    pub plaintext_elements: u64,
    /// Mean local training loss across clients.
    pub train_loss: f64,
    /// Loss and accuracy of the updated model on the evaluation set.
    pub loss: f64,
    pub accuracy: f64,
}

impl RoundMetrics {
    pub fn ciphertext_count(&self) -> u64 {
        self.ciphertexts_up + self.ciphertexts_broadcast
    }
}
