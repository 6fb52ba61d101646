//! Deterministic network/time model and analytic communication accounting.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::he::{modeled_ciphertext_bytes, HeParams};
use crate::protocol::Strategy;

/// Bytes per plaintext gradient element on the wire.
pub const PLAINTEXT_BYTES_PER_ELEMENT: u64 = 8;

#[derive(Debug, Clone, PartialEq)]
pub struct NetProfile {
    pub name: String,
    pub bandwidth_bps_up: f64,
    pub bandwidth_bps_down: f64,
    pub latency_s: f64,
}

impl NetProfile {
    pub fn new(name: impl Into<String>, up_bps: f64, down_bps: f64, latency_s: f64) -> Result<Self> {
        if !(up_bps > 0.0 && down_bps > 0.0) || !up_bps.is_finite() || !down_bps.is_finite() {
            return Err(Error::Parameter("bandwidth must be positive and finite".into()));
        }
        if !latency_s.is_finite() || latency_s < 0.0 {
            return Err(Error::Parameter("latency must be non-negative".into()));
        }
        Ok(Self {
            name: name.into(),
            bandwidth_bps_up: up_bps,
            bandwidth_bps_down: down_bps,
            latency_s,
        })
    }

    /// 1 Gbps symmetric, 0.5 ms.
    pub fn lan() -> Self {
        Self::new("lan", 1e9, 1e9, 0.0005).expect("valid profile")
    }

    /// 100 Mbps symmetric, 50 ms. An assumed wide-area setting.
    pub fn wan() -> Self {
        Self::new("wan", 1e8, 1e8, 0.05).expect("valid profile")
    }

    pub fn upload_time(&self, bytes: u64) -> f64 {
        transfer_time(bytes, self.bandwidth_bps_up, self.latency_s)
    }

    pub fn download_time(&self, bytes: u64) -> f64 {
        transfer_time(bytes, self.bandwidth_bps_down, self.latency_s)
    }
}

impl FromStr for NetProfile {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lan" => Ok(Self::lan()),
            "wan" => Ok(Self::wan()),
            other => Err(Error::Parameter(format!("unknown network profile '{other}'"))),
        }
    }
}

/// `latency + bytes·8 / bandwidth`, in seconds.
pub fn transfer_time(bytes: u64, bandwidth_bps: f64, latency_s: f64) -> f64 {
    latency_s + bytes as f64 * 8.0 / bandwidth_bps
}

/// Per-operation compute costs used when timing is modeled rather than
/// measured. The defaults are assumed figures for `N = 2^16` CKKS on one core
/// and a scalar CPU training loop; only their relative sizes matter for the
/// breakdown.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ComputeCostModel {
    pub encrypt_s_per_ct: f64,
    pub decrypt_s_per_ct: f64,
    pub add_s_per_ct: f64,
    pub scale_s_per_ct: f64,
    pub train_s_per_mac: f64,
    pub update_s_per_param: f64,
}

impl Default for ComputeCostModel {
    fn default() -> Self {
        Self {
            encrypt_s_per_ct: 0.06,
            decrypt_s_per_ct: 0.03,
            add_s_per_ct: 0.0015,
            scale_s_per_ct: 0.01,
            train_s_per_mac: 1e-9,
            update_s_per_param: 1e-9,
        }
    }
}

/// One weight matrix of shape `n × m`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerShape {
    pub name: String,
    pub n: usize,
    pub m: usize,
}

impl LayerShape {
    pub fn params(&self) -> u64 {
        self.n as u64 * self.m as u64
    }
}

/// Layer shapes of a model, one `name n m` line per layer. `#` starts a
/// comment.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ShapeManifest {
    pub layers: Vec<LayerShape>,
}

impl ShapeManifest {
    pub fn parse(text: &str) -> Result<Self> {
        let mut layers = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split_whitespace().collect();
            let [name, n, m] = fields[..] else {
                return Err(Error::Format(format!(
                    "manifest line {}: expected 'name n m', got '{line}'",
                    lineno + 1
                )));
            };
            let dim = |s: &str| -> Result<usize> {
                match s.parse::<usize>() {
                    Ok(v) if v > 0 => Ok(v),
                    _ => Err(Error::Format(format!(
                        "manifest line {}: '{s}' is not a positive dimension",
                        lineno + 1
                    ))),
                }
            };
            layers.push(LayerShape {
                name: name.to_string(),
                n: dim(n)?,
                m: dim(m)?,
            });
        }
        Ok(Self { layers })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn total_params(&self) -> u64 {
        self.layers.iter().map(LayerShape::params).sum()
    }
}

impl fmt::Display for ShapeManifest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for l in &self.layers {
            writeln!(f, "{} {} {}", l.name, l.n, l.m)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DryRunConfig {
    pub rank: usize,
    pub s: f64,
    pub tau: usize,
    pub accounting: HeParams,
}

impl Default for DryRunConfig {
    fn default() -> Self {
        Self {
            rank: 4,
            s: 0.7,
            tau: 3,
            accounting: HeParams::production(),
        }
    }
}

/// Per-client upload cost of one round.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct RoundCost {
    pub encrypted_elements: u64,
    pub plaintext_elements: u64,
    pub ciphertexts: u64,
    pub ciphertext_bytes: u64,
    pub plaintext_bytes: u64,
}

impl RoundCost {
    fn new(encrypted: u64, plaintext: u64, accounting: &HeParams) -> Self {
        let ciphertexts = encrypted.div_ceil(accounting.slots() as u64);
        Self {
            encrypted_elements: encrypted,
            plaintext_elements: plaintext,
            ciphertexts,
            ciphertext_bytes: ciphertexts * modeled_ciphertext_bytes(accounting),
            plaintext_bytes: plaintext * PLAINTEXT_BYTES_PER_ELEMENT,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DryRunReport {
    pub strategy: Strategy,
    /// Cost during the first `tau` rounds (no pruning yet).
    pub warmup: RoundCost,
    /// Cost once pruning is active.
    pub steady: RoundCost,
    pub warnings: Vec<String>,
}

/// Analytic per-round upload accounting for `strategy` on `manifest`; no
/// training is run. Only weight matrices are counted.
pub fn dry_run_accounting(
    manifest: &ShapeManifest,
    strategy: Strategy,
    config: &DryRunConfig,
) -> Result<DryRunReport> {
    if manifest.layers.is_empty() {
        return Err(Error::Parameter("manifest lists no layers".into()));
    }
    if config.rank == 0 {
        return Err(Error::Parameter("rank must be at least 1".into()));
    }
    if !(0.0..1.0).contains(&config.s) {
        return Err(Error::Parameter(format!("prune fraction {} outside [0, 1)", config.s)));
    }
    config.accounting.validate()?;
    let acc = &config.accounting;
    let full = manifest.total_params();
    let mut warnings = Vec::new();
    let (warmup, steady) = match strategy {
        Strategy::FedHeFull => {
            let c = RoundCost::new(full, 0, acc);
            (c, c)
        }
        Strategy::DictPfl => {
            let mut table = 0u64;
            for l in &manifest.layers {
                let r = config.rank.min(l.n).min(l.m) as u64;
                let elems = r * l.m as u64;
                if elems >= l.params() {
                    warnings.push(format!(
                        "layer {}: rank {} gives no reduction over {}x{}",
                        l.name, config.rank, l.n, l.m
                    ));
                }
                table += elems;
            }
            let retained = ((1.0 - config.s) * table as f64).ceil() as u64;
            (RoundCost::new(table, 0, acc), RoundCost::new(retained, 0, acc))
        }
        Strategy::FedHeTopK(k) => {
            if k > manifest.layers.len() {
                return Err(Error::Parameter(format!(
                    "top-{k} exceeds the {} layers in the manifest",
                    manifest.layers.len()
                )));
            }
            let elems: u64 = manifest.layers[manifest.layers.len() - k..]
                .iter()
                .map(LayerShape::params)
                .sum();
            let c = RoundCost::new(elems, 0, acc);
            (c, c)
        }
        Strategy::SaE(fraction) => {
            if !(fraction > 0.0 && fraction <= 1.0) {
                return Err(Error::Parameter(format!(
                    "encrypt fraction {fraction} outside (0, 1]"
                )));
            }
            let enc = sae_encrypted_count(full as usize, fraction) as u64;
            let c = RoundCost::new(enc, full - enc, acc);
            (c, c)
        }
    };
    Ok(DryRunReport {
        strategy,
        warmup,
        steady,
        warnings,
    })
}

/// Number of elements encrypted by select-and-encrypt: `⌈fraction·total⌉`.
pub fn sae_encrypted_count(total: usize, fraction: f64) -> usize {
    let exact = fraction * total as f64;
    let rounded = exact.round();
    let n = if (exact - rounded).abs() < 1e-9 { rounded } else { exact.ceil() };
    (n as usize).min(total)
}
