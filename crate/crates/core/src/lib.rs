//! Federated learning over additively homomorphic encryption with a
//! dictionary-decomposed model and history-guided gradient pruning.
//!
//! Each dense weight `W` is held as a frozen base `W0` plus a frozen
//! dictionary `D` (from a truncated SVD of `W0`) times a trainable lookup
//! table `T`. Only `T` (and biases) are trained, so only `T`'s gradients are
//! encrypted and aggregated. On top of that, [`prme`] prunes table gradients
//! with masks that every client derives identically from the shared global
//! gradient history, which keeps SIMD slot layouts aligned without sending
//! any index information to the server.
//!
//! Module map:
//!
//! * [`linalg`]: dense matrices, one-sided Jacobi truncated SVD, percentile thresholds
//! * [`depe`]: the `W0 + D·T` decomposition
//! * [`prme`]: temporal pruning masks, reactivation and local accumulation
//! * [`he`]: slot-packed additive HE (toy RLWE and plaintext mock) plus the size model
//! * [`protocol`]: client/server round engine and baselines
//! * [`netsim`]: transfer-time model and analytic dry-run accounting
//! * [`trainer`]: toy MLP, synthetic data, Dirichlet partitioning, local SGD
//! * [`experiment`]: run configuration and CSV metrics

pub mod depe;
pub mod error;
pub mod experiment;
pub mod he;
pub mod linalg;
pub mod netsim;
pub mod prme;
pub mod protocol;
pub mod trainer;

pub use depe::WeightDecomposition;
pub use error::{Error, Result};
pub use he::{Ciphertext, HeBackend, HeParams, KeyPair};
pub use linalg::Matrix;
pub use netsim::{NetProfile, ShapeManifest};
pub use prme::{PruneConfig, PruneState};
pub use protocol::{Federation, FederationConfig, RoundMetrics, Strategy};
pub use trainer::{DataShard, Dataset, ToyModel};
