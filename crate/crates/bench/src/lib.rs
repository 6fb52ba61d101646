//! Shared inputs for the benchmarks.

use dictpfl::experiment::RunConfig;
use dictpfl::he::BackendKind;
use dictpfl::{Matrix, ShapeManifest, Strategy};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const VIT_MANIFEST: &str = include_str!("../../core/manifests/vit_b16.txt");

pub fn random_matrix(rows: usize, cols: usize, seed: u64) -> Matrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Matrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
}

pub fn random_vector(len: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..len).map(|_| rng.random_range(-1.0..1.0)).collect()
}

pub fn vit_manifest() -> ShapeManifest {
    ShapeManifest::parse(VIT_MANIFEST).expect("bundled manifest parses")
}

/// Small federation used by the round benchmarks.
pub fn round_config(strategy: Strategy, backend: BackendKind) -> RunConfig {
    RunConfig {
        strategy,
        backend,
        clients: 3,
        threads: 1,
        ..RunConfig::default()
    }
}
