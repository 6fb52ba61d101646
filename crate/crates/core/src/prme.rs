//! History-guided gradient pruning with probabilistic reactivation.
//!
//! Every client runs an identical [`PruneState`]. Masks are a pure function of
//! the shared global-gradient history, and reactivation draws come from a
//! generator keyed on `(seed, round)`, so all clients prune exactly the same
//! positions and packed ciphertext slots stay aligned without exchanging
//! indices.
//!
//! Per round:
//!
//! 1. [`PruneState::begin_round`]: temporal mask from the last `tau` rounds,
//!    then reactivation draws for pruned entries.
//! 2. [`PruneState::accumulate_and_select`]: active entries upload their
//!    gradient (plus anything accumulated while pruned), the rest accumulate.
//! 3. [`PruneState::observe_global`]: reactivation probabilities react to the
//!    aggregated gradient, and its magnitudes join the history.
//!
//! The generator is ChaCha20 seeded with `seed` through
//! `SeedableRng::seed_from_u64`, on stream `round`. Each pruned entry, in
//! ascending index order, consumes one `u64`; the top 53 bits give a uniform
//! `u ∈ [0, 1)` and the entry is reactivated iff `u < p`.

use std::collections::VecDeque;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;

use crate::error::{Error, Result};
use crate::linalg::{percentile_threshold, Threshold};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PruneConfig {
    /// Fraction of entries below the per-round threshold, in `[0, 1)`.
    pub s: f64,
    /// Patience: consecutive low rounds required before pruning.
    pub tau: usize,
    /// Reactivation probability scaler, in `(0, 1)`.
    pub beta: f64,
    /// Seed shared by all clients.
    pub seed: u64,
}

impl Default for PruneConfig {
    fn default() -> Self {
        Self {
            s: 0.7,
            tau: 3,
            beta: 0.2,
            seed: 0,
        }
    }
}

impl PruneConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.s) {
            return Err(Error::Parameter(format!(
                "prune fraction {} outside [0, 1)",
                self.s
            )));
        }
        if self.tau == 0 {
            return Err(Error::Parameter("patience tau must be at least 1".into()));
        }
        if !(self.beta > 0.0 && self.beta < 1.0) {
            return Err(Error::Parameter(format!(
                "beta {} outside (0, 1)",
                self.beta
            )));
        }
        Ok(())
    }
}

/// Temporal inactivity mask: `true` keeps the entry (M = 1), `false` prunes it.
///
/// An entry is pruned iff it was below the round's percentile threshold in
/// every one of the last `tau` rounds. With fewer than `tau` rounds of history
/// nothing is pruned. `history` is ordered oldest first.
pub fn tip_mask(history: &[Vec<f64>], tau: usize, s: f64) -> Result<Vec<bool>> {
    let Some(len) = history.first().map(Vec::len) else {
        return Err(Error::Parameter("empty gradient history".into()));
    };
    if let Some(bad) = history.iter().find(|h| h.len() != len) {
        return Err(Error::shape(
            "tip_mask",
            format!("history vectors of length {len} and {}", bad.len()),
        ));
    }
    if tau == 0 {
        return Err(Error::Parameter("patience tau must be at least 1".into()));
    }
    if history.len() < tau || len == 0 {
        return Ok(vec![true; len]);
    }
    let mut low_rounds = vec![0usize; len];
    for round in &history[history.len() - tau..] {
        let mags: Vec<f64> = round.iter().map(|v| v.abs()).collect();
        let threshold = percentile_threshold(&mags, s)?;
        for (count, below) in low_rounds.iter_mut().zip(threshold.below_mask(&mags)) {
            *count += usize::from(below);
        }
    }
    Ok(low_rounds.into_iter().map(|c| c != tau).collect())
}

/// Multiplicative reactivation-probability update for entries reactivated
/// this round: `p·β` if the aggregated gradient stayed below threshold,
/// `min(p/β, 1)` otherwise. Other entries are left alone.
pub fn hrc_update(
    react_prob: &mut [f64],
    reactivated: &[bool],
    global_grad: &[f64],
    threshold: &Threshold,
    beta: f64,
) -> Result<()> {
    if react_prob.len() != reactivated.len() || react_prob.len() != global_grad.len() {
        return Err(Error::shape(
            "hrc_update",
            format!(
                "p {}, reactivated {}, gradient {}",
                react_prob.len(),
                reactivated.len(),
                global_grad.len()
            ),
        ));
    }
    for (i, p) in react_prob.iter_mut().enumerate() {
        if !reactivated[i] {
            continue;
        }
        *p = if threshold.is_below(global_grad[i].abs(), i) {
            *p * beta
        } else {
            (*p / beta).min(1.0)
        };
    }
    Ok(())
}

/// Reactivation draws for one round; identical on every client holding the
/// same `(seed, round, mask, react_prob)`.
pub fn draw_reactivations(seed: u64, round: u64, mask: &[bool], react_prob: &[f64]) -> Vec<bool> {
    let mut rng = round_rng(seed, round);
    mask.iter()
        .zip(react_prob)
        .map(|(&kept, &p)| !kept && unit_draw(&mut rng) < p)
        .collect()
}

fn round_rng(seed: u64, round: u64) -> ChaCha20Rng {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    rng.set_stream(round);
    rng
}

fn unit_draw(rng: &mut ChaCha20Rng) -> f64 {
    (rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// Gradient values at a sorted set of positions.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseGrad {
    pub len: usize,
    pub indices: Vec<usize>,
    pub values: Vec<f64>,
}

impl SparseGrad {
    pub fn to_dense(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.len];
        for (&i, &v) in self.indices.iter().zip(&self.values) {
            out[i] = v;
        }
        out
    }

    pub fn nnz(&self) -> usize {
        self.indices.len()
    }
}

/// Per-client pruning state.
#[derive(Debug, Clone, PartialEq)]
pub struct PruneState {
    config: PruneConfig,
    history: VecDeque<Vec<f64>>,
    mask: Vec<bool>,
    reactivated: Vec<bool>,
    react_prob: Vec<f64>,
    accum: Vec<f64>,
    round: Option<u64>,
    selected: bool,
}

impl PruneState {
    pub fn new(config: PruneConfig, len: usize) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            history: VecDeque::with_capacity(config.tau),
            mask: vec![true; len],
            reactivated: vec![false; len],
            react_prob: vec![1.0; len],
            accum: vec![0.0; len],
            round: None,
            selected: false,
        })
    }

    pub fn config(&self) -> &PruneConfig {
        &self.config
    }

    pub fn len(&self) -> usize {
        self.mask.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mask.is_empty()
    }

    /// Temporal mask for the current round (`true` = retained).
    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    /// Pruned entries that were drawn back in this round.
    pub fn reactivated(&self) -> &[bool] {
        &self.reactivated
    }

    pub fn react_prob(&self) -> &[f64] {
        &self.react_prob
    }

    pub fn accum(&self) -> &[f64] {
        &self.accum
    }

    /// Global-gradient magnitudes, oldest first.
    pub fn history(&self) -> impl Iterator<Item = &Vec<f64>> {
        self.history.iter()
    }

    /// True once `tau` rounds of global history exist.
    pub fn warmed_up(&self) -> bool {
        self.history.len() >= self.config.tau
    }

    /// Entries taking part in this round's aggregation: retained or reactivated.
    pub fn active(&self) -> Vec<bool> {
        self.mask
            .iter()
            .zip(&self.reactivated)
            .map(|(m, r)| *m || *r)
            .collect()
    }

    /// Sorted active positions; the shared slot layout for compacted packing.
    pub fn active_indices(&self) -> Vec<usize> {
        self.active()
            .iter()
            .enumerate()
            .filter_map(|(i, a)| a.then_some(i))
            .collect()
    }

    /// Starts `round`: recomputes the temporal mask and draws reactivations.
    ///
    /// Entries that move from retained to pruned start with reactivation
    /// probability `β`.
    pub fn begin_round(&mut self, round: u64) -> Result<()> {
        if let Some(prev) = self.round {
            if round <= prev {
                return Err(Error::Parameter(format!(
                    "round {round} does not follow round {prev}"
                )));
            }
        }
        let new_mask = if self.history.is_empty() {
            vec![true; self.len()]
        } else {
            let history: Vec<Vec<f64>> = self.history.iter().cloned().collect();
            tip_mask(&history, self.config.tau, self.config.s)?
        };
        for (i, (&was, &now)) in self.mask.iter().zip(&new_mask).enumerate() {
            if was && !now {
                self.react_prob[i] = self.config.beta;
            }
        }
        self.mask = new_mask;
        self.reactivated = draw_reactivations(self.config.seed, round, &self.mask, &self.react_prob);
        self.round = Some(round);
        self.selected = false;
        Ok(())
    }

    /// Splits this round's local gradient into the upload and the local
    /// remainder.
    ///
    /// Retained entries upload their gradient. Reactivated entries upload the
    /// accumulated gradient plus the current one. Both reset their
    /// accumulator. Pruned entries add the gradient to their accumulator and
    /// upload nothing.
    pub fn accumulate_and_select(&mut self, local_grad: &[f64]) -> Result<SparseGrad> {
        if local_grad.len() != self.len() {
            return Err(Error::shape(
                "accumulate_and_select",
                format!("gradient {}, state {}", local_grad.len(), self.len()),
            ));
        }
        if self.round.is_none() || self.selected {
            return Err(Error::protocol(
                None,
                "accumulate_and_select called outside begin_round/observe_global",
            ));
        }
        let mut indices = Vec::new();
        let mut values = Vec::new();
        for (i, &g) in local_grad.iter().enumerate() {
            if self.mask[i] || self.reactivated[i] {
                indices.push(i);
                values.push(self.accum[i] + g);
                self.accum[i] = 0.0;
            } else {
                self.accum[i] += g;
            }
        }
        self.selected = true;
        Ok(SparseGrad {
            len: self.len(),
            indices,
            values,
        })
    }

    /// Feeds back the aggregated global gradient (zeros at inactive entries).
    /// Returns the threshold used for the reactivation update.
    pub fn observe_global(&mut self, global_grad: &[f64]) -> Result<Threshold> {
        if global_grad.len() != self.len() {
            return Err(Error::shape(
                "observe_global",
                format!("gradient {}, state {}", global_grad.len(), self.len()),
            ));
        }
        let mags: Vec<f64> = global_grad.iter().map(|v| v.abs()).collect();
        let threshold = if mags.is_empty() {
            Threshold::NegInfinity
        } else {
            percentile_threshold(&mags, self.config.s)?
        };
        hrc_update(
            &mut self.react_prob,
            &self.reactivated,
            &mags,
            &threshold,
            self.config.beta,
        )?;
        if self.history.len() == self.config.tau {
            self.history.pop_front();
        }
        self.history.push_back(mags);
        self.selected = false;
        Ok(threshold)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn config(s: f64, tau: usize) -> PruneConfig {
        PruneConfig {
            s,
            tau,
            beta: 0.2,
            seed: 42,
        }
    }

    #[test]
    fn config_validation() {
        assert!(PruneConfig::default().validate().is_ok());
        assert!(config(1.0, 3).validate().is_err());
        assert!(config(-0.1, 3).validate().is_err());
        assert!(config(0.5, 0).validate().is_err());
        let mut c = config(0.5, 1);
        c.beta = 1.0;
        assert!(c.validate().is_err());
        c.beta = 0.0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn tip_zero_fraction_keeps_everything() {
        let history = vec![vec![0.0, 1.0, 2.0], vec![0.0, 0.0, 0.0]];
        assert_eq!(tip_mask(&history, 2, 0.0).unwrap(), vec![true; 3]);
    }

    #[test]
    fn tip_single_round_percentile() {
        let history = vec![(1..=10).map(f64::from).collect::<Vec<_>>()];
        let mask = tip_mask(&history, 1, 0.7).unwrap();
        let expect: Vec<bool> = (1..=10).map(|v| v > 7).collect();
        assert_eq!(mask, expect);
    }

    #[test]
    fn tip_postpones_when_any_round_is_high() {
        // entry 0 is lowest in t-1 and t-2 but highest in t-3
        let history = vec![
            vec![9.0, 1.0, 2.0, 3.0],
            vec![0.1, 1.0, 2.0, 3.0],
            vec![0.1, 1.0, 2.0, 3.0],
        ];
        let mask = tip_mask(&history, 3, 0.25).unwrap();
        assert!(mask[0], "entry with a recent spike must be retained");
        let mask = tip_mask(&history[1..], 2, 0.25).unwrap();
        assert!(!mask[0]);
    }

    #[test]
    fn tip_warm_up_and_errors() {
        let history = vec![vec![1.0, 2.0]];
        assert_eq!(tip_mask(&history, 3, 0.5).unwrap(), vec![true, true]);
        assert!(matches!(
            tip_mask(&[vec![1.0], vec![1.0, 2.0]], 2, 0.5),
            Err(Error::Shape { .. })
        ));
        assert!(tip_mask(&[], 1, 0.5).is_err());
    }

    #[test]
    fn hrc_decay_and_growth() {
        let mut p = vec![1.0, 0.5, 0.3];
        let reactivated = vec![true, true, false];
        let global = vec![0.0, 10.0, 0.0];
        let threshold = Threshold::Key {
            magnitude: 1.0,
            index: 0,
        };
        hrc_update(&mut p, &reactivated, &global, &threshold, 0.2).unwrap();
        assert_eq!(p[0], 0.2);
        assert_eq!(p[1], 1.0);
        assert_eq!(p[2], 0.3);
    }

    #[test]
    fn hrc_alternating_returns_to_start() {
        let beta = 0.2;
        let low = Threshold::PosInfinity;
        let high = Threshold::NegInfinity;
        let start = 0.04;
        let mut p = vec![start];
        for _ in 0..5 {
            hrc_update(&mut p, &[true], &[0.0], &low, beta).unwrap();
            hrc_update(&mut p, &[true], &[0.0], &high, beta).unwrap();
        }
        assert!((p[0] - start).abs() <= 1e-15);
        // at the cap the round trip is lossy: 1 → 1 (cap) → 0.2
        let mut p = vec![1.0];
        hrc_update(&mut p, &[true], &[0.0], &high, beta).unwrap();
        hrc_update(&mut p, &[true], &[0.0], &low, beta).unwrap();
        assert_eq!(p[0], 0.2);
    }

    #[test]
    fn draws_respect_extreme_probabilities() {
        let mask = vec![false, true, false, false];
        assert_eq!(
            draw_reactivations(1, 5, &mask, &[0.0; 4]),
            vec![false; 4]
        );
        assert_eq!(
            draw_reactivations(1, 5, &mask, &[1.0; 4]),
            vec![true, false, true, true]
        );
    }

    #[test]
    fn draws_are_deterministic_per_seed_and_round() {
        let mask = vec![false; 64];
        let p = vec![0.5; 64];
        for trial in 0..1000u64 {
            let a = draw_reactivations(7, trial, &mask, &p);
            let b = draw_reactivations(7, trial, &mask, &p);
            assert_eq!(a, b);
        }
        assert_ne!(
            draw_reactivations(7, 1, &mask, &p),
            draw_reactivations(7, 2, &mask, &p)
        );
        assert_ne!(
            draw_reactivations(7, 1, &mask, &p),
            draw_reactivations(8, 1, &mask, &p)
        );
    }

    #[test]
    fn no_pruning_uploads_everything() {
        let mut st = PruneState::new(config(0.0, 1), 4).unwrap();
        for round in 0..5 {
            st.begin_round(round).unwrap();
            let g = vec![0.1 * round as f64, -1.0, 2.0, 0.0];
            let up = st.accumulate_and_select(&g).unwrap();
            assert_eq!(up.to_dense(), g);
            assert_eq!(up.nnz(), 4);
            assert!(st.accum().iter().all(|a| *a == 0.0));
            st.observe_global(&g).unwrap();
        }
    }

    #[test]
    fn reactivation_uploads_accumulated_sum() {
        let mut st = PruneState::new(config(0.5, 1), 2).unwrap();
        st.begin_round(0).unwrap();
        st.accumulate_and_select(&[0.0, 0.0]).unwrap();
        st.observe_global(&[0.0, 5.0]).unwrap();
        st.begin_round(1).unwrap();
        assert_eq!(st.mask(), &[false, true]);
        // force entry 0 to stay pruned for three rounds, then come back
        let grads = [0.1, 0.2, 0.3];
        for (k, g) in grads.iter().enumerate() {
            st.react_prob[0] = 0.0;
            st.reactivated = vec![false, false];
            let up = st.accumulate_and_select(&[*g, 1.0]).unwrap();
            assert_eq!(up.indices, vec![1]);
            st.observe_global(&[0.0, 5.0]).unwrap();
            st.begin_round(2 + k as u64).unwrap();
        }
        st.reactivated = vec![true, false];
        let up = st.accumulate_and_select(&[0.4, 1.0]).unwrap();
        assert_eq!(up.indices, vec![0, 1]);
        assert!((up.values[0] - 1.0).abs() < 1e-15);
        assert_eq!(st.accum()[0], 0.0);
    }

    #[test]
    fn pruned_entry_accumulates_without_upload() {
        let mut st = PruneState::new(config(0.5, 1), 2).unwrap();
        st.begin_round(0).unwrap();
        st.accumulate_and_select(&[0.0, 0.0]).unwrap();
        st.observe_global(&[0.0, 5.0]).unwrap();
        st.react_prob = vec![0.0, 0.0];
        // p is reset to β on the transition, so pin the draw outcome instead
        st.begin_round(1).unwrap();
        st.reactivated = vec![false, false];
        let up = st.accumulate_and_select(&[0.5, 1.0]).unwrap();
        assert!(!up.indices.contains(&0));
        assert_eq!(st.accum()[0], 0.5);
    }

    #[test]
    fn freshly_pruned_entries_start_at_beta() {
        let mut st = PruneState::new(config(0.5, 1), 4).unwrap();
        st.begin_round(0).unwrap();
        st.accumulate_and_select(&[0.0; 4]).unwrap();
        st.observe_global(&[0.0, 0.1, 5.0, 6.0]).unwrap();
        st.begin_round(1).unwrap();
        assert_eq!(st.mask(), &[false, false, true, true]);
        assert_eq!(&st.react_prob()[..2], &[0.2, 0.2]);
    }

    #[test]
    fn call_order_is_enforced() {
        let mut st = PruneState::new(config(0.5, 1), 2).unwrap();
        assert!(st.accumulate_and_select(&[0.0, 0.0]).is_err());
        st.begin_round(3).unwrap();
        assert!(st.begin_round(3).is_err());
        assert!(st.accumulate_and_select(&[0.0]).is_err());
        st.accumulate_and_select(&[0.0, 0.0]).unwrap();
        assert!(st.accumulate_and_select(&[0.0, 0.0]).is_err());
        assert!(st.observe_global(&[0.0]).is_err());
    }

    proptest! {
        #[test]
        fn probabilities_stay_in_unit_interval(
            outcomes in proptest::collection::vec(any::<bool>(), 0..60),
            beta in 0.01f64..0.99,
        ) {
            let mut p = vec![beta];
            for low in outcomes {
                let t = if low { Threshold::PosInfinity } else { Threshold::NegInfinity };
                hrc_update(&mut p, &[true], &[1.0], &t, beta).unwrap();
                prop_assert!((0.0..=1.0).contains(&p[0]));
            }
        }
    }
}
