//! Global magnitude pruning on a cumulative sparsity ladder, plus rewinding the
//! survivors to their initial values.
//!
//! All prunable weights are pooled across layers and ranked by
//! `(|w|, already masked first, registry position, flat index)`. Level `k` masks
//! exactly `floor(p·k·N)` of the `N` prunable weights; positions that are already
//! masked rank as magnitude zero, so masks only ever grow.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Network, Parameter};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PruneSchedule {
    /// Cumulative sparsity added per level, as a fraction of the original prunable count.
    pub per_level_fraction: f64,
    /// Number of levels including the unpruned L0.
    pub rounds: usize,
    pub epochs_per_round: usize,
}

impl Default for PruneSchedule {
    fn default() -> Self {
        PruneSchedule {
            per_level_fraction: 0.02,
            rounds: 10,
            epochs_per_round: 20,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PruneLevel {
    pub index: usize,
    pub target: f64,
    pub epochs: usize,
}

impl PruneSchedule {
    pub fn validate(&self) -> Result<()> {
        if self.rounds == 0 {
            return Err(Error::Config("schedule.rounds must be >= 1".into()));
        }
        if !(self.per_level_fraction >= 0.0)
            || self.per_level_fraction * (self.rounds as f64 - 1.0) >= 1.0
        {
            return Err(Error::Config(format!(
                "schedule.per_level_fraction {} over {} rounds reaches sparsity >= 1",
                self.per_level_fraction, self.rounds
            )));
        }
        Ok(())
    }

    pub fn target(&self, level: usize) -> f64 {
        self.per_level_fraction * level as f64
    }

    pub fn levels(&self) -> Vec<PruneLevel> {
        (0..self.rounds)
            .map(|index| PruneLevel {
                index,
                target: self.target(index),
                epochs: self.epochs_per_round,
            })
            .collect()
    }

    pub fn final_sparsity(&self) -> f64 {
        self.target(self.rounds.saturating_sub(1))
    }
}

/// `floor(target·n)`. The small guard absorbs representation error in targets such
/// as `0.02 * 9`, whose exact rational product is an integer.
pub fn prune_count(target: f64, n: usize) -> usize {
    (target * n as f64 + 1e-9).floor() as usize
}

/// Result of [`global_threshold`]: every weight with magnitude below `magnitude` is
/// pruned, plus the first `ties` weights (in ranking order) whose magnitude equals it.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Threshold {
    pub magnitude: f32,
    pub ties: usize,
    pub count: usize,
    pub total: usize,
    pub target: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TicketState {
    pub level: usize,
    /// `(parameter name, mask)` for every prunable parameter, registry order.
    pub masks: Vec<(String, Tensor)>,
    pub masked: usize,
    pub total: usize,
}

impl TicketState {
    pub fn capture(params: &[Parameter], level: usize) -> TicketState {
        let masks: Vec<_> = params
            .iter()
            .filter(|p| p.prunable)
            .map(|p| (p.name.clone(), p.mask.clone()))
            .collect();
        let masked = params.iter().filter(|p| p.prunable).map(|p| p.masked_count()).sum();
        let total = params.iter().filter(|p| p.prunable).map(|p| p.value.len()).sum();
        TicketState {
            level,
            masks,
            masked,
            total,
        }
    }
}

pub fn sparsity(state: &TicketState) -> f64 {
    if state.total == 0 {
        0.0
    } else {
        state.masked as f64 / state.total as f64
    }
}

#[derive(Clone, Copy)]
struct Ranked {
    magnitude: f32,
    masked: bool,
    param: u32,
    flat: u32,
}

fn key(r: &Ranked) -> (u32, bool, u32, u32) {
    // magnitudes are non-negative, so their bit patterns order like the values
    (r.magnitude.to_bits(), !r.masked, r.param, r.flat)
}

fn ranked(params: &[Parameter]) -> Vec<Ranked> {
    let mut out = Vec::new();
    for (pi, p) in params.iter().enumerate().filter(|(_, p)| p.prunable) {
        for (fi, (&v, &m)) in p.value.data().iter().zip(p.mask.data()).enumerate() {
            let masked = m == 0.0;
            out.push(Ranked {
                magnitude: if masked { 0.0 } else { v.abs() },
                masked,
                param: pi as u32,
                flat: fi as u32,
            });
        }
    }
    out
}

/// Magnitude threshold over all prunable weights such that exactly
/// `floor(target·N)` of them fall at or below it once ties are broken.
pub fn global_threshold(params: &[Parameter], target: f64) -> Result<Threshold> {
    if !(0.0..1.0).contains(&target) {
        return Err(Error::Parameter(format!(
            "sparsity target {target} outside [0, 1)"
        )));
    }
    let mut all = ranked(params);
    let total = all.len();
    if total == 0 {
        return Err(Error::Contract("no prunable weights".into()));
    }
    let count = prune_count(target, total);
    if count == 0 {
        return Ok(Threshold {
            magnitude: f32::NEG_INFINITY,
            ties: 0,
            count,
            total,
            target,
        });
    }
    let (_, nth, _) = all.select_nth_unstable_by_key(count - 1, key);
    let magnitude = nth.magnitude;
    let below = all.iter().filter(|r| r.magnitude < magnitude).count();
    Ok(Threshold {
        magnitude,
        ties: count - below,
        count,
        total,
        target,
    })
}

/// Mask the weights selected by `threshold` and zero their values. The masked
/// count must come out at exactly `floor(target·N)` and no previously masked
/// position may be released.
pub fn apply_prune(params: &mut [Parameter], threshold: &Threshold, level: usize) -> Result<TicketState> {
    let all = ranked(params);
    if all.len() != threshold.total || threshold.count != prune_count(threshold.target, all.len()) {
        return Err(Error::Contract(
            "threshold was computed for a different weight pool or target".into(),
        ));
    }
    let mut ties: Vec<Ranked> = all
        .iter()
        .copied()
        .filter(|r| r.magnitude == threshold.magnitude)
        .collect();
    ties.sort_unstable_by_key(key);
    ties.truncate(threshold.ties);

    let mut new_masks: Vec<Option<Vec<f32>>> = params
        .iter()
        .map(|p| p.prunable.then(|| vec![1.0; p.value.len()]))
        .collect();
    for r in all.iter().filter(|r| r.magnitude < threshold.magnitude).chain(&ties) {
        new_masks[r.param as usize].as_mut().expect("prunable")[r.flat as usize] = 0.0;
    }
    for (p, m) in params.iter().zip(&new_masks) {
        let Some(m) = m else { continue };
        if let Some(i) = p.mask.data().iter().zip(m).position(|(&old, &new)| old == 0.0 && new != 0.0) {
            return Err(Error::Invariant(format!(
                "mask regression: {}[{i}] was pruned and would be released",
                p.name
            )));
        }
    }
    for (p, m) in params.iter_mut().zip(new_masks) {
        let Some(m) = m else { continue };
        for (v, &keep) in p.value.data_mut().iter_mut().zip(&m) {
            *v *= keep;
        }
        p.mask = Tensor::new(p.value.shape().to_vec(), m)?;
    }
    let state = TicketState::capture(params, level);
    if state.masked != threshold.count {
        return Err(Error::Invariant(format!(
            "pruned {} weights, expected exactly {}",
            state.masked, threshold.count
        )));
    }
    Ok(state)
}

/// Reset every parameter to `init_snapshot · mask`.
pub fn rewind(net: &mut Network) -> Result<()> {
    if !net.has_snapshot() {
        return Err(Error::Contract(
            "rewind needs an init snapshot taken before training".into(),
        ));
    }
    for p in net.params_mut() {
        let snap = p.init_snapshot().expect("checked above").clone();
        for ((v, &s), &m) in p.value.data_mut().iter_mut().zip(snap.data()).zip(p.mask.data()) {
            *v = s * m;
        }
    }
    Ok(())
}

/// Threshold, mask and report in one call.
pub fn prune_to(net: &mut Network, target: f64, level: usize) -> Result<TicketState> {
    let threshold = global_threshold(net.params(), target)?;
    apply_prune(net.params_mut(), &threshold, level)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Block;

    fn layer(name: &str, vals: &[f32]) -> Parameter {
        Parameter::new(name, Block::Head, Tensor::from_slice(&[vals.len()], vals), true)
    }

    #[test]
    fn default_ladder() {
        let s = PruneSchedule::default();
        let levels = s.levels();
        assert_eq!(levels.len(), 10);
        assert_eq!(levels[0].target, 0.0);
        assert!((s.final_sparsity() - 0.18).abs() < 1e-12);
        assert!(levels.windows(2).all(|w| w[0].target <= w[1].target));
        assert!(levels.iter().all(|l| l.epochs == 20));
    }

    #[test]
    fn schedule_validation() {
        let bad = PruneSchedule {
            per_level_fraction: 0.2,
            rounds: 6,
            ..PruneSchedule::default()
        };
        assert!(bad.validate().is_err());
        assert!(PruneSchedule {
            rounds: 0,
            ..PruneSchedule::default()
        }
        .validate()
        .is_err());
        assert!(PruneSchedule::default().validate().is_ok());
    }

    #[test]
    fn zero_target_prunes_nothing() {
        let params = vec![layer("a", &[0.1, -0.5, 0.3, 0.05])];
        let t = global_threshold(&params, 0.0).unwrap();
        assert!(t.magnitude < 0.05);
        assert_eq!(t.count, 0);
    }

    #[test]
    fn half_target_takes_two_smallest() {
        let mut params = vec![layer("a", &[0.1, -0.5, 0.3, 0.05])];
        let t = global_threshold(&params, 0.5).unwrap();
        assert_eq!(t.magnitude, 0.1);
        let st = apply_prune(&mut params, &t, 1).unwrap();
        assert_eq!(params[0].mask.data(), &[0.0, 1.0, 1.0, 0.0]);
        assert_eq!(params[0].value.data(), &[0.0, -0.5, 0.3, 0.0]);
        assert_eq!(sparsity(&st), 0.5);
    }

    #[test]
    fn ties_prune_lower_registry_then_flat_index_first() {
        let mut params = vec![layer("a", &[0.2, 0.2, 0.9]), layer("b", &[0.2, 0.1])];
        // 5 weights, target 0.6 -> 3 pruned: 0.1 then two of the three 0.2s
        let t = global_threshold(&params, 0.6).unwrap();
        assert_eq!((t.magnitude, t.ties), (0.2, 2));
        apply_prune(&mut params, &t, 1).unwrap();
        assert_eq!(params[0].mask.data(), &[0.0, 0.0, 1.0]);
        assert_eq!(params[1].mask.data(), &[1.0, 0.0]);
    }

    #[test]
    fn pooled_not_per_layer() {
        let mut params = vec![layer("small", &[0.01, 0.02, 0.03, 0.04]), layer("big", &[1.0, 2.0, 3.0, 4.0])];
        prune_to_params(&mut params, 0.5);
        assert!(params[0].mask.data().iter().all(|&m| m == 0.0));
        assert!(params[1].mask.data().iter().all(|&m| m == 1.0));
    }

    fn prune_to_params(params: &mut [Parameter], target: f64) -> TicketState {
        let t = global_threshold(params, target).unwrap();
        apply_prune(params, &t, 0).unwrap()
    }

    #[test]
    fn idempotent_and_monotone() {
        let vals: Vec<f32> = (0..50).map(|i| ((i * 37) % 50) as f32 / 50.0 - 0.5).collect();
        let mut params = vec![layer("a", &vals)];
        prune_to_params(&mut params, 0.2);
        let first = params[0].mask.clone();
        prune_to_params(&mut params, 0.2);
        assert_eq!(params[0].mask, first);
        prune_to_params(&mut params, 0.4);
        for (a, b) in first.data().iter().zip(params[0].mask.data()) {
            assert!(*a == 1.0 || *b == 0.0);
        }
    }

    #[test]
    fn lowering_the_target_is_a_mask_regression() {
        let mut params = vec![layer("a", &[0.1, 0.2, 0.3, 0.4])];
        prune_to_params(&mut params, 0.5);
        let t = global_threshold(&params, 0.25).unwrap();
        assert!(matches!(apply_prune(&mut params, &t, 2), Err(Error::Invariant(_))));
    }

    #[test]
    fn masked_zero_outranks_true_zero() {
        let mut params = vec![layer("a", &[0.0, 0.5, 0.7, 0.9])];
        params[0].mask.data_mut()[2] = 0.0;
        params[0].value.data_mut()[2] = 0.0;
        // one to prune: the already-masked position, not the live zero at index 0
        prune_to_params(&mut params, 0.25);
        assert_eq!(params[0].mask.data(), &[1.0, 1.0, 0.0, 1.0]);
    }

    #[test]
    fn target_range_checked() {
        let params = vec![layer("a", &[0.1])];
        assert!(matches!(global_threshold(&params, 1.0), Err(Error::Parameter(_))));
        assert!(matches!(global_threshold(&params, -0.1), Err(Error::Parameter(_))));
        assert!(matches!(global_threshold(&[], 0.1), Err(Error::Contract(_))));
    }

    #[test]
    fn hand_built_sparsity() {
        let mut p = layer("a", &[1.0; 10]);
        for i in [1, 4, 7] {
            p.mask.data_mut()[i] = 0.0;
        }
        assert_eq!(sparsity(&TicketState::capture(&[p], 0)), 0.3);
    }

    #[test]
    fn exact_counts_for_awkward_products() {
        for n in [100, 333, 1000, 4097, 10_000] {
            for k in 0..10 {
                assert_eq!(prune_count(0.02 * k as f64, n), 2 * k * n / 100, "n={n} k={k}");
            }
        }
    }
}
