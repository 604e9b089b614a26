//! Index sampling and the schedules for snapshot batch sizes and SG steps.

use alloc::string::String;
use alloc::vec::Vec;

use rand::Rng;
use thiserror::Error;

use crate::data::SparseDataset;
use crate::losses::LossModel;
use crate::math;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SamplingError {
    #[error("sample size {k} out of range for population {n}")]
    SizeOutOfRange { k: usize, n: usize },
    #[error("invalid weights: {0}")]
    Weights(String),
}

/// Uniform draw from `0..n`.
#[inline]
pub fn sample_uniform<R: Rng + ?Sized>(n: usize, rng: &mut R) -> usize {
    rng.random_range(0..n)
}

/// `k` distinct indices from `0..n`, uniform over all size-`k` subsets.
pub fn sample_without_replacement<R: Rng + ?Sized>(n: usize, k: usize, rng: &mut R) -> Result<Vec<usize>, SamplingError> {
    let mut drawer = BatchDrawer::new(n);
    drawer.draw(k, rng).map(<[usize]>::to_vec)
}

/// Reusable partial Fisher–Yates shuffler. The internal buffer stays a
/// permutation of `0..n` between draws, so no reset is needed.
#[derive(Debug, Clone)]
pub struct BatchDrawer {
    perm: Vec<usize>,
}

impl BatchDrawer {
    pub fn new(n: usize) -> Self {
        Self { perm: (0..n).collect() }
    }

    pub fn draw<R: Rng + ?Sized>(&mut self, k: usize, rng: &mut R) -> Result<&[usize], SamplingError> {
        let n = self.perm.len();
        if k == 0 || k > n {
            return Err(SamplingError::SizeOutOfRange { k, n });
        }
        for i in 0..k {
            let j = rng.random_range(i..n);
            self.perm.swap(i, j);
        }
        Ok(&self.perm[..k])
    }
}

/// Vose alias table: O(n) build, O(1) draws with probability
/// `weights_i / Σ weights`.
#[derive(Debug, Clone)]
pub struct WeightedSampler {
    weights: Vec<f64>,
    total: f64,
    cutoff: Vec<f64>,
    alias: Vec<usize>,
}

impl WeightedSampler {
    pub fn new(weights: &[f64]) -> Result<Self, SamplingError> {
        if weights.is_empty() {
            return Err(SamplingError::Weights(String::from("no weights")));
        }
        if let Some(w) = weights.iter().find(|w| !(**w >= 0.0) || !w.is_finite()) {
            return Err(SamplingError::Weights(alloc::format!("weight {w} is negative or not finite")));
        }
        let total: f64 = weights.iter().sum();
        if !(total > 0.0) {
            return Err(SamplingError::Weights(String::from("all weights are zero")));
        }
        let n = weights.len();
        let mut cutoff: Vec<f64> = weights.iter().map(|w| w * n as f64 / total).collect();
        let mut alias: Vec<usize> = (0..n).collect();
        let (mut small, mut large): (Vec<usize>, Vec<usize>) = (0..n).partition(|&i| cutoff[i] < 1.0);
        while let (Some(&s), Some(&l)) = (small.last(), large.last()) {
            small.pop();
            alias[s] = l;
            cutoff[l] -= 1.0 - cutoff[s];
            if cutoff[l] < 1.0 {
                large.pop();
                small.push(l);
            }
        }
        // leftovers are 1 up to rounding
        for i in small.into_iter().chain(large) {
            cutoff[i] = 1.0;
        }
        Ok(Self {
            weights: weights.to_vec(),
            total,
            cutoff,
            alias,
        })
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn total(&self) -> f64 {
        self.total
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Exact sampling probability `p_i`.
    #[inline]
    pub fn probability(&self, i: usize) -> f64 {
        self.weights[i] / self.total
    }

    #[inline]
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        let column = rng.random_range(0..self.cutoff.len());
        let coin: f64 = rng.random();
        if coin < self.cutoff[column] {
            column
        } else {
            self.alias[column]
        }
    }
}

/// Which snapshot quantity drives adaptive sampling weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AdaptiveMode {
    /// `g_i(x^s)`
    FunctionValue,
    /// `‖g_i'(x^s)‖`
    GradNorm,
}

/// Added to every adaptive weight so the sampler stays valid when many
/// values are exactly zero (HSVM).
pub const ADAPTIVE_WEIGHT_FLOOR: f64 = 1e-12;

/// Snapshot-dependent sampling weights on the loss part of each example.
/// Evaluations are not counted here; callers charge them.
pub fn adaptive_weights(model: &LossModel, ds: &SparseDataset, snapshot: &[f64], mode: AdaptiveMode) -> Vec<f64> {
    (0..ds.n())
        .map(|i| {
            let raw = match mode {
                AdaptiveMode::FunctionValue => model.example_loss(ds, i, snapshot),
                AdaptiveMode::GradNorm => {
                    let ex = ds.example(i);
                    model.coeff(ds, i, snapshot).abs() * math::sqrt(ex.norm_sq())
                }
            };
            raw + ADAPTIVE_WEIGHT_FLOOR
        })
        .collect()
}

/// Where the variance bound `S²` of the variance-based schedule comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum S2Source {
    /// Estimated once at the starting point.
    Initial,
    /// Re-estimated from the snapshot batch of the previous stage.
    PerStage,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum BatchSchedule {
    /// `|B^s| = n`
    Full,
    /// `|B^s| = min(initial · 2^s, n)`
    Doubling { initial: usize },
    /// Smallest batch keeping `E‖e^s‖² ≤ γ ρ̃^{2s}`:
    /// `|B^s| = min(n, ⌈n S² / (S² + n γ ρ̃^{2s})⌉)`.
    VarianceBased {
        gamma: f64,
        rho_tilde: f64,
        s2: f64,
        source: S2Source,
    },
}

/// Default contraction target for the variance-based schedule.
pub const DEFAULT_RHO_TILDE: f64 = 0.9;

impl BatchSchedule {
    /// Batch size at stage `s`, always in `[1, n]`.
    pub fn batch_size(&self, s: usize, n: usize) -> usize {
        match *self {
            BatchSchedule::Full => n,
            BatchSchedule::Doubling { initial } => {
                let shift = s.min(63) as u32;
                initial.max(1).saturating_mul(1usize << shift).min(n)
            }
            BatchSchedule::VarianceBased {
                gamma, rho_tilde, s2, ..
            } => variance_batch_size(n, s2, gamma, rho_tilde, s),
        }
    }
}

/// `min(n, ⌈n S² / (S² + n γ ρ̃^{2s})⌉)`, at least 1.
pub fn variance_batch_size(n: usize, s2: f64, gamma: f64, rho_tilde: f64, s: usize) -> usize {
    let nf = n as f64;
    let decay = math::powf(rho_tilde, 2.0 * s as f64);
    let denom = s2 + nf * gamma * decay;
    if !(denom > 0.0) {
        return n;
    }
    let bound = nf * s2 / denom;
    // the bound is a lower bound; shave rounding noise before the ceiling
    let size = math::ceil(bound * (1.0 - 1e-12));
    if !size.is_finite() || size >= nf {
        n
    } else {
        (size as usize).max(1)
    }
}

/// Step size for the SG steps of the mixed method,
/// `min(η, c √((n − |B|) / (n |B|)))`.
pub fn sg_step_size(eta: f64, n: usize, batch: usize, scale: f64) -> f64 {
    let nf = n as f64;
    let b = batch.clamp(1, n) as f64;
    eta.min(scale * math::sqrt((nf - b) / (nf * b)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use alloc::vec;

    #[test]
    fn without_replacement_edges() {
        let mut r = rng::stream(1, 0);
        let mut all = sample_without_replacement(7, 7, &mut r).unwrap();
        all.sort_unstable();
        assert_eq!(all, (0..7).collect::<Vec<_>>());
        assert_eq!(
            sample_without_replacement(7, 0, &mut r),
            Err(SamplingError::SizeOutOfRange { k: 0, n: 7 })
        );
        assert!(sample_without_replacement(7, 8, &mut r).is_err());
    }

    #[test]
    fn without_replacement_frequencies() {
        let mut r = rng::stream(2, 0);
        let mut drawer = BatchDrawer::new(10);
        let mut counts = [0usize; 10];
        let draws = 100_000;
        for _ in 0..draws {
            let batch = drawer.draw(3, &mut r).unwrap();
            let mut seen = [false; 10];
            for &i in batch {
                assert!(!seen[i]);
                seen[i] = true;
                counts[i] += 1;
            }
        }
        for c in counts {
            let freq = c as f64 / draws as f64;
            assert!((freq - 0.3).abs() < 0.01, "{freq}");
        }
    }

    #[test]
    fn weighted_frequencies() {
        let s = WeightedSampler::new(&[1.0, 3.0]).unwrap();
        let mut r = rng::stream(3, 0);
        let draws = 100_000;
        let ones = (0..draws).filter(|_| s.sample(&mut r) == 1).count();
        let freq = ones as f64 / draws as f64;
        assert!((freq - 0.75).abs() < 0.01, "{freq}");
        assert_eq!(s.probability(0), 0.25);
    }

    #[test]
    fn weighted_single_positive() {
        let s = WeightedSampler::new(&[0.0, 0.0, 2.0, 0.0]).unwrap();
        let mut r = rng::stream(4, 0);
        assert!((0..1000).all(|_| s.sample(&mut r) == 2));
    }

    #[test]
    fn weighted_rejects_bad_weights() {
        assert!(WeightedSampler::new(&[0.0, 0.0]).is_err());
        assert!(WeightedSampler::new(&[1.0, -1.0]).is_err());
        assert!(WeightedSampler::new(&[]).is_err());
        assert!(WeightedSampler::new(&[f64::NAN]).is_err());
    }

    #[test]
    fn alias_table_encodes_probabilities() {
        // reconstruct probabilities from the table itself
        let w = [0.5, 2.0, 0.0, 1.5, 4.0, 0.25];
        let s = WeightedSampler::new(&w).unwrap();
        let n = w.len() as f64;
        let mut mass = vec![0.0; w.len()];
        for col in 0..w.len() {
            mass[col] += s.cutoff[col] / n;
            mass[s.alias[col]] += (1.0 - s.cutoff[col]) / n;
        }
        for (i, m) in mass.iter().enumerate() {
            assert!((m - s.probability(i)).abs() < 1e-12);
        }
    }

    #[test]
    fn doubling_schedule() {
        let sched = BatchSchedule::Doubling { initial: 1 };
        assert_eq!(sched.batch_size(3, 100), 8);
        assert_eq!(sched.batch_size(0, 100), 1);
        assert_eq!(sched.batch_size(7, 100), 100);
        assert_eq!(sched.batch_size(200, 100), 100);
        assert_eq!(BatchSchedule::Full.batch_size(5, 42), 42);
    }

    #[test]
    fn variance_schedule_inflection_value() {
        assert_eq!(variance_batch_size(100, 1.0, 0.01, 0.9, 0), 50);
        assert_eq!(variance_batch_size(100, 1.0, 0.01, 0.9, 500), 100);
        let sizes: Vec<usize> = (0..60).map(|s| variance_batch_size(1000, 2.0, 0.05, 0.8, s)).collect();
        assert!(sizes.windows(2).all(|w| w[0] <= w[1]));
        assert!(sizes.iter().all(|&b| (1..=1000).contains(&b)));
    }

    #[test]
    fn sg_steps() {
        assert_eq!(sg_step_size(1.0, 100, 100, 1.0), 0.0);
        assert!((sg_step_size(10.0, 100, 1, 1.0) - (0.99f64).sqrt()).abs() < 1e-15);
        assert_eq!(sg_step_size(0.5, 100, 1, 1.0), 0.5);
        assert_eq!(sg_step_size(0.5, 100, 1, 0.0), 0.0);
    }

    #[test]
    fn adaptive_weights_floor_and_symmetry() {
        use crate::losses::{LossKind, Mode};
        let ds = SparseDataset::from_dense(&[vec![1.0], vec![1.0], vec![1.0]], &[1.0, 1.0, 1.0]).unwrap();
        let hsvm = LossModel::new(LossKind::Hsvm { epsilon: 0.5 }, 0.0, Mode::Composite, &ds).unwrap();
        let w = adaptive_weights(&hsvm, &ds, &[5.0], AdaptiveMode::GradNorm);
        assert_eq!(w, vec![ADAPTIVE_WEIGHT_FLOOR; 3]);
        let w = adaptive_weights(&hsvm, &ds, &[0.0], AdaptiveMode::FunctionValue);
        assert!(w.iter().all(|&v| v == w[0]));
        assert!(WeightedSampler::new(&w).is_ok());
    }
}
