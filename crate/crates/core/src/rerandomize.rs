//! Complete randomization and the acceptance–rejection loop.

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::balance::{BalanceChecker, BalanceReport, Scratch};
use crate::criterion::{BalanceCriterion, BalanceGeometry};
use crate::design::{FactorialStructure, GroupSizes};
use crate::error::{Error, Result};
use crate::rng::{SeedRecord, StreamRng};

/// Upper bound on the default number of draws.
pub const MAX_DRAWS_CAP: u64 = 10_000_000;

/// A treatment assignment with zero-based combination labels.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Assignment {
    labels: Vec<usize>,
    counts: Vec<usize>,
}

impl Assignment {
    pub fn from_labels(labels: Vec<usize>, combinations: usize) -> Result<Self> {
        let mut counts = vec![0; combinations];
        for (i, &q) in labels.iter().enumerate() {
            if q >= combinations {
                return Err(Error::invalid(format!(
                    "unit {} is assigned to combination {}, outside 1..={combinations}",
                    i + 1,
                    q + 1
                )));
            }
            counts[q] += 1;
        }
        Ok(Self { labels, counts })
    }

    pub fn from_one_based(labels: &[usize], combinations: usize) -> Result<Self> {
        if let Some(i) = labels.iter().position(|&q| q == 0) {
            return Err(Error::invalid(format!("unit {} has assignment 0; combinations are 1-based", i + 1)));
        }
        Self::from_labels(labels.iter().map(|q| q - 1).collect(), combinations)
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn one_based(&self) -> Vec<usize> {
        self.labels.iter().map(|q| q + 1).collect()
    }

    pub fn counts(&self) -> &[usize] {
        &self.counts
    }

    pub fn combinations(&self) -> usize {
        self.counts.len()
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Errors naming the first group whose count differs from `sizes`.
    pub fn check_sizes(&self, sizes: &GroupSizes) -> Result<()> {
        if sizes.len() != self.counts.len() {
            return Err(Error::invalid(format!(
                "assignment has {} combinations, design has {}",
                self.counts.len(),
                sizes.len()
            )));
        }
        for (q, (&c, &n)) in self.counts.iter().zip(sizes.as_slice()).enumerate() {
            if c != n {
                return Err(Error::invalid(format!("group {} has {c} units but the design requires {n}", q + 1)));
            }
        }
        Ok(())
    }
}

/// Sorted label multiset: `n_1` zeros, then `n_2` ones, and so on.
pub(crate) fn base_labels(sizes: &GroupSizes) -> Vec<usize> {
    sizes
        .as_slice()
        .iter()
        .enumerate()
        .flat_map(|(q, &n)| std::iter::repeat_n(q, n))
        .collect()
}

/// A uniformly random assignment with the given group sizes: a Fisher–Yates
/// shuffle of the sorted label multiset.
pub fn draw_crfe<R: Rng + ?Sized>(sizes: &GroupSizes, rng: &mut R) -> Assignment {
    let mut labels = base_labels(sizes);
    labels.shuffle(rng);
    Assignment { labels, counts: sizes.as_slice().to_vec() }
}

/// `ceil(50 / p_a)`, capped at [`MAX_DRAWS_CAP`].
pub fn default_max_draws(acceptance_probability: f64) -> u64 {
    if !(acceptance_probability > 0.0) {
        return MAX_DRAWS_CAP;
    }
    ((50.0 / acceptance_probability).ceil() as u64).clamp(1, MAX_DRAWS_CAP)
}

/// The closest draw seen by a loop that ran out of draws.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NearMiss {
    pub assignment: Assignment,
    pub report: BalanceReport,
    /// Largest statistic-to-threshold ratio of this draw.
    pub ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RerandomizationOutcome {
    pub assignment: Assignment,
    pub draws_attempted: u64,
    pub report: BalanceReport,
    pub seed: SeedRecord,
}

/// A criterion bound to a population, ready to draw accepted assignments.
#[derive(Debug, Clone)]
pub struct Rerandomizer {
    checker: BalanceChecker,
    base: Vec<usize>,
    max_draws: u64,
}

impl Rerandomizer {
    pub fn new(geometry: BalanceGeometry, max_draws: Option<u64>) -> Result<Self> {
        let max_draws = max_draws.unwrap_or_else(|| default_max_draws(geometry.acceptance_probability()));
        if max_draws == 0 {
            return Err(Error::invalid("max_draws must be at least 1"));
        }
        let base = base_labels(geometry.sizes());
        Ok(Self { checker: BalanceChecker::new(geometry)?, base, max_draws })
    }

    pub fn checker(&self) -> &BalanceChecker {
        &self.checker
    }

    pub fn max_draws(&self) -> u64 {
        self.max_draws
    }

    /// Draws until acceptance, writing the accepted labels into `labels`.
    /// Returns the number of draws used.
    pub fn draw_into<R: Rng + ?Sized>(&self, rng: &mut R, labels: &mut Vec<usize>, scratch: &mut Scratch) -> Result<u64> {
        let mut best: Option<(f64, Vec<usize>)> = None;
        let thresholds = self.checker.criterion().thresholds();
        for draw in 1..=self.max_draws {
            labels.clear();
            labels.extend_from_slice(&self.base);
            labels.shuffle(rng);
            if self.checker.evaluate_into(labels, scratch) {
                return Ok(draw);
            }
            let ratio = scratch
                .statistics
                .iter()
                .zip(&thresholds)
                .map(|(s, a)| s / a)
                .fold(0.0, f64::max);
            if best.as_ref().is_none_or(|(r, _)| ratio < *r) {
                best = Some((ratio, labels.clone()));
            }
        }
        let (ratio, best_labels) = best.expect("at least one draw");
        let q = self.base.last().map_or(0, |q| q + 1);
        let assignment = Assignment::from_labels(best_labels, q)?;
        let report = self.checker.report_from(assignment.labels(), scratch);
        Err(Error::MaxDrawsExceeded { draws: self.max_draws, best: Box::new(NearMiss { assignment, report, ratio }) })
    }

    pub fn run(&self, rng: &mut StreamRng) -> Result<RerandomizationOutcome> {
        let seed = rng.record();
        let mut labels = Vec::with_capacity(self.base.len());
        let mut scratch = Scratch::default();
        let draws_attempted = self.draw_into(rng, &mut labels, &mut scratch)?;
        let assignment = Assignment::from_labels(labels, self.checker.geometry().sizes().len())?;
        let report = self.checker.report_from(assignment.labels(), &mut scratch);
        Ok(RerandomizationOutcome { assignment, draws_attempted, report, seed })
    }
}

/// Draw complete randomizations until one satisfies `criterion`.
pub fn rerandomize(
    x: &DMatrix<f64>,
    s: &FactorialStructure,
    sizes: &GroupSizes,
    criterion: &BalanceCriterion,
    rng: &mut StreamRng,
    max_draws: Option<u64>,
) -> Result<RerandomizationOutcome> {
    let geometry = BalanceGeometry::new(x, s, sizes, criterion)?;
    Rerandomizer::new(geometry, max_draws)?.run(rng)
}

/// Asymptotic acceptance probability of `criterion` with `l` covariates and `f` effects.
pub fn acceptance_probability(criterion: &BalanceCriterion, l: usize, f: usize) -> f64 {
    criterion.acceptance_probability(l, f)
}
