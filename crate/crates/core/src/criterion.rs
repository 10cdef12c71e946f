//! Balance criteria and the precomputed algebra they induce on a population.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::design::{
    orthogonalize_covariates, CovariateTierPartition, EffectOrthogonalization, EffectTierPartition,
    FactorialStructure, GroupSizes, Partition, TierGrid,
};
use crate::error::{Error, Result};
use crate::{linalg, stats};

/// Which assignments a (re)randomized design accepts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum BalanceCriterion {
    /// Complete randomization: every draw is accepted.
    Crfe,
    /// One Mahalanobis statistic over all covariates and effects, M ≤ a.
    Refm { a: f64 },
    /// One statistic per tier of effects, M_h ≤ a_h.
    TiersF { effect_partition: EffectTierPartition, a: Vec<f64> },
    /// Statistics per (covariate tier, effect tier) cell, summed over grid tiers, Σ M_{t,h} ≤ a_j.
    TiersCf {
        effect_partition: EffectTierPartition,
        covariate_partition: CovariateTierPartition,
        grid: TierGrid,
        a: Vec<f64>,
    },
}

impl BalanceCriterion {
    pub fn name(&self) -> &'static str {
        match self {
            BalanceCriterion::Crfe => "crfe",
            BalanceCriterion::Refm { .. } => "refm",
            BalanceCriterion::TiersF { .. } => "tiers_f",
            BalanceCriterion::TiersCf { .. } => "tiers_cf",
        }
    }

    /// Chi-square dimensions of the balance tiers for `l` covariates and `f` effects.
    pub fn dims(&self, l: usize, f: usize) -> Vec<usize> {
        match self {
            BalanceCriterion::Crfe => Vec::new(),
            BalanceCriterion::Refm { .. } => vec![l * f],
            BalanceCriterion::TiersF { effect_partition, .. } => {
                effect_partition.sizes().iter().map(|fh| l * fh).collect()
            }
            BalanceCriterion::TiersCf { effect_partition, covariate_partition, grid, .. } => (0..grid.tiers())
                .map(|j| grid.dimension(j, covariate_partition, effect_partition))
                .collect(),
        }
    }

    pub fn thresholds(&self) -> Vec<f64> {
        match self {
            BalanceCriterion::Crfe => Vec::new(),
            BalanceCriterion::Refm { a } => vec![*a],
            BalanceCriterion::TiersF { a, .. } | BalanceCriterion::TiersCf { a, .. } => a.clone(),
        }
    }

    /// Asymptotic acceptance probability: the product of the tier chi-square CDFs.
    pub fn acceptance_probability(&self, l: usize, f: usize) -> f64 {
        self.dims(l, f)
            .iter()
            .zip(self.thresholds())
            .map(|(&d, a)| stats::chi2_cdf(d as f64, a))
            .product()
    }

    pub fn validate(&self, l: usize, f: usize) -> Result<()> {
        let check = |a: &[f64], expected: usize, what: &str| -> Result<()> {
            if a.len() != expected {
                return Err(Error::invalid(format!("{what} needs {expected} thresholds, got {}", a.len())));
            }
            if let Some(bad) = a.iter().find(|v| !(v.is_finite() && **v > 0.0)) {
                return Err(Error::invalid(format!("thresholds must be positive and finite, got {bad}")));
            }
            Ok(())
        };
        if !matches!(self, BalanceCriterion::Crfe) && l == 0 {
            return Err(Error::invalid("a balance criterion needs at least one covariate"));
        }
        match self {
            BalanceCriterion::Crfe => Ok(()),
            BalanceCriterion::Refm { a } => check(std::slice::from_ref(a), 1, "refm"),
            BalanceCriterion::TiersF { effect_partition, a } => {
                if effect_partition.total() != f {
                    return Err(Error::invalid(format!(
                        "effect tiers cover {} effects, design has {f}",
                        effect_partition.total()
                    )));
                }
                check(a, effect_partition.count(), "tiers_f")
            }
            BalanceCriterion::TiersCf { effect_partition, covariate_partition, grid, a } => {
                if effect_partition.total() != f {
                    return Err(Error::invalid(format!(
                        "effect tiers cover {} effects, design has {f}",
                        effect_partition.total()
                    )));
                }
                if covariate_partition.total() != l {
                    return Err(Error::invalid(format!(
                        "covariate tiers cover {} covariates, data has {l}",
                        covariate_partition.total()
                    )));
                }
                if grid.covariate_tiers() != covariate_partition.count() || grid.effect_tiers() != effect_partition.count()
                {
                    return Err(Error::invalid("grid shape does not match the tier partitions"));
                }
                check(a, grid.tiers(), "tiers_cf")
            }
        }
    }

    /// The same criterion with every threshold replaced.
    pub fn with_thresholds(&self, a: Vec<f64>) -> Self {
        match self {
            BalanceCriterion::Crfe => BalanceCriterion::Crfe,
            BalanceCriterion::Refm { .. } => BalanceCriterion::Refm { a: a[0] },
            BalanceCriterion::TiersF { effect_partition, .. } => {
                BalanceCriterion::TiersF { effect_partition: effect_partition.clone(), a }
            }
            BalanceCriterion::TiersCf { effect_partition, covariate_partition, grid, .. } => BalanceCriterion::TiersCf {
                effect_partition: effect_partition.clone(),
                covariate_partition: covariate_partition.clone(),
                grid: grid.clone(),
                a,
            },
        }
    }
}

/// Per-tier thresholds a_h with P(χ²_{dims_h} ≤ a_h) = p_h.
pub fn thresholds_from_probability(dims: &[usize], p: &[f64]) -> Result<Vec<f64>> {
    if dims.len() != p.len() {
        return Err(Error::invalid(format!("{} dimensions but {} probabilities", dims.len(), p.len())));
    }
    dims.iter()
        .zip(p)
        .map(|(&d, &pi)| {
            if d == 0 {
                return Err(Error::invalid("tier dimension must be positive"));
            }
            if !(pi > 0.0 && pi < 1.0) {
                return Err(Error::invalid(format!(
                    "acceptance probability must lie strictly inside (0, 1), got {pi}; use complete randomization for 1"
                )));
            }
            stats::chi2_quantile(d as f64, pi)
        })
        .collect()
}

/// One truncated component of the asymptotic law: a group of (covariate tier, effect tier) cells.
#[derive(Debug, Clone, PartialEq)]
pub struct ComponentSpec {
    pub cells: Vec<(usize, usize)>,
    pub dim: usize,
    /// `None` when the component is not truncated.
    pub threshold: Option<f64>,
}

/// Everything about a criterion that depends only on the design and the covariates.
#[derive(Debug, Clone)]
pub struct BalanceGeometry {
    structure: FactorialStructure,
    sizes: GroupSizes,
    criterion: BalanceCriterion,
    effects: EffectOrthogonalization,
    covariate_partition: CovariateTierPartition,
    covariates: DMatrix<f64>,
    block_covariances: Vec<DMatrix<f64>>,
    components: Vec<ComponentSpec>,
}

impl BalanceGeometry {
    pub fn new(
        x: &DMatrix<f64>,
        structure: &FactorialStructure,
        sizes: &GroupSizes,
        criterion: &BalanceCriterion,
    ) -> Result<Self> {
        sizes.check_matches(structure)?;
        if x.nrows() != sizes.total() {
            return Err(Error::invalid(format!(
                "covariate matrix has {} rows but group sizes sum to {}",
                x.nrows(),
                sizes.total()
            )));
        }
        let l = x.ncols();
        let f = structure.effects();
        criterion.validate(l, f)?;
        let (effect_partition, covariate_partition, covariates, cells, thresholds): (_, _, _, Vec<Vec<(usize, usize)>>, Vec<Option<f64>>) =
            match criterion {
                BalanceCriterion::Crfe => {
                    let cells = if l == 0 { Vec::new() } else { vec![vec![(0, 0)]] };
                    let thr = vec![None; cells.len()];
                    (Partition::single(f), Partition::single(l), x.clone(), cells, thr)
                }
                BalanceCriterion::Refm { a } => {
                    (Partition::single(f), Partition::single(l), x.clone(), vec![vec![(0, 0)]], vec![Some(*a)])
                }
                BalanceCriterion::TiersF { effect_partition, a } => (
                    effect_partition.clone(),
                    Partition::single(l),
                    x.clone(),
                    (0..effect_partition.count()).map(|h| vec![(0, h)]).collect(),
                    a.iter().map(|&v| Some(v)).collect(),
                ),
                BalanceCriterion::TiersCf { effect_partition, covariate_partition, grid, a } => (
                    effect_partition.clone(),
                    covariate_partition.clone(),
                    orthogonalize_covariates(x, covariate_partition)?,
                    grid.all_cells().to_vec(),
                    a.iter().map(|&v| Some(v)).collect(),
                ),
            };
        let effects = EffectOrthogonalization::new(structure, sizes, &effect_partition)?;
        let mut block_covariances = Vec::new();
        if l > 0 {
            let s = linalg::covariance(&covariates);
            for (t, block) in covariate_partition.blocks().iter().enumerate() {
                let sb = linalg::select(&s, block, block);
                linalg::spd_inverse(&sb, &format!("covariance of covariate tier {}", t + 1))?;
                block_covariances.push(sb);
            }
        }
        let components = cells
            .into_iter()
            .zip(thresholds)
            .map(|(cells, threshold)| {
                let dim = cells
                    .iter()
                    .map(|&(t, h)| covariate_partition.block(t).len() * effect_partition.block(h).len())
                    .sum();
                ComponentSpec { cells, dim, threshold }
            })
            .collect();
        Ok(Self {
            structure: structure.clone(),
            sizes: sizes.clone(),
            criterion: criterion.clone(),
            effects,
            covariate_partition,
            covariates,
            block_covariances,
            components,
        })
    }

    pub fn structure(&self) -> &FactorialStructure {
        &self.structure
    }

    pub fn sizes(&self) -> &GroupSizes {
        &self.sizes
    }

    pub fn criterion(&self) -> &BalanceCriterion {
        &self.criterion
    }

    pub fn effects(&self) -> &EffectOrthogonalization {
        &self.effects
    }

    pub fn covariate_partition(&self) -> &CovariateTierPartition {
        &self.covariate_partition
    }

    /// Covariates the statistics are built from: X, or its tier-orthogonalized version.
    pub fn covariates(&self) -> &DMatrix<f64> {
        &self.covariates
    }

    /// Finite-population covariance of covariate tier `t` (of the orthogonalized covariates if tiered).
    pub fn block_covariance(&self, t: usize) -> &DMatrix<f64> {
        &self.block_covariances[t]
    }

    pub fn components(&self) -> &[ComponentSpec] {
        &self.components
    }

    pub fn covariate_count(&self) -> usize {
        self.covariates.ncols()
    }

    /// Whether the component thresholds are all infinite (complete randomization).
    pub fn is_untruncated(&self) -> bool {
        self.components.iter().all(|c| c.threshold.is_none())
    }

    pub fn acceptance_probability(&self) -> f64 {
        self.criterion.acceptance_probability(self.covariate_count(), self.structure.effects())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn education_style_thresholds() {
        let a = thresholds_from_probability(&[10, 5], &[0.002, 0.5]).unwrap();
        let p: f64 = [10.0, 5.0].iter().zip(&a).map(|(d, a)| stats::chi2_cdf(*d, *a)).product();
        assert!((p - 0.001).abs() < 1e-12);
        assert!(thresholds_from_probability(&[3], &[1.0]).is_err());
        assert!(thresholds_from_probability(&[3], &[0.0]).is_err());
    }

    #[test]
    fn dims_follow_tiers() {
        let s = FactorialStructure::new(2).unwrap();
        let ep = Partition::main_effects_first(&s);
        let c = BalanceCriterion::TiersF { effect_partition: ep.clone(), a: vec![1.0, 1.0] };
        assert_eq!(c.dims(5, 3), vec![10, 5]);
        let cp = Partition::new(vec![vec![0], vec![1, 2]], 3).unwrap();
        let grid = TierGrid::triangular(2, 2).unwrap();
        let c = BalanceCriterion::TiersCf { effect_partition: ep, covariate_partition: cp, grid, a: vec![1.0, 1.0] };
        assert_eq!(c.dims(3, 3), vec![2, 1 + 4 + 2]);
        assert!(c.validate(3, 3).is_ok());
        assert!(c.validate(2, 3).is_err());
    }
}
