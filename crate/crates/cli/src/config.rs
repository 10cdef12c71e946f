//! Design configuration files and their resolution into core types.
//!
//! Tier and column indices are one-based in files.

use std::path::Path;

use refac::criterion::BalanceCriterion;
use refac::design::{FactorialStructure, GroupSizes, Partition, TierGrid};
use refac::stats;
use serde::{de::DeserializeOwned, Deserialize, Serialize};

use crate::error::{CliError, CliResult};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SizesConfig {
    Explicit(Vec<usize>),
    /// `{"equal": n}`: n units in total, split equally.
    Equal { equal: usize },
}

impl SizesConfig {
    pub fn resolve(&self, s: &FactorialStructure) -> refac::Result<GroupSizes> {
        let sizes = match self {
            SizesConfig::Explicit(v) => GroupSizes::new(v.clone())?,
            SizesConfig::Equal { equal } => GroupSizes::equal(s.combinations(), *equal)?,
        };
        sizes.check_matches(s)?;
        Ok(sizes)
    }
}

/// Per-tier thresholds, given either directly or as acceptance probabilities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ThresholdConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub a: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub p: Option<Vec<f64>>,
}

impl ThresholdConfig {
    /// Resolved (a, p) per tier.
    pub fn resolve(&self, dims: &[usize]) -> refac::Result<(Vec<f64>, Vec<f64>)> {
        let invalid = |m: String| refac::Error::Invalid(m);
        let given = match (&self.a, &self.p) {
            (Some(a), None) => a,
            (None, Some(p)) => p,
            _ => return Err(invalid("give exactly one of \"a\" or \"p\" for the thresholds".into())),
        };
        if given.len() != dims.len() {
            return Err(invalid(format!("criterion has {} tiers but {} thresholds were given", dims.len(), given.len())));
        }
        match (&self.a, &self.p) {
            (Some(a), _) => {
                if let Some(bad) = a.iter().find(|v| !(v.is_finite() && **v > 0.0)) {
                    return Err(invalid(format!("thresholds must be positive and finite, got {bad}")));
                }
                let p = dims.iter().zip(a).map(|(&d, &ai)| stats::chi2_cdf(d as f64, ai)).collect();
                Ok((a.clone(), p))
            }
            (_, Some(p)) => Ok((refac::criterion::thresholds_from_probability(dims, p)?, p.clone())),
            _ => unreachable!(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum GridConfig {
    /// `"triangular"`.
    Named(String),
    /// Grid tiers as lists of one-based `[covariate tier, effect tier]` cells.
    Cells(Vec<Vec<[usize; 2]>>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum CriterionConfig {
    Crfe,
    Refm {
        thresholds: ThresholdConfig,
    },
    TiersF {
        effect_tiers: Vec<Vec<usize>>,
        thresholds: ThresholdConfig,
    },
    TiersCf {
        effect_tiers: Vec<Vec<usize>>,
        covariate_tiers: Vec<Vec<usize>>,
        grid: GridConfig,
        thresholds: ThresholdConfig,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DesignConfig {
    pub factors: usize,
    pub group_sizes: SizesConfig,
    pub criterion: CriterionConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_draws: Option<u64>,
}

/// A criterion with every threshold resolved.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ResolvedCriterion {
    pub criterion: BalanceCriterion,
    pub dims: Vec<usize>,
    pub a: Vec<f64>,
    pub p: Vec<f64>,
    pub acceptance_probability: f64,
}

impl CriterionConfig {
    /// Resolve against a design with `l` covariates.
    pub fn resolve(&self, s: &FactorialStructure, l: usize) -> refac::Result<ResolvedCriterion> {
        let f = s.effects();
        let (shape, thresholds) = match self {
            CriterionConfig::Crfe => {
                return Ok(ResolvedCriterion {
                    criterion: BalanceCriterion::Crfe,
                    dims: vec![],
                    a: vec![],
                    p: vec![],
                    acceptance_probability: 1.0,
                })
            }
            CriterionConfig::Refm { thresholds } => (BalanceCriterion::Refm { a: 1.0 }, thresholds),
            CriterionConfig::TiersF { effect_tiers, thresholds } => {
                let effect_partition = Partition::from_one_based(effect_tiers.clone(), f)?;
                let a = vec![1.0; effect_partition.count()];
                (BalanceCriterion::TiersF { effect_partition, a }, thresholds)
            }
            CriterionConfig::TiersCf { effect_tiers, covariate_tiers, grid, thresholds } => {
                let effect_partition = Partition::from_one_based(effect_tiers.clone(), f)?;
                let covariate_partition = Partition::from_one_based(covariate_tiers.clone(), l)?;
                let (t, h) = (covariate_partition.count(), effect_partition.count());
                let grid = match grid {
                    GridConfig::Named(name) if name == "triangular" => TierGrid::triangular(t, h)?,
                    GridConfig::Named(name) => {
                        return Err(refac::Error::Invalid(format!("unknown grid \"{name}\"; use \"triangular\" or a cell list")))
                    }
                    GridConfig::Cells(cells) => TierGrid::from_one_based(
                        t,
                        h,
                        cells.iter().map(|tier| tier.iter().map(|c| (c[0], c[1])).collect()).collect(),
                    )?,
                };
                let a = vec![1.0; grid.tiers()];
                (BalanceCriterion::TiersCf { effect_partition, covariate_partition, grid, a }, thresholds)
            }
        };
        let dims = shape.dims(l, f);
        let (a, p) = thresholds.resolve(&dims)?;
        let criterion = shape.with_thresholds(a.clone());
        criterion.validate(l, f)?;
        let acceptance_probability = criterion.acceptance_probability(l, f);
        Ok(ResolvedCriterion { criterion, dims, a, p, acceptance_probability })
    }
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> CliResult<T> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| CliError::file(path, format!("invalid JSON: {e}")))
}

pub fn write_text(path: &Path, text: &str) -> CliResult<()> {
    std::fs::write(path, text).map_err(|e| CliError::io(path, e))
}

pub fn to_json<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("serializable report");
    s.push('\n');
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn probabilities_round_trip() {
        let t = ThresholdConfig { a: None, p: Some(vec![0.002, 0.5]) };
        let (a, p) = t.resolve(&[10, 5]).unwrap();
        let back = ThresholdConfig { a: Some(a.clone()), p: None }.resolve(&[10, 5]).unwrap();
        for i in 0..2 {
            assert!((back.1[i] - p[i]).abs() < 1e-10);
            assert!((back.0[i] - a[i]).abs() < 1e-8);
        }
    }

    #[test]
    fn both_or_neither_rejected() {
        assert!(ThresholdConfig { a: Some(vec![1.0]), p: Some(vec![0.5]) }.resolve(&[2]).is_err());
        assert!(ThresholdConfig { a: None, p: None }.resolve(&[2]).is_err());
        assert!(ThresholdConfig { a: None, p: Some(vec![1.0]) }.resolve(&[2]).is_err());
    }

    #[test]
    fn config_parses() {
        let text = r#"{
            "factors": 2,
            "group_sizes": {"equal": 100},
            "criterion": {"type": "tiers_cf", "effect_tiers": [[1, 2], [3]], "covariate_tiers": [[1], [2, 3]],
                          "grid": "triangular", "thresholds": {"p": [0.1, 0.5]}}
        }"#;
        let c: DesignConfig = serde_json::from_str(text).unwrap();
        let s = FactorialStructure::new(2).unwrap();
        let r = c.criterion.resolve(&s, 3).unwrap();
        assert_eq!(r.dims, vec![2, 7]);
        assert!((r.acceptance_probability - 0.05).abs() < 1e-12);
    }
}
