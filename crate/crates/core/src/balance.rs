//! Covariate imbalance statistics and the Mahalanobis balance checks.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::criterion::{BalanceCriterion, BalanceGeometry};
use crate::design::{
    b_tilde, CovariateTierPartition, EffectOrthogonalization, FactorialStructure, GroupSizes, TierGrid,
};
use crate::error::{Error, Result};
use crate::linalg;
use crate::rerandomize::Assignment;

/// L×Q matrix of group means of the columns of `x`.
pub fn group_means(x: &DMatrix<f64>, z: &Assignment) -> Result<DMatrix<f64>> {
    if x.nrows() != z.len() {
        return Err(Error::invalid(format!("{} rows of data but {} assigned units", x.nrows(), z.len())));
    }
    if let Some(q) = z.counts().iter().position(|&c| c == 0) {
        return Err(Error::invalid(format!("group {} is empty", q + 1)));
    }
    let mut means = DMatrix::zeros(x.ncols(), z.combinations());
    for (i, &q) in z.labels().iter().enumerate() {
        for l in 0..x.ncols() {
            means[(l, q)] += x[(i, l)];
        }
    }
    for (q, &c) in z.counts().iter().enumerate() {
        means.column_mut(q).unscale_mut(c as f64);
    }
    Ok(means)
}

/// Stacked covariate contrasts τ̂_x = (τ̂_{x,1}', ..., τ̂_{x,F}')'.
pub fn covariate_diff_in_means(x: &DMatrix<f64>, z: &Assignment, s: &FactorialStructure) -> Result<DVector<f64>> {
    check_design(z, s)?;
    let t = group_means(x, z)? * s.generating_matrix().transpose() * s.contrast_scale();
    Ok(DVector::from_column_slice(t.as_slice()))
}

/// Stacked contrasts with respect to the orthogonalized coefficients, tiers in order.
pub fn theta_x(
    x: &DMatrix<f64>,
    z: &Assignment,
    s: &FactorialStructure,
    effects: &EffectOrthogonalization,
) -> Result<DVector<f64>> {
    check_design(z, s)?;
    let t = group_means(x, z)? * effects.c_matrix().transpose() * s.contrast_scale();
    Ok(DVector::from_column_slice(t.as_slice()))
}

fn check_design(z: &Assignment, s: &FactorialStructure) -> Result<()> {
    if z.combinations() != s.combinations() {
        return Err(Error::invalid(format!(
            "assignment uses {} combinations, design has {}",
            z.combinations(),
            s.combinations()
        )));
    }
    Ok(())
}

/// A covariance of the form `left ⊗ right`, handled factor by factor.
#[derive(Debug, Clone, PartialEq)]
pub struct KroneckerCov {
    pub left: DMatrix<f64>,
    pub right: DMatrix<f64>,
}

impl KroneckerCov {
    pub fn dense(&self) -> DMatrix<f64> {
        linalg::kron(&self.left, &self.right)
    }

    pub fn inverse(&self) -> Result<KroneckerCov> {
        Ok(KroneckerCov {
            left: linalg::spd_inverse(&self.left, "effect factor of the covariance")?,
            right: linalg::spd_inverse(&self.right, "covariate factor of the covariance")?,
        })
    }

    pub fn inv_sqrt(&self) -> Result<KroneckerCov> {
        Ok(KroneckerCov {
            left: linalg::spd_inv_sqrt(&self.left, "effect factor of the covariance")?,
            right: linalg::spd_inv_sqrt(&self.right, "covariate factor of the covariance")?,
        })
    }

    /// `v' (left ⊗ right) v` for `v` stacked in blocks of `right.nrows()`.
    pub fn quad_form(&self, v: &DVector<f64>) -> f64 {
        let l = self.right.nrows();
        let f = self.left.nrows();
        assert_eq!(v.len(), l * f, "vector length does not match the covariance");
        let t = DMatrix::from_column_slice(l, f, v.as_slice());
        (t.transpose() * &self.right * &t).component_mul(&self.left).sum()
    }
}

/// V_xx = B̃ ⊗ S_xx, the sampling covariance of τ̂_x under complete randomization.
pub fn vxx(s: &FactorialStructure, sizes: &GroupSizes, sxx: &DMatrix<f64>) -> Result<KroneckerCov> {
    linalg::spd_inverse(sxx, "covariate covariance S_xx")?;
    Ok(KroneckerCov { left: b_tilde(s, sizes)?, right: sxx.clone() })
}

/// M = τ̂_x' V_xx^-1 τ̂_x.
pub fn mahalanobis_refm(tau_x: &DVector<f64>, vxx: &KroneckerCov) -> Result<f64> {
    Ok(vxx.inverse()?.quad_form(tau_x).max(0.0))
}

/// M_h = θ̂_x[h]' W_xx[h]^-1 θ̂_x[h] with W_xx[h] = C̃_hh ⊗ S_xx.
pub fn mahalanobis_tiers_f(
    theta_x: &DVector<f64>,
    effects: &EffectOrthogonalization,
    sxx: &DMatrix<f64>,
) -> Result<Vec<f64>> {
    let l = sxx.nrows();
    let sinv = linalg::spd_inverse(sxx, "covariate covariance S_xx")?;
    let mut offset = 0;
    (0..effects.tiers())
        .map(|h| {
            let fh = effects.tier_size(h);
            let w = KroneckerCov {
                left: linalg::spd_inverse(&effects.c_tilde_block(h), &format!("tier {} coefficient covariance", h + 1))?,
                right: sinv.clone(),
            };
            let v = theta_x.rows(offset, l * fh).into_owned();
            offset += l * fh;
            Ok(w.quad_form(&v).max(0.0))
        })
        .collect()
}

/// Cell statistics M_{t,h} (T×H) and their sums over the grid tiers.
#[derive(Debug, Clone, PartialEq)]
pub struct CellStatistics {
    pub cells: DMatrix<f64>,
    pub sums: Vec<f64>,
}

/// Statistics of the tiered covariate-and-effect criterion, computed from the
/// orthogonalized covariates `e`.
pub fn mahalanobis_tiers_cf(
    e: &DMatrix<f64>,
    z: &Assignment,
    s: &FactorialStructure,
    effects: &EffectOrthogonalization,
    covariates: &CovariateTierPartition,
    grid: &TierGrid,
) -> Result<CellStatistics> {
    let theta = theta_x(e, z, s, effects)?;
    let l = e.ncols();
    let big = DMatrix::from_column_slice(l, s.effects(), theta.as_slice());
    let scov = linalg::covariance(e);
    let ranges = effects.partition().ranges();
    let mut cells = DMatrix::zeros(covariates.count(), effects.tiers());
    for (t, block) in covariates.blocks().iter().enumerate() {
        let st = linalg::select(&scov, block, block);
        let sinv = linalg::spd_inverse(&st, &format!("covariance of covariate tier {}", t + 1))?;
        for (h, r) in ranges.iter().enumerate() {
            let cols: Vec<usize> = r.clone().collect();
            let th = linalg::select(&big, block, &cols);
            let w = KroneckerCov {
                left: linalg::spd_inverse(&effects.c_tilde_block(h), &format!("tier {} coefficient covariance", h + 1))?,
                right: sinv.clone(),
            };
            cells[(t, h)] = w.quad_form(&DVector::from_column_slice(th.as_slice())).max(0.0);
        }
    }
    let sums = grid
        .all_cells()
        .iter()
        .map(|group| group.iter().map(|&(t, h)| cells[(t, h)]).sum())
        .collect();
    Ok(CellStatistics { cells, sums })
}

/// Balance statistics of one assignment against a criterion.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BalanceReport {
    pub criterion: String,
    /// M_{t,h} for every (covariate tier, effect tier) cell.
    pub cell_statistics: Vec<Vec<f64>>,
    /// One statistic per balance tier (M, the M_h, or the grid sums).
    pub statistics: Vec<f64>,
    /// Thresholds per tier; empty under complete randomization.
    pub thresholds: Vec<f64>,
    pub passed: bool,
    pub acceptance_probability: f64,
}

impl BalanceReport {
    /// Largest statistic-to-threshold ratio; at most 1 for an accepted draw.
    pub fn ratio(&self) -> f64 {
        self.statistics
            .iter()
            .zip(&self.thresholds)
            .map(|(s, a)| s / a)
            .fold(0.0, f64::max)
    }
}

/// Fast repeated evaluation of one criterion on one population.
///
/// Covariates are whitened tier by tier once, so a draw costs one pass over
/// the units plus a few tiny matrix products.
#[derive(Debug, Clone)]
pub struct BalanceChecker {
    geometry: BalanceGeometry,
    /// Row-major n×L whitened covariates, tiers contiguous.
    whitened: Vec<f64>,
    l: usize,
    tier_offsets: Vec<(usize, usize)>,
    /// Per effect tier, the Q×F_h map from group means to whitened contrasts.
    projectors: Vec<DMatrix<f64>>,
    inv_sizes: Vec<f64>,
    thresholds: Vec<Option<f64>>,
}

/// Reusable buffers for [`BalanceChecker::evaluate_into`].
#[derive(Debug, Clone, Default)]
pub struct Scratch {
    sums: Vec<f64>,
    contrast: Vec<f64>,
    pub cells: Vec<f64>,
    pub statistics: Vec<f64>,
}

impl BalanceChecker {
    pub fn new(geometry: BalanceGeometry) -> Result<Self> {
        let e = geometry.covariates();
        let n = e.nrows();
        let l = e.ncols();
        let part = geometry.covariate_partition().clone();
        let mut whitened = vec![0.0; n * l];
        let mut tier_offsets = Vec::new();
        let mut col = 0;
        if l > 0 {
            for (t, block) in part.blocks().iter().enumerate() {
                let w = linalg::spd_inv_sqrt(geometry.block_covariance(t), &format!("covariance of covariate tier {}", t + 1))?;
                let rows: Vec<usize> = (0..n).collect();
                let u = linalg::select(e, &rows, block) * w;
                for i in 0..n {
                    for k in 0..block.len() {
                        whitened[i * l + col + k] = u[(i, k)];
                    }
                }
                tier_offsets.push((col, block.len()));
                col += block.len();
            }
        }
        let s = geometry.structure();
        let eff = geometry.effects();
        let projectors = (0..eff.tiers())
            .map(|h| {
                let root = linalg::spd_inv_sqrt(&eff.c_tilde_block(h), &format!("tier {} coefficient covariance", h + 1))?;
                Ok(eff.c_tier(h).transpose() * root * s.contrast_scale())
            })
            .collect::<Result<Vec<_>>>()?;
        let inv_sizes = geometry.sizes().as_slice().iter().map(|&c| 1.0 / c as f64).collect();
        let thresholds = geometry.components().iter().map(|c| c.threshold).collect();
        Ok(Self { geometry, whitened, l, tier_offsets, projectors, inv_sizes, thresholds })
    }

    pub fn geometry(&self) -> &BalanceGeometry {
        &self.geometry
    }

    pub fn criterion(&self) -> &BalanceCriterion {
        self.geometry.criterion()
    }

    /// Fills `scratch.cells` (T×H, row-major) and `scratch.statistics`; returns acceptance.
    pub fn evaluate_into(&self, labels: &[usize], scratch: &mut Scratch) -> bool {
        let q_count = self.inv_sizes.len();
        let l = self.l;
        scratch.sums.clear();
        scratch.sums.resize(q_count * l, 0.0);
        for (row, &q) in self.whitened.chunks_exact(l.max(1)).zip(labels) {
            let dst = &mut scratch.sums[q * l..(q + 1) * l];
            for (d, v) in dst.iter_mut().zip(row) {
                *d += v;
            }
        }
        for q in 0..q_count {
            let inv = self.inv_sizes[q];
            scratch.sums[q * l..(q + 1) * l].iter_mut().for_each(|v| *v *= inv);
        }
        let h_count = self.projectors.len();
        scratch.cells.clear();
        scratch.cells.resize(self.tier_offsets.len() * h_count, 0.0);
        for (t, &(start, len)) in self.tier_offsets.iter().enumerate() {
            for (h, p) in self.projectors.iter().enumerate() {
                let fh = p.ncols();
                let mut m = 0.0;
                for k in start..start + len {
                    scratch.contrast.clear();
                    scratch.contrast.resize(fh, 0.0);
                    for q in 0..q_count {
                        let mean = scratch.sums[q * l + k];
                        for (c, j) in scratch.contrast.iter_mut().zip(0..fh) {
                            *c += mean * p[(q, j)];
                        }
                    }
                    m += scratch.contrast.iter().map(|v| v * v).sum::<f64>();
                }
                scratch.cells[t * h_count + h] = m;
            }
        }
        scratch.statistics.clear();
        let mut passed = true;
        for (comp, thr) in self.geometry.components().iter().zip(&self.thresholds) {
            let v: f64 = comp.cells.iter().map(|&(t, h)| scratch.cells[t * h_count + h]).sum();
            if let Some(a) = thr {
                passed &= v <= *a;
            }
            scratch.statistics.push(v);
        }
        passed
    }

    pub fn evaluate(&self, z: &Assignment) -> BalanceReport {
        let mut scratch = Scratch::default();
        self.report_from(z.labels(), &mut scratch)
    }

    pub(crate) fn report_from(&self, labels: &[usize], scratch: &mut Scratch) -> BalanceReport {
        let passed = self.evaluate_into(labels, scratch);
        let h_count = self.projectors.len();
        BalanceReport {
            criterion: self.criterion().name().to_string(),
            cell_statistics: scratch.cells.chunks(h_count.max(1)).map(<[f64]>::to_vec).collect(),
            statistics: scratch.statistics.clone(),
            thresholds: self.thresholds.iter().flatten().copied().collect(),
            passed,
            acceptance_probability: self.geometry.acceptance_probability(),
        }
    }
}
