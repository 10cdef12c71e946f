//! Point estimates and the sample-moment covariance estimators.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::balance::group_means;
use crate::criterion::BalanceGeometry;
use crate::design::{FactorialStructure, GroupSizes};
use crate::error::{Error, Result};
use crate::linalg;
use crate::rerandomize::Assignment;

/// Difference-in-means estimates τ̂_f = 2^-(K-1) Σ_q g_f(q) Ȳ(q).
pub fn effect_estimates(y: &DVector<f64>, z: &Assignment, s: &FactorialStructure) -> Result<DVector<f64>> {
    if z.combinations() != s.combinations() {
        return Err(Error::invalid("assignment and design disagree on the number of combinations"));
    }
    let ym = DMatrix::from_column_slice(y.len(), 1, y.as_slice());
    let means = group_means(&ym, z)?;
    Ok((s.generating_matrix() * means.transpose()).column(0) * s.contrast_scale())
}

/// Within-group moments of the outcome and covariates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupMoments {
    pub size: usize,
    pub mean: f64,
    pub var: f64,
    pub cov_yx: Vec<f64>,
    pub cov_xx: DMatrix<f64>,
    /// Residual variance after projecting the outcome on the covariates, clamped at 0.
    pub var_perp: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleMoments {
    pub groups: Vec<GroupMoments>,
}

/// Per-group sample moments, all with divisor `n_q - 1`.
///
/// With covariates every group needs at least `L + 2` units and a
/// nonsingular covariate covariance.
pub fn sample_moments(y: &DVector<f64>, x: &DMatrix<f64>, z: &Assignment) -> Result<SampleMoments> {
    if y.len() != z.len() || x.nrows() != z.len() {
        return Err(Error::invalid(format!(
            "outcome ({}), covariate ({}) and assignment ({}) lengths differ",
            y.len(),
            x.nrows(),
            z.len()
        )));
    }
    let l = x.ncols();
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); z.combinations()];
    for (i, &q) in z.labels().iter().enumerate() {
        members[q].push(i);
    }
    let groups = members
        .iter()
        .enumerate()
        .map(|(q, rows)| {
            let nq = rows.len();
            let needed = if l > 0 { l + 2 } else { 2 };
            if nq < needed {
                return Err(Error::invalid(format!(
                    "group {} has {nq} units; at least {needed} are needed with {l} covariates",
                    q + 1
                )));
            }
            let yq = DMatrix::from_fn(nq, 1, |i, _| y[rows[i]]);
            let var = linalg::covariance(&yq)[(0, 0)];
            let mean = yq.mean();
            if l == 0 {
                return Ok(GroupMoments {
                    size: nq,
                    mean,
                    var,
                    cov_yx: Vec::new(),
                    cov_xx: DMatrix::zeros(0, 0),
                    var_perp: var,
                });
            }
            let xq = DMatrix::from_fn(nq, l, |i, j| x[(rows[i], j)]);
            let cov_xx = linalg::covariance(&xq);
            let cov_yx = linalg::cross_covariance(&xq, &yq).column(0).into_owned();
            let inv = linalg::spd_inverse(&cov_xx, &format!("covariate covariance within group {}", q + 1))?;
            let explained = (cov_yx.transpose() * inv * &cov_yx)[(0, 0)];
            Ok(GroupMoments {
                size: nq,
                mean,
                var,
                cov_yx: cov_yx.as_slice().to_vec(),
                cov_xx,
                var_perp: (var - explained).max(0.0),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SampleMoments { groups })
}

fn weighted_outer(s: &FactorialStructure, sizes: &GroupSizes, w: impl Fn(usize) -> f64) -> DMatrix<f64> {
    let f = s.effects();
    let mut out = DMatrix::zeros(f, f);
    for q in 0..s.combinations() {
        let b = s.coefficient_vector(q);
        out += &b * b.transpose() * (w(q) / sizes.as_slice()[q] as f64);
    }
    let scale = s.contrast_scale();
    linalg::symmetrize(&(out * (scale * scale)))
}

/// Conservative Neyman covariance 2^-2(K-1) Σ_q n_q^-1 s_qq b_q b_q'.
pub fn neyman_covariance(m: &SampleMoments, s: &FactorialStructure, sizes: &GroupSizes) -> DMatrix<f64> {
    weighted_outer(s, sizes, |q| m.groups[q].var)
}

/// Estimate of the covariance left unexplained by the covariates, using s_qq^⊥.
pub fn vhat_tautau_perp(m: &SampleMoments, s: &FactorialStructure, sizes: &GroupSizes) -> DMatrix<f64> {
    weighted_outer(s, sizes, |q| m.groups[q].var_perp)
}

/// Coefficient matrices of the truncated law components, one per balance tier.
///
/// `row(q, t)` supplies the 1×L_t loading of combination `q` on covariate
/// tier `t` in whitened units. The coefficient of cell (t, h) is
/// 2^-2(K-1) Σ_q n_q^-1 (b_q (C̃_hh^-1/2 c_q[h])') ⊗ row(q, t); a component
/// concatenates its cells.
pub(crate) fn component_coefficients(
    geom: &BalanceGeometry,
    row: impl Fn(usize, usize) -> Result<DVector<f64>>,
) -> Result<Vec<DMatrix<f64>>> {
    if geom.components().is_empty() {
        return Ok(Vec::new());
    }
    let s = geom.structure();
    let eff = geom.effects();
    let scale = s.contrast_scale();
    let sizes = geom.sizes().as_slice();
    let roots = (0..eff.tiers())
        .map(|h| linalg::spd_inv_sqrt(&eff.c_tilde_block(h), &format!("tier {} coefficient covariance", h + 1)))
        .collect::<Result<Vec<_>>>()?;
    let mut rows = Vec::new();
    for q in 0..s.combinations() {
        let per_t = (0..geom.covariate_partition().count())
            .map(|t| row(q, t))
            .collect::<Result<Vec<_>>>()?;
        rows.push(per_t);
    }
    geom.components()
        .iter()
        .map(|comp| {
            let mut blocks = Vec::new();
            for &(t, h) in &comp.cells {
                let lt = geom.covariate_partition().block(t).len();
                let fh = eff.tier_size(h);
                let ch = eff.c_tier(h);
                let mut cell = DMatrix::zeros(s.effects(), fh * lt);
                for q in 0..s.combinations() {
                    let b = s.coefficient_vector(q);
                    let d = &roots[h] * ch.column(q);
                    let right = linalg::kron(
                        &DMatrix::from_row_slice(1, d.len(), d.as_slice()),
                        &DMatrix::from_row_slice(1, rows[q][t].len(), rows[q][t].as_slice()),
                    );
                    cell += &b * right / sizes[q] as f64;
                }
                blocks.push(cell * (scale * scale));
            }
            let width = blocks.iter().map(|b| b.ncols()).sum();
            let mut out = DMatrix::zeros(s.effects(), width);
            let mut col = 0;
            for b in blocks {
                out.columns_mut(col, b.ncols()).copy_from(&b);
                col += b.ncols();
            }
            Ok(out)
        })
        .collect()
}

/// Estimated coefficient matrices of the truncated law components.
///
/// `m` must be computed from the geometry's covariates
/// ([`BalanceGeometry::covariates`]), which are orthogonalized across
/// covariate tiers for the tiered covariate-and-effect criterion. Each
/// coefficient times its transpose estimates the covariance of τ̂ explained
/// by that balance tier.
pub fn projection_coefficient_estimates(m: &SampleMoments, geom: &BalanceGeometry) -> Result<Vec<DMatrix<f64>>> {
    if m.groups.len() != geom.structure().combinations() {
        return Err(Error::invalid("moments and design disagree on the number of combinations"));
    }
    let part = geom.covariate_partition();
    component_coefficients(geom, |q, t| {
        let g = &m.groups[q];
        if g.cov_xx.nrows() != geom.covariate_count() {
            return Err(Error::invalid("moments were computed with a different number of covariates"));
        }
        let block = part.block(t);
        let sxx = linalg::select(&g.cov_xx, block, block);
        let root = linalg::spd_inv_sqrt(&sxx, &format!("covariate covariance within group {}", q + 1))?;
        let syx = DVector::from_iterator(block.len(), block.iter().map(|&i| g.cov_yx[i]));
        Ok(root * syx)
    })
}
