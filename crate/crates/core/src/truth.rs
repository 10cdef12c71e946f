//! Exact finite-population quantities computed from full potential outcomes.
//!
//! Real experiments never observe these; they are the ground truth that
//! simulations and property checks compare against.

use nalgebra::{DMatrix, DVector};

use crate::criterion::BalanceGeometry;
use crate::design::{b_tilde, FactorialStructure, GroupSizes};
use crate::error::{Error, Result};
use crate::estimation::component_coefficients;
use crate::linalg;

/// Sampling covariance 2^-2(K-1) Σ_q n_q^-1 S_qq b_q b_q' - n^-1 S_ττ of the
/// effect estimates under complete randomization, from an n×Q outcome table.
pub fn sampling_covariance(y: &DMatrix<f64>, s: &FactorialStructure, sizes: &GroupSizes) -> DMatrix<f64> {
    let syy = linalg::covariance(y);
    let g = s.generating_matrix();
    let scale = s.contrast_scale();
    let mut v = DMatrix::zeros(s.effects(), s.effects());
    for q in 0..s.combinations() {
        let b = s.coefficient_vector(q);
        v += &b * b.transpose() * (syy[(q, q)] / sizes.as_slice()[q] as f64);
    }
    let s_tau = &g * &syy * g.transpose();
    linalg::symmetrize(&((v - s_tau / sizes.total() as f64) * (scale * scale)))
}

/// Ground-truth moments of a population under a given design and criterion.
#[derive(Debug, Clone)]
pub struct PopulationTruth {
    /// Average factorial effects τ.
    pub tau: DVector<f64>,
    /// Covariance of τ̂ under complete randomization.
    pub v: DMatrix<f64>,
    /// Part of `v` explained by the covariate imbalance.
    pub v_explained: DMatrix<f64>,
    /// Remainder `v - v_explained`.
    pub v_perp: DMatrix<f64>,
    /// Cross covariance Cov(τ̂, τ̂_x), F×LF.
    pub v_tau_x: DMatrix<f64>,
    /// Population coefficient matrix of each law component.
    pub coefficients: Vec<DMatrix<f64>>,
    /// Explained covariance of each component, coefficient times its transpose.
    pub explained: Vec<DMatrix<f64>>,
}

impl PopulationTruth {
    /// `y` is the n×Q table of potential outcomes; `x` the original covariates
    /// the geometry was built from.
    pub fn new(y: &DMatrix<f64>, x: &DMatrix<f64>, geom: &BalanceGeometry) -> Result<Self> {
        let s = geom.structure();
        let sizes = geom.sizes();
        if y.nrows() != sizes.total() || y.ncols() != s.combinations() {
            return Err(Error::invalid(format!(
                "potential outcomes must be {}×{}, got {}×{}",
                sizes.total(),
                s.combinations(),
                y.nrows(),
                y.ncols()
            )));
        }
        let means = DVector::from_iterator(y.ncols(), y.column_iter().map(|c| c.mean()));
        let tau = s.generating_matrix() * means * s.contrast_scale();
        let v = sampling_covariance(y, s, sizes);
        let l = x.ncols();
        let v_tau_x = cross_covariance_tau_x(y, x, s, sizes);
        let v_explained = if l == 0 {
            DMatrix::zeros(s.effects(), s.effects())
        } else {
            let sxx = linalg::covariance(x);
            let vxx_inv = linalg::kron(
                &linalg::spd_inverse(&b_tilde(s, sizes)?, "B̃")?,
                &linalg::spd_inverse(&sxx, "covariate covariance S_xx")?,
            );
            linalg::symmetrize(&(&v_tau_x * vxx_inv * v_tau_x.transpose()))
        };
        let e = geom.covariates();
        let part = geom.covariate_partition();
        let cross = if l == 0 { DMatrix::zeros(s.combinations(), 0) } else { linalg::cross_covariance(y, e) };
        let coefficients = component_coefficients(geom, |q, t| {
            let block = part.block(t);
            let root = linalg::spd_inv_sqrt(geom.block_covariance(t), &format!("covariance of covariate tier {}", t + 1))?;
            let row = DVector::from_iterator(block.len(), block.iter().map(|&i| cross[(q, i)]));
            Ok(root * row)
        })?;
        let explained = coefficients.iter().map(|c| linalg::symmetrize(&(c * c.transpose()))).collect();
        let v_perp = &v - &v_explained;
        Ok(Self { tau, v, v_explained, v_perp, v_tau_x, coefficients, explained })
    }

    /// Squared multiple correlations R_f² between τ̂_f and τ̂_x.
    pub fn r_squared(&self) -> Vec<f64> {
        (0..self.v.nrows()).map(|f| self.v_explained[(f, f)] / self.v[(f, f)]).collect()
    }
}

/// Cov(τ̂, τ̂_x) = 2^-2(K-1) Σ_q n_q^-1 (b_q b_q') ⊗ S_{q,x}.
pub fn cross_covariance_tau_x(
    y: &DMatrix<f64>,
    x: &DMatrix<f64>,
    s: &FactorialStructure,
    sizes: &GroupSizes,
) -> DMatrix<f64> {
    let l = x.ncols();
    let f = s.effects();
    let mut out = DMatrix::zeros(f, l * f);
    if l == 0 {
        return out;
    }
    let cross = linalg::cross_covariance(y, x);
    for q in 0..s.combinations() {
        let b = s.coefficient_vector(q);
        let row = DMatrix::from_fn(1, l, |_, j| cross[(q, j)]);
        out += linalg::kron(&(&b * b.transpose()), &row) / sizes.as_slice()[q] as f64;
    }
    let scale = s.contrast_scale();
    out * (scale * scale)
}

/// The explained covariance computed from linearly projected potential
/// outcomes Y∥_i(q) = S_{q,x} S_xx^-1 (x_i - x̄), the definition the
/// projection identity is checked against.
pub fn explained_from_projected_outcomes(
    y: &DMatrix<f64>,
    x: &DMatrix<f64>,
    s: &FactorialStructure,
    sizes: &GroupSizes,
) -> Result<DMatrix<f64>> {
    let sxx_inv = linalg::spd_inverse(&linalg::covariance(x), "covariate covariance S_xx")?;
    let cross = linalg::cross_covariance(y, x);
    let projected = linalg::center_columns(x) * sxx_inv * cross.transpose();
    Ok(sampling_covariance(&projected, s, sizes))
}

/// γ²_fk: share of Var(τ̂_f) explained by the single contrast τ̂_{x,k}.
pub fn single_contrast_correlations(
    truth: &PopulationTruth,
    x: &DMatrix<f64>,
    s: &FactorialStructure,
    sizes: &GroupSizes,
) -> Result<DMatrix<f64>> {
    let l = x.ncols();
    let f = s.effects();
    let bt = b_tilde(s, sizes)?;
    let sxx = linalg::covariance(x);
    let mut out = DMatrix::zeros(f, f);
    for k in 0..f {
        let inv = linalg::spd_inverse(&(&sxx * bt[(k, k)]), "contrast covariance")?;
        for fi in 0..f {
            let c = truth.v_tau_x.view((fi, k * l), (1, l)).into_owned();
            out[(fi, k)] = (&c * &inv * c.transpose())[(0, 0)] / truth.v[(fi, fi)];
        }
    }
    Ok(out)
}
