//! Conservative covariance estimates and ellipsoidal confidence sets.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::asymptotics::{
    check_quantile_inputs, quadratic_forms, simulate_law, AsymptoticLaw, LawComponent, QuadFormSample, Truncation,
};
use crate::criterion::BalanceGeometry;
use crate::error::{Error, Result};
use crate::estimation::{effect_estimates, projection_coefficient_estimates, sample_moments, vhat_tautau_perp};
use crate::linalg;
use crate::rerandomize::Assignment;
use crate::rng::StreamRng;

/// Estimated asymptotic law of τ̂ - τ: V̂⊥ as the Gaussian part plus the
/// estimated coefficients of each balance tier.
pub fn estimated_law(y: &DVector<f64>, z: &Assignment, geom: &BalanceGeometry) -> Result<AsymptoticLaw> {
    z.check_sizes(geom.sizes())?;
    let m = sample_moments(y, geom.covariates(), z)?;
    let base = vhat_tautau_perp(&m, geom.structure(), geom.sizes());
    let coefs = projection_coefficient_estimates(&m, geom)?;
    let components = coefs
        .into_iter()
        .zip(geom.components())
        .map(|(coef, spec)| LawComponent { coef, truncation: Truncation::from_threshold(spec.threshold) })
        .collect();
    AsymptoticLaw::new(base, components)
}

/// C V̂⊥ C' + Σ_i v_i C coef_i coef_i' C'.
pub fn covariance_estimate(c: &DMatrix<f64>, law: &AsymptoticLaw) -> Result<DMatrix<f64>> {
    if c.ncols() != law.effects() {
        return Err(Error::invalid(format!("contrast has {} columns, expected {}", c.ncols(), law.effects())));
    }
    if !linalg::has_full_row_rank(c) {
        return Err(Error::invalid("contrast matrix must have full row rank"));
    }
    Ok(linalg::symmetrize(&(c * law.covariance() * c.transpose())))
}

/// {v : (v - center)' shape^-1 (v - center) ≤ threshold}.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceSet {
    pub center: DVector<f64>,
    pub shape: DMatrix<f64>,
    pub threshold: f64,
    pub threshold_se: f64,
    pub alpha: f64,
    pub draws: usize,
    pub seed: crate::rng::SeedRecord,
    /// Marginal 1-α intervals for each row of C, each with its own simulated threshold.
    pub intervals: Vec<(f64, f64)>,
    /// Covariance estimate C V̂⊥ C' + Σ v C coef coef' C'.
    pub covariance: DMatrix<f64>,
}

impl ConfidenceSet {
    /// A set collapsed to its center, as happens when the outcome has no variation.
    pub fn is_point(&self) -> bool {
        self.shape.iter().all(|v| *v == 0.0) && self.covariance.iter().all(|v| *v == 0.0)
    }

    pub fn contains(&self, v: &DVector<f64>) -> Result<bool> {
        let d = v - &self.center;
        if self.is_point() {
            return Ok(d.iter().all(|x| *x == 0.0));
        }
        let inv = linalg::spd_inverse(&self.shape, "confidence-set shape matrix")?;
        Ok((d.transpose() * inv * &d)[(0, 0)] <= self.threshold)
    }
}

/// Thresholds for several α values from one batch of law draws.
pub fn thresholds_for_alphas(
    law: &AsymptoticLaw,
    c: &DMatrix<f64>,
    shape: &DMatrix<f64>,
    alphas: &[f64],
    rng: &mut impl Rng,
    draws: usize,
) -> Result<Vec<f64>> {
    for &a in alphas {
        check_quantile_inputs(c, a, draws)?;
    }
    let sims = simulate_law(law, rng, draws)?;
    let sample = QuadFormSample::new(quadratic_forms(&sims, c, shape)?);
    Ok(alphas.iter().map(|a| sample.quantile(1.0 - a)).collect())
}

/// Confidence set for Cτ: Cτ̂ + {μ : μ' (C V̂⊥ C')^-1 μ ≤ ĉ_{1-α}} with ĉ
/// simulated from the estimated law.
pub fn confidence_set(
    y: &DVector<f64>,
    z: &Assignment,
    geom: &BalanceGeometry,
    c: &DMatrix<f64>,
    alpha: f64,
    rng: &mut StreamRng,
    draws: usize,
) -> Result<ConfidenceSet> {
    check_quantile_inputs(c, alpha, draws)?;
    if c.ncols() != geom.structure().effects() {
        return Err(Error::invalid(format!(
            "contrast has {} columns but the design has {} effects",
            c.ncols(),
            geom.structure().effects()
        )));
    }
    let seed = rng.record();
    let tau = effect_estimates(y, z, geom.structure())?;
    let law = estimated_law(y, z, geom)?;
    let shape = linalg::symmetrize(&(c * &law.base_cov * c.transpose()));
    let center = c * &tau;
    let covariance = covariance_estimate(c, &law)?;
    if is_negligible(&shape, y) && is_negligible(&covariance, y) {
        let zeros = DMatrix::zeros(c.nrows(), c.nrows());
        return Ok(ConfidenceSet {
            intervals: center.iter().map(|&v| (v, v)).collect(),
            center,
            shape: zeros.clone(),
            covariance: zeros,
            threshold: 0.0,
            threshold_se: 0.0,
            alpha,
            draws,
            seed,
        });
    }
    let sims = simulate_law(&law, rng, draws)?;
    let joint = QuadFormSample::new(quadratic_forms(&sims, c, &shape)?);
    let mut intervals = Vec::with_capacity(c.nrows());
    for i in 0..c.nrows() {
        let row = c.rows(i, 1).into_owned();
        let s = DMatrix::from_element(1, 1, shape[(i, i)]);
        let marginal = QuadFormSample::new(quadratic_forms(&sims, &row, &s)?);
        let half = (marginal.quantile(1.0 - alpha) * shape[(i, i)]).sqrt();
        intervals.push((center[i] - half, center[i] + half));
    }
    Ok(ConfidenceSet {
        center,
        covariance,
        shape,
        threshold: joint.quantile(1.0 - alpha),
        threshold_se: joint.quantile_se(1.0 - alpha),
        alpha,
        draws,
        seed,
        intervals,
    })
}

fn is_negligible(m: &DMatrix<f64>, y: &DVector<f64>) -> bool {
    let scale = y.iter().fold(0.0f64, |a, v| a.max(v * v)).max(f64::MIN_POSITIVE);
    m.iter().all(|v| v.abs() <= 1e-24 * scale)
}
