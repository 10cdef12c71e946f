//! Asymptotic laws of the effect estimates under (re)randomization.
//!
//! A law is `base^{1/2} ε + Σ_i coef_i ζ_i` with ε standard Gaussian and each
//! ζ_i an independent standard Gaussian of dimension `d_i` conditioned on
//! `‖ζ_i‖² ≤ a_i` (or left untruncated).

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::SeedSequence;
use crate::{linalg, stats};

/// Draws per independently seeded block in parallel simulation.
pub const SIMULATION_BLOCK: usize = 4096;

/// Default number of law draws for quantile thresholds.
pub const DEFAULT_LAW_DRAWS: usize = 100_000;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Truncation {
    Untruncated,
    /// Squared norm at most this threshold.
    AtMost(f64),
}

impl Truncation {
    pub fn from_threshold(a: Option<f64>) -> Self {
        a.map_or(Truncation::Untruncated, Truncation::AtMost)
    }
}

/// v_{m,a} = P(χ²_{m+2} ≤ a) / P(χ²_m ≤ a), the variance of each coordinate
/// of an m-dimensional standard Gaussian conditioned on squared norm ≤ a.
pub fn v_constant(m: usize, a: f64) -> f64 {
    let s = m as f64 / 2.0;
    (stats::ln_gamma_p(s + 1.0, a / 2.0) - stats::ln_gamma_p(s, a / 2.0)).exp().min(1.0)
}

pub fn v_for(m: usize, t: Truncation) -> f64 {
    match t {
        Truncation::Untruncated => 1.0,
        Truncation::AtMost(a) => v_constant(m, a),
    }
}

/// Sampler of ζ_{m,a}: a radius with the chi-square law restricted to [0, a],
/// drawn by inverting its CDF, times an independent uniform direction.
#[derive(Debug, Clone, Copy)]
pub struct TruncatedGaussian {
    m: usize,
    ln_cdf_a: Option<f64>,
}

impl TruncatedGaussian {
    pub fn new(m: usize, t: Truncation) -> Result<Self> {
        if m == 0 {
            return Err(Error::invalid("dimension must be at least 1"));
        }
        let ln_cdf_a = match t {
            Truncation::Untruncated => None,
            Truncation::AtMost(a) => {
                if !(a > 0.0 && a.is_finite()) {
                    return Err(Error::invalid(format!("threshold must be positive and finite, got {a}")));
                }
                Some(stats::ln_gamma_p(m as f64 / 2.0, a / 2.0))
            }
        };
        Ok(Self { m, ln_cdf_a })
    }

    pub fn dim(&self) -> usize {
        self.m
    }

    pub fn sample_into<R: Rng + ?Sized>(&self, rng: &mut R, out: &mut [f64]) {
        debug_assert_eq!(out.len(), self.m);
        for v in out.iter_mut() {
            *v = rng.sample(StandardNormal);
        }
        let Some(ln_cdf_a) = self.ln_cdf_a else { return };
        let norm2: f64 = out.iter().map(|v| v * v).sum();
        // u in (0, 1), never exactly 0
        let u = ((rng.next_u64() >> 11) as f64 + 0.5) / (1u64 << 53) as f64;
        let r2 = stats::chi2_quantile_ln(self.m as f64, u.ln() + ln_cdf_a);
        let scale = (r2 / norm2).sqrt();
        out.iter_mut().for_each(|v| *v *= scale);
    }
}

/// `count` draws of ζ_{m,a}, one per row.
pub fn sample_truncated_gaussian<R: Rng + ?Sized>(m: usize, a: f64, rng: &mut R, count: usize) -> Result<DMatrix<f64>> {
    let t = TruncatedGaussian::new(m, Truncation::AtMost(a))?;
    let mut out = DMatrix::zeros(count, m);
    let mut buf = vec![0.0; m];
    for i in 0..count {
        t.sample_into(rng, &mut buf);
        for (j, v) in buf.iter().enumerate() {
            out[(i, j)] = *v;
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LawComponent {
    /// F×d coefficient matrix.
    pub coef: DMatrix<f64>,
    pub truncation: Truncation,
}

impl LawComponent {
    pub fn dim(&self) -> usize {
        self.coef.ncols()
    }

    pub fn v(&self) -> f64 {
        v_for(self.dim(), self.truncation)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AsymptoticLaw {
    pub base_cov: DMatrix<f64>,
    pub components: Vec<LawComponent>,
}

impl AsymptoticLaw {
    pub fn new(base_cov: DMatrix<f64>, components: Vec<LawComponent>) -> Result<Self> {
        let f = base_cov.nrows();
        if base_cov.ncols() != f {
            return Err(Error::invalid("base covariance must be square"));
        }
        for (i, c) in components.iter().enumerate() {
            if c.coef.nrows() != f {
                return Err(Error::invalid(format!("component {} has {} rows, expected {f}", i + 1, c.coef.nrows())));
            }
            if let Truncation::AtMost(a) = c.truncation {
                if !(a > 0.0 && a.is_finite()) {
                    return Err(Error::invalid(format!("component {} threshold must be positive, got {a}", i + 1)));
                }
            }
        }
        linalg::psd_sqrt(&base_cov, "base covariance")?;
        Ok(Self { base_cov, components })
    }

    pub fn effects(&self) -> usize {
        self.base_cov.nrows()
    }

    /// base + Σ v_{d_i,a_i} coef_i coef_i'.
    pub fn covariance(&self) -> DMatrix<f64> {
        let mut c = self.base_cov.clone();
        for comp in &self.components {
            c += &comp.coef * comp.coef.transpose() * comp.v();
        }
        linalg::symmetrize(&c)
    }

    /// The same law with every truncation removed (complete randomization).
    pub fn untruncated(&self) -> Self {
        Self {
            base_cov: self.base_cov.clone(),
            components: self
                .components
                .iter()
                .map(|c| LawComponent { coef: c.coef.clone(), truncation: Truncation::Untruncated })
                .collect(),
        }
    }

    pub fn sampler(&self) -> Result<LawSampler> {
        let root = linalg::psd_sqrt(&self.base_cov, "base covariance")?;
        let comps = self
            .components
            .iter()
            .filter(|c| c.dim() > 0)
            .map(|c| Ok((c.coef.clone(), TruncatedGaussian::new(c.dim(), c.truncation)?)))
            .collect::<Result<Vec<_>>>()?;
        Ok(LawSampler { root, comps })
    }
}

/// Prepared sampler for one law.
#[derive(Debug, Clone)]
pub struct LawSampler {
    root: DMatrix<f64>,
    comps: Vec<(DMatrix<f64>, TruncatedGaussian)>,
}

impl LawSampler {
    pub fn effects(&self) -> usize {
        self.root.nrows()
    }

    pub fn sample_into<R: Rng + ?Sized>(&self, rng: &mut R, out: &mut [f64], work: &mut Vec<f64>) {
        let f = self.effects();
        work.clear();
        work.extend((0..f).map(|_| rng.sample::<f64, _>(StandardNormal)));
        for (i, o) in out.iter_mut().enumerate() {
            *o = (0..f).map(|j| self.root[(i, j)] * work[j]).sum();
        }
        for (coef, tg) in &self.comps {
            work.clear();
            work.resize(tg.dim(), 0.0);
            tg.sample_into(rng, work);
            for (i, o) in out.iter_mut().enumerate() {
                *o += (0..tg.dim()).map(|j| coef[(i, j)] * work[j]).sum::<f64>();
            }
        }
    }
}

/// `draws` samples of the law, one per row.
pub fn simulate_law<R: Rng + ?Sized>(law: &AsymptoticLaw, rng: &mut R, draws: usize) -> Result<DMatrix<f64>> {
    let sampler = law.sampler()?;
    let f = law.effects();
    let mut out = DMatrix::zeros(draws, f);
    let mut row = vec![0.0; f];
    let mut work = Vec::new();
    for i in 0..draws {
        sampler.sample_into(rng, &mut row, &mut work);
        for (j, v) in row.iter().enumerate() {
            out[(i, j)] = *v;
        }
    }
    Ok(out)
}

/// Parallel simulation: block `b` of [`SIMULATION_BLOCK`] draws uses stream
/// `b` of `seq`, so the result does not depend on `workers`.
pub fn simulate_law_blocks(law: &AsymptoticLaw, seq: &SeedSequence, draws: usize, workers: usize) -> Result<DMatrix<f64>> {
    let sampler = law.sampler()?;
    let f = law.effects();
    let blocks = draws.div_ceil(SIMULATION_BLOCK);
    let run = || -> Vec<Vec<f64>> {
        (0..blocks)
            .into_par_iter()
            .map(|b| {
                let mut rng = seq.rng(b as u64);
                let count = SIMULATION_BLOCK.min(draws - b * SIMULATION_BLOCK);
                let mut out = vec![0.0; count * f];
                let mut work = Vec::new();
                for row in out.chunks_exact_mut(f.max(1)).take(count) {
                    sampler.sample_into(&mut rng, row, &mut work);
                }
                out
            })
            .collect()
    };
    let parts = with_workers(workers, run)?;
    let flat: Vec<f64> = parts.concat();
    Ok(DMatrix::from_row_slice(draws, f, &flat))
}

pub(crate) fn with_workers<T: Send>(workers: usize, job: impl FnOnce() -> T + Send) -> Result<T> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::invalid(format!("cannot start worker pool: {e}")))?;
    Ok(pool.install(job))
}

/// Squared correlations between the effect estimates and the covariate imbalance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationProfile {
    /// R_f² for every effect.
    pub r_squared: Vec<f64>,
    /// F×J matrix of the per-tier shares (ρ_f²[h] or β_f²[j]); rows sum to R_f².
    pub per_tier: DMatrix<f64>,
    /// J×F matrix; row j holds the canonical correlations of tier j in decreasing order.
    pub canonical: DMatrix<f64>,
    /// Canonical correlations of the whole explained covariance, decreasing.
    pub overall_canonical: Vec<f64>,
}

/// Correlation profile from the total covariance `v` and the covariance
/// explained by each balance tier.
pub fn correlation_profile(v: &DMatrix<f64>, explained: &[DMatrix<f64>]) -> Result<CorrelationProfile> {
    let f = v.nrows();
    let inv_root = linalg::spd_inv_sqrt(v, "sampling covariance of the effect estimates")?;
    let mut per_tier = DMatrix::zeros(f, explained.len());
    let mut canonical = DMatrix::zeros(explained.len(), f);
    let mut total = DMatrix::zeros(f, f);
    let canon = |m: &DMatrix<f64>| {
        let mut e = linalg::sorted_eigenvalues(&(&inv_root * m * &inv_root));
        e.reverse();
        e.into_iter().map(|x| x.clamp(0.0, 1.0)).collect::<Vec<_>>()
    };
    for (j, u) in explained.iter().enumerate() {
        for i in 0..f {
            per_tier[(i, j)] = u[(i, i)] / v[(i, i)];
        }
        for (i, c) in canon(u).into_iter().enumerate() {
            canonical[(j, i)] = c;
        }
        total += u;
    }
    let r_squared = (0..f).map(|i| per_tier.row(i).sum()).collect();
    Ok(CorrelationProfile { r_squared, per_tier, canonical, overall_canonical: canon(&total) })
}

/// Percentage reduction in asymptotic variance, Σ_j (1 - v_{d_j,a_j}) share_f[j].
pub fn priasv(profile: &CorrelationProfile, dims: &[usize], truncations: &[Truncation]) -> Result<Vec<f64>> {
    let j = profile.per_tier.ncols();
    if dims.len() != j || truncations.len() != j {
        return Err(Error::invalid(format!(
            "profile has {j} tiers but {} dimensions and {} truncations were given",
            dims.len(),
            truncations.len()
        )));
    }
    let factors: Vec<f64> = dims.iter().zip(truncations).map(|(&d, &t)| 1.0 - v_for(d, t)).collect();
    Ok((0..profile.per_tier.nrows())
        .map(|f| (0..j).map(|k| factors[k] * profile.per_tier[(f, k)]).sum())
        .collect())
}

/// Sorted simulated values of a quadratic form, for quantiles with standard errors.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadFormSample {
    sorted: Vec<f64>,
}

impl QuadFormSample {
    pub fn new(mut values: Vec<f64>) -> Self {
        values.sort_by(f64::total_cmp);
        Self { sorted: values }
    }

    pub fn len(&self) -> usize {
        self.sorted.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sorted.is_empty()
    }

    fn index(&self, p: f64) -> usize {
        let n = self.sorted.len();
        ((p * n as f64).ceil() as usize).clamp(1, n) - 1
    }

    /// Empirical `p` quantile (the ceil(pN)-th order statistic).
    pub fn quantile(&self, p: f64) -> f64 {
        self.sorted[self.index(p)]
    }

    /// Standard error of [`QuadFormSample::quantile`] from the binomial spread
    /// of order-statistic ranks.
    pub fn quantile_se(&self, p: f64) -> f64 {
        let n = self.sorted.len() as f64;
        let spread = (n * p * (1.0 - p)).sqrt();
        let lo = self.index(((p * n - spread) / n).max(0.0));
        let hi = self.index(((p * n + spread) / n).min(1.0));
        0.5 * (self.sorted[hi] - self.sorted[lo])
    }

    /// Fraction of values at most `c`.
    pub fn cdf(&self, c: f64) -> f64 {
        self.sorted.partition_point(|v| *v <= c) as f64 / self.sorted.len() as f64
    }
}

/// Values of (Cφ)' shape^-1 (Cφ) for the rows φ of `draws`.
pub fn quadratic_forms(draws: &DMatrix<f64>, c: &DMatrix<f64>, shape: &DMatrix<f64>) -> Result<Vec<f64>> {
    if c.ncols() != draws.ncols() || shape.nrows() != c.nrows() {
        return Err(Error::invalid("contrast, shape and law dimensions do not match"));
    }
    let inv = linalg::spd_inverse(shape, "confidence-set shape matrix")?;
    let proj = draws * c.transpose();
    let weighted = &proj * inv;
    Ok(proj.row_iter().zip(weighted.row_iter()).map(|(a, b)| a.dot(&b)).collect())
}

/// Simulated quantile with its Monte-Carlo standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuantileEstimate {
    pub value: f64,
    pub se: f64,
}

/// The 1-α quantile of (Cφ)' shape^-1 (Cφ) for φ drawn from `law`.
pub fn quantile_threshold<R: Rng + ?Sized>(
    law: &AsymptoticLaw,
    c: &DMatrix<f64>,
    shape: &DMatrix<f64>,
    alpha: f64,
    rng: &mut R,
    draws: usize,
) -> Result<QuantileEstimate> {
    check_quantile_inputs(c, alpha, draws)?;
    let sims = simulate_law(law, rng, draws)?;
    let sample = QuadFormSample::new(quadratic_forms(&sims, c, shape)?);
    Ok(QuantileEstimate { value: sample.quantile(1.0 - alpha), se: sample.quantile_se(1.0 - alpha) })
}

pub(crate) fn check_quantile_inputs(c: &DMatrix<f64>, alpha: f64, draws: usize) -> Result<()> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::invalid(format!("alpha must lie in (0, 1), got {alpha}")));
    }
    if draws < 10_000 {
        return Err(Error::invalid(format!("at least 10000 law draws are required, got {draws}")));
    }
    if !linalg::has_full_row_rank(c) {
        return Err(Error::invalid("contrast matrix must have full row rank"));
    }
    Ok(())
}

/// Whether the explained matrices, normalized by `v`, commute pairwise to `tol`.
/// Monotonicity of quantile regions in the canonical correlations is only
/// guaranteed when they do.
pub fn explained_matrices_commute(v: &DMatrix<f64>, explained: &[DMatrix<f64>], tol: f64) -> Result<bool> {
    let r = linalg::spd_inv_sqrt(v, "sampling covariance of the effect estimates")?;
    let normalized: Vec<DMatrix<f64>> = explained.iter().map(|u| &r * u * &r).collect();
    for i in 0..normalized.len() {
        for j in i + 1..normalized.len() {
            let (a, b) = (&normalized[i], &normalized[j]);
            if (a * b - b * a).amax() > tol {
                return Ok(false);
            }
        }
    }
    Ok(true)
}

/// Sample mean and covariance of the rows of `draws`.
pub fn sample_mean_cov(draws: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let mean = DVector::from_iterator(draws.ncols(), draws.column_iter().map(|c| c.mean()));
    (mean, linalg::covariance(draws))
}
