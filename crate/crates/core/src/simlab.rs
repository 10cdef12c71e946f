//! Synthetic populations and repeated-sampling experiments.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::asymptotics::{
    correlation_profile, priasv, simulate_law_blocks, v_for, with_workers, AsymptoticLaw, LawComponent, QuadFormSample,
    Truncation,
};
use crate::balance::{covariate_diff_in_means, Scratch};
use crate::criterion::{thresholds_from_probability, BalanceCriterion, BalanceGeometry};
use crate::design::{b_tilde, EffectTierPartition, FactorialStructure, GroupSizes, Partition};
use crate::error::{Error, Result};
use crate::estimation::effect_estimates;
use crate::inference::confidence_set;
use crate::rerandomize::{draw_crfe, Assignment, Rerandomizer};
use crate::rng::{SeedSequence, StreamRng};
use crate::truth::PopulationTruth;
use crate::{linalg, stats};

/// Marginal law of one covariate, applied to a latent standard normal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CovariateRecipe {
    Normal { mean: f64, sd: f64 },
    Bernoulli { p: f64 },
    Uniform { low: f64, high: f64 },
}

impl CovariateRecipe {
    fn transform(&self, z: f64) -> f64 {
        match *self {
            CovariateRecipe::Normal { mean, sd } => mean + sd * z,
            CovariateRecipe::Bernoulli { p } => f64::from(stats::normal_cdf(z) < p),
            CovariateRecipe::Uniform { low, high } => low + (high - low) * stats::normal_cdf(z),
        }
    }
}

/// Potential outcomes Y_i(q) = intercept_q + slope_q' x_i + sd_q ε_iq.
///
/// Additive recipes share one slope vector and one noise draw per unit across
/// combinations, so every unit has the same individual effects.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutcomeRecipe {
    /// One per combination.
    pub intercepts: Vec<f64>,
    /// One shared row, or one row per combination.
    pub slopes: Vec<Vec<f64>>,
    /// One shared value, or one per combination.
    pub noise_sd: Vec<f64>,
    #[serde(default)]
    pub additive: bool,
    /// Clamp every potential outcome into `[low, high]`.
    #[serde(default)]
    pub clamp: Option<[f64; 2]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PopulationSpec {
    pub n: usize,
    pub factors: usize,
    pub covariates: Vec<CovariateRecipe>,
    /// Common correlation of the latent normals behind the covariates.
    #[serde(default)]
    pub correlation: f64,
    pub outcome: OutcomeRecipe,
}

impl PopulationSpec {
    pub fn validate(&self) -> Result<FactorialStructure> {
        let s = FactorialStructure::new(self.factors)?;
        let q = s.combinations();
        let l = self.covariates.len();
        let o = &self.outcome;
        if self.n < 2 * q {
            return Err(Error::invalid(format!("population of {} is too small for {q} combinations", self.n)));
        }
        if !(0.0..1.0).contains(&self.correlation) {
            return Err(Error::invalid("latent covariate correlation must lie in [0, 1)"));
        }
        if o.intercepts.len() != q {
            return Err(Error::invalid(format!("need {q} intercepts, got {}", o.intercepts.len())));
        }
        if !(o.slopes.len() == 1 || o.slopes.len() == q) || o.slopes.iter().any(|r| r.len() != l) {
            return Err(Error::invalid(format!("slopes must be 1 or {q} rows of {l} values")));
        }
        if !(o.noise_sd.len() == 1 || o.noise_sd.len() == q) || o.noise_sd.iter().any(|v| *v < 0.0) {
            return Err(Error::invalid(format!("noise_sd must be 1 or {q} nonnegative values")));
        }
        if o.additive && (o.slopes.len() != 1 || o.noise_sd.len() != 1 || o.clamp.is_some()) {
            return Err(Error::invalid("additive outcomes need one shared slope row, one noise scale and no clamp"));
        }
        if let Some([lo, hi]) = o.clamp {
            if !(lo < hi) {
                return Err(Error::invalid("clamp range must satisfy low < high"));
            }
        }
        for c in &self.covariates {
            let ok = match *c {
                CovariateRecipe::Normal { sd, .. } => sd > 0.0,
                CovariateRecipe::Bernoulli { p } => p > 0.0 && p < 1.0,
                CovariateRecipe::Uniform { low, high } => low < high,
            };
            if !ok {
                return Err(Error::invalid(format!("invalid covariate recipe {c:?}")));
            }
        }
        Ok(s)
    }
}

/// Units with covariates and, for simulation, all potential outcomes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Population {
    pub x: DMatrix<f64>,
    /// n×Q table of potential outcomes, when known.
    pub y: Option<DMatrix<f64>>,
}

impl Population {
    pub fn observed(&self, z: &Assignment) -> Result<DVector<f64>> {
        let y = self.y.as_ref().ok_or_else(|| Error::invalid("population has no potential outcomes"))?;
        Ok(DVector::from_iterator(z.len(), z.labels().iter().enumerate().map(|(i, &q)| y[(i, q)])))
    }
}

pub fn generate_population<R: Rng + ?Sized>(spec: &PopulationSpec, rng: &mut R) -> Result<Population> {
    let s = spec.validate()?;
    let (n, l, q) = (spec.n, spec.covariates.len(), s.combinations());
    let rho = spec.correlation;
    let mut x = DMatrix::zeros(n, l);
    for i in 0..n {
        let common: f64 = rng.sample(StandardNormal);
        for (j, recipe) in spec.covariates.iter().enumerate() {
            let own: f64 = rng.sample(StandardNormal);
            x[(i, j)] = recipe.transform(rho.sqrt() * common + (1.0 - rho).sqrt() * own);
        }
    }
    let o = &spec.outcome;
    let mut y = DMatrix::zeros(n, q);
    for i in 0..n {
        let shared: f64 = rng.sample(StandardNormal);
        for k in 0..q {
            let slope = &o.slopes[if o.slopes.len() == 1 { 0 } else { k }];
            let sd = o.noise_sd[if o.noise_sd.len() == 1 { 0 } else { k }];
            let eps = if o.additive { shared } else { rng.sample(StandardNormal) };
            let mut v = o.intercepts[k] + sd * eps;
            for j in 0..l {
                v += slope[j] * x[(i, j)];
            }
            if let Some([lo, hi]) = o.clamp {
                v = v.clamp(lo, hi);
            }
            y[(i, k)] = v;
        }
    }
    Ok(Population { x, y: Some(y) })
}

/// A named design: group sizes and a balance criterion.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DesignSpec {
    pub name: String,
    pub group_sizes: GroupSizes,
    pub criterion: BalanceCriterion,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicationSettings {
    pub reps: usize,
    pub seed: u64,
    pub workers: usize,
    /// Confidence level parameter and law draws for coverage; `None` skips coverage.
    pub coverage: Option<CoverageSettings>,
    pub max_draws: Option<u64>,
    /// Law draws for the theoretical quantile-range reduction.
    pub theory_draws: usize,
}

impl ReplicationSettings {
    pub fn new(reps: usize, seed: u64) -> Self {
        Self { reps, seed, workers: 1, coverage: None, max_draws: None, theory_draws: 100_000 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CoverageSettings {
    pub alpha: f64,
    pub draws: usize,
}

/// A Monte-Carlo figure with its standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub value: f64,
    pub se: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EffectRow {
    pub effect: String,
    pub tau: f64,
    /// Exact variance of τ̂_f under complete randomization.
    pub crfe_variance: f64,
    /// Mean squared error of τ̂_f about τ_f across replications.
    pub empirical_variance: Estimate,
    pub theoretical_variance: f64,
    pub empirical_priasv: Estimate,
    pub theoretical_priasv: f64,
    /// Reduction of the central 95% range relative to complete randomization's.
    pub empirical_range_reduction: Estimate,
    pub theoretical_range_reduction: f64,
    pub r_squared: f64,
    pub interval_coverage: Option<Estimate>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DesignReport {
    pub name: String,
    pub criterion: BalanceCriterion,
    pub acceptance_probability: f64,
    pub acceptance_rate: Estimate,
    pub coverage: Option<Estimate>,
    pub effects: Vec<EffectRow>,
    pub runtime_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicationReport {
    pub reps: usize,
    pub seed: u64,
    pub designs: Vec<DesignReport>,
}

fn fmt17(v: f64) -> String {
    format!("{v:.16e}")
}

fn opt17(v: Option<Estimate>) -> (String, String) {
    v.map_or((String::new(), String::new()), |e| (fmt17(e.value), fmt17(e.se)))
}

impl ReplicationReport {
    pub const CSV_HEADER: &'static str = "design,effect,tau,r_squared,crfe_variance,empirical_variance,empirical_variance_se,\
theoretical_variance,empirical_priasv,empirical_priasv_se,theoretical_priasv,empirical_range_reduction,\
empirical_range_reduction_se,theoretical_range_reduction,interval_coverage,interval_coverage_se,\
set_coverage,set_coverage_se,acceptance_probability,acceptance_rate,acceptance_rate_se";

    /// One row per design and effect; runtimes are left out so the file is reproducible.
    pub fn to_csv(&self) -> String {
        let mut out = String::from(Self::CSV_HEADER);
        out.push('\n');
        for d in &self.designs {
            let (cov, cov_se) = opt17(d.coverage);
            for e in &d.effects {
                let (ic, ic_se) = opt17(e.interval_coverage);
                let fields = [
                    d.name.clone(),
                    e.effect.clone(),
                    fmt17(e.tau),
                    fmt17(e.r_squared),
                    fmt17(e.crfe_variance),
                    fmt17(e.empirical_variance.value),
                    fmt17(e.empirical_variance.se),
                    fmt17(e.theoretical_variance),
                    fmt17(e.empirical_priasv.value),
                    fmt17(e.empirical_priasv.se),
                    fmt17(e.theoretical_priasv),
                    fmt17(e.empirical_range_reduction.value),
                    fmt17(e.empirical_range_reduction.se),
                    fmt17(e.theoretical_range_reduction),
                    ic,
                    ic_se,
                    cov.clone(),
                    cov_se.clone(),
                    fmt17(d.acceptance_probability),
                    fmt17(d.acceptance_rate.value),
                    fmt17(d.acceptance_rate.se),
                ];
                out.push_str(&fields.join(","));
                out.push('\n');
            }
        }
        out
    }
}

struct RepResult {
    error: DVector<f64>,
    draws: u64,
    covered: Option<bool>,
    intervals_covered: Vec<bool>,
}

/// Theoretical law of τ̂ - τ from population truth.
pub fn population_law(truth: &PopulationTruth, geom: &BalanceGeometry) -> Result<AsymptoticLaw> {
    let components = truth
        .coefficients
        .iter()
        .zip(geom.components())
        .map(|(coef, spec)| LawComponent { coef: coef.clone(), truncation: Truncation::from_threshold(spec.threshold) })
        .collect();
    AsymptoticLaw::new(truth.v_perp.clone(), components)
}

/// Theoretical PRIASV of every effect under `geom` for this population.
pub fn theoretical_priasv(truth: &PopulationTruth, geom: &BalanceGeometry) -> Result<Vec<f64>> {
    let profile = correlation_profile(&truth.v, &truth.explained)?;
    let dims: Vec<usize> = geom.components().iter().map(|c| c.dim).collect();
    let tr: Vec<Truncation> = geom.components().iter().map(|c| Truncation::from_threshold(c.threshold)).collect();
    priasv(&profile, &dims, &tr)
}

fn central_range(sample: &QuadFormSample) -> (f64, f64) {
    let len = sample.quantile(0.975) - sample.quantile(0.025);
    let se = (sample.quantile_se(0.975).powi(2) + sample.quantile_se(0.025).powi(2)).sqrt();
    (len, se)
}

/// Run `settings.reps` independent experiments per design and compare the
/// empirical behaviour of τ̂ with the asymptotic theory.
pub fn replicate(population: &Population, designs: &[DesignSpec], settings: &ReplicationSettings) -> Result<ReplicationReport> {
    if settings.reps < 100 {
        return Err(Error::invalid(format!("at least 100 replications are required, got {}", settings.reps)));
    }
    let y = population.y.as_ref().ok_or_else(|| Error::invalid("population has no potential outcomes"))?;
    let q = y.ncols();
    if !q.is_power_of_two() || q < 2 {
        return Err(Error::invalid("potential-outcome table must have 2^K columns"));
    }
    let s = FactorialStructure::new(q.trailing_zeros() as usize)?;
    let root = SeedSequence::new(settings.seed);
    let mut reports = Vec::with_capacity(designs.len());
    for (di, design) in designs.iter().enumerate() {
        let started = Instant::now();
        let geom = BalanceGeometry::new(&population.x, &s, &design.group_sizes, &design.criterion)?;
        let truth = PopulationTruth::new(y, &population.x, &geom)?;
        let law = population_law(&truth, &geom)?;
        let theory_var = law.covariance();
        let theory_priasv = theoretical_priasv(&truth, &geom)?;
        let rr = Rerandomizer::new(geom.clone(), settings.max_draws)?;
        let seq = root.child(di as u64);
        let theory_sims = simulate_law_blocks(&law, &seq.child(u64::MAX), settings.theory_draws, settings.workers)?;
        let ident = DMatrix::<f64>::identity(s.effects(), s.effects());

        let run_rep = |r: usize| -> Result<RepResult> {
            let mut rng: StreamRng = seq.rng(r as u64);
            let mut labels = Vec::new();
            let mut scratch = Scratch::default();
            let draws = rr.draw_into(&mut rng, &mut labels, &mut scratch)?;
            let z = Assignment::from_labels(labels, q)?;
            let yobs = population.observed(&z)?;
            let est = effect_estimates(&yobs, &z, &s)?;
            let error = &est - &truth.tau;
            let (covered, intervals_covered) = match settings.coverage {
                Some(cov) => {
                    let cs = confidence_set(&yobs, &z, &geom, &ident, cov.alpha, &mut rng, cov.draws)?;
                    let inside = cs.contains(&truth.tau)?;
                    let iv = cs
                        .intervals
                        .iter()
                        .zip(truth.tau.iter())
                        .map(|(&(lo, hi), t)| lo <= *t && *t <= hi)
                        .collect();
                    (Some(inside), iv)
                }
                None => (None, Vec::new()),
            };
            Ok(RepResult { error, draws, covered, intervals_covered })
        };
        let results: Vec<RepResult> = with_workers(settings.workers, || {
            (0..settings.reps).into_par_iter().map(run_rep).collect::<Result<Vec<_>>>()
        })??;

        let reps = settings.reps as f64;
        let draws: Vec<f64> = results.iter().map(|r| r.draws as f64).collect();
        let (mean_draws, mean_draws_se) = stats::mean_and_se(&draws);
        let acceptance_rate = Estimate { value: 1.0 / mean_draws, se: mean_draws_se / (mean_draws * mean_draws) };
        let proportion = |hits: usize| {
            let p = hits as f64 / reps;
            Estimate { value: p, se: (p * (1.0 - p) / reps).sqrt() }
        };
        let coverage = settings
            .coverage
            .map(|_| proportion(results.iter().filter(|r| r.covered == Some(true)).count()));

        let mut effects = Vec::with_capacity(s.effects());
        for f in 0..s.effects() {
            let vff = truth.v[(f, f)];
            let sq: Vec<f64> = results.iter().map(|r| r.error[f] * r.error[f]).collect();
            let (mse, mse_se) = stats::mean_and_se(&sq);
            let crfe_len = 2.0 * stats::chi2_quantile(1.0, 0.95)?.sqrt() * vff.sqrt();
            let emp = QuadFormSample::new(results.iter().map(|r| r.error[f]).collect());
            let (len, len_se) = central_range(&emp);
            let th = QuadFormSample::new(theory_sims.column(f).iter().copied().collect());
            let (th_len, _) = central_range(&th);
            let interval_coverage = settings
                .coverage
                .map(|_| proportion(results.iter().filter(|r| r.intervals_covered[f]).count()));
            effects.push(EffectRow {
                effect: s.effect_label(f),
                tau: truth.tau[f],
                crfe_variance: vff,
                empirical_variance: Estimate { value: mse, se: mse_se },
                theoretical_variance: theory_var[(f, f)],
                empirical_priasv: Estimate { value: 1.0 - mse / vff, se: mse_se / vff },
                theoretical_priasv: theory_priasv[f],
                empirical_range_reduction: Estimate { value: 1.0 - len / crfe_len, se: len_se / crfe_len },
                theoretical_range_reduction: 1.0 - th_len / crfe_len,
                r_squared: truth.v_explained[(f, f)] / vff,
                interval_coverage,
            });
        }
        reports.push(DesignReport {
            name: design.name.clone(),
            criterion: design.criterion.clone(),
            acceptance_probability: geom.acceptance_probability(),
            acceptance_rate,
            coverage,
            effects,
            runtime_seconds: started.elapsed().as_secs_f64(),
        });
    }
    Ok(ReplicationReport { reps: settings.reps, seed: settings.seed, designs: reports })
}

/// Theoretical PRIASV of every effect as the first-tier acceptance
/// probability varies with the overall probability held fixed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TradeoffCurves {
    pub effect_labels: Vec<String>,
    pub first_tier_probability: Vec<f64>,
    /// Row i holds the PRIASV of every effect at `first_tier_probability[i]`.
    pub priasv: DMatrix<f64>,
}

/// Two-tier effect criterion with P(tier 1) = p1 and P(tier 2) = p_a / p1,
/// swept over `grid`. At p1 = p_a the second tier is left unrestricted.
pub fn tier_tradeoff_sweep(
    population: &Population,
    sizes: &GroupSizes,
    effect_partition: &EffectTierPartition,
    p_a: f64,
    grid: &[f64],
) -> Result<TradeoffCurves> {
    let y = population.y.as_ref().ok_or_else(|| Error::invalid("population has no potential outcomes"))?;
    let s = FactorialStructure::new(y.ncols().trailing_zeros() as usize)?;
    if effect_partition.count() != 2 {
        return Err(Error::invalid("the trade-off sweep needs exactly two effect tiers"));
    }
    if !(p_a > 0.0 && p_a < 1.0) {
        return Err(Error::invalid("overall acceptance probability must lie in (0, 1)"));
    }
    let l = population.x.ncols();
    let dims: Vec<usize> = effect_partition.sizes().iter().map(|f| f * l).collect();
    let crit = BalanceCriterion::TiersF { effect_partition: effect_partition.clone(), a: vec![1.0, 1.0] };
    let geom = BalanceGeometry::new(&population.x, &s, sizes, &crit)?;
    let truth = PopulationTruth::new(y, &population.x, &geom)?;
    let profile = correlation_profile(&truth.v, &truth.explained)?;
    let mut out = DMatrix::zeros(grid.len(), s.effects());
    for (i, &p1) in grid.iter().enumerate() {
        if !(p1 >= p_a && p1 < 1.0) {
            return Err(Error::invalid(format!("first-tier probability {p1} must lie in [{p_a}, 1)")));
        }
        let p2 = p_a / p1;
        let t1 = Truncation::AtMost(thresholds_from_probability(&dims[..1], &[p1])?[0]);
        let t2 = if p2 >= 1.0 {
            Truncation::Untruncated
        } else {
            Truncation::AtMost(thresholds_from_probability(&dims[1..], &[p2])?[0])
        };
        let r = priasv(&profile, &dims, &[t1, t2])?;
        out.row_mut(i).copy_from(&DVector::from_vec(r).transpose());
    }
    Ok(TradeoffCurves { effect_labels: s.effect_labels(), first_tier_probability: grid.to_vec(), priasv: out })
}

/// Fraction of complete randomizations in which at least one standardized
/// covariate contrast τ̂_{x,f,l} / sd exceeds `z_crit` in absolute value.
pub fn covariate_imbalance_rate<R: Rng + ?Sized>(
    x: &DMatrix<f64>,
    s: &FactorialStructure,
    sizes: &GroupSizes,
    z_crit: f64,
    draws: usize,
    rng: &mut R,
) -> Result<Estimate> {
    let l = x.ncols();
    let bt = b_tilde(s, sizes)?;
    let sxx = linalg::covariance(x);
    let sd: Vec<f64> = (0..s.effects())
        .flat_map(|f| (0..l).map(move |j| (f, j)))
        .map(|(f, j)| (bt[(f, f)] * sxx[(j, j)]).sqrt())
        .collect();
    let mut hits = 0usize;
    for _ in 0..draws {
        let z = draw_crfe(sizes, rng);
        let t = covariate_diff_in_means(x, &z, s)?;
        if t.iter().zip(&sd).any(|(v, s)| (v / s).abs() > z_crit) {
            hits += 1;
        }
    }
    let p = hits as f64 / draws as f64;
    Ok(Estimate { value: p, se: (p * (1.0 - p) / draws as f64).sqrt() })
}

/// Structural stand-in for a two-factor education study: four unequal groups,
/// five mixed binary and continuous covariates, outcomes on a 0–4 grade scale.
pub fn education_like() -> (PopulationSpec, GroupSizes, EffectTierPartition) {
    let spec = PopulationSpec {
        n: 1398,
        factors: 2,
        covariates: vec![
            CovariateRecipe::Bernoulli { p: 0.45 },
            CovariateRecipe::Normal { mean: 0.0, sd: 1.0 },
            CovariateRecipe::Bernoulli { p: 0.3 },
            CovariateRecipe::Bernoulli { p: 0.6 },
            CovariateRecipe::Uniform { low: -1.0, high: 1.0 },
        ],
        correlation: 0.2,
        outcome: OutcomeRecipe {
            intercepts: vec![2.4, 2.5, 2.55, 2.9],
            slopes: vec![
                vec![0.05, 0.20, 0.05, 0.05, 0.05],
                vec![0.10, 0.25, 0.02, 0.10, 0.10],
                vec![0.08, 0.30, 0.00, 0.08, 0.02],
                vec![0.15, 0.55, 0.10, 0.15, 0.20],
            ],
            noise_sd: vec![0.63, 0.69, 0.69, 0.75],
            additive: false,
            clamp: Some([0.0, 4.0]),
        },
    };
    let sizes = GroupSizes::new(vec![856, 216, 208, 118]).expect("valid sizes");
    let s = FactorialStructure::new(2).expect("two factors");
    (spec, sizes, Partition::main_effects_first(&s))
}

/// The acceptance-probability split used with [`education_like`]: (0.002, 0.5).
pub const EDUCATION_TIER_PROBABILITIES: [f64; 2] = [0.002, 0.5];

/// Variance of each coordinate of the truncated component for `dim` and `p`.
pub fn shrinkage_for_probability(dim: usize, p: f64) -> Result<f64> {
    let a = stats::chi2_quantile(dim as f64, p)?;
    Ok(v_for(dim, Truncation::AtMost(a)))
}
