//! The `design`, `analyze`, `simulate`, `sweep` and `thresholds` commands.

use std::path::PathBuf;

use nalgebra::DMatrix;
use refac::asymptotics::{v_for, Truncation, DEFAULT_LAW_DRAWS};
use refac::balance::BalanceReport;
use refac::criterion::BalanceGeometry;
use refac::design::{FactorialStructure, GroupSizes, Partition};
use refac::estimation::effect_estimates;
use refac::inference::confidence_set;
use refac::rerandomize::{Assignment, Rerandomizer};
use refac::rng::{SeedRecord, SeedSequence};
use refac::simlab::{
    generate_population, replicate, tier_tradeoff_sweep, CoverageSettings, DesignSpec, PopulationSpec,
    ReplicationReport, ReplicationSettings, TradeoffCurves,
};
use serde::{Deserialize, Serialize};

use crate::config::{read_json, to_json, write_text, CriterionConfig, DesignConfig, ResolvedCriterion, SizesConfig, SCHEMA_VERSION};
use crate::data::{assignment_csv, read_data};
use crate::error::{CliError, CliResult};

/// Default seed when neither a flag, the environment nor the config sets one.
pub const DEFAULT_SEED: u64 = 0;
/// Default replication count for `simulate`.
pub const DEFAULT_REPS: usize = 2000;

const POPULATION_STREAM: u64 = 0x706f_7075_6c61_7465;

fn rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

fn fmt17(v: f64) -> String {
    format!("{v:.16e}")
}

#[derive(Debug, Clone)]
pub struct DesignArgs {
    pub config: PathBuf,
    pub data: PathBuf,
    pub assignment_out: PathBuf,
    pub report_out: PathBuf,
    pub seed: Option<u64>,
    pub max_draws: Option<u64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct DesignOutput {
    pub schema_version: u32,
    pub config: DesignConfig,
    pub resolved: ResolvedCriterion,
    pub covariates: Vec<String>,
    pub units: usize,
    pub seed: SeedRecord,
    pub draws_attempted: u64,
    pub max_draws: u64,
    pub balance: BalanceReport,
}

struct Prepared {
    config: DesignConfig,
    structure: FactorialStructure,
    sizes: GroupSizes,
    resolved: ResolvedCriterion,
    data: crate::data::DataFile,
    geometry: BalanceGeometry,
}

fn prepare(config_path: &PathBuf, data_path: &PathBuf) -> CliResult<Prepared> {
    let config: DesignConfig = read_json(config_path)?;
    let data = read_data(data_path)?;
    let structure = FactorialStructure::new(config.factors)?;
    let sizes = config.group_sizes.resolve(&structure)?;
    if sizes.total() != data.ids.len() {
        return Err(refac::Error::Invalid(format!(
            "group sizes add up to {} units but the data file has {}",
            sizes.total(),
            data.ids.len()
        ))
        .into());
    }
    let resolved = config.criterion.resolve(&structure, data.x.ncols())?;
    let geometry = BalanceGeometry::new(&data.x, &structure, &sizes, &resolved.criterion)?;
    Ok(Prepared { config, structure, sizes, resolved, data, geometry })
}

/// Rerandomize the units of a covariate file and write the accepted assignment.
pub fn cmd_design(args: &DesignArgs) -> CliResult<DesignOutput> {
    let mut p = prepare(&args.config, &args.data)?;
    let seed = args.seed.or(p.config.seed).unwrap_or(DEFAULT_SEED);
    let max_draws = args.max_draws.or(p.config.max_draws);
    p.config.seed = Some(seed);
    p.config.max_draws = max_draws;
    let rr = Rerandomizer::new(p.geometry, max_draws)?;
    let outcome = rr.run(&mut SeedSequence::new(seed).rng(0))?;
    write_text(&args.assignment_out, &assignment_csv(&p.data.ids, &outcome.assignment.one_based()))?;
    let out = DesignOutput {
        schema_version: SCHEMA_VERSION,
        config: p.config,
        resolved: p.resolved,
        covariates: p.data.covariate_names,
        units: p.sizes.total(),
        seed: outcome.seed,
        draws_attempted: outcome.draws_attempted,
        max_draws: rr.max_draws(),
        balance: outcome.report,
    };
    write_text(&args.report_out, &to_json(&out))?;
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct AnalyzeArgs {
    pub config: PathBuf,
    pub data: PathBuf,
    pub contrast: Option<PathBuf>,
    pub alpha: f64,
    pub draws: Option<usize>,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Serialize)]
pub struct Interval {
    pub row: usize,
    pub estimate: f64,
    pub lower: f64,
    pub upper: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct SetOutput {
    pub center: Vec<f64>,
    pub shape: Vec<Vec<f64>>,
    pub threshold: f64,
    pub threshold_se: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct AnalyzeOutput {
    pub schema_version: u32,
    pub config: DesignConfig,
    pub resolved: ResolvedCriterion,
    pub effects: Vec<String>,
    pub estimates: Vec<f64>,
    pub contrast: Vec<Vec<f64>>,
    pub alpha: f64,
    pub draws: usize,
    pub seed: SeedRecord,
    /// Estimated covariance of C τ̂.
    pub covariance: Vec<Vec<f64>>,
    pub confidence_set: SetOutput,
    pub intervals: Vec<Interval>,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum ContrastFile {
    Plain(Vec<Vec<f64>>),
    Named { rows: Vec<Vec<f64>> },
}

fn read_contrast(path: &PathBuf, f: usize) -> CliResult<DMatrix<f64>> {
    let rows = match read_json::<ContrastFile>(path)? {
        ContrastFile::Plain(r) | ContrastFile::Named { rows: r } => r,
    };
    if rows.is_empty() || rows.iter().any(|r| r.len() != f) {
        return Err(CliError::file(path, format!("contrast rows must each have {f} entries")));
    }
    Ok(DMatrix::from_row_iterator(rows.len(), f, rows.into_iter().flatten()))
}

/// Point estimates, covariance estimate and confidence set from an analyzed experiment.
pub fn cmd_analyze(args: &AnalyzeArgs) -> CliResult<AnalyzeOutput> {
    let mut p = prepare(&args.config, &args.data)?;
    let y = p.data.y.clone().ok_or_else(|| CliError::file(&args.data, "no outcome column \"y\""))?;
    let z = p.data.z.as_ref().ok_or_else(|| CliError::file(&args.data, "no assignment column \"z\""))?;
    let z = Assignment::from_one_based(z, p.structure.combinations())?;
    z.check_sizes(&p.sizes)?;
    let f = p.structure.effects();
    let c = match &args.contrast {
        Some(path) => read_contrast(path, f)?,
        None => DMatrix::identity(f, f),
    };
    let seed = args.seed.or(p.config.seed).unwrap_or(DEFAULT_SEED);
    p.config.seed = Some(seed);
    let draws = args.draws.unwrap_or(DEFAULT_LAW_DRAWS);
    let mut rng = SeedSequence::new(seed).rng(1);
    let set = confidence_set(&y, &z, &p.geometry, &c, args.alpha, &mut rng, draws)?;
    let tau = effect_estimates(&y, &z, &p.structure)?;
    let intervals = set
        .intervals
        .iter()
        .enumerate()
        .map(|(i, &(lower, upper))| Interval { row: i + 1, estimate: set.center[i], lower, upper })
        .collect();
    let out = AnalyzeOutput {
        schema_version: SCHEMA_VERSION,
        config: p.config,
        resolved: p.resolved,
        effects: p.structure.effect_labels(),
        estimates: tau.iter().copied().collect(),
        contrast: rows(&c),
        alpha: args.alpha,
        draws,
        seed: set.seed,
        covariance: rows(&set.covariance),
        confidence_set: SetOutput {
            center: set.center.iter().copied().collect(),
            shape: rows(&set.shape),
            threshold: set.threshold,
            threshold_se: set.threshold_se,
        },
        intervals,
    };
    if let Some(path) = &args.out {
        write_text(path, &to_json(&out))?;
    }
    Ok(out)
}

/// A list of designs sharing default group sizes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DesignsFile {
    pub group_sizes: SizesConfig,
    pub designs: Vec<NamedDesign>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NamedDesign {
    pub name: String,
    pub criterion: CriterionConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub group_sizes: Option<SizesConfig>,
}

#[derive(Debug, Clone)]
pub struct SimulateArgs {
    pub spec: PathBuf,
    pub designs: PathBuf,
    pub reps: usize,
    pub seed: u64,
    pub workers: usize,
    pub draws: Option<usize>,
    /// Coverage of 1-α confidence sets is estimated when set.
    pub coverage_alpha: Option<f64>,
    pub max_draws: Option<u64>,
    pub csv_out: Option<PathBuf>,
    pub json_out: Option<PathBuf>,
}

#[derive(Debug, Clone, Serialize)]
pub struct SimulateConfig {
    pub population: PopulationSpec,
    pub designs: DesignsFile,
    pub reps: usize,
    pub seed: u64,
    pub workers: usize,
    pub draws: usize,
    pub coverage_alpha: Option<f64>,
    pub max_draws: Option<u64>,
    pub resolved: Vec<ResolvedCriterion>,
}

#[derive(Debug, Clone, Serialize)]
pub struct SimulateOutput {
    pub schema_version: u32,
    pub config: SimulateConfig,
    pub report: ReplicationReport,
}

/// Generate a population from a spec and replicate every listed design.
pub fn cmd_simulate(args: &SimulateArgs) -> CliResult<(SimulateOutput, String)> {
    let spec: PopulationSpec = read_json(&args.spec)?;
    let designs: DesignsFile = read_json(&args.designs)?;
    let s = spec.validate()?;
    let population = generate_population(&spec, &mut SeedSequence::new(args.seed).child(POPULATION_STREAM).rng(0))?;
    let mut specs = Vec::new();
    let mut resolved = Vec::new();
    for d in &designs.designs {
        let sizes = d.group_sizes.as_ref().unwrap_or(&designs.group_sizes).resolve(&s)?;
        if sizes.total() != spec.n {
            return Err(refac::Error::Invalid(format!(
                "design \"{}\" has {} units but the population has {}",
                d.name,
                sizes.total(),
                spec.n
            ))
            .into());
        }
        let r = d.criterion.resolve(&s, spec.covariates.len())?;
        specs.push(DesignSpec { name: d.name.clone(), group_sizes: sizes, criterion: r.criterion.clone() });
        resolved.push(r);
    }
    let draws = args.draws.unwrap_or(DEFAULT_LAW_DRAWS);
    let settings = ReplicationSettings {
        reps: args.reps,
        seed: args.seed,
        workers: args.workers,
        coverage: args.coverage_alpha.map(|alpha| CoverageSettings { alpha, draws }),
        max_draws: args.max_draws,
        theory_draws: draws,
    };
    let report = replicate(&population, &specs, &settings)?;
    let csv = report.to_csv();
    let out = SimulateOutput {
        schema_version: SCHEMA_VERSION,
        config: SimulateConfig {
            population: spec,
            designs,
            reps: args.reps,
            seed: args.seed,
            workers: args.workers,
            draws,
            coverage_alpha: args.coverage_alpha,
            max_draws: args.max_draws,
            resolved,
        },
        report,
    };
    if let Some(path) = &args.csv_out {
        write_text(path, &csv)?;
    }
    if let Some(path) = &args.json_out {
        write_text(path, &to_json(&out))?;
    }
    Ok((out, csv))
}

/// Two effect tiers with an overall acceptance probability and a grid of
/// first-tier probabilities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    pub group_sizes: SizesConfig,
    pub effect_tiers: Vec<Vec<usize>>,
    pub p_a: f64,
    pub grid: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct SweepArgs {
    pub spec: PathBuf,
    pub config: PathBuf,
    pub seed: u64,
    pub csv_out: Option<PathBuf>,
    pub json_out: Option<PathBuf>,
}

#[derive(Debug, Clone, Serialize)]
pub struct SweepOutput {
    pub schema_version: u32,
    pub population: PopulationSpec,
    pub config: SweepConfig,
    pub seed: u64,
    pub curves: TradeoffCurves,
}

/// Theoretical PRIASV curves as the first-tier acceptance probability varies.
pub fn cmd_sweep(args: &SweepArgs) -> CliResult<(SweepOutput, String)> {
    let spec: PopulationSpec = read_json(&args.spec)?;
    let config: SweepConfig = read_json(&args.config)?;
    let s = spec.validate()?;
    let sizes = config.group_sizes.resolve(&s)?;
    let partition = Partition::from_one_based(config.effect_tiers.clone(), s.effects())?;
    let population = generate_population(&spec, &mut SeedSequence::new(args.seed).child(POPULATION_STREAM).rng(0))?;
    let curves = tier_tradeoff_sweep(&population, &sizes, &partition, config.p_a, &config.grid)?;
    let mut csv = format!("p_a1,{}\n", curves.effect_labels.join(","));
    for (i, p) in curves.first_tier_probability.iter().enumerate() {
        let vals: Vec<String> = curves.priasv.row(i).iter().map(|v| fmt17(*v)).collect();
        csv.push_str(&format!("{},{}\n", fmt17(*p), vals.join(",")));
    }
    let out = SweepOutput { schema_version: SCHEMA_VERSION, population: spec, config, seed: args.seed, curves };
    if let Some(path) = &args.csv_out {
        write_text(path, &csv)?;
    }
    if let Some(path) = &args.json_out {
        write_text(path, &to_json(&out))?;
    }
    Ok((out, csv))
}

#[derive(Debug, Clone, Default)]
pub struct ThresholdsArgs {
    pub dims: Option<Vec<usize>>,
    /// With `tier_sizes`, dims are covariates × effects per tier.
    pub covariates: Option<usize>,
    pub tier_sizes: Option<Vec<usize>>,
    pub p: Option<Vec<f64>>,
    pub a: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ThresholdRow {
    pub tier: usize,
    pub dim: usize,
    pub a: f64,
    pub p: f64,
    pub v: f64,
}

/// Threshold, acceptance probability and variance-shrinkage factor per tier.
pub fn cmd_thresholds(args: &ThresholdsArgs) -> CliResult<Vec<ThresholdRow>> {
    let dims = match (&args.dims, args.covariates, &args.tier_sizes) {
        (Some(d), None, None) => d.clone(),
        (None, Some(l), Some(t)) => t.iter().map(|f| l * f).collect(),
        _ => return Err(CliError::Usage("give either --dims or both --covariates and --tier-sizes".into())),
    };
    if dims.contains(&0) {
        return Err(refac::Error::Invalid("tier dimensions must be positive".into()).into());
    }
    let t = crate::config::ThresholdConfig { a: args.a.clone(), p: args.p.clone() };
    let (a, p) = t.resolve(&dims)?;
    Ok(dims
        .iter()
        .enumerate()
        .map(|(i, &d)| ThresholdRow { tier: i + 1, dim: d, a: a[i], p: p[i], v: v_for(d, Truncation::AtMost(a[i])) })
        .collect())
}

pub fn thresholds_csv(rows: &[ThresholdRow]) -> String {
    let mut out = String::from("tier,dim,a,p,v\n");
    for r in rows {
        out.push_str(&format!("{},{},{},{},{}\n", r.tier, r.dim, fmt17(r.a), fmt17(r.p), fmt17(r.v)));
    }
    out
}
