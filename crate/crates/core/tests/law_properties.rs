use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use refac::asymptotics::{
    sample_truncated_gaussian, simulate_law, simulate_law_blocks, v_constant, AsymptoticLaw, LawComponent, Truncation,
};
use refac::criterion::{thresholds_from_probability, BalanceCriterion, BalanceGeometry};
use refac::design::{FactorialStructure, GroupSizes};
use refac::estimation::{neyman_covariance, sample_moments};
use refac::inference::{confidence_set, thresholds_for_alphas};
use refac::rerandomize::Rerandomizer;
use refac::rng::{SeedSequence, StreamRng};
use refac::simlab::{generate_population, CovariateRecipe, OutcomeRecipe, PopulationSpec};
use refac::stats;

fn example_law() -> AsymptoticLaw {
    let base = DMatrix::from_row_slice(3, 3, &[1.0, 0.2, 0.0, 0.2, 0.8, 0.1, 0.0, 0.1, 0.5]);
    let c1 = DMatrix::from_row_slice(3, 2, &[0.6, 0.1, -0.2, 0.4, 0.3, 0.0]);
    let c2 = DMatrix::from_row_slice(3, 1, &[0.2, 0.5, -0.4]);
    AsymptoticLaw::new(
        base,
        vec![
            LawComponent { coef: c1, truncation: Truncation::AtMost(0.3) },
            LawComponent { coef: c2, truncation: Truncation::Untruncated },
        ],
    )
    .unwrap()
}

fn orthogonal(m: usize, rng: &mut StreamRng) -> DMatrix<f64> {
    let a = DMatrix::from_fn(m, m, |_, _| rng.sample::<f64, _>(StandardNormal));
    a.qr().q()
}

#[test]
fn truncated_draws_are_rotation_invariant() {
    let mut rng = StreamRng::from_seed_u64(8);
    let m = 4;
    let a = stats::chi2_quantile(m as f64, 0.2).unwrap();
    let draws = sample_truncated_gaussian(m, a, &mut rng, 40_000).unwrap();
    let rot = orthogonal(m, &mut rng);
    let rotated = &draws * rot.transpose();
    let half = 20_000;
    for j in 0..m {
        let base: Vec<f64> = draws.column(j).rows(0, half).iter().copied().collect();
        let turned: Vec<f64> = rotated.column(j).rows(half, half).iter().copied().collect();
        let t = stats::ks_two_sample(&base, &turned);
        assert!(t.p_value > 0.01, "coordinate {j}: p {}", t.p_value);
    }
}

#[test]
fn simulated_law_is_symmetric() {
    let law = example_law();
    let draws = simulate_law(&law, &mut StreamRng::from_seed_u64(21), 60_000).unwrap();
    let half = 30_000;
    for j in 0..3 {
        let col: Vec<f64> = draws.column(j).iter().copied().collect();
        let (m, se) = stats::mean_and_se(&col);
        assert!(m.abs() < 3.0 * se, "coordinate {j}: mean {m}, se {se}");
        let a: Vec<f64> = col[..half].to_vec();
        let b: Vec<f64> = col[half..].iter().map(|v| -v).collect();
        assert!(stats::ks_two_sample(&a, &b).p_value > 0.01);
    }
}

#[test]
fn analytic_covariance_is_base_plus_shrunk_components() {
    let law = example_law();
    let mut expected = law.base_cov.clone();
    for c in &law.components {
        let v = match c.truncation {
            Truncation::Untruncated => 1.0,
            Truncation::AtMost(a) => v_constant(c.dim(), a),
        };
        expected += &c.coef * c.coef.transpose() * v;
    }
    assert!((law.covariance() - expected).amax() < 1e-10);
}

#[test]
fn block_simulation_ignores_worker_count() {
    let law = example_law();
    let seq = SeedSequence::new(314);
    let one = simulate_law_blocks(&law, &seq, 10_000, 1).unwrap();
    let three = simulate_law_blocks(&law, &seq, 10_000, 3).unwrap();
    assert_eq!(one, three);
}

#[test]
fn threshold_ignores_square_root_convention() {
    let law = example_law();
    let mut rng = StreamRng::from_seed_u64(4);
    let rotated = AsymptoticLaw::new(
        law.base_cov.clone(),
        law.components
            .iter()
            .map(|c| LawComponent { coef: &c.coef * orthogonal(c.dim(), &mut rng), truncation: c.truncation })
            .collect(),
    )
    .unwrap();
    let c = DMatrix::identity(3, 3);
    let shape = law.base_cov.clone();
    let draws = 100_000;
    let se_of = |law: &AsymptoticLaw, seed: u64| {
        let sims = simulate_law(law, &mut StreamRng::from_seed_u64(seed), draws).unwrap();
        let s = refac::asymptotics::QuadFormSample::new(refac::asymptotics::quadratic_forms(&sims, &c, &shape).unwrap());
        (s.quantile(0.95), s.quantile_se(0.95))
    };
    let (t1, se1) = se_of(&law, 10);
    let (t2, se2) = se_of(&rotated, 11);
    assert!((t1 - t2).abs() < 2.0 * (se1 * se1 + se2 * se2).sqrt(), "{t1} vs {t2}");
}

#[test]
fn smaller_alpha_gives_larger_set() {
    let law = example_law();
    let c = DMatrix::identity(3, 3);
    let t = thresholds_for_alphas(&law, &c, &law.base_cov, &[0.01, 0.05, 0.1], &mut StreamRng::from_seed_u64(6), 20_000)
        .unwrap();
    assert!(t[0] >= t[1] && t[1] >= t[2]);
}

#[test]
fn rerandomized_sets_are_usually_smaller() {
    let spec = PopulationSpec {
        n: 400,
        factors: 2,
        covariates: vec![CovariateRecipe::Normal { mean: 0.0, sd: 1.0 }, CovariateRecipe::Uniform { low: 0.0, high: 2.0 }],
        correlation: 0.0,
        outcome: OutcomeRecipe {
            intercepts: vec![0.0, 0.5, 1.0, 1.5],
            slopes: vec![vec![1.0, 0.8], vec![1.4, 0.2], vec![0.5, 1.2], vec![1.1, 1.0]],
            noise_sd: vec![0.8],
            additive: false,
            clamp: None,
        },
    };
    let pop = generate_population(&spec, &mut StreamRng::from_seed_u64(1)).unwrap();
    let s = FactorialStructure::new(2).unwrap();
    let sizes = GroupSizes::equal(4, 400).unwrap();
    let a = thresholds_from_probability(&[6], &[0.01]).unwrap()[0];
    let geom = BalanceGeometry::new(&pop.x, &s, &sizes, &BalanceCriterion::Refm { a }).unwrap();
    let truth = refac::truth::PopulationTruth::new(pop.y.as_ref().unwrap(), &pop.x, &geom).unwrap();
    assert!(truth.r_squared().iter().all(|r| *r >= 0.2));
    let rr = Rerandomizer::new(geom.clone(), None).unwrap();
    let seq = SeedSequence::new(12);
    let c = DMatrix::identity(3, 3);
    let chi = stats::chi2_quantile(3.0, 0.95).unwrap();
    let reps = 200;
    let mut smaller = 0;
    for r in 0..reps {
        let mut rng = seq.rng(r);
        let z = rr.run(&mut rng).unwrap().assignment;
        let y: DVector<f64> = pop.observed(&z).unwrap();
        let set = confidence_set(&y, &z, &geom, &c, 0.05, &mut rng, 10_000).unwrap();
        let refm_volume = set.shape.determinant().sqrt() * set.threshold.powf(1.5);
        let m = sample_moments(&y, &pop.x, &z).unwrap();
        let wald_volume = neyman_covariance(&m, &s, &sizes).determinant().sqrt() * chi.powf(1.5);
        if refm_volume <= wald_volume {
            smaller += 1;
        }
    }
    assert!(smaller as f64 >= 0.95 * reps as f64, "{smaller} of {reps}");
}
