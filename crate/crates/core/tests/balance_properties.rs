use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::Rng;
use rand_distr::StandardNormal;
use refac::balance::{covariate_diff_in_means, theta_x, vxx, BalanceChecker, KroneckerCov};
use refac::criterion::{BalanceCriterion, BalanceGeometry};
use refac::design::{b_tilde, FactorialStructure, GroupSizes, Partition, TierGrid};
use refac::rerandomize::draw_crfe;
use refac::rng::StreamRng;
use refac::stats;

fn gaussian(rows: usize, cols: usize, rng: &mut StreamRng) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| rng.sample(StandardNormal))
}

fn criteria(s: &FactorialStructure) -> Vec<BalanceCriterion> {
    let main = Partition::main_effects_first(s);
    let two = main.count() == 2;
    let mut out = vec![BalanceCriterion::Refm { a: 5.0 }];
    if two {
        out.push(BalanceCriterion::TiersF { effect_partition: main.clone(), a: vec![3.0, 4.0] });
        out.push(BalanceCriterion::TiersCf {
            effect_partition: main,
            covariate_partition: Partition::new(vec![vec![0], vec![1, 2]], 3).unwrap(),
            grid: TierGrid::triangular(2, 2).unwrap(),
            a: vec![2.0, 6.0],
        });
    }
    out
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn statistics_are_affine_invariant(k in 2usize..=3, seed in any::<u64>()) {
        let s = FactorialStructure::new(k).unwrap();
        let mut rng = StreamRng::from_seed_u64(seed);
        let sizes = GroupSizes::new((0..s.combinations()).map(|_| rng.random_range(6..12)).collect()).unwrap();
        let n = sizes.total();
        let x = gaussian(n, 3, &mut rng);
        let mut a = gaussian(3, 3, &mut rng);
        while a.determinant().abs() < 0.2 {
            a = gaussian(3, 3, &mut rng);
        }
        let z = draw_crfe(&sizes, &mut rng);
        for crit in criteria(&s) {
            // Tier-1 columns may only feed later tiers, never the reverse.
            let recode = if matches!(crit, BalanceCriterion::TiersCf { .. }) {
                let mut b = DMatrix::zeros(3, 3);
                b[(0, 0)] = a[(0, 0)].abs() + 0.5;
                b.view_mut((1, 1), (2, 2)).copy_from(&a.view((1, 1), (2, 2)));
                b[(0, 1)] = a[(0, 1)];
                b[(0, 2)] = a[(0, 2)];
                if b.determinant().abs() < 0.05 {
                    continue;
                }
                b
            } else {
                a.clone()
            };
            let base = BalanceChecker::new(BalanceGeometry::new(&x, &s, &sizes, &crit).unwrap()).unwrap().evaluate(&z);
            let xa = &x * &recode;
            let other = BalanceChecker::new(BalanceGeometry::new(&xa, &s, &sizes, &crit).unwrap()).unwrap().evaluate(&z);
            for (m1, m2) in base.statistics.iter().zip(&other.statistics) {
                prop_assert!(*m1 >= 0.0);
                prop_assert!((m1 - m2).abs() <= 1e-8 * m1.abs().max(1.0), "{} {}: {m1} vs {m2}", crit.name(), k);
            }
        }
    }

    #[test]
    fn kronecker_inverse_matches_dense(k in 1usize..=3, l in 1usize..=7, seed in any::<u64>()) {
        let s = FactorialStructure::new(k).unwrap();
        prop_assume!(l * s.effects() <= 60);
        let mut rng = StreamRng::from_seed_u64(seed);
        let sizes = GroupSizes::new((0..s.combinations()).map(|_| rng.random_range(3..20)).collect()).unwrap();
        let x = gaussian(sizes.total().max(l + 5), l, &mut rng);
        let sxx = refac::linalg::covariance(&x);
        let v = vxx(&s, &sizes, &sxx).unwrap();
        let dense_inv = v.dense().try_inverse().unwrap();
        let fact = v.inverse().unwrap().dense();
        let rel = (&fact - &dense_inv).amax() / dense_inv.amax();
        prop_assert!(rel < 1e-9, "relative error {rel}");
        let w = DVector::from_fn(v.dense().nrows(), |i, _| (i as f64 + 1.0).sin());
        let q1 = v.inverse().unwrap().quad_form(&w);
        let q2 = (w.transpose() * &dense_inv * &w)[(0, 0)];
        prop_assert!((q1 - q2).abs() <= 1e-9 * q2.abs().max(1.0));
    }
}

#[test]
fn kronecker_inverse_sqrt_whitens() {
    let left = DMatrix::from_row_slice(2, 2, &[2.0, 0.3, 0.3, 1.0]);
    let right = DMatrix::from_row_slice(2, 2, &[1.5, -0.4, -0.4, 0.7]);
    let k = KroneckerCov { left, right };
    let r = k.inv_sqrt().unwrap().dense();
    let id = &r * k.dense() * r.transpose();
    assert!((id - DMatrix::identity(4, 4)).amax() < 1e-10);
}

#[test]
fn contrasts_are_centered_under_complete_randomization() {
    let s = FactorialStructure::new(2).unwrap();
    let sizes = GroupSizes::new(vec![10, 14, 12, 9]).unwrap();
    let mut rng = StreamRng::from_seed_u64(77);
    let x = gaussian(sizes.total(), 2, &mut rng);
    let eo = refac::design::EffectOrthogonalization::new(&s, &sizes, &Partition::main_effects_first(&s)).unwrap();
    let draws = 20_000;
    let mut tau = vec![Vec::with_capacity(draws); 6];
    let mut theta = vec![Vec::with_capacity(draws); 6];
    for _ in 0..draws {
        let z = draw_crfe(&sizes, &mut rng);
        let t = covariate_diff_in_means(&x, &z, &s).unwrap();
        let th = theta_x(&x, &z, &s, &eo).unwrap();
        for i in 0..6 {
            tau[i].push(t[i]);
            theta[i].push(th[i]);
        }
    }
    for col in tau.iter().chain(theta.iter()) {
        let (m, se) = stats::mean_and_se(col);
        assert!(m.abs() < 3.0 * se + 1e-12, "mean {m} se {se}");
    }
}

#[test]
fn exact_covariance_of_contrasts() {
    let s = FactorialStructure::new(1).unwrap();
    let sizes = GroupSizes::new(vec![3, 3]).unwrap();
    let x = DMatrix::from_column_slice(6, 1, &[0.5, -1.0, 2.0, 0.3, 1.1, -0.7]);
    let mut sum = 0.0;
    let mut count = 0.0;
    // All 20 ways of choosing the first group.
    for mask in 0u32..64 {
        if mask.count_ones() != 3 {
            continue;
        }
        let labels: Vec<usize> = (0..6).map(|i| ((mask >> i) & 1) as usize).collect();
        let z = refac::rerandomize::Assignment::from_labels(labels, 2).unwrap();
        let t = covariate_diff_in_means(&x, &z, &s).unwrap()[0];
        sum += t * t;
        count += 1.0;
    }
    let exact = b_tilde(&s, &sizes).unwrap()[(0, 0)] * refac::linalg::covariance(&x)[(0, 0)];
    assert!((sum / count - exact).abs() < 1e-12);
}
