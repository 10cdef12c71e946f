use std::collections::HashMap;

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;
use refac::balance::{BalanceChecker, Scratch};
use refac::criterion::{thresholds_from_probability, BalanceCriterion, BalanceGeometry};
use refac::design::{FactorialStructure, GroupSizes};
use refac::rerandomize::{draw_crfe, rerandomize, Assignment, Rerandomizer};
use refac::rng::{SeedSequence, StreamRng};
use refac::stats;

fn all_assignments(sizes: &[usize]) -> Vec<Vec<usize>> {
    fn fill(pos: usize, left: &mut Vec<usize>, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>, n: usize) {
        if pos == n {
            out.push(cur.clone());
            return;
        }
        for q in 0..left.len() {
            if left[q] > 0 {
                left[q] -= 1;
                cur.push(q);
                fill(pos + 1, left, cur, out, n);
                cur.pop();
                left[q] += 1;
            }
        }
    }
    let n = sizes.iter().sum();
    let mut out = Vec::new();
    fill(0, &mut sizes.to_vec(), &mut Vec::new(), &mut out, n);
    out
}

#[test]
fn accepted_assignments_are_uniform() {
    let s = FactorialStructure::new(2).unwrap();
    let sizes = GroupSizes::new(vec![2, 2, 2, 2]).unwrap();
    let x = DMatrix::from_column_slice(8, 1, &[0.3, -1.2, 0.8, 1.9, -0.4, 0.1, -2.0, 1.4]);
    let crit = BalanceCriterion::Refm { a: 2.0 };
    let geom = BalanceGeometry::new(&x, &s, &sizes, &crit).unwrap();
    let checker = BalanceChecker::new(geom.clone()).unwrap();
    let mut scratch = Scratch::default();
    let all = all_assignments(sizes.as_slice());
    assert_eq!(all.len(), 2520);
    let accepted: HashMap<Vec<usize>, usize> = all
        .into_iter()
        .filter(|z| checker.evaluate_into(z, &mut scratch))
        .enumerate()
        .map(|(i, z)| (z, i))
        .collect();
    assert!(accepted.len() > 50 && accepted.len() < 2520);

    let rr = Rerandomizer::new(geom, None).unwrap();
    let mut rng = StreamRng::from_seed_u64(2024);
    let mut counts = vec![0u64; accepted.len()];
    let mut labels = Vec::new();
    let total = 1_000_000;
    for _ in 0..total {
        rr.draw_into(&mut rng, &mut labels, &mut scratch).unwrap();
        counts[*accepted.get(&labels).expect("output is an accepted assignment")] += 1;
    }
    let expected = vec![total as f64 / accepted.len() as f64; accepted.len()];
    let test = stats::chi_square_gof(&counts, &expected).unwrap();
    assert!(test.p_value > 0.01, "chi-square {} p {}", test.statistic, test.p_value);
}

#[test]
fn identical_seeds_give_identical_outcomes() {
    let s = FactorialStructure::new(2).unwrap();
    let sizes = GroupSizes::equal(4, 80).unwrap();
    let mut g = StreamRng::from_seed_u64(5);
    let x = DMatrix::from_fn(80, 3, |_, _| g.sample::<f64, _>(StandardNormal));
    let crit = BalanceCriterion::Refm { a: thresholds_from_probability(&[9], &[0.05]).unwrap()[0] };
    let seq = SeedSequence::new(99);
    let a = rerandomize(&x, &s, &sizes, &crit, &mut seq.rng(3), None).unwrap();
    let b = rerandomize(&x, &s, &sizes, &crit, &mut seq.rng(3), None).unwrap();
    assert_eq!(a, b);
    let c = rerandomize(&x, &s, &sizes, &crit, &mut seq.rng(4), None).unwrap();
    assert_ne!(a.assignment, c.assignment);
}

fn acceptance_fraction(n: usize, draws: usize) -> (f64, f64, f64) {
    let s = FactorialStructure::new(2).unwrap();
    let sizes = GroupSizes::equal(4, n).unwrap();
    let mut rng = StreamRng::from_seed_u64(n as u64);
    let x = DMatrix::from_fn(n, 2, |_, _| rng.sample::<f64, _>(StandardNormal));
    let p = 0.3;
    let crit = BalanceCriterion::Refm { a: thresholds_from_probability(&[6], &[p]).unwrap()[0] };
    let checker = BalanceChecker::new(BalanceGeometry::new(&x, &s, &sizes, &crit).unwrap()).unwrap();
    let mut scratch = Scratch::default();
    let hits = (0..draws)
        .filter(|_| {
            let z: Assignment = draw_crfe(&sizes, &mut rng);
            checker.evaluate_into(z.labels(), &mut scratch)
        })
        .count();
    let frac = hits as f64 / draws as f64;
    (frac, (frac * (1.0 - frac) / draws as f64).sqrt(), p)
}

#[test]
fn acceptance_fraction_approaches_nominal() {
    let (f, se, p) = acceptance_fraction(1000, 20_000);
    assert!((f - p).abs() < 3.0 * se + 0.01, "n=1000: {f} vs {p}");
    let (f, se, p) = acceptance_fraction(100, 20_000);
    assert!((f - p).abs() < 3.0 * se + 0.05, "n=100: {f} vs {p}");
}
