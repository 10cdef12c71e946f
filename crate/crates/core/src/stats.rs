//! Special functions and distribution utilities.
//!
//! The chi-square CDF is the regularized lower incomplete gamma function,
//! evaluated by its power series below `x = s + 1` and by a Lentz continued
//! fraction above. Quantiles use a bracketed Newton iteration on the
//! logarithm of the CDF, which keeps full relative accuracy for the very
//! small probabilities needed by truncated sampling.

use crate::error::{Error, Result};

const LANCZOS: [f64; 9] = [
    0.999_999_999_999_809_9,
    676.520_368_121_885_1,
    -1_259.139_216_722_402_8,
    771.323_428_777_653_1,
    -176.615_029_162_140_6,
    12.507_343_278_686_905,
    -0.138_571_095_265_720_12,
    9.984_369_578_019_572e-6,
    1.505_632_735_149_311_6e-7,
];

/// Natural logarithm of the gamma function for `x > 0`.
pub fn ln_gamma(x: f64) -> f64 {
    if x < 0.5 {
        // Reflection keeps the Lanczos sum in its accurate range.
        let pi = std::f64::consts::PI;
        return (pi / (pi * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut acc = LANCZOS[0];
    let t = x + 7.5;
    for (i, c) in LANCZOS.iter().enumerate().skip(1) {
        acc += c / (x + i as f64);
    }
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + acc.ln()
}

fn ln_prefactor(s: f64, x: f64) -> f64 {
    -x + s * x.ln() - ln_gamma(s)
}

fn series_sum(s: f64, x: f64) -> f64 {
    let mut ap = s;
    let mut term = 1.0 / s;
    let mut sum = term;
    for _ in 0..10_000 {
        ap += 1.0;
        term *= x / ap;
        sum += term;
        if term.abs() < sum.abs() * 1e-17 {
            break;
        }
    }
    sum
}

fn continued_fraction(s: f64, x: f64) -> f64 {
    const TINY: f64 = 1e-300;
    let mut b = x + 1.0 - s;
    let mut c = 1.0 / TINY;
    let mut d = 1.0 / b;
    let mut h = d;
    for i in 1..10_000 {
        let an = -(i as f64) * (i as f64 - s);
        b += 2.0;
        d = an * d + b;
        if d.abs() < TINY {
            d = TINY;
        }
        c = b + an / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        let del = d * c;
        h *= del;
        if (del - 1.0).abs() < 1e-16 {
            break;
        }
    }
    h
}

/// Regularized lower incomplete gamma function `P(s, x)`.
pub fn gamma_p(s: f64, x: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if x < s + 1.0 {
        (series_sum(s, x).ln() + ln_prefactor(s, x)).exp().min(1.0)
    } else {
        1.0 - gamma_q(s, x)
    }
}

/// Regularized upper incomplete gamma function `Q(s, x) = 1 - P(s, x)`.
pub fn gamma_q(s: f64, x: f64) -> f64 {
    if x <= 0.0 {
        return 1.0;
    }
    if x < s + 1.0 {
        1.0 - gamma_p(s, x)
    } else {
        (continued_fraction(s, x).ln() + ln_prefactor(s, x)).exp()
    }
}

/// `ln P(s, x)`, accurate even when `P` underflows double precision.
pub fn ln_gamma_p(s: f64, x: f64) -> f64 {
    if x <= 0.0 {
        return f64::NEG_INFINITY;
    }
    if x < s + 1.0 {
        series_sum(s, x).ln() + ln_prefactor(s, x)
    } else {
        (-gamma_q(s, x)).ln_1p()
    }
}

/// CDF of the chi-square distribution with `df` degrees of freedom.
pub fn chi2_cdf(df: f64, x: f64) -> f64 {
    gamma_p(df / 2.0, x / 2.0)
}

/// Upper tail `P(χ²_df > x)`.
pub fn chi2_sf(df: f64, x: f64) -> f64 {
    gamma_q(df / 2.0, x / 2.0)
}

pub fn chi2_ln_pdf(df: f64, x: f64) -> f64 {
    let s = df / 2.0;
    (s - 1.0) * x.ln() - x / 2.0 - s * std::f64::consts::LN_2 - ln_gamma(s)
}

/// Inverse CDF of the chi-square distribution for `p` strictly inside (0, 1).
pub fn chi2_quantile(df: f64, p: f64) -> Result<f64> {
    if !(df > 0.0 && df.is_finite()) {
        return Err(Error::invalid(format!("degrees of freedom must be positive, got {df}")));
    }
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::invalid(format!("probability must lie in (0, 1), got {p}")));
    }
    Ok(chi2_quantile_ln(df, p.ln()))
}

/// Quantile at `exp(ln_p)`; callers guarantee `ln_p < 0`.
pub(crate) fn chi2_quantile_ln(df: f64, ln_p: f64) -> f64 {
    let s = df / 2.0;
    // Root of g(y) = ln P(s, e^y / 2) - ln p in y = ln x.
    let g = |y: f64| ln_gamma_p(s, y.exp() / 2.0) - ln_p;
    let mut y = df.ln();
    let mut gy = g(y);
    let (mut lo, mut hi);
    if gy < 0.0 {
        lo = y;
        hi = y + 1.0;
        while g(hi) < 0.0 {
            lo = hi;
            hi += 1.0;
        }
    } else {
        hi = y;
        lo = y - 2.0;
        while g(lo) > 0.0 {
            hi = lo;
            lo -= 2.0;
        }
    }
    y = 0.5 * (lo + hi);
    gy = g(y);
    for _ in 0..200 {
        if gy == 0.0 {
            break;
        }
        if gy < 0.0 {
            lo = y;
        } else {
            hi = y;
        }
        let x = y.exp();
        let ln_p_here = gy + ln_p;
        let slope = (x.ln() + chi2_ln_pdf(df, x) - ln_p_here).exp();
        let mut next = y - gy / slope;
        if !(next > lo && next < hi) || !next.is_finite() {
            next = 0.5 * (lo + hi);
        }
        let step = (next - y).abs();
        y = next;
        if step <= 1e-15 * y.abs().max(1.0) || hi - lo <= 1e-15 * y.abs().max(1.0) {
            break;
        }
        gy = g(y);
    }
    y.exp()
}

/// Standard normal CDF.
pub fn normal_cdf(z: f64) -> f64 {
    let t = z / std::f64::consts::SQRT_2;
    if t <= 0.0 {
        0.5 * gamma_q(0.5, t * t)
    } else {
        0.5 * (1.0 + gamma_p(0.5, t * t))
    }
}

/// Outcome of a goodness-of-fit test.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TestResult {
    pub statistic: f64,
    pub p_value: f64,
}

/// Asymptotic Kolmogorov tail probability `P(K > lambda)`.
pub fn kolmogorov_sf(lambda: f64) -> f64 {
    if lambda < 0.2 {
        return 1.0;
    }
    let mut sum = 0.0;
    let mut sign = 1.0;
    for k in 1..=100 {
        let kf = k as f64;
        let term = (-2.0 * kf * kf * lambda * lambda).exp();
        sum += sign * term;
        if term < 1e-17 {
            break;
        }
        sign = -sign;
    }
    (2.0 * sum).clamp(0.0, 1.0)
}

fn ks_p_value(d: f64, effective_n: f64) -> f64 {
    let rt = effective_n.sqrt();
    kolmogorov_sf((rt + 0.12 + 0.11 / rt) * d)
}

/// One-sample Kolmogorov–Smirnov test of `sample` against a continuous CDF.
pub fn ks_one_sample(sample: &[f64], cdf: impl Fn(f64) -> f64) -> TestResult {
    let mut sorted = sample.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len() as f64;
    let mut d: f64 = 0.0;
    for (i, &x) in sorted.iter().enumerate() {
        let f = cdf(x);
        d = d.max((i as f64 + 1.0) / n - f).max(f - i as f64 / n);
    }
    TestResult { statistic: d, p_value: ks_p_value(d, n) }
}

/// Two-sample Kolmogorov–Smirnov test.
pub fn ks_two_sample(a: &[f64], b: &[f64]) -> TestResult {
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j) = (0, 0);
    let mut d: f64 = 0.0;
    while i < a.len() && j < b.len() {
        let x = a[i].min(b[j]);
        while i < a.len() && a[i] <= x {
            i += 1;
        }
        while j < b.len() && b[j] <= x {
            j += 1;
        }
        d = d.max((i as f64 / na - j as f64 / nb).abs());
    }
    TestResult { statistic: d, p_value: ks_p_value(d, na * nb / (na + nb)) }
}

/// Pearson chi-square goodness-of-fit test of counts against expected counts.
pub fn chi_square_gof(observed: &[u64], expected: &[f64]) -> Result<TestResult> {
    if observed.len() != expected.len() || observed.len() < 2 {
        return Err(Error::invalid("observed and expected counts must align and have at least two cells"));
    }
    let statistic: f64 = observed
        .iter()
        .zip(expected)
        .map(|(&o, &e)| (o as f64 - e).powi(2) / e)
        .sum();
    let df = (observed.len() - 1) as f64;
    Ok(TestResult { statistic, p_value: chi2_sf(df, statistic) })
}

/// Mean and standard error of the mean.
pub fn mean_and_se(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}
