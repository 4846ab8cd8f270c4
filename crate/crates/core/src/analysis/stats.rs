//! Descriptive statistics, Pearson correlation and its two-sided p-value.

use serde::{Deserialize, Serialize};
use thiserror::Error;

const LANCZOS_G: f64 = 7.0;
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

/// ln Γ(x) for x > 0.
pub fn ln_gamma(x: f64) -> f64 {
    if x < 0.5 {
        // Reflection.
        let pi = std::f64::consts::PI;
        return (pi / (pi * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut a = LANCZOS[0];
    let t = x + LANCZOS_G + 0.5;
    for (i, c) in LANCZOS.iter().enumerate().skip(1) {
        a += c / (x + i as f64);
    }
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + a.ln()
}

/// Continued fraction for the incomplete beta (modified Lentz).
fn beta_cf(a: f64, b: f64, x: f64) -> f64 {
    const TINY: f64 = 1e-300;
    const EPS: f64 = 1e-16;
    let (qab, qap, qam) = (a + b, a + 1.0, a - 1.0);
    let mut c = 1.0;
    let mut d = 1.0 - qab * x / qap;
    if d.abs() < TINY {
        d = TINY;
    }
    d = 1.0 / d;
    let mut h = d;
    for m in 1..=10_000 {
        let m = m as f64;
        let m2 = 2.0 * m;
        let aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        h *= d * c;
        let aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        let del = d * c;
        h *= del;
        if (del - 1.0).abs() < EPS {
            break;
        }
    }
    h
}

/// Regularized incomplete beta I_x(a, b) for a, b > 0 and x in [0, 1].
pub fn regularized_incomplete_beta(a: f64, b: f64, x: f64) -> f64 {
    assert!(a > 0.0 && b > 0.0, "shape parameters must be positive");
    assert!((0.0..=1.0).contains(&x), "x must lie in [0, 1]");
    if x == 0.0 || x == 1.0 {
        return x;
    }
    let ln_front = ln_gamma(a + b) - ln_gamma(a) - ln_gamma(b) + a * x.ln() + b * (1.0 - x).ln();
    let front = ln_front.exp();
    if x < (a + 1.0) / (a + b + 2.0) {
        front * beta_cf(a, b, x) / a
    } else {
        1.0 - front * beta_cf(b, a, 1.0 - x) / b
    }
}

/// P(|T| >= |t|) for Student's t with `df` degrees of freedom.
pub fn student_t_two_sided_p(t: f64, df: f64) -> f64 {
    if t.is_infinite() {
        return 0.0;
    }
    regularized_incomplete_beta(df / 2.0, 0.5, df / (df + t * t))
}

pub fn mean(xs: &[f64]) -> Option<f64> {
    (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64)
}

/// Standard deviation with the n - 1 denominator; `None` below two values.
pub fn sample_sd(xs: &[f64]) -> Option<f64> {
    if xs.len() < 2 {
        return None;
    }
    let m = mean(xs)?;
    let ss: f64 = xs.iter().map(|x| (x - m) * (x - m)).sum();
    Some((ss / (xs.len() - 1) as f64).sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Correlation {
    pub r: f64,
    pub p_value: f64,
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Error, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorrelationError {
    #[error("x and y differ in length")]
    LengthMismatch,
    #[error("need at least 3 observations, got {0}")]
    TooFew(usize),
    #[error("one variable is constant")]
    Constant,
    #[error("non-finite input")]
    NonFinite,
}

pub fn pearson(x: &[f64], y: &[f64]) -> Result<Correlation, CorrelationError> {
    if x.len() != y.len() {
        return Err(CorrelationError::LengthMismatch);
    }
    let n = x.len();
    if n < 3 {
        return Err(CorrelationError::TooFew(n));
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(CorrelationError::NonFinite);
    }
    let mx = mean(x).unwrap();
    let my = mean(y).unwrap();
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(CorrelationError::Constant);
    }
    let r = (sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0);
    let df = (n - 2) as f64;
    let p_value = if r.abs() == 1.0 {
        0.0
    } else {
        student_t_two_sided_p(r * (df / (1.0 - r * r)).sqrt(), df)
    };
    Ok(Correlation { r, p_value, n })
}

/// `**` for p < .001, `*` for p < .05.
pub fn stars(p: f64) -> &'static str {
    if p < 0.001 {
        "**"
    } else if p < 0.05 {
        "*"
    } else {
        ""
    }
}

/// Fraction of `distances` strictly below `threshold`.
pub fn acceptance_rate(distances: &[f64], threshold: f64) -> Option<f64> {
    (!distances.is_empty())
        .then(|| distances.iter().filter(|&&d| crate::oracle::accept(threshold, d)).count() as f64 / distances.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    // Reference values computed with scipy.special.betainc, scipy.stats.t and
    // scipy.stats.pearsonr, cross-checked with mpmath at 50 digits.

    #[test]
    fn incomplete_beta_matches_reference() {
        let cases = [
            (0.5, 0.5, 0.3, 0.369_010_119_565_545_37),
            (2.0, 3.0, 0.4, 0.5248),
            (9.0, 0.5, 0.8, 0.048_037_527_740_947_16),
            (50.0, 0.5, 0.99, 0.317_304_397_874_197_37),
            (1.0, 1.0, 0.25, 0.25),
        ];
        for (a, b, x, want) in cases {
            assert_relative_eq!(regularized_incomplete_beta(a, b, x), want, max_relative = 1e-12);
        }
    }

    #[test]
    fn t_p_values_match_reference() {
        assert_relative_eq!(student_t_two_sided_p(2.0, 5.0), 0.101_939_478_829_858_28, max_relative = 1e-12);
        assert_relative_eq!(student_t_two_sided_p(1.0, 18.0), 0.330_564_931_278_184_3, max_relative = 1e-12);
        assert_relative_eq!(student_t_two_sided_p(4.5, 10.0), 0.001_143_105_086_804_065, max_relative = 1e-10);
        assert_eq!(student_t_two_sided_p(0.0, 7.0), 1.0);
    }

    fn vectors() -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let x: Vec<f64> = (0..20).map(|i| (1.3 * i as f64).sin() + 0.1 * i as f64).collect();
        let y: Vec<f64> =
            (0..20).map(|i| (0.7 * i as f64).cos() + 0.05 * (i as f64).powf(1.5) + 0.5 * x[i]).collect();
        let y2: Vec<f64> = (0..20).map(|i| (2.1 * i as f64).cos()).collect();
        (x, y, y2)
    }

    #[test]
    fn pearson_matches_reference() {
        let (x, y, y2) = vectors();
        let c = pearson(&x, &y).unwrap();
        assert!((c.r - 0.652_480_036_400_339_3).abs() < 1e-9);
        assert!((c.p_value - 0.001_819_585_792_160_632_4).abs() < 1e-9);
        let c = pearson(&x, &y2).unwrap();
        assert!((c.r + 0.136_556_638_741_244_19).abs() < 1e-9);
        assert!((c.p_value - 0.565_915_320_745_101_3).abs() < 1e-9);
        assert_eq!(c.n, 20);
    }

    #[test]
    fn pearson_agrees_with_statrs() {
        use statrs::distribution::{ContinuousCDF, StudentsT};
        let (x, y, _) = vectors();
        let c = pearson(&x, &y).unwrap();
        let t = c.r * (18.0 / (1.0 - c.r * c.r)).sqrt();
        let dist = StudentsT::new(0.0, 1.0, 18.0).unwrap();
        assert!((c.p_value - 2.0 * (1.0 - dist.cdf(t.abs()))).abs() < 1e-9);
    }

    #[test]
    fn pearson_edge_cases() {
        let x = [1.0, 2.0, 3.0, 4.0];
        let c = pearson(&x, &x).unwrap();
        assert_eq!((c.r, c.p_value), (1.0, 0.0));
        assert_eq!(pearson(&x, &[2.0; 4]), Err(CorrelationError::Constant));
        assert_eq!(pearson(&x[..2], &x[..2]), Err(CorrelationError::TooFew(2)));
        assert_eq!(pearson(&x, &x[..3]), Err(CorrelationError::LengthMismatch));
    }

    #[test]
    fn sample_sd_examples() {
        assert!((sample_sd(&[40.0, 60.0]).unwrap() - 14.142_135_623_730_951).abs() < 1e-12);
        let votes = [1.0, 1.0, 1.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0];
        assert!((sample_sd(&votes).unwrap() - 0.527_046_276_694_729_9).abs() < 1e-12);
        assert_eq!(sample_sd(&[7.0; 10]), Some(0.0));
        assert_eq!(sample_sd(&[1.0]), None);
    }

    #[test]
    fn stars_follow_convention() {
        assert_eq!(stars(0.0009), "**");
        assert_eq!(stars(0.001), "*");
        assert_eq!(stars(0.049), "*");
        assert_eq!(stars(0.05), "");
    }

    proptest! {
        #[test]
        fn affine_images_correlate_perfectly(
            xs in proptest::collection::vec(-1e3f64..1e3, 3..40),
            a in prop_oneof![-1e3f64..-1e-3, 1e-3f64..1e3],
            b in -1e3f64..1e3,
        ) {
            let spread = xs.iter().cloned().fold(f64::MIN, f64::max) - xs.iter().cloned().fold(f64::MAX, f64::min);
            prop_assume!(spread > 1e-3);
            let ys: Vec<f64> = xs.iter().map(|x| a * x + b).collect();
            let c = pearson(&xs, &ys).unwrap();
            prop_assert!((c.r - a.signum()).abs() <= 1e-12, "r = {}", c.r);
        }

        #[test]
        fn p_shrinks_as_r_grows(n in 4usize..200, r1 in 0.0f64..0.99, r2 in 0.0f64..0.99) {
            let df = (n - 2) as f64;
            let p = |r: f64| student_t_two_sided_p(r * (df / (1.0 - r * r)).sqrt(), df);
            let (lo, hi) = if r1 < r2 { (r1, r2) } else { (r2, r1) };
            prop_assert!(p(hi) <= p(lo) + 1e-15);
        }
    }
}
