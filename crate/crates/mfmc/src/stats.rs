//! Scalar statistical primitives: logistic link, log-gamma, regularized
//! incomplete beta, and the pooled two-sample t-test.
//!
//! The special functions are hand-rolled (Lanczos log-gamma, Lentz continued
//! fraction for the incomplete beta) so the p-value path has no external
//! numerical dependency.

use crate::error::{Error, Result};

/// Logistic sigmoid, numerically stable on both tails.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Inverse of [`sigmoid`]; requires `p` in (0, 1).
pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// ln Γ(x) for x > 0 (Lanczos approximation, ~1e-14 relative accuracy).
pub fn ln_gamma(x: f64) -> f64 {
    debug_assert!(x > 0.0);
    const COEF: [f64; 6] = [
        76.180_091_729_471_46,
        -86.505_320_329_416_77,
        24.014_098_240_830_91,
        -1.231_739_572_450_155,
        0.120_865_097_386_617_9e-2,
        -0.539_523_938_495_3e-5,
    ];
    let mut ser = 1.000_000_000_190_015;
    for (i, c) in COEF.iter().enumerate() {
        ser += c / (x + i as f64 + 1.0);
    }
    let tmp = x + 5.5;
    (x + 0.5) * tmp.ln() - tmp + (2.506_628_274_631_000_5 * ser / x).ln()
}

/// Continued fraction for the incomplete beta (modified Lentz).
fn beta_cont_frac(a: f64, b: f64, x: f64) -> f64 {
    const MAX_ITER: usize = 300;
    const EPS: f64 = 3e-16;
    const FPMIN: f64 = 1e-300;

    let qab = a + b;
    let qap = a + 1.0;
    let qam = a - 1.0;
    let mut c = 1.0;
    let mut d = 1.0 - qab * x / qap;
    if d.abs() < FPMIN {
        d = FPMIN;
    }
    d = 1.0 / d;
    let mut h = d;
    for m in 1..=MAX_ITER {
        let m = m as f64;
        let m2 = 2.0 * m;
        let aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if d.abs() < FPMIN {
            d = FPMIN;
        }
        c = 1.0 + aa / c;
        if c.abs() < FPMIN {
            c = FPMIN;
        }
        d = 1.0 / d;
        h *= d * c;
        let aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if d.abs() < FPMIN {
            d = FPMIN;
        }
        c = 1.0 + aa / c;
        if c.abs() < FPMIN {
            c = FPMIN;
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

/// Regularized incomplete beta function I_x(a, b) for a, b > 0 and x in [0, 1].
pub fn incomplete_beta(a: f64, b: f64, x: f64) -> f64 {
    debug_assert!(a > 0.0 && b > 0.0);
    if x <= 0.0 {
        return 0.0;
    }
    if x >= 1.0 {
        return 1.0;
    }
    let ln_front = ln_gamma(a + b) - ln_gamma(a) - ln_gamma(b) + a * x.ln() + b * (1.0 - x).ln();
    let front = ln_front.exp();
    if x < (a + 1.0) / (a + b + 2.0) {
        front * beta_cont_frac(a, b, x) / a
    } else {
        1.0 - front * beta_cont_frac(b, a, 1.0 - x) / b
    }
}

/// Two-sided p-value of a Student t statistic with `df` degrees of freedom:
/// `P(|T| >= |t|) = I_{df/(df+t^2)}(df/2, 1/2)`.
pub fn student_t_two_sided_p(t: f64, df: f64) -> f64 {
    debug_assert!(df > 0.0);
    if !t.is_finite() {
        return 0.0;
    }
    incomplete_beta(df / 2.0, 0.5, df / (df + t * t)).clamp(0.0, 1.0)
}

/// Result of a pooled-variance two-sample t-test.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TwoSampleT {
    pub t: f64,
    pub df: f64,
    /// Two-sided p-value.
    pub p: f64,
}

/// Pooled-variance (Student, not Welch) two-sample t-test of `a` vs `b`.
/// The statistic is `(mean(a) - mean(b)) / sqrt(sp2 * (1/n_a + 1/n_b))` with
/// `sp2` the pooled sample variance. Both groups need at least 2 values.
pub fn two_sample_t(a: &[f64], b: &[f64]) -> Result<TwoSampleT> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::Invalid(format!(
            "two-sample t-test needs at least 2 values per group, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let ma = a.iter().sum::<f64>() / na;
    let mb = b.iter().sum::<f64>() / nb;
    let ssa: f64 = a.iter().map(|v| (v - ma) * (v - ma)).sum();
    let ssb: f64 = b.iter().map(|v| (v - mb) * (v - mb)).sum();
    let df = na + nb - 2.0;
    let sp2 = (ssa + ssb) / df;
    let denom = (sp2 * (1.0 / na + 1.0 / nb)).sqrt();
    let t = if denom == 0.0 {
        if ma == mb {
            0.0
        } else if ma > mb {
            f64::INFINITY
        } else {
            f64::NEG_INFINITY
        }
    } else {
        (ma - mb) / denom
    };
    let p = if t == 0.0 {
        1.0
    } else {
        student_t_two_sided_p(t, df)
    };
    Ok(TwoSampleT { t, df, p })
}

/// Significance stars at the conventional thresholds: `***` p < 0.001,
/// `**` p < 0.01, `*` p < 0.05, `ns` otherwise.
pub fn significance_stars(p: f64) -> &'static str {
    if p < 0.001 {
        "***"
    } else if p < 0.01 {
        "**"
    } else if p < 0.05 {
        "*"
    } else {
        "ns"
    }
}
