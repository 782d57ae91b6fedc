//! Chi-square machinery for the trace verdicts: one-sample goodness-of-fit
//! against a uniform expectation and two-sample homogeneity between runs.
//!
//! P-values come from the regularized incomplete gamma function, computed
//! with the usual series / continued-fraction split.

/// Natural log of the gamma function (Lanczos approximation).
pub fn ln_gamma(x: f64) -> f64 {
    const COEF: [f64; 6] = [
        76.18009172947146,
        -86.50532032941677,
        24.01409824083091,
        -1.231739572450155,
        0.1208650973866179e-2,
        -0.5395239384953e-5,
    ];
    let mut y = x;
    let tmp = x + 5.5;
    let tmp = tmp - (x + 0.5) * tmp.ln();
    let mut ser = 1.000000000190015;
    for c in COEF {
        y += 1.0;
        ser += c / y;
    }
    -tmp + (2.5066282746310005 * ser / x).ln()
}

/// Regularized lower incomplete gamma P(a, x).
pub fn gamma_p(a: f64, x: f64) -> f64 {
    assert!(a > 0.0 && x >= 0.0);
    if x == 0.0 {
        return 0.0;
    }
    if x < a + 1.0 {
        // Series representation.
        let mut ap = a;
        let mut sum = 1.0 / a;
        let mut del = sum;
        for _ in 0..500 {
            ap += 1.0;
            del *= x / ap;
            sum += del;
            if del.abs() < sum.abs() * 1e-15 {
                break;
            }
        }
        sum * (-x + a * x.ln() - ln_gamma(a)).exp()
    } else {
        1.0 - gamma_q_cf(a, x)
    }
}

/// Regularized upper incomplete gamma Q(a, x) by continued fraction
/// (valid for x >= a + 1).
fn gamma_q_cf(a: f64, x: f64) -> f64 {
    let mut b = x + 1.0 - a;
    let mut c = 1.0 / 1e-300;
    let mut d = 1.0 / b;
    let mut h = d;
    for i in 1..500 {
        let an = -(i as f64) * (i as f64 - a);
        b += 2.0;
        d = an * d + b;
        if d.abs() < 1e-300 {
            d = 1e-300;
        }
        c = b + an / c;
        if c.abs() < 1e-300 {
            c = 1e-300;
        }
        d = 1.0 / d;
        let del = d * c;
        h *= del;
        if (del - 1.0).abs() < 1e-15 {
            break;
        }
    }
    (-x + a * x.ln() - ln_gamma(a)).exp() * h
}

/// Upper tail of the chi-square distribution: the p-value of `stat` with
/// `dof` degrees of freedom.
pub fn chi_square_p(stat: f64, dof: f64) -> f64 {
    if stat <= 0.0 {
        return 1.0;
    }
    if stat < dof + 1.0 {
        1.0 - gamma_p(dof / 2.0, stat / 2.0)
    } else {
        gamma_q_cf(dof / 2.0, stat / 2.0)
    }
}

/// Result of a chi-square test.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChiSquare {
    pub statistic: f64,
    pub dof: f64,
    pub p_value: f64,
}

/// Goodness-of-fit of observed bin counts against a uniform expectation.
pub fn uniform_fit(counts: &[u64]) -> ChiSquare {
    assert!(counts.len() > 1, "need at least two bins");
    let total: u64 = counts.iter().sum();
    let expected = total as f64 / counts.len() as f64;
    let statistic: f64 = counts
        .iter()
        .map(|&o| {
            let d = o as f64 - expected;
            d * d / expected
        })
        .sum();
    let dof = (counts.len() - 1) as f64;
    ChiSquare { statistic, dof, p_value: chi_square_p(statistic, dof) }
}

/// Two-sample homogeneity test: do both count vectors come from the same
/// distribution? Bins empty in both samples are skipped.
pub fn two_sample(a: &[u64], b: &[u64]) -> ChiSquare {
    assert_eq!(a.len(), b.len(), "histograms must share bins");
    let na: u64 = a.iter().sum();
    let nb: u64 = b.iter().sum();
    assert!(na > 0 && nb > 0, "both samples must be non-empty");
    let ka = (nb as f64 / na as f64).sqrt();
    let kb = (na as f64 / nb as f64).sqrt();
    let mut statistic = 0.0;
    let mut bins = 0usize;
    for (&oa, &ob) in a.iter().zip(b) {
        if oa == 0 && ob == 0 {
            continue;
        }
        let d = ka * oa as f64 - kb * ob as f64;
        statistic += d * d / (oa + ob) as f64;
        bins += 1;
    }
    let dof = (bins.max(2) - 1) as f64;
    ChiSquare { statistic, dof, p_value: chi_square_p(statistic, dof) }
}
