//! Hypothesis tests and effect sizes for audit populations.
//!
//! - one-sample t-test with Cohen's d (AAI against zero)
//! - Wilcoxon signed-rank on paired samples (CIR of sensor vs user)
//! - Pearson correlation (predicted vs observed joint margins)
//! - exact binomial test (trust-rate significance)

pub mod special;

use serde::{Deserialize, Serialize};

use crate::error::{AuditError, Result};

/// Largest sample size for which the Wilcoxon p-value is exact.
pub const WILCOXON_EXACT_MAX_N: usize = 25;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TestMethod {
    TOneSample,
    WilcoxonExact,
    WilcoxonNormal,
    Pearson,
    BinomialSign,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TestResult {
    pub statistic: f64,
    /// Two-sided.
    pub p_value: f64,
    pub effect_size: Option<f64>,
    pub n: usize,
    pub method: TestMethod,
}

fn check_finite(values: &[f64], what: &str) -> Result<()> {
    if values.iter().any(|v| !v.is_finite()) {
        return Err(AuditError::Data(format!("non-finite value in {what}")));
    }
    Ok(())
}

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// Sample mean and standard deviation (n − 1 denominator).
pub fn mean_std(values: &[f64]) -> Option<(f64, f64)> {
    match values.len() {
        0 => None,
        1 => Some((values[0], 0.0)),
        n => {
            let m = mean(values);
            let ss: f64 = values.iter().map(|v| (v - m) * (v - m)).sum();
            Some((m, (ss / (n - 1) as f64).sqrt()))
        }
    }
}

/// One-sample t-test of `values` against `mu0`; the effect size is Cohen's
/// d = (mean − mu0) / s.
pub fn one_sample_t(values: &[f64], mu0: f64) -> Result<TestResult> {
    let n = values.len();
    if n < 2 {
        return Err(AuditError::DegenerateSample(format!(
            "t-test needs at least 2 values, got {n}"
        )));
    }
    check_finite(values, "t-test sample")?;
    let (m, s) = mean_std(values).expect("n >= 2");
    if s == 0.0 {
        return Err(AuditError::DegenerateSample(
            "t-test sample has zero variance".into(),
        ));
    }
    let t = (m - mu0) / (s / (n as f64).sqrt());
    Ok(TestResult {
        statistic: t,
        p_value: special::student_t_two_sided(t, (n - 1) as f64),
        effect_size: Some((m - mu0) / s),
        n,
        method: TestMethod::TOneSample,
    })
}

/// Wilcoxon signed-rank test on paired observations `(x_i, y_i)`, testing
/// the differences `x_i − y_i` for symmetry about zero.
///
/// Zero differences are dropped and tied magnitudes share their average
/// rank. The statistic is W⁺, the rank sum of positive differences; the
/// effect size is the matched-pairs rank-biserial correlation.
pub fn wilcoxon_signed_rank(pairs: &[(f64, f64)]) -> Result<TestResult> {
    let diffs: Vec<f64> = pairs.iter().map(|(x, y)| x - y).collect();
    check_finite(&diffs, "paired differences")?;
    let nonzero: Vec<f64> = diffs.into_iter().filter(|d| *d != 0.0).collect();
    let n = nonzero.len();
    if n == 0 {
        return Err(AuditError::DegenerateSample(
            "all paired differences are zero".into(),
        ));
    }
    if n < 5 {
        return Err(AuditError::DegenerateSample(format!(
            "signed-rank test needs at least 5 nonzero differences, got {n}"
        )));
    }

    let (doubled_ranks, tie_term) = doubled_ranks(&nonzero);
    let w_plus_doubled: u64 = nonzero
        .iter()
        .zip(&doubled_ranks)
        .filter(|(d, _)| **d > 0.0)
        .map(|(_, r)| *r)
        .sum();
    let total_doubled = (n * (n + 1)) as u64;
    let w_plus = w_plus_doubled as f64 / 2.0;
    let w_minus = (total_doubled - w_plus_doubled) as f64 / 2.0;
    let effect = (w_plus - w_minus) / (w_plus + w_minus);

    let (p_value, method) = if n <= WILCOXON_EXACT_MAX_N {
        let counts = signed_rank_distribution(&doubled_ranks);
        let total: f64 = counts.iter().sum();
        let w = w_plus_doubled as usize;
        let lower: f64 = counts[..=w].iter().sum::<f64>() / total;
        let upper: f64 = counts[w..].iter().sum::<f64>() / total;
        ((2.0 * lower.min(upper)).min(1.0), TestMethod::WilcoxonExact)
    } else {
        let nf = n as f64;
        let mean = nf * (nf + 1.0) / 4.0;
        let var = nf * (nf + 1.0) * (2.0 * nf + 1.0) / 24.0 - tie_term / 48.0;
        let p = if var <= 0.0 {
            1.0
        } else {
            let z = ((w_plus - mean).abs() - 0.5).max(0.0) / var.sqrt();
            (2.0 * special::normal_sf(z)).min(1.0)
        };
        (p, TestMethod::WilcoxonNormal)
    };

    Ok(TestResult {
        statistic: w_plus,
        p_value,
        effect_size: Some(effect),
        n,
        method,
    })
}

/// Twice the average ranks of `|values|` (always integral) and the tie
/// correction `Σ (t³ − t)` over tie groups.
fn doubled_ranks(values: &[f64]) -> (Vec<u64>, f64) {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].abs().total_cmp(&values[b].abs()));
    let mut ranks = vec![0u64; values.len()];
    let mut tie_term = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]].abs() == values[order[i]].abs() {
            j += 1;
        }
        // ranks i+1 ..= j+1 averaged, doubled
        let doubled = (i + 1 + j + 1) as u64;
        for &k in &order[i..=j] {
            ranks[k] = doubled;
        }
        let t = (j - i + 1) as f64;
        tie_term += t * t * t - t;
        i = j + 1;
    }
    (ranks, tie_term)
}

/// Number of sign assignments giving each doubled positive-rank sum.
fn signed_rank_distribution(doubled_ranks: &[u64]) -> Vec<f64> {
    let max: usize = doubled_ranks.iter().sum::<u64>() as usize;
    let mut counts = vec![0.0; max + 1];
    counts[0] = 1.0;
    let mut reach = 0usize;
    for &r in doubled_ranks {
        let r = r as usize;
        for s in (0..=reach).rev() {
            if counts[s] != 0.0 {
                counts[s + r] += counts[s];
            }
        }
        reach += r;
    }
    counts
}

/// Pearson product-moment correlation with a t-based two-sided p-value.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<TestResult> {
    if x.len() != y.len() {
        return Err(AuditError::Shape(format!(
            "pearson inputs of length {} and {}",
            x.len(),
            y.len()
        )));
    }
    let n = x.len();
    if n < 3 {
        return Err(AuditError::DegenerateSample(format!(
            "correlation needs at least 3 pairs, got {n}"
        )));
    }
    check_finite(x, "pearson x")?;
    check_finite(y, "pearson y")?;
    let (mx, my) = (mean(x), mean(y));
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (da, db) = (a - mx, b - my);
        sxy += da * db;
        sxx += da * da;
        syy += db * db;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(AuditError::DegenerateSample(
            "correlation input has zero variance".into(),
        ));
    }
    let r = (sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0);
    let df = (n - 2) as f64;
    let p_value = if r.abs() == 1.0 {
        0.0
    } else {
        let t = r * (df / (1.0 - r * r)).sqrt();
        special::student_t_two_sided(t, df)
    };
    Ok(TestResult {
        statistic: r,
        p_value,
        effect_size: Some(r),
        n,
        method: TestMethod::Pearson,
    })
}

fn ln_binomial_pmf(k: usize, n: usize, p: f64) -> f64 {
    let (kf, nf) = (k as f64, n as f64);
    special::ln_gamma(nf + 1.0) - special::ln_gamma(kf + 1.0) - special::ln_gamma(nf - kf + 1.0)
        + kf * p.ln()
        + (nf - kf) * (1.0 - p).ln()
}

/// Exact two-sided binomial test: sums the probabilities of every outcome
/// no more likely than the observed one.
pub fn binomial_sign_test(successes: usize, n: usize, p0: f64) -> Result<TestResult> {
    if !(p0 > 0.0 && p0 < 1.0) {
        return Err(AuditError::Domain(format!(
            "binomial null probability {p0} outside (0, 1)"
        )));
    }
    if n == 0 {
        return Err(AuditError::DegenerateSample(
            "binomial test with n = 0".into(),
        ));
    }
    if successes > n {
        return Err(AuditError::Domain(format!(
            "{successes} successes out of {n} trials"
        )));
    }
    let observed = ln_binomial_pmf(successes, n, p0);
    // relative slack so outcomes tied with the observed one in exact
    // arithmetic are not lost to rounding
    let cutoff = observed + 1e-7_f64.ln_1p();
    let p: f64 = (0..=n)
        .map(|k| ln_binomial_pmf(k, n, p0))
        .filter(|&lp| lp <= cutoff)
        .map(f64::exp)
        .sum();
    Ok(TestResult {
        statistic: successes as f64,
        p_value: p.min(1.0),
        effect_size: Some(successes as f64 / n as f64 - p0),
        n,
        method: TestMethod::BinomialSign,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn t_zero_variance_is_error() {
        assert!(matches!(
            one_sample_t(&[0.5, 0.5, 0.5], 0.5),
            Err(AuditError::DegenerateSample(_))
        ));
        assert!(one_sample_t(&[1.0], 0.0).is_err());
    }

    #[test]
    fn t_hand_computed() {
        // mean −0.9, s = 0.2, n = 4 → t = −0.9 / 0.1 = −9, d = −4.5
        let r = one_sample_t(&[-1.0, -1.0, -1.0, -0.6], 0.0).unwrap();
        assert!((r.statistic + 9.0).abs() < 1e-12);
        assert!((r.effect_size.unwrap() + 4.5).abs() < 1e-12);
        // closed form for 3 df: p = 1 − (2/π)(atan u + u/(1+u²)), u = |t|/√3
        let u = 9.0 / 3f64.sqrt();
        let a = u.atan() + (u / (1.0 + u * u));
        let p = 1.0 - 2.0 / std::f64::consts::PI * a;
        assert!((r.p_value - p).abs() < 1e-12, "{} vs {p}", r.p_value);
    }

    #[test]
    fn wilcoxon_mirrored_is_one() {
        let pairs: Vec<(f64, f64)> = [1.0, -1.0, 2.0, -2.0, 3.0, -3.0]
            .iter()
            .map(|&d| (d, 0.0))
            .collect();
        let r = wilcoxon_signed_rank(&pairs).unwrap();
        assert_eq!(r.p_value, 1.0);
        assert_eq!(r.method, TestMethod::WilcoxonExact);
    }

    #[test]
    fn wilcoxon_all_positive_six() {
        // only one of 64 sign vectors reaches W+ = 21; two-sided p = 2/64
        let pairs: Vec<(f64, f64)> = (1..=6).map(|i| (i as f64, 0.0)).collect();
        let r = wilcoxon_signed_rank(&pairs).unwrap();
        assert_eq!(r.statistic, 21.0);
        assert!((r.p_value - 2.0 / 64.0).abs() < 1e-15);
        assert_eq!(r.effect_size, Some(1.0));
    }

    #[test]
    fn wilcoxon_degenerate_inputs() {
        assert!(matches!(
            wilcoxon_signed_rank(&[(1.0, 1.0); 8]),
            Err(AuditError::DegenerateSample(_))
        ));
        assert!(wilcoxon_signed_rank(&[(1.0, 0.0); 4]).is_err());
    }

    #[test]
    fn wilcoxon_large_uses_normal() {
        let pairs: Vec<(f64, f64)> = (1..=40)
            .map(|i| (i as f64 * 0.1, 0.05 * i as f64))
            .collect();
        let r = wilcoxon_signed_rank(&pairs).unwrap();
        assert_eq!(r.method, TestMethod::WilcoxonNormal);
        assert!(r.p_value < 1e-6);
    }

    #[test]
    fn pearson_exact_lines() {
        let x = [1.0, 2.0, 3.5, 4.0, 7.0];
        let y: Vec<f64> = x.iter().map(|v| 2.0 * v + 1.0).collect();
        assert!((pearson(&x, &y).unwrap().statistic - 1.0).abs() < 1e-15);
        let y: Vec<f64> = x.iter().map(|v| -v).collect();
        assert!((pearson(&x, &y).unwrap().statistic + 1.0).abs() < 1e-15);
        assert!(pearson(&x, &[1.0; 5]).is_err());
        assert!(pearson(&x, &[1.0; 4]).is_err());
    }

    #[test]
    fn binomial_examples() {
        let r = binomial_sign_test(40, 80, 0.5).unwrap();
        assert!(r.p_value >= 0.5);
        let r = binomial_sign_test(0, 80, 0.5).unwrap();
        let expected = 2.0 * 0.5f64.powi(80);
        assert!((r.p_value / expected - 1.0).abs() < 1e-9);
        assert!((r.p_value - 1.65e-24).abs() < 0.01e-24);
        assert!(binomial_sign_test(72, 80, 0.25).unwrap().p_value < 1e-10);
        assert!(binomial_sign_test(1, 2, 0.0).is_err());
        assert!(binomial_sign_test(1, 2, 1.0).is_err());
        assert!(binomial_sign_test(3, 2, 0.5).is_err());
    }
}
