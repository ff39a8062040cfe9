//! Summary statistics and the few hypothesis tests the experiments report.

use statrs::distribution::{ChiSquared, ContinuousCDF, StudentsT};

use crate::error::{Error, Result};

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Unbiased sample variance (zero for fewer than two values).
pub fn variance(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let m = mean(xs);
    xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() - 1) as f64
}

/// Standard error of the mean.
pub fn sem(xs: &[f64]) -> f64 {
    (variance(xs) / xs.len() as f64).sqrt()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TTest {
    pub t: f64,
    pub p: f64,
    pub mean_diff: f64,
}

/// One-sided paired t-test of `mean(a - b) > 0`.
pub fn paired_t_greater(a: &[f64], b: &[f64]) -> Result<TTest> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(Error::Shape(format!("paired test needs two equal samples of size >= 2, got {} and {}", a.len(), b.len())));
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let m = mean(&d);
    let se = sem(&d);
    if se == 0.0 {
        let p = if m > 0.0 { 0.0 } else { 1.0 };
        return Ok(TTest { t: m.signum() * f64::INFINITY, p, mean_diff: m });
    }
    let t = m / se;
    let dist = StudentsT::new(0.0, 1.0, (d.len() - 1) as f64).map_err(|e| Error::Numeric(e.to_string()))?;
    Ok(TTest { t, p: 1.0 - dist.cdf(t), mean_diff: m })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LinearFit {
    pub slope: f64,
    pub intercept: f64,
    pub r2: f64,
}

/// Ordinary least squares `y = slope x + intercept`.
pub fn linear_fit(x: &[f64], y: &[f64]) -> Result<LinearFit> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(Error::Shape(format!("linear fit needs two equal samples of size >= 2, got {} and {}", x.len(), y.len())));
    }
    let (mx, my) = (mean(x), mean(y));
    let sxx: f64 = x.iter().map(|v| (v - mx).powi(2)).sum();
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let syy: f64 = y.iter().map(|v| (v - my).powi(2)).sum();
    if sxx == 0.0 {
        return Err(Error::Numeric("linear fit with constant abscissa".into()));
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let ss_res: f64 = x.iter().zip(y).map(|(a, b)| (b - slope * a - intercept).powi(2)).sum();
    let r2 = if syy == 0.0 { 1.0 } else { 1.0 - ss_res / syy };
    Ok(LinearFit { slope, intercept, r2 })
}

#[derive(Clone, Debug, PartialEq)]
pub struct MultinomialCheck {
    /// `(count - n p) / sqrt(n p (1 - p))` per category.
    pub z: Vec<f64>,
    pub chi2: f64,
    pub p_value: f64,
}

impl MultinomialCheck {
    pub fn max_abs_z(&self) -> f64 {
        self.z.iter().fold(0.0, |m, z| m.max(z.abs()))
    }
}

/// Compares category counts with expected probabilities.
pub fn multinomial_check(counts: &[u64], probs: &[f64]) -> Result<MultinomialCheck> {
    if counts.len() != probs.len() || counts.len() < 2 {
        return Err(Error::Shape("multinomial check needs matching counts and probabilities".into()));
    }
    if probs.iter().any(|&p| !(p > 0.0)) {
        return Err(Error::Numeric("expected probabilities must be positive".into()));
    }
    let n = counts.iter().sum::<u64>() as f64;
    let z = counts.iter().zip(probs).map(|(&c, &p)| (c as f64 - n * p) / (n * p * (1.0 - p)).sqrt()).collect();
    let chi2: f64 = counts.iter().zip(probs).map(|(&c, &p)| (c as f64 - n * p).powi(2) / (n * p)).sum();
    let dist = ChiSquared::new((counts.len() - 1) as f64).map_err(|e| Error::Numeric(e.to_string()))?;
    Ok(MultinomialCheck { z, chi2, p_value: 1.0 - dist.cdf(chi2) })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn moments() {
        let xs = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(mean(&xs), 2.5);
        assert!((variance(&xs) - 5.0 / 3.0).abs() < 1e-15);
        assert!((sem(&xs) - (5.0f64 / 12.0).sqrt()).abs() < 1e-15);
    }

    #[test]
    fn paired_test_direction() {
        let a = [1.2, 2.1, 3.3, 4.2, 5.1];
        let b = [1.0, 2.0, 3.0, 4.0, 5.0];
        let r = paired_t_greater(&a, &b).unwrap();
        assert!(r.t > 0.0 && r.p < 0.01);
        let r = paired_t_greater(&b, &a).unwrap();
        assert!(r.p > 0.99);
        // t = mean / sem of the differences; compared with a hand computation
        let d = [0.2, 0.1, 0.3, 0.2, 0.1];
        let t = mean(&d) / sem(&d);
        assert!((paired_t_greater(&a, &b).unwrap().t - t).abs() < 1e-9);
    }

    #[test]
    fn exact_line() {
        let x = [10.0, 20.0, 50.0, 100.0];
        let y: Vec<f64> = x.iter().map(|v| 0.3 * v + 2.0).collect();
        let f = linear_fit(&x, &y).unwrap();
        assert!((f.slope - 0.3).abs() < 1e-12 && (f.intercept - 2.0).abs() < 1e-10 && (f.r2 - 1.0).abs() < 1e-12);
    }

    #[test]
    fn multinomial_at_expectation() {
        let c = multinomial_check(&[250, 250, 500], &[0.25, 0.25, 0.5]).unwrap();
        assert_eq!(c.chi2, 0.0);
        assert!((c.p_value - 1.0).abs() < 1e-12);
        assert_eq!(c.max_abs_z(), 0.0);
        let c = multinomial_check(&[400, 100, 500], &[0.25, 0.25, 0.5]).unwrap();
        assert!(c.p_value < 1e-6);
    }
}
