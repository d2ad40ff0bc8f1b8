//! Small summary statistics used by the experiment harness.

use serde::{Deserialize, Serialize};

/// Two-sided 95% normal quantile.
pub const Z95: f64 = 1.959_963_984_540_054;

/// A point estimate with a 95% interval.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub mean: f64,
    pub lower: f64,
    pub upper: f64,
    pub n: usize,
}

impl Estimate {
    pub fn exact(value: f64) -> Self {
        Self {
            mean: value,
            lower: value,
            upper: value,
            n: 0,
        }
    }

    pub fn contains(&self, value: f64) -> bool {
        self.lower <= value && value <= self.upper
    }
}

/// Sample mean and standard error of the mean (0 for a single value).
pub fn mean_se(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n;
    if values.len() == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Normal-approximation interval around the mean.
pub fn normal_estimate(values: &[f64]) -> Estimate {
    let (mean, se) = mean_se(values);
    Estimate {
        mean,
        lower: mean - Z95 * se,
        upper: mean + Z95 * se,
        n: values.len(),
    }
}

/// Wilson score interval for a binomial proportion.
pub fn wilson(successes: usize, n: usize) -> Estimate {
    if n == 0 {
        return Estimate {
            mean: f64::NAN,
            lower: 0.0,
            upper: 1.0,
            n,
        };
    }
    let nf = n as f64;
    let p = successes as f64 / nf;
    let z2 = Z95 * Z95;
    let denom = 1.0 + z2 / nf;
    let center = (p + z2 / (2.0 * nf)) / denom;
    let half = Z95 * (p * (1.0 - p) / nf + z2 / (4.0 * nf * nf)).sqrt() / denom;
    Estimate {
        mean: p,
        lower: (center - half).max(0.0),
        upper: (center + half).min(1.0),
        n,
    }
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_value_has_zero_se() {
        assert_eq!(mean_se(&[3.5]), (3.5, 0.0));
    }

    #[test]
    fn wilson_reference_values() {
        // statsmodels proportion_confint(25, 100, method="wilson")
        let e = wilson(25, 100);
        assert!((e.lower - 0.175_452_113_622_876_77).abs() < 1e-12, "{}", e.lower);
        assert!((e.upper - 0.343_044_635_480_616_1).abs() < 1e-12, "{}", e.upper);
        let e = wilson(0, 50);
        assert!(e.lower.abs() < 1e-15);
        assert!(e.upper > 0.0);
    }

    #[test]
    fn median_even_and_odd() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
    }
}
