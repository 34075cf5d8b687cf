//! Small statistics toolkit: running moments, Monte Carlo estimates,
//! trend tests and a two-sample Kolmogorov-Smirnov test.

/// Welford running mean/variance accumulator.
#[derive(Debug, Clone, Default)]
pub struct RunningMoments {
    n: u64,
    mean: f64,
    m2: f64,
}

impl RunningMoments {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, x: f64) {
        self.n += 1;
        let delta = x - self.mean;
        self.mean += delta / self.n as f64;
        self.m2 += delta * (x - self.mean);
    }

    pub fn count(&self) -> u64 {
        self.n
    }

    pub fn mean(&self) -> f64 {
        self.mean
    }

    /// Unbiased sample variance.
    pub fn variance(&self) -> f64 {
        if self.n < 2 {
            0.0
        } else {
            self.m2 / (self.n - 1) as f64
        }
    }

    /// Standard error of the mean.
    pub fn std_error(&self) -> f64 {
        if self.n < 2 {
            f64::INFINITY
        } else {
            (self.variance() / self.n as f64).sqrt()
        }
    }

    pub fn estimate(&self) -> Estimate {
        Estimate {
            value: self.mean(),
            std_error: self.std_error(),
        }
    }
}

/// A Monte Carlo value with its statistical standard error.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Estimate {
    pub value: f64,
    pub std_error: f64,
}

impl Estimate {
    pub fn exact(value: f64) -> Self {
        Estimate {
            value,
            std_error: 0.0,
        }
    }

    pub fn scale(self, c: f64) -> Self {
        Estimate {
            value: self.value * c,
            std_error: self.std_error * c.abs(),
        }
    }

    /// Sum with standard errors combined in quadrature (independent parts).
    pub fn add(self, other: Estimate) -> Self {
        Estimate {
            value: self.value + other.value,
            std_error: (self.std_error.powi(2) + other.std_error.powi(2)).sqrt(),
        }
    }

    pub fn sub(self, other: Estimate) -> Self {
        self.add(other.scale(-1.0))
    }
}

/// Result of a one-sided monotone-decrease test over an ordered sweep.
#[derive(Debug, Clone)]
pub struct TrendReport {
    /// z-score of each adjacent decrease (positive = decreasing).
    pub step_z: Vec<f64>,
    /// True when every adjacent step decreases at the given confidence.
    pub decreasing: bool,
}

/// Tests whether `values` (with standard errors) decrease strictly along the
/// sequence, each step at one-sided confidence `confidence` (e.g. 0.95).
pub fn monotone_decreasing_test(
    values: &[f64],
    std_errs: &[f64],
    confidence: f64,
) -> TrendReport {
    assert_eq!(values.len(), std_errs.len());
    let z_crit = normal_quantile(confidence);
    let mut step_z = Vec::new();
    let mut decreasing = true;
    for i in 1..values.len() {
        let se = (std_errs[i - 1].powi(2) + std_errs[i].powi(2)).sqrt();
        let z = if se > 0.0 {
            (values[i - 1] - values[i]) / se
        } else if values[i - 1] > values[i] {
            f64::INFINITY
        } else {
            f64::NEG_INFINITY
        };
        step_z.push(z);
        if !(z > z_crit) {
            decreasing = false;
        }
    }
    TrendReport { step_z, decreasing }
}

/// Standard normal quantile (Acklam's rational approximation, ~1e-9 abs).
pub fn normal_quantile(p: f64) -> f64 {
    assert!(p > 0.0 && p < 1.0);
    const A: [f64; 6] = [
        -3.969683028665376e+01,
        2.209460984245205e+02,
        -2.759285104469687e+02,
        1.383577518672690e+02,
        -3.066479806614716e+01,
        2.506628277459239e+00,
    ];
    const B: [f64; 5] = [
        -5.447609879822406e+01,
        1.615858368580409e+02,
        -1.556989798598866e+02,
        6.680131188771972e+01,
        -1.328068155288572e+01,
    ];
    const C: [f64; 6] = [
        -7.784894002430293e-03,
        -3.223964580411365e-01,
        -2.400758277161838e+00,
        -2.549732539343734e+00,
        4.374664141464968e+00,
        2.938163982698783e+00,
    ];
    const D: [f64; 4] = [
        7.784695709041462e-03,
        3.224671290700398e-01,
        2.445134137142996e+00,
        3.754408661907416e+00,
    ];
    let p_low = 0.02425;
    if p < p_low {
        let q = (-2.0 * p.ln()).sqrt();
        (((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    } else if p <= 1.0 - p_low {
        let q = p - 0.5;
        let r = q * q;
        (((((A[0] * r + A[1]) * r + A[2]) * r + A[3]) * r + A[4]) * r + A[5]) * q
            / (((((B[0] * r + B[1]) * r + B[2]) * r + B[3]) * r + B[4]) * r + 1.0)
    } else {
        -normal_quantile(1.0 - p)
    }
}

/// Two-sample Kolmogorov-Smirnov test; returns (statistic, asymptotic p).
pub fn ks_two_sample(a: &[f64], b: &[f64]) -> (f64, f64) {
    assert!(!a.is_empty() && !b.is_empty());
    let mut xa = a.to_vec();
    let mut xb = b.to_vec();
    xa.sort_by(|u, v| u.partial_cmp(v).unwrap());
    xb.sort_by(|u, v| u.partial_cmp(v).unwrap());
    let (na, nb) = (xa.len(), xb.len());
    let (mut ia, mut ib) = (0usize, 0usize);
    let mut d: f64 = 0.0;
    while ia < na && ib < nb {
        let va = xa[ia];
        let vb = xb[ib];
        let x = va.min(vb);
        while ia < na && xa[ia] <= x {
            ia += 1;
        }
        while ib < nb && xb[ib] <= x {
            ib += 1;
        }
        let fa = ia as f64 / na as f64;
        let fb = ib as f64 / nb as f64;
        d = d.max((fa - fb).abs());
    }
    let ne = (na as f64 * nb as f64) / (na as f64 + nb as f64);
    let lambda = (ne.sqrt() + 0.12 + 0.11 / ne.sqrt()) * d;
    (d, kolmogorov_survival(lambda))
}

/// Q_KS(lambda) = 2 sum_{k>=1} (-1)^{k-1} exp(-2 k^2 lambda^2).
fn kolmogorov_survival(lambda: f64) -> f64 {
    if lambda < 1e-3 {
        return 1.0;
    }
    let mut sum = 0.0;
    let mut sign = 1.0;
    for k in 1..=100 {
        let term = (-2.0 * (k as f64).powi(2) * lambda * lambda).exp();
        sum += sign * term;
        sign = -sign;
        if term < 1e-12 {
            break;
        }
    }
    (2.0 * sum).clamp(0.0, 1.0)
}

/// Least-squares slope of log(y) against log(x).
pub fn log_log_slope(x: &[f64], y: &[f64]) -> f64 {
    assert_eq!(x.len(), y.len());
    let lx: Vec<f64> = x.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = y.iter().map(|v| v.abs().max(1e-300).ln()).collect();
    let n = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let mut num = 0.0;
    let mut den = 0.0;
    for (a, b) in lx.iter().zip(ly.iter()) {
        num += (a - mx) * (b - my);
        den += (a - mx) * (a - mx);
    }
    num / den
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn welford_matches_direct() {
        let xs = [1.0, 2.0, 4.0, 8.0, 16.0];
        let mut acc = RunningMoments::new();
        for &x in &xs {
            acc.push(x);
        }
        let mean = xs.iter().sum::<f64>() / 5.0;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / 4.0;
        assert!((acc.mean() - mean).abs() < 1e-12);
        assert!((acc.variance() - var).abs() < 1e-12);
    }

    #[test]
    fn normal_quantile_round_values() {
        assert!((normal_quantile(0.5)).abs() < 1e-9);
        assert!((normal_quantile(0.95) - 1.6448536269514722).abs() < 1e-6);
        assert!((normal_quantile(0.975) - 1.959963984540054).abs() < 1e-6);
    }

    #[test]
    fn trend_test_detects_decrease() {
        let r = monotone_decreasing_test(&[3.0, 2.0, 1.0], &[0.1, 0.1, 0.1], 0.95);
        assert!(r.decreasing);
        let r = monotone_decreasing_test(&[1.0, 2.0, 3.0], &[0.1, 0.1, 0.1], 0.95);
        assert!(!r.decreasing);
    }

    #[test]
    fn ks_same_distribution_high_p() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(1);
        let a: Vec<f64> = (0..4000).map(|_| rng.gen::<f64>()).collect();
        let b: Vec<f64> = (0..4000).map(|_| rng.gen::<f64>()).collect();
        let (_, p) = ks_two_sample(&a, &b);
        assert!(p > 0.01, "p = {p}");
        let shifted: Vec<f64> = a.iter().map(|x| x + 0.2).collect();
        let (_, p) = ks_two_sample(&a, &shifted);
        assert!(p < 1e-6);
    }

    #[test]
    fn slope_of_power_law() {
        let x = [0.01, 0.02, 0.05, 0.1];
        let y: Vec<f64> = x.iter().map(|v| 3.0 * v * v).collect();
        assert!((log_log_slope(&x, &y) - 2.0).abs() < 1e-9);
    }
}
