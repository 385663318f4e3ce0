//! Estimators with honest error bars for correlated and weighted samples.

use serde::{Deserialize, Serialize};

/// A point estimate with its standard error.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Estimate {
    pub value: f64,
    pub se: f64,
}

impl Estimate {
    pub fn new(value: f64, se: f64) -> Self {
        Self { value, se }
    }

    pub fn exact(value: f64) -> Self {
        Self { value, se: 0.0 }
    }

    /// `self - other` for independent estimates.
    pub fn minus(&self, other: &Estimate) -> Estimate {
        Estimate { value: self.value - other.value, se: self.se.hypot(other.se) }
    }

    /// `|value| / se`, infinite for a nonzero exact value.
    pub fn z_score(&self) -> f64 {
        if self.se > 0.0 {
            self.value.abs() / self.se
        } else if self.value == 0.0 {
            0.0
        } else {
            f64::INFINITY
        }
    }

    pub fn is_finite(&self) -> bool {
        self.value.is_finite() && self.se.is_finite()
    }
}

/// Neumaier-compensated running sum.
#[derive(Debug, Clone, Copy, Default)]
pub struct KahanSum {
    sum: f64,
    comp: f64,
}

impl KahanSum {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.comp += (self.sum - t) + x;
        } else {
            self.comp += (x - t) + self.sum;
        }
        self.sum = t;
    }

    pub fn value(&self) -> f64 {
        self.sum + self.comp
    }
}

impl FromIterator<f64> for KahanSum {
    fn from_iter<I: IntoIterator<Item = f64>>(iter: I) -> Self {
        let mut s = KahanSum::new();
        for x in iter {
            s.add(x);
        }
        s
    }
}

pub fn kahan_sum(xs: impl IntoIterator<Item = f64>) -> f64 {
    xs.into_iter().collect::<KahanSum>().value()
}

pub fn mean(xs: &[f64]) -> f64 {
    kahan_sum(xs.iter().copied()) / xs.len() as f64
}

/// Unbiased sample variance.
pub fn variance(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let m = mean(xs);
    kahan_sum(xs.iter().map(|x| (x - m) * (x - m))) / (xs.len() - 1) as f64
}

/// Mean with the naive standard error `s/√n` (independent samples).
pub fn mean_se(xs: &[f64]) -> (f64, f64) {
    (mean(xs), (variance(xs) / xs.len() as f64).sqrt())
}

/// Integrated autocorrelation time `τ = 1 + 2 Σ ρ(t)`, in units of samples.
///
/// Sokal's adaptive window: the sum is truncated at the first lag `W` with
/// `W ≥ c·τ(W)`, `c = 5`. Returns 1 for constant or very short series.
pub fn integrated_autocorrelation_time(xs: &[f64]) -> f64 {
    let n = xs.len();
    if n < 4 {
        return 1.0;
    }
    let m = mean(xs);
    let c0 = kahan_sum(xs.iter().map(|x| (x - m) * (x - m))) / n as f64;
    if c0 <= 0.0 || !c0.is_finite() {
        return 1.0;
    }
    let mut tau = 1.0;
    for lag in 1..n / 2 {
        let c = kahan_sum((0..n - lag).map(|i| (xs[i] - m) * (xs[i + lag] - m))) / n as f64;
        tau += 2.0 * c / c0;
        if lag as f64 >= 5.0 * tau {
            break;
        }
    }
    tau.max(1.0)
}

/// Mean and autocorrelation-corrected standard error of a time series.
pub fn correlated_mean_se(xs: &[f64]) -> (f64, f64, f64) {
    let tau = integrated_autocorrelation_time(xs);
    let n = xs.len() as f64;
    let var = if xs.len() > 1 { variance(xs) } else { 0.0 };
    (mean(xs), (var * tau / n).sqrt(), tau)
}

/// Weighted mean and a correlation-aware standard error.
///
/// The variance uses the Kish effective sample size `(Σw)²/Σw²`, inflated by
/// `tau` (integrated autocorrelation time of the underlying series).
pub fn weighted_mean_se(values: &[f64], weights: &[f64], tau: f64) -> (f64, f64) {
    let wsum = kahan_sum(weights.iter().copied());
    let m = kahan_sum(values.iter().zip(weights).map(|(v, w)| v * w)) / wsum;
    let var = kahan_sum(values.iter().zip(weights).map(|(v, w)| w * (v - m) * (v - m))) / wsum;
    let w2 = kahan_sum(weights.iter().map(|w| w * w));
    let n_eff = wsum * wsum / w2;
    let se = if n_eff > 1.0 { (var * tau.max(1.0) / (n_eff - 1.0).max(1.0)).sqrt() } else { 0.0 };
    (m, se)
}

/// Ordinary least-squares fit `y ≈ a + b x`; returns `(a, b, se_b)`.
pub fn linear_fit(xs: &[f64], ys: &[f64]) -> (f64, f64, f64) {
    let n = xs.len() as f64;
    let mx = mean(xs);
    let my = mean(ys);
    let sxx = kahan_sum(xs.iter().map(|x| (x - mx) * (x - mx)));
    let sxy = kahan_sum(xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)));
    let b = sxy / sxx;
    let a = my - b * mx;
    let resid = kahan_sum(xs.iter().zip(ys).map(|(x, y)| (y - a - b * x).powi(2)));
    let se_b = if n > 2.0 { (resid / (n - 2.0) / sxx).sqrt() } else { 0.0 };
    (a, b, se_b)
}

/// Two-sample Kolmogorov–Smirnov statistic and asymptotic p-value.
pub fn ks_two_sample(a: &[f64], b: &[f64]) -> (f64, f64) {
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (n, m) = (a.len(), b.len());
    let (mut i, mut j) = (0, 0);
    let mut d: f64 = 0.0;
    while i < n && j < m {
        let x = a[i].min(b[j]);
        while i < n && a[i] <= x {
            i += 1;
        }
        while j < m && b[j] <= x {
            j += 1;
        }
        d = d.max((i as f64 / n as f64 - j as f64 / m as f64).abs());
    }
    let ne = (n * m) as f64 / (n + m) as f64;
    let lam = (ne.sqrt() + 0.12 + 0.11 / ne.sqrt()) * d;
    (d, kolmogorov_q(lam))
}

fn kolmogorov_q(lam: f64) -> f64 {
    if lam < 1e-3 {
        return 1.0;
    }
    let mut sum = 0.0;
    let mut sign = 1.0;
    for k in 1..200 {
        let term = sign * 2.0 * (-2.0 * (k * k) as f64 * lam * lam).exp();
        sum += term;
        if term.abs() < 1e-12 {
            break;
        }
        sign = -sign;
    }
    sum.clamp(0.0, 1.0)
}

/// Delete-one jackknife of a statistic; returns `(estimate, se)`.
///
/// `stat` receives the sample with one entry removed. For large samples this
/// is `O(n²)`; callers that can update sums incrementally should use
/// [`jackknife_from_sums`].
pub fn jackknife(xs: &[f64], stat: impl Fn(&[f64]) -> f64) -> (f64, f64) {
    let n = xs.len();
    let full = stat(xs);
    let mut buf = Vec::with_capacity(n.saturating_sub(1));
    let leave: Vec<f64> = (0..n)
        .map(|i| {
            buf.clear();
            buf.extend(xs.iter().enumerate().filter(|(j, _)| *j != i).map(|(_, x)| *x));
            stat(&buf)
        })
        .collect();
    jackknife_combine(full, &leave)
}

/// Jackknife for statistics of the form `g(mean(x))`.
pub fn jackknife_from_sums(xs: &[f64], g: impl Fn(f64) -> f64) -> (f64, f64) {
    let n = xs.len() as f64;
    let total = kahan_sum(xs.iter().copied());
    let full = g(total / n);
    let leave: Vec<f64> = xs.iter().map(|x| g((total - x) / (n - 1.0))).collect();
    jackknife_combine(full, &leave)
}

fn jackknife_combine(full: f64, leave: &[f64]) -> (f64, f64) {
    let n = leave.len() as f64;
    let lm = mean(leave);
    let var = (n - 1.0) / n * kahan_sum(leave.iter().map(|l| (l - lm) * (l - lm)));
    let bias_corrected = n * full - (n - 1.0) * lm;
    (bias_corrected, var.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_distr::{Distribution, StandardNormal};

    #[test]
    fn kahan_recovers_small_terms() {
        let mut s = KahanSum::new();
        s.add(1e16);
        for _ in 0..1000 {
            s.add(1.0);
        }
        s.add(-1e16);
        assert_eq!(s.value(), 1000.0);
    }

    #[test]
    fn iact_of_ar1_matches_closed_form() {
        // AR(1) with coefficient φ has τ = (1 + φ)/(1 - φ).
        let phi: f64 = 0.8;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let mut x = 0.0;
        let xs: Vec<f64> = (0..200_000)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                x = phi * x + (1.0 - phi * phi).sqrt() * z;
                x
            })
            .collect();
        let tau = integrated_autocorrelation_time(&xs);
        assert!((tau - 9.0).abs() < 0.6, "tau = {tau}");
    }

    #[test]
    fn linear_fit_exact_line() {
        let xs = [0.0, 1.0, 2.0, 3.0];
        let ys: Vec<f64> = xs.iter().map(|x| 2.0 - 0.5 * x).collect();
        let (a, b, se) = linear_fit(&xs, &ys);
        assert!((a - 2.0).abs() < 1e-14 && (b + 0.5).abs() < 1e-14 && se < 1e-12);
    }

    #[test]
    fn ks_same_and_shifted() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let a: Vec<f64> = (0..2000).map(|_| StandardNormal.sample(&mut rng)).collect();
        let b: Vec<f64> = (0..2000).map(|_| StandardNormal.sample(&mut rng)).collect();
        let c: Vec<f64> = b.iter().map(|x: &f64| x + 0.5).collect();
        assert!(ks_two_sample(&a, &b).1 > 0.01);
        assert!(ks_two_sample(&a, &c).1 < 1e-10);
    }

    #[test]
    fn jackknife_of_mean_is_standard_error() {
        let xs = [1.0, 4.0, 2.0, 8.0, 5.0, 7.0];
        let (m, se) = jackknife(&xs, mean);
        let (m2, se2) = mean_se(&xs);
        assert!((m - m2).abs() < 1e-12 && (se - se2).abs() < 1e-12);
        let (m3, se3) = jackknife_from_sums(&xs, |v| v);
        assert!((m3 - m2).abs() < 1e-12 && (se3 - se2).abs() < 1e-12);
    }
}
