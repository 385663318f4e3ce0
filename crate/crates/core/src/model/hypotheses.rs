//! Numerical verification of the standing hypotheses.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use statrs::function::gamma::gamma;

use super::coefficients::{Coefficient, CoefficientSet};
use crate::error::{Error, Result};
use crate::quadrature::integrate;
use crate::spectral::{CovarianceSpec, EigenSystem};

/// Series exponents `β_i` and Hölder exponents `ρ_i`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HypothesisParams {
    pub beta1: f64,
    pub rho1: f64,
    pub beta2: f64,
    pub rho2: f64,
}

impl Default for HypothesisParams {
    fn default() -> Self {
        Self { beta1: 0.75, rho1: 4.0, beta2: 0.75, rho2: 4.0 }
    }
}

/// `Σ_k α_k^{-β} |e_k|_0²`: the retained partial sum plus tail information.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SeriesEstimate {
    pub partial: f64,
    /// Euler–Maclaurin estimate of the omitted tail.
    pub tail_estimate: f64,
    /// Upper bound on the omitted tail.
    pub tail_bound: f64,
    /// `partial + tail_estimate`, or `+∞` when the series diverges.
    pub value: f64,
    pub converged: bool,
}

/// Evaluates `ζ = Σ_k α_k^{-β} |e_k|_0²` for the eigensystem.
///
/// Beyond the truncation the eigenvalues are extrapolated as
/// `α_k ≈ c (k+1)²` with `c` fitted to the last retained eigenvalue and the
/// sup norms are held at their last value. The series converges iff
/// `2β > 1`.
pub fn zeta_series(sys: &EigenSystem, beta: f64) -> SeriesEstimate {
    let m = sys.modes();
    let partial: f64 = sys
        .alphas()
        .iter()
        .zip(sys.sup_norms())
        .map(|(a, s)| a.powf(-beta) * s * s)
        .sum();
    let p = 2.0 * beta;
    if p <= 1.0 {
        return SeriesEstimate {
            partial,
            tail_estimate: f64::INFINITY,
            tail_bound: f64::INFINITY,
            value: f64::INFINITY,
            converged: false,
        };
    }
    let mf = m as f64;
    let c = sys.alphas()[m - 1] / (mf * mf);
    let s = sys.sup_norms()[m - 1];
    let scale = s * s * c.powf(-beta);
    // Terms f(j) = scale·j^{-p} for j = M+1, M+2, ...
    let a = mf + 0.5;
    let tail_estimate = scale * (a.powf(1.0 - p) / (p - 1.0) - p * a.powf(-p - 1.0) / 24.0);
    let tail_bound = scale * mf.powf(1.0 - p) / (p - 1.0);
    SeriesEstimate { partial, tail_estimate, tail_bound, value: partial + tail_estimate, converged: true }
}

/// `∫₀^∞ s^{-a} e^{-b s} ds` by adaptive quadrature; returns `(value, error)`.
///
/// The substitution `s = t^{1/(1-a)}` removes the endpoint singularity.
pub fn singular_laplace_integral(a: f64, b: f64) -> Result<(f64, f64)> {
    if !(0.0..1.0).contains(&a) || !(b > 0.0) {
        return Err(Error::invalid(format!("integral needs 0 ≤ a < 1 and b > 0, got a = {a}, b = {b}")));
    }
    let p = 1.0 / (1.0 - a);
    let f = |t: f64| p * (-b * t.powf(p)).exp();
    let knee = b.powf(-1.0 / p);
    let end = (60.0 / b).powf(1.0 / p);
    let (v1, e1) = integrate(f, 0.0, knee, 1e-300, 1e-14);
    let (v2, e2) = integrate(f, knee, end, 1e-300, 1e-14);
    Ok((v1 + v2, e1 + e2))
}

/// The same integral in closed form, `b^{a-1} Γ(1-a)`.
pub fn singular_laplace_closed_form(a: f64, b: f64) -> f64 {
    b.powf(a - 1.0) * gamma(1.0 - a)
}

/// One pass/fail line of a [`HypothesisReport`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HypothesisCheck {
    pub name: String,
    pub pass: bool,
    /// Positive when the check passes with room to spare.
    pub margin: f64,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HypothesisReport {
    pub lambda: f64,
    pub kappa1: f64,
    pub kappa2: f64,
    pub zeta1: SeriesEstimate,
    pub zeta2: SeriesEstimate,
    pub k2: f64,
    pub integral_value: f64,
    pub integral_closed_form: f64,
    pub integral_error: f64,
    pub frak_l: f64,
    pub checks: Vec<HypothesisCheck>,
    pub lipschitz: LipschitzProbe,
}

impl HypothesisReport {
    pub fn pass(&self) -> bool {
        self.checks.iter().all(|c| c.pass)
    }

    pub fn check(&self, name: &str) -> Option<&HypothesisCheck> {
        self.checks.iter().find(|c| c.name == name)
    }

    pub fn failures(&self) -> Vec<&HypothesisCheck> {
        self.checks.iter().filter(|c| !c.pass).collect()
    }
}

/// Compact box of scalar arguments `(X, Y)` used by the sampling checks.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SampleBox {
    pub slow: (f64, f64),
    pub fast: (f64, f64),
}

impl Default for SampleBox {
    fn default() -> Self {
        Self { slow: (-10.0, 10.0), fast: (-10.0, 10.0) }
    }
}

const CHECK_SAMPLES: usize = 4096;
const CHECK_SEED: u64 = 0x5eed_4b1d;

/// Runs every check. A pure function of its arguments.
pub fn check_hypotheses(
    coeffs: &CoefficientSet,
    sys1: &EigenSystem,
    sys2: &EigenSystem,
    cov1: &CovarianceSpec,
    cov2: &CovarianceSpec,
    params: &HypothesisParams,
) -> Result<HypothesisReport> {
    for (name, v) in [("beta1", params.beta1), ("beta2", params.beta2)] {
        if !(v > 0.0) {
            return Err(Error::invalid(format!("{name} must be positive, got {v}")));
        }
    }
    for (name, v) in [("rho1", params.rho1), ("rho2", params.rho2)] {
        if !(v > 2.0) {
            return Err(Error::invalid(format!("{name} must exceed 2, got {v}")));
        }
    }
    let lambda = sys1.lambda().min(sys2.lambda());
    let kappa1 = cov1.kappa(sys1);
    let kappa2 = cov2.kappa(sys2);
    let zeta1 = zeta_series(sys1, params.beta1);
    let zeta2 = zeta_series(sys2, params.beta2);
    let a1 = params.beta1 * (params.rho1 - 2.0) / params.rho1;
    let a2 = params.beta2 * (params.rho2 - 2.0) / params.rho2;

    let mut checks = Vec::new();
    checks.push(HypothesisCheck {
        name: "dissipativity".into(),
        pass: lambda > 0.0,
        margin: lambda,
        detail: format!("inf alpha = {lambda}"),
    });
    let series_ok = zeta1.converged && zeta2.converged && kappa1.is_finite() && kappa2.is_finite();
    checks.push(HypothesisCheck {
        name: "series".into(),
        pass: series_ok && a1 < 1.0 && a2 < 1.0,
        margin: (1.0 - a1.max(a2)).min(if series_ok { 1.0 } else { -1.0 }),
        detail: format!(
            "zeta1 = {}, zeta2 = {}, kappa1 = {kappa1}, kappa2 = {kappa2}, beta(rho-2)/rho = ({a1}, {a2})",
            zeta1.value, zeta2.value
        ),
    });

    let l_b2 = coeffs.b2.lipschitz_fast();
    let l_s2 = coeffs.sigma2.lipschitz_fast();
    let xs = sample_positions(sys1.length());
    let origin_b2 = xs.iter().map(|&x| coeffs.b2.eval(x, 0.0, 0.0).abs()).fold(0.0, f64::max);
    let origin_s2 = xs.iter().map(|&x| coeffs.sigma2.eval(x, 0.0, 0.0).abs()).fold(0.0, f64::max);
    checks.push(HypothesisCheck {
        name: "fast_origin_bounded".into(),
        pass: origin_b2.is_finite() && origin_s2.is_finite(),
        margin: if origin_b2.is_finite() && origin_s2.is_finite() { 1.0 } else { -1.0 },
        detail: format!("sup|b2(x,0,0)| = {origin_b2}, sup|sigma2(x,0,0)| = {origin_s2}"),
    });
    checks.push(HypothesisCheck {
        name: "fast_drift_contraction".into(),
        pass: l_b2 < lambda,
        margin: lambda - l_b2,
        detail: format!("L^Y_b2 = {l_b2} against lambda = {lambda}"),
    });

    let boxes = SampleBox::default();
    let c = coeffs.constants.sigma2_bound;
    let mut worst_s2: f64 = 0.0;
    let mut worst_growth: f64 = 0.0;
    let mut sigma1_sq = (f64::INFINITY, 0.0f64);
    let mut rng = ChaCha8Rng::seed_from_u64(CHECK_SEED);
    let growth = &coeffs.constants;
    for _ in 0..CHECK_SAMPLES {
        let x = rng.gen_range(0.0..=sys1.length());
        let sx = rng.gen_range(boxes.slow.0..=boxes.slow.1);
        let fy = rng.gen_range(boxes.fast.0..=boxes.fast.1);
        worst_s2 = worst_s2.max(coeffs.sigma2.eval(x, sx, fy).abs() / (1.0 + sx.abs()));
        let lhs = coeffs.b1.eval(x, sx, fy).abs() + coeffs.sigma1.eval(x, sx, fy).abs();
        worst_growth = worst_growth.max(lhs / (1.0 + sx.abs() + fy.abs().powf(growth.growth_zeta)));
        let s1 = coeffs.sigma1.eval(x, sx, fy);
        sigma1_sq = (sigma1_sq.0.min(s1 * s1), sigma1_sq.1.max(s1 * s1));
    }
    checks.push(HypothesisCheck {
        name: "sigma2_growth".into(),
        pass: worst_s2 <= c * (1.0 + 1e-12),
        margin: c - worst_s2,
        detail: format!("sampled sup |sigma2|/(1+|X|) = {worst_s2}, declared c = {c}"),
    });

    let (integral_value, integral_closed_form, integral_error) = if a2 < 1.0 {
        let b = lambda * (params.rho2 + 2.0) / params.rho2;
        let (iv, ie) = singular_laplace_integral(a2, b)?;
        (iv, singular_laplace_closed_form(a2, b), ie)
    } else {
        (f64::INFINITY, f64::INFINITY, f64::INFINITY)
    };
    let (frak_l, k2) = if a2 < 1.0 && zeta2.converged {
        let k2 = (params.beta2 / std::f64::consts::E).powf(a2)
            * zeta2.value.powf((params.rho2 - 2.0) / params.rho2)
            * kappa2.powf(2.0 / params.rho2);
        (l_b2 / lambda + (k2 * l_s2 * l_s2 * integral_value).sqrt(), k2)
    } else {
        (f64::INFINITY, f64::INFINITY)
    };
    checks.push(HypothesisCheck {
        name: "fast_contraction_constant".into(),
        pass: frak_l < 1.0,
        margin: 1.0 - frak_l,
        detail: format!("frak_L = {frak_l} (K2 = {k2}, integral = {integral_value})"),
    });

    let zeta_cap = 1.0 - a1;
    let zeta_ok = growth.growth_zeta >= 0.0 && growth.growth_zeta < zeta_cap;
    checks.push(HypothesisCheck {
        name: "slow_growth".into(),
        pass: zeta_ok && worst_growth <= growth.growth_c * (1.0 + 1e-12),
        margin: (zeta_cap - growth.growth_zeta).min(growth.growth_c - worst_growth),
        detail: format!(
            "zeta = {} (< {zeta_cap} required), sampled (|b1|+|sigma1|)/(1+|X|+|Y|^zeta) = {worst_growth}, declared C = {}",
            growth.growth_zeta, growth.growth_c
        ),
    });

    let sigma1_y_free = !coeffs.sigma1.depends_on_fast();
    let (ell_pass, ell_margin, ell_detail) = match coeffs.sigma1_bounds() {
        Some((c0, c1)) => {
            let ok = c0 > 0.0 && sigma1_sq.0 >= c0 * (1.0 - 1e-12) && sigma1_sq.1 <= c1 * (1.0 + 1e-12);
            (
                ok || sigma1_y_free,
                (sigma1_sq.0 - c0).min(c1 - sigma1_sq.1),
                format!("sampled sigma1^2 in [{}, {}], declared [{c0}, {c1}]", sigma1_sq.0, sigma1_sq.1),
            )
        }
        None => (
            sigma1_y_free,
            if sigma1_y_free { 0.0 } else { -1.0 },
            "no bounds declared for sigma1^2".to_string(),
        ),
    };
    checks.push(HypothesisCheck {
        name: "sigma1_rate_path".into(),
        pass: ell_pass,
        margin: ell_margin,
        detail: format!("{ell_detail}; sigma1 independent of Y: {sigma1_y_free}"),
    });

    let lipschitz = probe_lipschitz(coeffs, sys1.length(), &boxes, CHECK_SAMPLES, CHECK_SEED)?;
    checks.push(HypothesisCheck {
        name: "declared_lipschitz".into(),
        pass: lipschitz.pass(),
        margin: lipschitz.entries.iter().map(|e| e.declared - e.observed).fold(f64::INFINITY, f64::min),
        detail: lipschitz
            .entries
            .iter()
            .filter(|e| e.violation.is_some())
            .map(|e| format!("{} in {:?}: observed {} > declared {}", e.coefficient, e.variable, e.observed, e.declared))
            .collect::<Vec<_>>()
            .join("; "),
    });

    Ok(HypothesisReport {
        lambda,
        kappa1,
        kappa2,
        zeta1,
        zeta2,
        k2,
        integral_value,
        integral_closed_form,
        integral_error,
        frak_l,
        checks,
        lipschitz,
    })
}

fn sample_positions(length: f64) -> Vec<f64> {
    (0..=256).map(|j| length * j as f64 / 256.0).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Argument {
    Slow,
    Fast,
}

/// A pair of arguments whose difference quotient exceeds the declared constant.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ViolatingPair {
    pub x: f64,
    pub first: f64,
    pub second: f64,
    /// Value of the argument held fixed.
    pub other: f64,
    pub quotient: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeEntry {
    pub coefficient: String,
    pub variable: Argument,
    pub declared: f64,
    pub observed: f64,
    pub violation: Option<ViolatingPair>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LipschitzProbe {
    pub entries: Vec<ProbeEntry>,
}

impl LipschitzProbe {
    pub fn pass(&self) -> bool {
        self.entries.iter().all(|e| e.violation.is_none())
    }

    pub fn entry(&self, coefficient: &str, variable: Argument) -> Option<&ProbeEntry> {
        self.entries.iter().find(|e| e.coefficient == coefficient && e.variable == variable)
    }
}

/// Largest difference quotient seen for each declared Lipschitz constant.
///
/// Half the pairs are drawn independently over the box, half as close
/// neighbours (separation between `1e-4` and `1e-1` of the box width) so
/// local slopes are resolved too. Deterministic given `seed`.
pub fn probe_lipschitz(
    coeffs: &CoefficientSet,
    length: f64,
    sample_box: &SampleBox,
    samples: usize,
    seed: u64,
) -> Result<LipschitzProbe> {
    if samples < 2 {
        return Err(Error::invalid("probe_lipschitz needs at least 2 samples"));
    }
    let named: [(&str, &dyn Coefficient); 4] = [
        ("b1", coeffs.b1.as_ref()),
        ("b2", coeffs.b2.as_ref()),
        ("sigma1", coeffs.sigma1.as_ref()),
        ("sigma2", coeffs.sigma2.as_ref()),
    ];
    let mut entries = Vec::with_capacity(8);
    for (ci, (name, coef)) in named.iter().enumerate() {
        for (vi, variable) in [Argument::Slow, Argument::Fast].into_iter().enumerate() {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream((ci * 2 + vi) as u64);
            let declared = match variable {
                Argument::Slow => coef.lipschitz_slow(),
                Argument::Fast => coef.lipschitz_fast(),
            };
            let (range, other_range) = match variable {
                Argument::Slow => (sample_box.slow, sample_box.fast),
                Argument::Fast => (sample_box.fast, sample_box.slow),
            };
            let width = range.1 - range.0;
            let mut observed: f64 = 0.0;
            let mut violation: Option<ViolatingPair> = None;
            for i in 0..samples {
                let x = rng.gen_range(0.0..=length);
                let other = rng.gen_range(other_range.0..=other_range.1);
                let first = rng.gen_range(range.0..=range.1);
                let second = if i % 2 == 0 {
                    rng.gen_range(range.0..=range.1)
                } else {
                    let sep = width * 10f64.powf(rng.gen_range(-4.0..=-1.0));
                    if rng.gen::<bool>() { first + sep } else { first - sep }
                };
                if first == second {
                    continue;
                }
                let eval = |v: f64| match variable {
                    Argument::Slow => coef.eval(x, v, other),
                    Argument::Fast => coef.eval(x, other, v),
                };
                let q = (eval(first) - eval(second)).abs() / (first - second).abs();
                if q > observed {
                    observed = q;
                }
                if q > declared + 1e-9 && violation.is_none_or(|v| q > v.quotient) {
                    violation = Some(ViolatingPair { x, first, second, other, quotient: q });
                }
            }
            entries.push(ProbeEntry { coefficient: name.to_string(), variable, declared, observed, violation });
        }
    }
    Ok(LipschitzProbe { entries })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Builtin, FnCoefficient};
    use crate::spectral::Boundary;
    use std::f64::consts::PI;

    fn dirichlet(m: usize) -> EigenSystem {
        EigenSystem::laplacian(Boundary::Dirichlet, PI, m).unwrap()
    }

    fn ou_set() -> CoefficientSet {
        CoefficientSet::new(
            Builtin::Constant { value: 0.0 },
            Builtin::Linear { slow: 0.0, fast: -0.5, offset: 0.0 },
            Builtin::Constant { value: 1.0 },
            Builtin::Constant { value: 1.0 },
        )
    }

    #[test]
    fn zeta_with_unit_exponent_is_pi_over_three() {
        // (2/π) Σ 1/k² = π/3
        for m in [8, 64, 512] {
            let z = zeta_series(&dirichlet(m), 1.0);
            assert!((z.value - PI / 3.0).abs() < 1e-6, "M = {m}: {}", z.value);
            assert!(z.tail_bound >= PI / 3.0 - z.partial);
        }
    }

    #[test]
    fn zeta_diverges_for_small_beta() {
        let z = zeta_series(&dirichlet(16), 0.5);
        assert!(!z.converged && z.value.is_infinite());
    }

    #[test]
    fn integral_matches_gamma_form() {
        // β₂ = 0.5, ρ₂ = 4, λ = 1: a = 1/4, b = 3/2
        let (v, _) = singular_laplace_integral(0.25, 1.5).unwrap();
        let closed = 1.5f64.powf(-0.75) * gamma(0.75);
        assert!((v - closed).abs() / closed < 1e-10);
        assert!((closed - 0.90405).abs() < 5e-5);
        for a in [0.01, 0.3, 0.6, 0.9, 0.949] {
            for b in [0.2, 1.0, 7.5] {
                let (v, _) = singular_laplace_integral(a, b).unwrap();
                let c = singular_laplace_closed_form(a, b);
                assert!((v - c).abs() / c < 1e-10, "a = {a}, b = {b}: {v} vs {c}");
            }
        }
    }

    #[test]
    fn integral_reported_when_zeta_diverges() {
        let sys = dirichlet(8);
        let cov = CovarianceSpec::white(8);
        let params = HypothesisParams { beta2: 0.5, ..HypothesisParams::default() };
        let r = check_hypotheses(&ou_set(), &sys, &sys, &cov, &cov, &params).unwrap();
        assert!((r.integral_value - r.integral_closed_form).abs() < 1e-10 * r.integral_closed_form);
        assert!(r.frak_l.is_infinite());
    }

    #[test]
    fn sigma2_free_of_y_reduces_to_drift_ratio() {
        let sys = dirichlet(8);
        let cov = CovarianceSpec::white(8);
        let r = check_hypotheses(&ou_set(), &sys, &sys, &cov, &cov, &HypothesisParams::default()).unwrap();
        assert_eq!(r.frak_l, 0.5);
        assert!(r.check("fast_contraction_constant").unwrap().pass);
        assert!(r.pass(), "{:?}", r.failures());
        assert!((r.integral_value - r.integral_closed_form).abs() / r.integral_closed_form < 1e-10);
    }

    #[test]
    fn report_is_deterministic() {
        let sys = dirichlet(8);
        let cov = CovarianceSpec::white(8);
        let set = ou_set();
        let p = HypothesisParams::default();
        let a = check_hypotheses(&set, &sys, &sys, &cov, &cov, &p).unwrap();
        let b = check_hypotheses(&set, &sys, &sys, &cov, &cov, &p).unwrap();
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
    }

    #[test]
    fn y_dependent_sigma2_enters_frak_l() {
        let sys = dirichlet(8);
        let cov = CovarianceSpec::white(8);
        let mut set = ou_set();
        set.sigma2 = std::sync::Arc::new(Builtin::SineMultiplicative {
            base: 1.0,
            amplitude: 0.9,
            slow_gain: 0.0,
            fast_gain: 1.0,
            spatial: 0.0,
        });
        let r = check_hypotheses(&set, &sys, &sys, &cov, &cov, &HypothesisParams::default()).unwrap();
        let expect = 0.5 + (r.k2 * 0.81 * r.integral_value).sqrt();
        assert!((r.frak_l - expect).abs() < 1e-14);
        assert_eq!(r.check("fast_contraction_constant").unwrap().pass, r.frak_l < 1.0);
    }

    #[test]
    fn lipschitz_probe_examples() {
        let set = CoefficientSet::new(
            Builtin::Tanh { amplitude: 1.0, slow_gain: 0.0, fast_gain: 1.0, slow_linear: 0.0, offset: 0.0 },
            Builtin::Linear { slow: 0.0, fast: -1.0, offset: 0.0 },
            Builtin::Constant { value: 1.0 },
            Builtin::Constant { value: 1.0 },
        );
        let p = probe_lipschitz(&set, PI, &SampleBox::default(), 2000, 7).unwrap();
        assert!(p.pass());
        assert!(p.entry("b2", Argument::Fast).unwrap().observed <= 1.0 + 1e-9);
        let s1 = [Argument::Slow, Argument::Fast].map(|v| p.entry("sigma1", v).unwrap().observed);
        assert_eq!(s1, [0.0, 0.0]);
        // Dense scan of tanh secant slopes never exceeds 1.
        let tanh_obs = p.entry("b1", Argument::Fast).unwrap().observed;
        let mut scan: f64 = 0.0;
        let grid: Vec<f64> = (0..=4000).map(|i| -10.0 + 20.0 * i as f64 / 4000.0).collect();
        for w in grid.windows(2) {
            scan = scan.max((w[1].tanh() - w[0].tanh()) / (w[1] - w[0]));
        }
        assert!(scan <= 1.0 && tanh_obs <= 1.0 + 1e-12 && tanh_obs > 0.9);
        assert_eq!(p, probe_lipschitz(&set, PI, &SampleBox::default(), 2000, 7).unwrap());
    }

    #[test]
    fn lipschitz_probe_flags_understated_constant() {
        let liar = FnCoefficient::new("liar", 0.5, 0.0, |_, x: f64, _| 2.0 * x);
        let set = CoefficientSet::new(
            liar,
            Builtin::Constant { value: 0.0 },
            Builtin::Constant { value: 1.0 },
            Builtin::Constant { value: 1.0 },
        );
        let p = probe_lipschitz(&set, PI, &SampleBox::default(), 100, 1).unwrap();
        let e = p.entry("b1", Argument::Slow).unwrap();
        assert!(!p.pass() && e.violation.is_some());
        assert!((e.observed - 2.0).abs() < 1e-9);
    }
}
