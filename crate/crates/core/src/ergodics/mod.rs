//! Invariant measures of the frozen-slow fast process, averaged
//! coefficients and the averaged slow dynamics.

mod averaged;
mod mixing;

pub use averaged::{
    solve_averaged_path, AveragedModel, AveragedPath, CacheStats, DecoupledAverage, EmpiricalAverage,
    GaussianAverage, GaussianMeasure, MeasureCache,
};
pub use mixing::{
    coupling_rate, verify_measure_lipschitz, verify_mixing_rate, CouplingReport, LipschitzCheck, LipschitzVerdict,
    MixingReport,
};

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::functional::Functional;
use crate::model::SlowFastModel;
use crate::path::steps_for;
use crate::rng::{StreamKey, StreamRole};
use crate::simulator::FastStepper;
use crate::spectral::SpectralField;
use crate::stats::{integrated_autocorrelation_time, kahan_sum, weighted_mean_se, Estimate};

/// Where an [`EmpiricalMeasure`] came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeasureProvenance {
    pub frozen: SpectralField,
    pub burn_in: f64,
    pub horizon: f64,
    pub dt: f64,
    pub thinning: usize,
    pub key: StreamKey,
}

/// Weighted sample approximation of `μ^X`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmpiricalMeasure {
    samples: Vec<SpectralField>,
    weights: Vec<f64>,
    provenance: MeasureProvenance,
    /// Integrated autocorrelation time of `⟨Y, e₀⟩`, in samples.
    iact: f64,
}

impl EmpiricalMeasure {
    /// Normalises `weights`; samples are assumed to be in time order.
    pub fn new(samples: Vec<SpectralField>, weights: Vec<f64>, provenance: MeasureProvenance) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::invalid("an empirical measure needs at least one sample"));
        }
        if weights.len() != samples.len() {
            return Err(Error::invalid("one weight per sample is required"));
        }
        if weights.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
            return Err(Error::invalid("weights must be finite and non-negative"));
        }
        let m = samples[0].modes();
        if samples.iter().any(|s| s.modes() != m) {
            return Err(Error::invalid("samples have inconsistent mode counts"));
        }
        let total = kahan_sum(weights.iter().copied());
        if !(total > 0.0) {
            return Err(Error::invalid("weights sum to zero"));
        }
        let weights: Vec<f64> = weights.iter().map(|w| w / total).collect();
        let mode0: Vec<f64> = samples.iter().map(|s| s.coeffs()[0]).collect();
        let iact = integrated_autocorrelation_time(&mode0);
        Ok(Self { samples, weights, provenance, iact })
    }

    /// Reassembles a stored measure without renormalising.
    pub(crate) fn from_parts(
        samples: Vec<SpectralField>,
        weights: Vec<f64>,
        provenance: MeasureProvenance,
        iact: f64,
    ) -> Result<Self> {
        let mut m = Self::new(samples, weights.clone(), provenance)?;
        m.weights = weights;
        m.iact = iact;
        Ok(m)
    }

    pub fn uniform(samples: Vec<SpectralField>, provenance: MeasureProvenance) -> Result<Self> {
        let n = samples.len();
        Self::new(samples, vec![1.0; n], provenance)
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn modes(&self) -> usize {
        self.samples[0].modes()
    }

    pub fn samples(&self) -> &[SpectralField] {
        &self.samples
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn provenance(&self) -> &MeasureProvenance {
        &self.provenance
    }

    pub fn iact(&self) -> f64 {
        self.iact
    }

    /// Weighted mean field.
    pub fn mean(&self) -> SpectralField {
        let mut out = SpectralField::zeros(self.modes());
        for (s, w) in self.samples.iter().zip(&self.weights) {
            out.axpy(*w, s);
        }
        out
    }

    /// Weighted per-mode variances.
    pub fn variances(&self) -> Vec<f64> {
        let mean = self.mean();
        (0..self.modes())
            .map(|k| {
                let m = mean.coeffs()[k];
                kahan_sum(self.samples.iter().zip(&self.weights).map(|(s, w)| w * (s.coeffs()[k] - m).powi(2)))
            })
            .collect()
    }

    /// `∫ g dμ` with an autocorrelation-corrected standard error.
    ///
    /// The correction uses the autocorrelation time of the series `g(Y_i)`
    /// itself, which is the relevant one for the estimator at hand.
    pub fn expect(&self, g: impl FnMut(&SpectralField) -> f64) -> Estimate {
        let values: Vec<f64> = self.samples.iter().map(g).collect();
        let tau = integrated_autocorrelation_time(&values);
        let (value, se) = weighted_mean_se(&values, &self.weights, tau);
        Estimate::new(value, se)
    }
}

/// Settings for [`estimate_invariant_measure`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeasureOptions {
    /// Sampling window after burn-in, in the fast natural time.
    pub horizon: f64,
    /// Defaults to `20/λ`.
    pub burn_in: Option<f64>,
    pub dt: f64,
    /// Keep every `thinning`-th step.
    pub thinning: usize,
    /// Defaults to zero.
    pub fast0: Option<SpectralField>,
}

impl Default for MeasureOptions {
    fn default() -> Self {
        Self { horizon: 500.0, burn_in: None, dt: 0.01, thinning: 10, fast0: None }
    }
}

impl MeasureOptions {
    pub fn with_horizon(mut self, horizon: f64) -> Self {
        self.horizon = horizon;
        self
    }

    pub fn with_burn_in(mut self, burn_in: f64) -> Self {
        self.burn_in = Some(burn_in);
        self
    }

    pub fn with_dt(mut self, dt: f64) -> Self {
        self.dt = dt;
        self
    }

    pub fn with_thinning(mut self, thinning: usize) -> Self {
        self.thinning = thinning;
        self
    }
}

/// Samples the fast process `Y^X` with `X` frozen, after a burn-in.
pub fn estimate_invariant_measure(
    model: &SlowFastModel,
    frozen: &SpectralField,
    opts: &MeasureOptions,
    key: StreamKey,
) -> Result<EmpiricalMeasure> {
    let m = model.modes();
    if frozen.modes() != m {
        return Err(Error::invalid(format!("frozen slow field must have {m} modes")));
    }
    if opts.thinning == 0 {
        return Err(Error::invalid("thinning must be at least 1"));
    }
    let lambda = model.fast_sys.lambda();
    let burn_in = opts.burn_in.unwrap_or(20.0 / lambda);
    if burn_in < 10.0 / lambda {
        warn!("burn-in {burn_in} is shorter than 10 relaxation times (10/lambda = {})", 10.0 / lambda);
    }
    let burn_steps = (burn_in / opts.dt).round() as usize;
    let steps = steps_for(opts.horizon, opts.dt)?;
    let n = steps / opts.thinning;
    if n == 0 {
        return Err(Error::invalid("sampling window shorter than one thinned step"));
    }
    let mut stepper = FastStepper::new(model, 1.0, opts.dt)?;
    let mut rng = key.stream(StreamRole::FastNoise);
    let mut y = match &opts.fast0 {
        Some(f) if f.modes() == m => f.coeffs().to_vec(),
        Some(_) => return Err(Error::invalid(format!("initial fast field must have {m} modes"))),
        None => vec![0.0; m],
    };
    let x = frozen.coeffs();
    for _ in 0..burn_steps {
        stepper.step(x, &mut y, &mut rng);
    }
    let mut samples = Vec::with_capacity(n);
    for _ in 0..n {
        for _ in 0..opts.thinning {
            stepper.step(x, &mut y, &mut rng);
        }
        if !y.iter().all(|v| v.is_finite()) {
            return Err(Error::BlowUp { time: f64::NAN, component: "Y", norm: f64::NAN, threshold: f64::INFINITY });
        }
        samples.push(SpectralField::new(y.clone()));
    }
    let provenance = MeasureProvenance {
        frozen: frozen.clone(),
        burn_in,
        horizon: opts.horizon,
        dt: opts.dt,
        thinning: opts.thinning,
        key,
    };
    EmpiricalMeasure::uniform(samples, provenance)
}

/// `∫ f dμ` and its autocorrelation-corrected standard error.
pub fn average_functional(measure: &EmpiricalMeasure, f: &Functional) -> Estimate {
    if let Functional::Constant { value } = *f {
        return Estimate::exact(value);
    }
    measure.expect(|y| f.eval(y.coeffs()))
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::functional::Profile;
    use crate::model::{Builtin, CoefficientSet};
    use crate::spectral::{Boundary, CovarianceSpec, EigenSystem};
    use std::f64::consts::PI;

    pub(crate) fn linear_model(m: usize, b2: Builtin, cov2: CovarianceSpec) -> SlowFastModel {
        let sys = EigenSystem::laplacian(Boundary::Dirichlet, PI, m).unwrap();
        let set = CoefficientSet::new(
            Builtin::Linear { slow: 0.0, fast: 1.0, offset: 0.0 },
            b2,
            Builtin::Constant { value: 1.0 },
            Builtin::Constant { value: 1.0 },
        );
        SlowFastModel::new(sys, CovarianceSpec::white(m), cov2, set).unwrap()
    }

    #[test]
    fn ou_with_extra_damping() {
        // b₂ = -c·Y: stationary variance λ²/(2(α_k + c)).
        let c = 0.5;
        let model = linear_model(4, Builtin::Linear { slow: 0.0, fast: -c, offset: 0.0 }, CovarianceSpec::white(4));
        let mu = estimate_invariant_measure(
            &model,
            &SpectralField::zeros(4),
            &MeasureOptions::default().with_horizon(4000.0).with_thinning(5),
            StreamKey::new(5, 0, 0),
        )
        .unwrap();
        for k in 0..4 {
            let alpha = ((k + 1) * (k + 1)) as f64;
            let exact = 1.0 / (2.0 * (alpha + c));
            let est = mu.expect(|y| y.coeffs()[k] * y.coeffs()[k]);
            assert!((est.value - exact).abs() < 3.0 * est.se, "mode {k}: {est:?} vs {exact}");
        }
    }

    #[test]
    fn fixed_point_mean() {
        // b₂ = X - Y: mean mode k is X_k/(α_k + 1).
        let model = linear_model(3, Builtin::Linear { slow: 1.0, fast: -1.0, offset: 0.0 }, CovarianceSpec::white(3));
        let x = SpectralField::new(vec![2.0, -1.0, 0.5]);
        let mu = estimate_invariant_measure(
            &model,
            &x,
            &MeasureOptions::default().with_horizon(2000.0),
            StreamKey::new(6, 0, 0),
        )
        .unwrap();
        for k in 0..3 {
            let alpha = ((k + 1) * (k + 1)) as f64;
            let exact = x.coeffs()[k] / (alpha + 1.0);
            let est = average_functional(&mu, &Functional::coordinate(k));
            assert!((est.value - exact).abs() < 3.0 * est.se, "mode {k}: {est:?} vs {exact}");
        }
    }

    #[test]
    fn zero_noise_collapses() {
        let model = linear_model(3, Builtin::Linear { slow: 1.0, fast: 0.0, offset: 0.0 }, CovarianceSpec::zero(3));
        let x = SpectralField::new(vec![1.0, 4.0, 9.0]);
        let mu = estimate_invariant_measure(&model, &x, &MeasureOptions::default().with_horizon(10.0), StreamKey::new(0, 0, 0))
            .unwrap();
        for s in mu.samples() {
            for c in s.coeffs() {
                assert!((c - 1.0).abs() < 1e-6, "{c}");
            }
        }
        assert!(mu.variances().iter().all(|v| *v < 1e-12));
    }

    #[test]
    fn functional_averages() {
        let model = linear_model(2, Builtin::Linear { slow: 0.0, fast: 0.0, offset: 0.0 }, CovarianceSpec::white(2));
        let mu = estimate_invariant_measure(
            &model,
            &SpectralField::zeros(2),
            &MeasureOptions::default().with_horizon(100.0),
            StreamKey::new(1, 0, 0),
        )
        .unwrap();
        assert_eq!(average_functional(&mu, &Functional::Constant { value: 1.0 }), Estimate::exact(1.0));
        let norm = average_functional(&mu, &Functional::ClippedNorm { cap: 10.0, scale: 1.0 });
        assert!((0.0..=10.0).contains(&norm.value));
        let w: f64 = mu.weights().iter().sum();
        assert!((w - 1.0).abs() < 1e-12);
        let tanh = Functional::cylinder(0, Profile::Tanh);
        assert!(average_functional(&mu, &tanh).value.abs() < 0.1);
    }
}
