//! Empirical mixing of the frozen-slow fast process.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{estimate_invariant_measure, average_functional, MeasureOptions};
use crate::error::{Error, Result};
use crate::functional::Functional;
use crate::model::SlowFastModel;
use crate::path::steps_for;
use crate::rng::{StreamKey, StreamRole};
use crate::simulator::FastStepper;
use crate::spectral::SpectralField;
use crate::stats::{kahan_sum, linear_fit, mean, Estimate};

/// RMS error of time averages against the long-run value, per horizon.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixingReport {
    pub times: Vec<f64>,
    pub rms: Vec<Estimate>,
    pub reference: f64,
    pub replicas: usize,
    /// Fitted `d log RMS / d log T`; `None` when every error vanishes.
    pub slope: Option<f64>,
    pub slope_se: f64,
    pub pass: bool,
}

/// Accepted range for the fitted slope; the prediction is `-1/2`.
pub const MIXING_SLOPE_RANGE: (f64, f64) = (-0.65, -0.4);

/// Time averages `(1/T)∫₀^T f(Y^X(t))dt` over `replicas` runs, compared with
/// `reference` (estimated from one long run when `None`).
#[allow(clippy::too_many_arguments)]
pub fn verify_mixing_rate(
    model: &SlowFastModel,
    frozen: &SpectralField,
    f: &Functional,
    times: &[f64],
    replicas: usize,
    dt: f64,
    reference: Option<f64>,
    key: StreamKey,
) -> Result<MixingReport> {
    if replicas < 16 {
        return Err(Error::invalid(format!("mixing fits need at least 16 replicas, got {replicas}")));
    }
    if times.len() < 2 || times.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(Error::invalid("need at least two increasing horizons"));
    }
    let ratio = times[1] / times[0];
    if times.windows(2).any(|w| ((w[1] / w[0]) / ratio - 1.0).abs() > 1e-9) {
        return Err(Error::invalid("horizons must form a geometric sequence"));
    }
    f.validate(model.modes())?;
    let marks: Vec<usize> = times.iter().map(|t| steps_for(*t, dt)).collect::<Result<_>>()?;
    let reference = match reference {
        Some(r) => r,
        None => {
            let long = times.last().unwrap() * 64.0;
            let opts = MeasureOptions::default().with_horizon(long).with_dt(dt).with_thinning(1);
            let mu = estimate_invariant_measure(model, frozen, &opts, key.with_replica(u64::MAX))?;
            average_functional(&mu, f).value
        }
    };
    let errors: Vec<Vec<f64>> = (0..replicas)
        .into_par_iter()
        .map(|r| -> Result<Vec<f64>> {
            let mut stepper = FastStepper::new(model, 1.0, dt)?;
            let mut rng = key.with_replica(r as u64).stream(StreamRole::FastNoise);
            let mut y = vec![0.0; model.modes()];
            let mut out = Vec::with_capacity(marks.len());
            let mut sum = crate::stats::KahanSum::new();
            let mut n = 0;
            for (&mark, &t) in marks.iter().zip(times) {
                while n < mark {
                    sum.add(f.eval(&y) * dt);
                    stepper.step(frozen.coeffs(), &mut y, &mut rng);
                    n += 1;
                }
                out.push(sum.value() / t - reference);
            }
            Ok(out)
        })
        .collect::<Result<_>>()?;
    let rms: Vec<Estimate> = (0..times.len())
        .map(|j| {
            let sq: Vec<f64> = errors.iter().map(|e| e[j] * e[j]).collect();
            let ms = mean(&sq);
            let se_ms = (crate::stats::variance(&sq) / replicas as f64).sqrt();
            let r = ms.sqrt();
            Estimate::new(r, if r > 0.0 { se_ms / (2.0 * r) } else { 0.0 })
        })
        .collect();
    let (slope, slope_se, pass) = if rms.iter().all(|e| e.value == 0.0) {
        (None, 0.0, true)
    } else if rms.iter().any(|e| e.value == 0.0) {
        return Err(Error::invalid("time-average errors vanish at some horizons only"));
    } else {
        let xs: Vec<f64> = times.iter().map(|t| t.ln()).collect();
        let ys: Vec<f64> = rms.iter().map(|e| e.value.ln()).collect();
        let (_, b, se) = linear_fit(&xs, &ys);
        (Some(b), se, (MIXING_SLOPE_RANGE.0..=MIXING_SLOPE_RANGE.1).contains(&b))
    };
    Ok(MixingReport { times: times.to_vec(), rms, reference, replicas, slope, slope_se, pass })
}

/// Common-noise coupling of two fast processes started apart.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CouplingReport {
    pub times: Vec<f64>,
    /// `E|Y^{X,Y₁}(t) - Y^{X,Y₂}(t)|_H`
    pub distances: Vec<f64>,
    pub rate: f64,
    /// `0.8·(λ - L^Y_{b₂})`
    pub bound: f64,
    pub pass: bool,
}

/// Fits the exponential contraction rate of the synchronous coupling.
#[allow(clippy::too_many_arguments)]
pub fn coupling_rate(
    model: &SlowFastModel,
    frozen: &SpectralField,
    y1: &SpectralField,
    y2: &SpectralField,
    horizon: f64,
    dt: f64,
    replicas: usize,
    key: StreamKey,
) -> Result<CouplingReport> {
    if replicas == 0 {
        return Err(Error::invalid("need at least one replica"));
    }
    let steps = steps_for(horizon, dt)?;
    let points = 20.min(steps).max(1);
    let stride = (steps / points).max(1);
    let runs: Vec<Vec<f64>> = (0..replicas)
        .into_par_iter()
        .map(|r| -> Result<Vec<f64>> {
            let mut s1 = FastStepper::new(model, 1.0, dt)?;
            let mut s2 = s1.clone();
            let rng = key.with_replica(r as u64).stream(StreamRole::FastNoise);
            let (mut r1, mut r2) = (rng.clone(), rng);
            let (mut a, mut b) = (y1.coeffs().to_vec(), y2.coeffs().to_vec());
            let mut out = vec![y1.distance(y2)];
            for n in 1..=steps {
                s1.step(frozen.coeffs(), &mut a, &mut r1);
                s2.step(frozen.coeffs(), &mut b, &mut r2);
                if n % stride == 0 {
                    out.push(a.iter().zip(&b).map(|(p, q)| (p - q) * (p - q)).sum::<f64>().sqrt());
                }
            }
            Ok(out)
        })
        .collect::<Result<_>>()?;
    let len = runs[0].len();
    let times: Vec<f64> = (0..len).map(|i| (i * stride) as f64 * dt).collect();
    let distances: Vec<f64> = (0..len).map(|i| kahan_sum(runs.iter().map(|r| r[i])) / replicas as f64).collect();
    let floor = distances[0] * 1e-12;
    let (xs, ys): (Vec<f64>, Vec<f64>) =
        times.iter().zip(&distances).filter(|(_, d)| **d > floor && **d > 0.0).map(|(t, d)| (*t, d.ln())).unzip();
    let rate = if xs.len() >= 2 { -linear_fit(&xs, &ys).1 } else { f64::INFINITY };
    let bound = 0.8 * (model.fast_sys.lambda() - model.coeffs.b2.lipschitz_fast());
    Ok(CouplingReport { times, distances, rate, bound, pass: rate >= bound })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LipschitzVerdict {
    Pass,
    Fail,
    /// Standard errors too large relative to `L_f |X₁ - X₂|_H`.
    Inconclusive,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LipschitzCheck {
    pub verdict: LipschitzVerdict,
    /// `F(X₁) - F(X₂)` with the combined standard error.
    pub difference: Estimate,
    pub distance: f64,
    pub lipschitz: f64,
    /// `L_f |X₁ - X₂|_H + 3·SE`
    pub bound: f64,
}

/// Checks `|F(X₁) - F(X₂)| ≤ L_f |X₁ - X₂|_H` for `F(X) = ∫ f dμ^X`.
///
/// Both measures are driven by the same noise, so equal arguments give an
/// exactly vanishing difference.
pub fn verify_measure_lipschitz(
    model: &SlowFastModel,
    x1: &SpectralField,
    x2: &SpectralField,
    f: &Functional,
    opts: &MeasureOptions,
    key: StreamKey,
) -> Result<LipschitzCheck> {
    f.validate(model.modes())?;
    let f1 = average_functional(&estimate_invariant_measure(model, x1, opts, key)?, f);
    let f2 = average_functional(&estimate_invariant_measure(model, x2, opts, key)?, f);
    let difference = f1.minus(&f2);
    let distance = x1.distance(x2);
    let lipschitz = f.lipschitz();
    let bound = lipschitz * distance + 3.0 * difference.se;
    let verdict = if distance > 0.0 && f1.se.max(f2.se) > 0.05 * lipschitz * distance {
        LipschitzVerdict::Inconclusive
    } else if difference.value.abs() <= bound {
        LipschitzVerdict::Pass
    } else {
        LipschitzVerdict::Fail
    };
    Ok(LipschitzCheck { verdict, difference, distance, lipschitz, bound })
}
