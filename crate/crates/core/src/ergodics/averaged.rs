//! Averaged coefficients `B̄(X) = ∫ B₁(X, Y) μ^X(dY)`, the effective
//! diffusion `q̄(X)(x) = ∫ σ₁²(x, X(x), Y(x)) μ^X(dY)`, and the averaged
//! slow dynamics.

use std::collections::HashMap;
use std::fmt;
use std::sync::{Arc, Mutex, RwLock};

use log::warn;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{average_functional, estimate_invariant_measure, EmpiricalMeasure, MeasureOptions, MeasureProvenance};
use crate::error::{Error, Result};
use crate::functional::Functional;
use crate::model::{Affine, Lift, SlowFastModel};
use crate::path::{steps_for, PathSpec};
use crate::quadrature::GaussHermite;
use crate::rng::{splitmix64, StreamKey, StreamRole};
use crate::simulator::{phi1, phi2, ControlSignal};
use crate::spectral::{Collocation, SpectralField};
use crate::stats::Estimate;

/// Counters of a [`MeasureCache`].
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct CacheStats {
    pub lookups: u64,
    pub hits: u64,
    pub misses: u64,
    /// Largest `|X - X̂|_H` between a query and the lattice anchor that
    /// answered it. Times `‖f‖_Lip` it bounds the interpolation error.
    pub max_certificate: f64,
}

impl CacheStats {
    fn since(&self, before: &CacheStats) -> CacheStats {
        CacheStats {
            lookups: self.lookups - before.lookups,
            hits: self.hits - before.hits,
            misses: self.misses - before.misses,
            max_certificate: self.max_certificate,
        }
    }
}

#[derive(Debug)]
struct CacheEntry {
    anchor: SpectralField,
    measure: Arc<EmpiricalMeasure>,
}

/// Memoised `μ^X` on a lattice in the leading modes of `X`.
///
/// A query is answered by the measure estimated at its lattice anchor:
/// the leading modes rounded to the lattice, the remaining modes as given
/// by the first query that reached the cell. Entries are inserted once;
/// concurrent duplicate estimates are discarded. Each cell draws its noise
/// from a stream keyed by its lattice indices, so contents do not depend
/// on query order.
pub struct MeasureCache {
    opts: MeasureOptions,
    spacing: f64,
    lattice_modes: usize,
    key: StreamKey,
    frozen: bool,
    entries: RwLock<HashMap<Vec<i64>, Arc<CacheEntry>>>,
    stats: Mutex<CacheStats>,
}

impl fmt::Debug for MeasureCache {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("MeasureCache")
            .field("spacing", &self.spacing)
            .field("lattice_modes", &self.lattice_modes)
            .field("entries", &self.len())
            .field("stats", &self.stats())
            .finish()
    }
}

impl MeasureCache {
    /// Lattice spacing 0.25 over the first two modes.
    pub fn new(opts: MeasureOptions, key: StreamKey) -> Self {
        Self::with_lattice(opts, 0.25, 2, key)
    }

    pub fn with_lattice(opts: MeasureOptions, spacing: f64, lattice_modes: usize, key: StreamKey) -> Self {
        Self {
            opts,
            spacing,
            lattice_modes,
            key,
            frozen: false,
            entries: RwLock::new(HashMap::new()),
            stats: Mutex::new(CacheStats::default()),
        }
    }

    /// Refuse new estimates; misses become errors.
    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn len(&self) -> usize {
        self.entries.read().expect("cache lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn stats(&self) -> CacheStats {
        *self.stats.lock().expect("stats lock")
    }

    pub fn options(&self) -> &MeasureOptions {
        &self.opts
    }

    fn cell(&self, x: &SpectralField) -> Vec<i64> {
        x.coeffs().iter().take(self.lattice_modes).map(|c| (c / self.spacing).round() as i64).collect()
    }

    /// The measure answering `x` and the certificate distance `|x - X̂|_H`.
    pub fn lookup(&self, model: &SlowFastModel, x: &SpectralField) -> Result<(Arc<EmpiricalMeasure>, f64)> {
        let cell = self.cell(x);
        let found = self.entries.read().expect("cache lock").get(&cell).cloned();
        let (entry, hit) = match found {
            Some(e) => (e, true),
            None => {
                if self.frozen {
                    return Err(Error::invalid(format!("measure cache miss at lattice cell {cell:?}")));
                }
                let mut anchor = x.clone();
                for (c, i) in anchor.coeffs_mut().iter_mut().zip(&cell) {
                    *c = *i as f64 * self.spacing;
                }
                let id = cell.iter().fold(0x9e37_79b9_7f4a_7c15u64, |h, i| splitmix64(h ^ *i as u64));
                let key = self.key.with_entry(self.key.entry ^ id);
                let measure = Arc::new(estimate_invariant_measure(model, &anchor, &self.opts, key)?);
                let fresh = Arc::new(CacheEntry { anchor, measure });
                let mut map = self.entries.write().expect("cache lock");
                (map.entry(cell).or_insert(fresh).clone(), false)
            }
        };
        let cert = x.distance(&entry.anchor);
        let mut s = self.stats.lock().expect("stats lock");
        s.lookups += 1;
        if hit {
            s.hits += 1;
        } else {
            s.misses += 1;
        }
        s.max_certificate = s.max_certificate.max(cert);
        Ok((entry.measure.clone(), cert))
    }
}

/// Closed-form `μ^X` when the fast equation is linear with additive noise:
/// `b₂ = a·X + b·Y + c` with `α_k - b > 0` and constant `σ₂ = s`.
///
/// Modes are independent, `Y_k ~ N((a X_k + c 1_k)/(α_k - b), s² λ_k²/(2(α_k - b)))`,
/// and `Y(x)` is Gaussian at every point.
#[derive(Debug, Clone)]
pub struct GaussianMeasure {
    drift: Affine,
    rates: Vec<f64>,
    variances: Vec<f64>,
    unit: Vec<f64>,
    /// Pointwise variance of `Y(x)` on the collocation grid.
    grid_variance: Vec<f64>,
}

impl GaussianMeasure {
    pub fn new(model: &SlowFastModel) -> Result<Self> {
        let c = &model.coeffs;
        let drift = c.b2.affine().ok_or_else(|| Error::invalid("b2 is not affine"))?;
        let s = c.sigma2.affine().and_then(|a| a.constant()).ok_or_else(|| Error::invalid("sigma2 is not constant"))?;
        let rates: Vec<f64> = model.fast_sys.alphas().iter().map(|a| a - drift.fast).collect();
        if rates.iter().any(|r| !(*r > 0.0)) {
            return Err(Error::invalid("fast linear part is not dissipative"));
        }
        let variances: Vec<f64> =
            rates.iter().zip(model.fast_cov.lambdas()).map(|(r, l)| s * s * l * l / (2.0 * r)).collect();
        let lift = model.lift();
        let col = lift.collocation();
        let mut grid_variance = vec![0.0; col.len()];
        for (j, x) in col.points().iter().enumerate() {
            grid_variance[j] = (0..model.modes()).map(|k| variances[k] * model.fast_sys.eigenfunction(k, *x).powi(2)).sum();
        }
        Ok(Self { drift, rates, variances, unit: lift.unit().to_vec(), grid_variance })
    }

    pub fn mean(&self, x: &SpectralField) -> SpectralField {
        let a = &self.drift;
        SpectralField::new(
            (0..self.rates.len()).map(|k| (a.slow * x.coeffs()[k] + a.offset * self.unit[k]) / self.rates[k]).collect(),
        )
    }

    pub fn variances(&self) -> &[f64] {
        &self.variances
    }

    pub fn grid_variance(&self) -> &[f64] {
        &self.grid_variance
    }
}

#[derive(Debug)]
enum Source {
    /// Only coefficients that ignore `Y` can be averaged.
    None,
    Gaussian(GaussianMeasure),
    Empirical(MeasureCache),
}

/// `B̄`, `q̄` and `μ^X` for one model.
///
/// Coefficients that ignore `Y` are evaluated directly. Otherwise the
/// average is taken against the closed-form Gaussian `μ^X` (pointwise
/// Gauss–Hermite) or against cached empirical measures.
#[derive(Debug)]
pub struct AveragedModel {
    model: SlowFastModel,
    col: Collocation,
    source: Source,
    gh: GaussHermite,
    key: StreamKey,
    /// Draws per exact-Gaussian sample measure.
    gaussian_samples: usize,
}

/// Backend constructors, kept as free-standing names for discoverability.
pub struct DecoupledAverage;
pub struct GaussianAverage;
pub struct EmpiricalAverage;

impl DecoupledAverage {
    pub fn build(model: &SlowFastModel) -> AveragedModel {
        AveragedModel::with_source(model, Source::None, StreamKey::new(0, 0, 0))
    }
}

impl GaussianAverage {
    pub fn build(model: &SlowFastModel, key: StreamKey) -> Result<AveragedModel> {
        Ok(AveragedModel::with_source(model, Source::Gaussian(GaussianMeasure::new(model)?), key))
    }
}

impl EmpiricalAverage {
    pub fn build(model: &SlowFastModel, cache: MeasureCache) -> AveragedModel {
        let key = cache.key;
        AveragedModel::with_source(model, Source::Empirical(cache), key)
    }
}

impl AveragedModel {
    fn with_source(model: &SlowFastModel, source: Source, key: StreamKey) -> Self {
        Self {
            model: model.clone(),
            col: model.collocation(),
            source,
            gh: GaussHermite::new(48),
            key,
            gaussian_samples: 20_000,
        }
    }

    /// Gaussian when the fast equation allows it, else an empirical cache.
    pub fn auto(model: &SlowFastModel, opts: MeasureOptions, key: StreamKey) -> Self {
        match GaussianMeasure::new(model) {
            Ok(g) => Self::with_source(model, Source::Gaussian(g), key),
            Err(_) => Self::with_source(model, Source::Empirical(MeasureCache::new(opts, key)), key),
        }
    }

    pub fn model(&self) -> &SlowFastModel {
        &self.model
    }

    pub fn collocation(&self) -> &Collocation {
        &self.col
    }

    pub fn backend(&self) -> &'static str {
        match self.source {
            Source::None => "decoupled",
            Source::Gaussian(_) => "gaussian",
            Source::Empirical(_) => "empirical",
        }
    }

    pub fn gaussian(&self) -> Option<&GaussianMeasure> {
        match &self.source {
            Source::Gaussian(g) => Some(g),
            _ => None,
        }
    }

    pub fn stats(&self) -> CacheStats {
        match &self.source {
            Source::Empirical(c) => c.stats(),
            _ => CacheStats::default(),
        }
    }

    fn lift(&self) -> Lift {
        Lift::new(self.col.clone())
    }

    /// `B̄(X)` in coefficient space.
    pub fn drift(&self, x: &SpectralField) -> Result<SpectralField> {
        let b1 = self.model.coeffs.b1.as_ref();
        let m = self.model.modes();
        let mut lift = self.lift();
        let mut out = vec![0.0; m];
        if !b1.depends_on_fast() {
            lift.drift(b1, x.coeffs(), &vec![0.0; m], &mut out);
            return Ok(SpectralField::new(out));
        }
        match &self.source {
            Source::None => Err(Error::invalid("b1 depends on the fast variable but no invariant measure is available")),
            Source::Gaussian(g) => {
                let mean = g.mean(x);
                if let Some(a) = b1.affine() {
                    for k in 0..m {
                        out[k] = a.slow * x.coeffs()[k] + a.fast * mean.coeffs()[k] + a.offset * lift.unit()[k];
                    }
                    return Ok(SpectralField::new(out));
                }
                let xs = self.col.to_grid(x);
                let points = self.col.points();
                let values = self.grid_expect(x, |j, y| b1.eval(points[j], xs[j], y))?;
                Ok(self.col.from_grid(&values))
            }
            Source::Empirical(cache) => {
                let (mu, _) = cache.lookup(&self.model, x)?;
                let mut buf = vec![0.0; m];
                for (y, w) in mu.samples().iter().zip(mu.weights()) {
                    lift.drift(b1, x.coeffs(), y.coeffs(), &mut buf);
                    for k in 0..m {
                        out[k] += w * buf[k];
                    }
                }
                Ok(SpectralField::new(out))
            }
        }
    }

    /// `q̄(X)` on the collocation grid.
    pub fn diffusion(&self, x: &SpectralField) -> Result<Vec<f64>> {
        let s1 = self.model.coeffs.sigma1.as_ref();
        if !s1.depends_on_fast() {
            let m = self.model.modes();
            return Ok(self.lift().values(s1, x.coeffs(), &vec![0.0; m]).iter().map(|v| v * v).collect());
        }
        let xs = self.col.to_grid(x);
        let points = self.col.points();
        self.grid_expect(x, |j, y| s1.eval(points[j], xs[j], y).powi(2))
    }

    /// `∫ g(j, Y(x_j)) μ^X(dY)` at every collocation point `x_j`.
    pub fn grid_expect(&self, x: &SpectralField, g: impl Fn(usize, f64) -> f64) -> Result<Vec<f64>> {
        match &self.source {
            Source::None => Err(Error::invalid("no invariant measure is available for this model")),
            Source::Gaussian(gm) => {
                let ms = self.col.to_grid(&gm.mean(x));
                Ok((0..self.col.len())
                    .map(|j| self.gh.expect_normal(ms[j], gm.grid_variance[j].sqrt(), |y| g(j, y)))
                    .collect())
            }
            Source::Empirical(cache) => {
                let (mu, _) = cache.lookup(&self.model, x)?;
                let mut out = vec![0.0; self.col.len()];
                let mut grid = vec![0.0; self.col.len()];
                for (y, w) in mu.samples().iter().zip(mu.weights()) {
                    self.col.to_grid_into(y.coeffs(), &mut grid);
                    for (j, o) in out.iter_mut().enumerate() {
                        *o += w * g(j, grid[j]);
                    }
                }
                Ok(out)
            }
        }
    }

    /// `∫ h(⟨Y, e_k⟩) μ^X(dY)`; exact under the Gaussian measure.
    pub fn expect_mode(&self, x: &SpectralField, k: usize, h: impl Fn(f64) -> f64) -> Result<Estimate> {
        if k >= self.model.modes() {
            return Err(Error::invalid(format!("mode {k} is not retained")));
        }
        if let Source::Gaussian(g) = &self.source {
            let m = g.mean(x).coeffs()[k];
            return Ok(Estimate::exact(self.gh.expect_normal(m, g.variances[k].sqrt(), h)));
        }
        Ok(self.measure(x)?.expect(|y| h(y.coeffs()[k])))
    }

    /// A sample representation of `μ^X`: the cached estimate, or exact
    /// independent Gaussian draws.
    pub fn measure(&self, x: &SpectralField) -> Result<Arc<EmpiricalMeasure>> {
        match &self.source {
            Source::None => Err(Error::invalid("no invariant measure is available for this model")),
            Source::Empirical(cache) => Ok(cache.lookup(&self.model, x)?.0),
            Source::Gaussian(g) => {
                let mean = g.mean(x);
                let id = x.coeffs().iter().fold(0u64, |h, c| splitmix64(h ^ c.to_bits()));
                let key = self.key.with_entry(self.key.entry ^ id);
                let mut rng = key.stream(StreamRole::Auxiliary);
                let sd: Vec<f64> = g.variances.iter().map(|v| v.sqrt()).collect();
                let samples = (0..self.gaussian_samples)
                    .map(|_| {
                        SpectralField::new(
                            (0..sd.len())
                                .map(|k| {
                                    let z: f64 = StandardNormal.sample(&mut rng);
                                    mean.coeffs()[k] + sd[k] * z
                                })
                                .collect(),
                        )
                    })
                    .collect();
                let provenance = MeasureProvenance {
                    frozen: x.clone(),
                    burn_in: 0.0,
                    horizon: 0.0,
                    dt: 0.0,
                    thinning: 1,
                    key,
                };
                Ok(Arc::new(EmpiricalMeasure::uniform(samples, provenance)?))
            }
        }
    }

    /// `∫ f dμ^X`; exact (zero SE) for cylinders under the Gaussian measure.
    pub fn expect(&self, x: &SpectralField, f: &Functional) -> Result<Estimate> {
        f.validate(self.model.modes())?;
        if let Functional::Constant { value } = *f {
            return Ok(Estimate::exact(value));
        }
        if let (Source::Gaussian(_), Some((k, profile, scale))) = (&self.source, f.profile()) {
            let v = self.expect_mode(x, k, |y| profile.eval(y))?.value;
            return Ok(Estimate::exact(scale * v));
        }
        Ok(average_functional(self.measure(x)?.as_ref(), f))
    }

    /// `∫ g(Y) μ^X(dY)` for an arbitrary function of the fast coefficients.
    pub fn expect_with(&self, x: &SpectralField, mut g: impl FnMut(&[f64]) -> f64) -> Result<Estimate> {
        Ok(self.measure(x)?.expect(|y| g(y.coeffs())))
    }

    /// `Σ₁(X) Q₁ u` for a slow diffusion independent of `Y`.
    fn control_forcing(&self, lift: &mut Lift, x: &SpectralField, u: &[f64], out: &mut [f64]) -> Result<()> {
        let s1 = self.model.coeffs.sigma1.as_ref();
        if s1.depends_on_fast() {
            return Err(Error::invalid(
                "controlled averaged paths need sigma1 independent of Y; use the feedback form of the rate module",
            ));
        }
        let zeros = vec![0.0; x.modes()];
        lift.multiply(s1, x.coeffs(), &zeros, self.model.slow_cov.lambdas(), u, out);
        Ok(())
    }
}

/// Output of [`solve_averaged_path`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AveragedPath {
    pub path: PathSpec,
    /// Cache activity during the solve.
    pub cache: CacheStats,
    /// More than half the lookups missed: the path left the cached region.
    pub miss_storm: bool,
}

/// Second-order exponential integrator for
/// `ψ' = A₁ψ + B̄(ψ) + Σ₁(ψ)Q₁u(t)`, `ψ(0) = X₀`.
///
/// Each step is the exponential midpoint-trapezoid scheme
/// `ψ⁺ = e^{-αh}ψ + hφ₂(αh)F(ψ) + h(φ₁ - φ₂)(αh)F(ψ̃)` with the predictor
/// `ψ̃ = e^{-αh}ψ + hφ₁(αh)F(ψ)`.
pub fn solve_averaged_path(
    averaged: &AveragedModel,
    x0: &SpectralField,
    control: &ControlSignal,
    horizon: f64,
    dt: f64,
) -> Result<AveragedPath> {
    let model = averaged.model();
    let m = model.modes();
    if x0.modes() != m {
        return Err(Error::invalid(format!("initial condition must have {m} modes")));
    }
    if matches!(control, ControlSignal::Feedback(_)) {
        return Err(Error::invalid("feedback controls are not defined on the averaged path"));
    }
    let steps = steps_for(horizon, dt)?;
    let alphas = model.slow_sys.alphas();
    let decay: Vec<f64> = alphas.iter().map(|a| (-a * dt).exp()).collect();
    let p1: Vec<f64> = alphas.iter().map(|a| dt * phi1(a * dt)).collect();
    let p2: Vec<f64> = alphas.iter().map(|a| dt * phi2(a * dt)).collect();
    let before = averaged.stats();
    let mut lift = averaged.lift();
    let zeros = vec![0.0; m];
    let mut u = vec![0.0; m];
    let mut forcing = vec![0.0; m];
    // Tables are piecewise constant; both stages use the value on the step.
    let mut rhs = |t: f64, x: &SpectralField, lift: &mut Lift| -> Result<SpectralField> {
        let mut f = averaged.drift(x)?;
        if control.eval(t, &zeros, &mut u) {
            averaged.control_forcing(lift, x, &u, &mut forcing)?;
            for k in 0..m {
                f.coeffs_mut()[k] += forcing[k];
            }
        }
        Ok(f)
    };
    let mut fields = Vec::with_capacity(steps + 1);
    fields.push(x0.clone());
    let mut psi = x0.clone();
    for n in 0..steps {
        let t = n as f64 * dt;
        let f0 = rhs(t, &psi, &mut lift)?;
        let pred =
            SpectralField::new((0..m).map(|k| decay[k] * psi.coeffs()[k] + p1[k] * f0.coeffs()[k]).collect());
        let f1 = rhs(t, &pred, &mut lift)?;
        psi = SpectralField::new(
            (0..m)
                .map(|k| decay[k] * psi.coeffs()[k] + p2[k] * f0.coeffs()[k] + (p1[k] - p2[k]) * f1.coeffs()[k])
                .collect(),
        );
        if !psi.is_finite() {
            return Err(Error::BlowUp { time: t + dt, component: "psi", norm: f64::NAN, threshold: f64::INFINITY });
        }
        fields.push(psi.clone());
    }
    let cache = averaged.stats().since(&before);
    let miss_storm = cache.misses > 8 && 2 * cache.misses > cache.lookups;
    if miss_storm {
        warn!(
            "averaged path left the cached region: {} of {} measure lookups missed",
            cache.misses, cache.lookups
        );
    }
    Ok(AveragedPath { path: PathSpec::new(dt, fields)?, cache, miss_storm })
}
