//! The action functional `S(ψ) = ½∫⟨g, q̄⁻¹(ψ) g⟩ dt` with the drift residual
//! `g = ψ' + (-A₁)ψ - B̄(ψ)`, its minimal feedback control, and the Picard
//! solver for the controlled averaged equation.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ergodics::AveragedModel;
use crate::error::{Error, Result};
use crate::functional::Profile;
use crate::model::{check_regime, RegimeSchedule, SlowFastModel};
use crate::path::{steps_for, PathSpec};
use crate::rng::StreamKey;
use crate::simulator::{phi1, phi2, piecewise_frozen_walk, ControlTable, FeedbackControl};
use crate::spectral::{Collocation, SpectralField};
use crate::stats::{kahan_sum, mean_se, Estimate, KahanSum};

/// `q̄(X)(x) = ∫ σ₁²(x, X(x), Y(x)) μ^X(dY)` with the bounds `c₀ ≤ q̄ ≤ c₁`.
pub struct EffectiveDiffusion<'a> {
    averaged: &'a AveragedModel,
    c0: f64,
    c1: f64,
}

impl<'a> EffectiveDiffusion<'a> {
    /// Bounds from the declared `σ₁²` range.
    pub fn new(averaged: &'a AveragedModel) -> Result<Self> {
        let (c0, c1) = averaged
            .model()
            .coeffs
            .sigma1_bounds()
            .ok_or_else(|| Error::invalid("sigma1 has no declared bounds 0 < c0 <= sigma1^2 <= c1"))?;
        Self::with_bounds(averaged, c0, c1)
    }

    pub fn with_bounds(averaged: &'a AveragedModel, c0: f64, c1: f64) -> Result<Self> {
        if !(c0 > 0.0) || !(c1 >= c0) {
            return Err(Error::invalid(format!("need 0 < c0 <= c1, got ({c0}, {c1})")));
        }
        Ok(Self { averaged, c0, c1 })
    }

    pub fn bounds(&self) -> (f64, f64) {
        (self.c0, self.c1)
    }

    pub fn averaged(&self) -> &AveragedModel {
        self.averaged
    }

    /// Grid values of `q̄(x)`; aborts if any falls below `c₀`.
    pub fn qbar(&self, x: &SpectralField) -> Result<Vec<f64>> {
        let q = self.averaged.diffusion(x)?;
        let points = self.averaged.collocation().points();
        for (j, v) in q.iter().enumerate() {
            if !(*v >= self.c0 * (1.0 - 1e-9)) {
                return Err(Error::BoundViolation { x: points[j], value: *v, c0: self.c0 });
            }
        }
        Ok(q)
    }

    /// `[q̄⁻¹h](x) = h(x)/q̄(x)` on the grid.
    pub fn apply_inverse(q: &[f64], h: &[f64]) -> Vec<f64> {
        h.iter().zip(q).map(|(h, q)| h / q).collect()
    }
}

/// `g(t_i)` on the path grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Residual {
    pub dt: f64,
    pub g: Vec<SpectralField>,
    /// The first and last entries use one-sided stencils.
    pub one_sided_endpoints: bool,
}

/// `g = ψ' + (-A₁)ψ - B̄(ψ)`, with `ψ'` by central differences and
/// second-order one-sided differences at the ends.
pub fn residual(path: &PathSpec, averaged: &AveragedModel) -> Result<Residual> {
    let n = path.len();
    if n < 3 {
        return Err(Error::invalid("a path needs at least 3 points to be differentiated"));
    }
    let model = averaged.model();
    if path.modes() != model.modes() {
        return Err(Error::invalid(format!("path has {} modes, model {}", path.modes(), model.modes())));
    }
    let h = path.dt();
    let f = path.fields();
    let alphas = model.slow_sys.alphas();
    let g: Result<Vec<SpectralField>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let c = |k: usize, j: usize| f[j].coeffs()[k];
            let bbar = averaged.drift(&f[i])?;
            Ok(SpectralField::new(
                (0..model.modes())
                    .map(|k| {
                        let d = if i == 0 {
                            (-3.0 * c(k, 0) + 4.0 * c(k, 1) - c(k, 2)) / (2.0 * h)
                        } else if i == n - 1 {
                            (3.0 * c(k, n - 1) - 4.0 * c(k, n - 2) + c(k, n - 3)) / (2.0 * h)
                        } else {
                            (c(k, i + 1) - c(k, i - 1)) / (2.0 * h)
                        };
                        d + alphas[k] * c(k, i) - bbar.coeffs()[k]
                    })
                    .collect(),
            ))
        })
        .collect();
    Ok(Residual { dt: h, g: g?, one_sided_endpoints: true })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RateMode {
    /// `Q₁ = I`, `σ₁` may depend on `Y`; cost of the feedback form.
    GeneralD1,
    /// `σ₁ = σ₁(X)`: `q̄ = σ₁²` and no measure is needed.
    Sigma1YIndependent,
}

/// How the optimal control is represented.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "form", rename_all = "snake_case")]
pub enum ControlDescriptor {
    /// `v(t, Y)(x) = σ₁(x, ψ(t)(x), Y(x))·w(t, x)` with `w = q̄⁻¹g` on the grid.
    Feedback { dt: f64, grid: Vec<f64>, weights: Vec<Vec<f64>> },
    /// `u(t)` per mode, for constant `σ₁` and a general diagonal `Q₁`.
    OpenLoop(ControlTable),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateDiagnostics {
    /// `|S_h - S_{2h}|/3`, or 0 when the grid is too short.
    pub quadrature_error: f64,
    pub one_sided_endpoints: bool,
    pub min_qbar: f64,
    /// Largest `|∫|v|²dμ - ⟨g, q̄⁻¹g⟩|/SE` over the checked times.
    pub identity_z: f64,
    pub identity_pass: bool,
    /// Largest measure SE met in the identity check.
    pub measure_se: f64,
    /// A residual component had no control direction.
    pub infeasible: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateResult {
    pub mode: RateMode,
    /// `S(ψ)`; `+∞` when infeasible.
    pub value: f64,
    pub times: Vec<f64>,
    /// `|g(t_i)|_H`.
    pub residual_norms: Vec<f64>,
    pub control: ControlDescriptor,
    pub diagnostics: RateDiagnostics,
}

impl RateResult {
    pub fn max_residual(&self) -> f64 {
        self.residual_norms.iter().copied().fold(0.0, f64::max)
    }

    /// `S(ψ) = 0` up to `tol` in the residual.
    pub fn is_zero(&self, tol: f64) -> bool {
        self.max_residual() < tol
    }
}

fn trapezoid(values: &[f64], h: f64) -> f64 {
    let n = values.len();
    if n < 2 {
        return 0.0;
    }
    h * (kahan_sum(values.iter().copied()) - 0.5 * (values[0] + values[n - 1]))
}

fn richardson_error(values: &[f64], h: f64) -> f64 {
    let n = values.len();
    if n < 5 || n.is_multiple_of(2) {
        return 0.0;
    }
    let coarse: Vec<f64> = values.iter().step_by(2).copied().collect();
    (trapezoid(values, h) - trapezoid(&coarse, 2.0 * h)).abs() / 3.0
}

/// Evaluates `S(ψ)` and the control realising it.
pub fn action_value(path: &PathSpec, eff: &EffectiveDiffusion, mode: RateMode) -> Result<RateResult> {
    let averaged = eff.averaged();
    let model = averaged.model();
    let sigma1 = model.coeffs.sigma1.as_ref();
    let lambdas = model.slow_cov.lambdas();
    let identity_q = lambdas.iter().all(|l| *l == 1.0);
    match mode {
        RateMode::GeneralD1 if !identity_q => {
            return Err(Error::invalid("the general rate form needs Q1 = I"));
        }
        RateMode::Sigma1YIndependent if sigma1.depends_on_fast() => {
            return Err(Error::invalid("sigma1 depends on the fast variable"));
        }
        _ => {}
    }
    let res = residual(path, averaged)?;
    let h = res.dt;
    let col = averaged.collocation();
    let times = path.times();
    let residual_norms: Vec<f64> = res.g.iter().map(SpectralField::norm).collect();

    if !identity_q {
        let s = sigma1
            .affine()
            .and_then(|a| a.constant())
            .ok_or_else(|| Error::invalid("a non-identity Q1 is only supported for constant sigma1"))?;
        let mut infeasible = false;
        let mut controls = Vec::with_capacity(res.g.len());
        let integrand: Vec<f64> = res
            .g
            .iter()
            .map(|g| {
                let tol = 1e-12 * (1.0 + g.norm());
                let u: Vec<f64> = g
                    .coeffs()
                    .iter()
                    .zip(lambdas)
                    .map(|(gk, l)| {
                        if *l == 0.0 || s == 0.0 {
                            if gk.abs() > tol {
                                infeasible = true;
                            }
                            0.0
                        } else {
                            gk / (s * l)
                        }
                    })
                    .collect();
                let e = u.iter().map(|v| v * v).sum();
                controls.push(SpectralField::new(u));
                e
            })
            .collect();
        let value = if infeasible { f64::INFINITY } else { 0.5 * trapezoid(&integrand, h) };
        return Ok(RateResult {
            mode,
            value,
            times,
            residual_norms,
            control: ControlDescriptor::OpenLoop(ControlTable::new(h, controls)?),
            diagnostics: RateDiagnostics {
                quadrature_error: 0.5 * richardson_error(&integrand, h),
                one_sided_endpoints: res.one_sided_endpoints,
                min_qbar: s * s,
                identity_z: 0.0,
                identity_pass: true,
                measure_se: 0.0,
                infeasible,
            },
        });
    }

    let per_time: Result<Vec<(f64, Vec<f64>, f64)>> = path
        .fields()
        .par_iter()
        .zip(&res.g)
        .map(|(x, g)| {
            let q = eff.qbar(x)?;
            let g_grid = col.to_grid(g);
            let w = EffectiveDiffusion::apply_inverse(&q, &g_grid);
            let min_q = q.iter().copied().fold(f64::INFINITY, f64::min);
            Ok((col.inner(&g_grid, &w), w, min_q))
        })
        .collect();
    let per_time = per_time?;
    let integrand: Vec<f64> = per_time.iter().map(|p| p.0).collect();
    let min_qbar = per_time.iter().map(|p| p.2).fold(f64::INFINITY, f64::min);
    let weights: Vec<Vec<f64>> = per_time.into_iter().map(|p| p.1).collect();

    let (mut identity_z, mut measure_se, mut identity_pass) = (0.0f64, 0.0f64, true);
    if sigma1.depends_on_fast() {
        let n = path.len();
        let points = col.points();
        for i in (0..5).map(|r| r * (n - 1) / 4) {
            let x = path.field(i);
            let xs = col.to_grid(x);
            let w = &weights[i];
            let mut ygrid = vec![0.0; col.len()];
            let est = averaged.expect_with(x, |y| {
                col.to_grid_into(y, &mut ygrid);
                let v: Vec<f64> =
                    (0..col.len()).map(|j| sigma1.eval(points[j], xs[j], ygrid[j]) * w[j]).collect();
                col.norm_sq(&v)
            })?;
            let diff = (est.value - integrand[i]).abs();
            measure_se = measure_se.max(est.se);
            if est.se > 0.0 {
                identity_z = identity_z.max(diff / est.se);
            } else if diff > 1e-9 * integrand[i].abs().max(1.0) {
                identity_pass = false;
            }
        }
        identity_pass &= identity_z <= 3.0;
    }

    Ok(RateResult {
        mode,
        value: 0.5 * trapezoid(&integrand, h),
        times,
        residual_norms,
        control: ControlDescriptor::Feedback { dt: h, grid: col.points().to_vec(), weights },
        diagnostics: RateDiagnostics {
            quadrature_error: 0.5 * richardson_error(&integrand, h),
            one_sided_endpoints: res.one_sided_endpoints,
            min_qbar,
            identity_z,
            identity_pass,
            measure_se,
            infeasible: false,
        },
    })
}

/// The minimal feedback control `v(t, Y)(x) = σ₁(x, ψ(t)(x), Y(x))·w(t, x)`
/// as a simulator control; zero past the end of the table.
pub struct RateFeedback {
    model: SlowFastModel,
    col: Collocation,
    dt: f64,
    psi_grid: Vec<Vec<f64>>,
    weights: Vec<Vec<f64>>,
    sqrt_c1: f64,
}

impl RateFeedback {
    pub fn new(averaged: &AveragedModel, path: &PathSpec, result: &RateResult) -> Result<Self> {
        let ControlDescriptor::Feedback { dt, weights, .. } = &result.control else {
            return Err(Error::invalid("the rate result carries an open-loop control"));
        };
        if weights.len() != path.len() {
            return Err(Error::invalid("control table and path have different lengths"));
        }
        let model = averaged.model().clone();
        let col = averaged.collocation().clone();
        let c1 = model.coeffs.sigma1_bounds().map_or(f64::INFINITY, |b| b.1);
        Ok(Self {
            psi_grid: path.fields().iter().map(|f| col.to_grid(f)).collect(),
            model,
            col,
            dt: *dt,
            weights: weights.clone(),
            sqrt_c1: c1.sqrt(),
        })
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn weights(&self) -> &[Vec<f64>] {
        &self.weights
    }

    fn index(&self, t: f64) -> Option<usize> {
        if t < 0.0 {
            return None;
        }
        let i = (t / self.dt + 1e-9).floor() as usize;
        (i < self.weights.len()).then_some(i)
    }

    /// `γ(t_i) = √c₁·|w(t_i)|_H`, a bound on `sup_Y |v(t_i, Y)|_U`.
    fn gamma(&self, i: usize) -> f64 {
        self.sqrt_c1 * self.col.norm_sq(&self.weights[i]).sqrt()
    }
}

impl FeedbackControl for RateFeedback {
    fn control(&self, t: f64, fast: &[f64], out: &mut [f64]) {
        let Some(i) = self.index(t) else {
            out.iter_mut().for_each(|v| *v = 0.0);
            return;
        };
        let s1 = self.model.coeffs.sigma1.as_ref();
        let mut y = vec![0.0; self.col.len()];
        self.col.to_grid_into(fast, &mut y);
        let points = self.col.points();
        let v: Vec<f64> =
            (0..y.len()).map(|j| s1.eval(points[j], self.psi_grid[i][j], y[j]) * self.weights[i][j]).collect();
        self.col.from_grid_into(&v, out);
    }

    fn envelope(&self, t: f64) -> f64 {
        self.index(t).map_or(0.0, |i| self.gamma(i))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PicardWindow {
    pub start: f64,
    pub end: f64,
    pub iterations: usize,
    /// Estimated Lipschitz constant of the fixed-point map on the window.
    pub contraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PicardSolution {
    pub path: PathSpec,
    pub windows: Vec<PicardWindow>,
    pub iterations: usize,
}

const PICARD_MAX_ITER: usize = 1000;

/// Solves `ψ(t) = S₁(t)X₀ + ∫S₁(t-s)[B̄(ψ(s)) + ∫Σ₁(ψ(s), Y)v(s, Y)μ^{ψ(s)}(dY)]ds`
/// by fixed-point iteration on consecutive windows.
///
/// A window of length `T₀` is accepted once
/// `(L_b T₀ + L_σ √T₀ ‖γ‖_{L²(window)}) < ½`, where `L_b = L^X_{b₁} + L^Y_{b₁}`
/// bounds the Lipschitz constant of `B̄` and `L_σ = L^X_{σ₁}√c₁`; windows are
/// halved down to 4 steps. Time integrals use the exponential trapezoid rule.
pub fn picard_solve_control_path(
    x0: &SpectralField,
    feedback: Option<&RateFeedback>,
    averaged: &AveragedModel,
    horizon: f64,
    dt: f64,
    tol: f64,
) -> Result<PicardSolution> {
    if !(tol > 0.0) {
        return Err(Error::invalid("tolerance must be positive"));
    }
    let model = averaged.model();
    let m = model.modes();
    if x0.modes() != m {
        return Err(Error::invalid(format!("initial condition must have {m} modes")));
    }
    let steps = steps_for(horizon, dt)?;
    if let Some(fb) = feedback {
        if (fb.dt - dt).abs() > 1e-12 * dt {
            return Err(Error::invalid("feedback table and solver use different steps"));
        }
    }
    let c = &model.coeffs;
    let l_b = c.b1.lipschitz_slow() + c.b1.lipschitz_fast();
    let l_s = c.sigma1.lipschitz_slow() * c.sigma1_bounds().map_or(f64::INFINITY, |b| b.1).sqrt();
    let gamma2: Vec<f64> = (0..=steps).map(|i| feedback.map_or(0.0, |fb| if i < fb.len() { fb.gamma(i).powi(2) } else { 0.0 })).collect();
    let factor = |a: usize, n: usize| {
        let t0 = n as f64 * dt;
        let g = trapezoid(&gamma2[a..=a + n], dt).sqrt();
        let sigma_part = if l_s == 0.0 || g == 0.0 { 0.0 } else { l_s * t0.sqrt() * g };
        l_b * t0 + sigma_part
    };

    let alphas = model.slow_sys.alphas();
    let decay: Vec<f64> = alphas.iter().map(|a| (-a * dt).exp()).collect();
    let p1: Vec<f64> = alphas.iter().map(|a| dt * phi1(a * dt)).collect();
    let p2: Vec<f64> = alphas.iter().map(|a| dt * phi2(a * dt)).collect();
    let col = averaged.collocation();
    let points = col.points();
    let s1 = c.sigma1.as_ref();

    let forcing = |i: usize, psi: &SpectralField| -> Result<SpectralField> {
        let mut f = averaged.drift(psi)?;
        if let Some(fb) = feedback {
            if i < fb.len() {
                let xs = col.to_grid(psi);
                let star = &fb.psi_grid[i];
                let w = &fb.weights[i];
                let a = if s1.depends_on_fast() {
                    averaged.grid_expect(psi, |j, y| s1.eval(points[j], xs[j], y) * s1.eval(points[j], star[j], y))?
                } else {
                    (0..col.len()).map(|j| s1.eval(points[j], xs[j], 0.0) * s1.eval(points[j], star[j], 0.0)).collect()
                };
                let v: Vec<f64> = a.iter().zip(w).map(|(a, w)| a * w).collect();
                f.axpy(1.0, &col.from_grid(&v));
            }
        }
        Ok(f)
    };

    let mut fields = vec![x0.clone()];
    let mut windows = Vec::new();
    let mut total = 0;
    let mut start = 0usize;
    while start < steps {
        let mut n = steps - start;
        let mut q = factor(start, n);
        while q >= 0.5 && n > 4 {
            n = (n / 2).max(4);
            q = factor(start, n);
        }
        if q >= 0.5 {
            return Err(Error::NoContraction(format!(
                "window of {n} steps at t = {}: L_b = {l_b}, L_sigma = {l_s}, estimate {q} >= 1/2",
                start as f64 * dt
            )));
        }
        let head = fields[start].clone();
        let mut old = vec![head.clone(); n + 1];
        let mut iterations = 0;
        loop {
            iterations += 1;
            let f: Result<Vec<SpectralField>> = (0..=n).into_par_iter().map(|i| forcing(start + i, &old[i])).collect();
            let f = f?;
            let mut new = Vec::with_capacity(n + 1);
            new.push(head.clone());
            for i in 0..n {
                let prev = &new[i];
                let next: Vec<f64> = (0..m)
                    .map(|k| {
                        decay[k] * prev.coeffs()[k] + p2[k] * f[i].coeffs()[k] + (p1[k] - p2[k]) * f[i + 1].coeffs()[k]
                    })
                    .collect();
                new.push(SpectralField::new(next));
            }
            let diff = new.iter().zip(&old).map(|(a, b)| a.distance(b)).fold(0.0, f64::max);
            old = new;
            if !diff.is_finite() {
                return Err(Error::NoContraction(format!("iterates diverged at t = {}", start as f64 * dt)));
            }
            if diff < tol {
                break;
            }
            if iterations >= PICARD_MAX_ITER {
                return Err(Error::NoContraction(format!(
                    "no convergence to {tol} after {PICARD_MAX_ITER} iterations (last change {diff})"
                )));
            }
        }
        total += iterations;
        windows.push(PicardWindow {
            start: start as f64 * dt,
            end: (start + n) as f64 * dt,
            iterations,
            contraction: q,
        });
        fields.extend(old.into_iter().skip(1));
        start += n;
    }
    Ok(PicardSolution { path: PathSpec::new(dt, fields)?, windows, iterations: total })
}

/// `ṽ(t, Y) = a(1 + r t)·g(⟨Y, e_k⟩)·e_k`, with `g ≡ 1` when no profile is set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CylinderControl {
    pub mode: usize,
    pub amplitude: f64,
    #[serde(default)]
    pub ramp: f64,
    #[serde(default)]
    pub profile: Option<Profile>,
}

impl CylinderControl {
    pub fn time_factor(&self, t: f64) -> f64 {
        self.amplitude * (1.0 + self.ramp * t)
    }

    fn shape(&self, y: f64) -> f64 {
        self.profile.map_or(1.0, |p| p.eval(y))
    }

    /// `|ṽ(t, Y)|²_U`.
    pub fn energy(&self, t: f64, fast: &[f64]) -> f64 {
        (self.time_factor(t) * self.shape(fast[self.mode])).powi(2)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostRow {
    pub epsilon: f64,
    pub delta: f64,
    pub window: f64,
    pub dt: f64,
    pub replicas: usize,
    /// `E ½∫|ṽ(⌊t/Δ⌋Δ, Y^{δ,ψ̃}(t))|² dt`.
    pub cost: Estimate,
    /// `½∫∫|ṽ(t, Y)|² μ^{ψ̃(t)}(dY) dt`.
    pub reference: f64,
    /// `cost - reference`.
    pub mean_gap: Estimate,
    /// Root-mean-square of per-replica `cost - reference`.
    pub rms_gap: Estimate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostTable {
    pub rows: Vec<CostRow>,
    /// Every RMS gap is below its predecessor within 2 combined SE.
    pub decreasing: bool,
}

/// `½∫₀ᵀ ∫|ṽ(t, Y)|² μ^{ψ(t)}(dY) dt` by the trapezoid rule on the path grid.
pub fn averaged_cost(control: &CylinderControl, psi: &PathSpec, averaged: &AveragedModel, horizon: f64) -> Result<f64> {
    let n = steps_for(horizon, psi.dt())?;
    let values: Result<Vec<f64>> = (0..=n)
        .into_par_iter()
        .map(|i| {
            let t = i as f64 * psi.dt();
            let e = averaged.expect_mode(psi.field(i), control.mode, |y| control.shape(y).powi(2))?;
            Ok(control.time_factor(t).powi(2) * e.value)
        })
        .collect();
    Ok(0.5 * trapezoid(&values?, psi.dt()))
}

/// Monte-Carlo cost of the piecewise-frozen fast process along a schedule.
///
/// Pass `check = false` only for deliberate schedule violations.
#[allow(clippy::too_many_arguments)]
pub fn cost_convergence_experiment(
    control: &CylinderControl,
    psi: &PathSpec,
    averaged: &AveragedModel,
    schedule: &RegimeSchedule,
    horizon: f64,
    replicas: usize,
    key: StreamKey,
    check: bool,
) -> Result<CostTable> {
    if check {
        let report = check_regime(schedule)?;
        if !report.pass {
            return Err(Error::Hypothesis(format!("schedule fails the regime check: {}", report.failures.join("; "))));
        }
    }
    if replicas < 2 {
        return Err(Error::invalid("need at least 2 replicas"));
    }
    let model = averaged.model();
    if control.mode >= model.modes() {
        return Err(Error::invalid("control mode is not retained"));
    }
    let reference = averaged_cost(control, psi, averaged, horizon)?;
    let psi_at = |t: f64| psi.at(t);
    let mut rows = Vec::with_capacity(schedule.entries.len());
    for (e, entry) in schedule.entries.iter().enumerate() {
        let costs: Result<Vec<f64>> = (0..replicas)
            .into_par_iter()
            .map(|r| {
                let key = key.with_entry(e as u64).with_replica(r as u64);
                let per_window = steps_for(entry.window, entry.dt)?;
                let steps = steps_for(horizon, entry.dt)?;
                let mut acc = KahanSum::new();
                piecewise_frozen_walk(
                    model,
                    &psi_at,
                    entry.window,
                    entry.delta,
                    &SpectralField::zeros(model.modes()),
                    horizon,
                    entry.dt,
                    key,
                    &mut |n, _, _, y| {
                        if n < steps {
                            let frozen_t = (n / per_window * per_window) as f64 * entry.dt;
                            acc.add(control.energy(frozen_t, y));
                        }
                    },
                )?;
                Ok(0.5 * entry.dt * acc.value())
            })
            .collect();
        let costs = costs?;
        let (m, se) = mean_se(&costs);
        let sq: Vec<f64> = costs.iter().map(|c| (c - reference).powi(2)).collect();
        let (m2, se2) = mean_se(&sq);
        let rms = m2.sqrt();
        let rms_se = if rms > 0.0 { se2 / (2.0 * rms) } else { 0.0 };
        rows.push(CostRow {
            epsilon: entry.epsilon,
            delta: entry.delta,
            window: entry.window,
            dt: entry.dt,
            replicas,
            cost: Estimate::new(m, se),
            reference,
            mean_gap: Estimate::new(m - reference, se),
            rms_gap: Estimate::new(rms, rms_se),
        });
    }
    let decreasing = rows.windows(2).all(|w| {
        w[1].rms_gap.value <= w[0].rms_gap.value + 2.0 * w[0].rms_gap.se.hypot(w[1].rms_gap.se)
    });
    Ok(CostTable { rows, decreasing })
}
