//! Exponential-Euler integration of the slow-fast pair and of the fast
//! process with a frozen slow argument.
//!
//! Each mode is advanced by its exact linear flow; the collocated
//! nonlinearity is held at its left-point value over the step and the
//! stochastic convolution is sampled with its exact per-step variance.

use std::fmt;
use std::sync::Arc;

use log::warn;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Lift, SlowFastModel};
use crate::path::steps_for;
use crate::rng::{Stream, StreamKey, StreamRole};
use crate::spectral::{Coupling, SpectralField};
use crate::stats::KahanSum;

/// `φ₁(z) = (1 - e^{-z})/z`.
pub fn phi1(z: f64) -> f64 {
    if z.abs() < 1e-12 {
        1.0 - 0.5 * z
    } else {
        -(-z).exp_m1() / z
    }
}

/// `φ₂(z) = (1 - e^{-z}(1 + z))/z²`.
pub fn phi2(z: f64) -> f64 {
    if z.abs() < 1e-3 {
        0.5 - z / 3.0 + z * z / 8.0 - z * z * z / 30.0
    } else {
        (-(-z).exp_m1() - z * (-z).exp()) / (z * z)
    }
}

/// Whether the `√ε` factor multiplies the slow noise.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseScaling {
    On,
    Off,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimParams {
    pub epsilon: f64,
    pub delta: f64,
    pub dt: f64,
    pub noise_scaling: NoiseScaling,
    pub blowup_threshold: f64,
    /// Control budget `N` for `∫|u|²dt`.
    pub budget: Option<f64>,
}

impl SimParams {
    pub fn new(epsilon: f64, delta: f64, dt: f64) -> Self {
        Self { epsilon, delta, dt, noise_scaling: NoiseScaling::On, blowup_threshold: 1e6, budget: None }
    }

    /// The step `δ²/20`.
    pub fn resolved(epsilon: f64, delta: f64) -> Self {
        Self::new(epsilon, delta, delta * delta / crate::model::FAST_SUBSTEPS)
    }

    pub fn with_noise_scaling(mut self, scaling: NoiseScaling) -> Self {
        self.noise_scaling = scaling;
        self
    }

    pub fn with_budget(mut self, budget: f64) -> Self {
        self.budget = Some(budget);
        self
    }

    pub fn with_blowup_threshold(mut self, threshold: f64) -> Self {
        self.blowup_threshold = threshold;
        self
    }

    fn validate(&self) -> Result<()> {
        for (name, v) in [("epsilon", self.epsilon), ("delta", self.delta), ("dt", self.dt)] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::invalid(format!("{name} must be positive, got {v}")));
            }
        }
        Ok(())
    }
}

/// Feedback law `(t, Y) ↦ u(t, Y)` with a declared bound `|u(t, ·)|_U ≤ γ(t)`.
pub trait FeedbackControl: Send + Sync {
    fn control(&self, t: f64, fast: &[f64], out: &mut [f64]);

    fn envelope(&self, t: f64) -> f64;
}

/// Piecewise-constant table: `u(t) = values[⌊t/dt⌋]`, zero past the end.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControlTable {
    dt: f64,
    values: Vec<SpectralField>,
}

impl ControlTable {
    pub fn new(dt: f64, values: Vec<SpectralField>) -> Result<Self> {
        if !(dt > 0.0) {
            return Err(Error::invalid("control table step must be positive"));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("control table contains non-finite values"));
        }
        Ok(Self { dt, values })
    }

    /// Tabulates `f` on `[0, horizon)`.
    pub fn from_fn(dt: f64, horizon: f64, f: impl Fn(f64) -> SpectralField) -> Result<Self> {
        let n = steps_for(horizon, dt)?;
        Self::new(dt, (0..n).map(|i| f(i as f64 * dt)).collect())
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn values(&self) -> &[SpectralField] {
        &self.values
    }

    /// End of the support; the control vanishes afterwards.
    pub fn horizon(&self) -> f64 {
        self.values.len() as f64 * self.dt
    }

    pub fn at(&self, t: f64) -> Option<&SpectralField> {
        if t < 0.0 {
            return None;
        }
        let i = (t / self.dt + 1e-9).floor() as usize;
        self.values.get(i)
    }

    /// `∫|u|²_U dt`, exact for the piecewise-constant table.
    pub fn energy(&self) -> f64 {
        self.values.iter().map(|v| v.dot(v) * self.dt).collect::<KahanSum>().value()
    }

    /// Rejects tables outside `𝒫₂^N`.
    pub fn check_budget(&self, budget: f64) -> Result<()> {
        let e = self.energy();
        if e > budget {
            return Err(Error::BudgetExceeded { time: self.horizon(), spent: e, budget });
        }
        Ok(())
    }
}

#[derive(Clone, Default)]
pub enum ControlSignal {
    #[default]
    Zero,
    OpenLoop(Arc<ControlTable>),
    Feedback(Arc<dyn FeedbackControl>),
}

impl fmt::Debug for ControlSignal {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ControlSignal::Zero => write!(f, "Zero"),
            ControlSignal::OpenLoop(t) => write!(f, "OpenLoop({} values, dt = {})", t.values.len(), t.dt),
            ControlSignal::Feedback(_) => write!(f, "Feedback(..)"),
        }
    }
}

impl ControlSignal {
    pub fn open_loop(table: ControlTable) -> Self {
        ControlSignal::OpenLoop(Arc::new(table))
    }

    pub fn feedback(f: impl FeedbackControl + 'static) -> Self {
        ControlSignal::Feedback(Arc::new(f))
    }

    pub fn is_zero(&self) -> bool {
        matches!(self, ControlSignal::Zero)
    }

    /// Writes `u(t, Y)` into `out`; returns `false` when the control vanishes.
    pub fn eval(&self, t: f64, fast: &[f64], out: &mut [f64]) -> bool {
        match self {
            ControlSignal::Zero => false,
            ControlSignal::OpenLoop(table) => match table.at(t) {
                Some(v) => {
                    out.copy_from_slice(v.coeffs());
                    true
                }
                None => false,
            },
            ControlSignal::Feedback(f) => {
                f.control(t, fast, out);
                true
            }
        }
    }
}

/// Per-mode factors of one exponential-Euler step for a component relaxing
/// at `rate·α_k`.
#[derive(Debug, Clone)]
struct Kernel {
    decay: Vec<f64>,
    /// `dt·φ₁(rate·α_k·dt)`
    phi_dt: Vec<f64>,
    /// Standard deviation of the stochastic convolution per unit forcing.
    noise: Vec<f64>,
}

impl Kernel {
    fn new(alphas: &[f64], dt: f64, rate: f64, noise_amplitude: f64) -> Self {
        let mut decay = Vec::with_capacity(alphas.len());
        let mut phi_dt = Vec::with_capacity(alphas.len());
        let mut noise = Vec::with_capacity(alphas.len());
        for &a in alphas {
            let z = rate * a * dt;
            decay.push((-z).exp());
            phi_dt.push(dt * phi1(z));
            let var = -(-2.0 * z).exp_m1() / (2.0 * rate * a);
            noise.push(noise_amplitude * var.sqrt());
        }
        Self { decay, phi_dt, noise }
    }
}

/// Position of one trajectory.
#[derive(Debug, Clone)]
pub struct SimState {
    pub step: u64,
    pub t: f64,
    pub slow: SpectralField,
    pub fast: SpectralField,
    /// Accumulated `Σ|u(t_n)|² dt`.
    pub spent: KahanSum,
    pub slow_rng: Stream,
    pub fast_rng: Stream,
}

impl SimState {
    pub fn new(slow: SpectralField, fast: SpectralField, key: StreamKey) -> Self {
        Self {
            step: 0,
            t: 0.0,
            slow,
            fast,
            spent: KahanSum::new(),
            slow_rng: key.stream(StreamRole::SlowNoise),
            fast_rng: key.stream(StreamRole::FastNoise),
        }
    }
}

fn fill_normals(rng: &mut Stream, out: &mut [f64]) {
    for v in out.iter_mut() {
        *v = StandardNormal.sample(rng);
    }
}

fn check_norm(time: f64, component: &'static str, v: &[f64], threshold: f64) -> Result<()> {
    let n = v.iter().map(|c| c * c).sum::<f64>().sqrt();
    if !(n <= threshold) {
        return Err(Error::BlowUp { time, component, norm: n, threshold });
    }
    Ok(())
}

/// Reusable stepper for the (controlled) slow-fast pair.
#[derive(Debug, Clone)]
pub struct PairStepper {
    model: SlowFastModel,
    params: SimParams,
    slow: Kernel,
    fast: Kernel,
    fast_rate: f64,
    fast_control: f64,
    identical: bool,
    slow_noisy: bool,
    fast_noisy: bool,
    lift: Lift,
    drift: Vec<f64>,
    forcing: Vec<f64>,
    slow_normals: Vec<f64>,
    fast_normals: Vec<f64>,
    u: Vec<f64>,
    next_slow: Vec<f64>,
    next_fast: Vec<f64>,
    /// Noise increments of the last step (before the per-mode amplitude).
    pub last_slow_noise: Vec<f64>,
    pub last_fast_noise: Vec<f64>,
}

impl PairStepper {
    pub fn new(model: &SlowFastModel, params: SimParams) -> Result<Self> {
        params.validate()?;
        let max_dt = params.delta * params.delta / crate::model::FAST_SUBSTEPS;
        if params.dt > max_dt * (1.0 + 1e-12) {
            return Err(Error::Hypothesis(format!(
                "dt = {} does not resolve the fast scale (need dt ≤ delta^2/20 = {max_dt})",
                params.dt
            )));
        }
        let eps_noise = match params.noise_scaling {
            NoiseScaling::On => params.epsilon.sqrt(),
            NoiseScaling::Off => 1.0,
        };
        let m = model.modes();
        let fast_rate = 1.0 / (params.delta * params.delta);
        let ratio = params.delta / params.epsilon.sqrt();
        let fast_control = if ratio < 1e-8 {
            warn!("delta/sqrt(epsilon) = {ratio:e} below 1e-8: fast control term clamped to zero");
            0.0
        } else {
            1.0 / (params.delta * params.epsilon.sqrt())
        };
        Ok(Self {
            slow: Kernel::new(model.slow_sys.alphas(), params.dt, 1.0, eps_noise),
            fast: Kernel::new(model.fast_sys.alphas(), params.dt, fast_rate, params.delta.recip()),
            fast_rate,
            fast_control,
            identical: model.slow_cov.coupling() == Coupling::Identical,
            slow_noisy: !model.slow_cov.is_zero(),
            fast_noisy: !model.fast_cov.is_zero(),
            lift: model.lift(),
            drift: vec![0.0; m],
            forcing: vec![0.0; m],
            slow_normals: vec![0.0; m],
            fast_normals: vec![0.0; m],
            u: vec![0.0; m],
            next_slow: vec![0.0; m],
            next_fast: vec![0.0; m],
            last_slow_noise: vec![0.0; m],
            last_fast_noise: vec![0.0; m],
            model: model.clone(),
            params,
        })
    }

    pub fn params(&self) -> &SimParams {
        &self.params
    }

    /// Advances `state` by one step of size `dt`.
    pub fn step(&mut self, state: &mut SimState, control: &ControlSignal) -> Result<()> {
        self.step_inner(state, control, None)
    }

    /// As [`PairStepper::step`], also advancing an uncontrolled copy of the
    /// fast process driven by the same slow path and the same noise.
    pub fn step_with_shadow(&mut self, state: &mut SimState, control: &ControlSignal, shadow: &mut [f64]) -> Result<()> {
        self.step_inner(state, control, Some(shadow))
    }

    fn step_inner(&mut self, state: &mut SimState, control: &ControlSignal, shadow: Option<&mut [f64]>) -> Result<()> {
        let dt = self.params.dt;
        let t = state.t;
        let c = &self.model.coeffs;
        let x = state.slow.coeffs();
        let y = state.fast.coeffs();
        let controlled = control.eval(t, y, &mut self.u);
        if controlled {
            state.spent.add(self.u.iter().map(|v| v * v).sum::<f64>() * dt);
            if let Some(budget) = self.params.budget {
                let spent = state.spent.value();
                if spent > budget * (1.0 + 1e-12) {
                    return Err(Error::BudgetExceeded { time: t, spent, budget });
                }
            }
        }
        if self.slow_noisy || self.identical {
            fill_normals(&mut state.slow_rng, &mut self.slow_normals);
        }
        if self.identical {
            self.fast_normals.copy_from_slice(&self.slow_normals);
        } else if self.fast_noisy {
            fill_normals(&mut state.fast_rng, &mut self.fast_normals);
        }

        // Slow component.
        let k = &self.slow;
        self.lift.drift(c.b1.as_ref(), x, y, &mut self.drift);
        for i in 0..x.len() {
            self.next_slow[i] = k.decay[i] * x[i] + k.phi_dt[i] * self.drift[i];
        }
        if controlled {
            self.lift.multiply(c.sigma1.as_ref(), x, y, self.model.slow_cov.lambdas(), &self.u, &mut self.forcing);
            for i in 0..x.len() {
                self.next_slow[i] += k.phi_dt[i] * self.forcing[i];
            }
        }
        if self.slow_noisy {
            self.lift.multiply(
                c.sigma1.as_ref(),
                x,
                y,
                self.model.slow_cov.lambdas(),
                &self.slow_normals,
                &mut self.last_slow_noise,
            );
            for i in 0..x.len() {
                self.next_slow[i] += k.noise[i] * self.last_slow_noise[i];
            }
        }

        // Fast component.
        let k = &self.fast;
        let lambdas2 = self.model.fast_cov.lambdas();
        if let Some(shadow) = shadow {
            self.lift.drift(c.b2.as_ref(), x, shadow, &mut self.drift);
            let mut next = vec![0.0; x.len()];
            for i in 0..x.len() {
                next[i] = k.decay[i] * shadow[i] + self.fast_rate * k.phi_dt[i] * self.drift[i];
            }
            if self.fast_noisy {
                self.lift.multiply(c.sigma2.as_ref(), x, shadow, lambdas2, &self.fast_normals, &mut self.forcing);
                for i in 0..x.len() {
                    next[i] += k.noise[i] * self.forcing[i];
                }
            }
            shadow.copy_from_slice(&next);
        }
        self.lift.drift(c.b2.as_ref(), x, y, &mut self.drift);
        for i in 0..y.len() {
            self.next_fast[i] = k.decay[i] * y[i] + self.fast_rate * k.phi_dt[i] * self.drift[i];
        }
        if controlled && self.fast_control != 0.0 {
            self.lift.multiply(c.sigma2.as_ref(), x, y, lambdas2, &self.u, &mut self.forcing);
            for i in 0..y.len() {
                self.next_fast[i] += self.fast_control * k.phi_dt[i] * self.forcing[i];
            }
        }
        if self.fast_noisy {
            self.lift.multiply(c.sigma2.as_ref(), x, y, lambdas2, &self.fast_normals, &mut self.last_fast_noise);
            for i in 0..y.len() {
                self.next_fast[i] += k.noise[i] * self.last_fast_noise[i];
            }
        }

        state.slow.coeffs_mut().copy_from_slice(&self.next_slow);
        state.fast.coeffs_mut().copy_from_slice(&self.next_fast);
        state.step += 1;
        state.t = state.step as f64 * dt;
        let threshold = self.params.blowup_threshold;
        check_norm(state.t, "X", &self.next_slow, threshold)?;
        check_norm(state.t, "Y", &self.next_fast, threshold)?;
        Ok(())
    }
}

/// One step of the pair, as a pure state transition.
pub fn step_pair(model: &SlowFastModel, params: SimParams, control: &ControlSignal, state: &SimState) -> Result<SimState> {
    let mut next = state.clone();
    PairStepper::new(model, params)?.step(&mut next, control)?;
    Ok(next)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecordKind {
    Pair,
    FrozenFast,
    PiecewiseFrozen,
    SlowOnly,
}

/// Run parameters echoed into every record.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RecordParams {
    pub kind: RecordKind,
    pub epsilon: f64,
    pub delta: f64,
    pub dt: f64,
    pub record_dt: f64,
}

/// Uniformly sampled trajectory.
///
/// For frozen-slow runs `slow` holds the frozen argument in force at each
/// recorded time; for slow-only runs `fast` is empty.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRecord {
    pub times: Vec<f64>,
    pub slow: Vec<SpectralField>,
    pub fast: Vec<SpectralField>,
    pub control: Option<Vec<SpectralField>>,
    pub key: StreamKey,
    pub params: RecordParams,
    /// `Σ|u(t_n)|² dt` accumulated by the integrator.
    pub control_energy: f64,
}

impl TrajectoryRecord {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn modes(&self) -> usize {
        self.slow.first().map_or(0, SpectralField::modes)
    }

    pub fn horizon(&self) -> f64 {
        self.times.last().copied().unwrap_or(0.0)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.times.len();
        let ok = self.slow.len() == n
            && (self.fast.is_empty() || self.fast.len() == n)
            && self.control.as_ref().is_none_or(|c| c.len() == n);
        if !ok {
            return Err(Error::invalid("trajectory record paths have inconsistent lengths"));
        }
        Ok(())
    }
}

fn record_stride(record_dt: f64, dt: f64) -> Result<usize> {
    let s = steps_for(record_dt, dt)?;
    if s == 0 {
        return Err(Error::invalid(format!("record step {record_dt} is shorter than dt = {dt}")));
    }
    Ok(s)
}

/// Additional outputs of [`run_pair_shadowed`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShadowSummary {
    /// `∫₀^T |Y^u - Y^0|²_H dt` by the left-point rule.
    pub squared_distance_integral: f64,
    pub shadow: Vec<SpectralField>,
}

/// Integrates the pair over `[0, horizon]`, recording every `record_dt`.
#[allow(clippy::too_many_arguments)]
pub fn run_pair(
    model: &SlowFastModel,
    params: SimParams,
    slow0: &SpectralField,
    fast0: &SpectralField,
    horizon: f64,
    record_dt: f64,
    control: &ControlSignal,
    key: StreamKey,
) -> Result<TrajectoryRecord> {
    run_pair_impl(model, params, slow0, fast0, horizon, record_dt, control, key, false).map(|(r, _)| r)
}

/// [`run_pair`] plus an uncontrolled fast process sharing the slow path and noise.
#[allow(clippy::too_many_arguments)]
pub fn run_pair_shadowed(
    model: &SlowFastModel,
    params: SimParams,
    slow0: &SpectralField,
    fast0: &SpectralField,
    horizon: f64,
    record_dt: f64,
    control: &ControlSignal,
    key: StreamKey,
) -> Result<(TrajectoryRecord, ShadowSummary)> {
    let (r, s) = run_pair_impl(model, params, slow0, fast0, horizon, record_dt, control, key, true)?;
    Ok((r, s.expect("shadow requested")))
}

#[allow(clippy::too_many_arguments)]
fn run_pair_impl(
    model: &SlowFastModel,
    params: SimParams,
    slow0: &SpectralField,
    fast0: &SpectralField,
    horizon: f64,
    record_dt: f64,
    control: &ControlSignal,
    key: StreamKey,
    with_shadow: bool,
) -> Result<(TrajectoryRecord, Option<ShadowSummary>)> {
    let m = model.modes();
    if slow0.modes() != m || fast0.modes() != m {
        return Err(Error::invalid(format!("initial conditions must have {m} modes")));
    }
    if let (Some(budget), ControlSignal::OpenLoop(table)) = (params.budget, control) {
        table.check_budget(budget)?;
    }
    let mut stepper = PairStepper::new(model, params)?;
    let steps = steps_for(horizon, params.dt)?;
    let stride = record_stride(record_dt, params.dt)?;
    if steps % stride != 0 {
        return Err(Error::invalid("horizon must be a multiple of the record step"));
    }
    let mut state = SimState::new(slow0.clone(), fast0.clone(), key);
    let n_rec = steps / stride + 1;
    let mut times = Vec::with_capacity(n_rec);
    let mut slow = Vec::with_capacity(n_rec);
    let mut fast = Vec::with_capacity(n_rec);
    let mut ctrl = (!control.is_zero()).then(|| Vec::with_capacity(n_rec));
    let mut shadow = with_shadow.then(|| fast0.coeffs().to_vec());
    let mut shadow_path = Vec::new();
    let mut dist = KahanSum::new();
    let mut u = vec![0.0; m];
    let mut record = |state: &SimState, shadow: &Option<Vec<f64>>| {
        times.push(state.t);
        slow.push(state.slow.clone());
        fast.push(state.fast.clone());
        if let Some(c) = ctrl.as_mut() {
            if !control.eval(state.t, state.fast.coeffs(), &mut u) {
                u.iter_mut().for_each(|v| *v = 0.0);
            }
            c.push(SpectralField::new(u.clone()));
        }
        if let Some(s) = shadow {
            shadow_path.push(SpectralField::new(s.clone()));
        }
    };
    record(&state, &shadow);
    for n in 0..steps {
        match shadow.as_mut() {
            Some(s) => {
                let d: f64 = s.iter().zip(state.fast.coeffs()).map(|(a, b)| (a - b) * (a - b)).sum();
                dist.add(d * params.dt);
                stepper.step_with_shadow(&mut state, control, s)?;
            }
            None => stepper.step(&mut state, control)?,
        }
        if (n + 1) % stride == 0 {
            record(&state, &shadow);
        }
    }
    let rec = TrajectoryRecord {
        times,
        slow,
        fast,
        control: ctrl,
        key,
        params: RecordParams {
            kind: RecordKind::Pair,
            epsilon: params.epsilon,
            delta: params.delta,
            dt: params.dt,
            record_dt,
        },
        control_energy: state.spent.value(),
    };
    let summary = with_shadow.then(|| ShadowSummary { squared_distance_integral: dist.value(), shadow: shadow_path });
    Ok((rec, summary))
}

/// Stepper for the fast equation alone, at time scale `δ²`, with the slow
/// argument supplied by the caller at every step.
#[derive(Debug, Clone)]
pub struct FastStepper {
    model: SlowFastModel,
    kernel: Kernel,
    rate: f64,
    noisy: bool,
    lift: Lift,
    drift: Vec<f64>,
    forcing: Vec<f64>,
    normals: Vec<f64>,
}

impl FastStepper {
    /// `delta = 1` gives the unaccelerated frozen process.
    pub fn new(model: &SlowFastModel, delta: f64, dt: f64) -> Result<Self> {
        if !(delta > 0.0) || !(dt > 0.0) {
            return Err(Error::invalid("delta and dt must be positive"));
        }
        let rate = 1.0 / (delta * delta);
        let m = model.modes();
        Ok(Self {
            kernel: Kernel::new(model.fast_sys.alphas(), dt, rate, 1.0 / delta),
            rate,
            noisy: !model.fast_cov.is_zero(),
            lift: model.lift(),
            drift: vec![0.0; m],
            forcing: vec![0.0; m],
            normals: vec![0.0; m],
            model: model.clone(),
        })
    }

    pub fn step(&mut self, slow: &[f64], fast: &mut [f64], rng: &mut Stream) {
        let c = &self.model.coeffs;
        let k = &self.kernel;
        self.lift.drift(c.b2.as_ref(), slow, fast, &mut self.drift);
        if self.noisy {
            fill_normals(rng, &mut self.normals);
            self.lift.multiply(
                c.sigma2.as_ref(),
                slow,
                fast,
                self.model.fast_cov.lambdas(),
                &self.normals,
                &mut self.forcing,
            );
        }
        for i in 0..fast.len() {
            let noise = if self.noisy { k.noise[i] * self.forcing[i] } else { 0.0 };
            fast[i] = k.decay[i] * fast[i] + self.rate * k.phi_dt[i] * self.drift[i] + noise;
        }
    }
}

/// Frozen-slow fast process in its natural time (`δ = 1`).
pub fn run_frozen_fast(
    model: &SlowFastModel,
    frozen: &SpectralField,
    fast0: &SpectralField,
    horizon: f64,
    dt: f64,
    record_dt: f64,
    key: StreamKey,
) -> Result<TrajectoryRecord> {
    let mut rec = run_piecewise_frozen_fast(model, &|_| frozen.clone(), horizon, 1.0, fast0, horizon, dt, record_dt, key)?;
    rec.params.kind = RecordKind::FrozenFast;
    Ok(rec)
}

/// Fast process accelerated by `1/δ²` whose slow argument is `ψ(⌊t/Δ⌋Δ)`.
///
/// `Δ` must be a whole number of steps so that window boundaries fall on
/// the integration grid.
#[allow(clippy::too_many_arguments)]
pub fn run_piecewise_frozen_fast(
    model: &SlowFastModel,
    psi: &dyn Fn(f64) -> SpectralField,
    window: f64,
    delta: f64,
    fast0: &SpectralField,
    horizon: f64,
    dt: f64,
    record_dt: f64,
    key: StreamKey,
) -> Result<TrajectoryRecord> {
    let steps = steps_for(horizon, dt)?;
    let stride = record_stride(record_dt, dt)?;
    if steps % stride != 0 {
        return Err(Error::invalid("horizon must be a multiple of the record step"));
    }
    let n_rec = steps / stride + 1;
    let mut times = Vec::with_capacity(n_rec);
    let mut slow = Vec::with_capacity(n_rec);
    let mut fast = Vec::with_capacity(n_rec);
    piecewise_frozen_walk(model, psi, window, delta, fast0, horizon, dt, key, &mut |n, t, frozen, y| {
        if n % stride == 0 {
            times.push(t);
            slow.push(frozen.clone());
            fast.push(SpectralField::new(y.to_vec()));
        }
    })?;
    Ok(TrajectoryRecord {
        times,
        slow,
        fast,
        control: None,
        key,
        params: RecordParams { kind: RecordKind::PiecewiseFrozen, epsilon: 1.0, delta, dt, record_dt },
        control_energy: 0.0,
    })
}

/// Drives the piecewise-frozen fast process and hands every grid state
/// `(n, t_n, ψ(⌊t_n/Δ⌋Δ), Y(t_n))`, `n = 0..=steps`, to `observer`.
#[allow(clippy::too_many_arguments)]
pub fn piecewise_frozen_walk(
    model: &SlowFastModel,
    psi: &dyn Fn(f64) -> SpectralField,
    window: f64,
    delta: f64,
    fast0: &SpectralField,
    horizon: f64,
    dt: f64,
    key: StreamKey,
    observer: &mut dyn FnMut(usize, f64, &SpectralField, &[f64]),
) -> Result<()> {
    let steps = steps_for(horizon, dt)?;
    let per_window = steps_for(window, dt)
        .map_err(|_| Error::invalid(format!("window {window} is not a multiple of dt = {dt}")))?;
    if per_window == 0 {
        return Err(Error::invalid("window shorter than one step"));
    }
    let mut stepper = FastStepper::new(model, delta, dt)?;
    let mut rng = key.stream(StreamRole::FastNoise);
    let mut y = fast0.coeffs().to_vec();
    let mut current = usize::MAX;
    let mut frozen = SpectralField::zeros(model.modes());
    for n in 0..=steps {
        let w = n / per_window;
        if w != current {
            current = w;
            frozen = psi((w * per_window) as f64 * dt);
        }
        let t = n as f64 * dt;
        observer(n, t, &frozen, &y);
        if n == steps {
            break;
        }
        stepper.step(frozen.coeffs(), &mut y, &mut rng);
        if !y.iter().all(|v| v.is_finite()) {
            return Err(Error::BlowUp { time: t + dt, component: "Y", norm: f64::NAN, threshold: f64::INFINITY });
        }
    }
    Ok(())
}

/// Slow equation alone, for models whose slow coefficients ignore `Y`.
///
/// Exact in law at any step size when `b₁` and `σ₁` are constant in `X`.
#[allow(clippy::too_many_arguments)]
pub fn run_slow_decoupled(
    model: &SlowFastModel,
    epsilon: f64,
    slow0: &SpectralField,
    horizon: f64,
    dt: f64,
    record_dt: f64,
    control: &ControlSignal,
    key: StreamKey,
) -> Result<TrajectoryRecord> {
    if !model.coeffs.slow_decoupled() {
        return Err(Error::invalid("slow coefficients depend on the fast variable"));
    }
    let steps = steps_for(horizon, dt)?;
    let stride = record_stride(record_dt, dt)?;
    if steps % stride != 0 {
        return Err(Error::invalid("horizon must be a multiple of the record step"));
    }
    let m = model.modes();
    let kernel = Kernel::new(model.slow_sys.alphas(), dt, 1.0, epsilon.sqrt());
    let mut lift = model.lift();
    let mut rng = key.stream(StreamRole::SlowNoise);
    let zeros = vec![0.0; m];
    let (mut drift, mut forcing, mut normals, mut u) = (vec![0.0; m], vec![0.0; m], vec![0.0; m], vec![0.0; m]);
    let mut x = slow0.coeffs().to_vec();
    let noisy = !model.slow_cov.is_zero();
    let c = &model.coeffs;
    let mut spent = KahanSum::new();
    let mut times = vec![0.0];
    let mut slow = vec![slow0.clone()];
    for n in 0..steps {
        let t = n as f64 * dt;
        lift.drift(c.b1.as_ref(), &x, &zeros, &mut drift);
        let mut next: Vec<f64> = (0..m).map(|i| kernel.decay[i] * x[i] + kernel.phi_dt[i] * drift[i]).collect();
        if control.eval(t, &zeros, &mut u) {
            spent.add(u.iter().map(|v| v * v).sum::<f64>() * dt);
            lift.multiply(c.sigma1.as_ref(), &x, &zeros, model.slow_cov.lambdas(), &u, &mut forcing);
            for i in 0..m {
                next[i] += kernel.phi_dt[i] * forcing[i];
            }
        }
        if noisy {
            fill_normals(&mut rng, &mut normals);
            lift.multiply(c.sigma1.as_ref(), &x, &zeros, model.slow_cov.lambdas(), &normals, &mut forcing);
            for i in 0..m {
                next[i] += kernel.noise[i] * forcing[i];
            }
        }
        x = next;
        if (n + 1) % stride == 0 {
            times.push((n + 1) as f64 * dt);
            slow.push(SpectralField::new(x.clone()));
        }
    }
    check_norm(horizon, "X", &x, f64::MAX)?;
    Ok(TrajectoryRecord {
        times,
        slow,
        fast: Vec::new(),
        control: None,
        key,
        params: RecordParams { kind: RecordKind::SlowOnly, epsilon, delta: 0.0, dt, record_dt },
        control_energy: spent.value(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Builtin, CoefficientSet};
    use crate::spectral::{apply_semigroup, Boundary, CovarianceSpec, EigenSystem};
    use crate::stats::correlated_mean_se;
    use std::f64::consts::PI;

    fn model(m: usize, b1: Builtin, b2: Builtin, cov1: CovarianceSpec, cov2: CovarianceSpec) -> SlowFastModel {
        let sys = EigenSystem::laplacian(Boundary::Dirichlet, PI, m).unwrap();
        let set = CoefficientSet::new(b1, b2, Builtin::Constant { value: 1.0 }, Builtin::Constant { value: 1.0 });
        SlowFastModel::new(sys, cov1, cov2, set).unwrap()
    }

    fn zero() -> Builtin {
        Builtin::Constant { value: 0.0 }
    }

    #[test]
    fn phi_functions() {
        for z in [1e-9, 1e-4, 0.5, 3.0, 40.0] {
            let p1 = (1.0 - (-z as f64).exp()) / z;
            assert!((phi1(z) - p1).abs() < 1e-6 * p1.max(1e-300) || z < 1e-6);
            let exact = (1.0 - (-z as f64).exp() * (1.0 + z)) / (z * z);
            if z > 1e-2 {
                assert!((phi2(z) - exact).abs() < 1e-12);
            }
        }
        assert!((phi2(1e-3) - (0.5 - 1e-3 / 3.0)).abs() < 1e-6);
        assert_eq!(phi1(0.0), 1.0);
    }

    #[test]
    fn deterministic_run_is_pure_semigroup() {
        let m = 4;
        let md = model(m, zero(), zero(), CovarianceSpec::zero(m), CovarianceSpec::zero(m));
        let x0 = SpectralField::new(vec![1.0, -0.5, 0.25, 2.0]);
        let p = SimParams::resolved(0.1, 0.1).with_noise_scaling(NoiseScaling::Off);
        let rec = run_pair(&md, p, &x0, &x0, 0.1, 0.05, &ControlSignal::Zero, StreamKey::new(1, 0, 0)).unwrap();
        let want = apply_semigroup(&x0, 0.1, &md.slow_sys).unwrap();
        for (a, b) in rec.slow.last().unwrap().coeffs().iter().zip(want.coeffs()) {
            assert!((a - b).abs() < 1e-12 * b.abs().max(1.0));
        }
        let want_fast = apply_semigroup(&x0, 0.1 / 0.01, &md.fast_sys).unwrap();
        for (a, b) in rec.fast.last().unwrap().coeffs().iter().zip(want_fast.coeffs()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_horizon_records_initial_condition() {
        let m = 2;
        let md = model(m, zero(), zero(), CovarianceSpec::white(m), CovarianceSpec::white(m));
        let x0 = SpectralField::new(vec![1.0, 2.0]);
        let rec = run_pair(&md, SimParams::resolved(0.1, 0.1), &x0, &x0, 0.0, 5e-4, &ControlSignal::Zero, StreamKey::new(0, 0, 0))
            .unwrap();
        assert_eq!(rec.len(), 1);
        assert_eq!(rec.slow[0], x0);
    }

    #[test]
    fn identical_coupling_shares_increments() {
        let m = 3;
        let cov = CovarianceSpec::white(m).with_coupling(Coupling::Identical);
        let md = model(m, zero(), zero(), cov.clone(), cov);
        let mut st = SimState::new(SpectralField::zeros(m), SpectralField::zeros(m), StreamKey::new(5, 0, 0));
        let mut stepper = PairStepper::new(&md, SimParams::resolved(0.1, 0.1)).unwrap();
        for _ in 0..10 {
            stepper.step(&mut st, &ControlSignal::Zero).unwrap();
            assert_eq!(stepper.last_slow_noise, stepper.last_fast_noise);
        }
    }

    #[test]
    fn fast_ou_stationary_variance() {
        // dY = δ⁻²(-Y)dt + δ⁻¹dW on mode 0 (α = 1): Var → 1/2.
        let m = 1;
        let md = model(m, zero(), zero(), CovarianceSpec::zero(m), CovarianceSpec::white(m));
        let delta = 0.1;
        let p = SimParams::resolved(1.0, delta);
        let horizon = 2000.0 * delta * delta;
        let rec = run_pair(&md, p, &SpectralField::zeros(1), &SpectralField::zeros(1), horizon, 10.0 * p.dt, &ControlSignal::Zero, StreamKey::new(9, 0, 0))
            .unwrap();
        let burn = rec.len() / 50;
        let sq: Vec<f64> = rec.fast[burn..].iter().map(|f| f.coeffs()[0].powi(2)).collect();
        let (v, se, _) = correlated_mean_se(&sq);
        assert!((v - 0.5).abs() < 3.0 * se, "var {v} ± {se}");
    }

    #[test]
    fn same_seed_same_record() {
        let m = 4;
        let md = model(
            m,
            Builtin::Tanh { amplitude: 1.0, slow_gain: 0.0, fast_gain: 1.0, slow_linear: 0.0, offset: 0.0 },
            Builtin::Linear { slow: 1.0, fast: 0.0, offset: 0.0 },
            CovarianceSpec::white(m),
            CovarianceSpec::white(m),
        );
        let x0 = SpectralField::new(vec![2.0, 1.0, 0.0, 0.0]);
        let y0 = SpectralField::zeros(m);
        let p = SimParams::resolved(0.1, 0.1);
        let k = StreamKey::new(3, 1, 2);
        let a = run_pair(&md, p, &x0, &y0, 0.05, 1e-3, &ControlSignal::Zero, k).unwrap();
        let b = run_pair(&md, p, &x0, &y0, 0.05, 1e-3, &ControlSignal::Zero, k).unwrap();
        assert_eq!(a, b);
        let c = run_pair(&md, p, &x0, &y0, 0.05, 1e-3, &ControlSignal::Zero, k.with_replica(3)).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn budget_accounting_matches_table() {
        let m = 2;
        let md = model(m, zero(), zero(), CovarianceSpec::white(m), CovarianceSpec::white(m));
        let p = SimParams::resolved(0.1, 0.1);
        let table = ControlTable::from_fn(1e-2, 0.5, |t| SpectralField::new(vec![1.0 + t, -t])).unwrap();
        let energy = table.energy();
        let ctrl = ControlSignal::open_loop(table);
        let z = SpectralField::zeros(m);
        let rec = run_pair(&md, p, &z, &z, 0.6, 1e-2, &ctrl, StreamKey::new(1, 1, 1)).unwrap();
        assert!((rec.control_energy - energy).abs() < 1e-12 * energy);
        let capped = p.with_budget(0.5 * energy);
        assert!(matches!(run_pair(&md, capped, &z, &z, 0.6, 1e-2, &ctrl, StreamKey::new(1, 1, 1)), Err(Error::BudgetExceeded { .. })));
    }

    #[test]
    fn blowup_monitor_trips() {
        let m = 1;
        let grow = Builtin::Linear { slow: 50.0, fast: 0.0, offset: 0.0 };
        let md = model(m, grow, zero(), CovarianceSpec::zero(m), CovarianceSpec::zero(m));
        let p = SimParams::resolved(0.1, 0.1).with_blowup_threshold(10.0);
        let x0 = SpectralField::new(vec![1.0]);
        let err = run_pair(&md, p, &x0, &x0, 1.0, 5e-4, &ControlSignal::Zero, StreamKey::new(0, 0, 0)).unwrap_err();
        match err {
            Error::BlowUp { time, component, .. } => {
                assert_eq!(component, "X");
                assert!(time > 0.0 && time < 1.0);
            }
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn coarse_step_rejected() {
        let m = 1;
        let md = model(m, zero(), zero(), CovarianceSpec::zero(m), CovarianceSpec::zero(m));
        assert!(matches!(PairStepper::new(&md, SimParams::new(0.1, 0.1, 1e-3)), Err(Error::Hypothesis(_))));
    }

    #[test]
    fn piecewise_window_jumps_on_grid() {
        let m = 2;
        let md = model(m, zero(), Builtin::Linear { slow: 1.0, fast: 0.0, offset: 0.0 }, CovarianceSpec::zero(m), CovarianceSpec::white(m));
        let psi = |t: f64| SpectralField::new(vec![t, 0.0]);
        let rec = run_piecewise_frozen_fast(&md, &psi, 0.5, 0.1, &SpectralField::zeros(m), 1.0, 5e-4, 0.05, StreamKey::new(0, 0, 0)).unwrap();
        for (t, s) in rec.times.iter().zip(&rec.slow) {
            let want = if *t < 0.5 - 1e-12 { 0.0 } else { 0.5 };
            let want = if *t > 1.0 - 1e-12 { 1.0 } else { want };
            assert_eq!(s.coeffs()[0], want, "t = {t}");
        }
        assert!(run_piecewise_frozen_fast(&md, &psi, 0.3333, 0.1, &SpectralField::zeros(m), 1.0, 5e-4, 0.05, StreamKey::new(0, 0, 0)).is_err());
    }

    #[test]
    fn slow_decoupled_linear_matches_ou_law() {
        // dX = -X dt + √ε dW on mode 0: X(1) ~ N(e^{-1} x0, ε(1-e^{-2})/2).
        let m = 1;
        let md = model(m, zero(), zero(), CovarianceSpec::white(m), CovarianceSpec::white(m));
        let eps = 0.5;
        let x0 = SpectralField::new(vec![1.0]);
        let ends: Vec<f64> = (0..4000)
            .map(|r| {
                let rec = run_slow_decoupled(&md, eps, &x0, 1.0, 1.0, 1.0, &ControlSignal::Zero, StreamKey::new(2, 0, r)).unwrap();
                rec.slow.last().unwrap().coeffs()[0]
            })
            .collect();
        let (mean, se) = crate::stats::mean_se(&ends);
        assert!((mean - (-1f64).exp()).abs() < 3.0 * se);
        let var = crate::stats::variance(&ends);
        let want = eps * (1.0 - (-2f64).exp()) / 2.0;
        assert!((var - want).abs() < 0.05 * want, "{var} vs {want}");
    }
}
