//! Scale schedules `(ε, δ, Δ, dt)` along which the limits are taken.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::stats::linear_fit;

/// Number of integration steps per fast relaxation time `δ²`.
pub const FAST_SUBSTEPS: f64 = 20.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegimeEntry {
    pub epsilon: f64,
    pub delta: f64,
    /// Occupation window `Δ`.
    pub window: f64,
    pub dt: f64,
}

impl RegimeEntry {
    /// `δ/√ε`
    pub fn slow_ratio(&self) -> f64 {
        self.delta / self.epsilon.sqrt()
    }

    /// `δ/(Δ√ε)`
    pub fn window_ratio(&self) -> f64 {
        self.delta / (self.window * self.epsilon.sqrt())
    }

    /// Largest admissible step, `δ²/20`.
    pub fn max_dt(&self) -> f64 {
        self.delta * self.delta / FAST_SUBSTEPS
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegimeSchedule {
    pub entries: Vec<RegimeEntry>,
}

impl RegimeSchedule {
    pub fn new(entries: Vec<RegimeEntry>) -> Self {
        Self { entries }
    }

    /// `δ = ε`, `Δ = scale·ε^{1/4}` snapped to a multiple of `stride`, and
    /// `dt = δ²/20`.
    ///
    /// Then `δ/√ε = ε^{1/2}` and `δ/(Δ√ε) ∝ ε^{1/4}` both vanish.
    pub fn diagonal(epsilons: &[f64], window_scale: f64, stride: f64) -> Self {
        let entries = epsilons
            .iter()
            .map(|&eps| {
                let raw = window_scale * eps.powf(0.25);
                let window = ((raw / stride).round().max(1.0)) * stride;
                RegimeEntry { epsilon: eps, delta: eps, window, dt: eps * eps / FAST_SUBSTEPS }
            })
            .collect();
        Self { entries }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegimeReport {
    pub pass: bool,
    pub slow_ratios: Vec<f64>,
    pub window_ratios: Vec<f64>,
    /// Fitted `p` in `δ/√ε ∝ ε^p`; positive means the ratio vanishes.
    pub slow_exponent: f64,
    /// Fitted `p` in `δ/(Δ√ε) ∝ ε^p`.
    pub window_exponent: f64,
    /// Smallest relative decrease between consecutive entries, per ratio.
    pub slow_margin: f64,
    pub window_margin: f64,
    pub failures: Vec<String>,
}

/// Checks the scale ordering of a schedule.
///
/// An entry whose step does not resolve the fast scale is an error rather
/// than a failed check.
pub fn check_regime(schedule: &RegimeSchedule) -> Result<RegimeReport> {
    let e = &schedule.entries;
    if e.len() < 2 {
        return Err(Error::invalid("a regime schedule needs at least 2 entries"));
    }
    for (i, entry) in e.iter().enumerate() {
        let vals = [entry.epsilon, entry.delta, entry.window, entry.dt];
        if vals.iter().any(|v| !(*v > 0.0) || !v.is_finite()) {
            return Err(Error::invalid(format!("entry {i}: all of (epsilon, delta, window, dt) must be positive")));
        }
        if entry.dt > entry.max_dt() * (1.0 + 1e-12) {
            return Err(Error::Hypothesis(format!(
                "entry {i}: dt = {} exceeds delta^2/20 = {}",
                entry.dt,
                entry.max_dt()
            )));
        }
    }
    let slow: Vec<f64> = e.iter().map(RegimeEntry::slow_ratio).collect();
    let window: Vec<f64> = e.iter().map(RegimeEntry::window_ratio).collect();
    let mut failures = Vec::new();
    if e.windows(2).any(|w| w[1].epsilon >= w[0].epsilon) {
        failures.push("entries are not ordered by decreasing epsilon".to_string());
    }
    let margin = |r: &[f64]| r.windows(2).map(|w| (w[0] - w[1]) / w[0]).fold(f64::INFINITY, f64::min);
    let slow_margin = margin(&slow);
    let window_margin = margin(&window);
    if !(slow_margin > 0.0) {
        failures.push("delta/sqrt(epsilon) is not strictly decreasing".to_string());
    }
    if !(window_margin > 0.0) {
        failures.push("delta/(window*sqrt(epsilon)) is not strictly decreasing".to_string());
    }
    let log_eps: Vec<f64> = e.iter().map(|x| x.epsilon.ln()).collect();
    let fit = |r: &[f64]| {
        let logs: Vec<f64> = r.iter().map(|v| v.ln()).collect();
        linear_fit(&log_eps, &logs).1
    };
    let slow_exponent = fit(&slow);
    let window_exponent = fit(&window);
    if !(slow_exponent > 0.0) {
        failures.push(format!("fitted exponent of delta/sqrt(epsilon) is {slow_exponent}, not positive"));
    }
    if !(window_exponent > 0.0) {
        failures.push(format!("fitted exponent of delta/(window*sqrt(epsilon)) is {window_exponent}, not positive"));
    }
    Ok(RegimeReport {
        pass: failures.is_empty(),
        slow_ratios: slow,
        window_ratios: window,
        slow_exponent,
        window_exponent,
        slow_margin,
        window_margin,
        failures,
    })
}
