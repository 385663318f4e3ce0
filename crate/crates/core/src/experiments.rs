//! End-to-end studies driven by a [`ModelSpec`], each producing a
//! [`ResultTable`] whose CSV body depends only on the configuration and seed.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::ergodics::{
    estimate_invariant_measure, solve_averaged_path, verify_measure_lipschitz, verify_mixing_rate, AveragedModel,
    MeasureOptions,
};
use crate::error::{Error, Result};
use crate::functional::{Functional, Profile};
use crate::io::{num, Table};
use crate::model::{check_regime, ModelSpec, RegimeEntry, RegimeSchedule, SlowFastModel};
use crate::occupation::{build_occupation, marginal_test};
use crate::path::PathSpec;
use crate::rate::{
    action_value, cost_convergence_experiment, picard_solve_control_path, CylinderControl, EffectiveDiffusion,
    RateFeedback, RateMode, RateResult,
};
use crate::rng::{StreamKey, StreamRole};
use crate::simulator::{run_pair, run_slow_decoupled, ControlSignal, SimParams};
use crate::spectral::SpectralField;
use crate::stats::{correlated_mean_se, jackknife_from_sums, mean_se, Estimate};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StudyKind {
    Averaging,
    ViablePair,
    Laplace,
    Mixing,
    Hypcheck,
    RateEval,
    Measure,
    Lipschitz,
    Cost,
}

impl StudyKind {
    /// Kinds whose schedule must pass the regime check.
    pub fn needs_regime(self) -> bool {
        matches!(self, StudyKind::Averaging | StudyKind::ViablePair | StudyKind::Cost)
    }
}

#[derive(Debug, Clone)]
pub struct ExperimentPlan {
    pub kind: StudyKind,
    pub spec: ModelSpec,
    pub schedule: Option<RegimeSchedule>,
    pub replicas: usize,
    pub seed: u64,
    /// Restricts the schedule to one entry, keeping its stream index.
    pub entry: Option<usize>,
}

impl ExperimentPlan {
    pub fn new(kind: StudyKind, spec: ModelSpec) -> Result<Self> {
        Ok(Self {
            kind,
            schedule: spec.schedule()?,
            replicas: spec.run.replicas,
            seed: spec.rng.seed,
            entry: None,
            spec,
        })
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_replicas(mut self, replicas: usize) -> Self {
        self.replicas = replicas;
        self
    }

    pub fn with_entry(mut self, entry: Option<usize>) -> Self {
        self.entry = entry;
        self
    }

    pub fn key(&self) -> StreamKey {
        StreamKey::new(self.seed, 0, 0)
    }

    pub fn validate(&self) -> Result<()> {
        if self.replicas == 0 {
            return Err(Error::config("replicas must be at least 1"));
        }
        if self.kind.needs_regime() {
            let s = self.schedule.as_ref().ok_or_else(|| Error::config("this study needs a [regime] schedule"))?;
            let report = check_regime(s)?;
            if !report.pass {
                return Err(Error::Hypothesis(format!("schedule fails the regime check: {}", report.failures.join("; "))));
            }
        }
        if let (Some(e), Some(s)) = (self.entry, &self.schedule) {
            if e >= s.entries.len() {
                return Err(Error::config(format!("entry {e} out of range: schedule has {}", s.entries.len())));
            }
        }
        Ok(())
    }

    /// Selected `(index, entry)` pairs.
    pub fn entries(&self) -> Result<Vec<(usize, RegimeEntry)>> {
        let s = self.schedule.as_ref().ok_or_else(|| Error::config("this study needs a [regime] schedule"))?;
        Ok(s.entries.iter().copied().enumerate().filter(|(i, _)| self.entry.is_none_or(|e| e == *i)).collect())
    }

    fn model(&self) -> Result<SlowFastModel> {
        self.spec.model()
    }

    fn measure_options(&self) -> MeasureOptions {
        MeasureOptions::default().with_horizon(self.spec.run.ergodic_horizon).with_dt(self.spec.run.natural_dt)
    }

    fn averaged(&self, model: &SlowFastModel) -> AveragedModel {
        AveragedModel::auto(model, self.measure_options(), self.key().with_entry(u64::MAX))
    }
}

/// A study's output: the CSV table, a verdict and a JSON summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultTable {
    pub kind: StudyKind,
    pub table: Table,
    pub pass: bool,
    pub summary: Value,
}

impl ResultTable {
    /// Passing, and no NaN anywhere in the table.
    pub fn ok(&self) -> bool {
        self.pass && !self.table.has_nan()
    }
}

fn est_cells(e: Estimate) -> [String; 2] {
    [num(e.value), num(e.se)]
}

fn not_above(later: Estimate, earlier: Estimate, k: f64) -> bool {
    later.value <= earlier.value + k * later.se.hypot(earlier.se)
}

fn averaged_reference(averaged: &AveragedModel, x0: &SpectralField, horizon: f64, dt: f64) -> Result<PathSpec> {
    Ok(solve_averaged_path(averaged, x0, &ControlSignal::Zero, horizon, dt)?.path)
}

/// `sup_t |X^{ε,δ}(t) - ψ(t)|_H` on the recording grid, per schedule entry.
///
/// Replicas that blow up are dropped and counted.
pub fn run_averaging_study(plan: &ExperimentPlan) -> Result<ResultTable> {
    plan.validate()?;
    let model = plan.model()?;
    let run = &plan.spec.run;
    let x0 = plan.spec.initial_slow()?;
    let y0 = plan.spec.initial_fast()?;
    let averaged = plan.averaged(&model);
    let psi = averaged_reference(&averaged, &x0, run.horizon, run.record_dt)?;
    let mut table = Table::new(
        "averaging",
        &[
            "entry", "epsilon", "delta", "window", "dt", "replicas", "blowups", "mean_sup_error", "mean_sup_error_se",
            "rms_sup_error", "rms_sup_error_se",
        ],
    );
    let mut rms_rows = Vec::new();
    for (e, entry) in plan.entries()? {
        let params = SimParams::new(entry.epsilon, entry.delta, entry.dt).with_blowup_threshold(run.blowup_threshold);
        let errors: Vec<Option<f64>> = (0..plan.replicas)
            .into_par_iter()
            .map(|r| {
                let key = plan.key().with_entry(e as u64).with_replica(r as u64);
                match run_pair(&model, params, &x0, &y0, run.horizon, run.record_dt, &ControlSignal::Zero, key) {
                    Ok(rec) => Ok(Some(
                        rec.slow.iter().zip(psi.fields()).map(|(x, p)| x.distance(p)).fold(0.0, f64::max),
                    )),
                    Err(Error::BlowUp { .. }) => Ok(None),
                    Err(err) => Err(err),
                }
            })
            .collect::<Result<_>>()?;
        let kept: Vec<f64> = errors.iter().flatten().copied().collect();
        let blowups = errors.len() - kept.len();
        if kept.len() < 2 {
            return Err(Error::invalid(format!("entry {e}: {blowups} of {} replicas blew up", errors.len())));
        }
        let (m, se) = mean_se(&kept);
        let sq: Vec<f64> = kept.iter().map(|x| x * x).collect();
        let (m2, se2) = mean_se(&sq);
        let rms = Estimate::new(m2.sqrt(), se2 / (2.0 * m2.sqrt().max(f64::MIN_POSITIVE)));
        rms_rows.push(rms);
        let mut row = vec![
            e.to_string(),
            num(entry.epsilon),
            num(entry.delta),
            num(entry.window),
            num(entry.dt),
            kept.len().to_string(),
            blowups.to_string(),
        ];
        row.extend(est_cells(Estimate::new(m, se)));
        row.extend(est_cells(rms));
        table.push(row)?;
    }
    let monotone = rms_rows.windows(2).all(|w| not_above(w[1], w[0], 2.0));
    let threshold = 0.05 * x0.norm();
    let finest = rms_rows.last().map_or(f64::NAN, |r| r.value);
    Ok(ResultTable {
        kind: StudyKind::Averaging,
        pass: monotone && finest < threshold,
        summary: json!({ "monotone": monotone, "finest_rms": finest, "threshold": threshold, "backend": averaged.backend() }),
        table,
    })
}

/// Functionals compared in the viable-pair study.
pub fn viable_functionals() -> Vec<Functional> {
    vec![
        Functional::coordinate(0),
        Functional::cylinder(0, Profile::Tanh),
        Functional::cylinder(1, Profile::SmoothStep { center: 0.0, width: 0.5 }),
    ]
}

fn shifted(psi: &PathSpec, shift: f64) -> Result<PathSpec> {
    PathSpec::new(
        psi.dt(),
        psi.fields()
            .iter()
            .map(|f| {
                let mut g = f.clone();
                g.coeffs_mut()[0] += shift;
                g
            })
            .collect(),
    )
}

/// Max over bins and functionals of `|mean_r d_r| / SE_r`, with the
/// signed discrepancies `d_r` of the replicas.
fn replica_z(reports: &[Vec<f64>]) -> f64 {
    let cells = reports[0].len();
    (0..cells)
        .map(|c| {
            let d: Vec<f64> = reports.iter().map(|r| r[c]).collect();
            let (m, se) = mean_se(&d);
            if se > 0.0 { m.abs() / se } else if m == 0.0 { 0.0 } else { f64::INFINITY }
        })
        .fold(0.0, f64::max)
}

/// Simulator → occupation measure → `Y`-marginal test, per schedule entry.
pub fn run_viable_pair_study(plan: &ExperimentPlan) -> Result<ResultTable> {
    plan.validate()?;
    let model = plan.model()?;
    let run = &plan.spec.run;
    let study = &plan.spec.study;
    let x0 = plan.spec.initial_slow()?;
    let y0 = plan.spec.initial_fast()?;
    let averaged = plan.averaged(&model);
    let psi = averaged_reference(&averaged, &x0, run.horizon, run.record_dt)?;
    let psi_shift = shifted(&psi, study.shifted_path)?;
    let functionals = viable_functionals();
    let mut table = Table::new(
        "viable_pair",
        &[
            "entry", "epsilon", "delta", "window", "replicas", "blowups", "sup_discrepancy", "sup_discrepancy_se",
            "max_z", "shifted_max_z",
        ],
    );
    let mut trend = Vec::new();
    let mut last = (f64::NAN, f64::NAN);
    for (e, entry) in plan.entries()? {
        let params = SimParams::new(entry.epsilon, entry.delta, entry.dt).with_blowup_threshold(run.blowup_threshold);
        let outcomes: Vec<Option<(f64, Vec<f64>, Vec<f64>)>> = (0..plan.replicas)
            .into_par_iter()
            .map(|r| {
                let key = plan.key().with_entry(e as u64).with_replica(r as u64);
                let rec = match run_pair(&model, params, &x0, &y0, run.horizon, run.record_dt, &ControlSignal::Zero, key) {
                    Ok(rec) => rec,
                    Err(Error::BlowUp { .. }) => return Ok(None),
                    Err(err) => return Err(err),
                };
                let occ = build_occupation(&rec, entry.window)?;
                let signed = |rep: &crate::occupation::MarginalReport| -> Vec<f64> {
                    rep.bins.iter().flat_map(|b| b.entries.iter().map(|d| d.signed.value)).collect()
                };
                let main = marginal_test(&occ, &psi, &averaged, &functionals, study.bins)?;
                let neg = marginal_test(&occ, &psi_shift, &averaged, &functionals, study.bins)?;
                Ok(Some((main.sup_discrepancy, signed(&main), signed(&neg))))
            })
            .collect::<Result<_>>()?;
        let kept: Vec<_> = outcomes.into_iter().flatten().collect();
        let blowups = plan.replicas - kept.len();
        if kept.len() < 2 {
            return Err(Error::invalid(format!("entry {e}: {blowups} of {} replicas blew up", plan.replicas)));
        }
        let sups: Vec<f64> = kept.iter().map(|k| k.0).collect();
        let (m, se) = mean_se(&sups);
        let main: Vec<Vec<f64>> = kept.iter().map(|k| k.1.clone()).collect();
        let neg: Vec<Vec<f64>> = kept.iter().map(|k| k.2.clone()).collect();
        let (z, zs) = (replica_z(&main), replica_z(&neg));
        trend.push(Estimate::new(m, se));
        last = (z, zs);
        let mut row = vec![
            e.to_string(),
            num(entry.epsilon),
            num(entry.delta),
            num(entry.window),
            kept.len().to_string(),
            blowups.to_string(),
        ];
        row.extend(est_cells(Estimate::new(m, se)));
        row.extend([num(z), num(zs)]);
        table.push(row)?;
    }
    let decreasing = trend.windows(2).all(|w| not_above(w[1], w[0], 2.0));
    let consistent = last.0 <= 3.0;
    let control_detected = last.1 > 5.0;
    Ok(ResultTable {
        kind: StudyKind::ViablePair,
        pass: decreasing && consistent && control_detected,
        summary: json!({
            "decreasing": decreasing,
            "finest_max_z": last.0,
            "shifted_max_z": last.1,
            "functionals": functionals,
        }),
        table,
    })
}

/// Bounded functionals `h(φ) = H(⟨φ(T), e₀⟩)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LaplaceFunctional {
    Zero,
    /// `min(cap, scale·z²)`
    ClippedQuadratic { scale: f64, cap: f64 },
    /// `min(cap, scale·|z|)`
    ClippedLinear { scale: f64, cap: f64 },
}

impl LaplaceFunctional {
    pub fn eval(&self, z: f64) -> f64 {
        match *self {
            LaplaceFunctional::Zero => 0.0,
            LaplaceFunctional::ClippedQuadratic { scale, cap } => (scale * z * z).min(cap),
            LaplaceFunctional::ClippedLinear { scale, cap } => (scale * z.abs()).min(cap),
        }
    }

    pub fn from_spec(spec: &ModelSpec) -> Self {
        LaplaceFunctional::ClippedQuadratic { scale: spec.study.h_scale, cap: spec.study.h_cap }
    }
}

/// `-ε ln((1/R) Σ exp(-h_r/ε))` with the jackknife SE and the effective
/// sample size of the weights. The value itself is not bias-corrected.
pub fn laplace_estimate(h: &[f64], epsilon: f64) -> (Estimate, f64) {
    let hmin = h.iter().copied().fold(f64::INFINITY, f64::min);
    let w: Vec<f64> = h.iter().map(|v| (-(v - hmin) / epsilon).exp()).collect();
    let (_, se) = jackknife_from_sums(&w, |m| hmin - epsilon * m.ln());
    let s1: f64 = w.iter().sum();
    let s2: f64 = w.iter().map(|x| x * x).sum();
    let plain = hmin - epsilon * (s1 / w.len() as f64).ln();
    (Estimate::new(plain, se), s1 * s1 / s2)
}

/// Paths `ψ_z` steering mode 0 from the free path to `z` at `T` with the
/// minimal-energy profile `sinh(κt)/sinh(κT)`, `κ` the mode-0 relaxation rate.
pub struct QuadraticFamily {
    free: PathSpec,
    kappa: f64,
}

impl QuadraticFamily {
    pub fn new(averaged: &AveragedModel, x0: &SpectralField, horizon: f64, dt: f64) -> Result<Self> {
        let model = averaged.model();
        let a = model.coeffs.b1.affine().filter(|a| a.fast == 0.0).ok_or_else(|| {
            Error::config("the Laplace study needs b1 affine in X and independent of Y")
        })?;
        Ok(Self {
            free: averaged_reference(averaged, x0, horizon, dt)?,
            kappa: model.slow_sys.alphas()[0] - a.slow,
        })
    }

    pub fn free_end(&self) -> f64 {
        self.free.end().coeffs()[0]
    }

    pub fn path(&self, z: f64) -> Result<PathSpec> {
        let t_end = self.free.horizon();
        let shape = |t: f64| {
            if self.kappa.abs() < 1e-12 {
                t / t_end
            } else {
                (self.kappa * t).sinh() / (self.kappa * t_end).sinh()
            }
        };
        let lift = z - self.free_end();
        let fields = self
            .free
            .fields()
            .iter()
            .enumerate()
            .map(|(i, f)| {
                let mut g = f.clone();
                g.coeffs_mut()[0] += lift * shape(i as f64 * self.free.dt());
                g
            })
            .collect();
        PathSpec::new(self.free.dt(), fields)
    }
}

/// Golden-section minimum of `f` on `[a, b]`.
pub fn golden_section(mut a: f64, mut b: f64, tol: f64, mut f: impl FnMut(f64) -> Result<f64>) -> Result<(f64, f64)> {
    let r = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = b - r * (b - a);
    let mut d = a + r * (b - a);
    let (mut fc, mut fd) = (f(c)?, f(d)?);
    while (b - a).abs() > tol {
        if fc < fd {
            b = d;
            d = c;
            fd = fc;
            c = b - r * (b - a);
            fc = f(c)?;
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + r * (b - a);
            fd = f(d)?;
        }
    }
    let x = 0.5 * (a + b);
    Ok((x, f(x)?))
}

/// `inf_z S(ψ_z) + h(ψ_z)` over the one-mode family.
pub fn laplace_rhs(family: &QuadraticFamily, eff: &EffectiveDiffusion, h: &LaplaceFunctional) -> Result<(f64, f64)> {
    let objective = |z: f64| -> Result<f64> {
        let r = action_value(&family.path(z)?, eff, RateMode::Sigma1YIndependent)?;
        Ok(r.value + h.eval(z))
    };
    let m = family.free_end();
    let span = m.abs().max(1e-3);
    let (lo, hi) = (m.min(0.0) - 1e-3 * span, m.max(0.0) + 1e-3 * span);
    let (z, v) = golden_section(lo, hi, 1e-9 * span, objective)?;
    let at_free = objective(m)?;
    Ok(if at_free <= v { (m, at_free) } else { (z, v) })
}

/// Both sides of the Laplace principle along the `ε` schedule.
///
/// The slow equation must not depend on `Y`: it is then sampled exactly
/// and no regime condition applies.
pub fn run_laplace_study(plan: &ExperimentPlan, h: &LaplaceFunctional) -> Result<ResultTable> {
    plan.validate()?;
    let model = plan.model()?;
    let c = &model.coeffs;
    if !c.slow_decoupled() || c.sigma1.affine().and_then(|a| a.constant()).is_none() {
        return Err(Error::config("the Laplace study needs b1 independent of Y and constant sigma1"));
    }
    let run = &plan.spec.run;
    let x0 = plan.spec.initial_slow()?;
    let averaged = plan.averaged(&model);
    let eff = EffectiveDiffusion::new(&averaged)?;
    let family = QuadraticFamily::new(&averaged, &x0, run.horizon, (run.natural_dt / 10.0).min(1e-3))?;
    let (z_star, rhs) = laplace_rhs(&family, &eff, h)?;
    let mut table = Table::new(
        "laplace",
        &["entry", "epsilon", "replicas", "lhs", "lhs_se", "rhs", "gap", "gap_se", "ess", "inconclusive"],
    );
    let mut rows = Vec::new();
    for (e, entry) in plan.entries()? {
        let hs: Vec<f64> = (0..plan.replicas)
            .into_par_iter()
            .map(|r| {
                let key = plan.key().with_entry(e as u64).with_replica(r as u64);
                let rec = run_slow_decoupled(
                    &model,
                    entry.epsilon,
                    &x0,
                    run.horizon,
                    run.natural_dt,
                    run.horizon,
                    &ControlSignal::Zero,
                    key,
                )?;
                Ok(h.eval(rec.slow.last().expect("recorded endpoint").coeffs()[0]))
            })
            .collect::<Result<_>>()?;
        let (lhs, ess) = laplace_estimate(&hs, entry.epsilon);
        let gap = lhs.value - rhs;
        let inconclusive = ess < 50.0;
        rows.push((entry.epsilon, gap, lhs.se, inconclusive));
        table.push(vec![
            e.to_string(),
            num(entry.epsilon),
            plan.replicas.to_string(),
            num(lhs.value),
            num(lhs.se),
            num(rhs),
            num(gap),
            num(lhs.se),
            num(ess),
            inconclusive.to_string(),
        ])?;
    }
    let tol = |se: f64| (0.15 * rhs.abs()).max(3.0 * se).max(1e-12);
    let finest = rows.iter().min_by(|a, b| a.0.total_cmp(&b.0)).copied();
    let coarsest = rows.iter().max_by(|a, b| a.0.total_cmp(&b.0)).copied();
    let converged = finest.is_some_and(|(_, g, se, inc)| !inc && g.abs() <= tol(se));
    let trivial = matches!(h, LaplaceFunctional::Zero) || rows.len() < 2;
    let separated = coarsest.is_some_and(|(_, g, se, _)| g.abs() > tol(se));
    let notes: Vec<String> = rows
        .iter()
        .filter(|r| r.3)
        .map(|r| format!("epsilon = {}: effective sample size below 50; use a smaller h scale", r.0))
        .collect();
    Ok(ResultTable {
        kind: StudyKind::Laplace,
        pass: converged && (trivial || separated),
        summary: json!({
            "h": h,
            "rhs": rhs,
            "z_star": z_star,
            "converged_at_finest": converged,
            "separated_at_coarsest": separated,
            "notes": notes,
        }),
        table,
    })
}

/// Time-average RMS error of `⟨Y, e₀⟩` against the exact or estimated mean.
pub fn run_mixing_study(plan: &ExperimentPlan) -> Result<ResultTable> {
    plan.validate()?;
    let model = plan.model()?;
    let x = plan.spec.initial_slow()?;
    let f = Functional::coordinate(0);
    let averaged = plan.averaged(&model);
    let reference = averaged.gaussian().map(|_| averaged.expect(&x, &f)).transpose()?.map(|e| e.value);
    let times = &plan.spec.study.mixing_times;
    let report = verify_mixing_rate(&model, &x, &f, times, plan.replicas, plan.spec.run.natural_dt, reference, plan.key())?;
    let mut table = Table::new("mixing", &["horizon", "replicas", "rms_error", "rms_error_se"]);
    for (t, e) in report.times.iter().zip(&report.rms) {
        let mut row = vec![num(*t), report.replicas.to_string()];
        row.extend(est_cells(*e));
        table.push(row)?;
    }
    Ok(ResultTable {
        kind: StudyKind::Mixing,
        pass: report.pass,
        summary: json!({ "slope": report.slope, "slope_se": report.slope_se, "reference": report.reference }),
        table,
    })
}

/// Empirical per-mode variances of `μ^{X₀}` against the Gaussian oracle.
pub fn run_measure_study(plan: &ExperimentPlan, modes: usize) -> Result<(ResultTable, crate::ergodics::EmpiricalMeasure)> {
    plan.validate()?;
    let model = plan.model()?;
    let x = plan.spec.initial_slow()?;
    let mu = estimate_invariant_measure(&model, &x, &plan.measure_options(), plan.key())?;
    let averaged = plan.averaged(&model);
    let exact = averaged.gaussian().map(|g| g.variances().to_vec());
    let modes = modes.min(model.modes());
    let mut table = Table::new("measure", &["mode", "variance", "variance_se", "exact", "z"]);
    let mut worst = 0.0f64;
    for k in 0..modes {
        let ys: Vec<f64> = mu.samples().iter().map(|s| s.coeffs()[k]).collect();
        let (m, _, _) = correlated_mean_se(&ys);
        let sq: Vec<f64> = ys.iter().map(|y| (y - m) * (y - m)).collect();
        let (v, se, _) = correlated_mean_se(&sq);
        let want = exact.as_ref().map_or(f64::NAN, |e| e[k]);
        let z = if exact.is_some() { (v - want).abs() / se } else { f64::NAN };
        if z.is_finite() {
            worst = worst.max(z);
        }
        table.push(vec![k.to_string(), num(v), num(se), num(want), num(z)])?;
    }
    let pass = exact.is_none() || worst <= 3.0;
    let summary = json!({ "max_z": worst, "samples": mu.len(), "iact": mu.iact(), "oracle": exact.is_some() });
    let table = if exact.is_some() { table } else { strip_oracle(table) };
    Ok((ResultTable { kind: StudyKind::Measure, table, pass, summary }, mu))
}

fn strip_oracle(t: Table) -> Table {
    let mut out = Table::new("measure", &["mode", "variance", "variance_se"]);
    for r in t.rows {
        out.rows.push(r[..3].to_vec());
    }
    out
}

/// `|F(X₁) - F(X₂)| ≤ L_f |X₁ - X₂|_H + 3 SE` for random pairs, with `F` the
/// clipped mode-0 coordinate averaged against `μ^X`.
pub fn run_lipschitz_study(plan: &ExperimentPlan, pairs: usize) -> Result<ResultTable> {
    plan.validate()?;
    let model = plan.model()?;
    let m = model.modes();
    let f = Functional::cylinder(0, Profile::Clipped { bound: 1.0 });
    let mut rng = plan.key().with_entry(1 << 32).stream(StreamRole::Auxiliary);
    let draws: Vec<(SpectralField, SpectralField)> = (0..pairs)
        .map(|_| {
            let mut g = || SpectralField::new((0..m).map(|_| rng.gen_range(-1.0..1.0)).collect());
            (g(), g())
        })
        .collect();
    let opts = plan.measure_options();
    let checks: Vec<_> = draws
        .par_iter()
        .enumerate()
        .map(|(i, (a, b))| verify_measure_lipschitz(&model, a, b, &f, &opts, plan.key().with_replica(i as u64)))
        .collect::<Result<_>>()?;
    let mut table = Table::new("lipschitz", &["pair", "difference", "difference_se", "distance", "bound", "within"]);
    let mut pass = true;
    for (i, c) in checks.iter().enumerate() {
        let within = c.difference.value.abs() <= c.bound;
        pass &= within;
        let mut row = vec![i.to_string()];
        row.extend(est_cells(c.difference));
        row.extend([num(c.distance), num(c.bound), within.to_string()]);
        table.push(row)?;
    }
    Ok(ResultTable { kind: StudyKind::Lipschitz, pass, summary: json!({ "functional": f, "pairs": pairs }), table })
}

/// Hypothesis constants and the regime check as one report.
pub fn run_hypcheck(plan: &ExperimentPlan) -> Result<ResultTable> {
    let model = plan.model()?;
    let report = model.check_hypotheses(&plan.spec.hypotheses)?;
    let regime = plan.schedule.as_ref().map(check_regime).transpose()?;
    let mut table = Table::new("hypcheck", &["check", "pass", "detail"]);
    let value = serde_json::to_value(&report)?;
    for c in value["checks"].as_array().into_iter().flatten() {
        table.push(vec![
            c["name"].as_str().unwrap_or("?").into(),
            c["pass"].as_bool().unwrap_or(false).to_string(),
            c["detail"].as_str().unwrap_or("").into(),
        ])?;
    }
    if let Some(r) = &regime {
        table.push(vec!["regime".into(), r.pass.to_string(), r.failures.join("; ")])?;
    }
    Ok(ResultTable {
        kind: StudyKind::Hypcheck,
        pass: report.pass() && regime.as_ref().is_none_or(|r| r.pass),
        summary: json!({ "hypotheses": report, "regime": regime }),
        table,
    })
}

/// `ψ(t) = ψ̄(t) + shift·(t/T)·e₀` around the averaged path `ψ̄`.
pub fn default_rate_path(plan: &ExperimentPlan, averaged: &AveragedModel) -> Result<PathSpec> {
    let run = &plan.spec.run;
    let base = averaged_reference(averaged, &plan.spec.initial_slow()?, run.horizon, run.natural_dt)?;
    let shift = plan.spec.study.shifted_path;
    let t_end = base.horizon();
    PathSpec::new(
        base.dt(),
        base.fields()
            .iter()
            .enumerate()
            .map(|(i, f)| {
                let mut g = f.clone();
                g.coeffs_mut()[0] += shift * i as f64 * base.dt() / t_end;
                g
            })
            .collect(),
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateReport {
    pub result: RateResult,
    /// `sup |ψ_Picard - ψ|_H` when the feedback was replayed.
    pub picard_error: Option<f64>,
    pub picard_iterations: Option<usize>,
}

/// `S(ψ)` for `path` (or [`default_rate_path`]) and, for feedback controls,
/// the Picard replay of the controlled averaged equation.
pub fn run_rate_eval(plan: &ExperimentPlan, path: Option<PathSpec>, tol: f64) -> Result<RateReport> {
    let model = plan.model()?;
    let averaged = plan.averaged(&model);
    let eff = EffectiveDiffusion::new(&averaged)?;
    let path = match path {
        Some(p) => p,
        None => default_rate_path(plan, &averaged)?,
    };
    let mode = if model.coeffs.sigma1.depends_on_fast() { RateMode::GeneralD1 } else { RateMode::Sigma1YIndependent };
    let result = action_value(&path, &eff, mode)?;
    let (mut picard_error, mut picard_iterations) = (None, None);
    if matches!(result.control, crate::rate::ControlDescriptor::Feedback { .. }) && result.value.is_finite() {
        let fb = RateFeedback::new(&averaged, &path, &result)?;
        let sol = picard_solve_control_path(path.start(), Some(&fb), &averaged, path.horizon(), path.dt(), tol)?;
        picard_error = Some(sol.path.sup_distance(&path)?);
        picard_iterations = Some(sol.iterations);
    }
    Ok(RateReport { result, picard_error, picard_iterations })
}

/// Control used by the cost-convergence study.
pub fn cost_control() -> CylinderControl {
    CylinderControl { mode: 0, amplitude: 1.0, ramp: 1.0, profile: Some(Profile::Tanh) }
}

/// Monte-Carlo cost gap of the piecewise-frozen fast process along the
/// schedule, with the fixed-`δ` negative control.
pub fn run_cost_study(plan: &ExperimentPlan) -> Result<ResultTable> {
    plan.validate()?;
    let model = plan.model()?;
    let run = &plan.spec.run;
    let averaged = plan.averaged(&model);
    let psi = averaged_reference(&averaged, &plan.spec.initial_slow()?, run.horizon, run.record_dt)?;
    let schedule = RegimeSchedule::new(plan.entries()?.into_iter().map(|(_, e)| e).collect());
    let control = cost_control();
    let main = cost_convergence_experiment(&control, &psi, &averaged, &schedule, run.horizon, plan.replicas, plan.key(), true)?;
    let fixed_delta = main.rows.first().map_or(0.1, |r| r.delta);
    let stalled_schedule = RegimeSchedule::new(
        schedule
            .entries
            .iter()
            .map(|e| RegimeEntry { delta: fixed_delta, dt: fixed_delta * fixed_delta / crate::model::FAST_SUBSTEPS, ..*e })
            .collect(),
    );
    let neg = cost_convergence_experiment(
        &control,
        &psi,
        &averaged,
        &stalled_schedule,
        run.horizon,
        plan.replicas,
        plan.key().with_entry(1 << 20),
        false,
    )?;
    let mut table = Table::new(
        "cost",
        &[
            "schedule", "epsilon", "delta", "window", "replicas", "cost", "cost_se", "reference", "mean_gap",
            "mean_gap_se", "rms_gap", "rms_gap_se",
        ],
    );
    for (label, t) in [("regime", &main), ("fixed_delta", &neg)] {
        for r in &t.rows {
            let mut row = vec![label.into(), num(r.epsilon), num(r.delta), num(r.window), r.replicas.to_string()];
            row.extend(est_cells(r.cost));
            row.push(num(r.reference));
            row.extend(est_cells(r.mean_gap));
            row.extend(est_cells(r.rms_gap));
            table.push(row)?;
        }
    }
    let stalled = match (neg.rows.first(), neg.rows.last(), main.rows.last()) {
        (Some(first), Some(last), Some(fine)) => {
            last.rms_gap.value >= 0.5 * first.rms_gap.value
                && last.rms_gap.value - fine.rms_gap.value > 3.0 * last.rms_gap.se.hypot(fine.rms_gap.se)
        }
        _ => false,
    };
    Ok(ResultTable {
        kind: StudyKind::Cost,
        pass: main.decreasing && stalled,
        summary: json!({ "decreasing": main.decreasing, "negative_control_stalled": stalled, "control": control }),
        table,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::presets::preset;

    fn plan(kind: StudyKind, name: &str) -> ExperimentPlan {
        ExperimentPlan::new(kind, preset(name).unwrap()).unwrap()
    }

    #[test]
    fn plan_validation() {
        let p = plan(StudyKind::Averaging, "tanh");
        assert!(p.validate().is_ok());
        assert!(p.clone().with_replicas(0).validate().is_err());
        assert!(p.clone().with_entry(Some(3)).validate().is_err());
        assert_eq!(p.clone().with_entry(Some(1)).entries().unwrap()[0].0, 1);
        assert!(plan(StudyKind::Averaging, "ou").validate().is_err());
    }

    #[test]
    fn golden_section_finds_minimum() {
        let (x, v) = golden_section(-1.0, 3.0, 1e-10, |x| Ok((x - 0.7).powi(2) + 2.0)).unwrap();
        assert!((x - 0.7).abs() < 1e-7 && (v - 2.0).abs() < 1e-12, "{x} {v}");
    }

    #[test]
    fn laplace_estimator_limits() {
        let (e, ess) = laplace_estimate(&[0.0; 10], 0.1);
        assert_eq!(e.value, 0.0);
        assert_eq!(ess, 10.0);
        let (e, _) = laplace_estimate(&[2.0; 10], 0.1);
        assert!((e.value - 2.0).abs() < 1e-15);
        // Two atoms: -ε ln((e^{-a/ε} + e^{-b/ε})/2).
        let (e, ess) = laplace_estimate(&[0.0, 1.0], 0.5);
        let want = -0.5 * ((1.0 + (-2.0f64).exp()) / 2.0).ln();
        assert!((e.value - want).abs() < 1e-14);
        assert!(ess < 2.0);
    }

    #[test]
    fn laplace_rhs_closed_form() {
        // Free end m = x₀e^{-T}, s² = (1 - e^{-2T})/2: inf = a m²/(1 + 2 a s²).
        let spec = preset("laplace").unwrap();
        let p = ExperimentPlan::new(StudyKind::Laplace, spec.clone()).unwrap();
        let model = p.model().unwrap();
        let averaged = p.averaged(&model);
        let eff = EffectiveDiffusion::new(&averaged).unwrap();
        let x0 = spec.initial_slow().unwrap();
        let family = QuadraticFamily::new(&averaged, &x0, 1.0, 1e-3).unwrap();
        let a = spec.study.h_scale;
        let m = 0.2 * (-1.0f64).exp();
        let s2 = (1.0 - (-2.0f64).exp()) / 2.0;
        let h = LaplaceFunctional::from_spec(&spec);
        let (z, v) = laplace_rhs(&family, &eff, &h).unwrap();
        assert!((v - a * m * m / (1.0 + 2.0 * a * s2)).abs() < 1e-6 * v.max(1e-3), "{v}");
        assert!((z - m / (1.0 + 2.0 * a * s2)).abs() < 1e-4);
        let (_, zero) = laplace_rhs(&family, &eff, &LaplaceFunctional::Zero).unwrap();
        assert!(zero.abs() < 1e-10);
        assert!((2.0 * a * s2 - 1.0).abs() < 1e-3);
    }

    #[test]
    fn laplace_zero_functional_is_exact() {
        let p = plan(StudyKind::Laplace, "laplace").with_replicas(64);
        let t = run_laplace_study(&p, &LaplaceFunctional::Zero).unwrap();
        assert!(t.pass);
        for g in t.table.column("gap").unwrap() {
            assert!(g.abs() < 1e-10);
        }
        for v in t.table.column("lhs").unwrap() {
            assert_eq!(v, 0.0);
        }
    }

    #[test]
    fn small_studies_are_deterministic() {
        let p = plan(StudyKind::Averaging, "tanh").with_entry(Some(0)).with_replicas(4);
        let a = run_averaging_study(&p).unwrap();
        let b = run_averaging_study(&p).unwrap();
        assert_eq!(a.table.to_csv().unwrap(), b.table.to_csv().unwrap());
        let c = run_averaging_study(&p.clone().with_seed(1)).unwrap();
        assert_ne!(a.table.rows, c.table.rows);
    }

    #[test]
    fn hypcheck_tables() {
        let t = run_hypcheck(&plan(StudyKind::Hypcheck, "linear")).unwrap();
        assert!(t.pass, "{:?}", t.table);
        assert!(t.table.rows.len() > 3);
    }

    #[test]
    fn rate_eval_on_shifted_path() {
        let spec = preset("onemode").unwrap();
        let p = ExperimentPlan::new(StudyKind::RateEval, spec).unwrap();
        let r = run_rate_eval(&p, None, 1e-8).unwrap();
        // ψ = e^{-t}x₀ + t e₀ with x₀ = 0: g = 1 + t, so S = 7/6.
        assert!((r.result.value - 7.0 / 6.0).abs() < 1e-4, "{}", r.result.value);
        assert!(r.picard_error.unwrap() < 5e-8);
    }
}
