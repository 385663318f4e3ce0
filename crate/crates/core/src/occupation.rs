//! Occupation measures `P^{ε,Δ}(du dY dt) = (1/Δ)∫_t^{t+Δ} 1_{du}(u(s)) 1_{dY}(Y(s)) ds dt`
//! of recorded trajectories, and their viable-pair diagnostics.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::functional::Functional;
use crate::ergodics::AveragedModel;
use crate::model::HypothesisParams;
use crate::path::PathSpec;
use crate::rng::{StreamKey, StreamRole};
use crate::simulator::TrajectoryRecord;
use crate::spectral::{sobolev_norm, EigenSystem, SpectralField};
use crate::stats::{integrated_autocorrelation_time, kahan_sum, weighted_mean_se, Estimate, KahanSum};

/// Atom count above which [`OccupationMeasure::thinned`] resamples.
pub const MAX_ATOMS: usize = 1_000_000;
/// Atom count after resampling.
pub const THINNED_ATOMS: usize = 100_000;
/// Bins with fewer atoms are inconclusive in [`marginal_test`].
pub const MIN_BIN_ATOMS: usize = 100;

/// One atom `(t, u, Y, w)`.
#[derive(Debug, Clone, Copy)]
pub struct Atom<'a> {
    pub t: f64,
    /// `None` for uncontrolled trajectories.
    pub u: Option<&'a SpectralField>,
    pub y: &'a SpectralField,
    pub w: f64,
}

/// Atoms on the double grid `t_i = i·h`, `s = t_i + j·h`, `j < Δ/h`,
/// each of weight `h²/Δ`. Stored implicitly as the sampled path; after
/// thinning, as an explicit list of `(i, j, w)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OccupationMeasure {
    stride: f64,
    window_steps: usize,
    time_cells: usize,
    fast: Vec<SpectralField>,
    control: Option<Vec<SpectralField>>,
    explicit: Option<Vec<(u32, u32, f64)>>,
}

/// Builds `P^{ε,Δ}` on `[0, T]` with `T = horizon(traj) - Δ`.
///
/// The control is read from the record as is; past `T` it should already
/// be zero.
pub fn build_occupation(traj: &TrajectoryRecord, window: f64) -> Result<OccupationMeasure> {
    traj.validate()?;
    if traj.fast.is_empty() {
        return Err(Error::invalid("occupation measures need a recorded fast path"));
    }
    if traj.len() < 2 {
        return Err(Error::invalid("trajectory has a single sample"));
    }
    let stride = traj.times[1] - traj.times[0];
    let ratio = window / stride;
    let window_steps = ratio.round();
    if !(window_steps >= 1.0) || (ratio - window_steps).abs() > 1e-6 {
        return Err(Error::invalid(format!(
            "window {window} is not a whole multiple of the recording stride {stride}"
        )));
    }
    let window_steps = window_steps as usize;
    let samples = traj.len() - 1;
    if samples <= window_steps {
        return Err(Error::invalid(format!(
            "trajectory covers [0, {}] but the window alone needs {window}",
            traj.horizon()
        )));
    }
    Ok(OccupationMeasure {
        stride,
        window_steps,
        time_cells: samples - window_steps,
        fast: traj.fast[..samples].to_vec(),
        control: traj.control.as_ref().map(|c| c[..samples].to_vec()),
        explicit: None,
    })
}

impl OccupationMeasure {
    pub fn stride(&self) -> f64 {
        self.stride
    }

    pub fn window(&self) -> f64 {
        self.window_steps as f64 * self.stride
    }

    pub fn horizon(&self) -> f64 {
        self.time_cells as f64 * self.stride
    }

    pub fn modes(&self) -> usize {
        self.fast[0].modes()
    }

    pub fn is_thinned(&self) -> bool {
        self.explicit.is_some()
    }

    pub fn path(&self) -> &[SpectralField] {
        &self.fast
    }

    pub fn control_path(&self) -> Option<&[SpectralField]> {
        self.control.as_deref()
    }

    pub fn len(&self) -> usize {
        match &self.explicit {
            Some(a) => a.len(),
            None => self.time_cells * self.window_steps,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn dense_weight(&self) -> f64 {
        self.stride / self.window_steps as f64
    }

    fn atom(&self, i: usize, j: usize, w: f64) -> Atom<'_> {
        let p = i + j;
        Atom { t: i as f64 * self.stride, u: self.control.as_ref().map(|c| &c[p]), y: &self.fast[p], w }
    }

    pub fn atoms(&self) -> Box<dyn Iterator<Item = Atom<'_>> + '_> {
        match &self.explicit {
            Some(list) => Box::new(list.iter().map(|&(i, j, w)| self.atom(i as usize, j as usize, w))),
            None => {
                let w = self.dense_weight();
                let k = self.window_steps;
                Box::new((0..self.time_cells).flat_map(move |i| (0..k).map(move |j| self.atom(i, j, w))))
            }
        }
    }

    /// Weight each path sample receives from the time cells `cells`, in
    /// path order: the `Y`- and `u`-marginals restricted to those times.
    pub fn path_weights(&self, cells: std::ops::Range<usize>) -> Vec<(usize, f64)> {
        let cells = cells.start.min(self.time_cells)..cells.end.min(self.time_cells);
        if cells.is_empty() {
            return Vec::new();
        }
        let k = self.window_steps;
        match &self.explicit {
            None => {
                let w = self.dense_weight();
                (cells.start..cells.end + k - 1)
                    .map(|p| {
                        let lo = cells.start.max((p + 1).saturating_sub(k));
                        let hi = (cells.end - 1).min(p);
                        (p, (hi + 1 - lo) as f64 * w)
                    })
                    .collect()
            }
            Some(list) => {
                let base = cells.start;
                let mut acc = vec![0.0; cells.len() + k - 1];
                for &(i, j, w) in list {
                    let i = i as usize;
                    if cells.contains(&i) {
                        acc[i + j as usize - base] += w;
                    }
                }
                acc.into_iter().enumerate().filter(|(_, w)| *w > 0.0).map(|(q, w)| (q + base, w)).collect()
            }
        }
    }

    /// `P(U × 𝒴 × [0, T])`.
    pub fn mass(&self) -> f64 {
        self.atoms().map(|a| a.w).collect::<KahanSum>().value()
    }

    /// `P(U × 𝒴 × [a, b))`.
    pub fn mass_between(&self, a: f64, b: f64) -> f64 {
        self.atoms().filter(|x| x.t >= a - 1e-12 * self.stride && x.t < b - 1e-12 * self.stride).map(|x| x.w).collect::<KahanSum>().value()
    }

    /// `½ ∫ |u|²_U dP`.
    pub fn control_cost(&self) -> f64 {
        0.5 * self.atoms().filter_map(|a| a.u.map(|u| a.w * u.dot(u))).collect::<KahanSum>().value()
    }

    /// `(1/T) ∫ |Y|²_{θ,2} dP`.
    pub fn sobolev_moment(&self, theta: f64, sys: &EigenSystem) -> Result<f64> {
        let weights = self.path_weights(0..self.time_cells);
        let mut s = KahanSum::new();
        for (p, w) in weights {
            s.add(w * sobolev_norm(&self.fast[p], theta, sys)?.powi(2));
        }
        Ok(s.value() / self.horizon())
    }

    /// Stratified resampling in `t`: when the measure has more than
    /// `max_atoms` atoms, every time cell keeps `⌈target/cells⌉` of its
    /// window atoms, one per equal stratum of the window, and the cell's
    /// mass is shared equally. Time marginals are preserved exactly.
    pub fn thinned(&self, max_atoms: usize, target: usize, key: StreamKey) -> OccupationMeasure {
        if self.len() <= max_atoms || self.explicit.is_some() {
            return self.clone();
        }
        let k = self.window_steps;
        let keep = target.div_ceil(self.time_cells).clamp(1, k);
        let w = self.stride / keep as f64;
        let mut rng = key.stream(StreamRole::Auxiliary);
        let mut list = Vec::with_capacity(self.time_cells * keep);
        for i in 0..self.time_cells {
            for r in 0..keep {
                let lo = r * k / keep;
                let hi = (r + 1) * k / keep;
                list.push((i as u32, rng.gen_range(lo..hi) as u32, w));
            }
        }
        OccupationMeasure { explicit: Some(list), ..self.clone() }
    }

    pub(crate) fn window_steps(&self) -> usize {
        self.window_steps
    }

    pub(crate) fn explicit(&self) -> Option<&[(u32, u32, f64)]> {
        self.explicit.as_deref()
    }

    pub(crate) fn from_parts(
        stride: f64,
        window_steps: usize,
        fast: Vec<SpectralField>,
        control: Option<Vec<SpectralField>>,
        explicit: Option<Vec<(u32, u32, f64)>>,
    ) -> Result<Self> {
        if !(stride > 0.0) || window_steps == 0 || fast.len() <= window_steps {
            return Err(Error::invalid("inconsistent occupation measure layout"));
        }
        if control.as_ref().is_some_and(|c| c.len() != fast.len()) {
            return Err(Error::invalid("control and fast paths differ in length"));
        }
        let time_cells = fast.len() - window_steps;
        if let Some(list) = &explicit {
            if list.iter().any(|&(i, j, _)| i as usize >= time_cells || j as usize >= window_steps) {
                return Err(Error::invalid("explicit atom outside the grid"));
            }
        }
        Ok(Self { stride, window_steps, time_cells, fast, control, explicit })
    }
}

/// Admissible regularity index for the tightness proxy: half the upper
/// limit `1 - β₂(ρ₂ - 2)/ρ₂` of the fast-process smoothing estimate.
pub fn tightness_theta(params: &HypothesisParams) -> f64 {
    0.5 * (1.0 - params.beta2 * (params.rho2 - 2.0) / params.rho2)
}

/// Source of `∫ f dμ^X`.
pub trait MeasureOracle: Sync {
    fn expect(&self, x: &SpectralField, f: &Functional) -> Result<Estimate>;
}

impl MeasureOracle for AveragedModel {
    fn expect(&self, x: &SpectralField, f: &Functional) -> Result<Estimate> {
        AveragedModel::expect(self, x, f)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Discrepancy {
    pub functional: Functional,
    /// `∫ f` against the bin's `Y`-marginal.
    pub occupation: Estimate,
    /// `∫ f dμ^{ψ(s)}` averaged with the same weights.
    pub reference: Estimate,
    /// `occupation - reference` with the combined SE.
    pub signed: Estimate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinResult {
    pub start: f64,
    pub end: f64,
    pub atoms: usize,
    pub inconclusive: bool,
    pub entries: Vec<Discrepancy>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarginalReport {
    pub bins: Vec<BinResult>,
    /// Largest `|discrepancy|` over conclusive bins and functionals.
    pub sup_discrepancy: f64,
    /// Largest `|discrepancy|/SE` over the same.
    pub sup_z: f64,
}

/// Compares the `Y`-marginal of `occ` on each time bin with `μ^{ψ}`.
///
/// Window atoms sample `Y(s)` at `s ≥ t`, so the reference integrates
/// `∫ f dμ^{ψ(s)}` against the bin's own path weights rather than freezing
/// `ψ` at the bin centre. The occupation SE uses the autocorrelation time
/// of the weighted series `f(Y(s))`.
pub fn marginal_test(
    occ: &OccupationMeasure,
    psi: &PathSpec,
    oracle: &dyn MeasureOracle,
    functionals: &[Functional],
    bins: usize,
) -> Result<MarginalReport> {
    if bins == 0 {
        return Err(Error::invalid("need at least one time bin"));
    }
    let span = occ.horizon() + occ.window();
    if psi.horizon() < span - 1e-9 * span {
        return Err(Error::invalid(format!("reference path ends at {} before {span}", psi.horizon())));
    }
    for f in functionals {
        f.validate(occ.modes())?;
    }
    let cells = occ.time_cells;
    let per_bin = occ.len() as f64 / cells as f64;
    let results: Result<Vec<BinResult>> = (0..bins)
        .into_par_iter()
        .map(|b| {
            let range = b * cells / bins..(b + 1) * cells / bins;
            let atoms = (range.len() as f64 * per_bin).round() as usize;
            let weights = occ.path_weights(range.clone());
            let w: Vec<f64> = weights.iter().map(|(_, w)| *w).collect();
            let wsum = kahan_sum(w.iter().copied());
            let mut entries = Vec::with_capacity(functionals.len());
            for f in functionals {
                let values: Vec<f64> = weights.iter().map(|(p, _)| f.eval(occ.fast[*p].coeffs())).collect();
                let occupation = if let Functional::Constant { value } = *f {
                    Estimate::exact(value)
                } else {
                    let (m, se) = weighted_mean_se(&values, &w, integrated_autocorrelation_time(&values));
                    Estimate::new(m, se)
                };
                let mut rv = KahanSum::new();
                let mut rs = KahanSum::new();
                for (p, wp) in &weights {
                    let e = oracle.expect(&psi.at(*p as f64 * occ.stride), f)?;
                    rv.add(wp * e.value);
                    rs.add(wp * e.se);
                }
                let reference = Estimate::new(rv.value() / wsum, rs.value() / wsum);
                let reference = if let Functional::Constant { value } = *f { Estimate::exact(value) } else { reference };
                entries.push(Discrepancy { functional: *f, occupation, reference, signed: occupation.minus(&reference) });
            }
            Ok(BinResult {
                start: range.start as f64 * occ.stride,
                end: range.end as f64 * occ.stride,
                atoms,
                inconclusive: atoms < MIN_BIN_ATOMS,
                entries,
            })
        })
        .collect();
    let bins = results?;
    let conclusive = bins.iter().filter(|b| !b.inconclusive).flat_map(|b| &b.entries);
    let (mut sup_discrepancy, mut sup_z) = (0.0f64, 0.0f64);
    for d in conclusive {
        sup_discrepancy = sup_discrepancy.max(d.signed.value.abs());
        sup_z = sup_z.max(d.signed.z_score());
    }
    Ok(MarginalReport { bins, sup_discrepancy, sup_z })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::functional::Profile;
    use crate::simulator::{RecordKind, RecordParams};
    use proptest::prelude::*;

    fn record(fast: Vec<SpectralField>, control: Option<Vec<SpectralField>>, h: f64) -> TrajectoryRecord {
        let n = fast.len();
        TrajectoryRecord {
            times: (0..n).map(|i| i as f64 * h).collect(),
            slow: vec![SpectralField::zeros(fast[0].modes()); n],
            fast,
            control,
            key: StreamKey::new(0, 0, 0),
            params: RecordParams { kind: RecordKind::Pair, epsilon: 1.0, delta: 1.0, dt: h, record_dt: h },
            control_energy: 0.0,
        }
    }

    fn ramp(n: usize) -> Vec<SpectralField> {
        (0..n).map(|i| SpectralField::new(vec![i as f64, (i as f64 * 0.3).sin()])).collect()
    }

    #[test]
    fn constant_trajectory() {
        let y = SpectralField::new(vec![0.5, -1.0]);
        let occ = build_occupation(&record(vec![y.clone(); 101], None, 0.01), 0.05).unwrap();
        assert!((occ.horizon() - 0.95).abs() < 1e-12);
        assert!((occ.mass() - 0.95).abs() < 1e-9);
        assert!(occ.atoms().all(|a| *a.y == y));
        assert_eq!(occ.len(), 95 * 5);
    }

    #[test]
    fn unit_window_is_path_measure() {
        // Δ = h: atom i is (t_i, Y(t_i)) with weight h.
        let path = ramp(21);
        let occ = build_occupation(&record(path.clone(), None, 0.1), 0.1).unwrap();
        let atoms: Vec<_> = occ.atoms().collect();
        assert_eq!(atoms.len(), 19);
        for (i, a) in atoms.iter().enumerate() {
            assert_eq!(*a.y, path[i]);
            assert!((a.w - 0.1).abs() < 1e-15 && (a.t - i as f64 * 0.1).abs() < 1e-12);
        }
    }

    #[test]
    fn window_must_match_stride() {
        let r = record(ramp(50), None, 0.01);
        assert!(build_occupation(&r, 0.015).is_err());
        assert!(build_occupation(&r, 0.6).is_err());
        assert!(build_occupation(&r, 0.02).is_ok());
    }

    #[test]
    fn control_costs() {
        let h = 0.01;
        let n = 111;
        let zero = build_occupation(&record(ramp(n), Some(vec![SpectralField::zeros(2); n]), h), 0.1).unwrap();
        assert_eq!(zero.control_cost(), 0.0);
        // |u| = 1 on [0, T], zero past T.
        let u: Vec<_> = (0..n).map(|i| SpectralField::new(vec![if i < 101 { 1.0 } else { 0.0 }, 0.0])).collect();
        let occ = build_occupation(&record(ramp(n), Some(u), h), 0.1).unwrap();
        assert!((occ.horizon() - 1.0).abs() < 1e-12);
        // Cells i ≥ 92 reach past T: 36 of their 800 atoms carry u = 0.
        let want = 0.5 * (1000.0 - 36.0) * h / 10.0;
        assert!((occ.control_cost() - want).abs() < 1e-12, "{}", occ.control_cost());
        // Ramp u(s) = s with Δ = h: left-point sum ½Σ h (ih)².
        let u: Vec<_> = (0..n).map(|i| SpectralField::new(vec![i as f64 * h, 0.0])).collect();
        let occ = build_occupation(&record(ramp(n), Some(u), h), h).unwrap();
        let want = 0.5 * (0..109).map(|i| h * (i as f64 * h).powi(2)).sum::<f64>();
        assert!((occ.control_cost() - want).abs() < 1e-12);
    }

    #[test]
    fn path_weights_are_marginals() {
        let occ = build_occupation(&record(ramp(60), None, 0.01), 0.07).unwrap();
        let all = occ.path_weights(0..occ.time_cells);
        assert!((all.iter().map(|x| x.1).sum::<f64>() - occ.mass()).abs() < 1e-12);
        // Direct summation over atoms.
        let mut direct = vec![0.0; 60];
        for a in occ.atoms().filter(|a| a.t >= 0.1 - 1e-12 && a.t < 0.3 - 1e-12) {
            let p = occ.fast.iter().position(|f| f == a.y).unwrap();
            direct[p] += a.w;
        }
        for (p, w) in occ.path_weights(10..30) {
            assert!((direct[p] - w).abs() < 1e-15, "{p}");
        }
    }

    #[test]
    fn thinning_preserves_time_marginal() {
        let occ = build_occupation(&record(ramp(401), None, 0.001), 0.1).unwrap();
        assert_eq!(occ.len(), 30_000);
        let thin = occ.thinned(10_000, 1_000, StreamKey::new(1, 2, 3));
        assert!(thin.is_thinned());
        assert_eq!(thin.len(), 1200);
        for k in 0..=30 {
            let t = k as f64 * 0.01;
            assert!((thin.mass_between(0.0, t) - t).abs() < 1e-12);
        }
        assert_eq!(occ.thinned(MAX_ATOMS, THINNED_ATOMS, StreamKey::new(0, 0, 0)), occ);
        let w: f64 = thin.path_weights(0..300).iter().map(|x| x.1).sum();
        assert!((w - 0.3).abs() < 1e-12);
    }

    struct Fixed(f64);

    impl MeasureOracle for Fixed {
        fn expect(&self, x: &SpectralField, f: &Functional) -> Result<Estimate> {
            // Point mass at (x₀ + offset, 0, …).
            let mut y = vec![0.0; x.modes()];
            y[0] = x.coeffs()[0] + self.0;
            Ok(Estimate::exact(f.eval(&y)))
        }
    }

    #[test]
    fn marginal_test_against_point_masses() {
        let n = 1201;
        let fast: Vec<_> = (0..n).map(|i| SpectralField::new(vec![i as f64 * 1e-3, 0.0])).collect();
        let occ = build_occupation(&record(fast, None, 1e-3), 0.2).unwrap();
        let psi = PathSpec::from_fn(1e-3, 1.2, |t| SpectralField::new(vec![t, 0.0])).unwrap();
        let fs = [Functional::Constant { value: 1.0 }, Functional::coordinate(0), Functional::cylinder(0, Profile::Tanh)];
        let r = marginal_test(&occ, &psi, &Fixed(0.0), &fs, 4).unwrap();
        assert_eq!(r.bins.len(), 4);
        for b in &r.bins {
            assert_eq!(b.entries[0].signed, Estimate::exact(0.0));
            assert!(b.entries[1].signed.value.abs() < 1e-12);
        }
        let shifted = marginal_test(&occ, &psi, &Fixed(1.0), &fs, 4).unwrap();
        assert!((shifted.bins[0].entries[1].signed.value + 1.0).abs() < 1e-12);
        let few = marginal_test(&occ, &psi, &Fixed(0.0), &fs, 20).unwrap();
        assert!(few.bins.iter().all(|b| b.atoms >= MIN_BIN_ATOMS));
        let tiny = build_occupation(&record((0..31).map(|i| SpectralField::new(vec![i as f64])).collect(), None, 0.1), 0.1).unwrap();
        let p1 = PathSpec::from_fn(0.1, 3.0, |t| SpectralField::new(vec![t])).unwrap();
        let r = marginal_test(&tiny, &p1, &Fixed(0.0), &[Functional::coordinate(0)], 2).unwrap();
        assert!(r.bins.iter().all(|b| b.inconclusive));
        assert_eq!(r.sup_z, 0.0);
    }

    #[test]
    fn theta_in_range() {
        let t = tightness_theta(&HypothesisParams::default());
        assert!(t > 0.0 && t < 0.5, "{t}");
    }

    proptest! {
        #[test]
        fn mass_is_additive(cells in 2usize..200, k in 1usize..20, cut in 0usize..200) {
            let h = 0.01;
            let fast: Vec<_> = (0..cells + k + 1).map(|i| SpectralField::new(vec![i as f64])).collect();
            let occ = build_occupation(&record(fast, None, h), k as f64 * h).unwrap();
            let t = (cut.min(cells)) as f64 * h;
            let total = occ.horizon();
            prop_assert!((occ.mass() - total).abs() < 1e-9);
            prop_assert!((occ.mass_between(0.0, t) + occ.mass_between(t, total + h) - total).abs() < 1e-9);
            prop_assert!((occ.mass_between(0.0, t) - t).abs() < 1e-9);
        }
    }
}
