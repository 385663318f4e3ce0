use std::time::Instant;

use slowfast::ergodics::DecoupledAverage;
use slowfast::experiments::{
    run_averaging_study, run_cost_study, run_laplace_study, run_lipschitz_study, run_measure_study, run_mixing_study,
    run_viable_pair_study, ExperimentPlan, LaplaceFunctional, ResultTable, StudyKind,
};
use slowfast::model::{zeta_series, HypothesisParams};
use slowfast::presets::preset;
use slowfast::rate::{action_value, picard_solve_control_path, EffectiveDiffusion, RateFeedback, RateMode};
use slowfast::{Boundary, EigenSystem, PathSpec, SpectralField};

const GAMMA_3_4: f64 = 1.225_416_702_465_177_6;

struct Ledger {
    failed: Vec<usize>,
}

impl Ledger {
    fn record(&mut self, n: usize, name: &str, pass: bool, started: Instant, detail: String) {
        let secs = started.elapsed().as_secs_f64();
        println!("criterion {n:>2} {:<4} {name} ({secs:.1} s): {detail}", if pass { "PASS" } else { "FAIL" });
        if !pass {
            self.failed.push(n);
        }
    }
}

fn plan(kind: StudyKind, name: &str) -> ExperimentPlan {
    ExperimentPlan::new(kind, preset(name).unwrap()).unwrap()
}

fn body(t: &ResultTable) -> String {
    t.table.to_csv().unwrap()
}

fn hypothesis_constants(l: &mut Ledger) {
    let t = Instant::now();
    let spec = preset("onemode").unwrap();
    let model = spec.model().unwrap();
    let params = HypothesisParams { beta2: 0.5, rho2: 4.0, ..spec.hypotheses };
    let report = model.check_hypotheses(&params).unwrap();
    let oracle = 1.5f64.powf(-0.75) * GAMMA_3_4;
    let rel = (report.integral_value - oracle).abs() / oracle;

    let sys = EigenSystem::laplacian(Boundary::Dirichlet, std::f64::consts::PI, 64).unwrap();
    let z = zeta_series(&sys, 1.0);
    let third = std::f64::consts::PI / 3.0;
    let zeta_err = (z.value - third).abs();
    let bracketed = (third - z.partial).abs() <= z.tail_bound;
    let pass = report.lambda == 1.0 && rel < 1e-10 && zeta_err < 1e-6 && bracketed && t.elapsed().as_secs_f64() < 1.0;
    l.record(
        1,
        "hypothesis constants",
        pass,
        t,
        format!("integral rel err {rel:.2e} (< 1e-10), zeta err {zeta_err:.2e} (< 1e-6), tail bracket {bracketed}"),
    );
}

fn ou_variances(l: &mut Ledger) {
    let t = Instant::now();
    let (r, _) = run_measure_study(&plan(StudyKind::Measure, "ou"), 8).unwrap();
    let z = r.summary["max_z"].as_f64().unwrap();
    l.record(2, "OU stationary variances", r.ok(), t, format!("max |z| over modes 0..8 = {z:.2} (<= 3)"));
}

fn ergodic_rate(l: &mut Ledger) {
    let t = Instant::now();
    let r = run_mixing_study(&plan(StudyKind::Mixing, "ou").with_replicas(32)).unwrap();
    let slope = r.summary["slope"].as_f64().unwrap_or(f64::NAN);
    l.record(3, "ergodic rate", r.ok(), t, format!("slope {slope:.3} (in [-0.65, -0.4])"));
}

fn measure_lipschitz(l: &mut Ledger) {
    let t = Instant::now();
    let r = run_lipschitz_study(&plan(StudyKind::Lipschitz, "linear"), 10).unwrap();
    let col = r.table.columns.iter().position(|c| c == "within").unwrap();
    let within = r.table.rows.iter().filter(|row| row[col] == "true").count();
    l.record(4, "measure Lipschitz", r.ok(), t, format!("{within}/10 pairs within L|dX| + 3 SE"));
}

fn averaging(l: &mut Ledger) -> String {
    let t = Instant::now();
    let r = run_averaging_study(&plan(StudyKind::Averaging, "tanh").with_replicas(32)).unwrap();
    let rms = r.table.column("rms_sup_error").unwrap();
    l.record(
        5,
        "averaging",
        r.ok(),
        t,
        format!(
            "RMS sup error {:?}, monotone {}, finest < {:.4}",
            rms.iter().map(|x| format!("{x:.4}")).collect::<Vec<_>>(),
            r.summary["monotone"],
            r.summary["threshold"].as_f64().unwrap()
        ),
    );
    body(&r)
}

fn viable_pair(l: &mut Ledger) {
    let t = Instant::now();
    let r = run_viable_pair_study(&plan(StudyKind::ViablePair, "tanh")).unwrap();
    l.record(
        6,
        "viable-pair marginal",
        r.ok(),
        t,
        format!(
            "finest max |z| {} (<= 3), shifted control |z| {} (> 5), decreasing {}",
            r.summary["finest_max_z"], r.summary["shifted_max_z"], r.summary["decreasing"]
        ),
    );
}

fn onemode_action(dt: f64) -> f64 {
    let model = preset("onemode").unwrap().model().unwrap();
    let avg = DecoupledAverage::build(&model);
    let eff = EffectiveDiffusion::new(&avg).unwrap();
    let psi = PathSpec::from_fn(dt, 1.0, |t| SpectralField::new(vec![t])).unwrap();
    action_value(&psi, &eff, RateMode::Sigma1YIndependent).unwrap().value
}

fn closed_form_action(l: &mut Ledger) {
    let t = Instant::now();
    let exact = 7.0 / 6.0;
    let errs: Vec<f64> = [1e-3, 5e-4, 2.5e-4].iter().map(|&dt| (onemode_action(dt) - exact).abs()).collect();
    let slope = (errs[0] / errs[1]).log2().min((errs[1] / errs[2]).log2());
    let pass = errs[0] < 1e-4 && slope >= 1.8 && t.elapsed().as_secs_f64() < 1.0;
    l.record(7, "action closed form", pass, t, format!("|S - 7/6| = {:.2e} (< 1e-4), Richardson slope {slope:.2} (>= 1.8)", errs[0]));
}

fn picard_replay(l: &mut Ledger) {
    let t = Instant::now();
    let model = preset("onemode").unwrap().model().unwrap();
    let avg = DecoupledAverage::build(&model);
    let eff = EffectiveDiffusion::new(&avg).unwrap();
    let dt = 1e-3;
    let target =
        PathSpec::from_fn(dt, 1.0, |t| SpectralField::new(vec![0.3 + 0.5 * (3.0 * t).sin() + t * t])).unwrap();
    let r = action_value(&target, &eff, RateMode::Sigma1YIndependent).unwrap();
    let fb = RateFeedback::new(&avg, &target, &r).unwrap();
    let tol = 1e-6;
    let sol = picard_solve_control_path(target.start(), Some(&fb), &avg, 1.0, dt, tol).unwrap();
    let err = sol.path.sup_distance(&target).unwrap();
    let pass = err < 5.0 * tol && t.elapsed().as_secs_f64() < 10.0;
    l.record(8, "Picard self-consistency", pass, t, format!("sup error {err:.2e} (< 5e-6), {} iterations", sol.iterations));
}

fn cost(l: &mut Ledger) {
    let t = Instant::now();
    let r = run_cost_study(&plan(StudyKind::Cost, "tanh")).unwrap();
    let gaps = r.table.column("rms_gap").unwrap();
    let half = gaps.len() / 2;
    let fmt = |g: &[f64]| g.iter().map(|x| format!("{x:.4}")).collect::<Vec<_>>().join(", ");
    l.record(
        9,
        "cost convergence",
        r.ok(),
        t,
        format!(
            "RMS gap along schedule [{}], decreasing {}; fixed delta [{}], stalled {}",
            fmt(&gaps[..half]),
            r.summary["decreasing"],
            fmt(&gaps[half..]),
            r.summary["negative_control_stalled"]
        ),
    );
}

fn laplace(l: &mut Ledger) -> String {
    let t = Instant::now();
    let spec = preset("laplace").unwrap();
    let h = LaplaceFunctional::from_spec(&spec);
    let r = run_laplace_study(&plan(StudyKind::Laplace, "laplace").with_replicas(4096), &h).unwrap();
    let gaps = r.table.column("gap").unwrap();
    let se = r.table.column("gap_se").unwrap();
    let eps = r.table.column("epsilon").unwrap();
    let rows: Vec<String> =
        eps.iter().zip(&gaps).zip(&se).map(|((e, g), s)| format!("eps {e}: gap {g:.5} ± {s:.5}")).collect();
    l.record(
        10,
        "Laplace principle",
        r.ok(),
        t,
        format!("rhs {:.5}; {}; tolerance max(0.15 rhs, 3 SE)", r.summary["rhs"].as_f64().unwrap(), rows.join(", ")),
    );
    body(&r)
}

fn determinism(l: &mut Ledger, averaging_csv: &str, laplace_csv: &str) {
    let t = Instant::now();
    // A different pool size must not change a byte.
    let pool = rayon::ThreadPoolBuilder::new().num_threads(3).build().unwrap();
    let (a, b) = pool.install(|| {
        let a = run_averaging_study(&plan(StudyKind::Averaging, "tanh").with_replicas(32)).unwrap();
        let spec = preset("laplace").unwrap();
        let h = LaplaceFunctional::from_spec(&spec);
        let b = run_laplace_study(&plan(StudyKind::Laplace, "laplace").with_replicas(4096), &h).unwrap();
        (body(&a), body(&b))
    });
    let same = (a == averaging_csv, b == laplace_csv);
    l.record(11, "determinism", same.0 && same.1, t, format!("averaging identical {}, Laplace identical {}", same.0, same.1));
}

#[test]
fn acceptance() {
    let mut l = Ledger { failed: Vec::new() };
    hypothesis_constants(&mut l);
    ou_variances(&mut l);
    ergodic_rate(&mut l);
    measure_lipschitz(&mut l);
    let averaging_csv = averaging(&mut l);
    viable_pair(&mut l);
    closed_form_action(&mut l);
    picard_replay(&mut l);
    cost(&mut l);
    let laplace_csv = laplace(&mut l);
    determinism(&mut l, &averaging_csv, &laplace_csv);
    assert!(l.failed.is_empty(), "failed criteria: {:?}", l.failed);
}
