//! Acceptance suite: one runner per criterion, each with its own reference
//! computation, plus artifact writing for the `selftest` command.

use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

use rand::Rng as _;
use serde::Serialize;
use serde_json::{json, Value};

use crate::engine::{
    estimate_gamma1, estimate_gamma2, CompletionPolicy, ConstantStrategy, ExtremalShift, FeedbackStrategy, Game,
    Partition, RandomMixtures, StrategyResponse, ValueOracle,
};
use crate::error::{Error, Result};
use crate::flow::{solve_flow, ControlDistribution, FlowSettings, RelaxedControl};
use crate::game::{mean_vectogram_distance_at, ControlGrid, DynamicsFamily, DynamicsSpec, Modulus, Side};
use crate::measure::{Atom, DiscreteMeasure};
use crate::ot::{w2, wasserstein2, GroundMetric};
use crate::rng::{stream, Rng};
use crate::scenario::{Scenario, FIXTURE_NAMES};
use crate::shift::{compose_plan, xi_shift};
use crate::stability::{
    check_infinitesimal, check_infinitesimal_refined, check_integral, euler_polygon, Check, CheckSettings,
    CylindricalFunctional, MeasureFunctional, TauLadder, Verdict,
};
use crate::torus::{torus_distance_sq, wrap, TorusPoint};

#[derive(Debug, Clone, Serialize)]
pub struct Criterion {
    pub id: usize,
    pub title: String,
    pub pass: bool,
    pub measured: String,
    pub threshold: String,
    pub details: Value,
    /// Wall time in seconds; kept out of artifacts.
    #[serde(skip)]
    pub seconds: f64,
    #[serde(skip)]
    pub budget_seconds: f64,
}

impl Criterion {
    pub fn within_budget(&self) -> bool {
        self.seconds <= self.budget_seconds
    }

    pub fn line(&self) -> String {
        format!(
            "{} criterion {:>2} {}: measured {} (threshold {}), {:.2}s of {:.0}s",
            if self.pass && self.within_budget() { "PASS" } else { "FAIL" },
            self.id,
            self.title,
            self.measured,
            self.threshold,
            self.seconds,
            self.budget_seconds
        )
    }
}

fn timed(id: usize, title: &str, budget: f64, f: impl FnOnce() -> Result<(bool, String, String, Value)>) -> Criterion {
    let start = Instant::now();
    let (pass, measured, threshold, details) = match f() {
        Ok(r) => r,
        Err(e) => (false, format!("error: {e}"), "-".into(), Value::Null),
    };
    Criterion {
        id,
        title: title.into(),
        pass,
        measured,
        threshold,
        details,
        seconds: start.elapsed().as_secs_f64(),
        budget_seconds: budget,
    }
}

pub const CRITERIA: usize = 10;

pub fn run_criterion(id: usize, seed: u64) -> Criterion {
    match id {
        1 => ot_brute_force(seed),
        2 => shift_fuzz(seed),
        3 => vectogram_fuzz(seed),
        4 => flow_fidelity(),
        5 => forward_consistency(seed),
        6 => integral_consistency(seed),
        7 => negative_control(seed),
        8 => extremal_shift_guarantee(seed),
        9 => ordering(seed),
        10 => determinism(seed),
        _ => timed(id, "unknown criterion", 0.0, || Err(Error::structural("no such criterion"))),
    }
}

/// Criteria 1 to 9; criterion 10 compares artifacts of two such runs.
pub fn run_all(seed: u64) -> Vec<Criterion> {
    (1..CRITERIA).map(|id| run_criterion(id, seed)).collect()
}

pub fn summary_table(results: &[Criterion]) -> String {
    let mut out = String::from("id | result | measured | threshold | seconds\n");
    for c in results {
        out.push_str(&format!(
            "{:>2} | {} | {} | {} | {:.2}\n",
            c.id,
            if c.pass && c.within_budget() { "PASS" } else { "FAIL" },
            c.measured,
            c.threshold,
            c.seconds
        ));
    }
    out
}

/// One JSON file per criterion plus `summary.csv`; no timings, so repeated
/// runs with one seed are byte-identical.
pub fn write_artifacts(dir: &Path, seed: u64, results: &[Criterion]) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut csv = format!("# provenance {}\nid,pass,measured,threshold\n", json!({ "command": "selftest", "seed": seed }));
    for c in results {
        let body = json!({ "provenance": { "command": "selftest", "seed": seed }, "criterion": c });
        std::fs::write(dir.join(format!("criterion_{:02}.json", c.id)), serde_json::to_string_pretty(&body)?)?;
        csv.push_str(&format!("{},{},\"{}\",\"{}\"\n", c.id, c.pass, c.measured, c.threshold));
    }
    std::fs::write(dir.join("summary.csv"), csv)?;
    Ok(())
}

fn random_cloud(rng: &mut Rng, n: usize, d: usize) -> DiscreteMeasure {
    DiscreteMeasure::uniform((0..n).map(|_| TorusPoint::new((0..d).map(|_| rng.gen::<f64>()).collect::<Vec<_>>())).collect())
        .expect("nonempty")
}

fn brute_force_w2(a: &DiscreteMeasure, b: &DiscreteMeasure) -> f64 {
    let n = a.len();
    let cost: Vec<Vec<f64>> = a
        .atoms()
        .iter()
        .map(|x| b.atoms().iter().map(|y| torus_distance_sq(&x.point, &y.point)).collect())
        .collect();
    let mut perm: Vec<usize> = (0..n).collect();
    let mut best = f64::INFINITY;
    // Heap's algorithm over all n! assignments.
    let mut c = vec![0usize; n];
    let eval = |p: &[usize]| p.iter().enumerate().map(|(i, &j)| cost[i][j]).sum::<f64>();
    best = best.min(eval(&perm));
    let mut i = 0;
    while i < n {
        if c[i] < i {
            if i % 2 == 0 {
                perm.swap(0, i);
            } else {
                perm.swap(c[i], i);
            }
            best = best.min(eval(&perm));
            c[i] += 1;
            i = 0;
        } else {
            c[i] = 0;
            i += 1;
        }
    }
    (best / n as f64).sqrt()
}

fn ot_brute_force(seed: u64) -> Criterion {
    timed(1, "exact transport against permutation brute force", 30.0, || {
        let mut rng = stream(seed, "c1");
        let mut worst: f64 = 0.0;
        for _ in 0..1000 {
            let n = rng.gen_range(1..=6);
            let d = rng.gen_range(1..=2);
            let a = random_cloud(&mut rng, n, d);
            let b = random_cloud(&mut rng, n, d);
            let (got, _) = wasserstein2(&a, &b, &GroundMetric::default())?;
            worst = worst.max((got - brute_force_w2(&a, &b)).abs());
        }
        Ok((worst <= 1e-9, format!("max |error| {worst:.2e} over 1000"), "1e-9".into(), json!({ "max_error": worst })))
    })
}

fn mean_field_spec() -> DynamicsSpec {
    Scenario::fixture("mean_field_attraction").expect("bundled").spec
}

fn random_direction_measure(rng: &mut Rng, controls: usize, c: f64) -> DiscreteMeasure {
    let atoms = rng.gen_range(1..=6);
    let list = (0..atoms)
        .map(|_| {
            Atom::with_direction(
                TorusPoint::scalar(rng.gen()),
                rng.gen_range(0..controls),
                vec![rng.gen_range(-c..=c)],
                rng.gen_range(0.05..1.0),
            )
        })
        .collect();
    DiscreteMeasure::normalized(list).expect("positive weights")
}

fn random_control_measure(rng: &mut Rng, controls: usize) -> DiscreteMeasure {
    let atoms = rng.gen_range(1..=6);
    let list = (0..atoms)
        .map(|_| Atom::with_control(TorusPoint::scalar(rng.gen()), rng.gen_range(0..controls), rng.gen_range(0.05..1.0)))
        .collect();
    DiscreteMeasure::normalized(list).expect("positive weights")
}

fn shift_fuzz(seed: u64) -> Criterion {
    timed(2, "shift operators are Lipschitz along optimal plans", 60.0, || {
        let spec = mean_field_spec();
        let ground = spec.ground_metric(Side::First);
        let mut rng = stream(seed, "c2");
        let mut violations = 0;
        let mut worst = f64::NEG_INFINITY;
        for _ in 0..500 {
            let c = rng.gen_range(0.1..2.0);
            let eta = random_direction_measure(&mut rng, spec.u_grid.len(), c);
            let alpha = eta.state_control_marginal()?.merged();
            let alpha_p = random_control_measure(&mut rng, spec.u_grid.len());
            let tau = rng.gen_range(0.0..0.5);
            let theta = rng.gen_range(0.0..0.5);
            let (d, pi) = wasserstein2(&alpha_p, &alpha, &ground)?;
            let composed = compose_plan(&pi, &alpha_p, &alpha, &eta)?;
            let lhs = w2(&xi_shift(&eta, tau)?, &xi_shift(&composed, theta)?, &ground)?;
            let excess = lhs - d - (tau - theta).abs() * c;
            worst = worst.max(excess);
            if excess > 1e-7 {
                violations += 1;
            }
        }
        Ok((violations == 0, format!("{violations} violations, max excess {worst:.2e}"), "excess <= 1e-7".into(), json!({ "violations": violations, "max_excess": worst })))
    })
}

fn vectogram_fuzz(seed: u64) -> Criterion {
    timed(3, "vectogram distance is stable along optimal plans", 120.0, || {
        let spec = mean_field_spec();
        let ground = spec.ground_metric(Side::First);
        let mut rng = stream(seed, "c3");
        let mut violations = 0;
        let mut worst = f64::NEG_INFINITY;
        for _ in 0..500 {
            let eta = random_direction_measure(&mut rng, spec.u_grid.len(), 2.0);
            let alpha = eta.state_control_marginal()?.merged();
            let alpha_p = random_control_measure(&mut rng, spec.u_grid.len());
            let t = rng.gen_range(0.0..1.0);
            let t_p = rng.gen_range(0.0..1.0);
            let (d, pi) = wasserstein2(&alpha_p, &alpha, &ground)?;
            let eta_p = compose_plan(&pi, &alpha_p, &alpha, &eta)?;
            let lhs = (mean_vectogram_distance_at(&spec, Side::First, t, &eta, &alpha.state_marginal())?
                - mean_vectogram_distance_at(&spec, Side::First, t_p, &eta_p, &alpha_p.state_marginal())?)
            .abs();
            let excess = lhs - spec.modulus.eval((t_p - t).abs()) - 2.0 * spec.lipschitz * d;
            worst = worst.max(excess);
            if excess > 1e-7 {
                violations += 1;
            }
        }
        Ok((violations == 0, format!("{violations} violations, max excess {worst:.2e}"), "excess <= 1e-7".into(), json!({ "violations": violations, "max_excess": worst })))
    })
}

/// Direct RK4 integration of the coupled particle system.
fn coupled_ode(strength: f64, a: f64, b: f64, x0: &[f64], u: &[f64], v: &[f64], horizon: f64, steps: usize) -> Vec<f64> {
    let two_pi = 2.0 * std::f64::consts::PI;
    let n = x0.len();
    let rhs = |x: &[f64]| -> Vec<f64> {
        (0..n)
            .map(|i| strength * x.iter().map(|y| (two_pi * (y - x[i])).sin()).sum::<f64>() / n as f64 + a * u[i] + b * v[i])
            .collect()
    };
    let h = horizon / steps as f64;
    let mut x = x0.to_vec();
    for _ in 0..steps {
        let k1 = rhs(&x);
        let x2: Vec<f64> = (0..n).map(|i| x[i] + 0.5 * h * k1[i]).collect();
        let k2 = rhs(&x2);
        let x3: Vec<f64> = (0..n).map(|i| x[i] + 0.5 * h * k2[i]).collect();
        let k3 = rhs(&x3);
        let x4: Vec<f64> = (0..n).map(|i| x[i] + h * k3[i]).collect();
        let k4 = rhs(&x4);
        for i in 0..n {
            x[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
        }
    }
    x.into_iter().map(wrap).collect()
}

fn flow_fidelity() -> Criterion {
    timed(4, "self-consistent flow against coupled ODE", 60.0, || {
        let sc = Scenario::fixture("mean_field_attraction")?;
        let DynamicsFamily::MeanFieldAttraction { strength, u_scale, v_scale } = sc.dynamics else {
            return Err(Error::structural("fixture family changed"));
        };
        let spec = &sc.spec;
        let n = sc.initial.len();
        let ui: Vec<usize> = (0..n).map(|i| i % 2).collect();
        let vj: Vec<usize> = (0..n).map(|i| (i + 1) % 2).collect();
        let alpha = DiscreteMeasure::new(
            sc.initial.atoms().iter().zip(&ui).map(|(a, &u)| Atom::with_control(a.point.clone(), u, a.weight)).collect(),
        )?;
        let run = |dt: f64| -> Result<(DiscreteMeasure, f64)> {
            let kappa = ControlDistribution::complete(spec, Side::First, &alpha, 0.0, sc.horizon, |i, _| {
                vec![(RelaxedControl::constant(vj[i], spec.v_grid.len(), 0.0, sc.horizon), 1.0)]
            })?;
            let settings = FlowSettings { dt, ..sc.knobs.flow() };
            let sol = solve_flow(spec, 0.0, sc.horizon, &sc.initial, &kappa, Side::First, &settings)?;
            let last = sol.ensemble.times.len() - 1;
            let res = crate::flow::verify_flow(spec, Side::First, &sol.ensemble, 0, last)?;
            Ok((sol.terminal(), res))
        };
        let x0: Vec<f64> = sc.initial.atoms().iter().map(|a| a.point.coords()[0]).collect();
        let uu: Vec<f64> = ui.iter().map(|&i| spec.u_grid.get(i)[0]).collect();
        let vv: Vec<f64> = vj.iter().map(|&j| spec.v_grid.get(j)[0]).collect();
        let exact = coupled_ode(strength, u_scale, v_scale, &x0, &uu, &vv, sc.horizon, 100_000);
        let oracle = DiscreteMeasure::uniform(exact.into_iter().map(TorusPoint::scalar).collect())?;
        let (terminal, _) = run(1e-3)?;
        let err = w2(&terminal, &oracle, &GroundMetric::default())?;
        let residuals: Vec<f64> = [1e-2, 1e-3, 1e-4].iter().map(|&dt| run(dt).map(|r| r.1)).collect::<Result<_>>()?;
        let orders: Vec<f64> = residuals.windows(2).map(|w| (w[0] / w[1]).log10()).collect();
        let min_order = orders.iter().copied().fold(f64::INFINITY, f64::min);
        Ok((
            err <= 1e-5 && min_order >= 0.9,
            format!("endpoint W2 {err:.2e}, residual order {min_order:.3}"),
            "W2 <= 1e-5, order >= 0.9".into(),
            json!({ "endpoint_w2": err, "residuals": residuals, "orders": orders }),
        ))
    })
}

/// Oracle value on the separable fixture: 8 cells, 2 particles, 16 steps.
pub fn separable_oracle() -> Result<(Scenario, ValueOracle)> {
    let sc = Scenario::fixture("separable_affine")?;
    let oracle = ValueOracle::build(&sc.spec, &sc.payoff, 8, 2, 16, sc.t0, sc.horizon)?;
    Ok((sc, oracle))
}

/// Grid-node position: node time, particles on cells, random controls.
fn grid_position(rng: &mut Rng, oracle: &ValueOracle, spec: &DynamicsSpec, last_step: usize) -> (f64, DiscreteMeasure, DiscreteMeasure) {
    let k = rng.gen_range(0..last_step);
    let pts: Vec<TorusPoint> = (0..oracle.particles)
        .map(|_| TorusPoint::scalar(rng.gen_range(0..oracle.cells) as f64 / oracle.cells as f64))
        .collect();
    let w = 1.0 / pts.len() as f64;
    let alpha = DiscreteMeasure::new(pts.iter().map(|p| Atom::with_control(p.clone(), rng.gen_range(0..spec.u_grid.len()), w)).collect())
        .expect("valid");
    let beta = DiscreteMeasure::new(pts.iter().map(|p| Atom::with_control(p.clone(), rng.gen_range(0..spec.v_grid.len()), w)).collect())
        .expect("valid");
    (oracle.node_time(k), alpha, beta)
}

fn oracle_settings(sc: &Scenario, oracle: &ValueOracle, seed: u64) -> CheckSettings {
    CheckSettings {
        ladder: TauLadder {
            tau0: oracle.dt(),
            levels: 1,
            tail: 1,
        },
        seed,
        ..CheckSettings::for_spec(&sc.spec, sc.horizon, 64)
    }
}

fn forward_consistency(seed: u64) -> Criterion {
    timed(5, "oracle value passes both infinitesimal checks", 600.0, || {
        let (sc, oracle) = separable_oracle()?;
        let settings = oracle_settings(&sc, &oracle, seed);
        let mut rng = stream(seed, "c5");
        let mut fails = 0;
        let mut inconclusive = 0;
        let mut worst_u = f64::NEG_INFINITY;
        let mut worst_v = f64::INFINITY;
        for _ in 0..50 {
            let (s, alpha, beta) = grid_position(&mut rng, &oracle, &sc.spec, oracle.steps);
            let u = check_infinitesimal_refined(&oracle, &sc.spec, Check::U, s, &beta, &settings)?;
            let v = check_infinitesimal_refined(&oracle, &sc.spec, Check::V, s, &alpha, &settings)?;
            worst_u = worst_u.max(u.best_value);
            worst_v = worst_v.min(v.best_value);
            for r in [&u, &v] {
                match r.verdict {
                    Verdict::Fail => fails += 1,
                    Verdict::Inconclusive => inconclusive += 1,
                    Verdict::Pass => {}
                }
            }
        }
        Ok((
            fails == 0,
            format!("{fails} certified failures, {inconclusive} inconclusive, worst u {worst_u:.3e}, worst v {worst_v:.3e}"),
            format!("0 failures at tol {:.4}", settings.tol),
            json!({ "fails": fails, "inconclusive": inconclusive, "tol": settings.tol, "worst_u": worst_u, "worst_v": worst_v }),
        ))
    })
}

fn integral_consistency(seed: u64) -> Criterion {
    timed(6, "integral check and Euler polygons on the oracle value", 600.0, || {
        let (sc, oracle) = separable_oracle()?;
        let mut settings = oracle_settings(&sc, &oracle, seed);
        settings.budget = 200;
        let flow = sc.knobs.flow();
        let mut rng = stream(seed, "c6");
        let mut integral_fails = Vec::new();
        for _ in 0..10 {
            let (s, alpha, _) = grid_position(&mut rng, &oracle, &sc.spec, oracle.steps - 2);
            let k = rng.gen_range(2..=4).min(((sc.horizon - s) / oracle.dt()).round() as usize);
            let r = s + k as f64 * oracle.dt();
            let rep = check_integral(&oracle, &sc.spec, Check::V, s, r, &alpha, k, &flow, &settings)?;
            if rep.verdict != Verdict::Pass {
                integral_fails.push(json!({ "s": s, "r": r, "verdict": rep.verdict, "best": rep.best_value }));
            }
        }
        let poly_settings = CheckSettings {
            seed,
            ..CheckSettings::for_spec(&sc.spec, sc.horizon, 64)
        };
        let alpha_star = DiscreteMeasure::new(
            sc.initial.atoms().iter().enumerate().map(|(i, a)| Atom::with_control(a.point.clone(), i % sc.spec.u_grid.len(), a.weight)).collect(),
        )?;
        let (s, r) = (sc.t0, sc.t0 + 0.5);
        let mut polys = Vec::new();
        let mut ok = integral_fails.is_empty();
        let mut residuals = Vec::new();
        for n in [8usize, 16, 32] {
            match euler_polygon(&oracle, &sc.spec, s, r, &alpha_star, n, &poly_settings) {
                Ok(p) => {
                    let allowance = p.residual_bound + 2.0 * flow.dt * sc.spec.speed_bound;
                    let good = p.ledger_margin >= 0.0 && p.residual <= allowance;
                    ok &= good;
                    residuals.push(p.residual);
                    polys.push(json!({ "n": n, "ledger_margin": p.ledger_margin, "residual": p.residual, "allowance": allowance, "steps": p.steps.len() }));
                }
                Err(e) => {
                    ok = false;
                    polys.push(json!({ "n": n, "error": e.to_string() }));
                }
            }
        }
        let monotone = residuals.len() == 3 && residuals.windows(2).all(|w| w[1] <= w[0]);
        ok &= monotone;
        Ok((
            ok,
            format!("{} integral non-passes, polygon residuals {:?}", integral_fails.len(), residuals),
            "all pass; residual <= bound; nonincreasing in n".into(),
            json!({ "integral_non_passes": integral_fails, "polygons": polys }),
        ))
    })
}

/// `psi = -t` under `f = 0`.
pub fn negative_control_setup() -> (DynamicsSpec, CylindricalFunctional) {
    let spec = DynamicsSpec::new(
        1,
        ControlGrid::scalars(&[-1.0, 1.0]),
        ControlGrid::scalars(&[-1.0, 1.0]),
        Arc::new(DynamicsFamily::SeparableAffine {
            u_scale: 0.0,
            v_scale: 0.0,
            drift: vec![],
        }),
        1.0,
        Modulus::Linear { k: 1.0 },
        1.0,
    )
    .expect("valid");
    (spec, CylindricalFunctional::time(-1.0))
}

fn negative_control(seed: u64) -> Criterion {
    timed(7, "negative control is certified failed", 10.0, || {
        let (spec, psi) = negative_control_setup();
        let settings = CheckSettings {
            seed,
            ..CheckSettings::for_spec(&spec, 1.0, 64)
        };
        let alpha = DiscreteMeasure::new(vec![
            Atom::with_control(TorusPoint::scalar(0.2), 0, 0.5),
            Atom::with_control(TorusPoint::scalar(0.7), 1, 0.5),
        ])?;
        let v = check_infinitesimal(&psi, &spec, Check::V, 0.3, &alpha, &settings)?;
        // The u-side of the same claim, read through the player-swapped game.
        let mirror = spec.mirrored();
        let neg = CylindricalFunctional::time(1.0);
        let u = check_infinitesimal(&neg, &mirror, Check::U, 0.3, &alpha, &settings)?;
        let stuck = matches!(euler_polygon(&psi, &spec, 0.0, 1.0, &alpha, 8, &settings), Err(Error::PolygonStuck { step: 0, .. }));
        let codes = (v.verdict.exit_code(), u.verdict.exit_code());
        Ok((
            codes == (2, 2) && stuck,
            format!("exit codes v={} u={}, polygon stuck at step 0: {stuck}", codes.0, codes.1),
            "exit 2, stuck at 0".into(),
            json!({ "v": v.best_value, "u": u.best_value, "stuck": stuck }),
        ))
    })
}

fn extremal_shift_guarantee(seed: u64) -> Criterion {
    timed(8, "extremal shift guarantees the oracle value", 300.0, || {
        let (sc, oracle) = separable_oracle()?;
        let psi: Arc<dyn MeasureFunctional> = Arc::new(oracle);
        let game = Game {
            spec: &sc.spec,
            payoff: &sc.payoff,
            horizon: sc.horizon,
            flow: sc.knobs.flow(),
        };
        let v0 = psi.eval(sc.t0, &sc.initial);
        let mut eps = Vec::new();
        for cells in [16usize, 32] {
            let p = Partition::uniform(sc.t0, sc.horizon, cells)?;
            let strategy: Vec<Arc<dyn FeedbackStrategy>> = vec![Arc::new(ExtremalShift::new(psi.clone(), Side::First, p.mesh()))];
            let adversaries: Vec<Arc<dyn CompletionPolicy>> = (0..20u64)
                .map(|i| Arc::new(RandomMixtures { seed: seed.wrapping_mul(1000).wrapping_add(i), pure: i % 2 == 0 }) as Arc<dyn CompletionPolicy>)
                .collect();
            let est = estimate_gamma1(&game, &sc.initial, &p, &strategy, &adversaries)?;
            eps.push((est.value - v0).max(0.0));
        }
        Ok((
            eps[0] <= 0.15 && eps[1] <= eps[0],
            format!("eps(1/16) {:.4}, eps(1/32) {:.4}", eps[0], eps[1]),
            "eps(1/16) <= 0.15, nonincreasing".into(),
            json!({ "psi0": v0, "eps": eps }),
        ))
    })
}

fn ordering(seed: u64) -> Criterion {
    timed(9, "lower estimate never exceeds upper estimate", 120.0, || {
        let mut rows = Vec::new();
        let mut ok = true;
        for name in FIXTURE_NAMES {
            let sc = Scenario::fixture(name)?;
            let g: Arc<dyn MeasureFunctional> = Arc::new(sc.payoff.clone());
            let game = Game {
                spec: &sc.spec,
                payoff: &sc.payoff,
                horizon: sc.horizon,
                flow: FlowSettings { dt: 1e-2, ..sc.knobs.flow() },
            };
            let p = Partition::uniform(sc.t0, sc.horizon, 8)?;
            let mut firsts: Vec<Arc<dyn FeedbackStrategy>> = (0..sc.spec.u_grid.len())
                .map(|c| Arc::new(ConstantStrategy { side: Side::First, control: c }) as Arc<dyn FeedbackStrategy>)
                .collect();
            firsts.push(Arc::new(ExtremalShift::new(g.clone(), Side::First, p.mesh())));
            let mut seconds: Vec<Arc<dyn FeedbackStrategy>> = (0..sc.spec.v_grid.len())
                .map(|c| Arc::new(ConstantStrategy { side: Side::Second, control: c }) as Arc<dyn FeedbackStrategy>)
                .collect();
            seconds.push(Arc::new(ExtremalShift::new(g.clone(), Side::Second, p.mesh())));
            let respond = |pool: &[Arc<dyn FeedbackStrategy>]| -> Vec<Arc<dyn CompletionPolicy>> {
                let mut c: Vec<Arc<dyn CompletionPolicy>> = pool.iter().map(|s| Arc::new(StrategyResponse(s.clone())) as Arc<dyn CompletionPolicy>).collect();
                c.push(Arc::new(RandomMixtures { seed, pure: false }));
                c
            };
            let g1 = estimate_gamma1(&game, &sc.initial, &p, &firsts, &respond(&seconds))?;
            let g2 = estimate_gamma2(&game, &sc.initial, &p, &seconds, &respond(&firsts))?;
            ok &= g2.value <= g1.value + 1e-9;
            rows.push(json!({ "fixture": name, "gamma1": g1.value, "gamma2": g2.value }));
        }
        let measured = rows
            .iter()
            .map(|r| format!("{} {:.4}<={:.4}", r["fixture"].as_str().unwrap_or(""), r["gamma2"].as_f64().unwrap_or(f64::NAN), r["gamma1"].as_f64().unwrap_or(f64::NAN)))
            .collect::<Vec<_>>()
            .join(", ");
        Ok((ok, measured, "gamma2 <= gamma1 + 1e-9".into(), json!(rows)))
    })
}

/// Criterion 10 on the cheap criteria: two artifact runs with one seed are
/// byte-identical. The full suite comparison is done by the CLI.
fn determinism(seed: u64) -> Criterion {
    timed(10, "repeated runs give byte-identical artifacts", 600.0, || {
        let base = std::env::temp_dir().join(format!("mfdg-determinism-{}-{seed}", std::process::id()));
        let run = |tag: &str| -> Result<Vec<(String, Vec<u8>)>> {
            let dir = base.join(tag);
            let results: Vec<Criterion> = [1usize, 2, 3, 7].iter().map(|&id| run_criterion(id, seed)).collect();
            write_artifacts(&dir, seed, &results)?;
            read_dir_sorted(&dir)
        };
        let a = run("a")?;
        let b = run("b")?;
        let _ = std::fs::remove_dir_all(&base);
        let same = a == b;
        Ok((same, format!("{} files, identical: {same}", a.len()), "identical bytes".into(), json!({ "files": a.len() })))
    })
}

pub fn read_dir_sorted(dir: &Path) -> Result<Vec<(String, Vec<u8>)>> {
    let mut files = Vec::new();
    for e in std::fs::read_dir(dir)? {
        let e = e?;
        files.push((e.file_name().to_string_lossy().into_owned(), std::fs::read(e.path())?));
    }
    files.sort();
    Ok(files)
}
