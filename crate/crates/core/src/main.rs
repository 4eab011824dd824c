use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};

use mfdg::engine::{
    estimate_gamma1, estimate_gamma2, runs_csv, CompletionPolicy, ConstantStrategy, ExtremalShift, FeedbackStrategy,
    Game, Partition, RandomMixtures, StrategyResponse, ValueOracle,
};
use mfdg::flow::{solve_flow, verify_flow, ControlDistribution, RelaxedControl};
use mfdg::game::DynamicsFamily;
use mfdg::scenario::Scenario;
use mfdg::selftest;
use mfdg::stability::{
    check_infinitesimal_refined, check_integral, euler_polygon, ladder_csv, u_derivative, v_derivative, Check,
    CheckSettings, CylindricalFunctional, MeasureFunctional, Verdict,
};
use mfdg::{Atom, DiscreteMeasure, Error, Result, Side};

#[derive(Parser)]
#[command(name = "mfdg", version, about = "Mean-field differential games on the torus")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Scenario file, or `fixture:NAME` for a bundled one.
    #[arg(long, global = true, default_value = "fixture:separable_affine")]
    scenario: String,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    #[arg(long, global = true)]
    dt: Option<f64>,
    #[arg(long, global = true)]
    n: Option<usize>,
    #[arg(long, global = true)]
    tol: Option<f64>,
    /// Also write the per-tau quotients as CSV.
    #[arg(long, global = true)]
    ladder_csv: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum SideArg {
    U,
    V,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Infinitesimal,
    Integral,
}

#[derive(Subcommand)]
enum Command {
    /// Solve the flow for constant controls and verify it.
    Flow {
        #[arg(long, default_value_t = 0)]
        u: usize,
        #[arg(long, default_value_t = 0)]
        v: usize,
    },
    /// Difference-quotient ladder of psi along one direction measure.
    Derivative {
        #[arg(long, value_enum, default_value = "v")]
        side: SideArg,
        /// `payoff`, `oracle`, `constant:C` or `time:A`.
        #[arg(long, default_value = "payoff")]
        psi: String,
        #[arg(long, default_value_t = 0)]
        control: usize,
        #[arg(long, default_value_t = 0)]
        other: usize,
        #[arg(long)]
        s: Option<f64>,
    },
    /// Stability check of psi at the scenario's initial position.
    CheckStability {
        #[arg(long, value_enum, default_value = "v")]
        side: SideArg,
        #[arg(long, value_enum, default_value = "infinitesimal")]
        mode: Mode,
        #[arg(long, default_value = "payoff")]
        psi: String,
        #[arg(long, default_value_t = 0)]
        control: usize,
        #[arg(long)]
        s: Option<f64>,
        #[arg(long)]
        r: Option<f64>,
        #[arg(long, default_value_t = 4)]
        cells: usize,
    },
    /// Euler polygon from the initial position.
    Polygon {
        #[arg(long, default_value = "payoff")]
        psi: String,
        #[arg(long, default_value_t = 0)]
        control: usize,
        #[arg(long)]
        r: Option<f64>,
    },
    /// Stepwise feedback play with pool-restricted value estimates.
    Play {
        #[arg(long, default_value_t = 8)]
        cells: usize,
        #[arg(long, default_value_t = 4)]
        random: u64,
    },
    /// Build the dynamic-programming oracle table (cached by scenario hash).
    Oracle {
        #[arg(long, default_value_t = 8)]
        cells: usize,
        #[arg(long, default_value_t = 2)]
        particles: usize,
        #[arg(long, default_value_t = 16)]
        steps: usize,
    },
    /// Run the acceptance suite and write its artifacts.
    Selftest,
}

fn load(common: &Common) -> Result<Scenario> {
    let mut sc = match common.scenario.strip_prefix("fixture:") {
        Some(name) => Scenario::fixture(name)?,
        None => Scenario::from_path(Path::new(&common.scenario))?,
    };
    if let Some(dt) = common.dt {
        if !(dt > 0.0 && dt <= 0.1) {
            return Err(Error::Scenario { pointer: "--dt".into(), message: "dt must be in (0, 0.1]".into() });
        }
        sc.knobs.dt = dt;
    }
    if let Some(n) = common.n {
        if n == 0 {
            return Err(Error::Scenario { pointer: "--n".into(), message: "n must be positive".into() });
        }
        sc.knobs.n = n;
    }
    if let Some(seed) = common.seed {
        sc.knobs.seed = seed;
    }
    Ok(sc)
}

fn settings(sc: &Scenario, common: &Common) -> CheckSettings {
    let mut s = CheckSettings::for_spec(&sc.spec, sc.horizon, sc.knobs.n);
    s.radius = sc.knobs.c;
    s.tol = common.tol.unwrap_or(sc.spec.modulus.eval(1.0 / sc.knobs.n as f64) + 2.0 * sc.spec.lipschitz * sc.knobs.c / sc.knobs.n as f64);
    s.ladder = sc.knobs.ladder;
    s.seed = sc.knobs.seed;
    s
}

fn psi_of(spec: &str, sc: &Scenario) -> Result<Arc<dyn MeasureFunctional>> {
    if spec == "payoff" {
        return Ok(Arc::new(sc.payoff.clone()));
    }
    if spec == "oracle" {
        return Ok(Arc::new(ValueOracle::build(&sc.spec, &sc.payoff, 8, 2, 16, sc.t0, sc.horizon)?));
    }
    let parse = |x: &str| {
        x.parse::<f64>()
            .map_err(|_| Error::Scenario { pointer: "--psi".into(), message: format!("bad number {x}") })
    };
    if let Some(c) = spec.strip_prefix("constant:") {
        return Ok(Arc::new(CylindricalFunctional::constant(parse(c)?)));
    }
    if let Some(a) = spec.strip_prefix("time:") {
        return Ok(Arc::new(CylindricalFunctional::time(parse(a)?)));
    }
    Err(Error::Scenario {
        pointer: "--psi".into(),
        message: format!("unknown psi {spec}; use payoff, oracle, constant:C or time:A"),
    })
}

fn with_controls(m: &DiscreteMeasure, control: usize, grid_len: usize) -> Result<DiscreteMeasure> {
    if control >= grid_len {
        return Err(Error::Scenario { pointer: "--control".into(), message: "control index outside the grid".into() });
    }
    DiscreteMeasure::new(m.atoms().iter().map(|a| Atom::with_control(a.point.clone(), control, a.weight)).collect())
}

fn write(out: &Path, name: &str, contents: &str) -> Result<()> {
    std::fs::create_dir_all(out)?;
    std::fs::write(out.join(name), contents)?;
    Ok(())
}

fn write_json(sc: &Scenario, out: &Path, name: &str, body: Value) -> Result<()> {
    write(out, name, &(serde_json::to_string_pretty(&sc.stamp_json(body))? + "\n"))
}

fn check_of(side: SideArg) -> Check {
    match side {
        SideArg::U => Check::U,
        SideArg::V => Check::V,
    }
}

fn run(cli: Cli) -> Result<u8> {
    let common = &cli.common;
    let out = &common.out;
    if let Command::Selftest = cli.command {
        let seed = common.seed.unwrap_or(0);
        let mut results = selftest::run_all(seed);
        let dir = out.join("selftest");
        let scratch = out.join("selftest_repeat");
        selftest::write_artifacts(&dir, seed, &results)?;
        selftest::write_artifacts(&scratch, seed, &selftest::run_all(seed))?;
        let same = selftest::read_dir_sorted(&dir)? == selftest::read_dir_sorted(&scratch)?;
        std::fs::remove_dir_all(&scratch)?;
        results.push(selftest::Criterion {
            id: 10,
            title: "repeated runs give byte-identical artifacts".into(),
            pass: same,
            measured: format!("identical: {same}"),
            threshold: "identical bytes".into(),
            details: Value::Null,
            seconds: 0.0,
            budget_seconds: f64::INFINITY,
        });
        print!("{}", selftest::summary_table(&results));
        return Ok(if results.iter().all(|c| c.pass) { 0 } else { 2 });
    }

    let sc = load(common)?;
    let spec = &sc.spec;
    match cli.command {
        Command::Selftest => unreachable!(),
        Command::Flow { u, v } => {
            if u >= spec.u_grid.len() || v >= spec.v_grid.len() {
                return Err(Error::Scenario { pointer: "--u/--v".into(), message: "control index outside the grid".into() });
            }
            let alpha = with_controls(&sc.initial, u, spec.u_grid.len())?;
            let kappa = ControlDistribution::complete(spec, Side::First, &alpha, sc.t0, sc.horizon, |_, _| {
                vec![(RelaxedControl::constant(v, spec.v_grid.len(), sc.t0, sc.horizon), 1.0)]
            })?;
            let sol = solve_flow(spec, sc.t0, sc.horizon, &sc.initial, &kappa, Side::First, &sc.knobs.flow())?;
            let last = sol.ensemble.times.len() - 1;
            let residual = verify_flow(spec, Side::First, &sol.ensemble, 0, last)?;
            let terminal = sol.terminal();
            let mut endpoint_gap = None;
            if let DynamicsFamily::SeparableAffine { .. } = sc.dynamics {
                // Constant velocities: the endpoint is the shifted initial cloud.
                let mut gap: f64 = 0.0;
                for (a, b) in sc.initial.atoms().iter().zip(terminal.atoms()) {
                    let vel = spec.f(sc.t0, &a.point, &sc.initial, u, v);
                    let want = a.point.translate(&vel, sc.horizon - sc.t0);
                    gap = gap.max(mfdg::torus_distance(&want, &b.point));
                }
                if gap > 1e-9 {
                    return Err(Error::Structural(format!("constant-velocity endpoint off by {gap:e}")));
                }
                endpoint_gap = Some(gap);
            }
            write(out, "flow.csv", &(sc.csv_header() + &sol.ensemble.to_csv()))?;
            write_json(
                &sc,
                out,
                "flow.json",
                json!({
                    "verify_residual": residual,
                    "picard_residuals": sol.picard_residuals,
                    "iterations": sol.iterations,
                    "terminal": terminal.atoms(),
                    "endpoint_gap": endpoint_gap,
                }),
            )?;
            println!("flow: {} nodes, verify residual {residual:.3e}", last + 1);
            Ok(0)
        }
        Command::Derivative { side, psi, control, other, s } => {
            let psi = psi_of(&psi, &sc)?;
            let check = check_of(side);
            let own = check.side();
            let s = s.unwrap_or(sc.t0);
            let grid_len = spec.grid(own).len();
            if other >= spec.grid(own.other()).len() {
                return Err(Error::Scenario { pointer: "--other".into(), message: "control index outside the grid".into() });
            }
            let pos = with_controls(&sc.initial, control, grid_len)?;
            let eta = DiscreteMeasure::new(
                pos.atoms()
                    .iter()
                    .map(|a| {
                        let vel = match own {
                            Side::First => spec.f(s, &a.point, &sc.initial, control, other),
                            Side::Second => spec.f(s, &a.point, &sc.initial, other, control),
                        };
                        Atom::with_direction(a.point.clone(), control, vel, a.weight)
                    })
                    .collect(),
            )?;
            let est = match check {
                Check::V => v_derivative(psi.as_ref(), s, &eta, &sc.knobs.ladder, sc.horizon, 1e-6)?,
                Check::U => u_derivative(psi.as_ref(), s, &eta, &sc.knobs.ladder, sc.horizon, 1e-6)?,
            };
            write(out, "ladder.csv", &(sc.csv_header() + &ladder_csv(&est.ladder)))?;
            write_json(&sc, out, "derivative.json", json!({ "value": est.value, "settled": est.settled, "ladder": est.ladder }))?;
            println!("derivative {:.6} (settled: {})", est.value, est.settled);
            Ok(0)
        }
        Command::CheckStability { side, mode, psi, control, s, r, cells } => {
            let psi = psi_of(&psi, &sc)?;
            let check = check_of(side);
            let settings = settings(&sc, common);
            let s = s.unwrap_or(sc.t0);
            let pos = with_controls(&sc.initial, control, spec.grid(check.side()).len())?;
            let report = match mode {
                Mode::Infinitesimal => check_infinitesimal_refined(psi.as_ref(), spec, check, s, &pos, &settings)?,
                Mode::Integral => {
                    let r = r.unwrap_or(sc.horizon);
                    check_integral(psi.as_ref(), spec, check, s, r, &pos, cells, &sc.knobs.flow(), &settings)?
                }
            };
            write_json(&sc, out, "stability_report.json", serde_json::to_value(&report)?)?;
            if common.ladder_csv {
                write(out, "ladder.csv", &(sc.csv_header() + &ladder_csv(&report.ladder)))?;
            }
            println!("{:?}: best {:.6}, tol {:.6}", report.verdict, report.best_value, report.tolerance);
            Ok(report.verdict.exit_code() as u8)
        }
        Command::Polygon { psi, control, r } => {
            let psi = psi_of(&psi, &sc)?;
            let settings = settings(&sc, common);
            let alpha = with_controls(&sc.initial, control, spec.u_grid.len())?;
            let r = r.unwrap_or(sc.horizon);
            match euler_polygon(psi.as_ref(), spec, sc.t0, r, &alpha, sc.knobs.n, &settings) {
                Ok(p) => {
                    write(out, "polygon.csv", &(sc.csv_header() + &p.ensemble.to_csv()))?;
                    write_json(
                        &sc,
                        out,
                        "polygon.json",
                        json!({
                            "steps": p.steps,
                            "ledger_margin": p.ledger_margin,
                            "start_value": p.start_value,
                            "endpoint_value": p.endpoint_value,
                            "residual": p.residual,
                            "residual_bound": p.residual_bound,
                            "max_segment": p.max_segment,
                        }),
                    )?;
                    println!("polygon: {} steps, residual {:.3e} (bound {:.3e})", p.steps.len(), p.residual, p.residual_bound);
                    Ok(0)
                }
                Err(e @ Error::PolygonStuck { .. }) => {
                    write_json(&sc, out, "polygon.json", json!({ "stuck": e.to_string() }))?;
                    println!("{e}");
                    Ok(Verdict::Fail.exit_code() as u8)
                }
                Err(e) => Err(e),
            }
        }
        Command::Play { cells, random } => {
            let g: Arc<dyn MeasureFunctional> = Arc::new(sc.payoff.clone());
            let game = Game {
                spec,
                payoff: &sc.payoff,
                horizon: sc.horizon,
                flow: sc.knobs.flow(),
            };
            let p = Partition::uniform(sc.t0, sc.horizon, cells)?;
            let mut firsts: Vec<Arc<dyn FeedbackStrategy>> = (0..spec.u_grid.len())
                .map(|c| Arc::new(ConstantStrategy { side: Side::First, control: c }) as Arc<dyn FeedbackStrategy>)
                .collect();
            firsts.push(Arc::new(ExtremalShift::new(g.clone(), Side::First, p.mesh())));
            let mut seconds: Vec<Arc<dyn FeedbackStrategy>> = (0..spec.v_grid.len())
                .map(|c| Arc::new(ConstantStrategy { side: Side::Second, control: c }) as Arc<dyn FeedbackStrategy>)
                .collect();
            seconds.push(Arc::new(ExtremalShift::new(g, Side::Second, p.mesh())));
            let seed = sc.knobs.seed;
            let respond = |pool: &[Arc<dyn FeedbackStrategy>]| -> Vec<Arc<dyn CompletionPolicy>> {
                let mut c: Vec<Arc<dyn CompletionPolicy>> =
                    pool.iter().map(|s| Arc::new(StrategyResponse(s.clone())) as Arc<dyn CompletionPolicy>).collect();
                for i in 0..random {
                    c.push(Arc::new(RandomMixtures { seed: seed.wrapping_add(i), pure: false }));
                }
                c
            };
            let g1 = estimate_gamma1(&game, &sc.initial, &p, &firsts, &respond(&seconds))?;
            let g2 = estimate_gamma2(&game, &sc.initial, &p, &seconds, &respond(&firsts))?;
            let mut rows = Vec::new();
            for (est, side) in [(&g1, Side::First), (&g2, Side::Second)] {
                for (i, row) in est.outcomes.iter().enumerate() {
                    for (j, &o) in row.iter().enumerate() {
                        rows.push((format!("{}|{}", est.strategies[i], est.completions[j]), side, o, p.mesh(), seed));
                    }
                }
            }
            write(out, "runs.csv", &(sc.csv_header() + &runs_csv(&rows)))?;
            write_json(&sc, out, "gamma.json", json!({ "pool_restricted": true, "gamma1": g1, "gamma2": g2 }))?;
            println!("pool-restricted gamma1 {:.6}, gamma2 {:.6}", g1.value, g2.value);
            Ok(0)
        }
        Command::Oracle { cells, particles, steps } => {
            let name = format!("oracle_{}_{cells}_{particles}_{steps}.json", &sc.hash[..16]);
            let path = out.join(&name);
            if path.exists() {
                println!("cached: {}", path.display());
                return Ok(0);
            }
            let oracle = ValueOracle::build(spec, &sc.payoff, cells, particles, steps, sc.t0, sc.horizon)?;
            write_json(&sc, out, &name, serde_json::to_value(&oracle)?)?;
            println!("oracle: isaacs gap {:.3e}, lipschitz {:.3}", oracle.isaacs_gap, oracle.lipschitz);
            Ok(0)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
