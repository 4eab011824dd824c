//! Directional derivatives of functions of probability, infinitesimal and
//! integral stability checks, and the Euler-polygon construction of a
//! viable flow.

use std::collections::BTreeSet;
use std::f64::consts::PI;
use std::fmt::Write as _;

use rand::Rng as _;
use rand_distr::{Distribution, Dirichlet};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::{solve_flow, verify_flow, ControlDistribution, FlowSettings, PathEnsemble, RelaxedControl};
use crate::game::{DynamicsSpec, Side};
use crate::measure::{Atom, DiscreteMeasure, SpaceTag};
use crate::ot::{wasserstein2, OtSolver};
use crate::rng::{stream, Rng};
use crate::shift::{compose_plan, concatenate, line_lift, theta_shift, xi_shift};
use crate::torus::{dot, norm, TorusPoint, Velocity};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Regularity {
    SmoothCylindrical,
    GridInterpolated { lipschitz: f64 },
    BlackBox,
}

/// Real function of time and probability.
pub trait MeasureFunctional: Send + Sync {
    fn eval(&self, t: f64, m: &DiscreteMeasure) -> f64;

    fn regularity(&self) -> Regularity {
        Regularity::BlackBox
    }

    /// `d/dtau psi(t + tau, Theta^tau # eta)` at `tau = 0` when known in
    /// closed form.
    fn first_variation(&self, _t: f64, _eta: &DiscreteMeasure) -> Option<f64> {
        None
    }
}

/// Wraps a closure `(t, m) -> value`.
pub struct FnFunctional<F>(pub F);

impl<F: Fn(f64, &DiscreteMeasure) -> f64 + Send + Sync> MeasureFunctional for FnFunctional<F> {
    fn eval(&self, t: f64, m: &DiscreteMeasure) -> f64 {
        (self.0)(t, m)
    }
}

/// `-psi`, used with the mirrored game.
pub struct Negated<'a>(pub &'a dyn MeasureFunctional);

impl MeasureFunctional for Negated<'_> {
    fn eval(&self, t: f64, m: &DiscreteMeasure) -> f64 {
        -self.0.eval(t, m)
    }

    fn regularity(&self) -> Regularity {
        self.0.regularity()
    }

    fn first_variation(&self, t: f64, eta: &DiscreteMeasure) -> Option<f64> {
        self.0.first_variation(t, eta).map(|v| -v)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrigKind {
    Cos,
    Sin,
}

/// `cos(2 pi k.x)` or `sin(2 pi k.x)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrigFeature {
    pub wave: Vec<i32>,
    pub kind: TrigKind,
}

impl TrigFeature {
    fn phase(&self, x: &TorusPoint) -> f64 {
        2.0 * PI * self.wave.iter().zip(x.coords()).map(|(&k, &c)| k as f64 * c).sum::<f64>()
    }

    pub fn value(&self, x: &TorusPoint) -> f64 {
        match self.kind {
            TrigKind::Cos => self.phase(x).cos(),
            TrigKind::Sin => self.phase(x).sin(),
        }
    }

    pub fn gradient(&self, x: &TorusPoint) -> Velocity {
        let p = self.phase(x);
        let s = match self.kind {
            TrigKind::Cos => -p.sin(),
            TrigKind::Sin => p.cos(),
        };
        self.wave.iter().map(|&k| 2.0 * PI * k as f64 * s).collect()
    }
}

/// `psi(t, m) = a t + b + sum_i c_i z_i + sum_ij Q_ij z_i z_j` with
/// `z_i = int phi_i dm`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CylindricalFunctional {
    #[serde(default)]
    pub time_slope: f64,
    #[serde(default)]
    pub offset: f64,
    #[serde(default)]
    pub features: Vec<TrigFeature>,
    #[serde(default)]
    pub linear: Vec<f64>,
    #[serde(default)]
    pub quadratic: Vec<Vec<f64>>,
}

impl CylindricalFunctional {
    pub fn constant(c: f64) -> Self {
        CylindricalFunctional {
            time_slope: 0.0,
            offset: c,
            features: vec![],
            linear: vec![],
            quadratic: vec![],
        }
    }

    pub fn time(slope: f64) -> Self {
        CylindricalFunctional {
            time_slope: slope,
            ..Self::constant(0.0)
        }
    }

    /// `int cos(2 pi k.x) dm` scaled by `scale`.
    pub fn mean_cos(wave: Vec<i32>, scale: f64) -> Self {
        CylindricalFunctional {
            features: vec![TrigFeature {
                wave,
                kind: TrigKind::Cos,
            }],
            linear: vec![scale],
            ..Self::constant(0.0)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.features.len();
        if !self.linear.is_empty() && self.linear.len() != k {
            return Err(Error::structural("linear coefficients must match features"));
        }
        if !self.quadratic.is_empty() && (self.quadratic.len() != k || self.quadratic.iter().any(|r| r.len() != k)) {
            return Err(Error::structural("quadratic coefficients must be k x k"));
        }
        Ok(())
    }

    fn moments(&self, m: &DiscreteMeasure) -> Vec<f64> {
        self.features
            .iter()
            .map(|f| m.atoms().iter().map(|a| a.weight * f.value(&a.point)).sum())
            .collect()
    }

    fn outer_gradient(&self, z: &[f64]) -> Vec<f64> {
        (0..z.len())
            .map(|i| {
                let lin = self.linear.get(i).copied().unwrap_or(0.0);
                let quad: f64 = if self.quadratic.is_empty() {
                    0.0
                } else {
                    (0..z.len()).map(|j| (self.quadratic[i][j] + self.quadratic[j][i]) * z[j]).sum()
                };
                lin + quad
            })
            .collect()
    }
}

impl MeasureFunctional for CylindricalFunctional {
    fn eval(&self, t: f64, m: &DiscreteMeasure) -> f64 {
        let z = self.moments(m);
        let mut v = self.time_slope * t + self.offset;
        for (i, zi) in z.iter().enumerate() {
            v += self.linear.get(i).copied().unwrap_or(0.0) * zi;
            if !self.quadratic.is_empty() {
                for (j, zj) in z.iter().enumerate() {
                    v += self.quadratic[i][j] * zi * zj;
                }
            }
        }
        v
    }

    fn regularity(&self) -> Regularity {
        Regularity::SmoothCylindrical
    }

    fn first_variation(&self, _t: f64, eta: &DiscreteMeasure) -> Option<f64> {
        let z = self.moments(&eta.state_marginal());
        let outer = self.outer_gradient(&z);
        let mut v = self.time_slope;
        for (f, g) in self.features.iter().zip(outer) {
            let inner: f64 = eta
                .atoms()
                .iter()
                .map(|a| a.weight * dot(&f.gradient(&a.point), a.direction.as_deref().unwrap_or(&[])))
                .sum();
            v += g * inner;
        }
        Some(v)
    }
}

/// Geometric ladder `tau0 2^-k`, `k < levels`; the `tail` smallest steps form
/// the estimate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TauLadder {
    pub tau0: f64,
    pub levels: usize,
    pub tail: usize,
}

impl Default for TauLadder {
    fn default() -> Self {
        TauLadder {
            tau0: 0.05,
            levels: 8,
            tail: 3,
        }
    }
}

impl TauLadder {
    pub fn taus(&self) -> Vec<f64> {
        (0..self.levels.clamp(1, 13)).map(|k| self.tau0 * 0.5f64.powi(k as i32)).collect()
    }

    fn refined(&self) -> Self {
        TauLadder {
            levels: (self.levels + 2).min(13),
            ..*self
        }
    }
}

/// Ladder of difference quotients with the one-sided estimate.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DerivativeEstimate {
    pub value: f64,
    /// `(tau, quotient)`, largest `tau` first.
    pub ladder: Vec<(f64, f64)>,
    /// Tail monotone within jitter, or its two smallest steps agree.
    pub settled: bool,
}

impl DerivativeEstimate {
    fn tail(&self, tail: usize) -> &[(f64, f64)] {
        &self.ladder[self.ladder.len() - tail.clamp(1, self.ladder.len())..]
    }
}

/// `[psi(s + tau, Theta^tau # eta) - psi(s, m)] / tau` along the ladder.
pub fn quotient_ladder(
    psi: &dyn MeasureFunctional,
    s: f64,
    eta: &DiscreteMeasure,
    ladder: &TauLadder,
    horizon: f64,
) -> Result<Vec<(f64, f64)>> {
    if !(s < horizon) {
        return Err(Error::structural(format!("no forward derivative at s = {s} >= T = {horizon}")));
    }
    let base = psi.eval(s, &eta.state_marginal());
    let scale = (horizon - s).min(ladder.tau0) / ladder.tau0;
    ladder
        .taus()
        .into_iter()
        .map(|tau| {
            let tau = tau * scale;
            Ok((tau, (psi.eval(s + tau, &theta_shift(eta, tau)?) - base) / tau))
        })
        .collect()
}

fn estimate(ladder: Vec<(f64, f64)>, tail: usize, jitter: f64, upper: bool) -> DerivativeEstimate {
    let t = tail.clamp(1, ladder.len());
    let qs: Vec<f64> = ladder[ladder.len() - t..].iter().map(|p| p.1).collect();
    let value = if upper {
        qs.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    } else {
        qs.iter().copied().fold(f64::INFINITY, f64::min)
    };
    let tol = |a: f64, b: f64| jitter * (1.0 + a.abs().max(b.abs()));
    let inc = qs.windows(2).all(|w| w[1] >= w[0] - tol(w[0], w[1]));
    let dec = qs.windows(2).all(|w| w[1] <= w[0] + tol(w[0], w[1]));
    let last_agree = qs.len() < 2 || (qs[qs.len() - 1] - qs[qs.len() - 2]).abs() <= tol(qs[qs.len() - 1], qs[qs.len() - 2]);
    DerivativeEstimate {
        value,
        ladder,
        settled: inc || dec || last_agree,
    }
}

/// Upper directional derivative along `eta`, estimated with `eta' = eta`.
pub fn v_derivative(
    psi: &dyn MeasureFunctional,
    s: f64,
    eta: &DiscreteMeasure,
    ladder: &TauLadder,
    horizon: f64,
    jitter: f64,
) -> Result<DerivativeEstimate> {
    Ok(estimate(quotient_ladder(psi, s, eta, ladder, horizon)?, ladder.tail, jitter, true))
}

/// Lower directional derivative along `eta`, estimated with `eta' = eta`.
pub fn u_derivative(
    psi: &dyn MeasureFunctional,
    s: f64,
    eta: &DiscreteMeasure,
    ladder: &TauLadder,
    horizon: f64,
    jitter: f64,
) -> Result<DerivativeEstimate> {
    Ok(estimate(quotient_ladder(psi, s, eta, ladder, horizon)?, ladder.tail, jitter, false))
}

/// CSV `tau,quotient`.
pub fn ladder_csv(ladder: &[(f64, f64)]) -> String {
    let mut out = String::from("tau,quotient\n");
    for (t, q) in ladder {
        let _ = writeln!(out, "{t},{q}");
    }
    out
}

/// Direction measures with a fixed state-control marginal whose directions
/// lie in the vectograms: per atom a finite set of mixtures of the
/// vectogram generators.
#[derive(Debug, Clone)]
pub struct DirectionSampler {
    base: DiscreteMeasure,
    per_atom: Vec<Vec<Velocity>>,
    vertices: Vec<usize>,
    radius: f64,
}

fn direction_key(w: &[f64]) -> Vec<i64> {
    w.iter().map(|x| (x * 1e12).round() as i64).collect()
}

fn mix(gens: &[Velocity], weights: &[f64]) -> Velocity {
    let mut w = vec![0.0; gens[0].len()];
    for (g, p) in gens.iter().zip(weights) {
        for (wi, gi) in w.iter_mut().zip(g) {
            *wi += p * gi;
        }
    }
    w
}

impl DirectionSampler {
    /// `resolution` is the simplex grid step for vectograms with at most
    /// three generators; larger vectograms get `dirichlet` random mixtures.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        spec: &DynamicsSpec,
        side: Side,
        s: f64,
        base: &DiscreteMeasure,
        radius: f64,
        resolution: f64,
        dirichlet: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        if base.tag() != SpaceTag::StateControl {
            return Err(Error::structural("direction sampler needs a state-control measure"));
        }
        let m = base.state_marginal();
        let steps = (1.0 / resolution).round().max(1.0) as usize;
        let mut per_atom = Vec::with_capacity(base.len());
        let mut vertices = Vec::with_capacity(base.len());
        for a in base.atoms() {
            let control = a.control.expect("state-control atom");
            let vg = spec.vectogram(side, s, &a.point, &m, control);
            let mut seen = BTreeSet::new();
            let gens: Vec<Velocity> = vg
                .generators
                .into_iter()
                .filter(|g| seen.insert(direction_key(g)))
                .collect();
            let mut raw: Vec<Velocity> = gens.clone();
            let nverts = gens.len();
            match gens.len() {
                1 => {}
                2 => {
                    for i in 0..=steps {
                        let p = i as f64 / steps as f64;
                        raw.push(mix(&gens, &[p, 1.0 - p]));
                    }
                }
                3 => {
                    for i in 0..=steps {
                        for j in 0..=steps - i {
                            let (p, q) = (i as f64 / steps as f64, j as f64 / steps as f64);
                            raw.push(mix(&gens, &[p, q, 1.0 - p - q]));
                        }
                    }
                }
                k => {
                    let dist = Dirichlet::new(&vec![1.0; k]).map_err(|e| Error::structural(e.to_string()))?;
                    for _ in 0..dirichlet {
                        let p: Vec<f64> = dist.sample(rng);
                        raw.push(mix(&gens, &p));
                    }
                }
            }
            let mut seen = BTreeSet::new();
            let mut cands: Vec<Velocity> = Vec::new();
            let mut kept_vertices = 0;
            for (i, w) in raw.into_iter().enumerate() {
                if norm(&w) <= radius + 1e-12 && seen.insert(direction_key(&w)) {
                    if i < nverts {
                        kept_vertices += 1;
                    }
                    cands.push(w);
                }
            }
            if cands.is_empty() {
                return Err(Error::structural(format!(
                    "radius {radius} excludes every admissible velocity at {:?}",
                    a.point.coords()
                )));
            }
            vertices.push(kept_vertices.max(1));
            per_atom.push(cands);
        }
        Ok(DirectionSampler {
            base: base.clone(),
            per_atom,
            vertices,
            radius,
        })
    }

    pub fn per_atom(&self) -> &[Vec<Velocity>] {
        &self.per_atom
    }

    pub fn product_count(&self) -> f64 {
        self.per_atom.iter().map(|c| c.len() as f64).product()
    }

    fn build(&self, choice: &[usize]) -> DiscreteMeasure {
        let atoms = self
            .base
            .atoms()
            .iter()
            .zip(choice)
            .zip(&self.per_atom)
            .map(|((a, &k), c)| Atom::with_direction(a.point.clone(), a.control.expect("control"), c[k].clone(), a.weight))
            .collect();
        DiscreteMeasure::from_parts_unchecked(atoms, SpaceTag::StateControlDirection, Some(self.radius))
    }

    /// Candidates in a reproducible order and whether they exhaust the
    /// product. Over budget, vertex products come first and random products
    /// fill the rest.
    pub fn candidates(&self, budget: usize, rng: &mut Rng) -> (Vec<DiscreteMeasure>, bool) {
        let radices: Vec<usize> = self.per_atom.iter().map(|c| c.len()).collect();
        if self.product_count() <= budget as f64 {
            return (mixed_radix(&radices).iter().map(|c| self.build(c)).collect(), true);
        }
        let mut out = Vec::new();
        let mut seen = BTreeSet::new();
        let vcount: f64 = self.vertices.iter().map(|&v| v as f64).product();
        if vcount <= (budget / 2) as f64 {
            for c in mixed_radix(&self.vertices) {
                seen.insert(c.clone());
                out.push(self.build(&c));
            }
        }
        let mut attempts = 0;
        while out.len() < budget && attempts < budget * 20 {
            attempts += 1;
            let c: Vec<usize> = radices.iter().map(|&r| rng.gen_range(0..r)).collect();
            if seen.insert(c.clone()) {
                out.push(self.build(&c));
            }
        }
        (out, false)
    }
}

fn mixed_radix(radices: &[usize]) -> Vec<Vec<usize>> {
    let total: usize = radices.iter().product();
    let mut out = Vec::with_capacity(total);
    let mut cur = vec![0; radices.len()];
    for _ in 0..total {
        out.push(cur.clone());
        for (c, &r) in cur.iter_mut().zip(radices).rev() {
            *c += 1;
            if *c < r {
                break;
            }
            *c = 0;
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Pass,
    Fail,
    Inconclusive,
}

impl Verdict {
    pub fn exit_code(self) -> i32 {
        match self {
            Verdict::Pass => 0,
            Verdict::Fail => 2,
            Verdict::Inconclusive => 3,
        }
    }

    fn combine(self, other: Verdict) -> Verdict {
        use Verdict::*;
        match (self, other) {
            (Fail, _) | (_, Fail) => Fail,
            (Inconclusive, _) | (_, Inconclusive) => Inconclusive,
            _ => Pass,
        }
    }
}

/// Which half of the characterization is checked: `V` takes the sup of
/// upper derivatives over first-player vectograms, `U` the inf of lower
/// derivatives over second-player vectograms.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Check {
    U,
    V,
}

impl Check {
    pub fn side(self) -> Side {
        match self {
            Check::V => Side::First,
            Check::U => Side::Second,
        }
    }

    fn sign(self) -> f64 {
        match self {
            Check::V => 1.0,
            Check::U => -1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StabilityReport {
    pub verdict: Verdict,
    pub check: Check,
    pub mode: String,
    pub tolerance: f64,
    pub s: f64,
    pub r: Option<f64>,
    /// Best value found: derivative, `psi(r) - psi(s)`, or terminal gap.
    pub best_value: f64,
    pub witness_position: Vec<Atom>,
    pub witness_direction: Option<Vec<Atom>>,
    pub ladder: Vec<(f64, f64)>,
    pub candidates_checked: usize,
    pub notes: Vec<String>,
}

impl StabilityReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CheckSettings {
    pub horizon: f64,
    pub radius: f64,
    pub tol: f64,
    pub ladder: TauLadder,
    pub resolution: f64,
    pub dirichlet: usize,
    pub budget: usize,
    pub jitter: f64,
    pub seed: u64,
}

impl CheckSettings {
    /// `c = C_f`, `tol = w(1/n) + 2 L c / n`.
    pub fn for_spec(spec: &DynamicsSpec, horizon: f64, n: usize) -> Self {
        let c = spec.speed_bound;
        let nf = n as f64;
        CheckSettings {
            horizon,
            radius: c,
            tol: spec.modulus.eval(1.0 / nf) + 2.0 * spec.lipschitz * c / nf,
            ladder: TauLadder::default(),
            resolution: 0.1,
            dirichlet: 32,
            budget: 2000,
            jitter: 1e-6,
            seed: 0,
        }
    }
}

/// Infinitesimal check at one position. For `Check::V` the
/// position is a first-player distribution `alpha`, for `Check::U` a
/// second-player distribution `beta`.
pub fn check_infinitesimal(
    psi: &dyn MeasureFunctional,
    spec: &DynamicsSpec,
    check: Check,
    s: f64,
    position: &DiscreteMeasure,
    settings: &CheckSettings,
) -> Result<StabilityReport> {
    let mut rng = stream(settings.seed, "infinitesimal-sampler");
    let sampler = DirectionSampler::new(
        spec,
        check.side(),
        s,
        position,
        settings.radius,
        settings.resolution,
        settings.dirichlet,
        &mut rng,
    )?;
    let (cands, exhaustive) = sampler.candidates(settings.budget, &mut rng);
    let sign = check.sign();
    let mut best: Option<(f64, usize, DerivativeEstimate)> = None;
    let mut all_certified = true;
    for (i, eta) in cands.iter().enumerate() {
        let est = estimate(
            quotient_ladder(psi, s, eta, &settings.ladder, settings.horizon)?,
            settings.ladder.tail,
            settings.jitter,
            check == Check::V,
        );
        let score = sign * est.value;
        let certified = est.settled && est.tail(settings.ladder.tail).iter().all(|p| sign * p.1 < -settings.tol);
        all_certified &= certified;
        let better = match &best {
            None => true,
            Some((b, _, _)) => score > *b,
        };
        if better {
            best = Some((score, i, est));
        }
    }
    let (score, idx, est) = best.ok_or_else(|| Error::structural("sampler produced no candidates"))?;
    let mut notes = Vec::new();
    let verdict = if score >= -settings.tol {
        Verdict::Pass
    } else if exhaustive && all_certified {
        Verdict::Fail
    } else {
        if !exhaustive {
            notes.push(format!("sampled {} of {:.0} direction products", cands.len(), sampler.product_count()));
        }
        if !all_certified {
            notes.push("some ladders are unsettled or approach the tolerance".into());
        }
        Verdict::Inconclusive
    };
    Ok(StabilityReport {
        verdict,
        check,
        mode: "infinitesimal".into(),
        tolerance: settings.tol,
        s,
        r: None,
        best_value: est.value,
        witness_position: position.atoms().to_vec(),
        witness_direction: Some(cands[idx].atoms().to_vec()),
        ladder: est.ladder,
        candidates_checked: cands.len(),
        notes,
    })
}

/// Runs the infinitesimal check and repeats it on a refined ladder; a
/// certified failure on one ladder that passes on the other is downgraded.
pub fn check_infinitesimal_refined(
    psi: &dyn MeasureFunctional,
    spec: &DynamicsSpec,
    check: Check,
    s: f64,
    position: &DiscreteMeasure,
    settings: &CheckSettings,
) -> Result<StabilityReport> {
    let coarse = check_infinitesimal(psi, spec, check, s, position, settings)?;
    if coarse.verdict != Verdict::Fail {
        return Ok(coarse);
    }
    let fine_settings = CheckSettings {
        ladder: settings.ladder.refined(),
        ..*settings
    };
    let mut fine = check_infinitesimal(psi, spec, check, s, position, &fine_settings)?;
    if fine.verdict != Verdict::Fail {
        fine.verdict = Verdict::Inconclusive;
        fine.notes.push("verdict changed under ladder refinement".into());
    }
    Ok(fine)
}

/// Integral check: search over per-atom piecewise-constant pure responses of
/// the free player on `cells` equal cells of `[s, r]` for a flow keeping
/// `psi` monotone (nondecreasing for `V`, nonincreasing for `U`) up to `tol`.
#[allow(clippy::too_many_arguments)]
pub fn check_integral(
    psi: &dyn MeasureFunctional,
    spec: &DynamicsSpec,
    check: Check,
    s: f64,
    r: f64,
    position: &DiscreteMeasure,
    cells: usize,
    flow: &FlowSettings,
    settings: &CheckSettings,
) -> Result<StabilityReport> {
    if !(s < r && r <= settings.horizon + 1e-12) {
        return Err(Error::structural("integral check needs s < r <= T"));
    }
    let side = check.side();
    let free = spec.grid(side.other()).len();
    let n = position.len();
    let m_star = position.state_marginal();
    let start = psi.eval(s, &m_star);
    let sign = check.sign();
    let evals = std::cell::Cell::new(0usize);
    let run = |choice: &[Vec<usize>]| -> Result<f64> {
        evals.set(evals.get() + 1);
        let kappa = ControlDistribution::complete(spec, side, position, s, r, |i, _| {
            vec![(RelaxedControl::pure_cells(&choice[i], free, s, r), 1.0)]
        })?;
        let sol = solve_flow(spec, s, r, &m_star, &kappa, side, flow)?;
        Ok(sign * (psi.eval(r, &sol.terminal()) - start))
    };
    let mut rng = stream(settings.seed, "integral-search");
    let mut starts: Vec<Vec<Vec<usize>>> = (0..free).map(|v| vec![vec![v; cells]; n]).collect();
    for _ in 0..2 {
        starts.push((0..n).map(|_| (0..cells).map(|_| rng.gen_range(0..free)).collect()).collect());
    }
    let mut best: Option<(f64, Vec<Vec<usize>>)> = None;
    let mut converged_all = true;
    'starts: for st in starts {
        if evals.get() >= settings.budget {
            converged_all = false;
            break;
        }
        let mut cur = st;
        let mut val = run(&cur)?;
        loop {
            if val >= -settings.tol {
                best = Some((val, cur));
                break 'starts;
            }
            let mut improved = false;
            for a in 0..n {
                for c in 0..cells {
                    for v in 0..free {
                        if v == cur[a][c] {
                            continue;
                        }
                        if evals.get() >= settings.budget {
                            converged_all = false;
                            if best.as_ref().map_or(true, |b| val > b.0) {
                                best = Some((val, cur.clone()));
                            }
                            break 'starts;
                        }
                        let mut next = cur.clone();
                        next[a][c] = v;
                        let nv = run(&next)?;
                        if nv > val {
                            val = nv;
                            cur = next;
                            improved = true;
                        }
                    }
                }
            }
            if !improved {
                break;
            }
        }
        if best.as_ref().map_or(true, |b| val > b.0) {
            best = Some((val, cur));
        }
    }
    let (val, choice) = best.expect("at least one start");
    let mut notes = vec![format!("responses {choice:?}")];
    let verdict = if val >= -settings.tol {
        Verdict::Pass
    } else if val < -2.0 * settings.tol && converged_all {
        Verdict::Fail
    } else {
        notes.push("search ended near the tolerance or ran out of budget".into());
        Verdict::Inconclusive
    };
    Ok(StabilityReport {
        verdict,
        check,
        mode: "integral".into(),
        tolerance: settings.tol,
        s,
        r: Some(r),
        best_value: sign * val,
        witness_position: position.atoms().to_vec(),
        witness_direction: None,
        ladder: vec![],
        candidates_checked: evals.get(),
        notes,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum TerminalRelation {
    /// `psi(T, m) <= g(m)`
    Below,
    /// `psi(T, m) >= g(m)`
    Above,
    Equal,
}

/// Terminal condition on sample clouds.
pub fn check_terminal(
    psi: &dyn MeasureFunctional,
    g: &dyn MeasureFunctional,
    horizon: f64,
    relation: TerminalRelation,
    samples: &[DiscreteMeasure],
    tol: f64,
) -> Result<StabilityReport> {
    let mut worst = (f64::NEG_INFINITY, 0usize);
    for (i, m) in samples.iter().enumerate() {
        let diff = psi.eval(horizon, m) - g.eval(horizon, m);
        let excess = match relation {
            TerminalRelation::Below => diff,
            TerminalRelation::Above => -diff,
            TerminalRelation::Equal => diff.abs(),
        };
        if excess > worst.0 {
            worst = (excess, i);
        }
    }
    if samples.is_empty() {
        return Err(Error::structural("terminal check needs sample measures"));
    }
    Ok(StabilityReport {
        verdict: if worst.0 <= tol { Verdict::Pass } else { Verdict::Fail },
        check: Check::V,
        mode: "terminal".into(),
        tolerance: tol,
        s: horizon,
        r: None,
        best_value: worst.0,
        witness_position: samples[worst.1].atoms().to_vec(),
        witness_direction: None,
        ladder: vec![],
        candidates_checked: samples.len(),
        notes: vec![format!("{relation:?}")],
    })
}

/// One sampled position for the value characterization: time, first-player
/// distribution and second-player distribution over the same states.
#[derive(Debug, Clone)]
pub struct Position {
    pub s: f64,
    pub alpha: DiscreteMeasure,
    pub beta: DiscreteMeasure,
}

/// Terminal equality plus both infinitesimal conditions at each position.
pub fn check_value_characterization(
    psi: &dyn MeasureFunctional,
    g: &dyn MeasureFunctional,
    spec: &DynamicsSpec,
    positions: &[Position],
    settings: &CheckSettings,
) -> Result<Vec<StabilityReport>> {
    let terminal_samples: Vec<DiscreteMeasure> = positions.iter().map(|p| p.alpha.state_marginal()).collect();
    let mut out = vec![check_terminal(
        psi,
        g,
        settings.horizon,
        TerminalRelation::Equal,
        &terminal_samples,
        settings.tol,
    )?];
    for p in positions {
        out.push(check_infinitesimal_refined(psi, spec, Check::U, p.s, &p.beta, settings)?);
        out.push(check_infinitesimal_refined(psi, spec, Check::V, p.s, &p.alpha, settings)?);
    }
    Ok(out)
}

/// Aggregate verdict of several reports.
pub fn overall(reports: &[StabilityReport]) -> Verdict {
    reports.iter().fold(Verdict::Pass, |v, r| v.combine(r.verdict))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PolygonStep {
    pub t: f64,
    pub tau: f64,
    pub psi_before: f64,
    pub psi_after: f64,
    /// `W2(alpha_j, mu_j)` against its allowance `(t_j - s) / n`.
    pub alpha_mu_gap: f64,
    pub alpha_mu_allowance: f64,
}

#[derive(Debug, Clone)]
pub struct PolygonResult {
    pub ensemble: PathEnsemble,
    pub steps: Vec<PolygonStep>,
    /// `psi(t_J, alpha_J) - psi(s, alpha_*) + (r - s) / n`; nonnegative when
    /// the monotonicity ledger holds.
    pub ledger_margin: f64,
    pub endpoint_value: f64,
    pub start_value: f64,
    pub residual: f64,
    pub residual_bound: f64,
    pub max_segment: f64,
}

/// Euler polygon witnessing the `v`-stability of `psi2`.
///
/// Each step searches `tau` over `2^-k / n` (largest first) and the
/// direction sampler for `psi2(t + tau, Theta^tau # eta) > psi2(t, .) - tau / n`.
/// Exhausting the search is reported as [`Error::PolygonStuck`].
#[allow(clippy::too_many_arguments)]
pub fn euler_polygon(
    psi2: &dyn MeasureFunctional,
    spec: &DynamicsSpec,
    s: f64,
    r: f64,
    alpha_star: &DiscreteMeasure,
    n: usize,
    settings: &CheckSettings,
) -> Result<PolygonResult> {
    let nf = n as f64;
    if !(r - 1.0 / nf > s) {
        return Err(Error::structural("euler polygon needs r - 1/n > s"));
    }
    if alpha_star.tag() != SpaceTag::StateControl {
        return Err(Error::structural("euler polygon starts from a state-control distribution"));
    }
    let c = settings.radius;
    let ground = spec.ground_metric(Side::First);
    let ot = OtSolver::default();
    let mut rng = stream(settings.seed, "polygon");
    let seg_len = 0.2 / c.max(1e-12);
    let segments = |tau: f64| ((tau / seg_len).ceil() as usize).max(1);

    let z_star = psi2.eval(s, &alpha_star.state_marginal());
    let mut t = s;
    let mut alpha = alpha_star.clone();
    let mut mu = alpha_star.clone();
    let mut pieces: Vec<PathEnsemble> = Vec::new();
    let mut steps = Vec::new();
    let mut max_segment: f64 = 0.0;
    let mut j = 0usize;
    let mut psi_alpha = z_star;
    while t < r - 1.0 / nf {
        let sampler = DirectionSampler::new(spec, Side::First, t, &alpha, c, settings.resolution, settings.dirichlet, &mut rng)?;
        let (cands, _) = sampler.candidates(settings.budget, &mut rng);
        let mut chosen: Option<(f64, f64, DiscreteMeasure)> = None;
        let mut best_quotient = f64::NEG_INFINITY;
        for k in 0..9 {
            let tau = 0.5f64.powi(k) / nf;
            for eta in &cands {
                let v = psi2.eval(t + tau, &theta_shift(eta, tau)?);
                best_quotient = best_quotient.max((v - psi_alpha) / tau);
                if v > psi_alpha - tau / nf && chosen.as_ref().map_or(true, |c| v > c.1) {
                    chosen = Some((tau, v, eta.clone()));
                }
            }
            if chosen.is_some() {
                break;
            }
        }
        let Some((tau, v, eta)) = chosen else {
            return Err(Error::PolygonStuck {
                step: j,
                t,
                best_quotient,
                required: -1.0 / nf,
            });
        };
        let sol = ot.solve(&mu, &alpha, &ground)?;
        let gap = sol.distance;
        let gamma = compose_plan(&sol.plan, &mu, &alpha, &eta)?;
        let seg = segments(tau);
        max_segment = max_segment.max(tau / seg as f64);
        pieces.push(line_lift(&gamma, t, t + tau, seg)?);
        steps.push(PolygonStep {
            t,
            tau,
            psi_before: psi_alpha,
            psi_after: v,
            alpha_mu_gap: gap,
            alpha_mu_allowance: (t - s) / nf,
        });
        alpha = xi_shift(&eta, tau)?;
        mu = xi_shift(&gamma, tau)?;
        psi_alpha = v;
        t += tau;
        j += 1;
    }
    let ledger_margin = psi_alpha - z_star + (r - s) / nf;

    // Closing step from mu_J to r with the best sampled direction.
    let tau = r - t;
    let sampler = DirectionSampler::new(spec, Side::First, t, &mu, c, settings.resolution, settings.dirichlet, &mut rng)?;
    let (cands, _) = sampler.candidates(settings.budget, &mut rng);
    let mut last: Option<(f64, DiscreteMeasure)> = None;
    for eta in cands {
        let v = psi2.eval(r, &theta_shift(&eta, tau)?);
        if last.as_ref().map_or(true, |l| v > l.0) {
            last = Some((v, eta));
        }
    }
    let (endpoint_value, gamma) = last.expect("sampler is nonempty");
    let seg = segments(tau);
    max_segment = max_segment.max(tau / seg as f64);
    pieces.push(line_lift(&gamma, t, r, seg)?);

    let mut ensemble = pieces.remove(0);
    for p in pieces {
        ensemble = concatenate(&ensemble, &p)?;
    }
    let residual = verify_flow(spec, Side::First, &ensemble, 0, ensemble.times.len() - 1)?;
    let l = spec.lipschitz;
    let residual_bound = (r - s) * (spec.modulus.eval(1.0 / nf) + 2.0 * l * c / nf + 2.0 * l * (r - s) / nf + 1.0 / nf);
    Ok(PolygonResult {
        ensemble,
        steps,
        ledger_margin,
        endpoint_value,
        start_value: z_star,
        residual,
        residual_bound,
        max_segment,
    })
}

/// `W2` between a polygon node marginal and the ideal chain, exposed for
/// diagnostics.
pub fn node_gap(a: &DiscreteMeasure, b: &DiscreteMeasure, spec: &DynamicsSpec) -> Result<f64> {
    Ok(wasserstein2(a, b, &spec.ground_metric(Side::First))?.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::game::{ControlGrid, DynamicsFamily, Modulus};
    use proptest::prelude::*;
    use std::sync::Arc;

    fn affine(u: &[f64], v: &[f64]) -> DynamicsSpec {
        DynamicsSpec::new(
            1,
            ControlGrid::scalars(u),
            ControlGrid::scalars(v),
            Arc::new(DynamicsFamily::SeparableAffine {
                u_scale: 1.0,
                v_scale: 1.0,
                drift: vec![],
            }),
            1.0,
            Modulus::Linear { k: 1.0 },
            2.0,
        )
        .unwrap()
    }

    fn still() -> DynamicsSpec {
        DynamicsSpec::new(
            1,
            ControlGrid::scalars(&[0.0]),
            ControlGrid::scalars(&[0.0]),
            Arc::new(DynamicsFamily::SeparableAffine {
                u_scale: 0.0,
                v_scale: 0.0,
                drift: vec![],
            }),
            1.0,
            Modulus::Linear { k: 1.0 },
            1.0,
        )
        .unwrap()
    }

    fn alpha(points: &[(f64, usize)]) -> DiscreteMeasure {
        crate::game::control_measure(&points.iter().map(|&(x, u)| (TorusPoint::scalar(x), u)).collect::<Vec<_>>()).unwrap()
    }

    fn settings(spec: &DynamicsSpec) -> CheckSettings {
        CheckSettings::for_spec(spec, 1.0, 64)
    }

    #[test]
    fn sampler_counts() {
        let spec = affine(&[-1.0, 0.0, 1.0], &[-1.0, 0.0, 1.0]);
        let mut rng = stream(0, "t");
        let one = DirectionSampler::new(&spec, Side::First, 0.0, &alpha(&[(0.3, 1)]), 2.0, 0.1, 8, &mut rng).unwrap();
        let ws: Vec<f64> = one.per_atom()[0].iter().map(|w| w[0]).collect();
        assert_eq!(ws.len(), 21);
        assert!(ws.iter().all(|w| (-1.0 - 1e-12..=1.0 + 1e-12).contains(w)));
        let two = DirectionSampler::new(&spec, Side::First, 0.0, &alpha(&[(0.3, 1), (0.6, 0)]), 2.0, 0.1, 8, &mut rng).unwrap();
        assert_eq!(two.product_count(), 441.0);
        let (c, exhaustive) = two.candidates(1000, &mut rng);
        assert!(exhaustive);
        assert_eq!(c.len(), 441);
        let free = still();
        let f = DirectionSampler::new(&free, Side::First, 0.0, &alpha(&[(0.3, 0), (0.6, 0)]), 1.0, 0.1, 8, &mut rng).unwrap();
        assert_eq!(f.product_count(), 1.0);
    }

    #[test]
    fn sampler_over_budget_starts_with_vertices() {
        let spec = affine(&[-1.0, 0.0, 1.0], &[-1.0, 0.0, 1.0]);
        let a = alpha(&[(0.1, 1), (0.3, 1), (0.5, 1), (0.7, 1)]);
        let mut rng = stream(0, "t");
        let sm = DirectionSampler::new(&spec, Side::First, 0.0, &a, 2.0, 0.1, 8, &mut rng).unwrap();
        let (c, exhaustive) = sm.candidates(200, &mut rng);
        assert!(!exhaustive);
        assert_eq!(c.len(), 200);
        assert!(c[..81].iter().all(|e| e.atoms().iter().all(|x| [-1.0, 0.0, 1.0].contains(&x.direction.as_ref().unwrap()[0]))));
    }

    #[test]
    fn derivative_examples() {
        let spec = affine(&[-1.0, 0.0, 1.0], &[-1.0, 0.0, 1.0]);
        let eta = DiscreteMeasure::new(vec![
            Atom::with_direction(TorusPoint::scalar(0.1), 0, vec![0.2], 0.5),
            Atom::with_direction(TorusPoint::scalar(0.4), 2, vec![-0.1], 0.5),
        ])
        .unwrap();
        let ladder = TauLadder {
            tau0: 1e-4 * 4096.0,
            levels: 13,
            tail: 1,
        };
        let c = CylindricalFunctional::constant(3.0);
        let d = v_derivative(&c, 0.2, &eta, &ladder, 1.0, 1e-9).unwrap();
        assert!(d.ladder.iter().all(|p| p.1 == 0.0));
        let time = CylindricalFunctional::time(1.0);
        let d = v_derivative(&time, 0.2, &eta, &ladder, 1.0, 1e-9).unwrap();
        assert!(d.ladder.iter().all(|p| (p.1 - 1.0).abs() < 1e-9));
        let lin = CylindricalFunctional::mean_cos(vec![1], 1.0);
        let exact = lin.first_variation(0.2, &eta).unwrap();
        let d = v_derivative(&lin, 0.2, &eta, &ladder, 1.0, 1e-9).unwrap();
        assert!((d.ladder.last().unwrap().0 - 1e-4).abs() < 1e-15);
        assert!((d.value - exact).abs() < 1e-4);
        // Finite difference against the closed form.
        let h = 1e-6;
        let fd = (lin.eval(0.0, &theta_shift(&eta, h).unwrap()) - lin.eval(0.0, &theta_shift(&eta, -h).unwrap())) / (2.0 * h);
        assert!((fd - exact).abs() < 1e-6);
        let _ = spec;
    }

    #[test]
    fn infinitesimal_examples() {
        let spec = affine(&[-1.0, 0.0, 1.0], &[-1.0, 0.0, 1.0]);
        let st = settings(&spec);
        let a = alpha(&[(0.2, 0), (0.7, 2)]);
        for check in [Check::U, Check::V] {
            let r = check_infinitesimal(&CylindricalFunctional::constant(1.0), &spec, check, 0.1, &a, &st).unwrap();
            assert_eq!(r.verdict, Verdict::Pass);
        }
        let r = check_infinitesimal(&CylindricalFunctional::time(1.0), &spec, Check::V, 0.1, &a, &st).unwrap();
        assert_eq!(r.verdict, Verdict::Pass);
        assert!((r.best_value - 1.0).abs() < 1e-9);

        let free = still();
        let st = settings(&free);
        let neg = CylindricalFunctional::time(-1.0);
        let z = alpha(&[(0.5, 0)]);
        let r = check_infinitesimal(&neg, &free, Check::V, 0.1, &z, &st).unwrap();
        assert_eq!(r.verdict, Verdict::Fail);
        assert_eq!(r.verdict.exit_code(), 2);
        let mirror = free.mirrored();
        let r = check_infinitesimal(&Negated(&neg), &mirror, Check::U, 0.1, &z, &st).unwrap();
        assert_eq!(r.verdict, Verdict::Fail);
    }

    #[test]
    fn sampled_search_never_certifies() {
        let spec = affine(&[-1.0, 0.0, 1.0], &[-1.0, 0.0, 1.0]);
        let mut st = settings(&spec);
        st.budget = 10;
        let a = alpha(&[(0.1, 1), (0.3, 1), (0.5, 1)]);
        let r = check_infinitesimal(&CylindricalFunctional::time(-5.0), &spec, Check::V, 0.1, &a, &st).unwrap();
        assert_eq!(r.verdict, Verdict::Inconclusive);
    }

    #[test]
    fn integral_examples() {
        let spec = affine(&[-1.0, 0.0, 1.0], &[-0.5, 0.0, 0.5]);
        let mut st = settings(&spec);
        st.budget = 200;
        let fs = FlowSettings {
            dt: 0.01,
            ..Default::default()
        };
        let a = alpha(&[(0.3, 1), (0.8, 1)]);
        let r = check_integral(&CylindricalFunctional::constant(2.0), &spec, Check::V, 0.0, 0.5, &a, 2, &fs, &st).unwrap();
        assert_eq!(r.verdict, Verdict::Pass);
        // Second player alone steers cos mass uphill at speed 0.5.
        let psi = CylindricalFunctional::mean_cos(vec![1], 1.0);
        let r = check_integral(&psi, &spec, Check::V, 0.0, 0.2, &a, 2, &fs, &st).unwrap();
        assert_eq!(r.verdict, Verdict::Pass);
        assert!(r.best_value > 0.0);
        let r = check_integral(&CylindricalFunctional::time(-1.0), &still(), Check::V, 0.0, 0.5, &alpha(&[(0.3, 0)]), 1, &fs, &st).unwrap();
        assert_eq!(r.verdict, Verdict::Fail);
    }

    #[test]
    fn terminal_offset_detected() {
        let g = CylindricalFunctional::mean_cos(vec![1], 1.0);
        let mut shifted = g.clone();
        shifted.offset = 1.0;
        let samples: Vec<_> = (0..5).map(|i| DiscreteMeasure::dirac(TorusPoint::scalar(0.1 * i as f64))).collect();
        let ok = check_terminal(&g, &g, 1.0, TerminalRelation::Equal, &samples, 1e-12).unwrap();
        assert_eq!(ok.verdict, Verdict::Pass);
        let bad = check_terminal(&shifted, &g, 1.0, TerminalRelation::Equal, &samples, 1e-12).unwrap();
        assert_eq!(bad.verdict, Verdict::Fail);
        assert!((bad.best_value - 1.0).abs() < 1e-12);
    }

    #[test]
    fn polygon_on_constant_and_negative_time() {
        let spec = affine(&[-1.0, 0.0, 1.0], &[-1.0, 0.0, 1.0]);
        let st = settings(&spec);
        let a = alpha(&[(0.2, 0), (0.7, 2)]);
        let res = euler_polygon(&CylindricalFunctional::constant(0.0), &spec, 0.0, 0.5, &a, 8, &st).unwrap();
        assert_eq!(res.ensemble.state_control_marginal(0).unwrap(), a);
        assert!(res.ledger_margin >= 0.0);
        assert!(res.residual <= res.residual_bound + 2.0 * res.max_segment * spec.speed_bound);
        for step in &res.steps {
            assert!(step.alpha_mu_gap <= step.alpha_mu_allowance + 1e-12);
        }
        let free = still();
        let err = euler_polygon(&CylindricalFunctional::time(-1.0), &free, 0.0, 0.5, &alpha(&[(0.3, 0)]), 8, &settings(&free));
        assert!(matches!(err, Err(Error::PolygonStuck { step: 0, .. })));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn lower_below_upper_and_converge(
            xs in prop::collection::vec((0.0..1.0f64, -1.0..1.0f64), 1..4),
            q in -2.0..2.0f64,
            s in 0.0..0.5f64,
        ) {
            let eta = DiscreteMeasure::normalized(
                xs.iter().map(|&(x, w)| Atom::with_direction(TorusPoint::scalar(x), 0, vec![w], 1.0)).collect(),
            ).unwrap();
            let psi = CylindricalFunctional {
                time_slope: 0.3,
                offset: 0.0,
                features: vec![
                    TrigFeature { wave: vec![1], kind: TrigKind::Cos },
                    TrigFeature { wave: vec![2], kind: TrigKind::Sin },
                ],
                linear: vec![1.0, -0.5],
                quadratic: vec![vec![q, 0.0], vec![0.0, 0.0]],
            };
            let ladder = TauLadder { tau0: 1e-4 * 4096.0, levels: 13, tail: 4 };
            let lo = u_derivative(&psi, s, &eta, &ladder, 1.0, 1e-9).unwrap();
            let hi = v_derivative(&psi, s, &eta, &ladder, 1.0, 1e-9).unwrap();
            let exact = psi.first_variation(s, &eta).unwrap();
            prop_assert!(lo.value <= hi.value);
            let point = TauLadder { tail: 1, ..ladder };
            let lo1 = u_derivative(&psi, s, &eta, &point, 1.0, 1e-9).unwrap();
            let hi1 = v_derivative(&psi, s, &eta, &point, 1.0, 1e-9).unwrap();
            prop_assert!(hi1.value - lo1.value <= 1e-3);
            prop_assert!((hi1.value - exact).abs() <= 1e-2);
        }

        #[test]
        fn mirror_swaps_checks(x in 0.0..1.0f64, slope in prop::sample::select(vec![-1.0, 1.0]), u in 0usize..3) {
            let spec = affine(&[-1.0, 0.0, 1.0], &[-0.5, 0.0, 0.5]);
            let st = settings(&spec);
            let psi = CylindricalFunctional { time_slope: slope, ..CylindricalFunctional::mean_cos(vec![1], 1.0) };
            let pos = alpha(&[(x, u)]);
            let mirror = spec.mirrored();
            let v = check_infinitesimal(&psi, &spec, Check::V, 0.1, &pos, &st).unwrap();
            let mv = check_infinitesimal(&Negated(&psi), &mirror, Check::U, 0.1, &pos, &st).unwrap();
            prop_assert_eq!(v.verdict, mv.verdict);
            let u_ = check_infinitesimal(&psi, &spec, Check::U, 0.1, &pos, &st).unwrap();
            let mu = check_infinitesimal(&Negated(&psi), &mirror, Check::V, 0.1, &pos, &st).unwrap();
            prop_assert_eq!(u_.verdict, mu.verdict);
        }
    }
}
