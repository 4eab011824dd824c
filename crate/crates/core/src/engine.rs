//! Stepwise feedback play, pool-restricted upper and lower value estimates,
//! the extremal-shift strategy, and a dynamic-programming value oracle for
//! tiny one-dimensional instances.

use std::fmt::Write as _;
use std::sync::Arc;

use rand::Rng as _;
use rand_distr::{Dirichlet, Distribution};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::flow::{solve_flow, ControlDistribution, FlowSettings, PathEnsemble, RelaxedControl};
use crate::game::{DynamicsSpec, Side};
use crate::measure::{total_variation, Atom, DiscreteMeasure, SpaceTag};
use crate::ot::{wasserstein2, GroundMetric};
use crate::rng::stream_indexed;
use crate::stability::{MeasureFunctional, Regularity};
use crate::torus::{dot, wrap, TorusPoint, Velocity};

/// `f` with the arguments ordered by player side.
fn f_side(spec: &DynamicsSpec, side: Side, t: f64, x: &TorusPoint, m: &DiscreteMeasure, own: usize, other: usize) -> Velocity {
    match side {
        Side::First => spec.f(t, x, m, own, other),
        Side::Second => spec.f(t, x, m, other, own),
    }
}

/// Feedback rule `(t, m) -> distribution of constant controls` of one player.
pub trait FeedbackStrategy: Send + Sync {
    fn side(&self) -> Side;
    fn decide(&self, spec: &DynamicsSpec, t: f64, m: &DiscreteMeasure) -> Result<DiscreteMeasure>;
    fn label(&self) -> String;
}

/// Same grid control on every atom.
#[derive(Debug, Clone)]
pub struct ConstantStrategy {
    pub side: Side,
    pub control: usize,
}

impl FeedbackStrategy for ConstantStrategy {
    fn side(&self) -> Side {
        self.side
    }

    fn decide(&self, spec: &DynamicsSpec, _t: f64, m: &DiscreteMeasure) -> Result<DiscreteMeasure> {
        if self.control >= spec.grid(self.side).len() {
            return Err(Error::structural("constant strategy control outside the grid"));
        }
        Ok(m.pushforward(|a| Atom::with_control(a.point.clone(), self.control, a.weight)))
    }

    fn label(&self) -> String {
        format!("constant-{}", self.control)
    }
}

/// Extremal-shift rule driven by a (claimed) stable function `psi`.
///
/// At `(t, m)` a guide measure is anchored at `m` and advanced by `lead`
/// under per-atom minimax lookahead controls on `psi` over one step of
/// length `step`. Each atom then takes the control minimizing
/// `max_other <w, f>` with `w = x - y` its optimal-transport displacement to
/// the guide; ties go to the guide's own control.
pub struct ExtremalShift {
    pub psi: Arc<dyn MeasureFunctional>,
    pub side: Side,
    pub step: f64,
    pub lead: f64,
}

impl ExtremalShift {
    pub fn new(psi: Arc<dyn MeasureFunctional>, side: Side, step: f64) -> Self {
        ExtremalShift {
            psi,
            side,
            step,
            lead: 0.0,
        }
    }

    /// Per-atom lookahead: own control and the opponent's reply.
    fn lookahead(&self, spec: &DynamicsSpec, t: f64, m: &DiscreteMeasure) -> Vec<(usize, usize)> {
        let own_n = spec.grid(self.side).len();
        let other_n = spec.grid(self.side.other()).len();
        // First player minimizes psi, second maximizes.
        let sign = match self.side {
            Side::First => 1.0,
            Side::Second => -1.0,
        };
        let h = self.step;
        let atoms = m.atoms();
        (0..atoms.len())
            .map(|i| {
                let mut best = (f64::INFINITY, 0usize, 0usize);
                for own in 0..own_n {
                    let mut worst = (f64::NEG_INFINITY, 0usize);
                    for other in 0..other_n {
                        let vel = f_side(spec, self.side, t, &atoms[i].point, m, own, other);
                        let moved = moved_atom(m, i, &vel, h);
                        let val = sign * self.psi.eval(t + h, &moved);
                        if val > worst.0 + 1e-12 {
                            worst = (val, other);
                        }
                    }
                    if worst.0 < best.0 - 1e-12 {
                        best = (worst.0, own, worst.1);
                    }
                }
                (best.1, best.2)
            })
            .collect()
    }
}

fn moved_atom(m: &DiscreteMeasure, i: usize, vel: &[f64], h: f64) -> DiscreteMeasure {
    let atoms = m
        .atoms()
        .iter()
        .enumerate()
        .map(|(j, a)| {
            if j == i {
                Atom::state(a.point.translate(vel, h), a.weight)
            } else {
                Atom::state(a.point.clone(), a.weight)
            }
        })
        .collect();
    DiscreteMeasure::from_parts_unchecked(atoms, SpaceTag::State, None)
}

impl FeedbackStrategy for ExtremalShift {
    fn side(&self) -> Side {
        self.side
    }

    fn decide(&self, spec: &DynamicsSpec, t: f64, m: &DiscreteMeasure) -> Result<DiscreteMeasure> {
        let m = m.state_marginal();
        let guide_controls = self.lookahead(spec, t, &m);
        let guide = m.pushforward(|a| a.clone());
        let guide_atoms: Vec<Atom> = guide
            .atoms()
            .iter()
            .zip(&guide_controls)
            .map(|(a, &(own, other))| {
                let vel = f_side(spec, self.side, t, &a.point, &m, own, other);
                Atom::state(a.point.translate(&vel, self.lead), a.weight)
            })
            .collect();
        let guide = DiscreteMeasure::from_parts_unchecked(guide_atoms, SpaceTag::State, None);
        let (_, plan) = wasserstein2(&m, &guide, &GroundMetric::default())?;
        let own_n = spec.grid(self.side).len();
        let other_n = spec.grid(self.side.other()).len();
        let mut atoms = Vec::new();
        for &(i, j, mass) in &plan.entries {
            if mass <= 0.0 {
                continue;
            }
            let x = &m.atoms()[i].point;
            let w = guide.atoms()[j].point.displacement_to(x);
            let mut best = (f64::INFINITY, guide_controls[i].0);
            for own in 0..own_n {
                let worst = (0..other_n)
                    .map(|other| dot(&w, &f_side(spec, self.side, t, x, &m, own, other)))
                    .fold(f64::NEG_INFINITY, f64::max);
                let tie = (worst - best.0).abs() <= 1e-12;
                if worst < best.0 - 1e-12 || (tie && own == guide_controls[i].0) {
                    best = (worst, own);
                }
            }
            atoms.push(Atom::with_control(x.clone(), best.1, mass));
        }
        DiscreteMeasure::normalized(atoms)
    }

    fn label(&self) -> String {
        format!("extremal-shift-{:?}", self.side).to_lowercase()
    }
}

/// Per-step completion of a distribution of one player's constant controls
/// by responses of the other player.
pub trait CompletionPolicy: Send + Sync {
    /// Relaxed responses with conditional weights for each atom of
    /// `position` (the `side` player's distribution) on `[t0, t1]`.
    fn complete(
        &self,
        spec: &DynamicsSpec,
        side: Side,
        t0: f64,
        t1: f64,
        step: usize,
        position: &DiscreteMeasure,
    ) -> Result<Vec<Vec<(RelaxedControl, f64)>>>;

    fn label(&self) -> String;
}

/// Seeded random mixtures per atom and step.
#[derive(Debug, Clone)]
pub struct RandomMixtures {
    pub seed: u64,
    /// Pure random controls instead of mixtures.
    pub pure: bool,
}

impl CompletionPolicy for RandomMixtures {
    fn complete(
        &self,
        spec: &DynamicsSpec,
        side: Side,
        t0: f64,
        t1: f64,
        step: usize,
        position: &DiscreteMeasure,
    ) -> Result<Vec<Vec<(RelaxedControl, f64)>>> {
        let n = spec.grid(side.other()).len();
        let mut rng = stream_indexed(self.seed, "random-completion", step as u64);
        position
            .atoms()
            .iter()
            .map(|_| {
                if self.pure || n == 1 {
                    Ok(vec![(RelaxedControl::constant(rng.gen_range(0..n), n, t0, t1), 1.0)])
                } else {
                    let d = Dirichlet::new(&vec![1.0; n]).map_err(|e| Error::structural(e.to_string()))?;
                    let mut p: Vec<f64> = d.sample(&mut rng);
                    let s: f64 = p.iter().sum();
                    p.iter_mut().for_each(|x| *x /= s);
                    Ok(vec![(RelaxedControl::mixture(p, t0, t1)?, 1.0)])
                }
            })
            .collect()
    }

    fn label(&self) -> String {
        format!("random-{}{}", if self.pure { "pure-" } else { "" }, self.seed)
    }
}

/// One-step atomwise best response on `objective` (maximized when the
/// completing player is the second one, minimized otherwise).
pub struct GreedyResponse {
    pub objective: Arc<dyn MeasureFunctional>,
}

impl CompletionPolicy for GreedyResponse {
    fn complete(
        &self,
        spec: &DynamicsSpec,
        side: Side,
        t0: f64,
        t1: f64,
        _step: usize,
        position: &DiscreteMeasure,
    ) -> Result<Vec<Vec<(RelaxedControl, f64)>>> {
        let m = position.state_marginal();
        let n = spec.grid(side.other()).len();
        let sign = match side {
            Side::First => 1.0,
            Side::Second => -1.0,
        };
        let h = t1 - t0;
        position
            .atoms()
            .iter()
            .enumerate()
            .map(|(i, a)| {
                let own = a.control.ok_or_else(|| Error::structural("position needs controls"))?;
                let mut best = (f64::NEG_INFINITY, 0);
                for other in 0..n {
                    let vel = f_side(spec, side, t0, &a.point, &m, own, other);
                    let v = sign * self.objective.eval(t1, &moved_atom(&m, i, &vel, h));
                    if v > best.0 + 1e-12 {
                        best = (v, other);
                    }
                }
                Ok(vec![(RelaxedControl::constant(best.1, n, t0, t1), 1.0)])
            })
            .collect()
    }

    fn label(&self) -> String {
        "greedy".into()
    }
}

/// The other player's feedback strategy used as a completion: each atom
/// splits by the strategy's conditional distribution at its state.
pub struct StrategyResponse(pub Arc<dyn FeedbackStrategy>);

impl CompletionPolicy for StrategyResponse {
    fn complete(
        &self,
        spec: &DynamicsSpec,
        side: Side,
        t0: f64,
        t1: f64,
        _step: usize,
        position: &DiscreteMeasure,
    ) -> Result<Vec<Vec<(RelaxedControl, f64)>>> {
        if self.0.side() != side.other() {
            return Err(Error::structural("response strategy must belong to the other player"));
        }
        let m = position.state_marginal().merged();
        let reply = self.0.decide(spec, t0, &m)?;
        check_marginal(&reply, &m)?;
        let n = spec.grid(side.other()).len();
        let conds = reply.disintegrate(crate::measure::Base::State)?;
        position
            .atoms()
            .iter()
            .map(|a| {
                let key = a.point.key();
                let c = conds
                    .iter()
                    .find(|c| c.base.point.key() == key)
                    .ok_or_else(|| Error::structural("response strategy dropped a state"))?;
                Ok(c
                    .fibre
                    .iter()
                    .map(|b| (RelaxedControl::constant(b.control.expect("control"), n, t0, t1), b.weight))
                    .collect())
            })
            .collect()
    }

    fn label(&self) -> String {
        format!("strategy:{}", self.0.label())
    }
}

fn check_marginal(alpha: &DiscreteMeasure, m: &DiscreteMeasure) -> Result<()> {
    let gap = total_variation(&alpha.state_marginal().merged(), &m.merged());
    if gap > 1e-12 {
        return Err(Error::structural(format!("strategy output has state marginal off by {gap:e}")));
    }
    if !alpha.tag().has_control() {
        return Err(Error::structural("strategy output needs controls"));
    }
    Ok(())
}

/// Times of control correction `t_0 < ... < t_N`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Partition {
    nodes: Vec<f64>,
}

impl Partition {
    pub fn new(nodes: Vec<f64>) -> Result<Self> {
        if nodes.len() < 2 || nodes.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::structural("partition must be strictly increasing with >= 2 nodes"));
        }
        Ok(Partition { nodes })
    }

    pub fn uniform(t0: f64, t_end: f64, cells: usize) -> Result<Self> {
        Self::new(
            (0..=cells)
                .map(|k| if k == cells { t_end } else { t0 + (t_end - t0) * k as f64 / cells as f64 })
                .collect(),
        )
    }

    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    pub fn mesh(&self) -> f64 {
        self.nodes.windows(2).map(|w| w[1] - w[0]).fold(0.0, f64::max)
    }
}

/// Game data shared by plays.
pub struct Game<'a> {
    pub spec: &'a DynamicsSpec,
    pub payoff: &'a dyn MeasureFunctional,
    pub horizon: f64,
    pub flow: FlowSettings,
}

#[derive(Debug, Clone)]
pub struct PlayRecord {
    pub outcome: f64,
    pub nodes: Vec<DiscreteMeasure>,
    pub pieces: Vec<PathEnsemble>,
}

impl PlayRecord {
    pub fn terminal(&self) -> &DiscreteMeasure {
        self.nodes.last().expect("nonempty")
    }
}

/// Stepwise play of `strategy` against `completion` on `partition`.
pub fn play_stepwise(
    game: &Game<'_>,
    m0: &DiscreteMeasure,
    strategy: &dyn FeedbackStrategy,
    completion: &dyn CompletionPolicy,
    partition: &Partition,
) -> Result<PlayRecord> {
    let nodes = partition.nodes();
    if (nodes[nodes.len() - 1] - game.horizon).abs() > 1e-12 {
        return Err(Error::structural("partition must end at the horizon"));
    }
    let side = strategy.side();
    let mut m = m0.state_marginal();
    let mut measures = vec![m.clone()];
    let mut pieces = Vec::new();
    for (k, w) in nodes.windows(2).enumerate() {
        let (t0, t1) = (w[0], w[1]);
        let alpha = strategy.decide(game.spec, t0, &m)?;
        check_marginal(&alpha, &m)?;
        let replies = completion.complete(game.spec, side, t0, t1, k, &alpha)?;
        let kappa = ControlDistribution::complete(game.spec, side, &alpha, t0, t1, |i, _| replies[i].clone())?;
        let sol = solve_flow(game.spec, t0, t1, &m, &kappa, side, &game.flow)?;
        m = sol.terminal().merged();
        measures.push(m.clone());
        pieces.push(sol.ensemble);
    }
    Ok(PlayRecord {
        outcome: game.payoff.eval(game.horizon, &m),
        nodes: measures,
        pieces,
    })
}

/// Pool-restricted value estimate with its outcome table.
#[derive(Debug, Clone, Serialize)]
pub struct GammaEstimate {
    pub value: f64,
    pub strategies: Vec<String>,
    pub completions: Vec<String>,
    /// `outcomes[i][j]`: strategy `i` against completion `j`.
    pub outcomes: Vec<Vec<f64>>,
}

fn outcome_table(
    game: &Game<'_>,
    m0: &DiscreteMeasure,
    partition: &Partition,
    strategies: &[Arc<dyn FeedbackStrategy>],
    completions: &[Arc<dyn CompletionPolicy>],
) -> Result<Vec<Vec<f64>>> {
    if strategies.is_empty() || completions.is_empty() {
        return Err(Error::structural("pools must be nonempty"));
    }
    strategies
        .iter()
        .map(|s| {
            completions
                .iter()
                .map(|c| Ok(play_stepwise(game, m0, s.as_ref(), c.as_ref(), partition)?.outcome))
                .collect()
        })
        .collect()
}

/// `min` over first-player strategies of `max` over completions.
pub fn estimate_gamma1(
    game: &Game<'_>,
    m0: &DiscreteMeasure,
    partition: &Partition,
    strategies: &[Arc<dyn FeedbackStrategy>],
    completions: &[Arc<dyn CompletionPolicy>],
) -> Result<GammaEstimate> {
    if strategies.iter().any(|s| s.side() != Side::First) {
        return Err(Error::structural("upper estimate takes first-player strategies"));
    }
    let outcomes = outcome_table(game, m0, partition, strategies, completions)?;
    let value = outcomes
        .iter()
        .map(|row| row.iter().copied().fold(f64::NEG_INFINITY, f64::max))
        .fold(f64::INFINITY, f64::min);
    Ok(GammaEstimate {
        value,
        strategies: strategies.iter().map(|s| s.label()).collect(),
        completions: completions.iter().map(|c| c.label()).collect(),
        outcomes,
    })
}

/// `max` over second-player strategies of `min` over completions.
pub fn estimate_gamma2(
    game: &Game<'_>,
    m0: &DiscreteMeasure,
    partition: &Partition,
    strategies: &[Arc<dyn FeedbackStrategy>],
    completions: &[Arc<dyn CompletionPolicy>],
) -> Result<GammaEstimate> {
    if strategies.iter().any(|s| s.side() != Side::Second) {
        return Err(Error::structural("lower estimate takes second-player strategies"));
    }
    let outcomes = outcome_table(game, m0, partition, strategies, completions)?;
    let value = outcomes
        .iter()
        .map(|row| row.iter().copied().fold(f64::INFINITY, f64::min))
        .fold(f64::NEG_INFINITY, f64::max);
    Ok(GammaEstimate {
        value,
        strategies: strategies.iter().map(|s| s.label()).collect(),
        completions: completions.iter().map(|c| c.label()).collect(),
        outcomes,
    })
}

/// Backward dynamic-programming value on configurations of equal-weight
/// particles on a periodic grid of the circle.
///
/// Each time step is one explicit Euler step `x + dt f` with the
/// configuration measure frozen; values off the grid are periodic
/// multilinear interpolants, and values between time nodes are linear in
/// time. The stored table is `min_u max_v`; `isaacs_gap` is the largest
/// difference to `max_v min_u`.
#[derive(Debug, Clone, Serialize)]
pub struct ValueOracle {
    pub t0: f64,
    pub horizon: f64,
    pub cells: usize,
    pub particles: usize,
    pub steps: usize,
    /// `table[k][flat]` with `flat = sum_i idx_i cells^i`.
    pub table: Vec<Vec<f64>>,
    pub isaacs_gap: f64,
    pub lipschitz: f64,
}

impl ValueOracle {
    pub fn build(
        spec: &DynamicsSpec,
        g: &dyn MeasureFunctional,
        cells: usize,
        particles: usize,
        steps: usize,
        t0: f64,
        horizon: f64,
    ) -> Result<Self> {
        if spec.dim != 1 {
            return Err(Error::structural("value oracle handles d = 1 only"));
        }
        if !(2..=8).contains(&cells) || !(1..=4).contains(&particles) || !(1..=32).contains(&steps) {
            return Err(Error::structural("value oracle limits: <= 8 cells, <= 4 particles, <= 32 steps"));
        }
        if !(horizon > t0) {
            return Err(Error::structural("value oracle needs T > t0"));
        }
        let size = cells.pow(particles as u32);
        let dt = (horizon - t0) / steps as f64;
        let configs = sorted_configs(cells, particles);
        let mut oracle = ValueOracle {
            t0,
            horizon,
            cells,
            particles,
            steps,
            table: vec![vec![0.0; size]; steps + 1],
            isaacs_gap: 0.0,
            lipschitz: 0.0,
        };
        let positions = |c: &[usize]| -> Vec<f64> { c.iter().map(|&i| i as f64 / cells as f64).collect() };
        for c in &configs {
            let v = g.eval(horizon, &oracle.config_measure(&positions(c)));
            oracle.fill(steps, c, v);
        }
        let nu = spec.u_grid.len();
        let nv = spec.v_grid.len();
        let ju = nu.pow(particles as u32);
        let jv = nv.pow(particles as u32);
        for k in (0..steps).rev() {
            let t = t0 + dt * k as f64;
            for c in &configs {
                let xs = positions(c);
                let m = oracle.config_measure(&xs);
                // moved[p][u][v] = position after one step
                let moved: Vec<Vec<Vec<f64>>> = xs
                    .iter()
                    .map(|&x| {
                        let p = TorusPoint::scalar(x);
                        (0..nu)
                            .map(|u| (0..nv).map(|v| wrap(x + dt * spec.f(t, &p, &m, u, v)[0])).collect())
                            .collect()
                    })
                    .collect();
                let mut values = vec![0.0; ju * jv];
                let mut pt = vec![0.0; particles];
                for a in 0..ju {
                    for b in 0..jv {
                        let (mut ra, mut rb) = (a, b);
                        for (p, slot) in pt.iter_mut().enumerate() {
                            *slot = moved[p][ra % nu][rb % nv];
                            ra /= nu;
                            rb /= nv;
                        }
                        values[a * jv + b] = oracle.interpolate(k + 1, &pt);
                    }
                }
                let minmax = (0..ju)
                    .map(|a| values[a * jv..(a + 1) * jv].iter().copied().fold(f64::NEG_INFINITY, f64::max))
                    .fold(f64::INFINITY, f64::min);
                let maxmin = (0..jv)
                    .map(|b| (0..ju).map(|a| values[a * jv + b]).fold(f64::INFINITY, f64::min))
                    .fold(f64::NEG_INFINITY, f64::max);
                oracle.isaacs_gap = oracle.isaacs_gap.max(minmax - maxmin);
                oracle.fill(k, c, minmax);
            }
        }
        let mut lip: f64 = 0.0;
        for row in &oracle.table {
            for flat in 0..size {
                let mut stride = 1;
                for _ in 0..particles {
                    let idx = (flat / stride) % cells;
                    let next = flat - idx * stride + ((idx + 1) % cells) * stride;
                    lip = lip.max((row[next] - row[flat]).abs() * cells as f64);
                    stride *= cells;
                }
            }
        }
        oracle.lipschitz = lip * particles as f64;
        Ok(oracle)
    }

    pub fn dt(&self) -> f64 {
        (self.horizon - self.t0) / self.steps as f64
    }

    pub fn node_time(&self, k: usize) -> f64 {
        self.t0 + self.dt() * k as f64
    }

    fn config_measure(&self, xs: &[f64]) -> DiscreteMeasure {
        let w = 1.0 / xs.len() as f64;
        DiscreteMeasure::from_parts_unchecked(
            xs.iter().map(|&x| Atom::state(TorusPoint::scalar(x), w)).collect(),
            SpaceTag::State,
            None,
        )
    }

    fn fill(&mut self, k: usize, sorted: &[usize], v: f64) {
        for perm in permutations(sorted) {
            let flat = perm.iter().rev().fold(0, |acc, &i| acc * self.cells + i);
            self.table[k][flat] = v;
        }
    }

    /// Table value at grid indices.
    pub fn node_value(&self, k: usize, idx: &[usize]) -> f64 {
        let flat = idx.iter().rev().fold(0, |acc, &i| acc * self.cells + i);
        self.table[k][flat]
    }

    fn interpolate(&self, k: usize, xs: &[f64]) -> f64 {
        let n = self.cells as f64;
        let base: Vec<(usize, usize, f64)> = xs
            .iter()
            .map(|&x| {
                let y = wrap(x) * n;
                let f = y.floor();
                let i = (f as usize) % self.cells;
                (i, (i + 1) % self.cells, y - f)
            })
            .collect();
        let mut acc = 0.0;
        for corner in 0..(1usize << xs.len()) {
            let mut weight = 1.0;
            let mut flat = 0;
            let mut stride = 1;
            for (p, &(i0, i1, th)) in base.iter().enumerate() {
                let hi = corner >> p & 1 == 1;
                weight *= if hi { th } else { 1.0 - th };
                flat += if hi { i1 } else { i0 } * stride;
                stride *= self.cells;
            }
            if weight != 0.0 {
                acc += weight * self.table[k][flat];
            }
        }
        acc
    }

    /// Particle positions representing `m`: the atoms themselves when `m`
    /// already has the right number of equal weights, otherwise quantiles.
    pub fn particles_of(&self, m: &DiscreteMeasure) -> Vec<f64> {
        let n = self.particles;
        let w = 1.0 / n as f64;
        if m.len() == n && m.atoms().iter().all(|a| (a.weight - w).abs() <= 1e-12) {
            return m.atoms().iter().map(|a| a.point.coords()[0]).collect();
        }
        let mut atoms: Vec<(f64, f64)> = m.atoms().iter().map(|a| (a.point.coords()[0], a.weight)).collect();
        atoms.sort_by(|a, b| a.0.total_cmp(&b.0));
        let mut out = Vec::with_capacity(n);
        let mut cum = 0.0;
        let mut it = atoms.iter().peekable();
        for j in 0..n {
            let level = (j as f64 + 0.5) * w;
            while let Some(&&(x, wt)) = it.peek() {
                if cum + wt >= level || atoms.len() == 1 {
                    out.push(x);
                    break;
                }
                cum += wt;
                it.next();
            }
            if out.len() <= j {
                out.push(atoms.last().expect("nonempty").0);
            }
        }
        out
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }
}

impl MeasureFunctional for ValueOracle {
    fn eval(&self, t: f64, m: &DiscreteMeasure) -> f64 {
        let xs = self.particles_of(m);
        let pos = ((t - self.t0) / self.dt()).clamp(0.0, self.steps as f64);
        let k = (pos.floor() as usize).min(self.steps - 1);
        let th = pos - k as f64;
        if th == 0.0 {
            return self.interpolate(k, &xs);
        }
        if th == 1.0 {
            return self.interpolate(k + 1, &xs);
        }
        (1.0 - th) * self.interpolate(k, &xs) + th * self.interpolate(k + 1, &xs)
    }

    fn regularity(&self) -> Regularity {
        Regularity::GridInterpolated {
            lipschitz: self.lipschitz,
        }
    }
}

fn sorted_configs(cells: usize, particles: usize) -> Vec<Vec<usize>> {
    fn rec(cells: usize, left: usize, start: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if left == 0 {
            out.push(cur.clone());
            return;
        }
        for i in start..cells {
            cur.push(i);
            rec(cells, left - 1, i, cur, out);
            cur.pop();
        }
    }
    let mut out = Vec::new();
    rec(cells, particles, 0, &mut Vec::new(), &mut out);
    out
}

fn permutations(sorted: &[usize]) -> Vec<Vec<usize>> {
    let mut out = vec![sorted.to_vec()];
    let mut cur = sorted.to_vec();
    // Lexicographic successor enumerates each distinct permutation once.
    loop {
        let Some(i) = (0..cur.len().saturating_sub(1)).rev().find(|&i| cur[i] < cur[i + 1]) else {
            break;
        };
        let j = (i + 1..cur.len()).rev().find(|&j| cur[j] > cur[i]).expect("successor exists");
        cur.swap(i, j);
        cur[i + 1..].reverse();
        out.push(cur.clone());
    }
    out
}

/// CSV rows `run_id,side,outcome,mesh,seed`.
pub fn runs_csv(rows: &[(String, Side, f64, f64, u64)]) -> String {
    let mut out = String::from("run_id,side,outcome,mesh,seed\n");
    for (id, side, outcome, mesh, seed) in rows {
        let s = match side {
            Side::First => "first",
            Side::Second => "second",
        };
        let _ = writeln!(out, "{id},{s},{outcome},{mesh},{seed}");
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::game::{ControlGrid, DynamicsFamily, Modulus};
    use crate::stability::{CylindricalFunctional, FnFunctional};

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

    fn zero() -> DynamicsSpec {
        DynamicsSpec::new(
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
        .unwrap()
    }

    fn cloud(xs: &[f64]) -> DiscreteMeasure {
        DiscreteMeasure::uniform(xs.iter().map(|&x| TorusPoint::scalar(x)).collect()).unwrap()
    }

    #[test]
    fn permutations_distinct() {
        assert_eq!(permutations(&[0, 1, 1]).len(), 3);
        assert_eq!(permutations(&[0, 1, 2]).len(), 6);
        assert_eq!(sorted_configs(8, 2).len(), 36);
        assert_eq!(sorted_configs(8, 4).len(), 330);
    }

    #[test]
    fn zero_dynamics_conserve_measure() {
        let spec = zero();
        let g = CylindricalFunctional::mean_cos(vec![1], 1.0);
        let game = Game {
            spec: &spec,
            payoff: &g,
            horizon: 1.0,
            flow: FlowSettings { dt: 0.05, ..Default::default() },
        };
        let m0 = cloud(&[0.1, 0.45, 0.8]);
        let p = Partition::uniform(0.0, 1.0, 4).unwrap();
        let rec = play_stepwise(&game, &m0, &ConstantStrategy { side: Side::First, control: 1 }, &RandomMixtures { seed: 3, pure: false }, &p).unwrap();
        assert_eq!(rec.terminal().atoms(), m0.atoms());
        assert_eq!(rec.outcome, g.eval(1.0, &m0));
        let s: Vec<Arc<dyn FeedbackStrategy>> = vec![Arc::new(ConstantStrategy { side: Side::First, control: 0 })];
        let c: Vec<Arc<dyn CompletionPolicy>> = vec![Arc::new(RandomMixtures { seed: 1, pure: true })];
        let g1 = estimate_gamma1(&game, &m0, &p, &s, &c).unwrap();
        let s2: Vec<Arc<dyn FeedbackStrategy>> = vec![Arc::new(ConstantStrategy { side: Side::Second, control: 0 })];
        let g2 = estimate_gamma2(&game, &m0, &p, &s2, &c).unwrap();
        assert_eq!(g1.value, g.eval(1.0, &m0));
        assert_eq!(g2.value, g.eval(1.0, &m0));
    }

    #[test]
    fn cancelling_controls_stationary() {
        let spec = affine(&[-1.0, 0.0, 1.0], &[-1.0, 0.0, 1.0]);
        let g = CylindricalFunctional::mean_cos(vec![1], 1.0);
        let game = Game {
            spec: &spec,
            payoff: &g,
            horizon: 0.5,
            flow: FlowSettings { dt: 0.05, ..Default::default() },
        };
        let m0 = cloud(&[0.2, 0.6]);
        let p = Partition::uniform(0.0, 0.5, 5).unwrap();
        let adv = StrategyResponse(Arc::new(ConstantStrategy { side: Side::Second, control: 0 }));
        let rec = play_stepwise(&game, &m0, &ConstantStrategy { side: Side::First, control: 2 }, &adv, &p).unwrap();
        for (a, b) in rec.terminal().atoms().iter().zip(m0.atoms()) {
            assert!((a.point.coords()[0] - b.point.coords()[0]).abs() < 1e-12);
        }
        // A single-entry pool returns its one outcome.
        let s: Vec<Arc<dyn FeedbackStrategy>> = vec![Arc::new(ConstantStrategy { side: Side::First, control: 2 })];
        let c: Vec<Arc<dyn CompletionPolicy>> = vec![Arc::new(adv)];
        assert_eq!(estimate_gamma1(&game, &m0, &p, &s, &c).unwrap().value, rec.outcome);
    }

    #[test]
    fn marginal_violation_rejected() {
        struct Bad;
        impl FeedbackStrategy for Bad {
            fn side(&self) -> Side {
                Side::First
            }
            fn decide(&self, _: &DynamicsSpec, _: f64, _: &DiscreteMeasure) -> Result<DiscreteMeasure> {
                DiscreteMeasure::new(vec![Atom::with_control(TorusPoint::scalar(0.0), 0, 1.0)])
            }
            fn label(&self) -> String {
                "bad".into()
            }
        }
        let spec = zero();
        let g = CylindricalFunctional::constant(0.0);
        let game = Game {
            spec: &spec,
            payoff: &g,
            horizon: 1.0,
            flow: FlowSettings::default(),
        };
        let r = play_stepwise(&game, &cloud(&[0.3]), &Bad, &RandomMixtures { seed: 0, pure: true }, &Partition::uniform(0.0, 1.0, 2).unwrap());
        assert!(matches!(r, Err(Error::Structural(_))));
    }

    #[test]
    fn oracle_zero_dynamics_is_payoff() {
        let spec = zero();
        let g = CylindricalFunctional::mean_cos(vec![1], 1.0);
        let o = ValueOracle::build(&spec, &g, 8, 2, 4, 0.0, 1.0).unwrap();
        for k in 0..=4 {
            for i in 0..8 {
                for j in 0..8 {
                    let m = cloud(&[i as f64 / 8.0, j as f64 / 8.0]);
                    assert!((o.node_value(k, &[i, j]) - g.eval(1.0, &m)).abs() < 1e-12);
                }
            }
        }
        assert_eq!(o.isaacs_gap, 0.0);
    }

    /// Grid-exact game: speeds times dt are multiples of the cell size.
    fn exact_game() -> DynamicsSpec {
        affine(&[-1.0, 1.0], &[-1.0, 1.0])
    }

    fn tree(spec: &DynamicsSpec, g: &dyn MeasureFunctional, xs: &[f64], t: f64, dt: f64, left: usize) -> f64 {
        if left == 0 {
            return g.eval(1.0, &cloud(xs));
        }
        let n = xs.len();
        let nu = spec.u_grid.len();
        let nv = spec.v_grid.len();
        let mut best = f64::INFINITY;
        for a in 0..nu.pow(n as u32) {
            let mut worst = f64::NEG_INFINITY;
            for b in 0..nv.pow(n as u32) {
                let m = cloud(xs);
                let next: Vec<f64> = (0..n)
                    .map(|p| {
                        let u = a / nu.pow(p as u32) % nu;
                        let v = b / nv.pow(p as u32) % nv;
                        wrap(xs[p] + dt * spec.f(t, &TorusPoint::scalar(xs[p]), &m, u, v)[0])
                    })
                    .collect();
                worst = worst.max(tree(spec, g, &next, t + dt, dt, left - 1));
            }
            best = best.min(worst);
        }
        best
    }

    #[test]
    fn oracle_matches_game_tree_on_nonlinear_payoff() {
        let spec = exact_game();
        let square = CylindricalFunctional {
            quadratic: vec![vec![1.0]],
            linear: vec![0.0],
            ..CylindricalFunctional::mean_cos(vec![1], 1.0)
        };
        let o = ValueOracle::build(&spec, &square, 8, 2, 4, 0.5, 1.0).unwrap();
        let dt = o.dt();
        assert!((dt - 0.125).abs() < 1e-15);
        let mut differs_from_linear = false;
        let lin = ValueOracle::build(&spec, &CylindricalFunctional::mean_cos(vec![1], 1.0), 8, 1, 4, 0.5, 1.0).unwrap();
        for i in 0..8 {
            for j in i..8 {
                let xs = [i as f64 / 8.0, j as f64 / 8.0];
                let exact = tree(&spec, &square, &xs, 0.5, dt, 4);
                assert!((o.node_value(0, &[i, j]) - exact).abs() < 1e-12, "{i} {j}");
                let avg = 0.5 * (lin.node_value(0, &[i]) + lin.node_value(0, &[j]));
                differs_from_linear |= (o.node_value(0, &[i, j]) - avg * avg).abs() > 1e-6 || (o.node_value(0, &[i, j]) - avg).abs() > 1e-6;
            }
        }
        assert!(differs_from_linear);
    }

    #[test]
    fn single_particle_matches_direct_recursion() {
        // Independent scalar semi-Lagrangian recursion on the same grid.
        let spec = affine(&[-1.0, 0.0, 1.0], &[-0.5, 0.0, 0.5]);
        let g = CylindricalFunctional::mean_cos(vec![1], 1.0);
        let o = ValueOracle::build(&spec, &g, 8, 1, 16, 0.0, 1.0).unwrap();
        let dt = 1.0 / 16.0;
        let mut v: Vec<f64> = (0..8).map(|i| (2.0 * std::f64::consts::PI * i as f64 / 8.0).cos()).collect();
        let interp = |v: &[f64], x: f64| {
            let y = wrap(x) * 8.0;
            let i = y.floor() as usize % 8;
            let th = y - y.floor();
            (1.0 - th) * v[i] + th * v[(i + 1) % 8]
        };
        for _ in 0..16 {
            v = (0..8)
                .map(|i| {
                    let x = i as f64 / 8.0;
                    [-1.0, 0.0, 1.0]
                        .iter()
                        .map(|u| [-0.5, 0.0, 0.5].iter().map(|w| interp(&v, x + dt * (u + w))).fold(f64::NEG_INFINITY, f64::max))
                        .fold(f64::INFINITY, f64::min)
                })
                .collect();
        }
        for i in 0..8 {
            assert!((o.node_value(0, &[i]) - v[i]).abs() < 1e-12);
        }
        assert!(o.isaacs_gap >= 0.0);
        // Terminal slice is the payoff.
        assert_eq!(o.node_value(16, &[0]), 1.0);
    }

    #[test]
    fn linear_payoff_decomposes() {
        let spec = affine(&[-1.0, 0.0, 1.0], &[-0.5, 0.0, 0.5]);
        let g = CylindricalFunctional::mean_cos(vec![1], 1.0);
        let one = ValueOracle::build(&spec, &g, 8, 1, 16, 0.0, 1.0).unwrap();
        let two = ValueOracle::build(&spec, &g, 8, 2, 16, 0.0, 1.0).unwrap();
        for k in [0, 5, 16] {
            for i in 0..8 {
                for j in 0..8 {
                    let want = 0.5 * (one.node_value(k, &[i]) + one.node_value(k, &[j]));
                    assert!((two.node_value(k, &[i, j]) - want).abs() < 1e-12);
                }
            }
        }
        let m = cloud(&[0.13, 0.71]);
        let want = 0.5 * (one.eval(0.3, &cloud(&[0.13])) + one.eval(0.3, &cloud(&[0.71])));
        assert!((two.eval(0.3, &m) - want).abs() < 1e-12);
    }

    #[test]
    fn oracle_limits_enforced() {
        let spec = zero();
        let g = CylindricalFunctional::constant(0.0);
        assert!(ValueOracle::build(&spec, &g, 9, 1, 4, 0.0, 1.0).is_err());
        assert!(ValueOracle::build(&spec, &g, 8, 5, 4, 0.0, 1.0).is_err());
        assert!(ValueOracle::build(&spec, &g, 8, 1, 33, 0.0, 1.0).is_err());
    }

    #[test]
    fn quantile_expansion() {
        let spec = zero();
        let o = ValueOracle::build(&spec, &CylindricalFunctional::constant(0.0), 8, 4, 2, 0.0, 1.0).unwrap();
        let m = DiscreteMeasure::new(vec![Atom::state(TorusPoint::scalar(0.2), 0.5), Atom::state(TorusPoint::scalar(0.7), 0.5)]).unwrap();
        assert_eq!(o.particles_of(&m), vec![0.2, 0.2, 0.7, 0.7]);
        assert_eq!(o.particles_of(&DiscreteMeasure::dirac(TorusPoint::scalar(0.4))), vec![0.4; 4]);
    }

    #[test]
    fn extremal_shift_first_step_is_lookahead() {
        let spec = affine(&[-1.0, 0.0, 1.0], &[-0.5, 0.0, 0.5]);
        let g = CylindricalFunctional::mean_cos(vec![1], 1.0);
        let es = ExtremalShift::new(Arc::new(g.clone()), Side::First, 0.1);
        let m = cloud(&[0.1, 0.9]);
        let a = es.decide(&spec, 0.0, &m).unwrap();
        // Minimizing cos: move away from 0 on each side.
        let c: Vec<usize> = a.atoms().iter().map(|x| x.control.unwrap()).collect();
        assert_eq!(c, vec![2, 0]);
        let free = zero();
        let es = ExtremalShift::new(Arc::new(FnFunctional(|_t: f64, _m: &DiscreteMeasure| 0.0)), Side::First, 0.1);
        let a = es.decide(&free, 0.0, &m).unwrap();
        assert!(a.atoms().iter().all(|x| x.control == Some(0)));
    }

    #[test]
    fn ordering_on_common_pools() {
        let spec = affine(&[-1.0, 0.0, 1.0], &[-0.5, 0.0, 0.5]);
        let g = CylindricalFunctional::mean_cos(vec![1], 1.0);
        let game = Game {
            spec: &spec,
            payoff: &g,
            horizon: 1.0,
            flow: FlowSettings { dt: 0.02, ..Default::default() },
        };
        let m0 = cloud(&[0.15, 0.6]);
        let p = Partition::uniform(0.0, 1.0, 8).unwrap();
        let firsts: Vec<Arc<dyn FeedbackStrategy>> = vec![
            Arc::new(ConstantStrategy { side: Side::First, control: 0 }),
            Arc::new(ConstantStrategy { side: Side::First, control: 2 }),
            Arc::new(ExtremalShift::new(Arc::new(g.clone()), Side::First, 0.125)),
        ];
        let seconds: Vec<Arc<dyn FeedbackStrategy>> = vec![
            Arc::new(ConstantStrategy { side: Side::Second, control: 0 }),
            Arc::new(ExtremalShift::new(Arc::new(g.clone()), Side::Second, 0.125)),
        ];
        let c1: Vec<Arc<dyn CompletionPolicy>> = seconds.iter().map(|s| Arc::new(StrategyResponse(s.clone())) as Arc<dyn CompletionPolicy>).collect();
        let c2: Vec<Arc<dyn CompletionPolicy>> = firsts.iter().map(|s| Arc::new(StrategyResponse(s.clone())) as Arc<dyn CompletionPolicy>).collect();
        let g1 = estimate_gamma1(&game, &m0, &p, &firsts, &c1).unwrap();
        let g2 = estimate_gamma2(&game, &m0, &p, &seconds, &c2).unwrap();
        assert!(g2.value <= g1.value + 1e-9, "{} > {}", g2.value, g1.value);
        for (i, row) in g1.outcomes.iter().enumerate() {
            for (j, o) in row.iter().enumerate() {
                assert!((o - g2.outcomes[j][i]).abs() < 1e-9);
            }
        }
    }
}
