//! Agent characteristics and self-consistent measure flows driven by a
//! distribution of pairs of relaxed controls.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::game::{DynamicsSpec, Side};
use crate::geometry::dist_to_minkowski_sum;
use crate::measure::{total_variation, Atom, DiscreteMeasure};
use crate::torus::{norm, wrap, TorusPoint, Velocity};

/// Piecewise-constant-in-time mixture over a control grid.
#[derive(Debug, Clone, PartialEq)]
pub struct RelaxedControl {
    breaks: Vec<f64>,
    weights: Vec<Vec<f64>>,
}

impl RelaxedControl {
    pub fn new(breaks: Vec<f64>, weights: Vec<Vec<f64>>) -> Result<Self> {
        if breaks.len() < 2 || weights.len() + 1 != breaks.len() {
            return Err(Error::structural("relaxed control needs K+1 breaks for K cells"));
        }
        if breaks.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::structural("relaxed control breaks must increase"));
        }
        let n = weights[0].len();
        for (k, cell) in weights.iter().enumerate() {
            let s: f64 = cell.iter().sum();
            if cell.len() != n || cell.iter().any(|&p| p < 0.0) || (s - 1.0).abs() > 1e-12 {
                return Err(Error::structural(format!("cell {k} is not a probability vector")));
            }
        }
        Ok(RelaxedControl { breaks, weights })
    }

    /// Dirac at grid index `index` over `[s, r]`.
    pub fn constant(index: usize, grid_len: usize, s: f64, r: f64) -> Self {
        let mut w = vec![0.0; grid_len];
        w[index] = 1.0;
        RelaxedControl {
            breaks: vec![s, r],
            weights: vec![w],
        }
    }

    /// Time-independent mixture over `[s, r]`.
    pub fn mixture(weights: Vec<f64>, s: f64, r: f64) -> Result<Self> {
        Self::new(vec![s, r], vec![weights])
    }

    /// Pure grid indices per equal-length cell of `[s, r]`.
    pub fn pure_cells(indices: &[usize], grid_len: usize, s: f64, r: f64) -> Self {
        let k = indices.len();
        let breaks = (0..=k).map(|i| s + (r - s) * i as f64 / k as f64).collect();
        let weights = indices
            .iter()
            .map(|&i| {
                let mut w = vec![0.0; grid_len];
                w[i] = 1.0;
                w
            })
            .collect();
        RelaxedControl { breaks, weights }
    }

    /// Mixture in force at time `t` (right-continuous, clamped to the range).
    pub fn at(&self, t: f64) -> &[f64] {
        let k = self.breaks[1..self.breaks.len() - 1]
            .iter()
            .take_while(|&&b| b <= t)
            .count();
        &self.weights[k]
    }

    /// Grid index if this is the same Dirac in every cell.
    pub fn constant_index(&self) -> Option<usize> {
        let first = self.weights[0].iter().position(|&p| p == 1.0)?;
        self.weights.iter().all(|c| c[first] == 1.0).then_some(first)
    }

    pub fn start(&self) -> f64 {
        self.breaks[0]
    }

    pub fn end(&self) -> f64 {
        *self.breaks.last().expect("nonempty")
    }
}

/// One atom of a distribution of pairs of controls: a state point, its mass,
/// and the relaxed controls of both players acting on it.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlPair {
    pub point: TorusPoint,
    pub weight: f64,
    pub u: RelaxedControl,
    pub v: RelaxedControl,
}

/// Discrete distribution of pairs of controls (the disintegration
/// `kappa(.|x)` attached to each state particle).
#[derive(Debug, Clone, PartialEq)]
pub struct ControlDistribution {
    pub atoms: Vec<ControlPair>,
}

impl ControlDistribution {
    pub fn new(atoms: Vec<ControlPair>) -> Result<Self> {
        let s: f64 = atoms.iter().map(|a| a.weight).sum();
        if atoms.is_empty() || (s - 1.0).abs() > 1e-12 || atoms.iter().any(|a| a.weight < 0.0) {
            return Err(Error::structural("control distribution weights must form a probability"));
        }
        Ok(ControlDistribution { atoms })
    }

    /// Completes a distribution of constant controls of the `side` player.
    /// `respond(i)` lists the opponent's relaxed controls for atom `i` with
    /// conditional weights.
    pub fn complete(
        spec: &DynamicsSpec,
        side: Side,
        alpha: &DiscreteMeasure,
        s: f64,
        r: f64,
        mut respond: impl FnMut(usize, &Atom) -> Vec<(RelaxedControl, f64)>,
    ) -> Result<Self> {
        let n_own = spec.grid(side).len();
        let mut atoms = Vec::new();
        for (i, a) in alpha.atoms().iter().enumerate() {
            let c = a
                .control
                .ok_or_else(|| Error::structural("control distribution needs a control factor"))?;
            let own = RelaxedControl::constant(c, n_own, s, r);
            for (resp, w) in respond(i, a) {
                let (u, v) = match side {
                    Side::First => (own.clone(), resp),
                    Side::Second => (resp, own.clone()),
                };
                atoms.push(ControlPair {
                    point: a.point.clone(),
                    weight: a.weight * w,
                    u,
                    v,
                });
            }
        }
        ControlDistribution::new(atoms)
    }

    pub fn state_marginal(&self) -> Result<DiscreteMeasure> {
        DiscreteMeasure::new(
            self.atoms
                .iter()
                .map(|a| Atom::state(a.point.clone(), a.weight))
                .collect(),
        )
    }

    /// Label of each atom: the constant control of the `side` player.
    pub fn labels(&self, side: Side) -> Vec<Option<usize>> {
        self.atoms
            .iter()
            .map(|a| match side {
                Side::First => a.u.constant_index(),
                Side::Second => a.v.constant_index(),
            })
            .collect()
    }
}

/// Weighted set of (trajectory, control label) pairs sampled on a common
/// time grid.
#[derive(Debug, Clone, PartialEq)]
pub struct PathEnsemble {
    pub times: Vec<f64>,
    pub atoms: Vec<PathAtom>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PathAtom {
    pub path: Vec<TorusPoint>,
    pub control: Option<usize>,
    pub weight: f64,
}

impl PathEnsemble {
    pub fn new(times: Vec<f64>, atoms: Vec<PathAtom>) -> Result<Self> {
        if times.len() < 2 || times.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::structural("path time grid must have >= 2 increasing nodes"));
        }
        if atoms.iter().any(|a| a.path.len() != times.len()) {
            return Err(Error::structural("path length differs from time grid"));
        }
        let s: f64 = atoms.iter().map(|a| a.weight).sum();
        if atoms.is_empty() || (s - 1.0).abs() > 1e-12 {
            return Err(Error::structural(format!("path weights sum to {s}")));
        }
        Ok(PathEnsemble { times, atoms })
    }

    pub fn start(&self) -> f64 {
        self.times[0]
    }

    pub fn end(&self) -> f64 {
        *self.times.last().expect("nonempty")
    }

    pub fn node_index(&self, t: f64) -> Option<usize> {
        self.times.iter().position(|&s| (s - t).abs() <= 1e-12 * (1.0 + t.abs()))
    }

    /// `e_t # nu` at node `k`.
    pub fn marginal(&self, k: usize) -> DiscreteMeasure {
        let atoms = self
            .atoms
            .iter()
            .map(|a| Atom::state(a.path[k].clone(), a.weight))
            .collect();
        DiscreteMeasure::from_parts_unchecked(atoms, crate::measure::SpaceTag::State, None)
    }

    /// `(e_t, p^2) # nu` at node `k`; needs every atom labelled.
    pub fn state_control_marginal(&self, k: usize) -> Result<DiscreteMeasure> {
        let atoms = self
            .atoms
            .iter()
            .map(|a| {
                a.control
                    .map(|c| Atom::with_control(a.path[k].clone(), c, a.weight))
                    .ok_or_else(|| Error::structural("unlabelled path"))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(DiscreteMeasure::from_parts_unchecked(
            atoms,
            crate::measure::SpaceTag::StateControl,
            None,
        ))
    }

    /// Unwrapped displacement of atom `a` between nodes `i <= j`.
    pub fn displacement(&self, a: usize, i: usize, j: usize) -> Velocity {
        let p = &self.atoms[a].path;
        let mut d = vec![0.0; p[0].dim()];
        for k in i..j {
            for (di, s) in d.iter_mut().zip(p[k].displacement_to(&p[k + 1])) {
                *di += s;
            }
        }
        d
    }

    /// Largest excess of a step over `c * dt` (nonpositive when every path is
    /// `c`-Lipschitz on the grid).
    pub fn lipschitz_excess(&self, c: f64) -> f64 {
        let mut worst = f64::NEG_INFINITY;
        for a in &self.atoms {
            for k in 0..self.times.len() - 1 {
                let step = norm(&a.path[k].displacement_to(&a.path[k + 1]));
                worst = worst.max(step - c * (self.times[k + 1] - self.times[k]));
            }
        }
        worst
    }

    /// CSV rows `atom_id,t,x_1..x_d,weight,u_label`.
    pub fn to_csv(&self) -> String {
        let d = self.atoms[0].path[0].dim();
        let mut out = String::from("atom_id,t");
        for i in 1..=d {
            let _ = write!(out, ",x_{i}");
        }
        out.push_str(",weight,u_label\n");
        for (id, a) in self.atoms.iter().enumerate() {
            for (t, x) in self.times.iter().zip(&a.path) {
                let _ = write!(out, "{id},{t}");
                for c in x.coords() {
                    let _ = write!(out, ",{c}");
                }
                let label = a.control.map(|c| c.to_string()).unwrap_or_default();
                let _ = writeln!(out, ",{},{label}", a.weight);
            }
        }
        out
    }
}

/// Flow of probabilities `t -> m(t)` stored as aligned particle positions at
/// grid nodes, with node velocities for cubic Hermite interpolation.
#[derive(Debug, Clone, PartialEq)]
pub struct MeasureFlow {
    pub times: Vec<f64>,
    pub weights: Vec<f64>,
    pub positions: Vec<Vec<TorusPoint>>,
    pub velocities: Option<Vec<Vec<Velocity>>>,
}

impl MeasureFlow {
    /// `m(t) = m` on `[s, r]`.
    pub fn constant(m: &DiscreteMeasure, s: f64, r: f64) -> Self {
        let pts: Vec<TorusPoint> = m.atoms().iter().map(|a| a.point.clone()).collect();
        MeasureFlow {
            times: vec![s, r],
            weights: m.atoms().iter().map(|a| a.weight).collect(),
            positions: vec![pts.clone(), pts],
            velocities: None,
        }
    }

    pub fn start(&self) -> f64 {
        self.times[0]
    }

    pub fn end(&self) -> f64 {
        *self.times.last().expect("nonempty")
    }

    pub fn node(&self, k: usize) -> DiscreteMeasure {
        let atoms = self.positions[k]
            .iter()
            .zip(&self.weights)
            .map(|(p, &w)| Atom::state(p.clone(), w))
            .collect();
        DiscreteMeasure::from_parts_unchecked(atoms, crate::measure::SpaceTag::State, None)
    }

    pub fn at(&self, t: f64) -> Result<DiscreteMeasure> {
        let (s, r) = (self.start(), self.end());
        let slack = 1e-12 * (1.0 + t.abs());
        if t < s - slack || t > r + slack {
            return Err(Error::FlowUndefined { t, start: s, end: r });
        }
        let k = self.times[1..self.times.len() - 1]
            .iter()
            .take_while(|&&b| b <= t)
            .count();
        let (t0, t1) = (self.times[k], self.times[k + 1]);
        let h = t1 - t0;
        let th = ((t - t0) / h).clamp(0.0, 1.0);
        if th == 0.0 {
            return Ok(self.node(k));
        }
        if th == 1.0 {
            return Ok(self.node(k + 1));
        }
        let (h00, h10, h01, h11) = (
            2.0 * th.powi(3) - 3.0 * th * th + 1.0,
            th.powi(3) - 2.0 * th * th + th,
            -2.0 * th.powi(3) + 3.0 * th * th,
            th.powi(3) - th * th,
        );
        let atoms = (0..self.weights.len())
            .map(|a| {
                let x0 = &self.positions[k][a];
                let d = x0.displacement_to(&self.positions[k + 1][a]);
                let offset: Vec<f64> = match &self.velocities {
                    Some(v) => (0..d.len())
                        .map(|i| h10 * h * v[k][a][i] + h01 * d[i] + h11 * h * v[k + 1][a][i])
                        .collect(),
                    None => d.iter().map(|di| th * di).collect(),
                };
                let _ = h00;
                Atom::state(x0.translate(&offset, 1.0), self.weights[a])
            })
            .collect();
        Ok(DiscreteMeasure::from_parts_unchecked(
            atoms,
            crate::measure::SpaceTag::State,
            None,
        ))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FlowSettings {
    pub dt: f64,
    pub picard_tol: f64,
    pub max_iters: usize,
}

impl Default for FlowSettings {
    fn default() -> Self {
        FlowSettings {
            dt: 1e-3,
            picard_tol: 1e-8,
            max_iters: 200,
        }
    }
}

#[derive(Debug, Clone)]
pub struct FlowSolution {
    pub ensemble: PathEnsemble,
    pub flow: MeasureFlow,
    /// Sup-over-nodes update size per Picard sweep (all subintervals).
    pub picard_residuals: Vec<f64>,
    pub iterations: usize,
}

impl FlowSolution {
    pub fn terminal(&self) -> DiscreteMeasure {
        self.flow.node(self.flow.times.len() - 1)
    }
}

fn uniform_grid(s: f64, r: f64, dt: f64) -> Vec<f64> {
    let k = (((r - s) / dt) - 1e-9).ceil().max(1.0) as usize;
    (0..=k).map(|i| if i == k { r } else { s + (r - s) * i as f64 / k as f64 }).collect()
}

fn add_scaled(x: &[f64], k: &[f64], h: f64) -> Vec<f64> {
    x.iter().zip(k).map(|(a, b)| a + h * b).collect()
}

fn as_point(y: &[f64]) -> TorusPoint {
    TorusPoint::new(y.iter().map(|&c| wrap(c)).collect::<Vec<_>>())
}

/// One RK4 step of `dx/dt = int int f xi zeta` with controls held at their
/// value on the step midpoint.
#[allow(clippy::too_many_arguments)]
fn rk4_step(
    spec: &DynamicsSpec,
    t: f64,
    h: f64,
    y: &[f64],
    stage_measures: [&DiscreteMeasure; 3],
    xi: &[f64],
    zeta: &[f64],
) -> Vec<f64> {
    let [m0, mh, m1] = stage_measures;
    let k1 = spec.f_mixed(t, &as_point(y), m0, xi, zeta);
    let k2 = spec.f_mixed(t + h / 2.0, &as_point(&add_scaled(y, &k1, h / 2.0)), mh, xi, zeta);
    let k3 = spec.f_mixed(t + h / 2.0, &as_point(&add_scaled(y, &k2, h / 2.0)), mh, xi, zeta);
    let k4 = spec.f_mixed(t + h, &as_point(&add_scaled(y, &k3, h)), m1, xi, zeta);
    y.iter()
        .enumerate()
        .map(|(i, yi)| yi + h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]))
        .collect()
}

/// Motion of a representative agent in a given flow of probabilities.
pub fn solve_characteristic(
    spec: &DynamicsSpec,
    s: f64,
    r: f64,
    y: &TorusPoint,
    m_flow: &MeasureFlow,
    xi: &RelaxedControl,
    zeta: &RelaxedControl,
    dt: f64,
) -> Result<(Vec<f64>, Vec<TorusPoint>)> {
    let times = uniform_grid(s, r, dt);
    let mut path = vec![y.clone()];
    let mut state = y.coords().to_vec();
    for w in times.windows(2) {
        let (t, h) = (w[0], w[1] - w[0]);
        let ms = [m_flow.at(t)?, m_flow.at(t + h / 2.0)?, m_flow.at(t + h)?];
        let mid = t + h / 2.0;
        state = rk4_step(spec, t, h, &state, [&ms[0], &ms[1], &ms[2]], xi.at(mid), zeta.at(mid));
        path.push(as_point(&state));
    }
    Ok((times, path))
}

/// Self-consistent flow produced by `s`, `m_star` and `kappa`.
///
/// Picard iteration on the measure flow over subintervals of length at most
/// `0.5 / L`: freeze `m(.)`, integrate every particle, rebuild `m(.)`. The
/// update size is measured by the atom-paired coupling, an upper bound on
/// `W2`, so stopping below `picard_tol` certifies the `W2` criterion.
pub fn solve_flow(
    spec: &DynamicsSpec,
    s: f64,
    r: f64,
    m_star: &DiscreteMeasure,
    kappa: &ControlDistribution,
    labels_side: Side,
    settings: &FlowSettings,
) -> Result<FlowSolution> {
    if !(r > s) {
        return Err(Error::structural("flow interval must have r > s"));
    }
    let marginal = kappa.state_marginal()?;
    if total_variation(&marginal.merged(), &m_star.merged()) > 1e-10 {
        return Err(Error::structural("state marginal of kappa differs from m_star"));
    }
    let times = uniform_grid(s, r, settings.dt);
    let h = times[1] - times[0];
    let n = kappa.atoms.len();
    let weights: Vec<f64> = kappa.atoms.iter().map(|a| a.weight).collect();
    let mut positions: Vec<Vec<TorusPoint>> = vec![kappa.atoms.iter().map(|a| a.point.clone()).collect()];
    let mut velocities: Vec<Vec<Velocity>> = Vec::new();
    let coupled = spec.dynamics.depends_on_measure();
    let block = if coupled {
        ((0.5 / spec.lipschitz) / h).floor().max(1.0) as usize
    } else {
        times.len()
    };
    let mut residuals = Vec::new();
    let mut iterations = 0usize;
    let node_velocities = |t: f64, pts: &[TorusPoint], m: &DiscreteMeasure| -> Vec<Velocity> {
        kappa
            .atoms
            .iter()
            .zip(pts)
            .map(|(a, x)| spec.f_mixed(t, x, m, a.u.at(t), a.v.at(t)))
            .collect()
    };
    let mut k0 = 0usize;
    while k0 + 1 < times.len() {
        let k1 = (k0 + block).min(times.len() - 1);
        let local_times = times[k0..=k1].to_vec();
        let start = positions[k0].clone();
        let mut guess = MeasureFlow {
            times: local_times.clone(),
            weights: weights.clone(),
            positions: vec![start.clone(); local_times.len()],
            velocities: None,
        };
        let mut sweeps = 0;
        loop {
            sweeps += 1;
            let mut states: Vec<Vec<f64>> = start.iter().map(|p| p.coords().to_vec()).collect();
            let mut new_pos = vec![start.clone()];
            for (j, w) in local_times.windows(2).enumerate() {
                let (t, hh) = (w[0], w[1] - w[0]);
                let m0 = guess.node(j);
                let mh = guess.at(t + hh / 2.0)?;
                let m1 = guess.node(j + 1);
                let mid = t + hh / 2.0;
                for (a, st) in kappa.atoms.iter().zip(states.iter_mut()) {
                    *st = rk4_step(spec, t, hh, st, [&m0, &mh, &m1], a.u.at(mid), a.v.at(mid));
                }
                new_pos.push(states.iter().map(|y| as_point(y)).collect());
            }
            let vel: Vec<Vec<Velocity>> = local_times
                .iter()
                .zip(&new_pos)
                .map(|(&t, pts)| {
                    let m = DiscreteMeasure::from_parts_unchecked(
                        pts.iter().zip(&weights).map(|(p, &w)| Atom::state(p.clone(), w)).collect(),
                        crate::measure::SpaceTag::State,
                        None,
                    );
                    node_velocities(t, pts, &m)
                })
                .collect();
            let next = MeasureFlow {
                times: local_times.clone(),
                weights: weights.clone(),
                positions: new_pos,
                velocities: Some(vel),
            };
            let res = (0..local_times.len())
                .map(|k| next.node(k).paired_cost(&guess.node(k)).sqrt())
                .fold(0.0, f64::max);
            guess = next;
            if !coupled {
                break;
            }
            residuals.push(res);
            if res < settings.picard_tol {
                break;
            }
            if sweeps >= settings.max_iters {
                return Err(Error::PicardDiverged {
                    iterations: sweeps,
                    last: res,
                    residuals,
                });
            }
        }
        iterations = iterations.max(sweeps);
        let vel = guess.velocities.take().expect("set by sweep");
        if k0 == 0 {
            velocities.push(vel[0].clone());
        }
        positions.extend(guess.positions.into_iter().skip(1));
        velocities.extend(vel.into_iter().skip(1));
        k0 = k1;
    }
    let labels = kappa.labels(labels_side);
    let atoms = (0..n)
        .map(|a| PathAtom {
            path: positions.iter().map(|row| row[a].clone()).collect(),
            control: labels[a],
            weight: weights[a],
        })
        .collect();
    let ensemble = PathEnsemble::new(times.clone(), atoms)?;
    Ok(FlowSolution {
        ensemble,
        flow: MeasureFlow {
            times,
            weights,
            positions,
            velocities: Some(velocities),
        },
        picard_residuals: residuals,
        iterations,
    })
}

/// Integral differential-inclusion residual
/// `int dist(x(t'') - x(t'), sum_k dt_k F(t_k, x(t_k), m(t_k), label)) d nu`
/// between nodes `i1 <= i2`, with `m(t_k) = e_{t_k} # nu`. The time integral
/// of the set-valued map is the left-endpoint Riemann sum of vectograms.
pub fn verify_flow(spec: &DynamicsSpec, side: Side, ensemble: &PathEnsemble, i1: usize, i2: usize) -> Result<f64> {
    if i2 > ensemble.times.len() - 1 || i1 > i2 {
        return Err(Error::structural("verification nodes out of range"));
    }
    if i1 == i2 {
        return Ok(0.0);
    }
    let marginals: Vec<DiscreteMeasure> = (i1..i2).map(|k| ensemble.marginal(k)).collect();
    let mut total = 0.0;
    for (ai, a) in ensemble.atoms.iter().enumerate() {
        let c = a
            .control
            .ok_or_else(|| Error::structural("verify_flow needs labelled paths"))?;
        let sets: Vec<(f64, Vec<Velocity>)> = (i1..i2)
            .map(|k| {
                let dtk = ensemble.times[k + 1] - ensemble.times[k];
                let vg = spec.vectogram(side, ensemble.times[k], &a.path[k], &marginals[k - i1], c);
                (dtk, vg.generators)
            })
            .collect();
        let disp = ensemble.displacement(ai, i1, i2);
        total += a.weight * dist_to_minkowski_sum(&disp, &sets)?;
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::game::{ControlGrid, DynamicsFamily, Modulus};
    use std::f64::consts::PI;
    use std::sync::Arc;

    fn spec(dynamics: DynamicsFamily, u: &[f64], v: &[f64], l: f64) -> DynamicsSpec {
        DynamicsSpec::new(
            1,
            ControlGrid::scalars(u),
            ControlGrid::scalars(v),
            Arc::new(dynamics),
            l,
            Modulus::Linear { k: 1.0 },
            3.0,
        )
        .unwrap()
    }

    fn affine() -> DynamicsSpec {
        spec(
            DynamicsFamily::SeparableAffine {
                u_scale: 1.0,
                v_scale: 1.0,
                drift: vec![],
            },
            &[-1.0, 0.0, 1.0],
            &[-1.0, 0.0, 1.0],
            1.0,
        )
    }

    fn drift(c0: f64) -> DynamicsSpec {
        spec(
            DynamicsFamily::SeparableAffine {
                u_scale: 0.0,
                v_scale: 0.0,
                drift: vec![c0],
            },
            &[0.0],
            &[0.0],
            1.0,
        )
    }

    #[test]
    fn relaxed_control_lookup() {
        let rc = RelaxedControl::pure_cells(&[0, 2, 1], 3, 0.0, 0.3);
        assert_eq!(rc.at(0.05), &[1.0, 0.0, 0.0]);
        assert_eq!(rc.at(0.15), &[0.0, 0.0, 1.0]);
        assert_eq!(rc.at(0.3), &[0.0, 1.0, 0.0]);
        assert_eq!(rc.constant_index(), None);
        assert_eq!(RelaxedControl::constant(1, 3, 0.0, 1.0).constant_index(), Some(1));
        assert!(RelaxedControl::new(vec![0.0, 1.0], vec![vec![0.5, 0.4]]).is_err());
    }

    #[test]
    fn constant_velocity_is_exact() {
        let s = drift(0.7);
        let m = DiscreteMeasure::dirac(TorusPoint::scalar(0.5));
        let flow = MeasureFlow::constant(&m, 0.0, 1.0);
        let c = RelaxedControl::constant(0, 1, 0.0, 1.0);
        let (_, path) = solve_characteristic(&s, 0.0, 1.0, &TorusPoint::scalar(0.5), &flow, &c, &c, 0.01).unwrap();
        assert!((path.last().unwrap().coords()[0] - 0.2).abs() < 1e-12);
    }

    #[test]
    fn cancelling_controls_stationary() {
        let s = affine();
        let m = DiscreteMeasure::dirac(TorusPoint::scalar(0.3));
        let flow = MeasureFlow::constant(&m, 0.0, 1.0);
        let xi = RelaxedControl::constant(2, 3, 0.0, 1.0);
        let zeta = RelaxedControl::constant(0, 3, 0.0, 1.0);
        let (_, path) = solve_characteristic(&s, 0.0, 1.0, &TorusPoint::scalar(0.3), &flow, &xi, &zeta, 0.1).unwrap();
        assert!(path.iter().all(|p| (p.coords()[0] - 0.3).abs() < 1e-15));
    }

    #[test]
    fn sine_field_matches_closed_form() {
        // dx/dt = sin(2 pi x): tan(pi x(t)) = tan(pi y) exp(2 pi t).
        let s = spec(DynamicsFamily::CustomPolynomial { x_sin: 1.0, terms: vec![] }, &[0.0], &[0.0], 2.0 * PI);
        let m = DiscreteMeasure::dirac(TorusPoint::scalar(0.25));
        let flow = MeasureFlow::constant(&m, 0.0, 0.2);
        let c = RelaxedControl::constant(0, 1, 0.0, 0.2);
        let (_, path) = solve_characteristic(&s, 0.0, 0.2, &TorusPoint::scalar(0.25), &flow, &c, &c, 1e-3).unwrap();
        let exact = ((PI * 0.25).tan() * (2.0 * PI * 0.2).exp()).atan() / PI;
        assert!((path.last().unwrap().coords()[0] - exact).abs() < 1e-6);
    }

    #[test]
    fn flow_outside_range_is_error() {
        let m = DiscreteMeasure::dirac(TorusPoint::scalar(0.3));
        let flow = MeasureFlow::constant(&m, 0.0, 0.5);
        assert!(matches!(flow.at(0.7), Err(Error::FlowUndefined { .. })));
    }

    fn kappa_constant(m: &DiscreteMeasure, u: usize, v: usize, nu: usize, nv: usize, r: f64) -> ControlDistribution {
        ControlDistribution::new(
            m.atoms()
                .iter()
                .map(|a| ControlPair {
                    point: a.point.clone(),
                    weight: a.weight,
                    u: RelaxedControl::constant(u, nu, 0.0, r),
                    v: RelaxedControl::constant(v, nv, 0.0, r),
                })
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn uncoupled_flow_single_iteration_and_shift() {
        let s = drift(0.3);
        let m = DiscreteMeasure::uniform(vec![TorusPoint::scalar(0.1), TorusPoint::scalar(0.8)]).unwrap();
        let kappa = kappa_constant(&m, 0, 0, 1, 1, 1.0);
        let sol = solve_flow(&s, 0.0, 1.0, &m, &kappa, Side::First, &FlowSettings { dt: 0.05, ..Default::default() }).unwrap();
        assert_eq!(sol.iterations, 1);
        let end = sol.terminal();
        assert!((end.atoms()[0].point.coords()[0] - 0.4).abs() < 1e-12);
        assert!((end.atoms()[1].point.coords()[0] - 0.1).abs() < 1e-12);
    }

    #[test]
    fn kappa_marginal_mismatch_rejected() {
        let s = drift(0.3);
        let m = DiscreteMeasure::dirac(TorusPoint::scalar(0.1));
        let other = DiscreteMeasure::dirac(TorusPoint::scalar(0.2));
        let kappa = kappa_constant(&other, 0, 0, 1, 1, 1.0);
        assert!(solve_flow(&s, 0.0, 1.0, &m, &kappa, Side::First, &FlowSettings::default()).is_err());
    }

    #[test]
    fn verify_flow_on_true_flow_and_adversarial_lines() {
        let s = affine();
        let m = DiscreteMeasure::uniform(vec![TorusPoint::scalar(0.1), TorusPoint::scalar(0.6)]).unwrap();
        let kappa = kappa_constant(&m, 2, 0, 3, 3, 0.5);
        let sol = solve_flow(&s, 0.0, 0.5, &m, &kappa, Side::First, &FlowSettings { dt: 0.01, ..Default::default() }).unwrap();
        let last = sol.ensemble.times.len() - 1;
        assert!(verify_flow(&s, Side::First, &sol.ensemble, 0, last).unwrap() < 1e-12);
        assert_eq!(verify_flow(&s, Side::First, &sol.ensemble, 3, 3).unwrap(), 0.0);

        // f = 0, slope-one lines: residual equals elapsed time.
        let zero = drift(0.0);
        let times: Vec<f64> = (0..=10).map(|k| k as f64 * 0.03).collect();
        let path = times.iter().map(|t| TorusPoint::scalar(0.2 + t)).collect();
        let ens = PathEnsemble::new(
            times,
            vec![PathAtom {
                path,
                control: Some(0),
                weight: 1.0,
            }],
        )
        .unwrap();
        let r = verify_flow(&zero, Side::First, &ens, 2, 9).unwrap();
        assert!((r - 0.21).abs() < 1e-12);
    }

    #[test]
    fn control_free_time_reversal() {
        let fwd = spec(DynamicsFamily::CustomPolynomial { x_sin: 0.3, terms: vec![] }, &[0.0], &[0.0], 2.0);
        let bwd = spec(DynamicsFamily::CustomPolynomial { x_sin: -0.3, terms: vec![] }, &[0.0], &[0.0], 2.0);
        let m = DiscreteMeasure::uniform((0..5).map(|i| TorusPoint::scalar(0.07 + 0.19 * i as f64)).collect()).unwrap();
        let k1 = kappa_constant(&m, 0, 0, 1, 1, 0.5);
        let st = FlowSettings { dt: 1e-3, ..Default::default() };
        let a = solve_flow(&fwd, 0.0, 0.5, &m, &k1, Side::First, &st).unwrap().terminal();
        let k2 = kappa_constant(&a, 0, 0, 1, 1, 0.5);
        let b = solve_flow(&bwd, 0.0, 0.5, &a, &k2, Side::First, &st).unwrap().terminal();
        assert!(b.paired_cost(&m).sqrt() < 1e-6);
    }
}
