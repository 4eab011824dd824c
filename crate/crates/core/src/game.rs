//! The game datum: dynamics, control grids, the modified control metric,
//! vectograms and the Isaacs check.

use std::f64::consts::PI;
use std::fmt;
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::dist_to_hull;
use crate::measure::{Atom, DiscreteMeasure};
use crate::ot::{w2, GroundMetric};
use crate::torus::{dot, norm, torus_distance, TorusPoint, Velocity};

/// Which player's control is frozen (labels the paths) in a construction.
///
/// `First`: the first player (minimizer, controls `u`) is frozen; the
/// vectogram `F1` is the hull over the second player's grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Side {
    First,
    Second,
}

impl Side {
    pub fn other(self) -> Side {
        match self {
            Side::First => Side::Second,
            Side::Second => Side::First,
        }
    }
}

/// Pure velocity field `f(t, x, m, u, v)`; implementations must not keep
/// hidden state.
pub trait Dynamics: Send + Sync {
    fn velocity(&self, t: f64, x: &TorusPoint, m: &DiscreteMeasure, u: &[f64], v: &[f64]) -> Velocity;

    fn depends_on_measure(&self) -> bool {
        true
    }
}

/// Built-in dynamics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum DynamicsFamily {
    /// `f = a u + b v + drift` (u, v of dimension d).
    SeparableAffine {
        #[serde(default = "one")]
        u_scale: f64,
        #[serde(default = "one")]
        v_scale: f64,
        #[serde(default)]
        drift: Vec<f64>,
    },
    /// `f_i = k u_i v_i`.
    Bilinear {
        #[serde(default = "one")]
        k: f64,
    },
    /// `f(x, m) = strength * int sin(2 pi (y - x)) m(dy) + a u + b v`,
    /// coordinatewise.
    MeanFieldAttraction {
        #[serde(default = "one")]
        strength: f64,
        #[serde(default)]
        u_scale: f64,
        #[serde(default)]
        v_scale: f64,
    },
    /// `f_i = x_sin sin(2 pi x_i) + sum_k c_k u_i^p_k v_i^q_k`.
    CustomPolynomial {
        #[serde(default)]
        x_sin: f64,
        #[serde(default)]
        terms: Vec<PolyTerm>,
    },
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolyTerm {
    pub coeff: f64,
    #[serde(default)]
    pub u_pow: u32,
    #[serde(default)]
    pub v_pow: u32,
}

impl Dynamics for DynamicsFamily {
    fn velocity(&self, _t: f64, x: &TorusPoint, m: &DiscreteMeasure, u: &[f64], v: &[f64]) -> Velocity {
        let d = x.dim();
        let comp = |s: &[f64], i: usize| s.get(i).copied().unwrap_or(0.0);
        match self {
            DynamicsFamily::SeparableAffine { u_scale, v_scale, drift } => (0..d)
                .map(|i| u_scale * comp(u, i) + v_scale * comp(v, i) + comp(drift, i))
                .collect(),
            DynamicsFamily::Bilinear { k } => (0..d).map(|i| k * comp(u, i) * comp(v, i)).collect(),
            DynamicsFamily::MeanFieldAttraction {
                strength,
                u_scale,
                v_scale,
            } => {
                let xs = x.coords();
                (0..d)
                    .map(|i| {
                        let pull: f64 = m
                            .atoms()
                            .iter()
                            .map(|a| a.weight * (2.0 * PI * (a.point.coords()[i] - xs[i])).sin())
                            .sum();
                        strength * pull + u_scale * comp(u, i) + v_scale * comp(v, i)
                    })
                    .collect()
            }
            DynamicsFamily::CustomPolynomial { x_sin, terms } => {
                let xs = x.coords();
                (0..d)
                    .map(|i| {
                        let base = x_sin * (2.0 * PI * xs[i]).sin();
                        base + terms
                            .iter()
                            .map(|t| t.coeff * comp(u, i).powi(t.u_pow as i32) * comp(v, i).powi(t.v_pow as i32))
                            .sum::<f64>()
                    })
                    .collect()
            }
        }
    }

    fn depends_on_measure(&self) -> bool {
        matches!(self, DynamicsFamily::MeanFieldAttraction { strength, .. } if *strength != 0.0)
    }
}

/// `f` with the players' roles exchanged.
struct Mirrored(Arc<dyn Dynamics>);

impl Dynamics for Mirrored {
    fn velocity(&self, t: f64, x: &TorusPoint, m: &DiscreteMeasure, u: &[f64], v: &[f64]) -> Velocity {
        self.0.velocity(t, x, m, v, u)
    }

    fn depends_on_measure(&self) -> bool {
        self.0.depends_on_measure()
    }
}

/// Nondecreasing modulus of continuity with `w(0) = 0`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum Modulus {
    /// `k s`
    Linear { k: f64 },
    /// `k sqrt(s)`
    Sqrt { k: f64 },
    /// `k s^p`
    Power { k: f64, p: f64 },
}

impl Modulus {
    pub fn eval(&self, s: f64) -> f64 {
        let s = s.abs();
        match *self {
            Modulus::Linear { k } => k * s,
            Modulus::Sqrt { k } => k * s.sqrt(),
            Modulus::Power { k, p } => k * s.powf(p),
        }
    }
}

/// Finite control grid with the Euclidean base metric.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ControlGrid(pub Vec<Vec<f64>>);

impl ControlGrid {
    pub fn scalars(values: &[f64]) -> Self {
        ControlGrid(values.iter().map(|&v| vec![v]).collect())
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn get(&self, i: usize) -> &[f64] {
        &self.0[i]
    }

    pub fn base_distance(&self, i: usize, j: usize) -> f64 {
        self.0[i]
            .iter()
            .zip(&self.0[j])
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    }
}

#[derive(Clone)]
pub struct DynamicsSpec {
    pub dim: usize,
    pub u_grid: ControlGrid,
    pub v_grid: ControlGrid,
    pub dynamics: Arc<dyn Dynamics>,
    /// Lipschitz constant in `(x, m)`; at least one.
    pub lipschitz: f64,
    pub modulus: Modulus,
    pub speed_bound: f64,
}

impl fmt::Debug for DynamicsSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("DynamicsSpec")
            .field("dim", &self.dim)
            .field("u_grid", &self.u_grid)
            .field("v_grid", &self.v_grid)
            .field("lipschitz", &self.lipschitz)
            .field("modulus", &self.modulus)
            .field("speed_bound", &self.speed_bound)
            .finish()
    }
}

impl DynamicsSpec {
    pub fn new(
        dim: usize,
        u_grid: ControlGrid,
        v_grid: ControlGrid,
        dynamics: Arc<dyn Dynamics>,
        lipschitz: f64,
        modulus: Modulus,
        speed_bound: f64,
    ) -> Result<Self> {
        if dim == 0 {
            return Err(Error::structural("dimension must be positive"));
        }
        if u_grid.is_empty() || v_grid.is_empty() {
            return Err(Error::structural("control grids must be nonempty"));
        }
        if lipschitz < 1.0 {
            return Err(Error::structural(format!("Lipschitz constant {lipschitz} < 1")));
        }
        if modulus.eval(0.0) != 0.0 {
            return Err(Error::structural("modulus must vanish at zero"));
        }
        Ok(DynamicsSpec {
            dim,
            u_grid,
            v_grid,
            dynamics,
            lipschitz,
            modulus,
            speed_bound,
        })
    }

    /// `f(t, x, m, u_i, v_j)` by grid indices.
    pub fn f(&self, t: f64, x: &TorusPoint, m: &DiscreteMeasure, ui: usize, vj: usize) -> Velocity {
        self.dynamics.velocity(t, x, m, self.u_grid.get(ui), self.v_grid.get(vj))
    }

    /// Velocity averaged over mixtures of the two grids.
    pub fn f_mixed(&self, t: f64, x: &TorusPoint, m: &DiscreteMeasure, xi: &[f64], zeta: &[f64]) -> Velocity {
        let mut out = vec![0.0; self.dim];
        for (i, &p) in xi.iter().enumerate() {
            if p == 0.0 {
                continue;
            }
            for (j, &q) in zeta.iter().enumerate() {
                if q == 0.0 {
                    continue;
                }
                let v = self.f(t, x, m, i, j);
                for (o, c) in out.iter_mut().zip(v) {
                    *o += p * q * c;
                }
            }
        }
        out
    }

    pub fn grid(&self, side: Side) -> &ControlGrid {
        match side {
            Side::First => &self.u_grid,
            Side::Second => &self.v_grid,
        }
    }

    /// `w(rho(u', u'')) + rho(u', u'')` on the first player's grid.
    pub fn hat_rho_u(&self, i: usize, j: usize) -> f64 {
        let r = self.u_grid.base_distance(i, j);
        self.modulus.eval(r) + r
    }

    /// Same construction on the second player's grid.
    pub fn hat_rho_v(&self, i: usize, j: usize) -> f64 {
        let r = self.v_grid.base_distance(i, j);
        self.modulus.eval(r) + r
    }

    /// Ground metric for clouds over `T^d x U` (side First) or `T^d x V`.
    pub fn ground_metric(&self, side: Side) -> GroundMetric {
        let n = self.grid(side).len();
        let h = |i, j| match side {
            Side::First => self.hat_rho_u(i, j),
            Side::Second => self.hat_rho_v(i, j),
        };
        GroundMetric::with_control_metric((0..n).map(|i| (0..n).map(|j| h(i, j)).collect()).collect())
    }

    /// Vectogram with the `side` player's control frozen at `control`.
    pub fn vectogram(&self, side: Side, t: f64, x: &TorusPoint, m: &DiscreteMeasure, control: usize) -> Vectogram {
        let generators = match side {
            Side::First => (0..self.v_grid.len()).map(|j| self.f(t, x, m, control, j)).collect(),
            Side::Second => (0..self.u_grid.len()).map(|i| self.f(t, x, m, i, control)).collect(),
        };
        Vectogram {
            t,
            x: x.clone(),
            control,
            side,
            generators,
        }
    }

    /// `F1(t, x, m, u)`: hull over the second player's grid.
    pub fn eval_f1(&self, t: f64, x: &TorusPoint, m: &DiscreteMeasure, u: usize) -> Vectogram {
        self.vectogram(Side::First, t, x, m, u)
    }

    /// `F2(t, x, m, v)`: hull over the first player's grid.
    pub fn eval_f2(&self, t: f64, x: &TorusPoint, m: &DiscreteMeasure, v: usize) -> Vectogram {
        self.vectogram(Side::Second, t, x, m, v)
    }

    /// Players swapped: `f~(t, x, m, u, v) = f(t, x, m, v, u)`.
    pub fn mirrored(&self) -> DynamicsSpec {
        DynamicsSpec {
            dim: self.dim,
            u_grid: self.v_grid.clone(),
            v_grid: self.u_grid.clone(),
            dynamics: Arc::new(Mirrored(self.dynamics.clone())),
            lipschitz: self.lipschitz,
            modulus: self.modulus,
            speed_bound: self.speed_bound,
        }
    }

    /// `min_u max_v <w,f> - max_v min_u <w,f>` at random probes.
    pub fn check_isaacs<R: Rng>(&self, probes: usize, horizon: f64, rng: &mut R) -> IsaacsReport {
        let mut report = IsaacsReport {
            max_gap: 0.0,
            argmax: None,
        };
        for k in 0..probes {
            let probe = self.random_probe(horizon, rng);
            let gap = self.isaacs_gap(probe.t, &probe.x, &probe.m, &probe.w);
            if report.argmax.is_none() || gap > report.max_gap {
                report.max_gap = gap;
                report.argmax = Some((k, probe));
            }
        }
        report
    }

    pub fn isaacs_gap(&self, t: f64, x: &TorusPoint, m: &DiscreteMeasure, w: &[f64]) -> f64 {
        let (nu, nv) = (self.u_grid.len(), self.v_grid.len());
        let h: Vec<Vec<f64>> = (0..nu)
            .map(|i| (0..nv).map(|j| dot(w, &self.f(t, x, m, i, j))).collect())
            .collect();
        let minmax = h
            .iter()
            .map(|row| row.iter().cloned().fold(f64::NEG_INFINITY, f64::max))
            .fold(f64::INFINITY, f64::min);
        let maxmin = (0..nv)
            .map(|j| h.iter().map(|row| row[j]).fold(f64::INFINITY, f64::min))
            .fold(f64::NEG_INFINITY, f64::max);
        minmax - maxmin
    }

    fn random_probe<R: Rng>(&self, horizon: f64, rng: &mut R) -> Probe {
        let pt = |rng: &mut R| TorusPoint::new((0..self.dim).map(|_| rng.gen::<f64>()).collect::<Vec<_>>());
        let n_atoms = rng.gen_range(1..=4);
        let m = DiscreteMeasure::uniform((0..n_atoms).map(|_| pt(rng)).collect()).expect("nonempty");
        Probe {
            t: rng.gen::<f64>() * horizon,
            x: pt(rng),
            m,
            w: (0..self.dim).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        }
    }

    /// Spot check of the declared Lipschitz constant and speed bound.
    /// Returns the largest violations found (zero when consistent).
    pub fn spot_check<R: Rng>(&self, probes: usize, horizon: f64, rng: &mut R) -> Result<SpotCheck> {
        let mut out = SpotCheck::default();
        let ground = GroundMetric::default();
        for _ in 0..probes {
            let p1 = self.random_probe(horizon, rng);
            let p2 = self.random_probe(horizon, rng);
            let i = rng.gen_range(0..self.u_grid.len());
            let j = rng.gen_range(0..self.v_grid.len());
            let f1 = self.f(p1.t, &p1.x, &p1.m, i, j);
            let f2 = self.f(p1.t, &p2.x, &p2.m, i, j);
            let diff: Vec<f64> = f1.iter().zip(&f2).map(|(a, b)| a - b).collect();
            let bound = self.lipschitz * (torus_distance(&p1.x, &p2.x) + w2(&p1.m, &p2.m, &ground)?);
            out.lipschitz_excess = out.lipschitz_excess.max(norm(&diff) - bound);
            out.speed_excess = out.speed_excess.max(norm(&f1) - self.speed_bound);
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct SpotCheck {
    pub lipschitz_excess: f64,
    pub speed_excess: f64,
}

#[derive(Debug, Clone)]
pub struct Probe {
    pub t: f64,
    pub x: TorusPoint,
    pub m: DiscreteMeasure,
    pub w: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct IsaacsReport {
    pub max_gap: f64,
    pub argmax: Option<(usize, Probe)>,
}

/// Generators of `F1` (hull over `v`) or `F2` (hull over `u`) at an anchor.
#[derive(Debug, Clone, PartialEq)]
pub struct Vectogram {
    pub t: f64,
    pub x: TorusPoint,
    pub control: usize,
    pub side: Side,
    pub generators: Vec<Velocity>,
}

impl Vectogram {
    pub fn distance(&self, w: &[f64]) -> Result<f64> {
        dist_to_hull(w, &self.generators)
    }
}

pub fn dist_to_vectogram(w: &[f64], vg: &Vectogram) -> Result<f64> {
    vg.distance(w)
}

/// `int dist(w, F(t, x, p^1 eta, u)) d eta` for a direction measure.
pub fn mean_vectogram_distance(spec: &DynamicsSpec, side: Side, t: f64, eta: &DiscreteMeasure) -> Result<f64> {
    let m = eta.state_marginal();
    mean_vectogram_distance_at(spec, side, t, eta, &m)
}

/// Same with an explicit state measure in the vectogram.
pub fn mean_vectogram_distance_at(
    spec: &DynamicsSpec,
    side: Side,
    t: f64,
    eta: &DiscreteMeasure,
    m: &DiscreteMeasure,
) -> Result<f64> {
    let mut acc = 0.0;
    for a in eta.atoms() {
        let (Some(c), Some(w)) = (a.control, a.direction.as_ref()) else {
            return Err(Error::structural("direction measure atoms need control and direction"));
        };
        acc += a.weight * spec.vectogram(side, t, &a.point, m, c).distance(w)?;
    }
    Ok(acc)
}

/// Convenience: state-control cloud from points and control indices.
pub fn control_measure(points: &[(TorusPoint, usize)]) -> Result<DiscreteMeasure> {
    let w = 1.0 / points.len().max(1) as f64;
    DiscreteMeasure::new(
        points
            .iter()
            .map(|(p, c)| Atom::with_control(p.clone(), *c, w))
            .collect(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn affine_spec(u: &[f64], v: &[f64]) -> DynamicsSpec {
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

    fn bilinear_spec() -> DynamicsSpec {
        DynamicsSpec::new(
            1,
            ControlGrid::scalars(&[-1.0, 1.0]),
            ControlGrid::scalars(&[-1.0, 1.0]),
            Arc::new(DynamicsFamily::Bilinear { k: 1.0 }),
            1.0,
            Modulus::Linear { k: 1.0 },
            1.0,
        )
        .unwrap()
    }

    fn m0() -> DiscreteMeasure {
        DiscreteMeasure::dirac(TorusPoint::scalar(0.3))
    }

    #[test]
    fn hat_rho_examples() {
        let s = affine_spec(&[0.0, 0.04, 1.0], &[0.0]);
        assert_eq!(s.hat_rho_u(1, 1), 0.0);
        let lin = DynamicsSpec {
            modulus: Modulus::Linear { k: 3.0 },
            ..s.clone()
        };
        assert!((lin.hat_rho_u(0, 2) - 4.0).abs() < 1e-15);
        let sq = DynamicsSpec {
            modulus: Modulus::Sqrt { k: 1.0 },
            ..s
        };
        assert!((sq.hat_rho_u(0, 1) - 0.24).abs() < 1e-15);
    }

    #[test]
    fn lipschitz_below_one_rejected() {
        let s = affine_spec(&[0.0], &[0.0]);
        assert!(DynamicsSpec::new(1, s.u_grid.clone(), s.v_grid.clone(), s.dynamics.clone(), 0.5, s.modulus, 1.0).is_err());
    }

    #[test]
    fn hat_rho_metric_axioms_exhaustive() {
        let grid: Vec<f64> = (0..50).map(|i| -1.0 + 2.0 * i as f64 / 49.0).collect();
        let s = DynamicsSpec {
            modulus: Modulus::Sqrt { k: 2.0 },
            ..affine_spec(&grid, &[0.0])
        };
        for i in 0..50 {
            assert_eq!(s.hat_rho_u(i, i), 0.0);
            for j in 0..50 {
                let dij = s.hat_rho_u(i, j);
                assert_eq!(dij, s.hat_rho_u(j, i));
                assert!(dij >= s.u_grid.base_distance(i, j));
                if i != j {
                    assert!(dij > 0.0);
                }
                for k in 0..50 {
                    assert!(dij <= s.hat_rho_u(i, k) + s.hat_rho_u(k, j) + 1e-12);
                }
            }
        }
    }

    #[test]
    fn f1_separable_affine() {
        let s = affine_spec(&[0.0], &[-1.0, 0.0, 1.0]);
        let vg = s.eval_f1(0.0, &TorusPoint::scalar(0.2), &m0(), 0);
        assert_eq!(vg.generators, vec![vec![-1.0], vec![0.0], vec![1.0]]);
        assert!(vg.distance(&[0.5]).unwrap() < 1e-12);
        assert!((vg.distance(&[1.5]).unwrap() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn f1_degenerate_and_annihilated() {
        let free = DynamicsSpec {
            dynamics: Arc::new(DynamicsFamily::SeparableAffine {
                u_scale: 1.0,
                v_scale: 0.0,
                drift: vec![0.25],
            }),
            ..affine_spec(&[0.5], &[-1.0, 1.0])
        };
        let vg = free.eval_f1(0.0, &TorusPoint::scalar(0.2), &m0(), 0);
        assert!(vg.generators.iter().all(|g| g == &vec![0.75]));
        let bil = DynamicsSpec {
            u_grid: ControlGrid::scalars(&[0.0]),
            ..bilinear_spec()
        };
        let vg = bil.eval_f1(0.0, &TorusPoint::scalar(0.2), &m0(), 0);
        assert!(vg.generators.iter().all(|g| g[0] == 0.0));
    }

    #[test]
    fn isaacs_separable_zero_gap() {
        let s = affine_spec(&[-1.0, 0.0, 1.0], &[-0.5, 0.5]);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let r = s.check_isaacs(200, 1.0, &mut rng);
        assert!(r.max_gap.abs() < 1e-12);
    }

    #[test]
    fn isaacs_bilinear_gap_is_two_abs_w() {
        // H(u,v) = w u v on {-1,1}^2: min_u max_v = |w|, max_v min_u = -|w|.
        let s = bilinear_spec();
        for w in [-0.7, 0.0, 0.3, 1.0] {
            let gap = s.isaacs_gap(0.0, &TorusPoint::scalar(0.1), &m0(), &[w]);
            assert!((gap - 2.0 * f64::abs(w)).abs() < 1e-12);
        }
    }

    #[test]
    fn isaacs_control_free_zero_gap() {
        let s = DynamicsSpec {
            dynamics: Arc::new(DynamicsFamily::CustomPolynomial { x_sin: 1.0, terms: vec![] }),
            ..bilinear_spec()
        };
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        assert_eq!(s.check_isaacs(100, 1.0, &mut rng).max_gap, 0.0);
    }

    #[test]
    fn declared_constants_hold_for_mean_field() {
        let s = DynamicsSpec::new(
            1,
            ControlGrid::scalars(&[-1.0, 1.0]),
            ControlGrid::scalars(&[-0.5, 0.5]),
            Arc::new(DynamicsFamily::MeanFieldAttraction {
                strength: 1.0,
                u_scale: 1.0,
                v_scale: 1.0,
            }),
            4.0 * PI,
            Modulus::Linear { k: 1.0 },
            2.5,
        )
        .unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let sc = s.spot_check(1000, 1.0, &mut rng).unwrap();
        assert!(sc.lipschitz_excess <= 1e-9, "{sc:?}");
        assert!(sc.speed_excess <= 1e-9, "{sc:?}");
    }

    #[test]
    fn mirrored_swaps_players() {
        let s = affine_spec(&[1.0, 2.0], &[10.0]);
        let mi = s.mirrored();
        assert_eq!(mi.u_grid, s.v_grid);
        let x = TorusPoint::scalar(0.0);
        assert_eq!(mi.f(0.0, &x, &m0(), 0, 1), vec![12.0]);
    }
}
