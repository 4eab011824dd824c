//! Quadratic optimal transport between particle clouds.
//!
//! Small problems are solved exactly by successive shortest augmenting paths
//! on the bipartite transportation network (Dijkstra with potentials). Larger
//! problems fall back to log-domain Sinkhorn with epsilon annealing, followed
//! by a rounding step that restores the marginals exactly.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::measure::{Atom, DiscreteMeasure};
use crate::torus::torus_distance_sq;

pub const DEFAULT_EXACT_THRESHOLD: usize = 64;

/// Product ground metric: l2 combination of torus distance, a metric on the
/// control grid and Euclidean distance on directions.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct GroundMetric {
    /// Pairwise distances between control indices. `None` means the discrete
    /// metric (0 on the diagonal, 1 elsewhere).
    pub control: Option<Vec<Vec<f64>>>,
}

impl GroundMetric {
    pub fn with_control_metric(matrix: Vec<Vec<f64>>) -> Self {
        GroundMetric { control: Some(matrix) }
    }

    pub fn dist_sq(&self, a: &Atom, b: &Atom) -> f64 {
        let mut d2 = torus_distance_sq(&a.point, &b.point);
        if let (Some(i), Some(j)) = (a.control, b.control) {
            let c = match &self.control {
                Some(m) => m[i][j],
                None => f64::from(u8::from(i != j)),
            };
            d2 += c * c;
        }
        if let (Some(v), Some(w)) = (&a.direction, &b.direction) {
            d2 += v.iter().zip(w).map(|(x, y)| (x - y) * (x - y)).sum::<f64>();
        }
        d2
    }
}

/// Coupling between two clouds stored as sparse triplets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransportPlan {
    pub n_source: usize,
    pub n_target: usize,
    /// `(source index, target index, mass)`
    pub entries: Vec<(usize, usize, f64)>,
    /// Quadratic cost of this plan.
    pub cost: f64,
}

impl TransportPlan {
    /// Diagonal plan between a cloud and itself.
    pub fn identity(m: &DiscreteMeasure) -> Self {
        TransportPlan {
            n_source: m.len(),
            n_target: m.len(),
            entries: m.atoms().iter().enumerate().map(|(i, a)| (i, i, a.weight)).collect(),
            cost: 0.0,
        }
    }

    pub fn row_sums(&self) -> Vec<f64> {
        let mut r = vec![0.0; self.n_source];
        for &(i, _, w) in &self.entries {
            r[i] += w;
        }
        r
    }

    pub fn col_sums(&self) -> Vec<f64> {
        let mut c = vec![0.0; self.n_target];
        for &(_, j, w) in &self.entries {
            c[j] += w;
        }
        c
    }

    /// Maximal marginal violation against the given clouds.
    pub fn marginal_error(&self, source: &DiscreteMeasure, target: &DiscreteMeasure) -> f64 {
        let r = self.row_sums();
        let c = self.col_sums();
        let er = r.iter().zip(source.atoms()).map(|(x, a)| (x - a.weight).abs());
        let ec = c.iter().zip(target.atoms()).map(|(x, a)| (x - a.weight).abs());
        er.chain(ec).fold(0.0, f64::max)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }
}

/// Which solver produced a plan.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SolveKind {
    Exact,
    /// Entropic approximation with its relative duality gap.
    Entropic { duality_gap: f64 },
}

#[derive(Debug, Clone)]
pub struct OtSolution {
    pub distance: f64,
    pub plan: TransportPlan,
    pub kind: SolveKind,
}

#[derive(Debug, Clone)]
pub struct OtSolver {
    pub exact_threshold: usize,
    pub entropic_final_eps: f64,
    pub entropic_max_iters: usize,
}

impl Default for OtSolver {
    fn default() -> Self {
        OtSolver {
            exact_threshold: DEFAULT_EXACT_THRESHOLD,
            entropic_final_eps: 1e-4,
            entropic_max_iters: 20_000,
        }
    }
}

impl OtSolver {
    pub fn solve(&self, m1: &DiscreteMeasure, m2: &DiscreteMeasure, ground: &GroundMetric) -> Result<OtSolution> {
        if m1.tag() != m2.tag() {
            return Err(Error::structural(format!(
                "transport between different spaces {:?} and {:?}",
                m1.tag(),
                m2.tag()
            )));
        }
        if m1.dim() != m2.dim() {
            return Err(Error::structural("transport between tori of different dimension"));
        }
        let cost: Vec<Vec<f64>> = m1
            .atoms()
            .iter()
            .map(|a| m2.atoms().iter().map(|b| ground.dist_sq(a, b)).collect())
            .collect();
        let a: Vec<f64> = m1.atoms().iter().map(|x| x.weight).collect();
        let b: Vec<f64> = m2.atoms().iter().map(|x| x.weight).collect();
        let (plan, kind) = if m1.len().max(m2.len()) <= self.exact_threshold {
            (exact_transport(&a, &b, &cost), SolveKind::Exact)
        } else {
            let (p, gap) = self.entropic_transport(&a, &b, &cost);
            (p, SolveKind::Entropic { duality_gap: gap })
        };
        Ok(OtSolution {
            distance: plan.cost.max(0.0).sqrt(),
            plan,
            kind,
        })
    }

    fn entropic_transport(&self, a: &[f64], b: &[f64], cost: &[Vec<f64>]) -> (TransportPlan, f64) {
        let (n, m) = (a.len(), b.len());
        let cmax = cost.iter().flatten().fold(0.0f64, |x, &y| x.max(y)).max(1e-300);
        let log_a: Vec<f64> = a.iter().map(|x| x.max(1e-300).ln()).collect();
        let log_b: Vec<f64> = b.iter().map(|x| x.max(1e-300).ln()).collect();
        let mut f = vec![0.0; n];
        let mut g = vec![0.0; m];
        let mut eps = cmax;
        let target_eps = self.entropic_final_eps * cmax;
        let mut iters = 0;
        loop {
            for _ in 0..200 {
                for i in 0..n {
                    let lse = log_sum_exp((0..m).map(|j| (g[j] - cost[i][j]) / eps + log_b[j]));
                    f[i] = -eps * lse;
                }
                for j in 0..m {
                    let lse = log_sum_exp((0..n).map(|i| (f[i] - cost[i][j]) / eps + log_a[i]));
                    g[j] = -eps * lse;
                }
                iters += 1;
            }
            if eps <= target_eps || iters >= self.entropic_max_iters {
                break;
            }
            eps = (eps * 0.5).max(target_eps);
        }
        let mut p: Vec<Vec<f64>> = (0..n)
            .map(|i| {
                (0..m)
                    .map(|j| ((f[i] + g[j] - cost[i][j]) / eps + log_a[i] + log_b[j]).exp())
                    .collect()
            })
            .collect();
        round_to_marginals(&mut p, a, b);
        let mut entries = Vec::new();
        let mut primal = 0.0;
        for (i, row) in p.iter().enumerate() {
            for (j, &w) in row.iter().enumerate() {
                if w > 0.0 {
                    entries.push((i, j, w));
                    primal += w * cost[i][j];
                }
            }
        }
        // Feasible dual from the c-transform of g.
        let f_ct: Vec<f64> = (0..n)
            .map(|i| (0..m).map(|j| cost[i][j] - g[j]).fold(f64::INFINITY, f64::min))
            .collect();
        let dual: f64 = f_ct.iter().zip(a).map(|(x, w)| x * w).sum::<f64>()
            + g.iter().zip(b).map(|(x, w)| x * w).sum::<f64>();
        let gap = (primal - dual).max(0.0) / primal.max(1e-300);
        (
            TransportPlan {
                n_source: n,
                n_target: m,
                entries,
                cost: primal,
            },
            gap,
        )
    }
}

/// Exact W2 and one optimal plan with the default solver settings.
pub fn wasserstein2(m1: &DiscreteMeasure, m2: &DiscreteMeasure, ground: &GroundMetric) -> Result<(f64, TransportPlan)> {
    let sol = OtSolver::default().solve(m1, m2, ground)?;
    Ok((sol.distance, sol.plan))
}

/// W2 distance only.
pub fn w2(m1: &DiscreteMeasure, m2: &DiscreteMeasure, ground: &GroundMetric) -> Result<f64> {
    Ok(wasserstein2(m1, m2, ground)?.0)
}

fn log_sum_exp(it: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = it.collect();
    let mx = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if mx == f64::NEG_INFINITY {
        return mx;
    }
    mx + v.iter().map(|x| (x - mx).exp()).sum::<f64>().ln()
}

/// Altschuler-Weed-Rigollet rounding onto the transport polytope.
fn round_to_marginals(p: &mut [Vec<f64>], a: &[f64], b: &[f64]) {
    for (i, row) in p.iter_mut().enumerate() {
        let s: f64 = row.iter().sum();
        if s > a[i] {
            let k = a[i] / s;
            row.iter_mut().for_each(|x| *x *= k);
        }
    }
    let m = b.len();
    for j in 0..m {
        let s: f64 = p.iter().map(|r| r[j]).sum();
        if s > b[j] {
            let k = b[j] / s;
            p.iter_mut().for_each(|r| r[j] *= k);
        }
    }
    let ra: Vec<f64> = p.iter().enumerate().map(|(i, r)| a[i] - r.iter().sum::<f64>()).collect();
    let cb: Vec<f64> = (0..m).map(|j| b[j] - p.iter().map(|r| r[j]).sum::<f64>()).collect();
    let total: f64 = ra.iter().sum();
    if total > 0.0 {
        for (i, row) in p.iter_mut().enumerate() {
            for j in 0..m {
                row[j] += ra[i].max(0.0) * cb[j].max(0.0) / total;
            }
        }
    }
}

/// Successive shortest paths on the transportation network.
///
/// Nodes `0..n` are sources, `n..n+m` sinks, then a super source and a super
/// sink. Arcs source->sink have infinite capacity; backward residual arcs
/// exist where flow is positive. Shortest paths use dense Dijkstra on
/// reduced costs with node potentials (rounding below zero is clamped), so
/// every augmenting path is read off a shortest-path tree. Each augmentation
/// saturates a supply, a demand, or a backward arc, which is set to exactly
/// zero so the loop terminates. Ties resolve to the smallest node index.
pub fn exact_transport(a: &[f64], b: &[f64], cost: &[Vec<f64>]) -> TransportPlan {
    let (n, m) = (a.len(), b.len());
    let src = n + m;
    let snk = n + m + 1;
    let nodes = n + m + 2;
    let mut flow = vec![vec![0.0f64; m]; n];
    let mut supply = a.to_vec();
    let mut demand = b.to_vec();
    let mut pot = vec![0.0f64; nodes];
    for j in 0..m {
        pot[n + j] = (0..n).map(|i| cost[i][j]).fold(f64::INFINITY, f64::min);
    }
    pot[snk] = (0..m).map(|j| pot[n + j]).fold(f64::INFINITY, f64::min).min(0.0);
    let guard_max = 4 * nodes * nodes + 64;
    for _ in 0..guard_max {
        if !supply.iter().any(|&s| s > 0.0) || !demand.iter().any(|&d| d > 0.0) {
            break;
        }
        let mut dist = vec![f64::INFINITY; nodes];
        let mut prev = vec![usize::MAX; nodes];
        let mut done = vec![false; nodes];
        dist[src] = 0.0;
        loop {
            let mut u = usize::MAX;
            for v in 0..nodes {
                if !done[v] && dist[v].is_finite() && (u == usize::MAX || dist[v] < dist[u]) {
                    u = v;
                }
            }
            if u == usize::MAX {
                break;
            }
            done[u] = true;
            let mut relax = |v: usize, c: f64, dist: &mut Vec<f64>| {
                let nd = dist[u] + (c + pot[u] - pot[v]).max(0.0);
                if nd < dist[v] {
                    dist[v] = nd;
                    prev[v] = u;
                }
            };
            if u == src {
                for i in 0..n {
                    if supply[i] > 0.0 {
                        relax(i, 0.0, &mut dist);
                    }
                }
            } else if u < n {
                for j in 0..m {
                    relax(n + j, cost[u][j], &mut dist);
                }
            } else if u < n + m {
                let j = u - n;
                for i in 0..n {
                    if flow[i][j] > 0.0 {
                        relax(i, -cost[i][j], &mut dist);
                    }
                }
                if demand[j] > 0.0 {
                    relax(snk, 0.0, &mut dist);
                }
            }
        }
        if !dist[snk].is_finite() {
            break;
        }
        for v in 0..nodes {
            pot[v] += dist[v].min(dist[snk]);
        }
        let mut path = vec![snk];
        let mut v = snk;
        while prev[v] != usize::MAX {
            v = prev[v];
            path.push(v);
        }
        path.reverse();
        // path = [src, i, n+j, i', ..., n+j', snk]
        let inner = &path[1..path.len() - 1];
        let first = inner[0];
        let sink = inner[inner.len() - 1];
        let mut delta = supply[first].min(demand[sink - n]);
        for w in inner.windows(2) {
            if w[0] >= n {
                delta = delta.min(flow[w[1]][w[0] - n]);
            }
        }
        if !(delta > 0.0) {
            break;
        }
        for w in inner.windows(2) {
            if w[0] < n {
                flow[w[0]][w[1] - n] += delta;
            } else {
                let f = &mut flow[w[1]][w[0] - n];
                *f -= delta;
                if *f <= delta * 1e-14 {
                    *f = 0.0;
                }
            }
        }
        supply[first] -= delta;
        if supply[first] <= delta * 1e-14 || supply[first] < 1e-16 {
            supply[first] = 0.0;
        }
        demand[sink - n] -= delta;
        if demand[sink - n] <= delta * 1e-14 || demand[sink - n] < 1e-16 {
            demand[sink - n] = 0.0;
        }
    }
    let mut entries = Vec::new();
    let mut c = 0.0;
    for i in 0..n {
        for j in 0..m {
            if flow[i][j] > 0.0 {
                entries.push((i, j, flow[i][j]));
                c += flow[i][j] * cost[i][j];
            }
        }
    }
    TransportPlan {
        n_source: n,
        n_target: m,
        entries,
        cost: c,
    }
}
