//! Shift and transfer operators on direction measures and path ensembles.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::flow::{PathAtom, PathEnsemble};
use crate::measure::{total_variation, Atom, Base, DiscreteMeasure, SpaceTag};
use crate::ot::{wasserstein2, GroundMetric, TransportPlan};
use crate::torus::Velocity;

const JUNCTION_TOL: f64 = 1e-9;
const MARGINAL_TOL: f64 = 1e-10;

fn direction(a: &Atom) -> Result<&Velocity> {
    a.direction
        .as_ref()
        .ok_or_else(|| Error::structural("direction measure atom without direction"))
}

/// `Theta^tau # eta`: `(x, u, w) -> x + tau w`.
pub fn theta_shift(eta: &DiscreteMeasure, tau: f64) -> Result<DiscreteMeasure> {
    if !eta.tag().has_direction() {
        return Err(Error::structural("theta_shift needs a direction measure"));
    }
    Ok(eta.pushforward(|a| Atom::state(a.point.translate(a.direction.as_deref().unwrap_or(&[]), tau), a.weight)))
}

/// `Xi^tau # eta`: `(x, u, w) -> (x + tau w, u)`.
pub fn xi_shift(eta: &DiscreteMeasure, tau: f64) -> Result<DiscreteMeasure> {
    if eta.tag() != SpaceTag::StateControlDirection {
        return Err(Error::structural("xi_shift needs a state-control-direction measure"));
    }
    Ok(eta.pushforward(|a| Atom {
        point: a.point.translate(a.direction.as_deref().unwrap_or(&[]), tau),
        control: a.control,
        direction: None,
        weight: a.weight,
    }))
}

/// Composition `pi * lambda` of a plan between `source` and `target` with a
/// measure whose leading marginal is `target`. Each conditional
/// `lambda(. | x)` is carried back along the plan to the source atoms.
///
/// The base is the state-control factor when `source` has one, the state
/// factor otherwise; in the latter case the control travels with the fibre.
pub fn compose_plan(
    pi: &TransportPlan,
    source: &DiscreteMeasure,
    target: &DiscreteMeasure,
    lambda: &DiscreteMeasure,
) -> Result<DiscreteMeasure> {
    if pi.n_source != source.len() || pi.n_target != target.len() {
        return Err(Error::structural("plan dimensions differ from its marginals"));
    }
    let gap = pi.marginal_error(source, target);
    if gap > MARGINAL_TOL {
        return Err(Error::structural(format!("plan marginals off by {gap:e}")));
    }
    let base = if source.tag().has_control() {
        Base::StateControl
    } else {
        Base::State
    };
    let base_marginal = lambda.pushforward(|a| Atom {
        point: a.point.clone(),
        control: if base == Base::StateControl { a.control } else { None },
        direction: None,
        weight: a.weight,
    });
    let target_base = target.pushforward(|a| Atom {
        point: a.point.clone(),
        control: if base == Base::StateControl { a.control } else { None },
        direction: None,
        weight: a.weight,
    });
    let tv = total_variation(&base_marginal.merged(), &target_base.merged());
    if tv > MARGINAL_TOL {
        return Err(Error::structural(format!(
            "leading marginal of the composed measure differs from the plan target by {tv:e}"
        )));
    }
    let conditionals: BTreeMap<_, _> = lambda
        .disintegrate(base)?
        .into_iter()
        .map(|c| (c.base.base_key(base), c.fibre))
        .collect();
    let mut atoms = Vec::new();
    for &(i, j, mass) in &pi.entries {
        if mass <= 0.0 {
            continue;
        }
        let fibre = conditionals
            .get(&target.atoms()[j].base_key(base))
            .ok_or_else(|| Error::structural("plan moves mass onto an atom outside the composed measure"))?;
        let x = &source.atoms()[i];
        for y in fibre {
            atoms.push(Atom {
                point: x.point.clone(),
                control: if base == Base::StateControl { x.control } else { y.control },
                direction: y.direction.clone(),
                weight: mass * y.weight,
            });
        }
    }
    let out = DiscreteMeasure::normalized(atoms)?;
    match lambda.radius() {
        Some(c) => out.with_radius(c),
        None => Ok(out),
    }
}

/// `L^{t1,t2} # eta`: straight paths `y + (t - t1) w` sampled on
/// `segments + 1` equally spaced nodes, labelled with the control.
pub fn line_lift(eta: &DiscreteMeasure, t1: f64, t2: f64, segments: usize) -> Result<PathEnsemble> {
    if !(t2 > t1) || segments == 0 {
        return Err(Error::structural("line_lift needs t1 < t2 and at least one segment"));
    }
    let times: Vec<f64> = (0..=segments)
        .map(|k| if k == segments { t2 } else { t1 + (t2 - t1) * k as f64 / segments as f64 })
        .collect();
    let atoms = eta
        .atoms()
        .iter()
        .map(|a| {
            let w = direction(a)?;
            Ok(PathAtom {
                path: times.iter().map(|t| a.point.translate(w, t - t1)).collect(),
                control: a.control,
                weight: a.weight,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    PathEnsemble::new(times, atoms)
}

fn junction_key(a: &PathAtom, node: usize) -> (Vec<u64>, Option<usize>) {
    (a.path[node].coords().iter().map(|x| x.to_bits()).collect(), a.control)
}

/// `nu1 (.) nu2`: glues ensembles through the disintegration of `nu2` at the
/// common time. Matching is by exact junction atoms when possible and by an
/// optimal plan between the junction clouds otherwise.
pub fn concatenate(nu1: &PathEnsemble, nu2: &PathEnsemble) -> Result<PathEnsemble> {
    let t2 = nu1.end();
    if (nu2.start() - t2).abs() > 1e-12 * (1.0 + t2.abs()) {
        return Err(Error::structural(format!(
            "ensembles meet at different times {t2} and {}",
            nu2.start()
        )));
    }
    let last = nu1.times.len() - 1;
    let mut times = nu1.times.clone();
    times.extend_from_slice(&nu2.times[1..]);
    let glue = |a: &PathAtom, b: &PathAtom, w: f64| {
        let mut path = a.path.clone();
        path.extend_from_slice(&b.path[1..]);
        PathAtom {
            path,
            control: a.control,
            weight: w,
        }
    };

    let mut classes: BTreeMap<(Vec<u64>, Option<usize>), (f64, Vec<usize>)> = BTreeMap::new();
    for (j, b) in nu2.atoms.iter().enumerate() {
        let e = classes.entry(junction_key(b, 0)).or_insert((0.0, Vec::new()));
        e.0 += b.weight;
        e.1.push(j);
    }
    let mut mass1: BTreeMap<(Vec<u64>, Option<usize>), f64> = BTreeMap::new();
    for a in &nu1.atoms {
        *mass1.entry(junction_key(a, last)).or_insert(0.0) += a.weight;
    }
    let exact = mass1.len() == classes.len()
        && mass1
            .iter()
            .all(|(k, m)| classes.get(k).is_some_and(|(m2, _)| (m - m2).abs() <= JUNCTION_TOL));
    if exact {
        let mut atoms = Vec::new();
        for a in &nu1.atoms {
            let (m, members) = &classes[&junction_key(a, last)];
            for &j in members {
                let b = &nu2.atoms[j];
                atoms.push(glue(a, b, a.weight * b.weight / m));
            }
        }
        return PathEnsemble::new(times, normalize(atoms));
    }

    let end1 = junction_cloud(nu1, last)?;
    let start2 = junction_cloud(nu2, 0)?;
    let (gap, plan) = wasserstein2(&end1, &start2, &GroundMetric::default())?;
    if gap > JUNCTION_TOL {
        return Err(Error::Junction {
            gap,
            tolerance: JUNCTION_TOL,
        });
    }
    let atoms = plan
        .entries
        .iter()
        .filter(|e| e.2 > 0.0)
        .map(|&(i, j, w)| glue(&nu1.atoms[i], &nu2.atoms[j], w))
        .collect();
    PathEnsemble::new(times, normalize(atoms))
}

fn normalize(mut atoms: Vec<PathAtom>) -> Vec<PathAtom> {
    let s: f64 = atoms.iter().map(|a| a.weight).sum();
    for a in &mut atoms {
        a.weight /= s;
    }
    atoms
}

fn junction_cloud(nu: &PathEnsemble, node: usize) -> Result<DiscreteMeasure> {
    if nu.atoms.iter().all(|a| a.control.is_some()) {
        nu.state_control_marginal(node)
    } else {
        Ok(nu.marginal(node))
    }
}

/// `Delta^{s,r} # nu` over the whole ensemble interval.
pub fn difference_quotient(nu: &PathEnsemble) -> Result<DiscreteMeasure> {
    difference_quotient_between(nu, 0, nu.times.len() - 1)
}

/// `(x(s), u, (x(r) - x(s)) / (r - s))` per atom, with `s`, `r` the nodes
/// `i < j`. The secant is the sum of minimal per-step displacements, which
/// requires every grid step to move less than a quarter period.
pub fn difference_quotient_between(nu: &PathEnsemble, i: usize, j: usize) -> Result<DiscreteMeasure> {
    if i >= j || j >= nu.times.len() {
        return Err(Error::structural("difference quotient needs nodes i < j"));
    }
    let span = nu.times[j] - nu.times[i];
    let atoms = nu
        .atoms
        .iter()
        .enumerate()
        .map(|(k, a)| {
            let c = a
                .control
                .ok_or_else(|| Error::structural("difference quotient needs labelled paths"))?;
            for s in i..j {
                let step = a.path[s].displacement_to(&a.path[s + 1]);
                if step.iter().any(|d| d.abs() >= 0.25) {
                    return Err(Error::structural(format!(
                        "path {k} moves a quarter period between nodes {s} and {}; refine the grid",
                        s + 1
                    )));
                }
            }
            let w = nu.displacement(k, i, j).iter().map(|d| d / span).collect();
            Ok(Atom::with_direction(a.path[i].clone(), c, w, a.weight))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(DiscreteMeasure::from_parts_unchecked(
        atoms,
        SpaceTag::StateControlDirection,
        None,
    ))
}
