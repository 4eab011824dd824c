//! Finite weighted particle clouds over products of the torus, a finite
//! control grid and direction vectors.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::torus::{norm, TorusPoint, Velocity};

const WEIGHT_SUM_TOL: f64 = 1e-12;

/// Which product space a measure lives on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpaceTag {
    /// `T^d`
    State,
    /// `T^d x U` (or `T^d x V`)
    StateControl,
    /// `T^d x U x R^d`
    StateControlDirection,
    /// `T^d x R^d`
    StateDirection,
}

impl SpaceTag {
    fn of(control: bool, direction: bool) -> Self {
        match (control, direction) {
            (false, false) => SpaceTag::State,
            (true, false) => SpaceTag::StateControl,
            (true, true) => SpaceTag::StateControlDirection,
            (false, true) => SpaceTag::StateDirection,
        }
    }

    pub fn has_control(self) -> bool {
        matches!(self, SpaceTag::StateControl | SpaceTag::StateControlDirection)
    }

    pub fn has_direction(self) -> bool {
        matches!(self, SpaceTag::StateDirection | SpaceTag::StateControlDirection)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Atom {
    pub point: TorusPoint,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub control: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub direction: Option<Velocity>,
    pub weight: f64,
}

impl Atom {
    pub fn state(point: TorusPoint, weight: f64) -> Self {
        Atom {
            point,
            control: None,
            direction: None,
            weight,
        }
    }

    pub fn with_control(point: TorusPoint, control: usize, weight: f64) -> Self {
        Atom {
            point,
            control: Some(control),
            direction: None,
            weight,
        }
    }

    pub fn with_direction(point: TorusPoint, control: usize, direction: Velocity, weight: f64) -> Self {
        Atom {
            point,
            control: Some(control),
            direction: Some(direction),
            weight,
        }
    }

    pub fn tag(&self) -> SpaceTag {
        SpaceTag::of(self.control.is_some(), self.direction.is_some())
    }

    pub(crate) fn base_key(&self, base: Base) -> AtomKey {
        AtomKey {
            point: self.point.key(),
            control: match base {
                Base::State => None,
                Base::StateControl => self.control,
            },
        }
    }
}

/// Which leading factor is the base of a disintegration.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Base {
    State,
    StateControl,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub(crate) struct AtomKey {
    point: Vec<u64>,
    control: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteMeasure {
    atoms: Vec<Atom>,
    tag: SpaceTag,
    radius: Option<f64>,
}

impl DiscreteMeasure {
    pub fn new(atoms: Vec<Atom>) -> Result<Self> {
        let first = atoms
            .first()
            .ok_or_else(|| Error::structural("measure needs at least one atom"))?;
        let tag = first.tag();
        let dim = first.point.dim();
        let mut total = 0.0;
        for (i, a) in atoms.iter().enumerate() {
            if a.tag() != tag {
                return Err(Error::structural(format!(
                    "atom {i} lies in {:?}, measure declared {:?}",
                    a.tag(),
                    tag
                )));
            }
            if a.point.dim() != dim || a.direction.as_ref().is_some_and(|w| w.len() != dim) {
                return Err(Error::structural(format!("atom {i} has wrong dimension")));
            }
            if !(a.weight >= 0.0) || !a.weight.is_finite() {
                return Err(Error::structural(format!("atom {i} has weight {}", a.weight)));
            }
            total += a.weight;
        }
        if (total - 1.0).abs() > WEIGHT_SUM_TOL {
            return Err(Error::structural(format!("weights sum to {total}, expected 1")));
        }
        Ok(DiscreteMeasure {
            atoms,
            tag,
            radius: None,
        })
    }

    /// Normalizes the weights before validating.
    pub fn normalized(mut atoms: Vec<Atom>) -> Result<Self> {
        let total: f64 = atoms.iter().map(|a| a.weight).sum();
        if !(total > 0.0) {
            return Err(Error::structural("total weight must be positive"));
        }
        for a in &mut atoms {
            a.weight /= total;
        }
        Self::new(atoms)
    }

    /// Equal-weight cloud on `T^d`.
    pub fn uniform(points: Vec<TorusPoint>) -> Result<Self> {
        let w = 1.0 / points.len().max(1) as f64;
        Self::new(points.into_iter().map(|p| Atom::state(p, w)).collect())
    }

    pub fn dirac(point: TorusPoint) -> Self {
        Self::new(vec![Atom::state(point, 1.0)]).expect("dirac is valid")
    }

    /// Declares the direction ball `B_c`; fails if an atom leaves it.
    pub fn with_radius(mut self, c: f64) -> Result<Self> {
        for (i, a) in self.atoms.iter().enumerate() {
            if let Some(w) = &a.direction {
                if norm(w) > c + 1e-12 {
                    return Err(Error::structural(format!(
                        "direction of atom {i} has norm {} > radius {c}",
                        norm(w)
                    )));
                }
            }
        }
        self.radius = Some(c);
        Ok(self)
    }

    pub(crate) fn from_parts_unchecked(atoms: Vec<Atom>, tag: SpaceTag, radius: Option<f64>) -> Self {
        debug_assert!(atoms.iter().all(|a| a.tag() == tag));
        DiscreteMeasure { atoms, tag, radius }
    }

    pub fn atoms(&self) -> &[Atom] {
        &self.atoms
    }

    pub fn into_atoms(self) -> Vec<Atom> {
        self.atoms
    }

    pub fn len(&self) -> usize {
        self.atoms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.atoms.is_empty()
    }

    pub fn tag(&self) -> SpaceTag {
        self.tag
    }

    pub fn radius(&self) -> Option<f64> {
        self.radius
    }

    pub fn dim(&self) -> usize {
        self.atoms[0].point.dim()
    }

    pub fn total_weight(&self) -> f64 {
        self.atoms.iter().map(|a| a.weight).sum()
    }

    /// `h_# m`: atoms mapped pointwise, weights preserved.
    pub fn pushforward(&self, h: impl Fn(&Atom) -> Atom) -> DiscreteMeasure {
        let atoms: Vec<Atom> = self
            .atoms
            .iter()
            .map(|a| {
                let mut b = h(a);
                b.weight = a.weight;
                b
            })
            .collect();
        let tag = atoms[0].tag();
        let radius = if tag.has_direction() { self.radius } else { None };
        DiscreteMeasure::from_parts_unchecked(atoms, tag, radius)
    }

    /// `p^1_# m`
    pub fn state_marginal(&self) -> DiscreteMeasure {
        self.pushforward(|a| Atom::state(a.point.clone(), a.weight))
    }

    /// `p^{1,2}_# m`; requires a control factor.
    pub fn state_control_marginal(&self) -> Result<DiscreteMeasure> {
        if !self.tag.has_control() {
            return Err(Error::structural("measure has no control factor"));
        }
        Ok(self.pushforward(|a| Atom {
            point: a.point.clone(),
            control: a.control,
            direction: None,
            weight: a.weight,
        }))
    }

    /// Merges atoms with bit-identical support points.
    pub fn merged(&self) -> DiscreteMeasure {
        let mut out: Vec<Atom> = Vec::new();
        let mut index: BTreeMap<(AtomKey, Option<Vec<u64>>), usize> = BTreeMap::new();
        for a in &self.atoms {
            let key = (
                a.base_key(Base::StateControl),
                a.direction.as_ref().map(|w| w.iter().map(|x| x.to_bits()).collect()),
            );
            match index.get(&key) {
                Some(&i) => out[i].weight += a.weight,
                None => {
                    index.insert(key, out.len());
                    out.push(a.clone());
                }
            }
        }
        DiscreteMeasure::from_parts_unchecked(out, self.tag, self.radius)
    }

    /// Sum of squared distances to `reference` paired atom by atom.
    /// Upper bound for `W2^2` when both clouds share atom order and weights.
    pub fn paired_cost(&self, other: &DiscreteMeasure) -> f64 {
        self.atoms
            .iter()
            .zip(&other.atoms)
            .map(|(a, b)| a.weight * crate::torus::torus_distance_sq(&a.point, &b.point))
            .sum()
    }

    /// Disintegration along the leading factor(s).
    ///
    /// Zero-weight base classes are dropped. Each conditional keeps the
    /// non-base parts of its atoms with weights renormalized to one.
    pub fn disintegrate(&self, base: Base) -> Result<Vec<Conditional>> {
        if base == Base::StateControl && !self.tag.has_control() {
            return Err(Error::structural("cannot disintegrate along a missing control factor"));
        }
        let mut order: Vec<AtomKey> = Vec::new();
        let mut groups: BTreeMap<AtomKey, Conditional> = BTreeMap::new();
        for a in &self.atoms {
            let key = a.base_key(base);
            let entry = groups.entry(key.clone()).or_insert_with(|| {
                order.push(key);
                Conditional {
                    base: Atom {
                        point: a.point.clone(),
                        control: if base == Base::StateControl { a.control } else { None },
                        direction: None,
                        weight: 0.0,
                    },
                    fibre: Vec::new(),
                }
            });
            entry.base.weight += a.weight;
            entry.fibre.push(a.clone());
        }
        let mut out = Vec::with_capacity(order.len());
        for key in order {
            let mut c = groups.remove(&key).expect("key present");
            if c.base.weight <= 0.0 {
                continue;
            }
            for a in &mut c.fibre {
                a.weight /= c.base.weight;
            }
            out.push(c);
        }
        Ok(out)
    }

    /// Inverse of [`disintegrate`](Self::disintegrate).
    pub fn recompose(family: &[Conditional]) -> Result<DiscreteMeasure> {
        let atoms = family
            .iter()
            .flat_map(|c| {
                c.fibre.iter().map(move |a| Atom {
                    weight: a.weight * c.base.weight,
                    ..a.clone()
                })
            })
            .collect();
        DiscreteMeasure::normalized(atoms)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(&self.atoms)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let atoms: Vec<Atom> = serde_json::from_str(s)?;
        DiscreteMeasure::new(atoms)
    }

    /// Largest direction norm, zero when there is no direction factor.
    pub fn max_direction_norm(&self) -> f64 {
        self.atoms
            .iter()
            .filter_map(|a| a.direction.as_deref().map(norm))
            .fold(0.0, f64::max)
    }
}

/// One class of a disintegration: base atom (weight = marginal mass) and the
/// conditional probability on the fibre.
#[derive(Debug, Clone, PartialEq)]
pub struct Conditional {
    pub base: Atom,
    pub fibre: Vec<Atom>,
}

/// Total-variation distance between two measures after merging atoms.
pub fn total_variation(a: &DiscreteMeasure, b: &DiscreteMeasure) -> f64 {
    let mut acc: BTreeMap<(AtomKey, Option<Vec<u64>>), f64> = BTreeMap::new();
    let key = |x: &Atom| {
        (
            x.base_key(Base::StateControl),
            x.direction.as_ref().map(|w| w.iter().map(|v| v.to_bits()).collect()),
        )
    };
    for x in a.atoms() {
        *acc.entry(key(x)).or_default() += x.weight;
    }
    for x in b.atoms() {
        *acc.entry(key(x)).or_default() -= x.weight;
    }
    0.5 * acc.values().map(|v| v.abs()).sum::<f64>()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tp(x: f64) -> TorusPoint {
        TorusPoint::scalar(x)
    }

    #[test]
    fn rejects_bad_weights() {
        assert!(DiscreteMeasure::new(vec![Atom::state(tp(0.1), 0.7)]).is_err());
        assert!(DiscreteMeasure::new(vec![Atom::state(tp(0.1), -1.0), Atom::state(tp(0.2), 2.0)]).is_err());
        assert!(DiscreteMeasure::new(vec![]).is_err());
    }

    #[test]
    fn rejects_mixed_spaces() {
        let r = DiscreteMeasure::new(vec![Atom::state(tp(0.1), 0.5), Atom::with_control(tp(0.2), 0, 0.5)]);
        assert!(r.is_err());
    }

    #[test]
    fn shift_pushforward_wraps() {
        let m = DiscreteMeasure::uniform(vec![tp(0.8), tp(0.9)]).unwrap();
        let s = m.pushforward(|a| Atom::state(a.point.translate(&[0.3], 1.0), a.weight));
        assert!((s.atoms()[0].point.coords()[0] - 0.1).abs() < 1e-12);
        assert!((s.atoms()[1].point.coords()[0] - 0.2).abs() < 1e-12);
        assert_eq!(s.atoms()[0].weight, 0.5);
    }

    #[test]
    fn identity_pushforward_is_equal() {
        let m = DiscreteMeasure::uniform(vec![tp(0.8), tp(0.3)]).unwrap();
        assert_eq!(m.pushforward(|a| a.clone()), m);
    }

    #[test]
    fn projection_gives_state_marginal() {
        let alpha = DiscreteMeasure::new(vec![
            Atom::with_control(tp(0.1), 0, 0.25),
            Atom::with_control(tp(0.6), 2, 0.75),
        ])
        .unwrap();
        let m = alpha.state_marginal();
        assert_eq!(m.tag(), SpaceTag::State);
        assert_eq!(m.atoms()[1], Atom::state(tp(0.6), 0.75));
    }

    #[test]
    fn product_measure_conditionals_equal_q() {
        let xs = [0.1, 0.4, 0.7];
        let q = [(0usize, 0.3), (1usize, 0.7)];
        let atoms = xs
            .iter()
            .flat_map(|&x| q.iter().map(move |&(u, w)| Atom::with_control(tp(x), u, w / 3.0)))
            .collect();
        let joint = DiscreteMeasure::new(atoms).unwrap();
        let fam = joint.disintegrate(Base::State).unwrap();
        assert_eq!(fam.len(), 3);
        for c in &fam {
            assert!((c.base.weight - 1.0 / 3.0).abs() < 1e-15);
            let ws: Vec<_> = c.fibre.iter().map(|a| (a.control.unwrap(), a.weight)).collect();
            assert_eq!(ws.len(), 2);
            assert!((ws[0].1 - 0.3).abs() < 1e-14 && (ws[1].1 - 0.7).abs() < 1e-14);
        }
    }

    #[test]
    fn dirac_base_single_conditional() {
        let joint = DiscreteMeasure::new(vec![
            Atom::with_control(tp(0.5), 0, 0.4),
            Atom::with_control(tp(0.5), 1, 0.6),
        ])
        .unwrap();
        let fam = joint.disintegrate(Base::State).unwrap();
        assert_eq!(fam.len(), 1);
        assert_eq!(fam[0].fibre.len(), 2);
    }

    #[test]
    fn four_atom_recomposition() {
        let joint = DiscreteMeasure::new(vec![
            Atom::with_control(tp(0.2), 0, 0.1),
            Atom::with_control(tp(0.2), 1, 0.3),
            Atom::with_control(tp(0.9), 0, 0.45),
            Atom::with_control(tp(0.9), 2, 0.15),
        ])
        .unwrap();
        let fam = joint.disintegrate(Base::State).unwrap();
        assert_eq!(fam.len(), 2);
        assert!((fam[0].fibre[0].weight - 0.25).abs() < 1e-15);
        assert!((fam[1].fibre[1].weight - 0.25).abs() < 1e-15);
        let back = DiscreteMeasure::recompose(&fam).unwrap();
        assert!(total_variation(&back, &joint) < 1e-15);
    }

    #[test]
    fn zero_weight_class_excluded() {
        let joint = DiscreteMeasure::new(vec![
            Atom::with_control(tp(0.2), 0, 1.0),
            Atom::with_control(tp(0.9), 0, 0.0),
        ])
        .unwrap();
        assert_eq!(joint.disintegrate(Base::State).unwrap().len(), 1);
    }

    #[test]
    fn radius_enforced() {
        let eta = DiscreteMeasure::new(vec![Atom::with_direction(tp(0.2), 0, vec![2.0], 1.0)]).unwrap();
        assert!(eta.clone().with_radius(1.0).is_err());
        assert!(eta.with_radius(2.0).is_ok());
    }

    #[test]
    fn json_round_trip_full_precision() {
        let m = DiscreteMeasure::new(vec![
            Atom::with_direction(tp(0.1 + 0.2), 3, vec![1.0 / 3.0], 1.0 / 3.0),
            Atom::with_direction(tp(std::f64::consts::PI - 3.0), 0, vec![-0.7], 2.0 / 3.0),
        ])
        .unwrap();
        let s = m.to_json().unwrap();
        assert!(s.contains("\"control\":3"));
        assert_eq!(DiscreteMeasure::from_json(&s).unwrap(), m);
    }

    use proptest::prelude::*;

    proptest! {
        #[test]
        fn disintegrate_recompose_identity(
            raw in proptest::collection::vec((0usize..4, 0usize..3, 0.01f64..1.0), 1..12)
        ) {
            let xs = [0.05, 0.3, 0.55, 0.8];
            let total: f64 = raw.iter().map(|r| r.2).sum();
            let atoms = raw.iter().map(|&(i, u, w)| Atom::with_control(tp(xs[i]), u, w / total)).collect();
            let joint = DiscreteMeasure::normalized(atoms).unwrap();
            for base in [Base::State, Base::StateControl] {
                let back = DiscreteMeasure::recompose(&joint.disintegrate(base).unwrap()).unwrap();
                prop_assert!(total_variation(&back, &joint) < 1e-12);
            }
        }
    }
}
