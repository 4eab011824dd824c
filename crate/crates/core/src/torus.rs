//! Flat torus `R^d / Z^d` with canonical representatives in `[0,1)^d`.

use serde::{Deserialize, Serialize};

/// Free vector of `R^d` (velocity or displacement).
pub type Velocity = Vec<f64>;

/// Reduce a real to its canonical representative in `[0, 1)`.
#[inline]
pub fn wrap(x: f64) -> f64 {
    let r = x - x.floor();
    // x.floor() can round so that r == 1.0 for tiny negative x
    if r >= 1.0 {
        0.0
    } else {
        r
    }
}

/// Minimal signed representative of a coordinate difference, in `[-1/2, 1/2)`.
#[inline]
pub fn wrap_signed(dx: f64) -> f64 {
    let r = wrap(dx + 0.5) - 0.5;
    if r < -0.5 {
        r + 1.0
    } else {
        r
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TorusPoint(Vec<f64>);

impl TorusPoint {
    pub fn new(coords: impl Into<Vec<f64>>) -> Self {
        let mut c: Vec<f64> = coords.into();
        for x in &mut c {
            *x = wrap(*x);
        }
        TorusPoint(c)
    }

    pub fn scalar(x: f64) -> Self {
        TorusPoint::new(vec![x])
    }

    pub fn coords(&self) -> &[f64] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    /// `self + scale * v` on the torus.
    pub fn translate(&self, v: &[f64], scale: f64) -> TorusPoint {
        debug_assert_eq!(v.len(), self.0.len());
        TorusPoint(
            self.0
                .iter()
                .zip(v)
                .map(|(x, w)| wrap(x + scale * w))
                .collect(),
        )
    }

    /// Minimal displacement `d` with `self + d = other`.
    pub fn displacement_to(&self, other: &TorusPoint) -> Velocity {
        self.0
            .iter()
            .zip(&other.0)
            .map(|(a, b)| wrap_signed(b - a))
            .collect()
    }

    /// Raw bit pattern, used as an exact grouping key.
    pub(crate) fn key(&self) -> Vec<u64> {
        self.0.iter().map(|x| x.to_bits()).collect()
    }
}

/// Squared torus distance; separates across coordinates.
pub fn torus_distance_sq(x: &TorusPoint, y: &TorusPoint) -> f64 {
    x.0.iter()
        .zip(&y.0)
        .map(|(a, b)| {
            let d = wrap_signed(b - a);
            d * d
        })
        .sum()
}

pub fn torus_distance(x: &TorusPoint, y: &TorusPoint) -> f64 {
    torus_distance_sq(x, y).sqrt()
}

pub fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn wrap_around_beats_direct() {
        let d = torus_distance(&TorusPoint::scalar(0.1), &TorusPoint::scalar(0.9));
        assert!((d - 0.2).abs() < 1e-15);
    }

    #[test]
    fn identity_distance_is_zero() {
        let x = TorusPoint::new(vec![0.3, 0.77]);
        assert_eq!(torus_distance(&x, &x), 0.0);
    }

    #[test]
    fn two_dimensional_separable() {
        let d = torus_distance(
            &TorusPoint::new(vec![0.9, 0.2]),
            &TorusPoint::new(vec![0.1, 0.1]),
        );
        assert!((d - (0.2f64 * 0.2 + 0.1 * 0.1).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn wrap_is_total() {
        for x in [-1e-300, -0.0, -3.25, 7.0, 1.0 - 1e-17, f64::EPSILON] {
            let r = wrap(x);
            assert!((0.0..1.0).contains(&r), "{x} -> {r}");
        }
    }

    #[test]
    fn translate_wraps() {
        let p = TorusPoint::scalar(0.9).translate(&[0.4], 0.5);
        assert!((p.coords()[0] - 0.1).abs() < 1e-12);
    }

    use proptest::prelude::*;

    proptest! {
        #[test]
        fn metric_axioms(a in proptest::collection::vec(-3.0f64..3.0, 3),
                         b in proptest::collection::vec(-3.0f64..3.0, 3),
                         c in proptest::collection::vec(-3.0f64..3.0, 3)) {
            let (x, y, z) = (TorusPoint::new(a), TorusPoint::new(b), TorusPoint::new(c));
            let dxy = torus_distance(&x, &y);
            prop_assert!((dxy - torus_distance(&y, &x)).abs() < 1e-15);
            prop_assert!(dxy <= torus_distance(&x, &z) + torus_distance(&z, &y) + 1e-12);
            prop_assert!(dxy <= 3f64.sqrt() / 2.0 + 1e-12);
            for v in x.coords() { prop_assert!((0.0..1.0).contains(v)); }
        }
    }
}
