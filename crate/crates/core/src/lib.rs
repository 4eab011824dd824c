//! Numerical toolkit for deterministic mean-field-type zero-sum differential
//! games on the flat torus.
//!
//! Probability states are finite weighted particle clouds. On top of that
//! substrate the crate provides optimal transport, self-consistent measure
//! flows driven by distributions of controls, the shift/transfer operators on
//! measures, directional u-/v-derivatives of functions of measures, stability
//! checks (infinitesimal and integral), the Euler-polygon witness
//! construction, and stepwise feedback play with a small dynamic-programming
//! value oracle.

pub mod engine;
pub mod error;
pub mod flow;
pub mod game;
pub mod geometry;
pub mod measure;
pub mod ot;
pub mod rng;
pub mod scenario;
pub mod selftest;
pub mod shift;
pub mod stability;
pub mod torus;

pub use error::{Error, Result};
pub use game::{DynamicsSpec, Side};
pub use measure::{Atom, DiscreteMeasure, SpaceTag};
pub use ot::{wasserstein2, GroundMetric, TransportPlan};
pub use torus::{torus_distance, TorusPoint};
