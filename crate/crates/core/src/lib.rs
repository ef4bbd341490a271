//! Degenerate billiards: collision chains as critical points of discrete
//! action functionals, their hyperbolicity certificates, and numerical
//! shadowing by ordinary billiards with thin scatterers and by flows with
//! Newtonian singularities.
//!
//! Module map:
//! - [`dynamics`]: classical Hamiltonians, symplectic flow, Maupertuis action.
//! - [`bvp`]: fixed-energy two-point connections, twist, conjugacy test.
//! - [`scatterer`]: point sets and chart-immersed scatterers, tubes.
//! - [`dls`]: discrete Lagrangian systems, Newton solver, certificates, Routh reduction.
//! - [`billiard`]: event-driven billiards in the complement of a tube, shadowing.
//! - [`symbolic`]: collision graphs, path enumeration, topological entropy.
//! - [`kepler`]: Kepler equation, arc actions, three-body discrete Lagrangian.
//! - [`singular`]: Newtonian singular perturbations and the n-center experiment.

pub mod billiard;
pub mod bvp;
pub mod dls;
pub mod dynamics;
pub mod kepler;
pub mod linalg;
pub mod scatterer;
pub mod singular;
pub mod stats;
pub mod symbolic;

pub use nalgebra::{DMatrix, DVector};
