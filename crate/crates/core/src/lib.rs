//! Lyapunov–Perron slow manifolds and reduction maps of fast-slow systems.
//!
//! `x' = F(x, y)`, `y' = g(x, y)` with `F(x, y) = A0(y) x + R0(x, y)` and an attracting
//! fast process. The crate computes the slow manifold `x = h(y)` as the fixed point of the
//! bounded-solution map, its first two derivatives, and the reduction map `P` projecting
//! initial data onto the slow-manifold orbit they are attracted to.

pub mod certify;
pub mod error;
pub mod integrate;
pub mod io;
pub mod harness;
pub mod model;
pub mod reduction;
pub mod slow_manifold;

pub use certify::{ConstantsCertificate, Provenance};
pub use error::{Result, SlowFastError};
pub use integrate::{IntegratorConfig, ProcessHandle};
pub use model::*;
