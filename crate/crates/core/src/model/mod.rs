//! Domain types: norms, grids, grid functions, orbit paths, systems and their transformations.

pub mod cutoff;
pub mod grid;
pub mod localize;
pub mod norm;
pub mod orbit;
pub mod system;

pub use cutoff::CutoffSpec;
pub use grid::{node_offsets, BoxDomain, GridDomain, GridFunction, MAX_SLOW_DIM};
pub use localize::{localize, AnalyticSheet, Localized, Sheet, ZeroSheet};
pub use norm::{op_norm, Norm};
pub use orbit::{FastState, OrbitPath, SlowState};
pub use system::{
    augment_epsilon, check_derivatives, eval_r0, fd_jacobians, r0_into, AtEpsilon, Augmented,
    DerivativeCheck, EpsilonFamily, FastSlowSystem, SystemRef,
};
